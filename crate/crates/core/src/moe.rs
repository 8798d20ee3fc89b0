//! Expert ensembles built by replicating a dense feed-forward unit, and
//! the sparse top-k forward pass.
//!
//! A feed-forward unit owns the affine part of the norm in front of it:
//! it computes `FFN(γ ⊙ n + β)` where `n` is the parameter-free
//! normalization of the residual stream. The router reads `n` directly, so
//! the MoE sublayer output for a token is
//!
//! ```text
//! Σ_{i ∈ kept top-k} P(n)_i · FFN_i(γ_i ⊙ n + β_i)
//! ```
//!
//! Replicating a unit therefore replicates its affine norm as well, which
//! is what makes the per-expert parameter count `W·F·factor + 2·W`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::analytics::{LayerTrace, TokenRoute};
use crate::autodiff::{Tape, Var};
use crate::batch::TokenBatch;
use crate::error::{Error, Result};
use crate::params::{Bindings, ParamGroup, ParamId, ParamStore};
use crate::router::{self, CapacityReport, RouterState, RoutingConfig, RoutingDecision};
use crate::tensor::Tensor;

/// Feed-forward unit with `factor` linear layers.
///
/// * factor 2: `GELU(a·W_in)·W_out`
/// * factor 3: `(GELU(a·W_in) ⊙ a·W_gate)·W_out`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FfnParams {
    pub norm_gain: ParamId,
    pub norm_bias: ParamId,
    pub w_in: ParamId,
    pub w_gate: Option<ParamId>,
    pub w_out: ParamId,
    pub width: usize,
    pub hidden: usize,
}

/// Router weight initialization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RouterInit {
    /// All-zero gating matrix: every token starts with uniform gates.
    #[default]
    Zeros,
    Normal {
        std: f64,
    },
}

pub(crate) fn normal_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("std is finite and non-negative");
    Tensor::from_fn(&[rows, cols], |_| dist.sample(rng))
}

impl FfnParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        group: ParamGroup,
        width: usize,
        hidden: usize,
        factor: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if !(2..=3).contains(&factor) {
            return Err(Error::Config(format!("ffn_factor must be 2 or 3, got {factor}")));
        }
        let in_std = 1.0 / (width as f64).sqrt();
        let out_std = 1.0 / (hidden as f64).sqrt();
        let norm_gain = store.push(format!("{prefix}.norm.gain"), group, Tensor::filled(&[width], 1.0));
        let norm_bias = store.push(format!("{prefix}.norm.bias"), group, Tensor::zeros(&[width]));
        let w_in = store.push(
            format!("{prefix}.w_in"),
            group,
            normal_matrix(rng, width, hidden, in_std),
        );
        let w_gate = (factor == 3).then(|| {
            store.push(
                format!("{prefix}.w_gate"),
                group,
                normal_matrix(rng, width, hidden, in_std),
            )
        });
        let w_out = store.push(
            format!("{prefix}.w_out"),
            group,
            normal_matrix(rng, hidden, width, out_std),
        );
        Ok(Self {
            norm_gain,
            norm_bias,
            w_in,
            w_gate,
            w_out,
            width,
            hidden,
        })
    }

    pub fn factor(&self) -> usize {
        if self.w_gate.is_some() {
            3
        } else {
            2
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.norm_gain, self.norm_bias, self.w_in];
        v.extend(self.w_gate);
        v.push(self.w_out);
        v
    }

    /// Multiply-accumulates per token through the linear layers.
    pub fn macs_per_token(&self) -> u64 {
        (self.width * self.hidden * self.factor()) as u64
    }

    /// Current values of this unit's buffers, in [`FfnParams::ids`] order.
    pub fn tensors(&self, store: &ParamStore) -> Vec<Tensor> {
        self.ids().into_iter().map(|id| store.get(id).clone()).collect()
    }

    fn push_copies(&self, values: Vec<Tensor>, into: &mut ParamStore, prefix: &str, group: ParamGroup) -> Self {
        let mut values = values.into_iter();
        let mut push = |suffix: &str| {
            let t = values.next().expect("one tensor per buffer");
            into.push(format!("{prefix}.{suffix}"), group, t)
        };
        let norm_gain = push("norm.gain");
        let norm_bias = push("norm.bias");
        let w_in = push("w_in");
        let w_gate = self.w_gate.map(|_| push("w_gate"));
        let w_out = push("w_out");
        Self {
            norm_gain,
            norm_bias,
            w_in,
            w_gate,
            w_out,
            width: self.width,
            hidden: self.hidden,
        }
    }

    /// Deep copy of every buffer into new entries under `prefix`.
    pub fn replicate(&self, store: &mut ParamStore, prefix: &str, group: ParamGroup) -> Self {
        let values = self.tensors(store);
        self.push_copies(values, store, prefix, group)
    }

    /// Deep copy from `from` into new entries of `into` under `prefix`.
    pub fn replicate_into(&self, from: &ParamStore, into: &mut ParamStore, prefix: &str, group: ParamGroup) -> Self {
        self.push_copies(self.tensors(from), into, prefix, group)
    }

    /// Applies the unit to rows that are already normalized (no affine).
    pub fn forward_normalized(
        &self,
        tape: &mut Tape,
        bind: &mut Bindings,
        store: &ParamStore,
        normed: Var,
    ) -> Result<Var> {
        let gain = bind.var(tape, store, self.norm_gain)?;
        let bias = bind.var(tape, store, self.norm_bias)?;
        let a = tape.affine(normed, Some(gain), Some(bias))?;
        let w_in = bind.var(tape, store, self.w_in)?;
        let h = tape.matmul(a, w_in)?;
        let mut act = tape.gelu(h)?;
        if let Some(wg) = self.w_gate {
            let wg = bind.var(tape, store, wg)?;
            let gate = tape.matmul(a, wg)?;
            act = tape.mul(act, gate)?;
        }
        let w_out = bind.var(tape, store, self.w_out)?;
        tape.matmul(act, w_out)
    }

    /// Full sublayer on the raw residual stream: normalize, affine, FFN.
    pub fn forward(&self, tape: &mut Tape, bind: &mut Bindings, store: &ParamStore, x: Var) -> Result<Var> {
        let n = tape.normalize(x)?;
        self.forward_normalized(tape, bind, store, n)
    }
}

/// `E` experts sharing one router.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertEnsemble {
    pub experts: Vec<FfnParams>,
    pub router: RouterState,
}

/// Builds an ensemble whose experts are bitwise copies of `ffn`.
pub fn init_from_ffn<R: Rng>(
    store: &mut ParamStore,
    prefix: &str,
    ffn: &FfnParams,
    config: RoutingConfig,
    router_init: RouterInit,
    rng: &mut R,
) -> Result<ExpertEnsemble> {
    let values = ffn.tensors(store);
    build_ensemble(store, prefix, ffn, values, config, router_init, rng)
}

/// Like [`init_from_ffn`], reading the parent unit from another store.
pub fn init_from_ffn_into<R: Rng>(
    source: &ParamStore,
    dest: &mut ParamStore,
    prefix: &str,
    ffn: &FfnParams,
    config: RoutingConfig,
    router_init: RouterInit,
    rng: &mut R,
) -> Result<ExpertEnsemble> {
    build_ensemble(dest, prefix, ffn, ffn.tensors(source), config, router_init, rng)
}

fn build_ensemble<R: Rng>(
    store: &mut ParamStore,
    prefix: &str,
    ffn: &FfnParams,
    values: Vec<Tensor>,
    config: RoutingConfig,
    router_init: RouterInit,
    rng: &mut R,
) -> Result<ExpertEnsemble> {
    config.validate()?;
    let experts = (0..config.num_experts)
        .map(|e| {
            ffn.push_copies(
                values.clone(),
                store,
                &format!("{prefix}.experts.{e}"),
                ParamGroup::Expert,
            )
        })
        .collect();
    let weight = match router_init {
        RouterInit::Zeros => Tensor::zeros(&[ffn.width, config.num_experts]),
        RouterInit::Normal { std } => normal_matrix(rng, ffn.width, config.num_experts, std),
    };
    let weight = store.push(format!("{prefix}.router"), ParamGroup::Router, weight);
    Ok(ExpertEnsemble {
        experts,
        router: RouterState { weight, config },
    })
}

/// Result of one MoE sublayer on a tape.
#[derive(Debug)]
pub struct MoeOutput {
    /// `K×D` weighted expert sum (without the residual).
    pub output: Var,
    /// `K×E` gate probabilities.
    pub probs: Var,
    pub decisions: Vec<RoutingDecision>,
    pub capacity: CapacityReport,
    /// Multiply-accumulates spent inside experts.
    pub expert_macs: u64,
}

impl ExpertEnsemble {
    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = self.experts.iter().flat_map(FfnParams::ids).collect();
        v.push(self.router.weight);
        v
    }

    /// Sparse forward of the sublayer on the raw residual stream `x`.
    ///
    /// Expert contributions are summed in ascending expert index.
    pub fn forward_on(&self, tape: &mut Tape, bind: &mut Bindings, store: &ParamStore, x: Var) -> Result<MoeOutput> {
        let cfg = self.router.config;
        let (rows, _) = tape.value(x).dims2()?;
        let normed = tape.normalize(x)?;
        let w = bind.var(tape, store, self.router.weight)?;
        let probs = router::route_probabilities_on(tape, normed, w)?;
        let mut decisions = router::decide(tape.value(probs), cfg.top_k)?;
        let capacity = router::apply_capacity(&mut decisions, cfg.num_experts, cfg.top_k, cfg.capacity_factor);
        let selected: Vec<Vec<usize>> = decisions.iter().map(|d| d.selected.clone()).collect();
        let gates = tape.gates(probs, &selected, cfg.renormalize)?;
        if cfg.renormalize {
            let gv = tape.value(gates).values();
            for (t, d) in decisions.iter_mut().enumerate() {
                d.gates.copy_from_slice(&gv[t * cfg.top_k..(t + 1) * cfg.top_k]);
            }
        }

        let flat_gates = tape.reshape(gates, vec![rows * cfg.top_k, 1])?;
        let mut acc: Option<Var> = None;
        let mut expert_macs = 0;
        for (e, expert) in self.experts.iter().enumerate() {
            let mut tokens = Vec::new();
            let mut slots = Vec::new();
            for (t, d) in decisions.iter().enumerate() {
                for (s, &sel) in d.selected.iter().enumerate() {
                    if sel == e && d.kept[s] {
                        tokens.push(t);
                        slots.push(t * cfg.top_k + s);
                    }
                }
            }
            if tokens.is_empty() {
                continue;
            }
            expert_macs += tokens.len() as u64 * expert.macs_per_token();
            let xin = tape.gather_rows(normed, &tokens)?;
            let y = expert.forward_normalized(tape, bind, store, xin)?;
            let g = tape.gather_rows(flat_gates, &slots)?;
            let scaled = tape.scale_rows(y, g)?;
            let placed = tape.scatter_add_rows(scaled, &tokens, rows)?;
            acc = Some(match acc {
                None => placed,
                Some(a) => tape.add(a, placed)?,
            });
        }
        let output = match acc {
            Some(v) => v,
            // every assignment dropped: the sublayer contributes nothing
            None => {
                let d = tape.value(x).shape()[1];
                tape.constant(Tensor::zeros(&[rows, d]))?
            }
        };
        Ok(MoeOutput {
            output,
            probs,
            decisions,
            capacity,
            expert_macs,
        })
    }

    /// Inference-only forward over a [`TokenBatch`], optionally recording
    /// the routing of every token.
    pub fn forward(
        &self,
        batch: &TokenBatch,
        store: &ParamStore,
        trace: Option<&mut LayerTrace>,
    ) -> Result<TokenBatch> {
        let (_, d) = batch.hidden.dims2()?;
        let width = self.experts.first().map_or(d, |f| f.width);
        if d != width {
            return Err(Error::shape("moe_forward", batch.hidden.shape(), &[batch.len(), width]));
        }
        let mut tape = Tape::new();
        let mut bind = Bindings::frozen();
        let x = tape.constant(batch.hidden.clone())?;
        let out = self.forward_on(&mut tape, &mut bind, store, x)?;
        if let Some(sink) = trace {
            record_layer(sink, &out.decisions, batch, 0);
        }
        Ok(TokenBatch {
            hidden: tape.value(out.output).clone(),
            modality: batch.modality.clone(),
            positions: batch.positions.clone(),
        })
    }
}

/// Appends routing records for `decisions` to a layer trace. `sequence`
/// offsets are derived from the batch positions.
pub fn record_layer(sink: &mut LayerTrace, decisions: &[RoutingDecision], batch: &TokenBatch, sequence_base: usize) {
    let mut seq = sequence_base;
    for (t, d) in decisions.iter().enumerate() {
        if t > 0 && batch.positions[t] <= batch.positions[t - 1] {
            seq += 1;
        }
        sink.tokens.push(TokenRoute {
            probs: d.probs.clone(),
            selected: d.selected.clone(),
            kept: d.kept.clone(),
            modality: batch.modality[t],
            position: batch.positions[t],
            sequence: seq,
        });
    }
}
