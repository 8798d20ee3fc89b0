//! Soft routing: gate probabilities, top-k selection and capacity-limited
//! token dropping with batch priority routing.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels;
use crate::params::ParamId;
use crate::tensor::Tensor;

/// Routing hyperparameters shared by every MoE layer of a model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoutingConfig {
    pub num_experts: usize,
    pub top_k: usize,
    pub capacity_factor: f64,
    /// Divide the selected gates by their sum. Off by default: the combine
    /// weights are the raw softmax probabilities.
    #[serde(default)]
    pub renormalize: bool,
}

impl RoutingConfig {
    pub fn new(num_experts: usize, top_k: usize, capacity_factor: f64) -> Result<Self> {
        let cfg = Self {
            num_experts,
            top_k,
            capacity_factor,
            renormalize: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_experts == 0 {
            return Err(Error::Config("num_experts must be at least 1".into()));
        }
        if self.top_k == 0 || self.top_k > self.num_experts {
            return Err(Error::Config(format!(
                "top_k must be in 1..={}, got {}",
                self.num_experts, self.top_k
            )));
        }
        if !(self.capacity_factor > 0.0 && self.capacity_factor.is_finite()) {
            return Err(Error::Config(format!(
                "capacity_factor must be positive, got {}",
                self.capacity_factor
            )));
        }
        Ok(())
    }

    /// Capacity factor at or above which nothing can be dropped.
    pub fn slack_capacity_factor(&self) -> f64 {
        self.num_experts as f64 / self.top_k as f64
    }
}

/// The gating matrix `W ∈ R^{D×E}` plus routing hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterState {
    pub weight: ParamId,
    pub config: RoutingConfig,
}

/// Routing outcome for one token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    /// Full gate distribution over experts.
    pub probs: Vec<f64>,
    /// Selected experts in descending probability.
    pub selected: Vec<usize>,
    /// Combine weights for `selected`.
    pub gates: Vec<f64>,
    /// `false` where the assignment was dropped for capacity.
    pub kept: Vec<bool>,
}

impl RoutingDecision {
    pub fn top1(&self) -> usize {
        self.selected[0]
    }
}

/// Summary of one capacity pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapacityReport {
    pub capacity: usize,
    pub assignments: usize,
    pub dropped: usize,
}

impl CapacityReport {
    pub fn drop_rate(&self) -> f64 {
        if self.assignments == 0 {
            0.0
        } else {
            self.dropped as f64 / self.assignments as f64
        }
    }
}

/// `softmax(x·W)` row by row, outside any tape.
pub fn route_probabilities(hidden: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let (k_tokens, d) = hidden.dims2()?;
    let (d2, e) = weight.dims2()?;
    if d != d2 {
        return Err(Error::shape("route_probabilities", hidden.shape(), weight.shape()));
    }
    let mut logits = vec![0.0; k_tokens * e];
    kernels::matmul(hidden.values(), weight.values(), k_tokens, d, e, &mut logits);
    for row in logits.chunks_mut(e.max(1)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    Tensor::new(vec![k_tokens, e], logits)
}

/// Differentiable `softmax(x·W)` on a tape.
pub fn route_probabilities_on(tape: &mut Tape, hidden: Var, weight: Var) -> Result<Var> {
    let logits = tape.matmul(hidden, weight)?;
    tape.softmax(logits, 1)
}

/// The `k` largest probabilities, ties broken by lower expert index.
/// Returns `(experts, gates)` in descending order; gates are the raw
/// probabilities.
pub fn select_top_k(probs: &[f64], k: usize) -> (Vec<usize>, Vec<f64>) {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order.truncate(k);
    let gates = order.iter().map(|&i| probs[i]).collect();
    (order, gates)
}

/// Index of the largest probability, lowest index on ties.
pub fn argmax(probs: &[f64]) -> usize {
    select_top_k(probs, 1).0[0]
}

/// Per-expert capacity `floor(c·k·K/E)`. A zero capacity drops every
/// assignment to that expert.
pub fn capacity(capacity_factor: f64, top_k: usize, tokens: usize, num_experts: usize) -> usize {
    // the 1e-9 slack keeps c = E/k from landing one short of K through rounding
    let raw = capacity_factor * top_k as f64 * tokens as f64 / num_experts as f64;
    (raw + 1e-9).floor() as usize
}

/// Routes every row of `probs` to its top-k experts, all kept.
pub fn decide(probs: &Tensor, top_k: usize) -> Result<Vec<RoutingDecision>> {
    let (_, e) = probs.dims2()?;
    if top_k == 0 || top_k > e {
        return Err(Error::invalid("decide", format!("top_k {top_k} with {e} experts")));
    }
    Ok((0..probs.shape()[0])
        .map(|t| {
            let row = probs.row(t).to_vec();
            let (selected, gates) = select_top_k(&row, top_k);
            RoutingDecision {
                kept: vec![true; selected.len()],
                probs: row,
                selected,
                gates,
            }
        })
        .collect())
}

/// Batch priority routing: for each expert, its assignments are ranked by
/// gate weight (descending, lower token index first on ties) and every
/// assignment ranked past the capacity is marked dropped. The ranking uses
/// the raw router probabilities, also when gates are later renormalized.
pub fn apply_capacity(
    decisions: &mut [RoutingDecision],
    num_experts: usize,
    top_k: usize,
    capacity_factor: f64,
) -> CapacityReport {
    let cap = capacity(capacity_factor, top_k, decisions.len(), num_experts);
    let mut per_expert: Vec<Vec<(usize, usize)>> = vec![Vec::new(); num_experts];
    let mut assignments = 0;
    for (t, d) in decisions.iter_mut().enumerate() {
        for (s, &e) in d.selected.iter().enumerate() {
            d.kept[s] = true;
            per_expert[e].push((t, s));
            assignments += 1;
        }
    }
    let mut dropped = 0;
    for list in per_expert.iter_mut() {
        if list.len() <= cap {
            continue;
        }
        list.sort_by(|&(ta, sa), &(tb, sb)| {
            decisions[tb].gates[sb]
                .total_cmp(&decisions[ta].gates[sa])
                .then(ta.cmp(&tb))
        });
        for &(t, s) in &list[cap..] {
            decisions[t].kept[s] = false;
            dropped += 1;
        }
    }
    CapacityReport {
        capacity: cap,
        assignments,
        dropped,
    }
}
