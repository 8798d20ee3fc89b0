//! Independent reference implementations used as test oracles. Nothing
//! here calls into the library's numeric code paths.
#![allow(dead_code)]

use moetune::analytics::{LayerTrace, RoutingTrace, TokenRoute};
use moetune::autodiff::Tape;
use moetune::batch::Modality;
use moetune::model::FeedForward;
use moetune::moe::{ExpertEnsemble, FfnParams, RouterInit};
use moetune::params::{Bindings, ParamGroup, ParamStore, Trainable};
use moetune::router::{RouterState, RoutingConfig};
use moetune::tuning::data::{make_synthetic_dataset, SyntheticConfig, TrainBatch};
use moetune::tuning::stage::loss_on;
use moetune::{ModelConfig, Tensor, ToyModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-scale..scale)).collect())
        .collect()
}

pub fn flatten(m: &[Vec<f64>]) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

pub fn to_tensor(m: &[Vec<f64>]) -> Tensor {
    Tensor::new(vec![m.len(), m.first().map_or(0, Vec::len)], flatten(m)).unwrap()
}

#[derive(Debug, Clone)]
pub struct ExpertWeights {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
    pub w_in: Vec<Vec<f64>>,
    pub w_gate: Option<Vec<Vec<f64>>>,
    pub w_out: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Instance {
    pub tokens: Vec<Vec<f64>>,
    pub router: Vec<Vec<f64>>,
    pub experts: Vec<ExpertWeights>,
    pub top_k: usize,
    pub capacity_factor: f64,
    pub renormalize: bool,
}

pub fn random_instance(rng: &mut impl Rng) -> Instance {
    let k_tokens = rng.random_range(1..=12);
    let d = rng.random_range(2..=6);
    let e = rng.random_range(1..=6);
    let h = rng.random_range(1..=5);
    let top_k = rng.random_range(1..=e);
    let gated = rng.random_bool(0.5);
    let factors = [0.25, 0.5, 1.0, 1.25, 1.5, 2.0, e as f64 / top_k as f64];
    let capacity_factor = factors[rng.random_range(0..factors.len())];
    let experts = (0..e)
        .map(|_| ExpertWeights {
            gain: (0..d).map(|_| rng.random_range(0.5..1.5)).collect(),
            bias: (0..d).map(|_| rng.random_range(-0.5..0.5)).collect(),
            w_in: matrix(rng, d, h, 1.0),
            w_gate: gated.then(|| matrix(rng, d, h, 1.0)),
            w_out: matrix(rng, h, d, 1.0),
        })
        .collect();
    Instance {
        tokens: matrix(rng, k_tokens, d, 2.0),
        router: matrix(rng, d, e, 2.0),
        experts,
        top_k,
        capacity_factor,
        renormalize: rng.random_bool(0.3),
    }
}

/// Builds the library ensemble holding exactly the instance's weights.
pub fn build_ensemble(inst: &Instance) -> (ParamStore, ExpertEnsemble) {
    let d = inst.tokens[0].len();
    let h = inst.experts[0].w_in[0].len();
    let factor = if inst.experts[0].w_gate.is_some() { 3 } else { 2 };
    let mut store = ParamStore::new();
    let mut r = rng(0);
    let mut experts = Vec::new();
    for (i, w) in inst.experts.iter().enumerate() {
        let f = FfnParams::init(&mut store, &format!("e{i}"), ParamGroup::Expert, d, h, factor, &mut r).unwrap();
        *store.get_mut(f.norm_gain) = Tensor::new(vec![d], w.gain.clone()).unwrap();
        *store.get_mut(f.norm_bias) = Tensor::new(vec![d], w.bias.clone()).unwrap();
        *store.get_mut(f.w_in) = to_tensor(&w.w_in);
        if let (Some(id), Some(g)) = (f.w_gate, &w.w_gate) {
            *store.get_mut(id) = to_tensor(g);
        }
        *store.get_mut(f.w_out) = to_tensor(&w.w_out);
        experts.push(f);
    }
    let weight = store.push("router", ParamGroup::Router, to_tensor(&inst.router));
    let config = RoutingConfig {
        num_experts: inst.experts.len(),
        top_k: inst.top_k,
        capacity_factor: inst.capacity_factor,
        renormalize: inst.renormalize,
    };
    (
        store,
        ExpertEnsemble {
            experts,
            router: RouterState { weight, config },
        },
    )
}

pub fn layer_norm(row: &[f64]) -> Vec<f64> {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    row.iter().map(|x| (x - mean) / (var + 1e-5).sqrt()).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = ex.iter().sum();
    ex.iter().map(|x| x / s).collect()
}

pub fn gelu_tanh(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn vec_mat(v: &[f64], m: &[Vec<f64>]) -> Vec<f64> {
    let cols = m[0].len();
    (0..cols)
        .map(|j| v.iter().zip(m).map(|(a, row)| a * row[j]).sum())
        .collect()
}

/// Top-k by repeated linear scans; the first maximum wins ties.
pub fn top_k_scan(probs: &[f64], k: usize) -> Vec<usize> {
    let mut taken = vec![false; probs.len()];
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for (i, &p) in probs.iter().enumerate() {
            if taken[i] {
                continue;
            }
            if best.is_none_or(|b| p > probs[b]) {
                best = Some(i);
            }
        }
        let b = best.unwrap();
        taken[b] = true;
        out.push(b);
    }
    out
}

pub fn capacity_of(c: f64, k: usize, tokens: usize, e: usize) -> usize {
    (c * k as f64 * tokens as f64 / e as f64 + 1e-9).floor() as usize
}

/// Kept flags by counting, for every assignment, how many competing
/// assignments to the same expert outrank it.
pub fn kept_by_rank(selected: &[Vec<usize>], gates: &[Vec<f64>], cap: usize) -> Vec<Vec<bool>> {
    selected
        .iter()
        .enumerate()
        .map(|(t, sel)| {
            sel.iter()
                .enumerate()
                .map(|(s, &e)| {
                    let g = gates[t][s];
                    let mut ahead = 0;
                    for (t2, sel2) in selected.iter().enumerate() {
                        for (s2, &e2) in sel2.iter().enumerate() {
                            if e2 == e && (t2, s2) != (t, s) {
                                let g2 = gates[t2][s2];
                                if g2 > g || (g2 == g && t2 < t) {
                                    ahead += 1;
                                }
                            }
                        }
                    }
                    ahead < cap
                })
                .collect()
        })
        .collect()
}

pub fn expert_forward(w: &ExpertWeights, normed: &[f64]) -> Vec<f64> {
    let a: Vec<f64> = normed
        .iter()
        .zip(&w.gain)
        .zip(&w.bias)
        .map(|((x, g), b)| x * g + b)
        .collect();
    let mut h: Vec<f64> = vec_mat(&a, &w.w_in).into_iter().map(gelu_tanh).collect();
    if let Some(wg) = &w.w_gate {
        h.iter_mut().zip(vec_mat(&a, wg)).for_each(|(x, g)| *x *= g);
    }
    vec_mat(&h, &w.w_out)
}

pub struct OracleRouting {
    pub probs: Vec<Vec<f64>>,
    pub selected: Vec<Vec<usize>>,
    pub gates: Vec<Vec<f64>>,
    pub kept: Vec<Vec<bool>>,
}

pub fn oracle_routing(inst: &Instance) -> OracleRouting {
    let e = inst.experts.len();
    let probs: Vec<Vec<f64>> = inst
        .tokens
        .iter()
        .map(|t| softmax(&vec_mat(&layer_norm(t), &inst.router)))
        .collect();
    let selected: Vec<Vec<usize>> = probs.iter().map(|p| top_k_scan(p, inst.top_k)).collect();
    let gates: Vec<Vec<f64>> = probs
        .iter()
        .zip(&selected)
        .map(|(p, sel)| {
            let raw: Vec<f64> = sel.iter().map(|&i| p[i]).collect();
            if inst.renormalize {
                let s: f64 = raw.iter().sum();
                raw.iter().map(|g| g / s).collect()
            } else {
                raw
            }
        })
        .collect();
    let cap = capacity_of(inst.capacity_factor, inst.top_k, inst.tokens.len(), e);
    // priority uses the raw router probability even when gates are renormalized
    let raw: Vec<Vec<f64>> = probs
        .iter()
        .zip(&selected)
        .map(|(p, sel)| sel.iter().map(|&i| p[i]).collect())
        .collect();
    let kept = kept_by_rank(&selected, &raw, cap);
    OracleRouting {
        probs,
        selected,
        gates,
        kept,
    }
}

/// Sparse MoE sublayer output computed token by token.
pub fn oracle_moe_forward(inst: &Instance) -> Vec<Vec<f64>> {
    let r = oracle_routing(inst);
    inst.tokens
        .iter()
        .enumerate()
        .map(|(t, x)| {
            let n = layer_norm(x);
            let mut out = vec![0.0; x.len()];
            for (s, &e) in r.selected[t].iter().enumerate() {
                if r.kept[t][s] {
                    let y = expert_forward(&inst.experts[e], &n);
                    out.iter_mut().zip(y).for_each(|(o, v)| *o += r.gates[t][s] * v);
                }
            }
            out
        })
        .collect()
}

pub fn oracle_aux(probs: &[Vec<f64>], argmax: &[usize]) -> f64 {
    let k = probs.len() as f64;
    let e = probs[0].len();
    let mut total = 0.0;
    for i in 0..e {
        let f = argmax.iter().filter(|&&a| a == i).count() as f64 / k;
        let g = probs.iter().map(|p| p[i]).sum::<f64>() / k;
        total += f * g;
    }
    e as f64 * total
}

pub fn random_trace(rng: &mut impl Rng, layers: usize, tokens: usize, e: usize, k: usize) -> RoutingTrace {
    let modality: Vec<Modality> = (0..tokens)
        .map(|_| {
            if rng.random_bool(0.5) {
                Modality::Text
            } else {
                Modality::Image
            }
        })
        .collect();
    RoutingTrace {
        layers: (0..layers)
            .map(|b| {
                let mut layer = LayerTrace::new(b, e);
                for (t, &m) in modality.iter().enumerate() {
                    let logits: Vec<f64> = (0..e).map(|_| rng.random_range(-2.0..2.0)).collect();
                    let probs = softmax(&logits);
                    let selected = top_k_scan(&probs, k);
                    layer.tokens.push(TokenRoute {
                        kept: selected.iter().map(|_| rng.random_bool(0.8)).collect(),
                        probs,
                        selected,
                        modality: m,
                        position: t,
                        sequence: 0,
                    });
                }
                layer
            })
            .collect(),
    }
}

/// One-pass counting: (top-1 counts, text counts, image counts) per layer.
pub fn count_trace(trace: &RoutingTrace) -> Vec<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    trace
        .layers
        .iter()
        .map(|l| {
            let mut top1 = vec![0; l.num_experts];
            let mut text = vec![0; l.num_experts];
            let mut image = vec![0; l.num_experts];
            for t in &l.tokens {
                top1[t.selected[0]] += 1;
                for &e in &t.selected {
                    if t.modality == Modality::Text {
                        text[e] += 1;
                    } else {
                        image[e] += 1;
                    }
                }
            }
            (top1, text, image)
        })
        .collect()
}

/// Dominant eigenvector of the sample covariance by power iteration.
pub fn power_iteration(rows: &[Vec<f64>], iters: usize) -> Vec<f64> {
    let n = rows.len() as f64;
    let d = rows[0].len();
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let mut cov = vec![vec![0.0; d]; d];
    for r in &centered {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += r[i] * r[j] / (n - 1.0);
            }
        }
    }
    let mut v: Vec<f64> = (0..d).map(|i| 1.0 + i as f64 * 0.01).collect();
    for _ in 0..iters {
        let w: Vec<f64> = (0..d).map(|i| (0..d).map(|j| cov[i][j] * v[j]).sum()).collect();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        v = w.into_iter().map(|x| x / norm).collect();
    }
    v
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Two clusters: text tokens route to experts {0, 1}, image tokens to
/// {2, 3}, at every layer, with small jitter.
pub fn two_cluster_trace(rng: &mut impl Rng, layers: usize, tokens: usize) -> RoutingTrace {
    let e = 4;
    RoutingTrace {
        layers: (0..layers)
            .map(|b| {
                let mut layer = LayerTrace::new(b, e);
                for t in 0..tokens {
                    let text = t % 2 == 0;
                    let mut logits = vec![0.0; e];
                    let (hi, lo) = if text { (0, 1) } else { (2, 3) };
                    logits[hi] = 4.0 + rng.random_range(0.0..0.5);
                    logits[lo] = 3.0 + rng.random_range(0.0..0.5);
                    let probs = softmax(&logits);
                    let selected = top_k_scan(&probs, 2);
                    layer.tokens.push(TokenRoute {
                        kept: vec![true, true],
                        probs,
                        selected,
                        modality: if text { Modality::Text } else { Modality::Image },
                        position: t,
                        sequence: 0,
                    });
                }
                layer
            })
            .collect(),
    }
}

/// Outcome of a finite-difference check over sampled coordinates.
#[derive(Debug, Default)]
pub struct GradCheck {
    pub checked: usize,
    /// Coordinates whose perturbation changed a routing decision.
    pub skipped: usize,
    pub max_rel: f64,
    pub worst: String,
    pub groups: std::collections::BTreeMap<ParamGroup, usize>,
}

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for the relative error of near-zero gradients.
pub const FD_FLOOR: f64 = 1e-6;

type Routing = Vec<Vec<(Vec<usize>, Vec<bool>)>>;

fn loss_and_routing(model: &ToyModel, batch: &TrainBatch) -> (f64, Routing) {
    let mut tape = Tape::new();
    let mut bind = Bindings::frozen();
    let (loss, _) = loss_on(&mut tape, &mut bind, model, batch).unwrap();
    let mut trace = RoutingTrace::new();
    model.logits(&batch.input, Some(&mut trace)).unwrap();
    let routing = trace
        .layers
        .iter()
        .map(|l| l.tokens.iter().map(|t| (t.selected.clone(), t.kept.clone())).collect())
        .collect();
    (tape.value(loss).item(), routing)
}

/// Analytic gradients of the total loss for every buffer.
pub fn analytic_grads(model: &mut ToyModel, batch: &TrainBatch) -> Vec<Vec<f64>> {
    model.store.zero_grads();
    let mut tape = Tape::new();
    let mut bind = Bindings::new(Trainable::all_except(&[]));
    let (loss, _) = loss_on(&mut tape, &mut bind, model, batch).unwrap();
    let mut grads = tape.backward(loss).unwrap();
    bind.write_grads(&mut grads, &mut model.store).unwrap();
    model
        .store
        .entries()
        .iter()
        .map(|e| {
            e.tensor
                .grad()
                .map_or_else(|| vec![0.0; e.tensor.len()], <[f64]>::to_vec)
        })
        .collect()
}

/// Central differences on `per_buffer` coordinates of every buffer: half
/// the largest-magnitude analytic entries, half uniformly random.
pub fn gradcheck_model(model: &mut ToyModel, batch: &TrainBatch, per_buffer: usize, rng: &mut impl Rng) -> GradCheck {
    let analytic = analytic_grads(model, batch);
    let (_, base_routing) = loss_and_routing(model, batch);
    let mut out = GradCheck::default();
    for (b, grad) in analytic.iter().enumerate() {
        let mut coords: Vec<usize> = (0..grad.len()).collect();
        coords.sort_by(|&x, &y| grad[y].abs().total_cmp(&grad[x].abs()));
        coords.truncate(per_buffer / 2);
        while coords.len() < per_buffer.min(grad.len()) {
            let c = rng.random_range(0..grad.len());
            if !coords.contains(&c) {
                coords.push(c);
            }
        }
        let (name, group) = {
            let e = &model.store.entries()[b];
            (e.name.clone(), e.group)
        };
        for c in coords {
            let orig = model.store.entries()[b].tensor.values()[c];
            model.store.entries_mut()[b].tensor.values_mut()[c] = orig + FD_STEP;
            let (plus, r_plus) = loss_and_routing(model, batch);
            model.store.entries_mut()[b].tensor.values_mut()[c] = orig - FD_STEP;
            let (minus, r_minus) = loss_and_routing(model, batch);
            model.store.entries_mut()[b].tensor.values_mut()[c] = orig;
            if r_plus != base_routing || r_minus != base_routing {
                out.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = grad[c];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR);
            out.checked += 1;
            *out.groups.entry(group).or_default() += 1;
            if rel > out.max_rel {
                out.max_rel = rel;
                out.worst = format!("{name}[{c}]: analytic {a:e} numeric {numeric:e}");
            }
        }
    }
    out
}

/// Toy model with random routers and slack capacity, so that gradients
/// reach every group and small perturbations rarely flip a decision.
pub fn gradcheck_model_and_batch(seed: u64) -> (ToyModel, TrainBatch) {
    let base = ModelConfig::default();
    let cfg = ModelConfig {
        router_init: RouterInit::Normal { std: 0.5 },
        capacity_factor: base.experts as f64 / base.top_k as f64,
        alpha: 0.1,
        ..base
    };
    let model = ToyModel::build(&cfg, seed).unwrap();
    let data = make_synthetic_dataset(
        seed,
        &SyntheticConfig::default(),
        cfg.pseudo_image_tokens,
        cfg.image_feature_dim,
        cfg.embedding_size,
    )
    .unwrap();
    let batch = data.batch(&[0, 1]).unwrap();
    (model, batch)
}

/// A published architecture row: config file stem and reported
/// (activated, total) in billions.
pub struct TableRow {
    pub file: &'static str,
    pub activated: f64,
    pub total: f64,
    /// Rows whose dense base does not follow from the closed form; only
    /// the MoE increment is compared.
    pub increment_only: bool,
}

const fn row(file: &'static str, activated: f64, total: f64, increment_only: bool) -> TableRow {
    TableRow {
        file,
        activated,
        total,
        increment_only,
    }
}

pub const TABLE_ROWS: [TableRow; 12] = [
    row("stablelm-1.6b", 1.6, 1.6, false),
    row("stablelm-1.6b-x4-top2", 2.0, 2.9, false),
    row("stablelm-1.6b-x4-top2-all", 2.5, 4.1, false),
    row("qwen-1.8b", 1.8, 1.8, false),
    row("qwen-1.8b-x4-top2", 2.2, 3.1, false),
    row("qwen-1.8b-x4-top2-all", 2.6, 4.3, false),
    row("phi2-2.7b", 2.7, 2.7, false),
    row("phi2-2.7b-x4-top2", 3.6, 5.3, false),
    row("phi2-2.7b-x4-top2-all", 4.5, 7.8, false),
    row("openchat-7b", 6.7, 6.7, true),
    row("openchat-7b-x4-top2", 9.6, 15.2, true),
    row("openchat-7b-x4-top2-all", 12.4, 23.7, true),
];

/// The rows of the main architecture table (a subset of `TABLE_ROWS`).
pub const MAIN_TABLE: [&str; 6] = [
    "stablelm-1.6b",
    "stablelm-1.6b-x4-top2",
    "qwen-1.8b",
    "qwen-1.8b-x4-top2",
    "phi2-2.7b",
    "phi2-2.7b-x4-top2",
];

pub fn configs_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

pub fn model_config(stem: &str) -> ModelConfig {
    ModelConfig::load(&configs_dir().join("models").join(format!("{stem}.toml"))).unwrap()
}

/// The dense parent with every MoE-block FFN output matrix scaled by
/// `factor`.
pub fn scaled_parent(dense: &ToyModel, blocks: &[usize], factor: f64) -> ToyModel {
    let mut out = dense.clone();
    for &b in blocks {
        if let FeedForward::Dense(ffn) = &out.blocks[b].ffn {
            let id = ffn.w_out;
            out.store.get_mut(id).values_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }
    out
}

/// A small toy config that keeps whole-model tests fast.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        name: Some("tiny".into()),
        embedding_size: 32,
        width: 8,
        layers: 4,
        ffn_size: 12,
        heads: 2,
        pseudo_image_tokens: 3,
        image_feature_dim: 4,
        encoder_dim: 6,
        max_seq_len: 16,
        ..ModelConfig::default()
    }
}

pub fn tiny_input(cfg: &ModelConfig, seed: u64, batch: usize, text_len: usize) -> moetune::ModelInput {
    let mut r = rng(seed);
    let p = cfg.pseudo_image_tokens;
    moetune::ModelInput {
        images: to_tensor(&matrix(&mut r, batch * p, cfg.image_feature_dim, 1.0)),
        text: (0..batch * text_len)
            .map(|_| r.random_range(0..cfg.embedding_size))
            .collect(),
        batch,
        image_tokens: p,
        text_len,
    }
}
