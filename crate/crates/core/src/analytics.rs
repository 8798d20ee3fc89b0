//! Routing analytics over recorded traces: per-layer expert loads,
//! modality preferences of each expert, and PCA-ranked token pathways.
//!
//! Report files have a fixed schema:
//!
//! * `loads.csv`: `layer,expert,load`. One row per (MoE layer, expert);
//!   `layer` is the block index. Loads of a layer sum to 1.
//! * `preferences.csv`: `layer,expert,assigned,text_fraction,image_fraction`.
//!   Fractions are empty cells when `assigned` is 0.
//! * `pathways.json`: a serialized [`PathwayReport`].

use std::io::{Read, Write};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::batch::Modality;
use crate::error::{Error, Result};

/// Routing record of one token at one MoE layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRoute {
    pub probs: Vec<f64>,
    pub selected: Vec<usize>,
    pub kept: Vec<bool>,
    pub modality: Modality,
    pub position: usize,
    pub sequence: usize,
}

impl TokenRoute {
    pub fn top1(&self) -> usize {
        self.selected[0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTrace {
    /// Block index of this MoE layer inside the model.
    pub block: usize,
    pub num_experts: usize,
    pub tokens: Vec<TokenRoute>,
}

impl LayerTrace {
    pub fn new(block: usize, num_experts: usize) -> Self {
        Self {
            block,
            num_experts,
            tokens: Vec::new(),
        }
    }
}

/// Per MoE layer, per token routing records. Every token appears once per
/// layer, in the same order across layers.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RoutingTrace {
    pub layers: Vec<LayerTrace>,
}

impl RoutingTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_tokens(&self) -> usize {
        self.layers.first().map_or(0, |l| l.tokens.len())
    }

    /// Appends the layers of `other`, token lists concatenated layer by layer.
    pub fn extend(&mut self, other: RoutingTrace) {
        if self.layers.is_empty() {
            *self = other;
            return;
        }
        for (mine, theirs) in self.layers.iter_mut().zip(other.layers) {
            mine.tokens.extend(theirs.tokens);
        }
    }
}

/// Per layer, the fraction of tokens whose top-1 expert is each expert.
pub fn expert_load_distribution(trace: &RoutingTrace) -> Vec<Vec<f64>> {
    trace
        .layers
        .iter()
        .map(|layer| {
            let mut counts = vec![0usize; layer.num_experts];
            for t in &layer.tokens {
                counts[t.top1()] += 1;
            }
            let n = layer.tokens.len();
            counts
                .into_iter()
                .map(|c| if n == 0 { 0.0 } else { c as f64 / n as f64 })
                .collect()
        })
        .collect()
}

/// Largest single-expert load over all layers.
pub fn max_load_fraction(trace: &RoutingTrace) -> f64 {
    expert_load_distribution(trace)
        .iter()
        .flatten()
        .copied()
        .fold(0.0, f64::max)
}

/// Modality split of the tokens assigned to one expert.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Preference {
    pub text: f64,
    pub image: f64,
    pub assigned: usize,
}

/// Per layer, per expert: share of its assignments (all `k` selections of
/// each token) that are text vs image. `None` for experts with no
/// assignments.
pub fn modality_preference(trace: &RoutingTrace) -> Vec<Vec<Option<Preference>>> {
    trace
        .layers
        .iter()
        .map(|layer| {
            let mut text = vec![0usize; layer.num_experts];
            let mut image = vec![0usize; layer.num_experts];
            for t in &layer.tokens {
                for &e in &t.selected {
                    match t.modality {
                        Modality::Text => text[e] += 1,
                        Modality::Image => image[e] += 1,
                    }
                }
            }
            text.iter()
                .zip(&image)
                .map(|(&tc, &ic)| {
                    let n = tc + ic;
                    (n > 0).then(|| Preference {
                        text: tc as f64 / n as f64,
                        image: ic as f64 / n as f64,
                        assigned: n,
                    })
                })
                .collect()
        })
        .collect()
}

/// A discrete expert sequence across MoE layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pathway {
    /// Top-1 expert at each MoE layer.
    pub experts: Vec<usize>,
    /// |projection onto the first principal component| of the best token
    /// following this pathway.
    pub score: f64,
    /// Modality of that token.
    pub modality: Modality,
    /// How many traced tokens follow this pathway, by modality.
    pub text_tokens: usize,
    pub image_tokens: usize,
    /// Among the two best pathways of its modality.
    pub highlighted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathwayReport {
    pub pathways: Vec<Pathway>,
    /// Unit first principal component, sign-canonical.
    pub first_component: Vec<f64>,
    /// Variance of the gate vectors along `first_component` (its eigenvalue).
    pub explained_variance: f64,
    pub num_tokens: usize,
}

/// First principal component of the rows of `data` (n×d) through the
/// covariance eigendecomposition. Returns `(component, eigenvalue)`; the
/// sign is fixed so the first nonzero entry is positive.
pub fn principal_component(data: &[Vec<f64>]) -> Result<(Vec<f64>, f64)> {
    let n = data.len();
    if n < 2 {
        return Err(Error::invalid("principal_component", "PCA needs at least 2 rows"));
    }
    let d = data[0].len();
    if d == 0 || data.iter().any(|r| r.len() != d) {
        return Err(Error::invalid("principal_component", "rows must share a nonzero width"));
    }
    // offsets from the first row keep identical rows exactly zero after centering
    let x = DMatrix::from_fn(n, d, |i, j| data[i][j] - data[0][j]);
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let best = eig.eigenvalues.imax();
    let mut v: Vec<f64> = eig.eigenvectors.column(best).iter().copied().collect();
    canonical_sign(&mut v);
    Ok((v, eig.eigenvalues[best].max(0.0)))
}

/// Flips `v` so its first entry with magnitude above 1e-12 is positive.
pub fn canonical_sign(v: &mut [f64]) {
    if let Some(&first) = v.iter().find(|x| x.abs() > 1e-12) {
        if first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

/// Ranks tokens by |projection| of their concatenated per-layer gate
/// vectors onto the first principal component and returns the top-`n`
/// distinct discrete pathways.
pub fn token_pathways(trace: &RoutingTrace, n: usize) -> Result<PathwayReport> {
    let num_tokens = trace.num_tokens();
    if trace.layers.iter().any(|l| l.tokens.len() != num_tokens) {
        return Err(Error::invalid("token_pathways", "layers disagree on token count"));
    }
    if num_tokens < 2 {
        return Err(Error::invalid("token_pathways", "need at least 2 tokens"));
    }
    if num_tokens < n {
        return Err(Error::invalid(
            "token_pathways",
            format!("trace has {num_tokens} tokens, fewer than the {n} requested"),
        ));
    }
    let rows: Vec<Vec<f64>> = (0..num_tokens)
        .map(|t| {
            trace
                .layers
                .iter()
                .flat_map(|l| l.tokens[t].probs.iter().copied())
                .collect()
        })
        .collect();
    let (pc, eigenvalue) = principal_component(&rows)?;
    let d = pc.len();
    let base = &rows[0];
    let mean: Vec<f64> = (0..d)
        .map(|j| rows.iter().map(|r| r[j] - base[j]).sum::<f64>() / num_tokens as f64)
        .collect();
    let scores: Vec<f64> = rows
        .iter()
        .map(|r| {
            r.iter()
                .zip(base)
                .zip(&mean)
                .zip(&pc)
                .map(|(((x, b), m), p)| (x - b - m) * p)
                .sum::<f64>()
                .abs()
        })
        .collect();
    let paths: Vec<Vec<usize>> = (0..num_tokens)
        .map(|t| trace.layers.iter().map(|l| l.tokens[t].top1()).collect())
        .collect();

    let mut order: Vec<usize> = (0..num_tokens).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));

    let modality_of = |t: usize| trace.layers[0].tokens[t].modality;
    let mut pathways: Vec<Pathway> = Vec::new();
    for &t in &order {
        if pathways.len() == n {
            break;
        }
        if pathways.iter().any(|p| p.experts == paths[t]) {
            continue;
        }
        let (mut text_tokens, mut image_tokens) = (0, 0);
        for (u, p) in paths.iter().enumerate() {
            if *p == paths[t] {
                match modality_of(u) {
                    Modality::Text => text_tokens += 1,
                    Modality::Image => image_tokens += 1,
                }
            }
        }
        pathways.push(Pathway {
            experts: paths[t].clone(),
            score: scores[t],
            modality: modality_of(t),
            text_tokens,
            image_tokens,
            highlighted: false,
        });
    }
    for m in [Modality::Text, Modality::Image] {
        pathways
            .iter_mut()
            .filter(|p| p.modality == m)
            .take(2)
            .for_each(|p| p.highlighted = true);
    }
    Ok(PathwayReport {
        pathways,
        first_component: pc,
        explained_variance: eigenvalue,
        num_tokens,
    })
}

pub const LOADS_HEADER: [&str; 3] = ["layer", "expert", "load"];
pub const PREFERENCES_HEADER: [&str; 5] = ["layer", "expert", "assigned", "text_fraction", "image_fraction"];

#[derive(Debug, Serialize, Deserialize)]
struct LoadRow {
    layer: usize,
    expert: usize,
    load: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct PreferenceRow {
    layer: usize,
    expert: usize,
    assigned: usize,
    text_fraction: Option<f64>,
    image_fraction: Option<f64>,
}

pub fn write_loads_csv<W: Write>(trace: &RoutingTrace, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for (layer, loads) in trace.layers.iter().zip(expert_load_distribution(trace)) {
        for (expert, load) in loads.into_iter().enumerate() {
            w.serialize(LoadRow {
                layer: layer.block,
                expert,
                load,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_preferences_csv<W: Write>(trace: &RoutingTrace, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for (layer, prefs) in trace.layers.iter().zip(modality_preference(trace)) {
        for (expert, p) in prefs.into_iter().enumerate() {
            w.serialize(PreferenceRow {
                layer: layer.block,
                expert,
                assigned: p.map_or(0, |p| p.assigned),
                text_fraction: p.map(|p| p.text),
                image_fraction: p.map(|p| p.image),
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_pathways_json<W: Write>(report: &PathwayReport, out: W) -> Result<()> {
    serde_json::to_writer_pretty(out, report)?;
    Ok(())
}

fn check_header<R: Read>(r: &mut csv::Reader<R>, expect: &[&str]) -> Result<()> {
    let header = r.headers()?.clone();
    if header.iter().ne(expect.iter().copied()) {
        return Err(Error::Serde(format!("unexpected header {header:?}, want {expect:?}")));
    }
    Ok(())
}

/// Parses a loads CSV and checks its schema: exact header, contiguous
/// experts per layer, loads in [0, 1] summing to 1 per layer.
pub fn validate_loads_csv<R: Read>(input: R) -> Result<Vec<(usize, Vec<f64>)>> {
    let mut r = csv::Reader::from_reader(input);
    check_header(&mut r, &LOADS_HEADER)?;
    let mut layers: Vec<(usize, Vec<f64>)> = Vec::new();
    for row in r.deserialize::<LoadRow>() {
        let row = row?;
        if !(0.0..=1.0).contains(&row.load) {
            return Err(Error::Serde(format!("load {} out of range", row.load)));
        }
        match layers.last_mut() {
            Some((l, v)) if *l == row.layer => {
                if row.expert != v.len() {
                    return Err(Error::Serde("experts not contiguous".into()));
                }
                v.push(row.load);
            }
            _ => {
                if row.expert != 0 {
                    return Err(Error::Serde("layer does not start at expert 0".into()));
                }
                layers.push((row.layer, vec![row.load]));
            }
        }
    }
    for (l, v) in &layers {
        let s: f64 = v.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Serde(format!("layer {l} loads sum to {s}")));
        }
    }
    Ok(layers)
}

/// Parses a preferences CSV and checks its schema.
pub fn validate_preferences_csv<R: Read>(input: R) -> Result<Vec<(usize, Vec<Option<Preference>>)>> {
    let mut r = csv::Reader::from_reader(input);
    check_header(&mut r, &PREFERENCES_HEADER)?;
    let mut layers: Vec<(usize, Vec<Option<Preference>>)> = Vec::new();
    for row in r.deserialize::<PreferenceRow>() {
        let row = row?;
        let pref = match (row.assigned, row.text_fraction, row.image_fraction) {
            (0, None, None) => None,
            (n, Some(t), Some(i)) if n > 0 => {
                if !(0.0..=1.0).contains(&t) || !(0.0..=1.0).contains(&i) || (t + i - 1.0).abs() > 1e-9 {
                    return Err(Error::Serde(format!("bad fractions ({t}, {i})")));
                }
                Some(Preference {
                    text: t,
                    image: i,
                    assigned: n,
                })
            }
            _ => return Err(Error::Serde("null marker inconsistent with assigned count".into())),
        };
        match layers.last_mut() {
            Some((l, v)) if *l == row.layer => {
                if row.expert != v.len() {
                    return Err(Error::Serde("experts not contiguous".into()));
                }
                v.push(pref);
            }
            _ => {
                if row.expert != 0 {
                    return Err(Error::Serde("layer does not start at expert 0".into()));
                }
                layers.push((row.layer, vec![pref]));
            }
        }
    }
    Ok(layers)
}

/// Parses a pathways JSON report and checks ordering and length.
pub fn validate_pathways_json<R: Read>(input: R, max_len: usize) -> Result<PathwayReport> {
    let report: PathwayReport = serde_json::from_reader(input)?;
    if report.pathways.len() > max_len {
        return Err(Error::Serde("more pathways than requested".into()));
    }
    if report.pathways.windows(2).any(|w| w[0].score < w[1].score) {
        return Err(Error::Serde("pathway scores not descending".into()));
    }
    Ok(report)
}
