//! Auto-regressive loss over answer text, the load-balancing auxiliary
//! loss, and their weighted combination.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How the per-expert token fraction `F` is counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadCounting {
    /// Only the argmax expert of each token counts.
    #[default]
    Top1,
    /// All `k` selected experts count, each with weight `1/k`.
    AllSelected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub regressive: f64,
    pub aux_per_layer: Vec<f64>,
    pub total: f64,
    pub alpha: f64,
}

/// `(logit row, target, weight)` triples for next-token prediction: row
/// `i−1` predicts `targets[i]` for every masked-in position `i` that is not
/// the first of its sequence. Weights average over those positions.
pub fn next_token_rows(targets: &[usize], loss_mask: &[bool], seq_len: usize) -> Result<Vec<(usize, usize, f64)>> {
    if targets.len() != loss_mask.len() {
        return Err(Error::shape(
            "autoregressive_loss",
            &[targets.len()],
            &[loss_mask.len()],
        ));
    }
    if seq_len == 0 || !targets.len().is_multiple_of(seq_len) {
        return Err(Error::invalid(
            "autoregressive_loss",
            "length is not a multiple of seq_len",
        ));
    }
    let picks: Vec<(usize, usize)> = (0..targets.len())
        .filter(|&i| loss_mask[i] && i % seq_len != 0)
        .map(|i| (i - 1, targets[i]))
        .collect();
    if picks.is_empty() {
        return Err(Error::invalid("autoregressive_loss", "no unmasked positions"));
    }
    let w = 1.0 / picks.len() as f64;
    Ok(picks.into_iter().map(|(r, t)| (r, t, w)).collect())
}

/// Mean next-token negative log-likelihood over unmasked positions.
pub fn autoregressive_loss_on(
    tape: &mut Tape,
    logits: Var,
    targets: &[usize],
    loss_mask: &[bool],
    seq_len: usize,
) -> Result<Var> {
    let rows = next_token_rows(targets, loss_mask, seq_len)?;
    if tape.value(logits).shape().first() != Some(&targets.len()) {
        return Err(Error::shape(
            "autoregressive_loss",
            tape.value(logits).shape(),
            &[targets.len()],
        ));
    }
    tape.cross_entropy(logits, &rows)
}

pub fn autoregressive_loss(logits: &Tensor, targets: &[usize], loss_mask: &[bool], seq_len: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone())?;
    let v = autoregressive_loss_on(&mut tape, l, targets, loss_mask, seq_len)?;
    Ok(tape.value(v).item())
}

/// Per-expert token fractions `F_i`.
pub fn load_fractions(selections: &[Vec<usize>], num_experts: usize, counting: LoadCounting) -> Result<Vec<f64>> {
    let k_tokens = selections.len();
    if k_tokens == 0 {
        return Err(Error::invalid("aux_loss", "no tokens"));
    }
    let mut f = vec![0.0; num_experts];
    for sel in selections {
        let Some(&first) = sel.first() else {
            return Err(Error::invalid("aux_loss", "empty selection"));
        };
        match counting {
            LoadCounting::Top1 => f[first] += 1.0,
            LoadCounting::AllSelected => {
                let w = 1.0 / sel.len() as f64;
                sel.iter().for_each(|&e| f[e] += w);
            }
        }
    }
    f.iter_mut().for_each(|v| *v /= k_tokens as f64);
    Ok(f)
}

/// `E·Σ_i F_i·G_i` with `G_i` the mean gate probability of expert `i`.
/// Differentiable through `G` only.
pub fn aux_loss_from_fractions_on(tape: &mut Tape, probs: Var, fractions: &[f64]) -> Result<Var> {
    let (k_tokens, e) = tape.value(probs).dims2()?;
    if k_tokens == 0 {
        return Err(Error::invalid("aux_loss", "no tokens"));
    }
    if fractions.len() != e {
        return Err(Error::shape("aux_loss", tape.value(probs).shape(), &[fractions.len()]));
    }
    // dividing by K last keeps the concentrated case exactly E
    let weights: Vec<f64> = (0..k_tokens)
        .flat_map(|_| fractions.iter().map(move |f| f * e as f64))
        .collect();
    let s = tape.weighted_sum(probs, weights)?;
    tape.divide(s, k_tokens as f64)
}

/// Auxiliary loss with `F` taken from each token's argmax expert.
pub fn aux_loss_on(tape: &mut Tape, probs: Var, argmax: &[usize]) -> Result<Var> {
    let e = tape.value(probs).dims2()?.1;
    let sel: Vec<Vec<usize>> = argmax.iter().map(|&i| vec![i]).collect();
    let f = load_fractions(&sel, e, LoadCounting::Top1)?;
    aux_loss_from_fractions_on(tape, probs, &f)
}

pub fn aux_loss(probs: &Tensor, argmax: &[usize]) -> Result<f64> {
    let (k_tokens, _) = probs.dims2()?;
    if argmax.len() != k_tokens {
        return Err(Error::shape("aux_loss", probs.shape(), &[argmax.len()]));
    }
    let mut tape = Tape::new();
    let p = tape.constant(probs.clone())?;
    let v = aux_loss_on(&mut tape, p, argmax)?;
    Ok(tape.value(v).item())
}

/// `regressive + alpha · mean(aux)`; with no MoE layers the aux term is 0.
pub fn total_loss(regressive: f64, aux_per_layer: &[f64], alpha: f64) -> LossReport {
    let mean = if aux_per_layer.is_empty() {
        0.0
    } else {
        aux_per_layer.iter().sum::<f64>() / aux_per_layer.len() as f64
    };
    LossReport {
        regressive,
        aux_per_layer: aux_per_layer.to_vec(),
        total: regressive + alpha * mean,
        alpha,
    }
}

pub fn total_loss_on(tape: &mut Tape, regressive: Var, aux_per_layer: &[Var], alpha: f64) -> Result<Var> {
    let mut terms = vec![(regressive, 1.0)];
    if !aux_per_layer.is_empty() {
        let w = alpha / aux_per_layer.len() as f64;
        terms.extend(aux_per_layer.iter().map(|&a| (a, w)));
    }
    tape.combine(&terms)
}
