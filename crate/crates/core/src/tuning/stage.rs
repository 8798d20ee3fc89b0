use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::data::{SyntheticDataset, TrainBatch};
use super::optim::{Adam, AdamConfig};
use super::schedule::Schedule;
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::{ForwardPass, Placement, ToyModel};
use crate::objectives::{self, load_fractions};
use crate::params::{Bindings, ParamGroup, Trainable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    I,
    II,
    III,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::I, Stage::II, Stage::III];
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::I => "I",
            Stage::II => "II",
            Stage::III => "III",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "I" | "1" => Ok(Stage::I),
            "II" | "2" => Ok(Stage::II),
            "III" | "3" => Ok(Stage::III),
            other => Err(Error::Config(format!("unknown stage '{other}'"))),
        }
    }
}

/// Parameter subset tuned in stage III.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TunedSubset {
    /// Routers and experts only.
    #[default]
    Moe,
    /// Routers, experts and the remaining dense FFNs.
    FfnMoe,
    /// Everything except the frozen feature stub.
    All,
}

impl FromStr for TunedSubset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '+'], "_").as_str() {
            "moe" => Ok(TunedSubset::Moe),
            "ffn_moe" | "ffn" => Ok(TunedSubset::FfnMoe),
            "all" => Ok(TunedSubset::All),
            other => Err(Error::Config(format!("unknown tuned subset '{other}'"))),
        }
    }
}

fn default_batch_size() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub stage: Stage,
    pub steps: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub tuned_subset: TunedSubset,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
}

impl StageSpec {
    pub fn new(stage: Stage, steps: usize, learning_rate: f64) -> Self {
        Self {
            stage,
            steps,
            learning_rate,
            schedule: Schedule::Cosine,
            tuned_subset: TunedSubset::Moe,
            batch_size: default_batch_size(),
        }
    }

    pub fn trainable(&self) -> Trainable {
        match (self.stage, self.tuned_subset) {
            (Stage::I, _) => Trainable::of(&[ParamGroup::Projector]),
            (Stage::II, _) | (Stage::III, TunedSubset::All) => Trainable::all_except(&[ParamGroup::Encoder]),
            (Stage::III, TunedSubset::Moe) => Trainable::of(&[ParamGroup::Router, ParamGroup::Expert]),
            (Stage::III, TunedSubset::FfnMoe) => {
                Trainable::of(&[ParamGroup::Ffn, ParamGroup::Router, ParamGroup::Expert])
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub stage: Stage,
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub regressive: f64,
    pub aux: f64,
    /// Per MoE block, top-1 load fraction of every expert.
    pub loads: Vec<Vec<f64>>,
    pub drop_rate: f64,
    pub max_load: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub steps: Vec<StepMetrics>,
}

impl StageReport {
    pub fn initial_regressive(&self) -> Option<f64> {
        self.steps.first().map(|m| m.regressive)
    }

    pub fn final_regressive(&self) -> Option<f64> {
        self.steps.last().map(|m| m.regressive)
    }
}

/// Losses and routing statistics of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PassStats {
    pub regressive: f64,
    pub aux: f64,
    pub total: f64,
    pub loads: Vec<Vec<f64>>,
    pub drop_rate: f64,
    pub max_load: f64,
}

fn pass_stats(tape: &Tape, pass: &ForwardPass, reg: f64, aux: &[f64], alpha: f64) -> Result<PassStats> {
    let mut loads = Vec::with_capacity(pass.moe.len());
    let (mut dropped, mut assigned) = (0usize, 0usize);
    for layer in &pass.moe {
        let e = tape.value(layer.probs).dims2()?.1;
        let top1: Vec<Vec<usize>> = layer.decisions.iter().map(|d| vec![d.top1()]).collect();
        loads.push(load_fractions(&top1, e, objectives::LoadCounting::Top1)?);
        dropped += layer.capacity.dropped;
        assigned += layer.capacity.assignments;
    }
    let report = objectives::total_loss(reg, aux, alpha);
    Ok(PassStats {
        regressive: reg,
        aux: if aux.is_empty() {
            0.0
        } else {
            aux.iter().sum::<f64>() / aux.len() as f64
        },
        total: report.total,
        max_load: loads.iter().flatten().copied().fold(0.0, f64::max),
        drop_rate: if assigned == 0 {
            0.0
        } else {
            dropped as f64 / assigned as f64
        },
        loads,
    })
}

/// Records the full objective for `batch` on `tape`; returns the total
/// loss variable and its statistics.
pub fn loss_on(
    tape: &mut Tape,
    bind: &mut Bindings,
    model: &ToyModel,
    batch: &TrainBatch,
) -> Result<(crate::autodiff::Var, PassStats)> {
    let pass = model.forward_on(tape, bind, &batch.input, None)?;
    let reg =
        objectives::autoregressive_loss_on(tape, pass.logits, &batch.targets, &batch.mask, batch.input.seq_len())?;
    let mut aux = Vec::with_capacity(pass.moe.len());
    for layer in &pass.moe {
        let e = tape.value(layer.probs).dims2()?.1;
        let sel: Vec<Vec<usize>> = layer.decisions.iter().map(|d| d.selected.clone()).collect();
        let f = load_fractions(&sel, e, model.config.load_counting)?;
        aux.push(objectives::aux_loss_from_fractions_on(tape, layer.probs, &f)?);
    }
    let total = objectives::total_loss_on(tape, reg, &aux, model.config.alpha)?;
    let aux_vals: Vec<f64> = aux.iter().map(|&a| tape.value(a).item()).collect();
    let stats = pass_stats(tape, &pass, tape.value(reg).item(), &aux_vals, model.config.alpha)?;
    if !stats.total.is_finite() {
        return Err(Error::NonFinite {
            op: "total loss".into(),
        });
    }
    Ok((total, stats))
}

/// Inference-only losses averaged over `batches`; loads are pooled by
/// averaging the per-batch fractions.
pub fn evaluate(model: &ToyModel, batches: &[TrainBatch]) -> Result<PassStats> {
    if batches.is_empty() {
        return Err(Error::invalid("evaluate", "no batches"));
    }
    let mut acc: Option<PassStats> = None;
    for b in batches {
        let mut tape = Tape::new();
        let mut bind = Bindings::frozen();
        let (_, s) = loss_on(&mut tape, &mut bind, model, b)?;
        acc = Some(match acc {
            None => s,
            Some(mut a) => {
                a.regressive += s.regressive;
                a.aux += s.aux;
                a.total += s.total;
                a.drop_rate += s.drop_rate;
                for (la, ls) in a.loads.iter_mut().zip(&s.loads) {
                    la.iter_mut().zip(ls).for_each(|(x, y)| *x += y);
                }
                a
            }
        });
    }
    let mut a = acc.expect("at least one batch");
    let n = batches.len() as f64;
    a.regressive /= n;
    a.aux /= n;
    a.total /= n;
    a.drop_rate /= n;
    a.loads.iter_mut().flatten().for_each(|x| *x /= n);
    a.max_load = a.loads.iter().flatten().copied().fold(0.0, f64::max);
    Ok(a)
}

/// Trains the groups selected by `spec` for `spec.steps` steps. Every
/// other buffer is left bitwise unchanged. `on_step` sees each step's
/// metrics as they are produced.
pub fn run_stage(
    model: &mut ToyModel,
    spec: &StageSpec,
    data: &SyntheticDataset,
    seed: u64,
    mut on_step: impl FnMut(&StepMetrics) -> Result<()>,
) -> Result<StageReport> {
    spec.validate()?;
    if spec.stage == Stage::III {
        if model.config.placement == Placement::Dense {
            return Err(Error::Config("stage III needs a placement with MoE layers".into()));
        }
        if !model.is_sparse() {
            return Err(Error::Config("stage III needs a model expanded to MoE".into()));
        }
    }
    let trainable = spec.trainable();
    let mut opt = Adam::new(&model.store, &trainable, AdamConfig::default());
    let mut rng = crate::model::stream_rng(seed, 100 + spec.stage as u64);
    model.store.zero_grads();
    let mut steps = Vec::with_capacity(spec.steps);
    for step in 0..spec.steps {
        let batch = data.sample_batch(&mut rng, spec.batch_size)?;
        let mut tape = Tape::new();
        let mut bind = Bindings::new(trainable.clone());
        let (loss, stats) = loss_on(&mut tape, &mut bind, model, &batch)?;
        let mut grads = tape.backward(loss)?;
        bind.write_grads(&mut grads, &mut model.store)?;
        let lr = spec.schedule.lr(step, spec.steps, spec.learning_rate);
        opt.step(&mut model.store, lr)?;
        let m = StepMetrics {
            stage: spec.stage,
            step,
            lr,
            total: stats.total,
            regressive: stats.regressive,
            aux: stats.aux,
            loads: stats.loads,
            drop_rate: stats.drop_rate,
            max_load: stats.max_load,
        };
        on_step(&m)?;
        steps.push(m);
    }
    Ok(StageReport {
        stage: spec.stage,
        steps,
    })
}
