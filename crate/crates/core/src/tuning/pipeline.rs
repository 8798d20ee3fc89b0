use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::data::{make_synthetic_dataset, SyntheticConfig, SyntheticDataset, TrainBatch};
use super::stage::{evaluate, run_stage, PassStats, Stage, StageReport, StageSpec, StepMetrics, TunedSubset};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Placement, ToyModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub batch_size: usize,
    pub batches: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            batches: 4,
        }
    }
}

/// Everything needed to reproduce a run from one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub model: ModelConfig,
    #[serde(default)]
    pub data: SyntheticConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    pub stages: Vec<StageSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut i = StageSpec::new(Stage::I, 60, 1e-2);
        i.batch_size = 16;
        let mut ii = StageSpec::new(Stage::II, 60, 1e-3);
        ii.batch_size = 16;
        let mut iii = StageSpec::new(Stage::III, 500, 5e-3);
        iii.batch_size = 16;
        Self {
            seed: 0,
            model: ModelConfig::default(),
            data: SyntheticConfig::default(),
            eval: EvalConfig::default(),
            stages: vec![i, ii, iii],
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let seq = self.model.pseudo_image_tokens + self.data.prompt_len + self.data.answer_len;
        if seq > self.model.max_seq_len {
            return Err(Error::Config(format!(
                "sequence length {seq} exceeds max_seq_len {}",
                self.model.max_seq_len
            )));
        }
        if self.eval.batch_size == 0 || self.eval.batches == 0 {
            return Err(Error::Config("eval batch_size and batches must be positive".into()));
        }
        for w in self.stages.windows(2) {
            if w[0].stage >= w[1].stage {
                return Err(Error::Config("stages must be listed once each, in order".into()));
            }
        }
        self.stages.iter().try_for_each(StageSpec::validate)
    }

    pub fn stage(&self, stage: Stage) -> Result<&StageSpec> {
        self.stages
            .iter()
            .find(|s| s.stage == stage)
            .ok_or_else(|| Error::Config(format!("config has no stage {stage}")))
    }

    pub fn dataset(&self) -> Result<SyntheticDataset> {
        make_synthetic_dataset(
            self.seed,
            &self.data,
            self.model.pseudo_image_tokens,
            self.model.image_feature_dim,
            self.model.embedding_size,
        )
    }

    pub fn eval_batches(&self, data: &SyntheticDataset) -> Result<Vec<TrainBatch>> {
        data.eval_batches(self.eval.batch_size, self.eval.batches)
    }
}

/// Runs `stage` on `model`, expanding it to MoE first when stage III
/// meets a dense model.
pub fn advance(
    cfg: &RunConfig,
    model: ToyModel,
    stage: Stage,
    data: &SyntheticDataset,
    on_step: impl FnMut(&StepMetrics) -> Result<()>,
) -> Result<(ToyModel, StageReport)> {
    let spec = cfg.stage(stage)?;
    let mut model = if stage == Stage::III && !model.is_sparse() {
        model.expand_to_moe(cfg.model.routing(), cfg.model.router_init, cfg.seed)?
    } else {
        model
    };
    let report = run_stage(&mut model, spec, data, cfg.seed, on_step)?;
    Ok((model, report))
}

/// Stage I, then a sparse model trained on everything with the stage-II
/// recipe for the stage-III step budget. Experts start independent.
pub fn run_direct_sparse(
    cfg: &RunConfig,
    data: &SyntheticDataset,
    mut on_step: impl FnMut(&StepMetrics) -> Result<()>,
) -> Result<(ToyModel, Vec<StageReport>)> {
    let mut model = ToyModel::build(&cfg.model, cfg.seed)?;
    let r1 = run_stage(&mut model, cfg.stage(Stage::I)?, data, cfg.seed, &mut on_step)?;
    let mut spec = cfg.stage(Stage::II)?.clone();
    spec.steps = cfg.stage(Stage::III)?.steps;
    let r2 = run_stage(&mut model, &spec, data, cfg.seed, &mut on_step)?;
    Ok((model, vec![r1, r2]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Experts,
    Topk,
    Placement,
    Capacity,
    Subset,
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "experts" => Ok(AblationAxis::Experts),
            "topk" | "top_k" => Ok(AblationAxis::Topk),
            "placement" => Ok(AblationAxis::Placement),
            "capacity" => Ok(AblationAxis::Capacity),
            "subset" => Ok(AblationAxis::Subset),
            other => Err(Error::Config(format!("unknown ablation axis '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: AblationAxis,
    pub value: String,
    pub final_regressive: f64,
    pub final_total: f64,
    pub drop_rate: f64,
    pub max_load: f64,
    pub wall_seconds: f64,
}

/// Returns `cfg` with one axis set to `value`.
pub fn apply_axis(cfg: &RunConfig, axis: AblationAxis, value: &str) -> Result<RunConfig> {
    let mut out = cfg.clone();
    let bad = |e: String| Error::Config(format!("value '{value}' for {axis:?}: {e}"));
    match axis {
        AblationAxis::Experts => out.model.experts = value.parse().map_err(|e| bad(format!("{e}")))?,
        AblationAxis::Topk => out.model.top_k = value.parse().map_err(|e| bad(format!("{e}")))?,
        AblationAxis::Capacity => out.model.capacity_factor = value.parse().map_err(|e| bad(format!("{e}")))?,
        AblationAxis::Placement => {
            let p: Placement = value.parse()?;
            if p == Placement::Dense {
                return Err(bad("ablation needs MoE layers".into()));
            }
            out.model.placement = p;
        }
        AblationAxis::Subset => {
            let subset: TunedSubset = value.parse()?;
            out.stages
                .iter_mut()
                .filter(|s| s.stage == Stage::III)
                .for_each(|s| s.tuned_subset = subset);
        }
    }
    out.model.moe_layers = None;
    out.validate()?;
    Ok(out)
}

/// One stage-III run from the shared dense model for one axis value.
pub fn ablation_row(
    cfg: &RunConfig,
    shared_dense: &ToyModel,
    data: &SyntheticDataset,
    axis: AblationAxis,
    value: &str,
) -> Result<AblationRow> {
    let start = Instant::now();
    let run = apply_axis(cfg, axis, value)?;
    let mut dense = shared_dense.clone();
    dense.config.placement = run.model.placement;
    dense.config.moe_layers = None;
    let (model, _) = advance(&run, dense, Stage::III, data, |_| Ok(()))?;
    let stats: PassStats = evaluate(&model, &run.eval_batches(data)?)?;
    Ok(AblationRow {
        axis,
        value: value.to_string(),
        final_regressive: stats.regressive,
        final_total: stats.total,
        drop_rate: stats.drop_rate,
        max_load: stats.max_load,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}
