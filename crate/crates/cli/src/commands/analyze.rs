use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use moetune::analytics::{
    token_pathways, validate_loads_csv, validate_pathways_json, validate_preferences_csv, write_loads_csv,
    write_pathways_json, write_preferences_csv, RoutingTrace,
};
use moetune::checkpoint;
use moetune::tuning::{RunConfig, TrainBatch};
use moetune::ToyModel;

use crate::output::{default_root, load_run_config};

pub const LOADS_FILE: &str = "loads.csv";
pub const PREFERENCES_FILE: &str = "preferences.csv";
pub const PATHWAYS_FILE: &str = "pathways.json";

/// Traces `batches`, writes the three reports into `dir` and validates
/// each file as read back from disk.
pub fn write_reports(model: &ToyModel, batches: &[TrainBatch], pathways: usize, dir: &Path) -> Result<()> {
    if !model.is_sparse() {
        bail!(moetune::Error::Config(
            "routing reports need a model with MoE layers".into()
        ));
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut trace = RoutingTrace::new();
    for b in batches {
        model.logits(&b.input, Some(&mut trace))?;
    }
    let n = pathways.min(trace.num_tokens());
    let report = token_pathways(&trace, n)?;

    let create = |name: &str| -> Result<(PathBuf, BufWriter<File>)> {
        let path = dir.join(name);
        let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        Ok((path, BufWriter::new(file)))
    };
    let open = |path: &Path| File::open(path).with_context(|| format!("reading {}", path.display()));

    let (loads_path, w) = create(LOADS_FILE)?;
    write_loads_csv(&trace, w)?;
    let loads =
        validate_loads_csv(open(&loads_path)?).with_context(|| format!("validating {}", loads_path.display()))?;

    let (prefs_path, w) = create(PREFERENCES_FILE)?;
    write_preferences_csv(&trace, w)?;
    validate_preferences_csv(open(&prefs_path)?).with_context(|| format!("validating {}", prefs_path.display()))?;

    let (paths_path, w) = create(PATHWAYS_FILE)?;
    write_pathways_json(&report, w)?;
    validate_pathways_json(open(&paths_path)?, n).with_context(|| format!("validating {}", paths_path.display()))?;

    println!("traced {} tokens over {} MoE layers", trace.num_tokens(), loads.len());
    for (layer, l) in &loads {
        let shown: Vec<String> = l.iter().map(|v| format!("{v:.3}")).collect();
        println!("  layer {layer}: top-1 loads [{}]", shown.join(", "));
    }
    println!(
        "{} pathways, variance along the first component {:.4}",
        report.pathways.len(),
        report.explained_variance
    );
    println!("reports written to {}", dir.display());
    Ok(())
}

/// Batches for analysis: the evaluation set, or the first `samples` samples.
fn analysis_batches(cfg: &RunConfig, samples: Option<usize>) -> Result<Vec<TrainBatch>> {
    let data = cfg.dataset()?;
    match samples {
        None => Ok(cfg.eval_batches(&data)?),
        Some(0) => bail!(moetune::Error::Config("--samples must be positive".into())),
        Some(n) if n > data.len() => bail!(moetune::Error::Config(format!(
            "--samples {n} exceeds the {} samples of the dataset",
            data.len()
        ))),
        Some(n) => {
            let indices: Vec<usize> = (0..n).collect();
            indices
                .chunks(cfg.eval.batch_size)
                .map(|c| data.batch(c).map_err(Into::into))
                .collect()
        }
    }
}

pub fn run(
    checkpoint_path: &Path,
    config: Option<&Path>,
    samples: Option<usize>,
    pathways: usize,
    out: Option<PathBuf>,
) -> Result<()> {
    let (model, meta) =
        checkpoint::load(checkpoint_path).with_context(|| format!("loading {}", checkpoint_path.display()))?;
    let mut cfg = match config {
        Some(p) => load_run_config(p)?,
        None => RunConfig::default(),
    };
    // the data must match the checkpoint's input shapes
    cfg.model = meta.config;
    cfg.validate()?;
    let batches = analysis_batches(&cfg, samples)?;
    let dir = out.unwrap_or_else(|| default_root().join("analyze"));
    write_reports(&model, &batches, pathways, &dir)
}
