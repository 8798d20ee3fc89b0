use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use moetune::checkpoint;
use moetune::tuning::{advance, evaluate, RunConfig, Stage};
use moetune::ToyModel;
use serde_json::json;

use crate::commands::analyze::write_reports;
use crate::output::{config_stem, default_root, load_run_config, RunDir, RunManifest};
use crate::VERSION;

fn parse_stages(s: &str) -> Result<Vec<Stage>> {
    if s.eq_ignore_ascii_case("all") {
        return Ok(Stage::ALL.to_vec());
    }
    Ok(vec![s.parse::<Stage>()?])
}

fn previous(stage: Stage) -> Option<Stage> {
    match stage {
        Stage::I => None,
        Stage::II => Some(Stage::I),
        Stage::III => Some(Stage::II),
    }
}

/// The model a stage starts from: fresh for stage I, otherwise the
/// checkpoint of the preceding stage in the same run directory.
fn starting_model(cfg: &RunConfig, dir: &RunDir, stage: Stage) -> Result<ToyModel> {
    let Some(prev) = previous(stage) else {
        return Ok(ToyModel::build_dense(&cfg.model, cfg.seed)?);
    };
    let path = dir.checkpoint(prev);
    if !path.exists() {
        bail!(moetune::Error::Config(format!(
            "stage {stage} needs the stage-{prev} checkpoint {}; run stage {prev} first",
            path.display()
        )));
    }
    let (model, meta) = checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
    if meta.config != cfg.model {
        bail!(moetune::Error::Config(format!(
            "{} was written with a different model config",
            path.display()
        )));
    }
    Ok(model)
}

pub fn run(config: &Path, stage: &str, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = load_run_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let stages = parse_stages(stage)?;
    for &s in &stages {
        cfg.stage(s)?;
    }
    let run_id = format!("{}-seed{}", config_stem(config), cfg.seed);
    let dir = RunDir::create(out.unwrap_or_else(|| default_root().join(&run_id)))?;

    let mut model = starting_model(&cfg, &dir, stages[0])?;
    let data = cfg.dataset()?;
    let eval = cfg.eval_batches(&data)?;

    // a run starting at stage I owns the log; later stages append
    let metrics_path = dir.metrics();
    let file = if stages[0] == Stage::I {
        File::create(&metrics_path)
    } else {
        OpenOptions::new().create(true).append(true).open(&metrics_path)
    }
    .with_context(|| format!("opening {}", metrics_path.display()))?;
    let mut metrics = BufWriter::new(file);

    let mut manifest = RunManifest::read(&dir.manifest())?.unwrap_or(RunManifest {
        run_id,
        config_path: config.to_path_buf(),
        seed: cfg.seed,
        stages: Vec::new(),
        output_dir: dir.root.clone(),
        version: VERSION.to_string(),
    });
    if stages[0] == Stage::I {
        manifest.stages.clear();
    }
    manifest.seed = cfg.seed;
    manifest.version = VERSION.to_string();

    for s in stages {
        let start = Instant::now();
        let (next, report) = advance(&cfg, model, s, &data, |m| {
            serde_json::to_writer(&mut metrics, m).map_err(moetune::Error::from)?;
            metrics.write_all(b"\n")?;
            Ok(())
        })?;
        model = next;
        metrics.flush()?;
        let ckpt = dir.checkpoint(s);
        checkpoint::save(&ckpt, &model, Some(&s.to_string()))?;
        let stats = evaluate(&model, &eval)?;
        let summary = json!({
            "stage": s,
            "steps": report.steps.len(),
            "initial_train_regressive": report.initial_regressive(),
            "final_train_regressive": report.final_regressive(),
            "eval_regressive": stats.regressive,
            "eval_aux": stats.aux,
            "eval_total": stats.total,
            "eval_drop_rate": stats.drop_rate,
            "eval_max_load": stats.max_load,
            "wall_seconds": start.elapsed().as_secs_f64(),
        });
        let summary_path = dir.reports().join(format!("stage-{s}.json"));
        std::fs::write(&summary_path, serde_json::to_string_pretty(&summary)? + "\n")
            .with_context(|| format!("writing {}", summary_path.display()))?;
        println!(
            "stage {s}: {} steps, eval loss {:.4}, max load {:.3}, {:.1}s -> {}",
            report.steps.len(),
            stats.regressive,
            stats.max_load,
            start.elapsed().as_secs_f64(),
            ckpt.display()
        );
        manifest.stages.push(s);
        manifest.write(&dir.manifest())?;
        if s == Stage::III {
            write_reports(&model, &eval, 10, &dir.reports())?;
        }
    }
    Ok(())
}
