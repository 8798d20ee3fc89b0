use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use moetune::tuning::{ablation_row, advance, apply_axis, AblationAxis, AblationRow, Stage};
use moetune::ToyModel;

use crate::output::{default_root, load_run_config};

/// Runs `f` over `values` on up to `jobs` threads, keeping input order.
fn run_pool<F>(values: &[String], jobs: usize, f: F) -> Vec<Result<AblationRow>>
where
    F: Fn(&str) -> Result<AblationRow> + Sync,
{
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<AblationRow>>>> = values.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, values.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(v) = values.get(i) else { break };
                let row = f(v);
                *slots[i].lock().expect("result slot poisoned") = Some(row);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().expect("result slot poisoned").expect("every value ran"))
        .collect()
}

fn write_outputs(rows: &[AblationRow], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let csv_path = dir.join("ablation.csv");
    let mut w = csv::Writer::from_path(&csv_path).with_context(|| format!("creating {}", csv_path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let jsonl = dir.join("ablation.jsonl");
    let mut out = BufWriter::new(File::create(&jsonl).with_context(|| format!("creating {}", jsonl.display()))?);
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    println!("results written to {} and {}", csv_path.display(), jsonl.display());
    Ok(())
}

pub fn run(
    config: &Path,
    axis: AblationAxis,
    values: &[String],
    jobs: usize,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<()> {
    let mut cfg = load_run_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if values.is_empty() {
        bail!(moetune::Error::Config("--values is empty".into()));
    }
    // reject bad values before spending time on the shared stages
    for v in values {
        apply_axis(&cfg, axis, v)?;
    }
    let data = cfg.dataset()?;
    let mut dense = ToyModel::build_dense(&cfg.model, cfg.seed)?;
    for s in [Stage::I, Stage::II] {
        dense = advance(&cfg, dense, s, &data, |_| Ok(()))?.0;
    }
    let rows: Vec<AblationRow> = run_pool(values, jobs, |v| Ok(ablation_row(&cfg, &dense, &data, axis, v)?))
        .into_iter()
        .collect::<Result<_>>()?;

    println!(
        "{:<12} {:>12} {:>12} {:>10} {:>10} {:>9}",
        "value", "regressive", "total", "drop rate", "max load", "seconds"
    );
    for r in &rows {
        println!(
            "{:<12} {:>12.4} {:>12.4} {:>10.4} {:>10.3} {:>9.1}",
            r.value, r.final_regressive, r.final_total, r.drop_rate, r.max_load, r.wall_seconds
        );
    }
    let axis_name = serde_json::to_value(axis)?.as_str().unwrap_or("axis").to_string();
    write_outputs(
        &rows,
        &out.unwrap_or_else(|| default_root().join(format!("ablate-{axis_name}"))),
    )
}
