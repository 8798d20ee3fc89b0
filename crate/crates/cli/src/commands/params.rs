use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use moetune::tuning::RunConfig;
use moetune::{count_parameters, ModelConfig, ToyModel};
use serde_json::json;

/// Models above this size are not built for `--verify`.
const VERIFY_LIMIT: u64 = 50_000_000;

/// Accepts either a bare model config or a run config with a `[model]` table.
fn load_model_config(path: &Path) -> Result<ModelConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| moetune::Error::Config(format!("{}: {e}", path.display())))
        .with_context(|| format!("loading {}", path.display()))?;
    let is_run = text.lines().any(|l| l.trim() == "[model]");
    let cfg = if is_run {
        RunConfig::from_toml_str(&text).map(|r| r.model)
    } else {
        ModelConfig::from_toml_str(&text)
    };
    cfg.with_context(|| format!("loading {}", path.display()))
}

pub fn run(config: &Path, json_out: Option<&Path>, verify: bool) -> Result<()> {
    let cfg = load_model_config(config)?;
    let counts = count_parameters(&cfg);
    let name = cfg.name.clone().unwrap_or_else(|| crate::output::config_stem(config));
    println!(
        "{name}: activated {:.2}B ({}), total {:.2}B ({})",
        counts.activated as f64 / 1e9,
        counts.activated,
        counts.total as f64 / 1e9,
        counts.total
    );
    if verify {
        if counts.total > VERIFY_LIMIT {
            bail!(moetune::Error::Config(format!(
                "--verify builds the model; {} parameters is above the {VERIFY_LIMIT} limit",
                counts.total
            )));
        }
        let built = ToyModel::build(&cfg, 0)?.lm_parameter_count();
        if built != counts {
            bail!("closed form {counts:?} disagrees with the built model {built:?}");
        }
        println!("verified against the built model's buffers");
    }
    let report = json!({
        "name": name,
        "activated": counts.activated,
        "total": counts.total,
        "activated_billions": counts.activated as f64 / 1e9,
        "total_billions": counts.total as f64 / 1e9,
    });
    println!("{report}");
    if let Some(path) = json_out {
        fs::write(path, serde_json::to_string_pretty(&report)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}
