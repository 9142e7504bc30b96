use std::path::{Path, PathBuf};

use super::config::TrainConfig;
use super::dataset::Dataset;
use super::state::{metrics_csv, TrainState};
use crate::autodiff::Archive;
use crate::error::{Error, Result};
use crate::scene_io::write_scene_string;

pub const CHECKPOINT: &str = "checkpoint.dsckpt";
pub const METRICS: &str = "metrics.csv";
pub const PARTITION_REPORT: &str = "partition.txt";
pub const PRUNE_REPORT: &str = "prune_report.txt";
pub const RESOLVED_CONFIG: &str = "config.txt";
pub const FINAL_SCENE: &str = "final.dsplat";

fn write(path: PathBuf, text: &str) -> Result<()> {
    std::fs::write(&path, text).map_err(|e| Error::io(path, e))
}

/// Writes the checkpoint and every report for the current state under `out`.
pub fn write_outputs(state: &TrainState, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    state.to_archive().save(&out.join(CHECKPOINT))?;
    write(out.join(METRICS), &metrics_csv(&state.metrics))?;
    write(out.join(RESOLVED_CONFIG), &state.config.to_text())?;
    let partition = match state.partition() {
        Some(p) => p.report(),
        None => "# no separation performed\n".to_string(),
    };
    write(out.join(PARTITION_REPORT), &partition)?;
    write(out.join(PRUNE_REPORT), &state.prune_report())?;
    write(out.join(FINAL_SCENE), &write_scene_string(&state.model.gaussians))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    TrainState::from_archive(&Archive::load(path)?)
}

/// Trains from scratch. With `out`, checkpoints and logs are refreshed at every evaluation.
pub fn fit(config: TrainConfig, data: &Dataset, out: Option<&Path>) -> Result<TrainState> {
    resume(TrainState::new(config, data)?, data, out)
}

/// Continues `state` until its configured step count.
pub fn resume(mut state: TrainState, data: &Dataset, out: Option<&Path>) -> Result<TrainState> {
    let total = state.config.total_steps;
    let every = state.config.eval_every;
    let mut last_good = String::from("none");
    while state.step < total {
        if let Err(e) = state.advance(data) {
            return Err(match e {
                Error::NonFinite(msg) => Error::NumericalAbort {
                    step: state.step,
                    msg,
                    last_good,
                },
                other => other,
            });
        }
        if state.step % every == 0 || state.step == total {
            let row = state.record_metrics(data)?;
            log::info!("{}", row.csv());
            if let Some(dir) = out {
                write_outputs(&state, dir)?;
                last_good = dir.join(CHECKPOINT).display().to_string();
            }
        }
    }
    if let Some(dir) = out {
        write_outputs(&state, dir)?;
    }
    Ok(state)
}
