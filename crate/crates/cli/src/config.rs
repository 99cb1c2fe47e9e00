//! Layered JSON configuration: built-in desk defaults, then a config file,
//! then command-line flags.

use std::path::Path;

use anyhow::{bail, Context, Result};
use ptyff::engine::EngineConfig;
use ptyff::evalkit::EvalConfig;
use ptyff::ffop::{TrainConfig, UNetConfig};
use ptyff::simkit::SimConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Environment variable overriding the worker thread count.
pub const THREADS_ENV: &str = "PTYFF_THREADS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Training corpus size.
    pub datasets: usize,
    /// Evaluation datasets simulated after the training corpus.
    pub held_out: usize,
    /// Master seed for every derived seed.
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            datasets: 20,
            held_out: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CliConfig {
    pub sim: SimConfig,
    pub engine: EngineConfig,
    pub train: TrainConfig,
    pub unet: UNetConfig,
    pub eval: EvalConfig,
    pub pipeline: PipelineConfig,
}

impl CliConfig {
    /// Desk defaults for a simulator probe of `probe_size` pixels.
    pub fn desk(probe_size: usize) -> Self {
        Self {
            sim: SimConfig {
                probe_size,
                ..SimConfig::default()
            },
            engine: EngineConfig {
                snapshot_iterations: vec![5, 100],
                ..EngineConfig::desk_scale(probe_size)
            },
            train: TrainConfig::default(),
            unet: UNetConfig::desk(),
            eval: EvalConfig::default(),
            pipeline: PipelineConfig::default(),
        }
    }

    /// Defaults overlaid with `user`; unknown keys are rejected.
    pub fn from_value(user: &Value) -> Result<Self> {
        let probe_size = user
            .pointer("/sim/probe_size")
            .and_then(Value::as_u64)
            .unwrap_or(SimConfig::default().probe_size as u64) as usize;
        let mut merged = serde_json::to_value(Self::desk(probe_size))?;
        merge(&mut merged, user, "")?;
        let cfg: Self = serde_json::from_value(merged).context("configuration does not match the expected types")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::desk(SimConfig::default().probe_size)),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("cannot read config {}", p.display()))?;
                let value: Value =
                    serde_json::from_str(&text).with_context(|| format!("config {} is not valid JSON", p.display()))?;
                Self::from_value(&value).with_context(|| format!("invalid config {}", p.display()))
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.engine.validate()?;
        self.unet.validate()?;
        self.train.validate(&self.unet)?;
        self.eval.validate()?;
        if self.pipeline.datasets == 0 || self.pipeline.held_out == 0 {
            bail!("pipeline needs at least one training and one held-out dataset");
        }
        Ok(())
    }
}

fn merge(base: &mut Value, user: &Value, at: &str) -> Result<()> {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            for (k, v) in u {
                let path = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v, &path)?,
                    None => bail!("unknown config key `{path}`"),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v.clone();
            Ok(())
        }
    }
}

/// Flag, then environment, then config value.
pub fn resolve_threads(flag: Option<usize>, configured: usize) -> Result<usize> {
    let n = match flag {
        Some(n) => n,
        None => match std::env::var(THREADS_ENV) {
            Ok(s) => s
                .trim()
                .parse()
                .with_context(|| format!("{THREADS_ENV} must be a positive integer, got `{s}`"))?,
            Err(_) => configured,
        },
    };
    if n == 0 {
        bail!("thread count must be at least 1");
    }
    Ok(n)
}
