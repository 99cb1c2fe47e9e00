//! simulate -> reconstruct -> build-pairs -> train-ff -> reconstruct with the
//! operator -> evaluate, driven from one master seed.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context as _, Result};
use ptyff::engine::EngineConfig;
use ptyff::io::{write_atomic, write_json_atomic, RunManifest};
use ptyff::simkit::{corpus_seeds, SimConfig};
use serde::{Deserialize, Serialize};

use crate::commands::{build_id, build_pairs, evaluate, reconstruct, simulate, train_ff, EvaluationReport, Invocation};
use crate::config::CliConfig;

/// Seed streams derived from the master seed.
const ENGINE_STREAM: u64 = 1;
const PAIR_STREAM: u64 = 2;
const TRAIN_STREAM: u64 = 3;

/// SplitMix64 finalizer over `master + stream * golden`.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeldOutResult {
    pub name: String,
    pub texture_seed: u64,
    pub report: EvaluationReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub master_seed: u64,
    pub i_ml: Option<usize>,
    pub training_datasets: usize,
    pub pair_count: usize,
    pub held_out: Vec<HeldOutResult>,
}

impl PipelineSummary {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "master seed {}  i_ml {:?}  training datasets {}  pairs {}\n",
            self.master_seed, self.i_ml, self.training_datasets, self.pair_count
        );
        let _ = writeln!(out, "{:<10} {:>9} {:>16} {:>16} {:>10}", "dataset", "i_epsilon", "baseline NLL", "ml NLL", "gap");
        for h in &self.held_out {
            let s = &h.report.summary;
            let _ = writeln!(
                out,
                "{:<10} {:>9} {:>16.8e} {:>16.8e} {:>+9.4}%",
                h.name,
                s.i_epsilon.map_or("-".into(), |i| i.to_string()),
                s.baseline_final_nll,
                s.ml_final_nll,
                100.0 * s.final_relative_gap
            );
        }
        out
    }
}

fn step(ctx: &Invocation, name: &str) -> Invocation {
    let mut c = ctx.clone();
    c.command.push(format!("[{name}]"));
    c
}

pub fn run_pipeline(cfg: &CliConfig, out: &Path, ctx: &Invocation) -> Result<PipelineSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let p = &cfg.pipeline;
    let (n, h) = (p.datasets, p.held_out);
    let textures = corpus_seeds(n + h, p.seed);
    let engine_seeds = corpus_seeds(n + h, derive_seed(p.seed, ENGINE_STREAM));
    let mut snapshots = cfg.engine.snapshot_iterations.clone();
    snapshots.extend([cfg.train.input_iteration, cfg.train.target_iteration]);
    snapshots.sort_unstable();
    snapshots.dedup();
    let base_engine = |i: usize| EngineConfig {
        rng_seed: engine_seeds[i],
        snapshot_iterations: snapshots.clone(),
        ..cfg.engine.clone()
    };
    let sim = |i: usize| SimConfig {
        texture_seed: textures[i],
        ..cfg.sim.clone()
    };

    let mut runs: Vec<PathBuf> = Vec::with_capacity(n);
    for i in 0..n {
        ctx.note(format!("[pipeline] training dataset {}/{n}", i + 1));
        let ds = out.join("corpus").join(format!("ds_{i:02}"));
        simulate(&sim(i), &ds, &step(ctx, "simulate"))?;
        let run_dir = out.join("runs").join(format!("ds_{i:02}"));
        reconstruct(&ds, &base_engine(i), None, &run_dir, &step(ctx, "reconstruct"))?;
        runs.push(run_dir);
    }

    let pair_cfg = ptyff::ffop::TrainConfig {
        rng_seed: derive_seed(p.seed, PAIR_STREAM),
        ..cfg.train.clone()
    };
    let pairs_dir = out.join("pairs");
    let details = build_pairs(&runs, &pair_cfg, &pairs_dir, &step(ctx, "build-pairs"))?;
    let train_cfg = ptyff::ffop::TrainConfig {
        rng_seed: derive_seed(p.seed, TRAIN_STREAM),
        ..cfg.train.clone()
    };
    let op_dir = out.join("operator");
    train_ff(&pairs_dir, &train_cfg, &cfg.unet, &op_dir, &step(ctx, "train-ff"))?;

    let mut held_out = Vec::with_capacity(h);
    for j in 0..h {
        let i = n + j;
        let name = format!("ho_{j:02}");
        ctx.note(format!("[pipeline] held-out dataset {}/{h}", j + 1));
        let root = out.join("heldout");
        let ds = root.join("data").join(&name);
        simulate(&sim(i), &ds, &step(ctx, "simulate"))?;
        let engine = base_engine(i);
        let base_dir = root.join("baseline").join(&name);
        let ml_dir = root.join("ml").join(&name);
        reconstruct(&ds, &engine, None, &base_dir, &step(ctx, "reconstruct"))?;
        reconstruct(&ds, &engine, Some(&op_dir), &ml_dir, &step(ctx, "reconstruct"))?;
        let (report, _) = evaluate(&base_dir, &ml_dir, &cfg.eval, 0, &out.join("eval").join(&name), &step(ctx, "evaluate"))?;
        held_out.push(HeldOutResult {
            name,
            texture_seed: textures[i],
            report,
        });
    }

    let summary = PipelineSummary {
        master_seed: p.seed,
        i_ml: cfg.engine.i_ml,
        training_datasets: n,
        pair_count: details.pair_count,
        held_out,
    };
    write_json_atomic(&out.join("summary.json"), &summary)?;
    write_atomic(&out.join("summary.txt"), summary.to_text().as_bytes())?;
    let mut m = RunManifest::new("pipeline");
    m.command = ctx.command.clone();
    m.build = build_id();
    m.config = serde_json::to_value(cfg)?;
    m.seeds.insert("master".into(), p.seed);
    m.outputs = ["corpus", "runs", "pairs", "operator", "heldout", "eval", "summary.json", "summary.txt"]
        .map(String::from)
        .to_vec();
    m.write(out)?;
    Ok(summary)
}
