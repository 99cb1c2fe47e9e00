//! One function per subcommand. Each writes a complete artifact directory
//! through a staging directory, so a failed command never leaves a partial
//! output behind.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use ptyff::engine::{run, EngineConfig};
use ptyff::evalkit::{
    difference_maps, iteration_to_epsilon, speedup_table, sweep, sweep_csv, write_pgm16, ConvergenceSummary,
    DifferenceSummary, EvalConfig, NllCurve, RunTrace, SweepParameter, SweepPoint, TimingSummary,
};
use ptyff::ffop::{
    load_weights, make_training_pairs, save_weights, train_operator_with, EpochLog, FastForwardOperator, TrainConfig,
    TrainOutcome, UNetConfig, UNetOperator,
};
use ptyff::io::{
    load_dataset, load_pairs, load_run, save_dataset, save_pairs, save_run, write_atomic, write_json_atomic,
    DatasetBundle, PairDetails, RunManifest, RunRecord, StagedDir,
};
use ptyff::simkit::{synthesize, SimConfig};
use serde::{Deserialize, Serialize};
use serde_json::json;

/// Invocation-wide settings shared by every command.
#[derive(Clone, Debug)]
pub struct Invocation {
    pub command: Vec<String>,
    pub quiet: bool,
}

impl Invocation {
    pub fn note(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn warn(&self, msg: &str) {
        eprintln!("warning: {msg}");
    }

    fn manifest(&self, kind: &str) -> RunManifest {
        let mut m = RunManifest::new(kind);
        m.command = self.command.clone();
        m.build = build_id();
        m
    }
}

pub fn build_id() -> String {
    format!("{}+{}", env!("CARGO_PKG_VERSION"), env!("PTYFF_BUILD_REV"))
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn load_operator(dir: &Path) -> Result<UNetOperator> {
    let weights = load_weights(dir).with_context(|| format!("cannot load operator weights from {}", dir.display()))?;
    Ok(UNetOperator::new(&weights)?)
}

pub fn simulate(cfg: &SimConfig, out: &Path, ctx: &Invocation) -> Result<DatasetBundle> {
    cfg.validate()?;
    let bundle = synthesize(cfg)?;
    let stage = StagedDir::new(out)?;
    let mut m = ctx.manifest("dataset");
    m.config = serde_json::to_value(cfg)?;
    m.seeds.insert("texture".into(), cfg.texture_seed);
    save_dataset(stage.path(), &bundle, &mut m)?;
    stage.commit()?;
    ctx.note(format!(
        "simulated {} patterns of {:?} into {}",
        bundle.data.len(),
        bundle.data.pattern_shape(),
        out.display()
    ));
    Ok(bundle)
}

pub fn reconstruct(dataset: &Path, cfg: &EngineConfig, operator: Option<&Path>, out: &Path, ctx: &Invocation) -> Result<RunRecord> {
    cfg.validate()?;
    let (bundle, _) = load_dataset(dataset).with_context(|| format!("cannot load dataset {}", dataset.display()))?;
    let op = operator.map(load_operator).transpose()?;
    if op.is_some() && cfg.i_ml.is_none() {
        bail!("an operator was given but i_ml is none; pass --i-ml");
    }
    let state = run(
        &bundle.data,
        cfg,
        &bundle.physics,
        op.as_ref().map(|o| o as &dyn FastForwardOperator),
    )?;
    let record = RunRecord::from(state);
    let stage = StagedDir::new(out)?;
    let mut m = ctx.manifest("run");
    m.config = json!({
        "engine": cfg,
        "physics": bundle.physics,
        "operator": operator.map(display),
    });
    m.seeds.insert("engine".into(), cfg.rng_seed);
    m.inputs.push(display(dataset));
    m.inputs.extend(operator.map(display));
    m.timing.insert("epochs_s".into(), record.epoch_seconds.iter().sum());
    m.timing.insert("threads".into(), cfg.threads as f64);
    for &s in &cfg.snapshot_iterations {
        if !record.snapshots.contains_key(&s) {
            let msg = format!("snapshot iteration {s} is beyond the {} completed iterations", cfg.iterations);
            ctx.warn(&msg);
            m.warnings.push(msg);
        }
    }
    save_run(stage.path(), &record, &mut m)?;
    stage.commit()?;
    let last = record.loss_history.last();
    ctx.note(format!(
        "reconstructed {} iterations (final NLL {}) into {}",
        record.loss_history.len(),
        last.map_or("-".into(), |r| format!("{:.6e}", r.poisson_nll)),
        out.display()
    ));
    Ok(record)
}

/// Cuts `patches_per_dataset` pairs from each run that has both snapshots.
pub fn build_pairs(runs: &[PathBuf], cfg: &TrainConfig, out: &Path, ctx: &Invocation) -> Result<PairDetails> {
    if runs.is_empty() {
        bail!("build-pairs needs at least one run directory");
    }
    let (a, b) = (cfg.input_iteration, cfg.target_iteration);
    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    let mut warnings = Vec::new();
    for (d, dir) in runs.iter().enumerate() {
        let (record, _) = load_run(dir).with_context(|| format!("cannot load run {}", dir.display()))?;
        let (Some(input), Some(target)) = (record.snapshots.get(&a), record.snapshots.get(&b)) else {
            let msg = format!("{} lacks snapshot {a} or {b}; skipped", dir.display());
            ctx.warn(&msg);
            warnings.push(msg);
            skipped.push(display(dir));
            continue;
        };
        let mut cut = make_training_pairs(input, target, cfg, cfg.rng_seed.wrapping_add(d as u64))?;
        cut.iter_mut().for_each(|p| p.dataset = d);
        pairs.extend(cut);
    }
    if pairs.is_empty() {
        bail!("no run directory contained snapshots {a} and {b}");
    }
    let stage = StagedDir::new(out)?;
    let mut m = ctx.manifest("pairs");
    m.config = serde_json::to_value(cfg)?;
    m.seeds.insert("corners".into(), cfg.rng_seed);
    m.inputs = runs.iter().map(|p| display(p)).collect();
    m.warnings = warnings;
    save_pairs(stage.path(), &pairs, a, b, skipped, &mut m)?;
    stage.commit()?;
    let (_, details, _) = load_pairs(out)?;
    ctx.note(format!("wrote {} training pairs into {}", details.pair_count, out.display()));
    Ok(details)
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn training_curve_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,lr,train_loss,val_loss\n");
    for e in log {
        out.push_str(&format!("{},{},{},{}\n", e.epoch, e.lr, opt_cell(e.train_loss), opt_cell(e.val_loss)));
    }
    out
}

pub fn train_ff(pairs_dir: &Path, cfg: &TrainConfig, unet: &UNetConfig, out: &Path, ctx: &Invocation) -> Result<TrainOutcome> {
    let (pairs, details, _) = load_pairs(pairs_dir).with_context(|| format!("cannot load pair store {}", pairs_dir.display()))?;
    let cfg = TrainConfig {
        patch_size: details.patch_size,
        ..cfg.clone()
    };
    let outcome = train_operator_with(&pairs, &cfg, unet, |e| {
        if e.epoch > 0 {
            ctx.note(format!(
                "epoch {:>4}  lr {:.2e}  train {}  val {}",
                e.epoch,
                e.lr,
                e.train_loss.map_or("-".into(), |v| format!("{v:.6e}")),
                e.val_loss.map_or("-".into(), |v| format!("{v:.6e}"))
            ));
        }
    })?;
    for w in &outcome.warnings {
        ctx.warn(w);
    }
    let stage = StagedDir::new(out)?;
    save_weights(stage.path(), &outcome.weights)?;
    write_atomic(&stage.path().join("train_curve.csv"), training_curve_csv(&outcome.log).as_bytes())?;
    let mut m = ctx.manifest("weights");
    m.config = json!({ "train": cfg, "unet": unet });
    m.seeds.insert("training".into(), cfg.rng_seed);
    m.inputs.push(display(pairs_dir));
    m.outputs = vec!["weights.json".into(), "weights.bin".into(), "train_curve.csv".into()];
    m.warnings = outcome.warnings.clone();
    m.details = json!({
        "train_datasets": outcome.train_datasets,
        "val_datasets": outcome.val_datasets,
        "param_count": outcome.weights.param_count(),
    });
    m.write(stage.path())?;
    stage.commit()?;
    ctx.note(format!(
        "trained {} epochs on {} pairs into {}",
        cfg.epochs,
        pairs.len(),
        out.display()
    ));
    Ok(outcome)
}

/// Deterministic part of an evaluation, written to `report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub summary: ConvergenceSummary,
    /// First baseline iteration inside its own epsilon window.
    pub baseline_i_epsilon: Option<usize>,
    pub curves: Vec<(String, NllCurve)>,
    pub difference: DifferenceSummary,
}

/// Wall-clock part of an evaluation, written to `timing.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationTiming {
    #[serde(flatten)]
    pub table: TimingSummary,
    /// Baseline time to its own `i_epsilon` over ML time to `i_epsilon`.
    pub matched_speedup: Option<f64>,
}

fn run_name(dir: &Path) -> String {
    dir.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| display(dir))
}

pub fn evaluate(
    baseline: &Path,
    ml: &Path,
    cfg: &EvalConfig,
    crop: usize,
    out: &Path,
    ctx: &Invocation,
) -> Result<(EvaluationReport, EvaluationTiming)> {
    let load = |dir: &Path| load_run(dir).with_context(|| format!("cannot load run {}", dir.display()));
    let (base_run, _) = load(baseline)?;
    let (ml_run, _) = load(ml)?;
    let trace = |dir: &Path, r: &RunRecord| RunTrace {
        name: run_name(dir),
        records: r.loss_history.clone(),
        epoch_seconds: r.epoch_seconds.clone(),
    };
    let (base_trace, ml_trace) = (trace(baseline, &base_run), trace(ml, &ml_run));
    let mut table = speedup_table(&base_trace, &ml_trace, cfg)
        .with_context(|| format!("epsilon is {} of the baseline NLL range (max - min)", cfg.epsilon_fraction))?;
    let base_curve = NllCurve::from_records(&base_run.loss_history);
    let (baseline_i_epsilon, _) = iteration_to_epsilon(&base_curve, &base_curve, cfg)?;
    let matched_speedup = match (baseline_i_epsilon.and_then(|i| base_trace.time_to(i)), table.timing.ml_time_s) {
        (Some(b), Some(m)) if m > 0.0 => Some(b / m),
        _ => None,
    };
    // two runs of one directory keep distinct labels in the merged table
    if table.curves[0].0 == table.curves[1].0 {
        table.curves[0].0.push_str("_baseline");
        table.curves[1].0.push_str("_ml");
    }
    let maps = difference_maps(&ml_run.object, &base_run.object, crop)?;
    let report = EvaluationReport {
        summary: table.summary.clone(),
        baseline_i_epsilon,
        curves: table.curves.clone(),
        difference: maps.summary(),
    };
    let timing = EvaluationTiming {
        table: table.timing.clone(),
        matched_speedup,
    };

    let stage = StagedDir::new(out)?;
    let dir = stage.path();
    write_json_atomic(&dir.join("report.json"), &report)?;
    write_json_atomic(&dir.join("timing.json"), &timing)?;
    let d = &report.difference;
    let row = |label: &str, value: String| format!("{label:<24} {value}\n");
    let text = [
        table.to_text(),
        row("matched time speedup", timing.matched_speedup.map_or("-".into(), |v| format!("{v:.4}x"))),
        row("max |diff|", format!("{:.6e}", d.max_abs_diff)),
        row("mean |diff|", format!("{:.6e}", d.mean_abs_diff)),
        row("max |diff| aligned", format!("{:.6e}", d.max_aligned_abs_diff)),
        row("mean |diff| aligned", format!("{:.6e}", d.mean_aligned_abs_diff)),
        row("global phase (rad)", format!("{:+.6}", d.global_phase)),
    ]
    .concat();
    write_atomic(&dir.join("report.txt"), text.as_bytes())?;
    write_atomic(&dir.join("curves.csv"), table.merged_curve_csv().as_bytes())?;
    std::fs::create_dir_all(dir.join("maps")).context("cannot create maps directory")?;
    let mut outputs = vec![
        "report.json".to_string(),
        "timing.json".into(),
        "report.txt".into(),
        "curves.csv".into(),
    ];
    let pi = std::f64::consts::PI;
    for (name, img) in maps.images() {
        let range = name.contains("phase").then_some((-pi, pi));
        let file = format!("maps/{name}.pgm");
        write_pgm16(&dir.join(&file), img, range)?;
        outputs.push(file);
    }
    let mut m = ctx.manifest("evaluation");
    m.config = json!({ "eval": cfg, "crop": crop });
    m.inputs = vec![display(baseline), display(ml)];
    m.outputs = outputs;
    for (k, v) in [
        ("baseline_time_s", timing.table.baseline_time_s),
        ("ml_time_s", timing.table.ml_time_s),
    ] {
        if let Some(v) = v {
            m.timing.insert(k.into(), v);
        }
    }
    m.write(dir)?;
    stage.commit()?;
    if !ctx.quiet {
        eprint!("{text}");
    }
    Ok((report, timing))
}

pub fn sweep_command(
    dataset: &Path,
    parameter: SweepParameter,
    values: &[f64],
    engine: &EngineConfig,
    operator: &Path,
    eval: &EvalConfig,
    concurrent: bool,
    out: &Path,
    ctx: &Invocation,
) -> Result<Vec<SweepPoint>> {
    let (bundle, _) = load_dataset(dataset).with_context(|| format!("cannot load dataset {}", dataset.display()))?;
    let op = load_operator(operator)?;
    let points = sweep(parameter, values, engine, &bundle.physics, &bundle.data, &op, eval, concurrent)?;
    for p in points.iter().filter_map(|p| p.error.as_ref().map(|e| (p.value, e))) {
        ctx.warn(&format!("{} = {} failed: {}", parameter.name(), p.0, p.1));
    }
    let stage = StagedDir::new(out)?;
    write_atomic(&stage.path().join("sweep.csv"), sweep_csv(parameter, &points).as_bytes())?;
    let mut m = ctx.manifest("sweep");
    m.config = json!({ "engine": engine, "eval": eval, "parameter": parameter.name(), "values": values, "concurrent": concurrent });
    m.seeds.insert("engine".into(), engine.rng_seed);
    m.inputs = vec![display(dataset), display(operator)];
    m.outputs = vec!["sweep.csv".into()];
    m.details = serde_json::to_value(&points)?;
    m.write(stage.path())?;
    stage.commit()?;
    ctx.note(format!("swept {} over {} values into {}", parameter.name(), values.len(), out.display()));
    Ok(points)
}
