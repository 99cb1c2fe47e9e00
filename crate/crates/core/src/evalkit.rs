//! Convergence metrics: iteration-to-epsilon, speedup, parameter sweeps and
//! difference maps between reconstructions.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::engine::{run, EngineConfig, LossRecord};
use crate::error::{Error, Result};
use crate::ffop::FastForwardOperator;
use crate::fields::{ComplexGrid, DiffractionDataset, RealGrid};
use crate::forward::PhysicsConfig;
use crate::io::write_atomic;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub i_ref: usize,
    pub epsilon_fraction: f64,
    /// Label of the no-operator baseline run.
    pub reference_run: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            i_ref: 50,
            epsilon_fraction: 0.01,
            reference_run: "baseline".into(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.i_ref == 0 {
            return Err(Error::config("i_ref must be at least 1"));
        }
        if !(self.epsilon_fraction > 0.0 && self.epsilon_fraction < 1.0) {
            return Err(Error::config("epsilon_fraction must lie strictly between 0 and 1"));
        }
        Ok(())
    }
}

/// Poisson-NLL series as `(iteration, value)` pairs in increasing iteration order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NllCurve {
    pub points: Vec<(usize, f64)>,
}

impl NllCurve {
    /// Labels values `0, 1, 2, ...`.
    pub fn from_values(values: &[f64]) -> Self {
        Self {
            points: values.iter().copied().enumerate().collect(),
        }
    }

    pub fn from_records(records: &[LossRecord]) -> Self {
        Self {
            points: records.iter().map(|r| (r.iteration, r.poisson_nll)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn value_at(&self, iteration: usize) -> Option<f64> {
        self.points.iter().find(|p| p.0 == iteration).map(|p| p.1)
    }

    pub fn last(&self) -> Option<f64> {
        self.points.last().map(|p| p.1)
    }

    /// `max - min` over the curve.
    pub fn range(&self) -> f64 {
        let (lo, hi) = self
            .points
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.1), hi.max(p.1)));
        hi - lo
    }
}

/// First ML iteration whose NLL lies within `epsilon` of the baseline value
/// at `i_ref`, where `epsilon = epsilon_fraction * range(baseline)`.
///
/// Distances are compared with a few ulps of slack so that a value sitting
/// exactly on the boundary in decimal (e.g. |2.4 - 2.5| = 0.1) qualifies.
pub fn iteration_to_epsilon(ml: &NllCurve, baseline: &NllCurve, cfg: &EvalConfig) -> Result<(Option<usize>, f64)> {
    cfg.validate()?;
    if ml.is_empty() || baseline.is_empty() {
        return Err(Error::config("NLL curves must be nonempty"));
    }
    let reference = baseline
        .value_at(cfg.i_ref)
        .ok_or_else(|| Error::config(format!("i_ref {} is outside the baseline curve", cfg.i_ref)))?;
    let range = baseline.range();
    if !range.is_finite() {
        return Err(Error::config("baseline curve is not finite"));
    }
    if range <= 0.0 {
        return Err(Error::ZeroRange);
    }
    let epsilon = cfg.epsilon_fraction * range;
    let hit = ml.points.iter().find(|&&(_, v)| {
        let slack = 4.0 * f64::EPSILON * v.abs().max(reference.abs()).max(epsilon);
        (v - reference).abs() <= epsilon + slack
    });
    Ok((hit.map(|p| p.0), epsilon))
}

/// Baseline-to-ML time ratio.
pub fn speedup(baseline_time_s: f64, ml_time_s: f64) -> Result<f64> {
    if !(baseline_time_s >= 0.0 && ml_time_s > 0.0) {
        return Err(Error::config("timings must be nonnegative and the ML time positive"));
    }
    Ok(baseline_time_s / ml_time_s)
}

/// Loss curve and per-epoch wall-clock of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunTrace {
    pub name: String,
    pub records: Vec<LossRecord>,
    pub epoch_seconds: Vec<f64>,
}

impl RunTrace {
    /// Wall-clock of the first `iterations` epochs.
    pub fn time_to(&self, iterations: usize) -> Option<f64> {
        (iterations <= self.epoch_seconds.len()).then(|| self.epoch_seconds[..iterations].iter().sum())
    }
}

/// Machine-independent part of a comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceSummary {
    pub baseline: String,
    pub ml: String,
    pub i_ref: usize,
    pub epsilon_fraction: f64,
    pub epsilon: f64,
    pub i_epsilon: Option<usize>,
    /// `i_ref / i_epsilon`.
    pub iteration_speedup: Option<f64>,
    pub baseline_final_nll: f64,
    pub ml_final_nll: f64,
    /// `(ml - baseline) / |baseline|` of the final NLL values.
    pub final_relative_gap: f64,
    pub status: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingSummary {
    pub baseline_time_s: Option<f64>,
    pub ml_time_s: Option<f64>,
    pub speedup: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub summary: ConvergenceSummary,
    pub timing: TimingSummary,
    pub curves: Vec<(String, NllCurve)>,
}

impl EvalReport {
    pub fn i_epsilon(&self) -> Option<usize> {
        self.summary.i_epsilon
    }

    pub fn to_text(&self) -> String {
        let s = &self.summary;
        let t = &self.timing;
        let opt = |v: Option<f64>, unit: &str| v.map_or("-".to_string(), |x| format!("{x:.4}{unit}"));
        let mut out = String::new();
        let _ = writeln!(out, "{:<24} {}", "baseline run", s.baseline);
        let _ = writeln!(out, "{:<24} {}", "ml run", s.ml);
        let _ = writeln!(out, "{:<24} {}", "status", s.status);
        let _ = writeln!(out, "{:<24} {}", "i_ref", s.i_ref);
        let _ = writeln!(out, "{:<24} {:.6e}", "epsilon", s.epsilon);
        let _ = writeln!(
            out,
            "{:<24} {}",
            "i_epsilon",
            s.i_epsilon.map_or("not reached".to_string(), |i| i.to_string())
        );
        let _ = writeln!(out, "{:<24} {}", "iteration speedup", opt(s.iteration_speedup, "x"));
        let _ = writeln!(out, "{:<24} {}", "baseline time (s)", opt(t.baseline_time_s, ""));
        let _ = writeln!(out, "{:<24} {}", "ml time (s)", opt(t.ml_time_s, ""));
        let _ = writeln!(out, "{:<24} {}", "time speedup", opt(t.speedup, "x"));
        let _ = writeln!(out, "{:<24} {:.10e}", "baseline final NLL", s.baseline_final_nll);
        let _ = writeln!(out, "{:<24} {:.10e}", "ml final NLL", s.ml_final_nll);
        let _ = writeln!(out, "{:<24} {:+.4}%", "final NLL gap", 100.0 * s.final_relative_gap);
        out
    }

    /// `iteration,<run>,<run>` with blank cells where a run has no value.
    pub fn merged_curve_csv(&self) -> String {
        let mut iters: Vec<usize> = self
            .curves
            .iter()
            .flat_map(|(_, c)| c.points.iter().map(|p| p.0))
            .collect();
        iters.sort_unstable();
        iters.dedup();
        let mut out = String::from("iteration");
        for (name, _) in &self.curves {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for i in iters {
            out.push_str(&i.to_string());
            for (_, c) in &self.curves {
                out.push(',');
                if let Some(v) = c.value_at(i) {
                    out.push_str(&v.to_string());
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Compares an ML run against the baseline: iterations-to-epsilon, the
/// final-NLL gap and the wall-clock ratio (baseline to `i_ref` vs ML to `i_epsilon`).
pub fn speedup_table(baseline: &RunTrace, ml: &RunTrace, cfg: &EvalConfig) -> Result<EvalReport> {
    let base_curve = NllCurve::from_records(&baseline.records);
    let ml_curve = NllCurve::from_records(&ml.records);
    let (i_eps, epsilon) = iteration_to_epsilon(&ml_curve, &base_curve, cfg)?;
    let baseline_final_nll = base_curve.last().unwrap_or(f64::NAN);
    let ml_final_nll = ml_curve.last().unwrap_or(f64::NAN);
    let baseline_time_s = baseline.time_to(cfg.i_ref);
    let ml_time_s = i_eps.and_then(|i| ml.time_to(i));
    let speedup = match (baseline_time_s, ml_time_s) {
        (Some(b), Some(m)) if m > 0.0 => Some(b / m),
        _ => None,
    };
    Ok(EvalReport {
        summary: ConvergenceSummary {
            baseline: baseline.name.clone(),
            ml: ml.name.clone(),
            i_ref: cfg.i_ref,
            epsilon_fraction: cfg.epsilon_fraction,
            epsilon,
            i_epsilon: i_eps,
            iteration_speedup: i_eps.filter(|&i| i > 0).map(|i| cfg.i_ref as f64 / i as f64),
            baseline_final_nll,
            ml_final_nll,
            final_relative_gap: (ml_final_nll - baseline_final_nll) / baseline_final_nll.abs(),
            status: if i_eps.is_some() { "converged" } else { "not converged" }.into(),
        },
        timing: TimingSummary {
            baseline_time_s,
            ml_time_s,
            speedup,
        },
        curves: vec![(baseline.name.clone(), base_curve), (ml.name.clone(), ml_curve)],
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    IMl,
    Lr,
    BatchSize,
}

impl SweepParameter {
    pub fn name(self) -> &'static str {
        match self {
            SweepParameter::IMl => "i_ml",
            SweepParameter::Lr => "lr",
            SweepParameter::BatchSize => "batch_size",
        }
    }

    fn apply(self, base: &EngineConfig, value: f64) -> Result<EngineConfig> {
        let mut cfg = base.clone();
        let as_count = |v: f64| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::config(format!("{} must be a nonnegative integer, got {v}", self.name())))
            }
        };
        match self {
            SweepParameter::IMl => cfg.i_ml = Some(as_count(value)?),
            SweepParameter::Lr => cfg.lr_schedule.base_lr = value,
            SweepParameter::BatchSize => cfg.batch_size = as_count(value)?,
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl std::str::FromStr for SweepParameter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "i_ml" | "i-ml" => Ok(SweepParameter::IMl),
            "lr" => Ok(SweepParameter::Lr),
            "batch_size" | "batch-size" => Ok(SweepParameter::BatchSize),
            other => Err(Error::config(format!("unknown sweep parameter `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub i_epsilon: Option<usize>,
    pub ml_final_nll: Option<f64>,
    pub baseline_final_nll: Option<f64>,
    /// Failure message for runs that did not complete.
    pub error: Option<String>,
}

fn sweep_point(
    parameter: SweepParameter,
    value: f64,
    base: &EngineConfig,
    physics: &PhysicsConfig,
    data: &DiffractionDataset,
    operator: &dyn FastForwardOperator,
    eval: &EvalConfig,
    shared_baseline: Option<&NllCurve>,
) -> SweepPoint {
    let outcome = (|| -> Result<SweepPoint> {
        let cfg = parameter.apply(base, value)?;
        let baseline = match shared_baseline {
            Some(c) => c.clone(),
            None => NllCurve::from_records(&run(data, &cfg, physics, None)?.loss_history),
        };
        let ml = NllCurve::from_records(&run(data, &cfg, physics, Some(operator))?.loss_history);
        let (i_epsilon, _) = iteration_to_epsilon(&ml, &baseline, eval)?;
        Ok(SweepPoint {
            value,
            i_epsilon,
            ml_final_nll: ml.last(),
            baseline_final_nll: baseline.last(),
            error: None,
        })
    })();
    outcome.unwrap_or_else(|e| SweepPoint {
        value,
        i_epsilon: None,
        ml_final_nll: None,
        baseline_final_nll: None,
        error: Some(e.to_string()),
    })
}

/// Re-runs baseline and ML reconstructions for each value of `parameter`
/// with the same seed. Failed runs are kept as points carrying an error.
/// `concurrent` spreads values over worker threads when available.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    parameter: SweepParameter,
    values: &[f64],
    base: &EngineConfig,
    physics: &PhysicsConfig,
    data: &DiffractionDataset,
    operator: &dyn FastForwardOperator,
    eval: &EvalConfig,
    concurrent: bool,
) -> Result<Vec<SweepPoint>> {
    if values.is_empty() {
        return Err(Error::config("sweep needs at least one value"));
    }
    // the insertion point does not affect a run without an operator
    let shared = if parameter == SweepParameter::IMl {
        Some(NllCurve::from_records(&run(data, base, physics, None)?.loss_history))
    } else {
        None
    };
    let point = |&v: &f64| sweep_point(parameter, v, base, physics, data, operator, eval, shared.as_ref());
    #[cfg(feature = "parallel")]
    if concurrent {
        use rayon::prelude::*;
        return Ok(values.par_iter().map(point).collect());
    }
    let _ = concurrent;
    Ok(values.iter().map(point).collect())
}

pub fn sweep_csv(parameter: SweepParameter, points: &[SweepPoint]) -> String {
    let mut out = format!("{},i_epsilon,ml_final_nll,baseline_final_nll,status\n", parameter.name());
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for p in points {
        let status = match (&p.error, p.i_epsilon) {
            (Some(e), _) => format!("failed: {}", e.replace(',', ";")),
            (None, Some(_)) => "converged".into(),
            (None, None) => "not converged".into(),
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            p.value,
            p.i_epsilon.map(|i| i.to_string()).unwrap_or_default(),
            opt(p.ml_final_nll),
            opt(p.baseline_final_nll),
            status
        );
    }
    out
}

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_phase(phi: f64) -> f64 {
    let w = (phi + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

/// Angle `phi` minimizing `||a - e^{i phi} b||`.
pub fn optimal_global_phase(a: &ComplexGrid, b: &ComplexGrid) -> f64 {
    b.dot(a).arg()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DifferenceMaps {
    pub amplitude_a: RealGrid,
    pub amplitude_b: RealGrid,
    pub phase_a: RealGrid,
    pub phase_b: RealGrid,
    /// `||a| - |b||`.
    pub amplitude_diff: RealGrid,
    /// `wrap(arg(a conj(b)))`, before any alignment.
    pub phase_diff: RealGrid,
    /// `|a - b|`.
    pub abs_diff: RealGrid,
    /// `|a - e^{i phi} b|` at the optimal global phase.
    pub aligned_abs_diff: RealGrid,
    /// Phase difference after removing the optimal global phase.
    pub aligned_phase_diff: RealGrid,
    pub global_phase: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifferenceSummary {
    pub global_phase: f64,
    pub max_abs_diff: f64,
    pub mean_abs_diff: f64,
    pub max_aligned_abs_diff: f64,
    pub mean_aligned_abs_diff: f64,
}

/// Central crop removing `margin` pixels from every side.
pub fn center_crop<T: Clone>(g: &crate::fields::Grid<T>, margin: usize) -> Result<crate::fields::Grid<T>> {
    let (h, w) = g.shape();
    if 2 * margin >= h || 2 * margin >= w {
        return Err(Error::config(format!("crop margin {margin} leaves nothing of a {h}x{w} image")));
    }
    crate::fields::Grid::from_vec(
        h - 2 * margin,
        w - 2 * margin,
        (margin..h - margin)
            .flat_map(|r| g.row(r)[margin..w - margin].to_vec())
            .collect(),
    )
}

pub fn difference_maps(a: &ComplexGrid, b: &ComplexGrid, crop: usize) -> Result<DifferenceMaps> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            context: "difference maps",
            expected: a.shape(),
            actual: b.shape(),
        });
    }
    let (a, b) = if crop > 0 {
        (center_crop(a, crop)?, center_crop(b, crop)?)
    } else {
        (a.clone(), b.clone())
    };
    let phi = optimal_global_phase(&a, &b);
    let rot = Complex64::from_polar(1.0, phi);
    let zip = |f: &dyn Fn(Complex64, Complex64) -> f64| {
        RealGrid::from_fn(a.rows(), a.cols(), |r, c| f(a[(r, c)], b[(r, c)]))
    };
    Ok(DifferenceMaps {
        amplitude_a: a.amplitude(),
        amplitude_b: b.amplitude(),
        phase_a: a.phase(),
        phase_b: b.phase(),
        amplitude_diff: zip(&|x, y| (x.norm() - y.norm()).abs()),
        phase_diff: zip(&|x, y| wrap_phase((x * y.conj()).arg())),
        abs_diff: zip(&|x, y| (x - y).norm()),
        aligned_abs_diff: zip(&|x, y| (x - rot * y).norm()),
        aligned_phase_diff: zip(&|x, y| wrap_phase((x * (rot * y).conj()).arg())),
        global_phase: phi,
    })
}

impl DifferenceMaps {
    pub fn summary(&self) -> DifferenceSummary {
        let stats = |g: &RealGrid| {
            let max = g.data().iter().fold(0.0f64, |m, &v| m.max(v));
            (max, g.sum() / g.len().max(1) as f64)
        };
        let (max_abs_diff, mean_abs_diff) = stats(&self.abs_diff);
        let (max_aligned_abs_diff, mean_aligned_abs_diff) = stats(&self.aligned_abs_diff);
        DifferenceSummary {
            global_phase: self.global_phase,
            max_abs_diff,
            mean_abs_diff,
            max_aligned_abs_diff,
            mean_aligned_abs_diff,
        }
    }

    /// Named images in a fixed order.
    pub fn images(&self) -> Vec<(&'static str, &RealGrid)> {
        vec![
            ("amplitude_a", &self.amplitude_a),
            ("amplitude_b", &self.amplitude_b),
            ("phase_a", &self.phase_a),
            ("phase_b", &self.phase_b),
            ("amplitude_diff", &self.amplitude_diff),
            ("phase_diff", &self.phase_diff),
            ("abs_diff", &self.abs_diff),
            ("aligned_abs_diff", &self.aligned_abs_diff),
            ("aligned_phase_diff", &self.aligned_phase_diff),
        ]
    }
}

/// Binary 16-bit PGM (big-endian samples), linearly mapping `range` (default:
/// the image min/max) onto 0..=65535. A flat image maps to 0.
pub fn pgm16_bytes(img: &RealGrid, range: Option<(f64, f64)>) -> Vec<u8> {
    let (lo, hi) = range.unwrap_or_else(|| {
        img.data()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    });
    let span = hi - lo;
    let mut out = format!("P5\n{} {}\n65535\n", img.cols(), img.rows()).into_bytes();
    for &v in img.data() {
        let level = if span > 0.0 && span.is_finite() {
            ((v - lo) / span * 65535.0).round().clamp(0.0, 65535.0) as u16
        } else {
            0
        };
        out.extend_from_slice(&level.to_be_bytes());
    }
    out
}

pub fn write_pgm16(path: &Path, img: &RealGrid, range: Option<(f64, f64)>) -> Result<()> {
    write_atomic(path, &pgm16_bytes(img, range))
}
