//! Reconstruction loop: SHARP-style probe seeding, padded object
//! initialization, minibatch Adam epochs, probe support projection and the
//! one-shot fast-forward insertion.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ffop::FastForwardOperator;
use crate::fields::{ifft2_unitary, ComplexGrid, DiffractionDataset, ProbeStack, RealGrid};
use crate::forward::PhysicsConfig;
use crate::objective::{poisson_nll, Evaluator, DEFAULT_EPS_AMP, DEFAULT_NLL_FLOOR};
use crate::optim::{lr_at, minibatch_plan, AdamState, LrSchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    /// Number of epochs (one epoch = one sweep over every scan position).
    pub iterations: usize,
    /// Epoch at whose start the fast-forward operator is applied.
    pub i_ml: Option<usize>,
    pub batch_size: usize,
    pub lr_schedule: LrSchedule,
    /// Circular probe support radius in pixels.
    pub probe_support_radius: f64,
    /// Zero padding added to each side of the scanned object area.
    pub object_pad: usize,
    /// Amplitude of the random-phase object seed; 0 gives an all-zero object.
    pub init_amplitude: f64,
    pub rng_seed: u64,
    /// Completed-epoch counts at which the object is copied.
    pub snapshot_iterations: Vec<usize>,
    pub eps_amp: f64,
    pub nll_floor: f64,
    /// Worker threads for per-position gradient work.
    pub threads: usize,
    /// Reset the object moments at `i_ml` even when no operator is supplied.
    pub reset_moments_without_operator: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            iterations: 100,
            i_ml: Some(5),
            batch_size: 50,
            lr_schedule: LrSchedule::default(),
            probe_support_radius: 200.0,
            object_pad: 200,
            init_amplitude: 1e-3,
            rng_seed: 0,
            snapshot_iterations: vec![5, 100],
            eps_amp: DEFAULT_EPS_AMP,
            nll_floor: DEFAULT_NLL_FLOOR,
            threads: 1,
            reset_moments_without_operator: false,
        }
    }
}

impl EngineConfig {
    /// Full-scale support radius and padding (200 px each for a 512 px
    /// probe) shrunk in proportion to `probe_size`. With only ~100 scan
    /// positions a smaller batch and a larger step keep the number of Adam
    /// updates per epoch useful.
    pub fn desk_scale(probe_size: usize) -> Self {
        let ratio = 200.0 / 512.0;
        Self {
            probe_support_radius: (ratio * probe_size as f64).round(),
            object_pad: (ratio * probe_size as f64).round() as usize,
            batch_size: 4,
            lr_schedule: LrSchedule {
                base_lr: 0.02,
                ..LrSchedule::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if let Some(i) = self.i_ml {
            if i == 0 || i > self.iterations {
                return Err(Error::config(format!(
                    "i_ml must lie in 1..={}, got {i}",
                    self.iterations
                )));
            }
        }
        if !(self.probe_support_radius > 0.0) {
            return Err(Error::config("probe_support_radius must be positive"));
        }
        if !(self.init_amplitude >= 0.0 && self.init_amplitude.is_finite()) {
            return Err(Error::config("init_amplitude must be finite and nonnegative"));
        }
        if !(self.eps_amp > 0.0) || !(self.nll_floor > 0.0) {
            return Err(Error::config("eps_amp and nll_floor must be positive"));
        }
        self.lr_schedule.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub amplitude_mse: f64,
    pub poisson_nll: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineEvent {
    /// Completed epochs when the event happened.
    pub iteration: usize,
    pub kind: String,
}

#[derive(Clone, Debug)]
pub struct ReconstructionState {
    pub probe: ProbeStack,
    pub object: ComplexGrid,
    pub adam_probe: AdamState,
    pub adam_object: AdamState,
    /// Completed epochs.
    pub iteration: usize,
    pub loss_history: Vec<LossRecord>,
    pub snapshots: BTreeMap<usize, ComplexGrid>,
    pub events: Vec<EngineEvent>,
    /// Wall-clock seconds spent in each epoch (zero where no clock exists).
    pub epoch_seconds: Vec<f64>,
    pub fast_forward_at: Option<usize>,
}

/// Keeps pixels within `radius` of `(h/2, w/2)` and zeroes the rest.
pub fn apply_probe_support(probe: &mut ProbeStack, radius: f64) {
    let (h, w) = probe.shape();
    let (cr, cc) = ((h / 2) as f64, (w / 2) as f64);
    let r2 = radius * radius;
    for m in probe.modes_mut() {
        for r in 0..h {
            for c in 0..w {
                let (dr, dc) = (r as f64 - cr, c as f64 - cc);
                if dr * dr + dc * dc > r2 {
                    m[(r, c)] = Complex64::default();
                }
            }
        }
    }
}

fn roll(g: &ComplexGrid, dr: usize, dc: usize) -> ComplexGrid {
    let (h, w) = g.shape();
    ComplexGrid::from_fn(h, w, |r, c| g[((r + h - dr % h) % h, (c + w - dc % w) % w)])
}

/// Probe from the square root of the mean measured pattern used as a
/// zero-phase Fourier amplitude, centered in the frame and cut to the
/// support. Extra modes are mode 0 shifted by `m` pixels and scaled by
/// `10^-m`.
pub fn sharp_probe_init(data: &DiffractionDataset, modes: usize, support_radius: f64) -> Result<ProbeStack> {
    if data.is_empty() {
        return Err(Error::config("dataset has no patterns"));
    }
    if modes == 0 {
        return Err(Error::config("mode count must be at least 1"));
    }
    let (h, w) = data.pattern_shape();
    let mut mean = RealGrid::zeros(h, w);
    for p in &data.patterns {
        for (m, v) in mean.data_mut().iter_mut().zip(p.data()) {
            *m += v;
        }
    }
    if mean.data().iter().all(|&v| v == 0.0) {
        return Err(Error::ZeroData);
    }
    let k = data.len() as f64;
    let amplitude = mean.map(|v| Complex64::new((v / k).sqrt(), 0.0));
    // ifft puts the origin at (0, 0); move it to the support center
    let base = roll(&ifft2_unitary(&amplitude)?, h / 2, w / 2);
    let mut first = ProbeStack::new(vec![base])?;
    apply_probe_support(&mut first, support_radius);
    let base = first.into_modes().remove(0);
    let stack = (0..modes)
        .map(|m| {
            let mut g = roll(&base, m, m);
            g.scale(10f64.powi(-(m as i32)));
            g
        })
        .collect();
    ProbeStack::new(stack)
}

/// Padded object frame: the scanned area gets random phases at
/// `init_amplitude`, the `pad`-wide border is exactly zero.
pub fn init_object(data: &DiffractionDataset, pad: usize, init_amplitude: f64, rng_seed: u64) -> Result<ComplexGrid> {
    if data.is_empty() {
        return Err(Error::config("dataset has no patterns"));
    }
    let (h, w) = data.pattern_shape();
    let (mr, mc) = data.positions.max_offset();
    let (ih, iw) = (mr + h, mc + w);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut obj = ComplexGrid::zeros(ih + 2 * pad, iw + 2 * pad);
    for r in 0..ih {
        for c in 0..iw {
            let phase = rng.random_range(-PI..PI);
            obj[(r + pad, c + pad)] = Complex64::from_polar(init_amplitude, phase);
        }
    }
    Ok(obj)
}

/// Replaces the object with `operator(object)` and zeroes its Adam moments.
pub fn apply_fast_forward(state: &mut ReconstructionState, operator: &dyn FastForwardOperator) -> Result<()> {
    if state.fast_forward_at.is_some() {
        return Err(Error::AlreadyApplied);
    }
    let next = operator.apply(&state.object)?;
    if next.shape() != state.object.shape() {
        return Err(Error::Shape {
            context: "fast-forward output vs object",
            expected: state.object.shape(),
            actual: next.shape(),
        });
    }
    next.check_finite("fast-forward output")?;
    state.object = next;
    state.adam_object.reset();
    state.fast_forward_at = Some(state.iteration);
    state.events.push(EngineEvent {
        iteration: state.iteration,
        kind: format!("fast_forward:{}", operator.name()),
    });
    Ok(())
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (epoch as u64).wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

#[cfg(not(target_arch = "wasm32"))]
fn clock() -> Option<std::time::Instant> {
    Some(std::time::Instant::now())
}

#[cfg(target_arch = "wasm32")]
fn clock() -> Option<std::time::Instant> {
    None
}

/// Incremental reconstruction driver; [`run`] wraps it for batch use.
pub struct Engine {
    data: DiffractionDataset,
    cfg: EngineConfig,
    evaluator: Evaluator,
    state: ReconstructionState,
}

impl Engine {
    pub fn new(data: &DiffractionDataset, cfg: &EngineConfig, physics: &PhysicsConfig) -> Result<Self> {
        cfg.validate()?;
        physics.validate()?;
        data.validate()?;
        let probe = sharp_probe_init(data, physics.mode_count, cfg.probe_support_radius)?;
        let object = init_object(data, cfg.object_pad, cfg.init_amplitude, cfg.rng_seed)?;
        let framed = DiffractionDataset {
            positions: data.positions.shifted(cfg.object_pad, cfg.object_pad),
            ..data.clone()
        };
        framed.positions.check_within(probe.shape(), object.shape())?;
        let evaluator = Evaluator::new(probe.shape(), physics, cfg.eps_amp)?.with_threads(cfg.threads)?;
        let n_probe = probe.mode_count() * probe.shape().0 * probe.shape().1;
        let mut state = ReconstructionState {
            adam_probe: AdamState::new(n_probe),
            adam_object: AdamState::new(object.len()),
            probe,
            object,
            iteration: 0,
            loss_history: Vec::new(),
            snapshots: BTreeMap::new(),
            events: Vec::new(),
            epoch_seconds: Vec::new(),
            fast_forward_at: None,
        };
        if cfg.snapshot_iterations.contains(&0) {
            state.snapshots.insert(0, state.object.clone());
        }
        Ok(Self {
            data: framed,
            cfg: cfg.clone(),
            evaluator,
            state,
        })
    }

    pub fn state(&self) -> &ReconstructionState {
        &self.state
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    /// Dataset with scan positions expressed in the padded object frame.
    pub fn framed_data(&self) -> &DiffractionDataset {
        &self.data
    }

    pub fn is_done(&self) -> bool {
        self.state.iteration >= self.cfg.iterations
    }

    /// Full-data Poisson NLL of the current estimate.
    pub fn current_nll(&self) -> Result<f64> {
        let predicted = self.evaluator.predict(&self.state.probe, &self.state.object, &self.data)?;
        Ok(poisson_nll(&predicted, &self.data.patterns, self.cfg.nll_floor)?.value)
    }

    /// Predicted intensities at every scan position.
    pub fn predicted(&self) -> Result<Vec<RealGrid>> {
        self.evaluator.predict(&self.state.probe, &self.state.object, &self.data)
    }

    fn insertion_due(&mut self, operator: Option<&dyn FastForwardOperator>) -> Result<()> {
        if self.cfg.i_ml != Some(self.state.iteration) || self.state.fast_forward_at.is_some() {
            return Ok(());
        }
        match operator {
            Some(op) => apply_fast_forward(&mut self.state, op),
            None => {
                if self.cfg.reset_moments_without_operator {
                    self.state.adam_object.reset();
                    self.state.events.push(EngineEvent {
                        iteration: self.state.iteration,
                        kind: "moment_reset".into(),
                    });
                }
                Ok(())
            }
        }
    }

    /// Runs one epoch and returns its loss record.
    pub fn step_epoch(&mut self, operator: Option<&dyn FastForwardOperator>) -> Result<LossRecord> {
        if self.is_done() {
            return Err(Error::config("all configured iterations already ran"));
        }
        let start = clock();
        self.insertion_due(operator)?;
        let epoch = self.state.iteration;
        let plan = minibatch_plan(self.data.len(), self.cfg.batch_size, epoch_seed(self.cfg.rng_seed, epoch))?;
        let lr = lr_at(&self.cfg.lr_schedule, epoch);
        let mut loss_sum = 0.0;
        for batch in &plan {
            let st = &mut self.state;
            let (loss, grads) = self
                .evaluator
                .loss_and_gradients(&st.probe, &st.object, &self.data, batch)
                .map_err(|e| match e {
                    Error::NonFinite { .. } => Error::Diverged {
                        stage: "iteration",
                        index: epoch + 1,
                    },
                    other => other,
                })?;
            st.adam_probe.step_probe(&mut st.probe, &grads.d_probe, lr)?;
            st.adam_object.step_grid(&mut st.object, &grads.d_object, lr)?;
            apply_probe_support(&mut st.probe, self.cfg.probe_support_radius);
            loss_sum += loss.value;
        }
        let nll = self.current_nll()?;
        let record = LossRecord {
            iteration: epoch + 1,
            amplitude_mse: loss_sum / plan.len() as f64,
            poisson_nll: nll,
        };
        if !(record.amplitude_mse.is_finite() && record.poisson_nll.is_finite()) {
            return Err(Error::Diverged {
                stage: "iteration",
                index: epoch + 1,
            });
        }
        let st = &mut self.state;
        st.iteration = epoch + 1;
        st.loss_history.push(record);
        if self.cfg.snapshot_iterations.contains(&st.iteration) {
            st.snapshots.insert(st.iteration, st.object.clone());
        }
        st.epoch_seconds
            .push(start.map(|t| t.elapsed().as_secs_f64()).unwrap_or(0.0));
        Ok(record)
    }

    /// Applies an insertion scheduled exactly at the end of the run.
    pub fn finish(mut self, operator: Option<&dyn FastForwardOperator>) -> Result<ReconstructionState> {
        if self.is_done() {
            self.insertion_due(operator)?;
        }
        Ok(self.state)
    }
}

/// Executes `cfg.iterations` epochs, inserting `operator` at `cfg.i_ml`.
pub fn run(
    data: &DiffractionDataset,
    cfg: &EngineConfig,
    physics: &PhysicsConfig,
    operator: Option<&dyn FastForwardOperator>,
) -> Result<ReconstructionState> {
    let mut engine = Engine::new(data, cfg, physics)?;
    while !engine.is_done() {
        engine.step_epoch(operator)?;
    }
    engine.finish(operator)
}
