//! Amplitude-MSE data fidelity, the Poisson NLL metric, and the analytic
//! adjoint gradient of the amplitude loss with respect to object and probe.
//!
//! Gradients follow the conjugate-Wirtinger convention: for a complex
//! parameter `z = x + iy` the returned value is `dL/dx + i dL/dy`, which is
//! the steepest-ascent direction of the real loss.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{accumulate_patch, extract_patch, ComplexGrid, DiffractionDataset, Fft2, ProbeStack, RealGrid};
use crate::forward::{intensity_from_spectra, PhysicsConfig, Propagator};

pub const DEFAULT_EPS_AMP: f64 = 1e-8;
pub const DEFAULT_NLL_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    AmplitudeMse,
    PoissonNll,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub kind: LossKind,
}

#[derive(Clone, Debug)]
pub struct GradientPair {
    pub d_object: ComplexGrid,
    pub d_probe: ProbeStack,
}

fn check_pairs(predicted: &[RealGrid], measured: &[RealGrid]) -> Result<()> {
    if predicted.len() != measured.len() {
        return Err(Error::config(format!(
            "{} predicted patterns vs {} measured",
            predicted.len(),
            measured.len()
        )));
    }
    for (p, m) in predicted.iter().zip(measured) {
        if p.shape() != m.shape() {
            return Err(Error::Shape {
                context: "predicted vs measured intensity",
                expected: m.shape(),
                actual: p.shape(),
            });
        }
    }
    Ok(())
}

/// `(1/K) sum_k sum_q (sqrt(I_k) - sqrt(I_k^exp))^2`.
pub fn amplitude_mse(predicted: &[RealGrid], measured: &[RealGrid]) -> Result<LossValue> {
    check_pairs(predicted, measured)?;
    if measured.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut total = 0.0;
    for (k, (p, m)) in predicted.iter().zip(measured).enumerate() {
        for (i, (&ip, &im)) in p.data().iter().zip(m.data()).enumerate() {
            if im < 0.0 {
                return Err(Error::NegativeIntensity {
                    pattern: k,
                    row: i / m.cols(),
                    col: i % m.cols(),
                    value: im,
                });
            }
            let d = ip.max(0.0).sqrt() - im.sqrt();
            total += d * d;
        }
    }
    Ok(LossValue {
        value: total / measured.len() as f64,
        kind: LossKind::AmplitudeMse,
    })
}

/// `sum_k sum_q (I_k - I_k^exp * ln(max(I_k, floor)))`. Evaluation only.
pub fn poisson_nll(predicted: &[RealGrid], measured: &[RealGrid], floor: f64) -> Result<LossValue> {
    check_pairs(predicted, measured)?;
    if !(floor > 0.0) {
        return Err(Error::config("poisson_nll floor must be positive"));
    }
    let mut total = 0.0;
    for (p, m) in predicted.iter().zip(measured) {
        for (&ip, &im) in p.data().iter().zip(m.data()) {
            if ip < 0.0 {
                return Err(Error::config("predicted intensity must be nonnegative"));
            }
            total += ip - im * ip.max(floor).ln();
        }
    }
    Ok(LossValue {
        value: total,
        kind: LossKind::PoissonNll,
    })
}

/// Per-position contribution before reduction.
struct PositionTerm {
    loss: f64,
    d_patch: ComplexGrid,
    d_modes: Vec<ComplexGrid>,
}

/// Loss/gradient evaluator bound to one probe shape and physics setup.
///
/// Per-position work may run on a worker pool; the results are always
/// reduced in batch order, so threaded and serial evaluation agree bitwise.
pub struct Evaluator {
    propagator: Propagator,
    fft: Fft2,
    eps_amp: f64,
    #[cfg(feature = "parallel")]
    pool: Option<rayon::ThreadPool>,
}

impl std::fmt::Debug for Evaluator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Evaluator")
            .field("shape", &self.fft.shape())
            .field("eps_amp", &self.eps_amp)
            .finish()
    }
}

impl Evaluator {
    pub fn new(probe_shape: (usize, usize), physics: &PhysicsConfig, eps_amp: f64) -> Result<Self> {
        if !(eps_amp > 0.0) {
            return Err(Error::config("eps_amp must be positive"));
        }
        Ok(Self {
            propagator: Propagator::new(probe_shape, physics)?,
            fft: Fft2::new(probe_shape.0, probe_shape.1),
            eps_amp,
            #[cfg(feature = "parallel")]
            pool: None,
        })
    }

    /// Fans per-position work out over `threads` workers (1 = serial).
    pub fn with_threads(self, threads: usize) -> Result<Self> {
        #[cfg(feature = "parallel")]
        {
            let mut me = self;
            me.pool = if threads > 1 {
                Some(
                    rayon::ThreadPoolBuilder::new()
                        .num_threads(threads)
                        .build()
                        .map_err(|e| Error::config(format!("thread pool: {e}")))?,
                )
            } else {
                None
            };
            Ok(me)
        }
        #[cfg(not(feature = "parallel"))]
        {
            let _ = threads;
            Ok(self)
        }
    }

    pub fn propagator(&self) -> &Propagator {
        &self.propagator
    }

    fn map_positions<T: Send>(&self, n: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            use rayon::prelude::*;
            return pool.install(|| (0..n).into_par_iter().map(&f).collect());
        }
        (0..n).map(f).collect()
    }

    fn position_term(
        &self,
        probe: &ProbeStack,
        object: &ComplexGrid,
        pattern: &RealGrid,
        pos: (usize, usize),
        grad_scale: f64,
    ) -> Result<PositionTerm> {
        let shape = probe.shape();
        if pattern.shape() != shape {
            return Err(Error::Shape {
                context: "diffraction pattern vs probe",
                expected: shape,
                actual: pattern.shape(),
            });
        }
        let patch = extract_patch(object, pos, shape)?;
        let spectra: Vec<ComplexGrid> = probe
            .modes()
            .iter()
            .map(|p| {
                let mut w = p.clone();
                for (a, b) in w.data_mut().iter_mut().zip(patch.data()) {
                    *a *= b;
                }
                self.fft.forward(&w)
            })
            .collect();
        let modeled = intensity_from_spectra(&spectra);
        let mut loss = 0.0;
        // Fourier-space weight (1 - a/A) applied to every mode
        let weights: Vec<f64> = modeled
            .data()
            .iter()
            .zip(pattern.data())
            .map(|(&i_mod, &i_exp)| {
                let amp = i_mod.sqrt();
                let meas = i_exp.sqrt();
                let d = amp - meas;
                loss += d * d;
                grad_scale * (1.0 - meas / amp.max(self.eps_amp))
            })
            .collect();
        let mut d_patch = ComplexGrid::zeros(shape.0, shape.1);
        let mut d_modes = Vec::with_capacity(spectra.len());
        for (mut chi, p) in spectra.into_iter().zip(probe.modes()) {
            for (z, &w) in chi.data_mut().iter_mut().zip(&weights) {
                *z *= w;
            }
            let g = self.fft.inverse(&chi);
            let mut dm = ComplexGrid::zeros(shape.0, shape.1);
            for (((dp, dmv), gv), (pv, ov)) in d_patch
                .data_mut()
                .iter_mut()
                .zip(dm.data_mut())
                .zip(g.data())
                .zip(p.data().iter().zip(patch.data()))
            {
                *dp += pv.conj() * gv;
                *dmv = ov.conj() * gv;
            }
            d_modes.push(dm);
        }
        Ok(PositionTerm { loss, d_patch, d_modes })
    }

    /// Amplitude-MSE over `batch` (indices into `data`) and its gradients.
    /// `probe` is the reference-plane probe; `data.positions` index `object`.
    pub fn loss_and_gradients(
        &self,
        probe: &ProbeStack,
        object: &ComplexGrid,
        data: &DiffractionDataset,
        batch: &[usize],
    ) -> Result<(LossValue, GradientPair)> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let k = batch.len() as f64;
        let propagated = self.propagator.propagate(probe)?;
        let terms = self.map_positions(batch.len(), |j| {
            let idx = batch[j];
            let pattern = data
                .patterns
                .get(idx)
                .ok_or_else(|| Error::config(format!("batch index {idx} out of range")))?;
            self.position_term(&propagated, object, pattern, data.positions.positions[idx], 2.0 / k)
        })?;

        let (h, w) = probe.shape();
        let mut loss = 0.0;
        let mut d_object = ComplexGrid::zeros(object.rows(), object.cols());
        let mut d_sample: Vec<ComplexGrid> = (0..probe.mode_count()).map(|_| ComplexGrid::zeros(h, w)).collect();
        for (j, term) in terms.iter().enumerate() {
            loss += term.loss;
            accumulate_patch(&mut d_object, data.positions.positions[batch[j]], &term.d_patch)?;
            for (acc, dm) in d_sample.iter_mut().zip(&term.d_modes) {
                for (a, b) in acc.data_mut().iter_mut().zip(dm.data()) {
                    *a += b;
                }
            }
        }
        let loss = loss / k;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                context: "amplitude loss".into(),
                row: 0,
                col: 0,
            });
        }
        let d_probe = self.propagator.adjoint(&ProbeStack::new(d_sample)?)?;
        Ok((
            LossValue {
                value: loss,
                kind: LossKind::AmplitudeMse,
            },
            GradientPair { d_object, d_probe },
        ))
    }

    /// Predicted intensities at every position of `data`.
    pub fn predict(&self, probe: &ProbeStack, object: &ComplexGrid, data: &DiffractionDataset) -> Result<Vec<RealGrid>> {
        let propagated = self.propagator.propagate(probe)?;
        let shape = probe.shape();
        self.map_positions(data.positions.len(), |k| {
            let patch = extract_patch(object, data.positions.positions[k], shape)?;
            let spectra: Vec<ComplexGrid> = propagated
                .modes()
                .iter()
                .map(|p| {
                    let mut w = p.clone();
                    for (a, b) in w.data_mut().iter_mut().zip(patch.data()) {
                        *a *= b;
                    }
                    self.fft.forward(&w)
                })
                .collect();
            Ok(intensity_from_spectra(&spectra))
        })
    }
}

/// One-shot convenience wrapper around [`Evaluator::loss_and_gradients`].
pub fn loss_and_gradients(
    probe: &ProbeStack,
    object: &ComplexGrid,
    data: &DiffractionDataset,
    batch: &[usize],
    physics: &PhysicsConfig,
    eps_amp: f64,
) -> Result<(LossValue, GradientPair)> {
    Evaluator::new(probe.shape(), physics, eps_amp)?.loss_and_gradients(probe, object, data, batch)
}

/// Maximum modulus over a complex slice; handy for gradient checks.
pub fn max_abs(values: &[Complex64]) -> f64 {
    values.iter().fold(0.0, |m, z| m.max(z.norm()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn px(v: f64) -> RealGrid {
        RealGrid::from_vec(1, 1, vec![v]).unwrap()
    }

    #[test]
    fn amplitude_scalar_case() {
        let l = amplitude_mse(&[px(4.0)], &[px(9.0)]).unwrap();
        assert_eq!(l.value, 1.0);
        assert_eq!(l.kind, LossKind::AmplitudeMse);
    }

    #[test]
    fn amplitude_perfect_fit_and_errors() {
        let a = RealGrid::from_fn(3, 3, |r, c| (r * 3 + c) as f64);
        assert_eq!(amplitude_mse(&[a.clone()], &[a.clone()]).unwrap().value, 0.0);
        assert!(matches!(
            amplitude_mse(&[px(1.0)], &[px(-1.0)]),
            Err(Error::NegativeIntensity { .. })
        ));
        assert!(amplitude_mse(&[a], &[px(1.0)]).is_err());
    }

    #[test]
    fn poisson_cases() {
        assert_eq!(poisson_nll(&[px(1.0)], &[px(1.0)], DEFAULT_NLL_FLOOR).unwrap().value, 1.0);
        assert_eq!(poisson_nll(&[px(2.0)], &[px(0.0)], DEFAULT_NLL_FLOOR).unwrap().value, 2.0);
        let v = poisson_nll(&[px(2.0)], &[px(3.0)], DEFAULT_NLL_FLOOR).unwrap().value;
        assert!((v - (2.0 - 3.0 * 2f64.ln())).abs() < 1e-15);
        assert!((v + 0.07944).abs() < 1e-5);
        assert!(poisson_nll(&[px(2.0)], &[px(3.0)], 0.0).is_err());
    }

    #[test]
    fn poisson_floor_monotone() {
        let pred = vec![RealGrid::from_vec(1, 3, vec![0.0, 1e-6, 3.0]).unwrap()];
        let meas = vec![RealGrid::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap()];
        let mut last = f64::INFINITY;
        for f in [1e-12, 1e-9, 1e-7, 1e-5, 1e-3] {
            let v = poisson_nll(&pred, &meas, f).unwrap().value;
            assert!(v <= last);
            last = v;
        }
        let all_above = vec![RealGrid::from_vec(1, 2, vec![1.0, 2.0]).unwrap()];
        let m2 = vec![RealGrid::from_vec(1, 2, vec![1.0, 5.0]).unwrap()];
        assert_eq!(
            poisson_nll(&all_above, &m2, 1e-12).unwrap().value,
            poisson_nll(&all_above, &m2, 0.5).unwrap().value
        );
    }

    #[test]
    fn empty_batch_rejected() {
        let probe = ProbeStack::new(vec![ComplexGrid::zeros(2, 2)]).unwrap();
        let obj = ComplexGrid::zeros(4, 4);
        let data = DiffractionDataset {
            patterns: vec![RealGrid::zeros(2, 2)],
            positions: crate::fields::ScanPositions::new(vec![(0, 0)]),
            wavelength: 1e-9,
            detector_distance: 1.0,
            pixel_size: 1e-8,
        };
        let phys = PhysicsConfig {
            fresnel_distance: 0.0,
            mode_count: 1,
            ..Default::default()
        };
        assert!(matches!(
            loss_and_gradients(&probe, &obj, &data, &[], &phys, DEFAULT_EPS_AMP),
            Err(Error::EmptyBatch)
        ));
        // zero exit wave: zero gradient despite nonzero residual
        let mut d2 = data.clone();
        d2.patterns[0] = RealGrid::from_fn(2, 2, |_, _| 1.0);
        let (l, g) = loss_and_gradients(&probe, &obj, &d2, &[0], &phys, DEFAULT_EPS_AMP).unwrap();
        assert_eq!(l.value, 4.0);
        assert_eq!(max_abs(g.d_object.data()), 0.0);
    }
}
