//! Physical forward model: Fresnel probe propagation, exit waves and
//! incoherent multi-mode diffraction intensities.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{extract_patch, ComplexGrid, Fft2, Offset, ProbeStack, RealGrid};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhysicsConfig {
    /// Meters.
    pub wavelength: f64,
    /// Probe propagation distance z in meters; 0 disables propagation.
    pub fresnel_distance: f64,
    /// Sample-plane pixel pitch in meters.
    pub pixel_size: f64,
    pub mode_count: usize,
}

impl Default for PhysicsConfig {
    fn default() -> Self {
        Self {
            wavelength: 1e-9,
            fresnel_distance: 25e-6,
            pixel_size: 5e-8,
            mode_count: 3,
        }
    }
}

impl PhysicsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.wavelength > 0.0 && self.wavelength.is_finite()) {
            return Err(Error::config("wavelength must be positive"));
        }
        if !(self.pixel_size > 0.0 && self.pixel_size.is_finite()) {
            return Err(Error::config("pixel_size must be positive"));
        }
        if !self.fresnel_distance.is_finite() {
            return Err(Error::config("fresnel_distance must be finite"));
        }
        if self.mode_count == 0 {
            return Err(Error::config("mode_count must be at least 1"));
        }
        Ok(())
    }
}

/// Centered spatial frequency (1/m) of index `i` on an `n`-point grid.
#[inline]
pub fn centered_frequency(i: usize, n: usize, pixel_size: f64) -> f64 {
    (i as f64 - (n / 2) as f64) / (n as f64 * pixel_size)
}

/// Unit-modulus Fresnel transfer kernel `exp(-i pi lambda z (qx^2 + qy^2))`
/// laid out on the centered frequency grid.
pub fn fresnel_transfer(shape: (usize, usize), physics: &PhysicsConfig) -> Result<ComplexGrid> {
    physics.validate()?;
    let (h, w) = shape;
    let coeff = -PI * physics.wavelength * physics.fresnel_distance;
    Ok(ComplexGrid::from_fn(h, w, |r, c| {
        let qy = centered_frequency(r, h, physics.pixel_size);
        let qx = centered_frequency(c, w, physics.pixel_size);
        Complex64::from_polar(1.0, coeff * (qx * qx + qy * qy))
    }))
}

/// Fresnel propagator bound to one probe shape.
#[derive(Clone, Debug)]
pub struct Propagator {
    kernel: Option<ComplexGrid>,
    fft: Fft2,
}

impl Propagator {
    pub fn new(shape: (usize, usize), physics: &PhysicsConfig) -> Result<Self> {
        let kernel = if physics.fresnel_distance == 0.0 {
            physics.validate()?;
            None
        } else {
            Some(fresnel_transfer(shape, physics)?)
        };
        Ok(Self {
            kernel,
            fft: Fft2::new(shape.0, shape.1),
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.fft.shape()
    }

    pub fn is_identity(&self) -> bool {
        self.kernel.is_none()
    }

    fn apply(&self, probe: &ProbeStack, conjugate: bool) -> Result<ProbeStack> {
        if probe.shape() != self.shape() {
            return Err(Error::Shape {
                context: "probe vs propagation kernel",
                expected: self.shape(),
                actual: probe.shape(),
            });
        }
        let Some(kernel) = &self.kernel else {
            return Ok(probe.clone());
        };
        let modes = probe
            .modes()
            .iter()
            .map(|m| {
                let mut spectrum = self.fft.forward(m);
                for (s, k) in spectrum.data_mut().iter_mut().zip(kernel.data()) {
                    *s *= if conjugate { k.conj() } else { *k };
                }
                self.fft.inverse(&spectrum)
            })
            .collect();
        ProbeStack::new(modes)
    }

    /// Reference plane to sample plane.
    pub fn propagate(&self, probe: &ProbeStack) -> Result<ProbeStack> {
        self.apply(probe, false)
    }

    /// Adjoint (and inverse) of [`Propagator::propagate`].
    pub fn adjoint(&self, probe: &ProbeStack) -> Result<ProbeStack> {
        self.apply(probe, true)
    }
}

pub fn propagate_probe(probe: &ProbeStack, physics: &PhysicsConfig) -> Result<ProbeStack> {
    Propagator::new(probe.shape(), physics)?.propagate(probe)
}

/// Real-space exit waves, indexed `[position][mode]`.
#[derive(Clone, Debug)]
pub struct ExitWaveBatch {
    pub waves: Vec<Vec<ComplexGrid>>,
}

/// `psi_{k,m}(r) = P_m(r) * O(r - R_k)` for every requested position.
pub fn exit_waves(
    probe: &ProbeStack,
    object: &ComplexGrid,
    positions: &[Offset],
) -> Result<ExitWaveBatch> {
    let shape = probe.shape();
    let waves = positions
        .iter()
        .map(|&pos| {
            let patch = extract_patch(object, pos, shape)?;
            Ok(probe
                .modes()
                .iter()
                .map(|p| {
                    let mut w = p.clone();
                    for (a, b) in w.data_mut().iter_mut().zip(patch.data()) {
                        *a *= b;
                    }
                    w
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(ExitWaveBatch { waves })
}

/// Incoherent sum of squared far-field moduli over modes.
pub fn intensity_from_spectra(spectra: &[ComplexGrid]) -> RealGrid {
    let (h, w) = spectra[0].shape();
    let mut out = RealGrid::zeros(h, w);
    for s in spectra {
        for (o, z) in out.data_mut().iter_mut().zip(s.data()) {
            *o += z.norm_sqr();
        }
    }
    out
}

pub fn predict_intensity(batch: &ExitWaveBatch) -> Vec<RealGrid> {
    let Some(first) = batch.waves.first().and_then(|w| w.first()) else {
        return Vec::new();
    };
    let fft = Fft2::new(first.rows(), first.cols());
    batch
        .waves
        .iter()
        .map(|modes| {
            let spectra: Vec<ComplexGrid> = modes.iter().map(|w| fft.forward(w)).collect();
            intensity_from_spectra(&spectra)
        })
        .collect()
}

/// Predicted intensities for every position, starting from the reference-plane probe.
pub fn simulate_intensities(
    probe: &ProbeStack,
    object: &ComplexGrid,
    positions: &[Offset],
    physics: &PhysicsConfig,
) -> Result<Vec<RealGrid>> {
    let propagated = propagate_probe(probe, physics)?;
    Ok(predict_intensity(&exit_waves(&propagated, object, positions)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn zero_distance_kernel_is_one() {
        let phys = PhysicsConfig {
            fresnel_distance: 0.0,
            ..Default::default()
        };
        let k = fresnel_transfer((8, 6), &phys).unwrap();
        assert!(k.data().iter().all(|z| *z == c(1.0, 0.0)));
    }

    #[test]
    fn zero_pixel_size_rejected() {
        let phys = PhysicsConfig {
            pixel_size: 0.0,
            ..Default::default()
        };
        assert!(fresnel_transfer((4, 4), &phys).is_err());
    }

    #[test]
    fn zero_distance_propagation_is_identity() {
        let phys = PhysicsConfig {
            fresnel_distance: 0.0,
            ..Default::default()
        };
        let p = ProbeStack::new(vec![ComplexGrid::from_fn(4, 4, |r, cc| c(r as f64, cc as f64))]).unwrap();
        let out = propagate_probe(&p, &phys).unwrap();
        assert_eq!(out, p);
    }

    #[test]
    fn propagation_rejects_wrong_shape() {
        let prop = Propagator::new((4, 4), &PhysicsConfig::default()).unwrap();
        let p = ProbeStack::new(vec![ComplexGrid::zeros(4, 5)]).unwrap();
        assert!(prop.propagate(&p).is_err());
    }

    #[test]
    fn unit_exit_wave() {
        let p = ProbeStack::new(vec![ComplexGrid::from_fn(2, 2, |_, _| c(1.0, 0.0))]).unwrap();
        let o = ComplexGrid::from_fn(4, 4, |_, _| c(1.0, 0.0));
        let b = exit_waves(&p, &o, &[(0, 0)]).unwrap();
        assert!(b.waves[0][0].data().iter().all(|z| *z == c(1.0, 0.0)));
        let zero = ComplexGrid::zeros(4, 4);
        let b = exit_waves(&p, &zero, &[(1, 2), (2, 2)]).unwrap();
        assert!(predict_intensity(&b).iter().all(|i| i.data().iter().all(|&v| v == 0.0)));
        assert!(exit_waves(&p, &o, &[(3, 0)]).is_err());
    }

    #[test]
    fn incoherent_mode_sum() {
        let mut a = ComplexGrid::zeros(2, 2);
        let mut b = ComplexGrid::zeros(2, 2);
        a[(0, 1)] = c(1.0, 0.0);
        b[(0, 1)] = c(0.0, 1.0);
        let i = intensity_from_spectra(&[a, b]);
        assert_eq!(i[(0, 1)], 2.0);
    }
}
