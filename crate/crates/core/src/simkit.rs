//! Synthetic ptychography: textured objects, an aperture-derived probe,
//! raster scans and optional Poisson photon noise.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{ComplexGrid, DiffractionDataset, Offset, ProbeStack, RealGrid, ScanPositions};
use crate::forward::{PhysicsConfig, Propagator};
use crate::io::{DatasetBundle, GroundTruth};
use crate::objective::{Evaluator, DEFAULT_EPS_AMP};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub object_size: usize,
    pub probe_size: usize,
    pub scan_step: usize,
    /// Radius of the circular aperture in pixels.
    pub aperture_radius: f64,
    /// Field amplitude inside the aperture; 100 gives roughly 1e6 photons
    /// per pattern at the default sizes.
    pub aperture_amplitude: f64,
    /// Mean photon count per pattern; `None` keeps the patterns noiseless.
    pub photons_per_pattern: Option<f64>,
    pub mode_count: usize,
    pub texture_seed: u64,
    /// Smoothing lengths (pixels) of the two texture octaves.
    pub texture_scales: (f64, f64),
    pub physics: PhysicsConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            object_size: 96,
            probe_size: 32,
            scan_step: 8,
            aperture_radius: 8.0,
            aperture_amplitude: 100.0,
            photons_per_pattern: None,
            mode_count: 1,
            texture_seed: 0,
            texture_scales: (1.5, 5.0),
            physics: PhysicsConfig {
                mode_count: 1,
                ..PhysicsConfig::default()
            },
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.physics.validate()?;
        if self.probe_size == 0 || self.object_size < self.probe_size {
            return Err(Error::config("object_size must be at least probe_size"));
        }
        if self.scan_step == 0 || self.scan_step >= self.probe_size {
            return Err(Error::config("scan_step must be positive and smaller than probe_size"));
        }
        if !(self.aperture_radius > 0.0 && self.aperture_radius < self.probe_size as f64 / 2.0) {
            return Err(Error::config("aperture_radius must lie in (0, probe_size/2)"));
        }
        if !(self.aperture_amplitude > 0.0 && self.aperture_amplitude.is_finite()) {
            return Err(Error::config("aperture_amplitude must be positive"));
        }
        if let Some(p) = self.photons_per_pattern {
            if !(p > 0.0 && p.is_finite()) {
                return Err(Error::config("photons_per_pattern must be positive"));
            }
        }
        if self.mode_count == 0 {
            return Err(Error::config("mode_count must be at least 1"));
        }
        if !(self.texture_scales.0 > 0.0 && self.texture_scales.1 > 0.0) {
            return Err(Error::config("texture scales must be positive"));
        }
        Ok(())
    }

    /// Physics block with the simulator's mode count.
    pub fn effective_physics(&self) -> PhysicsConfig {
        PhysicsConfig {
            mode_count: self.mode_count,
            ..self.physics
        }
    }
}

/// Raster grid covering `[0, object - probe]` on both axes with stride `step`.
pub fn raster_positions(object_size: usize, probe_size: usize, step: usize) -> Vec<Offset> {
    let span = object_size - probe_size;
    let axis: Vec<usize> = (0..=span).step_by(step).collect();
    axis.iter().flat_map(|&r| axis.iter().map(move |&c| (r, c))).collect()
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let half = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-half..=half)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with periodic boundaries.
fn blur(field: &RealGrid, sigma: f64) -> RealGrid {
    let (h, w) = field.shape();
    let k = gaussian_kernel(sigma);
    let half = (k.len() / 2) as isize;
    let wrap = |i: isize, n: usize| i.rem_euclid(n as isize) as usize;
    let rows = RealGrid::from_fn(h, w, |r, c| {
        k.iter()
            .enumerate()
            .map(|(j, kv)| kv * field[(r, wrap(c as isize + j as isize - half, w))])
            .sum()
    });
    RealGrid::from_fn(h, w, |r, c| {
        k.iter()
            .enumerate()
            .map(|(j, kv)| kv * rows[(wrap(r as isize + j as isize - half, h), c)])
            .sum()
    })
}

/// Two-octave smoothed noise rescaled to exactly [0, 1].
fn texture_field(n: usize, scales: (f64, f64), rng: &mut ChaCha8Rng) -> RealGrid {
    let mut octave = |sigma: f64| {
        let noise = RealGrid::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        blur(&noise, sigma)
    };
    let fine = octave(scales.0);
    let coarse = octave(scales.1);
    let norm = |g: &RealGrid| g.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    let (nf, nc) = (norm(&fine), norm(&coarse));
    let mixed = RealGrid::from_fn(n, n, |r, c| 0.4 * fine[(r, c)] / nf + 0.6 * coarse[(r, c)] / nc);
    let lo = mixed.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mixed.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    mixed.map(|v| ((v - lo) / span).clamp(0.0, 1.0))
}

/// Object with amplitude in [0.5, 1] and phase in [-pi/2, pi/2].
pub fn make_object(cfg: &SimConfig) -> ComplexGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.texture_seed);
    let amp = texture_field(cfg.object_size, cfg.texture_scales, &mut rng);
    let phase = texture_field(cfg.object_size, cfg.texture_scales, &mut rng);
    ComplexGrid::from_fn(cfg.object_size, cfg.object_size, |r, c| {
        Complex64::from_polar(0.5 + 0.5 * amp[(r, c)], PI * (phase[(r, c)] - 0.5))
    })
    .with_pitch(cfg.physics.pixel_size)
}

/// Uniform disc of radius `radius` centered at `(n/2, n/2)`.
pub fn circular_aperture(n: usize, radius: f64, amplitude: f64) -> ComplexGrid {
    let c0 = (n / 2) as f64;
    ComplexGrid::from_fn(n, n, |r, c| {
        let d2 = (r as f64 - c0).powi(2) + (c as f64 - c0).powi(2);
        if d2 <= radius * radius {
            Complex64::new(amplitude, 0.0)
        } else {
            Complex64::new(0.0, 0.0)
        }
    })
}

/// Mode 0 is the Fresnel-propagated aperture; further modes are the primary
/// mode modulated by seeded smooth phases, Gram-Schmidt orthogonalized and
/// scaled to `10^-2` of the previous mode's power.
pub fn make_probe(cfg: &SimConfig) -> Result<ProbeStack> {
    let n = cfg.probe_size;
    let physics = cfg.effective_physics();
    let aperture = ProbeStack::new(vec![circular_aperture(n, cfg.aperture_radius, cfg.aperture_amplitude)])?;
    let primary = Propagator::new((n, n), &physics)?
        .propagate(&aperture)?
        .into_modes()
        .remove(0);
    let p0 = primary.norm_sqr();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.texture_seed ^ 0x9E37_79B9_7F4A_7C15);
    let mut modes: Vec<ComplexGrid> = vec![primary];
    for m in 1..cfg.mode_count {
        let phase = texture_field(n, (2.0, 4.0), &mut rng);
        let mut raw = ComplexGrid::from_fn(n, n, |r, c| modes[0][(r, c)] * Complex64::from_polar(1.0, 2.0 * PI * phase[(r, c)]));
        for prev in &modes {
            let coeff = prev.dot(&raw) / prev.norm_sqr();
            for (z, p) in raw.data_mut().iter_mut().zip(prev.data()) {
                *z -= coeff * p;
            }
        }
        let target = p0 * 1e-2f64.powi(m as i32);
        let scale = (target / raw.norm_sqr().max(1e-300)).sqrt();
        raw.scale(scale);
        modes.push(raw);
    }
    let modes = modes.into_iter().map(|g| g.with_pitch(cfg.physics.pixel_size)).collect();
    ProbeStack::new(modes)
}

pub fn make_ground_truth(cfg: &SimConfig) -> Result<GroundTruth> {
    cfg.validate()?;
    Ok(GroundTruth {
        object: make_object(cfg),
        probe: make_probe(cfg)?,
    })
}

/// Independent Poisson draw per pixel; zero-mean pixels stay zero.
pub fn sample_poisson(intensity: &RealGrid, rng: &mut impl Rng) -> RealGrid {
    intensity.map(|&lambda| {
        if lambda > 0.0 {
            Poisson::new(lambda).map(|d| d.sample(rng)).unwrap_or(0.0)
        } else {
            0.0
        }
    })
}

/// Simulates the full dataset with the solver's own forward path.
pub fn synthesize(cfg: &SimConfig) -> Result<DatasetBundle> {
    let mut truth = make_ground_truth(cfg)?;
    let physics = cfg.effective_physics();
    let positions = ScanPositions::new(raster_positions(cfg.object_size, cfg.probe_size, cfg.scan_step));
    let mut data = DiffractionDataset {
        patterns: Vec::new(),
        positions,
        wavelength: physics.wavelength,
        detector_distance: physics.fresnel_distance,
        pixel_size: physics.pixel_size,
    };
    let evaluator = Evaluator::new(truth.probe.shape(), &physics, DEFAULT_EPS_AMP)?;
    if let Some(photons) = cfg.photons_per_pattern {
        let clean = evaluator.predict(&truth.probe, &truth.object, &data)?;
        let mean_sum = clean.iter().map(RealGrid::sum).sum::<f64>() / clean.len() as f64;
        let scale = photons / mean_sum;
        // rescaling the probe keeps the ground truth consistent with the data
        for m in truth.probe.modes_mut() {
            m.scale(scale.sqrt());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.texture_seed ^ 0xD1B5_4A32_D192_ED03);
        data.patterns = clean
            .iter()
            .map(|p| sample_poisson(&p.map(|v| v * scale), &mut rng).with_pitch(physics.pixel_size))
            .collect();
    } else {
        data.patterns = evaluator
            .predict(&truth.probe, &truth.object, &data)?
            .into_iter()
            .map(|p| p.with_pitch(physics.pixel_size))
            .collect();
    }
    data.validate()?;
    Ok(DatasetBundle {
        data,
        physics,
        truth: Some(truth),
    })
}

/// Texture seed of dataset `index` in a corpus drawn from `seed`.
pub fn corpus_seeds(n_datasets: usize, seed: u64) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_datasets).map(|_| rng.next_u64()).collect()
}

pub fn make_corpus(n_datasets: usize, template: &SimConfig, seed: u64) -> Result<Vec<DatasetBundle>> {
    if n_datasets == 0 {
        return Err(Error::config("corpus needs at least one dataset"));
    }
    corpus_seeds(n_datasets, seed)
        .into_iter()
        .map(|texture_seed| {
            synthesize(&SimConfig {
                texture_seed,
                ..template.clone()
            })
        })
        .collect()
}
