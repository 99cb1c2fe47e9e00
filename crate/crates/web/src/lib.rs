//! Browser bindings: simulate a dataset, step a reconstruction while
//! plotting its NLL, and propagate an aperture with a distance slider.

use std::f64::consts::PI;

use ptyff::engine::{Engine, EngineConfig};
use ptyff::forward::propagate_probe;
use ptyff::io::DatasetBundle;
use ptyff::simkit::{circular_aperture, synthesize, SimConfig};
use ptyff::{ProbeStack, RealGrid};
use wasm_bindgen::prelude::*;

/// Grayscale RGBA bytes of `img`, scaled to `range` or to its own extent.
fn to_rgba(img: &RealGrid, range: Option<(f64, f64)>) -> Vec<u8> {
    let (lo, hi) = range.unwrap_or_else(|| {
        img.data()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = Vec::with_capacity(img.len() * 4);
    for &v in img.data() {
        let g = (255.0 * ((v - lo) / span).clamp(0.0, 1.0)).round() as u8;
        out.extend_from_slice(&[g, g, g, 255]);
    }
    out
}

/// A synthetic dataset with its ground truth.
#[wasm_bindgen]
pub struct Simulation {
    bundle: DatasetBundle,
    config: SimConfig,
}

#[wasm_bindgen]
impl Simulation {
    /// `photons <= 0` keeps the patterns noiseless.
    #[wasm_bindgen(constructor)]
    pub fn new(texture_seed: u32, photons: f64) -> Result<Simulation, JsError> {
        let config = SimConfig {
            texture_seed: texture_seed as u64,
            photons_per_pattern: (photons > 0.0).then_some(photons),
            ..SimConfig::default()
        };
        let bundle = synthesize(&config)?;
        Ok(Self { bundle, config })
    }

    #[wasm_bindgen(getter)]
    pub fn object_size(&self) -> usize {
        self.config.object_size
    }

    #[wasm_bindgen(getter)]
    pub fn probe_size(&self) -> usize {
        self.config.probe_size
    }

    #[wasm_bindgen(getter)]
    pub fn pattern_count(&self) -> usize {
        self.bundle.data.len()
    }

    /// Ground-truth amplitude (`"amplitude"`) or phase (`"phase"`).
    pub fn truth_rgba(&self, kind: &str) -> Result<Vec<u8>, JsError> {
        let truth = self.bundle.truth.as_ref().ok_or_else(|| JsError::new("dataset has no ground truth"))?;
        image_of(&truth.object, kind)
    }

    /// Diffraction pattern `index` on a log scale.
    pub fn pattern_rgba(&self, index: usize) -> Result<Vec<u8>, JsError> {
        let p = self
            .bundle
            .data
            .patterns
            .get(index)
            .ok_or_else(|| JsError::new(&format!("pattern {index} out of range")))?;
        Ok(to_rgba(&p.map(|v| (1.0 + v).ln()), None))
    }
}

fn image_of(field: &ptyff::ComplexGrid, kind: &str) -> Result<Vec<u8>, JsError> {
    match kind {
        "amplitude" => Ok(to_rgba(&field.amplitude(), None)),
        "phase" => Ok(to_rgba(&field.phase(), Some((-PI, PI)))),
        other => Err(JsError::new(&format!("unknown image kind `{other}`"))),
    }
}

/// A reconstruction advanced a few epochs at a time from the page.
#[wasm_bindgen]
pub struct Reconstruction {
    engine: Engine,
    nll: Vec<f64>,
}

#[wasm_bindgen]
impl Reconstruction {
    #[wasm_bindgen(constructor)]
    pub fn new(sim: &Simulation, iterations: usize, seed: u32) -> Result<Reconstruction, JsError> {
        let cfg = EngineConfig {
            iterations,
            i_ml: None,
            rng_seed: seed as u64,
            snapshot_iterations: vec![],
            ..EngineConfig::desk_scale(sim.config.probe_size)
        };
        let engine = Engine::new(&sim.bundle.data, &cfg, &sim.bundle.physics)?;
        Ok(Self { engine, nll: Vec::new() })
    }

    /// Runs up to `epochs` more epochs and returns the new NLL values.
    pub fn step(&mut self, epochs: usize) -> Result<Vec<f64>, JsError> {
        let mut fresh = Vec::new();
        for _ in 0..epochs {
            if self.engine.is_done() {
                break;
            }
            fresh.push(self.engine.step_epoch(None)?.poisson_nll);
        }
        self.nll.extend_from_slice(&fresh);
        Ok(fresh)
    }

    #[wasm_bindgen(getter)]
    pub fn iteration(&self) -> usize {
        self.engine.state().iteration
    }

    #[wasm_bindgen(getter)]
    pub fn done(&self) -> bool {
        self.engine.is_done()
    }

    pub fn nll_history(&self) -> Vec<f64> {
        self.nll.clone()
    }

    /// Side length of the padded object estimate.
    #[wasm_bindgen(getter)]
    pub fn object_size(&self) -> usize {
        self.engine.state().object.rows()
    }

    pub fn object_rgba(&self, kind: &str) -> Result<Vec<u8>, JsError> {
        image_of(&self.engine.state().object, kind)
    }
}

/// Amplitude of a circular aperture after propagating `distance_um` micrometers.
#[wasm_bindgen]
pub fn propagated_aperture_rgba(size: usize, radius: f64, distance_um: f64) -> Result<Vec<u8>, JsError> {
    let physics = ptyff::PhysicsConfig {
        fresnel_distance: distance_um * 1e-6,
        mode_count: 1,
        ..ptyff::PhysicsConfig::default()
    };
    let probe = ProbeStack::new(vec![circular_aperture(size, radius, 1.0)])?;
    let out = propagate_probe(&probe, &physics)?;
    Ok(to_rgba(&out.modes()[0].amplitude(), None))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgba_is_four_bytes_per_pixel() {
        let img = RealGrid::from_fn(3, 5, |r, c| (r * c) as f64);
        let px = to_rgba(&img, None);
        assert_eq!(px.len(), 60);
        assert_eq!(&px[..4], &[0, 0, 0, 255]);
        assert_eq!(&px[56..], &[255, 255, 255, 255]);
        assert!(to_rgba(&RealGrid::zeros(2, 2), None).iter().all(|&b| b == 0 || b == 255));
    }

    #[test]
    fn zero_distance_keeps_the_aperture() {
        let physics = ptyff::PhysicsConfig {
            fresnel_distance: 0.0,
            mode_count: 1,
            ..ptyff::PhysicsConfig::default()
        };
        let probe = ProbeStack::new(vec![circular_aperture(16, 4.0, 1.0)]).unwrap();
        assert_eq!(propagate_probe(&probe, &physics).unwrap(), probe);
    }
}
