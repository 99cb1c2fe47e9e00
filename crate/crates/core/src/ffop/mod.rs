//! The fast-forward operator: a map applied once to the whole object
//! estimate mid-reconstruction.

mod tensor;
mod train;
mod unet;
mod weights;

use num_complex::Complex64;

pub use tensor::{Real, Tensor3};
pub use train::{
    make_training_pairs, train_operator, train_operator_with, EpochLog, TrainConfig, TrainOutcome, TrainingPair,
};
pub use unet::{unet_backward, unet_forward, ForwardCache, NamedTensor, OperatorWeights, UNet, UNetConfig, WeightGrads};
pub use weights::{load_weights, save_weights, WEIGHTS_FORMAT_VERSION};

use crate::error::{Error, Result};
use crate::fields::ComplexGrid;
use tensor::cast;

pub trait FastForwardOperator: Send + Sync {
    fn apply(&self, object: &ComplexGrid) -> Result<ComplexGrid>;

    fn name(&self) -> String;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityOperator;

impl FastForwardOperator for IdentityOperator {
    fn apply(&self, object: &ComplexGrid) -> Result<ComplexGrid> {
        Ok(object.clone())
    }

    fn name(&self) -> String {
        "identity".into()
    }
}

/// Channel 0 = real part, channel 1 = imaginary part.
pub fn complex_to_channels<T: Real>(g: &ComplexGrid) -> Tensor3<T> {
    let (h, w) = g.shape();
    let mut data = Vec::with_capacity(2 * h * w);
    data.extend(g.data().iter().map(|z| cast::<T>(z.re)));
    data.extend(g.data().iter().map(|z| cast::<T>(z.im)));
    Tensor3::from_vec(2, h, w, data)
}

pub fn channels_to_complex<T: Real>(t: &Tensor3<T>) -> Result<ComplexGrid> {
    if t.c != 2 {
        return Err(Error::config(format!("expected 2 channels, got {}", t.c)));
    }
    let (re, im) = (t.plane(0), t.plane(1));
    ComplexGrid::from_vec(
        t.h,
        t.w,
        re.iter()
            .zip(im)
            .map(|(a, b)| Complex64::new(a.to_f64().unwrap(), b.to_f64().unwrap()))
            .collect(),
    )
}

/// Root-mean-square modulus, or 1 for an (almost) empty field.
pub fn rms_scale(g: &ComplexGrid) -> f64 {
    let s = (g.norm_sqr() / g.len() as f64).sqrt();
    if s < 1e-12 {
        1.0
    } else {
        s
    }
}

#[inline]
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let j = i % period;
    if j < n {
        j
    } else {
        period - j
    }
}

/// Reflect-pads the bottom/right edges up to the next multiple of `divisor`.
fn reflect_pad(g: &ComplexGrid, divisor: usize) -> ComplexGrid {
    let (h, w) = g.shape();
    let ph = h.div_ceil(divisor) * divisor;
    let pw = w.div_ceil(divisor) * divisor;
    if (ph, pw) == (h, w) {
        return g.clone();
    }
    ComplexGrid::from_fn(ph, pw, |r, c| g[(reflect(r, h), reflect(c, w))])
}

/// Scale-equivariant U-Net application to a complex field of any size.
pub fn ff_apply(obj: &ComplexGrid, net: &UNet<f32>) -> Result<ComplexGrid> {
    let s = rms_scale(obj);
    let (h, w) = obj.shape();
    let mut normalized = reflect_pad(obj, net.config().divisor());
    normalized.scale(1.0 / s);
    let out = channels_to_complex(&net.forward(&complex_to_channels::<f32>(&normalized))?)?;
    let mut cropped = ComplexGrid::from_fn(h, w, |r, c| out[(r, c)] * s);
    cropped = cropped.with_pitch(obj.pitch());
    Ok(cropped)
}

/// Learned operator backed by a U-Net.
#[derive(Clone, Debug)]
pub struct UNetOperator {
    net: UNet<f32>,
}

impl UNetOperator {
    pub fn new(weights: &OperatorWeights) -> Result<Self> {
        Ok(Self {
            net: UNet::from_weights(weights)?,
        })
    }

    pub fn weights(&self) -> OperatorWeights {
        self.net.to_weights()
    }
}

impl FastForwardOperator for UNetOperator {
    fn apply(&self, object: &ComplexGrid) -> Result<ComplexGrid> {
        ff_apply(object, &self.net)
    }

    fn name(&self) -> String {
        let c = self.net.config();
        format!("unet(c_base={}, depth={}, growth={})", c.c_base, c.depth, c.growth)
    }
}
