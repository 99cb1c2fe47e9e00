//! U-Net with 3x3 double convolutions and max pooling on the way down,
//! 2x2 transposed convolutions and skip concatenation on the way up, and a
//! final 1x1 projection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{
    concat, conv2d, conv2d_backward, conv_transpose2, conv_transpose2_backward, maxpool2, maxpool2_backward,
    relu_backward_in_place, relu_in_place, split, Real, Tensor3,
};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub c_in: usize,
    pub c_out: usize,
    pub c_base: usize,
    pub depth: usize,
    pub growth: f64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl UNetConfig {
    /// c_b = 64, depth 4, r = 2.
    pub fn full_scale() -> Self {
        Self {
            c_in: 2,
            c_out: 2,
            c_base: 64,
            depth: 4,
            growth: 2.0,
        }
    }

    pub fn desk() -> Self {
        Self {
            c_base: 8,
            depth: 2,
            ..Self::full_scale()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_in != 2 || self.c_out != 2 {
            return Err(Error::config("U-Net must map 2 channels to 2 channels"));
        }
        if self.depth == 0 || self.c_base == 0 || !(self.growth >= 1.0) {
            return Err(Error::config(format!("invalid U-Net configuration {self:?}")));
        }
        Ok(())
    }

    /// Channel width at `level` (0 = top, `depth` = bottleneck).
    pub fn channels(&self, level: usize) -> usize {
        ((self.c_base as f64) * self.growth.powi(level as i32)).round().max(1.0) as usize
    }

    /// Spatial sizes must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << self.depth
    }

    /// Every parameter tensor in forward (topological) order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut specs = Vec::new();
        let conv = |specs: &mut Vec<(String, Vec<usize>)>, name: String, cin: usize, cout: usize, k: usize| {
            specs.push((format!("{name}.weight"), vec![cout, cin, k, k]));
            specs.push((format!("{name}.bias"), vec![cout]));
        };
        let mut cin = self.c_in;
        for l in 0..self.depth {
            let c = self.channels(l);
            conv(&mut specs, format!("enc{l}.conv1"), cin, c, 3);
            conv(&mut specs, format!("enc{l}.conv2"), c, c, 3);
            cin = c;
        }
        let cb = self.channels(self.depth);
        conv(&mut specs, "bottleneck.conv1".into(), cin, cb, 3);
        conv(&mut specs, "bottleneck.conv2".into(), cb, cb, 3);
        let mut below = cb;
        for l in (0..self.depth).rev() {
            let c = self.channels(l);
            specs.push((format!("dec{l}.up.weight"), vec![below, c, 2, 2]));
            specs.push((format!("dec{l}.up.bias"), vec![c]));
            conv(&mut specs, format!("dec{l}.conv1"), 2 * c, c, 3);
            conv(&mut specs, format!("dec{l}.conv2"), c, c, 3);
            below = c;
        }
        conv(&mut specs, "head".into(), self.channels(0), self.c_out, 1);
        specs
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

/// Network parameters in topological order plus the architecture they fit.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatorWeights {
    pub config: UNetConfig,
    pub tensors: Vec<NamedTensor>,
}

impl OperatorWeights {
    pub fn zeros(config: &UNetConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            tensors: config
                .param_specs()
                .into_iter()
                .map(|(name, shape)| NamedTensor {
                    values: vec![0.0; shape.iter().product()],
                    name,
                    shape,
                })
                .collect(),
        })
    }

    /// Fan-in-scaled uniform weights (He bound before a rectifier, half
    /// that variance for the linear up-sampling and output layers) and zero
    /// biases.
    pub fn init(config: &UNetConfig, seed: u64) -> Result<Self> {
        let mut w = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in &mut w.tensors {
            if !t.name.ends_with(".weight") {
                continue;
            }
            let linear = t.name.starts_with("head") || t.name.contains(".up.");
            let fan_in = if t.name.contains(".up.") {
                t.shape[0]
            } else {
                t.shape[1] * t.shape[2] * t.shape[3]
            };
            let bound = ((if linear { 3.0 } else { 6.0 }) / fan_in as f64).sqrt() as f32;
            for v in &mut t.values {
                *v = rng.random_range(-bound..bound);
            }
        }
        Ok(w)
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.values.len()).sum()
    }

    /// Checks names, order and shapes against the configured architecture.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let specs = self.config.param_specs();
        if specs.len() != self.tensors.len() {
            return Err(Error::config(format!(
                "expected {} weight tensors, found {}",
                specs.len(),
                self.tensors.len()
            )));
        }
        for ((name, shape), t) in specs.iter().zip(&self.tensors) {
            if *name != t.name || *shape != t.shape || t.values.len() != shape.iter().product::<usize>() {
                return Err(Error::config(format!(
                    "weight tensor {} {:?} does not match expected {} {:?}",
                    t.name, t.shape, name, shape
                )));
            }
            if t.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::config(format!("weight tensor {} holds non-finite values", t.name)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvRef {
    w: usize,
    b: usize,
    cout: usize,
    k: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    enc: Vec<[ConvRef; 2]>,
    bottleneck: [ConvRef; 2],
    /// Indexed by level, not by execution order.
    up: Vec<ConvRef>,
    dec: Vec<[ConvRef; 2]>,
    head: ConvRef,
}

impl Layout {
    fn new(cfg: &UNetConfig) -> Self {
        let specs = cfg.param_specs();
        let find = |name: &str| -> ConvRef {
            let w = specs.iter().position(|(n, _)| n == &format!("{name}.weight")).expect("layer exists");
            let shape = &specs[w].1;
            let (cout, k) = if name.ends_with(".up") { (shape[1], 2) } else { (shape[0], shape[2]) };
            ConvRef { w, b: w + 1, cout, k }
        };
        Self {
            enc: (0..cfg.depth)
                .map(|l| [find(&format!("enc{l}.conv1")), find(&format!("enc{l}.conv2"))])
                .collect(),
            bottleneck: [find("bottleneck.conv1"), find("bottleneck.conv2")],
            up: (0..cfg.depth).map(|l| find(&format!("dec{l}.up"))).collect(),
            dec: (0..cfg.depth)
                .map(|l| [find(&format!("dec{l}.conv1")), find(&format!("dec{l}.conv2"))])
                .collect(),
            head: find("head"),
        }
    }
}

#[derive(Clone, Debug)]
struct DoubleConv<T> {
    input: Tensor3<T>,
    a1: Tensor3<T>,
    a2: Tensor3<T>,
}

/// Activations retained by a forward pass for the matching backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    enc: Vec<(DoubleConv<T>, Vec<u8>)>,
    bottleneck: DoubleConv<T>,
    /// `(up-conv input, double conv over the concatenation)` by level.
    dec: Vec<Option<(Tensor3<T>, DoubleConv<T>)>>,
    head_input: Tensor3<T>,
    out_shape: (usize, usize, usize),
}

/// Per-tensor gradients in the same order as [`UNetConfig::param_specs`].
pub type WeightGrads<T> = Vec<Vec<T>>;

/// U-Net with parameters held in working precision `T`.
#[derive(Clone, Debug)]
pub struct UNet<T> {
    config: UNetConfig,
    names: Vec<(String, Vec<usize>)>,
    params: Vec<Vec<T>>,
    layout: Layout,
    last: Option<ForwardCache<T>>,
}

impl<T: Real> UNet<T> {
    pub fn from_weights(weights: &OperatorWeights) -> Result<Self> {
        weights.validate()?;
        Ok(Self {
            config: weights.config.clone(),
            names: weights.tensors.iter().map(|t| (t.name.clone(), t.shape.clone())).collect(),
            params: weights
                .tensors
                .iter()
                .map(|t| t.values.iter().map(|&v| T::from_f32(v).unwrap()).collect())
                .collect(),
            layout: Layout::new(&weights.config),
            last: None,
        })
    }

    pub fn to_weights(&self) -> OperatorWeights {
        OperatorWeights {
            config: self.config.clone(),
            tensors: self
                .names
                .iter()
                .zip(&self.params)
                .map(|((name, shape), p)| NamedTensor {
                    name: name.clone(),
                    shape: shape.clone(),
                    values: p.iter().map(|v| v.to_f32().unwrap()).collect(),
                })
                .collect(),
        }
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Vec<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Vec<T>] {
        &mut self.params
    }

    pub fn zero_grads(&self) -> WeightGrads<T> {
        self.params.iter().map(|p| vec![T::zero(); p.len()]).collect()
    }

    fn conv(&self, x: &Tensor3<T>, c: ConvRef, relu: bool) -> Tensor3<T> {
        let mut y = conv2d(x, &self.params[c.w], &self.params[c.b], c.cout, c.k);
        if relu {
            relu_in_place(&mut y);
        }
        y
    }

    fn double_conv(&self, x: Tensor3<T>, c: &[ConvRef; 2]) -> DoubleConv<T> {
        let a1 = self.conv(&x, c[0], true);
        let a2 = self.conv(&a1, c[1], true);
        DoubleConv { input: x, a1, a2 }
    }

    fn double_conv_backward(&self, dc: &DoubleConv<T>, mut g: Tensor3<T>, c: &[ConvRef; 2], grads: &mut WeightGrads<T>) -> Tensor3<T> {
        relu_backward_in_place(&dc.a2, &mut g);
        let mut g1 = self.conv_backward(&dc.a1, g, c[1], grads);
        relu_backward_in_place(&dc.a1, &mut g1);
        self.conv_backward(&dc.input, g1, c[0], grads)
    }

    fn conv_backward(&self, input: &Tensor3<T>, g: Tensor3<T>, c: ConvRef, grads: &mut WeightGrads<T>) -> Tensor3<T> {
        let (gw, rest) = grads.split_at_mut(c.b);
        conv2d_backward(input, &self.params[c.w], &g, c.k, &mut gw[c.w], &mut rest[0])
    }

    fn check_input(&self, x: &Tensor3<T>) -> Result<()> {
        if x.c != self.config.c_in {
            return Err(Error::config(format!("expected {} input channels, got {}", self.config.c_in, x.c)));
        }
        let d = self.config.divisor();
        if x.h % d != 0 || x.w % d != 0 || x.h == 0 || x.w == 0 {
            return Err(Error::Indivisible {
                height: x.h,
                width: x.w,
                divisor: d,
            });
        }
        Ok(())
    }

    /// Forward pass returning the output and the activations needed by
    /// [`UNet::backward`].
    pub fn forward_cached(&self, x: &Tensor3<T>) -> Result<(Tensor3<T>, ForwardCache<T>)> {
        self.check_input(x)?;
        let depth = self.config.depth;
        let mut enc = Vec::with_capacity(depth);
        let mut cur = x.clone();
        for l in 0..depth {
            let dc = self.double_conv(cur, &self.layout.enc[l]);
            let (pooled, arg) = maxpool2(&dc.a2);
            enc.push((dc, arg));
            cur = pooled;
        }
        let bottleneck = self.double_conv(cur, &self.layout.bottleneck);
        let mut cur = bottleneck.a2.clone();
        let mut dec: Vec<Option<(Tensor3<T>, DoubleConv<T>)>> = vec![None; depth];
        for l in (0..depth).rev() {
            let up = self.layout.up[l];
            let u = conv_transpose2(&cur, &self.params[up.w], &self.params[up.b], up.cout);
            let cat = concat(&enc[l].0.a2, &u);
            let dc = self.double_conv(cat, &self.layout.dec[l]);
            let next = dc.a2.clone();
            dec[l] = Some((cur, dc));
            cur = next;
        }
        let out = self.conv(&cur, self.layout.head, false);
        let cache = ForwardCache {
            enc,
            bottleneck,
            dec,
            head_input: cur,
            out_shape: out.shape(),
        };
        Ok((out, cache))
    }

    pub fn forward(&self, x: &Tensor3<T>) -> Result<Tensor3<T>> {
        Ok(self.forward_cached(x)?.0)
    }

    /// Reverse-mode pass: returns the input gradient and accumulates
    /// parameter gradients into `grads`.
    pub fn backward(&self, cache: &ForwardCache<T>, upstream: &Tensor3<T>, grads: &mut WeightGrads<T>) -> Result<Tensor3<T>> {
        if upstream.shape() != cache.out_shape {
            return Err(Error::MissingCache);
        }
        let depth = self.config.depth;
        let mut g = self.conv_backward(&cache.head_input, upstream.clone(), self.layout.head, grads);
        let mut skip_grads: Vec<Option<Tensor3<T>>> = vec![None; depth];
        for l in 0..depth {
            let (up_in, dc) = cache.dec[l].as_ref().ok_or(Error::MissingCache)?;
            let g_cat = self.double_conv_backward(dc, g, &self.layout.dec[l], grads);
            let (g_skip, g_up) = split(&g_cat, cache.enc[l].0.a2.c);
            skip_grads[l] = Some(g_skip);
            let up = self.layout.up[l];
            let (gw, rest) = grads.split_at_mut(up.b);
            g = conv_transpose2_backward(up_in, &self.params[up.w], &g_up, &mut gw[up.w], &mut rest[0]);
        }
        g = self.double_conv_backward(&cache.bottleneck, g, &self.layout.bottleneck, grads);
        for l in (0..depth).rev() {
            let (dc, arg) = &cache.enc[l];
            let mut g_a2 = maxpool2_backward(&g, arg, dc.a2.h, dc.a2.w);
            g_a2.add_assign(skip_grads[l].as_ref().expect("set above"));
            g = self.double_conv_backward(dc, g_a2, &self.layout.enc[l], grads);
        }
        Ok(g)
    }

    /// Forward pass that keeps its cache for [`UNet::backward_last`].
    pub fn forward_train(&mut self, x: &Tensor3<T>) -> Result<Tensor3<T>> {
        let (out, cache) = self.forward_cached(x)?;
        self.last = Some(cache);
        Ok(out)
    }

    pub fn backward_last(&mut self, upstream: &Tensor3<T>, grads: &mut WeightGrads<T>) -> Result<Tensor3<T>> {
        let cache = self.last.take().ok_or(Error::MissingCache)?;
        self.backward(&cache, upstream, grads)
    }
}

/// Runs the network described by `weights` on a 2-channel input.
pub fn unet_forward(x: &Tensor3<f32>, weights: &OperatorWeights) -> Result<Tensor3<f32>> {
    UNet::<f32>::from_weights(weights)?.forward(x)
}

/// Input gradient and per-tensor weight gradients of `<upstream, unet(x)>`.
pub fn unet_backward(
    x: &Tensor3<f32>,
    weights: &OperatorWeights,
    upstream: &Tensor3<f32>,
) -> Result<(Tensor3<f32>, WeightGrads<f32>)> {
    let net = UNet::<f32>::from_weights(weights)?;
    let (_, cache) = net.forward_cached(x)?;
    let mut grads = net.zero_grads();
    let gx = net.backward(&cache, upstream, &mut grads)?;
    Ok((gx, grads))
}
