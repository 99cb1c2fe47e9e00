//! Channel-major 3-D tensors and the handful of layers the U-Net needs, each
//! with its reverse-mode counterpart.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Real:
    Float + FromPrimitive + ToPrimitive + Sum + AddAssign + SubAssign + MulAssign + Default + Debug + Send + Sync + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

#[inline]
pub(crate) fn cast<T: Real>(v: f64) -> T {
    T::from_f64(v).expect("finite cast")
}

/// `(channels, height, width)` tensor, row-major within each channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3<T> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor3<T> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![T::zero(); c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), c * h * w, "tensor data length");
        Self { c, h, w, data }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.h * self.w;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn plane_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.h * self.w;
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.h + y) * self.w + x]
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor3<U> {
        Tensor3 {
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64().unwrap()).unwrap()).collect(),
        }
    }
}

/// Row span `[lo, hi)` of output rows for which `y + d` stays inside `[0, n)`.
#[inline]
fn valid_span(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).clamp(0, n as isize) as usize;
    (lo.min(hi), hi)
}

/// Same-padded stride-1 convolution; `weight` is `(cout, cin, k, k)`.
pub fn conv2d<T: Real>(input: &Tensor3<T>, weight: &[T], bias: &[T], cout: usize, k: usize) -> Tensor3<T> {
    let (cin, h, w) = input.shape();
    debug_assert_eq!(weight.len(), cout * cin * k * k);
    let pad = (k / 2) as isize;
    let mut out = Tensor3::zeros(cout, h, w);
    for o in 0..cout {
        let plane = out.plane_mut(o);
        plane.iter_mut().for_each(|v| *v = bias[o]);
        for i in 0..cin {
            let src = input.plane(i);
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y0, y1) = valid_span(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = valid_span(w, dx);
                    let wv = weight[((o * cin + i) * k + ky) * k + kx];
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let dst = &mut plane[y * w + x0..y * w + x1];
                        let s = &src[sy * w + (x0 as isize + dx) as usize..][..x1 - x0];
                        for (d, &v) in dst.iter_mut().zip(s) {
                            *d += wv * v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Reverse of [`conv2d`]: accumulates weight/bias gradients, returns the
/// input gradient.
pub fn conv2d_backward<T: Real>(
    input: &Tensor3<T>,
    weight: &[T],
    grad_out: &Tensor3<T>,
    k: usize,
    grad_w: &mut [T],
    grad_b: &mut [T],
) -> Tensor3<T> {
    let (cin, h, w) = input.shape();
    let cout = grad_out.c;
    let pad = (k / 2) as isize;
    let mut grad_in = Tensor3::zeros(cin, h, w);
    for o in 0..cout {
        let go = grad_out.plane(o);
        grad_b[o] += go.iter().copied().sum::<T>();
        for i in 0..cin {
            let src = input.plane(i);
            let gi = grad_in.plane_mut(i);
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y0, y1) = valid_span(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = valid_span(w, dx);
                    let widx = ((o * cin + i) * k + ky) * k + kx;
                    let wv = weight[widx];
                    let mut acc = T::zero();
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let g = &go[y * w + x0..y * w + x1];
                        let off = sy * w + (x0 as isize + dx) as usize;
                        let s = &src[off..off + (x1 - x0)];
                        for (&gv, &sv) in g.iter().zip(s) {
                            acc += gv * sv;
                        }
                        for (d, &gv) in gi[off..off + (x1 - x0)].iter_mut().zip(g) {
                            *d += wv * gv;
                        }
                    }
                    grad_w[widx] += acc;
                }
            }
        }
    }
    grad_in
}

pub fn relu_in_place<T: Real>(t: &mut Tensor3<T>) {
    for v in &mut t.data {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zeroes gradient entries whose forward activation was clipped.
pub fn relu_backward_in_place<T: Real>(activated: &Tensor3<T>, grad: &mut Tensor3<T>) {
    for (g, &a) in grad.data.iter_mut().zip(&activated.data) {
        if a <= T::zero() {
            *g = T::zero();
        }
    }
}

/// 2x2 stride-2 max pooling; returns the pooled tensor and the winning
/// offset (0..4, row-major in the window) per output element.
pub fn maxpool2<T: Real>(input: &Tensor3<T>) -> (Tensor3<T>, Vec<u8>) {
    let (c, h, w) = input.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor3::zeros(c, oh, ow);
    let mut arg = vec![0u8; c * oh * ow];
    for ch in 0..c {
        let src = input.plane(ch);
        for y in 0..oh {
            for x in 0..ow {
                let mut best = src[2 * y * w + 2 * x];
                let mut bi = 0u8;
                for (j, (dy, dx)) in [(0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                    let v = src[(2 * y + dy) * w + 2 * x + dx];
                    if v > best {
                        best = v;
                        bi = j as u8 + 1;
                    }
                }
                let o = (ch * oh + y) * ow + x;
                out.data[o] = best;
                arg[o] = bi;
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward<T: Real>(grad_out: &Tensor3<T>, arg: &[u8], h: usize, w: usize) -> Tensor3<T> {
    let (c, oh, ow) = grad_out.shape();
    let mut g = Tensor3::zeros(c, h, w);
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let o = (ch * oh + y) * ow + x;
                let a = arg[o] as usize;
                let (dy, dx) = (a / 2, a % 2);
                g.data[(ch * h + 2 * y + dy) * w + 2 * x + dx] += grad_out.data[o];
            }
        }
    }
    g
}

/// 2x2 stride-2 transposed convolution; `weight` is `(cin, cout, 2, 2)`.
pub fn conv_transpose2<T: Real>(input: &Tensor3<T>, weight: &[T], bias: &[T], cout: usize) -> Tensor3<T> {
    let (cin, h, w) = input.shape();
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor3::zeros(cout, oh, ow);
    for o in 0..cout {
        let plane = out.plane_mut(o);
        plane.iter_mut().for_each(|v| *v = bias[o]);
        for i in 0..cin {
            let src = input.plane(i);
            let wk = &weight[(i * cout + o) * 4..][..4];
            for y in 0..h {
                for dy in 0..2 {
                    let row = &mut plane[(2 * y + dy) * ow..][..ow];
                    let (w0, w1) = (wk[dy * 2], wk[dy * 2 + 1]);
                    for x in 0..w {
                        let v = src[y * w + x];
                        row[2 * x] += w0 * v;
                        row[2 * x + 1] += w1 * v;
                    }
                }
            }
        }
    }
    out
}

pub fn conv_transpose2_backward<T: Real>(
    input: &Tensor3<T>,
    weight: &[T],
    grad_out: &Tensor3<T>,
    grad_w: &mut [T],
    grad_b: &mut [T],
) -> Tensor3<T> {
    let (cin, h, w) = input.shape();
    let cout = grad_out.c;
    let ow = 2 * w;
    let mut grad_in = Tensor3::zeros(cin, h, w);
    for o in 0..cout {
        let go = grad_out.plane(o);
        grad_b[o] += go.iter().copied().sum::<T>();
        for i in 0..cin {
            let src = input.plane(i);
            let base = (i * cout + o) * 4;
            let gi = grad_in.plane_mut(i);
            for y in 0..h {
                for dy in 0..2 {
                    let row = &go[(2 * y + dy) * ow..][..ow];
                    let (w0, w1) = (weight[base + dy * 2], weight[base + dy * 2 + 1]);
                    let (mut a0, mut a1) = (T::zero(), T::zero());
                    for x in 0..w {
                        let (g0, g1) = (row[2 * x], row[2 * x + 1]);
                        let v = src[y * w + x];
                        a0 += g0 * v;
                        a1 += g1 * v;
                        gi[y * w + x] += w0 * g0 + w1 * g1;
                    }
                    grad_w[base + dy * 2] += a0;
                    grad_w[base + dy * 2 + 1] += a1;
                }
            }
        }
    }
    grad_in
}

/// Channel concatenation `[a; b]`.
pub fn concat<T: Real>(a: &Tensor3<T>, b: &Tensor3<T>) -> Tensor3<T> {
    assert_eq!((a.h, a.w), (b.h, b.w), "concat spatial mismatch");
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor3::from_vec(a.c + b.c, a.h, a.w, data)
}

/// Splits a channel concatenation back into its `(first, rest)` parts.
pub fn split<T: Real>(t: &Tensor3<T>, first: usize) -> (Tensor3<T>, Tensor3<T>) {
    let n = first * t.h * t.w;
    (
        Tensor3::from_vec(first, t.h, t.w, t.data[..n].to_vec()),
        Tensor3::from_vec(t.c - first, t.h, t.w, t.data[n..].to_vec()),
    )
}
