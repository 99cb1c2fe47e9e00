//! Complex field containers, centered unitary Fourier transforms and patch
//! gather/scatter.
//!
//! All grids are row-major. The Fourier convention is fixed: forward and
//! inverse transforms carry `1/sqrt(H*W)` and the zero frequency sits at
//! index `(H/2, W/2)` (integer division), so `fft2_unitary` is both the
//! inverse and the adjoint of `ifft2_unitary`.

use std::cell::RefCell;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major 2-D grid with an optional physical pixel pitch in meters
/// (0 means unitless).
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
    pitch: f64,
}

pub type ComplexGrid = Grid<Complex64>;
pub type RealGrid = Grid<f64>;

impl<T: Clone + Default> Grid<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows >= 1 && cols >= 1, "grid dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![T::default(); rows * cols],
            pitch: 0.0,
        }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::config(format!(
                "grid {rows}x{cols} cannot hold {} elements",
                data.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            data,
            pitch: 0.0,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        assert!(rows >= 1 && cols >= 1, "grid dimensions must be positive");
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self {
            rows,
            cols,
            data,
            pitch: 0.0,
        }
    }

    pub fn with_pitch(mut self, pitch: f64) -> Self {
        self.pitch = pitch;
        self
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn pitch(&self) -> f64 {
        self.pitch
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> &T {
        &self.data[row * self.cols + col]
    }

    #[inline]
    pub fn get_mut(&mut self, row: usize, col: usize) -> &mut T {
        &mut self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[T] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(f).collect(),
            pitch: self.pitch,
        }
    }
}

impl<T> std::ops::Index<(usize, usize)> for Grid<T> {
    type Output = T;
    fn index(&self, (r, c): (usize, usize)) -> &T {
        self.get(r, c)
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for Grid<T> {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut T {
        self.get_mut(r, c)
    }
}

impl ComplexGrid {
    /// Sum of squared moduli.
    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    /// Inner product `<self, other> = sum conj(self) * other`.
    pub fn dot(&self, other: &ComplexGrid) -> Complex64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.conj() * b)
            .sum()
    }

    pub fn scale(&mut self, s: f64) {
        for z in &mut self.data {
            *z *= s;
        }
    }

    pub fn first_non_finite(&self) -> Option<(usize, usize)> {
        self.data
            .iter()
            .position(|z| !(z.re.is_finite() && z.im.is_finite()))
            .map(|i| (i / self.cols, i % self.cols))
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        match self.first_non_finite() {
            Some((row, col)) => Err(Error::NonFinite {
                context: context.to_string(),
                row,
                col,
            }),
            None => Ok(()),
        }
    }

    pub fn amplitude(&self) -> RealGrid {
        self.map(|z| z.norm())
    }

    pub fn phase(&self) -> RealGrid {
        self.map(|z| z.arg())
    }
}

impl RealGrid {
    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn first_non_finite(&self) -> Option<(usize, usize)> {
        self.data
            .iter()
            .position(|v| !v.is_finite())
            .map(|i| (i / self.cols, i % self.cols))
    }
}

/// Incoherent probe modes sharing one shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeStack {
    modes: Vec<ComplexGrid>,
}

impl ProbeStack {
    pub fn new(modes: Vec<ComplexGrid>) -> Result<Self> {
        let first = modes
            .first()
            .ok_or_else(|| Error::config("probe stack needs at least one mode"))?;
        let shape = first.shape();
        if let Some(bad) = modes.iter().find(|m| m.shape() != shape) {
            return Err(Error::Shape {
                context: "probe modes",
                expected: shape,
                actual: bad.shape(),
            });
        }
        Ok(Self { modes })
    }

    pub fn zeros_like(&self) -> Self {
        let (h, w) = self.shape();
        Self {
            modes: (0..self.mode_count()).map(|_| ComplexGrid::zeros(h, w)).collect(),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.modes[0].shape()
    }

    pub fn mode_count(&self) -> usize {
        self.modes.len()
    }

    pub fn modes(&self) -> &[ComplexGrid] {
        &self.modes
    }

    pub fn modes_mut(&mut self) -> &mut [ComplexGrid] {
        &mut self.modes
    }

    pub fn into_modes(self) -> Vec<ComplexGrid> {
        self.modes
    }

    /// Total power over all modes.
    pub fn power(&self) -> f64 {
        self.modes.iter().map(ComplexGrid::norm_sqr).sum()
    }
}

/// Pixel offset `(row, col)` of a probe footprint's top-left corner.
pub type Offset = (usize, usize);

/// Scan positions as integer offsets into an object frame.
#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ScanPositions {
    pub positions: Vec<Offset>,
}

impl ScanPositions {
    pub fn new(positions: Vec<Offset>) -> Self {
        Self { positions }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Offset> {
        self.positions.iter()
    }

    /// Largest `(row, col)` offset.
    pub fn max_offset(&self) -> Offset {
        self.positions
            .iter()
            .fold((0, 0), |(r, c), &(pr, pc)| (r.max(pr), c.max(pc)))
    }

    /// Checks that every footprint of `probe` lies inside `object`.
    pub fn check_within(&self, probe: (usize, usize), object: (usize, usize)) -> Result<()> {
        for &pos in &self.positions {
            check_footprint(pos, probe, object)?;
        }
        Ok(())
    }

    /// Same positions moved by `(dr, dc)`.
    pub fn shifted(&self, dr: usize, dc: usize) -> Self {
        Self {
            positions: self
                .positions
                .iter()
                .map(|&(r, c)| (r + dr, c + dc))
                .collect(),
        }
    }
}

/// Measured diffraction intensities and the scan that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffractionDataset {
    pub patterns: Vec<RealGrid>,
    pub positions: ScanPositions,
    pub wavelength: f64,
    pub detector_distance: f64,
    pub pixel_size: f64,
}

impl DiffractionDataset {
    pub fn validate(&self) -> Result<()> {
        if self.patterns.is_empty() {
            return Err(Error::config("dataset has no diffraction patterns"));
        }
        if self.patterns.len() != self.positions.len() {
            return Err(Error::config(format!(
                "{} patterns but {} scan positions",
                self.patterns.len(),
                self.positions.len()
            )));
        }
        let shape = self.patterns[0].shape();
        for (k, p) in self.patterns.iter().enumerate() {
            if p.shape() != shape {
                return Err(Error::Shape {
                    context: "diffraction patterns",
                    expected: shape,
                    actual: p.shape(),
                });
            }
            for (i, &v) in p.data().iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        context: format!("pattern {k}"),
                        row: i / shape.1,
                        col: i % shape.1,
                    });
                }
                if v < 0.0 {
                    return Err(Error::NegativeIntensity {
                        pattern: k,
                        row: i / shape.1,
                        col: i % shape.1,
                        value: v,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    /// Detector / probe shape `(h, w)`.
    pub fn pattern_shape(&self) -> (usize, usize) {
        self.patterns[0].shape()
    }
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// Cached plan for the centered unitary 2-D transform of one shape.
#[derive(Clone)]
pub struct Fft2 {
    rows: usize,
    cols: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
    scale: f64,
}

impl std::fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fft2")
            .field("rows", &self.rows)
            .field("cols", &self.cols)
            .finish()
    }
}

impl Fft2 {
    pub fn new(rows: usize, cols: usize) -> Self {
        PLANNER.with(|p| {
            let mut p = p.borrow_mut();
            Self {
                rows,
                cols,
                row_fwd: p.plan_fft_forward(cols),
                row_inv: p.plan_fft_inverse(cols),
                col_fwd: p.plan_fft_forward(rows),
                col_inv: p.plan_fft_inverse(rows),
                scale: 1.0 / ((rows * cols) as f64).sqrt(),
            }
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    fn transform(&self, data: &mut [Complex64], inverse: bool) {
        let (rows, cols) = (self.rows, self.cols);
        let (row_plan, col_plan) = if inverse {
            (&self.row_inv, &self.col_inv)
        } else {
            (&self.row_fwd, &self.col_fwd)
        };
        row_plan.process(data);
        let mut t = vec![Complex64::default(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = data[r * cols + c];
            }
        }
        col_plan.process(&mut t);
        for c in 0..cols {
            for r in 0..rows {
                data[r * cols + c] = t[c * rows + r] * self.scale;
            }
        }
    }

    /// Centered unitary forward transform. Input must match the plan shape.
    pub fn forward(&self, g: &ComplexGrid) -> ComplexGrid {
        assert_eq!(g.shape(), self.shape(), "fft plan shape mismatch");
        let mut buf = g.data.clone();
        self.transform(&mut buf, false);
        let (rows, cols) = self.shape();
        let (hr, hc) = (rows / 2, cols / 2);
        let mut out = ComplexGrid::zeros(rows, cols);
        for r in 0..rows {
            let rr = (r + hr) % rows;
            for c in 0..cols {
                out.data[rr * cols + (c + hc) % cols] = buf[r * cols + c];
            }
        }
        out.pitch = g.pitch;
        out
    }

    /// Inverse (and adjoint) of [`Fft2::forward`].
    pub fn inverse(&self, g: &ComplexGrid) -> ComplexGrid {
        assert_eq!(g.shape(), self.shape(), "fft plan shape mismatch");
        let (rows, cols) = self.shape();
        let (hr, hc) = (rows / 2, cols / 2);
        let mut buf = vec![Complex64::default(); rows * cols];
        for r in 0..rows {
            let rr = (r + hr) % rows;
            for c in 0..cols {
                buf[r * cols + c] = g.data[rr * cols + (c + hc) % cols];
            }
        }
        self.transform(&mut buf, true);
        let mut out = ComplexGrid::from_vec(rows, cols, buf).expect("shape preserved");
        out.pitch = g.pitch;
        out
    }
}

/// Centered unitary 2-D DFT.
pub fn fft2_unitary(g: &ComplexGrid) -> Result<ComplexGrid> {
    g.check_finite("fft2_unitary input")?;
    Ok(Fft2::new(g.rows, g.cols).forward(g))
}

/// Inverse of [`fft2_unitary`].
pub fn ifft2_unitary(g: &ComplexGrid) -> Result<ComplexGrid> {
    g.check_finite("ifft2_unitary input")?;
    Ok(Fft2::new(g.rows, g.cols).inverse(g))
}

fn check_footprint(pos: Offset, shape: (usize, usize), bounds: (usize, usize)) -> Result<()> {
    if pos.0 + shape.0 > bounds.0 || pos.1 + shape.1 > bounds.1 {
        return Err(Error::OutOfBounds { pos, shape, bounds });
    }
    Ok(())
}

/// Copies the `shape` window of `obj` whose top-left corner is `pos`.
pub fn extract_patch(obj: &ComplexGrid, pos: Offset, shape: (usize, usize)) -> Result<ComplexGrid> {
    check_footprint(pos, shape, obj.shape())?;
    let mut data = Vec::with_capacity(shape.0 * shape.1);
    for r in 0..shape.0 {
        let start = (pos.0 + r) * obj.cols + pos.1;
        data.extend_from_slice(&obj.data[start..start + shape.1]);
    }
    Ok(ComplexGrid {
        rows: shape.0,
        cols: shape.1,
        data,
        pitch: obj.pitch,
    })
}

/// Adds `patch` into `target` at `pos`; the adjoint of [`extract_patch`].
pub fn accumulate_patch(target: &mut ComplexGrid, pos: Offset, patch: &ComplexGrid) -> Result<()> {
    check_footprint(pos, patch.shape(), target.shape())?;
    let cols = target.cols;
    for r in 0..patch.rows {
        let dst = &mut target.data[(pos.0 + r) * cols + pos.1..][..patch.cols];
        for (d, s) in dst.iter_mut().zip(patch.row(r)) {
            *d += s;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn delta_transforms_to_flat_spectrum() {
        let mut g = ComplexGrid::zeros(2, 2);
        g[(0, 0)] = c(1.0, 0.0);
        let f = fft2_unitary(&g).unwrap();
        for z in f.data() {
            assert!((z.norm() - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_concentrates_at_center() {
        let v = c(1.5, -0.5);
        let g = ComplexGrid::from_fn(4, 6, |_, _| v);
        let f = fft2_unitary(&g).unwrap();
        let expected = v * (24f64).sqrt();
        for r in 0..4 {
            for cc in 0..6 {
                let z = f[(r, cc)];
                if (r, cc) == (2, 3) {
                    assert!((z - expected).norm() < 1e-12);
                } else {
                    assert!(z.norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn center_delta_inverts_to_constant() {
        let mut g = ComplexGrid::zeros(4, 4);
        g[(2, 2)] = c(2.0, 0.0);
        let f = ifft2_unitary(&g).unwrap();
        for z in f.data() {
            assert!((z - c(0.5, 0.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn odd_sizes_round_trip() {
        let g = ComplexGrid::from_fn(5, 7, |r, cc| c(r as f64 - 1.0, (cc * r) as f64 * 0.3));
        let back = ifft2_unitary(&fft2_unitary(&g).unwrap()).unwrap();
        for (a, b) in g.data().iter().zip(back.data()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn non_finite_input_names_index() {
        let mut g = ComplexGrid::zeros(3, 3);
        g[(1, 2)] = c(f64::NAN, 0.0);
        match fft2_unitary(&g) {
            Err(Error::NonFinite { row, col, .. }) => assert_eq!((row, col), (1, 2)),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    fn ramp() -> ComplexGrid {
        ComplexGrid::from_fn(4, 4, |r, cc| c((r * 4 + cc) as f64, 0.0))
    }

    #[test]
    fn extract_index_arithmetic() {
        let p = extract_patch(&ramp(), (1, 1), (2, 2)).unwrap();
        let re: Vec<f64> = p.data().iter().map(|z| z.re).collect();
        assert_eq!(re, vec![5.0, 6.0, 9.0, 10.0]);
        assert_eq!(extract_patch(&ramp(), (0, 0), (4, 4)).unwrap(), ramp());
        assert!(matches!(
            extract_patch(&ramp(), (3, 3), (2, 2)),
            Err(Error::OutOfBounds { .. })
        ));
    }

    #[test]
    fn accumulate_overlaps_sum() {
        let mut g = ComplexGrid::zeros(4, 4);
        let ones = ComplexGrid::from_fn(2, 2, |_, _| c(1.0, 0.0));
        accumulate_patch(&mut g, (0, 0), &ones).unwrap();
        accumulate_patch(&mut g, (1, 1), &ones).unwrap();
        assert_eq!(g[(1, 1)], c(2.0, 0.0));
        assert_eq!(g[(0, 0)], c(1.0, 0.0));
        assert_eq!(g[(3, 3)], c(0.0, 0.0));
        assert!(accumulate_patch(&mut g, (3, 0), &ones).is_err());
    }

    #[test]
    fn scatter_gather_consistency() {
        let mut g = ComplexGrid::zeros(6, 6);
        let patch = ComplexGrid::from_fn(2, 3, |r, cc| c(r as f64, cc as f64 + 1.0));
        let other = ComplexGrid::from_fn(2, 2, |_, _| c(7.0, 7.0));
        accumulate_patch(&mut g, (0, 0), &patch).unwrap();
        accumulate_patch(&mut g, (4, 4), &other).unwrap();
        assert_eq!(extract_patch(&g, (0, 0), (2, 3)).unwrap(), patch);
    }

    #[test]
    fn probe_stack_rejects_mixed_shapes() {
        let a = ComplexGrid::zeros(4, 4);
        let b = ComplexGrid::zeros(4, 5);
        assert!(ProbeStack::new(vec![a.clone(), b]).is_err());
        assert!(ProbeStack::new(vec![]).is_err());
        assert_eq!(ProbeStack::new(vec![a.clone(), a]).unwrap().mode_count(), 2);
    }

    #[test]
    fn dataset_validation() {
        let good = DiffractionDataset {
            patterns: vec![RealGrid::zeros(2, 2)],
            positions: ScanPositions::new(vec![(0, 0)]),
            wavelength: 1e-9,
            detector_distance: 1.0,
            pixel_size: 1e-8,
        };
        good.validate().unwrap();
        let mut neg = good.clone();
        neg.patterns[0][(1, 0)] = -1.0;
        assert!(matches!(neg.validate(), Err(Error::NegativeIntensity { row: 1, col: 0, .. })));
        let mut mismatch = good.clone();
        mismatch.positions.positions.push((1, 1));
        assert!(mismatch.validate().is_err());
    }
}
