//! Images, fields and patch geometry shared by the operators and the solver.
//!
//! Every matrix-valued object stores one row per channel (band or class) and
//! one column per pixel. Pixels are indexed in row-major order and all
//! spatial operators wrap around at the image border.

use ndarray::{Array2, ArrayView1, Axis};

use crate::error::{Error, Result};

/// Rectangular pixel grid with circular boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ImageGrid {
    height: usize,
    width: usize,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidParameter(format!(
                "grid must be at least 1x1, got {height}x{width}"
            )));
        }
        Ok(Self { height, width })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Pixel count `H * W`.
    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    #[inline]
    pub fn coords(&self, pixel: usize) -> (usize, usize) {
        (pixel / self.width, pixel % self.width)
    }

    /// Index of the pixel at `(row + drow, col + dcol)` with wrap-around.
    #[inline]
    pub fn wrapped(&self, row: usize, col: usize, drow: isize, dcol: isize) -> usize {
        let r = (row as isize + drow).rem_euclid(self.height as isize) as usize;
        let c = (col as isize + dcol).rem_euclid(self.width as isize) as usize;
        self.index(r, c)
    }

    pub(crate) fn check_columns(&self, context: &'static str, values: &Array2<f64>) -> Result<()> {
        if values.ncols() != self.len() {
            return Err(Error::mismatch(
                context,
                format!("{} pixel columns", self.len()),
                format!("{} columns", values.ncols()),
            ));
        }
        Ok(())
    }
}

/// A `d x n` feature image; column `i` is the spectrum of pixel `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperCube {
    grid: ImageGrid,
    values: Array2<f64>,
}

impl HyperCube {
    pub fn new(grid: ImageGrid, values: Array2<f64>) -> Result<Self> {
        grid.check_columns("hyperspectral cube", &values)?;
        if values.nrows() == 0 {
            return Err(Error::InvalidParameter("cube needs at least one band".into()));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "non-finite cube value at band {}, pixel {}",
                pos / values.ncols(),
                pos % values.ncols()
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> ImageGrid {
        self.grid
    }

    pub fn bands(&self) -> usize {
        self.values.nrows()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn pixel(&self, i: usize) -> ArrayView1<'_, f64> {
        self.values.column(i)
    }
}

/// Per-pixel class likelihoods `p_i`, stored `K x n`.
///
/// Columns need not sum to one, but each must contain at least one strictly
/// positive entry.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    grid: ImageGrid,
    values: Array2<f64>,
}

impl ProbabilityMap {
    pub fn new(grid: ImageGrid, values: Array2<f64>) -> Result<Self> {
        grid.check_columns("probability map", &values)?;
        if values.nrows() == 0 {
            return Err(Error::InvalidParameter("probability map needs at least one class".into()));
        }
        for (i, col) in values.axis_iter(Axis(1)).enumerate() {
            if col.iter().any(|&v| !v.is_finite() || v < 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "pixel {i} has a negative or non-finite likelihood"
                )));
            }
            if !col.iter().any(|&v| v > 0.0) {
                return Err(Error::DegenerateLikelihood { pixel: i });
            }
        }
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> ImageGrid {
        self.grid
    }

    pub fn classes(&self) -> usize {
        self.values.nrows()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    /// Pixelwise maximum-likelihood labels, ties to the smallest class.
    pub fn argmax_labels(&self) -> LabelMap {
        LabelMap {
            grid: self.grid,
            labels: argmax_columns(&self.values),
        }
    }
}

/// The continuous `K x n` field the solver optimizes.
///
/// Only the final, projected field is guaranteed to be nonnegative with
/// columns summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenField {
    grid: ImageGrid,
    values: Array2<f64>,
}

impl HiddenField {
    pub fn new(grid: ImageGrid, values: Array2<f64>) -> Result<Self> {
        grid.check_columns("hidden field", &values)?;
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> ImageGrid {
        self.grid
    }

    pub fn classes(&self) -> usize {
        self.values.nrows()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    /// Largest violation of `z >= 0` and `1^T z_i = 1` over all pixels.
    pub fn feasibility_gap(&self) -> f64 {
        self.values
            .axis_iter(Axis(1))
            .map(|col| {
                let neg = col.iter().fold(0.0_f64, |m, &v| m.max(-v));
                neg.max((col.sum() - 1.0).abs())
            })
            .fold(0.0, f64::max)
    }
}

/// Integer labels per pixel: `1..=K` for classes, `0` for unlabeled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    grid: ImageGrid,
    labels: Vec<u32>,
}

impl LabelMap {
    pub fn new(grid: ImageGrid, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != grid.len() {
            return Err(Error::mismatch("label map", grid.len(), labels.len()));
        }
        Ok(Self { grid, labels })
    }

    pub fn unlabeled(grid: ImageGrid) -> Self {
        Self {
            grid,
            labels: vec![0; grid.len()],
        }
    }

    pub fn grid(&self) -> ImageGrid {
        self.grid
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.labels[self.grid.index(row, col)]
    }

    pub fn set(&mut self, row: usize, col: usize, label: u32) {
        let i = self.grid.index(row, col);
        self.labels[i] = label;
    }

    pub fn max_label(&self) -> u32 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Number of unequal 4-neighbor pairs, counted without wrap-around.
    pub fn boundary_length(&self) -> usize {
        let (h, w) = (self.grid.height(), self.grid.width());
        let mut count = 0;
        for r in 0..h {
            for c in 0..w {
                let here = self.get(r, c);
                if c + 1 < w && self.get(r, c + 1) != here {
                    count += 1;
                }
                if r + 1 < h && self.get(r + 1, c) != here {
                    count += 1;
                }
            }
        }
        count
    }
}

pub(crate) fn argmax_columns(values: &Array2<f64>) -> Vec<u32> {
    values
        .axis_iter(Axis(1))
        .map(|col| {
            let mut best = 0;
            for (k, &v) in col.iter().enumerate() {
                if v > col[best] {
                    best = k;
                }
            }
            best as u32 + 1
        })
        .collect()
}

/// Bandwidth rule: distance from the patch border to its center, 1 for 1x1.
pub fn default_gamma(half_width: usize) -> f64 {
    half_width.max(1) as f64
}

/// Geometry of the `(2M+1) x (2M+1)` patch used by the patch-based Jacobian.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchConfig {
    half_width: usize,
    bandwidth: f64,
    shifts: Vec<(isize, isize)>,
    weights: Vec<f64>,
}

impl PatchConfig {
    /// Shifts enumerate the patch row-major; weights are an unnormalized
    /// Gaussian, so the center shift always has weight 1.
    pub fn new(half_width: usize, bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "patch bandwidth must be positive, got {bandwidth}"
            )));
        }
        let m = half_width as isize;
        let two_var = 2.0 * bandwidth * bandwidth;
        let (shifts, weights) = (-m..=m)
            .flat_map(|dr| (-m..=m).map(move |dc| (dr, dc)))
            .map(|(dr, dc)| ((dr, dc), (-((dr * dr + dc * dc) as f64) / two_var).exp()))
            .unzip();
        Ok(Self {
            half_width,
            bandwidth,
            shifts,
            weights,
        })
    }

    /// Patch with the default bandwidth for its size.
    pub fn with_default_gamma(half_width: usize) -> Self {
        Self::new(half_width, default_gamma(half_width)).expect("default bandwidth is positive")
    }

    pub fn half_width(&self) -> usize {
        self.half_width
    }

    /// Full patch width `2M + 1`.
    pub fn patch_width(&self) -> usize {
        2 * self.half_width + 1
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    /// Number of shifts `L`.
    pub fn len(&self) -> usize {
        self.shifts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shifts.is_empty()
    }

    pub fn shifts(&self) -> &[(isize, isize)] {
        &self.shifts
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `sum_j w_j^2`, the gain of `J^T J` over a plain gradient.
    pub fn weight_energy(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum()
    }
}

/// Shorthand for [`PatchConfig::new`].
pub fn build_patch_config(half_width: usize, bandwidth: f64) -> Result<PatchConfig> {
    PatchConfig::new(half_width, bandwidth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn gamma_rule() {
        assert_eq!(default_gamma(2), 2.0);
        assert_eq!(default_gamma(0), 1.0);
        assert_eq!(default_gamma(5), 5.0);
    }

    #[test]
    fn degenerate_patch() {
        let cfg = build_patch_config(0, 1.0).unwrap();
        assert_eq!(cfg.len(), 1);
        assert_eq!(cfg.shifts(), &[(0, 0)]);
        assert_eq!(cfg.weights(), &[1.0]);
    }

    #[test]
    fn three_by_three_weights() {
        let cfg = build_patch_config(1, 1.0).unwrap();
        assert_eq!(cfg.len(), 9);
        let w = |s: (isize, isize)| cfg.weights()[cfg.shifts().iter().position(|&x| x == s).unwrap()];
        assert!((w((1, 1)) - (-1.0f64).exp()).abs() < 1e-15);
        assert!((w((1, 1)) - 0.367879).abs() < 1e-6);
        assert!((w((0, 1)) - 0.606531).abs() < 1e-6);
        assert_eq!(w((0, 0)), 1.0);
        // row-major enumeration
        assert_eq!(cfg.shifts()[0], (-1, -1));
        assert_eq!(cfg.shifts()[1], (-1, 0));
        assert_eq!(cfg.shifts()[8], (1, 1));
    }

    #[test]
    fn rejects_bad_bandwidth() {
        assert!(matches!(build_patch_config(1, 0.0), Err(Error::InvalidParameter(_))));
        assert!(matches!(build_patch_config(1, -2.0), Err(Error::InvalidParameter(_))));
        assert!(build_patch_config(1, f64::NAN).is_err());
    }

    #[test]
    fn weights_symmetric_and_increasing_in_gamma() {
        for m in 1..4 {
            let mut prev = 0.0;
            for gamma in [0.5, 1.0, 2.0, 4.0] {
                let cfg = build_patch_config(m, gamma).unwrap();
                for (s, w) in cfg.shifts().iter().zip(cfg.weights()) {
                    let j = cfg.shifts().iter().position(|&x| x == (-s.0, -s.1)).unwrap();
                    assert_eq!(*w, cfg.weights()[j]);
                }
                let total: f64 = cfg.weights().iter().sum();
                assert!(total > prev);
                prev = total;
            }
        }
    }

    #[test]
    fn grid_validation_and_wrap() {
        assert!(ImageGrid::new(0, 3).is_err());
        let g = ImageGrid::new(2, 3).unwrap();
        assert_eq!(g.len(), 6);
        assert_eq!(g.wrapped(0, 0, -1, -1), g.index(1, 2));
        assert_eq!(g.coords(4), (1, 1));
    }

    #[test]
    fn probability_map_invariants() {
        let g = ImageGrid::new(1, 2).unwrap();
        assert!(ProbabilityMap::new(g, array![[0.0, 1.0], [0.0, 0.0]]).is_err());
        assert!(ProbabilityMap::new(g, array![[-0.1, 1.0], [1.0, 0.0]]).is_err());
        let p = ProbabilityMap::new(g, array![[0.2, 3.0], [0.7, 3.0]]).unwrap();
        assert_eq!(p.argmax_labels().labels(), &[2, 1]);
    }

    #[test]
    fn boundary_length_counts_unequal_pairs() {
        let g = ImageGrid::new(2, 2).unwrap();
        let m = LabelMap::new(g, vec![1, 2, 1, 2]).unwrap();
        assert_eq!(m.boundary_length(), 2);
        assert_eq!(LabelMap::unlabeled(g).boundary_length(), 0);
    }
}
