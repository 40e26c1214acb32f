//! Linear operators on `K x n` fields: circular forward differences, weighted
//! shifts, the patch-based Jacobian `J` with its adjoint, and the
//! frequency-domain solve of `(3I + J^T J) z = rhs`.
//!
//! Every operator acts identically and independently on each channel row, so
//! channels are processed in parallel with results independent of the
//! thread count.

use std::fmt;
use std::sync::Arc;

use ndarray::{s, Array2, ArrayView1, Axis, Zip};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::field::{ImageGrid, PatchConfig};

/// Writes `weight * src[(r + drow) mod H, (c + dcol) mod W]` into `dst`,
/// adding to it when `accumulate` is set.
fn shift_row(
    src: &[f64],
    dst: &mut [f64],
    grid: ImageGrid,
    shift: (isize, isize),
    weight: f64,
    accumulate: bool,
) {
    let (h, w) = (grid.height() as isize, grid.width() as isize);
    for r in 0..h {
        let src_r = (r + shift.0).rem_euclid(h) as usize;
        let src_row = &src[src_r * w as usize..(src_r + 1) * w as usize];
        let dst_row = &mut dst[r as usize * w as usize..(r as usize + 1) * w as usize];
        // split the row at the wrap point so both halves are straight copies
        let off = shift.1.rem_euclid(w) as usize;
        let w = w as usize;
        let (head, tail) = dst_row.split_at_mut(w - off);
        if accumulate {
            head.iter_mut().zip(&src_row[off..]).for_each(|(d, s)| *d += weight * s);
            tail.iter_mut().zip(&src_row[..off]).for_each(|(d, s)| *d += weight * s);
        } else {
            head.iter_mut().zip(&src_row[off..]).for_each(|(d, s)| *d = weight * s);
            tail.iter_mut().zip(&src_row[..off]).for_each(|(d, s)| *d = weight * s);
        }
    }
}

fn row_slice<'a>(row: &'a ArrayView1<'_, f64>) -> &'a [f64] {
    row.as_slice().expect("field rows are contiguous")
}

fn map_rows(
    field: &Array2<f64>,
    grid: ImageGrid,
    context: &'static str,
    f: impl Fn(&[f64], &mut [f64]) + Sync,
) -> Result<Array2<f64>> {
    grid.check_columns(context, field)?;
    let field = field.as_standard_layout();
    let mut out = Array2::zeros(field.raw_dim());
    Zip::from(out.rows_mut())
        .and(field.rows())
        .par_for_each(|mut dst, src| f(row_slice(&src), dst.as_slice_mut().unwrap()));
    Ok(out)
}

/// Circular forward difference along rows: `z(r, c+1) - z(r, c)`.
pub fn diff_h(field: &Array2<f64>, grid: ImageGrid) -> Result<Array2<f64>> {
    map_rows(field, grid, "diff_h", |src, dst| {
        shift_row(src, dst, grid, (0, 1), 1.0, false);
        dst.iter_mut().zip(src).for_each(|(d, s)| *d -= s);
    })
}

/// Circular forward difference along columns: `z(r+1, c) - z(r, c)`.
pub fn diff_v(field: &Array2<f64>, grid: ImageGrid) -> Result<Array2<f64>> {
    map_rows(field, grid, "diff_v", |src, dst| {
        shift_row(src, dst, grid, (1, 0), 1.0, false);
        dst.iter_mut().zip(src).for_each(|(d, s)| *d -= s);
    })
}

/// Adjoint of [`diff_h`]: `y(r, c-1) - y(r, c)`.
pub fn diff_h_adjoint(field: &Array2<f64>, grid: ImageGrid) -> Result<Array2<f64>> {
    map_rows(field, grid, "diff_h_adjoint", |src, dst| {
        shift_row(src, dst, grid, (0, -1), 1.0, false);
        dst.iter_mut().zip(src).for_each(|(d, s)| *d -= s);
    })
}

/// Adjoint of [`diff_v`]: `y(r-1, c) - y(r, c)`.
pub fn diff_v_adjoint(field: &Array2<f64>, grid: ImageGrid) -> Result<Array2<f64>> {
    map_rows(field, grid, "diff_v_adjoint", |src, dst| {
        shift_row(src, dst, grid, (-1, 0), 1.0, false);
        dst.iter_mut().zip(src).for_each(|(d, s)| *d -= s);
    })
}

/// Gathers from `(r + drow, c + dcol)` with wrap-around and scales by `weight`.
/// The adjoint is the same call with the shift negated.
pub fn weighted_shift(
    field: &Array2<f64>,
    grid: ImageGrid,
    shift: (isize, isize),
    weight: f64,
) -> Result<Array2<f64>> {
    map_rows(field, grid, "weighted_shift", |src, dst| {
        shift_row(src, dst, grid, shift, weight, false)
    })
}

/// `J z` stored as a `(2 L K) x n` matrix.
///
/// Column `i` is the column-major flattening of the `(K L) x 2` per-pixel
/// Jacobian: rows `j K .. (j+1) K` hold `(P_j D_h z)_i` and rows
/// `L K + j K .. L K + (j+1) K` hold `(P_j D_v z)_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedJacobian {
    grid: ImageGrid,
    classes: usize,
    patch_len: usize,
    values: Array2<f64>,
}

impl StackedJacobian {
    pub fn new(grid: ImageGrid, classes: usize, patch_len: usize, values: Array2<f64>) -> Result<Self> {
        grid.check_columns("stacked jacobian", &values)?;
        if values.nrows() != 2 * classes * patch_len {
            return Err(Error::mismatch(
                "stacked jacobian",
                format!("{} rows", 2 * classes * patch_len),
                format!("{} rows", values.nrows()),
            ));
        }
        Ok(Self {
            grid,
            classes,
            patch_len,
            values,
        })
    }

    pub fn zeros(grid: ImageGrid, classes: usize, patch_len: usize) -> Self {
        Self {
            grid,
            classes,
            patch_len,
            values: Array2::zeros((2 * classes * patch_len, grid.len())),
        }
    }

    pub fn grid(&self) -> ImageGrid {
        self.grid
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn patch_len(&self) -> usize {
        self.patch_len
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Array2<f64> {
        &mut self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    /// The `(K L) x 2` Jacobian of one pixel.
    pub fn pixel_matrix(&self, pixel: usize) -> Array2<f64> {
        let col = self.values.column(pixel);
        let m = self.classes * self.patch_len;
        let mut out = Array2::zeros((m, 2));
        out.column_mut(0).assign(&col.slice(s![..m]));
        out.column_mut(1).assign(&col.slice(s![m..]));
        out
    }
}

/// Applies the patch-based Jacobian to a `K x n` field.
pub fn apply_jacobian(z: &Array2<f64>, grid: ImageGrid, cfg: &PatchConfig) -> Result<StackedJacobian> {
    let dh = diff_h(z, grid)?;
    let dv = diff_v(z, grid)?;
    let k = z.nrows();
    let l = cfg.len();
    let mut out = Array2::zeros((2 * l * k, grid.len()));
    Zip::indexed(out.rows_mut()).par_for_each(|q, mut dst| {
        let (block, class) = (q / k, q % k);
        let (src, j) = if block < l { (&dh, block) } else { (&dv, block - l) };
        shift_row(
            src.row(class).as_slice().unwrap(),
            dst.as_slice_mut().unwrap(),
            grid,
            cfg.shifts()[j],
            cfg.weights()[j],
            false,
        );
    });
    StackedJacobian::new(grid, k, l, out)
}

/// Applies `J^T`: `sum_j D_h^T P_j^T Y_hj + D_v^T P_j^T Y_vj`.
pub fn apply_jacobian_adjoint(y: &StackedJacobian, cfg: &PatchConfig) -> Result<Array2<f64>> {
    if y.patch_len() != cfg.len() {
        return Err(Error::mismatch("jacobian adjoint", format!("L = {}", cfg.len()), format!("L = {}", y.patch_len())));
    }
    let grid = y.grid();
    let (k, l) = (y.classes(), y.patch_len());
    let values = y.values().as_standard_layout();
    // rows 0..k accumulate the horizontal blocks, rows k..2k the vertical ones
    let mut acc = Array2::zeros((2 * k, grid.len()));
    Zip::indexed(acc.rows_mut()).par_for_each(|q, mut dst| {
        let (part, class) = (q / k, q % k);
        let dst = dst.as_slice_mut().unwrap();
        for j in 0..l {
            let (dr, dc) = cfg.shifts()[j];
            let src = values.row(part * l * k + j * k + class);
            shift_row(row_slice(&src), dst, grid, (-dr, -dc), cfg.weights()[j], true);
        }
    });
    let h_part = acc.slice(s![..k, ..]).to_owned();
    let v_part = acc.slice(s![k.., ..]).to_owned();
    Ok(diff_h_adjoint(&h_part, grid)? + diff_v_adjoint(&v_part, grid)?)
}

/// `(3I + J^T J) z` evaluated directly in the pixel domain.
pub fn apply_normal_operator(z: &Array2<f64>, grid: ImageGrid, cfg: &PatchConfig) -> Result<Array2<f64>> {
    let jz = apply_jacobian(z, grid, cfg)?;
    Ok(apply_jacobian_adjoint(&jz, cfg)? + &(z * 3.0))
}

/// Eigenvalues of `3I + J^T J` on the 2-D DFT basis.
///
/// Shifts are orthogonal, so `P_j^T P_j = w_j^2 I` and `J^T J` reduces to
/// `(sum_j w_j^2) (D_h^T D_h + D_v^T D_v)`, a circulant operator.
#[derive(Clone)]
pub struct FourierSymbol {
    grid: ImageGrid,
    denom: Vec<f64>,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for FourierSymbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FourierSymbol")
            .field("grid", &self.grid)
            .field("denom", &self.denom)
            .finish_non_exhaustive()
    }
}

impl FourierSymbol {
    pub fn new(grid: ImageGrid, cfg: &PatchConfig) -> Self {
        let (h, w) = (grid.height(), grid.width());
        let energy = cfg.weight_energy();
        let gain = |freq: usize, len: usize| {
            2.0 - 2.0 * (2.0 * std::f64::consts::PI * freq as f64 / len as f64).cos()
        };
        let mut denom = Vec::with_capacity(grid.len());
        for r in 0..h {
            for c in 0..w {
                denom.push(3.0 + energy * (gain(c, w) + gain(r, h)));
            }
        }
        // cos(0) = 1 exactly, but keep the DC term free of rounding anyway
        denom[0] = 3.0;
        let mut planner = FftPlanner::new();
        Self {
            grid,
            denom,
            row_fwd: planner.plan_fft_forward(w),
            row_inv: planner.plan_fft_inverse(w),
            col_fwd: planner.plan_fft_forward(h),
            col_inv: planner.plan_fft_inverse(h),
        }
    }

    pub fn grid(&self) -> ImageGrid {
        self.grid
    }

    /// Row-major per-frequency values `3 + W2 (|d_h|^2 + |d_v|^2)`.
    pub fn denom(&self) -> &[f64] {
        &self.denom
    }

    fn solve_channel(&self, rhs: &[f64], out: &mut [f64]) {
        let (h, w) = (self.grid.height(), self.grid.width());
        let mut buf: Vec<Complex<f64>> = rhs.iter().map(|&v| Complex::new(v, 0.0)).collect();
        self.row_fwd.process(&mut buf);
        let mut cols = transpose(&buf, h, w);
        self.col_fwd.process(&mut cols);
        for c in 0..w {
            for r in 0..h {
                cols[c * h + r] /= self.denom[r * w + c];
            }
        }
        self.col_inv.process(&mut cols);
        let mut rows = transpose(&cols, w, h);
        self.row_inv.process(&mut rows);
        let scale = 1.0 / self.grid.len() as f64;
        out.iter_mut().zip(&rows).for_each(|(o, v)| *o = v.re * scale);
    }
}

fn transpose(buf: &[Complex<f64>], rows: usize, cols: usize) -> Vec<Complex<f64>> {
    let mut out = vec![Complex::new(0.0, 0.0); buf.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = buf[r * cols + c];
        }
    }
    out
}

/// Shorthand for [`FourierSymbol::new`].
pub fn build_fourier_symbol(grid: ImageGrid, cfg: &PatchConfig) -> FourierSymbol {
    FourierSymbol::new(grid, cfg)
}

/// Solves `(3I + J^T J) z = rhs` channel by channel in the frequency domain.
pub fn solve_quadratic(rhs: &Array2<f64>, symbol: &FourierSymbol) -> Result<Array2<f64>> {
    symbol.grid.check_columns("solve_quadratic", rhs)?;
    let rhs = rhs.as_standard_layout();
    let mut out = Array2::zeros(rhs.raw_dim());
    Zip::from(out.axis_iter_mut(Axis(0)))
        .and(rhs.axis_iter(Axis(0)))
        .par_for_each(|mut dst, src| symbol.solve_channel(row_slice(&src), dst.as_slice_mut().unwrap()));
    Ok(out)
}
