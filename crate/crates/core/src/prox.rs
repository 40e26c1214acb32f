//! Per-pixel proximity operators for the four split terms.
//!
//! Each operator acts on a single pixel column and has an in-place form used
//! by the solver and an allocating form for direct use.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Order of the Schatten norm applied to each per-pixel Jacobian.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum SchattenOrder {
    /// Nuclear norm, sum of singular values.
    #[default]
    Nuclear,
    /// Frobenius norm, root sum of squared singular values.
    Frobenius,
}

impl SchattenOrder {
    pub fn from_p(p: u32) -> Result<Self> {
        match p {
            1 => Ok(Self::Nuclear),
            2 => Ok(Self::Frobenius),
            _ => Err(Error::InvalidParameter(format!("Schatten order must be 1 or 2, got {p}"))),
        }
    }

    pub fn p(self) -> u32 {
        match self {
            Self::Nuclear => 1,
            Self::Frobenius => 2,
        }
    }
}

/// Solves `min -ln(p^T xi) + (mu/2) ||xi - nu||^2` in place.
///
/// The minimizer is `nu + p / (mu t)` where `t = p^T xi` is the positive root
/// of `mu t^2 - mu (p^T nu) t - ||p||^2`. Returns `false` when `p` is zero.
pub fn prox_data_in_place(mut nu: ArrayViewMut1<'_, f64>, p: ArrayView1<'_, f64>, mu: f64) -> bool {
    let pp = p.dot(&p);
    if pp <= 0.0 {
        return false;
    }
    let pn = p.dot(&nu);
    let disc = (pn * pn + 4.0 * pp / mu).sqrt();
    // pick the cancellation-free form of the positive root
    let t = if pn >= 0.0 {
        0.5 * (pn + disc)
    } else {
        2.0 * pp / (mu * (disc - pn))
    };
    let scale = 1.0 / (mu * t);
    Zip::from(&mut nu).and(&p).for_each(|x, &pk| *x += pk * scale);
    true
}

/// Allocating form of [`prox_data_in_place`].
///
/// A zero likelihood vector is reported as degenerate at pixel 0.
pub fn prox_data(nu: ArrayView1<'_, f64>, p: ArrayView1<'_, f64>, mu: f64) -> Result<Array1<f64>> {
    if nu.len() != p.len() {
        return Err(Error::mismatch("prox_data", p.len(), nu.len()));
    }
    if !(mu > 0.0) {
        return Err(Error::InvalidParameter(format!("penalty must be positive, got {mu}")));
    }
    let mut out = nu.to_owned();
    if prox_data_in_place(out.view_mut(), p, mu) {
        Ok(out)
    } else {
        Err(Error::DegenerateLikelihood { pixel: 0 })
    }
}

/// Singular pairs of the `m x 2` matrix `[h v]` from the eigenvectors of
/// its `2 x 2` Gram matrix. Returns `[(sigma, (w0, w1)); 2]` where `(w0, w1)`
/// is a right singular vector.
fn right_singular_pairs(h: &ArrayView1<'_, f64>, v: &ArrayView1<'_, f64>) -> [(f64, (f64, f64)); 2] {
    let a = h.dot(h);
    let b = h.dot(v);
    let c = v.dot(v);
    let (cs, sn) = if b == 0.0 {
        (1.0, 0.0)
    } else {
        let theta = 0.5 * (2.0 * b).atan2(a - c);
        (theta.cos(), theta.sin())
    };
    // sigma_i = ||V w_i||, which is more accurate than sqrt of the eigenvalue
    let sigma = |w0: f64, w1: f64| {
        h.iter()
            .zip(v.iter())
            .map(|(x, y)| {
                let t = w0 * x + w1 * y;
                t * t
            })
            .sum::<f64>()
            .sqrt()
    };
    [
        (sigma(cs, sn), (cs, sn)),
        (sigma(-sn, cs), (-sn, cs)),
    ]
}

/// Singular values of the `m x 2` matrix with columns `h`, `v`, largest first.
pub fn singular_values(h: ArrayView1<'_, f64>, v: ArrayView1<'_, f64>) -> [f64; 2] {
    let [(s1, _), (s2, _)] = right_singular_pairs(&h, &v);
    if s1 >= s2 {
        [s1, s2]
    } else {
        [s2, s1]
    }
}

/// Schatten norm of the `m x 2` matrix with columns `h`, `v`.
pub fn schatten_norm(h: ArrayView1<'_, f64>, v: ArrayView1<'_, f64>, order: SchattenOrder) -> f64 {
    match order {
        SchattenOrder::Nuclear => {
            let [s1, s2] = singular_values(h, v);
            s1 + s2
        }
        SchattenOrder::Frobenius => (h.dot(&h) + v.dot(&v)).sqrt(),
    }
}

const SIGMA_FLOOR: f64 = 1e-12;

/// Solves `min ||X||_{S_p} + 1/(2 tau) ||X - V||_F^2` in place, where the
/// columns of `V` are `h` and `v`. A zero threshold is the identity.
pub fn prox_schatten_in_place(
    mut h: ArrayViewMut1<'_, f64>,
    mut v: ArrayViewMut1<'_, f64>,
    tau: f64,
    order: SchattenOrder,
) {
    debug_assert!(tau >= 0.0, "negative Schatten threshold {tau}");
    if tau <= 0.0 {
        return;
    }
    match order {
        SchattenOrder::Frobenius => {
            let norm = (h.dot(&h) + v.dot(&v)).sqrt();
            let scale = if norm > tau { 1.0 - tau / norm } else { 0.0 };
            h *= scale;
            v *= scale;
        }
        SchattenOrder::Nuclear => {
            let pairs = right_singular_pairs(&h.view(), &v.view());
            let sigma_max = pairs[0].0.max(pairs[1].0);
            if sigma_max == 0.0 {
                return;
            }
            let shrink = |sigma: f64| {
                if sigma <= SIGMA_FLOOR * sigma_max || sigma <= tau {
                    0.0
                } else {
                    (sigma - tau) / sigma
                }
            };
            // X = V W diag(s) W^T, i.e. X w_i = s_i V w_i
            let [(s1, (a0, a1)), (s2, (b0, b1))] = pairs;
            let (f1, f2) = (shrink(s1), shrink(s2));
            // M = W diag(s) W^T, applied on the right of [h v]
            let m00 = f1 * a0 * a0 + f2 * b0 * b0;
            let m01 = f1 * a0 * a1 + f2 * b0 * b1;
            let m11 = f1 * a1 * a1 + f2 * b1 * b1;
            Zip::from(&mut h).and(&mut v).for_each(|x, y| {
                let (hx, vy) = (*x, *y);
                *x = hx * m00 + vy * m01;
                *y = hx * m01 + vy * m11;
            });
        }
    }
}

/// Allocating form of [`prox_schatten_in_place`] on an `m x 2` matrix.
pub fn prox_schatten(v: ArrayView2<'_, f64>, tau: f64, order: SchattenOrder) -> Result<Array2<f64>> {
    if v.ncols() != 2 {
        return Err(Error::mismatch("prox_schatten", "2 columns", v.ncols()));
    }
    if !(tau >= 0.0) {
        return Err(Error::InvalidParameter(format!("threshold must be nonnegative, got {tau}")));
    }
    let mut h = v.column(0).to_owned();
    let mut w = v.column(1).to_owned();
    prox_schatten_in_place(h.view_mut(), w.view_mut(), tau, order);
    let mut out = Array2::zeros(v.raw_dim());
    out.column_mut(0).assign(&h);
    out.column_mut(1).assign(&w);
    Ok(out)
}

/// Projection onto the nonnegative orthant.
pub fn prox_nonneg_in_place(mut nu: ArrayViewMut1<'_, f64>) {
    nu.mapv_inplace(|x| x.max(0.0));
}

pub fn prox_nonneg(nu: ArrayView1<'_, f64>) -> Array1<f64> {
    nu.mapv(|x| x.max(0.0))
}

/// Projection onto the hyperplane `1^T xi = 1`.
pub fn prox_sum_one_in_place(mut nu: ArrayViewMut1<'_, f64>) {
    let excess = (nu.iter().sum::<f64>() - 1.0) / nu.len() as f64;
    nu -= excess;
}

pub fn prox_sum_one(nu: ArrayView1<'_, f64>) -> Array1<f64> {
    let mut out = nu.to_owned();
    prox_sum_one_in_place(out.view_mut());
    out
}

/// Euclidean projection onto the probability simplex by the sort-and-threshold
/// rule.
pub fn project_simplex_in_place(mut nu: ArrayViewMut1<'_, f64>) {
    let mut sorted: Vec<f64> = nu.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (j, &x) in sorted.iter().enumerate() {
        cumsum += x;
        let candidate = (cumsum - 1.0) / (j + 1) as f64;
        if x - candidate > 0.0 {
            theta = candidate;
        }
    }
    nu.mapv_inplace(|x| (x - theta).max(0.0));
}
