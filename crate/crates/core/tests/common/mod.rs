//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, Matrix2};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use segsalsa::hsio::overall_accuracy;
use segsalsa::synth::{generate, sample_training, SynthConfig};
use segsalsa::{predict_probs, train_mlr, HyperCube, ImageGrid, LabelMap, PatchConfig, ProbabilityMap, TrainOptions, TrainingSet};

/// The frozen 32x32 three-class scene used by the regularization checks.
pub const SCENE_SEED: u64 = 4;
pub const SCENE_NOISE: f64 = 0.9;
pub const SCENE_CORRELATION: f64 = 2.0;
pub const SCENE_SITES: usize = 5;
pub const SCENE_TRAIN_PER_CLASS: usize = 15;

pub struct Scene {
    pub cube: HyperCube,
    pub truth: LabelMap,
    pub train: TrainingSet,
    pub probs: ProbabilityMap,
}

impl Scene {
    pub fn accuracy(&self, labels: &LabelMap) -> f64 {
        overall_accuracy(labels, &self.truth, &self.train.pixels()).unwrap()
    }
}

pub fn scene_config() -> SynthConfig {
    SynthConfig {
        height: 32,
        width: 32,
        classes: 3,
        bands: 4,
        sites: SCENE_SITES,
        noise: SCENE_NOISE,
        correlation: SCENE_CORRELATION,
        seed: SCENE_SEED,
    }
}

pub fn scene() -> Scene {
    let (cube, truth) = generate(&scene_config()).unwrap();
    let train = sample_training(&truth, 3, SCENE_TRAIN_PER_CLASS, SCENE_SEED).unwrap();
    let model = train_mlr(&cube, &train, &TrainOptions::default()).unwrap();
    let probs = predict_probs(&model, &cube).unwrap();
    Scene { cube, truth, train, probs }
}

pub fn random_probs(rng: &mut ChaCha8Rng, grid: ImageGrid, classes: usize) -> ProbabilityMap {
    let values = Array2::from_shape_fn((classes, grid.len()), |_| rng.random_range(0.05..1.0));
    ProbabilityMap::new(grid, values).unwrap()
}

pub fn random_feasible(rng: &mut ChaCha8Rng, classes: usize, n: usize) -> Array2<f64> {
    let mut z = Array2::from_shape_fn((classes, n), |_| rng.random_range(0.0..1.0));
    for mut col in z.columns_mut() {
        let s: f64 = col.iter().sum();
        col /= s;
    }
    z
}

fn wrap(i: isize, n: usize) -> usize {
    i.rem_euclid(n as isize) as usize
}

/// Per-pixel `(K L) x 2` Jacobian blocks built with explicit loops.
pub fn brute_jacobian(z: &Array2<f64>, h: usize, w: usize, patch: &PatchConfig) -> Vec<DMatrix<f64>> {
    let k = z.nrows();
    let at = |c: usize, r: isize, col: isize| z[[c, wrap(r, h) * w + wrap(col, w)]];
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h as isize {
        for c in 0..w as isize {
            let mut m = DMatrix::zeros(k * patch.len(), 2);
            for (j, (&(dr, dc), &wt)) in patch.shifts().iter().zip(patch.weights()).enumerate() {
                let (rr, cc) = (r + dr, c + dc);
                for class in 0..k {
                    m[(j * k + class, 0)] = wt * (at(class, rr, cc + 1) - at(class, rr, cc));
                    m[(j * k + class, 1)] = wt * (at(class, rr + 1, cc) - at(class, rr, cc));
                }
            }
            out.push(m);
        }
    }
    out
}

/// Transpose of [`brute_jacobian`], scattering the blocks back onto the field.
pub fn brute_jacobian_adjoint(blocks: &[DMatrix<f64>], k: usize, h: usize, w: usize, patch: &PatchConfig) -> Array2<f64> {
    let mut z = Array2::zeros((k, h * w));
    let idx = |r: isize, c: isize| wrap(r, h) * w + wrap(c, w);
    for r in 0..h as isize {
        for c in 0..w as isize {
            let m = &blocks[idx(r, c)];
            for (j, (&(dr, dc), &wt)) in patch.shifts().iter().zip(patch.weights()).enumerate() {
                let (rr, cc) = (r + dr, c + dc);
                for class in 0..k {
                    let gh = wt * m[(j * k + class, 0)];
                    let gv = wt * m[(j * k + class, 1)];
                    z[[class, idx(rr, cc + 1)]] += gh;
                    z[[class, idx(rr, cc)]] -= gh + gv;
                    z[[class, idx(rr + 1, cc)]] += gv;
                }
            }
        }
    }
    z
}

pub fn nuclear_norm(m: &DMatrix<f64>) -> f64 {
    m.clone().svd(false, false).singular_values.iter().sum()
}

/// Objective evaluated with the brute-force Jacobian and an LAPACK-free SVD.
pub fn oracle_objective(z: &Array2<f64>, probs: &ProbabilityMap, patch: &PatchConfig, lambda: f64) -> f64 {
    let grid = probs.grid();
    let p = probs.values();
    let data: f64 = (0..grid.len())
        .map(|i| -(0..z.nrows()).map(|k| p[[k, i]] * z[[k, i]]).sum::<f64>().ln())
        .sum();
    let prior: f64 = brute_jacobian(z, grid.height(), grid.width(), patch).iter().map(nuclear_norm).sum();
    data + lambda * prior
}

/// Simplex projection by bisection on the threshold.
pub fn simplex_bisect(v: &[f64]) -> Vec<f64> {
    let mass = |t: f64| v.iter().map(|x| (x - t).max(0.0)).sum::<f64>();
    let mut lo = v.iter().cloned().fold(f64::INFINITY, f64::min) - 1.0;
    let mut hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mass(mid) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let t = 0.5 * (lo + hi);
    v.iter().map(|x| (x - t).max(0.0)).collect()
}

fn project_columns(z: &mut Array2<f64>) {
    for mut col in z.columns_mut() {
        let p = simplex_bisect(&col.to_vec());
        for (dst, src) in col.iter_mut().zip(p) {
            *dst = src;
        }
    }
}

/// `sum_i tr((V_i^T V_i + eps^2 I)^{1/2})` and its gradient blocks.
fn smoothed_nuclear(blocks: &[DMatrix<f64>], eps: f64) -> (f64, Vec<DMatrix<f64>>) {
    let mut value = 0.0;
    let grads = blocks
        .iter()
        .map(|v| {
            let g = v.transpose() * v;
            let g = Matrix2::new(g[(0, 0)] + eps * eps, g[(0, 1)], g[(1, 0)], g[(1, 1)] + eps * eps);
            let eig = g.symmetric_eigen();
            value += eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum::<f64>();
            let inv_sqrt = eig.eigenvectors
                * Matrix2::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.max(eps * eps).sqrt()))
                * eig.eigenvectors.transpose();
            let inv_sqrt = DMatrix::from_column_slice(2, 2, inv_sqrt.as_slice());
            v * inv_sqrt
        })
        .collect();
    (value, grads)
}

/// Accelerated projected gradient on the smoothed objective with a
/// decreasing smoothing schedule. Returns the best feasible point found,
/// judged by the exact objective.
pub fn projected_gradient_oracle(probs: &ProbabilityMap, patch: &PatchConfig, lambda: f64) -> (Array2<f64>, f64) {
    let grid = probs.grid();
    let (h, w) = (grid.height(), grid.width());
    let p = probs.values();
    let k = p.nrows();
    let smooth = |z: &Array2<f64>, eps: f64| -> (f64, Array2<f64>) {
        let mut value = 0.0;
        let mut grad = Array2::zeros(z.raw_dim());
        for i in 0..grid.len() {
            let s: f64 = (0..k).map(|c| p[[c, i]] * z[[c, i]]).sum();
            if s <= 0.0 {
                return (f64::INFINITY, grad);
            }
            value -= s.ln();
            for c in 0..k {
                grad[[c, i]] = -p[[c, i]] / s;
            }
        }
        let blocks = brute_jacobian(z, h, w, patch);
        let (prior, gblocks) = smoothed_nuclear(&blocks, eps);
        grad.scaled_add(lambda, &brute_jacobian_adjoint(&gblocks, k, h, w, patch));
        (value + lambda * prior, grad)
    };

    let mut x = Array2::from_elem(p.raw_dim(), 1.0 / k as f64);
    let mut best = (x.clone(), oracle_objective(&x, probs, patch, lambda));
    let mut step = 1.0;
    for eps in [1e-2, 1e-4, 1e-6] {
        let mut y = x.clone();
        let mut t = 1.0f64;
        let mut prev_value = f64::INFINITY;
        for _ in 0..2000 {
            let (fy, gy) = smooth(&y, eps);
            step *= 1.5;
            let (x_new, fx_new) = loop {
                let mut cand = &y - &(step * &gy);
                project_columns(&mut cand);
                let diff = &cand - &y;
                let (fc, _) = smooth(&cand, eps);
                let bound = fy + (&gy * &diff).sum() + diff.mapv(|d| d * d).sum() / (2.0 * step);
                if fc <= bound + 1e-12 * fy.abs() || step < 1e-14 {
                    break (cand, fc);
                }
                step *= 0.5;
            };
            // restart momentum whenever the smoothed value goes up
            if fx_new > prev_value {
                t = 1.0;
                y = x.clone();
                continue;
            }
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            y = &x_new + &(((t - 1.0) / t_next) * (&x_new - &x));
            let change = (&x_new - &x).mapv(|d| d * d).sum().sqrt();
            x = x_new;
            t = t_next;
            prev_value = fx_new;
            if change < 1e-13 {
                break;
            }
        }
        let exact = oracle_objective(&x, probs, patch, lambda);
        if exact < best.1 {
            best = (x.clone(), exact);
        }
    }
    best
}

/// Minimizer of `||X||_* + ||X - V||^2 / (2 tau)` by alternating least
/// squares on the factored form `(||A||^2 + ||B||^2) / 2 + ||A B^T - V||^2 / (2 tau)`.
pub fn nuclear_prox_als(v: &DMatrix<f64>, tau: f64) -> DMatrix<f64> {
    let eye = DMatrix::<f64>::identity(2, 2);
    let mut b = DMatrix::<f64>::identity(2, 2);
    let mut prev = DMatrix::<f64>::zeros(v.nrows(), 2);
    for _ in 0..200_000 {
        let a = v * &b * (b.transpose() * &b + tau * &eye).try_inverse().unwrap();
        b = v.transpose() * &a * (a.transpose() * &a + tau * &eye).try_inverse().unwrap();
        let x = &a * b.transpose();
        if (&x - &prev).norm() < 1e-15 {
            return x;
        }
        prev = x;
    }
    prev
}
