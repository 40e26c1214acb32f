//! ADMM solver for the hidden-field segmentation problem.
//!
//! The field `z` is split as `u = G z` with `G = (I, J, I, I)` stacked, one
//! block per term: the data term, the Schatten prior, nonnegativity and the
//! sum-to-one constraint. Each sweep
//!
//! 1. solves `min_z ||G z - u - d||^2`, i.e. `(3I + J^T J) z = G^T (u + d)`,
//!    in the Fourier domain,
//! 2. updates every `u_j` with the proximity operator of its term at
//!    `H_j z - d_j`, pixel by pixel,
//! 3. updates the scaled multipliers `d <- d - (G z - u)`.
//!
//! Stopping uses relative primal and dual residuals, or a fixed sweep count.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use ndarray::{s, Array2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{argmax_columns, HiddenField, LabelMap, PatchConfig, ProbabilityMap};
use crate::operators::{apply_jacobian, apply_jacobian_adjoint, FourierSymbol, StackedJacobian};
use crate::prox::{
    prox_data_in_place, prox_nonneg_in_place, prox_schatten_in_place, prox_sum_one_in_place,
    project_simplex_in_place, schatten_norm, SchattenOrder,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Weight of the structure tensor prior.
    pub lambda: f64,
    /// ADMM penalty.
    pub mu: f64,
    pub schatten: SchattenOrder,
    pub max_iters: usize,
    /// Run exactly this many sweeps and ignore the tolerances.
    pub fixed_iters: Option<usize>,
    pub eps_primal: f64,
    pub eps_dual: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            lambda: 2.0,
            mu: 3.0,
            schatten: SchattenOrder::Nuclear,
            max_iters: 200,
            fixed_iters: None,
            eps_primal: 1e-3,
            eps_dual: 1e-3,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::InvalidParameter(what));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be nonnegative, got {}", self.lambda));
        }
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return bad(format!("mu must be positive, got {}", self.mu));
        }
        if self.max_iters == 0 || self.fixed_iters == Some(0) {
            return bad("iteration count must be at least 1".into());
        }
        if !(self.eps_primal > 0.0 && self.eps_dual > 0.0) {
            return bad("residual tolerances must be positive".into());
        }
        Ok(())
    }

    /// Threshold handed to the per-pixel Schatten prox.
    pub fn schatten_threshold(&self) -> f64 {
        self.lambda / self.mu
    }

    fn sweep_limit(&self) -> usize {
        self.fixed_iters.unwrap_or(self.max_iters)
    }
}

/// Split variables `u_j = H_j z` and their scaled multipliers. The prior
/// block `u2`, `d2` stays frozen at its initial value when `lambda = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitState {
    pub u1: Array2<f64>,
    pub u2: Array2<f64>,
    pub u3: Array2<f64>,
    pub u4: Array2<f64>,
    pub d1: Array2<f64>,
    pub d2: Array2<f64>,
    pub d3: Array2<f64>,
    pub d4: Array2<f64>,
    pub iteration: usize,
    pub residuals: Option<Residuals>,
}

/// Primal `r = G z - u` and dual `s = mu G^T (u - u_prev)` residual norms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    pub primal: f64,
    pub dual: f64,
    /// `||r|| / max(||G z||, ||u||)`
    pub primal_rel: f64,
    /// `||s|| / (mu ||d||)`
    pub dual_rel: f64,
}

impl Residuals {
    pub fn within(&self, eps_primal: f64, eps_dual: f64) -> bool {
        self.primal_rel <= eps_primal && self.dual_rel <= eps_dual
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub converged: bool,
    pub final_residuals: Residuals,
    pub primal_rel_trace: Vec<f64>,
    pub dual_rel_trace: Vec<f64>,
    /// Objective of the feasibility-projected iterate after every sweep;
    /// `inf` where the projected field gives some pixel zero likelihood.
    pub objective_trace: Vec<f64>,
    #[serde(skip)]
    pub elapsed: Duration,
}

fn sq(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum()
}

/// Solver bound to one likelihood map and patch geometry.
#[derive(Debug, Clone)]
pub struct Solver<'a> {
    probs: &'a ProbabilityMap,
    patch: &'a PatchConfig,
    config: SolverConfig,
    symbol: FourierSymbol,
}

impl<'a> Solver<'a> {
    pub fn new(probs: &'a ProbabilityMap, patch: &'a PatchConfig, config: SolverConfig) -> Result<Self> {
        config.validate()?;
        let symbol = FourierSymbol::new(probs.grid(), patch);
        Ok(Self {
            probs,
            patch,
            config,
            symbol,
        })
    }

    pub fn config(&self) -> &SolverConfig {
        &self.config
    }

    fn jacobian(&self, z: &Array2<f64>) -> Array2<f64> {
        apply_jacobian(z, self.probs.grid(), self.patch)
            .expect("field shape fixed by the probability map")
            .into_values()
    }

    fn jacobian_adjoint(&self, y: Array2<f64>) -> Array2<f64> {
        let y = StackedJacobian::new(self.probs.grid(), self.probs.classes(), self.patch.len(), y)
            .expect("split shape fixed at initialization");
        apply_jacobian_adjoint(&y, self.patch).expect("split shape fixed at initialization")
    }

    /// Column-normalized likelihoods as the starting field, `u = G z`, `d = 0`.
    pub fn initialize(&self) -> (Array2<f64>, SplitState) {
        let mut z = self.probs.values().to_owned();
        for mut col in z.axis_iter_mut(Axis(1)) {
            let total = col.sum();
            col /= total;
        }
        let jz = self.jacobian(&z);
        let zeros = Array2::zeros(z.raw_dim());
        let state = SplitState {
            u1: z.clone(),
            d2: Array2::zeros(jz.raw_dim()),
            u2: jz,
            u3: z.clone(),
            u4: z.clone(),
            d1: zeros.clone(),
            d3: zeros.clone(),
            d4: zeros,
            iteration: 0,
            residuals: None,
        };
        (z, state)
    }

    /// With `lambda = 0` the prior block is dropped from the split: it would
    /// only couple the pixels through the z-update and slow convergence.
    fn prior_active(&self) -> bool {
        self.config.lambda > 0.0
    }

    /// One ADMM sweep; overwrites `z` and `state` and returns the residuals.
    pub fn iterate(&self, state: &mut SplitState, z: &mut Array2<f64>) -> Result<Residuals> {
        let mu = self.config.mu;
        let prior = self.prior_active();
        // z-update
        let mut rhs = &state.u1 + &state.d1;
        rhs += &state.u3;
        rhs += &state.d3;
        rhs += &state.u4;
        rhs += &state.d4;
        let (z_new, jz) = if prior {
            rhs += &self.jacobian_adjoint(&state.u2 + &state.d2);
            let z_new = crate::operators::solve_quadratic(&rhs, &self.symbol)?;
            let jz = self.jacobian(&z_new);
            (z_new, jz)
        } else {
            (rhs / 3.0, state.u2.clone())
        };

        // u-updates, each at H_j z - d_j
        let mut u1 = &z_new - &state.d1;
        let failed = AtomicUsize::new(usize::MAX);
        Zip::indexed(u1.axis_iter_mut(Axis(1)))
            .and(self.probs.values().axis_iter(Axis(1)))
            .par_for_each(|i, col, p| {
                if !prox_data_in_place(col, p, mu) {
                    failed.fetch_min(i, Ordering::Relaxed);
                }
            });
        let failed = failed.into_inner();
        if failed != usize::MAX {
            return Err(Error::DegenerateLikelihood { pixel: failed });
        }

        let mut u2 = &jz - &state.d2;
        if prior {
            let tau = self.config.schatten_threshold();
            let order = self.config.schatten;
            let half = u2.nrows() / 2;
            Zip::from(u2.columns_mut()).par_for_each(|col| {
                let (h, v) = col.split_at(Axis(0), half);
                prox_schatten_in_place(h, v, tau, order);
            });
        }

        let mut u3 = &z_new - &state.d3;
        Zip::from(u3.columns_mut()).par_for_each(prox_nonneg_in_place);
        let mut u4 = &z_new - &state.d4;
        Zip::from(u4.columns_mut()).par_for_each(prox_sum_one_in_place);

        // multipliers and residuals
        let r1 = &z_new - &u1;
        let r2 = &jz - &u2;
        let r3 = &z_new - &u3;
        let r4 = &z_new - &u4;
        let primal = (sq(&r1) + sq(&r2) + sq(&r3) + sq(&r4)).sqrt();

        let mut dual_vec = &u1 - &state.u1;
        dual_vec += &(&u3 - &state.u3);
        dual_vec += &(&u4 - &state.u4);
        if prior {
            dual_vec += &self.jacobian_adjoint(&u2 - &state.u2);
        }
        let dual = mu * sq(&dual_vec).sqrt();

        state.d1 -= &r1;
        state.d2 -= &r2;
        state.d3 -= &r3;
        state.d4 -= &r4;

        let gz = (3.0 * sq(&z_new) + sq(&jz)).sqrt();
        let u_norm = (sq(&u1) + sq(&u2) + sq(&u3) + sq(&u4)).sqrt();
        // G^T d equals the unscaled dual residual after every z-update, so the
        // multipliers themselves set the scale.
        let d_norm = mu * (sq(&state.d1) + sq(&state.d2) + sq(&state.d3) + sq(&state.d4)).sqrt();

        let residuals = Residuals {
            primal,
            dual,
            primal_rel: primal / gz.max(u_norm).max(f64::MIN_POSITIVE),
            dual_rel: dual / d_norm.max(f64::MIN_POSITIVE),
        };
        state.u1 = u1;
        state.u2 = u2;
        state.u3 = u3;
        state.u4 = u4;
        state.iteration += 1;
        state.residuals = Some(residuals);
        *z = z_new;
        Ok(residuals)
    }

    /// Iterates to the stopping rule and returns the projected field.
    pub fn run(&self) -> Result<(HiddenField, SolveReport)> {
        let start = Instant::now();
        let grid = self.probs.grid();
        let (mut z, mut state) = self.initialize();
        let mut primal_rel_trace = Vec::new();
        let mut dual_rel_trace = Vec::new();
        let mut objective_trace = Vec::new();
        let mut converged = false;
        let mut last = None;
        for _ in 0..self.config.sweep_limit() {
            let res = self.iterate(&mut state, &mut z)?;
            primal_rel_trace.push(res.primal_rel);
            dual_rel_trace.push(res.dual_rel);
            let projected = HiddenField::new(grid, project_feasible(&z))?;
            let value = objective(&projected, self.probs, self.patch, self.config.lambda, self.config.schatten)
                .unwrap_or(f64::INFINITY);
            objective_trace.push(value);
            last = Some(res);
            converged = res.within(self.config.eps_primal, self.config.eps_dual);
            if converged && self.config.fixed_iters.is_none() {
                break;
            }
        }
        let field = HiddenField::new(grid, project_feasible(&z))?;
        let report = SolveReport {
            iterations: state.iteration,
            converged,
            final_residuals: last.expect("at least one sweep"),
            primal_rel_trace,
            dual_rel_trace,
            objective_trace,
            elapsed: start.elapsed(),
        };
        Ok((field, report))
    }
}

/// `z0 = column-normalized probs`, `u = G z0`, `d = 0`.
pub fn initialize(
    probs: &ProbabilityMap,
    patch: &PatchConfig,
    config: &SolverConfig,
) -> Result<(Array2<f64>, SplitState)> {
    Ok(Solver::new(probs, patch, config.clone())?.initialize())
}

/// Solves the segmentation problem for one likelihood map.
pub fn run(
    probs: &ProbabilityMap,
    patch: &PatchConfig,
    config: &SolverConfig,
) -> Result<(HiddenField, SolveReport)> {
    Solver::new(probs, patch, config.clone())?.run()
}

/// Clamps negatives and renormalizes each column; columns with no positive
/// mass fall back to the Euclidean simplex projection.
pub fn project_feasible(z: &Array2<f64>) -> Array2<f64> {
    let mut out = z.clone();
    for (mut col, orig) in out.axis_iter_mut(Axis(1)).zip(z.axis_iter(Axis(1))) {
        col.mapv_inplace(|v| v.max(0.0));
        let total = col.sum();
        if total > 0.0 {
            col /= total;
        } else {
            col.assign(&orig);
            project_simplex_in_place(col);
        }
    }
    out
}

/// Per-pixel argmax of the field, ties going to the smallest class.
pub fn extract_labels(field: &HiddenField) -> LabelMap {
    LabelMap::new(field.grid(), argmax_columns(field.values())).expect("one label per pixel")
}

/// `sum_i -ln(p_i^T z_i) + lambda sum_i ||[J z]_i||_{S_p}`.
pub fn objective(
    field: &HiddenField,
    probs: &ProbabilityMap,
    patch: &PatchConfig,
    lambda: f64,
    order: SchattenOrder,
) -> Result<f64> {
    let z = field.values();
    if z.dim() != probs.values().dim() || field.grid() != probs.grid() {
        return Err(Error::mismatch(
            "objective",
            format!("{:?}", probs.values().dim()),
            format!("{:?}", z.dim()),
        ));
    }
    let mut data = 0.0;
    for (i, (zi, pi)) in z.axis_iter(Axis(1)).zip(probs.values().axis_iter(Axis(1))).enumerate() {
        let value = pi.dot(&zi);
        if !(value > 0.0) {
            return Err(Error::InfeasibleEvaluation { pixel: i, value });
        }
        data -= value.ln();
    }
    Ok(data + lambda * prior_value(field, patch, order)?)
}

/// `sum_i ||[J z]_i||_{S_p}`.
pub fn prior_value(field: &HiddenField, patch: &PatchConfig, order: SchattenOrder) -> Result<f64> {
    let jz = apply_jacobian(field.values(), field.grid(), patch)?.into_values();
    let half = jz.nrows() / 2;
    let norms: Vec<f64> = jz
        .axis_iter(Axis(1))
        .map(|col| schatten_norm(col.slice(s![..half]), col.slice(s![half..]), order))
        .collect();
    Ok(norms.iter().sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::ImageGrid;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_probs(rng: &mut ChaCha8Rng, grid: ImageGrid, k: usize) -> ProbabilityMap {
        let values = Array2::from_shape_fn((k, grid.len()), |_| rng.random_range(0.01..1.0));
        ProbabilityMap::new(grid, values).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::default().validate().is_ok());
        let mut c = SolverConfig::default();
        c.mu = 0.0;
        assert!(c.validate().is_err());
        let mut c = SolverConfig::default();
        c.lambda = -1.0;
        assert!(c.validate().is_err());
        let mut c = SolverConfig::default();
        c.max_iters = 0;
        assert!(c.validate().is_err());
        let mut c = SolverConfig::default();
        c.fixed_iters = Some(0);
        assert!(c.validate().is_err());
    }

    #[test]
    fn initialization_examples() {
        let g = ImageGrid::new(1, 2).unwrap();
        let probs = ProbabilityMap::new(g, array![[0.0, 0.3], [2.0, 0.3], [0.0, 0.3]]).unwrap();
        let patch = PatchConfig::new(1, 1.0).unwrap();
        let (z, state) = initialize(&probs, &patch, &SolverConfig::default()).unwrap();
        assert_eq!(z.column(0), array![0.0, 1.0, 0.0]);
        for v in z.column(1) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        for d in [&state.d1, &state.d2, &state.d3, &state.d4] {
            assert!(d.iter().all(|&v| v == 0.0));
        }
        assert_eq!(state.u2.dim(), (2 * 9 * 3, 2));
    }

    #[test]
    fn label_extraction() {
        let g = ImageGrid::new(1, 3).unwrap();
        let f = HiddenField::new(g, array![[0.0, 1.0 / 3.0, 0.2], [0.0, 1.0 / 3.0, 0.5], [1.0, 1.0 / 3.0, 0.3]]).unwrap();
        assert_eq!(extract_labels(&f).labels(), &[3, 1, 2]);
    }

    #[test]
    fn objective_examples() {
        let g = ImageGrid::new(3, 4).unwrap();
        let k = 3;
        let uniform = Array2::from_elem((k, 12), 1.0 / k as f64);
        let probs = ProbabilityMap::new(g, uniform.clone()).unwrap();
        let field = HiddenField::new(g, uniform).unwrap();
        let patch = PatchConfig::new(1, 1.0).unwrap();
        let value = objective(&field, &probs, &patch, 2.0, SchattenOrder::Nuclear).unwrap();
        assert!((value - 12.0 * (3.0f64).ln()).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let probs = random_probs(&mut rng, g, k);
        let z = project_feasible(&Array2::from_shape_fn((k, 12), |_| rng.random_range(0.0..1.0)));
        let field = HiddenField::new(g, z.clone()).unwrap();
        let data: f64 = (0..12).map(|i| -probs.values().column(i).dot(&z.column(i)).ln()).sum();
        let value = objective(&field, &probs, &patch, 0.0, SchattenOrder::Nuclear).unwrap();
        assert!((value - data).abs() < 1e-12);
    }

    #[test]
    fn objective_rejects_zero_likelihood() {
        let g = ImageGrid::new(1, 1).unwrap();
        let probs = ProbabilityMap::new(g, array![[1.0], [0.0]]).unwrap();
        let field = HiddenField::new(g, array![[0.0], [1.0]]).unwrap();
        let patch = PatchConfig::new(0, 1.0).unwrap();
        assert!(matches!(
            objective(&field, &probs, &patch, 1.0, SchattenOrder::Nuclear),
            Err(Error::InfeasibleEvaluation { pixel: 0, .. })
        ));
    }

    #[test]
    fn projection_handles_negative_columns() {
        let z = array![[0.5, -1.0, 2.0], [0.25, -2.0, 2.0]];
        let p = project_feasible(&z);
        assert_eq!(p.column(0), array![2.0 / 3.0, 1.0 / 3.0]);
        assert_eq!(p.column(1), array![1.0, 0.0]);
        assert_eq!(p.column(2), array![0.5, 0.5]);
    }

    #[test]
    fn analytic_fixed_point_is_stationary() {
        // uniform likelihoods with a constant uniform field: u = G z,
        // d1 = p / (mu p^T z), d4 = -d1, d2 = d3 = 0
        let g = ImageGrid::new(4, 5).unwrap();
        let k = 3;
        let p = Array2::from_elem((k, g.len()), 0.4);
        let probs = ProbabilityMap::new(g, p.clone()).unwrap();
        let patch = PatchConfig::new(1, 1.0).unwrap();
        let config = SolverConfig {
            mu: 1.7,
            ..SolverConfig::default()
        };
        let solver = Solver::new(&probs, &patch, config.clone()).unwrap();
        let (mut z, mut state) = solver.initialize();
        let d1 = &p / (config.mu * 0.4);
        state.d4 = -&d1;
        state.d1 = d1;
        let before = state.clone();
        let z_before = z.clone();
        solver.iterate(&mut state, &mut z).unwrap();
        let close = |a: &Array2<f64>, b: &Array2<f64>| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-10);
        assert!(close(&z, &z_before));
        assert!(close(&state.u1, &before.u1) && close(&state.u2, &before.u2));
        assert!(close(&state.u3, &before.u3) && close(&state.u4, &before.u4));
        assert!(close(&state.d1, &before.d1) && close(&state.d4, &before.d4));
        assert!(close(&state.d2, &before.d2) && close(&state.d3, &before.d3));
    }

    #[test]
    fn converged_run_is_nearly_fixed() {
        let g = ImageGrid::new(4, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let probs = random_probs(&mut rng, g, 2);
        let patch = PatchConfig::new(0, 1.0).unwrap();
        let config = SolverConfig {
            lambda: 0.5,
            max_iters: 20_000,
            eps_primal: 1e-11,
            eps_dual: 1e-11,
            ..SolverConfig::default()
        };
        let solver = Solver::new(&probs, &patch, config.clone()).unwrap();
        let (mut z, mut state) = solver.initialize();
        for _ in 0..config.max_iters {
            if solver.iterate(&mut state, &mut z).unwrap().within(1e-11, 1e-11) {
                break;
            }
        }
        let (z_prev, u_prev) = (z.clone(), state.u1.clone());
        let res = solver.iterate(&mut state, &mut z).unwrap();
        assert!(res.primal_rel < 1e-9, "{res:?}");
        assert!((&z - &z_prev).iter().all(|d| d.abs() < 1e-8));
        assert!((&state.u1 - &u_prev).iter().all(|d| d.abs() < 1e-8));
    }

    #[test]
    fn uniform_likelihoods_give_constant_labels() {
        let g = ImageGrid::new(5, 6).unwrap();
        let probs = ProbabilityMap::new(g, Array2::from_elem((4, 30), 0.25)).unwrap();
        let patch = PatchConfig::new(1, 1.0).unwrap();
        let (field, _) = run(&probs, &patch, &SolverConfig::default()).unwrap();
        assert!(extract_labels(&field).labels().iter().all(|&l| l == 1));
    }

    #[test]
    fn zero_lambda_recovers_argmax() {
        let g = ImageGrid::new(6, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let probs = random_probs(&mut rng, g, 3);
        let patch = PatchConfig::new(1, 1.0).unwrap();
        let config = SolverConfig {
            lambda: 0.0,
            ..SolverConfig::default()
        };
        let (field, report) = run(&probs, &patch, &config).unwrap();
        assert_eq!(extract_labels(&field), probs.argmax_labels());
        assert!(field.feasibility_gap() < 1e-6);
        assert_eq!(report.objective_trace.len(), report.iterations);
    }

    #[test]
    fn fixed_iterations_run_exactly() {
        let g = ImageGrid::new(4, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let probs = random_probs(&mut rng, g, 2);
        let patch = PatchConfig::new(1, 1.0).unwrap();
        let config = SolverConfig {
            fixed_iters: Some(37),
            ..SolverConfig::default()
        };
        let (_, report) = run(&probs, &patch, &config).unwrap();
        assert_eq!(report.iterations, 37);
        assert_eq!(report.primal_rel_trace.len(), 37);
    }
}
