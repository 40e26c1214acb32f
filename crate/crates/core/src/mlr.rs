//! Multinomial logistic regression producing per-pixel class likelihoods.
//!
//! Training minimizes the ridge-regularized mean negative log-likelihood by
//! gradient descent with a backtracking (Armijo) line search. Features are
//! standardized with statistics of the training pixels, which are stored in
//! the model and reapplied at prediction time.

use ndarray::{Array1, Array2, ArrayView1, Axis, Zip};

use crate::error::{Error, Result};
use crate::field::{HyperCube, LabelMap, ProbabilityMap};

/// Labeled pixels used for training, labels in `1..=K`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingSet {
    classes: usize,
    samples: Vec<(usize, u32)>,
}

impl TrainingSet {
    /// Every class in `1..=classes` must have at least one sample.
    pub fn new(classes: usize, samples: Vec<(usize, u32)>) -> Result<Self> {
        if classes == 0 {
            return Err(Error::InvalidTrainingSet("need at least one class".into()));
        }
        let mut counts = vec![0usize; classes];
        for &(pixel, label) in &samples {
            if label == 0 || label as usize > classes {
                return Err(Error::InvalidTrainingSet(format!(
                    "pixel {pixel} has label {label}, expected 1..={classes}"
                )));
            }
            counts[label as usize - 1] += 1;
        }
        if let Some(k) = counts.iter().position(|&c| c == 0) {
            return Err(Error::InvalidTrainingSet(format!("class {} has no samples", k + 1)));
        }
        Ok(Self { classes, samples })
    }

    /// Every nonzero pixel of `labels`, in pixel order.
    pub fn from_label_map(labels: &LabelMap, classes: usize) -> Result<Self> {
        let samples = labels
            .labels()
            .iter()
            .enumerate()
            .filter(|(_, &l)| l != 0)
            .map(|(i, &l)| (i, l))
            .collect();
        Self::new(classes, samples)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn samples(&self) -> &[(usize, u32)] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn pixels(&self) -> Vec<usize> {
        self.samples.iter().map(|&(p, _)| p).collect()
    }

    pub fn contains(&self, pixel: usize) -> bool {
        self.samples.iter().any(|&(p, _)| p == pixel)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlrModel {
    /// `K x (d + 1)`, last column is the bias.
    pub weights: Array2<f64>,
    pub ridge: f64,
    pub feature_mean: Array1<f64>,
    /// Multiplier applied after centering; zero for constant bands.
    pub feature_scale: Array1<f64>,
}

impl MlrModel {
    /// All-zero weights with identity standardization.
    pub fn zeros(classes: usize, bands: usize) -> Self {
        Self {
            weights: Array2::zeros((classes, bands + 1)),
            ridge: 0.0,
            feature_mean: Array1::zeros(bands),
            feature_scale: Array1::ones(bands),
        }
    }

    pub fn classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn bands(&self) -> usize {
        self.weights.ncols() - 1
    }

    fn standardize_into(&self, x: ArrayView1<'_, f64>, mut out: ndarray::ArrayViewMut1<'_, f64>) {
        let d = self.bands();
        for j in 0..d {
            out[j] = (x[j] - self.feature_mean[j]) * self.feature_scale[j];
        }
        out[d] = 1.0;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    /// Weight of `ridge/2 ||W||^2` on the non-bias weights.
    pub ridge: f64,
    pub iters: usize,
    pub initial_step: f64,
    /// Stop once the gradient norm falls below this.
    pub grad_tol: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            ridge: 1e-3,
            iters: 500,
            initial_step: 1.0,
            grad_tol: 1e-9,
        }
    }
}

/// Row-wise softmax of a `N x K` logit matrix, stable under large logits.
fn softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row /= total;
    }
}

/// Mean negative log-likelihood plus ridge penalty, and its gradient.
///
/// `design` is `N x (d + 1)` with a trailing column of ones; `labels` are
/// zero-based class indices.
pub fn loss_and_gradient(
    weights: &Array2<f64>,
    design: &Array2<f64>,
    labels: &[usize],
    ridge: f64,
) -> (f64, Array2<f64>) {
    let n = design.nrows() as f64;
    let d = weights.ncols() - 1;
    let logits = design.dot(&weights.t());
    let mut loss = 0.0;
    for (row, &y) in logits.axis_iter(Axis(0)).zip(labels) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
    }
    loss /= n;
    let mut resid = logits;
    softmax_rows(&mut resid);
    for (mut row, &y) in resid.axis_iter_mut(Axis(0)).zip(labels) {
        row[y] -= 1.0;
    }
    let mut grad = resid.t().dot(design) / n;
    let penalized = weights.slice(ndarray::s![.., ..d]);
    loss += 0.5 * ridge * penalized.iter().map(|w| w * w).sum::<f64>();
    Zip::from(grad.slice_mut(ndarray::s![.., ..d]))
        .and(penalized)
        .for_each(|g, &w| *g += ridge * w);
    (loss, grad)
}

/// Fits the model; see [`train_mlr_traced`] for the loss history.
pub fn train_mlr(cube: &HyperCube, training: &TrainingSet, options: &TrainOptions) -> Result<MlrModel> {
    train_mlr_traced(cube, training, options).map(|(model, _)| model)
}

/// Fits the model and returns the loss after every accepted step, starting
/// with the loss at zero weights.
pub fn train_mlr_traced(
    cube: &HyperCube,
    training: &TrainingSet,
    options: &TrainOptions,
) -> Result<(MlrModel, Vec<f64>)> {
    if !(options.ridge >= 0.0) {
        return Err(Error::InvalidParameter(format!("ridge must be nonnegative, got {}", options.ridge)));
    }
    let d = cube.bands();
    let k = training.classes();
    if let Some(&(pixel, _)) = training.samples().iter().find(|(p, _)| *p >= cube.grid().len()) {
        return Err(Error::InvalidTrainingSet(format!(
            "pixel {pixel} outside a cube of {} pixels",
            cube.grid().len()
        )));
    }

    let n = training.len();
    let mut mean = Array1::zeros(d);
    for &(pixel, _) in training.samples() {
        mean += &cube.pixel(pixel);
    }
    mean /= n as f64;
    let mut var = Array1::<f64>::zeros(d);
    for &(pixel, _) in training.samples() {
        let centered = &cube.pixel(pixel) - &mean;
        var += &centered.mapv(|v| v * v);
    }
    var /= n as f64;
    let scale = var.mapv(|v| if v > 0.0 { 1.0 / v.sqrt() } else { 0.0 });

    let mut model = MlrModel {
        weights: Array2::zeros((k, d + 1)),
        ridge: options.ridge,
        feature_mean: mean,
        feature_scale: scale,
    };
    let mut design = Array2::zeros((n, d + 1));
    for (row, &(pixel, _)) in design.axis_iter_mut(Axis(0)).zip(training.samples()) {
        model.standardize_into(cube.pixel(pixel), row);
    }
    let labels: Vec<usize> = training.samples().iter().map(|&(_, l)| l as usize - 1).collect();

    let (mut loss, mut grad) = loss_and_gradient(&model.weights, &design, &labels, options.ridge);
    let mut trace = vec![loss];
    let mut step = options.initial_step;
    for _ in 0..options.iters {
        let gnorm2 = grad.iter().map(|g| g * g).sum::<f64>();
        if gnorm2.sqrt() <= options.grad_tol {
            break;
        }
        let mut accepted = None;
        for _ in 0..60 {
            let candidate = &model.weights - &(&grad * step);
            let (c_loss, c_grad) = loss_and_gradient(&candidate, &design, &labels, options.ridge);
            if c_loss <= loss - 1e-4 * step * gnorm2 {
                accepted = Some((candidate, c_loss, c_grad));
                break;
            }
            step *= 0.5;
        }
        let Some((weights, new_loss, new_grad)) = accepted else {
            break;
        };
        model.weights = weights;
        loss = new_loss;
        grad = new_grad;
        trace.push(loss);
        step *= 2.0;
    }
    Ok((model, trace))
}

/// Softmax class probabilities for every pixel of the cube.
pub fn predict_probs(model: &MlrModel, cube: &HyperCube) -> Result<ProbabilityMap> {
    if cube.bands() != model.bands() {
        return Err(Error::mismatch("predict_probs", format!("{} bands", model.bands()), format!("{} bands", cube.bands())));
    }
    let n = cube.grid().len();
    let mut design = Array2::zeros((n, model.bands() + 1));
    Zip::from(design.rows_mut())
        .and(cube.values().columns())
        .par_for_each(|row, x| model.standardize_into(x, row));
    let mut probs = design.dot(&model.weights.t());
    softmax_rows(&mut probs);
    ProbabilityMap::new(cube.grid(), probs.reversed_axes().as_standard_layout().into_owned())
}
