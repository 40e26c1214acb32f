//! Seeded synthetic scenes: a Voronoi partition of the grid into classes,
//! one Gaussian mean spectrum per class, plus additive Gaussian noise that is
//! either white or smoothed by a periodic Gaussian kernel.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{HyperCube, ImageGrid, LabelMap};
use crate::mlr::TrainingSet;

pub const MAX_SYNTH_CLASSES: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub bands: usize,
    /// Voronoi sites; site `s` belongs to class `s mod K + 1`.
    pub sites: usize,
    /// Standard deviation of the additive noise.
    pub noise: f64,
    /// Spatial correlation length of the noise in pixels; 0 gives white noise.
    #[serde(default)]
    pub correlation: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            classes: 3,
            bands: 4,
            sites: 9,
            noise: 1.0,
            correlation: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.classes > MAX_SYNTH_CLASSES {
            return Err(Error::InvalidParameter(format!(
                "synthetic scenes support 1..={MAX_SYNTH_CLASSES} classes, got {}",
                self.classes
            )));
        }
        if self.sites < self.classes {
            return Err(Error::InvalidParameter("need at least one Voronoi site per class".into()));
        }
        if self.bands == 0 {
            return Err(Error::InvalidParameter("need at least one band".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::InvalidParameter(format!("noise must be nonnegative, got {}", self.noise)));
        }
        if !(self.correlation >= 0.0 && self.correlation.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "correlation length must be nonnegative, got {}",
                self.correlation
            )));
        }
        ImageGrid::new(self.height, self.width).map(|_| ())
    }
}

/// Unit-energy Gaussian taps at offsets `-r..=r`, `r = ceil(3 ell)`.
fn smoothing_taps(ell: f64) -> Vec<f64> {
    let r = (3.0 * ell).ceil() as isize;
    let mut taps: Vec<f64> = (-r..=r).map(|t| (-((t * t) as f64) / (2.0 * ell * ell)).exp()).collect();
    let energy = taps.iter().map(|t| t * t).sum::<f64>().sqrt();
    taps.iter_mut().for_each(|t| *t /= energy);
    taps
}

/// Periodic separable smoothing that keeps unit per-pixel variance for
/// white input.
fn correlate(field: &[f64], grid: ImageGrid, ell: f64) -> Vec<f64> {
    let taps = smoothing_taps(ell);
    let r = (taps.len() / 2) as isize;
    let pass = |src: &[f64], along_rows: bool| -> Vec<f64> {
        (0..grid.len())
            .map(|i| {
                let (row, col) = grid.coords(i);
                taps.iter()
                    .enumerate()
                    .map(|(t, w)| {
                        let off = t as isize - r;
                        let (dr, dc) = if along_rows { (0, off) } else { (off, 0) };
                        w * src[grid.wrapped(row, col, dr, dc)]
                    })
                    .sum()
            })
            .collect()
    };
    pass(&pass(field, true), false)
}

/// Returns the noisy cube and its ground-truth class map.
pub fn generate(config: &SynthConfig) -> Result<(HyperCube, LabelMap)> {
    config.validate()?;
    let grid = ImageGrid::new(config.height, config.width)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");

    let sites: Vec<(f64, f64)> = (0..config.sites)
        .map(|_| {
            (
                rng.random_range(0.0..config.height as f64),
                rng.random_range(0.0..config.width as f64),
            )
        })
        .collect();
    let labels: Vec<u32> = (0..grid.len())
        .map(|i| {
            let (r, c) = grid.coords(i);
            let (r, c) = (r as f64 + 0.5, c as f64 + 0.5);
            let nearest = sites
                .iter()
                .enumerate()
                .map(|(s, &(sr, sc))| (s, (sr - r).powi(2) + (sc - c).powi(2)))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(s, _)| s)
                .expect("at least one site");
            (nearest % config.classes) as u32 + 1
        })
        .collect();
    let truth = LabelMap::new(grid, labels)?;

    let means = Array2::from_shape_fn((config.classes, config.bands), |_| std_normal.sample(&mut rng));
    let mut values = Array2::zeros((config.bands, grid.len()));
    for b in 0..config.bands {
        let mut noise: Vec<f64> = (0..grid.len()).map(|_| std_normal.sample(&mut rng)).collect();
        if config.correlation > 0.0 {
            noise = correlate(&noise, grid, config.correlation);
        }
        for (i, &label) in truth.labels().iter().enumerate() {
            values[[b, i]] = means[[label as usize - 1, b]] + config.noise * noise[i];
        }
    }
    Ok((HyperCube::new(grid, values)?, truth))
}

/// Draws up to `per_class` pixels of every class from `truth`.
pub fn sample_training(truth: &LabelMap, classes: usize, per_class: usize, seed: u64) -> Result<TrainingSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    for class in 1..=classes as u32 {
        let mut pixels: Vec<usize> = truth
            .labels()
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect();
        pixels.shuffle(&mut rng);
        pixels.truncate(per_class);
        pixels.sort_unstable();
        samples.extend(pixels.into_iter().map(|p| (p, class)));
    }
    samples.sort_unstable();
    TrainingSet::new(classes, samples)
}
