//! Command-line front end: synthesize, train, predict, segment, evaluate.
//!
//! Exit codes: 0 on success, 1 on data or runtime errors, 2 on usage errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use segsalsa::hsio;
use segsalsa::mlr::{train_mlr, TrainOptions, TrainingSet};
use segsalsa::solver::{extract_labels, objective, Solver};
use segsalsa::synth::{self, SynthConfig};
use segsalsa::{default_gamma, predict_probs, Error, HiddenField, ImageGrid, PatchConfig, SchattenOrder, SolverConfig};

#[derive(Parser)]
#[command(name = "segsalsa", version, about = "Hidden-field segmentation with structure tensor regularization")]
struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic cube with its ground truth.
    Synth(SynthArgs),
    /// Fit a multinomial logistic regression on labeled pixels.
    Train(TrainArgs),
    /// Write per-pixel class probabilities for a cube.
    Predict(PredictArgs),
    /// Segment a probability map (or a cube with a model).
    Segment(SegmentArgs),
    /// Overall accuracy of a label file against ground truth.
    Evaluate(EvaluateArgs),
}

#[derive(clap::Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u8).range(1..=8))]
    classes: u8,
    #[arg(long, default_value_t = 4)]
    bands: usize,
    /// Voronoi sites (default: 3 per class).
    #[arg(long)]
    sites: Option<usize>,
    /// Standard deviation of the additive Gaussian noise.
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    /// Spatial correlation length of the noise in pixels (0 = white).
    #[arg(long, default_value_t = 0.0)]
    correlation: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_cube: PathBuf,
    #[arg(long)]
    out_truth: PathBuf,
    /// Also write a training split drawn from the ground truth.
    #[arg(long)]
    out_train: Option<PathBuf>,
    #[arg(long, default_value_t = 15)]
    train_per_class: usize,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    cube: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value_t = 1e-3)]
    ridge: f64,
    #[arg(long, default_value_t = 500)]
    iters: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct PredictArgs {
    #[arg(long)]
    cube: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn parse_patch(s: &str) -> Result<usize, String> {
    let p: usize = s.parse().map_err(|e| format!("{e}"))?;
    if p == 0 || p % 2 == 0 {
        return Err(format!("patch size must be odd and at least 1, got {p}"));
    }
    Ok(p)
}

#[derive(clap::Args)]
struct SegmentArgs {
    #[arg(long, conflicts_with_all = ["cube", "model"], required_unless_present = "cube")]
    probs: Option<PathBuf>,
    #[arg(long, requires = "model")]
    cube: Option<PathBuf>,
    #[arg(long, requires = "cube")]
    model: Option<PathBuf>,
    /// Full patch width P (odd); the half-width is (P - 1) / 2.
    #[arg(long, default_value_t = 3, value_parser = parse_patch)]
    patch: usize,
    /// Gaussian bandwidth of the patch weights (default: the half-width, 1 for 1x1).
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, default_value_t = 2.0)]
    lambda: f64,
    #[arg(long, default_value_t = 3.0)]
    mu: f64,
    /// Schatten order of the prior.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..=2))]
    p: u32,
    #[arg(long, default_value_t = 200)]
    iters: usize,
    /// Run exactly --iters sweeps instead of stopping on the residuals.
    #[arg(long)]
    fixed_iters: bool,
    /// Relative primal and dual residual tolerance.
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
    #[arg(long)]
    out_labels: PathBuf,
    /// Hidden field in the probability-file format.
    #[arg(long)]
    out_field: Option<PathBuf>,
    /// Label map as a binary PPM.
    #[arg(long)]
    out_image: Option<PathBuf>,
    /// Directory for one PGM per field channel.
    #[arg(long)]
    field_pgm_dir: Option<PathBuf>,
    /// Defaults to `<out-labels>.manifest.json`.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(clap::Args)]
struct EvaluateArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    /// Pixels to leave out of the score, typically the training samples.
    #[arg(long)]
    exclude: Option<PathBuf>,
    /// Score the --exclude pixels too.
    #[arg(long)]
    include_train: bool,
}

#[derive(Serialize)]
struct PatchManifest {
    size: usize,
    half_width: usize,
    gamma: f64,
}

#[derive(Serialize)]
struct ResultManifest {
    iterations: usize,
    converged: bool,
    primal_rel: f64,
    dual_rel: f64,
    objective: Option<f64>,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    probs: Option<&'a Path>,
    cube: Option<&'a Path>,
    model: Option<&'a Path>,
    patch: PatchManifest,
    solver: &'a SolverConfig,
    threads: Option<usize>,
    out_labels: &'a Path,
    out_field: Option<&'a Path>,
    out_image: Option<&'a Path>,
    field_pgm_dir: Option<&'a Path>,
    result: ResultManifest,
}

fn class_count(ts_labels: &segsalsa::LabelMap) -> usize {
    ts_labels.max_label() as usize
}

/// Smallest grid containing every listed pixel.
fn grid_of(entries: &[hsio::LabelEntry]) -> Result<ImageGrid, Error> {
    let h = entries.iter().map(|e| e.row + 1).max().unwrap_or(0);
    let w = entries.iter().map(|e| e.col + 1).max().unwrap_or(0);
    ImageGrid::new(h, w).map_err(|_| Error::EmptyEvaluation)
}

fn read_entries(path: &Path) -> Result<Vec<hsio::LabelEntry>, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    hsio::parse_label_entries(&text)
}

fn synth_cmd(args: SynthArgs) -> Result<(), Error> {
    let classes = args.classes as usize;
    let config = SynthConfig {
        height: args.height,
        width: args.width,
        classes,
        bands: args.bands,
        sites: args.sites.unwrap_or(3 * classes),
        noise: args.noise,
        correlation: args.correlation,
        seed: args.seed,
    };
    let (cube, truth) = synth::generate(&config)?;
    hsio::write_cube(&args.out_cube, &cube)?;
    hsio::write_labels(&args.out_truth, &truth)?;
    if let Some(path) = &args.out_train {
        let ts = synth::sample_training(&truth, classes, args.train_per_class, args.seed)?;
        let mut map = segsalsa::LabelMap::unlabeled(truth.grid());
        for &(p, l) in ts.samples() {
            let (r, c) = truth.grid().coords(p);
            map.set(r, c, l);
        }
        hsio::write_labels(path, &map)?;
    }
    println!(
        "wrote {}x{}x{} cube with {classes} classes",
        config.height, config.width, config.bands
    );
    Ok(())
}

fn train_cmd(args: TrainArgs) -> Result<(), Error> {
    let cube = hsio::read_cube(&args.cube)?;
    let labels = hsio::read_labels(&args.labels, cube.grid())?;
    let ts = TrainingSet::from_label_map(&labels, class_count(&labels))?;
    let options = TrainOptions {
        ridge: args.ridge,
        iters: args.iters,
        ..TrainOptions::default()
    };
    let model = train_mlr(&cube, &ts, &options)?;
    hsio::write_model(&args.out, &model)?;
    println!("trained {} classes on {} samples", model.classes(), ts.len());
    Ok(())
}

fn predict_cmd(args: PredictArgs) -> Result<(), Error> {
    let cube = hsio::read_cube(&args.cube)?;
    let model = hsio::read_model(&args.model)?;
    hsio::write_probs(&args.out, &predict_probs(&model, &cube)?)
}

fn segment_cmd(args: SegmentArgs, threads: Option<usize>) -> Result<(), Error> {
    let probs = match (&args.probs, &args.cube, &args.model) {
        (Some(p), _, _) => hsio::read_probs(p)?,
        (None, Some(c), Some(m)) => predict_probs(&hsio::read_model(m)?, &hsio::read_cube(c)?)?,
        _ => unreachable!("clap enforces the input combination"),
    };
    let half_width = (args.patch - 1) / 2;
    let gamma = args.gamma.unwrap_or_else(|| default_gamma(half_width));
    let patch = PatchConfig::new(half_width, gamma)?;
    let config = SolverConfig {
        lambda: args.lambda,
        mu: args.mu,
        schatten: SchattenOrder::from_p(args.p)?,
        max_iters: args.iters,
        fixed_iters: args.fixed_iters.then_some(args.iters),
        eps_primal: args.tol,
        eps_dual: args.tol,
    };
    let solver = Solver::new(&probs, &patch, config.clone())?;
    let (field, report) = solver.run()?;
    let labels = extract_labels(&field);

    hsio::write_labels(&args.out_labels, &labels)?;
    if let Some(path) = &args.out_field {
        hsio::write_field(path, &field)?;
    }
    if let Some(path) = &args.out_image {
        hsio::write_image(path, &hsio::render_label_map(&labels, None)?)?;
    }
    if let Some(dir) = &args.field_pgm_dir {
        write_channels(dir, &field)?;
    }

    let final_objective = objective(&field, &probs, &patch, config.lambda, config.schatten).ok();
    let res = report.final_residuals;
    let manifest = RunManifest {
        tool: "segsalsa",
        version: env!("CARGO_PKG_VERSION"),
        command: "segment",
        probs: args.probs.as_deref(),
        cube: args.cube.as_deref(),
        model: args.model.as_deref(),
        patch: PatchManifest {
            size: args.patch,
            half_width,
            gamma,
        },
        solver: &config,
        threads,
        out_labels: &args.out_labels,
        out_field: args.out_field.as_deref(),
        out_image: args.out_image.as_deref(),
        field_pgm_dir: args.field_pgm_dir.as_deref(),
        result: ResultManifest {
            iterations: report.iterations,
            converged: report.converged,
            primal_rel: res.primal_rel,
            dual_rel: res.dual_rel,
            objective: final_objective,
        },
    };
    let manifest_path = args.manifest.clone().unwrap_or_else(|| {
        let mut p = args.out_labels.clone().into_os_string();
        p.push(".manifest.json");
        PathBuf::from(p)
    });
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(&manifest_path, text).map_err(|e| Error::Io {
        path: manifest_path.clone(),
        source: e,
    })?;

    println!(
        "iterations {} converged {} primal {:.3e} dual {:.3e}",
        report.iterations, report.converged, res.primal_rel, res.dual_rel
    );
    Ok(())
}

fn write_channels(dir: &Path, field: &HiddenField) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    for k in 0..field.classes() {
        let path = dir.join(format!("class_{:02}.pgm", k + 1));
        hsio::write_image(&path, &hsio::render_field_channel(field, k)?)?;
    }
    Ok(())
}

fn evaluate_cmd(args: EvaluateArgs) -> Result<(), Error> {
    let pred_entries = read_entries(&args.pred)?;
    let grid = grid_of(&pred_entries)?;
    let pred = hsio::label_map_from_entries(grid, &pred_entries)?;
    let truth = hsio::read_labels(&args.truth, grid)?;
    let exclude = match (&args.exclude, args.include_train) {
        (Some(path), false) => {
            let map = hsio::read_labels(path, grid)?;
            (0..grid.len()).filter(|&i| map.labels()[i] != 0).collect()
        }
        _ => Vec::new(),
    };
    let acc = hsio::overall_accuracy(&pred, &truth, &exclude)?;
    println!("{:.2}", 100.0 * acc);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Synth(args) => synth_cmd(args),
        Command::Train(args) => train_cmd(args),
        Command::Predict(args) => predict_cmd(args),
        Command::Segment(args) => segment_cmd(args, cli.threads),
        Command::Evaluate(args) => evaluate_cmd(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
