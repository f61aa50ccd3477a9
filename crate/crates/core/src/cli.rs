//! Command-line front end: `train`, `predict`, `verify` and `scaling-probe`.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{self, BoxScaler, Dataset, Metrics, OodPolicy, TargetStats};
use crate::error::{Error, Result};
use crate::model::{BezierGpModel, TrainingSet};
use crate::trainer::{train, FitReport, TrainConfig};
use crate::verify;

/// Exit status when every step succeeded.
pub const EXIT_OK: i32 = 0;
/// Exit status of `verify` when at least one check failed.
pub const EXIT_VERIFY_FAILED: i32 = 6;

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  2  invalid command line
  3  configuration error (order out of range, non-positive prior scale, bad domain or argument)
  4  data or file error (parse failure, missing column, schema mismatch, unreadable model file)
  5  numerical failure (singular system, non-finite gradient, non-positive-definite covariance)
  6  verify found a failing check";

#[derive(Debug, Parser)]
#[command(name = "bezier-gp", version, about = "Bézier Gaussian process regression", after_help = EXIT_CODES)]
pub struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model to a delimited data file or the synthetic 1-D set.
    Train(TrainArgs),
    /// Predict with a saved model.
    Predict(PredictArgs),
    /// Run the built-in oracle checks.
    Verify(VerifyArgs),
    /// Time one forward and backward pass for several input dimensions.
    ScalingProbe(ProbeArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Comma or tab delimited file with a header row.
    #[arg(long, required_unless_present = "synth1d", conflicts_with = "synth1d")]
    pub data: Option<PathBuf>,
    /// Name of the response column.
    #[arg(long, default_value = "y")]
    pub target: String,
    /// Use the two-cluster sine data set on [0, 1].
    #[arg(long)]
    pub synth1d: bool,
    /// Polynomial order per input dimension, or one value for all of them.
    #[arg(long, default_value = "10")]
    pub order: String,
    /// Number of permuted buttresses in the ensemble.
    #[arg(long, default_value_t = 1)]
    pub r: usize,
    #[arg(long, default_value_t = 500)]
    pub batch: usize,
    #[arg(long, default_value_t = 10_000)]
    pub phase1_iters: usize,
    #[arg(long, default_value_t = 10_000)]
    pub phase2_iters: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr1: f64,
    #[arg(long, default_value_t = 1e-2)]
    pub lr2: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fraction of rows used for training; the rest is held out for testing.
    #[arg(long)]
    pub split_ratio: Option<f64>,
    /// Widen the fitted input box by this fraction of the range on each side.
    #[arg(long, default_value_t = 0.0)]
    pub margin: f64,
    /// Handling of test inputs outside the input box: discard, clamp or evaluate.
    #[arg(long, default_value = "discard")]
    pub ood: OodPolicy,
    #[arg(long, default_value_t = 50)]
    pub eval_every: usize,
    #[arg(long, default_value = "model.json")]
    pub model_out: PathBuf,
    /// Fit report (JSON); defaults to the model path with a `.report.json` suffix.
    #[arg(long)]
    pub report_out: Option<PathBuf>,
    /// Write posterior mean and ±2 standard deviation bands on a grid (1-D inputs only).
    #[arg(long)]
    pub plot: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model_in: PathBuf,
    /// Input rows; columns are matched to the model's feature names, else by position.
    #[arg(long)]
    pub data: PathBuf,
    /// Output table; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Override the out-of-domain policy stored in the model.
    #[arg(long)]
    pub ood: Option<OodPolicy>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Restrict to inputs of dimension at most 2 and fewer configurations.
    #[arg(long)]
    pub quick: bool,
    /// Also check that this model file loads.
    #[arg(long)]
    pub model_in: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long, default_value = "4,8,16")]
    pub dims: String,
    #[arg(long, default_value_t = 5)]
    pub order: usize,
    #[arg(long, default_value_t = 5)]
    pub r: usize,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// Timed repetitions per dimension; the fastest is reported.
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Executes a parsed command line and returns the process exit status.
pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Train(a) => cmd_train(&a).map(|_| EXIT_OK),
        Command::Predict(a) => cmd_predict(&a).map(|_| EXIT_OK),
        Command::Verify(a) => Ok(cmd_verify(&a)),
        Command::ScalingProbe(a) => {
            let dims = parse_usize_list(&a.dims)?;
            let rows = scaling_probe(&dims, a.order, a.r, a.n, a.reps, a.seed)?;
            println!("d,seconds");
            for row in &rows {
                println!("{},{:.6e}", row.dim, row.seconds);
            }
            for w in rows.windows(2) {
                println!("# time(d={})/time(d={}) = {:.3}", w[1].dim, w[0].dim, w[1].seconds / w[0].seconds);
            }
            Ok(EXIT_OK)
        }
    }
}

fn parse_usize_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| Error::InvalidArgument(format!("expected a non-negative integer, got {t:?}")))
        })
        .collect()
}

/// Per-dimension orders: a comma list of length `d`, or a single value broadcast to `d`.
pub fn parse_orders(s: &str, d: usize) -> Result<Vec<usize>> {
    let v = parse_usize_list(s)?;
    match v.len() {
        1 => Ok(vec![v[0]; d]),
        n if n == d => Ok(v),
        n => Err(Error::SchemaMismatch { expected: d, got: n }),
    }
}

fn check_output_dir(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() && !dir.is_dir() => Err(Error::io(
            dir,
            io::Error::new(io::ErrorKind::NotFound, "output directory does not exist"),
        )),
        _ => Ok(()),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub fit: FitReport,
    pub n_train: usize,
    pub n_test: usize,
    pub train_rmse: f64,
    pub train_mean_loglik: f64,
    pub test_rmse: Option<f64>,
    pub test_mean_loglik: Option<f64>,
    pub test_discarded: usize,
    pub test_flagged: usize,
}

fn evaluate(model: &BezierGpModel, rows: &[Vec<f64>], y: &[f64]) -> Result<Metrics> {
    let preds: Vec<_> = rows.iter().map(|u| model.predict_y_unit(u)).collect();
    data::metrics(&preds, y)
}

pub fn cmd_train(a: &TrainArgs) -> Result<TrainSummary> {
    if let Some(p) = &a.data {
        if !p.is_file() {
            return Err(Error::io(p, io::Error::new(io::ErrorKind::NotFound, "data file not found")));
        }
    }
    let report_out = a
        .report_out
        .clone()
        .unwrap_or_else(|| a.model_out.with_extension("report.json"));
    for p in [Some(&a.model_out), Some(&report_out), a.plot.as_ref()].into_iter().flatten() {
        check_output_dir(p)?;
    }

    let dataset = match &a.data {
        Some(p) => data::load_csv(p, &a.target)?,
        None => data::gen_synthetic_1d(a.seed),
    };
    dataset.validate()?;
    let orders = parse_orders(&a.order, dataset.d())?;
    if a.plot.is_some() && dataset.d() != 1 {
        return Err(Error::InvalidArgument("--plot needs one input dimension".into()));
    }
    let config = TrainConfig {
        batch_size: a.batch,
        phase1_iters: a.phase1_iters,
        phase2_iters: a.phase2_iters,
        lr1: a.lr1,
        lr2: a.lr2,
        seed: a.seed,
        eval_every: a.eval_every,
        ..TrainConfig::default()
    };
    config.validate()?;

    let (train_set, test_set): (Dataset, Option<Dataset>) = match a.split_ratio {
        Some(ratio) => {
            let (tr, te) = data::split(&dataset, ratio, a.seed)?;
            (tr, Some(te))
        }
        None => (dataset, None),
    };
    let scaler = if a.synth1d {
        BoxScaler::new(vec![(0.0, 1.0)])?
    } else {
        BoxScaler::fit(&train_set.x, a.margin)?
    };
    let stats = TargetStats::fit(&train_set.y)?;
    let mut model = BezierGpModel::new(&orders, a.r, scaler.clone(), a.seed)?;
    model.set_target_stats(stats);
    model.set_ood_policy(a.ood);
    model.set_feature_names(train_set.feature_names.clone())?;
    model.set_target_name(train_set.target_name.clone());

    let unit = scaler.apply(&train_set.x, OodPolicy::Clamp)?;
    let ys: Vec<f64> = train_set.y.iter().map(|&y| stats.standardize(y)).collect();
    let training = TrainingSet::new(unit.rows, ys)?;
    info!(
        "training on {} rows, orders {:?}, {} buttresses, {} variational parameters",
        training.len(),
        orders,
        a.r,
        model.num_variational_params()
    );
    let fit = train(&mut model, &training, &config)?;

    let train_metrics = evaluate(&model, &training.x, &train_set.y)?;
    println!(
        "train: n={} rmse={:.6} mean_loglik={:.6}",
        training.len(),
        train_metrics.rmse,
        train_metrics.mean_loglik
    );
    let mut summary = TrainSummary {
        n_train: training.len(),
        n_test: 0,
        train_rmse: train_metrics.rmse,
        train_mean_loglik: train_metrics.mean_loglik,
        test_rmse: None,
        test_mean_loglik: None,
        test_discarded: 0,
        test_flagged: 0,
        fit,
    };
    if let Some(test) = &test_set {
        let scaled = scaler.apply(&test.x, a.ood)?;
        summary.test_discarded = scaled.discarded;
        summary.test_flagged = scaled.flagged;
        if scaled.discarded > 0 {
            warn!("{} test rows outside the input box were discarded", scaled.discarded);
        }
        let y: Vec<f64> = scaled.kept.iter().map(|&i| test.y[i]).collect();
        summary.n_test = y.len();
        if !y.is_empty() {
            let m = evaluate(&model, &scaled.rows, &y)?;
            summary.test_rmse = Some(m.rmse);
            summary.test_mean_loglik = Some(m.mean_loglik);
            println!(
                "test: n={} rmse={:.6} mean_loglik={:.6} discarded={} flagged={}",
                y.len(),
                m.rmse,
                m.mean_loglik,
                scaled.discarded,
                scaled.flagged
            );
        }
    }
    println!("noise variance (standardized units): {:.6e}", model.noise_var());

    model.save(&a.model_out)?;
    let mut w = create(&report_out)?;
    serde_json::to_writer_pretty(&mut w, &summary).map_err(|e| Error::io(&report_out, e.into()))?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| Error::io(&report_out, e))?;
    if let Some(p) = &a.plot {
        write_plot(&model, create(p)?, 201)?;
    }
    Ok(summary)
}

/// Grid table `x,mean,lower,upper,f_var,y_var` across the model's 1-D box.
pub fn write_plot<W: Write>(model: &BezierGpModel, out: W, points: usize) -> Result<()> {
    let (lo, hi) = model.domain().bounds[0];
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["x", "mean", "lower", "upper", "f_var", "y_var"])?;
    for k in 0..points {
        let t = k as f64 / (points - 1).max(1) as f64;
        let p = model.predict_y_unit(&[t]);
        let band = 2.0 * p.f_var.sqrt();
        w.write_record(
            [lo + t * (hi - lo), p.mean, p.mean - band, p.mean + band, p.f_var, p.y_var].map(|v| v.to_string()),
        )?;
    }
    w.flush().map_err(|e| Error::io("<plot>", e))?;
    Ok(())
}

/// Predicts every row of `a.data`; returns `(kept rows, discarded count)`.
pub fn cmd_predict(a: &PredictArgs) -> Result<(usize, usize)> {
    let model = BezierGpModel::load(&a.model_in)?;
    let (header, rows) = data::read_table(&a.data)?;
    let out: Box<dyn Write> = match &a.out {
        Some(p) => {
            check_output_dir(p)?;
            Box::new(create(p)?)
        }
        None => Box::new(io::stdout().lock()),
    };
    if rows.is_empty() {
        data::write_predictions(out, &[], &[])?;
        eprintln!("predict: 0 rows");
        return Ok((0, 0));
    }
    let names = model.feature_names();
    let cols: Vec<usize> = match names
        .iter()
        .map(|n| header.iter().position(|h| h == n))
        .collect::<Option<Vec<_>>>()
    {
        Some(c) => c,
        None => {
            // Fall back to position, ignoring a column named like the training target.
            let rest: Vec<usize> = (0..header.len()).filter(|&i| header[i] != model.target_name()).collect();
            if rest.len() != model.dim() {
                return Err(Error::SchemaMismatch {
                    expected: model.dim(),
                    got: rest.len(),
                });
            }
            rest
        }
    };
    let x: Vec<Vec<f64>> = rows.iter().map(|r| cols.iter().map(|&c| r[c]).collect()).collect();
    let policy = a.ood.unwrap_or(model.ood_policy());
    let scaled = model.domain().apply(&x, policy)?;
    let preds: Vec<_> = scaled.rows.iter().map(|u| model.predict_y_unit(u)).collect();
    data::write_predictions(out, &scaled.kept, &preds)?;
    eprintln!(
        "predict: {} rows, {} predicted, {} outside the input box discarded, {} flagged (policy {policy})",
        x.len(),
        preds.len(),
        scaled.discarded,
        scaled.flagged
    );
    Ok((preds.len(), scaled.discarded))
}

pub fn cmd_verify(a: &VerifyArgs) -> i32 {
    let start = Instant::now();
    // Random configurations routinely ask for more members than orderings.
    let level = log::max_level();
    log::set_max_level(log::LevelFilter::Error);
    let mut results = verify::run_checks(a.seed, a.quick);
    log::set_max_level(level);
    if let Some(p) = &a.model_in {
        results.push(match BezierGpModel::load(p) {
            Ok(m) => verify::CheckOutcome {
                name: "model file loads",
                passed: true,
                detail: format!("{} inputs, {} buttresses", m.dim(), m.ensemble_size()),
            },
            Err(e) => verify::CheckOutcome {
                name: "model file loads",
                passed: false,
                detail: e.to_string(),
            },
        });
    }
    for r in &results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!(
        "{} checks, {} failed, {:.2}s",
        results.len(),
        failed,
        start.elapsed().as_secs_f64()
    );
    if failed == 0 {
        EXIT_OK
    } else {
        EXIT_VERIFY_FAILED
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeRow {
    pub dim: usize,
    pub seconds: f64,
}

/// Fastest of `reps` timings of one forward and backward pass over `n`
/// random points, for each input dimension in `dims`.
pub fn scaling_probe(dims: &[usize], order: usize, r: usize, n: usize, reps: usize, seed: u64) -> Result<Vec<ProbeRow>> {
    if n == 0 {
        return Err(Error::EmptyData);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    dims.iter()
        .map(|&d| {
            let model = BezierGpModel::new(&vec![order; d], r, BoxScaler::new(vec![(0.0, 1.0); d])?, seed)?;
            let data = verify::random_regression_data(&mut rng, n, d)?;
            let idx = data.all_indices();
            model.neg_elbo_gradients(&data, &idx, n)?;
            let mut best = f64::INFINITY;
            for _ in 0..reps.max(1) {
                let t = Instant::now();
                let out = model.neg_elbo_gradients(&data, &idx, n)?;
                best = best.min(t.elapsed().as_secs_f64());
                std::hint::black_box(out);
            }
            Ok(ProbeRow { dim: d, seconds: best })
        })
        .collect()
}
