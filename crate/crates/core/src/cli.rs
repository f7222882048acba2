//! The `calip` command-line tool.
//!
//! Every subcommand validates its input and output paths before doing any
//! numeric work, writes only to paths named by its flags, and exits with
//! `0` on success, `1` when a gradient check fails, and `2` on any usage,
//! parameter, protocol or file-format error.
//!
//! `CALIP_THREADS` sets the size of the worker pool.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::attention::{CalipHyper, LogitTerms};
use crate::error::{CalipError, Result};
use crate::eval::{
    check_protocol_shots, evaluate_fewshot, evaluate_zeroshot, parse_grid_spec, presets, sample_split, sweep,
    SweepMode,
};
use crate::parametric::{grad_check, fs_train, ProjectionMask, TrainConfig};
use crate::store::{load_bundle, load_weights, save_weights, WeightsFile};

#[derive(Debug, Parser)]
#[command(name = "calip", version, about = "Cross-modal attention over pre-extracted CLIP features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Zero-shot classification of a feature bundle.
    Zeroshot(ZeroshotArgs),
    /// Train few-shot projections on a seeded split of a bundle.
    Train(TrainArgs),
    /// Grid-search the fusion weights and attention temperatures.
    Sweep(SweepArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Print the header and sanity statistics of a bundle.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
struct ZeroshotArgs {
    #[arg(long, value_name = "PATH")]
    features: PathBuf,
    /// Start from a dataset's published weights; explicit flags still win.
    #[arg(long, value_name = "DATASET")]
    preset: Option<String>,
    #[arg(long, allow_negative_numbers = true, value_name = "F")]
    alpha_t: Option<f32>,
    #[arg(long, allow_negative_numbers = true, value_name = "F")]
    alpha_s: Option<f32>,
    #[arg(long, allow_negative_numbers = true, value_name = "F")]
    beta1: Option<f32>,
    #[arg(long, allow_negative_numbers = true, value_name = "F")]
    beta2: Option<f32>,
    #[arg(long, allow_negative_numbers = true, value_name = "F")]
    beta3: Option<f32>,
    /// Logit terms to fuse, e.g. `123` or `1,4`.
    #[arg(long, default_value = "123", value_name = "TERMS")]
    mask: String,
    /// Write the report as one JSON line.
    #[arg(long, value_name = "PATH")]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, value_name = "PATH")]
    features: PathBuf,
    #[arg(long, default_value_t = 16)]
    shots: usize,
    /// Accept shot counts outside 1, 2, 4, 8, 16.
    #[arg(long)]
    allow_any_shots: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, allow_negative_numbers = true, default_value_t = 2e-3)]
    lr: f32,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, value_name = "DATASET")]
    preset: Option<String>,
    #[arg(long, allow_negative_numbers = true, value_name = "F")]
    beta2: Option<f32>,
    #[arg(long, allow_negative_numbers = true, value_name = "F")]
    beta3: Option<f32>,
    #[arg(long, value_name = "WEIGHTS")]
    out: PathBuf,
    #[arg(long, value_name = "PATH")]
    report: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Zeroshot,
    Fewshot,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long, value_name = "PATH")]
    train: PathBuf,
    /// Bundle to score on. Without it the training bundle is scored.
    #[arg(long, value_name = "PATH")]
    val: Option<PathBuf>,
    /// e.g. `beta2=0.08:0.02:0.18,beta3=0.1|0.2,alpha_t=2,alpha_s=2`
    #[arg(long, value_name = "SPEC")]
    grid: String,
    #[arg(long, value_enum, default_value = "zeroshot")]
    mode: ModeArg,
    /// Trained projections, required in few-shot mode.
    #[arg(long, value_name = "WEIGHTS")]
    weights: Option<PathBuf>,
    /// Write the full grid table here instead of stdout.
    #[arg(long, value_name = "PATH")]
    table: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "4x3x8", value_name = "HWxKxC")]
    dims: String,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[arg(long, value_name = "PATH")]
    features: PathBuf,
}

/// Parses `std::env::args` and runs the selected subcommand.
pub fn run() -> i32 {
    run_from(std::env::args_os())
}

/// Runs the tool on an explicit argument list (the first item is the
/// program name) and returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    configure_threads();
    let outcome = match cli.command {
        Command::Zeroshot(a) => cmd_zeroshot(a),
        Command::Train(a) => cmd_train(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Inspect(a) => cmd_inspect(a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", flag_names(e));
            2
        }
    }
}

fn configure_threads() {
    if let Some(n) = std::env::var("CALIP_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// Renders parameter names the way they are spelled on the command line.
fn flag_names(e: CalipError) -> CalipError {
    match e {
        CalipError::Parameter { name, reason } if name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') => {
            CalipError::Parameter {
                name: format!("--{}", name.replace('_', "-")),
                reason,
            }
        }
        other => other,
    }
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CalipError::NotFound(path.to_path_buf()))
    }
}

fn require_writable(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() && !dir.is_dir() => Err(CalipError::NotFound(dir.to_path_buf())),
        _ => Ok(()),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| CalipError::io(path, e))
}

fn cmd_zeroshot(a: ZeroshotArgs) -> Result<i32> {
    require_file(&a.features)?;
    if let Some(p) = &a.report {
        require_writable(p)?;
    }
    let base = match &a.preset {
        Some(name) => presets::preset(name)?.zeroshot_hyper(),
        None => CalipHyper::default(),
    };
    let hyper = CalipHyper::new(
        a.alpha_t.unwrap_or(base.alpha_t),
        a.alpha_s.unwrap_or(base.alpha_s),
        a.beta1.unwrap_or(base.beta1),
        a.beta2.unwrap_or(base.beta2),
        a.beta3.unwrap_or(base.beta3),
    )?;
    let terms: LogitTerms = a.mask.parse()?;
    let bundle = load_bundle(&a.features)?;
    let report = evaluate_zeroshot(&bundle, &hyper, &terms)?;
    println!(
        "accuracy: {:.2}% ({}/{}) terms {} alpha=({}, {}) beta=({}, {}, {})",
        report.accuracy,
        report.n_correct,
        report.n_total,
        report.terms,
        hyper.alpha_t,
        hyper.alpha_s,
        hyper.beta1,
        hyper.beta2,
        hyper.beta3
    );
    if let Some(p) = &a.report {
        write_file(p, &(report.to_json_line() + "\n"))?;
    }
    Ok(0)
}

fn cmd_train(a: TrainArgs) -> Result<i32> {
    require_file(&a.features)?;
    require_writable(&a.out)?;
    if let Some(p) = &a.report {
        require_writable(p)?;
    }
    if !a.allow_any_shots {
        check_protocol_shots(a.shots)?;
    }
    let base = match &a.preset {
        Some(name) => presets::preset(name)?.fewshot_hyper(),
        None => CalipHyper::default(),
    };
    let hyper = CalipHyper::new(
        base.alpha_t,
        base.alpha_s,
        1.0,
        a.beta2.unwrap_or(base.beta2),
        a.beta3.unwrap_or(base.beta3),
    )?;
    let epochs = u32::try_from(a.epochs).map_err(|_| CalipError::param("epochs", "does not fit in u32"))?;
    let config = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        seed: a.seed,
        hyper,
        ..TrainConfig::default()
    };
    config.validate()?;

    let bundle = load_bundle(&a.features)?;
    let split = sample_split(&bundle, a.shots, a.seed)?;
    let train = split.train_bundle(&bundle)?;
    let outcome = fs_train(&train, &config)?;
    save_weights(
        &WeightsFile {
            params: outcome.params.clone(),
            seed: a.seed,
            epochs,
            lr: a.lr,
        },
        &a.out,
    )?;

    let trace = &outcome.loss_trace;
    let min = trace.iter().copied().fold(f64::INFINITY, f64::min);
    println!("trained {} images ({} shots x {} classes), seed {}", train.len(), a.shots, train.num_classes(), a.seed);
    println!(
        "loss: initial {:.6} final {:.6} (epoch means: first {:.6} min {:.6} last {:.6})",
        outcome.initial_loss,
        outcome.final_loss,
        trace.first().copied().unwrap_or(f64::NAN),
        min,
        trace.last().copied().unwrap_or(f64::NAN)
    );
    println!("final train accuracy: {:.2}%", outcome.train_accuracy);
    let val = split.val_bundle(&bundle)?;
    let mut report = None;
    if !val.is_empty() {
        let mut r = evaluate_fewshot(&val, &outcome.params, &hyper, &LogitTerms::default(), ProjectionMask::ALL)?;
        r.seed = Some(a.seed);
        println!("validation accuracy: {:.2}% ({}/{})", r.accuracy, r.n_correct, r.n_total);
        report = Some(r);
    }
    println!("weights: {}", a.out.display());
    if let (Some(p), Some(r)) = (&a.report, report) {
        write_file(p, &(r.to_json_line() + "\n"))?;
    }
    Ok(0)
}

fn cmd_sweep(a: SweepArgs) -> Result<i32> {
    require_file(&a.train)?;
    if let Some(v) = &a.val {
        require_file(v)?;
    }
    if let Some(w) = &a.weights {
        require_file(w)?;
    }
    if let Some(t) = &a.table {
        require_writable(t)?;
    }
    let grid = parse_grid_spec(&a.grid)?;
    let mode = match a.mode {
        ModeArg::Zeroshot => SweepMode::ZeroShot,
        ModeArg::Fewshot => {
            let Some(w) = &a.weights else {
                return Err(CalipError::param("weights", "is required with --mode fewshot"));
            };
            SweepMode::FewShot {
                params: load_weights(w)?.params,
                mask: ProjectionMask::ALL,
            }
        }
    };
    let bundle = match &a.val {
        Some(v) => load_bundle(v)?,
        None => load_bundle(&a.train)?,
    };
    let result = sweep(&bundle, &grid, &mode)?;
    let b = result.best;
    println!(
        "best: beta2={} beta3={} alpha_t={} alpha_s={} accuracy {:.2}% ({}/{}) over {} grid points",
        b.hyper.beta2,
        b.hyper.beta3,
        b.hyper.alpha_t,
        b.hyper.alpha_s,
        b.accuracy,
        b.n_correct,
        result.n_total,
        result.rows.len()
    );
    match &a.table {
        Some(t) => {
            write_file(t, &result.to_table())?;
            println!("table: {}", t.display());
        }
        None => print!("{}", result.to_table()),
    }
    Ok(0)
}

fn parse_dims(s: &str) -> Result<(usize, usize, usize)> {
    let parts: Vec<&str> = s.split('x').collect();
    let bad = || CalipError::param("dims", format!("expected HWxKxC with positive integers, got {s:?}"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let mut v = [0usize; 3];
    for (slot, p) in v.iter_mut().zip(&parts) {
        *slot = p.trim().parse().map_err(|_| bad())?;
        if *slot == 0 {
            return Err(bad());
        }
    }
    Ok((v[0], v[1], v[2]))
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<i32> {
    let dims = parse_dims(&a.dims)?;
    let report = grad_check(a.seed, dims)?;
    println!("{report}");
    Ok(if report.pass { 0 } else { 1 })
}

fn cmd_inspect(a: InspectArgs) -> Result<i32> {
    require_file(&a.features)?;
    let bundle = load_bundle(&a.features)?;
    let d = bundle.dims();
    println!("classes: {}", d.classes);
    println!("channels: {}", d.channels);
    println!("spatial: {}x{}", d.h, d.w);
    println!("images: {}", d.images);
    let names = bundle.class_names();
    let counts = bundle.indices_by_class();
    for (name, idx) in names.iter().zip(&counts) {
        println!("  {name}: {} images", idx.len());
    }
    let text_norms = bundle.text().row_norms();
    let (lo, hi) = min_max(&text_norms);
    println!("text norms: min {lo:.6} max {hi:.6}");
    if !bundle.is_empty() {
        let norms: Vec<f64> = bundle
            .images()
            .iter()
            .flat_map(|img| img.spatial.to_pixels().row_norms())
            .collect();
        let (lo, hi) = min_max(&norms);
        let mean = norms.iter().sum::<f64>() / norms.len() as f64;
        println!("pixel norms: min {lo:.6} mean {mean:.6} max {hi:.6}");
    }
    let non_finite = bundle.text().data().iter().filter(|v| !v.is_finite()).count()
        + bundle
            .images()
            .iter()
            .map(|img| img.spatial.data().iter().filter(|v| !v.is_finite()).count())
            .sum::<usize>();
    println!("non-finite values: {non_finite}");
    println!("checksum: {:016x}", bundle.checksum());
    Ok(0)
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dims_parse() {
        assert_eq!(parse_dims("4x3x8").unwrap(), (4, 3, 8));
        assert!(parse_dims("4x3").is_err());
        assert!(parse_dims("0x3x8").is_err());
        assert!(parse_dims("ax3x8").is_err());
    }

    #[test]
    fn parameter_errors_name_the_flag() {
        let e = flag_names(CalipError::param("alpha_t", "must be > 0"));
        assert!(e.to_string().contains("--alpha-t"), "{e}");
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
