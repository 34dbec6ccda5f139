//! `treelet`: fit adaptive multi-scale orthonormal bases to CSV data,
//! project data through them, select heights by cross-validation, bootstrap
//! loading bands, sample synthetic models, and run the built-in
//! experiments. Every output file gets a sibling manifest that pins the
//! command, configuration, seed, and input digests.

mod error;
mod io;
mod manifest;

use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use serde_json::json;

use treelets::engine::{fit, AngleMode, Coefficients, EngineConfig, Height, TreeletModel};
use treelets::matrix::SimilarityConfig;
use treelets::models::{
    convergence_experiment, example1, example2, example3, example3_extended, sample_block,
    sample_mixture, BlockModelSpec, ConvergenceConfig,
};
use treelets::select::best_k_basis;
use treelets::supervised::{figure4_experiment, Figure4Config};
use treelets::boot::{confidence_set_loadings, BootstrapConfig};

use error::{CliError, Result};
use io::{
    float_cell, read_matrix, write_atomic, write_matrix, write_rows, CsvOptions, TargetKind,
};
use manifest::RunManifest;

#[derive(Parser)]
#[command(
    name = "treelet",
    version,
    about = "Adaptive multi-scale orthonormal bases for unordered data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a rotation tree to a CSV matrix and save it as JSON.
    Fit(FitArgs),
    /// Project rows into a fitted basis, or reconstruct rows from
    /// coefficients.
    Transform(TransformArgs),
    /// Cross-validate the height whose top-K basis captures the most
    /// held-out energy.
    BestBasis(BestBasisArgs),
    /// Bootstrap confidence bands for the highest-variance loadings.
    Bootstrap(BootstrapArgs),
    /// Sample a synthetic dataset from a covariance model.
    Synth(SynthArgs),
    /// Run a built-in experiment and write its table.
    Bench(BenchArgs),
}

/// Options shared by every command that reads a CSV table.
#[derive(Args)]
struct CsvFlags {
    /// Treat the first input row as a header.
    #[arg(long)]
    header: bool,
    /// Field delimiter of the input table.
    #[arg(long, default_value = ",")]
    delimiter: char,
    /// Split the last column off as a target of this kind; the matrix
    /// commands validate and then ignore it.
    #[arg(long, value_enum)]
    target: Option<TargetArg>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TargetArg {
    /// Integer class ids.
    Class,
    /// Real-valued response.
    Response,
}

impl CsvFlags {
    fn options(&self) -> Result<CsvOptions> {
        if !self.delimiter.is_ascii() {
            return Err(CliError::Usage(format!(
                "delimiter must be a single ASCII character, got '{}'",
                self.delimiter
            )));
        }
        Ok(CsvOptions {
            header: self.header,
            delimiter: self.delimiter as u8,
            target: self.target.map(|t| match t {
                TargetArg::Class => TargetKind::Class,
                TargetArg::Response => TargetKind::Response,
            }),
        })
    }

    fn describe(&self) -> serde_json::Value {
        json!({
            "header": self.header,
            "delimiter": self.delimiter.to_string(),
            "target": self.target.map(|t| match t {
                TargetArg::Class => "class",
                TargetArg::Response => "response",
            }),
        })
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SimilarityArg {
    /// Signed Pearson correlation.
    Corr,
    /// Absolute Pearson correlation.
    Abscorr,
    /// Absolute correlation plus a weighted absolute covariance.
    #[value(name = "corr+cov")]
    CorrCov,
}

#[derive(Args)]
struct FitArgs {
    /// Input CSV matrix (rows are observations).
    #[arg(long)]
    input: PathBuf,
    /// Output path for the model JSON.
    #[arg(long)]
    out: PathBuf,
    /// Stop after exactly this many merges.
    #[arg(long, conflicts_with = "full")]
    level: Option<usize>,
    /// Merge until no pairable variables remain (the default).
    #[arg(long)]
    full: bool,
    /// Pair-selection similarity.
    #[arg(long, value_enum, default_value_t = SimilarityArg::Corr)]
    similarity: SimilarityArg,
    /// Covariance weight; requires --similarity corr+cov.
    #[arg(long)]
    lambda: Option<f64>,
    /// Rotate every selected pair by the fixed angle pi/4.
    #[arg(long)]
    haar: bool,
    #[command(flatten)]
    csv: CsvFlags,
}

#[derive(Args)]
struct TransformArgs {
    /// Fitted model JSON.
    #[arg(long)]
    model: PathBuf,
    /// Input CSV: data rows, or coefficient rows with --inverse.
    #[arg(long)]
    input: PathBuf,
    /// Tree height of the basis.
    #[arg(long)]
    level: usize,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
    /// Reconstruct data rows from coefficient rows.
    #[arg(long)]
    inverse: bool,
    #[command(flatten)]
    csv: CsvFlags,
}

#[derive(Args)]
struct BestBasisArgs {
    /// Input CSV matrix.
    #[arg(long)]
    input: PathBuf,
    /// Dimension of the target basis.
    #[arg(long)]
    k: usize,
    /// Number of cross-validation folds.
    #[arg(long)]
    folds: usize,
    /// Seed for the fold assignment.
    #[arg(long)]
    seed: u64,
    /// Output CSV path for the score curve.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    csv: CsvFlags,
}

#[derive(Args)]
struct BootstrapArgs {
    /// Input CSV matrix.
    #[arg(long)]
    input: PathBuf,
    /// Number of bootstrap replicates.
    #[arg(long)]
    replicates: usize,
    /// Miscoverage level of the confidence set.
    #[arg(long)]
    alpha: f64,
    /// Tree height at which loadings are compared.
    #[arg(long)]
    level: usize,
    /// Number of top-variance loadings to band.
    #[arg(long)]
    top_k: usize,
    /// Seed for the resampling streams.
    #[arg(long)]
    seed: u64,
    /// Output CSV path for the bands.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    csv: CsvFlags,
}

#[derive(Args)]
struct SynthArgs {
    #[command(subcommand)]
    model: SynthModel,
}

#[derive(Args)]
struct SynthCommon {
    /// Number of rows to sample.
    #[arg(long)]
    n: usize,
    /// Sampling seed.
    #[arg(long)]
    seed: u64,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum SynthModel {
    /// Block covariance model described by a JSON spec file.
    Block {
        /// Path to the spec JSON.
        #[arg(long)]
        spec: PathBuf,
        #[command(flatten)]
        common: SynthCommon,
    },
    /// Three noisy blocks of sizes 4, 4, 2 plus two pure-noise variables.
    Example1 {
        #[command(flatten)]
        common: SynthCommon,
    },
    /// Ten variables carrying three dependent block factors.
    Example2 {
        #[command(flatten)]
        common: SynthCommon,
    },
    /// Five hundred variables: three overlapping block factors, half noise.
    Example3 {
        #[command(flatten)]
        common: SynthCommon,
    },
}

#[derive(Args)]
struct BenchArgs {
    #[command(subcommand)]
    experiment: BenchKind,
}

#[derive(Args)]
struct BenchCommon {
    /// Master seed for all replicates.
    #[arg(long)]
    seed: u64,
    /// Output CSV path for the result table.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum BenchKind {
    /// Fraction of replicates whose top scaling vectors recover the true
    /// blocks, across a (p, n) grid.
    Convergence {
        /// Comma-separated list of dimensions.
        #[arg(long, value_delimiter = ',', required = true)]
        p_grid: Vec<usize>,
        /// Comma-separated list of sample sizes, ascending.
        #[arg(long, value_delimiter = ',', required = true)]
        n_grid: Vec<usize>,
        /// Replicates per grid cell.
        #[arg(long)]
        reps: usize,
        /// Number of equal blocks.
        #[arg(long, default_value_t = 4)]
        blocks: usize,
        /// Within-block covariance.
        #[arg(long, default_value_t = 1.0)]
        within: f64,
        /// Between-block covariance.
        #[arg(long, default_value_t = 0.3)]
        between: f64,
        /// Additive noise standard deviation.
        #[arg(long, default_value_t = 1.0)]
        noise_sd: f64,
        /// Success fraction defining the required sample size.
        #[arg(long, default_value_t = 0.9)]
        threshold: f64,
        #[command(flatten)]
        common: BenchCommon,
    },
    /// Four-arm wide-regression benchmark on the overlapping-block mixture
    /// with 1500 extra noise variables.
    Figure4 {
        /// Number of replicates.
        #[arg(long)]
        reps: usize,
        /// Training rows per replicate.
        #[arg(long, default_value_t = 100)]
        train_n: usize,
        /// Test rows per replicate.
        #[arg(long, default_value_t = 500)]
        test_n: usize,
        /// Variables kept by the correlation-screening arm.
        #[arg(long, default_value_t = 50)]
        variables: usize,
        /// Tree features kept by the transform arm.
        #[arg(long, default_value_t = 50)]
        features: usize,
        /// Largest latent dimension tried.
        #[arg(long, default_value_t = 15)]
        max_components: usize,
        /// Spacing of the first height scan.
        #[arg(long, default_value_t = 25)]
        coarse_step: usize,
        #[command(flatten)]
        common: BenchCommon,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                std::process::exit(0);
            }
            let line = e
                .to_string()
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("invalid arguments")
                .to_string();
            let line = line.strip_prefix("error: ").unwrap_or(&line).to_string();
            eprintln!("error: {line}");
            std::process::exit(2);
        }
    };
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        std::process::exit(2);
    }
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

/// Applies the TREELET_THREADS cap before any parallel work starts.
fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var("TREELET_THREADS") else {
        return Ok(());
    };
    let threads = usize::from_str(raw.trim()).ok().filter(|&t| t >= 1);
    let Some(threads) = threads else {
        return Err(CliError::Usage(format!(
            "TREELET_THREADS must be a positive integer, got '{raw}'"
        )));
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Fit(args) => run_fit(args),
        Command::Transform(args) => run_transform(args),
        Command::BestBasis(args) => run_best_basis(args),
        Command::Bootstrap(args) => run_bootstrap(args),
        Command::Synth(args) => run_synth(args),
        Command::Bench(args) => run_bench(args),
    }
}

fn engine_config(args: &FitArgs) -> Result<EngineConfig> {
    let similarity = match (args.similarity, args.lambda) {
        (SimilarityArg::Corr, None) => SimilarityConfig::SignedCorrelation,
        (SimilarityArg::Abscorr, None) => SimilarityConfig::AbsoluteCorrelation,
        (SimilarityArg::CorrCov, Some(lambda)) => {
            SimilarityConfig::CorrelationPlusCovariance { lambda }
        }
        (SimilarityArg::CorrCov, None) => {
            return Err(CliError::Usage(
                "--similarity corr+cov requires --lambda".into(),
            ));
        }
        (_, Some(_)) => {
            return Err(CliError::Usage(
                "--lambda only applies to --similarity corr+cov".into(),
            ));
        }
    };
    let height = match args.level {
        Some(level) => Height::Level(level),
        None => Height::Full,
    };
    let angle_mode = if args.haar {
        AngleMode::FixedQuarterPi
    } else {
        AngleMode::Adaptive
    };
    Ok(EngineConfig {
        similarity,
        height,
        angle_mode,
    })
}

fn run_fit(args: FitArgs) -> Result<()> {
    let config = engine_config(&args)?;
    let data = read_matrix(&args.input, &args.csv.options()?)?;
    let model = fit(&data, &config)?;
    let mut text = model.to_json()?;
    text.push('\n');
    write_atomic(&args.out, text.as_bytes())?;

    let mut manifest = RunManifest::new(
        "fit",
        None,
        json!({
            "input": args.input.display().to_string(),
            "out": args.out.display().to_string(),
            "height": match args.level { Some(l) => json!({ "level": l }), None => json!("full") },
            "similarity": serde_json::to_value(&config.similarity)
                .map_err(treelets::Error::from)?,
            "haar": args.haar,
            "csv": args.csv.describe(),
        }),
    );
    manifest.add_input(&args.input)?;
    manifest.write_beside(&args.out)?;
    println!(
        "fit: n={} p={} height={} -> {}",
        data.n(),
        data.p(),
        model.height(),
        args.out.display()
    );
    Ok(())
}

fn read_model(path: &Path) -> Result<TreeletModel> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    TreeletModel::from_json(&text).map_err(|e| CliError::Json {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn run_transform(args: TransformArgs) -> Result<()> {
    let model = read_model(&args.model)?;
    let data = read_matrix(&args.input, &args.csv.options()?)?;
    let mut out_rows = Vec::with_capacity(data.n());
    for t in 0..data.n() {
        let row: Vec<f64> = data.row(t).to_vec();
        let transformed = if args.inverse {
            model.inverse(&Coefficients::new(args.level, row))?
        } else {
            model.forward(&row, args.level)?.slots().to_vec()
        };
        out_rows.push(transformed);
    }
    let p_out = out_rows[0].len();
    let mut values = Array2::zeros((out_rows.len(), p_out));
    for (t, row) in out_rows.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            values[[t, j]] = *v;
        }
    }
    write_matrix(&args.out, &values)?;

    let mut manifest = RunManifest::new(
        "transform",
        None,
        json!({
            "model": args.model.display().to_string(),
            "input": args.input.display().to_string(),
            "level": args.level,
            "inverse": args.inverse,
            "out": args.out.display().to_string(),
            "csv": args.csv.describe(),
        }),
    );
    manifest.add_input(&args.model)?;
    manifest.add_input(&args.input)?;
    manifest.write_beside(&args.out)?;
    println!(
        "transform: {} rows at level {} -> {}",
        data.n(),
        args.level,
        args.out.display()
    );
    Ok(())
}

fn run_best_basis(args: BestBasisArgs) -> Result<()> {
    let data = read_matrix(&args.input, &args.csv.options()?)?;
    let result = best_k_basis(&data, args.k, args.folds, &EngineConfig::default(), args.seed)?;

    let mut header: Vec<String> = vec!["level".into()];
    header.extend((1..=result.folds).map(|f| format!("fold_{f}")));
    header.push("mean".into());
    let rows: Vec<Vec<String>> = (0..result.mean_curve.len())
        .map(|level| {
            let mut row = vec![level.to_string()];
            row.extend(result.fold_curves.iter().map(|c| float_cell(c[level])));
            row.push(float_cell(result.mean_curve[level]));
            row
        })
        .collect();
    write_rows(&args.out, Some(&header), &rows)?;

    let mut manifest = RunManifest::new(
        "best-basis",
        Some(args.seed),
        json!({
            "input": args.input.display().to_string(),
            "k": args.k,
            "folds": args.folds,
            "out": args.out.display().to_string(),
            "csv": args.csv.describe(),
        }),
    );
    manifest.add_input(&args.input)?;
    manifest.write_beside(&args.out)?;
    println!(
        "best-basis: selected level {} (mean score {}) -> {}",
        result.selected_level,
        float_cell(result.mean_curve[result.selected_level]),
        args.out.display()
    );
    Ok(())
}

fn run_bootstrap(args: BootstrapArgs) -> Result<()> {
    let data = read_matrix(&args.input, &args.csv.options()?)?;
    let config = BootstrapConfig {
        replicates: args.replicates,
        alpha: args.alpha,
        seed: args.seed,
        level: args.level,
        top_k: args.top_k,
    };
    let summary = confidence_set_loadings(&data, &config)?;

    let header: Vec<String> = ["treelet_rank", "coordinate", "lower", "point", "upper"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut rows = Vec::new();
    for band in &summary.bands {
        for i in 0..band.point.len() {
            rows.push(vec![
                band.rank.to_string(),
                i.to_string(),
                float_cell(band.lower[i]),
                float_cell(band.point[i]),
                float_cell(band.upper[i]),
            ]);
        }
    }
    write_rows(&args.out, Some(&header), &rows)?;

    let mut manifest = RunManifest::new(
        "bootstrap",
        Some(args.seed),
        json!({
            "input": args.input.display().to_string(),
            "replicates": args.replicates,
            "alpha": args.alpha,
            "level": args.level,
            "top_k": args.top_k,
            "out": args.out.display().to_string(),
            "csv": args.csv.describe(),
        }),
    );
    manifest.add_input(&args.input)?;
    manifest.write_beside(&args.out)?;
    println!(
        "bootstrap: delta={} accepted={}/{} -> {}",
        float_cell(summary.delta),
        summary.accepted,
        summary.replicates,
        args.out.display()
    );
    Ok(())
}

fn run_synth(args: SynthArgs) -> Result<()> {
    let (name, common, spec_path, data) = match &args.model {
        SynthModel::Block { spec, common } => {
            let text = std::fs::read_to_string(spec).map_err(|source| CliError::Io {
                path: spec.clone(),
                source,
            })?;
            let parsed: BlockModelSpec =
                serde_json::from_str(&text).map_err(|e| CliError::Json {
                    path: spec.clone(),
                    message: e.to_string(),
                })?;
            parsed.validate()?;
            let data = sample_block(&parsed, common.n, common.seed)?;
            ("block", common, Some(spec.clone()), data)
        }
        SynthModel::Example1 { common } => (
            "example1",
            common,
            None,
            sample_block(&example1(), common.n, common.seed)?,
        ),
        SynthModel::Example2 { common } => (
            "example2",
            common,
            None,
            sample_mixture(&example2(), common.n, common.seed)?.data,
        ),
        SynthModel::Example3 { common } => (
            "example3",
            common,
            None,
            sample_mixture(&example3(), common.n, common.seed)?.data,
        ),
    };
    write_matrix(&common.out, data.values())?;

    let mut manifest = RunManifest::new(
        "synth",
        Some(common.seed),
        json!({
            "model": name,
            "spec": spec_path.as_ref().map(|p| p.display().to_string()),
            "n": common.n,
            "out": common.out.display().to_string(),
        }),
    );
    if let Some(path) = &spec_path {
        manifest.add_input(path)?;
    }
    manifest.write_beside(&common.out)?;
    println!(
        "synth {}: n={} p={} -> {}",
        name,
        data.n(),
        data.p(),
        common.out.display()
    );
    Ok(())
}

fn run_bench(args: BenchArgs) -> Result<()> {
    match args.experiment {
        BenchKind::Convergence {
            p_grid,
            n_grid,
            reps,
            blocks,
            within,
            between,
            noise_sd,
            threshold,
            common,
        } => {
            let config = ConvergenceConfig {
                p_grid: p_grid.clone(),
                n_grid: n_grid.clone(),
                replicates: reps,
                block_count: blocks,
                within_variance: within,
                between_covariance: between,
                noise_sd,
                success_threshold: threshold,
            };
            let table = convergence_experiment(&config, common.seed)?;

            let header: Vec<String> = ["p", "n", "successes", "replicates", "fraction"]
                .iter()
                .map(|s| s.to_string())
                .collect();
            let rows: Vec<Vec<String>> = table
                .rows
                .iter()
                .map(|row| {
                    vec![
                        row.p.to_string(),
                        row.n.to_string(),
                        row.successes.to_string(),
                        row.replicates.to_string(),
                        float_cell(row.fraction()),
                    ]
                })
                .collect();
            write_rows(&common.out, Some(&header), &rows)?;

            let manifest = RunManifest::new(
                "bench",
                Some(common.seed),
                json!({
                    "experiment": "convergence",
                    "p_grid": p_grid,
                    "n_grid": n_grid,
                    "replicates": reps,
                    "blocks": blocks,
                    "within": within,
                    "between": between,
                    "noise_sd": noise_sd,
                    "threshold": threshold,
                    "out": common.out.display().to_string(),
                }),
            );
            manifest.write_beside(&common.out)?;
            for (p, required) in &table.required_n {
                match required {
                    Some(n) => println!("bench convergence: p={p} reaches {threshold} at n={n}"),
                    None => println!("bench convergence: p={p} never reaches {threshold}"),
                }
            }
            println!("bench convergence: table -> {}", common.out.display());
        }
        BenchKind::Figure4 {
            reps,
            train_n,
            test_n,
            variables,
            features,
            max_components,
            coarse_step,
            common,
        } => {
            let spec = example3_extended();
            let config = Figure4Config {
                replicates: reps,
                train_n,
                test_n,
                selected_variables: variables,
                selected_features: features,
                max_components,
                coarse_step,
                seed: common.seed,
            };
            let table = figure4_experiment(&spec, &config)?;

            let header: Vec<String> = ["full", "supervised", "treelet", "oracle"]
                .iter()
                .map(|s| s.to_string())
                .collect();
            let rows: Vec<Vec<String>> = table
                .rows
                .iter()
                .map(|row| {
                    vec![
                        float_cell(row.msep.full),
                        float_cell(row.msep.supervised),
                        float_cell(row.msep.treelet),
                        float_cell(row.msep.oracle),
                    ]
                })
                .collect();
            write_rows(&common.out, Some(&header), &rows)?;

            let manifest = RunManifest::new(
                "bench",
                Some(common.seed),
                json!({
                    "experiment": "figure4",
                    "model": "example3-extended",
                    "replicates": reps,
                    "train_n": train_n,
                    "test_n": test_n,
                    "variables": variables,
                    "features": features,
                    "max_components": max_components,
                    "coarse_step": coarse_step,
                    "out": common.out.display().to_string(),
                }),
            );
            manifest.write_beside(&common.out)?;
            println!(
                "bench figure4: mean MSEP full={} supervised={} treelet={} oracle={} floor={}",
                float_cell(table.mean.full),
                float_cell(table.mean.supervised),
                float_cell(table.mean.treelet),
                float_cell(table.mean.oracle),
                float_cell(table.theoretical_floor),
            );
            println!("bench figure4: table -> {}", common.out.display());
        }
    }
    Ok(())
}
