mod images;

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use monge_ot::knn::{complexity_benchmark, run_experiment_with, BenchConfig, RunOptions};
use monge_ot::linsolve::SolverKind;
use monge_ot::ma_solver::ClampPolicy;
use monge_ot::{
    build_partitions, image_distance, load_idx, pde_distance_with, CostKind, DistanceFunction, DistanceMethod,
    Error, ExperimentSpec, GroundCost, MassConvention, NewtonConfig, PdeDistanceConfig, TangentConfig,
};

use images::{read_image, ImageFormat};

/// Failure with its exit status: 2 for input and usage problems, 3 for
/// numerical ones.
#[derive(Debug)]
pub struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    pub fn input(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Self { code: 3, message: message.into() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let numeric = match &e {
            Error::PairFailure { source, .. } => !matches!(**source, Error::Io(_) | Error::Idx(_)),
            Error::NumericFailure { .. } | Error::UndefinedCorrelation(_) => true,
            _ => false,
        };
        let message = match &e {
            Error::NumericFailure {
                residual: Some(r), ..
            } => format!("{e} (residual {r:.3e})"),
            _ => e.to_string(),
        };
        if numeric {
            CliError::numeric(message)
        } else {
            CliError::input(message)
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::input(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "monge-ot", version, about = "Optimal-transport image distances and k-NN experiments")]
struct Cli {
    /// Print solver diagnostics and progress to stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Distance between two images.
    Distance(DistanceArgs),
    /// Accuracy against training-set size on MNIST partitions.
    Experiment(ExperimentArgs),
    /// Solver time against grid size, with a fitted log-log slope.
    Bench(BenchArgs),
}

#[derive(Args, Debug, Clone)]
struct NewtonArgs {
    /// Fraction of each Newton step taken.
    #[arg(long, default_value_t = 1.0)]
    damping: f64,
    /// Stop once the residual spread falls below this.
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 50)]
    max_iters: usize,
    /// Linear solver: auto, direct or krylov.
    #[arg(long, default_value = "auto", value_parser = parse_solver)]
    solver: SolverKind,
    /// Fail instead of clamping when the map leaves the unit square.
    #[arg(long)]
    reject_outside: bool,
}

impl NewtonArgs {
    fn config(&self) -> Result<NewtonConfig, CliError> {
        let mut cfg = NewtonConfig {
            damping: self.damping,
            tol: self.tol,
            max_iters: self.max_iters,
            clamp: if self.reject_outside { ClampPolicy::Reject } else { ClampPolicy::Clamp },
            ..Default::default()
        };
        cfg.solver.kind = self.solver;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct DistanceArgs {
    image_a: PathBuf,
    image_b: PathBuf,
    #[arg(short, long, default_value = "wasserstein-pde", value_parser = parse_method)]
    method: DistanceMethod,
    /// Ground cost for kantorovich-lp.
    #[arg(long, default_value = "half-squared", value_parser = parse_ground_cost)]
    cost: GroundCost,
    /// Mass convention for kantorovich-lp.
    #[arg(long, default_value = "pixel-sum", value_parser = parse_mass)]
    mass: MassConvention,
    /// Quadrature cost for wasserstein-pde: half-squared or linear.
    #[arg(long, default_value = "half-squared", value_parser = parse_cost_kind)]
    quadrature_cost: CostKind,
    /// Added to every pixel before forming densities.
    #[arg(long, default_value_t = 1.0)]
    offset: f64,
    #[arg(long, value_enum, default_value_t = ImageFormat::Auto)]
    format: ImageFormat,
    /// Image index inside an IDX file for the first image.
    #[arg(long, default_value_t = 0)]
    index_a: usize,
    /// Image index inside an IDX file for the second image.
    #[arg(long, default_value_t = 0)]
    index_b: usize,
    /// Write the deformed mesh of the PDE solve as CSV.
    #[arg(long)]
    mesh_out: Option<PathBuf>,
    #[command(flatten)]
    newton: NewtonArgs,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    /// JSON experiment spec; flags below override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Methods to run, comma separated.
    #[arg(short, long, value_delimiter = ',', value_parser = parse_method, default_value = "euclidean")]
    method: Vec<DistanceMethod>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    partitions: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    test_per_class: Option<usize>,
    /// Evaluate training sizes 1..=N per class.
    #[arg(long)]
    max_size: Option<usize>,
    #[arg(short, long)]
    k: Option<usize>,
    #[arg(long)]
    offset: Option<f64>,
    #[arg(long, default_value = "data/mnist/train-images-idx3-ubyte.gz")]
    train_images: PathBuf,
    #[arg(long, default_value = "data/mnist/train-labels-idx1-ubyte.gz")]
    train_labels: PathBuf,
    #[arg(long, default_value = "data/mnist/t10k-images-idx3-ubyte.gz")]
    test_images: PathBuf,
    #[arg(long, default_value = "data/mnist/t10k-labels-idx1-ubyte.gz")]
    test_labels: PathBuf,
    #[arg(short, long, default_value = "results")]
    out_dir: PathBuf,
    /// Also write every computed distance.
    #[arg(long)]
    pairs: bool,
    #[command(flatten)]
    newton: NewtonArgs,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Grid sides; N is the square of each.
    #[arg(long, value_delimiter = ',', default_value = "16,24,32,48,64")]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    /// CSV destination; stdout when absent.
    #[arg(short, long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    newton: NewtonArgs,
}

fn parse_method(s: &str) -> Result<DistanceMethod, String> {
    s.parse().map_err(|_| {
        let names: Vec<_> = DistanceMethod::ALL.iter().map(|m| m.name()).collect();
        format!("expected one of {}", names.join(", "))
    })
}

fn parse_ground_cost(s: &str) -> Result<GroundCost, String> {
    match s {
        "squared-euclidean" => Ok(GroundCost::SquaredEuclidean),
        "euclidean" => Ok(GroundCost::Euclidean),
        "half-squared" => Ok(GroundCost::HalfSquared),
        _ => Err("expected squared-euclidean, euclidean or half-squared".into()),
    }
}

fn parse_mass(s: &str) -> Result<MassConvention, String> {
    match s {
        "normalized" => Ok(MassConvention::Normalized),
        "pixel-sum" => Ok(MassConvention::PixelSum),
        _ => Err("expected normalized or pixel-sum".into()),
    }
}

fn parse_cost_kind(s: &str) -> Result<CostKind, String> {
    match s {
        "half-squared" => Ok(CostKind::HalfSquared),
        "linear" => Ok(CostKind::Linear),
        _ => Err("expected half-squared or linear".into()),
    }
}

fn parse_solver(s: &str) -> Result<SolverKind, String> {
    match s {
        "auto" => Ok(SolverKind::default()),
        "direct" => Ok(SolverKind::Direct),
        "krylov" => Ok(SolverKind::Krylov),
        _ => Err("expected auto, direct or krylov".into()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    let result = match &cli.command {
        Command::Distance(a) => cmd_distance(a, cli.verbose > 0),
        Command::Experiment(a) => cmd_experiment(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn cmd_distance(a: &DistanceArgs, verbose: bool) -> Result<(), CliError> {
    let img_a = read_image(&a.image_a, a.format, a.index_a)?;
    let img_b = read_image(&a.image_b, a.format, a.index_b)?;
    if img_a.shape() != img_b.shape() {
        return Err(CliError::input(format!(
            "image shapes differ: {:?} vs {:?}",
            img_a.shape(),
            img_b.shape()
        )));
    }
    let value = match a.method {
        DistanceMethod::Wasserstein => {
            let cfg = PdeDistanceConfig {
                newton: a.newton.config()?,
                offset: a.offset,
                cost: a.quadrature_cost,
            };
            let r = pde_distance_with(&img_a, &img_b, &cfg)?;
            let diag = r.diagnostics.as_ref().expect("PDE distance carries diagnostics");
            if verbose {
                eprintln!(
                    "iterations {}  converged {}  max |r| {:.3e}",
                    diag.iterations, diag.converged, diag.final_max_abs_residual
                );
                eprintln!("  iter  spread      clamped  halvings  multiplier");
                for (k, s) in diag.residual_history.iter().enumerate() {
                    let at = |v: &[usize]| v.get(k).map_or("-".to_string(), |x| x.to_string());
                    let lam = diag.multipliers.get(k).map_or("-".to_string(), |x| format!("{x:.3e}"));
                    eprintln!(
                        "  {k:>4}  {s:.3e}  {:>7}  {:>8}  {lam}",
                        at(&diag.clamped_point_count),
                        at(&diag.step_halvings)
                    );
                }
            }
            if let Some(path) = &a.mesh_out {
                write_mesh(path, &img_a, &img_b, &cfg)?;
            }
            if !diag.converged {
                return Err(CliError::numeric(format!(
                    "Newton solve did not converge after {} iterations (residual spread {:.3e}, distance estimate {:.10})",
                    diag.iterations,
                    diag.final_spread().unwrap_or(f64::NAN),
                    r.value
                )));
            }
            r.value
        }
        DistanceMethod::KantorovichLp => {
            let start = Instant::now();
            let d = image_distance(&img_a, &img_b, a.cost, a.mass)?;
            if verbose {
                eprintln!("LP solved in {:.3} s", start.elapsed().as_secs_f64());
            }
            d
        }
        m => DistanceFunction::from_method(m, a.offset).distance(&img_a, &img_b)?,
    };
    println!("{value:.10}");
    Ok(())
}

fn write_mesh(path: &Path, a: &monge_ot::RawImage64, b: &monge_ot::RawImage64, cfg: &PdeDistanceConfig) -> Result<(), CliError> {
    use monge_ot::{density_from_image, fit_spline, transport_map};
    let f = density_from_image(a, cfg.offset)?;
    let g = density_from_image(b, cfg.offset)?;
    let (u, _) = monge_ot::ma_solver::newton_solve_with_spline(&f, &fit_spline(&g), &cfg.newton)?;
    transport_map(&u).write_mesh_csv(BufWriter::new(File::create(path)?))?;
    Ok(())
}

fn experiment_spec(a: &ExperimentArgs) -> Result<ExperimentSpec, CliError> {
    let mut spec = match &a.spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::input(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::input(format!("{}: {e}", p.display())))?
        }
        None => ExperimentSpec::default(),
    };
    if let Some(v) = a.seed {
        spec.seed = v;
    }
    if let Some(v) = a.partitions {
        spec.partitions = v;
    }
    if let Some(v) = a.per_class {
        spec.per_class = v;
    }
    if let Some(v) = a.test_per_class {
        spec.test_per_class = v;
    }
    if let Some(v) = a.max_size {
        spec.schedule = (1..=v).collect();
    }
    if let Some(v) = a.k {
        spec.k = v;
    }
    if let Some(v) = a.offset {
        spec.offset = v;
    }
    spec.validate()?;
    Ok(spec)
}

fn distance_function(m: DistanceMethod, spec: &ExperimentSpec, newton: NewtonConfig) -> DistanceFunction {
    match m {
        DistanceMethod::Wasserstein => DistanceFunction::Wasserstein(PdeDistanceConfig {
            newton,
            offset: spec.offset,
            cost: CostKind::HalfSquared,
        }),
        DistanceMethod::Tangent => DistanceFunction::Tangent(TangentConfig::default()),
        m => DistanceFunction::from_method(m, spec.offset),
    }
}

fn cmd_experiment(a: &ExperimentArgs) -> Result<(), CliError> {
    let spec = experiment_spec(a)?;
    let newton = a.newton.config()?;
    let train = load_idx::<f64>(&a.train_images, &a.train_labels)?;
    let test = load_idx::<f64>(&a.test_images, &a.test_labels)?;
    fs::create_dir_all(&a.out_dir)?;
    build_partitions(&train, &test, &spec)?
        .write_manifest(BufWriter::new(File::create(a.out_dir.join("manifest.csv"))?))?;

    let mut accuracy = BufWriter::new(File::create(a.out_dir.join("accuracy.csv"))?);
    let mut aggregate = BufWriter::new(File::create(a.out_dir.join("aggregate.csv"))?);
    writeln!(accuracy, "method,partition,size,accuracy")?;
    writeln!(aggregate, "method,size,mean,std,partitions")?;
    let max_s = *spec.schedule.iter().max().expect("validated schedule");

    println!("method            size   mean     std      calls      s/call     nonconverged");
    for &m in &a.method {
        let spec_m = ExperimentSpec { method: m, ..spec.clone() };
        let d = distance_function(m, &spec_m, newton);
        let r = run_experiment_with(
            &spec_m,
            &train,
            &test,
            &d,
            RunOptions {
                record_pairs: a.pairs,
            },
        )?;
        for row in &r.accuracy {
            writeln!(accuracy, "{},{},{},{}", row.method, row.partition, row.size, row.accuracy)?;
        }
        for row in &r.aggregates {
            writeln!(aggregate, "{},{},{},{},{}", row.method, row.size, row.mean, row.std, row.partitions)?;
        }
        if a.pairs {
            r.write_pairs_csv(BufWriter::new(File::create(a.out_dir.join(format!("pairs-{m}.csv")))?))?;
        }
        let top = r.aggregate(max_s).expect("schedule contains its maximum");
        println!(
            "{:<17} {:>4}   {:.4}   {:.4}   {:>8}   {:.3e}   {}",
            m, max_s, top.mean, top.std, r.distance_calls, r.mean_call_seconds, r.nonconverged
        );
    }
    accuracy.flush()?;
    aggregate.flush()?;
    Ok(())
}

fn cmd_bench(a: &BenchArgs) -> Result<(), CliError> {
    let cfg = BenchConfig {
        newton: a.newton.config()?,
        repeats: a.repeats,
        warmup: a.warmup,
        ..Default::default()
    };
    let r = complexity_benchmark(&a.sizes, &cfg)?;
    match &a.out {
        Some(p) => {
            r.write_csv(BufWriter::new(File::create(p)?))?;
            for pt in &r.points {
                println!("N {:>6}  {:.4} s  {} iterations", pt.pixels, pt.seconds, pt.iterations);
            }
            println!("slope {:.3}", r.slope);
        }
        None => {
            r.write_csv(io::stdout().lock())?;
            eprintln!("slope {:.3}", r.slope);
        }
    }
    for side in &r.excluded {
        eprintln!("warning: side {side} did not converge and was left out of the fit");
    }
    Ok(())
}
