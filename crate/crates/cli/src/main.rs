mod output;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use dips::data::{load_csv, Covariates};
use dips::estimators::{estimate_from_fits, fit_models, prepare};
use dips::inference::{attach_inference, PerturbationConfig, WeightLaw};
use dips::{Criterion, Error, ErrorKind, EstimatorConfig, Family, Method, Result, Scenario, ScenarioConfig};

use output::EstimateRecord;

#[derive(Parser, Debug)]
#[command(name = "dips", version, about = "Average treatment effects via double-index propensity scores")]
struct Cli {
    /// Worker threads (default: DIPS_THREADS or all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Estimate the average treatment effect from a CSV file.
    Estimate(EstimateArgs),
    /// Run a simulation study on one of the benchmark scenarios.
    Simulate(SimulateArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FamilyArg {
    Gaussian,
    Binomial,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CriterionArg {
    Eric,
    Bic,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LawArg {
    Exponential,
    LogNormal,
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Estimators to run (comma separated: dips, ipw-alas, dr-alas).
    #[arg(long = "method", value_delimiter = ',', default_value = "dips")]
    methods: Vec<String>,

    /// Clip all propensity estimates into [eps, 1 - eps].
    #[arg(long)]
    trim_ps: Option<f64>,

    /// Fixed smoothing bandwidth instead of the plug-in rule.
    #[arg(long)]
    bandwidth: Option<f64>,

    /// Separate outcome-model slopes in each arm.
    #[arg(long)]
    arm_specific_slopes: bool,

    /// Skip covariate standardization.
    #[arg(long)]
    no_standardize: bool,

    /// Penalty-selection criterion.
    #[arg(long, value_enum, default_value = "eric")]
    criterion: CriterionArg,

    /// ERIC multiplier.
    #[arg(long, default_value_t = 0.5)]
    nu: f64,

    /// Adaptive-weight exponent.
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,

    /// Number of penalty levels on the tuning grid.
    #[arg(long, default_value_t = 50)]
    n_lambda: usize,
}

#[derive(Args, Debug)]
struct PerturbArgs {
    /// Perturbation resamples (0 disables inference).
    #[arg(long, default_value_t = 500)]
    resamples: usize,

    /// Law of the perturbation weights.
    #[arg(long, value_enum, default_value = "exponential")]
    weight_law: LawArg,

    /// Re-tune the penalty inside every resample.
    #[arg(long)]
    retune_lambda: bool,

    /// Seed for the perturbation weights.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct EstimateArgs {
    /// CSV file with a header row.
    #[arg(long)]
    input: PathBuf,

    /// Outcome column.
    #[arg(long)]
    outcome: String,

    /// Binary treatment column (0/1).
    #[arg(long)]
    treatment: String,

    /// Covariate columns (comma separated; default: all other columns).
    #[arg(long, value_delimiter = ',')]
    covariates: Option<Vec<String>>,

    /// Outcome working-model family.
    #[arg(long, value_enum, default_value = "gaussian")]
    family: FamilyArg,

    #[command(flatten)]
    model: ModelArgs,

    #[command(flatten)]
    perturb: PerturbArgs,

    /// Write JSON here instead of standard output.
    #[arg(long)]
    output: Option<PathBuf>,

    /// Write the perturbed estimates to this CSV.
    #[arg(long)]
    resamples_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// both-correct, misspec-ps, misspec-outcome or both-misspec.
    #[arg(long)]
    scenario: String,

    /// Sample size per repetition.
    #[arg(long)]
    n: usize,

    /// Number of covariates (at least 10).
    #[arg(long)]
    p: usize,

    /// Monte Carlo repetitions.
    #[arg(long)]
    reps: usize,

    /// Master seed for data generation and perturbation weights.
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Standard deviation of the outcome noise.
    #[arg(long, default_value_t = dips::sim::NOISE_SD)]
    noise_sd: f64,

    /// Estimators to run (comma separated).
    #[arg(long = "method", value_delimiter = ',', default_value = "dips,ipw-alas,dr-alas")]
    methods: Vec<String>,

    /// Run perturbation inference for DiPS in every repetition and report coverage.
    #[arg(long)]
    coverage: bool,

    /// Perturbation resamples per repetition (with --coverage).
    #[arg(long, default_value_t = 500)]
    resamples: usize,

    /// Law of the perturbation weights.
    #[arg(long, value_enum, default_value = "exponential")]
    weight_law: LawArg,

    /// Clip all propensity estimates into [eps, 1 - eps].
    #[arg(long)]
    trim_ps: Option<f64>,

    /// Write JSON here instead of standard output.
    #[arg(long)]
    output: Option<PathBuf>,

    /// Also write a flat per-estimator CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn parse_methods(raw: &[String]) -> Result<Vec<Method>> {
    let mut out = Vec::new();
    for m in raw.iter().filter(|s| !s.trim().is_empty()) {
        let m: Method = m.parse()?;
        if out.contains(&m) {
            return Err(Error::Config(format!("method {m} listed twice")));
        }
        out.push(m);
    }
    if out.is_empty() {
        return Err(Error::Config("no method given".into()));
    }
    Ok(out)
}

fn law(l: LawArg) -> WeightLaw {
    match l {
        LawArg::Exponential => WeightLaw::Exponential,
        LawArg::LogNormal => WeightLaw::LogNormal,
    }
}

fn estimator_config(m: &ModelArgs, family: Family) -> EstimatorConfig {
    let mut cfg = EstimatorConfig {
        outcome_family: family,
        arm_specific_slopes: m.arm_specific_slopes,
        standardize: !m.no_standardize,
        trim_ps: m.trim_ps,
        bandwidth: m.bandwidth,
        ..EstimatorConfig::default()
    };
    cfg.glm.gamma = m.gamma;
    cfg.glm.n_lambda = m.n_lambda;
    cfg.glm.criterion = match m.criterion {
        CriterionArg::Eric => Criterion::Eric { nu: m.nu },
        CriterionArg::Bic => Criterion::Bic,
    };
    cfg
}

fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| io::Error::new(e.kind(), format!("cannot write {}: {e}", path.display())).into())
}

fn open_output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn run_estimate(a: &EstimateArgs) -> Result<()> {
    let methods = parse_methods(&a.model.methods)?;
    let family = match a.family {
        FamilyArg::Gaussian => Family::Gaussian,
        FamilyArg::Binomial => Family::Binomial,
    };
    let cfg = estimator_config(&a.model, family);
    cfg.validate()?;
    if a.model.n_lambda == 0 {
        return Err(Error::Config("n-lambda must be positive".into()));
    }
    if a.perturb.resamples == 1 {
        return Err(Error::Config("resamples must be 0 or at least 2".into()));
    }
    if a.resamples_out.is_some() && a.perturb.resamples == 0 {
        return Err(Error::Config("--resamples-out needs --resamples > 0".into()));
    }
    let covariates = match &a.covariates {
        Some(c) => Covariates::Named(c.clone()),
        None => Covariates::AllOthers,
    };
    let data = load_csv(&a.input, &a.outcome, &a.treatment, &covariates)?;
    let (prepared, _) = prepare(&data, &cfg)?;
    let fits = fit_models(&prepared, &cfg, None, None)?;
    let estimates = estimate_from_fits(&prepared, &fits, &methods, &cfg, None);

    let mut records = Vec::with_capacity(methods.len());
    let mut draws = Vec::new();
    if a.perturb.resamples > 0 {
        let pcfg = PerturbationConfig {
            resamples: a.perturb.resamples,
            law: law(a.perturb.weight_law),
            seed: a.perturb.seed,
            reuse_lambda: !a.perturb.retune_lambda,
        };
        for r in attach_inference(&prepared, &fits, estimates, &cfg, &pcfg)? {
            let (est, summary) = r?;
            draws.push((est.method, summary.resamples));
            records.push(EstimateRecord::new(est, &data, a.perturb.seed));
        }
    } else {
        for r in estimates {
            records.push(EstimateRecord::new(r?, &data, a.perturb.seed));
        }
    }

    if let Some(path) = &a.resamples_out {
        output::write_resamples(&draws, create(path)?)?;
    }
    let mut out = open_output(a.output.as_deref())?;
    if records.len() == 1 {
        output::write_json(&records[0], &mut out)?;
    } else {
        output::write_json(&records, &mut out)?;
    }
    out.flush()?;
    Ok(())
}

fn run_simulate(a: &SimulateArgs) -> Result<()> {
    let scenario: Scenario = a.scenario.parse()?;
    let mut cfg = ScenarioConfig::new(scenario, a.n, a.p, a.reps, a.seed);
    cfg.estimators = parse_methods(&a.methods)?;
    cfg.noise_sd = a.noise_sd;
    cfg.estimator.trim_ps = a.trim_ps;
    if a.coverage {
        if !cfg.estimators.contains(&Method::Dips) {
            return Err(Error::Config("--coverage needs the dips method".into()));
        }
        cfg.perturb = Some(PerturbationConfig {
            resamples: a.resamples,
            law: law(a.weight_law),
            seed: a.seed,
            reuse_lambda: true,
        });
    }
    let report = dips::run_experiment(&cfg)?;
    if let Some(path) = &a.csv {
        report.write_csv(BufWriter::new(create(path)?))?;
    }
    let mut out = open_output(a.output.as_deref())?;
    output::write_json(&report, &mut out)?;
    out.flush()?;
    Ok(())
}

fn configure_threads(flag: Option<usize>) -> Result<()> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("DIPS_THREADS") {
            Ok(v) => Some(
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("DIPS_THREADS must be a positive integer, got '{v}'")))?,
            ),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(Error::Config("thread count must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot configure thread pool: {e}")))?;
    }
    Ok(())
}

fn report(e: &Error) -> ExitCode {
    let (prefix, code) = match e.kind() {
        ErrorKind::Config => ("CONFIG", 2),
        ErrorKind::Data => ("DATA", 1),
        ErrorKind::Estimation => ("ESTIMATION", 1),
    };
    eprintln!("{prefix}: {e}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.render().to_string();
            eprintln!("CONFIG: {}", msg.trim_start_matches("error: ").trim_end());
            return ExitCode::from(2);
        }
    };
    let result = configure_threads(cli.threads).and_then(|_| match &cli.command {
        Command::Estimate(a) => run_estimate(a),
        Command::Simulate(a) => run_simulate(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(&e),
    }
}
