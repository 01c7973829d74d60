use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ivcate::bench::{
    emit_rates, emit_results, run_rate_study, run_study, Estimator, NuisanceMode, StudyConfig,
};
use ivcate::data401k::{emit_survey, load_401k, run_survey_splits, summarize_splits, SurveyConfig};
use ivcate::dgp::{gen_iv, gen_obs, DgpSpec};
use ivcate::tabular::RngStream;
use ivcate::Error;

#[derive(Parser)]
#[command(
    name = "ivcate",
    version,
    about = "CATE estimation from confounded observational data plus a small IV study"
)]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Monte Carlo study on a synthetic DGP.
    Simulate(StudyArgs),
    /// Convergence of the bias coefficients as the IV sample grows.
    Rates {
        #[command(flatten)]
        study: StudyArgs,
        /// Comma-separated, strictly increasing IV sample sizes.
        #[arg(long, value_delimiter = ',', default_values_t = [500usize, 2000, 8000])]
        n_list: Vec<usize>,
    },
    /// Run the 401(k) pipeline on a survey file.
    #[command(name = "401k")]
    Survey(SurveyArgs),
    /// Write one observational and one IV sample as CSV.
    DumpDgp {
        #[command(flatten)]
        dgp: DgpArgs,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "dgp_dump")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DgpKind {
    Scalar,
    Highdim,
}

#[derive(Args)]
struct DgpArgs {
    #[arg(long, value_enum)]
    dgp: Option<DgpKind>,
    /// Covariate dimension for the high-dimensional DGP.
    #[arg(long, default_value_t = 5)]
    dim: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum NuisanceArg {
    Estimated,
    Oracle,
}

#[derive(Args)]
struct StudyArgs {
    /// TOML study config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    dgp: DgpArgs,
    #[arg(long)]
    reps: Option<usize>,
    /// Sets both sample sizes.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    n_obs: Option<usize>,
    #[arg(long)]
    n_iv: Option<usize>,
    #[arg(long)]
    folds: Option<usize>,
    /// Comma-separated subset of tau_obs, tau_iv, alg1, alg2, net_tau_obs.
    #[arg(long, value_delimiter = ',')]
    estimators: Option<Vec<String>>,
    #[arg(long, value_enum)]
    nuisances: Option<NuisanceArg>,
    /// Training epochs for the representation network.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "results")]
    out: PathBuf,
}

#[derive(Args)]
struct SurveyArgs {
    /// Survey CSV with the 401(k) columns.
    #[arg(long)]
    data: PathBuf,
    /// TOML pipeline config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of random observational/IV splits to average over.
    #[arg(long, default_value_t = 1)]
    splits: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Disable the artificial non-compliance mask.
    #[arg(long)]
    no_mask: bool,
    #[arg(long, default_value = "results_401k")]
    out: PathBuf,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(_) | Error::Load { .. } => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn dgp_from(args: &DgpArgs, seed: u64) -> Result<Option<DgpSpec>, Failure> {
    Ok(match args.dgp {
        None => None,
        Some(DgpKind::Scalar) => Some(DgpSpec::scalar()),
        Some(DgpKind::Highdim) => Some(DgpSpec::highdim(args.dim, RngStream::new(seed, 0xC0EF))?),
    })
}

fn study_config(args: &StudyArgs) -> Result<StudyConfig, Failure> {
    let mut cfg: StudyConfig = match &args.config {
        Some(p) => read_toml(p)?,
        None => StudyConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(d) = dgp_from(&args.dgp, cfg.seed)? {
        cfg.dgp = d;
    }
    if let Some(n) = args.n {
        cfg.n_obs = n;
        cfg.n_iv = n;
    }
    if let Some(n) = args.n_obs {
        cfg.n_obs = n;
    }
    if let Some(n) = args.n_iv {
        cfg.n_iv = n;
    }
    if let Some(r) = args.reps {
        cfg.reps = r;
    }
    if let Some(k) = args.folds {
        cfg.folds = k;
    }
    if let Some(list) = &args.estimators {
        cfg.estimators = list
            .iter()
            .map(|s| Estimator::parse(s.trim()))
            .collect::<Result<_, _>>()?;
    }
    if let Some(m) = args.nuisances {
        cfg.nuisances = match m {
            NuisanceArg::Estimated => NuisanceMode::Estimated,
            NuisanceArg::Oracle => NuisanceMode::Oracle,
        };
    }
    if let Some(e) = args.epochs {
        cfg.net.epochs = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn simulate(args: &StudyArgs) -> Result<(), Failure> {
    let cfg = study_config(args)?;
    let table = run_study(&cfg)?;
    println!(
        "{:<12} {:>14} {:>14} {:>5}",
        "estimator", "mean_mse", "sd", "reps"
    );
    for r in &table.rows {
        println!(
            "{:<12} {:>14.6} {:>14.6} {:>5}",
            r.estimator.name(),
            r.mean_mse,
            r.sd,
            r.replicates
        );
    }
    if let Some(theta) = &table.theta_mean {
        println!("theta mean: {theta:?}");
    }
    emit_results(&table, &cfg, &args.out)?;
    log::info!("wrote results to {}", args.out.display());
    Ok(())
}

fn rates(args: &StudyArgs, n_list: &[usize]) -> Result<(), Failure> {
    let cfg = study_config(args)?;
    let table = run_rate_study(&cfg, n_list)?;
    println!("{:>8} {:>16} {:>16}", "n_iv", "median_oracle", "median_est");
    for r in &table.rows {
        println!(
            "{:>8} {:>16.6} {:>16.6}",
            r.n_iv, r.median_oracle, r.median_estimated
        );
    }
    println!(
        "log-log slope: oracle {:.4}, estimated {:.4}",
        table.slope_oracle, table.slope_estimated
    );
    emit_rates(&table, &cfg, &args.out)?;
    Ok(())
}

fn survey(args: &SurveyArgs) -> Result<(), Failure> {
    if !args.data.is_file() {
        return Err(Failure::Config(format!(
            "data file {} not found",
            args.data.display()
        )));
    }
    let mut cfg: SurveyConfig = match &args.config {
        Some(p) => read_toml(p)?,
        None => SurveyConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if args.no_mask {
        cfg.mask = None;
    }
    let data = load_401k(&args.data)?;
    let fits = run_survey_splits(&data, &cfg, args.splits)?;
    let first = &fits[0];
    println!(
        "rows: {} loaded, {} after trimming ({} observational / {} IV); masked fraction {:.3}",
        data.len(),
        first.trimmed_rows,
        first.obs_rows,
        first.iv_rows,
        first.masked_fraction
    );
    let rows = summarize_splits(&fits);
    println!(
        "{:>5} {:>5} {:<8} {:>12} {:>12} {:>7}",
        "educ", "marr", "est", "mean", "sd", "masked"
    );
    for r in &rows {
        println!(
            "{:>5} {:>5} {:<8} {:>12.1} {:>12.1} {:>7}",
            r.educ, r.marr, r.estimator, r.mean, r.sd, r.masked
        );
    }
    emit_survey(&rows, &args.out)?;
    Ok(())
}

fn dump(dgp: &DgpArgs, n: usize, seed: u64, out: &Path) -> Result<(), Failure> {
    let spec = dgp_from(dgp, seed)?.unwrap_or_else(DgpSpec::scalar);
    fs::create_dir_all(out).map_err(|e| Failure::Runtime(format!("{}: {e}", out.display())))?;
    let root = RngStream::new(seed, 0);
    gen_obs(&spec, n, root.child(0))?.write_csv(&out.join("obs.csv"))?;
    gen_iv(&spec, n, root.child(1))?.write_csv(&out.join("iv.csv"))?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Rates { study, n_list } => rates(study, n_list),
        Command::Survey(a) => survey(a),
        Command::DumpDgp { dgp, n, seed, out } => dump(dgp, *n, *seed, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
