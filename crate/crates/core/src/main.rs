use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use paampc::config::{Config, ConfigError};
use paampc::dataset::{generate_to_file, Dataset};
use paampc::harness::{self, run_experiment, sample_instance, write_file, Method, TuningSetup};
use paampc::mpc::MpcController;
use paampc::net::{train_on_dataset, Target, TrainReport};
use paampc::plant::{CartpoleParams, N_PARAMS};
use paampc::policy::{AdaptivePolicy, BundleMeta, ACTION_FILE, META_FILE, SENSITIVITY_FILE};
use paampc::simloop::{rollout, rollout_with, InitialState};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "paampc", version, about = "Parameter-adaptive approximate MPC for a simulated cartpole")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Label random states with MPC actions and sensitivities.
    GenDataset(GenDatasetArgs),
    /// Train the action or sensitivity network.
    Train(TrainArgs),
    /// Run one closed-loop episode and write its trajectory.
    Eval(EvalArgs),
    /// Tune the policy parameters on one random plant instance.
    Tune(TuneArgs),
    /// Tune on many random instances and aggregate incumbent curves.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct GenDatasetArgs {
    /// Number of samples (default from config).
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Also export the dataset as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum)]
    target: TargetArg,
    /// A `.pamn` model file, or a bundle directory to add the model to.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch loss history as CSV.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TargetArg {
    Action,
    Sensitivity,
}

#[derive(Clone, Copy, ValueEnum)]
enum ControllerArg {
    /// Adaptive network policy from the bundle.
    Policy,
    /// Online MPC.
    Mpc,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Turbo,
    Sobol,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Turbo => Method::Turbo,
            MethodArg::Sobol => Method::Sobol,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    /// Policy bundle directory (default from config).
    #[arg(long)]
    bundle: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "policy")]
    controller: ControllerArg,
    /// Controller parameters `m_add,M,C1,C2,C3` (default nominal).
    #[arg(long, value_delimiter = ',', value_name = "m_add,M,C1,C2,C3")]
    theta: Option<Vec<f64>>,
    /// True plant parameters `m_add,M,C1,C2,C3` (default nominal).
    #[arg(long, value_delimiter = ',', value_name = "m_add,M,C1,C2,C3", conflicts_with = "system_seed")]
    theta_true: Option<Vec<f64>>,
    /// Draw the true plant as a random instance with this seed.
    #[arg(long)]
    system_seed: Option<u64>,
    /// Jitter amplitude of the initial angle [rad].
    #[arg(long)]
    jitter: Option<f64>,
    /// Trajectory CSV.
    #[arg(long)]
    out: PathBuf,
    /// Dump the MPC solution at the initial state to CSV.
    #[arg(long)]
    mpc_dump: Option<PathBuf>,
}

#[derive(Args)]
struct TuneArgs {
    #[arg(long)]
    system_seed: u64,
    #[arg(long)]
    bo_seed: u64,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long, value_enum)]
    method: MethodArg,
    /// History CSV.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    bundle: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    bundle: Option<PathBuf>,
    #[arg(long)]
    instances: Option<usize>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    bo_seeds: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',', value_enum)]
    methods: Option<Vec<MethodArg>>,
}

enum CliError {
    Config(String),
    Runtime(anyhow::Error),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

type CliResult = Result<(), CliError>;

fn config_error(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}

fn run(cli: Cli) -> CliResult {
    let mut cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
    }
    let seed = cli.seed.unwrap_or(0);
    match cli.command {
        Command::GenDataset(a) => gen_dataset(&cfg, seed, a),
        Command::Train(a) => train(cfg, a),
        Command::Eval(a) => eval(&cfg, seed, a),
        Command::Tune(a) => tune(&cfg, a),
        Command::Experiment(a) => experiment(cfg, seed, a),
    }
}

fn gen_dataset(cfg: &Config, seed: u64, a: GenDatasetArgs) -> CliResult {
    let n = a.n.unwrap_or(cfg.dataset.n);
    if n == 0 {
        return Err(config_error("--n must be at least 1"));
    }
    let mpc = cfg.mpc()?;
    generate_to_file(&a.out, n, &cfg.dataset.sampling_box, &cfg.plant.params(), &mpc, seed)
        .with_context(|| format!("generating {}", a.out.display()))?;
    if let Some(csv) = a.csv {
        let ds = Dataset::load(&a.out).context("reading back the dataset")?;
        ds.write_csv(&csv).with_context(|| format!("writing {}", csv.display()))?;
    }
    log::info!("wrote {n} samples to {}", a.out.display());
    Ok(())
}

fn write_report(path: &Path, report: &TrainReport) -> anyhow::Result<()> {
    write_file(path, |w| {
        writeln!(w, "epoch,train_loss,val_loss")?;
        for (i, (t, v)) in report.train_loss.iter().zip(&report.val_loss).enumerate() {
            writeln!(w, "{},{},{}", i + 1, t, v)?;
        }
        Ok(())
    })
    .with_context(|| format!("writing {}", path.display()))
}

fn train(mut cfg: Config, a: TrainArgs) -> CliResult {
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    cfg.train.validate().map_err(|e| config_error(e.to_string()))?;
    let target = match a.target {
        TargetArg::Action => Target::Action,
        TargetArg::Sensitivity => Target::Sensitivity,
    };
    let ds = Dataset::load(&a.dataset).with_context(|| format!("loading {}", a.dataset.display()))?;
    let (net, report) = train_on_dataset(&ds, target, &cfg.train).context("training")?;
    log::info!("best epoch {}, validation RMSE {:?}", report.best_epoch, report.val_rmse);
    if a.out.extension().is_some_and(|e| e == "pamn") {
        net.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    } else {
        let dir = &a.out;
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let meta_path = dir.join(META_FILE);
        let mut meta = if meta_path.exists() {
            let text = std::fs::read_to_string(&meta_path).context("reading bundle metadata")?;
            serde_json::from_str::<BundleMeta>(&text).context("parsing bundle metadata")?
        } else {
            BundleMeta {
                theta_nom: cfg.plant.params(),
                u_max: cfg.plant.u_max,
                action_val_rmse: None,
                sensitivity_val_rmse: None,
            }
        };
        if meta.theta_nom != cfg.plant.params() {
            return Err(config_error("bundle was built for different nominal parameters"));
        }
        let file = match target {
            Target::Action => {
                meta.action_val_rmse = Some(report.val_rmse[0]);
                ACTION_FILE
            }
            Target::Sensitivity => {
                meta.sensitivity_val_rmse = Some(report.val_rmse.clone());
                SENSITIVITY_FILE
            }
        };
        net.save(&dir.join(file)).with_context(|| format!("writing model into {}", dir.display()))?;
        std::fs::write(&meta_path, serde_json::to_string_pretty(&meta).map_err(anyhow::Error::from)? + "\n")
            .with_context(|| format!("writing {}", meta_path.display()))?;
    }
    if let Some(path) = a.report {
        write_report(&path, &report)?;
    }
    Ok(())
}

fn params_arg(v: &Option<Vec<f64>>, default: CartpoleParams, name: &str) -> Result<CartpoleParams, CliError> {
    match v {
        None => Ok(default),
        Some(v) if v.len() != N_PARAMS => Err(config_error(format!("--{name} needs {N_PARAMS} values"))),
        Some(v) => {
            let p = CartpoleParams::from_slice(v);
            if p.is_valid() {
                Ok(p)
            } else {
                Err(config_error(format!("--{name} is not a valid parameter vector")))
            }
        }
    }
}

fn load_policy(cfg: &Config, bundle: Option<PathBuf>) -> anyhow::Result<AdaptivePolicy> {
    let dir = bundle.unwrap_or_else(|| cfg.experiment.bundle.clone());
    AdaptivePolicy::load(&dir).with_context(|| format!("loading policy bundle {}", dir.display()))
}

fn eval(cfg: &Config, seed: u64, a: EvalArgs) -> CliResult {
    let nom = cfg.plant.params();
    let theta = params_arg(&a.theta, nom, "theta")?;
    let theta_true = match a.system_seed {
        Some(s) => {
            let neg: Vec<f64> = cfg.experiment.half_widths.iter().map(|h| -h).collect();
            sample_instance(&nom, &neg, &cfg.experiment.half_widths, s).map_err(anyhow::Error::from)?
        }
        None => params_arg(&a.theta_true, nom, "theta-true")?,
    };
    let mut ep = cfg.episode.clone();
    if let Some(j) = a.jitter {
        ep.initial = InitialState::Jittered { amplitude: j };
    }
    ep.validate().map_err(|e| config_error(e.to_string()))?;
    let constants = cfg.plant.constants();
    let mpc = cfg.mpc()?;
    if let Some(path) = &a.mpc_dump {
        let sol = mpc.solve(&ep.initial_state(seed), &theta, None).context("solving MPC at the initial state")?;
        sol.write_csv(path).with_context(|| format!("writing {}", path.display()))?;
    }
    let rec = match a.controller {
        ControllerArg::Policy => {
            let pol = load_policy(cfg, a.bundle)?;
            if pol.meta.theta_nom != nom {
                return Err(config_error("bundle was built for different nominal parameters"));
            }
            rollout(&pol, &theta, &theta_true, &constants, &ep, seed)
        }
        ControllerArg::Mpc => {
            let mut ctl = MpcController::new(&mpc, theta);
            rollout_with(|s| ctl.act(s), &theta_true, &constants, &ep, seed)
        }
    }
    .map_err(anyhow::Error::from)?;
    rec.write_csv(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    match &rec.failure {
        Some(f) => println!("reward {} (failed: {f:?})", rec.reward),
        None => println!("reward {}", rec.reward),
    }
    Ok(())
}

fn tune(cfg: &Config, a: TuneArgs) -> CliResult {
    let episodes = a.episodes.unwrap_or(cfg.experiment.episodes);
    if episodes < 2 {
        return Err(config_error("--episodes must be at least 2"));
    }
    let pol = load_policy(cfg, a.bundle)?;
    let nom = pol.meta.theta_nom;
    cfg.experiment.validate(&nom).map_err(|e| config_error(e.to_string()))?;
    let (lo, hi) = cfg.experiment.tuning_bounds(&nom);
    let neg: Vec<f64> = cfg.experiment.half_widths.iter().map(|h| -h).collect();
    let theta_true =
        sample_instance(&nom, &neg, &cfg.experiment.half_widths, a.system_seed).map_err(anyhow::Error::from)?;
    let ep = cfg.experiment.episode_config(&cfg.episode);
    let constants = cfg.plant.constants();
    let setup = TuningSetup { policy: &pol, constants: &constants, episode: &ep, turbo: &cfg.tuner, lo: &lo, hi: &hi };
    let hist = setup
        .tune(a.method.into(), &theta_true, episodes, harness::run_seed(a.system_seed, a.bo_seed))
        .context("tuning")?;
    hist.write_csv(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "initial reward {}, incumbent reward {}, incumbent theta {:?}",
        hist.records[0].reward,
        hist.incumbent.last().unwrap(),
        hist.best_theta().unwrap()
    );
    Ok(())
}

fn experiment(mut cfg: Config, seed: u64, a: ExperimentArgs) -> CliResult {
    let x = &mut cfg.experiment;
    if let Some(b) = a.bundle {
        x.bundle = b;
    }
    if let Some(n) = a.instances {
        x.n_instances = n;
    }
    if let Some(e) = a.episodes {
        x.episodes = e;
    }
    if let Some(s) = a.bo_seeds {
        x.bo_seeds = s;
    }
    if let Some(m) = a.methods {
        x.methods = m.into_iter().map(Method::from).collect();
    }
    cfg.validate()?;
    let pol = load_policy(&cfg, None)?;
    let res = run_experiment(&cfg.experiment, &pol, &cfg.plant.constants(), &cfg.episode, &cfg.tuner, seed)
        .map_err(|e| match e {
            harness::HarnessError::InvalidConfig(m) => config_error(m),
            e => CliError::Runtime(e.into()),
        })?;
    res.write(&a.out).with_context(|| format!("writing results to {}", a.out.display()))?;
    for agg in &res.aggregates {
        let last = agg.rows.last().unwrap();
        println!(
            "{} seed {}: mean initial {:.4}, mean incumbent {:.4} at epoch {}",
            agg.method, agg.bo_seed, last.mean_initial, last.mean, last.epoch
        );
    }
    Ok(())
}
