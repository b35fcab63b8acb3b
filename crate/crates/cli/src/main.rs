use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use viplab::analysis::{
    bumps_csv, correlation_csv, correlation_json, curves_csv, dataset_bump_report,
    distance_curve, histogram_csv, prop2_check, reward_correlation, reward_histogram,
    RewardEpisode,
};
use viplab::control::{
    bc_train, episodes_csv, eval_policy, generate_mixed_dataset, mppi_evaluate, policy_eval_csv,
    rwr_train, step_errors_csv, success_rate, GoalSpec, RolloutOptions, RwrConfig,
};
use viplab::encoder::Encoder;
use viplab::experiments::{generate_dataset, sample_tasks, ExperimentConfig, RESOLVED_CONFIG};
use viplab::objectives::{train, Objective};
use viplab::repro::{mixed_config, parse_suite, run_suite};
use viplab::trajstore::TrajectoryDataset;
use viplab::worlds::Difficulty;

#[derive(Parser)]
#[command(name = "viplab", version, about = "Goal-conditioned embedding pre-training, planning and analysis")]
struct Cli {
    /// Worker threads (falls back to VIPLAB_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyMode {
    Rwr,
    Bc,
}

#[derive(Clone, Copy, ValueEnum)]
enum AnalysisKind {
    Curves,
    Bumps,
    Hist,
    Corr,
    Prop2,
}

#[derive(Clone, Copy, ValueEnum)]
enum DifficultyArg {
    Easy,
    Hard,
}

impl From<DifficultyArg> for Difficulty {
    fn from(d: DifficultyArg) -> Self {
        match d {
            DifficultyArg::Easy => Difficulty::Easy,
            DifficultyArg::Hard => Difficulty::Hard,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate expert demonstrations.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train an encoder on a dataset.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = parse_objective)]
        objective: Option<Objective>,
        /// Output directory for checkpoints and metrics.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run MPPI with the encoder's embedding reward.
    Plan {
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, value_enum)]
        difficulty: Option<DifficultyArg>,
        /// Per-episode CSV.
        #[arg(long)]
        out: PathBuf,
        /// Optional per-step error CSV.
        #[arg(long)]
        steps_out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Learn a policy by reward-weighted regression or behavior cloning.
    OfflineRl {
        #[arg(long, value_enum)]
        mode: PolicyMode,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset with actions; generated from the config's mixed section when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// RWR temperature; overrides the config.
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Smoothness and reward analyses.
    Analyze {
        #[arg(long, value_enum)]
        kind: AnalysisKind,
        #[arg(long)]
        encoder: PathBuf,
        /// Second encoder for the histogram comparison.
        #[arg(long)]
        encoder_b: Option<PathBuf>,
        /// Dataset (all kinds except corr).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run acceptance checks and write a JSON report.
    Repro {
        #[arg(long, default_value = "a1..a9")]
        suite: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_objective(s: &str) -> std::result::Result<Objective, String> {
    s.parse::<Objective>().map_err(|e| e.to_string())
}

/// An error with its exit code: 1 for configuration, 2 for runtime.
struct Failure {
    code: u8,
    message: String,
}

fn config_err(e: impl Display) -> Failure {
    Failure {
        code: 1,
        message: e.to_string(),
    }
}

fn runtime_err(e: impl Display) -> Failure {
    Failure {
        code: 2,
        message: e.to_string(),
    }
}

type Result<T> = std::result::Result<T, Failure>;

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) if !p.exists() => return Err(config_err(format!("config file {} not found", p.display()))),
        Some(p) => ExperimentConfig::load(p).map_err(|e| {
            if e.is_config() {
                config_err(format!("{}: {e}", p.display()))
            } else {
                runtime_err(e)
            }
        })?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.train.seed = s;
        cfg.rwr.seed = s;
    }
    Ok(cfg)
}

fn load_dataset(path: &Path) -> Result<TrajectoryDataset> {
    TrajectoryDataset::load(path).map_err(|e| runtime_err(format!("cannot load dataset {}: {e}", path.display())))
}

fn load_encoder(path: &Path) -> Result<Encoder> {
    Encoder::load(path).map_err(|e| runtime_err(format!("cannot load encoder {}: {e}", path.display())))
}

fn check_dims(encoder: &Encoder, obs_dim: usize, what: &str) -> Result<()> {
    if encoder.input_dim() != obs_dim {
        return Err(runtime_err(format!(
            "dimension mismatch: encoder expects {} inputs, {what} has {obs_dim}",
            encoder.input_dim()
        )));
    }
    Ok(())
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| runtime_err(format!("{}: {e}", parent.display())))?;
    }
    std::fs::write(path, contents).map_err(|e| runtime_err(format!("cannot write {}: {e}", path.display())))
}

/// Writes the resolved config next to a file artifact as `<file>.config.json`.
fn write_config_beside(cfg: &ExperimentConfig, artifact: &Path) -> Result<()> {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".config.json");
    write(&artifact.with_file_name(name), cfg.to_json_pretty() + "\n")
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| runtime_err(format!("cannot create {}: {e}", dir.display())))
}

fn write_config_in(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    write(&dir.join(RESOLVED_CONFIG), cfg.to_json_pretty() + "\n")
}

fn gen_data(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let ds = generate_dataset(&cfg.world, cfg.observation, &cfg.data, cfg.seed).map_err(runtime_err)?;
    let bytes = ds.to_bytes().map_err(runtime_err)?;
    write(out, bytes)?;
    write_config_beside(&cfg, out)?;
    eprintln!(
        "wrote {} trajectories ({} frames) to {}",
        ds.len(),
        ds.manifest().total_frames,
        out.display()
    );
    Ok(())
}

fn train_cmd(
    config: Option<&Path>,
    data: &Path,
    objective: Option<Objective>,
    out: &Path,
    seed: Option<u64>,
) -> Result<()> {
    let mut cfg = load_config(config, seed)?;
    if let Some(o) = objective {
        cfg.train.objective = o;
    }
    let ds = load_dataset(data)?;
    create_dir(out)?;
    write_config_in(&cfg, out)?;
    let enc_cfg = cfg.encoder.config(ds.obs_dim(), cfg.train.seed);
    let outcome = train(&ds, &enc_cfg, &cfg.train, &cfg.loss, Some(out)).map_err(runtime_err)?;
    let last = outcome.metrics.last().map_or(f64::NAN, |m| m.loss);
    eprintln!(
        "trained {} for {} batches, final loss {last:.6}; outputs in {}",
        cfg.train.objective,
        cfg.train.num_batches,
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn plan(
    encoder: &Path,
    config: Option<&Path>,
    episodes: Option<usize>,
    difficulty: Option<DifficultyArg>,
    out: &Path,
    steps_out: Option<&Path>,
    seed: Option<u64>,
) -> Result<()> {
    let mut cfg = load_config(config, seed)?;
    if let Some(n) = episodes {
        cfg.eval.episodes = n;
    }
    if let Some(d) = difficulty {
        cfg.eval.difficulty = d.into();
    }
    if cfg.eval.episodes == 0 {
        return Err(config_err("plan needs at least one episode"));
    }
    let enc = load_encoder(encoder)?;
    check_dims(&enc, cfg.world.obs_dim(cfg.observation), "the world's observation")?;
    let tasks = sample_tasks(&cfg.world, cfg.eval.difficulty, cfg.eval.episodes, cfg.seed);
    let length = cfg.mppi.episode_length(cfg.eval.difficulty);
    let results = mppi_evaluate(&cfg.world, &tasks, cfg.observation, &enc, &cfg.mppi, length, cfg.seed)
        .map_err(runtime_err)?;
    write(out, episodes_csv(&results))?;
    write_config_beside(&cfg, out)?;
    if let Some(p) = steps_out {
        write(p, step_errors_csv(&results))?;
    }
    eprintln!("success rate {:.3} over {} episodes", success_rate(&results), results.len());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn offline_rl(
    mode: PolicyMode,
    encoder: &Path,
    config: Option<&Path>,
    data: Option<&Path>,
    tau: Option<f64>,
    episodes: usize,
    out: &Path,
    seed: Option<u64>,
) -> Result<()> {
    let mut cfg = load_config(config, seed)?;
    if let Some(t) = tau {
        cfg.rwr.temperature = t;
    }
    if cfg.mixed.is_none() {
        cfg.mixed = Some(mixed_config());
    }
    cfg.validate().map_err(config_err)?;
    if episodes == 0 {
        return Err(config_err("offline-rl needs at least one evaluation episode"));
    }
    let mixed = cfg.mixed.clone().unwrap();
    let enc = load_encoder(encoder)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ds = match data {
        Some(p) => load_dataset(p)?,
        None => generate_mixed_dataset(&cfg.world, &mixed, cfg.observation, &mut rng).map_err(runtime_err)?,
    };
    check_dims(&enc, ds.obs_dim(), "the dataset")?;
    let goal = GoalSpec::single(&enc, &cfg.world.observe(&mixed.goal, cfg.observation)).map_err(runtime_err)?;
    let fit = match mode {
        PolicyMode::Rwr => rwr_train(&ds, &enc, &goal, &cfg.rwr),
        PolicyMode::Bc => bc_train(&ds, &enc, &goal, &cfg.rwr),
    }
    .map_err(runtime_err)?;
    let starts: Vec<Vec<f64>> = (0..episodes).map(|_| mixed.sample_start(&cfg.world, &mut rng)).collect();
    let options = RolloutOptions::new(cfg.mppi.episode_length(Difficulty::Easy), cfg.seed);
    let eval = eval_policy(&cfg.world, &fit.policy, &enc, cfg.observation, &starts, &mixed.goal, &options)
        .map_err(runtime_err)?;

    create_dir(out)?;
    if matches!(mode, PolicyMode::Bc) {
        cfg.rwr = RwrConfig {
            temperature: 0.0,
            ..cfg.rwr
        };
    }
    write_config_in(&cfg, out)?;
    let policy = serde_json::to_string(&fit.policy.to_json()).map_err(runtime_err)?;
    write(&out.join("policy.json"), policy)?;
    let losses: String = std::iter::once("step,loss".to_string())
        .chain(fit.losses.iter().enumerate().map(|(i, l)| format!("{i},{l}")))
        .collect::<Vec<_>>()
        .join("\n");
    write(&out.join("losses.csv"), losses + "\n")?;
    write(&out.join("eval.csv"), policy_eval_csv(&eval))?;
    eprintln!("success rate {:.3} over {} episodes", eval.success_rate, episodes);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn analyze(
    kind: AnalysisKind,
    encoder: &Path,
    encoder_b: Option<&Path>,
    data: Option<&Path>,
    config: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let enc = load_encoder(encoder)?;
    let need_data = || -> Result<TrajectoryDataset> {
        let p = data.ok_or_else(|| config_err("--data is required for this analysis"))?;
        let ds = load_dataset(p)?;
        check_dims(&enc, ds.obs_dim(), "the dataset")?;
        Ok(ds)
    };
    let opts = &cfg.analysis;
    match kind {
        AnalysisKind::Curves => {
            let ds = need_data()?;
            let curves = ds
                .trajectories()
                .iter()
                .enumerate()
                .map(|(i, t)| distance_curve(&enc, i, t, None, opts.normalize))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(runtime_err)?;
            write(out, curves_csv(&curves))?;
        }
        AnalysisKind::Bumps => {
            let ds = need_data()?;
            let report = dataset_bump_report(&enc, &ds, opts.frame_cap).map_err(runtime_err)?;
            write(out, bumps_csv(&report))?;
            eprintln!("mean bump fraction {:.4}", report.mean);
        }
        AnalysisKind::Hist => {
            let ds = need_data()?;
            let other = encoder_b.map(load_encoder).transpose()?;
            if let Some(b) = &other {
                check_dims(b, ds.obs_dim(), "the dataset")?;
            }
            let mut encs = vec![&enc];
            encs.extend(other.as_ref());
            let report = reward_histogram(&encs, &ds, opts.bins, opts.range).map_err(runtime_err)?;
            write(out, histogram_csv(&report))?;
        }
        AnalysisKind::Corr => {
            if cfg.eval.episodes == 0 {
                return Err(config_err("corr needs at least one episode"));
            }
            check_dims(&enc, cfg.world.obs_dim(cfg.observation), "the world's observation")?;
            let tasks = sample_tasks(&cfg.world, cfg.eval.difficulty, cfg.eval.episodes, cfg.seed);
            let length = cfg.mppi.episode_length(cfg.eval.difficulty);
            let results = mppi_evaluate(&cfg.world, &tasks, cfg.observation, &enc, &cfg.mppi, length, cfg.seed)
                .map_err(runtime_err)?;
            let goals = tasks
                .iter()
                .map(|t| GoalSpec::single(&enc, &cfg.world.observe(&t.goal, cfg.observation)))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(runtime_err)?;
            let rewards: Vec<Vec<f64>> = results.iter().map(|r| r.true_rewards()).collect();
            let episodes: Vec<RewardEpisode> = results
                .iter()
                .zip(&rewards)
                .zip(&goals)
                .filter(|((r, _), _)| r.steps() > 0)
                .map(|((r, t), g)| RewardEpisode {
                    observations: &r.observations,
                    true_rewards: t,
                    goal: g,
                })
                .collect();
            let (pairs, report) = reward_correlation(&enc, &episodes).map_err(runtime_err)?;
            write(out, correlation_csv(&pairs))?;
            let mut summary = out.as_os_str().to_os_string();
            summary.push(".json");
            let json = serde_json::to_string_pretty(&correlation_json(&report)).map_err(runtime_err)?;
            write(Path::new(&summary), json + "\n")?;
            eprintln!("R^2 {:.4} over {} transitions", report.r2, report.n);
        }
        AnalysisKind::Prop2 => {
            let ds = need_data()?;
            let report = prop2_check(&enc, ds.trajectories()).map_err(runtime_err)?;
            let json = serde_json::to_string_pretty(&report).map_err(runtime_err)?;
            write(out, json + "\n")?;
            eprintln!("strictly decreasing on {:.4} of steps", report.fraction);
        }
    }
    write_config_beside(&cfg, out)
}

fn repro(suite: &str, out: &Path, seed: u64) -> Result<()> {
    let checks = parse_suite(suite).map_err(config_err)?;
    let report = run_suite(&checks, seed, |r| eprintln!("{}", r.line()));
    let json = serde_json::to_string_pretty(&report).map_err(runtime_err)?;
    write(out, json + "\n")?;
    eprintln!(
        "{}/{} checks passed in {:.1}s",
        report.num_passed, report.num_checks, report.runtime_s
    );
    if report.passed {
        Ok(())
    } else {
        Err(runtime_err(format!("{} check(s) failed; see {}", report.num_checks - report.num_passed, out.display())))
    }
}

fn init_threads(threads: Option<usize>) -> Result<()> {
    let n = match threads {
        Some(n) => Some(n),
        None => match std::env::var("VIPLAB_THREADS") {
            Ok(v) => Some(v.trim().parse::<usize>().map_err(|_| config_err(format!("VIPLAB_THREADS={v:?} is not a count")))?),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(config_err("--threads must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(runtime_err)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads(cli.threads)?;
    match cli.command {
        Command::GenData { config, out, seed } => gen_data(config.as_deref(), &out, seed),
        Command::Train {
            config,
            data,
            objective,
            out,
            seed,
        } => train_cmd(config.as_deref(), &data, objective, &out, seed),
        Command::Plan {
            encoder,
            config,
            episodes,
            difficulty,
            out,
            steps_out,
            seed,
        } => plan(&encoder, config.as_deref(), episodes, difficulty, &out, steps_out.as_deref(), seed),
        Command::OfflineRl {
            mode,
            encoder,
            config,
            data,
            tau,
            episodes,
            out,
            seed,
        } => offline_rl(mode, &encoder, config.as_deref(), data.as_deref(), tau, episodes, &out, seed),
        Command::Analyze {
            kind,
            encoder,
            encoder_b,
            data,
            config,
            out,
            seed,
        } => analyze(kind, &encoder, encoder_b.as_deref(), data.as_deref(), config.as_deref(), &out, seed),
        Command::Repro { suite, out, seed } => repro(&suite, &out, seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
