use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use gridqa::agent::{Agent, Dims};
use gridqa::checkpoint;
use gridqa::config::{RawConfig, RunConfig};
use gridqa::grid::render_ascii;
use gridqa::harness::{self, StopSpec};
use gridqa::oracle::{self, OracleMode};
use gridqa::training;
use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "gridqa",
    version,
    about = "Question-asking RL agent in procedurally generated gridworlds"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Pretrain the question policy on the grammar corpus and save it
    PretrainLm(RunArgs),
    /// Train an agent on the small world with the train-mode oracle
    Train(RunArgs),
    /// Continue training a checkpoint on the large world (test or random oracle)
    Transfer(RunArgs),
    /// Run the transfer twice: truthful oracle, then random oracle
    Ablate(RunArgs),
    /// Play episodes from a checkpoint without gradient updates
    Eval(EvalArgs),
    /// Print every sentence of the question grammar
    EnumerateGrammar,
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    /// Flat key=value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to initialize from (full model, or a pretrained LM for train)
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory for metrics.csv, transcripts.jsonl and final.ckpt
    #[arg(long)]
    out_dir: Option<PathBuf>,

    // config-key overrides
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    env: Option<String>,
    #[arg(long)]
    oracle: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long = "eps_clip")]
    eps_clip: Option<String>,
    #[arg(long)]
    gamma: Option<String>,
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long)]
    c1: Option<String>,
    #[arg(long)]
    c2: Option<String>,
    #[arg(long)]
    c3: Option<String>,
    #[arg(long)]
    c4: Option<String>,
    #[arg(long)]
    c5: Option<String>,
    #[arg(long = "mi_enabled")]
    mi_enabled: Option<String>,
    #[arg(long = "mi_samples")]
    mi_samples: Option<String>,
    #[arg(long = "mi_weight")]
    mi_weight: Option<String>,
    #[arg(long)]
    episodes: Option<String>,
    #[arg(long)]
    seed: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Print the first episode step by step
    #[arg(long)]
    render: bool,
}

enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Runtime(e.into())
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            std::process::exit(0);
        }
        Err(e) => {
            eprint!("{e}");
            std::process::exit(1);
        }
    };
    match dispatch(cli) {
        Ok(()) => {}
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            std::process::exit(1);
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            std::process::exit(2);
        }
    }
}

fn resolve(
    args: &RunArgs,
    default_env: &str,
    default_oracle: OracleMode,
) -> Result<RunConfig, CliError> {
    let mut raw = match &args.config {
        Some(path) => RawConfig::read(path)?,
        None => RawConfig::default(),
    };
    let overrides: [(&str, &Option<String>); 17] = [
        ("model", &args.model),
        ("env", &args.env),
        ("oracle", &args.oracle),
        ("alpha", &args.alpha),
        ("eps_clip", &args.eps_clip),
        ("gamma", &args.gamma),
        ("lambda", &args.lambda),
        ("c1", &args.c1),
        ("c2", &args.c2),
        ("c3", &args.c3),
        ("c4", &args.c4),
        ("c5", &args.c5),
        ("mi_enabled", &args.mi_enabled),
        ("mi_samples", &args.mi_samples),
        ("mi_weight", &args.mi_weight),
        ("episodes", &args.episodes),
        ("seed", &args.seed),
    ];
    for (key, value) in overrides {
        if let Some(v) = value {
            raw.set(key, v.clone());
        }
    }
    if let Some(dir) = &args.out_dir {
        raw.set("out_dir", dir.display().to_string());
    }
    Ok(RunConfig::resolve(&raw, default_env, default_oracle)?)
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::EnumerateGrammar => {
            use std::io::Write;
            let stdout = std::io::stdout();
            let mut out = stdout.lock();
            for sentence in oracle::enumerate_grammar() {
                let line = oracle::sentence(&sentence[1..sentence.len() - 1]);
                if let Err(e) = writeln!(out, "{line}") {
                    if e.kind() == std::io::ErrorKind::BrokenPipe {
                        return Ok(());
                    }
                    return Err(e.into());
                }
            }
            Ok(())
        }
        Cmd::PretrainLm(args) => {
            let cfg = resolve(&args, "MultiRoom-N2-S4", OracleMode::Train)?;
            if !cfg.model.asks_questions() {
                return Err(CliError::Usage(
                    "the baseline has no question policy to pretrain".into(),
                ));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut agent: Agent<f32> = Agent::new(cfg.model, Dims::default(), &mut rng);
            let report = training::pretrain_lm(
                &mut agent,
                &mut rng,
                harness::PRETRAIN_EPOCH_CAP,
                harness::PRETRAIN_TARGET_CE,
                harness::PRETRAIN_LR,
            )?;
            let validity = training::grammar_validity_audit(&agent, 1000, &mut rng)?;
            let out = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
            std::fs::create_dir_all(&out).map_err(anyhow::Error::from)?;
            let path = out.join("lm.ckpt");
            let mut entries = IndexMap::new();
            for (name, p) in agent.params.iter() {
                if name.starts_with("lm.") {
                    entries.insert(format!("param/{name}"), p.value.clone());
                }
            }
            checkpoint::save(&path, &entries)?;
            println!(
                "pretrained {} epochs, final cross-entropy {:.4} nats/token, {:.1}% of sampled questions grammatical",
                report.epochs_run,
                report.final_ce,
                100.0 * validity
            );
            println!("saved {}", path.display());
            Ok(())
        }
        Cmd::Train(args) => {
            let cfg = resolve(&args, "MultiRoom-N2-S4", OracleMode::Train)?;
            let outcome = harness::run_training(
                &cfg,
                &StopSpec::until_convergence(),
                args.checkpoint.as_deref(),
            )?;
            report_run("train", &cfg, &outcome.result);
            Ok(())
        }
        Cmd::Transfer(args) => {
            let ckpt = args
                .checkpoint
                .clone()
                .ok_or_else(|| CliError::Usage("transfer requires --checkpoint".into()))?;
            let cfg = resolve(&args, "MultiRoom-N4-S5", OracleMode::Test)?;
            let outcome = harness::run_transfer(&cfg, &StopSpec::until_convergence(), &ckpt)?;
            report_run("transfer", &cfg, &outcome.result);
            Ok(())
        }
        Cmd::Ablate(args) => {
            let ckpt = args
                .checkpoint
                .clone()
                .ok_or_else(|| CliError::Usage("ablate requires --checkpoint".into()))?;
            for mode in ["test", "random"] {
                let mut sub = args.clone();
                sub.oracle = Some(mode.to_string());
                if let Some(dir) = &args.out_dir {
                    sub.out_dir = Some(dir.join(mode));
                }
                let cfg = resolve(&sub, "MultiRoom-N4-S5", OracleMode::Test)?;
                let outcome = harness::run_transfer(&cfg, &StopSpec::until_convergence(), &ckpt)?;
                report_run(&format!("ablate[{mode}]"), &cfg, &outcome.result);
            }
            Ok(())
        }
        Cmd::Eval(args) => {
            let ckpt = args
                .run
                .checkpoint
                .clone()
                .ok_or_else(|| CliError::Usage("eval requires --checkpoint".into()))?;
            let mut run_args = args.run.clone();
            if run_args.episodes.is_none() {
                run_args.episodes = Some("100".to_string());
            }
            let cfg = resolve(&run_args, "MultiRoom-N2-S4", OracleMode::Test)?;
            if args.render {
                render_one_episode(&cfg, &ckpt)?;
            }
            let (mean, returns) = harness::run_eval(&cfg, &ckpt)?;
            println!(
                "eval: {} episodes on {}, mean return {:.4}",
                returns.len(),
                cfg.env.name(),
                mean
            );
            Ok(())
        }
    }
}

fn report_run(label: &str, cfg: &RunConfig, result: &gridqa::harness::RunResult) {
    println!(
        "{label}: model={} env={} episodes={} final 100-episode moving average {:.4}",
        cfg.model.name(),
        cfg.env.name(),
        result.episodes_run,
        result.final_ma
    );
    let top: Vec<String> = result
        .question_histogram
        .iter()
        .take(5)
        .map(|(q, n)| format!("{q:?} x{n}"))
        .collect();
    if !top.is_empty() {
        println!("{label}: most frequent questions: {}", top.join(", "));
    }
    if let Some(dir) = &cfg.out_dir {
        println!("{label}: wrote {}", dir.display());
    }
}

fn render_one_episode(cfg: &RunConfig, ckpt: &std::path::Path) -> Result<(), CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut agent: Agent<f32> = Agent::new(cfg.model, Dims::default(), &mut rng);
    checkpoint::load_agent(ckpt, &mut agent, None)?;
    let buffer = training::collect_episode(&agent, &cfg.env, cfg.oracle, &mut rng, None)?;
    for (t, step) in buffer.steps.iter().enumerate() {
        println!("--- step {t} ---");
        print!("{}", render_ascii(&step.world));
        if let (Some(r), Some(a)) = (&step.rollout, &step.answer) {
            println!(
                "q: {:?} -> {} (r_q {:+.1})",
                oracle::sentence(&r.question),
                a.verdict.name(),
                a.r_q
            );
        }
        println!("action {} reward {}", step.action, step.reward_env);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use gridqa::agent::ModelKind;

    #[test]
    fn model_kind_helper_consistency() {
        assert!(!ModelKind::Baseline.asks_questions());
        assert_eq!(ModelKind::parse("main"), Some(ModelKind::Main));
    }
}
