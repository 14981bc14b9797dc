//! Run orchestration: training runs, curriculum transfer with a test-mode or
//! random oracle, per-seed outputs and cross-seed aggregation.

use crate::agent::{Agent, Dims};
use crate::checkpoint::{self, CheckpointError, Coverage};
use crate::config::RunConfig;
use crate::metrics::{MetricsWriter, MovingAverage, TranscriptRecord, TranscriptWriter};
use crate::oracle::{self, OracleMode};
use crate::training::{self, collect_episode, episode_update, TrainError};
use gridqa_autodiff::AdamState;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::path::Path;
use thiserror::Error;

/// Pretraining schedule for the question policy: epoch cap, target mean
/// per-token cross-entropy, Adam learning rate.
pub const PRETRAIN_EPOCH_CAP: usize = 200;
pub const PRETRAIN_TARGET_CE: f64 = 0.3;
pub const PRETRAIN_LR: f64 = 0.01;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("transfer runs must use the test or random oracle")]
    TrainOracleInTransfer,
}

type Result<V> = std::result::Result<V, HarnessError>;

/// Early-stop rules layered on top of the episode budget: an optional
/// moving-average target and the convergence rule (stop once the window mean
/// moves less than `delta` across `span` episodes).
#[derive(Clone, Copy, Debug, Default)]
pub struct StopSpec {
    pub target_ma: Option<f64>,
    pub convergence: Option<Convergence>,
}

#[derive(Clone, Copy, Debug)]
pub struct Convergence {
    pub span: usize,
    pub delta: f64,
}

impl StopSpec {
    /// Budget-only: run every configured episode.
    pub fn budget_only() -> Self {
        StopSpec::default()
    }

    /// The default command-line behavior: run until the 100-episode moving
    /// average changes by less than 0.01 over 500 episodes, or the budget.
    pub fn until_convergence() -> Self {
        StopSpec { target_ma: None, convergence: Some(Convergence { span: 500, delta: 0.01 }) }
    }

    pub fn with_target(mut self, target: f64) -> Self {
        self.target_ma = Some(target);
        self
    }
}

/// Everything a finished run reports.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub returns: Vec<f32>,
    pub ma100: Vec<f64>,
    pub syntax_rates: Vec<Option<f64>>,
    /// Parsed question texts and their counts, most frequent first;
    /// ungrammatical questions pool under `<invalid>`.
    pub question_histogram: Vec<(String, usize)>,
    pub episodes_run: usize,
    pub final_ma: f64,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub result: RunResult,
    pub agent: Agent<f32>,
    pub adam: AdamState<f32>,
}

/// Trains a fresh agent (pretraining the question policy first unless a
/// checkpoint supplies it) and optionally writes metrics, transcripts and a
/// final checkpoint under `cfg.out_dir`.
pub fn run_training(
    cfg: &RunConfig,
    stop: &StopSpec,
    init_checkpoint: Option<&Path>,
) -> Result<RunOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut agent: Agent<f32> = Agent::new(cfg.model, Dims::default(), &mut rng);
    let mut adam = AdamState::new(&agent.params);

    let mut pretrained = false;
    if let Some(path) = init_checkpoint {
        let coverage = checkpoint::load_agent(path, &mut agent, Some(&mut adam))?;
        agent.freeze_word_embeddings();
        pretrained = true;
        log::info!("initialized from {} ({coverage:?})", path.display());
    }
    if cfg.model.asks_questions() && !pretrained {
        let report = training::pretrain_lm(
            &mut agent,
            &mut rng,
            PRETRAIN_EPOCH_CAP,
            PRETRAIN_TARGET_CE,
            PRETRAIN_LR,
        )?;
        log::info!(
            "pretrained question policy: {} epochs, final cross-entropy {:.4} (target reached: {})",
            report.epochs_run,
            report.final_ce,
            report.reached_target
        );
    }

    let result = run_loop(&mut agent, &mut adam, cfg, stop, &mut rng)?;
    if let Some(dir) = &cfg.out_dir {
        checkpoint::save_agent(&dir.join("final.ckpt"), &agent, Some(&adam))?;
    }
    Ok(RunOutcome { result, agent, adam })
}

/// Continues training a checkpointed agent in a new environment. The oracle
/// must be in test or random mode: transfer never pays the train-mode
/// identification bonus.
pub fn run_transfer(cfg: &RunConfig, stop: &StopSpec, checkpoint_path: &Path) -> Result<RunOutcome> {
    if cfg.oracle == OracleMode::Train {
        return Err(HarnessError::TrainOracleInTransfer);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut agent: Agent<f32> = Agent::new(cfg.model, Dims::default(), &mut rng);
    let mut adam = AdamState::new(&agent.params);
    let coverage = checkpoint::load_agent(checkpoint_path, &mut agent, Some(&mut adam))?;
    if coverage != Coverage::Full {
        return Err(CheckpointError::SchemaMismatch {
            missing: vec!["full parameter set".to_string()],
            unexpected: vec![],
        }
        .into());
    }
    agent.freeze_word_embeddings();

    let result = run_loop(&mut agent, &mut adam, cfg, stop, &mut rng)?;
    if let Some(dir) = &cfg.out_dir {
        checkpoint::save_agent(&dir.join("final.ckpt"), &agent, Some(&adam))?;
    }
    Ok(RunOutcome { result, agent, adam })
}

/// Runs episodes without gradient updates and reports the returns.
pub fn run_eval(cfg: &RunConfig, checkpoint_path: &Path) -> Result<(f64, Vec<f32>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut agent: Agent<f32> = Agent::new(cfg.model, Dims::default(), &mut rng);
    checkpoint::load_agent(checkpoint_path, &mut agent, None)?;
    let mut returns = Vec::with_capacity(cfg.episodes);
    for _ in 0..cfg.episodes {
        let buffer = collect_episode(&agent, &cfg.env, cfg.oracle, &mut rng, None)?;
        returns.push(buffer.episode_return() as f32);
    }
    let mean = returns.iter().map(|&r| r as f64).sum::<f64>() / returns.len().max(1) as f64;
    Ok((mean, returns))
}

fn run_loop(
    agent: &mut Agent<f32>,
    adam: &mut AdamState<f32>,
    cfg: &RunConfig,
    stop: &StopSpec,
    rng: &mut ChaCha8Rng,
) -> Result<RunResult> {
    let io_err = |path: &Path| {
        let p = path.display().to_string();
        move |source: std::io::Error| HarnessError::Io { path: p.clone(), source }
    };
    let mut writers = match &cfg.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
            let metrics =
                MetricsWriter::create(&dir.join("metrics.csv")).map_err(io_err(dir))?;
            let transcripts =
                TranscriptWriter::create(&dir.join("transcripts.jsonl")).map_err(io_err(dir))?;
            Some((metrics, transcripts))
        }
        None => None,
    };

    let mut ma = MovingAverage::new(100);
    let mut result = RunResult {
        returns: Vec::new(),
        ma100: Vec::new(),
        syntax_rates: Vec::new(),
        question_histogram: Vec::new(),
        episodes_run: 0,
        final_ma: 0.0,
    };
    let mut histogram: HashMap<String, usize> = HashMap::new();

    for episode in 1..=cfg.episodes {
        let mut buffer = collect_episode(agent, &cfg.env, cfg.oracle, rng, None)?;

        if let Some((_, transcripts)) = writers.as_mut() {
            let last = buffer.len() - 1;
            for (t, step) in buffer.steps.iter().enumerate() {
                let rec = TranscriptRecord {
                    episode,
                    t,
                    question: step.rollout.as_ref().map(|r| oracle::sentence(&r.question)),
                    verdict: step.answer.as_ref().map(|a| a.verdict.name()),
                    eta: step.answer.as_ref().map(|a| a.eta),
                    r_q: step.answer.as_ref().map(|a| a.r_q),
                    action: step.action,
                    r_e: step.reward_env,
                    done: t == last,
                };
                transcripts
                    .record(&rec)
                    .map_err(io_err(cfg.out_dir.as_ref().unwrap()))?;
            }
            transcripts.flush().map_err(io_err(cfg.out_dir.as_ref().unwrap()))?;
        }
        for step in &buffer.steps {
            if let Some(r) = &step.rollout {
                let key = if oracle::parse(&r.question).is_some() {
                    oracle::sentence(&r.question)
                } else {
                    "<invalid>".to_string()
                };
                *histogram.entry(key).or_insert(0) += 1;
            }
        }

        let m = episode_update(agent, adam, &mut buffer, &cfg.train, cfg.oracle, rng)?;
        let current_ma = ma.push(m.episode_return);
        result.returns.push(m.episode_return as f32);
        result.ma100.push(current_ma);
        result.syntax_rates.push(m.syntax_error_rate);
        result.episodes_run = episode;
        result.final_ma = current_ma;

        if let Some((metrics, _)) = writers.as_mut() {
            metrics
                .row(
                    episode,
                    m.episode_return,
                    m.length,
                    current_ma,
                    m.loss_action,
                    m.loss_question,
                    m.syntax_error_rate,
                )
                .map_err(io_err(cfg.out_dir.as_ref().unwrap()))?;
        }

        if ma.is_full() {
            if let Some(target) = stop.target_ma {
                if current_ma >= target {
                    log::info!("episode {episode}: moving average {current_ma:.3} reached target");
                    break;
                }
            }
            if let Some(conv) = stop.convergence {
                if episode > conv.span + 100 {
                    let past = result.ma100[episode - 1 - conv.span];
                    if (current_ma - past).abs() < conv.delta {
                        log::info!("episode {episode}: converged ({past:.4} -> {current_ma:.4})");
                        break;
                    }
                }
            }
        }
    }

    let mut hist: Vec<(String, usize)> = histogram.into_iter().collect();
    hist.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    result.question_histogram = hist;
    Ok(result)
}

/// Sample mean and standard deviation (n - 1) of per-seed final moving
/// averages. A single seed reports zero deviation.
pub fn aggregate(finals: &[f64]) -> (f64, f64) {
    assert!(!finals.is_empty(), "aggregate needs at least one seed");
    let n = finals.len() as f64;
    let mean = finals.iter().sum::<f64>() / n;
    if finals.len() == 1 {
        log::warn!("aggregating a single seed: reporting zero standard deviation");
        return (mean, 0.0);
    }
    let var = finals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn aggregate_matches_hand_arithmetic() {
        let (mean, std) = aggregate(&[0.5, 0.7]);
        assert_relative_eq!(mean, 0.6);
        assert_relative_eq!(std, 0.1414, epsilon = 1e-4);
    }

    #[test]
    fn aggregate_degenerate_cases() {
        let (mean, std) = aggregate(&[0.42, 0.42, 0.42]);
        assert_relative_eq!(mean, 0.42);
        assert_relative_eq!(std, 0.0);
        let (mean, std) = aggregate(&[0.9]);
        assert_relative_eq!(mean, 0.9);
        assert_eq!(std, 0.0);
    }

    #[test]
    fn transfer_rejects_train_oracle() {
        let raw = crate::config::RawConfig::parse("oracle = train").unwrap();
        let cfg =
            crate::config::RunConfig::resolve(&raw, "MultiRoom-N4-S5", OracleMode::Test).unwrap();
        let err = run_transfer(&cfg, &StopSpec::budget_only(), Path::new("/nonexistent")).unwrap_err();
        assert!(matches!(err, HarnessError::TrainOracleInTransfer));
    }
}
