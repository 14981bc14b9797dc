//! Episode collection, language-model pretraining, generalized advantage
//! estimation, the clipped action loss, the REINFORCE question loss and the
//! single combined Adam step taken at the end of every episode.
//!
//! Collection runs the forward pass on a throwaway tape; the update replays
//! the episode on a fresh tape with the stored tokens, answers and actions
//! teacher-forced. Under unchanged parameters the replay reproduces every
//! recorded value bit-exactly, which pins the probability ratio to 1 on the
//! first (and by default only) update epoch.

use crate::agent::{Agent, AgentError, AskOut, Bound, ModelKind, QuestionRollout};
use crate::grid::{self, Action, EnvConfig, Observation, WorldState};
use crate::oracle::{self, AnswerCode, OracleMode, Verdict};
use gridqa_autodiff::{adam_step, sample_categorical, AdamState, Grads, Scalar, Tape, Tensor, Var};
use rand::Rng;
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Tape(#[from] gridqa_autodiff::TapeError),
    #[error(transparent)]
    Grid(#[from] grid::GridError),
    #[error("episode buffer is empty")]
    EmptyBuffer,
    #[error("{0}")]
    Invalid(String),
}

type Result<V> = std::result::Result<V, TrainError>;

/// Loss weights and optimizer settings; defaults follow the per-model grid
/// search results.
#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    pub alpha: f64,
    pub eps_clip: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub c5: f64,
    pub mi_enabled: bool,
    pub mi_samples: usize,
    pub mi_weight: f64,
    /// Update epochs per episode. 1 keeps the probability ratio at exactly 1;
    /// larger values re-replay with moved parameters, activating the clip.
    pub update_epochs: usize,
}

impl TrainConfig {
    pub fn defaults(kind: ModelKind) -> Self {
        let base = TrainConfig {
            alpha: 0.0005,
            eps_clip: 0.2,
            gamma: 0.99,
            lambda: 0.95,
            c1: 1.0,
            c2: 0.1,
            c3: 0.25,
            c4: 1.0,
            c5: 0.2,
            mi_enabled: false,
            mi_samples: 8,
            mi_weight: 0.0,
            update_epochs: 1,
        };
        match kind {
            ModelKind::Main => base,
            ModelKind::Film => TrainConfig { alpha: 0.0001, eps_clip: 0.15, c5: 0.5, ..base },
            ModelKind::Baseline => TrainConfig {
                alpha: 0.001,
                c3: 0.0,
                c4: 0.0,
                c5: 0.0,
                ..base
            },
        }
    }
}

/// One transition as recorded during collection.
#[derive(Clone, Debug)]
pub struct StepRecord<T> {
    pub obs: Observation,
    /// World state the oracle answered against (before the action).
    pub world: WorldState,
    pub rollout: Option<QuestionRollout<T>>,
    pub answer: Option<AnswerCode>,
    pub action: usize,
    pub action_logprob: T,
    pub action_entropy: T,
    pub value: T,
    pub reward_env: f32,
}

/// Per-episode transition store, consumed by exactly one update and emptied
/// afterwards.
#[derive(Clone, Debug, Default)]
pub struct EpisodeBuffer<T> {
    /// Sampled initial memory hidden state (the cell starts at zero).
    pub h0: Vec<T>,
    pub steps: Vec<StepRecord<T>>,
}

impl<T> EpisodeBuffer<T> {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn clear(&mut self) {
        self.steps.clear();
        self.h0.clear();
    }
}

impl<T: Scalar> EpisodeBuffer<T> {
    pub fn episode_return(&self) -> f64 {
        self.steps.iter().map(|s| s.reward_env as f64).sum()
    }

    /// Fraction of steps whose question was a syntax error; `None` for
    /// question-free episodes.
    pub fn syntax_error_rate(&self) -> Option<f64> {
        let answered: Vec<_> = self.steps.iter().filter_map(|s| s.answer.as_ref()).collect();
        if answered.is_empty() {
            return None;
        }
        let bad = answered.iter().filter(|a| a.verdict == Verdict::SyntaxError).count();
        Some(bad as f64 / answered.len() as f64)
    }
}

enum StepDrive<'a, R> {
    Sample { rng: &'a mut R, mode: OracleMode, world: &'a WorldState },
    Replay(ReplayData<'a>),
}

/// The scalar-type-independent slice of a step record that teacher-forced
/// replay consumes: tokens, answer bits and the chosen action.
struct ReplayData<'a> {
    tokens: Option<&'a [u16]>,
    eta: Option<[u8; 2]>,
    action: usize,
}

impl<'a> ReplayData<'a> {
    fn of<U: Scalar>(record: &'a StepRecord<U>) -> Self {
        ReplayData {
            tokens: record.rollout.as_ref().map(|r| r.tokens.as_slice()),
            eta: record.answer.as_ref().map(|a| a.eta),
            action: record.action,
        }
    }
}

/// Graph nodes produced by one agent step.
pub struct StepNodes {
    pub rollout: Option<AskOut>,
    pub eo_ask: Var,
    pub hm_prev: Var,
    pub action: usize,
    pub answer: Option<AnswerCode>,
    pub action_logprob: Var,
    pub action_entropy: Var,
    pub value: Var,
    pub h_next: Var,
    pub c_next: Var,
}

fn forward_step<T: Scalar, R: Rng>(
    agent: &Agent<T>,
    tape: &mut Tape<T>,
    bound: &Bound,
    obs: &Observation,
    h: Var,
    c: Var,
    drive: StepDrive<'_, R>,
) -> Result<StepNodes> {
    let (replay, mut sample) = match drive {
        StepDrive::Sample { rng, mode, world } => (None, Some((rng, mode, world))),
        StepDrive::Replay(data) => (Some(data), None),
    };

    let feats = agent.conv_features(tape, bound, obs)?;
    let eo_ask = if agent.kind == ModelKind::Film {
        let neutral = agent.resblock_stack(tape, bound, feats, None)?;
        agent.head_encoding(tape, bound, neutral)?
    } else {
        agent.head_encoding(tape, bound, feats)?
    };

    let (rollout, answer) = if agent.kind.asks_questions() {
        let out = match (&mut sample, &replay) {
            (Some((rng, ..)), _) => agent.ask(tape, bound, eo_ask, h, rng)?,
            (None, Some(r)) => agent.replay_ask(tape, bound, eo_ask, h, r.tokens.unwrap())?,
            _ => unreachable!(),
        };
        let answer = match (&mut sample, &replay) {
            (Some((rng, mode, world)), _) => Some(oracle::answer(&out.question, world, *mode, rng)),
            _ => None,
        };
        (Some(out), answer)
    } else {
        (None, None)
    };

    let eta_bits = answer
        .as_ref()
        .map(|a| a.eta)
        .or(replay.as_ref().and_then(|r| r.eta));
    let eta_var = eta_bits.map(|bits| agent.eta_input(tape, bits));

    let (eo_act, qa) = match (agent.kind, &rollout, eta_var) {
        (ModelKind::Main, Some(r), Some(eta)) => (eo_ask, Some((r.e_q, eta, r.h_q))),
        (ModelKind::Film, Some(r), Some(eta)) => {
            let cond = tape.concat(&[r.e_q, eta, r.h_q])?;
            let conditioned = agent.resblock_stack(tape, bound, feats, Some(cond))?;
            (agent.head_encoding(tape, bound, conditioned)?, None)
        }
        (ModelKind::Baseline, ..) => (eo_ask, None),
        _ => return Err(TrainError::Invalid("question kind without rollout".into())),
    };

    let act = agent.act(tape, bound, eo_act, qa, h)?;
    let action = match (&mut sample, &replay) {
        (Some((rng, ..)), _) => sample_categorical(tape.value(act.probs).data(), rng)
            .map_err(AgentError::from)?
            .0,
        (None, Some(r)) => r.action,
        _ => unreachable!(),
    };
    let action_logprob = tape.select(act.log_probs, action)?;

    let (h_next, c_next) = agent.memory_update(
        tape,
        bound,
        eo_act,
        rollout.as_ref().map(|r| r.e_q),
        eta_var,
        action,
        h,
        c,
    )?;

    Ok(StepNodes {
        rollout,
        eo_ask,
        hm_prev: h,
        action,
        answer,
        action_logprob,
        action_entropy: act.entropy,
        value: act.value,
        h_next,
        c_next,
    })
}

/// Plays one full episode in a freshly generated layout and records every
/// transition. `max_steps` optionally cuts collection short (test harnesses);
/// the environment's own step limit always applies.
pub fn collect_episode<T: Scalar, R: Rng>(
    agent: &Agent<T>,
    env: &EnvConfig,
    mode: OracleMode,
    rng: &mut R,
    max_steps: Option<usize>,
) -> Result<EpisodeBuffer<T>> {
    let mut world = grid::generate(env, rng);
    let init = agent.init_episode(rng);
    let mut tape = Tape::new();
    let bound = agent.bind(&mut tape);
    let mut h = tape.input(init.hidden.clone());
    let mut c = tape.input(init.cell.clone());
    let mut buffer = EpisodeBuffer { h0: init.hidden.data().to_vec(), steps: Vec::new() };

    loop {
        let obs = grid::observe(&world);
        let nodes = forward_step(
            agent,
            &mut tape,
            &bound,
            &obs,
            h,
            c,
            StepDrive::Sample { rng, mode, world: &world },
        )?;
        let action = Action::from_index(nodes.action)
            .ok_or_else(|| TrainError::Invalid(format!("action index {}", nodes.action)))?;
        let (next_world, reward, done) = grid::step(&world, action)?;

        buffer.steps.push(StepRecord {
            obs,
            world,
            rollout: nodes.rollout.as_ref().map(|r| r.values(&tape)),
            answer: nodes.answer,
            action: nodes.action,
            action_logprob: tape.scalar(nodes.action_logprob),
            action_entropy: tape.scalar(nodes.action_entropy),
            value: tape.scalar(nodes.value),
            reward_env: reward,
        });

        h = nodes.h_next;
        c = nodes.c_next;
        world = next_world;
        if done || max_steps.is_some_and(|cap| buffer.len() >= cap) {
            break;
        }
    }
    Ok(buffer)
}

/// Per-step loss ingredients rebuilt on the update tape.
pub struct ReplayStep {
    pub action_logprob: Var,
    pub action_entropy: Var,
    pub value: Var,
    /// Sum of the question's token log-probabilities (terminator included).
    pub question_logprob: Option<Var>,
    /// Mean token-distribution entropy of the question.
    pub question_entropy: Option<Var>,
    pub eo_ask: Var,
    pub hm_prev: Var,
    pub world: WorldState,
}

/// Re-runs the whole episode teacher-forced on `tape`, backpropagatable
/// through time to the first transition.
pub fn replay_episode<T: Scalar, U: Scalar>(
    agent: &Agent<T>,
    tape: &mut Tape<T>,
    bound: &Bound,
    buffer: &EpisodeBuffer<U>,
) -> Result<Vec<ReplayStep>> {
    if buffer.is_empty() {
        return Err(TrainError::EmptyBuffer);
    }
    let h0: Vec<T> = buffer.h0.iter().map(|&v| T::from_f64(v.as_f64())).collect();
    let mut h = tape.input(Tensor::from_vec(&[agent.dims.mem_hidden], h0));
    let mut c = tape.input(Tensor::zeros(&[agent.dims.mem_hidden]));
    let mut out = Vec::with_capacity(buffer.len());
    for record in &buffer.steps {
        let nodes = forward_step::<T, rand_chacha::ChaCha8Rng>(
            agent,
            tape,
            bound,
            &record.obs,
            h,
            c,
            StepDrive::Replay(ReplayData::of(record)),
        )?;
        let (q_lp, q_ent) = match &nodes.rollout {
            Some(r) => {
                let lps = tape.concat(&r.token_logprobs)?;
                let lp_sum = tape.sum(lps)?;
                let ents = tape.concat(&r.token_entropies)?;
                let ent_mean = tape.mean(ents)?;
                (Some(lp_sum), Some(ent_mean))
            }
            None => (None, None),
        };
        out.push(ReplayStep {
            action_logprob: nodes.action_logprob,
            action_entropy: nodes.action_entropy,
            value: nodes.value,
            question_logprob: q_lp,
            question_entropy: q_ent,
            eo_ask: nodes.eo_ask,
            hm_prev: nodes.hm_prev,
            world: record.world.clone(),
        });
        h = nodes.h_next;
        c = nodes.c_next;
    }
    Ok(out)
}

/// Generalized advantage estimation over a complete episode, bootstrapping
/// V = 0 past the final step (termination and truncation alike). Returns
/// (advantages, value targets) with targets = advantage + V.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if rewards.is_empty() || rewards.len() != values.len() {
        return Err(TrainError::EmptyBuffer);
    }
    let n = rewards.len();
    let mut advantages = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let v_next = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + gamma * v_next - values[t];
        acc = delta + gamma * lambda * acc;
        advantages[t] = acc;
    }
    let targets = advantages.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((advantages, targets))
}

/// Discounted return-to-go: G_t = r_t + gamma * G_{t+1}, i.e. the return
/// earned by the action taken after asking the step's question.
pub fn returns_to_go(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// Clipped-surrogate contribution for one step at given ratio and advantage.
pub fn clipped_term(ratio: f64, advantage: f64, eps: f64) -> f64 {
    advantage * ratio.min(ratio.clamp(1.0 - eps, 1.0 + eps))
}

/// REINFORCE weight for one step's question.
pub fn question_weight(c3: f64, r_q: f64, c4: f64, g: f64) -> f64 {
    c3 * r_q + c4 * g
}

pub struct LossNodes {
    pub action_loss: Var,
    pub question_loss: Option<Var>,
}

/// Builds both per-episode losses on the tape from replayed nodes and the
/// buffer's recorded constants. `old_logprobs`, `advantages` and `targets`
/// are collection-time values and enter as constants.
pub fn build_losses<T: Scalar, U: Scalar>(
    tape: &mut Tape<T>,
    steps: &[ReplayStep],
    buffer: &EpisodeBuffer<U>,
    cfg: &TrainConfig,
    advantages: &[f64],
    targets: &[f64],
) -> Result<LossNodes> {
    let n = steps.len();
    let mut clip_terms = Vec::with_capacity(n);
    let mut value_deltas = Vec::with_capacity(n);
    let mut entropies = Vec::with_capacity(n);
    let mut question_terms = Vec::with_capacity(n);

    let env_rewards: Vec<f64> = buffer.steps.iter().map(|s| s.reward_env as f64).collect();
    let g = returns_to_go(&env_rewards, cfg.gamma);

    for (t, step) in steps.iter().enumerate() {
        let old_lp = tape.scalar_input(T::from_f64(buffer.steps[t].action_logprob.as_f64()));
        let diff = tape.sub(step.action_logprob, old_lp)?;
        let ratio = tape.exp(diff)?;
        let clipped = tape.clamp(
            ratio,
            T::from_f64(1.0 - cfg.eps_clip),
            T::from_f64(1.0 + cfg.eps_clip),
        )?;
        let lower = tape.min2(ratio, clipped)?;
        clip_terms.push(tape.mul_scalar(lower, T::from_f64(advantages[t]))?);

        let target = tape.scalar_input(T::from_f64(targets[t]));
        value_deltas.push(tape.sub(step.value, target)?);
        entropies.push(step.action_entropy);

        if let Some(q_lp) = step.question_logprob {
            let r_q = buffer.steps[t]
                .answer
                .as_ref()
                .map(|a| a.r_q as f64)
                .unwrap_or(0.0);
            let w = question_weight(cfg.c3, r_q, cfg.c4, g[t]);
            let weighted = tape.mul_scalar(q_lp, T::from_f64(w))?;
            let ent = tape.mul_scalar(step.question_entropy.unwrap(), T::from_f64(cfg.c5))?;
            question_terms.push(tape.add(weighted, ent)?);
        }
    }

    let clip_vec = tape.concat(&clip_terms)?;
    let l_clip = tape.mean(clip_vec)?;
    let delta_vec = tape.concat(&value_deltas)?;
    let huber_vec = tape.huber(delta_vec)?;
    let l_vf = tape.mean(huber_vec)?;
    let ent_vec = tape.concat(&entropies)?;
    let h_a = tape.mean(ent_vec)?;

    let neg_vf = tape.mul_scalar(l_vf, T::from_f64(-cfg.c1))?;
    let ent_term = tape.mul_scalar(h_a, T::from_f64(cfg.c2))?;
    let partial = tape.add(l_clip, neg_vf)?;
    let action_loss = tape.add(partial, ent_term)?;

    let question_loss = if question_terms.is_empty() {
        None
    } else {
        let qv = tape.concat(&question_terms)?;
        Some(tape.mean(qv)?)
    };

    Ok(LossNodes { action_loss, question_loss })
}

#[derive(Clone, Debug, Default)]
pub struct UpdateMetrics {
    pub episode_return: f64,
    pub length: usize,
    pub loss_action: Option<f64>,
    pub loss_question: Option<f64>,
    pub syntax_error_rate: Option<f64>,
    pub mi_mean: Option<f64>,
    /// True when a non-finite loss or gradient aborted the update; the
    /// parameters were left untouched.
    pub skipped_non_finite: bool,
}

/// One combined update: replay, build L = L_a + L_q (optionally + MI bonus),
/// take a single Adam step on -L per epoch, then empty the buffer.
pub fn episode_update<R: Rng>(
    agent: &mut Agent<f32>,
    adam: &mut AdamState<f32>,
    buffer: &mut EpisodeBuffer<f32>,
    cfg: &TrainConfig,
    oracle_mode: OracleMode,
    rng: &mut R,
) -> Result<UpdateMetrics> {
    if buffer.is_empty() {
        return Err(TrainError::EmptyBuffer);
    }
    let mut metrics = UpdateMetrics {
        episode_return: buffer.episode_return(),
        length: buffer.len(),
        syntax_error_rate: buffer.syntax_error_rate(),
        ..Default::default()
    };

    let rewards: Vec<f64> = buffer.steps.iter().map(|s| s.reward_env as f64).collect();
    let values: Vec<f64> = buffer.steps.iter().map(|s| s.value as f64).collect();
    let (advantages, targets) = compute_gae(&rewards, &values, cfg.gamma, cfg.lambda)?;

    for epoch in 0..cfg.update_epochs.max(1) {
        let mut tape = Tape::new();
        let bound = agent.bind(&mut tape);
        let steps = replay_episode(agent, &mut tape, &bound, buffer)?;

        let mut mi_values = Vec::new();
        let losses = build_losses(&mut tape, &steps, buffer, cfg, &advantages, &targets)?;
        let mut total = losses.action_loss;
        if let Some(q) = losses.question_loss {
            total = tape.add(total, q)?;
        }
        if cfg.mi_enabled && cfg.mi_weight != 0.0 && agent.kind.asks_questions() {
            let mut mi_nodes = Vec::with_capacity(steps.len());
            for (t, step) in steps.iter().enumerate() {
                let (est, node) = crate::mi::estimate_mi(
                    &mut tape,
                    agent,
                    &bound,
                    &buffer.steps[t].obs,
                    step.eo_ask,
                    step.hm_prev,
                    cfg.mi_samples,
                    &step.world,
                    oracle_mode,
                    rng,
                )
                .map_err(|e| TrainError::Invalid(e.to_string()))?;
                mi_values.push(est.mi_nats);
                mi_nodes.push(node);
            }
            let mi_vec = tape.concat(&mi_nodes)?;
            let mi_mean = tape.mean(mi_vec)?;
            let mi_term = tape.mul_scalar(mi_mean, cfg.mi_weight as f32)?;
            total = tape.add(total, mi_term)?;
            metrics.mi_mean =
                Some(mi_values.iter().sum::<f64>() / mi_values.len().max(1) as f64);
        }

        if epoch == 0 {
            metrics.loss_action = Some(tape.scalar(losses.action_loss) as f64);
            metrics.loss_question = losses.question_loss.map(|q| tape.scalar(q) as f64);
        }

        // maximize L by stepping down -L
        let objective = tape.neg(total)?;
        let grads = match tape.gradients(objective) {
            Ok(g) => g,
            Err(e) => {
                log::warn!("skipping update: {e}");
                metrics.skipped_non_finite = true;
                break;
            }
        };
        let named = extract_named_grads(&grads, &bound.named, agent);
        if let Some(bad) = named.iter().find(|(_, g)| !g.all_finite()) {
            let node = tape
                .find_non_finite_grad(&grads)
                .map(|(i, op)| format!("node #{i} ({op})"))
                .unwrap_or_else(|| "unknown node".to_string());
            log::warn!("skipping update: non-finite gradient for {} via {}", bad.0, node);
            metrics.skipped_non_finite = true;
            break;
        }
        adam_step(&mut agent.params, &named, adam, cfg.alpha);
    }

    buffer.clear();
    Ok(metrics)
}

/// Reads per-parameter gradients back out of the tape; parameters off the
/// loss graph come back as zeros.
pub fn extract_named_grads<T: Scalar>(
    grads: &Grads<T>,
    named: &[(String, Var)],
    agent: &Agent<T>,
) -> HashMap<String, Tensor<T>> {
    named
        .iter()
        .map(|(name, var)| {
            let dims = agent.params.get(name).value.dims().to_vec();
            (name.clone(), grads.get_or_zeros(*var, &dims))
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct PretrainReport {
    pub epochs_run: usize,
    pub final_ce: f64,
    pub epoch_ce: Vec<f64>,
    pub reached_target: bool,
}

/// Supervised next-token pretraining of the question policy over the full
/// grammar corpus. Stops when the corpus mean per-token cross-entropy drops
/// to `target_ce` or after `max_epochs`, whichever comes first, then freezes
/// the word embedding table.
///
/// The corpus is the full cross product of the grammar, so the attainable
/// floor is the grammar's conditional entropy (about 0.94 nats per token);
/// a tighter target simply means running to the epoch cap.
pub fn pretrain_lm<R: Rng>(
    agent: &mut Agent<f32>,
    rng: &mut R,
    max_epochs: usize,
    target_ce: f64,
    lr: f64,
) -> Result<PretrainReport> {
    if !agent.kind.asks_questions() {
        return Err(TrainError::Invalid("baseline has no question policy".into()));
    }
    let corpus = oracle::enumerate_grammar();
    let mut adam = AdamState::new(&agent.params);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut report = PretrainReport {
        epochs_run: 0,
        final_ce: corpus_cross_entropy(agent, &corpus)?,
        epoch_ce: Vec::new(),
        reached_target: false,
    };

    for _ in 0..max_epochs {
        // Fisher-Yates shuffle driven by the run RNG
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        for &si in &order {
            let sentence = &corpus[si];
            let mut tape = Tape::new();
            let named = agent.bind_prefix(&mut tape, "lm.");
            let lm = bound_lm(&named);
            let mut h = tape.input(Tensor::zeros(&[agent.dims.lm_hidden]));
            let mut c = tape.input(Tensor::zeros(&[agent.dims.lm_hidden]));
            let mut losses = Vec::with_capacity(sentence.len() - 1);
            for i in 0..sentence.len() - 1 {
                let x = tape.embedding_lookup(sentence[i] as usize, lm.embed)?;
                let (h2, c2) = tape.lstm_cell(x, h, c, lm.w_ih, lm.w_hh, lm.b)?;
                h = h2;
                c = c2;
                let logits = tape.linear(h, lm.head_w, lm.head_b)?;
                losses.push(tape.cross_entropy(logits, sentence[i + 1] as usize)?);
            }
            let all = tape.concat(&losses)?;
            let loss = tape.mean(all)?;
            let grads = tape.gradients(loss)?;
            let by_name = extract_named_grads(&grads, &named, agent);
            adam_step(&mut agent.params, &by_name, &mut adam, lr);
        }
        report.epochs_run += 1;
        let ce = corpus_cross_entropy(agent, &corpus)?;
        report.epoch_ce.push(ce);
        report.final_ce = ce;
        if ce <= target_ce {
            report.reached_target = true;
            break;
        }
    }
    agent.freeze_word_embeddings();
    Ok(report)
}

struct LmHandles {
    embed: Var,
    w_ih: Var,
    w_hh: Var,
    b: Var,
    head_w: Var,
    head_b: Var,
}

fn bound_lm(named: &[(String, Var)]) -> LmHandles {
    let get = |name: &str| {
        named
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .expect("lm parameter missing")
    };
    LmHandles {
        embed: get("lm.embed"),
        w_ih: get("lm.w_ih"),
        w_hh: get("lm.w_hh"),
        b: get("lm.b"),
        head_w: get("lm.head.w"),
        head_b: get("lm.head.b"),
    }
}

/// Mean per-token cross-entropy of the corpus under the current parameters.
pub fn corpus_cross_entropy(agent: &Agent<f32>, corpus: &[Vec<u16>]) -> Result<f64> {
    let mut total = 0.0f64;
    let mut count = 0usize;
    let mut tape = Tape::new();
    let named = agent.bind_prefix(&mut tape, "lm.");
    let lm = bound_lm(&named);
    for sentence in corpus {
        let mut h = tape.input(Tensor::zeros(&[agent.dims.lm_hidden]));
        let mut c = tape.input(Tensor::zeros(&[agent.dims.lm_hidden]));
        for i in 0..sentence.len() - 1 {
            let x = tape.embedding_lookup(sentence[i] as usize, lm.embed)?;
            let (h2, c2) = tape.lstm_cell(x, h, c, lm.w_ih, lm.w_hh, lm.b)?;
            h = h2;
            c = c2;
            let logits = tape.linear(h, lm.head_w, lm.head_b)?;
            let ce = tape.cross_entropy(logits, sentence[i + 1] as usize)?;
            total += tape.scalar(ce) as f64;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Samples `n` questions from the pretrained policy with neutral conditioning
/// (zero observation/memory context) and reports how many parse.
pub fn grammar_validity_audit<R: Rng>(agent: &Agent<f32>, n: usize, rng: &mut R) -> Result<f64> {
    let mut ok = 0usize;
    for _ in 0..n {
        let mut tape = Tape::new();
        let bound = agent.bind(&mut tape);
        let eo = tape.input(Tensor::zeros(&[agent.dims.obs_encoding]));
        let hm = tape.input(Tensor::zeros(&[agent.dims.mem_hidden]));
        let out = agent.ask(&mut tape, &bound, eo, hm, rng)?;
        if oracle::parse(&out.question).is_some() {
            ok += 1;
        }
    }
    Ok(ok as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::Dims;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_agent(kind: ModelKind, seed: u64) -> Agent<f32> {
        Agent::new(kind, Dims::small(), &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn gae_single_step() {
        let (a, t) = compute_gae(&[1.0], &[0.0], 0.99, 0.95).unwrap();
        assert_eq!(a, vec![1.0]);
        assert_eq!(t, vec![1.0]);
    }

    #[test]
    fn gae_worked_two_step_example() {
        let (a, t) = compute_gae(&[0.0, 1.0], &[0.5, 0.4], 0.99, 0.95).unwrap();
        assert_relative_eq!(a[1], 0.6, epsilon = 1e-12);
        assert_relative_eq!(a[0], 0.4603, epsilon = 1e-9);
        assert_relative_eq!(t[0], 0.9603, epsilon = 1e-9);
        assert_relative_eq!(t[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn gae_matches_brute_force_double_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let n = rng.random_range(1..30);
            let rewards: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let values: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let gamma = rng.random_range(0.5..1.0);
            let lambda = rng.random_range(0.5..1.0);
            let (a, _) = compute_gae(&rewards, &values, gamma, lambda).unwrap();
            for t in 0..n {
                let mut brute = 0.0;
                for l in 0..n - t {
                    let v_next = if t + l + 1 < n { values[t + l + 1] } else { 0.0 };
                    let delta = rewards[t + l] + gamma * v_next - values[t + l];
                    brute += (gamma * lambda).powi(l as i32) * delta;
                }
                assert!((a[t] - brute).abs() < 1e-9, "t={t}: {} vs {brute}", a[t]);
            }
        }
    }

    #[test]
    fn gae_rejects_empty() {
        assert!(matches!(compute_gae(&[], &[], 0.99, 0.95), Err(TrainError::EmptyBuffer)));
    }

    #[test]
    fn returns_to_go_example() {
        let g = returns_to_go(&[0.0, 0.0, 1.0], 0.99);
        assert_relative_eq!(g[0], 0.9801, epsilon = 1e-12);
        assert_relative_eq!(g[1], 0.99, epsilon = 1e-12);
        assert_relative_eq!(g[2], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn clip_and_question_arithmetic() {
        assert_relative_eq!(clipped_term(1.5, 2.0, 0.2), 2.4);
        assert_relative_eq!(clipped_term(1.0, 0.7, 0.2), 0.7);
        let w = question_weight(0.25, 0.2, 1.0, 0.5);
        assert_relative_eq!(w * -3.0, -1.65, epsilon = 1e-12);
    }

    #[test]
    fn collected_episode_is_well_formed() {
        let agent = small_agent(ModelKind::Main, 1);
        let env = EnvConfig::new(2, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let buffer = collect_episode(&agent, &env, OracleMode::Train, &mut rng, None).unwrap();
        assert!(!buffer.is_empty());
        assert!(buffer.len() <= env.t_max() as usize);
        assert!(buffer.episode_return() >= 0.0 && buffer.episode_return() <= 1.0);
        for s in &buffer.steps {
            let r = s.rollout.as_ref().unwrap();
            assert_eq!(r.token_logprobs.len(), r.tokens.len());
            assert!(s.answer.is_some());
        }
    }

    #[test]
    fn replay_matches_collection_bit_exactly_and_ratio_is_one() {
        for kind in [ModelKind::Main, ModelKind::Film, ModelKind::Baseline] {
            let agent = small_agent(kind, 3);
            let env = EnvConfig::new(2, 4).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let buffer =
                collect_episode(&agent, &env, OracleMode::Train, &mut rng, Some(6)).unwrap();

            let mut tape = Tape::new();
            let bound = agent.bind(&mut tape);
            let steps = replay_episode(&agent, &mut tape, &bound, &buffer).unwrap();
            for (t, step) in steps.iter().enumerate() {
                assert_eq!(
                    tape.scalar(step.action_logprob),
                    buffer.steps[t].action_logprob,
                    "{kind:?} step {t} action log-prob"
                );
                assert_eq!(tape.scalar(step.value), buffer.steps[t].value);
                assert_eq!(tape.scalar(step.action_entropy), buffer.steps[t].action_entropy);
                if let Some(r) = &buffer.steps[t].rollout {
                    let lp_sum: f32 = r.token_logprobs.iter().sum();
                    // the replay builds the sum from the same nodes
                    let replayed = tape.scalar(step.question_logprob.unwrap());
                    assert_eq!(replayed, lp_sum, "{kind:?} step {t} question log-prob");
                }
            }

            // with unchanged parameters the PPO ratio is exactly 1
            let rewards: Vec<f64> = buffer.steps.iter().map(|s| s.reward_env as f64).collect();
            let values: Vec<f64> = buffer.steps.iter().map(|s| s.value as f64).collect();
            let cfg = TrainConfig::defaults(kind);
            let (adv, targets) = compute_gae(&rewards, &values, cfg.gamma, cfg.lambda).unwrap();
            let mut probe = Tape::new();
            let bound2 = agent.bind(&mut probe);
            let steps2 = replay_episode(&agent, &mut probe, &bound2, &buffer).unwrap();
            for (t, step) in steps2.iter().enumerate() {
                let old = probe.scalar_input(buffer.steps[t].action_logprob);
                let diff = probe.sub(step.action_logprob, old).unwrap();
                let ratio = probe.exp(diff).unwrap();
                assert_eq!(probe.scalar(ratio), 1.0, "{kind:?} ratio at step {t}");
            }
            let losses = build_losses(&mut probe, &steps2, &buffer, &cfg, &adv, &targets).unwrap();
            // L_clip reduces to mean advantage when every ratio is 1
            let mean_adv = adv.iter().sum::<f64>() / adv.len() as f64;
            let _ = losses;
            let mut clip_probe = Tape::new();
            let bound3 = agent.bind(&mut clip_probe);
            let steps3 = replay_episode(&agent, &mut clip_probe, &bound3, &buffer).unwrap();
            let mut terms = Vec::new();
            for (t, step) in steps3.iter().enumerate() {
                let old = clip_probe.scalar_input(buffer.steps[t].action_logprob);
                let diff = clip_probe.sub(step.action_logprob, old).unwrap();
                let ratio = clip_probe.exp(diff).unwrap();
                let clipped = clip_probe
                    .clamp(ratio, 1.0 - cfg.eps_clip as f32, 1.0 + cfg.eps_clip as f32)
                    .unwrap();
                let m = clip_probe.min2(ratio, clipped).unwrap();
                terms.push(clip_probe.mul_scalar(m, adv[t] as f32).unwrap());
            }
            let v = clip_probe.concat(&terms).unwrap();
            let l_clip = clip_probe.mean(v).unwrap();
            assert_relative_eq!(clip_probe.scalar(l_clip) as f64, mean_adv, epsilon = 1e-6);
        }
    }

    #[test]
    fn update_clears_buffer_and_counts_steps() {
        let mut agent = small_agent(ModelKind::Main, 5);
        let mut adam = AdamState::new(&agent.params);
        let env = EnvConfig::new(2, 4).unwrap();
        let cfg = TrainConfig::defaults(ModelKind::Main);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for episode in 1..=3u64 {
            let mut buffer =
                collect_episode(&agent, &env, OracleMode::Train, &mut rng, Some(5)).unwrap();
            let m =
                episode_update(&mut agent, &mut adam, &mut buffer, &cfg, OracleMode::Train, &mut rng)
                    .unwrap();
            assert!(!m.skipped_non_finite);
            assert!(m.loss_action.is_some());
            assert!(m.loss_question.is_some());
            assert_eq!(buffer.len(), 0, "buffer must be emptied after the update");
            assert_eq!(adam.step_count(), episode, "one optimizer step per episode");
        }
    }

    #[test]
    fn baseline_update_touches_only_its_groups() {
        let mut agent = small_agent(ModelKind::Baseline, 7);
        assert!(!agent.params.contains("lm.embed"));
        let mut adam = AdamState::new(&agent.params);
        let env = EnvConfig::new(2, 4).unwrap();
        let cfg = TrainConfig::defaults(ModelKind::Baseline);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut buffer = collect_episode(&agent, &env, OracleMode::Train, &mut rng, Some(5)).unwrap();
        assert!(buffer.steps.iter().all(|s| s.rollout.is_none() && s.answer.is_none()));
        let m = episode_update(&mut agent, &mut adam, &mut buffer, &cfg, OracleMode::Train, &mut rng)
            .unwrap();
        assert!(m.loss_question.is_none());
        assert!(m.syntax_error_rate.is_none());
    }

    #[test]
    fn zero_rewards_zero_entropy_coeffs_leave_params_unchanged() {
        // value head starts at zero, so zeroed rewards mean zero advantages,
        // zero targets and zero gradient everywhere
        let mut agent = small_agent(ModelKind::Main, 9);
        let before = agent.params.clone();
        let mut adam = AdamState::new(&agent.params);
        let env = EnvConfig::new(2, 4).unwrap();
        let mut cfg = TrainConfig::defaults(ModelKind::Main);
        cfg.c2 = 0.0;
        cfg.c5 = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut buffer = collect_episode(&agent, &env, OracleMode::Train, &mut rng, Some(6)).unwrap();
        for s in buffer.steps.iter_mut() {
            s.reward_env = 0.0;
            if let Some(a) = s.answer.as_mut() {
                a.r_q = 0.0;
            }
            assert_eq!(s.value, 0.0, "zero-initialized value head must read 0");
        }
        episode_update(&mut agent, &mut adam, &mut buffer, &cfg, OracleMode::Train, &mut rng)
            .unwrap();
        for (name, p) in agent.params.iter() {
            assert_eq!(p.value, before.get(name).value, "{name} changed");
        }
    }

    #[test]
    fn word_embeddings_fixed_under_rl_updates() {
        let mut agent = small_agent(ModelKind::Main, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        // tiny pretraining run to engage the freeze
        pretrain_lm(&mut agent, &mut rng, 1, 0.0, 0.01).unwrap();
        let table_before = agent.params.get("lm.embed").value.clone();
        let mut adam = AdamState::new(&agent.params);
        let env = EnvConfig::new(2, 4).unwrap();
        let cfg = TrainConfig::defaults(ModelKind::Main);
        for _ in 0..3 {
            let mut buffer =
                collect_episode(&agent, &env, OracleMode::Train, &mut rng, Some(5)).unwrap();
            episode_update(&mut agent, &mut adam, &mut buffer, &cfg, OracleMode::Train, &mut rng)
                .unwrap();
        }
        assert_eq!(agent.params.get("lm.embed").value, table_before);
    }

    #[test]
    fn nan_reward_aborts_update_and_preserves_params() {
        let mut agent = small_agent(ModelKind::Main, 13);
        let before = agent.params.clone();
        let mut adam = AdamState::new(&agent.params);
        let env = EnvConfig::new(2, 4).unwrap();
        let cfg = TrainConfig::defaults(ModelKind::Main);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut buffer = collect_episode(&agent, &env, OracleMode::Train, &mut rng, Some(4)).unwrap();
        buffer.steps[0].reward_env = f32::NAN;
        let m = episode_update(&mut agent, &mut adam, &mut buffer, &cfg, OracleMode::Train, &mut rng)
            .unwrap();
        assert!(m.skipped_non_finite);
        assert_eq!(buffer.len(), 0);
        for (name, p) in agent.params.iter() {
            assert_eq!(p.value, before.get(name).value, "{name} changed");
        }
    }

    #[test]
    fn untrained_lm_scores_near_uniform() {
        let agent = small_agent(ModelKind::Main, 15);
        let corpus = oracle::enumerate_grammar();
        let ce = corpus_cross_entropy(&agent, &corpus).unwrap();
        let uniform = (crate::oracle::VOCAB_SIZE as f64).ln();
        assert!((ce - uniform).abs() < 0.35, "ce {ce} vs ln(V) {uniform}");
    }

    #[test]
    fn pretraining_loss_decreases() {
        let mut agent = small_agent(ModelKind::Main, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let report = pretrain_lm(&mut agent, &mut rng, 5, 0.0, 0.01).unwrap();
        assert_eq!(report.epochs_run, 5);
        let mut prev = f64::INFINITY;
        for &ce in &report.epoch_ce {
            assert!(ce < prev, "cross-entropy must strictly decrease: {:?}", report.epoch_ce);
            prev = ce;
        }
        assert!(agent.params.get("lm.embed").frozen);
    }
}
