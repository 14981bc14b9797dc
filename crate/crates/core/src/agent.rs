//! The agent architecture: CNN observation encoder, memory LSTM, LSTM
//! language-model question policy, action policy with a value head, the
//! FiLM-conditioned variant and the question-free baseline.
//!
//! Forward passes always run on a [`Tape`], both for episode collection and
//! for the loss replay, so recorded values and re-evaluated values are
//! bit-identical by construction.

use crate::grid::{Observation, COLOR_CODES, KIND_CODES, NUM_ACTIONS, STATE_CODES, VIEW};
use crate::oracle::{EOS, SOS, VOCAB_SIZE};
use gridqa_autodiff::{
    sample_categorical, ParamGroup, ParamSet, Scalar, Tape, TapeError, Tensor, Var,
};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

/// Logit offset that removes `<sos>` from the sampling distribution. Kept
/// finite so entropy terms stay NaN-free (`0 * -1e9 = 0`).
const SOS_MASK: f64 = -1e9;
/// Answer vector length.
pub const ETA_LEN: usize = 2;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("{0} requires a question-asking model kind")]
    NeedsQuestions(&'static str),
    #[error("sampling failed: {0}")]
    Sample(#[from] gridqa_autodiff::SampleError),
}

type Result<V> = std::result::Result<V, AgentError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Main,
    Film,
    Baseline,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Main => "main",
            ModelKind::Film => "film",
            ModelKind::Baseline => "baseline",
        }
    }

    pub fn parse(s: &str) -> Option<ModelKind> {
        match s {
            "main" => Some(ModelKind::Main),
            "film" => Some(ModelKind::Film),
            "baseline" => Some(ModelKind::Baseline),
            _ => None,
        }
    }

    pub fn asks_questions(self) -> bool {
        !matches!(self, ModelKind::Baseline)
    }
}

/// Layer widths. Defaults are the training-scale sizes; tests shrink them so
/// finite-difference checks over whole losses stay cheap.
#[derive(Clone, Copy, Debug)]
pub struct Dims {
    pub obs_embed: usize,
    pub obs_encoding: usize,
    pub word_embed: usize,
    pub lm_hidden: usize,
    pub mem_hidden: usize,
    pub trunk: usize,
    pub conv1: usize,
    pub conv2: usize,
    pub film_blocks: usize,
    pub token_cap: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Dims {
            obs_embed: 8,
            obs_encoding: 64,
            word_embed: 32,
            lm_hidden: 128,
            mem_hidden: 128,
            trunk: 128,
            conv1: 16,
            conv2: 32,
            film_blocks: 5,
            token_cap: 8,
        }
    }
}

impl Dims {
    /// Small configuration for gradient-check and unit tests; widths are
    /// pairwise distinct so transposed shapes cannot silently line up.
    pub fn small() -> Self {
        Dims {
            obs_embed: 2,
            obs_encoding: 5,
            word_embed: 3,
            lm_hidden: 4,
            mem_hidden: 6,
            trunk: 7,
            conv1: 2,
            conv2: 3,
            film_blocks: 2,
            token_cap: 8,
        }
    }

    /// Spatial side after the two valid 3x3 convolutions.
    fn conv_out_side(&self) -> usize {
        VIEW - 4
    }

    fn conv_flat(&self) -> usize {
        self.conv2 * self.conv_out_side() * self.conv_out_side()
    }

    /// Width of the memory LSTM input [e^o, e^q, eta, one-hot action].
    pub fn mem_input(&self) -> usize {
        self.obs_encoding + self.word_embed + ETA_LEN + NUM_ACTIONS
    }

    /// Width of the action trunk input for a given kind. The main model sees
    /// [e^o, e^q, eta, h^q, h^m]; FiLM folds the question into e^o instead,
    /// and the baseline has no question at all.
    pub fn policy_input(&self, kind: ModelKind) -> usize {
        match kind {
            ModelKind::Main => {
                self.obs_encoding + self.word_embed + ETA_LEN + self.lm_hidden + self.mem_hidden
            }
            ModelKind::Film | ModelKind::Baseline => self.obs_encoding + self.mem_hidden,
        }
    }

    /// Width of the FiLM conditioning vector [e^q, eta, h^q].
    pub fn film_cond(&self) -> usize {
        self.word_embed + ETA_LEN + self.lm_hidden
    }
}

/// Recurrent state carried across steps; reinitialized at each episode start
/// with the hidden drawn from a standard normal and the cell zeroed.
#[derive(Clone, Debug)]
pub struct AgentState<T> {
    pub hidden: Tensor<T>,
    pub cell: Tensor<T>,
}

/// One question rollout as plain values: the sampled tokens (terminator
/// included when one was sampled), the question with markers stripped,
/// per-token log-probabilities and entropies, the final LM hidden state and
/// the mean-pooled question embedding.
#[derive(Clone, Debug)]
pub struct QuestionRollout<T> {
    pub tokens: Vec<u16>,
    pub question: Vec<u16>,
    pub token_logprobs: Vec<T>,
    pub token_entropies: Vec<T>,
    pub h_q: Vec<T>,
    pub e_q: Vec<T>,
}

/// Question rollout as live graph nodes.
pub struct AskOut {
    pub tokens: Vec<u16>,
    pub question: Vec<u16>,
    pub token_logprobs: Vec<Var>,
    pub token_entropies: Vec<Var>,
    pub h_q: Var,
    pub e_q: Var,
}

impl AskOut {
    pub fn values<T: Scalar>(&self, tape: &Tape<T>) -> QuestionRollout<T> {
        QuestionRollout {
            tokens: self.tokens.clone(),
            question: self.question.clone(),
            token_logprobs: self.token_logprobs.iter().map(|&v| tape.scalar(v)).collect(),
            token_entropies: self.token_entropies.iter().map(|&v| tape.scalar(v)).collect(),
            h_q: tape.value(self.h_q).data().to_vec(),
            e_q: tape.value(self.e_q).data().to_vec(),
        }
    }
}

/// Action-policy forward outputs.
pub struct ActOut {
    pub probs: Var,
    pub log_probs: Var,
    pub value: Var,
    pub entropy: Var,
}

struct FilmVars {
    conv_w: Var,
    conv_b: Var,
    cond_w: Var,
    cond_b: Var,
}

struct LmVars {
    embed: Var,
    w_ih: Var,
    w_hh: Var,
    b: Var,
    head_w: Var,
    head_b: Var,
    proj_w: Var,
    proj_b: Var,
}

/// Parameter handles on a specific tape, plus the name/handle pairs used to
/// read gradients back out.
pub struct Bound {
    embed_kind: Var,
    embed_color: Var,
    embed_state: Var,
    conv1_w: Var,
    conv1_b: Var,
    conv2_w: Var,
    conv2_b: Var,
    cnn_fc_w: Var,
    cnn_fc_b: Var,
    film: Vec<FilmVars>,
    mem_w_ih: Var,
    mem_w_hh: Var,
    mem_b: Var,
    lm: Option<LmVars>,
    fc1_w: Var,
    fc1_b: Var,
    fc2_w: Var,
    fc2_b: Var,
    logits_w: Var,
    logits_b: Var,
    value_w: Var,
    value_b: Var,
    pub named: Vec<(String, Var)>,
}

#[derive(Clone, Debug)]
pub struct Agent<T> {
    pub kind: ModelKind,
    pub dims: Dims,
    pub params: ParamSet<T>,
}

impl<T: Scalar> Agent<T> {
    pub fn new<R: Rng>(kind: ModelKind, dims: Dims, rng: &mut R) -> Self {
        let mut params = ParamSet::new();
        let normal = |rng: &mut R, std: f64| -> f64 {
            let v: f64 = StandardNormal.sample(rng);
            v * std
        };
        let embed = |params: &mut ParamSet<T>, rng: &mut R, name: &str, rows: usize, d: usize| {
            let std = 1.0 / (d as f64).sqrt();
            let t = Tensor::from_fn(&[rows, d], || T::from_f64(normal(rng, std)));
            params.insert(name, ParamGroup::Encoder, t);
        };
        let uniform = |rng: &mut R, dims: &[usize], fan_in: usize| -> Tensor<T> {
            let bound = 1.0 / (fan_in as f64).sqrt();
            Tensor::from_fn(dims, || T::from_f64(rng.random_range(-bound..bound)))
        };

        embed(&mut params, rng, "cnn.embed_kind", KIND_CODES, dims.obs_embed);
        embed(&mut params, rng, "cnn.embed_color", COLOR_CODES, dims.obs_embed);
        embed(&mut params, rng, "cnn.embed_state", STATE_CODES, dims.obs_embed);
        let c_in = 3 * dims.obs_embed;
        params.insert(
            "cnn.conv1.w",
            ParamGroup::Encoder,
            uniform(rng, &[dims.conv1, c_in, 3, 3], c_in * 9),
        );
        params.insert("cnn.conv1.b", ParamGroup::Encoder, uniform(rng, &[dims.conv1], c_in * 9));
        params.insert(
            "cnn.conv2.w",
            ParamGroup::Encoder,
            uniform(rng, &[dims.conv2, dims.conv1, 3, 3], dims.conv1 * 9),
        );
        params.insert("cnn.conv2.b", ParamGroup::Encoder, uniform(rng, &[dims.conv2], dims.conv1 * 9));
        params.insert(
            "cnn.fc.w",
            ParamGroup::Encoder,
            uniform(rng, &[dims.obs_encoding, dims.conv_flat()], dims.conv_flat()),
        );
        params.insert(
            "cnn.fc.b",
            ParamGroup::Encoder,
            uniform(rng, &[dims.obs_encoding], dims.conv_flat()),
        );

        if kind == ModelKind::Film {
            for i in 0..dims.film_blocks {
                params.insert(
                    &format!("film.res{i}.conv.w"),
                    ParamGroup::Encoder,
                    uniform(rng, &[dims.conv2, dims.conv2, 3, 3], dims.conv2 * 9),
                );
                params.insert(
                    &format!("film.res{i}.conv.b"),
                    ParamGroup::Encoder,
                    uniform(rng, &[dims.conv2], dims.conv2 * 9),
                );
                params.insert(
                    &format!("film.res{i}.cond.w"),
                    ParamGroup::Encoder,
                    uniform(rng, &[2 * dims.conv2, dims.film_cond()], dims.film_cond()),
                );
                params.insert(
                    &format!("film.res{i}.cond.b"),
                    ParamGroup::Encoder,
                    uniform(rng, &[2 * dims.conv2], dims.film_cond()),
                );
            }
        }

        let mh = dims.mem_hidden;
        params.insert("mem.w_ih", ParamGroup::Memory, uniform(rng, &[4 * mh, dims.mem_input()], mh));
        params.insert("mem.w_hh", ParamGroup::Memory, uniform(rng, &[4 * mh, mh], mh));
        params.insert("mem.b", ParamGroup::Memory, uniform(rng, &[4 * mh], mh));

        if kind.asks_questions() {
            let lh = dims.lm_hidden;
            let we = dims.word_embed;
            let std = 1.0 / (we as f64).sqrt();
            params.insert(
                "lm.embed",
                ParamGroup::Question,
                Tensor::from_fn(&[VOCAB_SIZE, we], || T::from_f64(normal(rng, std))),
            );
            params.insert("lm.w_ih", ParamGroup::Question, uniform(rng, &[4 * lh, we], lh));
            params.insert("lm.w_hh", ParamGroup::Question, uniform(rng, &[4 * lh, lh], lh));
            params.insert("lm.b", ParamGroup::Question, uniform(rng, &[4 * lh], lh));
            params.insert("lm.head.w", ParamGroup::Question, uniform(rng, &[VOCAB_SIZE, lh], lh));
            params.insert("lm.head.b", ParamGroup::Question, uniform(rng, &[VOCAB_SIZE], lh));
            // Zero projection: at the start of RL training the question policy
            // conditions on nothing, exactly matching its pretraining regime.
            params.insert(
                "lm.proj.w",
                ParamGroup::Question,
                Tensor::zeros(&[lh, dims.obs_encoding + dims.mem_hidden]),
            );
            params.insert("lm.proj.b", ParamGroup::Question, Tensor::zeros(&[lh]));
        }

        let pin = dims.policy_input(kind);
        params.insert("policy.fc1.w", ParamGroup::Action, uniform(rng, &[dims.trunk, pin], pin));
        params.insert("policy.fc1.b", ParamGroup::Action, uniform(rng, &[dims.trunk], pin));
        params.insert(
            "policy.fc2.w",
            ParamGroup::Action,
            uniform(rng, &[dims.trunk, dims.trunk], dims.trunk),
        );
        params.insert("policy.fc2.b", ParamGroup::Action, uniform(rng, &[dims.trunk], dims.trunk));
        params.insert(
            "policy.logits.w",
            ParamGroup::Action,
            uniform(rng, &[NUM_ACTIONS, dims.trunk], dims.trunk),
        );
        params.insert("policy.logits.b", ParamGroup::Action, uniform(rng, &[NUM_ACTIONS], dims.trunk));
        // The value head reads the pre-softmax action scores and starts at
        // zero, so V = 0 until the first update.
        params.insert("policy.value.w", ParamGroup::Action, Tensor::zeros(&[1, NUM_ACTIONS]));
        params.insert("policy.value.b", ParamGroup::Action, Tensor::zeros(&[1]));

        Agent { kind, dims, params }
    }

    /// Marks the word embedding table as fixed for all later updates.
    pub fn freeze_word_embeddings(&mut self) {
        if self.params.contains("lm.embed") {
            self.params.set_frozen("lm.embed", true);
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.params.total_elements()
    }

    /// Registers every parameter on the tape and returns the handles.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        let mut named = Vec::with_capacity(self.params.len());
        let mut reg = |tape: &mut Tape<T>, name: &str| -> Var {
            let v = tape.input(self.params.get(name).value.clone());
            named.push((name.to_string(), v));
            v
        };
        let embed_kind = reg(tape, "cnn.embed_kind");
        let embed_color = reg(tape, "cnn.embed_color");
        let embed_state = reg(tape, "cnn.embed_state");
        let conv1_w = reg(tape, "cnn.conv1.w");
        let conv1_b = reg(tape, "cnn.conv1.b");
        let conv2_w = reg(tape, "cnn.conv2.w");
        let conv2_b = reg(tape, "cnn.conv2.b");
        let cnn_fc_w = reg(tape, "cnn.fc.w");
        let cnn_fc_b = reg(tape, "cnn.fc.b");
        let film = if self.kind == ModelKind::Film {
            (0..self.dims.film_blocks)
                .map(|i| FilmVars {
                    conv_w: reg(tape, &format!("film.res{i}.conv.w")),
                    conv_b: reg(tape, &format!("film.res{i}.conv.b")),
                    cond_w: reg(tape, &format!("film.res{i}.cond.w")),
                    cond_b: reg(tape, &format!("film.res{i}.cond.b")),
                })
                .collect()
        } else {
            Vec::new()
        };
        let mem_w_ih = reg(tape, "mem.w_ih");
        let mem_w_hh = reg(tape, "mem.w_hh");
        let mem_b = reg(tape, "mem.b");
        let lm = self.kind.asks_questions().then(|| LmVars {
            embed: reg(tape, "lm.embed"),
            w_ih: reg(tape, "lm.w_ih"),
            w_hh: reg(tape, "lm.w_hh"),
            b: reg(tape, "lm.b"),
            head_w: reg(tape, "lm.head.w"),
            head_b: reg(tape, "lm.head.b"),
            proj_w: reg(tape, "lm.proj.w"),
            proj_b: reg(tape, "lm.proj.b"),
        });
        let fc1_w = reg(tape, "policy.fc1.w");
        let fc1_b = reg(tape, "policy.fc1.b");
        let fc2_w = reg(tape, "policy.fc2.w");
        let fc2_b = reg(tape, "policy.fc2.b");
        let logits_w = reg(tape, "policy.logits.w");
        let logits_b = reg(tape, "policy.logits.b");
        let value_w = reg(tape, "policy.value.w");
        let value_b = reg(tape, "policy.value.b");
        Bound {
            embed_kind,
            embed_color,
            embed_state,
            conv1_w,
            conv1_b,
            conv2_w,
            conv2_b,
            cnn_fc_w,
            cnn_fc_b,
            film,
            mem_w_ih,
            mem_w_hh,
            mem_b,
            lm,
            fc1_w,
            fc1_b,
            fc2_w,
            fc2_b,
            logits_w,
            logits_b,
            value_w,
            value_b,
            named,
        }
    }

    /// Registers only the parameters under `prefix` (language-model
    /// pretraining touches nothing else).
    pub fn bind_prefix(&self, tape: &mut Tape<T>, prefix: &str) -> Vec<(String, Var)> {
        self.params
            .iter()
            .filter(|(name, _)| name.starts_with(prefix))
            .map(|(name, p)| (name.to_string(), tape.input(p.value.clone())))
            .collect()
    }

    /// Fresh recurrent state: hidden ~ N(0, I), cell = 0.
    pub fn init_episode<R: Rng>(&self, rng: &mut R) -> AgentState<T> {
        let hidden = Tensor::from_fn(&[self.dims.mem_hidden], || {
            let v: f64 = StandardNormal.sample(rng);
            T::from_f64(v)
        });
        AgentState { hidden, cell: Tensor::zeros(&[self.dims.mem_hidden]) }
    }

    /// Three-table code embedding followed by two valid 3x3 convolutions.
    pub(crate) fn conv_features(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        obs: &Observation,
    ) -> Result<Var> {
        let codes = obs.flat();
        let x = tape.embed_obs(&codes, VIEW, b.embed_kind, b.embed_color, b.embed_state)?;
        let c1 = tape.conv2d(x, b.conv1_w, b.conv1_b, 1, 0)?;
        let c1 = tape.relu(c1)?;
        let c2 = tape.conv2d(c1, b.conv2_w, b.conv2_b, 1, 0)?;
        Ok(tape.relu(c2)?)
    }

    /// FiLM residual stack. `cond = None` runs the neutral (gamma=1, beta=0)
    /// stack used for the question policy's view of the observation.
    pub(crate) fn resblock_stack(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        feats: Var,
        cond: Option<Var>,
    ) -> Result<Var> {
        let mut x = feats;
        for block in &b.film {
            let y = tape.conv2d(x, block.conv_w, block.conv_b, 1, 1)?;
            let y = match cond {
                Some(c) => {
                    let gb = tape.linear(c, block.cond_w, block.cond_b)?;
                    let dgamma = tape.slice(gb, 0, self.dims.conv2)?;
                    let beta = tape.slice(gb, self.dims.conv2, self.dims.conv2)?;
                    let gamma = tape.add_scalar(dgamma, T::one())?;
                    tape.channel_affine(y, gamma, beta)?
                }
                None => y,
            };
            let y = tape.relu(y)?;
            x = tape.add(x, y)?;
        }
        Ok(x)
    }

    pub(crate) fn head_encoding(&self, tape: &mut Tape<T>, b: &Bound, feats: Var) -> Result<Var> {
        Ok(tape.linear(feats, b.cnn_fc_w, b.cnn_fc_b)?)
    }

    /// Full observation encoding as seen by the question policy (and by the
    /// action policy for non-FiLM kinds).
    pub fn encode_observation(&self, tape: &mut Tape<T>, b: &Bound, obs: &Observation) -> Result<Var> {
        let feats = self.conv_features(tape, b, obs)?;
        let feats = if self.kind == ModelKind::Film {
            self.resblock_stack(tape, b, feats, None)?
        } else {
            feats
        };
        self.head_encoding(tape, b, feats)
    }

    /// FiLM-conditioned observation encoding: the residual stack is modulated
    /// per channel by an affine transform computed from the QA encoding
    /// [e^q, eta, h^q].
    pub fn film_condition(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        obs: &Observation,
        qa_encoding: Var,
    ) -> Result<Var> {
        if self.kind != ModelKind::Film {
            return Err(AgentError::NeedsQuestions("film_condition"));
        }
        let feats = self.conv_features(tape, b, obs)?;
        let feats = self.resblock_stack(tape, b, feats, Some(qa_encoding))?;
        self.head_encoding(tape, b, feats)
    }

    /// Samples a question autoregressively from the language model.
    pub fn ask<R: Rng>(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        e_o: Var,
        h_m: Var,
        rng: &mut R,
    ) -> Result<AskOut> {
        self.ask_core(tape, b, e_o, h_m, Driver::Sample(rng))
    }

    /// Re-runs the question forward pass with the tokens fixed, reproducing
    /// the recorded log-probabilities exactly under unchanged parameters.
    pub fn replay_ask(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        e_o: Var,
        h_m: Var,
        tokens: &[u16],
    ) -> Result<AskOut> {
        self.ask_core::<rand_chacha::ChaCha8Rng>(tape, b, e_o, h_m, Driver::Forced(tokens))
    }

    fn ask_core<R: Rng>(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        e_o: Var,
        h_m: Var,
        mut driver: Driver<'_, R>,
    ) -> Result<AskOut> {
        let lm = b.lm.as_ref().ok_or(AgentError::NeedsQuestions("ask"))?;
        // The language model reads the observation/memory context by value:
        // the REINFORCE question loss trains the question policy parameters
        // only, while the action loss keeps its own differentiable paths into
        // the encoder and memory. Without this stop the question loss's
        // per-step gradients swamp the sparse navigation signal in the shared
        // CNN/LSTM and the action policy never takes off.
        let e_o_in = tape.detach(e_o);
        let h_m_in = tape.detach(h_m);
        let init = tape.concat(&[e_o_in, h_m_in])?;
        let mut h = tape.linear(init, lm.proj_w, lm.proj_b)?;
        let mut c = tape.input(Tensor::zeros(&[self.dims.lm_hidden]));
        let mut mask_data = vec![T::zero(); VOCAB_SIZE];
        mask_data[SOS as usize] = T::from_f64(SOS_MASK);
        let mask = tape.input(Tensor::from_vec(&[VOCAB_SIZE], mask_data));

        let mut x = tape.embedding_lookup(SOS as usize, lm.embed)?;
        let mut tokens = Vec::new();
        let mut token_logprobs = Vec::new();
        let mut token_entropies = Vec::new();
        let mut h_q = h;
        let cap = match &driver {
            Driver::Sample(_) => self.dims.token_cap,
            Driver::Forced(t) => t.len(),
        };
        for i in 0..cap {
            let (h2, c2) = tape.lstm_cell(x, h, c, lm.w_ih, lm.w_hh, lm.b)?;
            h = h2;
            c = c2;
            let raw = tape.linear(h, lm.head_w, lm.head_b)?;
            let logits = tape.add(raw, mask)?;
            let log_probs = tape.log_softmax(logits)?;
            let probs = tape.softmax(logits)?;
            let plp = tape.mul(probs, log_probs)?;
            let neg_ent = tape.sum(plp)?;
            let entropy = tape.neg(neg_ent)?;

            let token = match &mut driver {
                Driver::Sample(rng) => {
                    let (idx, _) = sample_categorical(tape.value(probs).data(), rng)?;
                    idx as u16
                }
                Driver::Forced(toks) => toks[i],
            };
            let lp = tape.select(log_probs, token as usize)?;
            tokens.push(token);
            token_logprobs.push(lp);
            token_entropies.push(entropy);
            h_q = h;
            if token == EOS {
                break;
            }
            x = tape.embedding_lookup(token as usize, lm.embed)?;
        }

        let question: Vec<u16> = tokens.iter().copied().filter(|&t| t != EOS && t != SOS).collect();
        let e_q = if question.is_empty() {
            tape.input(Tensor::zeros(&[self.dims.word_embed]))
        } else {
            let mut acc = tape.embedding_lookup(question[0] as usize, lm.embed)?;
            for &t in &question[1..] {
                let row = tape.embedding_lookup(t as usize, lm.embed)?;
                acc = tape.add(acc, row)?;
            }
            tape.mul_scalar(acc, T::from_f64(1.0 / question.len() as f64))?
        };

        Ok(AskOut { tokens, question, token_logprobs, token_entropies, h_q, e_q })
    }

    /// Action distribution and value estimate. `qa` is (e^q, eta, h^q) and is
    /// consumed only by the main kind; FiLM already folded it into `e_o` and
    /// the baseline has none.
    pub fn act(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        e_o: Var,
        qa: Option<(Var, Var, Var)>,
        h_m: Var,
    ) -> Result<ActOut> {
        let input = match (self.kind, qa) {
            (ModelKind::Main, Some((e_q, eta, h_q))) => {
                tape.concat(&[e_o, e_q, eta, h_q, h_m])?
            }
            (ModelKind::Main, None) => return Err(AgentError::NeedsQuestions("act")),
            _ => tape.concat(&[e_o, h_m])?,
        };
        let h1 = tape.linear(input, b.fc1_w, b.fc1_b)?;
        let h1 = tape.relu(h1)?;
        let h2 = tape.linear(h1, b.fc2_w, b.fc2_b)?;
        let h2 = tape.relu(h2)?;
        let logits = tape.linear(h2, b.logits_w, b.logits_b)?;
        let probs = tape.softmax(logits)?;
        let log_probs = tape.log_softmax(logits)?;
        let value = tape.linear(logits, b.value_w, b.value_b)?;
        let plp = tape.mul(probs, log_probs)?;
        let neg_ent = tape.sum(plp)?;
        let entropy = tape.neg(neg_ent)?;
        Ok(ActOut { probs, log_probs, value, entropy })
    }

    /// One memory LSTM step over [e^o, e^q, eta, one-hot action]. Kinds
    /// without questions feed zeros for e^q and eta so the memory
    /// architecture is identical across kinds.
    pub fn memory_update(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        e_o: Var,
        e_q: Option<Var>,
        eta: Option<Var>,
        action: usize,
        h: Var,
        c: Var,
    ) -> Result<(Var, Var)> {
        let e_q = match e_q {
            Some(v) => v,
            None => tape.input(Tensor::zeros(&[self.dims.word_embed])),
        };
        let eta = match eta {
            Some(v) => v,
            None => tape.input(Tensor::zeros(&[ETA_LEN])),
        };
        let mut onehot = vec![T::zero(); NUM_ACTIONS];
        onehot[action] = T::one();
        let a = tape.input(Tensor::from_vec(&[NUM_ACTIONS], onehot));
        let x = tape.concat(&[e_o, e_q, eta, a])?;
        Ok(tape.lstm_cell(x, h, c, b.mem_w_ih, b.mem_w_hh, b.mem_b)?)
    }

    /// Answer vector as a tape input.
    pub fn eta_input(&self, tape: &mut Tape<T>, eta: [u8; 2]) -> Var {
        let data = vec![T::from_f64(eta[0] as f64), T::from_f64(eta[1] as f64)];
        tape.input(Tensor::from_vec(&[ETA_LEN], data))
    }

    pub fn cast<U: Scalar>(&self) -> Agent<U> {
        Agent { kind: self.kind, dims: self.dims, params: self.params.cast() }
    }
}

enum Driver<'a, R> {
    Sample(&'a mut R),
    Forced(&'a [u16]),
}
