//! Monte-Carlo estimate of the mutual information between a step's action
//! and its question: fresh questions are sampled from the question policy,
//! answered by the oracle, and each conditional action distribution feeds
//! the mixture estimate I = H(mean p) - mean H(p). Off by default; wired
//! into the loss when enabled.

use crate::agent::{Agent, Bound, ModelKind};
use crate::grid::{Observation, WorldState};
use crate::oracle::{self, OracleMode};
use gridqa_autodiff::{Scalar, Tape, Var};
use rand::Rng;
use thiserror::Error;

/// Floor added inside logs so zero-probability entries contribute zero
/// entropy instead of NaN.
const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MiError {
    #[error("mutual-information estimate needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("conditional distributions have mismatched lengths")]
    Mismatched,
    #[error("{0}")]
    Forward(String),
}

#[derive(Clone, Debug)]
pub struct MiEstimate {
    /// Estimated mutual information in nats; never meaningfully negative.
    pub mi_nats: f64,
    pub samples: usize,
    /// Estimated marginal action distribution (mean of the conditionals).
    pub marginal: Vec<f64>,
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().map(|&v| v * (v + LOG_FLOOR).ln()).sum::<f64>()
}

/// Mixture mutual information from sampled conditional distributions
/// p(a | q_n): I = H((1/N) sum p_n) - (1/N) sum H(p_n).
pub fn mixture_mi(conditionals: &[Vec<f64>]) -> Result<MiEstimate, MiError> {
    if conditionals.len() < 2 {
        return Err(MiError::TooFewSamples(conditionals.len()));
    }
    let k = conditionals[0].len();
    if conditionals.iter().any(|c| c.len() != k) {
        return Err(MiError::Mismatched);
    }
    let n = conditionals.len() as f64;
    let mut marginal = vec![0.0; k];
    for c in conditionals {
        for (m, &v) in marginal.iter_mut().zip(c) {
            *m += v;
        }
    }
    for m in marginal.iter_mut() {
        *m /= n;
    }
    let mean_cond_entropy = conditionals.iter().map(|c| entropy(c)).sum::<f64>() / n;
    let mi_nats = entropy(&marginal) - mean_cond_entropy;
    Ok(MiEstimate { mi_nats, samples: conditionals.len(), marginal })
}

/// `loss + weight * mi`; the identity when the weight is zero.
pub fn mi_augmented_loss(base_loss: f64, mi: f64, weight: f64) -> f64 {
    base_loss + weight * mi
}

fn entropy_node<T: Scalar>(tape: &mut Tape<T>, probs: Var) -> Result<Var, MiError> {
    (|| {
        let shifted = tape.add_scalar(probs, T::from_f64(LOG_FLOOR))?;
        let logs = tape.ln(shifted)?;
        let plp = tape.mul(probs, logs)?;
        let s = tape.sum(plp)?;
        tape.neg(s)
    })()
    .map_err(|e: gridqa_autodiff::TapeError| MiError::Forward(e.to_string()))
}

/// Traced Monte-Carlo MI estimate at one step. Samples `n` questions from
/// the question policy at (e^o, h^m), passes each to the oracle against the
/// step's world state, runs the action policy on each QA pair, and builds
/// the mixture estimate as graph nodes so it can join the loss.
#[allow(clippy::too_many_arguments)]
pub fn estimate_mi<T: Scalar, R: Rng>(
    tape: &mut Tape<T>,
    agent: &Agent<T>,
    bound: &Bound,
    obs: &Observation,
    e_o: Var,
    h_m: Var,
    n: usize,
    world: &WorldState,
    mode: OracleMode,
    rng: &mut R,
) -> Result<(MiEstimate, Var), MiError> {
    if n < 2 {
        return Err(MiError::TooFewSamples(n));
    }
    if !agent.kind.asks_questions() {
        return Err(MiError::Forward("baseline asks no questions".into()));
    }
    let fail = |e: crate::agent::AgentError| MiError::Forward(e.to_string());
    let tfail = |e: gridqa_autodiff::TapeError| MiError::Forward(e.to_string());

    // FiLM folds the QA pair into the encoding, so its conditionals need the
    // convolutional features once per estimate.
    let film_feats = if agent.kind == ModelKind::Film {
        Some(agent.conv_features(tape, bound, obs).map_err(fail)?)
    } else {
        None
    };

    let mut prob_nodes = Vec::with_capacity(n);
    let mut cond_entropies = Vec::with_capacity(n);
    for _ in 0..n {
        let ask = agent.ask(tape, bound, e_o, h_m, rng).map_err(fail)?;
        let ans = oracle::answer(&ask.question, world, mode, rng);
        let eta = agent.eta_input(tape, ans.eta);
        let act = match agent.kind {
            ModelKind::Main => agent
                .act(tape, bound, e_o, Some((ask.e_q, eta, ask.h_q)), h_m)
                .map_err(fail)?,
            ModelKind::Film => {
                let cond = tape.concat(&[ask.e_q, eta, ask.h_q]).map_err(tfail)?;
                let feats = film_feats.unwrap();
                let conditioned =
                    agent.resblock_stack(tape, bound, feats, Some(cond)).map_err(fail)?;
                let eo_act = agent.head_encoding(tape, bound, conditioned).map_err(fail)?;
                agent.act(tape, bound, eo_act, None, h_m).map_err(fail)?
            }
            ModelKind::Baseline => unreachable!(),
        };
        cond_entropies.push(entropy_node(tape, act.probs)?);
        prob_nodes.push(act.probs);
    }

    let mut acc = prob_nodes[0];
    for &p in &prob_nodes[1..] {
        acc = tape.add(acc, p).map_err(tfail)?;
    }
    let marginal = tape.mul_scalar(acc, T::from_f64(1.0 / n as f64)).map_err(tfail)?;
    let h_marginal = entropy_node(tape, marginal)?;
    let ce = tape.concat(&cond_entropies).map_err(tfail)?;
    let mean_ce = tape.mean(ce).map_err(tfail)?;
    let mi_node = tape.sub(h_marginal, mean_ce).map_err(tfail)?;

    let conditionals: Vec<Vec<f64>> = prob_nodes
        .iter()
        .map(|&p| tape.value(p).data().iter().map(|v| v.as_f64()).collect())
        .collect();
    let mut estimate = mixture_mi(&conditionals)?;
    estimate.mi_nats = tape.scalar(mi_node).as_f64();
    estimate.marginal = tape.value(marginal).data().iter().map(|v| v.as_f64()).collect();
    Ok((estimate, mi_node))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::Dims;
    use crate::grid::{generate, observe, EnvConfig, NUM_ACTIONS};
    use gridqa_autodiff::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_deterministic_questions_give_ln2() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let b = vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let samples: Vec<Vec<f64>> = (0..10_000)
            .map(|_| if rng.random_range(0..2) == 0 { a.clone() } else { b.clone() })
            .collect();
        let est = mixture_mi(&samples).unwrap();
        assert!((est.mi_nats - (2.0f64).ln()).abs() < 0.01, "{}", est.mi_nats);
        let sum: f64 = est.marginal.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn identical_conditionals_give_zero() {
        let p = vec![0.2, 0.1, 0.4, 0.05, 0.05, 0.1, 0.1];
        let samples = vec![p.clone(); 64];
        let est = mixture_mi(&samples).unwrap();
        assert!(est.mi_nats.abs() < 1e-9, "{}", est.mi_nats);
    }

    #[test]
    fn bounded_by_ln_action_count_and_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let n = rng.random_range(2..20);
            let samples: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    let raw: Vec<f64> = (0..NUM_ACTIONS).map(|_| rng.random_range(0.0..1.0)).collect();
                    let s: f64 = raw.iter().sum();
                    raw.iter().map(|v| v / s).collect()
                })
                .collect();
            let est = mixture_mi(&samples).unwrap();
            assert!(est.mi_nats >= -1e-9, "Jensen violated: {}", est.mi_nats);
            assert!(est.mi_nats <= (NUM_ACTIONS as f64).ln() + 1e-9);
        }
    }

    #[test]
    fn estimator_converges_on_synthetic_joint() {
        // three questions with fixed probabilities and known conditionals
        let conds = [
            vec![0.7, 0.1, 0.05, 0.05, 0.05, 0.025, 0.025],
            vec![0.05, 0.8, 0.05, 0.025, 0.025, 0.025, 0.025],
            vec![0.1, 0.1, 0.1, 0.3, 0.2, 0.1, 0.1],
        ];
        let weights = [0.5, 0.3, 0.2];
        let mut expected_marginal = vec![0.0; 7];
        for (w, c) in weights.iter().zip(&conds) {
            for (m, &v) in expected_marginal.iter_mut().zip(c) {
                *m += w * v;
            }
        }
        let analytic = entropy(&expected_marginal)
            - weights.iter().zip(&conds).map(|(w, c)| w * entropy(c)).sum::<f64>();

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples: Vec<Vec<f64>> = (0..10_000)
            .map(|_| {
                let u: f64 = rng.random_range(0.0..1.0);
                if u < 0.5 {
                    conds[0].clone()
                } else if u < 0.8 {
                    conds[1].clone()
                } else {
                    conds[2].clone()
                }
            })
            .collect();
        let est = mixture_mi(&samples).unwrap();
        assert!((est.mi_nats - analytic).abs() < 0.01, "{} vs {analytic}", est.mi_nats);
    }

    #[test]
    fn too_few_samples_rejected() {
        assert!(matches!(mixture_mi(&[vec![1.0]]), Err(MiError::TooFewSamples(1))));
    }

    #[test]
    fn augmentation_arithmetic() {
        assert_eq!(mi_augmented_loss(2.5, 0.7, 0.0), 2.5);
        assert_eq!(mi_augmented_loss(2.0, 0.5, 1.0), 2.5);
    }

    #[test]
    fn traced_estimate_matches_pure_math_and_bounds() {
        for kind in [ModelKind::Main, ModelKind::Film] {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let agent: Agent<f32> = Agent::new(kind, Dims::small(), &mut rng);
            let env = EnvConfig::new(2, 4).unwrap();
            let world = generate(&env, &mut rng);
            let obs = observe(&world);
            let mut tape = Tape::new();
            let bound = agent.bind(&mut tape);
            let st = agent.init_episode(&mut rng);
            let hm = tape.input(st.hidden.clone());
            let eo = agent.encode_observation(&mut tape, &bound, &obs).unwrap();
            let (est, node) = estimate_mi(
                &mut tape, &agent, &bound, &obs, eo, hm, 16, &world, OracleMode::Train, &mut rng,
            )
            .unwrap();
            assert_eq!(est.samples, 16);
            assert!((tape.scalar(node) as f64 - est.mi_nats).abs() < 1e-9);
            assert!(est.mi_nats >= -1e-6 && est.mi_nats <= (NUM_ACTIONS as f64).ln() + 1e-6);
            let sum: f64 = est.marginal.iter().sum();
            assert!((sum - 1.0).abs() < 1e-5);

            let n2 = estimate_mi(
                &mut tape, &agent, &bound, &obs, eo, hm, 1, &world, OracleMode::Train, &mut rng,
            );
            assert!(matches!(n2, Err(MiError::TooFewSamples(1))));
        }
    }

    #[test]
    fn mi_gradient_flows_to_question_policy() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let agent: Agent<f32> = Agent::new(ModelKind::Main, Dims::small(), &mut rng);
        let env = EnvConfig::new(2, 4).unwrap();
        let world = generate(&env, &mut rng);
        let obs = observe(&world);
        let mut tape = Tape::new();
        let bound = agent.bind(&mut tape);
        let st = agent.init_episode(&mut rng);
        let hm = tape.input(st.hidden.clone());
        let eo = agent.encode_observation(&mut tape, &bound, &obs).unwrap();
        let (_, node) = estimate_mi(
            &mut tape, &agent, &bound, &obs, eo, hm, 8, &world, OracleMode::Train, &mut rng,
        )
        .unwrap();
        let grads = tape.gradients(node).unwrap();
        let named = crate::training::extract_named_grads(&grads, &bound.named, &agent);
        let policy_grad_norm: f32 = named["policy.fc1.w"].data().iter().map(|v| v * v).sum();
        assert!(policy_grad_norm > 0.0, "MI node must be differentiable through the policy");
        let _ = Tensor::<f32>::zeros(&[1]);
    }
}
