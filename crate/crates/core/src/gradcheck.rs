//! Finite-difference verification of the episode losses, shared by the
//! gradient-check test target and the acceptance suite. The oracle evaluates
//! forward passes only, in 64-bit, and never touches the backward code it
//! checks.

use crate::agent::{Agent, Dims, ModelKind};
use crate::grid::EnvConfig;
use crate::oracle::OracleMode;
use crate::training::{build_losses, collect_episode, compute_gae, replay_episode, TrainConfig};
use gridqa_autodiff::{Scalar, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-3;
pub const TOL: f64 = 1e-4;
/// Configurations whose graphs sit closer than this to a relu/huber kink are
/// resampled; central differences straddling a kink measure the oracle's
/// artifact, not the gradient. The clipped surrogate's min2 is excluded from
/// the scan because its arguments coincide identically at unit ratio, where
/// the composite stays smooth.
pub const KINK_MARGIN: f64 = 10.0 * H;

fn small_agent(kind: ModelKind, seed: u64) -> Agent<f64> {
    Agent::new(kind, Dims::small(), &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Runs `cases` random configurations; every case checks the action loss and
/// (for the main kind) the question loss against finite differences of every
/// parameter. Returns a human-readable summary; panics on any failure.
pub fn loss_gradcheck(cases: usize) -> String {
    let env = EnvConfig::new(2, 4).unwrap();
    let mut action_checked = 0usize;
    let mut question_checked = 0usize;
    let mut worst_seen = 0.0f64;

    // mostly main-kind cases (both losses); a few baseline cases cover the
    // narrower policy input
    let mut run_batch = |kind: ModelKind, count: usize, seed: u64| {
        let mut outer = ChaCha8Rng::seed_from_u64(seed);
        let mut done = 0;
        let mut attempts = 0;
        while done < count {
            attempts += 1;
            assert!(attempts < count * 40, "loss gradcheck: too many kink rejections");
            let agent = small_agent(kind, outer.random());
            let mut collect_rng = ChaCha8Rng::seed_from_u64(outer.random());
            let buffer =
                collect_episode(&agent, &env, OracleMode::Train, &mut collect_rng, Some(2))
                    .expect("collection");
            let cfg = TrainConfig::defaults(kind);
            let rewards: Vec<f64> = buffer.steps.iter().map(|s| s.reward_env as f64).collect();
            let values: Vec<f64> = buffer.steps.iter().map(|s| s.value.as_f64()).collect();
            let (adv, targets) = compute_gae(&rewards, &values, cfg.gamma, cfg.lambda).unwrap();

            // one graph build yields both loss roots
            let build = |a: &Agent<f64>| -> (Tape<f64>, crate::agent::Bound, Var, Option<Var>) {
                let mut tape = Tape::new();
                let bound = a.bind(&mut tape);
                let steps = replay_episode(a, &mut tape, &bound, &buffer).unwrap();
                let losses =
                    build_losses(&mut tape, &steps, &buffer, &cfg, &adv, &targets).unwrap();
                (tape, bound, losses.action_loss, losses.question_loss)
            };

            let (tape0, bound0, a0, q0) = build(&agent);
            if tape0.kink_distance(true) < KINK_MARGIN {
                continue;
            }
            let roots: Vec<Var> = std::iter::once(a0).chain(q0).collect();
            let mut analytic: Vec<Vec<(String, Tensor<f64>)>> = Vec::new();
            for &root in &roots {
                let grads = tape0.gradients(root).unwrap();
                analytic.push(
                    bound0
                        .named
                        .iter()
                        .map(|(n, v)| {
                            let dims = agent.params.get(n).value.dims().to_vec();
                            (n.clone(), grads.get_or_zeros(*v, &dims))
                        })
                        .collect(),
                );
            }

            // finite differences of both losses from the same perturbed evals
            let eval = |a: &Agent<f64>| -> Vec<f64> {
                let (tape, _, av, qv) = build(a);
                std::iter::once(tape.scalar(av))
                    .chain(qv.map(|q| tape.scalar(q)))
                    .collect()
            };
            let mut scale = vec![1e-8f64; roots.len()];
            let mut fd: Vec<Vec<Tensor<f64>>> =
                vec![Vec::with_capacity(analytic[0].len()); roots.len()];
            for (pi, (name, a_grad)) in analytic[0].iter().enumerate() {
                let mut slots: Vec<Tensor<f64>> =
                    roots.iter().map(|_| Tensor::zeros(a_grad.dims())).collect();
                for j in 0..a_grad.len() {
                    let mut plus = agent.clone();
                    plus.params.get_mut(name).value.data_mut()[j] += H;
                    let f_plus = eval(&plus);
                    let mut minus = agent.clone();
                    minus.params.get_mut(name).value.data_mut()[j] -= H;
                    let f_minus = eval(&minus);
                    for (r, slot) in slots.iter_mut().enumerate() {
                        slot.data_mut()[j] = (f_plus[r] - f_minus[r]) / (2.0 * H);
                    }
                }
                for (r, slot) in slots.into_iter().enumerate() {
                    for (&x, &y) in analytic[r][pi].1.data().iter().zip(slot.data()) {
                        scale[r] = scale[r].max(x.abs()).max(y.abs());
                    }
                    fd[r].push(slot);
                }
            }
            for (r, root_fd) in fd.iter().enumerate() {
                let label = if r == 0 { "action" } else { "question" };
                for ((name, a_grad), n_grad) in analytic[r].iter().zip(root_fd) {
                    for (j, (&x, &y)) in a_grad.data().iter().zip(n_grad.data()).enumerate() {
                        let rel = (x - y).abs() / scale[r];
                        worst_seen = worst_seen.max(rel);
                        assert!(
                            rel <= TOL,
                            "{label} loss ({kind:?}) {name}[{j}]: rel err {rel:.3e}"
                        );
                    }
                }
                if r == 0 {
                    action_checked += 1;
                } else {
                    question_checked += 1;
                }
            }
            done += 1;
        }
    };

    run_batch(ModelKind::Main, cases, 0xfeed);
    run_batch(ModelKind::Baseline, (cases / 10).max(2), 0xbee);
    format!(
        "action loss: {action_checked} cases, question loss: {question_checked} cases, worst rel err {worst_seen:.2e}"
    )
}
