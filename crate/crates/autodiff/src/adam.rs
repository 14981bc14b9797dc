//! Named parameter store and the Adam optimizer (one step per episode).

use crate::{Scalar, Tensor};
use indexmap::IndexMap;
use std::collections::{HashMap, HashSet};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Which sub-network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Action policy and value head.
    Action,
    /// Question policy (language model).
    Question,
    /// Observation encoder (CNN, and FiLM conditioning when present).
    Encoder,
    /// Memory LSTM.
    Memory,
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub group: ParamGroup,
    /// Frozen parameters are skipped by the optimizer (the word embedding
    /// table after language-model pretraining).
    pub frozen: bool,
}

/// Ordered map of uniquely named parameters. Iteration order is insertion
/// order, which keeps checkpoints and updates deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T> {
    entries: IndexMap<String, Param<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { entries: IndexMap::new() }
    }

    /// Panics on duplicate names; parameter naming is static.
    pub fn insert(&mut self, name: &str, group: ParamGroup, value: Tensor<T>) {
        let prev = self.entries.insert(
            name.to_string(),
            Param { value, group, frozen: false },
        );
        assert!(prev.is_none(), "duplicate parameter name {name}");
    }

    pub fn get(&self, name: &str) -> &Param<T> {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param<T> {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) {
        self.get_mut(name).frozen = frozen;
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar elements across all parameters.
    pub fn total_elements(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        let mut out = ParamSet::new();
        for (name, p) in &self.entries {
            out.entries.insert(
                name.clone(),
                Param { value: p.value.cast(), group: p.group, frozen: p.frozen },
            );
        }
        out
    }
}

/// Per-parameter first/second moment accumulators plus the shared step count.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    m: IndexMap<String, Tensor<T>>,
    v: IndexMap<String, Tensor<T>>,
    t: u64,
    warned_missing: HashSet<String>,
    /// Parameters that have ever received a gradient. A parameter that never
    /// has carries all-zero moments, so its update is identically zero and
    /// the arithmetic can be skipped.
    activated: HashSet<String>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let mut m = IndexMap::new();
        let mut v = IndexMap::new();
        for (name, p) in params.iter() {
            m.insert(name.to_string(), Tensor::zeros(p.value.dims()));
            v.insert(name.to_string(), Tensor::zeros(p.value.dims()));
        }
        AdamState { m, v, t: 0, warned_missing: HashSet::new(), activated: HashSet::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn moments(&self, name: &str) -> (&Tensor<T>, &Tensor<T>) {
        (&self.m[name], &self.v[name])
    }

    /// Restores moments and step count from a checkpoint.
    pub fn restore(&mut self, name: &str, m: Tensor<T>, v: Tensor<T>) {
        assert_eq!(self.m[name].dims(), m.dims(), "adam m dims for {name}");
        assert_eq!(self.v[name].dims(), v.dims(), "adam v dims for {name}");
        if m.data().iter().any(|x| *x != T::zero()) || v.data().iter().any(|x| *x != T::zero()) {
            self.activated.insert(name.to_string());
        }
        self.m[name] = m;
        self.v[name] = v;
    }

    pub fn set_step_count(&mut self, t: u64) {
        self.t = t;
    }
}

/// One Adam step minimizing the objective whose gradients are given.
/// Parameters missing from `grads` are treated as zero-gradient (their
/// moments still decay); this is logged once per parameter. Frozen
/// parameters are skipped entirely.
pub fn adam_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &HashMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
    alpha: f64,
) {
    assert!(alpha > 0.0, "learning rate must be positive");
    state.t += 1;
    let t = state.t as i32;
    let b1 = T::from_f64(BETA1);
    let b2 = T::from_f64(BETA2);
    let one = T::one();
    let eps = T::from_f64(EPS);
    let bc1 = T::from_f64(1.0 - BETA1.powi(t));
    let bc2 = T::from_f64(1.0 - BETA2.powi(t));
    let lr = T::from_f64(alpha);

    let zero = Tensor::zeros(&[0]);
    for (name, param) in params.entries.iter_mut() {
        if param.frozen {
            continue;
        }
        let g = match grads.get(name) {
            Some(g) => {
                assert_eq!(
                    g.dims(),
                    param.value.dims(),
                    "gradient dims for {name} do not match parameter"
                );
                state.activated.insert(name.clone());
                g
            }
            None => {
                if state.warned_missing.insert(name.clone()) {
                    log::debug!("no gradient for parameter {name}; treating as zero");
                }
                if !state.activated.contains(name) {
                    // zero moments and zero gradient: the update is zero
                    continue;
                }
                &zero
            }
        };
        let m = state.m.get_mut(name).unwrap().data_mut();
        let v = state.v.get_mut(name).unwrap().data_mut();
        let p = param.value.data_mut();
        for i in 0..p.len() {
            let gi = if g.len() == 0 { T::zero() } else { g.data()[i] };
            m[i] = b1 * m[i] + (one - b1) * gi;
            v[i] = b2 * v[i] + (one - b2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}
