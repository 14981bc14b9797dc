//! Wengert tape: eager forward evaluation with recorded ops, reverse replay
//! for gradients. One tape lives for one episode (or one loss evaluation) and
//! is dropped afterwards.

use crate::{Scalar, Tensor};
use thiserror::Error;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("{op}: dimension mismatch, expected {expected:?}, got {got:?}")]
    DimMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value in {what} at node #{node} ({op})")]
    NonFinite {
        what: &'static str,
        node: usize,
        op: &'static str,
    },
}

type Result<V> = std::result::Result<V, TapeError>;

enum Op<T> {
    Leaf,
    /// out = W x + b, W: [rows, cols], x flattened to [cols], b: [rows]
    Linear { x: Var, w: Var, b: Var },
    /// x: [C,H,W], w: [OC,C,KH,KW], b: [OC]; zero padding `pad`, stride `stride`
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    /// Fused LSTM cell; node value is [h'; c'] (2H). `gates` holds the
    /// activated (i, f, g, o) vector saved for the backward pass.
    LstmCell {
        x: Var,
        h: Var,
        c: Var,
        w_ih: Var,
        w_hh: Var,
        b: Var,
        gates: Vec<T>,
    },
    /// One row of an embedding table.
    EmbedRow { table: Var, row: usize },
    /// Per-cell lookup of three code channels into three tables; output is
    /// [3·D, view, view] with kind/color/state stacked along channels.
    EmbedObs {
        kind: Var,
        color: Var,
        state: Var,
        codes: Vec<[u8; 3]>,
        view: usize,
    },
    Softmax { x: Var },
    LogSoftmax { x: Var },
    /// -log softmax(logits)[target]
    CrossEntropy { logits: Var, target: usize },
    Huber { x: Var },
    Relu { x: Var },
    Exp { x: Var },
    Ln { x: Var },
    Neg { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddScalar { x: Var },
    MulScalar { x: Var, c: T },
    /// Elementwise min; ties route the gradient to `a`.
    Min2 { a: Var, b: Var },
    Clamp { x: Var, lo: T, hi: T },
    Concat { parts: Vec<Var> },
    Slice { x: Var, start: usize, len: usize },
    Sum { x: Var },
    Mean { x: Var },
    /// x: [C, spatial...]; out[c, s] = gamma[c] * x[c, s] + beta[c]
    ChannelAffine { x: Var, gamma: Var, beta: Var },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Linear { .. } => "linear",
            Op::Conv2d { .. } => "conv2d",
            Op::LstmCell { .. } => "lstm_cell",
            Op::EmbedRow { .. } => "embedding_lookup",
            Op::EmbedObs { .. } => "embed_obs",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Huber { .. } => "huber",
            Op::Relu { .. } => "relu",
            Op::Exp { .. } => "exp",
            Op::Ln { .. } => "ln",
            Op::Neg { .. } => "neg",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::AddScalar { .. } => "add_scalar",
            Op::MulScalar { .. } => "mul_scalar",
            Op::Min2 { .. } => "min2",
            Op::Clamp { .. } => "clamp",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::ChannelAffine { .. } => "channel_affine",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Gradients of a scalar loss with respect to every tape node.
#[derive(Debug)]
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient for a node, if any gradient flowed to it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for a node, zeros when the node is off the loss graph.
    pub fn get_or_zeros(&self, v: Var, dims: &[usize]) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(dims),
        }
    }
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Value of a scalar node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    // ── leaves ──────────────────────────────────────────────────────

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Same value as `v`, but as a fresh leaf: gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.push(t, Op::Leaf)
    }

    pub fn scalar_input(&mut self, v: T) -> Var {
        self.input(Tensor::scalar(v))
    }

    // ── layer primitives ────────────────────────────────────────────

    /// out = W x + b. `x` is used flattened; its element count must equal
    /// the number of columns of `W`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let wd = self.value(w).dims();
        if wd.len() != 2 {
            return Err(TapeError::Invalid {
                op: "linear",
                msg: format!("weight must be rank 2, got {:?}", wd),
            });
        }
        let (rows, cols) = (wd[0], wd[1]);
        if self.value(x).len() != cols {
            return Err(TapeError::DimMismatch {
                op: "linear",
                expected: vec![cols],
                got: self.value(x).dims().to_vec(),
            });
        }
        if self.value(b).dims() != [rows] {
            return Err(TapeError::DimMismatch {
                op: "linear",
                expected: vec![rows],
                got: self.value(b).dims().to_vec(),
            });
        }
        let mut out = self.data(b).to_vec();
        matvec_acc(self.data(w), self.data(x), &mut out, rows, cols);
        Ok(self.push(Tensor::from_vec(&[rows], out), Op::Linear { x, w, b }))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xd = self.value(x).dims().to_vec();
        let wd = self.value(w).dims().to_vec();
        if xd.len() != 3 || wd.len() != 4 || xd[0] != wd[1] {
            return Err(TapeError::DimMismatch {
                op: "conv2d",
                expected: wd.clone(),
                got: xd.clone(),
            });
        }
        let (c_in, h, wi) = (xd[0], xd[1], xd[2]);
        let (oc, kh, kw) = (wd[0], wd[2], wd[3]);
        if self.value(b).dims() != [oc] {
            return Err(TapeError::DimMismatch {
                op: "conv2d",
                expected: vec![oc],
                got: self.value(b).dims().to_vec(),
            });
        }
        if stride == 0 || h + 2 * pad < kh || wi + 2 * pad < kw {
            return Err(TapeError::Invalid {
                op: "conv2d",
                msg: format!("kernel {kh}x{kw} does not fit input {h}x{wi} with pad {pad}"),
            });
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wi + 2 * pad - kw) / stride + 1;
        let mut out = vec![T::zero(); oc * oh * ow];
        {
            let xv = self.data(x);
            let wv = self.data(w);
            let bv = self.data(b);
            for o in 0..oc {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bv[o];
                        for ci in 0..c_in {
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= wi as isize {
                                        continue;
                                    }
                                    acc = acc
                                        + wv[((o * c_in + ci) * kh + ky) * kw + kx]
                                            * xv[(ci * h + iy as usize) * wi + ix as usize];
                                }
                            }
                        }
                        out[(o * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        Ok(self.push(
            Tensor::from_vec(&[oc, oh, ow], out),
            Op::Conv2d { x, w, b, stride, pad },
        ))
    }

    /// Fused LSTM cell with gate order (input, forget, cell, output).
    /// Returns `(h', c')`.
    pub fn lstm_cell(
        &mut self,
        x: Var,
        h: Var,
        c: Var,
        w_ih: Var,
        w_hh: Var,
        b: Var,
    ) -> Result<(Var, Var)> {
        let ihd = self.value(w_ih).dims().to_vec();
        let hhd = self.value(w_hh).dims().to_vec();
        if ihd.len() != 2 || hhd.len() != 2 || ihd[0] != hhd[0] || ihd[0] % 4 != 0 {
            return Err(TapeError::DimMismatch {
                op: "lstm_cell",
                expected: ihd.clone(),
                got: hhd.clone(),
            });
        }
        let hid = ihd[0] / 4;
        if self.value(x).len() != ihd[1]
            || self.value(h).len() != hid
            || self.value(c).len() != hid
            || hhd[1] != hid
            || self.value(b).len() != 4 * hid
        {
            return Err(TapeError::DimMismatch {
                op: "lstm_cell",
                expected: vec![ihd[1], hid, hid, 4 * hid],
                got: vec![
                    self.value(x).len(),
                    self.value(h).len(),
                    self.value(c).len(),
                    self.value(b).len(),
                ],
            });
        }
        let mut z = self.data(b).to_vec();
        matvec_acc(self.data(w_ih), self.data(x), &mut z, 4 * hid, ihd[1]);
        matvec_acc(self.data(w_hh), self.data(h), &mut z, 4 * hid, hid);
        let mut gates = vec![T::zero(); 4 * hid];
        for k in 0..hid {
            gates[k] = sigmoid(z[k]);
            gates[hid + k] = sigmoid(z[hid + k]);
            gates[2 * hid + k] = z[2 * hid + k].tanh();
            gates[3 * hid + k] = sigmoid(z[3 * hid + k]);
        }
        let cv = self.data(c);
        let mut hc = vec![T::zero(); 2 * hid];
        for k in 0..hid {
            let c_new = gates[hid + k] * cv[k] + gates[k] * gates[2 * hid + k];
            hc[hid + k] = c_new;
            hc[k] = gates[3 * hid + k] * c_new.tanh();
        }
        let node = self.push(
            Tensor::from_vec(&[2 * hid], hc),
            Op::LstmCell { x, h, c, w_ih, w_hh, b, gates },
        );
        let h_new = self.slice(node, 0, hid)?;
        let c_new = self.slice(node, hid, hid)?;
        Ok((h_new, c_new))
    }

    pub fn embedding_lookup(&mut self, id: usize, table: Var) -> Result<Var> {
        let td = self.value(table).dims().to_vec();
        if td.len() != 2 {
            return Err(TapeError::Invalid {
                op: "embedding_lookup",
                msg: format!("table must be rank 2, got {:?}", td),
            });
        }
        if id >= td[0] {
            return Err(TapeError::Invalid {
                op: "embedding_lookup",
                msg: format!("row {id} out of range for table with {} rows", td[0]),
            });
        }
        let d = td[1];
        let row = self.data(table)[id * d..(id + 1) * d].to_vec();
        Ok(self.push(Tensor::from_vec(&[d], row), Op::EmbedRow { table, row: id }))
    }

    /// Embeds a `view x view` grid of (kind, color, state) codes through three
    /// tables of equal width D into a [3·D, view, view] feature map.
    pub fn embed_obs(
        &mut self,
        codes: &[[u8; 3]],
        view: usize,
        kind: Var,
        color: Var,
        state: Var,
    ) -> Result<Var> {
        let d = self.value(kind).dims()[1];
        if self.value(color).dims()[1] != d || self.value(state).dims()[1] != d {
            return Err(TapeError::DimMismatch {
                op: "embed_obs",
                expected: vec![d],
                got: vec![self.value(color).dims()[1], self.value(state).dims()[1]],
            });
        }
        if codes.len() != view * view {
            return Err(TapeError::DimMismatch {
                op: "embed_obs",
                expected: vec![view * view],
                got: vec![codes.len()],
            });
        }
        let tables = [kind, color, state];
        for (ch, t) in tables.iter().enumerate() {
            let rows = self.value(*t).dims()[0];
            if let Some(bad) = codes.iter().find(|c| c[ch] as usize >= rows) {
                return Err(TapeError::Invalid {
                    op: "embed_obs",
                    msg: format!("code {} out of range for table with {rows} rows", bad[ch]),
                });
            }
        }
        let area = view * view;
        let mut out = vec![T::zero(); 3 * d * area];
        for (cell, code) in codes.iter().enumerate() {
            for (ch, t) in tables.iter().enumerate() {
                let tv = self.data(*t);
                let base = code[ch] as usize * d;
                for k in 0..d {
                    out[(ch * d + k) * area + cell] = tv[base + k];
                }
            }
        }
        Ok(self.push(
            Tensor::from_vec(&[3 * d, view, view], out),
            Op::EmbedObs { kind, color, state, codes: codes.to_vec(), view },
        ))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.data(x);
        if xv.is_empty() {
            return Err(TapeError::Invalid { op: "softmax", msg: "empty input".into() });
        }
        let out = softmax_vec(xv);
        let dims = self.value(x).dims().to_vec();
        Ok(self.push(Tensor::from_vec(&dims, out), Op::Softmax { x }))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.data(x);
        if xv.is_empty() {
            return Err(TapeError::Invalid { op: "log_softmax", msg: "empty input".into() });
        }
        let (max, lse) = log_sum_exp(xv);
        let out: Vec<T> = xv.iter().map(|&v| v - max - lse).collect();
        let dims = self.value(x).dims().to_vec();
        Ok(self.push(Tensor::from_vec(&dims, out), Op::LogSoftmax { x }))
    }

    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let xv = self.data(logits);
        if target >= xv.len() {
            return Err(TapeError::Invalid {
                op: "cross_entropy",
                msg: format!("target {target} out of range for {} logits", xv.len()),
            });
        }
        let (max, lse) = log_sum_exp(xv);
        let loss = max + lse - xv[target];
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, target }))
    }

    /// Elementwise Huber: 0.5 x^2 for |x| <= 1, |x| - 0.5 otherwise.
    pub fn huber(&mut self, x: Var) -> Result<Var> {
        let one = T::one();
        let half = T::from_f64(0.5);
        let out: Vec<T> = self
            .data(x)
            .iter()
            .map(|&v| {
                if v.abs() <= one {
                    half * v * v
                } else {
                    v.abs() - half
                }
            })
            .collect();
        let dims = self.value(x).dims().to_vec();
        Ok(self.push(Tensor::from_vec(&dims, out), Op::Huber { x }))
    }

    // ── elementwise / glue ──────────────────────────────────────────

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<T> = self.data(x).iter().map(|&v| v.max(T::zero())).collect();
        let dims = self.value(x).dims().to_vec();
        Ok(self.push(Tensor::from_vec(&dims, out), Op::Relu { x }))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out: Vec<T> = self.data(x).iter().map(|&v| v.exp()).collect();
        let dims = self.value(x).dims().to_vec();
        Ok(self.push(Tensor::from_vec(&dims, out), Op::Exp { x }))
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let out: Vec<T> = self.data(x).iter().map(|&v| v.ln()).collect();
        let dims = self.value(x).dims().to_vec();
        Ok(self.push(Tensor::from_vec(&dims, out), Op::Ln { x }))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        let out: Vec<T> = self.data(x).iter().map(|&v| -v).collect();
        let dims = self.value(x).dims().to_vec();
        Ok(self.push(Tensor::from_vec(&dims, out), Op::Neg { x }))
    }

    fn binary_elementwise(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Vec<T>, Vec<usize>)> {
        let (av, bv) = (self.data(a), self.data(b));
        if av.len() != bv.len() {
            return Err(TapeError::DimMismatch {
                op,
                expected: self.value(a).dims().to_vec(),
                got: self.value(b).dims().to_vec(),
            });
        }
        let out = av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect();
        Ok((out, self.value(a).dims().to_vec()))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, dims) = self.binary_elementwise("add", a, b, |x, y| x + y)?;
        Ok(self.push(Tensor::from_vec(&dims, out), Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, dims) = self.binary_elementwise("sub", a, b, |x, y| x - y)?;
        Ok(self.push(Tensor::from_vec(&dims, out), Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, dims) = self.binary_elementwise("mul", a, b, |x, y| x * y)?;
        Ok(self.push(Tensor::from_vec(&dims, out), Op::Mul { a, b }))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let out: Vec<T> = self.data(x).iter().map(|&v| v + c).collect();
        let dims = self.value(x).dims().to_vec();
        Ok(self.push(Tensor::from_vec(&dims, out), Op::AddScalar { x }))
    }

    pub fn mul_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let out: Vec<T> = self.data(x).iter().map(|&v| v * c).collect();
        let dims = self.value(x).dims().to_vec();
        Ok(self.push(Tensor::from_vec(&dims, out), Op::MulScalar { x, c }))
    }

    pub fn min2(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, dims) = self.binary_elementwise("min2", a, b, |x, y| x.min(y))?;
        Ok(self.push(Tensor::from_vec(&dims, out), Op::Min2 { a, b }))
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        let out: Vec<T> = self
            .data(x)
            .iter()
            .map(|&v| v.max(lo).min(hi))
            .collect();
        let dims = self.value(x).dims().to_vec();
        Ok(self.push(Tensor::from_vec(&dims, out), Op::Clamp { x, lo, hi }))
    }

    /// Concatenates flattened parts into a 1-D vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TapeError::Invalid { op: "concat", msg: "no parts".into() });
        }
        let mut out = Vec::new();
        for p in parts {
            out.extend_from_slice(self.data(*p));
        }
        let n = out.len();
        Ok(self.push(
            Tensor::from_vec(&[n], out),
            Op::Concat { parts: parts.to_vec() },
        ))
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.data(x);
        if start + len > xv.len() {
            return Err(TapeError::Invalid {
                op: "slice",
                msg: format!("range {start}..{} out of {} elements", start + len, xv.len()),
            });
        }
        let out = xv[start..start + len].to_vec();
        Ok(self.push(Tensor::from_vec(&[len], out), Op::Slice { x, start, len }))
    }

    /// Single element of a vector as a scalar node.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        self.slice(x, index, 1)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().copied().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum { x }))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.data(x);
        if xv.is_empty() {
            return Err(TapeError::Invalid { op: "mean", msg: "empty input".into() });
        }
        let s: T = xv.iter().copied().sum();
        let m = s / T::from_f64(xv.len() as f64);
        Ok(self.push(Tensor::scalar(m), Op::Mean { x }))
    }

    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xd = self.value(x).dims().to_vec();
        let c = xd[0];
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(TapeError::DimMismatch {
                op: "channel_affine",
                expected: vec![c],
                got: vec![self.value(gamma).len(), self.value(beta).len()],
            });
        }
        let spatial = self.value(x).len() / c;
        let gv = self.data(gamma).to_vec();
        let bv = self.data(beta).to_vec();
        let out: Vec<T> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| gv[i / spatial] * v + bv[i / spatial])
            .collect();
        Ok(self.push(Tensor::from_vec(&xd, out), Op::ChannelAffine { x, gamma, beta }))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Every node reachable from the loss
    /// receives a gradient; leaves not on the graph simply have none (read
    /// them out as zeros via [`Grads::get_or_zeros`]).
    pub fn gradients(&self, loss: Var) -> Result<Grads<T>> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(TapeError::NonScalarLoss(lt.dims().to_vec()));
        }
        if !lt.item().is_finite() {
            return Err(TapeError::NonFinite {
                what: "loss value",
                node: loss.0,
                op: self.nodes[loss.0].op.name(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(d_out) = grads[idx].take() else { continue };
            self.backward_op(idx, d_out.data(), &mut grads);
            grads[idx] = Some(d_out);
        }
        Ok(Grads { grads })
    }

    /// Finds the first node whose accumulated gradient is non-finite.
    /// Used to diagnose a NaN after [`Tape::gradients`] reports one in a leaf.
    pub fn find_non_finite_grad(&self, grads: &Grads<T>) -> Option<(usize, &'static str)> {
        for (i, g) in grads.grads.iter().enumerate() {
            if let Some(t) = g {
                if !t.all_finite() {
                    return Some((i, self.nodes[i].op.name()));
                }
            }
        }
        None
    }

    /// Smallest distance of any kink-bearing op input to its kink, used by
    /// gradient-check tests to reject configurations where central finite
    /// differences straddle a nondifferentiable point. `ignore_min2` skips
    /// min2 nodes whose arguments coincide by construction (the clipped
    /// surrogate at unit ratio), where the composite stays smooth.
    pub fn kink_distance(&self, ignore_min2: bool) -> f64 {
        let mut dist = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => {
                    for &v in self.data(*x) {
                        dist = dist.min(v.as_f64().abs());
                    }
                }
                Op::Huber { x } => {
                    for &v in self.data(*x) {
                        dist = dist.min((v.as_f64().abs() - 1.0).abs());
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    for &v in self.data(*x) {
                        let v = v.as_f64();
                        dist = dist.min((v - lo.as_f64()).abs());
                        dist = dist.min((v - hi.as_f64()).abs());
                    }
                }
                Op::Min2 { a, b } => {
                    if !ignore_min2 {
                        for (&x, &y) in self.data(*a).iter().zip(self.data(*b)) {
                            dist = dist.min((x.as_f64() - y.as_f64()).abs());
                        }
                    }
                }
                _ => {}
            }
        }
        dist
    }

    fn backward_op(&self, idx: usize, d: &[T], grads: &mut Vec<Option<Tensor<T>>>) {
        let acc = |grads: &mut Vec<Option<Tensor<T>>>, v: Var, contrib: &[T]| {
            let slot = &mut grads[v.0];
            match slot {
                Some(g) => {
                    for (gi, ci) in g.data_mut().iter_mut().zip(contrib) {
                        *gi += *ci;
                    }
                }
                None => {
                    let dims = self.value(v).dims().to_vec();
                    *slot = Some(Tensor::from_vec(&dims, contrib.to_vec()));
                }
            }
        };

        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (rows, cols) = {
                    let wd = self.value(*w).dims();
                    (wd[0], wd[1])
                };
                let wv = self.data(*w);
                let xv = self.data(*x);
                let mut dx = vec![T::zero(); cols];
                let mut dw = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    let dr = d[r];
                    if dr == T::zero() {
                        continue;
                    }
                    let wrow = &wv[r * cols..(r + 1) * cols];
                    let drow = &mut dw[r * cols..(r + 1) * cols];
                    for c in 0..cols {
                        dx[c] += wrow[c] * dr;
                        drow[c] = dr * xv[c];
                    }
                }
                acc(grads, *x, &dx);
                acc(grads, *w, &dw);
                acc(grads, *b, d);
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let xd = self.value(*x).dims().to_vec();
                let wd = self.value(*w).dims().to_vec();
                let (c_in, h, wi) = (xd[0], xd[1], xd[2]);
                let (oc, kh, kw) = (wd[0], wd[2], wd[3]);
                let od = self.value(Var(idx)).dims().to_vec();
                let (oh, ow) = (od[1], od[2]);
                let xv = self.data(*x);
                let wv = self.data(*w);
                let mut dx = vec![T::zero(); xv.len()];
                let mut dw = vec![T::zero(); wv.len()];
                let mut db = vec![T::zero(); oc];
                for o in 0..oc {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let dv = d[(o * oh + oy) * ow + ox];
                            if dv == T::zero() {
                                continue;
                            }
                            db[o] += dv;
                            for ci in 0..c_in {
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky) as isize - *pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = (ox * stride + kx) as isize - *pad as isize;
                                        if ix < 0 || ix >= wi as isize {
                                            continue;
                                        }
                                        let wi_idx = ((o * c_in + ci) * kh + ky) * kw + kx;
                                        let xi_idx = (ci * h + iy as usize) * wi + ix as usize;
                                        dx[xi_idx] += wv[wi_idx] * dv;
                                        dw[wi_idx] += xv[xi_idx] * dv;
                                    }
                                }
                            }
                        }
                    }
                }
                acc(grads, *x, &dx);
                acc(grads, *w, &dw);
                acc(grads, *b, &db);
            }
            Op::LstmCell { x, h, c, w_ih, w_hh, b, gates } => {
                let hid = self.value(*h).len();
                let in_dim = self.value(*x).len();
                let value = self.data(Var(idx));
                let cv = self.data(*c);
                let (d_h, d_c_ext) = d.split_at(hid);
                let mut dz = vec![T::zero(); 4 * hid];
                for k in 0..hid {
                    let (i, f, g, o) = (gates[k], gates[hid + k], gates[2 * hid + k], gates[3 * hid + k]);
                    let c_new = value[hid + k];
                    let tc = c_new.tanh();
                    let d_o = d_h[k] * tc;
                    let d_cn = d_c_ext[k] + d_h[k] * o * (T::one() - tc * tc);
                    let d_i = d_cn * g;
                    let d_f = d_cn * cv[k];
                    let d_g = d_cn * i;
                    dz[k] = d_i * i * (T::one() - i);
                    dz[hid + k] = d_f * f * (T::one() - f);
                    dz[2 * hid + k] = d_g * (T::one() - g * g);
                    dz[3 * hid + k] = d_o * o * (T::one() - o);
                }
                // d_c (previous cell) via forget gate
                let mut dc_prev = vec![T::zero(); hid];
                for k in 0..hid {
                    let tc = value[hid + k].tanh();
                    let d_cn = d_c_ext[k] + d_h[k] * gates[3 * hid + k] * (T::one() - tc * tc);
                    dc_prev[k] = d_cn * gates[hid + k];
                }
                let xv = self.data(*x);
                let hv = self.data(*h);
                let w_ih_v = self.data(*w_ih);
                let w_hh_v = self.data(*w_hh);
                let mut dx = vec![T::zero(); in_dim];
                let mut dh = vec![T::zero(); hid];
                let mut dwih = vec![T::zero(); 4 * hid * in_dim];
                let mut dwhh = vec![T::zero(); 4 * hid * hid];
                for r in 0..4 * hid {
                    let dr = dz[r];
                    if dr == T::zero() {
                        continue;
                    }
                    let wrow = &w_ih_v[r * in_dim..(r + 1) * in_dim];
                    let drow = &mut dwih[r * in_dim..(r + 1) * in_dim];
                    for cc in 0..in_dim {
                        dx[cc] += wrow[cc] * dr;
                        drow[cc] = dr * xv[cc];
                    }
                    let wrow = &w_hh_v[r * hid..(r + 1) * hid];
                    let drow = &mut dwhh[r * hid..(r + 1) * hid];
                    for cc in 0..hid {
                        dh[cc] += wrow[cc] * dr;
                        drow[cc] = dr * hv[cc];
                    }
                }
                acc(grads, *x, &dx);
                acc(grads, *h, &dh);
                acc(grads, *c, &dc_prev);
                acc(grads, *w_ih, &dwih);
                acc(grads, *w_hh, &dwhh);
                acc(grads, *b, &dz);
            }
            Op::EmbedRow { table, row } => {
                let td = self.value(*table).dims().to_vec();
                let dcols = td[1];
                let mut dt = vec![T::zero(); td[0] * dcols];
                dt[row * dcols..(row + 1) * dcols].copy_from_slice(d);
                acc(grads, *table, &dt);
            }
            Op::EmbedObs { kind, color, state, codes, view } => {
                let dcols = self.value(*kind).dims()[1];
                let area = view * view;
                let tables = [kind, color, state];
                for (ch, t) in tables.iter().enumerate() {
                    let rows = self.value(**t).dims()[0];
                    let mut dt = vec![T::zero(); rows * dcols];
                    for (cell, code) in codes.iter().enumerate() {
                        let base = code[ch] as usize * dcols;
                        for k in 0..dcols {
                            dt[base + k] += d[(ch * dcols + k) * area + cell];
                        }
                    }
                    acc(grads, **t, &dt);
                }
            }
            Op::Softmax { x } => {
                let s = self.data(Var(idx));
                let dot: T = d.iter().zip(s).map(|(&a, &b)| a * b).sum();
                let dx: Vec<T> = d.iter().zip(s).map(|(&di, &si)| si * (di - dot)).collect();
                acc(grads, *x, &dx);
            }
            Op::LogSoftmax { x } => {
                let xv = self.data(*x);
                let p = softmax_vec(xv);
                let dsum: T = d.iter().copied().sum();
                let dx: Vec<T> = d.iter().zip(&p).map(|(&di, &pi)| di - pi * dsum).collect();
                acc(grads, *x, &dx);
            }
            Op::CrossEntropy { logits, target } => {
                let xv = self.data(*logits);
                let mut p = softmax_vec(xv);
                p[*target] -= T::one();
                let dv = d[0];
                for v in p.iter_mut() {
                    *v *= dv;
                }
                acc(grads, *logits, &p);
            }
            Op::Huber { x } => {
                let xv = self.data(*x);
                let dx: Vec<T> = xv
                    .iter()
                    .zip(d)
                    .map(|(&v, &di)| {
                        let g = if v.abs() <= T::one() { v } else { v.signum() };
                        g * di
                    })
                    .collect();
                acc(grads, *x, &dx);
            }
            Op::Relu { x } => {
                let xv = self.data(*x);
                let dx: Vec<T> = xv
                    .iter()
                    .zip(d)
                    .map(|(&v, &di)| if v > T::zero() { di } else { T::zero() })
                    .collect();
                acc(grads, *x, &dx);
            }
            Op::Exp { x } => {
                let out = self.data(Var(idx));
                let dx: Vec<T> = out.iter().zip(d).map(|(&o, &di)| o * di).collect();
                acc(grads, *x, &dx);
            }
            Op::Ln { x } => {
                let xv = self.data(*x);
                let dx: Vec<T> = xv.iter().zip(d).map(|(&v, &di)| di / v).collect();
                acc(grads, *x, &dx);
            }
            Op::Neg { x } => {
                let dx: Vec<T> = d.iter().map(|&di| -di).collect();
                acc(grads, *x, &dx);
            }
            Op::Add { a, b } => {
                acc(grads, *a, d);
                acc(grads, *b, d);
            }
            Op::Sub { a, b } => {
                acc(grads, *a, d);
                let dneg: Vec<T> = d.iter().map(|&di| -di).collect();
                acc(grads, *b, &dneg);
            }
            Op::Mul { a, b } => {
                let av = self.data(*a);
                let bv = self.data(*b);
                let da: Vec<T> = d.iter().zip(bv).map(|(&di, &v)| di * v).collect();
                let db: Vec<T> = d.iter().zip(av).map(|(&di, &v)| di * v).collect();
                acc(grads, *a, &da);
                acc(grads, *b, &db);
            }
            Op::AddScalar { x } => {
                acc(grads, *x, d);
            }
            Op::MulScalar { x, c } => {
                let dx: Vec<T> = d.iter().map(|&di| di * *c).collect();
                acc(grads, *x, &dx);
            }
            Op::Min2 { a, b } => {
                let av = self.data(*a);
                let bv = self.data(*b);
                let mut da = vec![T::zero(); d.len()];
                let mut db = vec![T::zero(); d.len()];
                for i in 0..d.len() {
                    if av[i] <= bv[i] {
                        da[i] = d[i];
                    } else {
                        db[i] = d[i];
                    }
                }
                acc(grads, *a, &da);
                acc(grads, *b, &db);
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.data(*x);
                let dx: Vec<T> = xv
                    .iter()
                    .zip(d)
                    .map(|(&v, &di)| if v >= *lo && v <= *hi { di } else { T::zero() })
                    .collect();
                acc(grads, *x, &dx);
            }
            Op::Concat { parts } => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    acc(grads, *p, &d[off..off + n]);
                    off += n;
                }
            }
            Op::Slice { x, start, len } => {
                let mut dx = vec![T::zero(); self.value(*x).len()];
                dx[*start..*start + *len].copy_from_slice(&d[..*len]);
                acc(grads, *x, &dx);
            }
            Op::Sum { x } => {
                let dx = vec![d[0]; self.value(*x).len()];
                acc(grads, *x, &dx);
            }
            Op::Mean { x } => {
                let n = self.value(*x).len();
                let dv = d[0] / T::from_f64(n as f64);
                let dx = vec![dv; n];
                acc(grads, *x, &dx);
            }
            Op::ChannelAffine { x, gamma, beta } => {
                let xd = self.value(*x).dims().to_vec();
                let ch = xd[0];
                let spatial = self.value(*x).len() / ch;
                let xv = self.data(*x);
                let gv = self.data(*gamma);
                let mut dx = vec![T::zero(); xv.len()];
                let mut dg = vec![T::zero(); ch];
                let mut db = vec![T::zero(); ch];
                for c in 0..ch {
                    for s in 0..spatial {
                        let i = c * spatial + s;
                        dx[i] = gv[c] * d[i];
                        dg[c] += xv[i] * d[i];
                        db[c] += d[i];
                    }
                }
                acc(grads, *x, &dx);
                acc(grads, *gamma, &dg);
                acc(grads, *beta, &db);
            }
        }
    }
}

fn matvec_acc<T: Scalar>(w: &[T], x: &[T], out: &mut [T], _rows: usize, cols: usize) {
    for (r, o) in out.iter_mut().enumerate() {
        *o += dot(&w[r * cols..(r + 1) * cols], x);
    }
}

// Four-lane unrolled dot product: a fixed deterministic summation order that
// the compiler can keep in independent accumulators.
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    let (mut s0, mut s1, mut s2, mut s3) = (T::zero(), T::zero(), T::zero(), T::zero());
    for (qa, qb) in (&mut ca).zip(&mut cb) {
        s0 = s0 + qa[0] * qb[0];
        s1 = s1 + qa[1] * qb[1];
        s2 = s2 + qa[2] * qb[2];
        s3 = s3 + qa[3] * qb[3];
    }
    let mut s = (s0 + s1) + (s2 + s3);
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        s = s + *x * *y;
    }
    s
}

fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

fn softmax_vec<T: Scalar>(x: &[T]) -> Vec<T> {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut out: Vec<T> = x.iter().map(|&v| (v - max).exp()).collect();
    let sum: T = out.iter().copied().sum();
    for v in out.iter_mut() {
        *v /= sum;
    }
    out
}

/// Returns (max, ln sum exp(x - max)).
fn log_sum_exp<T: Scalar>(x: &[T]) -> (T, T) {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = x.iter().map(|&v| (v - max).exp()).sum();
    (max, sum.ln())
}
