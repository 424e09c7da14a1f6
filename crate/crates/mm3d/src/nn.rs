//! Named parameter storage and the small layer vocabulary shared by the
//! backbone and the cascade heads.
//!
//! Parameters live outside any tape; a forward pass binds them onto a tape
//! (as differentiable leaves, constants, or slices of one flat vector) and
//! reads gradients back after the backward sweep. Registration order is
//! construction order, which makes the manifest deterministic.

use std::collections::BTreeMap;

use crate::tensor::{Rng, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Param>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, value: Vec<f64>) -> ParamId {
        let name = name.into();
        assert_eq!(
            shape.iter().product::<usize>(),
            value.len(),
            "param {name}: shape/value mismatch"
        );
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(Param { name, shape, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.entries[id.0]
    }

    pub fn params(&self) -> &[Param] {
        &self.entries
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Vec<f64> {
        &mut self.entries[id.0].value
    }

    pub fn index_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    /// Ordered (name, shape) pairs in registration order.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        self.entries
            .iter()
            .map(|p| (p.name.clone(), p.shape.clone()))
            .collect()
    }

    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_len());
        for p in &self.entries {
            out.extend_from_slice(&p.value);
        }
        out
    }

    pub fn load_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.total_len(), "load_flat: length mismatch");
        let mut off = 0;
        for p in &mut self.entries {
            let n = p.value.len();
            p.value.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    /// Bind every parameter as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|p| tape.leaf(Tensor::new(p.shape.clone(), p.value.clone())))
            .collect();
        Bound { vars }
    }

    /// Bind every parameter as a constant (inference).
    pub fn bind_const(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|p| tape.constant(Tensor::new(p.shape.clone(), p.value.clone())))
            .collect();
        Bound { vars }
    }

    /// Bind all parameters as reshaped slices of one flat vector, so a
    /// whole-model function of that vector can be gradient-checked.
    pub fn bind_from_flat(&self, tape: &mut Tape, flat: Var) -> Bound {
        assert_eq!(tape.data(flat).len(), self.total_len(), "bind_from_flat length");
        let mut off = 0;
        let vars = self
            .entries
            .iter()
            .map(|p| {
                let n = p.value.len();
                let sl = tape.flat_slice(flat, off, n);
                off += n;
                tape.reshape(sl, p.shape.clone())
            })
            .collect();
        Bound { vars }
    }

    /// Per-parameter gradients after `tape.backward`, in registration order.
    pub fn gradients(&self, tape: &Tape, bound: &Bound) -> Vec<Vec<f64>> {
        bound.vars.iter().map(|&v| tape.grad(v)).collect()
    }
}

/// Parameters materialized on a tape for one forward/backward pass.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

// ---- layers ----

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    dout: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, prefix: &str, din: usize, dout: usize, rng: &mut Rng) -> Self {
        let mut l = Self::unbiased(store, prefix, din, dout, rng);
        l.b = Some(store.add(format!("{prefix}.bias"), vec![dout], vec![0.0; dout]));
        l
    }

    /// Linear map without a bias term. Key projections use this: under the
    /// attention softmax a key bias shifts every score equally and carries
    /// no gradient.
    pub fn unbiased(store: &mut ParamStore, prefix: &str, din: usize, dout: usize, rng: &mut Rng) -> Self {
        let scale = 1.0 / (din as f64).sqrt();
        let w = store.add(
            format!("{prefix}.weight"),
            vec![din, dout],
            rng.gaussian_vec(din * dout, scale),
        );
        Linear { w, b: None, dout }
    }

    /// Residual-branch projection with damped init, keeping the residual
    /// stream near identity at depth so gradients stay stable through the
    /// cascade.
    pub fn new_residual(store: &mut ParamStore, prefix: &str, din: usize, dout: usize, rng: &mut Rng) -> Self {
        let scale = 0.2 / (din as f64).sqrt();
        let w = store.add(
            format!("{prefix}.weight"),
            vec![din, dout],
            rng.gaussian_vec(din * dout, scale),
        );
        let b = store.add(format!("{prefix}.bias"), vec![dout], vec![0.0; dout]);
        Linear { w, b: Some(b), dout }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Var {
        match self.b {
            Some(b) => tape.linear(x, bound.var(self.w), bound.var(b)),
            None => {
                let zero = tape.constant(Tensor::zeros(vec![self.dout]));
                tape.linear(x, bound.var(self.w), zero)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{prefix}.gamma"), vec![dim], vec![1.0; dim]);
        let beta = store.add(format!("{prefix}.beta"), vec![dim], vec![0.0; dim]);
        LayerNorm { gamma, beta }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Var {
        tape.layer_norm(x, bound.var(self.gamma), bound.var(self.beta))
    }
}

/// Multi-head attention with residual connection and layer normalization.
/// One parameter set serves both self-attention (kv = x) and cross-attention.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub norm: LayerNorm,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, heads: usize, rng: &mut Rng) -> Self {
        assert!(dim.is_multiple_of(heads), "attention: dim {dim} not divisible by heads {heads}");
        Attention {
            q: Linear::new(store, &format!("{prefix}.q"), dim, dim, rng),
            k: Linear::unbiased(store, &format!("{prefix}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{prefix}.v"), dim, dim, rng),
            out: Linear::new_residual(store, &format!("{prefix}.out"), dim, dim, rng),
            norm: LayerNorm::new(store, &format!("{prefix}.norm"), dim),
            heads,
            dim,
        }
    }

    /// Queries from `x`, keys/values from `kv`; returns LN(x + attn).
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var, kv: Var) -> Var {
        let dh = self.dim / self.heads;
        let q = self.q.forward(tape, bound, x);
        let k = self.k.forward(tape, bound, kv);
        let v = self.v.forward(tape, bound, kv);
        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let scores = tape.matmul_tb(qh, kh);
            let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let att = tape.softmax(scaled);
            head_outs.push(tape.matmul(att, vh));
        }
        let merged = tape.concat_cols(&head_outs);
        let proj = self.out.forward(tape, bound, merged);
        let res = tape.add(x, proj);
        self.norm.forward(tape, bound, res)
    }
}


#[cfg(test)]
impl Tape {
    fn forward_helper(&mut self, attn: &Attention, bound: &Bound, x: Var) -> Var {
        attn.forward(self, bound, x, x)
    }
}
