//! Slice-to-volume fusion strategies.
//!
//! The parameter-free trio (weighted / mean / max) collapses per-slice
//! proposal features into one volume-level feature; the three learnable
//! variants trade extra parameters for richer pooling and are kept for
//! comparison. All weight matrices here are (N, S'): one distribution over
//! slices per proposal.

use serde::{Deserialize, Serialize};

use crate::nn::{Bound, Linear, ParamId, ParamStore};
use crate::tensor::{Rng, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    Weighted,
    Mean,
    Max,
    TimeSform,
    QuerySummary,
    MlpRegress,
}

impl Fusion {
    pub fn as_str(self) -> &'static str {
        match self {
            Fusion::Weighted => "weighted",
            Fusion::Mean => "mean",
            Fusion::Max => "max",
            Fusion::TimeSform => "timesform",
            Fusion::QuerySummary => "querysummary",
            Fusion::MlpRegress => "mlpregress",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "weighted" => Fusion::Weighted,
            "mean" => Fusion::Mean,
            "max" => Fusion::Max,
            "timesform" => Fusion::TimeSform,
            "querysummary" => Fusion::QuerySummary,
            "mlpregress" => Fusion::MlpRegress,
            _ => return None,
        })
    }

    pub fn has_params(self) -> bool {
        matches!(self, Fusion::TimeSform | Fusion::QuerySummary | Fusion::MlpRegress)
    }
}

/// Softmax-weighted average over slices: weights from per-slice malignancy
/// logits, one distribution per proposal.
/// Inputs: per-slice features (N,D) and slice logits (N,S').
/// Returns the fused (N,D) feature and the (N,S') weights.
pub fn fuse_weighted(tape: &mut Tape, h_slices: &[Var], m_slices: Var) -> (Var, Var) {
    let w = tape.softmax(m_slices);
    let h = tape.weighted_sum(w, h_slices);
    (h, w)
}

/// Uniform average; the weight matrix is constant 1/S'.
pub fn fuse_mean(tape: &mut Tape, h_slices: &[Var], n: usize) -> (Var, Tensor) {
    let s = h_slices.len();
    let w = Tensor::full(vec![n, s], 1.0 / s as f64);
    let h = tape.weighted_sum_const(w.clone(), h_slices);
    (h, w)
}

/// Per-proposal hard selection of the highest-logit slice; ties break toward
/// the lowest slice index. The weight matrix is one-hot.
pub fn fuse_max(tape: &mut Tape, h_slices: &[Var], m_slices: Var) -> (Var, Tensor) {
    let m = tape.value(m_slices);
    let (n, s) = (m.rows(), m.cols());
    let mut w = vec![0.0; n * s];
    for row in 0..n {
        let mut best = 0;
        for col in 1..s {
            if m.at2(row, col) > m.at2(row, best) {
                best = col;
            }
        }
        w[row * s + best] = 1.0;
    }
    let w = Tensor::new(vec![n, s], w);
    let h = tape.weighted_sum_const(w.clone(), h_slices);
    (h, w)
}

/// Argmax slice per proposal from an (N,S') weight matrix; ties break toward
/// the lowest slice index.
pub fn argmax_rows(w: &Tensor) -> Vec<usize> {
    let (n, s) = (w.rows(), w.cols());
    (0..n)
        .map(|row| {
            let mut best = 0;
            for col in 1..s {
                if w.at2(row, col) > w.at2(row, best) {
                    best = col;
                }
            }
            best
        })
        .collect()
}

/// Joint attention over the S'*k^2 RoI token grid, pooling per-slice RoI
/// features into one (N,k^2,D) volume-level RoI tensor before the dynamic
/// convolution. Per-slice attention mass serves as the slice weights.
#[derive(Clone, Debug)]
pub struct TimeSformFusion {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    dim: usize,
}

impl TimeSformFusion {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, rng: &mut Rng) -> Self {
        TimeSformFusion {
            q: Linear::new(store, &format!("{prefix}.q"), dim, dim, rng),
            k: Linear::unbiased(store, &format!("{prefix}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{prefix}.v"), dim, dim, rng),
            out: Linear::new(store, &format!("{prefix}.out"), dim, dim, rng),
            dim,
        }
    }

    /// f_slices: per-slice (N, k2, D) RoI features.
    /// Returns the fused (N, k2, D) tensor and (N, S') slice weights.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, f_slices: &[Var]) -> (Var, Var) {
        let s = f_slices.len();
        let shape = tape.shape(f_slices[0]).to_vec();
        let (n, k2, d) = (shape[0], shape[1], shape[2]);
        assert_eq!(d, self.dim, "timesform: dim mismatch");

        // queries: mean-over-slices token grid
        let flat: Vec<Var> = f_slices.iter().map(|&f| tape.reshape(f, vec![n, k2 * d])).collect();
        let uniform = Tensor::full(vec![n, s], 1.0 / s as f64);
        let mean_tokens = tape.weighted_sum_const(uniform, &flat);
        let q_tokens = tape.reshape(mean_tokens, vec![n * k2, d]);

        // keys/values over all S'*k^2 tokens, slice-major per proposal
        let all = tape.concat_cols(&flat); // (n, s*k2*d)
        let tokens = tape.reshape(all, vec![n * s * k2, d]);

        let q = self.q.forward(tape, bound, q_tokens);
        let k = self.k.forward(tape, bound, tokens);
        let v = self.v.forward(tape, bound, tokens);

        let q3 = tape.reshape(q, vec![n, k2, d]);
        let k3 = tape.reshape(k, vec![n, s * k2, d]);
        let v3 = tape.reshape(v, vec![n, s * k2, d]);

        let scores = tape.bmm_tb(q3, k3); // (n, k2, s*k2)
        let scaled = tape.scale(scores, 1.0 / (d as f64).sqrt());
        let att = tape.softmax(scaled);
        let pooled = tape.bmm(att, v3); // (n, k2, d)
        let pooled_flat = tape.reshape(pooled, vec![n * k2, d]);
        let proj = self.out.forward(tape, bound, pooled_flat);
        let residual = tape.add(q_tokens, proj);
        let fused = tape.reshape(residual, vec![n, k2, d]);

        // slice mass: sum attention over key bins within each slice, then
        // average over the k2 query bins
        let att_rows = tape.reshape(att, vec![n * k2, s * k2]);
        let mut group = vec![0.0; s * k2 * s];
        for si in 0..s {
            for b in 0..k2 {
                group[(si * k2 + b) * s + si] = 1.0;
            }
        }
        let gvar = tape.constant(Tensor::new(vec![s * k2, s], group));
        let mass = tape.matmul(att_rows, gvar); // (n*k2, s)
        let mass_flat = tape.reshape(mass, vec![n, k2 * s]);
        let mut avg = vec![0.0; k2 * s * s];
        for b in 0..k2 {
            for si in 0..s {
                avg[(b * s + si) * s + si] = 1.0 / k2 as f64;
            }
        }
        let avar = tape.constant(Tensor::new(vec![k2 * s, s], avg));
        let w = tape.matmul(mass_flat, avar); // (n, s)
        (fused, w)
    }
}

/// Learnable per-proposal queries attending over per-slice features; the
/// attention weights double as the slice weights.
#[derive(Clone, Debug)]
pub struct QuerySummaryFusion {
    pub queries: ParamId,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    dim: usize,
}

impl QuerySummaryFusion {
    pub fn new(store: &mut ParamStore, prefix: &str, n: usize, dim: usize, rng: &mut Rng) -> Self {
        let queries = store.add(
            format!("{prefix}.queries"),
            vec![n, dim],
            rng.gaussian_vec(n * dim, 0.02),
        );
        QuerySummaryFusion {
            queries,
            q: Linear::new(store, &format!("{prefix}.q"), dim, dim, rng),
            k: Linear::unbiased(store, &format!("{prefix}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{prefix}.v"), dim, dim, rng),
            out: Linear::new(store, &format!("{prefix}.out"), dim, dim, rng),
            dim,
        }
    }

    /// h_slices: per-slice (N,D) features. Returns fused (N,D) and (N,S') weights.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, h_slices: &[Var]) -> (Var, Var) {
        let n = tape.shape(h_slices[0])[0];
        let q = self.q.forward(tape, bound, bound.var(self.queries));
        let ones = tape.constant(Tensor::full(vec![self.dim, 1], 1.0));
        let mut scores = Vec::with_capacity(h_slices.len());
        let mut values = Vec::with_capacity(h_slices.len());
        for &h in h_slices {
            let k = self.k.forward(tape, bound, h);
            let qk = tape.mul(q, k);
            let dot = tape.matmul(qk, ones); // (N,1) row-wise dot
            scores.push(tape.reshape(dot, vec![n]));
            values.push(self.v.forward(tape, bound, h));
        }
        let score_mat = tape.stack_cols(&scores); // (N, S')
        let scaled = tape.scale(score_mat, 1.0 / (self.dim as f64).sqrt());
        let w = tape.softmax(scaled);
        let pooled = tape.weighted_sum(w, &values);
        let h = self.out.forward(tape, bound, pooled);
        (h, w)
    }
}

/// Concatenate per-slice features and summarize with a two-layer MLP; a
/// regression head on the summary predicts a continuous slice index. The
/// MLP input width binds the model to the S' it was built with.
#[derive(Clone, Debug)]
pub struct MlpRegressFusion {
    fc1: Linear,
    fc2: Linear,
    zreg: Linear,
    slices: usize,
}

impl MlpRegressFusion {
    pub fn new(store: &mut ParamStore, prefix: &str, slices: usize, dim: usize, rng: &mut Rng) -> Self {
        MlpRegressFusion {
            fc1: Linear::new(store, &format!("{prefix}.fc1"), slices * dim, dim, rng),
            fc2: Linear::new(store, &format!("{prefix}.fc2"), dim, dim, rng),
            zreg: Linear::new(store, &format!("{prefix}.zreg"), dim, 1, rng),
            slices,
        }
    }

    /// Returns fused (N,D) and the continuous z prediction (N,).
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, h_slices: &[Var]) -> (Var, Var) {
        assert_eq!(
            h_slices.len(),
            self.slices,
            "mlpregress fusion was built for S'={}, got {} slices",
            self.slices,
            h_slices.len()
        );
        let n = tape.shape(h_slices[0])[0];
        let cat = tape.concat_cols(h_slices);
        let a = self.fc1.forward(tape, bound, cat);
        let act = tape.gelu(a);
        let h = self.fc2.forward(tape, bound, act);
        let z = self.zreg.forward(tape, bound, h);
        let z = tape.reshape(z, vec![n]);
        (h, z)
    }
}

/// Round a continuous slice prediction to the nearest index
/// (half-to-even), clamped into [0, s_max].
pub fn round_z(z: f64, s_max: usize) -> usize {
    let r = round_half_even(z).max(0.0);
    (r as usize).min(s_max)
}

fn round_half_even(x: f64) -> f64 {
    let f = x.floor();
    let frac = x - f;
    if (frac - 0.5).abs() < 1e-12 {
        if (f as i64) % 2 == 0 {
            f
        } else {
            f + 1.0
        }
    } else {
        x.round()
    }
}
