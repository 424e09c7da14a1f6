use super::{numel, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

const LN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Matmul { a: Var, b: Var, transpose_b: bool },
    Bmm { a: Var, b: Var, transpose_b: bool },
    Linear { x: Var, w: Var, b: Var },
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var },
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    Softplus(Var),
    Log1mExp(Var),
    Abs(Var),
    ClampMin(Var, f64),
    ClampMax(Var, f64),
    ElemMin(Var, Var),
    ElemMax(Var, Var),
    SumAll(Var),
    MeanAll(Var),
    SliceCols { x: Var, start: usize, len: usize },
    FlatSlice { x: Var, start: usize, len: usize },
    ConcatCols(Vec<Var>),
    StackCols(Vec<Var>),
    Reshape(Var),
    Transpose2d(Var),
    GatherRows { x: Var, rows: Vec<usize> },
    Gather2d { x: Var, idx: Vec<(usize, usize)> },
    WeightedSum { w: Option<Var>, w_const: Option<Tensor>, slices: Vec<Var> },
    Conv2d { x: Var, w: Var, b: Var, stride: usize },
    RoiAlign(Box<RoiAlignArgs>),
}

pub(crate) struct RoiAlignArgs {
    fm: Var,
    hf: usize,
    wf: usize,
    boxes: Var,
    k: usize,
    stride: f64,
    img_w: f64,
    img_h: f64,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode computation tape. Nodes are appended in evaluation order,
/// which is also a topological order for the backward sweep.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    validate: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// Tape that checks every op output for non-finite values.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            validate: true,
        }
    }

    /// Tape without per-op output scans; callers check the loss scalar instead.
    pub fn unchecked() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            validate: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        if self.validate {
            value.assert_finite("tape op output");
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        t.assert_finite("leaf");
        self.push(t, Op::Leaf, true)
    }

    /// Non-differentiable leaf (inputs, frozen weights, fixed fusion weights).
    pub fn constant(&mut self, t: Tensor) -> Var {
        t.assert_finite("constant");
        self.push(t, Op::Leaf, false)
    }

    // ---- elementwise binary ----

    fn same_shape(&self, a: Var, b: Var, op: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{op}: shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let data = zip_map(self.data(a), self.data(b), |x, y| x + y);
        let t = Tensor::new(self.shape(a).to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let data = zip_map(self.data(a), self.data(b), |x, y| x - y);
        let t = Tensor::new(self.shape(a).to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let data = zip_map(self.data(a), self.data(b), |x, y| x * y);
        let t = Tensor::new(self.shape(a).to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "div");
        let data = zip_map(self.data(a), self.data(b), |x, y| x / y);
        let t = Tensor::new(self.shape(a).to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Div(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let data = self.data(x).iter().map(|v| v * c).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data);
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let data = self.data(x).iter().map(|v| v + c).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data);
        let rg = self.rg(x);
        self.push(t, Op::AddScalar(x), rg)
    }

    pub fn elem_min(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "elem_min");
        let data = zip_map(self.data(a), self.data(b), f64::min);
        let t = Tensor::new(self.shape(a).to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::ElemMin(a, b), rg)
    }

    pub fn elem_max(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "elem_max");
        let data = zip_map(self.data(a), self.data(b), f64::max);
        let t = Tensor::new(self.shape(a).to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::ElemMax(a, b), rg)
    }

    // ---- matrix products ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, false)
    }

    /// a @ b^T for rank-2 a (m,k) and b (n,k).
    pub fn matmul_tb(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, transpose_b: bool) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa.len(), 2, "matmul: a rank {:?}", sa);
        assert_eq!(sb.len(), 2, "matmul: b rank {:?}", sb);
        let (m, k) = (sa[0], sa[1]);
        let (n, kb) = if transpose_b {
            (sb[0], sb[1])
        } else {
            (sb[1], sb[0])
        };
        assert_eq!(k, kb, "matmul: inner dims {k} vs {kb}");
        let mut out = vec![0.0; m * n];
        if transpose_b {
            matmul_abt(self.data(a), self.data(b), m, k, n, &mut out);
        } else {
            matmul_plain(self.data(a), self.data(b), m, k, n, &mut out);
        }
        let t = Tensor::new(vec![m, n], out);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Matmul { a, b, transpose_b }, rg)
    }

    /// Batched matmul: (B,m,k) x (B,k,n) -> (B,m,n).
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        self.bmm_impl(a, b, false)
    }

    /// Batched a @ b^T: (B,m,k) x (B,n,k) -> (B,m,n).
    pub fn bmm_tb(&mut self, a: Var, b: Var) -> Var {
        self.bmm_impl(a, b, true)
    }

    fn bmm_impl(&mut self, a: Var, b: Var, transpose_b: bool) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert_eq!(sa.len(), 3, "bmm: a rank {:?}", sa);
        assert_eq!(sb.len(), 3, "bmm: b rank {:?}", sb);
        assert_eq!(sa[0], sb[0], "bmm: batch {:?} vs {:?}", sa, sb);
        let (bsz, m, k) = (sa[0], sa[1], sa[2]);
        let (n, kb) = if transpose_b { (sb[1], sb[2]) } else { (sb[2], sb[1]) };
        assert_eq!(k, kb, "bmm: inner {:?} vs {:?}", sa, sb);
        let mut out = vec![0.0; bsz * m * n];
        for i in 0..bsz {
            let av = &self.data(a)[i * m * k..(i + 1) * m * k];
            let bv = &self.data(b)[i * k * n..(i + 1) * k * n];
            let ov = &mut out[i * m * n..(i + 1) * m * n];
            if transpose_b {
                matmul_abt(av, bv, m, k, n, ov);
            } else {
                matmul_plain(av, bv, m, k, n, ov);
            }
        }
        let t = Tensor::new(vec![bsz, m, n], out);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Bmm { a, b, transpose_b }, rg)
    }

    /// x @ w + b where x is (..., din), w is (din, dout), b is (dout).
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        assert_eq!(sw.len(), 2, "linear: weight rank {:?}", sw);
        let (din, dout) = (sw[0], sw[1]);
        assert!(!sx.is_empty() && sx[sx.len() - 1] == din, "linear: x {:?} vs din {din}", sx);
        assert_eq!(self.shape(b), &[dout], "linear: bias shape");
        let m = numel(&sx) / din;
        let mut out = vec![0.0; m * dout];
        let bias = self.data(b);
        for row in out.chunks_exact_mut(dout) {
            row.copy_from_slice(bias);
        }
        matmul_plain(self.data(x), self.data(w), m, din, dout, &mut out);
        let mut shape = sx[..sx.len() - 1].to_vec();
        shape.push(dout);
        let t = Tensor::new(shape, out);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(t, Op::Linear { x, w, b }, rg)
    }

    // ---- normalization & activations ----

    /// Softmax over the last axis; max-subtracted for stability.
    /// Rejects non-finite input regardless of the validate flag.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        t.assert_finite("softmax input");
        let groups = last_axis_groups(t.shape());
        let c = *t.shape().last().expect("softmax on scalar");
        let mut out = t.data().to_vec();
        for g in 0..groups {
            softmax_inplace(&mut out[g * c..(g + 1) * c]);
        }
        let t = Tensor::new(t.shape().to_vec(), out);
        let rg = self.rg(x);
        self.push(t, Op::Softmax(x), rg)
    }

    /// Layer normalization over the last axis with learned gamma/beta.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let sx = self.shape(x).to_vec();
        let c = *sx.last().expect("layer_norm on scalar");
        assert_eq!(self.shape(gamma), &[c], "layer_norm gamma");
        assert_eq!(self.shape(beta), &[c], "layer_norm beta");
        let groups = numel(&sx) / c;
        let mut out = vec![0.0; numel(&sx)];
        let (xd, gd, bd) = (self.data(x), self.data(gamma), self.data(beta));
        for g in 0..groups {
            let xs = &xd[g * c..(g + 1) * c];
            let os = &mut out[g * c..(g + 1) * c];
            let (mean, var) = mean_var(xs);
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for i in 0..c {
                os[i] = (xs[i] - mean) * inv * gd[i] + bd[i];
            }
        }
        let t = Tensor::new(sx, out);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(t, Op::LayerNorm { x, gamma, beta }, rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| gelu(v)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data);
        let rg = self.rg(x);
        self.push(t, Op::Gelu(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data);
        let rg = self.rg(x);
        self.push(t, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| sigmoid(v)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data);
        let rg = self.rg(x);
        self.push(t, Op::Sigmoid(x), rg)
    }

    pub fn log(&mut self, x: Var) -> Var {
        for &v in self.data(x) {
            assert!(v > 0.0 && v.is_finite(), "log: domain error on input {v}");
        }
        let data = self.data(x).iter().map(|v| v.ln()).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data);
        let rg = self.rg(x);
        self.push(t, Op::Log(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|v| v.exp()).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data);
        let rg = self.rg(x);
        self.push(t, Op::Exp(x), rg)
    }

    /// ln(1 + e^x), stable for large |x|.
    pub fn softplus(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| softplus(v)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data);
        let rg = self.rg(x);
        self.push(t, Op::Softplus(x), rg)
    }

    /// ln(1 - e^{-t}) for t > 0, stable near both ends.
    pub fn log1mexp(&mut self, x: Var) -> Var {
        for &v in self.data(x) {
            assert!(v > 0.0 && v.is_finite(), "log1mexp: input must be > 0, got {v}");
        }
        let data = self.data(x).iter().map(|&v| log1mexp(v)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data);
        let rg = self.rg(x);
        self.push(t, Op::Log1mExp(x), rg)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|v| v.abs()).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data);
        let rg = self.rg(x);
        self.push(t, Op::Abs(x), rg)
    }

    pub fn clamp_min(&mut self, x: Var, c: f64) -> Var {
        let data = self.data(x).iter().map(|v| v.max(c)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data);
        let rg = self.rg(x);
        self.push(t, Op::ClampMin(x, c), rg)
    }

    pub fn clamp_max(&mut self, x: Var, c: f64) -> Var {
        let data = self.data(x).iter().map(|v| v.min(c)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data);
        let rg = self.rg(x);
        self.push(t, Op::ClampMax(x, c), rg)
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.data(x).len();
        assert!(n > 0, "mean_all on empty tensor");
        let s = self.data(x).iter().sum::<f64>() / n as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::MeanAll(x), rg)
    }

    // ---- shape manipulation ----

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (r, c) = (self.value(x).rows(), self.value(x).cols());
        assert!(start + len <= c, "slice_cols: {start}+{len} > {c}");
        let xd = self.data(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xd[i * c + start..i * c + start + len]);
        }
        let t = Tensor::new(vec![r, len], out);
        let rg = self.rg(x);
        self.push(t, Op::SliceCols { x, start, len }, rg)
    }

    /// Slice of the flattened data; result is rank-1.
    pub fn flat_slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        assert!(start + len <= self.data(x).len(), "flat_slice out of range");
        let out = self.data(x)[start..start + len].to_vec();
        let rg = self.rg(x);
        self.push(Tensor::from_vec(out), Op::FlatSlice { x, start, len }, rg)
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "concat_cols: empty input");
        let r = self.value(xs[0]).rows();
        let cols: Vec<usize> = xs.iter().map(|&v| self.value(v).cols()).collect();
        for &v in xs {
            assert_eq!(self.value(v).rows(), r, "concat_cols: row mismatch");
        }
        let total: usize = cols.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (j, &v) in xs.iter().enumerate() {
                let c = cols[j];
                out.extend_from_slice(&self.data(v)[i * c..(i + 1) * c]);
            }
        }
        let t = Tensor::new(vec![r, total], out);
        let rg = xs.iter().any(|&v| self.rg(v));
        self.push(t, Op::ConcatCols(xs.to_vec()), rg)
    }

    /// Stack K rank-1 tensors of length R into an (R, K) matrix.
    pub fn stack_cols(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "stack_cols: empty input");
        let r = self.data(xs[0]).len();
        for &v in xs {
            assert_eq!(self.shape(v), &[r], "stack_cols: want rank-1 length {r}");
        }
        let k = xs.len();
        let mut out = vec![0.0; r * k];
        for (j, &v) in xs.iter().enumerate() {
            for (i, &val) in self.data(v).iter().enumerate() {
                out[i * k + j] = val;
            }
        }
        let t = Tensor::new(vec![r, k], out);
        let rg = xs.iter().any(|&v| self.rg(v));
        self.push(t, Op::StackCols(xs.to_vec()), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        assert_eq!(numel(&shape), self.data(x).len(), "reshape: element count");
        let t = Tensor::new(shape, self.data(x).to_vec());
        let rg = self.rg(x);
        self.push(t, Op::Reshape(x), rg)
    }

    pub fn transpose2d(&mut self, x: Var) -> Var {
        let (r, c) = (self.value(x).rows(), self.value(x).cols());
        let xd = self.data(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xd[i * c + j];
            }
        }
        let t = Tensor::new(vec![c, r], out);
        let rg = self.rg(x);
        self.push(t, Op::Transpose2d(x), rg)
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let (r, c) = (self.value(x).rows(), self.value(x).cols());
        let xd = self.data(x);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            assert!(i < r, "gather_rows: row {i} out of {r}");
            out.extend_from_slice(&xd[i * c..(i + 1) * c]);
        }
        let t = Tensor::new(vec![rows.len(), c], out);
        let rg = self.rg(x);
        self.push(t, Op::GatherRows { x, rows: rows.to_vec() }, rg)
    }

    /// Gather individual (row, col) entries of a rank-2 tensor into a vector.
    pub fn gather2d(&mut self, x: Var, idx: &[(usize, usize)]) -> Var {
        let (r, c) = (self.value(x).rows(), self.value(x).cols());
        let xd = self.data(x);
        let mut out = Vec::with_capacity(idx.len());
        for &(i, j) in idx {
            assert!(i < r && j < c, "gather2d: ({i},{j}) out of ({r},{c})");
            out.push(xd[i * c + j]);
        }
        let t = Tensor::from_vec(out);
        let rg = self.rg(x);
        self.push(t, Op::Gather2d { x, idx: idx.to_vec() }, rg)
    }

    // ---- fused detector ops ----

    /// out[n,d] = sum_s w[n,s] * slices[s][n,d], with differentiable weights.
    pub fn weighted_sum(&mut self, w: Var, slices: &[Var]) -> Var {
        let wt = self.value(w).clone();
        let t = self.weighted_sum_value(&wt, slices);
        let rg = self.rg(w) || slices.iter().any(|&v| self.rg(v));
        self.push(
            t,
            Op::WeightedSum { w: Some(w), w_const: None, slices: slices.to_vec() },
            rg,
        )
    }

    /// Same contraction with fixed (non-learned) weights.
    pub fn weighted_sum_const(&mut self, w: Tensor, slices: &[Var]) -> Var {
        let t = self.weighted_sum_value(&w, slices);
        let rg = slices.iter().any(|&v| self.rg(v));
        self.push(
            t,
            Op::WeightedSum { w: None, w_const: Some(w), slices: slices.to_vec() },
            rg,
        )
    }

    fn weighted_sum_value(&self, w: &Tensor, slices: &[Var]) -> Tensor {
        let (n, s) = (w.rows(), w.cols());
        assert_eq!(s, slices.len(), "weighted_sum: {s} weights vs {} slices", slices.len());
        let d = self.value(slices[0]).cols();
        let mut out = vec![0.0; n * d];
        for (si, &sv) in slices.iter().enumerate() {
            assert_eq!(self.shape(sv), &[n, d], "weighted_sum: slice shape");
            let sd = self.data(sv);
            for row in 0..n {
                let wv = w.data()[row * s + si];
                let src = &sd[row * d..(row + 1) * d];
                let dst = &mut out[row * d..(row + 1) * d];
                for (o, &v) in dst.iter_mut().zip(src) {
                    *o += wv * v;
                }
            }
        }
        Tensor::new(vec![n, d], out)
    }

    /// 3x3 convolution, padding 1, stride 1 or 2.
    /// x: (Cin,H,W), w: (Cout,Cin,3,3), b: (Cout) -> (Cout, ceil(H/s), ceil(W/s)).
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Var {
        assert!(stride == 1 || stride == 2, "conv2d: stride {stride}");
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        assert_eq!(sx.len(), 3, "conv2d: x shape {:?}", sx);
        assert_eq!(sw.len(), 4, "conv2d: w shape {:?}", sw);
        assert_eq!(sw[2], 3, "conv2d: kernel must be 3x3");
        assert_eq!(sw[1], sx[0], "conv2d: channel mismatch");
        let (cin, h, wid) = (sx[0], sx[1], sx[2]);
        let cout = sw[0];
        assert_eq!(self.shape(b), &[cout], "conv2d: bias shape");
        let oh = h.div_ceil(stride);
        let ow = wid.div_ceil(stride);
        let mut out = vec![0.0; cout * oh * ow];
        conv2d_forward(
            self.data(x),
            self.data(w),
            self.data(b),
            cin,
            h,
            wid,
            cout,
            oh,
            ow,
            stride,
            &mut out,
        );
        let t = Tensor::new(vec![cout, oh, ow], out);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(t, Op::Conv2d { x, w, b, stride }, rg)
    }

    /// Bin-center bilinear RoI pooling.
    ///
    /// fm: (hf*wf, d) feature grid, boxes: (N,4) image-pixel corners.
    /// Boxes are clamped to [0,img_w]x[0,img_h] before sampling, one bilinear
    /// sample per bin center at feature coords = image coords / stride.
    /// Returns (N, k*k, d).
    #[allow(clippy::too_many_arguments)]
    pub fn roi_align(
        &mut self,
        fm: Var,
        hf: usize,
        wf: usize,
        boxes: Var,
        k: usize,
        stride: f64,
        img_w: f64,
        img_h: f64,
    ) -> Var {
        assert!(k >= 1, "roi_align: k must be >= 1");
        let d = self.value(fm).cols();
        assert_eq!(self.value(fm).rows(), hf * wf, "roi_align: fm rows");
        let n = self.value(boxes).rows();
        assert_eq!(self.value(boxes).cols(), 4, "roi_align: boxes must be (N,4)");
        let mut out = vec![0.0; n * k * k * d];
        let mut degenerate = 0usize;
        {
            let fmd = self.data(fm);
            let bd = self.data(boxes);
            for bi in 0..n {
                let (x1, y1, x2, y2) = clamp_box(&bd[bi * 4..bi * 4 + 4], img_w, img_h);
                if x2 - x1 <= 0.0 || y2 - y1 <= 0.0 {
                    degenerate += 1;
                }
                for by in 0..k {
                    let cy = y1 + (by as f64 + 0.5) * (y2 - y1) / k as f64;
                    for bx in 0..k {
                        let cx = x1 + (bx as f64 + 0.5) * (x2 - x1) / k as f64;
                        let (fy, fx) = (cy / stride, cx / stride);
                        let s = bilinear_setup(fy, fx, hf, wf);
                        let dst = &mut out[(bi * k * k + by * k + bx) * d..][..d];
                        bilinear_sample(fmd, wf, d, &s, dst);
                    }
                }
            }
        }
        if degenerate > 0 {
            log::debug!("roi_align: {degenerate} degenerate box(es) after clamping");
        }
        let t = Tensor::new(vec![n, k * k, d], out);
        let rg = self.rg(fm) || self.rg(boxes);
        self.push(
            t,
            Op::RoiAlign(Box::new(RoiAlignArgs {
                fm,
                hf,
                wf,
                boxes,
                k,
                stride,
                img_w,
                img_h,
            })),
            rg,
        )
    }

    // ---- backward ----

    /// Reverse sweep from a scalar root. Gradients are retrievable with
    /// [`Tape::grad`] until the next backward call.
    pub fn backward(&mut self, root: Var) {
        assert!(
            self.value(root).is_scalar(),
            "backward: root must be scalar, got shape {:?}",
            self.shape(root)
        );
        self.grads.clear();
        self.grads.resize(self.nodes.len(), None);
        self.grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if self.grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let g = self.grads[i].take().expect("grad present");
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
    }

    /// Gradient of the last backward root w.r.t. `v` (zeros if unreached).
    pub fn grad(&self, v: Var) -> Vec<f64> {
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => vec![0.0; self.data(v).len()],
        }
    }

    fn accum(&mut self, v: Var, contrib: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        if self.grads[v.0].is_none() {
            self.grads[v.0] = Some(vec![0.0; self.nodes[v.0].value.len()]);
        }
        contrib(self.grads[v.0].as_mut().expect("just set"));
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // Values may be read from self.nodes while grads are written via accum.
        // To satisfy the borrow checker we copy what backward rules need.
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accum(a, |ga| add_assign(ga, g));
                self.accum(b, |gb| add_assign(gb, g));
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.accum(a, |ga| add_assign(ga, g));
                self.accum(b, |gb| sub_assign(gb, g));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let (ad, bd) = (self.data(a).to_vec(), self.data(b).to_vec());
                self.accum(a, |ga| mul_add_assign(ga, g, &bd));
                self.accum(b, |gb| mul_add_assign(gb, g, &ad));
            }
            Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                let (ad, bd) = (self.data(a).to_vec(), self.data(b).to_vec());
                self.accum(a, |ga| {
                    for ((ga, &gv), &bv) in ga.iter_mut().zip(g).zip(&bd) {
                        *ga += gv / bv;
                    }
                });
                self.accum(b, |gb| {
                    for (((gb, &gv), &av), &bv) in gb.iter_mut().zip(g).zip(&ad).zip(&bd) {
                        *gb -= gv * av / (bv * bv);
                    }
                });
            }
            Op::Scale(x, c) => {
                let (x, c) = (*x, *c);
                self.accum(x, |gx| {
                    for (gx, &gv) in gx.iter_mut().zip(g) {
                        *gx += gv * c;
                    }
                });
            }
            Op::AddScalar(x) => {
                let x = *x;
                self.accum(x, |gx| add_assign(gx, g));
            }
            Op::Matmul { a, b, transpose_b } => {
                let (a, b, tb) = (*a, *b, *transpose_b);
                let (m, k) = (self.value(a).rows(), self.value(a).cols());
                let n = if tb { self.value(b).rows() } else { self.value(b).cols() };
                let (ad, bd) = (self.data(a).to_vec(), self.data(b).to_vec());
                if tb {
                    // out = a @ b^T, b is (n,k): da += g @ b ; db += g^T @ a
                    self.accum(a, |ga| matmul_plain(g, &bd, m, n, k, ga));
                    self.accum(b, |gb| matmul_atb(g, &ad, m, n, k, gb));
                } else {
                    // b is (k,n): da += g @ b^T ; db += a^T @ g
                    self.accum(a, |ga| matmul_abt(g, &bd, m, n, k, ga));
                    self.accum(b, |gb| matmul_atb(&ad, g, m, k, n, gb));
                }
            }
            Op::Bmm { a, b, transpose_b } => {
                let (a, b, tb) = (*a, *b, *transpose_b);
                let sa = self.shape(a).to_vec();
                let sb = self.shape(b).to_vec();
                let (bsz, m, k) = (sa[0], sa[1], sa[2]);
                let n = if tb { sb[1] } else { sb[2] };
                let (ad, bd) = (self.data(a).to_vec(), self.data(b).to_vec());
                self.accum(a, |ga| {
                    for i in 0..bsz {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &bd[i * k * n..(i + 1) * k * n];
                        let gai = &mut ga[i * m * k..(i + 1) * m * k];
                        if tb {
                            // out = a b^T, b (n,k): da += g @ b
                            matmul_plain(gi, bi, m, n, k, gai);
                        } else {
                            matmul_abt(gi, bi, m, n, k, gai);
                        }
                    }
                });
                self.accum(b, |gb| {
                    for i in 0..bsz {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &ad[i * m * k..(i + 1) * m * k];
                        let gbi = &mut gb[i * k * n..(i + 1) * k * n];
                        if tb {
                            // db += g^T @ a  -> (n,k)
                            matmul_atb(gi, ai, m, n, k, gbi);
                        } else {
                            matmul_atb(ai, gi, m, k, n, gbi);
                        }
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let sw = self.shape(w).to_vec();
                let (din, dout) = (sw[0], sw[1]);
                let m = self.data(x).len() / din;
                let (xd, wd) = (self.data(x).to_vec(), self.data(w).to_vec());
                self.accum(x, |gx| matmul_abt(g, &wd, m, dout, din, gx));
                self.accum(w, |gw| matmul_atb(&xd, g, m, din, dout, gw));
                self.accum(b, |gb| {
                    for row in g.chunks_exact(dout) {
                        add_assign(gb, row);
                    }
                });
            }
            Op::Softmax(x) => {
                let x = *x;
                let y = self.nodes[i].value.data().to_vec();
                let c = *self.nodes[i].value.shape().last().expect("softmax shape");
                self.accum(x, |gx| {
                    for gi in 0..y.len() / c {
                        let ys = &y[gi * c..(gi + 1) * c];
                        let gs = &g[gi * c..(gi + 1) * c];
                        let dot: f64 = ys.iter().zip(gs).map(|(&yv, &gv)| yv * gv).sum();
                        let out = &mut gx[gi * c..(gi + 1) * c];
                        for j in 0..c {
                            out[j] += ys[j] * (gs[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let xd = self.data(x).to_vec();
                let gd = self.data(gamma).to_vec();
                let c = gd.len();
                let groups = xd.len() / c;
                // Per-group xhat and inv-std, recomputed from inputs.
                let mut xhat = vec![0.0; xd.len()];
                let mut inv = vec![0.0; groups];
                for gi in 0..groups {
                    let xs = &xd[gi * c..(gi + 1) * c];
                    let (mean, var) = mean_var(xs);
                    let iv = 1.0 / (var + LN_EPS).sqrt();
                    inv[gi] = iv;
                    for j in 0..c {
                        xhat[gi * c + j] = (xs[j] - mean) * iv;
                    }
                }
                self.accum(gamma, |gg| {
                    for gi in 0..groups {
                        for j in 0..c {
                            gg[j] += g[gi * c + j] * xhat[gi * c + j];
                        }
                    }
                });
                self.accum(beta, |gb| {
                    for gi in 0..groups {
                        add_assign(gb, &g[gi * c..(gi + 1) * c]);
                    }
                });
                self.accum(x, |gx| {
                    for gi in 0..groups {
                        let gs = &g[gi * c..(gi + 1) * c];
                        let xh = &xhat[gi * c..(gi + 1) * c];
                        let mut mean_gl = 0.0;
                        let mut mean_glx = 0.0;
                        for j in 0..c {
                            let gl = gs[j] * gd[j];
                            mean_gl += gl;
                            mean_glx += gl * xh[j];
                        }
                        mean_gl /= c as f64;
                        mean_glx /= c as f64;
                        let out = &mut gx[gi * c..(gi + 1) * c];
                        for j in 0..c {
                            let gl = gs[j] * gd[j];
                            out[j] += (gl - mean_gl - xh[j] * mean_glx) * inv[gi];
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let x = *x;
                let xd = self.data(x).to_vec();
                self.accum(x, |gx| {
                    for ((gx, &gv), &xv) in gx.iter_mut().zip(g).zip(&xd) {
                        *gx += gv * gelu_grad(xv);
                    }
                });
            }
            Op::Relu(x) => {
                let x = *x;
                let xd = self.data(x).to_vec();
                self.accum(x, |gx| {
                    for ((gx, &gv), &xv) in gx.iter_mut().zip(g).zip(&xd) {
                        if xv > 0.0 {
                            *gx += gv;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let x = *x;
                let y = self.nodes[i].value.data().to_vec();
                self.accum(x, |gx| {
                    for ((gx, &gv), &yv) in gx.iter_mut().zip(g).zip(&y) {
                        *gx += gv * yv * (1.0 - yv);
                    }
                });
            }
            Op::Log(x) => {
                let x = *x;
                let xd = self.data(x).to_vec();
                self.accum(x, |gx| {
                    for ((gx, &gv), &xv) in gx.iter_mut().zip(g).zip(&xd) {
                        *gx += gv / xv;
                    }
                });
            }
            Op::Exp(x) => {
                let x = *x;
                let y = self.nodes[i].value.data().to_vec();
                self.accum(x, |gx| {
                    for ((gx, &gv), &yv) in gx.iter_mut().zip(g).zip(&y) {
                        *gx += gv * yv;
                    }
                });
            }
            Op::Softplus(x) => {
                let x = *x;
                let xd = self.data(x).to_vec();
                self.accum(x, |gx| {
                    for ((gx, &gv), &xv) in gx.iter_mut().zip(g).zip(&xd) {
                        *gx += gv * sigmoid(xv);
                    }
                });
            }
            Op::Log1mExp(x) => {
                let x = *x;
                let xd = self.data(x).to_vec();
                self.accum(x, |gx| {
                    for ((gx, &gv), &xv) in gx.iter_mut().zip(g).zip(&xd) {
                        *gx += gv / xv.exp_m1();
                    }
                });
            }
            Op::Abs(x) => {
                let x = *x;
                let xd = self.data(x).to_vec();
                self.accum(x, |gx| {
                    for ((gx, &gv), &xv) in gx.iter_mut().zip(g).zip(&xd) {
                        *gx += gv * if xv > 0.0 { 1.0 } else if xv < 0.0 { -1.0 } else { 0.0 };
                    }
                });
            }
            Op::ClampMin(x, c) => {
                let (x, c) = (*x, *c);
                let xd = self.data(x).to_vec();
                self.accum(x, |gx| {
                    for ((gx, &gv), &xv) in gx.iter_mut().zip(g).zip(&xd) {
                        if xv >= c {
                            *gx += gv;
                        }
                    }
                });
            }
            Op::ClampMax(x, c) => {
                let (x, c) = (*x, *c);
                let xd = self.data(x).to_vec();
                self.accum(x, |gx| {
                    for ((gx, &gv), &xv) in gx.iter_mut().zip(g).zip(&xd) {
                        if xv <= c {
                            *gx += gv;
                        }
                    }
                });
            }
            Op::ElemMin(a, b) => {
                let (a, b) = (*a, *b);
                let (ad, bd) = (self.data(a).to_vec(), self.data(b).to_vec());
                self.accum(a, |ga| {
                    for (j, (ga, &gv)) in ga.iter_mut().zip(g).enumerate() {
                        if ad[j] <= bd[j] {
                            *ga += gv;
                        }
                    }
                });
                self.accum(b, |gb| {
                    for (j, (gb, &gv)) in gb.iter_mut().zip(g).enumerate() {
                        if ad[j] > bd[j] {
                            *gb += gv;
                        }
                    }
                });
            }
            Op::ElemMax(a, b) => {
                let (a, b) = (*a, *b);
                let (ad, bd) = (self.data(a).to_vec(), self.data(b).to_vec());
                self.accum(a, |ga| {
                    for (j, (ga, &gv)) in ga.iter_mut().zip(g).enumerate() {
                        if ad[j] >= bd[j] {
                            *ga += gv;
                        }
                    }
                });
                self.accum(b, |gb| {
                    for (j, (gb, &gv)) in gb.iter_mut().zip(g).enumerate() {
                        if ad[j] < bd[j] {
                            *gb += gv;
                        }
                    }
                });
            }
            Op::SumAll(x) => {
                let x = *x;
                let gv = g[0];
                self.accum(x, |gx| {
                    for v in gx.iter_mut() {
                        *v += gv;
                    }
                });
            }
            Op::MeanAll(x) => {
                let x = *x;
                let n = self.data(x).len() as f64;
                let gv = g[0] / n;
                self.accum(x, |gx| {
                    for v in gx.iter_mut() {
                        *v += gv;
                    }
                });
            }
            Op::SliceCols { x, start, len } => {
                let (x, start, len) = (*x, *start, *len);
                let c = self.value(x).cols();
                self.accum(x, |gx| {
                    for (r, row) in g.chunks_exact(len).enumerate() {
                        add_assign(&mut gx[r * c + start..r * c + start + len], row);
                    }
                });
            }
            Op::FlatSlice { x, start, len } => {
                let (x, start, len) = (*x, *start, *len);
                self.accum(x, |gx| add_assign(&mut gx[start..start + len], g));
            }
            Op::ConcatCols(xs) => {
                let xs = xs.clone();
                let cols: Vec<usize> = xs.iter().map(|&v| self.value(v).cols()).collect();
                let total: usize = cols.iter().sum();
                let r = self.value(xs[0]).rows();
                let mut offset = 0;
                for (j, &v) in xs.iter().enumerate() {
                    let c = cols[j];
                    self.accum(v, |gv| {
                        for row in 0..r {
                            add_assign(
                                &mut gv[row * c..(row + 1) * c],
                                &g[row * total + offset..row * total + offset + c],
                            );
                        }
                    });
                    offset += c;
                }
            }
            Op::StackCols(xs) => {
                let xs = xs.clone();
                let k = xs.len();
                let r = self.data(xs[0]).len();
                for (j, &v) in xs.iter().enumerate() {
                    self.accum(v, |gv| {
                        for row in 0..r {
                            gv[row] += g[row * k + j];
                        }
                    });
                }
            }
            Op::Reshape(x) => {
                let x = *x;
                self.accum(x, |gx| add_assign(gx, g));
            }
            Op::Transpose2d(x) => {
                let x = *x;
                let (r, c) = (self.value(x).rows(), self.value(x).cols());
                self.accum(x, |gx| {
                    for i2 in 0..r {
                        for j in 0..c {
                            gx[i2 * c + j] += g[j * r + i2];
                        }
                    }
                });
            }
            Op::GatherRows { x, rows } => {
                let x = *x;
                let rows = rows.clone();
                let c = self.value(x).cols();
                self.accum(x, |gx| {
                    for (p, &row) in rows.iter().enumerate() {
                        add_assign(&mut gx[row * c..(row + 1) * c], &g[p * c..(p + 1) * c]);
                    }
                });
            }
            Op::Gather2d { x, idx } => {
                let x = *x;
                let idx = idx.clone();
                let c = self.value(x).cols();
                self.accum(x, |gx| {
                    for (p, &(r, col)) in idx.iter().enumerate() {
                        gx[r * c + col] += g[p];
                    }
                });
            }
            Op::WeightedSum { w, w_const, slices } => {
                let wv = *w;
                let slices = slices.clone();
                let wt = match (wv, w_const) {
                    (Some(v), _) => self.value(v).clone(),
                    (None, Some(t)) => t.clone(),
                    _ => unreachable!(),
                };
                let (n, s) = (wt.rows(), wt.cols());
                let d = self.value(slices[0]).cols();
                if let Some(wvar) = wv {
                    let slice_data: Vec<Vec<f64>> =
                        slices.iter().map(|&v| self.data(v).to_vec()).collect();
                    self.accum(wvar, |gw| {
                        for (si, sd) in slice_data.iter().enumerate() {
                            for row in 0..n {
                                let gr = &g[row * d..(row + 1) * d];
                                let sr = &sd[row * d..(row + 1) * d];
                                let dot: f64 = gr.iter().zip(sr).map(|(&a, &b)| a * b).sum();
                                gw[row * s + si] += dot;
                            }
                        }
                    });
                }
                for (si, &sv) in slices.iter().enumerate() {
                    self.accum(sv, |gs| {
                        for row in 0..n {
                            let wvv = wt.data()[row * s + si];
                            let gr = &g[row * d..(row + 1) * d];
                            let dst = &mut gs[row * d..(row + 1) * d];
                            for (o, &gvv) in dst.iter_mut().zip(gr) {
                                *o += wvv * gvv;
                            }
                        }
                    });
                }
            }
            Op::Conv2d { x, w, b, stride } => {
                let (x, w, b, stride) = (*x, *w, *b, *stride);
                let sx = self.shape(x).to_vec();
                let sw = self.shape(w).to_vec();
                let (cin, h, wid) = (sx[0], sx[1], sx[2]);
                let cout = sw[0];
                let oh = h.div_ceil(stride);
                let ow = wid.div_ceil(stride);
                let xd = self.data(x).to_vec();
                let wd = self.data(w).to_vec();
                self.accum(x, |gx| {
                    conv2d_backward_input(g, &wd, cin, h, wid, cout, oh, ow, stride, gx);
                });
                self.accum(w, |gw| {
                    conv2d_backward_weight(g, &xd, cin, h, wid, cout, oh, ow, stride, gw);
                });
                self.accum(b, |gb| {
                    for oc in 0..cout {
                        gb[oc] += g[oc * oh * ow..(oc + 1) * oh * ow].iter().sum::<f64>();
                    }
                });
            }
            Op::RoiAlign(args) => {
                let RoiAlignArgs { fm, hf, wf, boxes, k, stride, img_w, img_h } = **args;
                let d = self.value(fm).cols();
                let n = self.value(boxes).rows();
                let fmd = self.data(fm).to_vec();
                let bd = self.data(boxes).to_vec();
                let fm_rg = self.nodes[fm.0].requires_grad;
                let box_rg = self.nodes[boxes.0].requires_grad;
                let mut gfm = vec![0.0; fmd.len()];
                let mut gboxes = vec![0.0; bd.len()];
                for bi in 0..n {
                    let raw = &bd[bi * 4..bi * 4 + 4];
                    let (x1, y1, x2, y2) = clamp_box(raw, img_w, img_h);
                    // clamp saturation: no gradient to corners pinned at a bound
                    let x1_free = raw[0] > 0.0 && raw[0] < img_w;
                    let y1_free = raw[1] > 0.0 && raw[1] < img_h;
                    let x2_free = raw[2] > 0.0 && raw[2] < img_w;
                    let y2_free = raw[3] > 0.0 && raw[3] < img_h;
                    for by in 0..k {
                        let fy_bin = (by as f64 + 0.5) / k as f64;
                        let cy = y1 + fy_bin * (y2 - y1);
                        for bx in 0..k {
                            let fx_bin = (bx as f64 + 0.5) / k as f64;
                            let cx = x1 + fx_bin * (x2 - x1);
                            let (fy, fx) = (cy / stride, cx / stride);
                            let s = bilinear_setup(fy, fx, hf, wf);
                            let gout = &g[(bi * k * k + by * k + bx) * d..][..d];
                            if fm_rg {
                                bilinear_scatter(&mut gfm, wf, d, &s, gout);
                            }
                            if box_rg {
                                let (dfx, dfy) = bilinear_pos_grad(&fmd, wf, d, &s, gout);
                                // d sample / d corner, honoring both clamps
                                let dx = dfx / stride;
                                let dy = dfy / stride;
                                if x1_free {
                                    gboxes[bi * 4] += dx * (1.0 - fx_bin);
                                }
                                if x2_free {
                                    gboxes[bi * 4 + 2] += dx * fx_bin;
                                }
                                if y1_free {
                                    gboxes[bi * 4 + 1] += dy * (1.0 - fy_bin);
                                }
                                if y2_free {
                                    gboxes[bi * 4 + 3] += dy * fy_bin;
                                }
                            }
                        }
                    }
                }
                if fm_rg {
                    self.accum(fm, |gf| add_assign(gf, &gfm));
                }
                if box_rg {
                    self.accum(boxes, |gb| add_assign(gb, &gboxes));
                }
            }
        }
    }
}

// ---- scalar math ----

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// ln(1 - e^{-t}) for t > 0.
pub fn log1mexp(t: f64) -> f64 {
    if t <= std::f64::consts::LN_2 {
        (-(-t).exp_m1()).ln()
    } else {
        (-(-t).exp()).ln_1p()
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

fn softmax_inplace(xs: &mut [f64]) {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in xs.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in xs.iter_mut() {
        *v /= sum;
    }
}

fn last_axis_groups(shape: &[usize]) -> usize {
    assert!(!shape.is_empty(), "op needs rank >= 1");
    numel(shape) / shape.last().expect("non-empty shape")
}

// ---- slice helpers ----

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn sub_assign(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d -= s;
    }
}

fn mul_add_assign(dst: &mut [f64], g: &[f64], other: &[f64]) {
    for ((d, &gv), &ov) in dst.iter_mut().zip(g).zip(other) {
        *d += gv * ov;
    }
}

/// out += a @ b for a (m,k), b (k,n).
fn matmul_plain(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out += a @ b^T for a (m,k), b (n,k).
fn matmul_abt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

/// out += a^T @ b for a (m,k), b (m,n) -> (k,n).
fn matmul_atb(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

// ---- conv kernels ----

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    cin: usize,
    h: usize,
    wid: usize,
    cout: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    out: &mut [f64],
) {
    for oc in 0..cout {
        let plane = &mut out[oc * oh * ow..(oc + 1) * oh * ow];
        for v in plane.iter_mut() {
            *v = b[oc];
        }
        for ic in 0..cin {
            let xp = &x[ic * h * wid..(ic + 1) * h * wid];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wv = w[((oc * cin + ic) * 3 + ky) * 3 + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (oy_lo, oy_hi) = conv_range(ky, h, oh, stride);
                    let (ox_lo, ox_hi) = conv_range(kx, wid, ow, stride);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - 1;
                        let xrow = &xp[iy * wid..(iy + 1) * wid];
                        let orow = &mut plane[oy * ow..(oy + 1) * ow];
                        for ox in ox_lo..ox_hi {
                            orow[ox] += wv * xrow[ox * stride + kx - 1];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_input(
    g: &[f64],
    w: &[f64],
    cin: usize,
    h: usize,
    wid: usize,
    cout: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    gx: &mut [f64],
) {
    for oc in 0..cout {
        let gp = &g[oc * oh * ow..(oc + 1) * oh * ow];
        for ic in 0..cin {
            let gxp = &mut gx[ic * h * wid..(ic + 1) * h * wid];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wv = w[((oc * cin + ic) * 3 + ky) * 3 + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (oy_lo, oy_hi) = conv_range(ky, h, oh, stride);
                    let (ox_lo, ox_hi) = conv_range(kx, wid, ow, stride);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - 1;
                        let grow = &gp[oy * ow..(oy + 1) * ow];
                        let xrow = &mut gxp[iy * wid..(iy + 1) * wid];
                        for ox in ox_lo..ox_hi {
                            xrow[ox * stride + kx - 1] += wv * grow[ox];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_weight(
    g: &[f64],
    x: &[f64],
    cin: usize,
    h: usize,
    wid: usize,
    cout: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    gw: &mut [f64],
) {
    for oc in 0..cout {
        let gp = &g[oc * oh * ow..(oc + 1) * oh * ow];
        for ic in 0..cin {
            let xp = &x[ic * h * wid..(ic + 1) * h * wid];
            for ky in 0..3 {
                for kx in 0..3 {
                    let (oy_lo, oy_hi) = conv_range(ky, h, oh, stride);
                    let (ox_lo, ox_hi) = conv_range(kx, wid, ow, stride);
                    let mut acc = 0.0;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - 1;
                        let grow = &gp[oy * ow..(oy + 1) * ow];
                        let xrow = &xp[iy * wid..(iy + 1) * wid];
                        for ox in ox_lo..ox_hi {
                            acc += grow[ox] * xrow[ox * stride + kx - 1];
                        }
                    }
                    gw[((oc * cin + ic) * 3 + ky) * 3 + kx] += acc;
                }
            }
        }
    }
}

/// Output index range for which the input index oy*stride + k - 1 is valid.
fn conv_range(k: usize, input: usize, output: usize, stride: usize) -> (usize, usize) {
    let lo = if k == 0 { 1 } else { 0 };
    // oy*stride + k - 1 <= input - 1  =>  oy <= (input - k) / stride
    let hi = ((input - k) / stride + 1).min(output);
    (lo.min(hi), hi)
}

// ---- bilinear sampling helpers ----

struct BilinearSetup {
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
    ty: f64,
    tx: f64,
    fy_interior: bool,
    fx_interior: bool,
}

fn clamp_box(b: &[f64], img_w: f64, img_h: f64) -> (f64, f64, f64, f64) {
    (
        b[0].clamp(0.0, img_w),
        b[1].clamp(0.0, img_h),
        b[2].clamp(0.0, img_w),
        b[3].clamp(0.0, img_h),
    )
}

fn bilinear_setup(fy: f64, fx: f64, hf: usize, wf: usize) -> BilinearSetup {
    let max_y = (hf - 1) as f64;
    let max_x = (wf - 1) as f64;
    let fy_interior = fy > 0.0 && fy < max_y;
    let fx_interior = fx > 0.0 && fx < max_x;
    let fy = fy.clamp(0.0, max_y);
    let fx = fx.clamp(0.0, max_x);
    let y0 = fy.floor() as usize;
    let x0 = fx.floor() as usize;
    let y1 = (y0 + 1).min(hf - 1);
    let x1 = (x0 + 1).min(wf - 1);
    BilinearSetup {
        y0,
        y1,
        x0,
        x1,
        ty: fy - y0 as f64,
        tx: fx - x0 as f64,
        fy_interior,
        fx_interior,
    }
}

fn bilinear_sample(fm: &[f64], wf: usize, d: usize, s: &BilinearSetup, out: &mut [f64]) {
    let w00 = (1.0 - s.ty) * (1.0 - s.tx);
    let w01 = (1.0 - s.ty) * s.tx;
    let w10 = s.ty * (1.0 - s.tx);
    let w11 = s.ty * s.tx;
    let p00 = (s.y0 * wf + s.x0) * d;
    let p01 = (s.y0 * wf + s.x1) * d;
    let p10 = (s.y1 * wf + s.x0) * d;
    let p11 = (s.y1 * wf + s.x1) * d;
    for c in 0..d {
        out[c] = w00 * fm[p00 + c] + w01 * fm[p01 + c] + w10 * fm[p10 + c] + w11 * fm[p11 + c];
    }
}

fn bilinear_scatter(gfm: &mut [f64], wf: usize, d: usize, s: &BilinearSetup, g: &[f64]) {
    let w00 = (1.0 - s.ty) * (1.0 - s.tx);
    let w01 = (1.0 - s.ty) * s.tx;
    let w10 = s.ty * (1.0 - s.tx);
    let w11 = s.ty * s.tx;
    let p00 = (s.y0 * wf + s.x0) * d;
    let p01 = (s.y0 * wf + s.x1) * d;
    let p10 = (s.y1 * wf + s.x0) * d;
    let p11 = (s.y1 * wf + s.x1) * d;
    for c in 0..d {
        gfm[p00 + c] += w00 * g[c];
        gfm[p01 + c] += w01 * g[c];
        gfm[p10 + c] += w10 * g[c];
        gfm[p11 + c] += w11 * g[c];
    }
}

/// Gradient of the sample w.r.t. the (clamped) feature coordinates,
/// contracted with the output gradient. Zero where the clamp saturated.
fn bilinear_pos_grad(fm: &[f64], wf: usize, d: usize, s: &BilinearSetup, g: &[f64]) -> (f64, f64) {
    let p00 = (s.y0 * wf + s.x0) * d;
    let p01 = (s.y0 * wf + s.x1) * d;
    let p10 = (s.y1 * wf + s.x0) * d;
    let p11 = (s.y1 * wf + s.x1) * d;
    let mut dfx = 0.0;
    let mut dfy = 0.0;
    for c in 0..d {
        let (v00, v01, v10, v11) = (fm[p00 + c], fm[p01 + c], fm[p10 + c], fm[p11 + c]);
        dfx += g[c] * ((1.0 - s.ty) * (v01 - v00) + s.ty * (v11 - v10));
        dfy += g[c] * ((1.0 - s.tx) * (v10 - v00) + s.tx * (v11 - v01));
    }
    (
        if s.fx_interior { dfx } else { 0.0 },
        if s.fy_interior { dfy } else { 0.0 },
    )
}
