//! Sparse-proposal cascade detector with slice-to-volume fusion.
//!
//! A fixed set of N learnable proposals (full-image boxes plus feature
//! vectors) is refined by 6 cascade heads. Each head mixes proposals through
//! self- and cross-view attention, interacts them with RoI features via
//! dynamic convolution, and regresses boxes and malignancy logits. In volume
//! mode the dynamic convolution runs per slice with shared kernels and the
//! classifier is reused on every slice; softmax over the per-slice logits
//! yields fusion weights and implicit z-localization. The 2D and volume
//! paths share every parameter, so their manifests are identical and
//! checkpoints transfer byte-for-byte.

pub mod checkpoint;
pub mod fusion;

pub use checkpoint::{load_checkpoint, save_checkpoint, transfer_weights, TransferReport};
pub use fusion::Fusion;

use serde::{Deserialize, Serialize};

use crate::features::{roi_align, zpool, Backbone, FeatureGrid, ZMap};
use crate::metrics::Detection;
use crate::nn::{Attention, Bound, LayerNorm, Linear, ParamId, ParamStore};
use crate::phantom::Volume;
use crate::tensor::{Rng, Tape, Tensor, Var};

use fusion::{argmax_rows, MlpRegressFusion, QuerySummaryFusion, TimeSformFusion};

pub const ATTENTION_HEADS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    TwoD,
    ThreeD,
    Slicewise,
    Mip,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::TwoD => "2d",
            Mode::ThreeD => "3d",
            Mode::Slicewise => "slicewise",
            Mode::Mip => "mip",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "2d" => Mode::TwoD,
            "3d" => Mode::ThreeD,
            "slicewise" => Mode::Slicewise,
            "mip" => Mode::Mip,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of proposals N.
    pub proposals: usize,
    /// Feature width D.
    pub dim: usize,
    /// RoI pooling grid size k.
    pub roi: usize,
    /// Number of cascade heads.
    pub heads: usize,
    /// Downsampled z-resolution S'.
    pub z_target: usize,
    pub img_h: usize,
    pub img_w: usize,
    pub fusion: Fusion,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            proposals: 8,
            dim: 16,
            roi: 3,
            heads: 6,
            z_target: 16,
            img_h: 32,
            img_w: 32,
            fusion: Fusion::Weighted,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> crate::error::Result<()> {
        use crate::error::MmError;
        let checks = [
            (self.proposals >= 1, "proposals must be >= 1"),
            (self.dim >= 8, "dim must be >= 8"),
            (self.dim.is_multiple_of(ATTENTION_HEADS), "dim must be divisible by 4"),
            (self.dim.is_multiple_of(4), "dim must be divisible by 4 for dynamic kernels"),
            (self.roi >= 1, "roi must be >= 1"),
            (self.heads >= 1, "heads must be >= 1"),
            (self.z_target >= 1, "z_target must be >= 1"),
            (self.img_h >= 8 && self.img_w >= 8, "image extent must be >= 8"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(MmError::Config(msg.into()));
            }
        }
        Ok(())
    }
}

/// Ordered (name, shape) pairs of every learnable parameter.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamManifest(pub Vec<(String, Vec<usize>)>);

impl ParamManifest {
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(|(n, _)| n.as_str())
    }

    /// Entries of `other` absent here, and entries here absent in `other`.
    pub fn diff(&self, other: &ParamManifest) -> (Vec<String>, Vec<String>) {
        let mine: std::collections::BTreeSet<&str> = self.names().collect();
        let theirs: std::collections::BTreeSet<&str> = other.names().collect();
        let missing = theirs.difference(&mine).map(|s| s.to_string()).collect();
        let extra = mine.difference(&theirs).map(|s| s.to_string()).collect();
        (missing, extra)
    }

    pub fn is_superset_of(&self, other: &ParamManifest) -> bool {
        let (missing, extra) = self.diff(other);
        missing.is_empty() && !extra.is_empty()
    }
}

impl std::fmt::Display for ParamManifest {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (name, shape) in &self.0 {
            writeln!(f, "{name} {:?}", shape)?;
        }
        Ok(())
    }
}

/// Per-head fusion parameters; empty for the parameter-free strategies.
enum FusionParams {
    None,
    TimeSform(TimeSformFusion),
    QuerySummary(QuerySummaryFusion),
    MlpRegress(MlpRegressFusion),
}

struct CascadeHead {
    self_attn: Attention,
    cross_attn: Attention,
    dynamic: DynamicConv,
    cls: Linear,
    reg: Linear,
    fusion: FusionParams,
}

/// Per-proposal dynamic interaction: kernels generated from the proposal
/// feature multiply the pooled RoI features, followed by projection back to
/// D with a residual and a feed-forward block.
struct DynamicConv {
    kernel_gen: Linear,
    norm1: LayerNorm,
    norm2: LayerNorm,
    out_proj: Linear,
    norm3: LayerNorm,
    norm_res: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    norm_ffn: LayerNorm,
    d: usize,
    d_dyn: usize,
    k2: usize,
}

impl DynamicConv {
    fn new(store: &mut ParamStore, prefix: &str, d: usize, k: usize, rng: &mut Rng) -> Self {
        let d_dyn = d / 4;
        let k2 = k * k;
        DynamicConv {
            kernel_gen: Linear::new(store, &format!("{prefix}.kernel_gen"), d, 2 * d * d_dyn, rng),
            norm1: LayerNorm::new(store, &format!("{prefix}.norm1"), d_dyn),
            norm2: LayerNorm::new(store, &format!("{prefix}.norm2"), d),
            out_proj: Linear::new_residual(store, &format!("{prefix}.out_proj"), k2 * d, d, rng),
            norm3: LayerNorm::new(store, &format!("{prefix}.norm3"), d),
            norm_res: LayerNorm::new(store, &format!("{prefix}.norm_res"), d),
            fc1: Linear::new(store, &format!("{prefix}.ffn.fc1"), d, 2 * d, rng),
            fc2: Linear::new_residual(store, &format!("{prefix}.ffn.fc2"), 2 * d, d, rng),
            norm_ffn: LayerNorm::new(store, &format!("{prefix}.ffn.norm"), d),
            d,
            d_dyn,
            k2,
        }
    }

    /// Kernels depend only on the proposal feature; in volume mode they are
    /// generated once per head and shared by every slice.
    fn kernels(&self, tape: &mut Tape, bound: &Bound, h_tilde: Var) -> (Var, Var) {
        let n = tape.shape(h_tilde)[0];
        let kg = self.kernel_gen.forward(tape, bound, h_tilde);
        let k1_flat = tape.slice_cols(kg, 0, self.d * self.d_dyn);
        let k2_flat = tape.slice_cols(kg, self.d * self.d_dyn, self.d * self.d_dyn);
        let k1 = tape.reshape(k1_flat, vec![n, self.d, self.d_dyn]);
        let k2 = tape.reshape(k2_flat, vec![n, self.d_dyn, self.d]);
        (k1, k2)
    }

    /// f: (N, k^2, D) RoI features -> (N, D) object feature.
    fn apply(&self, tape: &mut Tape, bound: &Bound, h_tilde: Var, k1: Var, k2: Var, f: Var) -> Var {
        let n = tape.shape(f)[0];
        assert_eq!(tape.shape(f), &[n, self.k2, self.d], "dynamic conv: roi shape");
        let t1 = tape.bmm(f, k1);
        let t1 = self.norm1.forward(tape, bound, t1);
        let t1 = tape.gelu(t1);
        let t2 = tape.bmm(t1, k2);
        let t2 = self.norm2.forward(tape, bound, t2);
        let t2 = tape.gelu(t2);
        let flat = tape.reshape(t2, vec![n, self.k2 * self.d]);
        let o = self.out_proj.forward(tape, bound, flat);
        let o = self.norm3.forward(tape, bound, o);
        let o = tape.gelu(o);
        let res = tape.add(h_tilde, o);
        let x = self.norm_res.forward(tape, bound, res);
        let y = self.fc1.forward(tape, bound, x);
        let y = tape.gelu(y);
        let y = self.fc2.forward(tape, bound, y);
        let y = tape.add(x, y);
        self.norm_ffn.forward(tape, bound, y)
    }

    fn forward(&self, tape: &mut Tape, bound: &Bound, h_tilde: Var, f: Var) -> Var {
        let (k1, k2) = self.kernels(tape, bound, h_tilde);
        self.apply(tape, bound, h_tilde, k1, k2, f)
    }
}

/// One view's output for one cascade head.
pub struct HeadOut {
    /// (N,4) refined boxes in image pixels.
    pub boxes: Var,
    /// (N,) malignancy logits of the fused (or 2D) object feature.
    pub logits: Var,
    /// (N,S') per-slice logits, when the head ran in volume mode with
    /// per-slice classification.
    pub slice_logits: Option<Var>,
    /// (N,S') weights actually used to fuse slice features.
    pub fusion_weights: Option<Tensor>,
    /// (N,S') positive distribution the z cross-entropy trains against.
    pub zloss_weights: Option<Var>,
    /// Per-proposal argmax slice in downsampled coordinates.
    pub z: Vec<usize>,
    /// Continuous z prediction of the regression-based variant.
    pub z_float: Option<Var>,
}

/// Full per-view forward: one entry per cascade head.
pub struct ViewForward {
    pub heads: Vec<HeadOut>,
}

impl ViewForward {
    pub fn last(&self) -> &HeadOut {
        self.heads.last().expect("at least one head")
    }
}

pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    backbone: Backbone,
    proposal_boxes: ParamId,
    proposal_feats: ParamId,
    heads: Vec<CascadeHead>,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Self {
        cfg.validate().expect("invalid model config");
        let mut store = ParamStore::new();
        let mut rng = Rng::new(cfg.seed);
        // initial proposals: the full image in normalized center-size form,
        // features from a seeded Gaussian at scale 0.02
        let mut boxes = Vec::with_capacity(cfg.proposals * 4);
        for _ in 0..cfg.proposals {
            boxes.extend_from_slice(&[0.5, 0.5, 1.0, 1.0]);
        }
        let proposal_boxes = store.add("proposals.boxes", vec![cfg.proposals, 4], boxes);
        let proposal_feats = store.add(
            "proposals.features",
            vec![cfg.proposals, cfg.dim],
            rng.gaussian_vec(cfg.proposals * cfg.dim, 0.02),
        );
        let backbone = Backbone::new(&mut store, cfg.dim, &mut rng);
        let heads = (0..cfg.heads)
            .map(|i| {
                let p = format!("head{i}");
                CascadeHead {
                    self_attn: Attention::new(&mut store, &format!("{p}.self_attn"), cfg.dim, ATTENTION_HEADS, &mut rng),
                    cross_attn: Attention::new(&mut store, &format!("{p}.cross_attn"), cfg.dim, ATTENTION_HEADS, &mut rng),
                    dynamic: DynamicConv::new(&mut store, &format!("{p}.dynamic"), cfg.dim, cfg.roi, &mut rng),
                    cls: Linear::new(&mut store, &format!("{p}.cls"), cfg.dim, 1, &mut rng),
                    reg: Linear::new(&mut store, &format!("{p}.reg"), cfg.dim, 4, &mut rng),
                    fusion: match cfg.fusion {
                        Fusion::Weighted | Fusion::Mean | Fusion::Max => FusionParams::None,
                        Fusion::TimeSform => FusionParams::TimeSform(TimeSformFusion::new(
                            &mut store,
                            &format!("{p}.fusion"),
                            cfg.dim,
                            &mut rng,
                        )),
                        Fusion::QuerySummary => FusionParams::QuerySummary(QuerySummaryFusion::new(
                            &mut store,
                            &format!("{p}.fusion"),
                            cfg.proposals,
                            cfg.dim,
                            &mut rng,
                        )),
                        Fusion::MlpRegress => FusionParams::MlpRegress(MlpRegressFusion::new(
                            &mut store,
                            &format!("{p}.fusion"),
                            cfg.z_target,
                            cfg.dim,
                            &mut rng,
                        )),
                    },
                }
            })
            .collect();
        Model { cfg, store, backbone, proposal_boxes, proposal_feats, heads }
    }

    /// Deterministic ordered manifest of every learnable parameter.
    pub fn manifest(&self) -> ParamManifest {
        ParamManifest(self.store.manifest())
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        self.store.bind(tape)
    }

    pub fn bind_const(&self, tape: &mut Tape) -> Bound {
        self.store.bind_const(tape)
    }

    /// Decode the learnable proposal boxes to pixel corners.
    fn initial_boxes(&self, tape: &mut Tape, bound: &Bound) -> Var {
        let b = bound.var(self.proposal_boxes);
        let cx = tape.slice_cols(b, 0, 1);
        let cy = tape.slice_cols(b, 1, 1);
        let w = tape.slice_cols(b, 2, 1);
        let h = tape.slice_cols(b, 3, 1);
        let half_w = tape.scale(w, 0.5);
        let half_h = tape.scale(h, 0.5);
        let x1 = tape.sub(cx, half_w);
        let y1 = tape.sub(cy, half_h);
        let x2 = tape.add(cx, half_w);
        let y2 = tape.add(cy, half_h);
        let sw = self.cfg.img_w as f64;
        let sh = self.cfg.img_h as f64;
        let x1 = tape.scale(x1, sw);
        let x2 = tape.scale(x2, sw);
        let y1 = tape.scale(y1, sh);
        let y2 = tape.scale(y2, sh);
        tape.concat_cols(&[x1, y1, x2, y2])
    }

    /// Apply regression deltas in (cx, cy, log w, log h) space and clamp the
    /// resulting corners to image bounds.
    fn apply_deltas(&self, tape: &mut Tape, boxes: Var, deltas: Var) -> Var {
        let x1 = tape.slice_cols(boxes, 0, 1);
        let y1 = tape.slice_cols(boxes, 1, 1);
        let x2 = tape.slice_cols(boxes, 2, 1);
        let y2 = tape.slice_cols(boxes, 3, 1);
        let w = tape.sub(x2, x1);
        let h = tape.sub(y2, y1);
        let sum_x = tape.add(x1, x2);
        let sum_y = tape.add(y1, y2);
        let cx = tape.scale(sum_x, 0.5);
        let cy = tape.scale(sum_y, 0.5);

        let dx = tape.slice_cols(deltas, 0, 1);
        let dy = tape.slice_cols(deltas, 1, 1);
        let dw = tape.slice_cols(deltas, 2, 1);
        let dh = tape.slice_cols(deltas, 3, 1);
        // bounded log-size deltas keep exp() sane early in training
        let dw = tape.clamp_min(dw, -4.0);
        let dw = tape.clamp_max(dw, 4.0);
        let dh = tape.clamp_min(dh, -4.0);
        let dh = tape.clamp_max(dh, 4.0);

        let shift_x = tape.mul(dx, w);
        let shift_y = tape.mul(dy, h);
        let ncx = tape.add(cx, shift_x);
        let ncy = tape.add(cy, shift_y);
        let ew = tape.exp(dw);
        let eh = tape.exp(dh);
        let nw = tape.mul(w, ew);
        let nh = tape.mul(h, eh);
        let half_w = tape.scale(nw, 0.5);
        let half_h = tape.scale(nh, 0.5);
        let nx1 = tape.sub(ncx, half_w);
        let ny1 = tape.sub(ncy, half_h);
        let nx2 = tape.add(ncx, half_w);
        let ny2 = tape.add(ncy, half_h);

        let (iw, ih) = (self.cfg.img_w as f64, self.cfg.img_h as f64);
        let clamp = |tape: &mut Tape, v: Var, hi: f64| {
            let v = tape.clamp_min(v, 0.0);
            tape.clamp_max(v, hi)
        };
        let nx1 = clamp(tape, nx1, iw);
        let nx2 = clamp(tape, nx2, iw);
        let ny1 = clamp(tape, ny1, ih);
        let ny2 = clamp(tape, ny2, ih);
        tape.concat_cols(&[nx1, ny1, nx2, ny2])
    }

    fn cls_logits(&self, tape: &mut Tape, bound: &Bound, head: &CascadeHead, h: Var) -> Var {
        let n = tape.shape(h)[0];
        let l = head.cls.forward(tape, bound, h);
        tape.reshape(l, vec![n])
    }

    /// One cascade head on one view after the attention stage, in 2D mode.
    fn head_tail_2d(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        head: &CascadeHead,
        h_tilde: Var,
        fm: &FeatureGrid,
        boxes: Var,
    ) -> (Var, HeadOut) {
        let f = roi_align(tape, fm, boxes, self.cfg.roi, self.cfg.img_h, self.cfg.img_w);
        let h = head.dynamic.forward(tape, bound, h_tilde, f);
        let logits = self.cls_logits(tape, bound, head, h);
        let deltas = head.reg.forward(tape, bound, h);
        let new_boxes = self.apply_deltas(tape, boxes, deltas);
        (
            h,
            HeadOut {
                boxes: new_boxes,
                logits,
                slice_logits: None,
                fusion_weights: None,
                zloss_weights: None,
                z: Vec::new(),
                z_float: None,
            },
        )
    }

    /// One cascade head on one view after the attention stage, volume mode.
    fn head_tail_3d(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        head: &CascadeHead,
        h_tilde: Var,
        fms: &[FeatureGrid],
        boxes: Var,
    ) -> (Var, HeadOut) {
        let n = self.cfg.proposals;
        let (k1, k2) = head.dynamic.kernels(tape, bound, h_tilde);
        let f_slices: Vec<Var> = fms
            .iter()
            .map(|fm| roi_align(tape, fm, boxes, self.cfg.roi, self.cfg.img_h, self.cfg.img_w))
            .collect();

        let (h, slice_logits, fusion_weights, zloss_weights, z, z_float) = match &head.fusion {
            FusionParams::None => {
                let h_slices: Vec<Var> = f_slices
                    .iter()
                    .map(|&f| head.dynamic.apply(tape, bound, h_tilde, k1, k2, f))
                    .collect();
                let m_slices: Vec<Var> = h_slices
                    .iter()
                    .map(|&hs| self.cls_logits(tape, bound, head, hs))
                    .collect();
                let m_mat = tape.stack_cols(&m_slices); // (N, S')
                match self.cfg.fusion {
                    Fusion::Weighted => {
                        let (h, w) = fusion::fuse_weighted(tape, &h_slices, m_mat);
                        let wt = tape.value(w).clone();
                        let z = argmax_rows(&wt);
                        (h, Some(m_mat), Some(wt), Some(w), z, None)
                    }
                    Fusion::Mean => {
                        let (h, wt) = fusion::fuse_mean(tape, &h_slices, n);
                        let z = argmax_rows(&wt);
                        // the z loss still needs a positive distribution
                        let soft = tape.softmax(m_mat);
                        (h, Some(m_mat), Some(wt), Some(soft), z, None)
                    }
                    Fusion::Max => {
                        let (h, wt) = fusion::fuse_max(tape, &h_slices, m_mat);
                        let z = argmax_rows(&wt);
                        let soft = tape.softmax(m_mat);
                        (h, Some(m_mat), Some(wt), Some(soft), z, None)
                    }
                    _ => unreachable!("parameterized fusion carries FusionParams"),
                }
            }
            FusionParams::TimeSform(ts) => {
                let (fused_f, w) = ts.forward(tape, bound, &f_slices);
                let h = head.dynamic.apply(tape, bound, h_tilde, k1, k2, fused_f);
                let wt = tape.value(w).clone();
                let z = argmax_rows(&wt);
                (h, None, Some(wt), Some(w), z, None)
            }
            FusionParams::QuerySummary(qs) => {
                let h_slices: Vec<Var> = f_slices
                    .iter()
                    .map(|&f| head.dynamic.apply(tape, bound, h_tilde, k1, k2, f))
                    .collect();
                let (h, w) = qs.forward(tape, bound, &h_slices);
                let wt = tape.value(w).clone();
                let z = argmax_rows(&wt);
                (h, None, Some(wt), Some(w), z, None)
            }
            FusionParams::MlpRegress(mr) => {
                let h_slices: Vec<Var> = f_slices
                    .iter()
                    .map(|&f| head.dynamic.apply(tape, bound, h_tilde, k1, k2, f))
                    .collect();
                let (h, z_var) = mr.forward(tape, bound, &h_slices);
                let s_max = fms.len() - 1;
                let z = tape
                    .data(z_var)
                    .iter()
                    .map(|&zf| fusion::round_z(zf, s_max))
                    .collect();
                (h, None, None, None, z, Some(z_var))
            }
        };

        let logits = self.cls_logits(tape, bound, head, h);
        let deltas = head.reg.forward(tape, bound, h);
        let new_boxes = self.apply_deltas(tape, boxes, deltas);
        (
            h,
            HeadOut {
                boxes: new_boxes,
                logits,
                slice_logits,
                fusion_weights,
                zloss_weights,
                z,
                z_float,
            },
        )
    }

    /// Run the cascade over both views. `feats_*` hold per-slice feature
    /// grids (a single grid in 2D mode).
    fn run_cascade(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        feats_cc: &[FeatureGrid],
        feats_mlo: &[FeatureGrid],
        volume_mode: bool,
    ) -> (ViewForward, ViewForward) {
        let mut h_cc = bound.var(self.proposal_feats);
        let mut h_mlo = h_cc;
        let mut b_cc = self.initial_boxes(tape, bound);
        let mut b_mlo = b_cc;
        let mut out_cc = Vec::with_capacity(self.heads.len());
        let mut out_mlo = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let hp_cc = head.self_attn.forward(tape, bound, h_cc, h_cc);
            let hp_mlo = head.self_attn.forward(tape, bound, h_mlo, h_mlo);
            let ht_cc = head.cross_attn.forward(tape, bound, hp_cc, hp_mlo);
            let ht_mlo = head.cross_attn.forward(tape, bound, hp_mlo, hp_cc);
            let (nh_cc, o_cc) = if volume_mode {
                self.head_tail_3d(tape, bound, head, ht_cc, feats_cc, b_cc)
            } else {
                self.head_tail_2d(tape, bound, head, ht_cc, &feats_cc[0], b_cc)
            };
            let (nh_mlo, o_mlo) = if volume_mode {
                self.head_tail_3d(tape, bound, head, ht_mlo, feats_mlo, b_mlo)
            } else {
                self.head_tail_2d(tape, bound, head, ht_mlo, &feats_mlo[0], b_mlo)
            };
            h_cc = nh_cc;
            h_mlo = nh_mlo;
            b_cc = o_cc.boxes;
            b_mlo = o_mlo.boxes;
            out_cc.push(o_cc);
            out_mlo.push(o_mlo);
        }
        (ViewForward { heads: out_cc }, ViewForward { heads: out_mlo })
    }

    /// 2D forward on one image pair (already (1,H,W) tensors).
    pub fn forward_2d(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        cc: &Tensor,
        mlo: &Tensor,
    ) -> (ViewForward, ViewForward) {
        self.check_image(cc);
        self.check_image(mlo);
        let cc_var = tape.constant(cc.clone());
        let mlo_var = tape.constant(mlo.clone());
        let fm_cc = self.backbone.forward(tape, bound, cc_var);
        let fm_mlo = self.backbone.forward(tape, bound, mlo_var);
        self.run_cascade(tape, bound, &[fm_cc], &[fm_mlo], false)
    }

    /// Volume forward on two pre-pooled volumes (S' slices each).
    pub fn forward_3d_pooled(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        cc: &Volume,
        mlo: &Volume,
    ) -> (ViewForward, ViewForward) {
        assert_eq!(cc.height, self.cfg.img_h, "volume height vs model config");
        assert_eq!(cc.width, self.cfg.img_w, "volume width vs model config");
        let feats_cc = self.backbone.forward_volume(tape, bound, cc);
        let feats_mlo = self.backbone.forward_volume(tape, bound, mlo);
        self.run_cascade(tape, bound, &feats_cc, &feats_mlo, true)
    }

    /// Volume forward where each slice is already on the tape as a (1,H,W)
    /// variable, so gradients can flow back into the voxels.
    pub fn forward_3d_slice_vars(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        cc: &[Var],
        mlo: &[Var],
    ) -> (ViewForward, ViewForward) {
        let feats_cc: Vec<FeatureGrid> =
            cc.iter().map(|&v| self.backbone.forward(tape, bound, v)).collect();
        let feats_mlo: Vec<FeatureGrid> =
            mlo.iter().map(|&v| self.backbone.forward(tape, bound, v)).collect();
        self.run_cascade(tape, bound, &feats_cc, &feats_mlo, true)
    }

    /// Full volume-mode forward: z-downsample to the configured resolution,
    /// then run the cascade. Returns outputs plus the z maps of both views.
    pub fn forward_3d(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        cc: &Volume,
        mlo: &Volume,
    ) -> (ViewForward, ViewForward, ZMap, ZMap) {
        let target = self.cfg.z_target.min(cc.slices);
        let (cc_p, zmap_cc) = zpool(cc, target);
        let target_mlo = self.cfg.z_target.min(mlo.slices);
        let (mlo_p, zmap_mlo) = zpool(mlo, target_mlo);
        let (a, b) = self.forward_3d_pooled(tape, bound, &cc_p, &mlo_p);
        (a, b, zmap_cc, zmap_mlo)
    }

    /// Head-level self-attention, exposed as a standalone op surface.
    pub fn head_self_attn(&self, tape: &mut Tape, bound: &Bound, head: usize, x: Var) -> Var {
        self.heads[head].self_attn.forward(tape, bound, x, x)
    }

    /// Head-level cross-attention: queries from `x`, keys/values from `kv`.
    pub fn head_cross_attn(&self, tape: &mut Tape, bound: &Bound, head: usize, x: Var, kv: Var) -> Var {
        self.heads[head].cross_attn.forward(tape, bound, x, kv)
    }

    /// Head-level dynamic convolution on (N,k^2,D) RoI features.
    pub fn head_dynamic_conv(&self, tape: &mut Tape, bound: &Bound, head: usize, h: Var, f: Var) -> Var {
        self.heads[head].dynamic.forward(tape, bound, h, f)
    }

    fn check_image(&self, t: &Tensor) {
        assert_eq!(
            t.shape(),
            &[1, self.cfg.img_h, self.cfg.img_w],
            "image shape vs model config"
        );
    }

    /// Detections of the final head: all N scored boxes, z mapped back to
    /// original slice coordinates when a z map is given.
    pub fn detections(&self, tape: &Tape, view: &ViewForward, zmap: Option<&ZMap>) -> Vec<Detection> {
        let last = view.last();
        let boxes = tape.value(last.boxes);
        let logits = tape.data(last.logits);
        (0..self.cfg.proposals)
            .map(|i| Detection {
                bbox: [
                    boxes.at2(i, 0),
                    boxes.at2(i, 1),
                    boxes.at2(i, 2),
                    boxes.at2(i, 3),
                ],
                score: crate::tensor::ops::sigmoid(logits[i]),
                z: match (zmap, last.z.is_empty()) {
                    (Some(zm), false) => Some(zm.map_back(last.z[i])),
                    _ => None,
                },
            })
            .collect()
    }
}
