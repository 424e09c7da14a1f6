//! Per-slice convolutional backbone, RoI feature pooling, and z-axis
//! downsampling with slice-index mapping.

use crate::nn::{Bound, LayerNorm, ParamId, ParamStore};
use crate::phantom::Volume;
use crate::tensor::{Rng, Tape, Tensor, Var};

/// Backbone stride relative to the input image.
pub const FEATURE_STRIDE: f64 = 4.0;

/// Features of one slice: an (hf*wf, d) grid in row-major (y, x) order.
#[derive(Clone, Copy, Debug)]
pub struct FeatureGrid {
    pub var: Var,
    pub hf: usize,
    pub wf: usize,
    pub d: usize,
}

struct ConvBlock {
    w: ParamId,
    b: ParamId,
    norm: LayerNorm,
    stride: usize,
    cin: usize,
    cout: usize,
}

impl ConvBlock {
    fn new(
        store: &mut ParamStore,
        prefix: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = cin * 9;
        let w = store.add(
            format!("{prefix}.conv.weight"),
            vec![cout, cin, 3, 3],
            rng.gaussian_vec(cout * cin * 9, 1.0 / (fan_in as f64).sqrt()),
        );
        let b = store.add(format!("{prefix}.conv.bias"), vec![cout], vec![0.0; cout]);
        let norm = LayerNorm::new(store, &format!("{prefix}.norm"), cout);
        ConvBlock { w, b, norm, stride, cin, cout }
    }

    /// conv3x3 -> channel layer-norm -> GELU. Input and output are (C,H,W);
    /// the norm runs on a (H*W, C) view so it normalizes over channels.
    fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> (Var, usize, usize) {
        let shape = tape.shape(x).to_vec();
        assert_eq!(shape[0], self.cin, "conv block channel mismatch");
        let y = tape.conv2d(x, bound.var(self.w), bound.var(self.b), self.stride);
        let (oh, ow) = (tape.shape(y)[1], tape.shape(y)[2]);
        let flat = tape.reshape(y, vec![self.cout, oh * ow]);
        let pixels = tape.transpose2d(flat);
        let normed = self.norm.forward(tape, bound, pixels);
        let act = tape.gelu(normed);
        (act, oh, ow)
    }
}

/// Three conv blocks (stride 2, 2, 1) shared across slices and views.
pub struct Backbone {
    block1: ConvBlock,
    block2: ConvBlock,
    block3: ConvBlock,
    pub d: usize,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, d: usize, rng: &mut Rng) -> Self {
        assert!(d >= 8 && d.is_multiple_of(2), "backbone width {d} must be even and >= 8");
        Backbone {
            block1: ConvBlock::new(store, "backbone.block1", 1, d / 2, 2, rng),
            block2: ConvBlock::new(store, "backbone.block2", d / 2, d, 2, rng),
            block3: ConvBlock::new(store, "backbone.block3", d, d, 1, rng),
            d,
        }
    }

    /// Stride-4 features for one H x W image given as a (1,H,W) tensor.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, image: Var) -> FeatureGrid {
        let shape = tape.shape(image).to_vec();
        assert_eq!(shape.len(), 3, "backbone input must be (1,H,W)");
        assert!(shape[1] >= 8 && shape[2] >= 8, "backbone input below 8x8");
        let (a, h1, w1) = self.block1.forward(tape, bound, image);
        let a_chw = to_chw(tape, a, self.block1.cout, h1, w1);
        let (b, h2, w2) = self.block2.forward(tape, bound, a_chw);
        let b_chw = to_chw(tape, b, self.block2.cout, h2, w2);
        let (c, h3, w3) = self.block3.forward(tape, bound, b_chw);
        FeatureGrid { var: c, hf: h3, wf: w3, d: self.d }
    }

    /// Per-slice features of a volume, identical parameters on every slice.
    pub fn forward_volume(&self, tape: &mut Tape, bound: &Bound, v: &Volume) -> Vec<FeatureGrid> {
        (0..v.slices)
            .map(|s| {
                let img = slice_tensor(v, s);
                let var = tape.constant(img);
                self.forward(tape, bound, var)
            })
            .collect()
    }
}

fn to_chw(tape: &mut Tape, pixels: Var, c: usize, h: usize, w: usize) -> Var {
    let t = tape.transpose2d(pixels);
    tape.reshape(t, vec![c, h, w])
}

/// One slice of a volume as a (1,H,W) f64 tensor.
pub fn slice_tensor(v: &Volume, s: usize) -> Tensor {
    let n = v.height * v.width;
    let data = v.voxels[s * n..(s + 1) * n].iter().map(|&x| x as f64).collect();
    Tensor::new(vec![1, v.height, v.width], data)
}

/// Pool a feature grid inside each box into k x k bin-center samples.
/// Boxes are image-pixel corner coordinates; see `Tape::roi_align`.
pub fn roi_align(
    tape: &mut Tape,
    fm: &FeatureGrid,
    boxes: Var,
    k: usize,
    img_h: usize,
    img_w: usize,
) -> Var {
    tape.roi_align(
        fm.var,
        fm.hf,
        fm.wf,
        boxes,
        k,
        FEATURE_STRIDE,
        img_w as f64,
        img_h as f64,
    )
}

/// Contiguous near-equal windows mapping original slice indices to a
/// downsampled z-resolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ZMap {
    pub original: usize,
    windows: Vec<(usize, usize)>, // inclusive (lo, hi)
}

impl ZMap {
    pub fn new(original: usize, target: usize) -> Self {
        assert!(target >= 1 && target <= original, "zmap: target {target} vs {original}");
        let base = original / target;
        let rem = original % target;
        let mut windows = Vec::with_capacity(target);
        let mut lo = 0;
        for i in 0..target {
            let size = base + usize::from(i < rem);
            windows.push((lo, lo + size - 1));
            lo += size;
        }
        ZMap { original, windows }
    }

    pub fn target(&self) -> usize {
        self.windows.len()
    }

    pub fn windows(&self) -> &[(usize, usize)] {
        &self.windows
    }

    /// Middle slice of window j: floor((lo+hi)/2).
    pub fn map_back(&self, j: usize) -> usize {
        assert!(j < self.windows.len(), "map_back: index {j} out of range");
        let (lo, hi) = self.windows[j];
        (lo + hi) / 2
    }

    /// Window index containing an original slice index.
    pub fn window_of(&self, original_slice: usize) -> usize {
        assert!(original_slice < self.original, "window_of: slice out of range");
        self.windows
            .iter()
            .position(|&(lo, hi)| original_slice >= lo && original_slice <= hi)
            .expect("windows partition the slice range")
    }
}

/// Max-pool a volume down to `s_target` slices along z.
pub fn zpool(v: &Volume, s_target: usize) -> (Volume, ZMap) {
    assert!(
        s_target >= 1 && s_target <= v.slices,
        "zpool: target {s_target} out of range for {} slices",
        v.slices
    );
    let zmap = ZMap::new(v.slices, s_target);
    let plane = v.height * v.width;
    let mut voxels = Vec::with_capacity(s_target * plane);
    for &(lo, hi) in zmap.windows() {
        let mut pooled = v.voxels[lo * plane..(lo + 1) * plane].to_vec();
        for s in lo + 1..=hi {
            let src = &v.voxels[s * plane..(s + 1) * plane];
            for (p, &x) in pooled.iter_mut().zip(src) {
                if x > *p {
                    *p = x;
                }
            }
        }
        voxels.extend_from_slice(&pooled);
    }
    let out = Volume {
        slices: s_target,
        height: v.height,
        width: v.width,
        voxels,
        view: v.view,
        laterality: v.laterality,
    };
    (out, zmap)
}
