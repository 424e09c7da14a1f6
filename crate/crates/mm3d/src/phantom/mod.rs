//! Deterministic synthetic two-view slice-stack cases with controllable
//! lesion statistics, plus the on-disk dataset format.
//!
//! Malignant lesions are anisotropic bright blobs with spiculated texture;
//! benign lesions are smooth radially symmetric blobs with lower contrast.
//! Lesion intensity decays along z, and the slices where the added contrast
//! exceeds 30% of its peak define the visibility range.

mod io;

pub use io::{dataset_fingerprint, read_dataset, read_volume, write_dataset, write_volume};

use serde::{Deserialize, Serialize};

use crate::error::{MmError, Result};
use crate::tensor::Rng;

/// Fraction of peak added contrast above which a lesion counts as visible.
pub const VISIBILITY_THRESHOLD: f64 = 0.30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Cc,
    Mlo,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Laterality {
    Left,
    Right,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Malignant,
    Benign,
    Negative,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Malignant => "malignant",
            Label::Benign => "benign",
            Label::Negative => "negative",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Slice stack of one view. Voxels are stored as f32 in [0,1] so the
/// on-disk format round-trips bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub slices: usize,
    pub height: usize,
    pub width: usize,
    pub voxels: Vec<f32>,
    pub view: View,
    pub laterality: Laterality,
}

impl Volume {
    pub fn at(&self, s: usize, y: usize, x: usize) -> f32 {
        self.voxels[(s * self.height + y) * self.width + x]
    }
}

/// Ground truth for one lesion in one view.
#[derive(Clone, Debug, PartialEq)]
pub struct Finding {
    /// (x1, y1, x2, y2) in pixel units, x1 < x2, y1 < y2.
    pub bbox: [f64; 4],
    /// Most visible slice.
    pub z_best: usize,
    /// Inclusive visibility range.
    pub z_range: (usize, usize),
    pub malignant: bool,
}

impl Finding {
    pub fn z_visible(&self, z: usize) -> bool {
        z >= self.z_range.0 && z <= self.z_range.1
    }
}

/// Two-view exam: the unit of training and evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub id: String,
    pub label: Label,
    pub split: Split,
    /// Whether finding annotations are available to training.
    pub annotated: bool,
    pub cc: Volume,
    pub mlo: Volume,
    pub findings_cc: Vec<Finding>,
    pub findings_mlo: Vec<Finding>,
}

impl Case {
    pub fn volume(&self, view: View) -> &Volume {
        match view {
            View::Cc => &self.cc,
            View::Mlo => &self.mlo,
        }
    }

    pub fn findings(&self, view: View) -> &[Finding] {
        match view {
            View::Cc => &self.findings_cc,
            View::Mlo => &self.findings_mlo,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub cases: Vec<Case>,
}

impl Dataset {
    pub fn split_cases(&self, split: Split) -> Vec<&Case> {
        self.cases.iter().filter(|c| c.split == split).collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub slices: usize,
    pub height: usize,
    pub width: usize,
    pub malignant_fraction: f64,
    pub benign_fraction: f64,
    /// Maximum lesions per positive case (at least 1 is always injected).
    pub max_lesions: usize,
    /// Fraction of malignant cases whose annotations are kept per split.
    pub annotation_fraction: f64,
    pub background_lo: f64,
    pub background_hi: f64,
    pub noise_sigma: f64,
    pub malignant_contrast: [f64; 2],
    pub benign_contrast: [f64; 2],
    pub malignant_radius: [f64; 2],
    pub benign_radius: [f64; 2],
    pub z_sigma: [f64; 2],
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            slices: 32,
            height: 32,
            width: 32,
            malignant_fraction: 0.4,
            benign_fraction: 0.3,
            max_lesions: 2,
            annotation_fraction: 0.4,
            background_lo: 0.20,
            background_hi: 0.45,
            noise_sigma: 0.02,
            malignant_contrast: [0.30, 0.55],
            benign_contrast: [0.15, 0.35],
            malignant_radius: [1.8, 3.0],
            benign_radius: [1.6, 2.6],
            z_sigma: [1.2, 6.0],
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.slices >= 4 && self.slices <= 64, "slices must be in [4, 64]"),
            (
                (32..=256).contains(&self.height) && (32..=256).contains(&self.width),
                "height and width must be in [32, 256]",
            ),
            (self.max_lesions >= 1 && self.max_lesions <= 4, "max_lesions must be in [1, 4]"),
            (
                self.malignant_fraction >= 0.0
                    && self.benign_fraction >= 0.0
                    && self.malignant_fraction + self.benign_fraction <= 1.0,
                "label fractions must be nonnegative and sum to at most 1",
            ),
            (
                (0.0..=1.0).contains(&self.annotation_fraction),
                "annotation_fraction must be in [0, 1]",
            ),
            (
                0.0 <= self.background_lo && self.background_lo < self.background_hi && self.background_hi <= 0.6,
                "background range must satisfy 0 <= lo < hi <= 0.6",
            ),
            ((0.0..=0.1).contains(&self.noise_sigma), "noise_sigma must be in [0, 0.1]"),
            (
                range_ok(self.malignant_contrast, 0.05, 0.6) && range_ok(self.benign_contrast, 0.05, 0.6),
                "contrast ranges must be increasing within [0.05, 0.6]",
            ),
            (
                range_ok(self.malignant_radius, 1.0, 16.0) && range_ok(self.benign_radius, 1.0, 16.0),
                "radius ranges must be increasing within [1, 16]",
            ),
            (range_ok(self.z_sigma, 0.5, 16.0), "z_sigma range must be increasing within [0.5, 16]"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(MmError::Config(msg.into()));
            }
        }
        // feasibility: the widest lesion footprint must fit inside the image
        let max_extent = max_footprint_radius_jittered(self.malignant_radius[1].max(self.benign_radius[1]), true);
        if 2.0 * (max_extent + 2.0) >= self.height.min(self.width) as f64 {
            return Err(MmError::Config(format!(
                "lesion radius up to {:.1} px cannot fit a {}x{} image",
                max_extent, self.height, self.width
            )));
        }
        Ok(())
    }
}

fn range_ok(r: [f64; 2], lo: f64, hi: f64) -> bool {
    r[0] >= lo && r[0] <= r[1] && r[1] <= hi
}

const MAX_SPICULE: f64 = 0.5;
const MAX_ANISOTROPY: f64 = 0.25;
/// Per-view size jitter applied on top of the shared lesion radius.
const RADIUS_JITTER: f64 = 1.1;
/// Gaussian radius multiplier where the profile crosses the 30% threshold.
const FOOTPRINT_RHO: f64 = 1.5518; // sqrt(2 ln(1/0.3))

fn max_footprint_radius(radius: f64, malignant: bool) -> f64 {
    let spike = if malignant { 1.0 + MAX_SPICULE } else { 1.0 };
    let aniso = 1.0 + MAX_ANISOTROPY;
    FOOTPRINT_RHO * radius * spike * aniso
}

/// Worst-case footprint including the per-view radius jitter.
fn max_footprint_radius_jittered(radius: f64, malignant: bool) -> f64 {
    max_footprint_radius(radius * RADIUS_JITTER, malignant)
}

/// Lesion geometry shared across the two views of a case.
struct LesionSeed {
    malignant: bool,
    contrast: f64,
    radius: f64,
    cx_norm: f64, // shared x position (fraction of usable width)
}

/// Per-view realization of a lesion.
struct LesionInstance {
    malignant: bool,
    contrast: f64,
    cx: f64,
    cy: f64,
    cz: f64,
    rx: f64,
    ry: f64,
    theta: f64,
    z_sigma: f64,
    spike_amp: f64,
    spike_count: usize,
    spike_phase: f64,
}

impl LesionInstance {
    /// In-plane profile in [0, 1]; 1 at the center.
    fn profile(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let (sin_t, cos_t) = self.theta.sin_cos();
        let u = (dx * cos_t + dy * sin_t) / self.rx;
        let v = (-dx * sin_t + dy * cos_t) / self.ry;
        let mut rho = (u * u + v * v).sqrt();
        if self.spike_amp > 0.0 && rho > 0.0 {
            let phi = v.atan2(u);
            let lobe = (self.spike_count as f64 * phi + self.spike_phase).cos().max(0.0);
            rho /= 1.0 + self.spike_amp * lobe * lobe * lobe;
        }
        (-0.5 * rho * rho).exp()
    }

    /// z decay factor in (0, 1].
    fn z_factor(&self, s: usize) -> f64 {
        let d = (s as f64 - self.cz) / self.z_sigma;
        (-0.5 * d * d).exp()
    }
}

/// Deterministically generate one two-view case.
///
/// The same lesion is injected into both views at a shared x position and
/// contrast, with independent y/z placement. Infeasible geometry (a lesion
/// footprint that cannot fit in the image) is rejected.
pub fn generate_case(rng: &mut Rng, cfg: &PhantomConfig, id: String) -> Result<Case> {
    cfg.validate()?;
    let u = rng.uniform();
    let label = if u < cfg.malignant_fraction {
        Label::Malignant
    } else if u < cfg.malignant_fraction + cfg.benign_fraction {
        Label::Benign
    } else {
        Label::Negative
    };

    let laterality = if rng.flip() { Laterality::Left } else { Laterality::Right };

    let seeds = match label {
        Label::Negative => Vec::new(),
        Label::Benign => {
            let n = 1 + rng.below(cfg.max_lesions);
            (0..n).map(|_| lesion_seed(rng, cfg, false)).collect::<Result<Vec<_>>>()?
        }
        Label::Malignant => {
            let mut v = vec![lesion_seed(rng, cfg, true)?];
            for _ in 1..1 + rng.below(cfg.max_lesions) {
                let malignant = rng.uniform() < 0.5;
                v.push(lesion_seed(rng, cfg, malignant)?);
            }
            v
        }
    };

    let (cc, findings_cc) = render_view(rng, cfg, &seeds, View::Cc, laterality)?;
    let (mlo, findings_mlo) = render_view(rng, cfg, &seeds, View::Mlo, laterality)?;

    Ok(Case {
        id,
        label,
        split: Split::Train,
        annotated: true,
        cc,
        mlo,
        findings_cc,
        findings_mlo,
    })
}

fn lesion_seed(rng: &mut Rng, cfg: &PhantomConfig, malignant: bool) -> Result<LesionSeed> {
    let (cr, rr) = if malignant {
        (cfg.malignant_contrast, cfg.malignant_radius)
    } else {
        (cfg.benign_contrast, cfg.benign_radius)
    };
    let radius = rng.uniform_in(rr[0], rr[1]);
    let margin = max_footprint_radius_jittered(radius, malignant) + 2.0;
    if 2.0 * margin >= cfg.width as f64 || 2.0 * margin >= cfg.height as f64 {
        return Err(MmError::Config(format!(
            "lesion radius {radius:.2} px does not fit a {}x{} image",
            cfg.height, cfg.width
        )));
    }
    Ok(LesionSeed {
        malignant,
        contrast: rng.uniform_in(cr[0], cr[1]),
        radius,
        cx_norm: rng.uniform(),
    })
}

fn render_view(
    rng: &mut Rng,
    cfg: &PhantomConfig,
    seeds: &[LesionSeed],
    view: View,
    laterality: Laterality,
) -> Result<(Volume, Vec<Finding>)> {
    let (s, h, w) = (cfg.slices, cfg.height, cfg.width);
    let plane = h * w;

    // smooth low-frequency tissue field, shared by all slices of the view
    let base = low_frequency_field(rng, cfg);

    // per-slice high-frequency noise
    let mut voxels = vec![0f32; s * plane];
    for z in 0..s {
        for p in 0..plane {
            let v = base[p] + cfg.noise_sigma * rng.gaussian();
            voxels[z * plane + p] = v.clamp(0.0, 1.0) as f32;
        }
    }

    // realize lesions for this view, re-drawing placements that would
    // overlap an earlier lesion so the per-lesion contrast oracle stays
    // clean; an extra lesion that cannot be separated is dropped
    let mut findings = Vec::with_capacity(seeds.len());
    let mut placed: Vec<LesionInstance> = Vec::with_capacity(seeds.len());
    for (li, seed) in seeds.iter().enumerate() {
        let mut inst = realize_lesion(rng, cfg, seed)?;
        let mut ok = placed.iter().all(|other| separated(&inst, other));
        for _ in 0..40 {
            if ok {
                break;
            }
            inst = realize_lesion(rng, cfg, seed)?;
            ok = placed.iter().all(|other| separated(&inst, other));
        }
        if !ok && li > 0 {
            continue;
        }
        let finding = inject_lesion(cfg, &mut voxels, &inst);
        placed.push(inst);
        findings.push(finding);
    }

    let volume = Volume { slices: s, height: h, width: w, voxels, view, laterality };
    Ok((volume, findings))
}

fn low_frequency_field(rng: &mut Rng, cfg: &PhantomConfig) -> Vec<f64> {
    let (h, w) = (cfg.height, cfg.width);
    const G: usize = 5;
    let coarse: Vec<f64> = (0..G * G).map(|_| rng.gaussian()).collect();
    let mut field = vec![0.0; h * w];
    for y in 0..h {
        let fy = y as f64 / (h - 1) as f64 * (G - 1) as f64;
        let y0 = (fy.floor() as usize).min(G - 2);
        let ty = fy - y0 as f64;
        for x in 0..w {
            let fx = x as f64 / (w - 1) as f64 * (G - 1) as f64;
            let x0 = (fx.floor() as usize).min(G - 2);
            let tx = fx - x0 as f64;
            let v00 = coarse[y0 * G + x0];
            let v01 = coarse[y0 * G + x0 + 1];
            let v10 = coarse[(y0 + 1) * G + x0];
            let v11 = coarse[(y0 + 1) * G + x0 + 1];
            let v = (1.0 - ty) * ((1.0 - tx) * v00 + tx * v01) + ty * ((1.0 - tx) * v10 + tx * v11);
            // squash into the configured background band
            let sig = 1.0 / (1.0 + (-1.2 * v).exp());
            field[y * w + x] = cfg.background_lo + (cfg.background_hi - cfg.background_lo) * sig;
        }
    }
    field
}

fn realize_lesion(rng: &mut Rng, cfg: &PhantomConfig, seed: &LesionSeed) -> Result<LesionInstance> {
    let radius = seed.radius * rng.uniform_in(1.0 / RADIUS_JITTER, RADIUS_JITTER);
    let margin = max_footprint_radius(radius, seed.malignant) + 2.0;
    let (h, w, s) = (cfg.height as f64, cfg.width as f64, cfg.slices as f64);
    if 2.0 * margin >= w || 2.0 * margin >= h {
        return Err(MmError::Config("lesion larger than image".into()));
    }
    // x shared across views (up to the usable band), y and z independent
    let cx = margin + seed.cx_norm * (w - 2.0 * margin);
    let cy = rng.uniform_in(margin, h - margin);
    let cz = rng.uniform_in(1.0, s - 2.0);
    let aniso = if seed.malignant { rng.uniform_in(0.08, MAX_ANISOTROPY) } else { 0.0 };
    Ok(LesionInstance {
        malignant: seed.malignant,
        contrast: seed.contrast,
        cx,
        cy,
        cz,
        rx: radius * (1.0 + aniso),
        ry: radius * (1.0 - aniso),
        theta: if seed.malignant { rng.uniform_in(0.0, std::f64::consts::PI) } else { 0.0 },
        z_sigma: rng.uniform_in(cfg.z_sigma[0], cfg.z_sigma[1]),
        spike_amp: if seed.malignant { rng.uniform_in(0.3, MAX_SPICULE) } else { 0.0 },
        spike_count: 5 + rng.below(4),
        spike_phase: rng.uniform_in(0.0, std::f64::consts::TAU),
    })
}

fn separated(a: &LesionInstance, b: &LesionInstance) -> bool {
    let reach = |l: &LesionInstance| max_footprint_radius(l.rx.max(l.ry), l.malignant);
    let dx = a.cx - b.cx;
    let dy = a.cy - b.cy;
    (dx * dx + dy * dy).sqrt() >= reach(a) + reach(b) + 2.0
}

fn inject_lesion(cfg: &PhantomConfig, voxels: &mut [f32], inst: &LesionInstance) -> Finding {
    let (s, h, w) = (cfg.slices, cfg.height, cfg.width);
    let plane = h * w;

    // z_best: integer slice with the largest decay factor
    let mut z_best = 0;
    let mut best = f64::NEG_INFINITY;
    for z in 0..s {
        let g = inst.z_factor(z);
        if g > best {
            best = g;
            z_best = z;
        }
    }
    // visibility range: contiguous slices above the threshold
    let visible: Vec<usize> = (0..s).filter(|&z| inst.z_factor(z) >= VISIBILITY_THRESHOLD).collect();
    let z_lo = *visible.first().expect("z_best is always visible");
    let z_hi = *visible.last().expect("z_best is always visible");

    // render the in-plane profile once (sampled at pixel centers)
    let reach = max_footprint_radius(inst.rx.max(inst.ry), inst.malignant) + 1.0;
    let x_lo = ((inst.cx - reach).floor().max(0.0)) as usize;
    let x_hi = ((inst.cx + reach).ceil().min(w as f64 - 1.0)) as usize;
    let y_lo = ((inst.cy - reach).floor().max(0.0)) as usize;
    let y_hi = ((inst.cy + reach).ceil().min(h as f64 - 1.0)) as usize;

    let mut prof = Vec::with_capacity((y_hi - y_lo + 1) * (x_hi - x_lo + 1));
    let mut peak = 0.0f64;
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let p = inst.profile(x as f64 + 0.5, y as f64 + 0.5);
            peak = peak.max(p);
            prof.push(p);
        }
    }

    // bounding box of the visible in-plane footprint at z_best
    let mut bx1 = f64::INFINITY;
    let mut by1 = f64::INFINITY;
    let mut bx2 = f64::NEG_INFINITY;
    let mut by2 = f64::NEG_INFINITY;
    let cols = x_hi - x_lo + 1;
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            if prof[(y - y_lo) * cols + (x - x_lo)] >= VISIBILITY_THRESHOLD * peak {
                bx1 = bx1.min(x as f64);
                by1 = by1.min(y as f64);
                bx2 = bx2.max(x as f64 + 1.0);
                by2 = by2.max(y as f64 + 1.0);
            }
        }
    }

    // add the lesion to every slice with its z decay
    for z in 0..s {
        let g = inst.z_factor(z);
        if g < 1e-4 {
            continue;
        }
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                let add = inst.contrast * g * prof[(y - y_lo) * cols + (x - x_lo)];
                let idx = z * plane + y * w + x;
                voxels[idx] = (voxels[idx] as f64 + add).clamp(0.0, 1.0) as f32;
            }
        }
    }

    Finding {
        bbox: [bx1, by1, bx2, by2],
        z_best,
        z_range: (z_lo, z_hi),
        malignant: inst.malignant,
    }
}

/// Maximum intensity projection along z, returned as a single-slice volume.
pub fn project_mip(v: &Volume) -> Volume {
    let plane = v.height * v.width;
    let mut out = v.voxels[0..plane].to_vec();
    for s in 1..v.slices {
        let src = &v.voxels[s * plane..(s + 1) * plane];
        for (o, &x) in out.iter_mut().zip(src) {
            if x > *o {
                *o = x;
            }
        }
    }
    Volume {
        slices: 1,
        height: v.height,
        width: v.width,
        voxels: out,
        view: v.view,
        laterality: v.laterality,
    }
}

/// Assign splits in place: disjoint, exhaustive, label-stratified, and
/// deterministic under the generator seed.
pub fn split_dataset(cases: &mut [Case], fractions: [f64; 3], rng: &mut Rng) -> Result<()> {
    if fractions.iter().any(|&f| f <= 0.0) {
        return Err(MmError::Config("split fractions must be positive".into()));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(MmError::Config(format!("split fractions sum to {total}, expected 1")));
    }
    let splits = [Split::Train, Split::Val, Split::Test];
    for label in [Label::Malignant, Label::Benign, Label::Negative] {
        let mut idx: Vec<usize> = cases
            .iter()
            .enumerate()
            .filter(|(_, c)| c.label == label)
            .map(|(i, _)| i)
            .collect();
        if idx.is_empty() {
            continue;
        }
        rng.shuffle(&mut idx);
        let counts = largest_remainder(idx.len(), fractions);
        if counts.contains(&0) {
            return Err(MmError::Dataset(format!(
                "stratum {} with {} cases leaves a split empty (counts {:?})",
                label.as_str(),
                idx.len(),
                counts
            )));
        }
        let mut cursor = 0;
        for (s, &count) in counts.iter().enumerate() {
            for &i in &idx[cursor..cursor + count] {
                cases[i].split = splits[s];
            }
            cursor += count;
        }
    }
    Ok(())
}

fn largest_remainder(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts = [0usize; 3];
    let mut used = 0;
    for (i, e) in exact.iter().enumerate() {
        counts[i] = e.floor() as usize;
        used += counts[i];
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().take(n - used) {
        counts[i] += 1;
    }
    counts
}

/// Generate a full dataset: per-case streams are derived as
/// `seed + case_index`, then splits and exact-fraction annotation masking
/// are applied deterministically.
pub fn generate_dataset(
    cfg: &PhantomConfig,
    seed: u64,
    n_cases: usize,
    fractions: [f64; 3],
) -> Result<Dataset> {
    cfg.validate()?;
    let mut cases = Vec::with_capacity(n_cases);
    for i in 0..n_cases {
        let mut rng = Rng::new(seed.wrapping_add(i as u64));
        cases.push(generate_case(&mut rng, cfg, format!("case_{i:06}"))?);
    }
    let mut split_rng = Rng::new(seed ^ 0x5EED_5117_DEAD_BEEF);
    split_dataset(&mut cases, fractions, &mut split_rng)?;
    let mut ann_rng = Rng::new(seed ^ 0x000A_77A7_1007_5EED_u64);
    apply_annotation_fraction(&mut cases, cfg.annotation_fraction, &mut ann_rng);
    Ok(Dataset { cases })
}

/// Keep annotations on an exact fraction of malignant cases per split
/// (rounded up); the rest become annotated=false. Benign and negative cases
/// keep their flags.
pub fn apply_annotation_fraction(cases: &mut [Case], fraction: f64, rng: &mut Rng) {
    for split in [Split::Train, Split::Val, Split::Test] {
        let mut idx: Vec<usize> = cases
            .iter()
            .enumerate()
            .filter(|(_, c)| c.split == split && c.label == Label::Malignant)
            .map(|(i, _)| i)
            .collect();
        if idx.is_empty() {
            continue;
        }
        rng.shuffle(&mut idx);
        let keep = (fraction * idx.len() as f64).ceil() as usize;
        for (rank, &i) in idx.iter().enumerate() {
            cases[i].annotated = rank < keep;
        }
    }
}
