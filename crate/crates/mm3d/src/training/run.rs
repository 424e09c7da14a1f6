//! AdamW optimization loop over phantom cases with flip augmentation,
//! per-epoch validation, and best-checkpoint selection.

use std::time::Instant;

use crate::baselines::val_scores;
use crate::detector::{Mode, Model};
use crate::error::{MmError, Result};
use crate::features::zpool;
use crate::nn::ParamStore;
use crate::phantom::{Case, Dataset, Finding, Label, Split, Volume};
use crate::tensor::{Rng, Tape};

use super::{compute_matches, total_loss, CaseTarget, LossWeights, ViewTarget};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainDataMode {
    /// Full z-downsampled volumes.
    Volume3d,
    /// Maximum intensity projections (2D path).
    Mip,
    /// One slice per view per step; a random slice when annotations are
    /// unavailable.
    SlicewiseRandom,
    /// One slice per view per step; unannotated malignant cases dropped.
    SlicewiseAnnotated,
}

impl TrainDataMode {
    pub fn eval_mode(self) -> Mode {
        match self {
            TrainDataMode::Volume3d => Mode::ThreeD,
            TrainDataMode::Mip => Mode::Mip,
            TrainDataMode::SlicewiseRandom | TrainDataMode::SlicewiseAnnotated => Mode::Slicewise,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    pub flips: bool,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub weights: LossWeights,
    /// NMS threshold used when validating slicewise pipelines.
    pub nms_tau: f64,
    /// Evaluate on the validation split every this many epochs (0: never,
    /// the final parameters win).
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2.5e-5,
            weight_decay: 1e-4,
            epochs: 10,
            seed: 0,
            flips: true,
            grad_clip: 1.0,
            weights: LossWeights::default(),
            nms_tau: 0.5,
            val_every: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_box: f64,
    pub mean_proposal: f64,
    pub mean_image: f64,
    pub mean_breast: f64,
    pub mean_z: f64,
    pub val_r025: Option<f64>,
    pub val_auc: Option<f64>,
    pub wall_secs: f64,
}

impl EpochLog {
    pub fn render(&self) -> String {
        format!(
            "epoch={} loss={:.6} box={:.6} proposal={:.6} image={:.6} breast={:.6} z={:.6} val_r025={} val_auc={} secs={:.2}",
            self.epoch,
            self.mean_loss,
            self.mean_box,
            self.mean_proposal,
            self.mean_image,
            self.mean_breast,
            self.mean_z,
            self.val_r025.map_or("na".into(), |v| format!("{v:.4}")),
            self.val_auc.map_or("na".into(), |v| format!("{v:.4}")),
            self.wall_secs
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_score: f64,
    pub train_cases: usize,
    pub train_malignant: usize,
}

pub struct AdamW {
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: store.params().iter().map(|p| vec![0.0; p.value.len()]).collect(),
            v: store.params().iter().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }

    /// Scale all gradients so their global L2 norm is at most `clip`.
    pub fn clip_global_norm(grads: &mut [Vec<f64>], clip: f64) {
        if clip <= 0.0 {
            return;
        }
        let total: f64 = grads.iter().flat_map(|g| g.iter()).map(|&x| x * x).sum();
        let norm = total.sqrt();
        if norm > clip {
            let scale = clip / norm;
            for g in grads.iter_mut() {
                for x in g.iter_mut() {
                    *x *= scale;
                }
            }
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (idx, grad) in grads.iter().enumerate() {
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let id = store.index_of(&store.params()[idx].name.clone()).expect("param index");
            let value = store.value_mut(id);
            for i in 0..grad.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                value[i] -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * value[i]);
            }
        }
    }
}

/// One view of one training sample, already z-pooled for the chosen mode.
struct PreparedView {
    volume: Volume,
    findings: Vec<Finding>,
    /// Downsampled window per finding (volume mode only).
    z_windows: Vec<usize>,
    /// Window index of each finding's best slice, for slicewise sampling.
    best_windows: Vec<usize>,
    /// Findings visible at each downsampled slice (slicewise modes).
    visible_at: Vec<Vec<usize>>,
}

struct PreparedCase {
    malignant: bool,
    annotated: bool,
    cc: PreparedView,
    mlo: PreparedView,
}

fn prepare_view(volume: &Volume, findings: &[Finding], z_target: usize) -> PreparedView {
    let target = z_target.min(volume.slices);
    let (pooled, zmap) = zpool(volume, target);
    let z_windows: Vec<usize> = findings.iter().map(|f| zmap.window_of(f.z_best)).collect();
    let mut visible_at = vec![Vec::new(); target];
    for (fi, f) in findings.iter().enumerate() {
        for (j, &(lo, hi)) in zmap.windows().iter().enumerate() {
            if f.z_range.0 <= hi && f.z_range.1 >= lo {
                visible_at[j].push(fi);
            }
        }
    }
    PreparedView {
        volume: pooled,
        findings: findings.to_vec(),
        best_windows: z_windows.clone(),
        z_windows,
        visible_at,
    }
}

fn flip_volume(v: &Volume, fh: bool, fv: bool) -> Volume {
    if !fh && !fv {
        return v.clone();
    }
    let (s, h, w) = (v.slices, v.height, v.width);
    let mut voxels = vec![0f32; v.voxels.len()];
    for z in 0..s {
        for y in 0..h {
            let sy = if fv { h - 1 - y } else { y };
            for x in 0..w {
                let sx = if fh { w - 1 - x } else { x };
                voxels[(z * h + y) * w + x] = v.voxels[(z * h + sy) * w + sx];
            }
        }
    }
    Volume { voxels, ..v.clone() }
}

fn flip_finding(f: &Finding, w: f64, h: f64, fh: bool, fv: bool) -> Finding {
    let mut bbox = f.bbox;
    if fh {
        bbox = [w - f.bbox[2], bbox[1], w - f.bbox[0], bbox[3]];
    }
    if fv {
        bbox = [bbox[0], h - f.bbox[3], bbox[2], h - f.bbox[1]];
    }
    Finding { bbox, ..f.clone() }
}

/// Train a model in place. On success the store holds the parameters of the
/// best validation epoch (or the final epoch when validation is disabled or
/// has no usable metric).
pub fn train(
    model: &mut Model,
    dataset: &Dataset,
    cfg: &TrainConfig,
    mode: TrainDataMode,
) -> Result<TrainOutcome> {
    let volume_mode = mode == TrainDataMode::Volume3d;
    let train_cases: Vec<&Case> = dataset
        .cases
        .iter()
        .filter(|c| c.split == Split::Train)
        .filter(|c| {
            mode != TrainDataMode::SlicewiseAnnotated
                || c.label != Label::Malignant
                || c.annotated
        })
        .collect();
    if train_cases.is_empty() {
        return Err(MmError::Dataset("no training cases after filtering".into()));
    }
    let total_malignant = dataset
        .cases
        .iter()
        .filter(|c| c.split == Split::Train && c.label == Label::Malignant)
        .count();
    let kept_malignant = train_cases.iter().filter(|c| c.label == Label::Malignant).count();
    if mode == TrainDataMode::SlicewiseAnnotated && total_malignant > 0 && kept_malignant == 0 {
        return Err(MmError::Dataset(format!(
            "annotated-only filtering removed all {total_malignant} malignant training cases"
        )));
    }
    let max_findings = train_cases
        .iter()
        .map(|c| c.findings_cc.len().max(c.findings_mlo.len()))
        .max()
        .unwrap_or(0);
    if max_findings > model.cfg.proposals {
        return Err(MmError::Config(format!(
            "{} findings in one view exceed {} proposals",
            max_findings, model.cfg.proposals
        )));
    }

    // data prep: z-pool or project once
    let prepared: Vec<PreparedCase> = train_cases
        .iter()
        .map(|c| {
            let prep = |v: &Volume, f: &[Finding]| match mode {
                TrainDataMode::Volume3d => prepare_view(v, f, model.cfg.z_target),
                TrainDataMode::Mip => {
                    let mip = crate::phantom::project_mip(v);
                    PreparedView {
                        volume: mip,
                        findings: f.to_vec(),
                        z_windows: vec![0; f.len()],
                        best_windows: vec![0; f.len()],
                        visible_at: vec![(0..f.len()).collect()],
                    }
                }
                TrainDataMode::SlicewiseRandom | TrainDataMode::SlicewiseAnnotated => {
                    prepare_view(v, f, model.cfg.z_target)
                }
            };
            PreparedCase {
                malignant: c.label == Label::Malignant,
                annotated: c.annotated,
                cc: prep(&c.cc, &c.findings_cc),
                mlo: prep(&c.mlo, &c.findings_mlo),
            }
        })
        .collect();

    let val_cases: Vec<&Case> = dataset.cases.iter().filter(|c| c.split == Split::Val).collect();
    let (img_w, img_h) = (model.cfg.img_w as f64, model.cfg.img_h as f64);
    let mut optimizer = AdamW::new(&model.store, cfg.lr, cfg.weight_decay);
    let mut rng = Rng::new(cfg.seed);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Vec<f64>)> = None;
    let mut last_finite: Option<(usize, usize, f64)> = None;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        rng.shuffle(&mut order);
        let mut sums = [0.0f64; 6];
        for &ci in &order {
            let sample = &prepared[ci];
            let (fh_cc, fv_cc, fh_mlo, fv_mlo) = if cfg.flips {
                (rng.flip(), rng.flip(), rng.flip(), rng.flip())
            } else {
                (false, false, false, false)
            };

            // slicewise modes pick one slice per view per step
            let pick_slice = |view: &PreparedView, rng: &mut Rng| -> (usize, Vec<usize>) {
                if sample.annotated && !view.findings.is_empty() {
                    let fi = rng.below(view.findings.len());
                    let j = view.best_windows[fi];
                    (j, view.visible_at[j].clone())
                } else {
                    (rng.below(view.volume.slices), Vec::new())
                }
            };

            let make_view = |view: &PreparedView, fh: bool, fv: bool, rng: &mut Rng| {
                let (vol, fidx): (Volume, Option<Vec<usize>>) = match mode {
                    TrainDataMode::Volume3d | TrainDataMode::Mip => (view.volume.clone(), None),
                    _ => {
                        let (j, keep) = pick_slice(view, rng);
                        let plane = view.volume.height * view.volume.width;
                        let vol = Volume {
                            slices: 1,
                            voxels: view.volume.voxels[j * plane..(j + 1) * plane].to_vec(),
                            ..view.volume.clone()
                        };
                        (vol, Some(keep))
                    }
                };
                let vol = flip_volume(&vol, fh, fv);
                let indices: Vec<usize> = match &fidx {
                    Some(keep) => keep.clone(),
                    None => (0..view.findings.len()).collect(),
                };
                let findings: Vec<Finding> = indices
                    .iter()
                    .map(|&i| flip_finding(&view.findings[i], img_w, img_h, fh, fv))
                    .collect();
                let z_windows: Vec<usize> = indices.iter().map(|&i| view.z_windows[i]).collect();
                (vol, ViewTarget { findings, z_windows })
            };

            let (cc_vol, cc_target) = make_view(&sample.cc, fh_cc, fv_cc, &mut rng);
            let (mlo_vol, mlo_target) = make_view(&sample.mlo, fh_mlo, fv_mlo, &mut rng);

            let mut tape = Tape::unchecked();
            let bound = model.store.bind(&mut tape);
            let (fwd_cc, fwd_mlo) = if volume_mode {
                model.forward_3d_pooled(&mut tape, &bound, &cc_vol, &mlo_vol)
            } else {
                let cc_img = crate::features::slice_tensor(&cc_vol, 0);
                let mlo_img = crate::features::slice_tensor(&mlo_vol, 0);
                model.forward_2d(&mut tape, &bound, &cc_img, &mlo_img)
            };
            let target = CaseTarget {
                malignant: sample.malignant,
                annotated: sample.annotated,
                cc: cc_target,
                mlo: mlo_target,
            };
            let matches_cc = compute_matches(&tape, &fwd_cc, &target.cc.findings, img_w, img_h);
            let matches_mlo = compute_matches(&tape, &fwd_mlo, &target.mlo.findings, img_w, img_h);
            let (loss_var, breakdown) = total_loss(
                &mut tape,
                &fwd_cc,
                &fwd_mlo,
                &target,
                &matches_cc,
                &matches_mlo,
                &cfg.weights,
                img_w,
                img_h,
            );
            if !breakdown.total.is_finite() {
                let report = match last_finite {
                    Some((e, c, l)) => format!("last finite step: epoch {e}, case {c}, loss {l:.6}"),
                    None => "no finite step completed".into(),
                };
                return Err(MmError::Diverged { epoch, case: ci, message: report });
            }
            last_finite = Some((epoch, ci, breakdown.total));
            tape.backward(loss_var);
            let mut grads = model.store.gradients(&tape, &bound);
            AdamW::clip_global_norm(&mut grads, cfg.grad_clip);
            optimizer.step(&mut model.store, &grads);

            sums[0] += breakdown.total;
            sums[1] += breakdown.l_box;
            sums[2] += breakdown.l_cls_proposal;
            sums[3] += breakdown.l_cls_image;
            sums[4] += breakdown.l_cls_breast;
            sums[5] += breakdown.l_z;
        }
        let n = order.len() as f64;

        let (val_r025, val_auc) = if cfg.val_every > 0
            && !val_cases.is_empty()
            && (epoch + 1) % cfg.val_every == 0
        {
            let (r, a) = val_scores(model, &val_cases, mode.eval_mode(), cfg.nms_tau, 0.25)?;
            (r, Some(a))
        } else {
            (None, None)
        };
        if let Some(auc) = val_auc {
            let score = auc + val_r025.unwrap_or(0.0);
            let better = match &best {
                None => true,
                Some((s, _, _)) => score > *s,
            };
            if better {
                best = Some((score, epoch, model.store.flatten()));
            }
        }
        log.push(EpochLog {
            epoch,
            mean_loss: sums[0] / n,
            mean_box: sums[1] / n,
            mean_proposal: sums[2] / n,
            mean_image: sums[3] / n,
            mean_breast: sums[4] / n,
            mean_z: sums[5] / n,
            val_r025,
            val_auc,
            wall_secs: started.elapsed().as_secs_f64(),
        });
        log::info!("{}", log.last().expect("just pushed").render());
    }

    let (best_score, best_epoch) = match best {
        Some((score, epoch, params)) => {
            model.store.load_flat(&params);
            (score, epoch)
        }
        None => (f64::NAN, cfg.epochs.saturating_sub(1)),
    };
    Ok(TrainOutcome {
        log,
        best_epoch,
        best_score,
        train_cases: prepared.len(),
        train_malignant: kept_malignant,
    })
}
