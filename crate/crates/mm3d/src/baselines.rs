//! Comparison pipelines: MIP projection, slice-by-slice detection with
//! post-hoc NMS aggregation, and shared evaluation drivers for every mode.
//!
//! The slicewise and MIP baselines reuse the same backbone and head code in
//! pure 2D mode, so comparisons isolate the aggregation strategy.

use crate::detector::{Mode, Model};
use crate::error::{MmError, Result};
use crate::features::{slice_tensor, zpool};
use crate::metrics::{
    evaluate, froc_curve, iou_2d, roc_auc, Detection, EvalProtocol, EvalReport, GtFinding,
    VolumeDets,
};
use crate::phantom::{project_mip, Case, Dataset, Label};
use crate::tensor::Tape;
use crate::training::{self, noisy_or, TrainConfig, TrainDataMode, TrainOutcome};

// learnable fusion variants used by the comparison models
pub use crate::detector::fusion::{MlpRegressFusion, QuerySummaryFusion, TimeSformFusion};

/// Cross-slice aggregation settings for the slicewise pipeline. Score rule:
/// an accepted box keeps its own score; z rule: the box keeps its slice.
#[derive(Clone, Copy, Debug)]
pub struct AggregationConfig {
    pub iou_threshold: f64,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        AggregationConfig { iou_threshold: 0.5 }
    }
}

impl AggregationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iou_threshold <= 0.0 || self.iou_threshold > 1.0 {
            return Err(MmError::Config(format!(
                "nms threshold {} outside (0, 1]",
                self.iou_threshold
            )));
        }
        Ok(())
    }
}

/// Greedy NMS: visit by descending score (ties by box coordinates) and
/// accept a candidate only if its IoU with every accepted box stays below
/// the threshold.
pub fn nms_greedy(mut dets: Vec<Detection>, tau: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.bbox.partial_cmp(&b.bbox).unwrap_or(std::cmp::Ordering::Equal))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for d in dets {
        if kept.iter().all(|k| iou_2d(&k.bbox, &d.bbox) < tau) {
            kept.push(d);
        }
    }
    kept
}

/// Detections and the breast-level score for one case under one pipeline.
#[derive(Clone, Debug)]
pub struct CaseOutput {
    pub cc: Vec<Detection>,
    pub mlo: Vec<Detection>,
    pub score: f64,
}

/// Full-volume pipeline: z-pool, cascade in volume mode, all N scored boxes
/// with mapped-back slice indices.
pub fn run_3d(model: &Model, case: &Case) -> CaseOutput {
    let mut tape = Tape::unchecked();
    let bound = model.bind_const(&mut tape);
    let (fwd_cc, fwd_mlo, zmap_cc, zmap_mlo) = model.forward_3d(&mut tape, &bound, &case.cc, &case.mlo);
    let cc = model.detections(&tape, &fwd_cc, Some(&zmap_cc));
    let mlo = model.detections(&tape, &fwd_mlo, Some(&zmap_mlo));
    let score = training::breast_score(
        noisy_or(tape.data(fwd_cc.last().logits)),
        noisy_or(tape.data(fwd_mlo.last().logits)),
    );
    CaseOutput { cc, mlo, score }
}

/// 2D projection pipeline: the model sees the per-view maximum intensity
/// projection; detections carry no slice index.
pub fn run_mip(model: &Model, case: &Case) -> CaseOutput {
    let cc_img = slice_tensor(&project_mip(&case.cc), 0);
    let mlo_img = slice_tensor(&project_mip(&case.mlo), 0);
    let mut tape = Tape::unchecked();
    let bound = model.bind_const(&mut tape);
    let (fwd_cc, fwd_mlo) = model.forward_2d(&mut tape, &bound, &cc_img, &mlo_img);
    let cc = model.detections(&tape, &fwd_cc, None);
    let mlo = model.detections(&tape, &fwd_mlo, None);
    let score = training::breast_score(
        noisy_or(tape.data(fwd_cc.last().logits)),
        noisy_or(tape.data(fwd_mlo.last().logits)),
    );
    CaseOutput { cc, mlo, score }
}

/// Slice-by-slice pipeline: run the 2D cascade on every downsampled slice
/// pair, pool the N*S' candidates per view with greedy NMS, and keep each
/// accepted box's own slice (mapped back to original coordinates). The case
/// score is the breast mean of each view's best per-slice noisy-or score.
pub fn run_slicewise(model: &Model, case: &Case, agg: &AggregationConfig) -> CaseOutput {
    agg.validate().expect("aggregation config");
    let target = model.cfg.z_target.min(case.cc.slices);
    let (cc_p, zmap_cc) = zpool(&case.cc, target);
    let target_mlo = model.cfg.z_target.min(case.mlo.slices);
    let (mlo_p, zmap_mlo) = zpool(&case.mlo, target_mlo);
    let slices = cc_p.slices.min(mlo_p.slices);
    let mut cand_cc = Vec::new();
    let mut cand_mlo = Vec::new();
    let mut best_cc = 0.0f64;
    let mut best_mlo = 0.0f64;
    for j in 0..slices {
        let cc_img = slice_tensor(&cc_p, j);
        let mlo_img = slice_tensor(&mlo_p, j);
        let mut tape = Tape::unchecked();
        let bound = model.bind_const(&mut tape);
        let (fwd_cc, fwd_mlo) = model.forward_2d(&mut tape, &bound, &cc_img, &mlo_img);
        for (fwd, cands, zmap, best) in [
            (&fwd_cc, &mut cand_cc, &zmap_cc, &mut best_cc),
            (&fwd_mlo, &mut cand_mlo, &zmap_mlo, &mut best_mlo),
        ] {
            let mut dets = model.detections(&tape, fwd, None);
            for d in dets.iter_mut() {
                d.z = Some(zmap.map_back(j));
            }
            cands.extend(dets);
            let p = noisy_or(tape.data(fwd.last().logits));
            if p > *best {
                *best = p;
            }
        }
    }
    CaseOutput {
        cc: nms_greedy(cand_cc, agg.iou_threshold),
        mlo: nms_greedy(cand_mlo, agg.iou_threshold),
        score: training::breast_score(best_cc, best_mlo),
    }
}

pub fn run_case(model: &Model, case: &Case, mode: Mode, agg: &AggregationConfig) -> CaseOutput {
    match mode {
        Mode::ThreeD => run_3d(model, case),
        Mode::Mip => run_mip(model, case),
        Mode::Slicewise => run_slicewise(model, case, agg),
        Mode::TwoD => run_mip(model, case),
    }
}

/// Ground-truth targets for recall: the malignant findings of one view.
fn gt_findings(case: &Case, view_findings: &[crate::phantom::Finding]) -> Vec<GtFinding> {
    let _ = case;
    view_findings
        .iter()
        .filter(|f| f.malignant)
        .map(|f| GtFinding { bbox: f.bbox, z_range: f.z_range })
        .collect()
}

/// Per-volume detections, case scores, and labels for a case set.
pub fn collect_outputs(
    model: &Model,
    cases: &[&Case],
    mode: Mode,
    agg: &AggregationConfig,
) -> (Vec<VolumeDets>, Vec<f64>, Vec<bool>) {
    let mut volumes = Vec::with_capacity(cases.len() * 2);
    let mut scores = Vec::with_capacity(cases.len());
    let mut labels = Vec::with_capacity(cases.len());
    for case in cases {
        let out = run_case(model, case, mode, agg);
        let benign = case.label == Label::Benign;
        volumes.push(VolumeDets {
            dets: out.cc,
            findings: gt_findings(case, &case.findings_cc),
            benign,
        });
        volumes.push(VolumeDets {
            dets: out.mlo,
            findings: gt_findings(case, &case.findings_mlo),
            benign,
        });
        scores.push(out.score);
        labels.push(case.label == Label::Malignant);
    }
    (volumes, scores, labels)
}

/// Full evaluation of a pipeline over a case set.
pub fn evaluate_cases(
    model: &Model,
    cases: &[&Case],
    mode: Mode,
    agg: &AggregationConfig,
    protocol: &EvalProtocol,
) -> Result<EvalReport> {
    let (volumes, scores, labels) = collect_outputs(model, cases, mode, agg);
    evaluate(&volumes, &scores, &labels, protocol)
}

/// Cheap validation metrics: point-estimate R@0.25 under the protocol that
/// matches the pipeline (3D localization for volume and slicewise modes, 2D
/// for projections) plus the case AUC.
pub fn val_scores(
    model: &Model,
    cases: &[&Case],
    mode: Mode,
    nms_tau: f64,
    iou_thresh: f64,
) -> Result<(Option<f64>, f64)> {
    let agg = AggregationConfig { iou_threshold: nms_tau };
    let (volumes, scores, labels) = collect_outputs(model, cases, mode, &agg);
    let auc = if labels.iter().any(|&l| l) && labels.iter().any(|&l| !l) {
        roc_auc(&scores, &labels)?
    } else {
        0.5
    };
    let require_z = mode != Mode::Mip && mode != Mode::TwoD;
    let n_findings: usize = volumes.iter().map(|v| v.findings.len()).sum();
    let r025 = if n_findings > 0 {
        Some(froc_curve(&volumes, require_z, iou_thresh, false)?.recall_at(0.25))
    } else {
        None
    };
    Ok((r025, auc))
}

/// Train the shared 2D model in the slicewise regime.
pub fn train_slicewise(
    model: &mut Model,
    dataset: &Dataset,
    annotated_only: bool,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let mode = if annotated_only {
        TrainDataMode::SlicewiseAnnotated
    } else {
        TrainDataMode::SlicewiseRandom
    };
    training::train(model, dataset, cfg, mode)
}
