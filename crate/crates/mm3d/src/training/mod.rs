//! Set-based matching, finding/image/breast losses, z supervision, and the
//! optimization loop.

pub mod hungarian;
pub mod run;

pub use hungarian::{hungarian_match, MatchResult};
pub use run::{train, EpochLog, TrainConfig, TrainDataMode, TrainOutcome};

// weight transfer operates on checkpoints; the format lives with the model
pub use crate::detector::checkpoint::{load_checkpoint, save_checkpoint, transfer_weights, TransferReport};

use crate::detector::ViewForward;
use crate::phantom::Finding;
use crate::tensor::ops::softplus;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub bbox: f64,
    pub proposal: f64,
    pub image: f64,
    pub breast: f64,
    pub z: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { bbox: 2.0, proposal: 2.0, image: 1.0, breast: 1.0, z: 1.0 }
    }
}

/// Supervision for one view, with finding z targets already mapped into
/// downsampled slice coordinates (empty for 2D training modes).
#[derive(Clone, Debug, Default)]
pub struct ViewTarget {
    pub findings: Vec<Finding>,
    pub z_windows: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct CaseTarget {
    pub malignant: bool,
    /// Finding-level losses are disabled when annotations are absent.
    pub annotated: bool,
    pub cc: ViewTarget,
    pub mlo: ViewTarget,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_box: f64,
    /// Per-proposal malignancy BCE (matched findings positive, rest
    /// background), part of the base detector's set-prediction loss.
    pub l_cls_proposal: f64,
    pub l_cls_image: f64,
    pub l_cls_breast: f64,
    pub l_z: f64,
    pub total: f64,
}

/// Image-level malignancy probability: noisy-or over proposal scores,
/// 1 - prod(1 - sigmoid(m)), accumulated in log space.
pub fn noisy_or(logits: &[f64]) -> f64 {
    let t: f64 = logits.iter().map(|&m| softplus(m)).sum();
    -(-t).exp_m1()
}

/// Breast-level score: mean of the two view scores.
pub fn breast_score(score_cc: f64, score_mlo: f64) -> f64 {
    assert!(
        (0.0..=1.0).contains(&score_cc) && (0.0..=1.0).contains(&score_mlo),
        "breast_score inputs must be probabilities"
    );
    0.5 * (score_cc + score_mlo)
}

/// Per-head matching against head-specific boxes (cascade re-matching).
/// The assignment is computed from detached values.
pub fn compute_matches(
    tape: &Tape,
    fwd: &ViewForward,
    findings: &[Finding],
    img_w: f64,
    img_h: f64,
) -> Vec<MatchResult> {
    fwd.heads
        .iter()
        .map(|h| hungarian_match(tape.value(h.boxes), tape.data(h.logits), findings, img_w, img_h))
        .collect()
}

/// Sum of per-pair L1(normalized corners) + (1 - generalized IoU) over the
/// matched pairs of one head; `count` accumulates the pair count for the
/// final mean.
fn box_terms(
    tape: &mut Tape,
    boxes: Var,
    m: &MatchResult,
    findings: &[Finding],
    img_w: f64,
    img_h: f64,
    count: &mut usize,
) -> Option<Var> {
    if m.pairs.is_empty() {
        return None;
    }
    let rows: Vec<usize> = m.pairs.iter().map(|&(p, _)| p).collect();
    let pred = tape.gather_rows(boxes, &rows);
    let p_count = m.pairs.len();
    *count += p_count;

    let mut gt = Vec::with_capacity(p_count * 4);
    for &(_, g) in &m.pairs {
        gt.extend_from_slice(&findings[g].bbox);
    }
    let gt = tape.constant(Tensor::new(vec![p_count, 4], gt));
    let norm = tape.constant(Tensor::new(
        vec![p_count, 4],
        (0..p_count)
            .flat_map(|_| [1.0 / img_w, 1.0 / img_h, 1.0 / img_w, 1.0 / img_h])
            .collect(),
    ));
    let diff = tape.sub(pred, gt);
    let scaled = tape.mul(diff, norm);
    let absed = tape.abs(scaled);
    let l1 = tape.sum_all(absed);

    let col = |tape: &mut Tape, v: Var, c: usize| tape.slice_cols(v, c, 1);
    let (px1, py1, px2, py2) = (col(tape, pred, 0), col(tape, pred, 1), col(tape, pred, 2), col(tape, pred, 3));
    let (gx1, gy1, gx2, gy2) = (col(tape, gt, 0), col(tape, gt, 1), col(tape, gt, 2), col(tape, gt, 3));
    let ix1 = tape.elem_max(px1, gx1);
    let iy1 = tape.elem_max(py1, gy1);
    let ix2 = tape.elem_min(px2, gx2);
    let iy2 = tape.elem_min(py2, gy2);
    let iw_raw = tape.sub(ix2, ix1);
    let ih_raw = tape.sub(iy2, iy1);
    let iw = tape.relu(iw_raw);
    let ih = tape.relu(ih_raw);
    let inter = tape.mul(iw, ih);
    let pw = tape.sub(px2, px1);
    let ph = tape.sub(py2, py1);
    let area_p = tape.mul(pw, ph);
    let gw = tape.sub(gx2, gx1);
    let gh = tape.sub(gy2, gy1);
    let area_g = tape.mul(gw, gh);
    let areas = tape.add(area_p, area_g);
    let union = tape.sub(areas, inter);
    let iou = tape.div(inter, union);
    let ex1 = tape.elem_min(px1, gx1);
    let ey1 = tape.elem_min(py1, gy1);
    let ex2 = tape.elem_max(px2, gx2);
    let ey2 = tape.elem_max(py2, gy2);
    let ew = tape.sub(ex2, ex1);
    let eh = tape.sub(ey2, ey1);
    let earea = tape.mul(ew, eh);
    let slack = tape.sub(earea, union);
    let penalty = tape.div(slack, earea);
    let giou = tape.sub(iou, penalty);
    let neg_giou = tape.scale(giou, -1.0);
    let one_minus = tape.add_scalar(neg_giou, 1.0);
    let giou_sum = tape.sum_all(one_minus);

    Some(tape.add(l1, giou_sum))
}

/// Finding-level 2D localization loss: mean over matched pairs and heads of
/// L1(normalized corners) + (1 - gIoU). Zero when annotations are absent.
pub fn loss_box(
    tape: &mut Tape,
    views: &[(&ViewForward, &[Finding], &[MatchResult])],
    img_w: f64,
    img_h: f64,
) -> Option<Var> {
    let mut acc: Option<Var> = None;
    let mut count = 0usize;
    for (fwd, findings, matches) in views {
        for (head, m) in fwd.heads.iter().zip(*matches) {
            if let Some(term) = box_terms(tape, head.boxes, m, findings, img_w, img_h, &mut count) {
                acc = Some(match acc {
                    Some(a) => tape.add(a, term),
                    None => term,
                });
            }
        }
    }
    acc.map(|a| tape.scale(a, 1.0 / count as f64))
}

/// Cross-entropy on the matched proposals' slice weights, summed over heads
/// and matched pairs: -log w[z_gt]. The regression-based fusion variant
/// contributes L1 to the continuous z prediction instead.
pub fn loss_z(
    tape: &mut Tape,
    views: &[(&ViewForward, &[MatchResult], &[usize])],
) -> Option<Var> {
    let mut acc: Option<Var> = None;
    for (fwd, matches, z_windows) in views {
        for (head, m) in fwd.heads.iter().zip(*matches) {
            if m.pairs.is_empty() {
                continue;
            }
            let term = if let Some(w) = head.zloss_weights {
                let s_max = tape.value(w).cols();
                let idx: Vec<(usize, usize)> = m
                    .pairs
                    .iter()
                    .map(|&(p, g)| {
                        assert!(z_windows[g] < s_max, "z target {} out of range {s_max}", z_windows[g]);
                        (p, z_windows[g])
                    })
                    .collect();
                let picked = tape.gather2d(w, &idx);
                let logs = tape.log(picked);
                let summed = tape.sum_all(logs);
                tape.scale(summed, -1.0)
            } else if let Some(zf) = head.z_float {
                let n = tape.data(zf).len();
                let zmat = tape.reshape(zf, vec![n, 1]);
                let idx: Vec<(usize, usize)> = m.pairs.iter().map(|&(p, _)| (p, 0)).collect();
                let picked = tape.gather2d(zmat, &idx);
                let targets = tape.constant(Tensor::from_vec(
                    m.pairs.iter().map(|&(_, g)| z_windows[g] as f64).collect(),
                ));
                let diff = tape.sub(picked, targets);
                let absed = tape.abs(diff);
                tape.sum_all(absed)
            } else {
                continue;
            };
            acc = Some(match acc {
                Some(a) => tape.add(a, term),
                None => term,
            });
        }
    }
    acc
}

/// Per-proposal malignancy BCE for one annotated view, deep-supervised over
/// heads: matched proposals take their finding's malignancy flag as target,
/// unmatched proposals are background. Mean over proposals, heads, views.
pub fn loss_proposal_cls(
    tape: &mut Tape,
    views: &[(&ViewForward, &[Finding], &[MatchResult])],
) -> Option<Var> {
    let mut acc: Option<Var> = None;
    let mut count = 0usize;
    for (fwd, findings, matches) in views {
        for (head, m) in fwd.heads.iter().zip(*matches) {
            let n = tape.data(head.logits).len();
            let mut targets = vec![0.0; n];
            for &(p, g) in &m.pairs {
                targets[p] = f64::from(findings[g].malignant);
            }
            // BCE(x, t) = softplus(x) - t*x
            let sp = tape.softplus(head.logits);
            let sp_sum = tape.sum_all(sp);
            let tvec = tape.constant(Tensor::from_vec(targets));
            let tx = tape.mul(head.logits, tvec);
            let tx_sum = tape.sum_all(tx);
            let term = tape.sub(sp_sum, tx_sum);
            count += n;
            acc = Some(match acc {
                Some(a) => tape.add(a, term),
                None => term,
            });
        }
    }
    acc.map(|a| tape.scale(a, 1.0 / count as f64))
}

/// Sum of softplus(logits): t such that the noisy-or image probability is
/// 1 - e^{-t}. Stable for the BCE in both label branches.
fn suspicion_total(tape: &mut Tape, logits: Var) -> Var {
    let sp = tape.softplus(logits);
    tape.sum_all(sp)
}

fn image_bce(tape: &mut Tape, t: Var, malignant: bool) -> Var {
    if malignant {
        // -log p = -log(1 - e^{-t})
        let l = tape.log1mexp(t);
        tape.scale(l, -1.0)
    } else {
        // -log(1 - p) = t exactly
        t
    }
}

fn breast_bce(tape: &mut Tape, t_cc: Var, t_mlo: Var, malignant: bool) -> Var {
    let neg_cc = tape.scale(t_cc, -1.0);
    let neg_mlo = tape.scale(t_mlo, -1.0);
    let q_cc = tape.exp(neg_cc);
    let q_mlo = tape.exp(neg_mlo);
    let q_sum = tape.add(q_cc, q_mlo);
    let q_mean = tape.scale(q_sum, 0.5);
    let prob = if malignant {
        // p = 1 - mean(e^{-t})
        let neg_q = tape.scale(q_mean, -1.0);
        tape.add_scalar(neg_q, 1.0)
    } else {
        q_mean
    };
    let safe = tape.clamp_min(prob, 1e-300);
    let l = tape.log(safe);
    tape.scale(l, -1.0)
}

/// Total training loss over both views of one case. Classification BCE uses
/// the final head's scores only; box and z losses are deep-supervised over
/// all heads. Matching is fixed (computed beforehand from detached values).
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    tape: &mut Tape,
    fwd_cc: &ViewForward,
    fwd_mlo: &ViewForward,
    target: &CaseTarget,
    matches_cc: &[MatchResult],
    matches_mlo: &[MatchResult],
    weights: &LossWeights,
    img_w: f64,
    img_h: f64,
) -> (Var, LossBreakdown) {
    let zero = tape.constant(Tensor::scalar(0.0));

    let (l_box, l_prop, l_z) = if target.annotated {
        let lb = loss_box(
            tape,
            &[
                (fwd_cc, target.cc.findings.as_slice(), matches_cc),
                (fwd_mlo, target.mlo.findings.as_slice(), matches_mlo),
            ],
            img_w,
            img_h,
        )
        .unwrap_or(zero);
        let lp = loss_proposal_cls(
            tape,
            &[
                (fwd_cc, target.cc.findings.as_slice(), matches_cc),
                (fwd_mlo, target.mlo.findings.as_slice(), matches_mlo),
            ],
        )
        .unwrap_or(zero);
        let lz = if weights.z != 0.0 {
            loss_z(
                tape,
                &[
                    (fwd_cc, matches_cc, target.cc.z_windows.as_slice()),
                    (fwd_mlo, matches_mlo, target.mlo.z_windows.as_slice()),
                ],
            )
            .unwrap_or(zero)
        } else {
            zero
        };
        (lb, lp, lz)
    } else {
        (zero, zero, zero)
    };

    let t_cc = suspicion_total(tape, fwd_cc.last().logits);
    let t_mlo = suspicion_total(tape, fwd_mlo.last().logits);
    let bce_cc = image_bce(tape, t_cc, target.malignant);
    let bce_mlo = image_bce(tape, t_mlo, target.malignant);
    let img_sum = tape.add(bce_cc, bce_mlo);
    let l_image = tape.scale(img_sum, 0.5);
    let l_breast = breast_bce(tape, t_cc, t_mlo, target.malignant);

    let wb = tape.scale(l_box, weights.bbox);
    let wp = tape.scale(l_prop, weights.proposal);
    let wi = tape.scale(l_image, weights.image);
    let wbr = tape.scale(l_breast, weights.breast);
    let wz = tape.scale(l_z, weights.z);
    let s1 = tape.add(wb, wi);
    let s2 = tape.add(wbr, wz);
    let s3 = tape.add(s1, wp);
    let total = tape.add(s2, s3);

    let breakdown = LossBreakdown {
        l_box: tape.item(l_box),
        l_cls_proposal: tape.item(l_prop),
        l_cls_image: tape.item(l_image),
        l_cls_breast: tape.item(l_breast),
        l_z: tape.item(l_z),
        total: tape.item(total),
    };
    (total, breakdown)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn noisy_or_examples() {
        assert!((noisy_or(&[0.0]) - 0.5).abs() < 1e-15);
        assert!((noisy_or(&[0.0, 0.0]) - 0.75).abs() < 1e-15);
        // 50 proposals at p = 0.01 each vs the direct product
        let logit = (0.01f64 / 0.99).ln();
        let logits = vec![logit; 50];
        let direct = 1.0 - (1.0 - 0.01f64).powi(50);
        assert!((noisy_or(&logits) - direct).abs() < 1e-12);
    }

    #[test]
    fn noisy_or_is_permutation_invariant_and_monotone() {
        let mut rng = Rng::new(8);
        let mut logits: Vec<f64> = (0..6).map(|_| rng.uniform_in(-2.0, 2.0)).collect();
        let base = noisy_or(&logits);
        let mut shuffled = logits.clone();
        rng.shuffle(&mut shuffled);
        assert!((noisy_or(&shuffled) - base).abs() < 1e-12);
        logits[3] += 0.5;
        assert!(noisy_or(&logits) > base);
    }

    #[test]
    fn breast_score_examples() {
        assert_eq!(breast_score(0.2, 0.8), 0.5);
        assert_eq!(breast_score(0.4, 0.4), 0.4);
        assert!(breast_score(0.3, 0.8) > breast_score(0.2, 0.8));
        assert!(breast_score(0.2, 0.9) > breast_score(0.2, 0.8));
    }

    #[test]
    fn perfect_box_prediction_has_zero_loss() {
        let mut tape = Tape::new();
        let findings = vec![Finding {
            bbox: [2.0, 3.0, 10.0, 12.0],
            z_best: 0,
            z_range: (0, 0),
            malignant: true,
        }];
        let boxes = tape.constant(Tensor::new(vec![2, 4], vec![
            2.0, 3.0, 10.0, 12.0, //
            0.0, 0.0, 1.0, 1.0,
        ]));
        let m = MatchResult { pairs: vec![(0, 0)], unmatched: vec![1] };
        let mut count = 0;
        let term = box_terms(&mut tape, boxes, &m, &findings, 32.0, 32.0, &mut count).expect("term");
        assert!(tape.item(term).abs() < 1e-12);
    }

    #[test]
    fn disjoint_boxes_giou_matches_hand_value() {
        // pred (0,0,2,2), gt (4,0,6,2): iou 0, enclosing (0,0,6,2) area 12,
        // union 8 -> giou = 0 - (12-8)/12 = -1/3 -> term = 1 - giou = 4/3
        let mut tape = Tape::new();
        let findings = vec![Finding { bbox: [4.0, 0.0, 6.0, 2.0], z_best: 0, z_range: (0, 0), malignant: true }];
        let boxes = tape.constant(Tensor::new(vec![1, 4], vec![0.0, 0.0, 2.0, 2.0]));
        let m = MatchResult { pairs: vec![(0, 0)], unmatched: vec![] };
        let mut count = 0;
        let term = box_terms(&mut tape, boxes, &m, &findings, 32.0, 32.0, &mut count).expect("term");
        // L1 part: |0-4|/32 + |2-6|/32 = 0.25
        let expect = 4.0 / 3.0 + 0.25;
        assert!((tape.item(term) - expect).abs() < 1e-12, "{}", tape.item(term));
    }

    #[test]
    fn loss_z_values() {
        // one-hot at the target -> 0; uniform over 4 slices -> ln 4 per pair
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::new(vec![2, 4], vec![
            1.0 - 3e-16, 1e-16, 1e-16, 1e-16, //
            0.25, 0.25, 0.25, 0.25,
        ]));
        let picked = tape.gather2d(w, &[(0, 0)]);
        let logs = tape.log(picked);
        let l = tape.scale(logs, -1.0);
        assert!(tape.item(l).abs() < 1e-12);
        let picked2 = tape.gather2d(w, &[(1, 2)]);
        let logs2 = tape.log(picked2);
        let l2 = tape.scale(logs2, -1.0);
        assert!((tape.item(l2) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn moving_mass_toward_target_reduces_loss_z() {
        let target = 1usize;
        let mut w: [f64; 3] = [0.2, 0.3, 0.5];
        let mut last = -(w[target].ln());
        for _ in 0..5 {
            // move 20% of slice 2's mass to the target and renormalize
            let delta = w[2] * 0.2;
            w[2] -= delta;
            w[target] += delta;
            let sum: f64 = w.iter().sum();
            for x in w.iter_mut() {
                *x /= sum;
            }
            let cur = -(w[target].ln());
            assert!(cur < last);
            last = cur;
        }
    }

    #[test]
    fn negative_case_with_confident_negatives_has_tiny_loss() {
        use crate::detector::{Fusion, Model, ModelConfig};
        use crate::phantom::{Laterality, View, Volume};
        let model = Model::new(ModelConfig {
            proposals: 3,
            dim: 8,
            roi: 2,
            heads: 2,
            z_target: 2,
            img_h: 16,
            img_w: 16,
            fusion: Fusion::Weighted,
            seed: 3,
        });
        let mut rng = Rng::new(5);
        let vol = |rng: &mut Rng| Volume {
            slices: 2,
            height: 16,
            width: 16,
            voxels: (0..512).map(|_| rng.uniform() as f32).collect(),
            view: View::Cc,
            laterality: Laterality::Left,
        };
        let cc = vol(&mut rng);
        let mlo = vol(&mut rng);
        let mut tape = Tape::new();
        // push cls bias strongly negative so every proposal scores ~0
        let mut store = model.store.clone();
        for i in 0..2 {
            let id = store.index_of(&format!("head{i}.cls.bias")).expect("bias");
            store.value_mut(id)[0] = -30.0;
        }
        let bound = store.bind_const(&mut tape);
        let (fwd_cc, fwd_mlo) = model.forward_3d_pooled(&mut tape, &bound, &cc, &mlo);
        let target = CaseTarget {
            malignant: false,
            annotated: true,
            cc: ViewTarget::default(),
            mlo: ViewTarget::default(),
        };
        let (_, breakdown) = total_loss(
            &mut tape,
            &fwd_cc,
            &fwd_mlo,
            &target,
            &[MatchResult { pairs: vec![], unmatched: vec![0, 1, 2] }, MatchResult { pairs: vec![], unmatched: vec![0, 1, 2] }],
            &[MatchResult { pairs: vec![], unmatched: vec![0, 1, 2] }, MatchResult { pairs: vec![], unmatched: vec![0, 1, 2] }],
            &LossWeights::default(),
            16.0,
            16.0,
        );
        assert!(breakdown.total < 1e-8, "total {}", breakdown.total);
        assert_eq!(breakdown.l_box, 0.0);
        assert_eq!(breakdown.l_z, 0.0);
    }

    #[test]
    fn unannotated_case_contributes_no_finding_losses() {
        use crate::detector::{Fusion, Model, ModelConfig};
        use crate::phantom::{Laterality, View, Volume};
        let model = Model::new(ModelConfig {
            proposals: 3,
            dim: 8,
            roi: 2,
            heads: 2,
            z_target: 2,
            img_h: 16,
            img_w: 16,
            fusion: Fusion::Weighted,
            seed: 3,
        });
        let mut rng = Rng::new(6);
        let vol = |rng: &mut Rng| Volume {
            slices: 2,
            height: 16,
            width: 16,
            voxels: (0..512).map(|_| rng.uniform() as f32).collect(),
            view: View::Cc,
            laterality: Laterality::Left,
        };
        let cc = vol(&mut rng);
        let mlo = vol(&mut rng);
        let mut tape = Tape::new();
        let bound = model.bind_const(&mut tape);
        let (fwd_cc, fwd_mlo) = model.forward_3d_pooled(&mut tape, &bound, &cc, &mlo);
        let finding = Finding { bbox: [1.0, 1.0, 6.0, 6.0], z_best: 0, z_range: (0, 1), malignant: true };
        let target = CaseTarget {
            malignant: true,
            annotated: false,
            cc: ViewTarget { findings: vec![finding.clone()], z_windows: vec![0] },
            mlo: ViewTarget { findings: vec![finding], z_windows: vec![0] },
        };
        let matches_cc = compute_matches(&tape, &fwd_cc, &target.cc.findings, 16.0, 16.0);
        let matches_mlo = compute_matches(&tape, &fwd_mlo, &target.mlo.findings, 16.0, 16.0);
        let (_, breakdown) = total_loss(
            &mut tape,
            &fwd_cc,
            &fwd_mlo,
            &target,
            &matches_cc,
            &matches_mlo,
            &LossWeights::default(),
            16.0,
            16.0,
        );
        assert_eq!(breakdown.l_box, 0.0);
        assert_eq!(breakdown.l_cls_proposal, 0.0);
        assert_eq!(breakdown.l_z, 0.0);
        assert!(breakdown.l_cls_image > 0.0);
        assert!(
            (breakdown.total
                - (breakdown.l_cls_image + breakdown.l_cls_breast))
                .abs()
                < 1e-12
        );
    }
}
