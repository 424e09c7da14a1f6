//! Detection and classification evaluation: recall at X false positives per
//! volume under the 2D-IoU + visibility-range criterion, ROC-AUC, and
//! bootstrap / DeLong standard errors.

use serde::Serialize;

use crate::error::{MmError, Result};
use crate::tensor::Rng;

/// One scored box, with its original-resolution slice index when the
/// pipeline localizes in z.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub bbox: [f64; 4],
    pub score: f64,
    pub z: Option<usize>,
}

/// Ground-truth target for recall: a malignant finding's box and
/// visibility range.
#[derive(Clone, Debug, PartialEq)]
pub struct GtFinding {
    pub bbox: [f64; 4],
    pub z_range: (usize, usize),
}

/// All detections of one volume plus its targets.
#[derive(Clone, Debug)]
pub struct VolumeDets {
    pub dets: Vec<Detection>,
    pub findings: Vec<GtFinding>,
    /// Volume belongs to a benign-labeled case (excluded from FP counting
    /// under the restricted protocol).
    pub benign: bool,
}

/// Intersection over union of two boxes with continuously measured area.
pub fn iou_2d(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    assert!(a[0] <= a[2] && a[1] <= a[3], "iou_2d: invalid box {a:?}");
    assert!(b[0] <= b[2] && b[1] <= b[3], "iou_2d: invalid box {b:?}");
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    let area_a = (a[2] - a[0]) * (a[3] - a[1]);
    let area_b = (b[2] - b[0]) * (b[3] - b[1]);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        return 0.0;
    }
    inter / union
}

/// Per-detection TP/FP labels plus per-finding hit scores.
#[derive(Clone, Debug, Default)]
pub struct MatchLabels {
    /// Aligned with the input detection order.
    pub tp: Vec<bool>,
    /// Score of the TP that claimed each finding, if any.
    pub finding_hit_score: Vec<Option<f64>>,
}

/// Greedy matching in descending score order: a detection is a true positive
/// if its IoU with an unclaimed finding reaches the threshold and (when
/// `require_z`) its slice lies inside the finding's visibility range.
/// Detections without a slice index are false positives under `require_z`.
/// Ties break by box coordinates, ascending lexicographically.
pub fn match_tp(
    dets: &[Detection],
    findings: &[GtFinding],
    require_z: bool,
    iou_thresh: f64,
) -> MatchLabels {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| {
        dets[j]
            .score
            .partial_cmp(&dets[i].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| {
                dets[i]
                    .bbox
                    .partial_cmp(&dets[j].bbox)
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
    });
    let mut tp = vec![false; dets.len()];
    let mut hit: Vec<Option<f64>> = vec![None; findings.len()];
    for &di in &order {
        let det = &dets[di];
        let z_ok = |f: &GtFinding| match (require_z, det.z) {
            (false, _) => true,
            (true, Some(z)) => z >= f.z_range.0 && z <= f.z_range.1,
            (true, None) => false,
        };
        let mut best: Option<(usize, f64)> = None;
        for (fi, f) in findings.iter().enumerate() {
            if hit[fi].is_some() || !z_ok(f) {
                continue;
            }
            let iou = iou_2d(&det.bbox, &f.bbox);
            if iou >= iou_thresh {
                let better = match best {
                    None => true,
                    Some((_, bi)) => iou > bi,
                };
                if better {
                    best = Some((fi, iou));
                }
            }
        }
        if let Some((fi, _)) = best {
            hit[fi] = Some(det.score);
            tp[di] = true;
        }
    }
    MatchLabels { tp, finding_hit_score: hit }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub fp_per_volume: f64,
    pub recall: f64,
}

#[derive(Clone, Debug)]
pub struct FrocCurve {
    pub points: Vec<CurvePoint>,
    pub n_volumes: usize,
    pub n_findings: usize,
}

/// Label every volume and build the threshold sweep shared by all R@X reads.
pub fn froc_curve(
    volumes: &[VolumeDets],
    require_z: bool,
    iou_thresh: f64,
    restrict_fp_to_nonbenign: bool,
) -> Result<FrocCurve> {
    if volumes.is_empty() {
        return Err(MmError::Eval("recall_at_fp needs at least one volume".into()));
    }
    let mut tp_scores = Vec::new();
    let mut fp_scores = Vec::new();
    let mut n_findings = 0;
    let mut n_volumes = 0;
    for vol in volumes {
        let counted = !(restrict_fp_to_nonbenign && vol.benign);
        if counted {
            n_volumes += 1;
        }
        n_findings += vol.findings.len();
        let labels = match_tp(&vol.dets, &vol.findings, require_z, iou_thresh);
        for s in labels.finding_hit_score.iter().flatten() {
            tp_scores.push(*s);
        }
        if counted {
            for (d, &is_tp) in vol.dets.iter().zip(&labels.tp) {
                if !is_tp {
                    fp_scores.push(d.score);
                }
            }
        }
    }
    if n_findings == 0 {
        return Err(MmError::Eval("recall_at_fp needs at least one finding".into()));
    }
    if n_volumes == 0 {
        return Err(MmError::Eval("no volumes left after FP restriction".into()));
    }
    // sweep thresholds over the sorted distinct score set, descending
    let mut thresholds: Vec<f64> = tp_scores.iter().chain(fp_scores.iter()).cloned().collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    thresholds.dedup();
    tp_scores.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    fp_scores.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let mut points = Vec::with_capacity(thresholds.len());
    let (mut ti, mut fi) = (0usize, 0usize);
    for &t in &thresholds {
        while ti < tp_scores.len() && tp_scores[ti] >= t {
            ti += 1;
        }
        while fi < fp_scores.len() && fp_scores[fi] >= t {
            fi += 1;
        }
        points.push(CurvePoint {
            threshold: t,
            fp_per_volume: fi as f64 / n_volumes as f64,
            recall: ti as f64 / n_findings as f64,
        });
    }
    Ok(FrocCurve { points, n_volumes, n_findings })
}

impl FrocCurve {
    /// Max recall over thresholds whose FP rate stays at or below `x`.
    pub fn recall_at(&self, x: f64) -> f64 {
        let mut best = 0.0f64;
        for p in &self.points {
            if p.fp_per_volume <= x + 1e-12 {
                best = best.max(p.recall);
            }
        }
        best
    }
}

/// Recall at X false positives per volume over a volume set.
pub fn recall_at_fp(
    volumes: &[VolumeDets],
    x: f64,
    require_z: bool,
    iou_thresh: f64,
    restrict_fp_to_nonbenign: bool,
) -> Result<f64> {
    Ok(froc_curve(volumes, require_z, iou_thresh, restrict_fp_to_nonbenign)?.recall_at(x))
}

/// Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 P(equal).
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    assert_eq!(scores.len(), labels.len(), "roc_auc: length mismatch");
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(&s, _)| s).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(MmError::Eval("roc_auc needs both classes".into()));
    }
    let mut sum = 0.0;
    for &p in &pos {
        for &n in &neg {
            sum += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(sum / (pos.len() * neg.len()) as f64)
}

/// DeLong structural-components standard error of the AUC.
pub fn delong_se(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(&s, _)| s).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(MmError::Eval("delong_se needs both classes".into()));
    }
    let psi = |p: f64, n: f64| {
        if p > n {
            1.0
        } else if p == n {
            0.5
        } else {
            0.0
        }
    };
    let v10: Vec<f64> = pos
        .iter()
        .map(|&p| neg.iter().map(|&n| psi(p, n)).sum::<f64>() / neg.len() as f64)
        .collect();
    let v01: Vec<f64> = neg
        .iter()
        .map(|&n| pos.iter().map(|&p| psi(p, n)).sum::<f64>() / pos.len() as f64)
        .collect();
    let var = sample_var(&v10) / pos.len() as f64 + sample_var(&v01) / neg.len() as f64;
    Ok(var.max(0.0).sqrt())
}

fn sample_var(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    xs.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Bootstrap standard error of a statistic over resampled indices. The
/// statistic may reject a degenerate resample by returning None; rejected
/// replicates are skipped and counted.
pub fn bootstrap_se<F>(statistic: F, n: usize, b: usize, rng: &mut Rng) -> Result<(f64, usize)>
where
    F: Fn(&[usize]) -> Option<f64>,
{
    assert!(b >= 100, "bootstrap_se: B must be >= 100, got {b}");
    if n == 0 {
        return Err(MmError::Eval("bootstrap_se on empty data".into()));
    }
    let mut values = Vec::with_capacity(b);
    let mut skipped = 0;
    let mut sample = vec![0usize; n];
    for _ in 0..b {
        for s in sample.iter_mut() {
            *s = rng.below(n);
        }
        match statistic(&sample) {
            Some(v) => values.push(v),
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        log::warn!("bootstrap_se: skipped {skipped} degenerate replicates of {b}");
    }
    if values.len() < 2 {
        return Err(MmError::Eval(format!(
            "bootstrap_se: only {} valid replicates of {b}",
            values.len()
        )));
    }
    Ok((sample_var(&values).sqrt(), skipped))
}

/// Detection metrics for one localization protocol.
#[derive(Clone, Debug, Serialize)]
pub struct DetectionMetrics {
    pub r_at_025: f64,
    pub se_r025: f64,
    pub r_at_05: f64,
    pub se_r05: f64,
    #[serde(skip)]
    pub curve: Vec<CurvePoint>,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    /// 2D localization protocol (IoU only).
    pub loc_2d: Option<DetectionMetrics>,
    /// 3D localization protocol (IoU + slice inside visibility range).
    pub loc_3d: Option<DetectionMetrics>,
    pub auc: f64,
    pub se_auc: f64,
    pub n_volumes: usize,
    pub n_findings: usize,
    pub n_cases: usize,
}

#[derive(Clone, Debug)]
pub struct EvalProtocol {
    pub iou_thresh: f64,
    pub bootstrap: usize,
    pub seed: u64,
    pub restrict_fp_to_nonbenign: bool,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol { iou_thresh: 0.25, bootstrap: 200, seed: 0, restrict_fp_to_nonbenign: false }
    }
}

/// Full evaluation: both localization blocks plus case-level AUC.
pub fn evaluate(
    volumes: &[VolumeDets],
    case_scores: &[f64],
    case_labels: &[bool],
    protocol: &EvalProtocol,
) -> Result<EvalReport> {
    let auc = roc_auc(case_scores, case_labels)?;
    let se_auc = delong_se(case_scores, case_labels)?;
    let n_findings: usize = volumes.iter().map(|v| v.findings.len()).sum();
    let detection_block = |require_z: bool, salt: u64| -> Result<Option<DetectionMetrics>> {
        if n_findings == 0 || volumes.is_empty() {
            return Ok(None);
        }
        let curve = froc_curve(volumes, require_z, protocol.iou_thresh, protocol.restrict_fp_to_nonbenign)?;
        let stat = |x: f64| {
            move |idx: &[usize]| {
                let sample: Vec<VolumeDets> = idx.iter().map(|&i| volumes[i].clone()).collect();
                if sample.iter().all(|v| v.findings.is_empty()) {
                    return None;
                }
                recall_at_fp(&sample, x, require_z, protocol.iou_thresh, protocol.restrict_fp_to_nonbenign)
                    .ok()
            }
        };
        let mut rng = Rng::new(protocol.seed ^ salt);
        let (se_r025, _) = bootstrap_se(stat(0.25), volumes.len(), protocol.bootstrap, &mut rng)?;
        let (se_r05, _) = bootstrap_se(stat(0.5), volumes.len(), protocol.bootstrap, &mut rng)?;
        Ok(Some(DetectionMetrics {
            r_at_025: curve.recall_at(0.25),
            se_r025,
            r_at_05: curve.recall_at(0.5),
            se_r05,
            curve: curve.points,
        }))
    };
    Ok(EvalReport {
        loc_2d: detection_block(false, 0x2d)?,
        loc_3d: detection_block(true, 0x3d)?,
        auc,
        se_auc,
        n_volumes: volumes.len(),
        n_findings,
        n_cases: case_scores.len(),
    })
}

impl EvalReport {
    /// Human-readable block layout; deterministic (no timestamps).
    pub fn render(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "cases {}  volumes {}  findings {}\n",
            self.n_cases, self.n_volumes, self.n_findings
        ));
        s.push_str(&format!("auc {:.4}  se_auc {:.4}\n", self.auc, self.se_auc));
        let block = |name: &str, m: &Option<DetectionMetrics>| match m {
            Some(m) => format!(
                "[{name}] R@0.25 {:.4} (se {:.4})  R@0.5 {:.4} (se {:.4})\n",
                m.r_at_025, m.se_r025, m.r_at_05, m.se_r05
            ),
            None => format!("[{name}] not applicable (no findings)\n"),
        };
        s.push_str(&block("2d-localization", &self.loc_2d));
        s.push_str(&block("3d-localization", &self.loc_3d));
        s
    }

    /// CSV rows (threshold, fp_per_volume, recall) for external plotting.
    pub fn curve_csv(metrics: &DetectionMetrics) -> String {
        let mut s = String::from("threshold,fp_per_volume,recall\n");
        for p in &metrics.curve {
            s.push_str(&format!("{},{},{}\n", p.threshold, p.fp_per_volume, p.recall));
        }
        s
    }
}
