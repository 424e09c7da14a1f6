//! Exact assignment between proposals and ground-truth findings.

use crate::metrics::iou_2d;
use crate::phantom::Finding;
use crate::tensor::ops::sigmoid;
use crate::tensor::Tensor;

/// Proposal-to-finding assignment for one head of one view.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatchResult {
    /// (proposal index, ground-truth index); each ground truth appears once.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched: Vec<usize>,
}

/// Matching cost: 2*(1 - IoU) + L1 over normalized corners + 2*(1 - sigmoid(logit)).
pub fn match_cost(
    pred: &[f64; 4],
    logit: f64,
    gt: &[f64; 4],
    img_w: f64,
    img_h: f64,
) -> f64 {
    let iou = iou_2d(pred, gt);
    let mut l1 = 0.0;
    for c in 0..4 {
        let scale = if c % 2 == 0 { img_w } else { img_h };
        l1 += (pred[c] - gt[c]).abs() / scale;
    }
    2.0 * (1.0 - iou) + l1 + 2.0 * (1.0 - sigmoid(logit))
}

/// Optimal assignment of findings to proposals by the exact Hungarian
/// algorithm. Requires at least as many proposals as findings.
pub fn hungarian_match(
    boxes: &Tensor,
    logits: &[f64],
    gts: &[Finding],
    img_w: f64,
    img_h: f64,
) -> MatchResult {
    let n = boxes.rows();
    assert_eq!(boxes.cols(), 4, "hungarian_match: boxes must be (N,4)");
    assert_eq!(logits.len(), n, "hungarian_match: logits length");
    assert!(
        gts.len() <= n,
        "hungarian_match: {} findings exceed {} proposals",
        gts.len(),
        n
    );
    if gts.is_empty() {
        return MatchResult { pairs: Vec::new(), unmatched: (0..n).collect() };
    }
    // square cost matrix: real finding columns plus zero-cost padding
    let mut cost = vec![0.0; n * n];
    for p in 0..n {
        let pred = [boxes.at2(p, 0), boxes.at2(p, 1), boxes.at2(p, 2), boxes.at2(p, 3)];
        for (g, gt) in gts.iter().enumerate() {
            cost[p * n + g] = match_cost(&pred, logits[p], &gt.bbox, img_w, img_h);
        }
    }
    let assignment = solve_square(&cost, n);
    let mut pairs: Vec<(usize, usize)> = assignment
        .iter()
        .enumerate()
        .filter(|&(_, &col)| col < gts.len())
        .map(|(row, &col)| (row, col))
        .collect();
    pairs.sort_by_key(|&(_, g)| g);
    let matched: std::collections::BTreeSet<usize> = pairs.iter().map(|&(p, _)| p).collect();
    let unmatched = (0..n).filter(|p| !matched.contains(p)).collect();
    MatchResult { pairs, unmatched }
}

/// Row-to-column assignment minimizing total cost on a square matrix
/// (shortest augmenting paths with potentials, O(n^3)).
pub fn solve_square(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n);
    const INF: f64 = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1]; // p[j]: row (1-based) assigned to column j
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = INF;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        assignment[p[j] - 1] = j - 1;
    }
    assignment
}
