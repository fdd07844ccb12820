//! Box overlap and optimal one-to-one box matching.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::ToPrimitive;

use crate::schema::BBox;

/// Intersection over union; 0 when the boxes are disjoint or both empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersect(b).area();
    let union = a.area() + b.area() - inter;
    if union <= 0 {
        return 0.0;
    }
    inter as f64 / union as f64
}

/// Set-level agreement between predicted and ground-truth boxes.
///
/// Boxes are paired by a maximum-total-IoU assignment and the matched IoUs
/// are summed then divided by `max(|pred|, |gt|)`, so unmatched boxes on
/// either side count as zero. Two empty sets score 1.
pub fn multi_iou(pred: &[BBox], gt: &[BBox]) -> f64 {
    match (pred.is_empty(), gt.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let weights: Vec<Vec<f64>> = pred.iter().map(|p| gt.iter().map(|g| iou(p, g)).collect()).collect();
    let assignment = max_weight_assignment(&weights);
    // The matched IoUs are summed exactly so the score does not depend on
    // the order of either list.
    let total: BigRational = assignment
        .iter()
        .enumerate()
        .filter_map(|(i, j)| j.map(|j| iou_exact(&pred[i], &gt[j])))
        .sum();
    let n = BigInt::from(pred.len().max(gt.len()));
    (total / BigRational::from_integer(n)).to_f64().unwrap_or(0.0)
}

/// IoU as an exact fraction.
pub fn iou_exact(a: &BBox, b: &BBox) -> BigRational {
    let inter = a.intersect(b).area();
    let union = a.area() + b.area() - inter;
    if union <= 0 {
        return BigRational::from_integer(BigInt::from(0));
    }
    BigRational::new(inter.into(), union.into())
}

/// Maximum-weight assignment on a rectangular matrix of nonnegative weights.
///
/// Returns, for each row, the column it is matched to (`None` when there are
/// more rows than columns and the row is left over). Hungarian method on the
/// square padded cost matrix, O(n³).
pub fn max_weight_assignment(weights: &[Vec<f64>]) -> Vec<Option<usize>> {
    let rows = weights.len();
    let cols = weights.first().map_or(0, Vec::len);
    let n = rows.max(cols);
    if n == 0 {
        return Vec::new();
    }
    let max_w = weights.iter().flatten().copied().fold(0.0_f64, f64::max);
    // cost = max_w − weight, padding cells cost max_w (weight 0).
    let cost = |i: usize, j: usize| -> f64 {
        if i < rows && j < cols {
            max_w - weights[i][j]
        } else {
            max_w
        }
    };

    // Potentials and matching are 1-indexed; index 0 is the virtual start.
    let mut u = vec![0.0_f64; n + 1];
    let mut v = vec![0.0_f64; n + 1];
    let mut col_match = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        col_match[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_match[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
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
                    u[col_match[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_match[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_match[j0] = col_match[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut out = vec![None; rows];
    for j in 1..=n {
        let i = col_match[j];
        if i >= 1 && i <= rows && j <= cols {
            out[i - 1] = Some(j - 1);
        }
    }
    out
}

/// Greedy matching score: repeatedly take the highest remaining IoU pair.
/// Used as a lower bound when checking the optimal matcher.
pub fn greedy_multi_iou(pred: &[BBox], gt: &[BBox]) -> f64 {
    match (pred.is_empty(), gt.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let mut pairs: Vec<(f64, usize, usize)> = pred
        .iter()
        .enumerate()
        .flat_map(|(i, p)| gt.iter().enumerate().map(move |(j, g)| (iou(p, g), i, j)))
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut used_p = vec![false; pred.len()];
    let mut used_g = vec![false; gt.len()];
    let mut total = 0.0;
    for (w, i, j) in pairs {
        if !used_p[i] && !used_g[j] {
            used_p[i] = true;
            used_g[j] = true;
            total += w;
        }
    }
    total / pred.len().max(gt.len()) as f64
}
