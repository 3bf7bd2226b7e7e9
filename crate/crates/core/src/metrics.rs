//! Segmentation metrics: region similarity J, boundary accuracy F, their
//! mean G, MAE, and max F-measure over thresholds.

use crate::error::MetricError;
use crate::mask::BinaryMask;
use crate::tensor::Tensor;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Per-frame region and boundary scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameScore {
    pub j: f32,
    pub f: f32,
}

/// Aggregated sequence scores; `g` is exactly `(j + f) / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceReport {
    pub frames: Vec<FrameScore>,
    pub j: f32,
    pub f: f32,
    pub g: f32,
    pub mae: Option<f32>,
    pub f_beta_max: Option<f32>,
}

fn check_dims(a: (usize, usize), b: (usize, usize)) -> Result<(), MetricError> {
    if a != b {
        return Err(MetricError::DimMismatch { left: a, right: b });
    }
    Ok(())
}

/// Intersection over union; 1.0 when both masks are empty.
pub fn region_similarity(pred: &BinaryMask, gt: &BinaryMask) -> Result<f32, MetricError> {
    check_dims(pred.dims(), gt.dims())?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        inter += usize::from(p == 1 && g == 1);
        union += usize::from(p == 1 || g == 1);
    }
    Ok(if union == 0 { 1.0 } else { inter as f32 / union as f32 })
}

/// Foreground pixels with a background 4-neighbor (the image border counts
/// as background).
pub fn boundary_pixels(mask: &BinaryMask) -> Vec<(usize, usize)> {
    let (h, w) = mask.dims();
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) != 1 {
                continue;
            }
            let edge = y == 0
                || x == 0
                || y == h - 1
                || x == w - 1
                || mask.get(y - 1, x) == 0
                || mask.get(y + 1, x) == 0
                || mask.get(y, x - 1) == 0
                || mask.get(y, x + 1) == 0;
            if edge {
                out.push((y, x));
            }
        }
    }
    out
}

fn dilate(points: &[(usize, usize)], h: usize, w: usize, tol: usize) -> Vec<bool> {
    let mut grid = vec![false; h * w];
    let t = tol as isize;
    for &(y, x) in points {
        for dy in -t..=t {
            let yy = y as isize + dy;
            if yy < 0 || yy >= h as isize {
                continue;
            }
            for dx in -t..=t {
                let xx = x as isize + dx;
                if xx < 0 || xx >= w as isize {
                    continue;
                }
                grid[yy as usize * w + xx as usize] = true;
            }
        }
    }
    grid
}

/// DAVIS-style default tolerance: 0.8% of the image diagonal, rounded up.
pub fn default_boundary_tol(h: usize, w: usize) -> usize {
    let diag = ((h * h + w * w) as f64).sqrt();
    (0.008 * diag).ceil() as usize
}

/// Boundary F-measure: precision/recall of boundary pixels matched within
/// Chebyshev distance `tol_px`. Both masks empty gives 1; an empty boundary
/// on exactly one side gives 0.
pub fn boundary_f(pred: &BinaryMask, gt: &BinaryMask, tol_px: usize) -> Result<f32, MetricError> {
    check_dims(pred.dims(), gt.dims())?;
    if pred.is_empty_mask() && gt.is_empty_mask() {
        return Ok(1.0);
    }
    let (h, w) = pred.dims();
    let pb = boundary_pixels(pred);
    let gb = boundary_pixels(gt);
    if pb.is_empty() || gb.is_empty() {
        return Ok(0.0);
    }
    let gt_zone = dilate(&gb, h, w, tol_px);
    let pred_zone = dilate(&pb, h, w, tol_px);
    let matched_p = pb.iter().filter(|&&(y, x)| gt_zone[y * w + x]).count();
    let matched_g = gb.iter().filter(|&&(y, x)| pred_zone[y * w + x]).count();
    let precision = matched_p as f32 / pb.len() as f32;
    let recall = matched_g as f32 / gb.len() as f32;
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Mean absolute error between a [0,1] probability map and a binary target.
pub fn mae(pred_prob: &Tensor, gt: &BinaryMask) -> Result<f32, MetricError> {
    let [h, w] = *pred_prob.shape() else {
        return Err(MetricError::DimMismatch {
            left: (pred_prob.numel(), 0),
            right: gt.dims(),
        });
    };
    check_dims((h, w), gt.dims())?;
    let sum: f64 = pred_prob
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| f64::from((p - g as f32).abs()))
        .sum();
    Ok((sum / (h * w) as f64) as f32)
}

pub const F_BETA_SQUARED: f32 = 0.3;

/// Maximum F-beta over 255 uniform thresholds `k/255`, `k = 0..255`, with
/// the prediction binarized as `prob > threshold`.
pub fn f_beta_max(pred_prob: &Tensor, gt: &BinaryMask) -> Result<f32, MetricError> {
    let [h, w] = *pred_prob.shape() else {
        return Err(MetricError::DimMismatch {
            left: (pred_prob.numel(), 0),
            right: gt.dims(),
        });
    };
    check_dims((h, w), gt.dims())?;
    let eval_threshold = |k: usize| -> f32 {
        let thr = k as f32 / 255.0;
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fn_ = 0usize;
        for (&p, &g) in pred_prob.data().iter().zip(gt.data()) {
            let pos = p > thr;
            match (pos, g == 1) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        let precision = if tp + fp == 0 { 0.0 } else { tp as f32 / (tp + fp) as f32 };
        let recall = if tp + fn_ == 0 { 0.0 } else { tp as f32 / (tp + fn_) as f32 };
        let denom = F_BETA_SQUARED * precision + recall;
        if denom == 0.0 {
            0.0
        } else {
            (1.0 + F_BETA_SQUARED) * precision * recall / denom
        }
    };
    #[cfg(feature = "parallel")]
    let best = (0..255usize)
        .into_par_iter()
        .map(eval_threshold)
        .reduce(|| 0.0, f32::max);
    #[cfg(not(feature = "parallel"))]
    let best = (0..255usize).map(eval_threshold).fold(0.0, f32::max);
    Ok(best)
}

/// Scores a frame sequence; the boundary tolerance defaults to
/// [`default_boundary_tol`] when not given.
pub fn evaluate_sequence(
    preds: &[BinaryMask],
    gts: &[BinaryMask],
    tol_px: Option<usize>,
) -> Result<SequenceReport, MetricError> {
    assert_eq!(preds.len(), gts.len(), "frame count mismatch");
    let mut frames = Vec::with_capacity(preds.len());
    for (p, g) in preds.iter().zip(gts) {
        let (h, w) = g.dims();
        let tol = tol_px.unwrap_or_else(|| default_boundary_tol(h, w));
        frames.push(FrameScore {
            j: region_similarity(p, g)?,
            f: boundary_f(p, g, tol)?,
        });
    }
    let n = frames.len().max(1) as f32;
    let j = frames.iter().map(|s| s.j).sum::<f32>() / n;
    let f = frames.iter().map(|s| s.f).sum::<f32>() / n;
    Ok(SequenceReport {
        frames,
        j,
        f,
        g: (j + f) / 2.0,
        mae: None,
        f_beta_max: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(h: usize, w: usize, y0: usize, x0: usize, side: usize) -> BinaryMask {
        let mut m = BinaryMask::zeros(h, w);
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                m.set(y, x, 1);
            }
        }
        m
    }

    #[test]
    fn j_identity_disjoint_overlap() {
        let a = square(20, 20, 2, 2, 10);
        assert_eq!(region_similarity(&a, &a).unwrap(), 1.0);

        let b = square(20, 20, 2, 14, 4);
        let c = square(20, 20, 14, 2, 4);
        assert_eq!(region_similarity(&b, &c).unwrap(), 0.0);

        // two 10x10 squares overlapping 5 columns: 50 / 150
        let p = square(30, 30, 5, 5, 10);
        let g = square(30, 30, 5, 10, 10);
        let j = region_similarity(&p, &g).unwrap();
        assert!((j - 1.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn j_empty_conventions() {
        let e = BinaryMask::zeros(8, 8);
        assert_eq!(region_similarity(&e, &e).unwrap(), 1.0);
        let f = square(8, 8, 1, 1, 3);
        assert_eq!(region_similarity(&e, &f).unwrap(), 0.0);
    }

    #[test]
    fn j_symmetric() {
        let p = square(16, 16, 2, 2, 8);
        let g = square(16, 16, 4, 4, 8);
        assert_eq!(
            region_similarity(&p, &g).unwrap(),
            region_similarity(&g, &p).unwrap()
        );
    }

    #[test]
    fn boundary_f_identity_and_empty() {
        let m = square(20, 20, 3, 3, 9);
        assert_eq!(boundary_f(&m, &m, 1).unwrap(), 1.0);
        let e = BinaryMask::zeros(20, 20);
        assert_eq!(boundary_f(&e, &m, 1).unwrap(), 0.0);
        assert_eq!(boundary_f(&e, &e, 1).unwrap(), 1.0);
    }

    /// Exhaustive per-pixel matcher used as the oracle.
    fn brute_force_f(p: &BinaryMask, g: &BinaryMask, tol: isize) -> f32 {
        let pb = boundary_pixels(p);
        let gb = boundary_pixels(g);
        let within = |a: (usize, usize), b: (usize, usize)| {
            (a.0 as isize - b.0 as isize).abs() <= tol && (a.1 as isize - b.1 as isize).abs() <= tol
        };
        let mp = pb.iter().filter(|a| gb.iter().any(|b| within(**a, *b))).count();
        let mg = gb.iter().filter(|b| pb.iter().any(|a| within(*a, **b))).count();
        let prec = mp as f32 / pb.len() as f32;
        let rec = mg as f32 / gb.len() as f32;
        if prec + rec == 0.0 {
            0.0
        } else {
            2.0 * prec * rec / (prec + rec)
        }
    }

    #[test]
    fn boundary_f_shifted_square_matches_bruteforce() {
        // 1 px shift at tol 1: every boundary pixel has a counterpart
        let p = square(24, 24, 5, 5, 8);
        let g1 = square(24, 24, 5, 6, 8);
        let got1 = boundary_f(&p, &g1, 1).unwrap();
        assert!((got1 - brute_force_f(&p, &g1, 1)).abs() < 1e-6);
        assert_eq!(got1, 1.0);

        // 2 px shift at tol 1: the vertical edges fall out of tolerance
        let g2 = square(24, 24, 5, 7, 8);
        let got2 = boundary_f(&p, &g2, 1).unwrap();
        assert!((got2 - brute_force_f(&p, &g2, 1)).abs() < 1e-6);
        assert!(got2 < 1.0);

        // tol 0 demands exact overlap
        let got0 = boundary_f(&p, &g1, 0).unwrap();
        assert!((got0 - brute_force_f(&p, &g1, 0)).abs() < 1e-6);
        assert!(got0 < 1.0);
    }

    #[test]
    fn boundary_f_swaps_precision_recall() {
        let p = square(24, 24, 5, 5, 8);
        let g = square(24, 24, 6, 6, 9);
        let a = boundary_f(&p, &g, 1).unwrap();
        let b = boundary_f(&g, &p, 1).unwrap();
        assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn mae_identities() {
        let g = square(10, 10, 2, 2, 5);
        assert_eq!(mae(&g.to_tensor(), &g).unwrap(), 0.0);
        let inv = Tensor::new(
            vec![10, 10],
            g.to_tensor().data().iter().map(|v| 1.0 - v).collect(),
        )
        .unwrap();
        assert_eq!(mae(&inv, &g).unwrap(), 1.0);
        let half = Tensor::full(&[10, 10], 0.5);
        assert_eq!(mae(&half, &g).unwrap(), 0.5);
    }

    #[test]
    fn f_beta_max_perfect_and_uniform() {
        let g = square(10, 10, 0, 0, 7);
        assert!((f_beta_max(&g.to_tensor(), &g).unwrap() - 1.0).abs() < 1e-9);

        // uniform 0.5 prediction with half-foreground gt: exhaustive oracle
        let mut gt = BinaryMask::zeros(4, 4);
        for x in 0..4 {
            for y in 0..2 {
                gt.set(y, x, 1);
            }
        }
        let pred = Tensor::full(&[4, 4], 0.5);
        let got = f_beta_max(&pred, &gt).unwrap();
        let mut want = 0.0f32;
        for k in 0..255 {
            let thr = k as f32 / 255.0;
            let pos_all = 0.5 > thr;
            let (tp, fp) = if pos_all { (8.0, 8.0) } else { (0.0, 0.0) };
            let p = if tp + fp == 0.0 { 0.0 } else { tp / (tp + fp) };
            let r = if pos_all { 1.0 } else { 0.0 };
            let denom = 0.3 * p + r;
            if denom > 0.0 {
                want = want.max(1.3 * p * r / denom);
            }
        }
        assert!((got - want).abs() < 1e-6);
    }

    #[test]
    fn f_beta_max_invariant_to_bin_preserving_monotone_maps() {
        let g = square(12, 12, 3, 3, 6);
        let prob = Tensor::from_fn(&[12, 12], |i| ((i * 13) % 200) as f32 / 255.0);
        let base = f_beta_max(&prob, &g).unwrap();
        // strictly increasing map that keeps every value within its
        // threshold bin: v -> v + 0.4/255 keeps v > k/255 relations intact
        let shifted = Tensor::new(
            prob.shape().to_vec(),
            prob.data().iter().map(|&v| v + 0.4 / 255.0).collect(),
        )
        .unwrap();
        let mapped = f_beta_max(&shifted, &g).unwrap();
        assert!((base - mapped).abs() < 1e-6);
    }

    #[test]
    fn sequence_report_g_is_mean() {
        let p = square(16, 16, 2, 2, 8);
        let g = square(16, 16, 3, 3, 8);
        let rep = evaluate_sequence(&[p.clone(), g.clone()], &[g.clone(), g], None).unwrap();
        assert!((rep.g - (rep.j + rep.f) / 2.0).abs() < 1e-7);
        assert_eq!(rep.frames.len(), 2);
        assert!(rep.frames[1].j == 1.0 && rep.frames[1].f == 1.0);
    }

    #[test]
    fn default_tol_scaling() {
        assert_eq!(default_boundary_tol(64, 64), 1);
        assert_eq!(default_boundary_tol(480, 854), 8);
    }
}
