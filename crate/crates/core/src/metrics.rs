//! Grounding metrics over matched mask sets.
//!
//! Predictions and ground truth are paired by optimal assignment on mask
//! IoU (never greedily), then judged per pair. A pair is a true positive
//! only when mask IoU exceeds the mask threshold AND phrase similarity
//! exceeds the text threshold, both strictly; a well-localized mask with
//! the wrong phrase is a false positive, and so is a well-phrased mask in
//! the wrong place.

use crate::assignment::{optimal_assignment, AssignmentResult};
use crate::grounded::GroundedCaption;
use crate::mask::{mask_iou, mask_overlap, BinaryMask, MaskError};
use crate::textsim::TextSimProvider;

pub const DEFAULT_IOU_THRESH: f64 = 0.5;
pub const DEFAULT_SIM_THRESH: f64 = 0.5;

/// IoU matrix (rows = predictions, columns = ground truth).
pub fn iou_matrix(pred: &[BinaryMask], gt: &[BinaryMask]) -> Result<Vec<Vec<f64>>, MaskError> {
    pred.iter()
        .map(|p| gt.iter().map(|g| mask_iou(p, g)).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchDetail {
    pub pred: usize,
    pub gt: usize,
    pub iou: f64,
    pub text_sim: f64,
    pub is_tp: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecallOutcome {
    pub tp: usize,
    pub fp: usize,
    pub missed: usize,
    pub n_pred: usize,
    pub n_gt: usize,
    pub recall: f64,
    pub matches: Vec<MatchDetail>,
}

/// Two-tier grounded recall for one image.
///
/// With no ground-truth masks, an empty prediction scores 1 and a non-empty
/// one 0.
pub fn mask_recall(
    pred: &GroundedCaption,
    gt: &GroundedCaption,
    provider: &dyn TextSimProvider,
    iou_thresh: f64,
    sim_thresh: f64,
) -> Result<RecallOutcome, MaskError> {
    let matrix = iou_matrix(&pred.masks, &gt.masks)?;
    let assignment = optimal_assignment(&matrix);
    let mut matches = Vec::with_capacity(assignment.pairs.len());
    let mut tp = 0usize;
    for &(p, g, iou) in &assignment.pairs {
        let text_sim = provider.sim(&pred.spans[p].phrase, &gt.spans[g].phrase);
        let is_tp = iou > iou_thresh && text_sim > sim_thresh;
        if is_tp {
            tp += 1;
        }
        matches.push(MatchDetail { pred: p, gt: g, iou, text_sim, is_tp });
    }
    let n_pred = pred.masks.len();
    let n_gt = gt.masks.len();
    let recall = if n_gt == 0 {
        if n_pred == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        tp as f64 / n_gt as f64
    };
    Ok(RecallOutcome { tp, fp: n_pred - tp, missed: n_gt - tp, n_pred, n_gt, recall, matches })
}

/// Mean IoU over ground-truth masks for one image: each gt mask contributes
/// its assigned prediction's IoU, or 0 if nothing was assigned to it. Same
/// empty-side conventions as [`mask_recall`].
pub fn miou_gcg(pred: &GroundedCaption, gt: &GroundedCaption) -> Result<f64, MaskError> {
    let n_gt = gt.masks.len();
    if n_gt == 0 {
        return Ok(if pred.masks.is_empty() { 1.0 } else { 0.0 });
    }
    let matrix = iou_matrix(&pred.masks, &gt.masks)?;
    let assignment: AssignmentResult = optimal_assignment(&matrix);
    let sum: f64 = assignment.pairs.iter().map(|&(_, _, iou)| iou).sum();
    Ok(sum / n_gt as f64)
}

/// Predictions and ground truth of one image, for AP computation.
#[derive(Debug, Clone)]
pub struct ApImage {
    pub pred_masks: Vec<BinaryMask>,
    /// One score per prediction; use 1.0 where the source had none.
    pub pred_scores: Vec<f64>,
    pub gt_masks: Vec<BinaryMask>,
}

/// Class-agnostic average precision at IoU 0.5 over a whole corpus.
///
/// Predictions are ranked corpus-wide by descending score (ties: image
/// order, then position within the image) and each is greedily matched to
/// the highest-IoU still-unmatched gt mask of its image; a match needs
/// IoU >= 0.5. AP is the mean of interpolated precision at the 101 recall
/// points 0.00, 0.01, ..., 1.00.
///
/// A corpus without gt masks scores 1.0 if it also has no predictions,
/// otherwise 0.0.
pub fn ap50(images: &[ApImage]) -> Result<f64, MaskError> {
    let n_gt_total: usize = images.iter().map(|im| im.gt_masks.len()).sum();
    let n_pred_total: usize = images.iter().map(|im| im.pred_masks.len()).sum();
    if n_gt_total == 0 {
        return Ok(if n_pred_total == 0 { 1.0 } else { 0.0 });
    }
    // (image, seg) in input order, then stable sort: equal scores keep it.
    let mut ranked: Vec<(usize, usize)> = Vec::with_capacity(n_pred_total);
    for (i, im) in images.iter().enumerate() {
        assert_eq!(
            im.pred_masks.len(),
            im.pred_scores.len(),
            "one score per prediction required"
        );
        for s in 0..im.pred_masks.len() {
            ranked.push((i, s));
        }
    }
    ranked.sort_by(|&(ia, sa), &(ib, sb)| {
        images[ib].pred_scores[sb]
            .partial_cmp(&images[ia].pred_scores[sa])
            .expect("scores are not NaN")
            .then(ia.cmp(&ib))
            .then(sa.cmp(&sb))
    });
    let mut gt_used: Vec<Vec<bool>> = images.iter().map(|im| vec![false; im.gt_masks.len()]).collect();
    let mut tps: Vec<bool> = Vec::with_capacity(ranked.len());
    for &(i, s) in &ranked {
        let im = &images[i];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in im.gt_masks.iter().enumerate() {
            if gt_used[i][g] {
                continue;
            }
            let iou = mask_iou(&im.pred_masks[s], gt)?;
            let better = match best {
                None => true,
                Some((_, b)) => iou > b,
            };
            if better {
                best = Some((g, iou));
            }
        }
        match best {
            Some((g, iou)) if iou >= 0.5 => {
                gt_used[i][g] = true;
                tps.push(true);
            }
            _ => tps.push(false),
        }
    }
    // Precision/recall after each ranked prediction, then the interpolated
    // 101-point mean.
    let mut precisions = Vec::with_capacity(tps.len());
    let mut recalls = Vec::with_capacity(tps.len());
    let mut tp = 0usize;
    for (k, &is_tp) in tps.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        precisions.push(tp as f64 / (k + 1) as f64);
        recalls.push(tp as f64 / n_gt_total as f64);
    }
    for k in (1..precisions.len()).rev() {
        if precisions[k - 1] < precisions[k] {
            precisions[k - 1] = precisions[k];
        }
    }
    let mut acc = 0.0;
    for t in 0..=100 {
        let r = t as f64 / 100.0;
        let idx = recalls.partition_point(|&x| x < r);
        if idx < precisions.len() {
            acc += precisions[idx];
        }
    }
    Ok(acc / 101.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefSegReport {
    /// Cumulative IoU: total intersection over total union across pairs.
    pub ciou: f64,
    /// Mean of per-pair IoUs.
    pub giou: f64,
    pub n_pairs: usize,
}

/// Referring-segmentation aggregate over (pred, gt) mask pairs.
pub fn refseg_eval(pairs: &[(BinaryMask, BinaryMask)]) -> Result<RefSegReport, MaskError> {
    let mut inter_sum = 0u64;
    let mut union_sum = 0u64;
    let mut iou_sum = 0.0f64;
    for (p, g) in pairs {
        let (i, u) = mask_overlap(p, g)?;
        inter_sum += i;
        union_sum += u;
        iou_sum += if u == 0 { 0.0 } else { i as f64 / u as f64 };
    }
    let ciou = if union_sum == 0 { 0.0 } else { inter_sum as f64 / union_sum as f64 };
    let giou = if pairs.is_empty() { 0.0 } else { iou_sum / pairs.len() as f64 };
    Ok(RefSegReport { ciou, giou, n_pairs: pairs.len() })
}
