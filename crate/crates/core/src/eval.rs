//! End-to-end grounded-caption evaluation over record streams.
//!
//! Ground truth captions must parse strictly; predictions are parsed in
//! tolerant mode so malformed model output still yields a score instead of
//! aborting the run. Images without a prediction are scored against an
//! empty caption. Per-image work runs on a rayon pool, and every aggregate
//! is folded in sorted image-id order so results do not depend on the
//! worker count.

use crate::cider::{cider, IdfTable};
use crate::grounded::{
    bind_masks, bind_masks_tolerant, parse_grounded, FormatError, GroundedCaption, ParseMode,
};
use crate::meteor::meteor;
use crate::metrics::{ap50, mask_recall, miou_gcg, ApImage, MatchDetail};
use crate::record::GcgRecord;
use crate::textsim::TextSimProvider;
use serde::Serialize;
use std::collections::BTreeMap;
use std::fmt::Write as _;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MetricSelection {
    pub meteor: bool,
    pub cider: bool,
    pub ap50: bool,
    pub miou: bool,
    pub recall: bool,
}

impl Default for MetricSelection {
    fn default() -> Self {
        MetricSelection { meteor: true, cider: true, ap50: true, miou: true, recall: true }
    }
}

impl MetricSelection {
    /// Parses a comma list such as `meteor,cider`; `all` selects everything.
    pub fn from_list(list: &str) -> Result<Self, String> {
        let mut sel =
            MetricSelection { meteor: false, cider: false, ap50: false, miou: false, recall: false };
        for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match name.to_ascii_lowercase().as_str() {
                "all" => sel = MetricSelection::default(),
                "meteor" => sel.meteor = true,
                "cider" | "cider-d" => sel.cider = true,
                "ap50" => sel.ap50 = true,
                "miou" => sel.miou = true,
                "recall" => sel.recall = true,
                other => return Err(format!("unknown metric {other:?}")),
            }
        }
        Ok(sel)
    }
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub iou_thresh: f64,
    pub sim_thresh: f64,
    /// Worker threads for per-image scoring; `None` uses the global pool.
    pub workers: Option<usize>,
    pub metrics: MetricSelection,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresh: crate::metrics::DEFAULT_IOU_THRESH,
            sim_thresh: crate::metrics::DEFAULT_SIM_THRESH,
            workers: None,
            metrics: MetricSelection::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("prediction references unknown image_id {image_id:?}")]
    UnknownImageId { image_id: String },
    #[error("record {image_id:?}: {detail}")]
    Schema { image_id: String, detail: String },
    #[error("ground truth {image_id:?}: caption does not parse: {source}")]
    GroundTruthCaption { image_id: String, source: FormatError },
    #[error("{0}")]
    Internal(String),
}

#[derive(Debug, Clone, Serialize)]
pub struct PerImageEval {
    pub image_id: String,
    pub n_pred: usize,
    pub n_gt: usize,
    pub tp: usize,
    pub fp: usize,
    pub missed: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub meteor: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cider: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub miou: Option<f64>,
    /// Masks discarded while aligning a malformed prediction caption.
    pub dropped_masks: usize,
    #[serde(skip)]
    pub matches: Vec<MatchDetail>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GcgEvalReport {
    pub n_images: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub meteor: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cider: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ap50: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub miou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recall: Option<f64>,
    pub total_tp: usize,
    pub total_fp: usize,
    pub total_gt: usize,
    pub per_image: Vec<PerImageEval>,
}

impl GcgEvalReport {
    /// Plain-text summary, one metric per line.
    pub fn to_text_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<10} {}", "images", self.n_images);
        let mut row = |name: &str, v: Option<f64>| {
            if let Some(v) = v {
                let _ = writeln!(out, "{name:<10} {v:.4}");
            }
        };
        row("METEOR", self.meteor);
        row("CIDEr", self.cider);
        row("AP50", self.ap50);
        row("mIoU", self.miou);
        row("recall", self.recall);
        out
    }
}

/// One image's inputs after parsing and mask binding.
struct ImageCase {
    image_id: String,
    gt: GroundedCaption,
    pred: GroundedCaption,
    pred_scores: Vec<f64>,
    dropped_masks: usize,
}

fn bind_gt(record: &GcgRecord) -> Result<GroundedCaption, EvalError> {
    let parsed = parse_grounded(&record.caption_raw, ParseMode::Strict).map_err(|source| {
        EvalError::GroundTruthCaption { image_id: record.image_id.clone(), source }
    })?;
    bind_masks(&parsed, record.masks.clone(), None).map_err(|e| EvalError::Schema {
        image_id: record.image_id.clone(),
        detail: e.to_string(),
    })
}

fn bind_pred(record: &GcgRecord) -> Result<(GroundedCaption, usize), EvalError> {
    let parsed = parse_grounded(&record.caption_raw, ParseMode::Tolerant)
        .expect("tolerant parsing cannot fail");
    let (caption, diag) = bind_masks_tolerant(&parsed, record.masks.clone(), record.scores.clone())
        .map_err(|e| EvalError::Schema {
            image_id: record.image_id.clone(),
            detail: e.to_string(),
        })?;
    Ok((caption, diag.dropped_masks))
}

fn empty_caption() -> GroundedCaption {
    GroundedCaption::new(String::new(), Vec::new(), Vec::new(), None)
        .expect("empty caption is valid")
}

fn index_records<'a>(
    records: &'a [GcgRecord],
    what: &str,
) -> Result<BTreeMap<&'a str, &'a GcgRecord>, EvalError> {
    let mut map = BTreeMap::new();
    for r in records {
        r.validate_structure().map_err(|detail| EvalError::Schema {
            image_id: r.image_id.clone(),
            detail,
        })?;
        if map.insert(r.image_id.as_str(), r).is_some() {
            return Err(EvalError::Schema {
                image_id: r.image_id.clone(),
                detail: format!("duplicate image_id in {what} stream"),
            });
        }
    }
    Ok(map)
}

/// Scores predictions against ground truth and aggregates the full report.
pub fn evaluate_gcg(
    gt_records: &[GcgRecord],
    pred_records: &[GcgRecord],
    text_sim: &dyn TextSimProvider,
    cfg: &EvalConfig,
) -> Result<GcgEvalReport, EvalError> {
    let gt_map = index_records(gt_records, "ground truth")?;
    let pred_map = index_records(pred_records, "prediction")?;
    for id in pred_map.keys() {
        if !gt_map.contains_key(id) {
            return Err(EvalError::UnknownImageId { image_id: (*id).to_string() });
        }
    }

    // BTreeMap iteration fixes the image order for every aggregate below.
    let mut cases = Vec::with_capacity(gt_map.len());
    for (id, gt_rec) in &gt_map {
        let gt = bind_gt(gt_rec)?;
        let (pred, pred_scores, dropped_masks) = match pred_map.get(id) {
            Some(pred_rec) => {
                if pred_rec.width != gt_rec.width || pred_rec.height != gt_rec.height {
                    return Err(EvalError::Schema {
                        image_id: (*id).to_string(),
                        detail: format!(
                            "prediction grid {}x{} does not match ground truth {}x{}",
                            pred_rec.width, pred_rec.height, gt_rec.width, gt_rec.height
                        ),
                    });
                }
                let (caption, dropped) = bind_pred(pred_rec)?;
                let scores =
                    caption.scores.clone().unwrap_or_else(|| vec![1.0; caption.masks.len()]);
                (caption, scores, dropped)
            }
            None => (empty_caption(), Vec::new(), 0),
        };
        cases.push(ImageCase { image_id: (*id).to_string(), gt, pred, pred_scores, dropped_masks });
    }

    let idf = if cfg.metrics.cider {
        let refs: Vec<Vec<String>> = cases.iter().map(|c| vec![c.gt.plain_text.clone()]).collect();
        Some(IdfTable::build(&refs))
    } else {
        None
    };

    // Record grids were validated above, so mask comparisons cannot fail on
    // dimensions; anything else would be a bug worth a loud stop.
    let score_one = |case: &ImageCase| -> PerImageEval {
        let n_pred = case.pred.masks.len();
        let n_gt = case.gt.masks.len();
        let (tp, fp, missed, matches) = if cfg.metrics.recall {
            let outcome = mask_recall(&case.pred, &case.gt, text_sim, cfg.iou_thresh, cfg.sim_thresh)
                .expect("grids validated before scoring");
            (outcome.tp, outcome.fp, outcome.missed, outcome.matches)
        } else {
            (0, 0, 0, Vec::new())
        };
        let miou = cfg
            .metrics
            .miou
            .then(|| miou_gcg(&case.pred, &case.gt).expect("grids validated before scoring"));
        let met = cfg
            .metrics
            .meteor
            .then(|| meteor(&case.pred.plain_text, &[case.gt.plain_text.clone()]));
        PerImageEval {
            image_id: case.image_id.clone(),
            n_pred,
            n_gt,
            tp,
            fp,
            missed,
            meteor: met,
            cider: None,
            miou,
            dropped_masks: case.dropped_masks,
            matches,
        }
    };

    let run = || -> Vec<PerImageEval> {
        use rayon::prelude::*;
        cases.par_iter().map(score_one).collect()
    };
    let mut per_image = match cfg.workers {
        Some(w) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(w.max(1))
                .build()
                .map_err(|e| EvalError::Internal(format!("thread pool: {e}")))?;
            pool.install(run)
        }
        None => run(),
    };

    let cider_mean = idf.map(|idf| {
        let candidates: Vec<String> = cases.iter().map(|c| c.pred.plain_text.clone()).collect();
        let references: Vec<Vec<String>> =
            cases.iter().map(|c| vec![c.gt.plain_text.clone()]).collect();
        let scores = cider(&candidates, &references, &idf);
        for (entry, s) in per_image.iter_mut().zip(&scores.per_image) {
            entry.cider = Some(*s);
        }
        scores.mean
    });

    let ap = if cfg.metrics.ap50 {
        let images: Vec<ApImage> = cases
            .iter()
            .map(|c| ApImage {
                pred_masks: c.pred.masks.clone(),
                pred_scores: c.pred_scores.clone(),
                gt_masks: c.gt.masks.clone(),
            })
            .collect();
        Some(ap50(&images).expect("grids validated before scoring"))
    } else {
        None
    };

    let n_images = per_image.len();
    let mean_of = |f: &dyn Fn(&PerImageEval) -> Option<f64>| -> Option<f64> {
        if n_images == 0 {
            return None;
        }
        let mut sum = 0.0;
        for e in &per_image {
            sum += f(e)?;
        }
        Some(sum / n_images as f64)
    };

    let total_tp: usize = per_image.iter().map(|e| e.tp).sum();
    let total_fp: usize = per_image.iter().map(|e| e.fp).sum();
    let total_gt: usize = per_image.iter().map(|e| e.n_gt).sum();
    let total_pred: usize = per_image.iter().map(|e| e.n_pred).sum();
    let recall = cfg.metrics.recall.then(|| {
        if total_gt == 0 {
            if total_pred == 0 {
                1.0
            } else {
                0.0
            }
        } else {
            total_tp as f64 / total_gt as f64
        }
    });

    Ok(GcgEvalReport {
        n_images,
        meteor: if cfg.metrics.meteor { mean_of(&|e| e.meteor) } else { None },
        cider: cider_mean,
        ap50: ap,
        miou: if cfg.metrics.miou { mean_of(&|e| e.miou) } else { None },
        recall,
        total_tp,
        total_fp,
        total_gt,
        per_image,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{mask_from_box, BBox, BinaryMask};
    use crate::textsim::LexicalSim;

    fn rect(w: u32, h: u32, x0: u32, y0: u32, x1: u32, y1: u32) -> BinaryMask {
        mask_from_box(&BBox::new(x0, y0, x1, y1).unwrap(), w, h).unwrap()
    }

    fn record(id: &str, caption: &str, masks: Vec<BinaryMask>) -> GcgRecord {
        GcgRecord {
            image_id: id.into(),
            width: 16,
            height: 16,
            caption_raw: caption.into(),
            masks,
            scores: None,
            split: None,
            flags: vec![],
        }
    }

    fn self_match_corpus() -> Vec<GcgRecord> {
        vec![
            record(
                "a",
                "<p>a dog</p><SEG> chases <p>a ball</p><SEG>",
                vec![rect(16, 16, 0, 0, 8, 8), rect(16, 16, 8, 8, 16, 16)],
            ),
            record("b", "<p>a cat</p><SEG> sleeps on a mat", vec![rect(16, 16, 2, 2, 10, 10)]),
        ]
    }

    #[test]
    fn perfect_predictions_score_perfectly() {
        let gt = self_match_corpus();
        let report = evaluate_gcg(&gt, &gt, &LexicalSim, &EvalConfig::default()).unwrap();
        assert_eq!(report.n_images, 2);
        // image a: 5 tokens, one chunk; image b: 6 tokens, one chunk
        let want_meteor = ((1.0 - 0.5 / 125.0) + (1.0 - 0.5 / 216.0)) / 2.0;
        assert!((report.meteor.unwrap() - want_meteor).abs() < 1e-9);
        assert!((report.cider.unwrap() - 10.0).abs() < 1e-9);
        assert_eq!(report.ap50.unwrap(), 1.0);
        assert_eq!(report.miou.unwrap(), 1.0);
        assert_eq!(report.recall.unwrap(), 1.0);
        assert_eq!(report.total_fp, 0);
    }

    #[test]
    fn missing_prediction_scores_as_empty() {
        let gt = self_match_corpus();
        let pred = vec![gt[0].clone()];
        let report = evaluate_gcg(&gt, &pred, &LexicalSim, &EvalConfig::default()).unwrap();
        assert_eq!(report.n_images, 2);
        assert!((report.recall.unwrap() - 2.0 / 3.0).abs() < 1e-12);
        let b = report.per_image.iter().find(|e| e.image_id == "b").unwrap();
        assert_eq!(b.n_pred, 0);
        assert_eq!(b.missed, 1);
        assert_eq!(b.meteor, Some(0.0));
        assert_eq!(b.cider, Some(0.0));
        assert_eq!(b.miou, Some(0.0));
    }

    #[test]
    fn unknown_prediction_id_is_an_error() {
        let gt = self_match_corpus();
        let pred = vec![record("zz", "hi", vec![])];
        let err = evaluate_gcg(&gt, &pred, &LexicalSim, &EvalConfig::default()).unwrap_err();
        assert!(matches!(err, EvalError::UnknownImageId { image_id } if image_id == "zz"));
    }

    #[test]
    fn malformed_gt_caption_is_an_error() {
        let gt = vec![record("a", "<p>open", vec![])];
        let err = evaluate_gcg(&gt, &[], &LexicalSim, &EvalConfig::default()).unwrap_err();
        assert!(matches!(err, EvalError::GroundTruthCaption { .. }), "{err}");
    }

    #[test]
    fn malformed_pred_caption_is_tolerated() {
        let gt = vec![record("a", "<p>a dog</p><SEG>", vec![rect(16, 16, 0, 0, 8, 8)])];
        // dangling SEG up front; its mask is dropped, the real one binds
        let pred = vec![GcgRecord {
            scores: Some(vec![0.2, 0.9]),
            ..record(
                "a",
                "<SEG> <p>a dog</p><SEG>",
                vec![rect(16, 16, 4, 4, 6, 6), rect(16, 16, 0, 0, 8, 8)],
            )
        }];
        let report = evaluate_gcg(&gt, &pred, &LexicalSim, &EvalConfig::default()).unwrap();
        assert_eq!(report.recall.unwrap(), 1.0);
        assert_eq!(report.per_image[0].dropped_masks, 1);
        assert_eq!(report.per_image[0].n_pred, 1);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let gt = vec![record("a", "hi", vec![]), record("a", "hi again", vec![])];
        let err = evaluate_gcg(&gt, &[], &LexicalSim, &EvalConfig::default()).unwrap_err();
        assert!(matches!(err, EvalError::Schema { .. }), "{err}");
    }

    #[test]
    fn grid_mismatch_between_streams_rejected() {
        let gt = self_match_corpus();
        let mut pred = vec![gt[0].clone()];
        pred[0].width = 32;
        pred[0].masks = vec![rect(32, 16, 0, 0, 8, 8), rect(32, 16, 8, 8, 16, 16)];
        let err = evaluate_gcg(&gt, &pred, &LexicalSim, &EvalConfig::default()).unwrap_err();
        assert!(matches!(err, EvalError::Schema { .. }), "{err}");
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let gt = self_match_corpus();
        let mut pred = self_match_corpus();
        pred[0].caption_raw = "<p>a dog</p><SEG> runs from <p>a cat</p><SEG>".into();
        let base = evaluate_gcg(&gt, &pred, &LexicalSim, &EvalConfig::default()).unwrap();
        for workers in [1usize, 4, 16] {
            let cfg = EvalConfig { workers: Some(workers), ..EvalConfig::default() };
            let r = evaluate_gcg(&gt, &pred, &LexicalSim, &cfg).unwrap();
            assert_eq!(r.meteor.unwrap().to_bits(), base.meteor.unwrap().to_bits());
            assert_eq!(r.cider.unwrap().to_bits(), base.cider.unwrap().to_bits());
            assert_eq!(r.ap50.unwrap().to_bits(), base.ap50.unwrap().to_bits());
            assert_eq!(r.miou.unwrap().to_bits(), base.miou.unwrap().to_bits());
            assert_eq!(r.recall.unwrap().to_bits(), base.recall.unwrap().to_bits());
        }
    }

    #[test]
    fn metric_selection_skips_unselected() {
        let gt = self_match_corpus();
        let cfg = EvalConfig {
            metrics: MetricSelection::from_list("meteor").unwrap(),
            ..EvalConfig::default()
        };
        let report = evaluate_gcg(&gt, &gt, &LexicalSim, &cfg).unwrap();
        assert!(report.meteor.is_some());
        assert!(report.cider.is_none());
        assert!(report.ap50.is_none());
        assert!(report.miou.is_none());
        assert!(report.recall.is_none());
    }

    #[test]
    fn text_table_lists_selected_metrics() {
        let gt = self_match_corpus();
        let report = evaluate_gcg(&gt, &gt, &LexicalSim, &EvalConfig::default()).unwrap();
        let table = report.to_text_table();
        for name in ["images", "METEOR", "CIDEr", "AP50", "mIoU", "recall"] {
            assert!(table.contains(name), "missing {name} in:\n{table}");
        }
    }
}
