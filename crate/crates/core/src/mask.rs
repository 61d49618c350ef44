//! Binary mask geometry on a pixel grid.
//!
//! Masks are stored run-length encoded in the COCO convention: the grid is
//! scanned column-major (down column 0, then column 1, ...) and `runs`
//! alternate between 0-pixels and 1-pixels, starting with a 0-run. A mask
//! whose first pixel is set therefore starts with a zero-length 0-run, and
//! that is the only place a zero-length run may appear.
//!
//! Boxes are half-open: `x_max`/`y_max` are exclusive, so two boxes that
//! share an edge do not overlap and integer areas are exact.

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MaskError {
    #[error("run lengths sum to {got} but grid is {expected} pixels")]
    LengthMismatch { expected: u64, got: u64 },
    #[error("zero-length run at position {index} (only the first run may be 0)")]
    NonCanonicalRuns { index: usize },
    #[error("grid mismatch: {wa}x{ha} vs {wb}x{hb}")]
    DimensionMismatch { wa: u32, ha: u32, wb: u32, hb: u32 },
    #[error("box [{x_min},{y_min},{x_max},{y_max}) does not intersect a {width}x{height} image")]
    OutOfBounds { x_min: u32, y_min: u32, x_max: u32, y_max: u32, width: u32, height: u32 },
    #[error("degenerate box: ({x_min},{y_min})..({x_max},{y_max}) must have positive extent")]
    InvalidBox { x_min: u32, y_min: u32, x_max: u32, y_max: u32 },
    #[error("detection score {0} outside [0, 1]")]
    InvalidScore(f64),
    #[error("detection label must be non-empty")]
    EmptyLabel,
    #[error("grid buffer holds {got} pixels, expected {expected}")]
    GridSizeMismatch { expected: u64, got: u64 },
}

/// Run-length encoded binary mask. See the module docs for the scan order
/// and canonical-form rules.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RleWire", into = "RleWire")]
pub struct BinaryMask {
    width: u32,
    height: u32,
    runs: Vec<u32>,
}

/// JSON wire form: `{"size": [height, width], "counts": [...]}`.
#[derive(Serialize, Deserialize)]
struct RleWire {
    size: [u32; 2],
    counts: Vec<u32>,
}

impl From<BinaryMask> for RleWire {
    fn from(m: BinaryMask) -> Self {
        RleWire { size: [m.height, m.width], counts: m.runs }
    }
}

impl TryFrom<RleWire> for BinaryMask {
    type Error = MaskError;

    fn try_from(w: RleWire) -> Result<Self, MaskError> {
        BinaryMask::from_runs(w.size[1], w.size[0], w.counts)
    }
}

impl BinaryMask {
    /// Builds a mask from raw run lengths, validating canonical form.
    pub fn from_runs(width: u32, height: u32, runs: Vec<u32>) -> Result<Self, MaskError> {
        let expected = width as u64 * height as u64;
        let got: u64 = runs.iter().map(|&r| r as u64).sum();
        if got != expected {
            return Err(MaskError::LengthMismatch { expected, got });
        }
        for (i, &r) in runs.iter().enumerate() {
            if r == 0 && i != 0 {
                return Err(MaskError::NonCanonicalRuns { index: i });
            }
        }
        Ok(BinaryMask { width, height, runs })
    }

    /// Encodes a dense row-major grid (nonzero byte = set pixel).
    pub fn from_grid(width: u32, height: u32, grid: &[u8]) -> Result<Self, MaskError> {
        let expected = width as u64 * height as u64;
        if grid.len() as u64 != expected {
            return Err(MaskError::GridSizeMismatch { expected, got: grid.len() as u64 });
        }
        let mut runs = Vec::new();
        let mut current: u8 = 0;
        let mut run: u32 = 0;
        for x in 0..width {
            for y in 0..height {
                let v = (grid[(y as usize) * width as usize + x as usize] != 0) as u8;
                if v == current {
                    run += 1;
                } else {
                    runs.push(run);
                    current = v;
                    run = 1;
                }
            }
        }
        runs.push(run);
        if runs.len() == 1 && runs[0] == 0 {
            // 0x0 grid: keep a single empty 0-run for shape consistency.
            return Ok(BinaryMask { width, height, runs });
        }
        Ok(BinaryMask { width, height, runs })
    }

    /// Empty mask (no set pixels).
    pub fn empty(width: u32, height: u32) -> Self {
        BinaryMask { width, height, runs: vec![width * height] }
    }

    /// Decodes to a dense row-major grid of 0/1 bytes.
    pub fn to_grid(&self) -> Vec<u8> {
        let w = self.width as usize;
        let h = self.height as usize;
        let mut grid = vec![0u8; w * h];
        let mut pos: u64 = 0;
        for (i, &r) in self.runs.iter().enumerate() {
            if i % 2 == 1 {
                for flat in pos..pos + r as u64 {
                    let x = (flat / self.height as u64) as usize;
                    let y = (flat % self.height as u64) as usize;
                    grid[y * w + x] = 1;
                }
            }
            pos += r as u64;
        }
        grid
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn runs(&self) -> &[u32] {
        &self.runs
    }

    /// Count of set pixels (sum of the 1-runs).
    pub fn area(&self) -> u64 {
        self.runs.iter().skip(1).step_by(2).map(|&r| r as u64).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    fn check_dims(&self, other: &BinaryMask) -> Result<(), MaskError> {
        if self.width != other.width || self.height != other.height {
            return Err(MaskError::DimensionMismatch {
                wa: self.width,
                ha: self.height,
                wb: other.width,
                hb: other.height,
            });
        }
        Ok(())
    }
}

/// Walks two run lists in lockstep and returns the intersection pixel count.
fn run_intersection(a: &BinaryMask, b: &BinaryMask) -> u64 {
    let mut inter: u64 = 0;
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut rem_a = a.runs.first().copied().unwrap_or(0) as u64;
    let mut rem_b = b.runs.first().copied().unwrap_or(0) as u64;
    while ia < a.runs.len() && ib < b.runs.len() {
        if rem_a == 0 {
            ia += 1;
            if ia >= a.runs.len() {
                break;
            }
            rem_a = a.runs[ia] as u64;
            continue;
        }
        if rem_b == 0 {
            ib += 1;
            if ib >= b.runs.len() {
                break;
            }
            rem_b = b.runs[ib] as u64;
            continue;
        }
        let step = rem_a.min(rem_b);
        if ia % 2 == 1 && ib % 2 == 1 {
            inter += step;
        }
        rem_a -= step;
        rem_b -= step;
    }
    inter
}

/// Intersection and union pixel counts for two masks on the same grid.
pub fn mask_overlap(a: &BinaryMask, b: &BinaryMask) -> Result<(u64, u64), MaskError> {
    a.check_dims(b)?;
    let inter = run_intersection(a, b);
    let union = a.area() + b.area() - inter;
    Ok((inter, union))
}

/// IoU of two masks. Two empty masks have IoU 0 by convention, so an empty
/// prediction never matches an empty ground truth "for free".
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64, MaskError> {
    let (inter, union) = mask_overlap(a, b)?;
    if union == 0 {
        return Ok(0.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Pixel union of two masks, rebuilt in canonical run form.
pub fn mask_union(a: &BinaryMask, b: &BinaryMask) -> Result<BinaryMask, MaskError> {
    a.check_dims(b)?;
    let mut runs: Vec<u32> = Vec::new();
    let mut out_val: u8 = 0;
    let mut out_run: u64 = 0;
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut rem_a = a.runs.first().copied().unwrap_or(0) as u64;
    let mut rem_b = b.runs.first().copied().unwrap_or(0) as u64;
    while ia < a.runs.len() && ib < b.runs.len() {
        if rem_a == 0 {
            ia += 1;
            if ia >= a.runs.len() {
                break;
            }
            rem_a = a.runs[ia] as u64;
            continue;
        }
        if rem_b == 0 {
            ib += 1;
            if ib >= b.runs.len() {
                break;
            }
            rem_b = b.runs[ib] as u64;
            continue;
        }
        let step = rem_a.min(rem_b);
        let v = ((ia % 2 == 1) || (ib % 2 == 1)) as u8;
        if v == out_val {
            out_run += step;
        } else {
            runs.push(out_run as u32);
            out_val = v;
            out_run = step;
        }
        rem_a -= step;
        rem_b -= step;
    }
    runs.push(out_run as u32);
    BinaryMask::from_runs(a.width, a.height, runs)
}

/// Axis-aligned box with exclusive `x_max`/`y_max`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[u32; 4]", into = "[u32; 4]")]
pub struct BBox {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

impl From<BBox> for [u32; 4] {
    fn from(b: BBox) -> Self {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}

impl TryFrom<[u32; 4]> for BBox {
    type Error = MaskError;

    fn try_from(v: [u32; 4]) -> Result<Self, MaskError> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl BBox {
    pub fn new(x_min: u32, y_min: u32, x_max: u32, y_max: u32) -> Result<Self, MaskError> {
        if x_min >= x_max || y_min >= y_max {
            return Err(MaskError::InvalidBox { x_min, y_min, x_max, y_max });
        }
        Ok(BBox { x_min, y_min, x_max, y_max })
    }

    pub fn area(&self) -> u64 {
        (self.x_max - self.x_min) as u64 * (self.y_max - self.y_min) as u64
    }

    /// Overlapping region, or `None` when the boxes are disjoint (sharing an
    /// edge counts as disjoint under half-open bounds).
    pub fn intersect(&self, other: &BBox) -> Option<BBox> {
        let x0 = self.x_min.max(other.x_min);
        let y0 = self.y_min.max(other.y_min);
        let x1 = self.x_max.min(other.x_max);
        let y1 = self.y_max.min(other.y_max);
        if x0 < x1 && y0 < y1 {
            Some(BBox { x_min: x0, y_min: y0, x_max: x1, y_max: y1 })
        } else {
            None
        }
    }

    /// Clips to a `width` x `height` image, `None` if nothing remains.
    pub fn clip(&self, width: u32, height: u32) -> Option<BBox> {
        if width == 0 || height == 0 {
            return None;
        }
        self.intersect(&BBox { x_min: 0, y_min: 0, x_max: width, y_max: height })
    }
}

pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersect(b).map(|r| r.area()).unwrap_or(0);
    if inter == 0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

/// Rasterizes a box onto an image grid, clipping at the edges.
///
/// # Errors
/// `OutOfBounds` when the clipped box is empty.
pub fn mask_from_box(b: &BBox, width: u32, height: u32) -> Result<BinaryMask, MaskError> {
    let c = b.clip(width, height).ok_or(MaskError::OutOfBounds {
        x_min: b.x_min,
        y_min: b.y_min,
        x_max: b.x_max,
        y_max: b.y_max,
        width,
        height,
    })?;
    let h = height as u64;
    let ones = (c.y_max - c.y_min) as u64;
    let gap = h - ones;
    let mut runs: Vec<u32> = Vec::with_capacity(2 * (c.x_max - c.x_min) as usize + 1);
    runs.push((c.x_min as u64 * h + c.y_min as u64) as u32);
    if gap == 0 {
        // Full-height columns form one unbroken run.
        runs.push((ones * (c.x_max - c.x_min) as u64) as u32);
    } else {
        for x in c.x_min..c.x_max {
            runs.push(ones as u32);
            if x + 1 < c.x_max {
                runs.push(gap as u32);
            }
        }
    }
    let trail = (h - c.y_max as u64) + (width as u64 - c.x_max as u64) * h;
    if trail > 0 {
        runs.push(trail as u32);
    }
    BinaryMask::from_runs(width, height, runs)
}

/// One detector output: a box with a confidence score, the model that
/// produced it, and a class label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDetection {
    pub bbox: BBox,
    pub score: f64,
    pub model_id: String,
    pub label: String,
}

impl ScoredDetection {
    pub fn new(bbox: BBox, score: f64, model_id: &str, label: &str) -> Result<Self, MaskError> {
        if !(0.0..=1.0).contains(&score) || score.is_nan() {
            return Err(MaskError::InvalidScore(score));
        }
        if label.is_empty() {
            return Err(MaskError::EmptyLabel);
        }
        Ok(ScoredDetection {
            bbox,
            score,
            model_id: model_id.to_string(),
            label: label.to_string(),
        })
    }
}

/// Greedy class-agnostic NMS. Detections are visited in descending score
/// order (equal scores: lower input index first); a detection is kept iff
/// its box IoU with every previously kept detection is below `tau`.
/// Returns kept input indices in ascending order.
pub fn greedy_nms(detections: &[ScoredDetection], tau: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    // sort_by is stable, so equal scores retain input order.
    order.sort_by(|&a, &b| {
        detections[b].score.partial_cmp(&detections[a].score).expect("scores are not NaN")
    });
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        let suppressed = kept
            .iter()
            .any(|&k| box_iou(&detections[i].bbox, &detections[k].bbox) >= tau);
        if !suppressed {
            kept.push(i);
        }
    }
    kept.sort_unstable();
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(w: u32, h: u32, x0: u32, y0: u32, x1: u32, y1: u32) -> BinaryMask {
        mask_from_box(&BBox::new(x0, y0, x1, y1).unwrap(), w, h).unwrap()
    }

    #[test]
    fn empty_grid_encodes_to_single_run() {
        let m = BinaryMask::from_grid(3, 2, &[0; 6]).unwrap();
        assert_eq!(m.runs(), &[6]);
        assert_eq!(m.area(), 0);
        assert!(m.is_empty());
    }

    #[test]
    fn full_grid_starts_with_zero_length_run() {
        let m = BinaryMask::from_grid(3, 2, &[1; 6]).unwrap();
        assert_eq!(m.runs(), &[0, 6]);
        assert_eq!(m.area(), 6);
    }

    #[test]
    fn column_major_scan_order() {
        // 3x2 grid, set pixels at (x=0,y=0) and (x=2,y=1):
        // flat column-major order: (0,0) (0,1) (1,0) (1,1) (2,0) (2,1)
        let grid = [1, 0, 0, 0, 0, 1];
        let m = BinaryMask::from_grid(3, 2, &grid).unwrap();
        assert_eq!(m.runs(), &[0, 1, 4, 1]);
        assert_eq!(m.to_grid(), grid);
    }

    #[test]
    fn from_runs_rejects_bad_sum() {
        let err = BinaryMask::from_runs(3, 2, vec![5]).unwrap_err();
        assert_eq!(err, MaskError::LengthMismatch { expected: 6, got: 5 });
    }

    #[test]
    fn from_runs_rejects_interior_zero_run() {
        let err = BinaryMask::from_runs(3, 2, vec![2, 1, 0, 1, 2]).unwrap_err();
        assert_eq!(err, MaskError::NonCanonicalRuns { index: 2 });
    }

    #[test]
    fn leading_zero_run_is_allowed() {
        assert!(BinaryMask::from_runs(3, 2, vec![0, 6]).is_ok());
    }

    #[test]
    fn wire_round_trip() {
        let m = rect(7, 5, 1, 1, 4, 3);
        let json = serde_json::to_string(&m).unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["size"][0], 5);
        assert_eq!(v["size"][1], 7);
        let back: BinaryMask = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn wire_rejects_non_canonical() {
        let json = r#"{"size": [2, 3], "counts": [2, 1, 0, 1, 2]}"#;
        assert!(serde_json::from_str::<BinaryMask>(json).is_err());
    }

    #[test]
    fn overlapping_rectangles_iou() {
        // 4x2 and 4x2 boxes overlapping in a 2x2 patch: 4 / 12.
        let a = rect(8, 4, 0, 0, 4, 2);
        let b = rect(8, 4, 2, 0, 6, 2);
        let iou = mask_iou(&a, &b).unwrap();
        assert!((iou - 4.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn identical_masks_iou_one() {
        let a = rect(8, 4, 1, 1, 5, 3);
        assert_eq!(mask_iou(&a, &a.clone()).unwrap(), 1.0);
    }

    #[test]
    fn empty_vs_empty_iou_zero() {
        let a = BinaryMask::empty(8, 4);
        let b = BinaryMask::empty(8, 4);
        assert_eq!(mask_iou(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let a = BinaryMask::empty(8, 4);
        let b = BinaryMask::empty(4, 8);
        assert!(matches!(mask_iou(&a, &b), Err(MaskError::DimensionMismatch { .. })));
    }

    #[test]
    fn union_matches_dense_or() {
        let a = rect(8, 4, 0, 0, 4, 2);
        let b = rect(8, 4, 2, 1, 6, 4);
        let u = mask_union(&a, &b).unwrap();
        let (ga, gb) = (a.to_grid(), b.to_grid());
        let dense: Vec<u8> = ga.iter().zip(&gb).map(|(&x, &y)| x | y).collect();
        assert_eq!(u.to_grid(), dense);
        assert_eq!(u.area(), dense.iter().map(|&v| v as u64).sum::<u64>());
    }

    #[test]
    fn box_iou_matches_hand_value() {
        let a = BBox::new(0, 0, 4, 2).unwrap();
        let b = BBox::new(2, 0, 6, 2).unwrap();
        assert!((box_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn touching_boxes_do_not_overlap() {
        let a = BBox::new(0, 0, 2, 2).unwrap();
        let b = BBox::new(2, 0, 4, 2).unwrap();
        assert_eq!(box_iou(&a, &b), 0.0);
        assert!(a.intersect(&b).is_none());
    }

    #[test]
    fn box_rasterization_agrees_with_box_iou() {
        let a = BBox::new(0, 0, 4, 2).unwrap();
        let b = BBox::new(2, 0, 6, 2).unwrap();
        let ma = mask_from_box(&a, 8, 4).unwrap();
        let mb = mask_from_box(&b, 8, 4).unwrap();
        assert_eq!(mask_iou(&ma, &mb).unwrap(), box_iou(&a, &b));
    }

    #[test]
    fn mask_from_box_clips_to_image() {
        let b = BBox::new(6, 2, 12, 9).unwrap();
        let m = mask_from_box(&b, 8, 4).unwrap();
        assert_eq!(m.area(), 2 * 2); // clipped to x in [6,8), y in [2,4)
    }

    #[test]
    fn mask_from_box_outside_image_errors() {
        let b = BBox::new(10, 10, 12, 12).unwrap();
        assert!(matches!(mask_from_box(&b, 8, 4), Err(MaskError::OutOfBounds { .. })));
    }

    #[test]
    fn mask_from_box_full_height_columns_coalesce() {
        // Full-height box across several columns: one run, no zero gaps.
        let b = BBox::new(1, 0, 4, 4).unwrap();
        let m = mask_from_box(&b, 6, 4).unwrap();
        assert_eq!(m.runs(), &[4, 12, 8]);
        assert_eq!(m.area(), 12);
        // Whole image: leading zero run then all ones.
        let all = BBox::new(0, 0, 6, 4).unwrap();
        let m = mask_from_box(&all, 6, 4).unwrap();
        assert_eq!(m.runs(), &[0, 24]);
    }

    #[test]
    fn degenerate_box_rejected() {
        assert!(matches!(BBox::new(3, 1, 3, 5), Err(MaskError::InvalidBox { .. })));
    }

    #[test]
    fn nms_keeps_best_and_disjoint() {
        // A and B overlap with IoU 0.6, C is far away.
        let a = ScoredDetection::new(BBox::new(0, 0, 10, 10).unwrap(), 0.9, "m", "x").unwrap();
        let b = ScoredDetection::new(BBox::new(0, 0, 10, 6).unwrap(), 0.8, "m", "x").unwrap();
        let c = ScoredDetection::new(BBox::new(50, 50, 60, 60).unwrap(), 0.7, "m", "x").unwrap();
        assert_eq!(box_iou(&a.bbox, &b.bbox), 0.6);
        assert_eq!(greedy_nms(&[a, b, c], 0.5), vec![0, 2]);
    }

    #[test]
    fn nms_tie_prefers_lower_index() {
        let a = ScoredDetection::new(BBox::new(0, 0, 10, 10).unwrap(), 0.8, "m", "x").unwrap();
        let b = ScoredDetection::new(BBox::new(0, 0, 10, 9).unwrap(), 0.8, "m", "x").unwrap();
        assert_eq!(greedy_nms(&[b.clone(), a.clone()], 0.5), vec![0]);
        assert_eq!(greedy_nms(&[a, b], 0.5), vec![0]);
    }

    #[test]
    fn nms_empty_input() {
        assert!(greedy_nms(&[], 0.5).is_empty());
    }

    #[test]
    fn score_validation() {
        let b = BBox::new(0, 0, 1, 1).unwrap();
        assert!(matches!(
            ScoredDetection::new(b, 1.5, "m", "x"),
            Err(MaskError::InvalidScore(_))
        ));
        assert!(matches!(ScoredDetection::new(b, 0.5, "m", ""), Err(MaskError::EmptyLabel)));
    }
}
