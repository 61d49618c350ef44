//! Multi-detector fusion: per-model NMS, cross-model corroboration voting,
//! clustering, and the depth/layer annotations attached afterwards.
//!
//! A detection survives only when at least two models other than its own
//! report an overlapping box. Survivors that overlap each other collapse
//! into one object carrying the best box, the union of labels, and every
//! corroborating model id. All tie-breaks are on (score, model_id, index),
//! never on input order, so fusion is invariant to model ordering.

use gcgkit_core::mask::{box_iou, greedy_nms, BBox, BinaryMask, MaskError, ScoredDetection};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedDetection {
    pub bbox: BBox,
    pub score: f64,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<BinaryMask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDetections {
    pub model_id: String,
    pub detections: Vec<MaskedDetection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    ImmediateForeground,
    Foreground,
    Midground,
    Background,
}

impl Layer {
    pub const ALL: [Layer; 4] =
        [Layer::ImmediateForeground, Layer::Foreground, Layer::Midground, Layer::Background];

    pub fn name(&self) -> &'static str {
        match self {
            Layer::ImmediateForeground => "immediate_foreground",
            Layer::Foreground => "foreground",
            Layer::Midground => "midground",
            Layer::Background => "background",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedObject {
    pub object_id: u32,
    pub bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<BinaryMask>,
    /// Sorted, de-duplicated labels from every cluster member.
    pub labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attributes: Vec<String>,
    pub score: f64,
    /// Models whose detections supported this object (own model included).
    pub corroborators: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_med: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer: Option<Layer>,
}

/// Row-major relative depth, higher values nearer to the camera.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DepthWire", into = "DepthWire")]
pub struct DepthMap {
    width: u32,
    height: u32,
    values: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct DepthWire {
    width: u32,
    height: u32,
    values: Vec<f32>,
}

impl TryFrom<DepthWire> for DepthMap {
    type Error = FusionError;

    fn try_from(w: DepthWire) -> Result<Self, FusionError> {
        DepthMap::new(w.width, w.height, w.values)
    }
}

impl From<DepthMap> for DepthWire {
    fn from(d: DepthMap) -> Self {
        DepthWire { width: d.width, height: d.height, values: d.values }
    }
}

impl DepthMap {
    pub fn new(width: u32, height: u32, values: Vec<f32>) -> Result<Self, FusionError> {
        if values.len() as u64 != width as u64 * height as u64 {
            return Err(FusionError::DepthSizeMismatch {
                expected: width as u64 * height as u64,
                got: values.len() as u64,
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FusionError::NonFiniteDepth);
        }
        Ok(DepthMap { width, height, values })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn get(&self, x: u32, y: u32) -> f32 {
        self.values[(y as u64 * self.width as u64 + x as u64) as usize]
    }
}

#[derive(Debug, thiserror::Error)]
pub enum FusionError {
    #[error("duplicate model id {0:?} in one fusion call")]
    DuplicateModelId(String),
    #[error("unknown object id {0}")]
    UnknownObjectId(u32),
    #[error("object {object_id} covers no pixels inside the image")]
    EmptyRegion { object_id: u32 },
    #[error("object {object_id} has no depth; run attach_depth first")]
    MissingDepth { object_id: u32 },
    #[error("depth map holds {got} values, grid needs {expected}")]
    DepthSizeMismatch { expected: u64, got: u64 },
    #[error("depth map contains non-finite values")]
    NonFiniteDepth,
    #[error("depth map is {dw}x{dh} but the image is {iw}x{ih}")]
    DepthDimensionMismatch { dw: u32, dh: u32, iw: u32, ih: u32 },
    #[error(transparent)]
    Mask(#[from] MaskError),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FuseOutcome {
    pub objects: Vec<FusedObject>,
    pub diagnostics: Vec<String>,
}

/// One post-NMS survivor, with its model and position pinned for tie-breaks.
struct Survivor<'a> {
    model_id: &'a str,
    det_index: usize,
    det: &'a MaskedDetection,
}

/// Fuses detections from several models.
///
/// Steps: per-model greedy NMS at `tau_nms`; corroboration voting (a
/// survivor is kept iff detections from at least two *other* models overlap
/// it at `tau_match` or more); clustering of mutually overlapping kept
/// survivors; one object per cluster. With fewer than three models nothing
/// can gather two outside corroborators, so the result is empty and a
/// diagnostic says why.
///
/// # Errors
/// `DuplicateModelId` when one model id appears twice.
pub fn fuse(all: &[ModelDetections], tau_nms: f64, tau_match: f64) -> Result<FuseOutcome, FusionError> {
    assert!(tau_nms > 0.0 && tau_nms <= 1.0, "tau_nms out of (0,1]");
    assert!(tau_match > 0.0 && tau_match <= 1.0, "tau_match out of (0,1]");
    let mut seen = BTreeSet::new();
    for m in all {
        if !seen.insert(m.model_id.as_str()) {
            return Err(FusionError::DuplicateModelId(m.model_id.clone()));
        }
    }
    let mut outcome = FuseOutcome::default();
    if all.len() < 3 {
        outcome.diagnostics.push(format!(
            "fusion needs at least 3 models for corroboration, got {}; no objects retained",
            all.len()
        ));
        return Ok(outcome);
    }

    // Work in sorted-model order so nothing downstream sees input order.
    let mut models: Vec<&ModelDetections> = all.iter().collect();
    models.sort_by_key(|m| m.model_id.as_str());

    let mut survivors: Vec<Survivor> = Vec::new();
    for m in &models {
        let scored: Vec<ScoredDetection> = m
            .detections
            .iter()
            .map(|d| ScoredDetection::new(d.bbox, d.score, &m.model_id, &d.label))
            .collect::<Result<_, _>>()?;
        for idx in greedy_nms(&scored, tau_nms) {
            survivors.push(Survivor {
                model_id: &m.model_id,
                det_index: idx,
                det: &m.detections[idx],
            });
        }
    }

    // Voting: count distinct other models overlapping each survivor.
    let n = survivors.len();
    let mut kept: Vec<usize> = Vec::new();
    let mut voters: Vec<BTreeSet<&str>> = vec![BTreeSet::new(); n];
    for i in 0..n {
        for j in 0..n {
            if survivors[j].model_id != survivors[i].model_id
                && box_iou(&survivors[i].det.bbox, &survivors[j].det.bbox) >= tau_match
            {
                voters[i].insert(survivors[j].model_id);
            }
        }
        if voters[i].len() >= 2 {
            kept.push(i);
        }
    }

    // Cluster kept survivors by mutual overlap (union-find).
    let mut parent: Vec<usize> = (0..kept.len()).collect();
    fn find(parent: &mut Vec<usize>, x: usize) -> usize {
        if parent[x] != x {
            let r = find(parent, parent[x]);
            parent[x] = r;
        }
        parent[x]
    }
    for a in 0..kept.len() {
        for b in a + 1..kept.len() {
            let (sa, sb) = (&survivors[kept[a]], &survivors[kept[b]]);
            if box_iou(&sa.det.bbox, &sb.det.bbox) >= tau_match {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                if ra != rb {
                    parent[ra.max(rb)] = ra.min(rb);
                }
            }
        }
    }
    let mut clusters: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for a in 0..kept.len() {
        let root = find(&mut parent, a);
        clusters.entry(root).or_default().push(kept[a]);
    }

    let mut objects: Vec<FusedObject> = Vec::new();
    for members in clusters.values() {
        let rep = *members
            .iter()
            .min_by(|&&a, &&b| {
                let (sa, sb) = (&survivors[a], &survivors[b]);
                sb.det
                    .score
                    .partial_cmp(&sa.det.score)
                    .expect("scores are not NaN")
                    .then(sa.model_id.cmp(sb.model_id))
                    .then(sa.det_index.cmp(&sb.det_index))
            })
            .expect("clusters are non-empty");
        let mut labels: BTreeSet<String> = BTreeSet::new();
        let mut corroborators: BTreeSet<String> = BTreeSet::new();
        for &m in members {
            labels.insert(survivors[m].det.label.clone());
            corroborators.insert(survivors[m].model_id.to_string());
            for v in &voters[m] {
                corroborators.insert((*v).to_string());
            }
        }
        objects.push(FusedObject {
            object_id: 0, // assigned after the deterministic sort below
            bbox: survivors[rep].det.bbox,
            mask: survivors[rep].det.mask.clone(),
            labels: labels.into_iter().collect(),
            attributes: Vec::new(),
            score: survivors[rep].det.score,
            corroborators,
            depth_med: None,
            layer: None,
        });
    }
    objects.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("scores are not NaN")
            .then_with(|| a.bbox.x_min.cmp(&b.bbox.x_min))
            .then_with(|| a.bbox.y_min.cmp(&b.bbox.y_min))
            .then_with(|| a.bbox.x_max.cmp(&b.bbox.x_max))
            .then_with(|| a.bbox.y_max.cmp(&b.bbox.y_max))
            .then_with(|| a.labels.cmp(&b.labels))
    });
    for (i, o) in objects.iter_mut().enumerate() {
        o.object_id = i as u32;
    }
    outcome.objects = objects;
    Ok(outcome)
}

/// Appends region descriptions as attributes, de-duplicating
/// case-insensitively while preserving first-seen order and casing.
///
/// # Errors
/// `UnknownObjectId` when a map key names no object.
pub fn attach_attributes(
    objects: &mut [FusedObject],
    region_descriptions: &BTreeMap<u32, Vec<String>>,
) -> Result<(), FusionError> {
    for id in region_descriptions.keys() {
        if !objects.iter().any(|o| o.object_id == *id) {
            return Err(FusionError::UnknownObjectId(*id));
        }
    }
    for obj in objects.iter_mut() {
        let Some(extra) = region_descriptions.get(&obj.object_id) else { continue };
        let mut seen: BTreeSet<String> =
            obj.attributes.iter().map(|a| a.to_lowercase()).collect();
        for a in extra {
            if seen.insert(a.to_lowercase()) {
                obj.attributes.push(a.clone());
            }
        }
    }
    Ok(())
}

/// Median over the sorted slice; even counts average the two middles.
fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Sets each object's `depth_med` to the median depth inside its mask, or
/// inside its box when it has no mask.
///
/// # Errors
/// `DepthDimensionMismatch` when the map does not cover the image;
/// `EmptyRegion` when an object covers no pixels.
pub fn attach_depth(
    objects: &mut [FusedObject],
    depth: &DepthMap,
    image_width: u32,
    image_height: u32,
) -> Result<(), FusionError> {
    if depth.width != image_width || depth.height != image_height {
        return Err(FusionError::DepthDimensionMismatch {
            dw: depth.width,
            dh: depth.height,
            iw: image_width,
            ih: image_height,
        });
    }
    for obj in objects.iter_mut() {
        let mut vals: Vec<f64> = Vec::new();
        match &obj.mask {
            Some(mask) => {
                if mask.width() != image_width || mask.height() != image_height {
                    return Err(MaskError::DimensionMismatch {
                        wa: mask.width(),
                        ha: mask.height(),
                        wb: image_width,
                        hb: image_height,
                    }
                    .into());
                }
                let grid = mask.to_grid();
                for y in 0..image_height {
                    for x in 0..image_width {
                        if grid[(y as u64 * image_width as u64 + x as u64) as usize] == 1 {
                            vals.push(depth.get(x, y) as f64);
                        }
                    }
                }
            }
            None => {
                if let Some(c) = obj.bbox.clip(image_width, image_height) {
                    for y in c.y_min..c.y_max {
                        for x in c.x_min..c.x_max {
                            vals.push(depth.get(x, y) as f64);
                        }
                    }
                }
            }
        }
        if vals.is_empty() {
            return Err(FusionError::EmptyRegion { object_id: obj.object_id });
        }
        vals.sort_by(|a, b| a.partial_cmp(b).expect("depth values are finite"));
        obj.depth_med = Some(median(&vals));
    }
    Ok(())
}

/// Splits objects into the four spatial layers by rank quartile on
/// `depth_med`, nearest (largest) first. Objects with exactly equal depth
/// always share the nearer layer.
///
/// # Errors
/// `MissingDepth` when any object lacks `depth_med`.
pub fn assign_layers(objects: &mut [FusedObject]) -> Result<(), FusionError> {
    for o in objects.iter() {
        if o.depth_med.is_none() {
            return Err(FusionError::MissingDepth { object_id: o.object_id });
        }
    }
    let n = objects.len();
    if n == 0 {
        return Ok(());
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        objects[b]
            .depth_med
            .partial_cmp(&objects[a].depth_med)
            .expect("depth values are finite")
            .then(objects[a].object_id.cmp(&objects[b].object_id))
    });
    let mut i = 0;
    while i < n {
        // Tie group [i, j): everyone gets the layer of the nearest rank i.
        let mut j = i + 1;
        while j < n && objects[order[j]].depth_med == objects[order[i]].depth_med {
            j += 1;
        }
        let layer = Layer::ALL[(4 * i) / n];
        for &k in &order[i..j] {
            objects[k].layer = Some(layer);
        }
        i = j;
    }
    Ok(())
}
