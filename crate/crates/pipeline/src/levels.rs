//! The four annotation levels, run one image at a time.
//!
//! Level 1 fuses detections and attaches attributes, depth, and layers.
//! Level 2 adds short captions, grounded relationships, and the landmark.
//! Level 3 prompts the language model for a dense caption and verifies it
//! against the scene graph, regenerating with feedback on rejection.
//! Level 4 asks for context beyond the visible scene.
//!
//! Every level checkpoints through the store and is a no-op when the store
//! already holds a hash-verified record with that level completed.

use crate::clients::{ClientError, Clients, ImageMeta};
use crate::fusion::{attach_attributes, attach_depth, assign_layers, fuse, FusionError};
use crate::grand::{DenseCaption, GrandRecord, RecordError, VerificationLogEntry};
use crate::scene::{
    bind_dense_caption, build_graph, ground_caption_phrases, regeneration_feedback,
    render_prompt, verify_caption, PromptKind, SceneError, SceneGraph, VerifyStatus,
};
use crate::store::{CheckpointStore, StoreError};
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq)]
pub struct LevelConfig {
    pub tau_nms: f64,
    pub tau_match: f64,
    pub tau_ground: f64,
    /// Regenerations allowed after the first dense-caption attempt.
    pub max_caption_retries: u32,
    pub prompt_examples: Vec<String>,
}

impl Default for LevelConfig {
    fn default() -> Self {
        LevelConfig {
            tau_nms: 0.5,
            tau_match: 0.5,
            tau_ground: 0.5,
            max_caption_retries: 2,
            prompt_examples: Vec::new(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("image {image_id} level {level}: {detail}")]
    Precondition { image_id: String, level: u8, detail: String },
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Record(#[from] RecordError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LevelStatus {
    Completed,
    /// The store already held this level for the image.
    Skipped,
}

pub const MAX_LEVEL: u8 = 4;

fn graph_for(record: &GrandRecord) -> Result<SceneGraph, PipelineError> {
    let landmark = record.landmark.clone().ok_or_else(|| PipelineError::Precondition {
        image_id: record.image_id.clone(),
        level: 3,
        detail: "record has no landmark; level 2 must run first".to_string(),
    })?;
    Ok(build_graph(
        &record.image_id,
        record.width,
        record.height,
        record.objects.clone(),
        record.relationships.clone(),
        landmark,
        record.short_captions.clone(),
    )?)
}

/// Ids and first labels, nearest layer first; the object summary offline
/// language models answer from.
fn layer_ordered_labels(graph: &SceneGraph) -> Vec<(u32, String)> {
    let mut out = Vec::new();
    for layer in crate::fusion::Layer::ALL {
        if let Some(ids) = graph.layers.get(&layer) {
            for &id in ids {
                let obj = &graph.objects[id as usize];
                out.push((id, obj.labels.first().cloned().unwrap_or_default()));
            }
        }
    }
    out
}

fn run_level_1(
    record: &mut GrandRecord,
    img: &ImageMeta,
    clients: &Clients,
    cfg: &LevelConfig,
) -> Result<(), PipelineError> {
    let mut all = Vec::new();
    for model_id in &clients.detector_models {
        all.push(clients.detect(img, model_id)?);
    }
    let fused = fuse(&all, cfg.tau_nms, cfg.tau_match)?;
    record.diagnostics.extend(fused.diagnostics);
    let mut objects = fused.objects;

    let mut attrs: BTreeMap<u32, Vec<String>> = BTreeMap::new();
    for obj in &objects {
        let got = clients.region_attributes(img, obj.object_id, &obj.bbox, &obj.labels)?;
        attrs.insert(obj.object_id, got);
    }
    attach_attributes(&mut objects, &attrs)?;

    let depth = clients.depth(img)?;
    attach_depth(&mut objects, &depth, img.width, img.height)?;
    assign_layers(&mut objects)?;
    record.objects = objects;
    Ok(())
}

fn run_level_2(
    record: &mut GrandRecord,
    img: &ImageMeta,
    clients: &Clients,
    cfg: &LevelConfig,
) -> Result<(), PipelineError> {
    let captions = clients.scene_captions(img)?;
    let mut relationships = Vec::new();
    for (i, caption) in captions.iter().enumerate() {
        let phrases = clients.ground_phrases(img, caption)?;
        let out = ground_caption_phrases(caption, &phrases, &record.objects, cfg.tau_ground, i);
        record.diagnostics.extend(out.diagnostics);
        relationships.extend(out.relationships);
    }
    record.short_captions = captions;
    record.relationships = relationships;
    record.landmark = Some(clients.landmark(img)?);
    Ok(())
}

fn run_level_3(
    record: &mut GrandRecord,
    img: &ImageMeta,
    clients: &Clients,
    cfg: &LevelConfig,
) -> Result<(), PipelineError> {
    let graph = graph_for(record)?;
    let object_list = layer_ordered_labels(&graph);
    let base_prompt = render_prompt(&graph, PromptKind::DenseCaption, &cfg.prompt_examples);
    let mut prompt = base_prompt;
    let mut log: Vec<VerificationLogEntry> = Vec::new();
    let attempts = cfg.max_caption_retries + 1;
    let mut last_good: Option<DenseCaption> = None;
    for attempt in 1..=attempts {
        let text = clients.dense_caption(img, &prompt, &object_list)?;
        match bind_dense_caption(&text, &graph) {
            Ok(caption) => {
                let checklist = clients.checklist(img, &caption.plain_text)?;
                let outcome = verify_caption(&checklist, &graph);
                log.push(VerificationLogEntry {
                    attempt,
                    status: outcome.status,
                    missing: outcome.missing.clone(),
                });
                last_good = Some(DenseCaption::from_caption(&caption));
                if outcome.status == VerifyStatus::Verified {
                    break;
                }
                if attempt < attempts {
                    let feedback = regeneration_feedback(&outcome)?;
                    prompt.push('\n');
                    prompt.push_str(&feedback);
                }
            }
            Err(e) => {
                log.push(VerificationLogEntry {
                    attempt,
                    status: VerifyStatus::Rejected,
                    missing: vec![format!("caption could not be bound: {e}")],
                });
                if attempt < attempts {
                    prompt.push_str(
                        "\nFeedback: the previous answer could not be parsed. Use plain \
                         sentences with [[id|phrase]] tags exactly as instructed.",
                    );
                }
            }
        }
    }
    // Keep the last parseable caption even when it stayed rejected; the
    // final log entry carries the rejection. No parseable caption at all
    // is a level failure.
    match last_good {
        Some(dc) => {
            record.dense_caption = Some(dc);
            record.verification_log = log;
            Ok(())
        }
        None => Err(PipelineError::Precondition {
            image_id: record.image_id.clone(),
            level: 3,
            detail: format!("no parseable dense caption after {attempts} attempt(s)"),
        }),
    }
}

fn run_level_4(
    record: &mut GrandRecord,
    img: &ImageMeta,
    clients: &Clients,
    cfg: &LevelConfig,
) -> Result<(), PipelineError> {
    let graph = graph_for(record)?;
    let prompt = render_prompt(&graph, PromptKind::ExtraContext, &cfg.prompt_examples);
    record.extra_context = Some(clients.extra_context(img, &prompt)?);
    Ok(())
}

/// Runs one level for one image, checkpointing on success.
///
/// # Errors
/// `Precondition` when the level below is not completed (or the image size
/// disagrees with the manifest); client, fusion, scene, and store errors
/// pass through.
pub fn run_level_image(
    level: u8,
    img: &ImageMeta,
    clients: &Clients,
    store: &CheckpointStore,
    cfg: &LevelConfig,
) -> Result<LevelStatus, PipelineError> {
    assert!((1..=MAX_LEVEL).contains(&level), "level out of range");
    let checkpoint = store.load_verified(&img.image_id)?;
    let (mut record, mut levels) = match checkpoint {
        Some((state, record)) => {
            if record.width != img.width || record.height != img.height {
                return Err(PipelineError::Precondition {
                    image_id: img.image_id.clone(),
                    level,
                    detail: format!(
                        "stored record is {}x{} but the manifest says {}x{}",
                        record.width, record.height, img.width, img.height
                    ),
                });
            }
            (record, state.completed_levels)
        }
        None => (GrandRecord::new(&img.image_id, img.width, img.height), Vec::new()),
    };
    if levels.contains(&level) {
        return Ok(LevelStatus::Skipped);
    }
    if level > 1 && !levels.contains(&(level - 1)) {
        return Err(PipelineError::Precondition {
            image_id: img.image_id.clone(),
            level,
            detail: format!("level {} has not completed", level - 1),
        });
    }
    match level {
        1 => run_level_1(&mut record, img, clients, cfg)?,
        2 => run_level_2(&mut record, img, clients, cfg)?,
        3 => run_level_3(&mut record, img, clients, cfg)?,
        _ => run_level_4(&mut record, img, clients, cfg)?,
    }
    record.validate()?;
    levels.push(level);
    store.save(&record, &levels)?;
    Ok(LevelStatus::Completed)
}
