//! Scene graphs: grounding caption phrases to fused objects, building the
//! graph, rendering LLM prompts from it, and checking LLM captions against
//! it.
//!
//! Prompt rendering is deterministic: the same graph and examples always
//! produce the same bytes. Verification is deliberately lexical and cheap;
//! anything the checklist mentions must match a graph label, attribute, or
//! relationship predicate after normalization.

use crate::fusion::{FusedObject, Layer};
use crate::landmark::{Landmark, LandmarkError};
use gcgkit_core::grounded::{GroundedCaption, PhraseSpan};
use gcgkit_core::mask::{box_iou, mask_from_box, mask_union, BBox, BinaryMask, MaskError};
use gcgkit_core::text::tokenize;
use gcgkit_core::FormatError;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, thiserror::Error)]
pub enum SceneError {
    #[error("relationship references object id {id} which is not in the graph")]
    DanglingReference { id: u32 },
    #[error("duplicate object id {id}")]
    DuplicateObjectId { id: u32 },
    #[error("object {object_id} has no layer; run assign_layers first")]
    MissingLayer { object_id: u32 },
    #[error("caption tag references unknown object id {id}")]
    UnknownObjectId { id: u32 },
    #[error("malformed object tag at byte {offset}: {detail}")]
    MalformedTag { offset: usize, detail: String },
    #[error("caption text contains reserved grounding tokens")]
    ReservedToken,
    #[error("feedback requested for a caption that was not rejected")]
    NotRejected,
    #[error(transparent)]
    Landmark(#[from] LandmarkError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// A phrase the grounding model localized inside one caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundedPhrase {
    pub phrase: String,
    pub bbox: BBox,
}

/// Subject(s) connected to object(s) by a textual predicate. An empty
/// `object_ids` list is the single-sided "role" form (for example
/// "person [riding]" with no named counterpart).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relationship {
    pub subject_ids: Vec<u32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub object_ids: Vec<u32>,
    pub predicate: String,
    /// Index of the caption this relationship was read from.
    pub source_caption: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundingOutcome {
    pub relationships: Vec<Relationship>,
    /// (phrase, object id) pairs that bound successfully, in caption order.
    pub bindings: Vec<(String, u32)>,
    pub diagnostics: Vec<String>,
}

/// Binds each grounded phrase to the fused object with the highest box IoU
/// (ties go to the lower object id) and turns consecutive bound phrases
/// into relationships whose predicate is the text between them.
///
/// Phrases whose best IoU is below `tau`, and phrases that cannot be found
/// in the caption, are dropped with a diagnostic; the surviving neighbors
/// then count as consecutive. Pairs with no text between them are skipped.
pub fn ground_caption_phrases(
    caption: &str,
    phrases: &[GroundedPhrase],
    objects: &[FusedObject],
    tau: f64,
    source_caption: usize,
) -> GroundingOutcome {
    assert!(tau > 0.0 && tau <= 1.0, "tau out of (0,1]");
    let mut out = GroundingOutcome::default();
    let lower_caption = caption.to_lowercase();
    // Repeated identical phrases advance through successive occurrences.
    let mut cursors: BTreeMap<String, usize> = BTreeMap::new();

    // (start, end, object_id) for every phrase that both binds and locates.
    let mut placed: Vec<(usize, usize, u32, String)> = Vec::new();
    for gp in phrases {
        let mut best: Option<(f64, u32)> = None;
        for obj in objects {
            let iou = box_iou(&gp.bbox, &obj.bbox);
            let better = match best {
                None => true,
                Some((b, id)) => iou > b || (iou == b && obj.object_id < id),
            };
            if better {
                best = Some((iou, obj.object_id));
            }
        }
        let bound = match best {
            Some((iou, id)) if iou >= tau => Some((iou, id)),
            Some((iou, _)) => {
                out.diagnostics.push(format!(
                    "phrase {:?} dropped: best box IoU {:.3} is below {:.3}",
                    gp.phrase, iou, tau
                ));
                None
            }
            None => {
                out.diagnostics
                    .push(format!("phrase {:?} dropped: no objects to bind to", gp.phrase));
                None
            }
        };
        let Some((_iou, id)) = bound else { continue };

        let needle = gp.phrase.to_lowercase();
        let from = cursors.get(&needle).copied().unwrap_or(0);
        match lower_caption.get(from..).and_then(|tail| tail.find(&needle)) {
            Some(rel) => {
                let start = from + rel;
                let end = start + needle.len();
                cursors.insert(needle, end);
                placed.push((start, end, id, gp.phrase.clone()));
            }
            None => {
                out.diagnostics.push(format!(
                    "phrase {:?} bound to object {} but does not occur in the caption",
                    gp.phrase, id
                ));
            }
        }
    }
    placed.sort();
    for (p, obj_id) in placed.iter().map(|(_, _, id, ph)| (ph.clone(), *id)) {
        out.bindings.push((p, obj_id));
    }
    for pair in placed.windows(2) {
        let (_, end_a, id_a, _) = &pair[0];
        let (start_b, _, id_b, _) = &pair[1];
        if start_b < end_a {
            continue; // overlapping finds; nothing between them
        }
        // Strip surrounding punctuation as well as whitespace so a bare
        // comma between phrases does not become a predicate.
        let predicate =
            caption[*end_a..*start_b].trim_matches(|c: char| !c.is_alphanumeric()).to_string();
        if predicate.is_empty() {
            continue;
        }
        out.relationships.push(Relationship {
            subject_ids: vec![*id_a],
            object_ids: vec![*id_b],
            predicate,
            source_caption,
        });
    }
    out
}

/// A validated scene graph: densely indexed objects, resolved
/// relationships, the landmark classification, and the layer partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGraph {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    /// `objects[i].object_id == i` after construction.
    pub objects: Vec<FusedObject>,
    pub relationships: Vec<Relationship>,
    pub landmark: Landmark,
    pub short_captions: Vec<String>,
    /// Every object id appears in exactly one layer list; lists are ordered
    /// nearest first (depth descending, id ascending on ties).
    pub layers: BTreeMap<Layer, Vec<u32>>,
}

/// Re-indexes objects densely, remaps relationship ids, and derives the
/// layer partition.
///
/// # Errors
/// `MissingLayer` when an object lacks depth or layer; `DuplicateObjectId`
/// on id collisions; `DanglingReference` when a relationship names an id
/// that no object carries.
pub fn build_graph(
    image_id: &str,
    width: u32,
    height: u32,
    objects: Vec<FusedObject>,
    relationships: Vec<Relationship>,
    landmark: Landmark,
    short_captions: Vec<String>,
) -> Result<SceneGraph, SceneError> {
    let mut remap: BTreeMap<u32, u32> = BTreeMap::new();
    for (i, obj) in objects.iter().enumerate() {
        if obj.layer.is_none() || obj.depth_med.is_none() {
            return Err(SceneError::MissingLayer { object_id: obj.object_id });
        }
        if remap.insert(obj.object_id, i as u32).is_some() {
            return Err(SceneError::DuplicateObjectId { id: obj.object_id });
        }
    }
    let remap_ids = |ids: &[u32]| -> Result<Vec<u32>, SceneError> {
        ids.iter()
            .map(|id| remap.get(id).copied().ok_or(SceneError::DanglingReference { id: *id }))
            .collect()
    };
    let mut mapped_rels = Vec::with_capacity(relationships.len());
    for r in &relationships {
        mapped_rels.push(Relationship {
            subject_ids: remap_ids(&r.subject_ids)?,
            object_ids: remap_ids(&r.object_ids)?,
            predicate: r.predicate.clone(),
            source_caption: r.source_caption,
        });
    }
    let mut dense = objects;
    for (i, obj) in dense.iter_mut().enumerate() {
        obj.object_id = i as u32;
    }
    let mut layers: BTreeMap<Layer, Vec<u32>> = BTreeMap::new();
    let mut order: Vec<u32> = (0..dense.len() as u32).collect();
    order.sort_by(|&a, &b| {
        dense[b as usize]
            .depth_med
            .partial_cmp(&dense[a as usize].depth_med)
            .expect("depth values are finite")
            .then(a.cmp(&b))
    });
    for id in order {
        let layer = dense[id as usize].layer.expect("checked above");
        layers.entry(layer).or_default().push(id);
    }
    Ok(SceneGraph {
        image_id: image_id.to_string(),
        width,
        height,
        objects: dense,
        relationships: mapped_rels,
        landmark,
        short_captions,
        layers,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    DenseCaption,
    ExtraContext,
}

fn format_ids(ids: &[u32]) -> String {
    let strs: Vec<String> = ids.iter().map(|i| format!("[{i}]")).collect();
    strs.join(" ")
}

/// Renders the LLM prompt for a graph. Byte-for-byte deterministic.
pub fn render_prompt(graph: &SceneGraph, kind: PromptKind, examples: &[String]) -> String {
    let mut p = String::new();
    p.push_str(&format!(
        "Scene graph for image {} ({}x{} pixels).\n",
        graph.image_id, graph.width, graph.height
    ));
    p.push_str(&format!("Landmark: {}\n", graph.landmark));
    p.push_str("\nObjects by layer, nearest first:\n");
    for layer in Layer::ALL {
        p.push_str(&format!("  {}:\n", layer.name()));
        let ids = graph.layers.get(&layer).map(Vec::as_slice).unwrap_or(&[]);
        if ids.is_empty() {
            p.push_str("    (none)\n");
        }
        for &id in ids {
            let obj = &graph.objects[id as usize];
            let mut line = format!("    [{}] {}", id, obj.labels.join(", "));
            if !obj.attributes.is_empty() {
                line.push_str(&format!(" {{{}}}", obj.attributes.join(", ")));
            }
            line.push_str(&format!(
                " (depth {:.3}, {})\n",
                obj.depth_med.expect("graph objects carry depth"),
                layer.name()
            ));
            p.push_str(&line);
        }
    }
    p.push_str("\nRelationships:\n");
    if graph.relationships.is_empty() {
        p.push_str("  (none)\n");
    }
    for r in &graph.relationships {
        let mut line = format!("  {} {}", format_ids(&r.subject_ids), r.predicate);
        if !r.object_ids.is_empty() {
            line.push_str(&format!(" {}", format_ids(&r.object_ids)));
        }
        line.push_str(&format!(" (from caption {})\n", r.source_caption));
        p.push_str(&line);
    }
    p.push_str("\nScene descriptions:\n");
    if graph.short_captions.is_empty() {
        p.push_str("  (none)\n");
    }
    for c in &graph.short_captions {
        p.push_str(&format!("  - {c}\n"));
    }
    if !examples.is_empty() {
        p.push_str("\nExamples:\n");
        for (i, e) in examples.iter().enumerate() {
            p.push_str(&format!("  Example {}:\n  {}\n", i + 1, e));
        }
    }
    p.push('\n');
    match kind {
        PromptKind::DenseCaption => p.push_str(
            "Task: Write one detailed caption covering the whole scene. Mark every \
             object mention as [[id|phrase]] using only the ids listed above, for \
             example [[0|a man in a red shirt]]. Mention each object at most once.\n",
        ),
        PromptKind::ExtraContext => p.push_str(
            "Task: Write a short passage of plausible context beyond what is visible: \
             the likely setting, moments before and after, and ambient detail. Do not \
             invent new objects inside the scene and do not use [[id|phrase]] tags.\n",
        ),
    }
    p
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifyStatus {
    Verified,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationOutcome {
    pub status: VerifyStatus,
    /// Checklist items with no match in the graph, in checklist order.
    pub missing: Vec<String>,
}

/// Lowercased tokens with a naive plural strip; the shared normalization
/// for checklist matching.
fn norm_tokens(s: &str) -> Vec<String> {
    tokenize(s)
        .into_iter()
        .map(|t| {
            if t.len() > 3 && t.ends_with('s') && !t.ends_with("ss") {
                t[..t.len() - 1].to_string()
            } else {
                t
            }
        })
        .collect()
}

fn contains_seq(hay: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle)
}

/// True when one normalized token sequence contains the other contiguously,
/// i.e. a substring match that respects word boundaries.
fn terms_match(a: &[String], b: &[String]) -> bool {
    contains_seq(a, b) || contains_seq(b, a)
}

/// Checks each checklist item against the graph's labels, attributes, and
/// relationship predicates. Items that normalize to nothing are ignored.
pub fn verify_caption(checklist: &[String], graph: &SceneGraph) -> VerificationOutcome {
    let mut terms: Vec<Vec<String>> = Vec::new();
    for obj in &graph.objects {
        for l in &obj.labels {
            terms.push(norm_tokens(l));
        }
        for a in &obj.attributes {
            terms.push(norm_tokens(a));
        }
    }
    for r in &graph.relationships {
        terms.push(norm_tokens(&r.predicate));
    }
    terms.retain(|t| !t.is_empty());

    let mut missing = Vec::new();
    for item in checklist {
        let n = norm_tokens(item);
        if n.is_empty() {
            continue;
        }
        if !terms.iter().any(|t| terms_match(&n, t)) {
            missing.push(item.clone());
        }
    }
    let status = if missing.is_empty() { VerifyStatus::Verified } else { VerifyStatus::Rejected };
    VerificationOutcome { status, missing }
}

/// Builds the corrective instruction appended to the prompt after a
/// rejection.
///
/// # Errors
/// `NotRejected` when the outcome has no missing items.
pub fn regeneration_feedback(outcome: &VerificationOutcome) -> Result<String, SceneError> {
    if outcome.status != VerifyStatus::Rejected || outcome.missing.is_empty() {
        return Err(SceneError::NotRejected);
    }
    Ok(format!(
        "Feedback: the previous caption mentioned {} which the scene does not \
         contain. Rewrite the caption so it only mentions objects, attributes, \
         and relations from the scene graph, keeping the [[id|phrase]] tags.",
        outcome
            .missing
            .iter()
            .map(|m| format!("{m:?}"))
            .collect::<Vec<_>>()
            .join(", ")
    ))
}

const TAG_OPEN: &str = "[[";
const TAG_SEP: char = '|';
const TAG_CLOSE: &str = "]]";

/// Converts LLM output with `[[ids|phrase]]` tags into a grounded caption.
/// Each tag becomes one phrase span whose mask is the pixel union of the
/// referenced objects (an object without a mask contributes its box).
///
/// # Errors
/// `MalformedTag` for unterminated or empty tags and non-numeric ids,
/// `UnknownObjectId` for ids outside the graph, `ReservedToken` when the
/// output contains grounding-format tokens.
pub fn bind_dense_caption(text: &str, graph: &SceneGraph) -> Result<GroundedCaption, SceneError> {
    let mut plain = String::new();
    let mut spans: Vec<PhraseSpan> = Vec::new();
    let mut masks: Vec<BinaryMask> = Vec::new();
    let mut rest = text;
    let mut offset = 0usize;
    while let Some(open) = rest.find(TAG_OPEN) {
        plain.push_str(&rest[..open]);
        let tag_at = offset + open;
        let body_start = open + TAG_OPEN.len();
        let body_len = rest[body_start..].find(TAG_CLOSE).ok_or(SceneError::MalformedTag {
            offset: tag_at,
            detail: "missing closing ]]".to_string(),
        })?;
        let body = &rest[body_start..body_start + body_len];
        if body.contains(TAG_OPEN) {
            return Err(SceneError::MalformedTag {
                offset: tag_at,
                detail: "nested [[ inside a tag".to_string(),
            });
        }
        let sep = body.find(TAG_SEP).ok_or(SceneError::MalformedTag {
            offset: tag_at,
            detail: "missing | between ids and phrase".to_string(),
        })?;
        let (ids_part, phrase) = (&body[..sep], &body[sep + 1..]);
        if phrase.trim().is_empty() {
            return Err(SceneError::MalformedTag {
                offset: tag_at,
                detail: "empty phrase".to_string(),
            });
        }
        let mut ids: Vec<u32> = Vec::new();
        for piece in ids_part.split(',') {
            let piece = piece.trim();
            if piece.is_empty() {
                return Err(SceneError::MalformedTag {
                    offset: tag_at,
                    detail: "empty id list".to_string(),
                });
            }
            let id: u32 = piece.parse().map_err(|_| SceneError::MalformedTag {
                offset: tag_at,
                detail: format!("id {piece:?} is not a number"),
            })?;
            if !ids.contains(&id) {
                ids.push(id);
            }
        }
        let mut union: Option<BinaryMask> = None;
        for id in &ids {
            let obj = graph
                .objects
                .get(*id as usize)
                .ok_or(SceneError::UnknownObjectId { id: *id })?;
            let m = match &obj.mask {
                Some(m) => m.clone(),
                None => mask_from_box(&obj.bbox, graph.width, graph.height)?,
            };
            union = Some(match union {
                None => m,
                Some(u) => mask_union(&u, &m)?,
            });
        }
        let start = plain.len();
        plain.push_str(phrase);
        spans.push(PhraseSpan {
            char_start: start,
            char_end: plain.len(),
            phrase: phrase.to_string(),
            seg_index: spans.len(),
        });
        masks.push(union.expect("ids list is non-empty"));
        let consumed = body_start + body_len + TAG_CLOSE.len();
        offset += consumed;
        rest = &rest[consumed..];
    }
    plain.push_str(rest);
    for token in ["<p>", "</p>", "<SEG>"] {
        if plain.contains(token) {
            return Err(SceneError::ReservedToken);
        }
    }
    Ok(GroundedCaption::new(plain, spans, masks, None)?)
}

/// Offline noun-phrase chunker used when no language model is available to
/// extract checklist items: determiner-led token runs, stop words cut.
pub fn extract_noun_phrases(text: &str) -> Vec<String> {
    const DETERMINERS: &[&str] = &[
        "a", "an", "the", "this", "that", "these", "those", "his", "her", "its", "their", "some",
        "several", "two", "three", "four", "five",
    ];
    const STOPS: &[&str] = &[
        "is", "are", "was", "were", "be", "been", "being", "on", "in", "at", "with", "and", "or",
        "of", "to", "near", "next", "under", "over", "behind", "beside", "above", "below", "by",
        "from", "into", "holding", "holds", "wearing", "wears", "standing", "stands", "sitting",
        "sits", "walking", "walks", "looking", "looks", "riding", "rides", "there", "while",
    ];
    let tokens = tokenize(text);
    let mut phrases: Vec<String> = Vec::new();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    let mut i = 0;
    while i < tokens.len() {
        if DETERMINERS.contains(&tokens[i].as_str()) {
            let mut j = i + 1;
            let mut words: Vec<&str> = Vec::new();
            while j < tokens.len()
                && words.len() < 4
                && !STOPS.contains(&tokens[j].as_str())
                && !DETERMINERS.contains(&tokens[j].as_str())
            {
                words.push(&tokens[j]);
                j += 1;
            }
            if !words.is_empty() {
                let phrase = words.join(" ");
                if seen.insert(phrase.clone()) {
                    phrases.push(phrase);
                }
            }
            i = j.max(i + 1);
        } else {
            i += 1;
        }
    }
    phrases
}
