//! Converters that turn existing grounded datasets into evaluation-ready
//! records with phrase-tagged captions.
//!
//! Referring-expression and scene-graph sources go through the language
//! model, which must weave every phrase into the caption verbatim; the
//! output is validated character for character and regenerated with
//! feedback when a phrase is missing, up to a retry budget. Phrase-span
//! sources (caption + offsets) convert without a language model, pulling
//! masks from the segmentation service or falling back to box rasters.

use crate::clients::{ClientError, Clients};
use crate::levels::PipelineError;
use gcgkit_core::grounded::{bind_masks, parse_grounded, render_grounded, ParseMode, PhraseSpan};
use gcgkit_core::mask::{mask_from_box, mask_union, BBox, BinaryMask, MaskError};
use gcgkit_core::record::GcgRecord;
use gcgkit_core::FormatError;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConvertError {
    #[error("image {image_id}: caption still misses {missing:?} after {attempts} attempt(s)")]
    ValidationExhausted { image_id: String, attempts: u32, missing: Vec<String> },
    #[error("image {image_id}: phrase {phrase:?} does not match the caption at its offset")]
    SpanMismatch { image_id: String, phrase: String },
    #[error("image {image_id}: no segmentation service and box fallback is disabled")]
    SegmenterUnavailable { image_id: String },
    #[error("image {image_id}: {detail}")]
    EmptyItem { image_id: String, detail: String },
    #[error("image {image_id}: converted record is invalid: {detail}")]
    RecordInvalid { image_id: String, detail: String },
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

/// One referring expression with its segmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefExpression {
    pub expression: String,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefCocogItem {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    /// Scene context handed to the language model alongside the phrases.
    #[serde(default)]
    pub context_caption: String,
    pub expressions: Vec<RefExpression>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsgTriplet {
    pub subject: String,
    pub predicate: String,
    pub object: String,
    pub subject_mask: BinaryMask,
    pub object_mask: BinaryMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsgItem {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub context_caption: String,
    pub triplets: Vec<PsgTriplet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlickrPhrase {
    pub phrase: String,
    /// Byte offset of the phrase inside the caption.
    pub char_start: usize,
    pub boxes: Vec<BBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlickrItem {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub caption: String,
    pub phrases: Vec<FlickrPhrase>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedItem {
    pub image_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConversionOutcome {
    pub records: Vec<GcgRecord>,
    pub rejected: Vec<RejectedItem>,
    pub diagnostics: Vec<String>,
}

/// Re-checks a finished record from scratch: structure, a strict parse of
/// the caption, mask binding, and phrase/slice agreement. Conversions run
/// this before emitting anything.
///
/// # Errors
/// A description of the first mismatch.
pub fn validate_converted_record(record: &GcgRecord) -> Result<(), String> {
    record.validate_structure()?;
    let parsed = parse_grounded(&record.caption_raw, ParseMode::Strict)
        .map_err(|e| format!("caption does not parse strictly: {e}"))?;
    let bound = bind_masks(&parsed, record.masks.clone(), record.scores.clone())
        .map_err(|e| format!("masks do not bind: {e}"))?;
    for span in &bound.spans {
        let slice = bound
            .plain_text
            .get(span.char_start..span.char_end)
            .ok_or_else(|| format!("span {:?} is out of bounds", span.phrase))?;
        if slice != span.phrase {
            return Err(format!("span text {slice:?} differs from phrase {:?}", span.phrase));
        }
    }
    Ok(())
}

const RESERVED: [&str; 3] = ["<p>", "</p>", "<SEG>"];

/// Locates every phrase in `text`, longest phrase first so that a phrase
/// which is a prefix or substring of another does not steal its span.
/// Returns spans in text order (phrase index, start) or the list of
/// phrases that could not be placed disjointly.
fn locate_phrases(text: &str, phrases: &[String]) -> Result<Vec<(usize, usize)>, Vec<String>> {
    let mut order: Vec<usize> = (0..phrases.len()).collect();
    order.sort_by_key(|&i| (usize::MAX - phrases[i].len(), i));
    let mut taken: Vec<(usize, usize)> = Vec::new(); // (start, end)
    let mut placed: Vec<(usize, usize)> = Vec::new(); // (phrase idx, start)
    let mut missing: Vec<usize> = Vec::new();
    for &idx in &order {
        let phrase = &phrases[idx];
        let mut from = 0;
        let mut found = None;
        while let Some(rel) = text.get(from..).and_then(|t| t.find(phrase.as_str())) {
            let start = from + rel;
            let end = start + phrase.len();
            if taken.iter().all(|&(s, e)| end <= s || start >= e) {
                found = Some(start);
                break;
            }
            from = start + 1;
        }
        match found {
            Some(start) => {
                taken.push((start, start + phrase.len()));
                placed.push((idx, start));
            }
            None => missing.push(idx),
        }
    }
    if missing.is_empty() {
        placed.sort_by_key(|&(_, start)| start);
        Ok(placed)
    } else {
        missing.sort_unstable();
        Err(missing.into_iter().map(|i| phrases[i].clone()).collect())
    }
}

/// Asks the language model for a caption containing every phrase verbatim
/// and converts the reply into a record; regenerates with feedback until
/// the retry budget runs out.
fn caption_with_phrases(
    image_id: &str,
    width: u32,
    height: u32,
    phrases: &[String],
    masks: &[BinaryMask],
    context: &str,
    clients: &Clients,
    max_retries: u32,
    diagnostics: &mut Vec<String>,
) -> Result<GcgRecord, ConvertError> {
    assert_eq!(phrases.len(), masks.len(), "one mask per phrase");
    let attempts = max_retries + 1;
    let mut feedback: Option<String> = None;
    let mut last_missing: Vec<String> = Vec::new();
    for _attempt in 0..attempts {
        let text =
            clients.rewrite_with_phrases(image_id, phrases, context, feedback.as_deref())?;
        if RESERVED.iter().any(|t| text.contains(t)) {
            last_missing =
                vec!["output must not contain the tokens <p>, </p>, or <SEG>".to_string()];
            feedback = Some(
                "Feedback: do not use the tokens <p>, </p>, or <SEG> anywhere in the caption."
                    .to_string(),
            );
            continue;
        }
        match locate_phrases(&text, phrases) {
            Ok(placed) => {
                for (idx, _) in &placed {
                    let n = text.matches(phrases[*idx].as_str()).count();
                    if n > 1 {
                        diagnostics.push(format!(
                            "image {image_id}: phrase {:?} occurs {n} times; first disjoint \
                             occurrence used",
                            phrases[*idx]
                        ));
                    }
                }
                let mut spans = Vec::with_capacity(placed.len());
                let mut ordered_masks = Vec::with_capacity(placed.len());
                for (seg, (idx, start)) in placed.iter().enumerate() {
                    spans.push(PhraseSpan {
                        char_start: *start,
                        char_end: start + phrases[*idx].len(),
                        phrase: phrases[*idx].clone(),
                        seg_index: seg,
                    });
                    ordered_masks.push(masks[*idx].clone());
                }
                let caption_raw = render_grounded(&text, &spans)?;
                let record = GcgRecord {
                    image_id: image_id.to_string(),
                    width,
                    height,
                    caption_raw,
                    masks: ordered_masks,
                    scores: None,
                    split: None,
                    flags: Vec::new(),
                };
                validate_converted_record(&record).map_err(|detail| {
                    ConvertError::RecordInvalid { image_id: image_id.to_string(), detail }
                })?;
                return Ok(record);
            }
            Err(missing) => {
                let quoted: Vec<String> = missing.iter().map(|m| format!("{m:?}")).collect();
                feedback = Some(format!(
                    "Feedback: the caption must contain the following phrases exactly as \
                     written, character for character, each as its own contiguous span: {}.",
                    quoted.join(", ")
                ));
                last_missing = missing;
            }
        }
    }
    Err(ConvertError::ValidationExhausted {
        image_id: image_id.to_string(),
        attempts,
        missing: last_missing,
    })
}

/// Folds `(phrase, mask)` pairs into unique phrases, unioning the masks of
/// duplicates (with a diagnostic).
fn dedup_phrases(
    image_id: &str,
    pairs: Vec<(String, BinaryMask)>,
    diagnostics: &mut Vec<String>,
) -> Result<(Vec<String>, Vec<BinaryMask>), MaskError> {
    let mut phrases: Vec<String> = Vec::new();
    let mut masks: Vec<BinaryMask> = Vec::new();
    for (phrase, mask) in pairs {
        match phrases.iter().position(|p| *p == phrase) {
            Some(i) => {
                masks[i] = mask_union(&masks[i], &mask)?;
                diagnostics.push(format!(
                    "image {image_id}: phrase {phrase:?} appears more than once; masks merged"
                ));
            }
            None => {
                phrases.push(phrase);
                masks.push(mask);
            }
        }
    }
    Ok((phrases, masks))
}

fn item_guard(
    image_id: &str,
    width: u32,
    height: u32,
    masks: &[BinaryMask],
) -> Result<(), ConvertError> {
    if width == 0 || height == 0 {
        return Err(ConvertError::EmptyItem {
            image_id: image_id.to_string(),
            detail: format!("degenerate image size {width}x{height}"),
        });
    }
    for m in masks {
        if m.width() != width || m.height() != height {
            return Err(ConvertError::EmptyItem {
                image_id: image_id.to_string(),
                detail: format!(
                    "mask grid {}x{} differs from image {width}x{height}",
                    m.width(),
                    m.height()
                ),
            });
        }
    }
    Ok(())
}

/// Converts one referring-expression item.
///
/// # Errors
/// `ValidationExhausted` when the language model never produces a caption
/// containing every expression verbatim; client errors pass through.
pub fn convert_refcocog_item(
    item: &RefCocogItem,
    clients: &Clients,
    max_retries: u32,
    diagnostics: &mut Vec<String>,
) -> Result<GcgRecord, ConvertError> {
    if item.expressions.is_empty() {
        return Err(ConvertError::EmptyItem {
            image_id: item.image_id.clone(),
            detail: "no referring expressions".to_string(),
        });
    }
    let pairs: Vec<(String, BinaryMask)> = item
        .expressions
        .iter()
        .map(|e| (e.expression.clone(), e.mask.clone()))
        .collect();
    item_guard(
        &item.image_id,
        item.width,
        item.height,
        &pairs.iter().map(|(_, m)| m.clone()).collect::<Vec<_>>(),
    )?;
    let (phrases, masks) = dedup_phrases(&item.image_id, pairs, diagnostics)?;
    caption_with_phrases(
        &item.image_id,
        item.width,
        item.height,
        &phrases,
        &masks,
        &item.context_caption,
        clients,
        max_retries,
        diagnostics,
    )
}

/// Converts one scene-graph-triplet item. Subject and object phrases keep
/// triplet order; the triplets themselves become the generation context.
///
/// # Errors
/// As for referring expressions.
pub fn convert_psg_item(
    item: &PsgItem,
    clients: &Clients,
    max_retries: u32,
    diagnostics: &mut Vec<String>,
) -> Result<GcgRecord, ConvertError> {
    if item.triplets.is_empty() {
        return Err(ConvertError::EmptyItem {
            image_id: item.image_id.clone(),
            detail: "no triplets".to_string(),
        });
    }
    let mut pairs: Vec<(String, BinaryMask)> = Vec::new();
    let mut structure = Vec::new();
    for t in &item.triplets {
        pairs.push((t.subject.clone(), t.subject_mask.clone()));
        pairs.push((t.object.clone(), t.object_mask.clone()));
        structure.push(format!("{} {} {}.", t.subject, t.predicate, t.object));
    }
    item_guard(
        &item.image_id,
        item.width,
        item.height,
        &pairs.iter().map(|(_, m)| m.clone()).collect::<Vec<_>>(),
    )?;
    let (phrases, masks) = dedup_phrases(&item.image_id, pairs, diagnostics)?;
    let context = if item.context_caption.is_empty() {
        structure.join(" ")
    } else {
        format!("{} {}", item.context_caption, structure.join(" "))
    };
    caption_with_phrases(
        &item.image_id,
        item.width,
        item.height,
        &phrases,
        &masks,
        &context,
        clients,
        max_retries,
        diagnostics,
    )
}

/// Converts one phrase-span item (caption with byte offsets). No language
/// model is involved: spans are taken as given, masks come from the
/// segmentation service, or from box rasters when `box_fallback` is set
/// (flagging the record).
///
/// # Errors
/// `SpanMismatch` when an offset does not reproduce its phrase,
/// `SegmenterUnavailable` without a service or fallback.
pub fn convert_flickr_item(
    item: &FlickrItem,
    segmenter: Option<&Clients>,
    box_fallback: bool,
    diagnostics: &mut Vec<String>,
) -> Result<GcgRecord, ConvertError> {
    item_guard(&item.image_id, item.width, item.height, &[])?;
    if segmenter.is_none() && !box_fallback {
        return Err(ConvertError::SegmenterUnavailable { image_id: item.image_id.clone() });
    }
    let mut ordered: Vec<&FlickrPhrase> = item.phrases.iter().collect();
    ordered.sort_by_key(|p| (p.char_start, p.phrase.len()));
    let mut spans: Vec<PhraseSpan> = Vec::new();
    let mut masks: Vec<BinaryMask> = Vec::new();
    let mut used_fallback = false;
    let mut cursor = 0usize;
    let img = crate::clients::ImageMeta {
        image_id: item.image_id.clone(),
        path: None,
        width: item.width,
        height: item.height,
    };
    for p in ordered {
        let end = p.char_start + p.phrase.len();
        if item.caption.get(p.char_start..end) != Some(p.phrase.as_str()) {
            return Err(ConvertError::SpanMismatch {
                image_id: item.image_id.clone(),
                phrase: p.phrase.clone(),
            });
        }
        if p.char_start < cursor {
            diagnostics.push(format!(
                "image {}: phrase {:?} overlaps an earlier span; dropped",
                item.image_id, p.phrase
            ));
            continue;
        }
        if p.boxes.is_empty() {
            diagnostics.push(format!(
                "image {}: phrase {:?} has no boxes; dropped",
                item.image_id, p.phrase
            ));
            continue;
        }
        let mut mask: Option<BinaryMask> = None;
        for b in &p.boxes {
            let m = match segmenter {
                Some(clients) => clients.segment(&img, b)?,
                None => {
                    used_fallback = true;
                    mask_from_box(b, item.width, item.height)?
                }
            };
            mask = Some(match mask {
                None => m,
                Some(u) => mask_union(&u, &m)?,
            });
        }
        spans.push(PhraseSpan {
            char_start: p.char_start,
            char_end: end,
            phrase: p.phrase.clone(),
            seg_index: spans.len(),
        });
        masks.push(mask.expect("boxes are non-empty"));
        cursor = end;
    }
    let caption_raw = render_grounded(&item.caption, &spans)?;
    let record = GcgRecord {
        image_id: item.image_id.clone(),
        width: item.width,
        height: item.height,
        caption_raw,
        masks,
        scores: None,
        split: None,
        flags: if used_fallback { vec!["box_mask_fallback".to_string()] } else { Vec::new() },
    };
    validate_converted_record(&record)
        .map_err(|detail| ConvertError::RecordInvalid { image_id: item.image_id.clone(), detail })?;
    Ok(record)
}

fn is_hard(err: &ConvertError) -> bool {
    matches!(err, ConvertError::Client(ClientError::Unavailable { .. }))
}

fn convert_batch<T>(
    items: &[T],
    mut one: impl FnMut(&T, &mut Vec<String>) -> Result<GcgRecord, ConvertError>,
    image_id: impl Fn(&T) -> &str,
) -> Result<ConversionOutcome, PipelineError> {
    let mut out = ConversionOutcome::default();
    for item in items {
        match one(item, &mut out.diagnostics) {
            Ok(record) => out.records.push(record),
            Err(e) if is_hard(&e) => match e {
                ConvertError::Client(c) => return Err(PipelineError::Client(c)),
                _ => unreachable!("is_hard only matches client errors"),
            },
            Err(e) => {
                out.rejected
                    .push(RejectedItem { image_id: image_id(item).to_string(), reason: e.to_string() });
            }
        }
    }
    Ok(out)
}

/// Batch conversion of referring-expression items; per-item validation
/// failures become `rejected` entries, service outages abort.
///
/// # Errors
/// `Client` when a model service is unavailable.
pub fn convert_refcocog(
    items: &[RefCocogItem],
    clients: &Clients,
    max_retries: u32,
) -> Result<ConversionOutcome, PipelineError> {
    convert_batch(
        items,
        |item, diags| convert_refcocog_item(item, clients, max_retries, diags),
        |item| &item.image_id,
    )
}

/// Batch conversion of triplet items.
///
/// # Errors
/// `Client` when a model service is unavailable.
pub fn convert_psg(
    items: &[PsgItem],
    clients: &Clients,
    max_retries: u32,
) -> Result<ConversionOutcome, PipelineError> {
    convert_batch(
        items,
        |item, diags| convert_psg_item(item, clients, max_retries, diags),
        |item| &item.image_id,
    )
}

/// Batch conversion of phrase-span items.
///
/// # Errors
/// `Client` when the segmentation service is unavailable.
pub fn convert_flickr(
    items: &[FlickrItem],
    segmenter: Option<&Clients>,
    box_fallback: bool,
) -> Result<ConversionOutcome, PipelineError> {
    convert_batch(
        items,
        |item, diags| convert_flickr_item(item, segmenter, box_fallback, diags),
        |item| &item.image_id,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clients::{Role, ScriptedTransport};
    use crate::synthetic::SyntheticTransport;
    use serde_json::json;
    use std::sync::Arc;

    fn rect(w: u32, h: u32, x0: u32, y0: u32, x1: u32, y1: u32) -> BinaryMask {
        mask_from_box(&BBox::new(x0, y0, x1, y1).unwrap(), w, h).unwrap()
    }

    fn synth_clients() -> Clients {
        Clients::with_default_models(Arc::new(SyntheticTransport::new(7)))
    }

    #[test]
    fn refcocog_conversion_keeps_phrases_verbatim() {
        let item = RefCocogItem {
            image_id: "r1".to_string(),
            width: 16,
            height: 16,
            context_caption: "two things".to_string(),
            expressions: vec![
                RefExpression {
                    expression: "the red right hand".to_string(),
                    mask: rect(16, 16, 0, 0, 4, 4),
                },
                RefExpression {
                    expression: "a dusty lamp".to_string(),
                    mask: rect(16, 16, 8, 8, 12, 12),
                },
            ],
        };
        let out = convert_refcocog(&[item], &synth_clients(), 2).unwrap();
        assert!(out.rejected.is_empty());
        assert_eq!(out.records.len(), 1);
        let record = &out.records[0];
        validate_converted_record(record).unwrap();
        let parsed = parse_grounded(&record.caption_raw, ParseMode::Strict).unwrap();
        let phrases: Vec<&str> = parsed.spans.iter().map(|s| s.phrase.as_str()).collect();
        assert!(phrases.contains(&"the red right hand"));
        assert!(phrases.contains(&"a dusty lamp"));
        // Masks follow caption order: whichever phrase comes first in the
        // text owns seg 0.
        let first = &parsed.spans[0].phrase;
        let expected_area = if first == "the red right hand" { 16 } else { 16 };
        assert_eq!(record.masks[0].area(), expected_area);
    }

    #[test]
    fn paraphrasing_model_exhausts_validation() {
        // The scripted model reworded a phrase on all three attempts.
        let script = ScriptedTransport::new();
        for _ in 0..3 {
            script.push(Role::TextLlm, json!({"text": "A crimson hand and a dusty lamp."}));
        }
        let clients = Clients::with_default_models(Arc::new(script));
        let item = RefCocogItem {
            image_id: "r2".to_string(),
            width: 8,
            height: 8,
            context_caption: String::new(),
            expressions: vec![
                RefExpression {
                    expression: "the red right hand".to_string(),
                    mask: rect(8, 8, 0, 0, 4, 4),
                },
                RefExpression {
                    expression: "a dusty lamp".to_string(),
                    mask: rect(8, 8, 4, 4, 8, 8),
                },
            ],
        };
        let mut diags = Vec::new();
        let err = convert_refcocog_item(&item, &clients, 2, &mut diags).unwrap_err();
        match err {
            ConvertError::ValidationExhausted { attempts, missing, .. } => {
                assert_eq!(attempts, 3);
                assert_eq!(missing, vec!["the red right hand".to_string()]);
            }
            other => panic!("expected ValidationExhausted, got {other}"),
        }
        // Batch form records the rejection and keeps going.
        let script = ScriptedTransport::new();
        for _ in 0..3 {
            script.push(Role::TextLlm, json!({"text": "A crimson hand and a dusty lamp."}));
        }
        let clients = Clients::with_default_models(Arc::new(script));
        let out = convert_refcocog(&[item], &clients, 2).unwrap();
        assert!(out.records.is_empty());
        assert_eq!(out.rejected.len(), 1);
        assert!(out.rejected[0].reason.contains("red right hand"));
    }

    #[test]
    fn feedback_retry_can_succeed() {
        let script = ScriptedTransport::new();
        script.push(Role::TextLlm, json!({"text": "A hand rests on a table."}));
        script.push(Role::TextLlm, json!({"text": "the red right hand rests on a table."}));
        let clients = Clients::with_default_models(Arc::new(script));
        let item = RefCocogItem {
            image_id: "r3".to_string(),
            width: 8,
            height: 8,
            context_caption: String::new(),
            expressions: vec![RefExpression {
                expression: "the red right hand".to_string(),
                mask: rect(8, 8, 0, 0, 4, 4),
            }],
        };
        let mut diags = Vec::new();
        let record = convert_refcocog_item(&item, &clients, 2, &mut diags).unwrap();
        assert!(record.caption_raw.contains("<p>the red right hand</p><SEG>"));
    }

    #[test]
    fn duplicate_expressions_merge_masks() {
        let item = RefCocogItem {
            image_id: "r4".to_string(),
            width: 8,
            height: 8,
            context_caption: String::new(),
            expressions: vec![
                RefExpression { expression: "a cat".to_string(), mask: rect(8, 8, 0, 0, 2, 2) },
                RefExpression { expression: "a cat".to_string(), mask: rect(8, 8, 4, 4, 6, 6) },
            ],
        };
        let out = convert_refcocog(&[item], &synth_clients(), 2).unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.records[0].masks.len(), 1);
        assert_eq!(out.records[0].masks[0].area(), 8);
        assert!(out.diagnostics.iter().any(|d| d.contains("more than once")));
    }

    #[test]
    fn nested_phrases_get_disjoint_spans() {
        let script = ScriptedTransport::new();
        script.push(
            Role::TextLlm,
            json!({"text": "a man with a hat stands while a man watches."}),
        );
        let clients = Clients::with_default_models(Arc::new(script));
        let item = RefCocogItem {
            image_id: "r5".to_string(),
            width: 8,
            height: 8,
            context_caption: String::new(),
            expressions: vec![
                RefExpression { expression: "a man".to_string(), mask: rect(8, 8, 0, 0, 2, 2) },
                RefExpression {
                    expression: "a man with a hat".to_string(),
                    mask: rect(8, 8, 4, 0, 8, 4),
                },
            ],
        };
        let mut diags = Vec::new();
        let record = convert_refcocog_item(&item, &clients, 0, &mut diags).unwrap();
        let parsed = parse_grounded(&record.caption_raw, ParseMode::Strict).unwrap();
        assert_eq!(parsed.spans.len(), 2);
        assert_eq!(parsed.spans[0].phrase, "a man with a hat");
        assert_eq!(parsed.spans[1].phrase, "a man");
        assert!(parsed.spans[0].char_end <= parsed.spans[1].char_start);
    }

    #[test]
    fn psg_triplets_share_subject_masks() {
        let item = PsgItem {
            image_id: "p1".to_string(),
            width: 16,
            height: 16,
            context_caption: String::new(),
            triplets: vec![
                PsgTriplet {
                    subject: "a man".to_string(),
                    predicate: "holding".to_string(),
                    object: "a racket".to_string(),
                    subject_mask: rect(16, 16, 0, 0, 4, 4),
                    object_mask: rect(16, 16, 8, 0, 12, 4),
                },
                PsgTriplet {
                    subject: "a man".to_string(),
                    predicate: "wearing".to_string(),
                    object: "a cap".to_string(),
                    subject_mask: rect(16, 16, 0, 0, 4, 4),
                    object_mask: rect(16, 16, 8, 8, 10, 10),
                },
            ],
        };
        let out = convert_psg(&[item], &synth_clients(), 2).unwrap();
        assert!(out.rejected.is_empty());
        let record = &out.records[0];
        // Three unique phrases: the duplicated subject collapses.
        assert_eq!(record.masks.len(), 3);
        validate_converted_record(record).unwrap();
    }

    #[test]
    fn flickr_conversion_without_llm() {
        let item = FlickrItem {
            image_id: "f1".to_string(),
            width: 16,
            height: 16,
            caption: "A man walks a dog.".to_string(),
            phrases: vec![
                FlickrPhrase {
                    phrase: "A man".to_string(),
                    char_start: 0,
                    boxes: vec![BBox::new(0, 0, 4, 4).unwrap()],
                },
                FlickrPhrase {
                    phrase: "a dog".to_string(),
                    char_start: 12,
                    boxes: vec![
                        BBox::new(8, 8, 12, 12).unwrap(),
                        BBox::new(12, 12, 16, 16).unwrap(),
                    ],
                },
            ],
        };
        // With the segmentation service.
        let out = convert_flickr(&[item.clone()], Some(&synth_clients()), false).unwrap();
        let record = &out.records[0];
        assert!(record.flags.is_empty());
        assert_eq!(record.caption_raw, "<p>A man</p><SEG> walks <p>a dog</p><SEG>.");
        assert_eq!(record.masks[1].area(), 32);
        // Box fallback flags the record but yields the same rectangles.
        let out2 = convert_flickr(&[item], None, true).unwrap();
        let r2 = &out2.records[0];
        assert_eq!(r2.flags, vec!["box_mask_fallback".to_string()]);
        assert_eq!(r2.masks, record.masks);
        // Neither service nor fallback: rejected.
        let item2 = FlickrItem {
            image_id: "f2".to_string(),
            width: 8,
            height: 8,
            caption: "x".to_string(),
            phrases: vec![],
        };
        let out3 = convert_flickr(&[item2], None, false).unwrap();
        assert_eq!(out3.rejected.len(), 1);
        assert!(out3.rejected[0].reason.contains("box fallback"));
    }

    #[test]
    fn flickr_span_mismatch_is_rejected() {
        let item = FlickrItem {
            image_id: "f3".to_string(),
            width: 8,
            height: 8,
            caption: "A man walks.".to_string(),
            phrases: vec![FlickrPhrase {
                phrase: "a dog".to_string(),
                char_start: 0,
                boxes: vec![BBox::new(0, 0, 2, 2).unwrap()],
            }],
        };
        let out = convert_flickr(&[item], None, true).unwrap();
        assert_eq!(out.rejected.len(), 1);
        assert!(out.rejected[0].reason.contains("does not match"));
    }

    #[test]
    fn flickr_overlapping_spans_drop_later_ones() {
        let item = FlickrItem {
            image_id: "f4".to_string(),
            width: 8,
            height: 8,
            caption: "a man with a hat".to_string(),
            phrases: vec![
                FlickrPhrase {
                    phrase: "a man with a hat".to_string(),
                    char_start: 0,
                    boxes: vec![BBox::new(0, 0, 8, 8).unwrap()],
                },
                FlickrPhrase {
                    phrase: "a hat".to_string(),
                    char_start: 11,
                    boxes: vec![BBox::new(2, 2, 4, 4).unwrap()],
                },
            ],
        };
        let out = convert_flickr(&[item], None, true).unwrap();
        assert_eq!(out.records[0].masks.len(), 1);
        assert!(out.diagnostics.iter().any(|d| d.contains("overlaps")));
    }

    #[test]
    fn validator_spots_tampered_records() {
        let out = convert_flickr(
            &[FlickrItem {
                image_id: "f5".to_string(),
                width: 8,
                height: 8,
                caption: "a cat sits".to_string(),
                phrases: vec![FlickrPhrase {
                    phrase: "a cat".to_string(),
                    char_start: 0,
                    boxes: vec![BBox::new(0, 0, 2, 2).unwrap()],
                }],
            }],
            None,
            true,
        )
        .unwrap();
        let mut record = out.records[0].clone();
        validate_converted_record(&record).unwrap();
        record.masks.push(BinaryMask::empty(8, 8));
        assert!(validate_converted_record(&record).is_err());
        let mut record2 = out.records[0].clone();
        record2.caption_raw = "<p>a cat</p> sits".to_string(); // seg token gone
        assert!(validate_converted_record(&record2).is_err());
    }
}
