//! The per-image annotation record the pipeline accumulates level by
//! level: fused objects first, then relationships and scene context, then
//! the verified dense caption, then extra context.
//!
//! Records serialize to canonical JSON (struct field order, sorted maps),
//! so byte equality is meaningful and checkpoint hashes are stable.

use crate::fusion::FusedObject;
use crate::landmark::Landmark;
use crate::scene::{Relationship, VerifyStatus};
use gcgkit_core::grounded::{bind_masks, parse_grounded, GroundedCaption, ParseMode};
use gcgkit_core::mask::BinaryMask;
use gcgkit_core::FormatError;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// A dense caption in wire form: tagged text plus one mask per `<SEG>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseCaption {
    pub caption_raw: String,
    pub masks: Vec<BinaryMask>,
}

impl DenseCaption {
    pub fn from_caption(c: &GroundedCaption) -> Self {
        DenseCaption { caption_raw: c.render(), masks: c.masks.clone() }
    }

    /// # Errors
    /// Any strict-parse or binding failure of the stored text.
    pub fn to_caption(&self) -> Result<GroundedCaption, FormatError> {
        let parsed = parse_grounded(&self.caption_raw, ParseMode::Strict)?;
        bind_masks(&parsed, self.masks.clone(), None)
    }
}

/// One verification attempt of the dense caption.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationLogEntry {
    /// 1-based attempt number.
    pub attempt: u32,
    pub status: VerifyStatus,
    /// What the attempt failed on: unmatched checklist items, or a note
    /// that the caption could not be parsed at all.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub missing: Vec<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum RecordError {
    #[error("record {image_id}: {detail}")]
    Invalid { image_id: String, detail: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrandRecord {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub objects: Vec<FusedObject>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub relationships: Vec<Relationship>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landmark: Option<Landmark>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub short_captions: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dense_caption: Option<DenseCaption>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub verification_log: Vec<VerificationLogEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extra_context: Option<String>,
    /// Warnings accumulated along the way (dropped phrases, fusion notes).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

impl GrandRecord {
    pub fn new(image_id: &str, width: u32, height: u32) -> Self {
        GrandRecord {
            image_id: image_id.to_string(),
            width,
            height,
            objects: Vec::new(),
            relationships: Vec::new(),
            landmark: None,
            short_captions: Vec::new(),
            dense_caption: None,
            verification_log: Vec::new(),
            extra_context: None,
            diagnostics: Vec::new(),
        }
    }

    /// Whether the final caption attempt passed verification. `None` while
    /// there is no dense caption yet.
    pub fn caption_verified(&self) -> Option<bool> {
        self.verification_log.last().map(|e| e.status == VerifyStatus::Verified)
    }

    /// Structural invariants that hold for every checkpointed record.
    ///
    /// # Errors
    /// `Invalid` describing the first violated invariant.
    pub fn validate(&self) -> Result<(), RecordError> {
        let fail = |detail: String| {
            Err(RecordError::Invalid { image_id: self.image_id.clone(), detail })
        };
        if self.image_id.is_empty() {
            return fail("empty image id".to_string());
        }
        if self.width == 0 || self.height == 0 {
            return fail(format!("degenerate image size {}x{}", self.width, self.height));
        }
        for (i, obj) in self.objects.iter().enumerate() {
            if obj.object_id != i as u32 {
                return fail(format!("object ids not dense: slot {i} holds id {}", obj.object_id));
            }
            if obj.labels.is_empty() {
                return fail(format!("object {i} has no labels"));
            }
            if let Some(m) = &obj.mask {
                if m.width() != self.width || m.height() != self.height {
                    return fail(format!("object {i} mask grid differs from image size"));
                }
            }
        }
        for (i, r) in self.relationships.iter().enumerate() {
            if r.subject_ids.is_empty() {
                return fail(format!("relationship {i} has no subjects"));
            }
            for id in r.subject_ids.iter().chain(&r.object_ids) {
                if *id as usize >= self.objects.len() {
                    return fail(format!("relationship {i} references unknown object {id}"));
                }
            }
        }
        if self.dense_caption.is_some() != !self.verification_log.is_empty() {
            return fail("dense caption and verification log must appear together".to_string());
        }
        if let Some(dc) = &self.dense_caption {
            let cap = dc
                .to_caption()
                .map_err(|e| RecordError::Invalid {
                    image_id: self.image_id.clone(),
                    detail: format!("dense caption does not parse: {e}"),
                })?;
            for m in &cap.masks {
                if m.width() != self.width || m.height() != self.height {
                    return fail("dense caption mask grid differs from image size".to_string());
                }
            }
        }
        Ok(())
    }

    /// Canonical serialization; checkpoint hashes are over these bytes.
    pub fn to_canonical_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("records serialize")
    }

    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_canonical_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::Layer;
    use gcgkit_core::mask::BBox;

    fn record_with_object() -> GrandRecord {
        let mut r = GrandRecord::new("img", 16, 16);
        r.objects.push(FusedObject {
            object_id: 0,
            bbox: BBox::new(0, 0, 8, 8).unwrap(),
            mask: None,
            labels: vec!["dog".to_string()],
            attributes: vec![],
            score: 0.9,
            corroborators: ["a", "b", "c"].iter().map(|s| s.to_string()).collect(),
            depth_med: Some(0.5),
            layer: Some(Layer::ImmediateForeground),
        });
        r
    }

    #[test]
    fn fresh_record_validates_and_round_trips() {
        let r = record_with_object();
        r.validate().unwrap();
        let bytes = r.to_canonical_bytes();
        let back: GrandRecord = serde_json::from_slice(&bytes).unwrap();
        assert_eq!(r, back);
        assert_eq!(r.content_hash(), back.content_hash());
    }

    #[test]
    fn non_dense_object_ids_rejected() {
        let mut r = record_with_object();
        r.objects[0].object_id = 5;
        assert!(r.validate().is_err());
    }

    #[test]
    fn dangling_relationship_rejected() {
        let mut r = record_with_object();
        r.relationships.push(Relationship {
            subject_ids: vec![9],
            object_ids: vec![],
            predicate: "floats".to_string(),
            source_caption: 0,
        });
        assert!(r.validate().is_err());
    }

    #[test]
    fn caption_and_log_must_travel_together() {
        let mut r = record_with_object();
        r.verification_log.push(VerificationLogEntry {
            attempt: 1,
            status: VerifyStatus::Verified,
            missing: vec![],
        });
        assert!(r.validate().is_err());
        r.verification_log.clear();

        let cap = GroundedCaption::new(
            "a dog".to_string(),
            vec![gcgkit_core::grounded::PhraseSpan {
                char_start: 0,
                char_end: 5,
                phrase: "a dog".to_string(),
                seg_index: 0,
            }],
            vec![BinaryMask::empty(16, 16)],
            None,
        )
        .unwrap();
        r.dense_caption = Some(DenseCaption::from_caption(&cap));
        assert!(r.validate().is_err()); // caption without log
        r.verification_log.push(VerificationLogEntry {
            attempt: 1,
            status: VerifyStatus::Verified,
            missing: vec![],
        });
        r.validate().unwrap();
        assert_eq!(r.caption_verified(), Some(true));
    }

    #[test]
    fn dense_caption_wire_round_trips() {
        let cap = GroundedCaption::new(
            "a dog runs".to_string(),
            vec![gcgkit_core::grounded::PhraseSpan {
                char_start: 0,
                char_end: 5,
                phrase: "a dog".to_string(),
                seg_index: 0,
            }],
            vec![BinaryMask::empty(16, 16)],
            None,
        )
        .unwrap();
        let wire = DenseCaption::from_caption(&cap);
        assert_eq!(wire.caption_raw, "<p>a dog</p><SEG> runs");
        let back = wire.to_caption().unwrap();
        assert_eq!(back.plain_text, cap.plain_text);
        assert_eq!(back.spans, cap.spans);
    }

    #[test]
    fn content_hash_tracks_content() {
        let a = record_with_object();
        let mut b = record_with_object();
        assert_eq!(a.content_hash(), b.content_hash());
        b.diagnostics.push("note".to_string());
        assert_ne!(a.content_hash(), b.content_hash());
    }
}
