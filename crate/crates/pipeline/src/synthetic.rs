//! Procedurally generated model responses.
//!
//! `SyntheticTransport` answers every role from a small deterministic world
//! derived from (seed, image id): a handful of disjoint objects on the
//! image diagonal with fixed labels and depths. All roles agree about that
//! world, so detectors corroborate each other, the depth map matches the
//! per-object depths, captions mention the objects, and the grounder can
//! localize them. Byte-identical requests always get byte-identical
//! responses, which makes whole pipeline runs reproducible.

use crate::clients::{depth_to_b64, request_hash, ClientError, ClientTransport, Role};
use crate::landmark::TAXONOMY;
use crate::scene::extract_noun_phrases;
use gcgkit_core::mask::{mask_from_box, BBox, BinaryMask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

const VOCAB: [&str; 10] =
    ["man", "woman", "dog", "cat", "car", "tree", "bench", "bicycle", "house", "bird"];
const ADJECTIVES: [&str; 8] =
    ["red", "blue", "large", "small", "old", "bright", "dark", "wooden"];
const CONTEXTS: [&str; 4] = [
    "The light suggests late afternoon, and the area feels calm and lived in.",
    "Moments earlier the spot was likely busier; a quiet pause has settled over it.",
    "Just out of frame one would expect more of the same surroundings continuing on.",
    "The weather looks mild, and nothing hints at anything unusual about the day.",
];
const REWRITE_TEMPLATES: [&str; 3] =
    ["{} can be seen here.", "Close by, {} draws the eye.", "Further off, {} completes the scene."];

fn hash64(parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0x1f]);
    }
    let d = h.finalize();
    u64::from_le_bytes([d[0], d[1], d[2], d[3], d[4], d[5], d[6], d[7]])
}

/// One object of the synthetic world.
#[derive(Debug, Clone, PartialEq)]
pub struct TrueObject {
    pub bbox: BBox,
    pub label: &'static str,
    pub depth: f32,
}

pub struct SyntheticTransport {
    seed: u64,
}

impl SyntheticTransport {
    pub fn new(seed: u64) -> Self {
        SyntheticTransport { seed }
    }

    /// The objects every role agrees on for this image: 3 to 5 disjoint
    /// boxes along the diagonal, distinct labels, strictly falling depth.
    pub fn expected_objects(&self, image_id: &str, width: u32, height: u32) -> Vec<TrueObject> {
        let h = hash64(&[&self.seed.to_string(), "objects", image_id]);
        let n = 3 + (h % 3) as usize;
        let start = ((h >> 8) % VOCAB.len() as u64) as usize;
        let cw = (width / (n as u32 + 1)).max(1);
        let ch = (height / (n as u32 + 1)).max(1);
        (0..n)
            .map(|i| {
                let x0 = (i as u32 * cw).min(width - 1);
                let y0 = (i as u32 * ch).min(height - 1);
                let x1 = (x0 + cw).min(width).max(x0 + 1);
                let y1 = (y0 + ch).min(height).max(y0 + 1);
                TrueObject {
                    bbox: BBox::new(x0, y0, x1, y1).expect("diagonal cells are non-degenerate"),
                    label: VOCAB[(start + i) % VOCAB.len()],
                    depth: 0.9 - 0.8 * (i as f32) / ((n - 1).max(1) as f32),
                }
            })
            .collect()
    }

    /// The short captions the image captioner reports, pairing objects up.
    pub fn expected_captions(&self, image_id: &str, width: u32, height: u32) -> Vec<String> {
        let objects = self.expected_objects(image_id, width, height);
        let mut captions = Vec::new();
        let mut i = 0;
        while i < objects.len() {
            if i + 1 < objects.len() {
                captions.push(format!(
                    "A {} next to a {}.",
                    objects[i].label,
                    objects[i + 1].label
                ));
            } else {
                captions.push(format!("A {} stands alone.", objects[i].label));
            }
            i += 2;
        }
        captions
    }

    fn str_field<'a>(req: &'a Value, name: &str, role: Role) -> Result<&'a str, ClientError> {
        req.get(name).and_then(Value::as_str).ok_or(ClientError::Protocol {
            role: role.path(),
            detail: format!("synthetic transport needs string field {name:?}"),
        })
    }

    fn dims(req: &Value, role: Role) -> Result<(u32, u32), ClientError> {
        let get = |name: &str| {
            req.get(name).and_then(Value::as_u64).ok_or(ClientError::Protocol {
                role: role.path(),
                detail: format!("synthetic transport needs numeric field {name:?}"),
            })
        };
        let (w, h) = (get("width")?, get("height")?);
        if w == 0 || h == 0 || w > u32::MAX as u64 || h > u32::MAX as u64 {
            return Err(ClientError::Protocol {
                role: role.path(),
                detail: format!("bad image size {w}x{h}"),
            });
        }
        Ok((w as u32, h as u32))
    }

    fn detect(&self, req: &Value) -> Result<Value, ClientError> {
        let role = Role::Detector;
        let image_id = Self::str_field(req, "image_id", role)?;
        let model_id = Self::str_field(req, "model_id", role)?;
        let (w, h) = Self::dims(req, role)?;
        let jitter = (hash64(&[&self.seed.to_string(), "jitter", model_id, image_id]) % 2) as i64;
        let mut detections = Vec::new();
        for (i, obj) in self.expected_objects(image_id, w, h).iter().enumerate() {
            // Models disagree by at most one pixel, and only on boxes big
            // enough that the shifted copies still overlap decisively.
            let wide = obj.bbox.x_max - obj.bbox.x_min > 8 && obj.bbox.y_max - obj.bbox.y_min > 8;
            let j = if wide { jitter } else { 0 };
            let shift = |v: u32, lo: i64, hi: i64| -> u32 { (v as i64 + j).clamp(lo, hi) as u32 };
            let x0 = shift(obj.bbox.x_min, 0, w as i64 - 1);
            let y0 = shift(obj.bbox.y_min, 0, h as i64 - 1);
            let x1 = shift(obj.bbox.x_max, x0 as i64 + 1, w as i64);
            let y1 = shift(obj.bbox.y_max, y0 as i64 + 1, h as i64);
            let score = 0.55
                + (hash64(&[&self.seed.to_string(), "score", model_id, image_id, &i.to_string()])
                    % 40) as f64
                    / 100.0;
            detections.push(json!({
                "bbox": [x0, y0, x1, y1],
                "score": score,
                "label": obj.label,
            }));
        }
        Ok(json!({ "detections": detections }))
    }

    fn region_attributes(&self, req: &Value) -> Result<Value, ClientError> {
        let role = Role::RegionCaptioner;
        let image_id = Self::str_field(req, "image_id", role)?;
        let object_id = req.get("object_id").and_then(Value::as_u64).unwrap_or(0);
        let h = hash64(&[&self.seed.to_string(), "attrs", image_id, &object_id.to_string()]);
        let mut attrs = vec![ADJECTIVES[(h % 8) as usize].to_string()];
        if h % 2 == 0 {
            let second = ADJECTIVES[((h >> 8) % 8) as usize].to_string();
            if second != attrs[0] {
                attrs.push(second);
            }
        }
        Ok(json!({ "attributes": attrs }))
    }

    fn captions(&self, req: &Value) -> Result<Value, ClientError> {
        let role = Role::ImageCaptioner;
        let image_id = Self::str_field(req, "image_id", role)?;
        let (w, h) = Self::dims(req, role)?;
        Ok(json!({ "captions": self.expected_captions(image_id, w, h) }))
    }

    fn landmark(&self, req: &Value) -> Result<Value, ClientError> {
        let role = Role::LandmarkClassifier;
        let image_id = Self::str_field(req, "image_id", role)?;
        let mut pairs: Vec<(&str, &str)> = Vec::new();
        for (primary, fines) in TAXONOMY {
            for fine in *fines {
                pairs.push((primary, fine));
            }
        }
        let pick = pairs[(hash64(&[&self.seed.to_string(), "landmark", image_id])
            % pairs.len() as u64) as usize];
        Ok(json!({ "primary": pick.0, "fine": pick.1 }))
    }

    fn ground(&self, req: &Value) -> Result<Value, ClientError> {
        let role = Role::PhraseGrounder;
        let image_id = Self::str_field(req, "image_id", role)?;
        let caption = Self::str_field(req, "caption", role)?;
        let (w, h) = Self::dims(req, role)?;
        let lower = caption.to_lowercase();
        let boundary_ok = |s: usize, e: usize| {
            let before = lower[..s].chars().next_back().map_or(true, |c| !c.is_alphanumeric());
            let after = lower[e..].chars().next().map_or(true, |c| !c.is_alphanumeric());
            before && after
        };
        let mut found: Vec<(usize, usize, BBox)> = Vec::new();
        for obj in self.expected_objects(image_id, w, h) {
            for article in ["a", "an", "the"] {
                let pat = format!("{article} {}", obj.label);
                let mut from = 0;
                while let Some(rel) = lower[from..].find(&pat) {
                    let s = from + rel;
                    let e = s + pat.len();
                    if boundary_ok(s, e) {
                        found.push((s, e, obj.bbox));
                        break;
                    }
                    from = e;
                }
            }
        }
        found.sort_by_key(|(s, e, _)| (*s, *e));
        let phrases: Vec<Value> = found
            .into_iter()
            .map(|(s, e, bbox)| json!({ "phrase": &caption[s..e], "bbox": bbox }))
            .collect();
        Ok(json!({ "phrases": phrases }))
    }

    fn depth(&self, req: &Value) -> Result<Value, ClientError> {
        let role = Role::DepthEstimator;
        let image_id = Self::str_field(req, "image_id", role)?;
        let (w, h) = Self::dims(req, role)?;
        let mut values = vec![0.02f32; (w as usize) * (h as usize)];
        let mut objects = self.expected_objects(image_id, w, h);
        // Paint far to near so closer objects win any overlap.
        objects.sort_by(|a, b| a.depth.partial_cmp(&b.depth).expect("synthetic depths are finite"));
        for obj in &objects {
            for y in obj.bbox.y_min..obj.bbox.y_max {
                for x in obj.bbox.x_min..obj.bbox.x_max {
                    values[(y as usize) * (w as usize) + (x as usize)] = obj.depth;
                }
            }
        }
        Ok(json!({ "width": w, "height": h, "depth_b64": depth_to_b64(&values) }))
    }

    fn segment(&self, req: &Value) -> Result<Value, ClientError> {
        let role = Role::Segmenter;
        let (w, h) = Self::dims(req, role)?;
        let bbox: BBox = serde_json::from_value(
            req.get("bbox")
                .cloned()
                .ok_or(ClientError::Protocol {
                    role: role.path(),
                    detail: "synthetic transport needs field \"bbox\"".to_string(),
                })?,
        )
        .map_err(|e| ClientError::Protocol { role: role.path(), detail: format!("bad bbox: {e}") })?;
        let mask = mask_from_box(&bbox, w, h).unwrap_or_else(|_| BinaryMask::empty(w, h));
        Ok(json!({ "mask": mask }))
    }

    fn text(&self, req: &Value) -> Result<Value, ClientError> {
        let role = Role::TextLlm;
        let kind = Self::str_field(req, "kind", role)?;
        match kind {
            "dense_caption" => {
                let objects = req.get("objects").and_then(Value::as_array).ok_or(
                    ClientError::Protocol {
                        role: role.path(),
                        detail: "dense_caption request needs \"objects\"".to_string(),
                    },
                )?;
                let mut parts = Vec::new();
                for o in objects {
                    let id = o.get("id").and_then(Value::as_u64).unwrap_or(0);
                    let label = o.get("label").and_then(Value::as_str).unwrap_or("thing");
                    parts.push(format!("[[{id}|a {label}]]"));
                }
                let text = if parts.is_empty() {
                    "An empty scene.".to_string()
                } else {
                    format!("There is {}.", parts.join(", "))
                };
                Ok(json!({ "text": text }))
            }
            "checklist" => {
                let caption = Self::str_field(req, "caption", role)?;
                Ok(json!({ "text": extract_noun_phrases(caption).join("\n") }))
            }
            "extra_context" => {
                let image_id = Self::str_field(req, "image_id", role)?;
                let pick = CONTEXTS
                    [(hash64(&[&self.seed.to_string(), "ctx", image_id]) % 4) as usize];
                Ok(json!({ "text": pick }))
            }
            "grounding_rewrite" => {
                let phrases = req.get("phrases").and_then(Value::as_array).ok_or(
                    ClientError::Protocol {
                        role: role.path(),
                        detail: "grounding_rewrite request needs \"phrases\"".to_string(),
                    },
                )?;
                let sentences: Vec<String> = phrases
                    .iter()
                    .enumerate()
                    .map(|(i, p)| {
                        let phrase = p.as_str().unwrap_or("");
                        REWRITE_TEMPLATES[i % REWRITE_TEMPLATES.len()].replace("{}", phrase)
                    })
                    .collect();
                Ok(json!({ "text": sentences.join(" ") }))
            }
            other => Err(ClientError::Protocol {
                role: role.path(),
                detail: format!("unknown text kind {other:?}"),
            }),
        }
    }

    fn embed(&self, req: &Value) -> Result<Value, ClientError> {
        let role = Role::Embedder;
        let texts = req.get("texts").and_then(Value::as_array).ok_or(ClientError::Protocol {
            role: role.path(),
            detail: "embedder request needs \"texts\"".to_string(),
        })?;
        let embeddings: Vec<Vec<f64>> = texts
            .iter()
            .map(|t| {
                let text = t.as_str().unwrap_or("");
                let mut rng = ChaCha8Rng::seed_from_u64(hash64(&[
                    &self.seed.to_string(),
                    "embed",
                    text,
                ]));
                (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()
            })
            .collect();
        Ok(json!({ "embeddings": embeddings }))
    }
}

impl ClientTransport for SyntheticTransport {
    fn call(&self, role: Role, request: &Value) -> Result<Value, ClientError> {
        // The hash is not used to answer, but computing it keeps request
        // canonicalization on the hot path for every transport alike.
        let _ = request_hash(request);
        match role {
            Role::Detector => self.detect(request),
            Role::RegionCaptioner => self.region_attributes(request),
            Role::ImageCaptioner => self.captions(request),
            Role::LandmarkClassifier => self.landmark(request),
            Role::PhraseGrounder => self.ground(request),
            Role::DepthEstimator => self.depth(request),
            Role::Segmenter => self.segment(request),
            Role::TextLlm => self.text(request),
            Role::Embedder => self.embed(request),
        }
    }
}
