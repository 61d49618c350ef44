//! Model service clients.
//!
//! Every heavyweight model sits behind an HTTP service speaking JSON: the
//! request is POSTed to `{endpoint}/{role}` and the reply is a JSON object.
//! The `ClientTransport` trait abstracts the wire so the same pipeline code
//! runs against live services (`HttpTransport`), recorded fixtures
//! (`MockTransport`), or a procedurally generated stand-in world
//! (`SyntheticTransport` in the sibling module). Requests are identified by
//! the SHA-256 of their canonical JSON, which is what fixture files are
//! named after.

use crate::fusion::{DepthMap, MaskedDetection, ModelDetections};
use crate::landmark::Landmark;
use crate::scene::GroundedPhrase;
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use gcgkit_core::mask::{BBox, BinaryMask};
use gcgkit_core::textsim::TextSimProvider;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, HashMap, VecDeque};
use std::path::PathBuf;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Detector,
    RegionCaptioner,
    ImageCaptioner,
    LandmarkClassifier,
    PhraseGrounder,
    DepthEstimator,
    Segmenter,
    TextLlm,
    Embedder,
}

impl Role {
    pub const ALL: [Role; 9] = [
        Role::Detector,
        Role::RegionCaptioner,
        Role::ImageCaptioner,
        Role::LandmarkClassifier,
        Role::PhraseGrounder,
        Role::DepthEstimator,
        Role::Segmenter,
        Role::TextLlm,
        Role::Embedder,
    ];

    /// URL path segment and fixture directory name.
    pub fn path(&self) -> &'static str {
        match self {
            Role::Detector => "detector",
            Role::RegionCaptioner => "region_captioner",
            Role::ImageCaptioner => "image_captioner",
            Role::LandmarkClassifier => "landmark_classifier",
            Role::PhraseGrounder => "phrase_grounder",
            Role::DepthEstimator => "depth_estimator",
            Role::Segmenter => "segmenter",
            Role::TextLlm => "text_llm",
            Role::Embedder => "embedder",
        }
    }

    /// Environment variable that carries this role's service endpoint.
    pub fn endpoint_var(&self) -> String {
        format!("GCGKIT_{}_ENDPOINT", self.path().to_uppercase())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientConfig {
    pub endpoint: String,
    pub timeout_secs: u64,
    /// Retries after the first attempt, so `max_retries + 1` tries total.
    pub max_retries: u32,
    /// First retry delay; doubled on every further retry.
    pub backoff_ms: u64,
    /// Concurrent in-flight requests allowed for this role.
    pub max_concurrent: usize,
}

impl ClientConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        ClientConfig {
            endpoint: endpoint.into(),
            timeout_secs: 30,
            max_retries: 2,
            backoff_ms: 500,
            max_concurrent: 8,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("{role} service unavailable after {attempts} attempt(s): {detail}")]
    Unavailable { role: &'static str, attempts: u32, detail: String },
    #[error("{role} protocol error: {detail}")]
    Protocol { role: &'static str, detail: String },
}

impl ClientError {
    fn protocol(role: Role, detail: impl Into<String>) -> Self {
        ClientError::Protocol { role: role.path(), detail: detail.into() }
    }
}

pub trait ClientTransport: Send + Sync {
    fn call(&self, role: Role, request: &Value) -> Result<Value, ClientError>;
}

/// Canonical JSON: object keys sorted (the default map is ordered) and no
/// insignificant whitespace. Equal values always serialize identically.
pub fn canonical_json(value: &Value) -> String {
    serde_json::to_string(value).expect("JSON values serialize")
}

/// Hex SHA-256 of the canonical request text; fixture files are named this.
pub fn request_hash(request: &Value) -> String {
    let mut h = Sha256::new();
    h.update(canonical_json(request).as_bytes());
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

/// Counting semaphore; caps in-flight requests per role.
struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn new(n: usize) -> Self {
        Semaphore { permits: Mutex::new(n.max(1)), cv: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut p = self.permits.lock().expect("semaphore lock");
        while *p == 0 {
            p = self.cv.wait(p).expect("semaphore wait");
        }
        *p -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().expect("semaphore lock") += 1;
        self.0.cv.notify_one();
    }
}

struct RoleEndpoint {
    config: ClientConfig,
    gate: Semaphore,
}

/// POSTs requests to per-role HTTP endpoints with bounded retries,
/// exponential backoff, and a per-role concurrency cap.
pub struct HttpTransport {
    roles: BTreeMap<&'static str, RoleEndpoint>,
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(configs: BTreeMap<Role, ClientConfig>) -> Self {
        let timeout = configs.values().map(|c| c.timeout_secs).max().unwrap_or(30);
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs(timeout))
            .build();
        let roles = configs
            .into_iter()
            .map(|(role, config)| {
                let gate = Semaphore::new(config.max_concurrent);
                (role.path(), RoleEndpoint { config, gate })
            })
            .collect();
        HttpTransport { roles, agent }
    }

    /// Reads `GCGKIT_{ROLE}_ENDPOINT` for every role; roles without an
    /// endpoint stay unconfigured and fail with `Unavailable` when called.
    pub fn from_env() -> Self {
        let mut configs = BTreeMap::new();
        for role in Role::ALL {
            if let Ok(endpoint) = std::env::var(role.endpoint_var()) {
                if !endpoint.trim().is_empty() {
                    configs.insert(role, ClientConfig::new(endpoint.trim()));
                }
            }
        }
        HttpTransport::new(configs)
    }

    pub fn configured_roles(&self) -> Vec<&'static str> {
        self.roles.keys().copied().collect()
    }
}

impl ClientTransport for HttpTransport {
    fn call(&self, role: Role, request: &Value) -> Result<Value, ClientError> {
        let Some(ep) = self.roles.get(role.path()) else {
            return Err(ClientError::Unavailable {
                role: role.path(),
                attempts: 0,
                detail: format!("no endpoint configured (set {})", role.endpoint_var()),
            });
        };
        let _permit = ep.gate.acquire();
        let url = format!("{}/{}", ep.config.endpoint.trim_end_matches('/'), role.path());
        let attempts = ep.config.max_retries + 1;
        let mut last_err = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(ep.config.backoff_ms << (attempt - 1)));
            }
            match self.agent.post(&url).send_json(request) {
                Ok(resp) => {
                    return resp.into_json::<Value>().map_err(|e| {
                        ClientError::protocol(role, format!("response is not JSON: {e}"))
                    });
                }
                Err(e) => last_err = e.to_string(),
            }
        }
        Err(ClientError::Unavailable { role: role.path(), attempts, detail: last_err })
    }
}

/// Replays recorded responses from `{root}/{role}/{request_hash}.json`.
pub struct MockTransport {
    root: PathBuf,
}

impl MockTransport {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        MockTransport { root: root.into() }
    }

    pub fn fixture_path(&self, role: Role, request: &Value) -> PathBuf {
        self.root.join(role.path()).join(format!("{}.json", request_hash(request)))
    }
}

impl ClientTransport for MockTransport {
    fn call(&self, role: Role, request: &Value) -> Result<Value, ClientError> {
        let path = self.fixture_path(role, request);
        let text = std::fs::read_to_string(&path).map_err(|e| ClientError::Unavailable {
            role: role.path(),
            attempts: 1,
            detail: format!("no fixture {}: {e}", path.display()),
        })?;
        serde_json::from_str(&text)
            .map_err(|e| ClientError::protocol(role, format!("fixture is not JSON: {e}")))
    }
}

/// Passes calls through to an inner transport and records every exchange
/// as fixture files that `MockTransport` can replay.
pub struct RecordingTransport {
    inner: Arc<dyn ClientTransport>,
    root: PathBuf,
}

impl RecordingTransport {
    pub fn new(inner: Arc<dyn ClientTransport>, root: impl Into<PathBuf>) -> Self {
        RecordingTransport { inner, root: root.into() }
    }
}

impl ClientTransport for RecordingTransport {
    fn call(&self, role: Role, request: &Value) -> Result<Value, ClientError> {
        let response = self.inner.call(role, request)?;
        let dir = self.root.join(role.path());
        let write = || -> std::io::Result<()> {
            std::fs::create_dir_all(&dir)?;
            let hash = request_hash(request);
            std::fs::write(dir.join(format!("{hash}.json")), canonical_json(&response))?;
            std::fs::write(dir.join(format!("{hash}.request.json")), canonical_json(request))?;
            Ok(())
        };
        write().map_err(|e| {
            ClientError::protocol(role, format!("cannot record fixture under {}: {e}", dir.display()))
        })?;
        Ok(response)
    }
}

/// Hands out pre-loaded responses per role in FIFO order; for tests that
/// script an exact conversation.
#[derive(Default)]
pub struct ScriptedTransport {
    responses: Mutex<BTreeMap<&'static str, VecDeque<Value>>>,
}

impl ScriptedTransport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&self, role: Role, response: Value) {
        self.responses
            .lock()
            .expect("script lock")
            .entry(role.path())
            .or_default()
            .push_back(response);
    }
}

impl ClientTransport for ScriptedTransport {
    fn call(&self, role: Role, _request: &Value) -> Result<Value, ClientError> {
        self.responses
            .lock()
            .expect("script lock")
            .get_mut(role.path())
            .and_then(VecDeque::pop_front)
            .ok_or(ClientError::Unavailable {
                role: role.path(),
                attempts: 1,
                detail: "script has no more responses for this role".to_string(),
            })
    }
}

/// One manifest entry: the image and its pixel size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    pub width: u32,
    pub height: u32,
}

fn field<'a>(role: Role, v: &'a Value, name: &str) -> Result<&'a Value, ClientError> {
    v.get(name).ok_or_else(|| ClientError::protocol(role, format!("missing field {name:?}")))
}

fn parse_field<T: serde::de::DeserializeOwned>(
    role: Role,
    v: &Value,
    name: &str,
) -> Result<T, ClientError> {
    serde_json::from_value(field(role, v, name)?.clone())
        .map_err(|e| ClientError::protocol(role, format!("bad field {name:?}: {e}")))
}

/// Typed access to every model role over one transport.
#[derive(Clone)]
pub struct Clients {
    transport: Arc<dyn ClientTransport>,
    pub detector_models: Vec<String>,
}

pub const DEFAULT_DETECTOR_MODELS: [&str; 3] = ["det-a", "det-b", "det-c"];

impl Clients {
    pub fn new(transport: Arc<dyn ClientTransport>, detector_models: Vec<String>) -> Self {
        assert!(!detector_models.is_empty(), "at least one detector model");
        Clients { transport, detector_models }
    }

    pub fn with_default_models(transport: Arc<dyn ClientTransport>) -> Self {
        Clients::new(transport, DEFAULT_DETECTOR_MODELS.iter().map(|s| s.to_string()).collect())
    }

    pub fn transport(&self) -> Arc<dyn ClientTransport> {
        Arc::clone(&self.transport)
    }

    pub fn detect(&self, img: &ImageMeta, model_id: &str) -> Result<ModelDetections, ClientError> {
        let role = Role::Detector;
        let req = json!({
            "image_id": img.image_id,
            "path": img.path,
            "width": img.width,
            "height": img.height,
            "model_id": model_id,
        });
        let resp = self.transport.call(role, &req)?;
        let detections: Vec<MaskedDetection> = parse_field(role, &resp, "detections")?;
        for d in &detections {
            if !(0.0..=1.0).contains(&d.score) || d.score.is_nan() {
                return Err(ClientError::protocol(role, format!("score {} out of range", d.score)));
            }
            if d.label.trim().is_empty() {
                return Err(ClientError::protocol(role, "empty detection label"));
            }
        }
        Ok(ModelDetections { model_id: model_id.to_string(), detections })
    }

    pub fn region_attributes(
        &self,
        img: &ImageMeta,
        object_id: u32,
        bbox: &BBox,
        labels: &[String],
    ) -> Result<Vec<String>, ClientError> {
        let role = Role::RegionCaptioner;
        let req = json!({
            "image_id": img.image_id,
            "object_id": object_id,
            "bbox": bbox,
            "labels": labels,
        });
        let resp = self.transport.call(role, &req)?;
        parse_field(role, &resp, "attributes")
    }

    pub fn scene_captions(&self, img: &ImageMeta) -> Result<Vec<String>, ClientError> {
        let role = Role::ImageCaptioner;
        let req = json!({
            "image_id": img.image_id,
            "width": img.width,
            "height": img.height,
        });
        let resp = self.transport.call(role, &req)?;
        parse_field(role, &resp, "captions")
    }

    pub fn landmark(&self, img: &ImageMeta) -> Result<Landmark, ClientError> {
        let role = Role::LandmarkClassifier;
        let req = json!({ "image_id": img.image_id });
        let resp = self.transport.call(role, &req)?;
        let primary: String = parse_field(role, &resp, "primary")?;
        let fine: String = parse_field(role, &resp, "fine")?;
        Landmark::new(&primary, &fine).map_err(|e| ClientError::protocol(role, e.to_string()))
    }

    pub fn ground_phrases(
        &self,
        img: &ImageMeta,
        caption: &str,
    ) -> Result<Vec<GroundedPhrase>, ClientError> {
        let role = Role::PhraseGrounder;
        let req = json!({
            "image_id": img.image_id,
            "width": img.width,
            "height": img.height,
            "caption": caption,
        });
        let resp = self.transport.call(role, &req)?;
        parse_field(role, &resp, "phrases")
    }

    pub fn depth(&self, img: &ImageMeta) -> Result<DepthMap, ClientError> {
        let role = Role::DepthEstimator;
        let req = json!({
            "image_id": img.image_id,
            "width": img.width,
            "height": img.height,
        });
        let resp = self.transport.call(role, &req)?;
        let width: u32 = parse_field(role, &resp, "width")?;
        let height: u32 = parse_field(role, &resp, "height")?;
        let values: Vec<f32> = if resp.get("depth_b64").is_some() {
            let b64: String = parse_field(role, &resp, "depth_b64")?;
            let bytes = BASE64
                .decode(b64.as_bytes())
                .map_err(|e| ClientError::protocol(role, format!("bad base64 depth: {e}")))?;
            if bytes.len() % 4 != 0 {
                return Err(ClientError::protocol(role, "depth byte length not a multiple of 4"));
            }
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect()
        } else {
            parse_field(role, &resp, "values")?
        };
        DepthMap::new(width, height, values)
            .map_err(|e| ClientError::protocol(role, e.to_string()))
    }

    pub fn segment(&self, img: &ImageMeta, bbox: &BBox) -> Result<BinaryMask, ClientError> {
        let role = Role::Segmenter;
        let req = json!({
            "image_id": img.image_id,
            "width": img.width,
            "height": img.height,
            "bbox": bbox,
        });
        let resp = self.transport.call(role, &req)?;
        parse_field(role, &resp, "mask")
    }

    /// Dense-caption generation. `objects` lists (id, label) pairs nearest
    /// first so offline transports can answer without parsing the prompt.
    pub fn dense_caption(
        &self,
        img: &ImageMeta,
        prompt: &str,
        objects: &[(u32, String)],
    ) -> Result<String, ClientError> {
        let role = Role::TextLlm;
        let objs: Vec<Value> = objects
            .iter()
            .map(|(id, label)| json!({ "id": id, "label": label }))
            .collect();
        let req = json!({
            "kind": "dense_caption",
            "image_id": img.image_id,
            "prompt": prompt,
            "objects": objs,
        });
        let resp = self.transport.call(role, &req)?;
        parse_field(role, &resp, "text")
    }

    pub fn extra_context(&self, img: &ImageMeta, prompt: &str) -> Result<String, ClientError> {
        let role = Role::TextLlm;
        let req = json!({
            "kind": "extra_context",
            "image_id": img.image_id,
            "prompt": prompt,
        });
        let resp = self.transport.call(role, &req)?;
        parse_field(role, &resp, "text")
    }

    /// Object mentions in a caption, one per line.
    pub fn checklist(&self, img: &ImageMeta, caption: &str) -> Result<Vec<String>, ClientError> {
        let role = Role::TextLlm;
        let req = json!({
            "kind": "checklist",
            "image_id": img.image_id,
            "caption": caption,
        });
        let resp = self.transport.call(role, &req)?;
        let text: String = parse_field(role, &resp, "text")?;
        Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
    }

    /// Asks for a caption that contains every listed phrase verbatim.
    pub fn rewrite_with_phrases(
        &self,
        image_id: &str,
        phrases: &[String],
        context: &str,
        feedback: Option<&str>,
    ) -> Result<String, ClientError> {
        let role = Role::TextLlm;
        let req = json!({
            "kind": "grounding_rewrite",
            "image_id": image_id,
            "phrases": phrases,
            "context": context,
            "feedback": feedback,
        });
        let resp = self.transport.call(role, &req)?;
        parse_field(role, &resp, "text")
    }

    pub fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ClientError> {
        let role = Role::Embedder;
        let req = json!({ "texts": texts });
        let resp = self.transport.call(role, &req)?;
        let embeddings: Vec<Vec<f64>> = parse_field(role, &resp, "embeddings")?;
        if embeddings.len() != texts.len() {
            return Err(ClientError::protocol(
                role,
                format!("asked for {} embeddings, got {}", texts.len(), embeddings.len()),
            ));
        }
        Ok(embeddings)
    }
}

/// Text similarity from the embedding service: cosine similarity mapped to
/// [0, 1], with a per-text cache so repeated phrases embed once. Transport
/// failures degrade to 0.0 (identical strings still score 1.0).
pub struct EmbeddingSim {
    clients: Clients,
    cache: Mutex<HashMap<String, Option<Vec<f64>>>>,
}

impl EmbeddingSim {
    pub fn new(clients: Clients) -> Self {
        EmbeddingSim { clients, cache: Mutex::new(HashMap::new()) }
    }

    fn embedding(&self, text: &str) -> Option<Vec<f64>> {
        if let Some(hit) = self.cache.lock().expect("cache lock").get(text) {
            return hit.clone();
        }
        let got = self
            .clients
            .embed(std::slice::from_ref(&text.to_string()))
            .ok()
            .and_then(|mut v| v.pop());
        self.cache.lock().expect("cache lock").insert(text.to_string(), got.clone());
        got
    }
}

impl TextSimProvider for EmbeddingSim {
    fn sim(&self, a: &str, b: &str) -> f64 {
        if a == b {
            return 1.0;
        }
        let (Some(ea), Some(eb)) = (self.embedding(a), self.embedding(b)) else {
            return 0.0;
        };
        if ea.len() != eb.len() || ea.is_empty() {
            return 0.0;
        }
        let dot: f64 = ea.iter().zip(&eb).map(|(x, y)| x * y).sum();
        let na: f64 = ea.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = eb.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return 0.0;
        }
        (((dot / (na * nb)) + 1.0) / 2.0).clamp(0.0, 1.0)
    }
}

/// Serializes depth values as the wire expects them: little-endian f32s.
pub fn depth_to_b64(values: &[f32]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    BASE64.encode(bytes)
}
