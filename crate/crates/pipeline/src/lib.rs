//! Deterministic annotation pipeline: multi-detector fusion, depth
//! layering, scene-graph assembly, verified dense captioning, and dataset
//! conversion, with every heavyweight model behind a small HTTP client
//! abstraction.
//!
//! The pipeline runs in four levels per image (objects, captions and
//! relationships, verified dense caption, extra context), checkpointing
//! each level so interrupted runs resume without recomputation and the
//! assembled corpus is byte-identical regardless of worker count.

pub mod clients;
pub mod convert;
pub mod fusion;
pub mod grand;
pub mod landmark;
pub mod levels;
pub mod run;
pub mod scene;
pub mod store;
pub mod synthetic;

pub use clients::{
    depth_to_b64, request_hash, ClientConfig, ClientError, ClientTransport, Clients,
    EmbeddingSim, HttpTransport, ImageMeta, MockTransport, RecordingTransport, Role,
    ScriptedTransport,
};
pub use convert::{
    convert_flickr, convert_psg, convert_refcocog, validate_converted_record, ConversionOutcome,
    ConvertError, FlickrItem, FlickrPhrase, PsgItem, PsgTriplet, RefCocogItem, RefExpression,
    RejectedItem,
};
pub use fusion::{
    assign_layers, attach_attributes, attach_depth, fuse, DepthMap, FuseOutcome, FusedObject,
    FusionError, Layer, MaskedDetection, ModelDetections,
};
pub use grand::{DenseCaption, GrandRecord, VerificationLogEntry};
pub use landmark::{Landmark, LandmarkError, TAXONOMY};
pub use levels::{run_level_image, LevelConfig, LevelStatus, PipelineError, MAX_LEVEL};
pub use run::{
    assemble_corpus, read_manifest, run_all, ImageFailure, LevelSummary, ManifestError,
    RunConfig, RunReport,
};
pub use scene::{
    bind_dense_caption, build_graph, extract_noun_phrases, ground_caption_phrases, render_prompt,
    verify_caption, GroundedPhrase, GroundingOutcome, PromptKind, Relationship, SceneError,
    SceneGraph, VerificationOutcome, VerifyStatus,
};
pub use store::{CheckpointStore, StageState, StoreError};
pub use synthetic::SyntheticTransport;
