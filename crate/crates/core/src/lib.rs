//! Core library for grounded conversation generation data: binary masks
//! with run-length encoding, the `<p>...</p><SEG>` grounded caption format,
//! caption metrics (METEOR, CIDEr-D), grounding metrics (AP50, mIoU,
//! grounded recall), and a corpus evaluator that ties them together.
//!
//! Everything here is deterministic: equal inputs give bitwise-equal
//! outputs regardless of thread count or platform.

pub mod assignment;
pub mod cider;
pub mod eval;
pub mod grounded;
pub mod mask;
pub mod meteor;
pub mod metrics;
pub mod record;
pub mod text;
pub mod textsim;

pub use eval::{evaluate_gcg, EvalConfig, EvalError, GcgEvalReport, MetricSelection};
pub use grounded::{
    parse_grounded, FormatError, GroundedCaption, ParseMode, ParsedGrounded, PhraseSpan,
};
pub use mask::{mask_iou, BBox, BinaryMask, MaskError, ScoredDetection};
pub use record::{read_gcg_jsonl, write_gcg_jsonl, GcgRecord, RecordError, Split};
pub use textsim::{LexicalSim, TextSimProvider};
