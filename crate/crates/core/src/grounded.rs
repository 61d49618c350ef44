//! Grounded caption text format.
//!
//! A grounded caption is ordinary text in which some phrases are wrapped in
//! `<p>...</p>` tags, each immediately followed by a `<SEG>` token that ties
//! the phrase to one segmentation mask:
//!
//! ```text
//! <p>A man</p><SEG> and <p>a boy</p><SEG> sit on <p>a bench</p><SEG>.
//! ```
//!
//! Parsing removes every token and yields the plain text plus one span per
//! phrase/`<SEG>` unit. Whitespace that touches a removed token collapses to
//! a single space (none at the edges of the output); text containing no
//! tokens passes through unchanged. All offsets are byte offsets and always
//! fall on UTF-8 character boundaries.
//!
//! Strict mode rejects malformed structure and is meant for dataset
//! ingestion; tolerant mode never fails and is meant for model output, where
//! malformed token runs degrade to their inner text.

use crate::mask::BinaryMask;

pub const OPEN_TAG: &str = "<p>";
pub const CLOSE_TAG: &str = "</p>";
pub const SEG_TOKEN: &str = "<SEG>";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum FormatError {
    #[error("<p> at byte {offset} is never closed")]
    UnclosedPhrase { offset: usize },
    #[error("<SEG> at byte {offset} is not preceded by a closed phrase")]
    DanglingSeg { offset: usize },
    #[error("<p> at byte {offset} opened inside another phrase")]
    NestedPhrase { offset: usize },
    #[error("</p> at byte {offset} without a matching <p>")]
    StrayClose { offset: usize },
    #[error("phrase opened at byte {offset} is empty")]
    EmptyPhrase { offset: usize },
    #[error("{masks} masks for {segs} <SEG> tokens")]
    CountMismatch { masks: usize, segs: usize },
    #[error("span {index} invalid: {detail}")]
    InvalidSpan { index: usize, detail: String },
    #[error("masks within one caption must share one grid size")]
    MaskGridMismatch,
    #[error("{scores} scores for {masks} masks")]
    ScoreCountMismatch { scores: usize, masks: usize },
    #[error("score {0} outside [0, 1]")]
    InvalidScore(f64),
}

/// One grounded phrase: where it sits in the plain text and which `<SEG>`
/// token (hence which mask) it binds to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhraseSpan {
    /// Byte offset into the plain text (inclusive).
    pub char_start: usize,
    /// Byte offset into the plain text (exclusive).
    pub char_end: usize,
    pub phrase: String,
    pub seg_index: usize,
}

/// Result of parsing tagged text. In strict mode `seg_count == spans.len()`
/// and `seg_index` values are dense. In tolerant mode `seg_count` counts
/// every `<SEG>` token seen, and each span's `seg_index` is the ordinal of
/// its `<SEG>` among all of them, so callers can line spans up with a mask
/// list even when some tokens were malformed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedGrounded {
    pub plain_text: String,
    pub spans: Vec<PhraseSpan>,
    pub seg_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseMode {
    Strict,
    Tolerant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Event {
    /// Byte range of literal text in the raw input.
    Lit(usize, usize),
    Open(usize),
    Close(usize),
    Seg(usize),
}

fn lex(raw: &str) -> Vec<Event> {
    // Byte-level scan: the tokens are ASCII, so they can only match at char
    // boundaries and every Lit range stays boundary-aligned.
    let bytes = raw.as_bytes();
    let mut events = Vec::new();
    let mut lit_start = 0usize;
    let mut i = 0usize;
    while i < bytes.len() {
        let rest = &bytes[i..];
        let tok = if rest.starts_with(OPEN_TAG.as_bytes()) {
            Some((Event::Open(i), OPEN_TAG.len()))
        } else if rest.starts_with(CLOSE_TAG.as_bytes()) {
            Some((Event::Close(i), CLOSE_TAG.len()))
        } else if rest.starts_with(SEG_TOKEN.as_bytes()) {
            Some((Event::Seg(i), SEG_TOKEN.len()))
        } else {
            None
        };
        match tok {
            Some((ev, len)) => {
                if lit_start < i {
                    events.push(Event::Lit(lit_start, i));
                }
                events.push(ev);
                i += len;
                lit_start = i;
            }
            None => i += 1,
        }
    }
    if lit_start < bytes.len() {
        events.push(Event::Lit(lit_start, bytes.len()));
    }
    events
}

/// Builds the plain text, collapsing whitespace at token junctions.
struct Emitter {
    plain: String,
    pending_ws: bool,
}

impl Emitter {
    fn new() -> Self {
        Emitter { plain: String::new(), pending_ws: false }
    }

    /// Appends a literal piece. `strip_left`/`strip_right` are set when the
    /// piece borders a removed token; stripped whitespace turns into a
    /// single pending separator. Returns the emitted byte range, or `None`
    /// if nothing non-whitespace remained.
    fn literal(&mut self, text: &str, strip_left: bool, strip_right: bool) -> Option<(usize, usize)> {
        let mut t = text;
        if strip_left {
            let trimmed = t.trim_start();
            if trimmed.len() != t.len() {
                self.pending_ws = true;
            }
            t = trimmed;
        }
        let mut trailing_ws = false;
        if strip_right {
            let trimmed = t.trim_end();
            trailing_ws = trimmed.len() != t.len();
            t = trimmed;
        }
        if t.is_empty() {
            self.pending_ws |= trailing_ws;
            return None;
        }
        if self.pending_ws && !self.plain.is_empty() {
            self.plain.push(' ');
        }
        self.pending_ws = false;
        let start = self.plain.len();
        self.plain.push_str(t);
        let end = self.plain.len();
        self.pending_ws = trailing_ws;
        Some((start, end))
    }
}

fn parse_strict(raw: &str) -> Result<ParsedGrounded, FormatError> {
    let events = lex(raw);
    let mut em = Emitter::new();
    let mut spans: Vec<PhraseSpan> = Vec::new();
    // Offset of the currently open <p>, plus the emitted range of its text.
    let mut open: Option<(usize, Option<(usize, usize)>)> = None;
    // A closed phrase still eligible to bind the next <SEG>.
    let mut ready: Option<(usize, Option<(usize, usize)>)> = None;
    for (i, ev) in events.iter().enumerate() {
        match *ev {
            Event::Lit(s, e) => {
                let emitted = em.literal(&raw[s..e], i > 0, i + 1 < events.len());
                match open {
                    Some((off, None)) => open = Some((off, emitted)),
                    Some((_, Some(_))) => unreachable!("lexer never yields adjacent literals"),
                    None => {
                        if emitted.is_some() {
                            ready = None;
                        }
                    }
                }
            }
            Event::Open(off) => {
                if open.is_some() {
                    return Err(FormatError::NestedPhrase { offset: off });
                }
                ready = None;
                open = Some((off, None));
            }
            Event::Close(off) => match open.take() {
                Some(candidate) => ready = Some(candidate),
                None => return Err(FormatError::StrayClose { offset: off }),
            },
            Event::Seg(off) => {
                if open.is_some() {
                    return Err(FormatError::DanglingSeg { offset: off });
                }
                match ready.take() {
                    Some((_, Some((s, e)))) => {
                        let seg_index = spans.len();
                        spans.push(PhraseSpan {
                            char_start: s,
                            char_end: e,
                            phrase: em.plain[s..e].to_string(),
                            seg_index,
                        });
                    }
                    Some((open_off, None)) => {
                        return Err(FormatError::EmptyPhrase { offset: open_off })
                    }
                    None => return Err(FormatError::DanglingSeg { offset: off }),
                }
            }
        }
    }
    if let Some((off, _)) = open {
        return Err(FormatError::UnclosedPhrase { offset: off });
    }
    let seg_count = spans.len();
    Ok(ParsedGrounded { plain_text: em.plain, spans, seg_count })
}

fn parse_tolerant(raw: &str) -> ParsedGrounded {
    let events = lex(raw);
    // Greedy left-to-right match of well-formed units:
    //   <p> [text] </p> [ws-only text]* <SEG>
    // Everything else is junk and degrades to a removed token.
    let mut unit_phrase = vec![false; events.len()]; // literal inside a matched unit
    let mut unit_seg_ordinal = vec![usize::MAX; events.len()]; // on the phrase literal event
    let mut seg_ordinals = vec![usize::MAX; events.len()];
    let mut seg_count = 0usize;
    for (i, ev) in events.iter().enumerate() {
        if let Event::Seg(_) = ev {
            seg_ordinals[i] = seg_count;
            seg_count += 1;
        }
    }
    let mut i = 0;
    while i < events.len() {
        if let Event::Open(_) = events[i] {
            let mut j = i + 1;
            let mut phrase_idx: Option<usize> = None;
            if j < events.len() {
                if let Event::Lit(_, _) = events[j] {
                    phrase_idx = Some(j);
                    j += 1;
                }
            }
            if j < events.len() && matches!(events[j], Event::Close(_)) {
                j += 1;
                while j < events.len() {
                    match events[j] {
                        Event::Lit(s, e) if raw[s..e].trim().is_empty() => j += 1,
                        _ => break,
                    }
                }
                if j < events.len() && matches!(events[j], Event::Seg(_)) {
                    if let Some(p) = phrase_idx {
                        unit_phrase[p] = true;
                        unit_seg_ordinal[p] = seg_ordinals[j];
                    }
                    i = j + 1;
                    continue;
                }
            }
        }
        i += 1;
    }
    let mut em = Emitter::new();
    let mut spans: Vec<PhraseSpan> = Vec::new();
    for (i, ev) in events.iter().enumerate() {
        if let Event::Lit(s, e) = *ev {
            let emitted = em.literal(&raw[s..e], i > 0, i + 1 < events.len());
            if unit_phrase[i] {
                if let Some((ps, pe)) = emitted {
                    spans.push(PhraseSpan {
                        char_start: ps,
                        char_end: pe,
                        phrase: em.plain[ps..pe].to_string(),
                        seg_index: unit_seg_ordinal[i],
                    });
                }
            }
        }
    }
    ParsedGrounded { plain_text: em.plain, spans, seg_count }
}

/// Parses tagged text into plain text plus phrase spans.
///
/// # Errors
/// Strict mode rejects malformed structure; tolerant mode never fails.
pub fn parse_grounded(raw: &str, mode: ParseMode) -> Result<ParsedGrounded, FormatError> {
    match mode {
        ParseMode::Strict => parse_strict(raw),
        ParseMode::Tolerant => Ok(parse_tolerant(raw)),
    }
}

/// Plain text of `raw` with all tags removed (tolerant). Identity on text
/// that contains no tokens.
pub fn strip_to_plain(raw: &str) -> String {
    parse_tolerant(raw).plain_text
}

fn validate_spans(plain_text: &str, spans: &[PhraseSpan]) -> Result<(), FormatError> {
    let mut prev_end = 0usize;
    for (i, sp) in spans.iter().enumerate() {
        let fail = |detail: &str| FormatError::InvalidSpan { index: i, detail: detail.to_string() };
        if sp.char_start >= sp.char_end {
            return Err(fail("empty range"));
        }
        if sp.char_end > plain_text.len() {
            return Err(fail("range exceeds text length"));
        }
        if !plain_text.is_char_boundary(sp.char_start) || !plain_text.is_char_boundary(sp.char_end)
        {
            return Err(fail("offset not on a character boundary"));
        }
        if i > 0 && sp.char_start < prev_end {
            return Err(fail("overlaps previous span"));
        }
        if plain_text[sp.char_start..sp.char_end] != sp.phrase {
            return Err(fail("text slice does not equal phrase"));
        }
        if sp.seg_index != i {
            return Err(fail("seg_index out of order"));
        }
        prev_end = sp.char_end;
    }
    Ok(())
}

/// Canonical serialization: wraps each span's slice in phrase tags followed
/// by `<SEG>`. Inverse of strict parsing for captions in canonical
/// whitespace form (single spaces at span boundaries, no edge whitespace).
pub fn render_grounded(plain_text: &str, spans: &[PhraseSpan]) -> Result<String, FormatError> {
    validate_spans(plain_text, spans)?;
    let mut out = String::with_capacity(plain_text.len() + spans.len() * 16);
    let mut cursor = 0usize;
    for sp in spans {
        out.push_str(&plain_text[cursor..sp.char_start]);
        out.push_str(OPEN_TAG);
        out.push_str(&plain_text[sp.char_start..sp.char_end]);
        out.push_str(CLOSE_TAG);
        out.push_str(SEG_TOKEN);
        cursor = sp.char_end;
    }
    out.push_str(&plain_text[cursor..]);
    Ok(out)
}

/// A parsed caption with its masks attached: one mask per span, all on the
/// same pixel grid. `scores`, when present, holds one confidence per mask.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundedCaption {
    pub plain_text: String,
    pub spans: Vec<PhraseSpan>,
    pub masks: Vec<BinaryMask>,
    pub scores: Option<Vec<f64>>,
}

impl GroundedCaption {
    pub fn new(
        plain_text: String,
        spans: Vec<PhraseSpan>,
        masks: Vec<BinaryMask>,
        scores: Option<Vec<f64>>,
    ) -> Result<Self, FormatError> {
        validate_spans(&plain_text, &spans)?;
        if masks.len() != spans.len() {
            return Err(FormatError::CountMismatch { masks: masks.len(), segs: spans.len() });
        }
        if let Some(first) = masks.first() {
            if masks.iter().any(|m| m.width() != first.width() || m.height() != first.height()) {
                return Err(FormatError::MaskGridMismatch);
            }
        }
        if let Some(s) = &scores {
            if s.len() != masks.len() {
                return Err(FormatError::ScoreCountMismatch { scores: s.len(), masks: masks.len() });
            }
            if let Some(&bad) = s.iter().find(|v| !(0.0..=1.0).contains(*v) || v.is_nan()) {
                return Err(FormatError::InvalidScore(bad));
            }
        }
        Ok(GroundedCaption { plain_text, spans, masks, scores })
    }

    pub fn render(&self) -> String {
        render_grounded(&self.plain_text, &self.spans).expect("construction validated spans")
    }
}

/// Attaches masks to a strict parse: mask `i` belongs to `<SEG>` number `i`.
///
/// # Errors
/// `CountMismatch` when the mask list length differs from `seg_count`.
pub fn bind_masks(
    parsed: &ParsedGrounded,
    masks: Vec<BinaryMask>,
    scores: Option<Vec<f64>>,
) -> Result<GroundedCaption, FormatError> {
    if masks.len() != parsed.seg_count {
        return Err(FormatError::CountMismatch { masks: masks.len(), segs: parsed.seg_count });
    }
    GroundedCaption::new(parsed.plain_text.clone(), parsed.spans.clone(), masks, scores)
}

/// Leftovers from tolerant binding: masks whose `<SEG>` token had no
/// well-formed phrase attached.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BindDiagnostics {
    pub dropped_masks: usize,
}

/// Attaches masks to a tolerant parse of model output.
///
/// When the mask list matches the span count they are paired in order; when
/// it instead matches the total `<SEG>` token count, each span takes the
/// mask of its own `<SEG>` and masks belonging to phrase-less tokens are
/// dropped (counted in the diagnostics). Span indices are re-numbered
/// densely so the result is a valid caption.
///
/// # Errors
/// `CountMismatch` when the mask list fits neither interpretation.
pub fn bind_masks_tolerant(
    parsed: &ParsedGrounded,
    masks: Vec<BinaryMask>,
    scores: Option<Vec<f64>>,
) -> Result<(GroundedCaption, BindDiagnostics), FormatError> {
    let n_spans = parsed.spans.len();
    let pick = |i: usize, sp: &PhraseSpan| -> usize {
        if masks.len() == n_spans {
            i
        } else {
            sp.seg_index
        }
    };
    if masks.len() != n_spans && masks.len() != parsed.seg_count {
        return Err(FormatError::CountMismatch { masks: masks.len(), segs: parsed.seg_count });
    }
    let mut out_masks = Vec::with_capacity(n_spans);
    let mut out_scores = scores.as_ref().map(|_| Vec::with_capacity(n_spans));
    let mut out_spans = Vec::with_capacity(n_spans);
    for (i, sp) in parsed.spans.iter().enumerate() {
        let src = pick(i, sp);
        out_masks.push(masks[src].clone());
        if let (Some(out), Some(s)) = (&mut out_scores, &scores) {
            out.push(s[src]);
        }
        out_spans.push(PhraseSpan { seg_index: i, ..sp.clone() });
    }
    let dropped = masks.len() - n_spans;
    let caption = GroundedCaption::new(parsed.plain_text.clone(), out_spans, out_masks, out_scores)?;
    Ok((caption, BindDiagnostics { dropped_masks: dropped }))
}
