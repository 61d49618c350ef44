//! Scene landmark classification over a fixed two-level taxonomy.
//!
//! Classifier output is free text, so construction is validating: both the
//! primary category and the fine category are matched case-insensitively
//! against the taxonomy and canonicalized to the table's casing.

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Primary scene categories paired with their allowed fine categories.
pub const TAXONOMY: &[(&str, &[&str])] = &[
    ("Indoor scene", &["Living space", "Work space", "Public space", "Industrial space"]),
    ("Outdoor scene", &["Urban landscape", "Rural landscape", "Natural landscape"]),
    ("Transportation scene", &["Road", "Airport", "Train station", "Port and harbor"]),
    (
        "Sports and recreation scene",
        &["Sporting venue", "Recreational area", "Gym and fitness center"],
    ),
];

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum LandmarkError {
    #[error("unknown primary scene category {0:?}")]
    UnknownPrimary(String),
    #[error("fine category {fine:?} does not belong to {primary:?}")]
    UnknownFine { primary: String, fine: String },
}

/// A validated (primary, fine) scene classification.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Landmark {
    primary: &'static str,
    fine: &'static str,
}

#[derive(Serialize, Deserialize)]
struct LandmarkWire {
    primary: String,
    fine: String,
}

// Manual serde impls: deriving them over `&'static str` fields would force
// a `'de: 'static` bound onto every containing type.
impl Serialize for Landmark {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        LandmarkWire { primary: self.primary.to_string(), fine: self.fine.to_string() }
            .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Landmark {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let w = LandmarkWire::deserialize(d)?;
        Landmark::new(&w.primary, &w.fine).map_err(D::Error::custom)
    }
}

impl Landmark {
    /// # Errors
    /// `UnknownPrimary` / `UnknownFine` when either name is not in the
    /// taxonomy (comparison ignores case and surrounding whitespace).
    pub fn new(primary: &str, fine: &str) -> Result<Self, LandmarkError> {
        let p = primary.trim();
        let f = fine.trim();
        let (canon_primary, fines) = TAXONOMY
            .iter()
            .find(|(name, _)| name.eq_ignore_ascii_case(p))
            .ok_or_else(|| LandmarkError::UnknownPrimary(primary.to_string()))?;
        let canon_fine = fines
            .iter()
            .find(|name| name.eq_ignore_ascii_case(f))
            .ok_or_else(|| LandmarkError::UnknownFine {
                primary: canon_primary.to_string(),
                fine: fine.to_string(),
            })?;
        Ok(Landmark { primary: canon_primary, fine: canon_fine })
    }

    pub fn primary(&self) -> &'static str {
        self.primary
    }

    pub fn fine(&self) -> &'static str {
        self.fine
    }
}

impl std::fmt::Display for Landmark {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} / {}", self.primary, self.fine)
    }
}
