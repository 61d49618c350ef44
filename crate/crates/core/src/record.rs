//! Grounded-caption dataset records and JSONL reading/writing.
//!
//! One record per line:
//!
//! ```json
//! {"image_id": "...", "width": 640, "height": 480,
//!  "caption_raw": "<p>a dog</p><SEG> runs",
//!  "masks": [{"size": [480, 640], "counts": [...]}],
//!  "scores": [0.9]}
//! ```
//!
//! `scores` and `split` are optional; `flags` carries provenance notes such
//! as `box_fallback` from converters that had to rasterize boxes.

use crate::mask::BinaryMask;
use serde::{Deserialize, Serialize};
use std::io::{self, BufRead, Write};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcgRecord {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub caption_raw: String,
    pub masks: Vec<BinaryMask>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum RecordError {
    #[error("line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error("line {line}: record {image_id:?}: {detail}")]
    Invalid { line: usize, image_id: String, detail: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl GcgRecord {
    /// Structural checks that do not depend on parse mode: non-empty id,
    /// masks on the record's pixel grid, score list aligned with masks.
    pub fn validate_structure(&self) -> Result<(), String> {
        if self.image_id.is_empty() {
            return Err("empty image_id".into());
        }
        for (i, m) in self.masks.iter().enumerate() {
            if m.width() != self.width || m.height() != self.height {
                return Err(format!(
                    "mask {i} is {}x{} but the record grid is {}x{}",
                    m.width(),
                    m.height(),
                    self.width,
                    self.height
                ));
            }
        }
        if let Some(s) = &self.scores {
            if s.len() != self.masks.len() {
                return Err(format!("{} scores for {} masks", s.len(), self.masks.len()));
            }
        }
        Ok(())
    }
}

/// Reads records line by line; errors carry 1-based line numbers.
pub fn read_gcg_jsonl(reader: impl BufRead) -> Result<Vec<GcgRecord>, RecordError> {
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: GcgRecord =
            serde_json::from_str(&line).map_err(|source| RecordError::Json { line: line_no, source })?;
        record.validate_structure().map_err(|detail| RecordError::Invalid {
            line: line_no,
            image_id: record.image_id.clone(),
            detail,
        })?;
        records.push(record);
    }
    Ok(records)
}

pub fn write_gcg_jsonl(mut writer: impl Write, records: &[GcgRecord]) -> io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut writer, r)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{mask_from_box, BBox};

    fn sample() -> GcgRecord {
        GcgRecord {
            image_id: "img_0".into(),
            width: 8,
            height: 4,
            caption_raw: "<p>a dog</p><SEG> runs".into(),
            masks: vec![mask_from_box(&BBox::new(0, 0, 4, 2).unwrap(), 8, 4).unwrap()],
            scores: Some(vec![0.9]),
            split: Some(Split::Val),
            flags: vec![],
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let records = vec![sample()];
        let mut buf = Vec::new();
        write_gcg_jsonl(&mut buf, &records).unwrap();
        let back = read_gcg_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, records);
    }

    #[test]
    fn optional_fields_can_be_absent() {
        let line = br#"{"image_id":"x","width":2,"height":2,"caption_raw":"hi","masks":[]}"#;
        let recs = read_gcg_jsonl(&line[..]).unwrap();
        assert_eq!(recs[0].scores, None);
        assert_eq!(recs[0].split, None);
        assert!(recs[0].flags.is_empty());
    }

    #[test]
    fn bad_json_names_line() {
        let data = b"{\"image_id\":\"x\",\"width\":2,\"height\":2,\"caption_raw\":\"\",\"masks\":[]}\nnot json\n";
        let err = read_gcg_jsonl(&data[..]).unwrap_err();
        assert!(matches!(err, RecordError::Json { line: 2, .. }), "{err}");
    }

    #[test]
    fn wrong_mask_grid_rejected() {
        let mut r = sample();
        r.width = 16;
        let mut buf = Vec::new();
        write_gcg_jsonl(&mut buf, &[r]).unwrap();
        let err = read_gcg_jsonl(buf.as_slice()).unwrap_err();
        assert!(matches!(err, RecordError::Invalid { line: 1, .. }), "{err}");
    }

    #[test]
    fn blank_lines_skipped() {
        let mut buf = Vec::new();
        write_gcg_jsonl(&mut buf, &[sample()]).unwrap();
        buf.extend_from_slice(b"\n\n");
        assert_eq!(read_gcg_jsonl(buf.as_slice()).unwrap().len(), 1);
    }
}
