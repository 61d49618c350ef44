//! Mask overlay rendering to uncompressed PPM rasters.
//!
//! Each record's masks are alpha-blended over the source image (or a flat
//! canvas when no image is available) with a fixed palette keyed by seg
//! index, a swatch strip is appended below the image, and the phrases are
//! written to a sidecar legend file so the colors can be read back without
//! an image viewer. Everything is deterministic: identical inputs produce
//! byte-identical outputs.

use gcgkit_core::BinaryMask;
use std::fs;
use std::io::Write as _;
use std::path::Path;

/// Distinct, colorblind-friendly RGB triples; masks cycle through them by
/// seg index.
pub const PALETTE: [[u8; 3]; 12] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
];

const ALPHA_NUM: u16 = 1;
const ALPHA_DEN: u16 = 2;
const SWATCH_ROW: u32 = 12;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: u32,
    pub height: u32,
    /// Row-major RGB bytes, 3 per pixel.
    pub rgb: Vec<u8>,
}

impl Raster {
    pub fn flat(width: u32, height: u32, fill: [u8; 3]) -> Raster {
        let mut rgb = Vec::with_capacity(width as usize * height as usize * 3);
        for _ in 0..width as u64 * height as u64 {
            rgb.extend_from_slice(&fill);
        }
        Raster { width, height, rgb }
    }
}

/// Reads a binary (P6, maxval 255) PPM file.
///
/// # Errors
/// A description of the first structural problem.
pub fn read_ppm(path: &Path) -> Result<Raster, String> {
    let bytes = fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut fields = Vec::new();
    let mut i = 0;
    // Header: magic, width, height, maxval, separated by whitespace, with
    // '#' comments allowed; a single whitespace byte then ends the header.
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(format!("{}: truncated header", path.display()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    if fields[0] != "P6" {
        return Err(format!("{}: not a binary PPM (magic {})", path.display(), fields[0]));
    }
    if fields[3] != "255" {
        return Err(format!("{}: unsupported maxval {}", path.display(), fields[3]));
    }
    let width: u32 =
        fields[1].parse().map_err(|_| format!("{}: bad width", path.display()))?;
    let height: u32 =
        fields[2].parse().map_err(|_| format!("{}: bad height", path.display()))?;
    i += 1; // the single whitespace byte after maxval
    let need = width as usize * height as usize * 3;
    let body = bytes.get(i..i + need).ok_or_else(|| {
        format!("{}: expected {need} pixel bytes, found {}", path.display(), bytes.len() - i)
    })?;
    Ok(Raster { width, height, rgb: body.to_vec() })
}

/// # Errors
/// I/O failures while writing.
pub fn write_ppm(path: &Path, raster: &Raster) -> std::io::Result<()> {
    let mut out = Vec::with_capacity(raster.rgb.len() + 32);
    write!(out, "P6\n{} {}\n255\n", raster.width, raster.height)?;
    out.extend_from_slice(&raster.rgb);
    fs::write(path, out)
}

pub fn color_for(seg_index: usize) -> [u8; 3] {
    PALETTE[seg_index % PALETTE.len()]
}

fn blend(base: &mut [u8], color: [u8; 3]) {
    for (b, c) in base.iter_mut().zip(color) {
        *b = (((ALPHA_DEN - ALPHA_NUM) * *b as u16 + ALPHA_NUM * c as u16) / ALPHA_DEN) as u8;
    }
}

/// Alpha-blends each mask over the raster in palette order and appends one
/// swatch row per mask below the image. Masks must match the raster grid.
pub fn overlay(base: &Raster, masks: &[BinaryMask]) -> Raster {
    let w = base.width as usize;
    let mut rgb = base.rgb.clone();
    for (seg, mask) in masks.iter().enumerate() {
        let color = color_for(seg);
        let grid = mask.to_grid();
        for (p, &on) in grid.iter().enumerate() {
            if on == 1 {
                blend(&mut rgb[p * 3..p * 3 + 3], color);
            }
        }
    }
    // Swatch strip: one row block per mask, color bar on the left.
    let strip_h = masks.len() as u32 * SWATCH_ROW;
    for (seg, _) in masks.iter().enumerate() {
        let color = color_for(seg);
        for _ in 0..SWATCH_ROW {
            for x in 0..w {
                let bar = x >= 2 && x < w.min(18).saturating_sub(2);
                rgb.extend_from_slice(if bar { &color } else { &[235, 235, 235] });
            }
        }
    }
    Raster { width: base.width, height: base.height + strip_h, rgb }
}

/// One legend line per mask: seg index, hex color, phrase.
pub fn legend_text(phrases: &[String]) -> String {
    let mut out = String::new();
    for (seg, phrase) in phrases.iter().enumerate() {
        let [r, g, b] = color_for(seg);
        out.push_str(&format!("{seg}\t#{r:02x}{g:02x}{b:02x}\t{phrase}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use gcgkit_core::mask::{mask_from_box, BBox};

    #[test]
    fn ppm_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ppm");
        let r = Raster::flat(3, 2, [10, 20, 30]);
        write_ppm(&path, &r).unwrap();
        assert_eq!(read_ppm(&path).unwrap(), r);
    }

    #[test]
    fn ppm_reader_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ppm");
        std::fs::write(&path, b"P5\n1 1\n255\n\0").unwrap();
        assert!(read_ppm(&path).unwrap_err().contains("magic"));
        std::fs::write(&path, b"P6\n4 4\n255\nxy").unwrap();
        assert!(read_ppm(&path).unwrap_err().contains("pixel bytes"));
    }

    #[test]
    fn overlay_tints_mask_pixels_and_appends_swatches() {
        let base = Raster::flat(8, 8, [200, 200, 200]);
        let mask = mask_from_box(&BBox::new(0, 0, 2, 2).unwrap(), 8, 8).unwrap();
        let out = overlay(&base, &[mask]);
        assert_eq!(out.height, 8 + 12);
        let inside = &out.rgb[0..3];
        let outside = &out.rgb[(3 * 3)..(3 * 3 + 3)];
        assert_ne!(inside, outside);
        assert_eq!(outside, &[200, 200, 200]);
        // Swatch row carries the first palette color.
        let strip_start = 8 * 8 * 3 + 2 * 3;
        assert_eq!(&out.rgb[strip_start..strip_start + 3], &color_for(0));
    }

    #[test]
    fn legend_lists_each_phrase_once() {
        let text = legend_text(&["a man".to_string(), "a dog".to_string()]);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("0\t#e6194b\t"));
        assert!(lines[1].ends_with("a dog"));
    }
}
