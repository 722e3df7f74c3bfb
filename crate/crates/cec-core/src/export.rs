//! Relation-map export: 8-bit grayscale PGM (nearest-neighbor upsampled)
//! and raw CSV, plus the mask-contrast statistic used to judge whether a
//! map actually highlights the object.

use crate::error::{CecError, Result};
use crate::synth::IMAGE_SIZE;

/// Upsampling factor of the exported PGM.
pub const PGM_UPSAMPLE: usize = 6;

/// Linear [-1, 1] -> [0, 255] mapping of a square relation map, upsampled
/// nearest-neighbor, as a binary P5 image.
pub fn relation_to_pgm(scores: &[f64]) -> Result<Vec<u8>> {
    let side = (scores.len() as f64).sqrt() as usize;
    if side * side != scores.len() {
        return Err(CecError::Dimension(format!(
            "relation map of {} entries is not square",
            scores.len()
        )));
    }
    let out_side = side * PGM_UPSAMPLE;
    let mut bytes = format!("P5 {out_side} {out_side} 255\n").into_bytes();
    for y in 0..out_side {
        for x in 0..out_side {
            let v = scores[(y / PGM_UPSAMPLE) * side + x / PGM_UPSAMPLE];
            let gray = ((v + 1.0) / 2.0 * 255.0).round().clamp(0.0, 255.0) as u8;
            bytes.push(gray);
        }
    }
    Ok(bytes)
}

/// Grid-layout CSV of a square relation map, one row per patch row.
pub fn relation_to_csv(scores: &[f64]) -> Result<String> {
    let side = (scores.len() as f64).sqrt() as usize;
    if side * side != scores.len() {
        return Err(CecError::Dimension(format!(
            "relation map of {} entries is not square",
            scores.len()
        )));
    }
    let mut out = String::new();
    for row in scores.chunks(side) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    Ok(out)
}

/// Mean relation score inside vs outside the object mask, mapping each
/// pixel to its patch cell. Returns (inside mean, outside mean).
pub fn mask_contrast(scores: &[f64], mask: &[bool]) -> Result<(f64, f64)> {
    let side = (scores.len() as f64).sqrt() as usize;
    if side * side != scores.len() || mask.len() != IMAGE_SIZE * IMAGE_SIZE {
        return Err(CecError::Dimension(
            "mask contrast needs a square map and a full-frame mask".into(),
        ));
    }
    let mut sums = [0.0f64; 2];
    let mut counts = [0usize; 2];
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let py = y * side / IMAGE_SIZE;
            let px = x * side / IMAGE_SIZE;
            let inside = mask[y * IMAGE_SIZE + x] as usize;
            sums[inside] += scores[py * side + px];
            counts[inside] += 1;
        }
    }
    if counts[0] == 0 || counts[1] == 0 {
        return Err(CecError::Data("mask is degenerate (all or nothing)".into()));
    }
    Ok((sums[1] / counts[1] as f64, sums[0] / counts[0] as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_contract() {
        let scores = vec![0.0; 25];
        let bytes = relation_to_pgm(&scores).unwrap();
        assert!(bytes.starts_with(b"P5 30 30 255\n"));
        assert_eq!(bytes.len(), b"P5 30 30 255\n".len() + 900);
        // neutral scores map to mid-gray
        assert_eq!(bytes[b"P5 30 30 255\n".len()], 128);
    }

    #[test]
    fn pgm_range_mapping() {
        let mut scores = vec![-1.0; 25];
        scores[24] = 1.0;
        let bytes = relation_to_pgm(&scores).unwrap();
        let body = &bytes[b"P5 30 30 255\n".len()..];
        assert_eq!(body[0], 0);
        assert_eq!(*body.last().unwrap(), 255);
    }

    #[test]
    fn csv_has_all_values() {
        let scores: Vec<f64> = (0..25).map(|i| (i as f64) / 25.0).collect();
        let csv = relation_to_csv(&scores).unwrap();
        assert_eq!(csv.lines().count(), 5);
        let total: usize = csv.lines().map(|l| l.split(',').count()).sum();
        assert_eq!(total, 25);
    }

    #[test]
    fn contrast_separates_inside_and_outside() {
        // score high exactly on the patch covering the masked block
        let mut scores = vec![0.0; 25];
        scores[0] = 1.0;
        let mut mask = vec![false; IMAGE_SIZE * IMAGE_SIZE];
        for y in 0..6 {
            for x in 0..6 {
                mask[y * IMAGE_SIZE + x] = true;
            }
        }
        let (inside, outside) = mask_contrast(&scores, &mask).unwrap();
        assert!(inside > outside);
    }
}
