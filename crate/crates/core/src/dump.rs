//! Grayscale debug images of per-layer attention, scores and masks.

use std::fs;
use std::path::{Path, PathBuf};

use image::GrayImage;

use crate::bsi::SuppressionMask;
use crate::encoder::{AttentionRecord, LayerTrace};
use crate::error::{Error, Result};
use crate::synth::write_pgm;

/// Pixels per grid cell in written images.
const CELL: u32 = 8;

/// Min-max normalized heatmap of a row-major `grid`, each cell drawn as a
/// `CELL × CELL` block. A constant map comes out black.
pub fn heatmap(values: &[f64], grid: (usize, usize)) -> Result<GrayImage> {
    let (h, w) = grid;
    if values.len() != h * w {
        return Err(Error::Alignment(format!("{} values for a {h}x{w} grid", values.len())));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    Ok(GrayImage::from_fn(w as u32 * CELL, h as u32 * CELL, |x, y| {
        let v = values[(y / CELL) as usize * w + (x / CELL) as usize];
        let t = if span > 0.0 { (v - lo) / span } else { 0.0 };
        image::Luma([(t * 255.0).round() as u8])
    }))
}

/// Mean attention of the temporal tokens over search tokens, or `None` when
/// the layer saw no temporal tokens.
pub fn temporal_attention(attn: &AttentionRecord) -> Option<Vec<f64>> {
    let n_t = attn.layout.n_t;
    if n_t == 0 {
        return None;
    }
    let w = attn.w_t();
    let n_s = w.shape()[1];
    Some(
        (0..n_s)
            .map(|j| (0..n_t).map(|i| w.data()[i * n_s + j]).sum::<f64>() / n_t as f64)
            .collect(),
    )
}

/// Kept tokens white, suppressed tokens black.
pub fn mask_values(mask: &SuppressionMask) -> Vec<f64> {
    mask.suppressed.iter().map(|&s| if s { 0.0 } else { 1.0 }).collect()
}

/// What to write for each tracked frame.
#[derive(Clone, Copy, Debug, Default)]
pub struct DumpOptions {
    pub attention: bool,
    pub masks: bool,
}

/// Writes `{frame}_L{layer}_{modality}_{kind}.pgm` files under `dir` and
/// returns their paths. Kinds are `tattn` (temporal attention), `score` and
/// `mask`.
pub fn dump_traces(dir: &Path, frame: usize, traces: &[LayerTrace], opts: DumpOptions) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = vec![];
    let mut emit = |layer: usize, tag: &str, kind: &str, values: &[f64], grid| -> Result<()> {
        let path = dir.join(format!("{frame:06}_L{layer:02}_{tag}_{kind}.pgm"));
        write_pgm(&path, &heatmap(values, grid)?)?;
        written.push(path);
        Ok(())
    };
    for (i, t) in traces.iter().enumerate() {
        for (tag, attn, mask) in [("rgb", &t.attn_rgb, &t.mask_rgb), ("x", &t.attn_x, &t.mask_x)] {
            let grid = attn.layout.grid_s;
            if opts.attention {
                if let Some(v) = temporal_attention(attn) {
                    emit(i, tag, "tattn", &v, grid)?;
                }
            }
            if opts.masks {
                emit(i, tag, "score", &mask.scores, grid)?;
                emit(i, tag, "mask", &mask_values(mask), grid)?;
            }
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heatmap_spans_full_range() {
        let img = heatmap(&[0.0, 1.0, 2.0, 4.0], (2, 2)).unwrap();
        assert_eq!(img.dimensions(), (2 * CELL, 2 * CELL));
        assert_eq!(img.get_pixel(0, 0).0[0], 0);
        assert_eq!(img.get_pixel(CELL, CELL).0[0], 255);
        assert_eq!(img.get_pixel(CELL, 0).0[0], 64);
    }

    #[test]
    fn constant_map_is_black() {
        let img = heatmap(&[3.0; 6], (2, 3)).unwrap();
        assert!(img.pixels().all(|p| p.0[0] == 0));
        assert!(heatmap(&[1.0; 5], (2, 3)).is_err());
    }

    #[test]
    fn mask_marks_suppressed_black() {
        let m = SuppressionMask {
            suppressed: vec![true, false],
            scores: vec![0.1, 0.2],
        };
        assert_eq!(mask_values(&m), vec![0.0, 1.0]);
    }
}
