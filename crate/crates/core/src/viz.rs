//! Parsing, entropy and mask images, and the part-boundary entropy
//! statistic.
//!
//! For an input stem `x`, [`visualize`] writes `x_parsing.png` (argmax region
//! colour-coded), `x_entropy.png` (normalized entropy as grey) and
//! `x_mask.png` (the thresholded unconfident mask as grey), each upsampled to
//! the input resolution.

use std::path::{Path, PathBuf};

use crate::align::UnconfidentSource;
use crate::model::{InputImage, Model};
use crate::segmap::{dynamic_unconfident_mask, entropy_map, unconfident_mask, EntropyMap, SemanticProbMap};
use crate::synthdata::write_rgb;
use crate::{Error, Result};

const REGION_COLORS: [[f64; 3]; 8] = [
    [1.00, 0.85, 0.00],
    [0.90, 0.10, 0.10],
    [0.10, 0.60, 0.90],
    [0.10, 0.85, 0.30],
    [0.60, 0.20, 0.80],
    [1.00, 0.50, 0.00],
    [0.50, 0.30, 0.10],
    [0.00, 0.00, 0.00],
];

/// Region colour for a 1-based index; background is black.
pub fn region_color(region: usize, n_regions: usize) -> [f64; 3] {
    if region == n_regions {
        return [0.0; 3];
    }
    REGION_COLORS[(region - 1) % (REGION_COLORS.len() - 1)]
}

fn upsample(values: &[[f64; 3]], h: usize, w: usize, factor: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(h * w * factor * factor * 3);
    for row in 0..h * factor {
        for col in 0..w * factor {
            out.extend_from_slice(&values[(row / factor) * w + col / factor]);
        }
    }
    out
}

fn grey(v: f64) -> [f64; 3] {
    [v; 3]
}

/// Mask values for a source; global and omitted sources have none.
fn mask_values(entropy: &EntropyMap, source: UnconfidentSource) -> Result<Vec<f64>> {
    Ok(match source {
        UnconfidentSource::Fixed(tau) => unconfident_mask(entropy, tau)?.values,
        UnconfidentSource::Dynamic => dynamic_unconfident_mask(entropy).values,
        UnconfidentSource::Global => vec![1.0; entropy.normalized.len()],
        UnconfidentSource::Omitted => vec![0.0; entropy.normalized.len()],
    })
}

/// Writes three images per input; returns their paths in input order.
pub fn visualize(
    model: &Model,
    inputs: &[(String, InputImage)],
    source: UnconfidentSource,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let images: Vec<&InputImage> = inputs.iter().map(|(_, i)| i).collect();
    let outputs = model.forward_refs(&images)?;
    let f = model.config.downsample;
    let mut written = Vec::with_capacity(3 * inputs.len());
    for ((stem, _), out) in inputs.iter().zip(&outputs) {
        let probs = &out.probs;
        let (h, w, n) = (probs.height(), probs.width(), probs.n_regions());
        let entropy = entropy_map(probs);
        let parsing: Vec<[f64; 3]> = probs.argmax().into_iter().map(|r| region_color(r, n)).collect();
        let heat: Vec<[f64; 3]> = entropy.normalized.iter().map(|&e| grey(e)).collect();
        let mask: Vec<[f64; 3]> = mask_values(&entropy, source)?.into_iter().map(grey).collect();
        for (suffix, values) in [("parsing", parsing), ("entropy", heat), ("mask", mask)] {
            let path = out_dir.join(format!("{stem}_{suffix}.png"));
            write_rgb(&path, &upsample(&values, h, w, f), h * f, w * f)?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Mean normalized entropy over the whole map.
pub fn mean_entropy(probs: &SemanticProbMap) -> f64 {
    let e = entropy_map(probs);
    e.normalized.iter().sum::<f64>() / e.normalized.len() as f64
}

/// Mean normalized entropy on transition and interior cells.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryStat {
    pub transition: f64,
    pub interior: f64,
    pub transition_cells: usize,
    pub interior_cells: usize,
}

impl BoundaryStat {
    /// Both cell kinds present and transitions strictly more uncertain.
    pub fn boundary_dominates(&self) -> bool {
        self.transition_cells > 0 && self.interior_cells > 0 && self.transition > self.interior
    }
}

/// A feature cell is a transition cell when its `downsample × downsample`
/// block of full-resolution labels holds two or more regions, and interior
/// when it holds exactly one.
pub fn boundary_statistic(probs: &SemanticProbMap, labels: &[usize], height: usize, width: usize) -> Result<BoundaryStat> {
    let (h, w) = (probs.height(), probs.width());
    if h == 0 || w == 0 || height % h != 0 || width % w != 0 || height / h != width / w {
        return Err(Error::InvalidConfig(format!(
            "{height}×{width} labels do not tile a {h}×{w} map"
        )));
    }
    if labels.len() != height * width {
        return Err(Error::ShapeMismatch {
            what: "label map",
            expected: height * width,
            found: labels.len(),
        });
    }
    let f = height / h;
    let entropy = entropy_map(probs);
    let mut sums = [0.0f64; 2];
    let mut counts = [0usize; 2];
    for cy in 0..h {
        for cx in 0..w {
            let first = labels[cy * f * width + cx * f];
            let mixed = (cy * f..(cy + 1) * f)
                .any(|row| (cx * f..(cx + 1) * f).any(|col| labels[row * width + col] != first));
            let k = usize::from(!mixed);
            sums[k] += entropy.normalized[cy * w + cx];
            counts[k] += 1;
        }
    }
    let mean = |k: usize| if counts[k] == 0 { 0.0 } else { sums[k] / counts[k] as f64 };
    Ok(BoundaryStat {
        transition: mean(0),
        interior: mean(1),
        transition_cells: counts[0],
        interior_cells: counts[1],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn writes_three_images_per_input() {
        let cfg = ModelConfig {
            input_height: 16,
            input_width: 8,
            downsample: 4,
            backbone_channels: 8,
            reduced_channels: 4,
            n_regions: 8,
            num_identities: 2,
            seed: 1,
        };
        let model = Model::new(cfg).unwrap();
        let img = InputImage {
            height: 16,
            width: 8,
            pixels: vec![0.3; 16 * 8 * 3],
        };
        let dir = tempfile::tempdir().unwrap();
        let inputs = vec![("a".to_string(), img.clone()), ("b".to_string(), img)];
        let paths = visualize(&model, &inputs, UnconfidentSource::Fixed(0.5), dir.path()).unwrap();
        assert_eq!(paths.len(), 6);
        let back = image::open(&paths[1]).unwrap();
        assert_eq!((back.width(), back.height()), (8, 16));
    }

    #[test]
    fn boundary_cells_by_block_content() {
        // 2×1 cells of 2×2 pixels: top block mixed, bottom block pure.
        let probs = SemanticProbMap::new(2, 1, 2, vec![0.5, 0.5, 1.0, 0.0]).unwrap();
        let labels = [1, 2, 1, 1, 2, 2, 2, 2];
        let s = boundary_statistic(&probs, &labels, 4, 2).unwrap();
        assert_eq!((s.transition_cells, s.interior_cells), (1, 1));
        assert!((s.transition - 1.0).abs() < 1e-12);
        assert_eq!(s.interior, 0.0);
        assert!(s.boundary_dominates());
    }
}
