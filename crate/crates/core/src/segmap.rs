//! Entropy and confidence masks over per-pixel semantic region probabilities.
//!
//! Regions are numbered `1..=N` in files and reports; in memory region `i`
//! lives in column `i - 1`, so the background (region `N`) is the last column.

use crate::{Error, Result};

/// Tolerance on the per-pixel sum-to-one invariant.
pub const SUM_TOLERANCE: f64 = 1e-6;

/// Per-pixel probabilities `p(R_i | g)` over `N` regions, pixel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticProbMap {
    height: usize,
    width: usize,
    n_regions: usize,
    probs: Vec<f64>,
}

impl SemanticProbMap {
    pub fn new(height: usize, width: usize, n_regions: usize, probs: Vec<f64>) -> Result<Self> {
        if n_regions < 2 {
            return Err(Error::InvalidConfig(format!(
                "a probability map needs at least 2 regions, got {n_regions}"
            )));
        }
        let expected = height * width * n_regions;
        if probs.len() != expected {
            return Err(Error::ShapeMismatch {
                what: "probability map",
                expected,
                found: probs.len(),
            });
        }
        for (pixel, row) in probs.chunks(n_regions).enumerate() {
            let sum: f64 = row.iter().sum();
            let in_range = row.iter().all(|p| (0.0..=1.0 + SUM_TOLERANCE).contains(p));
            if !in_range || (sum - 1.0).abs() > SUM_TOLERANCE || !sum.is_finite() {
                return Err(Error::InvalidProbabilities { pixel, sum });
            }
        }
        Ok(Self {
            height,
            width,
            n_regions,
            probs,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn n_regions(&self) -> usize {
        self.n_regions
    }

    /// 1-based index of the background region, always `N`.
    pub fn background_index(&self) -> usize {
        self.n_regions
    }

    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.probs[index * self.n_regions..(index + 1) * self.n_regions]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Most probable 1-based region per pixel; ties go to the lower index.
    pub fn argmax(&self) -> Vec<usize> {
        self.probs
            .chunks(self.n_regions)
            .map(|row| {
                let mut best = 0;
                for (i, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = i;
                    }
                }
                best + 1
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyMap {
    pub height: usize,
    pub width: usize,
    /// Entropy in nats.
    pub raw: Vec<f64>,
    /// `raw / e_max`, in `[0, 1]`.
    pub normalized: Vec<f64>,
    /// `ln N`.
    pub e_max: f64,
}

/// Mask of high-entropy pixels: each entry is 0 or a normalized entropy at
/// or above `threshold`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnconfidentMask {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub threshold: f64,
}

impl UnconfidentMask {
    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// `1 − normalized entropy` per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

/// `−Σ p ln p` with `0·ln 0 := 0`.
pub fn shannon_entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

pub fn entropy_map(probs: &SemanticProbMap) -> EntropyMap {
    let e_max = (probs.n_regions as f64).ln();
    let raw: Vec<f64> = probs.probs.chunks(probs.n_regions).map(shannon_entropy).collect();
    let normalized = raw.iter().map(|e| (e / e_max).clamp(0.0, 1.0)).collect();
    EntropyMap {
        height: probs.height,
        width: probs.width,
        raw,
        normalized,
        e_max,
    }
}

/// Keeps normalized entropies at or above `tau`.
pub fn unconfident_mask(entropy: &EntropyMap, tau: f64) -> Result<UnconfidentMask> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidThreshold(tau));
    }
    Ok(threshold_mask(entropy, tau))
}

fn threshold_mask(entropy: &EntropyMap, threshold: f64) -> UnconfidentMask {
    let values = entropy
        .normalized
        .iter()
        .map(|&e| if e >= threshold { e } else { 0.0 })
        .collect();
    UnconfidentMask {
        height: entropy.height,
        width: entropy.width,
        values,
        threshold,
    }
}

pub fn confidence_map(entropy: &EntropyMap) -> ConfidenceMap {
    ConfidenceMap {
        height: entropy.height,
        width: entropy.width,
        values: entropy.normalized.iter().map(|e| 1.0 - e).collect(),
    }
}

/// Median with the midpoint convention for even counts. `None` when empty.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    Some(if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    })
}

/// Per-image threshold at the median normalized entropy, so the upper half
/// of the entropy distribution (ties included) is marked unconfident.
pub fn dynamic_unconfident_mask(entropy: &EntropyMap) -> UnconfidentMask {
    let threshold = median(&entropy.normalized).unwrap_or(0.0);
    threshold_mask(entropy, threshold)
}
