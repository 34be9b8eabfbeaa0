//! Training objectives: visibility-weighted region ID losses, batch-hard
//! triplet mining over the extended distance, the parsing loss and their
//! weighted total.
//!
//! These are plain-value implementations. The trainer builds the same
//! quantities on the autodiff tape (see [`crate::train`]) and reuses
//! [`mine_batch_hard`] so both paths select identical triplets.

use std::collections::HashMap;

use crate::align::DistanceMatrix;
use crate::autodiff::softmax_rows;
use crate::segmap::SemanticProbMap;
use crate::tensor::Matrix;
use crate::{Error, Result};

/// Parsing weight `λ` and triplet margin `m`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            margin: 0.3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.margin >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "loss weights must be nonnegative (lambda {}, margin {})",
                self.lambda, self.margin
            )));
        }
        Ok(())
    }
}

/// One affine identity classifier, `c_new → K`, followed by softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    /// `c_new × K`
    pub weight: Matrix,
    /// `1 × K`
    pub bias: Matrix,
}

impl Classifier {
    pub fn num_classes(&self) -> usize {
        self.weight.cols()
    }

    pub fn probabilities(&self, feature: &[f64]) -> Result<Vec<f64>> {
        if feature.len() != self.weight.rows() {
            return Err(Error::ShapeMismatch {
                what: "classifier input",
                expected: self.weight.rows(),
                found: feature.len(),
            });
        }
        let x = Matrix::from_vec(1, feature.len(), feature.to_vec());
        let mut logits = x.matmul(&self.weight);
        logits.add_assign(&self.bias);
        Ok(softmax_rows(&logits).into_vec())
    }
}

/// One classifier per foreground region followed by one for the
/// unconfident feature.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionClassifiers {
    pub heads: Vec<Classifier>,
}

impl RegionClassifiers {
    pub fn region(&self, i: usize) -> &Classifier {
        &self.heads[i]
    }

    pub fn unconfident(&self) -> &Classifier {
        self.heads.last().expect("at least one classifier head")
    }

    pub fn foreground_regions(&self) -> usize {
        self.heads.len() - 1
    }
}

/// Inputs of the ID losses for one image: unit-normalized plain region
/// features `f_i` with weights `Ŝ_i = S_i / (h·w)`, and the same for the
/// unconfident feature.
#[derive(Debug, Clone, PartialEq)]
pub struct IdSample {
    pub region_features: Vec<Vec<f64>>,
    pub region_weights: Vec<f64>,
    pub unconfident_feature: Vec<f64>,
    pub unconfident_weight: f64,
}

pub fn cross_entropy(probs: &[f64], label: usize) -> f64 {
    -probs[label].ln()
}

fn weighted_id_loss(
    samples: &[IdSample],
    classifiers: &RegionClassifiers,
    labels: &[usize],
    with_unconfident: bool,
) -> Result<f64> {
    if samples.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            what: "identity labels",
            expected: samples.len(),
            found: labels.len(),
        });
    }
    if samples.is_empty() {
        return Ok(0.0);
    }
    let k = classifiers.unconfident().num_classes();
    let mut total = 0.0;
    for (sample, &y) in samples.iter().zip(labels) {
        if y >= k {
            return Err(Error::InvalidLabel { label: y, limit: k });
        }
        if sample.region_features.len() != classifiers.foreground_regions() {
            return Err(Error::ShapeMismatch {
                what: "region feature count",
                expected: classifiers.foreground_regions(),
                found: sample.region_features.len(),
            });
        }
        for (i, (f, &w)) in sample.region_features.iter().zip(&sample.region_weights).enumerate() {
            if w != 0.0 {
                total += w * cross_entropy(&classifiers.region(i).probabilities(f)?, y);
            }
        }
        if with_unconfident && sample.unconfident_weight != 0.0 {
            let p = classifiers.unconfident().probabilities(&sample.unconfident_feature)?;
            total += sample.unconfident_weight * cross_entropy(&p, y);
        }
    }
    Ok(total / samples.len() as f64)
}

/// Batch mean of `Σ_i Ŝ_i·CE(y, ŷ_i)` over foreground regions only.
pub fn id_loss(samples: &[IdSample], classifiers: &RegionClassifiers, labels: &[usize]) -> Result<f64> {
    weighted_id_loss(samples, classifiers, labels, false)
}

/// [`id_loss`] plus the `Ŝ_un·CE(y, ŷ_un)` term.
pub fn extended_id_loss(
    samples: &[IdSample],
    classifiers: &RegionClassifiers,
    labels: &[usize],
) -> Result<f64> {
    weighted_id_loss(samples, classifiers, labels, true)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Dense copy of `dist` where missing pairs take the largest present
/// off-diagonal value.
pub fn fill_missing(dist: &DistanceMatrix) -> Vec<f64> {
    let n = dist.size;
    let max = (0..n * n)
        .filter(|k| k / n != k % n)
        .filter_map(|k| dist.values[k])
        .fold(0.0, f64::max);
    dist.values.iter().map(|v| v.unwrap_or(max)).collect()
}

/// Checks that the batch has at least two identities, each at least twice.
pub fn check_pk_batch(identities: &[usize]) -> Result<()> {
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for &id in identities {
        *counts.entry(id).or_default() += 1;
    }
    if counts.len() < 2 {
        return Err(Error::InvalidBatch(format!(
            "batch-hard mining needs at least 2 identities, got {}",
            counts.len()
        )));
    }
    if let Some((id, _)) = counts.iter().find(|(_, &c)| c < 2) {
        return Err(Error::InvalidBatch(format!("identity {id} appears only once")));
    }
    Ok(())
}

/// For each anchor, the farthest same-identity sample (excluding itself)
/// and the nearest other-identity sample. Ties go to the lower index.
pub fn mine_batch_hard(dist: &[f64], identities: &[usize]) -> Result<Vec<Triplet>> {
    let n = identities.len();
    if dist.len() != n * n {
        return Err(Error::ShapeMismatch {
            what: "distance matrix",
            expected: n * n,
            found: dist.len(),
        });
    }
    check_pk_batch(identities)?;
    let triplets = (0..n)
        .map(|a| {
            let mut positive = None;
            let mut negative = None;
            for j in 0..n {
                let d = dist[a * n + j];
                if identities[j] == identities[a] {
                    if j != a && positive.is_none_or(|p: usize| d > dist[a * n + p]) {
                        positive = Some(j);
                    }
                } else if negative.is_none_or(|q: usize| d < dist[a * n + q]) {
                    negative = Some(j);
                }
            }
            Triplet {
                anchor: a,
                positive: positive.expect("checked P×K batch"),
                negative: negative.expect("checked P×K batch"),
            }
        })
        .collect();
    Ok(triplets)
}

/// Mean over anchors of `max(0, d(a,p) − d(a,n) + margin)` with batch-hard
/// mining. Missing pairs are filled per [`fill_missing`].
pub fn batch_hard_triplet(dist: &DistanceMatrix, identities: &[usize], margin: f64) -> Result<f64> {
    let n = dist.size;
    let dense = fill_missing(dist);
    let triplets = mine_batch_hard(&dense, identities)?;
    let total: f64 = triplets
        .iter()
        .map(|t| (dense[t.anchor * n + t.positive] - dense[t.anchor * n + t.negative] + margin).max(0.0))
        .sum();
    Ok(total / n as f64)
}

/// Mean per-pixel cross-entropy against 1-based region labels.
pub fn parsing_loss(probs: &SemanticProbMap, part_labels: &[usize]) -> Result<f64> {
    if part_labels.len() != probs.pixel_count() {
        return Err(Error::ShapeMismatch {
            what: "part labels",
            expected: probs.pixel_count(),
            found: part_labels.len(),
        });
    }
    let n = probs.n_regions();
    let mut total = 0.0;
    for (px, &label) in part_labels.iter().enumerate() {
        if label == 0 || label > n {
            return Err(Error::InvalidLabel { label, limit: n });
        }
        total += cross_entropy(probs.pixel(px), label - 1);
    }
    Ok(total / part_labels.len() as f64)
}

/// `λ·L_parsing + L̃_ID + L_triplet`.
pub fn total_loss(parsing: f64, id_extended: f64, triplet: f64, weights: &LossWeights) -> f64 {
    weights.lambda * parsing + id_extended + triplet
}
