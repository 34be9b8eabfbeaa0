//! Single-query retrieval metrics: CMC, mean average precision and the area
//! under the pooled precision-recall curve.
//!
//! Ranking rule: ascending distance, ties broken by gallery index, pairs
//! without comparable regions after every finite distance. Pairs of an
//! image with itself are excluded from ranking altogether.

use std::fmt::Write as _;

use crate::align::{distance, DistanceConfig, DistanceKind};
use crate::descfile::DescriptorRecord;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Entry {
    Distance(f64),
    /// No comparable regions; ranked after every distance.
    Missing,
    /// Removed from the ranking (same image on both sides).
    Excluded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub n_probe: usize,
    pub n_gallery: usize,
    pub entries: Vec<Entry>,
    pub probe_ids: Vec<i64>,
    pub gallery_ids: Vec<i64>,
}

impl ScoreMatrix {
    pub fn new(entries: Vec<Entry>, probe_ids: Vec<i64>, gallery_ids: Vec<i64>) -> Result<Self> {
        let (n_probe, n_gallery) = (probe_ids.len(), gallery_ids.len());
        if entries.len() != n_probe * n_gallery {
            return Err(Error::ShapeMismatch {
                what: "score matrix",
                expected: n_probe * n_gallery,
                found: entries.len(),
            });
        }
        if entries.iter().any(|e| matches!(e, Entry::Distance(d) if !d.is_finite())) {
            return Err(Error::NonFinite("score matrix"));
        }
        Ok(Self {
            n_probe,
            n_gallery,
            entries,
            probe_ids,
            gallery_ids,
        })
    }

    /// Convenience constructor from plain distances.
    pub fn from_distances(distances: &[f64], probe_ids: Vec<i64>, gallery_ids: Vec<i64>) -> Result<Self> {
        Self::new(distances.iter().map(|&d| Entry::Distance(d)).collect(), probe_ids, gallery_ids)
    }

    pub fn entry(&self, probe: usize, gallery: usize) -> Entry {
        self.entries[probe * self.n_gallery + gallery]
    }

    /// Gallery indices in rank order for one probe, exclusions removed.
    pub fn ranking(&self, probe: usize) -> Vec<usize> {
        let key = |g: usize| match self.entry(probe, g) {
            Entry::Distance(d) => (0u8, d),
            Entry::Missing => (1, 0.0),
            Entry::Excluded => (2, 0.0),
        };
        let mut order: Vec<usize> = (0..self.n_gallery)
            .filter(|&g| self.entry(probe, g) != Entry::Excluded)
            .collect();
        order.sort_by(|&a, &b| {
            let (ka, kb) = (key(a), key(b));
            ka.0.cmp(&kb.0).then(ka.1.total_cmp(&kb.1)).then(a.cmp(&b))
        });
        order
    }

    fn hits(&self, probe: usize) -> Result<Vec<bool>> {
        let id = self.probe_ids[probe];
        let hits: Vec<bool> = self.ranking(probe).into_iter().map(|g| self.gallery_ids[g] == id).collect();
        if !hits.iter().any(|&h| h) {
            return Err(Error::NoGalleryMatch { probe });
        }
        Ok(hits)
    }
}

/// Fraction of probes with a correct match within the top `k`, for
/// `k = 1..=max_rank`.
pub fn cmc(scores: &ScoreMatrix, max_rank: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; max_rank];
    for probe in 0..scores.n_probe {
        let hits = scores.hits(probe)?;
        let first = hits.iter().position(|&h| h).expect("checked above");
        for c in counts.iter_mut().skip(first) {
            *c += 1;
        }
    }
    let n = scores.n_probe.max(1) as f64;
    Ok(counts.into_iter().map(|c| c as f64 / n).collect())
}

/// Average precision of one ranked hit list.
pub fn average_precision(hits: &[bool]) -> f64 {
    let relevant = hits.iter().filter(|&&h| h).count();
    if relevant == 0 {
        return 0.0;
    }
    let mut found = 0;
    let mut sum = 0.0;
    for (k, &h) in hits.iter().enumerate() {
        if h {
            found += 1;
            sum += found as f64 / (k + 1) as f64;
        }
    }
    sum / relevant as f64
}

pub fn mean_ap(scores: &ScoreMatrix) -> Result<f64> {
    let mut total = 0.0;
    for probe in 0..scores.n_probe {
        total += average_precision(&scores.hits(probe)?);
    }
    Ok(total / scores.n_probe.max(1) as f64)
}

/// One operating point of the pooled precision-recall sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    /// Pairs with distance at or below this value (missing pairs: `+∞`)
    /// are predicted "same identity".
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Pools every non-excluded pair as a binary sample scored by negative
/// distance and sweeps the threshold over each distinct score.
pub fn pr_curve(scores: &ScoreMatrix) -> Result<Vec<PrPoint>> {
    let mut pairs: Vec<(f64, bool)> = Vec::new();
    for p in 0..scores.n_probe {
        for g in 0..scores.n_gallery {
            let d = match scores.entry(p, g) {
                Entry::Distance(d) => d,
                Entry::Missing => f64::INFINITY,
                Entry::Excluded => continue,
            };
            pairs.push((d, scores.probe_ids[p] == scores.gallery_ids[g]));
        }
    }
    let positives = pairs.iter().filter(|p| p.1).count();
    if positives == 0 {
        return Err(Error::DegeneratePool("no positive pairs"));
    }
    if positives == pairs.len() {
        return Err(Error::DegeneratePool("no negative pairs"));
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < pairs.len() {
        let threshold = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == threshold {
            if pairs[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(PrPoint {
            threshold,
            precision: tp as f64 / (tp + fp) as f64,
            recall: tp as f64 / positives as f64,
        });
    }
    Ok(points)
}

/// Step-interpolated area: `Σ ΔR · P` over the sweep.
pub fn pr_auc(scores: &ScoreMatrix) -> Result<f64> {
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    for pt in pr_curve(scores)? {
        area += (pt.recall - prev_recall) * pt.precision;
        prev_recall = pt.recall;
    }
    Ok(area)
}

/// Trapezoidal area under the same sweep, anchored at `(R = 0, P = 1)`.
pub fn pr_auc_trapezoid(scores: &ScoreMatrix) -> Result<f64> {
    let (mut prev_r, mut prev_p) = (0.0, 1.0);
    let mut area = 0.0;
    for pt in pr_curve(scores)? {
        area += (pt.recall - prev_r) * 0.5 * (pt.precision + prev_p);
        prev_r = pt.recall;
        prev_p = pt.precision;
    }
    Ok(area)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    /// `cmc[k − 1]` is the rank-`k` accuracy.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub pr_auc: f64,
}

impl MetricReport {
    pub fn compute(scores: &ScoreMatrix, max_rank: usize) -> Result<Self> {
        Ok(Self {
            cmc: cmc(scores, max_rank)?,
            map: mean_ap(scores)?,
            pr_auc: pr_auc(scores)?,
        })
    }

    pub fn rank(&self, k: usize) -> f64 {
        self.cmc[k - 1]
    }

    pub fn rank1(&self) -> f64 {
        self.cmc[0]
    }

    /// Human-readable summary.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in [1, 3, 5, 10] {
            if k <= self.cmc.len() {
                let _ = writeln!(s, "rank-{k:<3} {:.2}%", 100.0 * self.rank(k));
            }
        }
        let _ = writeln!(s, "mAP      {:.2}%", 100.0 * self.map);
        let _ = writeln!(s, "PR-AUC   {:.4}", self.pr_auc);
        s
    }

    /// `key = value` lines; values printed with round-trip precision.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "map = {:?}", self.map);
        let _ = writeln!(s, "pr_auc = {:?}", self.pr_auc);
        let _ = writeln!(s, "max_rank = {}", self.cmc.len());
        for (i, v) in self.cmc.iter().enumerate() {
            let _ = writeln!(s, "cmc.{} = {:?}", i + 1, v);
        }
        s
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let pairs = crate::config::parse_key_values(text)?;
        let get = |k: &str| -> Result<f64> {
            pairs
                .iter()
                .find(|(key, _)| key == k)
                .and_then(|(_, v)| v.parse().ok())
                .ok_or_else(|| Error::InvalidConfig(format!("metric report lacks `{k}`")))
        };
        let max_rank = get("max_rank")? as usize;
        let cmc = (1..=max_rank).map(|k| get(&format!("cmc.{k}"))).collect::<Result<_>>()?;
        Ok(Self {
            cmc,
            map: get("map")?,
            pr_auc: get("pr_auc")?,
        })
    }

    /// Two-column `rank accuracy` table.
    pub fn cmc_table(&self) -> String {
        let mut s = String::from("rank\taccuracy\n");
        for (i, v) in self.cmc.iter().enumerate() {
            let _ = writeln!(s, "{}\t{v}", i + 1);
        }
        s
    }
}

/// Builds the probe × gallery score matrix. Pairs sharing an image id are
/// excluded.
pub fn score_matrix(
    gallery: &[DescriptorRecord],
    probe: &[DescriptorRecord],
    kind: DistanceKind,
    cfg: &DistanceConfig,
) -> Result<ScoreMatrix> {
    let mut entries = Vec::with_capacity(probe.len() * gallery.len());
    for p in probe {
        for g in gallery {
            let e = if p.image_id == g.image_id {
                Entry::Excluded
            } else {
                match distance(&p.descriptor, &g.descriptor, kind, cfg) {
                    Ok(d) => Entry::Distance(d),
                    Err(Error::NoComparableRegions) => Entry::Missing,
                    Err(e) => return Err(e),
                }
            };
            entries.push(e);
        }
    }
    ScoreMatrix::new(
        entries,
        probe.iter().map(|r| r.identity).collect(),
        gallery.iter().map(|r| r.identity).collect(),
    )
}

pub fn evaluate_retrieval(
    gallery: &[DescriptorRecord],
    probe: &[DescriptorRecord],
    kind: DistanceKind,
    cfg: &DistanceConfig,
    max_rank: usize,
) -> Result<MetricReport> {
    MetricReport::compute(&score_matrix(gallery, probe, kind, cfg)?, max_rank)
}
