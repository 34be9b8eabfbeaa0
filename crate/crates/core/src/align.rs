//! Per-person semantic descriptors and the visibility-weighted distances
//! used to compare two people region by region.

use crate::autodiff::euclidean;
use crate::segmap::{
    confidence_map, dynamic_unconfident_mask, entropy_map, unconfident_mask, ConfidenceMap,
    SemanticProbMap, UnconfidentMask,
};
use crate::{Error, Result};

/// Default denominator guard for distances and pooled features.
pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    /// Backbone output `T`.
    Backbone,
    /// Channel-reduced map `F`.
    Reduced,
}

/// A spatial feature grid, pixel-major with `channels` values per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    kind: FeatureKind,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        kind: FeatureKind,
        data: Vec<f64>,
    ) -> Result<Self> {
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(Error::ShapeMismatch {
                what: "feature map",
                expected,
                found: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature map"));
        }
        Ok(Self {
            height,
            width,
            channels,
            kind,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.data[index * self.channels..(index + 1) * self.channels]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Plain mean over all pixels.
    pub fn global_average(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.channels];
        for i in 0..self.pixel_count() {
            for (o, v) in out.iter_mut().zip(self.pixel(i)) {
                *o += v;
            }
        }
        let n = self.pixel_count().max(1) as f64;
        out.iter_mut().for_each(|v| *v /= n);
        out
    }
}

/// Region features for regions `1..N−1` (background dropped), visibility
/// scores for the same regions, and the pooled unconfident feature.
#[derive(Debug, Clone, PartialEq)]
pub struct PersonDescriptor {
    pub region_features: Vec<Vec<f64>>,
    pub visibility: Vec<f64>,
    pub unconfident_feature: Vec<f64>,
    pub unconfident_score: f64,
}

impl PersonDescriptor {
    /// `N`, counting the dropped background region.
    pub fn n_regions(&self) -> usize {
        self.visibility.len() + 1
    }

    pub fn feature_dim(&self) -> usize {
        self.unconfident_feature.len()
    }

    fn check_compatible(&self, other: &PersonDescriptor) -> Result<()> {
        if self.visibility.len() != other.visibility.len() {
            return Err(Error::ShapeMismatch {
                what: "descriptor region count",
                expected: self.visibility.len(),
                found: other.visibility.len(),
            });
        }
        if self.feature_dim() != other.feature_dim() {
            return Err(Error::ShapeMismatch {
                what: "descriptor feature length",
                expected: self.feature_dim(),
                found: other.feature_dim(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceConfig {
    pub epsilon: f64,
}

impl Default for DistanceConfig {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
        }
    }
}

/// Which distance evaluation and retrieval rank with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DistanceKind {
    /// Visibility-weighted sum over shared regions only.
    Aligned,
    /// Normalized weighted mean including the unconfident pseudo-region.
    #[default]
    Extended,
}

/// Where the unconfident pseudo-region comes from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnconfidentSource {
    /// Entropy mask with a fixed threshold.
    Fixed(f64),
    /// Entropy mask thresholded at the per-image median.
    Dynamic,
    /// Global average of the whole map with score `h·w`.
    Global,
    /// No unconfident region at all.
    Omitted,
}

fn check_grid(features: &FeatureMap, h: usize, w: usize, what: &'static str) -> Result<()> {
    if features.height != h || features.width != w {
        return Err(Error::ShapeMismatch {
            what,
            expected: h * w,
            found: features.pixel_count(),
        });
    }
    Ok(())
}

/// Probability-weighted sums of reduced pixel features, one per region
/// (background included). With `weight`, each pixel is additionally scaled
/// by its confidence. Sums are returned unnormalized.
pub fn region_features(
    features: &FeatureMap,
    probs: &SemanticProbMap,
    weight: Option<&ConfidenceMap>,
) -> Result<Vec<Vec<f64>>> {
    check_grid(features, probs.height(), probs.width(), "feature map vs probability map")?;
    if let Some(m) = weight {
        if m.height != probs.height() || m.width != probs.width() {
            return Err(Error::ShapeMismatch {
                what: "confidence map",
                expected: probs.pixel_count(),
                found: m.values.len(),
            });
        }
    }
    let n = probs.n_regions();
    let mut out = vec![vec![0.0; features.channels]; n];
    for px in 0..probs.pixel_count() {
        let w = weight.map_or(1.0, |m| m.values[px]);
        let gf = features.pixel(px);
        for (region, &p) in probs.pixel(px).iter().enumerate() {
            let coef = w * p;
            if coef == 0.0 {
                continue;
            }
            for (o, v) in out[region].iter_mut().zip(gf) {
                *o += coef * v;
            }
        }
    }
    Ok(out)
}

/// Total probability mass per region; sums to `h·w`.
pub fn visibility_scores(probs: &SemanticProbMap) -> Vec<f64> {
    let mut scores = vec![0.0; probs.n_regions()];
    for px in 0..probs.pixel_count() {
        for (s, p) in scores.iter_mut().zip(probs.pixel(px)) {
            *s += p;
        }
    }
    scores
}

/// Mask-weighted mean of the reduced features and the mask mass `S_un`.
/// Below `epsilon` mass the feature is the zero vector and the score 0.
pub fn unconfident_feature(
    features: &FeatureMap,
    mask: &UnconfidentMask,
    epsilon: f64,
) -> Result<(Vec<f64>, f64)> {
    check_grid(features, mask.height, mask.width, "feature map vs mask")?;
    let score: f64 = mask.values.iter().sum();
    let mut feature = vec![0.0; features.channels];
    if score < epsilon {
        return Ok((feature, 0.0));
    }
    for (px, &m) in mask.values.iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        for (o, v) in feature.iter_mut().zip(features.pixel(px)) {
            *o += m * v;
        }
    }
    feature.iter_mut().for_each(|v| *v /= score);
    Ok((feature, score))
}

/// Unit-normalized copy; vectors with (near) zero norm map to zero.
pub fn normalize(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < crate::autodiff::NORMALIZE_EPS {
        vec![0.0; v.len()]
    } else {
        v.iter().map(|x| x / norm).collect()
    }
}

pub fn build_descriptor(
    features: &FeatureMap,
    probs: &SemanticProbMap,
    tau: f64,
) -> Result<PersonDescriptor> {
    build_descriptor_with(features, probs, UnconfidentSource::Fixed(tau))
}

pub fn build_descriptor_with(
    features: &FeatureMap,
    probs: &SemanticProbMap,
    source: UnconfidentSource,
) -> Result<PersonDescriptor> {
    if features.kind != FeatureKind::Reduced {
        return Err(Error::InvalidConfig(
            "descriptors are pooled from the reduced feature map".into(),
        ));
    }
    let entropy = entropy_map(probs);
    let confidence = confidence_map(&entropy);
    let foreground = probs.n_regions() - 1;
    let mut region_features = region_features(features, probs, Some(&confidence))?;
    region_features.truncate(foreground);
    let region_features = region_features.iter().map(|f| normalize(f)).collect();
    let mut visibility = visibility_scores(probs);
    visibility.truncate(foreground);

    let (raw_un, unconfident_score) = match source {
        UnconfidentSource::Fixed(tau) => {
            unconfident_feature(features, &unconfident_mask(&entropy, tau)?, DEFAULT_EPSILON)?
        }
        UnconfidentSource::Dynamic => {
            unconfident_feature(features, &dynamic_unconfident_mask(&entropy), DEFAULT_EPSILON)?
        }
        UnconfidentSource::Global => (features.global_average(), features.pixel_count() as f64),
        UnconfidentSource::Omitted => (vec![0.0; features.channels], 0.0),
    };
    Ok(PersonDescriptor {
        region_features,
        visibility,
        unconfident_feature: normalize(&raw_un),
        unconfident_score,
    })
}

/// `Σ_i S_i^p S_i^q D(f_i^p, f_i^q)` over foreground regions.
pub fn aligned_distance(
    p: &PersonDescriptor,
    q: &PersonDescriptor,
    _cfg: &DistanceConfig,
) -> Result<f64> {
    p.check_compatible(q)?;
    Ok(region_terms(p, q).map(|(w, d)| w * d).sum())
}

fn region_terms<'a>(
    p: &'a PersonDescriptor,
    q: &'a PersonDescriptor,
) -> impl Iterator<Item = (f64, f64)> + 'a {
    (0..p.visibility.len()).map(move |i| {
        let w = p.visibility[i] * q.visibility[i];
        // Skipping zero weights keeps unseen regions from influencing the sum at all.
        let d = if w == 0.0 {
            0.0
        } else {
            euclidean(&p.region_features[i], &q.region_features[i])
        };
        (w, d)
    })
}

/// Weighted mean of region distances plus the unconfident pseudo-region.
/// Fails with [`Error::NoComparableRegions`] when the total weight is below
/// `cfg.epsilon`.
pub fn extended_distance(
    p: &PersonDescriptor,
    q: &PersonDescriptor,
    cfg: &DistanceConfig,
) -> Result<f64> {
    p.check_compatible(q)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for (w, d) in region_terms(p, q) {
        num += w * d;
        den += w;
    }
    let w_un = p.unconfident_score * q.unconfident_score;
    if w_un != 0.0 {
        num += w_un * euclidean(&p.unconfident_feature, &q.unconfident_feature);
        den += w_un;
    }
    if den < cfg.epsilon {
        return Err(Error::NoComparableRegions);
    }
    Ok(num / den)
}

pub fn distance(
    p: &PersonDescriptor,
    q: &PersonDescriptor,
    kind: DistanceKind,
    cfg: &DistanceConfig,
) -> Result<f64> {
    match kind {
        DistanceKind::Aligned => aligned_distance(p, q, cfg),
        DistanceKind::Extended => extended_distance(p, q, cfg),
    }
}

/// Square distance matrix; `None` marks pairs with no comparable regions.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub size: usize,
    pub values: Vec<Option<f64>>,
}

impl DistanceMatrix {
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.values[i * self.size + j]
    }

    pub fn missing_pairs(&self) -> usize {
        self.values.iter().filter(|v| v.is_none()).count()
    }
}

pub fn pairwise_extended_distances(
    batch: &[PersonDescriptor],
    cfg: &DistanceConfig,
) -> Result<DistanceMatrix> {
    let n = batch.len();
    let mut values = vec![Some(0.0); n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = match extended_distance(&batch[i], &batch[j], cfg) {
                Ok(d) => Some(d),
                Err(Error::NoComparableRegions) => None,
                Err(e) => return Err(e),
            };
            values[i * n + j] = d;
            values[j * n + i] = d;
        }
    }
    Ok(DistanceMatrix { size: n, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmap::SemanticProbMap;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_pixel_map(region1: [f64; 2]) -> (FeatureMap, SemanticProbMap) {
        let f = FeatureMap::new(1, 2, 2, FeatureKind::Reduced, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = SemanticProbMap::new(
            1,
            2,
            2,
            vec![region1[0], 1.0 - region1[0], region1[1], 1.0 - region1[1]],
        )
        .unwrap();
        (f, p)
    }

    #[test]
    fn region_feature_examples() {
        let (f, p) = two_pixel_map([1.0, 0.0]);
        assert_eq!(region_features(&f, &p, None).unwrap()[0], vec![1.0, 2.0]);
        let (f, p) = two_pixel_map([0.5, 0.5]);
        assert_eq!(region_features(&f, &p, None).unwrap()[0], vec![2.0, 3.0]);
        let zero = ConfidenceMap {
            height: 1,
            width: 2,
            values: vec![0.0, 0.0],
        };
        for v in region_features(&f, &p, Some(&zero)).unwrap() {
            assert_eq!(v, vec![0.0, 0.0]);
        }
    }

    #[test]
    fn region_features_reject_shape_mismatch() {
        let f = FeatureMap::new(2, 1, 2, FeatureKind::Reduced, vec![0.0; 4]).unwrap();
        let (_, p) = two_pixel_map([1.0, 0.0]);
        assert!(matches!(region_features(&f, &p, None), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn visibility_examples() {
        let mut one_hot = vec![0.0; 8 * 8];
        for px in 0..8 {
            one_hot[px * 8] = 1.0;
        }
        let p = SemanticProbMap::new(2, 4, 8, one_hot).unwrap();
        let s = visibility_scores(&p);
        assert_eq!(s[0], 8.0);
        assert!(s[1..].iter().all(|&v| v == 0.0));

        let p = SemanticProbMap::new(2, 4, 8, vec![0.125; 64]).unwrap();
        assert!(visibility_scores(&p).iter().all(|&v| (v - 1.0).abs() < 1e-12));

        let p = SemanticProbMap::new(2, 2, 2, [0.75, 0.25].repeat(4)).unwrap();
        assert_eq!(visibility_scores(&p), vec![3.0, 1.0]);
    }

    fn mask(values: Vec<f64>) -> UnconfidentMask {
        UnconfidentMask {
            height: 1,
            width: values.len(),
            values,
            threshold: 0.5,
        }
    }

    #[test]
    fn unconfident_feature_examples() {
        let f = FeatureMap::new(1, 2, 2, FeatureKind::Reduced, vec![0.0, 2.0, 4.0, 0.0]).unwrap();
        assert_eq!(unconfident_feature(&f, &mask(vec![0.0, 0.0]), 1e-8).unwrap(), (vec![0.0, 0.0], 0.0));
        assert_eq!(unconfident_feature(&f, &mask(vec![0.5, 0.5]), 1e-8).unwrap(), (vec![2.0, 1.0], 1.0));
        let f1 = FeatureMap::new(1, 1, 2, FeatureKind::Reduced, vec![2.0, -2.0]).unwrap();
        assert_eq!(unconfident_feature(&f1, &mask(vec![1.0]), 1e-8).unwrap(), (vec![2.0, -2.0], 1.0));
    }

    fn random_inputs(rng: &mut ChaCha8Rng, h: usize, w: usize, n: usize, c: usize) -> (FeatureMap, SemanticProbMap) {
        let f = FeatureMap::new(h, w, c, FeatureKind::Reduced, (0..h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let mut probs = Vec::new();
        for _ in 0..h * w {
            let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let z: f64 = logits.iter().map(|v: &f64| v.exp()).sum();
            probs.extend(logits.iter().map(|v| v.exp() / z));
        }
        (f, SemanticProbMap::new(h, w, n, probs).unwrap())
    }

    #[test]
    fn descriptor_of_one_hot_map_has_no_unconfident_mass() {
        let mut probs = vec![0.0; 6 * 4];
        for px in 0..6 {
            probs[px * 4 + px % 4] = 1.0;
        }
        let p = SemanticProbMap::new(3, 2, 4, probs).unwrap();
        let f = FeatureMap::new(3, 2, 3, FeatureKind::Reduced, (0..18).map(f64::from).collect()).unwrap();
        let d = build_descriptor(&f, &p, 0.5).unwrap();
        assert_eq!(d.unconfident_score, 0.0);
        assert_eq!(d.unconfident_feature, vec![0.0; 3]);
    }

    #[test]
    fn descriptor_of_uniform_map() {
        let p = SemanticProbMap::new(2, 2, 4, vec![0.25; 16]).unwrap();
        let f = FeatureMap::new(2, 2, 3, FeatureKind::Reduced, (1..=12).map(f64::from).collect()).unwrap();
        let d = build_descriptor(&f, &p, 0.9).unwrap();
        assert!(d.visibility.iter().all(|&s| (s - 1.0).abs() < 1e-12));
        assert!(d.region_features.iter().all(|v| v.iter().all(|&x| x.abs() < 1e-9)));
        assert!((d.unconfident_score - 4.0).abs() < 1e-12);
        assert_eq!(d.n_regions(), 4);
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn descriptor_matches_straight_line_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (h, w, n, c) = (4, 3, 5, 6);
        let (f, p) = random_inputs(&mut rng, h, w, n, c);
        let tau = 0.5;
        let d = build_descriptor(&f, &p, tau).unwrap();

        // Direct transcription of the defining sums, pixel by pixel.
        let ln_n = (n as f64).ln();
        let mut ent = Vec::new();
        for px in 0..h * w {
            let mut e = 0.0;
            for i in 0..n {
                let v = p.pixel(px)[i];
                if v > 0.0 {
                    e -= v * v.ln();
                }
            }
            ent.push(e / ln_n);
        }
        for i in 0..n - 1 {
            let mut ft = vec![0.0; c];
            let mut s = 0.0;
            for px in 0..h * w {
                s += p.pixel(px)[i];
                for k in 0..c {
                    ft[k] += (1.0 - ent[px]) * p.pixel(px)[i] * f.pixel(px)[k];
                }
            }
            let norm = ft.iter().map(|x| x * x).sum::<f64>().sqrt();
            for k in 0..c {
                assert!((d.region_features[i][k] - ft[k] / norm).abs() < 1e-12);
            }
            assert!((d.visibility[i] - s).abs() < 1e-12);
        }
        let mut fun = vec![0.0; c];
        let mut sun = 0.0;
        for px in 0..h * w {
            let m = if ent[px] >= tau { ent[px] } else { 0.0 };
            sun += m;
            for k in 0..c {
                fun[k] += m * f.pixel(px)[k];
            }
        }
        let norm = fun.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((d.unconfident_score - sun).abs() < 1e-12);
        for k in 0..c {
            assert!((d.unconfident_feature[k] - fun[k] / norm).abs() < 1e-12);
        }
    }

    fn descriptor(vis: Vec<f64>, feats: Vec<Vec<f64>>, s_un: f64, f_un: Vec<f64>) -> PersonDescriptor {
        PersonDescriptor {
            region_features: feats,
            visibility: vis,
            unconfident_feature: f_un,
            unconfident_score: s_un,
        }
    }

    #[test]
    fn aligned_distance_examples() {
        let cfg = DistanceConfig::default();
        let p = descriptor(vec![1.0, 0.0], vec![vec![1.0, 0.0], vec![0.0, 1.0]], 0.0, vec![0.0, 0.0]);
        let q = descriptor(vec![0.0, 2.0], vec![vec![0.0, 1.0], vec![1.0, 0.0]], 0.0, vec![0.0, 0.0]);
        assert_eq!(aligned_distance(&p, &q, &cfg).unwrap(), 0.0);
        assert_eq!(aligned_distance(&p, &p, &cfg).unwrap(), 0.0);
        assert!(matches!(extended_distance(&p, &q, &cfg), Err(Error::NoComparableRegions)));

        // Hand evaluation: 2·3·|(1,0)−(0,1)| + 0.5·4·|(0,1)−(0,1)| = 6√2.
        let a = descriptor(vec![2.0, 0.5], vec![vec![1.0, 0.0], vec![0.0, 1.0]], 1.0, vec![1.0, 0.0]);
        let b = descriptor(vec![3.0, 4.0], vec![vec![0.0, 1.0], vec![0.0, 1.0]], 2.0, vec![-1.0, 0.0]);
        let d = aligned_distance(&a, &b, &cfg).unwrap();
        assert!((d - 6.0 * 2f64.sqrt()).abs() < 1e-12);
        // Extended: (6√2 + 0 + 1·2·2) / (6 + 2 + 2).
        let dt = extended_distance(&a, &b, &cfg).unwrap();
        assert!((dt - (6.0 * 2f64.sqrt() + 4.0) / 10.0).abs() < 1e-12);
    }

    #[test]
    fn extended_distance_single_region_weights_cancel() {
        let cfg = DistanceConfig::default();
        let x = vec![1.0, 0.0];
        let theta = 2.0 * (0.35f64).asin();
        let y = vec![theta.cos(), theta.sin()];
        for scale in [1e-3, 1.0, 250.0] {
            let p = descriptor(vec![scale, 0.0], vec![x.clone(), x.clone()], 0.0, vec![0.0; 2]);
            let q = descriptor(vec![2.0, 5.0], vec![y.clone(), x.clone()], 0.0, vec![0.0; 2]);
            assert!((extended_distance(&p, &q, &cfg).unwrap() - 0.7).abs() < 1e-12);
        }
        let p = descriptor(vec![1.0, 3.0], vec![x.clone(), y.clone()], 2.0, y.clone());
        assert_eq!(extended_distance(&p, &p, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn distance_rejects_dimension_mismatch() {
        let cfg = DistanceConfig::default();
        let p = descriptor(vec![1.0], vec![vec![1.0, 0.0]], 0.0, vec![0.0, 0.0]);
        let q = descriptor(vec![1.0], vec![vec![1.0, 0.0, 0.0]], 0.0, vec![0.0, 0.0, 0.0]);
        assert!(matches!(aligned_distance(&p, &q, &cfg), Err(Error::ShapeMismatch { .. })));
    }

    fn random_descriptor(rng: &mut ChaCha8Rng, regions: usize, dim: usize) -> PersonDescriptor {
        let unit = |rng: &mut ChaCha8Rng| normalize(&(0..dim).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>());
        PersonDescriptor {
            region_features: (0..regions).map(|_| unit(rng)).collect(),
            visibility: (0..regions).map(|_| if rng.random_bool(0.3) { 0.0 } else { rng.random_range(0.0..10.0) }).collect(),
            unconfident_feature: unit(rng),
            unconfident_score: rng.random_range(0.0..5.0),
        }
    }

    #[test]
    fn pairwise_matrix_examples() {
        let cfg = DistanceConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let one = random_descriptor(&mut rng, 7, 4);
        let m = pairwise_extended_distances(std::slice::from_ref(&one), &cfg).unwrap();
        assert_eq!(m.values, vec![Some(0.0)]);
        let same = vec![one.clone(); 4];
        let m = pairwise_extended_distances(&same, &cfg).unwrap();
        assert!(m.values.iter().all(|v| *v == Some(0.0)));

        let batch: Vec<_> = (0..8).map(|_| random_descriptor(&mut rng, 7, 4)).collect();
        let m = pairwise_extended_distances(&batch, &cfg).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let expected = if i == j { Some(0.0) } else { extended_distance(&batch[i], &batch[j], &cfg).ok() };
                assert_eq!(m.get(i, j), expected);
            }
        }
    }

    proptest! {
        #[test]
        fn extended_distance_is_symmetric_bounded_and_scale_invariant(seed in any::<u64>(), a in 0.01f64..100.0, b in 0.01f64..100.0) {
            let cfg = DistanceConfig::default();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_descriptor(&mut rng, 7, 5);
            let q = random_descriptor(&mut rng, 7, 5);
            if let Ok(d) = extended_distance(&p, &q, &cfg) {
                prop_assert!((0.0..=2.0 + 1e-12).contains(&d));
                prop_assert_eq!(d, extended_distance(&q, &p, &cfg).unwrap());
                let mut ps = p.clone();
                ps.visibility.iter_mut().for_each(|s| *s *= a);
                ps.unconfident_score *= a;
                let mut qs = q.clone();
                qs.visibility.iter_mut().for_each(|s| *s *= b);
                qs.unconfident_score *= b;
                prop_assert!((extended_distance(&ps, &qs, &cfg).unwrap() - d).abs() < 1e-9);
            }
            prop_assert_eq!(aligned_distance(&p, &q, &cfg).unwrap(), aligned_distance(&q, &p, &cfg).unwrap());
        }
    }
}
