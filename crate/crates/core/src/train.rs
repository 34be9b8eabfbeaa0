//! Loss graph, P×K sampler and the SGD loop.
//!
//! Per image the tape computes the normalized entropy `e`, the confidence
//! `1 − e`, the confidence-weighted region features `f̃_i`, the plain
//! region features `f_i`, the visibility scores `S_i` and the unconfident
//! feature and score. `f̃`/`f_un` feed the extended distance used for
//! batch-hard mining; `f`/`f_un` feed the identity classifiers weighted by
//! `S/(h·w)`. The distance weights carry gradient into the parsing head;
//! the identity-loss weights do so only when
//! [`LossSpec::id_weight_gradient`] is set.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::align::{normalize, DistanceConfig, PersonDescriptor, UnconfidentSource};
use crate::autodiff::{Graph, NodeId};
use crate::config::{Method, TrainConfig};
use crate::descfile::DescriptorRecord;
use crate::losses::{mine_batch_hard, LossWeights};
use crate::model::{forward_graph, InputImage, Model, ModelConfig, ModelOutput, ParamIndex};
use crate::segmap::median;
use crate::synthdata::{augment, downsample_labels, SampleRecord};
use crate::tensor::Matrix;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    pub weights: LossWeights,
    pub source: UnconfidentSource,
    pub method: Method,
    pub distance: DistanceConfig,
    /// Let the identity-loss weights `S/(h·w)` carry gradient into the
    /// parsing head. Off for training: with it on, the cheapest way to lower
    /// the identity loss is to move probability mass onto the background,
    /// and parsing collapses.
    pub id_weight_gradient: bool,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            source: UnconfidentSource::Fixed(0.5),
            method: Method::Esa,
            distance: DistanceConfig::default(),
            id_weight_gradient: false,
        }
    }
}

/// Supervision for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLabels {
    /// Classifier targets in `0..K`.
    pub identities: Vec<usize>,
    /// Feature-resolution region labels in `1..=N`, image-major.
    pub part_labels: Vec<usize>,
}

/// Loss nodes plus value-level batch statistics.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub total: NodeId,
    pub parsing: Option<NodeId>,
    pub id: Option<NodeId>,
    pub triplet: NodeId,
    pub parsing_accuracy: f64,
    /// Batch mean of `S_un / (h·w)`.
    pub unconfident_fraction: f64,
    pub missing_pairs: usize,
}

/// Builds the total loss on `g` for a batch whose images are already on the
/// tape as built by [`Model::images_matrix`]. `params` holds one node per parameter tensor.
pub fn build_loss(
    g: &mut Graph,
    config: &ModelConfig,
    params: &[NodeId],
    images: NodeId,
    labels: &BatchLabels,
    spec: &LossSpec,
) -> Result<LossNodes> {
    let b = labels.identities.len();
    let hw = config.feature_pixels();
    if labels.part_labels.len() != b * hw {
        return Err(Error::ShapeMismatch {
            what: "batch part labels",
            expected: b * hw,
            found: labels.part_labels.len(),
        });
    }
    if let Some(&y) = labels.identities.iter().find(|&&y| y >= config.num_identities) {
        return Err(Error::InvalidLabel {
            label: y,
            limit: config.num_identities,
        });
    }
    let fw = forward_graph(g, config, params, images, b);
    let parsing_accuracy = parsing_accuracy(g.value(fw.probs), &labels.part_labels);
    match spec.method {
        Method::Esa => esa_loss(g, config, params, fw.probs, fw.reduced, labels, spec, parsing_accuracy),
        Method::Baseline => {
            let mut pooled = Vec::with_capacity(b);
            for i in 0..b {
                let f = g.slice_rows(fw.reduced, i * hw, hw);
                pooled.push(g.sum_rows(f));
            }
            let x = g.concat_rows(&pooled);
            let x = g.normalize_rows(x);
            let d = g.pairwise_dist(x);
            let triplet = triplet_term(g, d, None, &labels.identities, spec.weights.margin)?;
            Ok(LossNodes {
                total: triplet,
                parsing: None,
                id: None,
                triplet,
                parsing_accuracy,
                unconfident_fraction: 0.0,
                missing_pairs: 0,
            })
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn esa_loss(
    g: &mut Graph,
    config: &ModelConfig,
    params: &[NodeId],
    probs: NodeId,
    reduced: NodeId,
    labels: &BatchLabels,
    spec: &LossSpec,
    parsing_accuracy: f64,
) -> Result<LossNodes> {
    let b = labels.identities.len();
    let n = config.n_regions;
    let hw = config.feature_pixels();
    let c = config.reduced_channels;
    let inv_emax = 1.0 / (n as f64).ln();

    let mut desc_parts = Vec::with_capacity(b);
    let mut id_parts = Vec::with_capacity(b);
    let mut score_parts = Vec::with_capacity(b);
    let mut un_total = 0.0;
    for i in 0..b {
        let p = g.slice_rows(probs, i * hw, hw);
        let f = g.slice_rows(reduced, i * hw, hw);
        let ent = g.entropy_rows(p);
        let e = g.scale(ent, inv_emax);
        let neg = g.scale(e, -1.0);
        let conf = g.add_scalar(neg, 1.0);
        let weighted = g.mul_col(p, conf);

        let ft = g.matmul_tn(weighted, f);
        let ft = g.slice_rows(ft, 0, n - 1);
        let ft = g.normalize_rows(ft);
        let fp = g.matmul_tn(p, f);
        let fp = g.slice_rows(fp, 0, n - 1);
        let fp = g.normalize_rows(fp);
        let s = g.sum_rows(p);
        let s = g.transpose(s);
        let s_fg = g.slice_rows(s, 0, n - 1);

        let masked = |g: &mut Graph, threshold: f64| {
            let m = g.threshold(e, threshold);
            let s_un = g.sum_all(m);
            let pooled = g.matmul_tn(m, f);
            (g.normalize_rows(pooled), s_un)
        };
        let (f_un, s_un) = match spec.source {
            UnconfidentSource::Fixed(tau) => masked(g, tau),
            UnconfidentSource::Dynamic => {
                let med = median(g.value(e).data()).unwrap_or(0.0);
                masked(g, med)
            }
            UnconfidentSource::Global => {
                let pooled = g.sum_rows(f);
                (g.normalize_rows(pooled), g.constant(Matrix::scalar(hw as f64)))
            }
            UnconfidentSource::Omitted => (g.constant(Matrix::zeros(1, c)), g.constant(Matrix::scalar(0.0))),
        };
        un_total += g.value(s_un).item() / hw as f64;
        desc_parts.push(g.concat_rows(&[ft, f_un]));
        id_parts.push(g.concat_rows(&[fp, f_un]));
        score_parts.push(g.concat_rows(&[s_fg, s_un]));
    }
    let desc = g.concat_rows(&desc_parts);
    let id_feats = g.concat_rows(&id_parts);
    let scores = g.concat_rows(&score_parts);

    let idx = ParamIndex::new(config);
    let mut num = None;
    let mut den = None;
    let mut id_sum = None;
    for r in 0..n {
        let rows: Vec<usize> = (0..b).map(|i| i * n + r).collect();
        let x = g.gather_rows(desc, rows.clone());
        let d = g.pairwise_dist(x);
        let s = g.gather_rows(scores, rows.clone());
        let st = g.transpose(s);
        let w = g.matmul_tn(st, st);
        let wd = g.mul(w, d);
        num = Some(num.map_or(wd, |acc| g.add(acc, wd)));
        den = Some(den.map_or(w, |acc| g.add(acc, w)));

        let xi = g.gather_rows(id_feats, rows);
        let (wi, bi) = idx.classifier(r);
        let logits = g.matmul(xi, params[wi]);
        let logits = g.add_row(logits, params[bi]);
        let ce = g.cross_entropy(logits, &labels.identities);
        let s_id = if spec.id_weight_gradient {
            s
        } else {
            let detached = g.value(s).clone();
            g.constant(detached)
        };
        let weight = g.scale(s_id, 1.0 / hw as f64);
        let term = g.mul(weight, ce);
        let term = g.sum_all(term);
        id_sum = Some(id_sum.map_or(term, |acc| g.add(acc, term)));
    }
    let (num, den, id_sum) = (num.expect("N ≥ 2"), den.expect("N ≥ 2"), id_sum.expect("N ≥ 2"));
    let missing: Vec<bool> = g.value(den).data().iter().map(|&v| v < spec.distance.epsilon).collect();
    let den = g.clamp_min(den, spec.distance.epsilon);
    let dist = g.div(num, den);
    let missing_pairs = (0..b * b).filter(|&k| k / b != k % b && missing[k]).count();
    let triplet = triplet_term(g, dist, Some(&missing), &labels.identities, spec.weights.margin)?;
    let id = g.scale(id_sum, 1.0 / b as f64);

    let part0: Vec<usize> = labels.part_labels.iter().map(|&l| l - 1).collect();
    if let Some(&bad) = labels.part_labels.iter().find(|&&l| l == 0 || l > n) {
        return Err(Error::InvalidLabel { label: bad, limit: n });
    }
    let nll = g.nll_probs(probs, &part0);
    let parsing = g.mean_all(nll);
    let weighted_parsing = g.scale(parsing, spec.weights.lambda);
    let rest = g.add(id, triplet);
    let total = g.add(weighted_parsing, rest);
    Ok(LossNodes {
        total,
        parsing: Some(parsing),
        id: Some(id),
        triplet,
        parsing_accuracy,
        unconfident_fraction: un_total / b as f64,
        missing_pairs,
    })
}

/// Batch-hard triplet on a `b × b` distance node. Missing pairs take the
/// largest present off-diagonal distance as a constant.
fn triplet_term(
    g: &mut Graph,
    dist: NodeId,
    missing: Option<&[bool]>,
    identities: &[usize],
    margin: f64,
) -> Result<NodeId> {
    let b = identities.len();
    let values = g.value(dist).data().to_vec();
    let is_missing = |k: usize| missing.is_some_and(|m| m[k]);
    let filled_node = if (0..b * b).any(is_missing) {
        let max = (0..b * b)
            .filter(|&k| k / b != k % b && !is_missing(k))
            .map(|k| values[k])
            .fold(0.0, f64::max);
        let keep = Matrix::from_vec(b, b, (0..b * b).map(|k| if is_missing(k) { 0.0 } else { 1.0 }).collect());
        let fill = Matrix::from_vec(b, b, (0..b * b).map(|k| if is_missing(k) { max } else { 0.0 }).collect());
        let keep = g.constant(keep);
        let fill = g.constant(fill);
        let kept = g.mul(dist, keep);
        g.add(kept, fill)
    } else {
        dist
    };
    let dense = g.value(filled_node).data().to_vec();
    let triplets = mine_batch_hard(&dense, identities)?;
    let pos = g.gather_entries(filled_node, triplets.iter().map(|t| t.anchor * b + t.positive).collect());
    let neg = g.gather_entries(filled_node, triplets.iter().map(|t| t.anchor * b + t.negative).collect());
    let diff = g.sub(pos, neg);
    let shifted = g.add_scalar(diff, margin);
    let hinge = g.relu(shifted);
    Ok(g.mean_all(hinge))
}

fn parsing_accuracy(probs: &Matrix, labels: &[usize]) -> f64 {
    let mut correct = 0;
    for (r, &label) in labels.iter().enumerate() {
        let row = probs.row(r);
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        correct += usize::from(best + 1 == label);
    }
    correct as f64 / labels.len().max(1) as f64
}

/// Seeded P×K batch sampler over sample indices.
#[derive(Debug, Clone)]
pub struct PkSampler {
    by_identity: Vec<(usize, Vec<usize>)>,
    p: usize,
    k: usize,
}

impl PkSampler {
    pub fn new(identities: &[usize], p: usize, k: usize) -> Result<Self> {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &id) in identities.iter().enumerate() {
            map.entry(id).or_default().push(i);
        }
        if map.len() < p {
            return Err(Error::InvalidBatch(format!(
                "{} identities cannot fill P = {p}",
                map.len()
            )));
        }
        Ok(Self {
            by_identity: map.into_iter().collect(),
            p,
            k,
        })
    }

    /// `P` distinct identities, `K` images each (without replacement when
    /// an identity has at least `K`).
    pub fn next_batch(&self, rng: &mut impl Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.p * self.k);
        for ii in sample_indices(rng, self.by_identity.len(), self.p).into_iter() {
            let pool = &self.by_identity[ii].1;
            if pool.len() >= self.k {
                out.extend(sample_indices(rng, pool.len(), self.k).into_iter().map(|j| pool[j]));
            } else {
                out.extend((0..self.k).map(|_| pool[rng.random_range(0..pool.len())]));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub parsing: f64,
    pub id: f64,
    pub triplet: f64,
    pub total: f64,
    pub parsing_accuracy: f64,
    pub unconfident_fraction: f64,
    pub seconds: f64,
}

/// One record per epoch, appended in order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

const LOG_COLUMNS: &str = "epoch\tlr\tparsing\tid\ttriplet\ttotal\tparsing_accuracy\tunconfident_fraction\tseconds";

impl TrainLog {
    pub fn push(&mut self, record: EpochRecord) {
        self.records.push(record);
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// The log with wall-clock zeroed; equal for same-seed reruns.
    pub fn without_timing(&self) -> TrainLog {
        TrainLog {
            records: self.records.iter().map(|r| EpochRecord { seconds: 0.0, ..*r }).collect(),
        }
    }

    pub fn to_tsv(&self) -> String {
        let mut s = format!("{LOG_COLUMNS}\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{}\t{:?}\t{:?}\t{:?}\t{:?}\t{:?}\t{:?}\t{:?}\t{:.3}",
                r.epoch, r.lr, r.parsing, r.id, r.triplet, r.total, r.parsing_accuracy, r.unconfident_fraction, r.seconds
            );
        }
        s
    }
}

/// Training samples with classifier targets.
pub struct TrainSet<'a> {
    pub samples: Vec<&'a SampleRecord>,
    pub targets: Vec<usize>,
}

impl<'a> TrainSet<'a> {
    /// Identities become targets in order of first appearance.
    pub fn new(samples: impl IntoIterator<Item = &'a SampleRecord>) -> Self {
        let samples: Vec<&SampleRecord> = samples.into_iter().collect();
        let mut map: BTreeMap<i64, usize> = BTreeMap::new();
        let mut targets = Vec::with_capacity(samples.len());
        for s in &samples {
            let next = map.len();
            targets.push(*map.entry(s.identity).or_insert(next));
        }
        Self { samples, targets }
    }

    pub fn num_identities(&self) -> usize {
        self.targets.iter().max().map_or(0, |m| m + 1)
    }
}

/// Everything a run needs besides data.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossSpec,
    /// Seeds sampling and augmentation.
    pub seed: u64,
}

/// Runs SGD and calls `on_epoch` after every epoch (used for
/// checkpointing). Deterministic given the options.
pub fn train(
    options: &TrainOptions,
    data: &TrainSet<'_>,
    mut on_epoch: impl FnMut(&Model, &EpochRecord) -> Result<()>,
) -> Result<(Model, TrainLog)> {
    let cfg = &options.model;
    let tc = &options.train;
    if data.num_identities() > cfg.num_identities {
        return Err(Error::InvalidConfig(format!(
            "{} training identities exceed the {} classifier outputs",
            data.num_identities(),
            cfg.num_identities
        )));
    }
    let mut model = Model::new(cfg.clone())?;
    let sampler = PkSampler::new(&data.targets, tc.p, tc.k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    rng.set_stream(7);
    let steps = if tc.steps_per_epoch > 0 {
        tc.steps_per_epoch
    } else {
        (data.samples.len() / tc.batch_size()).max(1)
    };
    let mut log = TrainLog::default();
    for epoch in 0..tc.epochs {
        let started = Instant::now();
        let lr = tc.lr_at(epoch);
        let mut sums = [0.0f64; 6];
        for step in 0..steps {
            let batch = sampler.next_batch(&mut rng);
            let samples: Vec<SampleRecord> = batch
                .iter()
                .map(|&i| {
                    let seed: u64 = rng.random();
                    if tc.augment {
                        augment(data.samples[i], seed)
                    } else {
                        data.samples[i].clone()
                    }
                })
                .collect();
            let stats = sgd_step(&mut model, &samples, &batch.iter().map(|&i| data.targets[i]).collect::<Vec<_>>(), &options.loss, lr)
                .map_err(|e| match e {
                    Error::NonFinite(_) => Error::Diverged { epoch: epoch + 1, step: step + 1 },
                    other => other,
                })?;
            for (s, v) in sums.iter_mut().zip(stats) {
                *s += v;
            }
        }
        let m = |i: usize| sums[i] / steps as f64;
        let record = EpochRecord {
            epoch: epoch + 1,
            lr,
            parsing: m(0),
            id: m(1),
            triplet: m(2),
            total: m(3),
            parsing_accuracy: m(4),
            unconfident_fraction: m(5),
            seconds: started.elapsed().as_secs_f64(),
        };
        log.push(record);
        on_epoch(&model, &record)?;
    }
    Ok((model, log))
}

/// Feature-resolution labels for a batch, image-major.
pub fn batch_labels(config: &ModelConfig, samples: &[SampleRecord], targets: &[usize]) -> Result<BatchLabels> {
    let mut part_labels = Vec::with_capacity(samples.len() * config.feature_pixels());
    for s in samples {
        part_labels.extend(downsample_labels(&s.part_labels, s.height(), s.width(), config.downsample)?);
    }
    Ok(BatchLabels {
        identities: targets.to_vec(),
        part_labels,
    })
}

/// One update; returns (parsing, id, triplet, total, accuracy, S_un share).
fn sgd_step(model: &mut Model, samples: &[SampleRecord], targets: &[usize], spec: &LossSpec, lr: f64) -> Result<[f64; 6]> {
    let labels = batch_labels(&model.config, samples, targets)?;
    let mut g = Graph::new();
    let params: Vec<NodeId> = model.params.values().iter().map(|m| g.param(m.clone())).collect();
    let images: Vec<&InputImage> = samples.iter().map(|s| &s.image).collect();
    let x = g.constant(model.images_matrix(&images)?);
    let nodes = build_loss(&mut g, &model.config, &params, x, &labels, spec)?;
    let total = g.value(nodes.total).item();
    if !total.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    let value = |n: Option<NodeId>| n.map_or(0.0, |n| g.value(n).item());
    let out = [
        value(nodes.parsing),
        value(nodes.id),
        g.value(nodes.triplet).item(),
        total,
        nodes.parsing_accuracy,
        nodes.unconfident_fraction,
    ];
    let mut grads = g.backward(nodes.total);
    for (p, id) in model.params.values_mut().iter_mut().zip(&params) {
        if let Some(grad) = grads.take(*id) {
            for (v, d) in p.data_mut().iter_mut().zip(grad.data()) {
                *v -= lr * d;
            }
        }
    }
    model.params.round_to_f32();
    if !model.params.all_finite() {
        return Err(Error::NonFinite("parameters"));
    }
    Ok(out)
}

/// An image to describe, with its id and identity label.
#[derive(Debug, Clone, Copy)]
pub struct Described<'a> {
    pub image_id: &'a str,
    pub identity: i64,
    pub image: &'a InputImage,
}

/// Descriptor for one forward output.
pub fn describe(output: &ModelOutput, method: Method, source: UnconfidentSource) -> Result<PersonDescriptor> {
    match method {
        Method::Esa => crate::align::build_descriptor_with(&output.reduced, &output.probs, source),
        Method::Baseline => {
            let foreground = output.probs.n_regions() - 1;
            Ok(PersonDescriptor {
                region_features: vec![vec![0.0; output.reduced.channels()]; foreground],
                visibility: vec![0.0; foreground],
                unconfident_feature: normalize(&output.reduced.global_average()),
                unconfident_score: 1.0,
            })
        }
    }
}

pub fn extract_descriptors(
    model: &Model,
    items: &[Described<'_>],
    method: Method,
    source: UnconfidentSource,
) -> Result<Vec<DescriptorRecord>> {
    let images: Vec<&InputImage> = items.iter().map(|d| d.image).collect();
    let outputs = model.forward_refs(&images)?;
    items
        .iter()
        .zip(&outputs)
        .map(|(item, out)| {
            Ok(DescriptorRecord {
                image_id: item.image_id.to_string(),
                identity: item.identity,
                descriptor: describe(out, method, source)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::{build_descriptor_with, pairwise_extended_distances};
    use crate::losses::{batch_hard_triplet, extended_id_loss, parsing_loss, IdSample};
    use crate::synthdata::{generate_samples, SynthConfig};

    fn toy_config() -> ModelConfig {
        ModelConfig {
            input_height: 16,
            input_width: 8,
            downsample: 4,
            backbone_channels: 8,
            reduced_channels: 4,
            n_regions: 8,
            num_identities: 3,
            seed: 5,
        }
    }

    fn toy_batch() -> (Vec<SampleRecord>, Vec<usize>) {
        let data = SynthConfig {
            seed: 1,
            n_identities: 6,
            images_per_identity: 4,
            height: 16,
            width: 8,
        };
        let samples = generate_samples(&data).unwrap();
        let picked: Vec<SampleRecord> = samples
            .into_iter()
            .filter(|(e, _)| e.identity < 2)
            .map(|(_, s)| s)
            .collect();
        let targets = picked.iter().map(|s| s.identity as usize).collect();
        (picked, targets)
    }

    /// The tape's loss terms equal the plain-value implementations.
    #[test]
    fn graph_loss_matches_value_functions() {
        let cfg = toy_config();
        let mut model = Model::new(cfg.clone()).unwrap();
        // Spread the parsing logits so the entropy mask is nontrivial.
        for v in model.params.values_mut()[2 * 3].data_mut() {
            *v *= 300.0;
        }
        let (samples, targets) = toy_batch();
        for source in [UnconfidentSource::Fixed(0.5), UnconfidentSource::Global, UnconfidentSource::Omitted, UnconfidentSource::Dynamic] {
            let spec = LossSpec {
                source,
                ..LossSpec::default()
            };
            let labels = batch_labels(&cfg, &samples, &targets).unwrap();
            let mut g = Graph::new();
            let params: Vec<NodeId> = model.params.values().iter().map(|m| g.param(m.clone())).collect();
            let images: Vec<&InputImage> = samples.iter().map(|s| &s.image).collect();
            let x = g.constant(model.images_matrix(&images).unwrap());
            let nodes = build_loss(&mut g, &cfg, &params, x, &labels, &spec).unwrap();

            let outputs = model.forward_refs(&images).unwrap();
            let descriptors: Vec<_> = outputs
                .iter()
                .map(|o| build_descriptor_with(&o.reduced, &o.probs, source).unwrap())
                .collect();
            let dist = pairwise_extended_distances(&descriptors, &DistanceConfig::default()).unwrap();
            let triplet = batch_hard_triplet(&dist, &targets, 0.3).unwrap();
            assert!((g.value(nodes.triplet).item() - triplet).abs() < 1e-9, "{source:?}");

            let hw = cfg.feature_pixels() as f64;
            let id_samples: Vec<IdSample> = outputs
                .iter()
                .zip(&descriptors)
                .map(|(o, d)| {
                    let plain = crate::align::region_features(&o.reduced, &o.probs, None).unwrap();
                    IdSample {
                        region_features: plain[..7].iter().map(|f| normalize(f)).collect(),
                        region_weights: d.visibility.iter().map(|s| s / hw).collect(),
                        unconfident_feature: d.unconfident_feature.clone(),
                        unconfident_weight: d.unconfident_score / hw,
                    }
                })
                .collect();
            let id = extended_id_loss(&id_samples, &model.classifiers(), &targets).unwrap();
            assert!((g.value(nodes.id.unwrap()).item() - id).abs() < 1e-9, "{source:?}");

            let mut parsing = 0.0;
            for (o, chunk) in outputs.iter().zip(labels.part_labels.chunks(cfg.feature_pixels())) {
                parsing += parsing_loss(&o.probs, chunk).unwrap();
            }
            parsing /= outputs.len() as f64;
            assert!((g.value(nodes.parsing.unwrap()).item() - parsing).abs() < 1e-9);
        }
    }

    #[test]
    fn sampler_draws_p_identities_k_times() {
        let ids: Vec<usize> = (0..40).map(|i| i / 5).collect();
        let sampler = PkSampler::new(&ids, 4, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let batch = sampler.next_batch(&mut rng);
            assert_eq!(batch.len(), 12);
            let mut counts: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for &i in &batch {
                counts.entry(ids[i]).or_default().push(i);
            }
            assert_eq!(counts.len(), 4);
            for v in counts.values_mut() {
                v.dedup();
                assert_eq!(v.len(), 3);
            }
        }
        assert!(PkSampler::new(&ids, 9, 2).is_err());
    }

    #[test]
    fn short_run_is_deterministic_and_finite() {
        let (samples, _) = toy_batch();
        let data = TrainSet::new(samples.iter());
        let options = TrainOptions {
            model: ModelConfig {
                num_identities: 2,
                ..toy_config()
            },
            train: TrainConfig {
                epochs: 2,
                p: 2,
                k: 2,
                steps_per_epoch: 3,
                ..TrainConfig::default()
            },
            loss: LossSpec::default(),
            seed: 4,
        };
        let mut calls = 0;
        let (m1, l1) = train(&options, &data, |_, _| {
            calls += 1;
            Ok(())
        })
        .unwrap();
        let (m2, l2) = train(&options, &data, |_, _| Ok(())).unwrap();
        assert_eq!(calls, 2);
        assert_eq!(l1.without_timing(), l2.without_timing());
        assert_eq!(m1, m2);
        assert!(l1.records.iter().all(|r| r.total.is_finite()));
        assert_eq!(l1.to_tsv().lines().count(), 3);
    }
}
