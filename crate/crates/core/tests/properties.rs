//! Invariants that cut across modules, checked on random inputs through the
//! public API.

use esa_reid::align::{build_descriptor_with, FeatureKind, FeatureMap, UnconfidentSource};
use esa_reid::descfile::{DescriptorRecord, DescriptorSet};
use esa_reid::eval::{average_precision, cmc, mean_ap, pr_auc, pr_auc_trapezoid, Entry, ScoreMatrix};
use esa_reid::losses::{
    batch_hard_triplet, extended_id_loss, id_loss, parsing_loss, Classifier, IdSample, RegionClassifiers,
};
use esa_reid::segmap::{confidence_map, dynamic_unconfident_mask, entropy_map, unconfident_mask};
use esa_reid::synthdata::{identities, render_indexed, SynthConfig, ViewTag, N_REGIONS};
use esa_reid::{extended_distance, pairwise_extended_distances, DistanceConfig, Matrix, PersonDescriptor, SemanticProbMap};
use proptest::prelude::*;

const EPS: f64 = 1e-12;

/// Softmax of random logits, so every pixel is a valid distribution.
fn prob_map(h: usize, w: usize, n: usize) -> impl Strategy<Value = SemanticProbMap> {
    prop::collection::vec(-6.0f64..6.0, h * w * n).prop_map(move |logits| {
        let probs = logits
            .chunks(n)
            .flat_map(|row| {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(move |v| v / s)
            })
            .collect();
        SemanticProbMap::new(h, w, n, probs).unwrap()
    })
}

fn unit(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, dim).prop_map(|v| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-6 {
            let mut e = vec![0.0; v.len()];
            e[0] = 1.0;
            e
        } else {
            v.into_iter().map(|x| x / n).collect()
        }
    })
}

fn descriptor(regions: usize, dim: usize) -> impl Strategy<Value = PersonDescriptor> {
    (
        prop::collection::vec(unit(dim), regions),
        prop::collection::vec(prop_oneof![Just(0.0), 0.0f64..20.0], regions),
        unit(dim),
        prop_oneof![Just(0.0), 0.0f64..20.0],
    )
        .prop_map(|(region_features, visibility, unconfident_feature, unconfident_score)| PersonDescriptor {
            region_features,
            visibility,
            unconfident_feature,
            unconfident_score,
        })
}

fn comparable_pair() -> impl Strategy<Value = (PersonDescriptor, PersonDescriptor)> {
    (descriptor(5, 4), descriptor(5, 4)).prop_filter("needs comparable weight", |(p, q)| {
        extended_distance(p, q, &DistanceConfig::default()).is_ok()
    })
}

fn scaled(d: &PersonDescriptor, a: f64) -> PersonDescriptor {
    PersonDescriptor {
        visibility: d.visibility.iter().map(|v| v * a).collect(),
        unconfident_score: d.unconfident_score * a,
        ..d.clone()
    }
}

/// Distinct distances with a guaranteed match for every probe.
fn untied_scores() -> impl Strategy<Value = (Vec<f64>, Vec<i64>, Vec<i64>)> {
    (2usize..6, 3usize..9).prop_flat_map(|(n_probe, n_gallery)| {
        (
            Just(n_probe),
            prop::collection::vec(0i64..3, n_gallery),
            prop::collection::vec(0i64..3, n_probe),
            Just((0..n_probe * n_gallery).map(|k| k as f64 + 0.5).collect::<Vec<f64>>()).prop_shuffle(),
        )
            .prop_map(|(_, mut gallery, probes, d)| {
                // Guarantee one match per probe identity.
                for (k, &id) in probes.iter().enumerate() {
                    if !gallery.contains(&id) {
                        let slot = k % gallery.len();
                        gallery[slot] = id;
                    }
                }
                let probes = probes.into_iter().filter(|id| gallery.contains(id)).collect::<Vec<_>>();
                let n = probes.len();
                (d[..n * gallery.len()].to_vec(), probes, gallery)
            })
    })
}

fn classifiers(heads: usize, dim: usize, k: usize) -> impl Strategy<Value = RegionClassifiers> {
    prop::collection::vec(
        (prop::collection::vec(-2.0f64..2.0, dim * k), prop::collection::vec(-1.0f64..1.0, k)),
        heads,
    )
    .prop_map(move |hs| RegionClassifiers {
        heads: hs
            .into_iter()
            .map(|(w, b)| Classifier {
                weight: Matrix::from_vec(dim, k, w),
                bias: Matrix::from_vec(1, k, b),
            })
            .collect(),
    })
}

fn id_samples(n: usize, regions: usize, dim: usize) -> impl Strategy<Value = Vec<IdSample>> {
    prop::collection::vec(
        (
            prop::collection::vec(unit(dim), regions),
            prop::collection::vec(0.0f64..1.0, regions),
            unit(dim),
            0.0f64..1.0,
        )
            .prop_map(|(region_features, region_weights, unconfident_feature, unconfident_weight)| IdSample {
                region_features,
                region_weights,
                unconfident_feature,
                unconfident_weight,
            }),
        n,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn entropy_maps_stay_in_range(probs in prob_map(4, 3, 6), tau in 0.01f64..0.99) {
        let e = entropy_map(&probs);
        prop_assert!((e.e_max - 6f64.ln()).abs() < EPS);
        prop_assert!(e.normalized.iter().all(|v| (-EPS..=1.0 + EPS).contains(v)));
        let conf = confidence_map(&e);
        for (c, v) in conf.values.iter().zip(&e.normalized) {
            prop_assert!((c + v - 1.0).abs() < EPS);
        }
        let m = unconfident_mask(&e, tau).unwrap();
        for (m, v) in m.values.iter().zip(&e.normalized) {
            prop_assert!(*m == 0.0 || (*m >= tau && m == v));
            prop_assert_eq!(*m == 0.0, *v < tau || *v == 0.0);
        }
    }

    #[test]
    fn higher_threshold_keeps_fewer_pixels(probs in prob_map(3, 3, 4), a in 0.01f64..0.99, b in 0.01f64..0.99) {
        let e = entropy_map(&probs);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (m_lo, m_hi) = (unconfident_mask(&e, lo).unwrap(), unconfident_mask(&e, hi).unwrap());
        for (l, h) in m_lo.values.iter().zip(&m_hi.values) {
            prop_assert!(*h == 0.0 || h == l);
        }
        prop_assert!(m_hi.total() <= m_lo.total());
    }

    #[test]
    fn dynamic_mask_marks_at_least_half(probs in prob_map(5, 3, 5)) {
        let e = entropy_map(&probs);
        let m = dynamic_unconfident_mask(&e);
        let marked = e.normalized.iter().filter(|&&v| v >= m.threshold).count();
        prop_assert!(2 * marked >= e.normalized.len());
    }

    #[test]
    fn extended_distance_is_bounded_and_symmetric((p, q) in comparable_pair()) {
        let cfg = DistanceConfig::default();
        let d = extended_distance(&p, &q, &cfg).unwrap();
        prop_assert!((-EPS..=2.0 + 1e-9).contains(&d));
        prop_assert!((d - extended_distance(&q, &p, &cfg).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn joint_weight_scaling_leaves_extended_distance_unchanged((p, q) in comparable_pair(), a in 1.0f64..10.0) {
        let cfg = DistanceConfig::default();
        let d = extended_distance(&p, &q, &cfg).unwrap();
        let ds = extended_distance(&scaled(&p, a), &scaled(&q, a), &cfg).unwrap();
        prop_assert!((d - ds).abs() < 1e-9);
    }

    #[test]
    fn descriptors_from_maps_have_unit_features(probs in prob_map(3, 2, 4), feats in prop::collection::vec(-3.0f64..3.0, 3 * 2 * 5)) {
        let fm = FeatureMap::new(3, 2, 5, FeatureKind::Reduced, feats).unwrap();
        for source in [UnconfidentSource::Fixed(0.3), UnconfidentSource::Dynamic, UnconfidentSource::Global, UnconfidentSource::Omitted] {
            let d = build_descriptor_with(&fm, &probs, source).unwrap();
            prop_assert_eq!(d.visibility.len(), 3);
            prop_assert!(d.visibility.iter().all(|&v| v >= 0.0));
            for f in d.region_features.iter().chain(std::iter::once(&d.unconfident_feature)) {
                let n = f.iter().map(|x| x * x).sum::<f64>().sqrt();
                prop_assert!(n == 0.0 || (n - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn triplet_loss_ignores_batch_order(batch in prop::collection::vec(descriptor(3, 3), 6), margin in 0.0f64..1.0, shift in 1usize..6) {
        let ids = [0, 0, 1, 1, 2, 2];
        let cfg = DistanceConfig::default();
        let dist = pairwise_extended_distances(&batch, &cfg).unwrap();
        let loss = batch_hard_triplet(&dist, &ids, margin).unwrap();
        prop_assert!(loss >= 0.0);
        let order: Vec<usize> = (0..6).map(|i| (i + shift) % 6).collect();
        let batch2: Vec<PersonDescriptor> = order.iter().map(|&i| batch[i].clone()).collect();
        let ids2: Vec<usize> = order.iter().map(|&i| ids[i]).collect();
        let dist2 = pairwise_extended_distances(&batch2, &cfg).unwrap();
        let loss2 = batch_hard_triplet(&dist2, &ids2, margin).unwrap();
        prop_assert!((loss - loss2).abs() < 1e-12);
    }

    #[test]
    fn id_losses_are_nonnegative_and_ordered(
        samples in id_samples(3, 4, 3),
        heads in classifiers(5, 3, 4),
        labels in prop::collection::vec(0usize..4, 3),
    ) {
        let plain = id_loss(&samples, &heads, &labels).unwrap();
        let extended = extended_id_loss(&samples, &heads, &labels).unwrap();
        prop_assert!(plain >= 0.0);
        prop_assert!(extended >= plain - EPS);
    }

    #[test]
    fn id_loss_grows_with_region_weight(
        samples in id_samples(2, 4, 3),
        heads in classifiers(5, 3, 4),
        labels in prop::collection::vec(0usize..4, 2),
        region in 0usize..4,
        extra in 0.0f64..2.0,
    ) {
        let before = id_loss(&samples, &heads, &labels).unwrap();
        let mut heavier = samples.clone();
        for s in &mut heavier {
            s.region_weights[region] += extra;
        }
        prop_assert!(id_loss(&heavier, &heads, &labels).unwrap() >= before - EPS);
    }

    #[test]
    fn parsing_loss_is_nonnegative(probs in prob_map(3, 3, 4), labels in prop::collection::vec(1usize..=4, 9)) {
        prop_assert!(parsing_loss(&probs, &labels).unwrap() >= 0.0);
    }

    #[test]
    fn retrieval_metrics_stay_in_range((d, probes, gallery) in untied_scores()) {
        prop_assume!(!probes.is_empty());
        let s = ScoreMatrix::from_distances(&d, probes, gallery.clone()).unwrap();
        let curve = cmc(&s, gallery.len()).unwrap();
        prop_assert!(curve.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(curve.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(*curve.last().unwrap(), 1.0);
        for v in [mean_ap(&s).unwrap(), pr_auc(&s).unwrap(), pr_auc_trapezoid(&s).unwrap()] {
            prop_assert!((0.0..=1.0 + EPS).contains(&v), "{}", v);
        }
    }

    #[test]
    fn gallery_order_does_not_matter_without_ties((d, probes, gallery) in untied_scores(), shift in 1usize..8) {
        prop_assume!(!probes.is_empty());
        let (np, ng) = (probes.len(), gallery.len());
        let perm: Vec<usize> = (0..ng).map(|g| (g + shift) % ng).collect();
        let d2: Vec<f64> = (0..np).flat_map(|p| perm.iter().map(move |&g| (p, g))).map(|(p, g)| d[p * ng + g]).collect();
        let g2: Vec<i64> = perm.iter().map(|&g| gallery[g]).collect();
        let a = ScoreMatrix::from_distances(&d, probes.clone(), gallery).unwrap();
        let b = ScoreMatrix::from_distances(&d2, probes, g2).unwrap();
        prop_assert_eq!(cmc(&a, ng).unwrap(), cmc(&b, ng).unwrap());
        prop_assert!((mean_ap(&a).unwrap() - mean_ap(&b).unwrap()).abs() < 1e-12);
        prop_assert!((pr_auc(&a).unwrap() - pr_auc(&b).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn excluded_entries_act_as_if_absent((d, probes, gallery) in untied_scores()) {
        prop_assume!(!probes.is_empty());
        let ng = gallery.len();
        let mut entries: Vec<Entry> = d.iter().map(|&v| Entry::Distance(v)).collect();
        let extra_id = 1000;
        let mut g2 = gallery.clone();
        g2.push(extra_id);
        let mut with_excluded = Vec::new();
        for row in entries.chunks_mut(ng) {
            with_excluded.extend_from_slice(row);
            with_excluded.push(Entry::Excluded);
        }
        let a = ScoreMatrix::from_distances(&d, probes.clone(), gallery).unwrap();
        let b = ScoreMatrix::new(with_excluded, probes, g2).unwrap();
        prop_assert_eq!(mean_ap(&a).unwrap(), mean_ap(&b).unwrap());
        prop_assert_eq!(pr_auc(&a).unwrap(), pr_auc(&b).unwrap());
    }

    #[test]
    fn average_precision_is_one_only_for_perfect_lists(hits in prop::collection::vec(any::<bool>(), 1..12)) {
        let ap = average_precision(&hits);
        prop_assert!((0.0..=1.0).contains(&ap));
        let relevant = hits.iter().filter(|&&h| h).count();
        let perfect = relevant > 0 && hits[..relevant].iter().all(|&h| h);
        prop_assert_eq!((ap - 1.0).abs() < EPS, perfect);
    }

    #[test]
    fn descriptor_files_round_trip(records in prop::collection::vec((descriptor(3, 4), -5i64..5), 0..6)) {
        let records: Vec<DescriptorRecord> = records
            .into_iter()
            .enumerate()
            .map(|(i, (descriptor, identity))| DescriptorRecord { image_id: format!("probe/{identity}_{i}"), identity, descriptor })
            .collect();
        let set = DescriptorSet::new(4, 4, records).unwrap().quantized();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.desc");
        set.write(&path).unwrap();
        prop_assert_eq!(DescriptorSet::read(&path).unwrap(), set);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn rendered_samples_match_their_view(seed in any::<u64>(), k in 0usize..10) {
        let cfg = SynthConfig { seed, n_identities: 4, images_per_identity: 10, ..SynthConfig::default() };
        let spec = &identities(&cfg)[(seed % 4) as usize];
        let s = render_indexed(&cfg, spec, k);
        prop_assert_eq!(s.view_tag, cfg.view_of(k));
        prop_assert_eq!(s.part_labels.len(), cfg.height * cfg.width);
        prop_assert_eq!(s.image.pixels.len(), 3 * cfg.height * cfg.width);
        prop_assert!(s.part_labels.iter().all(|&l| (1..=N_REGIONS).contains(&l)));
        prop_assert!(s.image.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        let hist = s.label_histogram();
        prop_assert_eq!(hist.iter().sum::<usize>(), s.part_labels.len());
        let visible_parts = hist[1..N_REGIONS].iter().filter(|&&c| c > 0).count();
        match s.view_tag {
            ViewTag::Full => prop_assert_eq!(visible_parts, N_REGIONS - 1),
            _ => prop_assert!(visible_parts < N_REGIONS - 1),
        }
        prop_assert_eq!(render_indexed(&cfg, spec, k), s);
    }
}
