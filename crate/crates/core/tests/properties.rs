use cfhfc::aggregation::{cluster_weights, global_aggregate, ClusterModel};
use cfhfc::calibration::{
    calibrate, decide, update_confidence, CalibrationConfig, CalibrationState, Q_MAX, Q_MIN,
};
use cfhfc::data::{
    dirichlet_partition, generate_synthetic, min_max_scale, DataSource, DatasetSpec, PartitionSpec,
};
use cfhfc::hardware::{
    fcm_fit, fcm_fit_from, weighted_distance, HardwareProfile, NormProfile, ResourceWeights,
};
use cfhfc::metrics::{classification_metrics, confusion, AttackMapping, ConfusionCounts};
use cfhfc::calibration::Decision;
use cfhfc::model::{prox_local_train, FeatureMatrix, LabeledBatch, ModelParams, TrainConfig};
use cfhfc::simulator::latency::{simulate_latency, LatencyInputs};
use cfhfc::simulator::{LatencyModel, Method};
use proptest::prelude::*;

fn unit() -> impl Strategy<Value = f64> {
    0.0..=1.0f64
}

fn profiles(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<NormProfile>> {
    prop::collection::vec([unit(), unit(), unit()], n)
}

fn weights() -> impl Strategy<Value = ResourceWeights> {
    (0.01..1.0f64, 0.01..1.0f64, 0.01..1.0f64).prop_map(|(a, b, c)| {
        let s = a + b + c;
        ResourceWeights::new(a / s, b / s, 1.0 - a / s - b / s).unwrap()
    })
}

fn model(k: usize, f: usize) -> impl Strategy<Value = ModelParams> {
    prop::collection::vec(-3.0..3.0f64, k * (f + 1))
        .prop_map(move |v| ModelParams::from_flat(k, f, v).unwrap())
}

fn batch(k: usize, f: usize, n: std::ops::Range<usize>) -> impl Strategy<Value = LabeledBatch> {
    prop::collection::vec((prop::collection::vec(unit(), f), 0..k), n).prop_map(move |rows| {
        let x: Vec<Vec<f64>> = rows.iter().map(|r| r.0.clone()).collect();
        let y: Vec<usize> = rows.iter().map(|r| r.1).collect();
        LabeledBatch::new(FeatureMatrix::from_rows(&x).unwrap(), y, k).unwrap()
    })
}

fn prob_row(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.001..1.0f64, k).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn probabilities_sum_to_one(m in model(4, 5), b in batch(4, 5, 1..20), scale in 1.0..200.0f64) {
        let big = m.scaled(scale);
        for row in big.predict_proba(b.features()).unwrap() {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|p| p.is_finite() && *p >= 0.0));
        }
    }

    #[test]
    fn stronger_prox_stays_closer_to_anchor(
        start in model(3, 4),
        anchor in model(3, 4),
        b in batch(3, 4, 5..30),
        r1 in 0.0..5.0f64,
        extra in 0.0..5.0f64,
    ) {
        let cfg = |rho: f64| TrainConfig {
            learning_rate: 0.05,
            batch_size: 1000,
            local_epochs: 1,
            dropout_rate: 0.0,
            proximal_coeff: rho,
        };
        let a = prox_local_train(&start, &anchor, &b, &cfg(r1), 3).unwrap();
        let c = prox_local_train(&start, &anchor, &b, &cfg(r1 + extra), 3).unwrap();
        prop_assert!(c.distance(&anchor).unwrap() <= a.distance(&anchor).unwrap() + 1e-9);
    }

    #[test]
    fn fcm_rows_and_objective(p in profiles(6..40), k in 1usize..6, m in 1.3..4.0f64, w in weights(), seed in any::<u64>()) {
        prop_assume!(p.len() >= k);
        let part = fcm_fit(&p, k, m, &w, 100, 1e-9, seed).unwrap();
        for step in &part.history {
            prop_assert!(step.max_row_error <= 1e-9);
        }
        for pair in part.history.windows(2) {
            prop_assert!(pair[1].objective <= pair[0].objective + 1e-9);
        }
        for row in &part.memberships {
            prop_assert!(row.iter().all(|u| (0.0..=1.0).contains(u)));
        }
    }

    #[test]
    fn fcm_is_permutation_equivariant(
        (p, perm) in profiles(5..25).prop_flat_map(|p| {
            let n = p.len();
            (Just(p), Just((0..n).collect::<Vec<usize>>()).prop_shuffle())
        }),
        w in weights(),
    ) {
        let init: Vec<NormProfile> = p.iter().take(3).copied().collect();
        let permuted: Vec<NormProfile> = perm.iter().map(|&i| p[i]).collect();
        let a = fcm_fit_from(&p, init.clone(), 2.0, &w, 50, 1e-12).unwrap();
        let b = fcm_fit_from(&permuted, init, 2.0, &w, 50, 1e-12).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            for c in 0..3 {
                prop_assert!((a.memberships[i][c] - b.memberships[j][c]).abs() < 1e-9);
            }
        }
    }

    // With only a few dozen points a centroid parked on one profile gives a
    // lower objective than the uniform solution, and a weight vector that
    // concentrates on one dimension makes the uniform solution unstable for
    // any fuzzifier. The limit is checked on moderately sized instances
    // under the default weights.
    #[test]
    fn large_fuzzifier_is_near_uniform(p in profiles(100..200), seed in any::<u64>()) {
        let part = fcm_fit(&p, 4, 10.0, &ResourceWeights::default(), 100, 1e-9, seed).unwrap();
        for row in &part.memberships {
            for u in row {
                prop_assert!((u - 0.25).abs() < 0.1, "membership {u}");
            }
        }
    }

    #[test]
    fn distance_is_symmetric(a in [unit(), unit(), unit()], b in [unit(), unit(), unit()], w in weights()) {
        prop_assert_eq!(weighted_distance(&a, &b, &w), weighted_distance(&b, &a, &w));
    }

    #[test]
    fn global_model_within_cluster_envelope(
        ms in prop::collection::vec(model(3, 3), 1..6),
        meta in prop::collection::vec((1usize..1000, 0.01..=1.0f64), 6),
        factor in -5.0..5.0f64,
    ) {
        let clusters: Vec<ClusterModel> = ms.iter().zip(&meta).enumerate().map(|(id, (m, &(n, mu)))| ClusterModel {
            cluster_id: id,
            params: m.clone(),
            total_data: n,
            mean_membership: mu,
        }).collect();
        let pi = cluster_weights(&clusters).unwrap();
        prop_assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let g = global_aggregate(&clusters).unwrap();
        for j in 0..g.num_params() {
            let lo = ms.iter().map(|m| m.as_slice()[j]).fold(f64::INFINITY, f64::min);
            let hi = ms.iter().map(|m| m.as_slice()[j]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(g.as_slice()[j] >= lo - 1e-12 && g.as_slice()[j] <= hi + 1e-12);
        }
        let scaled: Vec<ClusterModel> = clusters.iter().map(|c| ClusterModel { params: c.params.scaled(factor), ..c.clone() }).collect();
        let gs = global_aggregate(&scaled).unwrap();
        for (x, y) in gs.as_slice().iter().zip(g.as_slice()) {
            prop_assert!((x - factor * y).abs() <= 1e-9 * (1.0 + y.abs() * factor.abs()));
        }
    }

    #[test]
    fn prediction_sets_grow_with_threshold(p in prob_row(5), t1 in unit(), t2 in unit()) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let a = decide(&p, lo);
        let b = decide(&p, hi);
        prop_assert!(a.prediction_set.iter().all(|c| b.prediction_set.contains(c)));
        prop_assert!(!b.is_suspicious() || a.is_suspicious());
        prop_assert_eq!(a.prediction_set.is_empty(), a.is_suspicious());
    }

    #[test]
    fn confidence_stays_bounded(
        q0 in 0.5..0.999f64,
        feedback in prop::collection::vec((unit(), unit(), unit()), 1..30),
        (alpha, beta, gamma) in (0.0..5.0f64, 0.0..5.0f64, 0.0..5.0f64),
    ) {
        let cfg = CalibrationConfig { initial_confidence: q0, alpha, beta, gamma, ..CalibrationConfig::default() };
        let mut state = CalibrationState::new(&cfg);
        for (fnr, fpr, r) in feedback {
            state.record_feedback(fnr, fpr);
            state.resource_index = r;
            state.confidence = update_confidence(&state);
            prop_assert!((Q_MIN..=Q_MAX).contains(&state.confidence));
        }
    }

    #[test]
    fn calibration_leaves_params_untouched(m in model(3, 4), b in batch(3, 4, 1..40)) {
        let cluster = ClusterModel { cluster_id: 0, params: m.clone(), total_data: b.len(), mean_membership: 1.0 };
        let state = CalibrationState::new(&CalibrationConfig::default());
        let (cal, next) = calibrate(&cluster, &b, &state).unwrap();
        let bits = |p: &ModelParams| p.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&cal.params), bits(&m));
        prop_assert_eq!(bits(&cluster.params), bits(&m));
        prop_assert!(next.scores.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn metric_identities(tp in 0u64..500, tn in 0u64..500, fp in 0u64..500, fn_ in 0u64..500) {
        prop_assume!(tp + tn + fp + fn_ > 0);
        let m = classification_metrics(&ConfusionCounts::from_binary(tp, tn, fp, fn_)).unwrap();
        prop_assert_eq!(m.accuracy, (tp + tn) as f64 / (tp + tn + fp + fn_) as f64);
        if tp + fn_ > 0 {
            prop_assert!((m.tpr + m.fnr - 1.0).abs() < 1e-12);
        }
        if m.precision + m.recall > 0.0 {
            prop_assert!((m.f1 - 2.0 * m.precision * m.recall / (m.precision + m.recall)).abs() < 1e-12);
        }
        prop_assert!([m.accuracy, m.precision, m.recall, m.f1, m.fpr, m.fnr].iter().all(|v| v.is_finite()));
    }

    #[test]
    fn metrics_ignore_sample_order(
        (rows, perm) in prop::collection::vec((0usize..4, 0usize..5), 1..60).prop_flat_map(|rows| {
            let n = rows.len();
            (Just(rows), Just((0..n).collect::<Vec<usize>>()).prop_shuffle())
        })
    ) {
        let to_decision = |p: usize| if p == 4 {
            decide(&[0.25; 4], 0.0)
        } else {
            Decision::label(p)
        };
        let mapping = AttackMapping::normal_is_zero(4);
        let truths: Vec<usize> = rows.iter().map(|r| r.0).collect();
        let preds: Vec<Decision> = rows.iter().map(|r| to_decision(r.1)).collect();
        let pt: Vec<usize> = perm.iter().map(|&i| truths[i]).collect();
        let pp: Vec<Decision> = perm.iter().map(|&i| preds[i].clone()).collect();
        let a = confusion(&preds, &truths, &mapping).unwrap();
        let b = confusion(&pp, &pt, &mapping).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.total(), truths.len() as u64);
        for c in 0..4 {
            let support = truths.iter().filter(|&&y| y == c).count() as u64;
            prop_assert_eq!(a.per_class[c].iter().sum::<u64>(), support);
        }
    }

    #[test]
    fn scaled_features_in_unit_interval(v in prop::collection::vec(-1e6..1e6f64, 3..60)) {
        let cols = 3;
        let mut data = v[..(v.len() / cols) * cols].to_vec();
        min_max_scale(&mut data, cols);
        prop_assert!(data.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn cfhfc_latency_never_exceeds_fedavg(
        hw in prop::collection::vec((1.0..2.0f64, 1.0..8.0f64, 10.0..200.0f64, 20usize..500, any::<bool>(), 1usize..21), 2..30),
        k in 1usize..5,
        slowdown in 1.0..5.0f64,
        seed in any::<u64>(),
    ) {
        let profiles: Vec<HardwareProfile> = hw.iter().map(|h| HardwareProfile::new(h.0, h.1, h.2)).collect();
        let sizes: Vec<usize> = hw.iter().map(|h| h.3).collect();
        let stragglers: Vec<bool> = hw.iter().map(|h| h.4).collect();
        let partial: Vec<usize> = hw.iter().map(|h| h.5).collect();
        let norm = cfhfc::hardware::normalize_profiles(&profiles).unwrap();
        let triples = cfhfc::hardware::normalized_triples(&norm).unwrap();
        let k = k.min(triples.len());
        let u = fcm_fit(&triples, k, 3.0, &ResourceWeights::default(), 100, 1e-6, seed).unwrap().memberships;
        let model = LatencyModel::default();
        let base = LatencyInputs {
            profiles: &profiles,
            train_sizes: &sizes,
            local_epochs: 20,
            num_params: 84,
            stragglers: &stragglers,
            slowdown,
            partial_epochs: &partial,
            memberships: None,
            participation_floor: 0.05,
        };
        let cf = simulate_latency(Method::Cfhfc, &model, &LatencyInputs { memberships: Some(&u), ..base });
        let avg = simulate_latency(Method::Fedavg, &model, &base);
        prop_assert!(cf.sync_s <= avg.sync_s + model.overhead_s + 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn partition_conserves_samples(n in 2usize..12, conc in 0.05..5.0f64, seed in any::<u64>()) {
        let spec = DatasetSpec {
            source: DataSource::Synthetic { num_classes: 3, num_features: 4, samples_per_class: 200, class_separation: 5.0 },
            partition: PartitionSpec::Dirichlet { concentration: conc },
            ..DatasetSpec::default()
        };
        let data = generate_synthetic(&spec, seed).unwrap();
        prop_assert!(data.features().as_slice().iter().all(|x| (0.0..=1.0).contains(x)));
        let part = dirichlet_partition(&data, n, conc, 0.1, 10, seed).unwrap();
        let total: usize = part.clients.iter().map(|c| c.size()).sum();
        prop_assert_eq!(total, data.len() + part.resampled);
        for c in &part.clients {
            prop_assert_eq!(c.calibration.len(), c.size() / 10);
            for i in 0..c.calibration.len() {
                let row = c.calibration.features().row(i);
                prop_assert!(c.train.features().iter_rows().all(|r| r != row));
            }
        }
    }
}
