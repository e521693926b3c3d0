use lsne_core::bench::{evaluate, gen_scenario, ScenarioSpec};
use lsne_core::expand::augment;
use lsne_core::net::{softmax, Batch};
use lsne_core::optim::sgd_step_with_mask;
use lsne_core::rng::stream_rng;
use lsne_core::scalar::{log_sum_exp, squared_distance};
use lsne_core::*;
use proptest::collection::vec;
use proptest::prelude::*;

fn label() -> impl Strategy<Value = String> {
    "[a-z][a-z0-9_.-]{0,6}"
}

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![
        -1e6f64..1e6,
        -1.0f64..1.0,
        Just(0.0),
        Just(-0.0),
        Just(f64::MIN_POSITIVE),
        Just(1e-300),
        Just(f64::MAX),
    ]
}

fn feature_set() -> impl Strategy<Value = FeatureSet<f64>> {
    (1usize..5).prop_flat_map(|dims| {
        vec((label(), vec(finite(), dims)), 1..30).prop_map(move |rows| {
            let mut set = FeatureSet::new(dims).unwrap();
            for (l, v) in rows {
                set.push(l, v).unwrap();
            }
            set
        })
    })
}

fn labels(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn feature_text_round_trips(set in feature_set()) {
        let text = set.to_text().unwrap();
        let back = FeatureSet::<f64>::parse(&text).unwrap();
        prop_assert_eq!(&back, &set);
        prop_assert_eq!(back.to_text().unwrap(), text);
    }

    #[test]
    fn split_partitions_and_keeps_order(set in feature_set(), mask in vec(any::<bool>(), 30)) {
        let all = set.labels();
        let wanted: Vec<String> = all.iter().zip(&mask).filter(|(_, &m)| m).map(|(l, _)| l.clone()).collect();
        let (inside, outside) = set.split_by_label(&wanted).unwrap();
        prop_assert_eq!(inside.len() + outside.len(), set.len());
        let expected_in: Vec<_> = set.records().iter().filter(|r| wanted.contains(&r.label)).cloned().collect();
        let expected_out: Vec<_> = set.records().iter().filter(|r| !wanted.contains(&r.label)).cloned().collect();
        prop_assert_eq!(inside.records(), expected_in.as_slice());
        prop_assert_eq!(outside.records(), expected_out.as_slice());
    }

    #[test]
    fn softmax_lies_on_the_simplex(z in vec(-1e3f64..1e3, 1..10)) {
        let p = softmax(&z);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let lse = log_sum_exp(&z);
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lse >= max && lse <= max + (z.len() as f64).ln() + 1e-9);
    }

    #[test]
    fn kl_is_nonnegative_and_zero_at_match(a in vec(-20f64..20.0, 2..8), b in vec(-20f64..20.0, 8)) {
        let p = softmax(&a);
        let q = softmax(&b[..a.len()]);
        prop_assert!(kl_divergence(&p, &q) >= -1e-12);
        prop_assert!(kl_divergence(&p, &p).abs() <= 1e-12);
    }

    #[test]
    fn unit_keep_probability_equals_unmasked(
        start in vec(-5f64..5.0, 1..12),
        steps in 1usize..20,
        seed in any::<u64>(),
    ) {
        let n = start.len();
        let masked = TrainConfig { grad_dropout: Some(1.0), ..TrainConfig::default() };
        let plain = TrainConfig::default();
        let (mut a, mut b) = (start.clone(), start);
        let (mut sa, mut sb) = (OptimizerState::new(n), OptimizerState::new(n));
        let mut grads = stream_rng(seed, 9);
        let mut mask_rng = stream_rng(seed, 3);
        for _ in 0..steps {
            let g: Vec<f64> = (0..n).map(|_| rand::Rng::random_range(&mut grads, -1.0..1.0)).collect();
            sgd_step(&mut a, &mut sa, &g, &masked, &mut mask_rng);
            sgd_step_with_mask(&mut b, &mut sb, &g, None, &plain);
        }
        prop_assert_eq!(a, b);
    }

    #[test]
    fn expansion_trains_the_documented_parameter_count(
        input in 1usize..8, hidden in 1usize..8, base in 2usize..5, novel in 1usize..4, d in 0usize..4, seed in any::<u64>(),
    ) {
        let net = TwoLayerNet::<f64>::init(input, hidden, labels("b", base), false, seed).unwrap();
        let deep = expand_deep(&net, &labels("n", novel), d, seed).unwrap();
        prop_assert_eq!(deep.trainable_count(), d * input + novel * (hidden + d));
        let head = SoftmaxHead::<f64>::init(labels("b", base), input, false, seed).unwrap();
        prop_assert_eq!(expand_head(&head, &labels("n", novel), seed).unwrap().trainable_count(), novel * input);
    }

    #[test]
    fn base_logits_survive_training_steps(
        d in 0usize..3,
        seed in any::<u64>(),
        inputs in vec(vec(-3f64..3.0, 4), 1..8),
        probes in vec(vec(-10f64..10.0, 4), 1..8),
    ) {
        let base = TwoLayerNet::<f64>::init(4, 5, labels("b", 3), true, seed).unwrap();
        let model = ExpandedModel::deep(base, &labels("n", 2), d, seed).unwrap();
        let mut expanded = model.expanded.clone();
        let targets: Vec<usize> = (0..inputs.len()).map(|i| i % 5).collect();
        let batch = Batch::new(inputs, targets).unwrap();
        let cfg = TrainConfig { lr: 0.5, grad_dropout: Some(0.5), ..TrainConfig::default() };
        let mut params = expanded.trainable_params();
        let mut state = OptimizerState::new(params.len());
        let mut rng = stream_rng(seed, 3);
        for _ in 0..10 {
            let g = expanded.ce_grad_flat(&batch).unwrap();
            sgd_step(&mut params, &mut state, &g, &cfg, &mut rng);
            expanded.set_trainable_params(&params);
        }
        let trained = ExpandedModel { expanded, ..model };
        for v in &probes {
            prop_assert!(trained.base_logits_preserved(v).unwrap());
        }
    }

    #[test]
    fn augmentation_count_and_originals(
        samples in vec(vec(-5f64..5.0, 3), 1..5), count in 0usize..6, scale in 0f64..1.0, seed in any::<u64>(),
    ) {
        let out = augment(&samples, count, scale, 1.0, &mut stream_rng(seed, 1));
        prop_assert_eq!(out.len(), samples.len() * (count + 1));
        for (i, s) in samples.iter().enumerate() {
            prop_assert_eq!(&out[i * (count + 1)], s);
        }
    }

    #[test]
    fn prototype_k_is_min_count_and_k1_matches_ncm(
        counts in vec(1usize..5, 2..5),
        queries in vec(vec(-10f64..10.0, 2), 1..20),
        seed in any::<u64>(),
    ) {
        let mut rng = stream_rng(seed, 0);
        let mut entries = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            for _ in 0..n {
                let v = vec![rand::Rng::random_range(&mut rng, -10.0..10.0), rand::Rng::random_range(&mut rng, -10.0..10.0)];
                entries.push((format!("c{c}"), v));
            }
        }
        let set = PrototypeSet::new(entries).unwrap();
        prop_assert_eq!(set.k(), *counts.iter().min().unwrap());
        let k1 = set.clone().with_k(1).unwrap();
        for q in &queries {
            prop_assert_eq!(pknn_classify(&k1, q).unwrap(), ncm_classify(&set, q).unwrap());
        }
    }

    #[test]
    fn gmm_log_pdf_is_finite_and_mean_is_convex_combination(
        weights in vec(0.05f64..1.0, 1..5),
        seed in any::<u64>(),
        probe in vec(-1e3f64..1e3, 2),
    ) {
        let total: f64 = weights.iter().sum();
        let m = weights.len();
        let mut rng = stream_rng(seed, 0);
        let mut r = || rand::Rng::random_range(&mut rng, -5.0..5.0f64);
        let means: Vec<Vec<f64>> = (0..m).map(|_| vec![r(), r()]).collect();
        let vars: Vec<Vec<f64>> = (0..m).map(|_| vec![r().abs() + 1e-3, r().abs() + 1e-3]).collect();
        let g = DiagGmm::new(weights.iter().map(|w| w / total).collect(), means.clone(), vars).unwrap();
        prop_assert!(g.log_pdf(&probe).unwrap().is_finite());
        let mm = g.mixture_mean();
        for d in 0..2 {
            let lo = means.iter().map(|v| v[d]).fold(f64::INFINITY, f64::min);
            let hi = means.iter().map(|v| v[d]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(mm[d] >= lo - 1e-12 && mm[d] <= hi + 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn scenario_constraints_hold(
        scenario in 1u8..4, seed in any::<u64>(), dims in 2usize..12, separation in 3f64..12.0, gap in 0f64..1.4,
    ) {
        let spec = ScenarioSpec {
            scenario,
            dims,
            separation,
            novel_novel_gap: gap,
            novel_base_gap: gap,
            train_per_class: 3,
            test_per_class: 2,
            seed,
            ..ScenarioSpec::default()
        };
        let sc = gen_scenario(&spec).unwrap();
        let (k, r) = (spec.base_count, spec.novel_count);
        let dist = |a: usize, b: usize| squared_distance(&sc.class_means[a], &sc.class_means[b]).sqrt();
        for a in 0..k {
            for b in a + 1..k {
                prop_assert!(dist(a, b) >= separation);
            }
        }
        for j in k..k + r {
            match scenario {
                1 => {
                    for other in 0..j {
                        prop_assert!(dist(j, other) >= separation);
                    }
                }
                2 => {
                    for b in 0..k {
                        prop_assert!(dist(j, b) >= separation - 1e-9);
                    }
                    for other in k..j {
                        prop_assert!(dist(j, other) <= gap + 1e-9);
                    }
                }
                _ => {
                    let near = (0..k).filter(|&b| dist(j, b) <= gap + 1e-9).count();
                    prop_assert_eq!(near, 1);
                }
            }
        }
        prop_assert_eq!(sc.train.len(), (k + r) * 3);
        prop_assert_eq!(sc.test.len(), (k + r) * 2);
    }

    #[test]
    fn error_split_recombines_exactly(seed in any::<u64>(), flips in vec(any::<bool>(), 14)) {
        let spec = ScenarioSpec { dims: 3, train_per_class: 1, test_per_class: 2, seed, ..ScenarioSpec::default() };
        let sc = gen_scenario(&spec).unwrap();
        let mut entries: Vec<(String, Vec<f64>)> = sc.test.records().iter().map(|r| (r.label.clone(), r.values.clone())).collect();
        // Corrupt some labels so the classifier makes a known set of mistakes.
        let all: Vec<String> = sc.base_labels.iter().chain(&sc.novel_labels).cloned().collect();
        for (i, e) in entries.iter_mut().enumerate() {
            if flips[i] {
                let pos = all.iter().position(|l| *l == e.0).unwrap();
                e.0 = all[(pos + 1) % all.len()].clone();
            }
        }
        // Far-away sentinels keep every label predictable without ever winning.
        for (i, l) in all.iter().enumerate() {
            entries.push((l.clone(), vec![1e12 * (i + 1) as f64; 3]));
        }
        let protos = PrototypeSet::new(entries).unwrap().with_k(1).unwrap();
        let e = evaluate(&protos, &sc.test, &sc.base_labels, &sc.novel_labels).unwrap();
        prop_assert_eq!(e.base_wrong + e.novel_wrong, flips.iter().filter(|&&f| f).count());
        let n = (e.base_total + e.novel_total) as f64;
        let recombined = (e.base_total as f64 * e.base_err() + e.novel_total as f64 * e.novel_err()) / n;
        prop_assert!((recombined - e.overall_err()).abs() < 1e-9);
    }
}
