//! Hard-distillation expansion: add rows (and optionally hidden units) for
//! novel classes, freeze everything that existed before, and train only the
//! new parameters on balanced batches of GMM generations and augmented
//! novel samples.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::features::{validate_label, LabelPools};
use crate::gmm::GmmBank;
use crate::model::{Classifier, Network};
use crate::net::{glorot_bound, glorot_row, Batch, SoftmaxHead, TwoLayerNet};
use crate::optim::{sgd_step, OptimizerState, TrainConfig};
use crate::rng::{stream, stream_rng};
use crate::scalar::Scalar;

fn check_novel(existing: &[String], novel: &[String]) -> Result<()> {
    for (i, l) in novel.iter().enumerate() {
        validate_label(l)?;
        if existing.contains(l) || novel[..i].contains(l) {
            return Err(Error::DuplicateLabel(l.clone()));
        }
    }
    Ok(())
}

/// Append one trainable row per novel label; the original rows are frozen
/// and bit-identical to the input.
pub fn expand_head<F: Scalar>(head: &SoftmaxHead<F>, novel_labels: &[String], seed: u64) -> Result<SoftmaxHead<F>> {
    check_novel(head.labels(), novel_labels)?;
    let mut out = head.clone();
    let base = head.classes();
    out.set_frozen_rows(base)?;
    let mut rng = stream_rng(seed, stream::INIT);
    let bound = glorot_bound(head.in_dims(), base + novel_labels.len());
    let rows = (0..novel_labels.len())
        .map(|_| glorot_row(head.in_dims(), bound, &mut rng))
        .collect();
    out.layer_mut().push_rows(rows);
    out.labels_mut().extend(novel_labels.iter().cloned());
    Ok(out)
}

/// Expand both layers: `new_features` trainable hidden units in FC1, FC2
/// zero-padded for them on base rows (frozen), plus one trainable FC2 row
/// per novel label reading every hidden unit.
pub fn expand_deep<F: Scalar>(
    net: &TwoLayerNet<F>,
    novel_labels: &[String],
    new_features: usize,
    seed: u64,
) -> Result<TwoLayerNet<F>> {
    check_novel(net.labels(), novel_labels)?;
    let mut out = net.clone();
    out.set_frozen_all(true);
    let mut rng = stream_rng(seed, stream::INIT);
    let hidden = net.hidden_dims() + new_features;
    let bound1 = glorot_bound(net.input_dims(), hidden);
    let fc1_rows = (0..new_features)
        .map(|_| glorot_row(net.input_dims(), bound1, &mut rng))
        .collect();
    out.fc1_mut().push_rows(fc1_rows);

    let fc2 = out.fc2_mut();
    fc2.layer_mut().push_columns(new_features);
    let bound2 = glorot_bound(hidden, net.classes() + novel_labels.len());
    let fc2_rows = (0..novel_labels.len())
        .map(|_| glorot_row(hidden, bound2, &mut rng))
        .collect();
    fc2.layer_mut().push_rows(fc2_rows);
    fc2.labels_mut().extend(novel_labels.iter().cloned());
    Ok(out)
}

/// A base network together with its expansion.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpandedModel<F> {
    pub base: Network<F>,
    pub expanded: Network<F>,
    pub novel_labels: Vec<String>,
}

impl<F: Scalar> ExpandedModel<F> {
    /// Last-layer expansion. A two-layer base gets its FC2 expanded with no
    /// new hidden units.
    pub fn last_layer(base: Network<F>, novel_labels: &[String], seed: u64) -> Result<Self> {
        let expanded = match &base {
            Network::Head(h) => Network::Head(expand_head(h, novel_labels, seed)?),
            Network::TwoLayer(n) => Network::TwoLayer(expand_deep(n, novel_labels, 0, seed)?),
        };
        Ok(Self {
            base,
            expanded,
            novel_labels: novel_labels.to_vec(),
        })
    }

    pub fn deep(base: TwoLayerNet<F>, novel_labels: &[String], new_features: usize, seed: u64) -> Result<Self> {
        let expanded = expand_deep(&base, novel_labels, new_features, seed)?;
        Ok(Self {
            base: Network::TwoLayer(base),
            expanded: Network::TwoLayer(expanded),
            novel_labels: novel_labels.to_vec(),
        })
    }

    pub fn base_labels(&self) -> &[String] {
        self.base.labels()
    }

    /// Whether the expanded network's base-row logits equal the base
    /// network's logits bit for bit at `v`.
    pub fn base_logits_preserved(&self, v: &[F]) -> Result<bool> {
        let before = self.base.logits(v)?;
        let after = self.expanded.logits(v)?;
        Ok(before
            .iter()
            .zip(&after[..before.len()])
            .all(|(a, b)| a.bit_pattern() == b.bit_pattern()))
    }
}

impl<F: Scalar> Classifier<F> for ExpandedModel<F> {
    fn classify(&self, v: &[F]) -> Result<&str> {
        self.expanded.classify(v)
    }

    fn class_labels(&self) -> Vec<String> {
        self.expanded.labels().to_vec()
    }
}

/// Originals followed, per original, by `count` copies jittered with
/// `N(0, (scale·spread)² I)`.
pub fn augment<F: Scalar, R: Rng + ?Sized>(
    samples: &[Vec<F>],
    count: usize,
    scale: F,
    spread: F,
    rng: &mut R,
) -> Vec<Vec<F>> {
    let sd = scale * spread;
    let mut out = Vec::with_capacity(samples.len() * (count + 1));
    for s in samples {
        out.push(s.clone());
        for _ in 0..count {
            out.push(
                s.iter()
                    .map(|&x| {
                        let z: f64 = rng.sample(StandardNormal);
                        x + sd * F::of(z)
                    })
                    .collect(),
            );
        }
    }
    out
}

/// Balanced batch: `per_class` GMM draws for every bank class, then
/// `per_class` with-replacement picks from every novel pool, shuffled.
/// Targets index `bank labels ++ novel labels`.
pub fn make_batch<F: Scalar, R: Rng + ?Sized>(
    bank: &GmmBank<F>,
    novel_pool: &LabelPools<F>,
    per_class: usize,
    rng: &mut R,
) -> Result<Batch<F>> {
    if per_class == 0 {
        return Err(Error::Config("batch needs at least one item per class".into()));
    }
    let classes = bank.len() + novel_pool.len();
    let mut inputs = Vec::with_capacity(classes * per_class);
    let mut targets = Vec::with_capacity(classes * per_class);
    for (k, (_, model)) in bank.iter().enumerate() {
        inputs.extend(model.sample(per_class, rng));
        targets.extend(std::iter::repeat_n(k, per_class));
    }
    for (j, (label, pool)) in novel_pool.iter().enumerate() {
        if pool.is_empty() {
            return Err(Error::Config(format!("empty novel pool for `{label}`")));
        }
        for _ in 0..per_class {
            inputs.push(pool[rng.random_range(0..pool.len())].clone());
        }
        targets.extend(std::iter::repeat_n(bank.len() + j, per_class));
    }
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    order.shuffle(rng);
    let mut inputs: Vec<Option<Vec<F>>> = inputs.into_iter().map(Some).collect();
    Ok(Batch {
        inputs: order.iter().map(|&i| inputs[i].take().expect("permutation")).collect(),
        targets: order.iter().map(|&i| targets[i]).collect(),
    })
}

/// Train the expansion parameters for `cfg.iters` steps. Novel samples are
/// augmented once up front with jitter proportional to the bank's RMS
/// standard deviation.
pub fn train_expansion<F: Scalar>(
    mut model: ExpandedModel<F>,
    bank: &GmmBank<F>,
    novel_pool: &LabelPools<F>,
    cfg: &TrainConfig,
) -> Result<ExpandedModel<F>> {
    cfg.validate()?;
    let labels = model.expanded.labels();
    let k = bank.len();
    let expected: Vec<String> = bank.labels().into_iter().chain(novel_pool.keys().cloned()).collect();
    if labels != expected.as_slice() {
        return Err(Error::Config(format!(
            "expanded labels {labels:?} do not match bank + novel labels {expected:?}"
        )));
    }
    if model.base.labels() != &labels[..k] {
        return Err(Error::Config("bank labels must equal the base labels".into()));
    }
    if bank.dims() != model.expanded.input_dims() {
        return Err(Error::DimensionMismatch {
            expected: model.expanded.input_dims(),
            found: bank.dims(),
        });
    }
    if cfg.iters == 0 {
        return Ok(model);
    }

    let spread = bank.mean_variance().sqrt();
    let scale = F::of(cfg.aug_scale);
    let mut aug_rng = stream_rng(cfg.seed, stream::AUGMENT);
    let mut pool = LabelPools::new();
    for (label, samples) in novel_pool {
        if samples.is_empty() {
            return Err(Error::Config(format!("empty novel pool for `{label}`")));
        }
        if let Some(v) = samples.iter().find(|v| v.len() != bank.dims()) {
            return Err(Error::DimensionMismatch {
                expected: bank.dims(),
                found: v.len(),
            });
        }
        pool.insert(
            label.clone(),
            augment(samples, cfg.aug_per_sample, scale, spread, &mut aug_rng),
        );
    }

    let mut batch_rng = stream_rng(cfg.seed, stream::BATCH);
    let mut mask_rng = stream_rng(cfg.seed, stream::MASK);
    let net = &mut model.expanded;
    let mut params = net.trainable_params();
    let mut state = OptimizerState::new(params.len());
    let mut running = 0.0;
    for iter in 0..cfg.iters {
        let batch = make_batch(bank, &pool, cfg.batch_per_class, &mut batch_rng)?;
        let grad = net.ce_grad_flat(&batch)?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!("non-finite gradient at iteration {iter}")));
        }
        sgd_step(&mut params, &mut state, &grad, cfg, &mut mask_rng);
        net.set_trainable_params(&params);
        if cfg.verbose {
            let loss = net.loss(&batch)?.as_f64();
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("non-finite loss at iteration {iter}")));
            }
            running += loss;
            if (iter + 1) % 100 == 0 {
                println!("iter {} loss {:.6}", iter + 1, running / 100.0);
                running = 0.0;
            }
        }
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::Numerical("expansion training diverged".into()));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::DiagGmm;

    fn labels(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i}")).collect()
    }

    #[test]
    fn head_expansion_shape_and_freeze() {
        let head = SoftmaxHead::<f64>::init(labels("b", 2), 3, false, 1).unwrap();
        let out = expand_head(&head, &labels("n", 1), 7).unwrap();
        assert_eq!(out.classes(), 3);
        assert_eq!(out.frozen_rows(), 2);
        assert_eq!(out.layer().row(0), head.layer().row(0));
        assert_eq!(out.layer().row(1), head.layer().row(1));
        assert_eq!(out.trainable_count(), 3);
    }

    #[test]
    fn empty_novel_list_is_identity() {
        let head = SoftmaxHead::<f64>::init(labels("b", 2), 3, false, 1).unwrap();
        let out = expand_head(&head, &[], 7).unwrap();
        assert_eq!(out.layer(), {
            let mut h = head.clone();
            h.set_frozen_rows(2).unwrap();
            h
        }
        .layer());
        assert_eq!(out.frozen_rows(), 2);
    }

    #[test]
    fn duplicate_labels_rejected() {
        let head = SoftmaxHead::<f64>::init(labels("b", 2), 3, false, 1).unwrap();
        assert!(matches!(expand_head(&head, &["b0".to_string()], 0), Err(Error::DuplicateLabel(_))));
        assert!(expand_head(&head, &["x".to_string(), "x".to_string()], 0).is_err());
        let net = TwoLayerNet::<f64>::init(3, 4, labels("b", 2), false, 0).unwrap();
        assert!(expand_deep(&net, &["b1".to_string()], 2, 0).is_err());
    }

    #[test]
    fn deep_expansion_shapes() {
        let net = TwoLayerNet::<f64>::init(6, 8, labels("b", 5), false, 3).unwrap();
        let out = expand_deep(&net, &labels("n", 2), 5, 9).unwrap();
        assert_eq!(out.fc2().layer().rows(), 7);
        assert_eq!(out.fc2().layer().cols(), 13);
        assert_eq!(out.hidden_dims(), 13);
        for r in 0..5 {
            assert_eq!(out.fc2().layer().row_width(r), 8);
            for c in 8..13 {
                assert_eq!(out.fc2().layer().row(r)[c], 0.0);
                assert!(out.fc2().layer().is_frozen(r, c));
            }
        }
        assert_eq!(out.trainable_count(), 5 * 6 + 2 * 13);
    }

    #[test]
    fn deep_with_zero_features_matches_head_expansion_of_fc2() {
        let net = TwoLayerNet::<f64>::init(4, 3, labels("b", 2), false, 3).unwrap();
        let deep = expand_deep(&net, &labels("n", 1), 0, 5).unwrap();
        let head = expand_head(net.fc2(), &labels("n", 1), 5).unwrap();
        assert_eq!(deep.fc2(), &head);
        assert_eq!(deep.fc1().trainable_count(), 0);
    }

    #[test]
    fn augment_cases() {
        let mut rng = stream_rng(0, 0);
        let s = vec![vec![1.0f64, 2.0], vec![3.0, 4.0]];
        assert_eq!(augment(&s, 0, 0.1, 1.0, &mut rng), s);
        let out = augment(&s, 3, 0.0, 1.0, &mut rng);
        assert_eq!(out.len(), 8);
        assert!(out[..4].iter().all(|v| v == &s[0]));
        assert!(out[4..].iter().all(|v| v == &s[1]));
    }

    fn tiny_bank() -> GmmBank<f64> {
        let mut bank = GmmBank::new(2);
        for (i, l) in ["b0", "b1", "b2", "b3", "b4"].iter().enumerate() {
            let g = DiagGmm::new(vec![1.0], vec![vec![i as f64 * 10.0, 0.0]], vec![vec![1.0, 1.0]]).unwrap();
            bank.insert(*l, g).unwrap();
        }
        bank
    }

    #[test]
    fn batch_counts_are_balanced() {
        let bank = tiny_bank();
        let mut pool = LabelPools::new();
        pool.insert("n0".to_string(), vec![vec![0.0, 50.0]]);
        pool.insert("n1".to_string(), vec![vec![0.0, -50.0], vec![1.0, -50.0]]);
        let mut rng = stream_rng(4, 2);
        let batch = make_batch(&bank, &pool, 8, &mut rng).unwrap();
        assert_eq!(batch.len(), 56);
        for c in 0..7 {
            assert_eq!(batch.targets.iter().filter(|&&t| t == c).count(), 8);
        }
        // Novel items come from the pool.
        for (v, &t) in batch.inputs.iter().zip(&batch.targets) {
            if t == 5 {
                assert_eq!(v, &vec![0.0, 50.0]);
            }
        }
        pool.insert("n2".to_string(), vec![]);
        assert!(make_batch(&bank, &pool, 8, &mut rng).is_err());
    }

    #[test]
    fn zero_iterations_is_identity() {
        let bank = tiny_bank();
        let net = TwoLayerNet::<f64>::init(2, 4, bank.labels(), false, 0).unwrap();
        let mut pool = LabelPools::new();
        pool.insert("n0".to_string(), vec![vec![0.0, 50.0]]);
        let model = ExpandedModel::last_layer(net.into(), &["n0".to_string()], 1).unwrap();
        let cfg = TrainConfig { iters: 0, ..TrainConfig::default() };
        let out = train_expansion(model.clone(), &bank, &pool, &cfg).unwrap();
        assert_eq!(out, model);
    }

    #[test]
    fn label_mismatch_rejected() {
        let bank = tiny_bank();
        let net = TwoLayerNet::<f64>::init(2, 4, labels("z", 5), false, 0).unwrap();
        let mut pool = LabelPools::new();
        pool.insert("n0".to_string(), vec![vec![0.0, 50.0]]);
        let model = ExpandedModel::last_layer(net.into(), &["n0".to_string()], 1).unwrap();
        assert!(train_expansion(model, &bank, &pool, &TrainConfig::default()).is_err());
    }
}
