//! Comparison methods: nearest class mean, prototype k-NN over GMM
//! centroids, and soft distillation (all weights trainable, KL toward the
//! original network).

use std::path::Path;

use crate::error::{Error, Result};
use crate::expand::{augment, expand_deep, make_batch};
use crate::features::{FeatureSet, LabelPools, Record};
use crate::gmm::GmmBank;
use crate::model::Classifier;
use crate::net::{cross_entropy, softmax, Batch, TwoLayerNet};
use crate::optim::{sgd_step, OptimizerState, TrainConfig};
use crate::rng::{stream, stream_rng};
use crate::scalar::{squared_distance, Scalar};

/// Labeled prototypes plus the vote size `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet<F> {
    entries: Vec<(String, Vec<F>)>,
    k: usize,
}

impl<F: Scalar> PrototypeSet<F> {
    /// Build from entries; `k` is the smallest per-label prototype count.
    pub fn new(entries: Vec<(String, Vec<F>)>) -> Result<Self> {
        let Some(dims) = entries.first().map(|(_, v)| v.len()) else {
            return Err(Error::EmptySet);
        };
        if let Some((_, v)) = entries.iter().find(|(_, v)| v.len() != dims) {
            return Err(Error::DimensionMismatch {
                expected: dims,
                found: v.len(),
            });
        }
        let mut counts: Vec<(&str, usize)> = Vec::new();
        for (l, _) in &entries {
            match counts.iter_mut().find(|(c, _)| *c == l) {
                Some((_, n)) => *n += 1,
                None => counts.push((l, 1)),
            }
        }
        let k = counts.iter().map(|(_, n)| *n).min().unwrap_or(1);
        Ok(Self { entries, k })
    }

    pub fn with_k(mut self, k: usize) -> Result<Self> {
        if k == 0 || k > self.k {
            return Err(Error::Config(format!(
                "k = {k} must lie in 1..={} (smallest class)",
                self.k
            )));
        }
        self.k = k;
        Ok(self)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dims(&self) -> usize {
        self.entries[0].1.len()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(String, Vec<F>)] {
        &self.entries
    }

    fn check_dims(&self, v: &[F]) -> Result<()> {
        if v.len() != self.dims() {
            return Err(Error::DimensionMismatch {
                expected: self.dims(),
                found: v.len(),
            });
        }
        Ok(())
    }

    /// Entry indices ordered by (distance, entry index).
    fn ranked(&self, v: &[F]) -> Vec<usize> {
        let d: Vec<F> = self.entries.iter().map(|(_, p)| squared_distance(p, v)).collect();
        let mut idx: Vec<usize> = (0..d.len()).collect();
        idx.sort_by(|&a, &b| d[a].partial_cmp(&d[b]).expect("finite distances").then(a.cmp(&b)));
        idx
    }

    fn nearest(&self, v: &[F]) -> usize {
        let mut best = 0;
        let mut best_d = F::infinity();
        for (i, (_, p)) in self.entries.iter().enumerate() {
            let d = squared_distance(p, v);
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        best
    }

    /// Label of the nearest prototype; earlier entries win ties.
    pub fn classify_nearest(&self, v: &[F]) -> Result<&str> {
        self.check_dims(v)?;
        Ok(&self.entries[self.nearest(v)].0)
    }

    /// Majority label among the `k` nearest prototypes, falling back to
    /// the single nearest when the vote is tied.
    pub fn classify_knn(&self, v: &[F]) -> Result<&str> {
        self.check_dims(v)?;
        if self.k == 1 {
            return Ok(&self.entries[self.nearest(v)].0);
        }
        let ranked = self.ranked(v);
        let mut votes: Vec<(&str, usize)> = Vec::new();
        for &i in ranked.iter().take(self.k) {
            let l = self.entries[i].0.as_str();
            match votes.iter_mut().find(|(c, _)| *c == l) {
                Some((_, n)) => *n += 1,
                None => votes.push((l, 1)),
            }
        }
        let top = votes.iter().map(|(_, n)| *n).max().expect("k >= 1");
        let mut leaders = votes.iter().filter(|(_, n)| *n == top);
        let first = leaders.next().expect("one leader");
        if leaders.next().is_some() {
            return Ok(&self.entries[ranked[0]].0);
        }
        Ok(first.0)
    }

    /// Feature-file text with a `# prototypes k=<k>` comment.
    pub fn to_text(&self) -> Result<String> {
        let records = self
            .entries
            .iter()
            .map(|(l, v)| Record {
                label: l.clone(),
                values: v.clone(),
            })
            .collect();
        FeatureSet::from_records(self.dims(), records)?.to_text_with_comments(&[format!("prototypes k={}", self.k)])
    }

    pub fn parse(text: &str) -> Result<Self> {
        let (set, comments) = FeatureSet::<F>::parse_with_comments(text)?;
        let k = comments
            .iter()
            .find_map(|c| c.strip_prefix("prototypes k="))
            .ok_or_else(|| Error::Schema("missing `# prototypes k=<k>` line".into()))?
            .trim()
            .parse::<usize>()
            .map_err(|e| Error::Schema(format!("bad k: {e}")))?;
        let entries = set.records().iter().map(|r| (r.label.clone(), r.values.clone())).collect();
        Self::new(entries)?.with_k(k)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()?).map_err(|e| Error::io(path, e))
    }
}

impl<F: Scalar> Classifier<F> for PrototypeSet<F> {
    fn classify(&self, v: &[F]) -> Result<&str> {
        self.classify_knn(v)
    }

    fn class_labels(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for (l, _) in &self.entries {
            if !out.contains(l) {
                out.push(l.clone());
            }
        }
        out
    }
}

fn mean<F: Scalar>(vs: &[Vec<F>]) -> Vec<F> {
    let n = F::of(vs.len() as f64);
    let mut out = vec![F::zero(); vs[0].len()];
    for v in vs {
        for (o, &x) in out.iter_mut().zip(v) {
            *o = *o + x;
        }
    }
    out.into_iter().map(|x| x / n).collect()
}

fn check_pools<F: Scalar>(bank: &GmmBank<F>, novel_pool: &LabelPools<F>) -> Result<()> {
    if let Some((l, _)) = novel_pool.iter().find(|(_, p)| p.is_empty()) {
        return Err(Error::Config(format!("class `{l}` has no samples")));
    }
    if let Some(l) = novel_pool.keys().find(|l| bank.get(l).is_some()) {
        return Err(Error::DuplicateLabel(l.clone()));
    }
    Ok(())
}

/// One prototype per class: GMM mixture mean for base classes, sample mean
/// for novel classes.
pub fn ncm_build<F: Scalar>(bank: &GmmBank<F>, novel_pool: &LabelPools<F>) -> Result<PrototypeSet<F>> {
    check_pools(bank, novel_pool)?;
    let mut entries: Vec<(String, Vec<F>)> = bank.iter().map(|(l, g)| (l.clone(), g.mixture_mean())).collect();
    entries.extend(novel_pool.iter().map(|(l, p)| (l.clone(), mean(p))));
    PrototypeSet::new(entries)
}

pub fn ncm_classify<'a, F: Scalar>(protos: &'a PrototypeSet<F>, v: &[F]) -> Result<&'a str> {
    protos.classify_nearest(v)
}

/// Every GMM component mean for base classes, every raw sample for novel
/// classes; `k` is the smallest per-class count.
pub fn pknn_build<F: Scalar>(bank: &GmmBank<F>, novel_pool: &LabelPools<F>) -> Result<PrototypeSet<F>> {
    check_pools(bank, novel_pool)?;
    let mut entries = Vec::new();
    for (l, g) in bank.iter() {
        entries.extend(g.means().iter().map(|m| (l.clone(), m.clone())));
    }
    for (l, p) in novel_pool {
        entries.extend(p.iter().map(|v| (l.clone(), v.clone())));
    }
    PrototypeSet::new(entries)
}

pub fn pknn_classify<'a, F: Scalar>(protos: &'a PrototypeSet<F>, v: &[F]) -> Result<&'a str> {
    protos.classify_knn(v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftDisConfig {
    pub train: TrainConfig,
    /// Weight of the distillation term.
    pub lambda: f64,
    pub temperature: f64,
}

impl Default for SoftDisConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            lambda: 1.0,
            temperature: 2.0,
        }
    }
}

impl SoftDisConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("temperature must be > 0".into()));
        }
        Ok(())
    }
}

/// `KL(p‖q) = Σ p ln(p/q)`, with `0 ln 0 = 0`.
pub fn kl_divergence<F: Scalar>(p: &[F], q: &[F]) -> F {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > F::zero())
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.ln()))
        .sum()
}

fn soften<F: Scalar>(logits: &[F], temperature: F) -> Vec<F> {
    softmax(&logits.iter().map(|&z| z / temperature).collect::<Vec<_>>())
}

/// Distillation term `T²·KL(softmax(teacher/T) ‖ softmax(student[..K]/T))`
/// over the teacher's `K` classes.
pub fn distillation_term<F: Scalar>(teacher_logits: &[F], student_logits: &[F], temperature: F) -> F {
    let k = teacher_logits.len();
    let p = soften(teacher_logits, temperature);
    let q = soften(&student_logits[..k], temperature);
    temperature * temperature * kl_divergence(&p, &q)
}

/// Mean of `CE + λ·T²·KL` over the batch.
pub fn soft_dis_loss<F: Scalar>(
    student: &TwoLayerNet<F>,
    teacher: &TwoLayerNet<F>,
    batch: &Batch<F>,
    lambda: F,
    temperature: F,
) -> Result<F> {
    let mut total = F::zero();
    for (v, &t) in batch.inputs.iter().zip(&batch.targets) {
        let z = student.logits(v)?;
        let zt = teacher.logits(v)?;
        total = total + cross_entropy(&z, t) + lambda * distillation_term(&zt, &z, temperature);
    }
    Ok(total / F::of(batch.len() as f64))
}

/// Exact gradient of [`soft_dis_loss`] over the student's trainable entries.
pub fn soft_dis_grad<F: Scalar>(
    student: &TwoLayerNet<F>,
    teacher: &TwoLayerNet<F>,
    batch: &Batch<F>,
    lambda: F,
    temperature: F,
) -> Result<Vec<F>> {
    if batch.is_empty() {
        return Err(Error::EmptySet);
    }
    let k = teacher.classes();
    let mut grad = student.zero_grad();
    let fc1_trainable = student.fc1().trainable_count() > 0;
    for (v, &t) in batch.inputs.iter().zip(&batch.targets) {
        if t >= student.classes() {
            return Err(Error::Config(format!("target index {t} out of range")));
        }
        let (hidden, z) = student.forward(v)?;
        let zt = teacher.logits(v)?;
        let mut d = softmax(&z);
        d[t] = d[t] - F::one();
        if lambda > F::zero() {
            let p = soften(&zt, temperature);
            let q = soften(&z[..k], temperature);
            for i in 0..k {
                d[i] = d[i] + lambda * temperature * (q[i] - p[i]);
            }
        }
        student.accumulate(v, &hidden, &d, &mut grad, fc1_trainable);
    }
    student.finish_grad(&mut grad, batch.len());
    Ok(student.flatten_grad(&grad))
}

/// Fine-tune every weight of an FC2-expanded copy of `base_net` on
/// balanced batches, regularised toward the frozen original's softened
/// outputs on the base classes.
pub fn soft_dis_train<F: Scalar>(
    base_net: &TwoLayerNet<F>,
    bank: &GmmBank<F>,
    novel_pool: &LabelPools<F>,
    cfg: &SoftDisConfig,
) -> Result<TwoLayerNet<F>> {
    cfg.validate()?;
    check_pools(bank, novel_pool)?;
    let train = &cfg.train;
    if base_net.labels() != bank.labels().as_slice() {
        return Err(Error::Config("bank labels must equal the base labels".into()));
    }
    let novel: Vec<String> = novel_pool.keys().cloned().collect();
    let mut student = expand_deep(base_net, &novel, 0, train.seed)?;
    student.set_frozen_all(false);
    if train.iters == 0 {
        return Ok(student);
    }

    let spread = bank.mean_variance().sqrt();
    let mut aug_rng = stream_rng(train.seed, stream::AUGMENT);
    let mut pool = LabelPools::new();
    for (l, samples) in novel_pool {
        pool.insert(
            l.clone(),
            augment(samples, train.aug_per_sample, F::of(train.aug_scale), spread, &mut aug_rng),
        );
    }
    let lambda = F::of(cfg.lambda);
    let temperature = F::of(cfg.temperature);
    let mut batch_rng = stream_rng(train.seed, stream::BATCH);
    let mut mask_rng = stream_rng(train.seed, stream::MASK);
    let mut params = student.trainable_params();
    let mut state = OptimizerState::new(params.len());
    let mut running = 0.0;
    for iter in 0..train.iters {
        let batch = make_batch(bank, &pool, train.batch_per_class, &mut batch_rng)?;
        let grad = soft_dis_grad(&student, base_net, &batch, lambda, temperature)?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!("non-finite gradient at iteration {iter}")));
        }
        sgd_step(&mut params, &mut state, &grad, train, &mut mask_rng);
        student.set_trainable_params(&params);
        if train.verbose {
            running += soft_dis_loss(&student, base_net, &batch, lambda, temperature)?.as_f64();
            if (iter + 1) % 100 == 0 {
                println!("iter {} loss {:.6}", iter + 1, running / 100.0);
                running = 0.0;
            }
        }
    }
    Ok(student)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::DiagGmm;

    fn protos(entries: &[(&str, [f64; 2])]) -> PrototypeSet<f64> {
        PrototypeSet::new(entries.iter().map(|(l, v)| (l.to_string(), v.to_vec())).collect()).unwrap()
    }

    fn bank_m(means: &[(&str, Vec<Vec<f64>>)]) -> GmmBank<f64> {
        let mut bank = GmmBank::new(2);
        for (l, mus) in means {
            let m = mus.len();
            let g = DiagGmm::new(vec![1.0 / m as f64; m], mus.clone(), vec![vec![1.0, 1.0]; m]).unwrap();
            bank.insert(*l, g).unwrap();
        }
        bank
    }

    #[test]
    fn ncm_prototypes() {
        let bank = bank_m(&[("a", vec![vec![3.0, 3.0]])]);
        let mut pool = LabelPools::new();
        pool.insert("x".to_string(), vec![vec![0.0, 0.0], vec![2.0, 0.0]]);
        pool.insert("y".to_string(), vec![vec![7.0, -1.0]]);
        let p = ncm_build(&bank, &pool).unwrap();
        assert_eq!(p.k(), 1);
        assert_eq!(p.entries()[0].1, vec![3.0, 3.0]);
        assert_eq!(p.entries()[1].1, vec![1.0, 0.0]);
        assert_eq!(p.entries()[2].1, vec![7.0, -1.0]);
    }

    #[test]
    fn ncm_nearest_and_ties() {
        let p = protos(&[("A", [0.0, 0.0]), ("B", [4.0, 0.0])]);
        assert_eq!(ncm_classify(&p, &[1.0, 0.0]).unwrap(), "A");
        assert_eq!(ncm_classify(&p, &[2.0, 5.0]).unwrap(), "A");
        assert_eq!(ncm_classify(&p, &[2.5, 0.0]).unwrap(), "B");
        assert!(ncm_classify(&p, &[1.0]).is_err());
    }

    #[test]
    fn pknn_k_is_smallest_class() {
        let mus: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, 100.0]).collect();
        let bank = bank_m(&[("a", mus.clone()), ("b", mus)]);
        let mut pool = LabelPools::new();
        pool.insert("x".to_string(), vec![vec![0.0, 0.0]; 3]);
        pool.insert("y".to_string(), vec![vec![1.0, 0.0]; 3]);
        let p = pknn_build(&bank, &pool).unwrap();
        assert_eq!(p.k(), 3);
        assert_eq!(p.len(), 20 + 20 + 3 + 3);
        pool.insert("z".to_string(), vec![vec![5.0, 5.0]]);
        assert_eq!(pknn_build(&bank, &pool).unwrap().k(), 1);
    }

    #[test]
    fn pknn_tie_falls_back_to_nearest() {
        let p = protos(&[("A", [0.0, 0.0]), ("B", [2.0, 0.0]), ("A", [50.0, 0.0]), ("B", [60.0, 0.0])]);
        assert_eq!(p.k(), 2);
        assert_eq!(pknn_classify(&p, &[0.9, 0.0]).unwrap(), "A");
        assert_eq!(pknn_classify(&p, &[1.1, 0.0]).unwrap(), "B");
    }

    #[test]
    fn pknn_majority_wins() {
        let p = protos(&[
            ("A", [0.0, 0.0]),
            ("A", [0.2, 0.0]),
            ("A", [9.0, 9.0]),
            ("B", [0.05, 0.0]),
            ("B", [30.0, 0.0]),
            ("B", [31.0, 0.0]),
        ]);
        assert_eq!(p.k(), 3);
        // Nearest is B, but A holds two of the three nearest.
        assert_eq!(pknn_classify(&p, &[0.06, 0.0]).unwrap(), "A");
    }

    #[test]
    fn empty_class_rejected() {
        let bank = bank_m(&[("a", vec![vec![0.0, 0.0]])]);
        let mut pool = LabelPools::new();
        pool.insert("x".to_string(), vec![]);
        assert!(ncm_build(&bank, &pool).is_err());
        assert!(pknn_build(&bank, &pool).is_err());
    }

    #[test]
    fn prototype_text_round_trip() {
        let p = protos(&[("A", [0.0, 0.5]), ("A", [1.0, 0.0]), ("B", [2.0, 0.0]), ("B", [3.0, 0.1])]);
        let text = p.to_text().unwrap();
        assert!(text.lines().nth(1).unwrap() == "# prototypes k=2");
        assert_eq!(PrototypeSet::<f64>::parse(&text).unwrap(), p);
        let stripped = text.replace("# prototypes k=2\n", "");
        assert!(PrototypeSet::<f64>::parse(&stripped).is_err());
    }

    #[test]
    fn kl_is_zero_on_match_and_positive_otherwise() {
        let z = [0.3f64, -1.0, 2.0];
        assert_eq!(distillation_term(&z, &[0.3, -1.0, 2.0, 9.0], 2.0), 0.0);
        assert!(distillation_term(&z, &[0.0, 0.0, 0.0, 9.0], 2.0) > 0.0);
        assert_eq!(kl_divergence(&[0.0f64, 1.0], &[0.5, 0.5]), 2f64.ln());
    }
}
