//! Diagonal-covariance Gaussian mixtures: EM fitting, density, sampling,
//! and the per-class bank used as a compact stand-in for base-class data.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{check_finite, validate_label, LabelPools};
use crate::rng::{label_hash, stream, stream_rng};
use crate::scalar::{log_sum_exp, squared_distance, Scalar};

pub const BANK_FORMAT: &str = "lsne-gmm-bank";
pub const BANK_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct DiagGmm<F> {
    weights: Vec<F>,
    means: Vec<Vec<F>>,
    variances: Vec<Vec<F>>,
}

fn weight_tolerance<F: Scalar>(mixtures: usize) -> f64 {
    1e-9_f64.max(F::epsilon().as_f64() * 4.0 * mixtures as f64)
}

impl<F: Scalar> DiagGmm<F> {
    /// Build a model, checking shapes, `Σπ = 1`, positive finite variances.
    pub fn new(weights: Vec<F>, means: Vec<Vec<F>>, variances: Vec<Vec<F>>) -> Result<Self> {
        let m = weights.len();
        if m == 0 {
            return Err(Error::InvalidModel("mixture has no components".into()));
        }
        if means.len() != m || variances.len() != m {
            return Err(Error::InvalidModel(format!(
                "{m} weights but {} means and {} variance rows",
                means.len(),
                variances.len()
            )));
        }
        let dims = means[0].len();
        if dims == 0 {
            return Err(Error::InvalidModel("zero-dimensional mixture".into()));
        }
        for (mu, var) in means.iter().zip(&variances) {
            if mu.len() != dims || var.len() != dims {
                return Err(Error::DimensionMismatch {
                    expected: dims,
                    found: if mu.len() != dims { mu.len() } else { var.len() },
                });
            }
            check_finite(mu)?;
            if var.iter().any(|&s| !(s.is_finite() && s > F::zero())) {
                return Err(Error::InvalidModel("variances must be finite and positive".into()));
            }
        }
        if weights.iter().any(|&w| !(w.is_finite() && w >= F::zero())) {
            return Err(Error::InvalidModel("weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.iter().map(|w| w.as_f64()).sum();
        if (total - 1.0).abs() > weight_tolerance::<F>(m) {
            return Err(Error::InvalidModel(format!("weights sum to {total}, not 1")));
        }
        Ok(Self {
            weights,
            means,
            variances,
        })
    }

    pub fn dims(&self) -> usize {
        self.means[0].len()
    }

    pub fn mixtures(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[F] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<F>] {
        &self.means
    }

    pub fn variances(&self) -> &[Vec<F>] {
        &self.variances
    }

    fn component_log_pdf(&self, i: usize, v: &[F]) -> F {
        let half = F::of(0.5);
        let two_pi = F::of(2.0 * PI);
        let mut acc = F::zero();
        for ((&x, &mu), &var) in v.iter().zip(&self.means[i]).zip(&self.variances[i]) {
            let d = x - mu;
            acc = acc + (two_pi * var).ln() + d * d / var;
        }
        -half * acc
    }

    /// `ln p(v)` via log-sum-exp over components.
    pub fn log_pdf(&self, v: &[F]) -> Result<F> {
        if v.len() != self.dims() {
            return Err(Error::DimensionMismatch {
                expected: self.dims(),
                found: v.len(),
            });
        }
        let terms: Vec<F> = (0..self.mixtures())
            .map(|i| self.weights[i].ln() + self.component_log_pdf(i, v))
            .collect();
        Ok(log_sum_exp(&terms))
    }

    /// Draw `n` i.i.d. vectors: component by weight, then independent
    /// per-coordinate normals.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Vec<F>> {
        if n == 0 {
            return Vec::new();
        }
        let w: Vec<f64> = self.weights.iter().map(|w| w.as_f64()).collect();
        let pick = WeightedIndex::new(&w).expect("validated mixture weights");
        let stds: Vec<Vec<F>> = self
            .variances
            .iter()
            .map(|row| row.iter().map(|s| s.sqrt()).collect())
            .collect();
        (0..n)
            .map(|_| {
                let i = pick.sample(rng);
                self.means[i]
                    .iter()
                    .zip(&stds[i])
                    .map(|(&mu, &sd)| {
                        let z: f64 = rng.sample(StandardNormal);
                        mu + sd * F::of(z)
                    })
                    .collect()
            })
            .collect()
    }

    /// `Σ π_i μ_i`
    pub fn mixture_mean(&self) -> Vec<F> {
        let mut out = vec![F::zero(); self.dims()];
        for (&w, mu) in self.weights.iter().zip(&self.means) {
            for (o, &m) in out.iter_mut().zip(mu) {
                *o = *o + w * m;
            }
        }
        out
    }

    /// Per-coordinate variance of the mixture: `Σ π_i (σ²_i + μ_i²) − mean²`.
    pub fn mixture_variance(&self) -> Vec<F> {
        let mean = self.mixture_mean();
        let mut second = vec![F::zero(); self.dims()];
        for ((&w, mu), var) in self.weights.iter().zip(&self.means).zip(&self.variances) {
            for ((s, &m), &v) in second.iter_mut().zip(mu).zip(var) {
                *s = *s + w * (v + m * m);
            }
        }
        second
            .iter()
            .zip(&mean)
            .map(|(&s, &m)| (s - m * m).max(F::zero()))
            .collect()
    }
}

/// Free-function form of [`DiagGmm::mixture_mean`].
pub fn mixture_mean<F: Scalar>(model: &DiagGmm<F>) -> Vec<F> {
    model.mixture_mean()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmConfig {
    pub mixtures: usize,
    pub max_iters: usize,
    /// Stop once the mean log-likelihood improves by less than
    /// `rel_tol * |previous|`.
    pub rel_tol: f64,
    pub variance_floor: f64,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            mixtures: 20,
            max_iters: 200,
            rel_tol: 1e-6,
            variance_floor: 1e-4,
            seed: 0,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mixtures == 0 {
            return Err(Error::Config("mixtures must be >= 1".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be >= 1".into()));
        }
        if !(self.rel_tol > 0.0 && self.rel_tol.is_finite()) {
            return Err(Error::Config("rel_tol must be positive".into()));
        }
        if !(self.variance_floor > 0.0 && self.variance_floor.is_finite()) {
            return Err(Error::Config("variance_floor must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EmFit<F> {
    pub model: DiagGmm<F>,
    /// Mean training log-likelihood after initialization and after every
    /// EM iteration; the last entry belongs to `model`.
    pub log_likelihood: Vec<F>,
    pub iterations: usize,
    pub converged: bool,
    /// Set when fewer points than requested mixtures forced `M` down to
    /// the number of points.
    pub reduced_from: Option<usize>,
}

struct EStep<F> {
    mean_ll: F,
    resp: Vec<Vec<F>>,
}

fn e_step<F: Scalar>(model: &DiagGmm<F>, data: &[Vec<F>]) -> Result<EStep<F>> {
    let m = model.mixtures();
    let half = F::of(0.5);
    let two_pi = F::of(2.0 * PI);
    let log_w: Vec<F> = model.weights.iter().map(|w| w.ln()).collect();
    let log_norm: Vec<F> = model
        .variances
        .iter()
        .map(|var| -half * var.iter().map(|&s| (two_pi * s).ln()).sum::<F>())
        .collect();
    let inv_var: Vec<Vec<F>> = model
        .variances
        .iter()
        .map(|var| var.iter().map(|&s| s.recip()).collect())
        .collect();

    let mut total = F::zero();
    let mut resp = Vec::with_capacity(data.len());
    let mut terms = vec![F::zero(); m];
    for x in data {
        for k in 0..m {
            let mut q = F::zero();
            for ((&xi, &mu), &iv) in x.iter().zip(&model.means[k]).zip(&inv_var[k]) {
                let d = xi - mu;
                q = q + d * d * iv;
            }
            terms[k] = log_w[k] + log_norm[k] - half * q;
        }
        let lse = log_sum_exp(&terms);
        if !lse.is_finite() {
            return Err(Error::Numerical("non-finite log-likelihood in EM".into()));
        }
        total = total + lse;
        resp.push(terms.iter().map(|&t| (t - lse).exp()).collect());
    }
    Ok(EStep {
        mean_ll: total / F::of(data.len() as f64),
        resp,
    })
}

/// Weighted ML update. Components with (numerically) zero responsibility
/// keep their previous mean and variance and get zero weight.
fn m_step<F: Scalar>(
    data: &[Vec<F>],
    resp: &[Vec<F>],
    prev: &DiagGmm<F>,
    floor: F,
) -> DiagGmm<F> {
    let m = prev.mixtures();
    let dims = prev.dims();
    let mut mass = vec![F::zero(); m];
    let mut means = vec![vec![F::zero(); dims]; m];
    for (x, r) in data.iter().zip(resp) {
        for k in 0..m {
            mass[k] = mass[k] + r[k];
            for (acc, &xi) in means[k].iter_mut().zip(x) {
                *acc = *acc + r[k] * xi;
            }
        }
    }
    let tiny = F::min_positive_value().sqrt();
    let mut variances = vec![vec![F::zero(); dims]; m];
    for k in 0..m {
        if mass[k] <= tiny {
            mass[k] = F::zero();
            means[k] = prev.means[k].clone();
            variances[k] = prev.variances[k].clone();
            continue;
        }
        for acc in means[k].iter_mut() {
            *acc = *acc / mass[k];
        }
    }
    for (x, r) in data.iter().zip(resp) {
        for k in 0..m {
            if mass[k] == F::zero() {
                continue;
            }
            for ((acc, &xi), &mu) in variances[k].iter_mut().zip(x).zip(&means[k]) {
                let d = xi - mu;
                *acc = *acc + r[k] * d * d;
            }
        }
    }
    for k in 0..m {
        if mass[k] == F::zero() {
            continue;
        }
        for s in variances[k].iter_mut() {
            *s = (*s / mass[k]).max(floor);
        }
    }
    let total: F = mass.iter().copied().sum();
    let weights = mass.iter().map(|&w| w / total).collect();
    DiagGmm {
        weights,
        means,
        variances,
    }
}

/// k-means++ seeding: first center uniform, the rest with probability
/// proportional to squared distance from the nearest chosen center.
fn seed_centers<F: Scalar, R: Rng>(data: &[Vec<F>], m: usize, rng: &mut R) -> Vec<usize> {
    let n = data.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = data
        .iter()
        .map(|x| squared_distance(x, &data[chosen[0]]).as_f64())
        .collect();
    while chosen.len() < m {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 {
                    pick = Some(i);
                    if u < d {
                        break;
                    }
                    u -= d;
                }
            }
            pick.expect("positive total implies a positive entry")
        } else {
            (0..n).find(|i| !chosen.contains(i)).expect("m <= n")
        };
        chosen.push(next);
        for (d, x) in d2.iter_mut().zip(data) {
            *d = d.min(squared_distance(x, &data[next]).as_f64());
        }
    }
    chosen
}

/// Fit a diagonal GMM by EM.
pub fn fit_em<F: Scalar>(data: &[Vec<F>], cfg: &EmConfig) -> Result<EmFit<F>> {
    cfg.validate()?;
    let Some(first) = data.first() else {
        return Err(Error::EmptySet);
    };
    let dims = first.len();
    if dims == 0 {
        return Err(Error::Config("zero-dimensional data".into()));
    }
    for x in data {
        if x.len() != dims {
            return Err(Error::DimensionMismatch {
                expected: dims,
                found: x.len(),
            });
        }
        check_finite(x)?;
    }
    let n = data.len();
    let m = cfg.mixtures.min(n);
    let reduced_from = (m < cfg.mixtures).then_some(cfg.mixtures);
    if let Some(req) = reduced_from {
        log::warn!("EM: {n} points for {req} mixtures; using {m}");
    }
    let floor = F::of(cfg.variance_floor);

    let mut rng = stream_rng(cfg.seed, stream::INIT);
    let centers = seed_centers(data, m, &mut rng);

    // Fallback parameters for clusters left empty by the assignment pass.
    let inv_n = F::of(n as f64).recip();
    let mut global_mean = vec![F::zero(); dims];
    for x in data {
        for (g, &xi) in global_mean.iter_mut().zip(x) {
            *g = *g + xi * inv_n;
        }
    }
    let mut global_var = vec![F::zero(); dims];
    for x in data {
        for ((g, &xi), &mu) in global_var.iter_mut().zip(x).zip(&global_mean) {
            *g = *g + (xi - mu) * (xi - mu) * inv_n;
        }
    }
    let global_var: Vec<F> = global_var.into_iter().map(|s| s.max(floor)).collect();
    let fallback = DiagGmm {
        weights: vec![F::of(m as f64).recip(); m],
        means: centers.iter().map(|&c| data[c].clone()).collect(),
        variances: vec![global_var; m],
    };

    let hard: Vec<Vec<F>> = data
        .iter()
        .map(|x| {
            let best = (0..m)
                .map(|k| squared_distance(x, &fallback.means[k]))
                .enumerate()
                .fold((0, F::infinity()), |best, (k, d)| if d < best.1 { (k, d) } else { best })
                .0;
            (0..m)
                .map(|k| if k == best { F::one() } else { F::zero() })
                .collect()
        })
        .collect();
    let mut model = m_step(data, &hard, &fallback, floor);
    let mut step = e_step(&model, data)?;
    let mut log_likelihood = vec![step.mean_ll];
    let rel_tol = F::of(cfg.rel_tol);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        iterations += 1;
        let prev = step.mean_ll;
        model = m_step(data, &step.resp, &model, floor);
        step = e_step(&model, data)?;
        log_likelihood.push(step.mean_ll);
        if step.mean_ll - prev <= rel_tol * prev.abs() {
            converged = true;
            break;
        }
    }
    Ok(EmFit {
        model,
        log_likelihood,
        iterations,
        converged,
        reduced_from,
    })
}

/// Per-class mixtures sharing one dimensionality, keyed by unique label.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmBank<F> {
    dims: usize,
    entries: IndexMap<String, DiagGmm<F>>,
}

#[derive(Serialize, Deserialize)]
struct BankFile {
    format: String,
    version: u32,
    dims: usize,
    classes: Vec<BankClass>,
}

#[derive(Serialize, Deserialize)]
struct BankClass {
    label: String,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<Vec<f64>>,
}

fn to_f64s<F: Scalar>(xs: &[F]) -> Vec<f64> {
    xs.iter().map(|x| x.as_f64()).collect()
}

pub(crate) fn from_f64s<F: Scalar>(xs: &[f64]) -> Result<Vec<F>> {
    xs.iter()
        .map(|&x| {
            F::from_f64(x)
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Schema(format!("value {x} not representable")))
        })
        .collect()
}

impl<F: Scalar> GmmBank<F> {
    pub fn new(dims: usize) -> Self {
        Self {
            dims,
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, label: impl Into<String>, model: DiagGmm<F>) -> Result<()> {
        let label = label.into();
        validate_label(&label)?;
        if model.dims() != self.dims {
            return Err(Error::DimensionMismatch {
                expected: self.dims,
                found: model.dims(),
            });
        }
        if self.entries.contains_key(&label) {
            return Err(Error::DuplicateLabel(label));
        }
        self.entries.insert(label, model);
        Ok(())
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labels(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn get(&self, label: &str) -> Option<&DiagGmm<F>> {
        self.entries.get(label)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &DiagGmm<F>)> {
        self.entries.iter()
    }

    /// Mean of every stored variance entry, across classes and mixtures.
    pub fn mean_variance(&self) -> F {
        let (sum, count) = self
            .entries
            .values()
            .flat_map(|g| g.variances.iter().flatten())
            .fold((0.0f64, 0usize), |(s, c), v| (s + v.as_f64(), c + 1));
        if count == 0 {
            F::zero()
        } else {
            F::of(sum / count as f64)
        }
    }

    /// Number of stored scalars: `Σ_k M_k (1 + 2N)`.
    pub fn scalar_count(&self) -> usize {
        self.entries
            .values()
            .map(|g| g.mixtures() * (1 + 2 * self.dims))
            .sum()
    }

    pub fn to_json(&self) -> String {
        let file = BankFile {
            format: BANK_FORMAT.into(),
            version: BANK_VERSION,
            dims: self.dims,
            classes: self
                .entries
                .iter()
                .map(|(label, g)| BankClass {
                    label: label.clone(),
                    weights: to_f64s(&g.weights),
                    means: g.means.iter().map(|m| to_f64s(m)).collect(),
                    variances: g.variances.iter().map(|v| to_f64s(v)).collect(),
                })
                .collect(),
        };
        let mut out = serde_json::to_string(&file).expect("bank serializes");
        out.push('\n');
        out
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: BankFile =
            serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        if file.format != BANK_FORMAT {
            return Err(Error::Schema(format!("unexpected format `{}`", file.format)));
        }
        if file.version != BANK_VERSION {
            return Err(Error::Schema(format!("unsupported version {}", file.version)));
        }
        let mut bank = Self::new(file.dims);
        for class in file.classes {
            let model = DiagGmm::new(
                from_f64s(&class.weights)?,
                class
                    .means
                    .iter()
                    .map(|m| from_f64s(m))
                    .collect::<Result<_>>()?,
                class
                    .variances
                    .iter()
                    .map(|v| from_f64s(v))
                    .collect::<Result<_>>()?,
            )?;
            bank.insert(class.label, model)?;
        }
        Ok(bank)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

/// Seed used for one class inside [`fit_bank`].
pub fn class_seed(seed: u64, label: &str) -> u64 {
    seed ^ label_hash(label)
}

/// Fit one mixture per label, in parallel, each with its own derived seed.
pub fn fit_bank<F: Scalar>(pools: &LabelPools<F>, cfg: &EmConfig) -> Result<GmmBank<F>> {
    cfg.validate()?;
    let Some(dims) = pools.values().flatten().next().map(Vec::len) else {
        return Err(Error::EmptySet);
    };
    let jobs: Vec<(&String, &Vec<Vec<F>>)> = pools.iter().collect();
    let fits: Vec<Result<DiagGmm<F>>> = jobs
        .par_iter()
        .map(|(label, data)| {
            let class_cfg = EmConfig {
                seed: class_seed(cfg.seed, label),
                ..*cfg
            };
            fit_em(data, &class_cfg).map(|f| f.model)
        })
        .collect();
    let mut bank = GmmBank::new(dims);
    for ((label, _), fit) in jobs.into_iter().zip(fits) {
        bank.insert(label.clone(), fit?)?;
    }
    Ok(bank)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn single_component_closed_form() {
        let data = vec![vec![0.0, 0.0], vec![2.0, 2.0]];
        let cfg = EmConfig {
            mixtures: 1,
            ..Default::default()
        };
        let fit = fit_em(&data, &cfg).unwrap();
        assert_eq!(fit.model.weights(), &[1.0]);
        assert_relative_eq!(fit.model.means()[0][0], 1.0, epsilon = 1e-15);
        assert_relative_eq!(fit.model.means()[0][1], 1.0, epsilon = 1e-15);
        assert_relative_eq!(fit.model.variances()[0][0], 1.0, epsilon = 1e-15);
        assert_relative_eq!(fit.model.variances()[0][1], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn single_point_hits_variance_floor() {
        let cfg = EmConfig {
            mixtures: 1,
            ..Default::default()
        };
        let fit = fit_em(&[vec![3.0]], &cfg).unwrap();
        assert_eq!(fit.model.means()[0], vec![3.0]);
        assert_eq!(fit.model.variances()[0], vec![1e-4]);
    }

    #[test]
    fn too_few_points_shrinks_mixture_count() {
        let data = vec![vec![0.0], vec![1.0], vec![5.0]];
        let fit = fit_em(&data, &EmConfig::default()).unwrap();
        assert_eq!(fit.model.mixtures(), 3);
        assert_eq!(fit.reduced_from, Some(20));
    }

    #[test]
    fn duplicate_points_leave_components_empty_but_valid() {
        let data = vec![vec![1.0, 1.0]; 10];
        let cfg = EmConfig {
            mixtures: 3,
            ..Default::default()
        };
        let fit = fit_em(&data, &cfg).unwrap();
        let total: f64 = fit.model.weights().iter().sum();
        assert_relative_eq!(total, 1.0, epsilon = 1e-12);
        assert_relative_eq!(fit.model.log_pdf(&[1.0, 1.0]).unwrap(), fit.log_likelihood.last().copied().unwrap(), epsilon = 1e-9);
    }

    #[test]
    fn empty_data_is_an_error() {
        assert!(matches!(
            fit_em::<f64>(&[], &EmConfig::default()),
            Err(Error::EmptySet)
        ));
    }

    #[test]
    fn log_pdf_at_mode() {
        let g = DiagGmm::new(vec![1.0], vec![vec![0.0, 0.0]], vec![vec![1.0, 1.0]]).unwrap();
        assert_relative_eq!(
            g.log_pdf(&[0.0, 0.0]).unwrap(),
            -(2.0 * PI).ln(),
            epsilon = 1e-12
        );
        let twin = DiagGmm::new(
            vec![0.5, 0.5],
            vec![vec![0.0, 0.0]; 2],
            vec![vec![1.0, 1.0]; 2],
        )
        .unwrap();
        for v in [[0.0, 0.0], [1.5, -2.0]] {
            assert_relative_eq!(
                twin.log_pdf(&v).unwrap(),
                g.log_pdf(&v).unwrap(),
                epsilon = 1e-14
            );
        }
        assert!(g.log_pdf(&[0.0]).is_err());
    }

    #[test]
    fn log_pdf_survives_far_tails() {
        let g = DiagGmm::<f64>::new(vec![0.5, 0.5], vec![vec![0.0], vec![1.0]], vec![vec![1e-4], vec![1e-4]]).unwrap();
        let lp = g.log_pdf(&[0.3]).unwrap();
        assert!(lp.is_finite());
        // Far point: both components underflow in linear space.
        assert!(g.log_pdf(&[-2.0]).unwrap().is_finite());
        assert!(lp > g.log_pdf(&[-2.0]).unwrap());
    }

    #[test]
    fn construction_rejects_invalid() {
        assert!(DiagGmm::new(vec![0.5, 0.4], vec![vec![0.0]; 2], vec![vec![1.0]; 2]).is_err());
        assert!(DiagGmm::new(vec![1.0], vec![vec![0.0]], vec![vec![0.0]]).is_err());
        assert!(DiagGmm::new(vec![1.0], vec![vec![f64::NAN]], vec![vec![1.0]]).is_err());
        assert!(DiagGmm::<f64>::new(vec![], vec![], vec![]).is_err());
        assert!(DiagGmm::new(vec![1.0], vec![vec![0.0, 1.0]], vec![vec![1.0]]).is_err());
    }

    #[test]
    fn mixture_mean_cases() {
        let g = DiagGmm::new(vec![1.0], vec![vec![3.0, -1.0]], vec![vec![1.0, 1.0]]).unwrap();
        assert_eq!(mixture_mean(&g), vec![3.0, -1.0]);
        let g = DiagGmm::new(
            vec![0.5, 0.5],
            vec![vec![0.0, 0.0], vec![2.0, 2.0]],
            vec![vec![1.0, 1.0]; 2],
        )
        .unwrap();
        assert_eq!(mixture_mean(&g), vec![1.0, 1.0]);
        // Law of total variance: 1 + 1 (spread of means around 1).
        assert_eq!(g.mixture_variance(), vec![2.0, 2.0]);
    }

    #[test]
    fn sampling_near_degenerate_and_empty() {
        let g = DiagGmm::<f64>::new(vec![1.0], vec![vec![5.0, 5.0]], vec![vec![1e-4, 1e-4]]).unwrap();
        let mut rng = stream_rng(1, 0);
        for s in g.sample(10, &mut rng) {
            for x in s {
                assert!((x - 5.0).abs() < 5.0 * 1e-2);
            }
        }
        assert!(g.sample(0, &mut rng).is_empty());
    }

    #[test]
    fn bank_rejects_duplicates_and_dim_mismatch() {
        let g = DiagGmm::new(vec![1.0], vec![vec![0.0]], vec![vec![1.0]]).unwrap();
        let mut bank = GmmBank::new(1);
        bank.insert("a", g.clone()).unwrap();
        assert!(matches!(bank.insert("a", g), Err(Error::DuplicateLabel(_))));
        let g2 = DiagGmm::new(vec![1.0], vec![vec![0.0, 0.0]], vec![vec![1.0, 1.0]]).unwrap();
        assert!(bank.insert("b", g2).is_err());
    }

    #[test]
    fn bank_json_schema_checks() {
        let ok = r#"{"format":"lsne-gmm-bank","version":1,"dims":1,"classes":[{"label":"a","weights":[1.0],"means":[[0.5]],"variances":[[2.0]]}]}"#;
        let bank = GmmBank::<f64>::from_json(ok).unwrap();
        assert_eq!(bank.get("a").unwrap().means()[0], vec![0.5]);
        for bad in [
            ok.replace("lsne-gmm-bank", "other"),
            ok.replace("\"version\":1", "\"version\":2"),
            ok.replace("[[2.0]]", "[[-2.0]]"),
            ok.replace("[1.0]", "[0.7]"),
            ok.replace("\"dims\":1", "\"dims\":2"),
            "{".to_string(),
        ] {
            assert!(GmmBank::<f64>::from_json(&bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn footprint_is_m_k_n() {
        let mut bank = GmmBank::new(4);
        for label in ["a", "b", "c"] {
            let g = DiagGmm::new(vec![0.5, 0.5], vec![vec![0.0; 4]; 2], vec![vec![1.0; 4]; 2]).unwrap();
            bank.insert(label, g).unwrap();
        }
        assert_eq!(bank.scalar_count(), 3 * 2 * (1 + 2 * 4));
    }
}
