//! Synthetic scenarios and the evaluation harness: per-method, per-shot
//! error tables averaged over seeded trials, plus the GMM-fidelity study.
//!
//! The harness runs in `f64`; the generic core is instantiated once here.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;
use rand::seq::index::sample as sample_indices;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::baselines::{ncm_build, pknn_build, soft_dis_train, PrototypeSet, SoftDisConfig};
use crate::error::{Error, Result};
use crate::expand::{train_expansion, ExpandedModel};
use crate::features::{FeatureSet, LabelPools};
use crate::gmm::{fit_bank, DiagGmm, EmConfig, GmmBank};
use crate::model::{Classifier, Network};
use crate::net::{train_base, train_head, SoftmaxHead, TwoLayerNet};
use crate::optim::TrainConfig;
use crate::rng::{derive_seed, stream, stream_rng, Rng};
use crate::scalar::squared_distance;

const PLACEMENT_RETRIES: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    /// 1: generic novel classes, 2: novel classes close to each other,
    /// 3: each novel class close to one base class.
    pub scenario: u8,
    pub dims: usize,
    pub base_count: usize,
    pub novel_count: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub class_mixtures: usize,
    /// Minimum distance between class means.
    pub separation: f64,
    /// Scenario 2: every pair of novel means lies within this distance.
    pub novel_novel_gap: f64,
    /// Scenario 3: novel mean `j` lies at this distance from base mean `j`.
    pub novel_base_gap: f64,
    /// Per-coordinate standard deviation inside one mixture component.
    pub within_std: f64,
    /// Per-coordinate standard deviation of component centres around the
    /// class mean.
    pub component_spread: f64,
    pub seed: u64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            scenario: 1,
            dims: 64,
            base_count: 5,
            novel_count: 2,
            train_per_class: 1000,
            test_per_class: 250,
            class_mixtures: 3,
            separation: 8.0,
            novel_novel_gap: 2.0,
            novel_base_gap: 2.0,
            within_std: 0.3,
            component_spread: 0.15,
            seed: 0,
        }
    }
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(1..=3).contains(&self.scenario) {
            return bad("scenario must be 1, 2 or 3");
        }
        if self.dims == 0 {
            return bad("dims must be >= 1");
        }
        if self.base_count == 0 || self.novel_count == 0 {
            return bad("need at least one base and one novel class");
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return bad("per-class sample counts must be >= 1");
        }
        if self.class_mixtures == 0 {
            return bad("class_mixtures must be >= 1");
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return bad("separation must be positive");
        }
        for (name, gap) in [("novel_novel_gap", self.novel_novel_gap), ("novel_base_gap", self.novel_base_gap)] {
            if !(gap >= 0.0 && gap.is_finite()) {
                return Err(Error::Config(format!("{name} must be >= 0")));
            }
        }
        if !(self.within_std > 0.0 && self.within_std.is_finite()) {
            return bad("within_std must be positive");
        }
        if !(self.component_spread >= 0.0 && self.component_spread.is_finite()) {
            return bad("component_spread must be >= 0");
        }
        if self.scenario == 3 && self.novel_count > self.base_count {
            return Err(Error::Infeasible(format!(
                "scenario 3 pairs each novel class with a distinct base class, but novel_count {} > base_count {}",
                self.novel_count, self.base_count
            )));
        }
        Ok(())
    }

    pub fn base_labels(&self) -> Vec<String> {
        (0..self.base_count).map(|i| format!("base{i}")).collect()
    }

    pub fn novel_labels(&self) -> Vec<String> {
        (0..self.novel_count).map(|i| format!("novel{i}")).collect()
    }
}

/// Generated data plus the ground truth it came from.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub train: FeatureSet<f64>,
    pub test: FeatureSet<f64>,
    pub base_labels: Vec<String>,
    pub novel_labels: Vec<String>,
    /// Mixture mean of each class, base classes first.
    pub class_means: Vec<Vec<f64>>,
    pub generators: Vec<DiagGmm<f64>>,
}

fn gaussian(dims: usize, sd: f64, rng: &mut Rng) -> Vec<f64> {
    (0..dims).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit_vector(dims: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let v = gaussian(dims, 1.0, rng);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn offset(anchor: &[f64], dir: &[f64], radius: f64) -> Vec<f64> {
    anchor.iter().zip(dir).map(|(a, d)| a + radius * d).collect()
}

/// Draw a point at least `min_dist` from every point in `placed`. The
/// sampling scale starts near `min_dist` and widens slowly while draws
/// keep failing, so low-dimensional specs stay feasible.
fn place_far(placed: &[Vec<f64>], min_dist: f64, dims: usize, rng: &mut Rng, what: &str) -> Result<Vec<f64>> {
    let mut sd = 1.5 * min_dist / (2.0 * dims as f64).sqrt();
    let min_sq = min_dist * min_dist;
    for attempt in 0..PLACEMENT_RETRIES {
        if attempt > 0 && attempt % 100 == 0 {
            sd *= 1.05;
        }
        let v = gaussian(dims, sd, rng);
        if placed.iter().all(|p| squared_distance(p, &v) >= min_sq) {
            return Ok(v);
        }
    }
    Err(Error::Infeasible(format!(
        "{what}: no point at distance >= {min_dist} from {} placed means after {PLACEMENT_RETRIES} draws",
        placed.len()
    )))
}

fn place_means(spec: &ScenarioSpec, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
    let n = spec.dims;
    let mut means = Vec::with_capacity(spec.base_count + spec.novel_count);
    for _ in 0..spec.base_count {
        means.push(place_far(&means, spec.separation, n, rng, "base mean")?);
    }
    match spec.scenario {
        1 => {
            for _ in 0..spec.novel_count {
                means.push(place_far(&means, spec.separation, n, rng, "novel mean")?);
            }
        }
        2 => {
            // Novel means sit on a sphere of radius gap/2 around a shared
            // centre, which keeps every pair within the gap.
            let radius = spec.novel_novel_gap / 2.0;
            let centre = place_far(&means, spec.separation + radius, n, rng, "novel cluster centre")?;
            for _ in 0..spec.novel_count {
                means.push(offset(&centre, &unit_vector(n, rng), radius));
            }
        }
        _ => {
            let gap_sq = spec.novel_base_gap * spec.novel_base_gap;
            for j in 0..spec.novel_count {
                let mut placed = None;
                for _ in 0..PLACEMENT_RETRIES {
                    let v = offset(&means[j], &unit_vector(n, rng), spec.novel_base_gap);
                    let near = means[..spec.base_count]
                        .iter()
                        .filter(|b| squared_distance(b, &v) <= gap_sq * (1.0 + 1e-12))
                        .count();
                    if near == 1 {
                        placed = Some(v);
                        break;
                    }
                }
                means.push(placed.ok_or_else(|| {
                    Error::Infeasible(format!(
                        "novel mean {j}: could not place it within {} of exactly one base mean",
                        spec.novel_base_gap
                    ))
                })?);
            }
        }
    }
    Ok(means)
}

fn class_generator(spec: &ScenarioSpec, mean: &[f64], rng: &mut Rng) -> Result<DiagGmm<f64>> {
    let m = spec.class_mixtures;
    let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.5..1.5)).collect();
    let total: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
    let mut offsets: Vec<Vec<f64>> = (0..m).map(|_| gaussian(spec.dims, spec.component_spread, rng)).collect();
    // Centre the offsets so the mixture mean is exactly the class mean.
    for d in 0..spec.dims {
        let shift: f64 = offsets.iter().zip(&weights).map(|(o, w)| w * o[d]).sum();
        for o in &mut offsets {
            o[d] -= shift;
        }
    }
    let means = offsets
        .iter()
        .map(|o| mean.iter().zip(o).map(|(a, b)| a + b).collect())
        .collect();
    let var = spec.within_std * spec.within_std;
    let variances = (0..m)
        .map(|_| (0..spec.dims).map(|_| var * rng.random_range(0.5..1.5)).collect())
        .collect();
    DiagGmm::new(weights, means, variances)
}

/// Generate train and test sets for `spec`. Records are grouped by class,
/// base classes first.
pub fn gen_scenario(spec: &ScenarioSpec) -> Result<Scenario> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, stream::SCENARIO);
    let class_means = place_means(spec, &mut rng)?;
    let generators = class_means
        .iter()
        .map(|m| class_generator(spec, m, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let base_labels = spec.base_labels();
    let novel_labels = spec.novel_labels();
    let labels: Vec<&String> = base_labels.iter().chain(&novel_labels).collect();
    let mut train = FeatureSet::new(spec.dims)?;
    let mut test = FeatureSet::new(spec.dims)?;
    for (label, g) in labels.iter().zip(&generators) {
        for v in g.sample(spec.train_per_class, &mut rng) {
            train.push(label.as_str(), v)?;
        }
    }
    for (label, g) in labels.iter().zip(&generators) {
        for v in g.sample(spec.test_per_class, &mut rng) {
            test.push(label.as_str(), v)?;
        }
    }
    Ok(Scenario {
        train,
        test,
        base_labels,
        novel_labels,
        class_means,
        generators,
    })
}

/// Error counts of one classifier on one test set, split by base and
/// novel records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Evaluation {
    pub base_total: usize,
    pub base_wrong: usize,
    pub novel_total: usize,
    pub novel_wrong: usize,
}

fn percent(wrong: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * wrong as f64 / total as f64
    }
}

impl Evaluation {
    /// Top-1 error over all records, in percent (0 for an empty set).
    pub fn overall_err(&self) -> f64 {
        percent(self.base_wrong + self.novel_wrong, self.base_total + self.novel_total)
    }

    pub fn base_err(&self) -> f64 {
        percent(self.base_wrong, self.base_total)
    }

    pub fn novel_err(&self) -> f64 {
        percent(self.novel_wrong, self.novel_total)
    }
}

/// Top-1 errors of `model` on `test`, overall and split by class group.
pub fn evaluate<C: Classifier<f64> + ?Sized>(
    model: &C,
    test: &FeatureSet<f64>,
    base_labels: &[String],
    novel_labels: &[String],
) -> Result<Evaluation> {
    let known = model.class_labels();
    let mut out = Evaluation::default();
    for r in test.records() {
        let is_base = base_labels.contains(&r.label);
        if !is_base && !novel_labels.contains(&r.label) {
            return Err(Error::UnknownLabel(r.label.clone()));
        }
        if !known.contains(&r.label) {
            return Err(Error::Config(format!("model cannot predict test label `{}`", r.label)));
        }
        let wrong = model.classify(&r.values)? != r.label;
        if is_base {
            out.base_total += 1;
            out.base_wrong += usize::from(wrong);
        } else {
            out.novel_total += 1;
            out.novel_wrong += usize::from(wrong);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    GenLsne,
    GenLsneGradDrop,
    SoftDis,
    SoftDisGradDrop,
    Ncm,
    Pknn,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::GenLsne,
        Method::GenLsneGradDrop,
        Method::SoftDis,
        Method::SoftDisGradDrop,
        Method::Ncm,
        Method::Pknn,
    ];

    pub fn token(self) -> &'static str {
        match self {
            Method::GenLsne => "gen-lsne",
            Method::GenLsneGradDrop => "gen-lsne-graddrop",
            Method::SoftDis => "soft-dis",
            Method::SoftDisGradDrop => "soft-dis-graddrop",
            Method::Ncm => "ncm",
            Method::Pknn => "pknn",
        }
    }

    /// Parse a comma-separated token list.
    pub fn parse_list(s: &str) -> Result<Vec<Method>> {
        s.split(',').map(|t| t.trim().parse()).collect()
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.token() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub methods: Vec<Method>,
    pub sample_counts: Vec<usize>,
    pub trials: usize,
    /// Hidden width of the base network.
    pub hidden: usize,
    /// Extra hidden units added by gen-lsne; 0 expands FC2 only.
    pub new_features: usize,
    /// Mixtures per base class in the GMM bank.
    pub mixtures: usize,
    pub base_train: TrainConfig,
    /// Optimizer settings shared by gen-lsne and soft-dis. The graddrop
    /// variants use `grad_dropout` (or the default p when unset); the plain
    /// variants always run unmasked.
    pub expand: TrainConfig,
    pub lambda: f64,
    pub temperature: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let dis = SoftDisConfig::default();
        Self {
            methods: Method::ALL.to_vec(),
            sample_counts: vec![1, 3, 5, 9, 15],
            trials: 5,
            hidden: 64,
            new_features: 0,
            mixtures: EmConfig::default().mixtures,
            base_train: TrainConfig::base(),
            expand: TrainConfig::default(),
            lambda: dis.lambda,
            temperature: dis.temperature,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("no methods requested".into()));
        }
        if self.sample_counts.is_empty() || self.sample_counts.contains(&0) {
            return Err(Error::Config("sample counts must be a non-empty list of positive counts".into()));
        }
        if self.trials == 0 {
            return Err(Error::Config("trials must be >= 1".into()));
        }
        if self.hidden == 0 || self.mixtures == 0 {
            return Err(Error::Config("hidden and mixtures must be >= 1".into()));
        }
        self.base_train.validate()?;
        SoftDisConfig {
            train: self.expand.clone(),
            lambda: self.lambda,
            temperature: self.temperature,
        }
        .validate()
    }
}

mod salt {
    pub const BASE: u64 = 1;
    pub const GMM: u64 = 2;
    pub const NOVEL: u64 = 3;
    pub const METHOD: u64 = 4;
}

/// Everything a trial shares across methods and shot counts.
#[derive(Debug, Clone)]
pub struct PreparedTrial {
    pub seed: u64,
    pub scenario: Scenario,
    pub base_net: TwoLayerNet<f64>,
    pub bank: GmmBank<f64>,
    /// Base-model errors on the base-class test records.
    pub base_eval: Evaluation,
}

pub fn trial_seed(master: u64, trial: usize) -> u64 {
    master.wrapping_add(trial as u64)
}

/// Seed of the base network's training run within a trial.
pub fn base_seed(trial_seed: u64) -> u64 {
    derive_seed(trial_seed, salt::BASE)
}

/// Seed of the trial's GMM bank fit.
pub fn gmm_seed(trial_seed: u64) -> u64 {
    derive_seed(trial_seed, salt::GMM)
}

/// Generate the trial's scenario, train the base network on base classes
/// and fit the GMM bank on the same data.
pub fn prepare_trial(spec: &ScenarioSpec, cfg: &BenchConfig, seed: u64) -> Result<PreparedTrial> {
    let scenario = gen_scenario(&ScenarioSpec { seed, ..spec.clone() })?;
    let (base_train, _) = scenario.train.split_by_label(&scenario.base_labels)?;
    let (base_test, _) = scenario.test.split_by_label(&scenario.base_labels)?;
    let base_cfg = TrainConfig {
        seed: base_seed(seed),
        ..cfg.base_train.clone()
    };
    let base_net = train_base(&base_train, cfg.hidden, &scenario.base_labels, &base_cfg)?;
    let em = EmConfig {
        mixtures: cfg.mixtures,
        seed: gmm_seed(seed),
        ..EmConfig::default()
    };
    let bank = fit_bank(&base_train.pools(), &em)?;
    let base_eval = evaluate(&base_net, &base_test, &scenario.base_labels, &[])?;
    Ok(PreparedTrial {
        seed,
        scenario,
        base_net,
        bank,
        base_eval,
    })
}

/// Pick `n` samples per novel class without replacement from the training
/// pools.
pub fn draw_novel(train: &FeatureSet<f64>, novel_labels: &[String], n: usize, seed: u64) -> Result<LabelPools<f64>> {
    let pools = train.pools();
    let mut rng = stream_rng(seed, stream::SAMPLE);
    let mut out = LabelPools::new();
    for label in novel_labels {
        let pool = pools.get(label).ok_or_else(|| Error::UnknownLabel(label.clone()))?;
        if n > pool.len() {
            return Err(Error::Config(format!(
                "cannot draw {n} samples from the {} available for `{label}`",
                pool.len()
            )));
        }
        let picked = sample_indices(&mut rng, pool.len(), n).into_iter().map(|i| pool[i].clone()).collect();
        out.insert(label.clone(), picked);
    }
    Ok(out)
}

/// Seed of the novel-sample draw for `n` shots in a trial.
pub fn novel_seed(trial_seed: u64, n: usize) -> u64 {
    derive_seed(derive_seed(trial_seed, salt::NOVEL), n as u64)
}

/// Seed handed to the method's trainer for `n` shots in a trial; every
/// method shares it.
pub fn method_seed(trial_seed: u64, n: usize) -> u64 {
    derive_seed(derive_seed(trial_seed, salt::METHOD), n as u64)
}

fn with_dropout(cfg: &TrainConfig, masked: bool, seed: u64) -> TrainConfig {
    TrainConfig {
        grad_dropout: masked.then(|| cfg.grad_dropout.unwrap_or(TrainConfig::DEFAULT_GRAD_DROPOUT_P)),
        seed,
        ..cfg.clone()
    }
}

/// Output of one method: an expanded or fine-tuned network, or a
/// prototype set.
// A handful of these exist per run; boxing buys nothing.
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone, PartialEq)]
pub enum TrainedModel {
    Expanded(ExpandedModel<f64>),
    SoftDistilled(TwoLayerNet<f64>),
    Prototypes(PrototypeSet<f64>),
}

impl TrainedModel {
    /// Network JSON for trained networks, the prototype feature format
    /// otherwise.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        match self {
            TrainedModel::Expanded(m) => m.expanded.save(path),
            TrainedModel::SoftDistilled(n) => Network::TwoLayer(n.clone()).save(path),
            TrainedModel::Prototypes(p) => p.save(path),
        }
    }
}

impl Classifier<f64> for TrainedModel {
    fn classify(&self, v: &[f64]) -> Result<&str> {
        match self {
            TrainedModel::Expanded(m) => m.classify(v),
            TrainedModel::SoftDistilled(n) => n.classify(v),
            TrainedModel::Prototypes(p) => p.classify(v),
        }
    }

    fn class_labels(&self) -> Vec<String> {
        match self {
            TrainedModel::Expanded(m) => m.class_labels(),
            TrainedModel::SoftDistilled(n) => n.class_labels(),
            TrainedModel::Prototypes(p) => p.class_labels(),
        }
    }
}

/// Build and train one method from a base network, its bank and the
/// low-shot novel pool.
pub fn train_method(
    method: Method,
    base_net: &TwoLayerNet<f64>,
    bank: &GmmBank<f64>,
    novel_pool: &LabelPools<f64>,
    cfg: &BenchConfig,
    seed: u64,
) -> Result<TrainedModel> {
    let novel_labels: Vec<String> = novel_pool.keys().cloned().collect();
    Ok(match method {
        Method::Ncm => TrainedModel::Prototypes(ncm_build(bank, novel_pool)?),
        Method::Pknn => TrainedModel::Prototypes(pknn_build(bank, novel_pool)?),
        Method::GenLsne | Method::GenLsneGradDrop => {
            let train = with_dropout(&cfg.expand, method == Method::GenLsneGradDrop, seed);
            let model = if cfg.new_features == 0 {
                ExpandedModel::last_layer(Network::TwoLayer(base_net.clone()), &novel_labels, seed)?
            } else {
                ExpandedModel::deep(base_net.clone(), &novel_labels, cfg.new_features, seed)?
            };
            TrainedModel::Expanded(train_expansion(model, bank, novel_pool, &train)?)
        }
        Method::SoftDis | Method::SoftDisGradDrop => {
            let dis = SoftDisConfig {
                train: with_dropout(&cfg.expand, method == Method::SoftDisGradDrop, seed),
                lambda: cfg.lambda,
                temperature: cfg.temperature,
            };
            TrainedModel::SoftDistilled(soft_dis_train(base_net, bank, novel_pool, &dis)?)
        }
    })
}

/// [`train_method`] on a prepared trial.
pub fn run_method(
    method: Method,
    trial: &PreparedTrial,
    novel_pool: &LabelPools<f64>,
    cfg: &BenchConfig,
    seed: u64,
) -> Result<TrainedModel> {
    train_method(method, &trial.base_net, &trial.bank, novel_pool, cfg, seed)
}

/// One (method, shots, trial) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub method: Method,
    pub samples_per_novel: usize,
    pub trial: usize,
    pub eval: Evaluation,
    /// The unexpanded base network on the same trial's base test records.
    pub base_model: Evaluation,
}

/// Trial means for one (method, shots) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub method: Method,
    pub samples: usize,
    pub overall_err: f64,
    pub base_err: f64,
    pub novel_err: f64,
    /// Mean base error of the unexpanded network over the same trials.
    pub base_model_err: f64,
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub trials: Vec<TrialResult>,
}

pub const CSV_HEADER: &str = "method,samples,overall_err,base_err,novel_err,trials";

impl BenchReport {
    pub fn row(&self, method: Method, samples: usize) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.method == method && r.samples == samples)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{:.2},{:.2},{:.2},{}",
                r.method, r.samples, r.overall_err, r.base_err, r.novel_err, r.trials
            )
            .expect("writing to a String");
        }
        out
    }
}

fn run_trial(spec: &ScenarioSpec, cfg: &BenchConfig, trial: usize) -> Result<Vec<TrialResult>> {
    let seed = trial_seed(spec.seed, trial);
    let prepared = prepare_trial(spec, cfg, seed)?;
    let sc = &prepared.scenario;
    let jobs: Vec<(usize, Method)> = cfg
        .sample_counts
        .iter()
        .flat_map(|&n| cfg.methods.iter().map(move |&m| (n, m)))
        .collect();
    jobs.par_iter()
        .map(|&(n, method)| {
            let pool = draw_novel(&sc.train, &sc.novel_labels, n, novel_seed(seed, n))?;
            let model = run_method(method, &prepared, &pool, cfg, method_seed(seed, n))?;
            let eval = evaluate(&model, &sc.test, &sc.base_labels, &sc.novel_labels)?;
            Ok(TrialResult {
                method,
                samples_per_novel: n,
                trial,
                eval,
                base_model: prepared.base_eval,
            })
        })
        .collect()
}

/// Run every (method, shots) cell for `cfg.trials` trials. Trial `t` uses
/// seed `spec.seed + t`; results do not depend on thread scheduling.
pub fn run_bench(spec: &ScenarioSpec, cfg: &BenchConfig) -> Result<BenchReport> {
    spec.validate()?;
    cfg.validate()?;
    let per_trial: Vec<Vec<TrialResult>> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| run_trial(spec, cfg, t))
        .collect::<Result<_>>()?;
    let trials: Vec<TrialResult> = per_trial.into_iter().flatten().collect();

    let mut rows = Vec::new();
    for &method in &cfg.methods {
        for &n in &cfg.sample_counts {
            let cell: Vec<&TrialResult> = trials
                .iter()
                .filter(|r| r.method == method && r.samples_per_novel == n)
                .collect();
            let mean = |f: &dyn Fn(&TrialResult) -> f64| cell.iter().map(|r| f(r)).sum::<f64>() / cell.len() as f64;
            rows.push(BenchRow {
                method,
                samples: n,
                overall_err: mean(&|r| r.eval.overall_err()),
                base_err: mean(&|r| r.eval.base_err()),
                novel_err: mean(&|r| r.eval.novel_err()),
                base_model_err: mean(&|r| r.base_model.base_err()),
                trials: cell.len(),
            });
        }
    }
    Ok(BenchReport { rows, trials })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FidelityConfig {
    pub train: TrainConfig,
    /// `mixtures` is overridden per run; the other fields apply as given.
    pub em: EmConfig,
    pub seed: u64,
}

impl Default for FidelityConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::base(),
            em: EmConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FidelityReport {
    /// Test accuracy (percent) of the network trained on the real data.
    pub full_accuracy: f64,
    /// `(M, accuracy)` for networks trained only on GMM generations.
    pub rows: Vec<(usize, f64)>,
}

impl FidelityReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("mixtures,accuracy\nfull,{:.2}\n", self.full_accuracy);
        for (m, acc) in &self.rows {
            writeln!(out, "{m},{acc:.2}").expect("writing to a String");
        }
        out
    }
}

fn accuracy(net: &SoftmaxHead<f64>, test: &FeatureSet<f64>, labels: &[String]) -> Result<f64> {
    Ok(100.0 - evaluate(net, test, labels, &[])?.overall_err())
}

/// Train a softmax head on the full training set and, for each `M`, on an equally sized
/// set sampled from per-class `M`-component mixtures; report test accuracy
/// of each.
pub fn gmm_fidelity(
    train: &FeatureSet<f64>,
    test: &FeatureSet<f64>,
    mixtures: &[usize],
    cfg: &FidelityConfig,
) -> Result<FidelityReport> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::EmptySet);
    }
    let labels = train.labels();
    let pools = train.pools();
    let train_cfg = TrainConfig {
        seed: derive_seed(cfg.seed, salt::BASE),
        ..cfg.train.clone()
    };
    let full = train_head(train, &labels, &train_cfg)?;
    let full_accuracy = accuracy(&full, test, &labels)?;
    let rows = mixtures
        .par_iter()
        .map(|&m| {
            let em = EmConfig {
                mixtures: m,
                seed: derive_seed(cfg.seed, salt::GMM),
                ..cfg.em
            };
            let bank = fit_bank(&pools, &em)?;
            let mut rng = stream_rng(derive_seed(cfg.seed, m as u64), stream::SAMPLE);
            let mut generated = FeatureSet::new(train.dims())?;
            for (label, pool) in &pools {
                let g = bank.get(label).expect("bank covers every label");
                for v in g.sample(pool.len(), &mut rng) {
                    generated.push(label.as_str(), v)?;
                }
            }
            let head = train_head(&generated, &labels, &train_cfg)?;
            Ok((m, accuracy(&head, test, &labels)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FidelityReport { full_accuracy, rows })
}
