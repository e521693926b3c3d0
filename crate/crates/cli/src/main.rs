//! `lsne`: scripted pipeline for low-shot expansion experiments.
//!
//! Every command takes the same `--seed` a bench trial would use and derives
//! its sub-seeds the same way, so chaining gen-data, train-base, fit-gmm,
//! expand and eval reproduces one bench cell exactly.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use lsne_core::bench::{
    base_seed, draw_novel, evaluate, gen_scenario, gmm_fidelity, gmm_seed, method_seed, novel_seed, run_bench,
    train_method, BenchConfig, Evaluation, FidelityConfig, Method, ScenarioSpec,
};
use lsne_core::{
    fit_bank, train_base, Classifier, EmConfig, Error, FeatureSet, GmmBank, MomentumRule, Network, PrototypeSet,
    TrainConfig,
};

#[derive(Parser)]
#[command(name = "lsne", version, about = "Low-shot network expansion experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scenario: train.features, test.features, labels.txt
    GenData(GenDataArgs),
    /// Train the base network on the base classes
    TrainBase(TrainBaseArgs),
    /// Fit one diagonal GMM per base class
    FitGmm(FitGmmArgs),
    /// Add novel classes to a base network (or build a prototype baseline)
    Expand(ExpandArgs),
    /// Report overall, base and novel top-1 error on a test set
    Eval(EvalArgs),
    /// Run the benchmark table and write CSV
    Bench(BenchArgs),
    /// Compare training on real data against training on GMM generations
    GmmFidelity(FidelityArgs),
}

#[derive(Args)]
struct ScenarioArgs {
    #[arg(long, default_value_t = 1)]
    scenario: u8,
    #[arg(long, default_value_t = 64)]
    dims: usize,
    #[arg(long, default_value_t = 5)]
    base: usize,
    #[arg(long, default_value_t = 2)]
    novel: usize,
    #[arg(long, default_value_t = 1000)]
    train_per_class: usize,
    #[arg(long, default_value_t = 250)]
    test_per_class: usize,
    #[arg(long, default_value_t = 3)]
    class_mixtures: usize,
    #[arg(long, default_value_t = 8.0)]
    separation: f64,
    #[arg(long, default_value_t = 2.0)]
    novel_novel_gap: f64,
    #[arg(long, default_value_t = 2.0)]
    novel_base_gap: f64,
    #[arg(long, default_value_t = 0.3)]
    within_std: f64,
    #[arg(long, default_value_t = 0.15)]
    component_spread: f64,
}

impl ScenarioArgs {
    fn spec(&self, seed: u64) -> ScenarioSpec {
        ScenarioSpec {
            scenario: self.scenario,
            dims: self.dims,
            base_count: self.base,
            novel_count: self.novel,
            train_per_class: self.train_per_class,
            test_per_class: self.test_per_class,
            class_mixtures: self.class_mixtures,
            separation: self.separation,
            novel_novel_gap: self.novel_novel_gap,
            novel_base_gap: self.novel_base_gap,
            within_std: self.within_std,
            component_spread: self.component_spread,
            seed,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Rule {
    #[value(name = "paper")]
    Additive,
    Conventional,
}

impl From<Rule> for MomentumRule {
    fn from(r: Rule) -> Self {
        match r {
            Rule::Additive => MomentumRule::Additive,
            Rule::Conventional => MomentumRule::Conventional,
        }
    }
}

/// Optimizer flags; unset values fall back to the command's defaults.
#[derive(Args)]
struct OptimArgs {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long, value_enum)]
    momentum_rule: Option<Rule>,
    /// Gradient-dropout keep probability p
    #[arg(long)]
    grad_dropout: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    batch_per_class: Option<usize>,
    #[arg(long)]
    aug_per_sample: Option<usize>,
    #[arg(long)]
    aug_scale: Option<f64>,
    /// Print the mean batch loss every 100 iterations
    #[arg(long)]
    verbose: bool,
}

impl OptimArgs {
    fn apply(&self, mut cfg: TrainConfig) -> TrainConfig {
        cfg.lr = self.lr.unwrap_or(cfg.lr);
        cfg.momentum = self.momentum.unwrap_or(cfg.momentum);
        if let Some(r) = self.momentum_rule {
            cfg.momentum_rule = r.into();
        }
        if self.grad_dropout.is_some() {
            cfg.grad_dropout = self.grad_dropout;
        }
        cfg.iters = self.iters.unwrap_or(cfg.iters);
        cfg.batch_per_class = self.batch_per_class.unwrap_or(cfg.batch_per_class);
        cfg.aug_per_sample = self.aug_per_sample.unwrap_or(cfg.aug_per_sample);
        cfg.aug_scale = self.aug_scale.unwrap_or(cfg.aug_scale);
        cfg.verbose |= self.verbose;
        cfg
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainBaseArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[command(flatten)]
    optim: OptimArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitGmmArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value_t = 20)]
    mixtures: usize,
    #[arg(long, default_value_t = 200)]
    max_iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Head,
    Deep,
}

#[derive(Args)]
struct ExpandArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    bank: PathBuf,
    /// Feature file holding the novel classes' training pool
    #[arg(long)]
    novel_features: PathBuf,
    /// Samples drawn per novel class
    #[arg(long)]
    samples: usize,
    #[arg(long, default_value = "gen-lsne")]
    method: String,
    #[arg(long, value_enum, default_value = "head")]
    mode: Mode,
    /// Hidden units added in deep mode
    #[arg(long, default_value_t = 0)]
    new_features: usize,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = 2.0)]
    temperature: f64,
    #[command(flatten)]
    optim: OptimArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Network JSON or prototype feature file
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    labels: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long, default_value = "gen-lsne,gen-lsne-graddrop,soft-dis,soft-dis-graddrop,ncm,pknn")]
    methods: String,
    #[arg(long, value_delimiter = ',', default_value = "1,3,5,9,15")]
    samples: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    trials: usize,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, default_value_t = 0)]
    new_features: usize,
    #[arg(long, default_value_t = 20)]
    mixtures: usize,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = 2.0)]
    temperature: f64,
    #[command(flatten)]
    optim: OptimArgs,
    /// Master seed; trial t uses seed + t
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV destination; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FidelityArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,10,20,40,60")]
    mixtures: Vec<usize>,
    #[command(flatten)]
    optim: OptimArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Infeasible(_) => 1,
            Error::Numerical(_) => 3,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

struct LabelsFile {
    base: Vec<String>,
    novel: Vec<String>,
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn read_file(path: &Path) -> CliResult<String> {
    Ok(fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?)
}

fn labels_text(base: &[String], novel: &[String]) -> String {
    let mut out = String::new();
    for l in base {
        out.push_str(&format!("base:{l}\n"));
    }
    for l in novel {
        out.push_str(&format!("novel:{l}\n"));
    }
    out
}

fn read_labels(path: &Path) -> CliResult<LabelsFile> {
    let text = read_file(path)?;
    let mut out = LabelsFile {
        base: Vec::new(),
        novel: Vec::new(),
    };
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        if let Some(l) = line.strip_prefix("base:") {
            out.base.push(l.to_string());
        } else if let Some(l) = line.strip_prefix("novel:") {
            out.novel.push(l.to_string());
        } else {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("{}: expected `base:` or `novel:` prefix", path.display()),
            }
            .into());
        }
    }
    if out.base.is_empty() {
        return Err(Error::Schema(format!("{}: no base labels", path.display())).into());
    }
    Ok(out)
}

fn base_records(set: &FeatureSet<f64>, labels: &LabelsFile) -> CliResult<FeatureSet<f64>> {
    let present = set.labels();
    if let Some(l) = labels.base.iter().find(|l| !present.contains(l)) {
        return Err(Error::UnknownLabel(l.clone()).into());
    }
    Ok(set.split_by_label(&labels.base)?.0)
}

fn gen_data(a: GenDataArgs) -> CliResult<()> {
    let spec = a.scenario.spec(a.seed);
    spec.validate()?;
    let sc = gen_scenario(&spec)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    sc.train.save(a.out.join("train.features"))?;
    sc.test.save(a.out.join("test.features"))?;
    write_file(&a.out.join("labels.txt"), &labels_text(&sc.base_labels, &sc.novel_labels))
}

fn train_base_cmd(a: TrainBaseArgs) -> CliResult<()> {
    let labels = read_labels(&a.labels)?;
    let train = base_records(&FeatureSet::load(&a.train)?, &labels)?;
    let cfg = TrainConfig {
        seed: base_seed(a.seed),
        ..a.optim.apply(TrainConfig::base())
    };
    let net = train_base(&train, a.hidden, &labels.base, &cfg)?;
    Network::TwoLayer(net).save(&a.out)?;
    Ok(())
}

fn fit_gmm(a: FitGmmArgs) -> CliResult<()> {
    let labels = read_labels(&a.labels)?;
    let train = base_records(&FeatureSet::load(&a.train)?, &labels)?;
    let cfg = EmConfig {
        mixtures: a.mixtures,
        max_iters: a.max_iters,
        seed: gmm_seed(a.seed),
        ..EmConfig::default()
    };
    fit_bank(&train.pools(), &cfg)?.save(&a.out)?;
    Ok(())
}

fn expand(a: ExpandArgs) -> CliResult<()> {
    let method: Method = a.method.parse()?;
    if a.samples == 0 {
        return Err(usage("--samples must be >= 1"));
    }
    if matches!(a.mode, Mode::Head) && a.new_features > 0 {
        return Err(usage("--new-features needs --mode deep"));
    }
    let net = match Network::<f64>::load(&a.model)? {
        Network::TwoLayer(n) => n,
        Network::Head(_) => return Err(Error::Schema("expand needs a two-layer base model".into()).into()),
    };
    let bank = GmmBank::<f64>::load(&a.bank)?;
    if bank.labels() != net.labels() {
        return Err(Error::Schema("bank labels differ from the model's labels".into()).into());
    }
    let pool_set = FeatureSet::load(&a.novel_features)?;
    let novel: Vec<String> = pool_set.labels().into_iter().filter(|l| !net.labels().contains(l)).collect();
    if novel.is_empty() {
        return Err(Error::Schema("no novel labels in --novel-features".into()).into());
    }
    let pool = draw_novel(&pool_set, &novel, a.samples, novel_seed(a.seed, a.samples))?;
    let cfg = BenchConfig {
        new_features: a.new_features,
        expand: a.optim.apply(TrainConfig::default()),
        lambda: a.lambda,
        temperature: a.temperature,
        ..BenchConfig::default()
    };
    cfg.validate()?;
    let trained = train_method(method, &net, &bank, &pool, &cfg, method_seed(a.seed, a.samples))?;
    trained.save(&a.out)?;
    Ok(())
}

fn load_classifier(path: &Path) -> CliResult<Box<dyn Classifier<f64>>> {
    let text = read_file(path)?;
    if text.trim_start().starts_with('{') {
        Ok(Box::new(Network::<f64>::from_json(&text)?))
    } else {
        Ok(Box::new(PrototypeSet::<f64>::parse(&text)?))
    }
}

fn print_eval(e: &Evaluation) {
    println!(
        "overall_err={:.2} base_err={:.2} novel_err={:.2}",
        e.overall_err(),
        e.base_err(),
        e.novel_err()
    );
}

fn eval(a: EvalArgs) -> CliResult<()> {
    let model = load_classifier(&a.model)?;
    let labels = read_labels(&a.labels)?;
    let test = FeatureSet::load(&a.test)?;
    print_eval(&evaluate(model.as_ref(), &test, &labels.base, &labels.novel)?);
    Ok(())
}

fn bench(a: BenchArgs) -> CliResult<()> {
    let spec = a.scenario.spec(a.seed);
    let cfg = BenchConfig {
        methods: Method::parse_list(&a.methods)?,
        sample_counts: a.samples,
        trials: a.trials,
        hidden: a.hidden,
        new_features: a.new_features,
        mixtures: a.mixtures,
        expand: a.optim.apply(TrainConfig::default()),
        lambda: a.lambda,
        temperature: a.temperature,
        ..BenchConfig::default()
    };
    let csv = run_bench(&spec, &cfg)?.to_csv();
    match a.out {
        Some(path) => write_file(&path, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn fidelity(a: FidelityArgs) -> CliResult<()> {
    let cfg = FidelityConfig {
        train: a.optim.apply(TrainConfig::base()),
        seed: a.seed,
        ..FidelityConfig::default()
    };
    let train = FeatureSet::load(&a.train)?;
    let test = FeatureSet::load(&a.test)?;
    let csv = gmm_fidelity(&train, &test, &a.mixtures, &cfg)?.to_csv();
    match a.out {
        Some(path) => write_file(&path, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::TrainBase(a) => train_base_cmd(a),
        Command::FitGmm(a) => fit_gmm(a),
        Command::Expand(a) => expand(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
        Command::GmmFidelity(a) => fidelity(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
