//! Low-shot network expansion under hard distillation.
//!
//! A base classifier is grown by new rows (and optionally new hidden
//! units) for novel classes while every original parameter stays frozen.
//! Base classes are represented during expansion by per-class diagonal
//! Gaussian mixtures instead of stored training data.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the bottom of this file name the common instantiations.

pub mod baselines;
pub mod bench;
pub mod error;
pub mod expand;
pub mod features;
pub mod gmm;
pub mod model;
pub mod net;
pub mod optim;
pub mod rng;
pub mod scalar;

pub use baselines::{
    kl_divergence, ncm_build, ncm_classify, pknn_build, pknn_classify, soft_dis_train, PrototypeSet, SoftDisConfig,
};
pub use bench::{
    evaluate, gen_scenario, gmm_fidelity, run_bench, BenchConfig, BenchReport, Evaluation, FidelityConfig, Method, Scenario,
    ScenarioSpec, TrialResult,
};
pub use error::{Error, Result};
pub use expand::{augment, expand_deep, expand_head, make_batch, train_expansion, ExpandedModel};
pub use features::{load_features, save_features, FeatureSet, LabelPools, Record};
pub use gmm::{fit_bank, fit_em, DiagGmm, EmConfig, EmFit, GmmBank};
pub use model::{Classifier, Network};
pub use net::{train_base, train_head, Batch, Linear, SoftmaxHead, TwoLayerNet};
pub use optim::{sgd_step, MomentumRule, OptimizerState, TrainConfig};
pub use scalar::Scalar;

pub type FeatureSetF64 = FeatureSet<f64>;
pub type DiagGmmF64 = DiagGmm<f64>;
pub type GmmBankF64 = GmmBank<f64>;
pub type SoftmaxHeadF64 = SoftmaxHead<f64>;
pub type TwoLayerNetF64 = TwoLayerNet<f64>;
pub type NetworkF64 = Network<f64>;
pub type PrototypeSetF64 = PrototypeSet<f64>;

pub type FeatureSetF32 = FeatureSet<f32>;
pub type DiagGmmF32 = DiagGmm<f32>;
pub type GmmBankF32 = GmmBank<f32>;
pub type SoftmaxHeadF32 = SoftmaxHead<f32>;
pub type TwoLayerNetF32 = TwoLayerNet<f32>;
pub type NetworkF32 = Network<f32>;
pub type PrototypeSetF32 = PrototypeSet<f32>;
