//! Deterministic simulator for model-heterogeneous personalized federated
//! learning with adaptive feature mixing (pFedAFM).
//!
//! Every client owns a structurally different local model split into an
//! extractor and a linear header. A small homogeneous extractor is shared and
//! aggregated by the server; each client blends the two representations with
//! a trainable per-dimension weight vector and trains in two alternating
//! phases. Baselines (Standalone, FedAvg, LG-FedAvg), an end-to-end ablation,
//! non-IID partitioners and the usual accuracy/communication/FLOP accounting
//! are included.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod protocol;
pub mod rng;
pub mod runner;
pub mod tensor;
pub mod zoo;

pub use autodiff::{cross_entropy, sgd_step, Activation, DenseLayer, LayeredModel, Parameter, Parameterized, Tape};
pub use config::{Algorithm, ExperimentConfig};
pub use error::{Error, Result};
pub use protocol::{run_experiment, ExperimentResult, RoundRecord};
pub use tensor::Tensor;
pub use zoo::{
    build_homo_extractor, build_zoo_model, mix_features, mixed_forward, param_count, HomoExtractor, MixVector,
    MixedModel, SplitModel,
};
