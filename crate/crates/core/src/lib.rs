//! Prompt-conditioned encoder-decoder generation of multimodal longitudinal
//! patient records, with perplexity, privacy and utility evaluation.

pub mod corruption;
pub mod generate;
pub mod grammar;
pub mod metrics;
pub mod model;
pub mod privacy;
pub mod records;
pub mod rng;
pub mod scalar;
pub mod stats;
pub mod tensor;
pub mod utility;

pub use scalar::Scalar;

pub type Model = model::ModelParams<f32>;
pub type Model64 = model::ModelParams<f64>;
pub type Matrix = tensor::Matrix<f32>;
pub type Matrix64 = tensor::Matrix<f64>;
pub type TrainOutcome = model::TrainOutcome<f32>;
pub type Predictor = utility::Predictor<f32>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Records(#[from] records::RecordsError),
    #[error(transparent)]
    Grammar(#[from] grammar::GrammarError),
    #[error(transparent)]
    Corruption(#[from] corruption::CorruptionError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Generate(#[from] generate::GenerateError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error(transparent)]
    Privacy(#[from] privacy::PrivacyError),
    #[error(transparent)]
    Utility(#[from] utility::UtilityError),
}
