//! Texts as time series: spectral alignment analysis between a numerical
//! series and its per-timestamp text embeddings, the 1-D Wasserstein
//! alignment score, and a training wrapper that feeds projected text
//! embeddings to any forecaster or imputer as extra channels.

pub mod data;
pub mod embedding_io;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod models;
pub mod nn;
pub(crate) mod rng;
pub mod spectral;
pub mod tats;
pub mod transport;

pub use data::{
    chronological_split, generate_mask, make_impute_windows, make_windows, BinaryMask, EmbeddingSequence, ImputeWindow,
    MultimodalDataset, Split, SplitKind, TimeSeries, WindowSample,
};
pub use error::{Error, Result};
pub use experiment::{
    impute_series, load_csv, make_synthetic_hidden_driver, run_experiment, ExperimentConfig, Mode, ResultsDocument,
    Task,
};
pub use metrics::{evaluate, promotion, EvalReport};
pub use models::{BackboneConfig, ChannelMixing, ForecastModel, ForecastShape, ImputeModel};
pub use spectral::{analyze_ctr, magnitude_spectrum, CtrConfig, CtrReport, Spectrum};
pub use tats::{
    train_forecast, train_impute, AugmentedForecaster, AugmentedImputer, LossSpace, MlpProjector, TatsConfig,
    TrainConfig, TrainHistory,
};
pub use transport::{
    shuffle_ratio, tt_wasserstein, wasserstein_1d, NormalizedSpectrum, ShuffleReport, TransportConfig,
};
