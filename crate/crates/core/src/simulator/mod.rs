//! Desk-scale stand-in for a frozen pre-trained model with per-task adapters.

pub mod classifier;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod training;
pub mod world;

pub use classifier::{align_classifier, ClassStats, PrototypeClassifier};
pub use metrics::AccuracyMatrix;
pub use model::{adapter_forward, Adapter, Backbone};
pub use pipeline::{evaluate_stream, evaluate_trained, train_stream, EvalResult, EvalSettings, Method, TrainedStream};
pub use training::{train_adapter, TrainSettings};
pub use world::SyntheticWorld;
