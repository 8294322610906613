//! Gradient-feature anomaly detection for small image classifiers.
//!
//! A classifier is trained, perturbed and out-of-distribution inputs are
//! generated, and a small detector learns to separate inputs by the
//! per-layer gradient norms a confounding all-ones label induces.

pub mod attacks;
pub mod autodiff;
pub mod container;
pub mod data;
pub mod detector;
pub mod experiment;
pub mod features;
pub mod gradfeat;
pub mod metrics;
pub mod nn;
pub mod seed;
pub mod tensor;

pub use attacks::{AttackConfig, AttackKind, AttackResult};
pub use data::{Dataset, OodKind, SourceKind};
pub use detector::{DetectionSet, DetectorConfig, DetectorMlp};
pub use experiment::{ExperimentConfig, ExperimentError, ExperimentOutput, LayerComparison};
pub use gradfeat::{ConfoundingLabel, FeatureMode, FeatureTable, LabelKind};
pub use metrics::{MetricReport, Metrics, ScoredSample};
pub use nn::{ArchSpec, Classifier, TrainConfig};
pub use tensor::Tensor;
