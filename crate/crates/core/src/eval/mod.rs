//! Evaluation: feature extractor, metrics, attribute judges and protocols.

pub mod attr_classifier;
pub mod extractor;
pub mod metrics;
pub mod protocol;

pub use attr_classifier::{train_attribute_classifier, AttributeClassifier, AttributeClassifierConfig};
pub use extractor::{train_feature_extractor, FeatureExtractor, FeatureExtractorConfig};
pub use metrics::{diversity, fid, metrics, mm_dist, multimodality, r_precision, MetricReport, MetricSummary};
pub use protocol::{
    attribute_control_protocol, evaluate, export_features, generators, judges, AttributeJudge, ControlMode, EvalConfig,
    MotionGenerator, ProtocolReport,
};
