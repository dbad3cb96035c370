//! Core library for two-stream stroke detection in video.
//!
//! The crate covers the full pipeline: from-scratch differentiable tensor
//! kernels, pyramidal optical flow, dataset windowing, training, sliding
//! window inference with segment fusion, temporal-detection metrics, and a
//! synthetic annotated-video generator. All floating point work runs in
//! f64 with fixed accumulation orders, so every entry point is bitwise
//! deterministic for a given seed regardless of thread count.

pub mod dataset;
pub mod detector;
pub mod flow;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod optim;
pub mod reference;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod video_io;

pub use dataset::{DatasetError, Label, LabeledWindows, Sample, SampleBuilder, SamplingConfig};
pub use detector::{Detection, DetectorConfig, WindowScore};
pub use flow::{FlowConfig, FlowError, FlowField, GrayImage};
pub use metrics::{EvalReport, StrokeStats, VideoEval};
pub use model::{ModelConfig, ModelGrads, ModelParams};
pub use optim::{OptimState, SgdConfig};
pub use synth::SynthConfig;
pub use tensor::{ShapeError, Tensor};
pub use trainer::{TrainConfig, TrainHistory, TrainOutcome};
pub use video_io::{AnnotationSet, FrameSequence, Segment, VideoIoError};
