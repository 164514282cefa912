//! Generator-versus-segmentor pseudo-healthy synthesis.
//!
//! A generator `G` learns to remove lesions from a pathological image
//! `x_p` while a pixel-level segmentor `S` keeps trying to find them in the
//! synthesis `x_s = G(x_p)`. The crate also ships the surrounding
//! tooling: dataset loading and phantom generation, masked identity
//! metrics, the A-Dice healthiness harness and lesion-contrast
//! enhancement.

pub mod config;
pub mod data;
pub mod enhancement;
pub mod error;
pub mod evaluation;
pub mod grid;
pub mod losses;
pub mod networks;
pub mod nn;
pub mod segfit;
pub mod trainer;

pub use config::{config_hash, sub_seed};
pub use data::{DatasetManifest, Modality, Split, Volume};
pub use enhancement::{enhance, DownstreamResult, EnhanceConfig, SignMode};
pub use error::{Error, Result};
pub use evaluation::{ADiceConfig, ADiceResult, MetricReport};
pub use grid::{ImageGrid, LesionMask, ProbMap, Sample, WeightMap};
pub use losses::{LossValue, WceBackground};
pub use networks::{Generator, GeneratorSpec, Mode, NormKind, OutputActivation, Segmentor, SegmentorSpec};
pub use nn::{OptimizerKind, ParamSet, ParamSnapshot};
pub use segfit::{SegFitConfig, SegFitter};
pub use trainer::{GvsTrainer, LossRecord, TrainConfig, TrainState};
