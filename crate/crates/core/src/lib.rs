pub mod archive;
pub mod autograd;
pub mod backbone;
pub mod config;
pub mod cpia;
pub mod data;
pub mod decoder;
pub mod dgfm;
pub mod error;
pub mod graph;
pub mod losses;
pub mod mcrm;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod resample;
pub mod schedule;
pub mod train;

pub use config::{Preset, RunConfig};
pub use error::{Error, Result};
pub use losses::LossBreakdown;
pub use metrics::{ConfusionMatrix, MetricsReport};
pub use model::Model;
pub use train::{Dataset, EvalMode, ParamCounts, RobustnessReport, RunSummary};
