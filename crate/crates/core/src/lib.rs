//! Adversarial burst-trace defense against website fingerprinting: trace
//! model, detectors, the target-pool generator and gradient baselines,
//! attack-side evaluation, and a burst-molding simulator.

pub mod cli;
pub mod cw;
pub mod dataset;
pub mod defended;
pub mod detector;
pub mod evaluation;
pub mod mockingbird;
pub mod molding;
pub mod scalar;
pub mod trace;

pub use cw::{cw_generate, cw_generate_batch, CwConfig, CwMode};
pub use dataset::{LabeledDataset, SyntheticSpec};
pub use defended::{BatchResult, BatchSummary, DefendedTrace};
pub use detector::{DetectorModel, Objective, TrainConfig};
pub use evaluation::{EvalReport, IntersectionOutcome};
pub use mockingbird::{generate, generate_batch, GenerationConfig, TargetCase};
pub use molding::{mold, MoldingConfig, PacketEvent};
pub use scalar::Scalar;
pub use trace::{BurstTrace, PacketTrace, TraceSize};

pub type BurstTraceF64 = BurstTrace<f64>;
pub type BurstTraceF32 = BurstTrace<f32>;
pub type DetectorF64 = DetectorModel<f64>;
pub type DetectorF32 = DetectorModel<f32>;
pub type DefendedTraceF64 = DefendedTrace<f64>;
pub type DefendedTraceF32 = DefendedTrace<f32>;
pub type BurstDataset = LabeledDataset<BurstTrace<f64>>;
pub type BurstDatasetF32 = LabeledDataset<BurstTrace<f32>>;
