//! Small conditional rectified-flow model over themed 2-D point sets.
//!
//! Its hidden linear layers host adapters, which makes it a cheap stand-in
//! for a large generative backbone when building adapter pools and measuring
//! fusion quality.

pub mod metrics;
pub mod model;
pub mod themes;

pub use metrics::{energy_distance, eval_sample_quality};
pub use model::{
    batch_io, flow_loss_var, flow_matching_loss, generate, init_lora, integrate, interpolate,
    lora_branch, model_input, train_base, train_lora, Conditioner, FlowBatch, StepLoss, ToyConfig,
    ToyModel, VelocityModel,
};
pub use themes::{make_dataset, Generator, ThemeSpec, ToyDataset, Variation};
