//! The MoE policy transformer: parameters, inference with a key/value
//! cache, the taped training forward, sampling and checkpoints.

mod checkpoint;
mod config;
mod forward;
mod params;
mod rollout;
mod taped;
mod trace;

pub use checkpoint::{decode_checkpoint, encode_checkpoint};
pub use config::ModelConfig;
pub use forward::{forward_logprobs, positional_row, ForwardOptions, ForwardOutput, InferenceSession};
pub use params::{BlockSlots, ExpertSlots, InitOptions, Layout, PolicyParams, PolicySnapshot};
pub use rollout::{generate, sample_rollout, Generation, Rollout, SamplingConfig};
pub use taped::{forward_tape, ParamVars, TapeForward};
pub use trace::{MaskTable, RoutingTrace};

#[cfg(test)]
mod tests;
