//! Temporal predictive coding with real-time recurrent learning.
//!
//! The crate implements a sequence-learning family built around iterative
//! latent inference: at every time step a cell (dense tanh RNN or complex
//! linear recurrent unit) predicts its latents feedforward, relaxes them by
//! gradient descent on a free energy, and updates its parameters from local
//! errors. Recurrent parameters can additionally consume an influence trace
//! (forward-mode sensitivity of the state to the parameters), which restores
//! long-range temporal credit assignment without unrolling the sequence.
//!
//! BPTT and spatial-BP trainers over the same cells serve both as baselines
//! and as independent gradient oracles, wired into the `gradcheck` command
//! and the acceptance test suite.

pub mod baselines;
pub mod cells;
pub mod checkpoint;
pub mod config;
pub mod energy;
pub mod error;
pub mod metrics;
pub mod num;
pub mod optim;
pub mod oracle;
pub mod rtrl;
pub mod tasks;
pub mod temporal;
pub mod trainer;

pub use cells::{CellFamily, CellGrads, CellParameters, Dims};
pub use energy::{
    compute_energy, inference_step, run_inference, EnergyBreakdown, EnergyMode, InferenceConfig,
    LatentState, LayerVec, Target,
};
pub use error::{Result, TpcError};
pub use num::Real;
pub use rtrl::InfluenceTrace;
pub use temporal::{step, temporal_predict, TemporalContext, UpdateSchedule};
