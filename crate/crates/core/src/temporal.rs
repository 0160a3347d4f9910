//! Temporal structure of the predictive-coding models: per-time-step
//! feedforward prediction, iterative inference, and carry-over of the
//! converged recurrent state into the next step's prediction.

use ndarray::Array1;

use crate::cells::CellParameters;
use crate::energy::{
    run_inference, EnergyBreakdown, InferenceConfig, LatentState, LayerVec, Target,
};
use crate::error::{Result, TpcError};
use crate::num::Real;

/// Per-sequence state carried across time steps: the converged recurrent
/// latent from the previous step, the step counter, and the dropout mask
/// frozen for the sequence.
#[derive(Clone, Debug)]
pub struct TemporalContext<F> {
    pub prev: LayerVec<F>,
    pub time_index: usize,
    pub mask: Option<Array1<F>>,
}

impl<F: Real> TemporalContext<F> {
    /// Zero-initialised hidden state at the start of a sequence.
    pub fn initial(params: &CellParameters<F>, mask: Option<Array1<F>>) -> Self {
        Self {
            prev: params.initial_recurrent(),
            time_index: 0,
            mask,
        }
    }
}

/// Whether per-step parameter gradients are applied immediately or summed
/// over the sequence and applied once.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum UpdateSchedule {
    TimeBatched,
    Immediate,
}

/// Feedforward prediction of a new time step from the clamped input and the
/// previous converged recurrent state.
pub fn temporal_predict<F: Real>(
    context: &TemporalContext<F>,
    input: &Array1<F>,
    params: &CellParameters<F>,
) -> Result<LatentState<F>> {
    params.feedforward(input, &context.prev, context.mask.as_ref())
}

pub struct StepOutcome<F> {
    pub converged: LatentState<F>,
    pub energy: EnergyBreakdown<F>,
    pub context: TemporalContext<F>,
}

/// One full time step: feedforward initialisation, iterative inference, and
/// context carry-over. Momentum buffers are reset at every step.
pub fn step<F: Real>(
    context: &TemporalContext<F>,
    input: &Array1<F>,
    target: Option<Target<F>>,
    params: &CellParameters<F>,
    inference: &InferenceConfig<F>,
) -> Result<StepOutcome<F>> {
    let initial = temporal_predict(context, input, params)?;
    let (converged, energy) =
        run_inference(initial, params, inference, input, target).map_err(|e| match e {
            TpcError::NonFiniteGradient { layer, iteration } => TpcError::NonFinite {
                context: format!(
                    "inference gradient, layer {layer}, iteration {iteration}, time step {}",
                    context.time_index
                ),
            },
            other => other,
        })?;
    let next = TemporalContext {
        prev: converged.layers[0].value.clone(),
        time_index: context.time_index + 1,
        mask: context.mask.clone(),
    };
    Ok(StepOutcome {
        converged,
        energy,
        context: next,
    })
}

/// Routes one step's gradient contribution according to the schedule:
/// time-batched contributions are summed into the accumulator, immediate
/// ones are handed to `apply` right away.
pub fn accumulate_or_apply<F: Real>(
    accumulator: &mut crate::cells::CellGrads<F>,
    step_grads: &crate::cells::CellGrads<F>,
    schedule: UpdateSchedule,
    apply: &mut dyn FnMut(&crate::cells::CellGrads<F>),
) {
    match schedule {
        UpdateSchedule::TimeBatched => accumulator.add_scaled(step_grads, F::one()),
        UpdateSchedule::Immediate => apply(step_grads),
    }
}
