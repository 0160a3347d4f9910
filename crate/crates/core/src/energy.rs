//! Free energies, prediction errors, and the iterative inference engine
//! shared by every predictive-coding variant in the crate.
//!
//! A [`LatentState`] holds the free latent activations of one time step
//! together with their current and initial predictions. Inference relaxes the
//! latents by gradient descent on the inference-mode energy; parameter
//! updates elsewhere use the learning-mode energy, whose errors are measured
//! against the feedforward initialisation.

use ndarray::Array1;

use crate::cells::CellParameters;
use crate::error::{Result, TpcError};
use crate::num::{cross_entropy, Real};

/// A per-layer activation vector, real or complex (stored as a real pair).
#[derive(Clone, Debug, PartialEq)]
pub enum LayerVec<F> {
    Real(Array1<F>),
    Complex { re: Array1<F>, im: Array1<F> },
}

impl<F: Real> LayerVec<F> {
    pub fn zeros_like(&self) -> Self {
        match self {
            LayerVec::Real(v) => LayerVec::Real(Array1::zeros(v.len())),
            LayerVec::Complex { re, im } => LayerVec::Complex {
                re: Array1::zeros(re.len()),
                im: Array1::zeros(im.len()),
            },
        }
    }

    /// Number of units in the layer (a complex unit counts once).
    pub fn units(&self) -> usize {
        match self {
            LayerVec::Real(v) => v.len(),
            LayerVec::Complex { re, .. } => re.len(),
        }
    }

    /// Number of stored scalars (a complex unit counts twice).
    pub fn scalar_len(&self) -> usize {
        match self {
            LayerVec::Real(v) => v.len(),
            LayerVec::Complex { re, im } => re.len() + im.len(),
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            LayerVec::Real(v) => v.iter().all(|x| x.is_finite()),
            LayerVec::Complex { re, im } => {
                re.iter().all(|x| x.is_finite()) && im.iter().all(|x| x.is_finite())
            }
        }
    }

    /// `self += scale * other`; layouts must match.
    pub fn add_scaled(&mut self, other: &LayerVec<F>, scale: F) {
        match (self, other) {
            (LayerVec::Real(a), LayerVec::Real(b)) => a.scaled_add(scale, b),
            (
                LayerVec::Complex { re: ar, im: ai },
                LayerVec::Complex { re: br, im: bi },
            ) => {
                ar.scaled_add(scale, br);
                ai.scaled_add(scale, bi);
            }
            _ => panic!("layer layout mismatch"),
        }
    }

    pub fn scale(&mut self, scale: F) {
        match self {
            LayerVec::Real(v) => v.mapv_inplace(|x| x * scale),
            LayerVec::Complex { re, im } => {
                re.mapv_inplace(|x| x * scale);
                im.mapv_inplace(|x| x * scale);
            }
        }
    }

    /// Squared error against `other`, summed over components.
    fn squared_error(&self, other: &LayerVec<F>) -> F {
        match (self, other) {
            (LayerVec::Real(a), LayerVec::Real(b)) => {
                a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
            }
            (
                LayerVec::Complex { re: ar, im: ai },
                LayerVec::Complex { re: br, im: bi },
            ) => {
                let r: F = ar.iter().zip(br).map(|(&x, &y)| (x - y) * (x - y)).sum();
                let i: F = ai.iter().zip(bi).map(|(&x, &y)| (x - y) * (x - y)).sum();
                r + i
            }
            _ => panic!("layer layout mismatch"),
        }
    }

    pub fn expect_real(&self) -> &Array1<F> {
        match self {
            LayerVec::Real(v) => v,
            _ => panic!("expected real layer"),
        }
    }

    pub fn expect_complex(&self) -> (&Array1<F>, &Array1<F>) {
        match self {
            LayerVec::Complex { re, im } => (re, im),
            _ => panic!("expected complex layer"),
        }
    }
}

/// One free (unclamped) internal layer: its latent value, its current
/// prediction, and the feedforward prediction it was initialised to.
#[derive(Clone, Debug)]
pub struct LayerState<F> {
    pub name: &'static str,
    pub value: LayerVec<F>,
    pub prediction: LayerVec<F>,
    pub initial_prediction: LayerVec<F>,
    /// Energy term carries a factor ½ (complex recurrent state) instead of 1.
    pub halved: bool,
}

impl<F: Real> LayerState<F> {
    fn energy_weight(&self) -> F {
        if self.halved {
            F::f(0.5)
        } else {
            F::one()
        }
    }
}

/// Latent activations of a single time step. The observed input (top) and
/// the target (bottom, when supervised) are clamped and live outside this
/// struct; only free layers and the output prediction are held here.
/// Layer 0 is the recurrent state; downstream layers follow in order.
#[derive(Clone, Debug)]
pub struct LatentState<F> {
    pub layers: Vec<LayerState<F>>,
    /// Output logits predicted from the current latents.
    pub output_logits: Array1<F>,
    /// Output logits of the feedforward initialisation.
    pub initial_logits: Array1<F>,
    /// Dropout mask frozen for the step (LRU readout); `None` means all-ones.
    pub mask: Option<Array1<F>>,
}

impl<F: Real> LatentState<F> {
    pub fn layer(&self, name: &str) -> &LayerState<F> {
        self.layers
            .iter()
            .find(|l| l.name == name)
            .unwrap_or_else(|| panic!("no layer named {name}"))
    }
}

/// Per-term free-energy values for one time step.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyBreakdown<F> {
    /// One squared-error term per internal layer, ordered like the state.
    pub internal_terms: Vec<F>,
    /// Cross-entropy at the output layer (zero when unsupervised).
    pub output_term: F,
    pub total: F,
}

impl<F: Real> EnergyBreakdown<F> {
    pub fn internal_sum(&self) -> F {
        self.internal_terms.iter().cloned().sum()
    }
}

/// Whether energies are taken against current predictions (inference) or the
/// feedforward initialisation (learning).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnergyMode {
    Inference,
    Learning,
}

/// E-step settings: plain SGD with classical momentum on the latents.
#[derive(Clone, Copy, Debug)]
pub struct InferenceConfig<F> {
    pub iterations: usize,
    pub learning_rate: F,
    pub momentum: F,
}

impl<F: Real> InferenceConfig<F> {
    pub fn new(iterations: usize, learning_rate: F, momentum: F) -> Result<Self> {
        if learning_rate <= F::zero() {
            return Err(TpcError::Usage(
                "inference learning rate must be positive".into(),
            ));
        }
        if momentum < F::zero() || momentum >= F::one() {
            return Err(TpcError::Usage("inference momentum must be in [0,1)".into()));
        }
        Ok(Self {
            iterations,
            learning_rate,
            momentum,
        })
    }
}

/// Supervision of one time step: a target token plus the label smoothing
/// applied to its one-hot encoding.
#[derive(Clone, Copy, Debug)]
pub struct Target<F> {
    pub index: usize,
    pub smoothing: F,
}

impl<F: Real> Target<F> {
    pub fn new(index: usize) -> Self {
        Self {
            index,
            smoothing: F::zero(),
        }
    }

    pub fn with_smoothing(index: usize, smoothing: F) -> Self {
        Self { index, smoothing }
    }
}

/// Sum of per-layer squared errors plus the output cross-entropy.
///
/// In learning mode the errors are taken against the recorded feedforward
/// initialisation and the cross-entropy is evaluated at the feedforward
/// logits; inference mode uses the current predictions throughout.
pub fn compute_energy<F: Real>(
    state: &LatentState<F>,
    params: &CellParameters<F>,
    target: Option<Target<F>>,
    mode: EnergyMode,
) -> Result<EnergyBreakdown<F>> {
    params.validate_state(state)?;
    if let Some(t) = target {
        if t.index >= state.output_logits.len() {
            return Err(TpcError::Usage(format!(
                "target index {} out of range for output dim {}",
                t.index,
                state.output_logits.len()
            )));
        }
    }
    let internal_terms: Vec<F> = state
        .layers
        .iter()
        .map(|l| {
            let reference = match mode {
                EnergyMode::Inference => &l.prediction,
                EnergyMode::Learning => &l.initial_prediction,
            };
            l.energy_weight() * l.value.squared_error(reference)
        })
        .collect();
    let output_term = match target {
        Some(t) => {
            let logits = match mode {
                EnergyMode::Inference => &state.output_logits,
                EnergyMode::Learning => &state.initial_logits,
            };
            cross_entropy(logits, t.index, t.smoothing)
        }
        None => F::zero(),
    };
    let total = internal_terms.iter().cloned().sum::<F>() + output_term;
    Ok(EnergyBreakdown {
        internal_terms,
        output_term,
        total,
    })
}

/// Momentum buffers for the inference optimiser; zeroed at each time step.
#[derive(Clone, Debug)]
pub struct InferenceVelocity<F> {
    pub per_layer: Vec<LayerVec<F>>,
}

impl<F: Real> InferenceVelocity<F> {
    pub fn zeros_for(state: &LatentState<F>) -> Self {
        Self {
            per_layer: state.layers.iter().map(|l| l.value.zeros_like()).collect(),
        }
    }
}

/// One gradient-descent-with-momentum step on every free latent, followed by
/// a prediction refresh. Clamped quantities (input, target) are untouched.
pub fn inference_step<F: Real>(
    state: &LatentState<F>,
    params: &CellParameters<F>,
    config: &InferenceConfig<F>,
    input: &Array1<F>,
    target: Option<Target<F>>,
    velocity: &mut InferenceVelocity<F>,
    iteration: usize,
) -> Result<LatentState<F>> {
    let grads = params.latent_gradients(state, input, target);
    for (layer, g) in grads.iter().enumerate() {
        if !g.is_finite() {
            return Err(TpcError::NonFiniteGradient { layer, iteration });
        }
    }
    let mut next = state.clone();
    for ((layer, g), v) in next
        .layers
        .iter_mut()
        .zip(grads.iter())
        .zip(velocity.per_layer.iter_mut())
    {
        // velocity = m·velocity − α·grad; x += velocity
        v.scale(config.momentum);
        v.add_scaled(g, -config.learning_rate);
        layer.value.add_scaled(v, F::one());
    }
    params.refresh_predictions(&mut next, input);
    Ok(next)
}

/// Runs the E-step for `config.iterations` steps and returns the relaxed
/// state with its final inference-mode energy.
pub fn run_inference<F: Real>(
    state: LatentState<F>,
    params: &CellParameters<F>,
    config: &InferenceConfig<F>,
    input: &Array1<F>,
    target: Option<Target<F>>,
) -> Result<(LatentState<F>, EnergyBreakdown<F>)> {
    let mut current = state;
    let mut velocity = InferenceVelocity::zeros_for(&current);
    for i in 0..config.iterations {
        current = inference_step(&current, params, config, input, target, &mut velocity, i)?;
    }
    let energy = compute_energy(&current, params, target, EnergyMode::Inference)?;
    Ok((current, energy))
}
