//! Concrete cell families: a dense tanh RNN and a complex-valued linear
//! recurrent unit (LRU) with a two-stage nonlinear readout head. Each family
//! provides its prediction functions, analytic Jacobian products, energies,
//! and initialisation.

pub mod lru;
pub mod tanh;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::energy::{LatentState, LayerVec, Target};
use crate::error::{Result, TpcError};
use crate::num::Real;

pub use lru::{LruCell, LruTensors};
pub use tanh::{Activation, TanhCell, TanhTensors};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum CellFamily {
    TanhRnn,
    Lru,
}

impl std::fmt::Display for CellFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CellFamily::TanhRnn => write!(f, "tanh_rnn"),
            CellFamily::Lru => write!(f, "lru"),
        }
    }
}

/// Network sizes. For the tanh RNN `recurrent == hidden`; for the LRU,
/// `recurrent` is the complex state size and `hidden` the readout width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Dims {
    pub input: usize,
    pub recurrent: usize,
    pub hidden: usize,
    pub output: usize,
}

impl Dims {
    pub fn validate(&self, family: CellFamily) -> Result<()> {
        if self.input == 0 || self.recurrent == 0 || self.hidden == 0 || self.output == 0 {
            return Err(TpcError::Usage(format!(
                "all dimensions must be positive, got {self:?}"
            )));
        }
        if family == CellFamily::TanhRnn && self.recurrent != self.hidden {
            return Err(TpcError::Usage(
                "tanh cell requires recurrent == hidden".into(),
            ));
        }
        Ok(())
    }
}

/// Weight sets for either cell family.
#[derive(Clone, Debug)]
pub enum CellParameters<F> {
    Tanh(TanhCell<F>),
    Lru(LruCell<F>),
}

/// Gradient (or moment) container mirroring the trainable tensors of a cell.
#[derive(Clone, Debug)]
pub enum CellGrads<F> {
    Tanh(TanhTensors<F>),
    Lru(LruTensors<F>),
}

/// Split of the trainable tensors into those that influence the recurrent
/// state (and hence future energies) and those applied only downstream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamPartition {
    pub recurrent: &'static [&'static str],
    pub readout: &'static [&'static str],
}

pub const TANH_PARTITION: ParamPartition = ParamPartition {
    recurrent: &["w_ih", "w_hh"],
    readout: &["w_ho"],
};

pub const LRU_PARTITION: ParamPartition = ParamPartition {
    recurrent: &["nu", "theta", "b_re", "b_im"],
    readout: &["c_re", "c_im", "d", "w_r", "w_o"],
};

/// Ring-initialisation bounds for the LRU eigenvalues.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct LruInit {
    pub radius_min: f64,
    pub radius_max: f64,
    pub phase_max: f64,
}

impl Default for LruInit {
    fn default() -> Self {
        Self {
            radius_min: 0.9,
            radius_max: 0.999,
            phase_max: std::f64::consts::PI / 10.0,
        }
    }
}

fn uniform_matrix<F: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Array2<F> {
    Array2::from_shape_fn((rows, cols), |_| F::f(rng.random_range(-bound..bound)))
}

/// Deterministic parameter initialisation for either family.
///
/// Tanh matrices are uniform in `±1/sqrt(fan_in)`. LRU eigenvalues are drawn
/// on a ring `|λ| ∈ [radius_min, radius_max]` with phase in `[0, phase_max]`;
/// the complex input/readout matrices use a Glorot-style bound split across
/// the real and imaginary parts.
pub fn init_parameters<F: Real>(
    family: CellFamily,
    dims: Dims,
    dropout_rate: f64,
    lru_init: LruInit,
    seed: u64,
) -> Result<CellParameters<F>> {
    dims.validate(family)?;
    if !(0.0..1.0).contains(&dropout_rate) {
        return Err(TpcError::Usage("dropout rate must be in [0,1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match family {
        CellFamily::TanhRnn => {
            let n = dims.recurrent;
            let bound = 1.0 / (n as f64).sqrt();
            let gain: f64 = std::env::var("TPC_WHH_GAIN")
                .ok()
                .and_then(|v| v.parse().ok())
                .unwrap_or(1.0);
            let w_ih = uniform_matrix(&mut rng, dims.input, n, bound);
            let w_hh = uniform_matrix(&mut rng, n, n, bound * gain);
            let w_ho = uniform_matrix(&mut rng, n, dims.output, bound);
            Ok(CellParameters::Tanh(TanhCell {
                weights: TanhTensors { w_ih, w_hh, w_ho },
                activation: Activation::Tanh,
            }))
        }
        CellFamily::Lru => {
            let n = dims.recurrent;
            let h = dims.hidden;
            let radii: Vec<f64> = (0..n)
                .map(|_| rng.random_range(lru_init.radius_min..lru_init.radius_max))
                .collect();
            let nu = Array1::from_iter(radii.iter().map(|&r| F::f((-r.ln()).ln())));
            let theta =
                Array1::from_shape_fn(n, |_| F::f(rng.random_range(0.0..lru_init.phase_max)));
            let cg_b = (6.0 / (dims.input + n) as f64).sqrt() / std::f64::consts::SQRT_2;
            let b_re = uniform_matrix(&mut rng, dims.input, n, cg_b);
            let b_im = uniform_matrix(&mut rng, dims.input, n, cg_b);
            let cg_c = (6.0 / (n + h) as f64).sqrt() / std::f64::consts::SQRT_2;
            let c_re = uniform_matrix(&mut rng, n, h, cg_c);
            let c_im = uniform_matrix(&mut rng, n, h, cg_c);
            let d = uniform_matrix(&mut rng, dims.input, h, 1.0 / (dims.input as f64).sqrt());
            let w_r = uniform_matrix(&mut rng, h, h, 1.0 / (h as f64).sqrt());
            let w_o = uniform_matrix(&mut rng, h, dims.output, 1.0 / (h as f64).sqrt());
            Ok(CellParameters::Lru(LruCell {
                weights: LruTensors {
                    nu,
                    theta,
                    b_re,
                    b_im,
                    c_re,
                    c_im,
                    d,
                    w_r,
                    w_o,
                },
                dropout_rate: F::f(dropout_rate),
            }))
        }
    }
}

impl<F: Real> CellParameters<F> {
    pub fn family(&self) -> CellFamily {
        match self {
            CellParameters::Tanh(_) => CellFamily::TanhRnn,
            CellParameters::Lru(_) => CellFamily::Lru,
        }
    }

    pub fn dims(&self) -> Dims {
        match self {
            CellParameters::Tanh(c) => c.dims(),
            CellParameters::Lru(c) => c.dims(),
        }
    }

    pub fn partition(&self) -> ParamPartition {
        match self {
            CellParameters::Tanh(_) => TANH_PARTITION,
            CellParameters::Lru(_) => LRU_PARTITION,
        }
    }

    pub fn dropout_rate(&self) -> F {
        match self {
            CellParameters::Tanh(_) => F::zero(),
            CellParameters::Lru(c) => c.dropout_rate,
        }
    }

    /// Zero vector shaped like the recurrent state carried across time.
    pub fn initial_recurrent(&self) -> LayerVec<F> {
        match self {
            CellParameters::Tanh(c) => LayerVec::Real(Array1::zeros(c.dims().recurrent)),
            CellParameters::Lru(c) => LayerVec::Complex {
                re: Array1::zeros(c.dims().recurrent),
                im: Array1::zeros(c.dims().recurrent),
            },
        }
    }

    /// Feedforward initialisation of a time step's latents.
    pub fn feedforward(
        &self,
        input: &Array1<F>,
        prev: &LayerVec<F>,
        mask: Option<&Array1<F>>,
    ) -> Result<LatentState<F>> {
        self.validate_input(input)?;
        match self {
            CellParameters::Tanh(c) => tanh::feedforward_state(c, input, prev.expect_real()),
            CellParameters::Lru(c) => {
                let (re, im) = prev.expect_complex();
                lru::feedforward_state(c, input, re, im, mask)
            }
        }
    }

    /// Recomputes every prediction that depends on a free latent. The
    /// recurrent prediction depends only on clamped quantities and is left
    /// untouched.
    pub fn refresh_predictions(&self, state: &mut LatentState<F>, input: &Array1<F>) {
        match self {
            CellParameters::Tanh(c) => tanh::refresh_predictions(c, state),
            CellParameters::Lru(c) => lru::refresh_predictions(c, state, input),
        }
    }

    /// Analytic inference-mode energy gradients per free layer.
    pub fn latent_gradients(
        &self,
        state: &LatentState<F>,
        input: &Array1<F>,
        target: Option<Target<F>>,
    ) -> Vec<LayerVec<F>> {
        match self {
            CellParameters::Tanh(c) => tanh::latent_gradients(c, state, target),
            CellParameters::Lru(c) => lru::latent_gradients(c, state, input, target),
        }
    }

    fn validate_input(&self, input: &Array1<F>) -> Result<()> {
        let expected = self.dims().input;
        if input.len() != expected {
            return Err(TpcError::ShapeMismatch {
                context: "cell input",
                expected: format!("{expected}"),
                actual: format!("{}", input.len()),
            });
        }
        Ok(())
    }

    /// Checks that a latent state has the layer layout this cell produces.
    pub fn validate_state(&self, state: &LatentState<F>) -> Result<()> {
        let dims = self.dims();
        let check = |ok: bool, expected: String, actual: String| -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(TpcError::ShapeMismatch {
                    context: "latent state",
                    expected,
                    actual,
                })
            }
        };
        match self {
            CellParameters::Tanh(_) => {
                check(
                    state.layers.len() == 1,
                    "1 layer".into(),
                    format!("{} layers", state.layers.len()),
                )?;
                let n = state.layers[0].value.units();
                check(n == dims.recurrent, format!("{}", dims.recurrent), format!("{n}"))?;
            }
            CellParameters::Lru(_) => {
                check(
                    state.layers.len() == 3,
                    "3 layers".into(),
                    format!("{} layers", state.layers.len()),
                )?;
                let n = state.layers[0].value.units();
                check(n == dims.recurrent, format!("{}", dims.recurrent), format!("{n}"))?;
                let h = state.layers[1].value.units();
                check(h == dims.hidden, format!("{}", dims.hidden), format!("{h}"))?;
            }
        }
        check(
            state.output_logits.len() == dims.output,
            format!("{}", dims.output),
            format!("{}", state.output_logits.len()),
        )
    }
}

macro_rules! grads_delegate {
    ($self:ident, $t:ident, $body:expr) => {
        match $self {
            CellGrads::Tanh($t) => $body,
            CellGrads::Lru($t) => $body,
        }
    };
}

impl<F: Real> CellGrads<F> {
    pub fn zeros_like(params: &CellParameters<F>) -> Self {
        let dims = params.dims();
        match params {
            CellParameters::Tanh(_) => CellGrads::Tanh(TanhTensors::zeros(dims)),
            CellParameters::Lru(_) => CellGrads::Lru(LruTensors::zeros(dims)),
        }
    }

    pub fn add_scaled(&mut self, other: &CellGrads<F>, scale: F) {
        match (self, other) {
            (CellGrads::Tanh(a), CellGrads::Tanh(b)) => a.add_scaled(b, scale),
            (CellGrads::Lru(a), CellGrads::Lru(b)) => a.add_scaled(b, scale),
            _ => panic!("gradient family mismatch"),
        }
    }

    pub fn scale(&mut self, scale: F) {
        grads_delegate!(self, t, t.scale(scale))
    }

    pub fn flat_len(&self) -> usize {
        grads_delegate!(self, t, t.flat_len())
    }

    pub fn to_flat(&self) -> Vec<F> {
        grads_delegate!(self, t, t.to_flat())
    }

    pub fn assign_from_flat(&mut self, flat: &[F]) {
        grads_delegate!(self, t, t.assign_from_flat(flat))
    }

    pub fn expect_tanh(&self) -> &TanhTensors<F> {
        match self {
            CellGrads::Tanh(t) => t,
            _ => panic!("expected tanh gradients"),
        }
    }

    pub fn expect_lru(&self) -> &LruTensors<F> {
        match self {
            CellGrads::Lru(t) => t,
            _ => panic!("expected lru gradients"),
        }
    }
}

impl<F: Real> CellParameters<F> {
    /// Flattened view of all trainable tensors; recurrent tensors first.
    pub fn to_flat(&self) -> Vec<F> {
        match self {
            CellParameters::Tanh(c) => c.weights.to_flat(),
            CellParameters::Lru(c) => c.weights.to_flat(),
        }
    }

    pub fn assign_from_flat(&mut self, flat: &[F]) {
        match self {
            CellParameters::Tanh(c) => c.weights.assign_from_flat(flat),
            CellParameters::Lru(c) => c.weights.assign_from_flat(flat),
        }
    }

    pub fn flat_len(&self) -> usize {
        match self {
            CellParameters::Tanh(c) => c.weights.flat_len(),
            CellParameters::Lru(c) => c.weights.flat_len(),
        }
    }

    /// Length of the recurrent-tensor prefix of the flat layout.
    pub fn recurrent_flat_len(&self) -> usize {
        match self {
            CellParameters::Tanh(c) => c.weights.w_ih.len() + c.weights.w_hh.len(),
            CellParameters::Lru(c) => {
                c.weights.nu.len()
                    + c.weights.theta.len()
                    + c.weights.b_re.len()
                    + c.weights.b_im.len()
            }
        }
    }

    /// Visits `(name, data, shape)` for every trainable tensor in flat order.
    pub fn for_each_tensor(&self, f: &mut dyn FnMut(&'static str, &[F], &[usize])) {
        match self {
            CellParameters::Tanh(c) => c.weights.for_each(f),
            CellParameters::Lru(c) => c.weights.for_each(f),
        }
    }
}

/// Deterministic per-sequence dropout mask (inverted scaling), all-ones when
/// the rate is zero. Only the LRU readout uses a mask.
pub fn sample_dropout_mask<F: Real>(params: &CellParameters<F>, seed: u64) -> Option<Array1<F>> {
    let rate = params.dropout_rate().to_f64();
    if rate == 0.0 {
        return None;
    }
    let h = params.dims().hidden;
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Some(Array1::from_shape_fn(h, |_| {
        if rng.random_range(0.0..1.0) < keep {
            F::f(scale)
        } else {
            F::zero()
        }
    }))
}
