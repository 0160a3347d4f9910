//! Dense single-layer tanh RNN: `h = tanh(x·W_ih + h_prev·W_hh)`,
//! `y = h·W_ho`, with energy `||h_mu − h||² + CE(y_mu, y)`.

use ndarray::{Array1, Array2};

use crate::energy::{EnergyBreakdown, EnergyMode, LatentState, LayerState, LayerVec, Target};
use crate::error::Result;
use crate::num::{cross_entropy, cross_entropy_grad, Real};

/// Nonlinearity applied to the recurrent pre-activation. `Identity` exists
/// for closed-form test oracles; experiments use `Tanh`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply<F: Real>(self, x: F) -> F {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    pub fn derivative_from_output<F: Real>(self, y: F) -> F {
        match self {
            Activation::Tanh => F::one() - y * y,
            Activation::Identity => F::one(),
        }
    }
}

/// Trainable tensors: input, hidden and output weight matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct TanhTensors<F> {
    pub w_ih: Array2<F>,
    pub w_hh: Array2<F>,
    pub w_ho: Array2<F>,
}

#[derive(Clone, Debug)]
pub struct TanhCell<F> {
    pub weights: TanhTensors<F>,
    pub activation: Activation,
}

impl<F: Real> TanhTensors<F> {
    pub fn zeros(dims: super::Dims) -> Self {
        Self {
            w_ih: Array2::zeros((dims.input, dims.recurrent)),
            w_hh: Array2::zeros((dims.recurrent, dims.recurrent)),
            w_ho: Array2::zeros((dims.recurrent, dims.output)),
        }
    }

    pub fn add_scaled(&mut self, other: &Self, scale: F) {
        self.w_ih.scaled_add(scale, &other.w_ih);
        self.w_hh.scaled_add(scale, &other.w_hh);
        self.w_ho.scaled_add(scale, &other.w_ho);
    }

    pub fn scale(&mut self, scale: F) {
        self.w_ih.mapv_inplace(|x| x * scale);
        self.w_hh.mapv_inplace(|x| x * scale);
        self.w_ho.mapv_inplace(|x| x * scale);
    }

    pub fn flat_len(&self) -> usize {
        self.w_ih.len() + self.w_hh.len() + self.w_ho.len()
    }

    pub fn to_flat(&self) -> Vec<F> {
        let mut out = Vec::with_capacity(self.flat_len());
        self.for_each(&mut |_, data, _| out.extend_from_slice(data));
        out
    }

    pub fn assign_from_flat(&mut self, flat: &[F]) {
        assert_eq!(flat.len(), self.flat_len());
        let mut offset = 0;
        for arr in [&mut self.w_ih, &mut self.w_hh, &mut self.w_ho] {
            let len = arr.len();
            arr.as_slice_mut()
                .expect("standard layout")
                .copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
    }

    pub fn for_each(&self, f: &mut dyn FnMut(&'static str, &[F], &[usize])) {
        for (name, arr) in [("w_ih", &self.w_ih), ("w_hh", &self.w_hh), ("w_ho", &self.w_ho)] {
            f(name, arr.as_slice().expect("standard layout"), arr.shape());
        }
    }
}

impl<F: Real> TanhCell<F> {
    pub fn dims(&self) -> super::Dims {
        super::Dims {
            input: self.weights.w_ih.nrows(),
            recurrent: self.weights.w_hh.nrows(),
            hidden: self.weights.w_hh.nrows(),
            output: self.weights.w_ho.ncols(),
        }
    }
}

/// One deterministic step: hidden prediction and output logits.
pub fn forward<F: Real>(
    cell: &TanhCell<F>,
    input: &Array1<F>,
    h_prev: &Array1<F>,
) -> (Array1<F>, Array1<F>) {
    let pre = input.dot(&cell.weights.w_ih) + h_prev.dot(&cell.weights.w_hh);
    let h_pred = pre.mapv(|a| cell.activation.apply(a));
    let y_pred = h_pred.dot(&cell.weights.w_ho);
    (h_pred, y_pred)
}

/// Latent state initialised to the feedforward values.
pub fn feedforward_state<F: Real>(
    cell: &TanhCell<F>,
    input: &Array1<F>,
    h_prev: &Array1<F>,
) -> Result<LatentState<F>> {
    let (h_pred, y_pred) = forward(cell, input, h_prev);
    Ok(LatentState {
        layers: vec![LayerState {
            name: "h",
            value: LayerVec::Real(h_pred.clone()),
            prediction: LayerVec::Real(h_pred.clone()),
            initial_prediction: LayerVec::Real(h_pred),
            halved: false,
        }],
        output_logits: y_pred.clone(),
        initial_logits: y_pred,
        mask: None,
    })
}

/// Refreshes the output prediction from the current hidden latent. The
/// hidden prediction depends only on clamped quantities and stays fixed.
pub fn refresh_predictions<F: Real>(cell: &TanhCell<F>, state: &mut LatentState<F>) {
    let h = state.layers[0].value.expect_real();
    state.output_logits = h.dot(&cell.weights.w_ho);
}

/// Inference-mode `∂F/∂h`: the local error plus the cross-entropy pull.
pub fn latent_gradients<F: Real>(
    cell: &TanhCell<F>,
    state: &LatentState<F>,
    target: Option<Target<F>>,
) -> Vec<LayerVec<F>> {
    let h = state.layers[0].value.expect_real();
    let mu = state.layers[0].prediction.expect_real();
    let mut g = (h - mu) * F::f(2.0);
    if let Some(t) = target {
        let gz = cross_entropy_grad(&state.output_logits, t.index, t.smoothing);
        g += &cell.weights.w_ho.dot(&gz);
    }
    vec![LayerVec::Real(g)]
}

/// Energy assembled directly from the closed-form expression, as a second
/// route checked against the generic per-layer computation.
pub fn cell_energy<F: Real>(
    state: &LatentState<F>,
    target: Option<Target<F>>,
    mode: EnergyMode,
) -> EnergyBreakdown<F> {
    let h = state.layers[0].value.expect_real();
    let mu = match mode {
        EnergyMode::Inference => state.layers[0].prediction.expect_real(),
        EnergyMode::Learning => state.layers[0].initial_prediction.expect_real(),
    };
    let internal: F = h.iter().zip(mu).map(|(&a, &b)| (a - b) * (a - b)).sum();
    let logits = match mode {
        EnergyMode::Inference => &state.output_logits,
        EnergyMode::Learning => &state.initial_logits,
    };
    let output_term = match target {
        Some(t) => cross_entropy(logits, t.index, t.smoothing),
        None => F::zero(),
    };
    EnergyBreakdown {
        internal_terms: vec![internal],
        output_term,
        total: internal + output_term,
    }
}

/// Backward pass of the learning-phase energy through the feedforward
/// cascade: accumulates the readout gradient and returns
/// `∂F_W/∂μ_h` evaluated at the initial prediction.
pub fn learning_terms<F: Real>(
    cell: &TanhCell<F>,
    state: &LatentState<F>,
    target: Option<Target<F>>,
    readout: &mut TanhTensors<F>,
) -> Array1<F> {
    let h_hat = state.layers[0].value.expect_real();
    let h0 = state.layers[0].initial_prediction.expect_real();
    let mut rho = (h_hat - h0) * F::f(-2.0);
    if let Some(t) = target {
        let gz = cross_entropy_grad(&state.initial_logits, t.index, t.smoothing);
        outer_add(&mut readout.w_ho, h0, &gz, F::one());
        rho += &cell.weights.w_ho.dot(&gz);
    }
    rho
}

/// Immediate recurrent-parameter gradient `ρ · ∂μ_h/∂W`, with the Jacobian
/// evaluated at the initial prediction.
pub fn immediate_recurrent<F: Real>(
    cell: &TanhCell<F>,
    state: &LatentState<F>,
    input: &Array1<F>,
    h_prev: &Array1<F>,
    rho: &Array1<F>,
    out: &mut TanhTensors<F>,
) {
    let h0 = state.layers[0].initial_prediction.expect_real();
    let d = Array1::from_iter(
        rho.iter()
            .zip(h0)
            .map(|(&r, &mu)| r * cell.activation.derivative_from_output(mu)),
    );
    outer_add(&mut out.w_ih, input, &d, F::one());
    outer_add(&mut out.w_hh, h_prev, &d, F::one());
}

/// `acc[i,j] += scale · a[i] · b[j]`
pub(crate) fn outer_add<F: Real>(acc: &mut Array2<F>, a: &Array1<F>, b: &Array1<F>, scale: F) {
    for (i, &ai) in a.iter().enumerate() {
        let coef = scale * ai;
        if coef == F::zero() {
            continue;
        }
        let mut row = acc.row_mut(i);
        row.scaled_add(coef, b);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::{init_parameters, CellFamily, CellParameters, Dims, LruInit};

    fn cell(seed: u64) -> TanhCell<f64> {
        let dims = Dims {
            input: 4,
            recurrent: 8,
            hidden: 8,
            output: 3,
        };
        match init_parameters(CellFamily::TanhRnn, dims, 0.0, LruInit::default(), seed).unwrap() {
            CellParameters::Tanh(c) => c,
            _ => unreachable!(),
        }
    }

    #[test]
    fn zero_input_and_state_give_zero_predictions() {
        let c = cell(1);
        let (h, y) = forward(&c, &Array1::zeros(4), &Array1::zeros(8));
        assert!(h.iter().all(|&v| v == 0.0));
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hidden_prediction_stays_inside_tanh_range() {
        let c = cell(2);
        let x = Array1::from_vec(vec![5.0, -3.0, 2.0, 9.0]);
        let h_prev = Array1::from_elem(8, 4.0);
        let (h, _) = forward(&c, &x, &h_prev);
        assert!(h.iter().all(|&v| v > -1.0 && v < 1.0));
    }

    #[test]
    fn forward_matches_scalar_loop_re_implementation() {
        let c = cell(3);
        let x = Array1::from_vec(vec![0.3, -1.1, 0.8, 0.02]);
        let h_prev = Array1::from_shape_fn(8, |i| (i as f64 * 0.37).sin());
        let (h, y) = forward(&c, &x, &h_prev);
        for i in 0..8 {
            let mut pre = 0.0;
            for k in 0..4 {
                pre += x[k] * c.weights.w_ih[[k, i]];
            }
            for m in 0..8 {
                pre += h_prev[m] * c.weights.w_hh[[m, i]];
            }
            assert!((h[i] - pre.tanh()).abs() < 1e-12);
        }
        for j in 0..3 {
            let mut acc = 0.0;
            for i in 0..8 {
                acc += h[i] * c.weights.w_ho[[i, j]];
            }
            assert!((y[j] - acc).abs() < 1e-12);
        }
    }
}
