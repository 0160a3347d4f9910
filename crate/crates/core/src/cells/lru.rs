//! Complex-valued linear recurrent unit with a two-stage readout head:
//!
//! ```text
//! h     = λ ⊙ h_prev + γ ⊙ x·B          (complex, element-wise recurrence)
//! x_lru = m ⊙ tanh(Re[h·C] + x·D)
//! x_r   = tanh(x_lru·W_r)
//! y     = x_r·W_o
//! ```
//!
//! λ is parameterised for stability as `exp(-exp(ν) + iθ)` with trainable
//! real ν, θ; `γ = sqrt(1 - |λ|²)` is a deterministic function of ν. Complex
//! quantities are stored as real/imaginary pairs throughout.

use ndarray::{Array1, Array2};

use super::tanh::outer_add;
use crate::energy::{EnergyBreakdown, EnergyMode, LatentState, LayerState, LayerVec, Target};
use crate::error::Result;
use crate::num::{cross_entropy, cross_entropy_grad, Real};

#[derive(Clone, Debug, PartialEq)]
pub struct LruTensors<F> {
    pub nu: Array1<F>,
    pub theta: Array1<F>,
    pub b_re: Array2<F>,
    pub b_im: Array2<F>,
    pub c_re: Array2<F>,
    pub c_im: Array2<F>,
    pub d: Array2<F>,
    pub w_r: Array2<F>,
    pub w_o: Array2<F>,
}

#[derive(Clone, Debug)]
pub struct LruCell<F> {
    pub weights: LruTensors<F>,
    pub dropout_rate: F,
}

impl<F: Real> LruTensors<F> {
    pub fn zeros(dims: super::Dims) -> Self {
        let n = dims.recurrent;
        let h = dims.hidden;
        Self {
            nu: Array1::zeros(n),
            theta: Array1::zeros(n),
            b_re: Array2::zeros((dims.input, n)),
            b_im: Array2::zeros((dims.input, n)),
            c_re: Array2::zeros((n, h)),
            c_im: Array2::zeros((n, h)),
            d: Array2::zeros((dims.input, h)),
            w_r: Array2::zeros((h, h)),
            w_o: Array2::zeros((h, dims.output)),
        }
    }

    pub fn add_scaled(&mut self, other: &Self, scale: F) {
        self.nu.scaled_add(scale, &other.nu);
        self.theta.scaled_add(scale, &other.theta);
        self.b_re.scaled_add(scale, &other.b_re);
        self.b_im.scaled_add(scale, &other.b_im);
        self.c_re.scaled_add(scale, &other.c_re);
        self.c_im.scaled_add(scale, &other.c_im);
        self.d.scaled_add(scale, &other.d);
        self.w_r.scaled_add(scale, &other.w_r);
        self.w_o.scaled_add(scale, &other.w_o);
    }

    pub fn scale(&mut self, scale: F) {
        for arr in [&mut self.b_re, &mut self.b_im, &mut self.c_re, &mut self.c_im, &mut self.d, &mut self.w_r, &mut self.w_o] {
            arr.mapv_inplace(|x| x * scale);
        }
        self.nu.mapv_inplace(|x| x * scale);
        self.theta.mapv_inplace(|x| x * scale);
    }

    pub fn flat_len(&self) -> usize {
        self.nu.len()
            + self.theta.len()
            + self.b_re.len()
            + self.b_im.len()
            + self.c_re.len()
            + self.c_im.len()
            + self.d.len()
            + self.w_r.len()
            + self.w_o.len()
    }

    pub fn to_flat(&self) -> Vec<F> {
        let mut out = Vec::with_capacity(self.flat_len());
        self.for_each(&mut |_, data, _| out.extend_from_slice(data));
        out
    }

    pub fn assign_from_flat(&mut self, flat: &[F]) {
        assert_eq!(flat.len(), self.flat_len());
        let mut offset = 0;
        let mut take = |dst: &mut [F]| {
            dst.copy_from_slice(&flat[offset..offset + dst.len()]);
            offset += dst.len();
        };
        take(self.nu.as_slice_mut().unwrap());
        take(self.theta.as_slice_mut().unwrap());
        for arr in [&mut self.b_re, &mut self.b_im, &mut self.c_re, &mut self.c_im, &mut self.d, &mut self.w_r, &mut self.w_o] {
            take(arr.as_slice_mut().expect("standard layout"));
        }
    }

    pub fn for_each(&self, f: &mut dyn FnMut(&'static str, &[F], &[usize])) {
        f("nu", self.nu.as_slice().unwrap(), self.nu.shape());
        f("theta", self.theta.as_slice().unwrap(), self.theta.shape());
        for (name, arr) in [
            ("b_re", &self.b_re),
            ("b_im", &self.b_im),
            ("c_re", &self.c_re),
            ("c_im", &self.c_im),
            ("d", &self.d),
            ("w_r", &self.w_r),
            ("w_o", &self.w_o),
        ] {
            f(name, arr.as_slice().expect("standard layout"), arr.shape());
        }
    }
}

impl<F: Real> LruCell<F> {
    pub fn dims(&self) -> super::Dims {
        super::Dims {
            input: self.weights.b_re.nrows(),
            recurrent: self.weights.nu.len(),
            hidden: self.weights.w_r.nrows(),
            output: self.weights.w_o.ncols(),
        }
    }
}

/// Eigenvalue quantities derived from the (ν, θ) parameterisation:
/// `λ = r·e^{iθ}` with `r = exp(-exp(ν))` and `γ = sqrt(1 - r²)`.
pub struct Eigen<F> {
    pub lam_re: Array1<F>,
    pub lam_im: Array1<F>,
    pub radius: Array1<F>,
    pub gamma: Array1<F>,
    pub exp_nu: Array1<F>,
}

pub fn eigen<F: Real>(cell: &LruCell<F>) -> Eigen<F> {
    let exp_nu = cell.weights.nu.mapv(|v| v.exp());
    let radius = exp_nu.mapv(|e| (-e).exp());
    let lam_re = Array1::from_iter(
        radius
            .iter()
            .zip(cell.weights.theta.iter())
            .map(|(&r, &t)| r * t.cos()),
    );
    let lam_im = Array1::from_iter(
        radius
            .iter()
            .zip(cell.weights.theta.iter())
            .map(|(&r, &t)| r * t.sin()),
    );
    let gamma = radius.mapv(|r| (F::one() - r * r).sqrt());
    Eigen {
        lam_re,
        lam_im,
        radius,
        gamma,
        exp_nu,
    }
}

/// All intermediate quantities of one deterministic step.
pub struct LruForward<F> {
    pub h_re: Array1<F>,
    pub h_im: Array1<F>,
    /// `tanh(Re[h·C] + x·D)` before the dropout mask.
    pub tanh_u: Array1<F>,
    pub x_lru: Array1<F>,
    pub x_r: Array1<F>,
    pub logits: Array1<F>,
}

pub fn forward<F: Real>(
    cell: &LruCell<F>,
    input: &Array1<F>,
    h_prev_re: &Array1<F>,
    h_prev_im: &Array1<F>,
    mask: Option<&Array1<F>>,
) -> LruForward<F> {
    let w = &cell.weights;
    let e = eigen(cell);
    let xb_re = input.dot(&w.b_re);
    let xb_im = input.dot(&w.b_im);
    let h_re = Array1::from_iter(
        (0..h_prev_re.len()).map(|j| {
            e.lam_re[j] * h_prev_re[j] - e.lam_im[j] * h_prev_im[j] + e.gamma[j] * xb_re[j]
        }),
    );
    let h_im = Array1::from_iter(
        (0..h_prev_re.len()).map(|j| {
            e.lam_re[j] * h_prev_im[j] + e.lam_im[j] * h_prev_re[j] + e.gamma[j] * xb_im[j]
        }),
    );
    let u = h_re.dot(&w.c_re) - h_im.dot(&w.c_im) + input.dot(&w.d);
    let tanh_u = u.mapv(|a| a.tanh());
    let x_lru = match mask {
        Some(m) => &tanh_u * m,
        None => tanh_u.clone(),
    };
    let x_r = x_lru.dot(&w.w_r).mapv(|a| a.tanh());
    let logits = x_r.dot(&w.w_o);
    LruForward {
        h_re,
        h_im,
        tanh_u,
        x_lru,
        x_r,
        logits,
    }
}

pub fn feedforward_state<F: Real>(
    cell: &LruCell<F>,
    input: &Array1<F>,
    h_prev_re: &Array1<F>,
    h_prev_im: &Array1<F>,
    mask: Option<&Array1<F>>,
) -> Result<LatentState<F>> {
    let ff = forward(cell, input, h_prev_re, h_prev_im, mask);
    let h = LayerVec::Complex {
        re: ff.h_re,
        im: ff.h_im,
    };
    let layers = vec![
        LayerState {
            name: "h",
            value: h.clone(),
            prediction: h.clone(),
            initial_prediction: h,
            halved: true,
        },
        LayerState {
            name: "x_lru",
            value: LayerVec::Real(ff.x_lru.clone()),
            prediction: LayerVec::Real(ff.x_lru.clone()),
            initial_prediction: LayerVec::Real(ff.x_lru),
            halved: false,
        },
        LayerState {
            name: "x_r",
            value: LayerVec::Real(ff.x_r.clone()),
            prediction: LayerVec::Real(ff.x_r.clone()),
            initial_prediction: LayerVec::Real(ff.x_r),
            halved: false,
        },
    ];
    Ok(LatentState {
        layers,
        output_logits: ff.logits.clone(),
        initial_logits: ff.logits,
        mask: mask.cloned(),
    })
}

fn masked<F: Real>(tanh_u: &Array1<F>, mask: Option<&Array1<F>>) -> Array1<F> {
    match mask {
        Some(m) => tanh_u * m,
        None => tanh_u.clone(),
    }
}

/// Recomputes the downstream predictions from the current latents; the
/// recurrent prediction depends only on clamped quantities and stays fixed.
pub fn refresh_predictions<F: Real>(cell: &LruCell<F>, state: &mut LatentState<F>, input: &Array1<F>) {
    let w = &cell.weights;
    let (h_re, h_im) = state.layers[0].value.expect_complex();
    let u = h_re.dot(&w.c_re) - h_im.dot(&w.c_im) + input.dot(&w.d);
    let mu_lru = masked(&u.mapv(|a| a.tanh()), state.mask.as_ref());
    let x_lru = state.layers[1].value.expect_real();
    let mu_r = x_lru.dot(&w.w_r).mapv(|a| a.tanh());
    let x_r = state.layers[2].value.expect_real();
    let logits = x_r.dot(&w.w_o);
    state.layers[1].prediction = LayerVec::Real(mu_lru);
    state.layers[2].prediction = LayerVec::Real(mu_r);
    state.output_logits = logits;
}

/// Inference-mode energy gradients for the three free layers.
pub fn latent_gradients<F: Real>(
    cell: &LruCell<F>,
    state: &LatentState<F>,
    input: &Array1<F>,
    target: Option<Target<F>>,
) -> Vec<LayerVec<F>> {
    let w = &cell.weights;
    let two = F::f(2.0);
    let (h_re, h_im) = state.layers[0].value.expect_complex();
    let (mu_h_re, mu_h_im) = state.layers[0].prediction.expect_complex();
    let x_lru = state.layers[1].value.expect_real();
    let mu_lru = state.layers[1].prediction.expect_real();
    let x_r = state.layers[2].value.expect_real();
    let mu_r = state.layers[2].prediction.expect_real();

    // x_r: own error plus the cross-entropy pull.
    let mut g_xr = (x_r - mu_r) * two;
    if let Some(t) = target {
        let gz = cross_entropy_grad(&state.output_logits, t.index, t.smoothing);
        g_xr += &w.w_o.dot(&gz);
    }

    // x_lru: own error plus the x_r error flowing back through W_r.
    let e_r_scaled = Array1::from_iter(
        x_r.iter()
            .zip(mu_r)
            .map(|(&a, &m)| two * (a - m) * (F::one() - m * m)),
    );
    let g_xlru = (x_lru - mu_lru) * two - &w.w_r.dot(&e_r_scaled);

    // h: own (halved, so unit-coefficient) error plus the x_lru error
    // through C; tanh(u) is recomputed at the current h.
    let u = h_re.dot(&w.c_re) - h_im.dot(&w.c_im) + input.dot(&w.d);
    let tu = u.mapv(|a| a.tanh());
    let d_u = Array1::from_iter(x_lru.iter().zip(mu_lru).zip(tu.iter()).enumerate().map(
        |(k, ((&a, &m), &t))| {
            let mk = state.mask.as_ref().map(|mm| mm[k]).unwrap_or_else(F::one);
            two * (a - m) * mk * (F::one() - t * t)
        },
    ));
    let g_h_re = (h_re - mu_h_re) - &w.c_re.dot(&d_u);
    let g_h_im = (h_im - mu_h_im) + &w.c_im.dot(&d_u);

    vec![
        LayerVec::Complex {
            re: g_h_re,
            im: g_h_im,
        },
        LayerVec::Real(g_xlru),
        LayerVec::Real(g_xr),
    ]
}

/// Energy assembled directly from the five-term expression.
pub fn cell_energy<F: Real>(
    state: &LatentState<F>,
    target: Option<Target<F>>,
    mode: EnergyMode,
) -> EnergyBreakdown<F> {
    let half = F::f(0.5);
    let pick = |i: usize| -> &LayerVec<F> {
        match mode {
            EnergyMode::Inference => &state.layers[i].prediction,
            EnergyMode::Learning => &state.layers[i].initial_prediction,
        }
    };
    let (h_re, h_im) = state.layers[0].value.expect_complex();
    let (p_re, p_im) = pick(0).expect_complex();
    let term_h = half
        * (h_re
            .iter()
            .zip(p_re)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<F>()
            + h_im
                .iter()
                .zip(p_im)
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<F>());
    let sq = |v: &Array1<F>, p: &Array1<F>| -> F {
        v.iter().zip(p).map(|(&a, &b)| (a - b) * (a - b)).sum()
    };
    let term_lru = sq(
        state.layers[1].value.expect_real(),
        pick(1).expect_real(),
    );
    let term_r = sq(state.layers[2].value.expect_real(), pick(2).expect_real());
    let logits = match mode {
        EnergyMode::Inference => &state.output_logits,
        EnergyMode::Learning => &state.initial_logits,
    };
    let output_term = match target {
        Some(t) => cross_entropy(logits, t.index, t.smoothing),
        None => F::zero(),
    };
    EnergyBreakdown {
        internal_terms: vec![term_h, term_lru, term_r],
        output_term,
        total: term_h + term_lru + term_r + output_term,
    }
}

/// Backward pass of the learning-phase energy through the feedforward
/// cascade. Accumulates readout gradients (C, D, W_r, W_o) and returns
/// `∂F_W/∂μ_h` at the initial prediction as a complex pair.
pub fn learning_terms<F: Real>(
    cell: &LruCell<F>,
    state: &LatentState<F>,
    input: &Array1<F>,
    target: Option<Target<F>>,
    readout: &mut LruTensors<F>,
) -> (Array1<F>, Array1<F>) {
    let w = &cell.weights;
    let two = F::f(2.0);
    let (h0_re, h0_im) = state.layers[0].initial_prediction.expect_complex();
    let xl0 = state.layers[1].initial_prediction.expect_real();
    let xr0 = state.layers[2].initial_prediction.expect_real();
    let xl_hat = state.layers[1].value.expect_real();
    let xr_hat = state.layers[2].value.expect_real();
    let (hh_re, hh_im) = state.layers[0].value.expect_complex();

    // tanh(u0) recomputed from the stored initial recurrent prediction.
    let u0 = h0_re.dot(&w.c_re) - h0_im.dot(&w.c_im) + input.dot(&w.d);
    let tu0 = u0.mapv(|a| a.tanh());

    let mut a_xr = (xr_hat - xr0) * (-two);
    if let Some(t) = target {
        let gz = cross_entropy_grad(&state.initial_logits, t.index, t.smoothing);
        outer_add(&mut readout.w_o, xr0, &gz, F::one());
        a_xr += &w.w_o.dot(&gz);
    }
    let a_v = Array1::from_iter(
        a_xr.iter()
            .zip(xr0)
            .map(|(&a, &y)| a * (F::one() - y * y)),
    );
    outer_add(&mut readout.w_r, xl0, &a_v, F::one());
    let a_xl = w.w_r.dot(&a_v) - &((xl_hat - xl0) * two);
    let a_u = Array1::from_iter(a_xl.iter().zip(tu0.iter()).enumerate().map(|(k, (&a, &tu))| {
        let mk = state
            .mask
            .as_ref()
            .map(|mm| mm[k])
            .unwrap_or_else(F::one);
        a * mk * (F::one() - tu * tu)
    }));
    outer_add(&mut readout.d, input, &a_u, F::one());
    outer_add(&mut readout.c_re, h0_re, &a_u, F::one());
    outer_add(&mut readout.c_im, h0_im, &a_u, -F::one());

    let rho_re = w.c_re.dot(&a_u) - &(hh_re - h0_re);
    let rho_im = (hh_im - h0_im) * (-F::one()) - &w.c_im.dot(&a_u);
    (rho_re, rho_im)
}

/// Immediate recurrent-parameter gradient `Re[conj(ρ) · ∂μ_h/∂p]` for
/// p ∈ {ν, θ, B}.
pub fn immediate_recurrent<F: Real>(
    cell: &LruCell<F>,
    input: &Array1<F>,
    h_prev_re: &Array1<F>,
    h_prev_im: &Array1<F>,
    rho_re: &Array1<F>,
    rho_im: &Array1<F>,
    out: &mut LruTensors<F>,
) {
    let w = &cell.weights;
    let e = eigen(cell);
    let xb_re = input.dot(&w.b_re);
    let xb_im = input.dot(&w.b_im);
    let n = e.lam_re.len();
    for j in 0..n {
        // dλ/dν = -e^ν λ, dγ/dν = e^ν r² / γ, dλ/dθ = iλ
        let (lr, li) = (e.lam_re[j], e.lam_im[j]);
        let dl_nu_re = -e.exp_nu[j] * lr;
        let dl_nu_im = -e.exp_nu[j] * li;
        let dg_nu = if e.gamma[j] > F::zero() {
            e.exp_nu[j] * e.radius[j] * e.radius[j] / e.gamma[j]
        } else {
            F::zero()
        };
        let dh_nu_re = dl_nu_re * h_prev_re[j] - dl_nu_im * h_prev_im[j] + dg_nu * xb_re[j];
        let dh_nu_im = dl_nu_re * h_prev_im[j] + dl_nu_im * h_prev_re[j] + dg_nu * xb_im[j];
        out.nu[j] += rho_re[j] * dh_nu_re + rho_im[j] * dh_nu_im;

        let dh_th_re = -(li * h_prev_re[j] + lr * h_prev_im[j]);
        let dh_th_im = lr * h_prev_re[j] - li * h_prev_im[j];
        out.theta[j] += rho_re[j] * dh_th_re + rho_im[j] * dh_th_im;
    }
    // ∂h_j/∂B_re[k,j] = γ_j x_k, ∂h_j/∂B_im[k,j] = iγ_j x_k
    let gr = Array1::from_iter((0..n).map(|j| e.gamma[j] * rho_re[j]));
    let gi = Array1::from_iter((0..n).map(|j| e.gamma[j] * rho_im[j]));
    outer_add(&mut out.b_re, input, &gr, F::one());
    outer_add(&mut out.b_im, input, &gi, F::one());
}
