//! Influence traces and the historic+immediate parameter updates built on
//! them. The trace `M = ∂x/∂W` tracks how the recurrent parameters shaped
//! the current recurrent state; it is propagated with the converged latents
//! substituted for the predicted ones, which is exact whenever the internal
//! errors vanish.
//!
//! The tanh RNN keeps a dense `(state × params)` matrix; the LRU's
//! element-wise recurrence collapses the trace to per-unit complex
//! sensitivities, one per recurrent parameter.

use ndarray::{Array1, Array2};

use crate::cells::{lru, tanh, CellGrads, CellParameters, LruTensors, TanhTensors};
use crate::energy::{LatentState, LayerVec, Target};
use crate::error::{Result, TpcError};
use crate::num::Real;
use crate::temporal::TemporalContext;

/// Dense influence matrix: rows index state units, columns the flattened
/// recurrent parameters `[W_ih; W_hh]` in row-major order.
#[derive(Clone, Debug)]
pub struct DenseTrace<F> {
    pub m: Array2<F>,
}

/// Per-unit complex sensitivities for the LRU recurrence. The trace for a
/// `B` column entry is stored once; the sensitivity with respect to the
/// imaginary part is `i` times the stored value.
#[derive(Clone, Debug)]
pub struct DiagonalTrace<F> {
    pub b_re: Array2<F>,
    pub b_im: Array2<F>,
    pub nu_re: Array1<F>,
    pub nu_im: Array1<F>,
    pub theta_re: Array1<F>,
    pub theta_im: Array1<F>,
}

#[derive(Clone, Debug)]
pub enum InfluenceTrace<F> {
    Dense(DenseTrace<F>),
    Diagonal(DiagonalTrace<F>),
}

impl<F: Real> InfluenceTrace<F> {
    /// Zero trace in the layout matching the cell family.
    pub fn zeros(params: &CellParameters<F>) -> Self {
        let dims = params.dims();
        match params {
            CellParameters::Tanh(_) => InfluenceTrace::Dense(DenseTrace {
                m: Array2::zeros((dims.recurrent, params.recurrent_flat_len())),
            }),
            CellParameters::Lru(_) => InfluenceTrace::Diagonal(DiagonalTrace {
                b_re: Array2::zeros((dims.input, dims.recurrent)),
                b_im: Array2::zeros((dims.input, dims.recurrent)),
                nu_re: Array1::zeros(dims.recurrent),
                nu_im: Array1::zeros(dims.recurrent),
                theta_re: Array1::zeros(dims.recurrent),
                theta_im: Array1::zeros(dims.recurrent),
            }),
        }
    }

    /// Number of stored sensitivity entries; a complex entry counts once.
    /// Dense: `n · P`. Diagonal: `n · (d_in + 2)`.
    pub fn element_count(&self) -> usize {
        match self {
            InfluenceTrace::Dense(t) => t.m.len(),
            InfluenceTrace::Diagonal(t) => t.b_re.len() + t.nu_re.len() + t.theta_re.len(),
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            InfluenceTrace::Dense(t) => t.m.iter().all(|x| x.is_finite()),
            InfluenceTrace::Diagonal(t) => {
                t.b_re.iter().all(|x| x.is_finite())
                    && t.b_im.iter().all(|x| x.is_finite())
                    && t.nu_re.iter().all(|x| x.is_finite())
                    && t.nu_im.iter().all(|x| x.is_finite())
                    && t.theta_re.iter().all(|x| x.is_finite())
                    && t.theta_im.iter().all(|x| x.is_finite())
            }
        }
    }

    pub fn expect_dense(&self) -> &DenseTrace<F> {
        match self {
            InfluenceTrace::Dense(t) => t,
            _ => panic!("expected dense trace"),
        }
    }

    pub fn expect_diagonal(&self) -> &DiagonalTrace<F> {
        match self {
            InfluenceTrace::Diagonal(t) => t,
            _ => panic!("expected diagonal trace"),
        }
    }
}

/// `∂F_W/∂μ_h` of the learning-phase energy plus the accumulated readout
/// gradients; both come out of one backward pass through the feedforward
/// cascade.
pub struct LearningTerms<F> {
    pub rho: LayerVec<F>,
    pub readout: CellGrads<F>,
}

/// Runs the learning-phase backward pass at the converged state.
pub fn learning_terms<F: Real>(
    state: &LatentState<F>,
    params: &CellParameters<F>,
    input: &Array1<F>,
    target: Option<Target<F>>,
) -> LearningTerms<F> {
    let mut readout = CellGrads::zeros_like(params);
    let rho = match (params, &mut readout) {
        (CellParameters::Tanh(cell), CellGrads::Tanh(acc)) => {
            LayerVec::Real(tanh::learning_terms(cell, state, target, acc))
        }
        (CellParameters::Lru(cell), CellGrads::Lru(acc)) => {
            let (re, im) = lru::learning_terms(cell, state, input, target, acc);
            LayerVec::Complex { re, im }
        }
        _ => unreachable!(),
    };
    LearningTerms { rho, readout }
}

/// Immediate-only gradient for readout parameters.
pub fn readout_update<F: Real>(
    state: &LatentState<F>,
    params: &CellParameters<F>,
    input: &Array1<F>,
    target: Option<Target<F>>,
) -> CellGrads<F> {
    learning_terms(state, params, input, target).readout
}

/// Immediate recurrent-parameter gradient `ρ · ∂μ/∂W`; this is the plain
/// temporal-PC update, and what the historic term falls back to when the
/// trace is zero.
pub fn immediate_update<F: Real>(
    state: &LatentState<F>,
    context_prev: &TemporalContext<F>,
    input: &Array1<F>,
    params: &CellParameters<F>,
    rho: &LayerVec<F>,
) -> CellGrads<F> {
    let mut out = CellGrads::zeros_like(params);
    add_immediate(state, context_prev, input, params, rho, &mut out);
    out
}

fn add_immediate<F: Real>(
    state: &LatentState<F>,
    context_prev: &TemporalContext<F>,
    input: &Array1<F>,
    params: &CellParameters<F>,
    rho: &LayerVec<F>,
    out: &mut CellGrads<F>,
) {
    match (params, out) {
        (CellParameters::Tanh(cell), CellGrads::Tanh(acc)) => {
            tanh::immediate_recurrent(
                cell,
                state,
                input,
                context_prev.prev.expect_real(),
                rho.expect_real(),
                acc,
            );
        }
        (CellParameters::Lru(cell), CellGrads::Lru(acc)) => {
            let (hp_re, hp_im) = context_prev.prev.expect_complex();
            let (rho_re, rho_im) = rho.expect_complex();
            lru::immediate_recurrent(cell, input, hp_re, hp_im, rho_re, rho_im, acc);
        }
        _ => unreachable!(),
    }
}

/// Historic + immediate gradient contribution for the recurrent parameters
/// (readout entries stay zero). The historic term contracts
/// `ρ · ∂μ/∂x̂_prev` with the previous trace before touching the trace
/// layout, so nothing larger than the trace itself is materialised.
pub fn parameter_update<F: Real>(
    trace: &InfluenceTrace<F>,
    state: &LatentState<F>,
    context_prev: &TemporalContext<F>,
    input: &Array1<F>,
    params: &CellParameters<F>,
    rho: &LayerVec<F>,
) -> Result<CellGrads<F>> {
    let mut out = immediate_update(state, context_prev, input, params, rho);
    match (params, trace, &mut out) {
        (CellParameters::Tanh(cell), InfluenceTrace::Dense(tr), CellGrads::Tanh(acc)) => {
            add_dense_historic(cell, tr, state, rho.expect_real(), acc);
        }
        (CellParameters::Lru(cell), InfluenceTrace::Diagonal(tr), CellGrads::Lru(acc)) => {
            let (rho_re, rho_im) = rho.expect_complex();
            add_diagonal_historic(cell, tr, rho_re, rho_im, acc);
        }
        _ => {
            return Err(TpcError::ShapeMismatch {
                context: "influence trace",
                expected: format!("layout for {}", params.family()),
                actual: "other layout".into(),
            })
        }
    }
    Ok(out)
}

fn add_dense_historic<F: Real>(
    cell: &tanh::TanhCell<F>,
    trace: &DenseTrace<F>,
    state: &LatentState<F>,
    rho: &Array1<F>,
    acc: &mut TanhTensors<F>,
) {
    // q = ρ · ∂μ/∂x̂_prev with the Jacobian at the initial prediction,
    // then hist = q · M^(t-1).
    let mu0 = state.layers[0].initial_prediction.expect_real();
    let scaled = Array1::from_iter(
        rho.iter()
            .zip(mu0)
            .map(|(&r, &m)| r * cell.activation.derivative_from_output(m)),
    );
    let q = cell.weights.w_hh.dot(&scaled);
    let hist = q.dot(&trace.m);
    let d_in = cell.weights.w_ih.nrows();
    let n = cell.weights.w_hh.nrows();
    for k in 0..d_in {
        let mut row = acc.w_ih.row_mut(k);
        for i in 0..n {
            row[i] += hist[k * n + i];
        }
    }
    for m in 0..n {
        let mut row = acc.w_hh.row_mut(m);
        for i in 0..n {
            row[i] += hist[(d_in + m) * n + i];
        }
    }
}

fn add_diagonal_historic<F: Real>(
    cell: &lru::LruCell<F>,
    trace: &DiagonalTrace<F>,
    rho_re: &Array1<F>,
    rho_im: &Array1<F>,
    acc: &mut LruTensors<F>,
) {
    let e = lru::eigen(cell);
    let n = rho_re.len();
    // w_j = conj(ρ_j) · λ_j; gradient for parameter p is Re[w_j · T_{p,j}],
    // and for the imaginary half of B, Re[w_j · i·T] = -Im[w_j · T].
    let mut w_re = Array1::<F>::zeros(n);
    let mut w_im = Array1::<F>::zeros(n);
    for j in 0..n {
        w_re[j] = rho_re[j] * e.lam_re[j] + rho_im[j] * e.lam_im[j];
        w_im[j] = rho_re[j] * e.lam_im[j] - rho_im[j] * e.lam_re[j];
    }
    for j in 0..n {
        acc.nu[j] += w_re[j] * trace.nu_re[j] - w_im[j] * trace.nu_im[j];
        acc.theta[j] += w_re[j] * trace.theta_re[j] - w_im[j] * trace.theta_im[j];
    }
    let d_in = trace.b_re.nrows();
    for k in 0..d_in {
        for j in 0..n {
            let t_re = trace.b_re[[k, j]];
            let t_im = trace.b_im[[k, j]];
            acc.b_re[[k, j]] += w_re[j] * t_re - w_im[j] * t_im;
            acc.b_im[[k, j]] -= w_re[j] * t_im + w_im[j] * t_re;
        }
    }
}

/// Trace recursion `M ← ∂μ/∂W + (∂μ/∂x̂_prev)·M` with every Jacobian
/// evaluated at the converged latents.
pub fn update_trace<F: Real>(
    trace: &InfluenceTrace<F>,
    converged: &LatentState<F>,
    context_prev: &TemporalContext<F>,
    input: &Array1<F>,
    params: &CellParameters<F>,
) -> Result<InfluenceTrace<F>> {
    let next = match (params, trace) {
        (CellParameters::Tanh(cell), InfluenceTrace::Dense(tr)) => InfluenceTrace::Dense(
            update_dense(cell, tr, converged, context_prev.prev.expect_real(), input),
        ),
        (CellParameters::Lru(cell), InfluenceTrace::Diagonal(tr)) => {
            let (hp_re, hp_im) = context_prev.prev.expect_complex();
            InfluenceTrace::Diagonal(update_diagonal(cell, tr, hp_re, hp_im, input))
        }
        _ => {
            return Err(TpcError::ShapeMismatch {
                context: "influence trace",
                expected: format!("layout for {}", params.family()),
                actual: "other layout".into(),
            })
        }
    };
    if !next.is_finite() {
        return Err(TpcError::NonFinite {
            context: "influence trace update".into(),
        });
    }
    Ok(next)
}

fn update_dense<F: Real>(
    cell: &tanh::TanhCell<F>,
    trace: &DenseTrace<F>,
    converged: &LatentState<F>,
    h_prev: &Array1<F>,
    input: &Array1<F>,
) -> DenseTrace<F> {
    let mut next = trace.clone();
    let mut scratch = Array2::zeros(trace.m.dim());
    update_dense_inplace(cell, &mut next, &mut scratch, converged, h_prev, input);
    next
}

/// In-place dense trace recursion reusing a caller-provided scratch buffer;
/// identical arithmetic to [`update_trace`], used on the training hot path
/// where the trace is megabytes.
pub fn update_dense_inplace<F: Real>(
    cell: &tanh::TanhCell<F>,
    trace: &mut DenseTrace<F>,
    scratch: &mut Array2<F>,
    converged: &LatentState<F>,
    h_prev: &Array1<F>,
    input: &Array1<F>,
) {
    let x_hat = converged.layers[0].value.expect_real();
    let n = x_hat.len();
    let d_in = input.len();
    // fold diag(s) into the left GEMM factor: J = diag(s)·W_hh^T, built
    // contiguous so the large product runs at full speed
    let w_hh = &cell.weights.w_hh;
    let jac = Array2::from_shape_fn((n, n), |(i, m)| {
        cell.activation.derivative_from_output(x_hat[i]) * w_hh[[m, i]]
    });
    ndarray::linalg::general_mat_mul(F::one(), &jac, &trace.m, F::zero(), scratch);
    for (i, mut row) in scratch.rows_mut().into_iter().enumerate() {
        let si = cell.activation.derivative_from_output(x_hat[i]);
        // immediate influence lands on this unit's own weight column
        for k in 0..d_in {
            row[k * n + i] += si * input[k];
        }
        for k in 0..n {
            row[(d_in + k) * n + i] += si * h_prev[k];
        }
    }
    std::mem::swap(&mut trace.m, scratch);
}

fn update_diagonal<F: Real>(
    cell: &lru::LruCell<F>,
    trace: &DiagonalTrace<F>,
    h_prev_re: &Array1<F>,
    h_prev_im: &Array1<F>,
    input: &Array1<F>,
) -> DiagonalTrace<F> {
    let w = &cell.weights;
    let e = lru::eigen(cell);
    let n = e.lam_re.len();
    let d_in = input.len();
    let xb_re = input.dot(&w.b_re);
    let xb_im = input.dot(&w.b_im);
    let mut next = trace.clone();
    let cmul = |a_re: F, a_im: F, b_re: F, b_im: F| (a_re * b_re - a_im * b_im, a_re * b_im + a_im * b_re);
    for j in 0..n {
        let (lr, li) = (e.lam_re[j], e.lam_im[j]);
        // ν: immediate = (dλ/dν)·ĥ_prev + (dγ/dν)·(xB)
        let dl_re = -e.exp_nu[j] * lr;
        let dl_im = -e.exp_nu[j] * li;
        let dg = if e.gamma[j] > F::zero() {
            e.exp_nu[j] * e.radius[j] * e.radius[j] / e.gamma[j]
        } else {
            F::zero()
        };
        let (im_re, im_im) = cmul(dl_re, dl_im, h_prev_re[j], h_prev_im[j]);
        let (old_re, old_im) = cmul(lr, li, trace.nu_re[j], trace.nu_im[j]);
        next.nu_re[j] = im_re + dg * xb_re[j] + old_re;
        next.nu_im[j] = im_im + dg * xb_im[j] + old_im;
        // θ: immediate = iλ·ĥ_prev
        let (th_re, th_im) = cmul(-li, lr, h_prev_re[j], h_prev_im[j]);
        let (old_re, old_im) = cmul(lr, li, trace.theta_re[j], trace.theta_im[j]);
        next.theta_re[j] = th_re + old_re;
        next.theta_im[j] = th_im + old_im;
        // B column: immediate = γ·x_k
        for k in 0..d_in {
            let (old_re, old_im) = cmul(lr, li, trace.b_re[[k, j]], trace.b_im[[k, j]]);
            next.b_re[[k, j]] = e.gamma[j] * input[k] + old_re;
            next.b_im[[k, j]] = old_im;
        }
    }
    next
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::{init_parameters, CellFamily, Dims, LruInit};
    use crate::temporal::{step, TemporalContext};
    use crate::energy::InferenceConfig;
    use crate::num::one_hot;

    fn tanh_params(seed: u64) -> CellParameters<f64> {
        let dims = Dims {
            input: 3,
            recurrent: 4,
            hidden: 4,
            output: 3,
        };
        init_parameters(CellFamily::TanhRnn, dims, 0.0, LruInit::default(), seed).unwrap()
    }

    #[test]
    fn first_step_trace_is_immediate_influence_only() {
        let params = tanh_params(1);
        let ctx = TemporalContext::initial(&params, None);
        let input = one_hot::<f64>(1, 3);
        let icfg = InferenceConfig::new(0, 0.1, 0.0).unwrap();
        let out = step(&ctx, &input, None, &params, &icfg).unwrap();
        let zero = InfluenceTrace::zeros(&params);
        let t1 = update_trace(&zero, &out.converged, &ctx, &input, &params).unwrap();
        // with M^(0) = 0 the historic part vanishes; check the immediate
        // entries directly
        let x_hat = out.converged.layers[0].value.expect_real();
        let m = &t1.expect_dense().m;
        let n = 4;
        for i in 0..n {
            let si = 1.0 - x_hat[i] * x_hat[i];
            for k in 0..3 {
                assert!((m[[i, k * n + i]] - si * input[k]).abs() < 1e-14);
            }
            // h_prev is zero so the w_hh block must be zero
            for k in 0..n {
                assert_eq!(m[[i, (3 + k) * n + i]], 0.0);
            }
            // off-column entries are zero at the first step
            for p in 0..m.ncols() {
                if p % n != i {
                    assert_eq!(m[[i, p]], 0.0);
                }
            }
        }
    }

    #[test]
    fn identity_cell_with_unit_recurrence_telescopes_immediates() {
        // g = x·W_ih + h_prev·W_hh with W_hh = I and identity activation:
        // the trace is the running sum of immediate influences.
        let dims = Dims {
            input: 2,
            recurrent: 3,
            hidden: 3,
            output: 2,
        };
        let mut params = init_parameters::<f64>(CellFamily::TanhRnn, dims, 0.0, LruInit::default(), 7)
            .unwrap();
        if let CellParameters::Tanh(c) = &mut params {
            c.activation = crate::cells::Activation::Identity;
            c.weights.w_hh.fill(0.0);
            for i in 0..3 {
                c.weights.w_hh[[i, i]] = 1.0;
            }
        }
        let icfg = InferenceConfig::new(0, 0.1, 0.0).unwrap();
        let mut ctx = TemporalContext::initial(&params, None);
        let mut trace = InfluenceTrace::zeros(&params);
        let mut sum_immediate = Array2::<f64>::zeros(trace.expect_dense().m.dim());
        for t in 0..4 {
            let input = one_hot::<f64>(t % 2, 2);
            let out = step(&ctx, &input, None, &params, &icfg).unwrap();
            // immediate influence of this step alone
            let zero = InfluenceTrace::zeros(&params);
            let imm = update_trace(&zero, &out.converged, &ctx, &input, &params).unwrap();
            sum_immediate += &imm.expect_dense().m;
            trace = update_trace(&trace, &out.converged, &ctx, &input, &params).unwrap();
            ctx = out.context;
        }
        let diff = (&trace.expect_dense().m - &sum_immediate)
            .iter()
            .map(|x| x.abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12, "max diff {diff}");
    }

    #[test]
    fn trace_update_is_affine_in_previous_trace() {
        let params = tanh_params(3);
        let ctx = TemporalContext::initial(&params, None);
        let input = one_hot::<f64>(2, 3);
        let icfg = InferenceConfig::new(2, 0.2, 0.0).unwrap();
        let out = step(&ctx, &input, None, &params, &icfg).unwrap();

        let shape = InfluenceTrace::zeros(&params).expect_dense().m.dim();
        let m1 = Array2::from_shape_fn(shape, |(i, j)| ((i * 31 + j * 7) % 13) as f64 * 0.01);
        let m2 = Array2::from_shape_fn(shape, |(i, j)| ((i * 17 + j * 3) % 11) as f64 * 0.02 - 0.1);
        let (a, b) = (0.7, -1.3);
        let upd = |m: Array2<f64>| {
            update_trace(
                &InfluenceTrace::Dense(DenseTrace { m }),
                &out.converged,
                &ctx,
                &input,
                &params,
            )
            .unwrap()
            .expect_dense()
            .m
            .clone()
        };
        let lhs = upd(&m1 * a + &m2 * b);
        let u1 = upd(m1);
        let u2 = upd(m2);
        let u0 = upd(Array2::zeros(shape));
        let rhs = &u1 * a + &u2 * b - &u0 * (a + b - 1.0);
        let diff = (&lhs - &rhs).iter().map(|x| x.abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12, "max diff {diff}");
    }

    #[test]
    fn zero_trace_reduces_parameter_update_to_the_immediate_term() {
        let params = tanh_params(5);
        let ctx = TemporalContext::initial(&params, None);
        let input = one_hot::<f64>(0, 3);
        let icfg = InferenceConfig::new(3, 0.5, 0.9).unwrap();
        let target = crate::energy::Target::new(1);
        let out = step(&ctx, &input, Some(target), &params, &icfg).unwrap();
        let lt = learning_terms(&out.converged, &params, &input, Some(target));
        let zero = InfluenceTrace::zeros(&params);
        let with_trace =
            parameter_update(&zero, &out.converged, &ctx, &input, &params, &lt.rho).unwrap();
        let immediate = immediate_update(&out.converged, &ctx, &input, &params, &lt.rho);
        assert_eq!(with_trace.to_flat(), immediate.to_flat());
    }

    #[test]
    fn trace_layout_mismatch_is_a_structural_error() {
        let params = tanh_params(6);
        let dims = Dims {
            input: 3,
            recurrent: 4,
            hidden: 4,
            output: 3,
        };
        let lru = init_parameters::<f64>(CellFamily::Lru, dims, 0.0, LruInit::default(), 6).unwrap();
        let wrong = InfluenceTrace::zeros(&lru);
        let ctx = TemporalContext::initial(&params, None);
        let input = one_hot::<f64>(0, 3);
        let icfg = InferenceConfig::new(0, 0.1, 0.0).unwrap();
        let out = step(&ctx, &input, None, &params, &icfg).unwrap();
        assert!(update_trace(&wrong, &out.converged, &ctx, &input, &params).is_err());
    }

    #[test]
    fn vanishing_lambda_makes_diagonal_trace_immediate_only() {
        let dims = Dims {
            input: 2,
            recurrent: 3,
            hidden: 3,
            output: 2,
        };
        let mut params =
            init_parameters::<f64>(CellFamily::Lru, dims, 0.0, LruInit::default(), 8).unwrap();
        if let CellParameters::Lru(c) = &mut params {
            c.weights.nu.fill(4.0); // |λ| ≈ 2e-24
        }
        let input = ndarray::array![0.7, -0.4];
        let mut prev_garbage = InfluenceTrace::zeros(&params);
        if let InfluenceTrace::Diagonal(t) = &mut prev_garbage {
            t.b_re.fill(123.0);
            t.nu_re.fill(-7.0);
            t.theta_im.fill(9.0);
        }
        let ctx = TemporalContext::initial(&params, None);
        let hp = ctx.prev.expect_complex();
        let CellParameters::Lru(cell) = &params else { unreachable!() };
        let with_history = update_diagonal(cell, prev_garbage.expect_diagonal(), hp.0, hp.1, &input);
        let zero = InfluenceTrace::zeros(&params);
        let immediate = update_diagonal(cell, zero.expect_diagonal(), hp.0, hp.1, &input);
        let diff = (&with_history.b_re - &immediate.b_re)
            .iter()
            .chain((&with_history.nu_re - &immediate.nu_re).iter())
            .map(|x| x.abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12, "history should be annihilated, diff {diff}");
    }

    #[test]
    fn diagonal_trace_memory_is_exactly_n_times_input_plus_two() {
        let dims = Dims {
            input: 7,
            recurrent: 5,
            hidden: 4,
            output: 3,
        };
        let params = init_parameters::<f64>(CellFamily::Lru, dims, 0.0, LruInit::default(), 9).unwrap();
        let trace = InfluenceTrace::zeros(&params);
        assert_eq!(trace.element_count(), 5 * (7 + 2));
    }
}

#[cfg(test)]
mod readout_tests {
    use super::*;
    use crate::cells::{init_parameters, CellFamily, Dims, LruInit};
    use crate::energy::{InferenceConfig, Target};
    use crate::num::one_hot;
    use crate::temporal::{step, TemporalContext};

    #[test]
    fn unsupervised_feedforward_state_has_zero_readout_gradient() {
        for family in [CellFamily::TanhRnn, CellFamily::Lru] {
            let dims = Dims {
                input: 3,
                recurrent: 4,
                hidden: 4,
                output: 3,
            };
            let params =
                init_parameters::<f64>(family, dims, 0.0, LruInit::default(), 41).unwrap();
            let ctx = TemporalContext::initial(&params, None);
            let input = one_hot::<f64>(1, 3);
            let icfg = InferenceConfig::new(5, 0.3, 0.9).unwrap();
            let out = step(&ctx, &input, None, &params, &icfg).unwrap();
            let g = readout_update(&out.converged, &params, &input, None);
            assert!(g.to_flat().iter().all(|&x| x == 0.0), "{family}");
        }
    }

    #[test]
    fn niter0_readout_equals_spatial_bp_readout() {
        let dims = Dims {
            input: 3,
            recurrent: 4,
            hidden: 4,
            output: 3,
        };
        let params =
            init_parameters::<f64>(CellFamily::TanhRnn, dims, 0.0, LruInit::default(), 42)
                .unwrap();
        let seq = crate::tasks::Sequence::<f64>::from_tokens(
            vec![0, 2, 1],
            vec![Some(2), Some(0), Some(1)],
            vec![true; 3],
            3,
        );
        let icfg = InferenceConfig::new(0, 0.9, 0.9).unwrap();
        let mut ctx = TemporalContext::initial(&params, None);
        let mut accumulated = CellGrads::zeros_like(&params);
        for t in 0..seq.len() {
            let input = seq.input_row(t);
            let target = seq.targets[t].map(Target::new);
            let out = step(&ctx, &input, target, &params, &icfg).unwrap();
            accumulated.add_scaled(&readout_update(&out.converged, &params, &input, target), 1.0);
            ctx = out.context;
        }
        let (sp, _) = crate::baselines::spatial_bp_sequence(&seq, &params, None, 0.0).unwrap();
        let (CellGrads::Tanh(a), CellGrads::Tanh(b)) = (&accumulated, &sp) else {
            unreachable!()
        };
        let diff = (&a.w_ho - &b.w_ho).iter().map(|x| x.abs()).fold(0.0, f64::max);
        assert!(diff < 1e-13, "readout diff {diff}");
    }

    #[test]
    fn readout_gradients_are_independent_of_the_trace() {
        let dims = Dims {
            input: 3,
            recurrent: 4,
            hidden: 4,
            output: 3,
        };
        let params =
            init_parameters::<f64>(CellFamily::TanhRnn, dims, 0.0, LruInit::default(), 43)
                .unwrap();
        let ctx = TemporalContext::initial(&params, None);
        let input = one_hot::<f64>(0, 3);
        let icfg = InferenceConfig::new(3, 0.4, 0.9).unwrap();
        let target = Some(Target::new(1));
        let out = step(&ctx, &input, target, &params, &icfg).unwrap();
        // the trace only feeds the recurrent-parameter update
        let lt = learning_terms(&out.converged, &params, &input, target);
        let mut garbage = InfluenceTrace::zeros(&params);
        if let InfluenceTrace::Dense(t) = &mut garbage {
            t.m.fill(123.0);
        }
        let upd = parameter_update(&garbage, &out.converged, &ctx, &input, &params, &lt.rho)
            .unwrap();
        let CellGrads::Tanh(u) = &upd else { unreachable!() };
        assert!(u.w_ho.iter().all(|&x| x == 0.0));
        let CellGrads::Tanh(r) = &lt.readout else { unreachable!() };
        assert!(r.w_ih.iter().all(|&x| x == 0.0));
        assert!(r.w_hh.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn copy_scale_gradient_norms_are_finite_and_clip_holds() {
        let dims = Dims {
            input: 10,
            recurrent: 128,
            hidden: 128,
            output: 10,
        };
        let params =
            init_parameters::<f32>(CellFamily::TanhRnn, dims, 0.0, LruInit::default(), 44)
                .unwrap();
        let seq = crate::tasks::generate_copy_batch::<f32>(1, 45, false).sequences[0].clone();
        let icfg = InferenceConfig::new(4, 0.9, 0.9).unwrap();
        let (grads, _) = crate::trainer::pc_sequence_gradients(
            &seq, &params, &icfg, 0.0, None, true,
        )
        .unwrap();
        let mut flat = grads.to_flat();
        assert!(flat.iter().all(|g| g.is_finite()));
        let pre = crate::optim::clip_global_norm(&mut flat, 2.0f32);
        let post = flat.iter().map(|&g| (g as f64).powi(2)).sum::<f64>().sqrt();
        assert!(pre.is_finite());
        assert!(post <= 2.0 + 1e-5, "post-clip norm {post}");
    }
}
