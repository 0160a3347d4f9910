//! Gradient oracles: finite differences of the energies and losses,
//! brute-force influence matrices from full re-runs, and the cross-checks
//! between forward-mode traces and the hand-derived reverse passes. These
//! back the `gradcheck` command and the acceptance suite; everything here
//! runs at `f64` and works only through forward evaluations of the public
//! surfaces it checks.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::baselines;
use crate::cells::{init_parameters, lru, tanh, CellFamily, CellParameters, Dims, LruInit};
use crate::energy::{compute_energy, EnergyMode, InferenceConfig, LayerVec, Target};
use crate::error::Result;
use crate::num::{cross_entropy, max_rel_err};
use crate::tasks::Sequence;
use crate::temporal::{step, TemporalContext};
use crate::trainer::pc_sequence_gradients;

pub const FD_STEP: f64 = 1e-6;
pub const ORACLE_TOLERANCE: f64 = 1e-6;
pub const OFF_DIAGONAL_TOLERANCE: f64 = 1e-10;

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: &'static str,
    pub max_err: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

impl CheckReport {
    fn new(name: &'static str, max_err: f64, tolerance: f64, detail: String) -> Self {
        Self {
            name,
            max_err,
            tolerance,
            passed: max_err < tolerance,
            detail,
        }
    }
}

fn small_tanh_params(seed: u64) -> CellParameters<f64> {
    let dims = Dims {
        input: 3,
        recurrent: 4,
        hidden: 4,
        output: 3,
    };
    init_parameters(CellFamily::TanhRnn, dims, 0.0, LruInit::default(), seed).unwrap()
}

fn small_lru_params(seed: u64) -> CellParameters<f64> {
    let dims = Dims {
        input: 2,
        recurrent: 3,
        hidden: 4,
        output: 3,
    };
    init_parameters(CellFamily::Lru, dims, 0.0, LruInit::default(), seed).unwrap()
}

fn random_sequence(params: &CellParameters<f64>, len: usize, seed: u64) -> Sequence<f64> {
    let dims = params.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens: Vec<usize> = (0..len).map(|_| rng.random_range(0..dims.input)).collect();
    let targets: Vec<Option<usize>> = (0..len)
        .map(|_| Some(rng.random_range(0..dims.output)))
        .collect();
    let mask = vec![true; len];
    Sequence::from_tokens(tokens, targets, mask, dims.input)
}

/// Total sequence loss by direct forward evaluation (no tape, no adjoints).
fn forward_loss(params: &CellParameters<f64>, seq: &Sequence<f64>) -> f64 {
    let logits = crate::tasks::sequence_logits(params, seq);
    let mut loss = 0.0;
    for t in 0..seq.len() {
        if let Some(target) = seq.targets[t] {
            loss += cross_entropy(&logits[t], target, 0.0);
        }
    }
    loss
}

/// Central finite differences of a scalar function of the parameters.
fn fd_param_gradients(
    params: &CellParameters<f64>,
    loss: &dyn Fn(&CellParameters<f64>) -> f64,
) -> Vec<f64> {
    let base = params.to_flat();
    let mut work = params.clone();
    let mut grads = Vec::with_capacity(base.len());
    for p in 0..base.len() {
        let mut plus = base.clone();
        plus[p] += FD_STEP;
        work.assign_from_flat(&plus);
        let up = loss(&work);
        let mut minus = base.clone();
        minus[p] -= FD_STEP;
        work.assign_from_flat(&minus);
        let down = loss(&work);
        grads.push((up - down) / (2.0 * FD_STEP));
    }
    grads
}

/// BPTT reverse accumulation against central finite differences of the total
/// sequence loss, over every parameter.
pub fn check_bptt_vs_fd() -> Result<CheckReport> {
    let params = small_tanh_params(11);
    let seq = random_sequence(&params, 5, 12);
    let (grads, _) = baselines::bptt_sequence(&seq, &params, None, 0.0)?;
    let fd = fd_param_gradients(&params, &|p| forward_loss(p, &seq));
    let err = max_rel_err(&grads.to_flat(), &fd);
    Ok(CheckReport::new(
        "bptt_vs_finite_differences",
        err,
        ORACLE_TOLERANCE,
        format!("tanh cell, {} parameters, T=5", fd.len()),
    ))
}

/// With zero inference iterations the converged states equal the forward
/// trajectory and the trace-based update must reproduce BPTT exactly.
pub fn check_rtrl_niter0_equals_bptt() -> Result<CheckReport> {
    let params = small_tanh_params(21);
    let seq = random_sequence(&params, 5, 22);
    let icfg = InferenceConfig::new(0, 0.5, 0.0)?;
    let (pc_grads, _) = pc_sequence_gradients(&seq, &params, &icfg, 0.0, None, true)?;
    let (bp_grads, _) = baselines::bptt_sequence(&seq, &params, None, 0.0)?;
    let rec = params.recurrent_flat_len();
    let pc = pc_grads.to_flat();
    let bp = bp_grads.to_flat();
    let err_recurrent = max_rel_err(&pc[..rec], &bp[..rec]);
    let err_readout = max_rel_err(&pc[rec..], &bp[rec..]);
    Ok(CheckReport::new(
        "tpc_rtrl_niter0_equals_bptt",
        err_recurrent.max(err_readout),
        ORACLE_TOLERANCE,
        format!("recurrent err {err_recurrent:.2e}, readout err {err_readout:.2e}"),
    ))
}

/// Same feedforward-limit identity for the LRU cell.
pub fn check_lru_rtrl_niter0_equals_bptt() -> Result<CheckReport> {
    let params = small_lru_params(31);
    let seq = random_sequence(&params, 6, 32);
    let icfg = InferenceConfig::new(0, 0.5, 0.0)?;
    let (pc_grads, _) = pc_sequence_gradients(&seq, &params, &icfg, 0.0, None, true)?;
    let (bp_grads, _) = baselines::bptt_sequence(&seq, &params, None, 0.0)?;
    let err = max_rel_err(&pc_grads.to_flat(), &bp_grads.to_flat());
    Ok(CheckReport::new(
        "lru_tpc_rtrl_niter0_equals_bptt",
        err,
        ORACLE_TOLERANCE,
        "complex cell, T=6".into(),
    ))
}

/// Runs the tPC chain at zero inference iterations and returns the dense
/// trace after the final step.
fn dense_trace_after_run(
    params: &CellParameters<f64>,
    seq: &Sequence<f64>,
) -> Result<Array2<f64>> {
    let icfg = InferenceConfig::new(0, 0.5, 0.0)?;
    let mut ctx = TemporalContext::initial(params, None);
    let mut trace = crate::rtrl::InfluenceTrace::zeros(params);
    for t in 0..seq.len() {
        let input = seq.input_row(t);
        let out = step(&ctx, &input, None, params, &icfg)?;
        trace = crate::rtrl::update_trace(&trace, &out.converged, &ctx, &input, params)?;
        ctx = out.context;
    }
    Ok(trace.expect_dense().m.clone())
}

/// Final hidden state of the plain forward pass under given parameters.
fn final_hidden(params: &CellParameters<f64>, seq: &Sequence<f64>) -> Array1<f64> {
    let CellParameters::Tanh(cell) = params else { unreachable!() };
    let mut h = Array1::zeros(params.dims().recurrent);
    for t in 0..seq.len() {
        let (h_next, _) = tanh::forward(cell, &seq.input_row(t), &h);
        h = h_next;
    }
    h
}

/// Dense influence matrix versus brute-force perturbation of each recurrent
/// parameter through full forward re-runs. `corrupt` flips one trace entry
/// first (a fault-injection hook for the gradcheck command).
pub fn check_dense_trace_vs_perturbation(corrupt: bool) -> Result<CheckReport> {
    let params = small_tanh_params(41);
    let seq = random_sequence(&params, 5, 42);
    let mut m = dense_trace_after_run(&params, &seq)?;
    if corrupt {
        m[[0, 0]] += 0.5;
    }
    let rec = params.recurrent_flat_len();
    let n = params.dims().recurrent;
    let base_flat = params.to_flat();
    let mut work = params.clone();
    let mut expected = Array2::<f64>::zeros((n, rec));
    for p in 0..rec {
        let mut plus = base_flat.clone();
        plus[p] += FD_STEP;
        work.assign_from_flat(&plus);
        let h_up = final_hidden(&work, &seq);
        let mut minus = base_flat.clone();
        minus[p] -= FD_STEP;
        work.assign_from_flat(&minus);
        let h_down = final_hidden(&work, &seq);
        for i in 0..n {
            expected[[i, p]] = (h_up[i] - h_down[i]) / (2.0 * FD_STEP);
        }
    }
    let err = max_rel_err(
        m.as_slice().unwrap(),
        expected.as_slice().unwrap(),
    );
    Ok(CheckReport::new(
        "dense_trace_vs_full_unroll_perturbation",
        err,
        ORACLE_TOLERANCE,
        format!("{n}x{rec} influence matrix, T=5"),
    ))
}

/// Analytic latent gradients against central finite differences of the
/// inference-mode energy, for both cell families over many random states.
pub fn check_inference_gradients(states_per_cell: usize) -> Result<CheckReport> {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for family in [CellFamily::TanhRnn, CellFamily::Lru] {
        let params = match family {
            CellFamily::TanhRnn => small_tanh_params(51),
            CellFamily::Lru => small_lru_params(52),
        };
        let dims = params.dims();
        for trial in 0..states_per_cell {
            let input = Array1::from_shape_fn(dims.input, |_| rng.random_range(-1.0..1.0));
            let prev = match params.initial_recurrent() {
                LayerVec::Real(v) => {
                    LayerVec::Real(v.mapv(|_| rng.random_range(-0.8..0.8)))
                }
                LayerVec::Complex { re, im } => LayerVec::Complex {
                    re: re.mapv(|_| rng.random_range(-0.8..0.8)),
                    im: im.mapv(|_| rng.random_range(-0.8..0.8)),
                },
            };
            let mut state = params.feedforward(&input, &prev, None)?;
            // push latents away from the feedforward fixed point
            for layer in &mut state.layers {
                match &mut layer.value {
                    LayerVec::Real(v) => v.mapv_inplace(|x| x + rng.random_range(-0.5..0.5)),
                    LayerVec::Complex { re, im } => {
                        re.mapv_inplace(|x| x + rng.random_range(-0.5..0.5));
                        im.mapv_inplace(|x| x + rng.random_range(-0.5..0.5));
                    }
                }
            }
            params.refresh_predictions(&mut state, &input);
            let target = if trial % 3 == 0 {
                None
            } else {
                Some(Target::new(trial % dims.output))
            };
            let analytic = params.latent_gradients(&state, &input, target);

            for (li, g) in analytic.iter().enumerate() {
                let flat_g: Vec<f64> = match g {
                    LayerVec::Real(v) => v.to_vec(),
                    LayerVec::Complex { re, im } => {
                        re.iter().chain(im.iter()).copied().collect()
                    }
                };
                let mut fd = Vec::with_capacity(flat_g.len());
                for comp in 0..flat_g.len() {
                    let eval = |delta: f64| -> f64 {
                        let mut s = state.clone();
                        match &mut s.layers[li].value {
                            LayerVec::Real(v) => v[comp] += delta,
                            LayerVec::Complex { re, im } => {
                                if comp < re.len() {
                                    re[comp] += delta;
                                } else {
                                    im[comp - re.len()] += delta;
                                }
                            }
                        }
                        params.refresh_predictions(&mut s, &input);
                        compute_energy(&s, &params, target, EnergyMode::Inference)
                            .unwrap()
                            .total
                    };
                    fd.push((eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP));
                }
                worst = worst.max(max_rel_err(&flat_g, &fd));
            }
        }
    }
    Ok(CheckReport::new(
        "inference_gradients_vs_finite_differences",
        worst,
        ORACLE_TOLERANCE,
        format!("{states_per_cell} random states per cell family"),
    ))
}

/// Diagonal LRU traces against a brute-force dense perturbation oracle:
/// the per-unit entries must match and every cross-unit sensitivity must be
/// numerically zero.
pub fn check_lru_diagonal_vs_dense() -> Result<CheckReport> {
    let params = small_lru_params(61);
    let seq = random_sequence(&params, 4, 62);
    let icfg = InferenceConfig::new(0, 0.5, 0.0)?;
    let mut ctx = TemporalContext::initial(&params, None);
    let mut trace = crate::rtrl::InfluenceTrace::zeros(&params);
    for t in 0..seq.len() {
        let input = seq.input_row(t);
        let out = step(&ctx, &input, None, &params, &icfg)?;
        trace = crate::rtrl::update_trace(&trace, &out.converged, &ctx, &input, &params)?;
        ctx = out.context;
    }
    let diag = trace.expect_diagonal();

    let dims = params.dims();
    let (n, d_in) = (dims.recurrent, dims.input);
    let final_h = |p: &CellParameters<f64>| -> (Array1<f64>, Array1<f64>) {
        let CellParameters::Lru(cell) = p else { unreachable!() };
        let mut re = Array1::zeros(n);
        let mut im = Array1::zeros(n);
        for t in 0..seq.len() {
            let ff = lru::forward(cell, &seq.input_row(t), &re, &im, None);
            re = ff.h_re;
            im = ff.h_im;
        }
        (re, im)
    };

    let rec = params.recurrent_flat_len();
    let base_flat = params.to_flat();
    let mut work = params.clone();
    // dense oracle: (2n) real sensitivities per recurrent parameter
    let mut dense = Array2::<f64>::zeros((2 * n, rec));
    for p in 0..rec {
        let mut plus = base_flat.clone();
        plus[p] += FD_STEP;
        work.assign_from_flat(&plus);
        let (re_up, im_up) = final_h(&work);
        let mut minus = base_flat.clone();
        minus[p] -= FD_STEP;
        work.assign_from_flat(&minus);
        let (re_dn, im_dn) = final_h(&work);
        for j in 0..n {
            dense[[j, p]] = (re_up[j] - re_dn[j]) / (2.0 * FD_STEP);
            dense[[n + j, p]] = (im_up[j] - im_dn[j]) / (2.0 * FD_STEP);
        }
    }

    // flat layout of the recurrent block: nu (n), theta (n), b_re, b_im
    let unit_of_param = |p: usize| -> usize {
        if p < n {
            p
        } else if p < 2 * n {
            p - n
        } else if p < 2 * n + d_in * n {
            (p - 2 * n) % n
        } else {
            (p - 2 * n - d_in * n) % n
        }
    };
    let mut off_diag: f64 = 0.0;
    let mut candidate = Vec::new();
    let mut reference = Vec::new();
    for p in 0..rec {
        let owner = unit_of_param(p);
        for j in 0..n {
            if j != owner {
                off_diag = off_diag.max(dense[[j, p]].abs()).max(dense[[n + j, p]].abs());
            }
        }
        // expected per-unit complex sensitivity from the diagonal trace
        let (t_re, t_im) = if p < n {
            (diag.nu_re[p], diag.nu_im[p])
        } else if p < 2 * n {
            (diag.theta_re[p - n], diag.theta_im[p - n])
        } else if p < 2 * n + d_in * n {
            let q = p - 2 * n;
            (diag.b_re[[q / n, q % n]], diag.b_im[[q / n, q % n]])
        } else {
            // imaginary part of B: sensitivity is i · (stored complex trace)
            let q = p - 2 * n - d_in * n;
            (-diag.b_im[[q / n, q % n]], diag.b_re[[q / n, q % n]])
        };
        candidate.push(t_re);
        candidate.push(t_im);
        reference.push(dense[[owner, p]]);
        reference.push(dense[[n + owner, p]]);
    }
    let diag_err = max_rel_err(&candidate, &reference);
    let passed_off = off_diag < OFF_DIAGONAL_TOLERANCE;
    let mut report = CheckReport::new(
        "lru_diagonal_trace_vs_dense_oracle",
        diag_err,
        ORACLE_TOLERANCE,
        format!("off-diagonal magnitude {off_diag:.2e} (tolerance {OFF_DIAGONAL_TOLERANCE:.0e})"),
    );
    report.passed = report.passed && passed_off;
    Ok(report)
}

/// Learning-phase parameter gradients (immediate + readout, i.e. the plain
/// tPC update) against finite differences of the learning-mode energy with
/// the converged latents held fixed.
pub fn check_learning_energy_gradients() -> Result<CheckReport> {
    let mut worst = 0.0f64;
    for family in [CellFamily::TanhRnn, CellFamily::Lru] {
        let params = match family {
            CellFamily::TanhRnn => small_tanh_params(71),
            CellFamily::Lru => small_lru_params(72),
        };
        let seq = random_sequence(&params, 1, 73);
        let icfg = InferenceConfig::new(4, 0.2, 0.5)?;
        let ctx = TemporalContext::initial(&params, None);
        let input = seq.input_row(0);
        let target = seq.targets[0].map(Target::new);
        let out = step(&ctx, &input, target, &params, &icfg)?;
        let lt = crate::rtrl::learning_terms(&out.converged, &params, &input, target);
        let mut analytic = crate::rtrl::immediate_update(&out.converged, &ctx, &input, &params, &lt.rho);
        analytic.add_scaled(&lt.readout, 1.0);

        // learning energy as a function of the parameters, converged latents
        // and dropout mask fixed
        let values: Vec<LayerVec<f64>> =
            out.converged.layers.iter().map(|l| l.value.clone()).collect();
        let energy_of = |p: &CellParameters<f64>| -> f64 {
            let mut s = p.feedforward(&input, &ctx.prev, None).unwrap();
            for (layer, v) in s.layers.iter_mut().zip(values.iter()) {
                layer.value = v.clone();
            }
            compute_energy(&s, p, target, EnergyMode::Learning).unwrap().total
        };
        let fd = fd_param_gradients(&params, &energy_of);
        worst = worst.max(max_rel_err(&analytic.to_flat(), &fd));
    }
    Ok(CheckReport::new(
        "learning_energy_param_gradients_vs_fd",
        worst,
        ORACLE_TOLERANCE,
        "immediate + readout terms, both cell families".into(),
    ))
}

/// The whole oracle battery, in the order the reports are printed.
pub fn run_all(inject_fault: bool) -> Result<Vec<CheckReport>> {
    Ok(vec![
        check_bptt_vs_fd()?,
        check_rtrl_niter0_equals_bptt()?,
        check_dense_trace_vs_perturbation(inject_fault)?,
        check_inference_gradients(100)?,
        check_lru_diagonal_vs_dense()?,
        check_lru_rtrl_niter0_equals_bptt()?,
        check_learning_energy_gradients()?,
    ])
}
