//! BPTT and spatial-BP trainers over the same cells. The reverse passes are
//! hand-derived from the cell equations rather than generated from the
//! forward code, so they double as independent gradient oracles.

use ndarray::Array1;

use crate::cells::{lru, tanh, CellGrads, CellParameters};
use crate::cells::tanh::outer_add;
use crate::error::{Result, TpcError};
use crate::num::{cross_entropy, cross_entropy_grad, Real};
use crate::tasks::Sequence;

/// Per-step activation records sufficient for reverse accumulation over the
/// full sequence. Tape length equals sequence length.
pub enum UnrolledTape<F> {
    Tanh {
        /// Hidden states h_1..h_T; the initial state is zero.
        hidden: Vec<Array1<F>>,
        logits: Vec<Array1<F>>,
    },
    Lru {
        h_re: Vec<Array1<F>>,
        h_im: Vec<Array1<F>>,
        tanh_u: Vec<Array1<F>>,
        x_lru: Vec<Array1<F>>,
        x_r: Vec<Array1<F>>,
        logits: Vec<Array1<F>>,
    },
}

impl<F: Real> UnrolledTape<F> {
    pub fn len(&self) -> usize {
        match self {
            UnrolledTape::Tanh { hidden, .. } => hidden.len(),
            UnrolledTape::Lru { h_re, .. } => h_re.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of stored scalars; grows linearly with sequence length.
    pub fn element_count(&self) -> usize {
        match self {
            UnrolledTape::Tanh { hidden, logits } => {
                hidden.iter().map(|v| v.len()).sum::<usize>()
                    + logits.iter().map(|v| v.len()).sum::<usize>()
            }
            UnrolledTape::Lru {
                h_re,
                h_im,
                tanh_u,
                x_lru,
                x_r,
                logits,
            } => [h_re, h_im, tanh_u, x_lru, x_r, logits]
                .iter()
                .map(|vs| vs.iter().map(|v| v.len()).sum::<usize>())
                .sum(),
        }
    }
}

/// Forward pass over one sequence, recording the tape and the summed
/// per-step cross-entropy.
pub fn record_forward<F: Real>(
    seq: &Sequence<F>,
    params: &CellParameters<F>,
    mask: Option<&Array1<F>>,
    smoothing: F,
) -> Result<(UnrolledTape<F>, F)> {
    let mut loss = F::zero();
    match params {
        CellParameters::Tanh(cell) => {
            let n = cell.dims().recurrent;
            let mut h = Array1::zeros(n);
            let mut hidden = Vec::with_capacity(seq.len());
            let mut logits = Vec::with_capacity(seq.len());
            for t in 0..seq.len() {
                let (h_next, z) = tanh::forward(cell, &seq.input_row(t), &h);
                if let Some(target) = seq.targets[t] {
                    loss += cross_entropy(&z, target, smoothing);
                }
                hidden.push(h_next.clone());
                logits.push(z);
                h = h_next;
            }
            if !loss.is_finite() {
                return Err(TpcError::NonFinite {
                    context: "sequence loss".into(),
                });
            }
            Ok((UnrolledTape::Tanh { hidden, logits }, loss))
        }
        CellParameters::Lru(cell) => {
            let n = cell.dims().recurrent;
            let mut h_re = Array1::zeros(n);
            let mut h_im = Array1::zeros(n);
            let (mut hs_re, mut hs_im) = (Vec::new(), Vec::new());
            let (mut tus, mut xls, mut xrs, mut zs) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for t in 0..seq.len() {
                let ff = lru::forward(cell, &seq.input_row(t), &h_re, &h_im, mask);
                if let Some(target) = seq.targets[t] {
                    loss += cross_entropy(&ff.logits, target, smoothing);
                }
                h_re = ff.h_re.clone();
                h_im = ff.h_im.clone();
                hs_re.push(ff.h_re);
                hs_im.push(ff.h_im);
                tus.push(ff.tanh_u);
                xls.push(ff.x_lru);
                xrs.push(ff.x_r);
                zs.push(ff.logits);
            }
            if !loss.is_finite() {
                return Err(TpcError::NonFinite {
                    context: "sequence loss".into(),
                });
            }
            Ok((
                UnrolledTape::Lru {
                    h_re: hs_re,
                    h_im: hs_im,
                    tanh_u: tus,
                    x_lru: xls,
                    x_r: xrs,
                    logits: zs,
                },
                loss,
            ))
        }
    }
}

/// Exact reverse-accumulated gradients of the summed per-step cross-entropy
/// for one sequence.
pub fn bptt_sequence<F: Real>(
    seq: &Sequence<F>,
    params: &CellParameters<F>,
    mask: Option<&Array1<F>>,
    smoothing: F,
) -> Result<(CellGrads<F>, F)> {
    let (tape, loss) = record_forward(seq, params, mask, smoothing)?;
    let mut grads = CellGrads::zeros_like(params);
    backward(seq, params, mask, smoothing, &tape, true, &mut grads);
    Ok((grads, loss))
}

/// Per-step gradients with the previous hidden state treated as constant.
pub fn spatial_bp_sequence<F: Real>(
    seq: &Sequence<F>,
    params: &CellParameters<F>,
    mask: Option<&Array1<F>>,
    smoothing: F,
) -> Result<(CellGrads<F>, F)> {
    let (tape, loss) = record_forward(seq, params, mask, smoothing)?;
    let mut grads = CellGrads::zeros_like(params);
    backward(seq, params, mask, smoothing, &tape, false, &mut grads);
    Ok((grads, loss))
}

fn backward<F: Real>(
    seq: &Sequence<F>,
    params: &CellParameters<F>,
    mask: Option<&Array1<F>>,
    smoothing: F,
    tape: &UnrolledTape<F>,
    through_time: bool,
    grads: &mut CellGrads<F>,
) {
    match (params, tape, grads) {
        (CellParameters::Tanh(cell), UnrolledTape::Tanh { hidden, logits }, CellGrads::Tanh(g)) => {
            let w = &cell.weights;
            let n = w.w_hh.nrows();
            let t_len = seq.len();
            // carry = (δ_{t+1} ⊙ act')·W_hh^T, the adjoint flowing into h_t
            let mut carry = Array1::<F>::zeros(n);
            for t in (0..t_len).rev() {
                let h_t = &hidden[t];
                let mut delta = carry.clone();
                if let Some(target) = seq.targets[t] {
                    let gz = cross_entropy_grad(&logits[t], target, smoothing);
                    outer_add(&mut g.w_ho, h_t, &gz, F::one());
                    delta += &w.w_ho.dot(&gz);
                }
                let d = Array1::from_iter(
                    delta
                        .iter()
                        .zip(h_t)
                        .map(|(&dl, &h)| dl * cell.activation.derivative_from_output(h)),
                );
                outer_add(&mut g.w_ih, &seq.input_row(t), &d, F::one());
                let h_prev = if t == 0 {
                    Array1::zeros(n)
                } else {
                    hidden[t - 1].clone()
                };
                outer_add(&mut g.w_hh, &h_prev, &d, F::one());
                carry = if through_time {
                    w.w_hh.dot(&d)
                } else {
                    Array1::zeros(n)
                };
            }
        }
        (
            CellParameters::Lru(cell),
            UnrolledTape::Lru {
                h_re,
                h_im,
                tanh_u,
                x_lru,
                x_r,
                logits,
            },
            CellGrads::Lru(g),
        ) => {
            let w = &cell.weights;
            let e = lru::eigen(cell);
            let n = e.lam_re.len();
            let t_len = seq.len();
            let mut carry_re = Array1::<F>::zeros(n);
            let mut carry_im = Array1::<F>::zeros(n);
            for t in (0..t_len).rev() {
                let input = seq.input_row(t);
                let (hp_re, hp_im) = if t == 0 {
                    (Array1::zeros(n), Array1::zeros(n))
                } else {
                    (h_re[t - 1].clone(), h_im[t - 1].clone())
                };
                // readout path
                let mut a_xr = Array1::<F>::zeros(x_r[t].len());
                if let Some(target) = seq.targets[t] {
                    let gz = cross_entropy_grad(&logits[t], target, smoothing);
                    outer_add(&mut g.w_o, &x_r[t], &gz, F::one());
                    a_xr += &w.w_o.dot(&gz);
                }
                let a_v = Array1::from_iter(
                    a_xr.iter()
                        .zip(&x_r[t])
                        .map(|(&a, &y)| a * (F::one() - y * y)),
                );
                outer_add(&mut g.w_r, &x_lru[t], &a_v, F::one());
                let a_xl = w.w_r.dot(&a_v);
                let a_u = Array1::from_iter(a_xl.iter().zip(&tanh_u[t]).enumerate().map(
                    |(k, (&a, &tu))| {
                        let mk = mask.map(|mm| mm[k]).unwrap_or_else(F::one);
                        a * mk * (F::one() - tu * tu)
                    },
                ));
                outer_add(&mut g.d, &input, &a_u, F::one());
                outer_add(&mut g.c_re, &h_re[t], &a_u, F::one());
                outer_add(&mut g.c_im, &h_im[t], &a_u, -F::one());
                // adjoint on h_t: from the readout plus the future state
                let delta_re = w.c_re.dot(&a_u) + &carry_re;
                let delta_im = carry_im.clone() - &w.c_im.dot(&a_u);
                // recurrence parameters
                let xb_re = input.dot(&w.b_re);
                let xb_im = input.dot(&w.b_im);
                for j in 0..n {
                    let (lr, li) = (e.lam_re[j], e.lam_im[j]);
                    let dl_re = -e.exp_nu[j] * lr;
                    let dl_im = -e.exp_nu[j] * li;
                    let dg = if e.gamma[j] > F::zero() {
                        e.exp_nu[j] * e.radius[j] * e.radius[j] / e.gamma[j]
                    } else {
                        F::zero()
                    };
                    let dh_nu_re = dl_re * hp_re[j] - dl_im * hp_im[j] + dg * xb_re[j];
                    let dh_nu_im = dl_re * hp_im[j] + dl_im * hp_re[j] + dg * xb_im[j];
                    g.nu[j] += delta_re[j] * dh_nu_re + delta_im[j] * dh_nu_im;
                    let dh_th_re = -(li * hp_re[j] + lr * hp_im[j]);
                    let dh_th_im = lr * hp_re[j] - li * hp_im[j];
                    g.theta[j] += delta_re[j] * dh_th_re + delta_im[j] * dh_th_im;
                }
                let gr = Array1::from_iter((0..n).map(|j| e.gamma[j] * delta_re[j]));
                let gi = Array1::from_iter((0..n).map(|j| e.gamma[j] * delta_im[j]));
                outer_add(&mut g.b_re, &input, &gr, F::one());
                outer_add(&mut g.b_im, &input, &gi, F::one());
                // adjoint into h_{t-1}: conj(λ) ⊙ δ
                if through_time {
                    for j in 0..n {
                        let (lr, li) = (e.lam_re[j], e.lam_im[j]);
                        carry_re[j] = lr * delta_re[j] + li * delta_im[j];
                        carry_im[j] = lr * delta_im[j] - li * delta_re[j];
                    }
                } else {
                    carry_re.fill(F::zero());
                    carry_im.fill(F::zero());
                }
            }
        }
        _ => unreachable!("tape family mismatch"),
    }
}

/// Mean-over-batch, sum-over-time gradients by full unrolling.
pub fn bptt_gradients<F: Real>(
    batch: &[Sequence<F>],
    params: &CellParameters<F>,
    masks: Option<&[Option<Array1<F>>]>,
    smoothing: F,
) -> Result<(CellGrads<F>, F)> {
    batch_gradients(batch, params, masks, smoothing, bptt_sequence)
}

/// Mean-over-batch, sum-over-time gradients with history detached.
pub fn spatial_bp_gradients<F: Real>(
    batch: &[Sequence<F>],
    params: &CellParameters<F>,
    masks: Option<&[Option<Array1<F>>]>,
    smoothing: F,
) -> Result<(CellGrads<F>, F)> {
    batch_gradients(batch, params, masks, smoothing, spatial_bp_sequence)
}

fn batch_gradients<F: Real>(
    batch: &[Sequence<F>],
    params: &CellParameters<F>,
    masks: Option<&[Option<Array1<F>>]>,
    smoothing: F,
    per_seq: fn(&Sequence<F>, &CellParameters<F>, Option<&Array1<F>>, F) -> Result<(CellGrads<F>, F)>,
) -> Result<(CellGrads<F>, F)> {
    use rayon::prelude::*;
    let results: Vec<Result<(CellGrads<F>, F)>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, seq)| {
            let mask = masks.and_then(|ms| ms[i].as_ref());
            per_seq(seq, params, mask, smoothing)
        })
        .collect();
    let mut grads = CellGrads::zeros_like(params);
    let mut loss = F::zero();
    let scale = F::one() / F::f(batch.len() as f64);
    for r in results {
        let (g, l) = r?;
        grads.add_scaled(&g, scale);
        loss += l * scale;
    }
    Ok((grads, loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::{init_parameters, Activation, CellFamily, Dims, LruInit};
    use crate::num::max_rel_err;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tanh_params(seed: u64) -> CellParameters<f64> {
        let dims = Dims {
            input: 3,
            recurrent: 4,
            hidden: 4,
            output: 3,
        };
        init_parameters(CellFamily::TanhRnn, dims, 0.0, LruInit::default(), seed).unwrap()
    }

    fn random_seq(len: usize, seed: u64) -> Sequence<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tokens = (0..len).map(|_| rng.random_range(0..3)).collect();
        let targets = (0..len).map(|_| Some(rng.random_range(0..3))).collect();
        Sequence::from_tokens(tokens, targets, vec![true; len], 3)
    }

    #[test]
    fn single_step_bptt_equals_spatial_bp() {
        let params = tanh_params(1);
        let seq = random_seq(1, 2);
        let (a, la) = bptt_sequence(&seq, &params, None, 0.0).unwrap();
        let (b, lb) = spatial_bp_sequence(&seq, &params, None, 0.0).unwrap();
        assert_eq!(a.to_flat(), b.to_flat());
        assert_eq!(la, lb);
    }

    #[test]
    fn spatial_bp_equals_bptt_without_recurrence() {
        let mut params = tanh_params(3);
        if let CellParameters::Tanh(c) = &mut params {
            c.weights.w_hh.fill(0.0);
        }
        let seq = random_seq(5, 4);
        let (a, _) = bptt_sequence(&seq, &params, None, 0.0).unwrap();
        let (b, _) = spatial_bp_sequence(&seq, &params, None, 0.0).unwrap();
        let err = max_rel_err(&a.to_flat(), &b.to_flat());
        assert!(err < 1e-12, "err {err}");
    }

    #[test]
    fn recurrent_gradients_differ_under_lagged_targets() {
        let params = tanh_params(5);
        // targets are yesterday's inputs, so credit must flow through time
        let tokens = vec![0usize, 1, 2, 1, 0];
        let targets = vec![None, Some(0), Some(1), Some(2), Some(1)];
        let seq = Sequence::<f64>::from_tokens(tokens, targets, vec![true; 5], 3);
        let (a, _) = bptt_sequence(&seq, &params, None, 0.0).unwrap();
        let (b, _) = spatial_bp_sequence(&seq, &params, None, 0.0).unwrap();
        let (CellGrads::Tanh(ga), CellGrads::Tanh(gb)) = (&a, &b) else {
            unreachable!()
        };
        let diff = (&ga.w_hh - &gb.w_hh).iter().map(|x| x.abs()).fold(0.0, f64::max);
        assert!(diff > 1e-6, "w_hh gradients should differ, diff {diff}");
    }

    #[test]
    fn spatial_bp_matches_fd_of_the_detached_per_step_loss() {
        let params = tanh_params(6);
        let seq = random_seq(4, 7);
        let (g, _) = spatial_bp_sequence(&seq, &params, None, 0.0).unwrap();
        // detached loss: forward with frozen trajectory states as h_prev
        let (tape, _) = record_forward(&seq, &params, None, 0.0).unwrap();
        let UnrolledTape::Tanh { hidden, .. } = &tape else { unreachable!() };
        let hidden = hidden.clone();
        let detached_loss = |p: &CellParameters<f64>| -> f64 {
            let CellParameters::Tanh(cell) = p else { unreachable!() };
            let mut loss = 0.0;
            for t in 0..seq.len() {
                // h_{t-1} frozen from the unperturbed trajectory
                let h_prev = if t == 0 {
                    Array1::zeros(4)
                } else {
                    hidden[t - 1].clone()
                };
                let (_, z) = crate::cells::tanh::forward(cell, &seq.input_row(t), &h_prev);
                if let Some(tgt) = seq.targets[t] {
                    loss += cross_entropy(&z, tgt, 0.0);
                }
            }
            loss
        };
        let base = params.to_flat();
        let mut work = params.clone();
        let mut fd = Vec::new();
        for p in 0..base.len() {
            let mut up = base.clone();
            up[p] += 1e-6;
            work.assign_from_flat(&up);
            let lu = detached_loss(&work);
            let mut dn = base.clone();
            dn[p] -= 1e-6;
            work.assign_from_flat(&dn);
            let ld = detached_loss(&work);
            fd.push((lu - ld) / 2e-6);
        }
        let err = max_rel_err(&g.to_flat(), &fd);
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn linear_cell_bptt_matches_the_closed_form_unroll() {
        // identity activation: h_t = x_t·W_ih + h_{t-1}·W_hh is linear, so
        // dL/dW_hh = Σ_t Σ_{s<=t} h_{s-1} ⊗ (δ_t · (W_hh^T)^{t-s})
        let dims = Dims {
            input: 2,
            recurrent: 3,
            hidden: 3,
            output: 2,
        };
        let mut params =
            init_parameters::<f64>(CellFamily::TanhRnn, dims, 0.0, LruInit::default(), 8)
                .unwrap();
        if let CellParameters::Tanh(c) = &mut params {
            c.activation = Activation::Identity;
        }
        let tokens = vec![0usize, 1, 0];
        let targets = vec![Some(1), Some(0), Some(1)];
        let seq = Sequence::<f64>::from_tokens(tokens, targets, vec![true; 3], 2);
        let (g, _) = bptt_sequence(&seq, &params, None, 0.0).unwrap();
        let CellParameters::Tanh(cell) = &params else { unreachable!() };
        let w = &cell.weights;

        // forward states
        let mut hs = vec![Array1::<f64>::zeros(3)];
        for t in 0..3 {
            let h = seq.input_row(t).dot(&w.w_ih) + hs[t].dot(&w.w_hh);
            hs.push(h);
        }
        // closed form accumulation
        let mut g_whh = ndarray::Array2::<f64>::zeros((3, 3));
        let mut g_wih = ndarray::Array2::<f64>::zeros((2, 3));
        for t in 0..3 {
            let z = hs[t + 1].dot(&w.w_ho);
            let delta = w.w_ho.dot(&crate::num::cross_entropy_grad(
                &z,
                seq.targets[t].unwrap(),
                0.0,
            ));
            // propagate delta back through s = t, t-1, ..., 0
            let mut d = delta.clone();
            for s in (0..=t).rev() {
                for a in 0..3 {
                    for b in 0..3 {
                        g_whh[[a, b]] += hs[s][a] * d[b];
                    }
                }
                for a in 0..2 {
                    for b in 0..3 {
                        g_wih[[a, b]] += seq.input_row(s)[a] * d[b];
                    }
                }
                d = w.w_hh.dot(&d);
            }
        }
        let CellGrads::Tanh(gg) = &g else { unreachable!() };
        let diff_hh = (&gg.w_hh - &g_whh).iter().map(|x| x.abs()).fold(0.0, f64::max);
        let diff_ih = (&gg.w_ih - &g_wih).iter().map(|x| x.abs()).fold(0.0, f64::max);
        assert!(diff_hh < 1e-12 && diff_ih < 1e-12, "hh {diff_hh} ih {diff_ih}");
    }

    #[test]
    fn tape_replay_reproduces_recorded_activations_bitwise() {
        let params = tanh_params(9);
        let seq = random_seq(6, 10);
        let (tape, _) = record_forward(&seq, &params, None, 0.0).unwrap();
        let UnrolledTape::Tanh { hidden, logits } = &tape else { unreachable!() };
        let CellParameters::Tanh(cell) = &params else { unreachable!() };
        let mut h = Array1::<f64>::zeros(4);
        for t in 0..seq.len() {
            let (h_next, z) = crate::cells::tanh::forward(cell, &seq.input_row(t), &h);
            assert!(h_next.iter().zip(&hidden[t]).all(|(a, b)| a.to_bits() == b.to_bits()));
            assert!(z.iter().zip(&logits[t]).all(|(a, b)| a.to_bits() == b.to_bits()));
            h = h_next;
        }
        assert_eq!(tape.len(), seq.len());
    }

    #[test]
    fn label_smoothing_changes_gradients_consistently_with_fd() {
        let params = tanh_params(11);
        let seq = random_seq(3, 12);
        let smoothing = 0.1;
        let (g, _) = bptt_sequence(&seq, &params, None, smoothing).unwrap();
        let loss = |p: &CellParameters<f64>| -> f64 {
            let logits = crate::tasks::sequence_logits(p, &seq);
            (0..seq.len())
                .map(|t| cross_entropy(&logits[t], seq.targets[t].unwrap(), smoothing))
                .sum()
        };
        let base = params.to_flat();
        let mut work = params.clone();
        let mut fd = Vec::new();
        for p in 0..base.len() {
            let mut up = base.clone();
            up[p] += 1e-6;
            work.assign_from_flat(&up);
            let lu = loss(&work);
            let mut dn = base.clone();
            dn[p] -= 1e-6;
            work.assign_from_flat(&dn);
            fd.push((lu - loss(&work)) / 2e-6);
        }
        let err = max_rel_err(&g.to_flat(), &fd);
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn lru_bptt_matches_fd_with_dropout_mask() {
        let dims = Dims {
            input: 2,
            recurrent: 3,
            hidden: 4,
            output: 3,
        };
        let params =
            init_parameters::<f64>(CellFamily::Lru, dims, 0.0, LruInit::default(), 13).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let tokens = (0..4).map(|_| rng.random_range(0..2)).collect();
        let targets = (0..4).map(|_| Some(rng.random_range(0..3))).collect();
        let seq = Sequence::<f64>::from_tokens(tokens, targets, vec![true; 4], 2);
        let mask = Array1::from_vec(vec![1.25, 0.0, 1.25, 1.25]);
        let (g, _) = bptt_sequence(&seq, &params, Some(&mask), 0.0).unwrap();
        let loss = |p: &CellParameters<f64>| -> f64 {
            let CellParameters::Lru(cell) = p else { unreachable!() };
            let mut re = Array1::zeros(3);
            let mut im = Array1::zeros(3);
            let mut total = 0.0;
            for t in 0..seq.len() {
                let ff = crate::cells::lru::forward(cell, &seq.input_row(t), &re, &im, Some(&mask));
                total += cross_entropy(&ff.logits, seq.targets[t].unwrap(), 0.0);
                re = ff.h_re;
                im = ff.h_im;
            }
            total
        };
        let base = params.to_flat();
        let mut work = params.clone();
        let mut fd = Vec::new();
        for p in 0..base.len() {
            let mut up = base.clone();
            up[p] += 1e-6;
            work.assign_from_flat(&up);
            let lu = loss(&work);
            let mut dn = base.clone();
            dn[p] -= 1e-6;
            work.assign_from_flat(&dn);
            fd.push((lu - loss(&work)) / 2e-6);
        }
        let err = max_rel_err(&g.to_flat(), &fd);
        assert!(err < 1e-6, "err {err}");
    }
}
