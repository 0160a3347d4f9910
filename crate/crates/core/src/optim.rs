//! Parameter optimisers and schedules shared by all training algorithms:
//! Adam, SGD with momentum, global gradient-norm clipping, and a cosine
//! schedule with linear warmup. Optimiser state lives on the flattened
//! parameter vector.

use crate::error::{Result, TpcError};
use crate::num::Real;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum OptimiserKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd { momentum: f64 },
}

impl OptimiserKind {
    pub fn adam_default() -> Self {
        OptimiserKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Optimiser<F> {
    pub kind: OptimiserKind,
    /// First moments (Adam) or velocity (SGD).
    pub m: Vec<F>,
    /// Second moments (Adam only).
    pub v: Vec<F>,
    pub step: u64,
}

impl<F: Real> Optimiser<F> {
    pub fn new(kind: OptimiserKind, param_len: usize) -> Self {
        let v_len = match kind {
            OptimiserKind::Adam { .. } => param_len,
            OptimiserKind::Sgd { .. } => 0,
        };
        Self {
            kind,
            m: vec![F::zero(); param_len],
            v: vec![F::zero(); v_len],
            step: 0,
        }
    }

    /// Applies one update in place. Pure in (params, grads, state): identical
    /// inputs produce identical outputs.
    pub fn apply(&mut self, params: &mut [F], grads: &[F], lr: F) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(TpcError::ShapeMismatch {
                context: "optimiser state",
                expected: format!("{}", self.m.len()),
                actual: format!("{}/{}", params.len(), grads.len()),
            });
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(TpcError::NonFinite {
                context: "parameter gradients".into(),
            });
        }
        self.step += 1;
        match self.kind {
            OptimiserKind::Adam { beta1, beta2, eps } => {
                let b1 = F::f(beta1);
                let b2 = F::f(beta2);
                let eps = F::f(eps);
                let corr1 = F::one() - F::f(beta1.powi(self.step as i32));
                let corr2 = F::one() - F::f(beta2.powi(self.step as i32));
                for i in 0..params.len() {
                    let g = grads[i];
                    self.m[i] = b1 * self.m[i] + (F::one() - b1) * g;
                    self.v[i] = b2 * self.v[i] + (F::one() - b2) * g * g;
                    let m_hat = self.m[i] / corr1;
                    let v_hat = self.v[i] / corr2;
                    params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
            OptimiserKind::Sgd { momentum } => {
                let mu = F::f(momentum);
                for i in 0..params.len() {
                    self.m[i] = mu * self.m[i] - lr * grads[i];
                    params[i] += self.m[i];
                }
            }
        }
        Ok(())
    }
}

/// Scales all gradients by `max_norm / ||g||₂` when the global norm exceeds
/// `max_norm`; returns the pre-clip norm.
pub fn clip_global_norm<F: Real>(grads: &mut [F], max_norm: F) -> F {
    assert!(max_norm > F::zero(), "max_norm must be positive");
    let norm = grads.iter().map(|&g| g * g).sum::<F>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            *g *= scale;
        }
    }
    norm
}

/// Linear ramp from 0 to `base_lr` over the warmup fraction, then cosine
/// decay back to 0 at `total_steps`.
pub fn cosine_warmup_lr(step: u64, total_steps: u64, base_lr: f64, warmup_frac: f64) -> f64 {
    assert!(step <= total_steps);
    let warmup = ((total_steps as f64) * warmup_frac).floor().max(0.0) as u64;
    if warmup > 0 && step < warmup {
        return base_lr * step as f64 / warmup as f64;
    }
    if total_steps == warmup {
        return base_lr;
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grads_leave_params_unchanged_but_advance_the_step() {
        let mut opt = Optimiser::<f64>::new(OptimiserKind::adam_default(), 3);
        let mut p = vec![1.0, -2.0, 0.5];
        opt.apply(&mut p, &[0.0; 3], 0.01).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut opt = Optimiser::<f64>::new(OptimiserKind::adam_default(), 1);
        let mut p = vec![0.0];
        opt.apply(&mut p, &[1.0], 0.1).unwrap();
        assert!((p[0] + 0.1).abs() < 1e-8, "delta = {}", p[0]);
    }

    #[test]
    fn adam_three_step_trajectory_matches_hand_rolled_loop() {
        // independent textbook re-implementation on a scalar
        let (b1, b2, eps, lr) = (0.9, 0.999, 1e-8, 0.05);
        let grads = [1.0, -0.5, 0.25];
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 0.3f64);
        let mut expected = Vec::new();
        for (k, &g) in grads.iter().enumerate() {
            let t = (k + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
            expected.push(x);
        }

        let mut opt = Optimiser::<f64>::new(OptimiserKind::adam_default(), 1);
        let mut p = vec![0.3];
        for (k, &g) in grads.iter().enumerate() {
            opt.apply(&mut p, &[g], lr).unwrap();
            assert!((p[0] - expected[k]).abs() < 1e-15, "step {k}");
        }
    }

    #[test]
    fn sgd_with_momentum_accumulates_velocity() {
        let mut opt = Optimiser::<f64>::new(OptimiserKind::Sgd { momentum: 0.5 }, 1);
        let mut p = vec![0.0];
        opt.apply(&mut p, &[1.0], 0.1).unwrap();
        assert!((p[0] + 0.1).abs() < 1e-15);
        opt.apply(&mut p, &[1.0], 0.1).unwrap();
        // velocity = 0.5·(-0.1) - 0.1 = -0.15
        assert!((p[0] + 0.25).abs() < 1e-15);
    }

    #[test]
    fn non_finite_grads_are_rejected() {
        let mut opt = Optimiser::<f64>::new(OptimiserKind::adam_default(), 1);
        let mut p = vec![0.0];
        assert!(opt.apply(&mut p, &[f64::NAN], 0.1).is_err());
    }

    #[test]
    fn clip_examples() {
        let mut g = vec![0.6f64, 0.8];
        let norm = clip_global_norm(&mut g, 2.0);
        assert!((norm - 1.0).abs() < 1e-12);
        assert_eq!(g, vec![0.6, 0.8]);

        let mut g = vec![3.0f64, 4.0];
        let norm = clip_global_norm(&mut g, 2.5);
        assert!((norm - 5.0).abs() < 1e-12);
        assert!((g[0] - 1.5).abs() < 1e-12);
        assert!((g[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn clipping_preserves_direction_and_caps_the_norm() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let g0: Vec<f64> = (0..16).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mut g = g0.clone();
            let pre = clip_global_norm(&mut g, 1.5);
            let post = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(post <= 1.5 + 1e-12);
            if pre > 1.5 {
                // scaled copies stay parallel: cosine similarity 1
                let dot: f64 = g.iter().zip(&g0).map(|(a, b)| a * b).sum();
                let cos = dot / (post * pre);
                assert!((cos - 1.0).abs() < 1e-12);
            } else {
                assert_eq!(g, g0);
            }
        }
    }

    #[test]
    fn cosine_warmup_endpoints() {
        let total = 1000;
        assert_eq!(cosine_warmup_lr(0, total, 0.5, 0.1), 0.0);
        assert!((cosine_warmup_lr(100, total, 0.5, 0.1) - 0.5).abs() < 1e-12);
        assert!(cosine_warmup_lr(total, total, 0.5, 0.1).abs() < 1e-12);
        // monotone ramp inside warmup
        assert!(cosine_warmup_lr(50, total, 0.5, 0.1) < cosine_warmup_lr(99, total, 0.5, 0.1));
    }
}
