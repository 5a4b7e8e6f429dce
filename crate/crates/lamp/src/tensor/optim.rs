//! Adam, global-norm clipping, and the cosine learning-rate ramp.

use super::Tensor;
use crate::error::{Error, Result};

/// Adam with bias correction. State is positional: call `step` with the same
/// parameter order every time.
pub struct Adam {
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update. `lrs` gives the learning rate per parameter tensor, which
    /// is how policy and value heads run at different rates inside a single
    /// step.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Tensor],
        lrs: &[f32],
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != lrs.len() {
            return Err(Error::invalid("adam: params/grads/lrs length mismatch"));
        }
        if self.m.is_empty() {
            for p in params.iter() {
                self.m.push(vec![0.0; p.numel()]);
                self.v.push(vec![0.0; p.numel()]);
            }
        } else if self.m.len() != params.len() {
            return Err(Error::invalid("adam: parameter count changed mid-run"));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            if p.numel() != grads[i].numel() {
                return Err(Error::ShapeMismatch {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: grads[i].shape().to_vec(),
                });
            }
            let lr = lrs[i];
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for ((x, g), (mm, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(grads[i].data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mm = self.beta1 * *mm + (1.0 - self.beta1) * g;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * g * g;
                let mhat = *mm / bc1;
                let vhat = *vv / bc2;
                *x -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

/// Scales all gradients in place so their joint 2-norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f32) -> f32 {
    let mut sq = 0.0f64;
    for g in grads.iter() {
        for &x in g.data() {
            sq += (x as f64) * (x as f64);
        }
    }
    let norm = sq.sqrt() as f32;
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= scale;
            }
        }
    }
    norm
}

/// Cosine ramp from `base` down to 0 over `total` steps.
pub fn cosine_lr(base: f32, step: u64, total: u64) -> f32 {
    if total == 0 {
        return base;
    }
    let frac = (step.min(total) as f64) / (total as f64);
    (base as f64 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())) as f32
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adam_step_moves_by_roughly_lr() {
        // With the first gradient g: mhat = g, vhat = g^2, so the update is
        // lr * g / (|g| + eps) = lr * sign(g) up to eps.
        let mut p = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let g = Tensor::new(vec![3], vec![0.5, -2.0, 1e-3]).unwrap();
        let mut adam = Adam::new();
        adam
            .step(&mut [&mut p], &[g], &[0.01])
            .unwrap();
        let d: Vec<f32> = p
            .data()
            .iter()
            .zip(&[1.0f32, 2.0, 3.0])
            .map(|(a, b)| b - a)
            .collect();
        assert!((d[0] - 0.01).abs() < 1e-6, "step {} not ~lr", d[0]);
        assert!((d[1] + 0.01).abs() < 1e-6, "step {} not ~-lr", d[1]);
        assert!(d[2] > 0.009 && d[2] <= 0.010001);
    }

    #[test]
    fn identical_runs_stay_bit_identical() {
        let mk = || {
            let mut p = Tensor::new(vec![2], vec![0.3, -0.7]).unwrap();
            let mut adam = Adam::new();
            for s in 0..50u64 {
                let g = Tensor::new(
                    vec![2],
                    vec![(s as f32 * 0.1).sin(), (s as f32 * 0.2).cos()],
                )
                .unwrap();
                let lr = cosine_lr(1e-2, s, 50);
                adam.step(&mut [&mut p], &[g], &[lr]).unwrap();
            }
            p.data().to_vec()
        };
        let a = mk();
        let b = mk();
        assert_eq!(
            a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn clip_leaves_small_gradients_alone_and_scales_large_ones() {
        let mut gs = vec![Tensor::new(vec![2], vec![3.0, 4.0]).unwrap()];
        let norm = clip_global_norm(&mut gs, 10.0);
        assert_eq!(norm, 5.0);
        assert_eq!(gs[0].data(), &[3.0, 4.0]);
        let norm = clip_global_norm(&mut gs, 1.0);
        assert_eq!(norm, 5.0);
        let after: f32 = gs[0].data().iter().map(|x| x * x).sum::<f32>().sqrt();
        assert!((after - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(1.0, 0, 100), 1.0);
        assert!((cosine_lr(1.0, 50, 100) - 0.5).abs() < 1e-7);
        assert!(cosine_lr(1.0, 100, 100).abs() < 1e-7);
        // Steps past the schedule stay pinned at the floor.
        assert!(cosine_lr(1.0, 150, 100).abs() < 1e-7);
    }
}
