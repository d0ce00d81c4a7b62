use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Linear warmup to `peak` over `warmup_steps`, then cosine decay to zero at
/// `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn new(peak: f64, warmup_ratio: f64, total_steps: usize) -> Self {
        let warmup_steps = (warmup_ratio * total_steps as f64).ceil() as usize;
        Self {
            peak,
            warmup_steps: warmup_steps.min(total_steps),
            total_steps,
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        0.5 * self.peak * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Adam with decoupled weight decay. Decay applies to matrices only; biases,
/// layer-norm parameters and the logit scale are not decayed.
#[derive(Clone, Debug)]
pub struct AdamW<S> {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    step: i32,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(betas: (f64, f64), weight_decay: f64) -> Self {
        Self {
            betas,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update. `frozen[i]` skips parameter `i` entirely.
    pub fn step(&mut self, params: Vec<&mut Tensor<S>>, grads: &[Tensor<S>], frozen: &[bool], lr: f64) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![S::zero(); p.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let (b1s, b2s) = (S::of(b1), S::of(b2));
        let (one_b1, one_b2) = (S::of(1.0 - b1), S::of(1.0 - b2));
        let step_size = S::of(lr / c1);
        let inv_c2 = S::of(1.0 / c2);
        let eps = S::of(self.eps);
        for (i, p) in params.into_iter().enumerate() {
            if frozen.get(i).copied().unwrap_or(false) {
                continue;
            }
            let decay = if p.rank() == 2 {
                S::of(1.0 - lr * self.weight_decay)
            } else {
                S::one()
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &g), mi), vi) in p.data_mut().iter_mut().zip(grads[i].data()).zip(m).zip(v) {
                *mi = b1s * *mi + one_b1 * g;
                *vi = b2s * *vi + one_b2 * g * g;
                *w = *w * decay - step_size * *mi / ((*vi * inv_c2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_then_cosine() {
        let s = CosineSchedule::new(1e-3, 0.1, 100);
        assert_eq!(s.warmup_steps, 10);
        assert!((s.lr_at(0) - 1e-4).abs() < 1e-18);
        assert!((s.lr_at(9) - 1e-3).abs() < 1e-18);
        assert!((s.lr_at(10) - 1e-3).abs() < 1e-18);
        assert!(s.lr_at(99) < 1e-6);
        for t in 10..99 {
            assert!(s.lr_at(t + 1) <= s.lr_at(t));
        }
    }

    #[test]
    fn zero_warmup() {
        let s = CosineSchedule::new(2.0, 0.0, 4);
        assert_eq!(s.lr_at(0), 2.0);
        assert!((s.lr_at(2) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn adamw_moves_against_gradient() {
        let mut p = Tensor::<f64>::full(&[2, 2], 1.0);
        let g = Tensor::<f64>::full(&[2, 2], 0.5);
        let mut opt = AdamW::new((0.9, 0.98), 0.0);
        opt.step(vec![&mut p], &[g], &[false], 0.1);
        // First Adam step has magnitude lr regardless of gradient scale.
        for &w in p.data() {
            assert!((w - 0.9).abs() < 1e-6);
        }
    }
}
