//! First-order optimizers over flat parameter slices. A `Optimizer` instance
//! is bound to a fixed list of parameter tensors (passed as slices in a stable
//! order every step); state buffers are allocated lazily on the first step.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimKind,
    lr0: f64,
    /// total step count for cosine annealing; None keeps the rate constant
    cosine_total: Option<usize>,
    steps: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn sgd(lr: f64, momentum: f64) -> Self {
        Optimizer { kind: OptimKind::Sgd { momentum }, lr0: lr, cosine_total: None, steps: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn adam(lr: f64) -> Self {
        Optimizer {
            kind: OptimKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 },
            lr0: lr,
            cosine_total: None,
            steps: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Enable cosine annealing over `total_steps`: lr_t = lr0/2 * (1 + cos(pi t / T)).
    pub fn with_cosine(mut self, total_steps: usize) -> Self {
        self.cosine_total = Some(total_steps.max(1));
        self
    }

    pub fn steps_taken(&self) -> usize {
        self.steps
    }

    /// Learning rate that will be used for step index `t` (0-based).
    pub fn lr_at(&self, t: usize) -> f64 {
        match self.cosine_total {
            None => self.lr0,
            Some(total) => {
                let frac = (t.min(total) as f64) / total as f64;
                self.lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }

    /// Apply one update. `params` and `grads` must line up pairwise and keep
    /// the same shapes across calls. Any non-finite gradient aborts the step
    /// before touching parameters.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!(
                "optimizer got {} parameter tensors but {} gradient tensors",
                params.len(),
                grads.len()
            )));
        }
        for (slot, (p, g)) in params.iter().zip(grads.iter()).enumerate() {
            if p.len() != g.len() {
                return Err(Error::Shape(format!(
                    "optimizer slot {}: parameter length {} != gradient length {}",
                    slot,
                    p.len(),
                    g.len()
                )));
            }
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Divergence(format!(
                    "non-finite gradient at slot {} index {} (step {})",
                    slot, i, self.steps
                )));
            }
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            if matches!(self.kind, OptimKind::Adam { .. }) {
                self.v = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            }
        }
        let lr = self.lr_at(self.steps);
        match self.kind {
            OptimKind::Sgd { momentum } => {
                for ((p, g), m) in params.iter_mut().zip(grads).zip(&mut self.m) {
                    for i in 0..p.len() {
                        m[i] = momentum * m[i] + g[i];
                        p[i] -= lr * m[i];
                    }
                }
            }
            OptimKind::Adam { beta1, beta2, eps } => {
                let t = (self.steps + 1) as i32;
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
                    for i in 0..p.len() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        p[i] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        self.steps += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_sgd_step() {
        let mut p = [1.0f64];
        let mut opt = Optimizer::sgd(0.1, 0.0);
        opt.step(&mut [&mut p], &[&[2.0]]).unwrap();
        assert!((p[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut p = [0.0f64];
        let mut opt = Optimizer::sgd(1.0, 0.9);
        opt.step(&mut [&mut p], &[&[1.0]]).unwrap(); // buf 1.0, p -1.0
        opt.step(&mut [&mut p], &[&[1.0]]).unwrap(); // buf 1.9, p -2.9
        assert!((p[0] + 2.9).abs() < 1e-12, "p = {}", p[0]);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut p = [0.5f64, -0.5];
        let mut opt = Optimizer::adam(0.01);
        opt.step(&mut [&mut p], &[&[3.0, -0.2]]).unwrap();
        // bias-corrected first step reduces to lr * sign(g) up to eps
        assert!((p[0] - (0.5 - 0.01)).abs() < 1e-6);
        assert!((p[1] - (-0.5 + 0.01)).abs() < 1e-6);
    }

    #[test]
    fn cosine_schedule_values() {
        let opt = Optimizer::adam(0.2).with_cosine(100);
        assert!((opt.lr_at(0) - 0.2).abs() < 1e-15);
        assert!((opt.lr_at(50) - 0.1).abs() < 1e-15, "half-way rate {}", opt.lr_at(50));
        assert!(opt.lr_at(100) < 1e-15);
        // clamped beyond the horizon
        assert!(opt.lr_at(250) < 1e-15);
    }

    #[test]
    fn nan_gradient_fails_fast() {
        let mut p = [1.0f64];
        let before = p;
        let mut opt = Optimizer::adam(0.1);
        let err = opt.step(&mut [&mut p], &[&[f64::NAN]]).unwrap_err();
        assert!(matches!(err, Error::Divergence(_)));
        assert_eq!(p, before, "parameters must be untouched after a failed step");
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = [1.0f64];
        let mut opt = Optimizer::sgd(0.1, 0.0);
        assert!(opt.step(&mut [&mut p], &[&[1.0, 2.0]]).is_err());
    }
}
