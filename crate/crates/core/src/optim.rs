//! Numerical helpers shared by the scorer and calibrator trainers.

use std::f64::consts::PI;

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Cosine-annealed learning rate: `min + (base - min)(1 + cos(pi t / T)) / 2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn new(base_lr: f64, total_steps: usize) -> Self {
        Self {
            base_lr,
            min_lr: 0.0,
            total_steps,
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return self.min_lr;
        }
        let t = step.min(self.total_steps) as f64 / self.total_steps as f64;
        self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (PI * t).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepRule {
    /// Constant step size.
    Fixed(f64),
    /// Armijo backtracking: the step halves until the loss drops enough and
    /// doubles after each accepted step.
    Backtracking { initial: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DescentOptions {
    pub max_iters: usize,
    /// Stop once the gradient's Euclidean norm falls below this.
    pub tol: f64,
    pub step: StepRule,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescentOutcome {
    pub params: Vec<f64>,
    /// Objective value before each step, plus the final value.
    pub losses: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Full-batch gradient descent on `objective`, which returns `(loss, gradient)`.
pub fn gradient_descent<F>(objective: F, start: Vec<f64>, opts: &DescentOptions) -> DescentOutcome
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let mut params = start;
    let (mut loss, mut grad) = objective(&params);
    let mut losses = vec![loss];
    let mut step = match opts.step {
        StepRule::Fixed(s) => s,
        StepRule::Backtracking { initial } => initial,
    };
    let mut iterations = 0;
    let mut converged = norm(&grad) < opts.tol;
    while !converged && iterations < opts.max_iters {
        let g2: f64 = grad.iter().map(|g| g * g).sum();
        let (next, next_loss, next_grad) = match opts.step {
            StepRule::Fixed(s) => {
                let next: Vec<f64> = params.iter().zip(&grad).map(|(p, g)| p - s * g).collect();
                let (l, g) = objective(&next);
                (next, l, g)
            }
            StepRule::Backtracking { .. } => loop {
                let next: Vec<f64> = params
                    .iter()
                    .zip(&grad)
                    .map(|(p, g)| p - step * g)
                    .collect();
                let (l, g) = objective(&next);
                if l <= loss - 1e-4 * step * g2 {
                    step = (step * 2.0).min(1e6);
                    break (next, l, g);
                }
                step *= 0.5;
                if step < 1e-20 {
                    // No representable decrease left along the gradient.
                    break (params.clone(), loss, grad.clone());
                }
            },
        };
        let stalled = next == params;
        params = next;
        loss = next_loss;
        grad = next_grad;
        losses.push(loss);
        iterations += 1;
        converged = norm(&grad) < opts.tol;
        if stalled {
            break;
        }
    }
    DescentOutcome {
        params,
        losses,
        iterations,
        converged,
    }
}
