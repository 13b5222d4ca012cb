//! SGD with momentum, adjustable gradient clipping and a stepwise learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Momentum buffers plus the hyperparameters of the update rule.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    /// One buffer per parameter slice, same lengths.
    pub velocity: Vec<Vec<T>>,
    pub learning_rate: T,
    pub momentum: T,
    pub clip_threshold: T,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(param_sizes: &[usize], learning_rate: T, momentum: T, clip_threshold: T) -> Result<Self> {
        if !(learning_rate > T::zero()) {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        if !(momentum >= T::zero() && momentum < T::one()) {
            return Err(Error::InvalidArgument("momentum must lie in [0, 1)".into()));
        }
        if !(clip_threshold > T::zero()) {
            return Err(Error::InvalidArgument("clip threshold must be positive".into()));
        }
        Ok(OptimizerState {
            velocity: param_sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            learning_rate,
            momentum,
            clip_threshold,
        })
    }
}

/// Clamps every element to `[-threshold / lr, threshold / lr]`, so the step `lr * g`
/// never exceeds `threshold` in magnitude.
pub fn clip_gradients<T: Scalar>(grads: &mut [Vec<T>], threshold: T, learning_rate: T) -> Result<()> {
    if !(threshold > T::zero()) {
        return Err(Error::InvalidArgument(format!(
            "clip threshold must be positive, got {threshold}"
        )));
    }
    if !(learning_rate > T::zero()) {
        return Err(Error::InvalidArgument("learning rate must be positive".into()));
    }
    let bound = threshold / learning_rate;
    for g in grads.iter_mut().flat_map(|v| v.iter_mut()) {
        *g = g.max(-bound).min(bound);
    }
    Ok(())
}

/// Clips `grads`, then applies `v <- m v - lr g; p <- p + v` to each parameter slice.
pub fn sgd_momentum_step<T: Scalar>(
    params: &mut [&mut [T]],
    grads: &mut [Vec<T>],
    state: &mut OptimizerState<T>,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(Error::Shape(format!(
            "optimizer got {} params, {} grads, {} buffers",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    for ((p, g), v) in params.iter().zip(grads.iter()).zip(&state.velocity) {
        if p.len() != g.len() || p.len() != v.len() {
            return Err(Error::Shape(format!(
                "parameter of length {} with gradient {} and buffer {}",
                p.len(),
                g.len(),
                v.len()
            )));
        }
    }
    clip_gradients(grads, state.clip_threshold, state.learning_rate)?;
    let (m, lr) = (state.momentum, state.learning_rate);
    for ((p, g), v) in params.iter_mut().zip(grads.iter()).zip(state.velocity.iter_mut()) {
        for ((pv, &gv), vv) in p.iter_mut().zip(g).zip(v.iter_mut()) {
            *vv = m * *vv - lr * gv;
            *pv += *vv;
        }
    }
    Ok(())
}

/// Stepwise decay: `levels` equal-length phases over the run, multiplying by `gamma` between phases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub gamma: f64,
    pub levels: usize,
}

impl LrSchedule {
    /// 0.1 down to 0.0001 in 4 levels, for a stage trained from scratch.
    pub const FROM_SCRATCH: LrSchedule = LrSchedule {
        initial: 0.1,
        gamma: 0.1,
        levels: 4,
    };

    /// 0.01 down to 0.0001 in 3 levels, for stages warm-started from a trained x2 model.
    pub const WARM_START: LrSchedule = LrSchedule {
        initial: 0.01,
        gamma: 0.1,
        levels: 3,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.initial > 0.0) || !(self.gamma > 0.0 && self.gamma < 1.0) || self.levels == 0 {
            return Err(Error::InvalidArgument(format!(
                "learning-rate schedule must start positive and strictly decrease: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn final_rate(&self) -> f64 {
        self.initial * self.gamma.powi(self.levels as i32 - 1)
    }

    pub fn rate_at(&self, epoch: usize, total_epochs: usize) -> f64 {
        let level = if total_epochs == 0 {
            0
        } else {
            (epoch * self.levels / total_epochs).min(self.levels - 1)
        };
        self.initial * self.gamma.powi(level as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(p: &mut Vec<f64>, g: f64, st: &mut OptimizerState<f64>) {
        let mut grads = vec![vec![g; p.len()]];
        sgd_momentum_step(&mut [p.as_mut_slice()], &mut grads, st).unwrap();
    }

    #[test]
    fn plain_gradient_descent() {
        let mut p = vec![0.0];
        let mut st = OptimizerState::new(&[1], 1.0, 0.0, 10.0).unwrap();
        step(&mut p, 1.0, &mut st);
        assert_eq!(p, vec![-1.0]);
    }

    #[test]
    fn momentum_recurrence_two_steps() {
        let mut p = vec![0.0];
        let mut st = OptimizerState::new(&[1], 0.1, 0.9, 10.0).unwrap();
        step(&mut p, 1.0, &mut st);
        step(&mut p, 1.0, &mut st);
        // v1 = -0.1, p1 = -0.1; v2 = -0.09 - 0.1 = -0.19, p2 = -0.29
        assert!((p[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![0.3, -2.0];
        let mut st = OptimizerState::new(&[2], 0.1, 0.9, 1.0).unwrap();
        step(&mut p, 0.0, &mut st);
        assert_eq!(p, vec![0.3, -2.0]);
    }

    #[test]
    fn clipping_bound_is_threshold_over_lr() {
        let mut g = vec![vec![10.0, -10.0, 0.5]];
        clip_gradients(&mut g, 0.1, 0.1).unwrap();
        assert_eq!(g[0], vec![1.0, -1.0, 0.5]);

        let mut g = vec![vec![10.0]];
        clip_gradients(&mut g, 0.1, 0.05).unwrap();
        assert_eq!(g[0], vec![2.0]);

        let mut g = vec![vec![0.3, -0.2]];
        clip_gradients(&mut g, 1.0, 0.1).unwrap();
        assert_eq!(g[0], vec![0.3, -0.2]);
    }

    #[test]
    fn non_positive_threshold_rejected() {
        assert!(clip_gradients(&mut [vec![1.0f64]], 0.0, 0.1).is_err());
        assert!(clip_gradients(&mut [vec![1.0f64]], -1.0, 0.1).is_err());
    }

    #[test]
    fn schedules_step_down_by_gamma() {
        let s = LrSchedule::FROM_SCRATCH;
        let rates: Vec<f64> = (0..8).map(|e| s.rate_at(e, 8)).collect();
        assert!((rates[0] - 0.1).abs() < 1e-15);
        assert!((rates[7] - 1e-4).abs() < 1e-15);
        assert!(rates.windows(2).all(|w| w[1] <= w[0]));
        assert!((LrSchedule::WARM_START.final_rate() - 1e-4).abs() < 1e-15);
        assert!(LrSchedule { initial: 0.1, gamma: 1.0, levels: 2 }.validate().is_err());
    }
}
