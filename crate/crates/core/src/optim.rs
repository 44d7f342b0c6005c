//! SGD with heavy-ball momentum and the cosine learning-rate schedule.

use std::f64::consts::PI;

use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient in parameter {param} at element {index}")]
    NonFiniteGradient { param: usize, index: usize },
    #[error("{params} parameters but {grads} gradients / {buffers} momentum buffers")]
    Misaligned {
        params: usize,
        grads: usize,
        buffers: usize,
    },
    #[error("learning rate must be positive, got {0}")]
    BadLearningRate(f64),
    #[error("schedule needs total_epochs > 0 and epoch < total_epochs (got {epoch} of {total})")]
    BadSchedule { epoch: usize, total: usize },
}

/// Hyper-parameters of one SGD update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdParams {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// One momentum-SGD update over parallel parameter/gradient/velocity lists.
///
/// Weight decay is coupled: `v ← μ·v + g + λ·θ`, then `θ ← θ − lr·v`.
/// Nothing is modified when any gradient is non-finite.
pub fn sgd_step<S: Scalar>(
    params: &mut [&mut [S]],
    grads: &[&[S]],
    velocity: &mut [Vec<S>],
    hp: SgdParams,
) -> Result<(), OptimError> {
    if !(hp.lr > 0.0) {
        return Err(OptimError::BadLearningRate(hp.lr));
    }
    let aligned = params.len() == grads.len()
        && params.len() == velocity.len()
        && params
            .iter()
            .zip(grads)
            .zip(velocity.iter())
            .all(|((p, g), v)| p.len() == g.len() && p.len() == v.len());
    if !aligned {
        return Err(OptimError::Misaligned {
            params: params.len(),
            grads: grads.len(),
            buffers: velocity.len(),
        });
    }
    for (param, g) in grads.iter().enumerate() {
        if let Some(index) = g.iter().position(|v| !v.is_finite()) {
            return Err(OptimError::NonFiniteGradient { param, index });
        }
    }
    let (lr, mu, wd) = (S::lit(hp.lr), S::lit(hp.momentum), S::lit(hp.weight_decay));
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        for ((pv, &gv), vv) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
            *vv = mu * *vv + gv + wd * *pv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

/// `lr0/2 · (1 + cos(π·epoch/total_epochs))`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr0: f64) -> Result<f64, OptimError> {
    if total_epochs == 0 || epoch >= total_epochs {
        return Err(OptimError::BadSchedule {
            epoch,
            total: total_epochs,
        });
    }
    Ok(lr0 / 2.0 * (1.0 + (PI * epoch as f64 / total_epochs as f64).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(param: f64, grad: f64, v: &mut Vec<f64>, lr: f64, momentum: f64, wd: f64) -> f64 {
        let mut p = [param];
        let g = [grad];
        let mut bufs = vec![std::mem::take(v)];
        sgd_step(
            &mut [&mut p[..]],
            &[&g[..]],
            &mut bufs,
            SgdParams {
                lr,
                momentum,
                weight_decay: wd,
            },
        )
        .unwrap();
        *v = bufs.pop().unwrap();
        p[0]
    }

    #[test]
    fn plain_step() {
        let mut v = vec![0.0];
        assert!((step(1.0, 0.5, &mut v, 0.1, 0.0, 0.0) - 0.95).abs() < 1e-15);
    }

    #[test]
    fn momentum_two_steps() {
        let mut v = vec![0.0];
        let p1 = step(0.0, 1.0, &mut v, 0.1, 0.9, 0.0);
        assert!((p1 + 0.1).abs() < 1e-15);
        let p2 = step(p1, 1.0, &mut v, 0.1, 0.9, 0.0);
        assert!((v[0] - 1.9).abs() < 1e-15);
        assert!((p2 + 0.29).abs() < 1e-15);
    }

    #[test]
    fn coupled_weight_decay() {
        let mut v = vec![0.0];
        assert!((step(1.0, 0.0, &mut v, 0.1, 0.0, 0.0005) - 0.99995).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let mut p = [1.0, 2.0];
        let g = [0.1, f64::INFINITY];
        let mut v = vec![vec![0.0; 2]];
        let err = sgd_step(
            &mut [&mut p[..]],
            &[&g[..]],
            &mut v,
            SgdParams {
                lr: 0.1,
                momentum: 0.9,
                weight_decay: 0.0,
            },
        );
        assert_eq!(err, Err(OptimError::NonFiniteGradient { param: 0, index: 1 }));
        assert_eq!(p, [1.0, 2.0]);
    }

    #[test]
    fn rejects_non_positive_lr() {
        let mut p = [1.0];
        let mut v = vec![vec![0.0]];
        assert!(sgd_step(
            &mut [&mut p[..]],
            &[&[0.0][..]],
            &mut v,
            SgdParams {
                lr: 0.0,
                momentum: 0.0,
                weight_decay: 0.0
            }
        )
        .is_err());
    }

    #[test]
    fn cosine_schedule_values() {
        assert_eq!(cosine_lr(0, 160, 0.1).unwrap(), 0.1);
        assert!((cosine_lr(80, 160, 0.1).unwrap() - 0.05).abs() < 1e-15);
        // Closed form: 0.05·(1 + cos(159π/160)) = 0.05·(1 − cos(π/160)).
        let expected = 0.05 * (1.0 - (PI / 160.0).cos());
        let got = cosine_lr(159, 160, 0.1).unwrap();
        assert!((got - expected).abs() < 1e-18);
        assert!((got - 9.6e-6).abs() < 5e-8);
        assert!(cosine_lr(0, 0, 0.1).is_err());
        assert!(cosine_lr(160, 160, 0.1).is_err());
    }
}
