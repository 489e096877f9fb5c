//! SGD with Nesterov momentum and the cosine learning-rate schedule.

use std::f64::consts::PI;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    Cosine,
    Constant,
}

/// `lr0 · ½ · (1 + cos(π t / T))`, evaluated per optimizer step.
pub fn cosine_lr(t: usize, total: usize, lr0: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::config("cosine schedule needs at least one step"));
    }
    if t > total {
        return Err(Error::config(format!("step {t} beyond schedule length {total}")));
    }
    if t == total {
        return Ok(0.0);
    }
    Ok(lr0 * 0.5 * (1.0 + (PI * t as f64 / total as f64).cos()))
}

impl Schedule {
    pub fn lr(self, t: usize, total: usize, lr0: f64) -> Result<f64> {
        match self {
            Schedule::Cosine => cosine_lr(t, total, lr0),
            Schedule::Constant => Ok(lr0),
        }
    }
}

/// One Nesterov step with weight decay coupled into the gradient:
///
/// ```text
/// g' = g + wd·p
/// v  = μ·v + g'
/// p  = p − lr·(g' + μ·v)
/// ```
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::dim(format!(
            "sgd_step: {} params, {} grads, {} velocity entries",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient {} at index {i}", grads[i])));
    }
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        let d = g + weight_decay * *p;
        *v = momentum * *v + d;
        *p -= lr * (d + momentum * *v);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, 0.1).unwrap(), 0.1);
        assert_eq!(cosine_lr(100, 100, 0.1).unwrap(), 0.0);
        assert!((cosine_lr(50, 100, 0.1).unwrap() - 0.05).abs() < 1e-15);
        assert!(matches!(cosine_lr(0, 0, 0.1), Err(Error::Config(_))));
    }

    #[test]
    fn vanilla_step() {
        let (mut p, mut v) = (vec![1.0], vec![0.0]);
        sgd_step(&mut p, &[0.5], &mut v, 1.0, 0.0, 0.0).unwrap();
        assert_eq!(p, vec![0.5]);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let (mut p, mut v) = (vec![1.0, -2.0], vec![0.0, 0.0]);
        sgd_step(&mut p, &[0.0, 0.0], &mut v, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn nesterov_two_steps() {
        // v1 = 1, p1 = -0.1·(1 + 0.9) ; v2 = 1.9, p2 = p1 - 0.1·(1 + 1.71)
        let (mut p, mut v) = (vec![0.0], vec![0.0]);
        sgd_step(&mut p, &[1.0], &mut v, 0.1, 0.9, 0.0).unwrap();
        assert!((p[0] + 0.19).abs() < 1e-15);
        sgd_step(&mut p, &[1.0], &mut v, 0.1, 0.9, 0.0).unwrap();
        assert!((p[0] + 0.461).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_aborts() {
        let (mut p, mut v) = (vec![0.0], vec![0.0]);
        assert!(matches!(
            sgd_step(&mut p, &[f64::NAN], &mut v, 0.1, 0.9, 0.0),
            Err(Error::Numeric(_))
        ));
    }
}
