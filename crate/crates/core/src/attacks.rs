//! FGSM and PGD under the ℓ∞ ball, plus robust-accuracy evaluation.

use std::fmt;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::acm::soft_cross_entropy;
use crate::autodiff::Tape;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::BlockCnn;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub step_size: f64,
    pub iterations: usize,
    pub random_start: bool,
    pub input_range: (f64, f64),
}

impl AttackConfig {
    /// PGD-k with ε = 8/255, step 2/255 and a random start.
    pub fn pgd(iterations: usize) -> Self {
        Self {
            epsilon: 8.0 / 255.0,
            step_size: 2.0 / 255.0,
            iterations,
            random_start: true,
            input_range: (0.0, 1.0),
        }
    }

    /// Single full-size step without random start.
    pub fn fgsm(epsilon: f64) -> Self {
        Self {
            epsilon,
            step_size: epsilon,
            iterations: 1,
            random_start: false,
            input_range: (0.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::config(format!("step_size must be positive, got {}", self.step_size)));
        }
        if self.iterations == 0 {
            return Err(Error::config("attack needs at least one iteration"));
        }
        if self.input_range.0 >= self.input_range.1 {
            return Err(Error::config("input range is empty"));
        }
        Ok(())
    }
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self::pgd(20)
    }
}

/// A model the attacks can query: an objective to ascend and its input gradient.
pub trait AttackTarget {
    fn logits(&self, x: &Tensor) -> Result<Tensor>;

    /// Attack objective (summed over the batch) and its gradient w.r.t. `x`.
    fn loss_input_grad(&self, x: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)>;
}

impl AttackTarget for BlockCnn {
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        BlockCnn::logits(self, x)
    }

    /// Cross-entropy; parameters are bound as constants and never touched.
    fn loss_input_grad(&self, x: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
        let mut tape = Tape::new();
        let p = self.bind_constant(&mut tape);
        let xv = tape.variable(x.clone());
        let out = self.forward(&mut tape, &p, xv)?;
        let y = Tensor::one_hot(labels, self.spec().classes)?;
        let loss = soft_cross_entropy(&mut tape, out.logits, &y)?;
        let total = tape.scale(loss, labels.len() as f64);
        tape.backward(total)?;
        let grad = tape.take_grad(xv).unwrap_or_else(|| Tensor::zeros(x.shape()));
        Ok((tape.value(total).item()?, grad))
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Projects `candidate` onto `{v : |v − x| ≤ ε} ∩ [lo, hi]` so that both
/// constraints hold exactly in floating point.
pub fn project(x: f64, candidate: f64, epsilon: f64, range: (f64, f64)) -> f64 {
    let mut v = candidate.clamp(x - epsilon, x + epsilon);
    while v - x > epsilon {
        v = v.next_down();
    }
    while x - v > epsilon {
        v = v.next_up();
    }
    v.clamp(range.0, range.1)
}

fn step(target: &dyn AttackTarget, x: &Tensor, current: &Tensor, labels: &[usize], size: f64, cfg: &AttackConfig) -> Result<Tensor> {
    let (_, g) = target.loss_input_grad(current, labels)?;
    let data = x
        .data()
        .iter()
        .zip(current.data())
        .zip(g.data())
        .map(|((&x0, &c), &gi)| project(x0, c + size * sign(gi), cfg.epsilon, cfg.input_range))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// `clamp(x + ε·sign(∇ₓL))`.
pub fn fgsm(target: &dyn AttackTarget, x: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<Tensor> {
    cfg.validate()?;
    step(target, x, x, labels, cfg.epsilon, cfg)
}

/// `k` projected sign-gradient ascent steps, optionally from a uniform random start.
pub fn pgd<R: Rng + ?Sized>(
    target: &dyn AttackTarget,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<Tensor> {
    cfg.validate()?;
    let mut cur = if cfg.random_start {
        let data = x
            .data()
            .iter()
            .map(|&x0| project(x0, x0 + rng.random_range(-cfg.epsilon..=cfg.epsilon), cfg.epsilon, cfg.input_range))
            .collect();
        Tensor::new(x.shape().to_vec(), data)?
    } else {
        x.clone()
    };
    for _ in 0..cfg.iterations {
        cur = step(target, x, &cur, labels, cfg.step_size, cfg)?;
    }
    Ok(cur)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttackKind {
    None,
    Fgsm,
    Pgd,
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackKind::None => "none",
            AttackKind::Fgsm => "fgsm",
            AttackKind::Pgd => "pgd",
        })
    }
}

impl std::str::FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AttackKind::None),
            "fgsm" => Ok(AttackKind::Fgsm),
            "pgd" => Ok(AttackKind::Pgd),
            other => Err(Error::config(format!("unknown attack {other:?}"))),
        }
    }
}

/// One evaluation report row.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub attack: AttackKind,
    pub epsilon: f64,
    pub iterations: usize,
    pub step_size: f64,
    pub clean_acc: f64,
    pub robust_acc: f64,
    pub n_samples: usize,
    pub seed: u64,
}

pub const EVAL_HEADER: &str = "attack,epsilon,iterations,step_size,clean_acc,robust_acc,n_samples,seed";

impl EvalRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.attack, self.epsilon, self.iterations, self.step_size, self.clean_acc, self.robust_acc, self.n_samples, self.seed
        )
    }
}

pub fn write_eval_csv<W: Write>(mut out: W, rows: &[EvalRow]) -> Result<()> {
    writeln!(out, "{EVAL_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.csv())?;
    }
    Ok(())
}

fn batch_seed(seed: u64, batch: usize) -> u64 {
    seed ^ (batch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn correct(logits: &Tensor, labels: &[usize]) -> Result<usize> {
    Ok(logits.argmax_rows()?.iter().zip(labels).filter(|(p, l)| p == l).count())
}

/// Clean and attacked accuracy over `dataset`. `ε = 0` or `AttackKind::None`
/// skips the attack and reports clean accuracy for both.
pub fn evaluate(
    target: &dyn AttackTarget,
    dataset: &Dataset,
    kind: AttackKind,
    cfg: &AttackConfig,
    batch_size: usize,
    seed: u64,
) -> Result<EvalRow> {
    if dataset.is_empty() {
        return Err(Error::config("cannot evaluate on an empty dataset"));
    }
    let attack = kind != AttackKind::None && cfg.epsilon != 0.0;
    if attack {
        cfg.validate()?;
    }
    let (mut clean, mut robust) = (0, 0);
    let n = dataset.len();
    let bs = batch_size.max(1);
    for (b, start) in (0..n).step_by(bs).enumerate() {
        let idx: Vec<usize> = (start..(start + bs).min(n)).collect();
        let batch = dataset.batch(&idx)?;
        let c = correct(&target.logits(&batch.x)?, &batch.labels)?;
        clean += c;
        robust += if attack {
            let adv = match kind {
                AttackKind::Fgsm => fgsm(target, &batch.x, &batch.labels, cfg)?,
                _ => pgd(target, &batch.x, &batch.labels, cfg, &mut ChaCha8Rng::seed_from_u64(batch_seed(seed, b)))?,
            };
            correct(&target.logits(&adv)?, &batch.labels)?
        } else {
            c
        };
    }
    Ok(EvalRow {
        attack: kind,
        epsilon: if attack { cfg.epsilon } else { 0.0 },
        iterations: if attack { cfg.iterations } else { 0 },
        step_size: if attack { cfg.step_size } else { 0.0 },
        clean_acc: clean as f64 / n as f64,
        robust_acc: robust as f64 / n as f64,
        n_samples: n,
        seed,
    })
}

/// Fraction of `dataset` still classified correctly after a PGD attack.
pub fn robust_accuracy(target: &dyn AttackTarget, dataset: &Dataset, cfg: &AttackConfig, seed: u64) -> Result<f64> {
    let kind = if cfg.epsilon == 0.0 { AttackKind::None } else { AttackKind::Pgd };
    Ok(evaluate(target, dataset, kind, cfg, 128, seed)?.robust_acc)
}

pub fn clean_accuracy(target: &dyn AttackTarget, dataset: &Dataset) -> Result<f64> {
    Ok(evaluate(target, dataset, AttackKind::None, &AttackConfig::default(), 256, 0)?.clean_acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `f(x) = wᵀx` per sample; the attack objective is `−f(x)`.
    struct Linear(Vec<f64>);

    impl AttackTarget for Linear {
        fn logits(&self, x: &Tensor) -> Result<Tensor> {
            let d = self.0.len();
            let n = x.numel() / d;
            let f: Vec<f64> = x.data().chunks(d).map(|r| r.iter().zip(&self.0).map(|(a, b)| a * b).sum()).collect();
            Tensor::new(vec![n, 1], f)
        }

        fn loss_input_grad(&self, x: &Tensor, _: &[usize]) -> Result<(f64, Tensor)> {
            let d = self.0.len();
            let loss = -self.logits(x)?.sum();
            let g: Vec<f64> = (0..x.numel()).map(|i| -self.0[i % d]).collect();
            Ok((loss, Tensor::new(x.shape().to_vec(), g)?))
        }
    }

    #[test]
    fn fgsm_on_linear_model_matches_closed_form() {
        let w = vec![0.5, -2.0, 0.0, 1.0];
        let x = Tensor::new(vec![1, 1, 2, 2], vec![0.5, 0.01, 0.99, 0.3]).unwrap();
        let cfg = AttackConfig::fgsm(8.0 / 255.0);
        let adv = fgsm(&Linear(w.clone()), &x, &[0], &cfg).unwrap();
        for ((a, x0), wi) in adv.data().iter().zip(x.data()).zip(&w) {
            let expect = (x0 - cfg.epsilon * sign(*wi)).clamp(0.0, 1.0);
            assert_eq!(*a, project(*x0, expect, cfg.epsilon, (0.0, 1.0)));
        }
    }

    #[test]
    fn zero_gradient_leaves_input() {
        let x = Tensor::full(&[2, 1, 2, 2], 0.5);
        let adv = fgsm(&Linear(vec![0.0; 4]), &x, &[0, 0], &AttackConfig::fgsm(0.1)).unwrap();
        assert_eq!(adv, x);
    }

    #[test]
    fn range_clamp_binds() {
        assert_eq!(project(0.99, 1.05, 8.0 / 255.0, (0.0, 1.0)), 1.0);
    }

    #[test]
    fn projection_is_exact_for_awkward_values() {
        let eps = 8.0 / 255.0;
        for i in 0..2000 {
            let x = i as f64 / 1999.0;
            for cand in [x + 1.0, x - 1.0, x + eps, x - eps, x + 3.0 * eps / 4.0] {
                let v = project(x, cand, eps, (0.0, 1.0));
                assert!((v - x).abs() <= eps && (0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn single_step_pgd_equals_fgsm() {
        let w = vec![0.5, -2.0, 0.1, 1.0];
        let x = Tensor::new(vec![1, 1, 2, 2], vec![0.5, 0.2, 0.7, 0.3]).unwrap();
        let f = fgsm(&Linear(w.clone()), &x, &[0], &AttackConfig::fgsm(0.05)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = pgd(&Linear(w), &x, &[0], &AttackConfig::fgsm(0.05), &mut rng).unwrap();
        assert_eq!(f, p);
    }

    #[test]
    fn non_positive_epsilon_rejected() {
        let x = Tensor::full(&[1, 1, 2, 2], 0.5);
        let mut cfg = AttackConfig::fgsm(0.0);
        assert!(matches!(fgsm(&Linear(vec![1.0; 4]), &x, &[0], &cfg), Err(Error::Config(_))));
        cfg.epsilon = -0.1;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(pgd(&Linear(vec![1.0; 4]), &x, &[0], &cfg, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn eval_row_csv_columns() {
        let mut buf = Vec::new();
        let row = EvalRow {
            attack: AttackKind::Pgd,
            epsilon: 0.5,
            iterations: 20,
            step_size: 0.25,
            clean_acc: 1.0,
            robust_acc: 0.5,
            n_samples: 4,
            seed: 7,
        };
        write_eval_csv(&mut buf, &[row]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), format!("{EVAL_HEADER}\npgd,0.5,20,0.25,1,0.5,4,7\n"));
    }
}
