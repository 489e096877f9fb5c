//! Mixup: convex combinations of input pairs and their labels.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixupConfig {
    /// Both shape parameters of the Beta distribution λ is drawn from.
    pub alpha_mixup: f64,
    pub enabled: bool,
}

impl Default for MixupConfig {
    fn default() -> Self {
        Self {
            alpha_mixup: 1.0,
            enabled: true,
        }
    }
}

impl MixupConfig {
    /// Recipe used for large images.
    pub fn large_image() -> Self {
        Self {
            alpha_mixup: 0.2,
            enabled: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_mixup > 0.0 && self.alpha_mixup.is_finite()) {
            return Err(Error::config(format!(
                "alpha_mixup must be positive, got {}",
                self.alpha_mixup
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixedBatch {
    pub inputs: Tensor,
    pub soft_labels: Tensor,
    pub lambda: f64,
    /// Partner of each row.
    pub partners: Vec<usize>,
}

impl MixedBatch {
    /// Wraps an unmixed batch (λ = 1, identity pairing).
    pub fn unmixed(inputs: Tensor, soft_labels: Tensor) -> Self {
        let n = inputs.shape().first().copied().unwrap_or(0);
        Self {
            inputs,
            soft_labels,
            lambda: 1.0,
            partners: (0..n).collect(),
        }
    }
}

/// Draws one λ ~ Beta(α, α) and a uniform partner permutation, then mixes.
pub fn mixup<R: Rng + ?Sized>(x: &Tensor, y: &Tensor, cfg: &MixupConfig, rng: &mut R) -> Result<MixedBatch> {
    cfg.validate()?;
    let n = batch_len(x, y)?;
    let beta = Beta::new(cfg.alpha_mixup, cfg.alpha_mixup)
        .map_err(|e| Error::config(format!("beta distribution: {e}")))?;
    let lambda = beta.sample(rng);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    mixup_with(x, y, lambda, &perm)
}

/// Mixes row `i` with row `perm[i]` using a fixed λ.
pub fn mixup_with(x: &Tensor, y: &Tensor, lambda: f64, perm: &[usize]) -> Result<MixedBatch> {
    let n = batch_len(x, y)?;
    if perm.len() != n || perm.iter().any(|&j| j >= n) {
        return Err(Error::dim(format!("partner list of length {} for batch of {n}", perm.len())));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::config(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    Ok(MixedBatch {
        inputs: mix_rows(x, lambda, perm)?,
        soft_labels: mix_rows(y, lambda, perm)?,
        lambda,
        partners: perm.to_vec(),
    })
}

fn batch_len(x: &Tensor, y: &Tensor) -> Result<usize> {
    let n = x.shape().first().copied().unwrap_or(0);
    if y.rank() != 2 || y.shape()[0] != n {
        return Err(Error::dim(format!(
            "labels {:?} do not match batch {:?}",
            y.shape(),
            x.shape()
        )));
    }
    if n < 2 {
        return Err(Error::config(format!("mixup needs a batch of at least 2, got {n}")));
    }
    Ok(n)
}

fn mix_rows(t: &Tensor, lambda: f64, perm: &[usize]) -> Result<Tensor> {
    let row = t.numel() / perm.len();
    let src = t.data();
    let mut out = Vec::with_capacity(t.numel());
    for (i, &j) in perm.iter().enumerate() {
        let a = &src[i * row..][..row];
        let b = &src[j * row..][..row];
        if i == j || lambda == 1.0 {
            out.extend_from_slice(a);
        } else {
            out.extend(a.iter().zip(b).map(|(&p, &q)| lambda * p + (1.0 - lambda) * q));
        }
    }
    Tensor::new(t.shape().to_vec(), out)
}
