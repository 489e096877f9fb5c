//! Training loop shared by natural training, PGD adversarial training and
//! distillation.

mod checkpoint;
pub mod config;
mod optim;

pub use checkpoint::{Checkpoint, RngState, MAGIC, VERSION};
pub use optim::{cosine_lr, sgd_step, Schedule};

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::acm::{mixacm_objective, soft_cross_entropy, AffineBank, ChannelTransform, DistillConfig};
use crate::attacks::{self, AttackConfig, AttackKind};
use crate::augment::{mixup, MixedBatch, MixupConfig};
use crate::autodiff::Tape;
use crate::data::{batches, Batch, CropFlip, Dataset};
use crate::error::{Error, Result};
use crate::model::BlockCnn;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Natural,
    AdvTrain,
    MixAcm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub seed: u64,
    pub mode: Mode,
    /// Also report PGD-20 robust accuracy each epoch.
    pub eval_robust: bool,
    /// Write `wall_seconds` as 0 so metrics files are reproducible.
    pub deterministic: bool,
    pub augment: CropFlip,
    /// Adversarial training grows ε (and the step size) linearly from 0 to
    /// its target over this many epochs; 0 attacks at full strength at once.
    pub attack_ramp_epochs: usize,
    /// Rescale the gradient to at most this global L2 norm before each step.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            schedule: Schedule::Cosine,
            seed: 0,
            mode: Mode::Natural,
            eval_robust: false,
            deterministic: true,
            augment: CropFlip::default(),
            attack_ramp_epochs: 0,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::config(format!("grad_clip must be positive, got {c}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::config("momentum must lie in [0, 1) and weight_decay be >= 0"));
        }
        Ok(())
    }
}

/// Everything a run reads but does not own.
#[derive(Clone, Debug)]
pub struct RunContext<'a> {
    pub train: &'a Dataset,
    /// Held-out set for per-epoch accuracy; the training set if absent.
    pub eval: Option<&'a Dataset>,
    pub teacher: Option<&'a BlockCnn>,
    pub distill: DistillConfig,
    pub mixup: MixupConfig,
    /// Inner attack of adversarial training.
    pub attack: AttackConfig,
}

impl<'a> RunContext<'a> {
    pub fn new(train: &'a Dataset) -> Self {
        Self {
            train,
            eval: None,
            teacher: None,
            distill: DistillConfig::default(),
            mixup: MixupConfig::default(),
            attack: AttackConfig::pgd(7),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub clean_acc: f64,
    pub robust_acc_pgd20: Option<f64>,
    pub wall_seconds: f64,
}

pub const METRICS_HEADER: &str = "epoch,lr,train_loss,clean_acc,robust_acc_pgd20,wall_seconds";

impl MetricsRow {
    pub fn csv(&self) -> String {
        let robust = self.robust_acc_pgd20.map(|r| r.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.lr, self.train_loss, self.clean_acc, robust, self.wall_seconds
        )
    }
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub struct Trainer<'a> {
    model: BlockCnn,
    affine: Option<AffineBank>,
    velocity: Vec<Vec<f64>>,
    rng: ChaCha8Rng,
    step: usize,
    epoch: usize,
    cfg: TrainConfig,
    ctx: RunContext<'a>,
}

impl<'a> Trainer<'a> {
    pub fn new(model: BlockCnn, cfg: TrainConfig, ctx: RunContext<'a>) -> Result<Self> {
        Self::check(&model, &cfg, &ctx)?;
        let affine = match (cfg.mode, ctx.distill.transform, ctx.teacher) {
            (Mode::MixAcm, ChannelTransform::Affine, Some(t)) => Some(AffineBank::new(
                &t.spec().tap_channels(),
                &model.spec().tap_channels(),
                ctx.distill.transform_side,
                mix_seed(cfg.seed, 3),
            )),
            _ => None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        let mut t = Self {
            model,
            affine,
            velocity: Vec::new(),
            rng,
            step: 0,
            epoch: 0,
            cfg,
            ctx,
        };
        t.velocity = t.param_tensors().map(|p| vec![0.0; p.numel()]).collect();
        Ok(t)
    }

    /// Continues a run from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ckpt: Checkpoint, cfg: TrainConfig, ctx: RunContext<'a>) -> Result<Self> {
        let model = BlockCnn::from_params(ckpt.spec, ckpt.params)?;
        Self::check(&model, &cfg, &ctx)?;
        let mut rng = ChaCha8Rng::from_seed(ckpt.rng.seed);
        rng.set_stream(ckpt.rng.stream);
        rng.set_word_pos(ckpt.rng.word_pos);
        let t = Self {
            model,
            affine: ckpt.affine.map(|(side, p)| AffineBank::from_params(side, p)),
            velocity: ckpt.velocity,
            rng,
            step: ckpt.step as usize,
            epoch: ckpt.epoch as usize,
            cfg,
            ctx,
        };
        let sizes: Vec<usize> = t.param_tensors().map(Tensor::numel).collect();
        if sizes != t.velocity.iter().map(Vec::len).collect::<Vec<_>>() {
            return Err(Error::Consistency("optimizer state does not match parameters".into()));
        }
        Ok(t)
    }

    fn check(model: &BlockCnn, cfg: &TrainConfig, ctx: &RunContext<'_>) -> Result<()> {
        cfg.validate()?;
        if ctx.train.is_empty() {
            return Err(Error::config("training set is empty"));
        }
        if ctx.train.classes() != model.spec().classes {
            return Err(Error::config(format!(
                "dataset has {} classes, model {}",
                ctx.train.classes(),
                model.spec().classes
            )));
        }
        if model.is_frozen() {
            return Err(Error::contract("cannot train a frozen model"));
        }
        match (cfg.mode, ctx.teacher) {
            (Mode::MixAcm, None) => return Err(Error::config("distillation needs a teacher")),
            (Mode::MixAcm, Some(t)) if !t.is_frozen() => {
                return Err(Error::contract("teacher must be frozen before distillation"))
            }
            (Mode::Natural | Mode::AdvTrain, Some(_)) => {
                return Err(Error::config("a teacher is only used in distillation mode"))
            }
            _ => {}
        }
        if cfg.mode == Mode::MixAcm {
            ctx.distill.validate()?;
            if ctx.mixup.enabled {
                ctx.mixup.validate()?;
                if cfg.batch_size < 2 {
                    return Err(Error::config("mixup needs batch_size >= 2"));
                }
            }
        }
        if cfg.mode == Mode::AdvTrain && ctx.attack.epsilon != 0.0 {
            ctx.attack.validate()?;
        }
        Ok(())
    }

    fn param_tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.model
            .params()
            .tensors()
            .iter()
            .chain(self.affine.iter().flat_map(|a| a.params().tensors()))
    }

    pub fn model(&self) -> &BlockCnn {
        &self.model
    }

    pub fn into_model(self) -> BlockCnn {
        self.model
    }

    pub fn affine(&self) -> Option<&AffineBank> {
        self.affine.as_ref()
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.ctx.train.len().div_ceil(self.cfg.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        self.cfg.epochs * self.steps_per_epoch()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            spec: self.model.spec().clone(),
            params: self.model.params().clone(),
            affine: self.affine.as_ref().map(|a| (a.side(), a.params().clone())),
            velocity: self.velocity.clone(),
            step: self.step as u64,
            epoch: self.epoch as u64,
            rng: RngState {
                seed: self.rng.get_seed(),
                stream: self.rng.get_stream(),
                word_pos: self.rng.get_word_pos(),
            },
        }
    }

    /// Inner attack at the current step, scaled down during the ramp.
    pub fn ramped_attack(&self) -> AttackConfig {
        let ramp_steps = self.cfg.attack_ramp_epochs * self.steps_per_epoch();
        if ramp_steps == 0 {
            return self.ctx.attack.clone();
        }
        let scale = ((self.step + 1) as f64 / ramp_steps as f64).min(1.0);
        AttackConfig {
            epsilon: self.ctx.attack.epsilon * scale,
            step_size: self.ctx.attack.step_size * scale,
            ..self.ctx.attack.clone()
        }
    }

    /// Training objective on a batch without updating anything.
    pub fn batch_loss(&mut self, batch: &Batch) -> Result<f64> {
        let mut tape = Tape::new();
        let (loss, _, _) = self.build_loss(&mut tape, batch)?;
        tape.value(loss).item()
    }

    fn build_loss(
        &mut self,
        tape: &mut Tape,
        batch: &Batch,
    ) -> Result<(crate::autodiff::Var, crate::model::BoundParams, Option<crate::acm::BoundAffine>)> {
        let x = self.cfg.augment.apply(&batch.x, &mut self.rng)?;
        let params = self.model.bind(tape);
        match self.cfg.mode {
            Mode::Natural | Mode::AdvTrain => {
                let x = if self.cfg.mode == Mode::AdvTrain && self.ctx.attack.epsilon != 0.0 {
                    let attack = self.ramped_attack();
                    attacks::pgd(&self.model, &x, &batch.labels, &attack, &mut self.rng)?
                } else {
                    x
                };
                let xv = tape.constant(x);
                let out = self.model.forward(tape, &params, xv)?;
                let loss = soft_cross_entropy(tape, out.logits, &batch.y)?;
                Ok((loss, params, None))
            }
            Mode::MixAcm => {
                let teacher = self.ctx.teacher.expect("checked at construction");
                let mixed = if self.ctx.mixup.enabled && batch.labels.len() >= 2 {
                    mixup(&x, &batch.y, &self.ctx.mixup, &mut self.rng)?
                } else {
                    MixedBatch::unmixed(x, batch.y.clone())
                };
                let affine = self.affine.as_ref().map(|a| a.bind(tape));
                let parts = mixacm_objective(
                    tape,
                    &self.model,
                    &params,
                    teacher,
                    &mixed,
                    &self.ctx.distill,
                    affine.as_ref(),
                )?;
                Ok((parts.total, params, affine))
            }
        }
    }

    /// One optimizer step; returns the batch loss before the update.
    pub fn train_step(&mut self, batch: &Batch) -> Result<f64> {
        let lr = self.cfg.schedule.lr(self.step, self.total_steps(), self.cfg.lr0)?;
        let mut tape = Tape::new();
        let (loss, params, affine) = self.build_loss(&mut tape, batch)?;
        let value = tape.value(loss).item()?;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("loss became {value} at step {}", self.step)));
        }
        tape.backward(loss)?;
        let mut grads = params.grads(&tape);
        if let Some(a) = &affine {
            grads.extend(a.params().grads(&tape));
        }
        if let Some(limit) = self.cfg.grad_clip {
            clip_global_norm(&mut grads, limit);
        }
        let tensors = self
            .model
            .params_mut()
            .tensors_mut()
            .iter_mut()
            .chain(self.affine.iter_mut().flat_map(|a| a.params_mut().tensors_mut().iter_mut()));
        for ((p, g), v) in tensors.zip(&grads).zip(self.velocity.iter_mut()) {
            sgd_step(p.data_mut(), g.data(), v, lr, self.cfg.momentum, self.cfg.weight_decay)?;
        }
        self.step += 1;
        Ok(value)
    }

    pub fn train_epoch(&mut self) -> Result<MetricsRow> {
        let start = Instant::now();
        let lr = self.cfg.schedule.lr(self.step, self.total_steps(), self.cfg.lr0)?;
        let train = self.ctx.train;
        let (mut total, mut count) = (0.0, 0usize);
        for batch in batches(train, self.cfg.batch_size, mix_seed(self.cfg.seed, self.epoch as u64 + 1))? {
            let batch = batch?;
            let n = batch.labels.len();
            total += self.train_step(&batch)? * n as f64;
            count += n;
        }
        self.epoch += 1;
        let eval = self.ctx.eval.unwrap_or(train);
        let clean_acc = attacks::clean_accuracy(&self.model, eval)?;
        let robust_acc_pgd20 = if self.cfg.eval_robust {
            let row = attacks::evaluate(&self.model, eval, AttackKind::Pgd, &AttackConfig::pgd(20), 128, self.cfg.seed)?;
            Some(row.robust_acc)
        } else {
            None
        };
        Ok(MetricsRow {
            epoch: self.epoch,
            lr,
            train_loss: total / count.max(1) as f64,
            clean_acc,
            robust_acc_pgd20,
            wall_seconds: if self.cfg.deterministic { 0.0 } else { start.elapsed().as_secs_f64() },
        })
    }

    /// Runs the remaining epochs. With `out_dir`, appends each metrics row
    /// to `metrics.csv` and writes `checkpoints/last.ckpt` after every epoch
    /// and `checkpoints/final.ckpt` at the end.
    pub fn fit(&mut self, out_dir: Option<&Path>) -> Result<Vec<MetricsRow>> {
        let mut metrics = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir.join("checkpoints"))?;
                let path = dir.join("metrics.csv");
                let mut f = if self.epoch == 0 {
                    let mut f = File::create(&path)?;
                    writeln!(f, "{METRICS_HEADER}")?;
                    f
                } else {
                    OpenOptions::new().append(true).open(&path)?
                };
                f.flush()?;
                Some(f)
            }
            None => None,
        };
        let mut rows = Vec::new();
        while self.epoch < self.cfg.epochs {
            let row = self.train_epoch()?;
            if let (Some(f), Some(dir)) = (metrics.as_mut(), out_dir) {
                writeln!(f, "{}", row.csv())?;
                f.flush()?;
                self.checkpoint().save(&dir.join("checkpoints").join("last.ckpt"))?;
            }
            rows.push(row);
        }
        if let Some(dir) = out_dir {
            self.checkpoint().save(&dir.join("checkpoints").join("final.ckpt"))?;
        }
        Ok(rows)
    }
}

/// Scales all gradients by a common factor so their joint L2 norm is at most `limit`.
pub fn clip_global_norm(grads: &mut [Tensor], limit: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > limit {
        let k = limit / norm;
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= k));
    }
    norm
}

/// Trains `model` from scratch and returns it with its metrics.
pub fn run(model: BlockCnn, cfg: TrainConfig, ctx: RunContext<'_>, out_dir: Option<&Path>) -> Result<(BlockCnn, Vec<MetricsRow>)> {
    let mut t = Trainer::new(model, cfg, ctx)?;
    let rows = t.fit(out_dir)?;
    Ok((t.into_model(), rows))
}

/// PGD adversarial training; `attack.epsilon = 0` is natural training.
pub fn adversarial_train(
    model: BlockCnn,
    train: &Dataset,
    attack: &AttackConfig,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(BlockCnn, Vec<MetricsRow>)> {
    let cfg = TrainConfig {
        mode: Mode::AdvTrain,
        ..cfg.clone()
    };
    let ctx = RunContext {
        attack: *attack,
        ..RunContext::new(train)
    };
    run(model, cfg, ctx, out_dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;
    use crate::model::ModelSpec;

    fn tiny() -> (BlockCnn, Dataset) {
        let spec = ModelSpec::from_channels(1, 2, &[2], 1, true, false).unwrap();
        (BlockCnn::new(spec, 0).unwrap(), synth_blobs(2, 4, 6, 0.1, 0).unwrap())
    }

    #[test]
    fn zero_epochs_rejected() {
        let (m, d) = tiny();
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        assert!(matches!(Trainer::new(m, cfg, RunContext::new(&d)), Err(Error::Config(_))));
    }

    #[test]
    fn distillation_without_teacher_rejected() {
        let (m, d) = tiny();
        let cfg = TrainConfig { mode: Mode::MixAcm, ..Default::default() };
        assert!(matches!(Trainer::new(m, cfg, RunContext::new(&d)), Err(Error::Config(_))));
    }

    #[test]
    fn unfrozen_teacher_rejected() {
        let (m, d) = tiny();
        let teacher = m.clone();
        let cfg = TrainConfig { mode: Mode::MixAcm, ..Default::default() };
        let ctx = RunContext { teacher: Some(&teacher), ..RunContext::new(&d) };
        assert!(matches!(Trainer::new(m, cfg, ctx), Err(Error::Contract(_))));
    }

    #[test]
    fn metrics_row_format() {
        let row = MetricsRow {
            epoch: 1,
            lr: 0.1,
            train_loss: 0.5,
            clean_acc: 1.0,
            robust_acc_pgd20: None,
            wall_seconds: 0.0,
        };
        assert_eq!(row.csv(), "1,0.1,0.5,1,,0");
    }
}
