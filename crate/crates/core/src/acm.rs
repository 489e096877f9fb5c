//! Activated channel maps and the distillation objective.
//!
//! An activated channel map (ACM) reduces a tap `[N,C,H,W]` to `[N,C]` by
//! taking the spatial maximum of every channel. Teacher and student maps are
//! row-normalized and compared with a squared Euclidean distance, so only the
//! relative firing pattern across channels matters. When channel counts
//! differ, one side is resampled by adaptive pooling or an affine layer.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::augment::MixedBatch;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{pair_taps, BlockCnn, BoundParams, ParamStore};
use crate::tensor::Tensor;

/// Per-sample, per-channel activation maxima `[N, C]` at one tap.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AcMap(pub Var);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChannelTransform {
    None,
    AdaptiveMaxPool,
    AdaptiveAvgPool,
    Affine,
}

/// Which map is resampled to the other's channel count.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransformSide {
    Teacher,
    Student,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    pub alpha_acm: f64,
    pub alpha_kld: f64,
    /// Softmax temperature of the KLD term.
    pub gamma: f64,
    pub transform: ChannelTransform,
    pub transform_side: TransformSide,
    /// 1-based tap indices; `None` uses every shared tap.
    pub taps: Option<Vec<usize>>,
    /// Teacher and student data differ: drop the KLD term, full CE weight.
    pub cross_dataset: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            alpha_acm: 5000.0,
            alpha_kld: 0.95,
            gamma: 10.0,
            transform: ChannelTransform::AdaptiveMaxPool,
            transform_side: TransformSide::Teacher,
            taps: None,
            cross_dataset: false,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::config(format!("gamma must be positive, got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.alpha_kld) {
            return Err(Error::config(format!("alpha_kld must lie in [0, 1], got {}", self.alpha_kld)));
        }
        if !(self.alpha_acm >= 0.0 && self.alpha_acm.is_finite()) {
            return Err(Error::config(format!("alpha_acm must be >= 0, got {}", self.alpha_acm)));
        }
        if let Some(taps) = &self.taps {
            if taps.is_empty() {
                return Err(Error::config("tap subset is empty"));
            }
            if taps.contains(&0) {
                return Err(Error::config("tap indices start at 1"));
            }
        }
        Ok(())
    }
}

pub fn channel_map(tape: &mut Tape, tap: Var) -> Result<AcMap> {
    tape.spatial_max(tap).map(AcMap)
}

pub fn adaptive_max_pool_1d(tape: &mut Tape, map: AcMap, c_out: usize) -> Result<AcMap> {
    tape.adaptive_max_pool1d(map.0, c_out).map(AcMap)
}

pub fn adaptive_avg_pool_1d(tape: &mut Tape, map: AcMap, c_out: usize) -> Result<AcMap> {
    tape.adaptive_avg_pool1d(map.0, c_out).map(AcMap)
}

/// `map @ weight^T + bias` with `weight: [C_out, C_in]`.
pub fn affine_transform(tape: &mut Tape, map: AcMap, weight: Var, bias: Var) -> Result<AcMap> {
    tape.linear(map.0, weight, Some(bias)).map(AcMap)
}

/// Transform applied to one tap pair.
#[derive(Clone, Copy, Debug)]
pub enum BlockTransform {
    None,
    AdaptiveMaxPool(TransformSide),
    AdaptiveAvgPool(TransformSide),
    Affine { side: TransformSide, weight: Var, bias: Var },
}

fn width(tape: &Tape, map: AcMap) -> Result<usize> {
    match *tape.value(map.0).shape() {
        [_, c] => Ok(c),
        ref s => Err(Error::dim(format!("channel map must be [N,C], got {s:?}"))),
    }
}

/// Mean over the batch of `‖â_T − â_S‖²` between row-normalized maps. The
/// teacher map is detached; only the student (and any affine transform)
/// receives gradients.
pub fn acm_loss_block(tape: &mut Tape, teacher: AcMap, student: AcMap, transform: BlockTransform) -> Result<Var> {
    let mut t = AcMap(tape.detach(teacher.0));
    let mut s = student;
    let (ct, cs) = (width(tape, t)?, width(tape, s)?);
    let resample = |tape: &mut Tape, side: TransformSide, t: &mut AcMap, s: &mut AcMap, f: &dyn Fn(&mut Tape, AcMap, usize) -> Result<AcMap>| -> Result<()> {
        match side {
            TransformSide::Teacher => *t = f(tape, *t, cs)?,
            TransformSide::Student => *s = f(tape, *s, ct)?,
        }
        Ok(())
    };
    match transform {
        BlockTransform::None => {}
        BlockTransform::AdaptiveMaxPool(side) => resample(tape, side, &mut t, &mut s, &adaptive_max_pool_1d)?,
        BlockTransform::AdaptiveAvgPool(side) => resample(tape, side, &mut t, &mut s, &adaptive_avg_pool_1d)?,
        BlockTransform::Affine { side, weight, bias } => match side {
            TransformSide::Teacher => t = affine_transform(tape, t, weight, bias)?,
            TransformSide::Student => s = affine_transform(tape, s, weight, bias)?,
        },
    }
    let (ct, cs) = (width(tape, t)?, width(tape, s)?);
    if ct != cs {
        return Err(Error::dim(format!(
            "teacher map has {ct} channels, student map {cs}; configure a transform"
        )));
    }
    let n = tape.value(s.0).shape()[0];
    if tape.value(t.0).shape()[0] != n {
        return Err(Error::dim("teacher and student maps have different batch sizes"));
    }
    let tn = tape.normalize_rows(t.0)?;
    let sn = tape.normalize_rows(s.0)?;
    let diff = tape.sub(tn, sn)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq);
    Ok(tape.scale(total, 1.0 / n.max(1) as f64))
}

/// Trainable affine maps, one per shared tap pair.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineBank {
    side: TransformSide,
    params: ParamStore,
}

impl AffineBank {
    /// Maps the `side` channel count onto the other side's, per tap.
    pub fn new(teacher_channels: &[usize], student_channels: &[usize], side: TransformSide, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (i, (ct, cs)) in pair_taps(teacher_channels, student_channels).into_iter().enumerate() {
            let (c_in, c_out) = match side {
                TransformSide::Teacher => (ct, cs),
                TransformSide::Student => (cs, ct),
            };
            let normal = Normal::new(0.0, (1.0 / c_in as f64).sqrt()).expect("finite std");
            params.push(
                format!("tap{}.weight", i + 1),
                Tensor::from_fn(&[c_out, c_in], |_| normal.sample(&mut rng)),
            );
            params.push(format!("tap{}.bias", i + 1), Tensor::zeros(&[c_out]));
        }
        Self { side, params }
    }

    pub fn from_params(side: TransformSide, params: ParamStore) -> Self {
        Self { side, params }
    }

    pub fn side(&self) -> TransformSide {
        self.side
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundAffine {
        BoundAffine {
            side: self.side,
            params: self.params.bind(tape, true),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BoundAffine {
    side: TransformSide,
    params: BoundParams,
}

impl BoundAffine {
    pub fn params(&self) -> &BoundParams {
        &self.params
    }

    /// Weight and bias for the 1-based tap `tap`.
    fn tap(&self, tap: usize) -> Option<(Var, Var)> {
        let vars = self.params.vars();
        let i = 2 * (tap - 1);
        (i + 1 < vars.len()).then(|| (vars[i], vars[i + 1]))
    }
}

/// The tap indices a config selects, validated against `shared` pairs.
pub fn selected_taps(cfg: &DistillConfig, shared: usize) -> Result<Vec<usize>> {
    let taps = match &cfg.taps {
        Some(t) => t.clone(),
        None => (1..=shared).collect(),
    };
    if taps.is_empty() {
        return Err(Error::config("tap subset is empty"));
    }
    if let Some(&bad) = taps.iter().find(|&&t| t == 0 || t > shared) {
        return Err(Error::config(format!("tap {bad} outside the {shared} shared taps")));
    }
    Ok(taps)
}

/// Sum of per-tap ACM losses over the selected taps.
pub fn acm_loss_total(
    tape: &mut Tape,
    teacher_taps: &[Var],
    student_taps: &[Var],
    cfg: &DistillConfig,
    affine: Option<&BoundAffine>,
) -> Result<Var> {
    let pairs = pair_taps(teacher_taps, student_taps);
    let taps = selected_taps(cfg, pairs.len())?;
    let mut total: Option<Var> = None;
    for tap in taps {
        let (t, s) = pairs[tap - 1];
        let tm = channel_map(tape, t)?;
        let sm = channel_map(tape, s)?;
        let transform = match cfg.transform {
            ChannelTransform::None => BlockTransform::None,
            ChannelTransform::AdaptiveMaxPool => BlockTransform::AdaptiveMaxPool(cfg.transform_side),
            ChannelTransform::AdaptiveAvgPool => BlockTransform::AdaptiveAvgPool(cfg.transform_side),
            ChannelTransform::Affine => {
                let bank = affine.ok_or_else(|| Error::config("affine transform needs an affine bank"))?;
                let (weight, bias) = bank
                    .tap(tap)
                    .ok_or_else(|| Error::config(format!("affine bank has no entry for tap {tap}")))?;
                BlockTransform::Affine { side: bank.side, weight, bias }
            }
        };
        let l = acm_loss_block(tape, tm, sm, transform)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
    }
    Ok(total.expect("non-empty tap list"))
}

/// Softmax of `logits / gamma`, row-wise, as plain values.
fn softened(logits: &Tensor, gamma: f64) -> Vec<f64> {
    let k = logits.shape()[1];
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(k) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = ((*v - m) / gamma).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}

/// `γ² · mean_n KL(softmax(z_T/γ) ‖ softmax(z_S/γ))` with the teacher detached.
pub fn kld_loss(tape: &mut Tape, teacher_logits: Var, student_logits: Var, gamma: f64) -> Result<Var> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::config(format!("gamma must be positive, got {gamma}")));
    }
    let zt = tape.value(teacher_logits).clone();
    let zs_shape = tape.value(student_logits).shape().to_vec();
    if zt.rank() != 2 || zt.shape() != zs_shape.as_slice() {
        return Err(Error::dim(format!("teacher logits {:?} vs student {zs_shape:?}", zt.shape())));
    }
    let n = zt.shape()[0] as f64;
    let pt = softened(&zt, gamma);
    let neg_entropy: f64 = pt.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum();
    let pt = tape.constant(Tensor::new(zt.shape().to_vec(), pt)?);
    let scaled = tape.scale(student_logits, 1.0 / gamma);
    let log_ps = tape.log_softmax(scaled)?;
    let cross = tape.mul(pt, log_ps)?;
    let cross = tape.sum(cross);
    // Σ p_T log p_T − Σ p_T log p_S
    let neg = tape.scale(cross, -1.0);
    let ent = tape.constant(Tensor::scalar(neg_entropy));
    let kl = tape.add(neg, ent)?;
    Ok(tape.scale(kl, gamma * gamma / n))
}

/// Cross-entropy of logits against soft label rows, averaged over the batch.
pub fn soft_cross_entropy(tape: &mut Tape, logits: Var, soft_labels: &Tensor) -> Result<Var> {
    let shape = tape.value(logits).shape().to_vec();
    if shape.as_slice() != soft_labels.shape() || shape.len() != 2 {
        return Err(Error::dim(format!("logits {shape:?} vs labels {:?}", soft_labels.shape())));
    }
    let y = tape.constant(soft_labels.clone());
    let logp = tape.log_softmax(logits)?;
    let prod = tape.mul(y, logp)?;
    let s = tape.sum(prod);
    Ok(tape.scale(s, -1.0 / shape[0] as f64))
}

/// Loss terms of one distillation step.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveParts {
    pub total: Var,
    pub student_logits: Var,
    pub ce: f64,
    pub kld: f64,
    pub acm: f64,
}

/// `(1−α_kld)·CE_mix + α_kld·KLD + α_acm·ACM`, with both models run on the
/// same mixed inputs. Zero-weighted terms are left out of the graph.
pub fn mixacm_objective(
    tape: &mut Tape,
    student: &BlockCnn,
    student_params: &BoundParams,
    teacher: &BlockCnn,
    mixed: &MixedBatch,
    cfg: &DistillConfig,
    affine: Option<&BoundAffine>,
) -> Result<ObjectiveParts> {
    if !teacher.is_frozen() {
        return Err(Error::contract("teacher must be frozen before distillation"));
    }
    cfg.validate()?;
    let (w_ce, w_kld) = if cfg.cross_dataset { (1.0, 0.0) } else { (1.0 - cfg.alpha_kld, cfg.alpha_kld) };

    let x = tape.constant(mixed.inputs.clone());
    let s_out = student.forward(tape, student_params, x)?;
    let ce = soft_cross_entropy(tape, s_out.logits, &mixed.soft_labels)?;
    let mut parts = ObjectiveParts {
        total: ce,
        student_logits: s_out.logits,
        ce: tape.value(ce).item()?,
        kld: 0.0,
        acm: 0.0,
    };
    if w_ce != 1.0 {
        parts.total = tape.scale(ce, w_ce);
    }
    if w_kld == 0.0 && cfg.alpha_acm == 0.0 {
        return Ok(parts);
    }

    let t_params = teacher.bind_constant(tape);
    let t_out = teacher.forward(tape, &t_params, x)?;
    if w_kld != 0.0 {
        let kld = kld_loss(tape, t_out.logits, s_out.logits, cfg.gamma)?;
        parts.kld = tape.value(kld).item()?;
        let term = tape.scale(kld, w_kld);
        parts.total = tape.add(parts.total, term)?;
    }
    if cfg.alpha_acm != 0.0 {
        let acm = acm_loss_total(tape, &t_out.taps, &s_out.taps, cfg, affine)?;
        parts.acm = tape.value(acm).item()?;
        let term = tape.scale(acm, cfg.alpha_acm);
        parts.total = tape.add(parts.total, term)?;
    }
    Ok(parts)
}

/// Per-tap channel maxima averaged over `images`, each sorted ascending.
pub fn acm_means(model: &BlockCnn, images: &Tensor, batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let n = images.shape()[0];
    if n == 0 {
        return Err(Error::config("ACM dump over an empty set"));
    }
    let mut sums: Vec<Vec<f64>> = model.spec().tap_channels().iter().map(|&c| vec![0.0; c]).collect();
    for start in (0..n).step_by(batch_size.max(1)) {
        let idx: Vec<usize> = (start..(start + batch_size).min(n)).collect();
        let x = images.gather_rows(&idx)?;
        let mut tape = Tape::new();
        let p = model.bind_constant(&mut tape);
        let xv = tape.constant(x);
        let out = model.forward(&mut tape, &p, xv)?;
        for (acc, &tap) in sums.iter_mut().zip(&out.taps) {
            let m = channel_map(&mut tape, tap)?;
            let c = acc.len();
            for row in tape.value(m.0).data().chunks(c) {
                acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
            }
        }
    }
    for acc in &mut sums {
        acc.iter_mut().for_each(|v| *v /= n as f64);
        acc.sort_by(f64::total_cmp);
    }
    Ok(sums)
}

/// Writes `tap_index,channel_rank,mean_value` rows.
pub fn write_acm_csv<W: Write>(mut out: W, means: &[Vec<f64>]) -> Result<()> {
    writeln!(out, "tap_index,channel_rank,mean_value")?;
    for (t, row) in means.iter().enumerate() {
        for (r, v) in row.iter().enumerate() {
            writeln!(out, "{},{},{}", t + 1, r, v)?;
        }
    }
    Ok(())
}

/// Mean per-sample cosine similarity between teacher and student ACMs at
/// each shared tap. Wider maps are reduced to the narrower width by adaptive
/// max pooling before comparison.
pub fn acm_alignment(teacher: &BlockCnn, student: &BlockCnn, images: &Tensor, batch_size: usize) -> Result<Vec<f64>> {
    let n = images.shape()[0];
    if n == 0 {
        return Err(Error::config("alignment over an empty set"));
    }
    let shared = teacher.spec().tap_count().min(student.spec().tap_count());
    let mut sums = vec![0.0; shared];
    for start in (0..n).step_by(batch_size.max(1)) {
        let idx: Vec<usize> = (start..(start + batch_size).min(n)).collect();
        let x = images.gather_rows(&idx)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let tp = teacher.bind_constant(&mut tape);
        let t_out = teacher.forward(&mut tape, &tp, xv)?;
        let sp = student.bind_constant(&mut tape);
        let s_out = student.forward(&mut tape, &sp, xv)?;
        for (k, (t, s)) in pair_taps(&t_out.taps, &s_out.taps).into_iter().enumerate() {
            let mut tm = channel_map(&mut tape, t)?;
            let mut sm = channel_map(&mut tape, s)?;
            let (ct, cs) = (width(&tape, tm)?, width(&tape, sm)?);
            if ct > cs {
                tm = adaptive_max_pool_1d(&mut tape, tm, cs)?;
            } else if cs > ct {
                sm = adaptive_max_pool_1d(&mut tape, sm, ct)?;
            }
            let c = ct.min(cs);
            let tv = tape.value(tm.0).data();
            let sv = tape.value(sm.0).data();
            for (a, b) in tv.chunks(c).zip(sv.chunks(c)) {
                sums[k] += cosine(a, b);
            }
        }
    }
    Ok(sums.into_iter().map(|s| s / n as f64).collect())
}

/// Cosine similarity; zero when either vector is (numerically) zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na < crate::autodiff::NORM_EPS || nb < crate::autodiff::NORM_EPS {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(tape: &mut Tape, rows: &[&[f64]], trainable: bool) -> AcMap {
        let c = rows[0].len();
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        AcMap(tape.leaf(Tensor::new(vec![rows.len(), c], data).unwrap(), trainable))
    }

    fn block(t: &[&[f64]], s: &[&[f64]]) -> f64 {
        let mut tape = Tape::new();
        let (a, b) = (map(&mut tape, t, false), map(&mut tape, s, true));
        let l = acm_loss_block(&mut tape, a, b, BlockTransform::None).unwrap();
        tape.value(l).item().unwrap()
    }

    #[test]
    fn channel_map_of_constant_channels() {
        let mut tape = Tape::new();
        let mut data = vec![3.0; 4];
        data.extend([-1.0; 4]);
        let x = tape.constant(Tensor::new(vec![1, 2, 2, 2], data).unwrap());
        let m = channel_map(&mut tape, x).unwrap();
        assert_eq!(tape.value(m.0).data(), &[3.0, -1.0]);
        let z = tape.constant(Tensor::zeros(&[2, 3, 2, 2]));
        let m = channel_map(&mut tape, z).unwrap();
        assert!(tape.value(m.0).data().iter().all(|&v| v == 0.0));
        let y = tape.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 5.0, 2.0, 0.0]).unwrap());
        let m = channel_map(&mut tape, y).unwrap();
        assert_eq!(tape.value(m.0).data(), &[5.0]);
    }

    #[test]
    fn block_loss_values() {
        assert_eq!(block(&[&[3.0, 4.0]], &[&[3.0, 4.0]]), 0.0);
        assert!((block(&[&[3.0, 4.0]], &[&[4.0, 3.0]]) - 0.08).abs() < 1e-15);
        assert!(block(&[&[3.0, 4.0]], &[&[6.0, 8.0]]).abs() < 1e-15);
        assert!((block(&[&[1.0, 0.0]], &[&[-1.0, 0.0]]) - 4.0).abs() < 1e-15);
    }

    #[test]
    fn teacher_map_gets_no_gradient() {
        let mut tape = Tape::new();
        let t = map(&mut tape, &[&[3.0, 4.0]], true);
        let s = map(&mut tape, &[&[4.0, 3.0]], true);
        let l = acm_loss_block(&mut tape, t, s, BlockTransform::None).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.grad(t.0).is_none());
        assert!(tape.grad(s.0).unwrap().norm_l2() > 0.0);
    }

    #[test]
    fn mismatched_channels_need_transform() {
        let mut tape = Tape::new();
        let t = map(&mut tape, &[&[1.0, 3.0, 2.0, 5.0]], false);
        let s = map(&mut tape, &[&[3.0, 5.0]], true);
        assert!(matches!(
            acm_loss_block(&mut tape, t, s, BlockTransform::None),
            Err(Error::Dimension(_))
        ));
        let l = acm_loss_block(&mut tape, t, s, BlockTransform::AdaptiveMaxPool(TransformSide::Teacher)).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 0.0);
    }

    #[test]
    fn affine_examples() {
        let mut tape = Tape::new();
        let m = map(&mut tape, &[&[2.0, 3.0]], false);
        let w = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap());
        let b = tape.constant(Tensor::zeros(&[1]));
        let out = affine_transform(&mut tape, m, w, b).unwrap();
        assert_eq!(tape.value(out.0).data(), &[5.0]);
        let bad = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(affine_transform(&mut tape, m, bad, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn kld_is_zero_on_identical_logits_and_positive_otherwise() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, 0.0]).unwrap());
        let zs = tape.variable(tape.value(z).clone());
        let l = kld_loss(&mut tape, z, zs, 10.0).unwrap();
        assert!(tape.value(l).item().unwrap().abs() < 1e-12);
        let other = tape.variable(Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap());
        let l = kld_loss(&mut tape, z, other, 2.0).unwrap();
        assert!(tape.value(l).item().unwrap() > 0.0);
    }

    #[test]
    fn empty_tap_subset_rejected() {
        let cfg = DistillConfig { taps: Some(vec![]), ..Default::default() };
        assert!(matches!(selected_taps(&cfg, 3), Err(Error::Config(_))));
        let cfg = DistillConfig { taps: Some(vec![4]), ..Default::default() };
        assert!(matches!(selected_taps(&cfg, 3), Err(Error::Config(_))));
        assert_eq!(selected_taps(&DistillConfig::default(), 3).unwrap(), vec![1, 2, 3]);
    }

    #[test]
    fn acm_csv_layout() {
        let mut buf = Vec::new();
        write_acm_csv(&mut buf, &[vec![0.5, 1.0], vec![2.0]]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "tap_index,channel_rank,mean_value\n1,0,0.5\n1,1,1\n2,0,2\n");
    }
}
