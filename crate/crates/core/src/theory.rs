//! Numerical checks of the mixup bound for logistic regression and of the
//! linearization identity of bias-free ReLU networks.
//!
//! For `f(x) = θᵀx` and `L(f, y) = log(1 + eᶠ) − y·f` the adversarial loss
//! under an ℓ₂ attack of radius `ε√d` has a closed form, and the mixup loss
//! is a one-dimensional integral over λ for every pair of samples, so both
//! sides of the bound can be computed to near machine precision.

use std::fmt;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::BlockCnn;
use crate::tensor::Tensor;

/// `log(1 + eᶠ)` without overflow.
pub fn softplus(f: f64) -> f64 {
    f.max(0.0) + (-f.abs()).exp().ln_1p()
}

pub fn sigmoid(f: f64) -> f64 {
    if f >= 0.0 {
        1.0 / (1.0 + (-f).exp())
    } else {
        let e = f.exp();
        e / (1.0 + e)
    }
}

/// Logistic loss for a (possibly soft) label `y ∈ [0, 1]`.
pub fn logistic_loss(f: f64, y: f64) -> f64 {
    softplus(f) - y * f
}

fn ln_beta(a: f64, b: f64) -> f64 {
    libm::lgamma(a) + libm::lgamma(b) - libm::lgamma(a + b)
}

fn beta_pdf(x: f64, a: f64, b: f64) -> f64 {
    // quadrature nodes are interior, so the endpoints never matter
    if x <= 0.0 || x >= 1.0 {
        return 0.0;
    }
    ((a - 1.0) * x.ln() + (b - 1.0) * (1.0 - x).ln() - ln_beta(a, b)).exp()
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            // three-term recurrence for P_n and its derivative
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 0 { 1.0 } else if n == 1 { x } else { p1 };
            let pn1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * pn - pn1) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Quadrature rule mapped to `[0, 1]` with the Beta density folded into the weights.
fn beta_rule(n: usize, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
    let (x, w) = gauss_legendre(n);
    x.iter()
        .zip(&w)
        .map(|(&xi, &wi)| {
            let l = 0.5 * (xi + 1.0);
            (l, 0.5 * wi * beta_pdf(l, a, b))
        })
        .unzip()
}

/// Distribution of λ used for mixing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LambdaDist {
    Beta { a: f64, b: f64 },
    /// All mass at one value.
    Point(f64),
}

impl LambdaDist {
    fn validate(&self) -> Result<()> {
        match *self {
            LambdaDist::Beta { a, b } if a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite() => Ok(()),
            LambdaDist::Point(l) if (0.0..=1.0).contains(&l) => Ok(()),
            other => Err(Error::config(format!("invalid lambda distribution {other:?}"))),
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            LambdaDist::Beta { a, b } => Beta::new(a, b).expect("validated").sample(rng),
            LambdaDist::Point(l) => l,
        }
    }
}

/// The Beta mixture `a/(a+b)·Beta(a+1, b) + b/(a+b)·Beta(b+1, a)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixtureLambda {
    pub a: f64,
    pub b: f64,
}

impl MixtureLambda {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
            return Err(Error::config(format!("Beta parameters must be positive, got ({a}, {b})")));
        }
        Ok(Self { a, b })
    }

    pub fn weights(&self) -> (f64, f64) {
        let s = self.a + self.b;
        (self.a / s, self.b / s)
    }

    pub fn pdf(&self, l: f64) -> f64 {
        let (w1, w2) = self.weights();
        w1 * beta_pdf(l, self.a + 1.0, self.b) + w2 * beta_pdf(l, self.b + 1.0, self.a)
    }

    /// `E[1 − λ] = 2ab / ((a+b)(a+b+1))`.
    pub fn mean_one_minus(&self) -> f64 {
        let s = self.a + self.b;
        2.0 * self.a * self.b / (s * (s + 1.0))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let (w1, _) = self.weights();
        if rng.random::<f64>() < w1 {
            Beta::new(self.a + 1.0, self.b).expect("positive").sample(rng)
        } else {
            Beta::new(self.b + 1.0, self.a).expect("positive").sample(rng)
        }
    }

    /// `∫₀¹ pdf` by Gauss–Legendre with `nodes` points.
    pub fn integrate_pdf(&self, nodes: usize) -> f64 {
        let (x, w) = gauss_legendre(nodes);
        x.iter().zip(&w).map(|(&xi, &wi)| 0.5 * wi * self.pdf(0.5 * (xi + 1.0))).sum()
    }
}

/// One logistic-regression problem with teacher soft labels.
#[derive(Clone, Debug, PartialEq)]
pub struct TheoryInstance {
    pub theta: Vec<f64>,
    pub xs: Vec<Vec<f64>>,
    /// Hard labels in `{0, 1}`.
    pub ys: Vec<f64>,
    /// Teacher soft labels in `(0, 1)`.
    pub soft: Vec<f64>,
    /// Weight of the distillation terms.
    pub weight_alpha: f64,
    /// Closeness constant between soft labels and the model's probabilities.
    pub closeness_k: f64,
    /// Parameters of the mixing distribution Beta(a, b).
    pub beta_params: (f64, f64),
    /// Norm floor: `‖x_i‖ > c_x·√d` for every sample.
    pub c_x: f64,
}

impl TheoryInstance {
    pub fn d(&self) -> usize {
        self.theta.len()
    }

    pub fn n(&self) -> usize {
        self.xs.len()
    }

    pub fn logits(&self) -> Vec<f64> {
        self.xs.iter().map(|x| dot(&self.theta, x)).collect()
    }

    /// `min_i |cos(θ, x_i)|`.
    pub fn r(&self) -> f64 {
        let nt = norm(&self.theta);
        self.xs
            .iter()
            .map(|x| (dot(&self.theta, x) / (nt * norm(x))).abs())
            .fold(f64::INFINITY, f64::min)
    }

    /// `(1 − αk)/(1 + k) · c_x · R · E_{P̃}[1 − λ]`.
    pub fn epsilon(&self) -> Result<f64> {
        let (a, b) = self.beta_params;
        let mix = MixtureLambda::new(a, b)?;
        let (al, k) = (self.weight_alpha, self.closeness_k);
        Ok((1.0 - al * k) / (1.0 + k) * self.c_x * self.r() * mix.mean_one_minus())
    }

    /// First violated admissibility condition, if any.
    pub fn violation(&self) -> Option<Violation> {
        let f = self.logits();
        let d = self.d() as f64;
        if let Some(i) = (0..self.n()).find(|&i| self.ys[i] * f[i] + (self.ys[i] - 1.0) * f[i] < 0.0) {
            return Some(Violation::TrainingError { index: i });
        }
        for i in 0..self.n() {
            let g = sigmoid(f[i]);
            if (self.soft[i] - g).abs() > self.closeness_k * (self.ys[i] - g).abs() {
                return Some(Violation::TeacherCloseness { index: i });
            }
        }
        if let Some(i) = (0..self.n()).find(|&i| norm(&self.xs[i]) <= self.c_x * d.sqrt()) {
            return Some(Violation::NormFloor { index: i });
        }
        if self.weight_alpha * self.closeness_k >= 1.0 || self.weight_alpha < 0.0 || self.closeness_k < 0.0 {
            return Some(Violation::Weights);
        }
        None
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Which admissibility condition an instance breaks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Violation {
    /// Sample misclassified by θ.
    TrainingError { index: usize },
    /// Teacher soft label too far from the model probability.
    TeacherCloseness { index: usize },
    /// `‖x_i‖ ≤ c_x·√d`.
    NormFloor { index: usize },
    /// `α·k ≥ 1` or a negative constant.
    Weights,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::TrainingError { index } => write!(f, "sample {index} is misclassified"),
            Violation::TeacherCloseness { index } => write!(f, "teacher label of sample {index} violates the closeness bound"),
            Violation::NormFloor { index } => write!(f, "sample {index} is inside the norm floor"),
            Violation::Weights => write!(f, "alpha * k must be < 1 with nonnegative constants"),
        }
    }
}

/// An inadmissible instance with its raw, unjudged inequality sides.
#[derive(Clone, Debug, PartialEq)]
pub struct RejectedInstance {
    pub violation: Violation,
    pub lhs: f64,
    pub rhs: f64,
}

impl fmt::Display for RejectedInstance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (raw lhs {}, rhs {})", self.violation, self.lhs, self.rhs)
    }
}

/// `(1/n)·Σ max_{‖δ‖₂ ≤ r} L(θᵀ(x_i + δ), y_i)`. The loss is convex in
/// `t = θᵀδ ∈ [−r‖θ‖, r‖θ‖]`, so the maximum sits at an endpoint.
pub fn adv_logistic_loss(theta: &[f64], xs: &[Vec<f64>], ys: &[f64], radius: f64) -> Result<f64> {
    let nt = norm(theta);
    if nt == 0.0 {
        return Err(Error::Numeric("theta is zero: the attack direction is undefined".into()));
    }
    if xs.is_empty() {
        return Err(Error::config("empty sample"));
    }
    let s = radius * nt;
    let total: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, &y)| {
            let f = dot(theta, x);
            logistic_loss(f + s, y).max(logistic_loss(f - s, y))
        })
        .sum();
    Ok(total / xs.len() as f64)
}

/// Mixup loss estimate with an error bar.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub value: f64,
    /// Quadrature: `|Q(n) − Q(2n)|`; sampling: 99% confidence half-width.
    pub error: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PairMode {
    /// Exact double sum over pairs with Gauss–Legendre over λ.
    Full { nodes: usize },
    /// Monte Carlo over (i, j, λ).
    Sampled { samples: usize, seed: u64 },
}

/// `(1/n²)·Σᵢ Σⱼ E_λ L(θᵀx̃ᵢⱼ(λ), ỹᵢⱼ(λ))`. Because `f` is linear,
/// `θᵀx̃ᵢⱼ = λfᵢ + (1−λ)fⱼ` and only the logits are needed.
pub fn mixup_logistic_loss(theta: &[f64], xs: &[Vec<f64>], ys: &[f64], dist: LambdaDist, mode: PairMode) -> Result<Estimate> {
    dist.validate()?;
    if xs.is_empty() {
        return Err(Error::config("empty sample"));
    }
    let f: Vec<f64> = xs.iter().map(|x| dot(theta, x)).collect();
    let n = f.len();
    let pair = |i: usize, j: usize, l: f64| logistic_loss(l * f[i] + (1.0 - l) * f[j], l * ys[i] + (1.0 - l) * ys[j]);
    match mode {
        PairMode::Full { nodes } => {
            if n > 200 {
                return Err(Error::config(format!("full double sum limited to n <= 200, got {n}")));
            }
            if nodes < 64 {
                return Err(Error::config("full mode needs at least 64 quadrature nodes"));
            }
            let quad = |nodes: usize| -> f64 {
                let (ls, ws): (Vec<f64>, Vec<f64>) = match dist {
                    LambdaDist::Beta { a, b } => beta_rule(nodes, a, b),
                    LambdaDist::Point(l) => (vec![l], vec![1.0]),
                };
                let mut total = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        total += ls.iter().zip(&ws).map(|(&l, &w)| w * pair(i, j, l)).sum::<f64>();
                    }
                }
                total / (n * n) as f64
            };
            let coarse = quad(nodes);
            let fine = quad(2 * nodes);
            Ok(Estimate {
                value: fine,
                error: (fine - coarse).abs(),
            })
        }
        PairMode::Sampled { samples, seed } => {
            if samples < 2 {
                return Err(Error::config("sampling needs at least 2 draws"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (mut mean, mut m2) = (0.0, 0.0);
            for k in 0..samples {
                let (i, j) = (rng.random_range(0..n), rng.random_range(0..n));
                let v = pair(i, j, dist.sample(&mut rng));
                // Welford
                let delta = v - mean;
                mean += delta / (k + 1) as f64;
                m2 += delta * (v - mean);
            }
            let sd = (m2 / (samples - 1) as f64).sqrt();
            Ok(Estimate {
                value: mean,
                error: 2.576 * sd / (samples as f64).sqrt(),
            })
        }
    }
}

/// Both sides of the bound for one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct TheoremReport {
    pub d: usize,
    pub n: usize,
    pub a: f64,
    pub b: f64,
    pub alpha: f64,
    pub k: f64,
    pub c_x: f64,
    pub r: f64,
    pub epsilon: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub margin: f64,
    pub tolerance: f64,
    pub holds: bool,
}

pub const THEORY_HEADER: &str = "d,n,a,b,alpha,k,c_x,R,epsilon,lhs,rhs,margin,holds";

impl TheoremReport {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.d, self.n, self.a, self.b, self.alpha, self.k, self.c_x, self.r, self.epsilon, self.lhs, self.rhs, self.margin, self.holds
        )
    }
}

pub fn write_theory_csv<W: Write>(mut out: W, rows: &[TheoremReport]) -> Result<()> {
    writeln!(out, "{THEORY_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.csv())?;
    }
    Ok(())
}

fn sides(inst: &TheoryInstance, epsilon: f64) -> Result<(f64, f64, f64)> {
    let radius = epsilon * (inst.d() as f64).sqrt();
    let al = inst.weight_alpha;
    let (a, b) = inst.beta_params;
    let dist = LambdaDist::Beta { a, b };
    let mode = PairMode::Full { nodes: 64 };
    let lhs = adv_logistic_loss(&inst.theta, &inst.xs, &inst.ys, radius)?
        + al * adv_logistic_loss(&inst.theta, &inst.xs, &inst.soft, radius)?;
    let m = mixup_logistic_loss(&inst.theta, &inst.xs, &inst.ys, dist, mode)?;
    let md = mixup_logistic_loss(&inst.theta, &inst.xs, &inst.soft, dist, mode)?;
    Ok((lhs, m.value + al * md.value, m.error + al * md.error))
}

/// Compares adversarial loss plus weighted distillation adversarial loss
/// against the matching mixup losses. Inadmissible instances are rejected
/// with the raw sides attached.
pub fn verify_mixup_bound(inst: &TheoryInstance) -> Result<TheoremReport> {
    let epsilon = inst.epsilon()?;
    if let Some(violation) = inst.violation() {
        let (lhs, rhs, _) = sides(inst, epsilon.max(0.0))?;
        return Err(Error::InstanceRejected(Box::new(RejectedInstance { violation, lhs, rhs })));
    }
    let (lhs, rhs, quad_err) = sides(inst, epsilon)?;
    let tolerance = quad_err + 1e-8;
    Ok(TheoremReport {
        d: inst.d(),
        n: inst.n(),
        a: inst.beta_params.0,
        b: inst.beta_params.1,
        alpha: inst.weight_alpha,
        k: inst.closeness_k,
        c_x: inst.c_x,
        r: inst.r(),
        epsilon,
        lhs,
        rhs,
        margin: rhs - lhs,
        tolerance,
        holds: lhs <= rhs + tolerance,
    })
}

/// Ranges for random admissible instances.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceRanges {
    pub d: (usize, usize),
    pub n: (usize, usize),
    pub beta_params: (f64, f64),
    pub max_alpha: f64,
}

impl Default for InstanceRanges {
    fn default() -> Self {
        Self {
            d: (2, 10),
            n: (10, 50),
            beta_params: (1.0, 1.0),
            max_alpha: 1.0,
        }
    }
}

/// Draws an admissible instance: θ uniform on the sphere (random scale),
/// centered Gaussian inputs, labels from the sign of `θᵀx`, and soft labels
/// within the closeness bound.
pub fn random_instance<R: Rng + ?Sized>(rng: &mut R, ranges: &InstanceRanges) -> TheoryInstance {
    let d = rng.random_range(ranges.d.0..=ranges.d.1);
    let n = rng.random_range(ranges.n.0..=ranges.n.1);
    let gauss = |rng: &mut R, k: usize| -> Vec<f64> { (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)).collect() };
    let mut theta = gauss(rng, d);
    let scale = rng.random_range(0.5..3.0) / norm(&theta);
    theta.iter_mut().for_each(|t| *t *= scale);

    let mut xs: Vec<Vec<f64>> = (0..n).map(|_| gauss(rng, d)).collect();
    // the mixing argument expands around the sample mean; center it
    let mean: Vec<f64> = (0..d).map(|c| xs.iter().map(|x| x[c]).sum::<f64>() / n as f64).collect();
    for x in &mut xs {
        x.iter_mut().zip(&mean).for_each(|(v, m)| *v -= m);
    }
    let ys: Vec<f64> = xs.iter().map(|x| if dot(&theta, x) > 0.0 { 1.0 } else { 0.0 }).collect();

    let weight_alpha = rng.random_range(0.0..=ranges.max_alpha);
    let k_max = if weight_alpha > 0.0 { (0.9 / weight_alpha).min(1.0) } else { 1.0 };
    let closeness_k = rng.random_range(0.0..=k_max);
    let soft = xs
        .iter()
        .zip(&ys)
        .map(|(x, &y)| {
            let g = sigmoid(dot(&theta, x));
            let u: f64 = rng.random_range(-1.0..=1.0);
            (g + u * closeness_k * (y - g)).clamp(1e-9, 1.0 - 1e-9)
        })
        .collect();
    let min_norm = xs.iter().map(|x| norm(x)).fold(f64::INFINITY, f64::min);
    TheoryInstance {
        theta,
        xs,
        ys,
        soft,
        weight_alpha,
        closeness_k,
        beta_params: ranges.beta_params,
        c_x: 0.999 * min_norm / (d as f64).sqrt(),
    }
}

/// Discrepancies of a bias-free ReLU network from exact linearity along rays.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearizationReport {
    /// `max |f_k(x) − ⟨∇f_k(x), x⟩| / (|f_k(x)| + 1e-12)`.
    pub euler_rel: f64,
    /// `max |f_k(2x) − 2f_k(x)| / (|2f_k(x)| + 1e-12)`.
    pub homogeneity_rel: f64,
}

/// Checks `f(x) = ⟨∇f(x), x⟩` and `f(2x) = 2f(x)` for every sample and class.
pub fn check_relu_linearization(model: &BlockCnn, x: &Tensor) -> Result<LinearizationReport> {
    if !model.spec().is_bias_free() {
        return Err(Error::contract("linearization identity needs a bias-free model"));
    }
    let logits = model.logits(x)?;
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    let per_sample = x.numel() / n.max(1);
    let mut euler_rel: f64 = 0.0;
    for class in 0..k {
        let mut tape = Tape::new();
        let p = model.bind_constant(&mut tape);
        let xv = tape.variable(x.clone());
        let out = model.forward(&mut tape, &p, xv)?;
        let mask = Tensor::from_fn(&[n, k], |i| if i % k == class { 1.0 } else { 0.0 });
        let mask = tape.constant(mask);
        let picked = tape.mul(out.logits, mask)?;
        let total = tape.sum(picked);
        tape.backward(total)?;
        let grad = tape.grad(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        for s in 0..n {
            let lin: f64 = grad.data()[s * per_sample..][..per_sample]
                .iter()
                .zip(&x.data()[s * per_sample..][..per_sample])
                .map(|(g, v)| g * v)
                .sum();
            let f = logits.data()[s * k + class];
            euler_rel = euler_rel.max((f - lin).abs() / (f.abs() + 1e-12));
        }
    }
    let doubled = model.logits(&x.map(|v| 2.0 * v))?;
    let homogeneity_rel = doubled
        .data()
        .iter()
        .zip(logits.data())
        .map(|(f2, f)| (f2 - 2.0 * f).abs() / ((2.0 * f).abs() + 1e-12))
        .fold(0.0, f64::max);
    Ok(LinearizationReport {
        euler_rel,
        homogeneity_rel,
    })
}
