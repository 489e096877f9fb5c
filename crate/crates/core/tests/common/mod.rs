//! Finite-difference machinery shared by the gradient checks and the
//! acceptance run.

#![allow(dead_code)]

use mixacm::acm::{acm_loss_block, kld_loss, soft_cross_entropy, AcMap, BlockTransform};
use mixacm::autodiff::{Tape, Var};
use mixacm::model::{BlockCnn, ModelSpec};
use mixacm::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const POINTS: usize = 100;

/// Relative error with a floor on the scale so gradients that are zero
/// analytically do not divide by round-off.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

pub type Build = dyn Fn(&mut Tape, &[Var]) -> Var;

/// Projects the op output onto a fixed random direction so the scalar probes
/// the full Jacobian, then compares every input gradient against central
/// differences. Returns the worst relative error.
pub fn check(inputs: &[Tensor], build: &Build, rng: &mut ChaCha8Rng) -> f64 {
    let mut probe: Option<Tensor> = None;
    let mut scalar = |vals: &[Tensor], grads: bool| -> (f64, Vec<Tensor>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.variable(t.clone())).collect();
        let out = build(&mut tape, &vars);
        let shape = tape.value(out).shape().to_vec();
        let w = probe
            .get_or_insert_with(|| Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0)))
            .clone();
        let wv = tape.constant(w);
        let prod = tape.mul(out, wv).unwrap();
        let loss = tape.sum(prod);
        let value = tape.value(loss).item().unwrap();
        if !grads {
            return (value, Vec::new());
        }
        tape.backward(loss).unwrap();
        let g = vars
            .iter()
            .zip(vals)
            .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        (value, g)
    };
    let (_, analytic) = scalar(inputs, true);
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        for i in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= H;
            let numeric = (scalar(&plus, false).0 - scalar(&minus, false).0) / (2.0 * H);
            worst = worst.max(rel_err(analytic[k].data()[i], numeric));
        }
    }
    worst
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values at least `gap` away from zero, so ReLU-like kinks are never straddled.
pub fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(gap..1.0);
        if rng.random::<bool>() { m } else { -m }
    })
}

/// Distinct values separated by at least `gap` in random order, so max
/// selections never tie.
pub fn distinct(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * gap - 0.5 * n as f64 * gap).collect();
    use rand::seq::SliceRandom;
    vals.shuffle(rng);
    Tensor::new(shape.to_vec(), vals).unwrap()
}

/// One op under test: an input generator and the graph to differentiate.
pub struct OpCase {
    pub name: &'static str,
    pub gen: Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>>,
    pub build: Box<Build>,
}

fn case(
    name: &'static str,
    gen: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> + 'static,
    build: impl Fn(&mut Tape, &[Var]) -> Var + 'static,
) -> OpCase {
    OpCase { name, gen: Box::new(gen), build: Box::new(build) }
}

/// Worst relative error of `case` over `POINTS` random inputs.
pub fn worst_error(case: &OpCase) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(case.name.bytes().map(u64::from).sum());
    let mut worst: f64 = 0.0;
    for _ in 0..POINTS {
        let inputs = (case.gen)(&mut rng);
        worst = worst.max(check(&inputs, &*case.build, &mut rng));
    }
    worst
}

/// Every differentiable op, with inputs kept away from kinks and ties.
pub fn op_cases() -> Vec<OpCase> {
    let pair = |r: &mut ChaCha8Rng| vec![uniform(r, &[2, 3]), uniform(r, &[2, 3])];
    vec![
        case("conv2d_s1", |r| vec![uniform(r, &[2, 2, 5, 5]), uniform(r, &[3, 2, 3, 3])], |t, v| t.conv2d(v[0], v[1], 1, 1).unwrap()),
        case("conv2d_s2", |r| vec![uniform(r, &[2, 2, 5, 5]), uniform(r, &[3, 2, 3, 3])], |t, v| t.conv2d(v[0], v[1], 2, 1).unwrap()),
        case("bias", |r| vec![uniform(r, &[2, 3, 2, 2]), uniform(r, &[3])], |t, v| t.add_channel_bias(v[0], v[1]).unwrap()),
        case("linear", |r| vec![uniform(r, &[3, 4]), uniform(r, &[2, 4]), uniform(r, &[2])], |t, v| t.linear(v[0], v[1], Some(v[2])).unwrap()),
        case("matmul", |r| vec![uniform(r, &[3, 4]), uniform(r, &[4, 2])], |t, v| t.matmul(v[0], v[1]).unwrap()),
        case("transpose", |r| vec![uniform(r, &[3, 4])], |t, v| t.transpose(v[0]).unwrap()),
        case("reshape", |r| vec![uniform(r, &[3, 4])], |t, v| t.reshape(v[0], &[2, 6]).unwrap()),
        case("add", pair, |t, v| t.add(v[0], v[1]).unwrap()),
        case("sub", pair, |t, v| t.sub(v[0], v[1]).unwrap()),
        case("mul", pair, |t, v| t.mul(v[0], v[1]).unwrap()),
        case("scale", |r| vec![uniform(r, &[2, 3])], |t, v| t.scale(v[0], -2.5)),
        case("relu", |r| vec![off_zero(r, &[3, 4], 1e-3)], |t, v| t.relu(v[0])),
        case("sign", |r| vec![off_zero(r, &[3, 4], 1e-3)], |t, v| t.sign(v[0])),
        // values kept 1e-3 away from the clamp bounds
        case(
            "clamp",
            |r| {
                vec![Tensor::from_fn(&[3, 4], |_| {
                    let v: f64 = r.random_range(-1.0..1.0);
                    if (v.abs() - 0.5).abs() < 1e-3 { v + 3e-3 } else { v }
                })]
            },
            |t, v| t.clamp(v[0], -0.5, 0.5),
        ),
        case("spatial_max", |r| vec![distinct(r, &[2, 3, 3, 3], 1e-2)], |t, v| t.spatial_max(v[0]).unwrap()),
        case("adaptive_max", |r| vec![distinct(r, &[2, 7], 1e-2)], |t, v| t.adaptive_max_pool1d(v[0], 3).unwrap()),
        case("gap", |r| vec![uniform(r, &[2, 3, 3, 3])], |t, v| t.global_avg_pool(v[0]).unwrap()),
        case("adaptive_avg", |r| vec![uniform(r, &[2, 7])], |t, v| t.adaptive_avg_pool1d(v[0], 3).unwrap()),
        case("sum", |r| vec![uniform(r, &[2, 3])], |t, v| t.sum(v[0])),
        case("mean", |r| vec![uniform(r, &[2, 3])], |t, v| t.mean(v[0])),
        case("softmax", |r| vec![uniform(r, &[3, 4])], |t, v| t.softmax(v[0]).unwrap()),
        case("log_softmax", |r| vec![uniform(r, &[3, 4])], |t, v| t.log_softmax(v[0]).unwrap()),
        case("l2_norm", |r| vec![off_zero(r, &[3, 4], 0.1)], |t, v| t.l2_norm(v[0])),
        case("normalize_rows", |r| vec![off_zero(r, &[3, 4], 0.1)], |t, v| t.normalize_rows(v[0]).unwrap()),
        // the teacher side is detached, so only student inputs are probed
        case("kld", |r| vec![uniform(r, &[3, 4])], |t, v| {
            let teacher = t.constant(Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.7).sin()));
            kld_loss(t, teacher, v[0], 3.0).unwrap()
        }),
        case("acm", |r| vec![off_zero(r, &[3, 4], 0.1)], |t, v| {
            let teacher = t.constant(Tensor::from_fn(&[3, 4], |i| (i as f64 * 1.3).cos()));
            acm_loss_block(t, AcMap(teacher), AcMap(v[0]), BlockTransform::None).unwrap()
        }),
        case("soft_ce", |r| vec![uniform(r, &[3, 4])], |t, v| {
            let y = Tensor::new(vec![3, 4], vec![0.5, 0.5, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.1, 0.2, 0.3, 0.4]).unwrap();
            soft_cross_entropy(t, v[0], &y).unwrap()
        }),
    ]
}

/// Largest deviation of the backward pass from linearity in the output seed.
pub fn adjoint_linearity_error() -> f64 {
    // grad of a·f + b·g equals a·grad f + b·grad g
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    for _ in 0..POINTS {
        let x = uniform(&mut rng, &[2, 2, 4, 4]);
        let k = uniform(&mut rng, &[2, 2, 3, 3]);
        let (a, b): (f64, f64) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let grad = |wa: f64, wb: f64| -> Tensor {
            let mut t = Tape::new();
            let xv = t.variable(x.clone());
            let kv = t.constant(k.clone());
            let y = t.conv2d(xv, kv, 1, 1).unwrap();
            let r = t.relu(y);
            let f = t.sum(r);
            let sq = t.mul(y, y).unwrap();
            let g = t.mean(sq);
            let fa = t.scale(f, wa);
            let gb = t.scale(g, wb);
            let total = t.add(fa, gb).unwrap();
            t.backward(total).unwrap();
            t.grad(xv).unwrap().clone()
        };
        let combined = grad(a, b);
        let (gf, gg) = (grad(1.0, 0.0), grad(0.0, 1.0));
        for i in 0..combined.numel() {
            let expect = a * gf.data()[i] + b * gg.data()[i];
            worst = worst.max((combined.data()[i] - expect).abs());
        }
    }
    worst
}

/// Worst relative error of parameter gradients of a five-block network.
pub fn five_layer_worst() -> f64 {
    let spec = ModelSpec::from_channels(1, 3, &[3, 4, 4, 4], 1, true, false).unwrap();
    assert_eq!(spec.tap_count(), 5);
    let model = BlockCnn::new(spec, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = uniform(&mut rng, &[2, 1, 6, 6]);
    let params = model.params().tensors().to_vec();
    let spec = model.spec().clone();
    let loss_of = |ps: &[Tensor], grads: bool| -> (f64, Vec<Tensor>) {
        let mut store = mixacm::model::ParamStore::new();
        for (name, t) in model.params().names().iter().zip(ps) {
            store.push(name.clone(), t.clone());
        }
        let m = BlockCnn::from_params(spec.clone(), store).unwrap();
        let mut tape = Tape::new();
        let p = m.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let out = m.forward(&mut tape, &p, xv).unwrap();
        let y = Tensor::one_hot(&[0, 2], 3).unwrap();
        let loss = soft_cross_entropy(&mut tape, out.logits, &y).unwrap();
        let v = tape.value(loss).item().unwrap();
        if !grads {
            return (v, Vec::new());
        }
        tape.backward(loss).unwrap();
        (v, p.grads(&tape))
    };
    let (_, analytic) = loss_of(&params, true);
    let mut worst: f64 = 0.0;
    for k in 0..params.len() {
        for i in 0..params[k].numel() {
            let mut plus = params.clone();
            plus[k].data_mut()[i] += H;
            let mut minus = params.clone();
            minus[k].data_mut()[i] -= H;
            let numeric = (loss_of(&plus, false).0 - loss_of(&minus, false).0) / (2.0 * H);
            worst = worst.max(rel_err(analytic[k].data()[i], numeric));
        }
    }
    worst
}
