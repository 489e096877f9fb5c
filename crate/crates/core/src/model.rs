//! Block-structured convolutional classifiers.
//!
//! A [`BlockCnn`] is a stem convolution followed by a sequence of blocks of
//! convolutions and a global-average-pool + linear head. The forward pass
//! exposes one tap per stage: tap 1 is the stem output, tap `b + 1` is the
//! output of block `b`. Taps are indexed from 1 throughout the crate.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub conv_layers: usize,
    pub channels: usize,
    pub kernel_size: usize,
    /// Stride of the first convolution in the block.
    pub stride: usize,
    pub use_bias: bool,
    pub use_residual: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StemSpec {
    pub channels: usize,
    pub kernel_size: usize,
    pub use_bias: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub in_channels: usize,
    pub classes: usize,
    pub stem: StemSpec,
    pub blocks: Vec<BlockSpec>,
    pub head_bias: bool,
}

impl ModelSpec {
    /// Stem sized like the first block; head bias follows the blocks.
    pub fn new(in_channels: usize, classes: usize, blocks: Vec<BlockSpec>) -> Result<Self> {
        let first = blocks
            .first()
            .ok_or_else(|| Error::config("model needs at least one block"))?;
        let spec = Self {
            in_channels,
            classes,
            stem: StemSpec {
                channels: first.channels,
                kernel_size: first.kernel_size,
                use_bias: first.use_bias,
            },
            head_bias: blocks.iter().any(|b| b.use_bias),
            blocks,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// One block per entry of `channels`; the first block keeps resolution,
    /// later blocks halve it.
    pub fn from_channels(
        in_channels: usize,
        classes: usize,
        channels: &[usize],
        conv_layers: usize,
        use_bias: bool,
        use_residual: bool,
    ) -> Result<Self> {
        let blocks = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| BlockSpec {
                conv_layers,
                channels: c,
                kernel_size: 3,
                stride: if i == 0 { 1 } else { 2 },
                use_bias,
                use_residual,
            })
            .collect();
        Self::new(in_channels, classes, blocks)
    }

    pub fn default_teacher(in_channels: usize, classes: usize) -> Result<Self> {
        Self::from_channels(in_channels, classes, &[32, 64, 128], 2, true, true)
    }

    pub fn default_student(in_channels: usize, classes: usize) -> Result<Self> {
        Self::from_channels(in_channels, classes, &[16, 32, 64], 2, true, true)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.blocks.is_empty() {
            return Err(Error::config("model needs at least one block"));
        }
        if self.in_channels == 0 || self.stem.channels == 0 || self.stem.kernel_size == 0 {
            return Err(Error::config("stem channels and kernel must be positive"));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.channels == 0 || b.conv_layers == 0 || b.kernel_size == 0 || b.stride == 0 {
                return Err(Error::config(format!("block {i}: channels, conv_layers, kernel and stride must be >= 1")));
            }
        }
        Ok(())
    }

    pub fn tap_count(&self) -> usize {
        1 + self.blocks.len()
    }

    /// Channel count at each tap, starting with the stem.
    pub fn tap_channels(&self) -> Vec<usize> {
        std::iter::once(self.stem.channels)
            .chain(self.blocks.iter().map(|b| b.channels))
            .collect()
    }

    /// True when no layer carries a bias term.
    pub fn is_bias_free(&self) -> bool {
        !self.stem.use_bias && !self.head_bias && self.blocks.iter().all(|b| !b.use_bias)
    }
}

/// Ordered named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// FNV-1a over names and the bit patterns of every value.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for (name, t) in self.iter() {
            eat(name.as_bytes());
            for v in t.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Places every tensor on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> BoundParams {
        BoundParams {
            vars: self.tensors.iter().map(|t| tape.leaf(t.clone(), requires_grad)).collect(),
        }
    }
}

/// Tape handles for a [`ParamStore`], in store order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn get(&self, i: usize) -> Var {
        self.vars[i]
    }

    /// Gradients collected after backward; missing entries become zeros.
    pub fn grads(&self, tape: &Tape) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|&v| {
                tape.grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvSlot {
    weight: usize,
    bias: Option<usize>,
    stride: usize,
    padding: usize,
}

#[derive(Clone, Debug)]
enum Shortcut {
    None,
    Identity,
    Projection(ConvSlot),
}

#[derive(Clone, Debug)]
struct BlockSlots {
    convs: Vec<ConvSlot>,
    shortcut: Shortcut,
}

#[derive(Clone, Debug)]
struct Layout {
    stem: ConvSlot,
    blocks: Vec<BlockSlots>,
    head_weight: usize,
    head_bias: Option<usize>,
}

/// Parameter names and shapes for a spec, in registry order.
fn plan(spec: &ModelSpec) -> (Layout, Vec<(String, Vec<usize>, usize)>) {
    // (name, shape, fan_in); fan_in 0 marks a bias
    let mut entries: Vec<(String, Vec<usize>, usize)> = Vec::new();
    let conv = |entries: &mut Vec<(String, Vec<usize>, usize)>,
                    prefix: String,
                    c_in: usize,
                    c_out: usize,
                    k: usize,
                    stride: usize,
                    bias: bool| {
        let weight = entries.len();
        entries.push((format!("{prefix}.weight"), vec![c_out, c_in, k, k], c_in * k * k));
        let bias = bias.then(|| {
            entries.push((format!("{prefix}.bias"), vec![c_out], 0));
            entries.len() - 1
        });
        ConvSlot { weight, bias, stride, padding: k / 2 }
    };

    let stem = conv(
        &mut entries,
        "stem".into(),
        spec.in_channels,
        spec.stem.channels,
        spec.stem.kernel_size,
        1,
        spec.stem.use_bias,
    );
    let mut c_in = spec.stem.channels;
    let mut blocks = Vec::with_capacity(spec.blocks.len());
    for (b, bs) in spec.blocks.iter().enumerate() {
        let mut convs = Vec::with_capacity(bs.conv_layers);
        for l in 0..bs.conv_layers {
            let (ci, stride) = if l == 0 { (c_in, bs.stride) } else { (bs.channels, 1) };
            convs.push(conv(
                &mut entries,
                format!("blocks.{b}.conv{l}"),
                ci,
                bs.channels,
                bs.kernel_size,
                stride,
                bs.use_bias,
            ));
        }
        let shortcut = if !bs.use_residual {
            Shortcut::None
        } else if c_in == bs.channels && bs.stride == 1 {
            Shortcut::Identity
        } else {
            Shortcut::Projection(conv(
                &mut entries,
                format!("blocks.{b}.proj"),
                c_in,
                bs.channels,
                1,
                bs.stride,
                bs.use_bias,
            ))
        };
        blocks.push(BlockSlots { convs, shortcut });
        c_in = bs.channels;
    }
    let head_weight = entries.len();
    entries.push(("head.weight".into(), vec![spec.classes, c_in], c_in));
    let head_bias = spec.head_bias.then(|| {
        entries.push(("head.bias".into(), vec![spec.classes], 0));
        entries.len() - 1
    });
    (
        Layout {
            stem,
            blocks,
            head_weight,
            head_bias,
        },
        entries,
    )
}

/// Logits plus the activation at every tap point.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    pub taps: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct BlockCnn {
    spec: ModelSpec,
    params: ParamStore,
    layout: Layout,
    frozen: bool,
}

impl BlockCnn {
    /// Kaiming fan-in normal weights, zero biases, seeded deterministically.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let (layout, entries) = plan(&spec);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape, fan_in) in entries {
            let tensor = if fan_in == 0 {
                Tensor::zeros(&shape)
            } else {
                let std = (2.0 / fan_in as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("finite std");
                Tensor::from_fn(&shape, |_| normal.sample(&mut rng))
            };
            params.push(name, tensor);
        }
        Ok(Self {
            spec,
            params,
            layout,
            frozen: false,
        })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes.
    pub fn from_params(spec: ModelSpec, params: ParamStore) -> Result<Self> {
        spec.validate()?;
        let (layout, entries) = plan(&spec);
        if entries.len() != params.len() {
            return Err(Error::Consistency(format!(
                "spec needs {} parameter tensors, got {}",
                entries.len(),
                params.len()
            )));
        }
        for ((name, shape, _), (got_name, t)) in entries.iter().zip(params.iter()) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(Error::Consistency(format!(
                    "parameter {got_name} {:?} does not match expected {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self {
            spec,
            params,
            layout,
            frozen: false,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Marks the model as a fixed teacher: bound parameters get no gradients.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn into_frozen(mut self) -> Self {
        self.freeze();
        self
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        self.params.bind(tape, !self.frozen)
    }

    /// Binds parameters as constants regardless of the frozen flag.
    pub fn bind_constant(&self, tape: &mut Tape) -> BoundParams {
        self.params.bind(tape, false)
    }

    fn conv(&self, tape: &mut Tape, p: &BoundParams, slot: ConvSlot, x: Var) -> Result<Var> {
        let y = tape.conv2d(x, p.get(slot.weight), slot.stride, slot.padding)?;
        match slot.bias {
            Some(b) => tape.add_channel_bias(y, p.get(b)),
            None => Ok(y),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<ForwardOutput> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.spec.in_channels {
            return Err(Error::dim(format!(
                "model expects [N,{},H,W] input, got {shape:?}",
                self.spec.in_channels
            )));
        }
        let mut taps = Vec::with_capacity(self.spec.tap_count());
        let stem = self.conv(tape, p, self.layout.stem, x)?;
        let mut h = tape.relu(stem);
        taps.push(h);
        for (slots, spec) in self.layout.blocks.iter().zip(&self.spec.blocks) {
            let input = h;
            let last = slots.convs.len() - 1;
            for (l, &slot) in slots.convs.iter().enumerate() {
                h = self.conv(tape, p, slot, h)?;
                if l < last || !spec.use_residual {
                    h = tape.relu(h);
                }
            }
            let skip = match slots.shortcut {
                Shortcut::None => None,
                Shortcut::Identity => Some(input),
                Shortcut::Projection(slot) => Some(self.conv(tape, p, slot, input)?),
            };
            if let Some(skip) = skip {
                let sum = tape.add(h, skip)?;
                h = tape.relu(sum);
            }
            taps.push(h);
        }
        let pooled = tape.global_avg_pool(h)?;
        let logits = tape.linear(
            pooled,
            p.get(self.layout.head_weight),
            self.layout.head_bias.map(|b| p.get(b)),
        )?;
        Ok(ForwardOutput { logits, taps })
    }

    /// Inference-only forward returning logits and tap values.
    pub fn forward_values(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let p = self.bind_constant(&mut tape);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &p, xv)?;
        let taps = out.taps.iter().map(|&t| tape.value(t).clone()).collect();
        Ok((tape.value(out.logits).clone(), taps))
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_values(x)?.0)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        self.logits(x)?.argmax_rows()
    }
}

/// Builds a student network; identical spec and seed give identical weights.
pub fn make_student(spec: &ModelSpec, seed: u64) -> Result<BlockCnn> {
    BlockCnn::new(spec.clone(), seed)
}

/// Builds a teacher network. Teachers are ordinary models until frozen.
pub fn make_teacher(spec: &ModelSpec, seed: u64) -> Result<BlockCnn> {
    BlockCnn::new(spec.clone(), seed)
}

/// Pairs teacher and student taps by index from the input side. Teacher taps
/// beyond the student's depth (and vice versa) are dropped.
pub fn pair_taps<T: Copy>(teacher: &[T], student: &[T]) -> Vec<(T, T)> {
    teacher.iter().copied().zip(student.iter().copied()).collect()
}

/// Student-to-teacher parameter-count ratio.
pub fn size_ratio(student: &BlockCnn, teacher: &BlockCnn) -> f64 {
    student.param_count() as f64 / teacher.param_count() as f64
}
