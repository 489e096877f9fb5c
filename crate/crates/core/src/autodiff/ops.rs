use super::kernels::{self, ConvGeom};
use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Rows with Euclidean norm below this normalize to the zero vector.
pub const NORM_EPS: f64 = 1e-12;

/// Bin `[start, end)` of adaptive 1-d pooling from `len_in` to `len_out`.
pub fn adaptive_bin(i: usize, len_in: usize, len_out: usize) -> (usize, usize) {
    let start = (i * len_in) / len_out;
    let end = ((i + 1) * len_in).div_ceil(len_out);
    (start, end)
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn rank2(op: &str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        ref s => Err(Error::dim(format!("{op} needs a rank-2 tensor, got {s:?}"))),
    }
}

fn rank4(op: &str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => Err(Error::dim(format!("{op} needs an NCHW tensor, got {s:?}"))),
    }
}

impl Tape {
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        if input == kernel {
            return Err(Error::contract("conv2d input and kernel must be distinct nodes"));
        }
        let x = self.value(input);
        let k = self.value(kernel);
        let g = ConvGeom::new(x.shape(), k.shape(), stride, padding)?;
        let out = kernels::conv2d_forward(&g, x.data(), k.data());
        let value = Tensor::new(vec![g.n, g.c_out, g.oh, g.ow], out)?;
        Ok(self.push(value, Op::Conv2d { input, kernel, stride, padding }, &[input, kernel]))
    }

    /// Adds `bias[c]` to every spatial position of channel `c`.
    pub fn add_channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let (_, c, h, w) = rank4("add_channel_bias", x)?;
        let b = self.value(bias);
        if b.numel() != c {
            return Err(Error::dim(format!(
                "bias of {} entries for {c} channels",
                b.numel()
            )));
        }
        let plane = h * w;
        let mut out = x.data().to_vec();
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let bc = b.data()[i % c];
            chunk.iter_mut().for_each(|v| *v += bc);
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(value, Op::AddChannelBias { input, bias }, &[input, bias]))
    }

    /// `input[N,in] @ weight[out,in]^T + bias[out]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let (rows, inner) = rank2("linear input", x)?;
        let (out, w_inner) = rank2("linear weight", w)?;
        if inner != w_inner {
            return Err(Error::dim(format!(
                "linear: input width {inner} vs weight {:?}",
                w.shape()
            )));
        }
        let mut y = kernels::matmul_bt(x.data(), w.data(), rows, inner, out);
        let mut deps = vec![input, weight];
        if let Some(b) = bias {
            let bv = self.value(b);
            if bv.numel() != out {
                return Err(Error::dim(format!("linear bias has {} entries, need {out}", bv.numel())));
            }
            for row in y.chunks_mut(out) {
                row.iter_mut().zip(bv.data()).for_each(|(v, b)| *v += b);
            }
            deps.push(b);
        }
        let value = Tensor::new(vec![rows, out], y)?;
        Ok(self.push(value, Op::Linear { input, weight, bias }, &deps))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = rank2("matmul lhs", self.value(a))?;
        let (k2, n) = rank2("matmul rhs", self.value(b))?;
        if k != k2 {
            return Err(Error::dim(format!("matmul: inner extents {k} and {k2} differ")));
        }
        let c = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(vec![m, n], c)?;
        Ok(self.push(value, Op::MatMul { a, b }, &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = rank2("transpose", x)?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x.data()[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    fn zip_with(&mut self, op_name: &str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(op_name, x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |p, q| p * q, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|v| v * factor);
        self.push(value, Op::Scale(a, factor), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(value, Op::Relu(a), &[a])
    }

    /// Per-channel maximum over spatial positions: `[N,C,H,W] -> [N,C]`.
    /// The gradient is routed to the first maximal position.
    pub fn spatial_max(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = rank4("spatial_max", x)?;
        let plane = h * w;
        if plane == 0 {
            return Err(Error::dim("spatial_max over an empty plane"));
        }
        let mut out = Vec::with_capacity(n * c);
        let mut argmax = Vec::with_capacity(n * c);
        for (p, chunk) in x.data().chunks(plane).enumerate() {
            let mut best = 0;
            for (i, &v) in chunk.iter().enumerate() {
                if v > chunk[best] {
                    best = i;
                }
            }
            out.push(chunk[best]);
            argmax.push(p * plane + best);
        }
        let value = Tensor::new(vec![n, c], out)?;
        Ok(self.push(value, Op::SpatialMax { input, argmax }, &[input]))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = rank4("global_avg_pool", x)?;
        let plane = (h * w) as f64;
        let out = x.data().chunks(h * w).map(|ch| ch.iter().sum::<f64>() / plane).collect();
        let value = Tensor::new(vec![n, c], out)?;
        Ok(self.push(value, Op::GlobalAvgPool(input), &[input]))
    }

    /// Row-wise softmax of a rank-2 tensor.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (_, k) = rank2("softmax", x)?;
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(k) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Softmax(a), &[a]))
    }

    /// Row-wise log-softmax of a rank-2 tensor.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (_, k) = rank2("log_softmax", x)?;
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(k) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(value, Op::LogSoftmax(a), &[a]))
    }

    /// Elementwise clamp; the gradient passes where `lo <= x <= hi`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|v| v.clamp(lo, hi));
        self.push(value, Op::Clamp { input: a, lo, hi }, &[a])
    }

    /// Elementwise sign with `sign(0) = 0`; its gradient is zero.
    pub fn sign(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        });
        self.push(value, Op::Sign(a), &[a])
    }

    /// Euclidean norm of all entries.
    pub fn l2_norm(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).norm_l2());
        self.push(value, Op::L2Norm(a), &[a])
    }

    /// Scales each row of a rank-2 tensor to unit Euclidean norm. Rows whose
    /// norm is below [`NORM_EPS`] become zero and pass no gradient.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (_, k) = rank2("normalize_rows", x)?;
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(k) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < NORM_EPS {
                row.iter_mut().for_each(|v| *v = 0.0);
            } else {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(value, Op::NormalizeRows(a), &[a]))
    }

    /// Adaptive max pooling along the last axis of `[N, C_in]` to `C_out` bins.
    pub fn adaptive_max_pool1d(&mut self, a: Var, len_out: usize) -> Result<Var> {
        let x = self.value(a);
        let (n, len_in) = rank2("adaptive_max_pool1d", x)?;
        if len_in == 0 || len_out == 0 {
            return Err(Error::dim("adaptive pooling needs non-empty input and output"));
        }
        let mut out = Vec::with_capacity(n * len_out);
        let mut argmax = Vec::with_capacity(n * len_out);
        for r in 0..n {
            let row = &x.data()[r * len_in..][..len_in];
            for i in 0..len_out {
                let (s, e) = adaptive_bin(i, len_in, len_out);
                let mut best = s;
                for j in s..e {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                out.push(row[best]);
                argmax.push(r * len_in + best);
            }
        }
        let value = Tensor::new(vec![n, len_out], out)?;
        Ok(self.push(value, Op::AdaptiveMaxPool1d { input: a, argmax }, &[a]))
    }

    /// Adaptive average pooling along the last axis of `[N, C_in]`.
    pub fn adaptive_avg_pool1d(&mut self, a: Var, len_out: usize) -> Result<Var> {
        let x = self.value(a);
        let (n, len_in) = rank2("adaptive_avg_pool1d", x)?;
        if len_in == 0 || len_out == 0 {
            return Err(Error::dim("adaptive pooling needs non-empty input and output"));
        }
        let mut out = Vec::with_capacity(n * len_out);
        for r in 0..n {
            let row = &x.data()[r * len_in..][..len_in];
            for i in 0..len_out {
                let (s, e) = adaptive_bin(i, len_in, len_out);
                out.push(row[s..e].iter().sum::<f64>() / (e - s) as f64);
            }
        }
        let value = Tensor::new(vec![n, len_out], out)?;
        Ok(self.push(value, Op::AdaptiveAvgPool1d(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = Tensor::scalar(x.sum() / x.numel().max(1) as f64);
        self.push(value, Op::Mean(a), &[a])
    }

    /// Applies the backward rule of node `idx` given its output gradient `g`.
    pub(super) fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, stride, padding } => {
                let x = self.value(*input);
                let k = self.value(*kernel);
                let geom = ConvGeom::new(x.shape(), k.shape(), *stride, *padding)
                    .expect("geometry validated in forward");
                let (gi, gk) = two_slots(self, grads, *input, *kernel);
                kernels::conv2d_backward(&geom, x.data(), k.data(), g, gi, gk);
            }
            Op::AddChannelBias { input, bias } => {
                if let Some(slot) = self.slot(grads, *input) {
                    add_into(slot, g);
                }
                let (_, c, h, w) = rank4("", self.value(*input)).expect("validated");
                if let Some(slot) = self.slot(grads, *bias) {
                    for (i, chunk) in g.chunks(h * w).enumerate() {
                        slot[i % c] += chunk.iter().sum::<f64>();
                    }
                }
            }
            Op::Linear { input, weight, bias } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (rows, inner) = (x.shape()[0], x.shape()[1]);
                let out = w.shape()[0];
                if let Some(slot) = self.slot(grads, *input) {
                    for r in 0..rows {
                        let gx = &mut slot[r * inner..][..inner];
                        for o in 0..out {
                            let go = g[r * out + o];
                            gx.iter_mut().zip(&w.data()[o * inner..][..inner]).for_each(|(s, wv)| *s += go * wv);
                        }
                    }
                }
                if let Some(slot) = self.slot(grads, *weight) {
                    for r in 0..rows {
                        let xr = &x.data()[r * inner..][..inner];
                        for o in 0..out {
                            let go = g[r * out + o];
                            slot[o * inner..][..inner].iter_mut().zip(xr).for_each(|(s, xv)| *s += go * xv);
                        }
                    }
                }
                if let Some(b) = bias {
                    if let Some(slot) = self.slot(grads, *b) {
                        for row in g.chunks(out) {
                            add_into(slot, row);
                        }
                    }
                }
            }
            Op::MatMul { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if let Some(slot) = self.slot(grads, *a) {
                    // dA = G @ B^T
                    let ga = kernels::matmul_bt(g, bv.data(), m, n, k);
                    add_into(slot, &ga);
                }
                if let Some(slot) = self.slot(grads, *b) {
                    // dB = A^T @ G
                    for i in 0..m {
                        for p in 0..k {
                            let aip = av.data()[i * k + p];
                            slot[p * n..][..n].iter_mut().zip(&g[i * n..][..n]).for_each(|(s, gv)| *s += aip * gv);
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                if let Some(slot) = self.slot(grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            slot[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(slot) = self.slot(grads, *a) {
                    add_into(slot, g);
                }
            }
            Op::Add(a, b) => {
                if let Some(slot) = self.slot(grads, *a) {
                    add_into(slot, g);
                }
                if let Some(slot) = self.slot(grads, *b) {
                    add_into(slot, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(slot) = self.slot(grads, *a) {
                    add_into(slot, g);
                }
                if let Some(slot) = self.slot(grads, *b) {
                    slot.iter_mut().zip(g).for_each(|(s, gv)| *s -= gv);
                }
            }
            Op::Mul(a, b) => {
                let bv = self.value(*b).data();
                if let Some(slot) = self.slot(grads, *a) {
                    slot.iter_mut().zip(g.iter().zip(bv)).for_each(|(s, (gv, y))| *s += gv * y);
                }
                let av = self.value(*a).data();
                if let Some(slot) = self.slot(grads, *b) {
                    slot.iter_mut().zip(g.iter().zip(av)).for_each(|(s, (gv, x))| *s += gv * x);
                }
            }
            Op::Scale(a, factor) => {
                if let Some(slot) = self.slot(grads, *a) {
                    slot.iter_mut().zip(g).for_each(|(s, gv)| *s += gv * factor);
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                if let Some(slot) = self.slot(grads, *a) {
                    for ((s, gv), &xv) in slot.iter_mut().zip(g).zip(x) {
                        if xv > 0.0 {
                            *s += gv;
                        }
                    }
                }
            }
            Op::SpatialMax { input, argmax } | Op::AdaptiveMaxPool1d { input, argmax } => {
                if let Some(slot) = self.slot(grads, *input) {
                    for (&pos, gv) in argmax.iter().zip(g) {
                        slot[pos] += gv;
                    }
                }
            }
            Op::GlobalAvgPool(a) => {
                let (_, _, h, w) = rank4("", self.value(*a)).expect("validated");
                let plane = h * w;
                if let Some(slot) = self.slot(grads, *a) {
                    for (chunk, gv) in slot.chunks_mut(plane).zip(g) {
                        let share = gv / plane as f64;
                        chunk.iter_mut().for_each(|s| *s += share);
                    }
                }
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let k = node.value.shape()[1];
                if let Some(slot) = self.slot(grads, *a) {
                    for ((srow, grow), yrow) in slot.chunks_mut(k).zip(g.chunks(k)).zip(y.chunks(k)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(p, q)| p * q).sum();
                        for ((s, gv), yv) in srow.iter_mut().zip(grow).zip(yrow) {
                            *s += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let y = node.value.data();
                let k = node.value.shape()[1];
                if let Some(slot) = self.slot(grads, *a) {
                    for ((srow, grow), yrow) in slot.chunks_mut(k).zip(g.chunks(k)).zip(y.chunks(k)) {
                        let total: f64 = grow.iter().sum();
                        for ((s, gv), yv) in srow.iter_mut().zip(grow).zip(yrow) {
                            *s += gv - yv.exp() * total;
                        }
                    }
                }
            }
            Op::Clamp { input, lo, hi } => {
                let x = self.value(*input).data();
                if let Some(slot) = self.slot(grads, *input) {
                    for ((s, gv), &xv) in slot.iter_mut().zip(g).zip(x) {
                        if xv >= *lo && xv <= *hi {
                            *s += gv;
                        }
                    }
                }
            }
            Op::Sign(a) => {
                // Zero almost everywhere; still mark the input as reached.
                let _ = self.slot(grads, *a);
            }
            Op::L2Norm(a) => {
                let x = self.value(*a).data();
                let norm = node.value.data()[0];
                if let Some(slot) = self.slot(grads, *a) {
                    if norm > 0.0 {
                        let gv = g[0] / norm;
                        slot.iter_mut().zip(x).for_each(|(s, xv)| *s += gv * xv);
                    }
                }
            }
            Op::NormalizeRows(a) => {
                let x = self.value(*a).data();
                let y = node.value.data();
                let k = node.value.shape()[1];
                if let Some(slot) = self.slot(grads, *a) {
                    for (((srow, grow), yrow), xrow) in slot
                        .chunks_mut(k)
                        .zip(g.chunks(k))
                        .zip(y.chunks(k))
                        .zip(x.chunks(k))
                    {
                        let norm = xrow.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if norm < NORM_EPS {
                            continue;
                        }
                        let dot: f64 = grow.iter().zip(yrow).map(|(p, q)| p * q).sum();
                        for ((s, gv), yv) in srow.iter_mut().zip(grow).zip(yrow) {
                            *s += (gv - yv * dot) / norm;
                        }
                    }
                }
            }
            Op::AdaptiveAvgPool1d(a) => {
                let len_in = self.value(*a).shape()[1];
                let len_out = node.value.shape()[1];
                if let Some(slot) = self.slot(grads, *a) {
                    for (srow, grow) in slot.chunks_mut(len_in).zip(g.chunks(len_out)) {
                        for (i, gv) in grow.iter().enumerate() {
                            let (s, e) = adaptive_bin(i, len_in, len_out);
                            let share = gv / (e - s) as f64;
                            srow[s..e].iter_mut().for_each(|v| *v += share);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(slot) = self.slot(grads, *a) {
                    slot.iter_mut().for_each(|s| *s += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(slot) = self.slot(grads, *a) {
                    let share = g[0] / slot.len().max(1) as f64;
                    slot.iter_mut().for_each(|s| *s += share);
                }
            }
        }
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
    }
}

/// Mutable gradient slots for two distinct nodes.
fn two_slots<'g>(
    tape: &Tape,
    grads: &'g mut [Option<Vec<f64>>],
    a: Var,
    b: Var,
) -> (Option<&'g mut [f64]>, Option<&'g mut [f64]>) {
    debug_assert_ne!(a, b);
    for v in [a, b] {
        let _ = tape.slot(grads, v);
    }
    let (lo, hi, swapped) = if a.0 < b.0 { (a.0, b.0, false) } else { (b.0, a.0, true) };
    let (left, right) = grads.split_at_mut(hi);
    let first = left[lo].as_deref_mut();
    let second = right[0].as_deref_mut();
    if swapped {
        (second, first)
    } else {
        (first, second)
    }
}

fn add_into(slot: &mut [f64], g: &[f64]) {
    slot.iter_mut().zip(g).for_each(|(s, gv)| *s += gv);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_of_ones_is_nine() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let k = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[9.0]);
    }

    #[test]
    fn conv_with_zero_kernel_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 5, 5], |i| i as f64 * 0.37 - 4.0));
        let k = tape.constant(Tensor::zeros(&[4, 3, 3, 3]));
        let y = tape.conv2d(x, k, 1, 1).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn strided_corner_kernel_picks_every_other_pixel() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[1, 1, 4, 4], |i| (i + 1) as f64));
        let k = tape.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap());
        let y = tape.conv2d(x, k, 2, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 3.0, 9.0, 11.0]);
    }

    #[test]
    fn conv_channel_mismatch_is_dimension_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let k = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
        assert!(matches!(tape.conv2d(x, k, 1, 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn relu_values() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let neg = tape.constant(Tensor::from_vec(vec![-3.0, -0.5]));
        let z = tape.relu(neg);
        assert_eq!(tape.value(z).data(), &[0.0, 0.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::from_vec(vec![0.0, 1.0]));
        let y = tape.relu(x);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn adaptive_bins_match_hand_computation() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 4], vec![1.0, 3.0, 2.0, 5.0]).unwrap());
        let y = tape.adaptive_max_pool1d(x, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 5.0]);
        let one = tape.constant(Tensor::new(vec![1, 1], vec![7.0]).unwrap());
        let up = tape.adaptive_max_pool1d(one, 3).unwrap();
        assert_eq!(tape.value(up).data(), &[7.0, 7.0, 7.0]);
        let same = tape.adaptive_max_pool1d(x, 4).unwrap();
        assert_eq!(tape.value(same).data(), tape.value(x).data());
        // overlapping bins when not divisible: 5 -> 3 gives [0,2) [1,4) [3,5)
        assert_eq!(adaptive_bin(0, 5, 3), (0, 2));
        assert_eq!(adaptive_bin(1, 5, 3), (1, 4));
        assert_eq!(adaptive_bin(2, 5, 3), (3, 5));
    }

    #[test]
    fn normalize_rows_zero_row_stays_zero() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::new(vec![2, 2], vec![3.0, 4.0, 0.0, 0.0]).unwrap());
        let y = tape.normalize_rows(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.6, 0.8, 0.0, 0.0]);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        let g = tape.grad(x).unwrap().data();
        assert_eq!(&g[2..], &[0.0, 0.0]);
    }

    #[test]
    fn spatial_max_ties_route_to_first() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::new(vec![1, 1, 2, 2], vec![5.0, 1.0, 5.0, 0.0]).unwrap());
        let m = tape.spatial_max(x).unwrap();
        let s = tape.sum(m);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 1000.0, 0.0, -1000.0]).unwrap());
        let y = tape.softmax(x).unwrap();
        for row in tape.value(y).data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
        let l = tape.log_softmax(x).unwrap();
        assert!(tape.value(l).data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn sign_and_clamp() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::from_vec(vec![-2.0, 0.0, 0.5, 3.0]));
        let s = tape.sign(x);
        assert_eq!(tape.value(s).data(), &[-1.0, 0.0, 1.0, 1.0]);
        let c = tape.clamp(x, -1.0, 1.0);
        assert_eq!(tape.value(c).data(), &[-1.0, 0.0, 0.5, 1.0]);
        let total = tape.sum(c);
        tape.backward(total).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);
    }
}
