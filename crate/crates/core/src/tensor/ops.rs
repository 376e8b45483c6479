use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, NodeId, Op};
use super::Tensor;
use crate::error::{Error, Result};

/// Below this norm `l2_normalize` passes its input through unchanged.
pub const L2_EPS: f64 = 1e-12;

/// Across-channel local response normalization settings.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LrnParams {
    pub size: usize,
    pub k: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LrnParams {
    fn default() -> Self {
        Self {
            size: 5,
            k: 2.0,
            alpha: 1e-4,
            beta: 0.75,
        }
    }
}

/// Output extent of a sliding window along one axis, or `None` if the window
/// does not fit.
pub fn window_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

fn dims3(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        &[c, h, w] => Ok((c, h, w)),
        s => Err(Error::Dimension(format!(
            "{what} expects a C×H×W tensor, got {s:?}"
        ))),
    }
}

fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        &[r, c] => Ok((r, c)),
        s => Err(Error::Dimension(format!(
            "{what} expects a matrix, got {s:?}"
        ))),
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).expect("kernel produced consistent shape")
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            row.iter_mut().zip(brow).for_each(|(o, &bv)| *o += av * bv);
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Zero-padded copy of a C×H×W volume.
fn pad_volume(x: &[f64], c: usize, h: usize, w: usize, pad: usize) -> Vec<f64> {
    if pad == 0 {
        return x.to_vec();
    }
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![0.0; c * hp * wp];
    for ch in 0..c {
        for i in 0..h {
            let src = &x[(ch * h + i) * w..(ch * h + i + 1) * w];
            let start = (ch * hp + i + pad) * wp + pad;
            out[start..start + w].copy_from_slice(src);
        }
    }
    out
}

/// Sliding-window geometry of one conv2d call on a padded input.
struct ConvGeom {
    c_in: usize,
    hp: usize,
    wp: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    /// Row `(c, p, q)` holds the input value under kernel tap `(p, q)` of
    /// channel `c` for every output position.
    fn im2col(&self, xp: &[f64]) -> Vec<f64> {
        let plane = self.oh * self.ow;
        let mut cols = Vec::with_capacity(self.rows() * plane);
        for c in 0..self.c_in {
            let src = &xp[c * self.hp * self.wp..(c + 1) * self.hp * self.wp];
            for p in 0..self.kh {
                for q in 0..self.kw {
                    for i in 0..self.oh {
                        let row = &src[(i * self.stride + p) * self.wp + q..];
                        cols.extend((0..self.ow).map(|j| row[j * self.stride]));
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatter-adds columns back onto the padded input.
    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let plane = self.oh * self.ow;
        let mut xp = vec![0.0; self.c_in * self.hp * self.wp];
        let mut chunks = cols.chunks(plane);
        for c in 0..self.c_in {
            for p in 0..self.kh {
                for q in 0..self.kw {
                    let col = chunks.next().expect("column count matches geometry");
                    for i in 0..self.oh {
                        let base = c * self.hp * self.wp + (i * self.stride + p) * self.wp + q;
                        for (j, v) in col[i * self.ow..(i + 1) * self.ow].iter().enumerate() {
                            xp[base + j * self.stride] += v;
                        }
                    }
                }
            }
        }
        xp
    }
}

fn lrn_window(c: usize, channels: usize, size: usize) -> std::ops::RangeInclusive<usize> {
    let half = size / 2;
    c.saturating_sub(half)..=(c + half).min(channels - 1)
}

pub(crate) fn softmax_scaled(e: &[f64], lambda: f64) -> Vec<f64> {
    let max = e.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(lambda * v));
    let exps: Vec<f64> = e.iter().map(|&v| (lambda * v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|v| v / total).collect()
}

/// Inverted-dropout multiplier mask: 0 with probability `p`, else `1/(1-p)`.
pub fn dropout_mask(len: usize, p: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = 1.0 / (1.0 - p);
    (0..len)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect()
}

impl Graph {
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = dims2(self.value(a), "matmul")?;
        let (k2, n) = dims2(self.value(b), "matmul")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions disagree: {:?} × {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = matmul_raw(self.data(a), self.data(b), m, k, n);
        Ok(self.push(tensor(&[m, n], out), Op::MatMul { a, b }))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = dims2(self.value(a), "transpose")?;
        let out = transpose_raw(self.data(a), r, c);
        Ok(self.push(tensor(&[c, r], out), Op::Transpose { a }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape(self.value(a), self.value(b), "add")?;
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(tensor(&shape, out), Op::Add { a, b }))
    }

    /// Adds a length-`cols` vector to every row of a `rows×cols` matrix.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (rows, cols) = dims2(self.value(x), "add_row")?;
        if self.value(bias).numel() != cols {
            return Err(Error::Dimension(format!(
                "add_row: bias {:?} does not match matrix {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let b = self.data(bias);
        let out = self
            .data(x)
            .chunks(cols)
            .flat_map(|row| row.iter().zip(b).map(|(v, bv)| v + bv))
            .collect();
        Ok(self.push(tensor(&[rows, cols], out), Op::AddRow { x, bias }))
    }

    /// Adds one bias per channel of a C×H×W volume.
    pub fn add_channel(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (c, h, w) = dims3(self.value(x), "add_channel")?;
        if self.value(bias).numel() != c {
            return Err(Error::Dimension(format!(
                "add_channel: bias {:?} does not match volume {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let b = self.data(bias);
        let out = self
            .data(x)
            .chunks(h * w)
            .zip(b)
            .flat_map(|(plane, bv)| plane.iter().map(move |v| v + bv))
            .collect();
        Ok(self.push(tensor(&[c, h, w], out), Op::AddChannel { x, bias }))
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(tensor(&shape, out), Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let out = self.data(a).iter().map(|v| v * factor).collect();
        let shape = self.shape(a).to_vec();
        self.push(tensor(&shape, out), Op::Scale { a, factor })
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let out = self.data(a).iter().map(|v| v.tanh()).collect();
        let shape = self.shape(a).to_vec();
        self.push(tensor(&shape, out), Op::Tanh { a })
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let out = self.data(a).iter().map(|v| v.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        self.push(tensor(&shape, out), Op::Relu { a })
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let total = self.data(a).iter().sum();
        self.push(Tensor::scalar(total), Op::Sum { a })
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(a).reshaped(shape)?;
        Ok(self.push(value, Op::Reshape { a }))
    }

    /// Concatenates the flattened inputs into one vector.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Input("concat of zero tensors".into()));
        }
        let out: Vec<f64> = parts.iter().flat_map(|&p| self.data(p).to_vec()).collect();
        let len = out.len();
        Ok(self.push(
            tensor(&[len], out),
            Op::Concat {
                parts: parts.to_vec(),
            },
        ))
    }

    /// 2-D cross-correlation of a C_in×H×W volume with C_out×C_in×kh×kw kernels.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        kernels: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let (c_in, h, w) = dims3(self.value(x), "conv2d input")?;
        let (c_out, kc, kh, kw) = match self.shape(kernels) {
            &[a, b, c, d] => (a, b, c, d),
            s => {
                return Err(Error::Dimension(format!(
                    "conv2d kernels must be C_out×C_in×kh×kw, got {s:?}"
                )))
            }
        };
        if kc != c_in {
            return Err(Error::Dimension(format!(
                "conv2d: kernels {:?} expect {kc} input channels, input is {:?}",
                self.shape(kernels),
                self.shape(x)
            )));
        }
        if stride == 0 {
            return Err(Error::Dimension("conv2d stride must be at least 1".into()));
        }
        let (Some(oh), Some(ow)) = (
            window_extent(h, kh, stride, padding),
            window_extent(w, kw, stride, padding),
        ) else {
            return Err(Error::Dimension(format!(
                "conv2d kernel {kh}×{kw} larger than padded input {}×{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        };
        let geom = ConvGeom {
            c_in,
            hp: h + 2 * padding,
            wp: w + 2 * padding,
            kh,
            kw,
            stride,
            oh,
            ow,
        };
        let cols = geom.im2col(&pad_volume(self.data(x), c_in, h, w, padding));
        let k = self.data(kernels);
        let (r, plane) = (geom.rows(), oh * ow);
        let mut out = vec![0.0; c_out * plane];
        for (o, dst) in out.chunks_mut(plane).enumerate() {
            for (wv, col) in k[o * r..(o + 1) * r].iter().zip(cols.chunks(plane)) {
                dst.iter_mut().zip(col).for_each(|(d, c)| *d += wv * c);
            }
        }
        Ok(self.push(
            tensor(&[c_out, oh, ow], out),
            Op::Conv2d {
                x,
                kernels,
                stride,
                padding,
            },
        ))
    }

    /// Per-channel max over k×k windows.
    pub fn maxpool2d(&mut self, x: NodeId, k: usize, stride: usize) -> Result<NodeId> {
        let (c, h, w) = dims3(self.value(x), "maxpool2d")?;
        let (Some(oh), Some(ow)) = (
            window_extent(h, k, stride, 0),
            window_extent(w, k, stride, 0),
        ) else {
            return Err(Error::Dimension(format!(
                "maxpool2d window {k} (stride {stride}) exceeds input {h}×{w}"
            )));
        };
        let data = self.data(x);
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = usize::MAX;
                    let mut best_v = f64::NEG_INFINITY;
                    for p in 0..k {
                        for q in 0..k {
                            let idx = (ch * h + i * stride + p) * w + j * stride + q;
                            if best == usize::MAX || data[idx] > best_v {
                                best = idx;
                                best_v = data[idx];
                            }
                        }
                    }
                    out.push(best_v);
                    argmax.push(best);
                }
            }
        }
        Ok(self.push(tensor(&[c, oh, ow], out), Op::MaxPool { x, argmax }))
    }

    /// `out_c = x_c / (k + alpha * Σ_{c' near c} x_{c'}²)^beta`
    pub fn local_response_norm(&mut self, x: NodeId, params: LrnParams) -> Result<NodeId> {
        let (c, h, w) = dims3(self.value(x), "local_response_norm")?;
        if params.size.is_multiple_of(2) || params.size > 2 * c - 1 {
            return Err(Error::Dimension(format!(
                "LRN size must be odd and at most {}, got {}",
                2 * c - 1,
                params.size
            )));
        }
        let hw = h * w;
        let data = self.data(x);
        let mut denom = vec![0.0; c * hw];
        for ch in 0..c {
            for nb in lrn_window(ch, c, params.size) {
                let src = &data[nb * hw..(nb + 1) * hw];
                denom[ch * hw..(ch + 1) * hw]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(d, v)| *d += v * v);
            }
        }
        denom
            .iter_mut()
            .for_each(|d| *d = params.k + params.alpha * *d);
        let out = data
            .iter()
            .zip(&denom)
            .map(|(v, d)| v * d.powf(-params.beta))
            .collect();
        Ok(self.push(tensor(&[c, h, w], out), Op::Lrn { x, params, denom }))
    }

    /// `softmax(lambda * e)` over a vector, computed with max subtraction.
    pub fn scaled_softmax(&mut self, e: NodeId, lambda: f64) -> Result<NodeId> {
        if self.value(e).rank() != 1 {
            return Err(Error::Dimension(format!(
                "scaled_softmax expects a vector, got {:?}",
                self.shape(e)
            )));
        }
        let out = softmax_scaled(self.data(e), lambda);
        let len = out.len();
        Ok(self.push(tensor(&[len], out), Op::ScaledSoftmax { e, lambda }))
    }

    /// Sums consecutive non-overlapping windows of `k` elements.
    pub fn sum_pool_segments(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        let n = self.value(x).numel();
        if k == 0 || !n.is_multiple_of(k) {
            return Err(Error::Dimension(format!(
                "sum_pool_segments: length {n} is not divisible by window {k}"
            )));
        }
        let out: Vec<f64> = self.data(x).chunks(k).map(|w| w.iter().sum()).collect();
        Ok(self.push(tensor(&[n / k], out), Op::SumPool { x, k }))
    }

    /// Scales to unit Euclidean norm; inputs with norm at most [`L2_EPS`] pass through.
    pub fn l2_normalize(&mut self, x: NodeId) -> NodeId {
        let norm = self.data(x).iter().map(|v| v * v).sum::<f64>().sqrt();
        let shape = self.shape(x).to_vec();
        if norm <= L2_EPS {
            let out = self.data(x).to_vec();
            return self.push(tensor(&shape, out), Op::L2Normalize { x, norm: None });
        }
        let out = self.data(x).iter().map(|v| v / norm).collect();
        self.push(
            tensor(&shape, out),
            Op::L2Normalize {
                x,
                norm: Some(norm),
            },
        )
    }

    /// Inverted dropout. Identity when not training or when `p == 0`.
    pub fn dropout(&mut self, x: NodeId, p: f64, training: bool, seed: u64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Input(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        let n = self.value(x).numel();
        let mask = if training && p > 0.0 {
            dropout_mask(n, p, seed)
        } else {
            vec![1.0; n]
        };
        let out = self.data(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(tensor(&shape, out), Op::Dropout { x, mask }))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)` for a
    /// B×K logit matrix (a length-K vector counts as B = 1).
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (batch, classes) = match self.shape(logits) {
            &[k] => (1, k),
            &[b, k] => (b, k),
            s => {
                return Err(Error::Dimension(format!(
                    "cross_entropy expects B×K logits, got {s:?}"
                )))
            }
        };
        if labels.len() != batch {
            return Err(Error::Dimension(format!(
                "cross_entropy: {} labels for batch of {batch}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Index(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let mut probs = Vec::with_capacity(batch * classes);
        let mut loss = 0.0;
        for (row, &label) in self.data(logits).chunks(classes).zip(labels) {
            let (top, max) =
                row.iter()
                    .enumerate()
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |(i, m), (j, &v)| if v > m { (j, v) } else { (i, m) },
                    );
            // log Σ exp(v - max) = ln(1 + rest), kept accurate when rest is tiny
            let rest: f64 = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != top)
                .map(|(_, v)| (v - max).exp())
                .sum();
            let log_sum = rest.ln_1p();
            loss += (max - row[label]) + log_sum;
            probs.extend(row.iter().map(|v| ((v - max) - log_sum).exp()));
        }
        Ok(self.push(
            Tensor::scalar(loss / batch as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }
}

/// Gradients of `op`'s inputs given the upstream gradient of its output.
/// Inputs that do not need a gradient are skipped.
pub(crate) fn backward(g: &Graph, op: &Op, out: &Tensor, up: &[f64]) -> Vec<(NodeId, Vec<f64>)> {
    let needs = |id: NodeId| g.nodes[id.0].needs_grad;
    let mut res = Vec::new();
    match op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let (m, k) = (g.shape(*a)[0], g.shape(*a)[1]);
            let n = g.shape(*b)[1];
            if needs(*a) {
                let bt = transpose_raw(g.data(*b), k, n);
                res.push((*a, matmul_raw(up, &bt, m, n, k)));
            }
            if needs(*b) {
                let at = transpose_raw(g.data(*a), m, k);
                res.push((*b, matmul_raw(&at, up, k, m, n)));
            }
        }
        Op::Transpose { a } => {
            let (r, c) = (g.shape(*a)[0], g.shape(*a)[1]);
            res.push((*a, transpose_raw(up, c, r)));
        }
        Op::Add { a, b } => {
            res.push((*a, up.to_vec()));
            res.push((*b, up.to_vec()));
        }
        Op::AddRow { x, bias } => {
            let cols = g.value(*bias).numel();
            if needs(*bias) {
                let mut gb = vec![0.0; cols];
                for row in up.chunks(cols) {
                    gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                }
                res.push((*bias, gb));
            }
            res.push((*x, up.to_vec()));
        }
        Op::AddChannel { x, bias } => {
            let c = g.value(*bias).numel();
            if needs(*bias) {
                let plane = up.len() / c;
                res.push((*bias, up.chunks(plane).map(|p| p.iter().sum()).collect()));
            }
            res.push((*x, up.to_vec()));
        }
        Op::Mul { a, b } => {
            if needs(*a) {
                res.push((*a, up.iter().zip(g.data(*b)).map(|(u, v)| u * v).collect()));
            }
            if needs(*b) {
                res.push((*b, up.iter().zip(g.data(*a)).map(|(u, v)| u * v).collect()));
            }
        }
        Op::Scale { a, factor } => res.push((*a, up.iter().map(|u| u * factor).collect())),
        Op::Tanh { a } => res.push((
            *a,
            up.iter()
                .zip(out.data())
                .map(|(u, y)| u * (1.0 - y * y))
                .collect(),
        )),
        Op::Relu { a } => res.push((
            *a,
            up.iter()
                .zip(g.data(*a))
                .map(|(u, x)| if *x > 0.0 { *u } else { 0.0 })
                .collect(),
        )),
        Op::Sum { a } => res.push((*a, vec![up[0]; g.value(*a).numel()])),
        Op::Reshape { a } => res.push((*a, up.to_vec())),
        Op::Concat { parts } => {
            let mut offset = 0;
            for p in parts {
                let n = g.value(*p).numel();
                res.push((*p, up[offset..offset + n].to_vec()));
                offset += n;
            }
        }
        Op::Conv2d {
            x,
            kernels,
            stride,
            padding,
        } => {
            let (c_in, h, w) = (g.shape(*x)[0], g.shape(*x)[1], g.shape(*x)[2]);
            let &[c_out, _, kh, kw] = g.shape(*kernels) else {
                unreachable!("conv2d kernels validated in forward")
            };
            let (oh, ow) = (out.shape()[1], out.shape()[2]);
            let geom = ConvGeom {
                c_in,
                hp: h + 2 * padding,
                wp: w + 2 * padding,
                kh,
                kw,
                stride: *stride,
                oh,
                ow,
            };
            let (hp, wp) = (geom.hp, geom.wp);
            let cols = geom.im2col(&pad_volume(g.data(*x), c_in, h, w, *padding));
            let k = g.data(*kernels);
            let want_x = needs(*x);
            let (r, plane) = (geom.rows(), oh * ow);
            let mut gk = vec![0.0; k.len()];
            let mut gcols = if want_x {
                vec![0.0; cols.len()]
            } else {
                Vec::new()
            };
            for o in 0..c_out {
                let gplane = &up[o * plane..(o + 1) * plane];
                for (j, col) in cols.chunks(plane).enumerate() {
                    gk[o * r + j] = gplane.iter().zip(col).map(|(a, b)| a * b).sum();
                }
                if want_x {
                    for (wv, gcol) in k[o * r..(o + 1) * r].iter().zip(gcols.chunks_mut(plane)) {
                        gcol.iter_mut().zip(gplane).for_each(|(d, u)| *d += wv * u);
                    }
                }
            }
            let gxp = if want_x {
                geom.col2im(&gcols)
            } else {
                Vec::new()
            };
            if want_x {
                let gx = if *padding == 0 {
                    gxp
                } else {
                    let mut gx = Vec::with_capacity(c_in * h * w);
                    for c in 0..c_in {
                        for i in 0..h {
                            let start = (c * hp + i + padding) * wp + padding;
                            gx.extend_from_slice(&gxp[start..start + w]);
                        }
                    }
                    gx
                };
                res.push((*x, gx));
            }
            res.push((*kernels, gk));
        }
        Op::MaxPool { x, argmax } => {
            let mut gx = vec![0.0; g.value(*x).numel()];
            for (&idx, u) in argmax.iter().zip(up) {
                gx[idx] += u;
            }
            res.push((*x, gx));
        }
        Op::Lrn { x, params, denom } => {
            let (c, h, w) = (g.shape(*x)[0], g.shape(*x)[1], g.shape(*x)[2]);
            let hw = h * w;
            let xv = g.data(*x);
            // s_c = up_c * x_c * D_c^(-beta-1), the shared factor of the cross terms.
            let shared: Vec<f64> = up
                .iter()
                .zip(xv)
                .zip(denom)
                .map(|((u, v), d)| u * v * d.powf(-params.beta - 1.0))
                .collect();
            let mut gx: Vec<f64> = up
                .iter()
                .zip(denom)
                .map(|(u, d)| u * d.powf(-params.beta))
                .collect();
            let coef = 2.0 * params.alpha * params.beta;
            for ch in 0..c {
                // channel `ch` appears in the window of every channel within size/2 of it
                for nb in lrn_window(ch, c, params.size) {
                    for pos in 0..hw {
                        gx[ch * hw + pos] -= coef * xv[ch * hw + pos] * shared[nb * hw + pos];
                    }
                }
            }
            res.push((*x, gx));
        }
        Op::ScaledSoftmax { e, lambda } => {
            let alpha = out.data();
            let dot: f64 = alpha.iter().zip(up).map(|(a, u)| a * u).sum();
            res.push((
                *e,
                alpha
                    .iter()
                    .zip(up)
                    .map(|(a, u)| lambda * a * (u - dot))
                    .collect(),
            ));
        }
        Op::SumPool { x, k } => res.push((
            *x,
            up.iter()
                .flat_map(|&u| std::iter::repeat_n(u, *k))
                .collect(),
        )),
        Op::L2Normalize { x, norm } => match norm {
            None => res.push((*x, up.to_vec())),
            Some(norm) => {
                let y = out.data();
                let dot: f64 = y.iter().zip(up).map(|(a, u)| a * u).sum();
                res.push((
                    *x,
                    y.iter()
                        .zip(up)
                        .map(|(yv, u)| (u - yv * dot) / norm)
                        .collect(),
                ));
            }
        },
        Op::Dropout { x, mask } => {
            res.push((*x, up.iter().zip(mask).map(|(u, m)| u * m).collect()))
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let batch = labels.len();
            let classes = probs.len() / batch;
            let scale = up[0] / batch as f64;
            let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
            for (b, &label) in labels.iter().enumerate() {
                gl[b * classes + label] -= scale;
            }
            res.push((*logits, gl));
        }
    }
    res
}
