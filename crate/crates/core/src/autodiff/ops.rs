//! Forward constructors for every differentiable primitive.

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

use super::graph::{Graph, Op, Var};
use super::kernels::{self, MatMut, MatRef};

/// Blocked (query, key) pairs for [`Graph::attention`]; blocked pairs get a
/// `-inf` logit before the softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    n_q: usize,
    n_kv: usize,
    blocked: Vec<bool>,
}

impl AttentionMask {
    pub fn new(n_q: usize, n_kv: usize, blocked: Vec<bool>) -> Result<Self> {
        if blocked.len() != n_q * n_kv {
            return Err(Error::shape(format!(
                "mask of {} entries for {n_q}x{n_kv} scores",
                blocked.len()
            )));
        }
        Ok(AttentionMask { n_q, n_kv, blocked })
    }

    /// Blocks every key whose `key_valid` flag is false, for all queries.
    pub fn key_padding(n_q: usize, key_valid: &[bool]) -> Self {
        let n_kv = key_valid.len();
        let mut blocked = Vec::with_capacity(n_q * n_kv);
        for _ in 0..n_q {
            blocked.extend(key_valid.iter().map(|v| !v));
        }
        AttentionMask { n_q, n_kv, blocked }
    }

    pub fn is_blocked(&self, q: usize, k: usize) -> bool {
        self.blocked[q * self.n_kv + k]
    }
}

fn matrix_dims(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    match *shape {
        [r, c] => Ok((r, c)),
        _ => Err(Error::shape(format!("{what} expects a matrix, got {shape:?}"))),
    }
}

fn image_dims(shape: &[usize], what: &str) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::shape(format!(
            "{what} expects a CxHxW tensor, got {shape:?}"
        ))),
    }
}

impl Graph<'_> {
    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims(self.shape(a), "matmul lhs")?;
        let (k2, n) = matrix_dims(self.shape(b), "matmul rhs")?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new([m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what} needs equal shapes, got {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn map_binary(&self, a: Var, b: Var, f: impl Fn(Float, Float) -> Float) -> Tensor {
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(av.shape().to_vec(), data).expect("shape preserved")
    }

    fn map_unary(&self, x: Var, f: impl Fn(Float) -> Float) -> Tensor {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        Tensor::new(xv.shape().to_vec(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.map_binary(a, b, |x, y| x + y);
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self.map_binary(a, b, |x, y| x * y);
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: Float) -> Var {
        let value = self.map_unary(x, |v| v * factor);
        self.push(value, Op::Scale(x, factor), &[x])
    }

    /// `x[..×D] + bias[D]`, the only broadcast the graph supports.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(bias) != [d] {
            return Err(Error::shape(format!(
                "bias {:?} does not match trailing dimension of {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let b = self.value(bias).data().to_vec();
        let xv = self.value(x);
        let data = xv
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(&b).map(|(v, bb)| v + bb))
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddBias { x, bias }, &[x, bias]))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.map_unary(x, kernels::gelu);
        self.push(value, Op::Gelu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.map_unary(x, kernels::sigmoid);
        self.push(value, Op::Sigmoid(x), &[x])
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let cols = xv.last_dim();
        let mut data = xv.data().to_vec();
        kernels::softmax_rows(&mut data, cols);
        let value = Tensor::new(xv.shape().to_vec(), data).expect("shape preserved");
        self.push(value, Op::Softmax(x), &[x])
    }

    /// Normalizes each row over the last dimension, then applies `gain` and
    /// `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: Float) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape(format!(
                "layer norm over width {d} got gain {:?} and bias {:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let xv = self.value(x);
        let rows = xv.numel() / d.max(1);
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(d) {
            let mean = row.iter().sum::<Float>() / d as Float;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Float>() / d as Float;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Multi-head scaled dot-product attention. `q` is `n_q×D`, `k` and `v`
    /// are `n_kv×D`; heads split `D` into contiguous column blocks.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<&AttentionMask>,
        heads: usize,
    ) -> Result<Var> {
        let (n_q, d) = matrix_dims(self.shape(q), "attention queries")?;
        let (n_kv, dk) = matrix_dims(self.shape(k), "attention keys")?;
        if self.shape(v) != [n_kv, d] || dk != d {
            return Err(Error::shape(format!(
                "attention shapes q {:?}, k {:?}, v {:?} disagree",
                self.shape(q),
                self.shape(k),
                self.shape(v)
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape(format!("{heads} heads do not divide width {d}")));
        }
        if let Some(m) = mask {
            if m.n_q != n_q || m.n_kv != n_kv {
                return Err(Error::shape(format!(
                    "mask {}x{} for {n_q}x{n_kv} scores",
                    m.n_q, m.n_kv
                )));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as Float).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut probs = vec![0.0; heads * n_q * n_kv];
        let mut out = vec![0.0; n_q * d];
        for h in 0..heads {
            let p = &mut probs[h * n_q * n_kv..(h + 1) * n_q * n_kv];
            kernels::gemm(
                scale,
                MatRef::columns(qd, n_q, d, h * dh, dh),
                MatRef::columns(kd, n_kv, d, h * dh, dh).t(),
                0.0,
                MatMut::dense(p, n_q, n_kv),
            );
            for (i, row) in p.chunks_mut(n_kv).enumerate() {
                if let Some(m) = mask {
                    for (j, s) in row.iter_mut().enumerate() {
                        if m.is_blocked(i, j) {
                            *s = Float::NEG_INFINITY;
                        }
                    }
                }
                kernels::softmax_in_place(row);
            }
            kernels::gemm(
                1.0,
                MatRef::dense(p, n_q, n_kv),
                MatRef::columns(vd, n_kv, d, h * dh, dh),
                0.0,
                MatMut::columns(&mut out, n_q, d, h * dh, dh),
            );
        }
        let value = Tensor::new([n_q, d], out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Attention probabilities as they would be computed by
    /// [`Graph::attention`], laid out `heads × n_q × n_kv`. Not recorded.
    pub fn attention_weights(
        &self,
        q: Var,
        k: Var,
        mask: Option<&AttentionMask>,
        heads: usize,
    ) -> Result<Tensor> {
        let (n_q, d) = matrix_dims(self.shape(q), "attention queries")?;
        let (n_kv, _) = matrix_dims(self.shape(k), "attention keys")?;
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape(format!("{heads} heads do not divide width {d}")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as Float).sqrt();
        let mut probs = vec![0.0; heads * n_q * n_kv];
        for h in 0..heads {
            let p = &mut probs[h * n_q * n_kv..(h + 1) * n_q * n_kv];
            kernels::gemm(
                scale,
                MatRef::columns(self.value(q).data(), n_q, d, h * dh, dh),
                MatRef::columns(self.value(k).data(), n_kv, d, h * dh, dh).t(),
                0.0,
                MatMut::dense(p, n_q, n_kv),
            );
            for (i, row) in p.chunks_mut(n_kv).enumerate() {
                if let Some(m) = mask {
                    for (j, s) in row.iter_mut().enumerate() {
                        if m.is_blocked(i, j) {
                            *s = Float::NEG_INFINITY;
                        }
                    }
                }
                kernels::softmax_in_place(row);
            }
        }
        Tensor::new([heads, n_q, n_kv], probs)
    }

    /// Selects rows of a `rows×D` table; the gradient is scattered back.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = matrix_dims(self.shape(table), "gather table")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::shape(format!("row {bad} outside table of {rows} rows")));
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let value = Tensor::new([ids.len(), d], out)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Token-id lookup into an embedding table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Matrix transpose.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = matrix_dims(self.shape(x), "transpose")?;
        let data = kernels::transpose(self.value(x).data(), rows, cols);
        let value = Tensor::new([cols, rows], data)?;
        Ok(self.push(value, Op::Transpose { x, rows, cols }, &[x]))
    }

    /// Concatenates along the leading dimension.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of nothing"))?;
        let tail = self.shape(*first).get(1..).unwrap_or(&[]).to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::shape(format!(
                    "cannot concatenate {:?} after trailing shape {tail:?}",
                    s
                )));
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Concat(parts.to_vec()), parts))
    }

    /// Leading-dimension slice `[start, end)`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || start > end || end > s[0] {
            return Err(Error::shape(format!("rows {start}..{end} out of {s:?}")));
        }
        let row: usize = s[1..].iter().product();
        let data = self.value(x).data()[start * row..end * row].to_vec();
        let mut shape = s.clone();
        shape[0] = end - start;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::SliceRows {
                x,
                offset: start * row,
            },
            &[x],
        ))
    }

    /// Splits `C×H×W` into non-overlapping `k×k` windows, one row per window
    /// in raster order, columns ordered `(c, dy, dx)`.
    pub fn patchify(&mut self, x: Var, k: usize) -> Result<Var> {
        let (c, h, w) = image_dims(self.shape(x), "patchify")?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::shape(format!(
                "{h}x{w} is not divisible into {k}x{k} windows"
            )));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for_each_patch_index(c, h, w, k, |patch_idx, pix_idx| out[patch_idx] = src[pix_idx]);
        let value = Tensor::new([(h / k) * (w / k), c * k * k], out)?;
        Ok(self.push(
            value,
            Op::Patchify {
                x,
                channels: c,
                height: h,
                width: w,
                k,
            },
            &[x],
        ))
    }

    /// Inverse of [`Graph::patchify`]: `(H/k·W/k)×(C·k·k)` back to `C×H×W`.
    pub fn unpatchify(&mut self, x: Var, channels: usize, height: usize, width: usize, k: usize) -> Result<Var> {
        let expected = [(height / k.max(1)) * (width / k.max(1)), channels * k * k];
        if k == 0 || !height.is_multiple_of(k) || !width.is_multiple_of(k) || self.shape(x) != expected {
            return Err(Error::shape(format!(
                "cannot unpatchify {:?} into {channels}x{height}x{width} with window {k}",
                self.shape(x)
            )));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for_each_patch_index(channels, height, width, k, |patch_idx, pix_idx| {
            out[pix_idx] = src[patch_idx]
        });
        let value = Tensor::new([channels, height, width], out)?;
        Ok(self.push(
            value,
            Op::Unpatchify {
                x,
                channels,
                height,
                width,
                k,
            },
            &[x],
        ))
    }

    /// Non-overlapping convolution with `kernel` laid out `C_in×K×K×C_out`
    /// and stride equal to `K`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize) -> Result<Var> {
        let (c_in, h, w) = image_dims(self.shape(input), "conv2d input")?;
        let (kc, k1, k2, c_out) = match *self.shape(kernel) {
            [a, b, c, d] => (a, b, c, d),
            ref s => return Err(Error::shape(format!("conv2d kernel must be 4-d, got {s:?}"))),
        };
        if kc != c_in || k1 != k2 || k1 != stride {
            return Err(Error::shape(format!(
                "conv2d kernel {:?} incompatible with input {:?} at stride {stride}",
                self.shape(kernel),
                self.shape(input)
            )));
        }
        if stride == 0 || h % stride != 0 || w % stride != 0 {
            return Err(Error::shape(format!(
                "conv2d input {h}x{w} not divisible by stride {stride}"
            )));
        }
        let patches = self.patchify(input, stride)?;
        let kmat = self.reshape(kernel, &[c_in * stride * stride, c_out])?;
        let seq = self.matmul(patches, kmat)?;
        let chw = self.transpose(seq)?;
        self.reshape(chw, &[c_out, h / stride, w / stride])
    }

    /// Nearest-neighbour 2× upsampling of `C×H×W`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = image_dims(self.shape(x), "upsample")?;
        let src = self.value(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * h2 * w2];
        for ch in 0..c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    out[(ch * h2 + y) * w2 + xx] = src[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        let value = Tensor::new([c, h2, w2], out)?;
        Ok(self.push(
            value,
            Op::Upsample2x {
                x,
                channels: c,
                height: h,
                width: w,
            },
            &[x],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<Float>() / v.numel().max(1) as Float;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Smooth-l1 between `pred` and `target`: `0.5·d²` for `|d| < 1`, else
    /// `|d| − 0.5`. Averaged over all elements, or, with `weights`, a
    /// weighted average.
    pub fn smooth_l1(&mut self, pred: Var, target: Var, weights: Option<Vec<Float>>) -> Result<Var> {
        self.same_shape(pred, target, "smooth-l1")?;
        let n = self.value(pred).numel();
        if let Some(w) = &weights {
            if w.len() != n {
                return Err(Error::shape(format!("{} weights for {n} elements", w.len())));
            }
        }
        let denom = match &weights {
            Some(w) => w.iter().sum::<Float>(),
            None => n as Float,
        };
        let p = self.value(pred).data();
        let t = self.value(target).data();
        let mut total = 0.0;
        for i in 0..n {
            let (l, _) = kernels::smooth_l1(p[i] - t[i]);
            total += weights.as_ref().map_or(1.0, |w| w[i]) * l;
        }
        let loss = if denom > 0.0 { total / denom } else { 0.0 };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SmoothL1 {
                pred,
                target,
                weights,
                denom,
            },
            &[pred, target],
        ))
    }

    /// Mean cross-entropy of `logits[n×C]` against class ids. With no rows
    /// the loss is defined as zero.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, c) = matrix_dims(self.shape(logits), "cross-entropy logits")?;
        if n != targets.len() {
            return Err(Error::shape(format!("{n} logit rows for {} targets", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::invalid(format!("label {bad} outside {c} classes")));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = 0.0;
        for (row, &t) in probs.chunks_mut(c.max(1)).zip(targets) {
            let max = row.iter().copied().fold(Float::NEG_INFINITY, Float::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<Float>().ln();
            total += lse - row[t];
            kernels::softmax_in_place(row);
        }
        let loss = if n > 0 { total / n as Float } else { 0.0 };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Binary cross-entropy on the positive-class probability of a
    /// two-way softmax over `logits[n×2]`, averaged over rows.
    ///
    /// Probabilities are clamped to `[1e-7, 1 − 1e-7]` before the logarithm;
    /// the gradient is that of the unclamped loss, `p − onehot(y)`.
    pub fn binary_cross_entropy(&mut self, logits: Var, targets: &[Float]) -> Result<Var> {
        let (n, c) = matrix_dims(self.shape(logits), "binary cross-entropy logits")?;
        if c != 2 || n != targets.len() {
            return Err(Error::shape(format!(
                "binary cross-entropy needs {}x2 logits, got {:?}",
                targets.len(),
                self.shape(logits)
            )));
        }
        let raw = self.value(logits).data();
        let mut probs = raw.to_vec();
        kernels::softmax_rows(&mut probs, 2);
        // Log-probabilities straight from the logits; `ln(1 - p)` loses
        // everything in single precision once p is near 1.
        let floor = PROB_CLAMP.ln();
        let mut total = 0.0;
        for (row, &y) in raw.chunks(2).zip(targets) {
            let m = row[0].max(row[1]);
            let lse = m + ((row[0] - m).exp() + (row[1] - m).exp()).ln();
            let (lp0, lp1) = ((row[0] - lse).max(floor), (row[1] - lse).max(floor));
            total -= y * lp1 + (1.0 - y) * lp0;
        }
        let loss = if n > 0 { total / n as Float } else { 0.0 };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BinaryCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }
}

/// Lower clamp applied to probabilities before taking logarithms.
pub const PROB_CLAMP: Float = 1e-7;

/// Visits `(patch-major index, pixel index)` pairs of the window layout.
pub(crate) fn for_each_patch_index(
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    mut f: impl FnMut(usize, usize),
) {
    let (gh, gw) = (h / k, w / k);
    let cols = c * k * k;
    for py in 0..gh {
        for px in 0..gw {
            let row = py * gw + px;
            for ch in 0..c {
                for dy in 0..k {
                    for dx in 0..k {
                        let col = (ch * k + dy) * k + dx;
                        let pix = (ch * h + py * k + dy) * w + px * k + dx;
                        f(row * cols + col, pix);
                    }
                }
            }
        }
    }
}
