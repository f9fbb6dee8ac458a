//! Vector-Jacobian products for every recorded primitive.

use crate::tensor::Float;

use super::graph::{Node, Op, Var};
use super::kernels::{self, MatMut, MatRef};
use super::ops::for_each_patch_index;

type GradSlots = Vec<Option<Vec<Float>>>;

/// Gradient buffer of `var`, created on first use; `None` when the node does
/// not require a gradient.
fn slot<'a>(nodes: &[Node], grads: &'a mut GradSlots, var: Var) -> Option<&'a mut [Float]> {
    if !nodes[var.0].requires_grad {
        return None;
    }
    let n = nodes[var.0].value.numel();
    Some(grads[var.0].get_or_insert_with(|| vec![0.0; n]))
}

fn axpy(dst: &mut [Float], alpha: Float, src: &[Float]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

/// Pushes the gradient `g` of node `idx` into the slots of its inputs.
pub(crate) fn propagate(nodes: &[Node], idx: usize, g: &[Float], grads: &mut GradSlots) {
    let node = &nodes[idx];
    let val = |v: Var| nodes[v.0].value.data();
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul { a, b, m, k, n } => {
            if let Some(da) = slot(nodes, grads, a) {
                kernels::gemm(
                    1.0,
                    MatRef::dense(g, m, n),
                    MatRef::dense(val(b), k, n).t(),
                    1.0,
                    MatMut::dense(da, m, k),
                );
            }
            if let Some(db) = slot(nodes, grads, b) {
                kernels::gemm(
                    1.0,
                    MatRef::dense(val(a), m, k).t(),
                    MatRef::dense(g, m, n),
                    1.0,
                    MatMut::dense(db, k, n),
                );
            }
        }
        &Op::Add(a, b) => {
            for v in [a, b] {
                if let Some(d) = slot(nodes, grads, v) {
                    axpy(d, 1.0, g);
                }
            }
        }
        &Op::Mul(a, b) => {
            if let Some(da) = slot(nodes, grads, a) {
                for ((d, gi), bi) in da.iter_mut().zip(g).zip(val(b)) {
                    *d += gi * bi;
                }
            }
            if let Some(db) = slot(nodes, grads, b) {
                for ((d, gi), ai) in db.iter_mut().zip(g).zip(val(a)) {
                    *d += gi * ai;
                }
            }
        }
        &Op::Scale(x, factor) => {
            if let Some(dx) = slot(nodes, grads, x) {
                axpy(dx, factor, g);
            }
        }
        &Op::AddBias { x, bias } => {
            if let Some(dx) = slot(nodes, grads, x) {
                axpy(dx, 1.0, g);
            }
            let d = nodes[bias.0].value.numel();
            if let Some(db) = slot(nodes, grads, bias) {
                for row in g.chunks(d) {
                    axpy(db, 1.0, row);
                }
            }
        }
        &Op::Gelu(x) => {
            if let Some(dx) = slot(nodes, grads, x) {
                for ((d, gi), xi) in dx.iter_mut().zip(g).zip(val(x)) {
                    *d += gi * kernels::gelu_grad(*xi);
                }
            }
        }
        &Op::Sigmoid(x) => {
            let y = node.value.data();
            if let Some(dx) = slot(nodes, grads, x) {
                for ((d, gi), yi) in dx.iter_mut().zip(g).zip(y) {
                    *d += gi * yi * (1.0 - yi);
                }
            }
        }
        &Op::Softmax(x) => {
            let cols = node.value.last_dim();
            let y = node.value.data();
            if let Some(dx) = slot(nodes, grads, x) {
                for ((drow, grow), yrow) in dx.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                    let dot: Float = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for ((d, gi), yi) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += yi * (gi - dot);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let d = nodes[gain.0].value.numel();
            let gamma = val(*gain);
            if let Some(dg) = slot(nodes, grads, *gain) {
                for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                    for ((acc, gi), hi) in dg.iter_mut().zip(grow).zip(hrow) {
                        *acc += gi * hi;
                    }
                }
            }
            if let Some(db) = slot(nodes, grads, *bias) {
                for grow in g.chunks(d) {
                    axpy(db, 1.0, grow);
                }
            }
            if let Some(dx) = slot(nodes, grads, *x) {
                let inv_d = 1.0 / d as Float;
                for (((drow, grow), hrow), r) in dx
                    .chunks_mut(d)
                    .zip(g.chunks(d))
                    .zip(xhat.chunks(d))
                    .zip(rstd)
                {
                    let mut mean_gh = 0.0;
                    let mut mean_ghx = 0.0;
                    for j in 0..d {
                        let gh = grow[j] * gamma[j];
                        mean_gh += gh;
                        mean_ghx += gh * hrow[j];
                    }
                    mean_gh *= inv_d;
                    mean_ghx *= inv_d;
                    for j in 0..d {
                        let gh = grow[j] * gamma[j];
                        drow[j] += r * (gh - mean_gh - hrow[j] * mean_ghx);
                    }
                }
            }
        }
        Op::Attention {
            q,
            k,
            v,
            heads,
            scale,
            probs,
        } => attention_backward(nodes, grads, g, (*q, *k, *v), *heads, *scale, probs),
        Op::GatherRows { table, ids } => {
            let d = nodes[table.0].value.last_dim();
            if let Some(dt) = slot(nodes, grads, *table) {
                for (row, &id) in g.chunks(d).zip(ids) {
                    axpy(&mut dt[id * d..(id + 1) * d], 1.0, row);
                }
            }
        }
        &Op::Reshape(x) => {
            if let Some(dx) = slot(nodes, grads, x) {
                axpy(dx, 1.0, g);
            }
        }
        &Op::Transpose { x, rows, cols } => {
            if let Some(dx) = slot(nodes, grads, x) {
                let gt = kernels::transpose(g, cols, rows);
                axpy(dx, 1.0, &gt);
            }
        }
        Op::Concat(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = nodes[p.0].value.numel();
                if let Some(dp) = slot(nodes, grads, p) {
                    axpy(dp, 1.0, &g[offset..offset + n]);
                }
                offset += n;
            }
        }
        &Op::SliceRows { x, offset } => {
            if let Some(dx) = slot(nodes, grads, x) {
                axpy(&mut dx[offset..offset + g.len()], 1.0, g);
            }
        }
        &Op::Patchify {
            x,
            channels,
            height,
            width,
            k,
        } => {
            if let Some(dx) = slot(nodes, grads, x) {
                for_each_patch_index(channels, height, width, k, |patch, pix| dx[pix] += g[patch]);
            }
        }
        &Op::Unpatchify {
            x,
            channels,
            height,
            width,
            k,
        } => {
            if let Some(dx) = slot(nodes, grads, x) {
                for_each_patch_index(channels, height, width, k, |patch, pix| dx[patch] += g[pix]);
            }
        }
        &Op::Upsample2x {
            x,
            channels,
            height,
            width,
        } => {
            if let Some(dx) = slot(nodes, grads, x) {
                let (h2, w2) = (2 * height, 2 * width);
                for ch in 0..channels {
                    for y in 0..h2 {
                        for xx in 0..w2 {
                            dx[(ch * height + y / 2) * width + xx / 2] += g[(ch * h2 + y) * w2 + xx];
                        }
                    }
                }
            }
        }
        &Op::Sum(x) => {
            if let Some(dx) = slot(nodes, grads, x) {
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        &Op::Mean(x) => {
            let n = nodes[x.0].value.numel().max(1) as Float;
            if let Some(dx) = slot(nodes, grads, x) {
                dx.iter_mut().for_each(|d| *d += g[0] / n);
            }
        }
        Op::SmoothL1 {
            pred,
            target,
            weights,
            denom,
        } => {
            if *denom <= 0.0 {
                return;
            }
            let p = val(*pred);
            let t = val(*target);
            let local: Vec<Float> = (0..p.len())
                .map(|i| {
                    let w = weights.as_ref().map_or(1.0, |w| w[i]);
                    g[0] * w * kernels::smooth_l1(p[i] - t[i]).1 / denom
                })
                .collect();
            if let Some(dp) = slot(nodes, grads, *pred) {
                axpy(dp, 1.0, &local);
            }
            if let Some(dt) = slot(nodes, grads, *target) {
                axpy(dt, -1.0, &local);
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let n = targets.len();
            if n == 0 {
                return;
            }
            let c = probs.len() / n;
            let coef = g[0] / n as Float;
            if let Some(dl) = slot(nodes, grads, *logits) {
                for (i, &t) in targets.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        dl[i * c + j] += coef * (probs[i * c + j] - onehot);
                    }
                }
            }
        }
        Op::BinaryCrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let n = targets.len();
            if n == 0 {
                return;
            }
            let coef = g[0] / n as Float;
            if let Some(dl) = slot(nodes, grads, *logits) {
                for (i, &y) in targets.iter().enumerate() {
                    dl[2 * i] += coef * (probs[2 * i] - (1.0 - y));
                    dl[2 * i + 1] += coef * (probs[2 * i + 1] - y);
                }
            }
        }
    }
}

fn attention_backward(
    nodes: &[Node],
    grads: &mut GradSlots,
    g: &[Float],
    (q, k, v): (Var, Var, Var),
    heads: usize,
    scale: Float,
    probs: &[Float],
) {
    let (n_q, d) = (nodes[q.0].value.shape()[0], nodes[q.0].value.shape()[1]);
    let n_kv = nodes[k.0].value.shape()[0];
    let dh = d / heads;
    let qd = nodes[q.0].value.data();
    let kd = nodes[k.0].value.data();
    let vd = nodes[v.0].value.data();

    let mut dq = nodes[q.0].requires_grad.then(|| vec![0.0; n_q * d]);
    let mut dk = nodes[k.0].requires_grad.then(|| vec![0.0; n_kv * d]);
    let mut dv = nodes[v.0].requires_grad.then(|| vec![0.0; n_kv * d]);
    let mut dscore = vec![0.0; n_q * n_kv];

    for h in 0..heads {
        let p = &probs[h * n_q * n_kv..(h + 1) * n_q * n_kv];
        let g_h = MatRef::columns(g, n_q, d, h * dh, dh);
        if let Some(dv) = dv.as_mut() {
            kernels::gemm(
                1.0,
                MatRef::dense(p, n_q, n_kv).t(),
                g_h,
                1.0,
                MatMut::columns(dv, n_kv, d, h * dh, dh),
            );
        }
        if dq.is_none() && dk.is_none() {
            continue;
        }
        // dP = dO · Vᵀ, then dS = P ⊙ (dP − rowsum(dP ⊙ P)).
        kernels::gemm(
            1.0,
            g_h,
            MatRef::columns(vd, n_kv, d, h * dh, dh).t(),
            0.0,
            MatMut::dense(&mut dscore, n_q, n_kv),
        );
        for (srow, prow) in dscore.chunks_mut(n_kv).zip(p.chunks(n_kv)) {
            let dot: Float = srow.iter().zip(prow).map(|(a, b)| a * b).sum();
            for (s, pi) in srow.iter_mut().zip(prow) {
                *s = pi * (*s - dot);
            }
        }
        if let Some(dq) = dq.as_mut() {
            kernels::gemm(
                scale,
                MatRef::dense(&dscore, n_q, n_kv),
                MatRef::columns(kd, n_kv, d, h * dh, dh),
                1.0,
                MatMut::columns(dq, n_q, d, h * dh, dh),
            );
        }
        if let Some(dk) = dk.as_mut() {
            kernels::gemm(
                scale,
                MatRef::dense(&dscore, n_q, n_kv).t(),
                MatRef::columns(qd, n_q, d, h * dh, dh),
                1.0,
                MatMut::columns(dk, n_kv, d, h * dh, dh),
            );
        }
    }
    for (var, local) in [(q, dq), (k, dk), (v, dv)] {
        if let (Some(local), Some(dst)) = (local, slot(nodes, grads, var)) {
            axpy(dst, 1.0, &local);
        }
    }
}
