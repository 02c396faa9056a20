//! Raw forward/backward kernels over [`Tensor`].
//!
//! Every kernel is a pure function of its inputs and parallelizes only over
//! independent output elements: each output is produced by exactly one
//! sequential inner reduction, so results are bit-identical across runs
//! regardless of thread scheduling.

use rayon::prelude::*;

use super::{strides_of, Tensor};
use crate::error::{Error, Result};

fn check_finite(t: Tensor, op: &'static str) -> Result<Tensor> {
    if t.all_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite { op })
    }
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("add {:?} vs {:?}", a.shape(), b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    check_finite(Tensor::from_parts(a.shape().to_vec(), data), "add")
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("mul {:?} vs {:?}", a.shape(), b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    check_finite(Tensor::from_parts(a.shape().to_vec(), data), "mul")
}

pub fn scale(a: &Tensor, c: f64) -> Result<Tensor> {
    let data = a.data().iter().map(|x| x * c).collect();
    check_finite(Tensor::from_parts(a.shape().to_vec(), data), "scale")
}

pub fn silu(a: &Tensor) -> Result<Tensor> {
    let data = a.data().iter().map(|&x| x * sigmoid(x)).collect();
    check_finite(Tensor::from_parts(a.shape().to_vec(), data), "silu")
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu_backward(x: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| {
            let s = sigmoid(x);
            g * (s + x * s * (1.0 - s))
        })
        .collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

// ---------------------------------------------------------------------------
// broadcast
// ---------------------------------------------------------------------------

/// Materializes `a` to `to_shape` with numpy-style right-aligned rules: each
/// source extent must equal the target extent or 1.
pub fn broadcast(a: &Tensor, to_shape: &[usize]) -> Result<Tensor> {
    if a.shape().len() > to_shape.len() {
        return Err(Error::shape(format!(
            "broadcast rank {} to {}",
            a.shape().len(),
            to_shape.len()
        )));
    }
    let pad = to_shape.len() - a.shape().len();
    let mut src_shape = vec![1; pad];
    src_shape.extend_from_slice(a.shape());
    for (s, t) in src_shape.iter().zip(to_shape) {
        if *s != *t && *s != 1 {
            return Err(Error::shape(format!(
                "broadcast {:?} to {:?}",
                a.shape(),
                to_shape
            )));
        }
    }
    let out_strides = strides_of(to_shape);
    let src_strides = strides_of(&src_shape);
    let n: usize = to_shape.iter().product();
    let src = a.data();
    let data: Vec<f64> = (0..n)
        .map(|flat| {
            let mut src_flat = 0;
            for d in 0..to_shape.len() {
                let ix = flat / out_strides[d] % to_shape[d];
                if src_shape[d] != 1 {
                    src_flat += ix * src_strides[d];
                }
            }
            src[src_flat]
        })
        .collect();
    Ok(Tensor::from_parts(to_shape.to_vec(), data))
}

/// Sums `grad` (shaped like the broadcast target) back down to `from_shape`.
pub fn reduce_to_shape(grad: &Tensor, from_shape: &[usize]) -> Tensor {
    let to_shape = grad.shape().to_vec();
    let pad = to_shape.len() - from_shape.len();
    let mut src_shape = vec![1; pad];
    src_shape.extend_from_slice(from_shape);
    let out_strides = strides_of(&to_shape);
    let src_strides = strides_of(&src_shape);
    let mut data = vec![0.0; from_shape.iter().product::<usize>().max(1)];
    for flat in 0..grad.len() {
        let mut src_flat = 0;
        for d in 0..to_shape.len() {
            let ix = flat / out_strides[d] % to_shape[d];
            if src_shape[d] != 1 {
                src_flat += ix * src_strides[d];
            }
        }
        data[src_flat] += grad.data()[flat];
    }
    Tensor::from_parts(from_shape.to_vec(), data)
}

// ---------------------------------------------------------------------------
// matmul (batched, broadcasting leading dims)
// ---------------------------------------------------------------------------

/// `[..., m, k] × [..., k, n] → [..., m, n]`; leading dims broadcast.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() < 2 || b.rank() < 2 {
        return Err(Error::shape(format!(
            "matmul needs rank ≥ 2, got {:?} × {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, ka) = (a.shape()[a.rank() - 2], a.shape()[a.rank() - 1]);
    let (kb, n) = (b.shape()[b.rank() - 2], b.shape()[b.rank() - 1]);
    if ka != kb {
        return Err(Error::shape(format!(
            "matmul inner dims {:?} × {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let batch = broadcast_batch(&a.shape()[..a.rank() - 2], &b.shape()[..b.rank() - 2])?;
    let nb: usize = batch.iter().product();
    let a_bstrides = batch_strides(&batch, &a.shape()[..a.rank() - 2]);
    let b_bstrides = batch_strides(&batch, &b.shape()[..b.rank() - 2]);
    let (ad, bd) = (a.data(), b.data());
    let k = ka;

    let mut data = vec![0.0; nb * m * n];
    data.par_chunks_mut(m * n).enumerate().for_each(|(bi, out)| {
        let ao = batch_offset(bi, &batch, &a_bstrides) * m * k;
        let bo = batch_offset(bi, &batch, &b_bstrides) * k * n;
        for i in 0..m {
            let arow = &ad[ao + i * k..ao + (i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (kk, &av) in arow.iter().enumerate() {
                let brow = &bd[bo + kk * n..bo + (kk + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    });
    let mut shape = batch;
    shape.push(m);
    shape.push(n);
    check_finite(Tensor::from_parts(shape, data), "matmul")
}

fn broadcast_batch(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![1; rank];
    for i in 0..rank {
        let av = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let bv = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (av, bv) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::shape(format!(
                    "batch dims incompatible: {:?} vs {:?}",
                    a, b
                )))
            }
        };
    }
    Ok(out)
}

/// Per-dim multiplier mapping a flat broadcast-batch index to the source's
/// flat batch index (0 where the source extent is 1).
fn batch_strides(batch: &[usize], src: &[usize]) -> Vec<usize> {
    let pad = batch.len() - src.len();
    let mut padded = vec![1; pad];
    padded.extend_from_slice(src);
    let src_str = strides_of(&padded);
    (0..batch.len())
        .map(|d| if padded[d] == 1 { 0 } else { src_str[d] })
        .collect()
}

fn batch_offset(flat: usize, batch: &[usize], strides: &[usize]) -> usize {
    let bstr = strides_of(batch);
    let mut off = 0;
    for d in 0..batch.len() {
        let ix = flat / bstr[d] % batch[d];
        off += ix * strides[d];
    }
    off
}

/// Swaps the last two axes (batched).
pub fn transpose_last2(t: &Tensor) -> Result<Tensor> {
    let r = t.rank();
    if r < 2 {
        return Err(Error::shape("transpose_last2 needs rank ≥ 2"));
    }
    let mut perm: Vec<usize> = (0..r).collect();
    perm.swap(r - 2, r - 1);
    transpose(t, &perm)
}

pub fn matmul_backward(a: &Tensor, b: &Tensor, grad: &Tensor) -> Result<(Tensor, Tensor)> {
    // dA = dOut · Bᵀ, dB = Aᵀ · dOut, each reduced over broadcast batch dims.
    let bt = transpose_last2(b)?;
    let at = transpose_last2(a)?;
    let da_full = matmul(grad, &bt)?;
    let db_full = matmul(&at, grad)?;
    Ok((
        reduce_to_shape(&da_full, a.shape()),
        reduce_to_shape(&db_full, b.shape()),
    ))
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

/// `input [N, Cin, H, W]`, `weight [Cout, Cin, kh, kw]`, zero padding.
pub fn conv2d(input: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    if input.rank() != 4 || weight.rank() != 4 {
        return Err(Error::shape(format!(
            "conv2d wants 4-D input/weight, got {:?} / {:?}",
            input.shape(),
            weight.shape()
        )));
    }
    if stride == 0 {
        return Err(Error::shape("conv2d stride must be ≥ 1"));
    }
    let (n, cin, h, w) = dims4(input);
    let (cout, wcin, kh, kw) = dims4(weight);
    if cin != wcin {
        return Err(Error::shape(format!(
            "conv2d channels: input {} vs weight {}",
            cin, wcin
        )));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::shape("conv2d kernel larger than padded input"));
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let (id, wd) = (input.data(), weight.data());

    let mut data = vec![0.0; n * cout * oh * ow];
    data.par_chunks_mut(oh * ow).enumerate().for_each(|(chunk, out)| {
        let ni = chunk / cout;
        let co = chunk % cout;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ci in 0..cin {
                    let ibase = ((ni * cin + ci) * h) * w;
                    let wbase = ((co * cin + ci) * kh) * kw;
                    for ky in 0..kh {
                        let y = (oy * stride + ky) as isize - pad as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let x = (ox * stride + kx) as isize - pad as isize;
                            if x < 0 || x >= w as isize {
                                continue;
                            }
                            acc += id[ibase + y as usize * w + x as usize]
                                * wd[wbase + ky * kw + kx];
                        }
                    }
                }
                out[oy * ow + ox] = acc;
            }
        }
    });
    check_finite(
        Tensor::from_parts(vec![n, cout, oh, ow], data),
        "conv2d",
    )
}

pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad: &Tensor,
    stride: usize,
    pad: usize,
) -> (Tensor, Tensor) {
    let (n, cin, h, w) = dims4(input);
    let (cout, _, kh, kw) = dims4(weight);
    let (_, _, oh, ow) = dims4(grad);
    let (id, wd, gd) = (input.data(), weight.data(), grad.data());

    // dInput: one writer per input pixel.
    let mut dinput = vec![0.0; input.len()];
    dinput.par_chunks_mut(h * w).enumerate().for_each(|(chunk, dslice)| {
        let ni = chunk / cin;
        let ci = chunk % cin;
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for co in 0..cout {
                    let gbase = ((ni * cout + co) * oh) * ow;
                    let wbase = ((co * cin + ci) * kh) * kw;
                    for ky in 0..kh {
                        let oy_num = y + pad;
                        if oy_num < ky {
                            continue;
                        }
                        let oy_off = oy_num - ky;
                        if oy_off % stride != 0 {
                            continue;
                        }
                        let oy = oy_off / stride;
                        if oy >= oh {
                            continue;
                        }
                        for kx in 0..kw {
                            let ox_num = x + pad;
                            if ox_num < kx {
                                continue;
                            }
                            let ox_off = ox_num - kx;
                            if ox_off % stride != 0 {
                                continue;
                            }
                            let ox = ox_off / stride;
                            if ox >= ow {
                                continue;
                            }
                            acc += gd[gbase + oy * ow + ox] * wd[wbase + ky * kw + kx];
                        }
                    }
                }
                dslice[y * w + x] = acc;
            }
        }
    });

    // dWeight: one writer per weight element.
    let mut dweight = vec![0.0; weight.len()];
    dweight.par_chunks_mut(kh * kw).enumerate().for_each(|(chunk, dslice)| {
        let co = chunk / cin;
        let ci = chunk % cin;
        for ky in 0..kh {
            for kx in 0..kw {
                let mut acc = 0.0;
                for ni in 0..n {
                    let gbase = ((ni * cout + co) * oh) * ow;
                    let ibase = ((ni * cin + ci) * h) * w;
                    for oy in 0..oh {
                        let y = (oy * stride + ky) as isize - pad as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let x = (ox * stride + kx) as isize - pad as isize;
                            if x < 0 || x >= w as isize {
                                continue;
                            }
                            acc += gd[gbase + oy * ow + ox]
                                * id[ibase + y as usize * w + x as usize];
                        }
                    }
                }
                dslice[ky * kw + kx] = acc;
            }
        }
    });

    (
        Tensor::from_parts(input.shape().to_vec(), dinput),
        Tensor::from_parts(weight.shape().to_vec(), dweight),
    )
}

fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    (t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3])
}

// ---------------------------------------------------------------------------
// layout ops
// ---------------------------------------------------------------------------

/// General axis permutation.
pub fn transpose(t: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let r = t.rank();
    if perm.len() != r {
        return Err(Error::shape(format!("perm {:?} vs rank {}", perm, r)));
    }
    let mut seen = vec![false; r];
    for &p in perm {
        if p >= r || seen[p] {
            return Err(Error::shape(format!("invalid permutation {:?}", perm)));
        }
        seen[p] = true;
    }
    let src_shape = t.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| src_shape[p]).collect();
    let src_strides = strides_of(src_shape);
    let out_strides = strides_of(&out_shape);
    let src = t.data();
    let n = t.len();
    let mut data = vec![0.0; n];
    // Writers partition the output; each reads one source element.
    data.par_iter_mut().enumerate().for_each(|(flat, out)| {
        let mut src_flat = 0;
        for d in 0..perm.len() {
            let ix = flat / out_strides[d] % out_shape[d];
            src_flat += ix * src_strides[perm[d]];
        }
        *out = src[src_flat];
    });
    Ok(Tensor::from_parts(out_shape, data))
}

pub fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub fn reshape(t: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    if n != t.len() {
        return Err(Error::shape(format!(
            "reshape {:?} ({} elems) to {:?} ({})",
            t.shape(),
            t.len(),
            shape,
            n
        )));
    }
    Ok(Tensor {
        shape: shape.to_vec(),
        data: std::sync::Arc::clone(&t.data),
    })
}

pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::shape("concat of zero tensors"));
    }
    let rank = parts[0].rank();
    if axis >= rank {
        return Err(Error::shape(format!("concat axis {} rank {}", axis, rank)));
    }
    let mut out_shape = parts[0].shape().to_vec();
    let mut axis_total = 0;
    for p in parts {
        if p.rank() != rank {
            return Err(Error::shape("concat rank mismatch"));
        }
        for d in 0..rank {
            if d != axis && p.shape()[d] != out_shape[d] {
                return Err(Error::shape(format!(
                    "concat shapes {:?} vs {:?} on axis {}",
                    out_shape,
                    p.shape(),
                    axis
                )));
            }
        }
        axis_total += p.shape()[axis];
    }
    out_shape[axis] = axis_total;

    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let mut data = vec![0.0; out_shape.iter().product()];
    let row = axis_total * inner;
    for o in 0..outer {
        let mut off = 0;
        for p in parts {
            let pa = p.shape()[axis];
            let src = &p.data()[o * pa * inner..(o + 1) * pa * inner];
            data[o * row + off * inner..o * row + (off + pa) * inner].copy_from_slice(src);
            off += pa;
        }
    }
    Ok(Tensor::from_parts(out_shape, data))
}

/// Contiguous sub-range along one axis.
pub fn slice(t: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    if axis >= t.rank() {
        return Err(Error::shape(format!("slice axis {} rank {}", axis, t.rank())));
    }
    if start + len > t.shape()[axis] {
        return Err(Error::shape(format!(
            "slice [{}, {}) exceeds extent {}",
            start,
            start + len,
            t.shape()[axis]
        )));
    }
    let outer: usize = t.shape()[..axis].iter().product();
    let inner: usize = t.shape()[axis + 1..].iter().product();
    let extent = t.shape()[axis];
    let mut out_shape = t.shape().to_vec();
    out_shape[axis] = len;
    let mut data = vec![0.0; outer * len * inner];
    for o in 0..outer {
        let src = &t.data()[(o * extent + start) * inner..(o * extent + start + len) * inner];
        data[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
    }
    Ok(Tensor::from_parts(out_shape, data))
}

/// Scatters `grad` (shaped like the slice) back into a zero tensor of
/// `full_shape` at the slice position.
pub fn slice_backward(
    grad: &Tensor,
    full_shape: &[usize],
    axis: usize,
    start: usize,
) -> Tensor {
    let outer: usize = full_shape[..axis].iter().product();
    let inner: usize = full_shape[axis + 1..].iter().product();
    let extent = full_shape[axis];
    let len = grad.shape()[axis];
    let mut data = vec![0.0; full_shape.iter().product()];
    for o in 0..outer {
        let dst = &mut data[(o * extent + start) * inner..(o * extent + start + len) * inner];
        dst.copy_from_slice(&grad.data()[o * len * inner..(o + 1) * len * inner]);
    }
    Tensor::from_parts(full_shape.to_vec(), data)
}

/// Selects `indices` along `axis`; indices may repeat.
pub fn gather(t: &Tensor, axis: usize, indices: &[usize]) -> Result<Tensor> {
    if axis >= t.rank() {
        return Err(Error::shape(format!("gather axis {} rank {}", axis, t.rank())));
    }
    let extent = t.shape()[axis];
    for &i in indices {
        if i >= extent {
            return Err(Error::shape(format!("gather index {} extent {}", i, extent)));
        }
    }
    let outer: usize = t.shape()[..axis].iter().product();
    let inner: usize = t.shape()[axis + 1..].iter().product();
    let mut out_shape = t.shape().to_vec();
    out_shape[axis] = indices.len();
    let mut data = vec![0.0; outer * indices.len() * inner];
    for o in 0..outer {
        for (j, &ix) in indices.iter().enumerate() {
            let src = &t.data()[(o * extent + ix) * inner..(o * extent + ix + 1) * inner];
            data[(o * indices.len() + j) * inner..(o * indices.len() + j + 1) * inner]
                .copy_from_slice(src);
        }
    }
    Ok(Tensor::from_parts(out_shape, data))
}

pub fn gather_backward(
    grad: &Tensor,
    full_shape: &[usize],
    axis: usize,
    indices: &[usize],
) -> Tensor {
    let extent = full_shape[axis];
    let outer: usize = full_shape[..axis].iter().product();
    let inner: usize = full_shape[axis + 1..].iter().product();
    let mut data = vec![0.0; full_shape.iter().product()];
    for o in 0..outer {
        for (j, &ix) in indices.iter().enumerate() {
            let src = &grad.data()[(o * indices.len() + j) * inner..(o * indices.len() + j + 1) * inner];
            let dst = &mut data[(o * extent + ix) * inner..(o * extent + ix + 1) * inner];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    Tensor::from_parts(full_shape.to_vec(), data)
}

// ---------------------------------------------------------------------------
// normalization and softmax
// ---------------------------------------------------------------------------

/// Softmax along `axis`; rows are shifted by their max before exponentiation.
pub fn softmax(t: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= t.rank() {
        return Err(Error::shape(format!("softmax axis {} rank {}", axis, t.rank())));
    }
    let extent = t.shape()[axis];
    let inner: usize = t.shape()[axis + 1..].iter().product();
    let src = t.data();
    let mut data = vec![0.0; t.len()];
    data.par_chunks_mut(extent * inner).enumerate().for_each(|(o, out)| {
        for i in 0..inner {
            let mut mx = f64::NEG_INFINITY;
            for e in 0..extent {
                mx = mx.max(src[(o * extent + e) * inner + i]);
            }
            let mut denom = 0.0;
            for e in 0..extent {
                let v = (src[(o * extent + e) * inner + i] - mx).exp();
                out[e * inner + i] = v;
                denom += v;
            }
            for e in 0..extent {
                out[e * inner + i] /= denom;
            }
        }
    });
    check_finite(Tensor::from_parts(t.shape().to_vec(), data), "softmax")
}

pub fn softmax_backward(out: &Tensor, grad: &Tensor, axis: usize) -> Tensor {
    let extent = out.shape()[axis];
    let inner: usize = out.shape()[axis + 1..].iter().product();
    let (y, g) = (out.data(), grad.data());
    let mut data = vec![0.0; out.len()];
    data.par_chunks_mut(extent * inner).enumerate().for_each(|(o, dx)| {
        for i in 0..inner {
            let mut dot = 0.0;
            for e in 0..extent {
                let ix = (o * extent + e) * inner + i;
                dot += y[ix] * g[ix];
            }
            for e in 0..extent {
                let ix = (o * extent + e) * inner + i;
                dx[e * inner + i] = y[ix] * (g[ix] - dot);
            }
        }
    });
    Tensor::from_parts(out.shape().to_vec(), data)
}

/// Zero-mean unit-variance normalization along `axis` (no affine part).
/// Returns `(y, inv_std)` where `inv_std` has the reduced shape.
pub fn layernorm(t: &Tensor, axis: usize, eps: f64) -> Result<(Tensor, Tensor)> {
    if axis >= t.rank() {
        return Err(Error::shape(format!("layernorm axis {} rank {}", axis, t.rank())));
    }
    let extent = t.shape()[axis];
    let outer: usize = t.shape()[..axis].iter().product();
    let inner: usize = t.shape()[axis + 1..].iter().product();
    let src = t.data();
    let mut data = vec![0.0; t.len()];
    let mut inv_std = vec![0.0; outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let mut mean = 0.0;
            for e in 0..extent {
                mean += src[(o * extent + e) * inner + i];
            }
            mean /= extent as f64;
            let mut var = 0.0;
            for e in 0..extent {
                let d = src[(o * extent + e) * inner + i] - mean;
                var += d * d;
            }
            var /= extent as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[o * inner + i] = istd;
            for e in 0..extent {
                data[(o * extent + e) * inner + i] =
                    (src[(o * extent + e) * inner + i] - mean) * istd;
            }
        }
    }
    let mut red_shape = t.shape().to_vec();
    red_shape[axis] = 1;
    let y = check_finite(Tensor::from_parts(t.shape().to_vec(), data), "layernorm")?;
    Ok((y, Tensor::from_parts(red_shape, inv_std)))
}

pub fn layernorm_backward(y: &Tensor, inv_std: &Tensor, grad: &Tensor, axis: usize) -> Tensor {
    let extent = y.shape()[axis];
    let outer: usize = y.shape()[..axis].iter().product();
    let inner: usize = y.shape()[axis + 1..].iter().product();
    let (yd, gd, sd) = (y.data(), grad.data(), inv_std.data());
    let mut data = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let mut sum_g = 0.0;
            let mut sum_gy = 0.0;
            for e in 0..extent {
                let ix = (o * extent + e) * inner + i;
                sum_g += gd[ix];
                sum_gy += gd[ix] * yd[ix];
            }
            let istd = sd[o * inner + i];
            let ne = extent as f64;
            for e in 0..extent {
                let ix = (o * extent + e) * inner + i;
                data[ix] = istd * (gd[ix] - sum_g / ne - yd[ix] * sum_gy / ne);
            }
        }
    }
    Tensor::from_parts(y.shape().to_vec(), data)
}

/// Group normalization over `[N, C, H, W]`: statistics per `(n, group)`.
/// Returns `(y, inv_std [N, groups])`.
pub fn groupnorm(t: &Tensor, groups: usize, eps: f64) -> Result<(Tensor, Tensor)> {
    if t.rank() != 4 {
        return Err(Error::shape(format!("groupnorm wants 4-D, got {:?}", t.shape())));
    }
    let (n, c, h, w) = dims4(t);
    if groups == 0 || c % groups != 0 {
        return Err(Error::shape(format!("groupnorm groups {} channels {}", groups, c)));
    }
    let per = (c / groups) * h * w;
    let src = t.data();
    let mut data = vec![0.0; t.len()];
    let mut inv_std = vec![0.0; n * groups];
    for ni in 0..n {
        for g in 0..groups {
            let base = ni * c * h * w + g * per;
            let mut mean = 0.0;
            for j in 0..per {
                mean += src[base + j];
            }
            mean /= per as f64;
            let mut var = 0.0;
            for j in 0..per {
                let d = src[base + j] - mean;
                var += d * d;
            }
            var /= per as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[ni * groups + g] = istd;
            for j in 0..per {
                data[base + j] = (src[base + j] - mean) * istd;
            }
        }
    }
    let y = check_finite(Tensor::from_parts(t.shape().to_vec(), data), "groupnorm")?;
    Ok((y, Tensor::from_parts(vec![n, groups], inv_std)))
}

pub fn groupnorm_backward(y: &Tensor, inv_std: &Tensor, grad: &Tensor, groups: usize) -> Tensor {
    let (n, c, h, w) = dims4(y);
    let per = (c / groups) * h * w;
    let (yd, gd, sd) = (y.data(), grad.data(), inv_std.data());
    let mut data = vec![0.0; y.len()];
    for ni in 0..n {
        for g in 0..groups {
            let base = ni * c * h * w + g * per;
            let mut sum_g = 0.0;
            let mut sum_gy = 0.0;
            for j in 0..per {
                sum_g += gd[base + j];
                sum_gy += gd[base + j] * yd[base + j];
            }
            let istd = sd[ni * groups + g];
            let ne = per as f64;
            for j in 0..per {
                data[base + j] =
                    istd * (gd[base + j] - sum_g / ne - yd[base + j] * sum_gy / ne);
            }
        }
    }
    Tensor::from_parts(y.shape().to_vec(), data)
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

pub fn sum_all(t: &Tensor) -> Result<Tensor> {
    let s: f64 = t.data().iter().sum();
    check_finite(Tensor::from_parts(vec![], vec![s]), "sum")
}

pub fn mean_all(t: &Tensor) -> Result<Tensor> {
    if t.is_empty() {
        return Err(Error::shape("mean of empty tensor"));
    }
    let s: f64 = t.data().iter().sum();
    check_finite(Tensor::from_parts(vec![], vec![s / t.len() as f64]), "mean")
}

/// Sums out one axis (rank drops by one).
pub fn sum_axis(t: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= t.rank() {
        return Err(Error::shape(format!("sum_axis axis {} rank {}", axis, t.rank())));
    }
    let extent = t.shape()[axis];
    let outer: usize = t.shape()[..axis].iter().product();
    let inner: usize = t.shape()[axis + 1..].iter().product();
    let src = t.data();
    let mut data = vec![0.0; outer * inner];
    for o in 0..outer {
        for e in 0..extent {
            let base = (o * extent + e) * inner;
            for i in 0..inner {
                data[o * inner + i] += src[base + i];
            }
        }
    }
    let mut shape = t.shape().to_vec();
    shape.remove(axis);
    check_finite(Tensor::from_parts(shape, data), "sum")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_2x3_by_3x4_gives_2x4() {
        let a = Tensor::from_fn(vec![2, 3], |i| i as f64);
        let b = Tensor::from_fn(vec![3, 4], |i| i as f64);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 4]);
        // row 0 of a = [0,1,2]; col 0 of b = [0,4,8] → 20
        assert_eq!(c.at(&[0, 0]), 20.0);
    }

    #[test]
    fn matmul_broadcasts_rhs_over_batch() {
        let a = Tensor::from_fn(vec![2, 2, 3], |i| i as f64);
        let b = Tensor::ones(vec![3, 1]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 2, 1]);
        assert_eq!(c.at(&[0, 0, 0]), 3.0); // 0+1+2
        assert_eq!(c.at(&[1, 1, 0]), 30.0); // 9+10+11
    }

    #[test]
    fn conv2d_same_pad_shape() {
        let input = Tensor::ones(vec![1, 1, 8, 8]);
        let weight = Tensor::ones(vec![4, 1, 3, 3]);
        let out = conv2d(&input, &weight, 1, 1).unwrap();
        assert_eq!(out.shape(), &[1, 4, 8, 8]);
        // interior pixel sees the full 3×3 window
        assert_eq!(out.at(&[0, 0, 4, 4]), 9.0);
        // corner sees 2×2
        assert_eq!(out.at(&[0, 0, 0, 0]), 4.0);
    }

    #[test]
    fn conv2d_stride2_halves() {
        let input = Tensor::ones(vec![1, 2, 8, 8]);
        let weight = Tensor::ones(vec![3, 2, 3, 3]);
        let out = conv2d(&input, &weight, 2, 1).unwrap();
        assert_eq!(out.shape(), &[1, 3, 4, 4]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::from_fn(vec![3, 5], |i| (i as f64) * 0.37 - 2.0);
        let y = softmax(&x, 1).unwrap();
        for r in 0..3 {
            let s: f64 = (0..5).map(|c| y.at(&[r, c])).sum();
            assert!((s - 1.0).abs() < 1e-12);
            for c in 0..5 {
                assert!(y.at(&[r, c]) >= 0.0);
            }
        }
    }

    #[test]
    fn transpose_roundtrip_bit_exact() {
        let x = Tensor::from_fn(vec![2, 3, 4], |i| (i as f64).sin());
        let perm = [2, 0, 1];
        let y = transpose(&x, &perm).unwrap();
        let back = transpose(&y, &inverse_perm(&perm)).unwrap();
        assert!(back.bit_eq(&x));
    }

    #[test]
    fn reshape_roundtrip_bit_exact() {
        let x = Tensor::from_fn(vec![6, 4], |i| (i as f64).cos());
        let y = reshape(&x, &[2, 3, 4]).unwrap();
        let back = reshape(&y, &[6, 4]).unwrap();
        assert!(back.bit_eq(&x));
    }

    #[test]
    fn concat_then_slice_recovers_parts() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 3], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0]);
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 5]);
        assert!(slice(&c, 1, 0, 2).unwrap().bit_eq(&a));
        assert!(slice(&c, 1, 2, 3).unwrap().bit_eq(&b));
    }

    #[test]
    fn gather_selects_rows() {
        let x = Tensor::from_fn(vec![4, 2], |i| i as f64);
        let g = gather(&x, 0, &[2, 0, 2]).unwrap();
        assert_eq!(g.shape(), &[3, 2]);
        assert_eq!(g.at(&[0, 0]), 4.0);
        assert_eq!(g.at(&[1, 0]), 0.0);
        assert_eq!(g.at(&[2, 1]), 5.0);
    }

    #[test]
    fn broadcast_materializes() {
        let x = t(&[1, 3], &[1.0, 2.0, 3.0]);
        let y = broadcast(&x, &[2, 3]).unwrap();
        assert_eq!(y.at(&[0, 1]), 2.0);
        assert_eq!(y.at(&[1, 1]), 2.0);
        let back = reduce_to_shape(&Tensor::ones(vec![2, 3]), &[1, 3]);
        assert_eq!(back.data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn layernorm_zero_mean_unit_var() {
        let x = Tensor::from_fn(vec![2, 8], |i| (i as f64) * 1.7 - 3.0);
        let (y, _) = layernorm(&x, 1, 1e-6).unwrap();
        for r in 0..2 {
            let mean: f64 = (0..8).map(|c| y.at(&[r, c])).sum::<f64>() / 8.0;
            let var: f64 = (0..8).map(|c| y.at(&[r, c]).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn non_finite_is_surfaced() {
        let a = Tensor::full(vec![2], 1e308);
        let err = add(&a, &a).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "add" }));
    }
}
