//! Matrix product, reductions, softmax and shape manipulation.

use std::sync::Arc;

use super::error::{NdError, NdResult};
use super::tensor::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    L2Norm,
}

/// `(outer, axis_len, inner)` split of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> NdResult<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(NdError::InvalidAxis {
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn drop_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape.to_vec();
    s.remove(axis);
    if s.is_empty() {
        s.push(1);
    }
    s
}

impl<T: Scalar> Tensor<T> {
    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Tensor<T>) -> NdResult<Tensor<T>> {
        let mismatch = || NdError::ShapeMismatch {
            op: "matmul",
            lhs: self.shape.clone(),
            rhs: other.shape.clone(),
        };
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(mismatch());
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let a = Arc::clone(&self.data);
        let b = Arc::clone(&other.data);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if av == T::zero() {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o = *o + av * bv;
                }
            }
        }
        Tensor::record("matmul", &[self, other], vec![m, n], out, move |g, needs| {
            // dA = dC * B^T
            let ga = needs[0].then(|| {
                let mut ga = vec![T::zero(); m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = T::zero();
                        for j in 0..n {
                            acc = acc + g[i * n + j] * b[p * n + j];
                        }
                        ga[i * k + p] = acc;
                    }
                }
                ga
            });
            // dB = A^T * dC
            let gb = needs[1].then(|| {
                let mut gb = vec![T::zero(); k * n];
                for i in 0..m {
                    for p in 0..k {
                        let av = a[i * k + p];
                        for j in 0..n {
                            gb[p * n + j] = gb[p * n + j] + av * g[i * n + j];
                        }
                    }
                }
                gb
            });
            vec![ga, gb]
        })
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> NdResult<Tensor<T>> {
        if self.rank() != 2 {
            return Err(NdError::InvalidAxis {
                axis: 1,
                rank: self.rank(),
            });
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let x = &self.data;
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        Tensor::record("transpose", &[self], vec![c, r], out, move |g, _| {
            let mut gx = vec![T::zero(); r * c];
            for i in 0..r {
                for j in 0..c {
                    gx[i * c + j] = g[j * r + i];
                }
            }
            vec![Some(gx)]
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> NdResult<Tensor<T>> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || n != self.len() {
            return Err(NdError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Tensor::record(
            "reshape",
            &[self],
            shape.to_vec(),
            Arc::clone(&self.data),
            |g, _| vec![Some(g.to_vec())],
        )
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> NdResult<Tensor<T>> {
        let (outer, size, inner) = split_axis(&self.shape, axis)?;
        if len == 0 || start + len > size {
            return Err(NdError::ShapeMismatch {
                op: "narrow",
                lhs: self.shape.clone(),
                rhs: vec![start, len],
            });
        }
        let x = &self.data;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * size * inner + start * inner;
            out.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        let total = self.len();
        Tensor::record("narrow", &[self], shape, out, move |g, _| {
            let mut gx = vec![T::zero(); total];
            for o in 0..outer {
                let base = o * size * inner + start * inner;
                gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        })
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> NdResult<Tensor<T>> {
        let first = parts.first().ok_or(NdError::EmptyReduction)?;
        let (outer, _, inner) = split_axis(&first.shape, axis)?;
        let mut sizes = Vec::with_capacity(parts.len());
        for p in parts {
            let same_rank = p.rank() == first.rank();
            let same_rest = same_rank
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !same_rest {
                return Err(NdError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            sizes.push(p.shape[axis]);
        }
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &s) in parts.iter().zip(&sizes) {
                out.extend_from_slice(&p.data[o * s * inner..(o + 1) * s * inner]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        let sizes_bw = sizes.clone();
        Tensor::record("concat", parts, shape, out, move |g, needs| {
            let mut grads: Vec<Option<Vec<T>>> = sizes_bw
                .iter()
                .zip(needs)
                .map(|(&s, &n)| n.then(|| Vec::with_capacity(outer * s * inner)))
                .collect();
            for o in 0..outer {
                let mut off = o * total * inner;
                for (gp, &s) in grads.iter_mut().zip(&sizes_bw) {
                    if let Some(gp) = gp {
                        gp.extend_from_slice(&g[off..off + s * inner]);
                    }
                    off += s * inner;
                }
            }
            grads
        })
    }

    /// `[1, 2, 1] / 4` smoothing along `axis`, edges replicated.
    pub fn smooth3(&self, axis: usize) -> NdResult<Tensor<T>> {
        let (outer, size, inner) = split_axis(&self.shape, axis)?;
        let x = &self.data;
        let quarter = T::of(0.25);
        let half = T::of(0.5);
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            let base = o * size * inner;
            for k in 0..size {
                let (lo, hi) = (k.saturating_sub(1), (k + 1).min(size - 1));
                let (row, before, after) = (base + k * inner, base + lo * inner, base + hi * inner);
                for i in 0..inner {
                    out[row + i] = quarter * (x[before + i] + x[after + i]) + half * x[row + i];
                }
            }
        }
        let len = x.len();
        Tensor::record("smooth3", &[self], self.shape.clone(), out, move |g, _| {
            let mut gx = vec![T::zero(); len];
            for o in 0..outer {
                let base = o * size * inner;
                for k in 0..size {
                    let (lo, hi) = (k.saturating_sub(1), (k + 1).min(size - 1));
                    let (row, before, after) = (base + k * inner, base + lo * inner, base + hi * inner);
                    for i in 0..inner {
                        let gi = g[row + i];
                        gx[before + i] = gx[before + i] + quarter * gi;
                        gx[after + i] = gx[after + i] + quarter * gi;
                        gx[row + i] = gx[row + i] + half * gi;
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    /// Softmax along `axis` with max subtraction.
    pub fn softmax_axis(&self, axis: usize) -> NdResult<Tensor<T>> {
        let (outer, size, inner) = split_axis(&self.shape, axis)?;
        let x = &self.data;
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * size * inner + k * inner + i;
                let m = (0..size).map(|k| x[at(k)]).fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for k in 0..size {
                    let e = (x[at(k)] - m).exp();
                    y[at(k)] = e;
                    s = s + e;
                }
                for k in 0..size {
                    y[at(k)] = y[at(k)] / s;
                }
            }
        }
        let ys = Arc::new(y);
        Tensor::record("softmax", &[self], self.shape.clone(), Arc::clone(&ys), move |g, _| {
            let mut gx = vec![T::zero(); ys.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| o * size * inner + k * inner + i;
                    let dot: T = (0..size).map(|k| g[at(k)] * ys[at(k)]).sum();
                    for k in 0..size {
                        gx[at(k)] = ys[at(k)] * (g[at(k)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    /// Sum, mean or L2 norm, over one axis (removed from the shape) or over
    /// everything (result shape `[1]`).
    pub fn reduce(&self, kind: ReduceKind, axis: Option<usize>) -> NdResult<Tensor<T>> {
        if self.is_empty() {
            return Err(NdError::EmptyReduction);
        }
        let (outer, size, inner, shape) = match axis {
            Some(a) => {
                let (o, s, i) = split_axis(&self.shape, a)?;
                (o, s, i, drop_axis(&self.shape, a))
            }
            None => (1, self.len(), 1, vec![1]),
        };
        let x = Arc::clone(&self.data);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let vals = (0..size).map(|k| x[o * size * inner + k * inner + i]);
                out[o * inner + i] = match kind {
                    ReduceKind::Sum => vals.sum(),
                    ReduceKind::Mean => vals.sum::<T>() / T::of(size as f64),
                    ReduceKind::L2Norm => vals.map(|v| v * v).sum::<T>().sqrt(),
                };
            }
        }
        let norms = Arc::new(out.clone());
        let op = match kind {
            ReduceKind::Sum => "sum",
            ReduceKind::Mean => "mean",
            ReduceKind::L2Norm => "l2norm",
        };
        Tensor::record(op, &[self], shape, out, move |g, _| {
            let mut gx = vec![T::zero(); x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let gi = g[o * inner + i];
                    let nrm = norms[o * inner + i];
                    for k in 0..size {
                        let at = o * size * inner + k * inner + i;
                        gx[at] = match kind {
                            ReduceKind::Sum => gi,
                            ReduceKind::Mean => gi / T::of(size as f64),
                            // subgradient 0 at the origin
                            ReduceKind::L2Norm if nrm > T::zero() => gi * x[at] / nrm,
                            ReduceKind::L2Norm => T::zero(),
                        };
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    pub fn sum(&self) -> NdResult<Tensor<T>> {
        self.reduce(ReduceKind::Sum, None)
    }

    pub fn mean(&self) -> NdResult<Tensor<T>> {
        self.reduce(ReduceKind::Mean, None)
    }

    pub fn l2norm(&self) -> NdResult<Tensor<T>> {
        self.reduce(ReduceKind::L2Norm, None)
    }

    pub fn sum_axis(&self, axis: usize) -> NdResult<Tensor<T>> {
        self.reduce(ReduceKind::Sum, Some(axis))
    }

    pub fn mean_axis(&self, axis: usize) -> NdResult<Tensor<T>> {
        self.reduce(ReduceKind::Mean, Some(axis))
    }

    /// Dot product of two equally shaped tensors, as a `[1]` tensor.
    pub fn dot(&self, other: &Tensor<T>) -> NdResult<Tensor<T>> {
        if self.shape != other.shape {
            return Err(NdError::ShapeMismatch {
                op: "dot",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        self.mul(other)?.sum()
    }
}
