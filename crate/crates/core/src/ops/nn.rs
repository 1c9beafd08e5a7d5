//! Normalisation and probability ops.

use crate::autograd::Var;
use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

/// Layer-norm epsilon used throughout the model.
pub const LN_EPS: f64 = 1e-6;

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Max-subtracted softmax of a contiguous slice.
pub fn softmax_slice<T: Scalar>(x: &[T]) -> Vec<T> {
    let m = x.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = x.iter().map(|&v| (v - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(invalid(format!("softmax axis {axis} for rank {}", shape.len())));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let x = self.value();
        let mut y = vec![T::zero(); x.len()];
        let mut buf = vec![T::zero(); n];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                for j in 0..n {
                    buf[j] = x[idx(j)];
                }
                let s = softmax_slice(&buf);
                for j in 0..n {
                    y[idx(j)] = s[j];
                }
            }
        }
        let xid = self.id();
        let yv = y.clone();
        Ok(self.tape().op(&[self], shape, y, move || {
            Box::new(move |g, sink| {
                let s = sink.slot(xid);
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let dot: T = (0..n).map(|j| g[idx(j)] * yv[idx(j)]).sum();
                        for j in 0..n {
                            s[idx(j)] += yv[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
            })
        }))
    }

    /// Normalises each row over the last axis, then applies `gamma`, `beta`.
    pub fn layer_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let c = *shape.last().ok_or_else(|| invalid("layer_norm on scalar"))?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: shape,
                rhs: gamma.shape(),
            });
        }
        let x = self.value();
        let (gv, bv) = (gamma.value(), beta.value());
        let rows = x.len() / c;
        let eps = T::lit(eps);
        let inv_c = T::one() / T::lit(c as f64);
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut y = vec![T::zero(); x.len()];
        for r in 0..rows {
            let row = &x[r * c..(r + 1) * c];
            let mu = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_c;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mu) * rs;
                xhat[r * c + j] = h;
                y[r * c + j] = h * gv[j] + bv[j];
            }
        }
        let (xid, gid, bid) = (self.id(), gamma.id(), beta.id());
        Ok(self.tape().op(&[self, gamma, beta], shape, y, move || {
            Box::new(move |g, sink| {
                if sink.wants(gid) {
                    let s = sink.slot(gid);
                    for r in 0..rows {
                        for j in 0..c {
                            s[j] += g[r * c + j] * xhat[r * c + j];
                        }
                    }
                }
                if sink.wants(bid) {
                    let s = sink.slot(bid);
                    for r in 0..rows {
                        for j in 0..c {
                            s[j] += g[r * c + j];
                        }
                    }
                }
                if sink.wants(xid) {
                    let s = sink.slot(xid);
                    for r in 0..rows {
                        let gr = &g[r * c..(r + 1) * c];
                        let hr = &xhat[r * c..(r + 1) * c];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..c {
                            let gh = gr[j] * gv[j];
                            m1 += gh;
                            m2 += gh * hr[j];
                        }
                        m1 *= inv_c;
                        m2 *= inv_c;
                        for j in 0..c {
                            let gh = gr[j] * gv[j];
                            s[r * c + j] += rstd[r] * (gh - m1 - hr[j] * m2);
                        }
                    }
                }
            })
        }))
    }

    /// Negative log-likelihood of `label` under softmax of a logit vector.
    pub fn cross_entropy(self, label: usize) -> Result<Var<'t, T>> {
        let n = self.numel();
        if label >= n {
            return Err(invalid(format!("label {label} out of {n} classes")));
        }
        let p = softmax_slice(&self.value());
        let loss = -(p[label].max(T::min_positive_value())).ln();
        let xid = self.id();
        Ok(self.tape().op(&[self], vec![], vec![loss], move || {
            Box::new(move |g, sink| {
                let s = sink.slot(xid);
                for (j, s) in s.iter_mut().enumerate() {
                    let onehot = if j == label { T::one() } else { T::zero() };
                    *s += g[0] * (p[j] - onehot);
                }
            })
        }))
    }
}
