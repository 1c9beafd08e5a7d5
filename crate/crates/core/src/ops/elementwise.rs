//! Pointwise arithmetic, activations, reductions and channel plumbing.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::rc::Rc;

use crate::autograd::Var;
use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

fn same_shape<T: Scalar>(op: &'static str, a: &Var<'_, T>, b: &Var<'_, T>) -> Result<Vec<usize>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(Error::Shape {
            op,
            lhs: sa,
            rhs: sb,
        });
    }
    Ok(sa)
}

/// Standard normal CDF via erf.
#[inline]
pub fn normal_cdf<T: Scalar>(x: T) -> T {
    T::lit(0.5) * (T::one() + (x * T::lit(FRAC_1_SQRT_2)).erf())
}

#[inline]
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    x * normal_cdf(x)
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let pdf = (-(x * x) * T::lit(0.5)).exp() * T::lit(1.0 / (2.0 * PI).sqrt());
    normal_cdf(x) + x * pdf
}

#[inline]
pub fn softplus_scalar<T: Scalar>(x: T) -> T {
    // log(1 + e^x) without overflow
    if x > T::lit(20.0) {
        x
    } else if x < T::lit(-20.0) {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    fn unary(self, f: impl Fn(T) -> T, df: impl Fn(T) -> T + 'static) -> Var<'t, T> {
        let x = self.value();
        let out: Vec<T> = x.iter().map(|&v| f(v)).collect();
        let xid = self.id();
        self.tape().op(&[self], self.shape(), out, move || {
            let d: Vec<T> = x.iter().map(|&v| df(v)).collect();
            Box::new(move |g, sink| {
                let s = sink.slot(xid);
                for ((s, &g), &d) in s.iter_mut().zip(g).zip(&d) {
                    *s += g * d;
                }
            })
        })
    }

    pub fn neg(self) -> Var<'t, T> {
        self.scale(-T::one())
    }

    pub fn scale(self, c: T) -> Var<'t, T> {
        self.unary(move |v| v * c, move |_| c)
    }

    pub fn add_scalar(self, c: T) -> Var<'t, T> {
        self.unary(move |v| v + c, |_| T::one())
    }

    /// `1 - x`
    pub fn one_minus(self) -> Var<'t, T> {
        self.unary(|v| T::one() - v, |_| -T::one())
    }

    pub fn exp(self) -> Var<'t, T> {
        self.unary(|v| v.exp(), |v| v.exp())
    }

    pub fn softplus(self) -> Var<'t, T> {
        self.unary(softplus_scalar, sigmoid)
    }

    pub fn silu(self) -> Var<'t, T> {
        self.unary(
            |v| v * sigmoid(v),
            |v| {
                let s = sigmoid(v);
                s * (T::one() + v * (T::one() - s))
            },
        )
    }

    /// Exact-erf GELU.
    pub fn gelu(self) -> Var<'t, T> {
        self.unary(gelu_scalar, gelu_grad)
    }

    fn binary(
        self,
        op: &'static str,
        other: Var<'t, T>,
        f: impl Fn(T, T) -> T,
        grads: fn(T, T, T) -> (T, T),
    ) -> Result<Var<'t, T>> {
        let shape = same_shape(op, &self, &other)?;
        let (a, b) = (self.value(), other.value());
        let out: Vec<T> = a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect();
        let (aid, bid) = (self.id(), other.id());
        Ok(self.tape().op(&[self, other], shape, out, move || {
            Box::new(move |g, sink| {
                let (wa, wb) = (sink.wants(aid), sink.wants(bid));
                if wa {
                    let s = sink.slot(aid);
                    for i in 0..g.len() {
                        s[i] += grads(g[i], a[i], b[i]).0;
                    }
                }
                if wb {
                    let s = sink.slot(bid);
                    for i in 0..g.len() {
                        s[i] += grads(g[i], a[i], b[i]).1;
                    }
                }
            })
        }))
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary("add", other, |a, b| a + b, |g, _, _| (g, g))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary("sub", other, |a, b| a - b, |g, _, _| (g, -g))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary("mul", other, |a, b| a * b, |g, a, b| (g * b, g * a))
    }

    pub fn sum(self) -> Var<'t, T> {
        let x = self.value();
        let total = x.iter().copied().sum::<T>();
        let (xid, n) = (self.id(), x.len());
        self.tape().op(&[self], vec![], vec![total], move || {
            Box::new(move |g, sink| {
                let s = sink.slot(xid);
                debug_assert_eq!(s.len(), n);
                s.iter_mut().for_each(|v| *v += g[0]);
            })
        })
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = self.numel().max(1);
        self.sum().scale(T::one() / T::lit(n as f64))
    }

    /// Inner product with a constant vector of the same length.
    pub fn dot_const(self, w: &[T]) -> Result<Var<'t, T>> {
        if w.len() != self.numel() {
            return Err(Error::Shape {
                op: "dot_const",
                lhs: self.shape(),
                rhs: vec![w.len()],
            });
        }
        let x = self.value();
        let total: T = x.iter().zip(w).map(|(&a, &b)| a * b).sum();
        let w: Rc<Vec<T>> = Rc::new(w.to_vec());
        let xid = self.id();
        Ok(self.tape().op(&[self], vec![], vec![total], move || {
            Box::new(move |g, sink| {
                let s = sink.slot(xid);
                for (s, &w) in s.iter_mut().zip(w.iter()) {
                    *s += g[0] * w;
                }
            })
        }))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape(),
                rhs: shape.to_vec(),
            });
        }
        let xid = self.id();
        let out = self.value().as_ref().clone();
        Ok(self.tape().op(&[self], shape.to_vec(), out, move || {
            Box::new(move |g, sink| sink.add(xid, g))
        }))
    }

    /// `x[..., c] + bias[c]`
    pub fn add_bias(self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let c = *shape.last().unwrap_or(&1);
        if bias.shape() != [c] {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: shape,
                rhs: bias.shape(),
            });
        }
        let (x, b) = (self.value(), bias.value());
        let out: Vec<T> = x
            .chunks_exact(c)
            .flat_map(|row| row.iter().zip(b.iter()).map(|(&v, &bb)| v + bb))
            .collect();
        let (xid, bid) = (self.id(), bias.id());
        Ok(self.tape().op(&[self, bias], shape, out, move || {
            Box::new(move |g, sink| {
                sink.add(xid, g);
                if sink.wants(bid) {
                    let s = sink.slot(bid);
                    for row in g.chunks_exact(c) {
                        s.iter_mut().zip(row).for_each(|(s, &v)| *s += v);
                    }
                }
            })
        }))
    }

    /// `x[r, c] * m[r]` for `x` viewed as `[rows, last]`.
    pub fn mul_rows(self, m: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let c = *shape.last().unwrap_or(&1);
        let rows = self.numel() / c.max(1);
        if m.numel() != rows {
            return Err(Error::Shape {
                op: "mul_rows",
                lhs: shape,
                rhs: m.shape(),
            });
        }
        let (x, mv) = (self.value(), m.value());
        let out: Vec<T> = x
            .chunks_exact(c)
            .zip(mv.iter())
            .flat_map(|(row, &s)| row.iter().map(move |&v| v * s))
            .collect();
        let (xid, mid) = (self.id(), m.id());
        Ok(self.tape().op(&[self, m], shape, out, move || {
            Box::new(move |g, sink| {
                if sink.wants(xid) {
                    let s = sink.slot(xid);
                    for ((srow, grow), &m) in s.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(mv.iter()) {
                        srow.iter_mut().zip(grow).for_each(|(s, &g)| *s += g * m);
                    }
                }
                if sink.wants(mid) {
                    let s = sink.slot(mid);
                    for ((s, grow), xrow) in s.iter_mut().zip(g.chunks_exact(c)).zip(x.chunks_exact(c)) {
                        *s += grow.iter().zip(xrow).map(|(&g, &x)| g * x).sum::<T>();
                    }
                }
            })
        }))
    }

    /// Channels `[start, start + len)` of the last axis.
    pub fn narrow_last(self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let mut shape = self.shape();
        let c = *shape.last().ok_or_else(|| invalid("narrow_last on scalar"))?;
        if start + len > c {
            return Err(invalid(format!("narrow [{start}, {}) out of {c} channels", start + len)));
        }
        let x = self.value();
        let out: Vec<T> = x.chunks_exact(c).flat_map(|r| r[start..start + len].iter().copied()).collect();
        *shape.last_mut().unwrap() = len;
        let xid = self.id();
        Ok(self.tape().op(&[self], shape, out, move || {
            Box::new(move |g, sink| {
                let s = sink.slot(xid);
                for (srow, grow) in s.chunks_exact_mut(c).zip(g.chunks_exact(len)) {
                    srow[start..start + len].iter_mut().zip(grow).for_each(|(s, &g)| *s += g);
                }
            })
        }))
    }

    /// Concatenates along the last axis; leading dims must agree.
    pub fn concat_last(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or_else(|| invalid("concat of nothing"))?;
        let lead = {
            let s = first.shape();
            s[..s.len() - 1].to_vec()
        };
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::Shape {
                    op: "concat_last",
                    lhs: first.shape(),
                    rhs: s,
                });
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let vals: Vec<Rc<Vec<T>>> = parts.iter().map(|p| p.value()).collect();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, &w) in vals.iter().zip(&widths) {
                out.extend_from_slice(&v[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let ids: Vec<usize> = parts.iter().map(|p| p.id()).collect();
        Ok(first.tape().op(parts, shape, out, move || {
            Box::new(move |g, sink| {
                let mut off = 0;
                for (&id, &w) in ids.iter().zip(&widths) {
                    if sink.wants(id) {
                        let s = sink.slot(id);
                        for r in 0..rows {
                            let src = &g[r * total + off..r * total + off + w];
                            s[r * w..(r + 1) * w].iter_mut().zip(src).for_each(|(s, &g)| *s += g);
                        }
                    }
                    off += w;
                }
            })
        }))
    }

    /// Mean over all leading positions: `[.., C] -> [C]`.
    pub fn mean_rows(self) -> Var<'t, T> {
        let shape = self.shape();
        let c = *shape.last().unwrap_or(&1);
        let x = self.value();
        let rows = x.len() / c.max(1);
        let inv = T::one() / T::lit(rows.max(1) as f64);
        let mut out = vec![T::zero(); c];
        for row in x.chunks_exact(c) {
            out.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o *= inv);
        let xid = self.id();
        self.tape().op(&[self], vec![c], out, move || {
            Box::new(move |g, sink| {
                let s = sink.slot(xid);
                for srow in s.chunks_exact_mut(c) {
                    srow.iter_mut().zip(g).for_each(|(s, &g)| *s += g * inv);
                }
            })
        })
    }
}

#[cfg(test)]
mod tests {
    use crate::{Tape, Tensor};

    #[test]
    fn gelu_reference_points() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(&Tensor::from_f64(&[4], &[0.0, 1.0, 12.0, -12.0]).unwrap());
        let y = x.gelu().value();
        assert_eq!(y[0], 0.0);
        // Φ(1) = 0.841344746...
        assert!((y[1] - 0.841_344_746_068_543).abs() < 1e-12);
        assert!((y[2] - 12.0).abs() < 1e-12);
        assert!(y[3].abs() < 1e-12);
    }

    #[test]
    fn gelu_is_monotone_on_tested_range() {
        let tape = Tape::<f64>::new();
        let xs: Vec<f64> = (0..400).map(|i| -0.75 + i as f64 * 0.02).collect();
        let y = tape.constant(&Tensor::from_f64(&[400], &xs).unwrap()).gelu().value();
        assert!(y.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn softplus_is_positive_and_stable() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(&Tensor::from_f64(&[4], &[-100.0, 0.0, 3.0, 100.0]).unwrap());
        let y = x.softplus().value();
        assert!(y.iter().all(|v| v.is_finite() && *v >= 0.0));
        assert!((y[1] - std::f32::consts::LN_2).abs() < 1e-6);
        assert_eq!(y[3], 100.0);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(&Tensor::zeros(&[2, 3]));
        let b = tape.constant(&Tensor::zeros(&[3, 2]));
        let msg = a.add(b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn concat_then_narrow_recovers_parts() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(&Tensor::from_f64(&[2, 1], &[1.0, 2.0]).unwrap());
        let b = tape.constant(&Tensor::from_f64(&[2, 2], &[3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = crate::Var::concat_last(&[a, b]).unwrap();
        assert_eq!(c.value().as_slice(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        assert_eq!(c.narrow_last(1, 2).unwrap().value().as_slice(), &[3.0, 4.0, 5.0, 6.0]);
    }
}
