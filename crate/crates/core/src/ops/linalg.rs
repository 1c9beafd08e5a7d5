//! Matrix products.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `c[m,n] (+)= a[m,k] · b[k,n]`, all row-major and contiguous.
pub(crate) fn gemm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], accumulate: bool) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(m, k, n, T::one(), a, k as isize, 1, b, n as isize, 1, beta, c, n as isize, 1);
}

/// `c[m,k] += g[m,n] · b[k,n]ᵀ`
pub(crate) fn gemm_nt_acc<T: Scalar>(m: usize, n: usize, k: usize, g: &[T], b: &[T], c: &mut [T]) {
    debug_assert!(g.len() >= m * n && b.len() >= k * n && c.len() >= m * k);
    T::gemm(m, n, k, T::one(), g, n as isize, 1, b, 1, n as isize, T::one(), c, k as isize, 1);
}

/// `c[k,n] += a[m,k]ᵀ · g[m,n]`
pub(crate) fn gemm_tn_acc<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], g: &[T], c: &mut [T]) {
    debug_assert!(a.len() >= m * k && g.len() >= m * n && c.len() >= k * n);
    T::gemm(k, m, n, T::one(), a, 1, k as isize, g, n as isize, 1, T::one(), c, n as isize, 1);
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Batched matrix product `[.., m, k] · [.., k, n]`. The right operand may
    /// be a plain matrix shared across the batch.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (sa, sb) = (self.shape(), other.shape());
        let mismatch = || Error::Shape {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let shared_b = batch_b.is_empty();
        if !shared_b && batch_a != batch_b {
            return Err(mismatch());
        }
        let batch: usize = batch_a.iter().product();
        let (a, b) = (self.value(), other.value());
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            let boff = if shared_b { 0 } else { i * k * n };
            gemm_nn(m, k, n, &a[i * m * k..], &b[boff..], &mut out[i * m * n..], false);
        }
        let mut shape = batch_a.to_vec();
        shape.extend([m, n]);
        let (aid, bid) = (self.id(), other.id());
        Ok(self.tape().op(&[self, other], shape, out, move || {
            Box::new(move |g, sink| {
                if sink.wants(aid) {
                    let ga = sink.slot(aid);
                    for i in 0..batch {
                        let boff = if shared_b { 0 } else { i * k * n };
                        gemm_nt_acc(m, n, k, &g[i * m * n..], &b[boff..], &mut ga[i * m * k..]);
                    }
                }
                if sink.wants(bid) {
                    let gb = sink.slot(bid);
                    for i in 0..batch {
                        let boff = if shared_b { 0 } else { i * k * n };
                        gemm_tn_acc(m, k, n, &a[i * m * k..], &g[i * m * n..], &mut gb[boff..]);
                    }
                }
            })
        }))
    }

    /// Affine map over the last axis: `x[.., in] · w[in, out] + b[out]`.
    pub fn linear(self, w: Var<'t, T>, b: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
        let (sx, sw) = (self.shape(), w.shape());
        let din = *sx.last().unwrap_or(&0);
        if sw.len() != 2 || sw[0] != din {
            return Err(Error::Shape {
                op: "linear",
                lhs: sx,
                rhs: sw,
            });
        }
        let dout = sw[1];
        let rows = self.numel() / din.max(1);
        let (x, wv) = (self.value(), w.value());
        let mut out = vec![T::zero(); rows * dout];
        gemm_nn(rows, din, dout, &x, &wv, &mut out, false);
        let mut shape = sx;
        *shape.last_mut().unwrap() = dout;
        let (xid, wid) = (self.id(), w.id());
        let y = self.tape().op(&[self, w], shape, out, move || {
            Box::new(move |g, sink| {
                if sink.wants(xid) {
                    gemm_nt_acc(rows, dout, din, g, &wv, sink.slot(xid));
                }
                if sink.wants(wid) {
                    gemm_tn_acc(rows, din, dout, &x, g, sink.slot(wid));
                }
            })
        });
        match b {
            Some(b) => y.add_bias(b),
            None => Ok(y),
        }
    }
}

#[cfg(test)]
mod tests {
    use crate::{Tape, Tensor};

    #[test]
    fn identity_and_projector_products() {
        let tape = Tape::<f64>::new();
        let eye = tape.constant(&Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
        let m = tape.constant(&Tensor::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        assert_eq!(eye.matmul(m).unwrap().value().as_slice(), &[1.0, 2.0, 3.0, 4.0]);

        let p = tape.constant(&Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 0.0]).unwrap());
        let q = tape.constant(&Tensor::from_f64(&[2, 2], &[5.0, 6.0, 7.0, 8.0]).unwrap());
        assert_eq!(p.matmul(q).unwrap().value().as_slice(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn batched_with_shared_rhs() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(&Tensor::from_f64(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.constant(&Tensor::from_f64(&[2, 1], &[1.0, 1.0]).unwrap());
        let c = a.matmul(b).unwrap();
        assert_eq!(c.shape(), vec![2, 1, 1]);
        assert_eq!(c.value().as_slice(), &[3.0, 7.0]);
    }

    #[test]
    fn mismatch_reports_both_shapes() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(&Tensor::zeros(&[3, 4]));
        let b = tape.constant(&Tensor::zeros(&[3, 2]));
        let msg = a.matmul(b).unwrap_err().to_string();
        assert!(msg.contains("[3, 4]") && msg.contains("[3, 2]"));
    }

    #[test]
    fn linear_counts_bias() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(&Tensor::from_f64(&[1, 2], &[1.0, 2.0]).unwrap());
        let w = tape.constant(&Tensor::from_f64(&[2, 1], &[3.0, 4.0]).unwrap());
        let b = tape.constant(&Tensor::from_f64(&[1], &[0.5]).unwrap());
        assert_eq!(x.linear(w, Some(b)).unwrap().value().as_slice(), &[11.5]);
    }
}
