//! Channels-last convolutions.

use crate::autograd::Var;
use crate::error::{invalid, Error, Result};
use crate::ops::linalg::{gemm_nn, gemm_nt_acc, gemm_tn_acc};
use crate::scalar::Scalar;

/// Output side length of a strided window, `None` when non-positive.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy)]
struct Geometry {
    h: usize,
    w: usize,
    cin: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn patch(&self) -> usize {
        self.k * self.k * self.cin
    }

    /// Visits `(col_row, col_offset, input_offset)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let patch = self.patch();
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let row = oy * self.wo + ox;
                for ky in 0..self.k {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= self.h as isize {
                        continue;
                    }
                    for kx in 0..self.k {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= self.w as isize {
                            continue;
                        }
                        let col = row * patch + (ky * self.k + kx) * self.cin;
                        let src = (iy as usize * self.w + ix as usize) * self.cin;
                        f(row, col, src);
                    }
                }
            }
        }
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Cross-correlation of `x[H, W, Cin]` with `weight[k, k, Cin, Cout]`.
    pub fn conv2d(
        self,
        weight: Var<'t, T>,
        bias: Option<Var<'t, T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t, T>> {
        let (sx, sw) = (self.shape(), weight.shape());
        if sx.len() != 3 || sw.len() != 4 || sw[0] != sw[1] || sw[2] != sx[2] {
            return Err(Error::Shape {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        let (h, w, cin) = (sx[0], sx[1], sx[2]);
        let (k, cout) = (sw[0], sw[3]);
        let (Some(ho), Some(wo)) = (conv_out_size(h, k, stride, padding), conv_out_size(w, k, stride, padding)) else {
            return Err(invalid(format!(
                "conv2d output size non-positive for input {h}x{w}, kernel {k}, stride {stride}, padding {padding}"
            )));
        };
        let geo = Geometry {
            h,
            w,
            cin,
            k,
            stride,
            pad: padding,
            ho,
            wo,
        };
        let patch = geo.patch();
        let x = self.value();
        let wv = weight.value();
        let mut col = vec![T::zero(); ho * wo * patch];
        geo.for_each_tap(|_, c, s| col[c..c + cin].copy_from_slice(&x[s..s + cin]));
        let mut out = vec![T::zero(); ho * wo * cout];
        gemm_nn(ho * wo, patch, cout, &col, &wv, &mut out, false);
        let (xid, wid) = (self.id(), weight.id());
        let y = self.tape().op(&[self, weight], vec![ho, wo, cout], out, move || {
            Box::new(move |g, sink| {
                if sink.wants(wid) {
                    gemm_tn_acc(ho * wo, patch, cout, &col, g, sink.slot(wid));
                }
                if sink.wants(xid) {
                    let mut gcol = vec![T::zero(); ho * wo * patch];
                    gemm_nt_acc(ho * wo, cout, patch, g, &wv, &mut gcol);
                    let gx = sink.slot(xid);
                    geo.for_each_tap(|_, c, s| {
                        for i in 0..cin {
                            gx[s + i] += gcol[c + i];
                        }
                    });
                }
            })
        });
        match bias {
            Some(b) => y.add_bias(b),
            None => Ok(y),
        }
    }

    /// Causal depthwise convolution over the sequence axis of `x[L, D]`:
    /// `y[t, d] = bias[d] + Σ_j weight[j, d] · x[t - (k-1) + j, d]`.
    pub fn causal_depthwise_conv1d(self, weight: Var<'t, T>, bias: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
        let (sx, sw) = (self.shape(), weight.shape());
        if sx.len() != 2 || sw.len() != 2 || sw[1] != sx[1] || sw[0] == 0 {
            return Err(Error::Shape {
                op: "causal_depthwise_conv1d",
                lhs: sx,
                rhs: sw,
            });
        }
        let (l, d) = (sx[0], sx[1]);
        let k = sw[0];
        let x = self.value();
        let wv = weight.value();
        let mut out = vec![T::zero(); l * d];
        for t in 0..l {
            for j in 0..k {
                let Some(src) = (t + j).checked_sub(k - 1) else {
                    continue;
                };
                for c in 0..d {
                    out[t * d + c] += wv[j * d + c] * x[src * d + c];
                }
            }
        }
        let (xid, wid) = (self.id(), weight.id());
        let y = self.tape().op(&[self, weight], vec![l, d], out, move || {
            Box::new(move |g, sink| {
                if sink.wants(wid) {
                    let gw = sink.slot(wid);
                    for t in 0..l {
                        for j in 0..k {
                            let Some(src) = (t + j).checked_sub(k - 1) else {
                                continue;
                            };
                            for c in 0..d {
                                gw[j * d + c] += g[t * d + c] * x[src * d + c];
                            }
                        }
                    }
                }
                if sink.wants(xid) {
                    let gx = sink.slot(xid);
                    for t in 0..l {
                        for j in 0..k {
                            let Some(src) = (t + j).checked_sub(k - 1) else {
                                continue;
                            };
                            for c in 0..d {
                                gx[src * d + c] += g[t * d + c] * wv[j * d + c];
                            }
                        }
                    }
                }
            })
        });
        match bias {
            Some(b) => y.add_bias(b),
            None => Ok(y),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{Tape, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop cross-correlation.
    fn naive(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Vec<f64> {
        let (h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (k, cout) = (w.shape()[0], w.shape()[3]);
        let ho = conv_out_size(h, k, stride, pad).unwrap();
        let wo = conv_out_size(wd, k, stride, pad).unwrap();
        let mut out = vec![0.0; ho * wo * cout];
        for oy in 0..ho {
            for ox in 0..wo {
                for co in 0..cout {
                    let mut acc = 0.0;
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                acc += x.data()[(iy as usize * wd + ix as usize) * cin + ci]
                                    * w.data()[((ky * k + kx) * cin + ci) * cout + co];
                            }
                        }
                    }
                    out[(oy * wo + ox) * cout + co] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn unit_kernel_is_identity() {
        let tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xt = Tensor::randn(&[3, 5, 1], 1.0, &mut rng);
        let x = tape.constant(&xt);
        let w = tape.constant(&Tensor::ones(&[1, 1, 1, 1]));
        assert_eq!(x.conv2d(w, None, 1, 0).unwrap().value().as_slice(), xt.data());
    }

    #[test]
    fn ones_kernel_sums_window() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(&Tensor::full(&[5, 5, 1], 2.0));
        let w = tape.constant(&Tensor::ones(&[3, 3, 1, 1]));
        let y = x.conv2d(w, None, 1, 1).unwrap().value();
        assert_eq!(y[2 * 5 + 2], 18.0);
        assert_eq!(y[0], 8.0);
    }

    #[test]
    fn strided_padded_matches_nested_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xt = Tensor::randn(&[4, 4, 2], 1.0, &mut rng);
        let wt = Tensor::randn(&[3, 3, 2, 3], 1.0, &mut rng);
        let tape = Tape::<f64>::new();
        let y = tape.constant(&xt).conv2d(tape.constant(&wt), None, 2, 1).unwrap();
        assert_eq!(y.shape(), vec![2, 2, 3]);
        let expect = naive(&xt, &wt, 2, 1);
        for (a, b) in y.value().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn non_positive_output_is_an_error() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(&Tensor::zeros(&[2, 2, 1]));
        let w = tape.constant(&Tensor::zeros(&[3, 3, 1, 1]));
        assert!(x.conv2d(w, None, 1, 0).is_err());
    }

    #[test]
    fn causal_conv_ignores_future() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(&Tensor::from_f64(&[3, 1], &[1.0, 10.0, 100.0]).unwrap());
        let w = tape.constant(&Tensor::from_f64(&[3, 1], &[0.25, 0.5, 1.0]).unwrap());
        let y = x.causal_depthwise_conv1d(w, None).unwrap().value();
        assert_eq!(y.as_slice(), &[1.0, 10.5, 105.25]);
    }
}
