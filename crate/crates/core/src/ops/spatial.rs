//! Spatial resampling and row gathers on channels-last grids.

use std::sync::Arc;

use crate::autograd::Var;
use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

/// A fixed linear map between two grids, applied identically to each channel:
/// `out[o, c] = Σ weight · in[i, c]` over the taps of `o`.
#[derive(Debug, Clone)]
pub struct SpatialMap {
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
    taps: Vec<Vec<(usize, f64)>>,
}

impl SpatialMap {
    /// Average over rows `[⌊iH/oh⌋, ⌈(i+1)H/oh⌉)` and the analogous columns.
    pub fn adaptive_avg_pool(in_hw: (usize, usize), out_hw: (usize, usize)) -> Result<Self> {
        let ((h, w), (oh, ow)) = (in_hw, out_hw);
        if oh == 0 || ow == 0 {
            return Err(invalid("adaptive_avg_pool2d: zero output dimension"));
        }
        if oh > h || ow > w {
            return Err(invalid(format!("adaptive_avg_pool2d: output {oh}x{ow} larger than input {h}x{w}")));
        }
        let bounds = |i: usize, n: usize, o: usize| (i * n / o, ((i + 1) * n).div_ceil(o));
        let mut taps = Vec::with_capacity(oh * ow);
        for i in 0..oh {
            let (r0, r1) = bounds(i, h, oh);
            for j in 0..ow {
                let (c0, c1) = bounds(j, w, ow);
                let wgt = 1.0 / ((r1 - r0) * (c1 - c0)) as f64;
                let mut t = Vec::with_capacity((r1 - r0) * (c1 - c0));
                for r in r0..r1 {
                    for c in c0..c1 {
                        t.push((r * w + c, wgt));
                    }
                }
                taps.push(t);
            }
        }
        Ok(Self { in_hw, out_hw, taps })
    }

    /// Half-pixel-centre bilinear resampling (corners not aligned).
    pub fn bilinear(in_hw: (usize, usize), out_hw: (usize, usize)) -> Result<Self> {
        let ((h, w), (oh, ow)) = (in_hw, out_hw);
        if h == 0 || w == 0 || oh == 0 || ow == 0 {
            return Err(invalid("interpolate_bilinear: empty grid"));
        }
        let axis = |dst: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
            let src = ((dst as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        };
        let mut taps = Vec::with_capacity(oh * ow);
        for i in 0..oh {
            let (y0, y1, ly) = axis(i, h, oh);
            for j in 0..ow {
                let (x0, x1, lx) = axis(j, w, ow);
                let mut t = Vec::with_capacity(4);
                for (r, wr) in [(y0, 1.0 - ly), (y1, ly)] {
                    for (c, wc) in [(x0, 1.0 - lx), (x1, lx)] {
                        if wr * wc != 0.0 {
                            t.push((r * w + c, wr * wc));
                        }
                    }
                }
                taps.push(t);
            }
        }
        Ok(Self { in_hw, out_hw, taps })
    }

    /// Multiply-adds per channel.
    pub fn tap_count(&self) -> usize {
        self.taps.iter().map(Vec::len).sum()
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Applies `map` to `x[H, W, C]`.
    pub fn resample(self, map: &Arc<SpatialMap>) -> Result<Var<'t, T>> {
        let s = self.shape();
        if s.len() != 3 || (s[0], s[1]) != map.in_hw {
            return Err(Error::Shape {
                op: "resample",
                lhs: s,
                rhs: vec![map.in_hw.0, map.in_hw.1],
            });
        }
        let c = s[2];
        let x = self.value();
        let (oh, ow) = map.out_hw;
        let taps: Vec<Vec<(usize, T)>> = map
            .taps
            .iter()
            .map(|t| t.iter().map(|&(i, w)| (i, T::lit(w))).collect())
            .collect();
        let mut out = vec![T::zero(); oh * ow * c];
        for (o, t) in taps.iter().enumerate() {
            let dst = &mut out[o * c..(o + 1) * c];
            for &(i, w) in t {
                for (d, &v) in dst.iter_mut().zip(&x[i * c..(i + 1) * c]) {
                    *d += w * v;
                }
            }
        }
        let xid = self.id();
        Ok(self.tape().op(&[self], vec![oh, ow, c], out, move || {
            Box::new(move |g, sink| {
                let gx = sink.slot(xid);
                for (o, t) in taps.iter().enumerate() {
                    let src = &g[o * c..(o + 1) * c];
                    for &(i, w) in t {
                        for (d, &v) in gx[i * c..(i + 1) * c].iter_mut().zip(src) {
                            *d += w * v;
                        }
                    }
                }
            })
        }))
    }

    pub fn adaptive_avg_pool2d(self, out_h: usize, out_w: usize) -> Result<Var<'t, T>> {
        let s = self.shape();
        if s.len() != 3 {
            return Err(invalid(format!("adaptive_avg_pool2d expects [H, W, C], got {s:?}")));
        }
        let map = SpatialMap::adaptive_avg_pool((s[0], s[1]), (out_h, out_w))?;
        self.resample(&Arc::new(map))
    }

    pub fn interpolate_bilinear(self, out_h: usize, out_w: usize) -> Result<Var<'t, T>> {
        let s = self.shape();
        if s.len() != 3 {
            return Err(invalid(format!("interpolate_bilinear expects [h, w, C], got {s:?}")));
        }
        let map = SpatialMap::bilinear((s[0], s[1]), (out_h, out_w))?;
        self.resample(&Arc::new(map))
    }

    /// `out[i] = x[index[i]]` along the first axis; indices may repeat.
    pub fn gather_rows(self, index: &Arc<[usize]>) -> Result<Var<'t, T>> {
        let mut shape = self.shape();
        let n = *shape.first().ok_or_else(|| invalid("gather_rows on scalar"))?;
        let row = self.numel() / n.max(1);
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(invalid(format!("gather index {bad} out of {n} rows")));
        }
        let x = self.value();
        let mut out = Vec::with_capacity(index.len() * row);
        for &i in index.iter() {
            out.extend_from_slice(&x[i * row..(i + 1) * row]);
        }
        shape[0] = index.len();
        let xid = self.id();
        let index = Arc::clone(index);
        Ok(self.tape().op(&[self], shape, out, move || {
            Box::new(move |g, sink| {
                let gx = sink.slot(xid);
                for (o, &i) in index.iter().enumerate() {
                    for (d, &v) in gx[i * row..(i + 1) * row].iter_mut().zip(&g[o * row..(o + 1) * row]) {
                        *d += v;
                    }
                }
            })
        }))
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Rows of `[R, C]` picked by `index`; `None` yields a zero row.
    fn take_rows(self, index: Arc<[Option<usize>]>, shape: Vec<usize>) -> Var<'t, T> {
        let c = *self.shape().last().unwrap_or(&1);
        let x = self.value();
        let mut out = vec![T::zero(); index.len() * c];
        for (o, src) in index.iter().enumerate() {
            if let Some(i) = *src {
                out[o * c..(o + 1) * c].copy_from_slice(&x[i * c..(i + 1) * c]);
            }
        }
        let xid = self.id();
        self.tape().op(&[self], shape, out, move || {
            Box::new(move |g, sink| {
                let gx = sink.slot(xid);
                for (o, src) in index.iter().enumerate() {
                    if let Some(i) = *src {
                        for (d, &v) in gx[i * c..(i + 1) * c].iter_mut().zip(&g[o * c..(o + 1) * c]) {
                            *d += v;
                        }
                    }
                }
            })
        })
    }

    /// Zero-pads `[H, W, C]` at the bottom and right to `[hp, wp, C]`.
    pub fn pad_grid(self, hp: usize, wp: usize) -> Result<Var<'t, T>> {
        let s = self.shape();
        if s.len() != 3 || hp < s[0] || wp < s[1] {
            return Err(invalid(format!("cannot pad {s:?} to {hp}x{wp}")));
        }
        if (hp, wp) == (s[0], s[1]) {
            return Ok(self);
        }
        let (h, w) = (s[0], s[1]);
        let index: Arc<[Option<usize>]> = (0..hp * wp)
            .map(|p| {
                let (r, c) = (p / wp, p % wp);
                (r < h && c < w).then_some(r * w + c)
            })
            .collect();
        Ok(self.take_rows(index, vec![hp, wp, s[2]]))
    }

    /// Top-left `[h, w, C]` window of `[H, W, C]`.
    pub fn crop_grid(self, h: usize, w: usize) -> Result<Var<'t, T>> {
        let s = self.shape();
        if s.len() != 3 || h > s[0] || w > s[1] {
            return Err(invalid(format!("cannot crop {s:?} to {h}x{w}")));
        }
        if (h, w) == (s[0], s[1]) {
            return Ok(self);
        }
        let wp = s[1];
        let index: Arc<[Option<usize>]> = (0..h * w).map(|p| Some((p / w) * wp + p % w)).collect();
        Ok(self.take_rows(index, vec![h, w, s[2]]))
    }
}

#[cfg(test)]
mod tests {
    use crate::{Tape, Tensor};

    fn raster16() -> Tensor<f64> {
        Tensor::from_f64(&[4, 4, 1], &(0..16).map(f64::from).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn pool_quadrants_of_raster_indices() {
        let tape = Tape::<f64>::new();
        let y = tape.constant(&raster16()).adaptive_avg_pool2d(2, 2).unwrap().value();
        assert_eq!(y.as_slice(), &[2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn pool_to_input_size_is_identity_and_zero_size_errors() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(&raster16());
        assert_eq!(x.adaptive_avg_pool2d(4, 4).unwrap().value().as_slice(), raster16().data());
        assert!(x.adaptive_avg_pool2d(0, 2).is_err());
    }

    #[test]
    fn uneven_pool_windows_overlap() {
        // 3 rows into 2 cells: [0, 2) and [1, 3)
        let tape = Tape::<f64>::new();
        let x = tape.constant(&Tensor::from_f64(&[3, 1, 1], &[0.0, 3.0, 6.0]).unwrap());
        assert_eq!(x.adaptive_avg_pool2d(2, 1).unwrap().value().as_slice(), &[1.5, 4.5]);
    }

    /// Closed-form half-pixel bilinear sample of a 2×2 grid.
    fn bilinear_2x2(v: [[f64; 2]; 2], oy: usize, ox: usize, out: usize) -> f64 {
        let coord = |d: usize| ((d as f64 + 0.5) * 2.0 / out as f64 - 0.5).clamp(0.0, 1.0);
        let (y, x) = (coord(oy), coord(ox));
        v[0][0] * (1.0 - y) * (1.0 - x) + v[0][1] * (1.0 - y) * x + v[1][0] * y * (1.0 - x) + v[1][1] * y * x
    }

    #[test]
    fn bilinear_upsample_matches_closed_form() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(&Tensor::from_f64(&[2, 2, 1], &[0.0, 1.0, 2.0, 3.0]).unwrap());
        let y = x.interpolate_bilinear(4, 4).unwrap().value();
        for i in 0..4 {
            for j in 0..4 {
                let expect = bilinear_2x2([[0.0, 1.0], [2.0, 3.0]], i, j, 4);
                assert!((y[i * 4 + j] - expect).abs() < 1e-15, "({i},{j})");
            }
        }
        assert_eq!(y[0], 0.0);
        assert_eq!(y[5], 0.75);
    }

    #[test]
    fn bilinear_constant_and_broadcast() {
        let tape = Tape::<f64>::new();
        let one = tape.constant(&Tensor::full(&[1, 1, 2], 7.0));
        let y = one.interpolate_bilinear(3, 5).unwrap().value();
        assert!(y.iter().all(|&v| v == 7.0));
        let c = tape.constant(&Tensor::full(&[2, 3, 1], -1.5));
        assert!(c.interpolate_bilinear(6, 4).unwrap().value().iter().all(|&v| (v + 1.5).abs() < 1e-15));
    }

    #[test]
    fn pad_then_crop_is_identity_with_zero_border() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::from_f64(&[2, 3, 1], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let p = x.pad_grid(4, 4).unwrap();
        assert_eq!(
            p.value().as_slice(),
            &[1.0, 2.0, 3.0, 0.0, 4.0, 5.0, 6.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]
        );
        let c = p.crop_grid(2, 3).unwrap();
        assert_eq!(c.value().as_slice(), x.value().as_slice());
        let g = tape.backward(c.sum()).unwrap().wrt(x);
        assert!(g.data().iter().all(|&v| v == 1.0));
        assert!(x.pad_grid(1, 3).is_err());
    }
}
