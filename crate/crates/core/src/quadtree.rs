//! Invertible 2D→1D scan orderings over an `H × W` token grid.
//!
//! Every ordering is a [`ScanPermutation`] with `forward[seq_pos] = raster_pos`.
//! The coarse ordering visits the four `(H/2, W/2)` quadrants in row-major
//! order and each quadrant in raster order. Two fine orderings use the
//! sixteen `(H/4, W/4)` windows:
//!
//! * [`fine_partition_perm`] walks the 4×4 window grid row-major, so each
//!   quarter of the sequence is a band of `H/4` full rows.
//! * [`nested_fine_perm`] keeps the coarse quadrant blocks and arranges the
//!   four sub-windows inside each one, so a quadrant occupies the same
//!   sequence block under both the coarse and nested orderings. Mixed
//!   sequences are built from this one.

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, OnceLock, RwLock};

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanKind {
    Raster,
    CoarseQuad,
    FineQuad,
    NestedQuad,
    Composed,
}

impl fmt::Display for ScanKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ScanKind::Raster => "raster",
            ScanKind::CoarseQuad => "coarse",
            ScanKind::FineQuad => "fine",
            ScanKind::NestedQuad => "nested",
            ScanKind::Composed => "composed",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for ScanKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raster" => Ok(ScanKind::Raster),
            "coarse" => Ok(ScanKind::CoarseQuad),
            "fine" => Ok(ScanKind::FineQuad),
            "nested" => Ok(ScanKind::NestedQuad),
            other => Err(invalid(format!("unknown scan kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScanPermutation {
    forward: Arc<[usize]>,
    inverse: Arc<[usize]>,
    grid: (usize, usize),
    kind: ScanKind,
    /// Set on restorations, which map sequence order back to raster order.
    inverted: bool,
}

impl ScanPermutation {
    /// Validates that `forward` is a bijection on `[0, H·W)`.
    pub fn new(forward: Vec<usize>, grid: (usize, usize), kind: ScanKind) -> Result<Self> {
        let len = grid.0 * grid.1;
        if forward.len() != len {
            return Err(invalid(format!(
                "permutation of length {} for grid {}x{}",
                forward.len(),
                grid.0,
                grid.1
            )));
        }
        let mut inverse = vec![usize::MAX; len];
        for (i, &p) in forward.iter().enumerate() {
            if p >= len || inverse[p] != usize::MAX {
                return Err(invalid(format!("not a bijection: position {p} at index {i}")));
            }
            inverse[p] = i;
        }
        Ok(Self {
            forward: forward.into(),
            inverse: inverse.into(),
            grid,
            kind,
            inverted: false,
        })
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn forward(&self) -> &Arc<[usize]> {
        &self.forward
    }

    pub fn inverse(&self) -> &Arc<[usize]> {
        &self.inverse
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn kind(&self) -> ScanKind {
        self.kind
    }

    pub fn is_restoration(&self) -> bool {
        self.inverted
    }

    /// Checks `inverse[forward[i]] == i` and that `forward` covers `[0, L)`.
    pub fn is_consistent(&self) -> bool {
        let len = self.len();
        self.inverse.len() == len
            && self.forward.iter().all(|&p| p < len)
            && self.forward.iter().enumerate().all(|(i, &p)| self.inverse[p] == i)
    }

    /// `self` after `first`: gathering by the result equals gathering by
    /// `first` and then by `self`.
    pub fn compose(&self, first: &ScanPermutation) -> Result<ScanPermutation> {
        if self.len() != first.len() {
            return Err(invalid(format!("compose lengths {} and {}", self.len(), first.len())));
        }
        let forward = self.forward.iter().map(|&i| first.forward[i]).collect();
        ScanPermutation::new(forward, first.grid, ScanKind::Composed)
    }

    /// `out[i] = x[forward[i]]` over rows of width `row`.
    pub fn apply<T: Copy>(&self, x: &[T], row: usize) -> Result<Vec<T>> {
        if x.len() != self.len() * row {
            return Err(invalid(format!(
                "sequence of {} values does not match {} rows of {row}",
                x.len(),
                self.len()
            )));
        }
        let mut out = Vec::with_capacity(x.len());
        for &i in self.forward.iter() {
            out.extend_from_slice(&x[i * row..(i + 1) * row]);
        }
        Ok(out)
    }
}

fn require_divisible(h: usize, w: usize, by: usize, what: &str) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(by) || !w.is_multiple_of(by) {
        return Err(invalid(format!("{what} needs H and W divisible by {by}, got {h}x{w}")));
    }
    Ok(())
}

pub fn raster_perm(h: usize, w: usize) -> ScanPermutation {
    ScanPermutation::new((0..h * w).collect(), (h, w), ScanKind::Raster).expect("identity")
}

/// Quadrant-row, quadrant-col, then raster inside each `(H/2, W/2)` window.
pub fn coarse_partition_perm(h: usize, w: usize) -> Result<ScanPermutation> {
    require_divisible(h, w, 2, "coarse partition")?;
    let (wh, ww) = (h / 2, w / 2);
    let mut fwd = Vec::with_capacity(h * w);
    for q1 in 0..2 {
        for q2 in 0..2 {
            for r in 0..wh {
                for c in 0..ww {
                    fwd.push((q1 * wh + r) * w + q2 * ww + c);
                }
            }
        }
    }
    ScanPermutation::new(fwd, (h, w), ScanKind::CoarseQuad)
}

/// Fine windows of size `(H/4, W/4)` indexed by `(2·q1 + q3, 2·q2 + q4)`,
/// visited in the loop order given by `order` over `[q1, q2, q3, q4]`.
fn fine_windows(h: usize, w: usize, order: [usize; 4], kind: ScanKind) -> Result<ScanPermutation> {
    require_divisible(h, w, 4, "fine partition")?;
    let (fh, fw) = (h / 4, w / 4);
    let mut fwd = Vec::with_capacity(h * w);
    for a in 0..2 {
        for b in 0..2 {
            for c in 0..2 {
                for d in 0..2 {
                    let mut q = [0usize; 4];
                    q[order[0]] = a;
                    q[order[1]] = b;
                    q[order[2]] = c;
                    q[order[3]] = d;
                    let [q1, q2, q3, q4] = q;
                    let (r0, c0) = ((2 * q1 + q3) * fh, (2 * q2 + q4) * fw);
                    for r in 0..fh {
                        for cc in 0..fw {
                            fwd.push((r0 + r) * w + c0 + cc);
                        }
                    }
                }
            }
        }
    }
    ScanPermutation::new(fwd, (h, w), kind)
}

/// Fine windows in the loop order `(q1, q3, q2, q4)`: a row-major walk of the
/// 4×4 window grid.
pub fn fine_partition_perm(h: usize, w: usize) -> Result<ScanPermutation> {
    fine_windows(h, w, [0, 2, 1, 3], ScanKind::FineQuad)
}

/// Fine windows in the loop order `(q1, q2, q3, q4)`: each coarse quadrant's
/// four sub-windows form that quadrant's block.
pub fn nested_fine_perm(h: usize, w: usize) -> Result<ScanPermutation> {
    fine_windows(h, w, [0, 1, 2, 3], ScanKind::NestedQuad)
}

/// The exact inverse ordering.
pub fn restore_perm(p: &ScanPermutation) -> ScanPermutation {
    ScanPermutation {
        forward: Arc::clone(&p.inverse),
        inverse: Arc::clone(&p.forward),
        grid: p.grid,
        kind: p.kind,
        inverted: !p.inverted,
    }
}

pub fn build_perm(h: usize, w: usize, kind: ScanKind) -> Result<ScanPermutation> {
    match kind {
        ScanKind::Raster => Ok(raster_perm(h, w)),
        ScanKind::CoarseQuad => coarse_partition_perm(h, w),
        ScanKind::FineQuad => fine_partition_perm(h, w),
        ScanKind::NestedQuad => nested_fine_perm(h, w),
        ScanKind::Composed => Err(invalid("composed orderings are not cached")),
    }
}

/// Raster position → coarse quadrant index (row-major over the 2×2 grid).
pub fn quadrant_index_map(h: usize, w: usize) -> Result<Arc<[usize]>> {
    require_divisible(h, w, 2, "quadrant map")?;
    let (wh, ww) = (h / 2, w / 2);
    Ok((0..h * w).map(|p| (p / w / wh) * 2 + (p % w) / ww).collect())
}

/// Token mask in raster layout carrying `m[q]` at every position of quadrant `q`.
pub fn expand_quadrant_mask<T: Copy>(m: &[T; 4], h: usize, w: usize) -> Result<Vec<T>> {
    Ok(quadrant_index_map(h, w)?.iter().map(|&q| m[q]).collect())
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Broadcasts a `[4]` quadrant vector to a `[H·W]` raster mask.
    pub fn expand_quadrants(self, h: usize, w: usize) -> Result<Var<'t, T>> {
        if self.shape() != [4] {
            return Err(Error::Shape {
                op: "expand_quadrants",
                lhs: self.shape(),
                rhs: vec![4],
            });
        }
        let idx = quadrant_index_map(h, w)?;
        self.reshape(&[4, 1])?.gather_rows(&idx)?.reshape(&[h * w])
    }

    /// `out[i] = x[p.forward[i]]` for `x[L, D]`.
    pub fn gather_sequence(self, p: &ScanPermutation) -> Result<Var<'t, T>> {
        let s = self.shape();
        if s.len() != 2 || s[0] != p.len() {
            return Err(Error::Shape {
                op: "gather_sequence",
                lhs: s,
                rhs: vec![p.len()],
            });
        }
        self.gather_rows(p.forward())
    }
}

type CacheKey = (usize, usize, ScanKind);

/// Orderings built once per `(H, W, kind)` and shared read-only.
#[derive(Debug, Default)]
pub struct PermCache {
    map: RwLock<HashMap<CacheKey, Arc<ScanPermutation>>>,
    fault: AtomicBool,
}

impl PermCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// A cache whose entries are built with two forward slots swapped and a
    /// stale inverse. Used to check that the self-test catches it.
    pub fn with_injected_fault() -> Self {
        let c = Self::default();
        c.fault.store(true, Ordering::Relaxed);
        c
    }

    pub fn get(&self, h: usize, w: usize, kind: ScanKind) -> Result<Arc<ScanPermutation>> {
        let key = (h, w, kind);
        if let Some(p) = self.map.read().expect("perm cache poisoned").get(&key) {
            return Ok(Arc::clone(p));
        }
        let mut p = build_perm(h, w, kind)?;
        if self.fault.load(Ordering::Relaxed) && p.len() >= 2 {
            let mut f = p.forward.to_vec();
            f.swap(0, 1);
            p.forward = f.into();
        }
        let mut map = self.map.write().expect("perm cache poisoned");
        // another thread may have won the race; keep the first entry
        Ok(Arc::clone(map.entry(key).or_insert_with(|| Arc::new(p))))
    }

    pub fn len(&self) -> usize {
        self.map.read().expect("perm cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Process-wide cache used by the model blocks.
pub fn global_cache() -> &'static PermCache {
    static CACHE: OnceLock<PermCache> = OnceLock::new();
    CACHE.get_or_init(PermCache::new)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{Tape, Tensor};

    #[test]
    fn coarse_golden_4x4() {
        let p = coarse_partition_perm(4, 4).unwrap();
        assert_eq!(&*p.forward, &[0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15]);
        assert!(p.is_consistent());
    }

    #[test]
    fn fine_4x4_is_raster_and_nested_4x4_is_coarse() {
        assert_eq!(&*fine_partition_perm(4, 4).unwrap().forward, &*raster_perm(4, 4).forward);
        assert_eq!(
            &*nested_fine_perm(4, 4).unwrap().forward,
            &*coarse_partition_perm(4, 4).unwrap().forward
        );
    }

    #[test]
    fn fine_8x8_first_quarter_is_two_rows() {
        let p = fine_partition_perm(8, 8).unwrap();
        assert_eq!(&p.forward[..16], &[0, 1, 8, 9, 2, 3, 10, 11, 4, 5, 12, 13, 6, 7, 14, 15]);
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(coarse_partition_perm(3, 4).is_err());
        assert!(fine_partition_perm(6, 8).is_err());
        assert!(nested_fine_perm(8, 0).is_err());
        assert!(ScanPermutation::new(vec![0, 0], (1, 2), ScanKind::Composed).is_err());
        assert!(ScanPermutation::new(vec![0], (1, 2), ScanKind::Composed).is_err());
    }

    #[test]
    fn restore_is_an_involution() {
        let p = fine_partition_perm(8, 12).unwrap();
        let r = restore_perm(&p);
        assert!(r.is_restoration());
        assert_eq!(restore_perm(&r), p);
        assert_eq!(r.compose(&p).unwrap().forward, raster_perm(8, 12).forward);
    }

    #[test]
    fn mask_expansion_counts() {
        let m = expand_quadrant_mask(&[1.0, 0.0, 0.0, 0.0], 4, 4).unwrap();
        let ones: Vec<usize> = (0..16).filter(|&i| m[i] == 1.0).collect();
        assert_eq!(ones, vec![0, 1, 4, 5]);
        let m = expand_quadrant_mask(&[0.25, 1.0, 0.0, 0.5], 6, 8).unwrap();
        let s: f64 = m.iter().sum();
        assert!((s - 12.0 * 1.75).abs() < 1e-12);
    }

    #[test]
    fn expansion_gradient_sums_each_quadrant() {
        let tape = Tape::<f64>::new();
        let m = tape.leaf(&Tensor::from_f64(&[4], &[1.0, 0.0, 0.0, 0.0]).unwrap());
        let w: Vec<f64> = (0..16).map(f64::from).collect();
        let loss = m.expand_quadrants(4, 4).unwrap().dot_const(&w).unwrap();
        let g = tape.backward(loss).unwrap().wrt(m);
        assert_eq!(g.data(), &[10.0, 18.0, 42.0, 50.0]);
    }

    #[test]
    fn cache_shares_entries_and_fault_breaks_consistency() {
        let c = PermCache::new();
        let a = c.get(8, 8, ScanKind::CoarseQuad).unwrap();
        let b = c.get(8, 8, ScanKind::CoarseQuad).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        assert_eq!(c.len(), 1);
        let bad = PermCache::with_injected_fault().get(8, 8, ScanKind::CoarseQuad).unwrap();
        assert!(!bad.is_consistent());
    }

    #[test]
    fn kind_names_round_trip() {
        for k in [ScanKind::Raster, ScanKind::CoarseQuad, ScanKind::FineQuad, ScanKind::NestedQuad] {
            assert_eq!(k.to_string().parse::<ScanKind>().unwrap(), k);
        }
        assert!("diagonal".parse::<ScanKind>().is_err());
    }
}
