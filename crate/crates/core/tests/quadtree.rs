//! Scan orderings against a generic view-and-permute over raster indices.

use quadscan::quadtree::{
    build_perm, coarse_partition_perm, fine_partition_perm, nested_fine_perm, quadrant_index_map, restore_perm,
    PermCache, ScanKind,
};

/// Reshape a raster index space to `dims`, permute axes, flatten. Returns the
/// raster index found at each position of the flattened permuted view.
fn view_permute(dims: &[usize], axes: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; dims.len()];
    for i in (0..dims.len() - 1).rev() {
        strides[i] = strides[i + 1] * dims[i + 1];
    }
    let pd: Vec<usize> = axes.iter().map(|&a| dims[a]).collect();
    let total: usize = dims.iter().product();
    (0..total)
        .map(|mut flat| {
            let mut idx = vec![0; pd.len()];
            for i in (0..pd.len()).rev() {
                idx[i] = flat % pd[i];
                flat /= pd[i];
            }
            idx.iter().zip(axes).map(|(&v, &a)| v * strides[a]).sum()
        })
        .collect()
}

fn coarse_oracle(h: usize, w: usize) -> Vec<usize> {
    view_permute(&[2, h / 2, 2, w / 2], &[0, 2, 1, 3])
}

fn fine_oracle(h: usize, w: usize) -> Vec<usize> {
    view_permute(&[2, 2, h / 4, 2, 2, w / 4], &[0, 1, 3, 4, 2, 5])
}

fn nested_oracle(h: usize, w: usize) -> Vec<usize> {
    view_permute(&[2, 2, h / 4, 2, 2, w / 4], &[0, 3, 1, 4, 2, 5])
}

const SIDES: [usize; 4] = [4, 8, 12, 16];

#[test]
fn coarse_golden_four_by_four() {
    let p = coarse_partition_perm(4, 4).unwrap();
    assert_eq!(p.forward().to_vec(), [0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15]);
}

#[test]
fn orderings_match_view_permute() {
    for h in SIDES {
        for w in SIDES {
            assert_eq!(coarse_partition_perm(h, w).unwrap().forward().to_vec(), coarse_oracle(h, w), "coarse {h}x{w}");
            assert_eq!(fine_partition_perm(h, w).unwrap().forward().to_vec(), fine_oracle(h, w), "fine {h}x{w}");
            assert_eq!(nested_fine_perm(h, w).unwrap().forward().to_vec(), nested_oracle(h, w), "nested {h}x{w}");
        }
    }
}

#[test]
fn restore_inverts_every_ordering() {
    for h in SIDES {
        for w in [4, 8, 12, 16, 20] {
            for kind in [ScanKind::Raster, ScanKind::CoarseQuad, ScanKind::FineQuad, ScanKind::NestedQuad] {
                let p = build_perm(h, w, kind).unwrap();
                let r = restore_perm(&p);
                let x: Vec<u32> = (0..(h * w) as u32).map(|v| v * 7 + 3).collect();
                let seq = p.apply(&x, 1).unwrap();
                assert_eq!(r.apply(&seq, 1).unwrap(), x, "{kind} {h}x{w}");
                let fwd = p.forward();
                let inv = p.inverse();
                assert!((0..h * w).all(|i| inv[fwd[i]] == i && fwd[inv[i]] == i));
            }
        }
    }
}

#[test]
fn apply_gathers_multichannel_rows() {
    let p = coarse_partition_perm(4, 8).unwrap();
    let x: Vec<i32> = (0..32 * 3).collect();
    let seq = p.apply(&x, 3).unwrap();
    for (t, &src) in p.forward().iter().enumerate() {
        assert_eq!(&seq[t * 3..t * 3 + 3], &x[src * 3..src * 3 + 3]);
    }
}

#[test]
fn nested_keeps_each_quadrant_in_its_coarse_block() {
    for h in SIDES {
        for w in SIDES {
            let q = quadrant_index_map(h, w).unwrap();
            let block = h * w / 4;
            let coarse = coarse_partition_perm(h, w).unwrap();
            let nested = nested_fine_perm(h, w).unwrap();
            for t in 0..h * w {
                assert_eq!(q[coarse.forward()[t]], t / block);
                assert_eq!(q[nested.forward()[t]], t / block);
            }
        }
    }
}

#[test]
fn row_major_fine_order_mixes_quadrants_within_a_block() {
    // The first quarter of the row-major window walk is the top band of the
    // grid, which spans quadrants 0 and 1.
    let p = fine_partition_perm(4, 4).unwrap();
    let q = quadrant_index_map(4, 4).unwrap();
    let first: Vec<usize> = p.forward()[..4].iter().map(|&i| q[i]).collect();
    assert_eq!(first, vec![0, 0, 1, 1]);
    assert_eq!(&p.forward()[..4], &[0, 1, 2, 3]);
}

#[test]
fn odd_or_indivisible_grids_are_rejected() {
    assert!(coarse_partition_perm(3, 4).is_err());
    assert!(fine_partition_perm(6, 8).is_err());
    assert!(nested_fine_perm(8, 6).is_err());
    assert!(coarse_partition_perm(6, 2).is_ok());
}

#[test]
fn injected_fault_is_visible_to_an_oracle() {
    let cache = PermCache::with_injected_fault();
    let p = cache.get(4, 4, ScanKind::CoarseQuad).unwrap();
    assert_ne!(p.forward().to_vec(), coarse_oracle(4, 4));
    let clean = PermCache::new().get(4, 4, ScanKind::CoarseQuad).unwrap();
    assert_eq!(clean.forward().to_vec(), coarse_oracle(4, 4));
}
