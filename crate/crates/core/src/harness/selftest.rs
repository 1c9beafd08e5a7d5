//! Invariant suites run by `quadscan selftest`, one per module.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::{attention_reference_flops, build_variant, VariantConfig};
use crate::block::{Block, BlockConfig, RunCtx};
use crate::gradcheck;
use crate::gumbel::{build_sequence, restore_sequence, QuadrantMask};
use crate::harness::data::{gen_synthetic, Pgm};
use crate::params::ParamStore;
use crate::predictor::PartitionPredictor;
use crate::quadtree::{restore_perm, PermCache, ScanKind};
use crate::ssm::{causal_convolve, ssm_conv_kernel, ssm_recurrence, zoh_discretize, SsmContinuous};
use crate::ssm::{parallel_scan_inputs, SelectiveScanInputs};
use crate::{checkpoint, Tape, Tensor};

#[derive(Debug, Clone, Default)]
pub struct SelftestOptions {
    /// Check orderings from a cache that corrupts every entry.
    pub inject_perm_fault: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: usize,
    pub total: usize,
    pub failures: Vec<String>,
    pub seconds: f64,
}

impl SuiteResult {
    pub fn ok(&self) -> bool {
        self.passed == self.total
    }
}

type Check<'a> = (&'static str, Box<dyn Fn() -> Result<(), String> + 'a>);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn run_suite(name: &'static str, checks: Vec<Check<'_>>) -> SuiteResult {
    let t = Instant::now();
    let total = checks.len();
    let failures: Vec<String> = checks
        .into_iter()
        .filter_map(|(label, f)| {
            let r = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f))
                .unwrap_or_else(|_| Err("panicked".into()));
            r.err().map(|e| format!("{label}: {e}"))
        })
        .collect();
    SuiteResult {
        name,
        passed: total - failures.len(),
        total,
        failures,
        seconds: t.elapsed().as_secs_f64(),
    }
}

fn e2s(e: crate::Error) -> String {
    e.to_string()
}

/// Row-major order of a `[d0, d1, …]` view read back in `axes` order.
fn view_permute_order(dims: &[usize], axes: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; dims.len()];
    for i in (0..dims.len() - 1).rev() {
        strides[i] = strides[i + 1] * dims[i + 1];
    }
    let out_dims: Vec<usize> = axes.iter().map(|&a| dims[a]).collect();
    let n: usize = dims.iter().product();
    (0..n)
        .map(|mut flat| {
            let mut src = 0;
            for k in (0..axes.len()).rev() {
                src += (flat % out_dims[k]) * strides[axes[k]];
                flat /= out_dims[k];
            }
            src
        })
        .collect()
}

fn tensor_suite() -> Vec<Check<'static>> {
    vec![
        (
            "primitive gradients",
            Box::new(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(1);
                let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
                let w = Tensor::randn(&[4, 2], 1.0, &mut rng);
                let e = gradcheck::check(&[x, w], 1e-5, |_, v| {
                    Ok(v[0].linear(v[1], None)?.gelu().silu().softmax(1)?.exp().sum())
                })
                .map_err(e2s)?;
                ensure(e.passes(1e-6), || format!("{e:?}"))
            }),
        ),
        (
            "QTEN round trip",
            Box::new(|| {
                let t = Tensor::<f32>::from_f64(&[2, 3], &[1.0, -2.5, 3.25, 0.0, 1e-3, 7.0]).map_err(e2s)?;
                let mut buf = Vec::new();
                t.write_qten(&mut buf).map_err(e2s)?;
                let back = Tensor::<f32>::read_qten(buf.as_slice()).map_err(e2s)?;
                ensure(back == t, || "record changed".into())
            }),
        ),
    ]
}

fn ssm_suite() -> Vec<Check<'static>> {
    vec![
        (
            "recurrence equals convolution",
            Box::new(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(2);
                for _ in 0..20 {
                    let n = rng.gen_range(1..=16);
                    let len = rng.gen_range(1..=64);
                    let a = (0..n).map(|_| -rng.gen_range(0.05..3.0)).collect();
                    let b = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    let c = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    let ssm = SsmContinuous::<f64>::from_diag(a, b, c).map_err(e2s)?;
                    let d = zoh_discretize(&ssm, rng.gen_range(0.01..0.5)).map_err(e2s)?;
                    let x: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    let r = ssm_recurrence(&d, &x);
                    let k = causal_convolve(&x, &ssm_conv_kernel(&d, len));
                    let err = r.iter().zip(&k).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                    ensure(err <= 1e-10, || format!("max diff {err:e} at L={len}, N={n}"))?;
                }
                Ok(())
            }),
        ),
        (
            "sequential and parallel scans agree",
            Box::new(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(3);
                for len in [1, 2, 7, 64] {
                    let (d, n) = (3, 4);
                    let mut draw = |k: usize, lo: f64, hi: f64| (0..k).map(|_| rng.gen_range(lo..hi)).collect::<Vec<f64>>();
                    let inp = SelectiveScanInputs {
                        len,
                        channels: d,
                        state: n,
                        u: draw(len * d, -1.0, 1.0),
                        delta: draw(len * d, 0.01, 0.5),
                        a: draw(d * n, -2.0, -0.1),
                        b: draw(len * n, -1.0, 1.0),
                        c: draw(len * n, -1.0, 1.0),
                    };
                    let s = inp.run(false).0;
                    let p = parallel_scan_inputs(&inp);
                    let err = s.iter().zip(&p).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                    ensure(err <= 1e-10, || format!("max diff {err:e} at L={len}"))?;
                }
                Ok(())
            }),
        ),
    ]
}

fn quadtree_suite(cache: &PermCache) -> Vec<Check<'_>> {
    vec![
        (
            "coarse 4x4 golden order",
            Box::new(move || {
                let p = cache.get(4, 4, ScanKind::CoarseQuad).map_err(e2s)?;
                let golden = [0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15];
                ensure(p.forward().as_ref() == golden, || format!("got {:?}", p.forward()))
            }),
        ),
        (
            "orderings match view/permute arithmetic",
            Box::new(move || {
                for h in [4, 8, 12, 16] {
                    for w in [4, 8, 12, 16] {
                        let coarse = view_permute_order(&[2, h / 2, 2, w / 2], &[0, 2, 1, 3]);
                        let fine = view_permute_order(&[2, 2, h / 4, 2, 2, w / 4], &[0, 1, 3, 4, 2, 5]);
                        for (kind, want) in [(ScanKind::CoarseQuad, coarse), (ScanKind::FineQuad, fine)] {
                            let p = cache.get(h, w, kind).map_err(e2s)?;
                            ensure(p.forward().as_ref() == want.as_slice(), || format!("{kind} {h}x{w} differs"))?;
                        }
                    }
                }
                Ok(())
            }),
        ),
        (
            "restorations invert orderings",
            Box::new(move || {
                for h in [4, 8, 12, 16] {
                    for w in [4, 8, 12, 16] {
                        for kind in [ScanKind::CoarseQuad, ScanKind::FineQuad, ScanKind::NestedQuad] {
                            let p = cache.get(h, w, kind).map_err(e2s)?;
                            let x: Vec<usize> = (0..h * w).collect();
                            let seq = p.apply(&x, 1).map_err(e2s)?;
                            let back = restore_perm(&p).apply(&seq, 1).map_err(e2s)?;
                            ensure(back == x && p.is_consistent(), || format!("{kind} {h}x{w} does not round-trip"))?;
                        }
                    }
                }
                Ok(())
            }),
        ),
    ]
}

fn predictor_suite() -> Vec<Check<'static>> {
    vec![(
        "scores are distributions",
        Box::new(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let mut store = ParamStore::<f64>::new();
            let pred = PartitionPredictor::new(&mut store, "p", 8, &mut rng).map_err(e2s)?;
            let tape = Tape::new();
            let p = store.bind(&tape);
            let out = pred.forward(&p, tape.constant(&Tensor::randn(&[8, 8, 8], 1.0, &mut rng))).map_err(e2s)?;
            let s = out.scores.value();
            ensure(s.chunks(2).all(|c| (c[0] + c[1] - 1.0).abs() < 1e-12), || "rows do not sum to one".into())?;
            ensure(out.quadrants.value().iter().all(|q| (0.0..=1.0).contains(q)), || "quadrant score outside [0, 1]".into())
        }),
    )]
}

fn gumbel_suite() -> Vec<Check<'static>> {
    vec![
        (
            "straight-through gradient is the softmax JVP",
            Box::new(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(5);
                for _ in 0..20 {
                    let logits: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
                    let noise: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    let v: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    let tau = 0.7;
                    let tape = Tape::new();
                    let l = tape.leaf(&Tensor::from_f64(&[4], &logits).map_err(e2s)?);
                    let y = l.gumbel_softmax_hard(&noise, tau).map_err(e2s)?.dot_const(&v).map_err(e2s)?;
                    let g = tape.backward(y).map_err(e2s)?.wrt(l);
                    let z: Vec<f64> = logits.iter().zip(&noise).map(|(a, b)| (a + b) / tau).collect();
                    let m = z.iter().cloned().fold(f64::MIN, f64::max);
                    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
                    let s: f64 = e.iter().sum();
                    let p: Vec<f64> = e.iter().map(|v| v / s).collect();
                    let pv: f64 = p.iter().zip(&v).map(|(a, b)| a * b).sum();
                    for i in 0..4 {
                        let want = p[i] * (v[i] - pv) / tau;
                        ensure((g.data()[i] - want).abs() <= 1e-12, || format!("component {i}"))?;
                    }
                }
                Ok(())
            }),
        ),
        (
            "mixed sequence round trip",
            Box::new(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(6);
                let x = Tensor::<f64>::randn(&[8, 8, 4], 1.0, &mut rng);
                for k in 0..4 {
                    let tape = Tape::new();
                    let v = tape.constant(&x);
                    let mask = QuadrantMask::fixed(&tape, k);
                    let seq = build_sequence(v, &mask, 8, 8).map_err(e2s)?;
                    let mut a: Vec<f64> = seq.tokens.value().to_vec();
                    let mut b = x.data().to_vec();
                    a.sort_by(f64::total_cmp);
                    b.sort_by(f64::total_cmp);
                    ensure(a == b, || format!("quadrant {k}: not a permutation"))?;
                    let back = restore_sequence(seq.tokens, &mask, 8, 8).map_err(e2s)?;
                    ensure(back.value().as_slice() == x.data(), || format!("quadrant {k}: restore differs"))?;
                }
                Ok(())
            }),
        ),
    ]
}

fn quadvss_suite() -> Vec<Check<'static>> {
    vec![
        (
            "block preserves shape",
            Box::new(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(7);
                let mut store = ParamStore::<f64>::new();
                let b = Block::new(&mut store, "b", 0, BlockConfig::quadvss(8), &mut rng).map_err(e2s)?;
                let tape = Tape::new();
                let p = store.bind(&tape);
                let y = b
                    .forward(&p, tape.constant(&Tensor::randn(&[6, 10, 8], 1.0, &mut rng)), &mut RunCtx::eval())
                    .map_err(e2s)?;
                ensure(y.shape() == [6, 10, 8], || format!("got {:?}", y.shape()))
            }),
        ),
        (
            "block gradient",
            Box::new(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(8);
                let mut store = ParamStore::<f64>::new();
                let cfg = BlockConfig {
                    expansion_ratio: 1.0,
                    d_state: 2,
                    ..BlockConfig::quadvss(4)
                };
                let b = Block::new(&mut store, "b", 0, cfg, &mut rng).map_err(e2s)?;
                let x = Tensor::randn(&[8, 8, 4], 1.0, &mut rng);
                let coords = vec![(0..x.numel()).step_by(17).collect::<Vec<_>>()];
                let e = gradcheck::check_coords(&[x], &coords, 1e-5, |tape, v| {
                    let p = store.bind(tape);
                    Ok(b.forward(&p, v[0], &mut RunCtx::eval())?.sum())
                })
                .map_err(e2s)?;
                ensure(e.passes(1e-4), || format!("{e:?}"))
            }),
        ),
    ]
}

fn backbone_suite() -> Vec<Check<'static>> {
    vec![
        (
            "micro forward is deterministic",
            Box::new(|| {
                let m = build_variant::<f32>(&VariantConfig::micro(), 9).map_err(e2s)?;
                let img = Tensor::zeros(&[32, 32, 3]);
                let a = m.classify(&img, &mut RunCtx::eval()).map_err(e2s)?;
                let b = m.classify(&img, &mut RunCtx::eval()).map_err(e2s)?;
                ensure(a == b && a.shape() == [4], || "logits differ or have the wrong shape".into())
            }),
        ),
        (
            "attention reference formula",
            Box::new(|| {
                let f = attention_reference_flops(14, 14, 384);
                ensure(f == 145_108_992, || format!("got {f}"))
            }),
        ),
    ]
}

fn harness_suite() -> Vec<Check<'static>> {
    vec![
        (
            "synthetic data is reproducible",
            Box::new(|| {
                let a = gen_synthetic(8, 1).map_err(e2s)?;
                let b = gen_synthetic(8, 1).map_err(e2s)?;
                ensure(a == b && a.iter().all(|s| s.label < 4 && s.informative_quadrant < 4), || "datasets differ".into())
            }),
        ),
        (
            "PGM and checkpoint round trips",
            Box::new(|| {
                let img = Pgm::from_unit(3, 2, &[0.0, 0.2, 0.4, 0.6, 0.8, 1.0]).map_err(e2s)?;
                let mut buf = Vec::new();
                img.write(&mut buf).map_err(e2s)?;
                ensure(Pgm::read(buf.as_slice()).map_err(e2s)? == img, || "PGM changed".into())?;
                let m = build_variant::<f32>(&VariantConfig::micro(), 1).map_err(e2s)?;
                let mut buf = Vec::new();
                checkpoint::write(&m, serde_json::Value::Null, &mut buf).map_err(e2s)?;
                let (back, _) = checkpoint::read::<f32, _>(buf.as_slice()).map_err(e2s)?;
                ensure(back.params == m.params, || "checkpoint changed".into())
            }),
        ),
    ]
}

/// Runs every suite; the overall result is the conjunction of [`SuiteResult::ok`].
pub fn selftest(opts: &SelftestOptions) -> Vec<SuiteResult> {
    let cache = if opts.inject_perm_fault {
        PermCache::with_injected_fault()
    } else {
        PermCache::new()
    };
    vec![
        run_suite("tensor_core", tensor_suite()),
        run_suite("ssm_core", ssm_suite()),
        run_suite("quadtree_scan", quadtree_suite(&cache)),
        run_suite("partition_predictor", predictor_suite()),
        run_suite("gumbel_select", gumbel_suite()),
        run_suite("quadvss", quadvss_suite()),
        run_suite("backbone", backbone_suite()),
        run_suite("harness", harness_suite()),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn view_permute_matches_golden_coarse() {
        assert_eq!(
            view_permute_order(&[2, 2, 2, 2], &[0, 2, 1, 3]),
            vec![0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15]
        );
    }

    #[test]
    fn clean_run_passes_and_fault_names_the_suite() {
        let clean = selftest(&SelftestOptions::default());
        for s in &clean {
            assert!(s.ok(), "{}: {:?}", s.name, s.failures);
        }
        let faulty = selftest(&SelftestOptions { inject_perm_fault: true });
        let failed: Vec<_> = faulty.iter().filter(|s| !s.ok()).map(|s| s.name).collect();
        assert_eq!(failed, vec!["quadtree_scan"]);
    }
}
