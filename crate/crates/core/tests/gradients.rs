//! Tape gradients of whole blocks and models against central differences.

use quadscan::backbone::{build_variant, VariantConfig};
use quadscan::block::{Block, BlockConfig, Mode, RunCtx, ShiftDirection};
use quadscan::gradcheck::check_coords;
use quadscan::gumbel::SelectMode;
use quadscan::params::{Bound, ParamStore};
use quadscan::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// A few coordinates of a tensor with `n` entries, first and last included.
fn sample_coords(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut c = vec![0, n - 1];
    c.extend((0..k.saturating_sub(2)).map(|_| rng.gen_range(0..n)));
    c.sort_unstable();
    c.dedup();
    c
}

fn micro_block(shift: Option<ShiftDirection>) -> (Block, ParamStore<f64>) {
    let cfg = VariantConfig::micro();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let bc = BlockConfig {
        expansion_ratio: cfg.expansion_ratio,
        d_state: cfg.d_state,
        shift,
        ..BlockConfig::quadvss(cfg.channels)
    };
    let b = Block::new(&mut store, "b", 0, bc, &mut rng).unwrap();
    (b, store)
}

#[test]
fn quadvss_block_gradients_match_differences() {
    for (shift, quadrant) in [(None, Some(2)), (Some(ShiftDirection::DownRight), Some(1)), (None, None)] {
        let (block, store) = micro_block(shift);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::randn(&[8, 8, block.cfg.dim], 1.0, &mut rng);
        let probe: Vec<f64> = (0..x.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut inputs = vec![x];
        inputs.extend(store.tensors().iter().cloned());
        let coords: Vec<Vec<usize>> = inputs.iter().map(|t| sample_coords(t.numel(), 4, &mut rng)).collect();
        let err = check_coords(&inputs, &coords, STEP, |_, vars| {
            let p = Bound::from_vars(vars[1..].to_vec());
            let mut ctx = RunCtx::new(Mode::Eval, 0);
            ctx.select_override = Some(SelectMode::Forced { quadrant });
            block.forward(&p, vars[0], &mut ctx)?.dot_const(&probe)
        })
        .unwrap();
        assert!(err.passes(TOL), "{shift:?} {quadrant:?}: {err:?}");
    }
}

#[test]
fn vss_block_gradients_match_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut store = ParamStore::new();
    let bc = BlockConfig {
        d_state: 4,
        ..BlockConfig::vss(8)
    };
    let block = Block::new(&mut store, "v", 0, bc, &mut rng).unwrap();
    let x = Tensor::randn(&[3, 5, 8], 1.0, &mut rng);
    let probe: Vec<f64> = (0..x.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut inputs = vec![x];
    inputs.extend(store.tensors().iter().cloned());
    let coords: Vec<Vec<usize>> = inputs.iter().map(|t| sample_coords(t.numel(), 4, &mut rng)).collect();
    let err = check_coords(&inputs, &coords, STEP, |_, vars| {
        let p = Bound::from_vars(vars[1..].to_vec());
        block.forward(&p, vars[0], &mut RunCtx::eval())?.dot_const(&probe)
    })
    .unwrap();
    assert!(err.passes(TOL), "{err:?}");
}

#[test]
fn classifier_loss_gradient_wrt_stem_weights() {
    let model = build_variant::<f64>(&VariantConfig::micro(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let image = Tensor::randn(&[32, 32, 3], 1.0, &mut rng);
    let stem = model.params.find("stem.0.weight").unwrap().0;
    let n = model.params.get(model.params.find("stem.0.weight").unwrap()).numel();
    let picks: Vec<usize> = (0..5).map(|_| rng.gen_range(0..n)).collect();
    let mut inputs = vec![image];
    inputs.extend(model.params.tensors().iter().cloned());
    let mut coords = vec![Vec::new(); inputs.len()];
    coords[1 + stem] = picks;
    let err = check_coords(&inputs, &coords, STEP, |_, vars| {
        let p = Bound::from_vars(vars[1..].to_vec());
        let out = model.arch.forward(&p, vars[0], &mut RunCtx::eval())?;
        out.logits.cross_entropy(1)
    })
    .unwrap();
    assert_eq!(err.checked, 5);
    assert!(err.passes(TOL), "{err:?}");
}

#[test]
fn every_parameter_receives_gradient_in_training() {
    // 64x64 input keeps every QuadVSS grid large enough that no quadrant
    // mask is a no-op.
    let cfg = VariantConfig {
        drop_path: 0.0,
        ..VariantConfig::micro()
    };
    let model = build_variant::<f64>(&cfg, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let image = Tensor::randn(&[64, 64, 3], 1.0, &mut rng);
    let tape = Tape::new();
    let p = model.params.bind(&tape);
    let mut ctx = RunCtx::new(Mode::Train, 3);
    let loss = model.arch.forward(&p, tape.constant(&image), &mut ctx).unwrap().logits.cross_entropy(0).unwrap();
    let grads = tape.backward(loss).unwrap();
    let g = p.grads(&grads);
    let dead: Vec<&str> = model
        .params
        .iter()
        .zip(&g)
        .filter(|(_, gv)| gv.iter().all(|v| *v == 0.0))
        .map(|((_, name, _), _)| name)
        .collect();
    assert!(dead.is_empty(), "no gradient reaches {dead:?}");
}
