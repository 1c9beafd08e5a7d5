//! QuadVSS and VSS blocks.
//!
//! Both blocks are
//!
//! ```text
//! x ← x + DropPath(LN(token_op(x)))
//! x ← x + DropPath(LN(FFN(x)))
//! ```
//!
//! with the norm applied to each branch output. The token operator projects
//! to `hidden` channels, orders the tokens into a sequence, runs a causal
//! depthwise convolution, SiLU and a selective scan, undoes the ordering and
//! projects back. The QuadVSS variant optionally rolls the grid first and
//! picks its ordering from the partition predictor; the VSS variant scans in
//! raster order.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{invalid, Result};
use crate::gumbel::{build_sequence, restore_sequence, sample_gumbel, select_quadrant, SelectMode};
use crate::params::{fan_in_uniform, Bound, LayerNorm, Linear, ParamId, ParamStore};
use crate::predictor::PartitionPredictor;
use crate::scalar::Scalar;
use crate::ssm::selective::{auto_dt_rank, dt_bias_init, s4d_real_log_a, selective_scan_var};
use crate::tensor::Tensor;

/// Cyclic roll `out[i][j] = x[(i − dy) mod H][(j − dx) mod W]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub dy: isize,
    pub dx: isize,
}

impl ShiftSpec {
    pub const NONE: ShiftSpec = ShiftSpec { dy: 0, dx: 0 };

    pub fn inverse(self) -> ShiftSpec {
        ShiftSpec {
            dy: -self.dy,
            dx: -self.dx,
        }
    }

    pub fn is_identity(self) -> bool {
        self.dy == 0 && self.dx == 0
    }

    /// Source raster index for every output position.
    pub fn source_index(self, h: usize, w: usize) -> Result<Arc<[usize]>> {
        if self.dy.unsigned_abs() >= h.max(1) || self.dx.unsigned_abs() >= w.max(1) {
            return Err(invalid(format!(
                "shift ({}, {}) out of range for {h}x{w}",
                self.dy, self.dx
            )));
        }
        let (hi, wi) = (h as isize, w as isize);
        Ok((0..h * w)
            .map(|p| {
                let (r, c) = ((p / w) as isize, (p % w) as isize);
                let sr = (r - self.dy).rem_euclid(hi);
                let sc = (c - self.dx).rem_euclid(wi);
                (sr * wi + sc) as usize
            })
            .collect())
    }
}

/// Which way a block rolls its grid; the magnitude is `(⌊H/8⌋, ⌊W/8⌋)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftDirection {
    DownRight,
    UpLeft,
}

impl ShiftDirection {
    pub fn for_grid(self, h: usize, w: usize) -> ShiftSpec {
        let (dy, dx) = ((h / 8) as isize, (w / 8) as isize);
        match self {
            ShiftDirection::DownRight => ShiftSpec { dy, dx },
            ShiftDirection::UpLeft => ShiftSpec { dy: -dy, dx: -dx },
        }
    }
}

/// Rolls `x[H, W, D]` by `s`.
pub fn omnidirectional_shift<'t, T: Scalar>(x: Var<'t, T>, s: ShiftSpec) -> Result<Var<'t, T>> {
    let sh = x.shape();
    if sh.len() != 3 {
        return Err(invalid(format!("shift expects [H, W, D], got {sh:?}")));
    }
    let idx = s.source_index(sh[0], sh[1])?;
    if s.is_identity() {
        return Ok(x);
    }
    x.reshape(&[sh[0] * sh[1], sh[2]])?.gather_rows(&idx)?.reshape(&sh)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub dim: usize,
    pub expansion_ratio: f64,
    pub mlp_ratio: f64,
    pub d_state: usize,
    /// `None` picks `⌈hidden / 16⌉`.
    pub dt_rank: Option<usize>,
    pub conv_width: usize,
    pub drop_path: f64,
    pub uses_quad_scan: bool,
    pub shift: Option<ShiftDirection>,
}

impl BlockConfig {
    pub fn quadvss(dim: usize) -> Self {
        Self {
            dim,
            expansion_ratio: 8.0 / 3.0,
            mlp_ratio: 4.0,
            d_state: 16,
            dt_rank: None,
            conv_width: 3,
            drop_path: 0.0,
            uses_quad_scan: true,
            shift: None,
        }
    }

    pub fn vss(dim: usize) -> Self {
        Self {
            uses_quad_scan: false,
            ..Self::quadvss(dim)
        }
    }

    /// `⌊expansion_ratio · dim⌋`
    pub fn hidden(&self) -> usize {
        (self.expansion_ratio * self.dim as f64 + 1e-9).floor() as usize
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.mlp_ratio * self.dim as f64 + 1e-9).floor() as usize
    }

    pub fn resolved_dt_rank(&self) -> usize {
        self.dt_rank.unwrap_or_else(|| auto_dt_rank(self.hidden()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.hidden() == 0 || self.mlp_hidden() == 0 {
            return Err(invalid(format!("block widths must be positive: {self:?}")));
        }
        if self.uses_quad_scan && !self.dim.is_multiple_of(2) {
            return Err(invalid(format!("QuadVSS width must be even, got {}", self.dim)));
        }
        if !(0.0..=1.0).contains(&self.drop_path) {
            return Err(invalid(format!("drop-path rate {} outside [0, 1]", self.drop_path)));
        }
        if self.d_state == 0 || self.conv_width == 0 || self.resolved_dt_rank() == 0 {
            return Err(invalid("state size, conv width and dt rank must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// What a QuadVSS block chose for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockDecision {
    pub block: usize,
    pub selected: Option<usize>,
    pub quadrant_scores: [f64; 4],
    /// Channel-0 scores on the (padded) grid, raster order.
    pub score_map: Vec<f64>,
    pub grid: (usize, usize),
}

/// Per-sample forward state: mode, randomness and the decision log.
#[derive(Debug, Clone)]
pub struct RunCtx {
    pub mode: Mode,
    pub tau: f64,
    /// Replaces the predictor's choice in every QuadVSS block.
    pub select_override: Option<SelectMode>,
    pub decisions: Vec<BlockDecision>,
    rng: ChaCha8Rng,
}

impl RunCtx {
    pub fn new(mode: Mode, seed: u64) -> Self {
        Self {
            mode,
            tau: 1.0,
            select_override: None,
            decisions: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn eval() -> Self {
        Self::new(Mode::Eval, 0)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    fn select_mode(&self) -> SelectMode {
        self.select_override.unwrap_or(match self.mode {
            Mode::Train => SelectMode::Train { tau: self.tau },
            Mode::Eval => SelectMode::Eval,
        })
    }
}

/// Per-sample stochastic depth: in training the branch is dropped with
/// probability `rate` and otherwise scaled by `1 / (1 − rate)`.
pub fn drop_path<'t, T: Scalar>(branch: Var<'t, T>, rate: f64, ctx: &mut RunCtx) -> Var<'t, T> {
    if ctx.mode == Mode::Eval || rate <= 0.0 {
        return branch;
    }
    if rate >= 1.0 || ctx.rng.gen::<f64>() < rate {
        branch.scale(T::zero())
    } else {
        branch.scale(T::lit(1.0 / (1.0 - rate)))
    }
}

/// Rates growing linearly from 0 to `max_rate` over `n` blocks.
pub fn drop_path_schedule(max_rate: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n).map(|i| max_rate * i as f64 / (n - 1) as f64).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenOp {
    pub predictor: Option<PartitionPredictor>,
    pub in_proj: Linear,
    pub conv_weight: ParamId,
    pub conv_bias: ParamId,
    /// Selective-scan parameters in `SelectiveSsmParams::tensors` order.
    pub ssm: [ParamId; 6],
    pub out_proj: Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub cfg: BlockConfig,
    /// Position among all blocks of the model.
    pub index: usize,
    pub token: TokenOp,
    pub norm1: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub norm2: LayerNorm,
}

fn round_up4(v: usize) -> usize {
    v.div_ceil(4) * 4
}

impl Block {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        index: usize,
        cfg: BlockConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let (d, hid, n, r) = (cfg.dim, cfg.hidden(), cfg.d_state, cfg.resolved_dt_rank());
        let predictor = if cfg.uses_quad_scan {
            Some(PartitionPredictor::new(store, &format!("{name}.predictor"), d, rng)?)
        } else {
            None
        };
        let in_proj = Linear::new(store, &format!("{name}.in_proj"), d, hid, true, rng);
        let conv_weight = store.add(
            format!("{name}.conv.weight"),
            fan_in_uniform(&[cfg.conv_width, hid], cfg.conv_width, rng),
        );
        let conv_bias = store.add(format!("{name}.conv.bias"), fan_in_uniform(&[hid], cfg.conv_width, rng));
        let s = 1.0 / (hid as f64).sqrt();
        let ssm = [
            store.add(format!("{name}.ssm.log_a"), s4d_real_log_a(hid, n)),
            store.add(format!("{name}.ssm.dt_down"), Tensor::randn(&[hid, r], s, rng)),
            store.add(format!("{name}.ssm.dt_up"), Tensor::randn(&[r, hid], 1.0 / (r as f64).sqrt(), rng)),
            store.add(format!("{name}.ssm.dt_bias"), dt_bias_init(hid, rng)),
            store.add(format!("{name}.ssm.b_proj"), Tensor::randn(&[hid, n], s, rng)),
            store.add(format!("{name}.ssm.c_proj"), Tensor::randn(&[hid, n], s, rng)),
        ];
        let out_proj = Linear::new(store, &format!("{name}.out_proj"), hid, d, true, rng);
        let norm1 = LayerNorm::new(store, &format!("{name}.norm1"), d);
        let fc1 = Linear::new(store, &format!("{name}.mlp.fc1"), d, cfg.mlp_hidden(), true, rng);
        let fc2 = Linear::new(store, &format!("{name}.mlp.fc2"), cfg.mlp_hidden(), d, true, rng);
        let norm2 = LayerNorm::new(store, &format!("{name}.norm2"), d);
        Ok(Self {
            cfg,
            index,
            token: TokenOp {
                predictor,
                in_proj,
                conv_weight,
                conv_bias,
                ssm,
                out_proj,
            },
            norm1,
            fc1,
            fc2,
            norm2,
        })
    }

    /// Token operator on `x[H, W, D]`; output has the same shape.
    pub fn token_operator<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>, ctx: &mut RunCtx) -> Result<Var<'t, T>> {
        let sh = x.shape();
        if sh.len() != 3 || sh[2] != self.cfg.dim {
            return Err(invalid(format!("block {} expects [H, W, {}], got {sh:?}", self.index, self.cfg.dim)));
        }
        let (h, w) = (sh[0], sh[1]);
        let shift = match self.cfg.shift {
            Some(dir) if self.cfg.uses_quad_scan => dir.for_grid(h, w),
            _ => ShiftSpec::NONE,
        };
        let x = omnidirectional_shift(x, shift)?;
        let tk = &self.token;
        let hid = self.cfg.hidden();

        let y = match tk.predictor {
            Some(pred) => {
                let (hp, wp) = (round_up4(h), round_up4(w));
                let xp = x.pad_grid(hp, wp)?;
                let out = pred.forward(p, xp)?;
                let mode = ctx.select_mode();
                let noise = match mode {
                    SelectMode::Train { .. } => sample_gumbel(ctx.rng(), 4),
                    _ => Vec::new(),
                };
                let mask = select_quadrant(out.quadrants, mode, &noise)?;
                let q = out.quadrants.value();
                ctx.decisions.push(BlockDecision {
                    block: self.index,
                    selected: mask.selected,
                    quadrant_scores: [0, 1, 2, 3].map(|i| q[i].as_f64()),
                    score_map: out.scores.value().iter().step_by(2).map(|v| v.as_f64()).collect(),
                    grid: (hp, wp),
                });
                let u = tk.in_proj.forward(p, xp)?;
                let seq = build_sequence(u, &mask, hp, wp)?.tokens;
                let s = self.mix(p, seq)?;
                let back = restore_sequence(s, &mask, hp, wp)?;
                tk.out_proj.forward(p, back)?.crop_grid(h, w)?
            }
            None => {
                let u = tk.in_proj.forward(p, x)?.reshape(&[h * w, hid])?;
                let s = self.mix(p, u)?;
                tk.out_proj.forward(p, s.reshape(&[h, w, hid])?)?
            }
        };
        omnidirectional_shift(y, shift.inverse())
    }

    /// Convolution, SiLU and selective scan over a `[L, hidden]` sequence.
    fn mix<'t, T: Scalar>(&self, p: &Bound<'t, T>, seq: Var<'t, T>) -> Result<Var<'t, T>> {
        let tk = &self.token;
        let v = seq
            .causal_depthwise_conv1d(p[tk.conv_weight], Some(p[tk.conv_bias]))?
            .silu();
        let ssm = tk.ssm.map(|id| p[id]);
        selective_scan_var(v, &ssm)
    }

    pub fn ffn<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        self.fc2.forward(p, self.fc1.forward(p, x)?.gelu())
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>, ctx: &mut RunCtx) -> Result<Var<'t, T>> {
        let t = self.norm1.forward(p, self.token_operator(p, x, ctx)?)?;
        let x = x.add(drop_path(t, self.cfg.drop_path, ctx))?;
        let f = self.norm2.forward(p, self.ffn(p, x)?)?;
        x.add(drop_path(f, self.cfg.drop_path, ctx))
    }

    /// Multiply-accumulates of one forward pass on an `h × w` grid.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let c = &self.cfg;
        let (hs, ws) = if c.uses_quad_scan { (round_up4(h), round_up4(w)) } else { (h, w) };
        let l = (hs * ws) as u64;
        let (hid, n, r) = (c.hidden() as u64, c.d_state as u64, c.resolved_dt_rank() as u64);
        let predictor = self.token.predictor.map_or(0, |pr| pr.macs(hs, ws));
        let projections = self.token.in_proj.macs(hs * ws) + self.token.out_proj.macs(hs * ws);
        let conv = l * hid * c.conv_width as u64;
        let x_proj = l * hid * (2 * r + 2 * n);
        let scan = l * hid * n * 3;
        let ffn = self.fc1.macs(h * w) + self.fc2.macs(h * w);
        predictor + projections + conv + x_proj + scan + ffn
    }

    /// MACs of the token operator alone.
    pub fn token_macs(&self, h: usize, w: usize) -> u64 {
        self.macs(h, w) - self.fc1.macs(h * w) - self.fc2.macs(h * w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{gradcheck, Tape};

    fn grid(h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_f64(&[h, w, 1], &(0..h * w).map(|v| v as f64).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn shift_2x2_and_inverse() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(&grid(2, 2));
        let s = ShiftSpec { dy: 1, dx: 1 };
        let y = omnidirectional_shift(x, s).unwrap();
        assert_eq!(y.value().as_slice(), &[3.0, 2.0, 1.0, 0.0]);
        let back = omnidirectional_shift(y, s.inverse()).unwrap();
        assert_eq!(back.value().as_slice(), x.value().as_slice());
        assert!(omnidirectional_shift(x, ShiftSpec { dy: 2, dx: 0 }).is_err());
    }

    #[test]
    fn shift_magnitudes() {
        assert_eq!(ShiftDirection::DownRight.for_grid(56, 16), ShiftSpec { dy: 7, dx: 2 });
        assert_eq!(ShiftDirection::UpLeft.for_grid(8, 8), ShiftSpec { dy: -1, dx: -1 });
        assert!(ShiftDirection::UpLeft.for_grid(4, 4).is_identity());
    }

    #[test]
    fn hidden_width_floors() {
        let c = BlockConfig::quadvss(48);
        assert_eq!(c.hidden(), 128);
        assert_eq!(c.resolved_dt_rank(), 8);
        assert_eq!(BlockConfig { expansion_ratio: 1.0, ..c }.hidden(), 48);
        assert!(BlockConfig::quadvss(5).validate().is_err());
    }

    #[test]
    fn drop_path_schedule_is_linear() {
        assert_eq!(drop_path_schedule(0.2, 3), vec![0.0, 0.1, 0.2]);
        assert_eq!(drop_path_schedule(0.2, 1), vec![0.0]);
    }

    #[test]
    fn vss_block_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let cfg = BlockConfig { expansion_ratio: 1.0, d_state: 4, ..BlockConfig::vss(4) };
        let block = Block::new(&mut store, "b", 0, cfg, &mut rng).unwrap();
        let x = Tensor::randn(&[3, 3, 4], 1.0, &mut rng);
        let wgt = Tensor::<f64>::randn(&[3, 3, 4], 1.0, &mut rng);
        let mut inputs = vec![x];
        inputs.extend(store.tensors().iter().cloned());
        let err = gradcheck::check(&inputs, 1e-5, |tape, v| {
            let p = Bound::from_vars(v[1..].to_vec());
            let y = block.forward(&p, v[0], &mut RunCtx::eval())?;
            Ok(y.mul(tape.constant(&wgt))?.sum())
        })
        .unwrap();
        assert!(err.passes(1e-6), "{err:?}");
    }
}
