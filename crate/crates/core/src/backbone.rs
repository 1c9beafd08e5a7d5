//! Hierarchical classifier: a three-convolution stem that reduces the image
//! by 4, four stages of (Quad)VSS blocks with strided-convolution
//! downsampling between them, and a norm → average-pool → linear head.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::block::{drop_path_schedule, Block, BlockConfig, BlockDecision, Mode, RunCtx, ShiftDirection};
use crate::error::{invalid, Error, Result};
use crate::ops::conv_out_size;
use crate::parallel;
use crate::params::{fan_in_uniform, Bound, LayerNorm, Linear, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Lite,
    Tiny,
    Small,
    Base,
    Micro,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::Lite => "lite",
            Variant::Tiny => "tiny",
            Variant::Small => "small",
            Variant::Base => "base",
            Variant::Micro => "micro",
        };
        f.write_str(s)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lite" => Ok(Variant::Lite),
            "tiny" => Ok(Variant::Tiny),
            "small" => Ok(Variant::Small),
            "base" => Ok(Variant::Base),
            "micro" => Ok(Variant::Micro),
            other => Err(invalid(format!("unknown variant '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantConfig {
    pub variant: Variant,
    pub depths: [usize; 4],
    /// Stage-1 width; stage `i` has `channels · 2^(i−1)`.
    pub channels: usize,
    /// 1-based stage indices built from QuadVSS blocks.
    pub quad_stages: Vec<usize>,
    pub num_classes: usize,
    pub expansion_ratio: f64,
    pub d_state: usize,
    /// Largest stochastic-depth rate; rates grow linearly over all blocks.
    pub drop_path: f64,
    /// Roll every other QuadVSS block, alternating direction.
    pub shift: bool,
    pub image_size: usize,
}

/// Published model size and cost of a variant at 224².
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reference {
    pub params: f64,
    pub gflops: f64,
}

impl VariantConfig {
    pub fn preset(variant: Variant) -> Self {
        let (depths, channels, ratio, dp) = match variant {
            Variant::Lite => ([2, 2, 2, 2], 48, 1.0, 0.1),
            Variant::Tiny => ([2, 6, 2, 2], 64, 1.0, 0.2),
            Variant::Small => ([2, 2, 5, 2], 96, 2.0, 0.3),
            Variant::Base => ([2, 2, 15, 2], 96, 2.0, 0.5),
            Variant::Micro => ([1, 1, 1, 1], 16, 1.0, 0.1),
        };
        let micro = variant == Variant::Micro;
        Self {
            variant,
            depths,
            channels,
            quad_stages: vec![1, 2],
            num_classes: if micro { 4 } else { 1000 },
            expansion_ratio: ratio,
            d_state: 16,
            drop_path: dp,
            shift: true,
            image_size: if micro { 32 } else { 224 },
        }
    }

    pub fn lite() -> Self {
        Self::preset(Variant::Lite)
    }

    pub fn micro() -> Self {
        Self::preset(Variant::Micro)
    }

    /// Published values, where they exist.
    pub fn reference(&self) -> Option<Reference> {
        let (params, gflops) = match self.variant {
            Variant::Lite => (5.47e6, 0.82),
            Variant::Tiny => (10.32e6, 2.07),
            Variant::Small => (31.25e6, 5.51),
            Variant::Base => (50.6e6, 9.30),
            Variant::Micro => return None,
        };
        Some(Reference { params, gflops })
    }

    pub fn stage_dims(&self) -> [usize; 4] {
        [0, 1, 2, 3].map(|i| self.channels << i)
    }

    pub fn total_blocks(&self) -> usize {
        self.depths.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.depths.contains(&0) {
            return Err(invalid(format!("every stage needs at least one block, got {:?}", self.depths)));
        }
        if self.channels < 2 || !self.channels.is_multiple_of(2) {
            return Err(invalid(format!("channels must be even and positive, got {}", self.channels)));
        }
        if self.num_classes == 0 {
            return Err(invalid("num_classes must be positive"));
        }
        if let Some(&s) = self.quad_stages.iter().find(|&&s| !(1..=4).contains(&s)) {
            return Err(invalid(format!("quad stage {s} outside 1..=4")));
        }
        if !self.image_size.is_multiple_of(4) {
            return Err(invalid(format!("image size {} not divisible by 4", self.image_size)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub cin: usize,
    pub cout: usize,
}

impl Conv2d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = 9 * cin;
        Self {
            w: store.add(format!("{name}.weight"), fan_in_uniform(&[3, 3, cin, cout], fan_in, rng)),
            b: store.add(format!("{name}.bias"), fan_in_uniform(&[cout], fan_in, rng)),
            k: 3,
            stride,
            padding: 1,
            cin,
            cout,
        }
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.conv2d(p[self.w], Some(p[self.b]), self.stride, self.padding)
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        Some((
            conv_out_size(h, self.k, self.stride, self.padding)?,
            conv_out_size(w, self.k, self.stride, self.padding)?,
        ))
    }

    pub fn macs(&self, ho: usize, wo: usize) -> u64 {
        (ho * wo * self.k * self.k * self.cin * self.cout) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub downsample: Option<Conv2d>,
    pub blocks: Vec<Block>,
}

/// Parameter layout of a built model; the values live in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub config: VariantConfig,
    pub stem: [Conv2d; 3],
    pub stages: Vec<Stage>,
    pub head_norm: LayerNorm,
    pub head: Linear,
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub arch: Architecture,
    pub params: ParamStore<T>,
}

/// Logits and each stage's output of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput<'t, T: Scalar> {
    pub logits: Var<'t, T>,
    pub stages: Vec<Var<'t, T>>,
}

/// Builds a model with weights drawn from `seed`.
pub fn build_variant<T: Scalar>(cfg: &VariantConfig, seed: u64) -> Result<Model<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let c = cfg.channels;
    let stem = [
        Conv2d::new(&mut store, "stem.0", 3, c / 2, 2, &mut rng),
        Conv2d::new(&mut store, "stem.1", c / 2, c / 2, 1, &mut rng),
        Conv2d::new(&mut store, "stem.2", c / 2, c, 2, &mut rng),
    ];
    let rates = drop_path_schedule(cfg.drop_path, cfg.total_blocks());
    let dims = cfg.stage_dims();
    let mut stages = Vec::with_capacity(4);
    let mut index = 0;
    let mut quad_count = 0;
    for s in 0..4 {
        let downsample = (s > 0).then(|| Conv2d::new(&mut store, &format!("stages.{s}.downsample"), dims[s - 1], dims[s], 2, &mut rng));
        let quad = cfg.quad_stages.contains(&(s + 1));
        let mut blocks = Vec::with_capacity(cfg.depths[s]);
        for b in 0..cfg.depths[s] {
            let base = if quad { BlockConfig::quadvss(dims[s]) } else { BlockConfig::vss(dims[s]) };
            let shift = if quad && cfg.shift && quad_count % 2 == 1 {
                Some(if (quad_count / 2) % 2 == 0 {
                    ShiftDirection::DownRight
                } else {
                    ShiftDirection::UpLeft
                })
            } else {
                None
            };
            if quad {
                quad_count += 1;
            }
            let bc = BlockConfig {
                expansion_ratio: cfg.expansion_ratio,
                d_state: cfg.d_state,
                drop_path: rates[index],
                shift,
                ..base
            };
            blocks.push(Block::new(&mut store, &format!("stages.{s}.blocks.{b}"), index, bc, &mut rng)?);
            index += 1;
        }
        stages.push(Stage { downsample, blocks });
    }
    let head_norm = LayerNorm::new(&mut store, "head.norm", dims[3]);
    let head = Linear::new(&mut store, "head.fc", dims[3], cfg.num_classes, true, &mut rng);
    Ok(Model {
        arch: Architecture {
            config: cfg.clone(),
            stem,
            stages,
            head_norm,
            head,
        },
        params: store,
    })
}

impl Architecture {
    pub fn blocks(&self) -> impl Iterator<Item = &Block> {
        self.stages.iter().flat_map(|s| s.blocks.iter())
    }

    /// `image[H, W, 3]` → `[H/4, W/4, C]`.
    pub fn stem<'t, T: Scalar>(&self, p: &Bound<'t, T>, image: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = image.shape();
        if s.len() != 3 || s[2] != 3 || !s[0].is_multiple_of(4) || !s[1].is_multiple_of(4) || s[0] == 0 || s[1] == 0 {
            return Err(invalid(format!("stem expects [H, W, 3] with H, W divisible by 4, got {s:?}")));
        }
        let x = self.stem[0].forward(p, image)?.gelu();
        let x = self.stem[1].forward(p, x)?.gelu();
        self.stem[2].forward(p, x)
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, image: Var<'t, T>, ctx: &mut RunCtx) -> Result<ForwardOutput<'t, T>> {
        let mut x = self.stem(p, image)?;
        let mut outs = Vec::with_capacity(4);
        for stage in &self.stages {
            if let Some(ds) = &stage.downsample {
                x = ds.forward(p, x)?;
            }
            for b in &stage.blocks {
                x = b.forward(p, x, ctx)?;
            }
            outs.push(x);
        }
        let pooled = self.head_norm.forward(p, x)?.mean_rows();
        let logits = self.head.forward(p, pooled)?;
        Ok(ForwardOutput { logits, stages: outs })
    }

    /// Per-block grid sizes for an `h × w` image.
    pub fn block_grids(&self, h: usize, w: usize) -> Result<Vec<(usize, usize)>> {
        let bad = || invalid(format!("input {h}x{w} too small for this model"));
        let mut hw = (h, w);
        for c in &self.stem {
            hw = c.out_hw(hw.0, hw.1).ok_or_else(bad)?;
        }
        let mut grids = Vec::new();
        for stage in &self.stages {
            if let Some(ds) = &stage.downsample {
                hw = ds.out_hw(hw.0, hw.1).ok_or_else(bad)?;
            }
            grids.extend(std::iter::repeat_n(hw, stage.blocks.len()));
        }
        Ok(grids)
    }
}

/// `4·H·W·D² + 2·(H·W)²·D`: projections plus the two attention products.
pub fn attention_reference_flops(h: usize, w: usize, d: usize) -> u64 {
    let (hw, d) = ((h * w) as u64, d as u64);
    4 * hw * d * d + 2 * hw * hw * d
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Complexity {
    pub params: usize,
    /// Multiply-accumulates of one forward pass.
    pub macs: u64,
    /// `2 × macs`.
    pub flops: u64,
    /// Attention formula summed over every token-mixing block.
    pub attention_reference_flops: u64,
}

impl Complexity {
    /// Giga multiply-accumulates, the unit model tables usually call GFLOPs.
    pub fn gmacs(&self) -> f64 {
        self.macs as f64 / 1e9
    }
}

impl<T: Scalar> Model<T> {
    pub fn config(&self) -> &VariantConfig {
        &self.arch.config
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Logits for one image `[H, W, 3]` without recording gradients.
    pub fn classify(&self, image: &Tensor<T>, ctx: &mut RunCtx) -> Result<Tensor<T>> {
        let tape = Tape::no_grad();
        let p = self.params.bind(&tape);
        let out = self.arch.forward(&p, tape.constant(image), ctx)?;
        Ok(out.logits.to_tensor())
    }

    /// Evaluation-mode logits for a batch, one task per image.
    pub fn classify_batch(&self, images: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        parallel::map_slice(images, |img| self.classify(img, &mut RunCtx::eval()))
            .into_iter()
            .collect()
    }

    /// Eval-mode logits with each QuadVSS block's decision.
    pub fn classify_with_decisions(&self, image: &Tensor<T>) -> Result<(Tensor<T>, Vec<BlockDecision>)> {
        let mut ctx = RunCtx::new(Mode::Eval, 0);
        let logits = self.classify(image, &mut ctx)?;
        Ok((logits, ctx.decisions))
    }
}

/// Exact parameter count, MACs, and the attention reference for `input_hw`.
pub fn count_params_flops<T: Scalar>(model: &Model<T>, input_hw: (usize, usize)) -> Result<Complexity> {
    let arch = &model.arch;
    let (mut h, mut w) = input_hw;
    let mut macs = 0u64;
    let bad = || invalid(format!("input {}x{} too small for this model", input_hw.0, input_hw.1));
    for c in &arch.stem {
        (h, w) = c.out_hw(h, w).ok_or_else(bad)?;
        macs += c.macs(h, w);
    }
    let mut attention = 0u64;
    for stage in &arch.stages {
        if let Some(ds) = &stage.downsample {
            (h, w) = ds.out_hw(h, w).ok_or_else(bad)?;
            macs += ds.macs(h, w);
        }
        for b in &stage.blocks {
            macs += b.macs(h, w);
            attention += attention_reference_flops(h, w, b.cfg.dim);
        }
    }
    macs += arch.head.macs(1);
    Ok(Complexity {
        params: model.num_params(),
        macs,
        flops: 2 * macs,
        attention_reference_flops: attention,
    })
}
