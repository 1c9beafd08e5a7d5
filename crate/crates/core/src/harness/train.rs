//! Mini-batch training of the micro classifier on the synthetic quadrant task.
//!
//! Per-sample forward/backward passes run on independent tapes (in parallel
//! with the `parallel` feature); their gradients are summed in batch order, so
//! results do not depend on the thread count.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::{build_variant, Model, Variant, VariantConfig};
use crate::block::{Mode, RunCtx};
use crate::error::{invalid, Error, Result};
use crate::harness::data::{gen_synthetic, SyntheticSample, NUM_CLASSES};
use crate::parallel;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Tape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub depths: Option<[usize; 4]>,
    pub channels: Option<usize>,
    pub quad_stages: Option<Vec<usize>>,
    pub shift: Option<bool>,
    pub drop_path: Option<f64>,
    pub tau: f64,
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    /// Linear warmup length; the rate then follows a cosine to `lr · min_lr_ratio`.
    pub warmup_steps: usize,
    pub min_lr_ratio: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling.
    pub grad_clip: Option<f64>,
    pub train_size: usize,
    pub eval_size: usize,
    pub eval_every: usize,
    /// Reuse the first `batch_size` samples, with the same noise, every step.
    pub fixed_batch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Micro,
            depths: None,
            channels: None,
            quad_stages: None,
            shift: None,
            drop_path: None,
            tau: 1.0,
            seed: 7,
            steps: 500,
            batch_size: 32,
            optimizer: OptimizerKind::Adam,
            lr: 3e-3,
            warmup_steps: 25,
            min_lr_ratio: 0.05,
            momentum: 0.9,
            weight_decay: 0.01,
            grad_clip: Some(5.0),
            train_size: 4096,
            eval_size: 512,
            eval_every: 100,
            fixed_batch: false,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self) -> Result<VariantConfig> {
        if self.variant != Variant::Micro {
            return Err(invalid(format!(
                "training runs on the synthetic 32x32 task and needs the micro variant, got {}",
                self.variant
            )));
        }
        let mut c = VariantConfig::micro();
        c.num_classes = NUM_CLASSES;
        if let Some(d) = self.depths {
            c.depths = d;
        }
        if let Some(ch) = self.channels {
            c.channels = ch;
        }
        if let Some(q) = &self.quad_stages {
            c.quad_stages = q.clone();
        }
        if let Some(s) = self.shift {
            c.shift = s;
        }
        if let Some(dp) = self.drop_path {
            c.drop_path = dp;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config()?;
        if self.batch_size == 0 || self.train_size < self.batch_size || self.eval_size == 0 {
            return Err(invalid("need batch_size >= 1, train_size >= batch_size and eval_size >= 1"));
        }
        if !(self.tau > 0.0) || !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid("need tau > 0, lr >= 0 and momentum in [0, 1)"));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let t = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let floor = self.lr * self.min_lr_ratio;
        floor + (self.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// SplitMix64 finaliser over a few words, for per-step and per-sample seeds.
pub fn mix_seed(words: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &w in words {
        let mut z = h ^ w.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Optimizer {
    pub fn new<T: Scalar>(kind: OptimizerKind, params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.numel()]).collect::<Vec<_>>();
        Self {
            kind,
            m: zeros(),
            v: if kind == OptimizerKind::Adam { zeros() } else { Vec::new() },
            t: 0,
        }
    }

    /// One update with decoupled weight decay.
    pub fn step<T: Scalar>(&mut self, params: &mut [Tensor<T>], grads: &[Vec<f64>], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let decay = if p.rank() >= 2 { cfg.weight_decay } else { 0.0 };
            let m = &mut self.m[i];
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let mut x = w.as_f64();
                x -= lr * decay * x;
                match self.kind {
                    OptimizerKind::Adam => {
                        m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                        let v = &mut self.v[i][j];
                        *v = b2 * *v + (1.0 - b2) * g[j] * g[j];
                        x -= lr * (m[j] / c1) / ((*v / c2).sqrt() + eps);
                    }
                    OptimizerKind::Sgd => {
                        m[j] = cfg.momentum * m[j] + g[j];
                        x -= lr * m[j];
                    }
                }
                *w = T::lit(x);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub accuracy: f64,
    pub mean_loss: f64,
    /// Fraction of samples whose first QuadVSS block picked the informative quadrant.
    pub quadrant_agreement: f64,
    /// How often each quadrant was picked by that block.
    pub selected_histogram: [usize; 4],
    /// Per-sample choice of that block, in eval-set order.
    pub selected: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub losses: Vec<f64>,
    /// Mean of the first and last `min(10, steps)` step losses.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub final_accuracy: f64,
    pub quadrant_agreement: f64,
    pub evals: Vec<EvalRecord>,
    pub wall_time_s: f64,
}

/// Per-step progress passed to the training callback.
#[derive(Debug, Clone, Copy)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Mean loss and summed gradients over `batch`.
pub fn batch_gradients<T: Scalar>(
    model: &Model<T>,
    batch: &[&SyntheticSample],
    seeds: &[u64],
    tau: f64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let per_sample = parallel::map_range(batch.len(), |i| -> Result<(f64, Vec<Vec<T>>)> {
        let tape = Tape::new();
        let p = model.params.bind(&tape);
        let mut ctx = RunCtx::new(Mode::Train, seeds[i]);
        ctx.tau = tau;
        let image = tape.constant(&batch[i].image.cast());
        let out = model.arch.forward(&p, image, &mut ctx)?;
        let loss = out.logits.cross_entropy(batch[i].label)?;
        let g = tape.backward(loss)?;
        Ok((loss.item().as_f64(), p.grads(&g)))
    });
    let mut total = 0.0;
    let mut sum: Vec<Vec<f64>> = model.params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
    for r in per_sample {
        let (l, g) = r?;
        total += l;
        for (s, g) in sum.iter_mut().zip(g) {
            for (a, b) in s.iter_mut().zip(g) {
                *a += b.as_f64();
            }
        }
    }
    let n = batch.len() as f64;
    for s in sum.iter_mut().flatten() {
        *s /= n;
    }
    Ok((total / n, sum))
}

/// Eval-mode accuracy, loss and first-QuadVSS-block decisions.
pub fn evaluate<T: Scalar>(model: &Model<T>, samples: &[SyntheticSample], step: usize) -> Result<EvalRecord> {
    let rows = parallel::map_slice(samples, |s| -> Result<(bool, f64, Option<usize>)> {
        let (logits, decisions) = model.classify_with_decisions(&s.image.cast())?;
        let tape = Tape::<T>::no_grad();
        let loss = tape.constant(&logits).cross_entropy(s.label)?.item().as_f64();
        let pred = crate::gumbel::topk_select(logits.data());
        Ok((pred == s.label, loss, decisions.first().and_then(|d| d.selected)))
    });
    let mut correct = 0;
    let mut agree = 0;
    let mut loss = 0.0;
    let mut hist = [0usize; 4];
    let mut selected = Vec::with_capacity(samples.len());
    for (r, s) in rows.into_iter().zip(samples) {
        let (ok, l, sel) = r?;
        correct += ok as usize;
        loss += l;
        if let Some(q) = sel {
            hist[q] += 1;
            agree += (q == s.informative_quadrant) as usize;
        }
        selected.push(sel);
    }
    let n = samples.len() as f64;
    Ok(EvalRecord {
        step,
        accuracy: correct as f64 / n,
        mean_loss: loss / n,
        quadrant_agreement: agree as f64 / n,
        selected_histogram: hist,
        selected,
    })
}

fn window_mean(v: &[f64], from_end: bool) -> f64 {
    let k = v.len().min(10);
    if k == 0 {
        return f64::NAN;
    }
    let s = if from_end { &v[v.len() - k..] } else { &v[..k] };
    s.iter().sum::<f64>() / k as f64
}

/// Trains a fresh model seeded by `cfg.seed`; `on_step` sees every step.
pub fn train(cfg: &TrainConfig, mut on_step: impl FnMut(&StepLog)) -> Result<(Model<f32>, TrainReport)> {
    cfg.validate()?;
    let start = Instant::now();
    let mcfg = cfg.model_config()?;
    let mut model = build_variant::<f32>(&mcfg, cfg.seed)?;
    let train_set = gen_synthetic(cfg.train_size, mix_seed(&[cfg.seed, 1]))?;
    let eval_set = gen_synthetic(cfg.eval_size, mix_seed(&[cfg.seed, 2]))?;
    let mut opt = Optimizer::new(cfg.optimizer, model.params.tensors());
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut evals = Vec::new();
    let mut order: Vec<usize> = (0..cfg.train_size).collect();
    let mut shuffle_rng = {
        use rand::SeedableRng;
        rand_chacha::ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 3]))
    };
    let per_epoch = cfg.train_size / cfg.batch_size;

    for step in 0..cfg.steps {
        let (batch, seeds): (Vec<&SyntheticSample>, Vec<u64>) = if cfg.fixed_batch {
            (0..cfg.batch_size)
                .map(|i| (&train_set[i], mix_seed(&[cfg.seed, 4, i as u64])))
                .unzip()
        } else {
            let slot = step % per_epoch;
            if slot == 0 {
                use rand::seq::SliceRandom;
                order.shuffle(&mut shuffle_rng);
            }
            order[slot * cfg.batch_size..(slot + 1) * cfg.batch_size]
                .iter()
                .enumerate()
                .map(|(i, &j)| (&train_set[j], mix_seed(&[cfg.seed, 5, step as u64, i as u64])))
                .unzip()
        };
        let (loss, mut grads) = batch_gradients(&model, &batch, &seeds, cfg.tau)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
        if let Some(c) = cfg.grad_clip {
            if norm > c {
                let s = c / norm;
                grads.iter_mut().flatten().for_each(|g| *g *= s);
            }
        }
        let lr = cfg.lr_at(step);
        opt.step(model.params.tensors_mut(), &grads, lr, cfg);
        if !model.params.tensors().iter().all(Tensor::is_finite) {
            return Err(Error::Divergence { step, loss: f64::NAN });
        }
        losses.push(loss);
        on_step(&StepLog {
            step,
            loss,
            lr,
            grad_norm: norm,
        });
        let last = step + 1 == cfg.steps;
        if last || (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0) {
            evals.push(evaluate(&model, &eval_set, step + 1)?);
        }
    }
    if evals.is_empty() {
        evals.push(evaluate(&model, &eval_set, 0)?);
    }
    let fin = evals.last().expect("at least one eval");
    let report = TrainReport {
        config: cfg.clone(),
        initial_loss: window_mean(&losses, false),
        final_loss: window_mean(&losses, true),
        final_accuracy: fin.accuracy,
        quadrant_agreement: fin.quadrant_agreement,
        evals,
        losses,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}
