//! Wall-clock scaling of the scan kernels against naive attention.

use std::hint::black_box;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::ssm::scan::parallel_scan_inputs;
use crate::ssm::SelectiveScanInputs;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchOptions {
    pub channels: usize,
    pub state: usize,
    /// Attention head width.
    pub head_dim: usize,
    pub warmup: usize,
    pub reps: usize,
    pub seed: u64,
    pub include_attention: bool,
    /// Cap in seconds on the timed runs of one kernel at one length. When a
    /// warmup run shows `reps` runs would exceed it, fewer runs (at least
    /// three) are timed.
    pub time_budget_s: Option<f64>,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            channels: 16,
            state: 16,
            head_dim: 16,
            warmup: 1,
            reps: 9,
            seed: 0,
            include_attention: true,
            time_budget_s: Some(120.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub len: usize,
    pub sequential_ns: u128,
    pub parallel_ns: u128,
    pub attention_reference_ns: Option<u128>,
    /// Timed runs behind each median: sequential, parallel, attention.
    pub reps: [usize; 3],
    /// Largest |sequential − parallel| over the outputs.
    pub scan_max_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Slopes {
    pub sequential: f64,
    pub parallel: f64,
    pub attention_reference: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub options: BenchOptions,
    pub rows: Vec<BenchRow>,
    pub slopes: Slopes,
    /// Every timed run returned exactly the untimed oracle's output.
    pub outputs_match_oracle: bool,
}

/// Random stable inputs for a `len`-step scan.
pub fn scan_inputs(len: usize, channels: usize, state: usize, seed: u64) -> SelectiveScanInputs<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize, lo: f32, hi: f32| (0..n).map(|_| rng.gen_range(lo..hi)).collect::<Vec<f32>>();
    SelectiveScanInputs {
        len,
        channels,
        state,
        u: draw(len * channels, -1.0, 1.0),
        delta: draw(len * channels, 0.001, 0.1),
        a: draw(channels * state, -2.0, -0.1),
        b: draw(len * state, -1.0, 1.0),
        c: draw(len * state, -1.0, 1.0),
    }
}

/// Single-head softmax attention over `[len, d]` rows, one query at a time.
pub fn naive_attention(q: &[f32], k: &[f32], v: &[f32], len: usize, d: usize) -> Vec<f32> {
    let scale = 1.0 / (d as f32).sqrt();
    let mut out = vec![0.0f32; len * d];
    let mut scores = vec![0.0f32; len];
    for i in 0..len {
        let qi = &q[i * d..(i + 1) * d];
        let mut max = f32::NEG_INFINITY;
        for (j, s) in scores.iter_mut().enumerate() {
            let kj = &k[j * d..(j + 1) * d];
            *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f32>() * scale;
            max = max.max(*s);
        }
        let mut z = 0.0f32;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            z += *s;
        }
        let oi = &mut out[i * d..(i + 1) * d];
        for (j, &s) in scores.iter().enumerate() {
            for (o, &vv) in oi.iter_mut().zip(&v[j * d..(j + 1) * d]) {
                *o += s * vv;
            }
        }
        let inv = 1.0 / z;
        oi.iter_mut().for_each(|o| *o *= inv);
    }
    out
}

/// Median wall time of the timed runs after `warmup` discarded ones, the
/// output of every timed run, and how many runs were timed.
fn time_kernel<F: FnMut() -> Vec<f32>>(opts: &BenchOptions, mut f: F) -> (u128, Vec<Vec<f32>>, usize) {
    let mut reps = opts.reps;
    for _ in 0..opts.warmup {
        let t = Instant::now();
        black_box(f());
        let secs = t.elapsed().as_secs_f64();
        if let Some(budget) = opts.time_budget_s {
            if secs * reps as f64 > budget {
                reps = reps.min(((budget / secs) as usize).max(3));
            }
        }
    }
    let mut times = Vec::with_capacity(reps);
    let mut outs = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        let out = black_box(f());
        times.push(t.elapsed().as_nanos());
        outs.push(out);
    }
    times.sort_unstable();
    (times[times.len() / 2], outs, reps)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

pub fn bench_scan(lengths: &[usize], opts: &BenchOptions) -> Result<BenchReport> {
    if lengths.len() < 2 || lengths.windows(2).any(|w| w[0] >= w[1]) || lengths[0] == 0 {
        return Err(invalid("bench needs at least two strictly ascending positive lengths"));
    }
    if opts.reps == 0 || opts.channels == 0 || opts.state == 0 || opts.head_dim == 0 {
        return Err(invalid("reps, channels, state and head_dim must be positive"));
    }
    let mut rows = Vec::with_capacity(lengths.len());
    let mut all_match = true;
    for &len in lengths {
        let inp = scan_inputs(len, opts.channels, opts.state, opts.seed ^ len as u64);
        let seq_oracle = inp.run(false).0;
        let par_oracle = parallel_scan_inputs(&inp);

        let (seq_ns, seq_outs, seq_reps) = time_kernel(opts, || inp.run(false).0);
        let (par_ns, par_outs, par_reps) = time_kernel(opts, || parallel_scan_inputs(&inp));
        all_match &= seq_outs.iter().all(|o| *o == seq_oracle) && par_outs.iter().all(|o| *o == par_oracle);

        let (attention_ns, att_reps) = if opts.include_attention {
            let d = opts.head_dim;
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(len as u64));
            let mut draw = || (0..len * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect::<Vec<_>>();
            let (q, k, v) = (draw(), draw(), draw());
            let oracle = naive_attention(&q, &k, &v, len, d);
            let (ns, outs, reps) = time_kernel(opts, || naive_attention(&q, &k, &v, len, d));
            all_match &= outs.iter().all(|o| *o == oracle);
            (Some(ns), reps)
        } else {
            (None, 0)
        };
        let diff = seq_oracle
            .iter()
            .zip(&par_oracle)
            .map(|(a, b)| (a - b).abs() as f64)
            .fold(0.0, f64::max);
        rows.push(BenchRow {
            len,
            sequential_ns: seq_ns,
            parallel_ns: par_ns,
            attention_reference_ns: attention_ns,
            reps: [seq_reps, par_reps, att_reps],
            scan_max_diff: diff,
        });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.len as f64).collect();
    let slope = |f: &dyn Fn(&BenchRow) -> u128| log_log_slope(&xs, &rows.iter().map(|r| f(r).max(1) as f64).collect::<Vec<_>>());
    let slopes = Slopes {
        sequential: slope(&|r| r.sequential_ns),
        parallel: slope(&|r| r.parallel_ns),
        attention_reference: opts
            .include_attention
            .then(|| slope(&|r| r.attention_reference_ns.unwrap_or(1))),
    };
    Ok(BenchReport {
        options: *opts,
        rows,
        slopes,
        outputs_match_oracle: all_match,
    })
}
