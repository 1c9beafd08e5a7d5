//! Associative prefix scan for first-order linear recurrences.
//!
//! The step `h_t = a_t h_{t−1} + b_t` is the pair `(a_t, b_t)`; composing a
//! later step after an earlier one is
//! `(a₂, b₂) ∘ (a₁, b₁) = (a₂a₁, a₂b₁ + b₂)`, which is associative, so all
//! prefixes can be formed in `⌈log₂ L⌉` rounds of independent combines.

use super::selective::SelectiveScanInputs;
use super::zoh_input_coeff;
use crate::parallel;
use crate::scalar::Scalar;

/// Rounds wider than this are split across workers.
const PAR_MIN_WIDTH: usize = 1 << 14;

/// `later ∘ earlier`
#[inline]
pub fn combine<T: Scalar>(later: (T, T), earlier: (T, T)) -> (T, T) {
    (later.0 * earlier.0, later.0 * earlier.1 + later.1)
}

/// Inclusive scan by recursive doubling (Hillis–Steele): after round `r`
/// element `i` holds the composition of elements `i − 2^r + 1 ..= i`.
/// Uses `L·⌈log₂ L⌉` combines and one scratch buffer.
pub fn associative_scan<T: Scalar>(elems: &mut Vec<(T, T)>) {
    let len = elems.len();
    let mut src = std::mem::take(elems);
    let mut dst = src.clone();
    let mut offset = 1;
    while offset < len {
        {
            let prev = &src;
            let step = |base: usize, out: &mut [(T, T)]| {
                for (k, o) in out.iter_mut().enumerate() {
                    let i = base + k;
                    *o = if i >= offset { combine(prev[i], prev[i - offset]) } else { prev[i] };
                }
            };
            if parallel::enabled() && len >= PAR_MIN_WIDTH {
                let chunk = PAR_MIN_WIDTH / 4;
                parallel::for_each_chunk_mut(&mut dst, chunk, |ci, out| step(ci * chunk, out));
            } else {
                step(0, &mut dst);
            }
        }
        std::mem::swap(&mut src, &mut dst);
        offset *= 2;
    }
    *elems = src;
}

/// Selective-scan output computed with [`associative_scan`] per
/// `(channel, state)` column; channels run concurrently.
pub fn parallel_scan_inputs<T: Scalar>(inp: &SelectiveScanInputs<T>) -> Vec<T> {
    let (l, d, n) = (inp.len, inp.channels, inp.state);
    let per_channel = parallel::map_range(d, |ch| {
        let mut y = vec![T::zero(); l];
        let mut col = Vec::with_capacity(l);
        for s in 0..n {
            let a = inp.a[ch * n + s];
            col.clear();
            col.extend((0..l).map(|t| {
                let dt = inp.delta[t * d + ch];
                let a_bar = (dt * a).exp();
                let bx = zoh_input_coeff(dt, a) * inp.b[t * n + s] * inp.u[t * d + ch];
                (a_bar, bx)
            }));
            associative_scan(&mut col);
            for t in 0..l {
                // h_0 = 0, so the prefix's offset term is the state
                y[t] += inp.c[t * n + s] * col[t].1;
            }
        }
        y
    });
    let mut out = vec![T::zero(); l * d];
    for (ch, yc) in per_channel.into_iter().enumerate() {
        for t in 0..l {
            out[t * d + ch] = yc[t];
        }
    }
    out
}
