//! Linear state-space kernels with diagonal state matrices.
//!
//! A continuous system `h' = A h + B x, y = C h` is discretised with a
//! zero-order hold of step `Δ`:
//!
//! ```text
//! Ā = exp(ΔA)        B̄ = (ΔA)⁻¹ (Ā − I) ΔB
//! h_t = Ā h_{t−1} + B̄ x_t,   y_t = C h_t,   h_0 = 0
//! ```
//!
//! The same map is a causal convolution with kernel `K̄_t = C Ā^t B̄`.

pub mod scan;
pub mod selective;

pub use scan::{associative_scan, combine, parallel_scan_inputs};
pub use selective::{SelectiveSsmParams, SelectiveScanInputs};

use crate::error::{invalid, Result};
use crate::scalar::Scalar;

/// Below this `|ΔA|` the hold coefficient uses its series limit `Δ`.
pub const ZOH_SERIES_THRESHOLD: f64 = 1e-8;

/// `(exp(z) − 1) / a` with `z = Δ·a`, i.e. the ZOH input coefficient per unit `B`.
#[inline]
pub fn zoh_input_coeff<T: Scalar>(delta: T, a: T) -> T {
    let z = delta * a;
    if z.abs() < T::lit(ZOH_SERIES_THRESHOLD) {
        delta
    } else {
        z.exp_m1() / a
    }
}

/// `∂/∂a [(exp(Δa) − 1) / a] = Δ² · q(Δa)` where `q(z) = (z eᶻ − eᶻ + 1) / z²`.
#[inline]
pub(crate) fn zoh_input_coeff_da<T: Scalar>(delta: T, a: T) -> T {
    let z = delta * a;
    let q = if z.abs() < T::lit(1e-3) {
        T::lit(0.5) + z * (T::lit(1.0 / 3.0) + z * (T::lit(1.0 / 8.0) + z * T::lit(1.0 / 30.0)))
    } else {
        (z * z.exp() - z.exp_m1()) / (z * z)
    };
    delta * delta * q
}

/// Continuous diagonal system for a single channel.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmContinuous<T: Scalar> {
    a: Vec<T>,
    pub b: Vec<T>,
    pub c: Vec<T>,
}

impl<T: Scalar> SsmContinuous<T> {
    /// `A = −exp(log_a)`, stable for any real `log_a`.
    pub fn from_log_a(log_a: &[T], b: Vec<T>, c: Vec<T>) -> Result<Self> {
        Self::from_diag(log_a.iter().map(|&v| -v.exp()).collect(), b, c)
    }

    /// Rejects any diagonal entry that is not strictly negative.
    pub fn from_diag(a: Vec<T>, b: Vec<T>, c: Vec<T>) -> Result<Self> {
        if a.len() != b.len() || a.len() != c.len() {
            return Err(invalid(format!(
                "state sizes disagree: A {}, B {}, C {}",
                a.len(),
                b.len(),
                c.len()
            )));
        }
        if let Some(bad) = a.iter().find(|v| !(**v < T::zero())) {
            return Err(invalid(format!("unstable diagonal entry {bad}")));
        }
        Ok(Self { a, b, c })
    }

    pub fn a(&self) -> &[T] {
        &self.a
    }

    pub fn state_size(&self) -> usize {
        self.a.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SsmDiscrete<T: Scalar> {
    pub a_bar: Vec<T>,
    pub b_bar: Vec<T>,
    pub c: Vec<T>,
    pub delta: T,
}

impl<T: Scalar> SsmDiscrete<T> {
    /// A discrete system given directly by its coefficients.
    pub fn new(a_bar: Vec<T>, b_bar: Vec<T>, c: Vec<T>, delta: T) -> Result<Self> {
        if a_bar.len() != b_bar.len() || a_bar.len() != c.len() {
            return Err(invalid("discrete SSM coefficient lengths disagree"));
        }
        Ok(Self { a_bar, b_bar, c, delta })
    }

    pub fn state_size(&self) -> usize {
        self.a_bar.len()
    }
}

pub fn zoh_discretize<T: Scalar>(ssm: &SsmContinuous<T>, delta: T) -> Result<SsmDiscrete<T>> {
    if !(delta > T::zero()) {
        return Err(invalid(format!("step size must be positive, got {delta}")));
    }
    let a_bar = ssm.a.iter().map(|&a| (delta * a).exp()).collect();
    let b_bar = ssm
        .a
        .iter()
        .zip(&ssm.b)
        .map(|(&a, &b)| zoh_input_coeff(delta, a) * b)
        .collect();
    Ok(SsmDiscrete {
        a_bar,
        b_bar,
        c: ssm.c.clone(),
        delta,
    })
}

/// Runs the recurrence from a zero state. O(L·N).
pub fn ssm_recurrence<T: Scalar>(p: &SsmDiscrete<T>, x: &[T]) -> Vec<T> {
    let mut h = vec![T::zero(); p.state_size()];
    x.iter()
        .map(|&xt| {
            let mut y = T::zero();
            for n in 0..h.len() {
                h[n] = p.a_bar[n] * h[n] + p.b_bar[n] * xt;
                y += p.c[n] * h[n];
            }
            y
        })
        .collect()
}

/// `K̄[t] = C · Ā^t · B̄` for `t < len`.
pub fn ssm_conv_kernel<T: Scalar>(p: &SsmDiscrete<T>, len: usize) -> Vec<T> {
    let mut pow: Vec<T> = p.b_bar.clone();
    (0..len)
        .map(|_| {
            let k = p.c.iter().zip(&pow).map(|(&c, &v)| c * v).sum();
            pow.iter_mut().zip(&p.a_bar).for_each(|(v, &a)| *v *= a);
            k
        })
        .collect()
}

/// `y[t] = Σ_{s ≤ t} kernel[t − s] · x[s]`
pub fn causal_convolve<T: Scalar>(x: &[T], kernel: &[T]) -> Vec<T> {
    (0..x.len())
        .map(|t| {
            (0..=t)
                .filter(|s| t - s < kernel.len())
                .map(|s| kernel[t - s] * x[s])
                .sum()
        })
        .collect()
}
