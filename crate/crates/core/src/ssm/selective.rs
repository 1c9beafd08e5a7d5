//! Input-dependent (selective) scan.
//!
//! For each position `t` the step size, input and output projections are
//! functions of the token: `Δ_t = softplus(x_t W_down W_up + b_Δ)`,
//! `B_t = x_t W_B`, `C_t = x_t W_C`. Each channel `d` then runs a diagonal
//! ZOH recurrence with `A_d = −exp(log_A_d)`:
//!
//! ```text
//! h_t[d, n] = exp(Δ_t[d] A[d, n]) h_{t−1}[d, n] + φ(Δ_t[d], A[d, n]) B_t[n] x_t[d]
//! y_t[d]    = Σ_n C_t[n] h_t[d, n]
//! ```
//!
//! with `φ(Δ, a) = (exp(Δa) − 1) / a`.

use rand::Rng;

use super::{zoh_input_coeff, zoh_input_coeff_da};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::parallel;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Tape;

/// Per-step scan operands, all row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectiveScanInputs<T: Scalar> {
    pub len: usize,
    pub channels: usize,
    pub state: usize,
    /// `[L, D]`
    pub u: Vec<T>,
    /// `[L, D]`, positive
    pub delta: Vec<T>,
    /// `[D, N]`, negative
    pub a: Vec<T>,
    /// `[L, N]`
    pub b: Vec<T>,
    /// `[L, N]`
    pub c: Vec<T>,
}

impl<T: Scalar> SelectiveScanInputs<T> {
    pub fn validate(&self) -> Result<()> {
        let (l, d, n) = (self.len, self.channels, self.state);
        let ok = self.u.len() == l * d
            && self.delta.len() == l * d
            && self.a.len() == d * n
            && self.b.len() == l * n
            && self.c.len() == l * n;
        if ok {
            Ok(())
        } else {
            Err(Error::Shape {
                op: "selective_scan",
                lhs: vec![l, d, n],
                rhs: vec![self.u.len(), self.delta.len(), self.a.len(), self.b.len(), self.c.len()],
            })
        }
    }

    /// Sequential evaluation. Returns `y[L, D]` and, if requested, every
    /// hidden state `h[L, D, N]`.
    pub fn run(&self, keep_states: bool) -> (Vec<T>, Option<Vec<T>>) {
        let (l, d, n) = (self.len, self.channels, self.state);
        // channel-major so each channel's scan is independent
        let per_channel = parallel::map_range(d, |ch| {
            let mut y = vec![T::zero(); l];
            let mut hs = if keep_states { vec![T::zero(); l * n] } else { Vec::new() };
            let mut h = vec![T::zero(); n];
            for t in 0..l {
                let dt = self.delta[t * d + ch];
                let ut = self.u[t * d + ch];
                let mut acc = T::zero();
                for s in 0..n {
                    let a = self.a[ch * n + s];
                    let a_bar = (dt * a).exp();
                    let b_bar = zoh_input_coeff(dt, a) * self.b[t * n + s];
                    h[s] = a_bar * h[s] + b_bar * ut;
                    acc += self.c[t * n + s] * h[s];
                }
                y[t] = acc;
                if keep_states {
                    hs[t * n..(t + 1) * n].copy_from_slice(&h);
                }
            }
            (y, hs)
        });
        let mut y = vec![T::zero(); l * d];
        let mut states = if keep_states { Some(vec![T::zero(); l * d * n]) } else { None };
        for (ch, (yc, hc)) in per_channel.into_iter().enumerate() {
            for t in 0..l {
                y[t * d + ch] = yc[t];
            }
            if let Some(st) = states.as_mut() {
                for t in 0..l {
                    st[(t * d + ch) * n..(t * d + ch + 1) * n].copy_from_slice(&hc[t * n..(t + 1) * n]);
                }
            }
        }
        (y, states)
    }

    /// Reverse pass given stored states and `∂/∂y`.
    pub fn backward(&self, states: &[T], gy: &[T]) -> ScanGrads<T> {
        let (l, d, n) = (self.len, self.channels, self.state);
        let mut g = ScanGrads {
            u: vec![T::zero(); l * d],
            delta: vec![T::zero(); l * d],
            a: vec![T::zero(); d * n],
            b: vec![T::zero(); l * n],
            c: vec![T::zero(); l * n],
        };
        for ch in 0..d {
            for s in 0..n {
                let a = self.a[ch * n + s];
                let mut carry = T::zero();
                for t in (0..l).rev() {
                    let i = t * d + ch;
                    let h_t = states[i * n + s];
                    let h_prev = if t > 0 { states[(i - d) * n + s] } else { T::zero() };
                    let dt = self.delta[i];
                    let ut = self.u[i];
                    let bt = self.b[t * n + s];
                    let gh = carry + self.c[t * n + s] * gy[i];
                    g.c[t * n + s] += gy[i] * h_t;

                    let z = dt * a;
                    let a_bar = z.exp();
                    let phi = zoh_input_coeff(dt, a);
                    let g_abar = gh * h_prev;
                    let g_phi = gh * bt * ut;
                    g.u[i] += gh * phi * bt;
                    g.b[t * n + s] += gh * phi * ut;
                    g.delta[i] += g_abar * a * a_bar + g_phi * a_bar;
                    g.a[ch * n + s] += g_abar * dt * a_bar + g_phi * zoh_input_coeff_da(dt, a);
                    carry = gh * a_bar;
                }
            }
        }
        g
    }
}

#[derive(Debug, Clone)]
pub struct ScanGrads<T: Scalar> {
    pub u: Vec<T>,
    pub delta: Vec<T>,
    pub a: Vec<T>,
    pub b: Vec<T>,
    pub c: Vec<T>,
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Selective scan of `self = u[L, D]` with `delta[L, D]`, `a[D, N]`,
    /// `b[L, N]`, `c[L, N]`.
    pub fn selective_scan(
        self,
        delta: Var<'t, T>,
        a: Var<'t, T>,
        b: Var<'t, T>,
        c: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let su = self.shape();
        let sa = a.shape();
        if su.len() != 2 || sa.len() != 2 || sa[0] != su[1] {
            return Err(Error::Shape {
                op: "selective_scan",
                lhs: su,
                rhs: sa,
            });
        }
        let inputs = SelectiveScanInputs {
            len: su[0],
            channels: su[1],
            state: sa[1],
            u: self.value().as_ref().clone(),
            delta: delta.value().as_ref().clone(),
            a: a.value().as_ref().clone(),
            b: b.value().as_ref().clone(),
            c: c.value().as_ref().clone(),
        };
        inputs.validate()?;
        let tape = self.tape();
        let keep = tape.grad_enabled();
        let (y, states) = inputs.run(keep);
        let ids = [self.id(), delta.id(), a.id(), b.id(), c.id()];
        Ok(tape.op(&[self, delta, a, b, c], su, y, move || {
            let states = states.expect("states kept when gradients are enabled");
            Box::new(move |gy, sink| {
                let g = inputs.backward(&states, gy);
                sink.add(ids[0], &g.u);
                sink.add(ids[1], &g.delta);
                sink.add(ids[2], &g.a);
                sink.add(ids[3], &g.b);
                sink.add(ids[4], &g.c);
            })
        }))
    }
}

/// Parameters of a selective scan over `D` channels with state size `N`.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectiveSsmParams<T: Scalar> {
    /// `[D, N]`
    pub log_a: Tensor<T>,
    /// `[D, R]`
    pub dt_down: Tensor<T>,
    /// `[R, D]`
    pub dt_up: Tensor<T>,
    /// `[D]`
    pub dt_bias: Tensor<T>,
    /// `[D, N]`
    pub b_proj: Tensor<T>,
    /// `[D, N]`
    pub c_proj: Tensor<T>,
    pub conv_width: usize,
}

/// `⌈D / 16⌉`
pub fn auto_dt_rank(d: usize) -> usize {
    d.div_ceil(16).max(1)
}

/// `log_A[d, n] = ln(n + 1)`
pub fn s4d_real_log_a<T: Scalar>(d: usize, n: usize) -> Tensor<T> {
    let data = (0..d * n).map(|i| T::lit(((i % n) as f64 + 1.0).ln())).collect();
    Tensor::new(&[d, n], data).expect("log_a shape")
}

/// Inverse softplus of step sizes drawn log-uniformly from `[1e-3, 1e-1]`.
pub fn dt_bias_init<T: Scalar, R: Rng + ?Sized>(d: usize, rng: &mut R) -> Tensor<T> {
    let data = (0..d)
        .map(|_| {
            let dt = (rng.gen_range(0.001f64.ln()..0.1f64.ln())).exp();
            T::lit(dt + (-(-dt).exp_m1()).ln())
        })
        .collect();
    Tensor::new(&[d], data).expect("dt bias shape")
}

impl<T: Scalar> SelectiveSsmParams<T> {
    pub fn init<R: Rng + ?Sized>(d: usize, n: usize, dt_rank: usize, rng: &mut R) -> Self {
        let s = 1.0 / (d as f64).sqrt();
        Self {
            log_a: s4d_real_log_a(d, n),
            dt_down: Tensor::randn(&[d, dt_rank], s, rng),
            dt_up: Tensor::randn(&[dt_rank, d], 1.0 / (dt_rank as f64).sqrt(), rng),
            dt_bias: dt_bias_init(d, rng),
            b_proj: Tensor::randn(&[d, n], s, rng),
            c_proj: Tensor::randn(&[d, n], s, rng),
            conv_width: 3,
        }
    }

    pub fn channels(&self) -> usize {
        self.log_a.shape()[0]
    }

    pub fn state(&self) -> usize {
        self.log_a.shape()[1]
    }

    pub fn dt_rank(&self) -> usize {
        self.dt_down.shape()[1]
    }

    pub fn tensors(&self) -> [&Tensor<T>; 6] {
        [&self.log_a, &self.dt_down, &self.dt_up, &self.dt_bias, &self.b_proj, &self.c_proj]
    }

    /// Per-step operands for input `x[L, D]`.
    pub fn scan_inputs(&self, x: &Tensor<T>) -> Result<SelectiveScanInputs<T>> {
        let tape = Tape::no_grad();
        let xv = tape.constant(x);
        let p = self.tensors().map(|t| tape.constant(t));
        let (delta, a, b, c) = project(xv, &p)?;
        Ok(SelectiveScanInputs {
            len: x.shape()[0],
            channels: self.channels(),
            state: self.state(),
            u: x.data().to_vec(),
            delta: delta.value().as_ref().clone(),
            a: a.value().as_ref().clone(),
            b: b.value().as_ref().clone(),
            c: c.value().as_ref().clone(),
        })
    }

    /// Sequential selective scan of `x[L, D]`.
    pub fn selective_scan(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let inp = self.scan_inputs(x)?;
        let (y, _) = inp.run(false);
        Tensor::new(x.shape(), y)
    }

    /// Same output via an associative prefix scan.
    pub fn parallel_scan(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let inp = self.scan_inputs(x)?;
        Tensor::new(x.shape(), super::scan::parallel_scan_inputs(&inp))
    }
}

/// Computes `(Δ, A, B, C)` on the tape from `x[L, D]` and the six parameter
/// vars in [`SelectiveSsmParams::tensors`] order.
pub fn project<'t, T: Scalar>(
    x: Var<'t, T>,
    p: &[Var<'t, T>; 6],
) -> Result<(Var<'t, T>, Var<'t, T>, Var<'t, T>, Var<'t, T>)> {
    let [log_a, dt_down, dt_up, dt_bias, b_proj, c_proj] = *p;
    let delta = x.linear(dt_down, None)?.linear(dt_up, Some(dt_bias))?.softplus();
    let a = log_a.exp().neg();
    let b = x.linear(b_proj, None)?;
    let c = x.linear(c_proj, None)?;
    Ok((delta, a, b, c))
}

/// Projection followed by the scan, fully on the tape.
pub fn selective_scan_var<'t, T: Scalar>(x: Var<'t, T>, p: &[Var<'t, T>; 6]) -> Result<Var<'t, T>> {
    let (delta, a, b, c) = project(x, p)?;
    x.selective_scan(delta, a, b, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::ssm::{ssm_recurrence, zoh_discretize, SsmContinuous};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Per-step oracle: build a continuous system per (t, d), discretise it,
    /// and advance the state one step at a time.
    fn oracle(inp: &SelectiveScanInputs<f64>) -> Vec<f64> {
        let (l, d, n) = (inp.len, inp.channels, inp.state);
        let mut y = vec![0.0; l * d];
        for ch in 0..d {
            let mut h = vec![0.0; n];
            for t in 0..l {
                let a: Vec<f64> = (0..n).map(|s| inp.a[ch * n + s]).collect();
                let b: Vec<f64> = (0..n).map(|s| inp.b[t * n + s]).collect();
                let c: Vec<f64> = (0..n).map(|s| inp.c[t * n + s]).collect();
                let sys = zoh_discretize(&SsmContinuous::from_diag(a, b, c).unwrap(), inp.delta[t * d + ch]).unwrap();
                let mut acc = 0.0;
                for s in 0..n {
                    h[s] = sys.a_bar[s] * h[s] + sys.b_bar[s] * inp.u[t * d + ch];
                    acc += sys.c[s] * h[s];
                }
                y[t * d + ch] = acc;
            }
        }
        y
    }

    #[test]
    fn matches_per_step_oracle_in_both_precisions() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p64 = SelectiveSsmParams::<f64>::init(4, 8, 1, &mut rng);
        let x64 = Tensor::<f64>::randn(&[16, 4], 1.0, &mut rng);
        let inp = p64.scan_inputs(&x64).unwrap();
        let expect = oracle(&inp);
        let y64 = p64.selective_scan(&x64).unwrap();
        for (a, b) in y64.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
        let p32 = SelectiveSsmParams::<f32> {
            log_a: p64.log_a.cast(),
            dt_down: p64.dt_down.cast(),
            dt_up: p64.dt_up.cast(),
            dt_bias: p64.dt_bias.cast(),
            b_proj: p64.b_proj.cast(),
            c_proj: p64.c_proj.cast(),
            conv_width: 3,
        };
        let y32 = p32.selective_scan(&x64.cast()).unwrap();
        for (a, b) in y32.data().iter().zip(&expect) {
            assert!((*a as f64 - b).abs() < 1e-5);
        }
    }

    #[test]
    fn constant_projections_reduce_to_time_invariant_recurrence() {
        let (l, n) = (6, 3);
        let a = vec![-0.5f64, -1.0, -2.0];
        let bv = vec![1.0, 0.5, -0.25];
        let cv = vec![0.3, -0.7, 1.1];
        let inp = SelectiveScanInputs {
            len: l,
            channels: 1,
            state: n,
            u: vec![1.0, -2.0, 0.5, 0.0, 3.0, 1.0],
            delta: vec![0.2; l],
            a: a.clone(),
            b: bv.iter().cycle().take(l * n).copied().collect(),
            c: cv.iter().cycle().take(l * n).copied().collect(),
        };
        let sys = zoh_discretize(&SsmContinuous::from_diag(a, bv, cv).unwrap(), 0.2).unwrap();
        let expect = ssm_recurrence(&sys, &inp.u);
        let (y, _) = inp.run(false);
        for (a, b) in y.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn single_step_is_c_bbar_x() {
        let inp = SelectiveScanInputs {
            len: 1,
            channels: 1,
            state: 2,
            u: vec![2.0],
            delta: vec![0.1],
            a: vec![-1.0, -3.0],
            b: vec![1.0, 2.0],
            c: vec![0.5, -1.0],
        };
        let expect: f64 = (0..2)
            .map(|s| inp.c[s] * zoh_input_coeff(0.1, inp.a[s]) * inp.b[s] * 2.0)
            .sum();
        assert!((inp.run(false).0[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn delta_is_positive_for_extreme_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = SelectiveSsmParams::<f64>::init(4, 4, 1, &mut rng);
        let x = Tensor::<f64>::randn(&[8, 4], 50.0, &mut rng);
        assert!(p.scan_inputs(&x).unwrap().delta.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn gradient_wrt_input_log_a_and_projections() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = SelectiveSsmParams::<f64>::init(3, 4, 1, &mut rng);
        let x = Tensor::<f64>::randn(&[7, 3], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&[7, 3], 1.0, &mut rng);
        let mut inputs = vec![x];
        inputs.extend(p.tensors().into_iter().cloned());
        let err = gradcheck::check(&inputs, 1e-5, |tape, v| {
            let params = [v[1], v[2], v[3], v[4], v[5], v[6]];
            let y = selective_scan_var(v[0], &params)?;
            Ok(y.mul(tape.constant(&w))?.sum())
        })
        .unwrap();
        assert!(err.passes(1e-6), "{err:?}");
    }
}
