//! Selective state-space core.
//!
//! A continuous diagonal system `h' = A h + B x`, `y = C h` is discretized
//! per timestep with zero-order hold on `A` (`Abar = exp(delta * A)`) and the
//! Euler rule on `B` (`Bbar = delta * B`). In the selective form `delta`,
//! `B` and `C` are computed from the input at every step. Each inner channel
//! runs its own `state_dim`-wide recurrence; a per-channel skip `D` adds
//! `D * x` to the output.

mod scan;

pub use scan::{naive_states, scan, scan_naive, selective_scan};

use rand::Rng;

use crate::init;
use crate::numerics::ops::{self, Activation};
use crate::numerics::{Array, NumericsError, Scalar, Var};

type Result<T> = std::result::Result<T, NumericsError>;

/// Direction in which a scan walks the sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanDirection {
    Forward,
    Backward,
}

/// Parameters of one selective SSM, generic over the handle type so the
/// same layout serves stored arrays, parameter ids and tape variables.
///
/// Shapes with `inner` channels, `state` width and rank `r`:
/// `a_log [inner, state]`, `dt_down [inner, r]`, `dt_up [r, inner]`,
/// `dt_bias [inner]`, `b_proj [inner, state]`, `c_proj [inner, state]`,
/// `d_skip [inner]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmParams<H> {
    /// `log(-A)`; `A = -exp(a_log)` is strictly negative.
    pub a_log: H,
    pub dt_down: H,
    pub dt_up: H,
    pub dt_bias: H,
    pub b_proj: H,
    pub c_proj: H,
    pub d_skip: H,
}

impl<H> SsmParams<H> {
    pub fn map<U>(&self, mut f: impl FnMut(&H) -> U) -> SsmParams<U> {
        SsmParams {
            a_log: f(&self.a_log),
            dt_down: f(&self.dt_down),
            dt_up: f(&self.dt_up),
            dt_bias: f(&self.dt_bias),
            b_proj: f(&self.b_proj),
            c_proj: f(&self.c_proj),
            d_skip: f(&self.d_skip),
        }
    }

    /// Mutable fields in [`Self::named`] order.
    pub fn params_mut(&mut self) -> [&mut H; 7] {
        [
            &mut self.a_log,
            &mut self.dt_down,
            &mut self.dt_up,
            &mut self.dt_bias,
            &mut self.b_proj,
            &mut self.c_proj,
            &mut self.d_skip,
        ]
    }

    /// Fields in a fixed order, with their names.
    pub fn named(&self) -> [(&'static str, &H); 7] {
        [
            ("a_log", &self.a_log),
            ("dt_down", &self.dt_down),
            ("dt_up", &self.dt_up),
            ("dt_bias", &self.dt_bias),
            ("b_proj", &self.b_proj),
            ("c_proj", &self.c_proj),
            ("d_skip", &self.d_skip),
        ]
    }
}

/// Rank of the low-rank delta projection: `ceil(inner / 16)`.
pub fn dt_rank(inner: usize) -> usize {
    inner.div_ceil(16).max(1)
}

pub const DT_MIN: f64 = 1e-3;
pub const DT_MAX: f64 = 1e-1;
const DT_FLOOR: f64 = 1e-4;

/// Mamba-style initialization.
///
/// `A_n = -(n+1)` for every channel, `D = 1`, and the delta bias set so that
/// `softplus(bias)` is log-uniform in `[DT_MIN, DT_MAX]`.
pub fn init_params<T: Scalar, R: Rng + ?Sized>(inner: usize, state_dim: usize, rng: &mut R) -> SsmParams<Array<T>> {
    let r = dt_rank(inner);
    let a_log = Array::from_fn(&[inner, state_dim], |i| T::from_f64(((i % state_dim) + 1) as f64).ln());
    let dt_bias = Array::from_fn(&[inner], |_| {
        let u: f64 = rng.gen();
        let dt = (DT_MIN.ln() + u * (DT_MAX.ln() - DT_MIN.ln())).exp().max(DT_FLOOR);
        T::from_f64(inverse_softplus(dt))
    });
    SsmParams {
        a_log,
        dt_down: init::uniform(&[inner, r], 1.0 / (inner as f64).sqrt(), rng),
        dt_up: init::uniform(&[r, inner], 1.0 / (r as f64).sqrt(), rng),
        dt_bias,
        b_proj: init::uniform(&[inner, state_dim], 1.0 / (inner as f64).sqrt(), rng),
        c_proj: init::uniform(&[inner, state_dim], 1.0 / (inner as f64).sqrt(), rng),
        d_skip: Array::ones(&[inner]),
    }
}

/// `y` such that `softplus(y) == x`, for `x > 0`.
pub fn inverse_softplus(x: f64) -> f64 {
    x + (-(-x).exp_m1()).ln()
}

/// Zero-order hold on `A`, Euler on `B`: returns `(exp(delta*a), delta*b)`.
pub fn discretize<T: Scalar>(a: T, b: T, delta: T) -> Result<(T, T)> {
    if !(delta > T::zero()) {
        return Err(NumericsError::Invalid(format!(
            "discretization step must be positive, got {delta}"
        )));
    }
    Ok(((delta * a).exp(), delta * b))
}

/// Per-timestep discretized parameters, fully materialized.
///
/// `abar`, `bbar`: `[L, inner, state]`; `c`: `[L, state]`.
#[derive(Debug, Clone)]
pub struct StepParams<T: Scalar> {
    pub abar: Array<T>,
    pub bbar: Array<T>,
    pub c: Array<T>,
}

impl<T: Scalar> StepParams<T> {
    /// Discretizes selective parameters: `a [inner, state]` (negative),
    /// `delta [L, inner]`, `b [L, state]`, `c [L, state]`.
    pub fn discretize(a: &Array<T>, delta: &Array<T>, b: &Array<T>, c: &Array<T>) -> Result<Self> {
        if a.rank() != 2 || delta.rank() != 2 || b.rank() != 2 || c.rank() != 2 {
            return Err(NumericsError::Shape("step parameters must be 2-D".into()));
        }
        let (inner, state) = (a.shape()[0], a.shape()[1]);
        let l = delta.shape()[0];
        if delta.shape()[1] != inner || b.shape() != [l, state] || c.shape() != [l, state] {
            return Err(NumericsError::Shape(format!(
                "step parameters disagree: a {:?}, delta {:?}, b {:?}, c {:?}",
                a.shape(),
                delta.shape(),
                b.shape(),
                c.shape()
            )));
        }
        let mut abar = Array::zeros(&[l, inner, state]);
        let mut bbar = Array::zeros(&[l, inner, state]);
        for t in 0..l {
            for d in 0..inner {
                let dt = delta.data()[t * inner + d];
                for n in 0..state {
                    let (ab, bb) = discretize(a.data()[d * state + n], b.data()[t * state + n], dt)?;
                    let at = (t * inner + d) * state + n;
                    abar.data_mut()[at] = ab;
                    bbar.data_mut()[at] = bb;
                }
            }
        }
        Ok(StepParams { abar, bbar, c: c.clone() })
    }

    pub fn len(&self) -> usize {
        self.abar.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn inner(&self) -> usize {
        self.abar.shape()[1]
    }

    pub fn state_dim(&self) -> usize {
        self.abar.shape()[2]
    }

    /// Same parameters in reverse time order.
    pub fn reversed(&self) -> Self {
        let rev = |a: &Array<T>| {
            let l = a.shape()[0];
            let w = if l == 0 { 0 } else { a.len() / l };
            let mut out = Vec::with_capacity(a.len());
            for t in (0..l).rev() {
                out.extend_from_slice(&a.data()[t * w..(t + 1) * w]);
            }
            Array::new(a.shape(), out).expect("same shape")
        };
        StepParams {
            abar: rev(&self.abar),
            bbar: rev(&self.bbar),
            c: rev(&self.c),
        }
    }
}

/// Input-dependent parameters for one sequence.
#[derive(Debug, Clone, Copy)]
pub struct Selective<'t, T: Scalar> {
    /// `[L, inner]`, strictly positive.
    pub delta: Var<'t, T>,
    /// `[L, state]`
    pub b: Var<'t, T>,
    /// `[L, state]`
    pub c: Var<'t, T>,
}

/// Maps each timestep of `x [L, inner]` to its own `(delta, B, C)`.
///
/// `delta = softplus(x W_down W_up + bias)`, `B = x W_B`, `C = x W_C`.
pub fn selectivize<'t, T: Scalar>(x: Var<'t, T>, p: &SsmParams<Var<'t, T>>) -> Result<Selective<'t, T>> {
    let low = ops::linear(x, p.dt_down, None)?;
    let pre = ops::linear(low, p.dt_up, Some(p.dt_bias))?;
    Ok(Selective {
        delta: ops::activation(pre, Activation::Softplus)?,
        b: ops::linear(x, p.b_proj, None)?,
        c: ops::linear(x, p.c_proj, None)?,
    })
}

/// `A = -exp(a_log)`.
pub fn continuous_a<'t, T: Scalar>(a_log: Var<'t, T>) -> Result<Var<'t, T>> {
    ops::scale(ops::activation(a_log, Activation::Exp)?, -1.0)
}

/// Full selective SSM over `x [L, inner]`.
pub fn ssm_forward<'t, T: Scalar>(
    x: Var<'t, T>,
    p: &SsmParams<Var<'t, T>>,
    direction: ScanDirection,
) -> Result<Var<'t, T>> {
    let sel = selectivize(x, p)?;
    let a = continuous_a(p.a_log)?;
    selective_scan(x, sel.delta, a, sel.b, sel.c, p.d_skip, direction)
}

#[cfg(test)]
mod tests;
