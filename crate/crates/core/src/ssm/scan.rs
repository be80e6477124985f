use super::{ScanDirection, StepParams};
use crate::numerics::{Array, BackwardCtx, BackwardOp, NumericsError, Scalar, Var};

type Result<T> = std::result::Result<T, NumericsError>;

fn check_scan_inputs<T: Scalar>(x: &Array<T>, steps: &StepParams<T>, d_skip: &Array<T>) -> Result<()> {
    let (l, inner) = (steps.len(), steps.inner());
    if x.shape() != [l, inner] || d_skip.shape() != [inner] || steps.c.shape() != [l, steps.state_dim()] {
        return Err(NumericsError::Shape(format!(
            "scan inputs disagree: x {:?}, steps [{l}, {inner}, {}], c {:?}, d_skip {:?}",
            x.shape(),
            steps.state_dim(),
            steps.c.shape(),
            d_skip.shape()
        )));
    }
    Ok(())
}

/// Hidden states of the literal recurrence, `[L, inner, state]`.
///
/// `h_0 = 0`, `h_t = Abar_t h_{t-1} + Bbar_t x_t`, one channel-state pair at
/// a time.
pub fn naive_states<T: Scalar>(x: &Array<T>, steps: &StepParams<T>) -> Result<Array<T>> {
    let (l, inner, state) = (steps.len(), steps.inner(), steps.state_dim());
    if x.shape() != [l, inner] {
        return Err(NumericsError::Shape(format!(
            "scan input {:?} does not match steps [{l}, {inner}, {state}]",
            x.shape()
        )));
    }
    let mut hs = Array::zeros(&[l, inner, state]);
    for d in 0..inner {
        for n in 0..state {
            let mut h = T::zero();
            for t in 0..l {
                let at = (t * inner + d) * state + n;
                h = steps.abar.data()[at] * h + steps.bbar.data()[at] * x.data()[t * inner + d];
                hs.data_mut()[at] = h;
            }
        }
    }
    Ok(hs)
}

/// Reference scan: `y_t = C_t . h_t + D_skip * x_t`, computed from the
/// literal recurrence. Favors clarity over speed.
pub fn scan_naive<T: Scalar>(x: &Array<T>, steps: &StepParams<T>, d_skip: &Array<T>) -> Result<Array<T>> {
    check_scan_inputs(x, steps, d_skip)?;
    let (l, inner, state) = (steps.len(), steps.inner(), steps.state_dim());
    let hs = naive_states(x, steps)?;
    let mut y = Array::zeros(&[l, inner]);
    for t in 0..l {
        for d in 0..inner {
            let mut acc = T::zero();
            for n in 0..state {
                acc += steps.c.data()[t * state + n] * hs.data()[(t * inner + d) * state + n];
            }
            y.data_mut()[t * inner + d] = acc + d_skip.data()[d] * x.data()[t * inner + d];
        }
    }
    Ok(y)
}

/// Time index visited at step `s` of a scan in `direction`.
fn time_at(direction: ScanDirection, len: usize, s: usize) -> usize {
    match direction {
        ScanDirection::Forward => s,
        ScanDirection::Backward => len - 1 - s,
    }
}

/// Scan over precomputed step parameters, carrying the full state across
/// all channels at once. `Backward` visits `t = L-1, ..., 0`.
pub fn scan<T: Scalar>(
    x: &Array<T>,
    steps: &StepParams<T>,
    d_skip: &Array<T>,
    direction: ScanDirection,
) -> Result<Array<T>> {
    check_scan_inputs(x, steps, d_skip)?;
    let (l, inner, state) = (steps.len(), steps.inner(), steps.state_dim());
    let width = inner * state;
    let mut h = vec![T::zero(); width];
    let mut y = Array::zeros(&[l, inner]);
    for s in 0..l {
        let t = time_at(direction, l, s);
        let abar = &steps.abar.data()[t * width..(t + 1) * width];
        let bbar = &steps.bbar.data()[t * width..(t + 1) * width];
        let c = &steps.c.data()[t * state..(t + 1) * state];
        let xt = &x.data()[t * inner..(t + 1) * inner];
        let yt = &mut y.data_mut()[t * inner..(t + 1) * inner];
        for d in 0..inner {
            let mut acc = T::zero();
            for n in 0..state {
                let i = d * state + n;
                h[i] = abar[i] * h[i] + bbar[i] * xt[d];
                acc += c[n] * h[i];
            }
            yt[d] = acc + d_skip.data()[d] * xt[d];
        }
    }
    Ok(y)
}

/// Borrowed view of the selective-scan operands.
struct Operands<'a, T> {
    x: &'a [T],
    delta: &'a [T],
    a: &'a [T],
    b: &'a [T],
    len: usize,
    inner: usize,
    state: usize,
}

impl<T: Scalar> Operands<'_, T> {
    /// Advances `h` by one step at time `t`.
    fn step(&self, t: usize, h: &mut [T]) {
        let (inner, state) = (self.inner, self.state);
        for d in 0..inner {
            let dt = self.delta[t * inner + d];
            let dx = dt * self.x[t * inner + d];
            for n in 0..state {
                let i = d * state + n;
                h[i] = (dt * self.a[i]).exp() * h[i] + dx * self.b[t * state + n];
            }
        }
    }
}

/// Reverse rule for [`selective_scan`]. Only the state at each chunk
/// boundary is kept from the forward pass; the states inside a chunk are
/// recomputed while walking it backwards.
struct SelectiveScanBack<T: Scalar> {
    direction: ScanDirection,
    chunk: usize,
    /// `[chunks, inner, state]`: state before the first step of each chunk.
    checkpoints: Array<T>,
}

impl<T: Scalar> BackwardOp<T> for SelectiveScanBack<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Array<T>) -> Vec<Option<Array<T>>> {
        let (x, delta, a, b, c, dsk) = (
            ctx.input(0),
            ctx.input(1),
            ctx.input(2),
            ctx.input(3),
            ctx.input(4),
            ctx.input(5),
        );
        let (l, inner) = (x.shape()[0], x.shape()[1]);
        let state = a.shape()[1];
        let width = inner * state;
        let ops = Operands {
            x: x.data(),
            delta: delta.data(),
            a: a.data(),
            b: b.data(),
            len: l,
            inner,
            state,
        };
        let (cd, gy) = (c.data(), g.data());

        let mut gx = vec![T::zero(); l * inner];
        let mut gdelta = vec![T::zero(); l * inner];
        let mut ga = vec![T::zero(); width];
        let mut gb = vec![T::zero(); l * state];
        let mut gc = vec![T::zero(); l * state];
        let mut gd = vec![T::zero(); inner];

        for t in 0..l {
            for d in 0..inner {
                let gyt = gy[t * inner + d];
                gx[t * inner + d] = gyt * dsk.data()[d];
                gd[d] += gyt * x.data()[t * inner + d];
            }
        }

        let mut carry = vec![T::zero(); width];
        let mut ghn = vec![T::zero(); width];
        let chunks = self.checkpoints.shape()[0];
        for k in (0..chunks).rev() {
            let start = k * self.chunk;
            let end = (start + self.chunk).min(ops.len);
            // states[j] is the state after step start + j - 1
            let mut states = Vec::with_capacity((end - start + 1) * width);
            states.extend_from_slice(&self.checkpoints.data()[k * width..(k + 1) * width]);
            let mut h = states.clone();
            for s in start..end {
                ops.step(time_at(self.direction, l, s), &mut h);
                states.extend_from_slice(&h);
            }
            for s in (start..end).rev() {
                let t = time_at(self.direction, l, s);
                let j = s - start;
                let h_prev = &states[j * width..(j + 1) * width];
                let h_cur = &states[(j + 1) * width..(j + 2) * width];
                for d in 0..inner {
                    let gyt = gy[t * inner + d];
                    let dt = ops.delta[t * inner + d];
                    let xt = ops.x[t * inner + d];
                    let mut gdt = T::zero();
                    let mut gxt = T::zero();
                    for n in 0..state {
                        let i = d * state + n;
                        let cn = cd[t * state + n];
                        let bn = ops.b[t * state + n];
                        let abar = (dt * ops.a[i]).exp();
                        let gh = carry[i] + gyt * cn;
                        ghn[i] = gh;
                        gc[t * state + n] += gyt * h_cur[i];
                        let g_abar = gh * h_prev[i];
                        gdt += g_abar * abar * ops.a[i] + gh * bn * xt;
                        ga[i] += g_abar * abar * dt;
                        gb[t * state + n] += gh * dt * xt;
                        gxt += gh * dt * bn;
                        carry[i] = gh * abar;
                    }
                    gdelta[t * inner + d] += gdt;
                    gx[t * inner + d] += gxt;
                }
            }
        }

        let wrap = |shape: &[usize], v: Vec<T>| Array::new(shape, v).expect("gradient shape");
        let grads = [
            wrap(x.shape(), gx),
            wrap(delta.shape(), gdelta),
            wrap(a.shape(), ga),
            wrap(b.shape(), gb),
            wrap(c.shape(), gc),
            wrap(dsk.shape(), gd),
        ];
        grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| ctx.needs_grad(i).then_some(g))
            .collect()
    }
}

/// Differentiable selective scan in one fused primitive.
///
/// `x [L, inner]`, `delta [L, inner]` (positive), `a [inner, state]`
/// (negative continuous diagonal), `b`, `c [L, state]`, `d_skip [inner]`.
/// Discretization happens inside the scan, so `[L, inner, state]` tensors
/// are never materialized; the reverse pass keeps about `sqrt(L)` states.
pub fn selective_scan<'t, T: Scalar>(
    x: Var<'t, T>,
    delta: Var<'t, T>,
    a: Var<'t, T>,
    b: Var<'t, T>,
    c: Var<'t, T>,
    d_skip: Var<'t, T>,
    direction: ScanDirection,
) -> Result<Var<'t, T>> {
    let (xv, dv, av, bv, cv, sv) = (x.value(), delta.value(), a.value(), b.value(), c.value(), d_skip.value());
    if xv.rank() != 2 || av.rank() != 2 {
        return Err(NumericsError::Shape(format!(
            "selective scan expects x [L, inner] and a [inner, state], got {:?} and {:?}",
            xv.shape(),
            av.shape()
        )));
    }
    let (l, inner) = (xv.shape()[0], xv.shape()[1]);
    let state = av.shape()[1];
    if l == 0 {
        return Err(NumericsError::Empty("selective scan over an empty sequence".into()));
    }
    if dv.shape() != xv.shape()
        || av.shape()[0] != inner
        || bv.shape() != [l, state]
        || cv.shape() != [l, state]
        || sv.shape() != [inner]
    {
        return Err(NumericsError::Shape(format!(
            "selective scan operands disagree: x {:?}, delta {:?}, a {:?}, b {:?}, c {:?}, d_skip {:?}",
            xv.shape(),
            dv.shape(),
            av.shape(),
            bv.shape(),
            cv.shape(),
            sv.shape()
        )));
    }
    let ops = Operands {
        x: xv.data(),
        delta: dv.data(),
        a: av.data(),
        b: bv.data(),
        len: l,
        inner,
        state,
    };
    let width = inner * state;
    let chunk = (l as f64).sqrt().ceil() as usize;
    let chunks = l.div_ceil(chunk);
    let keep = x.requires_grad()
        || delta.requires_grad()
        || a.requires_grad()
        || b.requires_grad()
        || c.requires_grad()
        || d_skip.requires_grad();
    let mut checkpoints = Vec::with_capacity(if keep { chunks * width } else { 0 });
    let mut h = vec![T::zero(); width];
    let mut y = vec![T::zero(); l * inner];
    for s in 0..l {
        if keep && s % chunk == 0 {
            checkpoints.extend_from_slice(&h);
        }
        let t = time_at(direction, l, s);
        ops.step(t, &mut h);
        let ct = &cv.data()[t * state..(t + 1) * state];
        for d in 0..inner {
            let mut acc = T::zero();
            for n in 0..state {
                acc += ct[n] * h[d * state + n];
            }
            y[t * inner + d] = acc + sv.data()[d] * ops.x[t * inner + d];
        }
    }
    let checkpoints = if keep {
        Array::new(&[chunks, inner, state], checkpoints)?
    } else {
        Array::zeros(&[0, inner, state])
    };
    let out = Array::new(&[l, inner], y)?;
    drop((xv, dv, av, bv, cv, sv));
    x.tape().record(
        "selective_scan",
        out,
        &[x, delta, a, b, c, d_skip],
        Box::new(SelectiveScanBack {
            direction,
            chunk,
            checkpoints,
        }),
    )
}
