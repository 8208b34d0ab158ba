//! Rollouts under piecewise-constant controls, with exact derivatives of the
//! discrete RK4 recursion with respect to the controls.
//!
//! Two routes are provided: forward sensitivities (`∂x_k/∂u_n` for every
//! node) and a taped rollout whose reverse sweep returns the gradient of any
//! scalar function of the node states.

use super::{check_finite, rk4_step, DifferentiableField, Exogenous, InputSignal, IntegrationError, Side, StepGrid, VectorField};

/// Known scalar disturbance entering the vector field.
pub trait Disturbance {
    fn value(&self, t: f64, side: Side) -> f64;
}

/// `d ≡ 0`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NoDisturbance;

impl Disturbance for NoDisturbance {
    fn value(&self, _t: f64, _side: Side) -> f64 {
        0.0
    }
}

impl<D: Disturbance + ?Sized> Disturbance for &D {
    fn value(&self, t: f64, side: Side) -> f64 {
        (**self).value(t, side)
    }
}

/// Caches a disturbance at `t0 + j·h/2` on `[t0, t1]`, both sides; other
/// times fall through to the wrapped signal. Values are copied verbatim.
#[derive(Debug, Clone)]
pub struct TabulatedDisturbance<D> {
    inner: D,
    t0: f64,
    half: f64,
    right: Vec<f64>,
    left: Vec<f64>,
}

impl<D: Disturbance> TabulatedDisturbance<D> {
    pub fn new(inner: D, t0: f64, t1: f64, h: f64) -> Self {
        let half = 0.5 * h;
        let n = ((t1 - t0) / half).floor() as usize;
        let right = (0..=n).map(|j| inner.value(t0 + j as f64 * half, Side::Right)).collect();
        let left = (0..=n).map(|j| inner.value(t0 + j as f64 * half, Side::Left)).collect();
        Self { inner, t0, half, right, left }
    }
}

impl<D: Disturbance> Disturbance for TabulatedDisturbance<D> {
    fn value(&self, t: f64, side: Side) -> f64 {
        let j = ((t - self.t0) / self.half).round();
        if j >= 0.0 && (j as usize) < self.right.len() && self.t0 + j * self.half == t {
            match side {
                Side::Right => self.right[j as usize],
                Side::Left => self.left[j as usize],
            }
        } else {
            self.inner.value(t, side)
        }
    }
}

/// Controls held constant on `[nodes[n], nodes[n+1])`, plus a disturbance.
#[derive(Debug, Clone, Copy)]
pub struct PiecewiseConstantInput<'a, D, const NU: usize> {
    pub nodes: &'a [f64],
    pub values: &'a [[f64; NU]],
    pub disturbance: &'a D,
}

impl<D: Disturbance, const NU: usize> PiecewiseConstantInput<'_, D, NU> {
    fn interval(&self, t: f64, side: Side) -> usize {
        let n = self.values.len();
        let idx = match side {
            // last node ≤ t
            Side::Right => self.nodes.partition_point(|&x| x <= t).saturating_sub(1),
            // first node ≥ t, minus one
            Side::Left => self.nodes.partition_point(|&x| x < t).saturating_sub(1),
        };
        idx.min(n - 1)
    }
}

impl<D: Disturbance, const NU: usize> InputSignal<NU> for PiecewiseConstantInput<'_, D, NU> {
    fn domain(&self) -> (f64, f64) {
        (self.nodes[0], self.nodes[self.nodes.len() - 1])
    }

    fn sample(&self, t: f64, side: Side) -> Exogenous<NU> {
        Exogenous { input: self.values[self.interval(t, side)], disturbance: self.disturbance.value(t, side) }
    }
}

/// One control value over one step, plus the disturbance.
struct HeldInput<'a, D, const NU: usize> {
    u: [f64; NU],
    span: (f64, f64),
    disturbance: &'a D,
}

impl<D: Disturbance, const NU: usize> InputSignal<NU> for HeldInput<'_, D, NU> {
    fn domain(&self) -> (f64, f64) {
        self.span
    }

    fn sample(&self, t: f64, side: Side) -> Exogenous<NU> {
        Exogenous { input: self.u, disturbance: self.disturbance.value(t, side) }
    }
}

fn check_controls<const NU: usize>(nodes: &[f64], controls: &[[f64; NU]]) {
    assert!(nodes.len() >= 2, "control grid needs at least two nodes");
    assert_eq!(nodes.len(), controls.len() + 1, "one control value per grid interval");
}

/// Node states `x_0..x_N` under piecewise-constant controls, RK4 sub-steps of
/// nominal size `h` inside every interval.
pub fn rollout_piecewise<F, D, const NX: usize, const NU: usize>(
    field: &F,
    p: &F::Params,
    x0: [f64; NX],
    nodes: &[f64],
    controls: &[[f64; NU]],
    disturbance: &D,
    h: f64,
) -> Result<Vec<[f64; NX]>, IntegrationError>
where
    F: VectorField<NX, NU> + ?Sized,
    D: Disturbance,
{
    check_controls(nodes, controls);
    let mut out = Vec::with_capacity(nodes.len());
    let mut x = x0;
    check_finite(nodes[0], &x)?;
    out.push(x);
    for (n, u) in controls.iter().enumerate() {
        let grid = StepGrid::new(nodes[n], nodes[n + 1], h)?;
        let held = HeldInput { u: *u, span: (nodes[n], nodes[n + 1]), disturbance };
        for i in 0..grid.steps() {
            let (t, hs) = grid.step(i);
            x = rk4_step(field, &x, t, hs, &held, p)?;
        }
        out.push(x);
    }
    Ok(out)
}

struct Stages<const NX: usize, const NU: usize> {
    t: f64,
    h: f64,
    y: [[f64; NX]; 4],
    e: [Exogenous<NU>; 3],
}

impl<const NX: usize, const NU: usize> Stages<NX, NU> {
    fn stage_exo(&self, s: usize) -> (&Exogenous<NU>, f64) {
        match s {
            0 => (&self.e[0], self.t),
            1 | 2 => (&self.e[1], self.t + 0.5 * self.h),
            _ => (&self.e[2], self.t + self.h),
        }
    }
}

/// Same arithmetic as [`rk4_step`], keeping the stage arguments.
fn rk4_with_stages<F, D, const NX: usize, const NU: usize>(
    field: &F,
    p: &F::Params,
    x: &[f64; NX],
    t: f64,
    h: f64,
    u: &[f64; NU],
    disturbance: &D,
) -> Result<([f64; NX], Stages<NX, NU>), IntegrationError>
where
    F: VectorField<NX, NU> + ?Sized,
    D: Disturbance,
{
    let tm = t + 0.5 * h;
    let te = t + h;
    let e = [
        Exogenous { input: *u, disturbance: disturbance.value(t, Side::Right) },
        Exogenous { input: *u, disturbance: disturbance.value(tm, Side::Right) },
        Exogenous { input: *u, disturbance: disturbance.value(te, Side::Left) },
    ];
    let shift = |a: f64, k: &[f64; NX]| {
        let mut y = *x;
        for i in 0..NX {
            y[i] += a * k[i];
        }
        y
    };
    let y1 = *x;
    let k1 = field.eval(&y1, &e[0].input, e[0].disturbance, t, p);
    let y2 = shift(0.5 * h, &k1);
    let k2 = field.eval(&y2, &e[1].input, e[1].disturbance, tm, p);
    let y3 = shift(0.5 * h, &k2);
    let k3 = field.eval(&y3, &e[1].input, e[1].disturbance, tm, p);
    let y4 = shift(h, &k3);
    let k4 = field.eval(&y4, &e[2].input, e[2].disturbance, te, p);
    let mut out = *x;
    let w = h / 6.0;
    for i in 0..NX {
        out[i] += w * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    check_finite(te, &out)?;
    Ok((out, Stages { t, h, y: [y1, y2, y3, y4], e }))
}

/// Node states and `∂x_k/∂u` for every node `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityRollout<const NX: usize, const NU: usize> {
    pub states: Vec<[f64; NX]>,
    /// `sens[k]` is an `NX × (N·NU)` row-major matrix; entry `(i, n·NU + j)`
    /// is `∂x_k[i]/∂u_n[j]`.
    pub sens: Vec<Vec<f64>>,
}

impl<const NX: usize, const NU: usize> SensitivityRollout<NX, NU> {
    pub fn dstate_dcontrol(&self, k: usize, i: usize, n: usize, j: usize) -> f64 {
        let cols = self.sens[k].len() / NX;
        self.sens[k][i * cols + n * NU + j]
    }
}

/// Forward sensitivity propagation through the RK4 recursion.
pub fn propagate_with_sensitivities<F, D, const NX: usize, const NU: usize>(
    field: &F,
    p: &F::Params,
    x0: [f64; NX],
    nodes: &[f64],
    controls: &[[f64; NU]],
    disturbance: &D,
    h: f64,
) -> Result<SensitivityRollout<NX, NU>, IntegrationError>
where
    F: DifferentiableField<NX, NU> + ?Sized,
    D: Disturbance,
{
    check_controls(nodes, controls);
    let n_int = controls.len();
    let cols = n_int * NU;
    // NX × cols, row-major
    let mut s = vec![0.0; NX * cols];
    let mut x = x0;
    check_finite(nodes[0], &x)?;
    let mut states = vec![x];
    let mut sens = vec![s.clone()];

    let mut dk = [vec![0.0; NX * cols], vec![0.0; NX * cols], vec![0.0; NX * cols], vec![0.0; NX * cols]];
    let mut dy = vec![0.0; NX * cols];

    for (n, u) in controls.iter().enumerate() {
        let grid = StepGrid::new(nodes[n], nodes[n + 1], h)?;
        // only columns of intervals ≤ n can be nonzero
        let live = (n + 1) * NU;
        for i in 0..grid.steps() {
            let (t, hs) = grid.step(i);
            let (next, st) = rk4_with_stages(field, p, &x, t, hs, u, disturbance)?;
            let offsets = [0.0, 0.5 * hs, 0.5 * hs, hs];
            for stage in 0..4 {
                // dy = S + offset · dk[stage−1]
                for r in 0..NX {
                    for c in 0..live {
                        let prev = if stage == 0 { 0.0 } else { dk[stage - 1][r * cols + c] };
                        dy[r * cols + c] = s[r * cols + c] + offsets[stage] * prev;
                    }
                }
                let (e, ts) = st.stage_exo(stage);
                let (a, b) = field.jacobians(&st.y[stage], &e.input, e.disturbance, ts, p);
                let out = &mut dk[stage];
                for r in 0..NX {
                    for c in 0..live {
                        let mut acc = 0.0;
                        for m in 0..NX {
                            acc += a[r][m] * dy[m * cols + c];
                        }
                        out[r * cols + c] = acc;
                    }
                    for j in 0..NU {
                        out[r * cols + n * NU + j] += b[r][j];
                    }
                }
            }
            let w = hs / 6.0;
            for r in 0..NX {
                for c in 0..live {
                    let idx = r * cols + c;
                    s[idx] += w * (dk[0][idx] + 2.0 * dk[1][idx] + 2.0 * dk[2][idx] + dk[3][idx]);
                }
            }
            x = next;
        }
        states.push(x);
        sens.push(s.clone());
    }
    Ok(SensitivityRollout { states, sens })
}

/// Stage record of an RK4 rollout under piecewise-constant controls, for
/// reverse-mode differentiation.
pub struct Rk4Tape<const NX: usize, const NU: usize> {
    steps: Vec<(usize, Stages<NX, NU>)>,
    n_intervals: usize,
}

impl<const NX: usize, const NU: usize> Rk4Tape<NX, NU> {
    /// Roll out and record. Returns the node states together with the tape.
    pub fn record<F, D>(
        field: &F,
        p: &F::Params,
        x0: [f64; NX],
        nodes: &[f64],
        controls: &[[f64; NU]],
        disturbance: &D,
        h: f64,
    ) -> Result<(Vec<[f64; NX]>, Self), IntegrationError>
    where
        F: VectorField<NX, NU> + ?Sized,
        D: Disturbance,
    {
        check_controls(nodes, controls);
        let mut states = Vec::with_capacity(nodes.len());
        let mut steps = Vec::new();
        let mut x = x0;
        check_finite(nodes[0], &x)?;
        states.push(x);
        for (n, u) in controls.iter().enumerate() {
            let grid = StepGrid::new(nodes[n], nodes[n + 1], h)?;
            for i in 0..grid.steps() {
                let (t, hs) = grid.step(i);
                let (next, st) = rk4_with_stages(field, p, &x, t, hs, u, disturbance)?;
                steps.push((n, st));
                x = next;
            }
            states.push(x);
        }
        Ok((states, Self { steps, n_intervals: controls.len() }))
    }

    /// Reverse sweep. `node_seeds[k]` is `∂Φ/∂x_k` for a scalar `Φ` of the
    /// node states; the return value is `(∂Φ/∂x_0, ∂Φ/∂u_n for all n)`
    /// where the dependence of later nodes on earlier ones is included.
    pub fn backward<F>(&self, field: &F, p: &F::Params, node_seeds: &[[f64; NX]]) -> ([f64; NX], Vec<[f64; NU]>)
    where
        F: DifferentiableField<NX, NU> + ?Sized,
    {
        assert_eq!(node_seeds.len(), self.n_intervals + 1);
        let mut ubar = vec![[0.0; NU]; self.n_intervals];
        let mut lam = node_seeds[self.n_intervals];
        let mut current = self.n_intervals;
        for (n, st) in self.steps.iter().rev() {
            while current > *n + 1 {
                current -= 1;
                add(&mut lam, &node_seeds[current]);
            }
            lam = step_adjoint(field, p, st, &lam, &mut ubar[*n]);
        }
        while current > 0 {
            current -= 1;
            add(&mut lam, &node_seeds[current]);
        }
        (lam, ubar)
    }
}

fn add<const N: usize>(a: &mut [f64; N], b: &[f64; N]) {
    for i in 0..N {
        a[i] += b[i];
    }
}

fn step_adjoint<F, const NX: usize, const NU: usize>(
    field: &F,
    p: &F::Params,
    st: &Stages<NX, NU>,
    lam: &[f64; NX],
    ubar: &mut [f64; NU],
) -> [f64; NX]
where
    F: DifferentiableField<NX, NU> + ?Sized,
{
    let h = st.h;
    let w = h / 6.0;
    let mut kb = [[0.0; NX]; 4];
    for i in 0..NX {
        kb[0][i] = w * lam[i];
        kb[1][i] = 2.0 * w * lam[i];
        kb[2][i] = 2.0 * w * lam[i];
        kb[3][i] = w * lam[i];
    }
    let mut xbar = *lam;
    let feed = [0.0, 0.5 * h, 0.5 * h, h];
    for stage in (0..4).rev() {
        let (e, ts) = st.stage_exo(stage);
        let (a, b) = field.jacobians(&st.y[stage], &e.input, e.disturbance, ts, p);
        let mut yb = [0.0; NX];
        for m in 0..NX {
            let mut acc = 0.0;
            for r in 0..NX {
                acc += a[r][m] * kb[stage][r];
            }
            yb[m] = acc;
        }
        for j in 0..NU {
            let mut acc = 0.0;
            for r in 0..NX {
                acc += b[r][j] * kb[stage][r];
            }
            ubar[j] += acc;
        }
        add(&mut xbar, &yb);
        if stage > 0 {
            for i in 0..NX {
                kb[stage - 1][i] += feed[stage] * yb[i];
            }
        }
    }
    xbar
}
