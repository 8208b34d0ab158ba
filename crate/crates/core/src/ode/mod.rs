//! Fixed-step explicit Runge-Kutta integration of parametric ODEs.
//!
//! Everything downstream (likelihood evaluation, scenario rollouts, ground
//! truth) goes through [`integrate_flow`]. Exogenous signals are sampled at
//! the stage times of each step; a stage that sits on the end of a step reads
//! the signal's left limit, so a signal that switches exactly on a step
//! boundary is seen as constant over the whole step.

mod rk4;
mod sensitivity;
mod tsit5;

pub use rk4::rk4_step;
pub use sensitivity::{
    propagate_with_sensitivities, rollout_piecewise, Disturbance, NoDisturbance, PiecewiseConstantInput, Rk4Tape,
    SensitivityRollout, TabulatedDisturbance,
};
pub use tsit5::{tsit5_step, tsit54_integrate};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Which one-sided value to read from a signal at a given time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// Value on `[t, t + ε)`; what a right-continuous signal reports at `t`.
    Right,
    /// Limit from below, value on `(t − ε, t]`.
    Left,
}

/// Input and disturbance values seen by the vector field at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Exogenous<const NU: usize> {
    pub input: [f64; NU],
    pub disturbance: f64,
}

/// Parametric right-hand side `ẋ = f(x, u, d, t; p)`.
pub trait VectorField<const NX: usize, const NU: usize> {
    type Params;

    fn eval(&self, x: &[f64; NX], u: &[f64; NU], d: f64, t: f64, p: &Self::Params) -> [f64; NX];
}

/// A vector field with analytic Jacobians, `a[i][j] = ∂f_i/∂x_j` and
/// `b[i][j] = ∂f_i/∂u_j`.
pub trait DifferentiableField<const NX: usize, const NU: usize>: VectorField<NX, NU> {
    fn jacobians(
        &self,
        x: &[f64; NX],
        u: &[f64; NU],
        d: f64,
        t: f64,
        p: &Self::Params,
    ) -> ([[f64; NX]; NX], [[f64; NU]; NX]);
}

/// Known input trajectory together with the known scalar disturbance.
pub trait InputSignal<const NU: usize> {
    /// Closed interval on which the signal is defined.
    fn domain(&self) -> (f64, f64);

    fn sample(&self, t: f64, side: Side) -> Exogenous<NU>;
}

impl<const NU: usize, S: InputSignal<NU> + ?Sized> InputSignal<NU> for &S {
    fn domain(&self) -> (f64, f64) {
        (**self).domain()
    }

    fn sample(&self, t: f64, side: Side) -> Exogenous<NU> {
        (**self).sample(t, side)
    }
}

/// Zero input and zero disturbance on a fixed domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZeroInput {
    pub start: f64,
    pub end: f64,
}

impl<const NU: usize> InputSignal<NU> for ZeroInput {
    fn domain(&self) -> (f64, f64) {
        (self.start, self.end)
    }

    fn sample(&self, _t: f64, _side: Side) -> Exogenous<NU> {
        Exogenous { input: [0.0; NU], disturbance: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Rk4,
    Tsit5,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    /// Step size in minutes.
    pub step: f64,
    pub scheme: Scheme,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self { step: 0.5, scheme: Scheme::Rk4 }
    }
}

impl IntegratorConfig {
    pub fn rk4(step: f64) -> Self {
        Self { step, scheme: Scheme::Rk4 }
    }

    pub fn tsit5(step: f64) -> Self {
        Self { step, scheme: Scheme::Tsit5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<const NX: usize> {
    pub times: Vec<f64>,
    pub states: Vec<[f64; NX]>,
}

impl<const NX: usize> Trajectory<NX> {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Component `i` of every recorded state.
    pub fn component(&self, i: usize) -> Vec<f64> {
        self.states.iter().map(|x| x[i]).collect()
    }

    pub fn last(&self) -> Option<&[f64; NX]> {
        self.states.last()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IntegrationError {
    #[error("non-finite state at t = {t} min: {state:?}")]
    NonFinite { t: f64, state: Vec<f64> },
    #[error("step size must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error("invalid integration interval [{t0}, {t1}]")]
    InvalidInterval { t0: f64, t1: f64 },
    #[error("interval [{t0}, {t1}] leaves the input domain [{start}, {end}]")]
    OutsideDomain { t0: f64, t1: f64, start: f64, end: f64 },
    #[error("record time {0} is outside the interval or out of order")]
    InvalidRecordTime(f64),
    #[error("record times {a} and {b} snap to the same grid point")]
    DuplicateRecordTime { a: f64, b: f64 },
}

pub(crate) fn check_finite<const NX: usize>(t: f64, x: &[f64; NX]) -> Result<(), IntegrationError> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(IntegrationError::NonFinite { t, state: x.to_vec() })
    }
}

/// Step layout for `[t0, t1]` at nominal step `h`: full steps plus an
/// optional shortened final step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepGrid {
    pub t0: f64,
    pub t1: f64,
    pub h: f64,
    /// Number of full-length steps.
    pub full: usize,
    /// Whether a shortened final step closes the interval.
    pub partial: bool,
}

impl StepGrid {
    pub fn new(t0: f64, t1: f64, h: f64) -> Result<Self, IntegrationError> {
        if !(h > 0.0) || !h.is_finite() {
            return Err(IntegrationError::InvalidStep(h));
        }
        if !(t0 < t1) || !t0.is_finite() || !t1.is_finite() {
            return Err(IntegrationError::InvalidInterval { t0, t1 });
        }
        let q = (t1 - t0) / h;
        let nearest = q.round();
        let (full, partial) = if (q - nearest).abs() <= 1e-9 * q.max(1.0) {
            (nearest as usize, false)
        } else {
            (q.floor() as usize, true)
        };
        Ok(Self { t0, t1, h, full, partial })
    }

    /// Number of steps including the partial one.
    pub fn steps(&self) -> usize {
        self.full + usize::from(self.partial)
    }

    /// Grid point `i`, `0 ≤ i ≤ steps()`. The last point is exactly `t1`.
    pub fn point(&self, i: usize) -> f64 {
        if i >= self.steps() {
            self.t1
        } else {
            self.t0 + i as f64 * self.h
        }
    }

    /// `(start, length)` of step `i`.
    pub fn step(&self, i: usize) -> (f64, f64) {
        let a = self.point(i);
        let b = self.point(i + 1);
        (a, b - a)
    }

    /// Index of the grid point nearest to `t`.
    pub fn nearest(&self, t: f64) -> usize {
        let n = self.steps();
        let i = ((t - self.t0) / self.h).round().clamp(0.0, n as f64) as usize;
        if i + 1 == n && self.partial {
            // the last two points are closer than h; pick the nearer one
            if (self.t1 - t).abs() < (t - self.point(i)).abs() {
                return n;
            }
        }
        i
    }
}

/// Advance one step of the configured scheme.
pub(crate) fn step_with<F, S, const NX: usize, const NU: usize>(
    scheme: Scheme,
    field: &F,
    p: &F::Params,
    x: &[f64; NX],
    t: f64,
    h: f64,
    input: &S,
) -> Result<[f64; NX], IntegrationError>
where
    F: VectorField<NX, NU> + ?Sized,
    S: InputSignal<NU> + ?Sized,
{
    match scheme {
        Scheme::Rk4 => rk4_step(field, x, t, h, input, p),
        Scheme::Tsit5 => tsit5_step(field, x, t, h, input, p),
    }
}

fn check_domain<S, const NU: usize>(input: &S, t0: f64, t1: f64) -> Result<(), IntegrationError>
where
    S: InputSignal<NU> + ?Sized,
{
    let (start, end) = input.domain();
    let slack = 1e-9 * (1.0 + start.abs().max(end.abs()));
    if t0 < start - slack || t1 > end + slack {
        return Err(IntegrationError::OutsideDomain { t0, t1, start, end });
    }
    Ok(())
}

/// Integrate from `x0` at `t0` to `t1`, returning the states at `record_at`.
///
/// Each record time is snapped to the nearest point of the step grid; the
/// returned trajectory carries the snapped times. Two record times snapping
/// to the same point is an error.
#[allow(clippy::too_many_arguments)]
pub fn integrate_flow<F, S, const NX: usize, const NU: usize>(
    field: &F,
    p: &F::Params,
    x0: [f64; NX],
    input: &S,
    t0: f64,
    t1: f64,
    cfg: &IntegratorConfig,
    record_at: &[f64],
) -> Result<Trajectory<NX>, IntegrationError>
where
    F: VectorField<NX, NU> + ?Sized,
    S: InputSignal<NU> + ?Sized,
{
    let grid = StepGrid::new(t0, t1, cfg.step)?;
    check_domain(input, t0, t1)?;
    let slack = 1e-9 * (1.0 + t0.abs().max(t1.abs()));

    let mut targets = Vec::with_capacity(record_at.len());
    let mut prev: Option<(f64, usize)> = None;
    for &t in record_at {
        if !(t >= t0 - slack && t <= t1 + slack) {
            return Err(IntegrationError::InvalidRecordTime(t));
        }
        let idx = grid.nearest(t);
        if let Some((pt, pi)) = prev {
            if t < pt {
                return Err(IntegrationError::InvalidRecordTime(t));
            }
            if idx == pi {
                return Err(IntegrationError::DuplicateRecordTime { a: pt, b: t });
            }
        }
        prev = Some((t, idx));
        targets.push(idx);
    }

    let mut out = Trajectory {
        times: Vec::with_capacity(targets.len()),
        states: Vec::with_capacity(targets.len()),
    };
    let last_needed = targets.last().copied().unwrap_or(0);
    let mut next = 0;
    let mut x = x0;
    check_finite(t0, &x)?;
    for i in 0..=last_needed {
        while next < targets.len() && targets[next] == i {
            out.times.push(grid.point(i));
            out.states.push(x);
            next += 1;
        }
        if i == last_needed {
            break;
        }
        let (t, h) = grid.step(i);
        x = step_with(cfg.scheme, field, p, &x, t, h, input)?;
    }
    Ok(out)
}

/// Integrate over `[t0, t1]` and return the state at every grid point.
pub fn integrate_grid<F, S, const NX: usize, const NU: usize>(
    field: &F,
    p: &F::Params,
    x0: [f64; NX],
    input: &S,
    t0: f64,
    t1: f64,
    cfg: &IntegratorConfig,
) -> Result<Trajectory<NX>, IntegrationError>
where
    F: VectorField<NX, NU> + ?Sized,
    S: InputSignal<NU> + ?Sized,
{
    let grid = StepGrid::new(t0, t1, cfg.step)?;
    check_domain(input, t0, t1)?;
    let n = grid.steps();
    let mut out = Trajectory { times: Vec::with_capacity(n + 1), states: Vec::with_capacity(n + 1) };
    let mut x = x0;
    check_finite(t0, &x)?;
    out.times.push(t0);
    out.states.push(x);
    for i in 0..n {
        let (t, h) = grid.step(i);
        x = step_with(cfg.scheme, field, p, &x, t, h, input)?;
        out.times.push(grid.point(i + 1));
        out.states.push(x);
    }
    Ok(out)
}

/// State at `t1` only.
pub fn integrate_to<F, S, const NX: usize, const NU: usize>(
    field: &F,
    p: &F::Params,
    x0: [f64; NX],
    input: &S,
    t0: f64,
    t1: f64,
    cfg: &IntegratorConfig,
) -> Result<[f64; NX], IntegrationError>
where
    F: VectorField<NX, NU> + ?Sized,
    S: InputSignal<NU> + ?Sized,
{
    let grid = StepGrid::new(t0, t1, cfg.step)?;
    check_domain(input, t0, t1)?;
    let mut x = x0;
    check_finite(t0, &x)?;
    for i in 0..grid.steps() {
        let (t, h) = grid.step(i);
        x = step_with(cfg.scheme, field, p, &x, t, h, input)?;
    }
    Ok(x)
}

/// Caches a signal at the stage times of a fixed RK4 step grid.
///
/// Lookups at `t0 + j·h/2` hit the table; anything else falls through to the
/// wrapped signal. Values are copied verbatim so integration results are
/// identical with or without the cache.
#[derive(Debug, Clone)]
pub struct TabulatedInput<S, const NU: usize> {
    inner: S,
    t0: f64,
    half: f64,
    right: Vec<Exogenous<NU>>,
    left: Vec<Exogenous<NU>>,
}

impl<S: InputSignal<NU>, const NU: usize> TabulatedInput<S, NU> {
    pub fn new(inner: S, h: f64) -> Self {
        let (t0, t1) = inner.domain();
        let half = 0.5 * h;
        let n = ((t1 - t0) / half).floor() as usize;
        let mut right = Vec::with_capacity(n + 1);
        let mut left = Vec::with_capacity(n + 1);
        for j in 0..=n {
            let t = t0 + j as f64 * half;
            right.push(inner.sample(t, Side::Right));
            left.push(inner.sample(t, Side::Left));
        }
        Self { inner, t0, half, right, left }
    }

    pub fn inner(&self) -> &S {
        &self.inner
    }
}

impl<S: InputSignal<NU>, const NU: usize> InputSignal<NU> for TabulatedInput<S, NU> {
    fn domain(&self) -> (f64, f64) {
        self.inner.domain()
    }

    fn sample(&self, t: f64, side: Side) -> Exogenous<NU> {
        let q = (t - self.t0) / self.half;
        let j = q.round();
        if j >= 0.0 && (j as usize) < self.right.len() && self.t0 + j * self.half == t {
            let j = j as usize;
            match side {
                Side::Right => self.right[j],
                Side::Left => self.left[j],
            }
        } else {
            self.inner.sample(t, side)
        }
    }
}

#[cfg(test)]
pub(crate) mod test_fields {
    use super::*;

    /// ẋ = 0.
    pub struct Zero;
    impl<const NX: usize> VectorField<NX, 1> for Zero {
        type Params = ();
        fn eval(&self, _x: &[f64; NX], _u: &[f64; 1], _d: f64, _t: f64, _p: &()) -> [f64; NX] {
            [0.0; NX]
        }
    }
    impl<const NX: usize> DifferentiableField<NX, 1> for Zero {
        fn jacobians(&self, _x: &[f64; NX], _u: &[f64; 1], _d: f64, _t: f64, _p: &()) -> ([[f64; NX]; NX], [[f64; 1]; NX]) {
            ([[0.0; NX]; NX], [[0.0; 1]; NX])
        }
    }

    /// ẋ = −k·x.
    pub struct Decay;
    impl VectorField<1, 1> for Decay {
        type Params = f64;
        fn eval(&self, x: &[f64; 1], _u: &[f64; 1], _d: f64, _t: f64, k: &f64) -> [f64; 1] {
            [-k * x[0]]
        }
    }

    /// ẋ = t².
    pub struct TimeSquared;
    impl VectorField<1, 1> for TimeSquared {
        type Params = ();
        fn eval(&self, _x: &[f64; 1], _u: &[f64; 1], _d: f64, t: f64, _p: &()) -> [f64; 1] {
            [t * t]
        }
    }

    /// ẋ = u.
    pub struct Integrator;
    impl VectorField<1, 1> for Integrator {
        type Params = ();
        fn eval(&self, _x: &[f64; 1], u: &[f64; 1], _d: f64, _t: f64, _p: &()) -> [f64; 1] {
            [u[0]]
        }
    }
    impl DifferentiableField<1, 1> for Integrator {
        fn jacobians(&self, _x: &[f64; 1], _u: &[f64; 1], _d: f64, _t: f64, _p: &()) -> ([[f64; 1]; 1], [[f64; 1]; 1]) {
            ([[0.0]], [[1.0]])
        }
    }

    pub fn zero_input(start: f64, end: f64) -> ZeroInput {
        ZeroInput { start, end }
    }
}
