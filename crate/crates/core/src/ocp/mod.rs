//! Scenario optimal control by single shooting.
//!
//! The input is piecewise constant on a grid `τ_0 < … < τ_N`; node states of
//! every scenario are obtained with RK4 sub-steps, so the input values are
//! the only decision variables. The scenario-averaged cost is minimized
//! subject to state bounds at every node of every scenario.

mod solver;

pub use solver::{solve_ocp, OcpReport, SolverConfig};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ode::{rollout_piecewise, DifferentiableField, Disturbance, IntegrationError, Rk4Tape, VectorField};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OcpError {
    #[error("invalid control grid: {0}")]
    Grid(String),
    #[error("invalid problem: {0}")]
    Spec(String),
    #[error("rollout of scenario {scenario} failed: {source}")]
    Rollout { scenario: usize, source: IntegrationError },
    #[error("non-finite objective at outer iteration {outer}, inner iteration {inner}")]
    Diverged { outer: usize, inner: usize },
}

/// Grid nodes `τ_0..τ_N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlGrid {
    nodes: Vec<f64>,
}

impl ControlGrid {
    pub fn new(nodes: Vec<f64>) -> Result<Self, OcpError> {
        if nodes.len() < 2 {
            return Err(OcpError::Grid("need at least two nodes".into()));
        }
        if nodes.iter().any(|t| !t.is_finite()) || nodes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(OcpError::Grid("nodes must be finite and strictly increasing".into()));
        }
        Ok(Self { nodes })
    }

    /// `n` intervals of length `spacing` starting at `start`.
    pub fn uniform(start: f64, spacing: f64, n: usize) -> Result<Self, OcpError> {
        if !(spacing > 0.0) || n == 0 {
            return Err(OcpError::Grid(format!("{n} intervals of length {spacing}")));
        }
        Self::new((0..=n).map(|i| start + i as f64 * spacing).collect())
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Number of intervals `N`.
    pub fn intervals(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn spacing(&self, n: usize) -> f64 {
        self.nodes[n + 1] - self.nodes[n]
    }

    pub fn start(&self) -> f64 {
        self.nodes[0]
    }

    pub fn end(&self) -> f64 {
        self.nodes[self.nodes.len() - 1]
    }

    /// Every spacing is an integer multiple of `h`.
    pub fn check_step(&self, h: f64) -> Result<(), OcpError> {
        for n in 0..self.intervals() {
            let r = self.spacing(n) / h;
            if (r - r.round()).abs() > 1e-9 * r.max(1.0) || r.round() < 1.0 {
                return Err(OcpError::Grid(format!("interval {n} of length {} is not a multiple of {h}", self.spacing(n))));
            }
        }
        Ok(())
    }
}

/// Input values `u_0..u_{N−1}` with their box.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlTrajectory<const NU: usize> {
    pub values: Vec<[f64; NU]>,
    pub lower: [f64; NU],
    pub upper: [f64; NU],
}

impl<const NU: usize> ControlTrajectory<NU> {
    pub fn constant(n: usize, value: [f64; NU], lower: [f64; NU], upper: [f64; NU]) -> Self {
        let mut u = Self { values: vec![value; n], lower, upper };
        u.project();
        u
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn project(&mut self) {
        for v in &mut self.values {
            for j in 0..NU {
                v[j] = v[j].clamp(self.lower[j], self.upper[j]);
            }
        }
    }

    pub fn within_bounds(&self) -> bool {
        self.values.iter().all(|v| (0..NU).all(|j| v[j] >= self.lower[j] && v[j] <= self.upper[j]))
    }

    /// Value applied at time `t` on the given grid (right-continuous, last
    /// interval closed).
    pub fn at(&self, grid: &ControlGrid, t: f64) -> [f64; NU] {
        let idx = grid.nodes.partition_point(|&x| x <= t).saturating_sub(1);
        self.values[idx.min(self.values.len() - 1)]
    }
}

/// One plausible system: parameters and the state at `τ_0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario<P, const NX: usize> {
    pub params: P,
    pub x0: [f64; NX],
    pub index: usize,
}

/// Quadratic tracking of one state component with node bounds on it:
/// `c = w_track (x_i − r)² + w_input |u|²`, `c_f = w_terminal (x_i − r)²`,
/// `lower ≤ x_i ≤ upper`, and a box on every input component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OcpSpec {
    pub tracked: usize,
    pub reference: f64,
    pub w_track: f64,
    pub w_terminal: f64,
    pub w_input: f64,
    pub state_lower: f64,
    pub state_upper: f64,
    pub u_min: f64,
    pub u_max: f64,
}

impl OcpSpec {
    /// Glucose regulation: `W_G = 1`, `W_Gf = 10`, `W_U = 1e−4`,
    /// `G_ref = 80`, `70 ≤ G ≤ 180` mg/dL, `0 ≤ u ≤ 20` mU/min.
    pub fn glucose() -> Self {
        Self {
            tracked: crate::glucose::G,
            reference: 80.0,
            w_track: 1.0,
            w_terminal: 10.0,
            w_input: 1e-4,
            state_lower: 70.0,
            state_upper: 180.0,
            u_min: 0.0,
            u_max: 20.0,
        }
    }

    pub fn validate(&self, nx: usize) -> Result<(), OcpError> {
        if self.tracked >= nx {
            return Err(OcpError::Spec(format!("tracked component {} of a {nx}-state model", self.tracked)));
        }
        if !(self.w_track >= 0.0 && self.w_terminal >= 0.0 && self.w_input >= 0.0) {
            return Err(OcpError::Spec("weights must be non-negative".into()));
        }
        if !(self.state_lower <= self.state_upper) || !(self.u_min <= self.u_max) {
            return Err(OcpError::Spec("bounds out of order".into()));
        }
        Ok(())
    }

    pub fn running_cost<const NX: usize, const NU: usize>(&self, u: &[f64; NU], x: &[f64; NX]) -> f64 {
        let e = x[self.tracked] - self.reference;
        self.w_track * e * e + self.w_input * u.iter().map(|v| v * v).sum::<f64>()
    }

    pub fn terminal_cost<const NX: usize>(&self, x: &[f64; NX]) -> f64 {
        let e = x[self.tracked] - self.reference;
        self.w_terminal * e * e
    }

    pub fn input_bounds<const NU: usize>(&self) -> ([f64; NU], [f64; NU]) {
        ([self.u_min; NU], [self.u_max; NU])
    }
}

/// Multipliers and penalty of the augmented Lagrangian. Constraints are the
/// node bounds at `τ_1..τ_N` of every scenario, tightened by `margin`; the
/// layout is `[(k·N + n − 1)·2 + {0: lower, 1: upper}]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyState {
    pub multipliers: Vec<f64>,
    pub rho: f64,
    pub margin: f64,
}

impl PenaltyState {
    pub fn new(scenarios: usize, intervals: usize, rho: f64, margin: f64) -> Self {
        Self { multipliers: vec![0.0; scenarios * intervals * 2], rho, margin }
    }
}

/// Shared problem data.
pub struct ScenarioOcp<'a, F: VectorField<NX, NU>, D, const NX: usize, const NU: usize> {
    pub field: &'a F,
    pub scenarios: &'a [Scenario<F::Params, NX>],
    pub grid: &'a ControlGrid,
    pub spec: &'a OcpSpec,
    pub disturbance: &'a D,
    /// RK4 sub-step.
    pub step: f64,
}

/// Value and gradient of the objective, with the pieces reported apart.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation<const NU: usize> {
    pub cost: f64,
    pub penalty: f64,
    pub gradient: Vec<[f64; NU]>,
}

impl<const NU: usize> Evaluation<NU> {
    pub fn merit(&self) -> f64 {
        self.cost + self.penalty
    }
}

fn psi(g: f64, lam: f64, rho: f64) -> (f64, f64) {
    let a = (lam + rho * g).max(0.0);
    ((a * a - lam * lam) / (2.0 * rho), a)
}

impl<'a, F, D, const NX: usize, const NU: usize> ScenarioOcp<'a, F, D, NX, NU>
where
    F: DifferentiableField<NX, NU>,
    D: Disturbance,
{
    pub fn validate(&self) -> Result<(), OcpError> {
        if self.scenarios.is_empty() {
            return Err(OcpError::Spec("no scenarios".into()));
        }
        self.spec.validate(NX)?;
        self.grid.check_step(self.step)
    }

    pub fn rollout(&self, k: usize, u: &ControlTrajectory<NU>) -> Result<Vec<[f64; NX]>, OcpError> {
        let sc = &self.scenarios[k];
        rollout_piecewise(self.field, &sc.params, sc.x0, self.grid.nodes(), &u.values, self.disturbance, self.step)
            .map_err(|source| OcpError::Rollout { scenario: k, source })
    }

    fn scenario_cost_of(&self, xs: &[[f64; NX]], u: &ControlTrajectory<NU>) -> f64 {
        let n = self.grid.intervals();
        let mut c = self.spec.terminal_cost(&xs[n]);
        for i in 0..n {
            c += self.spec.running_cost(&u.values[i], &xs[i]) * self.grid.spacing(i);
        }
        c
    }

    /// `(1/K) Σ_k [c_f(x_N) + Σ_n c(u_n, x_n) Δ_n]`.
    pub fn cost(&self, u: &ControlTrajectory<NU>) -> Result<f64, OcpError> {
        let mut total = 0.0;
        for k in 0..self.scenarios.len() {
            let xs = self.rollout(k, u)?;
            total += self.scenario_cost_of(&xs, u);
        }
        Ok(total / self.scenarios.len() as f64)
    }

    /// `[lower − x_i, x_i − upper]` for every node `n = 0..N` of every
    /// scenario, scenario-major. Non-positive means feasible.
    pub fn residuals(&self, u: &ControlTrajectory<NU>) -> Result<Vec<f64>, OcpError> {
        let mut out = Vec::with_capacity(self.scenarios.len() * (self.grid.intervals() + 1) * 2);
        for k in 0..self.scenarios.len() {
            for x in self.rollout(k, u)? {
                let v = x[self.spec.tracked];
                out.push(self.spec.state_lower - v);
                out.push(v - self.spec.state_upper);
            }
        }
        Ok(out)
    }

    /// Objective, optionally augmented, with its exact gradient through the
    /// RK4 recursion (reverse sweep over each scenario's tape). Scenario
    /// contributions are summed in index order.
    pub fn evaluate(
        &self,
        u: &ControlTrajectory<NU>,
        penalty: Option<&PenaltyState>,
        with_gradient: bool,
    ) -> Result<Evaluation<NU>, OcpError> {
        let n = self.grid.intervals();
        let kf = self.scenarios.len() as f64;
        let tr = self.spec.tracked;
        let mut cost = 0.0;
        let mut pen = 0.0;
        let mut grad = vec![[0.0; NU]; n];
        let mut seeds = vec![[0.0; NX]; n + 1];
        for (k, sc) in self.scenarios.iter().enumerate() {
            let (xs, tape) = if with_gradient {
                let (xs, tape) =
                    Rk4Tape::record(self.field, &sc.params, sc.x0, self.grid.nodes(), &u.values, self.disturbance, self.step)
                        .map_err(|source| OcpError::Rollout { scenario: k, source })?;
                (xs, Some(tape))
            } else {
                (self.rollout(k, u)?, None)
            };
            cost += self.scenario_cost_of(&xs, u);
            for s in seeds.iter_mut() {
                *s = [0.0; NX];
            }
            for i in 0..n {
                seeds[i][tr] = 2.0 * self.spec.w_track * (xs[i][tr] - self.spec.reference) * self.grid.spacing(i) / kf;
            }
            seeds[n][tr] = 2.0 * self.spec.w_terminal * (xs[n][tr] - self.spec.reference) / kf;
            if let Some(ps) = penalty {
                for i in 1..=n {
                    let v = xs[i][tr];
                    let base = (k * n + i - 1) * 2;
                    let (p_lo, d_lo) = psi(self.spec.state_lower - v + ps.margin, ps.multipliers[base], ps.rho);
                    let (p_up, d_up) = psi(v - self.spec.state_upper + ps.margin, ps.multipliers[base + 1], ps.rho);
                    pen += p_lo + p_up;
                    seeds[i][tr] += d_up - d_lo;
                }
            }
            if let Some(tape) = tape {
                let (_, ubar) = tape.backward(self.field, &sc.params, &seeds);
                for (g, b) in grad.iter_mut().zip(&ubar) {
                    for j in 0..NU {
                        g[j] += b[j];
                    }
                }
            }
        }
        cost /= kf;
        for i in 0..n {
            for j in 0..NU {
                grad[i][j] += 2.0 * self.spec.w_input * u.values[i][j] * self.grid.spacing(i);
            }
        }
        if !with_gradient {
            grad.clear();
        }
        Ok(Evaluation { cost, penalty: pen, gradient: grad })
    }
}

/// Node states of one scenario.
pub fn rollout<F, D, const NX: usize, const NU: usize>(
    problem: &ScenarioOcp<'_, F, D, NX, NU>,
    scenario: usize,
    u: &ControlTrajectory<NU>,
) -> Result<Vec<[f64; NX]>, OcpError>
where
    F: DifferentiableField<NX, NU>,
    D: Disturbance,
{
    problem.rollout(scenario, u)
}

pub fn scenario_cost<F, D, const NX: usize, const NU: usize>(
    problem: &ScenarioOcp<'_, F, D, NX, NU>,
    u: &ControlTrajectory<NU>,
) -> Result<f64, OcpError>
where
    F: DifferentiableField<NX, NU>,
    D: Disturbance,
{
    problem.cost(u)
}

pub fn constraint_residuals<F, D, const NX: usize, const NU: usize>(
    problem: &ScenarioOcp<'_, F, D, NX, NU>,
    u: &ControlTrajectory<NU>,
) -> Result<Vec<f64>, OcpError>
where
    F: DifferentiableField<NX, NU>,
    D: Disturbance,
{
    problem.residuals(u)
}

/// Augmented objective and its gradient.
pub fn cost_and_gradient<F, D, const NX: usize, const NU: usize>(
    problem: &ScenarioOcp<'_, F, D, NX, NU>,
    u: &ControlTrajectory<NU>,
    penalty: Option<&PenaltyState>,
) -> Result<(f64, Vec<[f64; NU]>), OcpError>
where
    F: DifferentiableField<NX, NU>,
    D: Disturbance,
{
    let e = problem.evaluate(u, penalty, true)?;
    Ok((e.merit(), e.gradient))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ode::test_fields::{Integrator, Zero};
    use crate::ode::NoDisturbance;

    fn spec() -> OcpSpec {
        OcpSpec { tracked: 0, ..OcpSpec::glucose() }
    }

    #[test]
    fn grid_validation() {
        assert!(ControlGrid::new(vec![0.0]).is_err());
        assert!(ControlGrid::new(vec![0.0, 0.0]).is_err());
        let g = ControlGrid::uniform(0.0, 5.0, 72).unwrap();
        assert_eq!(g.intervals(), 72);
        assert_eq!(g.end(), 360.0);
        assert!(g.check_step(0.5).is_ok());
        assert!(g.check_step(0.3).is_err());
    }

    #[test]
    fn hand_computed_cost() {
        // one interval, G stays at 90 under the zero field
        let grid = ControlGrid::uniform(0.0, 5.0, 1).unwrap();
        let sc = [Scenario { params: (), x0: [90.0], index: 0 }];
        let sp = spec();
        let ocp = ScenarioOcp { field: &Zero, scenarios: &sc, grid: &grid, spec: &sp, disturbance: &NoDisturbance, step: 0.5 };
        let u = ControlTrajectory::constant(1, [5.0], [0.0], [20.0]);
        let c = ocp.cost(&u).unwrap();
        assert!((c - 1500.0125).abs() < 1e-9, "{c}");
        let sc2 = [sc[0].clone(), sc[0].clone(), sc[0].clone()];
        let ocp2 = ScenarioOcp { scenarios: &sc2, ..ocp };
        assert_eq!(ocp2.cost(&u).unwrap(), c);
    }

    #[test]
    fn zero_cost_at_reference() {
        let grid = ControlGrid::uniform(0.0, 5.0, 4).unwrap();
        let sc = [Scenario { params: (), x0: [80.0], index: 0 }];
        let sp = spec();
        let ocp = ScenarioOcp { field: &Zero, scenarios: &sc, grid: &grid, spec: &sp, disturbance: &NoDisturbance, step: 0.5 };
        assert_eq!(ocp.cost(&ControlTrajectory::constant(4, [0.0], [0.0], [20.0])).unwrap(), 0.0);
    }

    #[test]
    fn residual_signs() {
        let grid = ControlGrid::uniform(0.0, 5.0, 2).unwrap();
        let sp = spec();
        let u = ControlTrajectory::constant(2, [0.0], [0.0], [20.0]);
        for (g, lo, up) in [(100.0, -30.0, -80.0), (70.0, 0.0, -110.0), (185.0, -115.0, 5.0)] {
            let sc = [Scenario { params: (), x0: [g], index: 0 }];
            let ocp = ScenarioOcp { field: &Zero, scenarios: &sc, grid: &grid, spec: &sp, disturbance: &NoDisturbance, step: 0.5 };
            let r = ocp.residuals(&u).unwrap();
            assert_eq!(r.len(), 6);
            for pair in r.chunks(2) {
                assert_eq!(pair, [lo, up]);
            }
        }
    }

    #[test]
    fn input_weight_gradient_is_decoupled() {
        let grid = ControlGrid::new(vec![0.0, 1.0, 3.0, 6.0]).unwrap();
        let sc = [Scenario { params: (), x0: [123.0], index: 0 }];
        let sp = OcpSpec { w_track: 0.0, w_terminal: 0.0, ..spec() };
        let ocp = ScenarioOcp { field: &Zero, scenarios: &sc, grid: &grid, spec: &sp, disturbance: &NoDisturbance, step: 0.5 };
        let u = ControlTrajectory { values: vec![[1.0], [2.5], [7.0]], lower: [0.0], upper: [20.0] };
        let (_, g) = cost_and_gradient(&ocp, &u, None).unwrap();
        for n in 0..3 {
            assert!((g[n][0] - 2.0 * 1e-4 * u.values[n][0] * grid.spacing(n)).abs() < 1e-15);
        }
    }

    #[test]
    fn penalty_gradient_matches_differences() {
        let grid = ControlGrid::uniform(0.0, 1.0, 6).unwrap();
        let sc = [Scenario { params: (), x0: [75.0], index: 0 }, Scenario { params: (), x0: [170.0], index: 1 }];
        let sp = spec();
        let ocp = ScenarioOcp { field: &Integrator, scenarios: &sc, grid: &grid, spec: &sp, disturbance: &NoDisturbance, step: 0.5 };
        let mut ps = PenaltyState::new(2, 6, 3.0, 1e-3);
        for (i, m) in ps.multipliers.iter_mut().enumerate() {
            *m = (i % 5) as f64 * 0.7;
        }
        let u = ControlTrajectory { values: vec![[-3.0], [4.0], [-1.0], [2.0], [6.0], [-5.0]], lower: [-20.0], upper: [20.0] };
        let (_, g) = cost_and_gradient(&ocp, &u, Some(&ps)).unwrap();
        for n in 0..6 {
            let d = 1e-4;
            let mut up = u.clone();
            up.values[n][0] += d;
            let mut dn = u.clone();
            dn.values[n][0] -= d;
            let fd = (cost_and_gradient(&ocp, &up, Some(&ps)).unwrap().0 - cost_and_gradient(&ocp, &dn, Some(&ps)).unwrap().0) / (2.0 * d);
            assert!((fd - g[n][0]).abs() <= 1e-5 * fd.abs().max(1.0), "{n}: {fd} vs {}", g[n][0]);
        }
    }

    #[test]
    fn control_lookup() {
        let grid = ControlGrid::uniform(0.0, 5.0, 3).unwrap();
        let u = ControlTrajectory { values: vec![[1.0], [2.0], [3.0]], lower: [0.0], upper: [20.0] };
        assert_eq!(u.at(&grid, 0.0), [1.0]);
        assert_eq!(u.at(&grid, 5.0), [2.0]);
        assert_eq!(u.at(&grid, 15.0), [3.0]);
        let mut v = ControlTrajectory { values: vec![[-1.0], [25.0]], lower: [0.0], upper: [20.0] };
        assert!(!v.within_bounds());
        v.project();
        assert_eq!(v.values, vec![[0.0], [20.0]]);
    }
}
