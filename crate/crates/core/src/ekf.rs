//! Nominal-model baseline: an extended Kalman filter estimates the state at
//! the start of the horizon with parameters fixed at their nominal values,
//! and a single-scenario problem is planned from that estimate.

use nalgebra::SMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::glucose::{BergmanModel, BergmanParams, TrainingInput, G};
use crate::model::{Dataset, PriorSpec};
use crate::ocp::{self, ControlGrid, ControlTrajectory, OcpError, OcpReport, OcpSpec, Scenario, ScenarioOcp, SolverConfig};
use crate::ode::{rk4_step, DifferentiableField, Disturbance, InputSignal, IntegrationError, Side, StepGrid};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EkfError {
    #[error(transparent)]
    Integration(#[from] IntegrationError),
    #[error("cannot predict backwards from t = {from} to t = {to}")]
    Backwards { from: f64, to: f64 },
    #[error("innovation variance {0} is not positive")]
    Innovation(f64),
    #[error(transparent)]
    Ocp(#[from] OcpError),
}

/// Filter mean and covariance at `time`.
#[derive(Debug, Clone, PartialEq)]
pub struct EkfState<const NX: usize> {
    pub mean: [f64; NX],
    pub covariance: SMatrix<f64, NX, NX>,
    pub time: f64,
}

fn symmetrize<const NX: usize>(p: &SMatrix<f64, NX, NX>) -> SMatrix<f64, NX, NX> {
    (p + p.transpose()) * 0.5
}

/// Propagate to `t_to` with RK4 steps of length `h`. Per step the covariance
/// follows `P ← F P Fᵀ + Q h`, `F = I + h A`, with `A` the Jacobian at the
/// start of the step.
#[allow(clippy::too_many_arguments)]
pub fn ekf_predict<F, S, const NX: usize, const NU: usize>(
    field: &F,
    p: &F::Params,
    state: &EkfState<NX>,
    input: &S,
    t_to: f64,
    q_rate: &SMatrix<f64, NX, NX>,
    h: f64,
) -> Result<EkfState<NX>, EkfError>
where
    F: DifferentiableField<NX, NU>,
    S: InputSignal<NU> + ?Sized,
{
    if t_to < state.time {
        return Err(EkfError::Backwards { from: state.time, to: t_to });
    }
    if t_to == state.time {
        return Ok(state.clone());
    }
    let grid = StepGrid::new(state.time, t_to, h)?;
    let mut x = state.mean;
    let mut cov = state.covariance;
    for i in 0..grid.steps() {
        let (t, dt) = grid.step(i);
        let e = input.sample(t, Side::Right);
        let (a, _) = field.jacobians(&x, &e.input, e.disturbance, t, p);
        let f = SMatrix::<f64, NX, NX>::identity() + SMatrix::<f64, NX, NX>::from_fn(|r, c| dt * a[r][c]);
        x = rk4_step(field, &x, t, dt, input, p)?;
        cov = symmetrize(&(f * cov * f.transpose() + q_rate * dt));
    }
    Ok(EkfState { mean: x, covariance: cov, time: t_to })
}

/// Measurement update for `y = x[observed] + v`, `v ~ N(0, σ²)`, with the
/// Joseph-form covariance.
pub fn ekf_update<const NX: usize>(state: &EkfState<NX>, observed: usize, y: f64, sigma: f64) -> Result<EkfState<NX>, EkfError> {
    let r = sigma * sigma;
    let s = state.covariance[(observed, observed)] + r;
    if !(s > 0.0) || !s.is_finite() {
        return Err(EkfError::Innovation(s));
    }
    let gain = state.covariance.column(observed) / s;
    let innovation = y - state.mean[observed];
    let mut mean = state.mean;
    for (m, k) in mean.iter_mut().zip(gain.iter()) {
        *m += k * innovation;
    }
    let mut ikh = SMatrix::<f64, NX, NX>::identity();
    for i in 0..NX {
        ikh[(i, observed)] -= gain[i];
    }
    let cov = ikh * state.covariance * ikh.transpose() + gain * gain.transpose() * r;
    Ok(EkfState { mean, covariance: symmetrize(&cov), time: state.time })
}

/// Filter settings for the glucose baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EkfConfig {
    /// Diagonal of the process noise rate for `(G, X, I)`, per minute.
    pub q_rate: [f64; 3],
    /// Prediction step, minutes.
    pub step: f64,
}

impl Default for EkfConfig {
    fn default() -> Self {
        Self { q_rate: [1e-2, 1e-8, 1e-2], step: 0.5 }
    }
}

impl EkfConfig {
    pub fn q_matrix(&self) -> SMatrix<f64, 3, 3> {
        SMatrix::<f64, 3, 3>::from_diagonal(&self.q_rate.into())
    }
}

/// Prior means and variances of the initial state.
pub fn initial_state(prior: &PriorSpec, time: f64) -> EkfState<3> {
    let mean = [prior.states[0].mean, prior.states[1].mean, prior.states[2].mean];
    let var = [prior.states[0].sd.powi(2), prior.states[1].sd.powi(2), prior.states[2].sd.powi(2)];
    EkfState { mean, covariance: SMatrix::<f64, 3, 3>::from_diagonal(&var.into()), time }
}

/// Filter the whole training window. Returns the state after each update
/// and the estimate propagated to the end of the window.
pub fn run_filter(
    data: &Dataset<TrainingInput>,
    params: &BergmanParams,
    prior: &PriorSpec,
    cfg: &EkfConfig,
) -> Result<(Vec<EkfState<3>>, EkfState<3>), EkfError> {
    let q = cfg.q_matrix();
    let mut state = initial_state(prior, data.input.start);
    let mut trace = Vec::with_capacity(data.len());
    for (&t, &y) in data.times.iter().zip(&data.outputs) {
        state = ekf_predict(&BergmanModel, params, &state, &data.input, t, &q, cfg.step)?;
        state = ekf_update(&state, G, y, data.noise_sigma)?;
        trace.push(state.clone());
    }
    let end = ekf_predict(&BergmanModel, params, &state, &data.input, data.input.end, &q, cfg.step)?;
    Ok((trace, end))
}

/// Output of the baseline planner.
#[derive(Debug, Clone)]
pub struct NominalPlan {
    pub control: ControlTrajectory<1>,
    pub report: OcpReport,
    pub estimate: EkfState<3>,
}

/// Filter with nominal parameters, then plan for the single scenario
/// (nominal parameters, filter mean at the start of the horizon).
#[allow(clippy::too_many_arguments)]
pub fn nominal_plan<D: Disturbance>(
    data: &Dataset<TrainingInput>,
    nominal: &BergmanParams,
    prior: &PriorSpec,
    ekf: &EkfConfig,
    spec: &OcpSpec,
    grid: &ControlGrid,
    disturbance: &D,
    solver: &SolverConfig,
    step: f64,
) -> Result<NominalPlan, EkfError> {
    let (_, estimate) = run_filter(data, nominal, prior, ekf)?;
    let scenarios = [Scenario { params: *nominal, x0: estimate.mean, index: 0 }];
    let problem = ScenarioOcp { field: &BergmanModel, scenarios: &scenarios, grid, spec, disturbance, step };
    let (lo, hi) = spec.input_bounds::<1>();
    let start = ControlTrajectory::constant(grid.intervals(), [0.0], lo, hi);
    let (control, report) = ocp::solve_ocp(&problem, solver, &start)?;
    Ok(NominalPlan { control, report, estimate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glucose::{bergman_jacobian, standard_prior};
    use crate::ode::test_fields::Zero;
    use crate::ode::ZeroInput;

    fn scalar_state(p: f64) -> EkfState<1> {
        EkfState { mean: [10.0], covariance: SMatrix::<f64, 1, 1>::new(p), time: 0.0 }
    }

    #[test]
    fn scalar_update_arithmetic() {
        let s = ekf_update(&scalar_state(4.0), 0, 14.0, 2.0).unwrap();
        assert!((s.mean[0] - 12.0).abs() < 1e-12);
        assert!((s.covariance[(0, 0)] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn update_limits() {
        let s = ekf_update(&scalar_state(4.0), 0, 14.0, 1e9).unwrap();
        assert!((s.mean[0] - 10.0).abs() < 1e-12);
        let s = ekf_update(&scalar_state(4.0), 0, 14.0, 0.0).unwrap();
        assert_eq!(s.mean[0], 14.0);
        assert!(s.covariance[(0, 0)].abs() < 1e-12);
        assert!(matches!(ekf_update(&scalar_state(0.0), 0, 14.0, 0.0), Err(EkfError::Innovation(_))));
    }

    #[test]
    fn zero_dynamics_accumulate_process_noise() {
        let p0 = SMatrix::<f64, 2, 2>::new(2.0, 0.5, 0.5, 1.0);
        let s = EkfState { mean: [1.0, 2.0], covariance: p0, time: 0.0 };
        let input = ZeroInput { start: 0.0, end: 10.0 };
        let none = ekf_predict(&Zero, &(), &s, &input, 10.0, &SMatrix::zeros(), 0.5).unwrap();
        assert_eq!(none.covariance, p0);
        assert_eq!(none.mean, s.mean);
        let q = SMatrix::<f64, 2, 2>::identity() * 0.3;
        let out = ekf_predict(&Zero, &(), &s, &input, 10.0, &q, 0.5).unwrap();
        assert!((out.covariance - (p0 + q * 10.0)).abs().max() < 1e-12);
        assert_eq!(out.time, 10.0);
    }

    #[test]
    fn predict_rejects_backwards_time() {
        let s = EkfState { mean: [1.0], covariance: SMatrix::<f64, 1, 1>::new(1.0), time: 5.0 };
        let input = ZeroInput { start: 0.0, end: 10.0 };
        assert!(matches!(
            ekf_predict::<_, _, 1, 1>(&crate::ode::test_fields::Integrator, &(), &s, &input, 4.0, &SMatrix::zeros(), 0.5),
            Err(EkfError::Backwards { .. })
        ));
    }

    #[test]
    fn insulin_variance_settles_at_stationary_level() {
        // İ = −n (I − I_b) + u decouples from the rest; the scalar recursion
        // P ← (1 − h n)² P + q h has the fixed point q / (n (2 − h n)), which
        // tends to q / (2n) as h → 0
        let p = BergmanParams::from_theta(&[0.014, 1.7e-6, 0.19]);
        let q = SMatrix::<f64, 3, 3>::from_diagonal(&[0.0, 0.0, 0.5].into());
        let s = EkfState { mean: [80.0, 0.0, 7.0], covariance: SMatrix::identity() * 25.0, time: 0.0 };
        let input = ZeroInput { start: 0.0, end: 400.0 };
        for h in [0.5, 0.05] {
            let out = ekf_predict(&BergmanModel, &p, &s, &input, 400.0, &q, h).unwrap();
            let stationary = 0.5 / (2.0 * p.n);
            let discrete = 0.5 / (p.n * (2.0 - h * p.n));
            assert!((out.covariance[(2, 2)] - discrete).abs() < 1e-9 * discrete);
            assert!((out.covariance[(2, 2)] - stationary).abs() < 0.6 * h * p.n * stationary);
        }
    }

    #[test]
    fn jacobian_has_the_model_sparsity() {
        let p = BergmanParams::from_theta(&[0.014, 1.7e-6, 0.19]);
        let a = bergman_jacobian(&[100.0, 0.0, 9.0], &p);
        assert_eq!(a[0], [0.0, -100.0, 0.0]);
        assert_eq!(a[1][0], 0.0);
        assert_eq!(a[2][0], 0.0);
        assert_eq!(a[2][1], 0.0);
    }

    #[test]
    fn initial_state_uses_prior_moments() {
        let s = initial_state(&standard_prior(), -720.0);
        assert_eq!(s.mean, [80.0, 0.0, 7.0]);
        assert_eq!(s.covariance[(0, 0)], 64.0);
        assert_eq!(s.covariance[(1, 1)], 1e-6);
        assert_eq!(s.covariance[(2, 2)], 4.0);
        assert_eq!(s.covariance[(0, 1)], 0.0);
    }
}
