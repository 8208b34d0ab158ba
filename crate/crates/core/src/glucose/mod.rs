//! Bergman minimal model with meal disturbance and exogenous insulin.
//!
//! States are `[G, X, I]`: plasma glucose (mg/dL), remote insulin action
//! (1/min) and plasma insulin (mU/L). Time is in minutes with `t = 0` at
//! 6 pm; the training window is `[−720, 0]` and the control horizon
//! `[0, 360]`.

mod meals;

pub use meals::{meal_profile, training_input, Meal, MealError, MealSchedule, TrainingInput, DOSE_WINDOW};

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::model::{Dataset, LatentSample, LogNormalPrior, ModelError, NormalPrior, ObservationModel, PriorSpec};
use crate::ode::{integrate_grid, tsit54_integrate, DifferentiableField, IntegrationError, IntegratorConfig, Trajectory, VectorField};

pub const G: usize = 0;
pub const X: usize = 1;
pub const I: usize = 2;

/// Basal insulin, mU/L. Known in this study.
pub const BASAL_INSULIN: f64 = 7.0;
/// Basal glucose, mg/dL. Only enters through `p1`, which is zero for Type 1
/// patients, so it has no effect here.
pub const BASAL_GLUCOSE: f64 = 80.0;

/// Start of the training window (6 am) and end of the control horizon
/// (12 am), minutes.
pub const TRAINING_START: f64 = -720.0;
pub const HORIZON_END: f64 = 360.0;

/// Total training insulin per unit meal size, mU per (mg/dL). A 60 mg/dL
/// meal then triggers 9 mU/min for one hour, which keeps the nominal
/// training-day glucose inside roughly [70, 190] mg/dL and puts the 6 pm
/// glucose of most prior draws where the evening meal can still be handled.
pub const DEFAULT_TRAINING_GAIN: f64 = 9.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BergmanParams {
    pub p1: f64,
    pub p2: f64,
    pub p3: f64,
    pub n: f64,
    pub g_b: f64,
    pub i_b: f64,
}

impl BergmanParams {
    /// Type 1 parameters from the inferred vector `θ = (p2, p3, n)`.
    pub fn from_theta(theta: &[f64; 3]) -> Self {
        Self { p1: 0.0, p2: theta[0], p3: theta[1], n: theta[2], g_b: BASAL_GLUCOSE, i_b: BASAL_INSULIN }
    }

    pub fn theta(&self) -> [f64; 3] {
        [self.p2, self.p3, self.n]
    }
}

/// `(Ġ, Ẋ, İ)` for insulin infusion `u` (mU/min) and meal rate `d`
/// (mg/dL/min).
pub fn bergman_rhs(x: &[f64; 3], u: f64, d: f64, p: &BergmanParams) -> [f64; 3] {
    let (g, xa, i) = (x[G], x[X], x[I]);
    [
        -p.p1 * (g - p.g_b) - xa * g + d,
        -p.p2 * xa + p.p3 * (i - p.i_b),
        -p.n * (i - p.i_b) + u,
    ]
}

/// `∂f/∂x`.
pub fn bergman_jacobian(x: &[f64; 3], p: &BergmanParams) -> [[f64; 3]; 3] {
    [[-p.p1 - x[X], -x[G], 0.0], [0.0, -p.p2, p.p3], [0.0, 0.0, -p.n]]
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BergmanModel;

impl VectorField<3, 1> for BergmanModel {
    type Params = BergmanParams;

    #[inline]
    fn eval(&self, x: &[f64; 3], u: &[f64; 1], d: f64, _t: f64, p: &BergmanParams) -> [f64; 3] {
        bergman_rhs(x, u[0], d, p)
    }
}

impl DifferentiableField<3, 1> for BergmanModel {
    fn jacobians(&self, x: &[f64; 3], _u: &[f64; 1], _d: f64, _t: f64, p: &BergmanParams) -> ([[f64; 3]; 3], [[f64; 1]; 3]) {
        (bergman_jacobian(x, p), [[0.0], [0.0], [1.0]])
    }
}

/// Only glucose is measured.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GlucoseObservation;

impl ObservationModel<3, 3, 1> for GlucoseObservation {
    type Field = BergmanModel;

    fn field(&self) -> &BergmanModel {
        &BergmanModel
    }

    fn field_params(&self, theta: &[f64; 3]) -> BergmanParams {
        BergmanParams::from_theta(theta)
    }

    fn observe(&self, x: &[f64; 3], _theta: &[f64; 3]) -> f64 {
        x[G]
    }
}

/// Lognormal priors on `(p2, p3, n)` and Gaussian priors on the 6 am state.
///
/// The commonly quoted nominal values (p2 = 0.63, p3 = 1.12, n = 0.22) are on a
/// different scale from these priors and is not used numerically; nominal
/// parameters are the prior medians, see [`nominal_params`].
pub fn standard_prior() -> PriorSpec {
    PriorSpec {
        params: vec![
            LogNormalPrior { mu_log: -4.26, sigma_log: 0.18 },
            LogNormalPrior { mu_log: -13.27, sigma_log: 0.28 },
            LogNormalPrior { mu_log: -1.66, sigma_log: 0.23 },
        ],
        states: vec![
            NormalPrior { mean: 80.0, sd: 8.0 },
            NormalPrior { mean: 0.0, sd: 0.001 },
            NormalPrior { mean: 7.0, sd: 2.0 },
        ],
    }
}

/// Prior medians as model parameters.
pub fn nominal_params(prior: &PriorSpec) -> BergmanParams {
    BergmanParams::from_theta(&prior.center::<3, 3>().theta)
}

pub fn sample_prior<R: Rng + ?Sized>(prior: &PriorSpec, rng: &mut R) -> LatentSample<3, 3> {
    prior.sample(rng)
}

pub fn prior_logdensity(z: &LatentSample<3, 3>, prior: &PriorSpec) -> f64 {
    prior.log_density(z)
}

/// Settings for synthetic data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementConfig {
    pub count: usize,
    pub sigma: f64,
    /// Measurement instants lie on this grid (the inference step).
    pub grid_step: f64,
    /// Step of the ground-truth solver.
    pub truth_step: f64,
}

impl Default for MeasurementConfig {
    fn default() -> Self {
        Self { count: 200, sigma: 8.0, grid_step: 0.5, truth_step: 0.1 }
    }
}

/// Draw `count` distinct instants uniformly from the grid on `[start, end]`.
pub fn sample_measurement_times<R: Rng + ?Sized>(start: f64, end: f64, step: f64, count: usize, rng: &mut R) -> Vec<f64> {
    let points = ((end - start) / step).round() as usize + 1;
    assert!(count >= 1 && count <= points, "cannot place {count} measurements on {points} grid points");
    let mut idx = index::sample(rng, points, count).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| start + i as f64 * step).collect()
}

/// Ground-truth trajectory on the fine Tsit5 grid.
pub fn simulate_truth(
    truth: &LatentSample<3, 3>,
    input: &TrainingInput,
    t1: f64,
    truth_step: f64,
) -> Result<Trajectory<3>, IntegrationError> {
    let p = BergmanParams::from_theta(&truth.theta);
    integrate_grid(&BergmanModel, &p, truth.x0, input, input.start, t1, &IntegratorConfig::tsit5(truth_step))
}

/// Synthetic training data: noisy glucose at uniformly drawn grid instants of
/// the training window, from a Tsit5 simulation of the true system.
pub fn generate_dataset<R: Rng + ?Sized>(
    truth: &LatentSample<3, 3>,
    input: TrainingInput,
    cfg: &MeasurementConfig,
    rng: &mut R,
) -> Result<Dataset<TrainingInput>, crate::Error> {
    let times = sample_measurement_times(input.start, input.end, cfg.grid_step, cfg.count, rng);
    let p = BergmanParams::from_theta(&truth.theta);
    let tr = tsit54_integrate(&BergmanModel, &p, truth.x0, &input, input.start, input.end, cfg.truth_step, &times)?;
    let outputs = tr
        .states
        .iter()
        .map(|x| {
            let v: f64 = StandardNormal.sample(rng);
            x[G] + cfg.sigma * v
        })
        .collect();
    if cfg.sigma == 0.0 {
        // exact outputs; the likelihood still needs a positive noise level
        return Ok(Dataset { input, times, outputs, noise_sigma: 0.0 });
    }
    Dataset::new(input, times, outputs, cfg.sigma).map_err(|e: ModelError| e.into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ode::{integrate_to, rk4_step, ZeroInput};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn nominal() -> BergmanParams {
        nominal_params(&standard_prior())
    }

    #[test]
    fn equilibrium_is_zero() {
        for g in [40.0, 100.0, 250.0] {
            assert_eq!(bergman_rhs(&[g, 0.0, 7.0], 0.0, 0.0, &nominal()), [0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn single_uptake_term() {
        let d = bergman_rhs(&[100.0, 0.01, 7.0], 0.0, 0.0, &nominal());
        assert!((d[G] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn remote_action_drive() {
        let p = nominal();
        let d = bergman_rhs(&[100.0, 0.0, 17.0], 0.0, 0.0, &p);
        assert!((d[X] - p.p3 * 10.0).abs() < 1e-20);
    }

    #[test]
    fn rk4_keeps_equilibrium() {
        let x = [95.0, 0.0, BASAL_INSULIN];
        let y = rk4_step(&BergmanModel, &x, 0.0, 0.5, &ZeroInput { start: 0.0, end: 1.0 }, &nominal()).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let prior = standard_prior();
        for _ in 0..20 {
            let z = sample_prior(&prior, &mut rng);
            let p = BergmanParams::from_theta(&z.theta);
            let x = [rng.random_range(40.0..250.0), rng.random_range(-0.02..0.02), rng.random_range(0.0..80.0)];
            let a = bergman_jacobian(&x, &p);
            for j in 0..3 {
                let mut up = x;
                let mut dn = x;
                let dx = 1e-6 * x[j].abs().max(1e-3);
                up[j] += dx;
                dn[j] -= dx;
                let fu = bergman_rhs(&up, 1.0, 2.0, &p);
                let fd = bergman_rhs(&dn, 1.0, 2.0, &p);
                for i in 0..3 {
                    let fdj = (fu[i] - fd[i]) / (2.0 * dx);
                    assert!((fdj - a[i][j]).abs() < 1e-6, "({i},{j}) {fdj} vs {}", a[i][j]);
                }
            }
            // sparsity
            assert_eq!(a[1][0], 0.0);
            assert_eq!(a[2][0], 0.0);
            assert_eq!(a[2][1], 0.0);
            assert_eq!(a[0][2], 0.0);
        }
    }

    #[test]
    fn prior_median_of_p2() {
        let prior = standard_prior();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut p2: Vec<f64> = (0..100_000).map(|_| sample_prior(&prior, &mut rng).theta[0]).collect();
        p2.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let med = 0.5 * (p2[49_999] + p2[50_000]);
        let target = (-4.26f64).exp();
        assert!((med / target - 1.0).abs() < 0.02, "{med} vs {target}");
        assert!((target - 0.014_122).abs() < 1e-6);
    }

    #[test]
    fn prior_glucose_mean_and_positivity() {
        let prior = standard_prior();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut sum = 0.0;
        for _ in 0..100_000 {
            let z = sample_prior(&prior, &mut rng);
            assert!(z.theta.iter().all(|v| *v > 0.0));
            sum += z.x0[G];
        }
        // standard error 8/√1e5 ≈ 0.025
        assert!((sum / 1e5 - 80.0).abs() < 0.1);
    }

    fn training(gain: f64) -> TrainingInput {
        TrainingInput { schedule: MealSchedule::standard_day(), gain, start: TRAINING_START, end: 0.0 }
    }

    #[test]
    fn nominal_training_day_stays_plausible() {
        let z = standard_prior().center::<3, 3>();
        let tr = simulate_truth(&z, &training(DEFAULT_TRAINING_GAIN), 0.0, 0.1).unwrap();
        let g = tr.component(G);
        let lo = g.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(lo > 65.0 && hi < 195.0, "G range [{lo}, {hi}]");
    }

    #[test]
    fn noiseless_dataset_equals_truth() {
        let z = standard_prior().center::<3, 3>();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = MeasurementConfig { sigma: 0.0, ..Default::default() };
        let ds = generate_dataset(&z, training(DEFAULT_TRAINING_GAIN), &cfg, &mut rng).unwrap();
        assert_eq!(ds.len(), 200);
        let truth = simulate_truth(&z, &training(DEFAULT_TRAINING_GAIN), 0.0, 0.1).unwrap();
        for (t, y) in ds.times.iter().zip(&ds.outputs) {
            let k = ((t - TRAINING_START) / 0.1).round() as usize;
            assert_eq!(*y, truth.states[k][G]);
        }
    }

    #[test]
    fn measurement_times_in_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t = sample_measurement_times(-720.0, 0.0, 0.5, 200, &mut rng);
        assert_eq!(t.len(), 200);
        assert!(t.iter().all(|v| (-720.0..=0.0).contains(v)));
        assert!(t.windows(2).all(|w| w[0] < w[1]));
        assert!(t.iter().all(|v| (v * 2.0).fract() == 0.0));
    }

    #[test]
    fn residual_variance() {
        let z = standard_prior().center::<3, 3>();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let truth = simulate_truth(&z, &training(DEFAULT_TRAINING_GAIN), 0.0, 0.1).unwrap();
        let cfg = MeasurementConfig::default();
        let mut r = Vec::new();
        while r.len() < 10_000 {
            let ds = generate_dataset(&z, training(DEFAULT_TRAINING_GAIN), &cfg, &mut rng).unwrap();
            for (t, y) in ds.times.iter().zip(&ds.outputs) {
                let k = ((t - TRAINING_START) / 0.1).round() as usize;
                r.push((y - truth.states[k][G]) / cfg.sigma);
            }
        }
        let n = r.len() as f64;
        let mean = r.iter().sum::<f64>() / n;
        let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.05, "{mean}");
        assert!((var - 1.0).abs() < 0.05, "{var}");
        assert!((var * 64.0 - 64.0).abs() < 3.0);
    }

    #[test]
    fn rk4_and_tsit5_agree_on_truth() {
        let z = standard_prior().center::<3, 3>();
        let p = BergmanParams::from_theta(&z.theta);
        let inp = training(DEFAULT_TRAINING_GAIN);
        let rk = integrate_to(&BergmanModel, &p, z.x0, &inp, -720.0, 0.0, &IntegratorConfig::rk4(0.5)).unwrap();
        let ts = simulate_truth(&z, &inp, 0.0, 0.1).unwrap();
        assert!((rk[G] - ts.last().unwrap()[G]).abs() < 0.5);
    }
}
