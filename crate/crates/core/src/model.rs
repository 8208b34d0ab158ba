//! Shared data model: latent samples, priors, datasets and the observation
//! map tying a vector field to scalar measurements.

use rand::Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ode::{InputSignal, VectorField};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_7;

/// One hypothesis `z = (θ, x(t_start))` about the parameters and the state at
/// the start of the training window. All parameters are strictly positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentSample<const NP: usize, const NX: usize> {
    pub theta: [f64; NP],
    pub x0: [f64; NX],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogNormalPrior {
    pub mu_log: f64,
    pub sigma_log: f64,
}

impl LogNormalPrior {
    pub fn log_density(&self, v: f64) -> f64 {
        if !(v > 0.0) {
            return f64::NEG_INFINITY;
        }
        let z = (v.ln() - self.mu_log) / self.sigma_log;
        -v.ln() - self.sigma_log.ln() - LN_SQRT_2PI - 0.5 * z * z
    }

    pub fn median(&self) -> f64 {
        self.mu_log.exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalPrior {
    pub mean: f64,
    pub sd: f64,
}

impl NormalPrior {
    pub fn log_density(&self, v: f64) -> f64 {
        let z = (v - self.mean) / self.sd;
        -self.sd.ln() - LN_SQRT_2PI - 0.5 * z * z
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("prior has {got} {what} components, model expects {expected}")]
    Dimension { what: &'static str, got: usize, expected: usize },
    #[error("prior scale for {what} component {index} must be positive, got {value}")]
    NonPositiveScale { what: &'static str, index: usize, value: f64 },
    #[error("dataset: {0}")]
    Dataset(String),
}

/// Independent lognormal priors on the parameters and Gaussian priors on the
/// initial state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub params: Vec<LogNormalPrior>,
    pub states: Vec<NormalPrior>,
}

impl PriorSpec {
    pub fn new(params: Vec<LogNormalPrior>, states: Vec<NormalPrior>) -> Result<Self, ModelError> {
        let spec = Self { params, states };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for (i, p) in self.params.iter().enumerate() {
            if !(p.sigma_log > 0.0) || !p.mu_log.is_finite() {
                return Err(ModelError::NonPositiveScale { what: "parameter", index: i, value: p.sigma_log });
            }
        }
        for (i, s) in self.states.iter().enumerate() {
            if !(s.sd > 0.0) || !s.mean.is_finite() {
                return Err(ModelError::NonPositiveScale { what: "state", index: i, value: s.sd });
            }
        }
        Ok(())
    }

    pub fn check_dims(&self, np: usize, nx: usize) -> Result<(), ModelError> {
        if self.params.len() != np {
            return Err(ModelError::Dimension { what: "parameter", got: self.params.len(), expected: np });
        }
        if self.states.len() != nx {
            return Err(ModelError::Dimension { what: "state", got: self.states.len(), expected: nx });
        }
        Ok(())
    }

    /// `log p(θ) + log p(x0)`; `−∞` if any parameter is non-positive.
    pub fn log_density<const NP: usize, const NX: usize>(&self, z: &LatentSample<NP, NX>) -> f64 {
        debug_assert!(self.check_dims(NP, NX).is_ok());
        let mut acc = 0.0;
        for (prior, v) in self.params.iter().zip(z.theta.iter()) {
            acc += prior.log_density(*v);
        }
        if acc == f64::NEG_INFINITY {
            return acc;
        }
        for (prior, v) in self.states.iter().zip(z.x0.iter()) {
            acc += prior.log_density(*v);
        }
        acc
    }

    pub fn sample<const NP: usize, const NX: usize, R: Rng + ?Sized>(&self, rng: &mut R) -> LatentSample<NP, NX> {
        debug_assert!(self.check_dims(NP, NX).is_ok());
        let mut theta = [0.0; NP];
        for (v, p) in theta.iter_mut().zip(&self.params) {
            *v = LogNormal::new(p.mu_log, p.sigma_log).expect("validated prior").sample(rng);
        }
        let mut x0 = [0.0; NX];
        for (v, p) in x0.iter_mut().zip(&self.states) {
            *v = Normal::new(p.mean, p.sd).expect("validated prior").sample(rng);
        }
        LatentSample { theta, x0 }
    }

    /// Parameter medians `e^μ` and state means.
    pub fn center<const NP: usize, const NX: usize>(&self) -> LatentSample<NP, NX> {
        let mut theta = [0.0; NP];
        for (v, p) in theta.iter_mut().zip(&self.params) {
            *v = p.median();
        }
        let mut x0 = [0.0; NX];
        for (v, p) in x0.iter_mut().zip(&self.states) {
            *v = p.mean;
        }
        LatentSample { theta, x0 }
    }
}

/// Known input on the training window together with the timestamped scalar
/// measurements and their Gaussian noise level.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<S> {
    pub input: S,
    pub times: Vec<f64>,
    pub outputs: Vec<f64>,
    pub noise_sigma: f64,
}

impl<S> Dataset<S> {
    pub fn new<const NU: usize>(input: S, times: Vec<f64>, outputs: Vec<f64>, noise_sigma: f64) -> Result<Self, ModelError>
    where
        S: InputSignal<NU>,
    {
        if times.len() != outputs.len() {
            return Err(ModelError::Dataset(format!("{} times but {} outputs", times.len(), outputs.len())));
        }
        if times.is_empty() {
            return Err(ModelError::Dataset("no measurements".into()));
        }
        if !(noise_sigma > 0.0) {
            return Err(ModelError::Dataset(format!("noise sigma must be positive, got {noise_sigma}")));
        }
        let (start, end) = input.domain();
        if times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ModelError::Dataset("measurement times must be strictly increasing".into()));
        }
        if times[0] < start || times[times.len() - 1] > end {
            return Err(ModelError::Dataset(format!("measurement times leave the window [{start}, {end}]")));
        }
        if outputs.iter().any(|y| !y.is_finite()) {
            return Err(ModelError::Dataset("non-finite measurement".into()));
        }
        Ok(Self { input, times, outputs, noise_sigma })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Gaussian measurement log-density of one residual.
    pub fn noise_log_density(&self, r: f64) -> f64 {
        let z = r / self.noise_sigma;
        -self.noise_sigma.ln() - LN_SQRT_2PI - 0.5 * z * z
    }
}

/// Parametric system observed through a scalar output map.
pub trait ObservationModel<const NP: usize, const NX: usize, const NU: usize> {
    type Field: VectorField<NX, NU>;

    fn field(&self) -> &Self::Field;

    fn field_params(&self, theta: &[f64; NP]) -> <Self::Field as VectorField<NX, NU>>::Params;

    fn observe(&self, x: &[f64; NX], theta: &[f64; NP]) -> f64;
}
