//! Synthetic-patient study: draw a ground truth from the prior, generate a
//! training day of sparse glucose data, plan the evening with both the
//! posterior-scenario method and the nominal EKF baseline, and score the
//! plans on the true system.

mod commands;
pub mod io;
mod pipeline;

pub use commands::{cmd_acf, cmd_evaluate, cmd_infer, cmd_monte_carlo, cmd_plan, cmd_plan_nominal, cmd_simulate};
pub use pipeline::{
    draw_truth, envelope, evaluate_plan, generate_data, monte_carlo, plan_mmh, plan_nominal, plan_scenarios, posterior_scenarios, realize, realized_cost, run_once, Context, Envelope,
    Method, MethodSummary, MmhPlan, MonteCarlo, Realized, RunFailure, RunOutcome, RunResult, RunTiming, Summary, TruthDraw, ENVELOPE_SLACK,
};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ekf::EkfConfig;
use crate::glucose::{self, MealSchedule, MeasurementConfig};
use crate::mmh::ChainConfig;
use crate::model::PriorSpec;
use crate::ocp::{ControlGrid, OcpSpec, SolverConfig};
use crate::Error;

/// Piecewise-constant control grid and the RK4 step used for planning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonConfig {
    pub start: f64,
    pub spacing: f64,
    pub intervals: usize,
    pub step: f64,
}

impl Default for HorizonConfig {
    fn default() -> Self {
        Self { start: 0.0, spacing: 5.0, intervals: 72, step: 0.5 }
    }
}

impl HorizonConfig {
    pub fn end(&self) -> f64 {
        self.start + self.spacing * self.intervals as f64
    }

    pub fn grid(&self) -> Result<ControlGrid, Error> {
        Ok(ControlGrid::uniform(self.start, self.spacing, self.intervals)?)
    }
}

/// Ground-truth admissibility. With `enabled`, a prior draw is kept only if
/// the control problem for the true system alone (true parameters, true
/// state at the start of the horizon) is solved successfully; otherwise it
/// is redrawn, at most `max_draws` times.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScreenConfig {
    pub enabled: bool,
    pub max_draws: usize,
}

impl Default for ScreenConfig {
    fn default() -> Self {
        Self { enabled: true, max_draws: 100 }
    }
}

/// Long unthinned chain for autocorrelation diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcfConfig {
    pub samples: usize,
    pub max_lag: usize,
}

impl Default for AcfConfig {
    fn default() -> Self {
        Self { samples: 20_000, max_lag: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Master seed; every random stream is derived from it.
    pub seed: u64,
    pub runs: usize,
    /// Worker threads for Monte Carlo runs, 0 for one per available core.
    /// Results do not depend on it.
    pub workers: usize,
    pub output_dir: PathBuf,
    /// Insulin per unit meal size during training, mU per (mg/dL).
    pub training_gain: f64,
    pub meals: MealSchedule,
    pub measurement: MeasurementConfig,
    pub prior: PriorSpec,
    pub chain: ChainConfig,
    pub horizon: HorizonConfig,
    pub ocp: OcpSpec,
    pub solver: SolverConfig,
    pub ekf: EkfConfig,
    pub screen: ScreenConfig,
    pub acf: AcfConfig,
}

impl Default for ExperimentConfig {
    /// Desk scale: 20 runs with 50 posterior scenarios each.
    fn default() -> Self {
        Self {
            seed: 2024,
            runs: 20,
            workers: 0,
            output_dir: PathBuf::from("out"),
            training_gain: glucose::DEFAULT_TRAINING_GAIN,
            meals: MealSchedule::standard_day(),
            measurement: MeasurementConfig::default(),
            prior: glucose::standard_prior(),
            chain: ChainConfig { samples: 50, ..ChainConfig::default() },
            horizon: HorizonConfig::default(),
            ocp: OcpSpec::glucose(),
            solver: SolverConfig::default(),
            ekf: EkfConfig::default(),
            screen: ScreenConfig::default(),
            acf: AcfConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// 100 runs with 100 scenarios each.
    pub fn full_scale(mut self) -> Self {
        self.runs = 100;
        self.chain.samples = 100;
        self
    }

    pub fn from_toml(text: &str) -> Result<Self, Error> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, Error> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        Self::from_toml(&io::read_text(path)?).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), Error> {
        let bad = |m: String| Err(Error::Config(m));
        if self.seed > i64::MAX as u64 {
            return bad(format!("seed {} exceeds {}", self.seed, i64::MAX));
        }
        if self.runs == 0 {
            return bad("run count must be at least 1".into());
        }
        if !(self.training_gain >= 0.0) {
            return bad(format!("training gain {}", self.training_gain));
        }
        self.meals.validate()?;
        let m = &self.measurement;
        if !(m.sigma > 0.0) || !(m.grid_step > 0.0) || !(m.truth_step > 0.0) {
            return bad("measurement sigma and steps must be positive".into());
        }
        let points = ((-glucose::TRAINING_START) / m.grid_step).round() as usize + 1;
        if m.count == 0 || m.count > points {
            return bad(format!("{} measurements on {points} grid points", m.count));
        }
        self.prior.validate()?;
        self.prior.check_dims(3, 3)?;
        self.chain.validate()?;
        self.ocp.validate(3)?;
        self.horizon.grid()?.check_step(self.horizon.step)?;
        if self.horizon.start != 0.0 {
            return bad("the horizon starts at the end of the training window, t = 0".into());
        }
        let s = &self.solver;
        if s.max_outer == 0 || s.max_inner == 0 || s.memory == 0 || !(s.rho_init > 0.0) || !(s.margin >= 0.0) {
            return bad("solver iteration counts, memory and penalty must be positive".into());
        }
        if self.ekf.q_rate.iter().any(|q| !(*q >= 0.0)) || !(self.ekf.step > 0.0) {
            return bad("EKF noise rates must be non-negative and the step positive".into());
        }
        if self.screen.enabled && self.screen.max_draws == 0 {
            return bad("screening needs at least one draw".into());
        }
        if self.acf.samples <= self.acf.max_lag {
            return bad("ACF chain must be longer than the maximum lag".into());
        }
        Ok(())
    }
}

/// Independent random streams of one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Ground truth and its synthetic data.
    Truth = 0,
    Mmh = 1,
    Nominal = 2,
    Acf = 3,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `s(master, r, m) = mix(mix(mix(master) ⊕ r) ⊕ m)` with the SplitMix64
/// finalizer as `mix`.
pub fn derive_seed(master: u64, run: usize, stream: Stream) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ run as u64) ^ stream as u64)
}
