use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{derive_seed, ExperimentConfig, Stream};
use crate::ekf::{self, NominalPlan};
use crate::glucose::{self, BergmanModel, BergmanParams, GlucoseObservation, MealSchedule, TrainingInput, G};
use crate::mmh::{self, ChainRun, PosteriorSampleSet};
use crate::model::{Dataset, LatentSample};
use crate::ocp::{self, ControlGrid, ControlTrajectory, OcpReport, Scenario, ScenarioOcp};
use crate::ode::{integrate_grid, integrate_to, IntegratorConfig, PiecewiseConstantInput, TabulatedDisturbance};
use crate::Error;

/// Validated configuration with the derived objects every run shares.
pub struct Context {
    pub cfg: ExperimentConfig,
    pub grid: ControlGrid,
    /// Meal disturbance cached on the planning step grid of the horizon.
    pub disturbance: TabulatedDisturbance<MealSchedule>,
    pub nominal: BergmanParams,
}

impl Context {
    pub fn new(cfg: ExperimentConfig) -> Result<Self, Error> {
        cfg.validate()?;
        let grid = cfg.horizon.grid()?;
        let disturbance = TabulatedDisturbance::new(cfg.meals.clone(), cfg.horizon.start, cfg.horizon.end(), cfg.horizon.step);
        let nominal = glucose::nominal_params(&cfg.prior);
        Ok(Self { cfg, grid, disturbance, nominal })
    }

    pub fn training_input(&self) -> TrainingInput {
        TrainingInput { schedule: self.cfg.meals.clone(), gain: self.cfg.training_gain, start: glucose::TRAINING_START, end: 0.0 }
    }

    fn truth_integrator(&self) -> IntegratorConfig {
        IntegratorConfig::tsit5(self.cfg.measurement.truth_step)
    }

    fn zero_control(&self) -> ControlTrajectory<1> {
        let (lo, hi) = self.cfg.ocp.input_bounds::<1>();
        ControlTrajectory::constant(self.grid.intervals(), [0.0], lo, hi)
    }

    fn problem<'a>(&'a self, scenarios: &'a [Scenario<BergmanParams, 3>]) -> ScenarioOcp<'a, BergmanModel, TabulatedDisturbance<MealSchedule>, 3, 1> {
        ScenarioOcp {
            field: &BergmanModel,
            scenarios,
            grid: &self.grid,
            spec: &self.cfg.ocp,
            disturbance: &self.disturbance,
            step: self.cfg.horizon.step,
        }
    }
}

/// An admitted ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthDraw {
    /// Parameters and the state at the start of the training window.
    pub z: LatentSample<3, 3>,
    /// True state at the start of the horizon.
    pub x_horizon: [f64; 3],
    /// Prior draws rejected before this one.
    pub redraws: usize,
}

/// Draw a ground truth from the prior, subject to the admissibility screen.
pub fn draw_truth(ctx: &Context, rng: &mut ChaCha8Rng) -> Result<TruthDraw, Error> {
    let screen = ctx.cfg.screen;
    let attempts = if screen.enabled { screen.max_draws } else { 1 };
    let input = ctx.training_input();
    for redraws in 0..attempts {
        let z = glucose::sample_prior(&ctx.cfg.prior, rng);
        let p = BergmanParams::from_theta(&z.theta);
        let x_horizon = integrate_to(&BergmanModel, &p, z.x0, &input, input.start, input.end, &ctx.truth_integrator())?;
        if !screen.enabled {
            return Ok(TruthDraw { z, x_horizon, redraws });
        }
        let sc = [Scenario { params: p, x0: x_horizon, index: 0 }];
        let (_, report) = ocp::solve_ocp(&ctx.problem(&sc), &ctx.cfg.solver, &ctx.zero_control())?;
        if report.success {
            return Ok(TruthDraw { z, x_horizon, redraws });
        }
        log::debug!("truth with G(0) = {:.1} is not controllable, redrawing", x_horizon[G]);
    }
    Err(Error::Experiment(format!("no admissible ground truth in {attempts} prior draws")))
}

pub fn generate_data(ctx: &Context, truth: &TruthDraw, rng: &mut ChaCha8Rng) -> Result<Dataset<TrainingInput>, Error> {
    glucose::generate_dataset(&truth.z, ctx.training_input(), &ctx.cfg.measurement, rng)
}

/// Posterior scenarios and the plan computed from them.
#[derive(Debug, Clone)]
pub struct MmhPlan {
    pub chain: ChainRun<3, 3>,
    pub posterior: PosteriorSampleSet<3, 3>,
    pub scenarios: Vec<Scenario<BergmanParams, 3>>,
    pub control: ControlTrajectory<1>,
    pub report: OcpReport,
}

pub fn posterior_scenarios(set: &PosteriorSampleSet<3, 3>) -> Vec<Scenario<BergmanParams, 3>> {
    set.samples
        .iter()
        .enumerate()
        .map(|(k, s)| Scenario { params: BergmanParams::from_theta(&s.theta), x0: s.x0, index: k })
        .collect()
}

/// Sample the posterior, propagate it to `t = 0` and solve the scenario
/// problem.
pub fn plan_mmh(ctx: &Context, data: &Dataset<TrainingInput>, seed: u64) -> Result<MmhPlan, Error> {
    let cfg = &ctx.cfg.chain;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chain = mmh::run_chain::<_, _, _, 3, 3, 1>(data, &GlucoseObservation, &ctx.cfg.prior, cfg, &mut rng)?;
    let kept = mmh::burn_in_and_thin(&chain.samples, cfg.samples, cfg.burn_in, cfg.thin)?;
    let posterior = mmh::map_to_t0(&kept, &GlucoseObservation, &data.input, &cfg.integrator, seed, cfg.fingerprint());
    if posterior.samples.is_empty() {
        return Err(Error::Experiment("every posterior sample failed to propagate".into()));
    }
    let scenarios = posterior_scenarios(&posterior);
    let (control, report) = plan_scenarios(ctx, &scenarios)?;
    Ok(MmhPlan { chain, posterior, scenarios, control, report })
}

pub fn plan_scenarios(ctx: &Context, scenarios: &[Scenario<BergmanParams, 3>]) -> Result<(ControlTrajectory<1>, OcpReport), Error> {
    Ok(ocp::solve_ocp(&ctx.problem(scenarios), &ctx.cfg.solver, &ctx.zero_control())?)
}

/// Nominal parameters, EKF estimate at `t = 0`, single-scenario plan.
pub fn plan_nominal(ctx: &Context, data: &Dataset<TrainingInput>) -> Result<NominalPlan, Error> {
    Ok(ekf::nominal_plan(
        data,
        &ctx.nominal,
        &ctx.cfg.prior,
        &ctx.cfg.ekf,
        &ctx.cfg.ocp,
        &ctx.grid,
        &ctx.disturbance,
        &ctx.cfg.solver,
        ctx.cfg.horizon.step,
    )?)
}

/// Predicted glucose of every scenario under one plan, on the planning step
/// grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub times: Vec<f64>,
    pub glucose: Vec<Vec<f64>>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub mean: Vec<f64>,
}

pub fn envelope(ctx: &Context, scenarios: &[Scenario<BergmanParams, 3>], control: &ControlTrajectory<1>) -> Result<Envelope, Error> {
    let input = PiecewiseConstantInput { nodes: ctx.grid.nodes(), values: &control.values, disturbance: &ctx.disturbance };
    let cfg = IntegratorConfig::rk4(ctx.cfg.horizon.step);
    let mut times = Vec::new();
    let mut glucose = Vec::with_capacity(scenarios.len());
    for sc in scenarios {
        let tr = integrate_grid(&BergmanModel, &sc.params, sc.x0, &input, ctx.grid.start(), ctx.grid.end(), &cfg)?;
        glucose.push(tr.component(G));
        times = tr.times;
    }
    let n = times.len();
    let col = |j: usize| glucose.iter().map(move |g| g[j]);
    let min = (0..n).map(|j| col(j).fold(f64::INFINITY, f64::min)).collect();
    let max = (0..n).map(|j| col(j).fold(f64::NEG_INFINITY, f64::max)).collect();
    let mean = (0..n).map(|j| col(j).sum::<f64>() / glucose.len() as f64).collect();
    Ok(Envelope { times, glucose, min, max, mean })
}

impl Envelope {
    /// Whether `realized` stays within `[min − slack, max + slack]` at every
    /// envelope time; the realized trajectory is interpolated linearly.
    pub fn contains(&self, realized: &Realized, slack: f64) -> bool {
        self.times.iter().enumerate().all(|(j, &t)| {
            let g = realized.glucose_at(t);
            g >= self.min[j] - slack && g <= self.max[j] + slack
        })
    }
}

/// A plan applied to the true system.
#[derive(Debug, Clone, PartialEq)]
pub struct Realized {
    pub times: Vec<f64>,
    pub states: Vec<[f64; 3]>,
    pub cost: f64,
    pub violation: bool,
    pub g_min: f64,
    pub g_max: f64,
}

impl Realized {
    pub fn glucose_at(&self, t: f64) -> f64 {
        let i = self.times.partition_point(|&s| s <= t).clamp(1, self.times.len() - 1);
        let (t0, t1) = (self.times[i - 1], self.times[i]);
        let w = (t - t0) / (t1 - t0);
        self.states[i - 1][G] * (1.0 - w) + self.states[i][G] * w
    }
}

/// Running cost by the trapezoidal rule on the given grid plus the terminal
/// term. The input is constant between grid points as long as the control
/// nodes lie on the grid, so its part is integrated exactly.
pub fn realized_cost(
    times: &[f64],
    states: &[[f64; 3]],
    control: &ControlTrajectory<1>,
    grid: &ControlGrid,
    spec: &ocp::OcpSpec,
) -> f64 {
    let e = |x: &[f64; 3]| {
        let d = x[spec.tracked] - spec.reference;
        d * d
    };
    let mut cost = 0.0;
    for i in 0..times.len() - 1 {
        let h = times[i + 1] - times[i];
        let u = control.at(grid, 0.5 * (times[i] + times[i + 1]))[0];
        cost += h * (spec.w_track * 0.5 * (e(&states[i]) + e(&states[i + 1])) + spec.w_input * u * u);
    }
    cost + spec.terminal_cost(&states[states.len() - 1])
}

/// Apply `control` to the true system from `x0` at the start of the horizon.
pub fn realize(ctx: &Context, params: &BergmanParams, x0: [f64; 3], control: &ControlTrajectory<1>) -> Result<Realized, Error> {
    if control.len() != ctx.grid.intervals() {
        return Err(Error::Experiment(format!("{} control values for {} intervals", control.len(), ctx.grid.intervals())));
    }
    let input = PiecewiseConstantInput { nodes: ctx.grid.nodes(), values: &control.values, disturbance: &ctx.cfg.meals };
    let tr = integrate_grid(&BergmanModel, params, x0, &input, ctx.grid.start(), ctx.grid.end(), &ctx.truth_integrator())?;
    let spec = &ctx.cfg.ocp;
    let cost = realized_cost(&tr.times, &tr.states, control, &ctx.grid, spec);
    let g = tr.component(G);
    let g_min = g.iter().cloned().fold(f64::INFINITY, f64::min);
    let g_max = g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let violation = g.iter().any(|&v| v < spec.state_lower || v > spec.state_upper);
    Ok(Realized { times: tr.times, states: tr.states, cost, violation, g_min, g_max })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Mmh,
    Nominal,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Mmh => "mmh",
            Method::Nominal => "nominal",
        }
    }
}

/// Score of one method in one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run: usize,
    pub method: Method,
    pub p2: f64,
    pub p3: f64,
    pub n: f64,
    pub g_start: f64,
    pub x_start: f64,
    pub i_start: f64,
    pub cost: f64,
    pub violation: bool,
    pub g_min: f64,
    pub g_max: f64,
    pub solver_success: bool,
    /// Largest node-bound residual of the plan on its own scenarios.
    pub plan_max_violation: f64,
    /// Range of the applied input.
    pub u_low: f64,
    pub u_high: f64,
    /// Only for the scenario method.
    pub envelope_contained: Option<bool>,
    pub truth_redraws: usize,
}

pub fn evaluate_plan(
    ctx: &Context,
    run: usize,
    method: Method,
    truth: &TruthDraw,
    control: &ControlTrajectory<1>,
    report: &OcpReport,
) -> Result<(RunResult, Realized), Error> {
    let params = BergmanParams::from_theta(&truth.z.theta);
    let realized = realize(ctx, &params, truth.x_horizon, control)?;
    let result = RunResult {
        run,
        method,
        p2: truth.z.theta[0],
        p3: truth.z.theta[1],
        n: truth.z.theta[2],
        g_start: truth.z.x0[0],
        x_start: truth.z.x0[1],
        i_start: truth.z.x0[2],
        cost: realized.cost,
        violation: realized.violation,
        g_min: realized.g_min,
        g_max: realized.g_max,
        solver_success: report.success,
        plan_max_violation: report.max_violation,
        u_low: control.values.iter().map(|u| u[0]).fold(f64::INFINITY, f64::min),
        u_high: control.values.iter().map(|u| u[0]).fold(f64::NEG_INFINITY, f64::max),
        envelope_contained: None,
        truth_redraws: truth.redraws,
    };
    Ok((result, realized))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub run: usize,
    pub stage: String,
    pub category: String,
    pub message: String,
}

impl RunFailure {
    fn new(run: usize, stage: &str, e: &Error) -> Self {
        Self { run, stage: stage.into(), category: e.category().name().into(), message: e.to_string() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    pub run: usize,
    pub method: Method,
    pub seconds: f64,
}

/// Everything one run produced.
#[derive(Debug, Clone, Default)]
pub struct RunOutcome {
    pub results: Vec<RunResult>,
    pub failures: Vec<RunFailure>,
    pub timings: Vec<RunTiming>,
}

/// Slack of the envelope containment check, mg/dL.
pub const ENVELOPE_SLACK: f64 = 5.0;

/// One Monte Carlo run: truth, data, both methods, scores. Failures of one
/// method are recorded without affecting the other.
pub fn run_once(ctx: &Context, run: usize) -> RunOutcome {
    let mut out = RunOutcome::default();
    let master = ctx.cfg.seed;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(master, run, Stream::Truth));
    let (truth, data) = match draw_truth(ctx, &mut rng).and_then(|t| Ok((generate_data(ctx, &t, &mut rng)?, t))) {
        Ok((d, t)) => (t, d),
        Err(e) => {
            out.failures.push(RunFailure::new(run, "truth", &e));
            return out;
        }
    };

    let clock = Instant::now();
    let mmh = plan_mmh(ctx, &data, derive_seed(master, run, Stream::Mmh)).and_then(|plan| {
        let (mut res, realized) = evaluate_plan(ctx, run, Method::Mmh, &truth, &plan.control, &plan.report)?;
        let env = envelope(ctx, &plan.scenarios, &plan.control)?;
        res.envelope_contained = Some(env.contains(&realized, ENVELOPE_SLACK));
        log::info!(
            "run {run} mmh: acceptance {:.3}, solver {} (residual {:.1e}), realized G in [{:.1}, {:.1}], cost {:.0}",
            plan.chain.production.acceptance_rate(),
            plan.report.success,
            plan.report.max_violation,
            res.g_min,
            res.g_max,
            res.cost
        );
        Ok(res)
    });
    out.timings.push(RunTiming { run, method: Method::Mmh, seconds: clock.elapsed().as_secs_f64() });
    match mmh {
        Ok(r) => out.results.push(r),
        Err(e) => out.failures.push(RunFailure::new(run, Method::Mmh.name(), &e)),
    }

    let clock = Instant::now();
    let nominal = plan_nominal(ctx, &data).and_then(|plan| {
        let (res, _) = evaluate_plan(ctx, run, Method::Nominal, &truth, &plan.control, &plan.report)?;
        log::info!("run {run} nominal: realized G in [{:.1}, {:.1}], cost {:.0}", res.g_min, res.g_max, res.cost);
        Ok(res)
    });
    out.timings.push(RunTiming { run, method: Method::Nominal, seconds: clock.elapsed().as_secs_f64() });
    match nominal {
        Ok(r) => out.results.push(r),
        Err(e) => out.failures.push(RunFailure::new(run, Method::Nominal.name(), &e)),
    }
    out
}

/// All runs, ordered by run index.
#[derive(Debug, Clone)]
pub struct MonteCarlo {
    pub results: Vec<RunResult>,
    pub failures: Vec<RunFailure>,
    pub timings: Vec<RunTiming>,
    pub summary: Summary,
}

/// Execute every run on a pool of worker threads. Each run owns its state and
/// random streams, and results are collected by run index, so the output
/// does not depend on the number of workers.
pub fn monte_carlo(ctx: &Context) -> MonteCarlo {
    let runs = ctx.cfg.runs;
    let workers = match ctx.cfg.workers {
        0 => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        w => w,
    }
    .min(runs);
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<RunOutcome>>> = Mutex::new(vec![None; runs]);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let r = next.fetch_add(1, Ordering::Relaxed);
                if r >= runs {
                    break;
                }
                let outcome = run_once(ctx, r);
                slots.lock().expect("result slots")[r] = Some(outcome);
            });
        }
    });
    let mut results = Vec::new();
    let mut failures = Vec::new();
    let mut timings = Vec::new();
    for o in slots.into_inner().expect("result slots").into_iter().flatten() {
        results.extend(o.results);
        failures.extend(o.failures);
        timings.extend(o.timings);
    }
    let summary = Summary::new(runs, ctx.cfg.chain.samples, &results, &failures);
    MonteCarlo { results, failures, timings, summary }
}

/// Per-method aggregate.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodSummary {
    pub completed: usize,
    pub violations: usize,
    pub cost_mean: f64,
    pub cost_std: f64,
    pub solver_success: usize,
    pub envelope_contained: usize,
}

impl MethodSummary {
    fn new(rows: &[&RunResult]) -> Self {
        let n = rows.len();
        let mean = rows.iter().map(|r| r.cost).sum::<f64>() / n as f64;
        let var = if n > 1 { rows.iter().map(|r| (r.cost - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
        Self {
            completed: n,
            violations: rows.iter().filter(|r| r.violation).count(),
            cost_mean: mean,
            cost_std: var.sqrt(),
            solver_success: rows.iter().filter(|r| r.solver_success).count(),
            envelope_contained: rows.iter().filter(|r| r.envelope_contained == Some(true)).count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub runs: usize,
    pub scenarios: usize,
    pub mmh: MethodSummary,
    pub nominal: MethodSummary,
    pub failures: usize,
    pub truth_redraws: usize,
}

impl Summary {
    pub fn new(runs: usize, scenarios: usize, results: &[RunResult], failures: &[RunFailure]) -> Self {
        let pick = |m: Method| results.iter().filter(|r| r.method == m).collect::<Vec<_>>();
        let redraws = results.iter().filter(|r| r.method == Method::Nominal).map(|r| r.truth_redraws).sum();
        Self {
            runs,
            scenarios,
            mmh: MethodSummary::new(&pick(Method::Mmh)),
            nominal: MethodSummary::new(&pick(Method::Nominal)),
            failures: failures.len(),
            truth_redraws: redraws,
        }
    }

    /// Machine-readable `key = value` pairs. Costs are in units of 10⁴.
    pub fn pairs(&self) -> Vec<(String, String)> {
        let mut v = vec![
            ("runs".to_string(), self.runs.to_string()),
            ("scenarios".to_string(), self.scenarios.to_string()),
            ("failures".to_string(), self.failures.to_string()),
            ("truth_redraws".to_string(), self.truth_redraws.to_string()),
        ];
        for (name, m) in [("mmh", &self.mmh), ("nominal", &self.nominal)] {
            v.push((format!("{name}.completed"), m.completed.to_string()));
            v.push((format!("{name}.violations"), m.violations.to_string()));
            v.push((format!("{name}.cost_mean_1e4"), format!("{:.6}", m.cost_mean / 1e4)));
            v.push((format!("{name}.cost_std_1e4"), format!("{:.6}", m.cost_std / 1e4)));
            v.push((format!("{name}.solver_success"), m.solver_success.to_string()));
        }
        v.push(("mmh.envelope_contained".to_string(), self.mmh.envelope_contained.to_string()));
        v
    }

    /// Markdown table of cost and violations per method.
    pub fn table(&self) -> String {
        let row = |name: String, m: &MethodSummary| {
            format!(
                "| {name} | {:.2} ± {:.2} | {}/{} |\n",
                m.cost_mean / 1e4,
                m.cost_std / 1e4,
                m.violations,
                m.completed
            )
        };
        let mut s = format!("Cost and constraint violations over {} Monte Carlo runs\n\n", self.runs);
        s.push_str("| Method | Cost (×10⁴) | Constraint violations |\n|---|---|---|\n");
        s.push_str(&row(format!("Scenario MMH (K = {})", self.scenarios), &self.mmh));
        s.push_str(&row("Nominal + EKF".to_string(), &self.nominal));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx() -> Context {
        Context::new(ExperimentConfig::default()).unwrap()
    }

    #[test]
    fn cost_of_equilibrium_without_meals_is_zero() {
        let mut cfg = ExperimentConfig::default();
        cfg.meals.meals.clear();
        let c = Context::new(cfg).unwrap();
        let p = c.nominal;
        let r = realize(&c, &p, [80.0, 0.0, glucose::BASAL_INSULIN], &c.zero_control()).unwrap();
        assert_eq!(r.cost, 0.0);
        assert!(!r.violation);
        assert_eq!((r.g_min, r.g_max), (80.0, 80.0));
    }

    #[test]
    fn input_cost_arithmetic() {
        let c = ctx();
        let times: Vec<f64> = (0..=3600).map(|i| i as f64 * 0.1).collect();
        let states = vec![[80.0, 0.0, 7.0]; times.len()];
        let u = ControlTrajectory::constant(72, [1.0], [0.0], [20.0]);
        let cost = realized_cost(&times, &states, &u, &c.grid, &c.cfg.ocp);
        assert!((cost - 0.036).abs() < 1e-12);
    }

    #[test]
    fn dip_below_bound_is_a_violation() {
        // frozen insulin action X drains glucose as G(0)·e^{−X t}, about 63 at the end
        let mut cfg = ExperimentConfig::default();
        cfg.meals.meals.clear();
        let c = Context::new(cfg).unwrap();
        let p = BergmanParams::from_theta(&[1e-9, 1e-12, 0.1]);
        let r = realize(&c, &p, [90.0, 0.001, 7.0], &c.zero_control()).unwrap();
        assert!(r.g_min < 70.0 && r.g_min > 50.0, "{}", r.g_min);
        assert!(r.violation);
    }

    #[test]
    fn envelope_bounds_and_containment() {
        let c = ctx();
        let sc: Vec<_> = [90.0, 100.0, 110.0]
            .iter()
            .enumerate()
            .map(|(k, g)| Scenario { params: c.nominal, x0: [*g, 0.0, 7.0], index: k })
            .collect();
        let u = ControlTrajectory::constant(72, [2.0], [0.0], [20.0]);
        let env = envelope(&c, &sc, &u).unwrap();
        assert_eq!(env.times.len(), 721);
        assert!(env.min.iter().zip(&env.max).all(|(a, b)| a <= b));
        assert_eq!(env.min[0], 90.0);
        assert_eq!(env.max[0], 110.0);
        assert!((env.mean[0] - 100.0).abs() < 1e-12);
        let mid = realize(&c, &c.nominal, [100.0, 0.0, 7.0], &u).unwrap();
        assert!(env.contains(&mid, 0.0));
        let high = realize(&c, &c.nominal, [125.0, 0.0, 7.0], &u).unwrap();
        assert!(!env.contains(&high, 5.0));
    }

    #[test]
    fn summary_statistics() {
        let row = |m, cost: f64, v| RunResult {
            run: 0,
            method: m,
            p2: 0.0,
            p3: 0.0,
            n: 0.0,
            g_start: 0.0,
            x_start: 0.0,
            i_start: 0.0,
            cost,
            violation: v,
            g_min: 0.0,
            g_max: 0.0,
            solver_success: true,
            plan_max_violation: 0.0,
            u_low: 0.0,
            u_high: 0.0,
            envelope_contained: None,
            truth_redraws: 1,
        };
        let rows = [row(Method::Mmh, 1e4, false), row(Method::Mmh, 3e4, false), row(Method::Nominal, 5e4, true)];
        let s = Summary::new(2, 50, &rows, &[]);
        assert_eq!(s.mmh.completed, 2);
        assert!((s.mmh.cost_mean - 2e4).abs() < 1e-9);
        assert!((s.mmh.cost_std - 2f64.sqrt() * 1e4).abs() < 1e-6);
        assert_eq!(s.nominal.violations, 1);
        assert_eq!(s.truth_redraws, 1);
        assert!(s.table().contains("| Nominal + EKF | 5.00 ± 0.00 | 1/1 |"));
        assert!(s.pairs().contains(&("mmh.cost_mean_1e4".to_string(), "2.000000".to_string())));
    }
}
