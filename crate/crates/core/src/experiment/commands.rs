use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::io::{self, AcceptanceRow, ControlRow, DatasetRow, EkfTraceRow, LatentRow, SampleRow, StateRow};
use super::pipeline::{self, Context, Method, MonteCarlo, RunResult, Summary, TruthDraw};
use super::{derive_seed, ExperimentConfig, Stream};
use crate::ekf;
use crate::glucose::{BergmanModel, BergmanParams, GlucoseObservation};
use crate::mmh::{self, acf, ChainConfig, ChainRun, Counting};
use crate::model::{Dataset, LatentSample};
use crate::ocp::{ControlTrajectory, OcpReport, Scenario};
use crate::ode::{integrate_grid, integrate_to, IntegratorConfig};
use crate::Error;

fn out_dir(cfg: &ExperimentConfig) -> Result<&Path, Error> {
    io::ensure_dir(&cfg.output_dir)?;
    Ok(&cfg.output_dir)
}

const COMPONENTS: [&str; 6] = ["p2", "p3", "n", "G0", "X0", "I0"];

fn data_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Data { path: path.to_path_buf(), message: message.into() }
}

/// Draw a ground truth, simulate the training day and write
/// `truth.csv`, `truth_trajectory.csv` and `dataset.csv`.
pub fn cmd_simulate(cfg: &ExperimentConfig) -> Result<PathBuf, Error> {
    let ctx = Context::new(cfg.clone())?;
    let dir = out_dir(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0, Stream::Truth));
    let truth = pipeline::draw_truth(&ctx, &mut rng)?;
    let data = pipeline::generate_data(&ctx, &truth, &mut rng)?;

    let input = ctx.training_input();
    let p = BergmanParams::from_theta(&truth.z.theta);
    let tr = integrate_grid(&BergmanModel, &p, truth.z.x0, &input, input.start, input.end, &IntegratorConfig::tsit5(cfg.measurement.truth_step))?;
    io::write_rows(&dir.join("truth.csv"), &[LatentRow::new(truth.z.theta, truth.z.x0)])?;
    let rows: Vec<StateRow> = tr.times.iter().zip(&tr.states).map(|(&t, x)| StateRow { t_min: t, g: x[0], x: x[1], i: x[2] }).collect();
    io::write_rows(&dir.join("truth_trajectory.csv"), &rows)?;
    let path = dir.join("dataset.csv");
    let rows: Vec<DatasetRow> = data.times.iter().zip(&data.outputs).map(|(&t, &y)| DatasetRow { t_min: t, y_mgdl: y }).collect();
    io::write_rows(&path, &rows)?;
    Ok(path)
}

fn read_dataset(ctx: &Context, path: &Path) -> Result<Dataset<crate::glucose::TrainingInput>, Error> {
    let rows: Vec<DatasetRow> = io::read_rows(path)?;
    let times = rows.iter().map(|r| r.t_min).collect();
    let outputs = rows.iter().map(|r| r.y_mgdl).collect();
    Dataset::new::<1>(ctx.training_input(), times, outputs, ctx.cfg.measurement.sigma).map_err(|e| data_err(path, e.to_string()))
}

fn component_values(chain: &ChainRun<3, 3>, c: usize) -> Vec<f64> {
    chain.samples.iter().map(|s| if c < 3 { s.z.theta[c] } else { s.z.x0[c - 3] }).collect()
}

fn write_acf(path: &Path, chain: &ChainRun<3, 3>, max_lag: usize) -> Result<Vec<Vec<f64>>, Error> {
    let lag = max_lag.min(chain.samples.len().saturating_sub(1));
    let cols: Vec<Vec<f64>> = (0..6).map(|c| acf(&component_values(chain, c), lag)).collect::<Result<_, _>>()?;
    let mut header = vec!["lag".to_string()];
    header.extend(COMPONENTS.iter().map(|s| s.to_string()));
    let rows: Vec<Vec<f64>> = (0..=lag).map(|l| std::iter::once(l as f64).chain(cols.iter().map(|c| c[l])).collect()).collect();
    io::write_table(path, &header, &rows)?;
    Ok(cols)
}

/// Run the sampler on a dataset file and write `samples.csv` (states at the
/// start of the horizon), `acf.csv` of the production chain and
/// `acceptance.csv`.
pub fn cmd_infer(cfg: &ExperimentConfig, dataset: &Path) -> Result<PathBuf, Error> {
    let ctx = Context::new(cfg.clone())?;
    let dir = out_dir(cfg)?;
    let data = read_dataset(&ctx, dataset)?;
    let seed = derive_seed(cfg.seed, 0, Stream::Mmh);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chain = mmh::run_chain::<_, _, _, 3, 3, 1>(&data, &GlucoseObservation, &cfg.prior, &cfg.chain, &mut rng)?;
    let kept = mmh::burn_in_and_thin(&chain.samples, cfg.chain.samples, cfg.chain.burn_in, cfg.chain.thin)?;
    let set = mmh::map_to_t0(&kept, &GlucoseObservation, &data.input, &cfg.chain.integrator, seed, cfg.chain.fingerprint());

    let path = dir.join("samples.csv");
    let rows: Vec<SampleRow> = set
        .samples
        .iter()
        .map(|s| SampleRow { p2: s.theta[0], p3: s.theta[1], n: s.theta[2], g0: s.x0[0], x0: s.x0[1], i0: s.x0[2], logpost: s.log_posterior })
        .collect();
    io::write_rows(&path, &rows)?;
    io::write_kv(
        &dir.join("samples_meta.txt"),
        &[
            ("seed".into(), set.seed.to_string()),
            ("config_hash".into(), format!("{:016x}", set.config_hash)),
            ("excluded".into(), set.excluded.to_string()),
        ],
    )?;
    write_acf(&dir.join("acf.csv"), &chain, cfg.acf.max_lag)?;
    let mut acc: Vec<AcceptanceRow> = chain
        .stages
        .iter()
        .enumerate()
        .map(|(i, s)| AcceptanceRow {
            stage: format!("warmup{}", i + 1),
            measurements: s.measurements,
            proposals: s.proposals,
            accepted: s.accepted,
            rate: s.acceptance_rate(),
            scale: s.scale,
        })
        .collect();
    let p = &chain.production;
    acc.push(AcceptanceRow {
        stage: "production".into(),
        measurements: p.measurements,
        proposals: p.proposals,
        accepted: p.accepted,
        rate: p.acceptance_rate(),
        scale: p.scale,
    });
    io::write_rows(&dir.join("acceptance.csv"), &acc)?;
    Ok(path)
}

fn write_plan(dir: &Path, ctx: &Context, control: &ControlTrajectory<1>, report: &OcpReport) -> Result<PathBuf, Error> {
    let path = dir.join("control.csv");
    let rows: Vec<ControlRow> = ctx.grid.nodes().iter().zip(&control.values).map(|(&t, u)| ControlRow { t_min: t, u: u[0] }).collect();
    io::write_rows(&path, &rows)?;
    io::write_kv(
        &dir.join("plan.txt"),
        &[
            ("success".into(), report.success.to_string()),
            ("cost".into(), report.cost.to_string()),
            ("max_violation".into(), report.max_violation.to_string()),
            ("outer_iterations".into(), report.outer_iterations.to_string()),
            ("inner_iterations".into(), report.inner_iterations.to_string()),
            ("evaluations".into(), report.evaluations.to_string()),
        ],
    )?;
    Ok(path)
}

/// Solve the scenario problem for a sample file and write `control.csv`,
/// `plan.txt` and `envelope.csv` (every scenario's predicted glucose with
/// mean, min and max columns).
pub fn cmd_plan(cfg: &ExperimentConfig, samples: &Path) -> Result<(PathBuf, OcpReport), Error> {
    let ctx = Context::new(cfg.clone())?;
    let dir = out_dir(cfg)?;
    let rows: Vec<SampleRow> = io::read_rows(samples)?;
    let scenarios: Vec<_> = rows
        .iter()
        .enumerate()
        .map(|(k, r)| Scenario { params: BergmanParams::from_theta(&[r.p2, r.p3, r.n]), x0: [r.g0, r.x0, r.i0], index: k })
        .collect();
    let (control, report) = pipeline::plan_scenarios(&ctx, &scenarios)?;
    let path = write_plan(dir, &ctx, &control, &report)?;
    let env = pipeline::envelope(&ctx, &scenarios, &control)?;
    let mut header = vec!["t_min".to_string()];
    header.extend((1..=scenarios.len()).map(|k| format!("G_{k}")));
    header.extend(["mean", "min", "max"].iter().map(|s| s.to_string()));
    let table: Vec<Vec<f64>> = (0..env.times.len())
        .map(|j| {
            let mut r = vec![env.times[j]];
            r.extend(env.glucose.iter().map(|g| g[j]));
            r.extend([env.mean[j], env.min[j], env.max[j]]);
            r
        })
        .collect();
    io::write_table(&dir.join("envelope.csv"), &header, &table)?;
    Ok((path, report))
}

/// Baseline planner on a dataset file: writes `control.csv`, `plan.txt` and
/// `ekf_trace.csv`.
pub fn cmd_plan_nominal(cfg: &ExperimentConfig, dataset: &Path) -> Result<(PathBuf, OcpReport), Error> {
    let ctx = Context::new(cfg.clone())?;
    let dir = out_dir(cfg)?;
    let data = read_dataset(&ctx, dataset)?;
    let (trace, _) = ekf::run_filter(&data, &ctx.nominal, &cfg.prior, &cfg.ekf)?;
    let rows: Vec<EkfTraceRow> = trace
        .iter()
        .map(|s| EkfTraceRow {
            t: s.time,
            G_mean: s.mean[0],
            X_mean: s.mean[1],
            I_mean: s.mean[2],
            P_GG: s.covariance[(0, 0)],
            P_XX: s.covariance[(1, 1)],
            P_II: s.covariance[(2, 2)],
        })
        .collect();
    io::write_rows(&dir.join("ekf_trace.csv"), &rows)?;
    let plan = pipeline::plan_nominal(&ctx, &data)?;
    let path = write_plan(dir, &ctx, &plan.control, &plan.report)?;
    Ok((path, plan.report))
}

/// Apply a control file to the ground truth in `truth` (parameters and the
/// state at the start of the training window). Writes `realized.csv` and
/// `evaluation.txt`.
pub fn cmd_evaluate(cfg: &ExperimentConfig, control: &Path, truth: &Path, method: Method) -> Result<RunResult, Error> {
    let ctx = Context::new(cfg.clone())?;
    let dir = out_dir(cfg)?;
    let rows: Vec<ControlRow> = io::read_rows(control)?;
    let nodes = ctx.grid.nodes();
    if rows.len() != ctx.grid.intervals() || rows.iter().zip(nodes).any(|(r, t)| (r.t_min - t).abs() > 1e-9) {
        return Err(data_err(
            control,
            format!("control does not match the horizon: expected {} values at t = {}, {}, ...", ctx.grid.intervals(), nodes[0], nodes[1]),
        ));
    }
    let (lo, hi) = cfg.ocp.input_bounds::<1>();
    let u = ControlTrajectory { values: rows.iter().map(|r| [r.u]).collect(), lower: lo, upper: hi };
    let t: Vec<LatentRow> = io::read_rows(truth)?;
    if t.len() != 1 {
        return Err(data_err(truth, format!("expected one ground truth, found {}", t.len())));
    }
    let z = LatentSample { theta: t[0].theta(), x0: t[0].state() };
    let input = ctx.training_input();
    let p = BergmanParams::from_theta(&z.theta);
    let x_horizon = integrate_to(&BergmanModel, &p, z.x0, &input, input.start, input.end, &IntegratorConfig::tsit5(cfg.measurement.truth_step))?;
    let draw = TruthDraw { z, x_horizon, redraws: 0 };
    let report = OcpReport {
        success: true,
        cost: f64::NAN,
        max_violation: 0.0,
        outer_iterations: 0,
        inner_iterations: 0,
        evaluations: 0,
        rho: 0.0,
        merit_trace: Vec::new(),
    };
    let (mut result, realized) = pipeline::evaluate_plan(&ctx, 0, method, &draw, &u, &report)?;
    result.plan_max_violation = f64::NAN;
    let states: Vec<StateRow> =
        realized.times.iter().zip(&realized.states).map(|(&t, x)| StateRow { t_min: t, g: x[0], x: x[1], i: x[2] }).collect();
    io::write_rows(&dir.join("realized.csv"), &states)?;
    io::write_kv(
        &dir.join("evaluation.txt"),
        &[
            ("method".into(), method.name().into()),
            ("cost".into(), result.cost.to_string()),
            ("violation".into(), result.violation.to_string()),
            ("g_min".into(), result.g_min.to_string()),
            ("g_max".into(), result.g_max.to_string()),
        ],
    )?;
    Ok(result)
}

/// Every run of the study. Writes `runs.csv`, `failures.csv`, `timing.csv`,
/// `summary.txt` and `table.md`; all but the timings are reproducible from
/// the configuration.
pub fn cmd_monte_carlo(cfg: &ExperimentConfig) -> Result<MonteCarlo, Error> {
    let ctx = Context::new(cfg.clone())?;
    let dir = out_dir(cfg)?;
    let mc = pipeline::monte_carlo(&ctx);
    io::write_rows(&dir.join("runs.csv"), &mc.results)?;
    if mc.failures.is_empty() {
        io::write_text(&dir.join("failures.csv"), "run,stage,category,message\n")?;
    } else {
        io::write_rows(&dir.join("failures.csv"), &mc.failures)?;
    }
    io::write_rows(&dir.join("timing.csv"), &mc.timings)?;
    write_summary(dir, &mc.summary)?;
    Ok(mc)
}

fn write_summary(dir: &Path, s: &Summary) -> Result<(), Error> {
    io::write_kv(&dir.join("summary.txt"), &s.pairs())?;
    io::write_text(&dir.join("table.md"), &s.table())
}

/// One long unthinned chain on one prior draw; writes `acf.csv` and returns
/// the six autocorrelation columns.
pub fn cmd_acf(cfg: &ExperimentConfig) -> Result<Vec<Vec<f64>>, Error> {
    let ctx = Context::new(cfg.clone())?;
    let dir = out_dir(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0, Stream::Acf));
    let z = crate::glucose::sample_prior(&cfg.prior, &mut rng);
    let p = BergmanParams::from_theta(&z.theta);
    let input = ctx.training_input();
    let x_horizon = integrate_to(&BergmanModel, &p, z.x0, &input, input.start, input.end, &IntegratorConfig::tsit5(cfg.measurement.truth_step))?;
    let draw = TruthDraw { z, x_horizon, redraws: 0 };
    let data = pipeline::generate_data(&ctx, &draw, &mut rng)?;
    let chain_cfg = ChainConfig { samples: cfg.acf.samples, thin: 0, counting: Counting::Accepted, ..cfg.chain.clone() };
    let chain = mmh::run_chain::<_, _, _, 3, 3, 1>(&data, &GlucoseObservation, &cfg.prior, &chain_cfg, &mut rng)?;
    let kept = ChainRun { samples: chain.samples[chain_cfg.burn_in..].to_vec(), ..chain };
    write_acf(&dir.join("acf.csv"), &kept, cfg.acf.max_lag)
}
