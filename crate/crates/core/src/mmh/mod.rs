//! Marginal Metropolis-Hastings over `z = (θ, x(t_start))`.
//!
//! The likelihood of a hypothesis is obtained by integrating the model over
//! the training window and scoring the predicted outputs against the
//! measurements. Proposals are Gaussian random walks in `(log θ, x)`; a
//! staged warm-up on growing measurement subsets adapts their covariance
//! before the production chain is drawn.

mod acf;

pub use acf::acf;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Dataset, LatentSample, ObservationModel, PriorSpec};
use crate::ode::{integrate_flow, integrate_to, InputSignal, IntegratorConfig, TabulatedInput};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MmhError {
    #[error("no initial point with finite log-posterior after {0} prior draws")]
    Initialization(usize),
    #[error("proposal cap of {0} reached before the chain was complete")]
    ProposalCap(u64),
    #[error("chain has {got} samples, burn-in and thinning need {needed}")]
    ShortChain { got: usize, needed: usize },
    #[error("invalid chain configuration: {0}")]
    Config(String),
    #[error("invalid proposal covariance: {0}")]
    Covariance(String),
    #[error("series of length {len} is too short for lag {max_lag}")]
    SeriesTooShort { len: usize, max_lag: usize },
    #[error("series has zero variance")]
    ConstantSeries,
}

/// Gaussian random-walk proposal in `(log θ, x)` with covariance
/// `scale² · covariance`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalState {
    pub covariance: DMatrix<f64>,
    pub scale: f64,
    pub stage: usize,
    factor: DMatrix<f64>,
}

impl ProposalState {
    /// Accepts any symmetric positive semidefinite covariance; singular ones
    /// are factored through their eigendecomposition.
    pub fn new(covariance: DMatrix<f64>, scale: f64) -> Result<Self, MmhError> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(MmhError::Covariance(format!("scale must be positive, got {scale}")));
        }
        let factor = factor(&covariance)?;
        Ok(Self { covariance, scale, stage: 0, factor })
    }

    /// Diagonal start: `0.05²` in every log-parameter and `(sd/10)²` in every
    /// state coordinate, unit scale.
    pub fn initial(prior: &PriorSpec) -> Self {
        let diag: Vec<f64> = prior
            .params
            .iter()
            .map(|_| 0.05f64.powi(2))
            .chain(prior.states.iter().map(|s| (s.sd / 10.0).powi(2)))
            .collect();
        Self::new(DMatrix::from_diagonal(&DVector::from_vec(diag)), 1.0).expect("diagonal with positive entries")
    }

    pub fn dim(&self) -> usize {
        self.covariance.nrows()
    }

    /// Lower factor `L` with `L Lᵀ = covariance`.
    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }
}

fn factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>, MmhError> {
    if !cov.is_square() {
        return Err(MmhError::Covariance(format!("{}x{} is not square", cov.nrows(), cov.ncols())));
    }
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(MmhError::Covariance("non-finite entry".into()));
    }
    let tol = 1e-12 * cov.abs().max().max(f64::MIN_POSITIVE);
    if (cov - cov.transpose()).abs().max() > tol {
        return Err(MmhError::Covariance("not symmetric".into()));
    }
    if let Some(ch) = cov.clone().cholesky() {
        return Ok(ch.l());
    }
    let eig = cov.clone().symmetric_eigen();
    let floor = -1e-10 * eig.eigenvalues.abs().max().max(f64::MIN_POSITIVE);
    if eig.eigenvalues.iter().any(|&l| l < floor) {
        return Err(MmhError::Covariance("not positive semidefinite".into()));
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots))
}

/// Transformed coordinates `(log θ, x)`.
pub fn to_coords<const NP: usize, const NX: usize>(z: &LatentSample<NP, NX>) -> DVector<f64> {
    DVector::from_iterator(NP + NX, z.theta.iter().map(|t| t.ln()).chain(z.x0.iter().copied()))
}

/// Random-walk step. Parameters move multiplicatively, so `θ′ > 0` always
/// and a zero step returns `z` bit for bit.
pub fn propose<const NP: usize, const NX: usize, R: Rng + ?Sized>(
    z: &LatentSample<NP, NX>,
    prop: &ProposalState,
    rng: &mut R,
) -> LatentSample<NP, NX> {
    debug_assert_eq!(prop.dim(), NP + NX);
    let xi = DVector::<f64>::from_fn(NP + NX, |_, _| rng.sample(StandardNormal));
    let step = &prop.factor * xi * prop.scale;
    let mut out = *z;
    for i in 0..NP {
        out.theta[i] = z.theta[i] * step[i].exp();
    }
    for i in 0..NX {
        out.x0[i] = z.x0[i] + step[NP + i];
    }
    out
}

/// `log q(z | z′) − log q(z′ | z)` for the target written in the original
/// coordinates: the Jacobian of the log map, `Σ (log θ′ − log θ)`.
pub fn log_q_correction<const NP: usize, const NX: usize>(cur: &LatentSample<NP, NX>, new: &LatentSample<NP, NX>) -> f64 {
    cur.theta.iter().zip(&new.theta).map(|(a, b)| (b / a).ln()).sum()
}

/// `log α = min(0, Δ log posterior + correction)`; `−∞` for an impossible
/// proposal.
pub fn acceptance_log_ratio(logpost_new: f64, logpost_cur: f64, logq_correction: f64) -> f64 {
    if logpost_new == f64::NEG_INFINITY || logpost_new.is_nan() {
        return f64::NEG_INFINITY;
    }
    (logpost_new - logpost_cur + logq_correction).min(0.0)
}

/// Model outputs at every measurement time, or `None` when some parameter is
/// non-positive or the integration fails.
pub fn predict_outputs<M, S, const NP: usize, const NX: usize, const NU: usize>(
    z: &LatentSample<NP, NX>,
    data: &Dataset<S>,
    model: &M,
    cfg: &IntegratorConfig,
) -> Option<Vec<f64>>
where
    M: ObservationModel<NP, NX, NU>,
    S: InputSignal<NU>,
{
    if z.theta.iter().any(|t| !(*t > 0.0)) {
        return None;
    }
    let (t0, t1) = data.input.domain();
    let p = model.field_params(&z.theta);
    let tr = integrate_flow(model.field(), &p, z.x0, &data.input, t0, t1, cfg, &data.times).ok()?;
    Some(tr.states.iter().map(|x| model.observe(x, &z.theta)).collect())
}

/// `Σ_m log p_W(y_m − g(x̂(t_m)))`; `−∞` on integration failure or a
/// non-positive parameter.
pub fn log_likelihood<M, S, const NP: usize, const NX: usize, const NU: usize>(
    z: &LatentSample<NP, NX>,
    data: &Dataset<S>,
    model: &M,
    cfg: &IntegratorConfig,
) -> f64
where
    M: ObservationModel<NP, NX, NU>,
    S: InputSignal<NU>,
{
    match predict_outputs(z, data, model, cfg) {
        Some(pred) => score(data, &pred, None),
        None => f64::NEG_INFINITY,
    }
}

/// Log-likelihood of the measurements with the given indices only.
pub fn log_likelihood_subset<M, S, const NP: usize, const NX: usize, const NU: usize>(
    z: &LatentSample<NP, NX>,
    data: &Dataset<S>,
    model: &M,
    cfg: &IntegratorConfig,
    subset: &[usize],
) -> f64
where
    M: ObservationModel<NP, NX, NU>,
    S: InputSignal<NU>,
{
    match predict_outputs(z, data, model, cfg) {
        Some(pred) => score(data, &pred, Some(subset)),
        None => f64::NEG_INFINITY,
    }
}

fn score<S>(data: &Dataset<S>, pred: &[f64], subset: Option<&[usize]>) -> f64 {
    let term = |m: usize| data.noise_log_density(data.outputs[m] - pred[m]);
    let v: f64 = match subset {
        Some(idx) => idx.iter().map(|&m| term(m)).sum(),
        None => (0..pred.len()).map(term).sum(),
    };
    if v.is_nan() {
        f64::NEG_INFINITY
    } else {
        v
    }
}

/// `m` indices spread evenly over `0..total`: `⌊j·total/m⌋`. Growing `m`
/// keeps the measurements of earlier stages only when it doubles, which is
/// what the default schedule does.
pub fn stage_subset(total: usize, m: usize) -> Vec<usize> {
    let m = m.clamp(1, total.max(1));
    (0..m).map(|j| j * total / m).collect()
}

/// How the sample counter advances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Counting {
    /// Only accepted proposals enter the chain, so a sample count means accepted moves.
    Accepted,
    /// Every proposal appends the current state; rejections repeat it.
    Iterations,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub measurements: usize,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    /// Retained samples `K`.
    pub samples: usize,
    /// Burn-in `K_b`.
    pub burn_in: usize,
    /// Thinning gap `k_d`.
    pub thin: usize,
    pub stages: Vec<Stage>,
    pub counting: Counting,
    pub max_proposals: u64,
    pub init_attempts: usize,
    pub integrator: IntegratorConfig,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            samples: 100,
            burn_in: 500,
            thin: 25,
            stages: [25, 50, 100, 200].iter().map(|&m| Stage { measurements: m, iterations: 2000 }).collect(),
            counting: Counting::Accepted,
            max_proposals: 10_000_000,
            init_attempts: 1000,
            integrator: IntegratorConfig::default(),
        }
    }
}

impl ChainConfig {
    /// `K_b + 1 + (K − 1)(k_d + 1)`.
    pub fn chain_length(&self) -> usize {
        self.burn_in + 1 + (self.samples - 1) * (self.thin + 1)
    }

    pub fn validate(&self) -> Result<(), MmhError> {
        if self.samples == 0 {
            return Err(MmhError::Config("K must be at least 1".into()));
        }
        if self.stages.iter().any(|s| s.measurements == 0) {
            return Err(MmhError::Config("a stage must use at least one measurement".into()));
        }
        if self.max_proposals == 0 || self.init_attempts == 0 {
            return Err(MmhError::Config("proposal cap and init attempts must be positive".into()));
        }
        if !(self.integrator.step > 0.0) {
            return Err(MmhError::Config("integrator step must be positive".into()));
        }
        Ok(())
    }

    /// FNV-1a hash of the TOML form.
    pub fn fingerprint(&self) -> u64 {
        let text = toml::to_string(self).expect("chain config serializes");
        fnv1a(text.as_bytes())
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainSample<const NP: usize, const NX: usize> {
    pub z: LatentSample<NP, NX>,
    pub log_likelihood: f64,
    pub log_prior: f64,
}

impl<const NP: usize, const NX: usize> ChainSample<NP, NX> {
    pub fn log_posterior(&self) -> f64 {
        self.log_likelihood + self.log_prior
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub measurements: usize,
    pub proposals: u64,
    pub accepted: u64,
    pub scale: f64,
}

impl StageReport {
    pub fn acceptance_rate(&self) -> f64 {
        if self.proposals == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposals as f64
        }
    }
}

/// Raw output of [`run_chain`].
#[derive(Debug, Clone)]
pub struct ChainRun<const NP: usize, const NX: usize> {
    /// Production chain, `chain_length()` entries.
    pub samples: Vec<ChainSample<NP, NX>>,
    pub stages: Vec<StageReport>,
    pub production: StageReport,
    /// Proposal used for the production chain.
    pub proposal: ProposalState,
    pub initial: LatentSample<NP, NX>,
    pub init_draws: usize,
}

struct Target<'a, M, S> {
    model: &'a M,
    data: &'a Dataset<S>,
    prior: &'a PriorSpec,
    cfg: &'a IntegratorConfig,
}

impl<M, S> Target<'_, M, S> {
    fn eval<const NP: usize, const NX: usize, const NU: usize>(
        &self,
        z: &LatentSample<NP, NX>,
        subset: &[usize],
    ) -> ChainSample<NP, NX>
    where
        M: ObservationModel<NP, NX, NU>,
        S: InputSignal<NU>,
    {
        let log_prior = self.prior.log_density(z);
        let log_likelihood = if log_prior == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            log_likelihood_subset(z, self.data, self.model, self.cfg, subset)
        };
        ChainSample { z: *z, log_likelihood, log_prior }
    }
}

/// One Metropolis-Hastings transition; returns whether `z′` was accepted.
fn transition<M, S, R, const NP: usize, const NX: usize, const NU: usize>(
    target: &Target<'_, M, S>,
    cur: &mut ChainSample<NP, NX>,
    prop: &ProposalState,
    subset: &[usize],
    rng: &mut R,
) -> bool
where
    M: ObservationModel<NP, NX, NU>,
    S: InputSignal<NU>,
    R: Rng + ?Sized,
{
    let z_new = propose(&cur.z, prop, rng);
    let cand = target.eval::<NP, NX, NU>(&z_new, subset);
    let log_alpha = acceptance_log_ratio(cand.log_posterior(), cur.log_posterior(), log_q_correction(&cur.z, &z_new));
    let u: f64 = rng.random();
    if u.ln() < log_alpha {
        *cur = cand;
        true
    } else {
        false
    }
}

fn empirical_covariance(points: &[DVector<f64>]) -> DMatrix<f64> {
    let d = points[0].len();
    let n = points.len() as f64;
    let mean = points.iter().fold(DVector::zeros(d), |acc, p| acc + p) / n;
    let mut cov = DMatrix::zeros(d, d);
    for p in points {
        let c = p - &mean;
        cov += &c * c.transpose();
    }
    cov / (n - 1.0)
}

/// Multiple-measurement Metropolis-Hastings with a staged, adaptive warm-up.
///
/// The initial point is drawn from the prior until its log-posterior is
/// finite. Each warm-up stage runs a fixed number of proposals on an evenly
/// spread measurement subset; afterwards the proposal covariance becomes
/// `0.9 Σ_emp + 0.1 Σ_init` over the stage's accepted points with scale
/// `2.38/√d`, or the scale is halved if fewer than 5% were accepted. The
/// production chain then uses all measurements and a fixed proposal.
pub fn run_chain<M, S, R, const NP: usize, const NX: usize, const NU: usize>(
    data: &Dataset<S>,
    model: &M,
    prior: &PriorSpec,
    cfg: &ChainConfig,
    rng: &mut R,
) -> Result<ChainRun<NP, NX>, MmhError>
where
    M: ObservationModel<NP, NX, NU>,
    S: InputSignal<NU>,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    prior.check_dims(NP, NX).map_err(|e| MmhError::Config(e.to_string()))?;
    let d = NP + NX;
    let tab = Dataset {
        input: TabulatedInput::new(&data.input, cfg.integrator.step),
        times: data.times.clone(),
        outputs: data.outputs.clone(),
        noise_sigma: data.noise_sigma,
    };
    let target = Target { model, data: &tab, prior, cfg: &cfg.integrator };
    let all: Vec<usize> = (0..data.len()).collect();

    let mut cur = None;
    let mut draws = 0;
    while draws < cfg.init_attempts {
        draws += 1;
        let z = prior.sample::<NP, NX, _>(rng);
        let s = target.eval::<NP, NX, NU>(&z, &all);
        if s.log_posterior().is_finite() {
            cur = Some(s);
            break;
        }
    }
    let mut cur = cur.ok_or(MmhError::Initialization(cfg.init_attempts))?;
    let initial = cur.z;

    let mut prop = ProposalState::initial(prior);
    let sigma_init = prop.covariance.clone();
    let mut stages = Vec::with_capacity(cfg.stages.len());
    for (si, stage) in cfg.stages.iter().enumerate() {
        let subset = stage_subset(data.len(), stage.measurements);
        cur = target.eval::<NP, NX, NU>(&cur.z, &subset);
        let mut accepted = Vec::new();
        for _ in 0..stage.iterations {
            if transition::<M, _, R, NP, NX, NU>(&target, &mut cur, &prop, &subset, rng) {
                accepted.push(to_coords(&cur.z));
            }
        }
        let report = StageReport {
            measurements: subset.len(),
            proposals: stage.iterations as u64,
            accepted: accepted.len() as u64,
            scale: prop.scale,
        };
        log::debug!("stage {si}: {} measurements, acceptance {:.3}", report.measurements, report.acceptance_rate());
        stages.push(report);
        if report.acceptance_rate() < 0.05 {
            prop = ProposalState::new(prop.covariance.clone(), prop.scale * 0.5)?;
        } else if accepted.len() > d {
            let cov = empirical_covariance(&accepted) * 0.9 + &sigma_init * 0.1;
            let cov = (&cov + cov.transpose()) * 0.5;
            prop = ProposalState::new(cov, 2.38 / (d as f64).sqrt())?;
        }
        prop.stage = si + 1;
    }

    cur = target.eval::<NP, NX, NU>(&cur.z, &all);
    let length = cfg.chain_length();
    let mut samples = Vec::with_capacity(length);
    let mut proposals: u64 = 0;
    let mut accepted: u64 = 0;
    while samples.len() < length {
        if proposals >= cfg.max_proposals {
            return Err(MmhError::ProposalCap(cfg.max_proposals));
        }
        proposals += 1;
        let acc = transition::<M, _, R, NP, NX, NU>(&target, &mut cur, &prop, &all, rng);
        if acc {
            accepted += 1;
        }
        if acc || cfg.counting == Counting::Iterations {
            samples.push(cur);
        }
    }
    let production = StageReport { measurements: data.len(), proposals, accepted, scale: prop.scale };
    Ok(ChainRun { samples, stages, production, proposal: prop, initial, init_draws: draws })
}

/// Drop the first `K_b` entries, then keep every `(k_d + 1)`-th: indices
/// `K_b + j(k_d + 1)` for `j < K`.
pub fn burn_in_and_thin<T: Clone>(chain: &[T], samples: usize, burn_in: usize, thin: usize) -> Result<Vec<T>, MmhError> {
    let needed = burn_in + 1 + samples.saturating_sub(1) * (thin + 1);
    if samples == 0 || chain.len() < needed {
        return Err(MmhError::ShortChain { got: chain.len(), needed });
    }
    Ok((0..samples).map(|j| chain[burn_in + j * (thin + 1)].clone()).collect())
}

/// One posterior hypothesis propagated to the end of the training window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorSample<const NP: usize, const NX: usize> {
    pub theta: [f64; NP],
    pub x0: [f64; NX],
    pub log_posterior: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSampleSet<const NP: usize, const NX: usize> {
    pub samples: Vec<PosteriorSample<NP, NX>>,
    pub seed: u64,
    pub config_hash: u64,
    /// Samples dropped because their propagation failed.
    pub excluded: usize,
}

impl<const NP: usize, const NX: usize> PosteriorSampleSet<NP, NX> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Propagate each sample's training-window initial state to the end of the
/// window under its own parameters, with the likelihood integrator.
pub fn map_to_t0<M, S, const NP: usize, const NX: usize, const NU: usize>(
    samples: &[ChainSample<NP, NX>],
    model: &M,
    input: &S,
    cfg: &IntegratorConfig,
    seed: u64,
    config_hash: u64,
) -> PosteriorSampleSet<NP, NX>
where
    M: ObservationModel<NP, NX, NU>,
    S: InputSignal<NU>,
{
    let (t0, t1) = input.domain();
    let mut out = Vec::with_capacity(samples.len());
    let mut excluded = 0;
    for (k, s) in samples.iter().enumerate() {
        let p = model.field_params(&s.z.theta);
        match integrate_to(model.field(), &p, s.z.x0, input, t0, t1, cfg) {
            Ok(x) => out.push(PosteriorSample { theta: s.z.theta, x0: x, log_posterior: s.log_posterior() }),
            Err(e) => {
                log::warn!("posterior sample {k} dropped: {e}");
                excluded += 1;
            }
        }
    }
    PosteriorSampleSet { samples: out, seed, config_hash, excluded }
}
