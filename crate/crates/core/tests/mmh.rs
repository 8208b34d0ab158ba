use mmhctl::glucose::{self, GlucoseObservation, MeasurementConfig, TrainingInput, G};
use mmhctl::mmh::{self, ChainConfig, Counting, Stage};
use mmhctl::model::{Dataset, LatentSample, NormalPrior, ObservationModel, PriorSpec};
use mmhctl::ode::{IntegratorConfig, VectorField, ZeroInput};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use statrs::distribution::ContinuousCDF;

/// `ẋ = 0`, `y = x`.
struct Constant;

impl VectorField<1, 1> for Constant {
    type Params = ();
    fn eval(&self, _x: &[f64; 1], _u: &[f64; 1], _d: f64, _t: f64, _p: &()) -> [f64; 1] {
        [0.0]
    }
}

impl ObservationModel<0, 1, 1> for Constant {
    type Field = Constant;
    fn field(&self) -> &Constant {
        self
    }
    fn field_params(&self, _theta: &[f64; 0]) {}
    fn observe(&self, x: &[f64; 1], _theta: &[f64; 0]) -> f64 {
        x[0]
    }
}

struct Conjugate {
    data: Dataset<ZeroInput>,
    prior: PriorSpec,
    mean: f64,
    var: f64,
}

fn conjugate(seed: u64) -> Conjugate {
    let (mu0, s0, sigma, truth) = (1.0, 3.0, 2.0, 2.5);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma).unwrap();
    let times: Vec<f64> = (0..20).map(|i| i as f64 * 0.5).collect();
    let outputs: Vec<f64> = times.iter().map(|_| truth + noise.sample(&mut rng)).collect();
    let prec = 1.0 / (s0 * s0) + outputs.len() as f64 / (sigma * sigma);
    let var = 1.0 / prec;
    let mean = var * (mu0 / (s0 * s0) + outputs.iter().sum::<f64>() / (sigma * sigma));
    let data = Dataset::new::<1>(ZeroInput { start: 0.0, end: 10.0 }, times, outputs, sigma).unwrap();
    let prior = PriorSpec::new(vec![], vec![NormalPrior { mean: mu0, sd: s0 }]).unwrap();
    Conjugate { data, prior, mean, var }
}

fn std_normal_cdf(x: f64) -> f64 {
    statrs::distribution::Normal::standard().cdf(x)
}

fn conjugate_samples(counting: Counting, seed: u64) -> (Conjugate, Vec<f64>) {
    let c = conjugate(seed);
    let cfg = ChainConfig {
        samples: 2000,
        burn_in: 500,
        thin: 10,
        stages: vec![Stage { measurements: 10, iterations: 2000 }, Stage { measurements: 20, iterations: 2000 }],
        counting,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let run = mmh::run_chain::<_, _, _, 0, 1, 1>(&c.data, &Constant, &c.prior, &cfg, &mut rng).unwrap();
    assert_eq!(run.samples.len(), cfg.chain_length());
    let kept = mmh::burn_in_and_thin(&run.samples, cfg.samples, cfg.burn_in, cfg.thin).unwrap();
    let xs = kept.iter().map(|s| s.z.x0[0]).collect();
    (c, xs)
}

fn moments(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}

fn ks_distance(xs: &[f64], mean: f64, sd: f64) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, x)| {
            let f = std_normal_cdf((x - mean) / sd);
            (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
        })
        .fold(0.0, f64::max)
}

#[test]
fn conjugate_posterior_standard_chain() {
    for seed in 1..4 {
        let (c, xs) = conjugate_samples(Counting::Iterations, seed);
        let (m, v) = moments(&xs);
        let n = xs.len() as f64;
        let se_mean = (c.var / n).sqrt();
        let se_var = c.var * (2.0 / (n - 1.0)).sqrt();
        assert!((m - c.mean).abs() < 3.0 * se_mean, "seed {seed}: mean {m} vs {}", c.mean);
        assert!((v - c.var).abs() < 3.0 * se_var, "seed {seed}: var {v} vs {}", c.var);
        assert!(ks_distance(&xs, c.mean, c.var.sqrt()) < 0.05);
    }
}

/// Accepted-only counting keeps only accepted moves, so a state's weight loses
/// its holding time and the chain targets `π(z)·a(z)` with `a` the
/// acceptance probability from `z`. For a Gaussian target and the adapted
/// random walk this widens the sample; the reweighted density is the oracle.
#[test]
fn accepted_counting_targets_acceptance_weighted_posterior() {
    let mut ratios = Vec::new();
    for seed in 1..4 {
        let (c, xs) = conjugate_samples(Counting::Accepted, seed);
        let (m, v) = moments(&xs);
        assert!((m - c.mean).abs() < 4.0 * (c.var / xs.len() as f64).sqrt());
        ratios.push(v / c.var);
    }
    let mean_ratio = ratios.iter().sum::<f64>() / ratios.len() as f64;

    // quadrature oracle for the variance of π·a in units of the posterior
    // variance, proposal sd s in the same units; s from the adapted rule
    // 2.38·√(0.9 + 0.1·σ_init²/σ_post²) with σ_init = sd/10 of the prior
    let c = conjugate(1);
    let s = 2.38 * (0.9 + 0.1 * (0.3f64 * 0.3) / c.var).sqrt();
    let (mut w_sum, mut w_z2) = (0.0, 0.0);
    let dz = 0.01;
    for i in -800..=800 {
        let z = i as f64 * dz;
        let mut a = 0.0;
        let de = 0.01;
        for j in -1000..=1000 {
            let e = j as f64 * de;
            let q = (-0.5 * e * e / (s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
            let zn = z + e;
            a += q * (0.5 * (z * z - zn * zn)).exp().min(1.0) * de;
        }
        let w = (-0.5 * z * z).exp() * a;
        w_sum += w;
        w_z2 += w * z * z;
    }
    let oracle = w_z2 / w_sum;
    assert!(oracle > 1.05, "{oracle}");
    assert!((mean_ratio - oracle).abs() < 0.06, "chain {mean_ratio} vs oracle {oracle}");
}

#[test]
fn chain_counts_accepted_samples() {
    let c = conjugate(5);
    let cfg = ChainConfig {
        samples: 10,
        burn_in: 5,
        thin: 2,
        stages: vec![Stage { measurements: 20, iterations: 200 }],
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let run = mmh::run_chain::<_, _, _, 0, 1, 1>(&c.data, &Constant, &c.prior, &cfg, &mut rng).unwrap();
    assert_eq!(run.samples.len(), 33);
    assert_eq!(run.production.accepted, 33);
    assert!(run.production.proposals >= 33);
    assert_eq!(mmh::burn_in_and_thin(&run.samples, 10, 5, 2).unwrap().len(), 10);
}

#[test]
fn proposal_cap_is_an_error() {
    let c = conjugate(5);
    let cfg = ChainConfig { samples: 1000, burn_in: 0, thin: 0, stages: vec![], max_proposals: 50, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let err = mmh::run_chain::<_, _, _, 0, 1, 1>(&c.data, &Constant, &c.prior, &cfg, &mut rng).unwrap_err();
    assert_eq!(err, mmh::MmhError::ProposalCap(50));
}

#[test]
fn runs_are_reproducible() {
    let c = conjugate(8);
    let cfg = ChainConfig { samples: 50, burn_in: 10, thin: 2, stages: vec![Stage { measurements: 20, iterations: 300 }], ..Default::default() };
    let a = mmh::run_chain::<_, _, _, 0, 1, 1>(&c.data, &Constant, &c.prior, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let b = mmh::run_chain::<_, _, _, 0, 1, 1>(&c.data, &Constant, &c.prior, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(a.samples, b.samples);
}

fn training() -> TrainingInput {
    TrainingInput {
        schedule: glucose::MealSchedule::standard_day(),
        gain: glucose::DEFAULT_TRAINING_GAIN,
        start: glucose::TRAINING_START,
        end: 0.0,
    }
}

fn glucose_case(seed: u64, sigma: f64) -> (LatentSample<3, 3>, Dataset<TrainingInput>) {
    let prior = glucose::standard_prior();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth = glucose::sample_prior(&prior, &mut rng);
    let cfg = MeasurementConfig { sigma, ..Default::default() };
    let data = glucose::generate_dataset(&truth, training(), &cfg, &mut rng).unwrap();
    (truth, data)
}

#[test]
fn likelihood_of_exact_outputs() {
    let (truth, data) = glucose_case(11, 8.0);
    let cfg = IntegratorConfig::default();
    let pred = mmh::predict_outputs(&truth, &data, &GlucoseObservation, &cfg).unwrap();
    let exact = Dataset { outputs: pred.clone(), ..data.clone() };
    let ll = mmh::log_likelihood(&truth, &exact, &GlucoseObservation, &cfg);
    let expect = -200.0 * (8.0 * (2.0 * std::f64::consts::PI).sqrt()).ln();
    assert!((ll - expect).abs() < 1e-9, "{ll}");
    assert!((expect + 599.676).abs() < 1e-3);

    let mut shifted = exact.clone();
    shifted.outputs[17] += 16.0;
    let ll2 = mmh::log_likelihood(&truth, &shifted, &GlucoseObservation, &cfg);
    assert!((ll2 - ll + 2.0).abs() < 1e-9);
}

#[test]
fn truth_residuals_are_integrator_error() {
    let (truth, data) = glucose_case(12, 0.0);
    let pred = mmh::predict_outputs(&truth, &data, &GlucoseObservation, &IntegratorConfig::default()).unwrap();
    let worst = pred.iter().zip(&data.outputs).map(|(p, y)| (p - y).abs()).fold(0.0, f64::max);
    assert!(worst < 0.5, "{worst}");
}

#[test]
fn invalid_hypotheses_have_zero_likelihood() {
    let (mut truth, data) = glucose_case(13, 8.0);
    truth.theta[1] = 0.0;
    assert_eq!(mmh::log_likelihood(&truth, &data, &GlucoseObservation, &IntegratorConfig::default()), f64::NEG_INFINITY);
    truth.theta[1] = 1e-6;
    truth.x0[G] = f64::NAN;
    assert_eq!(mmh::log_likelihood(&truth, &data, &GlucoseObservation, &IntegratorConfig::default()), f64::NEG_INFINITY);
}

#[test]
fn flat_likelihood_samples_the_prior() {
    let (_, data) = glucose_case(14, 8.0);
    let flat = Dataset { noise_sigma: 1e12, ..data };
    let prior = glucose::standard_prior();
    let cfg = ChainConfig { samples: 500, ..Default::default() };
    let run = mmh::run_chain::<_, _, _, 3, 3, 1>(&flat, &GlucoseObservation, &prior, &cfg, &mut ChaCha8Rng::seed_from_u64(15))
        .unwrap();
    let kept = mmh::burn_in_and_thin(&run.samples, cfg.samples, cfg.burn_in, cfg.thin).unwrap();
    let mean = kept.iter().map(|s| s.z.x0[G]).sum::<f64>() / kept.len() as f64;
    assert!((mean - 80.0).abs() < 1.0, "{mean}");
}

#[test]
fn glucose_chain() {
    let (truth, data) = glucose_case(21, 8.0);
    let prior = glucose::standard_prior();
    let cfg = ChainConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let run = mmh::run_chain::<_, _, _, 3, 3, 1>(&data, &GlucoseObservation, &prior, &cfg, &mut rng).unwrap();
    let rate = run.production.acceptance_rate();
    assert!((0.05..=0.6).contains(&rate), "production acceptance {rate}");
    assert!(run.samples.iter().all(|s| s.z.theta.iter().all(|t| *t > 0.0)));

    // cached likelihoods equal fresh recomputation
    for s in run.samples.iter().step_by(97) {
        let fresh = mmh::log_likelihood(&s.z, &data, &GlucoseObservation, &cfg.integrator);
        assert_eq!(fresh, s.log_likelihood);
    }

    let kept = mmh::burn_in_and_thin(&run.samples, cfg.samples, cfg.burn_in, cfg.thin).unwrap();
    let raw: Vec<f64> = run.samples[cfg.burn_in..].iter().map(|s| s.z.theta[0].ln()).collect();
    let thinned: Vec<f64> = kept.iter().map(|s| s.z.theta[0].ln()).collect();
    let raw1 = mmh::acf(&raw, 1).unwrap()[1];
    let thin1 = mmh::acf(&thinned, 1).unwrap()[1];
    assert!(thin1 <= raw1, "thinned {thin1} vs raw {raw1}");

    let set = mmh::map_to_t0(&kept, &GlucoseObservation, &data.input, &cfg.integrator, 22, cfg.fingerprint());
    assert_eq!(set.len(), cfg.samples);
    assert_eq!(set.excluded, 0);

    // the truth's own G(0) lies inside the posterior spread
    let g0_true = glucose::simulate_truth(&truth, &data.input, 0.0, 0.1).unwrap().last().unwrap()[G];
    let g: Vec<f64> = set.samples.iter().map(|s| s.x0[G]).collect();
    let lo = g.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert!(lo - 5.0 <= g0_true && g0_true <= hi + 5.0, "truth {g0_true} vs [{lo}, {hi}]");
}

#[test]
fn mapping_truth_to_t0() {
    let (truth, data) = glucose_case(31, 8.0);
    let s = mmh::ChainSample { z: truth, log_likelihood: 0.0, log_prior: 0.0 };
    let set = mmh::map_to_t0(&[s], &GlucoseObservation, &data.input, &IntegratorConfig::default(), 0, 0);
    let tsit = glucose::simulate_truth(&truth, &data.input, 0.0, 0.1).unwrap();
    assert!((set.samples[0].x0[G] - tsit.last().unwrap()[G]).abs() <= 0.5);

    let z = LatentSample::<0, 1> { theta: [], x0: [4.2] };
    let s = mmh::ChainSample { z, log_likelihood: 0.0, log_prior: 0.0 };
    let set = mmh::map_to_t0(&[s, s], &Constant, &ZeroInput { start: -5.0, end: 0.0 }, &IntegratorConfig::default(), 0, 0);
    assert_eq!(set.len(), 2);
    assert_eq!(set.samples[0].x0, [4.2]);
}
