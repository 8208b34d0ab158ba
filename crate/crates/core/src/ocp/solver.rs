use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::{ControlTrajectory, OcpError, PenaltyState, ScenarioOcp};
use crate::ode::{DifferentiableField, Disturbance};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub max_outer: usize,
    pub max_inner: usize,
    pub rho_init: f64,
    pub rho_max: f64,
    /// Hard residual accepted as feasible.
    pub feasibility_tol: f64,
    /// The multiplier loop works on bounds tightened by this much.
    pub margin: f64,
    /// Inner loop stops once the projected gradient falls below this
    /// fraction of its value at the start of the inner solve.
    pub inner_rel_tol: f64,
    /// Outer loop stops once a feasible iterate changes the cost by less than
    /// this relative amount.
    pub outer_rel_tol: f64,
    pub memory: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_outer: 30,
            max_inner: 300,
            rho_init: 10.0,
            rho_max: 1e8,
            feasibility_tol: 1e-6,
            margin: 1e-3,
            inner_rel_tol: 1e-7,
            outer_rel_tol: 1e-7,
            memory: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcpReport {
    /// The returned iterate meets every node bound within tolerance.
    pub success: bool,
    pub cost: f64,
    /// Largest hard residual over all nodes and scenarios, including `τ_0`.
    pub max_violation: f64,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub evaluations: usize,
    pub rho: f64,
    /// Augmented merit after every accepted inner step, one list per outer
    /// iteration.
    pub merit_trace: Vec<Vec<f64>>,
}

fn dot<const NU: usize>(a: &[[f64; NU]], b: &[[f64; NU]]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (0..NU).map(|j| x[j] * y[j]).sum::<f64>()).sum()
}

fn projected_gradient_norm<const NU: usize>(u: &ControlTrajectory<NU>, g: &[[f64; NU]]) -> f64 {
    let mut m: f64 = 0.0;
    for (v, gv) in u.values.iter().zip(g) {
        for j in 0..NU {
            let p = (v[j] - gv[j]).clamp(u.lower[j], u.upper[j]) - v[j];
            m = m.max(p.abs());
        }
    }
    m
}

struct Inner {
    iterations: usize,
    evaluations: usize,
    trace: Vec<f64>,
}

/// Projected L-BFGS with Armijo backtracking along the projected path.
fn minimize<F, D, const NX: usize, const NU: usize>(
    problem: &ScenarioOcp<'_, F, D, NX, NU>,
    u: &mut ControlTrajectory<NU>,
    penalty: &PenaltyState,
    cfg: &SolverConfig,
    outer: usize,
) -> Result<Inner, OcpError>
where
    F: DifferentiableField<NX, NU>,
    D: Disturbance,
{
    let mut evals = 1;
    let mut cur = problem.evaluate(u, Some(penalty), true)?;
    if !cur.merit().is_finite() {
        return Err(OcpError::Diverged { outer, inner: 0 });
    }
    let mut trace = vec![cur.merit()];
    let pg0 = projected_gradient_norm(u, &cur.gradient);
    let mut mem: VecDeque<(Vec<[f64; NU]>, Vec<[f64; NU]>, f64)> = VecDeque::new();
    let mut it = 0;
    while it < cfg.max_inner {
        let g = &cur.gradient;
        if projected_gradient_norm(u, g) <= cfg.inner_rel_tol * pg0.max(1e-300) || pg0 == 0.0 {
            break;
        }
        let free: Vec<[bool; NU]> = u
            .values
            .iter()
            .zip(g)
            .map(|(v, gv)| {
                let mut f = [true; NU];
                for j in 0..NU {
                    f[j] = !((v[j] <= u.lower[j] && gv[j] > 0.0) || (v[j] >= u.upper[j] && gv[j] < 0.0));
                }
                f
            })
            .collect();
        let mask = |x: &mut Vec<[f64; NU]>| {
            for (xi, fi) in x.iter_mut().zip(&free) {
                for j in 0..NU {
                    if !fi[j] {
                        xi[j] = 0.0;
                    }
                }
            }
        };

        let mut q = g.clone();
        mask(&mut q);
        let mut dir;
        if let Some((s_last, y_last, _)) = mem.back() {
            let mut alphas = Vec::with_capacity(mem.len());
            for (s, y, r) in mem.iter().rev() {
                let a = r * dot(s, &q);
                for (qi, yi) in q.iter_mut().zip(y) {
                    for j in 0..NU {
                        qi[j] -= a * yi[j];
                    }
                }
                alphas.push(a);
            }
            let gamma = dot(s_last, y_last) / dot(y_last, y_last);
            for qi in q.iter_mut() {
                for v in qi.iter_mut() {
                    *v *= gamma;
                }
            }
            for ((s, y, r), a) in mem.iter().zip(alphas.iter().rev()) {
                let b = r * dot(y, &q);
                for (qi, si) in q.iter_mut().zip(s) {
                    for j in 0..NU {
                        qi[j] += (a - b) * si[j];
                    }
                }
            }
            dir = q.iter().map(|v| v.map(|x| -x)).collect::<Vec<_>>();
            mask(&mut dir);
            if !(dot(&dir, g) < 0.0) {
                mem.clear();
                continue;
            }
        } else {
            let mut sd = g.clone();
            mask(&mut sd);
            let norm = sd.iter().flat_map(|v| v.iter()).fold(0.0f64, |m, x| m.max(x.abs()));
            if norm == 0.0 {
                break;
            }
            dir = sd.iter().map(|v| v.map(|x| -x / norm)).collect();
        }

        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let mut trial = u.clone();
            for (t, d) in trial.values.iter_mut().zip(&dir) {
                for j in 0..NU {
                    t[j] += alpha * d[j];
                }
            }
            trial.project();
            let step: Vec<[f64; NU]> = trial
                .values
                .iter()
                .zip(&u.values)
                .map(|(a, b)| {
                    let mut s = [0.0; NU];
                    for j in 0..NU {
                        s[j] = a[j] - b[j];
                    }
                    s
                })
                .collect();
            let decrease = dot(g, &step);
            if decrease >= 0.0 {
                alpha *= 0.5;
                continue;
            }
            evals += 1;
            match problem.evaluate(&trial, Some(penalty), false) {
                Ok(e) if e.merit().is_finite() && e.merit() <= cur.merit() + 1e-4 * decrease => {
                    accepted = Some((trial, step));
                    break;
                }
                _ => alpha *= 0.5,
            }
        }
        let Some((trial, s)) = accepted else { break };
        evals += 1;
        let next = problem.evaluate(&trial, Some(penalty), true)?;
        if !next.merit().is_finite() {
            return Err(OcpError::Diverged { outer, inner: it + 1 });
        }
        let y: Vec<[f64; NU]> = next
            .gradient
            .iter()
            .zip(&cur.gradient)
            .map(|(a, b)| {
                let mut d = [0.0; NU];
                for j in 0..NU {
                    d[j] = a[j] - b[j];
                }
                d
            })
            .collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if mem.len() == cfg.memory {
                mem.pop_front();
            }
            mem.push_back((s, y, 1.0 / sy));
        }
        let prev = cur.merit();
        *u = trial;
        cur = next;
        trace.push(cur.merit());
        it += 1;
        if (prev - cur.merit()).abs() <= 1e-15 * prev.abs().max(1.0) {
            break;
        }
    }
    Ok(Inner { iterations: it, evaluations: evals, trace })
}

/// Augmented-Lagrangian solve of the scenario problem from `u_init`.
///
/// Input bounds are kept by projection. State bounds at `τ_1..τ_N` enter
/// through PHR penalty terms on bounds tightened by `margin`, with
/// `λ ← max(0, λ + ρ g)` after every inner solve and `ρ ← min(10ρ, ρ_max)`
/// whenever the violation did not shrink at least fourfold. Bounds at `τ_0`
/// do not depend on the input; they are reported but not penalized.
///
/// Returns the cheapest feasible iterate seen, or the least infeasible one.
pub fn solve_ocp<F, D, const NX: usize, const NU: usize>(
    problem: &ScenarioOcp<'_, F, D, NX, NU>,
    cfg: &SolverConfig,
    u_init: &ControlTrajectory<NU>,
) -> Result<(ControlTrajectory<NU>, OcpReport), OcpError>
where
    F: DifferentiableField<NX, NU>,
    D: Disturbance,
{
    problem.validate()?;
    let n = problem.grid.intervals();
    if u_init.len() != n {
        return Err(OcpError::Spec(format!("{} input values for {n} intervals", u_init.len())));
    }
    let k = problem.scenarios.len();
    let mut u = u_init.clone();
    u.project();
    let mut penalty = PenaltyState::new(k, n, cfg.rho_init, cfg.margin);
    let mut report = OcpReport {
        success: false,
        cost: f64::NAN,
        max_violation: f64::INFINITY,
        outer_iterations: 0,
        inner_iterations: 0,
        evaluations: 0,
        rho: cfg.rho_init,
        merit_trace: Vec::new(),
    };
    let mut best: Option<(ControlTrajectory<NU>, f64, f64)> = None;
    let mut last_violation = f64::INFINITY;
    let mut last_feasible_cost: Option<f64> = None;

    for outer in 0..cfg.max_outer {
        let inner = minimize(problem, &mut u, &penalty, cfg, outer)?;
        report.outer_iterations += 1;
        report.inner_iterations += inner.iterations;
        report.evaluations += inner.evaluations;
        report.merit_trace.push(inner.trace);

        let hard = problem.residuals(&u)?;
        let violation = hard.iter().cloned().fold(f64::NEG_INFINITY, f64::max).max(0.0);
        let cost = problem.cost(&u)?;
        report.evaluations += 2;
        let feasible = violation <= cfg.feasibility_tol;
        let better = match &best {
            None => true,
            Some((_, bc, bv)) => {
                let best_feasible = *bv <= cfg.feasibility_tol;
                match (feasible, best_feasible) {
                    (true, true) => cost < *bc,
                    (true, false) => true,
                    (false, true) => false,
                    (false, false) => violation < *bv,
                }
            }
        };
        if better {
            best = Some((u.clone(), cost, violation));
        }
        log::debug!("outer {outer}: cost {cost:.6e}, violation {violation:.3e}, rho {:.1e}", penalty.rho);

        // feasibility-complementarity measure max |min(−g, λ/ρ)| on the
        // tightened constraints
        let mut tight = 0.0f64;
        let mut mult_change = 0.0f64;
        let mut mult_max = 0.0f64;
        for kk in 0..k {
            let base_hard = kk * (n + 1) * 2;
            for i in 1..=n {
                for side in 0..2 {
                    let g = hard[base_hard + i * 2 + side] + cfg.margin;
                    let idx = (kk * n + i - 1) * 2 + side;
                    let old = penalty.multipliers[idx];
                    let new = (old + penalty.rho * g).max(0.0);
                    tight = tight.max((-g).min(old / penalty.rho).abs());
                    mult_change = mult_change.max((new - old).abs());
                    mult_max = mult_max.max(new);
                    penalty.multipliers[idx] = new;
                }
            }
        }
        let converged_cost = match last_feasible_cost {
            Some(c) if feasible => (c - cost).abs() <= cfg.outer_rel_tol * c.abs().max(1.0),
            _ => false,
        };
        if feasible && (converged_cost || mult_change <= 1e-6 * (1.0 + mult_max)) {
            break;
        }
        if feasible {
            last_feasible_cost = Some(cost);
        }
        if tight > 0.25 * last_violation {
            penalty.rho = (penalty.rho * 10.0).min(cfg.rho_max);
        }
        last_violation = tight;
    }

    let (u_best, cost, violation) = best.expect("at least one outer iteration");
    report.success = violation <= cfg.feasibility_tol;
    report.cost = cost;
    report.max_violation = violation;
    report.rho = penalty.rho;
    Ok((u_best, report))
}
