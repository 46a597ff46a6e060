//! Self-check suites: forward invariance on randomized scenarios, the QP
//! solver against an independent oracle, the disjunction encoding, and
//! indirect landmark propagation.
//!
//! Each suite returns one [`CheckOutcome`] per check. The command-line `check`
//! subcommand and the acceptance tests both call into this module.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::constraints::{check_equivalence_sample, AugmentedState, AuxState, Tracking};
use crate::qp::{kkt_residual, solve, QpProblem, SolverSettings};
use crate::scenario::{example3_scenario, InputSpec, ReferenceSpec, Scenario, EXAMPLE3_SEED};
use crate::sim::{direct_points, run, Trace};
use crate::visibility::{score, LandmarkId};
use crate::world::{generate_landmarks, LandmarkSpec};

/// Tolerance on constraint rows at every tick.
pub const ROW_TOL: f64 = 1e-6;
/// Tolerance on rows right after an observation event.
pub const JUMP_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self { name: name.to_string(), passed, detail }
    }
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<5} {:<24} {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Invariance,
    QpOracle,
    Equivalence,
    Propagation,
    All,
}

impl FromStr for Suite {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "invariance" => Ok(Suite::Invariance),
            "qp-oracle" => Ok(Suite::QpOracle),
            "equivalence" => Ok(Suite::Equivalence),
            "propagation" => Ok(Suite::Propagation),
            "all" => Ok(Suite::All),
            other => Err(format!(
                "unknown suite `{other}` (expected invariance, qp-oracle, equivalence, propagation or all)"
            )),
        }
    }
}

pub fn run_suite(suite: Suite) -> Vec<CheckOutcome> {
    match suite {
        Suite::Invariance => invariance_suite(100, 0),
        Suite::QpOracle => qp_oracle_suite(200, 0),
        Suite::Equivalence => vec![equivalence_check(10_000, 1001, 0)],
        Suite::Propagation => vec![propagation_check(&example3_scenario(EXAMPLE3_SEED), 1000)],
        Suite::All => [Suite::Invariance, Suite::QpOracle, Suite::Equivalence, Suite::Propagation]
            .into_iter()
            .flat_map(run_suite)
            .collect(),
    }
}

// ---------------------------------------------------------------------------
// Forward invariance

/// Violations found in one trace.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct InvarianceReport {
    pub ticks: usize,
    /// Smallest row value over every tick.
    pub min_h: f64,
    /// Ticks with a row below `−ROW_TOL`.
    pub row_breaches: usize,
    /// Ticks where `W − tol ≤ ŵ ≤ w + tol` fails.
    pub sandwich_breaches: usize,
    /// Events with a post-jump row below `−JUMP_TOL`.
    pub jump_breaches: usize,
    /// Events where `h₁(x⁺)` differs from the capped score minus `W`.
    pub jump_h1_mismatches: usize,
    /// Events where the capped score did not drop but `h₁` decreased.
    pub jump_decreases: usize,
    pub events: usize,
    pub fallbacks: usize,
}

impl InvarianceReport {
    pub fn clean(&self) -> bool {
        self.row_breaches == 0
            && self.sandwich_breaches == 0
            && self.jump_breaches == 0
            && self.jump_h1_mismatches == 0
            && self.jump_decreases == 0
    }
}

/// Audits a filtered trace against the invariance, sandwich and jump
/// properties.
pub fn audit_trace(trace: &Trace, w_min: f64) -> InvarianceReport {
    let mut rep = InvarianceReport { ticks: trace.records.len(), min_h: f64::INFINITY, ..Default::default() };
    for r in &trace.records {
        let h = r.min_h();
        rep.min_h = rep.min_h.min(h);
        if h < -ROW_TOL {
            rep.row_breaches += 1;
        }
        if r.w_hat < w_min - ROW_TOL || r.w_hat > r.w + ROW_TOL {
            rep.sandwich_breaches += 1;
        }
        if r.fallback != crate::filter::Fallback::None {
            rep.fallbacks += 1;
        }
    }
    for e in &trace.events {
        rep.events += 1;
        if e.min_h_after < -JUMP_TOL {
            rep.jump_breaches += 1;
        }
        if (e.h1_after - (e.capped_score - e.w_min)).abs() > 1e-9 * (1.0 + e.capped_score.abs()) {
            rep.jump_h1_mismatches += 1;
        }
        if e.capped_score >= e.h1_before + e.w_min && e.h1_after < e.h1_before - JUMP_TOL {
            rep.jump_decreases += 1;
        }
    }
    rep
}

/// A randomized running-example variant: 10 to 60 landmarks, `W` in
/// `[2.5, 6.5]`, a feasible random start, and a piecewise-constant reference
/// resampled every second inside the input box.
pub fn random_invariance_scenario(index: u64, base_seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index);
    let mut sc = example3_scenario(0);
    sc.name = format!("invariance #{index}");
    let (lower, upper) = match &sc.robot.input {
        InputSpec::Box { lower, upper } => (lower.clone(), upper.clone()),
        InputSpec::Halfspaces { .. } => unreachable!("running example uses a box"),
    };
    let model = sc.build_model().expect("running example model");
    let vis = sc.build_visibility().expect("running example visibility");
    loop {
        let count = rng.random_range(10..=60);
        let field_seed: u64 = rng.random();
        let w_min = rng.random_range(2.5..6.5);
        sc.landmarks = LandmarkSpec::UniformBox {
            count,
            min: [-1.5, -1.5, 0.0],
            max: [1.5, 1.5, 0.0],
            weight: 1.0,
            seed: field_seed,
        };
        sc.filter.w_min = w_min;
        sc.filter.seed = field_seed;
        let store = generate_landmarks(&sc.world, &sc.landmarks).expect("uniform field");
        for _ in 0..200 {
            let q0 = vec![
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
            ];
            let pose = model.eval_sensor_pose(&DVector::from_column_slice(&q0));
            if score(&*vis, &pose, &store) >= w_min {
                sc.robot.q0 = q0;
                let values = (0..=sc.duration.ceil() as usize)
                    .map(|_| (0..lower.len()).map(|i| rng.random_range(lower[i]..=upper[i])).collect())
                    .collect();
                sc.reference = ReferenceSpec::PiecewiseConstant { period: 1.0, values };
                return sc;
            }
        }
    }
}

pub fn invariance_suite(count: u64, base_seed: u64) -> Vec<CheckOutcome> {
    let mut total = InvarianceReport { min_h: f64::INFINITY, ..Default::default() };
    let mut failed = Vec::new();
    let mut errors = 0;
    for i in 0..count {
        let sc = random_invariance_scenario(i, base_seed);
        match run(&sc) {
            Ok(trace) => {
                let rep = audit_trace(&trace, sc.filter.w_min);
                if !rep.clean() {
                    failed.push(i);
                }
                total.ticks += rep.ticks;
                total.min_h = total.min_h.min(rep.min_h);
                total.row_breaches += rep.row_breaches;
                total.sandwich_breaches += rep.sandwich_breaches;
                total.jump_breaches += rep.jump_breaches;
                total.jump_h1_mismatches += rep.jump_h1_mismatches;
                total.jump_decreases += rep.jump_decreases;
                total.events += rep.events;
                total.fallbacks += rep.fallbacks;
            }
            Err(_) => errors += 1,
        }
    }
    vec![
        CheckOutcome::new(
            "invariance/rows",
            total.row_breaches == 0 && total.sandwich_breaches == 0 && errors == 0,
            format!(
                "{count} scenarios, {} ticks, min h {:.3e}, row breaches {}, sandwich breaches {}, run errors {errors}, fallbacks {}, failing {:?}",
                total.ticks, total.min_h, total.row_breaches, total.sandwich_breaches, total.fallbacks, failed
            ),
        ),
        CheckOutcome::new(
            "invariance/jumps",
            total.jump_breaches == 0 && total.jump_h1_mismatches == 0 && total.jump_decreases == 0,
            format!(
                "{} events, negative rows {}, h1 mismatches {}, h1 decreases {}",
                total.events, total.jump_breaches, total.jump_h1_mismatches, total.jump_decreases
            ),
        ),
    ]
}

// ---------------------------------------------------------------------------
// QP oracle

/// A random strictly convex problem with a nonempty feasible set.
pub fn random_qp(rng: &mut impl Rng) -> QpProblem {
    let k = rng.random_range(1..=8);
    let p = rng.random_range(0..=20);
    let b = DMatrix::from_fn(k, k, |_, _| rng.random_range(-1.0..1.0));
    let h = b.transpose() * &b + DMatrix::identity(k, k) * rng.random_range(0.1..2.0);
    let h = (&h + h.transpose()) * 0.5;
    let f = DVector::from_fn(k, |_, _| rng.random_range(-5.0..5.0));
    let g_mat = DMatrix::from_fn(p, k, |_, _| rng.random_range(-1.0..1.0));
    let u0 = DVector::from_fn(k, |_, _| rng.random_range(-1.0..1.0));
    let g_vec = &g_mat * &u0 + DVector::from_fn(p, |_, _| rng.random_range(0.0..1.0));
    QpProblem::new(h, f, g_mat, g_vec)
}

/// Optimal value by accelerated projected gradient ascent on the dual
/// `max_{y ≥ 0} −½ (f + Gᵀy)ᵀ H⁻¹ (f + Gᵀy) − gᵀy`, with adaptive restart.
/// Returns the dual value reached, a lower bound on the primal optimum.
pub fn dual_gradient_oracle(problem: &QpProblem, max_iter: usize) -> f64 {
    let chol = problem.h.clone().cholesky().expect("oracle needs H positive definite");
    let hinv = chol.inverse();
    let g = &problem.g_mat;
    let p = problem.rows();
    let constant = -0.5 * problem.f.dot(&(&hinv * &problem.f));
    if p == 0 {
        return constant;
    }
    // D(y) = −½ yᵀ M y − cᵀ y + constant.
    let m = g * &hinv * g.transpose();
    let c = g * &hinv * &problem.f + &problem.g_vec;
    let lip = m.symmetric_eigenvalues().amax().max(1e-12);
    let value = |y: &DVector<f64>| -0.5 * y.dot(&(&m * y)) - c.dot(y) + constant;
    let mut y = DVector::zeros(p);
    let mut z = y.clone();
    let mut t = 1.0f64;
    let mut best = value(&y);
    for _ in 0..max_iter {
        let grad = -(&m * &z + &c);
        let y_next = (&z + grad / lip).map(|v| v.max(0.0));
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let step = &y_next - &y;
        // Restart momentum when it stops helping.
        if (&z - &y_next).dot(&step) > 0.0 {
            z = y_next.clone();
            t = 1.0;
        } else {
            z = &y_next + &step * ((t - 1.0) / t_next);
            t = t_next;
        }
        let stalled = step.amax() < 1e-15;
        y = y_next;
        best = best.max(value(&y));
        if stalled {
            break;
        }
    }
    best
}

pub fn qp_oracle_suite(count: usize, seed: u64) -> Vec<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let settings = SolverSettings { tol: 1e-12, ..SolverSettings::default() };
    let (mut worst_kkt, mut worst_gap, mut worst_scale) = (0.0f64, 0.0f64, 0.0f64);
    let mut failures = 0;
    for _ in 0..count {
        let problem = random_qp(&mut rng);
        let Ok(sol) = solve(&problem, &settings, None) else {
            failures += 1;
            continue;
        };
        worst_kkt = worst_kkt.max(kkt_residual(&problem, &sol));
        let oracle = dual_gradient_oracle(&problem, 200_000);
        let obj = problem.objective(&sol.u_star);
        worst_gap = worst_gap.max((obj - oracle).abs() / (1.0 + obj.abs()));
        let scales = DVector::from_fn(problem.rows(), |_, _| rng.random_range(0.1..10.0));
        let scaled = QpProblem::new(
            problem.h.clone(),
            problem.f.clone(),
            DMatrix::from_diagonal(&scales) * &problem.g_mat,
            problem.g_vec.component_mul(&scales),
        );
        match solve(&scaled, &settings, None) {
            Ok(s2) => worst_scale = worst_scale.max((&s2.u_star - &sol.u_star).amax()),
            Err(_) => failures += 1,
        }
    }
    vec![
        CheckOutcome::new(
            "qp-oracle/kkt",
            failures == 0 && worst_kkt <= 1e-9,
            format!("{count} problems, worst KKT residual {worst_kkt:.2e}, solver failures {failures}"),
        ),
        CheckOutcome::new(
            "qp-oracle/objective",
            failures == 0 && worst_gap <= 1e-6,
            format!("worst relative gap to dual gradient oracle {worst_gap:.2e}"),
        ),
        CheckOutcome::new("qp-oracle/row-scaling", failures == 0 && worst_scale <= 1e-8, format!("worst ‖Δu*‖∞ {worst_scale:.2e}")),
    ]
}

// ---------------------------------------------------------------------------
// Disjunction encoding

/// Compares the grid-`μ` test against `(λ ≤ 0) ∨ (min ρ ≥ 0)` on random
/// samples kept at least `1e−3` away from both boundaries.
pub fn equivalence_check(samples: usize, grid: usize, seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let margin = 1e-3;
    let sample = |rng: &mut ChaCha8Rng| loop {
        let v: f64 = rng.random_range(-2.0..2.0);
        if v.abs() >= margin {
            return v;
        }
    };
    let mut mismatches = 0;
    let mut satisfied = 0;
    for _ in 0..samples {
        let lambda = sample(&mut rng);
        let rho = [sample(&mut rng), sample(&mut rng), sample(&mut rng)];
        let truth = lambda <= 0.0 || rho.iter().all(|&r| r >= 0.0);
        satisfied += usize::from(truth);
        if check_equivalence_sample(lambda, &rho, grid) != truth {
            mismatches += 1;
        }
    }
    CheckOutcome::new(
        "equivalence",
        mismatches == 0,
        format!("{samples} samples ({satisfied} satisfied), {grid}-point grid, mismatches {mismatches}"),
    )
}

// ---------------------------------------------------------------------------
// Indirect propagation

/// Largest distance between propagated and directly transformed landmark
/// positions after replaying the first `ticks` inputs of the scenario's
/// filtered run with every landmark tracked from the start.
pub fn propagation_error(scenario: &Scenario, ticks: usize) -> f64 {
    let trace = run(scenario).expect("scenario runs");
    let model = scenario.build_model().expect("model");
    let store = generate_landmarks(&scenario.world, &scenario.landmarks).expect("landmarks");
    let dt = scenario.filter.dt;
    let q0 = DVector::from_column_slice(&scenario.robot.q0);
    let ids: Vec<LandmarkId> = store.iter().map(|l| l.id).collect();
    let n = ids.len();
    let mut x = AugmentedState {
        points: direct_points(&*model, &q0, &store, &ids),
        weights: ids.iter().map(|&id| store.weight(id)).collect(),
        q: q0,
        aux: AuxState::fresh(n),
        active_ids: ids.clone(),
    };
    let m = model.input_dim();
    for r in trace.records.iter().take(ticks) {
        let mut u = DVector::zeros(m + 2 * n);
        u.rows_mut(0, m).copy_from(&r.v_star);
        x = x.advanced(&*model, &store, Tracking::Propagated, &u, dt);
    }
    let direct = direct_points(&*model, &x.q, &store, &ids);
    x.points.iter().zip(&direct).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max)
}

pub fn propagation_check(scenario: &Scenario, ticks: usize) -> CheckOutcome {
    let err = propagation_error(scenario, ticks);
    CheckOutcome::new(
        "propagation",
        err <= 1e-4,
        format!("max |p_propagated − p_direct| after {:.2} s: {err:.2e}", ticks as f64 * scenario.filter.dt),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names() {
        assert_eq!("qp-oracle".parse::<Suite>(), Ok(Suite::QpOracle));
        assert_eq!("all".parse::<Suite>(), Ok(Suite::All));
        assert!("bogus".parse::<Suite>().is_err());
    }

    #[test]
    fn oracle_matches_hand_solution() {
        // min ½u² − 2u s.t. u ≤ 1: optimum at u = 1 with value −1.5.
        let p = QpProblem::new(DMatrix::identity(1, 1), DVector::from_vec(vec![-2.0]), DMatrix::identity(1, 1), DVector::from_vec(vec![1.0]));
        assert!((dual_gradient_oracle(&p, 10_000) + 1.5).abs() < 1e-12);
    }

    #[test]
    fn small_qp_suite_passes() {
        let out = qp_oracle_suite(20, 3);
        assert!(out.iter().all(|c| c.passed), "{out:?}");
    }

    #[test]
    fn small_equivalence_passes() {
        assert!(equivalence_check(500, 1001, 5).passed);
    }

    #[test]
    fn random_scenarios_start_feasible() {
        for i in 0..5 {
            let sc = random_invariance_scenario(i, 11);
            assert!(crate::sim::Simulation::new(sc).is_ok());
        }
    }

    #[test]
    fn random_scenario_is_deterministic() {
        assert_eq!(random_invariance_scenario(4, 2), random_invariance_scenario(4, 2));
    }
}
