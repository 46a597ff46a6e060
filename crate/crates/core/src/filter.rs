//! Per-tick safety filter.
//!
//! Each tick solves
//!
//! ```text
//! minimize    (u − u_ref)ᵀ R (u − u_ref),   u_ref = (v_ref, 0, 0)
//! subject to  ḣ_i(x, u) ≥ −α_i h_i(x)   for every constraint row
//!             A_u v ≤ b_u
//! ```
//!
//! with `R = blkdiag(R_q, k_λ I, k_μ I)`, then advances the state with the
//! input held for one period.
//!
//! # Holding the input over a period
//!
//! The rows above are conditions on the instantaneous rate of `h`. With a
//! zero-order hold, the curvature of the nonlinear rows (the FOV rows and
//! the clearance row) makes `h` undershoot the continuous prediction by
//! `O(dt²)` per tick. To keep `h ≥ 0` at the sample instants, the filter
//! checks each candidate input by simulating the step. A row `i` that misses
//! `h_i(x⁺) ≥ h_i(x) − α_i·dt·max(h_i(x), 0)` has its coefficient vector
//! replaced by the secant through `0` and the candidate `u`:
//!
//! ```text
//! c_i ← c_i + κ (r_i / dt) · u / ‖u‖²,   r_i = h_i(x⁺) − h_i(x) − dt · c_iᵀ u
//! ```
//!
//! With `κ = 1`, `dt · c_iᵀ u` equals the simulated change at the candidate;
//! the default `κ = 2` overshoots so that the re-solve clears the row. The
//! corrected rows still admit `u = 0`, so the program stays feasible. After
//! a bounded number of rounds the filter scales the last candidate down
//! until every row passes, and stops the robot if none does.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::constraints::{
    build_rows, family_minima, reinitialize, row_values, AugmentedState, ConstraintError, ConstraintParams, RowLabel,
    Tracking, EPS_NUM,
};
use crate::error::ShapeError;
use crate::kinematics::{RobotModel, VelocityInput};
use crate::qp::{solve, QpError, QpProblem, SolverSettings};
use crate::visibility::{LandmarkStore, VisibilityModel};
use crate::world::World;

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionSettings {
    /// Secant re-solves per tick.
    pub max_rounds: usize,
    /// Slack on the per-step decrease check.
    pub tol: f64,
    /// Halvings tried before falling back to the stopping input.
    pub max_halvings: usize,
    /// Multiplier on the secant remainder. Values above 1 overshoot the
    /// correction so the next candidate clears the row with margin.
    pub gain: f64,
}

impl Default for CorrectionSettings {
    fn default() -> Self {
        Self { max_rounds: 8, tol: 1e-11, max_halvings: 40, gain: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterConfig {
    pub r_q: DMatrix<f64>,
    pub k_lambda: f64,
    pub k_mu: f64,
    pub params: ConstraintParams,
    /// Control period (s).
    pub dt: f64,
    /// Observation events per second.
    pub camera_rate: f64,
    pub n_max: usize,
    pub seed: u64,
    pub tracking: Tracking,
    pub correction: CorrectionSettings,
    pub solver_tol: f64,
}

impl FilterConfig {
    pub fn new(r_q: DMatrix<f64>, params: ConstraintParams) -> Self {
        Self {
            r_q,
            k_lambda: 0.001,
            k_mu: 0.001,
            params,
            dt: 0.01,
            camera_rate: 10.0,
            n_max: 50,
            seed: 0,
            tracking: Tracking::default(),
            correction: CorrectionSettings::default(),
            solver_tol: 1e-9,
        }
    }

    pub fn validate(&self) -> Result<(), FilterError> {
        let bad = |msg: String| Err(FilterError::InvalidConfig(msg));
        if !self.r_q.is_square() {
            return bad(format!("R_q must be square, got {}×{}", self.r_q.nrows(), self.r_q.ncols()));
        }
        if (&self.r_q - self.r_q.transpose()).amax() > 1e-12 || self.r_q.clone().cholesky().is_none() {
            return bad("R_q must be symmetric positive definite".into());
        }
        if !(self.k_lambda > 0.0 && self.k_mu > 0.0) {
            return bad("k_lambda and k_mu must be positive".into());
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.camera_rate > 0.0) {
            return bad(format!("camera_rate must be positive, got {}", self.camera_rate));
        }
        if self.n_max == 0 {
            return bad("n_max must be at least 1".into());
        }
        self.params.validate()?;
        Ok(())
    }

    /// Ticks between observation events.
    pub fn event_period(&self) -> u64 {
        ((1.0 / (self.camera_rate * self.dt)).round() as u64).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FilterError {
    #[error("invalid filter configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
}

/// How the applied input was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fallback {
    /// The program's solution, possibly after secant rounds.
    #[default]
    None,
    /// The last solution scaled by `2^-k`.
    Scaled(u32),
    /// The stopping input.
    Stop,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SolverStats {
    /// Active-set iterations summed over all solves this tick.
    pub iterations: usize,
    /// Number of QP solves this tick.
    pub solves: usize,
    pub kkt_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutput {
    pub v: VelocityInput,
    pub v_lambda: DVector<f64>,
    pub v_mu: DVector<f64>,
    /// `(v − v_ref)ᵀ R_q (v − v_ref)`.
    pub deviation: f64,
    /// Constraint rows active at the applied input.
    pub active: Vec<RowLabel>,
    /// Input polytope rows active at the applied input.
    pub input_active: Vec<usize>,
    pub stats: SolverStats,
    /// Smallest row value per family at the pre-step state.
    pub family_min: [Option<f64>; 6],
    /// Some row was below `−EPS_NUM` at the pre-step state.
    pub breach: bool,
    pub fallback: Fallback,
}

/// `(v − v_ref)ᵀ R_q (v − v_ref)`.
pub fn deviation_cost(v: &DVector<f64>, v_ref: &DVector<f64>, r_q: &DMatrix<f64>) -> f64 {
    let d = v - v_ref;
    (d.transpose() * r_q * &d)[(0, 0)]
}

/// Observation-event reset with the filter's feature cap and seed.
pub fn run_observation_event(
    x: &AugmentedState,
    model: &dyn RobotModel,
    vis: &dyn VisibilityModel,
    store: &LandmarkStore,
    cfg: &FilterConfig,
    tick: u64,
) -> AugmentedState {
    reinitialize(x, model, vis, store, &cfg.params, cfg.n_max, cfg.seed, tick)
}

#[derive(Debug, Clone)]
pub struct SafetyFilter {
    cfg: FilterConfig,
    warm: Vec<RowLabel>,
    last_problem: Option<QpProblem>,
}

impl SafetyFilter {
    pub fn new(cfg: FilterConfig) -> Result<Self, FilterError> {
        cfg.validate()?;
        Ok(Self { cfg, warm: Vec::new(), last_problem: None })
    }

    pub fn config(&self) -> &FilterConfig {
        &self.cfg
    }

    /// The last program solved, with its secant corrections.
    pub fn last_problem(&self) -> Option<&QpProblem> {
        self.last_problem.as_ref()
    }

    /// One filter tick: returns the applied input and the state one period
    /// later.
    pub fn step(
        &mut self,
        x: &AugmentedState,
        v_ref: &VelocityInput,
        model: &dyn RobotModel,
        vis: &dyn VisibilityModel,
        store: &LandmarkStore,
        world: &World,
    ) -> Result<(FilterOutput, AugmentedState), FilterError> {
        model.check_input(v_ref)?;
        model.check_config(&x.q)?;
        ShapeError::check("R_q", model.input_dim(), self.cfg.r_q.nrows())?;
        let cfg = &self.cfg;
        let m = model.input_dim();
        let n = x.n_active();
        let k = m + 2 * n;
        let dt = cfg.dt;

        let rows = build_rows(x, model, vis, &cfg.params, world)?;
        let family_min = family_minima(&rows);
        let worst = rows.iter().map(|r| r.value).fold(f64::INFINITY, f64::min);
        let breach = worst < -EPS_NUM;
        if breach {
            log::warn!("constraint value {worst:e} below tolerance; continuing with clamped values");
        }

        let mut h_mat = DMatrix::zeros(k, k);
        h_mat.view_mut((0, 0), (m, m)).copy_from(&(&cfg.r_q * 2.0));
        for l in 0..n {
            h_mat[(m + l, m + l)] = 2.0 * cfg.k_lambda;
            h_mat[(m + n + l, m + n + l)] = 2.0 * cfg.k_mu;
        }
        let mut f = DVector::zeros(k);
        f.rows_mut(0, m).copy_from(&(&cfg.r_q * v_ref * -2.0));

        let polytope = model.input_polytope();
        let n_rows = rows.len();
        let p = n_rows + polytope.a().nrows();
        let mut g_mat = DMatrix::zeros(p, k);
        let mut g_vec = DVector::zeros(p);
        for (i, r) in rows.iter().enumerate() {
            g_mat.row_mut(i).copy_from(&(-r.coeffs.transpose()));
            g_vec[i] = r.alpha * r.value.max(0.0);
        }
        g_mat.view_mut((n_rows, 0), (polytope.a().nrows(), m)).copy_from(polytope.a());
        g_vec.rows_mut(n_rows, polytope.b().len()).copy_from(polytope.b());
        let mut problem = QpProblem::new(h_mat, f, g_mat, g_vec);

        // Required value of each row after the step.
        let targets: Vec<f64> = rows.iter().map(|r| r.value - r.alpha * dt * r.value.max(0.0)).collect();
        let index: HashMap<RowLabel, usize> = rows.iter().enumerate().map(|(i, r)| (r.label, i)).collect();
        let mut settings = SolverSettings { tol: cfg.solver_tol, ..SolverSettings::default() };
        settings.warm_start = self.warm.iter().filter_map(|l| index.get(l).copied()).collect();

        let zero = DVector::zeros(k);
        let mut stats = SolverStats::default();
        let check = |u: &DVector<f64>| -> Result<(AugmentedState, Vec<usize>), FilterError> {
            let next = x.advanced(model, store, cfg.tracking, u, dt);
            let after = row_values(&next, model, vis, &cfg.params, world)?;
            let failing = (0..n_rows).filter(|&i| after[i] < targets[i] - cfg.correction.tol).collect::<Vec<_>>();
            Ok((next, failing))
        };

        let mut accepted: Option<(DVector<f64>, AugmentedState, Vec<usize>, Vec<usize>, Fallback)> = None;
        let mut last_u: Option<DVector<f64>> = None;
        let mut failing_rows: Vec<usize> = Vec::new();
        for round in 0..=cfg.correction.max_rounds {
            let sol = match solve(&problem, &settings, Some(&zero)) {
                Ok(sol) => sol,
                Err(QpError::NotConverged { iterations, .. }) => {
                    stats.iterations += iterations;
                    log::warn!("QP did not converge; applying the stopping input");
                    break;
                }
                Err(e) => {
                    log::warn!("QP failed ({e}); applying the stopping input");
                    break;
                }
            };
            stats.iterations += sol.iterations;
            stats.solves += 1;
            stats.kkt_residual = sol.kkt_residual;
            settings.warm_start = sol.active_set.clone();
            let u = sol.u_star;
            let (next, failing) = check(&u)?;
            if failing.is_empty() {
                let active = sol.active_set.iter().copied().filter(|&i| i < n_rows).collect();
                let input_active = sol.active_set.iter().filter(|&&i| i >= n_rows).map(|&i| i - n_rows).collect();
                accepted = Some((u, next, active, input_active, Fallback::None));
                break;
            }
            failing_rows = failing.clone();
            if round == cfg.correction.max_rounds {
                last_u = Some(u);
                break;
            }
            let after = row_values(&next, model, vis, &cfg.params, world)?;
            let u_sq = u.norm_squared();
            for &i in &failing {
                let predicted = -problem.g_mat.row(i).dot(&u.transpose());
                let remainder = after[i] - rows[i].value - dt * predicted;
                let mut row = problem.g_mat.row_mut(i);
                row -= u.transpose() * (cfg.correction.gain * remainder / (dt * u_sq));
            }
            last_u = Some(u);
        }

        if accepted.is_none() {
            if let Some(u) = last_u {
                let mut scale = 1.0;
                for halving in 1..=cfg.correction.max_halvings {
                    scale *= 0.5;
                    let trial = &u * scale;
                    let (next, failing) = check(&trial)?;
                    if failing.is_empty() {
                        accepted =
                            Some((trial, next, failing_rows.clone(), Vec::new(), Fallback::Scaled(halving as u32)));
                        break;
                    }
                }
            }
        }
        let (u, next, active, input_active, fallback) = match accepted {
            Some(a) => a,
            None => {
                let next = x.advanced(model, store, cfg.tracking, &zero, dt);
                (zero.clone(), next, failing_rows, Vec::new(), Fallback::Stop)
            }
        };
        if fallback != Fallback::None {
            log::debug!("applied input from fallback {fallback:?}");
        }

        self.warm = active.iter().map(|&i| rows[i].label).collect();
        self.last_problem = Some(problem);
        let v = u.rows(0, m).into_owned();
        let out = FilterOutput {
            deviation: deviation_cost(&v, v_ref, &cfg.r_q),
            v,
            v_lambda: u.rows(m, n).into_owned(),
            v_mu: u.rows(m + n, n).into_owned(),
            active: active.iter().map(|&i| rows[i].label).collect(),
            input_active,
            stats,
            family_min,
            breach,
            fallback,
        };
        Ok((out, next))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::initialize;
    use crate::kinematics::{InputPolytope, PlanarCamBot};
    use crate::visibility::{Landmark, LandmarkId, SectorFov2D};
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bot() -> PlanarCamBot {
        PlanarCamBot::new(InputPolytope::from_box(&[-2.0, -2.0, -1.0], &[2.0, 2.0, 1.0]))
    }

    fn sector() -> SectorFov2D {
        SectorFov2D { psi: 1.0, range: 1.0 }
    }

    fn store(points: &[[f64; 3]]) -> LandmarkStore {
        let ls = points
            .iter()
            .enumerate()
            .map(|(i, p)| Landmark { id: LandmarkId(i as u32), position: Vector3::from(*p), weight: 1.0 })
            .collect();
        LandmarkStore::new(ls, 0).unwrap()
    }

    fn config(w_min: f64) -> FilterConfig {
        FilterConfig::new(DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.0, 0.001])), ConstraintParams::new(w_min))
    }

    fn setup(w_min: f64) -> (SafetyFilter, AugmentedState, LandmarkStore) {
        let pts: Vec<[f64; 3]> = (0..6).map(|i| [0.4 + 0.08 * i as f64, 0.02 * i as f64 - 0.05, 0.0]).collect();
        let s = store(&pts);
        let cfg = config(w_min);
        let x = initialize(DVector::zeros(3), &bot(), &sector(), &s, &cfg.params, &World::empty(), cfg.n_max, 0).unwrap();
        (SafetyFilter::new(cfg).unwrap(), x, s)
    }

    #[test]
    fn deviation_examples() {
        let r = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.0, 0.001]));
        let v = DVector::from_vec(vec![0.3, -0.1, 0.5]);
        assert_eq!(deviation_cost(&v, &v, &r), 0.0);
        let dv = DVector::from_vec(vec![0.0, 0.0, 1.0]);
        assert!((deviation_cost(&(&v + &dv), &v, &r) - 0.001).abs() < 1e-15);
        let r2 = DMatrix::identity(2, 2);
        assert_eq!(deviation_cost(&DVector::from_vec(vec![3.0, 4.0]), &DVector::zeros(2), &r2), 25.0);
    }

    #[test]
    fn event_period_is_ten_ticks() {
        assert_eq!(config(1.0).event_period(), 10);
    }

    #[test]
    fn passthrough_when_nothing_binds() {
        let (mut filter, x, s) = setup(0.5);
        let v_ref = DVector::from_vec(vec![0.01, 0.0, 0.0]);
        let (out, _) = filter.step(&x, &v_ref, &bot(), &sector(), &s, &World::empty()).unwrap();
        assert!(out.active.is_empty());
        assert!((&out.v - &v_ref).amax() <= 1e-9);
        assert!(out.v_lambda.amax() <= 1e-9 && out.v_mu.amax() <= 1e-9);
        assert_eq!(out.fallback, Fallback::None);
    }

    #[test]
    fn zero_reference_gives_zero_input() {
        let (mut filter, x, s) = setup(5.5);
        let (out, next) = filter.step(&x, &DVector::zeros(3), &bot(), &sector(), &s, &World::empty()).unwrap();
        assert!(out.v.amax() <= 1e-12 && out.v_lambda.amax() <= 1e-12 && out.v_mu.amax() <= 1e-12);
        assert_eq!(next.q, x.q);
    }

    #[test]
    fn tight_score_keeps_weighted_lambda_rate_nonnegative() {
        // Four landmarks just inside the upper FOV edge with W = 4, so h1 = 0
        // and turning clockwise would push all of them out.
        let pts: Vec<[f64; 3]> = (0..4).map(|i| {
            let r = 0.5 + 0.1 * i as f64;
            [r * 0.499f64.cos(), r * 0.499f64.sin(), 0.0]
        }).collect();
        let s = store(&pts);
        let cfg = config(4.0);
        let x = initialize(DVector::zeros(3), &bot(), &sector(), &s, &cfg.params, &World::empty(), cfg.n_max, 0).unwrap();
        let mut filter = SafetyFilter::new(cfg).unwrap();
        let v_ref = DVector::from_vec(vec![0.0, 0.0, -1.0]);
        let (out, next) = filter.step(&x, &v_ref, &bot(), &sector(), &s, &World::empty()).unwrap();
        assert!(out.v_lambda.sum() >= -1e-9);
        assert!(out.v[2] > -1.0 + 1e-3, "rotation was not limited: {}", out.v[2]);
        assert!(out.deviation > 0.0);
        let h = row_values(&next, &bot(), &sector(), &filter.config().params, &World::empty()).unwrap();
        assert!(h.iter().all(|&v| v >= -1e-9));
    }

    #[test]
    fn output_respects_input_polytope() {
        let (mut filter, x, s) = setup(3.0);
        let v_ref = DVector::from_vec(vec![9.0, -7.0, 4.0]);
        let (out, _) = filter.step(&x, &v_ref, &bot(), &sector(), &s, &World::empty()).unwrap();
        assert!(bot().input_polytope().contains(&out.v, 1e-9));
    }

    #[test]
    fn solution_minimizes_over_sampled_feasible_points() {
        let (mut filter, mut x, s) = setup(4.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let world = World::empty();
        for tick in 0..20 {
            let v_ref = DVector::from_fn(3, |_, _| rng.random_range(-1.5..1.5));
            let (out, next) = filter.step(&x, &v_ref, &bot(), &sector(), &s, &world).unwrap();
            let problem = filter.last_problem().unwrap().clone();
            let mut u = out.v.clone().resize_vertically(3 + 2 * x.n_active(), 0.0);
            u.rows_mut(3, x.n_active()).copy_from(&out.v_lambda);
            u.rows_mut(3 + x.n_active(), x.n_active()).copy_from(&out.v_mu);
            let best = problem.objective(&u);
            assert_eq!(out.fallback, Fallback::None);
            for _ in 0..50 {
                // The segment from 0 to u is feasible; perturb a point on it
                // and shrink the perturbation until the point is feasible.
                let base = &u * rng.random_range(0.0..1.0);
                let mut dir = DVector::from_fn(u.len(), |_, _| rng.random_range(-0.05..0.05));
                let mut cand = &base + &dir;
                while problem.max_violation(&cand) > 1e-12 && dir.amax() > 1e-14 {
                    dir *= 0.5;
                    cand = &base + &dir;
                }
                assert!(problem.objective(&cand) >= best - 1e-9, "tick {tick}");
            }
            x = if (tick + 1) % 10 == 0 { run_observation_event(&next, &bot(), &sector(), &s, filter.config(), tick + 1) } else { next };
        }
    }

    #[test]
    fn steps_are_deterministic() {
        let run = || {
            let (mut filter, mut x, s) = setup(4.0);
            let mut out = Vec::new();
            for i in 0..50 {
                let v_ref = DVector::from_vec(vec![0.3, 0.2, (i as f64 * 0.1).sin()]);
                let (o, next) = filter.step(&x, &v_ref, &bot(), &sector(), &s, &World::empty()).unwrap();
                out.push(o.v);
                x = next;
            }
            out
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rejects_bad_config() {
        let mut cfg = config(1.0);
        cfg.k_mu = 0.0;
        assert!(SafetyFilter::new(cfg).is_err());
        let mut cfg = config(1.0);
        cfg.r_q[(0, 0)] = -1.0;
        assert!(SafetyFilter::new(cfg).is_err());
    }
}
