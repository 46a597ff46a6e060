//! Deterministic scenario execution.
//!
//! Tick `k` happens at `t = k·dt`. An observation event (every
//! `1 / (camera_rate·dt)` ticks, never at tick 0) resets the auxiliary
//! states first. The reference is then evaluated, the input is chosen
//! (filtered or projected onto the input polytope), the tick is recorded,
//! and the state advances one period. A run of duration `T` records ticks
//! `0..=T/dt`; the final record's input is computed but not applied.

use nalgebra::{DMatrix, DVector, Vector3};
use thiserror::Error;

use crate::constraints::{
    build_rows, family_minima, fresh_state, initialize, smoothed_score, AugmentedState, ConstraintError, ConstraintRow,
    RowLabel,
};
use crate::filter::{deviation_cost, run_observation_event, Fallback, FilterConfig, FilterError, SafetyFilter};
use crate::kinematics::{wrap_angle, Configuration, RobotModel, VelocityInput};
use crate::qp::{solve, QpProblem, SolverSettings};
use crate::scenario::{Mode, ReferenceSpec, Scenario, ScenarioError};
use crate::visibility::{visible_set, LandmarkId, LandmarkStore, VisibilityError, VisibilityModel};
use crate::world::{generate_landmarks, World};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("infeasible start: {0}")]
    InfeasibleStart(ConstraintError),
    #[error(transparent)]
    Landmarks(#[from] VisibilityError),
    #[error(transparent)]
    Filter(#[from] FilterError),
}

/// Zero-order hold on operator commands. A command stays in force until
/// replaced or until `timeout` ticks pass without a new one, after which the
/// stopping input applies.
#[derive(Debug, Clone, PartialEq)]
pub struct CommandHold {
    current: DVector<f64>,
    last_tick: Option<u64>,
    timeout: u64,
}

impl CommandHold {
    pub fn new(dim: usize, timeout: u64) -> Self {
        Self { current: DVector::zeros(dim), last_tick: None, timeout }
    }

    pub fn submit(&mut self, tick: u64, v_ref: DVector<f64>) {
        self.current = v_ref;
        self.last_tick = Some(tick);
    }

    pub fn value(&self, tick: u64) -> DVector<f64> {
        match self.last_tick {
            Some(t) if tick < t + self.timeout => self.current.clone(),
            _ => DVector::zeros(self.current.len()),
        }
    }
}

/// Reference input at time `t` and configuration `q` for the closed-form
/// reference kinds. `None` for `external`.
pub fn reference_input(spec: &ReferenceSpec, model: &dyn RobotModel, t: f64, q: &Configuration) -> Option<DVector<f64>> {
    match spec {
        ReferenceSpec::CircularTracker { center, radius, omega, gain } => {
            let (s, c) = (omega * t).sin_cos();
            Some(DVector::from_vec(vec![
                -radius * omega * s + gain * (center[0] + radius * c - q[0]),
                radius * omega * c + gain * (center[1] + radius * s - q[1]),
                0.0,
            ]))
        }
        ReferenceSpec::WallInspection { speed, path_heading, camera_heading, heading_gain, servo_gain } => {
            let w_r = heading_gain * wrap_angle(path_heading - q[2]);
            let w_m = servo_gain * wrap_angle(camera_heading - model.camera_heading(q));
            Some(DVector::from_vec(vec![*speed, w_r, w_m]))
        }
        ReferenceSpec::PiecewiseConstant { period, values } => {
            let i = ((t / period).floor().max(0.0) as usize).min(values.len() - 1);
            Some(DVector::from_column_slice(&values[i]))
        }
        ReferenceSpec::External { .. } => None,
    }
}

/// One recorded tick.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub tick: u64,
    pub t: f64,
    /// Unwrapped configuration.
    pub q: Configuration,
    /// Weight sum over every visible landmark.
    pub w: f64,
    pub visible: usize,
    /// `Σ λ_l w_l` over the active set.
    pub w_hat: f64,
    /// Active landmarks that are currently visible.
    pub tracked: usize,
    pub family_min: [Option<f64>; 6],
    pub v_ref: VelocityInput,
    pub v_star: VelocityInput,
    /// Auxiliary rates applied this tick, zero in baseline mode.
    pub v_lambda: DVector<f64>,
    pub v_mu: DVector<f64>,
    pub deviation: f64,
    pub event: bool,
    pub iterations: usize,
    pub fallback: Fallback,
    pub breach: bool,
    pub active_ids: Vec<LandmarkId>,
    pub lambda: DVector<f64>,
    pub mu: DVector<f64>,
    pub active_rows: Vec<RowLabel>,
    /// Input polytope rows active in the program (filtered mode only).
    pub input_active: Vec<usize>,
}

impl TraceRecord {
    /// Smallest row value over every family present.
    pub fn min_h(&self) -> f64 {
        self.family_min.iter().flatten().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Constraint values around one observation event.
#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub tick: u64,
    pub h1_before: f64,
    pub h1_after: f64,
    pub min_h_before: f64,
    pub min_h_after: f64,
    /// Score of the new active set.
    pub capped_score: f64,
    pub w_min: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
    pub events: Vec<EventRecord>,
}

/// A scenario in progress.
#[derive(Debug)]
pub struct Simulation {
    scenario: Scenario,
    model: Box<dyn RobotModel>,
    vis: Box<dyn VisibilityModel>,
    store: LandmarkStore,
    cfg: FilterConfig,
    filter: SafetyFilter,
    state: AugmentedState,
    tick: u64,
    hold: CommandHold,
    next_command: usize,
    events: Vec<EventRecord>,
}

impl Simulation {
    pub fn new(scenario: Scenario) -> Result<Self, SimError> {
        scenario.validate_runtime()?;
        let model = scenario.build_model()?;
        let vis = scenario.build_visibility()?;
        let cfg = scenario.filter_config()?;
        let store = generate_landmarks(&scenario.world, &scenario.landmarks)?;
        let q0 = DVector::from_column_slice(&scenario.robot.q0);
        let state = match scenario.mode {
            Mode::Filtered => initialize(q0, &*model, &*vis, &store, &cfg.params, &scenario.world, cfg.n_max, cfg.seed)
                .map_err(SimError::InfeasibleStart)?,
            Mode::Baseline => fresh_state(q0, &*model, &*vis, &store, cfg.params.w_min, cfg.n_max, cfg.seed, 0),
        };
        let hold_ticks = match &scenario.reference {
            ReferenceSpec::External { hold_ticks, .. } => *hold_ticks,
            _ => 0,
        };
        let filter = SafetyFilter::new(cfg.clone())?;
        let hold = CommandHold::new(model.input_dim(), hold_ticks);
        Ok(Self { scenario, model, vis, store, cfg, filter, state, tick: 0, hold, next_command: 0, events: Vec::new() })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }
    pub fn model(&self) -> &dyn RobotModel {
        &*self.model
    }
    pub fn visibility(&self) -> &dyn VisibilityModel {
        &*self.vis
    }
    pub fn store(&self) -> &LandmarkStore {
        &self.store
    }
    pub fn world(&self) -> &World {
        &self.scenario.world
    }
    pub fn config(&self) -> &FilterConfig {
        &self.cfg
    }
    pub fn state(&self) -> &AugmentedState {
        &self.state
    }
    pub fn tick(&self) -> u64 {
        self.tick
    }
    pub fn time(&self) -> f64 {
        self.tick as f64 * self.cfg.dt
    }
    pub fn events(&self) -> &[EventRecord] {
        &self.events
    }

    /// Submits an operator command taking effect at the current tick.
    pub fn submit_command(&mut self, v_ref: DVector<f64>) {
        self.hold.submit(self.tick, v_ref);
    }

    /// Runs one tick with the scenario's own reference.
    pub fn step(&mut self, advance: bool) -> Result<TraceRecord, SimError> {
        self.step_inner(None, advance)
    }

    /// Runs one tick with an explicit reference input.
    pub fn step_with(&mut self, v_ref: &VelocityInput, advance: bool) -> Result<TraceRecord, SimError> {
        self.step_inner(Some(v_ref.clone()), advance)
    }

    fn rows(&self, x: &AugmentedState) -> Result<Vec<ConstraintRow>, SimError> {
        Ok(build_rows(x, &*self.model, &*self.vis, &self.cfg.params, &self.scenario.world).map_err(FilterError::from)?)
    }

    fn step_inner(&mut self, explicit: Option<VelocityInput>, advance: bool) -> Result<TraceRecord, SimError> {
        let tick = self.tick;
        let t = self.time();
        let event = tick > 0 && tick % self.cfg.event_period() == 0;
        if event {
            let before = self.rows(&self.state)?;
            let next = run_observation_event(&self.state, &*self.model, &*self.vis, &self.store, &self.cfg, tick);
            let after = self.rows(&next)?;
            let min = |rows: &[ConstraintRow]| rows.iter().map(|r| r.value).fold(f64::INFINITY, f64::min);
            self.events.push(EventRecord {
                tick,
                h1_before: before[0].value,
                h1_after: after[0].value,
                min_h_before: min(&before),
                min_h_after: min(&after),
                capped_score: next.weights.iter().sum(),
                w_min: self.cfg.params.w_min,
            });
            self.state = next;
        }

        let v_ref = match explicit {
            Some(v) => v,
            None => match reference_input(&self.scenario.reference, &*self.model, t, &self.state.q) {
                Some(v) => v,
                None => {
                    if let ReferenceSpec::External { commands, .. } = &self.scenario.reference {
                        while self.next_command < commands.len() && commands[self.next_command].tick <= tick {
                            let c = &commands[self.next_command];
                            self.hold.submit(c.tick, DVector::from_column_slice(&c.v_ref));
                            self.next_command += 1;
                        }
                    }
                    self.hold.value(tick)
                }
            },
        };

        let x = &self.state;
        let n = x.n_active();
        let (v_star, v_lambda, v_mu, next, family_min, iterations, fallback, breach, active_rows, input_active) = match self
            .scenario
            .mode
        {
            Mode::Filtered => {
                let (out, next) =
                    self.filter.step(x, &v_ref, &*self.model, &*self.vis, &self.store, &self.scenario.world)?;
                (
                    out.v,
                    out.v_lambda,
                    out.v_mu,
                    next,
                    out.family_min,
                    out.stats.iterations,
                    out.fallback,
                    out.breach,
                    out.active,
                    out.input_active,
                )
            }
            Mode::Baseline => {
                let (v, iterations) = project_onto_polytope(&*self.model, &v_ref, self.cfg.solver_tol);
                let mut u = DVector::zeros(self.model.input_dim() + 2 * n);
                u.rows_mut(0, v.len()).copy_from(&v);
                let next = x.advanced(&*self.model, &self.store, self.cfg.tracking, &u, self.cfg.dt);
                let fm = family_minima(&self.rows(x)?);
                (v, DVector::zeros(n), DVector::zeros(n), next, fm, iterations, Fallback::None, false, Vec::new(), Vec::new())
            }
        };

        let pose = self.model.eval_sensor_pose(&x.q);
        let visible = visible_set(&*self.vis, &pose, &self.store);
        let tracked = x.points.iter().filter(|p| self.vis.is_visible(p)).count();
        let record = TraceRecord {
            tick,
            t,
            q: x.q.clone(),
            w: visible.iter().map(|&id| self.store.weight(id)).sum(),
            visible: visible.len(),
            w_hat: smoothed_score(&x.aux, &x.weights),
            tracked,
            family_min,
            deviation: deviation_cost(&v_star, &v_ref, &self.cfg.r_q),
            v_ref,
            v_star,
            v_lambda,
            v_mu,
            event,
            iterations,
            fallback,
            breach,
            active_ids: x.active_ids.clone(),
            lambda: x.aux.lambda.clone(),
            mu: x.aux.mu.clone(),
            active_rows,
            input_active,
        };
        if advance {
            self.state = next;
            self.tick += 1;
        }
        Ok(record)
    }

    /// Runs the remaining ticks of the scenario.
    pub fn run_to_end(&mut self) -> Result<Trace, SimError> {
        let n = self.scenario.ticks();
        let mut records = Vec::with_capacity((n + 1) as usize);
        while self.tick <= n {
            let last = self.tick == n;
            records.push(self.step(!last)?);
            if last {
                break;
            }
        }
        Ok(Trace { records, events: self.events.clone() })
    }
}

/// Euclidean projection of `v` onto the model's input polytope.
pub fn project_onto_polytope(model: &dyn RobotModel, v: &VelocityInput, tol: f64) -> (VelocityInput, usize) {
    let poly = model.input_polytope();
    if poly.contains(v, 0.0) {
        return (v.clone(), 0);
    }
    let m = v.len();
    let problem = QpProblem::new(DMatrix::identity(m, m), -v, poly.a().clone(), poly.b().clone());
    let settings = SolverSettings { tol, ..SolverSettings::default() };
    match solve(&problem, &settings, Some(&DVector::zeros(m))) {
        Ok(sol) => (sol.u_star, sol.iterations),
        Err(_) => (DVector::zeros(m), 0),
    }
}

/// Runs a scenario from its initial state.
pub fn run(scenario: &Scenario) -> Result<Trace, SimError> {
    Simulation::new(scenario.clone())?.run_to_end()
}

/// World positions of the landmarks as seen from `q`; a test oracle for
/// propagated positions.
pub fn direct_points(model: &dyn RobotModel, q: &Configuration, store: &LandmarkStore, ids: &[LandmarkId]) -> Vec<Vector3<f64>> {
    let pose = model.eval_sensor_pose(q);
    ids.iter()
        .filter_map(|&id| store.get(id))
        .map(|l| pose.inverse_transform_point(&l.position.into()).coords)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{example3_scenario, CommandEntry, EXAMPLE3_SEED};

    #[test]
    fn hold_lapses_after_timeout() {
        let mut h = CommandHold::new(2, 50);
        assert_eq!(h.value(0), DVector::zeros(2));
        h.submit(10, DVector::from_vec(vec![1.0, 2.0]));
        assert_eq!(h.value(59), DVector::from_vec(vec![1.0, 2.0]));
        assert_eq!(h.value(60), DVector::zeros(2));
    }

    #[test]
    fn circular_reference_matches_closed_form() {
        let s = example3_scenario(EXAMPLE3_SEED);
        let model = s.build_model().unwrap();
        let q = DVector::from_vec(vec![0.3, -0.2, 1.0]);
        let t: f64 = 0.7;
        let v = reference_input(&s.reference, &*model, t, &q).unwrap();
        assert_eq!(v[0], -t.sin() + 2.0 * (t.cos() - 0.3));
        assert_eq!(v[1], t.cos() + 2.0 * (t.sin() + 0.2));
        assert_eq!(v[2], 0.0);
    }

    #[test]
    fn zero_duration_records_initial_tick_only() {
        let mut s = example3_scenario(EXAMPLE3_SEED);
        s.duration = 0.0;
        let trace = run(&s).unwrap();
        assert_eq!(trace.records.len(), 1);
        assert_eq!(trace.records[0].t, 0.0);
    }

    #[test]
    fn events_every_tenth_tick() {
        let mut s = example3_scenario(EXAMPLE3_SEED);
        s.duration = 1.0;
        let trace = run(&s).unwrap();
        assert_eq!(trace.records.len(), 101);
        let ticks: Vec<u64> = trace.records.iter().filter(|r| r.event).map(|r| r.tick).collect();
        assert_eq!(ticks, (1..=10).map(|i| i * 10).collect::<Vec<_>>());
    }

    #[test]
    fn infeasible_start_is_reported() {
        let mut s = example3_scenario(EXAMPLE3_SEED);
        s.filter.w_min = 100.0;
        assert!(matches!(Simulation::new(s), Err(SimError::InfeasibleStart(_))));
    }

    #[test]
    fn baseline_projects_onto_box() {
        let s = example3_scenario(EXAMPLE3_SEED);
        let model = s.build_model().unwrap();
        let (v, _) = project_onto_polytope(&*model, &DVector::from_vec(vec![3.0, -0.5, -4.0]), 1e-9);
        assert!((v - DVector::from_vec(vec![2.0, -0.5, -1.0])).amax() < 1e-12);
    }

    #[test]
    fn external_log_replays_with_hold() {
        let mut s = example3_scenario(EXAMPLE3_SEED);
        s.duration = 1.0;
        s.reference = ReferenceSpec::External {
            commands: vec![CommandEntry { tick: 5, v_ref: vec![0.0, 0.0, 0.2] }],
            hold_ticks: 50,
        };
        let trace = run(&s).unwrap();
        assert_eq!(trace.records[4].v_ref, DVector::zeros(3));
        assert_eq!(trace.records[5].v_ref[2], 0.2);
        assert_eq!(trace.records[54].v_ref[2], 0.2);
        assert_eq!(trace.records[55].v_ref, DVector::zeros(3));
    }
}
