//! The augmented constraint set over `x = (q, λ, μ)`.
//!
//! Rows are emitted family by family with the augmented input laid out as
//! `u = (v, v_λ, v_μ)`:
//!
//! | family | value                         | count        |
//! |--------|-------------------------------|--------------|
//! | h1     | `Σ λ_l w_l − W`               | 1            |
//! | h2     | `1 − λ_l`                     | N′           |
//! | h3     | `−μ_l λ_l + (1 − μ_l) ρ_k(p_l)` | d·N′       |
//! | h4     | `μ_l`                         | N′           |
//! | h5     | `1 − μ_l`                     | N′           |
//! | h6     | `s(q) − r`                    | 0 or 1       |
//!
//! Each row also carries the linear map `u ↦ ḣ`.

use std::fmt;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{rk4_configuration, rk4_with_points, world_to_sensor, Configuration, RobotModel};
use crate::visibility::{sample_features, visible_set, LandmarkId, LandmarkStore, VisibilityModel};
use crate::world::World;

/// Slack allowed on nonnegativity checks.
pub const EPS_NUM: f64 = 1e-6;
/// Drift band within which λ and μ are clamped back into range.
pub const CLAMP_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AuxState {
    pub lambda: DVector<f64>,
    pub mu: DVector<f64>,
}

impl AuxState {
    /// `λ = 1`, `μ = 0` on `n` landmarks.
    pub fn fresh(n: usize) -> Self {
        Self { lambda: DVector::from_element(n, 1.0), mu: DVector::zeros(n) }
    }

    pub fn len(&self) -> usize {
        self.lambda.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambda.is_empty()
    }
}

/// How active landmark positions are carried between observation events.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tracking {
    /// Integrate `ṗ = −ω_s × p − v_s` jointly with `q`.
    #[default]
    Propagated,
    /// Recompute `p` from the world position after each step.
    Direct,
}

/// Robot configuration plus per-landmark auxiliary states.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedState {
    pub q: Configuration,
    pub aux: AuxState,
    /// Index order of `λ`, `μ`, `points` and `weights`.
    pub active_ids: Vec<LandmarkId>,
    /// Sensor-frame positions of the active landmarks.
    pub points: Vec<Vector3<f64>>,
    pub weights: Vec<f64>,
}

impl AugmentedState {
    pub fn n_active(&self) -> usize {
        self.active_ids.len()
    }

    fn consistent(&self) -> bool {
        let n = self.active_ids.len();
        self.aux.lambda.len() == n && self.aux.mu.len() == n && self.points.len() == n && self.weights.len() == n
    }

    /// State after holding `u = (v, v_λ, v_μ)` for `dt`. `λ` and `μ` are
    /// integrated exactly; `q` (and `p` when propagated) by RK4.
    pub fn advanced(
        &self,
        model: &dyn RobotModel,
        store: &LandmarkStore,
        tracking: Tracking,
        u: &DVector<f64>,
        dt: f64,
    ) -> AugmentedState {
        let m = model.input_dim();
        let n = self.n_active();
        let v = u.rows(0, m).into_owned();
        let (q, points) = match tracking {
            Tracking::Propagated => rk4_with_points(model, &self.q, &self.points, &v, dt),
            Tracking::Direct => {
                let q = rk4_configuration(model, &self.q, &v, dt);
                let pts = self
                    .active_ids
                    .iter()
                    .zip(&self.points)
                    .map(|(id, p)| store.get(*id).map_or(*p, |l| world_to_sensor(model, &q, &l.position)))
                    .collect();
                (q, pts)
            }
        };
        let lambda = &self.aux.lambda + u.rows(m, n) * dt;
        let mu = &self.aux.mu + u.rows(m + n, n) * dt;
        let mut aux = AuxState { lambda, mu };
        clamp_aux(&mut aux);
        AugmentedState { q, aux, active_ids: self.active_ids.clone(), points, weights: self.weights.clone() }
    }
}

fn clamp_aux(aux: &mut AuxState) {
    for l in aux.lambda.iter_mut() {
        if *l > 1.0 && *l <= 1.0 + CLAMP_TOL {
            *l = 1.0;
        }
    }
    for m in aux.mu.iter_mut() {
        if *m < 0.0 && *m >= -CLAMP_TOL {
            *m = 0.0;
        } else if *m > 1.0 && *m <= 1.0 + CLAMP_TOL {
            *m = 1.0;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Family {
    H1,
    H2,
    H3,
    H4,
    H5,
    H6,
}

impl Family {
    pub const ALL: [Family; 6] = [Family::H1, Family::H2, Family::H3, Family::H4, Family::H5, Family::H6];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "h{}", self.index() + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RowLabel {
    pub family: Family,
    pub landmark: Option<LandmarkId>,
    pub component: Option<usize>,
}

impl RowLabel {
    fn new(family: Family, landmark: Option<LandmarkId>, component: Option<usize>) -> Self {
        Self { family, landmark, component }
    }
}

impl fmt::Display for RowLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.family)?;
        match (self.landmark, self.component) {
            (Some(l), Some(k)) => write!(f, "[{l},{k}]"),
            (Some(l), None) => write!(f, "[{l}]"),
            _ => Ok(()),
        }
    }
}

/// One scalar constraint `h(x) ≥ 0` with `ḣ = coeffs · u`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintRow {
    pub label: RowLabel,
    pub value: f64,
    pub coeffs: DVector<f64>,
    pub alpha: f64,
}

/// Class-K gains per family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyGains {
    pub h1: f64,
    pub h2: f64,
    pub h3: f64,
    pub h4: f64,
    pub h5: f64,
    pub h6: f64,
}

impl Default for FamilyGains {
    fn default() -> Self {
        Self::uniform(1.0)
    }
}

impl FamilyGains {
    pub fn uniform(alpha: f64) -> Self {
        Self { h1: alpha, h2: alpha, h3: alpha, h4: alpha, h5: alpha, h6: alpha }
    }

    pub fn get(&self, family: Family) -> f64 {
        match family {
            Family::H1 => self.h1,
            Family::H2 => self.h2,
            Family::H3 => self.h3,
            Family::H4 => self.h4,
            Family::H5 => self.h5,
            Family::H6 => self.h6,
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self { h1: self.h1 * c, h2: self.h2 * c, h3: self.h3 * c, h4: self.h4 * c, h5: self.h5 * c, h6: self.h6 * c }
    }

    fn all_positive(&self) -> bool {
        Family::ALL.iter().all(|&f| self.get(f) > 0.0)
    }
}

fn default_radius() -> f64 {
    0.3
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintParams {
    /// Required score `W`.
    pub w_min: f64,
    #[serde(default)]
    pub alphas: FamilyGains,
    #[serde(default)]
    pub collision_enabled: bool,
    #[serde(default = "default_radius")]
    pub robot_radius: f64,
}

impl ConstraintParams {
    pub fn new(w_min: f64) -> Self {
        Self { w_min, alphas: FamilyGains::default(), collision_enabled: false, robot_radius: default_radius() }
    }

    pub fn validate(&self) -> Result<(), ConstraintError> {
        if !(self.w_min > 0.0) {
            return Err(ConstraintError::InvalidParams(format!("w_min must be positive, got {}", self.w_min)));
        }
        if !self.alphas.all_positive() {
            return Err(ConstraintError::InvalidParams("all alphas must be positive".into()));
        }
        if !(self.robot_radius >= 0.0) {
            return Err(ConstraintError::InvalidParams("robot_radius must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConstraintError {
    #[error("initial score {score} is below the required {required} (deficit {deficit})")]
    InfeasibleStart { score: f64, required: f64, deficit: f64 },
    #[error("initial clearance {clearance} is negative")]
    Collision { clearance: f64 },
    #[error("auxiliary state lengths do not match the active landmark list")]
    IndexMismatch,
    #[error("invalid constraint parameters: {0}")]
    InvalidParams(String),
}

/// `ŵ = Σ λ_l w_l`.
pub fn smoothed_score(aux: &AuxState, weights: &[f64]) -> f64 {
    aux.lambda.iter().zip(weights).map(|(l, w)| l * w).sum()
}

/// Every row of the constraint set at `x`.
pub fn build_rows(
    x: &AugmentedState,
    model: &dyn RobotModel,
    vis: &dyn VisibilityModel,
    params: &ConstraintParams,
    world: &World,
) -> Result<Vec<ConstraintRow>, ConstraintError> {
    assemble(x, model, vis, params, world, true)
}

/// Row values only, in the same order as [`build_rows`].
pub fn row_values(
    x: &AugmentedState,
    model: &dyn RobotModel,
    vis: &dyn VisibilityModel,
    params: &ConstraintParams,
    world: &World,
) -> Result<Vec<f64>, ConstraintError> {
    Ok(assemble(x, model, vis, params, world, false)?.into_iter().map(|r| r.value).collect())
}

fn skew(p: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -p.z, p.y, p.z, 0.0, -p.x, -p.y, p.x, 0.0)
}

fn assemble(
    x: &AugmentedState,
    model: &dyn RobotModel,
    vis: &dyn VisibilityModel,
    params: &ConstraintParams,
    world: &World,
    with_coeffs: bool,
) -> Result<Vec<ConstraintRow>, ConstraintError> {
    if !x.consistent() {
        return Err(ConstraintError::IndexMismatch);
    }
    let m = model.input_dim();
    let n = x.n_active();
    let d = vis.dim();
    let k = m + 2 * n;
    let gains = &params.alphas;
    let zero = || if with_coeffs { DVector::zeros(k) } else { DVector::zeros(0) };
    let mut rows = Vec::with_capacity(2 + (d + 3) * n + usize::from(params.collision_enabled));
    let (lam, mu) = (&x.aux.lambda, &x.aux.mu);

    let mut c = zero();
    if with_coeffs {
        for l in 0..n {
            c[m + l] = x.weights[l];
        }
    }
    rows.push(ConstraintRow {
        label: RowLabel::new(Family::H1, None, None),
        value: smoothed_score(&x.aux, &x.weights) - params.w_min,
        coeffs: c,
        alpha: gains.h1,
    });

    for l in 0..n {
        let mut c = zero();
        if with_coeffs {
            c[m + l] = -1.0;
        }
        rows.push(ConstraintRow {
            label: RowLabel::new(Family::H2, Some(x.active_ids[l]), None),
            value: 1.0 - lam[l],
            coeffs: c,
            alpha: gains.h2,
        });
    }

    // ṗ = [p]× J_ω v − J_v v
    let maps = with_coeffs.then(|| model.eval_twist_maps(&x.q));
    for l in 0..n {
        let p = &x.points[l];
        let id = Some(x.active_ids[l]);
        if !vis.in_domain(p) {
            // Frozen: evaluate the μ = 1 branch.
            for comp in 0..d {
                let mut c = zero();
                if with_coeffs {
                    c[m + l] = -1.0;
                }
                rows.push(ConstraintRow {
                    label: RowLabel::new(Family::H3, id, Some(comp)),
                    value: -lam[l],
                    coeffs: c,
                    alpha: gains.h3,
                });
            }
            continue;
        }
        let rho = vis.eval_rho(p);
        let p_dot = maps.as_ref().map(|(j_w, j_v)| {
            let s = skew(p);
            let mut out = DMatrix::zeros(3, m);
            for col in 0..m {
                let w = Vector3::new(j_w[(0, col)], j_w[(1, col)], j_w[(2, col)]);
                let lin = Vector3::new(j_v[(0, col)], j_v[(1, col)], j_v[(2, col)]);
                out.set_column(col, &(s * w - lin));
            }
            (out, vis.eval_rho_grad(p))
        });
        for comp in 0..d {
            let mut c = zero();
            if let Some((pd, grad)) = &p_dot {
                let g = grad.row(comp) * pd * (1.0 - mu[l]);
                for col in 0..m {
                    c[col] = g[col];
                }
                c[m + l] = -mu[l];
                c[m + n + l] = -(lam[l] + rho[comp]);
            }
            rows.push(ConstraintRow {
                label: RowLabel::new(Family::H3, id, Some(comp)),
                value: -mu[l] * lam[l] + (1.0 - mu[l]) * rho[comp],
                coeffs: c,
                alpha: gains.h3,
            });
        }
    }

    for l in 0..n {
        let mut c = zero();
        if with_coeffs {
            c[m + n + l] = 1.0;
        }
        rows.push(ConstraintRow {
            label: RowLabel::new(Family::H4, Some(x.active_ids[l]), None),
            value: mu[l],
            coeffs: c,
            alpha: gains.h4,
        });
    }
    for l in 0..n {
        let mut c = zero();
        if with_coeffs {
            c[m + n + l] = -1.0;
        }
        rows.push(ConstraintRow {
            label: RowLabel::new(Family::H5, Some(x.active_ids[l]), None),
            value: 1.0 - mu[l],
            coeffs: c,
            alpha: gains.h5,
        });
    }

    if params.collision_enabled {
        let (s, grad) = world.signed_distance(&model.base_position(&x.q));
        let mut c = zero();
        if with_coeffs {
            let j = model.eval_jacobian(&x.q);
            for col in 0..m {
                c[col] = grad.x * j[(0, col)] + grad.y * j[(1, col)];
            }
        }
        rows.push(ConstraintRow {
            label: RowLabel::new(Family::H6, None, None),
            value: s - params.robot_radius,
            coeffs: c,
            alpha: gains.h6,
        });
    }
    Ok(rows)
}

/// Picks the active set from the visible ids: a seeded uniform sample of
/// size `cap`, or the `cap` heaviest landmarks when the sample's score
/// would fall below `w_min` while the heaviest would not.
pub fn select_features(
    visible: &[LandmarkId],
    store: &LandmarkStore,
    cap: usize,
    seed: u64,
    tick: u64,
    w_min: f64,
) -> Vec<LandmarkId> {
    let sample = sample_features(visible, cap, seed, tick);
    if sample.len() == visible.len() {
        return sample;
    }
    let sample_score: f64 = sample.iter().map(|&id| store.weight(id)).sum();
    if sample_score >= w_min {
        return sample;
    }
    let mut order: Vec<usize> = (0..visible.len()).collect();
    order.sort_by(|&a, &b| store.weight(visible[b]).total_cmp(&store.weight(visible[a])).then(a.cmp(&b)));
    let mut top: Vec<usize> = order.into_iter().take(cap).collect();
    top.sort_unstable();
    let top: Vec<LandmarkId> = top.into_iter().map(|i| visible[i]).collect();
    let top_score: f64 = top.iter().map(|&id| store.weight(id)).sum();
    if top_score > sample_score {
        log::debug!("feature sample score {sample_score} below {w_min}; using heaviest {cap}");
        top
    } else {
        sample
    }
}

/// Fresh state on the capped visible set at `q`, with `λ = 1` and `μ = 0`.
#[allow(clippy::too_many_arguments)]
pub fn fresh_state(
    q: Configuration,
    model: &dyn RobotModel,
    vis: &dyn VisibilityModel,
    store: &LandmarkStore,
    w_min: f64,
    cap: usize,
    seed: u64,
    tick: u64,
) -> AugmentedState {
    let pose = model.eval_sensor_pose(&q);
    let visible = visible_set(vis, &pose, store);
    let active_ids = select_features(&visible, store, cap, seed, tick, w_min);
    let points = active_ids
        .iter()
        .map(|&id| {
            let world = store.get(id).expect("visible ids come from the store").position;
            pose.inverse_transform_point(&world.into()).coords
        })
        .collect();
    let weights = active_ids.iter().map(|&id| store.weight(id)).collect();
    AugmentedState { q, aux: AuxState::fresh(active_ids.len()), active_ids, points, weights }
}

/// Feasible starting state at `q0`.
#[allow(clippy::too_many_arguments)]
pub fn initialize(
    q0: Configuration,
    model: &dyn RobotModel,
    vis: &dyn VisibilityModel,
    store: &LandmarkStore,
    params: &ConstraintParams,
    world: &World,
    cap: usize,
    seed: u64,
) -> Result<AugmentedState, ConstraintError> {
    params.validate()?;
    let x = fresh_state(q0, model, vis, store, params.w_min, cap, seed, 0);
    let score = smoothed_score(&x.aux, &x.weights);
    if score < params.w_min {
        return Err(ConstraintError::InfeasibleStart { score, required: params.w_min, deficit: params.w_min - score });
    }
    if params.collision_enabled {
        let (s, _) = world.signed_distance(&model.base_position(&x.q));
        let clearance = s - params.robot_radius;
        if clearance < 0.0 {
            return Err(ConstraintError::Collision { clearance });
        }
    }
    Ok(x)
}

/// Observation-event reset: the active set becomes the capped visible set at
/// the current configuration, with `λ = 1` and `μ = 0`. `q` is unchanged.
#[allow(clippy::too_many_arguments)]
pub fn reinitialize(
    x_minus: &AugmentedState,
    model: &dyn RobotModel,
    vis: &dyn VisibilityModel,
    store: &LandmarkStore,
    params: &ConstraintParams,
    cap: usize,
    seed: u64,
    tick: u64,
) -> AugmentedState {
    fresh_state(x_minus.q.clone(), model, vis, store, params.w_min, cap, seed, tick)
}

/// Whether some `μ` on a uniform grid over `[0, 1]` satisfies
/// `−μλ + (1 − μ)ρ_k ≥ 0` for every component.
pub fn check_equivalence_sample(lambda: f64, rho: &[f64], mu_grid_size: usize) -> bool {
    assert!(mu_grid_size >= 2, "grid needs at least two points");
    (0..mu_grid_size).any(|i| {
        let mu = i as f64 / (mu_grid_size - 1) as f64;
        rho.iter().all(|&r| -mu * lambda + (1.0 - mu) * r >= 0.0)
    })
}

/// Smallest row value per family, `None` for families with no rows.
pub fn family_minima(rows: &[ConstraintRow]) -> [Option<f64>; 6] {
    let mut out = [None; 6];
    for r in rows {
        let slot = &mut out[r.label.family.index()];
        *slot = Some(slot.map_or(r.value, |v: f64| v.min(r.value)));
    }
    out
}
