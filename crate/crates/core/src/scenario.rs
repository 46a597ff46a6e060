//! Scenario documents: everything needed to reproduce a run.
//!
//! Scenarios are JSON with an explicit `schema_version`. Unknown keys are
//! rejected and every optional field has a default, so serializing a parsed
//! scenario gives the fully resolved document.

use std::f64::consts::FRAC_PI_2;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::constraints::{ConstraintParams, FamilyGains, Tracking};
use crate::filter::{CorrectionSettings, FilterConfig};
use crate::kinematics::{DiffDriveGimbal, InputPolytope, PlanarCamBot, RobotModel};
use crate::visibility::{SectorFov2D, StereoFrustum, VisibilityModel};
use crate::world::{Bounds, FeatureWall, LandmarkSpec, World, WallSection};

pub const SCHEMA_VERSION: u32 = 1;

/// Seed of the shipped running-example landmark draw.
pub const EXAMPLE3_SEED: u64 = 0;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario JSON at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("unsupported schema_version {found}, expected {SCHEMA_VERSION}")]
    Schema { found: u32 },
    #[error("invalid scenario field `{field}`: {message}")]
    Invalid { field: String, message: String },
}

impl ScenarioError {
    fn invalid(field: &str, message: impl Into<String>) -> Self {
        ScenarioError::Invalid { field: field.into(), message: message.into() }
    }
}

impl From<serde_json::Error> for ScenarioError {
    fn from(e: serde_json::Error) -> Self {
        ScenarioError::Parse { line: e.line(), column: e.column(), message: e.to_string() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Filtered,
    Baseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RobotKind {
    PlanarCamBot,
    DiffDriveGimbal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InputSpec {
    Box { lower: Vec<f64>, upper: Vec<f64> },
    /// `{v : a v ≤ b}` with `a` given row by row.
    Halfspaces { a: Vec<Vec<f64>>, b: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotSpec {
    pub kind: RobotKind,
    pub q0: Vec<f64>,
    pub input: InputSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum VisibilitySpec {
    Sector { psi: f64, range: f64 },
    Stereo { fx: f64, fy: f64, cx: f64, cy: f64, width: f64, height: f64, r_min: f64, r_max: f64 },
}

fn d_k() -> f64 {
    0.001
}
fn d_radius() -> f64 {
    0.3
}
fn d_dt() -> f64 {
    0.01
}
fn d_rate() -> f64 {
    10.0
}
fn d_nmax() -> usize {
    50
}
fn d_solver_tol() -> f64 {
    1e-9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrectionSpec {
    pub max_rounds: usize,
    pub tol: f64,
    pub max_halvings: usize,
    pub gain: f64,
}

impl Default for CorrectionSpec {
    fn default() -> Self {
        let c = CorrectionSettings::default();
        Self { max_rounds: c.max_rounds, tol: c.tol, max_halvings: c.max_halvings, gain: c.gain }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSpec {
    /// Input cost, row by row.
    pub r_q: Vec<Vec<f64>>,
    #[serde(default = "d_k")]
    pub k_lambda: f64,
    #[serde(default = "d_k")]
    pub k_mu: f64,
    /// Required score `W`.
    pub w_min: f64,
    #[serde(default)]
    pub alphas: FamilyGains,
    #[serde(default)]
    pub collision_enabled: bool,
    #[serde(default = "d_radius")]
    pub robot_radius: f64,
    #[serde(default = "d_dt")]
    pub dt: f64,
    #[serde(default = "d_rate")]
    pub camera_rate: f64,
    #[serde(default = "d_nmax")]
    pub n_max: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub tracking: Tracking,
    #[serde(default)]
    pub correction: CorrectionSpec,
    #[serde(default = "d_solver_tol")]
    pub solver_tol: f64,
}

fn d_center() -> [f64; 2] {
    [0.0, 0.0]
}
fn d_one() -> f64 {
    1.0
}
fn d_two() -> f64 {
    2.0
}
fn d_hold() -> u64 {
    50
}

/// One operator command, applied from `tick` on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommandEntry {
    pub tick: u64,
    pub v_ref: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReferenceSpec {
    /// `v = (−rω sin ωt + k(c_x + r cos ωt − q_x), rω cos ωt + k(c_y + r sin ωt − q_y), 0)`.
    CircularTracker {
        #[serde(default = "d_center")]
        center: [f64; 2],
        #[serde(default = "d_one")]
        radius: f64,
        #[serde(default = "d_one")]
        omega: f64,
        #[serde(default = "d_two")]
        gain: f64,
    },
    /// Constant forward speed; the base heading is regulated to
    /// `path_heading` and the camera heading to `camera_heading`.
    WallInspection {
        speed: f64,
        path_heading: f64,
        camera_heading: f64,
        #[serde(default = "d_one")]
        heading_gain: f64,
        #[serde(default = "d_two")]
        servo_gain: f64,
    },
    /// `values[i]` over `[i·period, (i+1)·period)`; the last value is held.
    PiecewiseConstant { period: f64, values: Vec<Vec<f64>> },
    /// Operator commands with a zero-order hold that lapses to zero after
    /// `hold_ticks` ticks without a new command.
    External {
        #[serde(default)]
        commands: Vec<CommandEntry>,
        #[serde(default = "d_hold")]
        hold_ticks: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    /// Simulated time (s).
    pub duration: f64,
    #[serde(default)]
    pub mode: Mode,
    pub robot: RobotSpec,
    pub visibility: VisibilitySpec,
    #[serde(default)]
    pub world: World,
    pub landmarks: LandmarkSpec,
    pub filter: FilterSpec,
    pub reference: ReferenceSpec,
}

impl Scenario {
    /// Parses and validates a scenario document.
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        Self::from_value(serde_json::from_str(text)?)
    }

    pub fn from_value(value: Value) -> Result<Self, ScenarioError> {
        if let Some(v) = value.get("schema_version").and_then(Value::as_u64) {
            if v != u64::from(SCHEMA_VERSION) {
                return Err(ScenarioError::Schema { found: v as u32 });
            }
        }
        let s: Scenario = serde_json::from_value(value)?;
        s.validate()?;
        Ok(s)
    }

    /// Parses with `key=value` overrides applied to the raw document first.
    /// Keys are dotted paths such as `filter.w_min`; values are JSON, or
    /// plain strings when they do not parse as JSON.
    pub fn from_json_with_overrides(text: &str, overrides: &[(String, String)]) -> Result<Self, ScenarioError> {
        let mut value: Value = serde_json::from_str(text)?;
        for (k, v) in overrides {
            apply_override(&mut value, k, v)?;
        }
        Self::from_value(value)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    /// Checks the invariants that serde cannot express.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ScenarioError::Schema { found: self.schema_version });
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(ScenarioError::invalid("duration", format!("duration > 0 required, got {}", self.duration)));
        }
        self.validate_runtime()
    }

    /// Checks everything except the positive-duration requirement.
    pub fn validate_runtime(&self) -> Result<(), ScenarioError> {
        if !(self.duration >= 0.0 && self.duration.is_finite()) {
            return Err(ScenarioError::invalid("duration", "duration must be finite and nonnegative"));
        }
        let model = self.build_model()?;
        if self.robot.q0.len() != model.config_dim() || self.robot.q0.iter().any(|x| !x.is_finite()) {
            return Err(ScenarioError::invalid(
                "robot.q0",
                format!("expected {} finite values, got {}", model.config_dim(), self.robot.q0.len()),
            ));
        }
        self.build_visibility()?;
        let cfg = self.filter_config()?;
        cfg.validate().map_err(|e| ScenarioError::invalid("filter", e.to_string()))?;
        let m = model.input_dim();
        match &self.reference {
            ReferenceSpec::CircularTracker { radius, .. } => {
                if self.robot.kind != RobotKind::PlanarCamBot {
                    return Err(ScenarioError::invalid("reference", "circular_tracker requires planar_cam_bot"));
                }
                if !(*radius >= 0.0) {
                    return Err(ScenarioError::invalid("reference.radius", "must be nonnegative"));
                }
            }
            ReferenceSpec::WallInspection { .. } => {
                if self.robot.kind != RobotKind::DiffDriveGimbal {
                    return Err(ScenarioError::invalid("reference", "wall_inspection requires diff_drive_gimbal"));
                }
            }
            ReferenceSpec::PiecewiseConstant { period, values } => {
                if !(*period > 0.0) {
                    return Err(ScenarioError::invalid("reference.period", "must be positive"));
                }
                if values.is_empty() || values.iter().any(|v| v.len() != m) {
                    return Err(ScenarioError::invalid("reference.values", format!("need at least one value of length {m}")));
                }
            }
            ReferenceSpec::External { commands, .. } => {
                if commands.iter().any(|c| c.v_ref.len() != m) {
                    return Err(ScenarioError::invalid("reference.commands", format!("every v_ref needs length {m}")));
                }
                if commands.windows(2).any(|w| w[1].tick < w[0].tick) {
                    return Err(ScenarioError::invalid("reference.commands", "ticks must be nondecreasing"));
                }
            }
        }
        if let LandmarkSpec::UniformBox { min, max, .. } = &self.landmarks {
            if (0..3).any(|k| min[k] > max[k]) {
                return Err(ScenarioError::invalid("landmarks", "min must not exceed max"));
            }
        }
        Ok(())
    }

    pub fn build_model(&self) -> Result<Box<dyn RobotModel>, ScenarioError> {
        let polytope = match &self.robot.input {
            InputSpec::Box { lower, upper } => {
                if lower.len() != 3 || upper.len() != 3 {
                    return Err(ScenarioError::invalid("robot.input", "both models take 3 inputs"));
                }
                if lower.iter().zip(upper).any(|(l, u)| !(*l <= 0.0 && *u >= 0.0)) {
                    return Err(ScenarioError::invalid("robot.input", "the box must contain v = 0"));
                }
                InputPolytope::from_box(lower, upper)
            }
            InputSpec::Halfspaces { a, b } => {
                if a.len() != b.len() || a.iter().any(|r| r.len() != 3) {
                    return Err(ScenarioError::invalid("robot.input", "a must be (rows × 3) with one b per row"));
                }
                if b.iter().any(|&x| !(x >= 0.0)) {
                    return Err(ScenarioError::invalid("robot.input", "the polytope must contain v = 0 (b ≥ 0)"));
                }
                let flat: Vec<f64> = a.iter().flatten().copied().collect();
                InputPolytope::new(DMatrix::from_row_slice(a.len(), 3, &flat), DVector::from_column_slice(b))
            }
        };
        Ok(match self.robot.kind {
            RobotKind::PlanarCamBot => Box::new(PlanarCamBot::new(polytope)),
            RobotKind::DiffDriveGimbal => Box::new(DiffDriveGimbal::new(polytope)),
        })
    }

    pub fn build_visibility(&self) -> Result<Box<dyn VisibilityModel>, ScenarioError> {
        match self.visibility {
            VisibilitySpec::Sector { psi, range } => {
                if !(psi > 0.0 && psi < std::f64::consts::PI && range > 0.0) {
                    return Err(ScenarioError::invalid("visibility", "need 0 < psi < π and range > 0"));
                }
                Ok(Box::new(SectorFov2D { psi, range }))
            }
            VisibilitySpec::Stereo { fx, fy, cx, cy, width, height, r_min, r_max } => {
                if !(fx > 0.0 && fy > 0.0 && width > 0.0 && height > 0.0 && r_min >= 0.0 && r_max > r_min) {
                    return Err(ScenarioError::invalid("visibility", "need positive focal lengths and image size, 0 ≤ r_min < r_max"));
                }
                Ok(Box::new(StereoFrustum { fx, fy, cx, cy, width, height, r_min, r_max }))
            }
        }
    }

    pub fn filter_config(&self) -> Result<FilterConfig, ScenarioError> {
        let f = &self.filter;
        let m = f.r_q.len();
        if m == 0 || f.r_q.iter().any(|r| r.len() != m) {
            return Err(ScenarioError::invalid("filter.r_q", "must be a square matrix"));
        }
        let flat: Vec<f64> = f.r_q.iter().flatten().copied().collect();
        let params = ConstraintParams {
            w_min: f.w_min,
            alphas: f.alphas,
            collision_enabled: f.collision_enabled,
            robot_radius: f.robot_radius,
        };
        Ok(FilterConfig {
            r_q: DMatrix::from_row_slice(m, m, &flat),
            k_lambda: f.k_lambda,
            k_mu: f.k_mu,
            params,
            dt: f.dt,
            camera_rate: f.camera_rate,
            n_max: f.n_max,
            seed: f.seed,
            tracking: f.tracking,
            correction: CorrectionSettings {
                max_rounds: f.correction.max_rounds,
                tol: f.correction.tol,
                max_halvings: f.correction.max_halvings,
                gain: f.correction.gain,
            },
            solver_tol: f.solver_tol,
        })
    }

    /// Number of ticks after the initial one.
    pub fn ticks(&self) -> u64 {
        (self.duration / self.filter.dt).round() as u64
    }

    /// Replaces every seed in the document.
    pub fn override_seeds(&mut self, seed: u64) {
        self.filter.seed = seed;
        if let LandmarkSpec::UniformBox { seed: s, .. } = &mut self.landmarks {
            *s = seed;
        }
        for wall in &mut self.world.walls {
            wall.seed = seed;
        }
    }
}

/// Sets a dotted path in a JSON document, creating objects as needed.
pub fn apply_override(doc: &mut Value, key: &str, raw: &str) -> Result<(), ScenarioError> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(ScenarioError::invalid(key, "empty path segment"));
        }
        let last = i + 1 == parts.len();
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert((*part).to_string(), value);
                    return Ok(());
                }
                map.entry((*part).to_string()).or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = part.parse().map_err(|_| ScenarioError::invalid(key, format!("`{part}` is not an index")))?;
                let len = items.len();
                let slot = items.get_mut(idx).ok_or_else(|| ScenarioError::invalid(key, format!("index {idx} out of range ({len})")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(ScenarioError::invalid(key, format!("`{part}` does not address an object or array"))),
        };
    }
    Ok(())
}

fn diag(d: &[f64]) -> Vec<Vec<f64>> {
    (0..d.len()).map(|i| (0..d.len()).map(|j| if i == j { d[i] } else { 0.0 }).collect()).collect()
}

fn base_filter(r_q: &[f64], w_min: f64) -> FilterSpec {
    FilterSpec {
        r_q: diag(r_q),
        k_lambda: d_k(),
        k_mu: d_k(),
        w_min,
        alphas: FamilyGains::default(),
        collision_enabled: false,
        robot_radius: d_radius(),
        dt: d_dt(),
        camera_rate: d_rate(),
        n_max: d_nmax(),
        seed: 0,
        tracking: Tracking::default(),
        correction: CorrectionSpec::default(),
        solver_tol: d_solver_tol(),
    }
}

/// Ground-robot running example: 30 unit-weight landmarks uniform on
/// `[−1, 1]²`, `W = 4.5`, a sector camera with `ψ = 1`, `R = 1`, and the
/// unit circular tracker. The robot starts on the circle at `(1, 0)` facing
/// the origin.
pub fn example3_scenario(seed: u64) -> Scenario {
    Scenario {
        schema_version: SCHEMA_VERSION,
        name: "running example".into(),
        duration: 20.0,
        mode: Mode::Filtered,
        robot: RobotSpec {
            kind: RobotKind::PlanarCamBot,
            q0: vec![1.0, 0.0, std::f64::consts::PI],
            input: InputSpec::Box { lower: vec![-2.0, -2.0, -1.0], upper: vec![2.0, 2.0, 1.0] },
        },
        visibility: VisibilitySpec::Sector { psi: 1.0, range: 1.0 },
        world: World::empty(),
        landmarks: LandmarkSpec::UniformBox { count: 30, min: [-1.0, -1.0, 0.0], max: [1.0, 1.0, 0.0], weight: 1.0, seed },
        filter: FilterSpec { seed, ..base_filter(&[1.0, 1.0, 0.001], 4.5) },
        reference: ReferenceSpec::CircularTracker { center: [0.0, 0.0], radius: 1.0, omega: 1.0, gain: 2.0 },
    }
}

/// Parameters of [`wall_inspection_scenario`].
#[derive(Debug, Clone, PartialEq)]
pub struct WallInspectionParams {
    /// Required number of tracked landmarks; `W = M − 0.5`.
    pub m: u32,
    pub speed: f64,
    /// Section lengths (m) and densities (per m) along the wall.
    pub sections: Vec<WallSection>,
    /// Distance from the path to the wall (m).
    pub standoff: f64,
    pub seed: u64,
}

impl Default for WallInspectionParams {
    fn default() -> Self {
        Self {
            m: 20,
            speed: 0.3,
            sections: vec![
                WallSection { length: 3.0, density: 20.0 },
                WallSection { length: 2.4, density: 1.0 },
                WallSection { length: 3.0, density: 20.0 },
            ],
            standoff: 1.0,
            seed: 7,
        }
    }
}

impl WallInspectionParams {
    /// Extent along the path of the sparsest wall section. The wall starts
    /// at `x = 0`.
    pub fn gap_interval(&self) -> (f64, f64) {
        let mut start = 0.0;
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for s in &self.sections {
            if s.density < best.0 {
                best = (s.density, start, start + s.length);
            }
            start += s.length;
        }
        (best.1, best.2)
    }
}

/// Differential-drive robot with a gimballed stereo camera driving along a
/// wall whose middle section has almost no features.
pub fn wall_inspection_scenario(params: &WallInspectionParams) -> Scenario {
    let length: f64 = params.sections.iter().map(|s| s.length).sum();
    let start = 1.0;
    let travel = length - 2.0 * start;
    // 110° horizontal field of view on a 1280×720 image.
    let width = 1280.0;
    let fx = (width / 2.0) / (55.0f64.to_radians()).tan();
    let fx = (fx * 1000.0).round() / 1000.0;
    let mut filter = base_filter(&[1.0, 1.0, 0.001], f64::from(params.m) - 0.5);
    filter.collision_enabled = true;
    filter.seed = params.seed;
    Scenario {
        schema_version: SCHEMA_VERSION,
        name: "wall inspection".into(),
        duration: (travel / params.speed).ceil(),
        mode: Mode::Filtered,
        robot: RobotSpec {
            kind: RobotKind::DiffDriveGimbal,
            q0: vec![start, 0.0, 0.0, FRAC_PI_2],
            input: InputSpec::Box { lower: vec![-0.5, -1.0, -2.0], upper: vec![0.5, 1.0, 2.0] },
        },
        visibility: VisibilitySpec::Stereo {
            fx,
            fy: fx,
            cx: width / 2.0,
            cy: 360.0,
            width,
            height: 720.0,
            r_min: 0.3,
            r_max: 8.0,
        },
        world: World {
            obstacles: vec![],
            walls: vec![FeatureWall {
                a: [0.0, params.standoff],
                b: [length, params.standoff],
                sections: params.sections.clone(),
                z_range: [-0.4, 0.4],
                solid: true,
                seed: params.seed,
            }],
            bounds: Some(Bounds { min: [-1.0, -2.0], max: [length + 1.0, params.standoff + 1.0] }),
        },
        landmarks: LandmarkSpec::OnWalls,
        filter,
        reference: ReferenceSpec::WallInspection {
            speed: params.speed,
            path_heading: 0.0,
            camera_heading: FRAC_PI_2,
            heading_gain: 1.0,
            servo_gain: 2.0,
        },
    }
}

/// Running-example scene driven by an operator.
pub fn teleop_scenario() -> Scenario {
    let mut s = example3_scenario(EXAMPLE3_SEED);
    s.name = "teleoperation".into();
    s.duration = 3600.0;
    s.reference = ReferenceSpec::External { commands: vec![], hold_ticks: d_hold() };
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_everything() {
        let s = example3_scenario(3);
        let back = Scenario::from_json(&s.to_json()).unwrap();
        assert_eq!(back, s);
        let w = wall_inspection_scenario(&WallInspectionParams::default());
        assert_eq!(Scenario::from_json(&w.to_json()).unwrap(), w);
    }

    #[test]
    fn defaults_are_materialized() {
        let mut v: Value = serde_json::from_str(&example3_scenario(0).to_json()).unwrap();
        let f = v["filter"].as_object_mut().unwrap();
        f.remove("k_lambda");
        f.remove("dt");
        f.remove("correction");
        let s = Scenario::from_value(v).unwrap();
        let resolved: Value = serde_json::from_str(&s.to_json()).unwrap();
        assert_eq!(resolved["filter"]["k_lambda"], 0.001);
        assert_eq!(resolved["filter"]["dt"], 0.01);
        assert!(resolved["filter"]["correction"].is_object());
    }

    #[test]
    fn unknown_keys_and_versions_are_rejected() {
        let mut v: Value = serde_json::from_str(&example3_scenario(0).to_json()).unwrap();
        v["filter"]["bogus"] = Value::from(1);
        assert!(matches!(Scenario::from_value(v), Err(ScenarioError::Parse { .. })));
        let mut v: Value = serde_json::from_str(&example3_scenario(0).to_json()).unwrap();
        v["schema_version"] = Value::from(2);
        assert!(matches!(Scenario::from_value(v), Err(ScenarioError::Schema { found: 2 })));
    }

    #[test]
    fn parse_errors_carry_positions() {
        match Scenario::from_json("{\n  \"schema_version\": 1,\n  \"duration\": ,\n}") {
            Err(ScenarioError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn overrides_apply_before_validation() {
        let text = example3_scenario(0).to_json();
        let s = Scenario::from_json_with_overrides(&text, &[("filter.w_min".into(), "5.5".into())]).unwrap();
        assert_eq!(s.filter.w_min, 5.5);
        let s = Scenario::from_json_with_overrides(&text, &[("mode".into(), "baseline".into())]).unwrap();
        assert_eq!(s.mode, Mode::Baseline);
        let s = Scenario::from_json_with_overrides(&text, &[("robot.q0.2".into(), "0.5".into())]).unwrap();
        assert_eq!(s.robot.q0[2], 0.5);
        let err = Scenario::from_json_with_overrides(&text, &[("duration".into(), "0.0".into())]).unwrap_err();
        assert!(err.to_string().contains("duration > 0"));
    }

    #[test]
    fn invalid_fields_are_named() {
        let mut s = example3_scenario(0);
        s.robot.q0.pop();
        assert!(matches!(s.validate(), Err(ScenarioError::Invalid { field, .. }) if field == "robot.q0"));
        let mut s = example3_scenario(0);
        s.robot.input = InputSpec::Box { lower: vec![0.1, -2.0, -1.0], upper: vec![2.0, 2.0, 1.0] };
        assert!(s.validate().is_err());
        let mut s = example3_scenario(0);
        s.filter.k_mu = 0.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn wall_threshold_follows_m() {
        let s = wall_inspection_scenario(&WallInspectionParams::default());
        assert_eq!(s.filter.w_min, 19.5);
        let s = wall_inspection_scenario(&WallInspectionParams { m: 8, ..Default::default() });
        assert_eq!(s.filter.w_min, 7.5);
    }

    #[test]
    fn seed_override_reaches_every_seed() {
        let mut s = example3_scenario(1);
        s.override_seeds(99);
        assert_eq!(s.filter.seed, 99);
        assert_eq!(s.landmarks.seed(), 99);
        let mut w = wall_inspection_scenario(&WallInspectionParams::default());
        w.override_seeds(5);
        assert_eq!(w.world.walls[0].seed, 5);
    }
}
