//! Robot kinematic models, sensor twist maps and landmark motion.
//!
//! Every model here is a ground robot whose configuration starts with the
//! planar base position `(x, y)`. The sensor frame sits at the base origin and
//! rotates about world `z`, so the body twist of the sensor is
//!
//! ```text
//! ω_s = Rᵀ (0, 0, θ̇_c),   v_s = Rᵀ (ẋ, ẏ, 0)
//! ```
//!
//! where `R` is the sensor orientation and `θ_c` the camera heading. A fixed
//! landmark seen from the sensor then moves as `ṗ = −ω_s × p − v_s`.

use nalgebra::{DMatrix, DVector, Isometry3, Matrix3, Rotation3, Translation3, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::ShapeError;

/// Robot configuration `q`.
pub type Configuration = DVector<f64>;
/// Robot velocity input `v`.
pub type VelocityInput = DVector<f64>;

/// Wraps an angle to `(−π, π]`.
pub fn wrap_angle(angle: f64) -> f64 {
    let mut a = angle % (2.0 * PI);
    if a <= -PI {
        a += 2.0 * PI;
    } else if a > PI {
        a -= 2.0 * PI;
    }
    a
}

/// Angular and linear velocity of the sensor frame, expressed in that frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BodyTwist {
    pub angular: Vector3<f64>,
    pub linear: Vector3<f64>,
}

impl BodyTwist {
    pub fn zero() -> Self {
        Self { angular: Vector3::zeros(), linear: Vector3::zeros() }
    }
}

/// How the sensor axes are attached to the robot body.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SensorMount {
    /// Sensor x looks forward, z points up.
    #[default]
    Planar,
    /// Camera optical convention: z looks forward, x right, y down.
    Optical,
}

impl SensorMount {
    /// Rotation taking sensor-frame vectors to body-frame vectors.
    pub fn rotation(self) -> Matrix3<f64> {
        match self {
            SensorMount::Planar => Matrix3::identity(),
            SensorMount::Optical => Matrix3::new(
                0.0, 0.0, 1.0, //
                -1.0, 0.0, 0.0, //
                0.0, -1.0, 0.0,
            ),
        }
    }
}

/// Convex input set `{v : A v ≤ b}`.
#[derive(Debug, Clone, PartialEq)]
pub struct InputPolytope {
    a: DMatrix<f64>,
    b: DVector<f64>,
    bounds: Option<(DVector<f64>, DVector<f64>)>,
}

impl InputPolytope {
    /// General polytope. Panics if `a` and `b` disagree on the row count.
    pub fn new(a: DMatrix<f64>, b: DVector<f64>) -> Self {
        assert_eq!(a.nrows(), b.len(), "polytope rows mismatch");
        Self { a, b, bounds: None }
    }

    /// Axis-aligned box `lower ≤ v ≤ upper`.
    pub fn from_box(lower: &[f64], upper: &[f64]) -> Self {
        assert_eq!(lower.len(), upper.len());
        let m = lower.len();
        let mut a = DMatrix::zeros(2 * m, m);
        let mut b = DVector::zeros(2 * m);
        for i in 0..m {
            a[(2 * i, i)] = 1.0;
            b[2 * i] = upper[i];
            a[(2 * i + 1, i)] = -1.0;
            b[2 * i + 1] = -lower[i];
        }
        Self {
            a,
            b,
            bounds: Some((DVector::from_column_slice(lower), DVector::from_column_slice(upper))),
        }
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn dim(&self) -> usize {
        self.a.ncols()
    }

    /// Box bounds when the polytope was built from a box.
    pub fn bounding_box(&self) -> Option<(&DVector<f64>, &DVector<f64>)> {
        self.bounds.as_ref().map(|(l, u)| (l, u))
    }

    pub fn contains(&self, v: &DVector<f64>, tol: f64) -> bool {
        let r = &self.a * v - &self.b;
        r.iter().all(|&x| x <= tol)
    }
}

/// Differential kinematics `q̇ = J(q) v` of a ground robot carrying a sensor.
///
/// The `eval_*` methods assume correctly sized arguments; the provided
/// checked methods validate shapes first.
pub trait RobotModel: Send + Sync + std::fmt::Debug {
    fn name(&self) -> &'static str;
    fn config_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn input_polytope(&self) -> &InputPolytope;
    /// Configuration indices holding angles (wrapped only when reported).
    fn angle_indices(&self) -> &'static [usize];
    fn mount(&self) -> SensorMount;

    fn eval_jacobian(&self, q: &Configuration) -> DMatrix<f64>;
    /// Camera heading about world z.
    fn camera_heading(&self, q: &Configuration) -> f64;
    /// Rows `(ẋ, ẏ, θ̇_c)` as linear maps of the input, 3×m.
    fn planar_rate_map(&self, q: &Configuration) -> DMatrix<f64>;

    fn base_position(&self, q: &Configuration) -> Vector2<f64> {
        Vector2::new(q[0], q[1])
    }

    fn sensor_rotation(&self, q: &Configuration) -> Rotation3<f64> {
        let yaw = Rotation3::from_axis_angle(&Vector3::z_axis(), self.camera_heading(q));
        yaw * Rotation3::from_matrix_unchecked(self.mount().rotation())
    }

    fn eval_sensor_pose(&self, q: &Configuration) -> Isometry3<f64> {
        let rot = UnitQuaternion::from_rotation_matrix(&self.sensor_rotation(q));
        Isometry3::from_parts(Translation3::new(q[0], q[1], 0.0), rot)
    }

    /// `(J_ω, J_v)`, both 3×m.
    fn eval_twist_maps(&self, q: &Configuration) -> (DMatrix<f64>, DMatrix<f64>) {
        let rates = self.planar_rate_map(q);
        let rt = self.sensor_rotation(q).inverse();
        let m = self.input_dim();
        let mut j_w = DMatrix::zeros(3, m);
        let mut j_v = DMatrix::zeros(3, m);
        for c in 0..m {
            let w = rt * Vector3::new(0.0, 0.0, rates[(2, c)]);
            let v = rt * Vector3::new(rates[(0, c)], rates[(1, c)], 0.0);
            j_w.set_column(c, &w);
            j_v.set_column(c, &v);
        }
        (j_w, j_v)
    }

    fn check_config(&self, q: &Configuration) -> Result<(), ShapeError> {
        ShapeError::check("configuration", self.config_dim(), q.len())
    }

    fn check_input(&self, v: &VelocityInput) -> Result<(), ShapeError> {
        ShapeError::check("velocity input", self.input_dim(), v.len())
    }

    fn jacobian(&self, q: &Configuration) -> Result<DMatrix<f64>, ShapeError> {
        self.check_config(q)?;
        Ok(self.eval_jacobian(q))
    }

    fn twist_maps(&self, q: &Configuration) -> Result<(DMatrix<f64>, DMatrix<f64>), ShapeError> {
        self.check_config(q)?;
        Ok(self.eval_twist_maps(q))
    }

    fn sensor_pose(&self, q: &Configuration) -> Result<Isometry3<f64>, ShapeError> {
        self.check_config(q)?;
        Ok(self.eval_sensor_pose(q))
    }

    fn twist(&self, q: &Configuration, v: &VelocityInput) -> BodyTwist {
        let (j_w, j_v) = self.eval_twist_maps(q);
        BodyTwist { angular: Vector3::from_iterator((&j_w * v).iter().copied()), linear: Vector3::from_iterator((&j_v * v).iter().copied()) }
    }

    /// Copy of `q` with angle components wrapped, for reporting only.
    fn wrapped(&self, q: &Configuration) -> Configuration {
        let mut out = q.clone();
        for &i in self.angle_indices() {
            out[i] = wrap_angle(out[i]);
        }
        out
    }
}

/// Holonomic planar base whose camera heading is the third coordinate.
/// `q = (x, y, θ)`, `v = (v_x, v_y, v_θ)`, `J = I`.
#[derive(Debug, Clone)]
pub struct PlanarCamBot {
    polytope: InputPolytope,
    mount: SensorMount,
}

impl PlanarCamBot {
    pub fn new(polytope: InputPolytope) -> Self {
        assert_eq!(polytope.dim(), 3, "PlanarCamBot takes 3 inputs");
        Self { polytope, mount: SensorMount::Planar }
    }

    pub fn with_mount(mut self, mount: SensorMount) -> Self {
        self.mount = mount;
        self
    }
}

impl RobotModel for PlanarCamBot {
    fn name(&self) -> &'static str {
        "planar_cam_bot"
    }
    fn config_dim(&self) -> usize {
        3
    }
    fn input_dim(&self) -> usize {
        3
    }
    fn input_polytope(&self) -> &InputPolytope {
        &self.polytope
    }
    fn angle_indices(&self) -> &'static [usize] {
        &[2]
    }
    fn mount(&self) -> SensorMount {
        self.mount
    }
    fn eval_jacobian(&self, _q: &Configuration) -> DMatrix<f64> {
        DMatrix::identity(3, 3)
    }
    fn camera_heading(&self, q: &Configuration) -> f64 {
        q[2]
    }
    fn planar_rate_map(&self, _q: &Configuration) -> DMatrix<f64> {
        DMatrix::identity(3, 3)
    }
}

/// Differential-drive base with a camera on a yaw servo.
/// `q = (x, y, θ_r, θ_m)`, `v = (v_r, ω_r, ω_m)`, camera heading `θ_r + θ_m`.
#[derive(Debug, Clone)]
pub struct DiffDriveGimbal {
    polytope: InputPolytope,
    mount: SensorMount,
}

impl DiffDriveGimbal {
    pub fn new(polytope: InputPolytope) -> Self {
        assert_eq!(polytope.dim(), 3, "DiffDriveGimbal takes 3 inputs");
        Self { polytope, mount: SensorMount::Optical }
    }

    pub fn with_mount(mut self, mount: SensorMount) -> Self {
        self.mount = mount;
        self
    }
}

impl RobotModel for DiffDriveGimbal {
    fn name(&self) -> &'static str {
        "diff_drive_gimbal"
    }
    fn config_dim(&self) -> usize {
        4
    }
    fn input_dim(&self) -> usize {
        3
    }
    fn input_polytope(&self) -> &InputPolytope {
        &self.polytope
    }
    fn angle_indices(&self) -> &'static [usize] {
        &[2, 3]
    }
    fn mount(&self) -> SensorMount {
        self.mount
    }
    fn eval_jacobian(&self, q: &Configuration) -> DMatrix<f64> {
        let (s, c) = q[2].sin_cos();
        DMatrix::from_row_slice(
            4,
            3,
            &[
                c, 0.0, 0.0, //
                s, 0.0, 0.0, //
                0.0, 1.0, 0.0, //
                0.0, 0.0, 1.0,
            ],
        )
    }
    fn camera_heading(&self, q: &Configuration) -> f64 {
        q[2] + q[3]
    }
    fn planar_rate_map(&self, q: &Configuration) -> DMatrix<f64> {
        let (s, c) = q[2].sin_cos();
        DMatrix::from_row_slice(
            3,
            3,
            &[
                c, 0.0, 0.0, //
                s, 0.0, 0.0, //
                0.0, 1.0, 1.0,
            ],
        )
    }
}

/// `ṗ = −ω_s × p − v_s`.
pub fn landmark_rate(p: &Vector3<f64>, twist: &BodyTwist) -> Vector3<f64> {
    -twist.angular.cross(p) - twist.linear
}

fn add_scaled(q: &Configuration, k: &Configuration, h: f64) -> Configuration {
    q + k * h
}

/// One classical RK4 step of `q̇ = J(q) v` with `v` held over the step.
pub fn integrate_configuration(
    model: &dyn RobotModel,
    q: &Configuration,
    v: &VelocityInput,
    dt: f64,
) -> Result<Configuration, ShapeError> {
    model.check_config(q)?;
    model.check_input(v)?;
    Ok(rk4_configuration(model, q, v, dt))
}

pub(crate) fn rk4_configuration(model: &dyn RobotModel, q: &Configuration, v: &VelocityInput, dt: f64) -> Configuration {
    let f = |q: &Configuration| model.eval_jacobian(q) * v;
    let k1 = f(q);
    let k2 = f(&add_scaled(q, &k1, dt / 2.0));
    let k3 = f(&add_scaled(q, &k2, dt / 2.0));
    let k4 = f(&add_scaled(q, &k3, dt));
    q + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
}

/// Joint RK4 step of the configuration and a set of sensor-frame points,
/// with the input held over the step. The configuration part is identical
/// to [`integrate_configuration`].
pub(crate) fn rk4_with_points(
    model: &dyn RobotModel,
    q: &Configuration,
    points: &[Vector3<f64>],
    v: &VelocityInput,
    dt: f64,
) -> (Configuration, Vec<Vector3<f64>>) {
    let deriv = |q: &Configuration, pts: &[Vector3<f64>]| {
        let qd = model.eval_jacobian(q) * v;
        let tw = model.twist(q, v);
        let pd: Vec<Vector3<f64>> = pts.iter().map(|p| landmark_rate(p, &tw)).collect();
        (qd, pd)
    };
    let shift = |pts: &[Vector3<f64>], d: &[Vector3<f64>], h: f64| -> Vec<Vector3<f64>> {
        pts.iter().zip(d).map(|(p, dp)| p + dp * h).collect()
    };
    let (k1q, k1p) = deriv(q, points);
    let (k2q, k2p) = deriv(&add_scaled(q, &k1q, dt / 2.0), &shift(points, &k1p, dt / 2.0));
    let (k3q, k3p) = deriv(&add_scaled(q, &k2q, dt / 2.0), &shift(points, &k2p, dt / 2.0));
    let (k4q, k4p) = deriv(&add_scaled(q, &k3q, dt), &shift(points, &k3p, dt));
    let q_next = q + (&k1q + &k2q * 2.0 + &k3q * 2.0 + &k4q) * (dt / 6.0);
    let p_next = (0..points.len())
        .map(|i| points[i] + (k1p[i] + k2p[i] * 2.0 + k3p[i] * 2.0 + k4p[i]) * (dt / 6.0))
        .collect();
    (q_next, p_next)
}

/// Errors from [`propagate_landmark`].
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PropagationError {
    #[error("end time {t1} precedes start time {t0}")]
    BackwardInterval { t0: f64, t1: f64 },
    #[error("time step must be positive, got {0}")]
    NonPositiveStep(f64),
    #[error("trajectory has {available} samples but {needed} are required")]
    ShortTrajectory { needed: usize, available: usize },
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

/// Integrates a landmark's sensor-frame position from `t0` to `t1`.
///
/// `q_trajectory[k]` and `v_trajectory[k]` are the configuration and input at
/// `t0 + k·dt`; the input is held over each step. Each step re-anchors the
/// configuration on the sampled trajectory and integrates `(q, p)` jointly
/// with RK4, so `p` sees the configuration at the RK4 stage times.
pub fn propagate_landmark(
    model: &dyn RobotModel,
    q_trajectory: &[Configuration],
    v_trajectory: &[VelocityInput],
    p0: Vector3<f64>,
    t0: f64,
    t1: f64,
    dt: f64,
) -> Result<Vector3<f64>, PropagationError> {
    if t1 < t0 {
        return Err(PropagationError::BackwardInterval { t0, t1 });
    }
    if dt <= 0.0 {
        return Err(PropagationError::NonPositiveStep(dt));
    }
    let steps = ((t1 - t0) / dt).round() as usize;
    let available = q_trajectory.len().min(v_trajectory.len());
    if steps > available {
        return Err(PropagationError::ShortTrajectory { needed: steps, available });
    }
    let mut p = [p0];
    for k in 0..steps {
        model.check_config(&q_trajectory[k])?;
        model.check_input(&v_trajectory[k])?;
        let (_, next) = rk4_with_points(model, &q_trajectory[k], &p, &v_trajectory[k], dt);
        p[0] = next[0];
    }
    Ok(p[0])
}

/// Sensor-frame position of a world point.
pub fn world_to_sensor(model: &dyn RobotModel, q: &Configuration, world: &Vector3<f64>) -> Vector3<f64> {
    let pose = model.eval_sensor_pose(q);
    pose.inverse_transform_point(&(*world).into()).coords
}
