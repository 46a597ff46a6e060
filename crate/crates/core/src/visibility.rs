//! Visibility constraint functions and landmark bookkeeping.
//!
//! A landmark at sensor-frame position `p` is visible when every component of
//! `ρ(p)` is nonnegative. The score of a configuration is the weight sum over
//! the visible landmarks.

use nalgebra::{DMatrix, DVector, Isometry3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

/// Guard radius around the sensor origin for [`SectorFov2D`].
pub const POINT_GUARD: f64 = 1e-6;
/// Minimum optical-axis depth for [`StereoFrustum`].
pub const DEPTH_GUARD: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VisibilityError {
    #[error("point {0:?} lies inside the guard region of the visibility model")]
    Domain([f64; 3]),
    #[error("duplicate landmark id {0}")]
    DuplicateId(LandmarkId),
    #[error("landmark {0} has negative weight {1}")]
    NegativeWeight(LandmarkId, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LandmarkId(pub u32);

impl std::fmt::Display for LandmarkId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Landmark {
    pub id: LandmarkId,
    pub position: Vector3<f64>,
    pub weight: f64,
}

/// Constraint function `ρ : ℝ³ → ℝᵈ` with its Jacobian.
pub trait VisibilityModel: Send + Sync + std::fmt::Debug {
    fn dim(&self) -> usize;
    fn in_domain(&self, p: &Vector3<f64>) -> bool;
    /// `ρ(p)` without the domain check.
    fn eval_rho(&self, p: &Vector3<f64>) -> DVector<f64>;
    /// `∂ρ/∂p`, d×3, without the domain check.
    fn eval_rho_grad(&self, p: &Vector3<f64>) -> DMatrix<f64>;

    fn rho(&self, p: &Vector3<f64>) -> Result<DVector<f64>, VisibilityError> {
        if self.in_domain(p) {
            Ok(self.eval_rho(p))
        } else {
            Err(VisibilityError::Domain([p.x, p.y, p.z]))
        }
    }

    fn rho_grad(&self, p: &Vector3<f64>) -> Result<DMatrix<f64>, VisibilityError> {
        if self.in_domain(p) {
            Ok(self.eval_rho_grad(p))
        } else {
            Err(VisibilityError::Domain([p.x, p.y, p.z]))
        }
    }

    /// Points outside the domain are never visible.
    fn is_visible(&self, p: &Vector3<f64>) -> bool {
        self.in_domain(p) && self.eval_rho(p).iter().all(|&r| r >= 0.0)
    }
}

/// Planar circular sector: half-angle `ψ/2` around sensor x, radius `R`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SectorFov2D {
    /// Full angle of view (rad).
    pub psi: f64,
    /// Sensing range (m).
    pub range: f64,
}

impl VisibilityModel for SectorFov2D {
    fn dim(&self) -> usize {
        3
    }

    fn in_domain(&self, p: &Vector3<f64>) -> bool {
        p.xy().norm() >= POINT_GUARD
    }

    fn eval_rho(&self, p: &Vector3<f64>) -> DVector<f64> {
        let (s, c) = (self.psi / 2.0).sin_cos();
        DVector::from_column_slice(&[s * p.x + c * p.y, s * p.x - c * p.y, self.range - p.xy().norm()])
    }

    fn eval_rho_grad(&self, p: &Vector3<f64>) -> DMatrix<f64> {
        let (s, c) = (self.psi / 2.0).sin_cos();
        let n = p.xy().norm();
        DMatrix::from_row_slice(3, 3, &[s, c, 0.0, s, -c, 0.0, -p.x / n, -p.y / n, 0.0])
    }
}

/// Pinhole frustum of the left stereo camera with depth limits.
///
/// The six one-sided components are `m_u/f_x`, `(I_w − m_u)/f_x`,
/// `m_v/f_y`, `(I_h − m_v)/f_y`, `m_d − r_min`, `r_max − m_d` with
/// `m = (f_x p_x/p_z + c_x, f_y p_y/p_z + c_y, p_z)`. Pixel rows are divided by
/// the focal length so they share the scale of the depth rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StereoFrustum {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
    pub r_min: f64,
    pub r_max: f64,
}

impl StereoFrustum {
    /// Pixel coordinates and depth `(m_u, m_v, m_d)`.
    pub fn measure(&self, p: &Vector3<f64>) -> Vector3<f64> {
        Vector3::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy, p.z)
    }
}

impl VisibilityModel for StereoFrustum {
    fn dim(&self) -> usize {
        6
    }

    fn in_domain(&self, p: &Vector3<f64>) -> bool {
        p.z >= DEPTH_GUARD
    }

    fn eval_rho(&self, p: &Vector3<f64>) -> DVector<f64> {
        let m = self.measure(p);
        DVector::from_column_slice(&[
            m.x / self.fx,
            (self.width - m.x) / self.fx,
            m.y / self.fy,
            (self.height - m.y) / self.fy,
            m.z - self.r_min,
            self.r_max - m.z,
        ])
    }

    fn eval_rho_grad(&self, p: &Vector3<f64>) -> DMatrix<f64> {
        let iz = 1.0 / p.z;
        let du = [iz, 0.0, -p.x * iz * iz];
        let dv = [0.0, iz, -p.y * iz * iz];
        DMatrix::from_row_slice(
            6,
            3,
            &[
                du[0], du[1], du[2], //
                -du[0], -du[1], -du[2], //
                dv[0], dv[1], dv[2], //
                -dv[0], -dv[1], -dv[2], //
                0.0, 0.0, 1.0, //
                0.0, 0.0, -1.0,
            ],
        )
    }
}

/// Landmarks keyed by id, in a fixed iteration order.
#[derive(Debug, Clone, Default)]
pub struct LandmarkStore {
    landmarks: Vec<Landmark>,
    index: HashMap<LandmarkId, usize>,
    pub rng_seed: u64,
}

impl LandmarkStore {
    pub fn new(landmarks: Vec<Landmark>, rng_seed: u64) -> Result<Self, VisibilityError> {
        let mut index = HashMap::with_capacity(landmarks.len());
        for (i, l) in landmarks.iter().enumerate() {
            if l.weight < 0.0 {
                return Err(VisibilityError::NegativeWeight(l.id, l.weight));
            }
            if index.insert(l.id, i).is_some() {
                return Err(VisibilityError::DuplicateId(l.id));
            }
        }
        Ok(Self { landmarks, index, rng_seed })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.landmarks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.landmarks.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Landmark> {
        self.landmarks.iter()
    }

    pub fn get(&self, id: LandmarkId) -> Option<&Landmark> {
        self.index.get(&id).map(|&i| &self.landmarks[i])
    }

    pub fn weight(&self, id: LandmarkId) -> f64 {
        self.get(id).map_or(0.0, |l| l.weight)
    }
}

/// Ids of the landmarks visible from `sensor_pose`, in store order.
pub fn visible_set(model: &dyn VisibilityModel, sensor_pose: &Isometry3<f64>, store: &LandmarkStore) -> Vec<LandmarkId> {
    store
        .iter()
        .filter(|l| {
            let p = sensor_pose.inverse_transform_point(&l.position.into()).coords;
            model.is_visible(&p)
        })
        .map(|l| l.id)
        .collect()
}

/// `w(q)`: weight sum over the visible set.
pub fn score(model: &dyn VisibilityModel, sensor_pose: &Isometry3<f64>, store: &LandmarkStore) -> f64 {
    visible_set(model, sensor_pose, store).iter().map(|&id| store.weight(id)).sum()
}

/// Caps the visible set at `cap` ids by uniform sampling without
/// replacement. The draw depends only on `(seed, tick)` and the input; the
/// returned ids keep their input order.
pub fn sample_features(visible: &[LandmarkId], cap: usize, seed: u64, tick: u64) -> Vec<LandmarkId> {
    assert!(cap >= 1, "feature cap must be at least 1");
    if visible.len() <= cap {
        return visible.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tick);
    let mut picked = rand::seq::index::sample(&mut rng, visible.len(), cap).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| visible[i]).collect()
}
