//! Obstacle geometry, signed distance queries and landmark field generation.

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::visibility::{Landmark, LandmarkId, LandmarkStore, VisibilityError};

/// Distance reported when the world holds no obstacles.
pub const FAR_DISTANCE: f64 = 1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Obstacle {
    Disc { center: [f64; 2], radius: f64 },
    /// Capsule around a segment; `thickness` is the full width.
    Segment { a: [f64; 2], b: [f64; 2], thickness: f64 },
}

impl Obstacle {
    fn distance(&self, x: &Vector2<f64>) -> (f64, Vector2<f64>) {
        match self {
            Obstacle::Disc { center, radius } => {
                let d = x - Vector2::from(*center);
                let n = d.norm();
                let grad = if n > 0.0 { d / n } else { Vector2::zeros() };
                (n - radius, grad)
            }
            Obstacle::Segment { a, b, thickness } => {
                let (a, b) = (Vector2::from(*a), Vector2::from(*b));
                let ab = b - a;
                let len_sq = ab.norm_squared();
                let t = if len_sq > 0.0 { ((x - a).dot(&ab) / len_sq).clamp(0.0, 1.0) } else { 0.0 };
                let d = x - (a + ab * t);
                let n = d.norm();
                let grad = if n > 0.0 { d / n } else { Vector2::zeros() };
                (n - thickness / 2.0, grad)
            }
        }
    }
}

/// One stretch of a wall with constant feature density.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WallSection {
    /// Length along the wall (m).
    pub length: f64,
    /// Features per meter.
    pub density: f64,
}

/// Textured wall. Landmarks are scattered along the segment from `a` to `b`
/// section by section, with heights drawn from `z_range`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureWall {
    pub a: [f64; 2],
    pub b: [f64; 2],
    pub sections: Vec<WallSection>,
    #[serde(default = "default_z_range")]
    pub z_range: [f64; 2],
    /// Whether the wall also blocks the robot.
    #[serde(default = "default_true")]
    pub solid: bool,
    pub seed: u64,
}

fn default_z_range() -> [f64; 2] {
    [-0.4, 0.4]
}

fn default_true() -> bool {
    true
}

impl FeatureWall {
    pub fn length(&self) -> f64 {
        (Vector2::from(self.b) - Vector2::from(self.a)).norm()
    }

    /// Landmarks per section, `round(density × length)`.
    pub fn section_counts(&self) -> Vec<usize> {
        self.sections.iter().map(|s| (s.density * s.length).round().max(0.0) as usize).collect()
    }

    fn landmarks(&self, first_id: u32) -> Vec<Landmark> {
        let a = Vector2::from(self.a);
        let dir = (Vector2::from(self.b) - a).normalize();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut out = Vec::new();
        let mut start = 0.0;
        for (section, count) in self.sections.iter().zip(self.section_counts()) {
            for _ in 0..count {
                let s = start + rng.random::<f64>() * section.length;
                let z = self.z_range[0] + rng.random::<f64>() * (self.z_range[1] - self.z_range[0]);
                let xy = a + dir * s;
                out.push(Landmark {
                    id: LandmarkId(first_id + out.len() as u32),
                    position: Vector3::new(xy.x, xy.y, z),
                    weight: 1.0,
                });
            }
            start += section.length;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct World {
    #[serde(default)]
    pub obstacles: Vec<Obstacle>,
    #[serde(default)]
    pub walls: Vec<FeatureWall>,
    #[serde(default)]
    pub bounds: Option<Bounds>,
}

impl World {
    pub fn empty() -> Self {
        Self::default()
    }

    fn solid_shapes(&self) -> impl Iterator<Item = Obstacle> + '_ {
        self.obstacles.iter().cloned().chain(
            self.walls
                .iter()
                .filter(|w| w.solid)
                .map(|w| Obstacle::Segment { a: w.a, b: w.b, thickness: 0.0 }),
        )
    }

    /// Distance to the nearest obstacle surface (negative inside) and its
    /// gradient. Ties go to the lowest-index obstacle; walls follow the
    /// explicit obstacles.
    pub fn signed_distance(&self, point: &Vector2<f64>) -> (f64, Vector2<f64>) {
        let mut best = (FAR_DISTANCE, Vector2::zeros());
        let mut found = false;
        for obstacle in self.solid_shapes() {
            let (d, g) = obstacle.distance(point);
            if !found || d < best.0 {
                best = (d, g);
                found = true;
            }
        }
        best
    }
}

/// How landmarks are laid out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LandmarkSpec {
    /// `count` points uniform in the box `[min, max]`.
    UniformBox {
        count: usize,
        min: [f64; 3],
        max: [f64; 3],
        #[serde(default = "default_weight")]
        weight: f64,
        seed: u64,
    },
    /// Points along the world's feature walls.
    OnWalls,
    /// Explicit world positions with unit weight.
    Explicit { points: Vec<[f64; 3]> },
}

fn default_weight() -> f64 {
    1.0
}

impl LandmarkSpec {
    pub fn seed(&self) -> u64 {
        match self {
            LandmarkSpec::UniformBox { seed, .. } => *seed,
            _ => 0,
        }
    }
}

/// Builds the landmark store described by `spec`.
pub fn generate_landmarks(world: &World, spec: &LandmarkSpec) -> Result<LandmarkStore, VisibilityError> {
    match spec {
        LandmarkSpec::UniformBox { count, min, max, weight, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let ls = (0..*count)
                .map(|i| {
                    let mut p = Vector3::zeros();
                    for k in 0..3 {
                        p[k] = min[k] + rng.random::<f64>() * (max[k] - min[k]);
                    }
                    Landmark { id: LandmarkId(i as u32), position: p, weight: *weight }
                })
                .collect();
            LandmarkStore::new(ls, *seed)
        }
        LandmarkSpec::OnWalls => {
            let mut ls = Vec::new();
            for wall in &world.walls {
                let next = wall.landmarks(ls.len() as u32);
                ls.extend(next);
            }
            let seed = world.walls.first().map_or(0, |w| w.seed);
            LandmarkStore::new(ls, seed)
        }
        LandmarkSpec::Explicit { points } => {
            let ls = points
                .iter()
                .enumerate()
                .map(|(i, p)| Landmark { id: LandmarkId(i as u32), position: Vector3::from(*p), weight: 1.0 })
                .collect();
            LandmarkStore::new(ls, 0)
        }
    }
}
