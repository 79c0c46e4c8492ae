//! The synthetic conditional world: a 1-D ball under gravity, drag and floor
//! contact, rendered into a flat data vector `[appearance | positions]`.
//!
//! The appearance block is a copy of a static scene code ("what is depicted")
//! and the position block is the ball height per step ("how it moves"), so
//! the physics-relevant subspace of a data vector is a plain coordinate mask.

pub(crate) mod dataset;
mod score;
mod sim;

pub use dataset::{
    make_dataset, read_dataset, scene_pool, write_dataset, AxisRanges, DatasetConfig,
    DatasetRecord,
};
pub use score::{physics_score, ScoreReport};
pub use sim::simulate;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed geometry of the world shared by every record of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    /// Appearance dimension `m`.
    pub scene_dim: usize,
    /// Number of recorded steps `T`.
    pub steps: usize,
    pub dt: f64,
    pub start_height: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            scene_dim: 8,
            steps: 16,
            dt: 0.1,
            start_height: 1.0,
        }
    }
}

impl WorldConfig {
    /// Flat data dimension `D = m + T`.
    pub fn data_dim(&self) -> usize {
        self.scene_dim + self.steps
    }

    /// Steps over which the gradual profile ramps up its drive.
    pub fn ramp_steps(&self) -> usize {
        (self.steps / 4).max(1)
    }

    /// Boolean mask over the data vector selecting the position block.
    pub fn position_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.data_dim()];
        mask[self.scene_dim..].iter_mut().for_each(|b| *b = true);
        mask
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Full launch speed applied at step 0.
    Sudden,
    /// Launch speed ramped in linearly over the first `T/4` steps.
    Gradual,
}

impl Profile {
    pub fn flipped(self) -> Self {
        match self {
            Profile::Sudden => Profile::Gradual,
            Profile::Gradual => Profile::Sudden,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysicsParams {
    /// Signed acceleration; negative pulls toward the floor.
    pub gravity: f64,
    /// Fraction of speed retained on floor contact; 0 sticks.
    pub restitution: f64,
    /// Per-step velocity damping.
    pub drag: f64,
    /// Launch speed (upward).
    pub speed: f64,
    pub profile: Profile,
}

impl PhysicsParams {
    pub fn validate(&self) -> Result<()> {
        for (what, v) in [
            ("gravity", self.gravity),
            ("restitution", self.restitution),
            ("drag", self.drag),
            ("speed", self.speed),
        ] {
            if !v.is_finite() {
                return Err(Error::InvalidParameter(format!("{what} is not finite")));
            }
        }
        if !(0.0..=1.0).contains(&self.restitution) {
            return Err(Error::OutOfRange {
                what: "restitution",
                value: self.restitution,
                range: "[0, 1]",
            });
        }
        if !(0.0..1.0).contains(&self.drag) {
            return Err(Error::OutOfRange {
                what: "drag",
                value: self.drag,
                range: "[0, 1)",
            });
        }
        if self.speed < 0.0 {
            return Err(Error::OutOfRange {
                what: "speed",
                value: self.speed,
                range: "[0, inf)",
            });
        }
        Ok(())
    }
}

/// Static appearance features of a scene; unit Euclidean norm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SceneCode(pub Vec<f64>);

impl SceneCode {
    /// Normalises `raw` to unit length.
    pub fn from_raw(raw: Vec<f64>) -> Result<Self> {
        let n = crate::vecops::norm(&raw);
        if !(n.is_finite() && n > 0.0) {
            return Err(Error::InvalidParameter(
                "scene code must be finite and nonzero".into(),
            ));
        }
        Ok(Self(raw.into_iter().map(|x| x / n).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// A data vector laid out as `[appearance | positions]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectorySample {
    pub appearance: Vec<f64>,
    pub positions: Vec<f64>,
}

impl TrajectorySample {
    pub fn from_flat(flat: &[f64], scene_dim: usize) -> Result<Self> {
        if flat.len() < scene_dim {
            return Err(Error::DimensionMismatch {
                expected: scene_dim,
                got: flat.len(),
            });
        }
        let (a, p) = flat.split_at(scene_dim);
        Ok(Self {
            appearance: a.to_vec(),
            positions: p.to_vec(),
        })
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.extend_from_slice(&self.appearance);
        v.extend_from_slice(&self.positions);
        v
    }

    pub fn dim(&self) -> usize {
        self.appearance.len() + self.positions.len()
    }
}
