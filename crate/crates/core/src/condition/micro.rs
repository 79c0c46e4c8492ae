use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Condition, ConditionEncoder, NegativeRecord, NegativeRenderer, NegativeSource};
use crate::error::{Error, Result};
use crate::toyworld::{AxisRanges, PhysicsParams};
use crate::vecops;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PerturbationAxis {
    Kinematics,
    Forces,
    Material,
    Interaction,
    Magnitude,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamField {
    Gravity,
    Restitution,
    Drag,
    Speed,
    Profile,
}

impl PerturbationAxis {
    pub const ALL: [PerturbationAxis; 5] = [
        PerturbationAxis::Kinematics,
        PerturbationAxis::Forces,
        PerturbationAxis::Material,
        PerturbationAxis::Interaction,
        PerturbationAxis::Magnitude,
    ];

    /// The single physics field this axis is allowed to edit.
    pub fn field(self) -> ParamField {
        match self {
            PerturbationAxis::Kinematics => ParamField::Profile,
            PerturbationAxis::Forces => ParamField::Gravity,
            PerturbationAxis::Material => ParamField::Drag,
            PerturbationAxis::Interaction => ParamField::Restitution,
            PerturbationAxis::Magnitude => ParamField::Speed,
        }
    }
}

/// Fields whose values differ (bitwise for reals).
pub fn changed_fields(a: &PhysicsParams, b: &PhysicsParams) -> Vec<ParamField> {
    let mut out = Vec::new();
    let diff = |x: f64, y: f64| x.to_bits() != y.to_bits();
    if diff(a.gravity, b.gravity) {
        out.push(ParamField::Gravity);
    }
    if diff(a.restitution, b.restitution) {
        out.push(ParamField::Restitution);
    }
    if diff(a.drag, b.drag) {
        out.push(ParamField::Drag);
    }
    if diff(a.speed, b.speed) {
        out.push(ParamField::Speed);
    }
    if a.profile != b.profile {
        out.push(ParamField::Profile);
    }
    out
}

const MATERIAL_BAND: f64 = 0.2;
const MAGNITUDE_FACTORS: [f64; 2] = [0.25, 4.0];

/// Minimal single-axis edit; the scene is returned untouched.
pub fn perturb_condition<R: Rng + ?Sized>(
    anchor: &Condition,
    axis: PerturbationAxis,
    ranges: &AxisRanges,
    rng: &mut R,
) -> Condition {
    let mut p = anchor.params;
    match axis {
        PerturbationAxis::Kinematics => p.profile = p.profile.flipped(),
        PerturbationAxis::Forces => p.gravity = -p.gravity,
        PerturbationAxis::Material => {
            let [lo, hi] = ranges.drag;
            let band = MATERIAL_BAND * (hi - lo);
            let left = (p.drag - band).clamp(lo, hi) - lo;
            let right = hi - (p.drag + band).clamp(lo, hi);
            let u = rng.random::<f64>() * (left + right);
            p.drag = if u < left { lo + u } else { hi - (u - left) };
        }
        PerturbationAxis::Interaction => {
            p.restitution = if p.restitution > 0.5 {
                0.0
            } else {
                1.0 - 0.5 * rng.random::<f64>()
            };
        }
        PerturbationAxis::Magnitude => {
            let [lo, hi] = ranges.speed;
            let pick = rng.random_range(0..2);
            let scaled = |f: f64| (p.speed * f).clamp(lo, hi);
            let mut s = scaled(MAGNITUDE_FACTORS[pick]);
            if s == p.speed {
                s = scaled(MAGNITUDE_FACTORS[1 - pick]);
            }
            p.speed = s;
        }
    }
    Condition::new(anchor.scene.clone(), p)
}

/// Keeps candidates with cosine >= threshold, best `top_n` first, ties to the
/// lower index. Returns `(candidate index, cosine)`.
pub fn filter_candidates(
    anchor_z: &[f64],
    candidates: &[Vec<f64>],
    threshold: f64,
    top_n: usize,
) -> Vec<(usize, f64)> {
    let mut kept: Vec<(usize, f64)> = candidates
        .iter()
        .enumerate()
        .map(|(i, z)| (i, vecops::cosine(anchor_z, z)))
        .filter(|&(_, c)| c >= threshold)
        .collect();
    kept.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    kept.truncate(top_n);
    kept
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiningConfig {
    pub candidates: usize,
    pub threshold: f64,
    pub top: usize,
    pub seed: u64,
    pub source: NegativeSource,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            candidates: 10,
            threshold: 0.87,
            top: 3,
            seed: 0,
            source: NegativeSource::Model,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::OutOfRange {
                what: "negatives.threshold",
                value: self.threshold,
                range: "(0, 1)",
            });
        }
        if self.candidates == 0 {
            return Err(Error::InvalidParameter("negatives.candidates must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub axis: PerturbationAxis,
    pub condition: Condition,
    pub z: Vec<f64>,
    pub render_seed: u64,
}

/// Candidate perturbations for one anchor, drawn from stream `anchor_id` of
/// the mining seed so anchors are independent of processing order.
pub fn generate_candidates(
    anchor_id: usize,
    anchor: &Condition,
    encoder: &ConditionEncoder,
    ranges: &AxisRanges,
    cfg: &MiningConfig,
) -> Result<Vec<Candidate>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(anchor_id as u64);
    (0..cfg.candidates)
        .map(|_| {
            let axis = PerturbationAxis::ALL[rng.random_range(0..5)];
            let condition = perturb_condition(anchor, axis, ranges, &mut rng);
            let render_seed = rng.random();
            let z = encoder.encode(&condition, None)?.z;
            Ok(Candidate {
                axis,
                condition,
                z,
                render_seed,
            })
        })
        .collect()
}

/// Generates, filters and renders the hard negatives of one anchor.
pub fn mine_anchor(
    anchor_id: usize,
    anchor: &Condition,
    encoder: &ConditionEncoder,
    ranges: &AxisRanges,
    cfg: &MiningConfig,
    renderer: &mut NegativeRenderer<'_>,
) -> Result<Vec<NegativeRecord>> {
    let anchor_z = encoder.encode(anchor, Some(anchor_id))?.z;
    let cands = generate_candidates(anchor_id, anchor, encoder, ranges, cfg)?;
    let zs: Vec<Vec<f64>> = cands.iter().map(|c| c.z.clone()).collect();
    filter_candidates(&anchor_z, &zs, cfg.threshold, cfg.top)
        .into_iter()
        .map(|(i, cosine)| {
            let c = &cands[i];
            let traj = renderer.render(&c.condition, &c.z, c.render_seed)?;
            Ok(NegativeRecord {
                anchor_id,
                axis: c.axis,
                perturbed_params: c.condition.params,
                cosine,
                traj,
                seed: c.render_seed,
            })
        })
        .collect()
}
