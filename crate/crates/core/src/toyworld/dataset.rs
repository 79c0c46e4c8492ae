use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{simulate, PhysicsParams, Profile, SceneCode, TrajectorySample, WorldConfig};
use crate::error::{Error, Result};

/// Inclusive sampling ranges for each continuous physics axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AxisRanges {
    pub gravity: [f64; 2],
    pub restitution: [f64; 2],
    pub drag: [f64; 2],
    pub speed: [f64; 2],
}

impl Default for AxisRanges {
    fn default() -> Self {
        Self {
            gravity: [-2.0, 2.0],
            restitution: [0.0, 1.0],
            drag: [0.0, 0.05],
            speed: [0.25, 1.0],
        }
    }
}

impl AxisRanges {
    pub fn validate(&self) -> Result<()> {
        for (name, [lo, hi]) in self.named() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::InvalidParameter(format!(
                    "axis range for {name} must satisfy lo < hi, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }

    pub fn named(&self) -> [(&'static str, [f64; 2]); 4] {
        [
            ("gravity", self.gravity),
            ("restitution", self.restitution),
            ("drag", self.drag),
            ("speed", self.speed),
        ]
    }
}

/// How records are drawn.
///
/// Every scene in the pool owns, per axis, a window of relative width
/// `coupling` placed at an evenly spaced offset. A record draws its scene
/// uniformly and each axis uniformly inside that scene's window (wrapping
/// around the range). Because the offsets tile the range, every axis stays
/// exactly uniform over the dataset while scenes and physics covary.
/// `coupling = 1` makes physics independent of the scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_scenes: usize,
    pub scene_pool_seed: u64,
    pub coupling: f64,
    pub ranges: AxisRanges,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_scenes: 32,
            scene_pool_seed: 0,
            coupling: 0.5,
            ranges: AxisRanges::default(),
        }
    }
}

/// One line of a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub scene: SceneCode,
    pub params: PhysicsParams,
    pub traj: Vec<f64>,
}

impl DatasetRecord {
    pub fn sample(&self, scene_dim: usize) -> Result<TrajectorySample> {
        TrajectorySample::from_flat(&self.traj, scene_dim)
    }
}

/// The fixed pool of unit-norm scene codes plus per-axis window offsets.
pub struct ScenePool {
    pub scenes: Vec<SceneCode>,
    /// `offsets[s][a]` in [0, 1) for axes gravity, restitution, drag, speed, profile.
    offsets: Vec<[f64; 5]>,
}

pub fn scene_pool(cfg: &DatasetConfig, scene_dim: usize) -> Result<ScenePool> {
    if cfg.n_scenes == 0 {
        return Err(Error::InvalidParameter("n_scenes must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.scene_pool_seed);
    let scenes = (0..cfg.n_scenes)
        .map(|_| {
            let raw: Vec<f64> = (0..scene_dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            SceneCode::from_raw(raw)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = cfg.n_scenes;
    let mut offsets = vec![[0.0; 5]; n];
    for axis in 0..5 {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for (slot, &s) in order.iter().enumerate() {
            offsets[s][axis] = slot as f64 / n as f64;
        }
    }
    Ok(ScenePool { scenes, offsets })
}

fn record_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Generates `n` records; record `i` depends only on `(seed, i)`.
pub fn make_dataset(
    n: usize,
    seed: u64,
    cfg: &DatasetConfig,
    world: &WorldConfig,
) -> Result<Vec<DatasetRecord>> {
    if n == 0 {
        return Err(Error::InvalidParameter("dataset size must be at least 1".into()));
    }
    cfg.ranges.validate()?;
    if !(cfg.coupling > 0.0 && cfg.coupling <= 1.0) {
        return Err(Error::OutOfRange {
            what: "coupling",
            value: cfg.coupling,
            range: "(0, 1]",
        });
    }
    let pool = scene_pool(cfg, world.scene_dim)?;
    (0..n)
        .map(|i| {
            let mut rng = record_rng(seed, i);
            let s = rng.random_range(0..cfg.n_scenes);
            let off = pool.offsets[s];
            let mut unit = |axis: usize| -> f64 {
                let u: f64 = rng.random();
                (off[axis] + cfg.coupling * u).fract()
            };
            let lerp = |[lo, hi]: [f64; 2], u: f64| lo + (hi - lo) * u;
            let r = &cfg.ranges;
            let params = PhysicsParams {
                gravity: lerp(r.gravity, unit(0)),
                restitution: lerp(r.restitution, unit(1)),
                drag: lerp(r.drag, unit(2)),
                speed: lerp(r.speed, unit(3)),
                profile: if unit(4) < 0.5 {
                    Profile::Sudden
                } else {
                    Profile::Gradual
                },
            };
            let scene = pool.scenes[s].clone();
            let traj = simulate(&params, &scene, world)?.to_flat();
            Ok(DatasetRecord {
                scene,
                params,
                traj,
            })
        })
        .collect()
}

pub fn write_dataset(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    write_jsonl(path, records)
}

pub fn read_dataset(path: &Path) -> Result<Vec<DatasetRecord>> {
    read_jsonl(path)
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub(crate) fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|source| Error::Record { line: i + 1, source })?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn world() -> WorldConfig {
        WorldConfig::default()
    }

    #[test]
    fn deterministic_bytes() {
        let dir = tempdir();
        let dir = dir.path();
        let cfg = DatasetConfig::default();
        let a = dir.join("a.jsonl");
        let b = dir.join("b.jsonl");
        write_dataset(&a, &make_dataset(1, 42, &cfg, &world()).unwrap()).unwrap();
        write_dataset(&b, &make_dataset(1, 42, &cfg, &world()).unwrap()).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn records_round_trip() {
        let dir = tempdir();
        let path = dir.path().join("d.jsonl");
        let recs = make_dataset(512, 7, &DatasetConfig::default(), &world()).unwrap();
        write_dataset(&path, &recs).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 512);
        let back = read_dataset(&path).unwrap();
        assert_eq!(back, recs);
        for r in &back {
            assert_eq!(r.traj.len(), world().data_dim());
            assert!((crate::vecops::norm(&r.scene.0) - 1.0).abs() < 1e-12);
            assert_eq!(&r.traj[..8], r.scene.as_slice());
        }
    }

    #[test]
    fn record_depends_only_on_seed_and_index() {
        let cfg = DatasetConfig::default();
        let short = make_dataset(10, 3, &cfg, &world()).unwrap();
        let long = make_dataset(50, 3, &cfg, &world()).unwrap();
        assert_eq!(short[..], long[..10]);
    }

    fn chi2_p(values: &[f64], lo: f64, hi: f64, bins: usize) -> f64 {
        let mut counts = vec![0usize; bins];
        for &v in values {
            let b = (((v - lo) / (hi - lo)) * bins as f64) as usize;
            counts[b.min(bins - 1)] += 1;
        }
        let expected = values.len() as f64 / bins as f64;
        let stat: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        1.0 - ChiSquared::new((bins - 1) as f64).unwrap().cdf(stat)
    }

    #[test]
    fn axes_are_uniform() {
        let cfg = DatasetConfig::default();
        let recs = make_dataset(512, 2024, &cfg, &world()).unwrap();
        let r = &cfg.ranges;
        let pick = |f: fn(&PhysicsParams) -> f64| recs.iter().map(|x| f(&x.params)).collect::<Vec<_>>();
        let checks = [
            ("gravity", pick(|p| p.gravity), r.gravity),
            ("restitution", pick(|p| p.restitution), r.restitution),
            ("drag", pick(|p| p.drag), r.drag),
            ("speed", pick(|p| p.speed), r.speed),
        ];
        for (name, vals, [lo, hi]) in checks {
            let p = chi2_p(&vals, lo, hi, 8);
            assert!(p > 0.01, "{name}: p = {p}");
        }
        let sudden = recs.iter().filter(|x| x.params.profile == Profile::Sudden).count() as f64;
        let stat = (sudden - 256.0).powi(2) / 256.0 * 2.0;
        let p = 1.0 - ChiSquared::new(1.0).unwrap().cdf(stat);
        assert!(p > 0.01, "profile: p = {p}");
    }

    #[test]
    fn rejects_empty_and_unwritable() {
        assert!(make_dataset(0, 1, &DatasetConfig::default(), &world()).is_err());
        let recs = make_dataset(1, 1, &DatasetConfig::default(), &world()).unwrap();
        assert!(write_dataset(Path::new("/nonexistent-dir/x/y.jsonl"), &recs).is_err());
    }

    fn tempdir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }
}
