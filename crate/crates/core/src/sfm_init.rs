//! Stochastic stand-in for a learned structure-from-motion front end.
//!
//! Poses are ground truth perturbed with camera-center noise whose RMSE is
//! rescaled to match measured per-blur-level error statistics, plus small
//! rotation noise. Point clouds are jittered samples of Gaussian means.

use std::io::Write;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::liegroup::{so3_exp, SE3Pose};
use crate::scene::SceneModel;

/// Rotation noise per axis at blur level 3, in degrees; scales linearly with
/// the level.
pub const ROTATION_NOISE_DEG_AT_3: f64 = 0.5;

/// `(level, rmse, mean, median, std, max)` in meters.
const TABLE: [(u32, [f64; 5]); 5] = [
    (3, [0.18, 0.16, 0.13, 0.09, 0.35]),
    (5, [0.32, 0.27, 0.20, 0.18, 0.65]),
    (7, [0.40, 0.36, 0.29, 0.17, 0.75]),
    (9, [0.61, 0.49, 0.36, 0.36, 1.43]),
    (11, [0.72, 0.52, 0.35, 0.50, 2.24]),
];

/// Mean translation error reported for poses estimated from event-deblurred
/// frames; anchors the sharp end of the interpolated profile.
pub const SHARP_MEAN_ERROR: f64 = 0.0862;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseProfile {
    /// Blur level; fractional for interpolated profiles.
    pub blur_level: f64,
    pub rmse: f64,
    pub mean: f64,
    pub median: f64,
    pub std: f64,
    pub max: f64,
    /// Per-axis rotation noise in radians.
    pub rotation_sigma: f64,
}

impl NoiseProfile {
    pub fn zero() -> Self {
        Self {
            blur_level: 1.0,
            rmse: 0.0,
            mean: 0.0,
            median: 0.0,
            std: 0.0,
            max: 0.0,
            rotation_sigma: 0.0,
        }
    }

    pub fn for_blur_level(level: u32) -> Result<Self> {
        let (_, s) = TABLE.iter().find(|(l, _)| *l == level).ok_or(Error::UnknownBlurLevel(level))?;
        Ok(Self::from_stats(level as f64, *s))
    }

    fn from_stats(level: f64, s: [f64; 5]) -> Self {
        Self {
            blur_level: level,
            rmse: s[0],
            mean: s[1],
            median: s[2],
            std: s[3],
            max: s[4],
            rotation_sigma: (ROTATION_NOISE_DEG_AT_3 * level / 3.0).to_radians(),
        }
    }

    /// Piecewise-linear interpolation over levels `1, 3, 5, ..., 11`, clamped
    /// at both ends. Level 1 is the blur-3 row rescaled so its mean equals
    /// [`SHARP_MEAN_ERROR`].
    pub fn from_effective_level(level: f64) -> Self {
        let sharp_scale = SHARP_MEAN_ERROR / TABLE[0].1[1];
        let mut knots: Vec<(f64, [f64; 5])> = vec![(1.0, TABLE[0].1.map(|v| v * sharp_scale))];
        knots.extend(TABLE.iter().map(|(l, s)| (*l as f64, *s)));
        let level = level.clamp(1.0, 11.0);
        let i = knots.iter().rposition(|(l, _)| *l <= level).unwrap().min(knots.len() - 2);
        let (l0, s0) = knots[i];
        let (l1, s1) = knots[i + 1];
        let w = (level - l0) / (l1 - l0);
        Self::from_stats(level, std::array::from_fn(|k| s0[k] + w * (s1[k] - s0[k])))
    }
}

/// Moves every camera center by zero-mean Gaussian noise rescaled so the
/// realized RMSE equals `profile.rmse`, and rotates each camera by
/// `exp(omega)` with `omega ~ N(0, rotation_sigma^2 I)`.
pub fn perturb_poses(gt: &[SE3Pose], profile: &NoiseProfile, seed: u64) -> Result<Vec<SE3Pose>> {
    if gt.is_empty() {
        return Err(Error::InvalidConfig("cannot perturb an empty pose list".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal3 = |rng: &mut ChaCha8Rng| {
        Vector3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        )
    };
    let offsets: Vec<Vector3<f64>> = gt.iter().map(|_| normal3(&mut rng)).collect();
    let rotations: Vec<Vector3<f64>> = gt.iter().map(|_| normal3(&mut rng) * profile.rotation_sigma).collect();
    let rms = (offsets.iter().map(|o| o.norm_squared()).sum::<f64>() / gt.len() as f64).sqrt();
    let scale = if rms > 0.0 { profile.rmse / rms } else { 0.0 };
    Ok(gt
        .iter()
        .zip(offsets.iter().zip(&rotations))
        .map(|(pose, (off, rot))| {
            if profile.rmse == 0.0 && profile.rotation_sigma == 0.0 {
                return *pose;
            }
            let center = pose.camera_center() + off * scale;
            let r = so3_exp(rot) * pose.rotation();
            SE3Pose::new(r, -(r * center)).expect("rotation product stays orthonormal").renormalized()
        })
        .collect())
}

/// Opacity-weighted samples of Gaussian means with isotropic jitter. When
/// `count` equals the scene size and all opacities match, every mean is
/// returned once in order.
pub fn sample_pointcloud(scene: &SceneModel, count: usize, jitter_sigma: f64, seed: u64) -> Result<Vec<Vector3<f64>>> {
    if scene.is_empty() {
        return Err(Error::EmptyScene);
    }
    if count == 0 {
        return Err(Error::InvalidConfig("point count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opacities: Vec<f64> = scene.gaussians.iter().map(|g| g.opacity()).collect();
    let uniform = opacities.windows(2).all(|w| w[0] == w[1]);
    let picks: Vec<usize> = if uniform && count == scene.len() {
        (0..count).collect()
    } else {
        let dist = WeightedIndex::new(&opacities).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        (0..count).map(|_| dist.sample(&mut rng)).collect()
    };
    Ok(picks
        .into_iter()
        .map(|i| {
            let jitter = if jitter_sigma > 0.0 {
                Vector3::new(
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                ) * jitter_sigma
            } else {
                Vector3::zeros()
            };
            scene.gaussians[i].mu + jitter
        })
        .collect())
}

/// Point cloud as ASCII PLY.
pub fn write_pointcloud<W: Write>(mut out: W, points: &[Vector3<f64>]) -> std::io::Result<()> {
    writeln!(out, "ply\nformat ascii 1.0\nelement vertex {}", points.len())?;
    writeln!(out, "property double x\nproperty double y\nproperty double z\nend_header")?;
    for p in points {
        writeln!(out, "{} {} {}", p.x, p.y, p.z)?;
    }
    Ok(())
}

pub fn read_pointcloud<R: std::io::BufRead>(input: R) -> Result<Vec<Vector3<f64>>> {
    let mut lines = input.lines().enumerate();
    let mut expected = None;
    for (i, line) in lines.by_ref() {
        let line = line.map_err(|e| Error::parse(i + 1, e.to_string()))?;
        if let Some(n) = line.strip_prefix("element vertex ") {
            expected = Some(n.trim().parse::<usize>().map_err(|_| Error::parse(i + 1, "bad vertex count"))?);
        }
        if line.trim() == "end_header" {
            break;
        }
    }
    let expected = expected.ok_or_else(|| Error::parse(0, "missing vertex count"))?;
    let mut points = Vec::with_capacity(expected);
    for (i, line) in lines {
        let line = line.map_err(|e| Error::parse(i + 1, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::parse(i + 1, "bad coordinate"))?;
        if v.len() != 3 || !v.iter().all(|c| c.is_finite()) {
            return Err(Error::parse(i + 1, "expected three finite coordinates"));
        }
        points.push(Vector3::new(v[0], v[1], v[2]));
    }
    if points.len() != expected {
        return Err(Error::Corrupt(format!("expected {expected} points, found {}", points.len())));
    }
    Ok(points)
}
