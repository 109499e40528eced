//! Camera motion during the exposure: Bézier product-of-exponentials curves
//! plus the linear and cubic B-spline baselines.
//!
//! Every representation reports, alongside the interpolated pose, the 6x6
//! Jacobians mapping a left perturbation of each control pose to the left
//! perturbation of the interpolated pose.

use std::io::{BufRead, Write};

use nalgebra::{Matrix6, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use super::{se3_exp, se3_left_jacobian, se3_left_jacobian_inv, se3_log, SE3Pose, Twist};
use crate::error::{Error, Result};

/// Normalized-time slack accepted at the ends of the exposure window.
const U_SLACK: f64 = 1e-12;

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Bernstein basis polynomial `C(M, j) (1-u)^(M-j) u^j`.
pub fn bernstein(degree: usize, index: usize, u: f64) -> Result<f64> {
    if index > degree {
        return Err(Error::IndexOutOfRange { index, degree });
    }
    Ok(binomial(degree, index) * (1.0 - u).powi((degree - index) as i32) * u.powi(index as i32))
}

fn check_exposure(exposure: f64) -> Result<()> {
    if !(exposure > 0.0) || !exposure.is_finite() {
        return Err(Error::InvalidTrajectory(format!(
            "exposure must be positive and finite, got {exposure}"
        )));
    }
    Ok(())
}

fn check_u(u: f64) -> Result<f64> {
    if !(-U_SLACK..=1.0 + U_SLACK).contains(&u) {
        return Err(Error::TimeOutOfRange {
            time: u,
            exposure: 1.0,
        });
    }
    Ok(u.clamp(0.0, 1.0))
}

fn time_to_u(t: f64, exposure: f64) -> Result<f64> {
    check_u(t / exposure).map_err(|_| Error::TimeOutOfRange { time: t, exposure })
}

/// Degree-M Bézier curve in SE(3) evaluated as the ordered product
/// `prod_j exp(b_j(u) log T_j)`, left to right in control index order.
#[derive(Clone, Debug, PartialEq)]
pub struct BezierTrajectory {
    controls: Vec<SE3Pose>,
    logs: Vec<Twist>,
    exposure: f64,
}

impl BezierTrajectory {
    pub fn new(controls: Vec<SE3Pose>, exposure: f64) -> Result<Self> {
        if controls.len() < 2 {
            return Err(Error::InvalidTrajectory(format!(
                "a Bézier trajectory needs at least 2 control points, got {}",
                controls.len()
            )));
        }
        check_exposure(exposure)?;
        let logs = controls.iter().map(se3_log).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            controls,
            logs,
            exposure,
        })
    }

    pub fn degree(&self) -> usize {
        self.controls.len() - 1
    }

    pub fn controls(&self) -> &[SE3Pose] {
        &self.controls
    }

    pub fn control_twists(&self) -> &[Twist] {
        &self.logs
    }

    pub fn exposure(&self) -> f64 {
        self.exposure
    }

    /// Pose at absolute time `t` in `[0, exposure]`.
    pub fn pose(&self, t: f64) -> Result<SE3Pose> {
        self.pose_at(time_to_u(t, self.exposure)?)
    }

    /// Pose at normalized time `u` in `[0, 1]`.
    pub fn pose_at(&self, u: f64) -> Result<SE3Pose> {
        let u = check_u(u)?;
        let m = self.degree();
        let mut pose = SE3Pose::identity();
        for (j, xi) in self.logs.iter().enumerate() {
            let w = bernstein(m, j, u)?;
            pose = pose * se3_exp(&xi.scaled(w));
        }
        Ok(pose)
    }

    /// Pose plus `d(delta_pose)/d(xi_j)` for each control twist `xi_j = log T_j`.
    pub fn twist_jacobians(&self, u: f64) -> Result<(SE3Pose, Vec<Matrix6<f64>>)> {
        let u = check_u(u)?;
        let m = self.degree();
        let mut prefix = SE3Pose::identity();
        let mut jacs = Vec::with_capacity(self.logs.len());
        for (j, xi) in self.logs.iter().enumerate() {
            let w = bernstein(m, j, u)?;
            let scaled = xi.scaled(w);
            jacs.push(prefix.adjoint() * se3_left_jacobian(&scaled) * w);
            prefix = prefix * se3_exp(&scaled);
        }
        Ok((prefix, jacs))
    }

    /// Pose plus Jacobians with respect to left perturbations of each control pose.
    pub fn pose_and_jacobians(&self, u: f64) -> Result<(SE3Pose, Vec<Matrix6<f64>>)> {
        let (pose, mut jacs) = self.twist_jacobians(u)?;
        for (jac, xi) in jacs.iter_mut().zip(&self.logs) {
            *jac *= se3_left_jacobian_inv(xi);
        }
        Ok((pose, jacs))
    }
}

/// One factor `exp(w * log(T_a^-1 T_b))` of a relative-increment chain.
struct Increment {
    from: usize,
    to: usize,
    weight: f64,
}

/// Evaluates `T_base * prod_k exp(w_k log(T_from^-1 T_to))` and its
/// left-perturbation Jacobians with respect to every control pose.
fn relative_chain(
    controls: &[SE3Pose],
    rels: &[Twist],
    base: usize,
    increments: &[Increment],
) -> (SE3Pose, Vec<Matrix6<f64>>) {
    let mut jacs = vec![Matrix6::zeros(); controls.len()];
    jacs[base] += Matrix6::identity();
    let mut prefix = controls[base];
    for inc in increments {
        // Increments always connect neighbours, so `rels[from]` is log(T_from^-1 T_from+1).
        debug_assert_eq!(inc.to, inc.from + 1);
        let xi = &rels[inc.from];
        let scaled = xi.scaled(inc.weight);
        let m = prefix.adjoint()
            * se3_left_jacobian(&scaled)
            * inc.weight
            * se3_left_jacobian_inv(xi)
            * controls[inc.from].inverse().adjoint();
        jacs[inc.to] += m;
        jacs[inc.from] -= m;
        prefix = prefix * se3_exp(&scaled);
    }
    (prefix, jacs)
}

fn neighbour_logs(controls: &[SE3Pose]) -> Result<Vec<Twist>> {
    controls
        .windows(2)
        .map(|w| se3_log(&(w[0].inverse() * w[1])))
        .collect()
}

/// Geodesic interpolation `T_start exp(u log(T_start^-1 T_end))`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearTrajectory {
    controls: Vec<SE3Pose>,
    rels: Vec<Twist>,
    exposure: f64,
}

impl LinearTrajectory {
    pub fn new(start: SE3Pose, end: SE3Pose, exposure: f64) -> Result<Self> {
        check_exposure(exposure)?;
        let controls = vec![start, end];
        let rels = neighbour_logs(&controls)?;
        Ok(Self {
            controls,
            rels,
            exposure,
        })
    }

    pub fn controls(&self) -> &[SE3Pose] {
        &self.controls
    }

    pub fn exposure(&self) -> f64 {
        self.exposure
    }

    pub fn pose_at(&self, u: f64) -> Result<SE3Pose> {
        Ok(self.pose_and_jacobians(u)?.0)
    }

    pub fn pose_and_jacobians(&self, u: f64) -> Result<(SE3Pose, Vec<Matrix6<f64>>)> {
        let u = check_u(u)?;
        Ok(relative_chain(
            &self.controls,
            &self.rels,
            0,
            &[Increment {
                from: 0,
                to: 1,
                weight: u,
            }],
        ))
    }
}

/// Uniform cubic B-spline in cumulative form over `N >= 4` control poses.
/// The normalized exposure `[0, 1]` spans all `N - 3` segments.
#[derive(Clone, Debug, PartialEq)]
pub struct SplineTrajectory {
    controls: Vec<SE3Pose>,
    rels: Vec<Twist>,
    exposure: f64,
}

impl SplineTrajectory {
    pub fn new(controls: Vec<SE3Pose>, exposure: f64) -> Result<Self> {
        if controls.len() < 4 {
            return Err(Error::InvalidTrajectory(format!(
                "a cubic spline needs at least 4 control points, got {}",
                controls.len()
            )));
        }
        check_exposure(exposure)?;
        let rels = neighbour_logs(&controls)?;
        Ok(Self {
            controls,
            rels,
            exposure,
        })
    }

    pub fn controls(&self) -> &[SE3Pose] {
        &self.controls
    }

    pub fn exposure(&self) -> f64 {
        self.exposure
    }

    pub fn pose_at(&self, u: f64) -> Result<SE3Pose> {
        Ok(self.pose_and_jacobians(u)?.0)
    }

    pub fn pose_and_jacobians(&self, u: f64) -> Result<(SE3Pose, Vec<Matrix6<f64>>)> {
        let u = check_u(u)?;
        let segments = self.controls.len() - 3;
        let x = u * segments as f64;
        let seg = (x.floor() as usize).min(segments - 1);
        let s = x - seg as f64;
        let s2 = s * s;
        let s3 = s2 * s;
        let cumulative = [
            (5.0 + 3.0 * s - 3.0 * s2 + s3) / 6.0,
            (1.0 + 3.0 * s + 3.0 * s2 - 2.0 * s3) / 6.0,
            s3 / 6.0,
        ];
        let increments: Vec<Increment> = (0..3)
            .map(|k| Increment {
                from: seg + k,
                to: seg + k + 1,
                weight: cumulative[k],
            })
            .collect();
        Ok(relative_chain(&self.controls, &self.rels, seg, &increments))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TrajectoryKind {
    #[default]
    Bezier,
    Linear,
    Spline,
}

impl TrajectoryKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrajectoryKind::Bezier => "bezier",
            TrajectoryKind::Linear => "linear",
            TrajectoryKind::Spline => "spline",
        }
    }

    pub fn tag(&self) -> u8 {
        match self {
            TrajectoryKind::Bezier => 0,
            TrajectoryKind::Linear => 1,
            TrajectoryKind::Spline => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(TrajectoryKind::Bezier),
            1 => Some(TrajectoryKind::Linear),
            2 => Some(TrajectoryKind::Spline),
            _ => None,
        }
    }
}

impl std::str::FromStr for TrajectoryKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bezier" => Ok(TrajectoryKind::Bezier),
            "linear" => Ok(TrajectoryKind::Linear),
            "spline" => Ok(TrajectoryKind::Spline),
            other => Err(Error::InvalidConfig(format!("unknown trajectory kind '{other}'"))),
        }
    }
}

/// Any of the supported exposure-trajectory representations.
#[derive(Clone, Debug, PartialEq)]
pub enum Trajectory {
    Bezier(BezierTrajectory),
    Linear(LinearTrajectory),
    Spline(SplineTrajectory),
}

impl Trajectory {
    pub fn from_controls(kind: TrajectoryKind, controls: Vec<SE3Pose>, exposure: f64) -> Result<Self> {
        match kind {
            TrajectoryKind::Bezier => Ok(Trajectory::Bezier(BezierTrajectory::new(controls, exposure)?)),
            TrajectoryKind::Linear => {
                if controls.len() != 2 {
                    return Err(Error::InvalidTrajectory(format!(
                        "a linear trajectory has exactly 2 control points, got {}",
                        controls.len()
                    )));
                }
                Ok(Trajectory::Linear(LinearTrajectory::new(controls[0], controls[1], exposure)?))
            }
            TrajectoryKind::Spline => Ok(Trajectory::Spline(SplineTrajectory::new(controls, exposure)?)),
        }
    }

    /// Zero-motion trajectory with every control point at `pose`.
    pub fn constant(kind: TrajectoryKind, pose: SE3Pose, n_controls: usize, exposure: f64) -> Result<Self> {
        Self::from_controls(kind, vec![pose; n_controls], exposure)
    }

    pub fn kind(&self) -> TrajectoryKind {
        match self {
            Trajectory::Bezier(_) => TrajectoryKind::Bezier,
            Trajectory::Linear(_) => TrajectoryKind::Linear,
            Trajectory::Spline(_) => TrajectoryKind::Spline,
        }
    }

    pub fn controls(&self) -> &[SE3Pose] {
        match self {
            Trajectory::Bezier(t) => t.controls(),
            Trajectory::Linear(t) => t.controls(),
            Trajectory::Spline(t) => t.controls(),
        }
    }

    pub fn exposure(&self) -> f64 {
        match self {
            Trajectory::Bezier(t) => t.exposure(),
            Trajectory::Linear(t) => t.exposure(),
            Trajectory::Spline(t) => t.exposure(),
        }
    }

    pub fn pose_at(&self, u: f64) -> Result<SE3Pose> {
        match self {
            Trajectory::Bezier(t) => t.pose_at(u),
            Trajectory::Linear(t) => t.pose_at(u),
            Trajectory::Spline(t) => t.pose_at(u),
        }
    }

    pub fn pose(&self, t: f64) -> Result<SE3Pose> {
        self.pose_at(time_to_u(t, self.exposure())?)
    }

    pub fn pose_and_jacobians(&self, u: f64) -> Result<(SE3Pose, Vec<Matrix6<f64>>)> {
        match self {
            Trajectory::Bezier(t) => t.pose_and_jacobians(u),
            Trajectory::Linear(t) => t.pose_and_jacobians(u),
            Trajectory::Spline(t) => t.pose_and_jacobians(u),
        }
    }

    /// Same representation and exposure with new control poses.
    pub fn with_controls(&self, controls: Vec<SE3Pose>) -> Result<Self> {
        Self::from_controls(self.kind(), controls, self.exposure())
    }

    /// Uniform sample positions `u_i = i / (n - 1)` (`u_0 = 0` when `n == 1`).
    pub fn sample_positions(n: usize) -> Vec<f64> {
        match n {
            0 => Vec::new(),
            1 => vec![0.0],
            _ => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
        }
    }
}

/// Writes `timestamp tx ty tz qx qy qz qw` lines. Poses are given
/// world-to-camera and written camera-to-world, as TUM tools expect.
pub fn write_tum<W: Write>(mut out: W, poses: &[(f64, SE3Pose)]) -> std::io::Result<()> {
    for (t, pose) in poses {
        let c2w = pose.inverse();
        let p = c2w.translation();
        let q = c2w.quaternion();
        writeln!(
            out,
            "{:.16e} {:.16e} {:.16e} {:.16e} {:.16e} {:.16e} {:.16e} {:.16e}",
            t, p.x, p.y, p.z, q.i, q.j, q.k, q.w
        )?;
    }
    Ok(())
}

/// Reads TUM lines back into `(timestamp, world-to-camera pose)` pairs.
/// Blank lines and `#` comments are skipped.
pub fn read_tum<R: BufRead>(input: R) -> Result<Vec<(f64, SE3Pose)>> {
    let mut poses = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::parse(lineno + 1, e.to_string()))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let values = trimmed
            .split_whitespace()
            .map(|tok| tok.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::parse(lineno + 1, e.to_string()))?;
        if values.len() != 8 {
            return Err(Error::parse(
                lineno + 1,
                format!("expected 8 fields, found {}", values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::parse(lineno + 1, "non-finite value"));
        }
        let q = Quaternion::new(values[7], values[4], values[5], values[6]);
        if q.norm() < 1e-12 {
            return Err(Error::parse(lineno + 1, "zero quaternion"));
        }
        let c2w = SE3Pose::from_quaternion(
            &UnitQuaternion::from_quaternion(q),
            Vector3::new(values[1], values[2], values[3]),
        );
        poses.push((values[0], c2w.inverse()));
    }
    Ok(poses)
}
