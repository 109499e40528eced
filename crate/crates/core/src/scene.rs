//! Gaussian scene representation, camera model and projection.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Quaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::binio::{LeReader, LeWriter};
use crate::error::{Error, Result};
use crate::liegroup::{quaternion_to_matrix, SE3Pose};

/// Gaussians closer to the camera plane than this are culled.
pub const Z_NEAR: f64 = 0.01;

/// Isotropic screen-space dilation added to every projected covariance (px^2).
pub const COV2D_DILATION: f64 = 0.3;

pub const SCENE_MAGIC: &[u8; 4] = b"GSPL";
pub const SCENE_VERSION: u32 = 1;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// One anisotropic Gaussian. Scales live in the log domain and opacity in the
/// logit domain so unconstrained updates keep both valid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gaussian3D {
    pub mu: Vector3<f64>,
    /// Rotation as a unit quaternion `(w, x, y, z)`.
    pub q: Quaternion<f64>,
    pub log_scale: Vector3<f64>,
    pub opacity_logit: f64,
    /// Linear RGB in `[0, 1]`.
    pub color: Vector3<f64>,
}

impl Default for Gaussian3D {
    fn default() -> Self {
        Self {
            mu: Vector3::zeros(),
            q: Quaternion::identity(),
            log_scale: Vector3::zeros(),
            opacity_logit: 0.0,
            color: Vector3::repeat(0.5),
        }
    }
}

impl Gaussian3D {
    pub fn new(
        mu: Vector3<f64>,
        q: Quaternion<f64>,
        log_scale: Vector3<f64>,
        opacity_logit: f64,
        color: Vector3<f64>,
    ) -> Self {
        let mut g = Self {
            mu,
            q,
            log_scale,
            opacity_logit,
            color,
        };
        g.renormalize();
        g
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn scales(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quaternion_to_matrix(&self.q)
    }

    pub fn renormalize(&mut self) {
        let n = self.q.norm();
        if n > 0.0 && n.is_finite() {
            self.q /= n;
        } else {
            self.q = Quaternion::identity();
        }
    }

    pub fn is_finite(&self) -> bool {
        self.mu.iter().all(|v| v.is_finite())
            && self.q.coords.iter().all(|v| v.is_finite())
            && self.log_scale.iter().all(|v| v.is_finite())
            && self.opacity_logit.is_finite()
            && self.color.iter().all(|v| v.is_finite())
    }
}

/// `Sigma = R S S^T R^T` with `S = diag(exp(log_scale))`.
pub fn covariance3d(g: &Gaussian3D) -> Matrix3<f64> {
    let m = g.rotation_matrix() * Matrix3::from_diagonal(&g.scales());
    m * m.transpose()
}

/// Unnormalized density `exp(-1/2 (x - mu)^T Sigma^-1 (x - mu))`.
pub fn evaluate_density(g: &Gaussian3D, x: &Vector3<f64>) -> f64 {
    // Sigma^-1 = R S^-2 R^T, so the Mahalanobis form is a scaled norm in the local frame.
    let local = g.rotation_matrix().transpose() * (x - g.mu);
    let inv_s = g.log_scale.map(|l| (-l).exp());
    let m = local.component_mul(&inv_s);
    (-0.5 * m.norm_squared()).exp()
}

/// Pinhole intrinsics plus resolution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "camera focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidConfig("camera resolution must be at least 1x1".into()));
        }
        Ok(())
    }

    /// Pixel coordinates of a camera-frame point. Pixel `(i, j)` has its
    /// center at `(i, j)`.
    pub fn project_point(&self, p: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    /// Jacobian of [`Camera::project_point`] at a camera-frame point.
    pub fn projection_jacobian(&self, p: &Vector3<f64>) -> Matrix2x3<f64> {
        let iz = 1.0 / p.z;
        let iz2 = iz * iz;
        Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * p.x * iz2,
            0.0,
            self.fy * iz,
            -self.fy * p.y * iz2,
        )
    }
}

/// Screen-space footprint of a Gaussian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub mean2d: Vector2<f64>,
    /// Includes the [`COV2D_DILATION`] term.
    pub cov2d: Matrix2<f64>,
    pub depth: f64,
    pub cam_point: Vector3<f64>,
    pub jacobian: Matrix2x3<f64>,
    /// `R_c Sigma R_c^T`.
    pub cov_cam: Matrix3<f64>,
}

/// Projects a Gaussian through a world-to-camera pose. The covariance uses
/// the rotation only: `J R_c Sigma R_c^T J^T`.
pub fn project(g: &Gaussian3D, pose: &SE3Pose, cam: &Camera) -> Result<Projection> {
    let p = pose.transform_point(&g.mu);
    if !(p.z > Z_NEAR) {
        return Err(Error::BehindCamera { depth: p.z });
    }
    let r = pose.rotation();
    let cov_cam = r * covariance3d(g) * r.transpose();
    let jacobian = cam.projection_jacobian(&p);
    let cov2d = jacobian * cov_cam * jacobian.transpose() + Matrix2::identity() * COV2D_DILATION;
    Ok(Projection {
        mean2d: cam.project_point(&p),
        cov2d,
        depth: p.z,
        cam_point: p,
        jacobian,
        cov_cam,
    })
}

/// Gaussians plus a hard capacity.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneModel {
    pub gaussians: Vec<Gaussian3D>,
    capacity: usize,
}

impl SceneModel {
    pub fn new(capacity: usize) -> Self {
        Self {
            gaussians: Vec::new(),
            capacity,
        }
    }

    pub fn from_gaussians(gaussians: Vec<Gaussian3D>, capacity: usize) -> Result<Self> {
        if gaussians.len() > capacity {
            return Err(Error::CapacityExceeded { capacity });
        }
        Ok(Self {
            gaussians,
            capacity,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Capacity can only grow.
    pub fn set_capacity(&mut self, capacity: usize) -> Result<()> {
        if capacity < self.gaussians.len() {
            return Err(Error::CapacityExceeded { capacity });
        }
        self.capacity = capacity;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn push(&mut self, g: Gaussian3D) -> Result<()> {
        if self.gaussians.len() >= self.capacity {
            return Err(Error::CapacityExceeded {
                capacity: self.capacity,
            });
        }
        self.gaussians.push(g);
        Ok(())
    }
}

fn fmt_vec(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ")
}

/// Text scene format: a `version` line, a `capacity` line, then one
/// `gaussian mu .. q .. log_scale .. opacity_logit .. color ..` record per
/// line. Floats use shortest round-trip formatting.
pub fn write_scene_text<W: Write>(mut out: W, scene: &SceneModel) -> std::io::Result<()> {
    writeln!(out, "# gaussian scene")?;
    writeln!(out, "version {SCENE_VERSION}")?;
    writeln!(out, "capacity {}", scene.capacity)?;
    for g in &scene.gaussians {
        writeln!(
            out,
            "gaussian mu {} q {} log_scale {} opacity_logit {} color {}",
            fmt_vec(g.mu.as_slice()),
            fmt_vec(&[g.q.w, g.q.i, g.q.j, g.q.k]),
            fmt_vec(g.log_scale.as_slice()),
            fmt_vec(&[g.opacity_logit]),
            fmt_vec(g.color.as_slice()),
        )?;
    }
    Ok(())
}

fn parse_gaussian(line: usize, fields: &[&str]) -> Result<Gaussian3D> {
    const LAYOUT: [(&str, usize); 5] = [
        ("mu", 3),
        ("q", 4),
        ("log_scale", 3),
        ("opacity_logit", 1),
        ("color", 3),
    ];
    let mut values = Vec::with_capacity(14);
    let mut pos = 0;
    for (name, n) in LAYOUT {
        if fields.get(pos) != Some(&name) {
            return Err(Error::parse(line, format!("expected field '{name}'")));
        }
        pos += 1;
        for _ in 0..n {
            let tok = fields
                .get(pos)
                .ok_or_else(|| Error::parse(line, format!("missing value for '{name}'")))?;
            let v: f64 = tok
                .parse()
                .map_err(|_| Error::parse(line, format!("bad number '{tok}' in '{name}'")))?;
            if !v.is_finite() {
                return Err(Error::parse(line, format!("non-finite value in '{name}'")));
            }
            values.push(v);
            pos += 1;
        }
    }
    if pos != fields.len() {
        return Err(Error::parse(line, "unexpected trailing fields"));
    }
    Ok(Gaussian3D {
        mu: Vector3::new(values[0], values[1], values[2]),
        q: Quaternion::new(values[3], values[4], values[5], values[6]),
        log_scale: Vector3::new(values[7], values[8], values[9]),
        opacity_logit: values[10],
        color: Vector3::new(values[11], values[12], values[13]),
    })
}

pub fn read_scene_text<R: BufRead>(input: R) -> Result<SceneModel> {
    let mut version = None;
    let mut capacity = None;
    let mut gaussians = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::parse(lineno, e.to_string()))?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.first() {
            None => continue,
            Some(f) if f.starts_with('#') => continue,
            Some(&"version") => {
                let v: u32 = fields
                    .get(1)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::parse(lineno, "bad version line"))?;
                if v != SCENE_VERSION {
                    return Err(Error::VersionMismatch {
                        found: v,
                        expected: SCENE_VERSION,
                    });
                }
                version = Some(v);
            }
            Some(&"capacity") => {
                capacity = Some(
                    fields
                        .get(1)
                        .and_then(|s| s.parse::<usize>().ok())
                        .ok_or_else(|| Error::parse(lineno, "bad capacity line"))?,
                );
            }
            Some(&"gaussian") => {
                if version.is_none() {
                    return Err(Error::parse(lineno, "record before version line"));
                }
                gaussians.push(parse_gaussian(lineno, &fields[1..])?);
            }
            Some(other) => return Err(Error::parse(lineno, format!("unknown record '{other}'"))),
        }
    }
    if version.is_none() {
        return Err(Error::parse(0, "missing version line"));
    }
    let capacity = capacity.unwrap_or(gaussians.len());
    SceneModel::from_gaussians(gaussians, capacity)
}

pub fn write_scene_binary<W: Write>(out: W, scene: &SceneModel) -> std::io::Result<()> {
    let mut w = LeWriter::new(out);
    w.bytes(SCENE_MAGIC)?;
    w.u32(SCENE_VERSION)?;
    w.u64(scene.capacity as u64)?;
    w.u64(scene.gaussians.len() as u64)?;
    for g in &scene.gaussians {
        write_gaussian(&mut w, g)?;
    }
    Ok(())
}

pub(crate) fn write_gaussian<W: Write>(w: &mut LeWriter<W>, g: &Gaussian3D) -> std::io::Result<()> {
    w.f64s(g.mu.as_slice())?;
    w.f64s(&[g.q.w, g.q.i, g.q.j, g.q.k])?;
    w.f64s(g.log_scale.as_slice())?;
    w.f64(g.opacity_logit)?;
    w.f64s(g.color.as_slice())
}

pub(crate) fn read_gaussian<R: Read>(r: &mut LeReader<R>) -> Result<Gaussian3D> {
    let v = r.f64s::<14>()?;
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Corrupt("non-finite Gaussian parameter".into()));
    }
    Ok(Gaussian3D {
        mu: Vector3::new(v[0], v[1], v[2]),
        q: Quaternion::new(v[3], v[4], v[5], v[6]),
        log_scale: Vector3::new(v[7], v[8], v[9]),
        opacity_logit: v[10],
        color: Vector3::new(v[11], v[12], v[13]),
    })
}

pub fn read_scene_binary<R: Read>(input: R) -> Result<SceneModel> {
    let mut r = LeReader::new(input);
    if &r.bytes::<4>()? != SCENE_MAGIC {
        return Err(Error::Corrupt("missing GSPL magic".into()));
    }
    let version = r.u32()?;
    if version != SCENE_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: SCENE_VERSION,
        });
    }
    let capacity = r.len(1 << 32)?;
    let count = r.len(capacity as u64)?;
    let gaussians = (0..count)
        .map(|_| read_gaussian(&mut r))
        .collect::<Result<Vec<_>>>()?;
    r.expect_eof()?;
    SceneModel::from_gaussians(gaussians, capacity)
}

/// Writes binary when the extension is `.gspl`, text otherwise.
pub fn save_scene(path: &Path, scene: &SceneModel) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let res = if path.extension().is_some_and(|e| e == "gspl") {
        write_scene_binary(&mut out, scene)
    } else {
        write_scene_text(&mut out, scene)
    };
    res.and_then(|_| out.flush()).map_err(|e| Error::io(path, e))
}

/// Detects the format from the magic header.
pub fn load_scene(path: &Path) -> Result<SceneModel> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(SCENE_MAGIC) {
        read_scene_binary(&bytes[..])
    } else {
        read_scene_text(BufReader::new(&bytes[..]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::liegroup::{se3_exp, Twist};
    use approx::assert_abs_diff_eq;
    use nalgebra::{SymmetricEigen, UnitQuaternion};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;
    use std::f64::consts::{FRAC_PI_2, LN_2};

    fn random_gaussian(rng: &mut ChaCha8Rng) -> Gaussian3D {
        Gaussian3D::new(
            Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
            Quaternion::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ),
            Vector3::new(rng.random_range(-1.5..0.5), rng.random_range(-1.5..0.5), rng.random_range(-1.5..0.5)),
            rng.random_range(-3.0..3.0),
            Vector3::new(rng.random(), rng.random(), rng.random()),
        )
    }

    #[test]
    fn covariance_examples() {
        let g = Gaussian3D::default();
        assert_abs_diff_eq!(covariance3d(&g), Matrix3::identity(), epsilon = 1e-15);
        let g = Gaussian3D {
            log_scale: Vector3::new(LN_2, 0.0, 0.0),
            ..Default::default()
        };
        assert_abs_diff_eq!(covariance3d(&g), Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0)), epsilon = 1e-14);
        let q = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), FRAC_PI_2).into_inner();
        let g = Gaussian3D { q, ..g };
        // Independent oracle: explicit R S S^T R^T with hand-written matrices.
        let r = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let s = Matrix3::from_diagonal(&Vector3::new(2.0, 1.0, 1.0));
        let oracle = r * s * s.transpose() * r.transpose();
        assert_abs_diff_eq!(oracle, Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 1.0)), epsilon = 1e-15);
        assert_abs_diff_eq!(covariance3d(&g), oracle, epsilon = 1e-14);
    }

    #[test]
    fn covariance_eigenvalues_are_squared_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let g = random_gaussian(&mut rng);
            let mut eig: Vec<f64> = SymmetricEigen::new(covariance3d(&g)).eigenvalues.iter().copied().collect();
            let mut expected: Vec<f64> = g.log_scale.iter().map(|l| (2.0 * l).exp()).collect();
            eig.sort_by(f64::total_cmp);
            expected.sort_by(f64::total_cmp);
            for (a, b) in eig.iter().zip(&expected) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn project_examples() {
        let cam = Camera::new(100.0, 100.0, 32.0, 32.0, 64, 64).unwrap();
        let g = Gaussian3D {
            mu: Vector3::new(0.0, 0.0, 1.0),
            ..Default::default()
        };
        let p = project(&g, &SE3Pose::identity(), &cam).unwrap();
        assert_abs_diff_eq!(p.mean2d, Vector2::new(32.0, 32.0), epsilon = 1e-12);

        let g = Gaussian3D {
            mu: Vector3::new(0.0, 0.0, 2.0),
            ..Default::default()
        };
        let p = project(&g, &SE3Pose::identity(), &cam).unwrap();
        // Oracle: J = [[fx/z, 0, -fx x/z^2], [0, fy/z, -fy y/z^2]] at x = y = 0.
        let j = Matrix2x3::new(50.0, 0.0, 0.0, 0.0, 50.0, 0.0);
        let oracle = j * j.transpose() + Matrix2::identity() * 0.3;
        assert_abs_diff_eq!(oracle, Matrix2::identity() * 2500.3, epsilon = 1e-9);
        assert_abs_diff_eq!(p.cov2d, oracle, epsilon = 1e-9);

        let g = Gaussian3D {
            mu: Vector3::new(0.0, 0.0, -1.0),
            ..Default::default()
        };
        assert!(matches!(project(&g, &SE3Pose::identity(), &cam), Err(Error::BehindCamera { .. })));
    }

    #[test]
    fn projection_is_equivariant_under_optical_axis_roll() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cam = Camera::new(80.0, 80.0, 0.0, 0.0, 64, 64).unwrap();
        let roll = se3_exp(&Twist::from_slice(&[0.0, 0.0, 0.0, 0.0, 0.0, FRAC_PI_2]));
        for _ in 0..50 {
            let mut g = random_gaussian(&mut rng);
            g.mu.z += 4.0;
            let a = project(&g, &SE3Pose::identity(), &cam).unwrap();
            let b = project(&g, &roll, &cam).unwrap();
            // A 90 degree roll maps image (u, v) to (-v, u), so cov entries permute.
            assert_abs_diff_eq!(b.cov2d[(0, 0)], a.cov2d[(1, 1)], epsilon = 1e-6);
            assert_abs_diff_eq!(b.cov2d[(1, 1)], a.cov2d[(0, 0)], epsilon = 1e-6);
            assert_abs_diff_eq!(b.cov2d[(0, 1)], -a.cov2d[(0, 1)], epsilon = 1e-6);
            assert_abs_diff_eq!(b.mean2d, Vector2::new(-a.mean2d.y, a.mean2d.x), epsilon = 1e-9);
        }
    }

    #[test]
    fn density_examples() {
        let g = Gaussian3D::default();
        assert_eq!(evaluate_density(&g, &g.mu), 1.0);
        assert_abs_diff_eq!(evaluate_density(&g, &Vector3::new(1.0, 0.0, 0.0)), (-0.5f64).exp(), epsilon = 1e-15);
        let g = Gaussian3D {
            log_scale: Vector3::new(LN_2, 0.0, 0.0),
            ..Default::default()
        };
        assert_abs_diff_eq!(evaluate_density(&g, &Vector3::new(2.0, 0.0, 0.0)), (-0.5f64).exp(), epsilon = 1e-15);
    }

    /// Monte Carlo oracle: importance-sample from a wide isotropic normal and
    /// compare the integral with (2 pi)^{3/2} |Sigma|^{1/2}.
    #[test]
    fn density_integral_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..5 {
            let g = random_gaussian(&mut rng);
            let sigma = covariance3d(&g);
            let expected = (2.0 * std::f64::consts::PI).powf(1.5) * sigma.determinant().sqrt();
            let spread = g.scales().amax() * 1.5;
            let n = 200_000;
            let norm = (2.0 * std::f64::consts::PI * spread * spread).powf(1.5);
            let mut acc = 0.0;
            for _ in 0..n {
                let z = Vector3::new(
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                );
                let pdf = (-0.5 * z.norm_squared()).exp() / norm;
                acc += evaluate_density(&g, &(g.mu + z * spread)) / pdf;
            }
            let estimate = acc / n as f64;
            assert!((estimate - expected).abs() / expected < 0.02, "{estimate} vs {expected}");
        }
    }

    #[test]
    fn scene_text_and_binary_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let scene = SceneModel::from_gaussians((0..17).map(|_| random_gaussian(&mut rng)).collect(), 40).unwrap();
        let mut text = Vec::new();
        write_scene_text(&mut text, &scene).unwrap();
        assert_eq!(read_scene_text(&text[..]).unwrap(), scene);
        let mut bin = Vec::new();
        write_scene_binary(&mut bin, &scene).unwrap();
        assert_eq!(read_scene_binary(&bin[..]).unwrap(), scene);

        let empty = SceneModel::new(5);
        let mut text = Vec::new();
        write_scene_text(&mut text, &empty).unwrap();
        assert_eq!(read_scene_text(&text[..]).unwrap(), empty);
    }

    #[test]
    fn scene_files_reject_bad_input() {
        let nan = "version 1\ncapacity 2\ngaussian mu NaN 0 0 q 1 0 0 0 log_scale 0 0 0 opacity_logit 0 color 0 0 0\n";
        assert!(matches!(read_scene_text(nan.as_bytes()), Err(Error::Parse { .. })));
        let wrong = "version 7\n";
        assert!(matches!(read_scene_text(wrong.as_bytes()), Err(Error::VersionMismatch { found: 7, .. })));
        let mut bin = Vec::new();
        write_scene_binary(&mut bin, &SceneModel::new(3)).unwrap();
        bin[4] = 9;
        assert!(matches!(read_scene_binary(&bin[..]), Err(Error::VersionMismatch { .. })));
        assert!(matches!(read_scene_binary(&b"GSPL\x01"[..]), Err(Error::Corrupt(_))));
    }

    #[test]
    fn capacity_is_enforced() {
        let mut scene = SceneModel::new(1);
        scene.push(Gaussian3D::default()).unwrap();
        assert!(matches!(scene.push(Gaussian3D::default()), Err(Error::CapacityExceeded { .. })));
        assert!(scene.set_capacity(0).is_err());
        scene.set_capacity(4).unwrap();
        scene.push(Gaussian3D::default()).unwrap();
    }
}
