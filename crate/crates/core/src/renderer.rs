//! Tile-based alpha-compositing rasterizer with an analytic backward pass.
//!
//! Pixel `(i, j)` is sampled at its center `(i, j)`. Each Gaussian covers the
//! axis-aligned bounding box of its 3-sigma screen ellipse; outside that box
//! its contribution and gradients are exactly zero. Per pixel, Gaussians are
//! composited front to back in `(depth, index)` order until transmittance
//! would drop below [`T_MIN`].

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3, Vector4, Vector6};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imagebuf::ImageBuffer;
use crate::liegroup::{hat, SE3Pose, Trajectory};
use crate::scene::{project, Camera, Gaussian3D, SceneModel};

pub const TILE: usize = 16;
pub const ALPHA_MAX: f64 = 0.999;
pub const T_MIN: f64 = 1e-4;
pub const SUPPORT_SIGMAS: f64 = 3.0;

/// Gradient of a scalar loss with respect to one Gaussian's parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GaussianGrad {
    pub mu: Vector3<f64>,
    /// Ordered `(w, x, y, z)`, taken through quaternion normalization.
    pub q: Vector4<f64>,
    pub log_scale: Vector3<f64>,
    pub opacity_logit: f64,
    pub color: Vector3<f64>,
}

impl GaussianGrad {
    pub fn add_assign(&mut self, o: &Self) {
        self.mu += o.mu;
        self.q += o.q;
        self.log_scale += o.log_scale;
        self.opacity_logit += o.opacity_logit;
        self.color += o.color;
    }

    pub fn is_finite(&self) -> bool {
        self.mu.iter().chain(self.q.iter()).chain(self.log_scale.iter()).chain(self.color.iter()).all(|v| v.is_finite())
            && self.opacity_logit.is_finite()
    }
}

/// Per-Gaussian gradients plus one left-perturbation twist gradient
/// `[rho, omega]` per rendered pose.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RenderGradients {
    pub gaussians: Vec<GaussianGrad>,
    pub poses: Vec<Vector6<f64>>,
}

impl RenderGradients {
    pub fn zeros(n_gaussians: usize, n_poses: usize) -> Self {
        Self {
            gaussians: vec![GaussianGrad::default(); n_gaussians],
            poses: vec![Vector6::zeros(); n_poses],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.gaussians.iter().all(GaussianGrad::is_finite) && self.poses.iter().all(|p| p.iter().all(|v| v.is_finite()))
    }
}

/// A projected Gaussian ready for rasterization.
#[derive(Clone, Copy, Debug)]
struct Splat {
    index: usize,
    depth: f64,
    mean: Vector2<f64>,
    /// Inverse screen covariance `[[a, b], [b, c]]`.
    conic: [f64; 3],
    opacity: f64,
    color: Vector3<f64>,
    /// Inclusive pixel bounds `x0, x1, y0, y1`.
    bounds: [i64; 4],
}

impl Splat {
    #[inline]
    fn covers(&self, x: i64, y: i64) -> bool {
        x >= self.bounds[0] && x <= self.bounds[1] && y >= self.bounds[2] && y <= self.bounds[3]
    }

    #[inline]
    fn power(&self, px: f64, py: f64) -> (f64, f64, f64) {
        let dx = px - self.mean.x;
        let dy = py - self.mean.y;
        let [a, b, c] = self.conic;
        (0.5 * (a * dx * dx + c * dy * dy) + b * dx * dy, dx, dy)
    }
}

fn prepare(scene: &SceneModel, pose: &SE3Pose, cam: &Camera) -> Vec<Splat> {
    let mut splats: Vec<Splat> = scene
        .gaussians
        .iter()
        .enumerate()
        .filter_map(|(index, g)| {
            let p = project(g, pose, cam).ok()?;
            let cov = p.cov2d;
            let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
            if !(det > 0.0) || !p.mean2d.iter().all(|v| v.is_finite()) {
                return None;
            }
            let rx = SUPPORT_SIGMAS * cov[(0, 0)].sqrt();
            let ry = SUPPORT_SIGMAS * cov[(1, 1)].sqrt();
            let bounds = [
                (p.mean2d.x - rx).ceil().max(-1.0) as i64,
                (p.mean2d.x + rx).floor().min(cam.width as f64) as i64,
                (p.mean2d.y - ry).ceil().max(-1.0) as i64,
                (p.mean2d.y + ry).floor().min(cam.height as f64) as i64,
            ];
            if bounds[0] > bounds[1] || bounds[2] > bounds[3] {
                return None;
            }
            Some(Splat {
                index,
                depth: p.depth,
                mean: p.mean2d,
                conic: [cov[(1, 1)] / det, -cov[(0, 1)] / det, cov[(0, 0)] / det],
                opacity: g.opacity(),
                color: g.color,
                bounds,
            })
        })
        .collect();
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
    splats
}

struct TileGrid {
    tiles_x: usize,
    tiles_y: usize,
    /// Per tile, indices into the sorted splat list (so still depth-ordered).
    lists: Vec<Vec<usize>>,
}

fn bin_tiles(splats: &[Splat], cam: &Camera) -> TileGrid {
    let tiles_x = cam.width.div_ceil(TILE);
    let tiles_y = cam.height.div_ceil(TILE);
    let mut lists = vec![Vec::new(); tiles_x * tiles_y];
    for (k, s) in splats.iter().enumerate() {
        let clamp_x = |v: i64| (v.max(0) as usize / TILE).min(tiles_x.saturating_sub(1));
        let clamp_y = |v: i64| (v.max(0) as usize / TILE).min(tiles_y.saturating_sub(1));
        if s.bounds[1] < 0 || s.bounds[3] < 0 || s.bounds[0] >= cam.width as i64 || s.bounds[2] >= cam.height as i64 {
            continue;
        }
        for ty in clamp_y(s.bounds[2])..=clamp_y(s.bounds[3]) {
            for tx in clamp_x(s.bounds[0])..=clamp_x(s.bounds[1]) {
                lists[ty * tiles_x + tx].push(k);
            }
        }
    }
    TileGrid {
        tiles_x,
        tiles_y,
        lists,
    }
}

fn tile_pixels(t: usize, grid: &TileGrid, cam: &Camera) -> impl Iterator<Item = (usize, usize)> {
    let (tx, ty) = (t % grid.tiles_x, t / grid.tiles_x);
    let x0 = tx * TILE;
    let y0 = ty * TILE;
    let x1 = (x0 + TILE).min(cam.width);
    let y1 = (y0 + TILE).min(cam.height);
    (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (x, y)))
}

/// Front-to-back compositing of one pixel. Calls `visit(k, alpha, t_before)`
/// for every contributing splat and returns `(color, final transmittance)`.
#[inline]
fn composite_pixel(
    splats: &[Splat],
    list: &[usize],
    x: usize,
    y: usize,
    mut visit: impl FnMut(usize, f64, f64),
) -> (Vector3<f64>, f64) {
    let mut t = 1.0;
    let mut color = Vector3::zeros();
    let (xi, yi) = (x as i64, y as i64);
    for &k in list {
        let s = &splats[k];
        if !s.covers(xi, yi) {
            continue;
        }
        let (power, _, _) = s.power(x as f64, y as f64);
        let alpha = (s.opacity * (-power).exp()).min(ALPHA_MAX);
        if alpha <= 0.0 {
            continue;
        }
        let next = t * (1.0 - alpha);
        if next < T_MIN {
            break;
        }
        color += s.color * (alpha * t);
        visit(k, alpha, t);
        t = next;
    }
    (color, t)
}

/// Sharp render from a world-to-camera pose.
pub fn render(scene: &SceneModel, pose: &SE3Pose, cam: &Camera) -> ImageBuffer {
    let splats = prepare(scene, pose, cam);
    let grid = bin_tiles(&splats, cam);
    let tiles: Vec<Vec<(usize, usize, Vector3<f64>)>> = (0..grid.tiles_x * grid.tiles_y)
        .into_par_iter()
        .map(|t| {
            tile_pixels(t, &grid, cam)
                .map(|(x, y)| (x, y, composite_pixel(&splats, &grid.lists[t], x, y, |_, _, _| {}).0))
                .collect()
        })
        .collect();
    let mut img = ImageBuffer::new(cam.width, cam.height);
    for (x, y, c) in tiles.into_iter().flatten() {
        img.set(x, y, [c.x, c.y, c.z]);
    }
    img
}

/// Accumulated opacity `1 - T_final` per pixel, row-major.
pub fn render_alpha(scene: &SceneModel, pose: &SE3Pose, cam: &Camera) -> Vec<f64> {
    let splats = prepare(scene, pose, cam);
    let grid = bin_tiles(&splats, cam);
    let mut out = vec![0.0; cam.width * cam.height];
    for t in 0..grid.tiles_x * grid.tiles_y {
        for (x, y) in tile_pixels(t, &grid, cam) {
            out[y * cam.width + x] = 1.0 - composite_pixel(&splats, &grid.lists[t], x, y, |_, _, _| {}).1;
        }
    }
    out
}

/// Back-to-front "over" compositing of the same contributor list; used as an
/// independent check of the front-to-back loop.
pub fn render_back_to_front(scene: &SceneModel, pose: &SE3Pose, cam: &Camera) -> ImageBuffer {
    let splats = prepare(scene, pose, cam);
    let grid = bin_tiles(&splats, cam);
    let mut img = ImageBuffer::new(cam.width, cam.height);
    for t in 0..grid.tiles_x * grid.tiles_y {
        for (x, y) in tile_pixels(t, &grid, cam) {
            let mut used = Vec::new();
            composite_pixel(&splats, &grid.lists[t], x, y, |k, a, _| used.push((k, a)));
            let mut c = Vector3::zeros();
            for &(k, a) in used.iter().rev() {
                c = splats[k].color * a + c * (1.0 - a);
            }
            img.set(x, y, [c.x, c.y, c.z]);
        }
    }
    img
}

/// Mean of `n` sharp renders at uniformly spaced trajectory samples, plus the
/// poses used.
pub fn render_blurred(
    scene: &SceneModel,
    traj: &Trajectory,
    cam: &Camera,
    n: usize,
) -> Result<(ImageBuffer, Vec<SE3Pose>)> {
    if n == 0 {
        return Err(Error::InvalidConfig("virtual camera count must be at least 1".into()));
    }
    let poses = Trajectory::sample_positions(n)
        .into_iter()
        .map(|u| traj.pose_at(u))
        .collect::<Result<Vec<_>>>()?;
    Ok((average_renders(scene, &poses, cam), poses))
}

/// Pixel-wise mean of sharp renders at the given poses.
pub fn average_renders(scene: &SceneModel, poses: &[SE3Pose], cam: &Camera) -> ImageBuffer {
    let mut acc = ImageBuffer::new(cam.width, cam.height);
    for p in poses {
        acc.add_assign_scaled(&render(scene, p, cam), 1.0)
            .expect("renders share the camera shape");
    }
    acc.scaled(1.0 / poses.len().max(1) as f64)
}

/// Screen-space gradient of one splat accumulated over a tile.
#[derive(Clone, Copy, Default)]
struct SplatGrad {
    mean: Vector2<f64>,
    /// d/d(a, b, c) of the conic.
    conic: [f64; 3],
    opacity: f64,
    color: Vector3<f64>,
}

fn tile_backward(
    splats: &[Splat],
    list: &[usize],
    pixels: impl Iterator<Item = (usize, usize)>,
    grad_image: &ImageBuffer,
    scale: f64,
) -> Vec<SplatGrad> {
    let mut grads = vec![SplatGrad::default(); list.len()];
    let mut used: Vec<(usize, f64, f64)> = Vec::new();
    for (x, y) in pixels {
        let g = grad_image.get(x, y);
        let dl_dc = Vector3::new(g[0], g[1], g[2]) * scale;
        if dl_dc == Vector3::zeros() {
            continue;
        }
        used.clear();
        composite_pixel(splats, list, x, y, |k, a, t| used.push((k, a, t)));
        // Position of each contributor in the tile list.
        let mut slot = 0;
        let mut slots: Vec<usize> = Vec::with_capacity(used.len());
        for &(k, _, _) in &used {
            while list[slot] != k {
                slot += 1;
            }
            slots.push(slot);
        }
        let mut behind = Vector3::zeros();
        for (&(k, alpha, t), &slot) in used.iter().zip(&slots).rev() {
            let s = &splats[k];
            let sg = &mut grads[slot];
            sg.color += dl_dc * (alpha * t);
            let dl_dalpha = t * (s.color - behind).dot(&dl_dc);
            behind = s.color * alpha + behind * (1.0 - alpha);
            let raw = s.opacity * (-s.power(x as f64, y as f64).0).exp();
            if raw >= ALPHA_MAX {
                continue;
            }
            let (_, dx, dy) = s.power(x as f64, y as f64);
            let gauss = alpha / s.opacity;
            sg.opacity += dl_dalpha * gauss;
            let dl_dpower = -alpha * dl_dalpha;
            let [a, b, c] = s.conic;
            sg.mean.x -= dl_dpower * (a * dx + b * dy);
            sg.mean.y -= dl_dpower * (b * dx + c * dy);
            sg.conic[0] += dl_dpower * 0.5 * dx * dx;
            sg.conic[1] += dl_dpower * dx * dy;
            sg.conic[2] += dl_dpower * 0.5 * dy * dy;
        }
    }
    grads
}

/// d/dq of `L(R(q / |q|))` given `G = dL/dR`.
pub(crate) fn quaternion_gradient(q: &nalgebra::Quaternion<f64>, g: &Matrix3<f64>) -> Vector4<f64> {
    let norm = q.norm();
    let (w, x, y, z) = (q.w / norm, q.i / norm, q.j / norm, q.k / norm);
    let dw = 2.0 * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)] + x * g[(2, 1)]);
    let dx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)] + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let dy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)] - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let dz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)] - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    let unit = Vector4::new(w, x, y, z);
    let d = Vector4::new(dw, dx, dy, dz);
    (d - unit * unit.dot(&d)) / norm
}

/// Chains screen-space gradients of one Gaussian in one view to its 3D
/// parameters, and returns the pose twist contribution.
fn chain_to_3d(g: &Gaussian3D, pose: &SE3Pose, cam: &Camera, sg: &SplatGrad, out: &mut GaussianGrad) -> Vector6<f64> {
    let p = project(g, pose, cam).expect("splat was projected in the forward pass");
    let cov = p.cov2d;
    let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
    let conic = Matrix2::new(cov[(1, 1)], -cov[(0, 1)], -cov[(1, 0)], cov[(0, 0)]) / det;
    let g_conic = Matrix2::new(sg.conic[0], 0.5 * sg.conic[1], 0.5 * sg.conic[1], sg.conic[2]);
    let g_cov2d = -conic * g_conic * conic;
    let j = p.jacobian;
    let c = p.cov_cam;
    let g_cov_cam = j.transpose() * g_cov2d * j;
    let g_j = 2.0 * g_cov2d * j * c;

    let (px, py, pz) = (p.cam_point.x, p.cam_point.y, p.cam_point.z);
    let iz2 = 1.0 / (pz * pz);
    let iz3 = iz2 / pz;
    let mut g_p = j.transpose() * sg.mean;
    g_p.x += -cam.fx * iz2 * g_j[(0, 2)];
    g_p.y += -cam.fy * iz2 * g_j[(1, 2)];
    g_p.z += -cam.fx * iz2 * g_j[(0, 0)] + 2.0 * cam.fx * px * iz3 * g_j[(0, 2)] - cam.fy * iz2 * g_j[(1, 1)]
        + 2.0 * cam.fy * py * iz3 * g_j[(1, 2)];

    let r = pose.rotation();
    out.mu += r.transpose() * g_p;
    out.color += sg.color;
    let o = g.opacity();
    out.opacity_logit += sg.opacity * o * (1.0 - o);

    let g_sigma = r.transpose() * g_cov_cam * r;
    let rg = g.rotation_matrix();
    let s = g.scales();
    let m = rg * Matrix3::from_diagonal(&s);
    let g_m = 2.0 * g_sigma * m;
    let g_s = rg.transpose() * g_m;
    for k in 0..3 {
        out.log_scale[k] += g_s[(k, k)] * s[k];
    }
    let g_rg = g_m * Matrix3::from_diagonal(&s);
    out.q += quaternion_gradient(&g.q, &g_rg);

    // Left perturbation moves the camera-frame point by rho + omega x p and
    // rotates the camera-frame covariance by omega.
    let mut omega = p.cam_point.cross(&g_p);
    for k in 0..3 {
        let e = hat(&Vector3::ith(k, 1.0));
        omega[k] += (g_cov_cam.component_mul(&(e * c - c * e))).sum();
    }
    Vector6::new(g_p.x, g_p.y, g_p.z, omega.x, omega.y, omega.z)
}

/// Gradients of a loss with respect to the scene and every virtual pose,
/// given `dL/dB` for the average `B` of the renders at `poses`.
pub fn render_backward(
    scene: &SceneModel,
    poses: &[SE3Pose],
    cam: &Camera,
    grad_image: &ImageBuffer,
) -> Result<RenderGradients> {
    if grad_image.width() != cam.width || grad_image.height() != cam.height {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", cam.width, cam.height),
            actual: format!("{}x{}", grad_image.width(), grad_image.height()),
        });
    }
    let mut out = RenderGradients::zeros(scene.len(), poses.len());
    if poses.is_empty() {
        return Ok(out);
    }
    let scale = 1.0 / poses.len() as f64;
    for (v, pose) in poses.iter().enumerate() {
        let splats = prepare(scene, pose, cam);
        let grid = bin_tiles(&splats, cam);
        let per_tile: Vec<Vec<SplatGrad>> = (0..grid.tiles_x * grid.tiles_y)
            .into_par_iter()
            .map(|t| tile_backward(&splats, &grid.lists[t], tile_pixels(t, &grid, cam), grad_image, scale))
            .collect();
        // Tile-ordered reduction keeps results independent of thread count.
        let mut screen = vec![SplatGrad::default(); splats.len()];
        for (t, grads) in per_tile.iter().enumerate() {
            for (&k, g) in grid.lists[t].iter().zip(grads) {
                let acc = &mut screen[k];
                acc.mean += g.mean;
                for i in 0..3 {
                    acc.conic[i] += g.conic[i];
                }
                acc.opacity += g.opacity;
                acc.color += g.color;
            }
        }
        for (s, sg) in splats.iter().zip(&screen) {
            let twist = chain_to_3d(&scene.gaussians[s.index], pose, cam, sg, &mut out.gaussians[s.index]);
            out.poses[v] += twist;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::liegroup::{se3_exp, Twist, TrajectoryKind};
    use crate::scene::logit;
    use nalgebra::Quaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn camera(n: usize) -> Camera {
        Camera::new(n as f64, n as f64, (n as f64 - 1.0) / 2.0, (n as f64 - 1.0) / 2.0, n, n).unwrap()
    }

    pub(crate) fn random_scene(rng: &mut ChaCha8Rng, n: usize) -> SceneModel {
        let gs = (0..n)
            .map(|_| {
                Gaussian3D::new(
                    Vector3::new(rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6), rng.random_range(2.5..4.0)),
                    Quaternion::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    ),
                    Vector3::new(
                        rng.random_range(-2.6..-1.6),
                        rng.random_range(-2.6..-1.6),
                        rng.random_range(-2.6..-1.6),
                    ),
                    rng.random_range(-1.0..2.0),
                    Vector3::new(rng.random(), rng.random(), rng.random()),
                )
            })
            .collect();
        SceneModel::from_gaussians(gs, n).unwrap()
    }

    fn blob(z: f64, opacity_logit: f64, color: [f64; 3]) -> Gaussian3D {
        Gaussian3D::new(
            Vector3::new(0.0, 0.0, z),
            Quaternion::identity(),
            Vector3::repeat(-1.0),
            opacity_logit,
            Vector3::from(color),
        )
    }

    #[test]
    fn empty_scene_is_black() {
        let img = render(&SceneModel::new(4), &SE3Pose::identity(), &camera(9));
        assert!(img.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn opaque_center_pixel() {
        let scene = SceneModel::from_gaussians(vec![blob(2.0, 60.0, [1.0, 0.0, 0.0])], 1).unwrap();
        let img = render(&scene, &SE3Pose::identity(), &camera(9));
        assert_eq!(img.get(4, 4), [ALPHA_MAX, 0.0, 0.0]);
    }

    #[test]
    fn two_half_transparent_layers() {
        let scene = SceneModel::from_gaussians(
            vec![blob(2.0, 0.0, [0.0, 0.0, 1.0]), blob(1.0, 0.0, [1.0, 0.0, 0.0])],
            2,
        )
        .unwrap();
        let c = render(&scene, &SE3Pose::identity(), &camera(9)).get(4, 4);
        assert!((c[0] - 0.5).abs() < 1e-15 && (c[2] - 0.25).abs() < 1e-15 && c[1] == 0.0);
    }

    #[test]
    fn accumulated_opacity_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let scene = random_scene(&mut rng, 60);
        for a in render_alpha(&scene, &SE3Pose::identity(), &camera(32)) {
            assert!((0.0..=1.0).contains(&a));
        }
    }

    #[test]
    fn front_to_back_matches_back_to_front() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let scene = random_scene(&mut rng, 80);
        let a = render(&scene, &SE3Pose::identity(), &camera(40));
        let b = render_back_to_front(&scene, &SE3Pose::identity(), &camera(40));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let scene = random_scene(&mut rng, 50);
        let cam = camera(40);
        let pose = se3_exp(&Twist::from_slice(&[0.05, -0.02, 0.1, 0.02, 0.03, -0.01]));
        let grad = ImageBuffer::from_fn(40, 40, |x, y, c| ((x * 3 + y * 7 + c) % 5) as f64 - 2.0);
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| (render(&scene, &pose, &cam), render_backward(&scene, &[pose], &cam, &grad).unwrap()))
        };
        let (a, ga) = run(1);
        let (b, gb) = run(3);
        assert_eq!(a, b);
        assert_eq!(ga, gb);
    }

    #[test]
    fn blurred_render_is_mean_of_renders() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let scene = random_scene(&mut rng, 30);
        let cam = camera(24);
        let start = SE3Pose::identity();
        let end = se3_exp(&Twist::from_slice(&[0.2, 0.0, 0.0, 0.0, 0.0, 0.0]));
        let traj = Trajectory::from_controls(TrajectoryKind::Linear, vec![start, end], 1.0).unwrap();

        let (one, _) = render_blurred(&scene, &traj, &cam, 1).unwrap();
        assert_eq!(one, render(&scene, &start, &cam));

        let (b, poses) = render_blurred(&scene, &traj, &cam, 3).unwrap();
        let renders: Vec<_> = poses.iter().map(|p| render(&scene, p, &cam)).collect();
        for i in 0..b.data().len() {
            let mean = renders.iter().map(|r| r.data()[i]).sum::<f64>() / 3.0;
            assert!((b.data()[i] - mean).abs() < 1e-7);
        }

        let constant = Trajectory::constant(TrajectoryKind::Bezier, end, 4, 1.0).unwrap();
        let sharp = render(&scene, &end, &cam);
        let (b, _) = render_blurred(&scene, &constant, &cam, 7).unwrap();
        for (x, y) in b.data().iter().zip(sharp.data()) {
            assert!((x - y).abs() < 1e-7);
        }
        assert!(render_blurred(&scene, &constant, &cam, 0).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let scene = random_scene(&mut rng, 10);
        let cam = camera(16);
        let g = render_backward(&scene, &[SE3Pose::identity()], &cam, &ImageBuffer::new(16, 16)).unwrap();
        assert_eq!(g, RenderGradients::zeros(10, 1));
        assert!(render_backward(&scene, &[SE3Pose::identity()], &cam, &ImageBuffer::new(8, 16)).is_err());
    }

    #[test]
    fn color_gradient_equals_alpha() {
        let scene = SceneModel::from_gaussians(vec![blob(2.0, logit(0.6), [0.2, 0.3, 0.4])], 1).unwrap();
        let cam = camera(9);
        let mut up = ImageBuffer::new(9, 9);
        up.set(4, 4, [1.0, 1.0, 1.0]);
        let g = render_backward(&scene, &[SE3Pose::identity()], &cam, &up).unwrap();
        assert!((g.gaussians[0].color - Vector3::repeat(0.6)).norm() < 1e-12);
    }

    fn weighted_loss(scene: &SceneModel, poses: &[SE3Pose], cam: &Camera, w: &ImageBuffer) -> f64 {
        average_renders(scene, poses, cam).data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    }

    fn check(label: &str, analytic: f64, fd: f64) {
        let err = (analytic - fd).abs() / (analytic.abs().max(fd.abs()) + 1e-6);
        assert!(err < 1e-4, "{label}: analytic {analytic} vs fd {fd}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let scene = random_scene(&mut rng, 20);
        let cam = camera(16);
        let poses: Vec<SE3Pose> = (0..2)
            .map(|i| se3_exp(&Twist::from_slice(&[0.03 * i as f64, -0.02, 0.05, 0.01, -0.02 * i as f64, 0.03])))
            .collect();
        let w = ImageBuffer::from_fn(16, 16, |_, _, _| rng.random_range(-1.0..1.0));
        let grads = render_backward(&scene, &poses, &cam, &w).unwrap();
        let h = 1e-5;
        let fd = |f: &dyn Fn(&mut SceneModel, f64)| {
            let mut p = scene.clone();
            f(&mut p, h);
            let mut m = scene.clone();
            f(&mut m, -h);
            (weighted_loss(&p, &poses, &cam, &w) - weighted_loss(&m, &poses, &cam, &w)) / (2.0 * h)
        };
        for i in 0..scene.len() {
            let g = &grads.gaussians[i];
            for k in 0..3 {
                check("mu", g.mu[k], fd(&|s, d| s.gaussians[i].mu[k] += d));
                check("log_scale", g.log_scale[k], fd(&|s, d| s.gaussians[i].log_scale[k] += d));
                check("color", g.color[k], fd(&|s, d| s.gaussians[i].color[k] += d));
            }
            for k in 0..4 {
                check("q", g.q[k], fd(&|s, d| s.gaussians[i].q.coords[(k + 3) % 4] += d));
            }
            check("opacity", g.opacity_logit, fd(&|s, d| s.gaussians[i].opacity_logit += d));
        }
        for (v, pose) in poses.iter().enumerate() {
            for k in 0..6 {
                let eval = |d: f64| {
                    let mut e = [0.0; 6];
                    e[k] = d;
                    let mut ps = poses.clone();
                    ps[v] = se3_exp(&Twist::from_slice(&e)) * *pose;
                    weighted_loss(&scene, &ps, &cam, &w)
                };
                check("pose", grads.poses[v][k], (eval(h) - eval(-h)) / (2.0 * h));
            }
        }
    }
}
