//! Joint optimization of Gaussians and per-view exposure trajectories.
//!
//! Each step renders the blurred prediction of a view as the mean of
//! `n_virtual` sharp renders along its trajectory, compares it with the
//! observed blurry frame under `(1 - lambda) L1 + lambda (1 - SSIM)`, and
//! back-propagates to Gaussian parameters and to the trajectory control poses.
//! Gaussians and poses use Adam; poses are updated by left retraction
//! `T <- exp(delta) T`. Means additionally receive opacity-gated Langevin
//! noise, and dead Gaussians are periodically relocated onto live ones.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3, Vector6};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::binio::{LeReader, LeWriter};
use crate::error::{Error, Result};
use crate::imagebuf::ImageBuffer;
use crate::liegroup::{se3_exp, SE3Pose, Trajectory, TrajectoryKind, Twist};
use crate::metrics::{psnr, ssim_with_gradient};
use crate::renderer::{average_renders, render_backward, GaussianGrad};
use crate::scene::{logit, sigmoid, Camera, SceneModel};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GMSK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Gaussian parameter count: mean 3, quaternion 4, log-scale 3, opacity 1, color 3.
const GAUSSIAN_PARAMS: usize = 14;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub n_virtual: usize,
    /// `M + 1` for Bezier curves; linear trajectories always use 2 and
    /// splines at least 4.
    pub control_points: usize,
    pub trajectory: TrajectoryKind,
    pub iterations: usize,
    pub views_per_step: usize,
    pub lambda: f64,
    pub lr_pose: f64,
    pub lr_mu: f64,
    /// Position rate reached at the last iteration (exponential decay).
    pub lr_mu_final: f64,
    pub lr_rotation: f64,
    pub lr_log_scale: f64,
    pub lr_opacity: f64,
    pub lr_color: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub sgld_noise: f64,
    pub n_max: usize,
    /// Relocation period in iterations; 0 disables relocation.
    pub relocate_every: usize,
    pub relocate_opacity_eps: f64,
    /// Relocation stops after this fraction of `iterations`.
    pub relocate_until_fraction: f64,
    /// Gaussians added per relocation as a fraction of the current count,
    /// bounded by `n_max`.
    pub growth_rate: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            n_virtual: 15,
            control_points: 9,
            trajectory: TrajectoryKind::Bezier,
            iterations: 7000,
            views_per_step: 1,
            lambda: 0.2,
            lr_pose: 1e-3,
            lr_mu: 5e-4,
            lr_mu_final: 5e-6,
            lr_rotation: 1e-3,
            lr_log_scale: 5e-3,
            lr_opacity: 5e-2,
            lr_color: 1e-2,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            sgld_noise: 50.0,
            n_max: 1000,
            relocate_every: 100,
            relocate_opacity_eps: 0.005,
            relocate_until_fraction: 0.8,
            growth_rate: 0.05,
        }
    }
}

impl OptimConfig {
    /// Short-run settings for small procedural scenes: 2000 iterations with
    /// a faster pose rate and slower position rate, so trajectories converge
    /// before the scene can absorb pose error.
    pub fn desk() -> Self {
        Self {
            iterations: 2000,
            lr_pose: 1e-2,
            lr_mu: 1e-4,
            lr_mu_final: 1e-6,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_virtual < 1 {
            return bad("n_virtual must be at least 1".into());
        }
        if self.control_points < 2 {
            return bad("control_points must be at least 2".into());
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda {} outside [0, 1]", self.lambda));
        }
        if self.views_per_step < 1 {
            return bad("views_per_step must be at least 1".into());
        }
        let rates = [
            self.lr_pose,
            self.lr_mu,
            self.lr_mu_final,
            self.lr_rotation,
            self.lr_log_scale,
            self.lr_opacity,
            self.lr_color,
            self.sgld_noise,
            self.growth_rate,
        ];
        if rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return bad("learning rates, noise and growth must be finite and nonnegative".into());
        }
        if !(self.adam_eps > 0.0 && (0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2)) {
            return bad("invalid Adam constants".into());
        }
        if !(self.relocate_opacity_eps > 0.0 && self.relocate_opacity_eps < 1.0) {
            return bad("relocate_opacity_eps must lie in (0, 1)".into());
        }
        Ok(())
    }

    /// Number of control poses for the configured representation.
    pub fn controls_for_kind(&self) -> usize {
        match self.trajectory {
            TrajectoryKind::Bezier => self.control_points,
            TrajectoryKind::Linear => 2,
            TrajectoryKind::Spline => self.control_points.max(4),
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    /// Overrides one field from its textual value, e.g. `("lr_pose", "5e-3")`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let updated: Self = set_toml_field(self, key, value)?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }
}

/// Copy of `cfg` with `key` parsed from `value` according to the field's
/// current TOML type.
pub(crate) fn set_toml_field<T: Serialize + DeserializeOwned>(cfg: &T, key: &str, value: &str) -> Result<T> {
    let text = toml::to_string(cfg).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut table: toml::Table = toml::from_str(&text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let current = table
        .get(key)
        .ok_or_else(|| Error::InvalidConfig(format!("unknown config key '{key}'")))?;
    let parsed = match current {
        toml::Value::Integer(_) => value.parse::<i64>().map(toml::Value::Integer).ok(),
        toml::Value::Float(_) => value.parse::<f64>().map(toml::Value::Float).ok(),
        toml::Value::Boolean(_) => value.parse::<bool>().map(toml::Value::Boolean).ok(),
        toml::Value::Array(_) => toml::from_str::<toml::Table>(&format!("v = {value}"))
            .ok()
            .and_then(|mut t| t.remove("v")),
        _ => Some(toml::Value::String(value.to_string())),
    }
    .ok_or_else(|| Error::InvalidConfig(format!("bad value '{value}' for '{key}'")))?;
    table.insert(key.to_string(), parsed);
    let text = toml::to_string(&table).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    toml::from_str(&text).map_err(|e| Error::InvalidConfig(e.to_string()))
}

/// An observed blurry frame: the only image type the loss accepts as a
/// target. Event-deblurred frames have their own type and no conversion.
#[derive(Clone, Debug, PartialEq)]
pub struct BlurTarget {
    image: ImageBuffer,
}

impl BlurTarget {
    pub fn observed(image: ImageBuffer) -> Self {
        Self { image }
    }

    pub fn image(&self) -> &ImageBuffer {
        &self.image
    }
}

/// `(1 - lambda) mean|pred - target| + lambda (1 - SSIM)` and its gradient
/// with respect to `pred`. The L1 subgradient at zero is zero.
pub fn photometric_loss(pred: &ImageBuffer, target: &ImageBuffer, lambda: f64) -> Result<(f64, ImageBuffer)> {
    pred.check_shape(target)?;
    let n = pred.data().len() as f64;
    let mut grad = ImageBuffer::new(pred.width(), pred.height());
    let mut l1 = 0.0;
    for ((g, p), t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let d = p - t;
        l1 += d.abs();
        *g = if d > 0.0 {
            (1.0 - lambda) / n
        } else if d < 0.0 {
            -(1.0 - lambda) / n
        } else {
            0.0
        };
    }
    let mut loss = (1.0 - lambda) * l1 / n;
    if lambda > 0.0 {
        let (s, ds) = ssim_with_gradient(pred, target)?;
        loss += lambda * (1.0 - s);
        grad.add_assign_scaled(&ds, -lambda)?;
    }
    Ok((loss, grad))
}

/// Loss of one view and its gradients with respect to every Gaussian and to
/// the left-perturbation twists of the trajectory's control poses.
#[derive(Clone, Debug)]
pub struct ViewGradients {
    pub loss: f64,
    pub prediction: ImageBuffer,
    pub gaussians: Vec<GaussianGrad>,
    pub controls: Vec<Vector6<f64>>,
}

pub fn view_loss_and_gradients(
    scene: &SceneModel,
    traj: &Trajectory,
    target: &BlurTarget,
    cam: &Camera,
    n_virtual: usize,
    lambda: f64,
) -> Result<ViewGradients> {
    let mut poses = Vec::with_capacity(n_virtual);
    let mut jacobians = Vec::with_capacity(n_virtual);
    for u in Trajectory::sample_positions(n_virtual) {
        let (p, j) = traj.pose_and_jacobians(u)?;
        poses.push(p);
        jacobians.push(j);
    }
    let prediction = average_renders(scene, &poses, cam);
    let (loss, dl_db) = photometric_loss(&prediction, target.image(), lambda)?;
    let grads = render_backward(scene, &poses, cam, &dl_db)?;
    let mut controls = vec![Vector6::zeros(); traj.controls().len()];
    for (g, jac) in grads.poses.iter().zip(&jacobians) {
        for (c, j) in controls.iter_mut().zip(jac) {
            *c += j.transpose() * g;
        }
    }
    Ok(ViewGradients {
        loss,
        prediction,
        gaussians: grads.gaussians,
        controls,
    })
}

/// Summary of one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub iteration: u64,
    pub views: Vec<usize>,
    pub loss: f64,
    /// PSNR of the blurred prediction against its target, averaged over views.
    pub psnr: f64,
    pub relocation: Option<RelocationReport>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RelocationReport {
    pub relocated: usize,
    pub added: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct Adam6 {
    m: Vector6<f64>,
    v: Vector6<f64>,
}

/// Everything needed to resume training bitwise.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: OptimConfig,
    pub scene: SceneModel,
    pub trajectories: Vec<Trajectory>,
    pub iteration: u64,
    gaussian_m: Vec<[f64; GAUSSIAN_PARAMS]>,
    gaussian_v: Vec<[f64; GAUSSIAN_PARAMS]>,
    pose_moments: Vec<Vec<Adam6>>,
    pose_steps: Vec<u64>,
    rng: ChaCha8Rng,
}

fn pack(g: &GaussianGrad) -> [f64; GAUSSIAN_PARAMS] {
    [
        g.mu.x,
        g.mu.y,
        g.mu.z,
        g.q[0],
        g.q[1],
        g.q[2],
        g.q[3],
        g.log_scale.x,
        g.log_scale.y,
        g.log_scale.z,
        g.opacity_logit,
        g.color.x,
        g.color.y,
        g.color.z,
    ]
}

const GROUPS: [(&str, std::ops::Range<usize>); 5] =
    [("mu", 0..3), ("q", 3..7), ("log_scale", 7..10), ("opacity_logit", 10..11), ("color", 11..14)];

fn nonfinite_report(group: &str, rows: impl Iterator<Item = (usize, Vec<f64>)>) -> Error {
    let bad: Vec<String> = rows
        .filter(|(_, v)| v.iter().any(|x| !x.is_finite()))
        .take(5)
        .map(|(i, v)| format!("#{i} {v:?}"))
        .collect();
    Error::NonFinite {
        group: group.to_string(),
        detail: bad.join("; "),
    }
}

impl TrainState {
    /// Fresh state. Each view's trajectory starts as a constant curve at its
    /// initial pose.
    pub fn new(config: OptimConfig, mut scene: SceneModel, initial_poses: &[SE3Pose], seed: u64) -> Result<Self> {
        config.validate()?;
        if scene.len() > config.n_max {
            return Err(Error::CapacityExceeded { capacity: config.n_max });
        }
        scene.set_capacity(config.n_max)?;
        let n_ctrl = config.controls_for_kind();
        let trajectories = initial_poses
            .iter()
            .map(|p| Trajectory::constant(config.trajectory, *p, n_ctrl, 1.0))
            .collect::<Result<Vec<_>>>()?;
        Self::with_trajectories(config, scene, trajectories, seed)
    }

    pub fn with_trajectories(
        config: OptimConfig,
        mut scene: SceneModel,
        trajectories: Vec<Trajectory>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if scene.capacity() < config.n_max {
            scene.set_capacity(config.n_max)?;
        }
        let n = scene.len();
        Ok(Self {
            gaussian_m: vec![[0.0; GAUSSIAN_PARAMS]; n],
            gaussian_v: vec![[0.0; GAUSSIAN_PARAMS]; n],
            pose_moments: trajectories.iter().map(|t| vec![Adam6::default(); t.controls().len()]).collect(),
            pose_steps: vec![0; trajectories.len()],
            trajectories,
            config,
            scene,
            iteration: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Raises capacity (and `n_max`) for resumed runs.
    pub fn grow_capacity(&mut self, n_max: usize) -> Result<()> {
        if n_max < self.scene.len() {
            return Err(Error::CapacityExceeded { capacity: n_max });
        }
        self.config.n_max = n_max;
        self.scene.set_capacity(n_max)
    }

    fn lr_mu_at(&self, iteration: u64) -> f64 {
        let c = &self.config;
        if c.lr_mu == 0.0 || c.lr_mu_final == 0.0 || c.iterations == 0 {
            return c.lr_mu;
        }
        let s = (iteration as f64 / c.iterations as f64).min(1.0);
        c.lr_mu * (c.lr_mu_final / c.lr_mu).powf(s)
    }

    /// Mid-exposure pose of each view's current trajectory.
    pub fn mid_poses(&self) -> Result<Vec<SE3Pose>> {
        self.trajectories.iter().map(|t| t.pose_at(0.5)).collect()
    }

    /// One iteration on `views_per_step` views drawn without replacement,
    /// followed by relocation when it is due.
    pub fn train_step(&mut self, targets: &[BlurTarget], cam: &Camera) -> Result<StepReport> {
        self.train_step_with(targets, cam, |_, _| {})
    }

    /// [`TrainState::train_step`] that hands the scene before and after any
    /// relocation to `inspect`.
    pub fn train_step_with(
        &mut self,
        targets: &[BlurTarget],
        cam: &Camera,
        mut inspect: impl FnMut(&SceneModel, &SceneModel),
    ) -> Result<StepReport> {
        if targets.len() != self.trajectories.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} targets", self.trajectories.len()),
                actual: format!("{} targets", targets.len()),
            });
        }
        let k = self.config.views_per_step.min(targets.len());
        let mut views: Vec<usize> = sample(&mut self.rng, targets.len(), k).into_vec();
        views.sort_unstable();
        let mut report = self.step_on_views(&views, targets, cam)?;
        if self.relocation_due() {
            let before = self.scene.clone();
            report.relocation = Some(self.mcmc_relocate());
            inspect(&before, &self.scene);
            self.check_finite()?;
        }
        Ok(report)
    }

    /// Whether relocation follows the iteration just completed.
    pub fn relocation_due(&self) -> bool {
        let c = &self.config;
        let until = (c.relocate_until_fraction * c.iterations as f64) as u64;
        c.relocate_every > 0 && self.iteration > 0 && self.iteration.is_multiple_of(c.relocate_every as u64) && self.iteration <= until
    }

    /// One gradient iteration on an explicit set of views (no relocation).
    pub fn step_on_views(&mut self, views: &[usize], targets: &[BlurTarget], cam: &Camera) -> Result<StepReport> {
        let cfg = self.config.clone();
        let mut gauss = vec![[0.0; GAUSSIAN_PARAMS]; self.scene.len()];
        let mut loss = 0.0;
        let mut psnr_sum = 0.0;
        let mut control_grads = Vec::with_capacity(views.len());
        let weight = 1.0 / views.len().max(1) as f64;
        for &v in views {
            let vg = view_loss_and_gradients(
                &self.scene,
                &self.trajectories[v],
                &targets[v],
                cam,
                cfg.n_virtual,
                cfg.lambda,
            )?;
            loss += vg.loss * weight;
            psnr_sum += psnr(&vg.prediction, targets[v].image())?;
            for (acc, g) in gauss.iter_mut().zip(&vg.gaussians) {
                for (a, x) in acc.iter_mut().zip(pack(g)) {
                    *a += x * weight;
                }
            }
            control_grads.push((v, vg.controls));
        }
        for (name, range) in GROUPS {
            if gauss.iter().any(|g| g[range.clone()].iter().any(|x| !x.is_finite())) {
                return Err(nonfinite_report(
                    &format!("gradient of {name}"),
                    gauss.iter().enumerate().map(|(i, g)| (i, g[range.clone()].to_vec())),
                ));
            }
        }
        if let Some((v, _)) = control_grads.iter().find(|(_, c)| c.iter().any(|g| g.iter().any(|x| !x.is_finite()))) {
            return Err(Error::NonFinite {
                group: "gradient of pose".into(),
                detail: format!("view {v}"),
            });
        }

        self.iteration += 1;
        let t = self.iteration as i32;
        let (b1, b2, eps) = (cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let lr_mu = self.lr_mu_at(self.iteration);
        let mut rates = [0.0; GAUSSIAN_PARAMS];
        rates[0..3].fill(lr_mu);
        rates[3..7].fill(cfg.lr_rotation);
        rates[7..10].fill(cfg.lr_log_scale);
        rates[10] = cfg.lr_opacity;
        rates[11..14].fill(cfg.lr_color);
        for (i, g) in self.scene.gaussians.iter_mut().enumerate() {
            let (m, v) = (&mut self.gaussian_m[i], &mut self.gaussian_v[i]);
            let mut step = [0.0; GAUSSIAN_PARAMS];
            for p in 0..GAUSSIAN_PARAMS {
                m[p] = b1 * m[p] + (1.0 - b1) * gauss[i][p];
                v[p] = b2 * v[p] + (1.0 - b2) * gauss[i][p] * gauss[i][p];
                step[p] = rates[p] * (m[p] / c1) / ((v[p] / c2).sqrt() + eps);
            }
            g.mu -= Vector3::new(step[0], step[1], step[2]);
            g.q.w -= step[3];
            g.q.i -= step[4];
            g.q.j -= step[5];
            g.q.k -= step[6];
            g.log_scale -= Vector3::new(step[7], step[8], step[9]);
            g.opacity_logit -= step[10];
            g.color -= Vector3::new(step[11], step[12], step[13]);
            g.color = g.color.map(|c| c.clamp(0.0, 1.0));
            g.renormalize();
        }

        if cfg.lr_pose > 0.0 {
            for (v, grads) in control_grads {
                self.pose_steps[v] += 1;
                let tp = self.pose_steps[v] as i32;
                let (pc1, pc2) = (1.0 - b1.powi(tp), 1.0 - b2.powi(tp));
                let moments = &mut self.pose_moments[v];
                let controls: Vec<SE3Pose> = self.trajectories[v]
                    .controls()
                    .iter()
                    .zip(moments.iter_mut())
                    .zip(&grads)
                    .map(|((pose, a), g)| {
                        a.m = a.m * b1 + g * (1.0 - b1);
                        a.v = a.v * b2 + g.component_mul(g) * (1.0 - b2);
                        let delta = (a.m / pc1).zip_map(&(a.v / pc2), |m, v| -cfg.lr_pose * m / (v.sqrt() + eps));
                        (se3_exp(&Twist::from_vector(&delta)) * *pose).renormalized()
                    })
                    .collect();
                self.trajectories[v] = self.trajectories[v].with_controls(controls)?;
            }
        }

        if cfg.sgld_noise > 0.0 && lr_mu > 0.0 {
            let eps_dead = cfg.relocate_opacity_eps;
            for g in self.scene.gaussians.iter_mut() {
                let gate = sigmoid(-100.0 * (g.opacity() - eps_dead));
                let eta = Vector3::new(
                    self.rng.sample::<f64, _>(StandardNormal),
                    self.rng.sample::<f64, _>(StandardNormal),
                    self.rng.sample::<f64, _>(StandardNormal),
                );
                let l = g.rotation_matrix() * Matrix3::from_diagonal(&g.scales());
                g.mu += l * eta * (lr_mu * cfg.sgld_noise * gate);
            }
        }

        self.check_finite()?;
        Ok(StepReport {
            iteration: self.iteration,
            views: views.to_vec(),
            loss,
            psnr: psnr_sum / views.len().max(1) as f64,
            relocation: None,
        })
    }

    fn check_finite(&self) -> Result<()> {
        for (name, range) in GROUPS {
            let rows = self.scene.gaussians.iter().enumerate().map(|(i, g)| {
                let grad = GaussianGrad {
                    mu: g.mu,
                    q: nalgebra::Vector4::new(g.q.w, g.q.i, g.q.j, g.q.k),
                    log_scale: g.log_scale,
                    opacity_logit: g.opacity_logit,
                    color: g.color,
                };
                (i, pack(&grad)[range.clone()].to_vec())
            });
            let rows: Vec<_> = rows.collect();
            if rows.iter().any(|(_, v)| v.iter().any(|x| !x.is_finite())) {
                return Err(nonfinite_report(name, rows.into_iter()));
            }
        }
        if let Some(v) = self.trajectories.iter().position(|t| t.controls().iter().any(|p| !p.is_finite())) {
            return Err(Error::NonFinite {
                group: "pose".into(),
                detail: format!("view {v}"),
            });
        }
        Ok(())
    }

    /// Moves Gaussians with opacity below the dead threshold onto live ones
    /// sampled in proportion to opacity, then optionally adds new ones the
    /// same way. A live Gaussian chosen `k` times is split into `k + 1`
    /// copies with `1 - (1 - o_new)^(k + 1) = o_old` and shared scales; the
    /// moments of every touched Gaussian are reset.
    pub fn mcmc_relocate(&mut self) -> RelocationReport {
        let eps = self.config.relocate_opacity_eps;
        let opacities: Vec<f64> = self.scene.gaussians.iter().map(|g| g.opacity()).collect();
        let dead: Vec<usize> = (0..opacities.len()).filter(|i| opacities[*i] < eps).collect();
        let live_weights: Vec<f64> = opacities.iter().map(|o| if *o >= eps { *o } else { 0.0 }).collect();
        let Ok(dist) = WeightedIndex::new(&live_weights) else {
            return RelocationReport::default();
        };
        let room = self.config.n_max.saturating_sub(self.scene.len());
        let grow = ((self.config.growth_rate * self.scene.len() as f64).floor() as usize).min(room);
        if dead.is_empty() && grow == 0 {
            return RelocationReport::default();
        }
        let sources: Vec<usize> = (0..dead.len() + grow).map(|_| dist.sample(&mut self.rng)).collect();
        let mut copies = vec![0usize; opacities.len()];
        for s in &sources {
            copies[*s] += 1;
        }
        let split = |o: f64, k: usize| 1.0 - (1.0 - o).powf(1.0 / (k as f64 + 1.0));
        for (i, &k) in copies.iter().enumerate() {
            if k > 0 {
                let o = split(opacities[i], k).clamp(1e-12, 1.0 - 1e-12);
                self.scene.gaussians[i].opacity_logit = logit(o);
                self.gaussian_m[i] = [0.0; GAUSSIAN_PARAMS];
                self.gaussian_v[i] = [0.0; GAUSSIAN_PARAMS];
            }
        }
        for (slot, &src) in sources.iter().enumerate() {
            let g = self.scene.gaussians[src];
            if slot < dead.len() {
                let d = dead[slot];
                self.scene.gaussians[d] = g;
                self.gaussian_m[d] = [0.0; GAUSSIAN_PARAMS];
                self.gaussian_v[d] = [0.0; GAUSSIAN_PARAMS];
            } else {
                self.scene.push(g).expect("growth bounded by capacity");
                self.gaussian_m.push([0.0; GAUSSIAN_PARAMS]);
                self.gaussian_v.push([0.0; GAUSSIAN_PARAMS]);
            }
        }
        RelocationReport {
            relocated: dead.len(),
            added: grow,
        }
    }

    pub fn write_checkpoint<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = LeWriter::new(out);
        w.bytes(CHECKPOINT_MAGIC)?;
        w.u32(CHECKPOINT_VERSION)?;
        let cfg = self.config.to_toml_string();
        w.u64(cfg.len() as u64)?;
        w.bytes(cfg.as_bytes())?;
        w.u64(self.iteration)?;
        w.bytes(&self.rng.get_seed())?;
        w.u64(self.rng.get_stream())?;
        let pos = self.rng.get_word_pos();
        w.u64(pos as u64)?;
        w.u64((pos >> 64) as u64)?;
        w.u64(self.scene.capacity() as u64)?;
        w.u64(self.scene.len() as u64)?;
        for (i, g) in self.scene.gaussians.iter().enumerate() {
            crate::scene::write_gaussian(&mut w, g)?;
            w.f64s(&self.gaussian_m[i])?;
            w.f64s(&self.gaussian_v[i])?;
        }
        w.u64(self.trajectories.len() as u64)?;
        for (v, t) in self.trajectories.iter().enumerate() {
            w.u8(t.kind().tag())?;
            w.f64(t.exposure())?;
            w.u64(self.pose_steps[v])?;
            w.u64(t.controls().len() as u64)?;
            for (p, a) in t.controls().iter().zip(&self.pose_moments[v]) {
                w.f64s(p.rotation().transpose().as_slice())?;
                w.f64s(p.translation().as_slice())?;
                w.f64s(a.m.as_slice())?;
                w.f64s(a.v.as_slice())?;
            }
        }
        w.into_inner().flush()
    }

    pub fn read_checkpoint<R: Read>(input: R) -> Result<Self> {
        let mut r = LeReader::new(input);
        if &r.bytes::<4>()? != CHECKPOINT_MAGIC {
            return Err(Error::Corrupt("missing GMSK magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let cfg_len = r.len(1 << 20)?;
        let mut cfg_bytes = vec![0u8; cfg_len];
        for b in cfg_bytes.iter_mut() {
            *b = r.u8()?;
        }
        let cfg_text = String::from_utf8(cfg_bytes).map_err(|_| Error::Corrupt("config is not UTF-8".into()))?;
        let config = OptimConfig::from_toml_str(&cfg_text)?;
        let iteration = r.u64()?;
        let seed = r.bytes::<32>()?;
        let stream = r.u64()?;
        let pos = r.u64()? as u128 | ((r.u64()? as u128) << 64);
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(pos);
        let capacity = r.len(1 << 32)?;
        let count = r.len(capacity as u64)?;
        let mut gaussians = Vec::with_capacity(count);
        let mut gaussian_m = Vec::with_capacity(count);
        let mut gaussian_v = Vec::with_capacity(count);
        for _ in 0..count {
            gaussians.push(crate::scene::read_gaussian(&mut r)?);
            gaussian_m.push(r.f64s::<GAUSSIAN_PARAMS>()?);
            gaussian_v.push(r.f64s::<GAUSSIAN_PARAMS>()?);
        }
        let scene = SceneModel::from_gaussians(gaussians, capacity)?;
        let n_views = r.len(1 << 24)?;
        let mut trajectories = Vec::with_capacity(n_views);
        let mut pose_moments = Vec::with_capacity(n_views);
        let mut pose_steps = Vec::with_capacity(n_views);
        for _ in 0..n_views {
            let kind = TrajectoryKind::from_tag(r.u8()?).ok_or_else(|| Error::Corrupt("unknown trajectory tag".into()))?;
            let exposure = r.f64()?;
            pose_steps.push(r.u64()?);
            let n_ctrl = r.len(1 << 16)?;
            let mut controls = Vec::with_capacity(n_ctrl);
            let mut moments = Vec::with_capacity(n_ctrl);
            for _ in 0..n_ctrl {
                let rot = Matrix3::from_row_slice(&r.f64s::<9>()?);
                let t = Vector3::from(r.f64s::<3>()?);
                let pose = SE3Pose::from_parts_unchecked(rot, t);
                if !pose.is_finite() || pose.orthonormality_error() > 1e-6 {
                    return Err(Error::Corrupt("invalid control pose".into()));
                }
                controls.push(pose);
                moments.push(Adam6 {
                    m: Vector6::from_row_slice(&r.f64s::<6>()?),
                    v: Vector6::from_row_slice(&r.f64s::<6>()?),
                });
            }
            trajectories.push(Trajectory::from_controls(kind, controls, exposure)?);
            pose_moments.push(moments);
        }
        r.expect_eof()?;
        Ok(Self {
            config,
            scene,
            trajectories,
            iteration,
            gaussian_m,
            gaussian_v,
            pose_moments,
            pose_steps,
            rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_checkpoint(BufWriter::new(file)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::read_checkpoint(&bytes[..])
    }
}
