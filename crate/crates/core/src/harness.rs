//! Procedural datasets and the end-to-end pipelines driven by the CLI.
//!
//! A dataset holds, per training view, an 11-frame sharp burst rendered along
//! a random Bezier motion. Blur level `k` is the mean of the first `k` frames,
//! so its exposure spans frames `0..k` and its mid-exposure ground truth is
//! frame `(k - 1) / 2`. Events for all views live in one stream; view `i`
//! occupies the time window `[i * view_period, i * view_period + exposure]`.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{Quaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::edi::{edi_init_views, EdiConfig, EdiView};
use crate::error::{Error, Result};
use crate::eventsim::{average_frames, generate_events, read_events, write_events, EventMode, EventStream};
use crate::imagebuf::ImageBuffer;
use crate::liegroup::{read_tum, se3_exp, write_tum, SE3Pose, Trajectory, TrajectoryKind, Twist};
use crate::metrics::{ape_poses, mse, psnr, ssim, ApeStats, EvalReport};
use crate::optimizer::{BlurTarget, OptimConfig, TrainState};
use crate::renderer::render;
use crate::scene::{load_scene, logit, save_scene, Camera, Gaussian3D, SceneModel};
use crate::sfm_init::{perturb_poses, sample_pointcloud, NoiseProfile};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub n_gaussians: usize,
    /// Fraction of Gaussians forming the textured back wall.
    pub background_fraction: f64,
    pub n_views: usize,
    pub n_test_views: usize,
    pub burst: usize,
    pub blur_levels: Vec<u32>,
    pub exposure: f64,
    pub view_period: f64,
    pub camera_distance: f64,
    pub orbit_x: f64,
    pub orbit_y: f64,
    /// Translation of the camera over a full burst (meters).
    pub motion_translation: f64,
    /// Rotation of the camera over a full burst (degrees).
    pub motion_rotation_deg: f64,
    pub events: bool,
    pub event_threshold: f64,
    pub event_mode: EventMode,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            width: 64,
            height: 64,
            focal: 64.0,
            n_gaussians: 200,
            background_fraction: 0.3,
            n_views: 20,
            n_test_views: 4,
            burst: 11,
            blur_levels: vec![1, 3, 5, 7, 9, 11],
            exposure: 1.0,
            view_period: 2.0,
            camera_distance: 4.0,
            orbit_x: 1.5,
            orbit_y: 0.8,
            motion_translation: 2.0,
            motion_rotation_deg: 3.0,
            events: true,
            event_threshold: crate::eventsim::DEFAULT_THRESHOLD,
            event_mode: EventMode::PerChannel,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.width == 0 || self.height == 0 || !(self.focal > 0.0) {
            return bad("camera needs positive resolution and focal length".into());
        }
        if self.n_views == 0 || self.burst == 0 {
            return bad("need at least one view and one burst frame".into());
        }
        if self.blur_levels.is_empty() {
            return bad("blur_levels must not be empty".into());
        }
        for &l in &self.blur_levels {
            if l % 2 == 0 || l as usize > self.burst {
                return bad(format!("blur level {l} must be odd and at most the burst length {}", self.burst));
            }
        }
        if !(self.exposure > 0.0 && self.view_period > self.exposure) {
            return bad("view_period must exceed a positive exposure".into());
        }
        if !(self.event_threshold > 0.0) {
            return Err(Error::InvalidThreshold(self.event_threshold));
        }
        if !(0.0..=1.0).contains(&self.background_fraction) {
            return bad("background_fraction outside [0, 1]".into());
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    /// Overrides one field from its textual value, e.g. `("blur_levels", "[1, 7]")`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let updated: Self = crate::optimizer::set_toml_field(self, key, value)?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    pub fn camera(&self) -> Camera {
        Camera {
            fx: self.focal,
            fy: self.focal,
            cx: (self.width as f64 - 1.0) / 2.0,
            cy: (self.height as f64 - 1.0) / 2.0,
            width: self.width,
            height: self.height,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BurstFrame {
    pub t: f64,
    pub pose: SE3Pose,
    pub image: ImageBuffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub frames: Vec<BurstFrame>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TestView {
    pub pose: SE3Pose,
    pub image: ImageBuffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub camera: Camera,
    pub gt_scene: SceneModel,
    pub views: Vec<View>,
    pub test_views: Vec<TestView>,
    /// Observed blurry frames per blur level (levels above 1).
    pub blurs: BTreeMap<u32, Vec<ImageBuffer>>,
    pub events: Option<EventStream>,
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Seeded scene: a textured back wall plus foreground blobs in a box around
/// the origin.
pub fn procedural_scene(cfg: &DatasetConfig, rng: &mut ChaCha8Rng) -> Result<SceneModel> {
    let n_wall = (cfg.n_gaussians as f64 * cfg.background_fraction).round() as usize;
    let side = (n_wall as f64).sqrt().ceil().max(1.0) as usize;
    let extent = 5.0;
    let spacing = 2.0 * extent / side as f64;
    let mut gs = Vec::with_capacity(cfg.n_gaussians);
    for i in 0..n_wall {
        let (gx, gy) = (i % side, i / side);
        let mu = Vector3::new(
            -extent + (gx as f64 + 0.5 + rng.random_range(-0.2..0.2)) * spacing,
            -extent + (gy as f64 + 0.5 + rng.random_range(-0.2..0.2)) * spacing,
            2.5 + rng.random_range(-0.1..0.1),
        );
        let s = spacing * rng.random_range(0.45..0.7);
        gs.push(Gaussian3D::new(
            mu,
            Quaternion::new(1.0, 0.0, 0.0, rng.random_range(-0.5..0.5)),
            Vector3::new(s.ln(), (s * rng.random_range(0.6..1.0)).ln(), 0.05f64.ln()),
            rng.random_range(2.0..4.0),
            Vector3::new(rng.random(), rng.random(), rng.random()),
        ));
    }
    while gs.len() < cfg.n_gaussians {
        let mu = Vector3::new(rng.random_range(-1.6..1.6), rng.random_range(-1.2..1.2), rng.random_range(-1.0..1.0));
        let q = Quaternion::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let log_scale = Vector3::from_fn(|_, _| rng.random_range(0.08f64.ln()..0.25f64.ln()));
        gs.push(Gaussian3D::new(
            mu,
            q,
            log_scale,
            rng.random_range(0.5..3.0),
            Vector3::new(rng.random(), rng.random(), rng.random()),
        ));
    }
    SceneModel::from_gaussians(gs, cfg.n_gaussians)
}

fn orbit_pose(cfg: &DatasetConfig, angle: f64, radius: f64) -> SE3Pose {
    let eye = Vector3::new(
        radius * cfg.orbit_x * angle.cos(),
        radius * cfg.orbit_y * angle.sin(),
        -cfg.camera_distance,
    );
    SE3Pose::look_at(eye, Vector3::zeros(), Vector3::new(0.0, 1.0, 0.0))
}

/// Random cubic Bezier motion centered on `base` (world-to-camera), applied
/// in the camera frame.
fn random_motion(cfg: &DatasetConfig, base: &SE3Pose, rng: &mut ChaCha8Rng) -> Result<Trajectory> {
    let rot = cfg.motion_rotation_deg.to_radians();
    let lin = Twist::new(random_unit(rng) * cfg.motion_translation, random_unit(rng) * rot).to_vector();
    let bend = Twist::new(random_unit(rng) * 0.3 * cfg.motion_translation, random_unit(rng) * 0.3 * rot).to_vector();
    let controls = (0..4)
        .map(|j| {
            let s = j as f64 / 3.0 - 0.5;
            let xi = lin * s + bend * (s * s - 1.0 / 12.0);
            se3_exp(&Twist::from_vector(&xi)) * *base
        })
        .collect();
    Trajectory::from_controls(TrajectoryKind::Bezier, controls, 1.0)
}

/// Rounds to the f32 precision of the on-disk format, so a generated dataset
/// and its reloaded copy are identical.
fn as_stored(mut img: ImageBuffer) -> ImageBuffer {
    for v in img.data_mut() {
        *v = *v as f32 as f64;
    }
    img
}

impl Dataset {
    pub fn generate(cfg: &DatasetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let gt_scene = procedural_scene(cfg, &mut rng)?;
        let camera = cfg.camera();
        let mut views = Vec::with_capacity(cfg.n_views);
        let mut streams = Vec::new();
        for i in 0..cfg.n_views {
            let angle = std::f64::consts::TAU * i as f64 / cfg.n_views as f64;
            let traj = random_motion(cfg, &orbit_pose(cfg, angle, 1.0), &mut rng)?;
            let t0 = i as f64 * cfg.view_period;
            let us = Trajectory::sample_positions(cfg.burst);
            let frames = us
                .iter()
                .map(|u| {
                    let pose = traj.pose_at(*u)?;
                    Ok(BurstFrame {
                        t: t0 + u * cfg.exposure,
                        pose,
                        image: as_stored(render(&gt_scene, &pose, &camera)),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if cfg.events && frames.len() > 1 {
                let burst: Vec<(f64, ImageBuffer)> = frames.iter().map(|f| (f.t, f.image.clone())).collect();
                streams.push(generate_events(&burst, cfg.event_threshold, cfg.event_mode)?);
            }
            views.push(View { frames });
        }
        let test_views = (0..cfg.n_test_views)
            .map(|k| {
                let angle = std::f64::consts::TAU * (k as f64 + 0.5) / cfg.n_test_views as f64;
                let pose = orbit_pose(cfg, angle, 0.6);
                TestView {
                    pose,
                    image: as_stored(render(&gt_scene, &pose, &camera)),
                }
            })
            .collect();
        let events = cfg.events.then(|| {
            let window = (0.0, (cfg.n_views - 1) as f64 * cfg.view_period + cfg.exposure);
            let all = streams.into_iter().flat_map(|s| s.events).collect();
            EventStream::new(all, cfg.event_threshold, window, cfg.event_mode)
        });
        let mut ds = Self {
            config: cfg.clone(),
            camera,
            gt_scene,
            views,
            test_views,
            blurs: BTreeMap::new(),
            events: events.transpose()?,
        };
        for &level in cfg.blur_levels.iter().filter(|l| **l > 1) {
            let imgs = (0..ds.views.len())
                .map(|v| ds.synthesize_blur(v, level))
                .collect::<Result<Vec<_>>>()?;
            ds.blurs.insert(level, imgs.into_iter().map(as_stored).collect());
        }
        Ok(ds)
    }

    fn check_level(&self, level: u32) -> Result<usize> {
        if level.is_multiple_of(2) || level == 0 || level as usize > self.config.burst {
            return Err(Error::UnknownBlurLevel(level));
        }
        Ok(level as usize)
    }

    /// Mean of the first `level` burst frames of a view.
    pub fn synthesize_blur(&self, view: usize, level: u32) -> Result<ImageBuffer> {
        let k = self.check_level(level)?;
        let frames: Vec<ImageBuffer> = self.views[view].frames[..k].iter().map(|f| f.image.clone()).collect();
        average_frames(&frames)
    }

    /// The observed frame for a view at a blur level (the first sharp frame at
    /// level 1).
    pub fn observed(&self, view: usize, level: u32) -> Result<ImageBuffer> {
        let k = self.check_level(level)?;
        if k == 1 {
            return Ok(self.views[view].frames[0].image.clone());
        }
        self.blurs
            .get(&level)
            .map(|imgs| imgs[view].clone())
            .ok_or_else(|| Error::Dataset(format!("dataset has no blur_{level} images")))
    }

    pub fn exposure_window(&self, view: usize, level: u32) -> Result<(f64, f64)> {
        let k = self.check_level(level)?;
        let f = &self.views[view].frames;
        Ok((f[0].t, f[k - 1].t))
    }

    pub fn gt_mid_pose(&self, view: usize, level: u32) -> Result<SE3Pose> {
        let k = self.check_level(level)?;
        Ok(self.views[view].frames[(k - 1) / 2].pose)
    }

    pub fn mid_sharp(&self, view: usize, level: u32) -> Result<&ImageBuffer> {
        let k = self.check_level(level)?;
        Ok(&self.views[view].frames[(k - 1) / 2].image)
    }

    pub fn gt_mid_poses(&self, level: u32) -> Result<Vec<SE3Pose>> {
        (0..self.views.len()).map(|v| self.gt_mid_pose(v, level)).collect()
    }

    pub fn view_events(&self, view: usize, level: u32) -> Result<EventStream> {
        let stream = self
            .events
            .as_ref()
            .ok_or_else(|| Error::Dataset("dataset has no events; regenerate with events enabled".into()))?;
        let (a, b) = self.exposure_window(view, level)?;
        Ok(stream.slice(a, b))
    }

    pub fn targets(&self, level: u32) -> Result<Vec<BlurTarget>> {
        (0..self.views.len())
            .map(|v| self.observed(v, level).map(BlurTarget::observed))
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mkdir = |p: &Path| fs::create_dir_all(p).map_err(|e| Error::io(p, e));
        mkdir(dir)?;
        let cfg = CameraFile {
            camera: self.camera,
            dataset: self.config.clone(),
        };
        let text = toml::to_string(&cfg).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let path = dir.join("camera.cfg");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        save_scene(&dir.join("scene_gt.gspl"), &self.gt_scene)?;

        let sharp = dir.join("sharp");
        let mut gt = Vec::new();
        for (v, view) in self.views.iter().enumerate() {
            let vd = sharp.join(format!("view_{v:03}"));
            mkdir(&vd)?;
            for (f, frame) in view.frames.iter().enumerate() {
                frame.image.save_npy(&vd.join(format!("frame_{f:02}.npy")))?;
                frame.image.save_png(&vd.join(format!("frame_{f:02}.png")))?;
                gt.push((frame.t, frame.pose));
            }
        }
        write_tum_file(&dir.join("trajectory_gt.tum"), &gt)?;
        for (level, imgs) in &self.blurs {
            let bd = dir.join(format!("blur_{level}"));
            mkdir(&bd)?;
            for (v, img) in imgs.iter().enumerate() {
                img.save_npy(&bd.join(format!("view_{v:03}.npy")))?;
                img.save_png(&bd.join(format!("view_{v:03}.png")))?;
            }
        }
        let td = dir.join("test");
        mkdir(&td)?;
        let mut test_poses = Vec::new();
        for (k, tv) in self.test_views.iter().enumerate() {
            tv.image.save_npy(&td.join(format!("view_{k:03}.npy")))?;
            tv.image.save_png(&td.join(format!("view_{k:03}.png")))?;
            test_poses.push((k as f64, tv.pose));
        }
        write_tum_file(&dir.join("trajectory_test.tum"), &test_poses)?;
        if let Some(ev) = &self.events {
            let path = dir.join("events.txt");
            let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut out = BufWriter::new(file);
            write_events(&mut out, &ev.events)
                .and_then(|_| out.flush())
                .map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("camera.cfg");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let cf: CameraFile = toml::from_str(&text).map_err(|e| Error::Dataset(format!("camera.cfg: {e}")))?;
        cf.camera.validate()?;
        let cfg = cf.dataset;
        cfg.validate()?;
        let gt_scene = load_scene(&dir.join("scene_gt.gspl"))?;
        let gt = read_tum_file(&dir.join("trajectory_gt.tum"))?;
        if gt.len() != cfg.n_views * cfg.burst {
            return Err(Error::Dataset(format!(
                "trajectory_gt.tum has {} poses, expected {}",
                gt.len(),
                cfg.n_views * cfg.burst
            )));
        }
        let mut views = Vec::with_capacity(cfg.n_views);
        for v in 0..cfg.n_views {
            let vd = dir.join("sharp").join(format!("view_{v:03}"));
            let frames = (0..cfg.burst)
                .map(|f| {
                    let (t, pose) = gt[v * cfg.burst + f];
                    Ok(BurstFrame {
                        t,
                        pose,
                        image: ImageBuffer::load_npy(&vd.join(format!("frame_{f:02}.npy")))?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            views.push(View { frames });
        }
        let mut blurs = BTreeMap::new();
        for &level in cfg.blur_levels.iter().filter(|l| **l > 1) {
            let bd = dir.join(format!("blur_{level}"));
            let imgs = (0..cfg.n_views)
                .map(|v| ImageBuffer::load_npy(&bd.join(format!("view_{v:03}.npy"))))
                .collect::<Result<Vec<_>>>()?;
            blurs.insert(level, imgs);
        }
        let test_poses = read_tum_file(&dir.join("trajectory_test.tum"))?;
        let test_views = test_poses
            .iter()
            .enumerate()
            .map(|(k, (_, pose))| {
                Ok(TestView {
                    pose: *pose,
                    image: ImageBuffer::load_npy(&dir.join("test").join(format!("view_{k:03}.npy")))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let events = if cfg.events {
            let path = dir.join("events.txt");
            let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
            let evs = read_events(BufReader::new(file))?;
            let window = (0.0, (cfg.n_views - 1) as f64 * cfg.view_period + cfg.exposure);
            Some(EventStream::new(evs, cfg.event_threshold, window, cfg.event_mode)?)
        } else {
            None
        };
        Ok(Self {
            camera: cf.camera,
            config: cfg,
            gt_scene,
            views,
            test_views,
            blurs,
            events,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct CameraFile {
    camera: Camera,
    dataset: DatasetConfig,
}

pub fn write_tum_file(path: &Path, poses: &[(f64, SE3Pose)]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_tum(&mut out, poses)
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_tum_file(path: &Path) -> Result<Vec<(f64, SE3Pose)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_tum(BufReader::new(file))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Gems,
    GemsE,
    NoMcmc,
    NoTrajopt,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Gems => "gems",
            Mode::GemsE => "gems-e",
            Mode::NoMcmc => "no-mcmc",
            Mode::NoTrajopt => "no-trajopt",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gems" => Ok(Mode::Gems),
            "gems-e" => Ok(Mode::GemsE),
            "no-mcmc" => Ok(Mode::NoMcmc),
            "no-trajopt" => Ok(Mode::NoTrajopt),
            other => Err(Error::InvalidConfig(format!("unknown mode '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitSource {
    /// Pose noise calibrated to the observed blur level.
    Blur,
    /// Pose noise calibrated to the quality of event-deblurred frames.
    Edi,
    /// Exact mid-exposure poses.
    GroundTruth,
}

/// Output of the structure-from-motion stand-in.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseInit {
    pub poses: Vec<SE3Pose>,
    pub profile: NoiseProfile,
    pub points: Vec<Vector3<f64>>,
    /// Frames the stand-in was "run" on; initial point colors come from
    /// these.
    pub images: Vec<ImageBuffer>,
    /// Mean PSNR of `images` against the mid-exposure sharp frames.
    pub input_psnr: f64,
}

/// Mean MSE of each blur level's frames against their mid-exposure sharp
/// frames, for levels `1, 3, ..., burst`.
pub fn blur_mse_curve(ds: &Dataset) -> Result<Vec<(f64, f64)>> {
    let mut curve = vec![(1.0, 0.0)];
    for level in (3..=ds.config.burst as u32).step_by(2) {
        let mut acc = 0.0;
        for v in 0..ds.views.len() {
            acc += mse(&ds.synthesize_blur(v, level)?, ds.mid_sharp(v, level)?)?;
        }
        let m = acc / ds.views.len() as f64;
        let prev = curve.last().map_or(0.0, |c: &(f64, f64)| c.1);
        curve.push((level as f64, m.max(prev)));
    }
    Ok(curve)
}

/// Blur level whose frames degrade as much as frames with mean MSE `m`,
/// by piecewise-linear interpolation on [`blur_mse_curve`].
pub fn effective_blur_level(curve: &[(f64, f64)], m: f64) -> f64 {
    for w in curve.windows(2) {
        let ((l0, m0), (l1, m1)) = (w[0], w[1]);
        if m <= m1 {
            return if m1 > m0 { l0 + (l1 - l0) * ((m - m0) / (m1 - m0)).max(0.0) } else { l0 };
        }
    }
    curve.last().map_or(1.0, |c| c.0)
}

pub const DEFAULT_POINT_JITTER: f64 = 0.02;
/// Size of the stand-in's sparse point cloud.
pub const DEFAULT_INIT_POINTS: usize = 700;

pub fn init_poses(
    ds: &Dataset,
    level: u32,
    source: InitSource,
    edi: &EdiConfig,
    n_points: usize,
    seed: u64,
    log: &mut dyn Write,
) -> Result<PoseInit> {
    let gt = ds.gt_mid_poses(level)?;
    let blurs = (0..ds.views.len()).map(|v| ds.observed(v, level)).collect::<Result<Vec<_>>>()?;
    let (profile, images, input_psnr) = match source {
        InitSource::Blur => {
            let profile = if level == 1 {
                NoiseProfile::from_effective_level(1.0)
            } else {
                NoiseProfile::for_blur_level(level)?
            };
            let mut p = 0.0;
            for (v, b) in blurs.iter().enumerate() {
                p += psnr(b, ds.mid_sharp(v, level)?)?;
            }
            let p = p / ds.views.len() as f64;
            (profile, blurs, p)
        }
        InitSource::GroundTruth => (NoiseProfile::zero(), blurs, f64::NAN),
        InitSource::Edi => {
            let _ = writeln!(log, "stage=edi views={} level={level} theta={} bins={}", ds.views.len(), edi.threshold, edi.bins);
            let streams = (0..ds.views.len()).map(|v| ds.view_events(v, level)).collect::<Result<Vec<_>>>()?;
            let windows = (0..ds.views.len()).map(|v| ds.exposure_window(v, level)).collect::<Result<Vec<_>>>()?;
            let views: Vec<EdiView<'_>> = (0..ds.views.len())
                .map(|v| EdiView {
                    blur: &blurs[v],
                    window: windows[v],
                    stream: &streams[v],
                })
                .collect();
            let mut m = 0.0;
            let mut p = 0.0;
            let mut images = Vec::with_capacity(views.len());
            for (v, out) in edi_init_views(&views, edi).into_iter().enumerate() {
                // A failed view falls back to its blurred frame.
                let img = match out {
                    Ok(o) => o.image().clone(),
                    Err(e) => {
                        let _ = writeln!(log, "stage=edi view={v} status=failed error=\"{e}\"");
                        blurs[v].clone()
                    }
                };
                m += mse(&img, ds.mid_sharp(v, level)?)?;
                p += psnr(&img, ds.mid_sharp(v, level)?)?;
                images.push(img);
            }
            let n = ds.views.len() as f64;
            let level_eff = effective_blur_level(&blur_mse_curve(ds)?, m / n);
            let _ = writeln!(log, "stage=edi mean_psnr={:.4} effective_level={level_eff:.4}", p / n);
            (NoiseProfile::from_effective_level(level_eff), images, p / n)
        }
    };
    let poses = perturb_poses(&gt, &profile, seed)?;
    let points = sample_pointcloud(&ds.gt_scene, n_points, DEFAULT_POINT_JITTER, seed.wrapping_add(1))?;
    let _ = writeln!(
        log,
        "stage=sfm level={level} profile_level={:.4} profile_rmse={:.4} points={}",
        profile.blur_level,
        profile.rmse,
        points.len()
    );
    Ok(PoseInit {
        poses,
        profile,
        points,
        images,
        input_psnr,
    })
}

/// Gaussians seeded at the point cloud: colors sampled from the first
/// observed frame that sees each point, isotropic scales from the mean
/// distance to the three nearest neighbours, opacity 0.5.
pub fn initial_scene(
    points: &[Vector3<f64>],
    poses: &[SE3Pose],
    observed: &[ImageBuffer],
    cam: &Camera,
    capacity: usize,
) -> Result<SceneModel> {
    let mut gs = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        let mut d: Vec<f64> = points
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, q)| (q - p).norm())
            .filter(|d| *d > 1e-9)
            .collect();
        d.sort_by(f64::total_cmp);
        let k = d.len().min(3);
        let scale = if k == 0 { 0.1 } else { d[..k].iter().sum::<f64>() / k as f64 };
        let mut color = Vector3::repeat(0.5);
        for (pose, img) in poses.iter().zip(observed) {
            let c = pose.transform_point(p);
            if c.z <= crate::scene::Z_NEAR {
                continue;
            }
            let px = cam.project_point(&c);
            let (x, y) = (px.x.round(), px.y.round());
            if x >= 0.0 && y >= 0.0 && (x as usize) < cam.width && (y as usize) < cam.height {
                color = Vector3::from(img.get(x as usize, y as usize));
                break;
            }
        }
        gs.push(Gaussian3D::new(
            *p,
            Quaternion::identity(),
            Vector3::repeat(scale.clamp(0.01, 1.0).ln()),
            logit(0.5),
            color,
        ));
    }
    SceneModel::from_gaussians(gs, capacity.max(points.len()))
}

#[derive(Clone, Debug)]
pub struct TrainSetup {
    pub mode: Mode,
    pub blur_level: u32,
    pub config: OptimConfig,
    pub edi: EdiConfig,
    pub seed: u64,
    pub n_points: usize,
    pub log_every: usize,
    /// Start from exact poses instead of the structure-from-motion stand-in.
    pub gt_poses: bool,
}

impl TrainSetup {
    pub fn new(mode: Mode, blur_level: u32, config: OptimConfig) -> Self {
        Self {
            mode,
            blur_level,
            config,
            edi: EdiConfig::default(),
            seed: 0,
            n_points: DEFAULT_INIT_POINTS,
            log_every: 100,
            gt_poses: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub init: PoseInit,
    pub initial_ape: ApeStats,
    pub final_ape: ApeStats,
    pub stages: Vec<String>,
    /// Largest Gaussian count seen after any iteration.
    pub max_gaussians: usize,
    pub relocations: Vec<RelocationCheck>,
}

/// One relocation event and how much it changed the renders at the
/// training views' mid-exposure poses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelocationCheck {
    pub iteration: u64,
    pub relocated: usize,
    pub added: usize,
    pub min_psnr: f64,
}

/// Applies the ablation switches of a mode to a config.
pub fn mode_config(mode: Mode, base: &OptimConfig) -> OptimConfig {
    let mut c = base.clone();
    match mode {
        Mode::NoTrajopt => c.lr_pose = 0.0,
        Mode::NoMcmc => {
            c.relocate_every = 0;
            c.sgld_noise = 0.0;
            c.growth_rate = 0.0;
        }
        Mode::Gems | Mode::GemsE => {}
    }
    c
}

pub fn train(ds: &Dataset, setup: &TrainSetup, log: &mut dyn Write) -> Result<TrainOutcome> {
    let level = setup.blur_level;
    let mut stages = Vec::new();
    let source = if setup.gt_poses {
        InitSource::GroundTruth
    } else if setup.mode == Mode::GemsE {
        if ds.events.is_none() {
            return Err(Error::Dataset("mode gems-e needs events; this dataset was generated without them".into()));
        }
        stages.push("edi".to_string());
        InitSource::Edi
    } else {
        InitSource::Blur
    };
    let init = init_poses(ds, level, source, &setup.edi, setup.n_points, setup.seed, log)?;
    stages.push("sfm".to_string());
    let observed = (0..ds.views.len()).map(|v| ds.observed(v, level)).collect::<Result<Vec<_>>>()?;
    let config = mode_config(setup.mode, &setup.config);
    let scene = initial_scene(&init.points, &init.poses, &init.images, &ds.camera, config.n_max)?;
    let targets: Vec<BlurTarget> = observed.into_iter().map(BlurTarget::observed).collect();
    let gt = ds.gt_mid_poses(level)?;
    let mut state = TrainState::new(config, scene, &init.poses, setup.seed)?;
    let initial_ape = ape_poses(&state.mid_poses()?, &gt, false)?;
    stages.push("train".to_string());
    let _ = writeln!(
        log,
        "stage=train mode={} level={level} trajectory={} iterations={} gaussians={} ape_rmse={:.6}",
        setup.mode.as_str(),
        state.config.trajectory.as_str(),
        state.config.iterations,
        state.scene.len(),
        initial_ape.rmse
    );
    let mut max_gaussians = state.scene.len();
    let mut relocations = Vec::new();
    for _ in 0..state.config.iterations {
        let mids = state.mid_poses()?;
        let mut check = None;
        let r = state.train_step_with(&targets, &ds.camera, |before, after| {
            check = Some(relocation_psnr(before, after, &mids, &ds.camera));
        })?;
        max_gaussians = max_gaussians.max(state.scene.len());
        if let (Some(rel), Some(min_psnr)) = (r.relocation, check) {
            let min_psnr = min_psnr?;
            let _ = writeln!(
                log,
                "relocate iter={} relocated={} added={} gaussians={} min_psnr={min_psnr:.4}",
                r.iteration,
                rel.relocated,
                rel.added,
                state.scene.len()
            );
            relocations.push(RelocationCheck {
                iteration: r.iteration,
                relocated: rel.relocated,
                added: rel.added,
                min_psnr,
            });
        }
        if setup.log_every > 0 && (r.iteration as usize).is_multiple_of(setup.log_every) {
            let ape = ape_poses(&state.mid_poses()?, &gt, false)?;
            let _ = writeln!(
                log,
                "iter={} loss={:.6} psnr={:.4} ape_rmse={:.6} gaussians={}",
                r.iteration,
                r.loss,
                r.psnr,
                ape.rmse,
                state.scene.len()
            );
        }
    }
    let final_ape = ape_poses(&state.mid_poses()?, &gt, false)?;
    let _ = writeln!(log, "stage=done ape_rmse_initial={:.6} ape_rmse_final={:.6}", initial_ape.rmse, final_ape.rmse);
    Ok(TrainOutcome {
        state,
        init,
        initial_ape,
        final_ape,
        stages,
        max_gaussians,
        relocations,
    })
}

/// Lowest PSNR between renders of two scenes over a set of poses.
pub fn relocation_psnr(before: &SceneModel, after: &SceneModel, poses: &[SE3Pose], cam: &Camera) -> Result<f64> {
    let mut worst = f64::INFINITY;
    for pose in poses {
        worst = worst.min(psnr(&render(before, pose, cam), &render(after, pose, cam))?);
    }
    Ok(worst)
}

/// Test-view image quality at ground-truth test poses plus mid-exposure APE
/// of the training trajectories.
pub fn evaluate(state: &TrainState, ds: &Dataset, level: u32) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    for (k, tv) in ds.test_views.iter().enumerate() {
        let img = render(&state.scene, &tv.pose, &ds.camera);
        report.push_view(format!("test_{k:03}"), psnr(&img, &tv.image)?, ssim(&img, &tv.image)?);
    }
    if state.trajectories.len() == ds.views.len() {
        report.ape = Some(ape_poses(&state.mid_poses()?, &ds.gt_mid_poses(level)?, false)?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetConfig {
        DatasetConfig {
            width: 24,
            height: 24,
            focal: 24.0,
            n_gaussians: 40,
            n_views: 3,
            n_test_views: 2,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn generated_layout_and_reload() {
        let ds = Dataset::generate(&small()).unwrap();
        assert_eq!(ds.views.len(), 3);
        assert_eq!(ds.blurs.keys().copied().collect::<Vec<_>>(), vec![3, 5, 7, 9, 11]);
        for v in 0..3 {
            let b = ds.observed(v, 7).unwrap();
            let frames: Vec<_> = ds.views[v].frames[..7].iter().map(|f| f.image.clone()).collect();
            let mean = as_stored(average_frames(&frames).unwrap());
            assert_eq!(b, mean);
        }
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        for entry in ["sharp", "blur_3", "blur_11", "events.txt", "trajectory_gt.tum", "camera.cfg"] {
            assert!(dir.path().join(entry).exists(), "{entry}");
        }
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.blurs, ds.blurs);
        assert_eq!(back.events, ds.events);
        assert_eq!(back.gt_scene, ds.gt_scene);
        for (a, b) in back.views.iter().zip(&ds.views) {
            for (fa, fb) in a.frames.iter().zip(&b.frames) {
                assert!(fa.pose.frobenius_distance(&fb.pose) < 1e-12);
                assert!((fa.t - fb.t).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sharp_only_and_eventless_datasets() {
        let cfg = DatasetConfig {
            blur_levels: vec![1],
            events: false,
            ..small()
        };
        let ds = Dataset::generate(&cfg).unwrap();
        assert!(ds.blurs.is_empty());
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        assert!(!dir.path().join("blur_3").exists());
        assert!(!dir.path().join("events.txt").exists());
        let setup = TrainSetup::new(Mode::GemsE, 1, OptimConfig::default());
        let err = train(&ds, &setup, &mut std::io::sink()).unwrap_err();
        assert!(err.to_string().contains("events"));
    }

    #[test]
    fn effective_level_lookup() {
        let curve = vec![(1.0, 0.0), (3.0, 0.01), (5.0, 0.03)];
        assert_eq!(effective_blur_level(&curve, 0.0), 1.0);
        assert!((effective_blur_level(&curve, 0.005) - 2.0).abs() < 1e-12);
        assert!((effective_blur_level(&curve, 0.02) - 4.0).abs() < 1e-12);
        assert_eq!(effective_blur_level(&curve, 1.0), 5.0);
    }

    #[test]
    fn gems_e_runs_edi_before_sfm() {
        let ds = Dataset::generate(&small()).unwrap();
        let cfg = OptimConfig {
            iterations: 2,
            n_virtual: 2,
            ..OptimConfig::default()
        };
        let mut setup = TrainSetup::new(Mode::GemsE, 5, cfg);
        setup.n_points = 30;
        let mut log = Vec::new();
        let out = train(&ds, &setup, &mut log).unwrap();
        assert_eq!(out.stages, vec!["edi", "sfm", "train"]);
        let text = String::from_utf8(log).unwrap();
        let pos = |k: &str| text.find(k).unwrap();
        assert!(pos("stage=edi") < pos("stage=sfm") && pos("stage=sfm") < pos("stage=train"));
    }
}
