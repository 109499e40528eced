use blursplat::eventsim::{generate_events, signed_counts, EventMode, LOG_EPS};
use blursplat::imagebuf::ImageBuffer;
use blursplat::liegroup::{bernstein, se3_exp, se3_log, SE3Pose, Trajectory, TrajectoryKind, Twist};
use blursplat::metrics::{ape_poses, psnr, ssim};
use blursplat::renderer::{average_renders, render, render_alpha, render_blurred};
use blursplat::scene::{Camera, Gaussian3D, SceneModel};
use nalgebra::{Quaternion, Vector3};
use proptest::prelude::*;

fn vec3(r: f64) -> impl Strategy<Value = Vector3<f64>> {
    [-r..r, -r..r, -r..r].prop_map(|[x, y, z]| Vector3::new(x, y, z))
}

fn twist(max_rho: f64, max_omega: f64) -> impl Strategy<Value = Twist> {
    (vec3(max_rho), vec3(max_omega)).prop_filter_map("rotation angle above bound", move |(rho, omega)| {
        (omega.norm() <= max_omega).then(|| Twist::new(rho, omega))
    })
}

fn pose(max_rho: f64, max_omega: f64) -> impl Strategy<Value = SE3Pose> {
    twist(max_rho, max_omega).prop_map(|xi| se3_exp(&xi))
}

fn image(w: usize, h: usize) -> impl Strategy<Value = ImageBuffer> {
    prop::collection::vec(0.0..1.0f64, w * h * 3).prop_map(move |v| ImageBuffer::from_fn(w, h, |x, y, c| v[(y * w + x) * 3 + c]))
}

fn gaussian() -> impl Strategy<Value = Gaussian3D> {
    (vec3(1.0), [-1.0..1.0f64, -1.0..1.0, -1.0..1.0, -1.0..1.0], vec3(1.0), -3.0..3.0f64, [0.0..1.0f64, 0.0..1.0, 0.0..1.0])
        .prop_filter_map("degenerate quaternion", |(mu, q, s, o, c)| {
            let q = Quaternion::new(q[0], q[1], q[2], q[3]);
            (q.norm() > 0.1).then(|| {
                Gaussian3D::new(mu, q, s.map(|v| (0.05 + 0.1 * (v + 1.0)).ln()), o, Vector3::new(c[0], c[1], c[2]))
            })
        })
}

fn scene(max: usize) -> impl Strategy<Value = SceneModel> {
    prop::collection::vec(gaussian(), 1..max).prop_map(|gs| {
        let n = gs.len();
        SceneModel::from_gaussians(gs, n).unwrap()
    })
}

fn camera() -> Camera {
    Camera::new(20.0, 20.0, 12.0, 10.0, 24, 20).unwrap()
}

fn viewing_pose() -> impl Strategy<Value = SE3Pose> {
    (vec3(0.3), vec3(0.1)).prop_map(|(dt, omega)| {
        let base = SE3Pose::from_translation(Vector3::new(0.0, 0.0, 5.0) + dt);
        se3_exp(&Twist::new(Vector3::zeros(), omega)) * base
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exp_log_roundtrip(xi in twist(5.0, 3.0)) {
        let back = se3_log(&se3_exp(&xi)).unwrap();
        prop_assert!((back.to_vector() - xi.to_vector()).norm() < 1e-9);
    }

    #[test]
    fn exp_stays_on_the_group(xi in twist(5.0, 3.0)) {
        prop_assert!(se3_exp(&xi).orthonormality_error() < 1e-12);
    }

    #[test]
    fn inverse_composes_to_identity(p in pose(5.0, 3.0)) {
        prop_assert!((p * p.inverse()).frobenius_distance(&SE3Pose::identity()) < 1e-12);
    }

    #[test]
    fn bernstein_is_a_partition_of_unity(degree in 0usize..12, u in 0.0..=1.0f64) {
        let sum: f64 = (0..=degree).map(|i| bernstein(degree, i, u).unwrap()).sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn trajectories_interpolate_their_endpoints(
        controls in prop::collection::vec(pose(2.0, 1.0), 4..8),
        kind in prop_oneof![Just(TrajectoryKind::Bezier), Just(TrajectoryKind::Linear)],
    ) {
        let controls = if kind == TrajectoryKind::Linear { controls[..2].to_vec() } else { controls };
        let traj = Trajectory::from_controls(kind, controls.clone(), 1.0).unwrap();
        prop_assert!(traj.pose_at(0.0).unwrap().frobenius_distance(&controls[0]) < 1e-12);
        prop_assert!(traj.pose_at(1.0).unwrap().frobenius_distance(controls.last().unwrap()) < 1e-12);
    }

    #[test]
    fn constant_trajectories_do_not_move(
        p in pose(2.0, 1.0),
        kind in prop_oneof![Just(TrajectoryKind::Bezier), Just(TrajectoryKind::Linear), Just(TrajectoryKind::Spline)],
        u in 0.0..=1.0f64,
    ) {
        let n = if kind == TrajectoryKind::Linear { 2 } else { 5 };
        let traj = Trajectory::constant(kind, p, n, 1.0).unwrap();
        prop_assert!(traj.pose_at(u).unwrap().frobenius_distance(&p) < 1e-12);
    }

    #[test]
    fn sample_positions_span_the_exposure(n in 2usize..40) {
        let u = Trajectory::sample_positions(n);
        prop_assert_eq!(u.len(), n);
        prop_assert_eq!(u[0], 0.0);
        prop_assert_eq!(u[n - 1], 1.0);
        prop_assert!(u.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn event_counts_conserve_log_change(
        frames in prop::collection::vec(image(3, 2), 2..6),
        theta in 0.05..0.5f64,
    ) {
        let burst: Vec<(f64, ImageBuffer)> = frames.iter().enumerate().map(|(i, f)| (i as f64, f.clone())).collect();
        let stream = generate_events(&burst, theta, EventMode::PerChannel).unwrap();
        let (first, last) = (&frames[0], &frames[frames.len() - 1]);
        let counts = signed_counts(&stream, 3, 2);
        for y in 0..2 {
            for x in 0..3 {
                for c in 0..3 {
                    let dl = last.get(x, y)[c].max(LOG_EPS).ln() - first.get(x, y)[c].max(LOG_EPS).ln();
                    prop_assert!((counts[(y * 3 + x) * 3 + c] as f64 * theta - dl).abs() <= theta + 1e-9);
                }
            }
        }
    }

    #[test]
    fn events_are_time_ordered_and_in_window(frames in prop::collection::vec(image(3, 2), 2..5)) {
        let burst: Vec<(f64, ImageBuffer)> = frames.iter().enumerate().map(|(i, f)| (0.5 * i as f64, f.clone())).collect();
        let stream = generate_events(&burst, 0.1, EventMode::Luminance).unwrap();
        prop_assert!(stream.events.windows(2).all(|w| w[0].t <= w[1].t));
        prop_assert!(stream.events.iter().all(|e| e.t > stream.window.0 && e.t <= stream.window.1));
    }

    #[test]
    fn psnr_and_ssim_are_symmetric(a in image(12, 12), b in image(12, 12)) {
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        prop_assert!(ssim(&a, &b).unwrap() <= 1.0 + 1e-12);
    }

    #[test]
    fn ape_vanishes_on_identical_trajectories(poses in prop::collection::vec(pose(3.0, 1.0), 1..10)) {
        for align in [false, true] {
            prop_assert!(ape_poses(&poses, &poses, align).unwrap().rmse < 1e-9);
        }
    }

    #[test]
    fn renders_stay_in_color_range(s in scene(12), p in viewing_pose()) {
        let cam = camera();
        let img = render(&s, &p, &cam);
        prop_assert!(img.data().iter().all(|v| v.is_finite() && (-1e-12..=1.0 + 1e-12).contains(v)));
        prop_assert!(render_alpha(&s, &p, &cam).iter().all(|a| (0.0..=1.0).contains(a)));
    }

    #[test]
    fn blurred_render_is_the_mean_of_its_samples(
        s in scene(8),
        a in viewing_pose(),
        b in viewing_pose(),
        n in 1usize..6,
    ) {
        let cam = camera();
        let traj = Trajectory::from_controls(TrajectoryKind::Linear, vec![a, b], 1.0).unwrap();
        let (blurred, poses) = render_blurred(&s, &traj, &cam, n).unwrap();
        let mean = average_renders(&s, &poses, &cam);
        prop_assert!(blurred.data().iter().zip(mean.data()).all(|(x, y)| (x - y).abs() < 1e-12));
        if n == 1 {
            prop_assert_eq!(blurred, render(&s, &a, &cam));
        }
    }
}
