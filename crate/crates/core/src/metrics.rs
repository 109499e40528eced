//! Image quality and pose accuracy metrics.

use std::fmt::Write as _;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::imagebuf::ImageBuffer;
use crate::liegroup::SE3Pose;

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

pub fn mse(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    a.check_shape(b)?;
    let n = a.data().len().max(1) as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// `10 log10(1 / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (-10.0 * mse.log10()).min(PSNR_CAP)
    }
}

/// Normalized 1D Gaussian taps; the 2D window is their outer product.
pub(crate) fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let taps: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Window actually used for an image: 11, shrunk to the largest odd size
/// that fits when the image is smaller.
fn window_size(width: usize, height: usize) -> usize {
    let m = width.min(height).min(SSIM_WINDOW);
    if m.is_multiple_of(2) {
        m.saturating_sub(1).max(1)
    } else {
        m
    }
}

/// Separable "valid" correlation of a row-major plane.
fn correlate_valid(plane: &[f64], w: usize, h: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = taps.len();
    let ow = w + 1 - k;
    let oh = h + 1 - k;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            tmp[y * ow + x] = taps.iter().zip(&row[x..x + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut s = 0.0;
            for (i, t) in taps.iter().enumerate() {
                s += t * tmp[(y + i) * ow + x];
            }
            out[y * ow + x] = s;
        }
    }
    (out, ow, oh)
}

/// Adjoint of [`correlate_valid`]: scatters a valid-sized map back onto the
/// full plane.
fn correlate_valid_adjoint(map: &[f64], ow: usize, oh: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let w = ow + k - 1;
    let h = oh + k - 1;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = map[y * ow + x];
            for (i, t) in taps.iter().enumerate() {
                tmp[(y + i) * ow + x] += t * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = tmp[y * ow + x];
            for (i, t) in taps.iter().enumerate() {
                out[y * w + x + i] += t * v;
            }
        }
    }
    out
}

/// Mean SSIM of one channel plane, plus `d(mean SSIM)/d(x)` when requested.
fn ssim_plane(x: &[f64], y: &[f64], w: usize, h: usize, want_grad: bool) -> (f64, Option<Vec<f64>>) {
    let taps = gaussian_taps(window_size(w, h), SSIM_SIGMA);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let (mx, ow, oh) = correlate_valid(x, w, h, &taps);
    let (my, _, _) = correlate_valid(y, w, h, &taps);
    let (exx, _, _) = correlate_valid(&xx, w, h, &taps);
    let (eyy, _, _) = correlate_valid(&yy, w, h, &taps);
    let (exy, _, _) = correlate_valid(&xy, w, h, &taps);
    let n = (ow * oh) as f64;
    let mut total = 0.0;
    let mut g_mu = vec![0.0; ow * oh];
    let mut g_xx = vec![0.0; ow * oh];
    let mut g_xy = vec![0.0; ow * oh];
    for p in 0..ow * oh {
        let (ux, uy) = (mx[p], my[p]);
        let vx = exx[p] - ux * ux;
        let vy = eyy[p] - uy * uy;
        let cxy = exy[p] - ux * uy;
        let a1 = 2.0 * ux * uy + SSIM_C1;
        let a2 = 2.0 * cxy + SSIM_C2;
        let b1 = ux * ux + uy * uy + SSIM_C1;
        let b2 = vx + vy + SSIM_C2;
        let s = a1 * a2 / (b1 * b2);
        total += s;
        if want_grad {
            g_mu[p] = s * (2.0 * uy / a1 - 2.0 * uy / a2 - 2.0 * ux / b1 + 2.0 * ux / b2) / n;
            g_xx[p] = -s / b2 / n;
            g_xy[p] = 2.0 * s / a2 / n;
        }
    }
    if !want_grad {
        return (total / n, None);
    }
    let d_mu = correlate_valid_adjoint(&g_mu, ow, oh, &taps);
    let d_xx = correlate_valid_adjoint(&g_xx, ow, oh, &taps);
    let d_xy = correlate_valid_adjoint(&g_xy, ow, oh, &taps);
    let grad = (0..w * h)
        .map(|q| d_mu[q] + 2.0 * x[q] * d_xx[q] + y[q] * d_xy[q])
        .collect();
    (total / n, Some(grad))
}

/// Mean SSIM over valid window positions and the three channels.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    a.check_shape(b)?;
    let (w, h) = (a.width(), a.height());
    let mut s = 0.0;
    for c in 0..3 {
        s += ssim_plane(&a.channel(c), &b.channel(c), w, h, false).0;
    }
    Ok(s / 3.0)
}

/// SSIM together with its gradient with respect to `a`.
pub fn ssim_with_gradient(a: &ImageBuffer, b: &ImageBuffer) -> Result<(f64, ImageBuffer)> {
    a.check_shape(b)?;
    let (w, h) = (a.width(), a.height());
    let mut s = 0.0;
    let mut grad = ImageBuffer::new(w, h);
    for c in 0..3 {
        let (v, g) = ssim_plane(&a.channel(c), &b.channel(c), w, h, true);
        s += v / 3.0;
        for (i, gv) in g.expect("gradient requested").into_iter().enumerate() {
            grad.data_mut()[i * 3 + c] = gv / 3.0;
        }
    }
    Ok((s, grad))
}

/// Translation error statistics in meters.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ApeStats {
    pub rmse: f64,
    pub mean: f64,
    pub median: f64,
    pub std: f64,
    pub max: f64,
}

impl ApeStats {
    pub fn from_errors(errors: &[f64]) -> Self {
        if errors.is_empty() {
            return Self::default();
        }
        let n = errors.len() as f64;
        let mean = errors.iter().sum::<f64>() / n;
        let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
        let var = errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
        let mut sorted = errors.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mid = sorted.len() / 2;
        let median = if sorted.len().is_multiple_of(2) {
            0.5 * (sorted[mid - 1] + sorted[mid])
        } else {
            sorted[mid]
        };
        Self {
            rmse,
            mean,
            median,
            std: var.sqrt(),
            max: sorted[sorted.len() - 1],
        }
    }
}

/// Rotation and translation minimizing `sum |R src_i + t - dst_i|^2` (no scale).
pub fn rigid_align(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> (Matrix3<f64>, Vector3<f64>) {
    let n = src.len().max(1) as f64;
    let cs = src.iter().sum::<Vector3<f64>>() / n;
    let cd = dst.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        cov += (d - cd) * (s - cs).transpose();
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut fix = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        fix[(2, 2)] = -1.0;
    }
    let r = u * fix * v_t;
    (r, cd - r * cs)
}

/// Absolute pose error on camera centers, optionally after rigid alignment
/// of the estimate onto the ground truth.
pub fn ape(est: &[(f64, SE3Pose)], gt: &[(f64, SE3Pose)], align: bool) -> Result<ApeStats> {
    if est.len() != gt.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} poses", gt.len()),
            actual: format!("{} poses", est.len()),
        });
    }
    for (i, ((te, _), (tg, _))) in est.iter().zip(gt).enumerate() {
        if (te - tg).abs() > 1e-6 {
            return Err(Error::ShapeMismatch {
                expected: format!("timestamp {tg} at index {i}"),
                actual: format!("timestamp {te}"),
            });
        }
    }
    let e: Vec<Vector3<f64>> = est.iter().map(|(_, p)| p.camera_center()).collect();
    let g: Vec<Vector3<f64>> = gt.iter().map(|(_, p)| p.camera_center()).collect();
    let (r, t) = if align && !e.is_empty() {
        rigid_align(&e, &g)
    } else {
        (Matrix3::identity(), Vector3::zeros())
    };
    let errors: Vec<f64> = e.iter().zip(&g).map(|(a, b)| (r * a + t - b).norm()).collect();
    Ok(ApeStats::from_errors(&errors))
}

/// [`ape`] for untimestamped pose lists matched by index.
pub fn ape_poses(est: &[SE3Pose], gt: &[SE3Pose], align: bool) -> Result<ApeStats> {
    let tag = |v: &[SE3Pose]| v.iter().enumerate().map(|(i, p)| (i as f64, *p)).collect::<Vec<_>>();
    ape(&tag(est), &tag(gt), align)
}

fn median(values: &[f64]) -> f64 {
    ApeStats::from_errors(values).median
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub view_names: Vec<String>,
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    pub ape: Option<ApeStats>,
}

impl EvalReport {
    pub fn push_view(&mut self, name: impl Into<String>, psnr: f64, ssim: f64) {
        self.view_names.push(name.into());
        self.psnr.push(psnr);
        self.ssim.push(ssim);
    }

    pub fn mean_psnr(&self) -> f64 {
        self.psnr.iter().sum::<f64>() / self.psnr.len().max(1) as f64
    }

    pub fn mean_ssim(&self) -> f64 {
        self.ssim.iter().sum::<f64>() / self.ssim.len().max(1) as f64
    }

    pub fn median_psnr(&self) -> f64 {
        median(&self.psnr)
    }

    pub fn median_ssim(&self) -> f64 {
        median(&self.ssim)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<16} {:>10} {:>8}", "view", "psnr_db", "ssim");
        for ((name, p), q) in self.view_names.iter().zip(&self.psnr).zip(&self.ssim) {
            let _ = writeln!(s, "{name:<16} {p:>10.4} {q:>8.5}");
        }
        let _ = writeln!(s, "{:<16} {:>10.4} {:>8.5}", "mean", self.mean_psnr(), self.mean_ssim());
        let _ = writeln!(s, "{:<16} {:>10.4} {:>8.5}", "median", self.median_psnr(), self.median_ssim());
        if let Some(a) = &self.ape {
            let _ = writeln!(
                s,
                "{:<16} {:>10} {:>10} {:>10} {:>10} {:>10}",
                "ape_m", "rmse", "mean", "median", "std", "max"
            );
            let _ = writeln!(
                s,
                "{:<16} {:>10.6} {:>10.6} {:>10.6} {:>10.6} {:>10.6}",
                "", a.rmse, a.mean, a.median, a.std, a.max
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("kind,name,psnr_db,ssim,ape_rmse,ape_mean,ape_median,ape_std,ape_max\n");
        for ((name, p), q) in self.view_names.iter().zip(&self.psnr).zip(&self.ssim) {
            let _ = writeln!(s, "view,{name},{p},{q},,,,,");
        }
        let _ = writeln!(s, "summary,mean,{},{},,,,,", self.mean_psnr(), self.mean_ssim());
        let _ = writeln!(s, "summary,median,{},{},,,,,", self.median_psnr(), self.median_ssim());
        if let Some(a) = &self.ape {
            let _ = writeln!(s, "ape,translation,,,{},{},{},{},{}", a.rmse, a.mean, a.median, a.std, a.max);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::liegroup::{se3_exp, Twist};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> ImageBuffer {
        ImageBuffer::from_fn(w, h, |_, _, _| rng.random())
    }

    /// Second implementation: direct windowed loops with centered moments.
    fn reference_ssim(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
        let k = SSIM_WINDOW;
        let g1 = {
            let c = (k as f64 - 1.0) / 2.0;
            let raw: Vec<f64> = (0..k).map(|i| (-(i as f64 - c).powi(2) / (2.0 * 1.5 * 1.5)).exp()).collect();
            let s: f64 = raw.iter().sum();
            raw.iter().map(|v| v / s).collect::<Vec<_>>()
        };
        let mut total = 0.0;
        let mut count = 0;
        for c in 0..3 {
            for y0 in 0..=a.height() - k {
                for x0 in 0..=a.width() - k {
                    let mut wsum = 0.0;
                    let (mut ma, mut mb) = (0.0, 0.0);
                    for j in 0..k {
                        for i in 0..k {
                            let w = g1[i] * g1[j];
                            wsum += w;
                            ma += w * a.get(x0 + i, y0 + j)[c];
                            mb += w * b.get(x0 + i, y0 + j)[c];
                        }
                    }
                    ma /= wsum;
                    mb /= wsum;
                    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                    for j in 0..k {
                        for i in 0..k {
                            let w = g1[i] * g1[j] / wsum;
                            let da = a.get(x0 + i, y0 + j)[c] - ma;
                            let db = b.get(x0 + i, y0 + j)[c] - mb;
                            va += w * da * da;
                            vb += w * db * db;
                            cov += w * da * db;
                        }
                    }
                    total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                        / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                    count += 1;
                }
            }
        }
        total / count as f64
    }

    #[test]
    fn identical_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_image(&mut rng, 20, 16);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        assert_abs_diff_eq!(ssim(&a, &a).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn constant_offset_psnr_is_20db() {
        let a = ImageBuffer::filled(16, 16, 0.3);
        let b = ImageBuffer::filled(16, 16, 0.4);
        assert_abs_diff_eq!(psnr(&a, &b).unwrap(), 20.0, epsilon = 1e-9);
    }

    #[test]
    fn ssim_matches_reference_and_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..3 {
            let a = random_image(&mut rng, 23, 17);
            let b = random_image(&mut rng, 23, 17);
            let s = ssim(&a, &b).unwrap();
            assert!((s - reference_ssim(&a, &b)).abs() < 1e-6);
            assert!((s - ssim(&b, &a).unwrap()).abs() < 1e-9);
            assert!((-1.0..=1.0).contains(&s));
        }
    }

    #[test]
    fn ssim_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_image(&mut rng, 14, 13);
        let b = random_image(&mut rng, 14, 13);
        let (_, grad) = ssim_with_gradient(&a, &b).unwrap();
        let h = 1e-6;
        for idx in (0..a.data().len()).step_by(7) {
            let mut p = a.clone();
            p.data_mut()[idx] += h;
            let mut m = a.clone();
            m.data_mut()[idx] -= h;
            let fd = (ssim(&p, &b).unwrap() - ssim(&m, &b).unwrap()) / (2.0 * h);
            let an = grad.data()[idx];
            assert!((fd - an).abs() <= 1e-4 * fd.abs().max(1e-6) + 1e-9, "{idx}: {fd} vs {an}");
        }
    }

    #[test]
    fn psnr_is_monotone_in_mse() {
        let mut last = f64::INFINITY;
        for k in 1..20 {
            let p = psnr_from_mse(k as f64 * 1e-3);
            assert!(p < last);
            last = p;
        }
    }

    fn trajectory(rng: &mut ChaCha8Rng, n: usize) -> Vec<SE3Pose> {
        (0..n)
            .map(|_| {
                se3_exp(&Twist::from_slice(&std::array::from_fn(|k| {
                    if k < 3 {
                        rng.random_range(-3.0..3.0)
                    } else {
                        rng.random_range(-0.5..0.5)
                    }
                })))
            })
            .collect()
    }

    #[test]
    fn ape_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gt = trajectory(&mut rng, 12);
        let zero = ape_poses(&gt, &gt, false).unwrap();
        assert_eq!(zero, ApeStats::default());

        // Shift every camera center by (1, 0, 0).
        let shift = SE3Pose::from_translation(Vector3::new(1.0, 0.0, 0.0));
        let shifted: Vec<_> = gt.iter().map(|p| *p * shift.inverse()).collect();
        for (a, b) in shifted.iter().zip(&gt) {
            assert_abs_diff_eq!(a.camera_center() - b.camera_center(), Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-12);
        }
        let s = ape_poses(&shifted, &gt, false).unwrap();
        assert_abs_diff_eq!(s.rmse, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.mean, 1.0, epsilon = 1e-12);
        let s = ape_poses(&shifted, &gt, true).unwrap();
        assert!(s.rmse < 1e-9);

        assert!(ape_poses(&gt[..3], &gt, false).is_err());
    }

    #[test]
    fn ape_is_invariant_to_common_rigid_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gt = trajectory(&mut rng, 10);
        let est = trajectory(&mut rng, 10);
        let g = se3_exp(&Twist::from_slice(&[0.5, -2.0, 1.0, 0.3, -0.2, 0.9]));
        // Moving the world by g turns world-to-camera poses T into T g^-1.
        let move_world = |v: &[SE3Pose]| v.iter().map(|p| *p * g.inverse()).collect::<Vec<_>>();
        for align in [false, true] {
            let a = ape_poses(&est, &gt, align).unwrap();
            let b = ape_poses(&move_world(&est), &move_world(&gt), align).unwrap();
            assert!((a.rmse - b.rmse).abs() < 1e-9);
            assert!((a.max - b.max).abs() < 1e-9);
        }
    }

    #[test]
    fn report_formats() {
        let mut r = EvalReport::default();
        r.push_view("v0", 30.0, 0.9);
        r.push_view("v1", 20.0, 0.7);
        r.ape = Some(ApeStats::from_errors(&[0.1, 0.3]));
        assert_abs_diff_eq!(r.mean_psnr(), 25.0);
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 6);
        assert!(r.to_text().contains("median"));
    }
}
