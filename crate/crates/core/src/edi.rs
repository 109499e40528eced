//! Event-based double integral deblurring.
//!
//! A blurred frame is the time average of latent frames, and events tie every
//! latent frame to the one at time `f` through `L(t) = L(f) exp(theta E(f, t))`
//! where `E` is the signed event count between `f` and `t`. Discretizing the
//! exposure into `b` bins evaluated at their centers gives
//! `L(f) = B b / sum_k exp(theta E(f, c_k))`.

use crate::error::{Error, Result};
use crate::eventsim::{bin_edges, EventMode, EventStream};
use crate::imagebuf::ImageBuffer;

pub const DEFAULT_BINS: usize = 13;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdiConfig {
    pub threshold: f64,
    pub bins: usize,
    /// Normalized position in the exposure, `0` at the start and `1` at the end.
    pub latent_time: f64,
}

impl Default for EdiConfig {
    fn default() -> Self {
        Self {
            threshold: crate::eventsim::DEFAULT_THRESHOLD,
            bins: DEFAULT_BINS,
            latent_time: 0.5,
        }
    }
}

impl EdiConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0) {
            return Err(Error::InvalidThreshold(self.threshold));
        }
        if self.bins < 2 {
            return Err(Error::InvalidConfig(format!("EDI needs at least 2 bins, got {}", self.bins)));
        }
        if !(0.0..=1.0).contains(&self.latent_time) {
            return Err(Error::InvalidConfig(format!("latent time {} outside [0, 1]", self.latent_time)));
        }
        Ok(())
    }
}

/// Per-pixel (per-channel) factor `b / sum_k exp(theta E(f, c_k))`.
fn latent_factors(stream: &EventStream, width: usize, height: usize, cfg: &EdiConfig) -> Vec<f64> {
    let (t0, t1) = stream.window;
    let edges = bin_edges(stream.window, cfg.bins);
    // Query times: bin centers, then the latent time last.
    let mut queries: Vec<f64> = edges.windows(2).map(|e| 0.5 * (e[0] + e[1])).collect();
    queries.push(t0 + cfg.latent_time * (t1 - t0));
    let mut order: Vec<usize> = (0..queries.len()).collect();
    order.sort_by(|a, b| queries[*a].total_cmp(&queries[*b]));
    let sorted: Vec<f64> = order.iter().map(|i| queries[*i]).collect();

    let stride = match stream.mode {
        EventMode::Luminance => 1,
        EventMode::PerChannel => 3,
    };
    let nq = queries.len();
    // delta[slot][j] accumulates events whose first covering sorted query is j.
    let mut delta = vec![0i64; width * height * stride * nq];
    for e in &stream.events {
        let j = sorted.partition_point(|q| *q < e.t);
        if j < nq {
            let slot = (e.y as usize * width + e.x as usize) * stride + e.channel.unwrap_or(0) as usize;
            delta[slot * nq + j] += e.p as i64;
        }
    }
    let latent_rank = order.iter().position(|i| *i == nq - 1).expect("latent query present");
    let mut factors = vec![1.0; width * height * stride];
    let mut cum = vec![0i64; nq];
    for (slot, f) in factors.iter_mut().enumerate() {
        let d = &delta[slot * nq..(slot + 1) * nq];
        if d.iter().all(|v| *v == 0) {
            continue;
        }
        let mut acc = 0;
        for j in 0..nq {
            acc += d[j];
            cum[j] = acc;
        }
        let at_latent = cum[latent_rank];
        let denom: f64 = (0..nq)
            .filter(|j| *j != latent_rank)
            .map(|j| (cfg.threshold * (cum[j] - at_latent) as f64).exp())
            .sum();
        *f = cfg.bins as f64 / denom;
    }
    factors
}

/// Latent sharp image at `cfg.latent_time` from a blurred frame whose exposure
/// spans `window`, clamped to `[0, 1]`.
pub fn edi_deblur(blur: &ImageBuffer, window: (f64, f64), stream: &EventStream, cfg: &EdiConfig) -> Result<ImageBuffer> {
    cfg.validate()?;
    let tol = 1e-9 * (1.0 + window.0.abs().max(window.1.abs()));
    if (stream.window.0 - window.0).abs() > tol || (stream.window.1 - window.1).abs() > tol {
        return Err(Error::WindowMismatch {
            stream_start: stream.window.0,
            stream_end: stream.window.1,
            start: window.0,
            end: window.1,
        });
    }
    let (w, h) = (blur.width(), blur.height());
    if let Some(e) = stream.events.iter().find(|e| e.x as usize >= w || e.y as usize >= h) {
        return Err(Error::ShapeMismatch {
            expected: format!("events inside {w}x{h}"),
            actual: format!("event at ({}, {})", e.x, e.y),
        });
    }
    if stream.is_empty() {
        return Ok(blur.clone());
    }
    let factors = latent_factors(stream, w, h, cfg);
    let mut out = blur.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let f = match stream.mode {
            // Luminance events scale all channels alike, which transfers the
            // blurred frame's chroma.
            EventMode::Luminance => factors[i / 3],
            EventMode::PerChannel => factors[i],
        };
        *v = (*v * f).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// EDI output that may seed pose initialization but is never a training
/// target. There is deliberately no conversion into the optimizer's
/// observation type.
#[derive(Clone, Debug, PartialEq)]
pub struct InitOnlyImage {
    image: ImageBuffer,
    degraded: bool,
}

impl InitOnlyImage {
    pub fn image(&self) -> &ImageBuffer {
        &self.image
    }

    /// True when no usable events were available and the blur passed through.
    pub fn degraded(&self) -> bool {
        self.degraded
    }

    pub fn supervision_allowed(&self) -> bool {
        false
    }
}

/// One blurred view with its exposure window and event stream.
pub struct EdiView<'a> {
    pub blur: &'a ImageBuffer,
    pub window: (f64, f64),
    pub stream: &'a EventStream,
}

/// Batch EDI. A failing view is reported in place and does not stop the
/// batch.
pub fn edi_init_views(views: &[EdiView<'_>], cfg: &EdiConfig) -> Vec<Result<InitOnlyImage>> {
    views
        .iter()
        .map(|v| {
            let image = edi_deblur(v.blur, v.window, v.stream, cfg)?;
            Ok(InitOnlyImage {
                image,
                degraded: v.stream.is_empty(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eventsim::{average_frames, generate_events, Event};
    use crate::metrics::psnr;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn empty(window: (f64, f64)) -> EventStream {
        EventStream::new(vec![], 0.2, window, EventMode::Luminance).unwrap()
    }

    #[test]
    fn empty_stream_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = ImageBuffer::from_fn(5, 4, |_, _, _| rng.random());
        assert_eq!(edi_deblur(&b, (0.0, 1.0), &empty((0.0, 1.0)), &EdiConfig::default()).unwrap(), b);
    }

    #[test]
    fn rejects_bad_window_and_threshold() {
        let b = ImageBuffer::filled(2, 2, 0.5);
        assert!(matches!(
            edi_deblur(&b, (0.0, 2.0), &empty((0.0, 1.0)), &EdiConfig::default()),
            Err(Error::WindowMismatch { .. })
        ));
        let cfg = EdiConfig {
            threshold: 0.0,
            ..EdiConfig::default()
        };
        assert!(edi_deblur(&b, (0.0, 1.0), &empty((0.0, 1.0)), &cfg).is_err());
    }

    #[test]
    fn positive_events_after_latent_time_darken() {
        let b = ImageBuffer::filled(1, 1, 0.6);
        let events = (0..4)
            .map(|i| Event {
                t: 0.6 + 0.1 * i as f64,
                x: 0,
                y: 0,
                p: 1,
                channel: None,
            })
            .collect();
        let s = EventStream::new(events, 0.2, (0.0, 1.0), EventMode::Luminance).unwrap();
        let out = edi_deblur(&b, (0.0, 1.0), &s, &EdiConfig::default()).unwrap();
        assert!(out.data().iter().all(|v| *v <= 0.6));
        assert!(out.data()[0] < 0.6);
    }

    fn moving_burst(rng: &mut ChaCha8Rng, w: usize, frames: usize) -> Vec<(f64, ImageBuffer)> {
        // A smooth pattern translating horizontally.
        let phase: f64 = rng.random_range(0.0..6.0);
        (0..frames)
            .map(|f| {
                let s = f as f64 / (frames - 1) as f64;
                let img = ImageBuffer::from_fn(w, w, |x, y, c| {
                    let u = x as f64 * 0.35 - 2.0 * s + phase + c as f64;
                    0.15 + 0.3 * (1.0 + (u).sin() * (y as f64 * 0.2).cos())
                });
                (s, img)
            })
            .collect()
    }

    #[test]
    fn linear_in_blur() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let burst = moving_burst(&mut rng, 12, 11);
        let stream = generate_events(&burst, 0.2, EventMode::Luminance).unwrap();
        let frames: Vec<_> = burst.iter().map(|(_, f)| f.clone()).collect();
        let blur = average_frames(&frames).unwrap().scaled(0.5);
        let cfg = EdiConfig::default();
        let a = edi_deblur(&blur, (0.0, 1.0), &stream, &cfg).unwrap();
        let b = edi_deblur(&blur.scaled(0.5), (0.0, 1.0), &stream, &cfg).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((0.5 * x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn deblurs_self_consistent_burst() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let burst = moving_burst(&mut rng, 24, 11);
        let frames: Vec<_> = burst.iter().map(|(_, f)| f.clone()).collect();
        let blur = average_frames(&frames).unwrap();
        let stream = generate_events(&burst, 0.05, EventMode::PerChannel).unwrap();
        let cfg = EdiConfig {
            threshold: 0.05,
            ..EdiConfig::default()
        };
        let latent = edi_deblur(&blur, (0.0, 1.0), &stream, &cfg).unwrap();
        let before = psnr(&blur, &frames[5]).unwrap();
        let after = psnr(&latent, &frames[5]).unwrap();
        assert!(after > before + 5.0, "{before} -> {after}");
    }

    #[test]
    fn batch_flags() {
        let b = ImageBuffer::filled(3, 3, 0.4);
        let s = empty((0.0, 1.0));
        let bad = empty((0.0, 2.0));
        let views = [
            EdiView {
                blur: &b,
                window: (0.0, 1.0),
                stream: &s,
            },
            EdiView {
                blur: &b,
                window: (0.0, 1.0),
                stream: &bad,
            },
        ];
        let out = edi_init_views(&views, &EdiConfig::default());
        let first = out[0].as_ref().unwrap();
        assert!(first.degraded() && !first.supervision_allowed());
        assert_eq!(first.image(), &b);
        assert!(out[1].is_err());
    }
}
