//! Burst synthesis, blur by frame averaging, and a noiseless log-threshold
//! event simulator.

use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagebuf::ImageBuffer;
use crate::liegroup::Trajectory;
use crate::renderer::render;
use crate::scene::{Camera, SceneModel};

/// Radiance floor applied before taking logs.
pub const LOG_EPS: f64 = 1e-4;
pub const DEFAULT_THRESHOLD: f64 = 0.2;
pub const DEFAULT_BURST: usize = 11;

/// Slack on threshold comparisons so an exact `k * theta` change in log space
/// yields exactly `k` events despite rounding.
const CROSSING_SLACK: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Event {
    pub t: f64,
    pub x: u32,
    pub y: u32,
    /// `+1` or `-1`.
    pub p: i8,
    /// Color channel for per-channel streams; `None` for luminance events.
    pub channel: Option<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventMode {
    Luminance,
    PerChannel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EventStream {
    pub events: Vec<Event>,
    pub threshold: f64,
    pub window: (f64, f64),
    pub mode: EventMode,
}

impl EventStream {
    pub fn new(events: Vec<Event>, threshold: f64, window: (f64, f64), mode: EventMode) -> Result<Self> {
        if !(threshold > 0.0) {
            return Err(Error::InvalidThreshold(threshold));
        }
        if let Some(i) = events.windows(2).position(|w| w[1].t < w[0].t) {
            return Err(Error::NonMonotonicTimestamps { index: i + 1 });
        }
        Ok(Self {
            events,
            threshold,
            window,
            mode,
        })
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.window.1 - self.window.0
    }

    /// Events with `start < t <= end`, re-windowed.
    pub fn slice(&self, start: f64, end: f64) -> Self {
        let lo = self.events.partition_point(|e| e.t <= start);
        let hi = self.events.partition_point(|e| e.t <= end);
        Self {
            events: self.events[lo..hi].to_vec(),
            threshold: self.threshold,
            window: (start, end),
            mode: self.mode,
        }
    }
}

/// `count` sharp renders at `u_f = f / (count - 1)` (`u_0 = 0` when
/// `count == 1`), timestamped within `window`.
pub fn synthesize_burst(
    scene: &SceneModel,
    traj: &Trajectory,
    cam: &Camera,
    count: usize,
    window: (f64, f64),
) -> Result<Vec<(f64, ImageBuffer)>> {
    if count == 0 {
        return Err(Error::InvalidConfig("burst needs at least one frame".into()));
    }
    Trajectory::sample_positions(count)
        .into_iter()
        .map(|u| {
            let pose = traj.pose_at(u)?;
            Ok((window.0 + u * (window.1 - window.0), render(scene, &pose, cam)))
        })
        .collect()
}

pub fn average_frames(frames: &[ImageBuffer]) -> Result<ImageBuffer> {
    let first = frames
        .first()
        .ok_or_else(|| Error::InvalidConfig("cannot average zero frames".into()))?;
    let mut acc = ImageBuffer::new(first.width(), first.height());
    for f in frames {
        acc.add_assign_scaled(f, 1.0)?;
    }
    Ok(acc.scaled(1.0 / frames.len() as f64))
}

fn log_plane(img: &ImageBuffer, channel: Option<usize>) -> Vec<f64> {
    let plane = match channel {
        Some(c) => img.channel(c),
        None => img.luminance(),
    };
    plane.into_iter().map(|v| v.max(LOG_EPS).ln()).collect()
}

/// Events of one pixel across a sequence of `(time, log intensity)` samples.
fn pixel_events(samples: &[(f64, f64)], theta: f64, mut emit: impl FnMut(f64, i8)) {
    let mut reference = samples[0].1;
    for pair in samples.windows(2) {
        let ((ta, la), (tb, lb)) = (pair[0], pair[1]);
        let at = |level: f64| {
            if lb == la {
                tb
            } else {
                (ta + (level - la) / (lb - la) * (tb - ta)).clamp(ta, tb)
            }
        };
        while lb - reference >= theta - CROSSING_SLACK {
            reference += theta;
            emit(at(reference), 1);
        }
        while reference - lb >= theta - CROSSING_SLACK {
            reference -= theta;
            emit(at(reference), -1);
        }
    }
}

/// Threshold-model events from a time-sorted burst. Log intensities are
/// linearly interpolated between frames to place sub-frame timestamps.
pub fn generate_events(burst: &[(f64, ImageBuffer)], theta: f64, mode: EventMode) -> Result<EventStream> {
    if !(theta > 0.0) {
        return Err(Error::InvalidThreshold(theta));
    }
    let Some((t0, first)) = burst.first() else {
        return Err(Error::InvalidConfig("event generation needs at least one frame".into()));
    };
    for (i, w) in burst.windows(2).enumerate() {
        if !(w[1].0 > w[0].0) {
            return Err(Error::NonMonotonicTimestamps { index: i + 1 });
        }
        first.check_shape(&w[1].1)?;
    }
    let window = (*t0, burst[burst.len() - 1].0);
    let channels: Vec<Option<usize>> = match mode {
        EventMode::Luminance => vec![None],
        EventMode::PerChannel => vec![Some(0), Some(1), Some(2)],
    };
    let (w, h) = (first.width(), first.height());
    let mut events = Vec::new();
    for ch in channels {
        let logs: Vec<Vec<f64>> = burst.iter().map(|(_, img)| log_plane(img, ch)).collect();
        let rows: Vec<Vec<Event>> = (0..h)
            .into_par_iter()
            .map(|y| {
                let mut out = Vec::new();
                let mut samples = Vec::with_capacity(burst.len());
                for x in 0..w {
                    samples.clear();
                    samples.extend(burst.iter().zip(&logs).map(|((t, _), l)| (*t, l[y * w + x])));
                    pixel_events(&samples, theta, |t, p| {
                        out.push(Event {
                            t,
                            x: x as u32,
                            y: y as u32,
                            p,
                            channel: ch.map(|c| c as u8),
                        })
                    });
                }
                out
            })
            .collect();
        events.extend(rows.into_iter().flatten());
    }
    // Stable: ties keep channel, row, column, then emission order.
    events.sort_by(|a, b| a.t.total_cmp(&b.t));
    EventStream::new(events, theta, window, mode)
}

/// Right-closed bin edges `t_k = t_start + (k / b) * t_exp`.
pub fn bin_edges(window: (f64, f64), bins: usize) -> Vec<f64> {
    let dur = window.1 - window.0;
    (0..=bins).map(|k| window.0 + dur * k as f64 / bins as f64).collect()
}

/// Partitions the stream into `bins` sets with `t_{k-1} < t <= t_k`. Events at
/// or before `t_start` land in the first bin and events after `t_end` in the
/// last, so the partition is always complete.
pub fn bin_events(stream: &EventStream, bins: usize) -> Result<Vec<Vec<Event>>> {
    if bins == 0 {
        return Err(Error::InvalidConfig("bin count must be at least 1".into()));
    }
    let edges = bin_edges(stream.window, bins);
    let mut out = vec![Vec::new(); bins];
    for e in &stream.events {
        let k = edges[1..].partition_point(|edge| *edge < e.t).min(bins - 1);
        out[k].push(*e);
    }
    Ok(out)
}

/// Signed event count per pixel (per channel for per-channel streams),
/// laid out like [`ImageBuffer`] data for per-channel and row-major otherwise.
pub fn signed_counts(stream: &EventStream, width: usize, height: usize) -> Vec<i64> {
    let stride = match stream.mode {
        EventMode::Luminance => 1,
        EventMode::PerChannel => 3,
    };
    let mut out = vec![0i64; width * height * stride];
    for e in &stream.events {
        let c = e.channel.unwrap_or(0) as usize;
        out[(e.y as usize * width + e.x as usize) * stride + c] += e.p as i64;
    }
    out
}

/// One event per line: `t x y p`, plus a channel column for per-channel
/// events.
pub fn write_events<W: Write>(mut out: W, events: &[Event]) -> std::io::Result<()> {
    for e in events {
        match e.channel {
            Some(c) => writeln!(out, "{} {} {} {} {}", e.t, e.x, e.y, e.p, c)?,
            None => writeln!(out, "{} {} {} {}", e.t, e.x, e.y, e.p)?,
        }
    }
    Ok(())
}

pub fn read_events<R: BufRead>(input: R) -> Result<Vec<Event>> {
    let mut events = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::parse(i + 1, e.to_string()))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 4 && f.len() != 5 {
            return Err(Error::parse(i + 1, format!("expected 4 or 5 fields, got {}", f.len())));
        }
        let bad = |what: &str| Error::parse(i + 1, format!("bad {what}"));
        let t: f64 = f[0].parse().map_err(|_| bad("timestamp"))?;
        if !t.is_finite() {
            return Err(bad("timestamp"));
        }
        let p: i8 = f[3].parse().map_err(|_| bad("polarity"))?;
        if p != 1 && p != -1 {
            return Err(bad("polarity"));
        }
        let channel = match f.get(4) {
            Some(c) => {
                let c: u8 = c.parse().map_err(|_| bad("channel"))?;
                if c > 2 {
                    return Err(bad("channel"));
                }
                Some(c)
            }
            None => None,
        };
        events.push(Event {
            t,
            x: f[1].parse().map_err(|_| bad("x"))?,
            y: f[2].parse().map_err(|_| bad("y"))?,
            p,
            channel,
        });
    }
    Ok(events)
}
