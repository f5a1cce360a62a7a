//! Event data model: timestamped pixel events, fixed-interval volumes and
//! per-polarity count images.
//!
//! Indexing is row-major `[y][x]` everywhere in this crate.

use crate::error::{Error, Result};
use ndarray::Array2;

/// Sign of the brightness change that triggered an event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Polarity {
    Pos,
    Neg,
}

impl Polarity {
    /// The stored encoding: +1 for brightness increase, -1 for decrease.
    pub fn value(self) -> i8 {
        match self {
            Polarity::Pos => 1,
            Polarity::Neg => -1,
        }
    }

    pub fn from_value(v: i8) -> Option<Self> {
        match v {
            1 => Some(Polarity::Pos),
            -1 => Some(Polarity::Neg),
            _ => None,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Polarity::Pos => Polarity::Neg,
            Polarity::Neg => Polarity::Pos,
        }
    }
}

/// Sensor resolution, rows x columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SensorSize {
    pub h: usize,
    pub w: usize,
}

impl SensorSize {
    pub fn new(h: usize, w: usize) -> Self {
        Self { h, w }
    }

    pub fn contains(&self, x: u16, y: u16) -> bool {
        (x as usize) < self.w && (y as usize) < self.h
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }
}

/// A single camera event: pixel, time and polarity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    /// Pixel column, `0..W-1`.
    pub x: u16,
    /// Pixel row, `0..H-1`.
    pub y: u16,
    /// Timestamp in seconds (or in `[0,1]` after volume normalization).
    pub t: f64,
    pub p: Polarity,
}

/// All events inside one fixed time interval, ordered by timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct EventVolume {
    events: Vec<Event>,
    pub t_start: f64,
    pub t_end: f64,
    pub sensor: SensorSize,
    normalized: bool,
}

impl EventVolume {
    /// Build a volume, validating ordering, bounds and the time window.
    pub fn new(
        events: Vec<Event>,
        t_start: f64,
        t_end: f64,
        sensor: SensorSize,
    ) -> Result<Self> {
        if t_end <= t_start {
            return Err(Error::DegenerateInterval { t_start, t_end });
        }
        let mut prev = f64::NEG_INFINITY;
        for (i, e) in events.iter().enumerate() {
            if e.t < prev {
                return Err(Error::UnsortedEvents {
                    index: i,
                    t: e.t,
                    prev,
                });
            }
            prev = e.t;
            if !sensor.contains(e.x, e.y) {
                return Err(Error::EventOutOfBounds {
                    index: i,
                    x: e.x,
                    y: e.y,
                    h: sensor.h,
                    w: sensor.w,
                });
            }
        }
        Ok(Self {
            events,
            t_start,
            t_end,
            sensor,
            normalized: false,
        })
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Whether timestamps have been rescaled to `[0,1]`.
    pub fn is_normalized(&self) -> bool {
        self.normalized
    }
}

/// Slice a sorted event stream into consecutive volumes of length `interval`.
///
/// Volume `k` holds the half-open window `[k*interval, (k+1)*interval)`, so
/// boundary events belong to exactly one volume. Every window between the
/// first and last event is emitted, including empty ones.
pub fn slice_stream(
    events: &[Event],
    interval: f64,
    sensor: SensorSize,
) -> Result<Vec<EventVolume>> {
    if interval <= 0.0 {
        return Err(Error::Config(format!(
            "slice interval must be positive, got {interval}"
        )));
    }
    if events.is_empty() {
        return Ok(Vec::new());
    }
    let mut prev = f64::NEG_INFINITY;
    for (i, e) in events.iter().enumerate() {
        if e.t < prev {
            return Err(Error::UnsortedEvents {
                index: i,
                t: e.t,
                prev,
            });
        }
        prev = e.t;
    }

    let k_first = (events[0].t / interval).floor() as i64;
    let k_last = (events[events.len() - 1].t / interval).floor() as i64;
    let mut volumes = Vec::with_capacity((k_last - k_first + 1) as usize);
    let mut cursor = 0usize;
    for k in k_first..=k_last {
        let t0 = k as f64 * interval;
        let t1 = (k + 1) as f64 * interval;
        let start = cursor;
        while cursor < events.len() && events[cursor].t < t1 {
            cursor += 1;
        }
        volumes.push(EventVolume::new(
            events[start..cursor].to_vec(),
            t0,
            t1,
            sensor,
        )?);
    }
    Ok(volumes)
}

/// Rescale timestamps affinely so that `t_start -> 0` and `t_end -> 1`.
///
/// Idempotent: an already-normalized volume is returned unchanged.
pub fn normalize_timestamps(v: &EventVolume) -> Result<EventVolume> {
    if v.normalized {
        return Ok(v.clone());
    }
    let span = v.t_end - v.t_start;
    if span <= 0.0 {
        return Err(Error::DegenerateInterval {
            t_start: v.t_start,
            t_end: v.t_end,
        });
    }
    let events = v
        .events
        .iter()
        .map(|e| Event {
            t: (e.t - v.t_start) / span,
            ..*e
        })
        .collect();
    Ok(EventVolume {
        events,
        t_start: 0.0,
        t_end: 1.0,
        sensor: v.sensor,
        normalized: true,
    })
}

/// Two-channel per-polarity count representation of an event volume.
#[derive(Debug, Clone, PartialEq)]
pub struct CountImage {
    pub pos: Array2<f64>,
    pub neg: Array2<f64>,
}

impl CountImage {
    pub fn sensor(&self) -> SensorSize {
        let (h, w) = self.pos.dim();
        SensorSize::new(h, w)
    }
}

/// Accumulate per-pixel event counts, split by polarity.
pub fn count_image(v: &EventVolume) -> CountImage {
    let SensorSize { h, w } = v.sensor;
    let mut pos = Array2::zeros((h, w));
    let mut neg = Array2::zeros((h, w));
    for e in &v.events {
        let (y, x) = (e.y as usize, e.x as usize);
        match e.p {
            Polarity::Pos => pos[[y, x]] += 1.0,
            Polarity::Neg => neg[[y, x]] += 1.0,
        }
    }
    CountImage { pos, neg }
}
