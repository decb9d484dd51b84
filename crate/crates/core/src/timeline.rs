//! Interval algebra over moments and arithmetic on sampled timestamp grids.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A closed time interval `[start, end]` in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMoment")]
pub struct Moment {
    start: f64,
    end: f64,
}

#[derive(Deserialize)]
struct RawMoment {
    start: f64,
    end: f64,
}

impl TryFrom<RawMoment> for Moment {
    type Error = Error;

    fn try_from(raw: RawMoment) -> Result<Self> {
        Moment::new(raw.start, raw.end)
    }
}

impl Moment {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !start.is_finite() || !end.is_finite() {
            return Err(Error::invalid(format!("moment ({start}, {end}) is not finite")));
        }
        if start < 0.0 {
            return Err(Error::invalid(format!("moment ({start}, {end}) starts before zero")));
        }
        if start > end {
            return Err(Error::invalid(format!("moment ({start}, {end}) ends before it starts")));
        }
        Ok(Self { start, end })
    }

    /// Builds a moment from two endpoints in either order.
    pub fn ordered(a: f64, b: f64) -> Result<Self> {
        if a <= b {
            Self::new(a, b)
        } else {
            Self::new(b, a)
        }
    }

    pub fn point(t: f64) -> Result<Self> {
        Self::new(t, t)
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn end(&self) -> f64 {
        self.end
    }

    pub fn len(&self) -> f64 {
        self.end - self.start
    }

    pub fn is_point(&self) -> bool {
        self.start == self.end
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.start + self.end)
    }

    pub fn contains(&self, t: f64) -> bool {
        self.start <= t && t <= self.end
    }

    pub fn contains_moment(&self, other: &Moment) -> bool {
        self.start <= other.start && other.end <= self.end
    }

    /// Translates both endpoints, clamping the start at zero.
    pub fn shifted(&self, delta: f64) -> Moment {
        let start = (self.start + delta).max(0.0);
        let end = (self.end + delta).max(start);
        Moment { start, end }
    }

    /// Closed-interval intersection, `None` when the intervals are disjoint.
    pub fn clip(&self, window: &Moment) -> Option<Moment> {
        let start = self.start.max(window.start);
        let end = self.end.min(window.end);
        (start <= end).then_some(Moment { start, end })
    }
}

/// Length of the overlap between two moments, zero when disjoint.
pub fn intersect_len(a: &Moment, b: &Moment) -> f64 {
    (a.end.min(b.end) - a.start.max(b.start)).max(0.0)
}

/// Length of the union of two moments.
pub fn union_len(a: &Moment, b: &Moment) -> f64 {
    a.len() + b.len() - intersect_len(a, b)
}

/// The sampled timestamps of a video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameGrid {
    timestamps: Vec<f64>,
    fps: f64,
    duration: f64,
}

impl FrameGrid {
    /// Uniform grid `{0, 1/fps, 2/fps, ...}` clipped to `[0, duration]`.
    pub fn uniform(duration: f64, fps: f64) -> Result<Self> {
        if !(duration.is_finite() && duration > 0.0) {
            return Err(Error::invalid(format!("duration must be positive, got {duration}")));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::invalid(format!("fps must be positive, got {fps}")));
        }
        let last = (duration * fps + 1e-9).floor() as usize;
        let timestamps = (0..=last)
            .map(|i| (i as f64 / fps).min(duration))
            .collect();
        Ok(Self {
            timestamps,
            fps,
            duration,
        })
    }

    /// Grid over explicit timestamps, e.g. a virtual crop of a longer video.
    pub fn from_timestamps(timestamps: Vec<f64>, fps: f64, duration: f64) -> Result<Self> {
        if timestamps.is_empty() {
            return Err(Error::invalid("frame grid needs at least one timestamp"));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::invalid(format!("fps must be positive, got {fps}")));
        }
        if timestamps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("grid timestamps must be strictly increasing"));
        }
        if timestamps
            .iter()
            .any(|&t| !t.is_finite() || t < 0.0 || t > duration)
        {
            return Err(Error::invalid("grid timestamp outside [0, duration]"));
        }
        Ok(Self {
            timestamps,
            fps,
            duration,
        })
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn timestamp(&self, frame: usize) -> f64 {
        self.timestamps[frame]
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    /// Index of the grid timestamp nearest to `t`.
    pub fn nearest_frame(&self, t: f64) -> usize {
        nearest_index(&self.timestamps, t)
    }

    pub fn snap(&self, t: f64) -> f64 {
        self.timestamps[self.nearest_frame(t)]
    }
}

/// `make_grid` under its conventional name.
pub fn make_grid(duration: f64, fps: f64) -> Result<FrameGrid> {
    FrameGrid::uniform(duration, fps)
}

/// Nearest grid timestamp; ties go to the earlier timestamp and
/// out-of-range values clamp to the grid ends.
pub fn snap(t: f64, grid: &FrameGrid) -> f64 {
    grid.snap(t)
}

/// Index of the value nearest to `t` in a sorted, non-empty slice.
/// Equidistant neighbours resolve to the earlier one.
pub fn nearest_index(sorted: &[f64], t: f64) -> usize {
    assert!(!sorted.is_empty(), "nearest_index on empty slice");
    let upper = sorted.partition_point(|&x| x < t);
    if upper == 0 {
        return 0;
    }
    if upper == sorted.len() {
        return sorted.len() - 1;
    }
    let lower = upper - 1;
    if t - sorted[lower] <= sorted[upper] - t {
        lower
    } else {
        upper
    }
}
