//! Reference speed profiles.
//!
//! A profile is an ordered list of segments, each starting at a given time and
//! heading for a per-unit target. A `step` segment jumps to its target at its
//! start instant and holds it. A `ramp` segment moves linearly from the value
//! in force at its start to its target, arriving exactly when the next segment
//! begins (or at the end of the profile).
//!
//! The two stress-test generators draw targets from a fixed alphabet with a
//! ChaCha8 stream seeded from a `u64`, so a seed reproduces the same profile
//! on every platform. Consecutive targets always differ, which makes every
//! segment boundary a genuine transition.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-unit amplitudes used by the generated profiles.
pub const AMPLITUDES: [f64; 5] = [0.2, 0.35, 0.5, 0.65, 0.8];

/// Length of both generated profiles (s).
pub const CASE_DURATION: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentKind {
    Step,
    Ramp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: f64,
    pub kind: SegmentKind,
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceProfile {
    pub duration: f64,
    pub segments: Vec<Segment>,
}

impl ReferenceProfile {
    pub fn new(segments: Vec<Segment>, duration: f64) -> Result<Self> {
        let p = Self { duration, segments };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .segments
            .first()
            .ok_or_else(|| Error::Config("profile has no segments".into()))?;
        if first.start != 0.0 {
            return Err(Error::Config("first segment must start at t=0".into()));
        }
        for w in self.segments.windows(2) {
            if !(w[1].start > w[0].start) {
                return Err(Error::Config(format!(
                    "segment start times must be strictly increasing ({} then {})",
                    w[0].start, w[1].start
                )));
            }
        }
        for s in &self.segments {
            if !(-1.0..=1.0).contains(&s.target) {
                return Err(Error::Config(format!(
                    "target {} outside [-1, 1]",
                    s.target
                )));
            }
        }
        let last = self.segments.last().map(|s| s.start).unwrap_or(0.0);
        if !(self.duration.is_finite() && self.duration > last) {
            return Err(Error::Config(format!(
                "duration {} must exceed the last segment start {last}",
                self.duration
            )));
        }
        Ok(())
    }

    /// Constant profile holding `target` for `duration` seconds.
    pub fn constant(target: f64, duration: f64) -> Result<Self> {
        Self::new(
            vec![Segment {
                start: 0.0,
                kind: SegmentKind::Step,
                target,
            }],
            duration,
        )
    }

    fn segment_end(&self, idx: usize) -> f64 {
        self.segments
            .get(idx + 1)
            .map(|s| s.start)
            .unwrap_or(self.duration)
    }

    /// Value in force just before segment `idx` starts (0 before the first).
    fn value_before(&self, idx: usize) -> f64 {
        if idx == 0 {
            0.0
        } else {
            self.segments[idx - 1].target
        }
    }

    fn segment_at(&self, t: f64) -> usize {
        // last segment whose start is <= t (right-continuous)
        self.segments
            .partition_point(|s| s.start <= t)
            .saturating_sub(1)
    }

    /// Reference speed (per-unit) at time `t`.
    pub fn eval(&self, t: f64) -> Result<f64> {
        if !(t >= 0.0 && t <= self.duration) {
            return Err(Error::Domain(format!(
                "t={t} outside profile range [0, {}]",
                self.duration
            )));
        }
        Ok(self.eval_unchecked(t))
    }

    pub(crate) fn eval_unchecked(&self, t: f64) -> f64 {
        let idx = self.segment_at(t);
        let seg = &self.segments[idx];
        match seg.kind {
            SegmentKind::Step => seg.target,
            SegmentKind::Ramp => {
                let from = self.value_before(idx);
                let end = self.segment_end(idx);
                let frac = ((t - seg.start) / (end - seg.start)).clamp(0.0, 1.0);
                from + (seg.target - from) * frac
            }
        }
    }

    /// Number of segments that change the reference value.
    pub fn transition_count(&self) -> usize {
        (0..self.segments.len())
            .filter(|&i| self.segments[i].target != self.value_before(i))
            .count()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(text)?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

fn draw_target(rng: &mut ChaCha8Rng, previous: f64) -> f64 {
    loop {
        let v = AMPLITUDES[rng.random_range(0..AMPLITUDES.len())];
        if v != previous {
            return v;
        }
    }
}

/// Stress test 1: a step every 0.5 s for 10 s (20 transitions).
pub fn case1_profile(seed: u64) -> ReferenceProfile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut prev = 0.0;
    let segments = (0..20)
        .map(|k| {
            let target = draw_target(&mut rng, prev);
            prev = target;
            Segment {
                start: k as f64 / 2.0,
                kind: SegmentKind::Step,
                target,
            }
        })
        .collect();
    ReferenceProfile {
        duration: CASE_DURATION,
        segments,
    }
}

/// Stress test 2: a step or a ramp every 0.1 s for 10 s (100 transitions).
///
/// Each segment is a step or a ramp with equal probability; the first is
/// always a step so the motor starts from a defined target. Ramps span the
/// whole 0.1 s segment, so their slope is at most 6 per-unit/s.
pub fn case2_profile(seed: u64) -> ReferenceProfile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut prev = 0.0;
    let segments = (0..100)
        .map(|k| {
            let kind = if k > 0 && rng.random_bool(0.5) {
                SegmentKind::Ramp
            } else {
                SegmentKind::Step
            };
            let target = draw_target(&mut rng, prev);
            prev = target;
            Segment {
                start: k as f64 / 10.0,
                kind,
                target,
            }
        })
        .collect();
    ReferenceProfile {
        duration: CASE_DURATION,
        segments,
    }
}
