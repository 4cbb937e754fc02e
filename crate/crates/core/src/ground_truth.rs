//! Ground-truth manufacture for the corrector.
//!
//! The PI-only trace is split into runs of constant reference speed. Inside
//! each run the *response interval* starts at the first sample where the
//! measured speed enters the tracking band and lasts until the reference
//! changes again. Over that interval the speed-loop output `x = iq_pi` is
//! replaced by a rectified signal `x_adj`:
//!
//! * threshold: `x_adj = sign(x) * min(|x|, C)` with `C` derived from the
//!   final value of `x` (or fixed by the caller);
//! * exponential: `x_adj(t) = x_final + (x_initial - x_final) * exp(-t / tau)`
//!   between the first in-band value and the final value of `x`.
//!
//! The final value is the last sample of the last steady interval in the run.
//! Runs that reach the band but end before settling (short segments) use the
//! last sample of the run instead.
//!
//! The training target is the correction to add to the PI output,
//! `delta = x_adj - x`, so that `iq_pi + delta` reproduces `x_adj`.
//! Outside response intervals `x_adj = x` and the target is zero.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::control::SimTrace;
use crate::error::{Error, Result};

/// Exact CSV header of a serialized dataset.
pub const DATASET_HEADER: &str = "omega_ref,omega_meas,iq_pi,delta_iq_gt";

/// Multiplier applied to the final in-band current to obtain a per-interval
/// threshold.
pub const THRESHOLD_FACTOR: f64 = 1.1;

/// Lower bound for a per-interval threshold (A), so intervals that settle at
/// zero current still get a strictly positive `C`.
pub const THRESHOLD_FLOOR: f64 = 0.05;

/// Half-open step range `[start_step, end_step)` over which the reference is
/// constant and the measured speed stays inside the tracking band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteadyInterval {
    pub start_step: usize,
    pub end_step: usize,
    pub reference_value: f64,
}

impl SteadyInterval {
    pub fn len(&self) -> usize {
        self.end_step - self.start_step
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Maximal half-open runs `[start, end)` of bit-identical reference values
/// spanning at least two samples.
pub fn constant_reference_runs(omega_ref: &[f64]) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut start = 0;
    for k in 1..=omega_ref.len() {
        if k == omega_ref.len() || omega_ref[k] != omega_ref[start] {
            if k - start >= 2 {
                runs.push((start, k));
            }
            start = k;
        }
    }
    runs
}

/// Maximal runs where the reference is constant and `|omega_meas - omega_ref|
/// <= band`, keeping only runs of at least `min_len` samples.
pub fn detect_steady_intervals(
    trace: &SimTrace,
    band: f64,
    min_len: usize,
) -> Result<Vec<SteadyInterval>> {
    if !(band > 0.0) {
        return Err(Error::Config(format!("band must be positive, got {band}")));
    }
    let min_len = min_len.max(1);
    let mut out = Vec::new();
    for (a, b) in constant_reference_runs(&trace.omega_ref) {
        let mut k = a;
        while k < b {
            if (trace.omega_meas[k] - trace.omega_ref[k]).abs() <= band {
                let start = k;
                while k < b && (trace.omega_meas[k] - trace.omega_ref[k]).abs() <= band {
                    k += 1;
                }
                if k - start >= min_len {
                    out.push(SteadyInterval {
                        start_step: start,
                        end_step: k,
                        reference_value: trace.omega_ref[start],
                    });
                }
            } else {
                k += 1;
            }
        }
    }
    Ok(out)
}

/// Threshold saturation: clamp the magnitude of `x` to `c`, keeping its sign.
pub fn saturate_threshold(x: f64, c: f64) -> f64 {
    x.signum() * x.abs().min(c)
}

/// Exponential rectification from `x_initial` (t = 0) toward `x_final`.
pub fn exp_rectify(x_initial: f64, x_final: f64, t: f64, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    if !(t >= 0.0) {
        return Err(Error::Domain(format!("t must be non-negative, got {t}")));
    }
    Ok(x_final + (x_initial - x_final) * (-(t / tau)).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase", deny_unknown_fields)]
pub enum GtMethod {
    /// Threshold saturation. `c = None` derives `C` per interval as
    /// `max(THRESHOLD_FACTOR * |final in-band x|, THRESHOLD_FLOOR)`.
    Threshold {
        #[serde(default)]
        c: Option<f64>,
    },
    /// Exponential rectification with time constant `tau` (s).
    Rectify { tau: f64 },
}

impl GtMethod {
    pub fn validate(&self) -> Result<()> {
        match *self {
            GtMethod::Threshold { c: Some(c) } if !(c > 0.0) => Err(Error::Config(format!(
                "threshold C must be positive, got {c}"
            ))),
            GtMethod::Rectify { tau } if !(tau > 0.0) => {
                Err(Error::Config(format!("tau must be positive, got {tau}")))
            }
            _ => Ok(()),
        }
    }
}

/// Interval detection settings shared by dataset manufacture and metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GtParams {
    /// Tracking band (per-unit speed).
    pub band: f64,
    /// Minimum steady run length (samples).
    pub min_len: usize,
}

impl Default for GtParams {
    fn default() -> Self {
        Self {
            band: 0.005,
            min_len: 300,
        }
    }
}

/// One training row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub omega_ref: f64,
    pub omega_meas: f64,
    pub iq_pi: f64,
    pub delta_iq_gt: f64,
}

impl DatasetRecord {
    pub fn input(&self) -> [f64; 3] {
        [self.omega_ref, self.omega_meas, self.iq_pi]
    }
}

/// Output of [`make_ground_truth`].
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub records: Vec<DatasetRecord>,
    /// Rectified speed-loop output `x_adj`, one per trace row.
    pub adjusted: Vec<f64>,
    /// Response intervals `[start, end)` that received a correction.
    pub intervals: Vec<(usize, usize)>,
}

/// Build the training set from a PI-only trace.
pub fn make_ground_truth(
    trace: &SimTrace,
    method: GtMethod,
    params: GtParams,
) -> Result<GroundTruth> {
    method.validate()?;
    let steady = detect_steady_intervals(trace, params.band, params.min_len)?;
    if steady.is_empty() {
        return Err(Error::NoSteadyIntervals(format!(
            "band={}, min_len={}",
            params.band, params.min_len
        )));
    }
    let x = &trace.iq_pi;
    let mut adjusted = x.clone();
    let mut intervals = Vec::new();
    let dt = trace.sample_time;
    let in_band = |k: usize| (trace.omega_meas[k] - trace.omega_ref[k]).abs() <= params.band;

    let mut next_steady = 0;
    for (a, b) in constant_reference_runs(&trace.omega_ref) {
        // steady intervals are emitted in order and never straddle runs
        let first = next_steady;
        while next_steady < steady.len() && steady[next_steady].start_step < b {
            next_steady += 1;
        }
        let inside = &steady[first..next_steady];
        let Some(start) = (a..b).find(|&k| in_band(k)) else {
            continue;
        };
        // runs cut short before settling use their last sample as the final value
        let x_final = match inside.last() {
            Some(last) => x[last.end_step - 1],
            None => x[b - 1],
        };
        match method {
            GtMethod::Threshold { c } => {
                let c =
                    c.unwrap_or_else(|| (THRESHOLD_FACTOR * x_final.abs()).max(THRESHOLD_FLOOR));
                for k in start..b {
                    adjusted[k] = saturate_threshold(x[k], c);
                }
            }
            GtMethod::Rectify { tau } => {
                let x_initial = x[start];
                for k in start..b {
                    adjusted[k] = exp_rectify(x_initial, x_final, (k - start) as f64 * dt, tau)?;
                }
                // land exactly on the final in-band value at the interval end
                adjusted[b - 1] = x_final;
            }
        }
        intervals.push((start, b));
    }

    // store x + delta as the adjusted signal so the reconstruction identity
    // holds exactly in floating point (this moves a value by at most an ulp)
    let records = (0..trace.len())
        .map(|k| {
            let delta = adjusted[k] - x[k];
            adjusted[k] = x[k] + delta;
            DatasetRecord {
                omega_ref: trace.omega_ref[k],
                omega_meas: trace.omega_meas[k],
                iq_pi: x[k],
                delta_iq_gt: delta,
            }
        })
        .collect();
    Ok(GroundTruth {
        records,
        adjusted,
        intervals,
    })
}

pub fn write_dataset_csv<W: Write>(records: &[DatasetRecord], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{DATASET_HEADER}")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{}",
            r.omega_ref, r.omega_meas, r.iq_pi, r.delta_iq_gt
        )?;
    }
    Ok(())
}

pub fn save_dataset(records: &[DatasetRecord], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    write_dataset_csv(records, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_dataset_csv<R: BufRead>(r: R) -> Result<Vec<DatasetRecord>> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .transpose()
        .map_err(|e| Error::io("<dataset>", e))?
        .ok_or_else(|| Error::Domain("empty dataset file".into()))?;
    if header.trim() != DATASET_HEADER {
        return Err(Error::Domain(format!(
            "unexpected dataset header `{header}`"
        )));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io("<dataset>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Vec<f64> = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Domain(format!("dataset row {}: {e}", i + 1)))?;
        let [omega_ref, omega_meas, iq_pi, delta_iq_gt] = v[..] else {
            return Err(Error::Domain(format!(
                "dataset row {} has {} fields",
                i + 1,
                v.len()
            )));
        };
        out.push(DatasetRecord {
            omega_ref,
            omega_meas,
            iq_pi,
            delta_iq_gt,
        });
    }
    Ok(out)
}

pub fn load_dataset(path: &Path) -> Result<Vec<DatasetRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset_csv(std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::TraceRow;

    fn trace_from(reference: &[f64], meas: &[f64], iq: &[f64]) -> SimTrace {
        let mut t = SimTrace::with_capacity(1e-3, reference.len());
        for k in 0..reference.len() {
            t.push(TraceRow {
                omega_ref: reference[k],
                omega_meas: meas[k],
                iq_pi: iq[k],
                delta_iq: 0.0,
                iq_adj: iq[k],
                id: 0.0,
                vd: 0.0,
                vq: 0.0,
            });
        }
        t
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(saturate_threshold(1.5, 2.0), 1.5);
        assert_eq!(saturate_threshold(5.0, 2.0), 2.0);
        assert_eq!(saturate_threshold(-3.0, 2.0), -2.0);
    }

    #[test]
    fn rectify_examples() {
        assert_eq!(exp_rectify(1.0, 0.0, 0.0, 0.1).unwrap(), 1.0);
        let far = exp_rectify(3.0, 2.0, 10.0, 0.1).unwrap();
        assert!((far - 2.0).abs() <= 1e-12 * 2.0);
        let v = exp_rectify(1.0, 0.0, 0.1, 0.1).unwrap();
        assert!((v - 0.367_879_441_171_442_3).abs() < 1e-15);
        assert!(matches!(
            exp_rectify(1.0, 0.0, 0.1, 0.0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            exp_rectify(1.0, 0.0, 0.1, -1.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn one_interval_for_perfect_tracking() {
        let r = vec![0.5; 50];
        let t = trace_from(&r, &r, &vec![0.1; 50]);
        let iv = detect_steady_intervals(&t, 0.01, 5).unwrap();
        assert_eq!(
            iv,
            vec![SteadyInterval {
                start_step: 0,
                end_step: 50,
                reference_value: 0.5
            }]
        );
    }

    #[test]
    fn no_interval_outside_band() {
        let r = vec![0.5; 50];
        let m = vec![0.7; 50];
        let t = trace_from(&r, &m, &vec![0.0; 50]);
        assert!(detect_steady_intervals(&t, 0.01, 1).unwrap().is_empty());
        assert!(detect_steady_intervals(&t, 0.0, 1).is_err());
    }

    /// Brute-force enumeration of every in-band run, used as an oracle.
    fn brute_runs(r: &[f64], m: &[f64], band: f64, min_len: usize) -> Vec<(usize, usize)> {
        let ok = |k: usize| (m[k] - r[k]).abs() <= band;
        let mut out = Vec::new();
        for s in 0..r.len() {
            for e in (s + 1)..=r.len() {
                let all = (s..e).all(|k| ok(k) && r[k] == r[s]);
                let left_max = s == 0 || !(ok(s - 1) && r[s - 1] == r[s]);
                let right_max = e == r.len() || !(ok(e) && r[e] == r[s]);
                if all && left_max && right_max && e - s >= min_len {
                    out.push((s, e));
                }
            }
        }
        out
    }

    #[test]
    fn two_runs_around_an_overshoot() {
        let r = vec![1.0; 30];
        let mut m = vec![1.0; 30];
        for (k, v) in m.iter_mut().enumerate().take(17).skip(10) {
            *v = 1.0 + 0.05 * (k as f64 - 9.0);
        }
        let t = trace_from(&r, &m, &vec![0.0; 30]);
        let got: Vec<_> = detect_steady_intervals(&t, 0.02, 3)
            .unwrap()
            .iter()
            .map(|i| (i.start_step, i.end_step))
            .collect();
        assert_eq!(got, brute_runs(&r, &m, 0.02, 3));
        assert_eq!(got, vec![(0, 10), (17, 30)]);
    }

    #[test]
    fn runs_break_on_reference_change() {
        let mut r = vec![0.3; 20];
        r.extend(vec![0.6; 20]);
        let t = trace_from(&r, &r, &vec![0.0; 40]);
        let got: Vec<_> = detect_steady_intervals(&t, 0.01, 2)
            .unwrap()
            .iter()
            .map(|i| (i.start_step, i.end_step))
            .collect();
        assert_eq!(got, vec![(0, 20), (20, 40)]);
        assert_eq!(got, brute_runs(&r, &r, 0.01, 2));
    }

    #[test]
    fn unadjusted_signal_has_zero_targets() {
        let r = vec![0.5; 40];
        let iq = vec![0.2; 40];
        let t = trace_from(&r, &r, &iq);
        let gt = make_ground_truth(
            &t,
            GtMethod::Threshold { c: Some(1.0) },
            GtParams {
                band: 0.01,
                min_len: 5,
            },
        )
        .unwrap();
        assert!(gt.records.iter().all(|r| r.delta_iq_gt == 0.0));
    }

    #[test]
    fn single_spike_threshold() {
        let r = vec![0.5; 40];
        let mut iq = vec![1.0; 40];
        iq[17] = 5.0;
        let t = trace_from(&r, &r, &iq);
        let gt = make_ground_truth(
            &t,
            GtMethod::Threshold { c: Some(2.0) },
            GtParams {
                band: 0.01,
                min_len: 5,
            },
        )
        .unwrap();
        for (k, rec) in gt.records.iter().enumerate() {
            let want = if k == 17 { -3.0 } else { 0.0 };
            assert_eq!(rec.delta_iq_gt, want, "step {k}");
        }
    }

    #[test]
    fn per_interval_threshold_uses_final_value() {
        // approach from below, in band from step 10, settles at iq = 1.0
        let r = vec![0.5; 60];
        let m: Vec<f64> = (0..60)
            .map(|k| if k < 10 { 0.05 * k as f64 } else { 0.5 })
            .collect();
        let iq: Vec<f64> = (0..60).map(|k| if k < 20 { 4.0 } else { 1.0 }).collect();
        let t = trace_from(&r, &m, &iq);
        let gt = make_ground_truth(
            &t,
            GtMethod::Threshold { c: None },
            GtParams {
                band: 0.01,
                min_len: 5,
            },
        )
        .unwrap();
        assert_eq!(gt.intervals, vec![(10, 60)]);
        for k in 0..60 {
            let want = if (10..20).contains(&k) { 1.1 } else { iq[k] };
            assert!((gt.adjusted[k] - want).abs() < 1e-12, "step {k}");
            assert_eq!(
                gt.records[k].iq_pi + gt.records[k].delta_iq_gt,
                gt.adjusted[k]
            );
        }
    }

    #[test]
    fn rectify_hits_endpoints_and_is_monotone() {
        let r = vec![0.5; 100];
        let m: Vec<f64> = (0..100).map(|k| if k < 5 { 0.0 } else { 0.5 }).collect();
        let iq: Vec<f64> = (0..100).map(|k| 3.0 - 0.02 * k as f64).collect();
        let t = trace_from(&r, &m, &iq);
        let gt = make_ground_truth(
            &t,
            GtMethod::Rectify { tau: 0.005 },
            GtParams {
                band: 0.01,
                min_len: 5,
            },
        )
        .unwrap();
        assert_eq!(gt.intervals, vec![(5, 100)]);
        assert_eq!(gt.adjusted[5], iq[5]);
        assert_eq!(gt.adjusted[99], iq[99]);
        for k in 6..100 {
            assert!(gt.adjusted[k] <= gt.adjusted[k - 1]);
        }
    }

    #[test]
    fn unsettled_run_uses_its_last_sample() {
        // first run settles; second run crosses the reference but never settles
        let mut r = vec![0.5; 30];
        r.extend(vec![0.8; 10]);
        let mut m = vec![0.5; 30];
        m.extend([0.6, 0.7, 0.8, 0.85, 0.9, 0.92, 0.93, 0.93, 0.92, 0.9]);
        let mut iq = vec![0.3; 30];
        iq.extend([5.0, 5.0, 4.0, 3.0, 2.0, 1.0, 0.5, 0.0, -0.5, -1.0]);
        let t = trace_from(&r, &m, &iq);
        let gt = make_ground_truth(
            &t,
            GtMethod::Threshold { c: None },
            GtParams {
                band: 0.01,
                min_len: 5,
            },
        )
        .unwrap();
        assert_eq!(gt.intervals, vec![(0, 30), (32, 40)]);
        for k in 32..40 {
            let want = iq[k].signum() * iq[k].abs().min(1.1);
            assert!((gt.adjusted[k] - want).abs() < 1e-12, "step {k}");
        }
        assert_eq!(gt.adjusted[30], 5.0);
    }

    #[test]
    fn no_steady_interval_is_diagnosed() {
        let r = vec![0.5; 20];
        let m = vec![0.0; 20];
        let t = trace_from(&r, &m, &vec![0.0; 20]);
        let e = make_ground_truth(&t, GtMethod::Rectify { tau: 0.005 }, GtParams::default());
        assert!(matches!(e, Err(Error::NoSteadyIntervals(_))));
    }

    #[test]
    fn dataset_csv_round_trip() {
        let recs = vec![
            DatasetRecord {
                omega_ref: 0.5,
                omega_meas: 0.49,
                iq_pi: 1.25,
                delta_iq_gt: -0.1,
            },
            DatasetRecord {
                omega_ref: 0.2,
                omega_meas: 0.3,
                iq_pi: -4.0,
                delta_iq_gt: 3.0,
            },
        ];
        let mut buf = Vec::new();
        write_dataset_csv(&recs, &mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with(DATASET_HEADER));
        assert_eq!(read_dataset_csv(buf.as_slice()).unwrap(), recs);
    }
}
