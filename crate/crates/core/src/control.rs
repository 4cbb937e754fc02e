//! PI-based field-oriented control cascade with an optional learned
//! quadrature-current corrector.
//!
//! The outer speed loop turns the per-unit speed error into a quadrature
//! current reference `iq_pi`. A corrector, when present, adds `delta_iq` to it
//! and the sum is clamped to the inverter current limit. Two inner PI loops
//! regulate `i_d` to zero and `i_q` to the adjusted reference, producing the
//! d-q voltage command that is saturated to the inverter's linear range.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plant::{saturate_voltage, DqVoltage, MotorParams, Plant};
use crate::profile::ReferenceProfile;

/// Control period (s): one PWM period at 30 kHz.
pub const SAMPLE_TIME: f64 = 1.0 / 30000.0;

/// Exact CSV header of a serialized [`SimTrace`].
pub const TRACE_HEADER: &str = "step,t,omega_ref,omega_meas,iq_pi,delta_iq,iq_adj,id,vd,vq";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PIGains {
    pub kp: f64,
    /// Integral gain (per second).
    pub ki: f64,
    pub out_min: f64,
    pub out_max: f64,
}

impl PIGains {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.kp, self.ki, self.out_min, self.out_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.kp < 0.0 || self.ki < 0.0 || !(self.out_min < self.out_max) {
            return Err(Error::Config(format!("invalid PI gains {self:?}")));
        }
        Ok(())
    }
}

/// Discrete PI controller with conditional-integration anti-windup.
///
/// The integrator accumulates `ki * e * dt` (backward Euler) before the output
/// is formed. If the resulting output would sit beyond a limit and the error
/// pushes further into it, the integrator keeps its previous value.
#[derive(Debug, Clone, PartialEq)]
pub struct PIController {
    pub gains: PIGains,
    pub integrator: f64,
    pub last_saturated: bool,
}

impl PIController {
    pub fn new(gains: PIGains) -> Self {
        Self {
            gains,
            integrator: 0.0,
            last_saturated: false,
        }
    }

    pub fn reset(&mut self) {
        self.integrator = 0.0;
        self.last_saturated = false;
    }

    pub fn step(&mut self, error: f64, dt: f64) -> Result<f64> {
        if !error.is_finite() {
            return Err(Error::ControllerFault(format!(
                "non-finite error input {error}"
            )));
        }
        if !(dt > 0.0) {
            return Err(Error::ControllerFault(format!("non-positive dt {dt}")));
        }
        let g = &self.gains;
        let p = g.kp * error;
        let candidate = self.integrator + g.ki * error * dt;
        let raw = p + candidate;
        let winding_up = (raw > g.out_max && error > 0.0) || (raw < g.out_min && error < 0.0);
        if !winding_up {
            self.integrator = candidate;
        }
        let unclamped = p + self.integrator;
        let out = unclamped.clamp(g.out_min, g.out_max);
        self.last_saturated = out != unclamped;
        Ok(out)
    }
}

/// Source of a normalized quadrature-current correction in `[-1, 1]`.
///
/// Inputs are the reference and measured speeds (per-unit) and the speed-loop
/// PI output (A).
pub trait Augmentor: Send + Sync {
    fn correction(&self, omega_ref: f64, omega_meas: f64, iq_pi: f64) -> f64;
}

/// Corrector that always returns zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroAugmentor;

impl Augmentor for ZeroAugmentor {
    fn correction(&self, _: f64, _: f64, _: f64) -> f64 {
        0.0
    }
}

/// Serializable part of the loop configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerConfig {
    pub speed_gains: PIGains,
    pub id_gains: PIGains,
    pub iq_gains: PIGains,
    pub sample_time: f64,
}

impl ControllerConfig {
    /// Default tuning for the default plant.
    ///
    /// The current loops place their closed-loop bandwidth near 1 kHz
    /// (`kp = L w_bw`, `ki = R w_bw`). The speed loop is deliberately
    /// underdamped so that upward steps overshoot, which is the behaviour
    /// the learned corrector is meant to remove. See the `tune_pi` example.
    pub fn for_plant(params: &MotorParams) -> Self {
        let w_bw = std::f64::consts::TAU * 1000.0;
        let v_lim = params.voltage_limit();
        let current = |l: f64| PIGains {
            kp: l * w_bw,
            ki: params.stator_resistance * w_bw,
            out_min: -v_lim,
            out_max: v_lim,
        };
        Self {
            speed_gains: PIGains {
                kp: DEFAULT_SPEED_KP,
                ki: DEFAULT_SPEED_KI,
                out_min: -params.max_current,
                out_max: params.max_current,
            },
            id_gains: current(params.d_inductance),
            iq_gains: current(params.q_inductance),
            sample_time: SAMPLE_TIME,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.speed_gains.validate()?;
        self.id_gains.validate()?;
        self.iq_gains.validate()?;
        if !(self.sample_time > 0.0 && self.sample_time <= crate::plant::MAX_STEP) {
            return Err(Error::Config(format!(
                "sample_time {} out of range",
                self.sample_time
            )));
        }
        Ok(())
    }
}

/// Speed-loop proportional gain (A per per-unit speed error).
pub const DEFAULT_SPEED_KP: f64 = 20.0;
/// Speed-loop integral gain (A per per-unit error per second).
pub const DEFAULT_SPEED_KI: f64 = 500.0;

/// Full closed-loop configuration including the optional corrector.
#[derive(Clone)]
pub struct LoopConfig {
    pub controller: ControllerConfig,
    pub augmentor: Option<Arc<dyn Augmentor>>,
    /// Amps per unit of corrector output.
    pub augment_scale: f64,
    /// Constant load torque applied to the shaft (N m).
    pub load_torque: f64,
}

impl fmt::Debug for LoopConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LoopConfig")
            .field("controller", &self.controller)
            .field(
                "augmentor",
                &self.augmentor.as_ref().map(|_| "<dyn Augmentor>"),
            )
            .field("augment_scale", &self.augment_scale)
            .field("load_torque", &self.load_torque)
            .finish()
    }
}

impl LoopConfig {
    pub fn pi_only(controller: ControllerConfig) -> Self {
        Self {
            controller,
            augmentor: None,
            augment_scale: 1.0,
            load_torque: 0.0,
        }
    }

    pub fn augmented(
        controller: ControllerConfig,
        augmentor: Arc<dyn Augmentor>,
        scale: f64,
    ) -> Self {
        Self {
            controller,
            augmentor: Some(augmentor),
            augment_scale: scale,
            load_torque: 0.0,
        }
    }
}

/// Per-step recording of a closed-loop run. Speeds are per-unit, currents in
/// amps, voltages in volts. Row `k` was sampled at `k * sample_time`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimTrace {
    pub sample_time: f64,
    pub omega_ref: Vec<f64>,
    pub omega_meas: Vec<f64>,
    pub iq_pi: Vec<f64>,
    pub delta_iq: Vec<f64>,
    pub iq_adj: Vec<f64>,
    pub id: Vec<f64>,
    pub vd: Vec<f64>,
    pub vq: Vec<f64>,
}

/// One row of a [`SimTrace`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub omega_ref: f64,
    pub omega_meas: f64,
    pub iq_pi: f64,
    pub delta_iq: f64,
    pub iq_adj: f64,
    pub id: f64,
    pub vd: f64,
    pub vq: f64,
}

impl SimTrace {
    pub fn with_capacity(sample_time: f64, n: usize) -> Self {
        Self {
            sample_time,
            omega_ref: Vec::with_capacity(n),
            omega_meas: Vec::with_capacity(n),
            iq_pi: Vec::with_capacity(n),
            delta_iq: Vec::with_capacity(n),
            iq_adj: Vec::with_capacity(n),
            id: Vec::with_capacity(n),
            vd: Vec::with_capacity(n),
            vq: Vec::with_capacity(n),
        }
    }

    pub fn len(&self) -> usize {
        self.omega_ref.len()
    }

    pub fn is_empty(&self) -> bool {
        self.omega_ref.is_empty()
    }

    pub fn time(&self, step: usize) -> f64 {
        step as f64 * self.sample_time
    }

    pub fn push(&mut self, r: TraceRow) {
        self.omega_ref.push(r.omega_ref);
        self.omega_meas.push(r.omega_meas);
        self.iq_pi.push(r.iq_pi);
        self.delta_iq.push(r.delta_iq);
        self.iq_adj.push(r.iq_adj);
        self.id.push(r.id);
        self.vd.push(r.vd);
        self.vq.push(r.vq);
    }

    pub fn row(&self, k: usize) -> TraceRow {
        TraceRow {
            omega_ref: self.omega_ref[k],
            omega_meas: self.omega_meas[k],
            iq_pi: self.iq_pi[k],
            delta_iq: self.delta_iq[k],
            iq_adj: self.iq_adj[k],
            id: self.id[k],
            vd: self.vd[k],
            vq: self.vq[k],
        }
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{TRACE_HEADER}")?;
        for k in 0..self.len() {
            let r = self.row(k);
            writeln!(
                w,
                "{k},{},{},{},{},{},{},{},{},{}",
                self.time(k),
                r.omega_ref,
                r.omega_meas,
                r.iq_pi,
                r.delta_iq,
                r.iq_adj,
                r.id,
                r.vd,
                r.vq
            )?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_csv(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    /// Parse a trace written by [`SimTrace::write_csv`]. The sample time is
    /// recovered from the `t` column.
    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .transpose()
            .map_err(|e| Error::io("<trace>", e))?
            .ok_or_else(|| Error::Domain("empty trace file".into()))?;
        if header.trim() != TRACE_HEADER {
            return Err(Error::Domain(format!("unexpected trace header `{header}`")));
        }
        let mut trace = SimTrace::default();
        let mut t1 = None;
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io("<trace>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let v: Vec<f64> = line
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Domain(format!("trace row {}: {e}", i + 1)))?;
            if v.len() != 10 {
                return Err(Error::Domain(format!(
                    "trace row {} has {} fields",
                    i + 1,
                    v.len()
                )));
            }
            if i == 1 {
                t1 = Some(v[1]);
            }
            trace.push(TraceRow {
                omega_ref: v[2],
                omega_meas: v[3],
                iq_pi: v[4],
                delta_iq: v[5],
                iq_adj: v[6],
                id: v[7],
                vd: v[8],
                vq: v[9],
            });
        }
        trace.sample_time = t1.unwrap_or(SAMPLE_TIME);
        Ok(trace)
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(f))
    }
}

/// Number of control periods covering `duration`.
pub fn step_count(duration: f64, sample_time: f64) -> usize {
    (duration / sample_time).round() as usize
}

/// Simulate the closed loop from rest for `duration` seconds.
///
/// The returned trace has `round(duration / sample_time) + 1` rows.
pub fn run_closed_loop(
    profile: &ReferenceProfile,
    cfg: &LoopConfig,
    plant: &MotorParams,
    duration: f64,
) -> Result<SimTrace> {
    cfg.controller.validate()?;
    profile.validate()?;
    if !(duration > 0.0 && duration <= profile.duration) {
        return Err(Error::Config(format!(
            "duration {duration} not covered by the profile ({} s)",
            profile.duration
        )));
    }
    if !(cfg.augment_scale > 0.0 && cfg.augment_scale.is_finite()) {
        return Err(Error::Config("augment_scale must be positive".into()));
    }
    let ctl = &cfg.controller;
    let dt = ctl.sample_time;
    let n = step_count(duration, dt);
    let mut sim = Plant::new(*plant)?;
    let mut speed = PIController::new(ctl.speed_gains);
    let mut id_loop = PIController::new(ctl.id_gains);
    let mut iq_loop = PIController::new(ctl.iq_gains);
    let i_max = plant.max_current;
    let v_lim = plant.voltage_limit();

    let mut trace = SimTrace::with_capacity(dt, n + 1);
    for k in 0..=n {
        let t = (k as f64 * dt).min(profile.duration);
        let omega_ref = profile.eval_unchecked(t);
        let s = sim.state;
        let omega_meas = plant.to_per_unit(s.omega_mech);

        let iq_pi = speed.step(omega_ref - omega_meas, dt)?;
        let delta_iq = match &cfg.augmentor {
            Some(a) => a.correction(omega_ref, omega_meas, iq_pi) * cfg.augment_scale,
            None => 0.0,
        };
        let iq_adj = (iq_pi + delta_iq).clamp(-i_max, i_max);

        let fault = |e: Error, trace: &SimTrace| match e {
            Error::ControllerFault(_) => Error::Diverged {
                step: k,
                prefix: Some(Box::new(trace.clone())),
            },
            other => other,
        };
        let v_d = id_loop
            .step(0.0 - s.i_d, dt)
            .map_err(|e| fault(e, &trace))?;
        let v_q = iq_loop
            .step(iq_adj - s.i_q, dt)
            .map_err(|e| fault(e, &trace))?;
        let v = saturate_voltage(DqVoltage::new(v_d, v_q), v_lim);

        trace.push(TraceRow {
            omega_ref,
            omega_meas,
            iq_pi,
            delta_iq,
            iq_adj,
            id: s.i_d,
            vd: v.v_d,
            vq: v.v_q,
        });
        if k < n {
            if let Err(e) = sim.advance(v, cfg.load_torque, dt) {
                return Err(match e {
                    Error::Diverged { step, .. } => Error::Diverged {
                        step,
                        prefix: Some(Box::new(trace)),
                    },
                    other => other,
                });
            }
        }
    }
    Ok(trace)
}
