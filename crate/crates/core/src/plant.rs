//! PMSM plant and idealized inverter in the rotor (d-q) frame.
//!
//! The electrical model is the standard surface/interior PMSM d-q model:
//!
//! ```text
//! L_d di_d/dt = v_d - R i_d + w_e L_q i_q
//! L_q di_q/dt = v_q - R i_q - w_e L_d i_d - w_e psi
//! T_e         = 3/2 p (psi i_q + (L_d - L_q) i_d i_q)
//! J dw/dt     = T_e - B w - T_load
//! ```
//!
//! with `w_e = p w` the electrical angular speed. The state is advanced with a
//! fixed-step RK4 integrator. The inverter is an ideal voltage source whose
//! output vector is limited to the linear space-vector range `V_dc / sqrt(3)`.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest integration step accepted by [`step_motor`].
pub const MAX_STEP: f64 = 1e-4;

/// Plant constants.
///
/// The defaults describe a BR2804-1700KV class drone motor on an 11.1 V
/// supply. Only the rating values (voltage, current, pole pairs, speed) are
/// catalogue figures; the electrical and mechanical constants are plausible
/// values chosen so the no-load speed at full voltage lands near 19000 rpm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotorParams {
    /// DC bus voltage (V).
    pub nominal_voltage: f64,
    /// Inverter current limit (A).
    pub max_current: f64,
    pub pole_pairs: u32,
    /// Rated mechanical speed (rpm). Used as the per-unit speed base.
    pub max_speed: f64,
    /// Phase resistance (ohm).
    pub stator_resistance: f64,
    /// Direct-axis inductance (H).
    pub d_inductance: f64,
    /// Quadrature-axis inductance (H).
    pub q_inductance: f64,
    /// Permanent-magnet flux linkage (Wb).
    pub flux_linkage: f64,
    /// Rotor inertia (kg m^2).
    pub inertia: f64,
    /// Viscous friction (N m s / rad).
    pub friction: f64,
}

impl Default for MotorParams {
    fn default() -> Self {
        Self {
            nominal_voltage: 11.1,
            max_current: 5.0,
            pole_pairs: 7,
            max_speed: 19000.0,
            stator_resistance: 0.11,
            d_inductance: 1.8e-5,
            q_inductance: 1.8e-5,
            flux_linkage: 4.6e-4,
            inertia: 2.0e-6,
            friction: 5.0e-7,
        }
    }
}

impl MotorParams {
    pub fn validate(&self) -> Result<()> {
        if self.pole_pairs < 1 {
            return Err(Error::Config("pole_pairs must be at least 1".into()));
        }
        let positive = [
            ("nominal_voltage", self.nominal_voltage),
            ("max_current", self.max_current),
            ("max_speed", self.max_speed),
            ("stator_resistance", self.stator_resistance),
            ("d_inductance", self.d_inductance),
            ("q_inductance", self.q_inductance),
            ("flux_linkage", self.flux_linkage),
            ("inertia", self.inertia),
            ("friction", self.friction),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::Config(format!(
                    "{name} must be finite and strictly positive, got {value}"
                )));
            }
        }
        Ok(())
    }

    /// Largest d-q voltage magnitude the inverter can synthesize.
    pub fn voltage_limit(&self) -> f64 {
        self.nominal_voltage / 3f64.sqrt()
    }

    /// Mechanical speed (rad/s) that corresponds to 1.0 per-unit.
    pub fn base_speed(&self) -> f64 {
        self.max_speed * TAU / 60.0
    }

    pub fn to_per_unit(&self, omega_mech: f64) -> f64 {
        omega_mech / self.base_speed()
    }

    pub fn from_per_unit(&self, omega_pu: f64) -> f64 {
        omega_pu * self.base_speed()
    }

    /// Electromagnetic torque (N m) for the given d-q currents.
    pub fn torque(&self, i_d: f64, i_q: f64) -> f64 {
        1.5 * f64::from(self.pole_pairs)
            * (self.flux_linkage * i_q + (self.d_inductance - self.q_inductance) * i_d * i_q)
    }
}

/// Dynamic plant state.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MotorState {
    pub i_d: f64,
    pub i_q: f64,
    /// Mechanical angular speed (rad/s).
    pub omega_mech: f64,
    /// Electrical rotor angle, kept in `[0, 2*pi)`.
    pub theta_elec: f64,
}

impl MotorState {
    pub fn is_finite(&self) -> bool {
        self.i_d.is_finite()
            && self.i_q.is_finite()
            && self.omega_mech.is_finite()
            && self.theta_elec.is_finite()
    }
}

/// Inverter voltage command in the rotor frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DqVoltage {
    pub v_d: f64,
    pub v_q: f64,
}

impl DqVoltage {
    pub fn new(v_d: f64, v_q: f64) -> Self {
        Self { v_d, v_q }
    }

    pub fn magnitude(&self) -> f64 {
        self.v_d.hypot(self.v_q)
    }
}

fn check_finite(values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Domain(format!("non-finite input {values:?}")))
    }
}

/// Park transform: stationary (alpha, beta) to rotating (d, q).
pub fn park_transform(alpha: f64, beta: f64, theta: f64) -> Result<(f64, f64)> {
    check_finite(&[alpha, beta, theta])?;
    let (sin, cos) = theta.sin_cos();
    Ok((alpha * cos + beta * sin, -alpha * sin + beta * cos))
}

/// Inverse Park transform: rotating (d, q) to stationary (alpha, beta).
pub fn inverse_park(d: f64, q: f64, theta: f64) -> Result<(f64, f64)> {
    check_finite(&[d, q, theta])?;
    let (sin, cos) = theta.sin_cos();
    Ok((d * cos - q * sin, d * sin + q * cos))
}

/// Clamp the voltage vector magnitude to `dc_bus`, preserving its angle.
pub fn saturate_voltage(v: DqVoltage, dc_bus: f64) -> DqVoltage {
    let mag = v.magnitude();
    if mag <= dc_bus || mag == 0.0 {
        return v;
    }
    let k = dc_bus / mag;
    DqVoltage {
        v_d: v.v_d * k,
        v_q: v.v_q * k,
    }
}

/// Wrap an angle into `[0, 2*pi)`.
pub fn wrap_angle(theta: f64) -> f64 {
    let w = theta.rem_euclid(TAU);
    // rem_euclid can return exactly TAU for tiny negative inputs
    if w >= TAU {
        0.0
    } else {
        w
    }
}

#[derive(Clone, Copy)]
struct Deriv {
    di_d: f64,
    di_q: f64,
    domega: f64,
    dtheta: f64,
}

fn derivative(p: &MotorParams, s: &MotorState, v: DqVoltage, load: f64) -> Deriv {
    let pp = f64::from(p.pole_pairs);
    let w_e = pp * s.omega_mech;
    let di_d =
        (v.v_d - p.stator_resistance * s.i_d + w_e * p.q_inductance * s.i_q) / p.d_inductance;
    let di_q =
        (v.v_q - p.stator_resistance * s.i_q - w_e * p.d_inductance * s.i_d - w_e * p.flux_linkage)
            / p.q_inductance;
    let domega = (p.torque(s.i_d, s.i_q) - p.friction * s.omega_mech - load) / p.inertia;
    Deriv {
        di_d,
        di_q,
        domega,
        dtheta: w_e,
    }
}

fn offset(s: &MotorState, k: &Deriv, h: f64) -> MotorState {
    MotorState {
        i_d: s.i_d + h * k.di_d,
        i_q: s.i_q + h * k.di_q,
        omega_mech: s.omega_mech + h * k.domega,
        theta_elec: s.theta_elec + h * k.dtheta,
    }
}

/// Advance the plant by one RK4 step of length `dt` with `v` held constant.
///
/// After integration the phase currents are clamped to `max_current`
/// (inverter over-current protection) and the electrical angle is wrapped.
pub fn step_motor(
    state: &MotorState,
    v: DqVoltage,
    load_torque: f64,
    dt: f64,
    params: &MotorParams,
) -> Result<MotorState> {
    if !(dt > 0.0 && dt <= MAX_STEP) {
        return Err(Error::Config(format!(
            "integration step {dt} outside (0, {MAX_STEP}]"
        )));
    }
    let k1 = derivative(params, state, v, load_torque);
    let k2 = derivative(params, &offset(state, &k1, dt / 2.0), v, load_torque);
    let k3 = derivative(params, &offset(state, &k2, dt / 2.0), v, load_torque);
    let k4 = derivative(params, &offset(state, &k3, dt), v, load_torque);
    let avg = |a: f64, b: f64, c: f64, d: f64| (a + 2.0 * b + 2.0 * c + d) / 6.0;
    let slope = Deriv {
        di_d: avg(k1.di_d, k2.di_d, k3.di_d, k4.di_d),
        di_q: avg(k1.di_q, k2.di_q, k3.di_q, k4.di_q),
        domega: avg(k1.domega, k2.domega, k3.domega, k4.domega),
        dtheta: avg(k1.dtheta, k2.dtheta, k3.dtheta, k4.dtheta),
    };
    let mut next = offset(state, &slope, dt);
    if !next.is_finite() {
        return Err(Error::Diverged {
            step: 0,
            prefix: None,
        });
    }
    let limit = params.max_current;
    next.i_d = next.i_d.clamp(-limit, limit);
    next.i_q = next.i_q.clamp(-limit, limit);
    next.theta_elec = wrap_angle(next.theta_elec);
    Ok(next)
}

/// Convenience wrapper that owns the plant state and counts steps, so that
/// divergence errors can report where they happened.
#[derive(Debug, Clone)]
pub struct Plant {
    pub params: MotorParams,
    pub state: MotorState,
    pub steps: usize,
}

impl Plant {
    pub fn new(params: MotorParams) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            params,
            state: MotorState::default(),
            steps: 0,
        })
    }

    pub fn advance(&mut self, v: DqVoltage, load_torque: f64, dt: f64) -> Result<&MotorState> {
        self.state =
            step_motor(&self.state, v, load_torque, dt, &self.params).map_err(|e| match e {
                Error::Diverged { prefix, .. } => Error::Diverged {
                    step: self.steps,
                    prefix,
                },
                other => other,
            })?;
        self.steps += 1;
        Ok(&self.state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    const TS: f64 = 1.0 / 30000.0;

    #[test]
    fn park_examples() {
        let (d, q) = park_transform(1.0, 0.0, 0.0).unwrap();
        assert_eq!((d, q), (1.0, 0.0));
        let (d, q) = park_transform(1.0, 0.0, PI / 2.0).unwrap();
        assert!(d.abs() < 1e-15);
        assert!((q + 1.0).abs() < 1e-15);
        let (d, q) = park_transform(0.3, -0.4, 1.1).unwrap();
        let (a, b) = inverse_park(d, q, 1.1).unwrap();
        assert!((a - 0.3).abs() < 1e-12 && (b + 0.4).abs() < 1e-12);
    }

    #[test]
    fn park_rejects_non_finite() {
        assert!(matches!(
            park_transform(f64::NAN, 0.0, 0.0),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            inverse_park(0.0, 0.0, f64::INFINITY),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn saturate_examples() {
        assert_eq!(
            saturate_voltage(DqVoltage::new(3.0, 4.0), 10.0),
            DqVoltage::new(3.0, 4.0)
        );
        let v = saturate_voltage(DqVoltage::new(6.0, 8.0), 5.0);
        assert!((v.v_d - 3.0).abs() < 1e-12 && (v.v_q - 4.0).abs() < 1e-12);
        assert_eq!(
            saturate_voltage(DqVoltage::default(), 5.0),
            DqVoltage::default()
        );
    }

    #[test]
    fn rest_is_equilibrium() {
        let p = MotorParams::default();
        let s = step_motor(&MotorState::default(), DqVoltage::default(), 0.0, TS, &p).unwrap();
        assert_eq!(s, MotorState::default());
    }

    #[test]
    fn step_rejects_bad_dt() {
        let p = MotorParams::default();
        for dt in [0.0, -1e-5, 2e-4, f64::NAN] {
            let r = step_motor(&MotorState::default(), DqVoltage::default(), 0.0, dt, &p);
            assert!(matches!(r, Err(Error::Config(_))), "dt={dt}");
        }
    }

    #[test]
    fn non_finite_state_reports_step() {
        let mut plant = Plant::new(MotorParams::default()).unwrap();
        plant.advance(DqVoltage::default(), 0.0, TS).unwrap();
        plant.advance(DqVoltage::default(), 0.0, TS).unwrap();
        plant.state.omega_mech = f64::NAN;
        match plant.advance(DqVoltage::default(), 0.0, TS) {
            Err(Error::Diverged { step, .. }) => assert_eq!(step, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn constant_vq_accelerates() {
        let p = MotorParams::default();
        let mut s = MotorState::default();
        let mut last = s.omega_mech;
        for k in 0..100 {
            s = step_motor(&s, DqVoltage::new(0.0, 0.2), 0.0, TS, &p).unwrap();
            assert!(s.omega_mech > last, "step {k}: {} <= {last}", s.omega_mech);
            last = s.omega_mech;
        }
    }

    #[test]
    fn power_balance_without_friction() {
        // d/dt (J w^2 / 2) = T_e w when there is no friction and no load.
        let p = MotorParams {
            friction: 1e-300,
            ..MotorParams::default()
        };
        let mut s = MotorState {
            omega_mech: 300.0,
            i_q: 1.0,
            ..MotorState::default()
        };
        let v = DqVoltage::new(0.0, 0.8);
        let dt = 1e-6;
        let e0 = 0.5 * p.inertia * s.omega_mech.powi(2);
        let mut work = 0.0;
        for _ in 0..5000 {
            let next = step_motor(&s, v, 0.0, dt, &p).unwrap();
            let p0 = p.torque(s.i_d, s.i_q) * s.omega_mech;
            let p1 = p.torque(next.i_d, next.i_q) * next.omega_mech;
            work += 0.5 * (p0 + p1) * dt;
            s = next;
            let de = 0.5 * p.inertia * s.omega_mech.powi(2) - e0;
            assert!((de - work).abs() <= 1e-6 * e0, "{de} vs {work}");
        }
    }

    #[test]
    fn currents_respect_limit_under_full_voltage() {
        let p = MotorParams::default();
        let mut s = MotorState::default();
        let v = saturate_voltage(DqVoltage::new(3.0, 10.0), p.voltage_limit());
        for _ in 0..3000 {
            s = step_motor(&s, v, 0.0, TS, &p).unwrap();
            assert!(s.i_d.abs() <= p.max_current && s.i_q.abs() <= p.max_current);
            assert!((0.0..TAU).contains(&s.theta_elec));
        }
    }

    #[test]
    fn defaults_validate_and_reach_rated_speed() {
        let p = MotorParams::default();
        p.validate().unwrap();
        // No-load speed at the full inverter voltage, ignoring friction.
        let no_load_rpm =
            p.voltage_limit() / (p.flux_linkage * f64::from(p.pole_pairs)) * 60.0 / TAU;
        assert!(
            (no_load_rpm - 19000.0).abs() / 19000.0 < 0.01,
            "{no_load_rpm}"
        );
    }

    proptest! {
        #[test]
        fn park_round_trip(a in -100.0f64..100.0, b in -100.0f64..100.0, th in -20.0f64..20.0) {
            let (d, q) = park_transform(a, b, th).unwrap();
            let (a2, b2) = inverse_park(d, q, th).unwrap();
            prop_assert!((a - a2).abs() <= 1e-12 * a.abs().max(1.0));
            prop_assert!((b - b2).abs() <= 1e-12 * b.abs().max(1.0));
        }

        #[test]
        fn passive_decay(w0 in -2000.0f64..2000.0, iq in -1.0f64..1.0) {
            let p = MotorParams::default();
            let mut s = MotorState { omega_mech: w0, i_q: iq, ..MotorState::default() };
            // let the current die out first; afterwards |w| can only shrink
            for _ in 0..300 {
                s = step_motor(&s, DqVoltage::default(), 0.0, TS, &p).unwrap();
            }
            let mut last = s.omega_mech.abs();
            for _ in 0..300 {
                s = step_motor(&s, DqVoltage::default(), 0.0, TS, &p).unwrap();
                prop_assert!(s.omega_mech.abs() <= last + 1e-9);
                last = s.omega_mech.abs();
            }
        }

        #[test]
        fn step_is_deterministic(id in -5.0f64..5.0, iq in -5.0f64..5.0, w in -2000.0f64..2000.0,
                                 vd in -6.0f64..6.0, vq in -6.0f64..6.0) {
            let p = MotorParams::default();
            let s = MotorState { i_d: id, i_q: iq, omega_mech: w, theta_elec: 1.0 };
            let v = DqVoltage::new(vd, vq);
            let a = step_motor(&s, v, 0.0, TS, &p).unwrap();
            let b = step_motor(&s, v, 0.0, TS, &p).unwrap();
            prop_assert_eq!(a.i_d.to_bits(), b.i_d.to_bits());
            prop_assert_eq!(a.i_q.to_bits(), b.i_q.to_bits());
            prop_assert_eq!(a.omega_mech.to_bits(), b.omega_mech.to_bits());
            prop_assert_eq!(a.theta_elec.to_bits(), b.theta_elec.to_bits());
        }
    }
}
