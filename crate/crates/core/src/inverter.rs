//! Droop-controlled grid-forming inverter: LC filter, cascaded voltage and
//! current PI regulators, droop primary control, power measurement and the
//! current-limiter baseline.
//!
//! Each inverter carries its own dq frame rotating at its droop frequency
//! `w_ref`. The reference inverter's frame is the common network frame; every
//! other inverter tracks its relative angle `delta`. The capacitor voltage is
//! aligned with the d axis (`v_qref = 0`).
//!
//! The coupling reactance between the filter capacitor and the point of
//! connection is evaluated at nominal frequency, the same convention the
//! quasi-static network uses.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InverterParams {
    pub l_f: f64,
    pub c_f: f64,
    #[serde(default = "default_r_f")]
    pub r_f: f64,
    pub kp_i: f64,
    pub ki_i: f64,
    pub kp_v: f64,
    pub ki_v: f64,
    pub k_df: f64,
    pub k_dv: f64,
    pub p0: f64,
    pub q0: f64,
    #[serde(default = "one")]
    pub w0: f64,
    #[serde(default = "one")]
    pub v0: f64,
    pub s_rated: f64,
    #[serde(default = "default_cutoff")]
    pub pm_filter_cutoff: f64,
    /// Coupling resistance between filter capacitor and bus.
    pub r_c: f64,
    /// Coupling reactance between filter capacitor and bus (nominal frequency).
    pub x_c: f64,
}

fn default_r_f() -> f64 {
    0.005
}
fn one() -> f64 {
    1.0
}
fn default_cutoff() -> f64 {
    31.4
}

impl InverterParams {
    pub fn validate(&self) -> Result<()> {
        let gains = [
            ("kp_i", self.kp_i),
            ("ki_i", self.ki_i),
            ("kp_v", self.kp_v),
            ("ki_v", self.ki_v),
            ("r_f", self.r_f),
            ("r_c", self.r_c),
        ];
        for (name, g) in gains {
            if !(g.is_finite() && g >= 0.0) {
                return Err(Error::Config(format!("{name} must be non-negative, got {g}")));
            }
        }
        let positive = [
            ("k_df", self.k_df),
            ("k_dv", self.k_dv),
            ("s_rated", self.s_rated),
            ("l_f", self.l_f),
            ("c_f", self.c_f),
            ("x_c", self.x_c),
            ("pm_filter_cutoff", self.pm_filter_cutoff),
            ("w0", self.w0),
            ("v0", self.v0),
        ];
        for (name, g) in positive {
            if !(g.is_finite() && g > 0.0) {
                return Err(Error::Config(format!("{name} must be strictly positive, got {g}")));
            }
        }
        if !(self.p0.is_finite() && self.q0.is_finite()) {
            return Err(Error::Config("p0/q0 must be finite".into()));
        }
        Ok(())
    }

    pub fn coupling_impedance(&self) -> Complex64 {
        Complex64::new(self.r_c, self.x_c)
    }
}

/// Electrical and measurement states of one inverter (full-order model).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct InverterState {
    pub delta: f64,
    pub phi_vd: f64,
    pub phi_vq: f64,
    pub phi_id: f64,
    pub phi_iq: f64,
    pub i_d: f64,
    pub i_q: f64,
    pub v_d: f64,
    pub v_q: f64,
    pub i_gd: f64,
    pub i_gq: f64,
    pub p_m: f64,
    pub q_m: f64,
    /// Low-pass filtered frequency (p.u.) seen by the V-f regulator.
    pub f_m: f64,
}

impl InverterState {
    pub const LEN: usize = 14;
    pub const LABELS: [&'static str; Self::LEN] = [
        "delta", "phi_vd", "phi_vq", "phi_id", "phi_iq", "i_d", "i_q", "v_d", "v_q", "i_gd",
        "i_gq", "p_m", "q_m", "f_m",
    ];

    pub fn to_array(&self) -> [f64; Self::LEN] {
        [
            self.delta, self.phi_vd, self.phi_vq, self.phi_id, self.phi_iq, self.i_d, self.i_q,
            self.v_d, self.v_q, self.i_gd, self.i_gq, self.p_m, self.q_m, self.f_m,
        ]
    }

    pub fn from_slice(x: &[f64]) -> Self {
        Self {
            delta: x[0],
            phi_vd: x[1],
            phi_vq: x[2],
            phi_id: x[3],
            phi_iq: x[4],
            i_d: x[5],
            i_q: x[6],
            v_d: x[7],
            v_q: x[8],
            i_gd: x[9],
            i_gq: x[10],
            p_m: x[11],
            q_m: x[12],
            f_m: x[13],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn terminal_voltage(&self) -> f64 {
        self.v_d.hypot(self.v_q)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrimarySignals {
    pub w_ref: f64,
    pub v_ref: f64,
}

/// Droop primary regulator with supplementary inputs.
pub fn droop_primary(params: &InverterParams, p_m: f64, q_m: f64, supp_w: f64, supp_v: f64) -> PrimarySignals {
    PrimarySignals {
        w_ref: params.w0 + params.k_df * (params.p0 - p_m) + supp_w,
        v_ref: params.v0 + params.k_dv * (params.q0 - q_m) + supp_v,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoltageRegOutput {
    pub i_dref: f64,
    pub i_qref: f64,
    pub dphi_vd: f64,
    pub dphi_vq: f64,
}

/// Voltage PI with capacitor decoupling and grid-current feed-forward.
pub fn voltage_regulator_step(
    params: &InverterParams,
    state: &InverterState,
    v_dref: f64,
    v_qref: f64,
    w: f64,
) -> VoltageRegOutput {
    let ed = v_dref - state.v_d;
    let eq = v_qref - state.v_q;
    VoltageRegOutput {
        i_dref: state.i_gd - w * params.c_f * state.v_q + params.kp_v * ed + params.ki_v * state.phi_vd,
        i_qref: state.i_gq + w * params.c_f * state.v_d + params.kp_v * eq + params.ki_v * state.phi_vq,
        dphi_vd: ed,
        dphi_vq: eq,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurrentRegOutput {
    pub e_d: f64,
    pub e_q: f64,
    pub dphi_id: f64,
    pub dphi_iq: f64,
}

/// Current PI with inductor decoupling and capacitor-voltage feed-forward.
pub fn current_regulator_step(
    params: &InverterParams,
    state: &InverterState,
    i_dref: f64,
    i_qref: f64,
    w: f64,
) -> CurrentRegOutput {
    let ed = i_dref - state.i_d;
    let eq = i_qref - state.i_q;
    CurrentRegOutput {
        e_d: state.v_d - w * params.l_f * state.i_q + params.kp_i * ed + params.ki_i * state.phi_id,
        e_q: state.v_q + w * params.l_f * state.i_d + params.kp_i * eq + params.ki_i * state.phi_iq,
        dphi_id: ed,
        dphi_iq: eq,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub p_inst: f64,
    pub q_inst: f64,
    pub dp_m: f64,
    pub dq_m: f64,
    pub s_m: f64,
}

pub fn filter_and_measure(state: &InverterState, params: &InverterParams) -> Measurement {
    let p_inst = state.v_d * state.i_gd + state.v_q * state.i_gq;
    let q_inst = state.v_q * state.i_gd - state.v_d * state.i_gq;
    Measurement {
        p_inst,
        q_inst,
        dp_m: params.pm_filter_cutoff * (p_inst - state.p_m),
        dq_m: params.pm_filter_cutoff * (q_inst - state.q_m),
        s_m: state.p_m.hypot(state.q_m),
    }
}

/// Clamp a current reference to `i_max`.
///
/// With active-power priority the d component keeps up to `i_max` and the
/// q component gets whatever magnitude remains; otherwise the vector is
/// scaled uniformly.
pub fn current_limiter_baseline(i_dref: f64, i_qref: f64, i_max: f64, active_power_priority: bool) -> (f64, f64) {
    let mag = i_dref.hypot(i_qref);
    if mag <= i_max {
        return (i_dref, i_qref);
    }
    if active_power_priority {
        let d = i_dref.clamp(-i_max, i_max);
        let room = (i_max * i_max - d * d).max(0.0).sqrt();
        (d, i_qref.clamp(-room, room))
    } else {
        let k = i_max / mag;
        (i_dref * k, i_qref * k)
    }
}

/// Angle-tracking gain while current limited (p.u. frequency per rad).
pub const LIMITED_SYNC_GAIN: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LimiterCommand {
    pub i_max: f64,
    pub active_power_priority: bool,
}

/// What the inverter sees of the network at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridInterface {
    /// Voltage of the connection bus in the common frame.
    pub v_bus: Complex64,
    /// Angular frequency of the common frame (p.u.).
    pub w_common: f64,
    pub w_base: f64,
    pub limiter: Option<LimiterCommand>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InverterRates {
    pub d: InverterState,
    pub p_inst: f64,
    pub q_inst: f64,
    pub limiting: bool,
}

pub fn to_common(d: f64, q: f64, delta: f64) -> Complex64 {
    Complex64::new(d, q) * Complex64::from_polar(1.0, delta)
}

pub fn from_common(z: Complex64, delta: f64) -> (f64, f64) {
    let r = z * Complex64::from_polar(1.0, -delta);
    (r.re, r.im)
}

/// Time derivatives of the full-order inverter model.
pub fn inverter_derivatives(
    params: &InverterParams,
    state: &InverterState,
    primary: PrimarySignals,
    grid: &GridInterface,
) -> Result<InverterRates> {
    if !state.is_finite() || !primary.w_ref.is_finite() || !primary.v_ref.is_finite() {
        return Err(Error::SimulationCollapse {
            time: f64::NAN,
            reason: "non-finite inverter state".into(),
        });
    }
    let w = primary.w_ref;
    let wb = grid.w_base;

    let vr = voltage_regulator_step(params, state, primary.v_ref, 0.0, w);
    let (mut i_dref, mut i_qref) = (vr.i_dref, vr.i_qref);
    let mut limiting = false;
    if let Some(lim) = grid.limiter {
        let (d, q) = current_limiter_baseline(i_dref, i_qref, lim.i_max, lim.active_power_priority);
        limiting = d != i_dref || q != i_qref;
        i_dref = d;
        i_qref = q;
    }
    // A limited inverter cannot follow its droop power demand, so its angle
    // would slip; it tracks the terminal voltage angle instead, like a
    // current source behind a PLL.
    let w = if limiting {
        grid.w_common + LIMITED_SYNC_GAIN * state.v_q.atan2(state.v_d)
    } else {
        w
    };
    let cr = current_regulator_step(params, state, i_dref, i_qref, w);
    let m = filter_and_measure(state, params);

    let (vb_d, vb_q) = from_common(grid.v_bus, state.delta);
    let (lf, cf, xc) = (params.l_f, params.c_f, params.x_c);

    let d = InverterState {
        delta: (w - grid.w_common) * wb,
        // anti-windup: voltage integrators hold while the current command saturates
        phi_vd: if limiting { 0.0 } else { vr.dphi_vd },
        phi_vq: if limiting { 0.0 } else { vr.dphi_vq },
        phi_id: cr.dphi_id,
        phi_iq: cr.dphi_iq,
        i_d: wb / lf * (cr.e_d - state.v_d - params.r_f * state.i_d + w * lf * state.i_q),
        i_q: wb / lf * (cr.e_q - state.v_q - params.r_f * state.i_q - w * lf * state.i_d),
        v_d: wb / cf * (state.i_d - state.i_gd + w * cf * state.v_q),
        v_q: wb / cf * (state.i_q - state.i_gq - w * cf * state.v_d),
        i_gd: wb / xc * (state.v_d - vb_d - params.r_c * state.i_gd + xc * state.i_gq),
        i_gq: wb / xc * (state.v_q - vb_q - params.r_c * state.i_gq - xc * state.i_gd),
        p_m: m.dp_m,
        q_m: m.dq_m,
        f_m: params.pm_filter_cutoff * (w - state.f_m),
    };
    Ok(InverterRates {
        d,
        p_inst: m.p_inst,
        q_inst: m.q_inst,
        limiting,
    })
}
