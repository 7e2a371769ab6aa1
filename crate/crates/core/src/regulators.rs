//! Supplementary controllers stacked on the droop primary regulator.
//!
//! The power regulator pulls an inverter's apparent output down to its
//! real-time capacity `s_ref` and splits the correction between the
//! frequency and voltage channels with a fixed ratio `k_w : k_v`.
//!
//! The V-f regulator acts only outside a deadband around nominal frequency
//! and voltage. Its trigger logic decides whether capacity can be shifted
//! between the f and V loops (`Reallocate`), whether nothing is needed
//! (`None`), or whether both loops are short and load must be shed (`Shed`).
//!
//! Both regulators use local measurements only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerRegulatorParams {
    pub kp_s: f64,
    pub ki_s: f64,
    pub k_w: f64,
    pub k_v: f64,
    /// Real-time reference capacity (p.u.). Updated by the scenario schedule.
    pub s_ref: f64,
    #[serde(default)]
    pub enabled: bool,
}

impl PowerRegulatorParams {
    pub fn validate(&self) -> Result<()> {
        for (n, g) in [("kp_s", self.kp_s), ("ki_s", self.ki_s), ("k_w", self.k_w), ("k_v", self.k_v)] {
            if !(g.is_finite() && g >= 0.0) {
                return Err(Error::Config(format!("power regulator {n} must be non-negative")));
            }
        }
        if self.enabled && self.k_w + self.k_v <= 0.0 {
            return Err(Error::Config("power regulator needs k_w + k_v > 0 when enabled".into()));
        }
        if !(self.s_ref.is_finite() && self.s_ref >= 0.0) {
            return Err(Error::Config("s_ref must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VfRegulatorParams {
    pub kp_f: f64,
    pub ki_f: f64,
    pub kp_v: f64,
    pub ki_v: f64,
    #[serde(default = "default_df_max")]
    pub df_max: f64,
    #[serde(default = "default_dv_max")]
    pub dv_max: f64,
    #[serde(default)]
    pub enabled: bool,
    /// Output clamp on the frequency channel (p.u.).
    #[serde(default = "default_w_limit")]
    pub w_limit: f64,
    /// Output clamp on the voltage channel (p.u.).
    #[serde(default = "default_v_limit")]
    pub v_limit: f64,
    /// First shedding increment requested under `Shed`, as a fraction of `s_ref`.
    #[serde(default = "default_shed_increment")]
    pub shed_increment: f64,
}

fn default_df_max() -> f64 {
    0.01
}
fn default_dv_max() -> f64 {
    0.05
}
fn default_w_limit() -> f64 {
    0.05
}
fn default_v_limit() -> f64 {
    0.1
}
fn default_shed_increment() -> f64 {
    0.03
}

impl VfRegulatorParams {
    pub fn validate(&self) -> Result<()> {
        for (n, g) in [("kp_f", self.kp_f), ("ki_f", self.ki_f), ("kp_v", self.kp_v), ("ki_v", self.ki_v)] {
            if !(g.is_finite() && g >= 0.0) {
                return Err(Error::Config(format!("V-f regulator {n} must be non-negative")));
            }
        }
        if !(self.df_max > 0.0 && self.dv_max > 0.0) {
            return Err(Error::Config("deadband half-widths must be positive".into()));
        }
        if !(self.w_limit > 0.0 && self.v_limit > 0.0) {
            return Err(Error::Config("V-f output limits must be positive".into()));
        }
        Ok(())
    }
}

/// Warnings when the power regulator is not the faster of the two loops.
pub fn priority_warnings(power: &PowerRegulatorParams, vf: &VfRegulatorParams) -> Vec<String> {
    let mut out = Vec::new();
    if power.ki_s < vf.ki_f {
        out.push(format!(
            "power regulator ki_s = {} is below V-f regulator ki_f = {}",
            power.ki_s, vf.ki_f
        ));
    }
    if power.ki_s < vf.ki_v {
        out.push(format!(
            "power regulator ki_s = {} is below V-f regulator ki_v = {}",
            power.ki_s, vf.ki_v
        ));
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RegulatorState {
    pub xi_s: f64,
    pub xi_f: f64,
    pub xi_v: f64,
}

impl RegulatorState {
    pub const LEN: usize = 3;
    pub const LABELS: [&'static str; Self::LEN] = ["xi_s", "xi_f", "xi_v"];
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SupplementarySignals {
    pub dw_total: f64,
    pub dv_total: f64,
}

/// Apparent-power error: zero while there is headroom, negative otherwise.
pub fn capacity_error(s_ref: f64, s_m: f64) -> f64 {
    if s_ref > s_m {
        0.0
    } else {
        s_ref - s_m
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PowerRegOutput {
    pub dw1: f64,
    pub dv1: f64,
    pub dxi_s: f64,
}

pub fn power_regulator_step(params: &PowerRegulatorParams, xi_s: f64, e_s: f64) -> PowerRegOutput {
    if !params.enabled {
        return PowerRegOutput::default();
    }
    let u = params.kp_s * e_s + params.ki_s * xi_s;
    PowerRegOutput {
        dw1: params.k_w * u,
        dv1: params.k_v * u,
        dxi_s: e_s,
    }
}

/// `k_w / k_v` for a load power factor `pf = cos θ`, i.e. `tan θ`.
pub fn allocation_from_power_factor(pf: f64) -> Result<f64> {
    if !(pf > 0.0 && pf <= 1.0) {
        return Err(Error::Config(format!("power factor {pf} outside (0, 1]")));
    }
    Ok(pf.acos().tan())
}

/// Which side of a deadband a deviation falls on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BandSide {
    Below,
    Inside,
    Above,
}

pub fn band_side(x: f64, half_width: f64) -> BandSide {
    if x < -half_width {
        BandSide::Below
    } else if x > half_width {
        BandSide::Above
    } else {
        BandSide::Inside
    }
}

/// Deadband evaluated on an explicitly chosen branch.
pub fn deadband_on(x: f64, half_width: f64, side: BandSide) -> f64 {
    match side {
        BandSide::Below => x + half_width,
        BandSide::Inside => 0.0,
        BandSide::Above => x - half_width,
    }
}

pub fn deadband(x: f64, half_width: f64) -> f64 {
    deadband_on(x, half_width, band_side(x, half_width))
}

/// Frequency deadband; `df = f0 - f_m`.
pub fn deadband_f(df: f64, df_max: f64) -> f64 {
    deadband(df, df_max)
}

/// Voltage deadband; `dv = v0 - v_m`.
pub fn deadband_v(dv: f64, dv_max: f64) -> f64 {
    deadband(dv, dv_max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TriggerAction {
    None,
    Reallocate,
    Shed,
}

/// A loop "needs capacity" when its deviation is past the band on the sag
/// side (positive error, since deviations are nominal minus measured).
pub fn trigger_logic(e_f: f64, e_v: f64) -> (u8, u8, TriggerAction) {
    let state_f = u8::from(e_f > 0.0);
    let state_v = u8::from(e_v > 0.0);
    let action = match (state_f, state_v) {
        (1, 1) => TriggerAction::Shed,
        (0, 0) => TriggerAction::None,
        _ => TriggerAction::Reallocate,
    };
    (state_f, state_v, action)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct VfRegOutput {
    pub dw2: f64,
    pub dv2: f64,
    pub dxi_f: f64,
    pub dxi_v: f64,
    /// Requested shed magnitude (p.u. of apparent power) when `Shed` is active.
    pub shed_request: Option<f64>,
}

/// One evaluation of the V-f regulator.
///
/// Under `None` and `Shed` the integrators hold and the output is the held
/// integral term. Under `Reallocate` both PI channels run on the gated
/// errors; each integrator stops when its channel output reaches the clamp.
pub fn vf_regulator_step(
    params: &VfRegulatorParams,
    state: &RegulatorState,
    e_f: f64,
    e_v: f64,
    action: TriggerAction,
    s_ref: f64,
) -> VfRegOutput {
    if !params.enabled {
        return VfRegOutput::default();
    }
    let held_w = (params.ki_f * state.xi_f).clamp(-params.w_limit, params.w_limit);
    let held_v = (params.ki_v * state.xi_v).clamp(-params.v_limit, params.v_limit);
    match action {
        TriggerAction::None => VfRegOutput {
            dw2: held_w,
            dv2: held_v,
            ..Default::default()
        },
        TriggerAction::Shed => VfRegOutput {
            dw2: held_w,
            dv2: held_v,
            shed_request: Some(params.shed_increment * s_ref),
            ..Default::default()
        },
        TriggerAction::Reallocate => {
            let raw_w = params.kp_f * e_f + params.ki_f * state.xi_f;
            let raw_v = params.kp_v * e_v + params.ki_v * state.xi_v;
            let dw2 = raw_w.clamp(-params.w_limit, params.w_limit);
            let dv2 = raw_v.clamp(-params.v_limit, params.v_limit);
            let wound = |raw: f64, lim: f64, e: f64| raw.abs() >= lim && raw.signum() == e.signum();
            VfRegOutput {
                dw2,
                dv2,
                dxi_f: if wound(raw_w, params.w_limit, e_f) { 0.0 } else { e_f },
                dxi_v: if wound(raw_v, params.v_limit, e_v) { 0.0 } else { e_v },
                shed_request: None,
            }
        }
    }
}
