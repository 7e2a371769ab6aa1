//! Multi-inverter microgrid assembled as a semi-explicit DAE.
//!
//! Differential states are stacked per inverter (17 per unit at full
//! fidelity, 8 at reduced fidelity). Algebraic variables are the real and
//! imaginary parts of every network bus voltage in the common frame, which is
//! the frame of the first inverter.
//!
//! The algebraic equations are nodal current balance:
//! `Y·V + I_load(V, f_sys) - I_inj(x, V) = 0`.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{eval_zip_load, zip_load_dv, Branch, Bus, BusId, NetworkModel, ZipLoadParams};
use crate::inverter::{
    droop_primary, from_common, inverter_derivatives, to_common, GridInterface, InverterParams, InverterState,
    LimiterCommand,
};
use crate::regulators::{
    band_side, deadband_on, power_regulator_step, trigger_logic, vf_regulator_step, BandSide, PowerRegulatorParams,
    RegulatorState, TriggerAction, VfRegulatorParams,
};

/// Supplementary outputs ramp in over this time after an enable event (s).
pub const REGULATOR_RAMP: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InverterUnit {
    pub id: u32,
    pub bus: BusId,
    pub params: InverterParams,
    pub power_reg: PowerRegulatorParams,
    pub vf_reg: VfRegulatorParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fidelity {
    Full,
    #[default]
    Reduced,
}

impl Fidelity {
    pub fn block_len(self) -> usize {
        match self {
            Fidelity::Full => InverterState::LEN + RegulatorState::LEN,
            Fidelity::Reduced => REDUCED_LABELS.len(),
        }
    }

    pub fn labels(self) -> Vec<&'static str> {
        match self {
            Fidelity::Full => InverterState::LABELS.iter().chain(RegulatorState::LABELS.iter()).copied().collect(),
            Fidelity::Reduced => REDUCED_LABELS.to_vec(),
        }
    }
}

const REDUCED_LABELS: [&str; 8] = ["delta", "p_m", "q_m", "f_m", "v_m", "xi_s", "xi_f", "xi_v"];

#[derive(Debug, Clone, PartialEq)]
pub struct Microgrid {
    pub network: NetworkModel,
    pub inverters: Vec<InverterUnit>,
    bus_of: Vec<usize>,
}

impl Microgrid {
    pub fn new(network: NetworkModel, inverters: Vec<InverterUnit>) -> Result<Self> {
        if inverters.is_empty() {
            return Err(Error::Config("a microgrid needs at least one inverter".into()));
        }
        let mut ids = HashSet::new();
        let mut bus_of = Vec::with_capacity(inverters.len());
        for unit in &inverters {
            if !ids.insert(unit.id) {
                return Err(Error::Config(format!("duplicate inverter id {}", unit.id)));
            }
            bus_of.push(network.bus_index(unit.bus)?);
            let ctx = |e: Error| Error::Config(format!("inverter {}: {e}", unit.id));
            unit.params.validate().map_err(ctx)?;
            unit.power_reg.validate().map_err(ctx)?;
            unit.vf_reg.validate().map_err(ctx)?;
            for w in crate::regulators::priority_warnings(&unit.power_reg, &unit.vf_reg) {
                log::warn!("inverter {}: {w}", unit.id);
            }
        }
        Ok(Self {
            network,
            inverters,
            bus_of,
        })
    }

    pub fn n_inv(&self) -> usize {
        self.inverters.len()
    }

    /// Network bus index of inverter `k`.
    pub fn inverter_bus(&self, k: usize) -> usize {
        self.bus_of[k]
    }

    pub fn inverter_index(&self, id: u32) -> Result<usize> {
        self.inverters.iter().position(|u| u.id == id).ok_or(Error::UnknownInverter(id))
    }

    /// Network with one extra node per inverter terminal (the filter
    /// capacitor), joined to its bus through the coupling impedance. Terminal
    /// node of inverter `k` has index `n_bus + k`.
    pub fn extended_network(&self) -> Result<NetworkModel> {
        let max_id = self.network.buses.iter().map(|b| b.id).max().unwrap_or(0);
        let mut buses: Vec<Bus> = self.network.buses.iter().map(|b| Bus { load: None, ..b.clone() }).collect();
        let mut branches = self.network.branches.clone();
        for (k, unit) in self.inverters.iter().enumerate() {
            let tid = max_id + 1 + k as u32;
            buses.push(Bus::new(tid));
            branches.push(Branch::from_impedance(tid, unit.bus, unit.params.r_c, unit.params.x_c));
        }
        NetworkModel::new(buses, branches, self.network.base)
    }

    pub fn base_loads(&self) -> Vec<Option<ZipLoadParams>> {
        self.network.buses.iter().map(|b| b.load).collect()
    }
}

/// Current-limiter setting carried by an inverter after an enable event.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LimiterSetting {
    pub i_max: f64,
    pub active_power_priority: bool,
    pub since: f64,
    /// Ramp time from the initial threshold down to `i_max` (s).
    pub ramp: f64,
    /// Threshold at `since`; the ramp starts here.
    pub i_start: f64,
}

impl LimiterSetting {
    pub fn threshold(&self, t: f64) -> f64 {
        if self.ramp <= 0.0 {
            return self.i_max;
        }
        let a = ((t - self.since) / self.ramp).clamp(0.0, 1.0);
        self.i_start + (self.i_max - self.i_start) * a
    }
}

/// Discrete operating mode of one inverter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InverterMode {
    pub s_ref: f64,
    pub power_reg_since: Option<f64>,
    pub vf_reg_since: Option<f64>,
    pub limiter: Option<LimiterSetting>,
    pub tripped: bool,
}

/// Per-bus load bookkeeping: base load plus steps, scaled by what remains
/// after shedding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadState {
    pub base: ZipLoadParams,
    pub dp: f64,
    pub dq: f64,
    pub shed: f64,
}

impl LoadState {
    pub fn effective(&self) -> ZipLoadParams {
        ZipLoadParams {
            p0: (self.base.p0 + self.dp) * (1.0 - self.shed),
            q0: (self.base.q0 + self.dq) * (1.0 - self.shed),
            ..self.base
        }
    }
}

/// Everything that changes at events: regulator enables, capacities,
/// limiter settings, loads.
#[derive(Debug, Clone, PartialEq)]
pub struct Operating {
    pub modes: Vec<InverterMode>,
    pub loads: Vec<Option<LoadState>>,
}

impl Operating {
    pub fn from_grid(grid: &Microgrid) -> Self {
        let modes = grid
            .inverters
            .iter()
            .map(|u| InverterMode {
                s_ref: u.power_reg.s_ref,
                power_reg_since: u.power_reg.enabled.then_some(f64::NEG_INFINITY),
                vf_reg_since: u.vf_reg.enabled.then_some(f64::NEG_INFINITY),
                limiter: None,
                tripped: false,
            })
            .collect();
        let loads = grid
            .network
            .buses
            .iter()
            .map(|b| {
                b.load.map(|base| LoadState {
                    base,
                    dp: 0.0,
                    dq: 0.0,
                    shed: 0.0,
                })
            })
            .collect();
        Self { modes, loads }
    }

    pub fn effective_loads(&self) -> Vec<Option<ZipLoadParams>> {
        self.loads.iter().map(|l| l.map(|s| s.effective())).collect()
    }
}

/// Explicit branch selection for piecewise regulator elements. `None`
/// fields follow the operating point.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InverterPin {
    pub power_reg_active: Option<bool>,
    pub f_side: Option<BandSide>,
    pub v_side: Option<BandSide>,
    pub action: Option<TriggerAction>,
}

/// Control-side quantities of one inverter at one instant.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Controls {
    pub w_ref: f64,
    pub v_ref: f64,
    pub e_s: f64,
    pub e_f: f64,
    pub e_v: f64,
    pub state_f: u8,
    pub state_v: u8,
    pub dw1: f64,
    pub dv1: f64,
    pub dw2: f64,
    pub dv2: f64,
    pub dxi_s: f64,
    pub dxi_f: f64,
    pub dxi_v: f64,
    pub shed_request: Option<f64>,
}

/// Per-inverter diagnostics at one evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct InverterDiag {
    pub ctl: Controls,
    pub p_inst: f64,
    pub q_inst: f64,
    pub s_m: f64,
    pub v_term: f64,
    /// Current injected into the connection bus (common frame).
    pub i_bus: Complex64,
    pub limiting: bool,
}

fn ramp(t: f64, since: Option<f64>) -> f64 {
    match since {
        None => 0.0,
        Some(s) => ((t - s) / REGULATOR_RAMP).clamp(0.0, 1.0),
    }
}

/// Supplementary and primary control evaluation, shared by both fidelities.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_controls(
    unit: &InverterUnit,
    mode: &InverterMode,
    pin: &InverterPin,
    p_m: f64,
    q_m: f64,
    f_m: f64,
    v_m: f64,
    reg: &RegulatorState,
    t: f64,
) -> Controls {
    let s_m = p_m.hypot(q_m);
    let pr_on = mode.power_reg_since.is_some();
    let e_s = match pin.power_reg_active {
        Some(true) => mode.s_ref - s_m,
        Some(false) => 0.0,
        None => crate::regulators::capacity_error(mode.s_ref, s_m),
    };
    let pr = power_regulator_step(
        &PowerRegulatorParams {
            enabled: pr_on,
            s_ref: mode.s_ref,
            ..unit.power_reg
        },
        reg.xi_s,
        e_s,
    );
    let rp = ramp(t, mode.power_reg_since);

    let vf = &unit.vf_reg;
    let df = unit.params.w0 - f_m;
    let dv = unit.params.v0 - v_m;
    let e_f = deadband_on(df, vf.df_max, pin.f_side.unwrap_or_else(|| band_side(df, vf.df_max)));
    let e_v = deadband_on(dv, vf.dv_max, pin.v_side.unwrap_or_else(|| band_side(dv, vf.dv_max)));
    let (state_f, state_v, natural) = trigger_logic(e_f, e_v);
    // A current-capped inverter has no headroom to move between the f and V
    // loops, so any violation it sees is a shedding case.
    let natural = if mode.limiter.is_some() && natural != TriggerAction::None {
        TriggerAction::Shed
    } else {
        natural
    };
    let action = pin.action.unwrap_or(natural);
    let vo = vf_regulator_step(
        &VfRegulatorParams {
            enabled: mode.vf_reg_since.is_some(),
            ..*vf
        },
        reg,
        e_f,
        e_v,
        action,
        mode.s_ref,
    );
    let rv = ramp(t, mode.vf_reg_since);

    let (dw1, dv1, dw2, dv2) = (pr.dw1 * rp, pr.dv1 * rp, vo.dw2 * rv, vo.dv2 * rv);
    let prim = droop_primary(&unit.params, p_m, q_m, dw1 + dw2, dv1 + dv2);
    Controls {
        w_ref: prim.w_ref,
        v_ref: prim.v_ref,
        e_s: if pr_on { e_s } else { 0.0 },
        e_f,
        e_v,
        state_f,
        state_v,
        dw1,
        dv1,
        dw2,
        dv2,
        dxi_s: pr.dxi_s,
        dxi_f: vo.dxi_f,
        dxi_v: vo.dxi_v,
        shed_request: vo.shed_request,
    }
}

/// One evaluation of the whole DAE.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub dx: Vec<f64>,
    pub diag: Vec<InverterDiag>,
    pub f_sys: f64,
}

/// The microgrid DAE for a given operating mode and time.
#[derive(Debug, Clone)]
pub struct MicrogridDae<'a> {
    pub grid: &'a Microgrid,
    pub ops: &'a Operating,
    pub fidelity: Fidelity,
    pub pins: Vec<InverterPin>,
    pub t: f64,
    loads: Vec<Option<ZipLoadParams>>,
}

impl<'a> MicrogridDae<'a> {
    pub fn new(grid: &'a Microgrid, ops: &'a Operating, fidelity: Fidelity) -> Self {
        Self {
            grid,
            ops,
            fidelity,
            pins: vec![InverterPin::default(); grid.n_inv()],
            t: f64::INFINITY,
            loads: ops.effective_loads(),
        }
    }

    pub fn with_pins(mut self, pins: Vec<InverterPin>) -> Self {
        self.pins = pins;
        self
    }

    pub fn at_time(mut self, t: f64) -> Self {
        self.t = t;
        self
    }

    pub fn loads(&self) -> &[Option<ZipLoadParams>] {
        &self.loads
    }

    pub fn n_x(&self) -> usize {
        self.grid.n_inv() * self.fidelity.block_len()
    }

    pub fn n_y(&self) -> usize {
        2 * self.grid.network.n_bus()
    }

    pub fn block<'x>(&self, x: &'x [f64], k: usize) -> &'x [f64] {
        let b = self.fidelity.block_len();
        &x[k * b..(k + 1) * b]
    }

    pub fn state_labels(&self) -> Vec<String> {
        let labels = self.fidelity.labels();
        self.grid
            .inverters
            .iter()
            .flat_map(|u| labels.iter().map(move |l| format!("inv{}_{l}", u.id)))
            .collect()
    }

    pub fn algebraic_labels(&self) -> Vec<String> {
        let ids: Vec<u32> = self.grid.network.buses.iter().map(|b| b.id).collect();
        ids.iter()
            .map(|id| format!("bus{id}_re"))
            .chain(ids.iter().map(|id| format!("bus{id}_im")))
            .collect()
    }

    pub fn bus_voltage(&self, y: &[f64], b: usize) -> Complex64 {
        let n = self.grid.network.n_bus();
        Complex64::new(y[b], y[n + b])
    }

    fn regulator_state(&self, blk: &[f64]) -> RegulatorState {
        let o = blk.len() - RegulatorState::LEN;
        RegulatorState {
            xi_s: blk[o],
            xi_f: blk[o + 1],
            xi_v: blk[o + 2],
        }
    }

    /// (p_m, q_m, f_m, v_meas, delta) of inverter block.
    fn measured(&self, blk: &[f64]) -> (f64, f64, f64, f64, f64) {
        match self.fidelity {
            Fidelity::Full => {
                let s = InverterState::from_slice(blk);
                (s.p_m, s.q_m, s.f_m, s.terminal_voltage(), s.delta)
            }
            Fidelity::Reduced => (blk[1], blk[2], blk[3], blk[4], blk[0]),
        }
    }

    pub fn controls(&self, x: &[f64]) -> Vec<Controls> {
        (0..self.grid.n_inv())
            .map(|k| {
                let blk = self.block(x, k);
                let (p_m, q_m, f_m, v_m, _) = self.measured(blk);
                let reg = self.regulator_state(blk);
                evaluate_controls(
                    &self.grid.inverters[k],
                    &self.ops.modes[k],
                    &self.pins[k],
                    p_m,
                    q_m,
                    f_m,
                    v_m,
                    &reg,
                    self.t,
                )
            })
            .collect()
    }

    /// Frequency seen by the loads: mean droop frequency of online inverters.
    pub fn system_frequency(&self, ctl: &[Controls]) -> f64 {
        let online: Vec<f64> = ctl
            .iter()
            .zip(&self.ops.modes)
            .filter(|(_, m)| !m.tripped)
            .map(|(c, _)| c.w_ref)
            .collect();
        if online.is_empty() {
            1.0
        } else {
            online.iter().sum::<f64>() / online.len() as f64
        }
    }

    /// Bus-side injected current of every inverter and the part of it that
    /// depends on bus voltage (the Norton admittance at reduced fidelity).
    fn injections(&self, x: &[f64], ctl: &[Controls]) -> (Vec<Complex64>, Vec<Complex64>) {
        let n = self.grid.network.n_bus();
        let mut src = vec![Complex64::new(0.0, 0.0); n];
        let mut adm = vec![Complex64::new(0.0, 0.0); n];
        for (k, unit) in self.grid.inverters.iter().enumerate() {
            if self.ops.modes[k].tripped {
                continue;
            }
            let blk = self.block(x, k);
            let b = self.grid.inverter_bus(k);
            match self.fidelity {
                Fidelity::Full => {
                    // Quasi-static coupling branch: the capacitor voltage
                    // drives the bus through z_c like every other network
                    // branch. The inductor current state then relaxes toward
                    // this branch current with the branch's own L/R time
                    // constant. Injecting the current state directly makes the
                    // bus voltage an ill-posed function of the currents
                    // whenever the loads have negative incremental conductance.
                    let s = InverterState::from_slice(blk);
                    let yc = 1.0 / unit.params.coupling_impedance();
                    src[b] += yc * to_common(s.v_d, s.v_q, s.delta);
                    adm[b] += yc;
                }
                Fidelity::Reduced => {
                    let yc = 1.0 / unit.params.coupling_impedance();
                    let e = Complex64::from_polar(ctl[k].v_ref, blk[0]);
                    src[b] += yc * e;
                    adm[b] += yc;
                }
            }
        }
        (src, adm)
    }

    /// Nodal current mismatch, `[Re..., Im...]`.
    pub fn network_residual(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let ctl = self.controls(x);
        let f_sys = self.system_frequency(&ctl);
        let (src, adm) = self.injections(x, &ctl);
        self.residual_with(y, f_sys, &src, &adm)
    }

    fn residual_with(&self, y: &[f64], f_sys: f64, src: &[Complex64], adm: &[Complex64]) -> Vec<f64> {
        let n = self.grid.network.n_bus();
        let ym = &self.grid.network.y_matrix;
        let v: Vec<Complex64> = (0..n).map(|b| self.bus_voltage(y, b)).collect();
        let mut r = vec![0.0; 2 * n];
        for i in 0..n {
            let mut c = Complex64::new(0.0, 0.0);
            for j in 0..n {
                c += ym[(i, j)] * v[j];
            }
            if let Some(load) = &self.loads[i] {
                let (p, q) = eval_zip_load(load, v[i].norm(), f_sys);
                c += Complex64::new(p, -q) / v[i].conj();
            }
            c += adm[i] * v[i] - src[i];
            r[i] = c.re;
            r[n + i] = c.im;
        }
        r
    }

    fn residual_jacobian(&self, y: &[f64], f_sys: f64, adm: &[Complex64]) -> DMatrix<f64> {
        let n = self.grid.network.n_bus();
        let ym = &self.grid.network.y_matrix;
        let mut jac = DMatrix::zeros(2 * n, 2 * n);
        for i in 0..n {
            for j in 0..n {
                let yy = ym[(i, j)] + if i == j { adm[i] } else { Complex64::new(0.0, 0.0) };
                jac[(i, j)] = yy.re;
                jac[(i, n + j)] = -yy.im;
                jac[(n + i, j)] = yy.im;
                jac[(n + i, n + j)] = yy.re;
            }
            if let Some(load) = &self.loads[i] {
                let (a, b) = (y[i], y[n + i]);
                let u2 = a * a + b * b;
                let u = u2.sqrt();
                let (p, q) = eval_zip_load(load, u, f_sys);
                let (pu, qu) = zip_load_dv(load, u, f_sys);
                // I = (R + jJ)/u², R = P a + Q b, J = P b - Q a
                let rr = p * a + q * b;
                let jj = p * b - q * a;
                let dr_da = p + (a * pu + b * qu) * a / u;
                let dr_db = q + (a * pu + b * qu) * b / u;
                let dj_da = -q + (b * pu - a * qu) * a / u;
                let dj_db = p + (b * pu - a * qu) * b / u;
                let w = 1.0 / u2;
                let dw_da = -2.0 * a * w * w;
                let dw_db = -2.0 * b * w * w;
                jac[(i, i)] += dr_da * w + rr * dw_da;
                jac[(i, n + i)] += dr_db * w + rr * dw_db;
                jac[(n + i, i)] += dj_da * w + jj * dw_da;
                jac[(n + i, n + i)] += dj_db * w + jj * dw_db;
            }
        }
        jac
    }

    /// Newton solve of the network for fixed differential states, warm
    /// started from `y0`.
    pub fn solve_network(&self, x: &[f64], y0: &[f64], tol: f64, v_collapse: f64) -> Result<Vec<f64>> {
        let ctl = self.controls(x);
        let f_sys = self.system_frequency(&ctl);
        let (src, adm) = self.injections(x, &ctl);
        let collapse = |reason: String| Error::SimulationCollapse {
            time: self.t,
            reason,
        };
        let mut y = y0.to_vec();
        let mut r = self.residual_with(&y, f_sys, &src, &adm);
        let mut norm = inf_norm(&r);
        for _ in 0..40 {
            if !norm.is_finite() {
                break;
            }
            if norm <= tol {
                let n = self.grid.network.n_bus();
                let vmin = (0..n).map(|b| self.bus_voltage(&y, b).norm()).fold(f64::INFINITY, f64::min);
                if vmin < v_collapse {
                    return Err(collapse(format!("bus voltage fell to {vmin:.3} p.u.")));
                }
                return Ok(y);
            }
            let jac = self.residual_jacobian(&y, f_sys, &adm);
            let rhs = -DVector::from_vec(r.clone());
            let dy = jac
                .lu()
                .solve(&rhs)
                .ok_or_else(|| collapse("singular network jacobian".into()))?;
            let mut step = 1.0;
            let mut accepted = false;
            for _ in 0..12 {
                let trial: Vec<f64> = y.iter().zip(dy.iter()).map(|(a, d)| a + step * d).collect();
                let rt = self.residual_with(&trial, f_sys, &src, &adm);
                let nt = inf_norm(&rt);
                if nt.is_finite() && nt < norm {
                    y = trial;
                    r = rt;
                    norm = nt;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        Err(collapse(format!("network solution lost (residual {norm:.3e})")))
    }

    /// Differential right-hand side plus per-inverter diagnostics.
    pub fn evaluate(&self, x: &[f64], y: &[f64]) -> Result<Evaluation> {
        let ctl = self.controls(x);
        let f_sys = self.system_frequency(&ctl);
        let w_common = ctl[0].w_ref;
        let wb = self.grid.network.base.w_base();
        let bl = self.fidelity.block_len();
        let mut dx = vec![0.0; self.n_x()];
        let mut diag = Vec::with_capacity(self.grid.n_inv());
        for (k, unit) in self.grid.inverters.iter().enumerate() {
            let blk = self.block(x, k);
            let mode = &self.ops.modes[k];
            let c = ctl[k];
            let v_bus = self.bus_voltage(y, self.grid.inverter_bus(k));
            let out = &mut dx[k * bl..(k + 1) * bl];
            let (p_m, q_m, _, v_meas, delta) = self.measured(blk);
            let mut d = InverterDiag {
                ctl: c,
                s_m: p_m.hypot(q_m),
                v_term: v_meas,
                ..Default::default()
            };
            if mode.tripped {
                diag.push(d);
                continue;
            }
            match self.fidelity {
                Fidelity::Full => {
                    let s = InverterState::from_slice(blk);
                    let limiter = mode.limiter.map(|l| LimiterCommand {
                        i_max: l.threshold(self.t),
                        active_power_priority: l.active_power_priority,
                    });
                    let rates = inverter_derivatives(
                        &unit.params,
                        &s,
                        crate::inverter::PrimarySignals {
                            w_ref: c.w_ref,
                            v_ref: c.v_ref,
                        },
                        &GridInterface {
                            v_bus,
                            w_common,
                            w_base: wb,
                            limiter,
                        },
                    )
                    .map_err(|_| Error::SimulationCollapse {
                        time: self.t,
                        reason: format!("inverter {} state became non-finite", unit.id),
                    })?;
                    out[..InverterState::LEN].copy_from_slice(&rates.d.to_array());
                    if k == 0 {
                        // reference frame: its angle is zero by definition
                        out[0] = 0.0;
                    }
                    d.p_inst = rates.p_inst;
                    d.q_inst = rates.q_inst;
                    d.limiting = rates.limiting;
                    d.i_bus = (to_common(s.v_d, s.v_q, s.delta) - v_bus) / unit.params.coupling_impedance();
                }
                Fidelity::Reduced => {
                    if mode.limiter.is_some() {
                        return Err(Error::Config(
                            "current limiters require full-fidelity simulation".into(),
                        ));
                    }
                    let e = Complex64::from_polar(c.v_ref, delta);
                    let ig = (e - v_bus) / unit.params.coupling_impedance();
                    let s = e * ig.conj();
                    let cut = unit.params.pm_filter_cutoff;
                    out[0] = if k == 0 { 0.0 } else { (c.w_ref - w_common) * wb };
                    out[1] = cut * (s.re - blk[1]);
                    out[2] = cut * (s.im - blk[2]);
                    out[3] = cut * (c.w_ref - blk[3]);
                    out[4] = cut * (c.v_ref - blk[4]);
                    d.p_inst = s.re;
                    d.q_inst = s.im;
                    d.i_bus = ig;
                    if !out.iter().all(|v| v.is_finite()) {
                        return Err(Error::SimulationCollapse {
                            time: self.t,
                            reason: format!("inverter {} state became non-finite", unit.id),
                        });
                    }
                }
            }
            let o = bl - RegulatorState::LEN;
            out[o] = c.dxi_s;
            out[o + 1] = c.dxi_f;
            out[o + 2] = c.dxi_v;
            diag.push(d);
        }
        Ok(Evaluation { dx, diag, f_sys })
    }

    /// States whose derivative is identically zero on the current branch:
    /// the reference angle, gated integrators and tripped units.
    pub fn frozen_mask(&self, x: &[f64]) -> Vec<bool> {
        let bl = self.fidelity.block_len();
        let o = bl - RegulatorState::LEN;
        let ctl = self.controls(x);
        let mut mask = vec![false; self.n_x()];
        for (k, mode) in self.ops.modes.iter().enumerate() {
            let m = &mut mask[k * bl..(k + 1) * bl];
            if mode.tripped {
                m.iter_mut().for_each(|v| *v = true);
                continue;
            }
            if k == 0 {
                m[0] = true;
            }
            let pin = &self.pins[k];
            let pr_live = mode.power_reg_since.is_some()
                && match pin.power_reg_active {
                    Some(a) => a,
                    None => ctl[k].e_s != 0.0,
                };
            m[o] = !pr_live;
            let action = pin
                .action
                .unwrap_or_else(|| trigger_logic(ctl[k].e_f, ctl[k].e_v).2);
            let vf_live = mode.vf_reg_since.is_some() && action == TriggerAction::Reallocate;
            m[o + 1] = !vf_live;
            m[o + 2] = !vf_live;
        }
        mask
    }

    /// Sum of bus-side inverter power minus load minus network loss. Equals
    /// `Σ Re(V_b · conj(mismatch_b))`, so it is bounded by the solver tolerance.
    pub fn power_balance(&self, y: &[f64], diag: &[InverterDiag], f_sys: f64) -> f64 {
        let n = self.grid.network.n_bus();
        let mut gen = 0.0;
        for (k, d) in diag.iter().enumerate() {
            if self.ops.modes[k].tripped {
                continue;
            }
            let vb = self.bus_voltage(y, self.grid.inverter_bus(k));
            gen += (vb * d.i_bus.conj()).re;
        }
        let mut load = 0.0;
        let mut vm = vec![0.0; n];
        let mut th = vec![0.0; n];
        for b in 0..n {
            let v = self.bus_voltage(y, b);
            vm[b] = v.norm();
            th[b] = v.arg();
            if let Some(l) = &self.loads[b] {
                load += eval_zip_load(l, vm[b], f_sys).0;
            }
        }
        gen - load - self.grid.network.losses(&vm, &th)
    }
}

/// Static operating point used to seed dynamic states.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatingPoint {
    /// Bus voltages (common frame), network buses only.
    pub v_bus: Vec<Complex64>,
    /// Terminal voltage of each inverter (common frame).
    pub v_term: Vec<Complex64>,
    pub f: f64,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    /// Power-regulator output `u` per inverter.
    pub u: Vec<f64>,
    /// Held V-f regulator outputs per inverter.
    pub held: Vec<(f64, f64)>,
}

/// Differential and algebraic vectors that sit exactly at `op`.
pub fn state_from_operating_point(grid: &Microgrid, fidelity: Fidelity, op: &OperatingPoint) -> (Vec<f64>, Vec<f64>) {
    let n = grid.network.n_bus();
    let bl = fidelity.block_len();
    let mut x = vec![0.0; grid.n_inv() * bl];
    for (k, unit) in grid.inverters.iter().enumerate() {
        let pr = &unit.params;
        let vt = op.v_term[k];
        let delta = vt.arg();
        let v_mag = vt.norm();
        let reg = RegulatorState {
            xi_s: if unit.power_reg.ki_s > 0.0 { op.u[k] / unit.power_reg.ki_s } else { 0.0 },
            xi_f: if unit.vf_reg.ki_f > 0.0 { op.held[k].0 / unit.vf_reg.ki_f } else { 0.0 },
            xi_v: if unit.vf_reg.ki_v > 0.0 { op.held[k].1 / unit.vf_reg.ki_v } else { 0.0 },
        };
        let blk = &mut x[k * bl..(k + 1) * bl];
        match fidelity {
            Fidelity::Full => {
                let ig = (vt - op.v_bus[grid.inverter_bus(k)]) / pr.coupling_impedance();
                let (i_gd, i_gq) = from_common(ig, delta);
                let i_d = i_gd;
                let i_q = i_gq + op.f * pr.c_f * v_mag;
                let s = InverterState {
                    delta,
                    phi_vd: 0.0,
                    phi_vq: 0.0,
                    phi_id: pr.r_f * i_d / pr.ki_i,
                    phi_iq: pr.r_f * i_q / pr.ki_i,
                    i_d,
                    i_q,
                    v_d: v_mag,
                    v_q: 0.0,
                    i_gd,
                    i_gq,
                    p_m: op.p[k],
                    q_m: op.q[k],
                    f_m: op.f,
                };
                blk[..InverterState::LEN].copy_from_slice(&s.to_array());
            }
            Fidelity::Reduced => {
                blk[..5].copy_from_slice(&[delta, op.p[k], op.q[k], op.f, v_mag]);
            }
        }
        let o = bl - RegulatorState::LEN;
        blk[o] = reg.xi_s;
        blk[o + 1] = reg.xi_f;
        blk[o + 2] = reg.xi_v;
    }
    let mut y = vec![0.0; 2 * n];
    for (b, v) in op.v_bus.iter().enumerate() {
        y[b] = v.re;
        y[n + b] = v.im;
    }
    (x, y)
}

pub(crate) fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| if x.is_nan() { f64::NAN } else { m.max(x.abs()) })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::grid::PerUnitBase;
    use approx::assert_relative_eq;

    pub(crate) fn unit(id: u32, bus: BusId, k_df: f64) -> InverterUnit {
        InverterUnit {
            id,
            bus,
            params: InverterParams {
                l_f: 0.05,
                c_f: 0.05,
                r_f: 0.005,
                kp_i: 0.5,
                ki_i: 2.0,
                kp_v: 0.1,
                ki_v: 1.0,
                k_df,
                k_dv: 5.0 * k_df,
                p0: 0.0,
                q0: 0.0,
                w0: 1.0,
                v0: 1.0,
                s_rated: 1.0,
                pm_filter_cutoff: 31.4,
                r_c: 0.01,
                x_c: 0.1,
            },
            power_reg: PowerRegulatorParams {
                kp_s: 0.2,
                ki_s: 4.0,
                k_w: 0.04,
                k_v: 0.03,
                s_ref: 1.0,
                enabled: false,
            },
            vf_reg: VfRegulatorParams {
                kp_f: 0.5,
                ki_f: 5.0,
                kp_v: 0.5,
                ki_v: 5.0,
                df_max: 0.01,
                dv_max: 0.05,
                enabled: false,
                w_limit: 0.05,
                v_limit: 0.1,
                shed_increment: 0.03,
            },
        }
    }

    pub(crate) fn two_bus_grid() -> Microgrid {
        let load = ZipLoadParams {
            p0: 0.4,
            q0: 0.2,
            p: [0.3, 0.3, 0.4],
            q: [0.5, 0.2, 0.3],
            k_pf: 1.5,
            k_qf: -0.5,
            f0: 1.0,
        };
        let net = NetworkModel::new(
            vec![Bus::new(1), Bus::new(2).with_load(load)],
            vec![Branch::from_impedance(1, 2, 0.02, 0.06)],
            PerUnitBase::default(),
        )
        .unwrap();
        Microgrid::new(net, vec![unit(1, 1, 0.01), unit(2, 2, 0.005)]).unwrap()
    }

    #[test]
    fn rejects_bad_topology() {
        let g = two_bus_grid();
        let e = Microgrid::new(g.network.clone(), vec![unit(1, 9, 0.01)]).unwrap_err();
        assert!(matches!(e, Error::UnknownBus(9)));
        let e = Microgrid::new(g.network.clone(), vec![unit(1, 1, 0.01), unit(1, 2, 0.01)]).unwrap_err();
        assert!(matches!(e, Error::Config(_)));
        assert!(Microgrid::new(g.network, vec![]).is_err());
    }

    #[test]
    fn extended_network_adds_terminals() {
        let g = two_bus_grid();
        let ext = g.extended_network().unwrap();
        assert_eq!(ext.n_bus(), 4);
        assert_eq!(ext.buses[2].id, 3);
        assert!(ext.buses.iter().all(|b| b.load.is_none()));
        let yc = 1.0 / Complex64::new(0.01, 0.1);
        assert_relative_eq!(ext.y_matrix[(2, 0)].re, -yc.re, epsilon = 1e-12);
    }

    #[test]
    fn network_jacobian_matches_differences() {
        let g = two_bus_grid();
        let ops = Operating::from_grid(&g);
        for fid in [Fidelity::Full, Fidelity::Reduced] {
            let dae = MicrogridDae::new(&g, &ops, fid);
            let mut x = vec![0.0; dae.n_x()];
            if fid == Fidelity::Reduced {
                x[4] = 1.0;
                x[8 + 4] = 1.0;
                x[8] = 0.05;
            }
            let y = vec![1.01, 0.97, 0.02, -0.04];
            let ctl = dae.controls(&x);
            let f = dae.system_frequency(&ctl);
            let (_, adm) = dae.injections(&x, &ctl);
            let jac = dae.residual_jacobian(&y, f, &adm);
            let h = 1e-7;
            for j in 0..4 {
                let mut yp = y.clone();
                let mut ym = y.clone();
                yp[j] += h;
                ym[j] -= h;
                let rp = dae.network_residual(&x, &yp);
                let rm = dae.network_residual(&x, &ym);
                for i in 0..4 {
                    assert_relative_eq!(jac[(i, j)], (rp[i] - rm[i]) / (2.0 * h), epsilon = 1e-6);
                }
            }
        }
    }

    #[test]
    fn reduced_network_solve_balances_power() {
        let g = two_bus_grid();
        let ops = Operating::from_grid(&g);
        let dae = MicrogridDae::new(&g, &ops, Fidelity::Reduced);
        let mut x = vec![0.0; dae.n_x()];
        x[4] = 1.0;
        x[12] = 1.0;
        x[3] = 1.0;
        x[11] = 1.0;
        let y = dae.solve_network(&x, &[1.0, 1.0, 0.0, 0.0], 1e-12, 0.5).unwrap();
        assert!(inf_norm(&dae.network_residual(&x, &y)) < 1e-12);
        let ev = dae.evaluate(&x, &y).unwrap();
        assert!(dae.power_balance(&y, &ev.diag, ev.f_sys).abs() < 1e-10);
    }

    #[test]
    fn collapse_when_load_is_unservable() {
        let mut g = two_bus_grid();
        g.network.buses[1].load = Some(ZipLoadParams::constant_power(50.0, 10.0));
        let ops = Operating::from_grid(&g);
        let dae = MicrogridDae::new(&g, &ops, Fidelity::Reduced);
        let mut x = vec![0.0; dae.n_x()];
        x[4] = 1.0;
        x[12] = 1.0;
        let e = dae.solve_network(&x, &[1.0, 1.0, 0.0, 0.0], 1e-10, 0.5).unwrap_err();
        assert!(matches!(e, Error::SimulationCollapse { .. }));
    }

    #[test]
    fn reduced_rejects_limiter() {
        let g = two_bus_grid();
        let mut ops = Operating::from_grid(&g);
        ops.modes[1].limiter = Some(LimiterSetting {
            i_max: 0.5,
            active_power_priority: true,
            since: 0.0,
            ramp: 0.0,
            i_start: 0.5,
        });
        let dae = MicrogridDae::new(&g, &ops, Fidelity::Reduced);
        let x = vec![0.0; dae.n_x()];
        let y = vec![1.0, 1.0, 0.0, 0.0];
        assert!(matches!(dae.evaluate(&x, &y), Err(Error::Config(_))));
    }

    #[test]
    fn limiter_threshold_ramps() {
        let l = LimiterSetting {
            i_max: 0.5,
            active_power_priority: false,
            since: 1.0,
            ramp: 2.0,
            i_start: 1.5,
        };
        assert_eq!(l.threshold(0.0), 1.5);
        assert_relative_eq!(l.threshold(2.0), 1.0);
        assert_eq!(l.threshold(9.0), 0.5);
    }

    #[test]
    fn gated_integrators_are_frozen() {
        let g = two_bus_grid();
        let ops = Operating::from_grid(&g);
        let dae = MicrogridDae::new(&g, &ops, Fidelity::Reduced);
        let mut x = vec![0.0; dae.n_x()];
        x[3] = 1.0;
        x[4] = 1.0;
        x[11] = 1.0;
        x[12] = 1.0;
        let mask = dae.frozen_mask(&x);
        assert!(mask[0] && !mask[8]);
        assert!(mask[5] && mask[6] && mask[7] && mask[13]);
        assert!(!mask[1] && !mask[9]);
    }
}
