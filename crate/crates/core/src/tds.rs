//! Fixed-step RK4 time-domain simulation with a network re-solve at every
//! stage, scheduled events, trip supervision and a load-shedding executor.

use serde::{Deserialize, Serialize};

use crate::equilibrium::{solve_droop_equilibrium, EquilibriumProblem};
use crate::error::{Error, Result};
use crate::grid::BusId;
use crate::inverter::InverterState;
use crate::system::{
    inf_norm, state_from_operating_point, Evaluation, Fidelity, LimiterSetting, Microgrid, MicrogridDae, Operating,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    LoadStep {
        bus: BusId,
        dp: f64,
        dq: f64,
    },
    SetCapacity {
        inverter: u32,
        s_ref: f64,
    },
    EnablePowerReg {
        inverter: u32,
    },
    EnableVfReg {
        inverter: u32,
    },
    /// Shed `fraction` of base load at `bus`, or at every loaded bus.
    Shed {
        #[serde(default)]
        bus: Option<BusId>,
        fraction: f64,
    },
    EnableCurrentLimiter {
        inverter: u32,
        i_max: f64,
        #[serde(default = "default_true")]
        active_power_priority: bool,
        /// Time over which the threshold falls from the present current to `i_max` (s).
        #[serde(default)]
        ramp: f64,
    },
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: f64,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripPolicy {
    pub enabled: bool,
    pub ratio: f64,
    pub delay: f64,
}

impl Default for TripPolicy {
    fn default() -> Self {
        Self {
            enabled: true,
            ratio: 1.5,
            delay: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShedPolicy {
    pub enabled: bool,
    /// Fraction of total base load per increment.
    pub increment: f64,
    /// Minimum time between increments (s).
    pub interval: f64,
    /// Largest cumulative shed before the run aborts.
    pub max_total: f64,
}

impl Default for ShedPolicy {
    fn default() -> Self {
        Self {
            enabled: true,
            increment: 0.01,
            interval: 0.5,
            max_total: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub t_end: f64,
    /// Integration step; defaults to 100 µs (full) or 1 ms (reduced).
    #[serde(default)]
    pub dt: Option<f64>,
    #[serde(default)]
    pub fidelity: Fidelity,
    #[serde(default = "default_ss_tol")]
    pub steady_state_tol: f64,
    #[serde(default = "default_net_tol")]
    pub network_solver_tol: f64,
    /// Output sample spacing (s).
    #[serde(default = "default_output")]
    pub output_interval: f64,
    /// Lowest bus voltage treated as a live network (p.u.).
    #[serde(default = "default_v_collapse")]
    pub v_collapse: f64,
    #[serde(default)]
    pub trip: TripPolicy,
    #[serde(default)]
    pub shed: ShedPolicy,
}

fn default_ss_tol() -> f64 {
    1e-8
}
fn default_net_tol() -> f64 {
    1e-11
}
fn default_output() -> f64 {
    1e-3
}
fn default_v_collapse() -> f64 {
    0.5
}

impl SimConfig {
    pub fn new(t_end: f64, fidelity: Fidelity) -> Self {
        Self {
            t_end,
            dt: None,
            fidelity,
            steady_state_tol: default_ss_tol(),
            network_solver_tol: default_net_tol(),
            output_interval: default_output(),
            v_collapse: default_v_collapse(),
            trip: TripPolicy::default(),
            shed: ShedPolicy::default(),
        }
    }

    pub fn step(&self) -> f64 {
        self.dt.unwrap_or(match self.fidelity {
            Fidelity::Full => 1e-4,
            Fidelity::Reduced => 1e-3,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let dt = self.step();
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Config("dt must be positive".into()));
        }
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return Err(Error::Config("t_end must be positive".into()));
        }
        if !(self.output_interval >= dt) {
            return Err(Error::Config("output interval must be at least one step".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "entry", rename_all = "snake_case")]
pub enum LogEntry {
    Applied { event: EventKind },
    ShedRequest { inverter: u32, magnitude: f64 },
    Trip { inverter: u32 },
    ShedFloor { message: String },
    Collapse { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub time: f64,
    #[serde(flatten)]
    pub entry: LogEntry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SimStatus {
    Completed,
    Collapsed { time: f64, reason: String },
    Aborted { time: f64, reason: String },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SimTrace {
    pub columns: Vec<String>,
    /// One row per output sample, first column is time.
    pub rows: Vec<Vec<f64>>,
    pub events: Vec<TraceEvent>,
}

impl SimTrace {
    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.column_index(name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    pub fn time(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r[0]).collect()
    }

    pub fn last(&self, name: &str) -> Option<f64> {
        let i = self.column_index(name)?;
        self.rows.last().map(|r| r[i])
    }

    /// Value of a column at the last sample not later than `t`.
    pub fn at(&self, name: &str, t: f64) -> Option<f64> {
        let i = self.column_index(name)?;
        self.rows.iter().take_while(|r| r[0] <= t + 1e-12).last().map(|r| r[i])
    }

    /// Bus frequency (p.u.) from the angle derivative on top of the
    /// common-frame frequency `f_sys`.
    pub fn bus_frequency(&self, bus: BusId, f_base: f64) -> Option<Vec<f64>> {
        let th = self.column(&format!("bus{bus}_theta"))?;
        let fs = self.column("f_sys")?;
        let t = self.time();
        let n = t.len();
        if n < 2 {
            return Some(fs);
        }
        let wrap = |d: f64| (d + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI) - std::f64::consts::PI;
        let scale = 2.0 * std::f64::consts::PI * f_base;
        Some(
            (0..n)
                .map(|i| {
                    let (a, b) = (i.saturating_sub(1), (i + 1).min(n - 1));
                    fs[i] + wrap(th[b] - th[a]) / (t[b] - t[a]) / scale
                })
                .collect(),
        )
    }

    pub fn shed_events(&self) -> usize {
        self.events
            .iter()
            .filter(|e| matches!(&e.entry, LogEntry::Applied { event: EventKind::Shed { .. } }))
            .count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutcome {
    pub trace: SimTrace,
    pub status: SimStatus,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub ops: Operating,
}

impl SimOutcome {
    pub fn completed(&self) -> bool {
        self.status == SimStatus::Completed
    }
}

/// Dynamic state placed on the static operating point of `ops`.
#[derive(Debug, Clone, PartialEq)]
pub struct Initialized {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Largest initial derivative.
    pub derivative_norm: f64,
}

pub fn initialize(grid: &Microgrid, ops: &Operating, config: &SimConfig) -> Result<Initialized> {
    let prob = EquilibriumProblem::from_operating(grid, ops);
    let eq = solve_droop_equilibrium(&prob)?;
    let (x, y) = state_from_operating_point(grid, config.fidelity, &eq.operating_point());
    let dae = MicrogridDae::new(grid, ops, config.fidelity).at_time(0.0);
    let ev = dae.evaluate(&x, &y)?;
    let derivative_norm = inf_norm(&ev.dx);
    if derivative_norm > config.steady_state_tol {
        log::warn!("initial derivatives reach {derivative_norm:.3e}; the start is not stationary");
    }
    Ok(Initialized { x, y, derivative_norm })
}

/// Emits uniform shedding increments while a shed request persists.
#[derive(Debug, Clone, PartialEq)]
pub struct ShedExecutor {
    pub policy: ShedPolicy,
    last: Option<f64>,
    pub total: f64,
}

impl ShedExecutor {
    pub fn new(policy: ShedPolicy) -> Self {
        Self {
            policy,
            last: None,
            total: 0.0,
        }
    }

    /// One shed event when a request is active and the cadence allows it.
    pub fn poll(&mut self, t: f64, request_active: bool) -> Result<Option<Event>> {
        if !request_active || !self.policy.enabled {
            return Ok(None);
        }
        if let Some(l) = self.last {
            if t - l < self.policy.interval - 1e-9 {
                return Ok(None);
            }
        }
        if self.total + self.policy.increment > self.policy.max_total + 1e-12 {
            return Err(Error::ShedFloor(format!(
                "already shed {:.1}% of base load; the next increment would pass the {:.1}% floor",
                100.0 * self.total,
                100.0 * self.policy.max_total
            )));
        }
        self.total += self.policy.increment;
        self.last = Some(t);
        Ok(Some(Event {
            time: t,
            kind: EventKind::Shed {
                bus: None,
                fraction: self.policy.increment,
            },
        }))
    }
}

/// Shedding decision for one request: see [`ShedExecutor::poll`].
pub fn shed_policy_executor(exec: &mut ShedExecutor, t: f64, request_active: bool) -> Result<Option<Event>> {
    exec.poll(t, request_active)
}

/// Earliest sample after which every signal stays within `tol`
/// (peak-to-peak) for the rest of the trace, provided at least `window`
/// seconds of data confirm it.
pub fn detect_steady_state(time: &[f64], signals: &[Vec<f64>], window: f64, tol: f64) -> Option<f64> {
    let n = time.len();
    if n == 0 || signals.iter().any(|s| s.len() != n) {
        return None;
    }
    let t_end = time[n - 1];
    if window > t_end - time[0] {
        return None;
    }
    let mut lo = vec![f64::INFINITY; signals.len()];
    let mut hi = vec![f64::NEG_INFINITY; signals.len()];
    let mut earliest = None;
    for i in (0..n).rev() {
        let mut ok = true;
        for (k, s) in signals.iter().enumerate() {
            lo[k] = lo[k].min(s[i]);
            hi[k] = hi[k].max(s[i]);
            ok &= hi[k] - lo[k] < tol;
        }
        if !ok {
            break;
        }
        earliest = Some(time[i]);
    }
    earliest.filter(|t| t_end - t >= window)
}

fn trace_columns(grid: &Microgrid) -> Vec<String> {
    let mut c = vec!["time".to_string(), "f_sys".into(), "balance_residual".into()];
    for u in &grid.inverters {
        for s in [
            "p", "q", "s", "s_m", "v", "f", "e_s", "e_f", "e_v", "state_f", "state_v", "dw1", "dv1", "dw2", "dv2",
        ] {
            c.push(format!("inv{}_{s}", u.id));
        }
    }
    for b in &grid.network.buses {
        c.push(format!("bus{}_v", b.id));
        c.push(format!("bus{}_theta", b.id));
    }
    c
}

fn trace_row(dae: &MicrogridDae, t: f64, y: &[f64], ev: &Evaluation) -> Vec<f64> {
    let mut r = vec![t, ev.f_sys, dae.power_balance(y, &ev.diag, ev.f_sys)];
    for d in &ev.diag {
        let c = &d.ctl;
        r.extend_from_slice(&[
            d.p_inst,
            d.q_inst,
            d.p_inst.hypot(d.q_inst),
            d.s_m,
            d.v_term,
            c.w_ref,
            c.e_s,
            c.e_f,
            c.e_v,
            c.state_f as f64,
            c.state_v as f64,
            c.dw1,
            c.dv1,
            c.dw2,
            c.dv2,
        ]);
    }
    for b in 0..dae.grid.network.n_bus() {
        let v = dae.bus_voltage(y, b);
        r.push(v.norm());
        r.push(v.arg());
    }
    r
}

fn check_events(grid: &Microgrid, events: &[Event], t_end: f64) -> Result<()> {
    for e in events {
        if !(e.time >= 0.0 && e.time <= t_end) {
            return Err(Error::Config(format!("event at t = {} outside [0, {t_end}]", e.time)));
        }
        match &e.kind {
            EventKind::LoadStep { bus, .. } => {
                let b = grid.network.bus_index(*bus)?;
                if grid.network.buses[b].load.is_none() {
                    return Err(Error::Config(format!("load step at bus {bus}, which has no load")));
                }
            }
            EventKind::Shed { bus, fraction } => {
                if let Some(bus) = bus {
                    grid.network.bus_index(*bus)?;
                }
                if !(*fraction > 0.0 && *fraction < 1.0) {
                    return Err(Error::Config("shed fraction must lie in (0, 1)".into()));
                }
            }
            EventKind::SetCapacity { inverter, s_ref } => {
                grid.inverter_index(*inverter)?;
                if !(*s_ref >= 0.0) {
                    return Err(Error::Config("capacity must be non-negative".into()));
                }
            }
            EventKind::EnablePowerReg { inverter } | EventKind::EnableVfReg { inverter } => {
                grid.inverter_index(*inverter)?;
            }
            EventKind::EnableCurrentLimiter { inverter, i_max, ramp, .. } => {
                grid.inverter_index(*inverter)?;
                if !(*i_max > 0.0 && *ramp >= 0.0) {
                    return Err(Error::Config("limiter needs i_max > 0 and ramp >= 0".into()));
                }
            }
        }
    }
    Ok(())
}

fn apply_event(
    grid: &Microgrid,
    ops: &mut Operating,
    fidelity: Fidelity,
    x: &[f64],
    t: f64,
    kind: &EventKind,
) -> Result<()> {
    match kind {
        EventKind::LoadStep { bus, dp, dq } => {
            let b = grid.network.bus_index(*bus)?;
            if let Some(l) = ops.loads[b].as_mut() {
                l.dp += dp;
                l.dq += dq;
            }
        }
        EventKind::SetCapacity { inverter, s_ref } => {
            ops.modes[grid.inverter_index(*inverter)?].s_ref = *s_ref;
        }
        EventKind::EnablePowerReg { inverter } => {
            let m = &mut ops.modes[grid.inverter_index(*inverter)?];
            m.power_reg_since.get_or_insert(t);
        }
        EventKind::EnableVfReg { inverter } => {
            let m = &mut ops.modes[grid.inverter_index(*inverter)?];
            m.vf_reg_since.get_or_insert(t);
        }
        EventKind::Shed { bus, fraction } => {
            let target = bus.map(|b| grid.network.bus_index(b)).transpose()?;
            for (b, l) in ops.loads.iter_mut().enumerate() {
                if let Some(l) = l {
                    if target.is_none_or(|tb| tb == b) {
                        l.shed = (l.shed + fraction).min(1.0);
                    }
                }
            }
        }
        EventKind::EnableCurrentLimiter {
            inverter,
            i_max,
            active_power_priority,
            ramp,
        } => {
            if fidelity == Fidelity::Reduced {
                return Err(Error::Config("current limiters require full-fidelity simulation".into()));
            }
            let k = grid.inverter_index(*inverter)?;
            let bl = fidelity.block_len();
            let s = InverterState::from_slice(&x[k * bl..(k + 1) * bl]);
            let i_now = s.i_d.hypot(s.i_q);
            ops.modes[k].limiter = Some(LimiterSetting {
                i_max: *i_max,
                active_power_priority: *active_power_priority,
                since: t,
                ramp: *ramp,
                i_start: i_now.max(*i_max),
            });
        }
    }
    Ok(())
}

struct Run<'a> {
    grid: &'a Microgrid,
    config: &'a SimConfig,
}

impl Run<'_> {
    fn dae<'b>(&'b self, ops: &'b Operating, t: f64) -> MicrogridDae<'b> {
        MicrogridDae::new(self.grid, ops, self.config.fidelity).at_time(t)
    }

    fn solve(&self, ops: &Operating, x: &[f64], y: &[f64], t: f64) -> Result<Vec<f64>> {
        self.dae(ops, t)
            .solve_network(x, y, self.config.network_solver_tol, self.config.v_collapse)
    }

    fn rhs(&self, ops: &Operating, x: &[f64], y: &[f64], t: f64) -> Result<Vec<f64>> {
        Ok(self.dae(ops, t).evaluate(x, y)?.dx)
    }

    fn rk4(&self, ops: &Operating, x: &[f64], y: &[f64], t: f64, dt: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let axpy = |a: &[f64], k: &[f64], h: f64| -> Vec<f64> { a.iter().zip(k).map(|(a, k)| a + h * k).collect() };
        let k1 = self.rhs(ops, x, y, t)?;
        let x2 = axpy(x, &k1, 0.5 * dt);
        let y2 = self.solve(ops, &x2, y, t + 0.5 * dt)?;
        let k2 = self.rhs(ops, &x2, &y2, t + 0.5 * dt)?;
        let x3 = axpy(x, &k2, 0.5 * dt);
        let y3 = self.solve(ops, &x3, &y2, t + 0.5 * dt)?;
        let k3 = self.rhs(ops, &x3, &y3, t + 0.5 * dt)?;
        let x4 = axpy(x, &k3, dt);
        let y4 = self.solve(ops, &x4, &y3, t + dt)?;
        let k4 = self.rhs(ops, &x4, &y4, t + dt)?;
        let xn: Vec<f64> = (0..x.len())
            .map(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
            .collect();
        let yn = self.solve(ops, &xn, &y4, t + dt)?;
        Ok((xn, yn))
    }
}

/// Integrate from the static operating point of the grid's initial mode.
pub fn simulate(grid: &Microgrid, config: &SimConfig, events: &[Event]) -> Result<SimOutcome> {
    let ops = Operating::from_grid(grid);
    let init = initialize(grid, &ops, config)?;
    simulate_from(grid, config, events, ops, init.x, init.y)
}

/// Integrate from an explicit state.
pub fn simulate_from(
    grid: &Microgrid,
    config: &SimConfig,
    events: &[Event],
    mut ops: Operating,
    mut x: Vec<f64>,
    mut y: Vec<f64>,
) -> Result<SimOutcome> {
    config.validate()?;
    check_events(grid, events, config.t_end)?;
    let dt = config.step();
    let n_steps = (config.t_end / dt).round() as usize;
    let decim = ((config.output_interval / dt).round() as usize).max(1);
    let mut pending: Vec<(usize, &Event)> = events
        .iter()
        .map(|e| (((e.time / dt) - 1e-9).ceil().max(0.0) as usize, e))
        .collect();
    pending.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.time.total_cmp(&b.1.time)));
    let mut cursor = 0;

    let run = Run { grid, config };
    let mut trace = SimTrace {
        columns: trace_columns(grid),
        ..Default::default()
    };
    let mut shed = ShedExecutor::new(config.shed);
    let mut over_time = vec![0.0; grid.n_inv()];
    let mut requesting = vec![false; grid.n_inv()];
    let mut status = SimStatus::Completed;

    for i in 0..=n_steps {
        let t = i as f64 * dt;
        let mut changed = false;
        while cursor < pending.len() && pending[cursor].0 <= i {
            let e = pending[cursor].1;
            apply_event(grid, &mut ops, config.fidelity, &x, t, &e.kind)?;
            trace.events.push(TraceEvent {
                time: t,
                entry: LogEntry::Applied { event: e.kind.clone() },
            });
            cursor += 1;
            changed = true;
        }
        let step_result: Result<()> = (|| {
            if changed {
                y = run.solve(&ops, &x, &y, t)?;
            }
            let dae = run.dae(&ops, t);
            let ev = dae.evaluate(&x, &y)?;
            if i % decim == 0 {
                trace.rows.push(trace_row(&dae, t, &y, &ev));
            }

            let mut topology_changed = false;
            for (k, d) in ev.diag.iter().enumerate() {
                let m = &ops.modes[k];
                if m.tripped {
                    continue;
                }
                let guarded = m.power_reg_since.is_some() || m.limiter.is_some();
                if config.trip.enabled && !guarded && d.s_m > config.trip.ratio * m.s_ref {
                    over_time[k] += dt;
                } else {
                    over_time[k] = 0.0;
                }
                let req = d.ctl.shed_request;
                if req.is_some() && !requesting[k] {
                    trace.events.push(TraceEvent {
                        time: t,
                        entry: LogEntry::ShedRequest {
                            inverter: grid.inverters[k].id,
                            magnitude: req.unwrap_or(0.0),
                        },
                    });
                }
                requesting[k] = req.is_some();
            }
            for k in 0..grid.n_inv() {
                if over_time[k] > config.trip.delay && !ops.modes[k].tripped {
                    ops.modes[k].tripped = true;
                    topology_changed = true;
                    trace.events.push(TraceEvent {
                        time: t,
                        entry: LogEntry::Trip {
                            inverter: grid.inverters[k].id,
                        },
                    });
                }
            }
            if let Some(e) = shed.poll(t, requesting.iter().any(|&r| r))? {
                apply_event(grid, &mut ops, config.fidelity, &x, t, &e.kind)?;
                trace.events.push(TraceEvent {
                    time: t,
                    entry: LogEntry::Applied { event: e.kind },
                });
                topology_changed = true;
            }
            if topology_changed {
                y = run.solve(&ops, &x, &y, t)?;
            }
            if i < n_steps {
                let (xn, yn) = run.rk4(&ops, &x, &y, t, dt)?;
                x = xn;
                y = yn;
            }
            Ok(())
        })();
        match step_result {
            Ok(()) => {}
            Err(Error::SimulationCollapse { reason, .. }) => {
                trace.events.push(TraceEvent {
                    time: t,
                    entry: LogEntry::Collapse { reason: reason.clone() },
                });
                status = SimStatus::Collapsed { time: t, reason };
                break;
            }
            Err(Error::ShedFloor(message)) => {
                trace.events.push(TraceEvent {
                    time: t,
                    entry: LogEntry::ShedFloor { message: message.clone() },
                });
                status = SimStatus::Aborted { time: t, reason: message };
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(SimOutcome {
        trace,
        status,
        x,
        y,
        ops,
    })
}
