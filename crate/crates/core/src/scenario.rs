//! Scenario files: one JSON document describing the network, loads,
//! inverters, event schedule and engine options.
//!
//! Power-like values may be written with a unit suffix (`"1.2 MVA"`,
//! `"200 kW"`, `"100 kVar"`, `"0.12 pu"`); they are converted to p.u. on the
//! scenario's `s_base` before typed parsing. Bare numbers are already p.u.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::equilibrium::SweepOptions;
use crate::error::{Error, Result};
use crate::grid::{Branch, Bus, BusId, NetworkModel, PerUnitBase, ZipLoadParams};
use crate::inverter::InverterParams;
use crate::regulators::{PowerRegulatorParams, VfRegulatorParams};
use crate::smallsignal::{log_grid, GainSweepOptions, SweepCondition};
use crate::system::{Fidelity, InverterUnit, Microgrid};
use crate::tds::{Event, EventKind, SimConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    #[serde(default)]
    pub base: PerUnitBase,
    pub network: NetworkSection,
    #[serde(default)]
    pub loads: Vec<LoadSpec>,
    pub inverters: Vec<InverterSpec>,
    #[serde(default)]
    pub events: Vec<Event>,
    #[serde(default)]
    pub engine: EngineSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub buses: Vec<BusSpec>,
    pub branches: Vec<BranchSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusSpec {
    pub id: BusId,
    #[serde(default = "one")]
    pub v_nominal: f64,
    #[serde(default, skip_serializing_if = "is_zero_pair")]
    pub shunt: (f64, f64),
}

/// A branch given either as impedance (`r`, `x`) or admittance (`g`, `b`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchSpec {
    pub from: BusId,
    pub to: BusId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadSpec {
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub name: String,
    pub bus: BusId,
    pub p0: f64,
    pub q0: f64,
    pub p: [f64; 3],
    pub q: [f64; 3],
    pub k_pf: f64,
    pub k_qf: f64,
    #[serde(default = "one")]
    pub f0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InverterSpec {
    pub id: u32,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub name: String,
    pub bus: BusId,
    pub params: InverterParams,
    pub power_reg: PowerRegulatorParams,
    pub vf_reg: VfRegulatorParams,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub equilibrium: Option<EquilibriumSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feasibility: Option<FeasibilitySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eigen: Option<EigenSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EquilibriumSpec {
    /// Uniform multiplier on every base load.
    #[serde(default = "one")]
    pub load_scale: f64,
}

impl Default for EquilibriumSpec {
    fn default() -> Self {
        Self { load_scale: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeasibilitySpec {
    #[serde(default = "default_load_factors")]
    pub load_factors: Vec<f64>,
    #[serde(default = "default_n_angles")]
    pub n_angles: usize,
    #[serde(default = "default_alpha_range")]
    pub alpha_range: (f64, f64),
    #[serde(default = "default_df_max")]
    pub df_max: f64,
    #[serde(default = "default_dv_max")]
    pub dv_max: f64,
    /// Bus ids whose voltage is checked; the inverter buses when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub monitored: Option<Vec<BusId>>,
    #[serde(default)]
    pub full_grid: bool,
    /// Search the smallest shed fraction for every infeasible load factor.
    #[serde(default = "yes")]
    pub min_shed: bool,
}

impl Default for FeasibilitySpec {
    fn default() -> Self {
        Self {
            load_factors: default_load_factors(),
            n_angles: default_n_angles(),
            alpha_range: default_alpha_range(),
            df_max: default_df_max(),
            dv_max: default_dv_max(),
            monitored: None,
            full_grid: false,
            min_shed: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EigenSpec {
    #[serde(default = "default_conditions")]
    pub conditions: Vec<u8>,
    #[serde(default = "default_lo")]
    pub lo: f64,
    #[serde(default = "default_hi")]
    pub hi: f64,
    #[serde(default = "default_points")]
    pub points: usize,
    #[serde(default)]
    pub fidelity: Fidelity,
    #[serde(default = "default_h")]
    pub h: f64,
    #[serde(default = "default_refine")]
    pub refine_tol: f64,
}

impl Default for EigenSpec {
    fn default() -> Self {
        Self {
            conditions: default_conditions(),
            lo: default_lo(),
            hi: default_hi(),
            points: default_points(),
            fidelity: Fidelity::default(),
            h: default_h(),
            refine_tol: default_refine(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    /// Plot layout emitted next to the raw artifacts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout: Option<String>,
}

fn one() -> f64 {
    1.0
}
fn yes() -> bool {
    true
}
fn is_zero_pair(v: &(f64, f64)) -> bool {
    v.0 == 0.0 && v.1 == 0.0
}
fn default_load_factors() -> Vec<f64> {
    vec![1.0, 1.02, 1.05, 1.08]
}
fn default_n_angles() -> usize {
    101
}
fn default_alpha_range() -> (f64, f64) {
    crate::equilibrium::DEFAULT_ALPHA_WINDOW
}
fn default_df_max() -> f64 {
    0.01
}
fn default_dv_max() -> f64 {
    0.05
}
fn default_conditions() -> Vec<u8> {
    vec![1, 2, 3]
}
fn default_lo() -> f64 {
    0.2
}
fn default_hi() -> f64 {
    10.0
}
fn default_points() -> usize {
    40
}
fn default_h() -> f64 {
    1e-6
}
fn default_refine() -> f64 {
    1e-4
}

/// A parsed, cross-checked scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub description: String,
    pub grid: Microgrid,
    /// Load names by bus id (unnamed loads are absent).
    pub load_names: Vec<(BusId, String)>,
    pub inverter_names: Vec<String>,
    /// Sorted by time; ties keep file order.
    pub events: Vec<Event>,
    pub engine: EngineSection,
    pub output: OutputSection,
}

impl Scenario {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let mut doc: Value = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("line {}, column {}: {e}", e.line(), e.column())))?;
        normalize_document(&mut doc)?;
        let file: ScenarioFile = serde_path_to_error::deserialize(doc).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("field `{path}`: {}", e.into_inner()))
        })?;
        Self::from_file(file)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn from_file(file: ScenarioFile) -> Result<Self> {
        let mut buses: Vec<Bus> = file
            .network
            .buses
            .iter()
            .map(|b| Bus {
                id: b.id,
                v_nominal: b.v_nominal,
                load: None,
                shunt: b.shunt,
            })
            .collect();
        let pos: HashMap<BusId, usize> = buses.iter().enumerate().map(|(k, b)| (b.id, k)).collect();
        let mut load_names = Vec::new();
        for (k, l) in file.loads.iter().enumerate() {
            let &i = pos
                .get(&l.bus)
                .ok_or_else(|| Error::Config(format!("loads[{k}]: unknown bus {}", l.bus)))?;
            if buses[i].load.is_some() {
                return Err(Error::Config(format!("loads[{k}]: bus {} already has a load", l.bus)));
            }
            buses[i].load = Some(ZipLoadParams {
                p0: l.p0,
                q0: l.q0,
                p: l.p,
                q: l.q,
                k_pf: l.k_pf,
                k_qf: l.k_qf,
                f0: l.f0,
            });
            if !l.name.is_empty() {
                load_names.push((l.bus, l.name.clone()));
            }
        }
        let branches = file
            .network
            .branches
            .iter()
            .enumerate()
            .map(|(k, br)| match (br.r, br.x, br.g, br.b) {
                (Some(r), Some(x), None, None) => {
                    if r == 0.0 && x == 0.0 {
                        Err(Error::Config(format!("network.branches[{k}]: zero impedance")))
                    } else {
                        Ok(Branch::from_impedance(br.from, br.to, r, x))
                    }
                }
                (None, None, Some(g), Some(b)) => Ok(Branch {
                    from: br.from,
                    to: br.to,
                    g,
                    b,
                }),
                _ => Err(Error::Config(format!(
                    "network.branches[{k}]: give either (r, x) or (g, b)"
                ))),
            })
            .collect::<Result<Vec<_>>>()?;
        let network = NetworkModel::new(buses, branches, file.base)?;
        let inverter_names = file.inverters.iter().map(|u| u.name.clone()).collect();
        let units = file
            .inverters
            .into_iter()
            .map(|u| InverterUnit {
                id: u.id,
                bus: u.bus,
                params: u.params,
                power_reg: u.power_reg,
                vf_reg: u.vf_reg,
            })
            .collect();
        let grid = Microgrid::new(network, units)?;

        let mut events = file.events;
        events.sort_by(|a, b| a.time.total_cmp(&b.time));
        check_events(&grid, &events, file.engine.simulate.as_ref())?;
        if let Some(sim) = &file.engine.simulate {
            sim.validate()?;
        }
        if let Some(fs) = &file.engine.feasibility {
            if fs.n_angles == 0 {
                return Err(Error::Config("engine.feasibility.n_angles must be positive".into()));
            }
            for id in fs.monitored.iter().flatten() {
                grid.network.bus_index(*id)?;
            }
        }
        if let Some(es) = &file.engine.eigen {
            for &c in &es.conditions {
                SweepCondition::from_index(c)?;
            }
            if !(es.lo > 0.0 && es.hi >= es.lo) {
                return Err(Error::Config("engine.eigen needs 0 < lo <= hi".into()));
            }
        }
        Ok(Self {
            name: file.name,
            description: file.description,
            grid,
            load_names,
            inverter_names,
            events,
            engine: file.engine,
            output: file.output,
        })
    }

    /// Serializable form; every value is written in p.u.
    pub fn to_file(&self) -> ScenarioFile {
        let net = &self.grid.network;
        let names: HashMap<BusId, &String> = self.load_names.iter().map(|(b, n)| (*b, n)).collect();
        ScenarioFile {
            name: self.name.clone(),
            description: self.description.clone(),
            base: net.base,
            network: NetworkSection {
                buses: net
                    .buses
                    .iter()
                    .map(|b| BusSpec {
                        id: b.id,
                        v_nominal: b.v_nominal,
                        shunt: b.shunt,
                    })
                    .collect(),
                branches: net
                    .branches
                    .iter()
                    .map(|br| BranchSpec {
                        from: br.from,
                        to: br.to,
                        r: None,
                        x: None,
                        g: Some(br.g),
                        b: Some(br.b),
                    })
                    .collect(),
            },
            loads: net
                .buses
                .iter()
                .filter_map(|b| {
                    b.load.map(|l| LoadSpec {
                        name: names.get(&b.id).map(|n| n.to_string()).unwrap_or_default(),
                        bus: b.id,
                        p0: l.p0,
                        q0: l.q0,
                        p: l.p,
                        q: l.q,
                        k_pf: l.k_pf,
                        k_qf: l.k_qf,
                        f0: l.f0,
                    })
                })
                .collect(),
            inverters: self
                .grid
                .inverters
                .iter()
                .zip(&self.inverter_names)
                .map(|(u, name)| InverterSpec {
                    id: u.id,
                    name: name.clone(),
                    bus: u.bus,
                    params: u.params,
                    power_reg: u.power_reg,
                    vf_reg: u.vf_reg,
                })
                .collect(),
            events: self.events.clone(),
            engine: self.engine.clone(),
            output: self.output.clone(),
        }
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_file())?)
    }

    pub fn inverter_label(&self, k: usize) -> String {
        let name = &self.inverter_names[k];
        if name.is_empty() {
            format!("inv{}", self.grid.inverters[k].id)
        } else {
            name.clone()
        }
    }

    /// Simulation settings: the scenario's own, or a run long enough to
    /// cover the schedule.
    pub fn sim_config(&self) -> SimConfig {
        self.engine.simulate.clone().unwrap_or_else(|| {
            let last = self.events.last().map_or(0.0, |e| e.time);
            SimConfig::new((last + 5.0).max(5.0), Fidelity::Reduced)
        })
    }

    pub fn sweep_options(&self) -> Result<(Vec<f64>, SweepOptions, bool)> {
        let spec = self.engine.feasibility.clone().unwrap_or_default();
        let monitored = spec
            .monitored
            .as_ref()
            .map(|ids| ids.iter().map(|id| self.grid.network.bus_index(*id)).collect::<Result<Vec<_>>>())
            .transpose()?;
        let opts = SweepOptions {
            n_angles: spec.n_angles,
            alpha_range: spec.alpha_range,
            df_max: spec.df_max,
            dv_max: spec.dv_max,
            monitored,
            full_grid: spec.full_grid,
            ..SweepOptions::default()
        };
        Ok((spec.load_factors, opts, spec.min_shed))
    }

    pub fn gain_sweep_options(&self) -> (Vec<SweepCondition>, GainSweepOptions) {
        let spec = self.engine.eigen.clone().unwrap_or_default();
        let conditions = spec
            .conditions
            .iter()
            .filter_map(|&c| SweepCondition::from_index(c).ok())
            .collect();
        let opts = GainSweepOptions {
            multipliers: log_grid(spec.lo, spec.hi, spec.points),
            fidelity: spec.fidelity,
            h: spec.h,
            refine_tol: spec.refine_tol,
            ..GainSweepOptions::default()
        };
        (conditions, opts)
    }
}

fn check_events(grid: &Microgrid, events: &[Event], sim: Option<&SimConfig>) -> Result<()> {
    let bad = |k: usize, m: String| Err(Error::Config(format!("events[{k}]: {m}")));
    let known = |k: usize, bus: BusId| -> Result<()> {
        grid.network
            .bus_index(bus)
            .map(|_| ())
            .map_err(|_| Error::Config(format!("events[{k}]: unknown bus {bus}")))
    };
    let inverters: BTreeSet<u32> = grid.inverters.iter().map(|u| u.id).collect();
    for (k, ev) in events.iter().enumerate() {
        if !(ev.time.is_finite() && ev.time >= 0.0) {
            return bad(k, format!("time {} must be a non-negative number", ev.time));
        }
        if let Some(sim) = sim {
            if ev.time > sim.t_end {
                return bad(k, format!("time {} lies after t_end {}", ev.time, sim.t_end));
            }
        }
        let inv = match &ev.kind {
            EventKind::SetCapacity { inverter, s_ref } => {
                if !(*s_ref >= 0.0) {
                    return bad(k, "s_ref must be non-negative".into());
                }
                Some(*inverter)
            }
            EventKind::EnablePowerReg { inverter } | EventKind::EnableVfReg { inverter } => Some(*inverter),
            EventKind::EnableCurrentLimiter { inverter, i_max, ramp, .. } => {
                if !(*i_max > 0.0 && *ramp >= 0.0) {
                    return bad(k, "limiter needs i_max > 0 and ramp >= 0".into());
                }
                Some(*inverter)
            }
            EventKind::LoadStep { bus, .. } => {
                known(k, *bus)?;
                None
            }
            EventKind::Shed { bus, fraction } => {
                if let Some(bus) = bus {
                    known(k, *bus)?;
                }
                if !(0.0..1.0).contains(fraction) {
                    return bad(k, "shed fraction must lie in [0, 1)".into());
                }
                None
            }
        };
        if let Some(id) = inv {
            if !inverters.contains(&id) {
                return bad(k, format!("unknown inverter {id}"));
            }
        }
    }
    Ok(())
}

/// Converts unit-suffixed strings anywhere in the document to p.u. The
/// `base` section itself accepts `"10 MVA"`, `"12.47 kV"` and `"60 Hz"`.
fn normalize_document(doc: &mut Value) -> Result<()> {
    let mut s_base = PerUnitBase::default().s_base;
    if let Some(base) = doc.get_mut("base").and_then(Value::as_object_mut) {
        for (key, expect) in [("s_base", "VA"), ("v_base", "V"), ("f_base", "Hz")] {
            if let Some(v) = base.get_mut(key) {
                if let Value::String(text) = v {
                    let (x, unit) = parse_quantity(text)
                        .ok_or_else(|| Error::Config(format!("field `base.{key}`: cannot read `{text}`")))?;
                    let si = si_value(x, &unit, expect)
                        .ok_or_else(|| Error::Config(format!("field `base.{key}`: expected a value in {expect}")))?;
                    *v = Value::from(si);
                }
                if key == "s_base" {
                    s_base = v.as_f64().unwrap_or(s_base);
                }
            }
        }
    }
    if !(s_base > 0.0) {
        return Err(Error::Config("field `base.s_base` must be positive".into()));
    }
    if let Some(obj) = doc.as_object_mut() {
        for (key, v) in obj.iter_mut() {
            if key != "base" {
                normalize_value(v, s_base, key)?;
            }
        }
    }
    Ok(())
}

fn normalize_value(v: &mut Value, s_base: f64, path: &str) -> Result<()> {
    match v {
        Value::String(text) => {
            if let Some((x, unit)) = parse_quantity(text) {
                let pu = power_to_pu(x, &unit, s_base)
                    .ok_or_else(|| Error::Config(format!("field `{path}`: unsupported unit `{unit}`")))?;
                *v = Value::from(pu);
            }
        }
        Value::Array(items) => {
            for (k, item) in items.iter_mut().enumerate() {
                normalize_value(item, s_base, &format!("{path}[{k}]"))?;
            }
        }
        Value::Object(map) => {
            for (key, item) in map.iter_mut() {
                normalize_value(item, s_base, &format!("{path}.{key}"))?;
            }
        }
        _ => {}
    }
    Ok(())
}

/// `"1.2 MVA"` -> `(1.2, "MVA")`. Strings that do not start with a number
/// are not quantities.
fn parse_quantity(text: &str) -> Option<(f64, String)> {
    let t = text.trim();
    let split = t
        .char_indices()
        .find(|&(i, c)| {
            !(c.is_ascii_digit() || c == '.' || c == '+' || c == '-' || ((c == 'e' || c == 'E') && i > 0 && {
                // exponent only when followed by a digit or sign
                let rest = &t[i + 1..];
                rest.starts_with(|d: char| d.is_ascii_digit() || d == '-' || d == '+')
            }))
        })
        .map_or(t.len(), |(i, _)| i);
    if split == 0 {
        return None;
    }
    let x: f64 = t[..split].parse().ok()?;
    Some((x, t[split..].trim().to_string()))
}

fn prefix_scale(unit: &str) -> (f64, &str) {
    if let Some(rest) = unit.strip_prefix('k') {
        (1e3, rest)
    } else if let Some(rest) = unit.strip_prefix('M') {
        (1e6, rest)
    } else {
        (1.0, unit)
    }
}

fn power_to_pu(x: f64, unit: &str, s_base: f64) -> Option<f64> {
    match unit {
        "" | "pu" | "p.u." => return Some(x),
        _ => {}
    }
    let (scale, rest) = prefix_scale(unit);
    match rest.to_ascii_lowercase().as_str() {
        "w" | "va" | "var" => Some(x * scale / s_base),
        _ => None,
    }
}

fn si_value(x: f64, unit: &str, expect: &str) -> Option<f64> {
    if unit.is_empty() {
        return Some(x);
    }
    let (scale, rest) = prefix_scale(unit);
    rest.eq_ignore_ascii_case(expect).then_some(x * scale)
}
