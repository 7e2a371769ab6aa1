//! File artifacts: trace, feasibility-map and spectrum tables, and tidy
//! `(series, x, y)` plot data for external plotters.
//!
//! Every artifact of a run lands in `<out>/<scenario>/<engine>/`. Numbers
//! are written with Rust's shortest round-trip formatting, so reading a
//! CSV back reproduces the in-memory values exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::equilibrium::{EquilibriumSolution, FeasibilityMap};
use crate::error::{Error, Result};
use crate::smallsignal::{EigenSweepResult, SweepCondition};
use crate::system::Microgrid;
use crate::tds::{EventKind, LogEntry, SimStatus, SimTrace};

pub const LAYOUTS: &[&str] = &["fig6-style", "fig7-style", "fig9-style"];

/// Points per drawn capacity circle.
const CIRCLE_POINTS: usize = 73;

pub fn artifact_dir(out: &Path, scenario: &str, engine: &str) -> PathBuf {
    out.join(scenario).join(engine)
}

fn num(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else {
        format!("{x}")
    }
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, text)?;
    Ok(path)
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf> {
    write_text(dir, name, &(serde_json::to_string_pretty(value)? + "\n"))
}

/// Trace as CSV: header row of column names, one row per output sample.
pub fn trace_csv(trace: &SimTrace) -> String {
    let mut s = trace.columns.join(",");
    s.push('\n');
    for r in &trace.rows {
        let cells: Vec<String> = r.iter().map(|&x| num(x)).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

#[derive(Serialize)]
struct EventsSidecar<'a> {
    #[serde(flatten)]
    status: &'a SimStatus,
    /// False when the run stopped early; the trace then ends at the failure.
    complete: bool,
    events: &'a [crate::tds::TraceEvent],
}

/// `trace.csv` plus the `events.json` sidecar (run status and event log).
pub fn write_trace(dir: &Path, trace: &SimTrace, status: &SimStatus) -> Result<Vec<PathBuf>> {
    let sidecar = EventsSidecar {
        status,
        complete: *status == SimStatus::Completed,
        events: &trace.events,
    };
    Ok(vec![
        write_text(dir, "trace.csv", &trace_csv(trace))?,
        write_json(dir, "events.json", &sidecar)?,
    ])
}

/// Bus and inverter tables of one equilibrium, plus `summary.json`.
pub fn write_equilibrium(dir: &Path, grid: &Microgrid, eq: &EquilibriumSolution) -> Result<Vec<PathBuf>> {
    let mut buses = String::from("bus,v,theta,p_load,q_load\n");
    for (b, bus) in grid.network.buses.iter().enumerate() {
        let _ = writeln!(
            buses,
            "{},{},{},{},{}",
            bus.id,
            num(eq.v[b]),
            num(eq.theta[b]),
            num(eq.p_load.get(b).copied().unwrap_or(0.0)),
            num(eq.q_load.get(b).copied().unwrap_or(0.0))
        );
    }
    let mut invs = String::from("inverter,bus,p,q,s,v_term,theta_term,u,binding\n");
    for (k, u) in grid.inverters.iter().enumerate() {
        let vt = eq.terminal_voltage(k);
        let _ = writeln!(
            invs,
            "{},{},{},{},{},{},{},{},{}",
            u.id,
            u.bus,
            num(eq.p_inv[k]),
            num(eq.q_inv[k]),
            num(eq.s_inv(k)),
            num(vt.norm()),
            num(vt.arg()),
            num(eq.u[k]),
            eq.binding[k] as u8
        );
    }
    let summary = serde_json::json!({
        "f": eq.f,
        "delta_f": eq.f - 1.0,
        "iterations": eq.iterations,
        "residual_norm": eq.residual_norm,
    });
    Ok(vec![
        write_text(dir, "buses.csv", &buses)?,
        write_text(dir, "inverters.csv", &invs)?,
        write_json(dir, "summary.json", &summary)?,
    ])
}

pub fn map_file_name(load_factor: f64) -> String {
    format!("map_lf{load_factor}.csv")
}

/// One feasibility map as CSV.
///
/// Columns: `load_factor`, `alpha_inv<id>` per inverter (absolute circle
/// angle, rad; empty for the droop-adequate point), `delta_f`,
/// `delta_v_bus<id>` per monitored bus, `feasible`, `solved`.
pub fn map_csv(grid: &Microgrid, map: &FeasibilityMap) -> String {
    let mut head = vec!["load_factor".to_string()];
    head.extend(grid.inverters.iter().map(|u| format!("alpha_inv{}", u.id)));
    head.push("delta_f".into());
    head.extend(map.monitored.iter().map(|&b| format!("delta_v_bus{}", grid.network.buses[b].id)));
    head.push("feasible".into());
    head.push("solved".into());
    let mut s = head.join(",");
    s.push('\n');
    for smp in &map.samples {
        let mut row = vec![num(map.load_factor)];
        row.extend((0..grid.n_inv()).map(|k| smp.alpha.get(k).map_or(String::new(), |&a| num(a))));
        row.push(num(smp.delta_f));
        row.extend((0..map.monitored.len()).map(|k| smp.delta_v.get(k).map_or(String::new(), |&d| num(d))));
        row.push((smp.feasible as u8).to_string());
        row.push((smp.solved as u8).to_string());
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MapSummary {
    pub load_factor: f64,
    pub samples: usize,
    pub feasible: usize,
    pub adequate: bool,
    /// Smallest uniform shed fraction restoring a feasible point, if searched.
    pub min_shed: Option<f64>,
}

/// One CSV per map plus `summary.json`.
pub fn write_maps(dir: &Path, grid: &Microgrid, maps: &[FeasibilityMap], min_shed: &[Option<f64>]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    let mut summary = Vec::new();
    for (k, m) in maps.iter().enumerate() {
        files.push(write_text(dir, &map_file_name(m.load_factor), &map_csv(grid, m))?);
        summary.push(MapSummary {
            load_factor: m.load_factor,
            samples: m.samples.len(),
            feasible: m.feasible_count(),
            adequate: m.adequate,
            min_shed: min_shed.get(k).copied().flatten(),
        });
    }
    files.push(write_json(dir, "summary.json", &summary)?);
    Ok(files)
}

fn condition_index(c: SweepCondition) -> u8 {
    match c {
        SweepCondition::DroopOnly => 1,
        SweepCondition::DroopWithRegulators => 2,
        SweepCondition::PowerRegulatorGain => 3,
    }
}

/// Columns: `condition`, `parameter`, `multiplier`, `value`, `mode`, `re`, `im`.
/// Modes are listed in descending real part per grid point.
pub fn spectrum_csv(sweeps: &[(SweepCondition, EigenSweepResult)]) -> String {
    let mut s = String::from("condition,parameter,multiplier,value,mode,re,im\n");
    for (c, r) in sweeps {
        for ((m, v), spec) in r.multipliers.iter().zip(&r.values).zip(&r.spectra) {
            for (i, l) in spec.iter().enumerate() {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{i},{},{}",
                    condition_index(*c),
                    r.swept_parameter,
                    num(*m),
                    num(*v),
                    num(l.re),
                    num(l.im)
                );
            }
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossingSummary {
    pub condition: u8,
    pub parameter: String,
    pub crossing_gain: Option<f64>,
    pub bracket: Option<(f64, f64)>,
    pub points: usize,
    pub diagnostic: Option<String>,
}

/// `spectrum.csv` plus the crossing summary `crossing.json`.
pub fn write_sweeps(dir: &Path, sweeps: &[(SweepCondition, EigenSweepResult)]) -> Result<Vec<PathBuf>> {
    let summary: Vec<CrossingSummary> = sweeps
        .iter()
        .map(|(c, r)| CrossingSummary {
            condition: condition_index(*c),
            parameter: r.swept_parameter.clone(),
            crossing_gain: r.crossing_gain,
            bracket: r.bracket,
            points: r.spectra.len(),
            diagnostic: r.diagnostic.clone(),
        })
        .collect();
    Ok(vec![
        write_text(dir, "spectrum.csv", &spectrum_csv(sweeps))?,
        write_json(dir, "crossing.json", &summary)?,
    ])
}

/// Engine output a plot layout is built from.
pub enum PlotSource<'a> {
    Trace { grid: &'a Microgrid, trace: &'a SimTrace },
    Maps { grid: &'a Microgrid, maps: &'a [FeasibilityMap] },
    Sweeps(&'a [(SweepCondition, EigenSweepResult)]),
}

impl PlotSource<'_> {
    fn kind(&self) -> &'static str {
        match self {
            PlotSource::Trace { .. } => "trace",
            PlotSource::Maps { .. } => "map",
            PlotSource::Sweeps(_) => "sweep",
        }
    }
}

/// One tidy long-format panel.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PlotPanel {
    pub name: String,
    pub rows: Vec<(String, f64, f64)>,
}

impl PlotPanel {
    fn new(name: &str) -> Self {
        Self {
            name: name.into(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, series: impl Into<String>, x: f64, y: f64) {
        self.rows.push((series.into(), x, y));
    }

    pub fn series(&self, name: &str) -> Vec<(f64, f64)> {
        self.rows.iter().filter(|r| r.0 == name).map(|r| (r.1, r.2)).collect()
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("series,x,y\n");
        for (n, x, y) in &self.rows {
            let _ = writeln!(s, "{n},{},{}", num(*x), num(*y));
        }
        s
    }
}

/// Build the panels of `layout` from `source`.
pub fn plot_data(layout: &str, source: &PlotSource) -> Result<Vec<PlotPanel>> {
    let expected = match layout {
        "fig6-style" => "map",
        "fig7-style" => "sweep",
        "fig9-style" => "trace",
        _ => return Err(Error::UnknownLayout(layout.into())),
    };
    match source {
        PlotSource::Trace { grid, trace } if expected == "trace" => Ok(fig9(grid, trace)),
        PlotSource::Maps { grid, maps } if expected == "map" => Ok(vec![fig6(grid, maps)]),
        PlotSource::Sweeps(sw) if expected == "sweep" => Ok(fig7(sw)),
        other => Err(Error::Config(format!(
            "layout `{layout}` plots {expected} output, got {} output",
            other.kind()
        ))),
    }
}

pub fn write_plot_data(dir: &Path, layout: &str, source: &PlotSource) -> Result<Vec<PathBuf>> {
    let panels = plot_data(layout, source)?;
    let prefix = layout.trim_end_matches("-style");
    panels
        .iter()
        .map(|p| write_text(dir, &format!("{prefix}_{}.csv", p.name), &p.csv()))
        .collect()
}

/// Dynamic output, static output on the capacity circles, and V-f traces.
fn fig9(grid: &Microgrid, trace: &SimTrace) -> Vec<PlotPanel> {
    let mut dynamic = PlotPanel::new("dynamic");
    let mut circle = PlotPanel::new("circle");
    let mut vf = PlotPanel::new("vf");
    if trace.rows.is_empty() {
        return vec![dynamic, circle, vf];
    }
    let t = trace.time();
    for u in &grid.inverters {
        let id = u.id;
        for (q, col) in [("p", "p"), ("q", "q"), ("s", "s")] {
            if let Some(c) = trace.column(&format!("inv{id}_{col}")) {
                for (&ti, &y) in t.iter().zip(&c) {
                    dynamic.push(format!("inv{id}_{q}"), ti, y);
                }
            }
        }
        for q in ["v", "f"] {
            if let Some(c) = trace.column(&format!("inv{id}_{q}")) {
                for (&ti, &y) in t.iter().zip(&c) {
                    vf.push(format!("inv{id}_{q}"), ti, y);
                }
            }
        }
    }

    // static points: settled output just before each scheduled change, and at the end
    let mut marks: Vec<f64> = trace
        .events
        .iter()
        .filter(|e| matches!(e.entry, LogEntry::Applied { .. }))
        .map(|e| e.time)
        .collect();
    marks.push(*t.last().unwrap_or(&0.0) + 1.0);
    marks.dedup();
    for u in &grid.inverters {
        let id = u.id;
        for &m in &marks {
            let (Some(p), Some(q)) = (
                trace.at(&format!("inv{id}_p"), m - 1e-9),
                trace.at(&format!("inv{id}_q"), m - 1e-9),
            ) else {
                continue;
            };
            circle.push(format!("inv{id}_static"), p, q);
        }
        let mut radii = vec![u.power_reg.s_ref];
        for e in &trace.events {
            if let LogEntry::Applied {
                event: EventKind::SetCapacity { inverter, s_ref },
            } = &e.entry
            {
                if *inverter == id && !radii.iter().any(|r| (r - s_ref).abs() < 1e-12) {
                    radii.push(*s_ref);
                }
            }
        }
        for (j, r) in radii.iter().enumerate() {
            for i in 0..CIRCLE_POINTS {
                let a = 2.0 * std::f64::consts::PI * i as f64 / (CIRCLE_POINTS - 1) as f64;
                circle.push(format!("inv{id}_capacity{j}"), r * a.cos(), r * a.sin());
            }
        }
    }
    vec![dynamic, circle, vf]
}

/// `(delta_v, delta_f)` scatter at the first monitored bus with the
/// security rectangle drawn as a closed polygon of its corners.
fn fig6(grid: &Microgrid, maps: &[FeasibilityMap]) -> PlotPanel {
    let mut p = PlotPanel::new("scatter");
    for m in maps {
        for s in m.samples.iter().filter(|s| s.solved) {
            let Some(&dv) = s.delta_v.first() else { continue };
            let tag = if s.feasible { "feasible" } else { "infeasible" };
            p.push(format!("lf{}_{tag}", m.load_factor), dv, s.delta_f);
        }
    }
    if let Some(m) = maps.first() {
        let (df, dv) = m.security_box;
        let bus = m.monitored.first().map_or(0, |&b| grid.network.buses[b].id);
        let name = format!("security_box_bus{bus}");
        for (x, y) in [(-dv, -df), (dv, -df), (dv, df), (-dv, df), (-dv, -df)] {
            p.push(name.clone(), x, y);
        }
    }
    p
}

/// Eigenvalue loci and the dominant real part against the swept gain.
fn fig7(sweeps: &[(SweepCondition, EigenSweepResult)]) -> Vec<PlotPanel> {
    let mut loci = PlotPanel::new("loci");
    let mut dominant = PlotPanel::new("max_real");
    for (c, r) in sweeps {
        let k = condition_index(*c);
        for spec in &r.spectra {
            for l in spec {
                loci.push(format!("cond{k}"), l.re, l.im);
            }
        }
        for (v, m) in r.values.iter().zip(&r.max_real) {
            dominant.push(format!("cond{k}"), *v, *m);
        }
    }
    vec![loci, dominant]
}
