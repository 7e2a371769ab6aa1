//! Static operating points of the islanded microgrid.
//!
//! The solver works on the extended network, where every inverter terminal
//! is its own node behind the coupling impedance. The first inverter's
//! terminal is the angle reference.
//!
//! * `Droop`: frequency, every node voltage and angle, and every inverter's
//!   (p, q) are unknown; droop laws close the system. Inverters with an
//!   enabled power regulator that would exceed their capacity get an extra
//!   unknown `u` (the regulator output) and the constraint `p² + q² = S²`.
//! * `Constrained`: inverter outputs are fixed on their capacity circles at
//!   angles `α`; frequency is closed by aggregate active-power balance.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::grid::{eval_zip_load, injections, NetworkModel, ZipLoadParams};
use crate::system::{inf_norm, Microgrid, Operating, OperatingPoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EquilibriumMode {
    Droop,
    Constrained,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Step for the finite-difference ZIP derivatives.
    pub fd_step: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 50,
            fd_step: 1e-7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EquilibriumProblem {
    pub grid: Microgrid,
    /// Load per network bus (index aligned with `grid.network.buses`).
    pub loads: Vec<Option<ZipLoadParams>>,
    pub mode: EquilibriumMode,
    /// Apparent-power capacity per inverter.
    pub capacity: Vec<f64>,
    /// Circle angle per inverter (constrained mode).
    pub generation_angles: Vec<f64>,
    /// Inverters whose power regulator is active (droop mode).
    pub power_regulated: Vec<bool>,
    /// Constant supplementary offsets `(dw, dv)` per inverter.
    pub supplementary: Vec<(f64, f64)>,
    pub options: SolverOptions,
    pub warm_start: Option<EquilibriumSolution>,
}

impl EquilibriumProblem {
    /// Plain droop problem with the network's own loads.
    pub fn droop(grid: &Microgrid) -> Self {
        let n = grid.n_inv();
        Self {
            loads: grid.base_loads(),
            mode: EquilibriumMode::Droop,
            capacity: grid.inverters.iter().map(|u| u.power_reg.s_ref).collect(),
            generation_angles: vec![0.0; n],
            power_regulated: vec![false; n],
            supplementary: vec![(0.0, 0.0); n],
            options: SolverOptions::default(),
            warm_start: None,
            grid: grid.clone(),
        }
    }

    /// Droop problem matching a dynamic operating mode: effective loads,
    /// current capacities, and enabled power regulators.
    pub fn from_operating(grid: &Microgrid, ops: &Operating) -> Self {
        let mut p = Self::droop(grid);
        p.loads = ops.effective_loads();
        p.capacity = ops.modes.iter().map(|m| m.s_ref).collect();
        p.power_regulated = ops.modes.iter().map(|m| m.power_reg_since.is_some() && !m.tripped).collect();
        p
    }

    pub fn constrained(mut self, capacity: Vec<f64>, angles: Vec<f64>) -> Self {
        self.mode = EquilibriumMode::Constrained;
        self.capacity = capacity;
        self.generation_angles = angles;
        self
    }

    /// Base loads scaled uniformly by `factor`.
    pub fn with_load_scale(mut self, factor: f64) -> Self {
        self.loads = self.loads.iter().map(|l| l.map(|z| z.scaled(factor))).collect();
        self
    }

    fn check(&self) -> Result<()> {
        let n = self.grid.n_inv();
        if self.loads.len() != self.grid.network.n_bus() {
            return Err(Error::Config("one load entry per bus required".into()));
        }
        if self.capacity.len() != n
            || self.generation_angles.len() != n
            || self.power_regulated.len() != n
            || self.supplementary.len() != n
        {
            return Err(Error::Config("per-inverter vectors must match the inverter count".into()));
        }
        if self.mode == EquilibriumMode::Constrained && self.capacity.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("capacities must be positive in constrained mode".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumSolution {
    pub f: f64,
    /// Voltage magnitude per extended node (network buses, then terminals).
    pub v: Vec<f64>,
    pub theta: Vec<f64>,
    pub p_inv: Vec<f64>,
    pub q_inv: Vec<f64>,
    /// Power-regulator output per inverter (zero unless binding).
    pub u: Vec<f64>,
    pub binding: Vec<bool>,
    pub p_load: Vec<f64>,
    pub q_load: Vec<f64>,
    pub n_bus: usize,
    pub residual_norm: f64,
    pub iterations: usize,
    pub supplementary: Vec<(f64, f64)>,
}

impl EquilibriumSolution {
    pub fn bus_voltage(&self, b: usize) -> Complex64 {
        Complex64::from_polar(self.v[b], self.theta[b])
    }

    pub fn terminal_voltage(&self, k: usize) -> Complex64 {
        let i = self.n_bus + k;
        Complex64::from_polar(self.v[i], self.theta[i])
    }

    pub fn s_inv(&self, k: usize) -> f64 {
        self.p_inv[k].hypot(self.q_inv[k])
    }

    pub fn operating_point(&self) -> OperatingPoint {
        let n_inv = self.p_inv.len();
        OperatingPoint {
            v_bus: (0..self.n_bus).map(|b| self.bus_voltage(b)).collect(),
            v_term: (0..n_inv).map(|k| self.terminal_voltage(k)).collect(),
            f: self.f,
            p: self.p_inv.clone(),
            q: self.q_inv.clone(),
            u: self.u.clone(),
            held: self.supplementary.clone(),
        }
    }
}

/// Unknown-vector layout.
struct Layout {
    n_ext: usize,
    n_bus: usize,
    n_inv: usize,
    r: usize,
    droop: bool,
    bound: Vec<usize>,
}

impl Layout {
    fn n_theta(&self) -> usize {
        self.n_ext - 1
    }
    fn theta_col(&self, node: usize) -> Option<usize> {
        match node.cmp(&self.r) {
            std::cmp::Ordering::Less => Some(node),
            std::cmp::Ordering::Equal => None,
            std::cmp::Ordering::Greater => Some(node - 1),
        }
    }
    fn v_col(&self, node: usize) -> usize {
        self.n_theta() + node
    }
    fn f_col(&self) -> usize {
        self.n_theta() + self.n_ext
    }
    fn p_col(&self, k: usize) -> usize {
        self.f_col() + 1 + k
    }
    fn q_col(&self, k: usize) -> usize {
        self.f_col() + 1 + self.n_inv + k
    }
    fn u_col(&self, j: usize) -> usize {
        self.f_col() + 1 + 2 * self.n_inv + j
    }
    fn len(&self) -> usize {
        let base = self.n_theta() + self.n_ext + 1;
        if self.droop {
            base + 2 * self.n_inv + self.bound.len()
        } else {
            base
        }
    }
}

struct Unpacked {
    theta: Vec<f64>,
    v: Vec<f64>,
    f: f64,
    p: Vec<f64>,
    q: Vec<f64>,
    u: Vec<f64>,
}

struct Solver<'a> {
    prob: &'a EquilibriumProblem,
    ext: NetworkModel,
    lay: Layout,
}

impl<'a> Solver<'a> {
    fn new(prob: &'a EquilibriumProblem, bound: Vec<usize>) -> Result<Self> {
        prob.check()?;
        let ext = prob.grid.extended_network()?;
        let n_bus = prob.grid.network.n_bus();
        let n_inv = prob.grid.n_inv();
        let lay = Layout {
            n_ext: ext.n_bus(),
            n_bus,
            n_inv,
            r: n_bus,
            droop: prob.mode == EquilibriumMode::Droop,
            bound,
        };
        Ok(Self { prob, ext, lay })
    }

    fn unpack(&self, z: &[f64]) -> Unpacked {
        let l = &self.lay;
        let theta = (0..l.n_ext).map(|i| l.theta_col(i).map_or(0.0, |c| z[c])).collect();
        let v = (0..l.n_ext).map(|i| z[l.v_col(i)]).collect();
        let f = z[l.f_col()];
        let (p, q, u) = if l.droop {
            let mut u = vec![0.0; l.n_inv];
            for (j, &k) in l.bound.iter().enumerate() {
                u[k] = z[l.u_col(j)];
            }
            (
                (0..l.n_inv).map(|k| z[l.p_col(k)]).collect(),
                (0..l.n_inv).map(|k| z[l.q_col(k)]).collect(),
                u,
            )
        } else {
            let (p, q) = self.circle_injections();
            (p, q, vec![0.0; l.n_inv])
        };
        Unpacked { theta, v, f, p, q, u }
    }

    fn circle_injections(&self) -> (Vec<f64>, Vec<f64>) {
        let pr = self.prob;
        (
            pr.capacity.iter().zip(&pr.generation_angles).map(|(s, a)| s * a.cos()).collect(),
            pr.capacity.iter().zip(&pr.generation_angles).map(|(s, a)| s * a.sin()).collect(),
        )
    }

    fn load_at(&self, b: usize, v: f64, f: f64) -> (f64, f64) {
        self.prob.loads[b].as_ref().map_or((0.0, 0.0), |l| eval_zip_load(l, v, f))
    }

    fn residual(&self, z: &[f64]) -> Vec<f64> {
        let l = &self.lay;
        let s = self.unpack(z);
        let (pc, qc) = injections(&self.ext.y_matrix, &s.v, &s.theta);
        let mut r = Vec::with_capacity(l.len());
        let mut rq = Vec::with_capacity(l.n_ext);
        for i in 0..l.n_ext {
            let (ps, qs) = if i < l.n_bus {
                let (pl, ql) = self.load_at(i, s.v[i], s.f);
                (-pl, -ql)
            } else {
                (s.p[i - l.n_bus], s.q[i - l.n_bus])
            };
            r.push(pc[i] - ps);
            rq.push(qc[i] - qs);
        }
        r.extend(rq);
        if l.droop {
            for (k, unit) in self.prob.grid.inverters.iter().enumerate() {
                let pr = &unit.params;
                let (dw, _) = self.prob.supplementary[k];
                r.push(s.f - (pr.w0 + pr.k_df * (pr.p0 - s.p[k]) + unit.power_reg.k_w * s.u[k] + dw));
            }
            for (k, unit) in self.prob.grid.inverters.iter().enumerate() {
                let pr = &unit.params;
                let (_, dv) = self.prob.supplementary[k];
                let vt = s.v[l.n_bus + k];
                r.push(vt - (pr.v0 + pr.k_dv * (pr.q0 - s.q[k]) + unit.power_reg.k_v * s.u[k] + dv));
            }
            for &k in &l.bound {
                let cap = self.prob.capacity[k];
                r.push(s.p[k] * s.p[k] + s.q[k] * s.q[k] - cap * cap);
            }
        }
        r
    }

    fn jacobian(&self, z: &[f64]) -> DMatrix<f64> {
        let l = &self.lay;
        let s = self.unpack(z);
        let n = l.n_ext;
        let y = &self.ext.y_matrix;
        let (pc, qc) = injections(y, &s.v, &s.theta);
        let mut jac = DMatrix::zeros(l.len(), l.len());
        for i in 0..n {
            for j in 0..n {
                let yij = y[(i, j)];
                let (g, b) = (yij.re, yij.im);
                if i == j {
                    if let Some(c) = l.theta_col(i) {
                        jac[(i, c)] = -qc[i] - b * s.v[i] * s.v[i];
                        jac[(n + i, c)] = pc[i] - g * s.v[i] * s.v[i];
                    }
                    jac[(i, l.v_col(i))] = pc[i] / s.v[i] + g * s.v[i];
                    jac[(n + i, l.v_col(i))] = qc[i] / s.v[i] - b * s.v[i];
                } else {
                    if g == 0.0 && b == 0.0 {
                        continue;
                    }
                    let (sn, cs) = (s.theta[i] - s.theta[j]).sin_cos();
                    if let Some(c) = l.theta_col(j) {
                        jac[(i, c)] = s.v[i] * s.v[j] * (g * sn - b * cs);
                        jac[(n + i, c)] = -s.v[i] * s.v[j] * (g * cs + b * sn);
                    }
                    jac[(i, l.v_col(j))] = s.v[i] * (g * cs + b * sn);
                    jac[(n + i, l.v_col(j))] = s.v[i] * (g * sn - b * cs);
                }
            }
        }
        // ZIP terms by central differences in (V, f)
        let h = self.prob.options.fd_step;
        for i in 0..l.n_bus {
            if self.prob.loads[i].is_none() {
                continue;
            }
            let (pp, qp) = self.load_at(i, s.v[i] + h, s.f);
            let (pm, qm) = self.load_at(i, s.v[i] - h, s.f);
            jac[(i, l.v_col(i))] += (pp - pm) / (2.0 * h);
            jac[(n + i, l.v_col(i))] += (qp - qm) / (2.0 * h);
            let (pp, qp) = self.load_at(i, s.v[i], s.f + h);
            let (pm, qm) = self.load_at(i, s.v[i], s.f - h);
            jac[(i, l.f_col())] += (pp - pm) / (2.0 * h);
            jac[(n + i, l.f_col())] += (qp - qm) / (2.0 * h);
        }
        if l.droop {
            let rw = 2 * n;
            let rv = 2 * n + l.n_inv;
            for (k, unit) in self.prob.grid.inverters.iter().enumerate() {
                let t = l.n_bus + k;
                jac[(t, l.p_col(k))] = -1.0;
                jac[(n + t, l.q_col(k))] = -1.0;
                jac[(rw + k, l.f_col())] = 1.0;
                jac[(rw + k, l.p_col(k))] = unit.params.k_df;
                jac[(rv + k, l.v_col(t))] = 1.0;
                jac[(rv + k, l.q_col(k))] = unit.params.k_dv;
            }
            for (j, &k) in l.bound.iter().enumerate() {
                let unit = &self.prob.grid.inverters[k];
                jac[(rw + k, l.u_col(j))] = -unit.power_reg.k_w;
                jac[(rv + k, l.u_col(j))] = -unit.power_reg.k_v;
                let row = 2 * n + 2 * l.n_inv + j;
                jac[(row, l.p_col(k))] = 2.0 * s.p[k];
                jac[(row, l.q_col(k))] = 2.0 * s.q[k];
            }
        }
        jac
    }

    fn initial(&self) -> Vec<f64> {
        let l = &self.lay;
        let mut z = vec![0.0; l.len()];
        for i in 0..l.n_ext {
            z[l.v_col(i)] = 1.0;
        }
        z[l.f_col()] = 1.0;
        if l.droop {
            for (k, unit) in self.prob.grid.inverters.iter().enumerate() {
                z[l.p_col(k)] = unit.params.p0;
                z[l.q_col(k)] = unit.params.q0;
            }
        }
        if let Some(ws) = &self.prob.warm_start {
            if ws.v.len() == l.n_ext {
                for i in 0..l.n_ext {
                    z[l.v_col(i)] = ws.v[i];
                    if let Some(c) = l.theta_col(i) {
                        z[c] = ws.theta[i];
                    }
                }
                z[l.f_col()] = ws.f;
                if l.droop && ws.p_inv.len() == l.n_inv {
                    for k in 0..l.n_inv {
                        z[l.p_col(k)] = ws.p_inv[k];
                        z[l.q_col(k)] = ws.q_inv[k];
                    }
                    for (j, &k) in l.bound.iter().enumerate() {
                        z[l.u_col(j)] = ws.u[k];
                    }
                }
            }
        }
        z
    }

    fn solution(&self, z: &[f64], residual_norm: f64, iterations: usize) -> EquilibriumSolution {
        let l = &self.lay;
        let s = self.unpack(z);
        let (p_load, q_load): (Vec<f64>, Vec<f64>) = (0..l.n_bus).map(|b| self.load_at(b, s.v[b], s.f)).unzip();
        let mut binding = vec![false; l.n_inv];
        if l.droop {
            for &k in &l.bound {
                binding[k] = true;
            }
        }
        EquilibriumSolution {
            f: s.f,
            v: s.v,
            theta: s.theta,
            p_inv: s.p,
            q_inv: s.q,
            u: s.u,
            binding,
            p_load,
            q_load,
            n_bus: l.n_bus,
            residual_norm,
            iterations,
            supplementary: self.prob.supplementary.clone(),
        }
    }

    fn solve(&self) -> Result<EquilibriumSolution> {
        let opts = self.prob.options;
        let mut z = self.initial();
        let mut r = self.residual(&z);
        let mut norm = inf_norm(&r);
        let constrained = !self.lay.droop;
        for it in 0..=opts.max_iter {
            if norm <= opts.tol {
                return Ok(self.solution(&z, norm, it));
            }
            if it == opts.max_iter {
                break;
            }
            let dz = match solve_linear(&self.jacobian(&z), &r) {
                Err(Error::SingularJacobian(m)) if constrained => {
                    return Err(Error::InfeasiblePoint(format!("no V-f sensitivity absorbs the mismatch ({m})")))
                }
                other => other?,
            };
            let mut step = 1.0;
            let mut accepted = false;
            for _ in 0..30 {
                let trial: Vec<f64> = z.iter().zip(dz.iter()).map(|(a, d)| a - step * d).collect();
                let v_ok = (0..self.lay.n_ext).all(|i| trial[self.lay.v_col(i)] > 0.05);
                if v_ok {
                    let rt = self.residual(&trial);
                    let nt = inf_norm(&rt);
                    if nt.is_finite() && nt < norm {
                        z = trial;
                        r = rt;
                        norm = nt;
                        accepted = true;
                        break;
                    }
                }
                step *= 0.5;
            }
            if !accepted {
                if constrained {
                    return Err(Error::InfeasiblePoint(format!(
                        "newton stalled at residual {norm:.3e}; no balance on this circle point"
                    )));
                }
                return Err(Error::NonConvergence {
                    iterations: it,
                    residual: norm,
                    best: Some(Box::new(self.solution(&z, norm, it))),
                });
            }
        }
        if constrained {
            return Err(Error::InfeasiblePoint(format!(
                "no convergence within {} iterations (residual {norm:.3e})",
                opts.max_iter
            )));
        }
        Err(Error::NonConvergence {
            iterations: opts.max_iter,
            residual: norm,
            best: Some(Box::new(self.solution(&z, norm, opts.max_iter))),
        })
    }
}

/// Solve `J·d = r`, refusing numerically singular systems.
pub(crate) fn solve_linear(jac: &DMatrix<f64>, r: &[f64]) -> Result<DVector<f64>> {
    let lu = jac.clone().lu();
    let u = lu.u();
    let diag: Vec<f64> = u.diagonal().iter().map(|d| d.abs()).collect();
    let max = diag.iter().cloned().fold(0.0, f64::max);
    let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(max > 0.0) || min <= 1e-14 * max {
        return Err(Error::SingularJacobian(format!(
            "pivot ratio {:.2e}; check that every inverter has a nonzero droop gain",
            if max > 0.0 { min / max } else { 0.0 }
        )));
    }
    lu.solve(&DVector::from_column_slice(r))
        .ok_or_else(|| Error::SingularJacobian("LU solve failed".into()))
}

pub fn solve_droop_equilibrium(problem: &EquilibriumProblem) -> Result<EquilibriumSolution> {
    if problem.mode != EquilibriumMode::Droop {
        return Err(Error::Config("droop solve needs a droop-mode problem".into()));
    }
    let any_reg = problem.power_regulated.iter().any(|&b| b);
    if !any_reg {
        return Solver::new(problem, vec![])?.solve();
    }
    // active set over inverters whose regulator binds
    let mut bound: Vec<usize> = problem
        .warm_start
        .as_ref()
        .map(|w| (0..w.binding.len()).filter(|&k| w.binding[k] && problem.power_regulated[k]).collect())
        .unwrap_or_default();
    let n = problem.grid.n_inv();
    let mut staged = problem.clone();
    for _ in 0..(2 * n + 2) {
        let sol = Solver::new(&staged, bound.clone())?.solve()?;
        let mut next: Vec<usize> = (0..n)
            .filter(|&k| {
                if !problem.power_regulated[k] {
                    return false;
                }
                if bound.contains(&k) {
                    sol.u[k] <= 0.0
                } else {
                    sol.s_inv(k) > problem.capacity[k] * (1.0 + 1e-12)
                }
            })
            .collect();
        next.sort_unstable();
        if next == bound {
            return Ok(sol);
        }
        bound = next;
        staged.warm_start = Some(sol);
    }
    Err(Error::NonConvergence {
        iterations: 2 * n + 2,
        residual: f64::NAN,
        best: None,
    })
}

/// Inverter outputs pinned on their capacity circles after a uniform
/// base-load step `(dp, dq)` at every loaded bus.
pub fn solve_constrained_transition(
    problem: &EquilibriumProblem,
    disturbance: (f64, f64),
) -> Result<EquilibriumSolution> {
    if problem.mode != EquilibriumMode::Constrained {
        return Err(Error::Config("constrained solve needs a constrained-mode problem".into()));
    }
    let mut stepped = problem.clone();
    for l in stepped.loads.iter_mut().flatten() {
        l.p0 += disturbance.0;
        l.q0 += disturbance.1;
    }
    Solver::new(&stepped, vec![])?.solve()
}

/// The security rectangle spans only a few hundredths of a radian of the
/// capacity circle, so the default window is centred on the load's power
/// factor rather than covering the whole quarter circle.
pub const DEFAULT_ALPHA_WINDOW: (f64, f64) = (-0.1, 0.1);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOptions {
    pub n_angles: usize,
    /// Offset window added to the power-factor-matched circle angle (rad).
    pub alpha_range: (f64, f64),
    pub df_max: f64,
    pub dv_max: f64,
    /// Network bus indices whose voltage deviation is checked; defaults to
    /// the inverter buses.
    pub monitored: Option<Vec<usize>>,
    /// Independent angle per inverter (only for one or two inverters).
    pub full_grid: bool,
    #[serde(skip)]
    pub exec: Execution,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            n_angles: 101,
            alpha_range: DEFAULT_ALPHA_WINDOW,
            df_max: 0.01,
            dv_max: 0.05,
            monitored: None,
            full_grid: false,
            exec: Execution::Sequential,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilitySample {
    pub alpha: Vec<f64>,
    /// `f - f0` (p.u.).
    pub delta_f: f64,
    /// `V - v0` per monitored bus (p.u.).
    pub delta_v: Vec<f64>,
    pub feasible: bool,
    pub solved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityMap {
    pub load_factor: f64,
    pub samples: Vec<FeasibilitySample>,
    pub security_box: (f64, f64),
    /// Droop alone serves the load within capacity; the single sample is
    /// the droop operating point.
    pub adequate: bool,
    pub monitored: Vec<usize>,
}

impl FeasibilityMap {
    pub fn feasible_count(&self) -> usize {
        self.samples.iter().filter(|s| s.feasible).count()
    }

    pub fn feasible_fraction(&self) -> f64 {
        if self.samples.is_empty() {
            0.0
        } else {
            self.feasible_count() as f64 / self.samples.len() as f64
        }
    }
}

/// Factor that makes the total base load magnitude equal `load_factor`
/// times the total capacity.
pub fn load_scale_for(problem: &EquilibriumProblem, load_factor: f64) -> Result<f64> {
    let (p, q) = problem
        .loads
        .iter()
        .flatten()
        .fold((0.0, 0.0), |(p, q), l| (p + l.p0, q + l.q0));
    let s = p.hypot(q);
    let cap: f64 = problem.capacity.iter().sum();
    if !(s > 0.0) || !(cap > 0.0) {
        return Err(Error::Config("feasibility sweep needs nonzero load and capacity".into()));
    }
    Ok(load_factor * cap / s)
}

fn angle_samples(problem: &EquilibriumProblem, opts: &SweepOptions) -> Vec<Vec<f64>> {
    let n = problem.grid.n_inv();
    let (p, q) = problem
        .loads
        .iter()
        .flatten()
        .fold((0.0, 0.0), |(p, q), l| (p + l.p0, q + l.q0));
    let matched = q.atan2(p);
    if opts.n_angles <= 1 {
        return vec![vec![matched; n]];
    }
    let (a0, a1) = opts.alpha_range;
    let grid: Vec<f64> = (0..opts.n_angles)
        .map(|i| matched + a0 + (a1 - a0) * i as f64 / (opts.n_angles - 1) as f64)
        .collect();
    if opts.full_grid && n <= 2 {
        if n == 1 {
            return grid.iter().map(|&a| vec![a]).collect();
        }
        return grid.iter().flat_map(|&a| grid.iter().map(move |&b| vec![a, b])).collect();
    }
    grid.iter().map(|&a| vec![a; n]).collect()
}

fn classify(sol: &EquilibriumSolution, problem: &EquilibriumProblem, monitored: &[usize], opts: &SweepOptions) -> (f64, Vec<f64>, bool) {
    let df = sol.f - 1.0;
    let v0 = problem.grid.inverters[0].params.v0;
    let dv: Vec<f64> = monitored.iter().map(|&b| sol.v[b] - v0).collect();
    let ok = df.abs() <= opts.df_max && dv.iter().all(|d| d.abs() <= opts.dv_max);
    (df, dv, ok)
}

fn map_at(problem: &EquilibriumProblem, load_factor: f64, opts: &SweepOptions) -> Result<FeasibilityMap> {
    let monitored = opts
        .monitored
        .clone()
        .unwrap_or_else(|| (0..problem.grid.n_inv()).map(|k| problem.grid.inverter_bus(k)).collect());
    let scale = load_scale_for(problem, load_factor)?;
    let scaled = EquilibriumProblem {
        mode: EquilibriumMode::Droop,
        power_regulated: vec![false; problem.grid.n_inv()],
        warm_start: None,
        ..problem.clone()
    }
    .with_load_scale(scale);

    if let Ok(sol) = solve_droop_equilibrium(&scaled) {
        let within = (0..sol.p_inv.len()).all(|k| sol.s_inv(k) <= scaled.capacity[k]);
        if within {
            let (delta_f, delta_v, feasible) = classify(&sol, &scaled, &monitored, opts);
            let alpha = (0..sol.p_inv.len()).map(|k| sol.q_inv[k].atan2(sol.p_inv[k])).collect();
            return Ok(FeasibilityMap {
                load_factor,
                samples: vec![FeasibilitySample {
                    alpha,
                    delta_f,
                    delta_v,
                    feasible,
                    solved: true,
                }],
                security_box: (opts.df_max, opts.dv_max),
                adequate: true,
                monitored,
            });
        }
    }

    let angles = angle_samples(&scaled, opts);
    let results = opts.exec.map(angles, |alpha| {
        let p = scaled.clone().constrained(scaled.capacity.clone(), alpha.clone());
        match solve_constrained_transition(&p, (0.0, 0.0)) {
            Ok(sol) => {
                let (delta_f, delta_v, feasible) = classify(&sol, &p, &monitored, opts);
                Ok(FeasibilitySample {
                    alpha,
                    delta_f,
                    delta_v,
                    feasible,
                    solved: true,
                })
            }
            Err(Error::InfeasiblePoint(_)) | Err(Error::NonConvergence { .. }) | Err(Error::SingularJacobian(_)) => {
                Ok(FeasibilitySample {
                    alpha,
                    delta_f: f64::NAN,
                    delta_v: vec![f64::NAN; monitored.len()],
                    feasible: false,
                    solved: false,
                })
            }
            Err(e) => Err(e),
        }
    });
    let samples = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(FeasibilityMap {
        load_factor,
        samples,
        security_box: (opts.df_max, opts.dv_max),
        adequate: false,
        monitored,
    })
}

/// Feasibility maps over load factors.
///
/// When droop alone keeps every inverter within capacity the map holds the
/// single droop point. Otherwise every inverter is pinned on its capacity
/// circle and the circle angle is swept.
pub fn sweep_feasibility(
    problem: &EquilibriumProblem,
    load_factors: &[f64],
    opts: &SweepOptions,
) -> Result<Vec<FeasibilityMap>> {
    if opts.n_angles == 0 {
        return Err(Error::Config("n_angles must be at least one".into()));
    }
    load_factors.iter().map(|&lf| map_at(problem, lf, opts)).collect()
}

fn feasible_after_shed(problem: &EquilibriumProblem, load_factor: f64, permille: u32, opts: &SweepOptions) -> Result<bool> {
    let lf = load_factor * (1.0 - permille as f64 / 1000.0);
    Ok(map_at(problem, lf, opts)?.feasible_count() > 0)
}

/// Smallest uniform shed fraction (0.1 % resolution) after which some
/// sampled operating point is inside the security rectangle.
pub fn min_shed_search(problem: &EquilibriumProblem, load_factor: f64, opts: &SweepOptions) -> Result<f64> {
    if feasible_after_shed(problem, load_factor, 0, opts)? {
        return Ok(0.0);
    }
    // coarse bracket in 1 % steps, then bisect on the 0.1 % grid
    let mut lo = 0u32;
    let mut hi = None;
    for k in (10..=1000).step_by(10) {
        if feasible_after_shed(problem, load_factor, k, opts)? {
            hi = Some(k);
            break;
        }
        lo = k;
    }
    let mut hi = hi.ok_or_else(|| {
        Error::Config(format!(
            "no feasible point at load factor {load_factor} even after shedding all load"
        ))
    })?;
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if feasible_after_shed(problem, load_factor, mid, opts)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi as f64 / 1000.0)
}
