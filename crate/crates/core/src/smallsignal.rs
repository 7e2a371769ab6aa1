//! Linearization of semi-explicit DAEs `ẋ = f(x, y)`, `0 = g(x, y)`,
//! algebraic elimination `A = f_x − f_y g_y⁻¹ g_x`, spectra and gain sweeps.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::equilibrium::{solve_droop_equilibrium, EquilibriumProblem, EquilibriumSolution};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::regulators::TriggerAction;
use crate::system::{
    inf_norm, state_from_operating_point, Fidelity, InverterPin, Microgrid, MicrogridDae, Operating,
};

pub trait Dae {
    fn n_states(&self) -> usize;
    fn n_algebraic(&self) -> usize;
    fn f(&self, x: &[f64], y: &[f64]) -> Vec<f64>;
    fn g(&self, x: &[f64], y: &[f64]) -> Vec<f64>;

    fn state_labels(&self) -> Vec<String> {
        (0..self.n_states()).map(|i| format!("x{i}")).collect()
    }

    fn algebraic_labels(&self) -> Vec<String> {
        (0..self.n_algebraic()).map(|i| format!("y{i}")).collect()
    }

    /// Piecewise elements whose branch is undecided at this point.
    fn breakpoints(&self, _x: &[f64], _y: &[f64]) -> Vec<String> {
        Vec::new()
    }

    /// States whose derivative is identically zero on the selected branch.
    fn frozen(&self, _x: &[f64], _y: &[f64]) -> Vec<bool> {
        vec![false; self.n_states()]
    }
}

impl Dae for MicrogridDae<'_> {
    fn n_states(&self) -> usize {
        self.n_x()
    }

    fn n_algebraic(&self) -> usize {
        self.n_y()
    }

    fn f(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        match self.evaluate(x, y) {
            Ok(ev) => ev.dx,
            Err(_) => vec![f64::NAN; self.n_x()],
        }
    }

    fn g(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        self.network_residual(x, y)
    }

    fn state_labels(&self) -> Vec<String> {
        MicrogridDae::state_labels(self)
    }

    fn algebraic_labels(&self) -> Vec<String> {
        MicrogridDae::algebraic_labels(self)
    }

    fn breakpoints(&self, x: &[f64], _y: &[f64]) -> Vec<String> {
        const EPS: f64 = 1e-9;
        let bl = self.fidelity.block_len();
        let mut out = Vec::new();
        for (k, unit) in self.grid.inverters.iter().enumerate() {
            let mode = &self.ops.modes[k];
            let pin = &self.pins[k];
            if mode.tripped {
                continue;
            }
            let blk = &x[k * bl..(k + 1) * bl];
            let (p_m, q_m, f_m, v_m) = match self.fidelity {
                Fidelity::Full => {
                    let s = crate::inverter::InverterState::from_slice(blk);
                    (s.p_m, s.q_m, s.f_m, s.terminal_voltage())
                }
                Fidelity::Reduced => (blk[1], blk[2], blk[3], blk[4]),
            };
            if mode.power_reg_since.is_some()
                && pin.power_reg_active.is_none()
                && (p_m.hypot(q_m) - mode.s_ref).abs() <= EPS * mode.s_ref.max(1.0)
            {
                out.push(format!("inverter {} apparent power equals its capacity", unit.id));
            }
            if mode.vf_reg_since.is_some() && pin.action.is_none() {
                let vf = &unit.vf_reg;
                let df = unit.params.w0 - f_m;
                let dv = unit.params.v0 - v_m;
                if pin.f_side.is_none() && (df.abs() - vf.df_max).abs() <= EPS {
                    out.push(format!("inverter {} frequency deviation on the deadband edge", unit.id));
                }
                if pin.v_side.is_none() && (dv.abs() - vf.dv_max).abs() <= EPS {
                    out.push(format!("inverter {} voltage deviation on the deadband edge", unit.id));
                }
            }
        }
        out
    }

    fn frozen(&self, x: &[f64], _y: &[f64]) -> Vec<bool> {
        self.frozen_mask(x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedModel {
    pub f_x: DMatrix<f64>,
    pub f_y: DMatrix<f64>,
    pub g_x: DMatrix<f64>,
    pub g_y: DMatrix<f64>,
    pub state_labels: Vec<String>,
    pub algebraic_labels: Vec<String>,
    pub frozen: Vec<bool>,
}

/// Largest algebraic residual accepted as an equilibrium for linearization.
pub const EQUILIBRIUM_TOL: f64 = 1e-8;
/// State-derivative counterpart. Full-order rows carry factors up to
/// w_base / l_f (about 1e4), so algebraic round-off shows up amplified here.
pub const DERIVATIVE_TOL: f64 = 1e-6;

/// Central-difference Jacobians with per-variable step `h·max(1, |z|)`.
pub fn linearize<D: Dae + ?Sized>(dae: &D, x: &[f64], y: &[f64], h: f64) -> Result<LinearizedModel> {
    let (nx, ny) = (dae.n_states(), dae.n_algebraic());
    if x.len() != nx || y.len() != ny {
        return Err(Error::Config("state vector sizes do not match the model".into()));
    }
    let rf = inf_norm(&dae.f(x, y));
    let rg = inf_norm(&dae.g(x, y));
    if !(rf <= DERIVATIVE_TOL && rg <= EQUILIBRIUM_TOL) {
        return Err(Error::Config(format!(
            "linearization point is not an equilibrium (|f| = {rf:.3e}, |g| = {rg:.3e})"
        )));
    }
    let bp = dae.breakpoints(x, y);
    if !bp.is_empty() {
        return Err(Error::BreakpointAmbiguity(bp.join("; ")));
    }

    let mut f_x = DMatrix::zeros(nx, nx);
    let mut g_x = DMatrix::zeros(ny, nx);
    let mut f_y = DMatrix::zeros(nx, ny);
    let mut g_y = DMatrix::zeros(ny, ny);
    let mut xp = x.to_vec();
    for j in 0..nx {
        let step = h * x[j].abs().max(1.0);
        xp[j] = x[j] + step;
        let (fp, gp) = (dae.f(&xp, y), dae.g(&xp, y));
        xp[j] = x[j] - step;
        let (fm, gm) = (dae.f(&xp, y), dae.g(&xp, y));
        xp[j] = x[j];
        for i in 0..nx {
            f_x[(i, j)] = (fp[i] - fm[i]) / (2.0 * step);
        }
        for i in 0..ny {
            g_x[(i, j)] = (gp[i] - gm[i]) / (2.0 * step);
        }
    }
    let mut yp = y.to_vec();
    for j in 0..ny {
        let step = h * y[j].abs().max(1.0);
        yp[j] = y[j] + step;
        let (fp, gp) = (dae.f(x, &yp), dae.g(x, &yp));
        yp[j] = y[j] - step;
        let (fm, gm) = (dae.f(x, &yp), dae.g(x, &yp));
        yp[j] = y[j];
        for i in 0..nx {
            f_y[(i, j)] = (fp[i] - fm[i]) / (2.0 * step);
        }
        for i in 0..ny {
            g_y[(i, j)] = (gp[i] - gm[i]) / (2.0 * step);
        }
    }
    let all = [&f_x, &f_y, &g_x, &g_y];
    if all.iter().any(|m| m.iter().any(|v| !v.is_finite())) {
        return Err(Error::Config("model produced non-finite values near the operating point".into()));
    }
    Ok(LinearizedModel {
        f_x,
        f_y,
        g_x,
        g_y,
        state_labels: dae.state_labels(),
        algebraic_labels: dae.algebraic_labels(),
        frozen: dae.frozen(x, y),
    })
}

/// 2-norm condition number of `g_y`.
pub fn algebraic_condition(lin: &LinearizedModel) -> f64 {
    if lin.g_y.is_empty() {
        return 1.0;
    }
    let sv = lin.g_y.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

/// Schur complement `A = f_x − f_y g_y⁻¹ g_x`.
pub fn reduce_state_matrix(lin: &LinearizedModel) -> Result<DMatrix<f64>> {
    if lin.g_y.is_empty() {
        return Ok(lin.f_x.clone());
    }
    let svd = lin.g_y.clone().svd(false, true);
    let (max, min) = (svd.singular_values.max(), svd.singular_values.min());
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(min > 1e-12 * max) {
        let k = svd.singular_values.imin();
        let null_vector = svd.v_t.map(|vt| vt.row(k).iter().copied().collect()).unwrap_or_default();
        return Err(Error::SingularAlgebraic { condition, null_vector });
    }
    log::debug!("g_y condition number {condition:.3e}");
    let sol = lin
        .g_y
        .clone()
        .lu()
        .solve(&lin.g_x)
        .ok_or(Error::SingularAlgebraic {
            condition,
            null_vector: Vec::new(),
        })?;
    Ok(&lin.f_x - &lin.f_y * sol)
}

/// Drop rows and columns of states marked frozen.
pub fn dynamic_submatrix(a: &DMatrix<f64>, frozen: &[bool]) -> DMatrix<f64> {
    let keep: Vec<usize> = (0..a.nrows()).filter(|&i| !frozen.get(i).copied().unwrap_or(false)).collect();
    DMatrix::from_fn(keep.len(), keep.len(), |i, j| a[(keep[i], keep[j])])
}

/// Full complex spectrum, sorted by real part (descending).
pub fn eigenvalues(a: &DMatrix<f64>) -> Result<Vec<Complex64>> {
    if a.is_empty() {
        return Ok(Vec::new());
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config("state matrix has non-finite entries".into()));
    }
    let schur = a
        .clone()
        .try_schur(1e-12, 100_000)
        .ok_or_else(|| Error::SingularJacobian("eigenvalue iteration did not converge".into()))?;
    let mut ev: Vec<Complex64> = schur.complex_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| b.re.total_cmp(&a.re).then(b.im.total_cmp(&a.im)));
    Ok(ev)
}

/// Spectrum of the dynamic (non-frozen) part of a linearized model.
pub fn spectrum(lin: &LinearizedModel) -> Result<Vec<Complex64>> {
    let a = reduce_state_matrix(lin)?;
    eigenvalues(&dynamic_submatrix(&a, &lin.frozen))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepCondition {
    /// Droop gains scaled, supplementary regulators detached.
    DroopOnly,
    /// Droop gains scaled with the power regulators attached and binding.
    DroopWithRegulators,
    /// Power-regulator gains scaled.
    PowerRegulatorGain,
}

impl SweepCondition {
    pub fn from_index(i: u8) -> Result<Self> {
        match i {
            1 => Ok(Self::DroopOnly),
            2 => Ok(Self::DroopWithRegulators),
            3 => Ok(Self::PowerRegulatorGain),
            _ => Err(Error::Config(format!("sweep condition must be 1, 2 or 3 (got {i})"))),
        }
    }

    pub fn parameter(self) -> &'static str {
        match self {
            Self::DroopOnly | Self::DroopWithRegulators => "k_df",
            Self::PowerRegulatorGain => "k_w",
        }
    }
}

/// `n` log-spaced multipliers over `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (n - 1) as f64).exp())
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainSweepOptions {
    /// Multipliers of the nominal gains.
    pub multipliers: Vec<f64>,
    pub fidelity: Fidelity,
    pub h: f64,
    /// Relative width at which the crossing bisection stops.
    pub refine_tol: f64,
    /// `k_dv / k_df` held during droop sweeps.
    pub droop_ratio: f64,
    /// `k_w / k_v` held during regulator sweeps.
    pub regulator_ratio: f64,
    pub warm_start: bool,
    #[serde(skip)]
    pub exec: Execution,
}

impl Default for GainSweepOptions {
    fn default() -> Self {
        Self {
            multipliers: log_grid(0.2, 10.0, 40),
            fidelity: Fidelity::Full,
            h: 1e-6,
            refine_tol: 1e-4,
            droop_ratio: 5.0,
            regulator_ratio: 4.0 / 3.0,
            warm_start: true,
            exec: Execution::Sequential,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenSweepResult {
    pub swept_parameter: String,
    pub multipliers: Vec<f64>,
    /// Gain of the first inverter at each grid point.
    pub values: Vec<f64>,
    pub spectra: Vec<Vec<Complex64>>,
    pub max_real: Vec<f64>,
    pub crossing_gain: Option<f64>,
    /// Stable and unstable gains enclosing the crossing.
    pub bracket: Option<(f64, f64)>,
    pub diagnostic: Option<String>,
}

/// Operating mode used by a sweep condition.
fn condition_operating(ops: &Operating, cond: SweepCondition) -> Operating {
    let mut ops = ops.clone();
    for m in &mut ops.modes {
        m.limiter = None;
        match cond {
            SweepCondition::DroopOnly => {
                m.power_reg_since = None;
                m.vf_reg_since = None;
            }
            _ => {
                m.power_reg_since = Some(f64::NEG_INFINITY);
            }
        }
    }
    ops
}

fn scaled_grid(grid: &Microgrid, cond: SweepCondition, m: f64, opts: &GainSweepOptions) -> Microgrid {
    let mut g = grid.clone();
    for u in &mut g.inverters {
        match cond {
            SweepCondition::DroopOnly | SweepCondition::DroopWithRegulators => {
                u.params.k_df *= m;
                u.params.k_dv = opts.droop_ratio * u.params.k_df;
            }
            SweepCondition::PowerRegulatorGain => {
                u.power_reg.k_w *= m;
                u.power_reg.k_v = u.power_reg.k_w / opts.regulator_ratio;
            }
        }
    }
    g
}

/// One grid point: equilibrium, linearization and spectrum.
pub struct SweepPoint {
    pub value: f64,
    pub spectrum: Vec<Complex64>,
    pub max_real: f64,
    pub equilibrium: EquilibriumSolution,
}

pub fn evaluate_gain_point(
    grid: &Microgrid,
    ops: &Operating,
    cond: SweepCondition,
    m: f64,
    warm: Option<&EquilibriumSolution>,
    opts: &GainSweepOptions,
) -> Result<SweepPoint> {
    let g = scaled_grid(grid, cond, m, opts);
    let ops = condition_operating(ops, cond);
    let mut prob = EquilibriumProblem::from_operating(&g, &ops);
    prob.warm_start = warm.cloned();
    let eq = solve_droop_equilibrium(&prob)?;
    let pins: Vec<InverterPin> = (0..g.n_inv())
        .map(|k| InverterPin {
            power_reg_active: Some(eq.binding[k]),
            action: Some(TriggerAction::None),
            ..Default::default()
        })
        .collect();
    let (x, y) = state_from_operating_point(&g, opts.fidelity, &eq.operating_point());
    let dae = MicrogridDae::new(&g, &ops, opts.fidelity).with_pins(pins);
    let lin = linearize(&dae, &x, &y, opts.h)?;
    let spectrum = spectrum(&lin)?;
    let max_real = spectrum.first().map_or(f64::NEG_INFINITY, |l| l.re);
    let value = match cond {
        SweepCondition::PowerRegulatorGain => g.inverters[0].power_reg.k_w,
        _ => g.inverters[0].params.k_df,
    };
    Ok(SweepPoint {
        value,
        spectrum,
        max_real,
        equilibrium: eq,
    })
}

/// Re-solve, re-linearize and locate the first stability crossing over the
/// multiplier grid.
pub fn gain_sweep(
    grid: &Microgrid,
    ops: &Operating,
    cond: SweepCondition,
    opts: &GainSweepOptions,
) -> Result<EigenSweepResult> {
    if opts.multipliers.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Config("sweep grid must be strictly increasing".into()));
    }
    let mut res = EigenSweepResult {
        swept_parameter: cond.parameter().into(),
        multipliers: Vec::new(),
        values: Vec::new(),
        spectra: Vec::new(),
        max_real: Vec::new(),
        crossing_gain: None,
        bracket: None,
        diagnostic: None,
    };
    let points: Vec<(f64, Result<SweepPoint>)> = if opts.warm_start {
        let mut out = Vec::new();
        let mut warm: Option<EquilibriumSolution> = None;
        for &m in &opts.multipliers {
            let p = evaluate_gain_point(grid, ops, cond, m, warm.as_ref(), opts);
            let failed = p.is_err();
            if let Ok(pt) = &p {
                warm = Some(pt.equilibrium.clone());
            }
            out.push((m, p));
            if failed {
                break;
            }
        }
        out
    } else {
        let ms = opts.multipliers.clone();
        opts.exec
            .map(ms, |m| (m, evaluate_gain_point(grid, ops, cond, m, None, opts)))
    };
    let mut warms: Vec<EquilibriumSolution> = Vec::new();
    for (m, p) in points {
        match p {
            Ok(pt) => {
                res.multipliers.push(m);
                res.values.push(pt.value);
                res.max_real.push(pt.max_real);
                res.spectra.push(pt.spectrum);
                warms.push(pt.equilibrium);
            }
            Err(e) => {
                res.diagnostic = Some(format!("sweep truncated at multiplier {m:.4}: {e}"));
                break;
            }
        }
    }
    if res.max_real.first().is_some_and(|r| *r >= 0.0) {
        res.diagnostic.get_or_insert_with(|| "operating point unstable at the first grid value".into());
        return Ok(res);
    }
    let Some(i) = res.max_real.windows(2).position(|w| w[0] < 0.0 && w[1] >= 0.0) else {
        return Ok(res);
    };
    let (mut lo, mut hi) = (res.multipliers[i], res.multipliers[i + 1]);
    let (mut v_lo, mut v_hi) = (res.values[i], res.values[i + 1]);
    let mut warm = warms[i].clone();
    while (hi - lo) / hi > opts.refine_tol {
        let mid = (lo * hi).sqrt();
        match evaluate_gain_point(grid, ops, cond, mid, Some(&warm), opts) {
            Ok(pt) if pt.max_real < 0.0 => {
                lo = mid;
                v_lo = pt.value;
                warm = pt.equilibrium;
            }
            Ok(pt) => {
                hi = mid;
                v_hi = pt.value;
            }
            Err(e) => {
                res.diagnostic = Some(format!("crossing refinement stopped: {e}"));
                break;
            }
        }
    }
    res.crossing_gain = Some(v_hi);
    res.bracket = Some((v_lo, v_hi));
    Ok(res)
}
