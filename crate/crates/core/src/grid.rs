//! Static description of the microgrid: per-unit bases, buses, branches,
//! V-f dependent ZIP loads and nodal power injections.
//!
//! All quantities are per-unit on a single system base. Frequency is
//! expressed in p.u. of `f_base`, so the nominal frequency is 1.0.

use std::collections::{HashMap, HashSet, VecDeque};

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type BusId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerUnitBase {
    /// Apparent power base in VA.
    pub s_base: f64,
    /// Line-to-line voltage base in V.
    pub v_base: f64,
    /// Frequency base in Hz.
    pub f_base: f64,
}

impl Default for PerUnitBase {
    fn default() -> Self {
        Self {
            s_base: 10.0e6,
            v_base: 12.47e3,
            f_base: 60.0,
        }
    }
}

impl PerUnitBase {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("s_base", self.s_base),
            ("v_base", self.v_base),
            ("f_base", self.f_base),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be strictly positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Electrical angular speed base in rad/s.
    pub fn w_base(&self) -> f64 {
        2.0 * std::f64::consts::PI * self.f_base
    }

    pub fn power_to_pu(&self, watts: f64) -> f64 {
        watts / self.s_base
    }
}

/// V-f dependent ZIP load.
///
/// `p = [p1, p2, p3]` are the constant-impedance, constant-current and
/// constant-power fractions of the active part; `q` likewise for the
/// reactive part. `k_pf`/`k_qf` scale the load with the frequency deviation
/// from `f0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZipLoadParams {
    pub p0: f64,
    pub q0: f64,
    pub p: [f64; 3],
    pub q: [f64; 3],
    pub k_pf: f64,
    pub k_qf: f64,
    #[serde(default = "unit")]
    pub f0: f64,
}

fn unit() -> f64 {
    1.0
}

impl ZipLoadParams {
    pub fn constant_power(p0: f64, q0: f64) -> Self {
        Self {
            p0,
            q0,
            p: [0.0, 0.0, 1.0],
            q: [0.0, 0.0, 1.0],
            k_pf: 0.0,
            k_qf: 0.0,
            f0: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.p0, self.q0, self.p[0], self.p[1], self.p[2], self.q[0], self.q[1], self.q[2],
            self.k_pf, self.k_qf, self.f0,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("ZIP load has non-finite coefficients".into()));
        }
        let sp: f64 = self.p.iter().sum();
        let sq: f64 = self.q.iter().sum();
        if (sp - 1.0).abs() > 1e-12 || (sq - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "ZIP fractions must sum to one (p sums to {sp}, q sums to {sq})"
            )));
        }
        Ok(())
    }

    /// Same composition, base powers multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            p0: self.p0 * factor,
            q0: self.q0 * factor,
            ..*self
        }
    }
}

/// Active and reactive power drawn by a ZIP load at voltage magnitude `v`
/// and frequency `f` (both p.u.).
pub fn eval_zip_load(load: &ZipLoadParams, v: f64, f: f64) -> (f64, f64) {
    let [p1, p2, p3] = load.p;
    let [q1, q2, q3] = load.q;
    let df = f - load.f0;
    let p = load.p0 * (p1 * v * v + p2 * v + p3) * (1.0 + load.k_pf * df);
    let q = load.q0 * (q1 * v * v + q2 * v + q3) * (1.0 + load.k_qf * df);
    (p, q)
}

/// Partial derivatives of the ZIP load with respect to voltage magnitude.
pub(crate) fn zip_load_dv(load: &ZipLoadParams, v: f64, f: f64) -> (f64, f64) {
    let [p1, p2, _] = load.p;
    let [q1, q2, _] = load.q;
    let df = f - load.f0;
    (
        load.p0 * (2.0 * p1 * v + p2) * (1.0 + load.k_pf * df),
        load.q0 * (2.0 * q1 * v + q2) * (1.0 + load.k_qf * df),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: BusId,
    #[serde(default = "unit")]
    pub v_nominal: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub load: Option<ZipLoadParams>,
    /// Shunt admittance to ground (g, b), p.u.
    #[serde(default, skip_serializing_if = "is_zero_pair")]
    pub shunt: (f64, f64),
}

fn is_zero_pair(v: &(f64, f64)) -> bool {
    v.0 == 0.0 && v.1 == 0.0
}

impl Bus {
    pub fn new(id: BusId) -> Self {
        Self {
            id,
            v_nominal: 1.0,
            load: None,
            shunt: (0.0, 0.0),
        }
    }

    pub fn with_load(mut self, load: ZipLoadParams) -> Self {
        self.load = Some(load);
        self
    }
}

/// Series branch with admittance `g + jb`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub from: BusId,
    pub to: BusId,
    pub g: f64,
    pub b: f64,
}

impl Branch {
    pub fn from_impedance(from: BusId, to: BusId, r: f64, x: f64) -> Self {
        let y = Complex64::new(r, x).inv();
        Self {
            from,
            to,
            g: y.re,
            b: y.im,
        }
    }

    pub fn admittance(&self) -> Complex64 {
        Complex64::new(self.g, self.b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub y_matrix: DMatrix<Complex64>,
    pub base: PerUnitBase,
    index: HashMap<BusId, usize>,
}

impl NetworkModel {
    pub fn new(buses: Vec<Bus>, branches: Vec<Branch>, base: PerUnitBase) -> Result<Self> {
        base.validate()?;
        let mut index = HashMap::with_capacity(buses.len());
        for (k, bus) in buses.iter().enumerate() {
            if index.insert(bus.id, k).is_some() {
                return Err(Error::Config(format!("duplicate bus id {}", bus.id)));
            }
            if !(bus.v_nominal > 0.5 && bus.v_nominal < 1.5) {
                return Err(Error::Config(format!(
                    "bus {} nominal voltage {} outside (0.5, 1.5)",
                    bus.id, bus.v_nominal
                )));
            }
            if let Some(load) = &bus.load {
                load.validate()
                    .map_err(|e| Error::Config(format!("bus {}: {e}", bus.id)))?;
            }
        }
        let y_matrix = build_admittance(&buses, &branches)?;
        if !is_connected(&buses, &branches) {
            log::warn!("network graph is not connected; islands will be solved independently");
        }
        Ok(Self {
            buses,
            branches,
            y_matrix,
            base,
            index,
        })
    }

    pub fn n_bus(&self) -> usize {
        self.buses.len()
    }

    pub fn bus_index(&self, id: BusId) -> Result<usize> {
        self.index.get(&id).copied().ok_or(Error::UnknownBus(id))
    }

    /// Total series and shunt I²R loss for the given voltage profile.
    pub fn losses(&self, v: &[f64], theta: &[f64]) -> f64 {
        let phasor = |k: usize| Complex64::from_polar(v[k], theta[k]);
        let series: f64 = self
            .branches
            .iter()
            .map(|br| {
                let i = self.index[&br.from];
                let j = self.index[&br.to];
                br.g * (phasor(i) - phasor(j)).norm_sqr()
            })
            .sum();
        let shunt: f64 = self
            .buses
            .iter()
            .enumerate()
            .map(|(k, bus)| bus.shunt.0 * v[k] * v[k])
            .sum();
        series + shunt
    }
}

/// Nodal admittance matrix: `Y_ii` is the sum of incident branch
/// admittances plus the bus shunt, `Y_ij = -y_branch`.
pub fn build_admittance(buses: &[Bus], branches: &[Branch]) -> Result<DMatrix<Complex64>> {
    let n = buses.len();
    let index: HashMap<BusId, usize> = buses.iter().enumerate().map(|(k, b)| (b.id, k)).collect();
    let mut y = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
    for br in branches {
        let i = *index.get(&br.from).ok_or(Error::UnknownBus(br.from))?;
        let j = *index.get(&br.to).ok_or(Error::UnknownBus(br.to))?;
        if i == j {
            return Err(Error::Config(format!("branch {}-{} connects a bus to itself", br.from, br.to)));
        }
        let yb = br.admittance();
        if !(yb.re.is_finite() && yb.im.is_finite()) {
            return Err(Error::Config(format!("branch {}-{} has non-finite admittance", br.from, br.to)));
        }
        y[(i, i)] += yb;
        y[(j, j)] += yb;
        y[(i, j)] -= yb;
        y[(j, i)] -= yb;
    }
    for (k, bus) in buses.iter().enumerate() {
        y[(k, k)] += Complex64::new(bus.shunt.0, bus.shunt.1);
    }
    Ok(y)
}

fn is_connected(buses: &[Bus], branches: &[Branch]) -> bool {
    if buses.is_empty() {
        return true;
    }
    let mut adj: HashMap<BusId, Vec<BusId>> = HashMap::new();
    for br in branches {
        adj.entry(br.from).or_default().push(br.to);
        adj.entry(br.to).or_default().push(br.from);
    }
    let mut seen = HashSet::new();
    let mut queue = VecDeque::from([buses[0].id]);
    seen.insert(buses[0].id);
    while let Some(b) = queue.pop_front() {
        for &nb in adj.get(&b).map(Vec::as_slice).unwrap_or(&[]) {
            if seen.insert(nb) {
                queue.push_back(nb);
            }
        }
    }
    seen.len() == buses.len()
}

/// Active and reactive injections in polar form:
/// `P_i = V_i Σ V_j (G_ij cos θ_ij + B_ij sin θ_ij)`,
/// `Q_i = V_i Σ V_j (G_ij sin θ_ij − B_ij cos θ_ij)`.
pub fn network_injections(net: &NetworkModel, v: &[f64], theta: &[f64]) -> (Vec<f64>, Vec<f64>) {
    injections(&net.y_matrix, v, theta)
}

pub(crate) fn injections(y: &DMatrix<Complex64>, v: &[f64], theta: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = v.len();
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            let yij = y[(i, j)];
            if yij.re == 0.0 && yij.im == 0.0 {
                continue;
            }
            let (s, c) = (theta[i] - theta[j]).sin_cos();
            p[i] += v[i] * v[j] * (yij.re * c + yij.im * s);
            q[i] += v[i] * v[j] * (yij.re * s - yij.im * c);
        }
    }
    (p, q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn two_bus(g: f64, b: f64) -> NetworkModel {
        NetworkModel::new(
            vec![Bus::new(1), Bus::new(2)],
            vec![Branch { from: 1, to: 2, g, b }],
            PerUnitBase::default(),
        )
        .unwrap()
    }

    #[test]
    fn single_branch_assembly() {
        let net = two_bus(0.0, -10.0);
        let y = &net.y_matrix;
        assert_eq!(y[(0, 0)], Complex64::new(0.0, -10.0));
        assert_eq!(y[(1, 1)], Complex64::new(0.0, -10.0));
        assert_eq!(y[(0, 1)], Complex64::new(0.0, 10.0));
        assert_eq!(y[(1, 0)], Complex64::new(0.0, 10.0));
    }

    #[test]
    fn empty_branch_set_gives_zero_matrix() {
        let y = build_admittance(&[Bus::new(1), Bus::new(2)], &[]).unwrap();
        assert!(y.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn ring_symmetry() {
        let y0 = Complex64::new(1.0, -5.0);
        let branches = vec![
            Branch { from: 1, to: 2, g: y0.re, b: y0.im },
            Branch { from: 2, to: 3, g: y0.re, b: y0.im },
            Branch { from: 3, to: 1, g: y0.re, b: y0.im },
        ];
        let y = build_admittance(&[Bus::new(1), Bus::new(2), Bus::new(3)], &branches).unwrap();
        for i in 0..3 {
            assert_eq!(y[(i, i)], 2.0 * y0);
            for j in 0..3 {
                if i != j {
                    assert_eq!(y[(i, j)], -y0);
                }
            }
        }
    }

    #[test]
    fn unknown_bus_is_rejected() {
        let err = build_admittance(&[Bus::new(1)], &[Branch { from: 1, to: 9, g: 1.0, b: 0.0 }]);
        assert!(matches!(err, Err(Error::UnknownBus(9))));
    }

    #[test]
    fn disconnected_network_is_allowed() {
        let net = NetworkModel::new(
            vec![Bus::new(1), Bus::new(2), Bus::new(3)],
            vec![Branch { from: 1, to: 2, g: 1.0, b: -1.0 }],
            PerUnitBase::default(),
        );
        assert!(net.is_ok());
    }

    #[test]
    fn zip_identity_point() {
        let load = ZipLoadParams {
            p0: 0.3,
            q0: 0.1,
            p: [0.1, 0.3, 0.6],
            q: [0.5, 0.3, 0.2],
            k_pf: 2.0,
            k_qf: -0.1,
            f0: 1.0,
        };
        assert_eq!(eval_zip_load(&load, 1.0, 1.0), (0.3, 0.1));
        let cp = ZipLoadParams::constant_power(0.4, 0.2);
        assert_eq!(eval_zip_load(&cp, 0.83, 1.0), (0.4, 0.2));
    }

    #[test]
    fn zip_hand_evaluation() {
        let load = ZipLoadParams {
            p0: 1.0,
            q0: 0.0,
            p: [0.1, 0.3, 0.6],
            q: [0.5, 0.3, 0.2],
            k_pf: 2.0,
            k_qf: -0.1,
            f0: 1.0,
        };
        let (p, _) = eval_zip_load(&load, 0.95, 0.99);
        assert_relative_eq!(p, 0.97525 * 0.98, epsilon = 1e-14);
    }

    #[test]
    fn zip_fractions_must_sum_to_one() {
        let mut load = ZipLoadParams::constant_power(1.0, 0.0);
        load.p = [0.2, 0.2, 0.2];
        assert!(load.validate().is_err());
    }

    #[test]
    fn flat_start_has_no_injection() {
        let net = two_bus(1.0, -8.0);
        let (p, q) = network_injections(&net, &[1.0, 1.0], &[0.0, 0.0]);
        assert!(p.iter().chain(&q).all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn lossless_two_bus_matches_sine_law() {
        let b = -10.0;
        let net = two_bus(0.0, b);
        let delta = 0.1;
        let (p, _) = network_injections(&net, &[1.02, 0.98], &[delta, 0.0]);
        // B_12 = -b for a series branch y = jb.
        assert_relative_eq!(p[0], 1.02 * 0.98 * (-b) * delta.sin(), epsilon = 1e-12);
        assert_relative_eq!(p[0] + p[1], 0.0, epsilon = 1e-12);
    }

    fn complex_oracle(net: &NetworkModel, v: &[f64], th: &[f64]) -> Vec<Complex64> {
        let n = v.len();
        let vp: Vec<Complex64> = (0..n).map(|k| Complex64::from_polar(v[k], th[k])).collect();
        (0..n)
            .map(|i| {
                let mut cur = Complex64::new(0.0, 0.0);
                for j in 0..n {
                    cur += net.y_matrix[(i, j)] * vp[j];
                }
                vp[i] * cur.conj()
            })
            .collect()
    }

    proptest! {
        #[test]
        fn injections_match_complex_oracle_and_losses(
            rs in proptest::collection::vec(0.0f64..0.3, 4),
            xs in proptest::collection::vec(0.05f64..0.5, 4),
            v in proptest::collection::vec(0.85f64..1.15, 4),
            th in proptest::collection::vec(-0.3f64..0.3, 4),
        ) {
            let buses: Vec<Bus> = (1..=4).map(Bus::new).collect();
            let branches = vec![
                Branch::from_impedance(1, 2, rs[0], xs[0]),
                Branch::from_impedance(2, 3, rs[1], xs[1]),
                Branch::from_impedance(3, 4, rs[2], xs[2]),
                Branch::from_impedance(4, 1, rs[3], xs[3]),
            ];
            let net = NetworkModel::new(buses, branches, PerUnitBase::default()).unwrap();
            let (p, q) = network_injections(&net, &v, &th);
            let s = complex_oracle(&net, &v, &th);
            for k in 0..4 {
                prop_assert!((p[k] - s[k].re).abs() < 1e-12);
                prop_assert!((q[k] - s[k].im).abs() < 1e-12);
            }
            let total: f64 = p.iter().sum();
            prop_assert!((total - net.losses(&v, &th)).abs() < 1e-9);
        }

        #[test]
        fn zip_monotone_in_frequency(v in 0.8f64..1.2, f1 in 0.95f64..1.05, df in 1e-4f64..0.05, kpf in 0.1f64..5.0) {
            let load = ZipLoadParams { p0: 0.5, q0: 0.2, p: [0.3, 0.3, 0.4], q: [0.3, 0.3, 0.4], k_pf: kpf, k_qf: 0.0, f0: 1.0 };
            let (pa, _) = eval_zip_load(&load, v, f1);
            let (pb, _) = eval_zip_load(&load, v, f1 + df);
            prop_assert!(pb > pa);
        }
    }
}
