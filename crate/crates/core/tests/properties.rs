use microgrid_core::equilibrium::{solve_droop_equilibrium, EquilibriumProblem};
use microgrid_core::fixtures::{fixture, fixture_names};
use microgrid_core::scenario::Scenario;
use microgrid_core::tds::{SimTrace, TraceEvent};
use proptest::prelude::*;

#[test]
fn fixtures_round_trip_through_json() {
    for name in fixture_names() {
        let sc = fixture(name).unwrap();
        let again = Scenario::from_json_str(&sc.to_json_string().unwrap()).unwrap();
        assert_eq!(sc, again, "{name}");
    }
}

#[test]
fn bus_frequency_follows_angle_ramp() {
    // 0.3 rad/s drift on a 60 Hz base, wrapped through ±pi
    let rows = (0..200)
        .map(|i| {
            let t = i as f64 * 0.05;
            let th = (0.3 * t + 3.0 + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI) - std::f64::consts::PI;
            vec![t, 0.999, th]
        })
        .collect();
    let tr = SimTrace {
        columns: vec!["time".into(), "f_sys".into(), "bus7_theta".into()],
        rows,
        events: Vec::<TraceEvent>::new(),
    };
    let f = tr.bus_frequency(7, 60.0).unwrap();
    let want = 0.999 + 0.3 / (2.0 * std::f64::consts::PI * 60.0);
    assert!(f.iter().all(|x| (x - want).abs() < 1e-12));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn droop_shares_scale_inversely_with_gain(scale in 0.7f64..1.1) {
        let sc = fixture("toy3").unwrap();
        let eq = solve_droop_equilibrium(&EquilibriumProblem::droop(&sc.grid).with_load_scale(scale)).unwrap();
        let w: Vec<f64> = sc
            .grid
            .inverters
            .iter()
            .enumerate()
            .map(|(k, u)| (eq.p_inv[k] - u.params.p0) * u.params.k_df)
            .collect();
        for x in &w {
            prop_assert!((x - w[0]).abs() <= 1e-9 * w[0].abs().max(1e-6));
        }
        prop_assert!((1.0 - eq.f - w[0]).abs() < 1e-9);
    }
}
