use std::f64::consts::PI;

use maxhom::probability::{DynamicalSystemSpec, OmegaPoint};
use maxhom::twoscale::{fiber_spread, fit_rate, oscillating_eval, relative_variance, TestFunction};

fn test_function() -> TestFunction {
    toml::from_str(
        r#"
component = 1
spatial = [{ kind = "sin", freq = 3.141592653589793 }, { kind = "one" }, { kind = "one" }]
omega = { constant = 1.0, terms = [{ amp = 0.5, freqs = [1, 0, 0] }] }
cell = { terms = [{ amp = 1.0, freqs = [0, 1, 0], phase = -1.5707963267948966 }] }
"#,
    )
    .unwrap()
}

#[test]
fn oscillating_trace_matches_direct_formula() {
    let f = test_function();
    let ds = DynamicalSystemSpec::ergodic(3, 0);
    let w = OmegaPoint::new(vec![0.3, 0.7, 0.1]).unwrap();
    let eps = 0.125;
    for x in [[0.1, 0.2, 0.3], [0.55, 0.05, 0.9], [0.93, 0.61, 0.27]] {
        let w1 = 0.3 + x[0] / eps;
        let z2 = x[1] / (eps * eps);
        let direct = (PI * x[0]).sin() * (1.0 + 0.5 * (2.0 * PI * w1).cos()) * (2.0 * PI * z2).sin();
        let got = oscillating_eval(&f, &x, 0.0, &w, &ds, eps);
        assert!((got - direct).abs() < 1e-10, "{got} vs {direct} at {x:?}");
    }
}

#[test]
fn masked_coordinate_is_frozen_along_the_trace() {
    let f = test_function();
    let ds = DynamicalSystemSpec::with_invariant(3, &[0], 0);
    let w = OmegaPoint::new(vec![0.3, 0.7, 0.1]).unwrap();
    let x = [0.55, 0.05, 0.9];
    let eps = 0.25;
    let z2 = x[1] / (eps * eps);
    let direct = (PI * x[0]).sin() * (1.0 + 0.5 * (2.0 * PI * 0.3).cos()) * (2.0 * PI * z2).sin();
    assert!((oscillating_eval(&f, &x, 0.0, &w, &ds, eps) - direct).abs() < 1e-10);
}

#[test]
fn fit_rate_recovers_power_law() {
    let eps = [0.5, 0.25, 0.125, 0.0625];
    let gaps: Vec<f64> = eps.iter().map(|e: &f64| 3.0 * e.powf(2.5)).collect();
    assert!((fit_rate(&eps, &gaps) - 2.5).abs() < 1e-12);
    assert!(fit_rate(&eps[..1], &gaps[..1]).is_nan());
}

#[test]
fn spread_statistics() {
    assert_eq!(relative_variance(&[2.0; 5]), 0.0);
    assert_eq!(fiber_spread(&[2.0; 5]), 0.0);
    assert!((fiber_spread(&[1.0, 2.0, 4.0]) - 0.75).abs() < 1e-15);
    // population standard deviation of {1, 3} is 1
    assert!((relative_variance(&[1.0, 3.0]) - 1.0 / 3.0).abs() < 1e-15);
}
