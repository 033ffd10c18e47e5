use maxhom::cell::{solve_electric_cell_evolution, solve_magnetic_cell, CellGrid};
use maxhom::coefficients::{build_coefficient_field, diag_spec, ConductivityLaw, ConductivitySpec, FieldSpec};

/// Two-phase laminate along the macroscopic field: each phase obeys
/// `η_i e_i' + κ_i e_i = J(t)` with `θ e_1 + (1-θ) e_2 = E0(t)`.
fn laminate_memory_rk4(
    eta: [f64; 2],
    kappa: [f64; 2],
    theta: f64,
    e0: impl Fn(f64) -> f64,
    de0: impl Fn(f64) -> f64,
    t_end: f64,
    dt: f64,
) -> Vec<(f64, f64, f64)> {
    let w = [theta, 1.0 - theta];
    let rhs = |t: f64, e: [f64; 2]| -> [f64; 2] {
        let num = de0(t) + w[0] * kappa[0] * e[0] / eta[0] + w[1] * kappa[1] * e[1] / eta[1];
        let j = num / (w[0] / eta[0] + w[1] / eta[1]);
        [(j - kappa[0] * e[0]) / eta[0], (j - kappa[1] * e[1]) / eta[1]]
    };
    // stationary start: κ_1 e_1 = κ_2 e_2, mean E0(0)
    let c = e0(0.0) / (w[0] / kappa[0] + w[1] / kappa[1]);
    let mut e = [c / kappa[0], c / kappa[1]];
    let steps = (t_end / dt).round() as usize;
    let mut out = Vec::with_capacity(steps + 1);
    let record = |t: f64, e: [f64; 2]| {
        (
            t,
            w[0] * kappa[0] * e[0] + w[1] * kappa[1] * e[1],
            w[0] * eta[0] * e[0] + w[1] * eta[1] * e[1],
        )
    };
    out.push(record(0.0, e));
    for n in 0..steps {
        let t = n as f64 * dt;
        let add = |e: [f64; 2], k: [f64; 2], s: f64| [e[0] + s * k[0], e[1] + s * k[1]];
        let k1 = rhs(t, e);
        let k2 = rhs(t + dt / 2.0, add(e, k1, dt / 2.0));
        let k3 = rhs(t + dt / 2.0, add(e, k2, dt / 2.0));
        let k4 = rhs(t + dt, add(e, k3, dt));
        for i in 0..2 {
            e[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        out.push(record((n + 1) as f64 * dt, e));
    }
    out
}

#[test]
fn laminate_with_memory_matches_ode_oracle() {
    let eta = build_coefficient_field(FieldSpec::isotropic_laminate(0, 0.5, 1.0, 2.0), "eta").unwrap();
    let law = ConductivityLaw::new(ConductivitySpec::Linear {
        kappa: maxhom::coefficients::ScalarFieldSpec::Laminate {
            variable: Default::default(),
            axis: 0,
            theta: 0.5,
            inside: 3.0,
            outside: 0.5,
        },
    })
    .unwrap();
    let e0 = |t: f64| (2.0 * t).sin() + 0.5;
    let de0 = |t: f64| 2.0 * (2.0 * t).cos();
    let (t_end, dt) = (1.0, 1e-3);
    let reference = laminate_memory_rk4([1.0, 2.0], [3.0, 0.5], 0.5, e0, de0, t_end, dt / 10.0);
    let traj: Vec<[f64; 3]> = (0..=1000).map(|n| [e0(n as f64 * dt), 0.0, 0.0]).collect();
    let grid = CellGrid::adapted(64, [true, false, false]).unwrap();
    for theta in [1.0, 0.5] {
        let ev = solve_electric_cell_evolution(&eta, &law, &[0.0; 3], &[0.0; 3], &traj, &grid, dt, theta).unwrap();
        let mut err: f64 = 0.0;
        for (n, (j, d)) in ev.j0.iter().zip(&ev.d0).enumerate() {
            let (_, jr, dr) = reference[n * 10];
            // midpoint stepping reports σ at the midpoint; compare D0 and the endpoint J0
            err = err.max((d[0] - dr).abs());
            if theta == 1.0 {
                err = err.max((j[0] - jr).abs());
            }
        }
        assert!(err < 1e-3, "theta {theta}: max error {err}");
    }
}

#[test]
fn laminate_oracle_at_two_resolutions() {
    let mu = build_coefficient_field(
        FieldSpec::Laminate {
            variable: Default::default(),
            axis: 0,
            theta: 0.5,
            phase_a: diag_spec([1.0; 3]),
            phase_b: diag_spec([3.0; 3]),
        },
        "mu",
    )
    .unwrap();
    for r in [32, 64] {
        let s = solve_magnetic_cell(&mu, &[0.0; 3], &[0.0; 3], &CellGrid::cube(r).unwrap()).unwrap();
        let want = [1.5, 2.0, 2.0];
        for a in 0..3 {
            assert!((s.matrix[(a, a)] - want[a]).abs() < 1e-3);
        }
        let spec = s.matrix.symmetric_eigenvalues();
        assert!(spec.iter().all(|&l| l >= 1.0 - 1e-6 && l <= 3.0 + 1e-6));
    }
}
