//! Python bindings for maxhom.

use std::path::Path;

use maxhom::cell::{solve_magnetic_cell, CellGrid};
use maxhom::coefficients::{
    build_coefficient_field, diag_spec, verify_conductivity as verify, ConductivityLaw, ConductivitySpec, FieldSpec,
};
use maxhom::experiment::{exit_code, run_scenario as run, Outcome, Overrides, Scenario};
use maxhom::galerkin::{assemble_modes, linear_propagate, Problem1D};
use maxhom::probability::{sample_omega as sample, tau_apply as tau, DynamicalSystemSpec, OmegaPoint};
use maxhom::profile::{Profile1D, SeparableTerm, TimeProfile, VectorFieldSpec};
use maxhom::Error;
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Numerical(m) => PyArithmeticError::new_err(m),
        Error::Io(e) => PyOSError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn json_to_py(py: Python<'_>, v: &serde_json::Value) -> PyResult<PyObject> {
    Ok(match v {
        serde_json::Value::Null => py.None(),
        serde_json::Value::Bool(b) => b.into_py(py),
        serde_json::Value::Number(n) => match n.as_i64() {
            Some(i) => i.into_py(py),
            None => n.as_f64().unwrap_or(f64::NAN).into_py(py),
        },
        serde_json::Value::String(s) => s.into_py(py),
        serde_json::Value::Array(a) => {
            let items = a.iter().map(|x| json_to_py(py, x)).collect::<PyResult<Vec<_>>>()?;
            PyList::new_bound(py, items).into_py(py)
        }
        serde_json::Value::Object(o) => {
            let d = PyDict::new_bound(py);
            for (k, x) in o {
                d.set_item(k, json_to_py(py, x)?)?;
            }
            d.into_py(py)
        }
    })
}

fn serialize<T: serde::Serialize>(py: Python<'_>, v: &T) -> PyResult<PyObject> {
    let j = serde_json::to_value(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    json_to_py(py, &j)
}

const SCENARIOS: [Scenario; 7] = [
    Scenario::Validate,
    Scenario::EpsRun,
    Scenario::GalerkinRun,
    Scenario::Cell,
    Scenario::HomRun,
    Scenario::Converge,
    Scenario::CrossValidate,
];

pub fn parse_scenario(name: &str) -> Result<Scenario, String> {
    let name = name.replace('-', "_");
    SCENARIOS.iter().copied().find(|s| s.name() == name).ok_or_else(|| {
        let all: Vec<&str> = SCENARIOS.iter().map(|s| s.name()).collect();
        format!("unknown scenario `{name}`; expected one of {}", all.join(", "))
    })
}

/// Runs a scenario like the command line does; returns a dict with
/// `pass`, `exit_code`, `checks` and `outputs`.
#[pyfunction]
#[pyo3(signature = (scenario, config_text, out, seed=None, workers=None))]
fn run_scenario(
    py: Python<'_>,
    scenario: &str,
    config_text: &str,
    out: &str,
    seed: Option<u64>,
    workers: Option<usize>,
) -> PyResult<PyObject> {
    let s = parse_scenario(scenario).map_err(PyValueError::new_err)?;
    let result: maxhom::Result<Outcome> =
        py.allow_threads(|| run(s, config_text, Path::new(out), Overrides { seed, workers }));
    let code = exit_code(&result);
    let o = result.map_err(to_py)?;
    let d = PyDict::new_bound(py);
    d.set_item("pass", o.pass())?;
    d.set_item("exit_code", code)?;
    d.set_item("checks", serialize(py, &o.checks)?)?;
    d.set_item("outputs", o.outputs)?;
    Ok(d.into_py(py))
}

/// Validates a configuration and returns it with every default filled in.
#[pyfunction]
fn parse_config(py: Python<'_>, text: &str) -> PyResult<PyObject> {
    let cfg = maxhom::config::parse_config(text).map_err(to_py)?;
    serialize(py, &cfg)
}

/// Sampled structure audit of `σ(ξ) = κξ + βξ/(1+|ξ|)`.
#[pyfunction]
#[pyo3(signature = (kappa, beta=0.0, samples=10_000, seed=0))]
fn verify_conductivity(py: Python<'_>, kappa: f64, beta: f64, samples: usize, seed: u64) -> PyResult<PyObject> {
    let spec = if beta == 0.0 {
        ConductivitySpec::linear(kappa)
    } else {
        ConductivitySpec::saturating(kappa, beta)
    };
    let law = ConductivityLaw::new(spec).map_err(to_py)?;
    let r = verify(&law, samples, seed).map_err(to_py)?;
    serialize(py, &r)
}

fn system(shift_matrix: Vec<f64>, invariant_mask: Vec<bool>, dim: usize, seed: u64) -> PyResult<DynamicalSystemSpec> {
    let ds = DynamicalSystemSpec {
        dim,
        shift_matrix,
        invariant_mask,
        seed,
    };
    ds.validate().map_err(to_py)?;
    Ok(ds)
}

/// `τ(y)ω` on the torus with shift `ω + A·y`.
#[pyfunction]
#[pyo3(signature = (y, omega, shift_matrix=vec![], invariant_mask=vec![]))]
fn tau_apply(y: Vec<f64>, omega: Vec<f64>, shift_matrix: Vec<f64>, invariant_mask: Vec<bool>) -> PyResult<Vec<f64>> {
    let ds = system(shift_matrix, invariant_mask, omega.len(), 0)?;
    let w = OmegaPoint::new(omega).map_err(to_py)?;
    Ok(tau(&ds, &y, &w).map_err(to_py)?.coords)
}

/// Reproducible uniform sample of the torus.
#[pyfunction]
#[pyo3(signature = (count, seed, dim=3))]
fn sample_omega(count: usize, seed: u64, dim: usize) -> PyResult<Vec<Vec<f64>>> {
    let ds = system(vec![], vec![], dim, seed)?;
    Ok(sample(&ds, count).into_iter().map(|w| w.coords).collect())
}

/// Effective tensor of a two-phase diagonal laminate.
#[pyfunction]
#[pyo3(signature = (phase_a, phase_b, theta=0.5, axis=0, resolution=64))]
fn laminate_tensor(
    phase_a: [f64; 3],
    phase_b: [f64; 3],
    theta: f64,
    axis: usize,
    resolution: usize,
) -> PyResult<Vec<Vec<f64>>> {
    let spec = FieldSpec::Laminate {
        variable: Default::default(),
        axis,
        theta,
        phase_a: diag_spec(phase_a),
        phase_b: diag_spec(phase_b),
    };
    let field = build_coefficient_field(spec, "laminate").map_err(to_py)?;
    let mut vary = [false; 3];
    if axis < 3 {
        vary[axis] = true;
    }
    let grid = CellGrid::adapted(resolution, vary).map_err(to_py)?;
    let s = solve_magnetic_cell(&field, &[0.0; 3], &[0.0; 3], &grid).map_err(to_py)?;
    Ok((0..3).map(|i| (0..3).map(|j| s.matrix[(i, j)]).collect()).collect())
}

/// State at time `t` of the linear 1D reduction with constant coefficients,
/// started from `E_y = Σ_k a_k sin(kπx)`. The first `modes` entries are the
/// `E_y` coefficients and the rest the `H_z` coefficients, both on the
/// orthonormal basis `√2 sin(kπx)` and `√2 cos(kπx)`.
#[pyfunction]
#[pyo3(signature = (eta, mu, kappa, e0_sine_amplitudes, t, modes=16))]
fn galerkin_propagate(
    eta: f64,
    mu: f64,
    kappa: f64,
    e0_sine_amplitudes: Vec<f64>,
    t: f64,
    modes: usize,
) -> PyResult<Vec<f64>> {
    let mut p = Problem1D::constant(eta, mu, kappa, 0.0);
    p.e0 = VectorFieldSpec {
        terms: e0_sine_amplitudes
            .iter()
            .enumerate()
            .map(|(k, &a)| SeparableTerm {
                component: 1,
                amplitude: a,
                spatial: [
                    Profile1D::Sin {
                        freq: (k + 1) as f64 * std::f64::consts::PI,
                        phase: 0.0,
                    },
                    Profile1D::One,
                    Profile1D::One,
                ],
                temporal: TimeProfile::One,
            })
            .collect(),
    };
    let sys = assemble_modes(modes, &p, 16 * modes).map_err(to_py)?;
    Ok(linear_propagate(&sys, t, &sys.delta_n).map_err(to_py)?.iter().copied().collect())
}

/// Reads a binary field record: returns `(header, records)` where each
/// record is `(step, t, [c0, c1, c2])`.
#[pyfunction]
fn read_field_record(py: Python<'_>, path: &str) -> PyResult<PyObject> {
    let (h, recs) = maxhom::io::read_field_record(Path::new(path)).map_err(to_py)?;
    let header = PyDict::new_bound(py);
    header.set_item("location", if h.location == 0 { "edge" } else { "face" })?;
    header.set_item("dims", h.dims.iter().map(|d| d.to_vec()).collect::<Vec<_>>())?;
    header.set_item("stride", h.stride)?;
    header.set_item("dt", h.dt)?;
    header.set_item("records", h.records)?;
    let records: Vec<(u64, f64, Vec<Vec<f64>>)> = recs.into_iter().map(|(s, t, f)| (s, t, f.c.to_vec())).collect();
    Ok((header, records).into_py(py))
}

#[pymodule]
fn maxhom_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", maxhom::experiment::VERSION)?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(parse_config, m)?)?;
    m.add_function(wrap_pyfunction!(verify_conductivity, m)?)?;
    m.add_function(wrap_pyfunction!(tau_apply, m)?)?;
    m.add_function(wrap_pyfunction!(sample_omega, m)?)?;
    m.add_function(wrap_pyfunction!(laminate_tensor, m)?)?;
    m.add_function(wrap_pyfunction!(galerkin_propagate, m)?)?;
    m.add_function(wrap_pyfunction!(read_field_record, m)?)?;
    Ok(())
}
