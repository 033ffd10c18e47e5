//! Stochastic two-scale pairings of ε-solutions and their homogenized limits.
//!
//! Test functions are separable, `φ(x)·φ_t(t)·g(ω)·ψ(z)·e_c`, so the time
//! integral is accumulated online into one edge array per run and the sample
//! average over ω only touches that array. When no coefficient depends on ω
//! a single trajectory serves every sample.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::cell::{solve_cell_diagonal, solve_omega_cell, CellGrid, CellLevel, ClosureMode, CellSolution};
use crate::coefficients::{trace_args, Mat3};
use crate::eps_solver::{run_observed, EpsProblem, RunOptions, StepView};
use crate::error::{Error, Result};
use crate::hom_solver::{run_hom_observed, HomProblem};
use crate::probability::{mean_and_stderr, sample_omega, DynamicalSystemSpec, OmegaPoint};
use crate::profile::{Profile1D, TimeProfile, TrigPoly};
use crate::yee::{det_sum, GridSpec, Location, Staggered, YeeGrid};

fn one_poly() -> TrigPoly {
    TrigPoly::constant(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestFunction {
    /// Field component the test function points along.
    pub component: usize,
    #[serde(default)]
    pub spatial: [Profile1D; 3],
    #[serde(default)]
    pub temporal: TimeProfile,
    #[serde(default = "one_poly")]
    pub omega: TrigPoly,
    #[serde(default = "one_poly")]
    pub cell: TrigPoly,
}

impl TestFunction {
    pub fn validate(&self) -> Result<()> {
        if self.component > 2 {
            return Err(Error::input(format!("test function component {} out of range", self.component)));
        }
        Ok(())
    }

    pub fn spatial_eval(&self, x: &[f64; 3]) -> f64 {
        self.spatial[0].eval(x[0]) * self.spatial[1].eval(x[1]) * self.spatial[2].eval(x[2])
    }

    /// `f(x, t, ω, z)` along `e_component`.
    pub fn eval(&self, x: &[f64; 3], t: f64, omega: &[f64], z: &[f64; 3]) -> f64 {
        self.spatial_eval(x) * self.temporal.eval(t) * self.omega.eval(omega) * self.cell.eval(z)
    }
}

/// `f(x, t, τ(x/ε)ω, x/ε²)`.
pub fn oscillating_eval(
    f: &TestFunction,
    x: &[f64; 3],
    t: f64,
    omega: &OmegaPoint,
    ds: &DynamicalSystemSpec,
    eps: f64,
) -> f64 {
    let (w, z) = trace_args(x, &omega.coords, ds, eps);
    f.eval(x, t, &w, &z)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GateStatus {
    pub resolved: bool,
    /// Largest admissible spacing per axis (infinite when nothing oscillates).
    pub required: [f64; 3],
    pub actual: [f64; 3],
}

/// Spacing must be at most half of the finest oscillation scale on every axis
/// along which the coefficients or the test function oscillate.
pub fn resolution_gate(p: &EpsProblem, f: &TestFunction) -> GateStatus {
    let eps = p.epsilon;
    let mut z_axes = f.cell.axes();
    let mut w_axes = f.omega.axes();
    for (za, wa) in [
        (p.mu.spec.z_axes(), p.mu.spec.omega_axes()),
        (p.eta.spec.z_axes(), p.eta.spec.omega_axes()),
        (p.sigma.kappa_field().z_axes(), p.sigma.kappa_field().omega_axes()),
    ] {
        for a in 0..3 {
            z_axes[a] |= za[a];
            w_axes[a] |= wa[a];
        }
    }
    let mut required = [f64::INFINITY; 3];
    for a in 0..3 {
        if z_axes[a] {
            required[a] = required[a].min(eps * eps / 2.0);
        }
        for j in 0..p.ds.dim.min(3) {
            let s = p.ds.shift(j, a).abs();
            if w_axes[j] && !p.ds.is_masked(j) && s > 0.0 {
                required[a] = required[a].min(eps / (2.0 * s));
            }
        }
    }
    let actual = p.grid.h();
    GateStatus {
        resolved: (0..3).all(|a| actual[a] <= required[a] * (1.0 + 1e-12)),
        required,
        actual,
    }
}

/// Online time accumulators: `Σ τ_n φ_t(t_n) E^n` and the summation-by-parts
/// weights for `∫ ∂_t E φ_t dt`.
struct TimeAccumulator {
    value: Staggered,
    deriv: Staggered,
    dt: f64,
    steps: usize,
}

impl TimeAccumulator {
    fn new(zero: Staggered, grid: &GridSpec) -> Self {
        Self {
            deriv: zero.clone(),
            value: zero,
            dt: grid.dt,
            steps: grid.steps(),
        }
    }

    fn add(&mut self, view: &StepView, phi_t: &TimeProfile) {
        let (n, dt, last) = (view.step, self.dt, self.steps);
        let tau = if n == 0 || n == last { 0.5 * dt } else { dt };
        let a = tau * phi_t.eval(view.t);
        let half = |k: f64| phi_t.eval((k + 0.5) * dt);
        let w = if last == 0 {
            0.0
        } else if n == 0 {
            -half(0.0)
        } else if n == last {
            half(n as f64 - 1.0)
        } else {
            half(n as f64 - 1.0) - half(n as f64)
        };
        self.value.axpy(a, view.e);
        self.deriv.axpy(w, view.e);
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PairingReport {
    pub epsilon: f64,
    pub mean: f64,
    pub stderr: f64,
    pub samples: Vec<f64>,
    /// Pairing of `∂_t E_ε` with the same test function.
    pub dt_mean: f64,
    pub dt_stderr: f64,
    pub gate: GateStatus,
    /// One trajectory served all samples.
    pub reused_trajectory: bool,
}

fn weighted_pair(yee: &YeeGrid, c: usize, acc: &Staggered, weight: impl Fn(&[f64; 3]) -> f64 + Sync) -> f64 {
    let d = yee.e_dims[c];
    det_sum(acc.c[c].len(), |flat| {
        let idx = YeeGrid::unflatten(&d, flat);
        let v = acc.c[c][flat];
        if v == 0.0 {
            return 0.0;
        }
        let x = yee.position(Location::Edge, c, &idx);
        yee.weight(Location::Edge, c, &idx) * v * weight(&x)
    })
}

/// Sample mean over ω of `∫∫ E_ε · f(x, t, τ(x/ε)ω, x/ε²)`.
pub fn pairing(
    p: &EpsProblem,
    f: &TestFunction,
    samples: usize,
    allow_unresolved: bool,
) -> Result<PairingReport> {
    f.validate()?;
    if samples == 0 {
        return Err(Error::input("pairing needs at least one ω sample"));
    }
    let gate = resolution_gate(p, f);
    if !gate.resolved && !allow_unresolved {
        return Err(Error::config(format!(
            "grid spacing {:?} does not resolve the oscillation scales (need {:?})",
            gate.actual, gate.required
        )));
    }
    let omegas = sample_omega(&p.ds, samples);
    let c = f.component;
    let eps = p.epsilon;
    let run_one = |omega: &OmegaPoint| -> Result<TimeAccumulator> {
        let mut acc = TimeAccumulator::new(p.yee.zeros(Location::Edge), &p.grid);
        run_observed(p, omega, &RunOptions::default(), &mut |v| acc.add(v, &f.temporal))?;
        Ok(acc)
    };
    let project = |acc: &TimeAccumulator, omega: &OmegaPoint| -> (f64, f64) {
        let wfun = |x: &[f64; 3]| {
            let (w, z) = trace_args(x, &omega.coords, &p.ds, eps);
            f.spatial_eval(x) * f.omega.eval(&w) * f.cell.eval(&z)
        };
        (
            weighted_pair(&p.yee, c, &acc.value, wfun),
            weighted_pair(&p.yee, c, &acc.deriv, wfun),
        )
    };
    let reuse = !p.depends_on_omega();
    let pairs: Vec<(f64, f64)> = if reuse {
        let acc = run_one(&omegas[0])?;
        omegas.iter().map(|w| project(&acc, w)).collect()
    } else {
        omegas
            .iter()
            .map(|w| run_one(w).map(|acc| project(&acc, w)))
            .collect::<Result<_>>()?
    };
    let vals: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let dvals: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let (mean, stderr) = mean_and_stderr(&vals);
    let (dt_mean, dt_stderr) = mean_and_stderr(&dvals);
    Ok(PairingReport {
        epsilon: eps,
        mean,
        stderr,
        samples: vals,
        dt_mean,
        dt_stderr,
        gate,
        reused_trajectory: reuse,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct LimitReport {
    pub value: f64,
    pub dt_value: f64,
    /// Per-fiber values (one entry when ergodic).
    pub per_fiber: Vec<f64>,
    /// Per-fiber `∫∫ φ E_0` for each component.
    pub macro_moments: Vec<[f64; 3]>,
    pub with_corrector: bool,
    /// κ not proportional to η: the memoryless closure is an approximation.
    pub approximate: bool,
}

/// Corrector factors `Π_ck = ∫∫ g(ω) ψ(z) (P(ω,z))_ck`, with `P` the
/// reiterated local-field map of the η cell problems on fiber `fiber`.
pub fn corrector_factors(hom: &HomProblem, f: &TestFunction, fiber: usize, with_corrector: bool) -> Result<Mat3> {
    let law = &hom.law;
    let c = f.component;
    let eta = &law.eta_field;
    let res = law.resolution;
    let omega_fiber = law.fiber_omega(fiber);
    if !with_corrector {
        let gmean = omega_mean(&f.omega, &law.ds, &omega_fiber, res.omega);
        let mut m = Mat3::zeros();
        m[(c, c)] = gmean * f.cell.mean();
        return Ok(m);
    }
    eta.require_diagonal("the limit pairing")?;
    let zgrid = CellGrid::adapted(res.z, eta.spec.z_axes())?;
    let x0 = [0.0; 3];
    let z_solve = |w: &[f64]| -> Result<CellSolution> {
        solve_cell_diagonal(&zgrid, [1.0; 3], CellLevel::ZCell, |z| eta.diag(&x0, w, z))
    };
    // Z_ca(ω) = ∫ ψ(z) (e_a + ∇φ_a)_c dz
    let z_factor = |sol: &CellSolution| -> [f64; 3] {
        [0, 1, 2].map(|a| sol.corrector.integrate(a, |b, z| if b == c { f.cell.eval(z) } else { 0.0 }))
    };
    let omega_dep = eta.spec.omega_axes();
    // the torus grid must also resolve g, not only the map
    let g_axes = f.omega.axes();
    let vary = [0, 1, 2].map(|a| omega_dep[a] || (g_axes[a] && !law.ds.is_masked(a)));
    let mut cache: HashMap<[u64; 3], [f64; 3]> = HashMap::new();
    let fixed_z = if omega_dep == [false; 3] {
        Some(z_factor(&z_solve(&omega_fiber)?))
    } else {
        None
    };
    let map = |w: &[f64]| -> Result<Mat3> { Ok(z_solve(w)?.matrix) };
    let fibers = if law.ergodic { vec![] } else { vec![law.fibers[fiber].clone()] };
    let osol = match solve_omega_cell(&map, &law.ds, res.omega, vary, &fibers)? {
        crate::cell::OmegaCellResult::Ergodic(s) => s,
        crate::cell::OmegaCellResult::Fibers(mut v) => v.remove(0).1,
    };
    // precompute Z at every torus edge midpoint that will be visited
    let og = &osol.corrector.grid;
    if fixed_z.is_none() {
        for a in 0..3 {
            for i in 0..og.len() {
                let w = og.face(a, i);
                if let std::collections::hash_map::Entry::Vacant(e) = cache.entry(w.map(f64::to_bits)) {
                    e.insert(z_factor(&z_solve(&w)?));
                }
            }
        }
    }
    let zf = |w: &[f64; 3]| -> [f64; 3] { fixed_z.unwrap_or_else(|| cache[&w.map(f64::to_bits)]) };
    let mut m = Mat3::zeros();
    for k in 0..3 {
        m[(c, k)] = osol.corrector.integrate(k, |a, w| f.omega.eval(w) * zf(w)[a]);
    }
    Ok(m)
}

/// Mean of `g` over the non-invariant coordinates with the invariant ones fixed.
fn omega_mean(g: &TrigPoly, ds: &DynamicalSystemSpec, fiber_point: &[f64], res: usize) -> f64 {
    let masked = ds.masked_coords();
    if masked.is_empty() {
        return g.mean();
    }
    let axes = g.axes();
    let n: Vec<usize> = (0..3).map(|a| if axes[a] && !ds.is_masked(a) { res.max(4) } else { 1 }).collect();
    let total = n[0] * n[1] * n[2];
    let mut s = 0.0;
    for i in 0..total {
        let p = [i % n[0], (i / n[0]) % n[1], i / (n[0] * n[1])];
        let w: Vec<f64> = (0..3)
            .map(|a| {
                if ds.is_masked(a) {
                    fiber_point[a]
                } else {
                    (p[a] as f64 + 0.5) / n[a] as f64
                }
            })
            .collect();
        s += g.eval(&w);
    }
    s / total as f64
}

/// `∫∫∫ (E_0 + corrector) · f` averaged over fibers.
pub fn limit_pairing(hom: &HomProblem, f: &TestFunction, with_corrector: bool) -> Result<LimitReport> {
    f.validate()?;
    if hom.law.mode != ClosureMode::Linear {
        return Err(Error::config("the limit pairing needs the linear closure"));
    }
    let yee = &hom.yee;
    let mut per_fiber = Vec::new();
    let mut dts = Vec::new();
    let mut moments = Vec::new();
    for fib in 0..hom.law.fiber_count() {
        let mut acc = TimeAccumulator::new(yee.zeros(Location::Edge), &hom.grid);
        run_hom_observed(hom, fib, &RunOptions::default(), &mut |v| acc.add(v, &f.temporal))?;
        let m: [f64; 3] = [0, 1, 2].map(|k| weighted_pair(yee, k, &acc.value, |x| f.spatial_eval(x)));
        let dm: [f64; 3] = [0, 1, 2].map(|k| weighted_pair(yee, k, &acc.deriv, |x| f.spatial_eval(x)));
        let pi = corrector_factors(hom, f, fib, with_corrector)?;
        let c = f.component;
        per_fiber.push((0..3).map(|k| pi[(c, k)] * m[k]).sum::<f64>());
        dts.push((0..3).map(|k| pi[(c, k)] * dm[k]).sum::<f64>());
        moments.push(m);
    }
    let nf = per_fiber.len() as f64;
    Ok(LimitReport {
        value: per_fiber.iter().sum::<f64>() / nf,
        dt_value: dts.iter().sum::<f64>() / nf,
        per_fiber,
        macro_moments: moments,
        with_corrector,
        approximate: !hom.law.proportional,
    })
}

/// Richardson estimate of the micro-quadrature error of the limit: the
/// corrector factors are recomputed with twice the z resolution and
/// `(4/3)|I(r) - I(2r)|` is returned.
pub fn quadrature_error_estimate(hom: &HomProblem, f: &TestFunction, value: f64) -> Result<f64> {
    let mut res = hom.law.resolution;
    res.z *= 2;
    let fine = HomProblem {
        law: hom.law.with_resolution(res),
        ..hom.clone()
    };
    let lim = limit_pairing(&fine, f, true)?;
    Ok(4.0 / 3.0 * (value - lim.value).abs())
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceRow {
    pub epsilon: f64,
    pub i_eps: f64,
    pub stderr: f64,
    pub i_0: f64,
    pub gap: f64,
    pub control_gap: f64,
    pub dt_i_eps: f64,
    pub dt_i_0: f64,
    pub dt_gap: f64,
    pub gate: GateStatus,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceReport {
    pub rows: Vec<ConvergenceRow>,
    /// Least-squares slope of `log gap` against `log ε`.
    pub rate: f64,
    pub strictly_decreasing: bool,
    pub quadrature_estimate: f64,
    pub final_gap_within_quadrature: bool,
    pub control_persistent: bool,
    pub gates_resolved: bool,
    pub limit: LimitReport,
    pub control_limit: f64,
    pub pass: bool,
}

pub fn fit_rate(eps: &[f64], gaps: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = eps
        .iter()
        .zip(gaps)
        .filter(|(_, g)| **g > 0.0)
        .map(|(e, g)| (e.ln(), g.ln()))
        .collect();
    if pts.len() < 2 {
        return f64::NAN;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// Pairings along a decreasing ε sequence against the homogenized limit and
/// the negative control that omits the correctors.
pub fn convergence_study(
    build: &dyn Fn(f64) -> Result<EpsProblem>,
    eps_list: &[f64],
    hom: &HomProblem,
    f: &TestFunction,
    samples: usize,
) -> Result<ConvergenceReport> {
    if eps_list.len() < 2 {
        return Err(Error::input("a convergence study needs at least two values of ε"));
    }
    if eps_list.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::input("ε values must be strictly decreasing"));
    }
    let limit = limit_pairing(hom, f, true)?;
    let control = limit_pairing(hom, f, false)?;
    let mut rows = Vec::new();
    for &eps in eps_list {
        let p = build(eps)?;
        let r = pairing(&p, f, samples, true)?;
        rows.push(ConvergenceRow {
            epsilon: eps,
            i_eps: r.mean,
            stderr: r.stderr,
            i_0: limit.value,
            gap: (r.mean - limit.value).abs(),
            control_gap: (r.mean - control.value).abs(),
            dt_i_eps: r.dt_mean,
            dt_i_0: limit.dt_value,
            dt_gap: (r.dt_mean - limit.dt_value).abs(),
            gate: r.gate,
        });
    }
    let strictly_decreasing = rows.windows(2).all(|w| {
        let se = (w[0].stderr.powi(2) + w[1].stderr.powi(2)).sqrt();
        w[0].gap - w[1].gap > 3.0 * se
    });
    let quad = quadrature_error_estimate(hom, f, limit.value)?;
    let last = rows.last().expect("non-empty");
    let first = &rows[0];
    let final_ok = last.gap < 2.0 * quad;
    let control_persistent = last.control_gap > 3.0 * last.stderr && last.control_gap >= 0.5 * first.control_gap;
    let gates = rows.iter().all(|r| r.gate.resolved);
    let eps: Vec<f64> = rows.iter().map(|r| r.epsilon).collect();
    let gaps: Vec<f64> = rows.iter().map(|r| r.gap).collect();
    Ok(ConvergenceReport {
        rate: fit_rate(&eps, &gaps),
        strictly_decreasing,
        quadrature_estimate: quad,
        final_gap_within_quadrature: final_ok,
        control_persistent,
        gates_resolved: gates,
        pass: strictly_decreasing && final_ok && control_persistent && gates,
        control_limit: control.value,
        limit,
        rows,
    })
}

/// Relative spread of per-fiber limit values: `(max - min) / max |v|`.
pub fn fiber_spread(values: &[f64]) -> f64 {
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let mag = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if mag == 0.0 {
        0.0
    } else {
        (hi - lo) / mag
    }
}

/// Standard deviation over ω of per-sample values, relative to their largest magnitude.
pub fn relative_variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
    let mag = values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if mag == 0.0 {
        0.0
    } else {
        var.sqrt() / mag
    }
}
