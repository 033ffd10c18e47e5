//! Time-domain solver for the oscillatory problem at a fixed sample ω.
//!
//! Leapfrog on the Yee grid: H explicit at half steps, E implicit in the
//! conductivity. The conductivity is evaluated at the midpoint
//! `Ē = (E^n + E^{n+1})/2`, which makes the discrete energy balance exact:
//!
//! `W^{n+1} - W^n + 2dt (σ(Ē), Ē) = 2dt (F^{n+1/2}, Ē)`,
//! `W^n = (ηE^n, E^n) + (μH^{n-1/2}, H^{n+1/2})`.

use rayon::prelude::*;
use serde::Serialize;

use crate::coefficients::{scalar_sigma, trace_args, CoefficientField, ConductivityLaw};
use crate::error::{Error, Result};
use crate::probability::{DynamicalSystemSpec, OmegaPoint};
use crate::profile::{TimeProfile, VectorFieldSpec};
use crate::yee::{det_sum, GridSpec, Location, Staggered, YeeGrid};

const NEWTON_MAX_ITER: usize = 20;
const NEWTON_TOL: f64 = 1e-12;

/// Solves `a u + κu + βu/(1+|u|) = r` for scalar `u`; `a + κ + min(β,0) > 0`.
#[inline]
pub fn solve_scalar_monotone(a: f64, kappa: f64, beta: f64, r: f64) -> std::result::Result<f64, f64> {
    if beta == 0.0 {
        return Ok(r / (a + kappa));
    }
    let tol = NEWTON_TOL.max(8.0 * f64::EPSILON * r.abs());
    // The solution lies between the two linear bounds.
    let (s1, s2) = (r / (a + kappa), r / (a + kappa + beta));
    let (mut lo, mut hi) = if s1 < s2 { (s1, s2) } else { (s2, s1) };
    let mut u = 0.5 * (lo + hi);
    let mut res = f64::INFINITY;
    for _ in 0..NEWTON_MAX_ITER {
        let (s, ds) = scalar_sigma(kappa, beta, u);
        res = a * u + s - r;
        if res.abs() <= tol {
            return Ok(u);
        }
        if res > 0.0 {
            hi = hi.min(u);
        } else {
            lo = lo.max(u);
        }
        let mut next = u - res / (a + ds);
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        u = next;
    }
    let (s, _) = scalar_sigma(kappa, beta, u);
    let last = a * u + s - r;
    if last.abs() <= tol {
        Ok(u)
    } else {
        Err(res.abs().min(last.abs()))
    }
}

/// Closure for the electric update `η(E^{n+1}-E^n)/dt + J(Ē) = r`.
pub trait ElectricResponse: Send {
    /// Lower bound δ of the strong monotonicity of `J`.
    fn delta(&self) -> f64;
    /// `(ηE, E)`-type electric energy of the current state.
    fn electric_energy(&self, e: &Staggered) -> f64;
    /// Advances `e` in place given `r = curl H^{n+1/2} + F^{n+1/2}`.
    fn advance(&mut self, e: &mut Staggered, r: &Staggered, dt: f64) -> Result<()>;
    /// Displacement `D` for the current field, when it is a pointwise map.
    fn displacement(&self, _e: &Staggered) -> Option<Staggered> {
        None
    }
    /// Current `J(Ē)` for a completed step, when it is a pointwise map.
    fn current(&self, _e_old: &Staggered, _e_new: &Staggered) -> Option<Staggered> {
        None
    }
}

/// Diagonal η and componentwise saturating σ sampled per edge.
#[derive(Debug, Clone)]
pub struct PointwiseMedium {
    pub eta: Staggered,
    pub kappa: Staggered,
    pub beta: f64,
    pub delta: f64,
    weights: Staggered,
    grid: Box<YeeGrid>,
}

impl PointwiseMedium {
    pub fn new(grid: &YeeGrid, eta: Staggered, kappa: Staggered, beta: f64, delta: f64) -> Self {
        Self {
            eta,
            kappa,
            beta,
            delta,
            weights: grid.weight_field(Location::Edge),
            grid: Box::new(grid.clone()),
        }
    }
}

impl ElectricResponse for PointwiseMedium {
    fn delta(&self) -> f64 {
        self.delta
    }

    fn electric_energy(&self, e: &Staggered) -> f64 {
        (0..3)
            .map(|c| {
                det_sum(e.c[c].len(), |f| {
                    self.weights.c[c][f] * self.eta.c[c][f] * e.c[c][f] * e.c[c][f]
                })
            })
            .sum()
    }

    fn advance(&mut self, e: &mut Staggered, r: &Staggered, dt: f64) -> Result<()> {
        let beta = self.beta;
        for c in 0..3 {
            let eta = &self.eta.c[c];
            let kap = &self.kappa.c[c];
            let rc = &r.c[c];
            let worst = e.c[c]
                .par_iter_mut()
                .enumerate()
                .map(|(f, ev)| {
                    let a = 2.0 * eta[f] / dt;
                    match solve_scalar_monotone(a, kap[f], beta, a * *ev + rc[f]) {
                        Ok(u) => {
                            *ev = 2.0 * u - *ev;
                            None
                        }
                        Err(res) => Some((res, f)),
                    }
                })
                .reduce(
                    || None,
                    |x, y| match (x, y) {
                        (Some(a), Some(b)) => Some(if b.0 > a.0 || (b.0 == a.0 && b.1 < a.1) { b } else { a }),
                        (a, None) => a,
                        (None, b) => b,
                    },
                );
            if let Some((res, f)) = worst {
                let idx = YeeGrid::unflatten(&self.grid.e_dims[c], f);
                let pos = self.grid.position(Location::Edge, c, &idx);
                return Err(Error::numerical(format!(
                    "Newton failed for E_{c} at index {idx:?} (x = {pos:?}), residual {res:e}"
                )));
            }
        }
        Ok(())
    }

    fn displacement(&self, e: &Staggered) -> Option<Staggered> {
        let mut d = e.clone();
        for c in 0..3 {
            for (v, m) in d.c[c].iter_mut().zip(&self.eta.c[c]) {
                *v *= m;
            }
        }
        Some(d)
    }

    fn current(&self, e_old: &Staggered, e_new: &Staggered) -> Option<Staggered> {
        let mut j = e_old.clone();
        for c in 0..3 {
            for ((v, n), k) in j.c[c].iter_mut().zip(&e_new.c[c]).zip(&self.kappa.c[c]) {
                *v = scalar_sigma(*k, self.beta, 0.5 * (*v + n)).0;
            }
        }
        Some(j)
    }
}

/// Source `F(x, t)` with spatial factors precomputed per edge.
#[derive(Debug, Clone)]
pub struct SourceCache {
    terms: Vec<(usize, TimeProfile, Vec<f64>)>,
}

impl SourceCache {
    pub fn new(grid: &YeeGrid, f: &VectorFieldSpec) -> Self {
        let terms = f
            .terms
            .iter()
            .filter(|t| t.amplitude != 0.0)
            .map(|t| {
                let single = VectorFieldSpec {
                    terms: vec![t.clone()],
                };
                let s = grid.sample(Location::Edge, |c, x| single.spatial_component(c, x));
                (t.component, t.temporal.clone(), s.c[t.component].clone())
            })
            .collect();
        Self { terms }
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn fill(&self, t: f64, out: &mut Staggered) {
        for v in out.c.iter_mut() {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
        for (c, prof, s) in &self.terms {
            let a = prof.eval(t);
            out.c[*c].par_iter_mut().zip(s).for_each(|(o, v)| *o += a * v);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnergyRow {
    pub step: usize,
    pub t: f64,
    /// `(ηE^n, E^n)`
    pub ed: f64,
    /// `(μH^{n-1/2}, H^{n+1/2})`
    pub hb: f64,
    /// `δ Σ_{m<n} dt ‖Ē^m‖²`
    pub cum_dissipation: f64,
    /// `W^0 + (4/δ) Σ_{m<n} dt ‖F^{m+1/2}‖²`
    pub rhs_bound: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct SupNorms {
    pub e: f64,
    pub h: f64,
    pub curl_e: f64,
    pub dt_e: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct DivergenceReport {
    /// `max_n max|div B^{n+1/2}| / (max|B| / h_min)`
    pub div_b_rel: f64,
    /// `max_n max|div B^{n+1/2} - div B^0|`, relative as above
    pub div_b_drift_rel: f64,
    /// `max_n max|div D^n - div D^0|`, relative to `max|D|/h_min`
    pub div_d_drift_rel: f64,
    /// `max_n max|∂_t div D + div J - div F|`, relative to the largest term
    pub charge_balance_rel: f64,
    pub initial_div_b: f64,
    pub initial_div_d: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct Snapshot {
    pub step: usize,
    pub t: f64,
    pub e: Staggered,
    /// `H^{n+1/2}`
    pub h: Staggered,
}

/// What the observer sees after `E^n` is known.
pub struct StepView<'a> {
    pub step: usize,
    pub t: f64,
    pub e: &'a Staggered,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Store every `stride`-th state; `None` stores only the final one.
    pub stride: Option<usize>,
    pub track_divergence: bool,
}

#[derive(Debug, Clone)]
pub struct LeapfrogOutput {
    pub energy_log: Vec<EnergyRow>,
    pub snapshots: Vec<Snapshot>,
    pub final_e: Staggered,
    pub final_h: Staggered,
    pub sup: SupNorms,
    pub divergence: Option<DivergenceReport>,
}

fn rel_max(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Shared leapfrog loop used by the ε-solver and the homogenized solver.
#[allow(clippy::too_many_arguments)]
pub fn leapfrog(
    grid: &YeeGrid,
    mu: &Staggered,
    response: &mut dyn ElectricResponse,
    source: &SourceCache,
    e0: Staggered,
    h0: Staggered,
    opts: &RunOptions,
    observer: &mut dyn FnMut(&StepView),
) -> Result<LeapfrogOutput> {
    let dt = grid.spec.dt;
    let steps = grid.spec.steps();
    let delta = response.delta();
    if !(delta > 0.0) {
        return Err(Error::input(format!("monotonicity constant must be positive, got {delta}")));
    }
    let w_e = grid.weight_field(Location::Edge);
    let w_h = grid.weight_field(Location::Face);
    let wsum = |w: &Staggered, a: &Staggered, b: &Staggered, m: Option<&Staggered>| -> f64 {
        (0..3)
            .map(|c| {
                det_sum(a.c[c].len(), |f| {
                    let s = w.c[c][f] * a.c[c][f] * b.c[c][f];
                    match m {
                        Some(m) => s * m.c[c][f],
                        None => s,
                    }
                })
            })
            .sum()
    };
    let mut e = e0;
    grid.zero_inactive(&mut e);
    let mut ce = grid.zeros(Location::Face);
    let mut ch = grid.zeros(Location::Edge);
    let mut f = grid.zeros(Location::Edge);
    grid.curl_e(&e, &mut ce);
    // H^{-1/2} = H^0 + (dt/2) μ^{-1} curl E^0, so that H^{1/2} is the usual half step.
    let mut h_prev = h0.clone();
    let mut h = h0;
    for c in 0..3 {
        for ((hp, hn), (m, cv)) in h_prev.c[c]
            .iter_mut()
            .zip(h.c[c].iter_mut())
            .zip(mu.c[c].iter().zip(&ce.c[c]))
        {
            let inc = 0.5 * dt * cv / m;
            *hp += inc;
            *hn -= inc;
        }
    }
    let h_min = grid.spec.h_min();
    let mut div = opts.track_divergence.then(|| {
        let b0: Vec<f64> = {
            let mut b = h_prev.clone();
            for c in 0..3 {
                for (v, m) in b.c[c].iter_mut().zip(&mu.c[c]) {
                    *v *= m;
                }
            }
            grid.div_face(&b)
        };
        let d0 = response.displacement(&e).map(|d| grid.div_edge(&d));
        (b0, d0, DivergenceReport::default())
    });
    if let Some((b0, d0, rep)) = div.as_mut() {
        rep.initial_div_b = rel_max(b0);
        rep.initial_div_d = d0.as_ref().map(|d| rel_max(d)).unwrap_or(0.0);
    }

    let mut log = Vec::with_capacity(steps + 1);
    let mut snapshots = Vec::new();
    let mut sup = SupNorms::default();
    let w0_e = response.electric_energy(&e);
    let w0 = w0_e + wsum(&w_h, &h_prev, &h, Some(mu));
    let mut cum = 0.0;
    let mut src = 0.0;
    let mut ed = w0_e;
    let mut e_old = e.clone();
    for n in 0..=steps {
        let t = n as f64 * dt;
        if n > 0 {
            // H^{n+1/2} from H^{n-1/2}
            std::mem::swap(&mut h_prev, &mut h);
            grid.curl_e(&e, &mut ce);
            for c in 0..3 {
                h.c[c]
                    .par_iter_mut()
                    .zip(&h_prev.c[c])
                    .zip(mu.c[c].par_iter().zip(&ce.c[c]))
                    .for_each(|((hn, hp), (m, cv))| *hn = hp - dt * cv / m);
            }
        }
        let hb = wsum(&w_h, &h_prev, &h, Some(mu));
        sup.e = sup.e.max(wsum(&w_e, &e, &e, None).sqrt());
        sup.h = sup.h.max(wsum(&w_h, &h, &h, None).sqrt());
        sup.curl_e = sup.curl_e.max(wsum(&w_h, &ce, &ce, None).sqrt());
        log.push(EnergyRow {
            step: n,
            t,
            ed,
            hb,
            cum_dissipation: cum,
            rhs_bound: w0 + 4.0 / delta * src,
        });
        observer(&StepView { step: n, t, e: &e });
        if let Some((b0, d0, rep)) = div.as_mut() {
            let mut b = h.clone();
            for c in 0..3 {
                for (v, m) in b.c[c].iter_mut().zip(&mu.c[c]) {
                    *v *= m;
                }
            }
            let db = grid.div_face(&b);
            let scale = b.max_abs().max(f64::MIN_POSITIVE) / h_min;
            rep.div_b_rel = rep.div_b_rel.max(rel_max(&db) / scale);
            let drift = db.iter().zip(b0.iter()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
            rep.div_b_drift_rel = rep.div_b_drift_rel.max(drift / scale);
            if let (Some(d0), Some(d)) = (d0.as_ref(), response.displacement(&e)) {
                let dd = grid.div_edge(&d);
                let scale = d.max_abs().max(f64::MIN_POSITIVE) / h_min;
                let drift = dd.iter().zip(d0).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
                rep.div_d_drift_rel = rep.div_d_drift_rel.max(drift / scale);
            }
        }
        if let Some(s) = opts.stride {
            if s > 0 && n % s == 0 {
                snapshots.push(Snapshot {
                    step: n,
                    t,
                    e: e.clone(),
                    h: h.clone(),
                });
            }
        }
        if n == steps {
            break;
        }
        // E^{n+1}
        let th = t + 0.5 * dt;
        source.fill(th, &mut f);
        grid.curl_h(&h, &mut ch);
        let mut r = ch.clone();
        r.axpy(1.0, &f);
        e_old.c.clone_from(&e.c);
        response.advance(&mut e, &r, dt)?;
        let mut ebar = e.clone();
        ebar.axpy(1.0, &e_old);
        for v in ebar.c.iter_mut() {
            v.iter_mut().for_each(|x| *x *= 0.5);
        }
        cum += delta * dt * wsum(&w_e, &ebar, &ebar, None);
        src += dt * wsum(&w_e, &f, &f, None);
        ed = response.electric_energy(&e);
        let de = e.sub(&e_old);
        sup.dt_e = sup.dt_e.max(wsum(&w_e, &de, &de, None).sqrt() / dt);
        if let Some((_, _, rep)) = div.as_mut() {
            if let (Some(d_new), Some(d_old), Some(j)) = (
                response.displacement(&e),
                response.displacement(&e_old),
                response.current(&e_old, &e),
            ) {
                let a = grid.div_edge(&d_new.sub(&d_old));
                let b = grid.div_edge(&j);
                let fd = grid.div_edge(&f);
                let mut worst = 0.0f64;
                let mut scale = 0.0f64;
                for i in 0..a.len() {
                    let x = a[i] / dt;
                    worst = worst.max((x + b[i] - fd[i]).abs());
                    scale = scale.max(x.abs()).max(b[i].abs()).max(fd[i].abs());
                }
                if scale > 0.0 {
                    rep.charge_balance_rel = rep.charge_balance_rel.max(worst / scale);
                }
            }
        }
    }
    let divergence = div.map(|(_, _, mut rep)| {
        rep.pass = rep.div_b_drift_rel < 1e-10 && rep.charge_balance_rel < 1e-8;
        rep
    });
    Ok(LeapfrogOutput {
        energy_log: log,
        snapshots,
        final_e: e,
        final_h: h,
        sup,
        divergence,
    })
}

/// Per-DOF traces of μ, η, κ at one sample ω.
#[derive(Debug, Clone)]
pub struct Traces {
    pub mu: Staggered,
    pub eta: Staggered,
    pub kappa: Staggered,
}

#[derive(Debug, Clone)]
pub struct EpsProblem {
    pub grid: GridSpec,
    pub yee: YeeGrid,
    pub mu: CoefficientField,
    pub eta: CoefficientField,
    pub sigma: ConductivityLaw,
    pub ds: DynamicalSystemSpec,
    pub epsilon: f64,
    pub source: VectorFieldSpec,
    pub e0: VectorFieldSpec,
    pub h0: VectorFieldSpec,
    /// Traces frozen at construction when no coefficient depends on ω.
    pub cached: Option<Traces>,
    pub initial_div_b: f64,
    pub initial_div_d: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn init_problem(
    grid: GridSpec,
    mu: CoefficientField,
    eta: CoefficientField,
    sigma: ConductivityLaw,
    ds: DynamicalSystemSpec,
    epsilon: f64,
    source: VectorFieldSpec,
    e0: VectorFieldSpec,
    h0: VectorFieldSpec,
) -> Result<EpsProblem> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::input(format!("epsilon must be positive, got {epsilon}")));
    }
    ds.validate()?;
    if ds.dim != 3 {
        return Err(Error::input("the grid solvers need a 3-dimensional dynamical system"));
    }
    mu.require_diagonal("the Yee solver")?;
    eta.require_diagonal("the Yee solver")?;
    source.validate()?;
    e0.validate()?;
    h0.validate()?;
    let yee = YeeGrid::new(&grid)?;
    grid.check_cfl(eta.c2, mu.c2)?;
    check_source_regularity(&source, &grid)?;
    let omega_free = !mu.spec.depends_on_omega()
        && !eta.spec.depends_on_omega()
        && sigma.kappa_field().omega_axes() == [false; 3];
    let mut p = EpsProblem {
        grid,
        yee,
        mu,
        eta,
        sigma,
        ds,
        epsilon,
        source,
        e0,
        h0,
        cached: None,
        initial_div_b: 0.0,
        initial_div_d: 0.0,
    };
    let origin = OmegaPoint::origin(3);
    let tr = compute_traces(&p, &origin);
    let (e, h) = p.initial_fields();
    let b0 = mul(&h, &tr.mu);
    let d0 = mul(&e, &tr.eta);
    p.initial_div_b = rel_max(&p.yee.div_face(&b0));
    p.initial_div_d = rel_max(&p.yee.div_edge(&d0));
    if omega_free {
        p.cached = Some(tr);
    }
    Ok(p)
}

fn mul(a: &Staggered, m: &Staggered) -> Staggered {
    let mut out = a.clone();
    for c in 0..3 {
        for (v, k) in out.c[c].iter_mut().zip(&m.c[c]) {
            *v *= k;
        }
    }
    out
}

fn check_source_regularity(f: &VectorFieldSpec, grid: &GridSpec) -> Result<()> {
    let dt = grid.dt;
    for term in &f.terms {
        let vals: Vec<f64> = (0..=grid.steps()).map(|n| term.temporal.eval((n as f64 + 0.5) * dt)).collect();
        let ok = vals.iter().all(|v| v.is_finite())
            && vals.windows(3).all(|w| {
                let d1 = (w[1] - w[0]) / dt;
                let d2 = (w[2] - 2.0 * w[1] + w[0]) / (dt * dt);
                d1.is_finite() && d2.is_finite()
            });
        if !ok {
            return Err(Error::input("source time profile has unbounded discrete derivatives"));
        }
    }
    Ok(())
}

/// Diagonal traces of μ on faces and η, κ on edges at sample ω.
pub fn compute_traces(p: &EpsProblem, omega: &OmegaPoint) -> Traces {
    let g = &p.yee;
    let w = &omega.coords;
    let eps = p.epsilon;
    let ds = &p.ds;
    let mu = g.sample(Location::Face, |c, x| {
        let (wt, z) = trace_args(x, w, ds, eps);
        p.mu.eval(x, &wt, &z)[(c, c)]
    });
    // Edge samples include inactive PEC edges so that the arrays are positive everywhere.
    let full_edge = |f: &(dyn Fn(usize, &[f64; 3]) -> f64 + Sync)| -> Staggered {
        let mut s = g.zeros(Location::Edge);
        for c in 0..3 {
            let d = g.e_dims[c];
            s.c[c].par_iter_mut().enumerate().for_each(|(flat, v)| {
                *v = f(c, &g.position(Location::Edge, c, &YeeGrid::unflatten(&d, flat)));
            });
        }
        s
    };
    let eta = full_edge(&|c, x| {
        let (wt, z) = trace_args(x, w, ds, eps);
        p.eta.eval(x, &wt, &z)[(c, c)]
    });
    let kappa = full_edge(&|_, x| {
        let (wt, z) = trace_args(x, w, ds, eps);
        p.sigma.kappa(&wt, &z)
    });
    Traces { mu, eta, kappa }
}

impl EpsProblem {
    pub fn traces(&self, omega: &OmegaPoint) -> std::borrow::Cow<'_, Traces> {
        match &self.cached {
            Some(t) => std::borrow::Cow::Borrowed(t),
            None => std::borrow::Cow::Owned(compute_traces(self, omega)),
        }
    }

    pub fn depends_on_omega(&self) -> bool {
        self.cached.is_none()
    }

    pub fn initial_fields(&self) -> (Staggered, Staggered) {
        let e = self.yee.sample(Location::Edge, |c, x| self.e0.spatial_component(c, x));
        let h = self.yee.sample(Location::Face, |c, x| self.h0.spatial_component(c, x));
        (e, h)
    }

    pub fn medium(&self, traces: &Traces) -> PointwiseMedium {
        PointwiseMedium::new(
            &self.yee,
            traces.eta.clone(),
            traces.kappa.clone(),
            self.sigma.beta(),
            self.sigma.monotone_delta,
        )
    }
}

#[derive(Debug, Clone)]
pub struct EpsSolution {
    pub omega: OmegaPoint,
    pub epsilon: f64,
    pub energy_log: Vec<EnergyRow>,
    pub snapshots: Vec<Snapshot>,
    pub final_e: Staggered,
    pub final_h: Staggered,
    pub sup: SupNorms,
    pub divergence: Option<DivergenceReport>,
}

/// Runs the problem at sample ω.
pub fn run(problem: &EpsProblem, omega: &OmegaPoint, opts: &RunOptions) -> Result<EpsSolution> {
    run_observed(problem, omega, opts, &mut |_| {})
}

pub fn run_observed(
    problem: &EpsProblem,
    omega: &OmegaPoint,
    opts: &RunOptions,
    observer: &mut dyn FnMut(&StepView),
) -> Result<EpsSolution> {
    if omega.dim() != problem.ds.dim {
        return Err(Error::input(format!(
            "sample dimension {} does not match the dynamical system dimension {}",
            omega.dim(),
            problem.ds.dim
        )));
    }
    let tr = problem.traces(omega);
    let mut medium = problem.medium(&tr);
    let source = SourceCache::new(&problem.yee, &problem.source);
    let (e0, h0) = problem.initial_fields();
    let out = leapfrog(&problem.yee, &tr.mu, &mut medium, &source, e0, h0, opts, observer)?;
    Ok(EpsSolution {
        omega: omega.clone(),
        epsilon: problem.epsilon,
        energy_log: out.energy_log,
        snapshots: out.snapshots,
        final_e: out.final_e,
        final_h: out.final_h,
        sup: out.sup,
        divergence: out.divergence,
    })
}

/// Single leapfrog step on raw state, for callers driving their own loop.
pub fn step(
    problem: &EpsProblem,
    traces: &Traces,
    e: &mut Staggered,
    h_half: &mut Staggered,
    t: f64,
) -> Result<()> {
    let g = &problem.yee;
    let dt = problem.grid.dt;
    let mut ce = g.zeros(Location::Face);
    g.curl_e(e, &mut ce);
    for c in 0..3 {
        for ((hv, m), cv) in h_half.c[c].iter_mut().zip(&traces.mu.c[c]).zip(&ce.c[c]) {
            *hv -= dt * cv / m;
        }
    }
    let mut r = g.zeros(Location::Edge);
    g.curl_h(h_half, &mut r);
    let mut f = g.zeros(Location::Edge);
    SourceCache::new(g, &problem.source).fill(t + 0.5 * dt, &mut f);
    r.axpy(1.0, &f);
    problem.medium(traces).advance(e, &r, dt)
}

/// Derived `(D, B, J)` for a stored snapshot; `J` uses `E^n` pointwise.
pub fn derived_fields(traces: &Traces, beta: f64, snap: &Snapshot) -> (Staggered, Staggered, Staggered) {
    let d = mul(&snap.e, &traces.eta);
    let b = mul(&snap.h, &traces.mu);
    let mut j = snap.e.clone();
    for c in 0..3 {
        for (v, k) in j.c[c].iter_mut().zip(&traces.kappa.c[c]) {
            *v = scalar_sigma(*k, beta, *v).0;
        }
    }
    (d, b, j)
}

/// Charge `Q = div D` at grid nodes.
pub fn charge(grid: &YeeGrid, d: &Staggered) -> Vec<f64> {
    grid.div_edge(d)
}

#[derive(Debug, Clone, Serialize)]
pub struct EnergyReport {
    pub pass: bool,
    /// `max_n lhs_n / rhs_n` over steps with a nonzero right side.
    pub tightest_ratio: f64,
    pub first_failure: Option<usize>,
    pub steps: usize,
}

/// Checks `ED + HB + δΣdt‖Ē‖² ≤ W^0 + (4/δ)Σdt‖F‖²` at every logged step.
pub fn energy_check(log: &[EnergyRow]) -> EnergyReport {
    let scale = log.iter().fold(0.0f64, |m, r| m.max(r.rhs_bound.abs()));
    let slack = 1e-8 * scale;
    let mut ratio = 0.0f64;
    let mut first = None;
    for r in log {
        let lhs = r.ed + r.hb + r.cum_dissipation;
        if lhs > r.rhs_bound + slack && first.is_none() {
            first = Some(r.step);
        }
        if r.rhs_bound > 0.0 {
            ratio = ratio.max(lhs / r.rhs_bound);
        }
    }
    EnergyReport {
        pass: first.is_none(),
        tightest_ratio: ratio,
        first_failure: first,
        steps: log.len(),
    }
}

/// Discrete-L² norm of an edge field difference.
pub fn edge_l2_diff(grid: &YeeGrid, a: &Staggered, b: &Staggered) -> f64 {
    grid.norm(Location::Edge, &a.sub(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{build_coefficient_field, ConductivitySpec, FieldSpec};
    use crate::profile::Profile1D;
    use std::f64::consts::PI;

    fn scalar(v: f64) -> CoefficientField {
        build_coefficient_field(FieldSpec::scalar_constant(v), "c").unwrap()
    }

    fn mode_problem(n: usize, law: ConductivitySpec, source: VectorFieldSpec, dt: f64, t: f64) -> EpsProblem {
        // TE_{110}-like cavity mode: E_z = sin(πx) sin(πy)
        let e0 = VectorFieldSpec::single(
            2,
            1.0,
            [
                Profile1D::Sin { freq: PI, phase: 0.0 },
                Profile1D::Sin { freq: PI, phase: 0.0 },
                Profile1D::One,
            ],
            TimeProfile::One,
        );
        let mut g = GridSpec::cube(n, dt, t);
        g.periodic = [false, false, true];
        init_problem(
            g,
            scalar(1.0),
            scalar(1.0),
            ConductivityLaw::new(law).unwrap(),
            DynamicalSystemSpec::ergodic(3, 0),
            0.5,
            source,
            e0,
            VectorFieldSpec::zero(),
        )
        .unwrap()
    }

    #[test]
    fn scalar_newton_solves_monotone_equations() {
        for &(a, k, b, r) in &[(10.0, 2.0, 0.5, 3.0), (1e3, 1.0, 3.0, -7e2), (5.0, 1.5, -0.4, 0.2), (1.0, 1.0, 2.0, 1e6)] {
            let u = solve_scalar_monotone(a, k, b, r).unwrap();
            let res = a * u + scalar_sigma(k, b, u).0 - r;
            assert!(res.abs() <= 1e-12f64.max(8.0 * f64::EPSILON * r.abs()), "{res}");
        }
    }

    #[test]
    fn newton_converges_on_random_states() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100_000 {
            let a = rng.gen_range(1.0..1e4);
            let k = rng.gen_range(1.0..5.0);
            let b = rng.gen_range(-0.9..5.0);
            let r = rng.gen_range(-1e3..1e3);
            assert!(solve_scalar_monotone(a, k, b, r).is_ok());
        }
    }

    #[test]
    fn traces_constant_and_laminate() {
        let p = mode_problem(8, ConductivitySpec::linear(1.0), VectorFieldSpec::zero(), 0.01, 0.1);
        let tr = p.traces(&OmegaPoint::origin(3));
        assert!(tr.mu.c.iter().flatten().all(|&v| v == 1.0));
        assert!(tr.eta.c.iter().flatten().all(|&v| v == 1.0));

        let eta = build_coefficient_field(FieldSpec::isotropic_laminate(0, 0.5, 1.0, 3.0), "eta").unwrap();
        let g = GridSpec::cube(16, 0.01, 0.1);
        let p = init_problem(
            g,
            scalar(1.0),
            eta.clone(),
            ConductivityLaw::new(ConductivitySpec::linear(1.0)).unwrap(),
            DynamicalSystemSpec::ergodic(3, 0),
            0.25,
            VectorFieldSpec::zero(),
            VectorFieldSpec::zero(),
            VectorFieldSpec::zero(),
        )
        .unwrap();
        let w = OmegaPoint::new(vec![0.3, 0.1, 0.7]).unwrap();
        let tr = p.traces(&w);
        let ds = DynamicalSystemSpec::ergodic(3, 0);
        for c in 0..3 {
            let d = p.yee.e_dims[c];
            for (flat, v) in tr.eta.c[c].iter().enumerate() {
                let x = p.yee.position(Location::Edge, c, &YeeGrid::unflatten(&d, flat));
                let m = crate::coefficients::trace_eval(&eta, &x, &w, &ds, 0.25).unwrap();
                assert_eq!(*v, m[(c, c)]);
                assert!(*v >= eta.c2 && *v <= eta.c1);
            }
        }
    }

    #[test]
    fn cfl_violation_is_a_config_error() {
        let g = GridSpec::cube(8, 0.1, 1.0);
        let r = init_problem(
            g,
            scalar(1.0),
            scalar(1.0),
            ConductivityLaw::new(ConductivitySpec::linear(1.0)).unwrap(),
            DynamicalSystemSpec::ergodic(3, 0),
            0.5,
            VectorFieldSpec::zero(),
            VectorFieldSpec::zero(),
            VectorFieldSpec::zero(),
        );
        assert!(matches!(r, Err(Error::Config(m)) if m.contains("CFL")));
    }

    #[test]
    fn lossless_mode_conserves_energy() {
        // σ = 0 is outside the monotone class, so exercise the engine directly.
        let n = 16;
        let period = 2.0 / 2f64.sqrt();
        let dt = period / 400.0;
        let mut g = GridSpec::cube(n, dt, dt * 400.0);
        g.periodic = [false, false, true];
        let yee = YeeGrid::new(&g).unwrap();
        let ones_e = yee.sample(Location::Edge, |_, _| 1.0);
        let mut eta = ones_e.clone();
        for c in 0..3 {
            eta.c[c].iter_mut().for_each(|v| *v = 1.0);
        }
        let kappa = yee.zeros(Location::Edge);
        let mut med = PointwiseMedium::new(&yee, eta, kappa, 0.0, 1.0);
        let mut mu = yee.zeros(Location::Face);
        mu.c.iter_mut().for_each(|v| v.iter_mut().for_each(|x| *x = 1.0));
        let e0 = yee.sample(Location::Edge, |c, x| {
            if c == 2 {
                (PI * x[0]).sin() * (PI * x[1]).sin()
            } else {
                0.0
            }
        });
        let h0 = yee.zeros(Location::Face);
        let src = SourceCache::new(&yee, &VectorFieldSpec::zero());
        let out = leapfrog(&yee, &mu, &mut med, &src, e0, h0, &RunOptions::default(), &mut |_| {}).unwrap();
        let w0 = out.energy_log[0].ed + out.energy_log[0].hb;
        for r in &out.energy_log {
            assert!(((r.ed + r.hb) - w0).abs() < 1e-3 * w0);
        }
    }

    #[test]
    fn linear_conductivity_dissipates() {
        let p = mode_problem(8, ConductivitySpec::linear(1.0), VectorFieldSpec::zero(), 0.02, 1.0);
        let s = run(&p, &OmegaPoint::origin(3), &RunOptions::default()).unwrap();
        for w in s.energy_log.windows(2) {
            assert!(w[1].ed + w[1].hb < w[0].ed + w[0].hb);
        }
        assert!(energy_check(&s.energy_log).pass);
    }

    #[test]
    fn zero_data_stays_zero() {
        let mut p = mode_problem(8, ConductivitySpec::saturating(2.0, 0.5), VectorFieldSpec::zero(), 0.02, 0.4);
        p.e0 = VectorFieldSpec::zero();
        let s = run(&p, &OmegaPoint::origin(3), &RunOptions::default()).unwrap();
        assert_eq!(s.final_e.max_abs(), 0.0);
        assert!(s.energy_log.iter().all(|r| r.ed == 0.0 && r.hb == 0.0 && r.rhs_bound == 0.0));
        assert!(energy_check(&s.energy_log).pass);
    }

    #[test]
    fn deterministic_and_second_order() {
        let f = VectorFieldSpec::single(
            2,
            1.0,
            [
                Profile1D::Sin { freq: PI, phase: 0.0 },
                Profile1D::Sin { freq: PI, phase: 0.0 },
                Profile1D::One,
            ],
            TimeProfile::Sin { freq: 3.0 },
        );
        let t = 0.5;
        let runs: Vec<EpsSolution> = [0.02, 0.01, 0.005]
            .iter()
            .map(|&dt| {
                let p = mode_problem(8, ConductivitySpec::saturating(1.5, 0.5), f.clone(), dt, t);
                run(&p, &OmegaPoint::origin(3), &RunOptions::default()).unwrap()
            })
            .collect();
        let p = mode_problem(8, ConductivitySpec::saturating(1.5, 0.5), f.clone(), 0.02, t);
        let again = run(&p, &OmegaPoint::origin(3), &RunOptions::default()).unwrap();
        assert_eq!(again.energy_log, runs[0].energy_log);
        let g = &p.yee;
        let d1 = edge_l2_diff(g, &runs[0].final_e, &runs[1].final_e);
        let d2 = edge_l2_diff(g, &runs[1].final_e, &runs[2].final_e);
        let ratio = d1 / d2;
        assert!(ratio > 3.5 && ratio < 4.5, "ratio {ratio}");
    }

    #[test]
    fn energy_check_detects_corruption() {
        let f = VectorFieldSpec::single(0, 1.0, Default::default(), TimeProfile::Cos { freq: 2.0 });
        let p = mode_problem(8, ConductivitySpec::linear(1.0), f, 0.02, 0.5);
        let s = run(&p, &OmegaPoint::origin(3), &RunOptions::default()).unwrap();
        assert!(energy_check(&s.energy_log).pass);
        let mut bad = s.energy_log.clone();
        bad[7].ed *= 10.0;
        bad[7].hb *= 10.0;
        let r = energy_check(&bad);
        assert!(!r.pass);
        assert_eq!(r.first_failure, Some(7));
    }

    #[test]
    fn divergence_tracking() {
        let f = VectorFieldSpec::single(0, 1.0, [Profile1D::Sin { freq: PI, phase: 0.0 }, Profile1D::One, Profile1D::One], TimeProfile::Sin { freq: 4.0 });
        let p = mode_problem(8, ConductivitySpec::saturating(1.0, 0.5), f, 0.02, 0.4);
        let opts = RunOptions {
            stride: Some(1),
            track_divergence: true,
        };
        let s = run(&p, &OmegaPoint::origin(3), &opts).unwrap();
        let d = s.divergence.unwrap();
        assert!(d.div_b_rel < 1e-10 && d.charge_balance_rel < 1e-8, "{d:?}");
        assert_eq!(s.snapshots.len(), 21);
    }
}
