//! Leapfrog solver for the homogenized system.
//!
//! Linear closure: the effective tensors are sampled on the Yee grid and the
//! ε-solver's pointwise medium is reused, so constant microstructure gives
//! bit-identical trajectories. Nonlinear closure: every active E edge owns an
//! electric cell state stepped with the midpoint rule, and the macroscopic
//! update solves `⟨η(e - e_old)/dt + σ(ē)⟩ = curl H + F` for the edge value.

use rayon::prelude::*;
use serde::Serialize;

use crate::cell::{ClosureMode, EffectiveLaw, ElectricCellState};
use crate::coefficients::Mat3;
use crate::eps_solver::{
    leapfrog, EnergyRow, ElectricResponse, EpsSolution, LeapfrogOutput, PointwiseMedium, RunOptions, Snapshot,
    SourceCache, StepView, SupNorms,
};
use crate::error::{Error, Result};
use crate::profile::VectorFieldSpec;
use crate::yee::{det_sum, GridSpec, Location, Staggered, YeeGrid};

#[derive(Debug, Clone)]
pub struct HomProblem {
    pub grid: GridSpec,
    pub yee: YeeGrid,
    pub law: EffectiveLaw,
    pub source: VectorFieldSpec,
    pub e0: VectorFieldSpec,
    pub h0: VectorFieldSpec,
}

pub fn init_hom(
    grid: GridSpec,
    law: EffectiveLaw,
    source: VectorFieldSpec,
    e0: VectorFieldSpec,
    h0: VectorFieldSpec,
) -> Result<HomProblem> {
    source.validate()?;
    e0.validate()?;
    h0.validate()?;
    let yee = YeeGrid::new(&grid)?;
    // effective spectra stay inside [c2, c1], so the micro bounds are safe for CFL
    grid.check_cfl(law.eta_field.c2, law.mu_field.c2)?;
    if law.mode == ClosureMode::Nonlinear {
        let active_w = law.ds.active_coords();
        let eta_w = law.eta_field.spec.omega_axes();
        let kap_w = law.sigma.kappa_field().omega_axes();
        if active_w.iter().any(|&a| eta_w[a] || kap_w[a]) {
            return Err(Error::config(
                "the nonlinear closure needs η and σ independent of the non-invariant ω coordinates",
            ));
        }
    }
    Ok(HomProblem {
        grid,
        yee,
        law,
        source,
        e0,
        h0,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct HomSolution {
    pub fiber: Vec<f64>,
    pub mode: ClosureMode,
    pub energy_log: Vec<EnergyRow>,
    #[serde(skip)]
    pub snapshots: Vec<Snapshot>,
    #[serde(skip)]
    pub final_e: Staggered,
    #[serde(skip)]
    pub final_h: Staggered,
    pub sup: SupNorms,
}

fn diag_entry(m: &Mat3, c: usize, what: &str) -> Result<f64> {
    let off: f64 = (0..3).filter(|&j| j != c).map(|j| m[(c, j)].abs() + m[(j, c)].abs()).sum();
    if off > 1e-8 * m.abs().max() {
        return Err(Error::config(format!(
            "{what} is not diagonal (off-diagonal mass {off:e}); the Yee grid needs diagonal tensors"
        )));
    }
    Ok(m[(c, c)])
}

/// Samples a tensor diagonal at face or edge positions; inactive edges included.
fn sample_tensor(
    yee: &YeeGrid,
    loc: Location,
    what: &str,
    f: &(dyn Fn(&[f64; 3]) -> Result<Mat3> + Sync),
) -> Result<Staggered> {
    let mut s = yee.zeros(loc);
    for c in 0..3 {
        let d = yee.dims(loc)[c];
        let vals: Vec<Result<f64>> = (0..s.c[c].len())
            .into_par_iter()
            .map(|flat| {
                let x = yee.position(loc, c, &YeeGrid::unflatten(&d, flat));
                f(&x).and_then(|m| diag_entry(&m, c, what))
            })
            .collect();
        s.c[c] = vals.into_iter().collect::<Result<_>>()?;
    }
    Ok(s)
}

/// Per-edge cell states for the nonlinear closure.
pub struct HmmResponse {
    states: [Vec<Option<ElectricCellState>>; 3],
    weights: Staggered,
    delta: f64,
}

impl HmmResponse {
    pub fn new(p: &HomProblem, fiber: usize, e0: &Staggered) -> Result<Self> {
        let yee = &p.yee;
        let omega = p.law.fiber_omega(fiber);
        let mut states: [Vec<Option<ElectricCellState>>; 3] = [vec![], vec![], vec![]];
        for c in 0..3 {
            let d = yee.e_dims[c];
            let built: Vec<Result<Option<ElectricCellState>>> = (0..e0.c[c].len())
                .into_par_iter()
                .map(|flat| {
                    let idx = YeeGrid::unflatten(&d, flat);
                    if !yee.e_active(c, &idx) {
                        return Ok(None);
                    }
                    let x = yee.position(Location::Edge, c, &idx);
                    let mut m = [0.0; 3];
                    m[c] = e0.c[c][flat];
                    p.law.electric_state(fiber, &x, m, &omega).map(Some)
                })
                .collect();
            states[c] = built.into_iter().collect::<Result<_>>()?;
        }
        Ok(Self {
            states,
            weights: yee.weight_field(Location::Edge),
            delta: p.law.delta,
        })
    }
}

impl ElectricResponse for HmmResponse {
    fn delta(&self) -> f64 {
        self.delta
    }

    /// Weighted sum of the cell energies; the argument is implied by the states.
    fn electric_energy(&self, _e: &Staggered) -> f64 {
        (0..3)
            .map(|c| {
                det_sum(self.states[c].len(), |f| match &self.states[c][f] {
                    Some(s) => self.weights.c[c][f] * s.energy(),
                    None => 0.0,
                })
            })
            .sum()
    }

    fn advance(&mut self, e: &mut Staggered, r: &Staggered, dt: f64) -> Result<()> {
        for c in 0..3 {
            let rc = &r.c[c];
            let res: Vec<Result<()>> = self.states[c]
                .par_iter_mut()
                .zip(e.c[c].par_iter_mut())
                .enumerate()
                .map(|(f, (st, ev))| match st {
                    Some(st) => {
                        *ev = st.step_to_flux(c, rc[f], dt).map_err(|err| {
                            Error::numerical(format!("cell closure failed on E component {c}, edge {f}: {err}"))
                        })?;
                        Ok(())
                    }
                    None => Ok(()),
                })
                .collect();
            res.into_iter().collect::<Result<Vec<()>>>()?;
        }
        Ok(())
    }
}

impl HomProblem {
    pub fn initial_fields(&self) -> (Staggered, Staggered) {
        let e = self.yee.sample(Location::Edge, |c, x| self.e0.spatial_component(c, x));
        let h = self.yee.sample(Location::Face, |c, x| self.h0.spatial_component(c, x));
        (e, h)
    }

    pub fn mu_trace(&self, fiber: usize) -> Result<Staggered> {
        sample_tensor(&self.yee, Location::Face, "mu_hom", &|x| self.law.mu_hom(fiber, x))
    }

    /// Pointwise medium of the linear closure.
    pub fn linear_medium(&self, fiber: usize) -> Result<PointwiseMedium> {
        let full = |f: &(dyn Fn(&[f64; 3]) -> Result<Mat3> + Sync), what: &str| -> Result<Staggered> {
            sample_tensor(&self.yee, Location::Edge, what, f)
        };
        let eta = full(&|x| self.law.eta_hom(fiber, x), "eta_hom")?;
        let kappa = full(&|x| self.law.kappa_hom(fiber, x), "sigma_hom")?;
        let delta = kappa.c.iter().flatten().fold(f64::INFINITY, |m, v| m.min(*v));
        Ok(PointwiseMedium::new(&self.yee, eta, kappa, 0.0, delta))
    }
}

pub fn run_hom(p: &HomProblem, fiber: usize, opts: &RunOptions) -> Result<HomSolution> {
    run_hom_observed(p, fiber, opts, &mut |_| {})
}

pub fn run_hom_observed(
    p: &HomProblem,
    fiber: usize,
    opts: &RunOptions,
    observer: &mut dyn FnMut(&StepView),
) -> Result<HomSolution> {
    if fiber >= p.law.fiber_count() {
        return Err(Error::input(format!("fiber index {fiber} out of range")));
    }
    let mu = p.mu_trace(fiber)?;
    let source = SourceCache::new(&p.yee, &p.source);
    let (e0, h0) = p.initial_fields();
    let out: LeapfrogOutput = match p.law.mode {
        ClosureMode::Linear => {
            let mut medium = p.linear_medium(fiber)?;
            leapfrog(&p.yee, &mu, &mut medium, &source, e0, h0, opts, observer)?
        }
        ClosureMode::Nonlinear => {
            let mut hmm = HmmResponse::new(p, fiber, &e0)?;
            let mut o = opts.clone();
            o.track_divergence = false;
            leapfrog(&p.yee, &mu, &mut hmm, &source, e0, h0, &o, observer)?
        }
    };
    Ok(HomSolution {
        fiber: p.law.fibers[fiber].clone(),
        mode: p.law.mode,
        energy_log: out.energy_log,
        snapshots: out.snapshots,
        final_e: out.final_e,
        final_h: out.final_h,
        sup: out.sup,
    })
}

/// One homogenized solution per fiber (a single one when ergodic).
pub fn run_hom_all(p: &HomProblem, opts: &RunOptions) -> Result<Vec<HomSolution>> {
    (0..p.law.fiber_count()).map(|f| run_hom(p, f, opts)).collect()
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Comparison {
    pub e_l2: f64,
    pub h_l2: f64,
    pub e_rel: f64,
    pub h_rel: f64,
    pub e_max: f64,
    pub h_max: f64,
}

/// Final-time differences between an ε-solution and a homogenized one on the same grid.
pub fn compare_solutions(grid: &YeeGrid, eps: &EpsSolution, hom: &HomSolution) -> Result<Comparison> {
    compare_fields(grid, (&eps.final_e, &eps.final_h), (&hom.final_e, &hom.final_h))
}

pub fn compare_fields(grid: &YeeGrid, a: (&Staggered, &Staggered), b: (&Staggered, &Staggered)) -> Result<Comparison> {
    if a.0.len() != b.0.len() || a.1.len() != b.1.len() {
        return Err(Error::input("solutions live on different grids"));
    }
    let de = a.0.sub(b.0);
    let dh = a.1.sub(b.1);
    let e_l2 = grid.norm(Location::Edge, &de);
    let h_l2 = grid.norm(Location::Face, &dh);
    let rel = |d: f64, n: f64| if n > 0.0 { d / n } else { d };
    Ok(Comparison {
        e_l2,
        h_l2,
        e_rel: rel(e_l2, grid.norm(Location::Edge, a.0)),
        h_rel: rel(h_l2, grid.norm(Location::Face, a.1)),
        e_max: de.max_abs(),
        h_max: dh.max_abs(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cell::{assemble_effective_laws, CellResolution};
    use crate::coefficients::{build_coefficient_field, ConductivityLaw, ConductivitySpec, FieldSpec};
    use crate::eps_solver::{energy_check, init_problem, run};
    use crate::probability::{DynamicalSystemSpec, OmegaPoint};
    use crate::profile::{Profile1D, TimeProfile};

    fn source() -> VectorFieldSpec {
        VectorFieldSpec::single(
            1,
            1.0,
            [
                Profile1D::Sin {
                    freq: std::f64::consts::PI,
                    phase: 0.0,
                },
                Profile1D::One,
                Profile1D::One,
            ],
            TimeProfile::Sin {
                freq: 2.0 * std::f64::consts::PI,
            },
        )
    }

    #[test]
    fn constant_micro_identity() {
        let mu = build_coefficient_field(FieldSpec::scalar_constant(1.5), "mu").unwrap();
        let eta = build_coefficient_field(FieldSpec::scalar_constant(2.0), "eta").unwrap();
        let law = ConductivityLaw::new(ConductivitySpec::linear(0.7)).unwrap();
        let ds = DynamicalSystemSpec::ergodic(3, 0);
        let grid = GridSpec::cube(8, 0.01, 0.2);
        let eff = assemble_effective_laws(&mu, &eta, &law, &ds, CellResolution::default(), ClosureMode::Linear).unwrap();
        let hp = init_hom(grid.clone(), eff, source(), VectorFieldSpec::zero(), VectorFieldSpec::zero()).unwrap();
        let hs = run_hom(&hp, 0, &RunOptions::default()).unwrap();
        let ep = init_problem(grid, mu, eta, law, ds, 0.1, source(), VectorFieldSpec::zero(), VectorFieldSpec::zero()).unwrap();
        let es = run(&ep, &OmegaPoint::origin(3), &RunOptions::default()).unwrap();
        let cmp = compare_solutions(&hp.yee, &es, &hs).unwrap();
        assert!(cmp.e_max < 1e-10 && cmp.h_max < 1e-10, "{cmp:?}");
        assert!(hs.final_e.max_abs() > 1e-4);
    }

    #[test]
    fn nonlinear_closure_keeps_energy_estimate() {
        let mu = build_coefficient_field(FieldSpec::scalar_constant(1.0), "mu").unwrap();
        let eta = build_coefficient_field(FieldSpec::isotropic_laminate(1, 0.5, 1.0, 2.0), "eta").unwrap();
        let law = ConductivityLaw::new(ConductivitySpec::saturating(1.0, 0.5)).unwrap();
        let ds = DynamicalSystemSpec::ergodic(3, 0);
        let mut grid = GridSpec::cube(8, 0.01, 0.2);
        grid.periodic = [false, true, true];
        let res = CellResolution {
            z: 16,
            ..Default::default()
        };
        let eff = assemble_effective_laws(&mu, &eta, &law, &ds, res, ClosureMode::Nonlinear).unwrap();
        let hp = init_hom(grid, eff, source(), VectorFieldSpec::zero(), VectorFieldSpec::zero()).unwrap();
        let hs = run_hom(&hp, 0, &RunOptions::default()).unwrap();
        let rep = energy_check(&hs.energy_log);
        assert!(rep.pass, "{rep:?}");
        assert!(hs.final_e.max_abs() > 1e-4);
    }
}
