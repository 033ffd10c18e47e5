//! Scenario runner behind the command line: runs one scenario from a
//! configuration, writes its artifacts, a manifest and a PASS/FAIL summary.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::cell::{assemble_effective_laws, ClosureMode, EffectiveLaw, TensorExport};
use crate::coefficients::{
    build_coefficient_field_on, sample_check_field, verify_conductivity, CoefficientField, ConductivityLaw, Mat3,
};
use crate::config::{parse_config, RunConfig};
use crate::eps_solver::{energy_check, init_problem, run, EnergyReport, EpsProblem, RunOptions};
use crate::error::{Error, Result};
use crate::galerkin::{
    assemble_modes, implicit_solve, linear_trajectory, sw_affine_iterate, GalerkinSystem, Problem1D,
    SeparableNonlinearity, Trajectory,
};
use crate::hom_solver::{compare_solutions, init_hom, run_hom, HomProblem, HomSolution};
use crate::io;
use crate::probability::{measure_invariance, sample_omega, OmegaPoint};
use crate::twoscale::{convergence_study, fiber_spread};
use crate::yee::{GridSpec, Location, YeeGrid};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[value(rename_all = "snake_case")]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Validate,
    EpsRun,
    GalerkinRun,
    Cell,
    HomRun,
    Converge,
    CrossValidate,
}

impl Scenario {
    pub fn name(&self) -> &'static str {
        match self {
            Scenario::Validate => "validate",
            Scenario::EpsRun => "eps_run",
            Scenario::GalerkinRun => "galerkin_run",
            Scenario::Cell => "cell",
            Scenario::HomRun => "hom_run",
            Scenario::Converge => "converge",
            Scenario::CrossValidate => "cross_validate",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, pass: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            pass,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Outcome {
    pub scenario: Scenario,
    pub checks: Vec<Check>,
    pub outputs: Vec<String>,
}

impl Outcome {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// Process exit code: 0 pass, 1 property failure, 2 configuration or input
/// error, 3 numerical failure.
pub fn exit_code(result: &Result<Outcome>) -> i32 {
    match result {
        Ok(o) if o.pass() => 0,
        Ok(_) => 1,
        Err(Error::Numerical(_)) => 3,
        Err(_) => 2,
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
}

#[derive(Serialize)]
struct OutputEntry {
    file: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    scenario: &'a str,
    version: &'a str,
    config_sha256: String,
    seed: u64,
    workers: Option<usize>,
    /// Top-level sections absent from the input and filled with defaults.
    defaulted: Vec<&'a str>,
    config: &'a RunConfig,
    outputs: Vec<OutputEntry>,
}

const OPTIONAL_SECTIONS: &[&str] = &["workers", "data", "dynamics", "run", "cell", "hom", "twoscale", "galerkin"];

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Applies a `--seed` override to the raw configuration text.
fn with_seed(text: &str, seed: Option<u64>) -> Result<String> {
    let Some(seed) = seed else {
        return Ok(text.to_string());
    };
    let mut table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::config(format!("TOML syntax: {}", e.to_string().trim())))?;
    table.insert("seed".into(), toml::Value::Integer(seed as i64));
    toml::to_string(&table).map_err(|e| Error::config(e.to_string()))
}

/// Parses `config_text`, runs `scenario` and writes everything under `out`.
pub fn run_scenario(scenario: Scenario, config_text: &str, out: &Path, ov: Overrides) -> Result<Outcome> {
    let text = with_seed(config_text, ov.seed)?;
    let mut cfg = parse_config(&text)?;
    if ov.workers.is_some() {
        cfg.workers = ov.workers;
    }
    std::fs::create_dir_all(out).map_err(|e| Error::Io(std::io::Error::other(format!("{}: {e}", out.display()))))?;
    let mut ctx = Ctx {
        cfg: &cfg,
        out: out.to_path_buf(),
        outputs: Vec::new(),
        checks: Vec::new(),
    };
    match scenario {
        Scenario::Validate => ctx.validate()?,
        Scenario::EpsRun => ctx.eps_run()?,
        Scenario::GalerkinRun => ctx.galerkin_run()?,
        Scenario::Cell => ctx.cell()?,
        Scenario::HomRun => ctx.hom_run()?,
        Scenario::Converge => ctx.converge()?,
        Scenario::CrossValidate => ctx.cross_validate()?,
    }
    let outcome = Outcome {
        scenario,
        checks: ctx.checks,
        outputs: ctx.outputs,
    };
    write_summary(out, &outcome)?;
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
    let mut files = outcome.outputs.clone();
    files.push("summary.txt".into());
    let outputs = files
        .iter()
        .map(|f| {
            let bytes = std::fs::read(out.join(f))?;
            Ok(OutputEntry {
                file: f.clone(),
                sha256: sha256_hex(&bytes),
            })
        })
        .collect::<std::io::Result<Vec<_>>>()?;
    let manifest = Manifest {
        scenario: scenario.name(),
        version: VERSION,
        config_sha256: sha256_hex(config_text.as_bytes()),
        seed: cfg.seed,
        workers: cfg.workers,
        defaulted: OPTIONAL_SECTIONS.iter().copied().filter(|k| !table.contains_key(*k)).collect(),
        config: &cfg,
        outputs,
    };
    io::write_json(&out.join("manifest.json"), &manifest)?;
    Ok(outcome)
}

fn write_summary(out: &Path, o: &Outcome) -> Result<()> {
    let mut s = format!("scenario {}\n", o.scenario.name());
    for c in &o.checks {
        s += &format!("{} {}: {}\n", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    s += if o.pass() { "PASS\n" } else { "FAIL\n" };
    io::write_text(&out.join("summary.txt"), &s)
}

fn box_of(g: &GridSpec) -> [[f64; 2]; 3] {
    [0, 1, 2].map(|a| [g.origin[a], g.origin[a] + g.length[a]])
}

struct Fields {
    mu: CoefficientField,
    eta: CoefficientField,
    sigma: ConductivityLaw,
}

#[derive(Serialize)]
struct RunRecord {
    epsilon: f64,
    omega: Vec<f64>,
    energy: EnergyReport,
    divergence_pass: Option<bool>,
    sup_e: f64,
    sup_h: f64,
    files: Vec<String>,
}

#[derive(Serialize)]
struct TensorFile {
    version: &'static str,
    mode: ClosureMode,
    ergodic: bool,
    proportional: bool,
    resolution: crate::cell::CellResolution,
    fibers: Vec<Vec<f64>>,
    micro_bounds: MicroBounds,
    tensors: Vec<TensorExport>,
}

#[derive(Serialize)]
struct MicroBounds {
    mu: [f64; 2],
    eta: [f64; 2],
    kappa: [f64; 2],
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    out: PathBuf,
    outputs: Vec<String>,
    checks: Vec<Check>,
}

impl Ctx<'_> {
    fn path(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        self.out.join(name)
    }

    fn check(&mut self, name: impl Into<String>, pass: bool, detail: impl Into<String>) {
        self.checks.push(Check::new(name, pass, detail));
    }

    fn fields(&self, x_box: &[[f64; 2]; 3]) -> Result<Fields> {
        let c = self.cfg.require_coefficients()?;
        Ok(Fields {
            mu: build_coefficient_field_on(c.mu.clone(), "mu", x_box)?,
            eta: build_coefficient_field_on(c.eta.clone(), "eta", x_box)?,
            sigma: ConductivityLaw::new(c.sigma.clone())?,
        })
    }

    fn opts(&self) -> RunOptions {
        RunOptions {
            stride: self.cfg.run.stride,
            track_divergence: self.cfg.run.track_divergence,
        }
    }

    fn eps_problem(&self, f: &Fields, grid: GridSpec, eps: f64) -> Result<EpsProblem> {
        let d = &self.cfg.data;
        init_problem(
            grid,
            f.mu.clone(),
            f.eta.clone(),
            f.sigma.clone(),
            self.cfg.dynamical_system(),
            eps,
            d.source.clone(),
            d.e0.clone(),
            d.h0.clone(),
        )
    }

    fn law(&self, f: &Fields) -> Result<EffectiveLaw> {
        assemble_effective_laws(
            &f.mu,
            &f.eta,
            &f.sigma,
            &self.cfg.dynamical_system(),
            self.cfg.cell.resolution,
            self.cfg.cell.mode,
        )
    }

    fn hom_problem(&self, grid: GridSpec, law: EffectiveLaw) -> Result<HomProblem> {
        let d = &self.cfg.data;
        init_hom(grid, law, d.source.clone(), d.e0.clone(), d.h0.clone())
    }

    fn validate(&mut self) -> Result<()> {
        let cfg = self.cfg;
        let x_box = cfg.grid.as_ref().map(box_of).unwrap_or([[0.0, 1.0]; 3]);
        let f = self.fields(&x_box)?;
        let n = 10_000;
        let mut reports = serde_json::Map::new();
        for (name, field) in [("mu", &f.mu), ("eta", &f.eta)] {
            let r = sample_check_field(field, &x_box, n, cfg.seed);
            self.check(
                format!("{name}_bounds"),
                r.symmetry_violations == 0 && r.bound_violations == 0,
                format!(
                    "min eig {:.6} >= c2 {:.6}, max norm {:.6} <= c1 {:.6} over {n} samples",
                    r.observed_min_eig, field.c2, r.observed_max_norm, field.c1
                ),
            );
            reports.insert(name.into(), serde_json::to_value(&r).map_err(|e| Error::numerical(e.to_string()))?);
        }
        let v = verify_conductivity(&f.sigma, n, cfg.seed)?;
        self.check(
            "conductivity_structure",
            v.pass,
            format!(
                "delta_hat {:.6}, c1_hat {:.6}{}",
                v.monotonicity_estimate,
                v.lipschitz_estimate,
                if v.violations.is_empty() { String::new() } else { format!(", {}", v.violations.join("; ")) }
            ),
        );
        reports.insert("sigma".into(), serde_json::to_value(&v).map_err(|e| Error::numerical(e.to_string()))?);
        let ds = cfg.dynamical_system();
        let inv = measure_invariance(&ds, &[0.371, 0.613, 0.127], n)?;
        self.check(
            "measure_invariance",
            inv.pass,
            format!("max KS {:.4e} vs 3-sigma threshold {:.4e}", inv.ks_per_coord.iter().fold(0.0f64, |m, v| m.max(*v)), inv.threshold),
        );
        reports.insert("invariance".into(), serde_json::to_value(&inv).map_err(|e| Error::numerical(e.to_string()))?);
        if let Some(g) = &cfg.grid {
            let lim = g.cfl_limit(f.eta.c2, f.mu.c2);
            self.check("cfl", g.dt <= lim * (1.0 + 1e-12), format!("dt {} vs limit {lim:.6e}", g.dt));
        }
        let p = self.path("validate.json");
        io::write_json(&p, &reports)
    }

    fn eps_run(&mut self) -> Result<()> {
        let cfg = self.cfg;
        let grid = cfg.require_grid()?.clone();
        let f = self.fields(&box_of(&grid))?;
        if cfg.epsilon.is_empty() {
            return Err(Error::config("eps_run needs [epsilon] values"));
        }
        let omegas = sample_omega(&cfg.dynamical_system(), cfg.run.omega_samples);
        let opts = self.opts();
        let mut records = Vec::new();
        for (i, &eps) in cfg.epsilon.iter().enumerate() {
            let p = self.eps_problem(&f, grid.clone(), eps)?;
            for (s, w) in omegas.iter().enumerate() {
                let sol = run(&p, w, &opts)?;
                let stem = format!("eps{i}_s{s}");
                let energy = energy_check(&sol.energy_log);
                io::write_energy_csv(&self.path(&format!("{stem}_energy.csv")), &sol.energy_log)?;
                let stride = opts.stride.unwrap_or(grid.steps().max(1));
                io::write_snapshots(&self.out, &stem, &p.yee, stride, &sol.snapshots)?;
                self.outputs.push(format!("{stem}_E.bin"));
                self.outputs.push(format!("{stem}_H.bin"));
                self.check(
                    format!("energy_estimate[{stem}]"),
                    energy.pass,
                    format!("eps {eps}, tightest ratio {:.6}", energy.tightest_ratio),
                );
                if let Some(d) = &sol.divergence {
                    self.check(
                        format!("divergence[{stem}]"),
                        d.pass,
                        format!("div B {:.2e}, div D drift {:.2e}", d.div_b_rel, d.div_d_drift_rel),
                    );
                }
                records.push(RunRecord {
                    epsilon: eps,
                    omega: w.coords.clone(),
                    divergence_pass: sol.divergence.as_ref().map(|d| d.pass),
                    sup_e: sol.sup.e,
                    sup_h: sol.sup.h,
                    files: vec![format!("{stem}_energy.csv"), format!("{stem}_E.bin"), format!("{stem}_H.bin")],
                    energy,
                });
            }
        }
        let p = self.path("eps_run.json");
        io::write_json(&p, &records)
    }

    fn galerkin_system(&self, f: &Fields, omega: &OmegaPoint) -> Result<GalerkinSystem> {
        let cfg = self.cfg;
        let d = &cfg.data;
        let prob = Problem1D::from_fields(
            &f.mu,
            &f.eta,
            &f.sigma,
            &cfg.dynamical_system(),
            cfg.first_epsilon()?,
            omega,
            d.source.clone(),
            d.e0.clone(),
            d.h0.clone(),
        )
        .map_err(|e| Error::config(e.to_string()))?;
        let n = cfg.galerkin.modes;
        assemble_modes(n, &prob, cfg.galerkin.quadrature.unwrap_or(8 * n))
    }

    /// Reduced trajectory on `[0, t_final]`: exact propagator when linear, implicit Euler otherwise.
    fn galerkin_trajectory(&self, sys: &GalerkinSystem, t_final: f64) -> Result<(Trajectory, Option<bool>)> {
        let g = &self.cfg.galerkin;
        let extra = g.extra.as_ref().map(|x| SeparableNonlinearity::first_mode(sys.n, x.theta.clone()));
        if sys.beta == 0.0 && extra.is_none() {
            return Ok((linear_trajectory(sys, t_final, g.dt_out, &sys.delta_n)?, None));
        }
        let rep = implicit_solve(sys, extra.as_ref(), t_final, g.implicit_dt)?;
        Ok((rep.trajectory, Some(rep.energy_ok)))
    }

    fn galerkin_run(&mut self) -> Result<()> {
        let cfg = self.cfg;
        let grid = cfg.require_grid()?;
        let f = self.fields(&box_of(grid))?;
        let omega = sample_omega(&cfg.dynamical_system(), 1).remove(0);
        let sys = self.galerkin_system(&f, &omega)?;
        let t_final = grid.t_final;
        let (traj, energy_ok) = self.galerkin_trajectory(&sys, t_final)?;
        io::write_trajectory_csv(&self.path("galerkin_trajectory.csv"), &traj)?;
        let p = self.path("galerkin_modes.json");
        io::write_json(&p, &sys.metadata())?;
        if let Some(ok) = energy_ok {
            self.check("reduced_energy_estimate", ok, "implicit Euler energy inequality at every step");
        } else if !sys.has_source() {
            let p0 = &sys.delta_n;
            let e0 = sys.energy(p0);
            let e1 = sys.energy(traj.last());
            let ok = e1 <= e0 * (1.0 + 1e-12) + 1e-300;
            self.check("reduced_energy_decay", ok, format!("energy {e0:.6e} -> {e1:.6e}"));
        }
        if let (Some(x), true) = (&cfg.galerkin.extra, sys.beta == 0.0) {
            let nl = SeparableNonlinearity::first_mode(sys.n, x.theta.clone());
            let sw = sw_affine_iterate(&sys, &nl, x.beta, t_final, cfg.galerkin.dt_out)?;
            let diff = (sw.trajectory.last() - traj.last()).norm();
            let scale = traj.last().norm().max(1e-300);
            self.check(
                "affine_iteration_vs_implicit",
                diff <= 1e-3 * scale.max(1.0),
                format!("|psi_sw - psi_implicit| = {diff:.3e} at t = {t_final}"),
            );
        }
        Ok(())
    }

    fn tensor_file(&self, law: &EffectiveLaw) -> Result<TensorFile> {
        let k = law.sigma.kappa_field().bounds();
        Ok(TensorFile {
            version: VERSION,
            mode: law.mode,
            ergodic: law.ergodic,
            proportional: law.proportional,
            resolution: law.resolution,
            fibers: law.fibers.clone(),
            micro_bounds: MicroBounds {
                mu: [law.mu_field.c2, law.mu_field.c1],
                eta: [law.eta_field.c2, law.eta_field.c1],
                kappa: [k.0, k.1],
            },
            tensors: law.export()?,
        })
    }

    fn spectrum_checks(&mut self, law: &EffectiveLaw, tensors: &[TensorExport]) {
        let k = law.sigma.kappa_field().bounds();
        let mut worst = 0.0f64;
        let mut ok = true;
        for t in tensors {
            let (lo, hi) = match t.kind.as_str() {
                "mu_hom" => (law.mu_field.c2, law.mu_field.c1),
                "eta_hom" => (law.eta_field.c2, law.eta_field.c1),
                _ => (k.0, k.1),
            };
            let m = Mat3::from_fn(|i, j| t.matrix[i][j]);
            let sym = (m - m.transpose()).abs().max();
            let ev = m.symmetric_eigen().eigenvalues;
            let below = lo - ev.min();
            let above = ev.max() - hi;
            worst = worst.max(below).max(above);
            ok &= below <= 1e-6 && above <= 1e-6 && sym <= 1e-10;
        }
        self.check(
            "effective_spectrum",
            ok,
            format!("{} tensors, worst excursion outside [c2, c1] {worst:.3e}", tensors.len()),
        );
    }

    fn cell(&mut self) -> Result<()> {
        let cfg = self.cfg;
        let x_box = cfg.grid.as_ref().map(box_of).unwrap_or([[0.0, 1.0]; 3]);
        let f = self.fields(&x_box)?;
        let law = self.law(&f)?;
        let file = self.tensor_file(&law)?;
        self.spectrum_checks(&law, &file.tensors);
        let p = self.path("effective_tensors.json");
        io::write_json(&p, &file)
    }

    fn hom_run(&mut self) -> Result<()> {
        let cfg = self.cfg;
        let grid = cfg.hom_grid()?.clone();
        let f = self.fields(&box_of(&grid))?;
        let mut law = self.law(&f)?;
        let ds = cfg.dynamical_system();
        let sampled = !law.ergodic && cfg.run.omega_samples > 1;
        if sampled {
            let masked = ds.masked_coords();
            let fibers = sample_omega(&ds, cfg.run.omega_samples)
                .into_iter()
                .map(|w| masked.iter().map(|&c| w.coords[c]).collect())
                .collect();
            law = law.with_fibers(fibers)?;
        }
        let file = self.tensor_file(&law)?;
        self.spectrum_checks(&law, &file.tensors);
        let p = self.path("effective_tensors.json");
        io::write_json(&p, &file)?;
        let hp = self.hom_problem(grid.clone(), law)?;
        let opts = self.opts();
        let yee = &hp.yee;
        let mut sols: Vec<HomSolution> = Vec::new();
        for k in 0..hp.law.fiber_count() {
            let sol = run_hom(&hp, k, &opts)?;
            let stem = format!("hom_f{k}");
            io::write_energy_csv(&self.path(&format!("{stem}_energy.csv")), &sol.energy_log)?;
            let stride = opts.stride.unwrap_or(grid.steps().max(1));
            io::write_snapshots(&self.out, &stem, yee, stride, &sol.snapshots)?;
            self.outputs.push(format!("{stem}_E.bin"));
            self.outputs.push(format!("{stem}_H.bin"));
            let energy = energy_check(&sol.energy_log);
            self.check(
                format!("energy_estimate[{stem}]"),
                energy.pass,
                format!("fiber {:?}, tightest ratio {:.6}", sol.fiber, energy.tightest_ratio),
            );
            sols.push(sol);
        }
        let stats = fiber_statistics(yee, &sols);
        if law_depends_on_fiber(&f, &ds) && sols.len() > 1 {
            self.check(
                "fibers_distinct",
                stats.max_pair_rel > 1e-3,
                format!("max relative difference between fiber solutions {:.3e}", stats.max_pair_rel),
            );
        } else {
            self.check(
                "limit_deterministic",
                stats.relative_variance < 1e-6,
                format!(
                    "{} fiber(s), relative variance of the limit field {:.3e}",
                    sols.len(),
                    stats.relative_variance
                ),
            );
        }
        let p = self.path("hom_run.json");
        io::write_json(&p, &HomRunFile { solutions: &sols, stats })
    }

    fn converge(&mut self) -> Result<()> {
        let cfg = self.cfg;
        let ts = cfg
            .twoscale
            .as_ref()
            .ok_or_else(|| Error::config("converge needs a [twoscale] section"))?;
        let base = cfg.require_grid()?.clone();
        if cfg.epsilon.len() < 2 {
            return Err(Error::config("converge needs at least two [epsilon] values"));
        }
        if cfg.cell.mode != ClosureMode::Linear {
            return Err(Error::config("converge compares against the linear closure; set [cell] mode = \"linear\""));
        }
        let ppp = ts.points_per_period;
        if ppp < 4 {
            return Err(Error::config("converge needs points_per_period >= 4 to match the cell quadrature"));
        }
        let f = self.fields(&box_of(&base))?;
        let refined = |eps: f64| -> GridSpec {
            let mut g = base.clone();
            for a in 0..3 {
                if ts.refine_axes[a] {
                    let n = (g.length[a] * ppp as f64 / (eps * eps)).round() as usize;
                    g.cells[a] = g.cells[a].max(n);
                }
            }
            g
        };
        let hom_base = cfg.hom_grid()?.clone();
        let mut dt_min = base.dt.min(hom_base.dt);
        for &eps in &cfg.epsilon {
            dt_min = dt_min.min(refined(eps).cfl_limit(f.eta.c2, f.mu.c2));
        }
        let steps = (base.t_final / dt_min).ceil().max(1.0);
        let dt = base.t_final / steps;
        let mut res = cfg.cell.resolution;
        res.z = ppp;
        let law = assemble_effective_laws(&f.mu, &f.eta, &f.sigma, &cfg.dynamical_system(), res, ClosureMode::Linear)?;
        let mut hg = hom_base;
        hg.dt = dt;
        hg.t_final = base.t_final;
        let hom = self.hom_problem(hg, law)?;
        let build = |eps: f64| -> Result<EpsProblem> {
            let mut g = refined(eps);
            g.dt = dt;
            self.eps_problem(&f, g, eps)
        };
        let rep = convergence_study(&build, &cfg.epsilon, &hom, &ts.test_function, ts.samples)?;
        io::write_convergence_csv(&self.path("convergence.csv"), &rep.rows)?;
        let gaps: Vec<String> = rep.rows.iter().map(|r| format!("{:.3e}", r.gap)).collect();
        self.check(
            "gaps_strictly_decreasing",
            rep.strictly_decreasing,
            format!("gaps {} beyond 3x combined stderr, rate {:.3}", gaps.join(", "), rep.rate),
        );
        let last = rep.rows.last().expect("at least two rows");
        self.check(
            "final_gap_within_quadrature",
            rep.final_gap_within_quadrature,
            format!("final gap {:.3e} vs 2 x quadrature estimate {:.3e}", last.gap, 2.0 * rep.quadrature_estimate),
        );
        self.check(
            "control_gap_persists",
            rep.control_persistent,
            format!("control gap {:.3e} -> {:.3e}", rep.rows[0].control_gap, last.control_gap),
        );
        self.check(
            "resolution_gate",
            rep.gates_resolved,
            format!("common dt {dt:.6e}, {ppp} points per micro period"),
        );
        let p = self.path("convergence.json");
        io::write_json(&p, &ConvergeFile { dt, points_per_period: ppp, report: &rep })
    }

    fn cross_validate(&mut self) -> Result<()> {
        let cfg = self.cfg;
        let grid = cfg.require_grid()?.clone();
        let f = self.fields(&box_of(&grid))?;
        let eps = cfg.first_epsilon()?;
        let omega = sample_omega(&cfg.dynamical_system(), 1).remove(0);
        let mut report = serde_json::Map::new();
        let mut ran = false;
        let p = self.eps_problem(&f, grid.clone(), eps)?;
        let eps_sol = run(&p, &omega, &RunOptions::default())?;

        let one_d = grid.periodic[1] && grid.periodic[2] && !grid.periodic[0] && grid.origin[0] == 0.0 && grid.length[0] == 1.0;
        if one_d {
            if let Ok(sys) = self.galerkin_system(&f, &omega) {
                ran = true;
                let (traj, _) = self.galerkin_trajectory(&sys, grid.t_final)?;
                let (abs, rel) = galerkin_vs_yee(&p.yee, &eps_sol.final_e, &sys, traj.last());
                let tol = if sys.beta == 0.0 { 1e-3 } else { 1e-2 };
                self.check(
                    "galerkin_vs_eps",
                    rel <= tol,
                    format!("n = {}, relative L2 difference of E_y {rel:.3e} (tolerance {tol:e})", sys.n),
                );
                report.insert("galerkin_vs_eps".into(), serde_json::json!({ "modes": sys.n, "abs_l2": abs, "rel_l2": rel, "tolerance": tol }));
            }
        }
        let constant = |z: [bool; 3], w: [bool; 3]| !z.iter().chain(w.iter()).any(|b| *b);
        let micro_constant = constant(f.mu.spec.z_axes(), f.mu.spec.omega_axes())
            && constant(f.eta.spec.z_axes(), f.eta.spec.omega_axes())
            && constant(f.sigma.kappa_field().z_axes(), f.sigma.kappa_field().omega_axes());
        if micro_constant && f.sigma.is_linear() {
            ran = true;
            let law = assemble_effective_laws(
                &f.mu,
                &f.eta,
                &f.sigma,
                &cfg.dynamical_system(),
                cfg.cell.resolution,
                ClosureMode::Linear,
            )?;
            let hp = self.hom_problem(grid.clone(), law)?;
            let hs = run_hom(&hp, 0, &RunOptions::default())?;
            let c = compare_solutions(&p.yee, &eps_sol, &hs)?;
            let diff = c.e_max.max(c.h_max);
            self.check("hom_equals_eps", diff <= 1e-10, format!("max field difference {diff:.3e}"));
            report.insert("hom_vs_eps".into(), serde_json::to_value(c).map_err(|e| Error::numerical(e.to_string()))?);
        }
        if !ran {
            return Err(Error::config(
                "cross_validate needs either transversally invariant data on a grid periodic in y and z \
                 with PEC walls on [0, 1] in x, or micro-constant coefficients with a linear conductivity",
            ));
        }
        let path = self.path("cross_validate.json");
        io::write_json(&path, &report)
    }
}

/// Absolute and relative discrete L² differences of `E_y` along the x-axis.
pub fn galerkin_vs_yee(yee: &YeeGrid, e: &crate::yee::Staggered, sys: &GalerkinSystem, psi: &nalgebra::DVector<f64>) -> (f64, f64) {
    let d = yee.e_dims[1];
    let nx = d[0];
    let xs: Vec<f64> = (0..nx).map(|i| yee.position(Location::Edge, 1, &[i, 0, 0])[0]).collect();
    let gal = sys.e_field(psi, &xs);
    let h = yee.spec.h()[0];
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..nx {
        let w = if i == 0 || i == nx - 1 { 0.5 * h } else { h };
        // the line j = k = 0 occupies the first nx entries
        let v = e.c[1][i];
        num += w * (v - gal[i]).powi(2);
        den += w * gal[i].powi(2);
    }
    let rel = if den > 0.0 { (num / den).sqrt() } else { num.sqrt() };
    (num.sqrt(), rel)
}

fn law_depends_on_fiber(f: &Fields, ds: &crate::probability::DynamicalSystemSpec) -> bool {
    let masked = ds.masked_coords();
    let w = [f.mu.spec.omega_axes(), f.eta.spec.omega_axes(), f.sigma.kappa_field().omega_axes()];
    masked.iter().any(|&c| w.iter().any(|a| a[c]))
}

#[derive(Debug, Clone, Serialize)]
pub struct FiberStats {
    pub e_norms: Vec<f64>,
    /// Mean squared deviation from the fiber mean, relative to the largest squared norm.
    pub relative_variance: f64,
    pub max_pair_rel: f64,
    pub norm_spread: f64,
}

/// Spread of final electric fields across fibers.
pub fn fiber_statistics(yee: &YeeGrid, sols: &[HomSolution]) -> FiberStats {
    let e_norms: Vec<f64> = sols.iter().map(|s| yee.norm(Location::Edge, &s.final_e)).collect();
    let mag = e_norms.iter().fold(0.0f64, |m, v| m.max(*v));
    let n = sols.len();
    let mut mean = sols[0].final_e.clone();
    for s in &sols[1..] {
        mean.axpy(1.0, &s.final_e);
    }
    for c in 0..3 {
        for v in mean.c[c].iter_mut() {
            *v /= n as f64;
        }
    }
    let var = sols
        .iter()
        .map(|s| yee.norm(Location::Edge, &s.final_e.sub(&mean)).powi(2))
        .sum::<f64>()
        / n as f64;
    let mut max_pair = 0.0f64;
    for i in 0..n {
        for j in i + 1..n {
            max_pair = max_pair.max(yee.norm(Location::Edge, &sols[i].final_e.sub(&sols[j].final_e)));
        }
    }
    let rel = |v: f64| if mag > 0.0 { v / mag } else { 0.0 };
    FiberStats {
        relative_variance: if mag > 0.0 { var / (mag * mag) } else { 0.0 },
        max_pair_rel: rel(max_pair),
        norm_spread: fiber_spread(&e_norms),
        e_norms,
    }
}

#[derive(Serialize)]
struct HomRunFile<'a> {
    solutions: &'a [HomSolution],
    stats: FiberStats,
}

#[derive(Serialize)]
struct ConvergeFile<'a> {
    dt: f64,
    points_per_period: usize,
    report: &'a crate::twoscale::ConvergenceReport,
}
