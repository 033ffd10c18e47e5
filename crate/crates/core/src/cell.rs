//! Periodic cell problems and effective constitutive laws.
//!
//! Nodal finite differences on the unit cube with periodic wrap: potentials
//! live on grid nodes, gradients on edges, coefficients on cells. An edge
//! carries the arithmetic mean of the cells around it, so grid-aligned
//! laminates keep their exact phase laws. An axis with a single node carries
//! no variation, so laminates and fibers are solved at 1D or 2D cost.
//!
//! The same operator with per-axis derivative scales `s_a` serves the torus
//! realization of Λ, where the stochastic gradient is `s_a ∂_a` with `s_a`
//! the diagonal of the shift matrix (zero on invariant coordinates).

use std::collections::HashMap;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::{scalar_sigma, CoefficientField, ConductivityLaw, Mat3, ScalarFieldSpec};
use crate::error::{Error, Result};
use crate::probability::DynamicalSystemSpec;

/// Periodic grid on `[0,1)^3`; axes with one cell sit at `fixed[a]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellGrid {
    pub n: [usize; 3],
    pub fixed: [f64; 3],
}

impl CellGrid {
    pub fn cube(r: usize) -> Result<Self> {
        Self::new([r; 3])
    }

    pub fn new(n: [usize; 3]) -> Result<Self> {
        if let Some(a) = (0..3).find(|&a| n[a] != 1 && n[a] < 4) {
            return Err(Error::input(format!(
                "cell resolution along axis {a} is {}; use 1 (no variation) or at least 4",
                n[a]
            )));
        }
        Ok(Self { n, fixed: [0.5; 3] })
    }

    /// `r` cells along the axes flagged in `vary`, one elsewhere.
    pub fn adapted(r: usize, vary: [bool; 3]) -> Result<Self> {
        Self::new(vary.map(|v| if v { r } else { 1 }))
    }

    pub fn len(&self) -> usize {
        self.n[0] * self.n[1] * self.n[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn h(&self) -> [f64; 3] {
        self.n.map(|k| 1.0 / k as f64)
    }

    #[inline]
    pub fn idx(&self, i: usize) -> [usize; 3] {
        [i % self.n[0], (i / self.n[0]) % self.n[1], i / (self.n[0] * self.n[1])]
    }

    #[inline]
    pub fn flat(&self, p: [usize; 3]) -> usize {
        p[0] + self.n[0] * (p[1] + self.n[1] * p[2])
    }

    #[inline]
    pub fn coord(&self, a: usize, k: usize) -> f64 {
        if self.n[a] == 1 {
            self.fixed[a]
        } else {
            (k as f64 + 0.5) / self.n[a] as f64
        }
    }

    pub fn center(&self, i: usize) -> [f64; 3] {
        let p = self.idx(i);
        [0, 1, 2].map(|a| self.coord(a, p[a]))
    }

    /// Grid node `i`, where the potentials live.
    pub fn node(&self, i: usize) -> [f64; 3] {
        let p = self.idx(i);
        [0, 1, 2].map(|a| if self.n[a] == 1 { self.fixed[a] } else { p[a] as f64 / self.n[a] as f64 })
    }

    /// Midpoint of the edge from node `i` along `+a`.
    pub fn face(&self, a: usize, i: usize) -> [f64; 3] {
        let mut c = self.node(i);
        if self.n[a] > 1 {
            c[a] = (self.idx(i)[a] as f64 + 0.5) / self.n[a] as f64;
        }
        c
    }

    #[inline]
    pub fn up(&self, i: usize, a: usize) -> usize {
        let mut p = self.idx(i);
        p[a] = (p[a] + 1) % self.n[a];
        self.flat(p)
    }

    #[inline]
    pub fn down(&self, i: usize, a: usize) -> usize {
        let mut p = self.idx(i);
        p[a] = (p[a] + self.n[a] - 1) % self.n[a];
        self.flat(p)
    }
}

/// Edge coefficients: component `a` of the cells around each `a`-edge, averaged.
/// Cell `i` spans from node `i` to node `i + (1,1,1)`.
fn edge_average(grid: &CellGrid, cells: &[[f64; 3]]) -> [Vec<f64>; 3] {
    [0, 1, 2].map(|a| {
        let (b, c) = ((a + 1) % 3, (a + 2) % 3);
        let sb: &[usize] = if grid.n[b] > 1 { &[0, 1] } else { &[0] };
        let sc: &[usize] = if grid.n[c] > 1 { &[0, 1] } else { &[0] };
        let w = 1.0 / (sb.len() * sc.len()) as f64;
        (0..grid.len())
            .map(|i| {
                let mut v = 0.0;
                for &db in sb {
                    for &dc in sc {
                        let mut j = i;
                        if db == 1 {
                            j = grid.down(j, b);
                        }
                        if dc == 1 {
                            j = grid.down(j, c);
                        }
                        v += cells[j][a];
                    }
                }
                v * w
            })
            .collect()
    })
}

/// `-Σ_a s_a ∂_a (c_a s_a ∂_a φ)` on faces; SPD on zero-mean functions.
#[derive(Debug, Clone)]
struct FaceOperator {
    grid: CellGrid,
    scale: [f64; 3],
    coef: [Vec<f64>; 3],
    up: [Vec<usize>; 3],
    down: [Vec<usize>; 3],
}

impl FaceOperator {
    fn new(grid: &CellGrid, scale: [f64; 3], coef: [Vec<f64>; 3]) -> Self {
        let n = grid.len();
        let up = [0, 1, 2].map(|a| (0..n).map(|i| grid.up(i, a)).collect());
        let down = [0, 1, 2].map(|a| (0..n).map(|i| grid.down(i, a)).collect());
        Self {
            grid: grid.clone(),
            scale,
            coef,
            up,
            down,
        }
    }

    fn with_coef(&self, coef: [Vec<f64>; 3]) -> Self {
        Self {
            grid: self.grid.clone(),
            scale: self.scale,
            coef,
            up: self.up.clone(),
            down: self.down.clone(),
        }
    }

    fn active(&self, a: usize) -> bool {
        self.grid.n[a] > 1 && self.scale[a] != 0.0
    }

    fn apply(&self, phi: &[f64], out: &mut [f64]) {
        let h = self.grid.h();
        out.par_iter_mut().enumerate().for_each(|(i, o)| {
            let mut s = 0.0;
            for a in 0..3 {
                if !self.active(a) {
                    continue;
                }
                let k = self.scale[a] * self.scale[a] / (h[a] * h[a]);
                let (u, d) = (self.up[a][i], self.down[a][i]);
                s -= k * (self.coef[a][i] * (phi[u] - phi[i]) - self.coef[a][d] * (phi[i] - phi[d]));
            }
            *o = s;
        });
    }

    fn diag(&self) -> Vec<f64> {
        let h = self.grid.h();
        (0..self.grid.len())
            .map(|i| {
                let mut s = 0.0;
                for a in 0..3 {
                    if self.active(a) {
                        let k = self.scale[a] * self.scale[a] / (h[a] * h[a]);
                        s += k * (self.coef[a][i] + self.coef[a][self.down[a][i]]);
                    }
                }
                s
            })
            .collect()
    }

    /// Discrete divergence `Σ_a s_a (q_a(i) - q_a(i-e_a)) / h_a` of a face field.
    fn div(&self, q: &[Vec<f64>; 3]) -> Vec<f64> {
        let h = self.grid.h();
        (0..self.grid.len())
            .into_par_iter()
            .map(|i| {
                let mut s = 0.0;
                for a in 0..3 {
                    if self.active(a) {
                        s += self.scale[a] * (q[a][i] - q[a][self.down[a][i]]) / h[a];
                    }
                }
                s
            })
            .collect()
    }

    /// Face gradient `s_a (φ(i+e_a) - φ(i)) / h_a`.
    fn grad(&self, phi: &[f64]) -> [Vec<f64>; 3] {
        let h = self.grid.h();
        [0, 1, 2].map(|a| {
            if !self.active(a) {
                return vec![0.0; phi.len()];
            }
            (0..phi.len())
                .map(|i| self.scale[a] * (phi[self.up[a][i]] - phi[i]) / h[a])
                .collect()
        })
    }
}

fn project_mean(v: &mut [f64]) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= m);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Jacobi-preconditioned CG on zero-mean functions. Returns iterations.
fn pcg(op: &FaceOperator, b: &[f64], x: &mut [f64], rel_tol: f64) -> Result<usize> {
    let n = b.len();
    let mut rhs = b.to_vec();
    project_mean(&mut rhs);
    let bnorm = dot(&rhs, &rhs).sqrt();
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(0);
    }
    let d = op.diag();
    let dinv: Vec<f64> = d.iter().map(|&v| if v > 0.0 { 1.0 / v } else { 1.0 }).collect();
    project_mean(x);
    let mut ax = vec![0.0; n];
    op.apply(x, &mut ax);
    let mut r: Vec<f64> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let mut z: Vec<f64> = r.iter().zip(&dinv).map(|(r, d)| r * d).collect();
    project_mean(&mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    let max_iter = 10 * n.max(10);
    for it in 0..max_iter {
        if dot(&r, &r).sqrt() <= rel_tol * bnorm {
            return Ok(it);
        }
        op.apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::numerical("cell operator is not positive definite (non-coercive input)"));
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        for i in 0..n {
            z[i] = r[i] * dinv[i];
        }
        project_mean(&mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    if dot(&r, &r).sqrt() <= rel_tol * bnorm {
        return Ok(max_iter);
    }
    Err(Error::numerical(format!(
        "cell CG did not converge within {max_iter} iterations (non-coercive input?)"
    )))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellLevel {
    ZCell,
    OmegaCell,
}

/// Potentials `φ_k` of the unit-direction cell problems.
#[derive(Debug, Clone)]
pub struct CorrectorField {
    pub level: CellLevel,
    pub grid: CellGrid,
    pub scale: [f64; 3],
    pub phi: [Vec<f64>; 3],
    /// Relative weak-form residual per direction.
    pub residual: [f64; 3],
    pub zero_mean: bool,
    op: FaceOperator,
}

impl CorrectorField {
    /// Face gradient of `φ_k`: component `a` on `a`-faces.
    pub fn gradient(&self, k: usize) -> [Vec<f64>; 3] {
        self.op.grad(&self.phi[k])
    }

    /// Local field `e_k + ∇φ_k` on faces.
    pub fn local_field(&self, k: usize) -> [Vec<f64>; 3] {
        let mut g = self.gradient(k);
        g[k].iter_mut().for_each(|v| *v += 1.0);
        g
    }

    /// Largest face-gradient magnitude over all directions.
    pub fn max_gradient(&self) -> f64 {
        (0..3)
            .flat_map(|k| self.gradient(k))
            .flat_map(|v| v.into_iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// `∫ f(a, z) (e_k + ∇φ_k)_a dz` summed over components, face quadrature.
    pub fn integrate(&self, k: usize, f: impl Fn(usize, &[f64; 3]) -> f64) -> f64 {
        let e = self.local_field(k);
        let n = self.grid.len();
        (0..3)
            .map(|a| (0..n).map(|i| f(a, &self.grid.face(a, i)) * e[a][i]).sum::<f64>() / n as f64)
            .sum()
    }

    pub fn max_abs_mean(&self) -> f64 {
        self.phi
            .iter()
            .map(|p| (p.iter().sum::<f64>() / p.len() as f64).abs())
            .fold(0.0, f64::max)
    }

    /// Face coefficients used by the solve.
    pub fn face_coefficients(&self) -> &[Vec<f64>; 3] {
        &self.op.coef
    }
}

#[derive(Debug, Clone)]
pub struct CellSolution {
    pub corrector: CorrectorField,
    /// Homogenized matrix with columns `⟨c (e_k + ∇φ_k)⟩`.
    pub matrix: Mat3,
    pub iterations: usize,
}

impl CellSolution {
    pub fn max_residual(&self) -> f64 {
        self.corrector.residual.iter().copied().fold(0.0, f64::max)
    }
}

/// Unit-direction cell problems for a diagonal coefficient sampled at cell centers.
pub fn solve_cell_diagonal(
    grid: &CellGrid,
    scale: [f64; 3],
    level: CellLevel,
    coef_at: impl Fn(&[f64; 3]) -> [f64; 3] + Sync,
) -> Result<CellSolution> {
    let n = grid.len();
    let cells: Vec<[f64; 3]> = (0..n).into_par_iter().map(|i| coef_at(&grid.center(i))).collect();
    if let Some(c) = cells.iter().find(|c| c.iter().any(|v| !(*v > 0.0))) {
        return Err(Error::numerical(format!("cell coefficient is not positive: {c:?}")));
    }
    let coef = edge_average(grid, &cells);
    let op = FaceOperator::new(grid, scale, coef);
    let mut phi: [Vec<f64>; 3] = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let mut residual = [0.0; 3];
    let mut iterations = 0;
    let mut matrix = Mat3::zeros();
    for k in 0..3 {
        // div(c (e_k + s∇φ)) = 0, i.e. Aφ = div(c e_k)
        let mut unit: [Vec<f64>; 3] = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        unit[k] = op.coef[k].clone();
        let b = op.div(&unit);
        if op.active(k) || b.iter().any(|v| *v != 0.0) {
            iterations += pcg(&op, &b, &mut phi[k], 1e-13)?;
        }
        project_mean(&mut phi[k]);
        let mut aphi = vec![0.0; n];
        op.apply(&phi[k], &mut aphi);
        let bn = dot(&b, &b).sqrt();
        let rn = aphi.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let diag_scale = op.diag().iter().fold(0.0f64, |m, v| m.max(*v));
        residual[k] = if bn > 0.0 { rn / bn } else { rn / diag_scale.max(1.0) };
        let g = op.grad(&phi[k]);
        for a in 0..3 {
            let delta = if a == k { 1.0 } else { 0.0 };
            matrix[(a, k)] = (0..n).map(|i| op.coef[a][i] * (delta + g[a][i])).sum::<f64>() / n as f64;
        }
    }
    Ok(CellSolution {
        corrector: CorrectorField {
            level,
            grid: grid.clone(),
            scale,
            phi,
            residual,
            zero_mean: true,
            op,
        },
        matrix,
        iterations,
    })
}

/// z-cell problem for μ at fixed `(x, ω)`.
pub fn solve_magnetic_cell(mu: &CoefficientField, x: &[f64; 3], omega: &[f64], grid: &CellGrid) -> Result<CellSolution> {
    mu.require_diagonal("the cell solver")?;
    solve_cell_diagonal(grid, [1.0; 3], CellLevel::ZCell, |z| mu.diag(x, omega, z))
}

/// z-cell problem for a positive scalar field (κ) at fixed ω.
pub fn solve_scalar_cell(field: &ScalarFieldSpec, omega: &[f64], grid: &CellGrid) -> Result<CellSolution> {
    solve_cell_diagonal(grid, [1.0; 3], CellLevel::ZCell, |z| [field.eval(omega, z); 3])
}

/// Result of the torus-level problem: one matrix, or one per invariant fiber.
#[derive(Debug, Clone)]
pub enum OmegaCellResult {
    Ergodic(CellSolution),
    Fibers(Vec<(Vec<f64>, CellSolution)>),
}

impl OmegaCellResult {
    pub fn matrices(&self) -> Vec<Mat3> {
        match self {
            OmegaCellResult::Ergodic(s) => vec![s.matrix],
            OmegaCellResult::Fibers(f) => f.iter().map(|(_, s)| s.matrix).collect(),
        }
    }
}

/// Equispaced invariant-coordinate values (`per_axis` per masked axis).
pub fn default_fibers(ds: &DynamicalSystemSpec, per_axis: usize) -> Vec<Vec<f64>> {
    let masked = ds.masked_coords();
    let mut out = vec![vec![]];
    for _ in &masked {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                (0..per_axis).map(move |i| {
                    let mut p = prefix.clone();
                    p.push((i as f64 + 0.5) / per_axis as f64);
                    p
                })
            })
            .collect();
    }
    out
}

fn diag_of(m: &Mat3, what: &str) -> Result<[f64; 3]> {
    let off = m[(0, 1)].abs() + m[(0, 2)].abs() + m[(1, 2)].abs() + m[(1, 0)].abs() + m[(2, 0)].abs() + m[(2, 1)].abs();
    if off > 1e-8 * m.abs().max() {
        return Err(Error::config(format!(
            "{what}: the torus cell solver needs diagonal input, off-diagonal mass {off:e}"
        )));
    }
    Ok([m[(0, 0)], m[(1, 1)], m[(2, 2)]])
}

/// Cell problem on the torus realization of Λ with the stochastic gradient.
///
/// `vary` flags the torus axes along which the map depends on ω; `fibers`
/// lists invariant-coordinate values for non-ergodic systems (ignored when
/// ergodic).
pub fn solve_omega_cell(
    map: &(dyn Fn(&[f64]) -> Result<Mat3> + Sync),
    ds: &DynamicalSystemSpec,
    resolution: usize,
    vary: [bool; 3],
    fibers: &[Vec<f64>],
) -> Result<OmegaCellResult> {
    if ds.dim != 3 {
        return Err(Error::input("the torus cell problem needs a 3-dimensional dynamical system"));
    }
    if !ds.is_diagonal_shift() {
        return Err(Error::config("the torus cell problem needs a diagonal shift matrix"));
    }
    let scale = [0, 1, 2].map(|a| if ds.is_masked(a) { 0.0 } else { ds.shift(a, a) });
    let n = [0, 1, 2].map(|a| if vary[a] && scale[a] != 0.0 { resolution } else { 1 });
    let base = CellGrid::new(n)?;
    let masked = ds.masked_coords();
    let solve_on = |grid: &CellGrid| -> Result<CellSolution> {
        let vals: Vec<Result<[f64; 3]>> = (0..grid.len())
            .into_par_iter()
            .map(|i| map(&grid.center(i)).and_then(|m| diag_of(&m, "torus cell input")))
            .collect();
        let vals: Vec<[f64; 3]> = vals.into_iter().collect::<Result<_>>()?;
        let lookup: HashMap<[u64; 3], [f64; 3]> = (0..grid.len())
            .map(|i| (grid.center(i).map(f64::to_bits), vals[i]))
            .collect();
        solve_cell_diagonal(grid, scale, CellLevel::OmegaCell, |w| lookup[&w.map(f64::to_bits)])
    };
    if masked.is_empty() {
        return Ok(OmegaCellResult::Ergodic(solve_on(&base)?));
    }
    let mut out = Vec::with_capacity(fibers.len());
    for f in fibers {
        if f.len() != masked.len() {
            return Err(Error::input(format!(
                "fiber {f:?} has {} coordinates, expected {}",
                f.len(),
                masked.len()
            )));
        }
        let mut g = base.clone();
        for (c, v) in masked.iter().zip(f) {
            g.fixed[*c] = *v;
        }
        out.push((f.clone(), solve_on(&g)?));
    }
    Ok(OmegaCellResult::Fibers(out))
}

/// Face coefficients for the electric cell evolution at fixed `(x, ω)`.
#[derive(Debug, Clone)]
pub struct ElectricCellState {
    op: FaceOperator,
    eta_f: [Vec<f64>; 3],
    kappa_f: [Vec<f64>; 3],
    beta: f64,
    /// Corrector potential.
    pub phi: Vec<f64>,
    /// Macroscopic field the corrector belongs to.
    pub macro_field: [f64; 3],
    /// `θ = 1` implicit Euler, `θ = 1/2` midpoint.
    pub theta: f64,
    pub newton_iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CellFluxes {
    /// `⟨σ(E0 + ∇e)⟩`
    pub j0: [f64; 3],
    /// `⟨η (E0 + ∇e)⟩`
    pub d0: [f64; 3],
}

impl ElectricCellState {
    /// Builds the state and initializes the corrector from the stationary
    /// problem `div σ(E0 + ∇e) = 0`.
    pub fn new(
        eta: &CoefficientField,
        sigma: &ConductivityLaw,
        x: &[f64; 3],
        omega: &[f64],
        grid: &CellGrid,
        e0: [f64; 3],
        theta: f64,
    ) -> Result<Self> {
        eta.require_diagonal("the electric cell solver")?;
        if !(theta > 0.0 && theta <= 1.0) {
            return Err(Error::input(format!("theta must lie in (0,1], got {theta}")));
        }
        let n = grid.len();
        let cells: Vec<([f64; 3], f64)> = (0..n)
            .map(|i| {
                let z = grid.center(i);
                (eta.diag(x, omega, &z), sigma.kappa(omega, &z))
            })
            .collect();
        let eta_c: Vec<[f64; 3]> = cells.iter().map(|c| c.0).collect();
        let kappa_c: Vec<[f64; 3]> = cells.iter().map(|c| [c.1; 3]).collect();
        let eta_f = edge_average(grid, &eta_c);
        let kappa_f = edge_average(grid, &kappa_c);
        let op = FaceOperator::new(grid, [1.0; 3], eta_f.clone());
        let mut s = Self {
            op,
            eta_f,
            kappa_f,
            beta: sigma.beta(),
            phi: vec![0.0; n],
            macro_field: e0,
            theta,
            newton_iterations: 0,
        };
        s.solve_stationary(e0)?;
        Ok(s)
    }

    fn local(&self, phi: &[f64], e0: [f64; 3]) -> [Vec<f64>; 3] {
        let mut g = self.op.grad(phi);
        for a in 0..3 {
            g[a].iter_mut().for_each(|v| *v += e0[a]);
        }
        g
    }

    /// Current local field `E0 + ∇e` on faces.
    pub fn local_field(&self) -> [Vec<f64>; 3] {
        self.local(&self.phi, self.macro_field)
    }

    pub fn grid(&self) -> &CellGrid {
        &self.op.grid
    }

    pub fn max_gradient(&self) -> f64 {
        self.op
            .grad(&self.phi)
            .iter()
            .flatten()
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Generic Newton on `div q(e) = 0` with `e = E0 + ∇φ`.
    fn newton(
        &mut self,
        e0: [f64; 3],
        flux: &(dyn Fn(usize, usize, f64) -> (f64, f64) + Sync),
    ) -> Result<()> {
        let n = self.phi.len();
        let mut phi = self.phi.clone();
        let mut last_step = f64::INFINITY;
        for it in 0..30 {
            let e = self.local(&phi, e0);
            let mut q: [Vec<f64>; 3] = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
            let mut dq: [Vec<f64>; 3] = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
            let mut scale = 0.0f64;
            for a in 0..3 {
                for i in 0..n {
                    let (v, d) = flux(a, i, e[a][i]);
                    q[a][i] = v;
                    dq[a][i] = d;
                    scale = scale.max(v.abs()).max((d * e[a][i]).abs());
                }
            }
            let r = self.op.div(&q);
            let rn = r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let size = e.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
            if rn <= 1e-12 * scale || rn == 0.0 || last_step <= 1e-14 * size {
                self.phi = phi;
                self.newton_iterations += it;
                return Ok(());
            }
            // div q(φ + δ) ≈ div q - A_{dq} δ = 0
            let lin = self.op.with_coef(dq);
            let mut delta = vec![0.0; n];
            pcg(&lin, &r, &mut delta, 1e-13)?;
            for i in 0..n {
                phi[i] += delta[i];
            }
            project_mean(&mut phi);
            last_step = self.op.grad(&delta).iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        }
        Err(Error::numerical("electric cell Newton did not converge in 30 iterations"))
    }

    /// Stationary problem `div σ(E0 + ∇e) = 0`.
    pub fn solve_stationary(&mut self, e0: [f64; 3]) -> Result<()> {
        let (kf, beta) = (self.kappa_f.clone(), self.beta);
        self.newton(e0, &|a, i, e| scalar_sigma(kf[a][i], beta, e))?;
        self.macro_field = e0;
        Ok(())
    }

    /// Trial step to `e_new` without committing; returns the new potential.
    fn trial(&self, e_new: [f64; 3], dt: f64) -> Result<(Vec<f64>, [Vec<f64>; 3], [Vec<f64>; 3])> {
        let old = self.local_field();
        let (ef, kf, beta, th) = (&self.eta_f, &self.kappa_f, self.beta, self.theta);
        let mut tmp = self.clone();
        let flux = |a: usize, i: usize, e: f64| {
            let eo = old[a][i];
            let (s, ds) = scalar_sigma(kf[a][i], beta, th * e + (1.0 - th) * eo);
            (ef[a][i] * (e - eo) / dt + s, ef[a][i] / dt + th * ds)
        };
        tmp.newton(e_new, &flux)?;
        let e = tmp.local(&tmp.phi, e_new);
        let n = e[0].len();
        let mut q: [Vec<f64>; 3] = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        let mut dq = q.clone();
        for a in 0..3 {
            for i in 0..n {
                let (v, d) = flux(a, i, e[a][i]);
                q[a][i] = v;
                dq[a][i] = d;
            }
        }
        Ok((tmp.phi, q, dq))
    }

    /// One θ-step of the evolution with prescribed new macroscopic field.
    pub fn step(&mut self, e_new: [f64; 3], dt: f64) -> Result<CellFluxes> {
        let old = self.local_field();
        let (phi, _, _) = self.trial(e_new, dt)?;
        self.phi = phi;
        self.macro_field = e_new;
        Ok(self.fluxes_midpoint(&old))
    }

    fn fluxes_midpoint(&self, old: &[Vec<f64>; 3]) -> CellFluxes {
        let e = self.local_field();
        let n = self.phi.len() as f64;
        let th = self.theta;
        let mut out = CellFluxes { j0: [0.0; 3], d0: [0.0; 3] };
        for a in 0..3 {
            for i in 0..self.phi.len() {
                let em = th * e[a][i] + (1.0 - th) * old[a][i];
                out.j0[a] += scalar_sigma(self.kappa_f[a][i], self.beta, em).0 / n;
                out.d0[a] += self.eta_f[a][i] * e[a][i] / n;
            }
        }
        out
    }

    /// `⟨σ(E0 + ∇e)⟩` and `⟨η(E0 + ∇e)⟩` for the current state.
    pub fn fluxes(&self) -> CellFluxes {
        let e = self.local_field();
        self.fluxes_midpoint(&e)
    }

    /// Cell-mean electric energy `⟨η e·e⟩`.
    pub fn energy(&self) -> f64 {
        let e = self.local_field();
        let n = self.phi.len() as f64;
        (0..3)
            .map(|a| (0..self.phi.len()).map(|i| self.eta_f[a][i] * e[a][i] * e[a][i]).sum::<f64>())
            .sum::<f64>()
            / n
    }

    /// Finds the macroscopic amplitude `u` along `e_k` whose step produces the
    /// mean flux `⟨η(e - e_old)/dt + σ(e_θ)⟩_k = target`, and commits it.
    pub fn step_to_flux(&mut self, k: usize, target: f64, dt: f64) -> Result<f64> {
        let n = self.phi.len();
        let mut u = self.macro_field[k];
        let old = self.local_field();
        // size of the individual terms, so that cancellation does not stall the test
        let eta_mean = self.eta_f[k].iter().sum::<f64>() / n as f64;
        let old_size = (0..n).map(|i| (self.eta_f[k][i] * old[k][i]).abs()).sum::<f64>() / (n as f64 * dt);
        let mut last_du = f64::INFINITY;
        for _ in 0..30 {
            let mut e_new = [0.0; 3];
            e_new[k] = u;
            let (phi, q, dq) = self.trial(e_new, dt)?;
            let mean = q[k].iter().sum::<f64>() / n as f64;
            let res = mean - target;
            let scale = target.abs() + mean.abs() + old_size + eta_mean * u.abs() / dt;
            if res.abs() <= 1e-12 * scale || res == 0.0 || last_du <= 1e-15 * u.abs() {
                self.phi = phi;
                self.macro_field = e_new;
                return Ok(u);
            }
            // tangent: ⟨dq (e_k + ∇ψ)⟩_k with A_{dq} ψ = div(dq e_k)
            let lin = self.op.with_coef(dq.clone());
            let mut unit: [Vec<f64>; 3] = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
            unit[k] = dq[k].clone();
            let b = lin.div(&unit);
            let mut psi = vec![0.0; n];
            pcg(&lin, &b, &mut psi, 1e-13)?;
            let g = lin.grad(&psi);
            let tangent = (0..n).map(|i| dq[k][i] * (1.0 + g[k][i])).sum::<f64>() / n as f64;
            if !(tangent > 0.0) {
                return Err(Error::numerical("non-positive tangent in the cell closure"));
            }
            last_du = (res / tangent).abs();
            u -= res / tangent;
        }
        Err(Error::numerical("macro Newton on the cell closure did not converge"))
    }
}

#[derive(Debug, Clone)]
pub struct ElectricEvolution {
    pub times: Vec<f64>,
    pub j0: Vec<[f64; 3]>,
    pub d0: Vec<[f64; 3]>,
    pub max_gradient: Vec<f64>,
    pub final_state: ElectricCellState,
}

/// Advances the electric corrector along a prescribed macroscopic trajectory
/// sampled every `dt` (implicit Euler when `theta = 1`).
#[allow(clippy::too_many_arguments)]
pub fn solve_electric_cell_evolution(
    eta: &CoefficientField,
    sigma: &ConductivityLaw,
    x: &[f64; 3],
    omega: &[f64],
    e0_traj: &[[f64; 3]],
    grid: &CellGrid,
    dt: f64,
    theta: f64,
) -> Result<ElectricEvolution> {
    if e0_traj.is_empty() {
        return Err(Error::input("empty macroscopic trajectory"));
    }
    let mut st = ElectricCellState::new(eta, sigma, x, omega, grid, e0_traj[0], theta)?;
    let f0 = st.fluxes();
    let mut out = ElectricEvolution {
        times: vec![0.0],
        j0: vec![f0.j0],
        d0: vec![f0.d0],
        max_gradient: vec![st.max_gradient()],
        final_state: st.clone(),
    };
    for (n, e) in e0_traj.iter().enumerate().skip(1) {
        let f = st.step(*e, dt)?;
        out.times.push(n as f64 * dt);
        out.j0.push(f.j0);
        out.d0.push(f.d0);
        out.max_gradient.push(st.max_gradient());
    }
    out.final_state = st;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClosureMode {
    #[default]
    Linear,
    Nonlinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellResolution {
    /// Cells per varying axis of Z.
    #[serde(default = "default_z_res")]
    pub z: usize,
    /// Cells per varying axis of the torus.
    #[serde(default = "default_omega_res")]
    pub omega: usize,
    /// Fibers per invariant coordinate.
    #[serde(default = "default_fibers_per_axis")]
    pub fibers: usize,
}

fn default_z_res() -> usize {
    64
}
fn default_omega_res() -> usize {
    32
}
fn default_fibers_per_axis() -> usize {
    4
}

impl Default for CellResolution {
    fn default() -> Self {
        Self {
            z: default_z_res(),
            omega: default_omega_res(),
            fibers: default_fibers_per_axis(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TensorKind {
    Mu,
    Eta,
    Kappa,
}

/// Reiterated (z then ω) homogenized tensors, per fiber and macro point.
#[derive(Debug)]
pub struct EffectiveLaw {
    pub mode: ClosureMode,
    pub ergodic: bool,
    /// Invariant-coordinate values; a single empty entry when ergodic.
    pub fibers: Vec<Vec<f64>>,
    pub beta: f64,
    pub delta: f64,
    /// κ is a constant multiple of η on every cell, so the linear closure is exact.
    pub proportional: bool,
    pub mu_field: CoefficientField,
    pub eta_field: CoefficientField,
    pub sigma: ConductivityLaw,
    pub ds: DynamicalSystemSpec,
    pub resolution: CellResolution,
    x_dependent: bool,
    cache: Mutex<HashMap<(TensorKind, usize, [u64; 3]), Mat3>>,
}

impl Clone for EffectiveLaw {
    fn clone(&self) -> Self {
        Self {
            mode: self.mode,
            ergodic: self.ergodic,
            fibers: self.fibers.clone(),
            beta: self.beta,
            delta: self.delta,
            proportional: self.proportional,
            mu_field: self.mu_field.clone(),
            eta_field: self.eta_field.clone(),
            sigma: self.sigma.clone(),
            ds: self.ds.clone(),
            resolution: self.resolution,
            x_dependent: self.x_dependent,
            cache: Mutex::new(self.cache.lock().expect("cache poisoned").clone()),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TensorExport {
    pub kind: String,
    pub fiber: Vec<f64>,
    pub matrix: [[f64; 3]; 3],
}

impl EffectiveLaw {
    /// Same law at another cell resolution, with an empty tensor cache.
    pub fn with_resolution(&self, resolution: CellResolution) -> Self {
        let mut out = self.clone();
        out.resolution = resolution;
        out.cache = Mutex::new(HashMap::new());
        out
    }

    /// Same law on explicit invariant-coordinate values (non-ergodic only).
    pub fn with_fibers(&self, fibers: Vec<Vec<f64>>) -> Result<Self> {
        if self.ergodic {
            return Err(Error::input("an ergodic law has a single fiber"));
        }
        let m = self.ds.masked_coords().len();
        if fibers.is_empty() || fibers.iter().any(|f| f.len() != m) {
            return Err(Error::input(format!("each fiber needs {m} invariant coordinates")));
        }
        let mut out = self.with_resolution(self.resolution);
        out.fibers = fibers;
        Ok(out)
    }

    pub fn fiber_count(&self) -> usize {
        self.fibers.len()
    }

    pub fn is_x_dependent(&self) -> bool {
        self.x_dependent
    }

    /// Full sample point for fiber `f`: masked coordinates set, others at 0.
    pub fn fiber_omega(&self, f: usize) -> Vec<f64> {
        let mut w = vec![0.0; 3];
        for (c, v) in self.ds.masked_coords().iter().zip(&self.fibers[f]) {
            w[*c] = *v;
        }
        w
    }

    fn compute(&self, kind: TensorKind, fiber: usize, x: &[f64; 3]) -> Result<Mat3> {
        let zres = self.resolution.z;
        let (z_axes, w_axes) = match kind {
            TensorKind::Mu => (self.mu_field.spec.z_axes(), self.mu_field.spec.omega_axes()),
            TensorKind::Eta => (self.eta_field.spec.z_axes(), self.eta_field.spec.omega_axes()),
            TensorKind::Kappa => (self.sigma.kappa_field().z_axes(), self.sigma.kappa_field().omega_axes()),
        };
        let zgrid = CellGrid::adapted(zres, z_axes)?;
        let x = *x;
        let z_map = |w: &[f64]| -> Result<Mat3> {
            Ok(match kind {
                TensorKind::Mu => solve_magnetic_cell(&self.mu_field, &x, w, &zgrid)?.matrix,
                TensorKind::Eta => {
                    self.eta_field.require_diagonal("the cell solver")?;
                    solve_cell_diagonal(&zgrid, [1.0; 3], CellLevel::ZCell, |z| self.eta_field.diag(&x, w, z))?.matrix
                }
                TensorKind::Kappa => solve_scalar_cell(self.sigma.kappa_field(), w, &zgrid)?.matrix,
            })
        };
        let fibers = if self.ergodic { vec![] } else { vec![self.fibers[fiber].clone()] };
        let r = solve_omega_cell(&z_map, &self.ds, self.resolution.omega, w_axes, &fibers)?;
        Ok(r.matrices()[0])
    }

    /// Homogenized tensor of `kind` at macro point `x` on fiber `fiber`.
    pub fn tensor(&self, kind: TensorKind, fiber: usize, x: &[f64; 3]) -> Result<Mat3> {
        if fiber >= self.fibers.len() {
            return Err(Error::input(format!("fiber index {fiber} out of range")));
        }
        let key_x = if self.x_dependent { x.map(f64::to_bits) } else { [0; 3] };
        let key = (kind, fiber, key_x);
        if let Some(m) = self.cache.lock().expect("cache poisoned").get(&key) {
            return Ok(*m);
        }
        let m = self.compute(kind, fiber, x)?;
        self.cache.lock().expect("cache poisoned").insert(key, m);
        Ok(m)
    }

    pub fn mu_hom(&self, fiber: usize, x: &[f64; 3]) -> Result<Mat3> {
        self.tensor(TensorKind::Mu, fiber, x)
    }

    pub fn eta_hom(&self, fiber: usize, x: &[f64; 3]) -> Result<Mat3> {
        self.tensor(TensorKind::Eta, fiber, x)
    }

    /// Linear effective conductivity; exact when κ is proportional to η.
    pub fn kappa_hom(&self, fiber: usize, x: &[f64; 3]) -> Result<Mat3> {
        if self.proportional {
            let ratio = proportional_ratio(&self.eta_field, &self.sigma).unwrap_or(1.0);
            return Ok(self.eta_hom(fiber, x)? * ratio);
        }
        self.tensor(TensorKind::Kappa, fiber, x)
    }

    /// Tensors at the origin for export.
    pub fn export(&self) -> Result<Vec<TensorExport>> {
        let mut out = Vec::new();
        for f in 0..self.fibers.len() {
            let mut kinds = vec![(TensorKind::Mu, "mu_hom"), (TensorKind::Eta, "eta_hom")];
            if self.mode == ClosureMode::Linear {
                kinds.push((TensorKind::Kappa, "sigma_hom"));
            }
            for (k, name) in kinds {
                let m = match k {
                    TensorKind::Kappa => self.kappa_hom(f, &[0.0; 3])?,
                    _ => self.tensor(k, f, &[0.0; 3])?,
                };
                out.push(TensorExport {
                    kind: name.to_string(),
                    fiber: self.fibers[f].clone(),
                    matrix: [0, 1, 2].map(|i| [0, 1, 2].map(|j| m[(i, j)])),
                });
            }
        }
        Ok(out)
    }

    /// New electric cell state at `(x, fiber)` for the nonlinear closure.
    pub fn electric_state(&self, fiber: usize, x: &[f64; 3], e0: [f64; 3], omega: &[f64]) -> Result<ElectricCellState> {
        let mut w = omega.to_vec();
        for (c, v) in self.ds.masked_coords().iter().zip(&self.fibers[fiber]) {
            w[*c] = *v;
        }
        let axes = or3(self.eta_field.spec.z_axes(), self.sigma.kappa_field().z_axes());
        let grid = CellGrid::adapted(self.resolution.z, axes)?;
        ElectricCellState::new(&self.eta_field, &self.sigma, x, &w, &grid, e0, 0.5)
    }
}

fn or3(a: [bool; 3], b: [bool; 3]) -> [bool; 3] {
    [a[0] || b[0], a[1] || b[1], a[2] || b[2]]
}

/// `κ / η_aa` when it is the same constant on sampled cells and axes.
pub fn proportional_ratio(eta: &CoefficientField, sigma: &ConductivityLaw) -> Option<f64> {
    if !eta.is_diagonal() {
        return None;
    }
    let mut ratio: Option<f64> = None;
    let k = 8;
    for i in 0..k * k * k {
        let z = [(i % k) as f64, ((i / k) % k) as f64, (i / (k * k)) as f64].map(|v| (v + 0.5) / k as f64);
        for j in 0..4 {
            let w = [0.13 + 0.21 * j as f64, 0.37 + 0.17 * j as f64, 0.71 + 0.05 * j as f64];
            let d = eta.diag(&[0.5; 3], &w, &z);
            let kap = sigma.kappa(&w, &z);
            for v in d {
                let r = kap / v;
                match ratio {
                    None => ratio = Some(r),
                    Some(r0) if (r - r0).abs() > 1e-12 * r0.abs() => return None,
                    _ => {}
                }
            }
        }
    }
    ratio
}

/// Assembles the effective laws. Tensors are computed lazily and cached.
pub fn assemble_effective_laws(
    mu: &CoefficientField,
    eta: &CoefficientField,
    sigma: &ConductivityLaw,
    ds: &DynamicalSystemSpec,
    resolution: CellResolution,
    mode: ClosureMode,
) -> Result<EffectiveLaw> {
    ds.validate()?;
    mu.require_diagonal("the cell solver")?;
    eta.require_diagonal("the cell solver")?;
    if mode == ClosureMode::Linear && !sigma.is_linear() {
        return Err(Error::config("linear closure mode needs a linear conductivity law"));
    }
    let ergodic = ds.ergodic_flag();
    let fibers = if ergodic { vec![vec![]] } else { default_fibers(ds, resolution.fibers) };
    let law = EffectiveLaw {
        mode,
        ergodic,
        fibers,
        beta: sigma.beta(),
        delta: sigma.monotone_delta,
        proportional: proportional_ratio(eta, sigma).is_some(),
        mu_field: mu.clone(),
        eta_field: eta.clone(),
        sigma: sigma.clone(),
        ds: ds.clone(),
        resolution,
        x_dependent: mu.spec.depends_on_x() || eta.spec.depends_on_x(),
        cache: Mutex::new(HashMap::new()),
    };
    // Magnetic tensors for every fiber are needed by every mode.
    for f in 0..law.fibers.len() {
        if !law.x_dependent {
            law.mu_hom(f, &[0.0; 3])?;
        }
    }
    Ok(law)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{build_coefficient_field, diag_spec, ConductivitySpec, FieldSpec, MicroVariable};

    fn lam(axis: usize) -> CoefficientField {
        build_coefficient_field(FieldSpec::isotropic_laminate(axis, 0.5, 1.0, 3.0), "mu").unwrap()
    }

    #[test]
    fn constant_field_has_zero_corrector() {
        let mu = build_coefficient_field(FieldSpec::constant(diag_spec([1.0, 2.0, 3.0])), "mu").unwrap();
        let s = solve_magnetic_cell(&mu, &[0.0; 3], &[0.0; 3], &CellGrid::cube(8).unwrap()).unwrap();
        assert!(s.corrector.max_gradient() < 1e-10);
        assert!((s.matrix - Mat3::from_diagonal(&nalgebra::Vector3::new(1.0, 2.0, 3.0))).abs().max() < 1e-14);
    }

    #[test]
    fn laminate_effective_tensor() {
        for axis in 0..3 {
            let mut vary = [false; 3];
            vary[axis] = true;
            let g = CellGrid::adapted(64, vary).unwrap();
            let s = solve_magnetic_cell(&lam(axis), &[0.0; 3], &[0.0; 3], &g).unwrap();
            for a in 0..3 {
                let want = if a == axis { 1.5 } else { 2.0 };
                assert!((s.matrix[(a, a)] - want).abs() < 1e-10, "{}", s.matrix);
            }
            assert!(s.max_residual() < 1e-10);
            assert!(s.corrector.max_abs_mean() < 1e-12);
        }
    }

    #[test]
    fn full_3d_grid_agrees_with_reduced_grid() {
        let g = CellGrid::cube(16).unwrap();
        let s = solve_magnetic_cell(&lam(1), &[0.0; 3], &[0.0; 3], &g).unwrap();
        assert!((s.matrix[(1, 1)] - 1.5).abs() < 1e-10 && (s.matrix[(0, 0)] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn checkerboard_is_isotropic() {
        let f = build_coefficient_field(
            FieldSpec::Checkerboard {
                phase_a: diag_spec([1.0; 3]),
                phase_b: diag_spec([4.0; 3]),
            },
            "mu",
        )
        .unwrap();
        let s = solve_magnetic_cell(&f, &[0.0; 3], &[0.0; 3], &CellGrid::cube(16).unwrap()).unwrap();
        let m = s.matrix;
        let off = m[(0, 1)].abs().max(m[(0, 2)].abs()).max(m[(1, 2)].abs());
        let d = [m[(0, 0)], m[(1, 1)], m[(2, 2)]];
        let spread = d.iter().copied().fold(f64::NEG_INFINITY, f64::max) - d.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(off < 1e-6 && spread < 1e-4, "{m}");
        assert!(d[0] > 1.0 && d[0] < 4.0);
    }

    #[test]
    fn omega_cell_cases() {
        let ds = DynamicalSystemSpec::ergodic(3, 0);
        let m0 = Mat3::from_diagonal(&nalgebra::Vector3::new(2.0, 3.0, 4.0));
        let r = solve_omega_cell(&|_| Ok(m0), &ds, 16, [false; 3], &[]).unwrap();
        assert_eq!(r.matrices()[0], m0);

        let lamw = |w: &[f64]| Ok(Mat3::identity() * if w[0] < 0.5 { 1.0 } else { 3.0 });
        let r = solve_omega_cell(&lamw, &ds, 32, [true, false, false], &[]).unwrap();
        let m = r.matrices()[0];
        assert!((m[(0, 0)] - 1.5).abs() < 1e-10 && (m[(1, 1)] - 2.0).abs() < 1e-10);

        let ne = DynamicalSystemSpec::with_invariant(3, &[2], 0);
        let dep = |w: &[f64]| Ok(Mat3::identity() * (1.0 + w[2]));
        let fibers = default_fibers(&ne, 4);
        let r = solve_omega_cell(&dep, &ne, 16, [false, false, true], &fibers).unwrap();
        for (f, m) in fibers.iter().zip(r.matrices()) {
            assert!((m[(0, 0)] - (1.0 + f[0])).abs() < 1e-14);
        }
    }

    #[test]
    fn reiterated_laminates() {
        let spec = FieldSpec::Scaled {
            scalar: ScalarFieldSpec::Laminate {
                variable: MicroVariable::Omega,
                axis: 0,
                theta: 0.5,
                inside: 1.0,
                outside: 2.0,
            },
            field: Box::new(FieldSpec::isotropic_laminate(0, 0.5, 1.0, 3.0)),
        };
        let mu = build_coefficient_field(spec, "mu").unwrap();
        let eta = build_coefficient_field(FieldSpec::scalar_constant(1.0), "eta").unwrap();
        let law = ConductivityLaw::new(ConductivitySpec::linear(1.0)).unwrap();
        let ds = DynamicalSystemSpec::ergodic(3, 0);
        let eff = assemble_effective_laws(&mu, &eta, &law, &ds, CellResolution::default(), ClosureMode::Linear).unwrap();
        let m = eff.mu_hom(0, &[0.0; 3]).unwrap();
        let harm = |a: f64, b: f64| 2.0 * a * b / (a + b);
        assert!((m[(0, 0)] - 1.5 * harm(1.0, 2.0)).abs() < 1e-10, "{m}");
        assert!((m[(1, 1)] - 2.0 * 1.5).abs() < 1e-10, "{m}");
        assert!(eff.proportional);
    }

    #[test]
    fn electric_closure_trivial_cases() {
        let eta = build_coefficient_field(FieldSpec::scalar_constant(2.0), "eta").unwrap();
        let law = ConductivityLaw::new(ConductivitySpec::linear(3.0)).unwrap();
        let traj: Vec<[f64; 3]> = (0..20).map(|n| [0.1 * n as f64, 0.0, 1.0]).collect();
        let g = CellGrid::cube(8).unwrap();
        let ev = solve_electric_cell_evolution(&eta, &law, &[0.0; 3], &[0.0; 3], &traj, &g, 0.01, 1.0).unwrap();
        for (j, e) in ev.j0.iter().zip(&traj) {
            assert!((j[0] - 3.0 * e[0]).abs() < 1e-12 && (j[2] - 3.0).abs() < 1e-12);
        }
        assert!(ev.max_gradient.iter().all(|&g| g < 1e-10));
    }

    #[test]
    fn step_to_flux_inverts_the_closure() {
        let eta = lam(0);
        let law = ConductivityLaw::new(ConductivitySpec::saturating(1.0, 0.5)).unwrap();
        let g = CellGrid::adapted(32, [true, false, false]).unwrap();
        let mut st = ElectricCellState::new(&eta, &law, &[0.0; 3], &[0.0; 3], &g, [0.2, 0.0, 0.0], 0.5).unwrap();
        let u = st.step_to_flux(0, 1.7, 0.01).unwrap();
        assert!(u.is_finite());
        assert!((st.macro_field[0] - u).abs() == 0.0);
    }
}
