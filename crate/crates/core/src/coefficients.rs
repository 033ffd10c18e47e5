//! Material fields μ, η and the monotone conductivity law σ.
//!
//! Fields are built from serializable family descriptions. Construction
//! certifies the bounds `c1` (operator norm) and `c2` (coercivity) from the
//! family parameters and rejects non-symmetric or non-coercive input.
//! Arguments are `(x, ω, z)`: macro point, sample of Λ, point of the unit
//! cell (reduced mod 1 on evaluation).

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probability::{frac, tau_coords, DynamicalSystemSpec, OmegaPoint};
use crate::profile::{Profile1D, TrigPoly};

pub type Mat3 = Matrix3<f64>;

/// Row-major 3×3 matrix as it appears in config files.
pub type MatrixSpec = [f64; 9];

pub fn mat_from_spec(m: &MatrixSpec) -> Mat3 {
    Mat3::from_row_slice(m)
}

pub fn diag_spec(d: [f64; 3]) -> MatrixSpec {
    [d[0], 0.0, 0.0, 0.0, d[1], 0.0, 0.0, 0.0, d[2]]
}

pub fn identity_spec() -> MatrixSpec {
    diag_spec([1.0; 3])
}

/// Which micro variable a laminate or trig factor depends on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MicroVariable {
    #[default]
    Z,
    Omega,
}

pub const FIELD_FAMILIES: &[&str] = &["constant", "laminate", "smooth_mix", "checkerboard", "scaled"];
pub const SCALAR_FAMILIES: &[&str] = &["constant", "laminate", "checkerboard", "trig", "product"];
pub const CONDUCTIVITY_FAMILIES: &[&str] = &["linear", "saturating"];

/// Positive scalar field of `(ω, z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScalarFieldSpec {
    Constant {
        value: f64,
    },
    /// `inside` where the coordinate is below `theta`, `outside` elsewhere.
    Laminate {
        #[serde(default)]
        variable: MicroVariable,
        axis: usize,
        theta: f64,
        inside: f64,
        outside: f64,
    },
    /// `a` on even cells of the 2×2×2 split of Z, `b` on odd cells.
    Checkerboard {
        a: f64,
        b: f64,
    },
    Trig {
        #[serde(default)]
        variable: MicroVariable,
        poly: TrigPoly,
    },
    Product {
        factors: Vec<ScalarFieldSpec>,
    },
}

impl ScalarFieldSpec {
    pub fn constant(value: f64) -> Self {
        ScalarFieldSpec::Constant { value }
    }

    #[inline]
    pub fn eval(&self, omega: &[f64], z: &[f64; 3]) -> f64 {
        match self {
            ScalarFieldSpec::Constant { value } => *value,
            ScalarFieldSpec::Laminate {
                variable,
                axis,
                theta,
                inside,
                outside,
            } => {
                let c = match variable {
                    MicroVariable::Z => z[*axis],
                    MicroVariable::Omega => omega[*axis],
                };
                if frac(c) < *theta {
                    *inside
                } else {
                    *outside
                }
            }
            ScalarFieldSpec::Checkerboard { a, b } => {
                if checker_parity(z) {
                    *b
                } else {
                    *a
                }
            }
            ScalarFieldSpec::Trig { variable, poly } => match variable {
                MicroVariable::Z => poly.eval(z),
                MicroVariable::Omega => poly.eval(omega),
            },
            ScalarFieldSpec::Product { factors } => {
                factors.iter().map(|f| f.eval(omega, z)).product()
            }
        }
    }

    pub fn bounds(&self) -> (f64, f64) {
        match self {
            ScalarFieldSpec::Constant { value } => (*value, *value),
            ScalarFieldSpec::Laminate { inside, outside, .. } => {
                (inside.min(*outside), inside.max(*outside))
            }
            ScalarFieldSpec::Checkerboard { a, b } => (a.min(*b), a.max(*b)),
            ScalarFieldSpec::Trig { poly, .. } => poly.bounds(),
            ScalarFieldSpec::Product { factors } => factors
                .iter()
                .fold((1.0, 1.0), |acc, f| interval_product(acc, f.bounds())),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ScalarFieldSpec::Laminate { axis, theta, .. } => {
                if *axis > 2 {
                    return Err(Error::Coefficient(format!("laminate axis {axis} out of range")));
                }
                if !(0.0..=1.0).contains(theta) {
                    return Err(Error::Coefficient(format!("volume fraction {theta} outside [0,1]")));
                }
            }
            ScalarFieldSpec::Product { factors } => {
                for f in factors {
                    f.validate()?;
                }
            }
            _ => {}
        }
        let (lo, hi) = self.bounds();
        if !(lo.is_finite() && hi.is_finite()) {
            return Err(Error::Coefficient("scalar field bounds are not finite".into()));
        }
        Ok(())
    }

    pub fn z_axes(&self) -> [bool; 3] {
        match self {
            ScalarFieldSpec::Constant { .. } => [false; 3],
            ScalarFieldSpec::Laminate { variable, axis, .. } => {
                let mut a = [false; 3];
                if *variable == MicroVariable::Z {
                    a[*axis] = true;
                }
                a
            }
            ScalarFieldSpec::Checkerboard { .. } => [true; 3],
            ScalarFieldSpec::Trig { variable, poly } => match variable {
                MicroVariable::Z => poly.axes(),
                MicroVariable::Omega => [false; 3],
            },
            ScalarFieldSpec::Product { factors } => {
                factors.iter().fold([false; 3], |acc, f| or3(acc, f.z_axes()))
            }
        }
    }

    pub fn omega_axes(&self) -> [bool; 3] {
        match self {
            ScalarFieldSpec::Laminate { variable, axis, .. } => {
                let mut a = [false; 3];
                if *variable == MicroVariable::Omega {
                    a[*axis] = true;
                }
                a
            }
            ScalarFieldSpec::Trig { variable, poly } => match variable {
                MicroVariable::Omega => poly.axes(),
                MicroVariable::Z => [false; 3],
            },
            ScalarFieldSpec::Product { factors } => {
                factors.iter().fold([false; 3], |acc, f| or3(acc, f.omega_axes()))
            }
            _ => [false; 3],
        }
    }
}

fn or3(a: [bool; 3], b: [bool; 3]) -> [bool; 3] {
    [a[0] || b[0], a[1] || b[1], a[2] || b[2]]
}

#[inline]
fn checker_parity(z: &[f64; 3]) -> bool {
    let s: usize = z.iter().map(|&c| (frac(c) * 2.0) as usize).sum();
    s % 2 == 1
}

fn interval_product(a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    let c = [a.0 * b.0, a.0 * b.1, a.1 * b.0, a.1 * b.1];
    (
        c.iter().copied().fold(f64::INFINITY, f64::min),
        c.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    )
}

/// Parametric description of a symmetric matrix field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldSpec {
    Constant {
        matrix: MatrixSpec,
    },
    /// Two phases alternating along one axis of the micro variable;
    /// `phase_a` occupies the fraction `theta` nearest the origin.
    Laminate {
        #[serde(default)]
        variable: MicroVariable,
        axis: usize,
        theta: f64,
        phase_a: MatrixSpec,
        phase_b: MatrixSpec,
    },
    /// `base + a(x)·b(ω)·c(z)·perturbation`.
    SmoothMix {
        base: MatrixSpec,
        perturbation: MatrixSpec,
        #[serde(default)]
        slow: [Profile1D; 3],
        omega: TrigPoly,
        cell: TrigPoly,
    },
    Checkerboard {
        phase_a: MatrixSpec,
        phase_b: MatrixSpec,
    },
    /// Positive scalar field times a matrix field.
    Scaled {
        scalar: ScalarFieldSpec,
        field: Box<FieldSpec>,
    },
}

impl FieldSpec {
    pub fn constant(m: MatrixSpec) -> Self {
        FieldSpec::Constant { matrix: m }
    }

    pub fn scalar_constant(v: f64) -> Self {
        FieldSpec::Constant {
            matrix: diag_spec([v; 3]),
        }
    }

    /// z-laminate of two isotropic phases.
    pub fn isotropic_laminate(axis: usize, theta: f64, a: f64, b: f64) -> Self {
        FieldSpec::Laminate {
            variable: MicroVariable::Z,
            axis,
            theta,
            phase_a: diag_spec([a; 3]),
            phase_b: diag_spec([b; 3]),
        }
    }

    fn eval_parts(&self, x: &[f64; 3], omega: &[f64], z: &[f64; 3]) -> Mat3 {
        match self {
            FieldSpec::Constant { matrix } => mat_from_spec(matrix),
            FieldSpec::Laminate {
                variable,
                axis,
                theta,
                phase_a,
                phase_b,
            } => {
                let c = match variable {
                    MicroVariable::Z => z[*axis],
                    MicroVariable::Omega => omega[*axis],
                };
                if frac(c) < *theta {
                    mat_from_spec(phase_a)
                } else {
                    mat_from_spec(phase_b)
                }
            }
            FieldSpec::SmoothMix {
                base,
                perturbation,
                slow,
                omega: b,
                cell,
            } => {
                let a = slow[0].eval(x[0]) * slow[1].eval(x[1]) * slow[2].eval(x[2]);
                mat_from_spec(base) + mat_from_spec(perturbation) * (a * b.eval(omega) * cell.eval(z))
            }
            FieldSpec::Checkerboard { phase_a, phase_b } => {
                if checker_parity(z) {
                    mat_from_spec(phase_b)
                } else {
                    mat_from_spec(phase_a)
                }
            }
            FieldSpec::Scaled { scalar, field } => field.eval_parts(x, omega, z) * scalar.eval(omega, z),
        }
    }

    fn matrices(&self) -> Vec<MatrixSpec> {
        match self {
            FieldSpec::Constant { matrix } => vec![*matrix],
            FieldSpec::Laminate { phase_a, phase_b, .. } | FieldSpec::Checkerboard { phase_a, phase_b } => {
                vec![*phase_a, *phase_b]
            }
            FieldSpec::SmoothMix { base, perturbation, .. } => vec![*base, *perturbation],
            FieldSpec::Scaled { field, .. } => field.matrices(),
        }
    }

    /// True when every matrix that can be produced is diagonal.
    pub fn is_diagonal(&self) -> bool {
        self.matrices()
            .iter()
            .all(|m| m[1] == 0.0 && m[2] == 0.0 && m[3] == 0.0 && m[5] == 0.0 && m[6] == 0.0 && m[7] == 0.0)
    }

    pub fn depends_on_x(&self) -> bool {
        match self {
            FieldSpec::SmoothMix { slow, .. } => slow.iter().any(|p| !p.is_one()),
            FieldSpec::Scaled { field, .. } => field.depends_on_x(),
            _ => false,
        }
    }

    /// Cell axes along which the field varies.
    pub fn z_axes(&self) -> [bool; 3] {
        match self {
            FieldSpec::Constant { .. } => [false; 3],
            FieldSpec::Laminate { variable, axis, .. } => {
                let mut a = [false; 3];
                if *variable == MicroVariable::Z {
                    a[*axis] = true;
                }
                a
            }
            FieldSpec::SmoothMix { cell, omega, .. } => {
                if omega.bounds() == (0.0, 0.0) {
                    [false; 3]
                } else {
                    cell.axes()
                }
            }
            FieldSpec::Checkerboard { .. } => [true; 3],
            FieldSpec::Scaled { scalar, field } => or3(scalar.z_axes(), field.z_axes()),
        }
    }

    /// Torus axes along which the field varies.
    pub fn omega_axes(&self) -> [bool; 3] {
        match self {
            FieldSpec::Laminate { variable, axis, .. } => {
                let mut a = [false; 3];
                if *variable == MicroVariable::Omega {
                    a[*axis] = true;
                }
                a
            }
            FieldSpec::SmoothMix { cell, omega, .. } => {
                if cell.bounds() == (0.0, 0.0) {
                    [false; 3]
                } else {
                    omega.axes()
                }
            }
            FieldSpec::Scaled { scalar, field } => or3(scalar.omega_axes(), field.omega_axes()),
            _ => [false; 3],
        }
    }

    pub fn depends_on_omega(&self) -> bool {
        self.omega_axes().iter().any(|&b| b)
    }

    pub fn family(&self) -> &'static str {
        match self {
            FieldSpec::Constant { .. } => "constant",
            FieldSpec::Laminate { .. } => "laminate",
            FieldSpec::SmoothMix { .. } => "smooth_mix",
            FieldSpec::Checkerboard { .. } => "checkerboard",
            FieldSpec::Scaled { .. } => "scaled",
        }
    }
}

/// Validated symmetric, bounded, coercive matrix field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientField {
    pub spec: FieldSpec,
    /// Operator-norm upper bound.
    pub c1: f64,
    /// Coercivity lower bound.
    pub c2: f64,
    pub label: String,
}

impl CoefficientField {
    #[inline]
    pub fn eval(&self, x: &[f64; 3], omega: &[f64], z: &[f64; 3]) -> Mat3 {
        let zr = [frac(z[0]), frac(z[1]), frac(z[2])];
        self.spec.eval_parts(x, omega, &zr)
    }

    pub fn eval_at(&self, x: &[f64; 3], omega: &OmegaPoint, z: &[f64; 3]) -> Mat3 {
        self.eval(x, &omega.coords, z)
    }

    #[inline]
    pub fn diag(&self, x: &[f64; 3], omega: &[f64], z: &[f64; 3]) -> [f64; 3] {
        let m = self.eval(x, omega, z);
        [m[(0, 0)], m[(1, 1)], m[(2, 2)]]
    }

    pub fn is_diagonal(&self) -> bool {
        self.spec.is_diagonal()
    }

    pub fn require_diagonal(&self, who: &str) -> Result<()> {
        if self.is_diagonal() {
            Ok(())
        } else {
            Err(Error::config(format!(
                "{who} supports diagonal tensors only; field '{}' has off-diagonal entries",
                self.label
            )))
        }
    }
}

fn symmetric_check(m: &MatrixSpec, what: &str) -> Result<()> {
    let a = mat_from_spec(m);
    let scale = a.abs().max().max(1.0);
    let asym = (a - a.transpose()).abs().max();
    if asym > 1e-14 * scale {
        return Err(Error::Coefficient(format!(
            "{what} matrix is not symmetric (asymmetry {asym:e}): {m:?}"
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Coefficient(format!("{what} matrix has non-finite entries")));
    }
    Ok(())
}

fn eig_bounds(m: &Mat3) -> (f64, f64, Vector3<f64>) {
    let e = SymmetricEigen::new(*m);
    let (mut imin, mut imax) = (0, 0);
    for i in 1..3 {
        if e.eigenvalues[i] < e.eigenvalues[imin] {
            imin = i;
        }
        if e.eigenvalues[i] > e.eigenvalues[imax] {
            imax = i;
        }
    }
    let norm = e.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    (e.eigenvalues[imin], norm, e.eigenvectors.column(imin).into_owned())
}

fn certify(spec: &FieldSpec, x_box: &[[f64; 2]; 3]) -> Result<(f64, f64)> {
    match spec {
        FieldSpec::Constant { matrix } => {
            symmetric_check(matrix, "constant")?;
            let (lmin, norm, dir) = eig_bounds(&mat_from_spec(matrix));
            if lmin <= 0.0 {
                return Err(Error::Coefficient(format!(
                    "coercivity fails: lambda_min = {lmin:e} along direction {:?}",
                    dir.as_slice()
                )));
            }
            Ok((norm, lmin))
        }
        FieldSpec::Laminate { axis, theta, .. } if *axis > 2 || !(0.0..=1.0).contains(theta) => {
            Err(Error::Coefficient(format!(
                "laminate needs axis in 0..3 and theta in [0,1], got axis {axis}, theta {theta}"
            )))
        }
        FieldSpec::Laminate { phase_a, phase_b, .. } | FieldSpec::Checkerboard { phase_a, phase_b } => {
            let mut c1 = 0.0f64;
            let mut c2 = f64::INFINITY;
            for (name, m) in [("phase_a", phase_a), ("phase_b", phase_b)] {
                symmetric_check(m, name)?;
                let (lmin, norm, dir) = eig_bounds(&mat_from_spec(m));
                if lmin <= 0.0 {
                    return Err(Error::Coefficient(format!(
                        "coercivity fails in {name}: lambda_min = {lmin:e} along direction {:?}",
                        dir.as_slice()
                    )));
                }
                c1 = c1.max(norm);
                c2 = c2.min(lmin);
            }
            Ok((c1, c2))
        }
        FieldSpec::SmoothMix {
            base,
            perturbation,
            slow,
            omega,
            cell,
        } => {
            symmetric_check(base, "base")?;
            symmetric_check(perturbation, "perturbation")?;
            let mut p = (1.0, 1.0);
            for (a, prof) in slow.iter().enumerate() {
                p = interval_product(p, prof.bounds(x_box[a][0], x_box[a][1]));
            }
            p = interval_product(p, omega.bounds());
            p = interval_product(p, cell.bounds());
            let m0 = mat_from_spec(base);
            let m1 = mat_from_spec(perturbation);
            // λ_min(M0 + p M1) is concave and the norm convex in p, so the
            // extremes over the interval sit at its endpoints.
            let mut c1 = 0.0f64;
            let mut c2 = f64::INFINITY;
            for pv in [p.0, p.1] {
                let (lmin, norm, dir) = eig_bounds(&(m0 + m1 * pv));
                if lmin <= 0.0 {
                    return Err(Error::Coefficient(format!(
                        "coercivity fails: lambda_min = {lmin:e} at a(x)b(w)c(z) = {pv} along direction {:?}",
                        dir.as_slice()
                    )));
                }
                c1 = c1.max(norm);
                c2 = c2.min(lmin);
            }
            Ok((c1, c2))
        }
        FieldSpec::Scaled { scalar, field } => {
            scalar.validate()?;
            let (lo, hi) = scalar.bounds();
            if lo <= 0.0 {
                return Err(Error::Coefficient(format!(
                    "scalar factor must be positive, lower bound is {lo}"
                )));
            }
            let (c1, c2) = certify(field, x_box)?;
            Ok((c1 * hi, c2 * lo))
        }
    }
}

/// Builds and certifies a field on the unit macro box.
pub fn build_coefficient_field(spec: FieldSpec, label: &str) -> Result<CoefficientField> {
    build_coefficient_field_on(spec, label, &[[0.0, 1.0]; 3])
}

/// Builds and certifies a field whose slow profiles are bounded over `x_box`.
pub fn build_coefficient_field_on(
    spec: FieldSpec,
    label: &str,
    x_box: &[[f64; 2]; 3],
) -> Result<CoefficientField> {
    if let FieldSpec::Laminate { axis, .. } = &spec {
        if *axis > 2 {
            return Err(Error::Coefficient(format!("laminate axis {axis} out of range")));
        }
    }
    let (c1, c2) = certify(&spec, x_box)?;
    Ok(CoefficientField {
        spec,
        c1,
        c2,
        label: label.to_string(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct FieldSampleReport {
    pub samples: usize,
    pub symmetry_violations: usize,
    pub bound_violations: usize,
    pub observed_min_eig: f64,
    pub observed_max_norm: f64,
}

/// Random-argument audit of symmetry and `[c2, c1]` bounds.
pub fn sample_check_field(
    field: &CoefficientField,
    x_box: &[[f64; 2]; 3],
    samples: usize,
    seed: u64,
) -> FieldSampleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = FieldSampleReport {
        samples,
        symmetry_violations: 0,
        bound_violations: 0,
        observed_min_eig: f64::INFINITY,
        observed_max_norm: 0.0,
    };
    for _ in 0..samples {
        let x = [0, 1, 2].map(|a| rng.gen_range(x_box[a][0]..=x_box[a][1]));
        let w: Vec<f64> = (0..3).map(|_| rng.gen::<f64>()).collect();
        let z = [0, 1, 2].map(|_| rng.gen_range(-2.0..2.0));
        let m = field.eval(&x, &w, &z);
        if (m - m.transpose()).abs().max() > 1e-14 * m.abs().max().max(1.0) {
            rep.symmetry_violations += 1;
        }
        let (lmin, norm, _) = eig_bounds(&m);
        rep.observed_min_eig = rep.observed_min_eig.min(lmin);
        rep.observed_max_norm = rep.observed_max_norm.max(norm);
        let tol = 1e-12 * field.c1.max(1.0);
        if lmin < field.c2 - tol || norm > field.c1 + tol {
            rep.bound_violations += 1;
        }
    }
    rep
}

/// `μ(x, τ(x/ε)ω, x/ε²)`.
pub fn trace_eval(
    field: &CoefficientField,
    x: &[f64; 3],
    omega: &OmegaPoint,
    ds: &DynamicalSystemSpec,
    eps: f64,
) -> Result<Mat3> {
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::input(format!("scale must be positive, got {eps}")));
    }
    if ds.dim != 3 || omega.dim() != 3 {
        return Err(Error::input("trace evaluation needs a 3-dimensional dynamical system"));
    }
    let (w, z) = trace_args(x, &omega.coords, ds, eps);
    Ok(field.eval(x, &w, &z))
}

/// Micro arguments `(τ(x/ε)ω, frac(x/ε²))` of the trace at `x`.
#[inline]
pub fn trace_args(x: &[f64; 3], omega: &[f64], ds: &DynamicalSystemSpec, eps: f64) -> (Vec<f64>, [f64; 3]) {
    let y = [x[0] / eps, x[1] / eps, x[2] / eps];
    let w = tau_coords(ds, &y, omega);
    let e2 = eps * eps;
    let z = [frac(x[0] / e2), frac(x[1] / e2), frac(x[2] / e2)];
    (w, z)
}

/// Serializable conductivity family: `σ(ξ) = κ ξ + β ξ/(1+|ξ|)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConductivitySpec {
    Linear { kappa: ScalarFieldSpec },
    Saturating { kappa: ScalarFieldSpec, beta: f64 },
}

impl ConductivitySpec {
    pub fn linear(kappa: f64) -> Self {
        ConductivitySpec::Linear {
            kappa: ScalarFieldSpec::constant(kappa),
        }
    }

    pub fn saturating(kappa: f64, beta: f64) -> Self {
        ConductivitySpec::Saturating {
            kappa: ScalarFieldSpec::constant(kappa),
            beta,
        }
    }
}

/// Radial monotone conductivity `σ(x,ω,z,ξ) = g(x,ω,z,|ξ|)·ξ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConductivityLaw {
    pub spec: ConductivitySpec,
    pub lipschitz_c1: f64,
    pub monotone_delta: f64,
}

impl ConductivityLaw {
    pub fn new(spec: ConductivitySpec) -> Result<Self> {
        let kappa = match &spec {
            ConductivitySpec::Linear { kappa } | ConductivitySpec::Saturating { kappa, .. } => kappa,
        };
        kappa.validate()?;
        let beta = match &spec {
            ConductivitySpec::Linear { .. } => 0.0,
            ConductivitySpec::Saturating { beta, .. } => *beta,
        };
        if !beta.is_finite() {
            return Err(Error::Coefficient("beta must be finite".into()));
        }
        let (lo, hi) = kappa.bounds();
        // ξ/(1+|ξ|) is monotone with Lipschitz constant 1.
        let monotone_delta = lo + beta.min(0.0);
        let lipschitz_c1 = hi + beta.abs();
        Ok(Self {
            spec,
            lipschitz_c1,
            monotone_delta,
        })
    }

    pub fn kappa_field(&self) -> &ScalarFieldSpec {
        match &self.spec {
            ConductivitySpec::Linear { kappa } | ConductivitySpec::Saturating { kappa, .. } => kappa,
        }
    }

    pub fn beta(&self) -> f64 {
        match &self.spec {
            ConductivitySpec::Linear { .. } => 0.0,
            ConductivitySpec::Saturating { beta, .. } => *beta,
        }
    }

    pub fn is_linear(&self) -> bool {
        self.beta() == 0.0
    }

    #[inline]
    pub fn kappa(&self, omega: &[f64], z: &[f64; 3]) -> f64 {
        let zr = [frac(z[0]), frac(z[1]), frac(z[2])];
        self.kappa_field().eval(omega, &zr)
    }

    pub fn eval(&self, _x: &[f64; 3], omega: &[f64], z: &[f64; 3], xi: &[f64; 3]) -> [f64; 3] {
        let r = (xi[0] * xi[0] + xi[1] * xi[1] + xi[2] * xi[2]).sqrt();
        let g = radial_factor(self.kappa(omega, z), self.beta(), r);
        [g * xi[0], g * xi[1], g * xi[2]]
    }

    pub fn family(&self) -> &'static str {
        match &self.spec {
            ConductivitySpec::Linear { .. } => "linear",
            ConductivitySpec::Saturating { .. } => "saturating",
        }
    }
}

/// `g(r) = κ + β/(1+r)`.
#[inline]
pub fn radial_factor(kappa: f64, beta: f64, r: f64) -> f64 {
    kappa + beta / (1.0 + r)
}

/// Scalar law `u ↦ g(|u|)·u` and its derivative `κ + β/(1+|u|)²`.
#[inline]
pub fn scalar_sigma(kappa: f64, beta: f64, u: f64) -> (f64, f64) {
    let a = u.abs();
    let s = 1.0 + a;
    (kappa * u + beta * u / s, kappa + beta / (s * s))
}

pub fn sigma_eval(
    law: &ConductivityLaw,
    x: &[f64; 3],
    omega: &OmegaPoint,
    z: &[f64; 3],
    xi: &[f64; 3],
) -> [f64; 3] {
    law.eval(x, &omega.coords, z, xi)
}

#[derive(Debug, Clone, Serialize)]
pub struct NemytskiiCheck {
    /// `‖u_n − u‖` in discrete L².
    pub input_gaps: Vec<f64>,
    /// `‖σ(u_n) − σ(u)‖` in discrete L².
    pub output_gaps: Vec<f64>,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerificationReport {
    pub family: String,
    pub samples: usize,
    pub lipschitz_estimate: f64,
    pub monotonicity_estimate: f64,
    pub min_jacobian_form: f64,
    pub max_abs_at_zero: f64,
    pub nemytskii: NemytskiiCheck,
    pub tolerance: f64,
    pub pass: bool,
    pub violations: Vec<String>,
}

/// Statistical audit of the structure conditions of a conductivity law:
/// Lipschitz bound, strong monotonicity with δ ≥ 1, nonnegative Jacobian
/// form, vanishing at zero, and continuity of the induced superposition
/// operator on discrete L².
pub fn verify_conductivity(law: &ConductivityLaw, n_samples: usize, seed: u64) -> Result<VerificationReport> {
    if n_samples < 100 {
        return Err(Error::input(format!("need at least 100 samples, got {n_samples}")));
    }
    let tol = 1e-9;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c1_hat = 0.0f64;
    let mut delta_hat = f64::INFINITY;
    let mut form_min = f64::INFINITY;
    let mut zero_max = 0.0f64;
    let random_xi = |rng: &mut ChaCha8Rng| -> [f64; 3] {
        let scale = 10f64.powf(rng.gen_range(-3.0..2.0));
        [0, 1, 2].map(|_| scale * rng.gen_range(-1.0..1.0))
    };
    for _ in 0..n_samples {
        let x = [0, 1, 2].map(|_| rng.gen::<f64>());
        let w: Vec<f64> = (0..3).map(|_| rng.gen::<f64>()).collect();
        let z = [0, 1, 2].map(|_| rng.gen::<f64>());
        let a = random_xi(&mut rng);
        let b = random_xi(&mut rng);
        let sa = law.eval(&x, &w, &z, &a);
        let sb = law.eval(&x, &w, &z, &b);
        let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
        let ds = [sa[0] - sb[0], sa[1] - sb[1], sa[2] - sb[2]];
        let dd = dot3(&d, &d);
        if dd > 0.0 {
            c1_hat = c1_hat.max((dot3(&ds, &ds) / dd).sqrt());
            delta_hat = delta_hat.min(dot3(&ds, &d) / dd);
        }
        // Jacobian form (D_ξσ(a) v, v) by central differences.
        let v = random_xi(&mut rng);
        let h = 1e-5 * a.iter().fold(1.0f64, |m, c| m.max(c.abs()));
        let mut jv = [0.0; 3];
        for k in 0..3 {
            let mut ap = a;
            let mut am = a;
            ap[k] += h;
            am[k] -= h;
            let sp = law.eval(&x, &w, &z, &ap);
            let sm = law.eval(&x, &w, &z, &am);
            for i in 0..3 {
                jv[i] += (sp[i] - sm[i]) / (2.0 * h) * v[k];
            }
        }
        let vv = dot3(&v, &v);
        if vv > 0.0 {
            form_min = form_min.min(dot3(&jv, &v) / vv);
        }
        let s0 = law.eval(&x, &w, &z, &[0.0; 3]);
        zero_max = zero_max.max(s0.iter().fold(0.0f64, |m, c| m.max(c.abs())));
    }
    let nemytskii = nemytskii_check(law, &mut rng);
    let mut violations = Vec::new();
    if delta_hat < 1.0 - tol {
        violations.push(format!("monotonicity constant {delta_hat:.6} below 1"));
    }
    if form_min < -tol * c1_hat.max(1.0) {
        violations.push(format!("negative Jacobian form {form_min:e}"));
    }
    if zero_max > 0.0 {
        violations.push(format!("sigma(0) = {zero_max:e} != 0"));
    }
    if c1_hat > law.lipschitz_c1 * (1.0 + 1e-12) + tol {
        violations.push(format!(
            "observed Lipschitz {c1_hat} exceeds certified {}",
            law.lipschitz_c1
        ));
    }
    if !nemytskii.pass {
        violations.push("superposition operator is not continuous on the test sequence".into());
    }
    Ok(VerificationReport {
        family: law.family().to_string(),
        samples: n_samples,
        lipschitz_estimate: c1_hat,
        monotonicity_estimate: delta_hat,
        min_jacobian_form: form_min,
        max_abs_at_zero: zero_max,
        nemytskii,
        tolerance: tol,
        pass: violations.is_empty(),
        violations,
    })
}

fn nemytskii_check(law: &ConductivityLaw, rng: &mut ChaCha8Rng) -> NemytskiiCheck {
    let n = 256;
    let h = 1.0 / n as f64;
    let base: Vec<[f64; 3]> = (0..n)
        .map(|i| {
            let s = (i as f64 + 0.5) * h;
            [(6.0 * s).sin() * 3.0, s * s, (2.0 * s).cos()]
        })
        .collect();
    let pert: Vec<[f64; 3]> = (0..n)
        .map(|_| [0, 1, 2].map(|_| rng.gen_range(-1.0..1.0)))
        .collect();
    let w = [0.3, 0.6, 0.9];
    let eval_all = |u: &[[f64; 3]]| -> Vec<[f64; 3]> {
        u.iter()
            .enumerate()
            .map(|(i, xi)| {
                let s = (i as f64 + 0.5) * h;
                law.eval(&[s, 0.0, 0.0], &w, &[s, 0.0, 0.0], xi)
            })
            .collect()
    };
    let l2 = |a: &[[f64; 3]], b: &[[f64; 3]]| -> f64 {
        (a.iter()
            .zip(b)
            .map(|(p, q)| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2))
            .sum::<f64>()
            * h)
            .sqrt()
    };
    let s_base = eval_all(&base);
    let mut input_gaps = Vec::new();
    let mut output_gaps = Vec::new();
    for k in 0..8 {
        let t = 0.5f64.powi(k);
        let u: Vec<[f64; 3]> = base
            .iter()
            .zip(&pert)
            .map(|(b, p)| [b[0] + t * p[0], b[1] + t * p[1], b[2] + t * p[2]])
            .collect();
        input_gaps.push(l2(&u, &base));
        output_gaps.push(l2(&eval_all(&u), &s_base));
    }
    let pass = output_gaps.windows(2).all(|w| w[1] <= w[0] + 1e-15)
        && output_gaps
            .iter()
            .zip(&input_gaps)
            .all(|(o, i)| *o <= law.lipschitz_c1 * i * (1.0 + 1e-12) + 1e-15)
        && output_gaps.last().copied().unwrap_or(0.0) < 0.01 * output_gaps[0].max(1e-300);
    NemytskiiCheck {
        input_gaps,
        output_gaps,
        pass,
    }
}

#[inline]
fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lam13() -> CoefficientField {
        build_coefficient_field(FieldSpec::isotropic_laminate(0, 0.5, 1.0, 3.0), "eta").unwrap()
    }

    #[test]
    fn identity_field() {
        let f = build_coefficient_field(FieldSpec::constant(identity_spec()), "mu").unwrap();
        assert_eq!((f.c1, f.c2), (1.0, 1.0));
        assert_eq!(f.eval(&[0.3; 3], &[0.1, 0.2, 0.3], &[0.7; 3]), Mat3::identity());
    }

    #[test]
    fn laminate_bounds() {
        let f = lam13();
        assert!((f.c1 - 3.0).abs() < 1e-14 && (f.c2 - 1.0).abs() < 1e-14);
    }

    #[test]
    fn rejects_nonsymmetric_and_noncoercive() {
        let bad = [1.0, 0.5, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        assert!(matches!(
            build_coefficient_field(FieldSpec::constant(bad), "mu"),
            Err(Error::Coefficient(_))
        ));
        let mix = FieldSpec::SmoothMix {
            base: identity_spec(),
            perturbation: diag_spec([0.0, 2.0, 0.0]),
            slow: Default::default(),
            omega: TrigPoly::single(0.0, 1.0, 0, 1, 0.0),
            cell: TrigPoly::single(0.0, 1.0, 1, 1, 0.0),
        };
        let err = build_coefficient_field(mix, "mu").unwrap_err().to_string();
        assert!(err.contains("direction"), "{err}");
    }

    #[test]
    fn trace_examples() {
        let ds = DynamicalSystemSpec::ergodic(3, 0);
        let w = OmegaPoint::new(vec![0.2, 0.4, 0.6]).unwrap();
        let c = build_coefficient_field(FieldSpec::scalar_constant(2.0), "mu").unwrap();
        for eps in [0.5, 0.1, 0.013] {
            assert_eq!(trace_eval(&c, &[0.3, 0.2, 0.1], &w, &ds, eps).unwrap(), Mat3::identity() * 2.0);
        }
        let eps = 0.25;
        let m = trace_eval(&lam13(), &[eps * eps * 0.25, 0.0, 0.0], &w, &ds, eps).unwrap();
        assert_eq!(m, Mat3::identity());
        assert!(trace_eval(&c, &[0.0; 3], &w, &ds, 0.0).is_err());
    }

    #[test]
    fn smooth_mix_trace_varies_within_bounds() {
        let mix = FieldSpec::SmoothMix {
            base: diag_spec([2.0; 3]),
            perturbation: identity_spec(),
            slow: Default::default(),
            omega: TrigPoly::single(0.0, 0.5, 0, 1, 0.0),
            cell: TrigPoly::single(0.0, 1.0, 1, 1, 0.0),
        };
        let f = build_coefficient_field(mix, "eta").unwrap();
        let ds = DynamicalSystemSpec::ergodic(3, 0);
        let w = OmegaPoint::new(vec![0.1, 0.3, 0.5]).unwrap();
        let x = [0.37, 0.11, 0.52];
        let a = trace_eval(&f, &x, &w, &ds, 0.2).unwrap();
        let b = trace_eval(&f, &x, &w, &ds, 0.1).unwrap();
        assert!((a - b).abs().max() > 1e-6);
        for m in [a, b] {
            let (lmin, norm, _) = eig_bounds(&m);
            assert!(lmin >= f.c2 - 1e-12 && norm <= f.c1 + 1e-12);
        }
    }

    #[test]
    fn sampled_bounds_hold_for_all_families() {
        let specs = vec![
            FieldSpec::constant(diag_spec([1.0, 2.0, 3.0])),
            FieldSpec::isotropic_laminate(2, 0.3, 1.0, 4.0),
            FieldSpec::Checkerboard {
                phase_a: diag_spec([1.0; 3]),
                phase_b: [2.0, 0.5, 0.0, 0.5, 2.0, 0.0, 0.0, 0.0, 1.0],
            },
            FieldSpec::SmoothMix {
                base: diag_spec([3.0; 3]),
                perturbation: [1.0, 0.2, 0.0, 0.2, 1.0, 0.0, 0.0, 0.0, 1.0],
                slow: [Profile1D::Sin { freq: 3.0, phase: 0.0 }, Profile1D::One, Profile1D::One],
                omega: TrigPoly::single(0.0, 0.7, 1, 2, 0.3),
                cell: TrigPoly::single(0.5, 0.5, 0, 1, 0.0),
            },
            FieldSpec::Scaled {
                scalar: ScalarFieldSpec::Trig {
                    variable: MicroVariable::Omega,
                    poly: TrigPoly::single(1.0, 0.5, 2, 1, 0.0),
                },
                field: Box::new(FieldSpec::isotropic_laminate(0, 0.5, 1.0, 3.0)),
            },
        ];
        for spec in specs {
            let f = build_coefficient_field(spec, "mu").unwrap();
            let rep = sample_check_field(&f, &[[0.0, 1.0]; 3], 10_000, 5);
            assert_eq!(rep.symmetry_violations, 0);
            assert_eq!(rep.bound_violations, 0, "{rep:?}");
        }
    }

    #[test]
    fn sigma_examples() {
        let lin = ConductivityLaw::new(ConductivitySpec::linear(2.0)).unwrap();
        let sat = ConductivityLaw::new(ConductivitySpec::saturating(2.0, 0.5)).unwrap();
        let w = OmegaPoint::origin(3);
        for law in [&lin, &sat] {
            assert_eq!(sigma_eval(law, &[0.0; 3], &w, &[0.0; 3], &[0.0; 3]), [0.0; 3]);
        }
        assert_eq!(sigma_eval(&lin, &[0.0; 3], &w, &[0.0; 3], &[1.0, 0.0, 0.0]), [2.0, 0.0, 0.0]);
        let s = sigma_eval(&sat, &[0.0; 3], &w, &[0.0; 3], &[1.0, 0.0, 0.0]);
        assert!((s[0] - 2.25).abs() < 1e-15 && s[1] == 0.0 && s[2] == 0.0);
    }

    #[test]
    fn verification_reports() {
        let sat = ConductivityLaw::new(ConductivitySpec::saturating(2.0, 0.5)).unwrap();
        let r = verify_conductivity(&sat, 10_000, 1).unwrap();
        assert!(r.pass, "{:?}", r.violations);
        assert!(r.monotonicity_estimate >= 2.0 - 1e-6);
        assert!(r.lipschitz_estimate <= 2.5 + 1e-6);

        let lin = ConductivityLaw::new(ConductivitySpec::linear(1.0)).unwrap();
        let r = verify_conductivity(&lin, 1000, 2).unwrap();
        assert_eq!(r.monotonicity_estimate, 1.0);
        assert_eq!(r.lipschitz_estimate, 1.0);
        assert!(r.pass);

        let bad = ConductivityLaw::new(ConductivitySpec::linear(0.5)).unwrap();
        let r = verify_conductivity(&bad, 1000, 3).unwrap();
        assert!(!r.pass);
        assert!((r.monotonicity_estimate - 0.5).abs() < 0.01);
        assert!(verify_conductivity(&bad, 10, 3).is_err());
    }

    proptest! {
        #[test]
        fn monotone_pairs(a in proptest::array::uniform3(-50.0f64..50.0),
                          b in proptest::array::uniform3(-50.0f64..50.0),
                          kappa in 1.0f64..4.0, beta in 0.0f64..3.0) {
            let law = ConductivityLaw::new(ConductivitySpec::saturating(kappa, beta)).unwrap();
            let sa = law.eval(&[0.0; 3], &[0.0; 3], &[0.0; 3], &a);
            let sb = law.eval(&[0.0; 3], &[0.0; 3], &[0.0; 3], &b);
            let d = [a[0]-b[0], a[1]-b[1], a[2]-b[2]];
            let lhs = (sa[0]-sb[0])*d[0] + (sa[1]-sb[1])*d[1] + (sa[2]-sb[2])*d[2];
            prop_assert!(lhs >= law.monotone_delta * dot3(&d, &d) - 1e-10);
        }

        #[test]
        fn cell_argument_is_periodic(z in proptest::array::uniform3(0.0f64..1.0), k in proptest::array::uniform3(-3i32..3)) {
            let f = build_coefficient_field(FieldSpec::Checkerboard {
                phase_a: diag_spec([1.0; 3]), phase_b: diag_spec([2.0; 3]) }, "eta").unwrap();
            let zk = [z[0] + k[0] as f64, z[1] + k[1] as f64, z[2] + k[2] as f64];
            let w = [0.5; 3];
            // integer shifts of values away from phase boundaries reduce exactly
            let a = f.eval(&[0.0; 3], &w, &z);
            let b = f.eval(&[0.0; 3], &w, &zk);
            let near_edge = z.iter().any(|c| (c * 2.0 - (c * 2.0).round()).abs() < 1e-9);
            prop_assert!(near_edge || a == b);
        }
    }
}
