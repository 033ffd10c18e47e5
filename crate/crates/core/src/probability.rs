//! Torus realization of the probability space and its dynamical system.
//!
//! Λ is the flat torus `[0,1)^dim` with Lebesgue measure and the group acts
//! by `τ(y)ω = ω + A·y mod 1` on the active coordinates. Coordinates flagged
//! in the invariant mask are never moved, so functions of those coordinates
//! are exactly the invariant functions of the system.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reduce a real number to `[0, 1)`.
#[inline]
pub fn frac(v: f64) -> f64 {
    let r = v - v.floor();
    if r >= 1.0 {
        0.0
    } else {
        r
    }
}

/// Shortest distance between two points of the unit circle.
#[inline]
pub fn circle_distance(a: f64, b: f64) -> f64 {
    let d = frac(a - b);
    d.min(1.0 - d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicalSystemSpec {
    #[serde(default = "default_dim")]
    pub dim: usize,
    /// Row-major `dim × dim` shift matrix. Empty means the identity.
    #[serde(default)]
    pub shift_matrix: Vec<f64>,
    /// `true` marks a coordinate the dynamics never touches. Empty means no
    /// coordinate is masked.
    #[serde(default)]
    pub invariant_mask: Vec<bool>,
    #[serde(default)]
    pub seed: u64,
}

fn default_dim() -> usize {
    3
}

impl Default for DynamicalSystemSpec {
    fn default() -> Self {
        Self::ergodic(3, 0)
    }
}

impl DynamicalSystemSpec {
    /// Identity shift on every coordinate.
    pub fn ergodic(dim: usize, seed: u64) -> Self {
        Self {
            dim,
            shift_matrix: identity(dim),
            invariant_mask: vec![false; dim],
            seed,
        }
    }

    /// Identity shift with the given (0-based) coordinates held invariant.
    pub fn with_invariant(dim: usize, masked: &[usize], seed: u64) -> Self {
        let mut mask = vec![false; dim];
        for &m in masked {
            if m < dim {
                mask[m] = true;
            }
        }
        Self {
            dim,
            shift_matrix: identity(dim),
            invariant_mask: mask,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::input("dynamical system dimension must be positive"));
        }
        if !self.shift_matrix.is_empty() && self.shift_matrix.len() != self.dim * self.dim {
            return Err(Error::input(format!(
                "shift_matrix has {} entries, expected {}",
                self.shift_matrix.len(),
                self.dim * self.dim
            )));
        }
        if !self.invariant_mask.is_empty() && self.invariant_mask.len() != self.dim {
            return Err(Error::input(format!(
                "invariant_mask has length {}, expected {}",
                self.invariant_mask.len(),
                self.dim
            )));
        }
        if self.shift_matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("shift_matrix contains non-finite entries"));
        }
        Ok(())
    }

    #[inline]
    pub fn shift(&self, row: usize, col: usize) -> f64 {
        if self.shift_matrix.is_empty() {
            if row == col {
                1.0
            } else {
                0.0
            }
        } else {
            self.shift_matrix[row * self.dim + col]
        }
    }

    #[inline]
    pub fn is_masked(&self, coord: usize) -> bool {
        self.invariant_mask.get(coord).copied().unwrap_or(false)
    }

    pub fn masked_coords(&self) -> Vec<usize> {
        (0..self.dim).filter(|&i| self.is_masked(i)).collect()
    }

    pub fn active_coords(&self) -> Vec<usize> {
        (0..self.dim).filter(|&i| !self.is_masked(i)).collect()
    }

    pub fn ergodic_flag(&self) -> bool {
        self.masked_coords().is_empty()
    }

    /// True when `A` has no off-diagonal coupling, which the torus cell
    /// solver relies on.
    pub fn is_diagonal_shift(&self) -> bool {
        (0..self.dim).all(|r| (0..self.dim).all(|c| r == c || self.shift(r, c) == 0.0))
    }
}

fn identity(dim: usize) -> Vec<f64> {
    let mut m = vec![0.0; dim * dim];
    for i in 0..dim {
        m[i * dim + i] = 1.0;
    }
    m
}

/// Sample point of Λ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OmegaPoint {
    pub coords: Vec<f64>,
}

impl OmegaPoint {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.iter().any(|c| !(0.0..1.0).contains(c)) {
            return Err(Error::input(format!(
                "omega coordinates must lie in [0,1): {coords:?}"
            )));
        }
        Ok(Self { coords })
    }

    pub fn origin(dim: usize) -> Self {
        Self {
            coords: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    /// Maximum coordinate-wise distance on the torus.
    pub fn torus_distance(&self, other: &OmegaPoint) -> f64 {
        self.coords
            .iter()
            .zip(&other.coords)
            .map(|(a, b)| circle_distance(*a, *b))
            .fold(0.0, f64::max)
    }
}

/// Time microstructure of the two-scale setting. Only the collapsed
/// (singleton) realization exists: the problem has no fast time variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TimeMicro {
    #[default]
    Trivial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoScaleConfig {
    pub time_micro: TimeMicro,
    pub reason: String,
}

impl Default for TwoScaleConfig {
    fn default() -> Self {
        Self {
            time_micro: TimeMicro::Trivial,
            reason: "no t/eps oscillation in the data; time-micro correctors vanish".into(),
        }
    }
}

/// `τ(y)ω`.
pub fn tau_apply(ds: &DynamicalSystemSpec, y: &[f64], omega: &OmegaPoint) -> Result<OmegaPoint> {
    if y.len() != ds.dim || omega.dim() != ds.dim {
        return Err(Error::input(format!(
            "dimension mismatch: system dim {}, displacement {}, omega {}",
            ds.dim,
            y.len(),
            omega.dim()
        )));
    }
    Ok(OmegaPoint {
        coords: tau_coords(ds, y, &omega.coords),
    })
}

/// Unchecked core of [`tau_apply`] for hot loops.
pub(crate) fn tau_coords(ds: &DynamicalSystemSpec, y: &[f64], omega: &[f64]) -> Vec<f64> {
    (0..ds.dim)
        .map(|r| {
            if ds.is_masked(r) {
                omega[r]
            } else {
                let shift: f64 = (0..ds.dim).map(|c| ds.shift(r, c) * y[c]).sum();
                frac(omega[r] + shift)
            }
        })
        .collect()
}

/// Uniform sample of the torus. Point `i` depends only on `(seed, i)`.
pub fn sample_omega(ds: &DynamicalSystemSpec, count: usize) -> Vec<OmegaPoint> {
    (0..count)
        .into_par_iter()
        .map(|i| sample_one(ds.seed, ds.dim, i as u64))
        .collect()
}

fn sample_one(seed: u64, dim: usize, index: u64) -> OmegaPoint {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    OmegaPoint {
        coords: (0..dim).map(|_| rng.gen::<f64>()).collect(),
    }
}

/// Scalar function sampled on a uniform periodic grid of the torus. Axis 0
/// varies slowest.
#[derive(Debug, Clone, PartialEq)]
pub struct TorusGridFn {
    pub n: Vec<usize>,
    pub data: Vec<f64>,
}

impl TorusGridFn {
    pub fn from_fn(n: &[usize], f: impl Fn(&[f64]) -> f64) -> Self {
        let total: usize = n.iter().product();
        let mut data = Vec::with_capacity(total);
        let mut idx = vec![0usize; n.len()];
        let mut point = vec![0.0; n.len()];
        for _ in 0..total {
            for (a, p) in point.iter_mut().enumerate() {
                *p = idx[a] as f64 / n[a] as f64;
            }
            data.push(f(&point));
            for a in (0..n.len()).rev() {
                idx[a] += 1;
                if idx[a] < n[a] {
                    break;
                }
                idx[a] = 0;
            }
        }
        Self { n: n.to_vec(), data }
    }

    fn strides(&self) -> Vec<usize> {
        let mut s = vec![1; self.n.len()];
        for a in (0..self.n.len().saturating_sub(1)).rev() {
            s[a] = s[a + 1] * self.n[a + 1];
        }
        s
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Coordinates of the grid point with flat index `flat`.
    pub fn point(&self, flat: usize) -> Vec<f64> {
        let strides = self.strides();
        self.n
            .iter()
            .zip(&strides)
            .map(|(&n, &s)| ((flat / s) % n) as f64 / n as f64)
            .collect()
    }
}

/// Stochastic derivative `D_i^ω f`: the directional derivative along `A·e_i`
/// by second-order central differences on the periodic grid.
pub fn stochastic_derivative(
    f: &TorusGridFn,
    ds: &DynamicalSystemSpec,
    axis: usize,
) -> Result<TorusGridFn> {
    if axis >= ds.dim {
        return Err(Error::input(format!("axis {axis} out of range for dim {}", ds.dim)));
    }
    if f.n.len() != ds.dim {
        return Err(Error::input("grid function dimension differs from system dimension"));
    }
    if f.n.iter().any(|&n| n < 4) {
        return Err(Error::input(format!("grid too coarse: {:?} (need >= 4 per axis)", f.n)));
    }
    let strides = f.strides();
    // Masked coordinates are never moved, so they contribute no derivative.
    let dir: Vec<f64> = (0..ds.dim)
        .map(|r| if ds.is_masked(r) { 0.0 } else { ds.shift(r, axis) })
        .collect();
    let mut out = vec![0.0; f.data.len()];
    for (flat, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (a, &w) in dir.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let n = f.n[a];
            let i = (flat / strides[a]) % n;
            let base = flat - i * strides[a];
            let ip = base + ((i + 1) % n) * strides[a];
            let im = base + ((i + n - 1) % n) * strides[a];
            acc += w * (f.data[ip] - f.data[im]) * n as f64 / 2.0;
        }
        *o = acc;
    }
    Ok(TorusGridFn {
        n: f.n.clone(),
        data: out,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FiberMean {
    /// Centers of the bins of the masked coordinates, in mask order.
    pub center: Vec<f64>,
    pub mean: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum ErgodicAverage {
    Scalar { mean: f64, std_error: f64 },
    Fibers { bin_width: f64, fibers: Vec<FiberMean> },
}

/// Monte-Carlo average over Λ. For non-ergodic systems the result is a table
/// of conditional means over `bins` equal bins per masked coordinate.
pub fn ergodic_average(
    f: impl Fn(&OmegaPoint) -> f64 + Sync,
    ds: &DynamicalSystemSpec,
    count: usize,
    bins: usize,
) -> ErgodicAverage {
    let samples = sample_omega(ds, count.max(1));
    let values: Vec<f64> = samples.par_iter().map(&f).collect();
    let masked = ds.masked_coords();
    if masked.is_empty() {
        let (mean, std_error) = mean_and_stderr(&values);
        return ErgodicAverage::Scalar { mean, std_error };
    }
    let bins = bins.max(1);
    let n_fibers = bins.pow(masked.len() as u32);
    let mut sums = vec![0.0; n_fibers];
    let mut counts = vec![0usize; n_fibers];
    for (s, v) in samples.iter().zip(&values) {
        let mut key = 0;
        for &m in &masked {
            let b = ((s.coords[m] * bins as f64) as usize).min(bins - 1);
            key = key * bins + b;
        }
        sums[key] += v;
        counts[key] += 1;
    }
    let width = 1.0 / bins as f64;
    let fibers = (0..n_fibers)
        .map(|key| {
            let mut center = vec![0.0; masked.len()];
            let mut k = key;
            for c in center.iter_mut().rev() {
                *c = ((k % bins) as f64 + 0.5) * width;
                k /= bins;
            }
            FiberMean {
                center,
                mean: if counts[key] > 0 {
                    sums[key] / counts[key] as f64
                } else {
                    f64::NAN
                },
                count: counts[key],
            }
        })
        .collect();
    ErgodicAverage::Fibers {
        bin_width: width,
        fibers,
    }
}

pub fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < x.len() && j < y.len() {
        let v = x[i].min(y[j]);
        while i < x.len() && x[i] <= v {
            i += 1;
        }
        while j < y.len() && y[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / x.len() as f64 - j as f64 / y.len() as f64).abs());
    }
    d
}

/// KS critical value at the two-sided 3σ level (α ≈ 0.0027).
pub fn ks_critical_3sigma(n: usize, m: usize) -> f64 {
    let c = (-0.5 * (0.0027f64 / 2.0).ln()).sqrt();
    c * ((n + m) as f64 / (n * m) as f64).sqrt()
}

#[derive(Debug, Clone, Serialize)]
pub struct InvarianceReport {
    pub count: usize,
    pub ks_per_coord: Vec<f64>,
    pub threshold: f64,
    pub pass: bool,
}

/// Compares the empirical marginals of `{ω_s}` and `{τ(y)ω'_s}` for an
/// independent sample `{ω'_s}`.
pub fn measure_invariance(
    ds: &DynamicalSystemSpec,
    y: &[f64],
    count: usize,
) -> Result<InvarianceReport> {
    // the shifted batch uses independent draws so the two-sample threshold applies
    let mut base = sample_omega(ds, 2 * count);
    let fresh = base.split_off(count);
    let moved = fresh
        .iter()
        .map(|w| tau_apply(ds, y, w))
        .collect::<Result<Vec<_>>>()?;
    let ks_per_coord: Vec<f64> = (0..ds.dim)
        .map(|c| {
            let a: Vec<f64> = base.iter().map(|w| w.coords[c]).collect();
            let b: Vec<f64> = moved.iter().map(|w| w.coords[c]).collect();
            ks_statistic(&a, &b)
        })
        .collect();
    let threshold = ks_critical_3sigma(count, count);
    Ok(InvarianceReport {
        count,
        pass: ks_per_coord.iter().all(|&d| d <= threshold),
        ks_per_coord,
        threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn w(c: &[f64]) -> OmegaPoint {
        OmegaPoint::new(c.to_vec()).unwrap()
    }

    #[test]
    fn shift_examples() {
        let ds = DynamicalSystemSpec::ergodic(3, 1);
        let p = tau_apply(&ds, &[0.25, 0.0, 0.0], &w(&[0.5, 0.5, 0.5])).unwrap();
        assert_eq!(p.coords, vec![0.75, 0.5, 0.5]);
        let p = tau_apply(&ds, &[0.8, 0.0, 0.0], &w(&[0.5, 0.5, 0.5])).unwrap();
        assert!((p.coords[0] - 0.3).abs() < 1e-15);
        let q = w(&[0.1, 0.7, 0.9]);
        assert_eq!(tau_apply(&ds, &[0.0; 3], &q).unwrap(), q);
    }

    #[test]
    fn shift_rejects_dimension_mismatch() {
        let ds = DynamicalSystemSpec::ergodic(3, 1);
        assert!(tau_apply(&ds, &[0.1, 0.2], &w(&[0.5, 0.5, 0.5])).is_err());
    }

    #[test]
    fn sampling_is_reproducible() {
        let ds = DynamicalSystemSpec::ergodic(3, 42);
        let a = sample_omega(&ds, 1);
        let b = sample_omega(&ds, 1);
        assert_eq!(a[0].coords[0].to_bits(), b[0].coords[0].to_bits());
        // prefix property: point i does not depend on the total count
        let c = sample_omega(&ds, 10);
        assert_eq!(a[0], c[0]);
    }

    #[test]
    fn indicator_mean_and_shift_invariance() {
        let ds = DynamicalSystemSpec::ergodic(3, 7);
        let n = 10_000;
        let pts = sample_omega(&ds, n);
        let ind = |p: &OmegaPoint| if p.coords[0] < 0.5 { 1.0 } else { 0.0 };
        let m0 = pts.iter().map(ind).sum::<f64>() / n as f64;
        assert!((m0 - 0.5).abs() < 0.015, "{m0}");
        let m1 = pts
            .iter()
            .map(|p| ind(&tau_apply(&ds, &[0.37, 0.0, 0.0], p).unwrap()))
            .sum::<f64>()
            / n as f64;
        assert!((m1 - m0).abs() < 0.03, "{m0} {m1}");
    }

    #[test]
    fn derivative_of_sine() {
        let ds = DynamicalSystemSpec::ergodic(3, 0);
        let n = 64;
        let f = TorusGridFn::from_fn(&[n, 8, 8], |p| (2.0 * PI * p[0]).sin());
        let d = stochastic_derivative(&f, &ds, 0).unwrap();
        let h = 1.0 / n as f64;
        for (i, v) in d.data.iter().enumerate() {
            let p = f.point(i);
            let exact = 2.0 * PI * (2.0 * PI * p[0]).cos();
            // central difference error (2π)^3 h^2 / 6
            assert!((v - exact).abs() < (2.0 * PI).powi(3) * h * h / 6.0 + 1e-12);
        }
    }

    #[test]
    fn derivative_of_constant_and_invariant() {
        let ds = DynamicalSystemSpec::with_invariant(3, &[1], 0);
        let c = TorusGridFn::from_fn(&[8, 8, 8], |_| 3.5);
        assert_eq!(stochastic_derivative(&c, &ds, 0).unwrap().max_abs(), 0.0);
        let g = TorusGridFn::from_fn(&[8, 8, 8], |p| (2.0 * PI * p[1]).sin() + p[1]);
        let d = stochastic_derivative(&g, &ds, 0).unwrap();
        assert!(d.max_abs() < 1e-10);
        assert!(stochastic_derivative(&TorusGridFn::from_fn(&[3, 8, 8], |_| 0.0), &ds, 0).is_err());
    }

    #[test]
    fn averages() {
        let ds = DynamicalSystemSpec::ergodic(3, 3);
        let n = 4000;
        match ergodic_average(|p| (2.0 * PI * p.coords[0]).sin(), &ds, n, 4) {
            ErgodicAverage::Scalar { mean, .. } => assert!(mean.abs() < 3.0 / (n as f64).sqrt()),
            other => panic!("{other:?}"),
        }
        match ergodic_average(|_| 1.0, &ds, 17, 4) {
            ErgodicAverage::Scalar { mean, .. } => assert_eq!(mean, 1.0),
            other => panic!("{other:?}"),
        }
        let nds = DynamicalSystemSpec::with_invariant(3, &[2], 3);
        match ergodic_average(|p| p.coords[2], &nds, n, 4) {
            ErgodicAverage::Fibers { bin_width, fibers } => {
                assert_eq!(fibers.len(), 4);
                for fb in fibers {
                    assert!((fb.mean - fb.center[0]).abs() <= bin_width);
                }
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ks_detects_shifted_distribution() {
        let a: Vec<f64> = (0..1000).map(|i| i as f64 / 1000.0).collect();
        let b: Vec<f64> = a.iter().map(|v| v * 0.5).collect();
        assert!(ks_statistic(&a, &b) > ks_critical_3sigma(1000, 1000));
        assert!(ks_statistic(&a, &a) == 0.0);
    }

    proptest! {
        #[test]
        fn group_law(x in proptest::array::uniform3(-5.0f64..5.0),
                     y in proptest::array::uniform3(-5.0f64..5.0),
                     o in proptest::array::uniform3(0.0f64..1.0)) {
            let ds = DynamicalSystemSpec {
                dim: 3,
                shift_matrix: vec![1.0, 0.3, 0.0, 0.0, 1.0, 0.0, 0.2, 0.0, 1.0],
                invariant_mask: vec![false, false, true],
                seed: 0,
            };
            let w = OmegaPoint::new(o.to_vec()).unwrap();
            let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + b).collect();
            let lhs = tau_apply(&ds, &xy, &w).unwrap();
            let rhs = tau_apply(&ds, &x, &tau_apply(&ds, &y, &w).unwrap()).unwrap();
            prop_assert!(lhs.torus_distance(&rhs) < 1e-12);
            prop_assert_eq!(lhs.coords[2], o[2]);
        }
    }
}
