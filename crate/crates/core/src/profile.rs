//! Closed-form building blocks for data fields: 1D profiles, time profiles,
//! trigonometric polynomials on the unit cube, and separable vector fields
//! used for sources and initial data.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Profile1D {
    #[default]
    One,
    /// `sin(freq·s + phase)`
    Sin {
        freq: f64,
        #[serde(default)]
        phase: f64,
    },
    /// `cos(freq·s + phase)`
    Cos {
        freq: f64,
        #[serde(default)]
        phase: f64,
    },
    /// `Σ c_k s^k`
    Poly { coeffs: Vec<f64> },
    /// `exp(-((s - center)/width)^2)`
    Gaussian { center: f64, width: f64 },
}

impl Profile1D {
    #[inline]
    pub fn eval(&self, s: f64) -> f64 {
        match self {
            Profile1D::One => 1.0,
            Profile1D::Sin { freq, phase } => (freq * s + phase).sin(),
            Profile1D::Cos { freq, phase } => (freq * s + phase).cos(),
            Profile1D::Poly { coeffs } => coeffs.iter().rev().fold(0.0, |acc, c| acc * s + c),
            Profile1D::Gaussian { center, width } => (-((s - center) / width).powi(2)).exp(),
        }
    }

    /// Bounds of the profile on `[lo, hi]` (exact for trig and gaussian,
    /// sampled for polynomials).
    pub fn bounds(&self, lo: f64, hi: f64) -> (f64, f64) {
        match self {
            Profile1D::One => (1.0, 1.0),
            Profile1D::Sin { .. } | Profile1D::Cos { .. } => (-1.0, 1.0),
            Profile1D::Gaussian { .. } => (0.0, 1.0),
            Profile1D::Poly { .. } => {
                let n = 2048;
                (0..=n).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), i| {
                    let v = self.eval(lo + (hi - lo) * i as f64 / n as f64);
                    (a.min(v), b.max(v))
                })
            }
        }
    }

    pub fn is_one(&self) -> bool {
        matches!(self, Profile1D::One)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TimeProfile {
    #[default]
    One,
    Sin {
        freq: f64,
    },
    Cos {
        freq: f64,
    },
    /// `t^power`
    Power {
        power: i32,
    },
    /// `t·exp(-rate·t)`
    RampDecay {
        rate: f64,
    },
}

impl TimeProfile {
    #[inline]
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            TimeProfile::One => 1.0,
            TimeProfile::Sin { freq } => (freq * t).sin(),
            TimeProfile::Cos { freq } => (freq * t).cos(),
            TimeProfile::Power { power } => t.powi(*power),
            TimeProfile::RampDecay { rate } => t * (-rate * t).exp(),
        }
    }
}

/// One term `amp·cos(2π k·p + phase)` of a trigonometric polynomial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrigTerm {
    pub amp: f64,
    pub freqs: [i32; 3],
    #[serde(default)]
    pub phase: f64,
}

/// Periodic trigonometric polynomial on `[0,1)^3`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrigPoly {
    #[serde(default)]
    pub constant: f64,
    #[serde(default)]
    pub terms: Vec<TrigTerm>,
}

impl TrigPoly {
    pub fn constant(c: f64) -> Self {
        Self {
            constant: c,
            terms: vec![],
        }
    }

    /// `constant + amp·cos(2π·freq·p_axis + phase)`
    pub fn single(constant: f64, amp: f64, axis: usize, freq: i32, phase: f64) -> Self {
        let mut freqs = [0; 3];
        freqs[axis] = freq;
        Self {
            constant,
            terms: vec![TrigTerm { amp, freqs, phase }],
        }
    }

    #[inline]
    pub fn eval(&self, p: &[f64]) -> f64 {
        self.terms.iter().fold(self.constant, |acc, t| {
            let arg: f64 = t
                .freqs
                .iter()
                .zip(p)
                .map(|(&k, &x)| k as f64 * x)
                .sum();
            acc + t.amp * (2.0 * PI * arg + t.phase).cos()
        })
    }

    /// Certified bounds `constant ± Σ|amp|`.
    pub fn bounds(&self) -> (f64, f64) {
        let s: f64 = self.terms.iter().map(|t| t.amp.abs()).sum();
        (self.constant - s, self.constant + s)
    }

    /// Exact mean over the unit cube.
    pub fn mean(&self) -> f64 {
        self.constant
            + self
                .terms
                .iter()
                .filter(|t| t.freqs == [0, 0, 0])
                .map(|t| t.amp * t.phase.cos())
                .sum::<f64>()
    }

    /// Axes along which the polynomial actually varies.
    pub fn axes(&self) -> [bool; 3] {
        let mut a = [false; 3];
        for t in &self.terms {
            if t.amp == 0.0 {
                continue;
            }
            for (i, &k) in t.freqs.iter().enumerate() {
                if k != 0 {
                    a[i] = true;
                }
            }
        }
        a
    }

    pub fn is_constant(&self) -> bool {
        self.axes() == [false; 3]
    }
}

/// `amplitude · e_component · Π_a spatial[a](x_a) · temporal(t)`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeparableTerm {
    pub component: usize,
    pub amplitude: f64,
    #[serde(default)]
    pub spatial: [Profile1D; 3],
    #[serde(default)]
    pub temporal: TimeProfile,
}

impl SeparableTerm {
    #[inline]
    pub fn spatial_value(&self, x: &[f64; 3]) -> f64 {
        self.amplitude
            * self.spatial[0].eval(x[0])
            * self.spatial[1].eval(x[1])
            * self.spatial[2].eval(x[2])
    }
}

/// Sum of separable vector-valued terms. Used for sources `F(x,t)` and for
/// initial fields, where the temporal factor is ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct VectorFieldSpec {
    #[serde(default)]
    pub terms: Vec<SeparableTerm>,
}

impl VectorFieldSpec {
    pub fn zero() -> Self {
        Self { terms: vec![] }
    }

    pub fn single(component: usize, amplitude: f64, spatial: [Profile1D; 3], temporal: TimeProfile) -> Self {
        Self {
            terms: vec![SeparableTerm {
                component,
                amplitude,
                spatial,
                temporal,
            }],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.terms.iter().all(|t| t.amplitude == 0.0)
    }

    /// Component `c` at `(x, t)`.
    #[inline]
    pub fn component(&self, c: usize, x: &[f64; 3], t: f64) -> f64 {
        self.terms
            .iter()
            .filter(|term| term.component == c)
            .map(|term| term.spatial_value(x) * term.temporal.eval(t))
            .sum()
    }

    /// Component `c` at `x`, ignoring temporal factors (initial data).
    #[inline]
    pub fn spatial_component(&self, c: usize, x: &[f64; 3]) -> f64 {
        self.terms
            .iter()
            .filter(|term| term.component == c)
            .map(|term| term.spatial_value(x))
            .sum()
    }

    pub fn validate(&self) -> crate::Result<()> {
        if let Some(t) = self.terms.iter().find(|t| t.component > 2) {
            return Err(crate::Error::input(format!(
                "vector field component {} out of range",
                t.component
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trig_poly_mean_and_bounds() {
        let p = TrigPoly::single(1.0, 0.5, 0, 1, 0.0);
        assert_eq!(p.bounds(), (0.5, 1.5));
        assert_eq!(p.mean(), 1.0);
        assert_eq!(p.axes(), [true, false, false]);
        assert!((p.eval(&[0.5, 0.0, 0.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn poly_profile_horner() {
        let p = Profile1D::Poly {
            coeffs: vec![1.0, 2.0, 3.0],
        };
        assert_eq!(p.eval(2.0), 1.0 + 4.0 + 12.0);
    }
}
