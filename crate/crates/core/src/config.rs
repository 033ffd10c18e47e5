//! Strict TOML run configuration. Every problem found is reported at once.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::cell::{CellResolution, ClosureMode};
use crate::coefficients::{build_coefficient_field, ConductivityLaw, ConductivitySpec, FieldSpec};
use crate::error::{Error, Result};
use crate::galerkin::Theta;
use crate::probability::DynamicalSystemSpec;
use crate::profile::VectorFieldSpec;
use crate::twoscale::TestFunction;
use crate::yee::GridSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientsConfig {
    pub mu: FieldSpec,
    pub eta: FieldSpec,
    pub sigma: ConductivitySpec,
}

/// Λ = T^dim with the shift `ω + A·y`; the seed lives at the top level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsConfig {
    #[serde(default = "three")]
    pub dim: usize,
    #[serde(default)]
    pub shift_matrix: Vec<f64>,
    #[serde(default)]
    pub invariant_mask: Vec<bool>,
}

fn three() -> usize {
    3
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        Self {
            dim: 3,
            shift_matrix: vec![],
            invariant_mask: vec![],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "VectorFieldSpec::zero")]
    pub source: VectorFieldSpec,
    #[serde(default = "VectorFieldSpec::zero")]
    pub e0: VectorFieldSpec,
    #[serde(default = "VectorFieldSpec::zero")]
    pub h0: VectorFieldSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    /// Store every `stride`-th step in the binary field records.
    #[serde(default)]
    pub stride: Option<usize>,
    /// Number of ω samples for ε-runs.
    #[serde(default = "one")]
    pub omega_samples: usize,
    #[serde(default = "yes")]
    pub track_divergence: bool,
}

fn one() -> usize {
    1
}
fn yes() -> bool {
    true
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            stride: None,
            omega_samples: 1,
            track_divergence: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSection {
    #[serde(default)]
    pub resolution: CellResolution,
    #[serde(default)]
    pub mode: ClosureMode,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HomSection {
    /// Macro grid for the homogenized run; defaults to `[grid]`.
    #[serde(default)]
    pub grid: Option<GridSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwoScaleSection {
    pub test_function: TestFunction,
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Grid points per ε² period on the refined axes.
    #[serde(default = "default_ppp")]
    pub points_per_period: usize,
    /// Axes refined to `ε²/points_per_period` for each ε.
    #[serde(default)]
    pub refine_axes: [bool; 3],
}

fn default_samples() -> usize {
    32
}
fn default_ppp() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GalerkinSection {
    #[serde(default = "default_modes")]
    pub modes: usize,
    /// Quadrature nodes; defaults to `8·modes`.
    #[serde(default)]
    pub quadrature: Option<usize>,
    /// Output spacing of the trajectory.
    #[serde(default = "default_dt_out")]
    pub dt_out: f64,
    /// Time step of the implicit nonlinear solver.
    #[serde(default = "default_implicit_dt")]
    pub implicit_dt: f64,
    /// Extra separable nonlinearity `β θ(ℓ(ψ)) s` on the first mode.
    #[serde(default)]
    pub extra: Option<ExtraNonlinearity>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtraNonlinearity {
    pub theta: Theta,
    pub beta: f64,
}

fn default_modes() -> usize {
    32
}
fn default_dt_out() -> f64 {
    0.01
}
fn default_implicit_dt() -> f64 {
    1e-3
}

impl Default for GalerkinSection {
    fn default() -> Self {
        Self {
            modes: default_modes(),
            quadrature: None,
            dt_out: default_dt_out(),
            implicit_dt: default_implicit_dt(),
            extra: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpsilonSection {
    pub values: Vec<f64>,
}

/// Fully defaulted configuration; serialized into the manifest.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: Option<usize>,
    pub grid: Option<GridSpec>,
    pub coefficients: Option<CoefficientsConfig>,
    pub dynamics: DynamicsConfig,
    pub data: DataConfig,
    pub epsilon: Vec<f64>,
    pub run: RunSection,
    pub cell: CellSection,
    pub hom: HomSection,
    pub twoscale: Option<TwoScaleSection>,
    pub galerkin: GalerkinSection,
}

const SECTIONS: &[&str] = &[
    "seed",
    "workers",
    "grid",
    "coefficients",
    "dynamics",
    "data",
    "epsilon",
    "run",
    "cell",
    "hom",
    "twoscale",
    "galerkin",
];

fn section<T: DeserializeOwned>(table: &toml::Table, key: &str, errors: &mut Vec<String>) -> Option<T> {
    let v = table.get(key)?;
    match v.clone().try_into::<T>() {
        Ok(t) => Some(t),
        Err(e) => {
            errors.push(format!("[{key}] {}", e.to_string().trim()));
            None
        }
    }
}

impl RunConfig {
    pub fn dynamical_system(&self) -> DynamicalSystemSpec {
        DynamicalSystemSpec {
            dim: self.dynamics.dim,
            shift_matrix: self.dynamics.shift_matrix.clone(),
            invariant_mask: self.dynamics.invariant_mask.clone(),
            seed: self.seed,
        }
    }

    pub fn require_grid(&self) -> Result<&GridSpec> {
        self.grid.as_ref().ok_or_else(|| Error::config("this scenario needs a [grid] section"))
    }

    pub fn require_coefficients(&self) -> Result<&CoefficientsConfig> {
        self.coefficients
            .as_ref()
            .ok_or_else(|| Error::config("this scenario needs a [coefficients] section"))
    }

    pub fn hom_grid(&self) -> Result<&GridSpec> {
        match &self.hom.grid {
            Some(g) => Ok(g),
            None => self.require_grid(),
        }
    }

    pub fn first_epsilon(&self) -> Result<f64> {
        self.epsilon
            .first()
            .copied()
            .ok_or_else(|| Error::config("this scenario needs [epsilon] values"))
    }
}

/// Parses and validates a configuration, collecting every error.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::config(format!("TOML syntax: {}", e.to_string().trim())))?;
    let mut errors = Vec::new();
    for key in table.keys() {
        if !SECTIONS.contains(&key.as_str()) {
            errors.push(format!("unknown key `{key}` (expected one of {})", SECTIONS.join(", ")));
        }
    }
    let seed = match table.get("seed") {
        None => {
            errors.push("missing `seed`: every run must name its random seed".to_string());
            None
        }
        Some(v) => match v.as_integer() {
            Some(s) if s >= 0 => Some(s as u64),
            _ => {
                errors.push(format!("`seed` must be a non-negative integer, got {v}"));
                None
            }
        },
    };
    let workers = match table.get("workers") {
        None => None,
        Some(v) => match v.as_integer() {
            Some(w) if w >= 1 => Some(w as usize),
            _ => {
                errors.push(format!("`workers` must be a positive integer, got {v}"));
                None
            }
        },
    };
    let grid: Option<GridSpec> = section(&table, "grid", &mut errors);
    let coefficients: Option<CoefficientsConfig> = section(&table, "coefficients", &mut errors);
    let dynamics: Option<DynamicsConfig> = section(&table, "dynamics", &mut errors);
    let data: Option<DataConfig> = section(&table, "data", &mut errors);
    let epsilon: Option<EpsilonSection> = section(&table, "epsilon", &mut errors);
    let run: Option<RunSection> = section(&table, "run", &mut errors);
    let cell: Option<CellSection> = section(&table, "cell", &mut errors);
    let hom: Option<HomSection> = section(&table, "hom", &mut errors);
    let twoscale: Option<TwoScaleSection> = section(&table, "twoscale", &mut errors);
    let galerkin: Option<GalerkinSection> = section(&table, "galerkin", &mut errors);

    if let Some(g) = &grid {
        if let Err(e) = g.validate() {
            errors.push(format!("[grid] {e}"));
        }
    }
    if let Some(HomSection { grid: Some(g) }) = &hom {
        if let Err(e) = g.validate() {
            errors.push(format!("[hom.grid] {e}"));
        }
    }
    if let Some(c) = &coefficients {
        for (name, spec) in [("mu", &c.mu), ("eta", &c.eta)] {
            if let Err(e) = build_coefficient_field(spec.clone(), name) {
                errors.push(format!("[coefficients.{name}] {e}"));
            }
        }
        if let Err(e) = ConductivityLaw::new(c.sigma.clone()) {
            errors.push(format!("[coefficients.sigma] {e}"));
        }
    }
    let dynamics = dynamics.unwrap_or_default();
    let ds = DynamicalSystemSpec {
        dim: dynamics.dim,
        shift_matrix: dynamics.shift_matrix.clone(),
        invariant_mask: dynamics.invariant_mask.clone(),
        seed: seed.unwrap_or(0),
    };
    if let Err(e) = ds.validate() {
        errors.push(format!("[dynamics] {e}"));
    }
    if let Some(d) = &data {
        for (name, v) in [("source", &d.source), ("e0", &d.e0), ("h0", &d.h0)] {
            if let Err(e) = v.validate() {
                errors.push(format!("[data.{name}] {e}"));
            }
        }
    }
    let eps_values = epsilon.map(|e| e.values).unwrap_or_default();
    if eps_values.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
        errors.push(format!("[epsilon] values must be positive and finite, got {eps_values:?}"));
    }
    if eps_values.windows(2).any(|w| w[1] >= w[0]) {
        errors.push(format!("[epsilon] values must be sorted strictly decreasing, got {eps_values:?}"));
    }
    if let Some(r) = &run {
        if r.omega_samples == 0 {
            errors.push("[run] omega_samples must be at least 1".to_string());
        }
        if r.stride == Some(0) {
            errors.push("[run] stride must be at least 1".to_string());
        }
    }
    if let Some(c) = &cell {
        let r = c.resolution;
        if r.z < 4 || r.omega < 4 || r.fibers == 0 {
            errors.push(format!("[cell] resolutions must be at least 4 and fibers at least 1, got {r:?}"));
        }
    }
    if let Some(t) = &twoscale {
        if let Err(e) = t.test_function.validate() {
            errors.push(format!("[twoscale] {e}"));
        }
        if t.samples == 0 {
            errors.push("[twoscale] samples must be at least 1".to_string());
        }
        if t.points_per_period < 2 {
            errors.push("[twoscale] points_per_period must be at least 2 so that ε² ≥ 2h".to_string());
        }
    }
    if let Some(g) = &galerkin {
        if g.modes == 0 {
            errors.push("[galerkin] modes must be positive".to_string());
        }
        if !(g.dt_out > 0.0) || !(g.implicit_dt > 0.0) {
            errors.push("[galerkin] time steps must be positive".to_string());
        }
    }
    if !errors.is_empty() {
        return Err(Error::config(format!(
            "{} problem(s) in configuration:\n  - {}",
            errors.len(),
            errors.join("\n  - ")
        )));
    }
    Ok(RunConfig {
        seed: seed.expect("checked"),
        workers,
        grid,
        coefficients,
        dynamics,
        data: data.unwrap_or_default(),
        epsilon: eps_values,
        run: run.unwrap_or_default(),
        cell: cell.unwrap_or_default(),
        hom: hom.unwrap_or_default(),
        twoscale,
        galerkin: galerkin.unwrap_or_default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = r#"
seed = 3
[grid]
cells = [8, 8, 8]
dt = 0.01
t_final = 0.1
[coefficients]
mu = { family = "constant", matrix = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0] }
eta = { family = "constant", matrix = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0] }
sigma = { family = "linear", kappa = { family = "constant", value = 1.0 } }
[epsilon]
values = [0.5, 0.25]
"#;

    #[test]
    fn good_config_parses() {
        let c = parse_config(GOOD).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.epsilon, vec![0.5, 0.25]);
        assert_eq!(c.run.omega_samples, 1);
    }

    #[test]
    fn all_errors_are_reported() {
        let bad = GOOD.replace("seed = 3", "bogus = 1").replace("[0.5, 0.25]", "[0.25, 0.5]").replace("dt = 0.01", "dt = 0.01\nfoo = 2");
        let msg = parse_config(&bad).unwrap_err().to_string();
        assert!(msg.contains("bogus"), "{msg}");
        assert!(msg.contains("seed"), "{msg}");
        assert!(msg.contains("decreasing"), "{msg}");
        assert!(msg.contains("foo"), "{msg}");
    }
}
