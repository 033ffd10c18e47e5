//! Staggered (Yee) grid on an axis-aligned box.
//!
//! `E_c` lives on edges parallel to axis `c`, `H_c` on faces normal to `c`.
//! Along each axis the boundary is either PEC (tangential E pinned to zero)
//! or periodic. Discrete curls are mutually adjoint in the volume-weighted
//! inner products below, and `div ∘ curl = 0` holds identically.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const CHUNK: usize = 4096;

/// Parallel sum with a fixed reduction tree, so results do not depend on
/// thread scheduling.
pub fn det_sum<F: Fn(usize) -> f64 + Sync>(len: usize, f: F) -> f64 {
    let parts: Vec<f64> = (0..len.div_ceil(CHUNK))
        .into_par_iter()
        .map(|b| (b * CHUNK..((b + 1) * CHUNK).min(len)).map(&f).sum())
        .collect();
    parts.iter().sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default)]
    pub origin: [f64; 3],
    #[serde(default = "unit_box")]
    pub length: [f64; 3],
    pub cells: [usize; 3],
    pub dt: f64,
    pub t_final: f64,
    /// Axes closed periodically instead of PEC walls.
    #[serde(default)]
    pub periodic: [bool; 3],
    #[serde(default = "default_cfl")]
    pub cfl_safety: f64,
}

fn unit_box() -> [f64; 3] {
    [1.0; 3]
}

fn default_cfl() -> f64 {
    0.9
}

impl GridSpec {
    pub fn cube(n: usize, dt: f64, t_final: f64) -> Self {
        Self {
            origin: [0.0; 3],
            length: [1.0; 3],
            cells: [n; 3],
            dt,
            t_final,
            periodic: [false; 3],
            cfl_safety: default_cfl(),
        }
    }

    pub fn h(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.length[a] / self.cells[a] as f64)
    }

    pub fn h_min(&self) -> f64 {
        let h = self.h();
        h[0].min(h[1]).min(h[2])
    }

    pub fn steps(&self) -> usize {
        (self.t_final / self.dt).round() as usize
    }

    /// Largest admissible step for coercivity constants of η and μ.
    pub fn cfl_limit(&self, c2_eta: f64, c2_mu: f64) -> f64 {
        self.cfl_safety * self.h_min() * (c2_eta * c2_mu).sqrt() / 3f64.sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(a) = (0..3).find(|&a| self.cells[a] < 4) {
            return Err(Error::config(format!(
                "grid.cells[{a}] = {} but at least 4 cells per axis are required",
                self.cells[a]
            )));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::config(format!("grid.dt must be positive, got {}", self.dt)));
        }
        if !(self.t_final >= 0.0 && self.t_final.is_finite()) {
            return Err(Error::config(format!("grid.t_final must be nonnegative, got {}", self.t_final)));
        }
        let steps = self.t_final / self.dt;
        if (steps - steps.round()).abs() > 1e-6 * steps.max(1.0) {
            return Err(Error::config(format!(
                "grid.t_final = {} is not an integer multiple of dt = {}",
                self.t_final, self.dt
            )));
        }
        if self.length.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::config("grid.length entries must be positive"));
        }
        if !(self.cfl_safety > 0.0 && self.cfl_safety <= 1.0) {
            return Err(Error::config(format!(
                "grid.cfl_safety must lie in (0,1], got {}",
                self.cfl_safety
            )));
        }
        Ok(())
    }

    pub fn check_cfl(&self, c2_eta: f64, c2_mu: f64) -> Result<()> {
        let lim = self.cfl_limit(c2_eta, c2_mu);
        if self.dt > lim * (1.0 + 1e-12) {
            return Err(Error::config(format!(
                "dt = {} violates the CFL bound dt <= cfl_safety*h_min*sqrt(c2_eta*c2_mu)/sqrt(3) = {lim}",
                self.dt
            )));
        }
        Ok(())
    }
}

/// Which family of staggered locations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Location {
    Edge,
    Face,
}

/// Three staggered component arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct Staggered {
    pub c: [Vec<f64>; 3],
}

impl Staggered {
    pub fn zeros(dims: &[[usize; 3]; 3]) -> Self {
        Self {
            c: [0, 1, 2].map(|k| vec![0.0; dims[k][0] * dims[k][1] * dims[k][2]]),
        }
    }

    pub fn len(&self) -> usize {
        self.c.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn max_abs(&self) -> f64 {
        self.c
            .iter()
            .flat_map(|v| v.iter())
            .fold(0.0f64, |m, x| m.max(x.abs()))
    }

    pub fn axpy(&mut self, a: f64, other: &Staggered) {
        for k in 0..3 {
            for (x, y) in self.c[k].iter_mut().zip(&other.c[k]) {
                *x += a * y;
            }
        }
    }

    pub fn sub(&self, other: &Staggered) -> Staggered {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }
}

#[derive(Debug, Clone)]
pub struct YeeGrid {
    pub spec: GridSpec,
    pub n: [usize; 3],
    pub h: [f64; 3],
    pub periodic: [bool; 3],
    pub e_dims: [[usize; 3]; 3],
    pub h_dims: [[usize; 3]; 3],
    /// Per-component, per-axis 1D weights whose product is the dual volume.
    e_w: [[Vec<f64>; 3]; 3],
    h_w: [[Vec<f64>; 3]; 3],
}

impl YeeGrid {
    pub fn new(spec: &GridSpec) -> Result<Self> {
        spec.validate()?;
        let n = spec.cells;
        let h = spec.h();
        let periodic = spec.periodic;
        let node = |a: usize| if periodic[a] { n[a] } else { n[a] + 1 };
        let e_dims = [0, 1, 2].map(|c| [0, 1, 2].map(|a| if a == c { n[a] } else { node(a) }));
        let h_dims = [0, 1, 2].map(|c| [0, 1, 2].map(|a| if a == c { node(a) } else { n[a] }));
        // Integer-node positions on PEC walls carry half weight.
        let axis_w = |a: usize, integer: bool, len: usize| -> Vec<f64> {
            (0..len)
                .map(|i| {
                    if integer && !periodic[a] && (i == 0 || i == n[a]) {
                        0.5 * h[a]
                    } else {
                        h[a]
                    }
                })
                .collect()
        };
        let e_w = [0, 1, 2].map(|c| [0, 1, 2].map(|a| axis_w(a, a != c, e_dims[c][a])));
        let h_w = [0, 1, 2].map(|c| [0, 1, 2].map(|a| axis_w(a, a == c, h_dims[c][a])));
        Ok(Self {
            spec: spec.clone(),
            n,
            h,
            periodic,
            e_dims,
            h_dims,
            e_w,
            h_w,
        })
    }

    pub fn dims(&self, loc: Location) -> &[[usize; 3]; 3] {
        match loc {
            Location::Edge => &self.e_dims,
            Location::Face => &self.h_dims,
        }
    }

    pub fn zeros(&self, loc: Location) -> Staggered {
        Staggered::zeros(self.dims(loc))
    }

    #[inline]
    pub fn unflatten(dims: &[usize; 3], flat: usize) -> [usize; 3] {
        [flat % dims[0], (flat / dims[0]) % dims[1], flat / (dims[0] * dims[1])]
    }

    /// Physical position of component `c` at multi-index `idx`.
    #[inline]
    pub fn position(&self, loc: Location, c: usize, idx: &[usize; 3]) -> [f64; 3] {
        [0, 1, 2].map(|a| {
            let half = match loc {
                Location::Edge => a == c,
                Location::Face => a != c,
            };
            self.spec.origin[a] + self.h[a] * (idx[a] as f64 + if half { 0.5 } else { 0.0 })
        })
    }

    /// False for tangential E on a PEC wall.
    #[inline]
    pub fn e_active(&self, c: usize, idx: &[usize; 3]) -> bool {
        (0..3).all(|a| a == c || self.periodic[a] || (idx[a] != 0 && idx[a] != self.n[a]))
    }

    #[inline]
    pub fn weight(&self, loc: Location, c: usize, idx: &[usize; 3]) -> f64 {
        let w = match loc {
            Location::Edge => &self.e_w[c],
            Location::Face => &self.h_w[c],
        };
        w[0][idx[0]] * w[1][idx[1]] * w[2][idx[2]]
    }

    /// Flat weight array for component `c`.
    pub fn weights(&self, loc: Location, c: usize) -> Vec<f64> {
        let d = self.dims(loc)[c];
        (0..d[0] * d[1] * d[2])
            .map(|f| self.weight(loc, c, &Self::unflatten(&d, f)))
            .collect()
    }

    /// Fills a staggered field from a pointwise function `(component, position) -> value`.
    /// Inactive edges are left at zero.
    pub fn sample(&self, loc: Location, f: impl Fn(usize, &[f64; 3]) -> f64 + Sync) -> Staggered {
        let dims = *self.dims(loc);
        let mut out = Staggered::zeros(&dims);
        for c in 0..3 {
            out.c[c].par_iter_mut().enumerate().for_each(|(flat, v)| {
                let idx = Self::unflatten(&dims[c], flat);
                if loc == Location::Edge && !self.e_active(c, &idx) {
                    return;
                }
                *v = f(c, &self.position(loc, c, &idx));
            });
        }
        out
    }

    pub fn zero_inactive(&self, e: &mut Staggered) {
        for c in 0..3 {
            let d = self.e_dims[c];
            for (flat, v) in e.c[c].iter_mut().enumerate() {
                if !self.e_active(c, &Self::unflatten(&d, flat)) {
                    *v = 0.0;
                }
            }
        }
    }

    /// Weighted inner product `Σ w a b`.
    pub fn dot(&self, loc: Location, a: &Staggered, b: &Staggered) -> f64 {
        let dims = self.dims(loc);
        (0..3)
            .map(|c| {
                det_sum(a.c[c].len(), |f| {
                    a.c[c][f] * b.c[c][f] * self.weight(loc, c, &Self::unflatten(&dims[c], f))
                })
            })
            .sum()
    }

    /// `Σ w m a b` with a per-DOF coefficient `m`.
    pub fn dot_weighted(&self, loc: Location, coef: &Staggered, a: &Staggered, b: &Staggered) -> f64 {
        let dims = self.dims(loc);
        (0..3)
            .map(|c| {
                det_sum(a.c[c].len(), |f| {
                    coef.c[c][f] * a.c[c][f] * b.c[c][f] * self.weight(loc, c, &Self::unflatten(&dims[c], f))
                })
            })
            .sum()
    }

    /// All dual-volume weights as a staggered field.
    pub fn weight_field(&self, loc: Location) -> Staggered {
        Staggered {
            c: [0, 1, 2].map(|c| self.weights(loc, c)),
        }
    }

    pub fn norm(&self, loc: Location, a: &Staggered) -> f64 {
        self.dot(loc, a, a).sqrt()
    }

    #[inline]
    fn flat(d: &[usize; 3], i: usize, j: usize, k: usize) -> usize {
        i + d[0] * (j + d[1] * k)
    }

    /// Curl of an edge field, sampled on faces.
    pub fn curl_e(&self, e: &Staggered, out: &mut Staggered) {
        for c in 0..3 {
            let (a, b) = ((c + 1) % 3, (c + 2) % 3);
            let hd = self.h_dims[c];
            let (db, da) = (self.e_dims[b], self.e_dims[a]);
            let (eb, ea) = (&e.c[b], &e.c[a]);
            let (ha, hb) = (1.0 / self.h[a], 1.0 / self.h[b]);
            let (na, nb) = (self.e_dims[b][a], self.e_dims[a][b]);
            let (pa, pb) = (self.periodic[a], self.periodic[b]);
            let plane = hd[0] * hd[1];
            out.c[c].par_chunks_mut(plane).enumerate().for_each(|(k, slab)| {
                for j in 0..hd[1] {
                    for i in 0..hd[0] {
                        let idx = [i, j, k];
                        // ∂_a E_b (forward difference along a)
                        let mut up = idx;
                        up[a] = if pa { (idx[a] + 1) % na } else { idx[a] + 1 };
                        let dab = (eb[Self::flat(&db, up[0], up[1], up[2])] - eb[Self::flat(&db, i, j, k)]) * ha;
                        let mut up = idx;
                        up[b] = if pb { (idx[b] + 1) % nb } else { idx[b] + 1 };
                        let dba = (ea[Self::flat(&da, up[0], up[1], up[2])] - ea[Self::flat(&da, i, j, k)]) * hb;
                        slab[i + hd[0] * j] = dab - dba;
                    }
                }
            });
        }
    }

    /// Curl of a face field, sampled on edges; zero on inactive edges.
    pub fn curl_h(&self, h: &Staggered, out: &mut Staggered) {
        for c in 0..3 {
            let (a, b) = ((c + 1) % 3, (c + 2) % 3);
            let ed = self.e_dims[c];
            let (db, da) = (self.h_dims[b], self.h_dims[a]);
            let (hb_f, ha_f) = (&h.c[b], &h.c[a]);
            let (ia, ib) = (1.0 / self.h[a], 1.0 / self.h[b]);
            let (na, nb) = (self.h_dims[b][a], self.h_dims[a][b]);
            let plane = ed[0] * ed[1];
            out.c[c].par_chunks_mut(plane).enumerate().for_each(|(k, slab)| {
                for j in 0..ed[1] {
                    for i in 0..ed[0] {
                        let idx = [i, j, k];
                        if !self.e_active(c, &idx) {
                            slab[i + ed[0] * j] = 0.0;
                            continue;
                        }
                        // PEC-active edges never sit at index 0, so the wrap is periodic only
                        let mut dn = idx;
                        dn[a] = if idx[a] == 0 { na - 1 } else { idx[a] - 1 };
                        let dab = (hb_f[Self::flat(&db, i, j, k)] - hb_f[Self::flat(&db, dn[0], dn[1], dn[2])]) * ia;
                        let mut dn = idx;
                        dn[b] = if idx[b] == 0 { nb - 1 } else { idx[b] - 1 };
                        let dba = (ha_f[Self::flat(&da, i, j, k)] - ha_f[Self::flat(&da, dn[0], dn[1], dn[2])]) * ib;
                        slab[i + ed[0] * j] = dab - dba;
                    }
                }
            });
        }
    }

    /// Divergence of a face field at cell centers.
    pub fn div_face(&self, f: &Staggered) -> Vec<f64> {
        let n = self.n;
        let mut out = vec![0.0; n[0] * n[1] * n[2]];
        out.par_chunks_mut(n[0] * n[1]).enumerate().for_each(|(k, slab)| {
            for j in 0..n[1] {
                for i in 0..n[0] {
                    let idx = [i, j, k];
                    let mut s = 0.0;
                    for c in 0..3 {
                        let d = self.h_dims[c];
                        let mut up = idx;
                        up[c] = if self.periodic[c] { (idx[c] + 1) % n[c] } else { idx[c] + 1 };
                        s += (f.c[c][Self::flat(&d, up[0], up[1], up[2])] - f.c[c][Self::flat(&d, i, j, k)])
                            / self.h[c];
                    }
                    slab[i + n[0] * j] = s;
                }
            }
        });
        out
    }

    /// Node dimensions for edge divergences.
    pub fn node_dims(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| if self.periodic[a] { self.n[a] } else { self.n[a] + 1 })
    }

    /// Divergence of an edge field at nodes; nodes on PEC walls are set to zero.
    pub fn div_edge(&self, e: &Staggered) -> Vec<f64> {
        let nd = self.node_dims();
        let mut out = vec![0.0; nd[0] * nd[1] * nd[2]];
        out.par_chunks_mut(nd[0] * nd[1]).enumerate().for_each(|(k, slab)| {
            for j in 0..nd[1] {
                for i in 0..nd[0] {
                    let idx = [i, j, k];
                    let on_wall = (0..3).any(|a| !self.periodic[a] && (idx[a] == 0 || idx[a] == self.n[a]));
                    if on_wall {
                        continue;
                    }
                    let mut s = 0.0;
                    for c in 0..3 {
                        let d = self.e_dims[c];
                        let mut dn = idx;
                        dn[c] = if idx[c] == 0 { self.n[c] - 1 } else { idx[c] - 1 };
                        s += (e.c[c][Self::flat(&d, i, j, k)] - e.c[c][Self::flat(&d, dn[0], dn[1], dn[2])])
                            / self.h[c];
                    }
                    slab[i + nd[0] * j] = s;
                }
            }
        });
        out
    }

    pub fn cell_volume(&self) -> f64 {
        self.h[0] * self.h[1] * self.h[2]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(grid: &YeeGrid, loc: Location, seed: u64) -> Staggered {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = grid.zeros(loc);
        for c in 0..3 {
            for v in s.c[c].iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
        if loc == Location::Edge {
            grid.zero_inactive(&mut s);
        }
        s
    }

    fn grids() -> Vec<YeeGrid> {
        let mut a = GridSpec::cube(5, 0.01, 0.1);
        a.cells = [5, 4, 6];
        a.length = [1.0, 0.5, 2.0];
        let mut b = a.clone();
        b.periodic = [false, true, true];
        let mut c = a.clone();
        c.periodic = [true; 3];
        [a, b, c].iter().map(|s| YeeGrid::new(s).unwrap()).collect()
    }

    #[test]
    fn div_curl_vanishes() {
        for g in grids() {
            for seed in 0..100 {
                let e = random(&g, Location::Edge, seed);
                let mut ce = g.zeros(Location::Face);
                g.curl_e(&e, &mut ce);
                let d = g.div_face(&ce);
                let m = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                assert!(m < 1e-10 * ce.max_abs().max(1.0), "{m}");
                let h = random(&g, Location::Face, seed + 1000);
                let mut ch = g.zeros(Location::Edge);
                g.curl_h(&h, &mut ch);
                let d = g.div_edge(&ch);
                let m = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                assert!(m < 1e-10 * ch.max_abs().max(1.0), "{m}");
            }
        }
    }

    #[test]
    fn curls_are_adjoint() {
        for g in grids() {
            let e = random(&g, Location::Edge, 1);
            let h = random(&g, Location::Face, 2);
            let mut ce = g.zeros(Location::Face);
            let mut ch = g.zeros(Location::Edge);
            g.curl_e(&e, &mut ce);
            g.curl_h(&h, &mut ch);
            let l = g.dot(Location::Face, &ce, &h);
            let r = g.dot(Location::Edge, &e, &ch);
            assert!((l - r).abs() < 1e-11 * l.abs().max(1.0), "{l} {r}");
        }
    }

    #[test]
    fn curl_of_linear_field() {
        // E = (0, x, 0) has curl (0, 0, 1)
        let mut s = GridSpec::cube(6, 0.01, 0.1);
        s.periodic = [false, true, true];
        let g = YeeGrid::new(&s).unwrap();
        let e = g.sample(Location::Edge, |c, p| if c == 1 { p[0] } else { 0.0 });
        let mut ce = g.zeros(Location::Face);
        g.curl_e(&e, &mut ce);
        let d = g.h_dims[2];
        for (flat, v) in ce.c[2].iter().enumerate() {
            let idx = YeeGrid::unflatten(&d, flat);
            if idx[0] < 5 {
                assert!((v - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cfl_and_cells() {
        let s = GridSpec::cube(8, 0.1, 1.0);
        assert!(s.check_cfl(1.0, 1.0).is_err());
        assert!(GridSpec::cube(3, 0.01, 0.1).validate().is_err());
        assert!(GridSpec::cube(8, 0.01, 0.105).validate().is_err());
    }

    #[test]
    fn weights_sum_to_volume() {
        for g in grids() {
            for c in 0..3 {
                let w: f64 = g.weights(Location::Face, c).iter().sum();
                assert!((w - 1.0).abs() < 1e-12, "{w}");
            }
        }
    }
}
