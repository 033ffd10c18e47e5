//! Output writers: binary field records, CSV logs and JSON artifacts.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::Serialize;

use crate::eps_solver::{EnergyRow, Snapshot};
use crate::error::{Error, Result};
use crate::galerkin::Trajectory;
use crate::twoscale::ConvergenceRow;
use crate::yee::{Location, Staggered, YeeGrid};

pub const FIELD_MAGIC: &[u8; 8] = b"MAXHOMF1";

fn io_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Io(std::io::Error::other(format!("{}: {e}", path.display())))
}

/// Header of a binary field record. All integers are u64, all reals f64, little-endian.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldHeader {
    /// 0 for edge (E) fields, 1 for face (H) fields.
    pub location: u64,
    pub dims: [[u64; 3]; 3],
    pub stride: u64,
    pub dt: f64,
    pub records: u64,
}

/// Writes snapshots of one field as `magic, header, {step, t, c0, c1, c2}*`.
pub fn write_field_record(
    path: &Path,
    grid: &YeeGrid,
    loc: Location,
    stride: usize,
    snaps: &[(usize, f64, &Staggered)],
) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let dims = grid.dims(loc);
    let mut body = || -> std::io::Result<()> {
        let w = &mut w;
        w.write_all(FIELD_MAGIC)?;
        w.write_u64::<LittleEndian>(if loc == Location::Edge { 0 } else { 1 })?;
        for d in dims {
            for v in d {
                w.write_u64::<LittleEndian>(*v as u64)?;
            }
        }
        w.write_u64::<LittleEndian>(stride as u64)?;
        w.write_f64::<LittleEndian>(grid.spec.dt)?;
        w.write_u64::<LittleEndian>(snaps.len() as u64)?;
        for (step, t, s) in snaps {
            w.write_u64::<LittleEndian>(*step as u64)?;
            w.write_f64::<LittleEndian>(*t)?;
            for c in 0..3 {
                for v in &s.c[c] {
                    w.write_f64::<LittleEndian>(*v)?;
                }
            }
        }
        w.flush()
    };
    body().map_err(|e| io_err(path, e))
}

/// Reads a record written by [`write_field_record`].
pub fn read_field_record(path: &Path) -> Result<(FieldHeader, Vec<(u64, f64, Staggered)>)> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(file);
    let mut inner = || -> std::io::Result<(FieldHeader, Vec<(u64, f64, Staggered)>)> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != FIELD_MAGIC {
            return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "bad magic"));
        }
        let location = r.read_u64::<LittleEndian>()?;
        let mut dims = [[0u64; 3]; 3];
        for d in dims.iter_mut() {
            for v in d.iter_mut() {
                *v = r.read_u64::<LittleEndian>()?;
            }
        }
        let stride = r.read_u64::<LittleEndian>()?;
        let dt = r.read_f64::<LittleEndian>()?;
        let records = r.read_u64::<LittleEndian>()?;
        let mut out = Vec::with_capacity(records as usize);
        for _ in 0..records {
            let step = r.read_u64::<LittleEndian>()?;
            let t = r.read_f64::<LittleEndian>()?;
            let c = [0, 1, 2].map(|c| {
                let n = (dims[c][0] * dims[c][1] * dims[c][2]) as usize;
                let mut v = vec![0.0; n];
                r.read_f64_into::<LittleEndian>(&mut v).map(|_| v)
            });
            let [a, b, cc] = c;
            out.push((step, t, Staggered { c: [a?, b?, cc?] }));
        }
        Ok((
            FieldHeader {
                location,
                dims,
                stride,
                dt,
                records,
            },
            out,
        ))
    };
    inner().map_err(|e| io_err(path, e))
}

/// E and H snapshot records as `<stem>_E.bin` and `<stem>_H.bin`.
pub fn write_snapshots(dir: &Path, stem: &str, grid: &YeeGrid, stride: usize, snaps: &[Snapshot]) -> Result<()> {
    let e: Vec<(usize, f64, &Staggered)> = snaps.iter().map(|s| (s.step, s.t, &s.e)).collect();
    let h: Vec<(usize, f64, &Staggered)> = snaps.iter().map(|s| (s.step, s.t, &s.h)).collect();
    write_field_record(&dir.join(format!("{stem}_E.bin")), grid, Location::Edge, stride, &e)?;
    write_field_record(&dir.join(format!("{stem}_H.bin")), grid, Location::Face, stride, &h)
}

fn fmt(v: f64) -> String {
    format!("{v:.17e}")
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    csv::Writer::from_path(path).map_err(|e| io_err(path, e))
}

fn csv_finish(path: &Path, mut w: csv::Writer<File>) -> Result<()> {
    w.flush().map_err(|e| io_err(path, e))
}

pub fn write_energy_csv(path: &Path, log: &[EnergyRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let res = (|| -> csv::Result<()> {
        w.write_record(["step", "t", "ED", "HB", "cum_dissipation", "rhs_bound"])?;
        for r in log {
            w.write_record([
                r.step.to_string(),
                fmt(r.t),
                fmt(r.ed),
                fmt(r.hb),
                fmt(r.cum_dissipation),
                fmt(r.rhs_bound),
            ])?;
        }
        Ok(())
    })();
    res.map_err(|e| io_err(path, e))?;
    csv_finish(path, w)
}

pub fn write_trajectory_csv(path: &Path, traj: &Trajectory) -> Result<()> {
    let mut w = csv_writer(path)?;
    let dim = traj.psi.first().map(|p| p.len()).unwrap_or(0);
    let res = (|| -> csv::Result<()> {
        let mut header = vec!["t".to_string()];
        header.extend((1..=dim).map(|k| format!("psi_{k}")));
        w.write_record(&header)?;
        for (t, p) in traj.times.iter().zip(&traj.psi) {
            let mut row = vec![fmt(*t)];
            row.extend(p.iter().map(|v| fmt(*v)));
            w.write_record(&row)?;
        }
        Ok(())
    })();
    res.map_err(|e| io_err(path, e))?;
    csv_finish(path, w)
}

pub fn write_convergence_csv(path: &Path, rows: &[ConvergenceRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let res = (|| -> csv::Result<()> {
        w.write_record(["epsilon", "I_eps", "stderr", "I_0", "gap", "control_gap", "dt_I_eps", "dt_I_0", "dt_gap"])?;
        for r in rows {
            w.write_record([
                fmt(r.epsilon),
                fmt(r.i_eps),
                fmt(r.stderr),
                fmt(r.i_0),
                fmt(r.gap),
                fmt(r.control_gap),
                fmt(r.dt_i_eps),
                fmt(r.dt_i_0),
                fmt(r.dt_gap),
            ])?;
        }
        Ok(())
    })();
    res.map_err(|e| io_err(path, e))?;
    csv_finish(path, w)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    std::fs::write(path, s + "\n").map_err(|e| io_err(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::yee::GridSpec;

    #[test]
    fn field_record_roundtrip() {
        let g = YeeGrid::new(&GridSpec::cube(4, 0.01, 0.1)).unwrap();
        let e = g.sample(Location::Edge, |c, x| c as f64 + x[0] - 2.0 * x[2]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.bin");
        write_field_record(&p, &g, Location::Edge, 5, &[(0, 0.0, &e), (5, 0.05, &e)]).unwrap();
        let (h, recs) = read_field_record(&p).unwrap();
        assert_eq!(h.stride, 5);
        assert_eq!(h.records, 2);
        assert_eq!(h.dims[0], [4, 5, 5]);
        assert_eq!(recs[1].2, e);
        assert_eq!(recs[1].0, 5);
    }
}
