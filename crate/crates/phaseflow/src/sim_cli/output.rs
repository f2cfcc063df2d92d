//! Diagnostics CSV and VTK-legacy snapshot writers.

use crate::diagnostics::DiagRecord;
use crate::grid::{FaceField, Field, Grid};
use crate::scalar::Scalar;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("no records to write")]
    Empty,
}

pub const CSV_HEADER: &str =
    "step,time,E_free,E_kin,E_tot,D,mean_phi,min_phi,max_phi,energy_slack,newton_iters,linear_iters";

fn fmt17<F: Scalar>(v: F) -> String {
    // 17 significant digits: round-trips any f64 exactly
    format!("{:.16e}", v.to_f64().unwrap_or(f64::NAN))
}

/// Serializes one record as a CSV row (17 significant digits per real).
pub fn csv_row<F: Scalar>(r: &DiagRecord<F>) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{}",
        r.step,
        fmt17(r.time),
        fmt17(r.e_free),
        fmt17(r.e_kin),
        fmt17(r.e_tot),
        fmt17(r.dissipation),
        fmt17(r.mean_phi),
        fmt17(r.min_phi),
        fmt17(r.max_phi),
        fmt17(r.energy_slack),
        r.newton_iters,
        r.linear_iters
    )
}

/// Writes the diagnostics CSV. An empty record list writes nothing and
/// reports [`OutputError::Empty`].
pub fn write_csv<F: Scalar>(records: &[DiagRecord<F>], path: &Path) -> Result<(), OutputError> {
    if records.is_empty() {
        return Err(OutputError::Empty);
    }
    let io = |source| OutputError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = String::with_capacity(64 * (records.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&csv_row(r));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(io)
}

/// Parses a diagnostics CSV written by [`write_csv`] (used by tests and the
/// acceptance suite).
pub fn read_csv(path: &Path) -> Result<Vec<DiagRecord<f64>>, OutputError> {
    let io = |source| OutputError::Io {
        path: path.display().to_string(),
        source,
    };
    let text = std::fs::read_to_string(path).map_err(io)?;
    let mut lines = text.lines();
    let _header = lines.next();
    let mut records = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 12 {
            continue;
        }
        let num = |s: &str| s.parse::<f64>().unwrap_or(f64::NAN);
        records.push(DiagRecord {
            step: f[0].parse().unwrap_or(0),
            time: num(f[1]),
            e_free: num(f[2]),
            e_kin: num(f[3]),
            e_tot: num(f[4]),
            dissipation: num(f[5]),
            mean_phi: num(f[6]),
            min_phi: num(f[7]),
            max_phi: num(f[8]),
            energy_slack: num(f[9]),
            newton_iters: f[10].parse().unwrap_or(0),
            linear_iters: f[11].parse().unwrap_or(0),
        });
    }
    Ok(records)
}

/// Cell-centered scalar fields plus a face velocity for one VTK snapshot.
pub struct VtkSnapshot<'a, F: Scalar> {
    pub phi: &'a Field<F>,
    /// `μ` for model I, `ω` for model II.
    pub potential: (&'a str, &'a Field<F>),
    /// `λ` for model I, `λ₀` for model II.
    pub pressure: (&'a str, &'a Field<F>),
    pub velocity: &'a FaceField<F>,
}

/// Writes a legacy-ASCII VTK `STRUCTURED_POINTS` snapshot with the scalars as
/// cell data and the velocity interpolated to cell centers.
pub fn write_vtk<F: Scalar>(
    snap: &VtkSnapshot<'_, F>,
    grid: &Grid<F>,
    path: &Path,
) -> Result<(), OutputError> {
    let io = |source| OutputError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = std::fs::File::create(path).map_err(io)?;
    let mut w = std::io::BufWriter::new(file);
    let err = |source| OutputError::Io {
        path: path.display().to_string(),
        source,
    };

    let (nx, ny) = (grid.nx(), grid.ny());
    writeln!(w, "# vtk DataFile Version 3.0").map_err(err)?;
    writeln!(w, "phaseflow snapshot").map_err(err)?;
    writeln!(w, "ASCII").map_err(err)?;
    writeln!(w, "DATASET STRUCTURED_POINTS").map_err(err)?;
    writeln!(w, "DIMENSIONS {} {} 1", nx + 1, ny + 1).map_err(err)?;
    writeln!(w, "ORIGIN 0 0 0").map_err(err)?;
    writeln!(
        w,
        "SPACING {:e} {:e} 1",
        grid.hx().to_f64().unwrap_or(f64::NAN),
        grid.hy().to_f64().unwrap_or(f64::NAN)
    )
    .map_err(err)?;
    writeln!(w, "CELL_DATA {}", nx * ny).map_err(err)?;

    let scalar = |name: &str,
                  f: &Field<F>,
                  w: &mut std::io::BufWriter<std::fs::File>|
     -> Result<(), OutputError> {
        writeln!(w, "SCALARS {name} double 1").map_err(err)?;
        writeln!(w, "LOOKUP_TABLE default").map_err(err)?;
        for v in f.values() {
            writeln!(w, "{:e}", v.to_f64().unwrap_or(f64::NAN)).map_err(err)?;
        }
        Ok(())
    };
    scalar("phi", snap.phi, &mut w)?;
    scalar(snap.potential.0, snap.potential.1, &mut w)?;
    scalar(snap.pressure.0, snap.pressure.1, &mut w)?;

    writeln!(w, "VECTORS velocity double").map_err(err)?;
    for j in 0..ny {
        for i in 0..nx {
            let ux = (snap.velocity.ux(i, j) + snap.velocity.ux(i + 1, j)) * F::half();
            let uy = (snap.velocity.uy(i, j) + snap.velocity.uy(i, j + 1)) * F::half();
            writeln!(
                w,
                "{:e} {:e} 0",
                ux.to_f64().unwrap_or(f64::NAN),
                uy.to_f64().unwrap_or(f64::NAN)
            )
            .map_err(err)?;
        }
    }
    w.flush().map_err(err)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_record() -> DiagRecord<f64> {
        DiagRecord {
            step: 3,
            time: 3e-3,
            e_free: 1.0 / 3.0,
            e_kin: 2.0e-7,
            e_tot: 1.0 / 3.0 + 2.0e-7,
            dissipation: 4.25e-4,
            mean_phi: -0.123_456_789_012_345_68,
            min_phi: -0.99,
            max_phi: 0.97,
            energy_slack: 5.5e-13,
            newton_iters: 3,
            linear_iters: 47,
        }
    }

    #[test]
    fn csv_round_trip_preserves_all_digits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("diag.csv");
        let rec = sample_record();
        write_csv(&[rec], &path).unwrap();
        let back = read_csv(&path).unwrap();
        assert_eq!(back.len(), 1);
        let b = back[0];
        assert_eq!(b.step, rec.step);
        assert_eq!(b.time, rec.time);
        assert_eq!(b.e_free, rec.e_free);
        assert_eq!(b.e_kin, rec.e_kin);
        assert_eq!(b.e_tot, rec.e_tot);
        assert_eq!(b.dissipation, rec.dissipation);
        assert_eq!(b.mean_phi, rec.mean_phi);
        assert_eq!(b.min_phi, rec.min_phi);
        assert_eq!(b.max_phi, rec.max_phi);
        assert_eq!(b.energy_slack, rec.energy_slack);
        assert_eq!(b.newton_iters, rec.newton_iters);
        assert_eq!(b.linear_iters, rec.linear_iters);
    }

    #[test]
    fn empty_record_list_is_flagged_without_writing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("diag.csv");
        let records: [DiagRecord<f64>; 0] = [];
        assert!(matches!(
            write_csv(&records, &path),
            Err(OutputError::Empty)
        ));
        assert!(!path.exists());
    }

    #[test]
    fn vtk_header_conforms_to_legacy_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("snap.vtk");
        let grid: Grid<f64> = Grid::new(4, 3, 1.0, 1.0).unwrap();
        let phi = Field::constant(&grid, 0.5);
        let mu = Field::zeros(&grid);
        let lam = Field::zeros(&grid);
        let v = FaceField::zeros(&grid);
        let snap = VtkSnapshot {
            phi: &phi,
            potential: ("mu", &mu),
            pressure: ("lambda", &lam),
            velocity: &v,
        };
        write_vtk(&snap, &grid, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# vtk DataFile Version 3.0\n"));
        assert!(text.contains("DATASET STRUCTURED_POINTS"));
        assert!(text.contains("DIMENSIONS 5 4 1"));
        assert!(text.contains("CELL_DATA 12"));
        assert!(text.contains("SCALARS phi double 1"));
        assert!(text.contains("VECTORS velocity double"));
    }
}
