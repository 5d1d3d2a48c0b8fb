//! CSV artifact writers/readers and the run manifest.
//!
//! All floats are written with 17 significant digits so a write/read
//! round-trip is bit-exact; row order is fixed (time-major, then x index,
//! then velocity indices), making artifact bytes reproducible.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{PhaseGrid, XGrid};
use crate::macroscale::MacroTrajectory;
use crate::weak::ResidualReport;

/// Shortest exact decimal: 17 significant digits round-trip any f64.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Macro snapshot rows `t,x_index[,y_index],cbar`.
pub fn write_macro_trajectory(path: &Path, traj: &MacroTrajectory) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    if traj.xgrid.n == 1 {
        writeln!(out, "t,x_index,cbar")?;
    } else {
        writeln!(out, "t,x_index,y_index,cbar")?;
    }
    for (ti, t) in traj.times.iter().enumerate() {
        for idx in 0..traj.xgrid.cells() {
            let ij = traj.xgrid.unflat(idx);
            if traj.xgrid.n == 1 {
                writeln!(
                    out,
                    "{},{},{}",
                    fmt_float(*t),
                    ij[0],
                    fmt_float(traj.fields[ti][idx])
                )?;
            } else {
                writeln!(
                    out,
                    "{},{},{},{}",
                    fmt_float(*t),
                    ij[0],
                    ij[1],
                    fmt_float(traj.fields[ti][idx])
                )?;
            }
        }
    }
    Ok(())
}

/// Read a macro trajectory CSV produced by `write_macro_trajectory`.
pub fn read_macro_trajectory(path: &Path, xgrid: &XGrid) -> Result<MacroTrajectory> {
    let file = std::fs::File::open(path)?;
    let mut times: Vec<f64> = Vec::new();
    let mut fields: Vec<Vec<f64>> = Vec::new();
    let idx_cols = xgrid.n;
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') || (lineno == 0 && t.starts_with("t,")) {
            continue;
        }
        let cols: Vec<&str> = t.split(',').collect();
        if cols.len() != 2 + idx_cols {
            return Err(Error::Config(format!(
                "{}:{}: expected {} columns",
                path.display(),
                lineno + 1,
                2 + idx_cols
            )));
        }
        let tv: f64 = cols[0]
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad time {:?}", cols[0])))?;
        let mut ij = [0usize; 2];
        for d in 0..idx_cols {
            ij[d] = cols[1 + d]
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad index {:?}", cols[1 + d])))?;
        }
        let v: f64 = cols[1 + idx_cols]
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad value {:?}", cols[1 + idx_cols])))?;
        let same = times
            .last()
            .map(|lt| (lt - tv).abs() < 1e-15)
            .unwrap_or(false);
        if !same {
            times.push(tv);
            fields.push(vec![0.0; xgrid.cells()]);
        }
        let f = fields.last_mut().unwrap();
        let flat = xgrid.flat(ij);
        if flat >= f.len() {
            return Err(Error::Config(format!(
                "{}:{}: index out of range",
                path.display(),
                lineno + 1
            )));
        }
        f[flat] = v;
    }
    if times.is_empty() {
        return Err(Error::Config(format!(
            "{}: empty trajectory",
            path.display()
        )));
    }
    Ok(MacroTrajectory {
        xgrid: xgrid.clone(),
        times,
        fields,
    })
}

/// Kinetic snapshot rows `t,x_index[,y_index],s_index,theta_index,value`.
pub fn write_kinetic_snapshot(path: &Path, grid: &PhaseGrid, t: f64, values: &[f64]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    if grid.x.n == 1 {
        writeln!(out, "t,x_index,s_index,theta_index,value")?;
    } else {
        writeln!(out, "t,x_index,y_index,s_index,theta_index,value")?;
    }
    let nxt = grid.x.cells();
    let ts = fmt_float(t);
    for idx in 0..nxt {
        let ij = grid.x.unflat(idx);
        for j in 0..grid.radial.len() {
            for k in 0..grid.dirs.len() {
                let v = values[grid.row(j, k) * nxt + idx];
                if grid.x.n == 1 {
                    writeln!(out, "{},{},{},{},{}", ts, ij[0], j, k, fmt_float(v))?;
                } else {
                    writeln!(
                        out,
                        "{},{},{},{},{},{}",
                        ts,
                        ij[0],
                        ij[1],
                        j,
                        k,
                        fmt_float(v)
                    )?;
                }
            }
        }
    }
    Ok(())
}

/// Residual report rows `kind,test_id,residual,normalized_residual`.
pub fn write_residual_report(path: &Path, reports: &[ResidualReport]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "kind,test_id,residual,normalized_residual")?;
    for rep in reports {
        for row in &rep.rows {
            writeln!(
                out,
                "{},{},{},{}",
                rep.kind.name(),
                row.test_id,
                fmt_float(row.residual),
                fmt_float(row.normalized)
            )?;
        }
    }
    Ok(())
}

/// Convergence report rows
/// `epsilon,time,l1_error,ratio_to_previous,runtime_seconds`.
#[derive(Debug, Clone)]
pub struct ConvergenceRow {
    pub epsilon: f64,
    pub time: f64,
    pub l1_error: f64,
    /// Error ratio against the previous (larger) epsilon at the same time.
    pub ratio: Option<f64>,
    pub runtime_seconds: f64,
}

#[derive(Debug, Clone, Default)]
pub struct ConvergenceReport {
    pub rows: Vec<ConvergenceRow>,
}

impl ConvergenceReport {
    /// Errors at the final comparison time, one per epsilon.
    pub fn final_errors(&self) -> Vec<(f64, f64)> {
        let tmax = self
            .rows
            .iter()
            .map(|r| r.time)
            .fold(f64::NEG_INFINITY, f64::max);
        self.rows
            .iter()
            .filter(|r| (r.time - tmax).abs() < 1e-12)
            .map(|r| (r.epsilon, r.l1_error))
            .collect()
    }
}

pub fn write_convergence_report(path: &Path, report: &ConvergenceReport) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        out,
        "epsilon,time,l1_error,ratio_to_previous,runtime_seconds"
    )?;
    for row in &report.rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            fmt_float(row.epsilon),
            fmt_float(row.time),
            fmt_float(row.l1_error),
            row.ratio.map(fmt_float).unwrap_or_default(),
            fmt_float(row.runtime_seconds)
        )?;
    }
    Ok(())
}

/// Manifest: echoed config, crate version, wall-clock lines.
pub fn write_manifest(
    path: &Path,
    config_lines: &[(String, String)],
    runtimes: &[(String, f64)],
) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "# fibrokin {}", env!("CARGO_PKG_VERSION"))?;
    for (k, v) in config_lines {
        writeln!(out, "{k} = {v}")?;
    }
    for (stage, secs) in runtimes {
        writeln!(out, "runtime_seconds[{stage}]={secs:.3}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_roundtrip_bit_exact() {
        for v in [
            0.1,
            std::f64::consts::PI,
            1.0 / 3.0,
            6.02e23,
            -1.2345678901234567e-13,
            0.0,
        ] {
            let s = fmt_float(v);
            let back: f64 = s.parse().unwrap();
            assert_eq!(v.to_bits(), back.to_bits(), "{s}");
        }
    }

    #[test]
    fn empty_report_is_header_only() {
        let dir = std::env::temp_dir().join(format!("fibrokin-empty-{}", rand::random::<u64>()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("residual_report.csv");
        write_residual_report(&path, &[]).unwrap();
        let body = std::fs::read_to_string(&path).unwrap();
        assert_eq!(body, "kind,test_id,residual,normalized_residual\n");
        std::fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn macro_trajectory_roundtrip() {
        let xgrid = XGrid::new(2, 3, 1.0).unwrap();
        let traj = MacroTrajectory {
            xgrid: xgrid.clone(),
            times: vec![0.0, 0.5],
            fields: vec![
                (0..9).map(|i| i as f64 / 7.0).collect(),
                (0..9).map(|i| (i * i) as f64 / 11.0).collect(),
            ],
        };
        let dir = std::env::temp_dir().join(format!("fibrokin-rep-{}", rand::random::<u64>()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("traj.csv");
        write_macro_trajectory(&path, &traj).unwrap();
        let back = read_macro_trajectory(&path, &xgrid).unwrap();
        assert_eq!(back.times, traj.times);
        for (a, b) in back
            .fields
            .iter()
            .flatten()
            .zip(traj.fields.iter().flatten())
        {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        std::fs::remove_dir_all(dir).ok();
    }
}
