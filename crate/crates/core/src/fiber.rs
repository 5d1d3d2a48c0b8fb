//! Orientational fiber distribution q(x, v_hat) and its directional moments.
//!
//! q is a probability density over unit directions at every position:
//! q >= 0 and the direction integral equals 1. Moments are computed by
//! quadrature on the direction grid (uniform trapezoidal rule on the circle,
//! which is spectrally accurate for smooth periodic integrands).

use std::f64::consts::PI;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{DirectionGrid, XGrid};
use crate::linalg::{self, Matrix, Tensor3, Vector, ZERO_MATRIX, ZERO_TENSOR3, ZERO_VECTOR};

/// Default direction count for n = 2 quadrature.
pub const DEFAULT_DIRECTIONS: usize = 128;

/// Modified Bessel function I_0 by power series.
pub fn bessel_i0(z: f64) -> f64 {
    let q = 0.25 * z * z;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= q / ((k * k) as f64);
        sum += term;
        if term < 1e-17 * sum {
            break;
        }
    }
    sum
}

/// Modified Bessel function I_1 by power series.
pub fn bessel_i1(z: f64) -> f64 {
    let q = 0.25 * z * z;
    let mut term = 0.5 * z;
    let mut sum = term;
    for k in 1..200 {
        term *= q / ((k * (k + 1)) as f64);
        sum += term;
        if term.abs() < 1e-17 * sum.abs() {
            break;
        }
    }
    sum
}

/// Spatially indexed direction table (piecewise constant in x and theta).
#[derive(Debug, Clone)]
pub struct GriddedFiber {
    pub xgrid: XGrid,
    /// cells x K values, renormalised so each row integrates to 1.
    pub values: Vec<f64>,
}

/// Variants of the orientational distribution.
#[derive(Debug, Clone)]
pub enum FiberKind {
    /// Constant 1/(2 pi) (n = 2) or 1/2 per sign (n = 1).
    Uniform,
    /// exp(k cos(theta - mu)) / (2 pi I0(k)), n = 2 only.
    VonMises { mean: Vector, concentration: f64 },
    /// Mass p_plus at +1 and 1 - p_plus at -1, n = 1 only.
    Discrete { p_plus: f64 },
    /// Convex combination of analytic variants.
    Mixture(Vec<(f64, FiberKind)>),
    /// Tabulated values with nearest-node lookup in x.
    Gridded(GriddedFiber),
}

/// Directional moments of q at one position.
#[derive(Debug, Clone, Copy)]
pub struct FiberMoments {
    pub n: usize,
    /// Mean orientation E[q].
    pub mean: Vector,
    /// Second moment D[q] (symmetric, trace 1).
    pub second: Matrix,
    /// Variance-covariance V[q] = D - E (x) E.
    pub covariance: Matrix,
    /// Third moment T[q].
    pub third: Tensor3,
}

/// Result of the directedness check.
#[derive(Debug, Clone, Copy)]
pub struct SymmetryReport {
    /// True iff sup_x |E[q](x)| <= tol.
    pub undirected: bool,
    /// Largest |E[q](x)| over the sampled positions.
    pub max_mean: f64,
    /// Largest |q(x, theta) - q(x, -theta)| over samples.
    pub max_asymmetry: f64,
}

#[derive(Debug, Clone)]
pub struct FiberDistribution {
    n: usize,
    kind: FiberKind,
    dirs: DirectionGrid,
}

impl FiberDistribution {
    pub fn new(n: usize, kind: FiberKind) -> Result<Self> {
        let k = if n == 1 { 2 } else { DEFAULT_DIRECTIONS };
        Self::with_directions(n, kind, k)
    }

    pub fn with_directions(n: usize, kind: FiberKind, k: usize) -> Result<Self> {
        let dirs = DirectionGrid::new(n, k)?;
        validate_kind(n, &kind)?;
        if let FiberKind::Gridded(g) = &kind {
            if g.values.len() != g.xgrid.cells() * dirs.len() {
                return Err(Error::Config(format!(
                    "gridded fiber table has {} entries, expected {}",
                    g.values.len(),
                    g.xgrid.cells() * dirs.len()
                )));
            }
        }
        Ok(Self { n, kind, dirs })
    }

    pub fn dimension(&self) -> usize {
        self.n
    }

    pub fn directions(&self) -> &DirectionGrid {
        &self.dirs
    }

    pub fn kind(&self) -> &FiberKind {
        &self.kind
    }

    /// Density value q(x, theta) for a unit direction theta.
    pub fn eval(&self, x: &Vector, theta: &Vector) -> Result<f64> {
        let k = self.direction_index(theta)?;
        self.eval_dir(x, k)
    }

    /// Density at direction-grid node `k`.
    pub fn eval_dir(&self, x: &Vector, k: usize) -> Result<f64> {
        eval_kind(&self.kind, self.n, &self.dirs, x, k)
    }

    /// d q / d phi at polar angle `phi` (tangential derivative, n = 2 only).
    pub fn angular_derivative(&self, x: &Vector, phi: f64) -> Result<f64> {
        if self.n != 2 {
            return Ok(0.0);
        }
        angular_derivative_kind(&self.kind, x, phi)
    }

    /// Directional moments E, D, V, T at `x` by direction-grid quadrature.
    pub fn moments(&self, x: &Vector) -> Result<FiberMoments> {
        let n = self.n;
        let w = self.dirs.weight;
        let mut mean = ZERO_VECTOR;
        let mut second = ZERO_MATRIX;
        let mut third = ZERO_TENSOR3;
        for (k, th) in self.dirs.dirs.iter().enumerate() {
            let q = self.eval_dir(x, k)? * w;
            for i in 0..n {
                mean[i] += th[i] * q;
                for j in 0..n {
                    second[i][j] += th[i] * th[j] * q;
                    for l in 0..n {
                        third[i][j][l] += th[i] * th[j] * th[l] * q;
                    }
                }
            }
        }
        let covariance = linalg::mat_sub(n, &second, &linalg::outer(n, &mean, &mean));
        Ok(FiberMoments {
            n,
            mean,
            second,
            covariance,
            third,
        })
    }

    /// Directedness check over all relevant positions.
    pub fn symmetry_check(&self, tol: f64) -> Result<SymmetryReport> {
        let xs = self.sample_positions();
        let mut max_mean = 0.0f64;
        let mut max_asym = 0.0f64;
        for x in &xs {
            let m = self.moments(x)?;
            max_mean = max_mean.max(linalg::norm(self.n, &m.mean));
            for k in 0..self.dirs.len() {
                let q = self.eval_dir(x, k)?;
                let qo = self.eval_dir(x, self.dirs.opposite(k))?;
                max_asym = max_asym.max((q - qo).abs());
            }
        }
        Ok(SymmetryReport {
            undirected: max_mean <= tol,
            max_mean,
            max_asymmetry: max_asym,
        })
    }

    /// Positions at which x-dependent quantities are probed.
    pub fn sample_positions(&self) -> Vec<Vector> {
        match &self.kind {
            FiberKind::Gridded(g) => (0..g.xgrid.cells()).map(|i| g.xgrid.node(i)).collect(),
            _ => vec![ZERO_VECTOR],
        }
    }

    /// Density table on an arbitrary spatial grid and direction grid,
    /// renormalised per cell so the discrete direction integral is exactly 1.
    pub fn direction_table(&self, xgrid: &XGrid, dirs: &DirectionGrid) -> Result<Vec<f64>> {
        let kk = dirs.len();
        let mut table = vec![0.0; xgrid.cells() * kk];
        for c in 0..xgrid.cells() {
            let x = xgrid.node(c);
            let mut sum = 0.0;
            for k in 0..kk {
                let v = eval_kind(&self.kind, self.n, dirs, &x, k)?;
                table[c * kk + k] = v;
                sum += v * dirs.weight;
            }
            if sum <= 0.0 {
                return Err(Error::Precondition(format!(
                    "fiber density integrates to {sum} at cell {c}"
                )));
            }
            for k in 0..kk {
                table[c * kk + k] /= sum;
            }
        }
        Ok(table)
    }

    fn direction_index(&self, theta: &Vector) -> Result<usize> {
        match self.n {
            1 => {
                if theta[0] > 0.0 {
                    Ok(0)
                } else if theta[0] < 0.0 {
                    Ok(1)
                } else {
                    Err(Error::Domain("direction sign must be non-zero".into()))
                }
            }
            _ => {
                let r = linalg::norm(2, theta);
                if !(r.is_finite() && (r - 1.0).abs() < 1e-6) {
                    return Err(Error::Domain(format!(
                        "direction must be a unit vector, |theta| = {r}"
                    )));
                }
                let kk = self.dirs.len() as f64;
                let phi = theta[1].atan2(theta[0]).rem_euclid(2.0 * PI);
                let k = (phi / (2.0 * PI) * kk).round() as usize % self.dirs.len();
                Ok(k)
            }
        }
    }
}

fn validate_kind(n: usize, kind: &FiberKind) -> Result<()> {
    match kind {
        FiberKind::Uniform => Ok(()),
        FiberKind::VonMises {
            mean,
            concentration,
        } => {
            if n != 2 {
                return Err(Error::Config("von Mises fibers require n = 2".into()));
            }
            if linalg::norm(2, mean) < 1e-12 {
                return Err(Error::Config(
                    "von Mises mean direction must be non-zero".into(),
                ));
            }
            if !(*concentration >= 0.0 && *concentration <= 50.0) {
                return Err(Error::Config(format!(
                    "von Mises concentration must be in [0, 50], got {concentration}"
                )));
            }
            Ok(())
        }
        FiberKind::Discrete { p_plus } => {
            if n != 1 {
                return Err(Error::Config("discrete fibers require n = 1".into()));
            }
            if !(*p_plus >= 0.0 && *p_plus <= 1.0) {
                return Err(Error::Config(format!(
                    "p_plus must be in [0, 1], got {p_plus}"
                )));
            }
            Ok(())
        }
        FiberKind::Mixture(parts) => {
            if parts.is_empty() {
                return Err(Error::Config("mixture needs at least one component".into()));
            }
            let mut total = 0.0;
            for (w, part) in parts {
                if *w < 0.0 {
                    return Err(Error::Config("mixture weights must be >= 0".into()));
                }
                if matches!(part, FiberKind::Mixture(_) | FiberKind::Gridded(_)) {
                    return Err(Error::Config(
                        "mixture components must be analytic variants".into(),
                    ));
                }
                validate_kind(n, part)?;
                total += w;
            }
            if (total - 1.0).abs() > 1e-12 {
                return Err(Error::Config(format!(
                    "mixture weights must sum to 1, got {total}"
                )));
            }
            Ok(())
        }
        FiberKind::Gridded(g) => {
            if g.xgrid.n != n {
                return Err(Error::Config("gridded fiber dimension mismatch".into()));
            }
            if g.values.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::Config(
                    "gridded fiber values must be finite and non-negative".into(),
                ));
            }
            Ok(())
        }
    }
}

fn eval_kind(
    kind: &FiberKind,
    n: usize,
    dirs: &DirectionGrid,
    x: &Vector,
    k: usize,
) -> Result<f64> {
    match kind {
        FiberKind::Uniform => Ok(if n == 1 { 0.5 } else { 1.0 / (2.0 * PI) }),
        FiberKind::VonMises {
            mean,
            concentration,
        } => {
            let mu = linalg::scale(2, mean, 1.0 / linalg::norm(2, mean));
            let c = linalg::dot(2, &dirs.dirs[k], &mu);
            Ok((concentration * c).exp() / (2.0 * PI * bessel_i0(*concentration)))
        }
        FiberKind::Discrete { p_plus } => Ok(if k == 0 { *p_plus } else { 1.0 - p_plus }),
        FiberKind::Mixture(parts) => {
            let mut v = 0.0;
            for (w, part) in parts {
                v += w * eval_kind(part, n, dirs, x, k)?;
            }
            Ok(v)
        }
        FiberKind::Gridded(g) => {
            let cell = g.xgrid.nearest(x)?;
            let kk = dirs.len();
            // piecewise constant in theta: map this grid's direction onto the
            // table's own bins when resolutions differ
            let kg = if kk == table_k(g) {
                k
            } else {
                let phi = match n {
                    1 => {
                        return Ok(g.values[cell * 2 + k.min(1)]);
                    }
                    _ => dirs.angle(k),
                };
                let tk = table_k(g) as f64;
                (phi / (2.0 * PI) * tk).round() as usize % table_k(g)
            };
            Ok(g.values[cell * table_k(g) + kg])
        }
    }
}

fn table_k(g: &GriddedFiber) -> usize {
    g.values.len() / g.xgrid.cells()
}

fn angular_derivative_kind(kind: &FiberKind, x: &Vector, phi: f64) -> Result<f64> {
    match kind {
        FiberKind::Uniform => Ok(0.0),
        FiberKind::VonMises {
            mean,
            concentration,
        } => {
            let mu = linalg::scale(2, mean, 1.0 / linalg::norm(2, mean));
            let phi0 = mu[1].atan2(mu[0]);
            let q =
                (concentration * (phi - phi0).cos()).exp() / (2.0 * PI * bessel_i0(*concentration));
            Ok(-concentration * (phi - phi0).sin() * q)
        }
        FiberKind::Mixture(parts) => {
            let mut v = 0.0;
            for (w, part) in parts {
                v += w * angular_derivative_kind(part, x, phi)?;
            }
            Ok(v)
        }
        FiberKind::Gridded(g) => {
            // centred difference over the table's own angular bins
            let kk = table_k(g);
            let dphi = 2.0 * PI / kk as f64;
            let k = (phi.rem_euclid(2.0 * PI) / dphi).round() as usize % kk;
            let cell = g.xgrid.nearest(x)?;
            let qp = g.values[cell * kk + (k + 1) % kk];
            let qm = g.values[cell * kk + (k + kk - 1) % kk];
            Ok((qp - qm) / (2.0 * dphi))
        }
        FiberKind::Discrete { .. } => Ok(0.0),
    }
}

/// Load a gridded fiber table from CSV.
///
/// Schema: `x_index,theta_index,value` for n = 2 (flat x index, row-major)
/// or `x_index,sign,value` for n = 1. Values are validated non-negative and
/// renormalised per x so the direction integral equals 1.
pub fn load_gridded_fiber(path: &Path, xgrid: &XGrid, k: usize) -> Result<FiberDistribution> {
    let n = xgrid.n;
    let dirs = DirectionGrid::new(n, k)?;
    let kk = dirs.len();
    let file = std::fs::File::open(path)?;
    let mut values = vec![f64::NAN; xgrid.cells() * kk];
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        if lineno == 0 && t.starts_with("x_index") {
            continue;
        }
        let cols: Vec<&str> = t.split(',').collect();
        if cols.len() != 3 {
            return Err(Error::Config(format!(
                "{}:{}: expected 3 columns, got {}",
                path.display(),
                lineno + 1,
                cols.len()
            )));
        }
        let xi: usize = cols[0]
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad x_index {:?}", cols[0])))?;
        let ki: usize = match n {
            1 => {
                let s: i64 = cols[1]
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad sign {:?}", cols[1])))?;
                match s {
                    1 => 0,
                    -1 => 1,
                    _ => return Err(Error::Config(format!("sign must be +1 or -1, got {s}"))),
                }
            }
            _ => cols[1]
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad theta_index {:?}", cols[1])))?,
        };
        let v: f64 = cols[2]
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad value {:?}", cols[2])))?;
        if xi >= xgrid.cells() || ki >= kk {
            return Err(Error::Config(format!(
                "{}:{}: index ({xi}, {ki}) out of range",
                path.display(),
                lineno + 1
            )));
        }
        if !v.is_finite() || v < 0.0 {
            return Err(Error::Config(format!(
                "{}:{}: fiber density must be finite and >= 0, got {v}",
                path.display(),
                lineno + 1
            )));
        }
        values[xi * kk + ki] = v;
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::Config(format!(
            "{}: incomplete fiber table",
            path.display()
        )));
    }
    // renormalise per x
    for c in 0..xgrid.cells() {
        let row = &mut values[c * kk..(c + 1) * kk];
        let sum: f64 = row.iter().map(|v| v * dirs.weight).sum();
        if sum <= 0.0 {
            return Err(Error::Config(format!(
                "fiber density integrates to {sum} at cell {c}"
            )));
        }
        for v in row {
            *v /= sum;
        }
    }
    FiberDistribution::with_directions(
        n,
        FiberKind::Gridded(GriddedFiber {
            xgrid: xgrid.clone(),
            values,
        }),
        kk,
    )
}

/// Write a gridded fiber table in the loader's schema.
pub fn save_gridded_fiber(path: &Path, fiber: &FiberDistribution) -> Result<()> {
    let g = match fiber.kind() {
        FiberKind::Gridded(g) => g,
        _ => {
            return Err(Error::Config(
                "only gridded fiber distributions can be saved".into(),
            ))
        }
    };
    let kk = table_k(g);
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    if fiber.dimension() == 1 {
        writeln!(out, "x_index,sign,value")?;
        for c in 0..g.xgrid.cells() {
            for (ki, sign) in [(0usize, 1i64), (1, -1)] {
                writeln!(
                    out,
                    "{},{},{}",
                    c,
                    sign,
                    crate::harness::report::fmt_float(g.values[c * kk + ki])
                )?;
            }
        }
    } else {
        writeln!(out, "x_index,theta_index,value")?;
        for c in 0..g.xgrid.cells() {
            for ki in 0..kk {
                writeln!(
                    out,
                    "{},{},{}",
                    c,
                    ki,
                    crate::harness::report::fmt_float(g.values[c * kk + ki])
                )?;
            }
        }
    }
    Ok(())
}
