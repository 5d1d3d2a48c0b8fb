//! External signal Q, anisotropy tensor field, taxis velocity and scaling.
//!
//! The taxis velocity is v*(x) = F(x) grad Q / (1 + |grad Q|); under the
//! parabolic/hyperbolic rescaling it becomes
//! v*_eps(x) = F(x) eps grad Q / (1 + eps |grad Q|), with |v*_eps| < 1
//! whenever the spectral norm of F stays below 1 (flux limitation).

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::XGrid;
use crate::linalg::{self, Matrix, Vector, ZERO_MATRIX, ZERO_VECTOR};

/// Scaling parameters of the rescaled kinetic equation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingParams {
    pub epsilon: f64,
    /// 1 for the hyperbolic scaling, 2 for the parabolic one.
    pub kappa: u8,
    /// Acceleration coefficient a > 0.
    pub a: f64,
    pub n: usize,
}

impl ScalingParams {
    pub fn new(epsilon: f64, kappa: u8, a: f64, n: usize) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon <= 1.0) {
            return Err(Error::Config(format!(
                "epsilon must be in (0, 1], got {epsilon}"
            )));
        }
        if kappa != 1 && kappa != 2 {
            return Err(Error::Config(format!("kappa must be 1 or 2, got {kappa}")));
        }
        if !(a > 0.0) {
            return Err(Error::Config(format!("a must be > 0, got {a}")));
        }
        if n != 1 && n != 2 {
            return Err(Error::Config(format!("dimension must be 1 or 2, got {n}")));
        }
        Ok(Self {
            epsilon,
            kappa,
            a,
            n,
        })
    }

    /// eps^kappa, the relaxation time scale.
    pub fn eps_kappa(&self) -> f64 {
        self.epsilon.powi(self.kappa as i32)
    }

    /// eps^{1-kappa}, the advection speed factor.
    pub fn advection_factor(&self) -> f64 {
        self.epsilon.powi(1 - self.kappa as i32)
    }
}

/// External macroscopic signal (chemo- or haptotactic cue).
#[derive(Debug, Clone)]
pub enum SignalField {
    /// amplitude * exp(-|x - center|^2 / (2 width^2)), min-image distance.
    Gaussian {
        center: Vector,
        width: f64,
        amplitude: f64,
    },
    /// slope * (direction . x); the gradient is constant.
    Ramp { direction: Vector, slope: f64 },
    /// Node values; gradients by second-order centred differences with
    /// periodic wraparound, nearest-node lookup.
    Gridded { values: Vec<f64> },
}

/// Anisotropy tensor field F(x) with spectral norm at most 1.
#[derive(Debug, Clone)]
pub enum TensorField {
    ScaledIdentity { alpha: f64 },
    Constant { matrix: Matrix },
    Gridded { values: Vec<Matrix> },
}

/// Signal + tensor field over a periodic box.
#[derive(Debug, Clone)]
pub struct Environment {
    pub xgrid: XGrid,
    signal: SignalField,
    tensor: TensorField,
    /// Precomputed grad Q at grid nodes for the gridded signal variant.
    gridded_grad: Option<Vec<Vector>>,
}

impl Environment {
    pub fn new(xgrid: XGrid, signal: SignalField, tensor: TensorField) -> Result<Self> {
        let n = xgrid.n;
        match &signal {
            SignalField::Gaussian {
                width, amplitude, ..
            } => {
                if !(*width > 0.0) {
                    return Err(Error::Config("signal width must be > 0".into()));
                }
                if !amplitude.is_finite() {
                    return Err(Error::Config("signal amplitude must be finite".into()));
                }
            }
            SignalField::Ramp { direction, .. } => {
                if linalg::norm(n, direction) < 1e-12 {
                    return Err(Error::Config("ramp direction must be non-zero".into()));
                }
            }
            SignalField::Gridded { values } => {
                if values.len() != xgrid.cells() {
                    return Err(Error::Config(format!(
                        "gridded signal has {} values, expected {}",
                        values.len(),
                        xgrid.cells()
                    )));
                }
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Config("gridded signal must be finite".into()));
                }
            }
        }
        match &tensor {
            TensorField::ScaledIdentity { alpha } => {
                if !(*alpha >= 0.0 && *alpha <= 1.0) {
                    return Err(Error::Config(format!(
                        "tensor scale must be in [0, 1], got {alpha}"
                    )));
                }
            }
            TensorField::Constant { matrix } => {
                check_tensor_norm(n, matrix, "constant tensor")?;
            }
            TensorField::Gridded { values } => {
                if values.len() != xgrid.cells() {
                    return Err(Error::Config(format!(
                        "gridded tensor has {} values, expected {}",
                        values.len(),
                        xgrid.cells()
                    )));
                }
                for (i, m) in values.iter().enumerate() {
                    check_tensor_norm(n, m, &format!("tensor at cell {i}"))?;
                }
            }
        }
        let gridded_grad = match &signal {
            SignalField::Gridded { values } => Some(centered_gradient(&xgrid, values)),
            _ => None,
        };
        Ok(Self {
            xgrid,
            signal,
            tensor,
            gridded_grad,
        })
    }

    pub fn signal(&self) -> &SignalField {
        &self.signal
    }

    /// Signal value Q(x).
    pub fn signal_value(&self, x: &Vector) -> f64 {
        let n = self.xgrid.n;
        match &self.signal {
            SignalField::Gaussian {
                center,
                width,
                amplitude,
            } => {
                let d = self.min_image(x, center);
                amplitude * (-linalg::dot(n, &d, &d) / (2.0 * width * width)).exp()
            }
            SignalField::Ramp { direction, slope } => slope * linalg::dot(n, direction, x),
            SignalField::Gridded { values } => {
                let idx = self
                    .xgrid
                    .nearest(&self.xgrid.wrap(x))
                    .expect("wrapped position is inside the box");
                values[idx]
            }
        }
    }

    /// grad Q(x): analytic derivative or centred finite difference.
    pub fn grad_q(&self, x: &Vector) -> Vector {
        let n = self.xgrid.n;
        match &self.signal {
            SignalField::Gaussian {
                center,
                width,
                amplitude,
            } => {
                let d = self.min_image(x, center);
                let w2 = width * width;
                let q = amplitude * (-linalg::dot(n, &d, &d) / (2.0 * w2)).exp();
                linalg::scale(n, &d, -q / w2)
            }
            SignalField::Ramp { direction, slope } => linalg::scale(n, direction, *slope),
            SignalField::Gridded { .. } => {
                let idx = self
                    .xgrid
                    .nearest(&self.xgrid.wrap(x))
                    .expect("wrapped position is inside the box");
                self.gridded_grad.as_ref().unwrap()[idx]
            }
        }
    }

    /// Anisotropy tensor at `x`.
    pub fn tensor(&self, x: &Vector) -> Matrix {
        let n = self.xgrid.n;
        match &self.tensor {
            TensorField::ScaledIdentity { alpha } => {
                let mut m = ZERO_MATRIX;
                for i in 0..n {
                    m[i][i] = *alpha;
                }
                m
            }
            TensorField::Constant { matrix } => *matrix,
            TensorField::Gridded { values } => {
                let idx = self
                    .xgrid
                    .nearest(&self.xgrid.wrap(x))
                    .expect("wrapped position is inside the box");
                values[idx]
            }
        }
    }

    /// Rescaled taxis velocity v*_eps(x); eps = 0 gives the zero vector,
    /// eps = 1 the unscaled v*.
    pub fn v_star(&self, x: &Vector, epsilon: f64) -> Vector {
        let n = self.xgrid.n;
        let g = self.grad_q(x);
        let gn = linalg::norm(n, &g);
        let f = self.tensor(x);
        let scaled = linalg::scale(n, &g, epsilon / (1.0 + epsilon * gn));
        linalg::matvec(n, &f, &scaled)
    }

    /// Distance of v*_eps from its second-order expansion
    /// eps F grad Q - eps^2 F grad Q |grad Q|; bounded by eps^3 |grad Q|^3.
    pub fn v_star_remainder(&self, x: &Vector, epsilon: f64) -> f64 {
        let n = self.xgrid.n;
        let g = self.grad_q(x);
        let gn = linalg::norm(n, &g);
        let f = self.tensor(x);
        let fg = linalg::matvec(n, &f, &g);
        let exact = self.v_star(x, epsilon);
        let mut r = 0.0f64;
        for i in 0..n {
            let expansion = epsilon * fg[i] - epsilon * epsilon * fg[i] * gn;
            r += (exact[i] - expansion).powi(2);
        }
        r.sqrt()
    }

    fn min_image(&self, x: &Vector, center: &Vector) -> Vector {
        let l = self.xgrid.length;
        let mut d = ZERO_VECTOR;
        for i in 0..self.xgrid.n {
            let mut di = (x[i] - center[i]).rem_euclid(l);
            if di >= 0.5 * l {
                di -= l;
            }
            d[i] = di;
        }
        d
    }
}

fn check_tensor_norm(n: usize, m: &Matrix, what: &str) -> Result<()> {
    for row in m.iter().take(n) {
        for v in row.iter().take(n) {
            if !v.is_finite() {
                return Err(Error::Config(format!("{what}: entries must be finite")));
            }
        }
    }
    let norm = linalg::spectral_norm_power_iteration(n, m, 200);
    if norm > 1.0 + 1e-10 {
        return Err(Error::Config(format!(
            "{what}: spectral norm {norm} exceeds 1"
        )));
    }
    Ok(())
}

/// Second-order centred differences with periodic wraparound.
fn centered_gradient(xgrid: &XGrid, values: &[f64]) -> Vec<Vector> {
    let h = xgrid.spacing();
    (0..xgrid.cells())
        .map(|idx| {
            let mut g = ZERO_VECTOR;
            for d in 0..xgrid.n {
                let p = values[xgrid.shift(idx, d, 1)];
                let m = values[xgrid.shift(idx, d, -1)];
                g[d] = (p - m) / (2.0 * h);
            }
            g
        })
        .collect()
}

/// Load a gridded signal: CSV `x_index[,y_index],value`.
pub fn load_gridded_signal(path: &Path, xgrid: &XGrid) -> Result<SignalField> {
    let rows = read_rows(path, xgrid, 1)?;
    Ok(SignalField::Gridded {
        values: rows.into_iter().map(|r| r[0]).collect(),
    })
}

/// Load a gridded tensor field: CSV `x_index[,y_index],f11,f12,f21,f22`
/// for n = 2 or `x_index,f11` for n = 1.
pub fn load_gridded_tensor(path: &Path, xgrid: &XGrid) -> Result<TensorField> {
    let comps = if xgrid.n == 2 { 4 } else { 1 };
    let rows = read_rows(path, xgrid, comps)?;
    let values = rows
        .into_iter()
        .map(|r| {
            if xgrid.n == 1 {
                [[r[0], 0.0], [0.0, 0.0]]
            } else {
                [[r[0], r[1]], [r[2], r[3]]]
            }
        })
        .collect();
    Ok(TensorField::Gridded { values })
}

fn read_rows(path: &Path, xgrid: &XGrid, comps: usize) -> Result<Vec<Vec<f64>>> {
    let idx_cols = xgrid.n;
    let file = std::fs::File::open(path)?;
    let mut rows = vec![Vec::new(); xgrid.cells()];
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') || (lineno == 0 && t.starts_with("x_index")) {
            continue;
        }
        let cols: Vec<&str> = t.split(',').collect();
        if cols.len() != idx_cols + comps {
            return Err(Error::Config(format!(
                "{}:{}: expected {} columns, got {}",
                path.display(),
                lineno + 1,
                idx_cols + comps,
                cols.len()
            )));
        }
        let mut ij = [0usize; 2];
        for (d, item) in ij.iter_mut().enumerate().take(idx_cols) {
            *item = cols[d]
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad index {:?}", cols[d])))?;
            if *item >= xgrid.nx {
                return Err(Error::Config(format!(
                    "{}:{}: index {} out of range",
                    path.display(),
                    lineno + 1,
                    item
                )));
            }
        }
        let mut vals = Vec::with_capacity(comps);
        for c in cols.iter().skip(idx_cols) {
            let v: f64 = c
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad value {c:?}")))?;
            vals.push(v);
        }
        rows[xgrid.flat(ij)] = vals;
    }
    if rows.iter().any(|r| r.len() != comps) {
        return Err(Error::Config(format!(
            "{}: incomplete table",
            path.display()
        )));
    }
    Ok(rows)
}

/// Write a gridded-signal CSV in the loader's schema.
pub fn save_gridded_signal(path: &Path, xgrid: &XGrid, values: &[f64]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    if xgrid.n == 1 {
        writeln!(out, "x_index,value")?;
    } else {
        writeln!(out, "x_index,y_index,value")?;
    }
    for idx in 0..xgrid.cells() {
        let ij = xgrid.unflat(idx);
        let v = crate::harness::report::fmt_float(values[idx]);
        if xgrid.n == 1 {
            writeln!(out, "{},{}", ij[0], v)?;
        } else {
            writeln!(out, "{},{},{}", ij[0], ij[1], v)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_env(n: usize, signal: SignalField) -> Environment {
        let xgrid = XGrid::new(n, 16, 1.0).unwrap();
        Environment::new(xgrid, signal, TensorField::ScaledIdentity { alpha: 1.0 }).unwrap()
    }

    #[test]
    fn ramp_gradient_constant() {
        let env = identity_env(
            2,
            SignalField::Ramp {
                direction: [1.0, 0.0],
                slope: 0.3,
            },
        );
        let g = env.grad_q(&[0.7, 0.2]);
        assert!((g[0] - 0.3).abs() < 1e-15 && g[1].abs() < 1e-15);
    }

    #[test]
    fn gaussian_gradient_center_and_offset() {
        let (a, w) = (2.0, 0.1);
        let env = identity_env(
            2,
            SignalField::Gaussian {
                center: [0.5, 0.5],
                width: w,
                amplitude: a,
            },
        );
        let g0 = env.grad_q(&[0.5, 0.5]);
        assert!(linalg::norm(2, &g0) < 1e-15);
        // at x = center + (w, 0): grad = (-A e^{-1/2} / w, 0); checked against
        // symbolic differentiation and a central finite difference
        let g1 = env.grad_q(&[0.5 + w, 0.5]);
        let expected = -a * (-0.5f64).exp() / w;
        assert!((g1[0] - expected).abs() < 1e-12, "{} vs {expected}", g1[0]);
        let d = 1e-6;
        let fd = (env.signal_value(&[0.5 + w + d, 0.5]) - env.signal_value(&[0.5 + w - d, 0.5]))
            / (2.0 * d);
        assert!((g1[0] - fd).abs() < 1e-7);
    }

    #[test]
    fn v_star_direct_evaluation() {
        // F = I, grad Q = (3, 4), eps = 1 -> (0.5, 2/3), magnitude 5/6
        let env = identity_env(
            2,
            SignalField::Ramp {
                direction: [0.6, 0.8],
                slope: 5.0,
            },
        );
        let v = env.v_star(&[0.1, 0.1], 1.0);
        assert!((v[0] - 0.5).abs() < 1e-14);
        assert!((v[1] - 2.0 / 3.0).abs() < 1e-14);
        assert!((linalg::norm(2, &v) - 5.0 / 6.0).abs() < 1e-14);

        // eps = 0.1 -> (0.3, 0.4) / 1.5
        let v = env.v_star(&[0.1, 0.1], 0.1);
        assert!((v[0] - 0.2).abs() < 1e-14);
        assert!((v[1] - 0.4 / 1.5).abs() < 1e-14);

        // zero gradient
        let env0 = identity_env(
            2,
            SignalField::Gaussian {
                center: [0.5, 0.5],
                width: 0.1,
                amplitude: 1.0,
            },
        );
        let v0 = env0.v_star(&[0.5, 0.5], 1.0);
        assert!(linalg::norm(2, &v0) < 1e-15);
    }

    #[test]
    fn v_star_remainder_bounded_by_cubic_term() {
        // |grad Q| = 1: remainder = eps^3 / (1 + eps), checked by the
        // geometric-series oracle eps |g| (eps|g|)^2 / (1 + eps|g|)
        let env = identity_env(
            1,
            SignalField::Ramp {
                direction: [1.0, 0.0],
                slope: 1.0,
            },
        );
        let x = [0.3, 0.0];
        let r1 = env.v_star_remainder(&x, 0.1);
        assert!((r1 - 0.1 * 0.01 / 1.1).abs() < 1e-15);
        assert!(r1 <= 1e-3);
        let r2 = env.v_star_remainder(&x, 0.05);
        assert!((r2 - 1.19e-4).abs() < 1e-6);
        assert!(r2 <= 1.25e-4);
        for eps in [0.2, 0.1, 0.05] {
            assert!(env.v_star_remainder(&x, eps) <= eps.powi(3));
        }
    }

    #[test]
    fn flux_limitation_over_random_states() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let slope: f64 = rng.gen_range(0.0..50.0);
            let dirx: f64 = rng.gen_range(-1.0..1.0);
            let diry: f64 = rng.gen_range(-1.0..1.0);
            if dirx.abs() + diry.abs() < 1e-3 {
                continue;
            }
            let env = identity_env(
                2,
                SignalField::Ramp {
                    direction: [dirx, diry],
                    slope,
                },
            );
            let eps = rng.gen_range(0.01..1.0);
            let v = env.v_star(&[0.5, 0.5], eps);
            assert!(linalg::norm(2, &v) < 1.0);
        }
    }

    #[test]
    fn spectral_norm_validation() {
        let xgrid = XGrid::new(2, 8, 1.0).unwrap();
        let bad = Environment::new(
            xgrid.clone(),
            SignalField::Ramp {
                direction: [1.0, 0.0],
                slope: 1.0,
            },
            TensorField::Constant {
                matrix: [[1.2, 0.0], [0.0, 0.3]],
            },
        );
        assert!(bad.is_err());
        let ok = Environment::new(
            xgrid,
            SignalField::Ramp {
                direction: [1.0, 0.0],
                slope: 1.0,
            },
            TensorField::Constant {
                matrix: [[0.8, 0.1], [0.1, 0.5]],
            },
        );
        assert!(ok.is_ok());
    }

    #[test]
    fn gridded_signal_gradient_periodic() {
        let xgrid = XGrid::new(1, 64, 1.0).unwrap();
        let values: Vec<f64> = (0..64)
            .map(|i| {
                let x = (i as f64 + 0.5) / 64.0;
                (2.0 * std::f64::consts::PI * x).sin()
            })
            .collect();
        let env = Environment::new(
            xgrid.clone(),
            SignalField::Gridded { values },
            TensorField::ScaledIdentity { alpha: 1.0 },
        )
        .unwrap();
        // centred differences of sin on a periodic grid: error O(h^2)
        for i in [0usize, 13, 63] {
            let x = xgrid.node(i);
            let exact = 2.0 * std::f64::consts::PI * (2.0 * std::f64::consts::PI * x[0]).cos();
            assert!((env.grad_q(&x)[0] - exact).abs() < 0.02 * exact.abs().max(1.0));
        }
    }

    #[test]
    fn signal_csv_roundtrip() {
        let xgrid = XGrid::new(1, 8, 1.0).unwrap();
        let values: Vec<f64> = (0..8).map(|i| (i as f64).sin().abs() + 0.5).collect();
        let dir = std::env::temp_dir().join(format!("fibrokin-sig-{}", rand::random::<u64>()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("q.csv");
        save_gridded_signal(&path, &xgrid, &values).unwrap();
        let sig = load_gridded_signal(&path, &xgrid).unwrap();
        let env = Environment::new(
            xgrid.clone(),
            sig,
            TensorField::ScaledIdentity { alpha: 1.0 },
        )
        .unwrap();
        for i in 0..8 {
            assert_eq!(
                env.signal_value(&xgrid.node(i)).to_bits(),
                values[i].to_bits()
            );
        }
        std::fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn tensor_csv_roundtrip() {
        let xgrid = XGrid::new(2, 3, 1.0).unwrap();
        let dir = std::env::temp_dir().join(format!("fibrokin-env-{}", rand::random::<u64>()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("f.csv");
        let mut body = String::from("x_index,y_index,f11,f12,f21,f22\n");
        for i in 0..3 {
            for j in 0..3 {
                body.push_str(&format!("{i},{j},0.5,0.1,0.1,0.25\n"));
            }
        }
        std::fs::write(&path, body).unwrap();
        let t = load_gridded_tensor(&path, &xgrid).unwrap();
        let env = Environment::new(
            xgrid,
            SignalField::Ramp {
                direction: [1.0, 0.0],
                slope: 0.0,
            },
            t,
        )
        .unwrap();
        let m = env.tensor(&[0.5, 0.5]);
        assert_eq!(m[0][0], 0.5);
        assert_eq!(m[1][1], 0.25);
        std::fs::remove_dir_all(dir).ok();
    }
}
