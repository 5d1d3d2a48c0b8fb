//! Spatial and velocity grids.
//!
//! The spatial domain is a periodic box `[0, L)^n` with cell-centred nodes.
//! Velocity space is the unit ball, discretised in polar form: a graded
//! radial mesh on `(0, 1)` times a uniform direction grid on the unit sphere
//! (`K` angles for n = 2, the signs {+1, -1} for n = 1).

use crate::error::{Error, Result};
use crate::linalg::Vector;

/// Periodic spatial grid, same resolution along every axis.
#[derive(Debug, Clone, PartialEq)]
pub struct XGrid {
    pub n: usize,
    pub nx: usize,
    pub length: f64,
}

impl XGrid {
    pub fn new(n: usize, nx: usize, length: f64) -> Result<Self> {
        if !(n == 1 || n == 2) {
            return Err(Error::Config(format!("dimension must be 1 or 2, got {n}")));
        }
        if nx < 2 {
            return Err(Error::Config(format!("nx must be >= 2, got {nx}")));
        }
        if !(length > 0.0) {
            return Err(Error::Config(format!("length must be > 0, got {length}")));
        }
        Ok(Self { n, nx, length })
    }

    pub fn spacing(&self) -> f64 {
        self.length / self.nx as f64
    }

    /// Total number of spatial cells.
    pub fn cells(&self) -> usize {
        self.nx.pow(self.n as u32)
    }

    /// Cell volume h^n.
    pub fn cell_volume(&self) -> f64 {
        self.spacing().powi(self.n as i32)
    }

    /// Flat index from per-axis indices. Row-major: x_index outer, y_index inner.
    pub fn flat(&self, i: [usize; 2]) -> usize {
        if self.n == 1 {
            i[0]
        } else {
            i[0] * self.nx + i[1]
        }
    }

    pub fn unflat(&self, idx: usize) -> [usize; 2] {
        if self.n == 1 {
            [idx, 0]
        } else {
            [idx / self.nx, idx % self.nx]
        }
    }

    /// Cell-centre coordinates of a flat index.
    pub fn node(&self, idx: usize) -> Vector {
        let h = self.spacing();
        let ij = self.unflat(idx);
        let mut x = [0.0; 2];
        for d in 0..self.n {
            x[d] = (ij[d] as f64 + 0.5) * h;
        }
        x
    }

    /// Wrap a point into `[0, L)^n`.
    pub fn wrap(&self, x: &Vector) -> Vector {
        let mut out = [0.0; 2];
        for d in 0..self.n {
            out[d] = x[d].rem_euclid(self.length);
        }
        out
    }

    /// Index of the nearest cell centre to `x`; errors outside the box.
    pub fn nearest(&self, x: &Vector) -> Result<usize> {
        let h = self.spacing();
        let mut ij = [0usize; 2];
        for d in 0..self.n {
            if !x[d].is_finite() || x[d] < 0.0 || x[d] >= self.length {
                return Err(Error::Domain(format!(
                    "position component {} = {} outside [0, {})",
                    d, x[d], self.length
                )));
            }
            ij[d] = ((x[d] / h) as usize).min(self.nx - 1);
        }
        Ok(self.flat(ij))
    }

    /// Periodic neighbour index along axis `d`, offset +1 or -1.
    pub fn shift(&self, idx: usize, d: usize, offset: isize) -> usize {
        let mut ij = self.unflat(idx);
        let m = self.nx as isize;
        ij[d] = ((ij[d] as isize + offset).rem_euclid(m)) as usize;
        self.flat(ij)
    }
}

/// Graded radial mesh on (0, 1): cell edges `(i/ns)^p`, cell-centred nodes.
///
/// The grading power `p = max(1, 2a)` resolves the `s^{1/a - n}` behaviour of
/// the equilibrium profile near the origin.
#[derive(Debug, Clone)]
pub struct RadialGrid {
    pub edges: Vec<f64>,
    pub nodes: Vec<f64>,
    pub widths: Vec<f64>,
    pub grading: f64,
}

impl RadialGrid {
    pub fn graded(ns: usize, p: f64) -> Result<Self> {
        if ns < 2 {
            return Err(Error::Config(format!("ns must be >= 2, got {ns}")));
        }
        if !(p >= 1.0) {
            return Err(Error::Config(format!(
                "grading power must be >= 1, got {p}"
            )));
        }
        let edges: Vec<f64> = (0..=ns).map(|i| (i as f64 / ns as f64).powf(p)).collect();
        let nodes: Vec<f64> = (0..ns).map(|i| 0.5 * (edges[i] + edges[i + 1])).collect();
        let widths: Vec<f64> = (0..ns).map(|i| edges[i + 1] - edges[i]).collect();
        Ok(Self {
            edges,
            nodes,
            widths,
            grading: p,
        })
    }

    /// Grading power used for all solver meshes.
    pub fn grading_power(a: f64) -> f64 {
        (2.0 * a).max(1.0)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Midpoint-rule radial weights s^{n-1} ds.
    pub fn weights(&self, n: usize) -> Vec<f64> {
        self.nodes
            .iter()
            .zip(&self.widths)
            .map(|(&s, &w)| s.powi(n as i32 - 1) * w)
            .collect()
    }
}

/// Uniform grid of unit directions on S_1(0).
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionGrid {
    pub n: usize,
    pub dirs: Vec<Vector>,
    /// Quadrature weight per direction (2*pi/K for n = 2, 1 for n = 1).
    pub weight: f64,
}

impl DirectionGrid {
    pub fn new(n: usize, k: usize) -> Result<Self> {
        match n {
            1 => Ok(Self {
                n,
                dirs: vec![[1.0, 0.0], [-1.0, 0.0]],
                weight: 1.0,
            }),
            2 => {
                if k < 4 || !k.is_multiple_of(2) {
                    return Err(Error::Config(format!(
                        "direction count must be even and >= 4, got {k}"
                    )));
                }
                let dirs = (0..k)
                    .map(|j| {
                        let th = 2.0 * std::f64::consts::PI * j as f64 / k as f64;
                        [th.cos(), th.sin()]
                    })
                    .collect();
                Ok(Self {
                    n,
                    dirs,
                    weight: 2.0 * std::f64::consts::PI / k as f64,
                })
            }
            _ => Err(Error::Config(format!("dimension must be 1 or 2, got {n}"))),
        }
    }

    pub fn len(&self) -> usize {
        self.dirs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dirs.is_empty()
    }

    /// Index of the antipodal direction.
    pub fn opposite(&self, k: usize) -> usize {
        match self.n {
            1 => 1 - k,
            _ => (k + self.len() / 2) % self.len(),
        }
    }

    /// Angle of direction `k` (n = 2 only).
    pub fn angle(&self, k: usize) -> f64 {
        2.0 * std::f64::consts::PI * k as f64 / self.len() as f64
    }

    /// Measure of the unit sphere under this quadrature.
    pub fn total_measure(&self) -> f64 {
        self.weight * self.len() as f64
    }
}

/// Phase-space grid: periodic x-grid times polar velocity ball.
///
/// Phase arrays are stored velocity-major: the value at spatial cell `c` and
/// velocity node (j, k) lives at index `(j * K + k) * x.cells() + c`, so each
/// velocity node owns a contiguous spatial slice.
#[derive(Debug, Clone)]
pub struct PhaseGrid {
    pub x: XGrid,
    pub radial: RadialGrid,
    pub dirs: DirectionGrid,
    /// Radial quadrature weights s^{n-1} ds.
    pub rweights: Vec<f64>,
}

impl PhaseGrid {
    /// Build with the grading power tied to the acceleration parameter.
    pub fn new(x: XGrid, ns: usize, k: usize, a: f64) -> Result<Self> {
        let radial = RadialGrid::graded(ns, RadialGrid::grading_power(a))?;
        let dirs = DirectionGrid::new(x.n, k)?;
        let rweights = radial.weights(x.n);
        Ok(Self {
            x,
            radial,
            dirs,
            rweights,
        })
    }

    pub fn velocity_count(&self) -> usize {
        self.radial.len() * self.dirs.len()
    }

    pub fn row(&self, j: usize, k: usize) -> usize {
        j * self.dirs.len() + k
    }

    /// Quadrature weight of velocity node (j, k).
    pub fn weight(&self, j: usize, k: usize) -> f64 {
        let _ = k;
        self.rweights[j] * self.dirs.weight
    }

    /// Velocity vector at node (j, k).
    pub fn velocity(&self, j: usize, k: usize) -> Vector {
        let s = self.radial.nodes[j];
        let th = self.dirs.dirs[k];
        [s * th[0], s * th[1]]
    }

    /// Sum of all velocity weights; pi for n = 2, 2 for n = 1.
    pub fn ball_volume(&self) -> f64 {
        let r: f64 = self.rweights.iter().sum();
        r * self.dirs.total_measure()
    }

    /// Velocity integral per spatial cell.
    pub fn velocity_integral(&self, c: &[f64]) -> Vec<f64> {
        let nxt = self.x.cells();
        let mut m0 = vec![0.0; nxt];
        for j in 0..self.radial.len() {
            for k in 0..self.dirs.len() {
                let w = self.weight(j, k);
                let row = &c[self.row(j, k) * nxt..(self.row(j, k) + 1) * nxt];
                for (acc, v) in m0.iter_mut().zip(row) {
                    *acc += w * v;
                }
            }
        }
        m0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn direction_weights_sum_to_sphere_measure() {
        let g1 = DirectionGrid::new(1, 2).unwrap();
        assert_eq!(g1.total_measure(), 2.0);
        let g2 = DirectionGrid::new(2, 128).unwrap();
        assert!((g2.total_measure() - 2.0 * std::f64::consts::PI).abs() < 1e-12);
    }

    #[test]
    fn radial_weights_reproduce_ball_slice_exactly() {
        // s^{n-1} is constant (n=1) or linear (n=2): midpoint rule is exact.
        for (n, expect) in [(1usize, 1.0), (2usize, 0.5)] {
            for p in [1.0, 2.0, 4.0] {
                let g = RadialGrid::graded(37, p).unwrap();
                let sum: f64 = g.weights(n).iter().sum();
                assert!((sum - expect).abs() < 1e-13, "n={n} p={p} sum={sum}");
            }
        }
    }

    #[test]
    fn periodic_wrap_and_neighbours() {
        let g = XGrid::new(2, 8, 1.0).unwrap();
        let idx = g.flat([0, 3]);
        assert_eq!(g.shift(idx, 0, -1), g.flat([7, 3]));
        assert_eq!(g.shift(idx, 1, 1), g.flat([0, 4]));
        let w = g.wrap(&[-0.25, 1.125]);
        assert!((w[0] - 0.75).abs() < 1e-15 && (w[1] - 0.125).abs() < 1e-15);
    }

    #[test]
    fn nearest_rejects_outside_box() {
        let g = XGrid::new(1, 8, 1.0).unwrap();
        assert!(g.nearest(&[1.0, 0.0]).is_err());
        assert!(g.nearest(&[0.999, 0.0]).is_ok());
    }

    #[test]
    fn ball_volume_exact() {
        let g1 = PhaseGrid::new(XGrid::new(1, 4, 1.0).unwrap(), 33, 2, 1.0).unwrap();
        assert!((g1.ball_volume() - 2.0).abs() < 1e-12);
        let g2 = PhaseGrid::new(XGrid::new(2, 4, 1.0).unwrap(), 25, 16, 2.0).unwrap();
        assert!((g2.ball_volume() - std::f64::consts::PI).abs() < 1e-12);
    }
}
