//! Flat key-value experiment configuration.
//!
//! One `key = value` pair per line, dotted section keys, `#` comments.
//! Unknown keys are rejected with their path. Model preconditions that are
//! checkable from the configuration alone (directed fibers vs parabolic
//! kinds, kappa/kind pairing) are validated at load time.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::environment::{
    load_gridded_signal, load_gridded_tensor, Environment, ScalingParams, SignalField, TensorField,
};
use crate::error::{Error, Result};
use crate::fiber::{load_gridded_fiber, FiberDistribution, FiberKind};
use crate::grid::{PhaseGrid, XGrid};
use crate::kinetic::InitProfile;
use crate::linalg::{Matrix, Vector, ZERO_VECTOR};
use crate::macroscale::MacroKind;
use crate::weak::ResidualKind;

/// Pipeline stages of `run`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Kinetic,
    Macro,
    Tilde,
}

#[derive(Debug, Clone)]
pub enum FiberSpec {
    Uniform,
    VonMises { mean: Vector, concentration: f64 },
    BimodalVonMises { mean: Vector, concentration: f64 },
    Discrete { p_plus: f64 },
    Gridded { file: PathBuf },
}

#[derive(Debug, Clone)]
pub enum SignalSpec {
    None,
    Gaussian {
        center: Vector,
        width: f64,
        amplitude: f64,
    },
    Ramp {
        direction: Vector,
        slope: f64,
    },
    Gridded {
        file: PathBuf,
    },
}

#[derive(Debug, Clone)]
pub enum TensorSpec {
    Identity { alpha: f64 },
    Constant { matrix: Matrix },
    Gridded { file: PathBuf },
}

/// Fully parsed experiment description.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub scenario: String,
    /// Raw lines for the manifest echo, in file order.
    pub lines: Vec<(String, String)>,
    pub n: usize,
    pub epsilon: f64,
    pub kappa: u8,
    pub a: f64,
    pub length: f64,
    pub nx: usize,
    pub ns: usize,
    pub k: usize,
    pub fiber_k: usize,
    pub fiber: FiberSpec,
    pub signal: SignalSpec,
    pub tensor: TensorSpec,
    pub init_center: Vector,
    pub init_width: f64,
    pub init_profile: InitProfile,
    pub t_end: f64,
    pub snapshots: usize,
    pub pipeline: Vec<Stage>,
    pub macro_kind: MacroKind,
    pub sweep_epsilons: Vec<f64>,
    pub weak_kinds: Vec<ResidualKind>,
    pub weak_tests: usize,
    pub seed: u64,
}

struct Pairs {
    lines: Vec<(String, String)>,
    used: BTreeSet<String>,
}

impl Pairs {
    fn get(&mut self, key: &str) -> Option<String> {
        self.used.insert(key.to_string());
        self.lines
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.clone())
    }

    fn f64(&mut self, key: &str, default: f64) -> Result<f64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("{key}: expected a number, got {v:?}"))),
        }
    }

    fn usize(&mut self, key: &str, default: usize) -> Result<usize> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("{key}: expected an integer, got {v:?}"))),
        }
    }

    fn vector(&mut self, key: &str, n: usize, default: Vector) -> Result<Vector> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => {
                let parts: Vec<&str> = v.split(',').map(str::trim).collect();
                if parts.len() != n {
                    return Err(Error::Config(format!(
                        "{key}: expected {n} comma-separated components, got {v:?}"
                    )));
                }
                let mut out = ZERO_VECTOR;
                for (d, p) in parts.iter().enumerate() {
                    out[d] = p
                        .parse()
                        .map_err(|_| Error::Config(format!("{key}: bad component {p:?}")))?;
                }
                Ok(out)
            }
        }
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Self::from_str_with_base(&text, &base)
    }

    pub fn from_str_with_base(text: &str, base: &Path) -> Result<Self> {
        let mut lines = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected key = value, got {line:?}",
                    no + 1
                ))
            })?;
            lines.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut p = Pairs {
            lines: lines.clone(),
            used: BTreeSet::new(),
        };

        let scenario = p.get("scenario").unwrap_or_else(|| "unnamed".into());
        let n = p.usize("scaling.dimension", 1)?;
        if n != 1 && n != 2 {
            return Err(Error::Config(format!(
                "scaling.dimension must be 1 or 2, got {n}"
            )));
        }
        let epsilon = p.f64("scaling.epsilon", 0.1)?;
        let kappa = p.usize("scaling.kappa", 2)? as u8;
        let a = p.f64("scaling.a", 1.0)?;
        ScalingParams::new(epsilon, kappa, a, n)?;

        let length = p.f64("domain.length", 1.0)?;
        let (dnx, dns, dk) = if n == 1 { (256, 64, 2) } else { (64, 16, 32) };
        let nx = p.usize("grid.nx", dnx)?;
        let ns = p.usize("grid.ns", dns)?;
        let k = p.usize("grid.k", dk)?;
        let fiber_k = p.usize("fiber.k", if n == 1 { 2 } else { 128 })?;

        let fiber = match p.get("fiber.variant").as_deref().unwrap_or("uniform") {
            "uniform" => FiberSpec::Uniform,
            "von_mises" => FiberSpec::VonMises {
                mean: p.vector("fiber.mu", n.max(2), [1.0, 0.0])?,
                concentration: p.f64("fiber.concentration", 1.0)?,
            },
            "bimodal_von_mises" => FiberSpec::BimodalVonMises {
                mean: p.vector("fiber.mu", n.max(2), [1.0, 0.0])?,
                concentration: p.f64("fiber.concentration", 1.0)?,
            },
            "discrete" => FiberSpec::Discrete {
                p_plus: p.f64("fiber.p_plus", 0.5)?,
            },
            "gridded" => FiberSpec::Gridded {
                file: base.join(p.get("fiber.file").ok_or_else(|| {
                    Error::Config("fiber.variant = gridded requires fiber.file".into())
                })?),
            },
            other => return Err(Error::Config(format!("unknown fiber.variant {other:?}"))),
        };

        let signal = match p.get("signal.variant").as_deref().unwrap_or("none") {
            "none" => SignalSpec::None,
            "gaussian" => SignalSpec::Gaussian {
                center: p.vector("signal.center", n, {
                    let mut c = ZERO_VECTOR;
                    for item in c.iter_mut().take(n) {
                        *item = 0.5 * length;
                    }
                    c
                })?,
                width: p.f64("signal.width", 0.1 * length)?,
                amplitude: p.f64("signal.amplitude", 1.0)?,
            },
            "ramp" => SignalSpec::Ramp {
                direction: p.vector("signal.direction", n, [1.0, 0.0])?,
                slope: p.f64("signal.slope", 1.0)?,
            },
            "gridded" => SignalSpec::Gridded {
                file: base.join(p.get("signal.file").ok_or_else(|| {
                    Error::Config("signal.variant = gridded requires signal.file".into())
                })?),
            },
            other => return Err(Error::Config(format!("unknown signal.variant {other:?}"))),
        };

        let tensor = match p.get("tensor.variant").as_deref().unwrap_or("identity") {
            "identity" => TensorSpec::Identity {
                alpha: p.f64("tensor.alpha", 1.0)?,
            },
            "constant" => {
                let comps = if n == 2 { 4 } else { 1 };
                let v = p.get("tensor.matrix").ok_or_else(|| {
                    Error::Config("tensor.variant = constant requires tensor.matrix".into())
                })?;
                let parts: Vec<&str> = v.split(',').map(str::trim).collect();
                if parts.len() != comps {
                    return Err(Error::Config(format!(
                        "tensor.matrix: expected {comps} entries, got {v:?}"
                    )));
                }
                let mut m = [[0.0; 2]; 2];
                if n == 1 {
                    m[0][0] = parts[0]
                        .parse()
                        .map_err(|_| Error::Config("tensor.matrix: bad entry".into()))?;
                } else {
                    for (i, part) in parts.iter().enumerate() {
                        m[i / 2][i % 2] = part
                            .parse()
                            .map_err(|_| Error::Config("tensor.matrix: bad entry".into()))?;
                    }
                }
                TensorSpec::Constant { matrix: m }
            }
            "gridded" => TensorSpec::Gridded {
                file: base.join(p.get("tensor.file").ok_or_else(|| {
                    Error::Config("tensor.variant = gridded requires tensor.file".into())
                })?),
            },
            other => return Err(Error::Config(format!("unknown tensor.variant {other:?}"))),
        };

        let init_center = p.vector("init.center", n, {
            let mut c = ZERO_VECTOR;
            for item in c.iter_mut().take(n) {
                *item = 0.5 * length;
            }
            c
        })?;
        let init_width = p.f64("init.width", 0.08 * length)?;
        let init_profile = match p.get("init.profile").as_deref().unwrap_or("equilibrium") {
            "equilibrium" => InitProfile::Equilibrium,
            "isotropic" => InitProfile::Isotropic,
            other => return Err(Error::Config(format!("unknown init.profile {other:?}"))),
        };

        let t_end = p.f64("run.t_end", 1.0)?;
        let snapshots = p.usize("run.snapshots", 21)?;
        let pipeline = p
            .get("run.pipeline")
            .unwrap_or_else(|| "kinetic".into())
            .split(',')
            .map(|s| match s.trim() {
                "kinetic" => Ok(Stage::Kinetic),
                "macro" => Ok(Stage::Macro),
                "tilde" => Ok(Stage::Tilde),
                other => Err(Error::Config(format!("unknown pipeline stage {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;

        let macro_kind = MacroKind::parse(&p.get("macro.kind").unwrap_or_else(|| {
            if kappa == 2 {
                "parabolic_zero"
            } else {
                "hyperbolic_zero"
            }
            .into()
        }))?;

        let sweep_epsilons = match p.get("sweep.epsilons") {
            None => vec![0.2, 0.1, 0.05],
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("sweep.epsilons: bad entry {s:?}")))
                })
                .collect::<Result<Vec<f64>>>()?,
        };

        let weak_kinds = match p.get("weak.kinds") {
            None => vec![ResidualKind::Moment0],
            Some(v) => v
                .split(',')
                .map(|s| ResidualKind::parse(s.trim()))
                .collect::<Result<Vec<_>>>()?,
        };
        let weak_tests = p.usize("weak.tests", 4)?;
        let seed = p.usize("seed", 42)? as u64;

        // reject unknown keys so typos fail loudly
        for (key, _) in &lines {
            if !p.used.contains(key) && key != "scenario" {
                return Err(Error::Config(format!("unknown config key {key:?}")));
            }
        }

        let cfg = Self {
            scenario,
            lines,
            n,
            epsilon,
            kappa,
            a,
            length,
            nx,
            ns,
            k,
            fiber_k,
            fiber,
            signal,
            tensor,
            init_center,
            init_width,
            init_profile,
            t_end,
            snapshots,
            pipeline,
            macro_kind,
            sweep_epsilons,
            weak_kinds,
            weak_tests,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load-time validation; macro-model preconditions are checked when the
    /// pipeline requests a macroscopic stage.
    fn validate(&self) -> Result<()> {
        if self.pipeline.contains(&Stage::Macro) || self.pipeline.contains(&Stage::Tilde) {
            self.validate_macro_preconditions()?;
        }
        if !(self.t_end >= 0.0) {
            return Err(Error::Config("run.t_end must be >= 0".into()));
        }
        if self.init_width <= 0.0 {
            return Err(Error::Config("init.width must be > 0".into()));
        }
        for w in self.sweep_epsilons.windows(2) {
            if w[1] > w[0] {
                return Err(Error::Config(
                    "sweep.epsilons must be non-increasing".into(),
                ));
            }
        }
        Ok(())
    }

    /// Kappa/kind pairing and the moment gates of the selected macro model.
    /// Called at load time for macro pipelines and by the sweep driver.
    pub fn validate_macro_preconditions(&self) -> Result<()> {
        let parabolic = matches!(
            self.macro_kind,
            MacroKind::ParabolicZero | MacroKind::ParabolicCorrected
        );
        if parabolic && self.kappa != 2 {
            return Err(Error::Config(format!(
                "{} pairs with kappa = 2, got kappa = {}",
                self.macro_kind.name(),
                self.kappa
            )));
        }
        if !parabolic && self.kappa != 1 {
            return Err(Error::Config(format!(
                "{} pairs with kappa = 1, got kappa = {}",
                self.macro_kind.name(),
                self.kappa
            )));
        }
        if parabolic {
            let fiber = self.build_fiber()?;
            let rep = fiber.symmetry_check(1e-8)?;
            if !rep.undirected {
                return Err(Error::Precondition(format!(
                    "{} requires a vanishing mean fiber orientation; max |E[q]| = {}",
                    self.macro_kind.name(),
                    rep.max_mean
                )));
            }
        }
        Ok(())
    }

    pub fn xgrid(&self) -> Result<XGrid> {
        XGrid::new(self.n, self.nx, self.length)
    }

    pub fn phase_grid(&self) -> Result<PhaseGrid> {
        PhaseGrid::new(self.xgrid()?, self.ns, self.k, self.a)
    }

    pub fn scaling(&self) -> Result<ScalingParams> {
        ScalingParams::new(self.epsilon, self.kappa, self.a, self.n)
    }

    pub fn scaling_with_epsilon(&self, epsilon: f64) -> Result<ScalingParams> {
        ScalingParams::new(epsilon, self.kappa, self.a, self.n)
    }

    pub fn build_fiber(&self) -> Result<FiberDistribution> {
        match &self.fiber {
            FiberSpec::Uniform => {
                FiberDistribution::with_directions(self.n, FiberKind::Uniform, self.fiber_k)
            }
            FiberSpec::VonMises {
                mean,
                concentration,
            } => FiberDistribution::with_directions(
                self.n,
                FiberKind::VonMises {
                    mean: *mean,
                    concentration: *concentration,
                },
                self.fiber_k,
            ),
            FiberSpec::BimodalVonMises {
                mean,
                concentration,
            } => FiberDistribution::with_directions(
                self.n,
                FiberKind::Mixture(vec![
                    (
                        0.5,
                        FiberKind::VonMises {
                            mean: *mean,
                            concentration: *concentration,
                        },
                    ),
                    (
                        0.5,
                        FiberKind::VonMises {
                            mean: [-mean[0], -mean[1]],
                            concentration: *concentration,
                        },
                    ),
                ]),
                self.fiber_k,
            ),
            FiberSpec::Discrete { p_plus } => FiberDistribution::with_directions(
                self.n,
                FiberKind::Discrete { p_plus: *p_plus },
                2,
            ),
            FiberSpec::Gridded { file } => load_gridded_fiber(file, &self.xgrid()?, self.fiber_k),
        }
    }

    pub fn build_environment(&self) -> Result<Environment> {
        let xgrid = self.xgrid()?;
        let signal = match &self.signal {
            SignalSpec::None => SignalField::Ramp {
                direction: [1.0, 0.0],
                slope: 0.0,
            },
            SignalSpec::Gaussian {
                center,
                width,
                amplitude,
            } => SignalField::Gaussian {
                center: *center,
                width: *width,
                amplitude: *amplitude,
            },
            SignalSpec::Ramp { direction, slope } => SignalField::Ramp {
                direction: *direction,
                slope: *slope,
            },
            SignalSpec::Gridded { file } => load_gridded_signal(file, &xgrid)?,
        };
        let tensor = match &self.tensor {
            TensorSpec::Identity { alpha } => TensorField::ScaledIdentity { alpha: *alpha },
            TensorSpec::Constant { matrix } => TensorField::Constant { matrix: *matrix },
            TensorSpec::Gridded { file } => load_gridded_tensor(file, &xgrid)?,
        };
        Environment::new(xgrid, signal, tensor)
    }

    /// Initial macroscopic density: Gaussian bump, discretely normalised to
    /// unit total mass.
    pub fn initial_density(&self) -> Result<Vec<f64>> {
        let xgrid = self.xgrid()?;
        let mut f: Vec<f64> = (0..xgrid.cells())
            .map(|i| {
                let x = xgrid.node(i);
                let mut r2 = 0.0;
                for d in 0..self.n {
                    let mut dd = (x[d] - self.init_center[d]).rem_euclid(self.length);
                    if dd >= 0.5 * self.length {
                        dd -= self.length;
                    }
                    r2 += dd * dd;
                }
                (-r2 / (2.0 * self.init_width * self.init_width)).exp()
            })
            .collect();
        let mass: f64 = f.iter().sum::<f64>() * xgrid.cell_volume();
        if mass <= 0.0 {
            return Err(Error::Config("initial density has no mass".into()));
        }
        for v in &mut f {
            *v /= mass;
        }
        Ok(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_with_defaults() {
        let cfg =
            ExperimentConfig::from_str_with_base("scenario = smoke\n", Path::new(".")).unwrap();
        assert_eq!(cfg.n, 1);
        assert_eq!(cfg.nx, 256);
        assert_eq!(cfg.ns, 64);
        assert_eq!(cfg.kappa, 2);
        assert_eq!(cfg.macro_kind, MacroKind::ParabolicZero);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = ExperimentConfig::from_str_with_base("scaling.epsilom = 0.1\n", Path::new("."));
        assert!(matches!(err, Err(Error::Config(msg)) if msg.contains("epsilom")));
    }

    #[test]
    fn parabolic_with_directed_fibers_rejected_at_load() {
        let text = "scaling.dimension = 1\nscaling.kappa = 2\nfiber.variant = discrete\nfiber.p_plus = 0.75\nrun.pipeline = kinetic,macro\nmacro.kind = parabolic_zero\n";
        let err = ExperimentConfig::from_str_with_base(text, Path::new("."));
        assert!(matches!(err, Err(Error::Precondition(_))), "{err:?}");
    }

    #[test]
    fn kappa_kind_pairing_enforced() {
        let text = "scaling.kappa = 1\nmacro.kind = parabolic_zero\nrun.pipeline = macro\nfiber.variant = discrete\nfiber.p_plus = 0.5\n";
        let err = ExperimentConfig::from_str_with_base(text, Path::new("."));
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn initial_density_normalised() {
        let cfg = ExperimentConfig::from_str_with_base(
            "scaling.dimension = 2\ngrid.nx = 16\n",
            Path::new("."),
        )
        .unwrap();
        let f = cfg.initial_density().unwrap();
        let mass: f64 = f.iter().sum::<f64>() * (1.0 / 16.0f64).powi(2);
        assert!((mass - 1.0).abs() < 1e-12);
    }
}
