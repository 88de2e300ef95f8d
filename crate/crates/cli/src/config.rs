//! Run configuration: a sectioned TOML file, strictly validated. Unknown
//! keys are hard errors, numeric constraints are re-checked here with the
//! owning module's message, and referenced files must exist at parse time.

use std::fmt;
use std::path::{Path, PathBuf};

use logdisp::field::{gaussian, plane_wave, ComplexField, Grid};
use logdisp::noise::checked_step_count;
use logdisp::nonlinear::{NonlinearParams, PotentialKernel};
use logdisp::sde::Splitting;
use logdisp::snapshot::read_snapshot;
use serde::{Deserialize, Serialize};

/// Failures split by exit code: configuration mistakes (2) against
/// numerical failures of a correctly configured run (1).
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<logdisp::Error> for CliError {
    fn from(e: logdisp::Error) -> CliError {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Config(e.to_string())
        }
    }
}

fn section<T>(name: &str, r: logdisp::Result<T>) -> Result<T, CliError> {
    r.map_err(|e| CliError::Config(format!("[{name}] {e}")))
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub grid: GridSection,
    pub model: ModelSection,
    pub noise: NoiseSection,
    pub init: InitSection,
    pub study: Option<StudySection>,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub d: usize,
    pub n: usize,
    pub length: f64,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub lambda: f64,
    pub delta: f64,
    pub alpha1: f64,
    pub potential: Option<PotentialSpec>,
}

/// Kernel choice, flat keys under a `kind` discriminant so that typos stay
/// hard errors.
#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialSpec {
    pub kind: String,
    pub c: Option<f64>,
    pub sigma: Option<f64>,
    pub path: Option<String>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    pub epsilon: f64,
    pub dt: f64,
    pub horizon: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct InitSection {
    pub kind: String,
    pub amplitude: Option<f64>,
    pub width: Option<f64>,
    pub center: Option<Vec<f64>>,
    pub k: Option<Vec<i64>>,
    pub path: Option<String>,
}

/// Study-specific keys; which ones a subcommand accepts is checked at
/// dispatch. `name` must match the subcommand when the section is present.
#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct StudySection {
    pub name: String,
    pub splitting: Option<String>,
    pub ensemble: Option<usize>,
    pub radius: Option<f64>,
    pub norm: Option<String>,
    pub eps_list: Option<Vec<f64>>,
    pub deltas: Option<Vec<f64>>,
    pub rho: Option<f64>,
    pub p: Option<f64>,
    pub intervals: Option<usize>,
    pub substeps: Option<usize>,
    pub control: Option<Vec<f64>>,
    pub penalty_initial: Option<f64>,
    pub penalty_factor: Option<f64>,
    pub penalty_stages: Option<usize>,
    pub max_iterations: Option<usize>,
}

impl StudySection {
    /// Names of the optional keys actually present, for the per-command
    /// vocabulary check.
    pub fn present_keys(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        let mut add = |cond: bool, name: &'static str| {
            if cond {
                v.push(name);
            }
        };
        add(self.splitting.is_some(), "splitting");
        add(self.ensemble.is_some(), "ensemble");
        add(self.radius.is_some(), "radius");
        add(self.norm.is_some(), "norm");
        add(self.eps_list.is_some(), "eps_list");
        add(self.deltas.is_some(), "deltas");
        add(self.rho.is_some(), "rho");
        add(self.p.is_some(), "p");
        add(self.intervals.is_some(), "intervals");
        add(self.substeps.is_some(), "substeps");
        add(self.control.is_some(), "control");
        add(self.penalty_initial.is_some(), "penalty_initial");
        add(self.penalty_factor.is_some(), "penalty_factor");
        add(self.penalty_stages.is_some(), "penalty_stages");
        add(self.max_iterations.is_some(), "max_iterations");
        v
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_dir")]
    pub dir: String,
    #[serde(default)]
    pub snapshots: Vec<f64>,
}

fn default_dir() -> String {
    "out".to_string()
}

impl Default for OutputSection {
    fn default() -> OutputSection {
        OutputSection {
            dir: default_dir(),
            snapshots: Vec::new(),
        }
    }
}

pub const STUDY_NAMES: [&str; 9] = [
    "simulate",
    "skeleton",
    "mam",
    "exit-mc",
    "prop53",
    "delta-study",
    "scaling-check",
    "disp-study",
    "ldp-probe",
];

/// Parse and fully validate a configuration. Relative file references are
/// resolved against `base_dir` (the config file's directory) and must
/// exist. The TOML layer already rejects unknown keys with the valid
/// sibling set and a line/column position.
pub fn parse_config(text: &str, base_dir: &Path) -> Result<RunConfig, CliError> {
    let mut cfg: RunConfig =
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;

    // grid and model constraints, with the owning module's wording
    section(
        "grid",
        Grid::new(cfg.grid.d, cfg.grid.n, cfg.grid.length),
    )?;
    section(
        "model",
        NonlinearParams::new(cfg.model.lambda, cfg.model.delta, cfg.model.alpha1).validate(),
    )?;

    if let Some(p) = &mut cfg.model.potential {
        match p.kind.as_str() {
            "none" => {
                forbid("model.potential", "none", &[
                    ("c", p.c.is_some()),
                    ("sigma", p.sigma.is_some()),
                    ("path", p.path.is_some()),
                ])?;
            }
            "gaussian" => {
                if p.c.is_none() || p.sigma.is_none() {
                    return Err(CliError::Config(
                        "[model.potential] gaussian kernel needs c and sigma".into(),
                    ));
                }
                forbid("model.potential", "gaussian", &[("path", p.path.is_some())])?;
                let sigma = p.sigma.unwrap();
                if !(sigma > 0.0) || !sigma.is_finite() {
                    return Err(CliError::Config(format!(
                        "[model.potential] kernel width must be positive, got {sigma}"
                    )));
                }
            }
            "file" => {
                forbid("model.potential", "file", &[
                    ("c", p.c.is_some()),
                    ("sigma", p.sigma.is_some()),
                ])?;
                let path = p.path.as_deref().ok_or_else(|| {
                    CliError::Config("[model.potential] file kernel needs path".into())
                })?;
                p.path = Some(resolve_file("model.potential", base_dir, path)?);
            }
            other => {
                return Err(CliError::Config(format!(
                    "[model.potential] kind must be one of none|gaussian|file, got \"{other}\""
                )));
            }
        }
    }

    if !cfg.noise.epsilon.is_finite() || cfg.noise.epsilon < 0.0 {
        return Err(CliError::Config(format!(
            "[noise] epsilon must be finite and >= 0, got {}",
            cfg.noise.epsilon
        )));
    }
    section("noise", checked_step_count(cfg.noise.horizon, cfg.noise.dt).map(|_| ()))?;

    let d = cfg.grid.d;
    match cfg.init.kind.as_str() {
        "gaussian" => {
            if cfg.init.amplitude.is_none() || cfg.init.width.is_none() {
                return Err(CliError::Config(
                    "[init] gaussian needs amplitude and width".into(),
                ));
            }
            forbid("init", "gaussian", &[
                ("k", cfg.init.k.is_some()),
                ("path", cfg.init.path.is_some()),
            ])?;
            let w = cfg.init.width.unwrap();
            if !(w > 0.0) || !w.is_finite() {
                return Err(CliError::Config(format!(
                    "[init] width must be positive, got {w}"
                )));
            }
            if let Some(c) = &cfg.init.center {
                if c.len() != d {
                    return Err(CliError::Config(format!(
                        "[init] center must have {d} entries, got {}",
                        c.len()
                    )));
                }
            }
        }
        "plane_wave" => {
            forbid("init", "plane_wave", &[
                ("amplitude", cfg.init.amplitude.is_some()),
                ("width", cfg.init.width.is_some()),
                ("center", cfg.init.center.is_some()),
                ("path", cfg.init.path.is_some()),
            ])?;
            match &cfg.init.k {
                None => {
                    return Err(CliError::Config("[init] plane_wave needs k".into()));
                }
                Some(k) if k.len() != d => {
                    return Err(CliError::Config(format!(
                        "[init] k must have {d} entries, got {}",
                        k.len()
                    )));
                }
                Some(_) => {}
            }
        }
        "file" => {
            forbid("init", "file", &[
                ("amplitude", cfg.init.amplitude.is_some()),
                ("width", cfg.init.width.is_some()),
                ("center", cfg.init.center.is_some()),
                ("k", cfg.init.k.is_some()),
            ])?;
            let path = cfg
                .init
                .path
                .as_deref()
                .ok_or_else(|| CliError::Config("[init] file init needs path".into()))?;
            cfg.init.path = Some(resolve_file("init", base_dir, path)?);
        }
        other => {
            return Err(CliError::Config(format!(
                "[init] kind must be one of gaussian|plane_wave|file, got \"{other}\""
            )));
        }
    }

    if let Some(study) = &cfg.study {
        if !STUDY_NAMES.contains(&study.name.as_str()) {
            return Err(CliError::Config(format!(
                "[study] name must be one of {}, got \"{}\"",
                STUDY_NAMES.join("|"),
                study.name
            )));
        }
        if let Some(s) = &study.splitting {
            if s != "strang" && s != "lie" {
                return Err(CliError::Config(format!(
                    "[study] splitting must be strang or lie, got \"{s}\""
                )));
            }
        }
    }

    if cfg.output.dir.is_empty() {
        return Err(CliError::Config("[output] dir must not be empty".into()));
    }
    for t in &cfg.output.snapshots {
        if !t.is_finite() || *t < 0.0 || *t > cfg.noise.horizon {
            return Err(CliError::Config(format!(
                "[output] snapshot time {t} outside [0, {}]",
                cfg.noise.horizon
            )));
        }
    }

    Ok(cfg)
}

fn forbid(sect: &str, kind: &str, keys: &[(&str, bool)]) -> Result<(), CliError> {
    for (name, present) in keys {
        if *present {
            return Err(CliError::Config(format!(
                "[{sect}] key {name} is not used by kind = \"{kind}\""
            )));
        }
    }
    Ok(())
}

fn resolve_file(sect: &str, base_dir: &Path, path: &str) -> Result<String, CliError> {
    let resolved = if Path::new(path).is_absolute() {
        PathBuf::from(path)
    } else {
        base_dir.join(path)
    };
    if !resolved.is_file() {
        return Err(CliError::Config(format!(
            "[{sect}] file not found: {}",
            resolved.display()
        )));
    }
    Ok(resolved.to_string_lossy().into_owned())
}

impl RunConfig {
    pub fn grid(&self) -> Result<Grid, CliError> {
        section("grid", Grid::new(self.grid.d, self.grid.n, self.grid.length))
    }

    pub fn initial_field(&self) -> Result<ComplexField, CliError> {
        let grid = self.grid()?;
        match self.init.kind.as_str() {
            "gaussian" => {
                let center = self
                    .init
                    .center
                    .clone()
                    .unwrap_or_else(|| vec![0.0; grid.dim()]);
                Ok(gaussian(
                    grid,
                    self.init.amplitude.unwrap(),
                    self.init.width.unwrap(),
                    &center,
                ))
            }
            "plane_wave" => Ok(plane_wave(grid, self.init.k.as_ref().unwrap())),
            _ => {
                let path = self.init.path.as_ref().unwrap();
                let f = section("init", read_snapshot(Path::new(path)))?;
                if *f.grid() != grid {
                    return Err(CliError::Config(format!(
                        "[init] field in {path} has d={} n={} length={}, config grid expects d={} n={} length={}",
                        f.grid().dim(), f.grid().n(), f.grid().length(),
                        grid.dim(), grid.n(), grid.length()
                    )));
                }
                Ok(f)
            }
        }
    }

    pub fn nonlinear(&self) -> Result<NonlinearParams, CliError> {
        let mut nl = NonlinearParams::new(self.model.lambda, self.model.delta, self.model.alpha1);
        if let Some(spec) = &self.model.potential {
            let kernel = match spec.kind.as_str() {
                "none" => None,
                "gaussian" => Some(section(
                    "model.potential",
                    PotentialKernel::gaussian(self.grid()?, spec.c.unwrap(), spec.sigma.unwrap()),
                )?),
                _ => {
                    let path = spec.path.as_ref().unwrap();
                    let k = section(
                        "model.potential",
                        PotentialKernel::from_snapshot(Path::new(path)),
                    )?;
                    if *k.grid() != self.grid()? {
                        return Err(CliError::Config(format!(
                            "[model.potential] kernel in {path} does not match the config grid"
                        )));
                    }
                    Some(k)
                }
            };
            if let Some(k) = kernel {
                nl = nl.with_potential(k);
            }
        }
        Ok(nl)
    }

    pub fn splitting(&self) -> Splitting {
        match self.study.as_ref().and_then(|s| s.splitting.as_deref()) {
            Some("lie") => Splitting::Lie,
            _ => Splitting::Strang,
        }
    }

    pub fn has_potential(&self) -> bool {
        matches!(&self.model.potential, Some(p) if p.kind != "none")
    }
}
