//! Run configuration files and sweep expansion.

use std::path::PathBuf;

use nlschwarz::{CoarseConfig, Method, ProblemSpec, SolverConfig, VariantConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub problem: ProblemSpec,
    pub mesh: MeshSize,
    /// Subdomain grid `[px, py]`.
    pub subdomains: [usize; 2],
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    /// Partial solver settings merged over the problem's defaults.
    #[serde(default)]
    pub solver: Option<Value>,
    #[serde(default)]
    pub sweep: Sweep,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Recorded with every result; the solvers themselves are deterministic.
    #[serde(default)]
    pub seed: u64,
}

fn default_name() -> String {
    "run".into()
}

fn default_methods() -> Vec<Method> {
    vec![Method::Schwarz]
}

fn default_output() -> PathBuf {
    PathBuf::from("results")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum MeshSize {
    Cells { nx: usize, ny: usize },
    /// `H/h`: cells per subdomain side.
    PerSubdomain { cells_per_subdomain: usize },
}

impl MeshSize {
    pub fn cells(&self, px: usize, py: usize) -> (usize, usize) {
        match *self {
            MeshSize::Cells { nx, ny } => (nx, ny),
            MeshSize::PerSubdomain { cells_per_subdomain: k } => (px * k, py * k),
        }
    }
}

/// Lists to sweep over; the run is the cartesian product of the given lists.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub reynolds: Option<Vec<f64>>,
    /// Beam load in MN/m².
    pub load_mn: Option<Vec<f64>>,
    pub subdomains: Option<Vec<[usize; 2]>>,
    /// `null` entries run without a coarse level.
    pub coarse_space: Option<Vec<Option<CoarseConfig>>>,
    pub variant: Option<Vec<String>>,
}

/// One fully specified run.
#[derive(Debug, Clone)]
pub struct RunPoint {
    pub label: String,
    pub problem: ProblemSpec,
    pub nx: usize,
    pub ny: usize,
    pub px: usize,
    pub py: usize,
    pub method: Method,
    pub solver: SolverConfig,
}

fn nonempty<T: Clone>(name: &str, v: &Option<Vec<T>>, default: T) -> Result<Vec<T>, CliError> {
    match v {
        Some(v) if v.is_empty() => Err(CliError::Config(format!("sweep list `{name}` is empty"))),
        Some(v) => Ok(v.clone()),
        None => Ok(vec![default]),
    }
}

/// Recursively overwrite `base` with the entries of `patch`.
fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, p) => *b = p.clone(),
    }
}

pub fn default_solver(problem: &ProblemSpec) -> SolverConfig {
    match problem {
        ProblemSpec::Beam { .. } => SolverConfig::beam(),
        _ => SolverConfig::cavity(),
    }
}

fn method_name(m: Method) -> &'static str {
    match m {
        Method::Schwarz => "schwarz",
        Method::Nks => "nks",
        Method::Newton => "newton",
    }
}

fn with_parameter(problem: &ProblemSpec, reynolds: Option<f64>, load: Option<f64>) -> (ProblemSpec, String) {
    match *problem {
        ProblemSpec::Cavity { reynolds: r } => {
            let r = reynolds.unwrap_or(r);
            (ProblemSpec::Cavity { reynolds: r }, format!("re{r}"))
        }
        ProblemSpec::Beam { youngs_modulus, poisson_ratio, load_y } => {
            let load_y = load.map_or(load_y, |l| l * 1e6);
            let spec = ProblemSpec::Beam { youngs_modulus, poisson_ratio, load_y };
            (spec, format!("fy{}", load_y / 1e6))
        }
        p @ ProblemSpec::Diffusion { .. } => (p, "diffusion".into()),
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        if cfg.methods.is_empty() {
            return Err(CliError::Config("`methods` is empty".into()));
        }
        if cfg.sweep.reynolds.is_some() && !matches!(cfg.problem, ProblemSpec::Cavity { .. }) {
            return Err(CliError::Config("`reynolds` sweep needs a cavity problem".into()));
        }
        if cfg.sweep.load_mn.is_some() && !matches!(cfg.problem, ProblemSpec::Beam { .. }) {
            return Err(CliError::Config("`load_mn` sweep needs a beam problem".into()));
        }
        Ok(cfg)
    }

    /// Solver settings for this config before sweep overrides.
    pub fn base_solver(&self) -> Result<SolverConfig, CliError> {
        let defaults = default_solver(&self.problem);
        let Some(patch) = &self.solver else { return Ok(defaults) };
        let mut v = serde_json::to_value(defaults).expect("solver config serializes");
        merge(&mut v, patch);
        serde_json::from_value(v).map_err(|e| CliError::Config(format!("solver: {e}")))
    }

    /// Expand the sweep into run points in a fixed order.
    pub fn points(&self) -> Result<Vec<RunPoint>, CliError> {
        let base = self.base_solver()?;
        let grids = nonempty("subdomains", &self.sweep.subdomains, self.subdomains)?;
        let coarse = nonempty("coarse_space", &self.sweep.coarse_space, base.coarse_space)?;
        let variants = nonempty("variant", &self.sweep.variant, base.variant.label().to_string())?;
        let reynolds: Vec<Option<f64>> = nonempty("reynolds", &self.sweep.reynolds, f64::NAN)?
            .into_iter()
            .map(|r| (!r.is_nan()).then_some(r))
            .collect();
        let loads: Vec<Option<f64>> = nonempty("load_mn", &self.sweep.load_mn, f64::NAN)?
            .into_iter()
            .map(|r| (!r.is_nan()).then_some(r))
            .collect();
        let mut out = Vec::new();
        for &method in &self.methods {
            let variants: Vec<Option<VariantConfig>> = if method == Method::Schwarz {
                variants
                    .iter()
                    .map(|v| {
                        VariantConfig::from_name(v)
                            .map(Some)
                            .ok_or_else(|| CliError::Config(format!("unknown variant `{v}`")))
                    })
                    .collect::<Result<_, _>>()?
            } else {
                vec![None]
            };
            for variant in &variants {
                // One-level variants and Newton ignore the coarse sweep.
                let coarse: Vec<Option<CoarseConfig>> = match (method, variant) {
                    (Method::Newton, _) => vec![None],
                    (_, Some(v)) if !v.needs_coarse() => vec![None],
                    _ => coarse.clone(),
                };
                for cs in &coarse {
                    for &[px, py] in &grids {
                        if px == 0 || py == 0 {
                            return Err(CliError::Config("subdomain grid must be positive".into()));
                        }
                        let (nx, ny) = self.mesh.cells(px, py);
                        for &re in &reynolds {
                            for &load in &loads {
                                let (problem, param) = with_parameter(&self.problem, re, load);
                                let mut solver = base;
                                solver.coarse_space = *cs;
                                let mut label = format!("{}_{}", self.name, method_name(method));
                                if let Some(v) = variant {
                                    solver.variant = *v;
                                    label.push('_');
                                    label.push_str(v.label());
                                }
                                if let Some(c) = cs {
                                    label.push('_');
                                    label.push_str(&c.label());
                                }
                                label.push_str(&format!("_{px}x{py}_{param}"));
                                out.push(RunPoint { label, problem, nx, ny, px, py, method, solver });
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}
