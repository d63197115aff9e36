//! Plain-text experiment configuration: a small key-value format with
//! `[lattice]`, `[energy]`, `[task]` and `[output]` blocks, parsed into the
//! crate's model types. Errors carry the offending key.

use thiserror::Error;

use crate::cell::PhiVariant;
use crate::energy::{BondDensity, EnergyModel, MacroFn, SiteDensity};
use crate::lattice::PeriodicLatticeModel;
use crate::util::Fnv64;

#[derive(Debug, Error, PartialEq)]
#[error("config key `{key}`: {message}")]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

fn err(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError {
        key: key.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Analyze,
    Phi,
    FHom,
    Islands,
    GammaCheck,
    FlowMicro,
    FlowMacro,
    FlowCompare,
}

impl TaskKind {
    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::Analyze => "analyze",
            TaskKind::Phi => "phi",
            TaskKind::FHom => "fhom",
            TaskKind::Islands => "islands",
            TaskKind::GammaCheck => "gamma-check",
            TaskKind::FlowMicro => "flow-micro",
            TaskKind::FlowMacro => "flow-macro",
            TaskKind::FlowCompare => "flow-compare",
        }
    }
}

/// Task parameters; unused fields keep their defaults for tasks that do not
/// read them.
#[derive(Debug, Clone)]
pub struct TaskConfig {
    pub kind: TaskKind,
    /// Doubling list of interaction-density cell sizes.
    pub m_list: Vec<i64>,
    /// Cell sizes for homogenized densities.
    pub k_list: Vec<i64>,
    /// One axis of argument samples, replicated over the components of z.
    pub z_grid: Vec<f64>,
    /// One axis of direction samples, replicated over the entries of xi.
    pub xi_grid: Vec<f64>,
    /// Phase selector for fhom (None = all phases).
    pub phase: Option<u8>,
    /// Macroscopic position parameter for the zero-order density.
    pub x: Option<Vec<f64>>,
    pub variant: PhiVariant,
    pub eps_denoms: Vec<i64>,
    pub macro_cells: usize,
    pub grid_cells: usize,
    pub tau: f64,
    pub n_steps: usize,
    pub init: MacroFn,
    pub tol: Option<f64>,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            kind: TaskKind::Analyze,
            m_list: vec![2, 4, 8],
            k_list: vec![8, 16],
            z_grid: vec![-1.0, 0.0, 1.0],
            xi_grid: vec![1.0],
            phase: None,
            x: None,
            variant: PhiVariant::Free,
            eps_denoms: vec![16, 32, 64],
            macro_cells: 1024,
            grid_cells: 256,
            tau: 1e-2,
            n_steps: 10,
            init: MacroFn::SinPi(1.0),
            tol: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub model: PeriodicLatticeModel,
    pub energy: EnergyModel,
    pub task: TaskConfig,
    pub output_dir: Option<String>,
    /// Hash of the canonicalized source text, for provenance.
    pub hash: u64,
}

/// Key-value store preserving section names as `section.key`.
struct RawConfig {
    entries: Vec<(String, String)>,
}

impl RawConfig {
    fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = Vec::new();
        let mut section = String::new();
        for (lineno, raw_line) in text.lines().enumerate() {
            let line = match raw_line.find('#') {
                Some(i) => &raw_line[..i],
                None => raw_line,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| err(&format!("line {}", lineno + 1), "unterminated section"))?;
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                err(
                    &format!("line {}", lineno + 1),
                    "expected `key = value` or `[section]`",
                )
            })?;
            let full = if section.is_empty() {
                key.trim().to_string()
            } else {
                format!("{section}.{}", key.trim())
            };
            entries.push((full, value.trim().to_string()));
        }
        Ok(RawConfig { entries })
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    fn require(&self, key: &str) -> Result<&str, ConfigError> {
        self.get(key).ok_or_else(|| err(key, "missing required key"))
    }
}

fn parse_i64(key: &str, value: &str) -> Result<i64, ConfigError> {
    value
        .parse::<i64>()
        .map_err(|_| err(key, format!("`{value}` is not an integer")))
}

fn parse_f64(key: &str, value: &str) -> Result<f64, ConfigError> {
    value
        .parse::<f64>()
        .map_err(|_| err(key, format!("`{value}` is not a number")))
}

fn parse_i64_list(key: &str, value: &str) -> Result<Vec<i64>, ConfigError> {
    value
        .split_whitespace()
        .map(|t| parse_i64(key, t))
        .collect()
}

fn parse_f64_list(key: &str, value: &str) -> Result<Vec<f64>, ConfigError> {
    value
        .split_whitespace()
        .map(|t| parse_f64(key, t))
        .collect()
}

/// Offsets: scalars for d = 1, `(a,b)` tuples for d >= 2.
fn parse_offsets(key: &str, value: &str, d: usize) -> Result<Vec<Vec<i64>>, ConfigError> {
    let mut out = Vec::new();
    if d == 1 {
        for t in value.split_whitespace() {
            out.push(vec![parse_i64(key, t)?]);
        }
        return Ok(out);
    }
    for t in value.split_whitespace() {
        let inner = t
            .strip_prefix('(')
            .and_then(|s| s.strip_suffix(')'))
            .ok_or_else(|| err(key, format!("`{t}` is not a (..) tuple")))?;
        let coords: Result<Vec<i64>, _> = inner.split(',').map(|c| parse_i64(key, c.trim())).collect();
        let coords = coords?;
        if coords.len() != d {
            return Err(err(key, format!("tuple `{t}` must have {d} coordinates")));
        }
        out.push(coords);
    }
    Ok(out)
}

fn parse_macro_fn(key: &str, tokens: &[&str], m: usize) -> Result<MacroFn, ConfigError> {
    match tokens.first() {
        Some(&"const") => {
            let vals: Result<Vec<f64>, _> = tokens[1..].iter().map(|t| parse_f64(key, t)).collect();
            let vals = vals?;
            if vals.len() != m {
                return Err(err(key, format!("const needs {m} component(s)")));
            }
            Ok(MacroFn::Constant(vals))
        }
        Some(&"sin-pi") => {
            let amp = parse_f64(key, tokens.get(1).copied().unwrap_or("1"))?;
            Ok(MacroFn::SinPi(amp))
        }
        Some(&"cos-pi") => {
            let amp = parse_f64(key, tokens.get(1).copied().unwrap_or("1"))?;
            Ok(MacroFn::CosPi(amp))
        }
        Some(&"linear") => {
            let vals: Result<Vec<f64>, _> = tokens[1..].iter().map(|t| parse_f64(key, t)).collect();
            Ok(MacroFn::Linear(vals?))
        }
        _ => Err(err(
            key,
            "expected one of: const <values>, sin-pi <amp>, cos-pi <amp>, linear <coeffs>",
        )),
    }
}

fn parse_bond_density(key: &str, value: &str, m: usize) -> Result<BondDensity, ConfigError> {
    let tokens: Vec<&str> = value.split_whitespace().collect();
    match tokens.first() {
        Some(&"quadratic") => Ok(BondDensity::Quadratic),
        Some(&"ppower") => Ok(BondDensity::PPower),
        Some(&"aniso") => {
            let vals: Result<Vec<f64>, _> = tokens[1..].iter().map(|t| parse_f64(key, t)).collect();
            let vals = vals?;
            if vals.len() != m * m {
                return Err(err(key, format!("aniso needs {} entries", m * m)));
            }
            Ok(BondDensity::AnisotropicQuadratic(vals))
        }
        Some(&"shifted") => {
            let vals: Result<Vec<f64>, _> = tokens[1..].iter().map(|t| parse_f64(key, t)).collect();
            let vals = vals?;
            if vals.len() != m {
                return Err(err(key, format!("shifted needs {m} component(s)")));
            }
            Ok(BondDensity::ShiftedQuadratic(vals))
        }
        _ => Err(err(
            key,
            "expected one of: quadratic, ppower, aniso <matrix>, shifted <vector>",
        )),
    }
}

/// Parses a full experiment configuration.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let raw = RawConfig::parse(text)?;

    // [lattice]
    let d = parse_i64(
        "lattice.d",
        raw.get("lattice.d").unwrap_or("1"),
    )? as usize;
    let m = parse_i64("lattice.m", raw.get("lattice.m").unwrap_or("1"))? as usize;
    let t = parse_i64("lattice.t", raw.require("lattice.t")?)?;
    if t <= 0 {
        return Err(err("lattice.t", "period must be a positive integer"));
    }
    let labels: Vec<u8> = raw
        .require("lattice.labels")?
        .split_whitespace()
        .map(|s| {
            s.parse::<u8>()
                .map_err(|_| err("lattice.labels", format!("`{s}` is not a label")))
        })
        .collect::<Result<_, _>>()?;
    let phases = *labels
        .iter()
        .max()
        .ok_or_else(|| err("lattice.labels", "label array is empty"))?;
    let mut ranges = Vec::new();
    for class in 0..=phases {
        let key = format!("lattice.p{class}");
        let value = raw
            .get(&key)
            .ok_or_else(|| err(&key, "missing interaction range"))?;
        ranges.push(parse_offsets(&key, value, d)?);
    }
    let model = PeriodicLatticeModel::new(d, m, t, labels, ranges)
        .map_err(|e| err("lattice", e.to_string()))?;

    // [energy]
    let p = parse_f64("energy.p", raw.get("energy.p").unwrap_or("2"))?;
    let weak = parse_bond_density("energy.weak", raw.get("energy.weak").unwrap_or("quadratic"), m)?;
    let mut strong = Vec::new();
    for phase in 1..=model.phases() {
        let key = format!("energy.strong{phase}");
        let value = raw.get(&key).unwrap_or("quadratic");
        strong.push(parse_bond_density(&key, value, m)?);
    }
    let site = match raw.get("energy.site") {
        None | Some("none") => SiteDensity::Zero,
        Some(value) => {
            let tokens: Vec<&str> = value.split_whitespace().collect();
            match tokens.first() {
                Some(&"pinning") => {
                    SiteDensity::Pinning(parse_macro_fn("energy.site", &tokens[1..], m)?)
                }
                _ => return Err(err("energy.site", "expected `none` or `pinning <fn>`")),
            }
        }
    };
    let growth_lower = parse_f64("energy.c", raw.get("energy.c").unwrap_or("0.25"))?;
    let growth_upper = parse_f64("energy.big-c", raw.get("energy.big-c").unwrap_or("8"))?;
    let energy = EnergyModel::new(p, strong, weak, site, growth_lower, growth_upper)
        .map_err(|e| err("energy", e.to_string()))?;
    energy
        .check_phases(&model)
        .map_err(|e| err("energy", e.to_string()))?;

    // [task]
    let mut task = TaskConfig::default();
    task.kind = match raw.require("task.kind")? {
        "analyze" => TaskKind::Analyze,
        "phi" => TaskKind::Phi,
        "fhom" => TaskKind::FHom,
        "islands" => TaskKind::Islands,
        "gamma-check" => TaskKind::GammaCheck,
        "flow-micro" => TaskKind::FlowMicro,
        "flow-macro" => TaskKind::FlowMacro,
        "flow-compare" => TaskKind::FlowCompare,
        other => {
            return Err(err(
                "task.kind",
                format!("unknown task `{other}`"),
            ))
        }
    };
    if let Some(v) = raw.get("task.m-list") {
        task.m_list = parse_i64_list("task.m-list", v)?;
        if task.m_list.is_empty() {
            return Err(err("task.m-list", "list must be nonempty"));
        }
    }
    if let Some(v) = raw.get("task.k-list") {
        task.k_list = parse_i64_list("task.k-list", v)?;
        if task.k_list.is_empty() {
            return Err(err("task.k-list", "list must be nonempty"));
        }
    }
    if let Some(v) = raw.get("task.z-grid") {
        task.z_grid = parse_f64_list("task.z-grid", v)?;
        if task.z_grid.is_empty() {
            return Err(err("task.z-grid", "list must be nonempty"));
        }
    }
    if let Some(v) = raw.get("task.xi-grid") {
        task.xi_grid = parse_f64_list("task.xi-grid", v)?;
        if task.xi_grid.is_empty() {
            return Err(err("task.xi-grid", "list must be nonempty"));
        }
    }
    if let Some(v) = raw.get("task.phase") {
        task.phase = Some(parse_i64("task.phase", v)? as u8);
    }
    if let Some(v) = raw.get("task.x") {
        task.x = Some(parse_f64_list("task.x", v)?);
    }
    if let Some(v) = raw.get("task.variant") {
        task.variant = match v {
            "free" => PhiVariant::Free,
            "pinned" => {
                let r = parse_i64("task.r", raw.get("task.r").unwrap_or("0"))?;
                PhiVariant::BoundaryPinned { r_width: r }
            }
            other => return Err(err("task.variant", format!("unknown variant `{other}`"))),
        };
    }
    if let Some(v) = raw.get("task.eps-denoms") {
        task.eps_denoms = parse_i64_list("task.eps-denoms", v)?;
        if task.eps_denoms.is_empty() {
            return Err(err("task.eps-denoms", "list must be nonempty"));
        }
    }
    if let Some(v) = raw.get("task.macro-cells") {
        task.macro_cells = parse_i64("task.macro-cells", v)? as usize;
    }
    if let Some(v) = raw.get("task.grid-cells") {
        task.grid_cells = parse_i64("task.grid-cells", v)? as usize;
    }
    if let Some(v) = raw.get("task.tau") {
        task.tau = parse_f64("task.tau", v)?;
        if task.tau <= 0.0 {
            return Err(err("task.tau", "time step must be positive"));
        }
    }
    if let Some(v) = raw.get("task.steps") {
        task.n_steps = parse_i64("task.steps", v)? as usize;
    } else if let Some(v) = raw.get("task.t-max") {
        let t_max = parse_f64("task.t-max", v)?;
        if t_max <= 0.0 {
            return Err(err("task.t-max", "horizon must be positive"));
        }
        task.n_steps = (t_max / task.tau).round() as usize;
    }
    if let Some(v) = raw.get("task.init") {
        let tokens: Vec<&str> = v.split_whitespace().collect();
        task.init = parse_macro_fn("task.init", &tokens, m)?;
    }
    if let Some(v) = raw.get("task.tol") {
        task.tol = Some(parse_f64("task.tol", v)?);
    }

    let output_dir = raw.get("output.dir").map(|s| s.to_string());

    // Provenance hash over the canonicalized entries.
    let mut h = Fnv64::new();
    for (k, v) in &raw.entries {
        h.write(k.as_bytes());
        h.write(b"=");
        h.write(v.as_bytes());
        h.write(b"\n");
    }

    Ok(ExperimentConfig {
        model,
        energy,
        task,
        output_dir,
        hash: h.finish(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXH2: &str = "
# one stiff chain with soft odd sites
[lattice]
d = 1
m = 1
t = 2
labels = 1 0
p0 = -1 0 1
p1 = -2 0 2

[energy]
p = 2
weak = quadratic
strong1 = quadratic
site = pinning const 0.0

[task]
kind = phi
m-list = 2 4 8
z-grid = -1 0 1

[output]
dir = out/exh2
";

    #[test]
    fn parses_a_full_config() {
        let cfg = parse_config(EXH2).unwrap();
        assert_eq!(cfg.model.period(), 2);
        assert_eq!(cfg.model.phases(), 1);
        assert_eq!(cfg.task.kind, TaskKind::Phi);
        assert_eq!(cfg.task.m_list, vec![2, 4, 8]);
        assert_eq!(cfg.output_dir.as_deref(), Some("out/exh2"));
        assert!(cfg.energy.is_quadratic());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = parse_config(EXH2).unwrap().hash;
        let b = parse_config(EXH2).unwrap().hash;
        assert_eq!(a, b);
        let c = parse_config(&EXH2.replace("z-grid = -1 0 1", "z-grid = -1 0 2"))
            .unwrap()
            .hash;
        assert_ne!(a, c);
    }

    #[test]
    fn zero_period_names_the_key() {
        let bad = EXH2.replace("t = 2", "t = 0");
        let e = parse_config(&bad).unwrap_err();
        assert_eq!(e.key, "lattice.t");
    }

    #[test]
    fn missing_range_names_the_key() {
        let bad = EXH2.replace("p1 = -2 0 2", "");
        let e = parse_config(&bad).unwrap_err();
        assert_eq!(e.key, "lattice.p1");
    }

    #[test]
    fn tuple_offsets_for_2d() {
        let text = "
[lattice]
d = 2
m = 1
t = 2
labels = 1 0 0 1
p0 = (0,0) (1,0) (-1,0) (0,1) (0,-1)
p1 = (0,0) (1,1) (-1,-1) (1,-1) (-1,1)

[task]
kind = analyze
";
        let cfg = parse_config(text).unwrap();
        assert_eq!(cfg.model.dim(), 2);
        assert_eq!(cfg.task.kind, TaskKind::Analyze);
    }

    #[test]
    fn bad_density_is_reported() {
        let bad = EXH2.replace("strong1 = quadratic", "strong1 = cubic");
        let e = parse_config(&bad).unwrap_err();
        assert_eq!(e.key, "energy.strong1");
    }

    #[test]
    fn shifted_weak_density_rejected_via_energy_rules() {
        let bad = EXH2.replace("weak = quadratic", "weak = shifted 1.0");
        let e = parse_config(&bad).unwrap_err();
        assert_eq!(e.key, "energy");
    }
}
