//! Scenario files: plain-text sections of `key = value` pairs.
//!
//! Grammar, line by line:
//!   - blank lines and lines starting with `#` or `;` are ignored
//!   - `[section]` opens a section; known sections are `scenario`,
//!     `model`, `spectrum`, `bounds`, `inclusion`, `entropy`
//!   - `key = value` assigns inside the current section
//!
//! Numbers use decimal notation (`1000`, `0.5`, `1e-3`); lists are
//! comma-separated. Unknown sections, unknown keys, bad numbers, and
//! missing required keys are schema errors carrying the offending line.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use anosovlab::geometry::{default_bumps, SurfaceModel};

/// Schema violation with the line it was detected on (0 for file-level
/// problems such as a missing key).
#[derive(Debug, Clone)]
pub struct SchemaError {
    pub file: String,
    pub line: usize,
    pub message: String,
}

impl fmt::Display for SchemaError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}: {}", self.file, self.line, self.message)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    Spectrum,
    Bounds,
    Inclusion,
    Entropy,
    FullVerdict,
}

impl Experiment {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "spectrum" => Some(Self::Spectrum),
            "bounds" => Some(Self::Bounds),
            "inclusion" => Some(Self::Inclusion),
            "entropy" => Some(Self::Entropy),
            "full-verdict" => Some(Self::FullVerdict),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SpectrumPlan {
    pub horizon: f64,
    pub renorm_dt: f64,
    pub checkpoints: usize,
    /// Explicit start state (x, y, frame angle); sampled when absent.
    pub theta: Option<[f64; 3]>,
    pub states: usize,
}

impl Default for SpectrumPlan {
    fn default() -> Self {
        Self { horizon: 1000.0, renorm_dt: 0.5, checkpoints: 32, theta: None, states: 4 }
    }
}

#[derive(Debug, Clone)]
pub struct BoundsPlan {
    pub samples: usize,
    pub fit_states: usize,
    pub horizon: f64,
}

impl Default for BoundsPlan {
    fn default() -> Self {
        Self { samples: 1000, fit_states: 24, horizon: 15.0 }
    }
}

#[derive(Debug, Clone)]
pub struct InclusionPlan {
    pub rho: f64,
    pub samples: usize,
}

impl Default for InclusionPlan {
    fn default() -> Self {
        Self { rho: 0.1, samples: 1000 }
    }
}

#[derive(Debug, Clone)]
pub struct EntropyPlan {
    pub states: usize,
    pub samples_per_depth: usize,
    pub n_max: usize,
    pub rho: f64,
    pub spectrum_horizon: f64,
    pub partition_cell: f64,
    pub partition_angles: usize,
    pub partition_samples: usize,
    pub suprema_samples: usize,
    pub tolerance: f64,
}

impl Default for EntropyPlan {
    fn default() -> Self {
        Self {
            states: 8,
            samples_per_depth: 2000,
            n_max: 12,
            rho: 0.05,
            spectrum_horizon: 400.0,
            partition_cell: 0.2,
            partition_angles: 12,
            partition_samples: 60_000,
            suprema_samples: 2000,
            tolerance: 0.15,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub model: SurfaceModel,
    pub experiment: Experiment,
    pub seed: u64,
    /// Resolved against the --output flag by the caller; a scenario with
    /// neither is rejected there with the [scenario] section line.
    pub output_dir: Option<PathBuf>,
    pub scenario_line: usize,
    pub file: String,
    pub threads: Option<usize>,
    pub spectrum: SpectrumPlan,
    pub bounds: BoundsPlan,
    pub inclusion: InclusionPlan,
    pub entropy: EntropyPlan,
}

struct RawItem {
    value: String,
    line: usize,
    read: std::cell::Cell<bool>,
}

struct Section {
    items: BTreeMap<String, RawItem>,
    line: usize,
}

const SECTIONS: [&str; 6] = ["scenario", "model", "spectrum", "bounds", "inclusion", "entropy"];

struct Raw {
    file: String,
    sections: BTreeMap<String, Section>,
}

impl Raw {
    fn err(&self, line: usize, message: String) -> SchemaError {
        SchemaError { file: self.file.clone(), line, message }
    }

    fn get(&self, section: &str, key: &str) -> Option<&RawItem> {
        let item = self.sections.get(section)?.items.get(key)?;
        item.read.set(true);
        Some(item)
    }

    fn parse_num<T: std::str::FromStr>(&self, section: &str, key: &str, kind: &str) -> Result<Option<T>, SchemaError> {
        match self.get(section, key) {
            None => Ok(None),
            Some(item) => item.value.parse::<T>().map(Some).map_err(|_| {
                self.err(item.line, format!("key `{key}` needs a {kind}, got `{}`", item.value))
            }),
        }
    }

    fn f64(&self, section: &str, key: &str) -> Result<Option<f64>, SchemaError> {
        self.parse_num(section, key, "number")
    }

    fn usize(&self, section: &str, key: &str) -> Result<Option<usize>, SchemaError> {
        self.parse_num(section, key, "nonnegative integer")
    }

    fn u64(&self, section: &str, key: &str) -> Result<Option<u64>, SchemaError> {
        self.parse_num(section, key, "nonnegative integer")
    }
}

fn parse_raw(file: &str, text: &str) -> Result<Raw, SchemaError> {
    let mut raw = Raw { file: file.to_string(), sections: BTreeMap::new() };
    let mut current: Option<String> = None;
    for (idx, line_text) in text.lines().enumerate() {
        let line = idx + 1;
        let t = line_text.trim();
        if t.is_empty() || t.starts_with('#') || t.starts_with(';') {
            continue;
        }
        if let Some(name) = t.strip_prefix('[') {
            let name = name.strip_suffix(']').ok_or_else(|| {
                raw.err(line, "section header must look like [name]".into())
            })?;
            if !SECTIONS.contains(&name) {
                return Err(raw.err(line, format!("unknown section `[{name}]`")));
            }
            raw.sections
                .entry(name.to_string())
                .or_insert_with(|| Section { items: BTreeMap::new(), line });
            current = Some(name.to_string());
            continue;
        }
        let Some((key, value)) = t.split_once('=') else {
            return Err(raw.err(line, format!("expected `key = value`, got `{t}`")));
        };
        let section = current
            .clone()
            .ok_or_else(|| raw.err(line, "assignment before any [section] header".into()))?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        let items = &mut raw.sections.get_mut(&section).expect("current section exists").items;
        if items
            .insert(key.clone(), RawItem { value, line, read: std::cell::Cell::new(false) })
            .is_some()
        {
            return Err(raw.err(line, format!("duplicate key `{key}` in [{section}]")));
        }
    }
    Ok(raw)
}

fn build_model(raw: &Raw) -> Result<SurfaceModel, SchemaError> {
    let item = raw.get("scenario", "model").ok_or_else(|| {
        raw.err(
            raw.sections.get("scenario").map_or(0, |s| s.line),
            "missing required key `model` in [scenario]".into(),
        )
    })?;
    let (line, name) = (item.line, item.value.clone());
    let c = raw.f64("model", "c")?.unwrap_or(1.0);
    let eps = raw.f64("model", "eps")?.unwrap_or(0.1);
    let bad = |detail: String| raw.err(line, detail);
    match name.as_str() {
        "flat" => Ok(SurfaceModel::flat()),
        "hyperbolic" => SurfaceModel::hyperbolic(c)
            .map_err(|e| bad(format!("model `hyperbolic` rejected c = {c}: {e}"))),
        "modular" => Ok(SurfaceModel::modular()),
        "perturbed" => SurfaceModel::perturbed_hyperbolic(c, eps, default_bumps())
            .map_err(|e| bad(format!("model `perturbed` rejected (c, eps) = ({c}, {eps}): {e}"))),
        other => Err(bad(format!(
            "unknown model `{other}`; expected flat | hyperbolic | modular | perturbed"
        ))),
    }
}

/// Parse and validate a scenario file.
pub fn parse_scenario(path: &Path, text: &str) -> Result<Scenario, SchemaError> {
    let file = path.display().to_string();
    let raw = parse_raw(&file, text)?;
    if !raw.sections.contains_key("scenario") {
        return Err(raw.err(0, "missing required section [scenario]".into()));
    }

    let model = build_model(&raw)?;

    let exp_item = raw.get("scenario", "experiment").ok_or_else(|| {
        raw.err(
            raw.sections["scenario"].line,
            "missing required key `experiment` in [scenario]".into(),
        )
    })?;
    let experiment = Experiment::parse(&exp_item.value).ok_or_else(|| {
        raw.err(
            exp_item.line,
            format!(
                "unknown experiment `{}`; expected spectrum | bounds | inclusion | entropy | full-verdict",
                exp_item.value
            ),
        )
    })?;

    let seed = raw.u64("scenario", "seed")?.unwrap_or(0);
    let threads = raw.usize("scenario", "threads")?;
    let output_dir = raw.get("scenario", "output_dir").map(|i| PathBuf::from(&i.value));

    let mut spectrum = SpectrumPlan::default();
    if let Some(v) = raw.f64("spectrum", "horizon")? {
        spectrum.horizon = v;
    }
    if let Some(v) = raw.f64("spectrum", "renorm_dt")? {
        spectrum.renorm_dt = v;
    }
    if let Some(v) = raw.usize("spectrum", "checkpoints")? {
        spectrum.checkpoints = v;
    }
    if let Some(v) = raw.usize("spectrum", "states")? {
        spectrum.states = v;
    }
    if let Some(item) = raw.get("spectrum", "theta") {
        let parts: Vec<&str> = item.value.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(raw.err(item.line, "key `theta` needs three numbers: x, y, angle".into()));
        }
        let mut triple = [0.0; 3];
        for (slot, part) in triple.iter_mut().zip(&parts) {
            *slot = part.parse::<f64>().map_err(|_| {
                raw.err(item.line, format!("key `theta` has a bad number `{part}`"))
            })?;
        }
        spectrum.theta = Some(triple);
    }

    let mut bounds = BoundsPlan::default();
    if let Some(v) = raw.usize("bounds", "samples")? {
        bounds.samples = v;
    }
    if let Some(v) = raw.usize("bounds", "fit_states")? {
        bounds.fit_states = v;
    }
    if let Some(v) = raw.f64("bounds", "horizon")? {
        bounds.horizon = v;
    }

    let mut inclusion = InclusionPlan::default();
    if let Some(v) = raw.f64("inclusion", "rho")? {
        inclusion.rho = v;
    }
    if let Some(v) = raw.usize("inclusion", "samples")? {
        inclusion.samples = v;
    }

    let mut entropy = EntropyPlan::default();
    if let Some(v) = raw.usize("entropy", "states")? {
        entropy.states = v;
    }
    if let Some(v) = raw.usize("entropy", "samples_per_depth")? {
        entropy.samples_per_depth = v;
    }
    if let Some(v) = raw.usize("entropy", "n_max")? {
        entropy.n_max = v;
    }
    if let Some(v) = raw.f64("entropy", "rho")? {
        entropy.rho = v;
    }
    if let Some(v) = raw.f64("entropy", "spectrum_horizon")? {
        entropy.spectrum_horizon = v;
    }
    if let Some(v) = raw.f64("entropy", "partition_cell")? {
        entropy.partition_cell = v;
    }
    if let Some(v) = raw.usize("entropy", "partition_angles")? {
        entropy.partition_angles = v;
    }
    if let Some(v) = raw.usize("entropy", "partition_samples")? {
        entropy.partition_samples = v;
    }
    if let Some(v) = raw.usize("entropy", "suprema_samples")? {
        entropy.suprema_samples = v;
    }
    if let Some(v) = raw.f64("entropy", "tolerance")? {
        entropy.tolerance = v;
    }

    for (sname, section) in &raw.sections {
        for (key, item) in &section.items {
            if !item.read.get() {
                return Err(raw.err(item.line, format!("unknown key `{key}` in [{sname}]")));
            }
        }
    }

    for (what, ok, line) in [
        ("spectrum horizon", spectrum.horizon > 0.0, 0),
        ("spectrum renorm_dt", spectrum.renorm_dt > 0.0, 0),
        ("spectrum states", spectrum.states > 0 || spectrum.theta.is_some(), 0),
        ("bounds samples", bounds.samples > 0, 0),
        ("bounds fit_states", bounds.fit_states >= 3, 0),
        ("inclusion rho", inclusion.rho > 0.0, 0),
        ("inclusion samples", inclusion.samples > 0, 0),
        ("entropy states", entropy.states > 0, 0),
        ("entropy samples_per_depth", entropy.samples_per_depth > 0, 0),
        ("entropy rho", entropy.rho > 0.0, 0),
        ("entropy tolerance", entropy.tolerance > 0.0, 0),
    ] {
        if !ok {
            return Err(raw.err(line, format!("budget `{what}` must be positive")));
        }
    }

    Ok(Scenario {
        model,
        experiment,
        seed,
        output_dir,
        scenario_line: raw.sections["scenario"].line,
        file,
        threads,
        spectrum,
        bounds,
        inclusion,
        entropy,
    })
}
