//! Artifact serialization: JSON records whose key order is the struct
//! declaration order documented here, CSV helpers, and the output-dir
//! manifest with content hashes. Nothing in this module timestamps its
//! output; rerunning a scenario with one seed must reproduce every byte.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::geometry::SurfaceModel;
use crate::sasaki::UnitTangentState;
use crate::spectrum::LyapunovSpectrum;
use crate::Result;

/// Human-readable model label used in records and file stems.
pub fn model_label(model: &SurfaceModel) -> String {
    match model {
        SurfaceModel::Flat => "flat".into(),
        SurfaceModel::HyperbolicConstant { c } => format!("hyperbolic({c})"),
        SurfaceModel::Modular => "modular".into(),
        SurfaceModel::PerturbedHyperbolic(p) => format!("perturbed({}, {})", p.c, p.eps),
    }
}

/// One spectrum run, flattened for the JSON artifact. Keys serialize in
/// declaration order: model, theta0, T, exponents, multiplicities,
/// chi_plus, trace_halfwidth, converged, max_height.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectrumRecord {
    pub model: String,
    /// Chart position and frame angle `(x, y, alpha)` of the start state.
    pub theta0: [f64; 3],
    #[serde(rename = "T")]
    pub t: f64,
    /// One entry per distinct exponent cluster, descending.
    pub exponents: Vec<f64>,
    pub multiplicities: Vec<usize>,
    pub chi_plus: f64,
    /// Largest per-exponent half-width over the trace tail.
    pub trace_halfwidth: f64,
    pub converged: bool,
    pub max_height: f64,
}

impl SpectrumRecord {
    pub fn new(model: &SurfaceModel, theta: &UnitTangentState, s: &LyapunovSpectrum) -> Self {
        let hw = s.half_widths.iter().cloned().fold(0.0f64, f64::max);
        let gap = 10.0 * hw;
        let mut exponents = Vec::new();
        let mut multiplicities = Vec::new();
        let mut start = 0;
        for i in 1..=3 {
            if i == 3 || s.exponents[i - 1] - s.exponents[i] > gap {
                let members = &s.exponents[start..i];
                exponents.push(members.iter().sum::<f64>() / members.len() as f64);
                multiplicities.push(members.len());
                start = i;
            }
        }
        SpectrumRecord {
            model: model_label(model),
            theta0: [theta.p.x, theta.p.y, theta.frame_angle()],
            t: s.horizon,
            exponents,
            multiplicities,
            chi_plus: s.chi_plus,
            trace_halfwidth: hw,
            converged: s.converged,
            max_height: s.max_height,
        }
    }
}

/// Serialize as pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut body = serde_json::to_string_pretty(value)?;
    body.push('\n');
    fs::write(path, body)?;
    Ok(())
}

/// Write a CSV artifact from a header line and preformatted rows.
pub fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut body = String::with_capacity(header.len() + 1 + rows.iter().map(|r| r.len() + 1).sum::<usize>());
    body.push_str(header);
    body.push('\n');
    for r in rows {
        body.push_str(r);
        body.push('\n');
    }
    fs::write(path, body)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path relative to the output directory, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub files: Vec<ManifestEntry>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else if !(dir == root && entry.file_name() == MANIFEST_NAME) {
            out.push(path);
        }
    }
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut s = String::with_capacity(64);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Hash every artifact under `dir` (sorted by relative path) and write
/// `manifest.json` beside them. Call this after the last artifact: the
/// manifest never lists itself.
pub fn write_manifest(dir: &Path) -> Result<Manifest> {
    let mut paths = Vec::new();
    collect_files(dir, dir, &mut paths)?;
    let mut entries = Vec::with_capacity(paths.len());
    for p in paths {
        let rel: String = p
            .strip_prefix(dir)
            .expect("collected under dir")
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/");
        let bytes = fs::read(&p)?;
        entries.push(ManifestEntry {
            path: rel,
            sha256: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
        });
    }
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    let manifest = Manifest { files: entries };
    write_json(&dir.join(MANIFEST_NAME), &manifest)?;
    Ok(manifest)
}
