//! Lyapunov exponents of the geodesic flow, computed by chunked QR
//! renormalization of the derivative cocycle, plus pointwise regularity
//! checks against the exponential sandwich the exponents predict.
//!
//! In the frame (flow direction, normal position, normal derivative) the
//! time-`t` derivative is block diagonal: the flow line carries exactly
//! the identity and the normal plane carries the perpendicular cocycle.
//! Seeding the QR iteration with that frame pins the neutral exponent to
//! zero by construction and leaves a clean two-dimensional iteration for
//! the remaining pair; a generic seed converges to the same spectrum,
//! only slower.

use crate::batch;
use crate::error::{Error, Result};
use crate::flow::{accumulate_derivative, adapted_coordinates, OrbitStepper};
use crate::geometry::SurfaceModel;
use crate::sasaki::{SplitVector, UnitTangentState};
use nalgebra::{Matrix3, Vector2};
use serde::{Deserialize, Serialize};

/// Renormalization interval. Entries grow like `e^{c dt}` between QR
/// passes, so half a unit keeps every supported curvature well inside
/// range while amortizing the factorization cost.
pub const DEFAULT_RENORM_DT: f64 = 0.5;
/// Running-exponent checkpoints kept for the convergence trace.
pub const SPECTRUM_CHECKPOINTS: usize = 32;
/// A spectrum counts as converged when every running exponent stays
/// within this half-width over the final quarter of the horizon.
pub const CONVERGENCE_HALF_WIDTH: f64 = 0.05;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SpectrumConfig {
    pub horizon: f64,
    pub renorm_dt: f64,
    pub checkpoints: usize,
}

impl Default for SpectrumConfig {
    fn default() -> Self {
        Self {
            horizon: 1000.0,
            renorm_dt: DEFAULT_RENORM_DT,
            checkpoints: SPECTRUM_CHECKPOINTS,
        }
    }
}

/// Running exponents (sorted descending) at an intermediate time.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SpectrumCheckpoint {
    pub t: f64,
    pub exponents: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LyapunovSpectrum {
    /// Exponents sorted descending.
    pub exponents: [f64; 3],
    /// Half the spread of each running exponent over the tail quarter.
    pub half_widths: [f64; 3],
    /// Sum of the positive part of the spectrum, with near-degenerate
    /// exponents clustered so noise straddling zero cancels instead of
    /// contributing its positive half.
    pub chi_plus: f64,
    pub converged: bool,
    pub horizon: f64,
    pub renorm_steps: usize,
    /// Largest chart height the orbit reached; a cusp-excursion flag for
    /// finite-volume quotients.
    pub max_height: f64,
    pub trace: Vec<SpectrumCheckpoint>,
}

/// Deviations from the structural identities every spectrum of this flow
/// must satisfy: zero sum (the flow preserves volume), symmetry of the
/// extreme pair, and a vanishing neutral exponent.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SpectrumInvariants {
    pub sum_abs: f64,
    pub symmetry_gap: f64,
    pub neutral_abs: f64,
}

impl LyapunovSpectrum {
    pub fn invariants(&self) -> SpectrumInvariants {
        let [top, mid, bot] = self.exponents;
        SpectrumInvariants {
            sum_abs: (top + mid + bot).abs(),
            symmetry_gap: (top + bot).abs(),
            neutral_abs: mid.abs(),
        }
    }
}

fn sorted_desc(sums: &[f64; 3], t: f64) -> [f64; 3] {
    let mut e = [sums[0] / t, sums[1] / t, sums[2] / t];
    e.sort_by(|a, b| b.partial_cmp(a).unwrap());
    e
}

/// Positive part of a descending spectrum with clustering: exponents
/// separated by less than `gap` share one block whose mean decides the
/// sign, so a noise-split zero pair does not leak into the sum.
fn clustered_positive_sum(exponents: &[f64; 3], gap: f64, threshold: f64) -> f64 {
    let mut total = 0.0;
    let mut start = 0;
    for i in 1..=3 {
        if i == 3 || exponents[i - 1] - exponents[i] > gap {
            let members = &exponents[start..i];
            let sum: f64 = members.iter().sum();
            if sum / members.len() as f64 > threshold {
                total += sum;
            }
            start = i;
        }
    }
    total
}

pub fn lyapunov_spectrum(
    model: &SurfaceModel,
    theta: &UnitTangentState,
    config: &SpectrumConfig,
    step: f64,
) -> Result<LyapunovSpectrum> {
    if !(config.renorm_dt > 0.0 && config.renorm_dt.is_finite()) {
        return Err(Error::InvalidArgument {
            stage: "spectrum",
            detail: format!("renormalization interval {} must be positive", config.renorm_dt),
        });
    }
    if config.horizon < 100.0 * config.renorm_dt {
        return Err(Error::InvalidArgument {
            stage: "spectrum",
            detail: format!(
                "horizon {} too short for a stable tail; need at least 100 renormalization intervals",
                config.horizon
            ),
        });
    }
    if config.checkpoints < 8 {
        return Err(Error::InvalidArgument {
            stage: "spectrum",
            detail: "need at least 8 trace checkpoints".into(),
        });
    }
    let n = (config.horizon / config.renorm_dt).round() as usize;
    let horizon = n as f64 * config.renorm_dt;
    let stride = n.div_ceil(config.checkpoints);

    let mut stepper = OrbitStepper::new(model, theta, step)?;
    let mut q = Matrix3::<f64>::identity();
    let mut sums = [0.0f64; 3];
    let mut trace = Vec::with_capacity(config.checkpoints + 1);
    for k in 1..=n {
        let chunk = accumulate_derivative(&mut stepper, config.renorm_dt)?;
        let p = chunk.phi;
        let m = Matrix3::new(
            1.0, 0.0, 0.0,
            0.0, p[(0, 0)], p[(0, 1)],
            0.0, p[(1, 0)], p[(1, 1)],
        );
        let qr = (m * q).qr();
        q = qr.q();
        let r = qr.r();
        for (i, s) in sums.iter_mut().enumerate() {
            let d = r[(i, i)].abs();
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::Numerical {
                    stage: "spectrum",
                    detail: format!(
                        "renormalized growth degenerated at t = {}; use a smaller renormalization interval",
                        k as f64 * config.renorm_dt
                    ),
                });
            }
            *s += d.ln();
        }
        if k % stride == 0 || k == n {
            let t = k as f64 * config.renorm_dt;
            trace.push(SpectrumCheckpoint { t, exponents: sorted_desc(&sums, t) });
        }
    }

    let exponents = sorted_desc(&sums, horizon);
    let mut half_widths = [0.0f64; 3];
    for (i, hw) in half_widths.iter_mut().enumerate() {
        let mut hi = f64::NEG_INFINITY;
        let mut lo = f64::INFINITY;
        for cp in trace.iter().filter(|cp| cp.t >= 0.75 * horizon) {
            hi = hi.max(cp.exponents[i]);
            lo = lo.min(cp.exponents[i]);
        }
        *hw = 0.5 * (hi - lo);
    }
    let hw_max = half_widths.iter().cloned().fold(0.0f64, f64::max);
    let chi_plus = clustered_positive_sum(&exponents, 10.0 * hw_max, 3.0 * hw_max);
    Ok(LyapunovSpectrum {
        exponents,
        half_widths,
        chi_plus,
        converged: hw_max <= CONVERGENCE_HALF_WIDTH,
        horizon,
        renorm_steps: n,
        max_height: stepper.max_height(),
        trace,
    })
}

/// Spectra for a batch of states, computed in parallel.
pub fn spectrum_batch(
    model: &SurfaceModel,
    thetas: &[UnitTangentState],
    config: &SpectrumConfig,
    step: f64,
) -> Result<Vec<LyapunovSpectrum>> {
    batch::map_indexed(thetas.len(), |i| lyapunov_spectrum(model, &thetas[i], config, step))
        .into_iter()
        .collect()
}

/// Outcome of testing one vector against the exponential sandwich
/// `e^{k(chi - eps)} |v| <= |dphi^k v| <= e^{k(chi + eps)} |v|` at
/// integer times.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegularityCheck {
    pub chi: f64,
    pub epsilon: f64,
    pub k_values: Vec<usize>,
    pub lower_ok: Vec<bool>,
    pub upper_ok: Vec<bool>,
    /// Smallest checked time from which both bounds hold through the end
    /// of the range; `None` if the last time already fails.
    pub all_hold_from: Option<usize>,
}

pub fn regularity_check(
    model: &SurfaceModel,
    theta: &UnitTangentState,
    xi: &SplitVector,
    chi: f64,
    epsilon: f64,
    k_max: usize,
    step: f64,
) -> Result<RegularityCheck> {
    if !(epsilon > 0.0) || k_max == 0 {
        return Err(Error::InvalidArgument {
            stage: "regularity check",
            detail: "need a positive tolerance and a nonempty time range".into(),
        });
    }
    let (a, j, p) = adapted_coordinates(model, theta, xi)?;
    let norm0 = (a * a + j * j + p * p).sqrt();
    if norm0 == 0.0 {
        return Err(Error::ZeroVector);
    }
    let mut stepper = OrbitStepper::new(model, theta, step)?;
    let mut phi = nalgebra::Matrix2::<f64>::identity();
    let mut k_values = Vec::with_capacity(k_max);
    let mut lower_ok = Vec::with_capacity(k_max);
    let mut upper_ok = Vec::with_capacity(k_max);
    for k in 1..=k_max {
        phi = accumulate_derivative(&mut stepper, 1.0)?.phi * phi;
        let normal = phi * Vector2::new(j, p);
        let img = (a * a + normal.norm_squared()).sqrt();
        let kf = k as f64;
        k_values.push(k);
        lower_ok.push(img >= (kf * (chi - epsilon)).exp() * norm0 * (1.0 - 1e-12));
        upper_ok.push(img <= (kf * (chi + epsilon)).exp() * norm0 * (1.0 + 1e-12));
    }
    let mut all_hold_from = None;
    for i in (0..k_max).rev() {
        if lower_ok[i] && upper_ok[i] {
            all_hold_from = Some(k_values[i]);
        } else {
            break;
        }
    }
    Ok(RegularityCheck { chi, epsilon, k_values, lower_ok, upper_ok, all_hold_from })
}
