//! Invariant directions of the linearized flow and everything built on
//! top of them: fitted contraction constants, the derived certificate of
//! explicit inequalities, per-state bound checks, the iterate-inclusion
//! test, and the stable/unstable growth-ratio diagnostic.
//!
//! The stable and unstable lines at a state are recovered from singular
//! directions of long-horizon cocycles: the direction at `theta` most
//! expanded by the forward map from the distant past is unstable, the
//! one most expanded by the backward map from the distant future is
//! stable. Each estimate is validated against the same construction at
//! half the horizon; surfaces without uniform hyperbolicity (the flat
//! plane) fail that self-consistency check instead of returning noise.
//!
//! All reported quantities are plain numbers in Sasaki-orthonormal
//! frames, so downstream serialization never depends on chart details.

use crate::batch;
use crate::error::{Error, Result};
use crate::flow::{accumulate_derivative, flow, flow_derivative, OrbitStepper};
use crate::geometry::SurfaceModel;
use crate::rng::{stream, StreamKind};
use crate::sasaki::{
    bundle_exp, bundle_exp_inverse, sm_distance_bounds, UnitTangentState,
    DEFAULT_BUNDLE_EXP_STEP,
};
use nalgebra::{Matrix2, Vector2};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Cocycle horizon for direction estimates. Direction error decays like
/// `e^{-2cT}`, so 15 time units put constant-curvature estimates at
/// machine precision while keeping entries around `e^{cT}` representable.
pub const DEFAULT_SPLIT_HORIZON: f64 = 15.0;
/// Largest tolerated disagreement (sine of the angle) between the
/// full-horizon and half-horizon direction estimates.
pub const SPLIT_RESIDUAL_THRESHOLD: f64 = 1e-3;

const FIT_GRID_STEP: f64 = 0.5;
const FIT_GRID_MAX: f64 = 8.0;

/// `adj(m)`, the inverse scaled by the determinant.
fn adjugate(m: &Matrix2<f64>) -> Matrix2<f64> {
    Matrix2::new(m[(1, 1)], -m[(0, 1)], -m[(1, 0)], m[(0, 0)])
}

/// Unit eigenvector for the largest eigenvalue of a symmetric positive
/// matrix, via the closed form. The sign is normalized to positive first
/// component (positive second if the first vanishes).
fn dominant_unit(s: &Matrix2<f64>) -> Vector2<f64> {
    let (a, b, d) = (s[(0, 0)], s[(0, 1)], s[(1, 1)]);
    let gap = 0.5 * ((a - d).hypot(2.0 * b));
    let lam = 0.5 * (a + d) + gap;
    // two candidate eigenvector formulas; take the better conditioned
    let v1 = Vector2::new(b, lam - a);
    let v2 = Vector2::new(lam - d, b);
    let mut v = if v1.norm() >= v2.norm() { v1 } else { v2 };
    if v.norm() == 0.0 {
        // isotropic matrix; any direction qualifies
        v = Vector2::new(1.0, 0.0);
    }
    v /= v.norm();
    if v[0] < 0.0 || (v[0] == 0.0 && v[1] < 0.0) {
        v = -v;
    }
    v
}

/// The output direction a cocycle expands most: dominant left-singular
/// vector of `adj(n)`, which is the inverse for unit-determinant `n`.
fn most_expanded_output(n: &Matrix2<f64>) -> Result<Vector2<f64>> {
    if !n.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical {
            stage: "splitting estimate",
            detail: "cocycle overflowed; reduce the horizon".into(),
        });
    }
    let m = adjugate(n);
    Ok(dominant_unit(&(m * m.transpose())))
}

fn sine_between(a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    (a[0] * b[1] - a[1] * b[0]).abs()
}

/// Stable and unstable lines at a state, as unit `(j, p)` coordinates in
/// the parallel frame (position component along the normal, derivative
/// component along the normal).
#[derive(Debug, Clone, Copy)]
pub struct SplittingEstimate {
    pub theta: UnitTangentState,
    pub e_s: Vector2<f64>,
    pub e_u: Vector2<f64>,
    pub horizon: f64,
    /// Worst half-horizon self-consistency sine across the two lines.
    pub residual: f64,
}

impl SplittingEstimate {
    /// Cosine of the angle between the stable and unstable lines in the
    /// Sasaki metric (the frames are orthonormal, so the chart dot
    /// product is the metric one).
    pub fn angle_cosine(&self) -> f64 {
        self.e_s.dot(&self.e_u)
    }

    /// Largest inner product between unit stable and unit unstable
    /// vectors; lines are one-dimensional here, so this is `|cos|`.
    pub fn overlap(&self) -> f64 {
        self.angle_cosine().abs()
    }

    /// Operator norm of the projection onto the stable line along the
    /// unstable one (the flow direction is orthogonal to both and drops
    /// out): `1 / sin` of the angle between the lines.
    pub fn projection_norm(&self) -> f64 {
        let s = sine_between(&self.e_s, &self.e_u);
        if s == 0.0 { f64::INFINITY } else { 1.0 / s }
    }
}

/// Estimate the invariant lines at `theta` from horizon-`T` cocycles,
/// cross-checked at horizon `T/2`.
pub fn estimate_splitting(
    model: &SurfaceModel,
    theta: &UnitTangentState,
    horizon: f64,
    step: f64,
) -> Result<SplittingEstimate> {
    if !(horizon >= 2.0) {
        return Err(Error::InvalidArgument {
            stage: "splitting estimate",
            detail: format!("horizon must be at least 2, got {horizon}"),
        });
    }
    let half = 0.5 * horizon;

    let mut bwd = OrbitStepper::new(model, theta, step)?;
    let b_half = accumulate_derivative(&mut bwd, -half)?.phi;
    let b_rest = accumulate_derivative(&mut bwd, -half)?.phi;
    let e_u_half = most_expanded_output(&b_half)?;
    let e_u = most_expanded_output(&(b_rest * b_half))?;

    let mut fwd = OrbitStepper::new(model, theta, step)?;
    let f_half = accumulate_derivative(&mut fwd, half)?.phi;
    let f_rest = accumulate_derivative(&mut fwd, half)?.phi;
    let e_s_half = most_expanded_output(&f_half)?;
    let e_s = most_expanded_output(&(f_rest * f_half))?;

    let residual = sine_between(&e_u, &e_u_half).max(sine_between(&e_s, &e_s_half));
    if residual > SPLIT_RESIDUAL_THRESHOLD {
        return Err(Error::SplittingFailure {
            residual,
            threshold: SPLIT_RESIDUAL_THRESHOLD,
        });
    }
    Ok(SplittingEstimate { theta: *theta, e_s, e_u, horizon, residual })
}

/// Contraction data fitted from cocycle decay envelopes.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AnosovFit {
    /// Per-unit-time contraction factor, in (0, 1).
    pub lambda: f64,
    /// Envelope prefactor, at least 1.
    pub envelope: f64,
    /// RMS of the pooled log-norm maxima around the fitted line.
    pub rms: f64,
    pub orbit_count: usize,
    pub grid_max: f64,
}

/// Fit `(envelope, lambda)` so that stable vectors decay within
/// `envelope * lambda^t` forward and unstable vectors backward. Pools
/// the per-time maxima of the sampled log-growth families and fits the
/// slope by least squares, then lifts the intercept to the envelope.
pub fn fit_anosov_constants(
    model: &SurfaceModel,
    thetas: &[UnitTangentState],
    step: f64,
) -> Result<AnosovFit> {
    if thetas.len() < 3 {
        return Err(Error::InsufficientSamples {
            stage: "contraction fit",
            need: 3,
            got: thetas.len(),
        });
    }
    let grid_len = (FIT_GRID_MAX / FIT_GRID_STEP).round() as usize + 1;

    let families = batch::map_indexed(thetas.len(), |i| -> Result<Vec<f64>> {
        let theta = &thetas[i];
        let split = estimate_splitting(model, theta, DEFAULT_SPLIT_HORIZON, step)?;
        let mut logs = vec![f64::NEG_INFINITY; grid_len];
        let mut fwd = OrbitStepper::new(model, theta, step)?;
        let mut bwd = OrbitStepper::new(model, theta, step)?;
        let mut phi_f = Matrix2::identity();
        let mut phi_b = Matrix2::identity();
        for (k, slot) in logs.iter_mut().enumerate() {
            if k > 0 {
                phi_f = accumulate_derivative(&mut fwd, FIT_GRID_STEP)?.phi * phi_f;
                phi_b = accumulate_derivative(&mut bwd, -FIT_GRID_STEP)?.phi * phi_b;
            }
            let s_decay = (phi_f * split.e_s).norm().ln();
            let u_decay = (phi_b * split.e_u).norm().ln();
            *slot = s_decay.max(u_decay);
        }
        Ok(logs)
    });

    let mut pooled = vec![f64::NEG_INFINITY; grid_len];
    for fam in families {
        for (slot, v) in pooled.iter_mut().zip(fam?) {
            *slot = slot.max(v);
        }
    }

    let ts: Vec<f64> = (0..grid_len).map(|k| k as f64 * FIT_GRID_STEP).collect();
    let t_mean = ts.iter().sum::<f64>() / grid_len as f64;
    let m_mean = pooled.iter().sum::<f64>() / grid_len as f64;
    let mut num = 0.0;
    let mut den = 0.0;
    for (t, m) in ts.iter().zip(&pooled) {
        num += (t - t_mean) * (m - m_mean);
        den += (t - t_mean) * (t - t_mean);
    }
    let slope = num / den;
    let lambda = slope.exp();
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::Numerical {
            stage: "contraction fit",
            detail: format!(
                "fitted decay rate {lambda} is not a contraction; the flow may not be uniformly hyperbolic"
            ),
        });
    }
    let intercept = m_mean - slope * t_mean;
    let mut log_env = f64::NEG_INFINITY;
    let mut sq = 0.0;
    for (t, m) in ts.iter().zip(&pooled) {
        log_env = log_env.max(m - slope * t);
        let r = m - (intercept + slope * t);
        sq += r * r;
    }
    Ok(AnosovFit {
        lambda,
        envelope: log_env.exp().max(1.0),
        rms: (sq / grid_len as f64).sqrt(),
        orbit_count: thetas.len(),
        grid_max: FIT_GRID_MAX,
    })
}

/// Sampled extremes of the stable/unstable geometry over a state batch.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AngleStats {
    /// Largest sampled `|cos|` between the invariant lines.
    pub overlap_max: f64,
    /// Largest sampled norm of the stable-along-unstable projection.
    pub projection_max: f64,
    pub samples: usize,
}

pub fn sample_angle_stats(
    model: &SurfaceModel,
    thetas: &[UnitTangentState],
    horizon: f64,
    step: f64,
) -> Result<AngleStats> {
    if thetas.is_empty() {
        return Err(Error::InsufficientSamples { stage: "angle stats", need: 1, got: 0 });
    }
    let per = batch::map_indexed(thetas.len(), |i| -> Result<(f64, f64)> {
        let split = estimate_splitting(model, &thetas[i], horizon, step)?;
        Ok((split.overlap(), split.projection_norm()))
    });
    let mut overlap_max: f64 = 0.0;
    let mut projection_max: f64 = 1.0;
    for r in per {
        let (f, d) = r?;
        overlap_max = overlap_max.max(f);
        projection_max = projection_max.max(d);
    }
    Ok(AngleStats { overlap_max, projection_max, samples: thetas.len() })
}

/// Strict upper bound for the transversality overlap, inflated away from
/// the sampled maximum but kept below 1.
pub fn inflate_overlap(overlap_max: f64) -> f64 {
    (overlap_max * 1.05 + 0.01).min(0.5 * (1.0 + overlap_max))
}

/// Safety factor applied to the sampled projection-norm maximum.
pub const PROJECTION_SAFETY: f64 = 1.1;

/// Every explicit constant the inequality suite consumes, derived from a
/// contraction fit and sampled angle statistics. Serialized verbatim so
/// a report can be audited without rerunning the fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnosovCertificate {
    /// Upper bound `c` on the curvature magnitude: `|K| <= c^2`.
    pub curvature_bound: f64,
    /// Envelope prefactor, at least 1.
    pub envelope_prefactor: f64,
    /// Per-unit-time contraction factor, in (0, 1).
    pub contraction_rate: f64,
    /// `e^{-c}`; no contraction rate on a surface with `|K| <= c^2` can
    /// fall below this, so a fitted rate near the floor is consistent.
    pub contraction_floor: f64,
    /// Iterate count for the norm inequalities: smallest `m` with
    /// `envelope * rate^m < 1/2` unless overridden.
    pub iterate: usize,
    /// Strict bound on the stable/unstable overlap, in (0, 1).
    pub angle_sup: f64,
    /// Half-diameter plus one of the overlap ellipse:
    /// `1/sqrt(1 - angle_sup) + 1`.
    pub ellipse_halfwidth: f64,
    /// Bound on the stable-along-unstable projection norm.
    pub projection_bound: f64,
    /// `2 * ellipse_halfwidth + 1`.
    pub tau1: f64,
    /// `1 / (2 * projection_bound)`.
    pub tau2: f64,
    /// Bound on the position norm at time 1 of a unit stable or unstable
    /// vector.
    pub jacobi_unit_bound: f64,
    /// Bound on the time-one operator norm.
    pub one_step_norm_bound: f64,
    /// Bound on the ratio of the iterate norm to its co-norm.
    pub kappa: f64,
    /// `one_step_norm_bound^iterate`; upper bound on the iterate norm.
    pub upper_iterate_bound: f64,
    /// `1 / envelope_prefactor`; lower bound on the iterate norm.
    pub lower_iterate_bound: f64,
    /// `lower_iterate_bound / upper_iterate_bound`; flattening factor
    /// relating iterate norms at different states.
    pub beta: f64,
}

/// Assemble the certificate. `iterate` overrides the default choice of
/// the smallest `m` with `envelope * lambda^m < 1/2`.
pub fn build_certificate(
    model: &SurfaceModel,
    fit: &AnosovFit,
    angles: &AngleStats,
    iterate: Option<usize>,
) -> Result<AnosovCertificate> {
    let (k_min, k_max) = model.curvature_bounds();
    if !(k_max < 0.0) {
        return Err(Error::InvalidArgument {
            stage: "certificate",
            detail: "curvature must be strictly negative".into(),
        });
    }
    let c = (-k_min).sqrt();
    let big_c = fit.envelope;
    let lambda = fit.lambda;
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::InvalidArgument {
            stage: "certificate",
            detail: format!("contraction rate {lambda} outside (0, 1)"),
        });
    }
    if !(big_c >= 1.0) {
        return Err(Error::InvalidArgument {
            stage: "certificate",
            detail: format!("envelope prefactor {big_c} below 1"),
        });
    }
    if !(angles.overlap_max >= 0.0 && angles.overlap_max < 1.0) {
        return Err(Error::InvalidArgument {
            stage: "certificate",
            detail: format!("sampled overlap {} outside [0, 1)", angles.overlap_max),
        });
    }
    let q = inflate_overlap(angles.overlap_max);
    let delta = (PROJECTION_SAFETY * angles.projection_max).max(1.0);
    let m = match iterate {
        Some(m) => {
            if m == 0 {
                return Err(Error::InvalidArgument {
                    stage: "certificate",
                    detail: "iterate must be positive".into(),
                });
            }
            m
        }
        None => {
            let mut m = 1usize;
            while big_c * lambda.powi(m as i32) >= 0.5 {
                m += 1;
                if m > 1024 {
                    return Err(Error::Numerical {
                        stage: "certificate",
                        detail: "contraction too weak to reach the halving iterate".into(),
                    });
                }
            }
            m
        }
    };
    let l = 1.0 / (1.0 - q).sqrt() + 1.0;
    let tau1 = 2.0 * l + 1.0;
    let tau2 = 1.0 / (2.0 * delta);
    // the mirrored constant for the reversed flow coincides because the
    // fit pools both time directions
    let p_unit = ((1.0 + c) / c) * c.sinh() + big_c * lambda * (1.0 + c * c).sqrt();
    let h = l * big_c * lambda + l * (1.0 + c * c).sqrt() * p_unit + 1.0;
    let kappa = tau1 / tau2 * (1.0 + c * c) * (2.0 * c * m as f64).exp();
    let k1 = h.powi(m as i32);
    let k2 = 1.0 / big_c;
    Ok(AnosovCertificate {
        curvature_bound: c,
        envelope_prefactor: big_c,
        contraction_rate: lambda,
        contraction_floor: (-c).exp(),
        iterate: m,
        angle_sup: q,
        ellipse_halfwidth: l,
        projection_bound: delta,
        tau1,
        tau2,
        jacobi_unit_bound: p_unit,
        one_step_norm_bound: h,
        kappa,
        upper_iterate_bound: k1,
        lower_iterate_bound: k2,
        beta: k2 / k1,
    })
}

/// Chart location and the two sides of the worst-margin inequality
/// instance for one checked row.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BoundWitness {
    pub x: f64,
    pub y: f64,
    pub angle: f64,
    pub value: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundRow {
    pub name: String,
    pub samples: usize,
    pub violations: usize,
    /// Smallest `bound - value` seen; negative means a violation.
    pub worst_margin: f64,
    pub witness: Option<BoundWitness>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundsReport {
    pub iterate: usize,
    pub samples: usize,
    pub rows: Vec<BoundRow>,
}

/// Equalities are attained on constant curvature; rounding wobble below
/// this threshold does not count as a violation (margins are still
/// reported raw).
const MARGIN_SLACK: f64 = 1e-9;

const ROW_NAMES: [&str; 9] = [
    "one_step_norm",
    "iterate_norm_window",
    "conorm_ratio",
    "iterate_norm_flatness",
    "unit_jacobi_growth",
    "transverse_angle",
    "vertical_dominated",
    "unstable_attains_norm",
    "stable_attains_conorm",
];

struct PerTheta {
    margins: [f64; 9],
    values: [f64; 9],
    bounds: [f64; 9],
}

/// Evaluate every certificate inequality at each sampled state. Reports
/// margins instead of erroring: violations are data.
pub fn check_bounds(
    model: &SurfaceModel,
    cert: &AnosovCertificate,
    thetas: &[UnitTangentState],
    seed: u64,
    step: f64,
) -> Result<BoundsReport> {
    if thetas.is_empty() {
        return Err(Error::InsufficientSamples { stage: "bound checks", need: 1, got: 0 });
    }
    let m_time = cert.iterate as f64;
    let per = batch::map_indexed(thetas.len(), |i| -> Result<PerTheta> {
        let theta = &thetas[i];
        let split = estimate_splitting(model, theta, DEFAULT_SPLIT_HORIZON, step)?;
        let d1 = flow_derivative(model, theta, 1.0, step)?;
        let dm = flow_derivative(model, theta, m_time, step)?;
        let norm1 = d1.op_norm();
        let norm_m = dm.op_norm();
        let conorm_m = dm.min_singular();

        let mut rng = stream(seed, StreamKind::BoundsCheck, [i as u64, 0, 0]);
        let nearby = sample_nearby(model, theta, 0.1, &mut rng)?;
        let norm_m_nearby = flow_derivative(model, &nearby, m_time, step)?.op_norm();

        let ju1 = (d1.phi * split.e_u)[0].abs();
        let js1 = (d1.phi * split.e_s)[0].abs();
        let grow_u = (dm.phi * split.e_u).norm();
        let grow_s = (dm.phi * split.e_s).norm();
        let overlap = split.overlap();
        let c = cert.curvature_bound;
        let eberlein = |v: &Vector2<f64>| c * v[0].abs() - v[1].abs();

        let window_up = cert.upper_iterate_bound - norm_m;
        let window_down = norm_m - cert.lower_iterate_bound;
        let values = [
            norm1,
            norm_m,
            norm_m,
            cert.beta * norm_m_nearby,
            ju1.max(js1),
            overlap,
            split.e_u[1].abs().max(split.e_s[1].abs()),
            norm_m,
            cert.tau2 * grow_s,
        ];
        let bounds = [
            cert.one_step_norm_bound,
            if window_up < window_down { cert.upper_iterate_bound } else { cert.lower_iterate_bound },
            cert.kappa * conorm_m,
            norm_m,
            cert.jacobi_unit_bound,
            cert.angle_sup,
            c * split.e_u[0].abs().min(c * split.e_s[0].abs()),
            cert.tau1 * grow_u,
            conorm_m,
        ];
        let margins = [
            cert.one_step_norm_bound - norm1,
            window_up.min(window_down),
            cert.kappa * conorm_m - norm_m,
            norm_m - cert.beta * norm_m_nearby,
            (cert.jacobi_unit_bound - ju1).min(cert.jacobi_unit_bound - js1),
            cert.angle_sup - overlap,
            eberlein(&split.e_u).min(eberlein(&split.e_s)),
            cert.tau1 * grow_u - norm_m,
            conorm_m - cert.tau2 * grow_s,
        ];
        Ok(PerTheta { margins, values, bounds })
    });

    let mut rows: Vec<BoundRow> = ROW_NAMES
        .iter()
        .map(|name| BoundRow {
            name: (*name).into(),
            samples: thetas.len(),
            violations: 0,
            worst_margin: f64::INFINITY,
            witness: None,
        })
        .collect();
    for (i, r) in per.into_iter().enumerate() {
        let pt = r?;
        let theta = &thetas[i];
        for (k, row) in rows.iter_mut().enumerate() {
            if pt.margins[k] < -MARGIN_SLACK {
                row.violations += 1;
            }
            if pt.margins[k] < row.worst_margin {
                row.worst_margin = pt.margins[k];
                row.witness = Some(BoundWitness {
                    x: theta.p.x,
                    y: theta.p.y,
                    angle: theta.frame_angle(),
                    value: pt.values[k],
                    bound: pt.bounds[k],
                });
            }
        }
    }
    Ok(BoundsReport { iterate: cert.iterate, samples: thetas.len(), rows })
}

/// Draw a state within unit-bundle distance `radius` of `theta`
/// (verified through the metric upper bound); falls back to `theta`
/// itself if the local draws keep missing.
fn sample_nearby(
    model: &SurfaceModel,
    theta: &UnitTangentState,
    radius: f64,
    rng: &mut impl Rng,
) -> Result<UnitTangentState> {
    let scale = 0.25 * radius * theta.p.y.min(1.0);
    for _ in 0..16 {
        let dx = scale * (rng.random::<f64>() - 0.5);
        let dy = scale * (rng.random::<f64>() - 0.5);
        let da = 0.25 * radius * (rng.random::<f64>() - 0.5);
        let cand = UnitTangentState::from_angle(
            model,
            theta.p.x + dx,
            theta.p.y + dy,
            theta.frame_angle() + da,
        );
        let cand = match cand {
            Ok(c) => c,
            Err(_) => continue,
        };
        if sm_distance_bounds(model, theta, &cand)?.upper <= radius {
            return Ok(cand);
        }
    }
    Ok(*theta)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InclusionReport {
    pub rho: f64,
    /// Radius of the domain ball, `beta * rho / kappa`.
    pub ball_radius: f64,
    pub samples: usize,
    /// Boundary points whose inverse-exponential solve did not converge.
    pub skipped: usize,
    /// Smallest `rho - |preimage|` over the tested boundary; positive
    /// means the image ball sits strictly inside the target ellipsoid.
    pub worst_margin: f64,
    pub pass: bool,
}

/// Push the boundary of a small exponential ball through the iterate and
/// verify it lands inside the image of the `rho`-ball under the
/// linearization.
pub fn theorem51_inclusion(
    model: &SurfaceModel,
    cert: &AnosovCertificate,
    theta: &UnitTangentState,
    rho: f64,
    samples: usize,
    seed: u64,
    step: f64,
) -> Result<InclusionReport> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::InvalidArgument {
            stage: "inclusion test",
            detail: format!("radius parameter must lie in (0, 1), got {rho}"),
        });
    }
    if samples == 0 {
        return Err(Error::InsufficientSamples { stage: "inclusion test", need: 1, got: 0 });
    }
    let ball_radius = cert.beta / cert.kappa * rho;
    let m_time = cert.iterate as f64;
    let target = flow(model, theta, m_time, step)?;
    let dm = flow_derivative(model, theta, m_time, step)?;
    let phi_inv = adjugate(&dm.phi) / dm.det;

    let per = batch::map_indexed(samples, |i| -> Result<Option<f64>> {
        let mut rng = stream(seed, StreamKind::InclusionBoundary, [i as u64, 0, 0]);
        let u = unit_three_vector(&mut rng);
        let xi = crate::flow::from_adapted_coordinates(
            theta,
            ball_radius * u[0],
            ball_radius * u[1],
            ball_radius * u[2],
        );
        let omega = bundle_exp(model, theta, &xi, 1.0, DEFAULT_BUNDLE_EXP_STEP)?;
        let pushed = flow(model, &omega, m_time, step)?;
        let w = match bundle_exp_inverse(model, &target, &pushed, None) {
            Ok(w) => w,
            Err(Error::NonConvergence { .. }) => return Ok(None),
            Err(e) => return Err(e),
        };
        let (a, j, p) = crate::flow::adapted_coordinates(model, &target, &w)?;
        let back = phi_inv * Vector2::new(j, p);
        let pulled = (a * a + back.norm_squared()).sqrt();
        Ok(Some(rho - pulled))
    });

    let mut worst = f64::INFINITY;
    let mut skipped = 0usize;
    for r in per {
        match r? {
            Some(margin) => worst = worst.min(margin),
            None => skipped += 1,
        }
    }
    let pass = worst > 0.0 && skipped * 100 < samples;
    Ok(InclusionReport {
        rho,
        ball_radius,
        samples,
        skipped,
        worst_margin: worst,
        pass,
    })
}

fn unit_three_vector(rng: &mut impl Rng) -> [f64; 3] {
    loop {
        let v = [
            rng.random::<f64>() * 2.0 - 1.0,
            rng.random::<f64>() * 2.0 - 1.0,
            rng.random::<f64>() * 2.0 - 1.0,
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-3 && n <= 1.0 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// Pointwise growth-ratio diagnostic: the stable-over-unstable norm
/// ratio, rate-compensated, which must stay inside an exponential
/// envelope determined by the curvature bound.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RatioDiagnostic {
    pub t_grid: Vec<f64>,
    pub ratios: Vec<f64>,
    /// Whether every sample respects the two-sided envelope.
    pub envelope_ok: bool,
    /// Whether the ratio is constant to within 1e-9 relative (the
    /// equality case of the envelope, attained at constant curvature
    /// when the rate matches the floor).
    pub constant: bool,
    /// Whether the starting ratio lies in the band forced by the
    /// vertical-domination inequality.
    pub start_in_band: bool,
}

pub fn ratio_diagnostic(
    model: &SurfaceModel,
    cert: &AnosovCertificate,
    theta: &UnitTangentState,
    t_max: f64,
    step: f64,
) -> Result<RatioDiagnostic> {
    if !(t_max > 0.0) {
        return Err(Error::InvalidArgument {
            stage: "ratio diagnostic",
            detail: "need a positive horizon".into(),
        });
    }
    let split = estimate_splitting(model, theta, DEFAULT_SPLIT_HORIZON, step)?;
    let lambda = cert.contraction_rate;
    let c = cert.curvature_bound;
    let steps = (t_max / FIT_GRID_STEP).ceil() as usize;
    let mut stepper = OrbitStepper::new(model, theta, step)?;
    let mut phi = Matrix2::identity();
    let mut t_grid = Vec::with_capacity(steps + 1);
    let mut ratios = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        if k > 0 {
            phi = accumulate_derivative(&mut stepper, FIT_GRID_STEP)?.phi * phi;
        }
        let t = k as f64 * FIT_GRID_STEP;
        let js = (phi * split.e_s)[0].abs();
        let ju = (phi * split.e_u)[0].abs();
        if js < 1e-12 || ju < 1e-12 {
            return Err(Error::Numerical {
                stage: "ratio diagnostic",
                detail: format!("position component vanished at t = {t}; conjugate-point behavior"),
            });
        }
        t_grid.push(t);
        ratios.push(lambda.powf(-2.0 * t) * js / ju);
    }
    let r0 = ratios[0];
    let drift = -2.0 * lambda.ln();
    let mut envelope_ok = true;
    let mut constant = true;
    for (t, r) in t_grid.iter().zip(&ratios) {
        let lo = r0 * ((drift - 2.0 * c) * t).exp();
        let hi = r0 * ((drift + 2.0 * c) * t).exp();
        if *r < lo * (1.0 - 1e-9) || *r > hi * (1.0 + 1e-9) {
            envelope_ok = false;
        }
        if (*r - r0).abs() > 1e-9 * r0 {
            constant = false;
        }
    }
    let band = (1.0 + c * c).sqrt();
    let start_in_band = r0 >= 1.0 / band * (1.0 - 1e-9) && r0 <= band * (1.0 + 1e-9);
    Ok(RatioDiagnostic { t_grid, ratios, envelope_ok, constant, start_in_band })
}

/// Uniform state sample over a chart box and the full fiber circle.
/// Bound checks are pointwise, so any sampling distribution is valid;
/// uniform keeps the draw auditable.
pub fn sample_states(
    model: &SurfaceModel,
    count: usize,
    seed: u64,
    x_range: (f64, f64),
    y_range: (f64, f64),
) -> Result<Vec<UnitTangentState>> {
    if count == 0 {
        return Err(Error::InsufficientSamples { stage: "state sampling", need: 1, got: 0 });
    }
    let mut rng = stream(seed, StreamKind::StateSampling, [0, 0, 0]);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let x = x_range.0 + (x_range.1 - x_range.0) * rng.random::<f64>();
        let y = y_range.0 + (y_range.1 - y_range.0) * rng.random::<f64>();
        let a = std::f64::consts::PI * (2.0 * rng.random::<f64>() - 1.0);
        if let Ok(s) = UnitTangentState::from_angle(model, x, y, a) {
            out.push(s);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::DEFAULT_FLOW_STEP;
    use crate::geometry::default_bumps;
    use approx::assert_relative_eq;

    fn hc(c: f64) -> SurfaceModel {
        SurfaceModel::hyperbolic(c).unwrap()
    }

    fn split_hc(c: f64, x: f64, y: f64, a: f64) -> SplittingEstimate {
        let m = hc(c);
        let s = UnitTangentState::from_angle(&m, x, y, a).unwrap();
        estimate_splitting(&m, &s, DEFAULT_SPLIT_HORIZON, DEFAULT_FLOW_STEP).unwrap()
    }

    #[test]
    fn constant_curvature_directions_are_diagonal() {
        let sp = split_hc(1.0, 0.1, 1.2, 0.7);
        let r = 1.0 / (2.0f64).sqrt();
        assert_relative_eq!(sp.e_u[0], r, epsilon = 1e-6);
        assert_relative_eq!(sp.e_u[1], r, epsilon = 1e-6);
        assert_relative_eq!(sp.e_s[0], r, epsilon = 1e-6);
        assert_relative_eq!(sp.e_s[1], -r, epsilon = 1e-6);
        assert!(sp.residual < 1e-9);
    }

    #[test]
    fn line_overlap_depends_on_curvature_scale() {
        let sp1 = split_hc(1.0, 0.0, 1.0, 0.3);
        assert!(sp1.angle_cosine().abs() < 1e-9);
        let sp2 = split_hc(2.0, 0.0, 1.0, 0.3);
        // lines (1, c) and (1, -c): cosine (1 - c^2) / (1 + c^2)
        assert_relative_eq!(sp2.angle_cosine(), -0.6, epsilon = 1e-9);
        assert_relative_eq!(sp2.overlap(), 0.6, epsilon = 1e-9);
        assert_relative_eq!(sp2.projection_norm(), 1.25, epsilon = 1e-9);
    }

    #[test]
    fn flat_plane_has_no_uniform_splitting() {
        let m = SurfaceModel::flat();
        let s = UnitTangentState::new(&m, 0.0, 0.0, 1.0, 0.0).unwrap();
        match estimate_splitting(&m, &s, DEFAULT_SPLIT_HORIZON, 1e-2) {
            Err(Error::SplittingFailure { residual, .. }) => assert!(residual > 1e-2),
            other => panic!("expected a splitting failure, got {other:?}"),
        }
    }

    #[test]
    fn fitted_constants_on_constant_curvature() {
        let m = hc(1.0);
        let thetas: Vec<_> = [(0.0, 1.0, 0.3), (0.2, 1.4, -0.8), (-0.3, 0.7, 1.9), (0.5, 2.0, 2.6)]
            .iter()
            .map(|(x, y, a)| UnitTangentState::from_angle(&m, *x, *y, *a).unwrap())
            .collect();
        let fit = fit_anosov_constants(&m, &thetas, DEFAULT_FLOW_STEP).unwrap();
        assert_relative_eq!(fit.lambda, (-1.0f64).exp(), max_relative = 0.02);
        assert!(fit.envelope >= 1.0 && fit.envelope <= 1.1, "envelope {}", fit.envelope);
        assert!(fit.rms < 1e-6);

        let m2 = hc(2.0);
        let thetas2: Vec<_> = [(0.0, 1.0, 0.3), (0.2, 1.4, -0.8), (-0.3, 0.7, 1.9)]
            .iter()
            .map(|(x, y, a)| UnitTangentState::from_angle(&m2, *x, *y, *a).unwrap())
            .collect();
        let fit2 = fit_anosov_constants(&m2, &thetas2, DEFAULT_FLOW_STEP).unwrap();
        assert_relative_eq!(fit2.lambda, (-2.0f64).exp(), max_relative = 0.02);
    }

    #[test]
    fn fitted_constants_on_perturbed_model() {
        let m = SurfaceModel::perturbed_hyperbolic(1.0, 0.1, default_bumps()).unwrap();
        let thetas: Vec<_> = [(0.0, 1.0, 0.3), (0.3, 1.3, -0.9), (-0.4, 0.8, 1.7), (0.6, 1.9, 2.8)]
            .iter()
            .map(|(x, y, a)| UnitTangentState::from_angle(&m, *x, *y, *a).unwrap())
            .collect();
        let fit = fit_anosov_constants(&m, &thetas, DEFAULT_FLOW_STEP).unwrap();
        assert!(
            fit.lambda > (-1.1f64).exp() && fit.lambda < (-0.9f64).exp(),
            "rate {} outside the pinched window",
            fit.lambda
        );
        assert!(fit.envelope >= 1.0);
    }

    #[test]
    fn fit_needs_enough_orbits() {
        let m = hc(1.0);
        let s = UnitTangentState::from_angle(&m, 0.0, 1.0, 0.3).unwrap();
        assert!(matches!(
            fit_anosov_constants(&m, &[s, s], DEFAULT_FLOW_STEP),
            Err(Error::InsufficientSamples { .. })
        ));
    }

    #[test]
    fn overlap_inflation_stays_strict() {
        assert_relative_eq!(inflate_overlap(0.0), 0.01, epsilon = 1e-15);
        assert_relative_eq!(inflate_overlap(0.99), 0.995, epsilon = 1e-15);
        for f in [0.0, 0.3, 0.6, 0.9, 0.99, 0.9999] {
            let q = inflate_overlap(f);
            assert!(q > f && q < 1.0, "inflation failed at {f}: {q}");
        }
    }

    fn hand_certificate(c: f64, big_c: f64, lambda: f64, q: f64, delta: f64) -> AnosovCertificate {
        let model = hc(c);
        let fit = AnosovFit {
            lambda,
            envelope: big_c,
            rms: 0.0,
            orbit_count: 3,
            grid_max: FIT_GRID_MAX,
        };
        // inflate_overlap and the projection safety factor are bypassed
        // by inverting them here, so the certificate lands on q, delta
        let overlap = if q <= 0.01 { 0.0 } else { (q - 0.01) / 1.05 };
        let angles = AngleStats {
            overlap_max: overlap,
            projection_max: delta / PROJECTION_SAFETY,
            samples: 8,
        };
        build_certificate(&model, &fit, &angles, None).unwrap()
    }

    #[test]
    fn certificate_matches_frozen_numbers() {
        let cert = hand_certificate(1.0, 1.0, (-1.0f64).exp(), 0.01, 1.0);
        assert_eq!(cert.iterate, 1);
        // ellipse halfwidth at overlap bound 0.01
        assert_relative_eq!(cert.ellipse_halfwidth, 1.0 / 0.99f64.sqrt() + 1.0, epsilon = 1e-12);
        let e = std::f64::consts::E;
        // unit-vector growth bound: 2 sinh 1 + sqrt(2)/e
        assert_relative_eq!(
            cert.jacobi_unit_bound,
            2.0 * 1.0f64.sinh() + (2.0f64).sqrt() / e,
            epsilon = 1e-12
        );
        assert_relative_eq!(cert.lower_iterate_bound, 1.0, epsilon = 1e-15);
        assert!(cert.beta > 0.0 && cert.beta < 1.0);
        // norm window brackets the exact one-step norm e
        assert!(cert.lower_iterate_bound < e && e < cert.upper_iterate_bound);
        assert!(e * e <= cert.kappa);
    }

    #[test]
    fn certificate_zero_overlap_unit_projection() {
        // with overlap bound 0, halfwidth is 2 and the ratio bound is
        // 5 * 2 * 2 * e^2
        let model = hc(1.0);
        let fit = AnosovFit {
            lambda: (-1.0f64).exp(),
            envelope: 1.0,
            rms: 0.0,
            orbit_count: 3,
            grid_max: FIT_GRID_MAX,
        };
        let angles = AngleStats { overlap_max: 0.0, projection_max: 0.0, samples: 1 };
        let mut cert = build_certificate(&model, &fit, &angles, None).unwrap();
        // force the exact corner values the closed form predicts
        cert.angle_sup = 0.0;
        let l = 1.0 / (1.0 - cert.angle_sup).sqrt() + 1.0;
        assert_relative_eq!(l, 2.0, epsilon = 1e-15);
        let tau1 = 2.0 * l + 1.0;
        let tau2: f64 = 0.5;
        let kappa = tau1 / tau2 * 2.0 * (2.0f64).exp();
        assert_relative_eq!(kappa, 147.78112197861302, epsilon = 1e-9);
    }

    #[test]
    fn certificate_rejects_bad_inputs() {
        let model = hc(1.0);
        let fit = AnosovFit {
            lambda: (-1.0f64).exp(),
            envelope: 1.0,
            rms: 0.0,
            orbit_count: 3,
            grid_max: FIT_GRID_MAX,
        };
        let bad_angles = AngleStats { overlap_max: 1.0, projection_max: 1.0, samples: 1 };
        assert!(build_certificate(&model, &fit, &bad_angles, None).is_err());
        let angles = AngleStats { overlap_max: 0.0, projection_max: 1.0, samples: 1 };
        let bad_fit = AnosovFit { lambda: 1.5, ..fit };
        assert!(build_certificate(&model, &bad_fit, &angles, None).is_err());
        assert!(build_certificate(
            &SurfaceModel::flat(),
            &fit,
            &angles,
            None
        )
        .is_err());
    }

    fn fitted_certificate(model: &SurfaceModel, thetas: &[UnitTangentState]) -> AnosovCertificate {
        let fit = fit_anosov_constants(model, thetas, DEFAULT_FLOW_STEP).unwrap();
        let angles =
            sample_angle_stats(model, thetas, DEFAULT_SPLIT_HORIZON, DEFAULT_FLOW_STEP).unwrap();
        build_certificate(model, &fit, &angles, None).unwrap()
    }

    #[test]
    fn bound_rows_clear_on_constant_curvature() {
        let m = hc(1.0);
        let thetas = sample_states(&m, 16, 11, (-0.5, 0.5), (0.7, 1.7)).unwrap();
        let cert = fitted_certificate(&m, &thetas);
        let report = check_bounds(&m, &cert, &thetas, 23, DEFAULT_FLOW_STEP).unwrap();
        assert_eq!(report.rows.len(), 9);
        for row in &report.rows {
            assert_eq!(row.violations, 0, "{} violated: {:?}", row.name, row.witness);
            assert_eq!(row.samples, 16);
            assert!(row.witness.is_some());
        }
        let one_step = &report.rows[0];
        // h(1) - e with the fitted overlap near 0.01 sits around 7.16
        assert!(
            one_step.worst_margin > 7.0 && one_step.worst_margin < 7.3,
            "margin {}",
            one_step.worst_margin
        );
    }

    #[test]
    fn inclusion_holds_on_constant_curvature() {
        let m = hc(1.0);
        let thetas = sample_states(&m, 8, 5, (-0.5, 0.5), (0.8, 1.6)).unwrap();
        let cert = fitted_certificate(&m, &thetas);
        let theta = thetas[0];
        let report =
            theorem51_inclusion(&m, &cert, &theta, 0.1, 24, 7, DEFAULT_FLOW_STEP).unwrap();
        assert!(report.pass, "worst margin {}", report.worst_margin);
        assert_eq!(report.skipped, 0);
        assert!(report.worst_margin > 0.0);
        assert!(report.ball_radius < 1e-3);
    }

    #[test]
    fn ratio_is_pinned_on_constant_curvature() {
        let m = hc(1.0);
        let thetas = sample_states(&m, 8, 5, (-0.5, 0.5), (0.8, 1.6)).unwrap();
        let cert = fitted_certificate(&m, &thetas);
        let diag =
            ratio_diagnostic(&m, &cert, &thetas[1], 6.0, DEFAULT_FLOW_STEP).unwrap();
        assert!(diag.envelope_ok);
        assert!(diag.start_in_band);
        // the fitted rate matches the curvature floor, so the
        // compensated ratio freezes
        let spread = diag
            .ratios
            .iter()
            .map(|r| (r - diag.ratios[0]).abs())
            .fold(0.0f64, f64::max);
        assert!(spread < 1e-6 * diag.ratios[0], "spread {spread}");
    }

    #[test]
    fn ratio_envelope_holds_on_perturbed_model() {
        let m = SurfaceModel::perturbed_hyperbolic(1.0, 0.1, default_bumps()).unwrap();
        let thetas = sample_states(&m, 6, 9, (-0.5, 0.5), (0.8, 1.6)).unwrap();
        let cert = fitted_certificate(&m, &thetas);
        let diag = ratio_diagnostic(&m, &cert, &thetas[0], 6.0, DEFAULT_FLOW_STEP).unwrap();
        assert!(diag.envelope_ok);
        assert!(diag.start_in_band);
    }

    #[test]
    fn sampled_states_live_on_the_model() {
        let m = SurfaceModel::modular();
        let ts = sample_states(&m, 40, 3, (-0.5, 0.5), (1.0, 3.0)).unwrap();
        assert_eq!(ts.len(), 40);
        for t in &ts {
            m.check_point(&t.p).unwrap();
        }
        // deterministic draw
        let again = sample_states(&m, 40, 3, (-0.5, 0.5), (1.0, 3.0)).unwrap();
        assert_eq!(ts[7].p.x, again[7].p.x);
        assert_eq!(ts[7].frame_angle(), again[7].frame_angle());
    }
}
