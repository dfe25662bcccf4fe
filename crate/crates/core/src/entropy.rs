//! Entropy estimation from Bowen-ball statistics, and the two verdicts
//! built on it: the upper bound of the positive exponent sum against the
//! measured local entropy, and the equality check on the finite-volume
//! quotient.
//!
//! The estimators are conservative by construction. Ball membership is
//! decided through certified distance bounds: a sample counts "inside"
//! only when the upper bound clears the radius, "escaped" only when the
//! lower bound exceeds it, and the indeterminate band in between is
//! refined once and then counted inside, so every reported measure is an
//! upper estimate. All sampling is counter-seeded per (state, sample),
//! which makes results independent of thread count and execution order.

use crate::batch;
use crate::error::{Error, Result};
use crate::flow::{flow, flow_derivative};
use crate::geometry::{modular, SurfaceModel};
use crate::rng::{stream, StreamKind};
use crate::sasaki::{
    ball_verdict, liouville_chart_density, reduce_state, sm_distance_bounds, wrap_angle,
    BallVerdict, UnitTangentState,
};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::PI;

/// Chart box that plays the role of the compact core. For the modular
/// quotient, membership additionally requires the reduced point to lie
/// in the fundamental domain, so the box acts as a height cap.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CoreRegion {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub fundamental: bool,
}

impl CoreRegion {
    pub fn default_for(model: &SurfaceModel) -> Self {
        match model {
            SurfaceModel::Modular => Self {
                x_min: -0.5,
                x_max: 0.5,
                y_min: 0.0,
                y_max: 5.0,
                fundamental: true,
            },
            SurfaceModel::Flat => Self {
                x_min: -2.0,
                x_max: 2.0,
                y_min: -2.0,
                y_max: 2.0,
                fundamental: false,
            },
            _ => Self { x_min: -2.0, x_max: 2.0, y_min: 0.4, y_max: 3.0, fundamental: false },
        }
    }

    pub fn contains(&self, model: &SurfaceModel, theta: &UnitTangentState) -> Result<bool> {
        let p = if self.fundamental { reduce_state(model, theta)?.p } else { theta.p };
        if self.fundamental && !modular::in_fundamental_domain(p.x, p.y) {
            return Ok(false);
        }
        Ok(p.x >= self.x_min && p.x <= self.x_max && p.y >= self.y_min && p.y <= self.y_max)
    }

    /// Liouville mass fraction of the core when it is a height cap on
    /// the modular fundamental domain (total area pi/3, excluded cusp
    /// strip area 1/y_max). `None` on infinite-volume models.
    pub fn mass_fraction(&self, model: &SurfaceModel) -> Option<f64> {
        if *model == SurfaceModel::Modular && self.fundamental {
            Some(1.0 - 3.0 / (PI * self.y_max))
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BowenConfig {
    /// Flow time per step of the iterated map.
    pub n_flow: f64,
    /// Cap `a` for the radius function.
    pub rho_const: f64,
    /// Base of the return-time radius shrink, in (0, 1).
    pub xi_graph: f64,
    pub core: CoreRegion,
    /// Depths 0..=n_max are all estimated in one nested pass.
    pub n_max: usize,
    pub samples_per_depth: usize,
    /// Return-time search cap; past it the point counts as non-returning.
    pub return_cap: usize,
    /// Tolerance knob for the one-sided lower-bound check.
    pub epsilon: f64,
}

impl BowenConfig {
    pub fn default_for(model: &SurfaceModel) -> Self {
        Self {
            n_flow: 1.0,
            rho_const: 0.05,
            xi_graph: 0.9,
            core: CoreRegion::default_for(model),
            n_max: 12,
            samples_per_depth: 2000,
            return_cap: 64,
            epsilon: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.n_flow > 0.0
            && self.rho_const > 0.0
            && self.rho_const < 1.0
            && self.xi_graph > 0.0
            && self.xi_graph < 1.0
            && self.samples_per_depth >= 16
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument {
                stage: "bowen config",
                detail: "radius cap and shrink base must lie in (0, 1), flow time positive, at least 16 samples".into(),
            })
        }
    }
}

/// Radius at a state: the cap off the core, a power of the shrink base
/// tied to the first return on it.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ReturnTime {
    pub rho: f64,
    /// First-return step count; zero off the core and for non-returning
    /// points.
    pub steps: usize,
    pub in_core: bool,
    /// Set when the search hit the cap without a return.
    pub truncated: bool,
}

pub fn return_time_rho(
    model: &SurfaceModel,
    theta: &UnitTangentState,
    cfg: &BowenConfig,
    step: f64,
) -> Result<ReturnTime> {
    cfg.validate()?;
    if !cfg.core.contains(model, theta)? {
        return Ok(ReturnTime { rho: cfg.rho_const, steps: 0, in_core: false, truncated: false });
    }
    let mut cur = *theta;
    for k in 1..=cfg.return_cap {
        cur = flow(model, &cur, cfg.n_flow, step)?;
        if cfg.core.contains(model, &cur)? {
            return Ok(ReturnTime {
                rho: cfg.rho_const.min(cfg.xi_graph.powi(k as i32)),
                steps: k,
                in_core: true,
                truncated: false,
            });
        }
    }
    Ok(ReturnTime { rho: cfg.rho_const, steps: 0, in_core: true, truncated: true })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BowenDepthCount {
    pub n: usize,
    pub inside: usize,
    pub escaped: usize,
    pub indeterminate: usize,
    /// Estimated reference measure of the depth-`n` set (inside plus
    /// indeterminate, so an upper estimate).
    pub measure: f64,
    pub half_width: f64,
}

/// Nested-set measure estimates for one base state, all depths from one
/// sample batch, so monotonicity in `n` holds exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BowenCurve {
    pub theta_id: usize,
    pub model_id: u64,
    pub x: f64,
    pub y: f64,
    pub angle: f64,
    /// Radius along the reference orbit, one entry per step.
    pub rho: Vec<f64>,
    pub rho_truncated: bool,
    pub samples: usize,
    /// Total box draws behind the accepted samples.
    pub draws: usize,
    pub depths: Vec<BowenDepthCount>,
}

pub const BOWEN_CSV_HEADER: &str = "theta_id,n,inside,escaped,indeterminate,ball_measure";

impl BowenCurve {
    pub fn csv_rows(&self) -> Vec<String> {
        self.depths
            .iter()
            .map(|d| {
                format!(
                    "{},{},{},{},{},{:.17e}",
                    self.theta_id, d.n, d.inside, d.escaped, d.indeterminate, d.measure
                )
            })
            .collect()
    }
}

/// 95% binomial half-width, positive even at the boundary counts.
fn wilson_half_width(successes: usize, trials: usize) -> f64 {
    let z = 1.96f64;
    let n = trials as f64;
    let p = successes as f64 / n;
    let denom = 1.0 + z * z / n;
    z * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt() / denom
}

/// Tighter upper distance bound via a midpoint relay; falls back to the
/// direct bound when the pair is not chart-local.
fn refined_upper(model: &SurfaceModel, a: &UnitTangentState, b: &UnitTangentState) -> Result<f64> {
    let direct = sm_distance_bounds(model, a, b)?.upper;
    let dx = b.p.x - a.p.x;
    if dx.abs() > 0.3 {
        return Ok(direct);
    }
    let my = (a.p.y * b.p.y).abs().sqrt().copysign(a.p.y);
    if model.is_half_plane() && my <= 0.0 {
        return Ok(direct);
    }
    let mid_angle = a.frame_angle() + 0.5 * wrap_angle(b.frame_angle() - a.frame_angle());
    let mid = match UnitTangentState::from_angle(model, a.p.x + 0.5 * dx, my, mid_angle) {
        Ok(m) => m,
        Err(_) => return Ok(direct),
    };
    let two_leg = sm_distance_bounds(model, a, &mid)?.upper + sm_distance_bounds(model, &mid, b)?.upper;
    Ok(direct.min(two_leg))
}

struct SampleOutcome {
    weight: f64,
    draws: usize,
    escape_depth: Option<usize>,
    indeterminate_depth: Option<usize>,
}

/// Largest indeterminate fraction tolerated at any depth before the run
/// aborts with a precision advisory.
pub const INDETERMINATE_CAP: f64 = 0.10;

/// Estimate the reference measure of the nested family around `theta`.
pub fn bowen_curve(
    model: &SurfaceModel,
    theta: &UnitTangentState,
    cfg: &BowenConfig,
    seed: u64,
    theta_id: usize,
    step: f64,
) -> Result<BowenCurve> {
    cfg.validate()?;
    let mut refs = Vec::with_capacity(cfg.n_max + 1);
    refs.push(*theta);
    for j in 1..=cfg.n_max {
        let prev = refs[j - 1];
        refs.push(flow(model, &prev, cfg.n_flow, step)?);
    }
    let mut rho = Vec::with_capacity(refs.len());
    let mut rho_truncated = false;
    for r in &refs {
        let rt = return_time_rho(model, r, cfg, step)?;
        rho_truncated |= rt.truncated;
        rho.push(rt.rho);
    }
    let rho0 = rho[0];

    // sampling box around theta: generous enough to contain every point
    // whose certified upper distance can clear rho0
    let scale = liouville_chart_density(model, theta.p.x, theta.p.y).sqrt();
    let r_chart = 2.0 * rho0 / scale;
    let a_half = 3.0 * rho0;
    let box_volume = (2.0 * r_chart) * (2.0 * r_chart) * (2.0 * a_half);
    let (x0, y0, ang0) = (theta.p.x, theta.p.y, theta.frame_angle());

    let per = batch::map_indexed(cfg.samples_per_depth, |i| -> Result<SampleOutcome> {
        let mut rng = stream(seed, StreamKind::BowenSample, [theta_id as u64, i as u64, 0]);
        let mut draws = 0usize;
        let (omega, weight) = loop {
            draws += 1;
            if draws > 4000 {
                return Err(Error::InsufficientSamples {
                    stage: "bowen sampling",
                    need: 1,
                    got: 0,
                });
            }
            let x = x0 + r_chart * (2.0 * rng.random::<f64>() - 1.0);
            let y = y0 + r_chart * (2.0 * rng.random::<f64>() - 1.0);
            let a = ang0 + a_half * (2.0 * rng.random::<f64>() - 1.0);
            let Ok(cand) = UnitTangentState::from_angle(model, x, y, a) else { continue };
            if sm_distance_bounds(model, theta, &cand)?.upper <= rho0 {
                break (cand, liouville_chart_density(model, x, y));
            }
        };
        let mut cur = omega;
        let mut escape_depth = None;
        let mut indeterminate_depth = None;
        for j in 1..=cfg.n_max {
            cur = flow(model, &cur, cfg.n_flow, step)?;
            match ball_verdict(model, &refs[j], &cur, rho[j])? {
                BallVerdict::Inside => continue,
                BallVerdict::Outside => {
                    escape_depth = Some(j);
                    break;
                }
                BallVerdict::Indeterminate => {
                    if refined_upper(model, &refs[j], &cur)? <= rho[j] {
                        continue;
                    }
                    if indeterminate_depth.is_none() {
                        indeterminate_depth = Some(j);
                    }
                }
            }
        }
        Ok(SampleOutcome { weight, draws, escape_depth, indeterminate_depth })
    });

    let mut outcomes = Vec::with_capacity(cfg.samples_per_depth);
    let mut total_draws = 0usize;
    let mut total_weight = 0.0f64;
    for r in per {
        let o = r?;
        total_draws += o.draws;
        total_weight += o.weight;
        outcomes.push(o);
    }
    let norm = box_volume / total_draws as f64;
    let samples = outcomes.len();
    let s0_measure = total_weight * norm;

    let mut depths = Vec::with_capacity(cfg.n_max + 1);
    for n in 0..=cfg.n_max {
        let mut inside = 0usize;
        let mut escaped = 0usize;
        let mut indeterminate = 0usize;
        let mut counted_weight = 0.0f64;
        for o in &outcomes {
            if o.escape_depth.is_some_and(|e| e <= n) {
                escaped += 1;
                continue;
            }
            counted_weight += o.weight;
            if o.indeterminate_depth.is_some_and(|d| d <= n) {
                indeterminate += 1;
            } else {
                inside += 1;
            }
        }
        let frac = indeterminate as f64 / samples as f64;
        if frac > INDETERMINATE_CAP {
            return Err(Error::IndeterminateBand { fraction: frac, depth: n });
        }
        depths.push(BowenDepthCount {
            n,
            inside,
            escaped,
            indeterminate,
            measure: counted_weight * norm,
            half_width: s0_measure * wilson_half_width(inside + indeterminate, samples),
        });
    }
    Ok(BowenCurve {
        theta_id,
        model_id: model.id().0,
        x: theta.p.x,
        y: theta.p.y,
        angle: theta.frame_angle(),
        rho,
        rho_truncated,
        samples,
        draws: total_draws,
        depths,
    })
}

/// One-depth estimate: the measure and its half-width.
pub fn bowen_set_measure(
    model: &SurfaceModel,
    theta: &UnitTangentState,
    cfg: &BowenConfig,
    n: usize,
    seed: u64,
    theta_id: usize,
    step: f64,
) -> Result<(f64, f64)> {
    if n > cfg.n_max {
        return Err(Error::InvalidArgument {
            stage: "bowen measure",
            detail: format!("depth {n} beyond the configured maximum {}", cfg.n_max),
        });
    }
    let curve = bowen_curve(model, theta, cfg, seed, theta_id, step)?;
    let d = &curve.depths[n];
    Ok((d.measure, d.half_width))
}

/// Minimum points in an accepted fit window.
const WINDOW_MIN_POINTS: usize = 4;
/// Largest RMS residual (in log-measure units) for a window to count as
/// linear.
const WINDOW_RMS_TOL: f64 = 0.10;

/// Context for the quantitative lower-bound check on the fitted decay.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LowerBoundContext {
    /// Positive exponent sum for the state, per unit time.
    pub chi_plus: f64,
    /// Log-determinant supremum constant, per unit time.
    pub p_logdet: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalEntropy {
    pub theta_id: usize,
    pub curve: BowenCurve,
    pub conclusive: bool,
    /// Decay rate per map step, when a linear window exists.
    pub h_step: Option<f64>,
    /// Decay rate per unit flow time.
    pub h_time: Option<f64>,
    pub half_width: f64,
    /// Inclusive depth window of the accepted fit.
    pub window: Option<(usize, usize)>,
    /// Largest and smallest single-step increments inside the window;
    /// finite-depth proxies for the two one-sided limits.
    pub slope_high: Option<f64>,
    pub slope_low: Option<f64>,
    /// Right side of the quantitative lower bound, per map step.
    pub lower_bound_rhs: Option<f64>,
    pub lower_bound_ok: Option<bool>,
}

fn fit_line(ns: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let k = ns.len() as f64;
    let nm = ns.iter().sum::<f64>() / k;
    let ym = ys.iter().sum::<f64>() / k;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (n, y) in ns.iter().zip(ys) {
        sxy += (n - nm) * (y - ym);
        sxx += (n - nm) * (n - nm);
    }
    let slope = sxy / sxx;
    let intercept = ym - slope * nm;
    let mut sq = 0.0;
    for (n, y) in ns.iter().zip(ys) {
        let r = y - (intercept + slope * n);
        sq += r * r;
    }
    ((sq / k).sqrt(), slope, sxx)
}

pub fn local_entropy(
    model: &SurfaceModel,
    theta: &UnitTangentState,
    cfg: &BowenConfig,
    ctx: Option<&LowerBoundContext>,
    seed: u64,
    theta_id: usize,
    step: f64,
) -> Result<LocalEntropy> {
    let curve = bowen_curve(model, theta, cfg, seed, theta_id, step)?;

    // usable log-measure series: stops at the first depleted depth
    let mut ns = Vec::new();
    let mut ys = Vec::new();
    let mut sigmas = Vec::new();
    for d in &curve.depths {
        if d.inside + d.indeterminate == 0 || d.measure <= 0.0 {
            break;
        }
        ns.push(d.n as f64);
        ys.push(-d.measure.ln());
        sigmas.push(d.half_width / d.measure);
    }

    let mut best: Option<(usize, usize, f64, f64, f64)> = None;
    for i in 0..ns.len() {
        for j in (i + WINDOW_MIN_POINTS - 1)..ns.len() {
            let (rms, slope, sxx) = fit_line(&ns[i..=j], &ys[i..=j]);
            if rms > WINDOW_RMS_TOL {
                continue;
            }
            let better = match &best {
                None => true,
                Some((bi, bj, ..)) => {
                    let len = j - i;
                    let blen = bj - bi;
                    len > blen || (len == blen && i > *bi)
                }
            };
            if better {
                best = Some((i, j, slope, rms, sxx));
            }
        }
    }

    let (conclusive, h_step, h_time, half_width, window, slope_high, slope_low) = match best {
        None => (false, None, None, 0.0, None, None, None),
        Some((i, j, slope, rms, sxx)) => {
            let pts = (j - i + 1) as f64;
            let se = if pts > 2.0 { (rms * rms * pts / ((pts - 2.0) * sxx)).sqrt() } else { rms };
            let noise = sigmas[i..=j].iter().cloned().fold(0.0f64, f64::max)
                / (ns[j] - ns[i]);
            let hw = (1.96 * se + noise).max(1e-9);
            let mut hi = f64::NEG_INFINITY;
            let mut lo = f64::INFINITY;
            for k in i..j {
                let inc = ys[k + 1] - ys[k];
                hi = hi.max(inc);
                lo = lo.min(inc);
            }
            let h = slope.max(0.0);
            (
                true,
                Some(h),
                Some(h / cfg.n_flow),
                hw,
                Some((i, j)),
                Some(hi),
                Some(lo),
            )
        }
    };

    let (lower_bound_rhs, lower_bound_ok) = match (ctx, h_step) {
        (Some(c), Some(h)) => {
            let e = cfg.epsilon;
            let rhs = cfg.n_flow
                * (c.chi_plus - e - e / cfg.n_flow - 4.0 * c.p_logdet * e.sqrt());
            (Some(rhs), Some(h + half_width * cfg.n_flow >= rhs))
        }
        _ => (None, None),
    };

    Ok(LocalEntropy {
        theta_id,
        curve,
        conclusive,
        h_step,
        h_time,
        half_width,
        window,
        slope_high,
        slope_low,
        lower_bound_rhs,
        lower_bound_ok,
    })
}

/// Liouville-weighted rejection sample on a core region. Draws are
/// uniform over the chart box and the fiber circle, thinned by the
/// density; `salt` separates independent uses of the same seed.
pub fn liouville_sample_core(
    model: &SurfaceModel,
    core: &CoreRegion,
    count: usize,
    seed: u64,
    salt: u64,
) -> Result<Vec<UnitTangentState>> {
    if count == 0 {
        return Err(Error::InsufficientSamples { stage: "core sampling", need: 1, got: 0 });
    }
    // density sup over the box from a coarse scan with headroom
    let mut sup = 0.0f64;
    for i in 0..=40 {
        for j in 0..=40 {
            let x = core.x_min + (core.x_max - core.x_min) * i as f64 / 40.0;
            let y = core.y_min + (core.y_max - core.y_min) * j as f64 / 40.0;
            if model.chart_ok(x, y) {
                sup = sup.max(liouville_chart_density(model, x, y));
            }
        }
    }
    if sup == 0.0 {
        return Err(Error::InvalidArgument {
            stage: "core sampling",
            detail: "core box misses the chart".into(),
        });
    }
    sup *= 1.05;
    let per = batch::map_indexed(count, |i| -> Result<UnitTangentState> {
        let mut rng = stream(seed, StreamKind::PartitionOrbit, [salt, i as u64, 0]);
        for _ in 0..100_000 {
            let x = core.x_min + (core.x_max - core.x_min) * rng.random::<f64>();
            let y = core.y_min + (core.y_max - core.y_min) * rng.random::<f64>();
            if !model.chart_ok(x, y) {
                continue;
            }
            if core.fundamental && !modular::in_fundamental_domain(x, y) {
                continue;
            }
            if rng.random::<f64>() * sup > liouville_chart_density(model, x, y) {
                continue;
            }
            let a = PI * (2.0 * rng.random::<f64>() - 1.0);
            if let Ok(s) = UnitTangentState::from_angle(model, x, y, a) {
                return Ok(s);
            }
        }
        Err(Error::InsufficientSamples { stage: "core sampling", need: count, got: 0 })
    });
    per.into_iter().collect()
}

/// Sampled suprema of the one-step expansion constants, inflated by a
/// safety factor because a finite sample cannot certify a supremum.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SampledSuprema {
    /// Largest sum of positive log singular values of the time-one map.
    pub p_logdet: f64,
    /// Largest operator norm among the forward and backward time-one
    /// maps.
    pub upsilon: f64,
    pub samples: usize,
}

pub const SUPREMA_SAFETY: f64 = 1.1;

pub fn sampled_suprema(
    model: &SurfaceModel,
    thetas: &[UnitTangentState],
    step: f64,
) -> Result<SampledSuprema> {
    if thetas.is_empty() {
        return Err(Error::InsufficientSamples { stage: "suprema", need: 1, got: 0 });
    }
    let per = batch::map_indexed(thetas.len(), |i| -> Result<(f64, f64)> {
        let fwd = flow_derivative(model, &thetas[i], 1.0, step)?;
        let bwd = flow_derivative(model, &thetas[i], -1.0, step)?;
        let p: f64 = fwd.singular_values().iter().map(|s| s.ln().max(0.0)).sum();
        Ok((p, fwd.op_norm().max(bwd.op_norm())))
    });
    let mut p_max = 0.0f64;
    let mut u_max = 1.0f64;
    for r in per {
        let (p, u) = r?;
        p_max = p_max.max(p);
        u_max = u_max.max(u);
    }
    Ok(SampledSuprema {
        p_logdet: SUPREMA_SAFETY * p_max,
        upsilon: SUPREMA_SAFETY * u_max,
        samples: thetas.len(),
    })
}

/// Chart grid over a core region plus one complement symbol.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub cell_size: f64,
    pub angle_cells: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartitionReport {
    pub cell_size: f64,
    pub angle_cells: usize,
    pub samples: usize,
    pub occupied_cells: usize,
    /// Cells with too few hits, folded into the complement symbol.
    pub merged_cells: usize,
    /// Estimated conditional entropy of the image partition given the
    /// start partition, in nats.
    pub conditional_entropy: f64,
    /// Census side: occupancy-weighted log of the intersection counts of
    /// pushed cells.
    pub census_bound: f64,
    pub lhs_le_rhs: bool,
    pub m_time: f64,
    /// Radius the inclusion argument prescribes for the cells; the grids
    /// run coarser, and this records the gap.
    pub prescribed_diameter: f64,
}

const MERGE_MIN_COUNT: usize = 5;

fn entropy_nats(counts: &BTreeMap<u64, usize>, total: f64) -> f64 {
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum()
}

/// Conditional-entropy bound and the geometric census for a grid
/// partition of the core, from a Liouville sample pushed by time `m`.
#[allow(clippy::too_many_arguments)]
pub fn partition_entropy_bound(
    model: &SurfaceModel,
    core: &CoreRegion,
    spec: &PartitionSpec,
    m_time: f64,
    samples: usize,
    seed: u64,
    upsilon: f64,
    prescribed_diameter: f64,
    step: f64,
) -> Result<PartitionReport> {
    if !(spec.cell_size > 0.0) || spec.angle_cells == 0 {
        return Err(Error::InvalidArgument {
            stage: "partition",
            detail: "cell size and angle count must be positive".into(),
        });
    }
    let nx = ((core.x_max - core.x_min) / spec.cell_size).ceil() as u64;
    let ny = ((core.y_max - core.y_min) / spec.cell_size).ceil() as u64;
    let na = spec.angle_cells as u64;
    let symbol = |s: &UnitTangentState| -> Result<u64> {
        if !core.contains(model, s)? {
            return Ok(0);
        }
        let p = if core.fundamental { reduce_state(model, s)?.p } else { s.p };
        let ix = (((p.x - core.x_min) / spec.cell_size) as u64).min(nx - 1);
        let iy = (((p.y - core.y_min) / spec.cell_size) as u64).min(ny - 1);
        let ang = wrap_angle(s.frame_angle()) + PI;
        let ia = ((ang / (2.0 * PI) * na as f64) as u64).min(na - 1);
        Ok(1 + ix + nx * (iy + ny * ia))
    };

    let states = liouville_sample_core(model, core, samples, seed, 0)?;
    let pairs = batch::map_indexed(states.len(), |i| -> Result<(u64, u64)> {
        let s0 = symbol(&states[i])?;
        let image = flow(model, &states[i], m_time, step)?;
        Ok((s0, symbol(&image)?))
    });
    let mut raw: Vec<(u64, u64)> = Vec::with_capacity(samples);
    for r in pairs {
        raw.push(r?);
    }

    let mut start_counts: BTreeMap<u64, usize> = BTreeMap::new();
    for (s0, _) in &raw {
        *start_counts.entry(*s0).or_insert(0) += 1;
    }
    let merged: Vec<u64> = start_counts
        .iter()
        .filter(|(s, c)| **s != 0 && **c < MERGE_MIN_COUNT)
        .map(|(s, _)| *s)
        .collect();
    let merged_set: std::collections::BTreeSet<u64> = merged.iter().cloned().collect();
    let remap = |s: u64| if merged_set.contains(&s) { 0 } else { s };

    let mut joint: BTreeMap<(u64, u64), usize> = BTreeMap::new();
    let mut start: BTreeMap<u64, usize> = BTreeMap::new();
    for (s0, s1) in &raw {
        let a = remap(*s0);
        let b = remap(*s1);
        *joint.entry((a, b)).or_insert(0) += 1;
        *start.entry(a).or_insert(0) += 1;
    }
    let total = raw.len() as f64;
    let h_joint: f64 = joint
        .values()
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum();
    let h_start = entropy_nats(&start, total);
    // plug-in entropies bias low; first-order support correction
    let mm = |support: usize| support.saturating_sub(1) as f64 / (2.0 * total);
    let conditional_entropy =
        ((h_joint + mm(joint.len())) - (h_start + mm(start.len()))).max(0.0);

    // census: push each occupied cell's center, bound the image by the
    // inflated cell diameter, count grid cells the image box can touch
    let mut census = 0.0f64;
    let growth = upsilon.powf(m_time.abs());
    for (&s, &c) in &start {
        let mu_d = c as f64 / total;
        if s == 0 {
            census += mu_d * ((start.len() as f64).ln());
            continue;
        }
        let idx = s - 1;
        let ix = idx % nx;
        let iy = (idx / nx) % ny;
        let ia = idx / (nx * ny);
        let cx = core.x_min + (ix as f64 + 0.5) * spec.cell_size;
        let cy = core.y_min + (iy as f64 + 0.5) * spec.cell_size;
        let ca = -PI + (ia as f64 + 0.5) * (2.0 * PI / na as f64);
        let Ok(center) = UnitTangentState::from_angle(model, cx, cy, ca) else {
            census += mu_d * ((start.len() as f64).ln());
            continue;
        };
        let scale = liouville_chart_density(model, cx, cy).sqrt();
        let diam = spec.cell_size * scale * std::f64::consts::SQRT_2 + 2.0 * PI / na as f64;
        let image = flow(model, &center, m_time, step)?;
        let r_img = 0.5 * diam * growth;
        let img_scale = liouville_chart_density(model, image.p.x, image.p.y).sqrt();
        let half_chart = r_img / img_scale;
        let cells_x = (2.0 * half_chart / spec.cell_size).ceil() as u64 + 1;
        let cells_y = cells_x;
        let cells_a = ((2.0 * r_img) / (2.0 * PI / na as f64)).ceil() as u64 + 1;
        let mut card = cells_x.min(nx) * cells_y.min(ny) * cells_a.min(na);
        // the image may stick out of the core
        card += 1;
        census += mu_d * (card.max(1) as f64).ln();
    }

    Ok(PartitionReport {
        cell_size: spec.cell_size,
        angle_cells: spec.angle_cells,
        samples: raw.len(),
        occupied_cells: start.keys().filter(|s| **s != 0).count(),
        merged_cells: merged.len(),
        conditional_entropy,
        census_bound: census,
        lhs_le_rhs: conditional_entropy <= census,
        m_time,
        prescribed_diameter,
    })
}

/// Per-state summary row inside the final report.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LocalEntropySummary {
    pub theta_id: usize,
    pub h_time: Option<f64>,
    pub half_width: f64,
    pub conclusive: bool,
    pub lower_bound_ok: Option<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EntropyReport {
    pub chi_plus: f64,
    pub chi_plus_half_width: f64,
    pub h_local: Vec<LocalEntropySummary>,
    pub h_central: f64,
    pub h_central_half_width: f64,
    pub h_partition: Option<f64>,
    pub ruelle_slack: f64,
    pub ruelle_pass: bool,
    pub pesin_deviation: f64,
    pub pesin_applicable: bool,
    pub pesin_pass: Option<bool>,
    pub p_logdet: f64,
    pub upsilon: f64,
    pub lower_bound_pass_fraction: Option<f64>,
    pub core_mass_fraction: Option<f64>,
    pub conclusive: usize,
    pub total_states: usize,
    pub tolerance: f64,
    pub bias_note: String,
}

fn median(values: &mut Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k = values.len();
    if k % 2 == 1 {
        values[k / 2]
    } else {
        0.5 * (values[k / 2 - 1] + values[k / 2])
    }
}

/// Combine spectra, local entropies, and the sampled constants into the
/// final two-verdict report.
pub fn verdict(
    model: &SurfaceModel,
    cfg: &BowenConfig,
    spectra: &[crate::spectrum::LyapunovSpectrum],
    locals: &[LocalEntropy],
    partition: Option<&PartitionReport>,
    suprema: &SampledSuprema,
    tolerance: f64,
) -> Result<EntropyReport> {
    if spectra.is_empty() || locals.is_empty() {
        return Err(Error::InsufficientSamples {
            stage: "verdict",
            need: 1,
            got: spectra.len().min(locals.len()),
        });
    }
    let id = model.id().0;
    if locals.iter().any(|l| l.curve.model_id != id) {
        return Err(Error::ModelMismatch);
    }
    let mut chis: Vec<f64> = spectra.iter().map(|s| s.chi_plus).collect();
    let chi_plus = {
        let mut c = chis.clone();
        median(&mut c)
    };
    let chi_hw = {
        let spread =
            chis.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - chis.iter().cloned().fold(f64::INFINITY, f64::min);
        let hw_max = spectra
            .iter()
            .map(|s| s.half_widths.iter().cloned().fold(0.0f64, f64::max))
            .fold(0.0f64, f64::max);
        (0.5 * spread).max(hw_max).max(1e-9)
    };
    chis.clear();

    let mut h_vals: Vec<f64> = locals.iter().filter_map(|l| l.h_time).collect();
    let conclusive = h_vals.len();
    if conclusive == 0 {
        return Err(Error::NonConvergence {
            stage: "verdict",
            detail: "no state produced a conclusive decay window".into(),
        });
    }
    let h_central = median(&mut h_vals).max(0.0);
    let mut devs: Vec<f64> = h_vals.iter().map(|h| (h - h_central).abs()).collect();
    let mad = median(&mut devs);
    let mut hws: Vec<f64> = locals
        .iter()
        .filter(|l| l.conclusive)
        .map(|l| l.half_width / cfg.n_flow)
        .collect();
    let h_hw = (median(&mut hws) + mad).max(1e-9);

    let lb: Vec<bool> = locals.iter().filter_map(|l| l.lower_bound_ok).collect();
    let lower_bound_pass_fraction = if lb.is_empty() {
        None
    } else {
        Some(lb.iter().filter(|b| **b).count() as f64 / lb.len() as f64)
    };

    let pesin_applicable = *model == SurfaceModel::Modular;
    let ruelle_slack = chi_plus - h_central;
    let pesin_deviation = (h_central - chi_plus).abs();
    Ok(EntropyReport {
        chi_plus,
        chi_plus_half_width: chi_hw,
        h_local: locals
            .iter()
            .map(|l| LocalEntropySummary {
                theta_id: l.theta_id,
                h_time: l.h_time,
                half_width: l.half_width,
                conclusive: l.conclusive,
                lower_bound_ok: l.lower_bound_ok,
            })
            .collect(),
        h_central,
        h_central_half_width: h_hw,
        h_partition: partition.map(|p| p.conditional_entropy),
        ruelle_slack,
        ruelle_pass: ruelle_slack >= -tolerance,
        pesin_deviation,
        pesin_applicable,
        pesin_pass: pesin_applicable.then_some(pesin_deviation <= tolerance),
        p_logdet: suprema.p_logdet,
        upsilon: suprema.upsilon,
        lower_bound_pass_fraction,
        core_mass_fraction: cfg.core.mass_fraction(model),
        conclusive,
        total_states: locals.len(),
        tolerance,
        bias_note: "indeterminate distance bands counted inside after one refinement; reported measures are upper estimates".into(),
    })
}
