//! Unit tangent bundle with the Sasaki metric.
//!
//! A point of the bundle is a base chart point plus a unit direction; a
//! tangent vector to the bundle splits into a horizontal part (the image
//! under the bundle projection) and a vertical part (the image under the
//! connection map), both expressed as chart vectors at the base point.
//! The Sasaki inner product is the sum of the two base inner products.
//!
//! Concretely the bundle is coordinatized by `(x, y, alpha)` where
//! `alpha` is the frame angle of the direction; in a conformal chart the
//! frame angle coincides with the ordinary chart angle. The Sasaki
//! metric in these coordinates is the Kaluza-Klein form
//! `e^{2 mu}(dx^2 + dy^2) + (d alpha + omega)^2` with connection form
//! `omega = -mu_y dx + mu_x dy`, which is what the lifted metric,
//! volume, and bundle geodesics below are computed from.

use crate::error::{Error, Result};
use crate::geometry::{modular, ChartPoint, SurfaceModel};
use crate::ode;
use nalgebra::{Matrix3, SVector, Vector2, Vector3};

/// Point of the unit tangent bundle: base point plus unit direction in
/// chart components.
#[derive(Debug, Clone, Copy)]
pub struct UnitTangentState {
    pub p: ChartPoint,
    pub dir: Vector2<f64>,
}

impl UnitTangentState {
    /// Normalizes the direction to unit Riemannian length.
    pub fn new(model: &SurfaceModel, x: f64, y: f64, vx: f64, vy: f64) -> Result<Self> {
        let p = model.point(x, y)?;
        let v = Vector2::new(vx, vy);
        let n = model.norm(&p, &v)?;
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::ZeroVector);
        }
        Ok(UnitTangentState { p, dir: v / n })
    }

    /// Direction from a frame angle; in a conformal chart the unit
    /// vector at angle `alpha` has chart components
    /// `e^{-mu} (cos alpha, sin alpha)`.
    pub fn from_angle(model: &SurfaceModel, x: f64, y: f64, alpha: f64) -> Result<Self> {
        let (s, c) = alpha.sin_cos();
        Self::new(model, x, y, c, s)
    }

    pub fn frame_angle(&self) -> f64 {
        self.dir[1].atan2(self.dir[0])
    }

    /// Chart components of the unit normal (the direction rotated a
    /// quarter turn, positively oriented).
    pub fn normal(&self) -> Vector2<f64> {
        Vector2::new(-self.dir[1], self.dir[0])
    }
}

/// Tangent vector to the bundle in split form: `h` is the horizontal
/// (projection) part, `v` the vertical (connection) part, both chart
/// vectors at the base point. Vectors tangent to the unit bundle have
/// `v` orthogonal to the direction, but the container allows arbitrary
/// `v` so full tangent-bundle quantities can be expressed too.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitVector {
    pub h: Vector2<f64>,
    pub v: Vector2<f64>,
}

impl SplitVector {
    pub fn new(h: Vector2<f64>, v: Vector2<f64>) -> Self {
        SplitVector { h, v }
    }

    pub fn zero() -> Self {
        SplitVector { h: Vector2::zeros(), v: Vector2::zeros() }
    }
}

pub fn sasaki_inner(model: &SurfaceModel, p: &ChartPoint, a: &SplitVector, b: &SplitVector) -> Result<f64> {
    Ok(model.inner(p, &a.h, &b.h)? + model.inner(p, &a.v, &b.v)?)
}

pub fn sasaki_norm(model: &SurfaceModel, p: &ChartPoint, a: &SplitVector) -> Result<f64> {
    Ok(sasaki_inner(model, p, a, a)?.sqrt())
}

/// Connection form `omega = -mu_y dx + mu_x dy` evaluated on a chart
/// vector; the frame angle of a parallel field changes by `-omega`
/// along the base curve.
pub(crate) fn connection_form(model: &SurfaceModel, p: &ChartPoint, h: &Vector2<f64>) -> f64 {
    let j = model.mu_jet(p.x, p.y);
    -j.y * h[0] + j.x * h[1]
}

/// Split form of the bundle-chart velocity `(dx, dy, dalpha)` at `state`.
pub fn split_from_chart(
    model: &SurfaceModel,
    state: &UnitTangentState,
    vel: &Vector3<f64>,
) -> SplitVector {
    let h = Vector2::new(vel[0], vel[1]);
    let coeff = vel[2] + connection_form(model, &state.p, &h);
    SplitVector { h, v: state.normal() * coeff }
}

/// Bundle-chart velocity `(dx, dy, dalpha)` matching a split vector whose
/// vertical part is orthogonal to the direction.
pub fn chart_from_split(
    model: &SurfaceModel,
    state: &UnitTangentState,
    xi: &SplitVector,
) -> Result<Vector3<f64>> {
    let n = state.normal();
    let coeff = model.inner(&state.p, &xi.v, &n)? / model.inner(&state.p, &n, &n)?;
    let alpha_dot = coeff - connection_form(model, &state.p, &xi.h);
    Ok(Vector3::new(xi.h[0], xi.h[1], alpha_dot))
}

/// Wrap an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut r = a % two_pi;
    if r <= -std::f64::consts::PI {
        r += two_pi;
    } else if r > std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

// ---------------------------------------------------------------------------
// Lifted metric and bundle geodesics.
// ---------------------------------------------------------------------------

/// Sasaki metric in bundle-chart coordinates `(x, y, alpha)`.
pub fn lifted_metric(model: &SurfaceModel, x: f64, y: f64) -> Matrix3<f64> {
    let j = model.mu_jet(x, y);
    let lam = (2.0 * j.v).exp();
    let (a, b) = (-j.y, j.x);
    Matrix3::new(
        lam + a * a, a * b, a,
        a * b, lam + b * b, b,
        a, b, 1.0,
    )
}

/// Metric and its chart partials `(G, dG/dx, dG/dy)`; the metric does
/// not depend on `alpha`.
pub fn lifted_metric_jet(model: &SurfaceModel, x: f64, y: f64) -> (Matrix3<f64>, Matrix3<f64>, Matrix3<f64>) {
    let j = model.mu_jet(x, y);
    let lam = (2.0 * j.v).exp();
    let (a, b) = (-j.y, j.x);
    let (ax, ay) = (-j.xy, -j.yy);
    let (bx, by) = (j.xx, j.xy);
    let (lx, ly) = (2.0 * j.x * lam, 2.0 * j.y * lam);
    let g = Matrix3::new(
        lam + a * a, a * b, a,
        a * b, lam + b * b, b,
        a, b, 1.0,
    );
    let gx = Matrix3::new(
        lx + 2.0 * a * ax, ax * b + a * bx, ax,
        ax * b + a * bx, lx + 2.0 * b * bx, bx,
        ax, bx, 0.0,
    );
    let gy = Matrix3::new(
        ly + 2.0 * a * ay, ay * b + a * by, ay,
        ay * b + a * by, ly + 2.0 * b * by, by,
        ay, by, 0.0,
    );
    (g, gx, gy)
}

/// Christoffel symbols of the lifted metric, indexed `[k][i][j]`.
pub fn lifted_christoffel(model: &SurfaceModel, x: f64, y: f64) -> Result<[[[f64; 3]; 3]; 3]> {
    let (g, gx, gy) = lifted_metric_jet(model, x, y);
    let ginv = g.try_inverse().ok_or(Error::Numerical {
        stage: "lifted metric",
        detail: format!("metric not invertible at ({x}, {y})"),
    })?;
    let dg = [gx, gy, Matrix3::zeros()];
    let mut gamma = [[[0.0; 3]; 3]; 3];
    for k in 0..3 {
        for i in 0..3 {
            for jj in 0..3 {
                let mut s = 0.0;
                for l in 0..3 {
                    s += ginv[(k, l)] * (dg[i][(l, jj)] + dg[jj][(l, i)] - dg[l][(i, jj)]);
                }
                gamma[k][i][jj] = 0.5 * s;
            }
        }
    }
    Ok(gamma)
}

/// Riemannian volume density of the lifted metric per chart volume
/// `dx dy dalpha`; equals `e^{2 mu}`, the invariant measure density.
pub fn liouville_chart_density(model: &SurfaceModel, x: f64, y: f64) -> f64 {
    (2.0 * model.mu_jet(x, y).v).exp()
}

pub const DEFAULT_BUNDLE_EXP_STEP: f64 = 2e-3;

/// Exponential map of the lifted metric: follow the bundle geodesic with
/// initial velocity `xi` for time `t`.
pub fn bundle_exp(
    model: &SurfaceModel,
    theta: &UnitTangentState,
    xi: &SplitVector,
    t: f64,
    step: f64,
) -> Result<UnitTangentState> {
    model.check_point(&theta.p)?;
    let vel = chart_from_split(model, theta, xi)?;
    let q0 = SVector::<f64, 6>::new(
        theta.p.x,
        theta.p.y,
        theta.frame_angle(),
        vel[0],
        vel[1],
        vel[2],
    );
    let speed = sasaki_norm(model, &theta.p, xi)?;
    if speed * t.abs() == 0.0 {
        return Ok(*theta);
    }
    let m = model.clone();
    let rhs = move |q: &SVector<f64, 6>| {
        let gamma = match lifted_christoffel(&m, q[0], q[1]) {
            Ok(g) => g,
            Err(_) => return SVector::<f64, 6>::repeat(f64::NAN),
        };
        let qd = [q[3], q[4], q[5]];
        let mut acc = [0.0; 3];
        for k in 0..3 {
            let mut s = 0.0;
            for i in 0..3 {
                for jj in 0..3 {
                    s += gamma[k][i][jj] * qd[i] * qd[jj];
                }
            }
            acc[k] = -s;
        }
        SVector::<f64, 6>::new(q[3], q[4], q[5], acc[0], acc[1], acc[2])
    };
    let mut q = q0;
    let n = ((t.abs() * speed.max(1.0)) / step).ceil().max(1.0) as usize;
    let h = t / n as f64;
    for _ in 0..n {
        q = ode::rk4_step(&rhs, &q, h);
        if !q.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical {
                stage: "bundle exponential",
                detail: "geodesic left the chart".into(),
            });
        }
    }
    UnitTangentState::from_angle(model, q[0], q[1], q[2])
}

const EXP_INV_CAP: usize = 80;
const EXP_INV_TOL: f64 = 1e-12;
const EXP_INV_DAMP: f64 = 0.9;

/// Inverse of the bundle exponential at `theta` for a target in a small
/// neighborhood: the split vector `xi` with `bundle_exp(theta, xi, 1) =
/// target`. Damped fixed-point iteration; valid well inside the
/// injectivity radius, which is where every caller lives.
pub fn bundle_exp_inverse(
    model: &SurfaceModel,
    theta: &UnitTangentState,
    target: &UnitTangentState,
    guess: Option<SplitVector>,
) -> Result<SplitVector> {
    let chart_delta = |a: &UnitTangentState, b: &UnitTangentState| {
        Vector3::new(
            b.p.x - a.p.x,
            b.p.y - a.p.y,
            wrap_angle(b.frame_angle() - a.frame_angle()),
        )
    };
    let mut xi = match guess {
        Some(g) => g,
        None => split_from_chart(model, theta, &chart_delta(theta, target)),
    };
    for _ in 0..EXP_INV_CAP {
        let reached = bundle_exp(model, theta, &xi, 1.0, DEFAULT_BUNDLE_EXP_STEP)?;
        let delta = chart_delta(&reached, target);
        let err = delta.norm();
        if err < EXP_INV_TOL {
            return Ok(xi);
        }
        let corr = split_from_chart(model, theta, &delta);
        xi = SplitVector::new(xi.h + corr.h * EXP_INV_DAMP, xi.v + corr.v * EXP_INV_DAMP);
        if !xi.h.iter().chain(xi.v.iter()).all(|v| v.is_finite()) {
            break;
        }
    }
    Err(Error::NonConvergence {
        stage: "bundle exponential inverse",
        detail: "target outside the contraction neighborhood".into(),
    })
}

// ---------------------------------------------------------------------------
// Lifted sectional curvature.
// ---------------------------------------------------------------------------

const ADMISSIBLE_TOL: f64 = 1e-9;

/// Sectional curvature of the lifted metric on the plane spanned by the
/// admissible orthonormal pair `xi1 = (v1, w1)`, `xi2 = (v2, w2)` at the
/// bundle point with base `p` and unit direction `v`.
///
/// Admissibility means `|v_i|^2 + |w_i|^2 = 1` and
/// `<v1, v2> = <w1, w2> = 0`; violations are rejected, as are pairs
/// spanning a degenerate plane.
pub fn lifted_sectional(
    model: &SurfaceModel,
    p: &ChartPoint,
    v: &Vector2<f64>,
    xi1: &SplitVector,
    xi2: &SplitVector,
) -> Result<f64> {
    model.check_point(p)?;
    let vn = model.norm(p, v)?;
    if (vn - 1.0).abs() > ADMISSIBLE_TOL {
        return Err(Error::NotAdmissible(format!(
            "base direction must be unit length, got {vn}"
        )));
    }
    let ip = |a: &Vector2<f64>, b: &Vector2<f64>| model.inner(p, a, b).expect("checked point");
    let n1 = ip(&xi1.h, &xi1.h) + ip(&xi1.v, &xi1.v);
    let n2 = ip(&xi2.h, &xi2.h) + ip(&xi2.v, &xi2.v);
    if (n1 - 1.0).abs() > ADMISSIBLE_TOL || (n2 - 1.0).abs() > ADMISSIBLE_TOL {
        return Err(Error::NotAdmissible(format!(
            "plane basis must be unit length, got squared norms {n1}, {n2}"
        )));
    }
    let hh = ip(&xi1.h, &xi2.h);
    let vv = ip(&xi1.v, &xi2.v);
    if hh.abs() > ADMISSIBLE_TOL || vv.abs() > ADMISSIBLE_TOL {
        return Err(Error::NotAdmissible(format!(
            "plane basis must have orthogonal parts, got <v1,v2> = {hh}, <w1,w2> = {vv}"
        )));
    }
    // admissible pairs are Sasaki-orthonormal, hence independent
    let (v1, w1, v2, w2) = (&xi1.h, &xi1.v, &xi2.h, &xi2.v);
    let r = |a: &Vector2<f64>, b: &Vector2<f64>, c: &Vector2<f64>| {
        model.riemann_apply(p, a, b, c).expect("checked point")
    };
    let dr = |d: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>, c: &Vector2<f64>| {
        model.riemann_derivative_apply(p, d, a, b, c).expect("checked point")
    };
    let r1212 = ip(&r(v1, v2, v1), v2);
    let r12w = 3.0 * ip(&r(v1, v2, w1), w2);
    let wnorm = ip(w1, w1) * ip(w2, w2);
    let rv = r(v1, v2, v);
    let t4 = -0.75 * ip(&rv, &rv);
    let a1 = r(v, w2, v1);
    let a2 = r(v, w1, v2);
    let t5 = 0.25 * ip(&a1, &a1);
    let t6 = 0.25 * ip(&a2, &a2);
    let t7 = 0.5 * ip(&r(v, w1, w2), &a1);
    let t8 = -ip(&r(v, w1, v1), &r(v, w2, v2));
    let t9 = ip(&dr(v1, v, w2, v2), v1);
    let t10 = ip(&dr(v2, v, w1, v1), v2);
    Ok(r1212 + r12w + wnorm + t4 + t5 + t6 + t7 + t8 + t9 + t10)
}

// ---------------------------------------------------------------------------
// Distances.
// ---------------------------------------------------------------------------

/// Two-sided bracket on a distance; `lower == upper` when the value is
/// exact to quadrature accuracy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceBound {
    pub lower: f64,
    pub upper: f64,
}

/// Hyperbolic half-plane distance at curvature -1, stable for nearby
/// points: `2 asinh(|z - w| / (2 sqrt(y1 y2)))`.
fn hyperbolic_distance(x1: f64, y1: f64, x2: f64, y2: f64) -> f64 {
    let dx = x2 - x1;
    let dy = y2 - y1;
    let q = (dx * dx + dy * dy).sqrt() / (2.0 * (y1 * y2).sqrt());
    2.0 * q.asinh()
}

/// Composite Simpson quadrature of `f` over `[a, b]`.
fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, intervals: usize) -> f64 {
    let n = intervals.max(2) & !1;
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + h * i as f64);
    }
    acc * h / 3.0
}

/// Parametrization of the curvature `-1` geodesic between two half-plane
/// points: returns points and unit-speed derivative scale for quadrature
/// in an arc parameter `u` on `[0, 1]`.
struct HalfPlaneArc {
    vertical: bool,
    // vertical: x fixed, y = y1 * exp(u * span)
    x0: f64,
    y1: f64,
    span: f64,
    // circular: center and angles
    cx: f64,
    r: f64,
    phi1: f64,
    phi2: f64,
}

impl HalfPlaneArc {
    fn between(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        if (x2 - x1).abs() < 1e-13 * (1.0 + x1.abs() + x2.abs()) {
            HalfPlaneArc {
                vertical: true,
                x0: 0.5 * (x1 + x2),
                y1,
                span: (y2 / y1).ln(),
                cx: 0.0,
                r: 0.0,
                phi1: 0.0,
                phi2: 0.0,
            }
        } else {
            let cx = (x2 * x2 + y2 * y2 - x1 * x1 - y1 * y1) / (2.0 * (x2 - x1));
            let r = ((x1 - cx) * (x1 - cx) + y1 * y1).sqrt();
            let phi1 = y1.atan2(x1 - cx);
            let phi2 = y2.atan2(x2 - cx);
            HalfPlaneArc { vertical: false, x0: 0.0, y1: 0.0, span: 0.0, cx, r, phi1, phi2 }
        }
    }

    fn point(&self, u: f64) -> (f64, f64) {
        if self.vertical {
            (self.x0, self.y1 * (u * self.span).exp())
        } else {
            let phi = self.phi1 + u * (self.phi2 - self.phi1);
            (self.cx + self.r * phi.cos(), self.r * phi.sin())
        }
    }

    /// Chart velocity at parameter `u` (derivative with respect to `u`).
    fn velocity(&self, u: f64) -> (f64, f64) {
        if self.vertical {
            (0.0, self.y1 * self.span * (u * self.span).exp())
        } else {
            let phi = self.phi1 + u * (self.phi2 - self.phi1);
            let dphi = self.phi2 - self.phi1;
            (-self.r * phi.sin() * dphi, self.r * phi.cos() * dphi)
        }
    }

    /// Frame-angle change of parallel transport along the arc for the
    /// curvature `-1` metric: `-int dx / y`.
    fn transport_angle(&self) -> f64 {
        if self.vertical {
            0.0
        } else {
            self.phi2 - self.phi1
        }
    }
}

const PERTURBED_QUAD_INTERVALS: usize = 128;

/// Distance between base points of one model: exact for the constant
/// models and the quotient, bracketed by the conformal comparison for
/// the perturbed model (upper refined by quadrature along the reference
/// geodesic).
pub fn base_distance(model: &SurfaceModel, p: &ChartPoint, q: &ChartPoint) -> Result<DistanceBound> {
    model.check_point(p)?;
    model.check_point(q)?;
    match model {
        SurfaceModel::Flat => {
            let d = (p.coords() - q.coords()).norm();
            Ok(DistanceBound { lower: d, upper: d })
        }
        SurfaceModel::HyperbolicConstant { c } => {
            let d = hyperbolic_distance(p.x, p.y, q.x, q.y) / c;
            Ok(DistanceBound { lower: d, upper: d })
        }
        SurfaceModel::Modular => {
            let mut best = f64::INFINITY;
            let (px, py, _) = modular::reduce(p.x, p.y);
            let (qx, qy, _) = modular::reduce(q.x, q.y);
            for g in modular::short_candidates() {
                let (mx, my) = modular::moebius(g, px, py);
                best = best.min(hyperbolic_distance(mx, my, qx, qy));
            }
            Ok(DistanceBound { lower: best, upper: best })
        }
        SurfaceModel::PerturbedHyperbolic(param) => {
            let d_ref = hyperbolic_distance(p.x, p.y, q.x, q.y) / param.c;
            let amp = param.amp_bound;
            let arc = HalfPlaneArc::between(p.x, p.y, q.x, q.y);
            let m = model.clone();
            let integrand = |u: f64| {
                let (x, y) = arc.point(u);
                let (vx, vy) = arc.velocity(u);
                let mu = m.mu_jet(x, y).v;
                // e^{mu} |velocity|: the perturbed length element along
                // the reference path
                mu.exp() * (vx * vx + vy * vy).sqrt()
            };
            let quad = if d_ref > 0.0 {
                simpson(integrand, 0.0, 1.0, PERTURBED_QUAD_INTERVALS)
            } else {
                0.0
            };
            let upper = quad.min(amp.exp() * d_ref);
            Ok(DistanceBound { lower: (-amp).exp() * d_ref, upper })
        }
    }
}

/// Frame-angle change of parallel transport along the reference base
/// path from `p` to `q` (the model geodesic for the constant models, the
/// curvature-reference geodesic for the perturbed model).
pub fn transport_angle(model: &SurfaceModel, p: &ChartPoint, q: &ChartPoint) -> Result<f64> {
    model.check_point(p)?;
    model.check_point(q)?;
    match model {
        SurfaceModel::Flat => Ok(0.0),
        SurfaceModel::HyperbolicConstant { .. } | SurfaceModel::Modular => {
            Ok(HalfPlaneArc::between(p.x, p.y, q.x, q.y).transport_angle())
        }
        SurfaceModel::PerturbedHyperbolic(_) => {
            let arc = HalfPlaneArc::between(p.x, p.y, q.x, q.y);
            let m = model.clone();
            // omega = -mu_y dx + mu_x dy; the constant part integrates to
            // the arc angle, the bump part by quadrature on the full form.
            let integrand = |u: f64| {
                let (x, y) = arc.point(u);
                let (vx, vy) = arc.velocity(u);
                let j = m.mu_jet(x, y);
                -(-j.y * vx + j.x * vy)
            };
            Ok(simpson(integrand, 0.0, 1.0, PERTURBED_QUAD_INTERVALS))
        }
    }
}

/// Internal: bounds for one concrete lift (no quotient minimization).
fn sm_distance_bounds_lift(
    model: &SurfaceModel,
    a: &UnitTangentState,
    b: &UnitTangentState,
) -> Result<(DistanceBound, f64)> {
    let base = base_distance(model, &a.p, &b.p)?;
    let t = transport_angle(model, &a.p, &b.p)?;
    let gap = wrap_angle(b.frame_angle() - a.frame_angle() - t);
    let upper = (base.upper * base.upper + gap * gap).sqrt();
    Ok((DistanceBound { lower: base.lower, upper }, gap))
}

/// Two-sided bracket on the Sasaki distance between bundle points.
///
/// Lower bound: the bundle projection is distance-nonincreasing, so the
/// base distance bounds from below. Upper bound: follow the reference
/// base path while turning the fiber angle linearly; its length is the
/// hypotenuse of base length and transported angle gap.
pub fn sm_distance_bounds(
    model: &SurfaceModel,
    a: &UnitTangentState,
    b: &UnitTangentState,
) -> Result<DistanceBound> {
    if matches!(model, SurfaceModel::Modular) {
        let mut best = DistanceBound { lower: f64::INFINITY, upper: f64::INFINITY };
        for (ga, gb) in modular_lift_pairs(model, a, b)? {
            let (bd, _) = sm_distance_bounds_lift(model, &ga, &gb)?;
            best.lower = best.lower.min(bd.lower);
            best.upper = best.upper.min(bd.upper);
        }
        Ok(best)
    } else {
        Ok(sm_distance_bounds_lift(model, a, b)?.0)
    }
}

/// All candidate lift pairings used for quotient distances: reduce both
/// states, then move the first through the short group elements.
fn modular_lift_pairs(
    model: &SurfaceModel,
    a: &UnitTangentState,
    b: &UnitTangentState,
) -> Result<Vec<(UnitTangentState, UnitTangentState)>> {
    let ra = reduce_state(model, a)?;
    let rb = reduce_state(model, b)?;
    let mut out = Vec::with_capacity(modular::short_candidates().len());
    for g in modular::short_candidates() {
        let (x, y) = modular::moebius(g, ra.p.x, ra.p.y);
        if !(y > 1e-300) {
            continue;
        }
        let v = modular::moebius_push_vector(g, ra.p.x, ra.p.y, &ra.dir);
        let Ok(st) = UnitTangentState::new(model, x, y, v[0], v[1]) else { continue };
        out.push((st, rb));
    }
    Ok(out)
}

/// Reduce a modular bundle state into the fundamental domain, pushing
/// the direction through the group element.
pub fn reduce_state(model: &SurfaceModel, a: &UnitTangentState) -> Result<UnitTangentState> {
    let (x, y, g) = modular::reduce(a.p.x, a.p.y);
    let v = modular::moebius_push_vector(&g, a.p.x, a.p.y, &a.dir);
    UnitTangentState::new(model, x, y, v[0], v[1])
}

/// Verdict of a ball membership test that respects the two-sided
/// distance bracket.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BallVerdict {
    Inside,
    Outside,
    Indeterminate,
}

/// Test whether `probe` lies within Sasaki distance `r` of `center`,
/// with a certified outside test that accounts for holonomy: a path of
/// length below `r` encloses (against the reference path) a region of
/// area at most the isoperimetric bound, so the transported angle gap
/// can be trusted up to `K_max r^2 / pi` and the hypotenuse lower bound
/// applies with the gap shrunk by that slack.
pub fn ball_verdict(
    model: &SurfaceModel,
    center: &UnitTangentState,
    probe: &UnitTangentState,
    r: f64,
) -> Result<BallVerdict> {
    let k_max = model.curvature_bounds().0.abs().max(model.curvature_bounds().1.abs());
    let slack = 1.5 * k_max * r * r / std::f64::consts::PI;
    let verdict_for = |bd: DistanceBound, gap: f64| {
        if bd.upper < r {
            BallVerdict::Inside
        } else {
            let g = (gap.abs() - slack).max(0.0);
            let certified = (bd.lower * bd.lower + g * g).sqrt();
            if certified >= r || bd.lower >= r {
                BallVerdict::Outside
            } else {
                BallVerdict::Indeterminate
            }
        }
    };
    if matches!(model, SurfaceModel::Modular) {
        // inside if any lift is inside; outside only if every lift is
        let mut all_outside = true;
        for (ga, gb) in modular_lift_pairs(model, center, probe)? {
            let (bd, gap) = sm_distance_bounds_lift(model, &ga, &gb)?;
            match verdict_for(bd, gap) {
                BallVerdict::Inside => return Ok(BallVerdict::Inside),
                BallVerdict::Outside => {}
                BallVerdict::Indeterminate => all_outside = false,
            }
        }
        Ok(if all_outside { BallVerdict::Outside } else { BallVerdict::Indeterminate })
    } else {
        let (bd, gap) = sm_distance_bounds_lift(model, center, probe)?;
        Ok(verdict_for(bd, gap))
    }
}

/// Parallel transport of a chart vector along the reference base path
/// from `p` to `q`, computed by integrating the transport equation with
/// the model Christoffels. Used to cross-check the closed-form angle.
pub fn transport_vector_numeric(
    model: &SurfaceModel,
    p: &ChartPoint,
    q: &ChartPoint,
    v: &Vector2<f64>,
    steps: usize,
) -> Result<Vector2<f64>> {
    model.check_point(p)?;
    model.check_point(q)?;
    if matches!(model, SurfaceModel::Flat) {
        return Ok(*v);
    }
    let arc = HalfPlaneArc::between(p.x, p.y, q.x, q.y);
    let m = model.clone();
    let rhs = move |s: &SVector<f64, 3>| {
        // s = (u, v_x, v_y); du/dt = 1
        let u = s[0];
        let (x, y) = arc.point(u);
        let (cx, cy) = arc.velocity(u);
        let pt = ChartPoint { x, y, model: m.id() };
        let gamma = m.christoffel_at(&pt).expect("interior point");
        let mut dv = [0.0; 2];
        let vel = [cx, cy];
        let vv = [s[1], s[2]];
        for k in 0..2 {
            let mut acc = 0.0;
            for i in 0..2 {
                for jj in 0..2 {
                    acc += gamma[k][i][jj] * vel[i] * vv[jj];
                }
            }
            dv[k] = -acc;
        }
        SVector::<f64, 3>::new(1.0, dv[0], dv[1])
    };
    let mut s = SVector::<f64, 3>::new(0.0, v[0], v[1]);
    let h = 1.0 / steps as f64;
    for _ in 0..steps {
        s = ode::rk4_step(&rhs, &s, h);
    }
    Ok(Vector2::new(s[1], s[2]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn hc1() -> SurfaceModel {
        SurfaceModel::hyperbolic(1.0).unwrap()
    }

    #[test]
    fn unit_state_normalizes() {
        let m = hc1();
        let s = UnitTangentState::new(&m, 0.0, 2.0, 3.0, 0.0).unwrap();
        assert_relative_eq!(m.norm(&s.p, &s.dir).unwrap(), 1.0, max_relative = 1e-14);
        assert_relative_eq!(s.dir[0], 2.0, max_relative = 1e-14);
        assert!(UnitTangentState::new(&m, 0.0, 1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn frame_angle_round_trip() {
        let m = hc1();
        for k in 0..8 {
            let alpha = -3.0 + 0.8 * k as f64;
            let s = UnitTangentState::from_angle(&m, 0.3, 1.7, alpha).unwrap();
            assert_relative_eq!(wrap_angle(s.frame_angle() - alpha), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn split_chart_round_trip() {
        let m = SurfaceModel::perturbed_hyperbolic(1.0, 0.1, crate::geometry::default_bumps()).unwrap();
        let s = UnitTangentState::from_angle(&m, 0.4, 1.3, 0.9).unwrap();
        let vel = Vector3::new(0.2, -0.1, 0.35);
        let xi = split_from_chart(&m, &s, &vel);
        let back = chart_from_split(&m, &s, &xi).unwrap();
        assert_relative_eq!(back[0], vel[0], epsilon = 1e-12);
        assert_relative_eq!(back[1], vel[1], epsilon = 1e-12);
        assert_relative_eq!(back[2], vel[2], epsilon = 1e-12);
    }

    #[test]
    fn sasaki_metric_matches_split_inner() {
        // the quadratic form of the lifted matrix must agree with the
        // split-form inner product on arbitrary chart velocities
        let m = SurfaceModel::perturbed_hyperbolic(1.0, 0.1, crate::geometry::default_bumps()).unwrap();
        let s = UnitTangentState::from_angle(&m, -0.6, 2.1, 1.4).unwrap();
        let g = lifted_metric(&m, s.p.x, s.p.y);
        for vel in [
            Vector3::new(0.3, 0.0, -0.2),
            Vector3::new(0.0, 0.5, 0.1),
            Vector3::new(-0.2, 0.4, 0.7),
        ] {
            let xi = split_from_chart(&m, &s, &vel);
            let quad = (g * vel).dot(&vel);
            let split = sasaki_inner(&m, &s.p, &xi, &xi).unwrap();
            assert_relative_eq!(quad, split, max_relative = 1e-12);
        }
    }

    #[test]
    fn vertical_fiber_has_unit_speed() {
        let m = hc1();
        let s = UnitTangentState::from_angle(&m, 0.0, 1.0, 0.2).unwrap();
        let xi = split_from_chart(&m, &s, &Vector3::new(0.0, 0.0, 1.0));
        assert_relative_eq!(sasaki_norm(&m, &s.p, &xi).unwrap(), 1.0, max_relative = 1e-12);
    }

    #[test]
    fn bundle_exp_pure_fiber_rotation() {
        let m = hc1();
        let s = UnitTangentState::from_angle(&m, 0.2, 1.5, 0.3).unwrap();
        let xi = split_from_chart(&m, &s, &Vector3::new(0.0, 0.0, 1.0));
        let out = bundle_exp(&m, &s, &xi, 0.7, 1e-3).unwrap();
        assert_relative_eq!(out.p.x, s.p.x, epsilon = 1e-9);
        assert_relative_eq!(out.p.y, s.p.y, epsilon = 1e-9);
        assert_relative_eq!(
            wrap_angle(out.frame_angle() - s.frame_angle() - 0.7),
            0.0,
            epsilon = 1e-9
        );
    }

    #[test]
    fn bundle_exp_inverse_round_trip() {
        let m = hc1();
        let s = UnitTangentState::from_angle(&m, 0.1, 1.2, -0.4).unwrap();
        let xi = split_from_chart(&m, &s, &Vector3::new(0.06, -0.04, 0.08));
        let target = bundle_exp(&m, &s, &xi, 1.0, 1e-3).unwrap();
        let rec = bundle_exp_inverse(&m, &s, &target, None).unwrap();
        assert_relative_eq!(rec.h[0], xi.h[0], epsilon = 1e-8);
        assert_relative_eq!(rec.h[1], xi.h[1], epsilon = 1e-8);
        assert_relative_eq!(rec.v[0], xi.v[0], epsilon = 1e-8);
        assert_relative_eq!(rec.v[1], xi.v[1], epsilon = 1e-8);
    }

    #[test]
    fn lifted_sectional_rejects_bad_bases() {
        let m = hc1();
        let p = m.point(0.0, 1.0).unwrap();
        let v = Vector2::new(1.0, 0.0);
        let xi1 = SplitVector::new(Vector2::new(1.0, 0.0), Vector2::zeros());
        let xi2 = SplitVector::new(Vector2::new(0.0, 1.0), Vector2::zeros());
        assert!(lifted_sectional(&m, &p, &v, &xi1, &xi2).is_ok());
        let long = SplitVector::new(Vector2::new(2.0, 0.0), Vector2::zeros());
        assert!(matches!(
            lifted_sectional(&m, &p, &v, &long, &xi2),
            Err(Error::NotAdmissible(_))
        ));
        let skew = SplitVector::new(Vector2::new(0.8, 0.6), Vector2::zeros());
        assert!(matches!(
            lifted_sectional(&m, &p, &v, &xi1, &skew),
            Err(Error::NotAdmissible(_))
        ));
    }

    #[test]
    fn lifted_sectional_horizontal_plane_closed_form() {
        // horizontal plane on a constant-curvature surface:
        // K + ... with w_i = 0 only the first and fourth terms survive:
        // K - (3/4) K^2 |v1 x v2 ... | with orthonormal v1, v2 and
        // R(v1,v2)v of norm |K|; at K = -1 the value is -1 - 3/4 = -7/4.
        let m = hc1();
        let p = m.point(0.3, 0.8).unwrap();
        let v = Vector2::new(0.8, 0.0);
        // orthonormal chart pair at y = 0.8: e1 = y ex, e2 = y ey
        let e1 = SplitVector::new(Vector2::new(0.8, 0.0), Vector2::zeros());
        let e2 = SplitVector::new(Vector2::new(0.0, 0.8), Vector2::zeros());
        let k = lifted_sectional(&m, &p, &v, &e1, &e2).unwrap();
        assert_relative_eq!(k, -1.75, max_relative = 1e-12);
    }

    #[test]
    fn lifted_sectional_flat_vertical_plane() {
        let m = SurfaceModel::flat();
        let p = m.point(0.0, 0.0).unwrap();
        let v = Vector2::new(1.0, 0.0);
        let xi1 = SplitVector::new(Vector2::zeros(), Vector2::new(1.0, 0.0));
        let xi2 = SplitVector::new(Vector2::zeros(), Vector2::new(0.0, 1.0));
        let k = lifted_sectional(&m, &p, &v, &xi1, &xi2).unwrap();
        assert_relative_eq!(k, 1.0, max_relative = 1e-12);
    }

    #[test]
    fn base_distance_vertical_points() {
        let m = hc1();
        let p = m.point(0.0, 1.0).unwrap();
        let q = m.point(0.0, std::f64::consts::E).unwrap();
        let d = base_distance(&m, &p, &q).unwrap();
        assert_relative_eq!(d.lower, 1.0, max_relative = 1e-12);
        assert_relative_eq!(d.upper, 1.0, max_relative = 1e-12);
        let m2 = SurfaceModel::hyperbolic(2.0).unwrap();
        let p2 = m2.point(0.0, 1.0).unwrap();
        let q2 = m2.point(0.0, std::f64::consts::E).unwrap();
        assert_relative_eq!(base_distance(&m2, &p2, &q2).unwrap().lower, 0.5, max_relative = 1e-12);
    }

    #[test]
    fn perturbed_distance_band_brackets_reference() {
        let m = SurfaceModel::perturbed_hyperbolic(1.0, 0.1, crate::geometry::default_bumps()).unwrap();
        let p = m.point(0.1, 1.0).unwrap();
        let q = m.point(0.8, 1.9).unwrap();
        let d = base_distance(&m, &p, &q).unwrap();
        assert!(d.lower <= d.upper);
        assert!(d.lower > 0.0);
        let dref = hyperbolic_distance(p.x, p.y, q.x, q.y);
        let SurfaceModel::PerturbedHyperbolic(ref params) = m else { unreachable!() };
        assert!(d.lower >= (-params.amp_bound).exp() * dref - 1e-12);
        assert!(d.upper <= params.amp_bound.exp() * dref + 1e-12);
    }

    #[test]
    fn transport_angle_matches_numeric_transport() {
        for m in [
            hc1(),
            SurfaceModel::perturbed_hyperbolic(1.0, 0.1, crate::geometry::default_bumps()).unwrap(),
        ] {
            let p = m.point(-0.4, 1.1).unwrap();
            let q = m.point(0.9, 1.7).unwrap();
            let closed = transport_angle(&m, &p, &q).unwrap();
            let v = Vector2::new(1.0, 0.0);
            let moved = transport_vector_numeric(&m, &p, &q, &v, 4000).unwrap();
            let a0 = v[1].atan2(v[0]);
            let a1 = moved[1].atan2(moved[0]);
            assert_relative_eq!(wrap_angle(a1 - a0 - closed), 0.0, epsilon = 1e-6);
            // transport preserves length
            let n0 = m.norm(&p, &v).unwrap();
            let n1 = m.norm(&q, &moved).unwrap();
            assert_relative_eq!(n0, n1, max_relative = 1e-6);
        }
    }

    #[test]
    fn sm_distance_dominates_base_distance() {
        let m = hc1();
        let a = UnitTangentState::from_angle(&m, 0.0, 1.0, 0.0).unwrap();
        let b = UnitTangentState::from_angle(&m, 0.3, 1.4, 1.2).unwrap();
        let sm = sm_distance_bounds(&m, &a, &b).unwrap();
        let base = base_distance(&m, &a.p, &b.p).unwrap();
        assert!(sm.lower >= base.lower - 1e-12);
        assert!(sm.upper >= sm.lower);
        // pure fiber rotation: distance equals the angle gap
        let c = UnitTangentState::from_angle(&m, 0.0, 1.0, 0.9).unwrap();
        let fiber = sm_distance_bounds(&m, &a, &c).unwrap();
        assert_relative_eq!(fiber.upper, 0.9, max_relative = 1e-9);
    }

    #[test]
    fn ball_verdict_consistency() {
        let m = hc1();
        let c = UnitTangentState::from_angle(&m, 0.0, 1.0, 0.0).unwrap();
        let near = UnitTangentState::from_angle(&m, 0.01, 1.01, 0.02).unwrap();
        let far = UnitTangentState::from_angle(&m, 2.0, 0.3, 2.0).unwrap();
        assert_eq!(ball_verdict(&m, &c, &near, 0.1).unwrap(), BallVerdict::Inside);
        assert_eq!(ball_verdict(&m, &c, &far, 0.1).unwrap(), BallVerdict::Outside);
    }

    #[test]
    fn modular_distance_uses_quotient() {
        let m = SurfaceModel::modular();
        let a = UnitTangentState::from_angle(&m, -0.49, 1.2, 0.4).unwrap();
        // the same point shifted by the unit translation: distance zero
        let b = UnitTangentState::from_angle(&m, 0.51, 1.2, 0.4).unwrap();
        let d = sm_distance_bounds(&m, &a, &b).unwrap();
        assert!(d.upper < 1e-9, "upper = {}", d.upper);
        // but the raw half-plane distance is far from zero
        assert!(hyperbolic_distance(-0.49, 1.2, 0.51, 1.2) > 0.5);
    }

    #[test]
    fn modular_reduce_state_preserves_norm() {
        let m = SurfaceModel::modular();
        let a = UnitTangentState::new(&m, 3.7, 0.21, 0.3, 0.4).unwrap();
        let r = reduce_state(&m, &a).unwrap();
        assert!(modular::in_fundamental_domain(r.p.x, r.p.y));
        assert_relative_eq!(m.norm(&r.p, &r.dir).unwrap(), 1.0, max_relative = 1e-12);
    }
}
