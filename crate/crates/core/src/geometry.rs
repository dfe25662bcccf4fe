//! Surface models and pointwise geometry.
//!
//! Every model is presented in a single global chart with a conformal
//! metric `g = e^{2 mu} (dx^2 + dy^2)`:
//!
//! * `Flat` — the plane, `mu = 0`.
//! * `HyperbolicConstant { c }` — upper half-plane, `mu = -ln(c y)`,
//!   Gaussian curvature identically `-c^2`.
//! * `Modular` — upper half-plane at curvature `-1`, understood as the
//!   universal cover of the quotient by the integer Moebius group; the
//!   quotient structure (fundamental-domain reduction, neighbor
//!   candidates) lives in [`modular`].
//! * `PerturbedHyperbolic` — `mu = u - ln(c y)` with `u` a finite sum of
//!   bumps `A cos(k x + phase) sech^2(ln y - s0)`. All derivatives of `u`
//!   are closed-form, so curvature and its gradient are exact; bump
//!   amplitudes are scaled at construction so the curvature provably
//!   stays inside the declared pinching band.
//!
//! Long geodesics in the half-plane sink toward `y = 0` exponentially
//! fast, which underflows chart coordinates long before any interesting
//! time horizon. Flow-facing code therefore works in log-height
//! coordinates `(x, s = ln y)` with the normalized velocity
//! `(w, vs) = (e^{-s} dx/dt, ds/dt)`; in these variables the geodesic
//! field has bounded coefficients along every orbit. The conversions and
//! the right-hand sides live here so both the exponential map and the
//! flow engine share one implementation.

use crate::error::{Error, Result};
use crate::ode;
use nalgebra::{Matrix2, Vector2};

/// Christoffel symbols, indexed `[k][i][j]` for `Gamma^k_{ij}`.
pub type Christoffel = [[[f64; 2]; 2]; 2];

/// Value and partial derivatives up to third order of a scalar chart field.
#[derive(Debug, Clone, Copy, Default)]
pub struct Jet3 {
    pub v: f64,
    pub x: f64,
    pub y: f64,
    pub xx: f64,
    pub xy: f64,
    pub yy: f64,
    pub xxx: f64,
    pub xxy: f64,
    pub xyy: f64,
    pub yyy: f64,
}

/// One perturbation bump `weight * cos(wave * x + phase) * sech^2(ln y - center)`.
///
/// `weight` is relative; absolute amplitudes are derived at model
/// construction from the requested pinching fraction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bump {
    pub wave: f64,
    pub phase: f64,
    pub center: f64,
    pub weight: f64,
}

impl Bump {
    pub fn new(wave: f64, phase: f64, center: f64, weight: f64) -> Self {
        Bump { wave, phase, center, weight }
    }
}

/// Default bump profile: two incommensurate waves, one shifted off the
/// unit height so nothing lines up with coordinate axes.
pub fn default_bumps() -> Vec<Bump> {
    vec![Bump::new(1.0, 0.3, 0.0, 1.0), Bump::new(2.0, 1.1, 0.5, 0.5)]
}

// sup over s of |d^2/ds^2 sech^2 - d/ds sech^2| = sup |sech^2 (6 tanh^2 + 2 tanh - 2)|,
// observed 2.1227; grid-verified in tests.
const SECH2_DD_BOUND: f64 = 2.2;
// Fraction of the requested curvature band actually used by the bumps.
const PINCH_SAFETY: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbedParams {
    pub c: f64,
    pub eps: f64,
    /// Bumps with absolute amplitudes folded into `weight`.
    pub bumps: Vec<Bump>,
    /// Bound on |u| over the chart.
    pub amp_bound: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SurfaceModel {
    Flat,
    HyperbolicConstant { c: f64 },
    Modular,
    PerturbedHyperbolic(PerturbedParams),
}

/// Identifies the model a chart point belongs to; mixing models is a
/// caller error that the tensor operations detect and reject.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelId(pub u64);

#[derive(Debug, Clone, Copy)]
pub struct ChartPoint {
    pub x: f64,
    pub y: f64,
    pub model: ModelId,
}

impl ChartPoint {
    pub fn coords(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }
}

fn mix_bits(state: &mut u64, v: u64) {
    *state = state.wrapping_mul(0x100000001b3).wrapping_add(v.rotate_left(17)) ^ (v >> 7);
}

impl SurfaceModel {
    pub fn flat() -> Self {
        SurfaceModel::Flat
    }

    pub fn hyperbolic(c: f64) -> Result<Self> {
        if !(c > 0.0) || !c.is_finite() {
            return Err(Error::InvalidArgument {
                stage: "hyperbolic model",
                detail: format!("curvature scale must be positive, got {c}"),
            });
        }
        Ok(SurfaceModel::HyperbolicConstant { c })
    }

    pub fn modular() -> Self {
        SurfaceModel::Modular
    }

    /// Perturbed model with curvature pinched between `-(c(1+eps))^2` and
    /// `-(c(1-eps))^2`. Bump amplitudes are scaled by bisection against
    /// the closed-form worst case so the declared band holds everywhere.
    pub fn perturbed_hyperbolic(c: f64, eps: f64, bumps: Vec<Bump>) -> Result<Self> {
        if !(c > 0.0) || !c.is_finite() {
            return Err(Error::InvalidArgument {
                stage: "perturbed model",
                detail: format!("curvature scale must be positive, got {c}"),
            });
        }
        if !(eps > 0.0 && eps < 1.0) {
            return Err(Error::InvalidArgument {
                stage: "perturbed model",
                detail: format!("pinching fraction must lie in (0, 1), got {eps}"),
            });
        }
        if bumps.is_empty() || bumps.iter().any(|b| !(b.weight > 0.0) || !b.wave.is_finite()) {
            return Err(Error::InvalidArgument {
                stage: "perturbed model",
                detail: "bump list must be nonempty with positive weights".into(),
            });
        }
        // For u = sum A_j cos(k_j x + phi_j) B(s - s_j), B = sech^2:
        //   |u|            <= sum A_j
        //   |y^2 lap u|    <= sum A_j (4 k_j^2 e^{2 s_j} + SECH2_DD_BOUND)
        // and K / (-c^2) = e^{-2u} (1 + y^2 lap u), so the band constraint
        // is monotone in the common amplitude scale.
        let hi = (1.0 + eps) * (1.0 + eps);
        let lo = (1.0 - eps) * (1.0 - eps);
        let target_hi = 1.0 + (hi - 1.0) * PINCH_SAFETY;
        let target_lo = 1.0 - (1.0 - lo) * PINCH_SAFETY;
        let sum_w: f64 = bumps.iter().map(|b| b.weight).sum();
        let sum_lap: f64 = bumps
            .iter()
            .map(|b| b.weight * (4.0 * b.wave * b.wave * (2.0 * b.center).exp() + SECH2_DD_BOUND))
            .sum();
        let fits = |scale: f64| {
            let u = scale * sum_w;
            let s = scale * sum_lap;
            s < 1.0 && (2.0 * u).exp() * (1.0 + s) <= target_hi && (-2.0 * u).exp() * (1.0 - s) >= target_lo
        };
        let mut lo_s = 0.0;
        let mut hi_s = 1.0;
        while fits(hi_s) {
            hi_s *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo_s + hi_s);
            if fits(mid) {
                lo_s = mid;
            } else {
                hi_s = mid;
            }
        }
        let scale = lo_s;
        let scaled = bumps
            .iter()
            .map(|b| Bump { weight: b.weight * scale, ..*b })
            .collect::<Vec<_>>();
        Ok(SurfaceModel::PerturbedHyperbolic(PerturbedParams {
            c,
            eps,
            amp_bound: scale * sum_w,
            bumps: scaled,
        }))
    }

    pub fn id(&self) -> ModelId {
        let mut h = 0xcbf29ce484222325u64;
        match self {
            SurfaceModel::Flat => mix_bits(&mut h, 1),
            SurfaceModel::HyperbolicConstant { c } => {
                mix_bits(&mut h, 2);
                mix_bits(&mut h, c.to_bits());
            }
            SurfaceModel::Modular => mix_bits(&mut h, 3),
            SurfaceModel::PerturbedHyperbolic(p) => {
                mix_bits(&mut h, 4);
                mix_bits(&mut h, p.c.to_bits());
                mix_bits(&mut h, p.eps.to_bits());
                for b in &p.bumps {
                    mix_bits(&mut h, b.wave.to_bits());
                    mix_bits(&mut h, b.phase.to_bits());
                    mix_bits(&mut h, b.center.to_bits());
                    mix_bits(&mut h, b.weight.to_bits());
                }
            }
        }
        ModelId(h)
    }

    /// Declared curvature range `(min, max)`.
    pub fn curvature_bounds(&self) -> (f64, f64) {
        match self {
            SurfaceModel::Flat => (0.0, 0.0),
            SurfaceModel::HyperbolicConstant { c } => (-c * c, -c * c),
            SurfaceModel::Modular => (-1.0, -1.0),
            SurfaceModel::PerturbedHyperbolic(p) => {
                let b = p.c * (1.0 + p.eps);
                let a = p.c * (1.0 - p.eps);
                (-b * b, -a * a)
            }
        }
    }

    /// Curvature scale `c` such that curvature is bounded below by `-c^2`.
    pub fn curvature_scale(&self) -> f64 {
        (-self.curvature_bounds().0).sqrt()
    }

    pub fn is_half_plane(&self) -> bool {
        !matches!(self, SurfaceModel::Flat)
    }

    pub fn chart_ok(&self, x: f64, y: f64) -> bool {
        x.is_finite() && y.is_finite() && (!self.is_half_plane() || y > 0.0)
    }

    pub fn point(&self, x: f64, y: f64) -> Result<ChartPoint> {
        if !self.chart_ok(x, y) {
            return Err(Error::ChartDomain {
                x,
                y,
                reason: if self.is_half_plane() {
                    "half-plane chart requires y > 0".into()
                } else {
                    "coordinates must be finite".into()
                },
            });
        }
        Ok(ChartPoint { x, y, model: self.id() })
    }

    pub fn check_point(&self, p: &ChartPoint) -> Result<()> {
        if p.model != self.id() {
            return Err(Error::ModelMismatch);
        }
        if !self.chart_ok(p.x, p.y) {
            return Err(Error::ChartDomain { x: p.x, y: p.y, reason: "outside chart".into() });
        }
        Ok(())
    }

    /// Sum of bump contributions to `u` and its chart partials; zero jet
    /// for the unperturbed models.
    fn bump_jet(&self, x: f64, y: f64) -> Jet3 {
        let SurfaceModel::PerturbedHyperbolic(p) = self else {
            return Jet3::default();
        };
        let s = y.ln();
        let mut j = Jet3::default();
        for b in &p.bumps {
            let a = b.weight;
            let k = b.wave;
            let sig = s - b.center;
            let t = sig.tanh();
            let b0 = sech2(sig);
            let b1 = -2.0 * t * b0;
            let b2 = b0 * (6.0 * t * t - 2.0);
            let b3 = b0 * (16.0 * t - 24.0 * t * t * t);
            let arg = k * x + b.phase;
            let (sn, cs) = arg.sin_cos();
            let (iy, iy2, iy3) = (1.0 / y, 1.0 / (y * y), 1.0 / (y * y * y));
            j.v += a * cs * b0;
            j.x += -a * k * sn * b0;
            j.y += a * cs * b1 * iy;
            j.xx += -a * k * k * cs * b0;
            j.xy += -a * k * sn * b1 * iy;
            j.yy += a * cs * (b2 - b1) * iy2;
            j.xxx += a * k * k * k * sn * b0;
            j.xxy += -a * k * k * cs * b1 * iy;
            j.xyy += -a * k * sn * (b2 - b1) * iy2;
            j.yyy += a * cs * (b3 - 3.0 * b2 + 2.0 * b1) * iy3;
        }
        j
    }

    /// Jet of the conformal exponent `mu` with `g = e^{2 mu} I`.
    pub(crate) fn mu_jet(&self, x: f64, y: f64) -> Jet3 {
        let mut j = self.bump_jet(x, y);
        let c = match self {
            SurfaceModel::Flat => return j,
            SurfaceModel::HyperbolicConstant { c } => *c,
            SurfaceModel::Modular => 1.0,
            SurfaceModel::PerturbedHyperbolic(p) => p.c,
        };
        let (iy, iy2, iy3) = (1.0 / y, 1.0 / (y * y), 1.0 / (y * y * y));
        j.v -= (c * y).ln();
        j.y -= iy;
        j.yy += iy2;
        j.yyy -= 2.0 * iy3;
        j
    }

    pub fn metric_at(&self, p: &ChartPoint) -> Result<Matrix2<f64>> {
        self.check_point(p)?;
        let lam = (2.0 * self.mu_jet(p.x, p.y).v).exp();
        Ok(Matrix2::new(lam, 0.0, 0.0, lam))
    }

    /// Riemannian inner product of chart vectors at `p`.
    pub fn inner(&self, p: &ChartPoint, u: &Vector2<f64>, v: &Vector2<f64>) -> Result<f64> {
        self.check_point(p)?;
        let lam = (2.0 * self.mu_jet(p.x, p.y).v).exp();
        Ok(lam * u.dot(v))
    }

    pub fn norm(&self, p: &ChartPoint, u: &Vector2<f64>) -> Result<f64> {
        Ok(self.inner(p, u, u)?.sqrt())
    }

    pub fn christoffel_at(&self, p: &ChartPoint) -> Result<Christoffel> {
        self.check_point(p)?;
        let j = self.mu_jet(p.x, p.y);
        let (mx, my) = (j.x, j.y);
        Ok([
            [[mx, my], [my, -mx]],
            [[-my, mx], [mx, my]],
        ])
    }

    /// Gaussian curvature `K = -e^{-2 mu} (mu_xx + mu_yy)`.
    pub fn gaussian_curvature(&self, p: &ChartPoint) -> Result<f64> {
        self.check_point(p)?;
        let j = self.mu_jet(p.x, p.y);
        Ok(-(-2.0 * j.v).exp() * (j.xx + j.yy))
    }

    /// Sectional curvature of the plane spanned by `a, b`; on a surface
    /// this is the Gaussian curvature once the plane is nondegenerate.
    pub fn curvature_at(&self, p: &ChartPoint, a: &Vector2<f64>, b: &Vector2<f64>) -> Result<f64> {
        let det = a[0] * b[1] - a[1] * b[0];
        let scale = a.norm() * b.norm();
        if !(det.abs() > 1e-12 * scale.max(1e-300)) {
            return Err(Error::DegeneratePlane);
        }
        self.gaussian_curvature(p)
    }

    /// Chart gradient `(K_x, K_y)` of the Gaussian curvature.
    pub fn curvature_chart_gradient(&self, p: &ChartPoint) -> Result<Vector2<f64>> {
        self.check_point(p)?;
        let j = self.mu_jet(p.x, p.y);
        let e = (-2.0 * j.v).exp();
        let l = j.xx + j.yy;
        let lx = j.xxx + j.xyy;
        let ly = j.xxy + j.yyy;
        Ok(Vector2::new(e * (2.0 * j.x * l - lx), e * (2.0 * j.y * l - ly)))
    }

    /// Norm of the covariant gradient of the curvature,
    /// `|grad K| = e^{-mu} sqrt(K_x^2 + K_y^2)`.
    pub fn curvature_derivative_norm(&self, p: &ChartPoint) -> Result<f64> {
        let g = self.curvature_chart_gradient(p)?;
        let mu = self.mu_jet(p.x, p.y).v;
        Ok((-mu).exp() * g.norm())
    }

    /// Curvature tensor application `R(a, b) c = K (<a,c> b - <b,c> a)`,
    /// the convention under which perpendicular Jacobi fields satisfy
    /// `j'' + K j = 0`.
    pub fn riemann_apply(
        &self,
        p: &ChartPoint,
        a: &Vector2<f64>,
        b: &Vector2<f64>,
        c: &Vector2<f64>,
    ) -> Result<Vector2<f64>> {
        let k = self.gaussian_curvature(p)?;
        let lam = (2.0 * self.mu_jet(p.x, p.y).v).exp();
        Ok((b * (a.dot(c)) - a * (b.dot(c))) * (k * lam))
    }

    /// Directional derivative of the curvature tensor,
    /// `(nabla_w R)(a, b) c = dK(w) (<a,c> b - <b,c> a)`.
    pub fn riemann_derivative_apply(
        &self,
        p: &ChartPoint,
        w: &Vector2<f64>,
        a: &Vector2<f64>,
        b: &Vector2<f64>,
        c: &Vector2<f64>,
    ) -> Result<Vector2<f64>> {
        let g = self.curvature_chart_gradient(p)?;
        let dk = g[0] * w[0] + g[1] * w[1];
        let lam = (2.0 * self.mu_jet(p.x, p.y).v).exp();
        Ok((b * (a.dot(c)) - a * (b.dot(c))) * (dk * lam))
    }

    /// Operator norm of the curvature tensor at `p`; for a surface this
    /// is `|K|`.
    pub fn riemann_norm(&self, p: &ChartPoint) -> Result<f64> {
        Ok(self.gaussian_curvature(p)?.abs())
    }
}

/// `sech^2` with large-argument stability.
fn sech2(s: f64) -> f64 {
    let c = s.cosh();
    if c.is_infinite() {
        0.0
    } else {
        1.0 / (c * c)
    }
}

/// `e^{a s} sech^2(s)` computed without overflow for `a` in `[-2, 2]`.
pub(crate) fn exp_weighted_sech2(a: f64, s: f64) -> f64 {
    if s >= 0.0 {
        let e = (-2.0 * s).exp();
        4.0 * ((a - 2.0) * s).exp() / ((1.0 + e) * (1.0 + e))
    } else {
        let e = (2.0 * s).exp();
        4.0 * ((a + 2.0) * s).exp() / ((1.0 + e) * (1.0 + e))
    }
}

// ---------------------------------------------------------------------------
// Flow-chart presentation: log-height coordinates for half-plane models.
// ---------------------------------------------------------------------------

/// Data the geodesic field needs at one flow-chart point.
#[derive(Debug, Clone, Copy)]
pub struct FlowJet {
    /// d(nu)/ds where the metric is `e^{2 nu} (e^{-2s} dx^2 + ds^2)`.
    pub nu_s: f64,
    /// `e^s * d(nu)/dx`; bounded along orbits for every shipped model.
    pub d: f64,
    /// `e^{nu}`, the speed normalization factor.
    pub enu: f64,
    /// Gaussian curvature at the point.
    pub k: f64,
}

impl SurfaceModel {
    /// Jet of the log-chart conformal factor `nu = u - ln c` at `(x, s)`.
    /// Flat model uses the identity chart and never calls this.
    pub(crate) fn flow_jet(&self, x: f64, s: f64) -> FlowJet {
        match self {
            SurfaceModel::Flat => FlowJet { nu_s: 0.0, d: 0.0, enu: 1.0, k: 0.0 },
            SurfaceModel::HyperbolicConstant { c } => {
                FlowJet { nu_s: 0.0, d: 0.0, enu: 1.0 / c, k: -c * c }
            }
            SurfaceModel::Modular => FlowJet { nu_s: 0.0, d: 0.0, enu: 1.0, k: -1.0 },
            SurfaceModel::PerturbedHyperbolic(p) => {
                let mut u = 0.0;
                let mut u_s = 0.0;
                let mut u_x_es = 0.0;
                let mut lap = 0.0;
                for b in &p.bumps {
                    let sig = s - b.center;
                    let t = sig.tanh();
                    let b0 = sech2(sig);
                    let b1 = -2.0 * t * b0;
                    let b2 = b0 * (6.0 * t * t - 2.0);
                    let arg = b.wave * x + b.phase;
                    let (sn, cs) = arg.sin_cos();
                    u += b.weight * cs * b0;
                    u_s += b.weight * cs * b1;
                    u_x_es += -b.weight * b.wave * sn
                        * (b.center.exp() * exp_weighted_sech2(1.0, sig));
                    // y^2 (u_xx + u_yy) = e^{2s} u_xx + u_ss - u_s
                    lap += -b.weight * b.wave * b.wave * cs
                        * ((2.0 * b.center).exp() * exp_weighted_sech2(2.0, sig))
                        + b.weight * cs * (b2 - b1);
                }
                let c2 = p.c * p.c;
                FlowJet {
                    nu_s: u_s,
                    d: u_x_es,
                    enu: u.exp() / p.c,
                    k: -c2 * (-2.0 * u).exp() * (1.0 + lap),
                }
            }
        }
    }

    /// Gaussian curvature addressed by log-chart coordinates.
    pub(crate) fn curvature_log_chart(&self, x: f64, s: f64) -> f64 {
        self.flow_jet(x, s).k
    }
}

/// Geodesic right-hand side in log-height coordinates
/// `(x, s, w, vs) = (x, ln y, e^{-s} x', s')`.
pub(crate) fn geodesic_rhs_log(model: &SurfaceModel, q: &nalgebra::SVector<f64, 4>) -> nalgebra::SVector<f64, 4> {
    let j = model.flow_jet(q[0], q[1]);
    let (w, vs) = (q[2], q[3]);
    nalgebra::SVector::<f64, 4>::new(
        q[1].exp() * w,
        vs,
        j.d * (vs * vs - w * w) - (2.0 * j.nu_s - 1.0) * w * vs,
        -((1.0 - j.nu_s) * w * w + 2.0 * j.d * w * vs + j.nu_s * vs * vs),
    )
}

/// Renormalize flow-chart velocity to unit Riemannian speed.
pub(crate) fn renormalize_log(model: &SurfaceModel, q: &mut nalgebra::SVector<f64, 4>) {
    let j = model.flow_jet(q[0], q[1]);
    let speed = j.enu * (q[2] * q[2] + q[3] * q[3]).sqrt();
    if speed > 0.0 && speed.is_finite() {
        q[2] /= speed;
        q[3] /= speed;
    }
}

// ---------------------------------------------------------------------------
// Exponential map.
// ---------------------------------------------------------------------------

pub const DEFAULT_EXP_STEP: f64 = 1e-3;

/// Result of one exponential-map evaluation: endpoint, unit tangent of
/// the geodesic there (chart components), and the perpendicular Jacobi
/// scalar pair `(j, j')` with data `j(0) = 0, j'(0) = 1`.
#[derive(Debug, Clone, Copy)]
pub struct ExpPoint {
    pub end: ChartPoint,
    pub tangent: Vector2<f64>,
    pub jacobi: (f64, f64),
    /// Arc length actually traversed, `t * |v|`.
    pub length: f64,
}

/// Geodesic through `p` with initial velocity `v`, followed for time `t`
/// (the exponential of `t v`). Arbitrary `v` is normalized internally.
pub fn exp_map(model: &SurfaceModel, p: &ChartPoint, v: &Vector2<f64>, t: f64, step: f64) -> Result<ChartPoint> {
    Ok(exp_full(model, p, v, t, step)?.end)
}

/// Exponential with endpoint frame and Jacobi data in one integration.
pub fn exp_full(
    model: &SurfaceModel,
    p: &ChartPoint,
    v: &Vector2<f64>,
    t: f64,
    step: f64,
) -> Result<ExpPoint> {
    model.check_point(p)?;
    let vnorm = model.norm(p, v)?;
    let duration = t * vnorm;
    if duration == 0.0 {
        let tangent = if vnorm > 0.0 { v / vnorm } else { Vector2::zeros() };
        return Ok(ExpPoint { end: *p, tangent, jacobi: (0.0, 1.0), length: 0.0 });
    }
    let dir = v / vnorm;
    match model {
        SurfaceModel::Flat => {
            let end = model.point(p.x + duration * dir[0], p.y + duration * dir[1])?;
            Ok(ExpPoint { end, tangent: dir, jacobi: (duration, 1.0), length: duration })
        }
        _ => {
            let q0 = nalgebra::SVector::<f64, 6>::new(
                p.x,
                p.y.ln(),
                dir[0] / p.y,
                dir[1] / p.y,
                0.0,
                1.0,
            );
            let m = model.clone();
            let rhs = move |y: &nalgebra::SVector<f64, 6>| {
                let base = nalgebra::SVector::<f64, 4>::new(y[0], y[1], y[2], y[3]);
                let d = geodesic_rhs_log(&m, &base);
                let k = m.curvature_log_chart(y[0], y[1]);
                nalgebra::SVector::<f64, 6>::new(d[0], d[1], d[2], d[3], y[5], -k * y[4])
            };
            let m2 = model.clone();
            let q = ode::integrate(&rhs, q0, duration, step, |state| {
                let mut base = nalgebra::SVector::<f64, 4>::new(state[0], state[1], state[2], state[3]);
                renormalize_log(&m2, &mut base);
                state[2] = base[2];
                state[3] = base[3];
            })?;
            let s = q[1];
            if s.abs() > 700.0 {
                return Err(Error::ChartUnderflow {
                    t: duration,
                    reason: "endpoint height left the representable chart range".into(),
                });
            }
            let y = s.exp();
            let end = model.point(q[0], y)?;
            Ok(ExpPoint {
                end,
                tangent: Vector2::new(q[2] * y, q[3] * y),
                jacobi: (q[4], q[5]),
                length: duration,
            })
        }
    }
}

/// Derivative of the exponential, `d(exp_p)_{t v} w` for unit `v`:
/// endpoint, image vector in chart components, and its Riemannian norm.
///
/// The component of `w` along `v` rides the Gauss lemma (unit stretch);
/// the perpendicular component scales by `j(t)/t` where `j` solves the
/// scalar Jacobi equation with `j(0) = 0, j'(0) = 1`. The operator in
/// the orthonormal frames is `diag(1, j(t)/t)`, so its norm over all
/// unit `w` is `max(1, |j(t)|/t)`.
pub fn exp_map_derivative(
    model: &SurfaceModel,
    p: &ChartPoint,
    v: &Vector2<f64>,
    t: f64,
    w: &Vector2<f64>,
) -> Result<(ChartPoint, Vector2<f64>, f64)> {
    model.check_point(p)?;
    let vnorm = model.norm(p, v)?;
    if !((vnorm - 1.0).abs() < 1e-8) {
        return Err(Error::InvalidArgument {
            stage: "exp derivative",
            detail: format!("direction must be unit length, norm {vnorm}"),
        });
    }
    let n = Vector2::new(-v[1], v[0]);
    let a = model.inner(p, w, v)?;
    let b = model.inner(p, w, &n)?;
    if t == 0.0 {
        return Ok((*p, *w, (a * a + b * b).sqrt()));
    }
    let e = exp_full(model, p, v, t, DEFAULT_EXP_STEP)?;
    let stretch = e.jacobi.0 / t;
    let en = Vector2::new(-e.tangent[1], e.tangent[0]);
    let image = e.tangent * a + en * (b * stretch);
    let norm = (a * a + b * b * stretch * stretch).sqrt();
    Ok((e.end, image, norm))
}

/// Operator norm of `d(exp_p)_{t v}` at increasing checkpoint times
/// along one geodesic, from a single continued integration:
/// `max(1, |j(t)|/t)` per time.
pub fn exp_derivative_norms(
    model: &SurfaceModel,
    p: &ChartPoint,
    v: &Vector2<f64>,
    times: &[f64],
    step: f64,
) -> Result<Vec<f64>> {
    model.check_point(p)?;
    if times.windows(2).any(|w| w[1] <= w[0]) || times.first().is_some_and(|&t| t < 0.0) {
        return Err(Error::InvalidArgument {
            stage: "exp derivative scan",
            detail: "checkpoint times must be nonnegative and strictly increasing".into(),
        });
    }
    let vnorm = model.norm(p, v)?;
    if vnorm == 0.0 {
        return Err(Error::ZeroVector);
    }
    let dir = v / vnorm;
    let mut out = Vec::with_capacity(times.len());
    if matches!(model, SurfaceModel::Flat) {
        out.resize(times.len(), 1.0);
        return Ok(out);
    }
    let mut q = nalgebra::SVector::<f64, 6>::new(p.x, p.y.ln(), dir[0] / p.y, dir[1] / p.y, 0.0, 1.0);
    let m = model.clone();
    let rhs = move |y: &nalgebra::SVector<f64, 6>| {
        let base = nalgebra::SVector::<f64, 4>::new(y[0], y[1], y[2], y[3]);
        let d = geodesic_rhs_log(&m, &base);
        let k = m.curvature_log_chart(y[0], y[1]);
        nalgebra::SVector::<f64, 6>::new(d[0], d[1], d[2], d[3], y[5], -k * y[4])
    };
    let m2 = model.clone();
    let mut now = 0.0;
    for &t in times {
        if t > now {
            q = ode::integrate(&rhs, q, t - now, step, |state| {
                let mut base = nalgebra::SVector::<f64, 4>::new(state[0], state[1], state[2], state[3]);
                renormalize_log(&m2, &mut base);
                state[2] = base[2];
                state[3] = base[3];
            })?;
            now = t;
        }
        out.push(if t == 0.0 { 1.0 } else { (q[4].abs() / t).max(1.0) });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Modular group machinery.
// ---------------------------------------------------------------------------

pub mod modular {
    //! Integer Moebius group utilities for the modular quotient: the
    //! standard fundamental domain `|x| <= 1/2, |z| >= 1`, reduction of a
    //! point (and tangent direction) into it, and the candidate group
    //! elements that can realize short distances between reduced points.

    use nalgebra::{Matrix2, Vector2};
    use std::sync::OnceLock;

    pub const REDUCE_CAP: usize = 4096;

    /// Apply a unimodular matrix to `z = x + i y` by Moebius action.
    pub fn moebius(m: &Matrix2<f64>, x: f64, y: f64) -> (f64, f64) {
        let (a, b, c, d) = (m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]);
        // (a z + b) / (c z + d) with z = x + i y
        let re_n = a * x + b;
        let im_n = a * y;
        let re_d = c * x + d;
        let im_d = c * y;
        let den = re_d * re_d + im_d * im_d;
        ((re_n * re_d + im_n * im_d) / den, (im_n * re_d - re_n * im_d) / den)
    }

    /// Derivative factor `1/(c z + d)^2` as a complex number `(re, im)`.
    pub fn moebius_derivative(m: &Matrix2<f64>, x: f64, y: f64) -> (f64, f64) {
        let (c, d) = (m[(1, 0)], m[(1, 1)]);
        let re_d = c * x + d;
        let im_d = c * y;
        // 1 / (re_d + i im_d)^2
        let dr = re_d * re_d - im_d * im_d;
        let di = 2.0 * re_d * im_d;
        let den = dr * dr + di * di;
        (dr / den, -di / den)
    }

    /// Push a chart tangent vector through the Moebius action.
    pub fn moebius_push_vector(m: &Matrix2<f64>, x: f64, y: f64, v: &Vector2<f64>) -> Vector2<f64> {
        let (dr, di) = moebius_derivative(m, x, y);
        Vector2::new(v[0] * dr - v[1] * di, v[0] * di + v[1] * dr)
    }

    pub fn in_fundamental_domain(x: f64, y: f64) -> bool {
        y > 0.0 && x.abs() <= 0.5 + 1e-12 && x * x + y * y >= 1.0 - 1e-12
    }

    /// Reduce `z` into the fundamental domain. Ties break toward
    /// `x = -1/2` on the vertical walls and toward the inversion image on
    /// the unit circle with positive real part. Returns the group element
    /// applied.
    pub fn reduce(mut x: f64, mut y: f64) -> (f64, f64, Matrix2<f64>) {
        let mut acc = Matrix2::identity();
        for _ in 0..REDUCE_CAP {
            let shift = (-x).round_ties_even();
            if shift != 0.0 {
                x += shift;
                acc = Matrix2::new(1.0, shift, 0.0, 1.0) * acc;
            }
            let r2 = x * x + y * y;
            if r2 < 1.0 - 1e-15 {
                // z -> -1/z
                let nx = -x / r2;
                let ny = y / r2;
                acc = Matrix2::new(0.0, -1.0, 1.0, 0.0) * acc;
                x = nx;
                y = ny;
                continue;
            }
            // Tie-breaks on the boundary.
            if x > 0.5 - 1e-15 {
                x -= 1.0;
                acc = Matrix2::new(1.0, -1.0, 0.0, 1.0) * acc;
                continue;
            }
            if r2 <= 1.0 + 1e-15 && x > 1e-15 {
                let nx = -x / r2;
                let ny = y / r2;
                acc = Matrix2::new(0.0, -1.0, 1.0, 0.0) * acc;
                x = nx;
                y = ny;
                continue;
            }
            return (x, y, acc);
        }
        (x, y, acc)
    }

    /// Group elements (dedup up to sign) of word length at most three in
    /// the generators; enough to realize any distance shorter than the
    /// width of a fundamental-domain neighbor.
    pub fn short_candidates() -> &'static [Matrix2<f64>] {
        static CACHE: OnceLock<Vec<Matrix2<f64>>> = OnceLock::new();
        CACHE.get_or_init(|| {
            let t = Matrix2::new(1.0, 1.0, 0.0, 1.0);
            let ti = Matrix2::new(1.0, -1.0, 0.0, 1.0);
            let s = Matrix2::new(0.0, -1.0, 1.0, 0.0);
            let gens = [t, ti, s];
            let mut out: Vec<Matrix2<f64>> = vec![Matrix2::identity()];
            let mut frontier = vec![Matrix2::identity()];
            for _ in 0..3 {
                let mut next = Vec::new();
                for m in &frontier {
                    for g in &gens {
                        let cand = g * m;
                        let seen = out.iter().any(|o| {
                            let d1: f64 = (o - cand).abs().sum();
                            let d2: f64 = (o + cand).abs().sum();
                            d1 < 1e-9 || d2 < 1e-9
                        });
                        if !seen {
                            out.push(cand);
                            next.push(cand);
                        }
                    }
                }
                frontier = next;
            }
            out
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn hc1() -> SurfaceModel {
        SurfaceModel::hyperbolic(1.0).unwrap()
    }

    #[test]
    fn metric_on_half_plane() {
        let m = hc1();
        let p = m.point(0.0, 1.0).unwrap();
        let g = m.metric_at(&p).unwrap();
        assert_relative_eq!(g[(0, 0)], 1.0, max_relative = 1e-14);
        assert_relative_eq!(g[(1, 1)], 1.0, max_relative = 1e-14);
        assert_eq!(g[(0, 1)], 0.0);

        let p2 = m.point(0.0, 2.0).unwrap();
        let g2 = m.metric_at(&p2).unwrap();
        assert_relative_eq!(g2[(0, 0)], 0.25, max_relative = 1e-14);
        assert_relative_eq!(g2[(1, 1)], 0.25, max_relative = 1e-14);
    }

    #[test]
    fn chart_rejects_lower_half_plane() {
        let m = hc1();
        assert!(matches!(m.point(0.0, 0.0), Err(Error::ChartDomain { .. })));
        assert!(matches!(m.point(0.0, -1.0), Err(Error::ChartDomain { .. })));
        assert!(m.point(0.0, 1e-9).is_ok());
        assert!(SurfaceModel::flat().point(0.0, -1.0).is_ok());
    }

    #[test]
    fn christoffel_closed_form() {
        let m = hc1();
        let p = m.point(0.3, 2.0).unwrap();
        let g = m.christoffel_at(&p).unwrap();
        let iy = 1.0 / 2.0;
        assert_relative_eq!(g[0][0][1], -iy, max_relative = 1e-14);
        assert_relative_eq!(g[0][1][0], -iy, max_relative = 1e-14);
        assert_relative_eq!(g[1][0][0], iy, max_relative = 1e-14);
        assert_relative_eq!(g[1][1][1], -iy, max_relative = 1e-14);
        assert_eq!(g[0][0][0], 0.0);
        assert_eq!(g[1][0][1], 0.0);
    }

    #[test]
    fn flat_christoffel_vanishes() {
        let m = SurfaceModel::flat();
        let p = m.point(1.0, -3.0).unwrap();
        let g = m.christoffel_at(&p).unwrap();
        for k in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    assert_eq!(g[k][i][j], 0.0);
                }
            }
        }
    }

    #[test]
    fn curvature_constant_models() {
        let m = SurfaceModel::hyperbolic(2.0).unwrap();
        let p = m.point(0.7, 0.4).unwrap();
        assert_relative_eq!(m.gaussian_curvature(&p).unwrap(), -4.0, max_relative = 1e-12);
        let f = SurfaceModel::flat();
        let q = f.point(3.0, 4.0).unwrap();
        assert_eq!(f.gaussian_curvature(&q).unwrap(), 0.0);
        let md = SurfaceModel::modular();
        let r = md.point(0.1, 1.3).unwrap();
        assert_relative_eq!(md.gaussian_curvature(&r).unwrap(), -1.0, max_relative = 1e-12);
    }

    #[test]
    fn degenerate_plane_rejected() {
        let m = hc1();
        let p = m.point(0.0, 1.0).unwrap();
        let v = Vector2::new(1.0, 1.0);
        let err = m.curvature_at(&p, &v, &(v * 2.0));
        assert!(matches!(err, Err(Error::DegeneratePlane)));
        assert!(m.curvature_at(&p, &v, &Vector2::new(0.0, 1.0)).is_ok());
    }

    #[test]
    fn curvature_gradient_vanishes_on_constant_models() {
        for m in [hc1(), SurfaceModel::modular()] {
            let p = m.point(0.2, 1.7).unwrap();
            assert!(m.curvature_derivative_norm(&p).unwrap() < 1e-12);
        }
    }

    #[test]
    fn perturbed_bounds_hold_on_grid() {
        let m = SurfaceModel::perturbed_hyperbolic(1.0, 0.1, default_bumps()).unwrap();
        let (lo, hi) = m.curvature_bounds();
        assert_relative_eq!(lo, -1.21, max_relative = 1e-12);
        assert_relative_eq!(hi, -0.81, max_relative = 1e-12);
        for i in 0..40 {
            for j in 0..40 {
                let x = -6.0 + 12.0 * (i as f64) / 39.0;
                let y = (-4.0 + 0.4 * j as f64).exp();
                let p = m.point(x, y).unwrap();
                let k = m.gaussian_curvature(&p).unwrap();
                assert!(k >= lo - 1e-12 && k <= hi + 1e-12, "K={k} at ({x},{y})");
            }
        }
    }

    #[test]
    fn bump_jet_matches_finite_differences() {
        let m = SurfaceModel::perturbed_hyperbolic(1.0, 0.1, default_bumps()).unwrap();
        let (x, y) = (0.37, 1.42);
        let j = m.mu_jet(x, y);
        let h = 1e-4;
        let f = |x: f64, y: f64| m.mu_jet(x, y).v;
        let fd_x = (f(x + h, y) - f(x - h, y)) / (2.0 * h);
        let fd_y = (f(x, y + h) - f(x, y - h)) / (2.0 * h);
        let fd_xx = (f(x + h, y) - 2.0 * f(x, y) + f(x - h, y)) / (h * h);
        let fd_yy = (f(x, y + h) - 2.0 * f(x, y) + f(x, y - h)) / (h * h);
        let fd_xy = (f(x + h, y + h) - f(x + h, y - h) - f(x - h, y + h) + f(x - h, y - h)) / (4.0 * h * h);
        assert_relative_eq!(j.x, fd_x, epsilon = 1e-7);
        assert_relative_eq!(j.y, fd_y, epsilon = 1e-7);
        assert_relative_eq!(j.xx, fd_xx, epsilon = 1e-5);
        assert_relative_eq!(j.yy, fd_yy, epsilon = 1e-5);
        assert_relative_eq!(j.xy, fd_xy, epsilon = 1e-5);
        // Third order against differences of the analytic second order.
        let gxx = |x: f64, y: f64| m.mu_jet(x, y).xx;
        let gyy = |x: f64, y: f64| m.mu_jet(x, y).yy;
        let gxy = |x: f64, y: f64| m.mu_jet(x, y).xy;
        assert_relative_eq!(j.xxx, (gxx(x + h, y) - gxx(x - h, y)) / (2.0 * h), epsilon = 1e-6);
        assert_relative_eq!(j.xxy, (gxx(x, y + h) - gxx(x, y - h)) / (2.0 * h), epsilon = 1e-6);
        assert_relative_eq!(j.xyy, (gxy(x, y + h) - gxy(x, y - h)) / (2.0 * h), epsilon = 1e-6);
        assert_relative_eq!(j.yyy, (gyy(x, y + h) - gyy(x, y - h)) / (2.0 * h), epsilon = 1e-6);
    }

    #[test]
    fn sech2_dd_bound_is_safe() {
        let mut worst: f64 = 0.0;
        for i in 0..20000 {
            let s = -10.0 + 20.0 * (i as f64) / 19999.0;
            let t = s.tanh();
            let b0 = sech2(s);
            let b1 = -2.0 * t * b0;
            let b2 = b0 * (6.0 * t * t - 2.0);
            worst = worst.max((b2 - b1).abs());
        }
        assert!(worst < SECH2_DD_BOUND, "observed {worst}");
    }

    #[test]
    fn exp_weighted_sech2_is_stable() {
        assert_relative_eq!(exp_weighted_sech2(2.0, 1000.0), 4.0, max_relative = 1e-12);
        assert_eq!(exp_weighted_sech2(2.0, -1000.0), 0.0);
        assert_eq!(exp_weighted_sech2(1.0, 800.0), 0.0);
        let s = 0.73;
        assert_relative_eq!(
            exp_weighted_sech2(1.0, s),
            s.exp() * sech2(s),
            max_relative = 1e-13
        );
    }

    #[test]
    fn exp_map_flat_line() {
        let m = SurfaceModel::flat();
        let p = m.point(1.0, 2.0).unwrap();
        let e = exp_map(&m, &p, &Vector2::new(3.0, 4.0), 0.5, 1e-3).unwrap();
        assert_relative_eq!(e.x, 2.5, max_relative = 1e-14);
        assert_relative_eq!(e.y, 4.0, max_relative = 1e-14);
    }

    #[test]
    fn exp_map_vertical_geodesic() {
        let m = hc1();
        let p = m.point(0.0, 1.0).unwrap();
        let e = exp_map(&m, &p, &Vector2::new(0.0, 1.0), 1.0, 1e-3).unwrap();
        assert_relative_eq!(e.x, 0.0, epsilon = 1e-10);
        assert_relative_eq!(e.y, std::f64::consts::E, max_relative = 1e-9);
    }

    #[test]
    fn exp_map_zero_time() {
        let m = hc1();
        let p = m.point(0.4, 1.5).unwrap();
        let e = exp_map(&m, &p, &Vector2::new(0.0, 1.5), 0.0, 1e-3).unwrap();
        assert_eq!(e.x, p.x);
        assert_eq!(e.y, p.y);
    }

    #[test]
    fn modular_reduction_basics() {
        let (x, y, _) = modular::reduce(0.75, 2.0);
        assert_relative_eq!(x, -0.25, max_relative = 1e-12);
        assert_relative_eq!(y, 2.0, max_relative = 1e-12);
        let (x, y, g) = modular::reduce(0.1, 0.2);
        assert!(modular::in_fundamental_domain(x, y));
        // the accumulated matrix must map the original point to the reduced one
        let (mx, my) = modular::moebius(&g, 0.1, 0.2);
        assert_relative_eq!(mx, x, epsilon = 1e-10);
        assert_relative_eq!(my, y, epsilon = 1e-10);
        // determinant one
        let det = g[(0, 0)] * g[(1, 1)] - g[(0, 1)] * g[(1, 0)];
        assert_relative_eq!(det, 1.0, max_relative = 1e-12);
    }

    #[test]
    fn modular_reduction_tie_breaks() {
        let (x, _, _) = modular::reduce(0.5, 3.0);
        assert_relative_eq!(x, -0.5, max_relative = 1e-12);
        // on the unit circle with positive real part: inversion applies
        let ang = 80f64.to_radians();
        let (x, y, _) = modular::reduce(ang.cos(), ang.sin());
        assert!(x <= 1e-12, "x = {x}");
        assert!(modular::in_fundamental_domain(x, y));
    }

    #[test]
    fn modular_candidates_have_unit_determinant() {
        for m in modular::short_candidates() {
            let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
            assert_relative_eq!(det, 1.0, max_relative = 1e-12);
        }
        assert!(modular::short_candidates().len() > 10);
    }
}
