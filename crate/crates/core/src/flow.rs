//! Geodesic flow on the unit tangent bundle.
//!
//! The public entry points work with [`UnitTangentState`]; internally
//! every half-plane model flows in log-height coordinates
//! `(x, s, w, vs) = (x, ln y, e^{-s} x', s')`, whose components stay
//! representable along arbitrarily long orbits even when the chart
//! height itself would underflow. Materializing a state back to chart
//! coordinates is the only operation that can fail on a deep excursion.
//!
//! Engines per model:
//! * flat — straight lines, closed form;
//! * constant negative curvature — semicircle arcs in closed form
//!   (log-stable tanh/cosh parametrization);
//! * quotient surface — flow as right multiplication on the isometry
//!   group, reducing into the fundamental domain on a fixed cadence;
//! * perturbed — fixed-step symplectic (Gauss collocation) integration
//!   of the log-chart geodesic field with per-step speed renormalization.
//!
//! Alongside the base point every engine transports the perpendicular
//! derivative cocycle: the 2x2 matrix propagating `(j, j')` of normal
//! Jacobi fields, expressed in the parallel frame along the orbit. The
//! tangent map of the time-`t` flow on the unit bundle is
//! `diag(1, cocycle)` in the splitting (flow direction, normal
//! horizontal, normal vertical).

use crate::error::{Error, Result};
use crate::geometry::{geodesic_rhs_log, modular, renormalize_log, SurfaceModel};
use crate::ode;
use crate::sasaki::{SplitVector, UnitTangentState};
use nalgebra::{Matrix2, Matrix4, SVector, Vector2};

pub const DEFAULT_FLOW_STEP: f64 = 1e-3;
/// How often the quotient engine reduces back into the fundamental
/// domain and the integrating engines renormalize bookkeeping.
pub const REDUCE_CADENCE: f64 = 1.0;
/// Chart height beyond which a state cannot be materialized.
pub const MAX_LOG_HEIGHT: f64 = 700.0;
/// Chart height above which an orbit counts as a cusp excursion.
pub const DEFAULT_Y_CAP: f64 = 1e3;

/// Perpendicular-block cocycle of the time-`t` tangent map, in the
/// parallel frames at the endpoints of the orbit segment.
#[derive(Debug, Clone, Copy)]
pub struct FlowDerivative {
    pub t: f64,
    pub phi: Matrix2<f64>,
    /// Determinant of `phi`, accumulated chunk by chunk. The Wronskian
    /// identity makes it one; the direct determinant of a long-horizon
    /// product is ruined by cancellation, the chunk product is not.
    pub det: f64,
}

impl FlowDerivative {
    pub fn from_phi(t: f64, phi: Matrix2<f64>) -> Self {
        FlowDerivative { t, phi, det: phi.determinant() }
    }

    /// Largest singular value of the unit-bundle tangent map
    /// `diag(1, phi)`.
    pub fn op_norm(&self) -> f64 {
        sigma_max(&self.phi).max(1.0)
    }

    /// Smallest singular value of the unit-bundle tangent map.
    pub fn min_singular(&self) -> f64 {
        let s = sigma_max(&self.phi);
        if s > 0.0 { (self.det.abs() / s).min(1.0) } else { 0.0 }
    }

    /// Singular values of the full unit-bundle tangent map, descending.
    pub fn singular_values(&self) -> [f64; 3] {
        let s1 = sigma_max(&self.phi);
        let s2 = (self.det.abs() / s1).min(f64::INFINITY);
        let mut v = [1.0, s1, s2];
        v.sort_by(|a, b| b.partial_cmp(a).unwrap());
        v
    }

    /// Push the normal-plane coordinates `(j, j')` forward.
    pub fn apply_normal(&self, j: f64, p: f64) -> (f64, f64) {
        let v = self.phi * Vector2::new(j, p);
        (v[0], v[1])
    }

    /// The tangent map on split coordinates, rows and columns ordered
    /// (position along the direction, position normal, derivative along
    /// the direction, derivative normal) in the parallel frames at the
    /// segment endpoints. The tangential Jacobi component of any metric
    /// is affine in time, giving the fixed shear block; the normal block
    /// is `phi`.
    pub fn full_matrix(&self) -> Matrix4<f64> {
        let p = &self.phi;
        Matrix4::new(
            1.0, 0.0, self.t, 0.0,
            0.0, p[(0, 0)], 0.0, p[(0, 1)],
            0.0, 0.0, 1.0, 0.0,
            0.0, p[(1, 0)], 0.0, p[(1, 1)],
        )
    }
}

/// Largest singular value of a 2x2 matrix from the closed form.
pub(crate) fn sigma_max(m: &Matrix2<f64>) -> f64 {
    let f: f64 = m.iter().map(|v| v * v).sum();
    let det = m.determinant();
    let disc = (f * f - 4.0 * det * det).max(0.0).sqrt();
    (0.5 * (f + disc)).sqrt()
}

/// Cocycle of the constant-curvature `-c^2` flow over a signed time.
fn constant_cocycle(c: f64, dt: f64) -> Matrix2<f64> {
    if c == 0.0 {
        return Matrix2::new(1.0, dt, 0.0, 1.0);
    }
    let (sh, ch) = ((c * dt).sinh(), (c * dt).cosh());
    Matrix2::new(ch, sh / c, c * sh, ch)
}

/// `ln cosh` without overflow.
fn lcosh(t: f64) -> f64 {
    t.abs() + (-2.0 * t.abs()).exp().ln_1p() - std::f64::consts::LN_2
}

/// `ln sinh` for positive argument without overflow.
fn lsinh(t: f64) -> f64 {
    debug_assert!(t > 0.0);
    t + (-(-2.0 * t).exp_m1()).ln() - std::f64::consts::LN_2
}

#[derive(Debug, Clone)]
enum Engine {
    /// Cartesian straight lines: state `(x, y, vx, vy)`.
    FlatClosed,
    /// Closed-form half-plane arcs at curvature `-c^2`, log chart.
    ConstantClosed { c: f64 },
    /// Right multiplication on the isometry group with periodic
    /// reduction; the log-chart state mirrors the matrix.
    QuotientMatrix { g: Matrix2<f64> },
    /// Gauss-collocation integration of the log-chart field.
    LogIntegrated { reduce: bool },
}

/// Incremental orbit propagator carrying the base state and handing out
/// per-chunk perpendicular cocycles.
#[derive(Debug, Clone)]
pub struct OrbitStepper {
    model: SurfaceModel,
    engine: Engine,
    /// Flat: `(x, y, vx, vy)`; half-plane: `(x, s, w, vs)`.
    q: SVector<f64, 4>,
    t: f64,
    step: f64,
    reduce_clock: f64,
    max_height: f64,
}

impl OrbitStepper {
    pub fn new(model: &SurfaceModel, theta: &UnitTangentState, step: f64) -> Result<Self> {
        let engine = match model {
            SurfaceModel::Flat => Engine::FlatClosed,
            SurfaceModel::HyperbolicConstant { c } => Engine::ConstantClosed { c: *c },
            SurfaceModel::Modular => Engine::QuotientMatrix { g: state_to_matrix(theta) },
            SurfaceModel::PerturbedHyperbolic(_) => Engine::LogIntegrated { reduce: false },
        };
        Self::with_engine(model, theta, step, engine)
    }

    /// Force the generic log-chart integrator; `reduce` applies the
    /// quotient identification on the reduction cadence. Used to
    /// cross-validate the closed-form and matrix engines.
    pub fn new_integrated(
        model: &SurfaceModel,
        theta: &UnitTangentState,
        step: f64,
        reduce: bool,
    ) -> Result<Self> {
        if matches!(model, SurfaceModel::Flat) {
            return Self::with_engine(model, theta, step, Engine::FlatClosed);
        }
        if reduce && !matches!(model, SurfaceModel::Modular) {
            return Err(Error::InvalidArgument {
                stage: "orbit stepper",
                detail: "reduction only applies to the quotient model".into(),
            });
        }
        Self::with_engine(model, theta, step, Engine::LogIntegrated { reduce })
    }

    fn with_engine(
        model: &SurfaceModel,
        theta: &UnitTangentState,
        step: f64,
        engine: Engine,
    ) -> Result<Self> {
        model.check_point(&theta.p)?;
        if !(step > 0.0 && step.is_finite()) {
            return Err(Error::InvalidArgument {
                stage: "orbit stepper",
                detail: format!("step must be positive, got {step}"),
            });
        }
        let q = match model {
            SurfaceModel::Flat => SVector::<f64, 4>::new(
                theta.p.x,
                theta.p.y,
                theta.dir[0],
                theta.dir[1],
            ),
            _ => SVector::<f64, 4>::new(
                theta.p.x,
                theta.p.y.ln(),
                theta.dir[0] / theta.p.y,
                theta.dir[1] / theta.p.y,
            ),
        };
        Ok(OrbitStepper {
            model: model.clone(),
            engine,
            q,
            t: 0.0,
            step,
            reduce_clock: 0.0,
            max_height: theta.p.y,
        })
    }

    pub fn elapsed(&self) -> f64 {
        self.t
    }

    /// Largest chart height seen at chunk boundaries; a cusp-excursion
    /// diagnostic for the quotient model.
    pub fn max_height(&self) -> f64 {
        self.max_height
    }

    /// Whether the orbit has climbed past `y_cap` at any chunk boundary.
    /// Estimators exclude or down-weight flagged orbits and must record
    /// having done so.
    pub fn cusp_excursion(&self, y_cap: f64) -> bool {
        self.max_height > y_cap
    }

    /// Log-chart view `(x, s, w, vs)` of the current state (flat states
    /// are reported in their Cartesian chart).
    pub fn log_state(&self) -> SVector<f64, 4> {
        self.q
    }

    /// Gaussian curvature at the current base point.
    pub fn curvature_here(&self) -> f64 {
        match self.engine {
            Engine::FlatClosed => 0.0,
            _ => self.model.curvature_log_chart(self.q[0], self.q[1]),
        }
    }

    /// Materialize the current state in chart coordinates.
    pub fn state(&self) -> Result<UnitTangentState> {
        match self.engine {
            Engine::FlatClosed => {
                UnitTangentState::new(&self.model, self.q[0], self.q[1], self.q[2], self.q[3])
            }
            _ => {
                let s = self.q[1];
                if s.abs() > MAX_LOG_HEIGHT {
                    return Err(Error::ChartUnderflow {
                        t: self.t,
                        reason: format!("orbit height ln y = {s:.1} is outside chart range"),
                    });
                }
                let y = s.exp();
                UnitTangentState::new(&self.model, self.q[0], y, self.q[2] * y, self.q[3] * y)
            }
        }
    }

    /// Advance by a signed time `dt`, returning the perpendicular
    /// cocycle of this chunk (parallel frames at chunk start and end).
    pub fn advance(&mut self, dt: f64) -> Result<Matrix2<f64>> {
        if dt == 0.0 {
            return Ok(Matrix2::identity());
        }
        if !dt.is_finite() {
            return Err(Error::InvalidArgument {
                stage: "orbit stepper",
                detail: "step duration must be finite".into(),
            });
        }
        let phi = match &self.engine {
            Engine::FlatClosed => {
                self.q[0] += dt * self.q[2];
                self.q[1] += dt * self.q[3];
                Matrix2::new(1.0, dt, 0.0, 1.0)
            }
            Engine::ConstantClosed { c } => {
                let c = *c;
                self.advance_constant(c, dt);
                constant_cocycle(c, dt)
            }
            Engine::QuotientMatrix { g } => {
                let g = *g;
                let a = Matrix2::new((dt / 2.0).exp(), 0.0, 0.0, (-dt / 2.0).exp());
                let mut gn = g * a;
                self.reduce_clock += dt.abs();
                if self.reduce_clock >= REDUCE_CADENCE {
                    self.reduce_clock = 0.0;
                    let (x, y) = matrix_base_point(&gn);
                    self.max_height = self.max_height.max(y);
                    let (_, _, dg) = modular::reduce(x, y);
                    gn = dg * gn;
                }
                self.q = matrix_to_log_state(&gn);
                self.engine = Engine::QuotientMatrix { g: gn };
                constant_cocycle(1.0, dt)
            }
            Engine::LogIntegrated { reduce } => {
                let reduce = *reduce;
                let phi = self.advance_integrated(dt)?;
                if reduce {
                    self.reduce_clock += dt.abs();
                    if self.reduce_clock >= REDUCE_CADENCE {
                        self.reduce_clock = 0.0;
                        self.reduce_log_state()?;
                    }
                }
                phi
            }
        };
        self.note_height();
        self.t += dt;
        Ok(phi)
    }

    fn note_height(&mut self) {
        let peak = match self.engine {
            Engine::FlatClosed => self.q[1],
            _ => self.q[1].exp(),
        };
        self.max_height = self.max_height.max(peak);
    }

    /// Closed-form constant-curvature advance in the log chart.
    fn advance_constant(&mut self, c: f64, dt: f64) {
        let (x, s, w, vs) = (self.q[0], self.q[1], self.q[2], self.q[3]);
        if w == 0.0 {
            self.q[1] = s + vs * dt;
            return;
        }
        let ratio = (-vs / c).clamp(-1.0, 1.0);
        let tau0 = ratio.atanh();
        if !tau0.is_finite() {
            self.q[1] = s + vs * dt;
            self.q[2] = 0.0;
            return;
        }
        let tau1 = tau0 + c * dt;
        let sig = w.signum();
        let s1 = s + lcosh(tau0) - lcosh(tau1);
        let dx = sig * dt.signum() * (s + lsinh((c * dt).abs()) - lcosh(tau1)).exp();
        self.q[0] = x + dx;
        self.q[1] = s1;
        self.q[2] = sig * c / tau1.cosh();
        self.q[3] = -c * tau1.tanh();
    }

    /// One integrated chunk with the Jacobi columns riding along.
    fn advance_integrated(&mut self, dt: f64) -> Result<Matrix2<f64>> {
        let m = self.model.clone();
        let rhs = move |y: &SVector<f64, 8>| {
            let base = SVector::<f64, 4>::new(y[0], y[1], y[2], y[3]);
            let d = geodesic_rhs_log(&m, &base);
            let k = m.curvature_log_chart(y[0], y[1]);
            SVector::<f64, 8>::from([
                d[0], d[1], d[2], d[3],
                y[5], -k * y[4],
                y[7], -k * y[6],
            ])
        };
        let m2 = self.model.clone();
        let y0 = SVector::<f64, 8>::from([
            self.q[0], self.q[1], self.q[2], self.q[3],
            1.0, 0.0,
            0.0, 1.0,
        ]);
        let y = ode::integrate(&rhs, y0, dt, self.step, |state| {
            let mut base = SVector::<f64, 4>::new(state[0], state[1], state[2], state[3]);
            renormalize_log(&m2, &mut base);
            state[2] = base[2];
            state[3] = base[3];
        })?;
        self.q = SVector::<f64, 4>::new(y[0], y[1], y[2], y[3]);
        Ok(Matrix2::new(y[4], y[6], y[5], y[7]))
    }

    /// Apply the quotient identification to the integrated log state.
    fn reduce_log_state(&mut self) -> Result<()> {
        let s = self.q[1];
        if s.abs() > MAX_LOG_HEIGHT {
            return Ok(());
        }
        let y = s.exp();
        self.max_height = self.max_height.max(y);
        let (nx, ny, g) = modular::reduce(self.q[0], y);
        if (nx - self.q[0]).abs() < 1e-15 && (ny - y).abs() < 1e-15 * y {
            return Ok(());
        }
        let v = modular::moebius_push_vector(
            &g,
            self.q[0],
            y,
            &Vector2::new(self.q[2] * y, self.q[3] * y),
        );
        self.q = SVector::<f64, 4>::new(nx, ny.ln(), v[0] / ny, v[1] / ny);
        Ok(())
    }
}

/// Isometry-group representative of a bundle state: base translation
/// and scaling times the rotation stabilizing the basepoint. The
/// rotation part turns the direction by twice its own angle, hence the
/// halved offset from vertical.
fn state_to_matrix(theta: &UnitTangentState) -> Matrix2<f64> {
    let (x, y) = (theta.p.x, theta.p.y);
    let alpha = theta.frame_angle();
    let psi = 0.5 * (alpha - std::f64::consts::FRAC_PI_2);
    let (sp, cp) = psi.sin_cos();
    let ry = y.sqrt();
    let b = Matrix2::new(ry, x / ry, 0.0, 1.0 / ry);
    let k = Matrix2::new(cp, sp, -sp, cp);
    b * k
}

fn matrix_base_point(g: &Matrix2<f64>) -> (f64, f64) {
    let (a, b, c, d) = (g[(0, 0)], g[(0, 1)], g[(1, 0)], g[(1, 1)]);
    let den = c * c + d * d;
    ((a * c + b * d) / den, 1.0 / den)
}

/// Log-chart state read off a group element.
fn matrix_to_log_state(g: &Matrix2<f64>) -> SVector<f64, 4> {
    let (a, b, c, d) = (g[(0, 0)], g[(0, 1)], g[(1, 0)], g[(1, 1)]);
    let den = c * c + d * d;
    let x = (a * c + b * d) / den;
    let y = 1.0 / den;
    // chart direction y^2 * (2 c d, d^2 - c^2); normalized to w, vs
    let vx = 2.0 * c * d * y * y;
    let vy = (d * d - c * c) * y * y;
    SVector::<f64, 4>::new(x, y.ln(), vx / y, vy / y)
}

/// Bundle state of the quotient surface as a unimodular group element.
/// The flow acts by right multiplication, so long orbits never touch
/// chart coordinates.
#[derive(Debug, Clone, Copy)]
pub struct ModularState {
    pub matrix: Matrix2<f64>,
    /// Whether the representative's base point lies in the standard
    /// fundamental domain.
    pub reduced: bool,
}

impl ModularState {
    /// Wrap a group element; the determinant must be 1 within 1e-10.
    pub fn new(matrix: Matrix2<f64>) -> Result<Self> {
        let det = matrix.determinant();
        if !((det - 1.0).abs() <= 1e-10) {
            return Err(Error::InvalidArgument {
                stage: "modular state",
                detail: format!("determinant {det} is not 1"),
            });
        }
        let (x, y) = matrix_base_point(&matrix);
        Ok(ModularState { matrix, reduced: modular::in_fundamental_domain(x, y) })
    }

    pub fn from_state(theta: &UnitTangentState) -> Result<Self> {
        if theta.p.model != SurfaceModel::Modular.id() {
            return Err(Error::ModelMismatch);
        }
        Self::new(state_to_matrix(theta))
    }

    pub fn to_state(&self) -> Result<UnitTangentState> {
        let q = matrix_to_log_state(&self.matrix);
        if !q[1].is_finite() || q[1].abs() > MAX_LOG_HEIGHT {
            return Err(Error::ChartUnderflow {
                t: 0.0,
                reason: "group element sits too deep in the cusp for the chart".into(),
            });
        }
        let y = q[1].exp();
        UnitTangentState::new(&SurfaceModel::Modular, q[0], y, q[2] * y, q[3] * y)
    }

    pub fn base_point(&self) -> (f64, f64) {
        matrix_base_point(&self.matrix)
    }

    /// Move the representative over the fundamental domain.
    pub fn reduce(&self) -> ModularState {
        let (x, y) = matrix_base_point(&self.matrix);
        let (_, _, dg) = modular::reduce(x, y);
        let g = dg * self.matrix;
        let (nx, ny) = matrix_base_point(&g);
        ModularState { matrix: g, reduced: modular::in_fundamental_domain(nx, ny) }
    }
}

/// Geodesic flow on group representatives: right multiplication by the
/// diagonal element with entries `(e^{t/2}, e^{-t/2})`, then reduction.
/// One application multiplies entries by `e^{|t|/2}` before reducing,
/// so long horizons should be walked in moderate increments.
pub fn modular_flow(s: &ModularState, t: f64) -> Result<ModularState> {
    if !t.is_finite() {
        return Err(Error::InvalidArgument {
            stage: "modular flow",
            detail: "flow time must be finite".into(),
        });
    }
    let det = s.matrix.determinant();
    if !((det - 1.0).abs() <= 1e-8) {
        return Err(Error::InvalidArgument {
            stage: "modular flow",
            detail: format!("determinant {det} drifted from 1"),
        });
    }
    if t == 0.0 {
        return Ok(*s);
    }
    let a = Matrix2::new((t / 2.0).exp(), 0.0, 0.0, (-t / 2.0).exp());
    let flowed = ModularState { matrix: s.matrix * a, reduced: false };
    Ok(flowed.reduce())
}

/// Flow a bundle state by a signed time.
pub fn flow(model: &SurfaceModel, theta: &UnitTangentState, t: f64, step: f64) -> Result<UnitTangentState> {
    let mut stepper = OrbitStepper::new(model, theta, step)?;
    advance_chunked(&mut stepper, t)?;
    stepper.state()
}

/// Tangent map of the time-`t` flow (perpendicular block), raw product
/// over reduction-cadence chunks. Entries grow like `e^{c |t|}`, so this
/// direct form is for moderate horizons; long-horizon spectra use their
/// own renormalized accumulation.
pub fn flow_derivative(
    model: &SurfaceModel,
    theta: &UnitTangentState,
    t: f64,
    step: f64,
) -> Result<FlowDerivative> {
    let mut stepper = OrbitStepper::new(model, theta, step)?;
    accumulate_derivative(&mut stepper, t)
}

pub(crate) fn accumulate_derivative(stepper: &mut OrbitStepper, t: f64) -> Result<FlowDerivative> {
    let mut phi = Matrix2::identity();
    let mut det = 1.0;
    let mut remaining = t;
    while remaining != 0.0 {
        let dt = remaining.clamp(-REDUCE_CADENCE, REDUCE_CADENCE);
        let chunk = stepper.advance(dt)?;
        det *= chunk.determinant();
        phi = chunk * phi;
        remaining -= dt;
    }
    Ok(FlowDerivative { t, phi, det })
}

/// Endpoint state of a flow segment together with the split-coordinate
/// tangent map accumulated along it.
#[derive(Debug, Clone)]
pub struct FlowSample {
    pub state: UnitTangentState,
    pub t: f64,
    /// See [`FlowDerivative::full_matrix`] for the row and column order.
    pub cocycle: Matrix4<f64>,
}

/// Flow a bundle state and report the endpoint with its tangent map.
pub fn flow_sample(
    model: &SurfaceModel,
    theta: &UnitTangentState,
    t: f64,
    step: f64,
) -> Result<FlowSample> {
    let mut stepper = OrbitStepper::new(model, theta, step)?;
    let d = accumulate_derivative(&mut stepper, t)?;
    Ok(FlowSample { state: stepper.state()?, t, cocycle: d.full_matrix() })
}

fn advance_chunked(stepper: &mut OrbitStepper, t: f64) -> Result<()> {
    let mut remaining = t;
    while remaining != 0.0 {
        let dt = remaining.clamp(-REDUCE_CADENCE, REDUCE_CADENCE);
        stepper.advance(dt)?;
        remaining -= dt;
    }
    Ok(())
}

/// Push the normal Jacobi data `(j, j')` along the orbit of `theta` for
/// a signed time.
pub fn jacobi_propagate(
    model: &SurfaceModel,
    theta: &UnitTangentState,
    j: f64,
    p: f64,
    t: f64,
    step: f64,
) -> Result<(f64, f64)> {
    Ok(flow_derivative(model, theta, t, step)?.apply_normal(j, p))
}

/// Decompose a unit-bundle tangent vector at `theta` into flow-adapted
/// coordinates `(a, j, p)`: component along the geodesic field, normal
/// horizontal, normal vertical.
pub fn adapted_coordinates(
    model: &SurfaceModel,
    theta: &UnitTangentState,
    xi: &SplitVector,
) -> Result<(f64, f64, f64)> {
    let n = theta.normal();
    let a = model.inner(&theta.p, &xi.h, &theta.dir)?;
    let j = model.inner(&theta.p, &xi.h, &n)?;
    let p = model.inner(&theta.p, &xi.v, &n)?;
    let tangential_vertical = model.inner(&theta.p, &xi.v, &theta.dir)?;
    if tangential_vertical.abs() > 1e-9 {
        return Err(Error::NotAdmissible(format!(
            "vector is not tangent to the unit bundle: vertical component along the direction = {tangential_vertical}"
        )));
    }
    Ok((a, j, p))
}

/// Rebuild a split vector at `theta` from flow-adapted coordinates.
pub fn from_adapted_coordinates(
    theta: &UnitTangentState,
    a: f64,
    j: f64,
    p: f64,
) -> SplitVector {
    let n = theta.normal();
    SplitVector::new(theta.dir * a + n * j, n * p)
}

/// One row of an orbit sample: time, chart position, frame angle,
/// curvature at the base point.
#[derive(Debug, Clone, Copy)]
pub struct OrbitSample {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub angle: f64,
    pub curvature: f64,
}

/// Sample an orbit at `count + 1` equally spaced times in `[0, t_max]`.
pub fn sample_orbit(
    model: &SurfaceModel,
    theta: &UnitTangentState,
    t_max: f64,
    count: usize,
    step: f64,
) -> Result<Vec<OrbitSample>> {
    if count == 0 || !(t_max > 0.0) {
        return Err(Error::InvalidArgument {
            stage: "orbit sampling",
            detail: "need a positive horizon and at least one interval".into(),
        });
    }
    let mut stepper = OrbitStepper::new(model, theta, step)?;
    let dt = t_max / count as f64;
    let mut out = Vec::with_capacity(count + 1);
    for i in 0..=count {
        if i > 0 {
            advance_chunked_by(&mut stepper, dt)?;
        }
        let st = stepper.state()?;
        out.push(OrbitSample {
            t: i as f64 * dt,
            x: st.p.x,
            y: st.p.y,
            angle: st.frame_angle(),
            curvature: stepper.curvature_here(),
        });
    }
    Ok(out)
}

fn advance_chunked_by(stepper: &mut OrbitStepper, dt: f64) -> Result<()> {
    advance_chunked(stepper, dt)
}

/// One trajectory dump record. Column order for serialization is fixed:
/// `t, x, y, vx, vy`, then the 16 cocycle entries row by row in the
/// split-coordinate order of [`FlowDerivative::full_matrix`].
#[derive(Debug, Clone)]
pub struct TrajectoryRecord {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub cocycle: Matrix4<f64>,
}

impl TrajectoryRecord {
    pub const CSV_HEADER: &'static str = "t,x,y,vx,vy,\
        c00,c01,c02,c03,c10,c11,c12,c13,c20,c21,c22,c23,c30,c31,c32,c33";

    pub fn csv_row(&self) -> String {
        let mut row = format!(
            "{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
            self.t, self.x, self.y, self.vx, self.vy
        );
        for i in 0..4 {
            for j in 0..4 {
                row.push(',');
                row.push_str(&format!("{:.17e}", self.cocycle[(i, j)]));
            }
        }
        row
    }
}

/// Sample an orbit with its accumulated tangent map at `count + 1`
/// equally spaced times in `[0, t_max]`.
pub fn sample_trajectory(
    model: &SurfaceModel,
    theta: &UnitTangentState,
    t_max: f64,
    count: usize,
    step: f64,
) -> Result<Vec<TrajectoryRecord>> {
    if count == 0 || !(t_max > 0.0) {
        return Err(Error::InvalidArgument {
            stage: "trajectory sampling",
            detail: "need a positive horizon and at least one interval".into(),
        });
    }
    let mut stepper = OrbitStepper::new(model, theta, step)?;
    let dt = t_max / count as f64;
    let mut phi = Matrix2::identity();
    let mut det = 1.0;
    let mut out = Vec::with_capacity(count + 1);
    for i in 0..=count {
        let t = i as f64 * dt;
        if i > 0 {
            let mut remaining = dt;
            while remaining != 0.0 {
                let inc = remaining.clamp(-REDUCE_CADENCE, REDUCE_CADENCE);
                let chunk = stepper.advance(inc)?;
                det *= chunk.determinant();
                phi = chunk * phi;
                remaining -= inc;
            }
        }
        let st = stepper.state()?;
        let d = FlowDerivative { t, phi, det };
        out.push(TrajectoryRecord {
            t,
            x: st.p.x,
            y: st.p.y,
            vx: st.dir[0],
            vy: st.dir[1],
            cocycle: d.full_matrix(),
        });
    }
    Ok(out)
}
