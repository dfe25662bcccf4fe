//! Independent numerical references for the analytic machinery.
//!
//! Everything here differentiates raw metric *values* by finite
//! differences or evaluates closed forms; none of it touches the
//! analytic jet plumbing it is meant to check. Tolerances live with the
//! tests that consume these, not here.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};

use crate::geometry::{ChartPoint, Christoffel, SurfaceModel};
use crate::sasaki::{chart_from_split, lifted_metric, SplitVector, UnitTangentState};
use crate::{Error, Result};

/// Default chart step for the finite-difference stencils.
pub const ORACLE_FD_STEP: f64 = 1e-3;

/// Fourth-order central first derivative from five samples.
fn central4(fm2: f64, fm1: f64, fp1: f64, fp2: f64, h: f64) -> f64 {
    (8.0 * (fp1 - fm1) - (fp2 - fm2)) / (12.0 * h)
}

/// Fourth-order central second derivative from five samples.
fn second4(fm2: f64, fm1: f64, f0: f64, fp1: f64, fp2: f64, h: f64) -> f64 {
    (-fp2 + 16.0 * fp1 - 30.0 * f0 + 16.0 * fm1 - fm2) / (12.0 * h * h)
}

fn metric_entries(model: &SurfaceModel, x: f64, y: f64) -> Result<[f64; 3]> {
    let p = model.point(x, y)?;
    let g = model.metric_at(&p)?;
    Ok([g[(0, 0)], g[(0, 1)], g[(1, 1)]])
}

/// Christoffel symbols from finite differences of the metric values.
pub fn fd_christoffel(model: &SurfaceModel, p: &ChartPoint, h: f64) -> Result<Christoffel> {
    let (x, y) = (p.x, p.y);
    let g0 = {
        let g = model.metric_at(p)?;
        Matrix2::new(g[(0, 0)], g[(0, 1)], g[(0, 1)], g[(1, 1)])
    };
    let mut dg = [Matrix2::zeros(), Matrix2::zeros()];
    for (axis, slot) in [(0usize, 0usize), (1, 1)] {
        let sample = |k: f64| -> Result<[f64; 3]> {
            let (sx, sy) = if axis == 0 { (x + k * h, y) } else { (x, y + k * h) };
            metric_entries(model, sx, sy)
        };
        let (m2, m1, p1, p2) = (sample(-2.0)?, sample(-1.0)?, sample(1.0)?, sample(2.0)?);
        let d: Vec<f64> = (0..3)
            .map(|i| central4(m2[i], m1[i], p1[i], p2[i], h))
            .collect();
        dg[slot] = Matrix2::new(d[0], d[1], d[1], d[2]);
    }
    let ginv = g0.try_inverse().ok_or(Error::Numerical {
        stage: "fd christoffel",
        detail: format!("metric not invertible at ({x}, {y})"),
    })?;
    let mut gamma = [[[0.0; 2]; 2]; 2];
    for k in 0..2 {
        for i in 0..2 {
            for j in 0..2 {
                let mut s = 0.0;
                for l in 0..2 {
                    s += ginv[(k, l)] * (dg[i][(j, l)] + dg[j][(i, l)] - dg[l][(i, j)]);
                }
                gamma[k][i][j] = 0.5 * s;
            }
        }
    }
    Ok(gamma)
}

/// Gaussian curvature by the Brioschi formula, with every derivative of
/// `E, F, G` taken by finite differences of metric values.
pub fn brioschi_curvature(model: &SurfaceModel, p: &ChartPoint, h: f64) -> Result<f64> {
    let (x, y) = (p.x, p.y);
    // 5x5 value stencil; mixed terms use the four diagonal neighbours.
    let mut efg = [[[0.0f64; 3]; 5]; 5];
    for (a, efg_row) in efg.iter_mut().enumerate() {
        for (b, slot) in efg_row.iter_mut().enumerate() {
            let dx = (a as f64) - 2.0;
            let dy = (b as f64) - 2.0;
            *slot = metric_entries(model, x + dx * h, y + dy * h)?;
        }
    }
    let at = |dx: i64, dy: i64, c: usize| efg[(dx + 2) as usize][(dy + 2) as usize][c];
    let dx1 = |c: usize| central4(at(-2, 0, c), at(-1, 0, c), at(1, 0, c), at(2, 0, c), h);
    let dy1 = |c: usize| central4(at(0, -2, c), at(0, -1, c), at(0, 1, c), at(0, 2, c), h);
    let dxx = |c: usize| second4(at(-2, 0, c), at(-1, 0, c), at(0, 0, c), at(1, 0, c), at(2, 0, c), h);
    let dyy = |c: usize| second4(at(0, -2, c), at(0, -1, c), at(0, 0, c), at(0, 1, c), at(0, 2, c), h);
    let dxy = |c: usize| (at(1, 1, c) - at(1, -1, c) - at(-1, 1, c) + at(-1, -1, c)) / (4.0 * h * h);

    let (e, f, g) = (at(0, 0, 0), at(0, 0, 1), at(0, 0, 2));
    let (ex, ey, eyy) = (dx1(0), dy1(0), dyy(0));
    let (fx, fy, fxy) = (dx1(1), dy1(1), dxy(1));
    let (gx, gy, gxx) = (dx1(2), dy1(2), dxx(2));

    let m1 = Matrix3::new(
        -0.5 * eyy + fxy - 0.5 * gxx, 0.5 * ex, fx - 0.5 * ey,
        fy - 0.5 * gx, e, f,
        0.5 * gy, f, g,
    );
    let m2 = Matrix3::new(
        0.0, 0.5 * ey, 0.5 * gx,
        0.5 * ey, e, f,
        0.5 * gx, f, g,
    );
    let den = e * g - f * f;
    if !(den > 0.0) {
        return Err(Error::Numerical {
            stage: "brioschi",
            detail: format!("degenerate first fundamental form at ({x}, {y})"),
        });
    }
    Ok((m1.determinant() - m2.determinant()) / (den * den))
}

/// Covariant norm of the curvature gradient from finite differences of
/// pointwise curvature values.
pub fn fd_curvature_gradient_norm(model: &SurfaceModel, p: &ChartPoint, h: f64) -> Result<f64> {
    let k_at = |dx: f64, dy: f64| -> Result<f64> {
        let q = model.point(p.x + dx, p.y + dy)?;
        model.gaussian_curvature(&q)
    };
    let kx = central4(k_at(-2.0 * h, 0.0)?, k_at(-h, 0.0)?, k_at(h, 0.0)?, k_at(2.0 * h, 0.0)?, h);
    let ky = central4(k_at(0.0, -2.0 * h)?, k_at(0.0, -h)?, k_at(0.0, h)?, k_at(0.0, 2.0 * h)?, h);
    let g = model.metric_at(p)?;
    let ginv = g.try_inverse().ok_or(Error::Numerical {
        stage: "fd curvature gradient",
        detail: "metric not invertible".into(),
    })?;
    let grad = Vector2::new(kx, ky);
    Ok((grad.dot(&(ginv * grad))).max(0.0).sqrt())
}

/// Christoffel symbols of the bundle metric at `(x, y)`, by finite
/// differences of `lifted_metric` values. The metric does not depend on
/// the fibre angle, so only the two base derivatives appear.
fn fd_lifted_christoffel(model: &SurfaceModel, x: f64, y: f64, h: f64) -> Result<[[[f64; 3]; 3]; 3]> {
    let g0 = lifted_metric(model, x, y);
    let mut dg = [Matrix3::zeros(); 3];
    for axis in 0..2usize {
        let sample = |k: f64| {
            let (sx, sy) = if axis == 0 { (x + k * h, y) } else { (x, y + k * h) };
            lifted_metric(model, sx, sy)
        };
        let (m2, m1, p1, p2) = (sample(-2.0), sample(-1.0), sample(1.0), sample(2.0));
        let mut d = Matrix3::zeros();
        for r in 0..3 {
            for c in 0..3 {
                d[(r, c)] = central4(m2[(r, c)], m1[(r, c)], p1[(r, c)], p2[(r, c)], h);
            }
        }
        dg[axis] = d;
    }
    let ginv = g0.try_inverse().ok_or(Error::Numerical {
        stage: "fd lifted christoffel",
        detail: format!("bundle metric not invertible at ({x}, {y})"),
    })?;
    let mut gamma = [[[0.0; 3]; 3]; 3];
    for k in 0..3 {
        for i in 0..3 {
            for j in 0..3 {
                let mut s = 0.0;
                for l in 0..3 {
                    s += ginv[(k, l)] * (dg[i][(j, l)] + dg[j][(i, l)] - dg[l][(i, j)]);
                }
                gamma[k][i][j] = 0.5 * s;
            }
        }
    }
    Ok(gamma)
}

/// Sectional curvature of the bundle metric for the plane spanned by two
/// tangent vectors at `state`, computed from the curvature tensor of the
/// chart metric with all derivatives taken numerically.
pub fn fd_lifted_sectional(
    model: &SurfaceModel,
    state: &UnitTangentState,
    xi1: &SplitVector,
    xi2: &SplitVector,
    h: f64,
) -> Result<f64> {
    let (x, y) = (state.p.x, state.p.y);
    let u = chart_from_split(model, state, xi1)?;
    let v = chart_from_split(model, state, xi2)?;

    let gamma0 = fd_lifted_christoffel(model, x, y, h)?;
    let mut dgamma = [[[[0.0f64; 3]; 3]; 3]; 3];
    for axis in 0..2usize {
        let sample = |k: f64| -> Result<[[[f64; 3]; 3]; 3]> {
            let (sx, sy) = if axis == 0 { (x + k * h, y) } else { (x, y + k * h) };
            fd_lifted_christoffel(model, sx, sy, h)
        };
        let (m2, m1, p1, p2) = (sample(-2.0)?, sample(-1.0)?, sample(1.0)?, sample(2.0)?);
        for k in 0..3 {
            for i in 0..3 {
                for j in 0..3 {
                    dgamma[axis][k][i][j] =
                        central4(m2[k][i][j], m1[k][i][j], p1[k][i][j], p2[k][i][j], h);
                }
            }
        }
    }

    // component l of R(e_i, e_j) e_k
    let riem = |l: usize, i: usize, j: usize, k: usize| -> f64 {
        let di = if i < 2 { dgamma[i][l][j][k] } else { 0.0 };
        let dj = if j < 2 { dgamma[j][l][i][k] } else { 0.0 };
        let mut s = di - dj;
        for m in 0..3 {
            s += gamma0[l][i][m] * gamma0[m][j][k] - gamma0[l][j][m] * gamma0[m][i][k];
        }
        s
    };

    let g = lifted_metric(model, x, y);
    let mut rw = Vector3::zeros();
    for l in 0..3 {
        let mut s = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    s += u[i] * v[j] * v[k] * riem(l, i, j, k);
                }
            }
        }
        rw[l] = s;
    }
    let num = (g * rw).dot(&u);
    let uu = (g * u).dot(&u);
    let vv = (g * v).dot(&v);
    let uv = (g * u).dot(&v);
    let den = uu * vv - uv * uv;
    if !(den.abs() > 1e-12 * (uu * vv).max(1e-300)) {
        return Err(Error::DegeneratePlane);
    }
    Ok(num / den)
}

/// Transition matrix of the perpendicular Jacobi pair `(j, j')` over time
/// `t` at constant curvature `-c^2`.
pub fn constant_jacobi(c: f64, t: f64) -> Matrix2<f64> {
    if c == 0.0 {
        return Matrix2::new(1.0, t, 0.0, 1.0);
    }
    let (s, ch) = ((c * t).sinh(), (c * t).cosh());
    Matrix2::new(ch, s / c, c * s, ch)
}

fn check_pinch(k_min: f64, k_max: f64, t: f64) -> Result<()> {
    if !(k_min <= k_max && k_max <= 0.0) {
        return Err(Error::InvalidArgument {
            stage: "pinching envelopes",
            detail: format!("need k_min <= k_max <= 0, got [{k_min}, {k_max}]"),
        });
    }
    if t < 0.0 {
        return Err(Error::InvalidArgument {
            stage: "pinching envelopes",
            detail: "envelope time must be nonnegative".into(),
        });
    }
    Ok(())
}

/// Comparison envelopes for a perpendicular Jacobi field with data
/// `j(0) = 0, j'(0) = 1` under curvature pinched in `[k_min, k_max]`,
/// both nonpositive: the field is sandwiched between the constant
/// curvature solutions for `t >= 0`.
pub fn pinching_envelopes(k_min: f64, k_max: f64, t: f64) -> Result<(f64, f64)> {
    check_pinch(k_min, k_max, t)?;
    let grow = |k: f64| constant_jacobi((-k).sqrt(), t)[(0, 1)];
    Ok((grow(k_max), grow(k_min)))
}

/// Same sandwich for the seed `j(0) = 1, j'(0) = 0`.
pub fn pinching_envelopes_unit(k_min: f64, k_max: f64, t: f64) -> Result<(f64, f64)> {
    check_pinch(k_min, k_max, t)?;
    let grow = |k: f64| constant_jacobi((-k).sqrt(), t)[(0, 0)];
    Ok((grow(k_max), grow(k_min)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn flat_christoffels_vanish() {
        let m = SurfaceModel::flat();
        let p = m.point(0.3, -1.2).unwrap();
        let g = fd_christoffel(&m, &p, ORACLE_FD_STEP).unwrap();
        for k in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    assert!(g[k][i][j].abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn brioschi_recovers_constant_curvature() {
        let m = SurfaceModel::hyperbolic(1.0).unwrap();
        let p = m.point(0.4, 1.7).unwrap();
        let k = brioschi_curvature(&m, &p, ORACLE_FD_STEP).unwrap();
        assert_relative_eq!(k, -1.0, epsilon = 1e-8);
        let m2 = SurfaceModel::hyperbolic(2.0).unwrap();
        let k2 = brioschi_curvature(&m2, &m2.point(-0.3, 0.9).unwrap(), ORACLE_FD_STEP).unwrap();
        assert_relative_eq!(k2, -4.0, epsilon = 1e-7);
    }

    #[test]
    fn constant_jacobi_is_unimodular_and_matches_small_time() {
        for c in [0.0, 1.0, 2.0] {
            for t in [0.0, 0.3, 2.0] {
                let m = constant_jacobi(c, t);
                assert_relative_eq!(m.determinant(), 1.0, epsilon = 1e-12);
            }
        }
        let m = constant_jacobi(1.0, 1e-4);
        assert_relative_eq!(m[(0, 1)], 1e-4, epsilon = 1e-10);
    }

    #[test]
    fn lifted_sectional_agrees_with_stencil() {
        let m = SurfaceModel::hyperbolic(1.0).unwrap();
        let s = UnitTangentState::from_angle(&m, 0.2, 1.3, 0.4).unwrap();
        let n = s.normal();
        let xi1 = SplitVector::new(n, Vector2::zeros());
        let xi2 = SplitVector::new(Vector2::zeros(), n);
        let direct = crate::sasaki::lifted_sectional(&m, &s.p, &s.dir, &xi1, &xi2).unwrap();
        let fd = fd_lifted_sectional(&m, &s, &xi1, &xi2, ORACLE_FD_STEP).unwrap();
        assert_relative_eq!(direct, fd, epsilon = 1e-6);
    }

    #[test]
    fn envelopes_collapse_at_equal_pinching() {
        let (lo, hi) = pinching_envelopes(-1.0, -1.0, 1.3).unwrap();
        assert_relative_eq!(lo, hi, epsilon = 1e-15);
        assert_relative_eq!(lo, 1.3f64.sinh(), epsilon = 1e-12);
        let (lo, hi) = pinching_envelopes(-4.0, -1.0, 0.7).unwrap();
        assert!(lo < hi);
        assert!(pinching_envelopes(-1.0, 0.5, 1.0).is_err());
    }
}
