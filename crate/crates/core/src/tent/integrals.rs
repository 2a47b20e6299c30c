//! Integrals of `exp(⟨w, z⟩)` and `w_u exp(⟨w, z⟩)` over the unit simplex
//! `T_d = {w ≥ 0, Σ w ≤ 1}`.
//!
//! Both integrals are divided differences of `exp`:
//! `∫ exp⟨w,z⟩ dw = exp[0, z_1, …, z_d]` and
//! `∫ w_u exp⟨w,z⟩ dw = exp[0, z_1, …, z_d, z_u]`.
//! The closed-form partial-fraction sums are used when their terms do not
//! cancel; otherwise the divided difference is evaluated as an entry of the
//! exponential of a bidiagonal matrix by Taylor series plus
//! scaling-and-squaring, which has no removable singularities at all.

use crate::error::{Error, Result};

/// Largest exponent argument accepted before reporting overflow.
pub const EXP_CAP: f64 = 700.0;

/// Closed forms are only attempted when every `|z_r|` and every gap
/// `|z_r − z_s|` exceeds this fraction of `1 + ‖z‖_∞`.
const GAP_FRACTION: f64 = 1e-4;

/// Reject the closed form when `Σ|terms|` exceeds this multiple of the sum.
const MAX_CANCELLATION: f64 = 1e3;

const TAYLOR_TERMS: usize = 24;

fn well_separated(z: &[f64]) -> bool {
    let scale = GAP_FRACTION * (1.0 + z.iter().fold(0.0f64, |m, v| m.max(v.abs())));
    z.iter().all(|v| v.abs() > scale)
        && z.iter().enumerate().all(|(r, a)| z[r + 1..].iter().all(|b| (a - b).abs() > scale))
}

fn accept(sum: f64, abs_sum: f64) -> Option<f64> {
    (sum.is_finite() && sum > 0.0 && abs_sum <= MAX_CANCELLATION * sum).then_some(sum)
}

/// Partial-fraction form of `∫_{T_d} exp⟨w, z⟩ dw` for non-zero, distinct `z`.
pub(crate) fn closed_form_integral(z: &[f64]) -> Option<f64> {
    if !well_separated(z) {
        return None;
    }
    let mut sum = 0.0;
    let mut abs_sum = 0.0;
    for (r, &zr) in z.iter().enumerate() {
        let mut t = zr.exp_m1() / zr;
        for (s, &zs) in z.iter().enumerate() {
            if s != r {
                t /= zr - zs;
            }
        }
        sum += t;
        abs_sum += t.abs();
    }
    accept(sum, abs_sum)
}

/// Partial-fraction form of `∫_{T_d} w_u exp⟨w, z⟩ dw` (`u` zero-based).
///
/// The two sums over `r ≠ u` are combined pairwise as
/// `(e^{z_r} − e^{z_u}) = e^{z_u} expm1(z_r − z_u)`.
pub(crate) fn closed_form_i_tilde(z: &[f64], u: usize) -> Option<f64> {
    if !well_separated(z) {
        return None;
    }
    let d = z.len();
    let zu = z[u];
    let mut sum = 0.0;
    let mut abs_sum = 0.0;
    let mut push = |t: f64| {
        sum += t;
        abs_sum += t.abs();
    };
    for (r, &zr) in z.iter().enumerate() {
        if r == u {
            continue;
        }
        let mut t = zu.exp() * (zr - zu).exp_m1() / (zr * (zr - zu));
        for (s, &zs) in z.iter().enumerate() {
            if s != r {
                t /= zr - zs;
            }
        }
        push(t);
    }
    let sign = if d % 2 == 0 { 1.0 } else { -1.0 };
    let prod: f64 = z.iter().product();
    push(sign * zu.exp_m1() / (zu * prod));
    let mut t = zu.exp() / zu;
    for (s, &zs) in z.iter().enumerate() {
        if s != u {
            t /= zu - zs;
        }
    }
    push(t);
    accept(sum, abs_sum)
}

/// Divided difference `exp[x_0, …, x_m]`; nodes may repeat.
pub fn exp_divided_difference(nodes: &[f64]) -> f64 {
    let m = nodes.len();
    assert!(m > 0, "at least one node required");
    let (lo, hi) = nodes
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let centre = 0.5 * (lo + hi);
    let radius = 0.5 * (hi - lo);
    let squarings = if radius <= 0.5 {
        0
    } else {
        (radius / 0.5).log2().ceil() as i32
    };
    let scale = 0.5f64.powi(squarings);
    let xi: Vec<f64> = nodes.iter().map(|x| (x - centre) * scale).collect();

    let mut inv_fact = [0.0; TAYLOR_TERMS + 16];
    inv_fact[0] = 1.0;
    for k in 1..inv_fact.len() {
        inv_fact[k] = inv_fact[k - 1] / k as f64;
    }

    // entry (i, j) of exp(T / 2^s) for the bidiagonal T with diagonal
    // `nodes − centre` and unit superdiagonal
    let mut mat = vec![0.0; m * m];
    let mut h = [0.0; TAYLOR_TERMS + 1];
    for i in 0..m {
        h[0] = 1.0;
        for k in 1..=TAYLOR_TERMS {
            h[k] = h[k - 1] * xi[i];
        }
        let mut factor = 1.0;
        for j in i..m {
            if j > i {
                for k in 1..=TAYLOR_TERMS {
                    h[k] += xi[j] * h[k - 1];
                }
                factor *= scale;
            }
            let order = j - i;
            let series: f64 = (0..=TAYLOR_TERMS).rev().map(|k| h[k] * inv_fact[k + order]).sum();
            mat[i * m + j] = series * factor;
        }
    }
    let mut next = vec![0.0; m * m];
    for _ in 0..squarings {
        for i in 0..m {
            for j in i..m {
                next[i * m + j] = (i..=j).map(|k| mat[i * m + k] * mat[k * m + j]).sum();
            }
        }
        std::mem::swap(&mut mat, &mut next);
    }
    centre.exp() * mat[m - 1]
}

fn check_exponent(exponent: f64) -> Result<()> {
    if exponent > EXP_CAP || exponent.is_nan() {
        return Err(Error::Overflow { exponent });
    }
    Ok(())
}

/// `∫_{T_d} exp⟨w, z⟩ dw`.
pub fn unit_simplex_exp_integral(z: &[f64]) -> f64 {
    closed_form_integral(z).unwrap_or_else(|| {
        let mut nodes = Vec::with_capacity(z.len() + 1);
        nodes.push(0.0);
        nodes.extend_from_slice(z);
        exp_divided_difference(&nodes)
    })
}

/// `|det A| · e^{y_base} · ∫_{T_d} exp⟨w, z⟩ dw`, the integral of the
/// exponentiated affine interpolant over one cell.
pub fn simplex_exp_integral(z: &[f64], absdet: f64, y_base: f64) -> Result<f64> {
    if z.iter().any(|v| !v.is_finite()) || !y_base.is_finite() {
        return Err(Error::InvalidInput("non-finite heights".into()));
    }
    let top = z.iter().fold(0.0f64, |m, &v| m.max(v));
    check_exponent(y_base + top)?;
    Ok(absdet * y_base.exp() * unit_simplex_exp_integral(z))
}

/// `∫_{T_d} w_u exp⟨w, z⟩ dw` with `u` zero-based.
pub fn i_tilde(z: &[f64], u: usize) -> f64 {
    assert!(u < z.len(), "coordinate index out of range");
    closed_form_i_tilde(z, u).unwrap_or_else(|| {
        let mut nodes = Vec::with_capacity(z.len() + 2);
        nodes.push(0.0);
        nodes.extend_from_slice(z);
        nodes.push(z[u]);
        exp_divided_difference(&nodes)
    })
}

/// `∫_{T_d} (1 − Σ w) exp⟨w, z⟩ dw`, obtained from [`i_tilde`] by
/// re-basing the chart at the second vertex. The factor `e^{z_1}` is
/// returned separately as its exponent so callers can fold it into their
/// own scaling: the integral is `exp(shift) · value`.
pub(crate) fn base_weight_integral(z: &[f64]) -> (f64, f64) {
    let shift = z[0];
    let mut rebased = Vec::with_capacity(z.len());
    rebased.push(-shift);
    rebased.extend(z[1..].iter().map(|v| v - shift));
    (shift, i_tilde(&rebased, 0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    #[test]
    fn zero_exponent_gives_simplex_volume() {
        for d in 1..=4 {
            let v = simplex_exp_integral(&vec![0.0; d], 1.0, 0.0).unwrap();
            assert!(rel(v, 1.0 / crate::linalg::factorial(d)) < 1e-14);
        }
    }

    #[test]
    fn two_dimensional_value_matches_antiderivative() {
        // ∫_0^1 (e^{1+v} − e^{2v}) dv = (e − 1)^2 / 2
        let e = std::f64::consts::E;
        let v = simplex_exp_integral(&[1.0, 2.0], 1.0, 0.0).unwrap();
        assert!(rel(v, (e - 1.0).powi(2) / 2.0) < 1e-14);
        assert!((v - 1.476_246_221_006_28).abs() < 1e-12);
    }

    #[test]
    fn i_tilde_one_dimensional_formula() {
        for t in [-20.0, -1.0, 1e-7, 0.3, 1.0, 15.0] {
            let expected = if t == 1e-7 {
                // series of (e^t (t − 1) + 1)/t^2 = 1/2 + t/3 + t^2/8 + …
                0.5 + t / 3.0 + t * t / 8.0
            } else {
                (f64::exp(t) * (t - 1.0) + 1.0) / (t * t)
            };
            assert!(rel(i_tilde(&[t], 0), expected) < 1e-12, "t = {t}");
        }
        assert!(rel(i_tilde(&[1.0], 0), 1.0) < 1e-15);
    }

    #[test]
    fn i_tilde_at_zero_is_centroid_mass() {
        for d in 1..=4 {
            for u in 0..d {
                let v = i_tilde(&vec![0.0; d], u);
                assert!(rel(v, 1.0 / crate::linalg::factorial(d + 1)) < 1e-14);
            }
        }
    }

    #[test]
    fn barycentric_weights_sum_to_total() {
        let z = [0.7, -2.1, 3.3];
        let total = unit_simplex_exp_integral(&z);
        let (shift, base) = base_weight_integral(&z);
        let parts: f64 = (0..3).map(|u| i_tilde(&z, u)).sum::<f64>() + shift.exp() * base;
        assert!(rel(parts, total) < 1e-13);
    }

    #[test]
    fn closed_form_and_matrix_route_agree_when_separated() {
        let z = [1.3, -0.4, 2.9, -3.1];
        let closed = closed_form_integral(&z).unwrap();
        let mut nodes = vec![0.0];
        nodes.extend_from_slice(&z);
        assert!(rel(closed, exp_divided_difference(&nodes)) < 1e-13);
        for u in 0..4 {
            let closed = closed_form_i_tilde(&z, u).unwrap();
            let mut nodes = nodes.clone();
            nodes.push(z[u]);
            assert!(rel(closed, exp_divided_difference(&nodes)) < 1e-13);
        }
    }

    #[test]
    fn clustered_nodes_fall_back() {
        assert!(closed_form_integral(&[1.0, 1.0 + 1e-9]).is_none());
        assert!(closed_form_integral(&[0.0, 2.0]).is_none());
    }

    #[test]
    fn overflow_is_reported() {
        assert!(matches!(
            simplex_exp_integral(&[701.0], 1.0, 0.0),
            Err(Error::Overflow { .. })
        ));
        assert!(simplex_exp_integral(&[-800.0], 1.0, 650.0).is_ok());
    }
}
