//! Tent functions `h̄_y`, the convex objective `σ`, its companion `τ`, and
//! subgradients of `σ`.
//!
//! `h̄_y` is the least concave function with `h̄_y(X_i) ≥ y_i`, equal to
//! `−∞` off the hull `C_n`. With weights `w_i` (uniform `1/n` by default):
//!
//! ```text
//! σ(y) = −Σ w_i y_i       + ∫ exp h̄_y
//! τ(y) = −Σ w_i h̄_y(X_i)  + ∫ exp h̄_y
//! ```
//!
//! `σ` is convex with `σ ≥ τ`, and its minimiser is the log-density of the
//! maximum likelihood estimate.

mod integrals;

use rayon::prelude::*;

pub use integrals::{
    exp_divided_difference, i_tilde, simplex_exp_integral, unit_simplex_exp_integral, EXP_CAP,
};

use crate::error::{Error, Result};
use crate::geometry::{lifted_triangulation, DataSet, Simplex, Triangulation};
use crate::linalg::dot;

/// Cells below this count are processed on the calling thread.
const PARALLEL_CELLS: usize = 512;

/// Tolerance for deciding that a lifted point touches a facet it is not a
/// vertex of.
pub const TOUCH_TOL: f64 = 1e-9;

/// `h(x) = ⟨x, slope⟩ − offset` on one cell.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinePiece {
    pub slope: Vec<f64>,
    pub offset: f64,
}

impl AffinePiece {
    pub fn eval(&self, x: &[f64]) -> f64 {
        dot(x, &self.slope) - self.offset
    }
}

/// Heights, the induced triangulation, and the affine piece on each cell.
#[derive(Clone, Debug)]
pub struct TentFunction {
    y: Vec<f64>,
    tri: Triangulation,
    pieces: Vec<AffinePiece>,
    /// `z_{j,l} = y_{j_{l+1}} − y_{j_1}` per cell.
    z: Vec<Vec<f64>>,
}

impl TentFunction {
    /// Builds the tent for heights `y` over `data`.
    pub fn new(data: &DataSet, y: &[f64]) -> Result<Self> {
        let tri = lifted_triangulation(data, y)?;
        Ok(Self::from_triangulation(y, tri))
    }

    /// Builds the tent on a given triangulation; cells are trusted to be
    /// the upper-hull cells for `y`.
    pub fn from_triangulation(y: &[f64], tri: Triangulation) -> Self {
        let mut pieces = Vec::with_capacity(tri.simplices.len());
        let mut z = Vec::with_capacity(tri.simplices.len());
        for s in &tri.simplices {
            let zj = edge_differences(s, y);
            let slope = inverse_transpose_apply(s, &zj);
            let offset = dot(&s.origin, &slope) - y[s.vertices[0]];
            pieces.push(AffinePiece { slope, offset });
            z.push(zj);
        }
        Self {
            y: y.to_vec(),
            tri,
            pieces,
            z,
        }
    }

    pub fn heights(&self) -> &[f64] {
        &self.y
    }

    pub fn triangulation(&self) -> &Triangulation {
        &self.tri
    }

    pub fn pieces(&self) -> &[AffinePiece] {
        &self.pieces
    }

    pub fn edge_differences(&self) -> &[Vec<f64>] {
        &self.z
    }

    /// `h̄_y(x)`, or `−∞` outside the hull.
    pub fn evaluate(&self, x: &[f64]) -> f64 {
        if !self.tri.hull.contains_default(x) {
            return f64::NEG_INFINITY;
        }
        self.min_piece(x)
    }

    /// Minimum over the affine pieces. On `C_n` this equals `h̄_y` because
    /// the tent is concave; no membership test is made.
    pub fn min_piece(&self, x: &[f64]) -> f64 {
        self.pieces
            .iter()
            .map(|p| p.eval(x))
            .fold(f64::INFINITY, f64::min)
    }

    /// `∫_{C_{n,j}} exp h̄_y` for every cell.
    pub fn cell_integrals(&self) -> Result<Vec<f64>> {
        self.tri
            .simplices
            .iter()
            .zip(&self.z)
            .map(|(s, z)| simplex_exp_integral(z, s.absdet, self.y[s.vertices[0]]))
            .collect()
    }
}

/// Free-function form of [`TentFunction::evaluate`].
pub fn tent_evaluate(tent: &TentFunction, x: &[f64]) -> f64 {
    tent.evaluate(x)
}

fn edge_differences(s: &Simplex, y: &[f64]) -> Vec<f64> {
    let base = y[s.vertices[0]];
    s.vertices[1..].iter().map(|&v| y[v] - base).collect()
}

fn inverse_transpose_apply(s: &Simplex, z: &[f64]) -> Vec<f64> {
    let d = z.len();
    // (A^{-T} z)_r = Σ_c (A^{-1})_{c r} z_c; `inverse` is column-major
    (0..d)
        .map(|r| (0..d).map(|c| s.inverse[r * d + c] * z[c]).sum())
        .collect()
}

/// Everything computed from one triangulation at heights `y`.
#[derive(Clone, Debug)]
pub struct ObjectiveReport {
    pub sigma: f64,
    pub tau: f64,
    /// `∫_{C_n} exp h̄_y`.
    pub integral: f64,
    pub subgradient: Vec<f64>,
    /// False when some lifted point touches a facet without being one of
    /// its vertices, i.e. `σ` is not differentiable at `y`.
    pub differentiable: bool,
}

/// Contribution of one cell: its integral and the integrals against each
/// barycentric coordinate, in vertex order.
struct CellTerms {
    integral: f64,
    weighted: Vec<f64>,
}

fn cell_terms(s: &Simplex, y: &[f64]) -> Result<CellTerms> {
    let z = edge_differences(s, y);
    let base = y[s.vertices[0]];
    let top = z.iter().fold(0.0f64, |m, &v| m.max(v));
    if base + top > EXP_CAP || !(base + top).is_finite() {
        return Err(Error::Overflow { exponent: base + top });
    }
    let scale = s.absdet * base.exp();
    let integral = scale * unit_simplex_exp_integral(&z);
    let mut weighted = Vec::with_capacity(z.len() + 1);
    let (shift, value) = integrals::base_weight_integral(&z);
    weighted.push(s.absdet * (base + shift).exp() * value);
    for u in 0..z.len() {
        weighted.push(scale * i_tilde(&z, u));
    }
    Ok(CellTerms { integral, weighted })
}

fn all_cell_terms(tri: &Triangulation, y: &[f64]) -> Result<Vec<CellTerms>> {
    if tri.simplices.len() >= PARALLEL_CELLS {
        tri.simplices.par_iter().map(|s| cell_terms(s, y)).collect()
    } else {
        tri.simplices.iter().map(|s| cell_terms(s, y)).collect()
    }
}

/// `σ`, `∫ exp h̄_y`, and a subgradient written into `grad`.
///
/// Cells are reduced in their (sorted) order, so the result does not depend
/// on the number of worker threads.
pub fn sigma_with_subgradient(data: &DataSet, y: &[f64], grad: &mut [f64]) -> Result<(f64, f64, Triangulation)> {
    let tri = lifted_triangulation(data, y)?;
    let terms = all_cell_terms(&tri, y)?;
    grad.iter_mut()
        .zip(data.weights())
        .for_each(|(g, w)| *g = -w);
    let mut integral = 0.0;
    for (s, t) in tri.simplices.iter().zip(&terms) {
        integral += t.integral;
        for (&v, &wt) in s.vertices.iter().zip(&t.weighted) {
            grad[v] += wt;
        }
    }
    let sigma = -dot(data.weights(), y) + integral;
    Ok((sigma, integral, tri))
}

/// Full report: `σ`, `τ`, the integral, a subgradient, and whether `y` is a
/// point of differentiability.
pub fn objective(data: &DataSet, y: &[f64]) -> Result<ObjectiveReport> {
    let mut subgradient = vec![0.0; data.len()];
    let (sigma, integral, tri) = sigma_with_subgradient(data, y, &mut subgradient)?;
    let tent = TentFunction::from_triangulation(y, tri);
    let touch: Vec<f64> = data.points().map(|x| tent.min_piece(x)).collect();
    let tau = -dot(data.weights(), &touch) + integral;
    let differentiable = !has_loose_touching_pole(data, &tent);
    Ok(ObjectiveReport {
        sigma,
        tau,
        integral,
        subgradient,
        differentiable,
    })
}

/// `τ(y) = −Σ w_i h̄_y(X_i) + ∫ exp h̄_y`.
pub fn tau(data: &DataSet, y: &[f64]) -> Result<f64> {
    objective(data, y).map(|r| r.tau)
}

fn has_loose_touching_pole(data: &DataSet, tent: &TentFunction) -> bool {
    let y = tent.heights();
    let tri = tent.triangulation();
    (0..data.len()).any(|i| {
        let x = data.point(i);
        let tol = TOUCH_TOL * (1.0 + y[i].abs());
        tri.simplices.iter().zip(tent.pieces()).any(|(s, p)| {
            !s.vertices.contains(&i) && (p.eval(x) - y[i]).abs() <= tol && s.contains(x, TOUCH_TOL)
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn triangle() -> DataSet {
        DataSet::new(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap()
    }

    fn random_data(n: usize, d: usize, seed: u64) -> DataSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random::<f64>()).collect()).collect();
        DataSet::new(&pts).unwrap()
    }

    #[test]
    fn flat_triangle_objective() {
        let r = objective(&triangle(), &[0.0, 0.0, 0.0]).unwrap();
        assert!((r.sigma - 0.5).abs() < 1e-15);
        for g in &r.subgradient {
            assert!((g + 1.0 / 6.0).abs() < 1e-15);
        }
        assert!(r.differentiable);
        assert!((r.sigma - r.tau).abs() < 1e-15);
    }

    #[test]
    fn flat_triangle_scalar_minimum_at_log_two() {
        let c = 2f64.ln();
        let at = |v: f64| objective(&triangle(), &[v; 3]).unwrap().sigma;
        assert!((at(c) - (-c + 1.0)).abs() < 1e-14);
        assert!(at(c) < at(c + 1e-3) && at(c) < at(c - 1e-3));
    }

    #[test]
    fn barycentre_value_is_mean_height() {
        let tent = TentFunction::new(&triangle(), &[0.3, -1.2, 2.0]).unwrap();
        let v = tent.evaluate(&[1.0 / 3.0, 1.0 / 3.0]);
        assert!((v - (0.3 - 1.2 + 2.0) / 3.0).abs() < 1e-14);
        assert_eq!(tent.evaluate(&[1.0, 1.0]), f64::NEG_INFINITY);
    }

    #[test]
    fn evaluation_matches_brute_force_point_location() {
        let data = random_data(30, 2, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y: Vec<f64> = (0..30).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let tent = TentFunction::new(&data, &y).unwrap();
        let mut checked = 0;
        while checked < 200 {
            let x = [rng.random::<f64>(), rng.random::<f64>()];
            if !tent.triangulation().hull.contains(&x, 0.0) {
                continue;
            }
            let s = tent
                .triangulation()
                .simplices
                .iter()
                .find(|s| s.contains(&x, 1e-12))
                .expect("covered");
            let w = s.chart_coords(&x);
            let base = y[s.vertices[0]];
            let interp = base + w.iter().zip(&s.vertices[1..]).map(|(wl, &v)| wl * (y[v] - base)).sum::<f64>();
            assert!((tent.evaluate(&x) - interp).abs() < 1e-10);
            checked += 1;
        }
    }

    #[test]
    fn lowering_an_interior_pole_changes_sigma_not_tau() {
        let data = DataSet::new(&[
            vec![0.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.2, 0.2],
        ])
        .unwrap();
        let before = objective(&data, &[0.0, 0.0, 0.0, -0.1]).unwrap();
        let after = objective(&data, &[0.0, 0.0, 0.0, -0.5]).unwrap();
        assert!((before.tau - after.tau).abs() < 1e-15);
        assert!(after.sigma > before.sigma);
        assert!(before.sigma > before.tau);
    }

    #[test]
    fn touching_interior_pole_is_not_differentiable() {
        let data = DataSet::new(&[
            vec![0.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.2, 0.2],
        ])
        .unwrap();
        assert!(!objective(&data, &[0.0; 4]).unwrap().differentiable);
        assert!(objective(&data, &[0.0, 0.0, 0.0, 0.1]).unwrap().differentiable);
        assert!(objective(&data, &[0.0, 0.0, 0.0, -0.1]).unwrap().differentiable);
    }

    #[test]
    fn subgradient_matches_finite_differences_at_generic_heights() {
        let data = random_data(12, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let y: Vec<f64> = (0..12).map(|_| rng.random::<f64>() - 0.5).collect();
        let r = objective(&data, &y).unwrap();
        assert!(r.differentiable);
        let h = 1e-6;
        for i in 0..12 {
            let mut yp = y.clone();
            yp[i] += h;
            let mut ym = y.clone();
            ym[i] -= h;
            let fd = (objective(&data, &yp).unwrap().sigma - objective(&data, &ym).unwrap().sigma) / (2.0 * h);
            assert!((fd - r.subgradient[i]).abs() <= 1e-5 * r.subgradient[i].abs().max(1e-3), "coordinate {i}");
        }
    }
}
