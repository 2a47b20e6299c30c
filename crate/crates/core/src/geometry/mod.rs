//! Convex hulls, lifted (regular) triangulations and point membership.
//!
//! Everything here is driven by one routine: the upper hull of the lifted
//! points `(X_i, y_i)`. Its upper facets project to the cells on which the
//! tent function is affine; its vertical facets project to the boundary of
//! the convex hull `C_n` of the data.

mod quickhull;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{det_in_place, dot, factorial, inverse_and_det};

/// A weighted sample of `n` points in `R^d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSet {
    dim: usize,
    coords: Vec<f64>,
    weights: Vec<f64>,
    #[serde(skip)]
    general_position: Option<bool>,
}

impl DataSet {
    /// Builds an equally weighted data set.
    pub fn new(points: &[Vec<f64>]) -> Result<Self> {
        let n = points.len();
        Self::weighted(points, &vec![1.0 / n.max(1) as f64; n])
    }

    /// Builds a weighted data set. Weights must be positive; they are
    /// rescaled to sum to one.
    pub fn weighted(points: &[Vec<f64>], weights: &[f64]) -> Result<Self> {
        let dim = points.first().map(Vec::len).unwrap_or(0);
        if points.iter().any(|p| p.len() != dim) {
            return Err(Error::InvalidInput("points have inconsistent dimensions".into()));
        }
        let coords: Vec<f64> = points.iter().flatten().copied().collect();
        Self::from_flat(dim, coords, weights.to_vec())
    }

    /// Builds a data set from row-major coordinates.
    pub fn from_flat(dim: usize, coords: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidInput("dimension must be positive".into()));
        }
        if coords.len() % dim != 0 || coords.len() / dim != weights.len() {
            return Err(Error::InvalidInput(format!(
                "{} coordinates and {} weights do not describe points in dimension {dim}",
                coords.len(),
                weights.len()
            )));
        }
        let n = weights.len();
        if n < dim + 1 {
            return Err(Error::InvalidInput(format!(
                "need n >= d+1 = {} points, got {n}",
                dim + 1
            )));
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite coordinate".into()));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::InvalidInput("weights must be positive and finite".into()));
        }
        let total: f64 = weights.iter().sum();
        let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();

        let mut order: Vec<usize> = (0..n).collect();
        let row = |i: usize| &coords[i * dim..(i + 1) * dim];
        order.sort_by(|&a, &b| row(a).partial_cmp(row(b)).unwrap());
        if let Some(w) = order.windows(2).find(|w| row(w[0]) == row(w[1])) {
            return Err(Error::InvalidInput(format!(
                "points {} and {} coincide",
                w[0].min(w[1]),
                w[0].max(w[1])
            )));
        }
        Ok(Self {
            dim,
            coords,
            weights,
            general_position: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.coords.chunks_exact(self.dim)
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn is_uniformly_weighted(&self) -> bool {
        let w = 1.0 / self.len() as f64;
        self.weights.iter().all(|v| (v - w).abs() <= 1e-15)
    }

    /// Result of the last [`DataSet::check_general_position`] call.
    pub fn general_position(&self) -> Option<bool> {
        self.general_position
    }

    /// Checks that every `d+1` subset is affinely independent by brute
    /// force. Cost is `C(n, d+1)` determinants, so this is opt-in.
    pub fn check_general_position(&mut self) -> bool {
        let d = self.dim;
        let n = self.len();
        let scale = self.coords.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let tol = 1e-12 * scale.powi(d as i32);
        let mut idx: Vec<usize> = (0..=d).collect();
        let mut buf = vec![0.0; d * d];
        let ok = loop {
            for (l, &j) in idx[1..].iter().enumerate() {
                for k in 0..d {
                    buf[l * d + k] = self.point(j)[k] - self.point(idx[0])[k];
                }
            }
            if det_in_place(&mut buf, d).abs() <= tol {
                break false;
            }
            // next combination in lexicographic order
            let mut pos = d as isize;
            while pos >= 0 && idx[pos as usize] == n - (d + 1) + pos as usize {
                pos -= 1;
            }
            if pos < 0 {
                break true;
            }
            let p = pos as usize;
            idx[p] += 1;
            for q in p + 1..=d {
                idx[q] = idx[q - 1] + 1;
            }
        };
        self.general_position = Some(ok);
        ok
    }

    /// Drops points whose weight is below `threshold` and renormalises the
    /// rest. Returns the reduced set and the original indices kept.
    pub fn drop_negligible(&self, threshold: f64) -> Result<(DataSet, Vec<usize>)> {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| self.weights[i] >= threshold).collect();
        let coords = keep.iter().flat_map(|&i| self.point(i).to_vec()).collect();
        let weights = keep.iter().map(|&i| self.weights[i]).collect();
        Ok((Self::from_flat(self.dim, coords, weights)?, keep))
    }

    /// Weighted mean and covariance (row-major `d×d`).
    pub fn moments(&self) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim;
        let mut mean = vec![0.0; d];
        for (p, w) in self.points().zip(&self.weights) {
            mean.iter_mut().zip(p).for_each(|(m, x)| *m += w * x);
        }
        let mut cov = vec![0.0; d * d];
        for (p, w) in self.points().zip(&self.weights) {
            for r in 0..d {
                for c in 0..d {
                    cov[r * d + c] += w * (p[r] - mean[r]) * (p[c] - mean[c]);
                }
            }
        }
        (mean, cov)
    }
}

/// One supporting hyperplane of the hull, with the data points on it.
#[derive(Clone, Debug, PartialEq)]
pub struct HullFacet {
    pub normal: Vec<f64>,
    pub offset: f64,
    pub vertices: Vec<usize>,
}

/// Boundary description of `C_n`. Facets are simplicial: a flat face with
/// more than `d` vertices appears as several coplanar facets.
#[derive(Clone, Debug, PartialEq)]
pub struct HullFacets {
    pub facets: Vec<HullFacet>,
    pub volume: f64,
}

impl HullFacets {
    /// True iff `⟨normal, x⟩ ≤ offset + tol` for every facet.
    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        self.facets.iter().all(|f| dot(&f.normal, x) <= f.offset + tol)
    }

    /// Membership with the default scale-aware tolerance `1e-8 (1 + ‖x‖)`.
    pub fn contains_default(&self, x: &[f64]) -> bool {
        self.contains(x, default_tolerance(x))
    }
}

pub fn default_tolerance(x: &[f64]) -> f64 {
    1e-8 * (1.0 + dot(x, x).sqrt())
}

/// Free-function form of [`HullFacets::contains`].
pub fn contains(hull: &HullFacets, x: &[f64], tol: f64) -> bool {
    hull.contains(x, tol)
}

/// A cell `conv(X_{j_1}, …, X_{j_{d+1}})` with its affine chart
/// `w ↦ A w + α` from the unit simplex.
#[derive(Clone, Debug, PartialEq)]
pub struct Simplex {
    pub vertices: Vec<usize>,
    /// Column-major `d×d`; column `l` is `X_{j_{l+1}} − X_{j_1}`.
    pub edges: Vec<f64>,
    pub origin: Vec<f64>,
    pub absdet: f64,
    /// Column-major inverse of `edges`.
    pub inverse: Vec<f64>,
}

impl Simplex {
    fn new(data: &DataSet, vertices: Vec<usize>) -> Option<Self> {
        let d = data.dim();
        let origin = data.point(vertices[0]).to_vec();
        let mut edges = Vec::with_capacity(d * d);
        for &v in &vertices[1..] {
            edges.extend(data.point(v).iter().zip(&origin).map(|(a, b)| a - b));
        }
        let (inverse, det) = inverse_and_det(&edges, d)?;
        Some(Self {
            vertices,
            edges,
            origin,
            absdet: det.abs(),
            inverse,
        })
    }

    pub fn dim(&self) -> usize {
        self.origin.len()
    }

    pub fn volume(&self) -> f64 {
        self.absdet / factorial(self.dim())
    }

    /// Chart coordinates `w = A^{-1}(x − α)`.
    pub fn chart_coords(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let mut w = vec![0.0; d];
        for c in 0..d {
            let diff = x[c] - self.origin[c];
            for r in 0..d {
                w[r] += self.inverse[c * d + r] * diff;
            }
        }
        w
    }

    /// Maps chart coordinates back to `R^d`.
    pub fn map(&self, w: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let mut x = self.origin.clone();
        for (c, wc) in w.iter().enumerate() {
            for r in 0..d {
                x[r] += self.edges[c * d + r] * wc;
            }
        }
        x
    }

    /// Whether `x` lies in the simplex up to `tol` in chart coordinates.
    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        let w = self.chart_coords(x);
        w.iter().all(|&v| v >= -tol) && w.iter().sum::<f64>() <= 1.0 + tol
    }
}

/// Cells of `C_n` together with its boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct Triangulation {
    pub simplices: Vec<Simplex>,
    pub hull: HullFacets,
}

impl Triangulation {
    /// Builds charts for explicitly given vertex tuples (e.g. read from a
    /// model file). Tuples with zero volume are rejected.
    pub fn from_simplices(data: &DataSet, cells: Vec<Vec<usize>>, hull: HullFacets) -> Result<Self> {
        let d = data.dim();
        let mut simplices = Vec::with_capacity(cells.len());
        for cell in cells {
            if cell.len() != d + 1 || cell.iter().any(|&v| v >= data.len()) {
                return Err(Error::InvalidInput(format!("invalid simplex {cell:?}")));
            }
            let s = Simplex::new(data, cell.clone())
                .ok_or_else(|| Error::DegenerateInput(format!("simplex {cell:?} has zero volume")))?;
            simplices.push(s);
        }
        Ok(Self { simplices, hull })
    }

    pub fn volume(&self) -> f64 {
        self.simplices.iter().map(Simplex::volume).sum()
    }

    /// Index of a cell containing `x`, by linear search.
    pub fn locate(&self, x: &[f64], tol: f64) -> Option<usize> {
        self.simplices.iter().position(|s| s.contains(x, tol))
    }
}

fn hull_from_boundary(data_dim: usize, coords: &[f64], boundary: Vec<quickhull::BoundaryFacet>) -> HullFacets {
    let d = data_dim;
    let n = coords.len() / d;
    let facets: Vec<HullFacet> = boundary
        .into_iter()
        .map(|b| HullFacet {
            normal: b.normal,
            offset: b.offset,
            vertices: b.vertices,
        })
        .collect();
    // volume by coning every boundary facet from the vertex centroid
    let mut centre = vec![0.0; d];
    for i in 0..n {
        for k in 0..d {
            centre[k] += coords[i * d + k] / n as f64;
        }
    }
    let mut buf = vec![0.0; d * d];
    let mut volume = 0.0;
    for f in &facets {
        for (r, &v) in f.vertices.iter().enumerate() {
            for k in 0..d {
                buf[r * d + k] = coords[v * d + k] - centre[k];
            }
        }
        volume += det_in_place(&mut buf, d).abs();
    }
    HullFacets {
        facets,
        volume: volume / factorial(d),
    }
}

/// Convex hull of a point cloud in `R^d`.
pub fn convex_hull<P: AsRef<[f64]>>(points: &[P]) -> Result<HullFacets> {
    let d = points.first().map(|p| p.as_ref().len()).unwrap_or(0);
    if d == 0 || points.iter().any(|p| p.as_ref().len() != d) {
        return Err(Error::InvalidInput("points must share a positive dimension".into()));
    }
    let coords: Vec<f64> = points.iter().flat_map(|p| p.as_ref().to_vec()).collect();
    convex_hull_flat(d, &coords)
}

pub(crate) fn convex_hull_flat(d: usize, coords: &[f64]) -> Result<HullFacets> {
    let heights = vec![0.0; coords.len() / d];
    let lifted = quickhull::lifted_hull(d, coords, &heights)?;
    Ok(hull_from_boundary(d, coords, lifted.boundary))
}

/// Relative jitter on the heights for successive rebuilds of a lifted hull
/// whose cells fail the volume check.
const JOGGLE: [f64; 5] = [0.0, 1e-11, 1e-10, 1e-9, 1e-8];
/// Cells must cover the hull to this relative accuracy.
const COVER_TOL: f64 = 1e-9;

/// Projects the upper hull of `{(X_i, y_i)}` onto `C_n`.
///
/// Simplices are listed with ascending vertex indices, sorted
/// lexicographically, so identical input yields an identical list. Lifted
/// points lying on an upper facet (within a relative `1e-12` in height) are
/// never vertices.
///
/// Nearly coplanar lifted points can make the hull come out folded, with
/// cells overlapping. That is detected by comparing the cell volumes with
/// the hull volume, and the hull is rebuilt from heights jittered by a
/// fixed pseudo-random pattern of growing size. The cells then belong to
/// heights within `1e-8` (relative) of `y`.
pub fn lifted_triangulation(data: &DataSet, y: &[f64]) -> Result<Triangulation> {
    if y.len() != data.len() {
        return Err(Error::InvalidInput(format!(
            "expected {} heights, got {}",
            data.len(),
            y.len()
        )));
    }
    let scale = y.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let mut last_err = None;
    for (attempt, &j) in JOGGLE.iter().enumerate() {
        let heights = if j == 0.0 { y.to_vec() } else { joggled(y, j * scale, attempt as u64) };
        match try_lifted(data, &heights) {
            Ok(tri) => {
                let cells: f64 = tri.simplices.iter().map(Simplex::volume).sum();
                if (cells - tri.hull.volume).abs() <= COVER_TOL * tri.hull.volume {
                    return Ok(tri);
                }
                last_err = Some(Error::DegenerateInput(format!(
                    "lifted cells cover volume {cells}, hull has {}",
                    tri.hull.volume
                )));
            }
            Err(e @ Error::DegenerateInput(_)) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last_err.unwrap())
}

fn joggled(y: &[f64], size: f64, stream: u64) -> Vec<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(stream);
    y.iter().map(|v| v + size * rng.random_range(-1.0..1.0)).collect()
}

fn try_lifted(data: &DataSet, y: &[f64]) -> Result<Triangulation> {
    let lifted = quickhull::lifted_hull(data.dim(), data.coords(), y)?;
    let hull = hull_from_boundary(data.dim(), data.coords(), lifted.boundary);
    let simplices = lifted
        .upper
        .into_iter()
        .filter_map(|cell| Simplex::new(data, cell))
        .filter(|s| s.absdet > 0.0)
        .collect();
    Ok(Triangulation { simplices, hull })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..d).map(|_| rng.random::<f64>()).collect()).collect()
    }

    #[test]
    fn unit_square_has_four_facets_and_unit_area() {
        let pts = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![1.0, 1.0], vec![0.0, 1.0]];
        let hull = convex_hull(&pts).unwrap();
        assert_eq!(hull.facets.len(), 4);
        assert!((hull.volume - 1.0).abs() < 1e-14);
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let pts = vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 2.0]];
        assert!(matches!(convex_hull(&pts), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn facets_match_brute_force_enumeration() {
        let pts = random_points(10, 3, 7);
        let hull = convex_hull(&pts).unwrap();
        let mut found: Vec<Vec<usize>> = hull.facets.iter().map(|f| f.vertices.clone()).collect();
        found.sort();

        // every triple whose plane leaves all other points on one side
        let mut expected = Vec::new();
        for a in 0..10 {
            for b in a + 1..10 {
                for c in b + 1..10 {
                    let u: Vec<f64> = (0..3).map(|k| pts[b][k] - pts[a][k]).collect();
                    let v: Vec<f64> = (0..3).map(|k| pts[c][k] - pts[a][k]).collect();
                    let nrm = [
                        u[1] * v[2] - u[2] * v[1],
                        u[2] * v[0] - u[0] * v[2],
                        u[0] * v[1] - u[1] * v[0],
                    ];
                    let side: Vec<f64> = (0..10)
                        .filter(|&i| i != a && i != b && i != c)
                        .map(|i| (0..3).map(|k| nrm[k] * (pts[i][k] - pts[a][k])).sum())
                        .collect();
                    if side.iter().all(|&s| s < 0.0) || side.iter().all(|&s| s > 0.0) {
                        expected.push(vec![a, b, c]);
                    }
                }
            }
        }
        assert_eq!(found, expected);
        for f in &hull.facets {
            for p in &pts {
                assert!(dot(&f.normal, p) <= f.offset + 1e-12);
            }
        }
    }

    #[test]
    fn membership_of_centroid_vertex_and_far_point() {
        let pts = vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![0.0, 2.0]];
        let hull = convex_hull(&pts).unwrap();
        assert!(hull.contains(&[2.0 / 3.0, 2.0 / 3.0], 1e-9));
        assert!(hull.contains(&[2.0, 0.0], 1e-9));
        // one unit beyond the hypotenuse x + y = 2
        let s = 1.0 / 2f64.sqrt();
        assert!(!hull.contains(&[1.0 + s, 1.0 + s], 1e-9));
    }

    #[test]
    fn flat_heights_triangulate_the_hull() {
        let pts = random_points(40, 2, 3);
        let data = DataSet::new(&pts).unwrap();
        let tri = lifted_triangulation(&data, &vec![0.5; 40]).unwrap();
        let hull = convex_hull(&pts).unwrap();
        assert!((tri.volume() - hull.volume).abs() <= 1e-8 * hull.volume);
    }

    #[test]
    fn square_with_low_centre_pole_skips_the_centre() {
        let pts = vec![
            vec![0.0, 0.0],
            vec![1.0, 0.0],
            vec![1.0, 1.0],
            vec![0.0, 1.0],
            vec![0.5, 0.5],
        ];
        let data = DataSet::new(&pts).unwrap();
        let tri = lifted_triangulation(&data, &[0.0, 0.0, 0.0, 0.0, -1.0]).unwrap();
        assert!(tri.simplices.iter().all(|s| !s.vertices.contains(&4)));
        assert!((tri.volume() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn one_dimensional_majorant() {
        let data = DataSet::new(&[vec![0.0], vec![1.0], vec![2.0]]).unwrap();
        let peaked = lifted_triangulation(&data, &[0.0, 1.0, 0.0]).unwrap();
        let cells: Vec<_> = peaked.simplices.iter().map(|s| s.vertices.clone()).collect();
        assert_eq!(cells, vec![vec![0, 1], vec![1, 2]]);
        let dipped = lifted_triangulation(&data, &[0.0, -1.0, 0.0]).unwrap();
        let cells: Vec<_> = dipped.simplices.iter().map(|s| s.vertices.clone()).collect();
        assert_eq!(cells, vec![vec![0, 2]]);
    }

    #[test]
    fn duplicate_points_are_rejected() {
        let pts = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]];
        assert!(matches!(DataSet::new(&pts), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn general_position_check_flags_collinear_triples() {
        let mut data = DataSet::new(&[
            vec![0.0, 0.0],
            vec![1.0, 0.0],
            vec![2.0, 0.0],
            vec![0.0, 1.0],
        ])
        .unwrap();
        assert!(!data.check_general_position());
        let mut data = DataSet::new(&random_points(12, 2, 1)).unwrap();
        assert!(data.check_general_position());
        assert_eq!(data.general_position(), Some(true));
    }

    #[test]
    fn nearly_coplanar_lifts_still_tile_the_hull() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let pts: Vec<Vec<f64>> = (0..12)
            .flat_map(|i| (0..12).map(move |j| vec![i as f64 / 11.0, j as f64 / 11.0]))
            .collect();
        let data = DataSet::new(&pts).unwrap();
        for noise in [0.0, 1e-15, 1e-13, 1e-11] {
            let y: Vec<f64> = pts
                .iter()
                .map(|p| 0.3 * p[0] - 0.7 * p[1] + 1.0 + noise * rng.random_range(-1.0..1.0))
                .collect();
            let tri = lifted_triangulation(&data, &y).unwrap();
            let cells: f64 = tri.simplices.iter().map(Simplex::volume).sum();
            assert!((cells - 1.0).abs() < 1e-9, "{noise}: {cells}");
            assert!((tri.hull.volume - 1.0).abs() < 1e-12);
        }
    }
}
