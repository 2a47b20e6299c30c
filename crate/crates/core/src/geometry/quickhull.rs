//! Quickhull over lifted points `(x_i, y_i) ∈ R^{d+1}` with an extra vertex at
//! infinity in the downward vertical direction.
//!
//! Adding the point at infinity makes the hull full-dimensional even when all
//! heights are equal, and it splits the final facets into two families:
//! facets that contain the infinite vertex are vertical and project to the
//! boundary of `conv(x_i)`, the remaining facets form the upper hull whose
//! projection is the regular triangulation induced by the heights.
//!
//! Points that lie within a tolerance of a facet are treated as not visible,
//! so a lifted point sitting exactly on the upper hull never becomes a
//! vertex. For upper facets the tolerance is a height: `eps` measured
//! vertically. Measured along the normal instead, a steep facet (from a
//! very low point at the edge of the data) would hide points well above it,
//! and the hull would come out folded.

use crate::error::{Error, Result};
use crate::linalg::{dot, orthogonal_complement};

const INF: usize = usize::MAX;

pub(crate) struct LiftedHull {
    /// Upper facets as sorted `(d+1)`-tuples of point indices.
    pub upper: Vec<Vec<usize>>,
    pub boundary: Vec<BoundaryFacet>,
}

pub(crate) struct BoundaryFacet {
    pub vertices: Vec<usize>,
    /// Unit outward normal in `R^d`.
    pub normal: Vec<f64>,
    pub offset: f64,
}

struct Facet {
    vertices: Vec<usize>,
    /// `neighbors[k]` shares every vertex of this facet except `vertices[k]`.
    neighbors: Vec<usize>,
    normal: Vec<f64>,
    offset: f64,
    outside: Vec<usize>,
    alive: bool,
    /// Distances above this count as visible.
    tol: f64,
}

struct Builder<'a> {
    d: usize,
    coords: &'a [f64],
    heights: &'a [f64],
    facets: Vec<Facet>,
    interior: Vec<f64>,
    eps: f64,
    /// Smallest tolerance along a normal, about the rounding error of
    /// [`Builder::distance`].
    floor: f64,
    visit: Vec<u32>,
    stamp: u32,
}

pub(crate) fn lifted_hull(d: usize, coords: &[f64], heights: &[f64]) -> Result<LiftedHull> {
    let n = heights.len();
    debug_assert_eq!(coords.len(), n * d);
    if n < d + 1 {
        return Err(Error::DegenerateInput(format!(
            "need at least {} points in dimension {d}, got {n}",
            d + 1
        )));
    }
    if coords.iter().chain(heights).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite coordinate or height".into()));
    }
    let scale = coords
        .iter()
        .chain(heights)
        .fold(1.0f64, |m, v| m.max(v.abs()));
    let mut b = Builder {
        d,
        coords,
        heights,
        facets: Vec::new(),
        interior: vec![0.0; d + 1],
        eps: 1e-12 * scale * (d + 1) as f64,
        floor: 1e-15 * scale * (d + 1) as f64,
        visit: Vec::new(),
        stamp: 0,
    };
    let simplex = b.initial_simplex()?;
    b.build_initial(&simplex)?;
    b.run()?;
    Ok(b.finish())
}

impl<'a> Builder<'a> {
    fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.d..(i + 1) * self.d]
    }

    fn distance(&self, f: &Facet, i: usize) -> f64 {
        let d = self.d;
        dot(&f.normal[..d], self.point(i)) + f.normal[d] * self.heights[i] - f.offset
    }

    /// Chooses `d+1` points whose projections are affinely independent,
    /// greedily maximising the residual against the span found so far.
    fn initial_simplex(&self) -> Result<Vec<usize>> {
        let d = self.d;
        let n = self.heights.len();
        let first = (0..n)
            .min_by(|&a, &b| {
                self.point(a)[0]
                    .partial_cmp(&self.point(b)[0])
                    .unwrap()
                    .then(a.cmp(&b))
            })
            .unwrap();
        let origin = self.point(first).to_vec();
        let extent = (0..n)
            .map(|i| {
                self.point(i)
                    .iter()
                    .zip(&origin)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        let mut chosen = vec![first];
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for _ in 0..d {
            let mut best = (0.0, usize::MAX, Vec::new());
            for i in 0..n {
                if chosen.contains(&i) {
                    continue;
                }
                let mut r: Vec<f64> = self.point(i).iter().zip(&origin).map(|(a, b)| a - b).collect();
                for q in &basis {
                    let c = dot(&r, q);
                    r.iter_mut().zip(q).for_each(|(v, qv)| *v -= c * qv);
                }
                let len = dot(&r, &r).sqrt();
                if len > best.0 {
                    best = (len, i, r);
                }
            }
            if best.1 == usize::MAX || best.0 <= 1e-10 * extent.max(f64::MIN_POSITIVE) {
                return Err(Error::DegenerateInput(format!(
                    "affine hull of the points has dimension {} < {d}",
                    basis.len()
                )));
            }
            let (len, idx, r) = best;
            basis.push(r.into_iter().map(|v| v / len).collect());
            chosen.push(idx);
        }
        Ok(chosen)
    }

    fn make_facet(&self, vertices: Vec<usize>) -> Result<Facet> {
        let d = self.d;
        let dd = d + 1;
        let base = *vertices.iter().find(|&&v| v != INF).unwrap();
        let mut rows = Vec::with_capacity(d * dd);
        for &v in &vertices {
            if v == base {
                continue;
            }
            if v == INF {
                rows.extend(std::iter::repeat_n(0.0, d));
                rows.push(-1.0);
            } else {
                rows.extend(self.point(v).iter().zip(self.point(base)).map(|(a, b)| a - b));
                rows.push(self.heights[v] - self.heights[base]);
            }
        }
        let mut normal = vec![0.0; dd];
        orthogonal_complement(&rows, dd, &mut normal);
        let len = dot(&normal, &normal).sqrt();
        if len == 0.0 || !len.is_finite() {
            return Err(Error::DegenerateInput(
                "hull facet through affinely dependent lifted points".into(),
            ));
        }
        normal.iter_mut().for_each(|v| *v /= len);
        let mut offset = dot(&normal[..d], self.point(base)) + normal[d] * self.heights[base];
        if dot(&normal, &self.interior) - offset > 0.0 {
            normal.iter_mut().for_each(|v| *v = -*v);
            offset = -offset;
        }
        let tol = if vertices.contains(&INF) {
            self.eps
        } else {
            (self.eps * normal[d].abs()).max(self.floor)
        };
        Ok(Facet {
            tol,
            neighbors: vec![usize::MAX; vertices.len()],
            vertices,
            normal,
            offset,
            outside: Vec::new(),
            alive: true,
        })
    }

    fn build_initial(&mut self, simplex: &[usize]) -> Result<()> {
        let d = self.d;
        let (ymin, ymax) = simplex
            .iter()
            .map(|&i| self.heights[i])
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        let mut interior = vec![0.0; d + 1];
        for &i in simplex {
            for k in 0..d {
                interior[k] += self.point(i)[k] / simplex.len() as f64;
            }
            interior[d] += self.heights[i] / simplex.len() as f64;
        }
        interior[d] -= 1.0 + (ymax - ymin);
        self.interior = interior;

        let mut all: Vec<usize> = simplex.to_vec();
        all.push(INF);
        for skip in 0..all.len() {
            let verts: Vec<usize> = all
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != skip)
                .map(|(_, &v)| v)
                .collect();
            let mut f = self.make_facet(verts)?;
            // the neighbour opposite all[m] is the facet that omits all[m]
            for (pos, m) in (0..all.len()).filter(|&m| m != skip).enumerate() {
                f.neighbors[pos] = m;
            }
            self.facets.push(f);
        }

        let n = self.heights.len();
        for i in 0..n {
            if simplex.contains(&i) {
                continue;
            }
            let mut best = (0.0, usize::MAX);
            for (fi, f) in self.facets.iter().enumerate() {
                let dist = self.distance(f, i);
                if dist > f.tol && dist > best.0 {
                    best = (dist, fi);
                }
            }
            if best.1 != usize::MAX {
                self.facets[best.1].outside.push(i);
            }
        }
        Ok(())
    }

    fn run(&mut self) -> Result<()> {
        let mut stack: Vec<usize> = (0..self.facets.len()).collect();
        while let Some(fi) = stack.pop() {
            if !self.facets[fi].alive || self.facets[fi].outside.is_empty() {
                continue;
            }
            let (apex, _) = self.facets[fi]
                .outside
                .iter()
                .map(|&i| (i, self.distance(&self.facets[fi], i)))
                .fold((usize::MAX, f64::NEG_INFINITY), |b, c| if c.1 > b.1 { c } else { b });

            let visible = self.visible_set(fi, apex);
            let created = self.add_cone(&visible, apex)?;

            let mut orphans = Vec::new();
            for &v in &visible {
                self.facets[v].alive = false;
                orphans.append(&mut self.facets[v].outside);
            }
            for q in orphans {
                if q == apex {
                    continue;
                }
                let mut best = (0.0, usize::MAX);
                for &nf in &created {
                    let f = &self.facets[nf];
                    let dist = self.distance(f, q);
                    if dist > f.tol && dist > best.0 {
                        best = (dist, nf);
                    }
                }
                if best.1 != usize::MAX {
                    self.facets[best.1].outside.push(q);
                }
            }
            stack.extend(created);
        }
        Ok(())
    }

    fn visible_set(&mut self, start: usize, apex: usize) -> Vec<usize> {
        self.stamp += 1;
        if self.visit.len() < self.facets.len() {
            self.visit.resize(self.facets.len(), 0);
        }
        let stamp = self.stamp;
        self.visit[start] = stamp;
        let mut visible = vec![start];
        let mut head = 0;
        while head < visible.len() {
            let f = visible[head];
            head += 1;
            for k in 0..self.facets[f].neighbors.len() {
                let nb = self.facets[f].neighbors[k];
                if self.visit[nb] == stamp {
                    continue;
                }
                if self.distance(&self.facets[nb], apex) > self.facets[nb].tol {
                    self.visit[nb] = stamp;
                    visible.push(nb);
                }
            }
        }
        visible
    }

    /// Replaces the visible region by a cone from `apex` over its horizon.
    fn add_cone(&mut self, visible: &[usize], apex: usize) -> Result<Vec<usize>> {
        let stamp = self.stamp;
        let mut created = Vec::new();
        // Open ridges through the apex. Cones are small, so a linear scan
        // beats hashing.
        let mut ridges: Vec<(Vec<usize>, usize, usize)> = Vec::new();
        for &f in visible {
            for k in 0..self.facets[f].vertices.len() {
                let nb = self.facets[f].neighbors[k];
                if self.visit[nb] == stamp {
                    continue;
                }
                let mut verts = self.facets[f].vertices.clone();
                verts[k] = apex;
                let mut nf = self.make_facet(verts)?;
                nf.neighbors[k] = nb;
                let id = self.facets.len();
                if let Some(slot) = self.facets[nb].neighbors.iter_mut().find(|s| **s == f) {
                    *slot = id;
                }
                // link new facets across ridges that contain the apex
                for pos in 0..nf.vertices.len() {
                    if pos == k {
                        continue;
                    }
                    let mut ridge: Vec<usize> = nf
                        .vertices
                        .iter()
                        .enumerate()
                        .filter(|&(q, _)| q != pos)
                        .map(|(_, &v)| v)
                        .collect();
                    ridge.sort_unstable();
                    if let Some(at) = ridges.iter().position(|r| r.0 == ridge) {
                        let (_, other, other_pos) = ridges.swap_remove(at);
                        nf.neighbors[pos] = other;
                        self.facets[other].neighbors[other_pos] = id;
                    } else {
                        ridges.push((ridge, id, pos));
                    }
                }
                self.facets.push(nf);
                self.visit.push(0);
                created.push(id);
            }
        }
        if !ridges.is_empty() {
            return Err(Error::DegenerateInput(
                "inconsistent horizon while building lifted hull".into(),
            ));
        }
        Ok(created)
    }

    fn finish(self) -> LiftedHull {
        let d = self.d;
        let mut upper = Vec::new();
        let mut boundary = Vec::new();
        for f in self.facets.into_iter().filter(|f| f.alive) {
            if f.vertices.contains(&INF) {
                let mut vertices: Vec<usize> = f.vertices.into_iter().filter(|&v| v != INF).collect();
                vertices.sort_unstable();
                let len = f.normal[..d].iter().map(|v| v * v).sum::<f64>().sqrt();
                boundary.push(BoundaryFacet {
                    vertices,
                    normal: f.normal[..d].iter().map(|v| v / len).collect(),
                    offset: f.offset / len,
                });
            } else {
                let mut vertices = f.vertices;
                vertices.sort_unstable();
                upper.push(vertices);
            }
        }
        upper.sort();
        boundary.sort_by(|a, b| a.vertices.cmp(&b.vertices));
        LiftedHull { upper, boundary }
    }
}
