//! Finite mixtures of log-concave densities fitted by EM, cluster
//! assignment, and a Gaussian-mixture EM baseline.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::DataSet;
use crate::mle::{fit_from, gaussian_start, LogConcaveDensity, NEGLIGIBLE_WEIGHT};
use crate::sampler::{derive_seed, rng_from_seed, Sampler};
use crate::solver::SolverOptions;

/// A component needs `d+1` points whose responsibility exceeds this.
const CARRIES_WEIGHT: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct MixtureModel {
    pub proportions: Vec<f64>,
    pub components: Vec<LogConcaveDensity>,
    /// Mixture log-likelihood after every EM iteration.
    pub loglik_trace: Vec<f64>,
}

impl MixtureModel {
    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        self.proportions
            .iter()
            .zip(&self.components)
            .map(|(p, c)| p * c.density(x))
            .sum()
    }

    /// `Σ_i log Σ_j π_j f_j(X_i)`.
    pub fn log_likelihood(&self, data: &DataSet) -> f64 {
        data.points().map(|x| log_sum_exp(&self.weighted_log_densities(x))).sum()
    }

    /// `log π_j + log f_j(x)` for every component.
    fn weighted_log_densities(&self, x: &[f64]) -> Vec<f64> {
        self.proportions
            .iter()
            .zip(&self.components)
            .map(|(p, c)| p.ln() + c.log_density(x))
            .collect()
    }

    /// Exact draws: a component by its proportion, then a draw from it.
    pub fn sample(&self, count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        let samplers = self.components.iter().map(Sampler::new).collect::<Result<Vec<_>>>()?;
        let pick = rand_distr::weighted::WeightedAliasIndex::new(self.proportions.clone())
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        let mut rng = rng_from_seed(seed);
        Ok((0..count)
            .map(|_| {
                let j = rand_distr::Distribution::sample(&pick, &mut rng);
                samplers[j].draw(&mut rng).point
            })
            .collect())
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Posterior component probabilities, `n × p` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Responsibilities {
    pub n: usize,
    pub p: usize,
    pub values: Vec<f64>,
}

impl Responsibilities {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.p..(i + 1) * self.p]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.values[i * self.p + j]).collect()
    }

    /// Hard 0/1 responsibilities from zero-based labels.
    pub fn hard(labels: &[usize], p: usize) -> Self {
        let mut values = vec![0.0; labels.len() * p];
        for (i, &l) in labels.iter().enumerate() {
            values[i * p + l] = 1.0;
        }
        Self {
            n: labels.len(),
            p,
            values,
        }
    }
}

/// What to do with a point outside every component's support.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OrphanPolicy {
    Fail,
    Uniform,
}

/// `θ_{ij} = π_j f_j(X_i) / Σ_r π_r f_r(X_i)`, computed in log space.
pub fn e_step(model: &MixtureModel, data: &DataSet) -> Result<Responsibilities> {
    e_step_with(model, data, OrphanPolicy::Fail)
}

pub fn e_step_with(model: &MixtureModel, data: &DataSet, policy: OrphanPolicy) -> Result<Responsibilities> {
    let p = model.len();
    let mut values = Vec::with_capacity(data.len() * p);
    for (i, x) in data.points().enumerate() {
        let logs = model.weighted_log_densities(x);
        let total = log_sum_exp(&logs);
        if total == f64::NEG_INFINITY {
            match policy {
                OrphanPolicy::Fail => return Err(Error::OrphanPoint(i)),
                OrphanPolicy::Uniform => values.extend(std::iter::repeat_n(1.0 / p as f64, p)),
            }
        } else {
            values.extend(logs.iter().map(|l| (l - total).exp()));
        }
    }
    Ok(Responsibilities {
        n: data.len(),
        p,
        values,
    })
}

/// Weighted objective `Σ_i θ_i log f(X_i)` over the points a weighted fit
/// keeps.
fn weighted_loglik(component: &LogConcaveDensity, data: &DataSet, theta: &[f64]) -> f64 {
    let total: f64 = theta.iter().sum();
    data.points()
        .zip(theta)
        .filter(|(_, &t)| t / total >= NEGLIGIBLE_WEIGHT)
        .map(|(x, t)| t * component.log_density(x))
        .sum()
}

/// Starting heights for a weighted refit: the previous component's
/// log-density where finite, and just below its minimum elsewhere.
fn warm_heights(previous: &LogConcaveDensity, data: &DataSet) -> Vec<f64> {
    let raw: Vec<f64> = data.points().map(|x| previous.log_density(x)).collect();
    let floor = raw.iter().copied().filter(|v| v.is_finite()).fold(f64::INFINITY, f64::min);
    raw.into_iter().map(|v| if v.is_finite() { v } else { floor - 1.0 }).collect()
}

fn fit_component(
    data: &DataSet,
    theta: &[f64],
    component: usize,
    previous: Option<&LogConcaveDensity>,
    opts: &SolverOptions,
) -> Result<LogConcaveDensity> {
    let degenerate = |reason: String| Error::DegenerateComponent { component, reason };
    let carrying = theta.iter().filter(|&&t| t > CARRIES_WEIGHT).count();
    if carrying < data.dim() + 1 {
        return Err(degenerate(format!("only {carrying} points carry weight")));
    }
    let total: f64 = theta.iter().sum();
    let weights: Vec<f64> = theta.iter().map(|t| if t / total >= NEGLIGIBLE_WEIGHT { *t } else { 0.0 }).collect();
    let weighted = reweighted(data, &weights).map_err(|e| degenerate(e.to_string()))?;
    let y0 = match previous {
        Some(prev) => warm_heights(prev, &weighted),
        None => gaussian_start(&weighted).map_err(|e| degenerate(e.to_string()))?,
    };
    let fit = fit_from(&weighted, &y0, opts).map_err(|e| match e {
        Error::DegenerateInput(m) | Error::InvalidInput(m) => degenerate(m),
        other => other,
    })?;
    Ok(fit.model)
}

/// The data restricted to positive weights.
fn reweighted(data: &DataSet, weights: &[f64]) -> Result<DataSet> {
    let kept: Vec<usize> = (0..data.len()).filter(|&i| weights[i] > 0.0).collect();
    let coords = kept.iter().flat_map(|&i| data.point(i).to_vec()).collect();
    let w = kept.iter().map(|&i| weights[i]).collect();
    DataSet::from_flat(data.dim(), coords, w)
}

/// One M-step: proportions `π_j = n⁻¹ Σ_i θ_ij` and weighted refits of
/// every component, in parallel. With `previous`, refits start from the
/// previous components and a refit that lowers the weighted
/// log-likelihood is discarded in favour of the previous component.
pub fn m_step(
    data: &DataSet,
    resp: &Responsibilities,
    opts: &SolverOptions,
    previous: Option<&MixtureModel>,
) -> Result<MixtureModel> {
    let n = data.len() as f64;
    let p = resp.p;
    let min_share = (data.dim() + 1) as f64 / n;
    let proportions: Vec<f64> = (0..p).map(|j| resp.column(j).iter().sum::<f64>() / n).collect();
    if let Some(j) = proportions.iter().position(|&pi| pi < min_share) {
        return Err(Error::DegenerateComponent {
            component: j,
            reason: format!("proportion {:.3e} below (d+1)/n", proportions[j]),
        });
    }
    let components = (0..p)
        .into_par_iter()
        .map(|j| {
            let theta = resp.column(j);
            let old = previous.map(|m| &m.components[j]);
            let new = fit_component(data, &theta, j, old, opts)?;
            match old {
                Some(old) if weighted_loglik(&new, data, &theta) < weighted_loglik(old, data, &theta) => Ok(old.clone()),
                _ => Ok(new),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MixtureModel {
        proportions,
        components,
        loglik_trace: previous.map(|m| m.loglik_trace.clone()).unwrap_or_default(),
    })
}

#[derive(Clone, Debug)]
pub struct EmOptions {
    pub solver: SolverOptions,
    pub max_iter: usize,
    /// A run stops once the log-likelihood gains less than this times `n`.
    pub tol_per_point: f64,
    /// Full-tolerance iterations run after the relaxed phase has settled.
    pub final_iterations: usize,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            solver: SolverOptions::default(),
            max_iter: 100,
            tol_per_point: 1e-6,
            final_iterations: 2,
        }
    }
}

fn relaxed(opts: &SolverOptions) -> SolverOptions {
    SolverOptions {
        delta: opts.delta * 100.0,
        eps: opts.eps * 10.0,
        eta: opts.eta * 10.0,
        ..opts.clone()
    }
}

/// EM from the given responsibilities until the log-likelihood settles.
pub fn em_from(data: &DataSet, start: &Responsibilities, opts: &EmOptions) -> Result<MixtureModel> {
    let n = data.len() as f64;
    let loose = relaxed(&opts.solver);
    let mut model = m_step(data, start, &loose, None)?;
    model.loglik_trace.push(model.log_likelihood(data));
    let mut remaining_final: Option<usize> = None;
    for _ in 1..opts.max_iter {
        let solver = if remaining_final.is_some() { &opts.solver } else { &loose };
        let resp = e_step_with(&model, data, OrphanPolicy::Uniform)?;
        let next = m_step(data, &resp, solver, Some(&model))?;
        let before = *model.loglik_trace.last().unwrap();
        let after = next.log_likelihood(data);
        model = next;
        model.loglik_trace.push(after);
        match remaining_final.as_mut() {
            Some(0) | Some(1) => break,
            Some(k) => *k -= 1,
            None if after - before < opts.tol_per_point * n => remaining_final = Some(opts.final_iterations),
            None => {}
        }
    }
    Ok(model)
}

/// Best of `restarts` EM runs seeded by k-means. Restarts run in parallel;
/// degenerate runs are discarded.
pub fn em_fit(data: &DataSet, p: usize, restarts: usize, seed: u64, opts: &EmOptions) -> Result<MixtureModel> {
    validate(data, p, restarts)?;
    let runs: Vec<Result<MixtureModel>> = (0..restarts)
        .into_par_iter()
        .map(|r| {
            let labels = kmeans_labels(data, p, derive_seed(seed, r as u64));
            em_from(data, &soft_start(data, &labels, p)?, opts)
        })
        .collect();
    best_run(runs, restarts, |m| *m.loglik_trace.last().unwrap())
}

/// Posterior probabilities under Gaussians fitted to a hard partition.
///
/// A component fitted to hard labels has the hull of its cluster as
/// support, so every point outside it keeps responsibility 0 and EM cannot
/// move away from the partition. Soft starting values give every
/// component the whole data hull.
pub fn soft_start(data: &DataSet, labels: &[usize], p: usize) -> Result<Responsibilities> {
    Ok(gaussian_m_step(data, &Responsibilities::hard(labels, p))?.e_step(data))
}

fn validate(data: &DataSet, p: usize, restarts: usize) -> Result<()> {
    if p == 0 || restarts == 0 {
        return Err(Error::InvalidInput("component and restart counts must be positive".into()));
    }
    if data.len() < p * (data.dim() + 1) {
        return Err(Error::InvalidInput(format!("need n >= p(d+1) = {}", p * (data.dim() + 1))));
    }
    Ok(())
}

fn best_run<M>(runs: Vec<Result<M>>, restarts: usize, score: impl Fn(&M) -> f64) -> Result<M> {
    let mut best: Option<M> = None;
    for run in runs {
        match run {
            Ok(m) => {
                if best.as_ref().is_none_or(|b| score(&m) > score(b)) {
                    best = Some(m);
                }
            }
            Err(Error::DegenerateComponent { .. } | Error::DegenerateInput(_)) => {}
            Err(e) => return Err(e),
        }
    }
    best.ok_or(Error::AllRestartsDegenerate(restarts))
}

/// One-based labels `argmax_j π_j f_j(X_i)`; ties go to the smaller index.
pub fn cluster_assign(model: &MixtureModel, data: &DataSet) -> Vec<usize> {
    data.points().map(|x| argmax(&model.weighted_log_densities(x)) + 1).collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (j, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = j;
        }
    }
    best
}

/// Zero-based k-means labels after k-means++ seeding and Lloyd updates, on
/// coordinates standardised to unit variance.
pub fn kmeans_labels(data: &DataSet, k: usize, seed: u64) -> Vec<usize> {
    let d = data.dim();
    let (mean, cov) = data.moments();
    let scale: Vec<f64> = (0..d).map(|c| cov[c * d + c].sqrt().max(f64::MIN_POSITIVE)).collect();
    let pts: Vec<Vec<f64>> = data
        .points()
        .map(|x| (0..d).map(|c| (x[c] - mean[c]) / scale[c]).collect())
        .collect();
    let dist2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let mut rng = rng_from_seed(seed);
    let mut centres: Vec<Vec<f64>> = vec![pts[rng.random_range(0..pts.len())].clone()];
    while centres.len() < k {
        let w: Vec<f64> = pts
            .iter()
            .map(|p| centres.iter().map(|c| dist2(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = w.iter().sum();
        let mut target = rng.random::<f64>() * total;
        let mut pick = pts.len() - 1;
        for (i, wi) in w.iter().enumerate() {
            if target < *wi {
                pick = i;
                break;
            }
            target -= wi;
        }
        centres.push(pts[pick].clone());
    }
    let mut labels = vec![0; pts.len()];
    for _ in 0..100 {
        let new: Vec<usize> = pts
            .iter()
            .map(|p| {
                let dists: Vec<f64> = centres.iter().map(|c| -dist2(p, c)).collect();
                argmax(&dists)
            })
            .collect();
        let changed = new != labels;
        labels = new;
        for (j, c) in centres.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = pts.iter().zip(&labels).filter(|(_, &l)| l == j).map(|(p, _)| p).collect();
            if !members.is_empty() {
                for (c_i, v) in c.iter_mut().enumerate() {
                    *v = members.iter().map(|m| m[c_i]).sum::<f64>() / members.len() as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }
    labels
}

/// Gaussian mixture with full covariances.
#[derive(Clone, Debug)]
pub struct GaussianMixture {
    pub proportions: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    /// Row-major `d×d`.
    pub covariances: Vec<Vec<f64>>,
    pub loglik_trace: Vec<f64>,
}

impl GaussianMixture {
    fn log_terms(&self, x: &[f64]) -> Vec<f64> {
        let d = x.len();
        self.proportions
            .iter()
            .zip(self.means.iter().zip(&self.covariances))
            .map(|(p, (m, c))| p.ln() + gaussian_log_density(x, m, c, d))
            .collect()
    }

    pub fn log_likelihood(&self, data: &DataSet) -> f64 {
        data.points().map(|x| log_sum_exp(&self.log_terms(x))).sum()
    }

    /// Largest posterior probability per point.
    pub fn responsibilities(&self, data: &DataSet) -> Vec<f64> {
        self.e_step(data)
            .values
            .chunks(self.proportions.len())
            .map(|r| r.iter().copied().fold(0.0, f64::max))
            .collect()
    }

    fn e_step(&self, data: &DataSet) -> Responsibilities {
        let p = self.proportions.len();
        let mut values = Vec::with_capacity(data.len() * p);
        for x in data.points() {
            let logs = self.log_terms(x);
            let total = log_sum_exp(&logs);
            values.extend(logs.iter().map(|l| (l - total).exp()));
        }
        Responsibilities { n: data.len(), p, values }
    }

    /// One-based labels, ties to the smaller index.
    pub fn assign(&self, data: &DataSet) -> Vec<usize> {
        data.points().map(|x| argmax(&self.log_terms(x)) + 1).collect()
    }
}

fn gaussian_log_density(x: &[f64], mean: &[f64], cov: &[f64], d: usize) -> f64 {
    let Some(chol) = DMatrix::from_row_slice(d, d, cov).cholesky() else {
        return f64::NEG_INFINITY;
    };
    let r = DVector::from_iterator(d, x.iter().zip(mean).map(|(a, b)| a - b));
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + r.dot(&chol.solve(&r)))
}

fn gaussian_m_step(data: &DataSet, resp: &Responsibilities) -> Result<GaussianMixture> {
    let d = data.dim();
    let n = data.len();
    let mut out = GaussianMixture {
        proportions: vec![],
        means: vec![],
        covariances: vec![],
        loglik_trace: vec![],
    };
    for j in 0..resp.p {
        let theta = resp.column(j);
        let mass: f64 = theta.iter().sum();
        if mass < (d + 1) as f64 {
            return Err(Error::DegenerateComponent {
                component: j,
                reason: "too little mass for a covariance".into(),
            });
        }
        let mut mean = vec![0.0; d];
        for (x, t) in data.points().zip(&theta) {
            mean.iter_mut().zip(x).for_each(|(m, v)| *m += t * v / mass);
        }
        let mut cov = vec![0.0; d * d];
        for (x, t) in data.points().zip(&theta) {
            for r in 0..d {
                for c in 0..d {
                    cov[r * d + c] += t * (x[r] - mean[r]) * (x[c] - mean[c]) / mass;
                }
            }
        }
        out.proportions.push(mass / n as f64);
        out.means.push(mean);
        out.covariances.push(cov);
    }
    Ok(out)
}

fn gaussian_em_from(data: &DataSet, start: &Responsibilities, max_iter: usize, tol_per_point: f64) -> Result<GaussianMixture> {
    let n = data.len() as f64;
    let mut model = gaussian_m_step(data, start)?;
    model.loglik_trace.push(model.log_likelihood(data));
    for _ in 1..max_iter {
        let resp = model.e_step(data);
        let mut next = gaussian_m_step(data, &resp)?;
        let after = next.log_likelihood(data);
        if !after.is_finite() {
            return Err(Error::DegenerateComponent {
                component: 0,
                reason: "singular covariance".into(),
            });
        }
        let before = *model.loglik_trace.last().unwrap();
        next.loglik_trace = std::mem::take(&mut model.loglik_trace);
        next.loglik_trace.push(after);
        model = next;
        if after - before < tol_per_point * n {
            break;
        }
    }
    Ok(model)
}

/// Gaussian-mixture EM with the same seeding and restart policy as
/// [`em_fit`].
pub fn gaussian_em(data: &DataSet, p: usize, restarts: usize, seed: u64) -> Result<GaussianMixture> {
    validate(data, p, restarts)?;
    let runs: Vec<Result<GaussianMixture>> = (0..restarts)
        .into_par_iter()
        .map(|r| {
            let labels = kmeans_labels(data, p, derive_seed(seed, r as u64));
            gaussian_em_from(data, &Responsibilities::hard(&labels, p), 1000, 1e-10)
        })
        .collect();
    best_run(runs, restarts, |m| *m.loglik_trace.last().unwrap())
}

/// Misclassifications of one-based `labels` against `truth` under the best
/// matching of cluster labels to classes (brute force over permutations).
pub fn misclassified(labels: &[usize], truth: &[usize], p: usize) -> usize {
    let mut perm: Vec<usize> = (1..=p).collect();
    let mut best = usize::MAX;
    loop {
        let errors = labels.iter().zip(truth).filter(|(l, t)| perm[**l - 1] != **t).count();
        best = best.min(errors);
        // next permutation in lexicographic order
        let Some(i) = (0..p.saturating_sub(1)).rev().find(|&i| perm[i] < perm[i + 1]) else {
            return best;
        };
        let j = (i + 1..p).rev().find(|&j| perm[j] > perm[i]).unwrap();
        perm.swap(i, j);
        perm[i + 1..].reverse();
    }
}
