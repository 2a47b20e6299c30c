//! Plug-in functionals of a fitted density by Monte Carlo over exact draws:
//! general integrals, differential entropy, highest-density regions, and a
//! parametric bootstrap that resamples from the fit.

use std::fmt::Display;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::DataSet;
use crate::mle::{fit, LogConcaveDensity};
use crate::sampler::{derive_seed, rng_from_seed, sample, Sampler};
use crate::solver::SolverOptions;

pub const MIN_DRAWS: usize = 100;
pub const MIN_HDR_DRAWS: usize = 1000;
pub const DEFAULT_HDR_DRAWS: usize = 10_000;
pub const MIN_BOOTSTRAP: usize = 50;
/// Largest tolerated share of failed bootstrap refits.
pub const MAX_FAILED_SHARE: f64 = 0.1;

/// Sample mean and its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub estimate: f64,
    pub standard_error: f64,
}

impl McEstimate {
    fn from_values(values: &[f64]) -> Self {
        let b = values.len() as f64;
        let mean = values.iter().sum::<f64>() / b;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (b - 1.0)
        } else {
            0.0
        };
        Self {
            estimate: mean,
            standard_error: (var / b).sqrt(),
        }
    }
}

fn check_draws(b: usize, min: usize) -> Result<()> {
    if b < min {
        return Err(Error::InvalidInput(format!("need at least {min} draws, got {b}")));
    }
    Ok(())
}

/// `(1/B) Σ g(X*_b)` over `draws` exact draws from the model.
pub fn mc_functional<G, E>(model: &LogConcaveDensity, mut g: G, draws: usize, seed: u64) -> Result<McEstimate>
where
    G: FnMut(&[f64]) -> std::result::Result<f64, E>,
    E: Display,
{
    check_draws(draws, MIN_DRAWS)?;
    let batch = sample(model, draws, seed)?;
    let mut values = Vec::with_capacity(draws);
    for p in &batch.points {
        match g(p) {
            Ok(v) => values.push(v),
            Err(e) => {
                return Err(Error::Integrand {
                    point: p.clone(),
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(McEstimate::from_values(&values))
}

/// `−(1/B) Σ log f̂(X*_b)`.
pub fn entropy(model: &LogConcaveDensity, draws: usize, seed: u64) -> Result<McEstimate> {
    check_draws(draws, MIN_DRAWS)?;
    let batch = sample(model, draws, seed)?;
    let values: Vec<f64> = batch.log_densities.iter().map(|l| -l).collect();
    Ok(McEstimate::from_values(&values))
}

/// Estimated highest-density region `{f̂ ≥ f_α}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HdrEstimate {
    pub alpha: f64,
    /// Density threshold.
    pub f_alpha: f64,
    /// Mass of the region, estimated from draws independent of those that
    /// set the threshold.
    pub coverage_est: f64,
    pub coverage_se: f64,
    /// Draws used for each of the two stages.
    pub draws: usize,
}

impl HdrEstimate {
    /// Whether `x` lies in the estimated region.
    pub fn contains(&self, model: &LogConcaveDensity, x: &[f64]) -> bool {
        model.log_density(x) >= self.f_alpha.ln() - LEVEL_TIE
    }
}

/// Log-densities this close count as the same level, so flat pieces are
/// not split by rounding.
const LEVEL_TIE: f64 = 1e-10;

/// The region of mass `1 − α`: `f_α` is the `α`-quantile of `f̂(X*_b)`.
pub fn hdr(model: &LogConcaveDensity, alpha: f64, draws: usize, seed: u64) -> Result<HdrEstimate> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidInput("alpha must lie in (0, 1)".into()));
    }
    check_draws(draws, MIN_HDR_DRAWS)?;
    let mut levels = sample(model, draws, derive_seed(seed, 0))?.log_densities;
    levels.sort_by(f64::total_cmp);
    let log_threshold = levels[((alpha * draws as f64).floor() as usize).min(draws - 1)];
    let check = sample(model, draws, derive_seed(seed, 1))?;
    let inside: Vec<f64> = check
        .log_densities
        .iter()
        .map(|&l| if l >= log_threshold - LEVEL_TIE { 1.0 } else { 0.0 })
        .collect();
    let coverage = McEstimate::from_values(&inside);
    Ok(HdrEstimate {
        alpha,
        f_alpha: log_threshold.exp(),
        coverage_est: coverage.estimate,
        coverage_se: coverage.standard_error,
        draws,
    })
}

/// A statistic recomputed on every bootstrap resample.
pub trait Statistic: Sync {
    fn name(&self) -> String;

    /// Whether [`Statistic::compute`] needs a model refitted to the
    /// resample.
    fn needs_refit(&self) -> bool;

    /// Value on `sample`; `refit` is the fit to it when requested. `seed`
    /// is available for statistics that are themselves Monte Carlo.
    fn compute(&self, sample: &DataSet, refit: Option<&LogConcaveDensity>, seed: u64) -> Result<f64>;
}

/// Mean of one coordinate of the sample.
pub struct SampleMean {
    pub coordinate: usize,
}

impl Statistic for SampleMean {
    fn name(&self) -> String {
        format!("mean[{}]", self.coordinate)
    }

    fn needs_refit(&self) -> bool {
        false
    }

    fn compute(&self, sample: &DataSet, _: Option<&LogConcaveDensity>, _: u64) -> Result<f64> {
        if self.coordinate >= sample.dim() {
            return Err(Error::InvalidInput(format!("no coordinate {}", self.coordinate)));
        }
        Ok(sample.points().map(|p| p[self.coordinate]).sum::<f64>() / sample.len() as f64)
    }
}

/// Plug-in entropy of the refitted density.
pub struct PlugInEntropy {
    pub draws: usize,
}

impl Statistic for PlugInEntropy {
    fn name(&self) -> String {
        "entropy".into()
    }

    fn needs_refit(&self) -> bool {
        true
    }

    fn compute(&self, _: &DataSet, refit: Option<&LogConcaveDensity>, seed: u64) -> Result<f64> {
        let model = refit.ok_or_else(|| Error::InvalidInput("entropy needs a fitted model".into()))?;
        Ok(entropy(model, self.draws, seed)?.estimate)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BootstrapSummary {
    pub statistic: String,
    /// Statistic on the model's own data.
    pub estimate: f64,
    pub standard_error: f64,
    /// 95% percentile interval.
    pub lo: f64,
    pub hi: f64,
    /// Successful replicates.
    pub replicates: usize,
    pub failed: usize,
    pub seed: u64,
}

/// Linear interpolation between order statistics of sorted `values`.
fn quantile(values: &[f64], p: f64) -> f64 {
    let pos = p * (values.len() - 1) as f64;
    let (lo, frac) = (pos.floor() as usize, pos - pos.floor());
    if lo + 1 < values.len() {
        values[lo] * (1.0 - frac) + values[lo + 1] * frac
    } else {
        values[lo]
    }
}

/// Parametric bootstrap from the fitted density: `replicates` samples of
/// size `m` are drawn, refitted when the statistic asks for it, and the
/// statistic is recomputed on each. Replicates run in parallel with
/// per-replicate seeds and are aggregated in replicate order.
pub fn bootstrap<S: Statistic>(
    model: &LogConcaveDensity,
    statistic: &S,
    replicates: usize,
    m: usize,
    seed: u64,
    opts: &SolverOptions,
) -> Result<BootstrapSummary> {
    if replicates < MIN_BOOTSTRAP {
        return Err(Error::InvalidInput(format!("need at least {MIN_BOOTSTRAP} replicates")));
    }
    if m < model.dim() + 1 {
        return Err(Error::InvalidInput("resample size must exceed the dimension".into()));
    }
    let estimate = statistic.compute(model.data(), Some(model), derive_seed(seed, u64::MAX))?;
    let sampler = Sampler::new(model)?;
    let outcomes: Vec<Result<f64>> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let stream = derive_seed(seed, r as u64);
            let mut rng = rng_from_seed(stream);
            let points: Vec<Vec<f64>> = (0..m).map(|_| sampler.draw(&mut rng).point).collect();
            let data = DataSet::new(&points)?;
            let refit = if statistic.needs_refit() {
                Some(fit(&data, opts)?.model)
            } else {
                None
            };
            statistic.compute(&data, refit.as_ref(), derive_seed(stream, 1))
        })
        .collect();
    let mut values: Vec<f64> = outcomes.iter().filter_map(|o| o.as_ref().ok().copied()).collect();
    let failed = replicates - values.len();
    if failed as f64 > MAX_FAILED_SHARE * replicates as f64 {
        return Err(Error::BootstrapFailures {
            failed,
            total: replicates,
        });
    }
    let spread = McEstimate::from_values(&values).standard_error * (values.len() as f64).sqrt();
    values.sort_by(f64::total_cmp);
    Ok(BootstrapSummary {
        statistic: statistic.name(),
        estimate,
        standard_error: spread,
        lo: quantile(&values, 0.025),
        hi: quantile(&values, 0.975),
        replicates: values.len(),
        failed,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mle::fit;
    use std::convert::Infallible;

    fn triangle_model() -> LogConcaveDensity {
        let data = DataSet::new(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        fit(&data, &SolverOptions::default()).unwrap().model
    }

    #[test]
    fn constant_integrand_has_no_error() {
        let m = triangle_model();
        let e = mc_functional(&m, |_| Ok::<_, Infallible>(1.0), 500, 1).unwrap();
        assert_eq!(e.estimate, 1.0);
        assert_eq!(e.standard_error, 0.0);
    }

    #[test]
    fn coordinate_mean_of_uniform_triangle() {
        let m = triangle_model();
        let e = mc_functional(&m, |x| Ok::<_, Infallible>(x[0]), 20_000, 2).unwrap();
        assert!((e.estimate - 1.0 / 3.0).abs() < 4.0 * e.standard_error);
    }

    #[test]
    fn integrand_failures_carry_the_point() {
        let m = triangle_model();
        let r = mc_functional(&m, |_| Err::<f64, _>("nope"), 200, 3);
        assert!(matches!(r, Err(Error::Integrand { point, .. }) if point.len() == 2));
    }

    #[test]
    fn uniform_entropy_is_log_volume() {
        let m = triangle_model();
        let e = entropy(&m, 1000, 4).unwrap();
        assert!((e.estimate - 0.5f64.ln()).abs() < 1e-3);
        assert!(e.standard_error < 1e-3);
    }

    #[test]
    fn uniform_hdr_is_the_whole_support() {
        let m = triangle_model();
        let h = hdr(&m, 0.3, 2000, 5).unwrap();
        assert!((h.f_alpha - 2.0).abs() < 1e-3);
        assert_eq!(h.coverage_est, 1.0);
        assert!(h.contains(&m, &[0.2, 0.2]));
        assert!(!h.contains(&m, &[2.0, 2.0]));
    }

    #[test]
    fn argument_checks() {
        let m = triangle_model();
        assert!(hdr(&m, 1.0, 2000, 1).is_err());
        assert!(hdr(&m, 0.5, 10, 1).is_err());
        assert!(entropy(&m, 10, 1).is_err());
    }

    #[test]
    fn quantile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&v, 0.5), 3.0);
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 5.0);
        assert!((quantile(&v, 0.1) - 1.4).abs() < 1e-12);
    }

    #[test]
    fn bootstrap_mean_matches_analytic_standard_error() {
        let m = triangle_model();
        let size = 100;
        let s = bootstrap(&m, &SampleMean { coordinate: 0 }, 400, size, 6, &SolverOptions::default()).unwrap();
        // coordinate variance of the uniform triangle is 1/18
        let analytic = (1.0f64 / 18.0 / size as f64).sqrt();
        assert!((s.standard_error / analytic - 1.0).abs() < 0.25, "{}", s.standard_error);
        assert!(s.lo <= s.hi);
        let again = bootstrap(&m, &SampleMean { coordinate: 0 }, 400, size, 6, &SolverOptions::default()).unwrap();
        assert_eq!(s, again);
    }
}
