//! Simulation harness: known densities, a fixed-bandwidth Gaussian kernel
//! baseline, and per-replication error metrics.

use std::f64::consts::PI;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;

use logconcave::geometry::DataSet;
use logconcave::mle::{fit, LogConcaveDensity};
use logconcave::sampler::{derive_seed, rng_from_seed};
use logconcave::solver::SolverOptions;
use logconcave::functionals::entropy;

use crate::CliError;

/// Draws used to estimate the true entropy and HDR threshold when no
/// closed form is used.
const TRUTH_DRAWS: usize = 100_000;
const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScenarioKind {
    StdNormal,
    DepNormal02,
    Gamma21Indep,
    Mix1,
    Mix2,
    Mix3,
}

impl FromStr for ScenarioKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "std_normal" => Self::StdNormal,
            "dep_normal_02" => Self::DepNormal02,
            "gamma21_indep" => Self::Gamma21Indep,
            "mix1" => Self::Mix1,
            "mix2" => Self::Mix2,
            "mix3" => Self::Mix3,
            other => return Err(format!("unknown scenario `{other}`")),
        })
    }
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 6] = [
        Self::StdNormal,
        Self::DepNormal02,
        Self::Gamma21Indep,
        Self::Mix1,
        Self::Mix2,
        Self::Mix3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::StdNormal => "std_normal",
            Self::DepNormal02 => "dep_normal_02",
            Self::Gamma21Indep => "gamma21_indep",
            Self::Mix1 => "mix1",
            Self::Mix2 => "mix2",
            Self::Mix3 => "mix3",
        }
    }
}

/// A known density on `R^d`.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub d: usize,
    /// Cholesky factor of the covariance for the normal scenarios.
    chol: DMatrix<f64>,
    precision: DMatrix<f64>,
    log_det: f64,
    /// Shift of the second mixture component, along the first axis.
    shift: Vec<f64>,
}

impl Scenario {
    pub fn new(kind: ScenarioKind, d: usize) -> Result<Self, CliError> {
        if !(2..=3).contains(&d) {
            return Err(CliError::Invalid("simulation scenarios need d in {2, 3}".into()));
        }
        let mut cov = DMatrix::identity(d, d);
        if kind == ScenarioKind::DepNormal02 {
            cov = DMatrix::from_fn(d, d, |i, j| if i == j { 1.0 } else { 0.2 });
        }
        let chol = cov.cholesky().expect("covariance is positive definite");
        let log_det = 2.0 * chol.l().diagonal().iter().map(|v: &f64| v.ln()).sum::<f64>();
        let precision = chol.inverse();
        let norm = match kind {
            ScenarioKind::Mix1 => 1.0,
            ScenarioKind::Mix2 => 2.0,
            ScenarioKind::Mix3 => 3.0,
            _ => 0.0,
        };
        let mut shift = vec![0.0; d];
        shift[0] = norm;
        Ok(Self {
            kind,
            d,
            chol: chol.l(),
            precision,
            log_det,
            shift,
        })
    }

    fn is_mixture(&self) -> bool {
        matches!(self.kind, ScenarioKind::Mix1 | ScenarioKind::Mix2 | ScenarioKind::Mix3)
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        if self.kind == ScenarioKind::Gamma21Indep {
            let g = Gamma::new(2.0, 1.0).unwrap();
            return (0..self.d).map(|_| g.sample(rng)).collect();
        }
        let z = DVector::from_fn(self.d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut x: Vec<f64> = (&self.chol * z).iter().copied().collect();
        if self.is_mixture() && rng.random::<f64>() >= 0.6 {
            x.iter_mut().zip(&self.shift).for_each(|(a, s)| *a += s);
        }
        x
    }

    pub fn sample(&self, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = rng_from_seed(seed);
        (0..n).map(|_| self.draw(&mut rng)).collect()
    }

    fn normal_log_density(&self, x: &[f64], centre: &[f64]) -> f64 {
        let r = DVector::from_iterator(self.d, x.iter().zip(centre).map(|(a, b)| a - b));
        -0.5 * (self.d as f64 * (2.0 * PI).ln() + self.log_det + r.dot(&(&self.precision * &r)))
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        match self.kind {
            ScenarioKind::Gamma21Indep => x
                .iter()
                .map(|&v| if v > 0.0 { v.ln() - v } else { f64::NEG_INFINITY })
                .sum(),
            ScenarioKind::StdNormal | ScenarioKind::DepNormal02 => self.normal_log_density(x, &vec![0.0; self.d]),
            _ => {
                let a = 0.6f64.ln() + self.normal_log_density(x, &vec![0.0; self.d]);
                let b = 0.4f64.ln() + self.normal_log_density(x, &self.shift);
                let m = a.max(b);
                m + ((a - m).exp() + (b - m).exp()).ln()
            }
        }
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        self.log_density(x).exp()
    }

    /// Closed forms for the normal and gamma scenarios; Monte Carlo over
    /// [`TRUTH_DRAWS`] draws for the mixtures.
    pub fn entropy(&self, seed: u64) -> f64 {
        let d = self.d as f64;
        match self.kind {
            ScenarioKind::StdNormal | ScenarioKind::DepNormal02 => 0.5 * (d * (2.0 * PI * std::f64::consts::E).ln() + self.log_det),
            // Γ(2,1): k + ln Γ(k) + (1 − k) ψ(k) with ψ(2) = 1 − γ
            ScenarioKind::Gamma21Indep => d * (1.0 + EULER_GAMMA),
            _ => {
                let mut rng = rng_from_seed(seed);
                -(0..TRUTH_DRAWS).map(|_| self.log_density(&self.draw(&mut rng))).sum::<f64>() / TRUTH_DRAWS as f64
            }
        }
    }

    /// `f_α` of the true density: the `α`-quantile of `f(X)`.
    pub fn hdr_log_threshold(&self, alpha: f64, seed: u64) -> f64 {
        let mut rng = rng_from_seed(seed);
        let mut levels: Vec<f64> = (0..TRUTH_DRAWS).map(|_| self.log_density(&self.draw(&mut rng))).collect();
        levels.sort_by(f64::total_cmp);
        levels[(alpha * TRUTH_DRAWS as f64).floor() as usize]
    }
}

/// Product Gaussian kernel estimate with a fixed diagonal bandwidth.
pub struct KernelEstimate<'a> {
    points: &'a [Vec<f64>],
    bandwidth: Vec<f64>,
    log_norm: f64,
}

impl<'a> KernelEstimate<'a> {
    pub fn new(points: &'a [Vec<f64>], bandwidth: Vec<f64>) -> Self {
        let d = bandwidth.len() as f64;
        let log_norm = -(points.len() as f64).ln() - 0.5 * d * (2.0 * PI).ln() - bandwidth.iter().map(|h| h.ln()).sum::<f64>();
        Self {
            points,
            bandwidth,
            log_norm,
        }
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        let s: f64 = self
            .points
            .iter()
            .map(|p| {
                let q: f64 = x.iter().zip(p).zip(&self.bandwidth).map(|((a, b), h)| ((a - b) / h).powi(2)).sum();
                (-0.5 * q).exp()
            })
            .sum();
        s * self.log_norm.exp()
    }
}

/// `∫ (g − f)²` as `E_f[(g(X) − f(X))² / f(X)]` over draws from the truth.
pub fn ise<G: Fn(&[f64]) -> f64>(truth: &Scenario, estimate: G, draws: &[Vec<f64>]) -> f64 {
    draws
        .iter()
        .map(|x| {
            let f = truth.density(x);
            (estimate(x) - f).powi(2) / f
        })
        .sum::<f64>()
        / draws.len() as f64
}

#[derive(Clone, Debug)]
pub struct SimulationConfig {
    pub scenario: ScenarioKind,
    pub d: usize,
    pub n: usize,
    pub replications: usize,
    pub seed: u64,
    pub bandwidth: Option<Vec<f64>>,
    pub ise_draws: usize,
    pub entropy_draws: usize,
    pub alpha: f64,
    pub budget_secs: f64,
    pub jobs: usize,
    pub solver: SolverOptions,
}

/// Metrics of one replication.
#[derive(Clone, Debug)]
pub struct Replication {
    pub index: usize,
    pub ise_lcd: f64,
    pub ise_kernel: Option<f64>,
    pub entropy_sq_err: f64,
    pub hdr_symdiff: f64,
    pub iterations: usize,
    pub converged: bool,
    pub seconds: f64,
}

/// Rough single-fit cost in seconds; iterations and per-iteration work
/// both grow about linearly in `n`.
pub fn projected_fit_secs(n: usize, d: usize) -> f64 {
    let per = if d <= 2 { 2e-5 } else { 3e-4 };
    per * (n as f64).powi(2)
}

pub fn check_budget(cfg: &SimulationConfig) -> Result<f64, CliError> {
    let projected = projected_fit_secs(cfg.n, cfg.d) * cfg.replications as f64 / cfg.jobs.max(1) as f64;
    if projected > cfg.budget_secs {
        return Err(CliError::Invalid(format!(
            "projected run time {projected:.0}s exceeds the budget of {}s; lower n or replications, or raise --budget-secs",
            cfg.budget_secs
        )));
    }
    Ok(projected)
}

pub fn run_replication(cfg: &SimulationConfig, truth: &Scenario, truth_entropy: f64, truth_level: f64, index: usize) -> Result<Replication, CliError> {
    let stream = derive_seed(cfg.seed, index as u64);
    let points = truth.sample(cfg.n, derive_seed(stream, 0));
    let data = DataSet::new(&points)?;
    let start = Instant::now();
    let fitted = fit(&data, &cfg.solver)?;
    let seconds = start.elapsed().as_secs_f64();
    let model = &fitted.model;
    let check = truth.sample(cfg.ise_draws, derive_seed(stream, 1));
    let ise_lcd = ise(truth, |x| model.density(x), &check);
    let ise_kernel = cfg
        .bandwidth
        .as_ref()
        .map(|h| {
            let k = KernelEstimate::new(&points, h.clone());
            ise(truth, |x| k.density(x), &check)
        });
    let h = entropy(model, cfg.entropy_draws, derive_seed(stream, 2))?.estimate;
    let hdr_symdiff = hdr_symmetric_difference(model, truth, cfg.alpha, truth_level, cfg.ise_draws, derive_seed(stream, 3))?;
    Ok(Replication {
        index,
        ise_lcd,
        ise_kernel,
        entropy_sq_err: (h - truth_entropy).powi(2),
        hdr_symdiff,
        iterations: fitted.report.iterations,
        converged: fitted.report.converged,
        seconds,
    })
}

/// `μ_f(R̂_α △ R_α)` by Monte Carlo under the truth, with `R̂_α` from the
/// model's own density quantile.
pub fn hdr_symmetric_difference(
    model: &LogConcaveDensity,
    truth: &Scenario,
    alpha: f64,
    truth_log_level: f64,
    draws: usize,
    seed: u64,
) -> Result<f64, CliError> {
    let est = logconcave::functionals::hdr(model, alpha, draws.max(logconcave::functionals::MIN_HDR_DRAWS), derive_seed(seed, 0))?;
    let check = truth.sample(draws, derive_seed(seed, 1));
    let differ = check
        .iter()
        .filter(|x| est.contains(model, x) != (truth.log_density(x) >= truth_log_level))
        .count();
    Ok(differ as f64 / draws as f64)
}

pub fn simulate(cfg: &SimulationConfig) -> Result<Vec<Replication>, CliError> {
    check_budget(cfg)?;
    let truth = Scenario::new(cfg.scenario, cfg.d)?;
    let truth_entropy = truth.entropy(derive_seed(cfg.seed, u64::MAX));
    let truth_level = truth.hdr_log_threshold(cfg.alpha, derive_seed(cfg.seed, u64::MAX - 1));
    (0..cfg.replications)
        .into_par_iter()
        .map(|r| run_replication(cfg, &truth, truth_entropy, truth_level, r))
        .collect()
}

/// Mean and standard error of a metric across replications.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma_draws_are_positive_with_mean_two() {
        let s = Scenario::new(ScenarioKind::Gamma21Indep, 3).unwrap();
        let pts = s.sample(20_000, 1);
        assert!(pts.iter().flatten().all(|&v| v > 0.0));
        // Γ(2,1) variance 2
        let se = (2.0f64 / 20_000.0).sqrt();
        for c in 0..3 {
            let mean = pts.iter().map(|p| p[c]).sum::<f64>() / 20_000.0;
            assert!((mean - 2.0).abs() < 4.0 * se, "{mean}");
        }
    }

    #[test]
    fn normal_entropy_matches_monte_carlo() {
        for kind in [ScenarioKind::StdNormal, ScenarioKind::DepNormal02, ScenarioKind::Gamma21Indep] {
            let s = Scenario::new(kind, 2).unwrap();
            let mut rng = rng_from_seed(3);
            let vals: Vec<f64> = (0..50_000).map(|_| -s.log_density(&s.draw(&mut rng))).collect();
            let (m, se) = mean_se(&vals);
            assert!((m - s.entropy(0)).abs() < 4.0 * se, "{kind:?}");
        }
    }

    #[test]
    fn densities_integrate_to_one_on_a_grid() {
        for kind in ScenarioKind::ALL {
            let s = Scenario::new(kind, 2).unwrap();
            let (lo, hi, k) = (-8.0, 11.0, 400);
            let step = (hi - lo) / k as f64;
            let mut mass = 0.0;
            for i in 0..k {
                for j in 0..k {
                    let x = [lo + (i as f64 + 0.5) * step, lo + (j as f64 + 0.5) * step];
                    mass += s.density(&x) * step * step;
                }
            }
            assert!((mass - 1.0).abs() < 1e-3, "{kind:?} {mass}");
        }
    }

    #[test]
    fn mixture_log_concavity_switches_at_norm_two() {
        // along the shift axis the mixture is log-concave iff ‖μ‖ ≤ 2
        let concave = |kind| {
            let s = Scenario::new(kind, 2).unwrap();
            let f = |t: f64| s.log_density(&[t, 0.0]);
            (-400..400).all(|i| {
                let t = i as f64 * 0.01;
                f(t - 0.01) + f(t + 0.01) - 2.0 * f(t) <= 1e-12
            })
        };
        assert!(concave(ScenarioKind::Mix1));
        assert!(concave(ScenarioKind::Mix2));
        assert!(!concave(ScenarioKind::Mix3));
    }

    #[test]
    fn kernel_estimate_integrates_to_one() {
        let pts = vec![vec![0.0, 0.0], vec![1.0, 2.0]];
        let k = KernelEstimate::new(&pts, vec![0.5, 0.8]);
        let (lo, hi, m) = (-5.0, 7.0, 300);
        let step = (hi - lo) / m as f64;
        let mut mass = 0.0;
        for i in 0..m {
            for j in 0..m {
                mass += k.density(&[lo + (i as f64 + 0.5) * step, lo + (j as f64 + 0.5) * step]) * step * step;
            }
        }
        assert!((mass - 1.0).abs() < 1e-4);
    }

    #[test]
    fn ise_of_the_truth_is_zero() {
        let s = Scenario::new(ScenarioKind::Mix2, 2).unwrap();
        let draws = s.sample(100, 4);
        assert_eq!(ise(&s, |x| s.density(x), &draws), 0.0);
    }

    #[test]
    fn budget_guard_refuses_large_runs() {
        let cfg = SimulationConfig {
            scenario: ScenarioKind::StdNormal,
            d: 3,
            n: 5000,
            replications: 100,
            seed: 1,
            bandwidth: None,
            ise_draws: 100,
            entropy_draws: 100,
            alpha: 0.5,
            budget_secs: 60.0,
            jobs: 1,
            solver: SolverOptions::default(),
        };
        assert!(matches!(check_budget(&cfg), Err(CliError::Invalid(_))));
    }
}
