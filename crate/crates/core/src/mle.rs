//! Fitting the log-concave maximum likelihood estimator and the fitted
//! density object.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{convex_hull_flat, DataSet, Triangulation};
use crate::solver::{minimize_r_algorithm, Evaluation, Objective, SolverOptions, Termination};
use crate::tent::{sigma_with_subgradient, TentFunction};

/// Weights below this are dropped before a weighted fit.
pub const NEGLIGIBLE_WEIGHT: f64 = 1e-12;

pub const FORMAT_VERSION: u32 = 1;

/// `σ` as a solver objective; the extra criterion is `|∫ exp h̄_y − 1| ≤ η`.
struct Sigma<'a> {
    data: &'a DataSet,
    eta: f64,
}

impl Objective for Sigma<'_> {
    fn evaluate(&mut self, y: &[f64], grad: &mut [f64]) -> Result<Evaluation> {
        let (value, integral, _) = sigma_with_subgradient(self.data, y, grad)?;
        Ok(Evaluation {
            value,
            criterion: (integral - 1.0).abs() <= self.eta,
        })
    }
}

/// Solver outcome for one fit.
#[derive(Clone, Debug)]
pub struct FitReport {
    pub iterations: usize,
    pub termination: Termination,
    /// All stopping criteria were met within the iteration budget.
    pub converged: bool,
    /// `σ` at the returned heights.
    pub sigma: f64,
    /// `∫ exp h̄_y` at the solver's best iterate, before the final
    /// normalisation.
    pub raw_integral: f64,
    /// Largest `h̄_y(X_i) − y_i` at the solver's best iterate.
    pub raw_touch_gap: f64,
    pub trace: Option<Vec<(usize, f64)>>,
}

/// A fitted model together with how it was obtained. A fit that ran out of
/// iterations still carries the best model found.
#[derive(Clone, Debug)]
pub struct Fit {
    pub model: LogConcaveDensity,
    pub report: FitReport,
}

/// The estimate `f̂ = exp h̄_{y*}` on the hull of the data.
#[derive(Clone, Debug)]
pub struct LogConcaveDensity {
    data: DataSet,
    y_star: Vec<f64>,
    tent: TentFunction,
    masses: Vec<f64>,
    total_integral: f64,
}

impl LogConcaveDensity {
    /// Builds the model for heights `y` on the given cells. Used by both
    /// fitting and loading so that the two agree bit for bit.
    fn assemble(data: DataSet, y: Vec<f64>, cells: Vec<Vec<usize>>) -> Result<Self> {
        let hull = convex_hull_flat(data.dim(), data.coords())?;
        let tri = Triangulation::from_simplices(&data, cells, hull)?;
        let tent = TentFunction::from_triangulation(&y, tri);
        let masses = tent.cell_integrals()?;
        let total_integral = masses.iter().sum();
        Ok(Self {
            data,
            y_star: y,
            tent,
            masses,
            total_integral,
        })
    }

    pub fn dim(&self) -> usize {
        self.data.dim()
    }

    pub fn data(&self) -> &DataSet {
        &self.data
    }

    pub fn y_star(&self) -> &[f64] {
        &self.y_star
    }

    pub fn tent(&self) -> &TentFunction {
        &self.tent
    }

    /// `q_j`, the mass of each cell.
    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn total_integral(&self) -> f64 {
        self.total_integral
    }

    /// `log f̂(x)`, `−∞` outside the hull.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        self.tent.evaluate(x)
    }

    /// `f̂(x)`, exactly zero outside the hull.
    pub fn density(&self, x: &[f64]) -> f64 {
        let h = self.log_density(x);
        if h == f64::NEG_INFINITY {
            0.0
        } else {
            h.exp()
        }
    }

    pub fn save<W: Write>(&self, mut sink: W) -> Result<()> {
        let d = self.dim();
        let file = ModelFile {
            format_version: FORMAT_VERSION,
            d,
            n: self.data.len(),
            points: self.data.points().map(<[f64]>::to_vec).collect(),
            weights: self.data.weights().to_vec(),
            y_star: self.y_star.clone(),
            simplices: self.tent.triangulation().simplices.iter().map(|s| s.vertices.clone()).collect(),
            total_integral: self.total_integral,
        };
        serde_json::to_writer_pretty(&mut sink, &file).map_err(|e| Error::Io(e.into()))?;
        writeln!(sink)?;
        Ok(())
    }

    pub fn load<R: Read>(source: R) -> Result<Self> {
        let mut de = serde_json::Deserializer::from_reader(source);
        let file: ModelFile = serde_path_to_error::deserialize(&mut de).map_err(|e| Error::Format {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        file.into_model()
    }

    pub fn to_json(&self) -> String {
        let mut buf = Vec::new();
        self.save(&mut buf).expect("writing to memory cannot fail");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::load(text.as_bytes())
    }
}

/// Free-function form of [`LogConcaveDensity::density`].
pub fn density_evaluate(model: &LogConcaveDensity, x: &[f64]) -> f64 {
    model.density(x)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format_version: u32,
    d: usize,
    n: usize,
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
    y_star: Vec<f64>,
    simplices: Vec<Vec<usize>>,
    total_integral: f64,
}

fn format_error(path: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.into(),
        message: message.into(),
    }
}

impl ModelFile {
    fn into_model(self) -> Result<LogConcaveDensity> {
        if self.format_version != FORMAT_VERSION {
            return Err(format_error("format_version", format!("unsupported version {}", self.format_version)));
        }
        if self.points.len() != self.n {
            return Err(format_error("points", format!("expected {} points, found {}", self.n, self.points.len())));
        }
        if let Some(k) = self.points.iter().position(|p| p.len() != self.d) {
            return Err(format_error(format!("points[{k}]"), format!("expected {} coordinates", self.d)));
        }
        if self.weights.len() != self.n {
            return Err(format_error("weights", format!("expected {} weights", self.n)));
        }
        if self.y_star.len() != self.n {
            return Err(format_error("y_star", format!("expected {} heights", self.n)));
        }
        if let Some(k) = self.y_star.iter().position(|v| !v.is_finite()) {
            return Err(format_error(format!("y_star[{k}]"), "height is not finite"));
        }
        for (k, cell) in self.simplices.iter().enumerate() {
            if cell.len() != self.d + 1 || cell.iter().any(|&v| v >= self.n) {
                return Err(format_error(format!("simplices[{k}]"), "invalid vertex list"));
            }
        }
        let coords = self.points.into_iter().flatten().collect();
        let data = DataSet::from_flat(self.d, coords, self.weights).map_err(|e| format_error("points", e.to_string()))?;
        let model = LogConcaveDensity::assemble(data, self.y_star, self.simplices)
            .map_err(|e| format_error("simplices", e.to_string()))?;
        Ok(model)
    }
}

/// Heights of the moment-matched Gaussian log-density at the data, shifted
/// so that the tent they define integrates to one.
pub fn gaussian_start(data: &DataSet) -> Result<Vec<f64>> {
    let d = data.dim();
    let (mean, cov) = data.moments();
    let cov = DMatrix::from_row_slice(d, d, &cov);
    let chol = cov
        .cholesky()
        .ok_or_else(|| Error::DegenerateInput("sample covariance is singular".into()))?;
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let constant = -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det);
    let y: Vec<f64> = data
        .points()
        .map(|x| {
            let r = DVector::from_iterator(d, x.iter().zip(&mean).map(|(a, m)| a - m));
            let s = chol.solve(&r);
            constant - 0.5 * r.dot(&s)
        })
        .collect();
    normalised(data, y)
}

fn normalised(data: &DataSet, mut y: Vec<f64>) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; y.len()];
    let (_, integral, _) = sigma_with_subgradient(data, &y, &mut grad)?;
    let shift = integral.ln();
    y.iter_mut().for_each(|v| *v -= shift);
    Ok(y)
}

/// Fits the estimator to `data` (weights are respected) starting from the
/// Gaussian moment match.
pub fn fit(data: &DataSet, opts: &SolverOptions) -> Result<Fit> {
    let (data, _) = data.drop_negligible(NEGLIGIBLE_WEIGHT)?;
    let y0 = gaussian_start(&data)?;
    fit_reduced(data, &y0, opts)
}

/// Fits from explicit starting heights `y0`, one per point of `data`.
pub fn fit_from(data: &DataSet, y0: &[f64], opts: &SolverOptions) -> Result<Fit> {
    if y0.len() != data.len() || y0.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("starting heights must be finite, one per point".into()));
    }
    let (reduced, kept) = data.drop_negligible(NEGLIGIBLE_WEIGHT)?;
    let y0: Vec<f64> = kept.iter().map(|&i| y0[i]).collect();
    let y0 = normalised(&reduced, y0)?;
    fit_reduced(reduced, &y0, opts)
}

fn fit_reduced(data: DataSet, y0: &[f64], opts: &SolverOptions) -> Result<Fit> {
    let mut objective = Sigma { data: &data, eta: opts.eta };
    let solved = minimize_r_algorithm(&mut objective, y0, opts)?;

    // Raising every pole to the tent and then rescaling to unit mass both
    // lower σ, and leave an exact optimum unchanged.
    let raw = TentFunction::new(&data, &solved.y_opt)?;
    let touch: Vec<f64> = data.points().map(|x| raw.min_piece(x)).collect();
    let raw_touch_gap = touch
        .iter()
        .zip(&solved.y_opt)
        .map(|(t, y)| t - y)
        .fold(0.0f64, f64::max);
    let raw_integral: f64 = raw.cell_integrals()?.iter().sum();
    let shift = raw_integral.ln();
    let y: Vec<f64> = touch.iter().map(|t| t - shift).collect();
    let cells = raw.triangulation().simplices.iter().map(|s| s.vertices.clone()).collect();

    let weights = data.weights().to_vec();
    let model = LogConcaveDensity::assemble(data, y, cells)?;
    let sigma = -model.y_star.iter().zip(&weights).map(|(y, w)| y * w).sum::<f64>() + model.total_integral;
    Ok(Fit {
        report: FitReport {
            iterations: solved.iterations,
            termination: solved.termination_reason,
            converged: solved.termination_reason.converged(),
            sigma,
            raw_integral,
            raw_touch_gap,
            trace: solved.trace,
        },
        model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tent::objective;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gaussian_cloud(n: usize, d: usize, seed: u64) -> DataSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect())
            .collect();
        DataSet::new(&pts).unwrap()
    }

    #[test]
    fn single_simplex_gives_the_uniform_density() {
        let pts = vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![0.5, 1.5]];
        let data = DataSet::new(&pts).unwrap();
        let fit = fit(&data, &SolverOptions::default()).unwrap();
        let vol: f64 = 1.5;
        for y in fit.model.y_star() {
            assert!((y + vol.ln()).abs() < 1e-3);
        }
        let centre = [2.5 / 3.0, 0.5];
        assert!((fit.model.density(&centre) - 1.0 / vol).abs() < 1e-3);
        assert_eq!(fit.model.density(&[5.0, 5.0]), 0.0);
    }

    #[test]
    fn fitted_model_is_normalised_and_poles_touch() {
        let data = gaussian_cloud(60, 2, 1);
        let fit = fit(&data, &SolverOptions::default()).unwrap();
        assert!(fit.report.converged, "{:?}", fit.report.termination);
        let m = &fit.model;
        assert!((m.total_integral() - 1.0).abs() <= 1e-4);
        assert!((m.masses().iter().sum::<f64>() - m.total_integral()).abs() < 1e-12);
        for (i, x) in data.points().enumerate() {
            assert!((m.log_density(x) - m.y_star()[i]).abs() <= 1e-4);
        }
        assert!(fit.report.raw_touch_gap <= 1e-4 && (fit.report.raw_integral - 1.0).abs() <= 1e-4);
    }

    #[test]
    fn solver_improves_on_the_start() {
        let data = gaussian_cloud(40, 2, 2);
        let y0 = gaussian_start(&data).unwrap();
        let fit = fit(&data, &SolverOptions::default()).unwrap();
        let start = objective(&data, &y0).unwrap().sigma;
        assert!(fit.report.sigma < start);
    }

    #[test]
    fn polish_cannot_improve_the_optimum() {
        let data = gaussian_cloud(40, 2, 3);
        let fit = fit(&data, &SolverOptions::default()).unwrap();
        let opts = SolverOptions {
            initial_step: 1e-3,
            max_iter: 100,
            ..Default::default()
        };
        let mut obj = Sigma { data: &data, eta: 1e-4 };
        let polished = crate::solver::minimize_subgradient(&mut obj, fit.model.y_star(), &opts).unwrap();
        assert!(fit.report.sigma - polished.objective_value <= 1e-8);
    }

    #[test]
    fn round_trip_reproduces_density_bit_for_bit() {
        let data = gaussian_cloud(30, 2, 4);
        let m = fit(&data, &SolverOptions::default()).unwrap().model;
        let back = LogConcaveDensity::from_json(&m.to_json()).unwrap();
        assert_eq!(back.y_star(), m.y_star());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let x = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            assert_eq!(m.density(&x).to_bits(), back.density(&x).to_bits());
        }
    }

    #[test]
    fn malformed_files_name_the_field() {
        let data = gaussian_cloud(10, 2, 5);
        let text = fit(&data, &SolverOptions::default()).unwrap().model.to_json();
        let truncated = &text[..text.len() / 2];
        assert!(matches!(LogConcaveDensity::from_json(truncated), Err(Error::Format { .. })));

        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["d"] = 3.into();
        match LogConcaveDensity::from_json(&v.to_string()) {
            Err(Error::Format { path, .. }) => assert_eq!(path, "points[0]"),
            other => panic!("{other:?}"),
        }
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["y_star"][2] = "x".into();
        match LogConcaveDensity::from_json(&v.to_string()) {
            Err(Error::Format { path, .. }) => assert_eq!(path, "y_star[2]"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn negligible_weights_are_dropped() {
        let base = gaussian_cloud(30, 2, 6);
        let mut pts: Vec<Vec<f64>> = base.points().map(<[f64]>::to_vec).collect();
        pts.push(vec![50.0, 50.0]);
        let mut w = vec![1.0; 30];
        w.push(1e-15);
        let weighted = DataSet::weighted(&pts, &w).unwrap();
        let a = fit(&weighted, &SolverOptions::default()).unwrap().model;
        let b = fit(&base, &SolverOptions::default()).unwrap().model;
        assert_eq!(a.data().len(), 30);
        assert_eq!(a.density(&[50.0, 50.0]), 0.0);
        assert!((a.density(&[0.1, 0.1]) - b.density(&[0.1, 0.1])).abs() < 1e-9);
    }
}
