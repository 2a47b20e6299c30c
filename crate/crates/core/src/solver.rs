//! Nonsmooth convex minimisation: Shor's normalised subgradient method and
//! Shor's r-algorithm (subgradient steps in a space that is repeatedly
//! dilated along the difference of successive subgradients).

use std::io::Write;

use crate::error::{Error, Result};
use crate::linalg::{dot, norm};

/// Step lengths `h_ℓ` for the plain subgradient method.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepSchedule {
    /// `h_ℓ = h_0 / ℓ`
    Harmonic,
    /// `h_ℓ = h_0 / √ℓ`
    InverseSqrt,
    /// `h_ℓ = h_0`; does not satisfy `h_ℓ → 0`, kept for comparisons.
    Constant,
}

impl StepSchedule {
    fn step(self, h0: f64, iter: usize) -> f64 {
        match self {
            StepSchedule::Harmonic => h0 / iter as f64,
            StepSchedule::InverseSqrt => h0 / (iter as f64).sqrt(),
            StepSchedule::Constant => h0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverOptions {
    /// Objective-change tolerance.
    pub delta: f64,
    /// Per-coordinate argument-change tolerance.
    pub eps: f64,
    /// Tolerance for the caller's extra criterion (normalisation of the
    /// density in the MLE).
    pub eta: f64,
    /// Space dilation coefficient, `> 1`.
    pub dilation: f64,
    pub initial_step: f64,
    pub max_iter: usize,
    pub step_schedule: StepSchedule,
    /// Trial points per r-algorithm line search; `1` gives one fixed step.
    pub max_line_search: usize,
    /// Plain-method iterations run after the r-algorithm.
    pub polish_iterations: usize,
    pub trace: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            delta: 1e-8,
            eps: 1e-4,
            eta: 1e-4,
            dilation: 2.0,
            initial_step: 1.0,
            max_iter: 20_000,
            step_schedule: StepSchedule::Harmonic,
            max_line_search: 30,
            polish_iterations: 0,
            trace: false,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.delta, self.eps, self.eta, self.initial_step];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidInput("tolerances and step must be positive".into()));
        }
        if !(self.dilation >= 1.0) {
            return Err(Error::InvalidInput("dilation must be at least 1".into()));
        }
        if self.max_iter == 0 || self.max_line_search == 0 {
            return Err(Error::InvalidInput("iteration budgets must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    ObjectiveChange,
    ArgumentChange,
    CallerCriterion,
    MaxIter,
    /// A zero subgradient was found: the point is an exact minimiser.
    ZeroSubgradient,
}

impl Termination {
    pub fn converged(self) -> bool {
        self != Termination::MaxIter
    }
}

#[derive(Clone, Debug)]
pub struct SolveResult {
    pub y_opt: Vec<f64>,
    pub objective_value: f64,
    pub iterations: usize,
    pub termination_reason: Termination,
    /// The line search failed to find any decrease.
    pub stalled: bool,
    /// Best objective so far after each iteration, when tracing is on.
    pub trace: Option<Vec<(usize, f64)>>,
}

impl SolveResult {
    /// Writes the trace as `iter,objective` lines.
    pub fn write_trace<W: Write>(&self, mut sink: W) -> std::io::Result<()> {
        for (it, f) in self.trace.iter().flatten() {
            writeln!(sink, "{it},{f}")?;
        }
        Ok(())
    }
}

/// One evaluation of the objective.
#[derive(Clone, Copy, Debug)]
pub struct Evaluation {
    pub value: f64,
    /// The caller's extra stopping criterion at this point.
    pub criterion: bool,
}

/// A convex objective with a subgradient oracle.
pub trait Objective {
    /// Returns the value at `x` and writes a subgradient to `grad`.
    /// [`Error::Overflow`] is treated as `+∞` by the line search.
    fn evaluate(&mut self, x: &[f64], grad: &mut [f64]) -> Result<Evaluation>;
}

/// Adapter from a value closure and a subgradient closure.
pub struct FnObjective<F, G> {
    pub f: F,
    pub g: G,
}

impl<F, G> Objective for FnObjective<F, G>
where
    F: FnMut(&[f64]) -> f64,
    G: FnMut(&[f64], &mut [f64]),
{
    fn evaluate(&mut self, x: &[f64], grad: &mut [f64]) -> Result<Evaluation> {
        (self.g)(x, grad);
        Ok(Evaluation {
            value: (self.f)(x),
            criterion: true,
        })
    }
}

/// Builds an [`Objective`] from separate value and subgradient closures.
pub fn from_fns<F, G>(f: F, g: G) -> FnObjective<F, G>
where
    F: FnMut(&[f64]) -> f64,
    G: FnMut(&[f64], &mut [f64]),
{
    FnObjective { f, g }
}

/// True iff `|f_curr − f_prev| ≤ δ`, every `|curr_i − prev_i| ≤ ε`, and the
/// caller criterion (if any) holds.
pub fn stopping_check(
    prev: &[f64],
    curr: &[f64],
    f_prev: f64,
    f_curr: f64,
    caller: Option<bool>,
    opts: &SolverOptions,
) -> bool {
    criteria(prev, curr, f_prev, f_curr, caller, opts).iter().all(|&c| c)
}

/// `[objective, argument, caller]` criteria.
fn criteria(prev: &[f64], curr: &[f64], f_prev: f64, f_curr: f64, caller: Option<bool>, opts: &SolverOptions) -> [bool; 3] {
    [
        (f_curr - f_prev).abs() <= opts.delta,
        prev.iter().zip(curr).all(|(a, b)| (a - b).abs() <= opts.eps),
        caller.unwrap_or(true),
    ]
}

/// The criterion that became satisfied last determines the reported reason.
fn reason(previous_failures: [bool; 3]) -> Termination {
    if previous_failures[2] {
        Termination::CallerCriterion
    } else if previous_failures[1] {
        Termination::ArgumentChange
    } else {
        Termination::ObjectiveChange
    }
}

struct Point {
    x: Vec<f64>,
    f: f64,
    g: Vec<f64>,
    criterion: bool,
}

fn eval_point<O: Objective>(obj: &mut O, x: Vec<f64>) -> Result<Option<Point>> {
    let mut g = vec![0.0; x.len()];
    match obj.evaluate(&x, &mut g) {
        Ok(e) if e.value.is_finite() && g.iter().all(|v| v.is_finite()) => Ok(Some(Point {
            x,
            f: e.value,
            g,
            criterion: e.criterion,
        })),
        Ok(_) | Err(Error::Overflow { .. }) => Ok(None),
        Err(Error::CallbackFailure(m)) => Err(Error::CallbackFailure(m)),
        Err(e) => Err(Error::CallbackFailure(e.to_string())),
    }
}

fn start<O: Objective>(obj: &mut O, y0: &[f64]) -> Result<Point> {
    eval_point(obj, y0.to_vec())?
        .ok_or_else(|| Error::CallbackFailure("objective is not finite at the starting point".into()))
}

/// Shor's subgradient method `y ← y − h_ℓ ∂f/‖∂f‖`. Returns the best
/// iterate visited.
pub fn minimize_subgradient<O: Objective>(obj: &mut O, y0: &[f64], opts: &SolverOptions) -> Result<SolveResult> {
    opts.validate()?;
    let current = start(obj, y0)?;
    subgradient_from(obj, current, opts, opts.max_iter)
}

fn subgradient_from<O: Objective>(obj: &mut O, mut current: Point, opts: &SolverOptions, budget: usize) -> Result<SolveResult> {
    let mut best = (current.x.clone(), current.f);
    let mut trace = opts.trace.then(Vec::new);
    let mut failures = [true; 3];
    for iter in 1..=budget {
        let gnorm = norm(&current.g);
        if gnorm == 0.0 {
            return Ok(finish(best, iter - 1, Termination::ZeroSubgradient, false, trace));
        }
        let h = opts.step_schedule.step(opts.initial_step, iter);
        let x: Vec<f64> = current.x.iter().zip(&current.g).map(|(x, g)| x - h * (g / gnorm)).collect();
        let next = match eval_point(obj, x)? {
            Some(p) => p,
            None => {
                return Err(Error::CallbackFailure(format!(
                    "objective not finite after subgradient step at iteration {iter}"
                )))
            }
        };
        if next.f < best.1 {
            best = (next.x.clone(), next.f);
        }
        if let Some(t) = trace.as_mut() {
            t.push((iter, best.1));
        }
        let c = criteria(&current.x, &next.x, current.f, next.f, Some(next.criterion), opts);
        current = next;
        if c.iter().all(|&v| v) {
            return Ok(finish(best, iter, reason(failures), false, trace));
        }
        failures = c.map(|v| !v);
    }
    Ok(finish(best, budget, Termination::MaxIter, false, trace))
}

fn finish(best: (Vec<f64>, f64), iterations: usize, reason: Termination, stalled: bool, trace: Option<Vec<(usize, f64)>>) -> SolveResult {
    SolveResult {
        y_opt: best.0,
        objective_value: best.1,
        iterations,
        termination_reason: reason,
        stalled,
        trace,
    }
}

/// Steps taken in one search before the step length grows.
const STEPS_PER_GROWTH: usize = 3;
const STEP_GROWTH: f64 = 1.1;
/// Shrink factor for the step length after a search that stopped at its
/// first step.
const STEP_SHRINK: f64 = 0.995;

/// Dense row-major `n×n` transformation of the r-algorithm.
struct SpaceTransform {
    n: usize,
    b: Vec<f64>,
    dilated: bool,
}

impl SpaceTransform {
    fn identity(n: usize) -> Self {
        let mut b = vec![0.0; n * n];
        (0..n).for_each(|i| b[i * n + i] = 1.0);
        Self { n, b, dilated: false }
    }

    /// `B^T v`
    fn transpose_apply(&self, v: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut out = vec![0.0; n];
        for (row, &vi) in self.b.chunks_exact(n).zip(v) {
            if vi != 0.0 {
                out.iter_mut().zip(row).for_each(|(o, bij)| *o += bij * vi);
            }
        }
        out
    }

    /// `B v`
    fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.b.chunks_exact(self.n).map(|row| dot(row, v)).collect()
    }

    /// `B ← B + (β − 1)(B r) rᵀ` for unit `r`, `β = 1/dilation`.
    fn dilate(&mut self, r: &[f64], beta: f64) {
        let br = self.apply(r);
        let n = self.n;
        for (row, bri) in self.b.chunks_exact_mut(n).zip(&br) {
            let c = (beta - 1.0) * bri;
            row.iter_mut().zip(r).for_each(|(bij, rj)| *bij += c * rj);
        }
        self.dilated = true;
    }
}

/// Shor's r-algorithm.
///
/// Each iteration moves along `−B ξ` with `ξ = Bᵀg/‖Bᵀg‖`, taking steps of
/// length `h` while the directional derivative stays negative (the step
/// grows after every few steps and is halved when the objective is not
/// finite). `B` is then dilated along the normalised difference of
/// successive transformed subgradients. Iterates need not decrease the
/// objective, so the best point is tracked separately. If no finite trial
/// point exists, `B` is reset once before giving up. With
/// `opts.polish_iterations > 0`, the plain method continues from the
/// result.
pub fn minimize_r_algorithm<O: Objective>(obj: &mut O, y0: &[f64], opts: &SolverOptions) -> Result<SolveResult> {
    opts.validate()?;
    let n = y0.len();
    let beta = 1.0 / opts.dilation;
    let mut current = start(obj, y0)?;
    let mut transform = SpaceTransform::identity(n);
    let mut h = opts.initial_step;
    let mut trace = opts.trace.then(Vec::new);
    let mut failures = [true; 3];
    let mut result = None;
    let mut best = (current.x.clone(), current.f);

    for iter in 1..=opts.max_iter {
        let mut gt = transform.transpose_apply(&current.g);
        let mut gt_norm = norm(&gt);
        if gt_norm == 0.0 {
            if norm(&current.g) == 0.0 {
                result = Some((iter - 1, Termination::ZeroSubgradient, false));
                break;
            }
            transform = SpaceTransform::identity(n);
            gt = current.g.clone();
            gt_norm = norm(&gt);
        }
        let xi: Vec<f64> = gt.iter().map(|v| v / gt_norm).collect();
        let dx = transform.apply(&xi);

        let mut accepted: Option<Point> = None;
        let mut steps = 0;
        for _ in 0..opts.max_line_search {
            let from = accepted.as_ref().unwrap_or(&current);
            let x: Vec<f64> = from.x.iter().zip(&dx).map(|(x, d)| x - h * d).collect();
            if let Some(p) = eval_point(obj, x)? {
                let still_descending = dot(&p.g, &dx) > 0.0;
                accepted = Some(p);
                steps += 1;
                if steps % STEPS_PER_GROWTH == 0 {
                    h *= STEP_GROWTH;
                }
                if !still_descending {
                    break;
                }
            } else if accepted.is_some() {
                break;
            } else {
                h *= 0.5;
            }
        }

        if steps == 1 && opts.max_line_search > 1 {
            h *= STEP_SHRINK;
        }
        let Some(next) = accepted else {
            // no finite point along this direction
            if transform.dilated {
                transform = SpaceTransform::identity(n);
                h = opts.initial_step;
                continue;
            }
            let c = criteria(&current.x, &current.x, current.f, current.f, Some(current.criterion), opts);
            let outcome = if c.iter().all(|&v| v) {
                (iter, reason(failures), true)
            } else {
                (iter, Termination::MaxIter, true)
            };
            result = Some(outcome);
            break;
        };

        let gt_next = transform.transpose_apply(&next.g);
        let diff: Vec<f64> = gt_next.iter().zip(&gt).map(|(a, b)| a - b).collect();
        let diff_norm = norm(&diff);
        if diff_norm > 0.0 && beta != 1.0 {
            let r: Vec<f64> = diff.iter().map(|v| v / diff_norm).collect();
            transform.dilate(&r, beta);
        }

        if next.f < best.1 {
            best = (next.x.clone(), next.f);
        }
        if let Some(t) = trace.as_mut() {
            t.push((iter, best.1));
        }
        let c = criteria(&current.x, &next.x, current.f, next.f, Some(next.criterion), opts);
        current = next;
        if c.iter().all(|&v| v) {
            result = Some((iter, reason(failures), false));
            break;
        }
        failures = c.map(|v| !v);
    }

    let (iterations, termination, stalled) = result.unwrap_or((opts.max_iter, Termination::MaxIter, false));
    let mut out = finish(best, iterations, termination, stalled, trace);
    if opts.polish_iterations > 0 {
        let polish = subgradient_from(obj, current, opts, opts.polish_iterations)?;
        if polish.objective_value < out.objective_value {
            out.y_opt = polish.y_opt;
            out.objective_value = polish.objective_value;
        }
        if let (Some(t), Some(pt)) = (out.trace.as_mut(), polish.trace) {
            let best = out.objective_value;
            t.extend(pt.into_iter().map(|(i, f)| (iterations + i, f.min(best))));
        }
    }
    Ok(out)
}
