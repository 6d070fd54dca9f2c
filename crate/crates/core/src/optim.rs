//! Derivative-free minimization: forward-difference gradients, projected
//! gradient descent with step halving, Powell's direction-set method and
//! exhaustive grid search.
//!
//! Objectives return `Err(EvalError)` when the underlying model fails. Powell
//! and the grid treat such points as `+inf`; the projected gradient treats
//! them as non-decrease during its step search.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{0}")]
pub struct EvalError(pub String);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimError {
    #[error("invalid optimizer input: {0}")]
    InvalidInput(String),
    #[error("objective failed at {point:?}: {source}")]
    Objective { point: Vec<f64>, source: EvalError },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Tolerance,
    MaxIter,
    Stalled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub point: Vec<f64>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimResult {
    pub best_point: Vec<f64>,
    pub best_value: f64,
    pub iterate_trace: Vec<TracePoint>,
    pub n_evals: usize,
    pub converged: bool,
    pub stop_reason: StopReason,
}

/// Counts evaluations and maps failures to `+inf`.
struct Counted<'a, F> {
    f: &'a F,
    n: usize,
}

impl<F: Fn(&[f64]) -> Result<f64, EvalError>> Counted<'_, F> {
    fn eval(&mut self, x: &[f64]) -> Result<f64, EvalError> {
        self.n += 1;
        (self.f)(x)
    }

    fn eval_or_inf(&mut self, x: &[f64]) -> f64 {
        match self.eval(x) {
            Ok(v) if !v.is_nan() => v,
            _ => f64::INFINITY,
        }
    }
}

/// Forward-difference gradient `(f(x + h e_k) - f(x)) / h`.
pub fn fd_gradient<F>(f: &F, x: &[f64], h: f64) -> Result<Vec<f64>, OptimError>
where
    F: Fn(&[f64]) -> Result<f64, EvalError>,
{
    let fx = f(x).map_err(|source| OptimError::Objective { point: x.to_vec(), source })?;
    fd_gradient_at(f, x, fx, h)
}

fn fd_gradient_at<F>(f: &F, x: &[f64], fx: f64, h: f64) -> Result<Vec<f64>, OptimError>
where
    F: Fn(&[f64]) -> Result<f64, EvalError>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(OptimError::InvalidInput(format!("difference step must be positive, got {h}")));
    }
    let mut g = Vec::with_capacity(x.len());
    let mut xh = x.to_vec();
    for k in 0..x.len() {
        xh[k] = x[k] + h;
        let fk = f(&xh).map_err(|source| OptimError::Objective { point: xh.clone(), source })?;
        g.push((fk - fx) / h);
        xh[k] = x[k];
    }
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientOptions {
    pub initial_step: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub fd_step: f64,
    /// Smallest step tried before the step search gives up.
    pub min_step: f64,
}

impl Default for GradientOptions {
    fn default() -> Self {
        GradientOptions {
            initial_step: 1.0,
            tol: 1e-6,
            max_iter: 100,
            fd_step: 1e-3,
            min_step: 1e-12,
        }
    }
}

fn project(x: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
    x.iter().zip(lo.iter().zip(hi)).map(|(v, (l, h))| v.clamp(*l, *h)).collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Projected gradient descent with step halving on the box `[lo, hi]`.
///
/// Each outer iteration restarts from `initial_step` and halves the step
/// while the projected trial point does not decrease `f`. The first search
/// compares the unscaled displacement with `tol`, later ones the displacement
/// times the step, as in the original formulation. A search that ends
/// without a decrease stops the run (`Stalled`), so accepted iterates always
/// decrease `f`.
pub fn projected_gradient<F>(f: &F, x0: &[f64], lo: &[f64], hi: &[f64], opts: &GradientOptions) -> Result<OptimResult, OptimError>
where
    F: Fn(&[f64]) -> Result<f64, EvalError>,
{
    let n = x0.len();
    if lo.len() != n || hi.len() != n {
        return Err(OptimError::InvalidInput("bounds and start point differ in length".into()));
    }
    if lo.iter().zip(hi).any(|(l, h)| !(l < h)) {
        return Err(OptimError::InvalidInput("lower bounds must be below upper bounds".into()));
    }
    if x0.iter().zip(lo.iter().zip(hi)).any(|(x, (l, h))| !(x >= l && x <= h)) {
        return Err(OptimError::InvalidInput(format!("start point {x0:?} outside the box")));
    }
    if !(opts.initial_step > 0.0 && opts.tol > 0.0 && opts.min_step > 0.0) {
        return Err(OptimError::InvalidInput("step sizes and tolerance must be positive".into()));
    }
    let mut n_evals = 0;
    let eval = |x: &[f64], n_evals: &mut usize| -> Result<f64, EvalError> {
        *n_evals += 1;
        f(x)
    };
    let mut x = x0.to_vec();
    let mut fx = eval(&x, &mut n_evals).map_err(|source| OptimError::Objective { point: x.clone(), source })?;
    let mut trace = vec![TracePoint { point: x.clone(), value: fx }];

    let gradient = |x: &[f64], fx: f64, n_evals: &mut usize| -> Option<Vec<f64>> {
        *n_evals += x.len();
        fd_gradient_at(f, x, fx, opts.fd_step).ok()
    };
    // Returns the last trial point and its value, or `None` for the value if
    // the search ended without decrease.
    let search = |x: &[f64], fx: f64, g: &[f64], scaled: bool, n_evals: &mut usize| -> (Vec<f64>, Option<f64>) {
        let mut s = opts.initial_step;
        loop {
            let trial: Vec<f64> = x.iter().zip(g).map(|(xi, gi)| xi - s * gi).collect();
            let trial = project(&trial, lo, hi);
            let d = dist(&trial, x);
            let ft = eval(&trial, n_evals).ok().filter(|v| !v.is_nan());
            let decreased = matches!(ft, Some(v) if v < fx);
            let moving = if scaled { s * d > opts.tol } else { d > opts.tol };
            if decreased {
                return (trial, ft);
            }
            if !moving || s / 2.0 < opts.min_step {
                return (trial, None);
            }
            s /= 2.0;
        }
    };

    let mut iter = 0;
    let Some(mut g) = gradient(&x, fx, &mut n_evals) else {
        return Ok(finish(trace, n_evals, StopReason::Stalled));
    };
    let (mut trial, mut ft) = search(&x, fx, &g, false, &mut n_evals);
    loop {
        if dist(&trial, &x) <= opts.tol {
            return Ok(finish(trace, n_evals, StopReason::Tolerance));
        }
        if iter >= opts.max_iter {
            return Ok(finish(trace, n_evals, StopReason::MaxIter));
        }
        let Some(v) = ft else {
            return Ok(finish(trace, n_evals, StopReason::Stalled));
        };
        x = trial;
        fx = v;
        iter += 1;
        trace.push(TracePoint { point: x.clone(), value: fx });
        match gradient(&x, fx, &mut n_evals) {
            Some(gn) => g = gn,
            None => return Ok(finish(trace, n_evals, StopReason::Stalled)),
        }
        (trial, ft) = search(&x, fx, &g, true, &mut n_evals);
    }
}

fn finish(trace: Vec<TracePoint>, n_evals: usize, stop_reason: StopReason) -> OptimResult {
    let best = trace
        .iter()
        .min_by(|a, b| a.value.total_cmp(&b.value))
        .expect("trace holds the start point")
        .clone();
    OptimResult {
        best_point: best.point,
        best_value: best.value,
        iterate_trace: trace,
        n_evals,
        converged: stop_reason == StopReason::Tolerance,
        stop_reason,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowellOptions {
    /// Relative tolerance of the line searches and of the displacement test.
    pub xtol: f64,
    /// Relative decrease per sweep below which the run may stop.
    pub ftol: f64,
    pub max_iter: usize,
    /// Trial step used to start bracketing along each direction.
    pub initial_step: f64,
}

impl Default for PowellOptions {
    fn default() -> Self {
        PowellOptions {
            xtol: 1e-6,
            ftol: 1e-10,
            max_iter: 200,
            initial_step: 0.1,
        }
    }
}

const GOLDEN: f64 = 0.381_966_011_250_105_1;
const TINY: f64 = 1e-20;

/// Minimizes `phi` along a line starting at `t = 0` where `phi(0) = f0`.
/// Returns `(t, phi(t))` with `phi(t) <= f0`.
fn line_minimize(phi: &mut dyn FnMut(f64) -> f64, f0: f64, step: f64, xtol: f64, atol: f64) -> (f64, f64) {
    // bracket by doubling
    let mut a = 0.0;
    let (mut b, mut fb) = (step, phi(step));
    if fb > f0 {
        a = step;
        b = 0.0;
        fb = f0;
    }
    let mut c = b + 2.0 * (b - a);
    let mut fc = phi(c);
    let mut expansions = 0;
    while fc <= fb && expansions < 60 {
        a = b;
        b = c;
        fb = fc;
        c = b + 2.0 * (b - a);
        fc = phi(c);
        expansions += 1;
    }
    if fc <= fb {
        // unbounded descent within the expansion budget
        return if fc < f0 { (c, fc) } else { (0.0, f0) };
    }
    let (t, ft) = brent(phi, a.min(c), a.max(c), b, fb, xtol, atol);
    if ft <= f0 {
        (t, ft)
    } else {
        (0.0, f0)
    }
}

/// Brent's parabolic/golden-section minimization inside `[lo, hi]` from the
/// interior point `x` with value `fx`, to within `xtol |x| + atol`.
fn brent(phi: &mut dyn FnMut(f64) -> f64, mut lo: f64, mut hi: f64, x0: f64, fx0: f64, xtol: f64, atol: f64) -> (f64, f64) {
    let (mut x, mut w, mut v) = (x0, x0, x0);
    let (mut fx, mut fw, mut fv) = (fx0, fx0, fx0);
    let mut d: f64 = 0.0;
    let mut e: f64 = 0.0;
    for _ in 0..200 {
        let xm = 0.5 * (lo + hi);
        let tol1 = xtol * x.abs() + atol;
        let tol2 = 2.0 * tol1;
        if (x - xm).abs() <= tol2 - 0.5 * (hi - lo) {
            break;
        }
        let mut golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            let etemp = e;
            e = d;
            if p.abs() < (0.5 * q * etemp).abs() && p > q * (lo - x) && p < q * (hi - x) {
                d = p / q;
                let u = x + d;
                if u - lo < tol2 || hi - u < tol2 {
                    d = tol1.copysign(xm - x);
                }
                golden = false;
            }
        }
        if golden {
            e = if x >= xm { lo - x } else { hi - x };
            d = GOLDEN * e;
        }
        let u = if d.abs() >= tol1 { x + d } else { x + tol1.copysign(d) };
        let fu = phi(u);
        if fu <= fx {
            if u >= x {
                lo = x;
            } else {
                hi = x;
            }
            (v, fv) = (w, fw);
            (w, fw) = (x, fx);
            (x, fx) = (u, fu);
        } else {
            if u < x {
                lo = u;
            } else {
                hi = u;
            }
            if fu <= fw || w == x {
                (v, fv) = (w, fw);
                (w, fw) = (u, fu);
            } else if fu <= fv || v == x || v == w {
                (v, fv) = (u, fu);
            }
        }
    }
    (x, fx)
}

/// Powell's direction-set method starting from the coordinate directions.
///
/// After each sweep the net displacement becomes a new search direction and
/// replaces the direction along which the sweep achieved its largest
/// decrease, unless Powell's test indicates the set should be kept.
pub fn powell_minimize<F>(f: &F, x0: &[f64], opts: &PowellOptions) -> Result<OptimResult, OptimError>
where
    F: Fn(&[f64]) -> Result<f64, EvalError>,
{
    let n = x0.len();
    if n == 0 {
        return Err(OptimError::InvalidInput("empty start point".into()));
    }
    if !(opts.xtol > 0.0 && opts.ftol >= 0.0 && opts.initial_step > 0.0) {
        return Err(OptimError::InvalidInput("tolerances and initial step must be positive".into()));
    }
    let mut cf = Counted { f, n: 0 };
    let mut x = x0.to_vec();
    let mut fx = cf.eval(&x).map_err(|source| OptimError::Objective { point: x.clone(), source })?;
    if !fx.is_finite() {
        return Err(OptimError::Objective {
            point: x.clone(),
            source: EvalError(format!("non-finite objective {fx}")),
        });
    }
    let mut trace = vec![TracePoint { point: x.clone(), value: fx }];
    let mut dirs: Vec<Vec<f64>> = (0..n)
        .map(|k| (0..n).map(|j| if j == k { 1.0 } else { 0.0 }).collect())
        .collect();

    let along = |cf: &mut Counted<F>, x: &[f64], fx: f64, d: &[f64]| -> (Vec<f64>, f64) {
        let mut phi = |t: f64| {
            let p: Vec<f64> = x.iter().zip(d).map(|(xi, di)| xi + t * di).collect();
            cf.eval_or_inf(&p)
        };
        // absolute resolution in the line parameter, relative to the point scale
        let scale = 1.0 + x.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        let atol = (opts.xtol * scale / norm).max(1e-15);
        let (t, ft) = line_minimize(&mut phi, fx, opts.initial_step, opts.xtol, atol);
        (x.iter().zip(d).map(|(xi, di)| xi + t * di).collect(), ft)
    };

    let mut iter = 0;
    let stop = loop {
        if iter >= opts.max_iter {
            break StopReason::MaxIter;
        }
        iter += 1;
        let start = x.clone();
        let f_start = fx;
        let mut biggest = (0, 0.0);
        for (k, d) in dirs.iter().enumerate() {
            let (xn, fxn) = along(&mut cf, &x, fx, d);
            if fx - fxn > biggest.1 {
                biggest = (k, fx - fxn);
            }
            if fxn < fx {
                x = xn;
                fx = fxn;
                trace.push(TracePoint { point: x.clone(), value: fx });
            }
        }
        let disp = dist(&x, &start);
        let scale = x.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let small_move = disp <= opts.xtol * scale + 1e-10;
        if 2.0 * (f_start - fx) <= opts.ftol * (f_start.abs() + fx.abs()) + TINY && small_move {
            break StopReason::Tolerance;
        }
        let dnew: Vec<f64> = x.iter().zip(&start).map(|(a, b)| a - b).collect();
        let extrap: Vec<f64> = x.iter().zip(&dnew).map(|(a, d)| a + d).collect();
        let fe = cf.eval_or_inf(&extrap);
        if fe < f_start {
            let t = 2.0 * (f_start - 2.0 * fx + fe) * (f_start - fx - biggest.1).powi(2)
                - biggest.1 * (f_start - fe).powi(2);
            if t < 0.0 {
                let (xn, fxn) = along(&mut cf, &x, fx, &dnew);
                if fxn < fx {
                    x = xn;
                    fx = fxn;
                    trace.push(TracePoint { point: x.clone(), value: fx });
                }
                dirs.remove(biggest.0);
                dirs.push(dnew);
            }
        }
    };
    Ok(finish(trace, cf.n, stop))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub axis1: Vec<f64>,
    pub axis2: Vec<f64>,
    /// Row-major values, `values[i * n2 + j]` at `(axis1[i], axis2[j])`;
    /// failed evaluations are `+inf`.
    pub values: Vec<f64>,
    pub argmin: [f64; 2],
    pub min_value: f64,
}

impl GridResult {
    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.axis2.len() + j]
    }

    /// Grid indices of the minimum.
    pub fn argmin_index(&self) -> (usize, usize) {
        let k = first_min(&self.values);
        (k / self.axis2.len(), k % self.axis2.len())
    }
}

fn first_min(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in values.iter().enumerate() {
        if *v < values[best] || (values[best].is_nan() && !v.is_nan()) {
            best = k;
        }
    }
    best
}

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| if i + 1 == n { hi } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 })
        .collect()
}

/// Evaluates `f` on the tensor grid of `[lo1, hi1] x [lo2, hi2]` including the
/// endpoints. Ties are resolved towards the first row-major entry.
pub fn grid_search<F>(f: &F, box_: [[f64; 2]; 2], n1: usize, n2: usize) -> Result<GridResult, OptimError>
where
    F: Fn(&[f64]) -> Result<f64, EvalError> + Sync,
{
    if n1 < 2 || n2 < 2 {
        return Err(OptimError::InvalidInput(format!("grid needs at least 2 points per axis, got {n1}x{n2}")));
    }
    for [lo, hi] in box_ {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(OptimError::InvalidInput(format!("degenerate interval [{lo}, {hi}]")));
        }
    }
    let axis1 = linspace(box_[0][0], box_[0][1], n1);
    let axis2 = linspace(box_[1][0], box_[1][1], n2);
    let values: Vec<f64> = (0..n1 * n2)
        .into_par_iter()
        .map(|k| {
            let p = [axis1[k / n2], axis2[k % n2]];
            match f(&p) {
                Ok(v) if !v.is_nan() => v,
                _ => f64::INFINITY,
            }
        })
        .collect();
    let k = first_min(&values);
    Ok(GridResult {
        argmin: [axis1[k / n2], axis2[k % n2]],
        min_value: values[k],
        axis1,
        axis2,
        values,
    })
}
