//! Limited-memory BFGS with a strong-Wolfe line search.
//!
//! The objective is a closure that writes the gradient into its second
//! argument and returns the value. Non-finite values are treated as "too
//! far" by the line search, which then shrinks the step.

use std::collections::VecDeque;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsOptions {
    pub memory: usize,
    pub max_iterations: usize,
    /// Stop when `max |g_i| <= gtol`.
    pub gtol: f64,
    /// Stop when `f_prev - f <= ftol * max(|f_prev|, |f|)`.
    pub ftol: f64,
    pub max_linesearch: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iterations: 2000,
            gtol: 1e-18,
            ftol: 1e-13,
            max_linesearch: 40,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Gradient,
    Reduction,
    /// No step along the search direction decreased the objective.
    LineSearch,
    MaxIterations,
    NonFinite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub termination: Termination,
}

impl Minimum {
    pub fn converged(&self) -> bool {
        self.f.is_finite()
            && !matches!(
                self.termination,
                Termination::MaxIterations | Termination::NonFinite
            )
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

struct Pair {
    s: Vec<f64>,
    y: Vec<f64>,
    rho: f64,
}

/// Two-loop recursion: returns `-H g`.
fn direction(g: &[f64], history: &VecDeque<Pair>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for pair in history.iter().rev() {
        let a = pair.rho * dot(&pair.s, &q);
        for (qi, yi) in q.iter_mut().zip(&pair.y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some(last) = history.back() {
        let gamma = dot(&last.s, &last.y) / dot(&last.y, &last.y);
        for qi in q.iter_mut() {
            *qi *= gamma;
        }
    }
    for (pair, a) in history.iter().zip(alphas.into_iter().rev()) {
        let b = pair.rho * dot(&pair.y, &q);
        for (qi, si) in q.iter_mut().zip(&pair.s) {
            *qi += (a - b) * si;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

struct Probe {
    step: f64,
    f: f64,
    slope: f64,
    x: Vec<f64>,
    g: Vec<f64>,
}

/// Minimizer of the cubic through (a, fa, da) and (b, fb, db), falling back
/// to bisection when the cubic is degenerate or lands outside the bracket.
fn cubic_min(a: f64, fa: f64, da: f64, b: f64, fb: f64, db: f64) -> f64 {
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    let mid = 0.5 * (a + b);
    if !(fa.is_finite() && fb.is_finite() && da.is_finite() && db.is_finite()) {
        return mid;
    }
    let d1 = da + db - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    if disc < 0.0 {
        return mid;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let t = b - (b - a) * (db + d2 - d1) / (db - da + 2.0 * d2);
    let margin = 0.1 * (hi - lo);
    if t.is_finite() && t > lo + margin && t < hi - margin {
        t
    } else {
        mid
    }
}

struct LineSearch<'a, F> {
    f: &'a mut F,
    x: &'a [f64],
    d: &'a [f64],
    f0: f64,
    slope0: f64,
    evals: usize,
    max_evals: usize,
}

const C1: f64 = 1e-4;
const C2: f64 = 0.9;

impl<F: FnMut(&[f64], &mut [f64]) -> f64> LineSearch<'_, F> {
    fn probe(&mut self, step: f64) -> Probe {
        self.evals += 1;
        let x: Vec<f64> = self.x.iter().zip(self.d).map(|(xi, di)| xi + step * di).collect();
        let mut g = vec![0.0; x.len()];
        let f = (self.f)(&x, &mut g);
        let slope = dot(&g, self.d);
        Probe {
            step,
            f,
            slope,
            x,
            g,
        }
    }

    fn sufficient(&self, p: &Probe) -> bool {
        p.f.is_finite() && p.f <= self.f0 + C1 * p.step * self.slope0
    }

    fn curvature(&self, p: &Probe) -> bool {
        p.slope.abs() <= -C2 * self.slope0
    }

    /// Returns the accepted probe, or the best decreasing probe seen when the
    /// Wolfe conditions could not be met within the evaluation budget.
    fn run(mut self, initial: f64) -> Option<Probe> {
        let mut prev = Probe {
            step: 0.0,
            f: self.f0,
            slope: self.slope0,
            x: self.x.to_vec(),
            g: Vec::new(),
        };
        let mut step = initial;
        let mut best: Option<Probe> = None;
        loop {
            if self.evals >= self.max_evals {
                return best;
            }
            let p = self.probe(step);
            if p.f.is_finite() && p.f < self.f0 && best.as_ref().map_or(true, |b| p.f < b.f) {
                best = Some(clone_probe(&p));
            }
            if !self.sufficient(&p) || (prev.step > 0.0 && p.f >= prev.f) {
                return self.zoom(prev, p, best);
            }
            if self.curvature(&p) {
                return Some(p);
            }
            if p.slope >= 0.0 {
                return self.zoom(p, prev, best);
            }
            prev = p;
            step *= 2.0;
        }
    }

    fn zoom(&mut self, mut lo: Probe, mut hi: Probe, mut best: Option<Probe>) -> Option<Probe> {
        loop {
            if self.evals >= self.max_evals {
                return best;
            }
            let step = if hi.f.is_finite() {
                cubic_min(lo.step, lo.f, lo.slope, hi.step, hi.f, hi.slope)
            } else {
                0.5 * (lo.step + hi.step)
            };
            if (hi.step - lo.step).abs() <= 1e-16 * lo.step.abs().max(hi.step.abs()) {
                return best;
            }
            let p = self.probe(step);
            if p.f.is_finite() && p.f < self.f0 && best.as_ref().map_or(true, |b| p.f < b.f) {
                best = Some(clone_probe(&p));
            }
            if !self.sufficient(&p) || p.f >= lo.f {
                hi = p;
            } else {
                if self.curvature(&p) {
                    return Some(p);
                }
                if p.slope * (hi.step - lo.step) >= 0.0 {
                    hi = lo;
                }
                lo = p;
            }
        }
    }
}

fn clone_probe(p: &Probe) -> Probe {
    Probe {
        step: p.step,
        f: p.f,
        slope: p.slope,
        x: p.x.clone(),
        g: p.g.clone(),
    }
}

pub fn minimize<F>(mut objective: F, x0: &[f64], opts: &LbfgsOptions) -> Minimum
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let mut f = objective(&x, &mut g);
    let mut history: VecDeque<Pair> = VecDeque::with_capacity(opts.memory);

    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Minimum {
            x,
            f,
            iterations: 0,
            termination: Termination::NonFinite,
        };
    }

    for iter in 0..opts.max_iterations {
        if inf_norm(&g) <= opts.gtol || f == 0.0 {
            return Minimum {
                x,
                f,
                iterations: iter,
                termination: Termination::Gradient,
            };
        }

        let mut d = direction(&g, &history);
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            // not a descent direction; restart from steepest descent
            history.clear();
            d = g.iter().map(|v| -v).collect();
            slope = dot(&g, &d);
        }
        let initial = if history.is_empty() {
            (1.0 / dot(&d, &d).sqrt()).min(1.0)
        } else {
            1.0
        };

        let search = LineSearch {
            f: &mut objective,
            x: &x,
            d: &d,
            f0: f,
            slope0: slope,
            evals: 0,
            max_evals: opts.max_linesearch,
        };
        let Some(accepted) = search.run(initial) else {
            if !history.is_empty() {
                history.clear();
                continue;
            }
            return Minimum {
                x,
                f,
                iterations: iter,
                termination: Termination::LineSearch,
            };
        };

        let s: Vec<f64> = accepted.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = accepted.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        let f_prev = f;
        x = accepted.x;
        g = accepted.g;
        f = accepted.f;
        if sy > 1e-300 && y.iter().all(|v| v.is_finite()) {
            if history.len() == opts.memory {
                history.pop_front();
            }
            history.push_back(Pair { s, y, rho: 1.0 / sy });
        }

        if f_prev - f <= opts.ftol * f_prev.abs().max(f.abs()) {
            return Minimum {
                x,
                f,
                iterations: iter + 1,
                termination: Termination::Reduction,
            };
        }
    }
    Minimum {
        x,
        f,
        iterations: opts.max_iterations,
        termination: Termination::MaxIterations,
    }
}

/// Central-difference gradient with step `1e-6 * max(1, |x_i|)`.
pub fn central_gradient<F>(mut f: F, x: &[f64], g: &mut [f64])
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let h = 1e-6 * x[i].abs().max(1.0);
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        g[i] = (up - down) / (2.0 * h);
    }
}
