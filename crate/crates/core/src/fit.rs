//! Fitting the law to observed loss curves.
//!
//! The objective is the mean Huber penalty of log-loss residuals,
//! `mean_j huber_delta(ln L_pred_j - ln L_obs_j)`, minimized with L-BFGS over
//! transformed parameters (logarithms of the positive constants). Several
//! seeded random starts are run and the lowest objective wins, ties going to
//! the lowest start index. One parameter set is shared by all runs of the
//! dataset.

use std::collections::BTreeMap;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::areas::{compute_areas_with, split_areas, AreaPoint, DEFAULT_LAMBDA};
use crate::error::{Error, Result};
use crate::law::{
    signed_pow, Domain, EvalContext, LawParams, LossSeries, ModelSizeParams, ReplayParams,
    Variant, MIN_FORWARD_AREA,
};
use crate::lbfgs::{central_gradient, minimize, LbfgsOptions};
use crate::schedule::Schedule;

#[derive(Debug, Clone, PartialEq)]
pub struct Run {
    pub schedule: Schedule,
    pub pt: Option<LossSeries>,
    pub cpt: Option<LossSeries>,
    pub r_cpt: f64,
    pub n: Option<f64>,
}

impl Run {
    pub fn new(schedule: Schedule) -> Self {
        Self {
            schedule,
            pt: None,
            cpt: None,
            r_cpt: 1.0,
            n: None,
        }
    }

    pub fn series(&self, domain: Domain) -> Option<&LossSeries> {
        match domain {
            Domain::Pt => self.pt.as_ref(),
            Domain::Cpt => self.cpt.as_ref(),
        }
    }

    pub fn context(&self, domain: Domain) -> EvalContext {
        EvalContext {
            r_cpt: self.r_cpt,
            n: self.n.unwrap_or(1.0),
            domain,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub runs: Vec<Run>,
}

impl Dataset {
    pub fn new(runs: Vec<Run>) -> Self {
        Self { runs }
    }

    pub fn observation_count(&self, domains: &[Domain]) -> usize {
        self.runs
            .iter()
            .flat_map(|r| domains.iter().filter_map(|d| r.series(*d)))
            .map(LossSeries::len)
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs.is_empty() {
            return Err(Error::Data("dataset has no runs".into()));
        }
        for (i, run) in self.runs.iter().enumerate() {
            run.context(Domain::Pt).validate()?;
            for domain in [Domain::Pt, Domain::Cpt] {
                let Some(series) = run.series(domain) else {
                    continue;
                };
                if series.steps.len() != series.values.len() {
                    return Err(Error::Data(format!("run {i}: ragged {domain} series")));
                }
                for (step, loss) in series.iter() {
                    if step == 0 || step > run.schedule.len() {
                        return Err(Error::Data(format!(
                            "run {i}: {domain} observation at step {step} is outside the schedule (1..={})",
                            run.schedule.len()
                        )));
                    }
                    if !(loss > 0.0 && loss.is_finite()) {
                        return Err(Error::Data(format!(
                            "run {i}: {domain} loss at step {step} is {loss}; losses must be positive"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    #[default]
    NumericCentral,
    Analytic,
}

/// Which observations the fitted parameter set has to explain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitTarget {
    #[default]
    Pt,
    Cpt,
    /// One parameter set for both domains.
    Joint,
}

impl FitTarget {
    pub fn domains(&self) -> &'static [Domain] {
        match self {
            FitTarget::Pt => &[Domain::Pt],
            FitTarget::Cpt => &[Domain::Cpt],
            FitTarget::Joint => &[Domain::Pt, Domain::Cpt],
        }
    }
}

/// Sign constraint on the shift amplitude `B`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftSign {
    /// Positive for a PT-domain fit, negative for a CPT-domain fit, free
    /// for a joint fit.
    #[default]
    Auto,
    Positive,
    Negative,
    Free,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub huber_delta: f64,
    pub n_starts: usize,
    pub max_iterations: usize,
    pub seed: u64,
    /// Treat the PT forward area as unknown and fit it.
    pub free_s1_pt: bool,
    /// Log-uniform initialization range for the fitted PT forward area.
    pub s1_pt_range: (f64, f64),
    pub variant: Variant,
    pub replay: bool,
    pub model_size: bool,
    pub gradient: GradientMode,
    pub target: FitTarget,
    pub shift_sign: ShiftSign,
    pub lambda: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            huber_delta: 1e-3,
            n_starts: 64,
            max_iterations: 2000,
            seed: 0,
            free_s1_pt: false,
            s1_pt_range: (0.1, 100.0),
            variant: Variant::Base,
            replay: false,
            model_size: false,
            gradient: GradientMode::NumericCentral,
            target: FitTarget::Pt,
            shift_sign: ShiftSign::Auto,
            lambda: DEFAULT_LAMBDA,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.huber_delta > 0.0 && self.huber_delta.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "huber_delta must be positive, got {}",
                self.huber_delta
            )));
        }
        if self.n_starts == 0 {
            return Err(Error::InvalidArgument("n_starts must be at least 1".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidArgument("max_iterations must be at least 1".into()));
        }
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "lambda must lie in (0, 1), got {}",
                self.lambda
            )));
        }
        let (lo, hi) = self.s1_pt_range;
        if self.free_s1_pt && !(lo > 0.0 && hi >= lo) {
            return Err(Error::InvalidArgument(format!(
                "invalid s1_pt_range ({lo}, {hi})"
            )));
        }
        Ok(())
    }

    fn shift_sign(&self) -> ShiftSign {
        match (self.shift_sign, self.target) {
            (ShiftSign::Auto, FitTarget::Pt) => ShiftSign::Positive,
            (ShiftSign::Auto, FitTarget::Cpt) => ShiftSign::Negative,
            (ShiftSign::Auto, FitTarget::Joint) => ShiftSign::Free,
            (explicit, _) => explicit,
        }
    }
}

pub fn huber(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        0.5 * r * r
    } else {
        delta * (a - 0.5 * delta)
    }
}

fn huber_derivative(r: f64, delta: f64) -> f64 {
    if r.abs() <= delta {
        r
    } else {
        delta * r.signum()
    }
}

// ---------------------------------------------------------------------------
// parameter layout

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    L0,
    A,
    Alpha,
    C1,
    C2,
    B,
    E,
    Beta,
    Zeta1,
    Zeta2,
    A1,
    A2,
    Gamma1,
    Gamma2,
    Gamma3,
    F,
    S1Pt,
}

const SLOT_COUNT: usize = 17;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Transform {
    Log,
    NegLog,
    Identity,
}

impl Transform {
    fn decode(&self, theta: f64) -> f64 {
        match self {
            Transform::Log => theta.exp(),
            Transform::NegLog => -theta.exp(),
            Transform::Identity => theta,
        }
    }

    /// d(natural) / d(theta)
    fn jacobian(&self, natural: f64) -> f64 {
        match self {
            Transform::Log | Transform::NegLog => natural,
            Transform::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Coord {
    slot: Slot,
    transform: Transform,
    /// Initialization range of the natural value (magnitude for NegLog).
    lo: f64,
    hi: f64,
}

impl Coord {
    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        let u: f64 = rng.gen();
        match self.transform {
            Transform::Log | Transform::NegLog => {
                self.lo.ln() + u * (self.hi.ln() - self.lo.ln())
            }
            Transform::Identity => self.lo + u * (self.hi - self.lo),
        }
    }
}

#[derive(Debug, Clone)]
struct Layout {
    coords: Vec<Coord>,
    variant: Variant,
    replay: bool,
    model_size: bool,
}

impl Layout {
    fn new(config: &FitConfig) -> Self {
        let log = |slot, lo, hi| Coord {
            slot,
            transform: Transform::Log,
            lo,
            hi,
        };
        let ident = |slot, lo, hi| Coord {
            slot,
            transform: Transform::Identity,
            lo,
            hi,
        };
        let mut coords = vec![
            log(Slot::L0, 1.0, 5.0),
            log(Slot::A, 0.1, 2.0),
            log(Slot::Alpha, 0.1, 1.0),
            log(Slot::C1, 0.01, 1.0),
            log(Slot::C2, 0.01, 1.0),
            match config.shift_sign() {
                ShiftSign::Negative => Coord {
                    slot: Slot::B,
                    transform: Transform::NegLog,
                    lo: 0.01,
                    hi: 1.0,
                },
                ShiftSign::Free => ident(Slot::B, -1.0, 1.0),
                _ => log(Slot::B, 0.01, 1.0),
            },
            log(Slot::E, 1.0, 1000.0),
            log(Slot::Beta, 0.1, 2.0),
        ];
        if let Variant::S2Power { .. } = config.variant {
            coords.push(log(Slot::Zeta1, 0.5, 1.5));
            coords.push(log(Slot::Zeta2, 0.5, 1.5));
        }
        if config.replay {
            coords.push(ident(Slot::A1, -1.0, 1.0));
            coords.push(ident(Slot::A2, 0.1, 10.0));
        }
        if config.model_size {
            coords.push(ident(Slot::Gamma1, -0.3, 0.3));
            coords.push(ident(Slot::Gamma2, -0.3, 0.3));
            coords.push(log(Slot::Gamma3, 0.05, 0.5));
            coords.push(log(Slot::F, 0.1, 10.0));
        }
        if config.free_s1_pt {
            let (lo, hi) = config.s1_pt_range;
            coords.push(log(Slot::S1Pt, lo, hi));
        }
        Self {
            coords,
            variant: config.variant,
            replay: config.replay,
            model_size: config.model_size,
        }
    }

    fn dim(&self) -> usize {
        self.coords.len()
    }

    fn naturals(&self, theta: &[f64]) -> [f64; SLOT_COUNT] {
        let mut v = [0.0; SLOT_COUNT];
        for (c, t) in self.coords.iter().zip(theta) {
            v[c.slot as usize] = c.transform.decode(*t);
        }
        v
    }

    fn decode(&self, theta: &[f64]) -> (LawParams, Option<f64>) {
        let v = self.naturals(theta);
        let get = |s: Slot| v[s as usize];
        let variant = match self.variant {
            Variant::S2Power { .. } => Variant::S2Power {
                zeta1: get(Slot::Zeta1),
                zeta2: get(Slot::Zeta2),
            },
            other => other,
        };
        let params = LawParams {
            l0: get(Slot::L0),
            a: get(Slot::A),
            alpha: get(Slot::Alpha),
            c1: get(Slot::C1),
            c2: get(Slot::C2),
            b: get(Slot::B),
            e: get(Slot::E),
            beta: get(Slot::Beta),
            variant,
            replay: self.replay.then(|| ReplayParams {
                a1: get(Slot::A1),
                a2: get(Slot::A2),
            }),
            model_size: self.model_size.then(|| ModelSizeParams {
                gamma1: get(Slot::Gamma1),
                gamma2: get(Slot::Gamma2),
                gamma3: get(Slot::Gamma3),
                f: get(Slot::F),
            }),
        };
        let s1_pt = self
            .coords
            .iter()
            .any(|c| c.slot == Slot::S1Pt)
            .then(|| get(Slot::S1Pt));
        (params, s1_pt)
    }

    #[cfg(test)]
    fn encode(&self, params: &LawParams, s1_pt: Option<f64>) -> Vec<f64> {
        let mut v = [0.0; SLOT_COUNT];
        v[Slot::L0 as usize] = params.l0;
        v[Slot::A as usize] = params.a;
        v[Slot::Alpha as usize] = params.alpha;
        v[Slot::C1 as usize] = params.c1;
        v[Slot::C2 as usize] = params.c2;
        v[Slot::B as usize] = params.b;
        v[Slot::E as usize] = params.e;
        v[Slot::Beta as usize] = params.beta;
        if let Variant::S2Power { zeta1, zeta2 } = params.variant {
            v[Slot::Zeta1 as usize] = zeta1;
            v[Slot::Zeta2 as usize] = zeta2;
        }
        if let Some(r) = params.replay {
            v[Slot::A1 as usize] = r.a1;
            v[Slot::A2 as usize] = r.a2;
        }
        if let Some(m) = params.model_size {
            v[Slot::Gamma1 as usize] = m.gamma1;
            v[Slot::Gamma2 as usize] = m.gamma2;
            v[Slot::Gamma3 as usize] = m.gamma3;
            v[Slot::F as usize] = m.f;
        }
        v[Slot::S1Pt as usize] = s1_pt.unwrap_or(1.0);
        self.coords
            .iter()
            .map(|c| {
                let x = v[c.slot as usize];
                match c.transform {
                    Transform::Log => x.ln(),
                    Transform::NegLog => (-x).ln(),
                    Transform::Identity => x,
                }
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// prepared observations

#[derive(Debug, Clone, Copy)]
struct Obs {
    point: AreaPoint,
    ctx: EvalContext,
    log_obs: f64,
    obs: f64,
}

/// Flattens the dataset into per-observation area points.
fn prepare(
    dataset: &Dataset,
    domains: &[Domain],
    variant: Variant,
    lambda: f64,
    free_s1_pt: bool,
) -> Result<Vec<Obs>> {
    let probe = LawParams {
        variant,
        ..LawParams::default()
    };
    let opts = probe.area_options(lambda);
    let mut out = Vec::new();
    for (i, run) in dataset.runs.iter().enumerate() {
        if domains.iter().all(|d| run.series(*d).is_none()) {
            continue;
        }
        let trace = compute_areas_with(&run.schedule, &opts)?;
        let split = split_areas(&trace)?;
        for &domain in domains {
            let Some(series) = run.series(domain) else {
                continue;
            };
            let ctx = run.context(domain);
            for (step, loss) in series.iter() {
                if free_s1_pt && step <= run.schedule.boundary() {
                    return Err(Error::Data(format!(
                        "run {i}: step {step} lies in the PT phase, but the PT forward area is being fitted"
                    )));
                }
                out.push(Obs {
                    point: split.point_at(&trace, step),
                    ctx,
                    log_obs: loss.ln(),
                    obs: loss,
                });
            }
        }
    }
    Ok(out)
}

/// Loss and its partial derivatives with respect to every natural slot.
fn loss_and_partials(
    p: &[f64; SLOT_COUNT],
    layout: &Layout,
    point: &AreaPoint,
    ctx: &EvalContext,
    d: &mut [f64; SLOT_COUNT],
) -> f64 {
    let get = |s: Slot| p[s as usize];
    let s1_pt = if layout.coords.iter().any(|c| c.slot == Slot::S1Pt) {
        get(Slot::S1Pt)
    } else {
        point.s1_pt
    };
    let total = s1_pt + point.s1_cpt;
    if !(total >= MIN_FORWARD_AREA) {
        return f64::NAN;
    }
    let (l0, a, alpha, c1, c2, b, e, beta) = (
        get(Slot::L0),
        get(Slot::A),
        get(Slot::Alpha),
        get(Slot::C1),
        get(Slot::C2),
        get(Slot::B),
        get(Slot::E),
        get(Slot::Beta),
    );
    let ln_s = total.ln();
    let power = (-alpha * ln_s).exp();
    let base = a * power;

    let s2_power = matches!(layout.variant, Variant::S2Power { .. });
    let (u_pt, u_cpt) = if s2_power {
        (
            signed_pow(point.s2_pt, get(Slot::Zeta1)),
            signed_pow(point.s2_cpt, get(Slot::Zeta2)),
        )
    } else {
        (point.s2_pt, point.s2_cpt)
    };

    let (mut k_cpt, mut rho, mut drho_da2, mut r_own) = (1.0, 1.0, 0.0, 0.0);
    if layout.replay {
        let (a1, a2) = (get(Slot::A1), get(Slot::A2));
        r_own = match ctx.domain {
            Domain::Pt => ctx.r_pt(),
            Domain::Cpt => ctx.r_cpt,
        };
        k_cpt = (a1 * r_own).exp();
        match ctx.domain {
            Domain::Pt => {
                rho = -(-a2 * ctx.r_cpt).exp_m1();
                drho_da2 = ctx.r_cpt * (-a2 * ctx.r_cpt).exp();
            }
            Domain::Cpt => {
                rho = (a2 * ctx.r_cpt).exp_m1();
                drho_da2 = ctx.r_cpt * (a2 * ctx.r_cpt).exp();
            }
        }
    }

    let (mut n_pt, mut n_cpt, mut size, ln_n) = (1.0, 1.0, 0.0, ctx.n.ln());
    if layout.model_size {
        n_pt = ctx.n.powf(get(Slot::Gamma1));
        n_cpt = ctx.n.powf(get(Slot::Gamma2));
        size = get(Slot::F) * ctx.n.powf(-get(Slot::Gamma3));
    }

    let anneal_pt = c1 * u_pt * n_pt;
    let anneal_cpt = c2 * u_cpt * k_cpt * n_cpt;

    let z = (e * point.s1_cpt).ln_1p();
    let q = (-beta * z).exp();
    let g = -(-beta * z).exp_m1();
    let shift = b * g * rho;

    let loss = l0 + base - anneal_pt - anneal_cpt + shift + size;

    d[Slot::L0 as usize] = 1.0;
    d[Slot::A as usize] = power;
    d[Slot::Alpha as usize] = -base * ln_s;
    d[Slot::C1 as usize] = -u_pt * n_pt;
    d[Slot::C2 as usize] = -u_cpt * k_cpt * n_cpt;
    d[Slot::B as usize] = g * rho;
    d[Slot::E as usize] = b * rho * beta * q * point.s1_cpt / (1.0 + e * point.s1_cpt);
    d[Slot::Beta as usize] = b * rho * q * z;
    let log_abs = |s: f64| if s == 0.0 { 0.0 } else { s.abs().ln() };
    d[Slot::Zeta1 as usize] = -c1 * n_pt * u_pt * log_abs(point.s2_pt);
    d[Slot::Zeta2 as usize] = -c2 * k_cpt * n_cpt * u_cpt * log_abs(point.s2_cpt);
    d[Slot::A1 as usize] = -anneal_cpt * r_own;
    d[Slot::A2 as usize] = b * g * drho_da2;
    d[Slot::Gamma1 as usize] = -anneal_pt * ln_n;
    d[Slot::Gamma2 as usize] = -anneal_cpt * ln_n;
    d[Slot::Gamma3 as usize] = -size * ln_n;
    d[Slot::F as usize] = if layout.model_size {
        ctx.n.powf(-get(Slot::Gamma3))
    } else {
        0.0
    };
    d[Slot::S1Pt as usize] = -alpha * base / total;
    loss
}

struct Problem<'a> {
    layout: &'a Layout,
    obs: &'a [Obs],
    delta: f64,
}

impl Problem<'_> {
    fn value(&self, theta: &[f64]) -> f64 {
        let (params, s1_pt) = self.layout.decode(theta);
        let mut acc = 0.0;
        for o in self.obs {
            let mut point = o.point;
            if let Some(s) = s1_pt {
                point.s1_pt = s;
            }
            let pred = match params.loss(&point, &o.ctx) {
                Ok(v) if v > 0.0 && v.is_finite() => v,
                _ => return f64::INFINITY,
            };
            acc += huber(pred.ln() - o.log_obs, self.delta);
        }
        acc / self.obs.len() as f64
    }

    fn value_and_gradient(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let naturals = self.layout.naturals(theta);
        let mut d = [0.0; SLOT_COUNT];
        let mut acc = 0.0;
        let mut slot_grad = [0.0; SLOT_COUNT];
        for o in self.obs {
            let pred = loss_and_partials(&naturals, self.layout, &o.point, &o.ctx, &mut d);
            if !(pred > 0.0 && pred.is_finite()) {
                grad.iter_mut().for_each(|g| *g = 0.0);
                return f64::INFINITY;
            }
            let r = pred.ln() - o.log_obs;
            acc += huber(r, self.delta);
            let w = huber_derivative(r, self.delta) / pred;
            for (sg, di) in slot_grad.iter_mut().zip(&d) {
                *sg += w * di;
            }
        }
        let n = self.obs.len() as f64;
        for (g, c) in grad.iter_mut().zip(&self.layout.coords) {
            let natural = naturals[c.slot as usize];
            *g = slot_grad[c.slot as usize] * c.transform.jacobian(natural) / n;
        }
        acc / n
    }
}

// ---------------------------------------------------------------------------
// public API

/// Options for [`huber_objective_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveSpec {
    pub delta: f64,
    pub lambda: f64,
    pub target: FitTarget,
    /// Fitted PT forward area, replacing the schedule's.
    pub s1_pt: Option<f64>,
}

impl ObjectiveSpec {
    pub fn new(delta: f64) -> Self {
        Self {
            delta,
            lambda: DEFAULT_LAMBDA,
            target: FitTarget::Joint,
            s1_pt: None,
        }
    }
}

/// Mean Huber penalty of log-loss residuals over every observation in the
/// dataset (both domains), with `lambda = 0.999`.
pub fn huber_objective(params: &LawParams, dataset: &Dataset, delta: f64) -> Result<f64> {
    huber_objective_with(params, dataset, &ObjectiveSpec::new(delta))
}

pub fn huber_objective_with(
    params: &LawParams,
    dataset: &Dataset,
    spec: &ObjectiveSpec,
) -> Result<f64> {
    dataset.validate()?;
    if !(spec.delta > 0.0) {
        return Err(Error::InvalidArgument("Huber delta must be positive".into()));
    }
    let obs = prepare(
        dataset,
        spec.target.domains(),
        params.variant,
        spec.lambda,
        spec.s1_pt.is_some(),
    )?;
    if obs.is_empty() {
        return Err(Error::Data("no observations for the requested domains".into()));
    }
    let mut acc = 0.0;
    for o in &obs {
        let mut point = o.point;
        if let Some(s) = spec.s1_pt {
            point.s1_pt = s;
        }
        let pred = params.loss(&point, &o.ctx)?;
        if !(pred > 0.0) {
            return Err(Error::Numerical(format!(
                "predicted loss {pred} is not positive; log residual undefined"
            )));
        }
        acc += huber(pred.ln() - o.log_obs, spec.delta);
    }
    Ok(acc / obs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Goodness {
    pub huber: f64,
    pub r_squared: f64,
    pub observations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartRecord {
    pub index: usize,
    /// `None` when the start ended on a non-finite objective.
    pub objective: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: LawParams,
    pub objective: f64,
    pub r_squared: BTreeMap<Domain, f64>,
    pub huber_per_domain: BTreeMap<Domain, f64>,
    pub start_index: usize,
    pub converged: bool,
    pub fitted_s1_pt: Option<f64>,
    pub target: FitTarget,
    pub huber_delta: f64,
    pub lambda: f64,
    pub starts: Vec<StartRecord>,
}

impl FitResult {
    pub fn objective_spec(&self) -> ObjectiveSpec {
        ObjectiveSpec {
            delta: self.huber_delta,
            lambda: self.lambda,
            target: self.target,
            s1_pt: self.fitted_s1_pt,
        }
    }
}

/// Huber value (log space) and R^2 (raw losses) per domain.
pub fn goodness(result: &FitResult, dataset: &Dataset) -> Result<BTreeMap<Domain, Goodness>> {
    let mut out = BTreeMap::new();
    for &domain in result.target.domains() {
        if dataset.observation_count(&[domain]) == 0 {
            continue;
        }
        let obs = prepare(
            dataset,
            &[domain],
            result.params.variant,
            result.lambda,
            result.fitted_s1_pt.is_some(),
        )?;
        if obs.len() < 2 {
            return Err(Error::Data(format!(
                "R^2 needs at least 2 {domain} observations, found {}",
                obs.len()
            )));
        }
        let mut preds = Vec::with_capacity(obs.len());
        for o in &obs {
            let mut point = o.point;
            if let Some(s) = result.fitted_s1_pt {
                point.s1_pt = s;
            }
            preds.push(result.params.loss(&point, &o.ctx)?);
        }
        let observed: Vec<f64> = obs.iter().map(|o| o.obs).collect();
        let huber_value = obs
            .iter()
            .zip(&preds)
            .map(|(o, p)| huber(p.ln() - o.log_obs, result.huber_delta))
            .sum::<f64>()
            / obs.len() as f64;
        out.insert(
            domain,
            Goodness {
                huber: huber_value,
                r_squared: r_squared(&observed, &preds)?,
                observations: obs.len(),
            },
        );
    }
    Ok(out)
}

/// `1 - SS_res / SS_tot` on raw values.
pub fn r_squared(observed: &[f64], predicted: &[f64]) -> Result<f64> {
    if observed.len() < 2 || observed.len() != predicted.len() {
        return Err(Error::Data(
            "R^2 needs at least 2 paired observations".into(),
        ));
    }
    let mean = observed.iter().sum::<f64>() / observed.len() as f64;
    let ss_tot: f64 = observed.iter().map(|y| (y - mean).powi(2)).sum();
    let ss_res: f64 = observed
        .iter()
        .zip(predicted)
        .map(|(y, p)| (y - p).powi(2))
        .sum();
    if ss_tot == 0.0 {
        return Err(Error::Data("R^2 is undefined for constant observations".into()));
    }
    Ok(1.0 - ss_res / ss_tot)
}

/// Per-start stream of the multi-start generator.
fn start_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

pub fn fit(dataset: &Dataset, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    dataset.validate()?;
    let domains = config.target.domains();
    let layout = Layout::new(config);
    let obs = prepare(
        dataset,
        domains,
        config.variant,
        config.lambda,
        config.free_s1_pt,
    )?;
    if obs.len() < layout.dim() {
        return Err(Error::Data(format!(
            "{} observations cannot determine {} parameters",
            obs.len(),
            layout.dim()
        )));
    }
    if obs.len() < 8 * layout.dim() {
        warn!(
            "only {} observations for {} parameters; the fit may be poorly determined",
            obs.len(),
            layout.dim()
        );
    }

    let problem = Problem {
        layout: &layout,
        obs: &obs,
        delta: config.huber_delta,
    };
    let lbfgs = LbfgsOptions {
        max_iterations: config.max_iterations,
        ..LbfgsOptions::default()
    };

    let runs: Vec<(Vec<f64>, f64, usize, bool)> = (0..config.n_starts)
        .into_par_iter()
        .map(|index| {
            let mut rng = start_rng(config.seed, index);
            let theta0: Vec<f64> = layout.coords.iter().map(|c| c.sample(&mut rng)).collect();
            let m = match config.gradient {
                GradientMode::Analytic => minimize(
                    |x: &[f64], g: &mut [f64]| problem.value_and_gradient(x, g),
                    &theta0,
                    &lbfgs,
                ),
                GradientMode::NumericCentral => minimize(
                    |x: &[f64], g: &mut [f64]| {
                        central_gradient(|y| problem.value(y), x, g);
                        problem.value(x)
                    },
                    &theta0,
                    &lbfgs,
                ),
            };
            let converged = m.converged();
            // Score through the plain evaluation path so that every start is
            // ranked on the same numbers a later re-evaluation produces.
            let f = problem.value(&m.x);
            (m.x, f, m.iterations, converged)
        })
        .collect();

    let starts: Vec<StartRecord> = runs
        .iter()
        .enumerate()
        .map(|(index, (_, f, iterations, converged))| StartRecord {
            index,
            objective: f.is_finite().then_some(*f),
            iterations: *iterations,
            converged: *converged,
        })
        .collect();

    let best = runs
        .iter()
        .enumerate()
        .filter(|(_, r)| r.1.is_finite())
        .min_by(|(i, a), (j, b)| a.1.total_cmp(&b.1).then(i.cmp(j)))
        .map(|(i, _)| i)
        .ok_or_else(|| Error::Numerical("every start produced a non-finite objective".into()))?;

    let (theta, _, _, converged) = &runs[best];
    let (params, fitted_s1_pt) = layout.decode(theta);
    let objective = runs[best].1;

    let mut result = FitResult {
        params,
        objective,
        r_squared: BTreeMap::new(),
        huber_per_domain: BTreeMap::new(),
        start_index: best,
        converged: *converged,
        fitted_s1_pt,
        target: config.target,
        huber_delta: config.huber_delta,
        lambda: config.lambda,
        starts,
    };
    for (domain, g) in goodness(&result, dataset)? {
        result.r_squared.insert(domain, g.r_squared);
        result.huber_per_domain.insert(domain, g.huber);
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::law::ModelSizeParams;
    use crate::schedule::{build_schedule, concat_pt_cpt, PhaseSpec};

    #[test]
    fn huber_branches() {
        assert_eq!(huber(0.0, 1e-3), 0.0);
        assert!((huber(1e-3, 1e-3) - 0.5e-6).abs() < 1e-20);
        // knee continuity
        let eps = 1e-12;
        assert!((huber(1e-3 + eps, 1e-3) - huber(1e-3 - eps, 1e-3)).abs() < 1e-14);
        assert!((huber(-0.01, 1e-3) - 1e-3 * (0.01 - 5e-4)).abs() < 1e-18);
    }

    #[test]
    fn two_point_huber_mean() {
        // independent scalar evaluation of both branches
        let quad = 0.5 * 0.001f64 * 0.001;
        let lin = 1e-3 * (0.01 - 0.5e-3);
        let want = (quad + lin) / 2.0;
        assert!((want - 5e-6).abs() < 1e-18);
        let got = (huber(0.001, 1e-3) + huber(0.01, 1e-3)) / 2.0;
        assert!((got - want).abs() < 1e-18);
    }

    fn toy_dataset(params: &LawParams) -> Dataset {
        let pt = Schedule::constant(200, 3e-4).unwrap();
        let cpt = build_schedule(&[PhaseSpec::cosine(100, 3e-4, 0.0)]).unwrap();
        let schedule = concat_pt_cpt(&pt, &cpt);
        let curve = crate::law::predict_curve(params, &schedule, 0.999, &EvalContext::new(Domain::Pt))
            .unwrap();
        Dataset::new(vec![Run {
            pt: Some(curve),
            ..Run::new(schedule)
        }])
    }

    #[test]
    fn exact_params_give_zero_objective() {
        let p = LawParams::default();
        let ds = toy_dataset(&p);
        assert_eq!(huber_objective(&p, &ds, 1e-3).unwrap(), 0.0);
    }

    #[test]
    fn objective_rejects_nonpositive_observations() {
        let p = LawParams::default();
        let mut ds = toy_dataset(&p);
        ds.runs[0].pt.as_mut().unwrap().values[3] = 0.0;
        assert!(matches!(huber_objective(&p, &ds, 1e-3), Err(Error::Data(_))));
    }

    #[test]
    fn observation_outside_schedule_rejected() {
        let p = LawParams::default();
        let mut ds = toy_dataset(&p);
        ds.runs[0].pt.as_mut().unwrap().steps[0] = 10_000;
        assert!(ds.validate().is_err());
    }

    #[test]
    fn r_squared_reference_points() {
        let y = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(r_squared(&y, &y).unwrap(), 1.0);
        assert_eq!(r_squared(&y, &[2.5; 4]).unwrap(), 0.0);
        assert!(r_squared(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn layout_round_trips_params() {
        let config = FitConfig {
            variant: Variant::S2Power {
                zeta1: 1.0,
                zeta2: 1.0,
            },
            replay: true,
            model_size: true,
            free_s1_pt: true,
            target: FitTarget::Cpt,
            ..FitConfig::default()
        };
        let layout = Layout::new(&config);
        let params = LawParams {
            b: -0.4,
            variant: Variant::S2Power {
                zeta1: 0.9,
                zeta2: 1.1,
            },
            replay: Some(ReplayParams { a1: 0.05, a2: 3.0 }),
            model_size: Some(ModelSizeParams {
                gamma1: 0.1,
                gamma2: -0.1,
                gamma3: 0.3,
                f: 2.0,
            }),
            ..LawParams::default()
        };
        let theta = layout.encode(&params, Some(7.5));
        let (back, s1) = layout.decode(&theta);
        assert!((back.b + 0.4).abs() < 1e-15);
        assert!((s1.unwrap() - 7.5).abs() < 1e-14);
        assert!((back.e - params.e).abs() < 1e-12);
    }

    fn gradient_problem(config: &FitConfig, truth: &LawParams) -> (Layout, Vec<Obs>) {
        let pt = build_schedule(&[PhaseSpec::linear(50, 1e-5, 3e-4), PhaseSpec::cosine(250, 3e-4, 3e-5)])
            .unwrap();
        let cpt = build_schedule(&[PhaseSpec::linear(30, 3e-5, 2e-4), PhaseSpec::cosine(150, 2e-4, 0.0)])
            .unwrap();
        let schedule = concat_pt_cpt(&pt, &cpt);
        let mut runs = Vec::new();
        for r_cpt in [1.0, 0.6] {
            let domain = match config.target {
                FitTarget::Cpt => Domain::Cpt,
                _ => Domain::Pt,
            };
            let ctx = EvalContext::new(domain).with_r_cpt(r_cpt).with_n(3e8);
            let curve = crate::law::predict_curve(truth, &schedule, 0.999, &ctx).unwrap();
            let noisy: Vec<f64> = curve
                .values
                .iter()
                .enumerate()
                .map(|(i, v)| v * (1.0 + 0.01 * ((i as f64) * 0.7).sin()))
                .collect();
            let series = LossSeries::new(curve.steps.clone(), noisy).unwrap();
            let mut run = Run::new(schedule.clone());
            run.r_cpt = r_cpt;
            run.n = Some(3e8);
            match domain {
                Domain::Pt => run.pt = Some(series),
                Domain::Cpt => run.cpt = Some(series),
            }
            runs.push(run);
        }
        let ds = Dataset::new(runs);
        let layout = Layout::new(config);
        let obs = prepare(&ds, config.target.domains(), config.variant, 0.999, config.free_s1_pt)
            .unwrap();
        (layout, obs)
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        let truth = LawParams {
            replay: Some(ReplayParams { a1: 0.05, a2: 2.0 }),
            model_size: Some(ModelSizeParams {
                gamma1: 0.05,
                gamma2: -0.02,
                gamma3: 0.2,
                f: 1.5,
            }),
            variant: Variant::S2Power {
                zeta1: 0.9,
                zeta2: 1.1,
            },
            ..LawParams::default()
        };
        let config = FitConfig {
            variant: truth.variant,
            replay: true,
            model_size: true,
            free_s1_pt: false,
            ..FitConfig::default()
        };
        let (layout, obs) = gradient_problem(&config, &truth);
        let problem = Problem {
            layout: &layout,
            obs: &obs,
            delta: 1e-3,
        };
        let mut rng = start_rng(42, 0);
        let mut checked = 0;
        for _ in 0..100 {
            let theta: Vec<f64> = layout
                .coords
                .iter()
                .zip(layout.encode(&truth, None))
                .map(|(_, t)| t + rng.gen_range(-0.2..0.2))
                .collect();
            let mut ga = vec![0.0; theta.len()];
            let f = problem.value_and_gradient(&theta, &mut ga);
            if !f.is_finite() {
                continue;
            }
            let mut gn = vec![0.0; theta.len()];
            central_gradient(|y| problem.value(y), &theta, &mut gn);
            let scale = gn.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for (a, n) in ga.iter().zip(&gn) {
                assert!(
                    (a - n).abs() <= 1e-4 * scale.max(1e-300),
                    "analytic {a} vs numeric {n}"
                );
            }
            assert!((f - problem.value(&theta)).abs() <= 1e-12 * f.abs().max(1e-300));
            checked += 1;
        }
        assert!(checked >= 90);
    }

    #[test]
    fn analytic_gradient_with_free_s1_pt_and_negative_b() {
        let truth = LawParams {
            b: -0.3,
            ..LawParams::default()
        };
        let config = FitConfig {
            target: FitTarget::Cpt,
            free_s1_pt: false,
            ..FitConfig::default()
        };
        let (_, obs) = gradient_problem(&config, &truth);
        let config = FitConfig {
            free_s1_pt: true,
            ..config
        };
        let layout = Layout::new(&config);
        let obs: Vec<Obs> = obs.into_iter().filter(|o| o.point.s1_cpt > 0.0).collect();
        let problem = Problem {
            layout: &layout,
            obs: &obs,
            delta: 1e-3,
        };
        let theta = layout.encode(&truth, Some(0.05));
        let mut ga = vec![0.0; theta.len()];
        problem.value_and_gradient(&theta, &mut ga);
        let mut gn = vec![0.0; theta.len()];
        central_gradient(|y| problem.value(y), &theta, &mut gn);
        let scale = gn.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, n) in ga.iter().zip(&gn) {
            assert!((a - n).abs() <= 1e-4 * scale, "{a} vs {n}");
        }
    }

    #[test]
    fn config_validation() {
        assert!(FitConfig::default().validate().is_ok());
        assert!(FitConfig {
            huber_delta: 0.0,
            ..FitConfig::default()
        }
        .validate()
        .is_err());
        assert!(FitConfig {
            n_starts: 0,
            ..FitConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn too_few_observations() {
        let p = LawParams::default();
        let mut ds = toy_dataset(&p);
        let s = ds.runs[0].pt.as_mut().unwrap();
        s.steps.truncate(3);
        s.values.truncate(3);
        let err = fit(&ds, &FitConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn fit_recovers_toy_curve() {
        let truth = LawParams::default();
        let ds = toy_dataset(&truth);
        let config = FitConfig {
            n_starts: 8,
            gradient: GradientMode::Analytic,
            ..FitConfig::default()
        };
        let result = fit(&ds, &config).unwrap();
        let again = huber_objective_with(&result.params, &ds, &result.objective_spec()).unwrap();
        assert!((again - result.objective).abs() <= 1e-10 * result.objective.max(1e-300));
        assert!(result
            .starts
            .iter()
            .all(|s| s.objective.map_or(true, |f| result.objective <= f)));
        let series = ds.runs[0].pt.as_ref().unwrap();
        let pred = crate::law::predict_curve(
            &result.params,
            &ds.runs[0].schedule,
            0.999,
            &EvalContext::new(Domain::Pt),
        )
        .unwrap();
        for (a, b) in pred.values.iter().zip(&series.values) {
            assert!((a - b).abs() < 1e-4);
        }
    }
}
