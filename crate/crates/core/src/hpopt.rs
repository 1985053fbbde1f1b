//! Hyper-parameter search over fitted laws.
//!
//! The balance objective weighs the change of the PT-domain loss against the
//! change of the CPT-domain loss over the CPT phase:
//! `lambda1 * dL_pt + lambda2 * dL_cpt`. Both deltas are signed
//! (end minus start), so improvement on the CPT domain lowers the objective.
//! One knob of a parametrized schedule family is searched at a time.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::areas::{final_point, AreaOptions, AreaPoint, DEFAULT_LAMBDA};
use crate::error::{Error, Result};
use crate::law::{Domain, EvalContext, LawParams};
use crate::schedule::{build_schedule, concat_pt_cpt, wsd_phases, PhaseKind, PhaseSpec, Schedule};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BalanceWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl BalanceWeights {
    /// `(lambda1, 1 - lambda1)`.
    pub fn new(lambda1: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda1) {
            return Err(Error::InvalidArgument(format!(
                "lambda1 must lie in [0, 1], got {lambda1}"
            )));
        }
        Ok(Self {
            lambda1,
            lambda2: 1.0 - lambda1,
        })
    }

    /// Arbitrary nonnegative weights without the sum-to-one check.
    pub fn unnormalized(lambda1: f64, lambda2: f64) -> Result<Self> {
        if !(lambda1 >= 0.0 && lambda2 >= 0.0 && lambda1.is_finite() && lambda2.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "weights must be finite and nonnegative, got ({lambda1}, {lambda2})"
            )));
        }
        Ok(Self { lambda1, lambda2 })
    }

    pub fn is_normalized(&self) -> bool {
        (self.lambda1 + self.lambda2 - 1.0).abs() <= 1e-12
    }
}

/// What a loss change is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaReference {
    /// The loss at the last PT step.
    #[default]
    CptStart,
    /// The loss at the last PT step run at the PT peak LR, before the PT
    /// decay. For WSD pre-training this is the end of the plateau, which
    /// does not move with the loss potential.
    PreAnneal,
    /// Zero: the "delta" is the final loss itself. Used when there is no PT
    /// phase to compare against.
    Absolute,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BalanceValue {
    pub objective: f64,
    pub delta_pt: f64,
    pub delta_cpt: f64,
}

fn domain_ctx(ctx: &EvalContext, domain: Domain) -> EvalContext {
    EvalContext { domain, ..*ctx }
}

/// Balance objective from the area points at the reference and at the end
/// of CPT.
pub fn balance_from_points(
    params_pt: &LawParams,
    params_cpt: &LawParams,
    weights: &BalanceWeights,
    start: &AreaPoint,
    end: &AreaPoint,
    ctx: &EvalContext,
    reference: DeltaReference,
) -> Result<BalanceValue> {
    let delta = |params: &LawParams, domain: Domain| -> Result<f64> {
        let c = domain_ctx(ctx, domain);
        let after = params.loss(end, &c)?;
        Ok(match reference {
            DeltaReference::Absolute => after,
            _ => after - params.loss(start, &c)?,
        })
    };
    let delta_pt = delta(params_pt, Domain::Pt)?;
    let delta_cpt = delta(params_cpt, Domain::Cpt)?;
    let objective = weights.lambda1 * delta_pt + weights.lambda2 * delta_cpt;
    Ok(BalanceValue {
        objective,
        delta_pt,
        delta_cpt,
    })
}

pub fn balance_objective(
    params_pt: &LawParams,
    params_cpt: &LawParams,
    weights: &BalanceWeights,
    schedule: &Schedule,
    ctx: &EvalContext,
) -> Result<BalanceValue> {
    balance_objective_with(
        params_pt,
        params_cpt,
        weights,
        schedule,
        ctx,
        DEFAULT_LAMBDA,
        DeltaReference::CptStart,
    )
}

pub fn balance_objective_with(
    params_pt: &LawParams,
    params_cpt: &LawParams,
    weights: &BalanceWeights,
    schedule: &Schedule,
    ctx: &EvalContext,
    lambda: f64,
    reference: DeltaReference,
) -> Result<BalanceValue> {
    ctx.validate()?;
    if schedule.cpt_len() == 0 {
        return Err(Error::InvalidArgument("schedule has no CPT steps".into()));
    }
    if reference != DeltaReference::Absolute && schedule.boundary() == 0 {
        return Err(Error::InvalidArgument(
            "schedule has no PT phase to measure the loss change from".into(),
        ));
    }
    let points = |params: &LawParams| -> Result<(AreaPoint, AreaPoint)> {
        let opts = params.area_options(lambda);
        let end = final_point(schedule, &opts)?;
        let start = match reference {
            DeltaReference::PreAnneal => {
                let pt = schedule.pt_etas();
                let peak = pt.iter().copied().fold(0.0, f64::max);
                let last = pt.iter().rposition(|e| *e == peak).unwrap_or(0) + 1;
                let prefix = Schedule::new(pt[..last].to_vec(), 0)?;
                let p = final_point(&prefix, &opts)?;
                AreaPoint {
                    s1_pt: p.s1_cpt,
                    s2_pt: p.s2_cpt,
                    s1_cpt: 0.0,
                    s2_cpt: 0.0,
                }
            }
            _ => AreaPoint {
                s1_cpt: 0.0,
                s2_cpt: 0.0,
                ..end
            },
        };
        Ok((start, end))
    };
    let at_pt = points(params_pt)?;
    let at_cpt = if params_cpt.variant == params_pt.variant {
        at_pt
    } else {
        points(params_cpt)?
    };
    let c = domain_ctx(ctx, Domain::Pt);
    let cc = domain_ctx(ctx, Domain::Cpt);
    let pick = |params: &LawParams, (start, end): (AreaPoint, AreaPoint), ctx: &EvalContext| -> Result<f64> {
        let after = params.loss(&end, ctx)?;
        Ok(match reference {
            DeltaReference::Absolute => after,
            _ => after - params.loss(&start, ctx)?,
        })
    };
    let delta_pt = pick(params_pt, at_pt, &c)?;
    let delta_cpt = pick(params_cpt, at_cpt, &cc)?;
    Ok(BalanceValue {
        objective: weights.lambda1 * delta_pt + weights.lambda2 * delta_cpt,
        delta_pt,
        delta_cpt,
    })
}

// ---------------------------------------------------------------------------
// schedule families

/// CPT schedule of a given length: linear warmup from `warmup_from` to
/// `peak_lr`, then cosine decay to zero. The warmup takes at most half the
/// steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CptFamily {
    pub peak_lr: f64,
    pub warmup: usize,
    pub warmup_from: f64,
}

impl CptFamily {
    pub fn phases(&self, steps: usize) -> Vec<PhaseSpec> {
        let w = self.warmup.min(steps / 2);
        let mut phases = Vec::with_capacity(2);
        if w > 0 {
            phases.push(PhaseSpec::linear(w, self.warmup_from, self.peak_lr));
        }
        phases.push(PhaseSpec::cosine(steps - w, self.peak_lr, 0.0));
        phases
    }

    pub fn build(&self, steps: usize) -> Result<Schedule> {
        if steps == 0 {
            return Err(Error::InvalidArgument("CPT length must be at least 1".into()));
        }
        build_schedule(&self.phases(steps))
    }
}

/// PT + CPT schedule family. PT is warmup-stable-decay, ending at
/// `loss_potential * peak_lr`; CPT re-warms to `cpt_peak_lr` (from the PT
/// final LR, or from zero) and then decays to zero with a cosine.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleTemplate {
    pub pt_steps: usize,
    pub pt_warmup: usize,
    pub pt_decay: usize,
    pub pt_decay_kind: PhaseKind,
    pub peak_lr: f64,
    pub loss_potential: f64,
    pub cpt_steps: usize,
    pub cpt_peak_lr: f64,
    pub cpt_warmup: usize,
    pub rewarm_from_zero: bool,
    pub r_cpt: f64,
    pub n: Option<f64>,
    /// No PT phase at all; both domains are trained from scratch.
    pub from_scratch: bool,
    pub lambda: f64,
    /// Ignored when `from_scratch` is set (the reference is then absolute).
    pub reference: DeltaReference,
}

impl Default for ScheduleTemplate {
    fn default() -> Self {
        Self {
            pt_steps: 40_000,
            pt_warmup: 500,
            pt_decay: 4_000,
            pt_decay_kind: PhaseKind::WsdDecay,
            peak_lr: 2e-4,
            loss_potential: 0.1,
            cpt_steps: 10_000,
            cpt_peak_lr: 2e-4,
            cpt_warmup: 500,
            rewarm_from_zero: false,
            r_cpt: 1.0,
            n: None,
            from_scratch: false,
            lambda: DEFAULT_LAMBDA,
            reference: DeltaReference::CptStart,
        }
    }
}

impl ScheduleTemplate {
    pub fn validate(&self) -> Result<()> {
        if !self.from_scratch && self.pt_warmup + self.pt_decay > self.pt_steps {
            return Err(Error::InvalidArgument(format!(
                "PT warmup ({}) plus decay ({}) exceed PT length ({})",
                self.pt_warmup, self.pt_decay, self.pt_steps
            )));
        }
        if !self.from_scratch && self.pt_steps == 0 {
            return Err(Error::InvalidArgument("PT length must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.loss_potential) {
            return Err(Error::InvalidArgument(format!(
                "loss potential must lie in [0, 1], got {}",
                self.loss_potential
            )));
        }
        if !(self.peak_lr > 0.0 && self.cpt_peak_lr >= 0.0) {
            return Err(Error::InvalidArgument("peak learning rates must be positive".into()));
        }
        if !matches!(
            self.pt_decay_kind,
            PhaseKind::Linear | PhaseKind::WsdDecay | PhaseKind::Cosine
        ) {
            return Err(Error::InvalidArgument(
                "PT decay must be linear or cosine".into(),
            ));
        }
        self.context(Domain::Pt).validate()
    }

    pub fn pt_final_lr(&self) -> f64 {
        self.loss_potential * self.peak_lr
    }

    pub fn cpt_family(&self) -> CptFamily {
        let warmup_from = if self.rewarm_from_zero || self.from_scratch {
            0.0
        } else {
            self.pt_final_lr()
        };
        CptFamily {
            peak_lr: self.cpt_peak_lr,
            warmup: self.cpt_warmup,
            warmup_from,
        }
    }

    pub fn pt_schedule(&self) -> Result<Schedule> {
        let stable = self.pt_steps - self.pt_warmup - self.pt_decay;
        build_schedule(&wsd_phases(
            self.pt_warmup,
            0.0,
            stable,
            self.pt_decay,
            self.peak_lr,
            self.pt_final_lr(),
            self.pt_decay_kind,
        ))
    }

    pub fn build(&self) -> Result<Schedule> {
        self.validate()?;
        let cpt = self.cpt_family().build(self.cpt_steps)?;
        if self.from_scratch {
            return Ok(cpt);
        }
        Ok(concat_pt_cpt(&self.pt_schedule()?, &cpt))
    }

    pub fn context(&self, domain: Domain) -> EvalContext {
        EvalContext {
            r_cpt: self.r_cpt,
            n: self.n.unwrap_or(1.0),
            domain,
        }
    }

    pub fn reference(&self) -> DeltaReference {
        if self.from_scratch {
            DeltaReference::Absolute
        } else {
            self.reference
        }
    }

    pub fn balance(
        &self,
        params_pt: &LawParams,
        params_cpt: &LawParams,
        weights: &BalanceWeights,
    ) -> Result<BalanceValue> {
        balance_objective_with(
            params_pt,
            params_cpt,
            weights,
            &self.build()?,
            &self.context(Domain::Pt),
            self.lambda,
            self.reference(),
        )
    }
}

// ---------------------------------------------------------------------------
// single-knob search

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Knob {
    LossPotential,
    PeakLr,
    /// Fraction of PT data replayed during CPT, `1 - r_cpt`.
    ReplayRatio,
    CptSteps,
}

impl Knob {
    pub fn is_integer(&self) -> bool {
        matches!(self, Knob::CptSteps)
    }

    pub fn apply(&self, template: &ScheduleTemplate, value: f64) -> ScheduleTemplate {
        let mut t = *template;
        match self {
            Knob::LossPotential => t.loss_potential = value,
            Knob::PeakLr => t.cpt_peak_lr = value,
            Knob::ReplayRatio => t.r_cpt = 1.0 - value,
            Knob::CptSteps => t.cpt_steps = value.round() as usize,
        }
        t
    }
}

impl std::str::FromStr for Knob {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loss_potential" => Ok(Knob::LossPotential),
            "peak_lr" => Ok(Knob::PeakLr),
            "replay_ratio" => Ok(Knob::ReplayRatio),
            "cpt_steps" => Ok(Knob::CptSteps),
            other => Err(Error::InvalidArgument(format!("unknown knob {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KnobSpace {
    pub knob: Knob,
    pub lo: f64,
    pub hi: f64,
    pub template: ScheduleTemplate,
    pub grid: usize,
    /// Integer knobs with at most this many values are scanned exhaustively.
    pub integer_cap: usize,
}

impl KnobSpace {
    pub fn new(knob: Knob, lo: f64, hi: f64, template: ScheduleTemplate) -> Self {
        Self {
            knob,
            lo,
            hi,
            template,
            grid: 256,
            integer_cap: 4096,
        }
    }

    /// The knob's natural range.
    pub fn default_for(knob: Knob, template: ScheduleTemplate) -> Self {
        let (lo, hi) = match knob {
            Knob::LossPotential | Knob::ReplayRatio => (0.0, 1.0),
            Knob::PeakLr => (template.peak_lr * 0.05, template.peak_lr * 2.0),
            Knob::CptSteps => (1.0, template.cpt_steps as f64),
        };
        Self::new(knob, lo, hi, template)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lo < self.hi) {
            return Err(Error::InvalidArgument(format!(
                "knob range [{}, {}] is empty",
                self.lo, self.hi
            )));
        }
        if matches!(self.knob, Knob::LossPotential | Knob::ReplayRatio)
            && !(self.lo >= 0.0 && self.hi <= 1.0)
        {
            return Err(Error::InvalidArgument(format!(
                "{:?} range must lie within [0, 1]",
                self.knob
            )));
        }
        if self.knob == Knob::PeakLr && self.lo < 0.0 {
            return Err(Error::InvalidArgument("peak LR range must be nonnegative".into()));
        }
        if self.knob == Knob::CptSteps && self.lo < 1.0 {
            return Err(Error::InvalidArgument("CPT length range must start at 1".into()));
        }
        if self.grid < 3 {
            return Err(Error::InvalidArgument("grid needs at least 3 points".into()));
        }
        self.template.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub knob: f64,
    pub objective: f64,
    pub delta_pt: f64,
    pub delta_cpt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimumReport {
    pub knob: Knob,
    pub knob_value: f64,
    pub objective: f64,
    pub delta_pt: f64,
    pub delta_cpt: f64,
    pub weights: BalanceWeights,
    pub curve: Vec<CurvePoint>,
}

struct Evaluator<'a> {
    space: &'a KnobSpace,
    weights: &'a BalanceWeights,
    params_pt: &'a LawParams,
    params_cpt: &'a LawParams,
}

impl Evaluator<'_> {
    fn at(&self, x: f64) -> Result<CurvePoint> {
        let t = self.space.knob.apply(&self.space.template, x);
        let b = t.balance(self.params_pt, self.params_cpt, self.weights)?;
        if !b.objective.is_finite() {
            return Err(Error::Numerical(format!(
                "objective is {} at {:?} = {x}",
                b.objective, self.space.knob
            )));
        }
        Ok(CurvePoint {
            knob: x,
            objective: b.objective,
            delta_pt: b.delta_pt,
            delta_cpt: b.delta_cpt,
        })
    }

    fn many(&self, xs: &[f64]) -> Result<Vec<CurvePoint>> {
        xs.par_iter().map(|&x| self.at(x)).collect()
    }
}

/// Index of the smallest objective, first index on ties.
fn argmin(points: &[CurvePoint]) -> usize {
    let mut best = 0;
    for (i, p) in points.iter().enumerate() {
        if p.objective < points[best].objective {
            best = i;
        }
    }
    best
}

const GOLDEN: f64 = 0.618_033_988_749_894_8;

/// Golden-section search for a minimum on `[a, b]`.
fn golden_section(eval: &Evaluator, mut a: f64, mut b: f64, tol: f64) -> Result<CurvePoint> {
    let mut c = b - GOLDEN * (b - a);
    let mut d = a + GOLDEN * (b - a);
    let mut fc = eval.at(c)?;
    let mut fd = eval.at(d)?;
    for _ in 0..200 {
        if (b - a).abs() <= tol {
            break;
        }
        if fc.objective <= fd.objective {
            b = d;
            d = c;
            fd = fc;
            c = b - GOLDEN * (b - a);
            fc = eval.at(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + GOLDEN * (b - a);
            fd = eval.at(d)?;
        }
    }
    Ok(if fc.objective <= fd.objective { fc } else { fd })
}

pub fn optimize_knob(
    space: &KnobSpace,
    weights: &BalanceWeights,
    params_pt: &LawParams,
    params_cpt: &LawParams,
) -> Result<OptimumReport> {
    space.validate()?;
    if space.knob == Knob::ReplayRatio && (params_pt.replay.is_none() || params_cpt.replay.is_none()) {
        return Err(Error::InvalidArgument(
            "the replay_ratio knob needs laws with replay terms".into(),
        ));
    }
    let eval = Evaluator {
        space,
        weights,
        params_pt,
        params_cpt,
    };

    let (curve, best) = if space.knob.is_integer() {
        let lo = space.lo.ceil() as usize;
        let hi = space.hi.floor() as usize;
        if hi < lo {
            return Err(Error::InvalidArgument("integer knob range is empty".into()));
        }
        let count = hi - lo + 1;
        if count <= space.integer_cap {
            let xs: Vec<f64> = (lo..=hi).map(|v| v as f64).collect();
            let curve = eval.many(&xs)?;
            let best = curve[argmin(&curve)];
            (curve, best)
        } else {
            let xs: Vec<f64> = integer_grid(lo, hi, space.grid)
                .into_iter()
                .map(|v| v as f64)
                .collect();
            let curve = eval.many(&xs)?;
            let i = argmin(&curve);
            let left = if i == 0 { lo } else { xs[i - 1] as usize };
            let right = if i + 1 == xs.len() { hi } else { xs[i + 1] as usize };
            let inner: Vec<f64> = (left..=right).map(|v| v as f64).collect();
            let local = eval.many(&inner)?;
            let mut best = curve[i];
            let j = argmin(&local);
            if local[j].objective < best.objective {
                best = local[j];
            }
            (curve, best)
        }
    } else {
        let n = space.grid;
        let xs: Vec<f64> = (0..n)
            .map(|i| space.lo + (space.hi - space.lo) * i as f64 / (n - 1) as f64)
            .collect();
        let curve = eval.many(&xs)?;
        let i = argmin(&curve);
        let a = xs[i.saturating_sub(1)];
        let b = xs[(i + 1).min(n - 1)];
        let refined = golden_section(&eval, a, b, 1e-9 * (space.hi - space.lo))?;
        let best = if refined.objective < curve[i].objective {
            refined
        } else {
            curve[i]
        };
        (curve, best)
    };

    Ok(OptimumReport {
        knob: space.knob,
        knob_value: best.knob,
        objective: best.objective,
        delta_pt: best.delta_pt,
        delta_cpt: best.delta_cpt,
        weights: *weights,
        curve,
    })
}

fn integer_grid(lo: usize, hi: usize, n: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..n)
        .map(|i| lo + ((hi - lo) as f64 * i as f64 / (n - 1) as f64).round() as usize)
        .collect();
    out.dedup();
    out
}

/// Up to `count` integers spread log-uniformly over `[lo, hi]`, sorted,
/// always including both ends.
pub fn log_candidates(lo: usize, hi: usize, count: usize) -> Vec<usize> {
    assert!(lo >= 1 && hi >= lo);
    if lo == hi {
        return vec![lo];
    }
    if count < 2 {
        return vec![lo, hi];
    }
    let (a, b) = ((lo as f64).ln(), (hi as f64).ln());
    let mut out: Vec<usize> = (0..count)
        .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp().round() as usize)
        .map(|v| v.clamp(lo, hi))
        .collect();
    out[0] = lo;
    *out.last_mut().unwrap() = hi;
    out.dedup();
    out
}

// ---------------------------------------------------------------------------
// turning length and critical point

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TurningLength {
    Steps(usize),
    Unreachable,
}

/// PT-domain loss change after a CPT phase of `t` steps, for the template's
/// PT schedule and CPT family.
pub struct TurningProblem<'a> {
    params: &'a LawParams,
    pt: Schedule,
    family: CptFamily,
    opts: AreaOptions,
    ctx: EvalContext,
    start_loss: f64,
}

impl<'a> TurningProblem<'a> {
    pub fn new(params: &'a LawParams, template: &ScheduleTemplate) -> Result<Self> {
        template.validate()?;
        if template.from_scratch {
            return Err(Error::InvalidArgument(
                "turning length needs a PT phase".into(),
            ));
        }
        let pt = template.pt_schedule()?;
        let opts = params.area_options(template.lambda);
        let ctx = template.context(Domain::Pt);
        let end = final_point(&pt, &opts)?;
        let start_loss = params.loss(
            &AreaPoint {
                s1_pt: end.s1_cpt,
                s2_pt: end.s2_cpt,
                s1_cpt: 0.0,
                s2_cpt: 0.0,
            },
            &ctx,
        )?;
        Ok(Self {
            params,
            pt,
            family: template.cpt_family(),
            opts,
            ctx,
            start_loss,
        })
    }

    /// Loss at the end of PT.
    pub fn start_loss(&self) -> f64 {
        self.start_loss
    }

    pub fn delta(&self, steps: usize) -> Result<f64> {
        let cpt = self.family.build(steps)?;
        let schedule = concat_pt_cpt(&self.pt, &cpt);
        let end = final_point(&schedule, &self.opts)?;
        Ok(self.params.loss(&end, &self.ctx)? - self.start_loss)
    }

    /// Smallest step count in `1..=cap` whose loss change is at most zero.
    /// A log-spaced scan finds the first qualifying candidate; bisection
    /// then narrows the bracket below it.
    pub fn solve(&self, cap: usize) -> Result<TurningLength> {
        if cap < 1 {
            return Err(Error::InvalidArgument("cap must be at least 1".into()));
        }
        let candidates = log_candidates(1, cap, 64);
        let deltas: Vec<f64> = candidates
            .par_iter()
            .map(|&t| self.delta(t))
            .collect::<Result<_>>()?;
        let Some(k) = deltas.iter().position(|d| *d <= 0.0) else {
            return Ok(TurningLength::Unreachable);
        };
        if k == 0 {
            return Ok(TurningLength::Steps(candidates[0]));
        }
        // delta(lo) > 0, delta(hi) <= 0
        let (mut lo, mut hi) = (candidates[k - 1], candidates[k]);
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if self.delta(mid)? <= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Ok(TurningLength::Steps(hi))
    }
}

pub fn turning_length(
    params_pt: &LawParams,
    template: &ScheduleTemplate,
    cap: usize,
) -> Result<TurningLength> {
    TurningProblem::new(params_pt, template)?.solve(cap)
}

/// PT-domain state at the start of CPT. Carried momentum is not tracked.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub s1_pt: f64,
    pub s2_pt: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriticalPoint {
    pub reachable: bool,
    pub infimum_loss: f64,
    pub argmin_steps: usize,
    pub checkpoint_loss: f64,
}

/// Lowest final PT-domain loss over CPT lengths `1..=cap` of `family`,
/// compared with the loss at the checkpoint.
pub fn critical_point(
    params_pt: &LawParams,
    checkpoint: &Checkpoint,
    ctx: &EvalContext,
    family: &CptFamily,
    cap: usize,
    lambda: f64,
) -> Result<CriticalPoint> {
    if cap < 1 {
        return Err(Error::InvalidArgument("cap must be at least 1".into()));
    }
    let ctx = domain_ctx(ctx, Domain::Pt);
    ctx.validate()?;
    let opts = params_pt.area_options(lambda);
    let checkpoint_loss = params_pt.loss(
        &AreaPoint {
            s1_pt: checkpoint.s1_pt,
            s2_pt: checkpoint.s2_pt,
            s1_cpt: 0.0,
            s2_cpt: 0.0,
        },
        &ctx,
    )?;
    let final_loss = |t: usize| -> Result<f64> {
        let cpt = final_point(&family.build(t)?, &opts)?;
        params_pt.loss(
            &AreaPoint {
                s1_pt: checkpoint.s1_pt,
                s2_pt: checkpoint.s2_pt,
                s1_cpt: cpt.s1_cpt,
                s2_cpt: cpt.s2_cpt,
            },
            &ctx,
        )
    };
    let scan = if cap <= 256 {
        (1..=cap).collect()
    } else {
        log_candidates(1, cap, 64)
    };
    let values: Vec<f64> = scan.par_iter().map(|&t| final_loss(t)).collect::<Result<_>>()?;
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v < values[best] {
            best = i;
        }
    }
    let (mut arg, mut inf) = (scan[best], values[best]);
    if cap > 256 {
        // refine between the scan neighbours
        let lo = scan[best.saturating_sub(1)];
        let hi = scan[(best + 1).min(scan.len() - 1)];
        let inner: Vec<usize> = if hi - lo <= 512 {
            (lo..=hi).collect()
        } else {
            integer_grid(lo, hi, 512)
        };
        let local: Vec<f64> = inner.par_iter().map(|&t| final_loss(t)).collect::<Result<_>>()?;
        for (t, v) in inner.iter().zip(&local) {
            if *v < inf {
                inf = *v;
                arg = *t;
            }
        }
    }
    Ok(CriticalPoint {
        reachable: inf < checkpoint_loss,
        infimum_loss: inf,
        argmin_steps: arg,
        checkpoint_loss,
    })
}
