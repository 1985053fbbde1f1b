//! The CPT loss law and its variants.
//!
//! Base form, for total forward area `S1 = S1_pt + S1_cpt`:
//!
//! ```text
//! L = L0 + A * S1^(-alpha) - C1 * S2_pt - C2 * S2_cpt + B * (1 - (1 + E * S1_cpt)^(-beta))
//! ```
//!
//! Optional extensions:
//! * replay: the CPT annealing term is scaled by `exp(a1 * r)` with `r` the
//!   mixture fraction of the evaluated domain's data, and the shift term by
//!   `1 - exp(-a2 * r_cpt)` (PT domain) or `exp(a2 * r_cpt) - 1` (CPT domain);
//! * model size: the annealing terms are scaled by `N^gamma1`, `N^gamma2`
//!   and `F * N^(-gamma3)` is added;
//! * S2 variants: S2 weighted by `eta^epsilon` inside the area pass, or the
//!   annealing terms raised to powers `zeta1`, `zeta2`.
//!
//! Evaluation accepts any finite parameters; [`LawParams::check`] reports
//! values outside the law's usual domain.

use serde::{Deserialize, Serialize};

use crate::areas::{compute_areas_with, split_areas, AreaOptions, AreaPoint};
use crate::error::{Error, Result};
use crate::schedule::Schedule;

/// Total forward area below which the power term is treated as singular.
pub const MIN_FORWARD_AREA: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Base,
    LrWeighted {
        epsilon: f64,
    },
    S2Power {
        zeta1: f64,
        zeta2: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplayParams {
    pub a1: f64,
    pub a2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSizeParams {
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    pub f: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LawParams {
    pub l0: f64,
    pub a: f64,
    pub alpha: f64,
    pub c1: f64,
    pub c2: f64,
    pub b: f64,
    pub e: f64,
    pub beta: f64,
    #[serde(default)]
    pub variant: Variant,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replay: Option<ReplayParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_size: Option<ModelSizeParams>,
}

impl Default for LawParams {
    /// D_pt-domain constants of a replay fit reported for a 106M model, with
    /// beta set to 0.5 and no replay or model-size terms.
    fn default() -> Self {
        Self {
            l0: 3.067,
            a: 0.480,
            alpha: 0.510,
            c1: 0.280,
            c2: 0.263,
            b: 0.276,
            e: 99.35,
            beta: 0.5,
            variant: Variant::Base,
            replay: None,
            model_size: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Pt,
    Cpt,
}

impl Domain {
    pub fn as_str(&self) -> &'static str {
        match self {
            Domain::Pt => "pt",
            Domain::Cpt => "cpt",
        }
    }
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pt" => Ok(Domain::Pt),
            "cpt" => Ok(Domain::Cpt),
            other => Err(Error::InvalidArgument(format!(
                "unknown domain '{other}' (expected pt or cpt)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalContext {
    /// Fraction of CPT data in the CPT mixture; the replay ratio is `1 - r_cpt`.
    pub r_cpt: f64,
    /// Non-embedding parameter count; only read by the model-size extension.
    pub n: f64,
    pub domain: Domain,
}

impl EvalContext {
    pub fn new(domain: Domain) -> Self {
        Self {
            r_cpt: 1.0,
            n: 1.0,
            domain,
        }
    }

    pub fn with_r_cpt(mut self, r_cpt: f64) -> Self {
        self.r_cpt = r_cpt;
        self
    }

    pub fn with_n(mut self, n: f64) -> Self {
        self.n = n;
        self
    }

    pub fn r_pt(&self) -> f64 {
        1.0 - self.r_cpt
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.r_cpt) {
            return Err(Error::InvalidArgument(format!(
                "r_cpt must lie in [0, 1], got {}",
                self.r_cpt
            )));
        }
        if !(self.n > 0.0 && self.n.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "model size N must be positive, got {}",
                self.n
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub base_power: f64,
    pub anneal_pt: f64,
    pub anneal_cpt: f64,
    pub shift: f64,
    pub size_term: f64,
}

/// `sign(s) * |s|^zeta`, so that negative annealing areas (re-warmup) stay
/// defined under the power variant.
pub(crate) fn signed_pow(s: f64, zeta: f64) -> f64 {
    if s == 0.0 {
        0.0
    } else {
        s.signum() * s.abs().powf(zeta)
    }
}

impl LawParams {
    /// Domain checks: `L0, A, alpha, E, beta > 0`, `C1, C2 >= 0` and, for the
    /// PT domain, `B >= 0`. On the CPT domain the shift lowers the loss, so a
    /// negative `B` is accepted there.
    pub fn check(&self, domain: Domain) -> Result<()> {
        let all = [
            self.l0, self.a, self.alpha, self.c1, self.c2, self.b, self.e, self.beta,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("law parameters must be finite".into()));
        }
        for (name, v) in [
            ("L0", self.l0),
            ("A", self.a),
            ("alpha", self.alpha),
            ("E", self.e),
            ("beta", self.beta),
        ] {
            if v <= 0.0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        if self.c1 < 0.0 || self.c2 < 0.0 {
            return Err(Error::InvalidArgument("C1 and C2 must be nonnegative".into()));
        }
        if self.b < 0.0 && domain == Domain::Pt {
            return Err(Error::InvalidArgument(format!(
                "B must be nonnegative for the {domain} domain, got {}",
                self.b
            )));
        }
        Ok(())
    }

    /// Area options matching this law's S2 definition.
    pub fn area_options(&self, lambda: f64) -> AreaOptions {
        let mut opts = AreaOptions::new(lambda);
        if let Variant::LrWeighted { epsilon } = self.variant {
            opts.lr_weight_exponent = Some(epsilon);
        }
        opts
    }

    /// The distribution-shift term without replay scaling:
    /// `B * (1 - (1 + E * s1_cpt)^(-beta))`.
    pub fn eval_shift(&self, s1_cpt: f64) -> Result<f64> {
        if !(s1_cpt >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "CPT forward area must be nonnegative, got {s1_cpt}"
            )));
        }
        Ok(self.b * -(-self.beta * (self.e * s1_cpt).ln_1p()).exp_m1())
    }

    pub fn eval(&self, areas: &AreaPoint, ctx: &EvalContext) -> Result<LossBreakdown> {
        let total_s1 = areas.total_s1();
        if !(total_s1 >= MIN_FORWARD_AREA) {
            return Err(Error::SingularArea(total_s1));
        }
        let base_power = self.a * total_s1.powf(-self.alpha);

        let (mut anneal_pt, mut anneal_cpt) = match self.variant {
            Variant::S2Power { zeta1, zeta2 } => (
                self.c1 * signed_pow(areas.s2_pt, zeta1),
                self.c2 * signed_pow(areas.s2_cpt, zeta2),
            ),
            _ => (self.c1 * areas.s2_pt, self.c2 * areas.s2_cpt),
        };

        let mut shift = self.eval_shift(areas.s1_cpt)?;
        if let Some(replay) = self.replay {
            let r = match ctx.domain {
                Domain::Pt => ctx.r_pt(),
                Domain::Cpt => ctx.r_cpt,
            };
            anneal_cpt *= (replay.a1 * r).exp();
            shift *= match ctx.domain {
                Domain::Pt => -(-replay.a2 * ctx.r_cpt).exp_m1(),
                Domain::Cpt => (replay.a2 * ctx.r_cpt).exp_m1(),
            };
        }

        let mut size_term = 0.0;
        if let Some(ms) = self.model_size {
            anneal_pt *= ctx.n.powf(ms.gamma1);
            anneal_cpt *= ctx.n.powf(ms.gamma2);
            size_term = ms.f * ctx.n.powf(-ms.gamma3);
        }

        let total = self.l0 + base_power - anneal_pt - anneal_cpt + shift + size_term;
        Ok(LossBreakdown {
            total,
            base_power,
            anneal_pt,
            anneal_cpt,
            shift,
            size_term,
        })
    }

    pub fn loss(&self, areas: &AreaPoint, ctx: &EvalContext) -> Result<f64> {
        self.eval(areas, ctx).map(|b| b.total)
    }
}

/// A loss curve: absolute 1-based steps paired with losses.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossSeries {
    pub steps: Vec<usize>,
    pub values: Vec<f64>,
}

impl LossSeries {
    pub fn new(steps: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if steps.len() != values.len() {
            return Err(Error::Data(format!(
                "{} steps but {} values",
                steps.len(),
                values.len()
            )));
        }
        Ok(Self { steps, values })
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.steps.iter().copied().zip(self.values.iter().copied())
    }

    /// Errors unless both series have identical step columns.
    pub fn ensure_aligned(&self, other: &LossSeries) -> Result<()> {
        if self.steps != other.steps {
            return Err(Error::Data("loss series are not aligned on steps".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictOptions {
    pub lambda: f64,
    /// Also emit points for PT steps.
    pub track_pt: bool,
    /// Emit every `stride`-th step (counted from the schedule start).
    pub stride: usize,
    /// Replace the PT forward area, as when the PT run is unknown.
    pub s1_pt_override: Option<f64>,
    pub reset_momentum_at_boundary: bool,
}

impl Default for PredictOptions {
    fn default() -> Self {
        Self {
            lambda: crate::areas::DEFAULT_LAMBDA,
            track_pt: false,
            stride: 1,
            s1_pt_override: None,
            reset_momentum_at_boundary: false,
        }
    }
}

/// Predicted loss at every CPT step of `schedule` (every step when the
/// boundary is 0).
pub fn predict_curve(
    params: &LawParams,
    schedule: &Schedule,
    lambda: f64,
    ctx: &EvalContext,
) -> Result<LossSeries> {
    predict_curve_with(
        params,
        schedule,
        &PredictOptions {
            lambda,
            ..PredictOptions::default()
        },
        ctx,
    )
}

/// Like [`predict_curve`] with step selection. Leading steps where no
/// learning rate has been applied yet (total forward area zero) are skipped;
/// the law has no value there.
pub fn predict_curve_with(
    params: &LawParams,
    schedule: &Schedule,
    opts: &PredictOptions,
    ctx: &EvalContext,
) -> Result<LossSeries> {
    ctx.validate()?;
    if opts.stride == 0 {
        return Err(Error::InvalidArgument("stride must be at least 1".into()));
    }
    let mut area_opts = params.area_options(opts.lambda);
    area_opts.reset_momentum_at_boundary = opts.reset_momentum_at_boundary;
    let trace = compute_areas_with(schedule, &area_opts)?;
    let split = split_areas(&trace)?;
    let first = if opts.track_pt { 1 } else { schedule.boundary() + 1 };

    let mut steps = Vec::new();
    let mut values = Vec::new();
    let mut started = false;
    for step in (first..=schedule.len()).filter(|s| s % opts.stride == 0) {
        let mut point = split.point_at(&trace, step);
        if let Some(s1_pt) = opts.s1_pt_override {
            if step > schedule.boundary() {
                point.s1_pt = s1_pt;
            }
        }
        if !started {
            if point.total_s1() < MIN_FORWARD_AREA {
                continue;
            }
            started = true;
        }
        steps.push(step);
        values.push(params.loss(&point, ctx)?);
    }
    Ok(LossSeries { steps, values })
}
