//! Synthetic loss curves from known law parameters.
//!
//! Observations are the law's prediction times `exp(sigma * z)` with `z`
//! standard normal, so the noise is unbiased in log space.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::areas::DEFAULT_LAMBDA;
use crate::error::{Error, Result};
use crate::fit::{Dataset, Run};
use crate::law::{predict_curve_with, Domain, EvalContext, LawParams, LossSeries, PredictOptions};
use crate::schedule::Schedule;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    /// Law for the PT-domain curve; `None` skips that domain.
    pub truth_pt: Option<LawParams>,
    pub truth_cpt: Option<LawParams>,
    pub schedules: Vec<Schedule>,
    pub r_cpt: f64,
    pub n: Option<f64>,
    pub lambda: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    pub stride: usize,
    /// Also observe PT steps.
    pub include_pt: bool,
}

impl SynthSpec {
    pub fn new(truth_pt: LawParams, schedules: Vec<Schedule>) -> Self {
        Self {
            truth_pt: Some(truth_pt),
            truth_cpt: None,
            schedules,
            r_cpt: 1.0,
            n: None,
            lambda: DEFAULT_LAMBDA,
            noise_sigma: 0.0,
            seed: 0,
            stride: 10,
            include_pt: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "noise_sigma must be finite and nonnegative, got {}",
                self.noise_sigma
            )));
        }
        if self.stride == 0 {
            return Err(Error::InvalidArgument("stride must be at least 1".into()));
        }
        if self.truth_pt.is_none() && self.truth_cpt.is_none() {
            return Err(Error::InvalidArgument("no ground-truth law given".into()));
        }
        if self.schedules.is_empty() {
            return Err(Error::InvalidArgument("no schedules given".into()));
        }
        Ok(())
    }

    fn context(&self, domain: Domain) -> EvalContext {
        EvalContext {
            r_cpt: self.r_cpt,
            n: self.n.unwrap_or(1.0),
            domain,
        }
    }

    /// Noiseless curve of one domain on one schedule.
    pub fn clean_curve(&self, schedule: &Schedule, domain: Domain) -> Result<Option<LossSeries>> {
        let truth = match domain {
            Domain::Pt => self.truth_pt.as_ref(),
            Domain::Cpt => self.truth_cpt.as_ref(),
        };
        let Some(truth) = truth else {
            return Ok(None);
        };
        let opts = PredictOptions {
            lambda: self.lambda,
            track_pt: self.include_pt,
            stride: self.stride,
            ..PredictOptions::default()
        };
        predict_curve_with(truth, schedule, &opts, &self.context(domain)).map(Some)
    }
}

fn perturb(series: &mut LossSeries, sigma: f64, rng: &mut ChaCha8Rng) {
    for v in &mut series.values {
        let z: f64 = StandardNormal.sample(rng);
        *v *= (sigma * z).exp();
    }
}

pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut runs = Vec::with_capacity(spec.schedules.len());
    for (index, schedule) in spec.schedules.iter().enumerate() {
        let mut run = Run::new(schedule.clone());
        run.r_cpt = spec.r_cpt;
        run.n = spec.n;
        for (lane, domain) in [Domain::Pt, Domain::Cpt].into_iter().enumerate() {
            let Some(mut series) = spec.clean_curve(schedule, domain)? else {
                continue;
            };
            if spec.noise_sigma > 0.0 {
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
                rng.set_stream((2 * index + lane) as u64);
                perturb(&mut series, spec.noise_sigma, &mut rng);
            }
            match domain {
                Domain::Pt => run.pt = Some(series),
                Domain::Cpt => run.cpt = Some(series),
            }
        }
        runs.push(run);
    }
    Ok(Dataset::new(runs))
}
