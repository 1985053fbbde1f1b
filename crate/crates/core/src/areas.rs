//! Forward and annealing areas of a learning-rate schedule.
//!
//! The forward area is the running sum of learning rates,
//! `S1(t) = sum_{i<=t} eta_i`. The annealing area is the running sum of a
//! momentum state
//!
//! ```text
//! m_t  = lambda * m_{t-1} + (eta_{t-1} - eta_t),   m_0 = 0, eta_0 = eta_1
//! S2(t) = sum_{i<=t} m_i
//! ```
//!
//! which equals the double sum `sum_i sum_{k<=i} (eta_{k-1} - eta_k) lambda^(i-k)`
//! evaluated by [`brute_force_s2`]. Both running sums use compensated
//! summation so long schedules do not drift.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::Schedule;

pub const DEFAULT_LAMBDA: f64 = 0.999;

/// Neumaier compensated sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AreaOptions {
    pub lambda: f64,
    /// When set, each momentum contribution to S2 is weighted by `eta_i^epsilon`.
    #[serde(default)]
    pub lr_weight_exponent: Option<f64>,
    /// Zero the momentum at the first CPT step instead of carrying it over.
    #[serde(default)]
    pub reset_momentum_at_boundary: bool,
}

impl AreaOptions {
    pub fn new(lambda: f64) -> Self {
        Self {
            lambda,
            lr_weight_exponent: None,
            reset_momentum_at_boundary: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "lambda must lie in (0, 1), got {}",
                self.lambda
            )));
        }
        if let Some(eps) = self.lr_weight_exponent {
            if !eps.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "LR weight exponent must be finite, got {eps}"
                )));
            }
        }
        Ok(())
    }
}

impl Default for AreaOptions {
    fn default() -> Self {
        Self::new(DEFAULT_LAMBDA)
    }
}

/// Per-step area traces; index `t - 1` holds the value after step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct AreaTrace {
    pub eta: Vec<f64>,
    pub s1: Vec<f64>,
    pub m: Vec<f64>,
    pub s2: Vec<f64>,
    pub boundary: usize,
    pub lambda: f64,
    /// Per-step contributions to S2 (`m_i`, or `m_i * eta_i^epsilon`).
    contrib: Vec<f64>,
}

impl AreaTrace {
    pub fn len(&self) -> usize {
        self.eta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eta.is_empty()
    }
}

/// Areas split at the PT/CPT boundary. `s1_cpt[t]` and `s2_cpt[t]` are the
/// areas accumulated over the first `t` CPT steps, so index 0 is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AreaSplit {
    pub s1_pt: f64,
    pub s2_pt: f64,
    pub s1_cpt: Vec<f64>,
    pub s2_cpt: Vec<f64>,
}

/// The four area values that enter the law at one step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AreaPoint {
    pub s1_pt: f64,
    pub s2_pt: f64,
    pub s1_cpt: f64,
    pub s2_cpt: f64,
}

impl AreaPoint {
    pub fn total_s1(&self) -> f64 {
        self.s1_pt + self.s1_cpt
    }
}

pub fn compute_areas(schedule: &Schedule, lambda: f64) -> Result<AreaTrace> {
    compute_areas_with(schedule, &AreaOptions::new(lambda))
}

/// Momentum contributions of every step, in a single O(T) pass.
struct MomentumPass<'a> {
    etas: &'a [f64],
    boundary: usize,
    opts: AreaOptions,
    idx: usize,
    m: f64,
}

impl<'a> MomentumPass<'a> {
    fn new(etas: &'a [f64], boundary: usize, opts: AreaOptions) -> Self {
        Self {
            etas,
            boundary,
            opts,
            idx: 0,
            m: 0.0,
        }
    }
}

impl Iterator for MomentumPass<'_> {
    /// (eta, m, contribution to S2)
    type Item = (f64, f64, f64);

    fn next(&mut self) -> Option<Self::Item> {
        let i = self.idx;
        let eta = *self.etas.get(i)?;
        let reset = self.opts.reset_momentum_at_boundary && i == self.boundary && i > 0;
        let prev = if i == 0 || reset { eta } else { self.etas[i - 1] };
        if reset {
            self.m = 0.0;
        }
        self.m = self.opts.lambda * self.m + (prev - eta);
        let contrib = match self.opts.lr_weight_exponent {
            Some(eps) => self.m * eta.powf(eps),
            None => self.m,
        };
        self.idx += 1;
        Some((eta, self.m, contrib))
    }
}

pub fn compute_areas_with(schedule: &Schedule, opts: &AreaOptions) -> Result<AreaTrace> {
    opts.validate()?;
    let n = schedule.len();
    let mut trace = AreaTrace {
        eta: Vec::with_capacity(n),
        s1: Vec::with_capacity(n),
        m: Vec::with_capacity(n),
        s2: Vec::with_capacity(n),
        boundary: schedule.boundary(),
        lambda: opts.lambda,
        contrib: Vec::with_capacity(n),
    };
    let mut s1 = CompensatedSum::default();
    let mut s2 = CompensatedSum::default();
    for (eta, m, contrib) in MomentumPass::new(schedule.etas(), schedule.boundary(), *opts) {
        s1.add(eta);
        s2.add(contrib);
        trace.eta.push(eta);
        trace.m.push(m);
        trace.contrib.push(contrib);
        trace.s1.push(s1.value());
        trace.s2.push(s2.value());
    }
    Ok(trace)
}

pub fn split_areas(trace: &AreaTrace) -> Result<AreaSplit> {
    let boundary = trace.boundary;
    if boundary > trace.len() {
        return Err(Error::InvalidArgument(format!(
            "boundary {boundary} exceeds trace length {}",
            trace.len()
        )));
    }
    let mut s1 = CompensatedSum::default();
    let mut s2 = CompensatedSum::default();
    for i in 0..boundary {
        s1.add(trace.eta[i]);
        s2.add(trace.contrib[i]);
    }
    let (s1_pt, s2_pt) = (s1.value(), s2.value());

    let cpt = trace.len() - boundary;
    let mut s1_cpt = Vec::with_capacity(cpt + 1);
    let mut s2_cpt = Vec::with_capacity(cpt + 1);
    s1_cpt.push(0.0);
    s2_cpt.push(0.0);
    let mut s1 = CompensatedSum::default();
    let mut s2 = CompensatedSum::default();
    for i in boundary..trace.len() {
        s1.add(trace.eta[i]);
        s2.add(trace.contrib[i]);
        s1_cpt.push(s1.value());
        s2_cpt.push(s2.value());
    }
    Ok(AreaSplit {
        s1_pt,
        s2_pt,
        s1_cpt,
        s2_cpt,
    })
}

impl AreaSplit {
    /// Areas at absolute step `step` (1-based). Steps at or before the
    /// boundary are PT steps and have no CPT area.
    pub fn point_at(&self, trace: &AreaTrace, step: usize) -> AreaPoint {
        let boundary = trace.boundary;
        if step <= boundary {
            if step == 0 {
                return AreaPoint::default();
            }
            AreaPoint {
                s1_pt: trace.s1[step - 1],
                s2_pt: trace.s2[step - 1],
                s1_cpt: 0.0,
                s2_cpt: 0.0,
            }
        } else {
            let t = step - boundary;
            AreaPoint {
                s1_pt: self.s1_pt,
                s2_pt: self.s2_pt,
                s1_cpt: self.s1_cpt[t],
                s2_cpt: self.s2_cpt[t],
            }
        }
    }
}

/// Split areas at the end of the schedule, without storing per-step traces.
pub fn final_point(schedule: &Schedule, opts: &AreaOptions) -> Result<AreaPoint> {
    opts.validate()?;
    let boundary = schedule.boundary();
    let mut pt = (CompensatedSum::default(), CompensatedSum::default());
    let mut cpt = (CompensatedSum::default(), CompensatedSum::default());
    for (i, (eta, _, contrib)) in MomentumPass::new(schedule.etas(), boundary, *opts).enumerate() {
        let acc = if i < boundary { &mut pt } else { &mut cpt };
        acc.0.add(eta);
        acc.1.add(contrib);
    }
    Ok(AreaPoint {
        s1_pt: pt.0.value(),
        s2_pt: pt.1.value(),
        s1_cpt: cpt.0.value(),
        s2_cpt: cpt.1.value(),
    })
}

/// Literal O(T^2) evaluation of the annealing-area double sum, for checking
/// [`compute_areas`]. Uses `eta_0 = eta_1`.
pub fn brute_force_s2(schedule: &Schedule, lambda: f64) -> Vec<f64> {
    let etas = schedule.etas();
    let n = etas.len();
    let diffs: Vec<f64> = (0..n)
        .map(|k| if k == 0 { 0.0 } else { etas[k - 1] - etas[k] })
        .collect();
    let powers: Vec<f64> = (0..n).map(|j| lambda.powi(j as i32)).collect();
    let mut out = Vec::with_capacity(n);
    let mut outer = CompensatedSum::default();
    for i in 0..n {
        let mut inner = CompensatedSum::default();
        for k in 0..=i {
            inner.add(diffs[k] * powers[i - k]);
        }
        outer.add(inner.value());
        out.push(outer.value());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{build_schedule, concat_pt_cpt, PhaseSpec};

    fn single_drop() -> Schedule {
        build_schedule(&[PhaseSpec::constant(10, 2e-4), PhaseSpec::constant(100, 1e-4)]).unwrap()
    }

    #[test]
    fn constant_schedule_has_zero_annealing_area() {
        let s = Schedule::constant(100, 2e-4).unwrap();
        let trace = compute_areas(&s, 0.999).unwrap();
        assert!((trace.s1[99] - 0.02).abs() < 1e-15);
        assert!(trace.s2.iter().all(|&v| v == 0.0));
        assert!(trace.m.iter().all(|&v| v == 0.0));
        assert!(brute_force_s2(&s, 0.999).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_drop_matches_geometric_sum() {
        let expected = 1e-4 * (1.0 - 0.999f64.powi(100)) / 0.001;
        let trace = compute_areas(&single_drop(), 0.999).unwrap();
        assert!((trace.s1[109] - 1.2e-2).abs() < 1e-15);
        assert!(((trace.s2[109] - expected) / expected).abs() < 1e-9);
        let brute = brute_force_s2(&single_drop(), 0.999);
        assert!(((brute[109] - expected) / expected).abs() < 1e-9);
        assert!((expected - 9.5208e-3).abs() < 1e-7);
    }

    #[test]
    fn warmup_gives_negative_momentum() {
        let s = build_schedule(&[PhaseSpec::linear(5, 0.0, 2e-4), PhaseSpec::constant(20, 2e-4)])
            .unwrap();
        let trace = compute_areas(&s, 0.999).unwrap();
        assert_eq!(trace.m[0], 0.0);
        assert!(trace.m[1..5].iter().all(|&m| m < 0.0));
        assert!(trace.s2[4] < 0.0);
        let brute = brute_force_s2(&s, 0.999);
        assert!(((trace.s2[4] - brute[4]) / brute[4]).abs() < 1e-12);
    }

    #[test]
    fn rejects_lambda_outside_unit_interval() {
        let s = Schedule::constant(3, 1e-4).unwrap();
        for lambda in [0.0, 1.0, -0.5, 1.5, f64::NAN] {
            assert!(matches!(
                compute_areas(&s, lambda),
                Err(Error::InvalidArgument(_))
            ));
        }
    }

    #[test]
    fn split_without_cpt_steps() {
        let s = Schedule::constant(10, 1e-4).unwrap().with_boundary(10).unwrap();
        let split = split_areas(&compute_areas(&s, 0.999).unwrap()).unwrap();
        assert_eq!(split.s1_cpt, vec![0.0]);
        assert_eq!(split.s2_cpt, vec![0.0]);
        assert!((split.s1_pt - 1e-3).abs() < 1e-18);
    }

    #[test]
    fn split_from_scratch_has_no_pt_area() {
        let s = single_drop();
        let split = split_areas(&compute_areas(&s, 0.999).unwrap()).unwrap();
        assert_eq!(split.s1_pt, 0.0);
        assert_eq!(split.s2_pt, 0.0);
        assert_eq!(split.s1_cpt.len(), 111);
    }

    #[test]
    fn carried_momentum_shows_up_in_cpt_area() {
        let pt = build_schedule(&[PhaseSpec::constant(10, 2e-4), PhaseSpec::constant(1, 1e-4)])
            .unwrap();
        let cpt = Schedule::constant(50, 1e-4).unwrap();
        let s = concat_pt_cpt(&pt, &cpt);
        let trace = compute_areas(&s, 0.999).unwrap();
        let split = split_areas(&trace).unwrap();
        assert!(split.s2_cpt[1..].iter().all(|&v| v > 0.0));

        // oracle: double sum restricted to i > T_pt
        let brute = brute_force_s2(&s, 0.999);
        for t in 1..=50 {
            let want = brute[10 + t] - brute[10];
            assert!((split.s2_cpt[t] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn reset_flag_drops_carried_momentum() {
        let pt = build_schedule(&[PhaseSpec::constant(10, 2e-4), PhaseSpec::constant(1, 1e-4)])
            .unwrap();
        let s = concat_pt_cpt(&pt, &Schedule::constant(50, 1e-4).unwrap());
        let opts = AreaOptions {
            reset_momentum_at_boundary: true,
            ..AreaOptions::default()
        };
        let split = split_areas(&compute_areas_with(&s, &opts).unwrap()).unwrap();
        assert!(split.s2_cpt.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn split_is_consistent_with_totals() {
        let pt = build_schedule(&[
            PhaseSpec::linear(50, 0.0, 3e-4),
            PhaseSpec::cosine(200, 3e-4, 3e-5),
        ])
        .unwrap();
        let cpt = build_schedule(&[PhaseSpec::linear(20, 3e-5, 2e-4), PhaseSpec::cosine(100, 2e-4, 0.0)])
            .unwrap();
        let s = concat_pt_cpt(&pt, &cpt);
        let trace = compute_areas(&s, 0.999).unwrap();
        let split = split_areas(&trace).unwrap();
        for t in 0..=cpt.len() {
            let total = trace.s1[250 + t - 1];
            assert!((split.s1_pt + split.s1_cpt[t] - total).abs() <= 1e-15 * total.max(1.0));
        }
        let end = *trace.s2.last().unwrap();
        assert!((split.s2_pt + split.s2_cpt.last().unwrap() - end).abs() < 1e-14);

        let fp = final_point(&s, &AreaOptions::default()).unwrap();
        assert_eq!(fp.s1_pt, split.s1_pt);
        assert_eq!(fp.s2_pt, split.s2_pt);
        assert_eq!(fp.s1_cpt, *split.s1_cpt.last().unwrap());
        assert_eq!(fp.s2_cpt, *split.s2_cpt.last().unwrap());
    }

    #[test]
    fn lr_weight_zero_is_base() {
        let s = build_schedule(&[PhaseSpec::cosine(300, 3e-4, 0.0)]).unwrap();
        let base = compute_areas(&s, 0.999).unwrap();
        let opts = AreaOptions {
            lr_weight_exponent: Some(0.0),
            ..AreaOptions::default()
        };
        let weighted = compute_areas_with(&s, &opts).unwrap();
        assert_eq!(base.s2, weighted.s2);

        let opts = AreaOptions {
            lr_weight_exponent: Some(0.1),
            ..AreaOptions::default()
        };
        let weighted = compute_areas_with(&s, &opts).unwrap();
        // eta^0.1 < 1, so the weighted area is smaller; the final step has eta = 0
        assert!(weighted.s2[299] < base.s2[299]);
    }

    #[test]
    fn point_at_maps_pt_and_cpt_steps() {
        let pt = Schedule::constant(4, 1e-3).unwrap();
        let s = concat_pt_cpt(&pt, &Schedule::constant(3, 5e-4).unwrap());
        let trace = compute_areas(&s, 0.9).unwrap();
        let split = split_areas(&trace).unwrap();
        let p = split.point_at(&trace, 2);
        assert_eq!((p.s1_pt, p.s1_cpt), (2e-3, 0.0));
        let p = split.point_at(&trace, 6);
        assert!((p.s1_pt - 4e-3).abs() < 1e-18);
        assert!((p.s1_cpt - 1e-3).abs() < 1e-18);
    }
}
