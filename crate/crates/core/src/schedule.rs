//! Per-step learning-rate schedules.
//!
//! A [`Schedule`] is a flat sequence of learning rates `eta_1..eta_T` with a
//! boundary marking the last pre-training (PT) step. Schedules are assembled
//! from [`PhaseSpec`] segments; a PT schedule and a CPT schedule are joined
//! with [`concat_pt_cpt`].

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhaseKind {
    Constant,
    Linear,
    Cosine,
    /// Plateau of a warmup-stable-decay schedule. Same as `Constant`.
    WsdStable,
    /// Decay of a warmup-stable-decay schedule, interpolated linearly.
    /// Use `Cosine` for a cosine-shaped decay.
    WsdDecay,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseSpec {
    pub kind: PhaseKind,
    pub steps: usize,
    pub lr_start: f64,
    #[serde(default)]
    pub lr_end: f64,
}

impl PhaseSpec {
    pub fn constant(steps: usize, lr: f64) -> Self {
        Self {
            kind: PhaseKind::Constant,
            steps,
            lr_start: lr,
            lr_end: lr,
        }
    }

    pub fn linear(steps: usize, lr_start: f64, lr_end: f64) -> Self {
        Self {
            kind: PhaseKind::Linear,
            steps,
            lr_start,
            lr_end,
        }
    }

    pub fn cosine(steps: usize, lr_start: f64, lr_end: f64) -> Self {
        Self {
            kind: PhaseKind::Cosine,
            steps,
            lr_start,
            lr_end,
        }
    }

    pub fn wsd_stable(steps: usize, lr: f64) -> Self {
        Self {
            kind: PhaseKind::WsdStable,
            steps,
            lr_start: lr,
            lr_end: lr,
        }
    }

    pub fn wsd_decay(steps: usize, lr_start: f64, lr_end: f64) -> Self {
        Self {
            kind: PhaseKind::WsdDecay,
            steps,
            lr_start,
            lr_end,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Schedule("phase has zero steps".into()));
        }
        if !(self.lr_start.is_finite() && self.lr_start >= 0.0) {
            return Err(Error::Schedule(format!(
                "lr_start must be finite and nonnegative, got {}",
                self.lr_start
            )));
        }
        if !self.is_flat() && !(self.lr_end.is_finite() && self.lr_end >= 0.0) {
            return Err(Error::Schedule(format!(
                "lr_end must be finite and nonnegative, got {}",
                self.lr_end
            )));
        }
        Ok(())
    }

    fn is_flat(&self) -> bool {
        matches!(self.kind, PhaseKind::Constant | PhaseKind::WsdStable)
    }

    /// Appends this phase's learning rates to `out`.
    fn emit(&self, out: &mut Vec<f64>) {
        if self.is_flat() || self.steps == 1 {
            out.extend(std::iter::repeat(self.lr_start).take(self.steps));
            return;
        }
        let (lo, hi) = if self.lr_start <= self.lr_end {
            (self.lr_start, self.lr_end)
        } else {
            (self.lr_end, self.lr_start)
        };
        let last = (self.steps - 1) as f64;
        for j in 0..self.steps {
            let frac = j as f64 / last;
            // weight on lr_start; 1 at the first step, 0 at the last
            let w = match self.kind {
                PhaseKind::Cosine => 0.5 * (1.0 + (PI * frac).cos()),
                _ => 1.0 - frac,
            };
            let eta = if j == 0 {
                self.lr_start
            } else if j == self.steps - 1 {
                self.lr_end
            } else {
                (self.lr_start * w + self.lr_end * (1.0 - w)).clamp(lo, hi)
            };
            out.push(eta);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    etas: Vec<f64>,
    boundary: usize,
}

impl Schedule {
    pub fn new(etas: Vec<f64>, boundary: usize) -> Result<Self> {
        if etas.is_empty() {
            return Err(Error::Schedule("schedule must have at least one step".into()));
        }
        if let Some((i, eta)) = etas
            .iter()
            .enumerate()
            .find(|(_, e)| !(e.is_finite() && **e >= 0.0))
        {
            return Err(Error::Schedule(format!(
                "learning rate at step {} is {eta}; expected a finite nonnegative value",
                i + 1
            )));
        }
        if boundary > etas.len() {
            return Err(Error::Schedule(format!(
                "boundary {boundary} exceeds schedule length {}",
                etas.len()
            )));
        }
        Ok(Self { etas, boundary })
    }

    /// Constant learning rate for `steps` steps, boundary 0.
    pub fn constant(steps: usize, lr: f64) -> Result<Self> {
        build_schedule(&[PhaseSpec::constant(steps, lr)])
    }

    pub fn etas(&self) -> &[f64] {
        &self.etas
    }

    pub fn len(&self) -> usize {
        self.etas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.etas.is_empty()
    }

    /// Number of PT steps; steps `1..=boundary` belong to PT.
    pub fn boundary(&self) -> usize {
        self.boundary
    }

    pub fn cpt_len(&self) -> usize {
        self.etas.len() - self.boundary
    }

    pub fn with_boundary(mut self, boundary: usize) -> Result<Self> {
        if boundary > self.etas.len() {
            return Err(Error::Schedule(format!(
                "boundary {boundary} exceeds schedule length {}",
                self.etas.len()
            )));
        }
        self.boundary = boundary;
        Ok(self)
    }

    /// Learning rate at the final step.
    pub fn final_lr(&self) -> f64 {
        *self.etas.last().expect("schedules are nonempty")
    }

    pub fn pt_etas(&self) -> &[f64] {
        &self.etas[..self.boundary]
    }

    pub fn cpt_etas(&self) -> &[f64] {
        &self.etas[self.boundary..]
    }
}

pub fn build_schedule(phases: &[PhaseSpec]) -> Result<Schedule> {
    if phases.is_empty() {
        return Err(Error::Schedule("phase list is empty".into()));
    }
    for phase in phases {
        phase.validate()?;
    }
    let total: usize = phases.iter().map(|p| p.steps).sum();
    let mut etas = Vec::with_capacity(total);
    for phase in phases {
        phase.emit(&mut etas);
    }
    Schedule::new(etas, 0)
}

/// Joins a PT schedule and a CPT schedule. The result's boundary is the PT
/// length, whatever boundary `pt` carried.
pub fn concat_pt_cpt(pt: &Schedule, cpt: &Schedule) -> Schedule {
    let mut etas = Vec::with_capacity(pt.len() + cpt.len());
    etas.extend_from_slice(pt.etas());
    etas.extend_from_slice(cpt.etas());
    Schedule {
        etas,
        boundary: pt.len(),
    }
}

/// Warmup-stable-decay phases: linear warmup from `warmup_from` to `peak`,
/// plateau at `peak`, then decay to `final_lr`. Zero-length segments are
/// omitted; `decay_kind` must be `Linear`, `WsdDecay` or `Cosine`.
pub fn wsd_phases(
    warmup: usize,
    warmup_from: f64,
    stable: usize,
    decay: usize,
    peak: f64,
    final_lr: f64,
    decay_kind: PhaseKind,
) -> Vec<PhaseSpec> {
    let mut phases = Vec::with_capacity(3);
    if warmup > 0 {
        phases.push(PhaseSpec::linear(warmup, warmup_from, peak));
    }
    if stable > 0 {
        phases.push(PhaseSpec::wsd_stable(stable, peak));
    }
    if decay > 0 {
        phases.push(PhaseSpec {
            kind: decay_kind,
            steps: decay,
            lr_start: peak,
            lr_end: final_lr,
        });
    }
    phases
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_phase() {
        let s = build_schedule(&[PhaseSpec::constant(3, 2e-4)]).unwrap();
        assert_eq!(s.etas(), &[2e-4, 2e-4, 2e-4]);
        assert_eq!(s.boundary(), 0);
    }

    #[test]
    fn linear_phase_hits_both_endpoints() {
        let s = build_schedule(&[PhaseSpec::linear(3, 0.0, 2e-4)]).unwrap();
        assert_eq!(s.etas(), &[0.0, 1e-4, 2e-4]);
    }

    #[test]
    fn cosine_phase() {
        let s = build_schedule(&[PhaseSpec::cosine(3, 2e-4, 0.0)]).unwrap();
        assert_eq!(s.etas()[0], 2e-4);
        assert!((s.etas()[1] - 1e-4).abs() < 1e-20);
        assert_eq!(s.etas()[2], 0.0);
    }

    #[test]
    fn single_step_phases_emit_lr_start() {
        for kind in [PhaseKind::Linear, PhaseKind::Cosine, PhaseKind::WsdDecay] {
            let s = build_schedule(&[PhaseSpec {
                kind,
                steps: 1,
                lr_start: 3e-4,
                lr_end: 0.0,
            }])
            .unwrap();
            assert_eq!(s.etas(), &[3e-4]);
        }
    }

    #[test]
    fn rejects_bad_phases() {
        assert!(matches!(build_schedule(&[]), Err(Error::Schedule(_))));
        assert!(build_schedule(&[PhaseSpec::constant(0, 1e-4)]).is_err());
        assert!(build_schedule(&[PhaseSpec::constant(3, -1e-4)]).is_err());
        assert!(build_schedule(&[PhaseSpec::linear(3, 1e-4, -1e-4)]).is_err());
        assert!(build_schedule(&[PhaseSpec::cosine(3, f64::NAN, 0.0)]).is_err());
    }

    #[test]
    fn constant_ignores_lr_end() {
        let s = build_schedule(&[PhaseSpec {
            kind: PhaseKind::Constant,
            steps: 2,
            lr_start: 1e-4,
            lr_end: -5.0,
        }])
        .unwrap();
        assert_eq!(s.etas(), &[1e-4, 1e-4]);
    }

    #[test]
    fn concat_sets_boundary_to_pt_length() {
        let pt = Schedule::constant(10, 2e-4).unwrap();
        let cpt = Schedule::constant(5, 1e-4).unwrap();
        let s = concat_pt_cpt(&pt, &cpt);
        assert_eq!(s.len(), 15);
        assert_eq!(s.boundary(), 10);
        assert_eq!(s.cpt_len(), 5);

        // pt's own boundary is overridden
        let pt = pt.with_boundary(4).unwrap();
        assert_eq!(concat_pt_cpt(&pt, &cpt).boundary(), 10);
    }

    #[test]
    fn wsd_pt_with_cosine_cpt() {
        let pt = build_schedule(&wsd_phases(
            1000,
            0.0,
            35_000,
            4000,
            2e-4,
            0.0,
            PhaseKind::WsdDecay,
        ))
        .unwrap();
        let cpt = build_schedule(&[PhaseSpec::cosine(10_000, 2e-4, 0.0)]).unwrap();
        let s = concat_pt_cpt(&pt, &cpt);
        assert_eq!(s.len(), 50_000);
        assert_eq!(s.boundary(), 40_000);
    }

    #[test]
    fn schedule_new_validates() {
        assert!(Schedule::new(vec![], 0).is_err());
        assert!(Schedule::new(vec![1e-4], 2).is_err());
        assert!(Schedule::new(vec![1e-4, f64::INFINITY], 0).is_err());
        assert!(Schedule::new(vec![1e-4], 1).is_ok());
    }

    fn phase_strategy() -> impl Strategy<Value = PhaseSpec> {
        (
            prop_oneof![
                Just(PhaseKind::Constant),
                Just(PhaseKind::Linear),
                Just(PhaseKind::Cosine),
                Just(PhaseKind::WsdStable),
                Just(PhaseKind::WsdDecay),
            ],
            1usize..200,
            0.0f64..1e-3,
            0.0f64..1e-3,
        )
            .prop_map(|(kind, steps, lr_start, lr_end)| PhaseSpec {
                kind,
                steps,
                lr_start,
                lr_end,
            })
    }

    proptest! {
        #[test]
        fn length_is_sum_of_steps(phases in prop::collection::vec(phase_strategy(), 1..6)) {
            let s = build_schedule(&phases).unwrap();
            prop_assert_eq!(s.len(), phases.iter().map(|p| p.steps).sum::<usize>());
        }

        #[test]
        fn phase_values_stay_in_range(phases in prop::collection::vec(phase_strategy(), 1..6)) {
            let s = build_schedule(&phases).unwrap();
            let mut offset = 0;
            for p in &phases {
                let (lo, hi) = if p.is_flat() {
                    (p.lr_start, p.lr_start)
                } else {
                    (p.lr_start.min(p.lr_end), p.lr_start.max(p.lr_end))
                };
                for &eta in &s.etas()[offset..offset + p.steps] {
                    prop_assert!(eta >= lo && eta <= hi);
                }
                offset += p.steps;
            }
        }

        #[test]
        fn concat_preserves_pt_prefix(
            a in prop::collection::vec(phase_strategy(), 1..4),
            b in prop::collection::vec(phase_strategy(), 1..4),
        ) {
            let pt = build_schedule(&a).unwrap();
            let cpt = build_schedule(&b).unwrap();
            let s = concat_pt_cpt(&pt, &cpt);
            prop_assert_eq!(s.pt_etas(), pt.etas());
            prop_assert_eq!(s.cpt_etas(), cpt.etas());
        }
    }
}
