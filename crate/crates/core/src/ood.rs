//! Out-of-domain loss as a linear combination of the two domain losses,
//! `L_ood ~ l1 * L_pt + l2 * L_cpt`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::law::LossSeries;

/// Condition number of the normal matrix above which the regressors are
/// treated as collinear.
pub const MAX_CONDITION: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OodCoeffs {
    pub lambda1p: f64,
    pub lambda2p: f64,
    pub residual_rmse: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodConstraint {
    #[default]
    None,
    /// Both coefficients at least zero.
    Nonnegative,
    /// `l1 + l2 = 1`.
    SumToOne,
}

fn rmse(pt: &[f64], cpt: &[f64], ood: &[f64], l1: f64, l2: f64) -> f64 {
    let ss: f64 = pt
        .iter()
        .zip(cpt)
        .zip(ood)
        .map(|((a, b), y)| (y - l1 * a - l2 * b).powi(2))
        .sum();
    (ss / pt.len() as f64).sqrt()
}

fn check_inputs(l_pt: &LossSeries, l_cpt: &LossSeries, l_ood: &LossSeries) -> Result<()> {
    l_pt.ensure_aligned(l_cpt)?;
    l_pt.ensure_aligned(l_ood)?;
    if l_pt.len() < 2 {
        return Err(Error::Data(format!(
            "OOD fit needs at least 2 aligned observations, found {}",
            l_pt.len()
        )));
    }
    Ok(())
}

pub fn fit_ood(l_pt: &LossSeries, l_cpt: &LossSeries, l_ood: &LossSeries) -> Result<OodCoeffs> {
    fit_ood_with(l_pt, l_cpt, l_ood, OodConstraint::None)
}

pub fn fit_ood_with(
    l_pt: &LossSeries,
    l_cpt: &LossSeries,
    l_ood: &LossSeries,
    constraint: OodConstraint,
) -> Result<OodCoeffs> {
    check_inputs(l_pt, l_cpt, l_ood)?;
    let (x, z, y) = (&l_pt.values, &l_cpt.values, &l_ood.values);

    if constraint == OodConstraint::SumToOne {
        // y - z = l1 (x - z)
        let (mut num, mut den) = (0.0, 0.0);
        for ((a, b), t) in x.iter().zip(z).zip(y) {
            num += (a - b) * (t - b);
            den += (a - b) * (a - b);
        }
        let scale: f64 = x.iter().map(|a| a * a).sum();
        if den <= scale * 1e-16 {
            return Err(Error::Numerical(
                "the two domain curves coincide; sum-to-one fit is undetermined".into(),
            ));
        }
        let l1 = num / den;
        return Ok(OodCoeffs {
            lambda1p: l1,
            lambda2p: 1.0 - l1,
            residual_rmse: rmse(x, z, y, l1, 1.0 - l1),
        });
    }

    let (mut sxx, mut sxz, mut szz, mut sxy, mut szy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for ((a, b), t) in x.iter().zip(z).zip(y) {
        sxx += a * a;
        sxz += a * b;
        szz += b * b;
        sxy += a * t;
        szy += b * t;
    }
    // eigenvalues of the symmetric 2x2 normal matrix
    let tr = sxx + szz;
    let det = sxx * szz - sxz * sxz;
    let disc = (((sxx - szz) / 2.0).powi(2) + sxz * sxz).sqrt();
    let big = tr / 2.0 + disc;
    let small = det / big;
    if !(small > 0.0) || big / small > MAX_CONDITION {
        return Err(Error::Numerical(format!(
            "PT and CPT curves are collinear (normal-matrix condition number {:.3e})",
            big / small.max(0.0)
        )));
    }
    let mut l1 = (szz * sxy - sxz * szy) / det;
    let mut l2 = (sxx * szy - sxz * sxy) / det;

    if constraint == OodConstraint::Nonnegative && (l1 < 0.0 || l2 < 0.0) {
        // The constrained optimum lies on an edge; try both and keep the better.
        let only_pt = (sxy / sxx).max(0.0);
        let only_cpt = (szy / szz).max(0.0);
        let r_pt = rmse(x, z, y, only_pt, 0.0);
        let r_cpt = rmse(x, z, y, 0.0, only_cpt);
        (l1, l2) = if r_pt <= r_cpt {
            (only_pt, 0.0)
        } else {
            (0.0, only_cpt)
        };
    }
    Ok(OodCoeffs {
        lambda1p: l1,
        lambda2p: l2,
        residual_rmse: rmse(x, z, y, l1, l2),
    })
}

pub fn predict_ood(coeffs: &OodCoeffs, l_pt: &LossSeries, l_cpt: &LossSeries) -> Result<LossSeries> {
    l_pt.ensure_aligned(l_cpt)?;
    let values = l_pt
        .values
        .iter()
        .zip(&l_cpt.values)
        .map(|(a, b)| coeffs.lambda1p * a + coeffs.lambda2p * b)
        .collect();
    LossSeries::new(l_pt.steps.clone(), values)
}

impl OodCoeffs {
    /// Coefficients scaled to sum to one, usable as balance weights.
    pub fn normalized(&self) -> Result<(f64, f64)> {
        let s = self.lambda1p + self.lambda2p;
        if !(s > 0.0) || self.lambda1p < 0.0 || self.lambda2p < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "coefficients ({}, {}) do not normalize to weights",
                self.lambda1p, self.lambda2p
            )));
        }
        Ok((self.lambda1p / s, self.lambda2p / s))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(v: Vec<f64>) -> LossSeries {
        LossSeries::new((1..=v.len()).collect(), v).unwrap()
    }

    fn curves() -> (LossSeries, LossSeries) {
        let pt: Vec<f64> = (0..50).map(|i| 3.5 - 0.3 * (i as f64 / 10.0).ln_1p()).collect();
        let cpt: Vec<f64> = (0..50).map(|i| 2.8 + 0.4 * (-(i as f64) / 7.0).exp()).collect();
        (series(pt), series(cpt))
    }

    #[test]
    fn single_point_arithmetic() {
        let c = OodCoeffs {
            lambda1p: 0.3,
            lambda2p: 0.7,
            residual_rmse: 0.0,
        };
        let out = predict_ood(&c, &series(vec![3.5]), &series(vec![2.8])).unwrap();
        assert!((out.values[0] - 3.01).abs() < 1e-15);
    }

    #[test]
    fn identity_combination() {
        let (pt, cpt) = curves();
        let c = fit_ood(&pt, &cpt, &pt).unwrap();
        assert!((c.lambda1p - 1.0).abs() < 1e-12);
        assert!(c.lambda2p.abs() < 1e-12);
        assert!(c.residual_rmse < 1e-12);
    }

    #[test]
    fn exact_combination() {
        let (pt, cpt) = curves();
        let ood = predict_ood(
            &OodCoeffs {
                lambda1p: 0.3,
                lambda2p: 0.7,
                residual_rmse: 0.0,
            },
            &pt,
            &cpt,
        )
        .unwrap();
        let c = fit_ood(&pt, &cpt, &ood).unwrap();
        assert!((c.lambda1p - 0.3).abs() < 1e-10);
        assert!((c.lambda2p - 0.7).abs() < 1e-10);
    }

    #[test]
    fn collinear_is_rejected() {
        let (pt, _) = curves();
        let twice = series(pt.values.iter().map(|v| 2.0 * v).collect());
        assert!(matches!(fit_ood(&pt, &twice, &pt), Err(Error::Numerical(_))));
    }

    #[test]
    fn misaligned_is_rejected() {
        let (pt, cpt) = curves();
        let short = series(cpt.values[..10].to_vec());
        assert!(fit_ood(&pt, &short, &pt).is_err());
    }

    #[test]
    fn residual_is_a_minimum() {
        let (pt, cpt) = curves();
        let ood = series(
            pt.values
                .iter()
                .zip(&cpt.values)
                .enumerate()
                .map(|(i, (a, b))| 0.4 * a + 0.5 * b + 0.01 * (i as f64).sin())
                .collect(),
        );
        let c = fit_ood(&pt, &cpt, &ood).unwrap();
        for (d1, d2) in [(1e-3, 0.0), (-1e-3, 0.0), (0.0, 1e-3), (0.0, -1e-3), (1e-3, 1e-3), (1e-3, -1e-3)] {
            let r = rmse(&pt.values, &cpt.values, &ood.values, c.lambda1p + d1, c.lambda2p + d2);
            assert!(r >= c.residual_rmse);
        }
    }

    #[test]
    fn constrained_modes() {
        let (pt, cpt) = curves();
        let ood = series(
            pt.values
                .iter()
                .zip(&cpt.values)
                .map(|(a, b)| 1.2 * a - 0.1 * b)
                .collect(),
        );
        let c = fit_ood_with(&pt, &cpt, &ood, OodConstraint::Nonnegative).unwrap();
        assert!(c.lambda1p >= 0.0 && c.lambda2p >= 0.0);
        let s = fit_ood_with(&pt, &cpt, &ood, OodConstraint::SumToOne).unwrap();
        assert!((s.lambda1p + s.lambda2p - 1.0).abs() < 1e-15);
    }

    #[test]
    fn prediction_is_linear() {
        let (pt, cpt) = curves();
        let c1 = OodCoeffs {
            lambda1p: 0.2,
            lambda2p: 0.5,
            residual_rmse: 0.0,
        };
        let c2 = OodCoeffs {
            lambda1p: -0.4,
            lambda2p: 1.1,
            residual_rmse: 0.0,
        };
        let (a, b) = (0.7, -1.3);
        let mix = OodCoeffs {
            lambda1p: a * c1.lambda1p + b * c2.lambda1p,
            lambda2p: a * c1.lambda2p + b * c2.lambda2p,
            residual_rmse: 0.0,
        };
        let p1 = predict_ood(&c1, &pt, &cpt).unwrap();
        let p2 = predict_ood(&c2, &pt, &cpt).unwrap();
        let pm = predict_ood(&mix, &pt, &cpt).unwrap();
        for i in 0..pt.len() {
            let want = a * p1.values[i] + b * p2.values[i];
            assert!((pm.values[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn pt_dominated_mix_follows_pt_direction() {
        // PT loss rises during CPT, CPT loss falls
        let pt = series((0..40).map(|i| 3.0 + 0.01 * i as f64).collect());
        let cpt = series((0..40).map(|i| 2.8 - 0.005 * i as f64).collect());
        let c = OodCoeffs {
            lambda1p: 0.9,
            lambda2p: 0.1,
            residual_rmse: 0.0,
        };
        let p = predict_ood(&c, &pt, &cpt).unwrap();
        assert!(p.values.last().unwrap() > &p.values[0]);
    }
}
