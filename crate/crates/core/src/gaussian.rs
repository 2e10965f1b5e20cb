//! Diagonal Gaussian densities, reparameterized sampling, KL divergence and
//! cross-entropy, each with its analytic partial derivatives.
//!
//! Distributions are stored as `(mean, log_var)` so that every real vector
//! is a valid parameterization.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// `ln(2 pi)`.
pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalGaussian {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

/// Which distribution a latent sample was drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LatentSource {
    #[default]
    Unspecified,
    Prior,
    CleanSpeech,
    Noise,
    NoisySpeechHead,
    NoisyNoiseHead,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentSample {
    pub value: Vec<f64>,
    pub source: LatentSource,
}

/// Partial derivatives of a scalar with respect to `(mean, log_var)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GaussianGrad {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl GaussianGrad {
    pub fn zeros(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            log_var: vec![0.0; dim],
        }
    }

    pub fn add_scaled(&mut self, other: &GaussianGrad, scale: f64) {
        for (a, b) in self.mean.iter_mut().zip(&other.mean) {
            *a += scale * b;
        }
        for (a, b) in self.log_var.iter_mut().zip(&other.log_var) {
            *a += scale * b;
        }
    }

    pub fn scaled(mut self, scale: f64) -> Self {
        self.mean.iter_mut().for_each(|v| *v *= scale);
        self.log_var.iter_mut().for_each(|v| *v *= scale);
        self
    }
}

impl DiagonalGaussian {
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        check_dim("gaussian log_var", mean.len(), log_var.len())?;
        if let Some(i) = log_var.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("log_var[{i}]")));
        }
        Ok(Self { mean, log_var })
    }

    /// `N(0, I)` of the given dimension.
    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            log_var: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn variance(&self) -> Vec<f64> {
        self.log_var.iter().map(|v| v.exp()).collect()
    }

    /// Reparameterized draw `mean + exp(log_var / 2) * eps`.
    pub fn sample(&self, eps: &[f64]) -> Result<LatentSample> {
        check_dim("sample eps", self.dim(), eps.len())?;
        let value = self
            .mean
            .iter()
            .zip(&self.log_var)
            .zip(eps)
            .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
            .collect();
        Ok(LatentSample {
            value,
            source: LatentSource::Unspecified,
        })
    }

    /// Pulls `d loss / d value` of a [`DiagonalGaussian::sample`] back onto
    /// the distribution parameters.
    pub fn sample_grad(&self, eps: &[f64], d_value: &[f64]) -> GaussianGrad {
        GaussianGrad {
            mean: d_value.to_vec(),
            log_var: self
                .log_var
                .iter()
                .zip(eps)
                .zip(d_value)
                .map(|((lv, e), d)| d * e * 0.5 * (0.5 * lv).exp())
                .collect(),
        }
    }

    pub fn log_pdf(&self, z: &[f64]) -> Result<f64> {
        check_dim("log_pdf point", self.dim(), z.len())?;
        if let Some(i) = z.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("log_pdf point[{i}]")));
        }
        Ok(self.log_pdf_unchecked(z))
    }

    pub(crate) fn log_pdf_unchecked(&self, z: &[f64]) -> f64 {
        self.mean
            .iter()
            .zip(&self.log_var)
            .zip(z)
            .map(|((m, lv), x)| -0.5 * LN_2PI - 0.5 * lv - 0.5 * (x - m).powi(2) / lv.exp())
            .sum()
    }

    /// Returns `(d/d params, d/d z)` of [`DiagonalGaussian::log_pdf`].
    pub fn log_pdf_grad(&self, z: &[f64]) -> (GaussianGrad, Vec<f64>) {
        let mut g = GaussianGrad::zeros(self.dim());
        let mut dz = vec![0.0; self.dim()];
        for i in 0..self.dim() {
            let inv_var = (-self.log_var[i]).exp();
            let diff = z[i] - self.mean[i];
            g.mean[i] = diff * inv_var;
            g.log_var[i] = -0.5 + 0.5 * diff * diff * inv_var;
            dz[i] = -diff * inv_var;
        }
        (g, dz)
    }

    pub fn entropy(&self) -> f64 {
        self.log_var
            .iter()
            .map(|lv| 0.5 * (LN_2PI + lv + 1.0))
            .sum()
    }
}

/// `KL(p || q)` in closed form.
pub fn kl(p: &DiagonalGaussian, q: &DiagonalGaussian) -> Result<f64> {
    check_dim("kl", p.dim(), q.dim())?;
    Ok(kl_unchecked(p, q))
}

pub(crate) fn kl_unchecked(p: &DiagonalGaussian, q: &DiagonalGaussian) -> f64 {
    let mut acc = 0.0;
    for i in 0..p.dim() {
        let (mp, lp, mq, lq) = (p.mean[i], p.log_var[i], q.mean[i], q.log_var[i]);
        acc += 0.5 * (lq - lp) + (lp.exp() + (mp - mq).powi(2)) / (2.0 * lq.exp()) - 0.5;
    }
    acc
}

/// Partial derivatives of `KL(p || q)` with respect to both arguments.
pub fn kl_grad(p: &DiagonalGaussian, q: &DiagonalGaussian) -> (GaussianGrad, GaussianGrad) {
    let n = p.dim();
    let (mut gp, mut gq) = (GaussianGrad::zeros(n), GaussianGrad::zeros(n));
    for i in 0..n {
        let (mp, lp, mq, lq) = (p.mean[i], p.log_var[i], q.mean[i], q.log_var[i]);
        let inv_vq = (-lq).exp();
        let diff = mp - mq;
        gp.mean[i] = diff * inv_vq;
        gq.mean[i] = -diff * inv_vq;
        gp.log_var[i] = -0.5 + 0.5 * lp.exp() * inv_vq;
        gq.log_var[i] = 0.5 - 0.5 * (lp.exp() + diff * diff) * inv_vq;
    }
    (gp, gq)
}

/// `-E_{z~p}[log q(z)]` in closed form.
pub fn cross_entropy(p: &DiagonalGaussian, q: &DiagonalGaussian) -> Result<f64> {
    check_dim("cross_entropy", p.dim(), q.dim())?;
    Ok(cross_entropy_unchecked(p, q))
}

pub(crate) fn cross_entropy_unchecked(p: &DiagonalGaussian, q: &DiagonalGaussian) -> f64 {
    let mut acc = 0.0;
    for i in 0..p.dim() {
        let (mp, lp, mq, lq) = (p.mean[i], p.log_var[i], q.mean[i], q.log_var[i]);
        acc += 0.5 * (LN_2PI + lq + (lp.exp() + (mp - mq).powi(2)) / lq.exp());
    }
    acc
}

pub fn cross_entropy_grad(p: &DiagonalGaussian, q: &DiagonalGaussian) -> (GaussianGrad, GaussianGrad) {
    let n = p.dim();
    let (mut gp, mut gq) = (GaussianGrad::zeros(n), GaussianGrad::zeros(n));
    for i in 0..n {
        let (mp, lp, mq, lq) = (p.mean[i], p.log_var[i], q.mean[i], q.log_var[i]);
        let inv_vq = (-lq).exp();
        let diff = mp - mq;
        gp.mean[i] = diff * inv_vq;
        gq.mean[i] = -diff * inv_vq;
        gp.log_var[i] = 0.5 * lp.exp() * inv_vq;
        gq.log_var[i] = 0.5 - 0.5 * (lp.exp() + diff * diff) * inv_vq;
    }
    (gp, gq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;
    use proptest::prelude::*;

    fn g(mean: &[f64], log_var: &[f64]) -> DiagonalGaussian {
        DiagonalGaussian::new(mean.to_vec(), log_var.to_vec()).unwrap()
    }

    #[test]
    fn ln_2pi_constant() {
        assert!((LN_2PI - (2.0 * PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn zero_eps_returns_mean() {
        let d = g(&[1.0, -2.0], &[0.3, -1.0]);
        assert_eq!(d.sample(&[0.0, 0.0]).unwrap().value, vec![1.0, -2.0]);
    }

    #[test]
    fn unit_variance_adds_eps() {
        let d = g(&[1.0, -2.0], &[0.0, 0.0]);
        assert_eq!(d.sample(&[0.5, 0.25]).unwrap().value, vec![1.5, -1.75]);
    }

    #[test]
    fn sample_dimension_mismatch() {
        let d = g(&[1.0], &[0.0]);
        assert!(matches!(d.sample(&[0.0, 1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn standard_log_pdf_at_zero() {
        let v = DiagonalGaussian::standard(1).log_pdf(&[0.0]).unwrap();
        assert!((v + 0.918_938_533_204_672_7).abs() < 1e-12);
        let v = g(&[2.5], &[0.0]).log_pdf(&[2.5]).unwrap();
        assert!((v + 0.918_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn log_pdf_rejects_non_finite_point() {
        assert!(DiagonalGaussian::standard(2).log_pdf(&[0.0, f64::NAN]).is_err());
    }

    #[test]
    fn kl_closed_form_values() {
        let p = g(&[1.0], &[0.0]);
        let q = DiagonalGaussian::standard(1);
        assert!((kl(&p, &q).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(kl(&q, &q).unwrap(), 0.0);
        let p2 = g(&[0.0], &[2f64.ln()]);
        // 0.5 * (2 - 1 - ln 2)
        assert!((kl(&p2, &q).unwrap() - 0.153_426_409_720_027_3).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_of_standard_normal() {
        let q = DiagonalGaussian::standard(1);
        let v = cross_entropy(&q, &q).unwrap();
        assert!((v - 1.418_938_533_204_672_7).abs() < 1e-12);
        assert!((v - q.entropy()).abs() < 1e-15);
    }

    #[test]
    fn kl_dimension_mismatch() {
        assert!(kl(&DiagonalGaussian::standard(2), &DiagonalGaussian::standard(3)).is_err());
        assert!(cross_entropy(&DiagonalGaussian::standard(2), &DiagonalGaussian::standard(3)).is_err());
    }

    fn arb_gaussian(dim: usize) -> impl Strategy<Value = DiagonalGaussian> {
        (
            proptest::collection::vec(-3.0f64..3.0, dim),
            proptest::collection::vec(-2.0f64..2.0, dim),
        )
            .prop_map(|(m, l)| DiagonalGaussian::new(m, l).unwrap())
    }

    fn central_diff(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-6 * x.abs().max(1.0);
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-6 * a.abs().max(b.abs()) + 1e-8
    }

    proptest! {
        #[test]
        fn kl_nonnegative_and_identity(p in arb_gaussian(5), q in arb_gaussian(5)) {
            let k = kl(&p, &q).unwrap();
            prop_assert!(k >= 0.0);
            prop_assert!(kl(&p, &p).unwrap().abs() <= 1e-12);
            let via_ce = cross_entropy(&p, &q).unwrap() - cross_entropy(&p, &p).unwrap();
            prop_assert!((k - via_ce).abs() <= 1e-10 * k.abs().max(1.0));
        }

        #[test]
        fn kl_and_cross_entropy_gradients(p in arb_gaussian(3), q in arb_gaussian(3)) {
            let (gp, gq) = kl_grad(&p, &q);
            let (hp, hq) = cross_entropy_grad(&p, &q);
            for i in 0..3 {
                for (which, fg, hg) in [(0, &gp, &hp), (1, &gq, &hq)] {
                    for field in 0..2 {
                        let base = if which == 0 { &p } else { &q };
                        let x0 = if field == 0 { base.mean[i] } else { base.log_var[i] };
                        let eval = |f: fn(&DiagonalGaussian, &DiagonalGaussian) -> f64, x: f64| {
                            let mut pp = p.clone();
                            let mut qq = q.clone();
                            let t = if which == 0 { &mut pp } else { &mut qq };
                            if field == 0 { t.mean[i] = x } else { t.log_var[i] = x }
                            f(&pp, &qq)
                        };
                        let num_kl = central_diff(|x| eval(kl_unchecked, x), x0);
                        let num_ce = central_diff(|x| eval(cross_entropy_unchecked, x), x0);
                        let (ana_kl, ana_ce) = if field == 0 { (fg.mean[i], hg.mean[i]) } else { (fg.log_var[i], hg.log_var[i]) };
                        prop_assert!(close(num_kl, ana_kl), "kl {which} {field} {i}: {num_kl} vs {ana_kl}");
                        prop_assert!(close(num_ce, ana_ce), "ce {which} {field} {i}: {num_ce} vs {ana_ce}");
                    }
                }
            }
        }

        #[test]
        fn reparameterized_gradient_matches_finite_differences(
            d in arb_gaussian(4),
            eps in proptest::collection::vec(-2.0f64..2.0, 4),
            target in proptest::collection::vec(-2.0f64..2.0, 4),
        ) {
            // scalar test function f(z) = sum sin(z_i) * t_i + z_i^2
            let f = |z: &[f64]| z.iter().zip(&target).map(|(z, t)| z.sin() * t + z * z).sum::<f64>();
            let z = d.sample(&eps).unwrap().value;
            let dz: Vec<f64> = z.iter().zip(&target).map(|(z, t)| z.cos() * t + 2.0 * z).collect();
            let grad = d.sample_grad(&eps, &dz);
            for i in 0..4 {
                let num_m = central_diff(|x| { let mut dd = d.clone(); dd.mean[i] = x; f(&dd.sample(&eps).unwrap().value) }, d.mean[i]);
                let num_l = central_diff(|x| { let mut dd = d.clone(); dd.log_var[i] = x; f(&dd.sample(&eps).unwrap().value) }, d.log_var[i]);
                prop_assert!(close(num_m, grad.mean[i]));
                prop_assert!(close(num_l, grad.log_var[i]));
            }
        }

        #[test]
        fn log_pdf_gradient(d in arb_gaussian(3), z in proptest::collection::vec(-3.0f64..3.0, 3)) {
            let (g, dz) = d.log_pdf_grad(&z);
            for i in 0..3 {
                let nm = central_diff(|x| { let mut dd = d.clone(); dd.mean[i] = x; dd.log_pdf_unchecked(&z) }, d.mean[i]);
                let nl = central_diff(|x| { let mut dd = d.clone(); dd.log_var[i] = x; dd.log_pdf_unchecked(&z) }, d.log_var[i]);
                let nz = central_diff(|x| { let mut zz = z.clone(); zz[i] = x; d.log_pdf_unchecked(&zz) }, z[i]);
                prop_assert!(close(nm, g.mean[i]));
                prop_assert!(close(nl, g.log_var[i]));
                prop_assert!(close(nz, dz[i]));
            }
        }
    }
}
