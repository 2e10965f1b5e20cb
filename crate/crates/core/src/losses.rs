//! Per-frame training objectives and their gradients with respect to the
//! distribution parameters produced by the networks.
//!
//! * [`vae_loss`]: `beta * KL(posterior || prior) - log q(target | z)`, the
//!   objective of the speech and noise VAEs (plain VAE at `beta = 1`).
//! * [`pvae_loss`]: the noisy-speech objective. For each latent `k` in
//!   {speech, noise} it adds `KL(p(z_k|y) || p(z_k|clean_k))` and the
//!   log-ratio expectation `E_{z~p(z_k|y)}[log p(z_k|clean_k) - log q(z_k)]`,
//!   then subtracts the reconstruction log-likelihood of `y`.
//! * [`beta_pvae_loss`]: the same with the latent terms weighted by `beta`
//!   and the reconstruction by `alpha`.
//! * [`latent_only_loss`]: `alpha = 0`; no decoder is involved.
//!
//! Clean posteriors are teacher outputs and receive no gradient.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{check_dim, Error, Result};
use crate::gaussian::{
    cross_entropy_grad, cross_entropy_unchecked, kl_grad, kl_unchecked, DiagonalGaussian,
    GaussianGrad,
};

fn ser_gamma<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn de_gamma<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Str(String),
    }
    match Raw::deserialize(d)? {
        Raw::Num(v) => Ok(v),
        Raw::Str(s) if s == "inf" => Ok(f64::INFINITY),
        Raw::Str(s) => Err(serde::de::Error::custom(format!("bad gamma {s:?}"))),
    }
}

/// Every term of a loss evaluation. Single-latent objectives report their
/// KL in `kl_speech`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub kl_speech: f64,
    pub kl_noise: f64,
    /// `E_{z~p(z_x|y)}[log p(z_x|x) - log q(z_x)]`
    pub latent_ratio_speech: f64,
    pub latent_ratio_noise: f64,
    /// Negative log-likelihood of the reconstruction target.
    pub reconstruction: f64,
    pub alpha: f64,
    pub beta: f64,
    /// `beta / alpha`, infinite when `alpha = 0`.
    #[serde(serialize_with = "ser_gamma", deserialize_with = "de_gamma")]
    pub gamma: f64,
}

impl LossBreakdown {
    fn new(alpha: f64, beta: f64) -> Self {
        Self {
            alpha,
            beta,
            gamma: if alpha == 0.0 { f64::INFINITY } else { beta / alpha },
            ..Default::default()
        }
    }

    pub fn latent_terms(&self) -> f64 {
        (self.kl_speech + self.latent_ratio_speech) + (self.kl_noise + self.latent_ratio_noise)
    }

    /// Recomputes the total from the components.
    pub fn weighted_total(&self) -> f64 {
        let latent = self.beta * (self.kl_speech + self.latent_ratio_speech)
            + self.beta * (self.kl_noise + self.latent_ratio_noise);
        if self.alpha == 0.0 {
            latent
        } else {
            latent + self.alpha * self.reconstruction
        }
    }

    fn check_finite(&self) -> Result<()> {
        for (name, v) in [
            ("kl_speech", self.kl_speech),
            ("kl_noise", self.kl_noise),
            ("latent_ratio_speech", self.latent_ratio_speech),
            ("latent_ratio_noise", self.latent_ratio_noise),
            ("reconstruction", self.reconstruction),
            ("total", self.total),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("loss term {name}")));
            }
        }
        Ok(())
    }

    /// Component-wise mean; weights are taken from the first item.
    pub fn mean<'a>(items: impl IntoIterator<Item = &'a LossBreakdown>) -> Option<LossBreakdown> {
        let mut n = 0usize;
        let mut acc = LossBreakdown::default();
        for b in items {
            if n == 0 {
                acc.alpha = b.alpha;
                acc.beta = b.beta;
                acc.gamma = b.gamma;
            }
            acc.total += b.total;
            acc.kl_speech += b.kl_speech;
            acc.kl_noise += b.kl_noise;
            acc.latent_ratio_speech += b.latent_ratio_speech;
            acc.latent_ratio_noise += b.latent_ratio_noise;
            acc.reconstruction += b.reconstruction;
            n += 1;
        }
        if n == 0 {
            return None;
        }
        let k = 1.0 / n as f64;
        acc.total *= k;
        acc.kl_speech *= k;
        acc.kl_noise *= k;
        acc.latent_ratio_speech *= k;
        acc.latent_ratio_noise *= k;
        acc.reconstruction *= k;
        Some(acc)
    }
}

/// How the log-ratio expectations are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExpectationMode {
    /// Closed form via Gaussian cross-entropies.
    #[default]
    Analytic,
    /// One reparameterized sample per latent and frame.
    SingleSample,
}

/// The four latent posteriors entering the noisy-speech objective.
#[derive(Debug, Clone, Copy)]
pub struct LatentPosteriors<'a> {
    /// `p(z_x | y)`
    pub noisy_speech: &'a DiagonalGaussian,
    /// `p(z_d | y)`
    pub noisy_noise: &'a DiagonalGaussian,
    /// `p(z_x | x)`
    pub clean_speech: &'a DiagonalGaussian,
    /// `p(z_d | d)`
    pub clean_noise: &'a DiagonalGaussian,
}

/// Standard-normal draws realizing the expectations in
/// [`ExpectationMode::SingleSample`].
#[derive(Debug, Clone, Copy)]
pub struct LatentNoise<'a> {
    pub speech: &'a [f64],
    pub noise: &'a [f64],
}

/// Decoder likelihood and the frame it should explain.
#[derive(Debug, Clone, Copy)]
pub struct Reconstruction<'a> {
    pub likelihood: &'a DiagonalGaussian,
    pub target: &'a [f64],
}

/// Gradients of a noisy-speech objective. Teacher posteriors get none.
#[derive(Debug, Clone, PartialEq)]
pub struct PvaeGrad {
    pub noisy_speech: GaussianGrad,
    pub noisy_noise: GaussianGrad,
    pub likelihood: Option<GaussianGrad>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeGrad {
    pub posterior: GaussianGrad,
    pub likelihood: GaussianGrad,
}

fn check_reconstruction(r: &Reconstruction<'_>) -> Result<()> {
    check_dim("likelihood target", r.likelihood.dim(), r.target.len())
}

/// `beta * KL(posterior || prior) - log likelihood(target)`.
pub fn vae_loss(
    posterior: &DiagonalGaussian,
    prior: &DiagonalGaussian,
    likelihood: &DiagonalGaussian,
    target: &[f64],
    beta: f64,
) -> Result<LossBreakdown> {
    Ok(vae_loss_grad(posterior, prior, likelihood, target, beta)?.0)
}

pub fn vae_loss_grad(
    posterior: &DiagonalGaussian,
    prior: &DiagonalGaussian,
    likelihood: &DiagonalGaussian,
    target: &[f64],
    beta: f64,
) -> Result<(LossBreakdown, VaeGrad)> {
    if !(beta >= 0.0) {
        return Err(Error::invalid(format!("beta must be >= 0, got {beta}")));
    }
    check_dim("vae prior", posterior.dim(), prior.dim())?;
    check_dim("likelihood target", likelihood.dim(), target.len())?;
    let mut out = LossBreakdown::new(1.0, beta);
    out.kl_speech = kl_unchecked(posterior, prior);
    out.reconstruction = -likelihood.log_pdf_unchecked(target);
    out.total = beta * out.kl_speech + out.reconstruction;
    out.check_finite()?;
    let (g_post, _) = kl_grad(posterior, prior);
    let (g_lik, _) = likelihood.log_pdf_grad(target);
    Ok((
        out,
        VaeGrad {
            posterior: g_post.scaled(beta),
            likelihood: g_lik.scaled(-1.0),
        },
    ))
}

/// KL and log-ratio terms for one latent, plus their gradient with respect
/// to the noisy posterior.
fn latent_pair(
    noisy: &DiagonalGaussian,
    clean: &DiagonalGaussian,
    prior: &DiagonalGaussian,
    eps: Option<&[f64]>,
) -> Result<(f64, f64, GaussianGrad)> {
    check_dim("clean posterior", noisy.dim(), clean.dim())?;
    check_dim("prior", noisy.dim(), prior.dim())?;
    let kl = kl_unchecked(noisy, clean);
    let (mut grad, _) = kl_grad(noisy, clean);
    let ratio = match eps {
        None => {
            // E_p1[log p2 - log q] = H(p1, q) - H(p1, p2)
            let h_prior = cross_entropy_unchecked(noisy, prior);
            let h_clean = cross_entropy_unchecked(noisy, clean);
            let (g_prior, _) = cross_entropy_grad(noisy, prior);
            let (g_clean, _) = cross_entropy_grad(noisy, clean);
            grad.add_scaled(&g_prior, 1.0);
            grad.add_scaled(&g_clean, -1.0);
            h_prior - h_clean
        }
        Some(eps) => {
            check_dim("latent noise", noisy.dim(), eps.len())?;
            let z = noisy.sample(eps)?.value;
            let (_, dz_clean) = clean.log_pdf_grad(&z);
            let (_, dz_prior) = prior.log_pdf_grad(&z);
            let dz: Vec<f64> = dz_clean.iter().zip(&dz_prior).map(|(a, b)| a - b).collect();
            grad.add_scaled(&noisy.sample_grad(eps, &dz), 1.0);
            clean.log_pdf_unchecked(&z) - prior.log_pdf_unchecked(&z)
        }
    };
    Ok((kl, ratio, grad))
}

/// The noisy-speech objective with weights; `reconstruction` must be present
/// iff `alpha > 0`.
pub fn beta_pvae_loss_grad(
    posteriors: LatentPosteriors<'_>,
    prior: &DiagonalGaussian,
    reconstruction: Option<Reconstruction<'_>>,
    alpha: f64,
    beta: f64,
    noise: Option<LatentNoise<'_>>,
) -> Result<(LossBreakdown, PvaeGrad)> {
    if !(alpha >= 0.0 && beta >= 0.0) {
        return Err(Error::invalid(format!(
            "weights must be non-negative, got alpha {alpha} beta {beta}"
        )));
    }
    if alpha == 0.0 && beta == 0.0 {
        return Err(Error::invalid("alpha = beta = 0 is a degenerate objective"));
    }
    check_dim("noise posterior", posteriors.noisy_speech.dim(), posteriors.noisy_noise.dim())?;
    let mut out = LossBreakdown::new(alpha, beta);
    let (kl_s, ratio_s, g_s) = latent_pair(
        posteriors.noisy_speech,
        posteriors.clean_speech,
        prior,
        noise.map(|n| n.speech),
    )?;
    let (kl_n, ratio_n, g_n) = latent_pair(
        posteriors.noisy_noise,
        posteriors.clean_noise,
        prior,
        noise.map(|n| n.noise),
    )?;
    out.kl_speech = kl_s;
    out.latent_ratio_speech = ratio_s;
    out.kl_noise = kl_n;
    out.latent_ratio_noise = ratio_n;
    let latent = beta * (kl_s + ratio_s) + beta * (kl_n + ratio_n);
    let mut grad = PvaeGrad {
        noisy_speech: g_s.scaled(beta),
        noisy_noise: g_n.scaled(beta),
        likelihood: None,
    };
    if alpha == 0.0 {
        out.total = latent;
    } else {
        let r = reconstruction.ok_or_else(|| {
            Error::invalid("alpha > 0 requires a reconstruction likelihood")
        })?;
        check_reconstruction(&r)?;
        out.reconstruction = -r.likelihood.log_pdf_unchecked(r.target);
        out.total = latent + alpha * out.reconstruction;
        grad.likelihood = Some(r.likelihood.log_pdf_grad(r.target).0.scaled(-alpha));
    }
    out.check_finite()?;
    Ok((out, grad))
}

pub fn beta_pvae_loss(
    posteriors: LatentPosteriors<'_>,
    prior: &DiagonalGaussian,
    reconstruction: Option<Reconstruction<'_>>,
    alpha: f64,
    beta: f64,
) -> Result<LossBreakdown> {
    Ok(beta_pvae_loss_grad(posteriors, prior, reconstruction, alpha, beta, None)?.0)
}

/// Unweighted noisy-speech objective (both weights one).
pub fn pvae_loss(
    posteriors: LatentPosteriors<'_>,
    prior: &DiagonalGaussian,
    reconstruction: Reconstruction<'_>,
) -> Result<LossBreakdown> {
    check_reconstruction(&reconstruction)?;
    let (kl_s, ratio_s, _) = latent_pair(posteriors.noisy_speech, posteriors.clean_speech, prior, None)?;
    let (kl_n, ratio_n, _) = latent_pair(posteriors.noisy_noise, posteriors.clean_noise, prior, None)?;
    let mut out = LossBreakdown::new(1.0, 1.0);
    out.kl_speech = kl_s;
    out.latent_ratio_speech = ratio_s;
    out.kl_noise = kl_n;
    out.latent_ratio_noise = ratio_n;
    out.reconstruction = -reconstruction
        .likelihood
        .log_pdf_unchecked(reconstruction.target);
    out.total = (kl_s + ratio_s) + (kl_n + ratio_n) + out.reconstruction;
    out.check_finite()?;
    Ok(out)
}

/// Decoder-free objective: only the weighted latent terms.
pub fn latent_only_loss(
    posteriors: LatentPosteriors<'_>,
    prior: &DiagonalGaussian,
    beta: f64,
) -> Result<LossBreakdown> {
    Ok(latent_only_loss_grad(posteriors, prior, beta, None)?.0)
}

pub fn latent_only_loss_grad(
    posteriors: LatentPosteriors<'_>,
    prior: &DiagonalGaussian,
    beta: f64,
    noise: Option<LatentNoise<'_>>,
) -> Result<(LossBreakdown, PvaeGrad)> {
    if !(beta > 0.0) {
        return Err(Error::invalid(format!("beta must be > 0, got {beta}")));
    }
    beta_pvae_loss_grad(posteriors, prior, None, 0.0, beta, noise)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::{cross_entropy, kl, LN_2PI};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> DiagonalGaussian {
        DiagonalGaussian::new(
            (0..dim).map(|_| rng.gen_range(-1.5..1.5)).collect(),
            (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    struct Fixture {
        ys: DiagonalGaussian,
        yn: DiagonalGaussian,
        cs: DiagonalGaussian,
        cn: DiagonalGaussian,
        prior: DiagonalGaussian,
        lik: DiagonalGaussian,
        target: Vec<f64>,
    }

    impl Fixture {
        fn new(seed: u64) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Self {
                ys: random_gaussian(&mut rng, 4),
                yn: random_gaussian(&mut rng, 4),
                cs: random_gaussian(&mut rng, 4),
                cn: random_gaussian(&mut rng, 4),
                prior: DiagonalGaussian::standard(4),
                lik: random_gaussian(&mut rng, 9),
                target: (0..9).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            }
        }

        fn posteriors(&self) -> LatentPosteriors<'_> {
            LatentPosteriors {
                noisy_speech: &self.ys,
                noisy_noise: &self.yn,
                clean_speech: &self.cs,
                clean_noise: &self.cn,
            }
        }

        fn recon(&self) -> Reconstruction<'_> {
            Reconstruction {
                likelihood: &self.lik,
                target: &self.target,
            }
        }
    }

    #[test]
    fn vae_kl_vanishes_when_posterior_is_prior() {
        let f = Fixture::new(1);
        let b = vae_loss(&f.prior, &f.prior, &f.lik, &f.target, 7.5).unwrap();
        assert_eq!(b.kl_speech, 0.0);
    }

    #[test]
    fn vae_with_unit_beta_is_kl_plus_nll() {
        let f = Fixture::new(2);
        let b = vae_loss(&f.ys, &f.prior, &f.lik, &f.target, 1.0).unwrap();
        let expected = kl(&f.ys, &f.prior).unwrap() - f.lik.log_pdf(&f.target).unwrap();
        assert!((b.total - expected).abs() < 1e-12);
        assert!((b.total - b.weighted_total()).abs() < 1e-9);
    }

    #[test]
    fn reconstruction_at_mean_with_unit_variance() {
        let lik = DiagonalGaussian::new(vec![0.3; 257], vec![0.0; 257]).unwrap();
        let target = vec![0.3; 257];
        let p = DiagonalGaussian::standard(2);
        let b = vae_loss(&p, &p, &lik, &target, 1.0).unwrap();
        assert!((b.reconstruction - 257.0 * 0.5 * LN_2PI).abs() < 1e-9);
    }

    #[test]
    fn negative_beta_is_rejected() {
        let f = Fixture::new(3);
        assert!(vae_loss(&f.ys, &f.prior, &f.lik, &f.target, -1.0).is_err());
    }

    #[test]
    fn non_finite_terms_name_the_offender() {
        let f = Fixture::new(3);
        let lik = DiagonalGaussian {
            mean: vec![0.0; 9],
            log_var: vec![-800.0; 9],
        };
        let err = vae_loss(&f.ys, &f.prior, &lik, &f.target, 1.0).unwrap_err();
        assert!(err.to_string().contains("reconstruction"), "{err}");
    }

    #[test]
    fn matched_posteriors_have_zero_kl() {
        let f = Fixture::new(4);
        let post = LatentPosteriors {
            noisy_speech: &f.cs,
            noisy_noise: &f.cn,
            clean_speech: &f.cs,
            clean_noise: &f.cn,
        };
        let b = pvae_loss(post, &f.prior, f.recon()).unwrap();
        assert_eq!(b.kl_speech, 0.0);
        assert_eq!(b.kl_noise, 0.0);
    }

    #[test]
    fn equivalence_chain() {
        for seed in 0..20 {
            let f = Fixture::new(seed);
            let p = pvae_loss(f.posteriors(), &f.prior, f.recon()).unwrap();
            let b = beta_pvae_loss(f.posteriors(), &f.prior, Some(f.recon()), 1.0, 1.0).unwrap();
            assert!((p.total - b.total).abs() <= 1e-12);
            let beta = 0.5 + seed as f64;
            let z = beta_pvae_loss(f.posteriors(), &f.prior, Some(f.recon()), 0.0, beta).unwrap();
            let l = latent_only_loss(f.posteriors(), &f.prior, beta).unwrap();
            assert!((z.total - l.total).abs() <= 1e-12);
            assert!(z.gamma.is_infinite());
        }
    }

    #[test]
    fn weights_scale_linearly() {
        let f = Fixture::new(5);
        let a = beta_pvae_loss(f.posteriors(), &f.prior, Some(f.recon()), 0.7, 1.3).unwrap();
        let b = beta_pvae_loss(f.posteriors(), &f.prior, Some(f.recon()), 1.4, 2.6).unwrap();
        assert!((2.0 * a.total - b.total).abs() < 1e-10);
        let l1 = latent_only_loss(f.posteriors(), &f.prior, 1.0).unwrap();
        let l2 = latent_only_loss(f.posteriors(), &f.prior, 2.0).unwrap();
        assert_eq!(2.0 * l1.total, l2.total);
        assert!((a.total - a.weighted_total()).abs() < 1e-9);
    }

    #[test]
    fn degenerate_weights_are_rejected() {
        let f = Fixture::new(6);
        assert!(beta_pvae_loss(f.posteriors(), &f.prior, Some(f.recon()), 0.0, 0.0).is_err());
        assert!(latent_only_loss(f.posteriors(), &f.prior, 0.0).is_err());
        assert!(beta_pvae_loss(f.posteriors(), &f.prior, None, 1.0, 1.0).is_err());
    }

    #[test]
    fn latent_only_residual_when_matched() {
        // With p(z|y) = p(z|clean) the KL vanishes and the log-ratio term
        // reduces to H(c, q) - H(c, c) = KL(c || q).
        let f = Fixture::new(7);
        let post = LatentPosteriors {
            noisy_speech: &f.cs,
            noisy_noise: &f.cn,
            clean_speech: &f.cs,
            clean_noise: &f.cn,
        };
        let beta = 3.0;
        let l = latent_only_loss(post, &f.prior, beta).unwrap();
        let hand = |c: &DiagonalGaussian| -> f64 {
            (0..c.dim())
                .map(|i| 0.5 * (c.mean[i].powi(2) + c.log_var[i].exp() - 1.0 - c.log_var[i]))
                .sum()
        };
        let expected = beta * (hand(&f.cs) + hand(&f.cn));
        assert!((l.total - expected).abs() < 1e-10);
        let via_ce = cross_entropy(&f.cs, &f.prior).unwrap() - cross_entropy(&f.cs, &f.cs).unwrap();
        assert!((via_ce - hand(&f.cs)).abs() < 1e-12);
    }

    fn fd_check(f: &Fixture, alpha: f64, beta: f64, noise: Option<LatentNoise<'_>>) {
        let recon = (alpha > 0.0).then(|| f.recon());
        let (_, g) = beta_pvae_loss_grad(f.posteriors(), &f.prior, recon, alpha, beta, noise).unwrap();
        let eval = |ys: &DiagonalGaussian, yn: &DiagonalGaussian, lik: &DiagonalGaussian| {
            let post = LatentPosteriors {
                noisy_speech: ys,
                noisy_noise: yn,
                clean_speech: &f.cs,
                clean_noise: &f.cn,
            };
            let r = (alpha > 0.0).then_some(Reconstruction {
                likelihood: lik,
                target: &f.target,
            });
            beta_pvae_loss_grad(post, &f.prior, r, alpha, beta, noise).unwrap().0.total
        };
        let h = 1e-6;
        for i in 0..4 {
            for field in 0..2 {
                for which in 0..2 {
                    let mut p = (f.ys.clone(), f.yn.clone());
                    let mut m = (f.ys.clone(), f.yn.clone());
                    let (tp, tm) = if which == 0 { (&mut p.0, &mut m.0) } else { (&mut p.1, &mut m.1) };
                    if field == 0 {
                        tp.mean[i] += h;
                        tm.mean[i] -= h;
                    } else {
                        tp.log_var[i] += h;
                        tm.log_var[i] -= h;
                    }
                    let num = (eval(&p.0, &p.1, &f.lik) - eval(&m.0, &m.1, &f.lik)) / (2.0 * h);
                    let gg = if which == 0 { &g.noisy_speech } else { &g.noisy_noise };
                    let ana = if field == 0 { gg.mean[i] } else { gg.log_var[i] };
                    assert!((num - ana).abs() <= 1e-6 * num.abs().max(1.0), "{which} {field} {i}: {num} vs {ana}");
                }
            }
        }
        if alpha > 0.0 {
            let gl = g.likelihood.as_ref().unwrap();
            for i in 0..9 {
                let mut lp = f.lik.clone();
                lp.log_var[i] += h;
                let mut lm = f.lik.clone();
                lm.log_var[i] -= h;
                let num = (eval(&f.ys, &f.yn, &lp) - eval(&f.ys, &f.yn, &lm)) / (2.0 * h);
                assert!((num - gl.log_var[i]).abs() <= 1e-6 * num.abs().max(1.0));
            }
        } else {
            assert!(g.likelihood.is_none());
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let f = Fixture::new(8);
        fd_check(&f, 1.0, 1.0, None);
        fd_check(&f, 1.0, 10.0, None);
        fd_check(&f, 0.0, 1.0, None);
        let eps_s = [0.3, -1.2, 0.8, 0.1];
        let eps_n = [-0.5, 0.4, 1.9, -0.7];
        fd_check(&f, 1.0, 2.0, Some(LatentNoise { speech: &eps_s, noise: &eps_n }));
    }

    #[test]
    fn vae_gradient_matches_finite_differences() {
        let f = Fixture::new(9);
        let (_, g) = vae_loss_grad(&f.ys, &f.prior, &f.lik, &f.target, 2.5).unwrap();
        let h = 1e-6;
        for i in 0..4 {
            let mut p = f.ys.clone();
            p.log_var[i] += h;
            let mut m = f.ys.clone();
            m.log_var[i] -= h;
            let num = (vae_loss(&p, &f.prior, &f.lik, &f.target, 2.5).unwrap().total
                - vae_loss(&m, &f.prior, &f.lik, &f.target, 2.5).unwrap().total)
                / (2.0 * h);
            assert!((num - g.posterior.log_var[i]).abs() < 1e-6 * num.abs().max(1.0));
        }
        for i in 0..9 {
            let mut p = f.lik.clone();
            p.mean[i] += h;
            let mut m = f.lik.clone();
            m.mean[i] -= h;
            let num = (vae_loss(&f.ys, &f.prior, &p, &f.target, 2.5).unwrap().total
                - vae_loss(&f.ys, &f.prior, &m, &f.target, 2.5).unwrap().total)
                / (2.0 * h);
            assert!((num - g.likelihood.mean[i]).abs() < 1e-6 * num.abs().max(1.0));
        }
    }

    #[test]
    fn gamma_serializes_infinity_as_string() {
        let f = Fixture::new(10);
        let l = latent_only_loss(f.posteriors(), &f.prior, 1.0).unwrap();
        let json = serde_json::to_string(&l).unwrap();
        assert!(json.contains("\"gamma\":\"inf\""));
        let back: LossBreakdown = serde_json::from_str(&json).unwrap();
        assert!(back.gamma.is_infinite());
    }
}
