//! Independent reference computations shared by integration tests and the
//! acceptance runner. Nothing here calls the library's density code.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use bpvae::gaussian::DiagonalGaussian;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Log-density of N(mean, exp(log_var)) summed over dimensions, written
/// out from the textbook formula.
pub fn log_density(mean: &[f64], log_var: &[f64], z: &[f64]) -> f64 {
    mean.iter()
        .zip(log_var)
        .zip(z)
        .map(|((m, lv), x)| -0.5 * (LN_2PI + lv + (x - m).powi(2) / lv.exp()))
        .sum()
}

pub fn draw(mean: &[f64], log_var: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    mean.iter()
        .zip(log_var)
        .map(|(m, lv)| m + (0.5 * lv).exp() * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

pub struct McEstimates {
    pub kl: f64,
    pub cross_entropy: f64,
    /// `E_p[log p(z)]`, to be compared with `-entropy`.
    pub neg_entropy: f64,
}

/// Sample means over `n` draws from `p` of `log p - log q`, `-log q` and
/// `log p`.
pub fn monte_carlo(p: &DiagonalGaussian, q: &DiagonalGaussian, n: usize, seed: u64) -> McEstimates {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut kl, mut ce, mut lp) = (0.0, 0.0, 0.0);
    for _ in 0..n {
        let z = draw(&p.mean, &p.log_var, &mut rng);
        let a = log_density(&p.mean, &p.log_var, &z);
        let b = log_density(&q.mean, &q.log_var, &z);
        kl += a - b;
        ce -= b;
        lp += a;
    }
    let n = n as f64;
    McEstimates {
        kl: kl / n,
        cross_entropy: ce / n,
        neg_entropy: lp / n,
    }
}

/// Pairs with clearly separated means so KL is not close to zero and a
/// relative comparison is meaningful.
pub fn fixture_pair(rng: &mut ChaCha8Rng, dim: usize) -> (DiagonalGaussian, DiagonalGaussian) {
    let mut g = |offset: f64| {
        let mean: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0) + offset).collect();
        let lv: Vec<f64> = (0..dim).map(|_| rng.gen_range(-0.7..0.7)).collect();
        DiagonalGaussian::new(mean, lv).unwrap()
    };
    let p = g(0.0);
    let q = g(1.5);
    (p, q)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-12)
}
