//! Closed-form Gaussian quantities against sampling estimates.

mod common;

use bpvae::gaussian::{cross_entropy, kl, DiagonalGaussian};
use common::{fixture_pair, log_density, monte_carlo, rel_err};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn closed_forms_match_sampling_within_one_percent() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for i in 0..5 {
        let (p, q) = fixture_pair(&mut rng, 4);
        let mc = monte_carlo(&p, &q, 200_000, 100 + i);
        assert!(rel_err(kl(&p, &q).unwrap(), mc.kl) < 0.01, "fixture {i} kl");
        assert!(rel_err(cross_entropy(&p, &q).unwrap(), mc.cross_entropy) < 0.01, "fixture {i} ce");
        assert!(rel_err(-p.entropy(), mc.neg_entropy) < 0.01, "fixture {i} entropy");
    }
}

#[test]
fn log_pdf_matches_textbook_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let (p, _) = fixture_pair(&mut rng, 6);
        let z: Vec<f64> = (0..6).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let want = log_density(&p.mean, &p.log_var, &z);
        assert!((p.log_pdf(&z).unwrap() - want).abs() < 1e-12 * want.abs().max(1.0));
    }
}

#[test]
fn kl_of_identical_distributions_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let (p, _) = fixture_pair(&mut rng, 16);
        assert!(kl(&p, &p).unwrap().abs() <= 1e-12);
    }
    assert_eq!(kl(&DiagonalGaussian::standard(3), &DiagonalGaussian::standard(3)).unwrap(), 0.0);
}
