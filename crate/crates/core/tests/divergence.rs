use neighborwise::classifier::ProbabilityVector;
use neighborwise::masked::{kl_divergence, sym_divergence};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};

/// Uniform draw from the simplex via normalized exponentials.
fn simplex(k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let e: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn pv(v: Vec<f64>) -> ProbabilityVector {
    ProbabilityVector::new(v).unwrap()
}

/// Independent evaluation of the symmetric KL written as
/// `½ Σ (p − q)(ln p − ln q)`.
fn oracle(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(&a, &b)| (a - b) * (a.max(1e-12).ln() - b.max(1e-12).ln())).sum::<f64>()
}

#[test]
fn worked_pair() {
    let (p, q) = (pv(vec![0.5, 0.5]), pv(vec![0.9, 0.1]));
    let expected = 0.5 * (0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln() + 0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln());
    assert!((expected - 0.439_445).abs() < 1e-6);
    assert!((sym_divergence(&p, &q).unwrap() - 0.439_445).abs() < 1e-6);
}

#[test]
fn random_simplex_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..1000 {
        let k = rng.random_range(2..=10);
        let (a, b) = (simplex(k, &mut rng), simplex(k, &mut rng));
        let (p, q) = (pv(a.clone()), pv(b.clone()));
        let pq = sym_divergence(&p, &q).unwrap();
        assert_eq!(pq.to_bits(), sym_divergence(&q, &p).unwrap().to_bits());
        assert!(pq >= -1e-9);
        assert!((pq - oracle(&a, &b)).abs() <= 1e-9 * (1.0 + pq));
        assert_eq!(sym_divergence(&p, &p).unwrap(), 0.0);
    }
}

#[test]
fn confident_mistakes_stay_finite() {
    let (p, q) = (pv(vec![1.0, 0.0, 0.0]), pv(vec![0.0, 0.0, 1.0]));
    let d = sym_divergence(&p, &q).unwrap();
    assert!(d.is_finite());
    assert!((d - 1e-12f64.ln().abs()).abs() < 1e-9);
    assert_eq!(sym_divergence(&p, &p).unwrap(), 0.0);
}

#[test]
fn length_mismatch_is_rejected() {
    assert!(kl_divergence(&pv(vec![0.5, 0.5]), &pv(vec![0.2, 0.3, 0.5])).is_err());
}

fn simplex_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..8).prop_flat_map(|k| (prop::collection::vec(0.01f64..1.0, k), prop::collection::vec(0.01f64..1.0, k))).prop_map(|(a, b)| {
        let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
        (a.iter().map(|v| v / sa).collect(), b.iter().map(|v| v / sb).collect())
    })
}

proptest! {
    #[test]
    fn kl_is_non_negative((a, b) in simplex_strategy()) {
        prop_assert!(kl_divergence(&pv(a.clone()), &pv(b.clone())).unwrap() >= -1e-12);
        prop_assert!(kl_divergence(&pv(b), &pv(a)).unwrap() >= -1e-12);
    }

    #[test]
    fn symmetric_divergence_is_mean_of_directions((a, b) in simplex_strategy()) {
        let (p, q) = (pv(a), pv(b));
        let mean = (kl_divergence(&p, &q).unwrap() + kl_divergence(&q, &p).unwrap()) / 2.0;
        prop_assert_eq!(sym_divergence(&p, &q).unwrap(), mean);
    }
}
