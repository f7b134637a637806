//! Selection accuracy under a Gaussian score model, against numerical
//! integration of the same model.
//!
//! Classifier log-odds are N(mu, 1) on the target and N(0, 1) elsewhere, with
//! mu set so the per-stimulus AUC is 0.7. After R independent repetitions the
//! summed log-odds are N(R mu, R) and N(0, R), so with K options
//!
//!   P(correct) = integral phi(x) Phi(x + sqrt(R) mu)^(K-1) dx.

use aid_core::intent::{accumulate, one_sided_proportion_p, TrialScores};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

const OPTIONS: usize = 3;
const TRIALS: usize = 100_000;

fn mu_for_auc(auc: f64) -> f64 {
    std::f64::consts::SQRT_2 * Normal::standard().inverse_cdf(auc)
}

/// Composite Simpson on [-12, 12].
fn quadrature_accuracy(mu: f64, reps: usize, k: usize) -> f64 {
    let n = Normal::standard();
    let shift = (reps as f64).sqrt() * mu;
    let f = |x: f64| n.pdf(x) * n.cdf(x + shift).powi(k as i32 - 1);
    let (a, b, m) = (-12.0, 12.0, 4000);
    let h = (b - a) / m as f64;
    let mut s = f(a) + f(b);
    for i in 1..m {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(a + i as f64 * h);
    }
    s * h / 3.0
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn simulated_accuracy(mu: f64, reps: usize, seed: u64) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut correct = 0;
    for trial in 0..TRIALS {
        let target = rng.random_range(0..OPTIONS);
        let scores: Vec<TrialScores> = (0..reps)
            .map(|r| TrialScores {
                trial_id: trial,
                probabilities: (0..OPTIONS)
                    .map(|o| {
                        let z: f64 = rng.sample(StandardNormal);
                        sigmoid(z + if o == target { mu } else { 0.0 })
                    })
                    .collect(),
                repetition_index: r,
            })
            .collect();
        if accumulate(&scores).unwrap().chosen_option == target {
            correct += 1;
        }
    }
    (correct, TRIALS)
}

#[test]
fn auc_point_seven_mu() {
    let mu = mu_for_auc(0.7);
    assert!((Normal::standard().cdf(mu / std::f64::consts::SQRT_2) - 0.7).abs() < 1e-12);
    // one option: the integral is the normalizing constant
    assert!((quadrature_accuracy(mu, 1, 1) - 1.0).abs() < 1e-9);
    // no signal: chance
    assert!((quadrature_accuracy(0.0, 1, OPTIONS) - 1.0 / 3.0).abs() < 1e-9);
}

#[test]
fn gaussian_model_selection_accuracy_matches_quadrature() {
    let mu = mu_for_auc(0.7);
    let (k1, n1) = simulated_accuracy(mu, 1, 1);
    let (k4, n4) = simulated_accuracy(mu, 4, 2);
    let (a1, a4) = (k1 as f64 / n1 as f64, k4 as f64 / n4 as f64);
    let (q1, q4) = (quadrature_accuracy(mu, 1, OPTIONS), quadrature_accuracy(mu, 4, OPTIONS));
    assert!((a1 - q1).abs() < 0.01, "R=1: simulated {a1}, integrated {q1}");
    assert!((a4 - q4).abs() < 0.01, "R=4: simulated {a4}, integrated {q4}");
    assert!(a4 > a1);
    assert!(one_sided_proportion_p(k4, n4, k1, n1) < 0.05);
}
