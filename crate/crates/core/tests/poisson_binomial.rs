use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use default_risk::poisson_binomial::{
    naive_pi, normal_approx_cdf, pb_cdf, refined_normal_cdf, sample_count, sample_nested_counts,
};

/// CDF by enumerating all `2^n` outcomes.
fn brute_force_cdf(p: &[f64]) -> Vec<f64> {
    let n = p.len();
    let mut pmf = vec![0.0; n + 1];
    for mask in 0u32..(1 << n) {
        let mut prob = 1.0;
        for (i, &pi) in p.iter().enumerate() {
            prob *= if mask >> i & 1 == 1 { pi } else { 1.0 - pi };
        }
        pmf[mask.count_ones() as usize] += prob;
    }
    cumulate(&pmf)
}

/// CDF by sequential convolution of the Bernoulli laws.
fn convolution_cdf(p: &[f64]) -> Vec<f64> {
    let mut pmf = vec![1.0];
    for &pi in p {
        let mut next = vec![0.0; pmf.len() + 1];
        for (k, &w) in pmf.iter().enumerate() {
            next[k] += w * (1.0 - pi);
            next[k + 1] += w * pi;
        }
        pmf = next;
    }
    cumulate(&pmf)
}

fn cumulate(pmf: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    pmf.iter()
        .map(|w| {
            acc += w;
            acc
        })
        .collect()
}

fn binomial_cdf(n: usize, p: f64) -> Vec<f64> {
    let mut choose = 1.0_f64;
    let pmf: Vec<f64> = (0..=n)
        .map(|k| {
            if k > 0 {
                choose = choose * (n - k + 1) as f64 / k as f64;
            }
            choose * p.powi(k as i32) * (1.0 - p).powi((n - k) as i32)
        })
        .collect();
    cumulate(&pmf)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn matches_brute_force_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for case in 0..50 {
        let n = rng.random_range(1..=20);
        let p: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let got = pb_cdf(&p).unwrap();
        let err = max_abs_diff(got.cdf(), &brute_force_cdf(&p));
        assert!(err <= 1e-10, "case {case} (n = {n}): error {err}");
    }
}

#[test]
fn matches_binomial_for_equal_probabilities() {
    for n in 1..=50 {
        for &p in &[0.01, 0.1, 0.37, 0.5, 0.9] {
            let got = pb_cdf(&vec![p; n]).unwrap();
            let err = max_abs_diff(got.cdf(), &binomial_cdf(n, p));
            assert!(err <= 1e-10, "n = {n}, p = {p}: error {err}");
        }
    }
}

#[test]
fn stays_accurate_for_large_portfolios() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p: Vec<f64> = (0..2000).map(|_| rng.random::<f64>() * 0.02).collect();
    let got = pb_cdf(&p).unwrap();
    let want = convolution_cdf(&p);
    assert!(max_abs_diff(got.cdf(), &want) < 1e-10);
    assert!((got.mean() - p.iter().sum::<f64>()).abs() < 1e-8);
    assert!(got.max_imaginary() < 1e-9);
    // far tails must not go negative or exceed one
    assert!(got.cdf().iter().all(|&f| (0.0..=1.0).contains(&f)));
}

#[test]
fn normal_approximations_agree_in_the_bulk() {
    let p: Vec<f64> = (0..400).map(|i| 0.05 + 0.3 * (i as f64 / 400.0)).collect();
    let exact = pb_cdf(&p).unwrap();
    let mean = p.iter().sum::<f64>().round() as usize;
    for k in [mean - 10, mean, mean + 10] {
        let e = exact.cdf()[k];
        assert!((normal_approx_cdf(&p, k).unwrap() - e).abs() < 0.01);
        assert!((refined_normal_cdf(&p, k).unwrap() - e).abs() < 0.005);
    }
}

#[test]
fn sampler_follows_the_exact_law() {
    let p = [0.1, 0.5, 0.3, 0.8, 0.05, 0.6];
    let exact = pb_cdf(&p).unwrap().pmf();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let draws = 200_000;
    let mut hist = vec![0usize; p.len() + 1];
    for _ in 0..draws {
        hist[sample_count(&p, &mut rng).unwrap()] += 1;
    }
    for (k, &c) in hist.iter().enumerate() {
        let f = c as f64 / draws as f64;
        let sd = (exact[k] * (1.0 - exact[k]) / draws as f64).sqrt();
        assert!((f - exact[k]).abs() < 5.0 * sd + 1e-12, "k = {k}: {f} vs {}", exact[k]);
    }
}

#[test]
fn nested_counts_have_exact_marginals() {
    let p = vec![vec![0.1, 0.2, 0.4], vec![0.3, 0.35, 0.5], vec![0.0, 0.05, 0.9]];
    let marginals: Vec<Vec<f64>> = (0..3)
        .map(|h| pb_cdf(&p.iter().map(|r| r[h]).collect::<Vec<_>>()).unwrap().pmf())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let draws = 100_000;
    let mut hist = vec![vec![0usize; 4]; 3];
    for _ in 0..draws {
        let c = sample_nested_counts(&p, 3, &mut rng).unwrap();
        assert!(c.windows(2).all(|w| w[0] <= w[1]));
        for h in 0..3 {
            hist[h][c[h]] += 1;
        }
    }
    for h in 0..3 {
        for k in 0..4 {
            let f = hist[h][k] as f64 / draws as f64;
            let e = marginals[h][k];
            assert!((f - e).abs() < 5.0 * (e * (1.0 - e) / draws as f64).sqrt() + 1e-12);
        }
    }
}

proptest! {
    #[test]
    fn cdf_is_a_distribution(p in prop::collection::vec(0.0f64..=1.0, 0..60)) {
        let d = pb_cdf(&p).unwrap();
        let cdf = d.cdf();
        prop_assert_eq!(cdf.len(), p.len() + 1);
        prop_assert!(cdf.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!((cdf[p.len()] - 1.0).abs() < 1e-10);
        prop_assert!(max_abs_diff(cdf, &convolution_cdf(&p)) < 1e-10);
    }

    #[test]
    fn cdf_ignores_firm_order(mut p in prop::collection::vec(0.0f64..=1.0, 1..40)) {
        let a = pb_cdf(&p).unwrap();
        p.reverse();
        let b = pb_cdf(&p).unwrap();
        prop_assert!(max_abs_diff(a.cdf(), b.cdf()) < 1e-12);
    }

    #[test]
    fn naive_intervals_nest(p in prop::collection::vec(0.0f64..=0.5, 1..80), a1 in 0.01f64..0.5, a2 in 0.01f64..0.5) {
        let (lo_a, hi_a) = (a1.min(a2), a1.max(a2));
        let wide = naive_pi(&p, lo_a).unwrap();
        let narrow = naive_pi(&p, hi_a).unwrap();
        prop_assert!(wide.0 <= narrow.0 && narrow.1 <= wide.1);
        prop_assert!(wide.0 <= wide.1);
    }
}
