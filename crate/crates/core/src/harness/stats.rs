//! Small-sample statistics for comparing strategies across seeds.

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, ContinuousCDF, DiscreteCDF, Normal};

pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty sample");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Distribution-free confidence interval for the median from binomial order
/// statistics. Samples too small for the requested level get `(min, max)`.
pub fn median_ci(values: &[f64], level: f64) -> (f64, f64) {
    assert!(!values.is_empty(), "median CI of an empty sample");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let tail = (1.0 - level) / 2.0;
    let bin = Binomial::new(0.5, n as u64).expect("valid binomial");
    // Largest 1-based rank k with P(X <= k - 1) <= tail.
    let k = (1..=n / 2).take_while(|&k| bin.cdf(k as u64 - 1) <= tail).last();
    match k {
        Some(k) => (v[k - 1], v[n - k]),
        None => (v[0], v[n - 1]),
    }
}

/// Percentile-bootstrap interval for `median(num) / median(den)`, seeded so
/// reports are reproducible.
pub fn median_ratio_ci(num: &[f64], den: &[f64], level: f64, resamples: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ratios: Vec<f64> = (0..resamples)
        .map(|_| {
            let a: Vec<f64> = (0..num.len())
                .map(|_| *num.choose(&mut rng).expect("non-empty"))
                .collect();
            let b: Vec<f64> = (0..den.len())
                .map(|_| *den.choose(&mut rng).expect("non-empty"))
                .collect();
            median(&a) / median(&b)
        })
        .collect();
    ratios.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let at = |q: f64| ratios[((q * (resamples - 1) as f64).round() as usize).min(resamples - 1)];
    (at(tail), at(1.0 - tail))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankSum {
    /// Mann-Whitney U of the first sample.
    pub u: f64,
    pub z: f64,
    pub p_two_sided: f64,
    /// P-value for the first sample being stochastically smaller.
    pub p_less: f64,
}

/// Mann-Whitney rank-sum test, normal approximation with tie and continuity
/// corrections.
pub fn rank_sum(x: &[f64], y: &[f64]) -> RankSum {
    assert!(!x.is_empty() && !y.is_empty(), "rank-sum needs two non-empty samples");
    let (n1, n2) = (x.len() as f64, y.len() as f64);
    let mut all: Vec<(f64, bool)> = x
        .iter()
        .map(|&v| (v, true))
        .chain(y.iter().map(|&v| (v, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = all.len();
    let mut r1 = 0.0;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        r1 += avg_rank * all[i..=j].iter().filter(|e| e.1).count() as f64;
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let u = r1 - n1 * (n1 + 1.0) / 2.0;
    let nn = n1 + n2;
    let mu = n1 * n2 / 2.0;
    let var = n1 * n2 / 12.0 * ((nn + 1.0) - tie_term / (nn * (nn - 1.0)));
    let normal = Normal::standard();
    if var <= 0.0 {
        return RankSum {
            u,
            z: 0.0,
            p_two_sided: 1.0,
            p_less: 1.0,
        };
    }
    let sd = var.sqrt();
    let d = u - mu;
    let z = (d.abs() - 0.5).max(0.0).copysign(d) / sd;
    RankSum {
        u,
        z,
        p_two_sided: (2.0 * normal.sf(z.abs())).min(1.0),
        p_less: normal.cdf((d + 0.5) / sd),
    }
}
