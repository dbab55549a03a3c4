mod common;

use common::{chip_mean, chips, matrix, poisson_ln, prior_prob};
use proptest::prelude::*;
use superpos::rates::{
    binary_entropy, in_rate_region, ook_vs_ppm, rate_region, single_layer_rate, single_layer_rate_full,
    sum_rate_mc, symbol_conditional_entropy, RateQuery, DEFAULT_TAIL_EPSILON,
};
use superpos::ChannelConfig;

fn hb(p: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        0.0
    } else {
        -p * p.log2() - (1.0 - p) * (1.0 - p).log2()
    }
}

/// Exact `H(Z_k | Z_others, N)` and `H(Z | N)` in bits by summing over every
/// symbol matrix and every count vector up to `cap` per chip.
fn brute_conditional_entropies(cfg: &ChannelConfig, layer: usize, cap: u64) -> (f64, f64) {
    let (l, m) = (cfg.layers(), cfg.symbols());
    let t = chips(cfg);
    let mats: Vec<_> = (0..1usize << (l * m)).map(|k| matrix(l, m, k)).collect();
    let prior: Vec<f64> = mats.iter().map(|z| prior_prob(cfg, z)).collect();
    // pmf[k][c][n]
    let pmf: Vec<Vec<Vec<f64>>> = mats
        .iter()
        .map(|z| {
            (0..t)
                .map(|c| (0..=cap).map(|n| poisson_ln(n, chip_mean(cfg, z, c)).exp()).collect())
                .collect()
        })
        .collect();
    let row_mask: usize = ((1usize << m) - 1) << (layer * m);
    let mut h_layer = 0.0;
    let mut h_all = 0.0;
    let mut n = vec![0usize; t];
    let mut joint = vec![0.0; mats.len()];
    loop {
        for (k, j) in joint.iter_mut().enumerate() {
            *j = prior[k] * (0..t).map(|c| pmf[k][c][n[c]]).product::<f64>();
        }
        let evidence: f64 = joint.iter().sum();
        for (k, &pj) in joint.iter().enumerate() {
            if pj <= 0.0 {
                continue;
            }
            let others = k & !row_mask;
            let given_others: f64 = joint
                .iter()
                .enumerate()
                .filter(|(k2, _)| k2 & !row_mask == others)
                .map(|(_, p)| p)
                .sum();
            h_layer -= pj * (pj / given_others).log2();
            h_all -= pj * (pj / evidence).log2();
        }
        let mut d = 0;
        loop {
            if d == t {
                return (h_layer, h_all);
            }
            n[d] += 1;
            if n[d] as u64 <= cap {
                break;
            }
            n[d] = 0;
            d += 1;
        }
    }
}

fn small_channel() -> ChannelConfig {
    ChannelConfig::new(2, 2, vec![0.4, 0.6], vec![2.0, 1.5], 0.1, vec![0.5, 0.3, 0.6, 0.5], false).unwrap()
}

#[test]
fn single_layer_rate_matches_exhaustive_mutual_information() {
    let cfg = small_channel();
    for layer in 0..2 {
        let (h_cond, _) = brute_conditional_entropies(&cfg, layer, 14);
        let h_in: f64 = (0..2).map(|j| hb(cfg.prior(layer, j))).sum();
        let expected = (h_in - h_cond) / 2.0;
        let got = single_layer_rate_full(&cfg, layer, DEFAULT_TAIL_EPSILON).unwrap();
        assert!(
            (got.rate_bits_per_symbol - expected).abs() < 1e-6,
            "layer {layer}: {} vs {expected}",
            got.rate_bits_per_symbol
        );
    }
}

#[test]
fn sum_rate_estimate_brackets_exact_value() {
    let cfg = small_channel();
    let (_, h_cond) = brute_conditional_entropies(&cfg, 0, 14);
    let h_in: f64 = cfg.priors().iter().map(|&q| hb(q)).sum();
    let exact = (h_in - h_cond) / 2.0;
    let est = sum_rate_mc(&cfg, &RateQuery::all_layers(&cfg, 20_000, 3)).unwrap();
    assert!(
        (est.rate_bits_per_symbol - exact).abs() < 4.0 * est.std_error + 1e-9,
        "{} ± {} vs {exact}",
        est.rate_bits_per_symbol,
        est.std_error
    );
}

#[test]
fn conditional_subset_rate_brackets_single_layer_rate() {
    let cfg = small_channel();
    for layer in 0..2 {
        let exact = single_layer_rate_full(&cfg, layer, DEFAULT_TAIL_EPSILON).unwrap().rate_bits_per_symbol;
        let query = RateQuery {
            layer_set: vec![layer],
            mc_samples: 20_000,
            tail_epsilon: DEFAULT_TAIL_EPSILON,
            seed: 9,
        };
        let est = sum_rate_mc(&cfg, &query).unwrap();
        assert!(
            (est.rate_bits_per_symbol - exact).abs() < 4.0 * est.std_error + 1e-9,
            "layer {layer}: {} ± {} vs {exact}",
            est.rate_bits_per_symbol,
            est.std_error
        );
    }
}

#[test]
fn rate_region_faces() {
    let cfg = small_channel();
    let region = rate_region(&cfg, 4000, 2).unwrap();
    assert_eq!(region.iter().map(|c| c.layers.clone()).collect::<Vec<_>>(), vec![vec![0], vec![1], vec![0, 1]]);
    let r: Vec<f64> = region.iter().map(|c| c.bound.rate_bits_per_symbol).collect();
    // Conditioning on the other layer can only help each layer.
    assert!(r[0] <= r[2] + 1e-12 && r[1] <= r[2] + 1e-12);
    assert!(in_rate_region(&[0.5 * r[0], 0.5 * r[1]], &region, 0.0));
    assert!(!in_rate_region(&[r[0] + 0.1, 0.0], &region, 2.0));

    let bad = |set: Vec<usize>| RateQuery { layer_set: set, mc_samples: 10, tail_epsilon: DEFAULT_TAIL_EPSILON, seed: 0 };
    assert!(sum_rate_mc(&cfg, &bad(vec![])).is_err());
    assert!(sum_rate_mc(&cfg, &bad(vec![0, 0])).is_err());
    assert!(sum_rate_mc(&cfg, &bad(vec![2])).is_err());
}

/// `I(Z_{1,j}; N | Z_others)` for an interior symbol of a two-layer equal-rate
/// channel: the symbol spans two chips, each shared with one neighbour of the
/// other layer, so average over both neighbours and sum counts up to `cap`.
fn interior_symbol_information(lambda: f64, bg: f64, rho: f64, q: f64, cap: u64) -> f64 {
    let taus = [rho, 1.0 - rho];
    let mut info = 0.0;
    for nb in 0..4u32 {
        let others = [f64::from(nb & 1), f64::from(nb >> 1 & 1)];
        let w_nb = [1.0 - q, q][(nb & 1) as usize] * [1.0 - q, q][(nb >> 1) as usize];
        for n0 in 0..=cap {
            for n1 in 0..=cap {
                let lik = |z: f64| -> f64 {
                    (0..2)
                        .map(|c| {
                            let mean = taus[c] * (bg + lambda * (z + others[c]));
                            poisson_ln([n0, n1][c], mean)
                        })
                        .sum::<f64>()
                        .exp()
                };
                let (p0, p1) = ((1.0 - q) * lik(0.0), q * lik(1.0));
                let evidence = p0 + p1;
                for p in [p0, p1] {
                    if p > 0.0 {
                        info += w_nb * p * (p / evidence).log2();
                    }
                }
            }
        }
    }
    hb(q) + info
}

#[test]
fn interior_symbol_rate_matches_direct_sum() {
    let expected = interior_symbol_information(10.0, 0.01, 0.5, 0.5, 60);
    // Long frame: boundary symbols contribute O(1/M).
    let m = 4000;
    let cfg = ChannelConfig::symmetric(2, m, 10.0, 0.01, 0.5).unwrap();
    let got = single_layer_rate(&cfg, 0, DEFAULT_TAIL_EPSILON).unwrap().rate_bits_per_symbol;
    assert!((got - expected).abs() < 2.0 / m as f64, "{got} vs {expected}");
    // Every non-leading symbol of a uniform frame has the same term.
    let short = ChannelConfig::symmetric(2, 6, 10.0, 0.01, 0.5).unwrap();
    let term = |j| symbol_conditional_entropy(&short, 0, j, DEFAULT_TAIL_EPSILON).unwrap().bits;
    for j in 2..6 {
        assert!((term(j) - term(1)).abs() < 1e-12);
    }
    assert!((1.0 - term(1) - expected).abs() < 1e-9);
}

#[test]
fn sum_rate_grows_with_intensity_under_common_draws() {
    let mut prev: Option<superpos::rates::RateResult> = None;
    for lambda in [1.0, 2.0, 4.0, 8.0] {
        let cfg = ChannelConfig::symmetric(2, 64, lambda, 0.1, 0.5).unwrap();
        let r = sum_rate_mc(&cfg, &RateQuery::all_layers(&cfg, 200, 17)).unwrap();
        if let Some(p) = prev {
            let slack = 2.0 * (p.std_error + r.std_error);
            assert!(r.rate_bits_per_symbol + slack >= p.rate_bits_per_symbol, "{p:?} then {r:?}");
        }
        prev = Some(r);
    }
}

#[test]
fn binary_entropy_values() {
    assert_eq!(binary_entropy(0.0).unwrap(), 0.0);
    assert_eq!(binary_entropy(1.0).unwrap(), 0.0);
    assert!((binary_entropy(0.5).unwrap() - 1.0).abs() < 1e-15);
    assert!((binary_entropy(0.11).unwrap() - hb(0.11)).abs() < 1e-15);
    assert!(binary_entropy(1.5).is_err());
}

#[test]
fn ook_without_background_is_a_z_channel() {
    for &lambda in &[0.1, 1.0, 3.0] {
        let grid = 99;
        let off = f64::exp(-lambda);
        let expected = (1..=grid)
            .map(|i| {
                let q = i as f64 / (grid + 1) as f64;
                hb(q * (1.0 - off)) - q * hb(off)
            })
            .fold(f64::NEG_INFINITY, f64::max);
        let got = ook_vs_ppm(lambda, 0.0, grid, 9, DEFAULT_TAIL_EPSILON).unwrap();
        assert!((got.ook_bits - expected).abs() < 1e-7, "{} vs {expected}", got.ook_bits);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn single_layer_rate_bounded_and_increasing(lambda in 0.1f64..8.0, step in 0.1f64..3.0, q in 0.1f64..0.9) {
        let at = |l: f64| {
            let cfg = ChannelConfig::symmetric(2, 4, l, 0.05, q).unwrap();
            single_layer_rate(&cfg, 0, DEFAULT_TAIL_EPSILON).unwrap().rate_bits_per_symbol
        };
        let (a, b) = (at(lambda), at(lambda + step));
        prop_assert!(a >= 0.0 && a <= hb(q) + 1e-12);
        prop_assert!(b + 1e-9 >= a, "{} then {}", a, b);
    }
}
