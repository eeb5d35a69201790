use proptest::prelude::*;
use quept::merge::{merge, merge_batch, select_anchors, token_divergence_report, AnchorSet};
use quept::{MergeCase, MergePolicy, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn triplet(t: usize, d: usize, seed: u64) -> [Tensor<f32>; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    [(); 3].map(|_| Tensor::randn(&[t, d], 1.0, &mut rng))
}

/// Brute-force two-sample K-S statistic: the largest CDF gap evaluated at
/// every observed value.
fn ks_oracle(a: &[f32], b: &[f32]) -> f32 {
    let cdf = |s: &[f32], x: f32| s.iter().filter(|&&v| v <= x).count() as f64 / s.len() as f64;
    a.iter()
        .chain(b)
        .map(|&x| (cdf(a, x) - cdf(b, x)).abs())
        .fold(0.0, f64::max) as f32
}

#[test]
fn selective_degenerate_cases_return_high_bits() {
    let [l, m, h] = triplet(8, 6, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let all = MergePolicy::new(MergeCase::SelectiveMerge, 1.0, [1.0 / 3.0; 3]).unwrap();
    let phi = select_anchors(&h, &l, 1.0).unwrap();
    assert_eq!(merge(&l, &m, &h, &phi, &all, &mut rng).unwrap(), h);
    let none = MergePolicy::new(MergeCase::SelectiveMerge, 0.0, [1.0, 0.0, 0.0]).unwrap();
    assert_eq!(merge(&l, &m, &h, &AnchorSet::empty(), &none, &mut rng).unwrap(), h);
}

#[test]
fn uniform_fusion_is_elementwise_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let [l, m, h] = [(); 3].map(|_| Tensor::<f64>::randn(&[8, 6], 1.0, &mut rng));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = merge(&l, &m, &h, &AnchorSet::empty(), &MergePolicy::case(MergeCase::UniformFusion), &mut rng).unwrap();
    for i in 0..out.numel() {
        let mean = (l.data()[i] + m.data()[i] + h.data()[i]) / 3.0;
        assert!((out.data()[i] - mean).abs() <= 1e-7);
    }
}

#[test]
fn anchor_example() {
    // cosine similarities 0.9, 0.1, 0.8, 0.1
    let h = Tensor::from_rows(&[&[1.0f64, 0.0], &[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0]]).unwrap();
    let sims = [0.9f64, 0.1, 0.8, 0.1];
    let rows: Vec<Vec<f64>> = sims.iter().map(|&c| vec![c, (1.0 - c * c).sqrt()]).collect();
    let l = Tensor::from_rows(&rows.iter().map(Vec::as_slice).collect::<Vec<_>>()).unwrap();
    assert_eq!(select_anchors(&h, &l, 0.5).unwrap().indices(), &[0, 2]);
}

#[test]
fn divergence_identical_and_disjoint() {
    let [x, _, _] = triplet(6, 16, 2);
    assert!(token_divergence_report(&x, &x).unwrap().iter().all(|&(_, s)| s == 0.0));
    let mut shifted = x.clone();
    let d = x.cols();
    for v in &mut shifted.data_mut()[3 * d..4 * d] {
        *v += 10.0;
    }
    let report = token_divergence_report(&x, &shifted).unwrap();
    assert_eq!(report[0], (3, 1.0));
}

#[test]
fn divergence_matches_bruteforce_cdf() {
    for seed in 0..100 {
        let [a, b, _] = triplet(4, 12, seed + 10);
        // half the pairs share a shift so statistics span the range
        let b = b.map(|v| v + (seed % 3) as f32 * 0.7);
        for (k, s) in token_divergence_report(&a, &b).unwrap() {
            let want = ks_oracle(a.row(k), b.row(k));
            assert!((s - want).abs() <= 1e-6, "seed {seed} token {k}: {s} vs {want}");
        }
    }
}

#[test]
fn random_selection_is_seeded() {
    let [l, m, h] = triplet(32, 4, 3);
    let p = MergePolicy::case(MergeCase::RandomSelection);
    let run = |s| merge_batch(&l, &m, &h, 8, &p, &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
    assert_eq!(run(5), run(5));
    assert_ne!(run(5), run(6));
}

fn policies() -> impl Strategy<Value = MergePolicy> {
    (0usize..3, 0.0f64..=1.0, prop::array::uniform3(0.0f64..1.0)).prop_filter_map("lambda sum", |(c, p, lam)| {
        let case = [MergeCase::RandomSelection, MergeCase::UniformFusion, MergeCase::SelectiveMerge][c];
        MergePolicy::new(case, p, lam).ok()
    })
}

proptest! {
    #[test]
    fn merge_preserves_shape_and_hull(policy in policies(), t in 1usize..10, d in 1usize..6, seed in 0u64..500) {
        let [l, m, h] = triplet(t * 2, d, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = merge_batch(&l, &m, &h, t, &policy, &mut rng).unwrap();
        prop_assert_eq!(out.shape(), h.shape());
        for i in 0..out.numel() {
            let v = [l.data()[i], m.data()[i], h.data()[i]];
            let lo = v.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = v.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            prop_assert!(out.data()[i] >= lo && out.data()[i] <= hi);
        }
    }

    #[test]
    fn anchors_copy_high_rows_exactly(p in 0.0f64..=1.0, t in 1usize..12, seed in 0u64..500) {
        let [l, m, h] = triplet(t, 5, seed);
        let policy = MergePolicy::new(MergeCase::SelectiveMerge, p, [0.2, 0.3, 0.5]).unwrap();
        let phi = select_anchors(&h, &l, p).unwrap();
        prop_assert_eq!(phi.len(), ((p * t as f64).round_ties_even() as usize).min(t));
        let out = merge(&l, &m, &h, &phi, &policy, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        for &k in phi.indices() {
            prop_assert_eq!(out.row(k), h.row(k));
        }
    }

    #[test]
    fn ks_statistics_are_in_unit_interval(seed in 0u64..1000) {
        let [a, b, _] = triplet(5, 7, seed);
        for (_, s) in token_divergence_report(&a, &b).unwrap() {
            prop_assert!((0.0..=1.0).contains(&s));
        }
    }
}
