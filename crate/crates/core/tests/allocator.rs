use proptest::prelude::*;
use quept::mixed::{allocate_bruteforce, allocate_dp, Budget, SensitivityTable};
use quept::BitWidth;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_table(seed: u64, layers: usize) -> SensitivityTable<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bits = BitWidth::range(2, 8).unwrap();
    let values = (0..layers)
        .map(|_| (0..bits.len()).map(|_| rng.gen_range(0.0..1.0)).collect())
        .collect();
    SensitivityTable::new(bits, values).unwrap()
}

#[test]
fn dp_matches_exhaustive_search_on_seeded_tables() {
    for seed in 0..20 {
        let table = random_table(seed, 6);
        let target = 2.0 + (seed as f64 % 7.0) * 0.75;
        let budget = Budget::new(target, 6).unwrap();
        let dp = allocate_dp(&table, &budget).unwrap();
        let bf = allocate_bruteforce(&table, &budget).unwrap();
        assert_eq!(dp.objective, bf.objective, "seed {seed}");
        assert_eq!(dp.bits, bf.bits, "seed {seed}");
        assert!(dp.total_bits() <= budget.total_bits());
        assert!(dp.average() <= target);
    }
}

proptest! {
    #[test]
    fn dp_is_optimal_and_feasible(seed in 0u64..10_000, layers in 1usize..=5, target in 2.0f64..=8.0) {
        let table = random_table(seed, layers);
        let budget = Budget::new(target, layers).unwrap();
        let dp = allocate_dp(&table, &budget).unwrap();
        let bf = allocate_bruteforce(&table, &budget).unwrap();
        prop_assert_eq!(dp.objective, bf.objective);
        prop_assert!(dp.total_bits() <= budget.total_bits());
    }

    #[test]
    fn relaxing_budget_never_hurts(seed in 0u64..10_000, layers in 1usize..=6, target in 2.0f64..=7.5) {
        let table = random_table(seed, layers);
        let tight = allocate_dp(&table, &Budget::new(target, layers).unwrap()).unwrap();
        let loose = allocate_dp(&table, &Budget::new(target + 0.5, layers).unwrap()).unwrap();
        prop_assert!(loose.objective <= tight.objective);
    }

    #[test]
    fn bit_monotone_tables_saturate_at_max(seed in 0u64..10_000, layers in 1usize..=6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bits = BitWidth::range(2, 8).unwrap();
        let values: Vec<Vec<f64>> = (0..layers)
            .map(|_| {
                let mut row: Vec<f64> = (0..bits.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
                row.sort_by(|a, b| b.partial_cmp(a).unwrap());
                row
            })
            .collect();
        let min_sum: f64 = values.iter().map(|r| r[r.len() - 1]).fold(0.0, |a, v| a + v);
        let table = SensitivityTable::new(bits, values).unwrap();
        let a = allocate_dp(&table, &Budget::new(8.0, layers).unwrap()).unwrap();
        prop_assert!(a.bits.iter().all(|b| b.bits() == 8));
        prop_assert_eq!(a.objective, min_sum);
    }
}
