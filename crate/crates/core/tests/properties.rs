mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use softbellman_core::game_model::reward_from_frequencies;
use softbellman_core::inverse::{project_b, project_c, BSet, CSet};
use softbellman_core::{solve_forward, ForwardConfig};

fn game_strategy() -> impl Strategy<Value = (u64, usize, f64)> {
    (any::<u64>(), 1usize..=3, 0.5f64..0.99)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn flow_matrix_columns_sum_to_one_minus_gamma((seed, p, gamma) in game_strategy()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (stacked, _) = common::random_game(&mut rng, p, 6, 4, gamma, 0.0);
        for col in stacked.h.column_iter() {
            prop_assert!((col.sum() - (1.0 - gamma)).abs() < 1e-12);
        }
    }

    #[test]
    fn k_sums_over_actions_of_same_state((seed, p, gamma) in game_strategy()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (stacked, _) = common::random_game(&mut rng, p, 6, 4, gamma, 0.0);
        let layout = stacked.layout().clone();
        let y = DVector::from_fn(stacked.pair_count(), |i, _| 1.0 + i as f64);
        let ky = &stacked.k * &y;
        for block in layout.blocks() {
            for s in 0..block.states {
                let total: f64 = (0..block.actions).map(|a| y[block.pair_index(s, a)]).sum();
                for a in 0..block.actions {
                    prop_assert!((ky[block.pair_index(s, a)] - total).abs() <= 1e-12 * total);
                }
            }
        }
    }

    #[test]
    fn reward_is_affine_in_frequencies((seed, p, gamma) in game_strategy(), t in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (stacked, params) = common::random_game(&mut rng, p, 6, 4, gamma, 1.0);
        let l = stacked.pair_count();
        let y1 = DVector::from_fn(l, |i, _| (i as f64 * 0.37).sin());
        let y2 = DVector::from_fn(l, |i, _| (i as f64 * 0.91).cos());
        let mixed = &y1 * t + &y2 * (1.0 - t);
        let lhs = reward_from_frequencies(&params, &mixed).unwrap();
        let rhs = reward_from_frequencies(&params, &y1).unwrap() * t
            + reward_from_frequencies(&params, &y2).unwrap() * (1.0 - t);
        prop_assert!((lhs - rhs).amax() < 1e-10);
    }

    #[test]
    fn c_projection_is_feasible_and_idempotent(seed in any::<u64>(), l in 1usize..12, scale in 0.01f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = DMatrix::from_fn(l, l, |_, _| rand::Rng::gen_range(&mut rng, -scale..scale));
        let once = project_c(&c, &CSet::NsdSymmetric).unwrap();
        prop_assert!(common::max_symmetric_part_eigenvalue(&once) <= 1e-10 * scale.max(1.0));
        let twice = project_c(&once, &CSet::NsdSymmetric).unwrap();
        prop_assert!((&twice - &once).amax() <= 1e-12 * scale.max(1.0));
        // skew part is untouched
        let skew = |m: &DMatrix<f64>| (m - m.transpose()) * 0.5;
        prop_assert!((skew(&once) - skew(&c)).amax() < 1e-12 * scale.max(1.0));
    }

    #[test]
    fn b_projection_is_idempotent(v in prop::collection::vec(-5.0f64..5.0, 1..10), radius in 0.1f64..3.0) {
        let b = DVector::from_vec(v);
        for set in [BSet::uniform_box(b.len(), -1.0, 0.5), BSet::Ball { radius }] {
            let once = project_b(&b, &set).unwrap();
            let twice = project_b(&once, &set).unwrap();
            prop_assert!((&once - &twice).amax() < 1e-12);
        }
    }

    #[test]
    fn equilibrium_mass_and_positivity((seed, p, gamma) in (any::<u64>(), 1usize..=3, 0.5f64..0.95)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (stacked, params) = common::random_game(&mut rng, p, 5, 3, gamma, 0.5);
        let sol = solve_forward(&stacked, &params, None, &ForwardConfig::default()).unwrap();
        prop_assert!(sol.y.iter().all(|&v| v > 0.0));
        for block in stacked.layout().blocks() {
            let mass: f64 = sol.y.rows(block.pair_offset, block.pairs()).sum();
            prop_assert!((mass - 1.0 / (1.0 - gamma)).abs() < 1e-8);
        }
        for pi in &sol.policies {
            for row in pi.row_iter() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
    }
}
