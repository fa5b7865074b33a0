//! Problem instances shared by the benchmarks.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use softbellman_core::gridworld::{build_game, CouplingConfig, GridSpec};
use softbellman_core::inverse::{project_c, CSet};
use softbellman_core::{build_stacked, AffineRewardParams, PlayerMdp, StackedGame};

/// Random game with `players` players of `n` states and `m` actions each.
pub fn random_instance(players: usize, n: usize, m: usize, seed: u64) -> (StackedGame, AffineRewardParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mdps: Vec<PlayerMdp> = (0..players)
        .map(|_| {
            let q = normalized(DVector::from_fn(n, |_, _| rng.gen_range(0.1..1.0)));
            let t = (0..n)
                .map(|_| {
                    let mut block = DMatrix::from_fn(m, n, |_, _| rng.gen_range(0.0..1.0));
                    for mut row in block.row_iter_mut() {
                        let s = row.sum();
                        row /= s;
                    }
                    block
                })
                .collect();
            PlayerMdp::new(q, t).expect("valid mdp")
        })
        .collect();
    let stacked = StackedGame::new(mdps, 0.9);
    let l = stacked.pair_count();
    let b = DVector::from_fn(l, |_, _| rng.gen_range(-1.0..1.0));
    let c = DMatrix::from_fn(l, l, |_, _| rng.gen_range(-0.1..0.1));
    let c = project_c(&c, &CSet::NsdSymmetric).expect("square");
    (stacked, AffineRewardParams::new(b, c).expect("dimensions"))
}

fn normalized(v: DVector<f64>) -> DVector<f64> {
    let s = v.sum();
    v / s
}

/// Predator-prey game on a `size × size` grid with two predators.
pub fn gridworld_instance(size: usize) -> (StackedGame, AffineRewardParams) {
    let spec = GridSpec::predator_prey(size, size, 2, 0.1);
    let game = build_game(&spec, 0.99, &CouplingConfig::default()).expect("valid grid");
    (build_stacked(&game).expect("valid game"), game.params)
}
