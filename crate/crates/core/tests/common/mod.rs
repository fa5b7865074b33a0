#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use softbellman_core::inverse::{project_c, CSet};
use softbellman_core::{AffineRewardParams, PlayerMdp, StackedGame};

pub fn random_distribution<R: Rng>(rng: &mut R, len: usize) -> DVector<f64> {
    let v = DVector::from_fn(len, |_, _| rng.gen_range(0.05..1.0));
    let s = v.sum();
    v / s
}

pub fn random_mdp<R: Rng>(rng: &mut R, n: usize, m: usize) -> PlayerMdp {
    let q = random_distribution(rng, n);
    let t = (0..n)
        .map(|_| {
            let mut block = DMatrix::zeros(m, n);
            for a in 0..m {
                block.set_row(a, &random_distribution(rng, n).transpose());
            }
            block
        })
        .collect();
    PlayerMdp::new(q, t).unwrap()
}

/// Random game with `p` players, up to `n_max` states and `m_max` actions
/// each, `b` in `[-1, 1]` and `C` of scale `c_scale` projected so that
/// `C + Cᵀ ⪯ 0`.
pub fn random_game<R: Rng>(
    rng: &mut R,
    p: usize,
    n_max: usize,
    m_max: usize,
    gamma: f64,
    c_scale: f64,
) -> (StackedGame, AffineRewardParams) {
    let players: Vec<PlayerMdp> = (0..p)
        .map(|_| {
            let n = rng.gen_range(1..=n_max);
            let m = rng.gen_range(1..=m_max);
            random_mdp(rng, n, m)
        })
        .collect();
    let stacked = StackedGame::new(players, gamma);
    let l = stacked.pair_count();
    let b = DVector::from_fn(l, |_, _| rng.gen_range(-1.0..1.0));
    let c = DMatrix::from_fn(l, l, |_, _| rng.gen_range(-c_scale..=c_scale));
    let c = project_c(&c, &CSet::NsdSymmetric).unwrap();
    (stacked, AffineRewardParams::new(b, c).unwrap())
}

pub fn max_symmetric_part_eigenvalue(c: &DMatrix<f64>) -> f64 {
    let sym = (c + c.transpose()) * 0.5;
    softbellman_core::linalg::max_symmetric_eigenvalue(&sym)
}

/// `Y_{sa} = Σ_t γ^t P(S_t = s, A_t = a)` by forward propagation of the
/// state distribution for `horizon` steps (`None` = until the tail is
/// negligible).
pub fn occupancy_by_propagation(
    mdp: &PlayerMdp,
    policy: &DMatrix<f64>,
    gamma: f64,
    horizon: Option<usize>,
) -> DMatrix<f64> {
    let (n, m) = (mdp.states(), mdp.actions());
    let mut dist = mdp.initial().clone();
    let mut y = DMatrix::zeros(n, m);
    let mut weight = 1.0;
    let steps = horizon.unwrap_or_else(|| ((1e-17f64).ln() / gamma.ln()).ceil() as usize);
    for _ in 0..steps {
        let mut next = DVector::zeros(n);
        for s in 0..n {
            for a in 0..m {
                let mass = dist[s] * policy[(s, a)];
                y[(s, a)] += weight * mass;
                for j in 0..n {
                    next[j] += mass * mdp.prob(s, a, j);
                }
            }
        }
        dist = next;
        weight *= gamma;
    }
    y
}
