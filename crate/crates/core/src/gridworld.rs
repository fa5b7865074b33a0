//! Predator-prey gridworld: per-player MDPs, a coupled reward construction,
//! and trajectory sampling.
//!
//! Every player moves on its own copy of the grid (states are cells,
//! row-major), so dynamics are independent; interaction enters only through
//! the coupling matrix and through episode termination.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game_model::{AffineGame, AffineRewardParams, Layout, PlayerMdp};
use crate::inverse::{project_c, CSet};
use crate::trajectories::Trajectory;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Predator,
    Prey,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    Left,
    Right,
    Up,
    Down,
    Stop,
}

pub const ACTIONS: [Action; 5] = [Action::Left, Action::Right, Action::Up, Action::Down, Action::Stop];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    /// One entry per player, in player order.
    pub roles: Vec<Role>,
    /// Probability that the chosen move is replaced by a uniformly random one.
    pub slip: f64,
    /// Manhattan radius of a predator's catching region.
    pub catch_radius: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self::predator_prey(5, 5, 2, 0.1)
    }
}

impl GridSpec {
    /// `predators` predators followed by one prey.
    pub fn predator_prey(width: usize, height: usize, predators: usize, slip: f64) -> Self {
        let mut roles = vec![Role::Predator; predators];
        roles.push(Role::Prey);
        Self {
            width,
            height,
            roles,
            slip,
            catch_radius: 1,
        }
    }

    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    pub fn players(&self) -> usize {
        self.roles.len()
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&vec![(self.cells(), ACTIONS.len()); self.players()])
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    pub fn cell(&self, index: usize) -> (usize, usize) {
        (index / self.width, index % self.width)
    }

    pub fn distance(&self, a: usize, b: usize) -> usize {
        let ((r1, c1), (r2, c2)) = (self.cell(a), self.cell(b));
        r1.abs_diff(r2) + c1.abs_diff(c2)
    }

    /// Deterministic move with wall clipping.
    pub fn step(&self, state: usize, action: Action) -> usize {
        let (row, col) = self.cell(state);
        let (row, col) = match action {
            Action::Left => (row, col.saturating_sub(1)),
            Action::Right => (row, (col + 1).min(self.width - 1)),
            Action::Up => (row.saturating_sub(1), col),
            Action::Down => ((row + 1).min(self.height - 1), col),
            Action::Stop => (row, col),
        };
        self.index(row, col)
    }

    fn predators(&self) -> impl Iterator<Item = usize> + '_ {
        self.roles.iter().enumerate().filter(|(_, r)| **r == Role::Predator).map(|(i, _)| i)
    }

    fn prey(&self) -> impl Iterator<Item = usize> + '_ {
        self.roles.iter().enumerate().filter(|(_, r)| **r == Role::Prey).map(|(i, _)| i)
    }

    /// True when some prey sits inside the catching regions of at least two
    /// predators (or of the only predator, if there is one).
    pub fn caught(&self, positions: &[usize]) -> bool {
        let needed = self.predators().count().min(2);
        if needed == 0 {
            return false;
        }
        self.prey().any(|prey| {
            self.predators()
                .filter(|&p| self.distance(positions[p], positions[prey]) <= self.catch_radius)
                .count()
                >= needed
        })
    }
}

/// The per-player MDP: deterministic clipped moves mixed with slip, uniform
/// initial cell.
pub fn build_player_mdp(spec: &GridSpec) -> PlayerMdp {
    let n = spec.cells();
    let m = ACTIONS.len();
    let transitions = (0..n)
        .map(|s| {
            let mut t = DMatrix::zeros(m, n);
            for (a, &action) in ACTIONS.iter().enumerate() {
                t[(a, spec.step(s, action))] += 1.0 - spec.slip;
                for &other in &ACTIONS {
                    t[(a, spec.step(s, other))] += spec.slip / m as f64;
                }
            }
            t
        })
        .collect();
    PlayerMdp::new(DVector::from_element(n, 1.0 / n as f64), transitions)
        .expect("grid dimensions are consistent")
}

/// Magnitudes for [`build_coupled_rewards`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CouplingConfig {
    /// Scale of the predator/prey proximity coupling.
    pub kappa: f64,
    /// Diagonal blocks are `−eta·I`.
    pub eta: f64,
    /// Peak predator reward for standing at the grid center.
    pub center_bonus: f64,
}

impl Default for CouplingConfig {
    fn default() -> Self {
        Self {
            kappa: 0.05,
            eta: 1e-3,
            center_bonus: 0.1,
        }
    }
}

/// 1 on the same cell, 1/2 inside the catching radius, 0 elsewhere.
fn proximity(spec: &GridSpec, a: usize, b: usize) -> f64 {
    match spec.distance(a, b) {
        0 => 1.0,
        d if d <= spec.catch_radius => 0.5,
        _ => 0.0,
    }
}

/// Ground-truth coupled rewards: predators are rewarded for prey frequency
/// near their cell, the prey is penalized by the mirror image, so the
/// predator/prey blocks are skew and `C + Cᵀ = −2η·I`.
pub fn build_coupled_rewards(spec: &GridSpec, config: &CouplingConfig) -> Result<AffineRewardParams> {
    let layout = spec.layout();
    let l = layout.pair_count();
    let m = ACTIONS.len();
    let n = spec.cells();

    let (center_r, center_c) = ((spec.height - 1) as f64 / 2.0, (spec.width - 1) as f64 / 2.0);
    let center_dist = |s: usize| {
        let (r, c) = spec.cell(s);
        (r as f64 - center_r).abs() + (c as f64 - center_c).abs()
    };
    let max_dist = (0..n).map(center_dist).fold(0.0, f64::max).max(1.0);

    let mut b = DVector::zeros(l);
    let mut c = DMatrix::zeros(l, l);
    for (i, role) in spec.roles.iter().enumerate() {
        let bi = layout.block(i);
        for s in 0..n {
            for a in 0..m {
                let row = bi.pair_index(s, a);
                c[(row, row)] = -config.eta;
                if *role == Role::Predator {
                    b[row] = config.center_bonus * (1.0 - center_dist(s) / max_dist);
                }
            }
        }
    }
    for pred in spec.predators() {
        for prey in spec.prey() {
            let (bp, bq) = (layout.block(pred), layout.block(prey));
            for s in 0..n {
                for s2 in 0..n {
                    let w = config.kappa * proximity(spec, s, s2);
                    if w == 0.0 {
                        continue;
                    }
                    for a in 0..m {
                        for a2 in 0..m {
                            c[(bp.pair_index(s, a), bq.pair_index(s2, a2))] = w;
                            c[(bq.pair_index(s2, a2), bp.pair_index(s, a))] = -w;
                        }
                    }
                }
            }
        }
    }
    let c = project_c(&c, &CSet::NsdSymmetric)?;
    AffineRewardParams::new(b, c)
}

/// Gridworld players with the coupled ground-truth rewards.
pub fn build_game(spec: &GridSpec, gamma: f64, coupling: &CouplingConfig) -> Result<AffineGame> {
    let mdp = build_player_mdp(spec);
    let players = vec![mdp; spec.players()];
    Ok(AffineGame::new(players, gamma, build_coupled_rewards(spec, coupling)?))
}

fn sample_index<R: Rng>(rng: &mut R, weights: impl Iterator<Item = f64>) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, w) in weights.enumerate() {
        acc += w;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

fn episode_rng(seed: u64, episode: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(episode as u64);
    rng
}

/// How players choose actions during simulation.
#[derive(Clone, Debug)]
pub enum Behavior {
    /// Stationary per-player policies (`n × m` each).
    Policies(Vec<DMatrix<f64>>),
    /// Hand-written pursuit/evasion: predators close in on the prey with
    /// probability `1 − noise`; the prey never chooses a move into a
    /// predator's catching region.
    Scripted { noise: f64 },
}

impl Behavior {
    fn check(&self, spec: &GridSpec) -> Result<()> {
        if let Behavior::Policies(p) = self {
            if p.len() != spec.players() {
                return Err(Error::Dimension {
                    what: "policy count",
                    expected: spec.players(),
                    actual: p.len(),
                });
            }
            for policy in p {
                if policy.shape() != (spec.cells(), ACTIONS.len()) {
                    return Err(Error::Dimension {
                        what: "policy rows",
                        expected: spec.cells(),
                        actual: policy.nrows(),
                    });
                }
                for (row, r) in policy.row_iter().enumerate() {
                    let sum = r.sum();
                    if (sum - 1.0).abs() > 1e-9 || r.iter().any(|&x| x < 0.0) {
                        return Err(Error::NotDistribution {
                            what: "policy",
                            row,
                            sum,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    fn choose<R: Rng>(&self, spec: &GridSpec, rng: &mut R, player: usize, positions: &[usize]) -> usize {
        match self {
            Behavior::Policies(p) => sample_index(rng, p[player].row(positions[player]).iter().copied()),
            Behavior::Scripted { noise } => {
                let here = positions[player];
                match spec.roles[player] {
                    Role::Predator => {
                        if rng.gen::<f64>() < *noise {
                            return rng.gen_range(0..ACTIONS.len());
                        }
                        let prey = spec.prey().next().map(|q| positions[q]);
                        match prey {
                            Some(target) => (0..ACTIONS.len())
                                .min_by_key(|&a| spec.distance(spec.step(here, ACTIONS[a]), target))
                                .expect("actions non-empty"),
                            None => rng.gen_range(0..ACTIONS.len()),
                        }
                    }
                    Role::Prey => {
                        let safe: Vec<usize> = (0..ACTIONS.len())
                            .filter(|&a| {
                                let next = spec.step(here, ACTIONS[a]);
                                spec.predators().all(|p| {
                                    spec.distance(next, positions[p]) > spec.catch_radius
                                })
                            })
                            .collect();
                        if safe.is_empty() {
                            ACTIONS.len() - 1
                        } else {
                            safe[rng.gen_range(0..safe.len())]
                        }
                    }
                }
            }
        }
    }
}

fn simulate_episode(
    spec: &GridSpec,
    players: &[PlayerMdp],
    behavior: &Behavior,
    max_len: usize,
    seed: u64,
    episode: usize,
) -> Trajectory {
    let mut rng = episode_rng(seed, episode);
    let p = players.len();
    let mut positions: Vec<usize> = players
        .iter()
        .map(|mdp| sample_index(&mut rng, mdp.initial().iter().copied()))
        .collect();
    let mut steps = vec![Vec::with_capacity(max_len); p];
    for _ in 0..max_len {
        let actions: Vec<usize> = (0..p)
            .map(|i| behavior.choose(spec, &mut rng, i, &positions))
            .collect();
        for i in 0..p {
            steps[i].push((positions[i], actions[i]));
        }
        for i in 0..p {
            let row = players[i].transitions_from(positions[i]).row(actions[i]);
            positions[i] = sample_index(&mut rng, row.iter().copied());
        }
        if spec.caught(&positions) {
            break;
        }
    }
    Trajectory { players: steps }
}

/// Samples `count` episodes of at most `max_len` steps. Each player follows
/// its own dynamics; an episode ends early once the prey is caught.
/// Episode `e` draws from stream `e` of a generator seeded with `seed`, so
/// results do not depend on scheduling.
pub fn sample_trajectories(
    spec: &GridSpec,
    players: &[PlayerMdp],
    behavior: &Behavior,
    count: usize,
    max_len: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    behavior.check(spec)?;
    if players.len() != spec.players() {
        return Err(Error::Dimension {
            what: "player count",
            expected: spec.players(),
            actual: players.len(),
        });
    }
    Ok((0..count)
        .into_par_iter()
        .map(|e| simulate_episode(spec, players, behavior, max_len, seed, e))
        .collect())
}

/// Samples episodes in order until `full` of them reach `max_len` steps,
/// keeping the early-terminated ones as well.
pub fn sample_until_full_length(
    spec: &GridSpec,
    players: &[PlayerMdp],
    behavior: &Behavior,
    full: usize,
    max_len: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    behavior.check(spec)?;
    let mut out = Vec::new();
    let mut complete = 0;
    let mut episode = 0;
    // guard against behaviors that always terminate early
    let budget = 1000 * full.max(1);
    while complete < full {
        if episode >= budget {
            return Err(Error::Trajectory(format!(
                "only {complete} of {full} episodes reached length {max_len} after {episode} samples"
            )));
        }
        let t = simulate_episode(spec, players, behavior, max_len, seed, episode);
        if t.len() == max_len {
            complete += 1;
        }
        out.push(t);
        episode += 1;
    }
    Ok(out)
}
