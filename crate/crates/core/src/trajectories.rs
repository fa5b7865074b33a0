//! Trajectory preprocessing and empirical estimates of frequencies and
//! dynamics.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game_model::{Layout, PlayerMdp};

/// One joint episode: per player, a sequence of 0-based `(state, action)`
/// pairs. All players share the same length.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub players: Vec<Vec<(usize, usize)>>,
}

impl Trajectory {
    pub fn new(players: Vec<Vec<(usize, usize)>>) -> Result<Self> {
        if let Some(first) = players.first() {
            if let Some(p) = players.iter().position(|s| s.len() != first.len()) {
                return Err(Error::Trajectory(format!(
                    "player {p} has {} steps, player 0 has {}",
                    players[p].len(),
                    first.len()
                )));
            }
        }
        Ok(Self { players })
    }

    pub fn len(&self) -> usize {
        self.players.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn truncate(&mut self, len: usize) {
        for steps in &mut self.players {
            steps.truncate(len);
        }
    }

    /// Checks indices against `(states, actions)` per player.
    pub fn check_dims(&self, dims: &[(usize, usize)]) -> Result<()> {
        if self.players.len() != dims.len() {
            return Err(Error::Trajectory(format!(
                "trajectory has {} players, expected {}",
                self.players.len(),
                dims.len()
            )));
        }
        for (p, (steps, &(n, m))) in self.players.iter().zip(dims).enumerate() {
            if let Some((t, &(s, a))) = steps.iter().enumerate().find(|(_, &(s, a))| s >= n || a >= m) {
                return Err(Error::Trajectory(format!(
                    "player {p} step {t}: (state {s}, action {a}) outside {n} states x {m} actions"
                )));
            }
        }
        Ok(())
    }
}

/// Lower median of the trajectory lengths.
pub fn median_length(trajectories: &[Trajectory]) -> Option<usize> {
    let mut lengths: Vec<_> = trajectories.iter().map(Trajectory::len).collect();
    if lengths.is_empty() {
        return None;
    }
    lengths.sort_unstable();
    Some(lengths[(lengths.len() - 1) / 2])
}

/// Drops trajectories shorter than the (lower) median length and truncates
/// the survivors to the shortest surviving length.
pub fn prune_and_cap(trajectories: Vec<Trajectory>) -> Result<(Vec<Trajectory>, usize)> {
    let median = median_length(&trajectories)
        .ok_or_else(|| Error::Trajectory("no trajectories to prune".into()))?;
    let mut survivors: Vec<_> = trajectories
        .into_iter()
        .filter(|t| t.len() >= median)
        .collect();
    let cap = survivors.iter().map(Trajectory::len).min().unwrap_or(0);
    for t in &mut survivors {
        t.truncate(cap);
    }
    Ok((survivors, cap))
}

fn common_length(trajectories: &[Trajectory]) -> Result<usize> {
    let len = trajectories
        .first()
        .ok_or_else(|| Error::Trajectory("no trajectories".into()))?
        .len();
    if trajectories.iter().any(|t| t.len() != len) {
        return Err(Error::Trajectory(
            "trajectories must be capped to a common length".into(),
        ));
    }
    Ok(len)
}

/// Per-trajectory discounted visitation vectors (stacked layout).
fn discounted_visits(trajectory: &Trajectory, gamma: f64, layout: &Layout) -> DVector<f64> {
    let mut visits = DVector::zeros(layout.pair_count());
    for (block, steps) in layout.blocks().iter().zip(&trajectory.players) {
        let mut weight = 1.0;
        for &(s, a) in steps {
            visits[block.pair_index(s, a)] += weight;
            weight *= gamma;
        }
    }
    visits
}

/// `Σ_{t<L} γ^t`.
pub fn truncated_mass(gamma: f64, len: usize) -> f64 {
    (0..len).fold((0.0, 1.0), |(acc, w), _| (acc + w, w * gamma)).0
}

/// Empirical discounted frequencies
/// `Ŷ_{sa} = (1/N) Σ_traj Σ_{t<L} γ^t 1[s_t = s, a_t = a]`.
///
/// With `rescale`, each entry is multiplied by `(1/(1−γ)) / Σ_{t<L} γ^t` so
/// every player's slice carries the infinite-horizon mass `1/(1−γ)`.
pub fn estimate_frequencies(
    trajectories: &[Trajectory],
    gamma: f64,
    layout: &Layout,
    rescale: bool,
) -> Result<DVector<f64>> {
    let len = common_length(trajectories)?;
    let dims = layout.dims();
    let mut total = DVector::zeros(layout.pair_count());
    for t in trajectories {
        t.check_dims(&dims)?;
        total += discounted_visits(t, gamma, layout);
    }
    total /= trajectories.len() as f64;
    if rescale {
        total *= 1.0 / ((1.0 - gamma) * truncated_mass(gamma, len));
    }
    Ok(total)
}

/// Standard error of each entry of the (unscaled) frequency estimate.
pub fn frequency_standard_errors(
    trajectories: &[Trajectory],
    gamma: f64,
    layout: &Layout,
) -> Result<DVector<f64>> {
    common_length(trajectories)?;
    let n = trajectories.len() as f64;
    let l = layout.pair_count();
    let (mut sum, mut sum_sq) = (DVector::zeros(l), DVector::zeros(l));
    for t in trajectories {
        let x = discounted_visits(t, gamma, layout);
        sum_sq += x.component_mul(&x);
        sum += x;
    }
    let mean = &sum / n;
    let var = (sum_sq - mean.component_mul(&mean) * n) / (n - 1.0).max(1.0);
    Ok(var.map(|v| (v.max(0.0) / n).sqrt()))
}

/// Estimated initial distributions and transition kernels per player.
///
/// `T̂[s][a][j] = (count(s,a,j) + smoothing) / (count(s,a) + smoothing·n)`;
/// unvisited `(s, a)` pairs fall back to the uniform distribution.
pub fn estimate_dynamics(
    trajectories: &[Trajectory],
    layout: &Layout,
    smoothing: f64,
) -> Result<Vec<PlayerMdp>> {
    if trajectories.is_empty() {
        return Err(Error::Trajectory("no trajectories".into()));
    }
    let dims = layout.dims();
    for t in trajectories {
        t.check_dims(&dims)?;
    }
    dims.iter()
        .enumerate()
        .map(|(p, &(n, m))| {
            let mut first = DVector::<f64>::zeros(n);
            let mut counts = vec![DMatrix::<f64>::zeros(m, n); n];
            for t in trajectories {
                let steps = &t.players[p];
                if let Some(&(s0, _)) = steps.first() {
                    first[s0] += 1.0;
                }
                for w in steps.windows(2) {
                    let ((s, a), (next, _)) = (w[0], w[1]);
                    counts[s][(a, next)] += 1.0;
                }
            }
            let total = first.sum();
            let q = if total > 0.0 {
                first / total
            } else {
                DVector::from_element(n, 1.0 / n as f64)
            };
            let transitions = counts
                .into_iter()
                .map(|c| {
                    let mut t = DMatrix::zeros(m, n);
                    for a in 0..m {
                        let visits: f64 = c.row(a).sum();
                        let denom = visits + smoothing * n as f64;
                        for j in 0..n {
                            t[(a, j)] = if visits > 0.0 && denom > 0.0 {
                                (c[(a, j)] + smoothing) / denom
                            } else {
                                1.0 / n as f64
                            };
                        }
                    }
                    t
                })
                .collect();
            PlayerMdp::new(q, transitions)
        })
        .collect()
}

/// Settings for [`build_observations`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimateConfig {
    pub gamma: f64,
    pub smoothing: f64,
    pub rescale: bool,
    /// Prune below the median length and cap before estimating.
    pub prune: bool,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            smoothing: 1e-3,
            rescale: true,
            prune: true,
        }
    }
}

/// Observed frequencies together with the dynamics estimated from the same
/// trajectories.
#[derive(Clone, Debug)]
pub struct ObservationSet {
    pub gamma: f64,
    pub y_hat: DVector<f64>,
    /// Estimated player dynamics; their stacked initial distributions form
    /// `q̂`.
    pub dynamics: Vec<PlayerMdp>,
    pub trajectory_count: usize,
    pub capped_length: usize,
    pub rescaled: bool,
}

impl ObservationSet {
    pub fn layout(&self) -> Layout {
        Layout::from_players(&self.dynamics)
    }

    pub fn q_hat(&self) -> DVector<f64> {
        let layout = self.layout();
        let mut q = DVector::zeros(layout.state_count());
        for (mdp, b) in self.dynamics.iter().zip(layout.blocks()) {
            q.rows_mut(b.state_offset, b.states).copy_from(mdp.initial());
        }
        q
    }

    /// Observed policies, row-normalized from `ŷ`; unvisited states get the
    /// uniform distribution.
    pub fn observed_policies(&self) -> Vec<DMatrix<f64>> {
        observed_policies(&self.y_hat, &self.layout())
    }
}

/// Row-normalizes `ŷ` per player, falling back to uniform rows where a
/// state was never visited.
pub fn observed_policies(y_hat: &DVector<f64>, layout: &Layout) -> Vec<DMatrix<f64>> {
    (0..layout.players())
        .map(|p| {
            let mut mat = layout.player_matrix(y_hat, p);
            let m = mat.ncols();
            for mut row in mat.row_iter_mut() {
                let total = row.sum();
                if total > 0.0 {
                    row /= total;
                } else {
                    row.fill(1.0 / m as f64);
                }
            }
            mat
        })
        .collect()
}

/// Full preprocessing pipeline: optional pruning, then frequency and
/// dynamics estimates.
pub fn build_observations(
    trajectories: Vec<Trajectory>,
    layout: &Layout,
    config: &EstimateConfig,
) -> Result<ObservationSet> {
    let (trajectories, capped_length) = if config.prune {
        prune_and_cap(trajectories)?
    } else {
        let len = common_length(&trajectories)?;
        (trajectories, len)
    };
    let y_hat = estimate_frequencies(&trajectories, config.gamma, layout, config.rescale)?;
    let dynamics = estimate_dynamics(&trajectories, layout, config.smoothing)?;
    Ok(ObservationSet {
        gamma: config.gamma,
        y_hat,
        dynamics,
        trajectory_count: trajectories.len(),
        capped_length,
        rescaled: config.rescale,
    })
}
