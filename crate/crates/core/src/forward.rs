//! Forward problem: the soft-Bellman equilibrium of an affine game.
//!
//! The equilibrium is the zero of the KKT residual
//!
//! ```text
//! F(y, v) = [ log(K·y) + b + C·y − Hᵀ·v − log(y) ]
//!           [ H·y − q                            ]
//! ```
//!
//! which [`solve_forward`] drives to zero with a damped Gauss–Newton
//! (Levenberg–Marquardt) iteration in the variables `(z, v)`, `y = exp(z)`.
//! In log-space `log(K·y)` is a per-state log-sum-exp of `z`, so positivity
//! never has to be enforced explicitly.
//!
//! The multiplier `v` is the vector of soft state values, and
//! `Q = R + γ·T·v` with `R = b + C·y`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game_model::{AffineRewardParams, Layout, PlayerMdp, StackedGame};
use crate::linalg::{checked_exp, cholesky_solve, log_sum_exp, lu_solve};

const NEWTON_BACKTRACKS: usize = 12;

/// Settings for [`solve_forward`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForwardConfig {
    /// Target residual norm; convergence is `‖F‖² ≤ tol²`.
    pub tol: f64,
    /// Upper bound on step attempts, accepted or not.
    pub max_iterations: usize,
    pub initial_damping: f64,
    /// Damping multiplier after a rejected step.
    pub damping_increase: f64,
    /// Damping divisor after an accepted step.
    pub damping_decrease: f64,
    /// Try an undamped step before each damped one.
    pub newton_first: bool,
}

impl Default for ForwardConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iterations: 500,
            initial_damping: 1e-3,
            damping_increase: 4.0,
            damping_decrease: 2.0,
            newton_first: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EquilibriumSolution {
    /// Stacked state-action frequencies, entrywise positive.
    pub y: DVector<f64>,
    /// Stacked soft state values (KKT multipliers of the flow constraint).
    pub v: DVector<f64>,
    pub policies: Vec<DMatrix<f64>>,
    pub q_values: Vec<DMatrix<f64>>,
    /// Euclidean norm of the KKT residual at `(y, v)`.
    pub residual_norm: f64,
    pub iterations: usize,
}

fn check_positive(y: &DVector<f64>) -> Result<()> {
    match y.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
        Some((index, &value)) => Err(Error::NonPositive {
            what: "frequency",
            index,
            value,
        }),
        None => Ok(()),
    }
}

fn check_dims(stacked: &StackedGame, params: &AffineRewardParams) -> Result<()> {
    stacked.layout().check_pairs("reward parameters", params.len())?;
    if params.c.shape() != (params.len(), params.len()) {
        return Err(Error::Dimension {
            what: "coupling matrix",
            expected: params.len(),
            actual: params.c.nrows(),
        });
    }
    Ok(())
}

/// KKT residual `F(y, v)` of length `l + r`.
pub fn kkt_residual(
    stacked: &StackedGame,
    params: &AffineRewardParams,
    y: &DVector<f64>,
    v: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_dims(stacked, params)?;
    stacked.layout().check_pairs("frequency vector", y.len())?;
    stacked.layout().check_states("value vector", v.len())?;
    check_positive(y)?;
    let ky = &stacked.k * y;
    let top = ky.map(f64::ln) + &params.b + &params.c * y
        - stacked.h.tr_mul(v)
        - y.map(f64::ln);
    let bottom = &stacked.h * y - &stacked.q;
    Ok(concat(&top, &bottom))
}

fn concat(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(a.len() + b.len());
    out.rows_mut(0, a.len()).copy_from(a);
    out.rows_mut(a.len(), b.len()).copy_from(b);
    out
}

/// Residual and its Jacobian in log-space variables `x = (z, v)`.
struct LogSpaceSystem<'a> {
    stacked: &'a StackedGame,
    params: &'a AffineRewardParams,
    /// `Hᵀ`, cached.
    h_t: DMatrix<f64>,
}

struct Point {
    z: DVector<f64>,
    v: DVector<f64>,
    y: DVector<f64>,
    residual: DVector<f64>,
    cost: f64,
}

impl<'a> LogSpaceSystem<'a> {
    fn new(stacked: &'a StackedGame, params: &'a AffineRewardParams) -> Self {
        Self {
            stacked,
            params,
            h_t: stacked.h.transpose(),
        }
    }

    fn evaluate(&self, z: DVector<f64>, v: DVector<f64>) -> Result<Point> {
        let y = checked_exp(&z)?;
        let layout = self.stacked.layout();
        let mut top = &self.params.b + &self.params.c * &y - &self.h_t * &v - &z;
        for block in layout.blocks() {
            for s in 0..block.states {
                let start = block.pair_index(s, 0);
                let lse = log_sum_exp(z.rows(start, block.actions).iter().copied());
                top.rows_mut(start, block.actions).add_scalar_mut(lse);
            }
        }
        let bottom = &self.stacked.h * &y - &self.stacked.q;
        let residual = concat(&top, &bottom);
        let cost = residual.norm_squared();
        if !cost.is_finite() {
            return Err(Error::NonPositive {
                what: "finite residual",
                index: 0,
                value: cost,
            });
        }
        Ok(Point {
            z,
            v,
            y,
            residual,
            cost,
        })
    }

    fn jacobian(&self, point: &Point) -> DMatrix<f64> {
        let layout = self.stacked.layout();
        let (l, r) = (layout.pair_count(), layout.state_count());
        let y = &point.y;
        let mut jac = DMatrix::zeros(l + r, l + r);

        // ∂/∂z of C·y is C·diag(y)
        let mut c_y = self.params.c.clone();
        for (j, mut col) in c_y.column_iter_mut().enumerate() {
            col *= y[j];
        }
        jac.view_mut((0, 0), (l, l)).copy_from(&c_y);
        for i in 0..l {
            jac[(i, i)] -= 1.0;
        }
        // ∂/∂z of log-sum-exp: softmax row replicated across the state's pairs
        for block in layout.blocks() {
            for s in 0..block.states {
                let start = block.pair_index(s, 0);
                let total: f64 = y.rows(start, block.actions).sum();
                for a2 in 0..block.actions {
                    let weight = y[start + a2] / total;
                    for a in 0..block.actions {
                        jac[(start + a, start + a2)] += weight;
                    }
                }
            }
        }
        jac.view_mut((0, l), (l, r)).copy_from(&(-&self.h_t));
        let mut h_y = self.stacked.h.clone();
        for (j, mut col) in h_y.column_iter_mut().enumerate() {
            col *= y[j];
        }
        jac.view_mut((l, 0), (r, l)).copy_from(&h_y);
        jac
    }
}

fn newton_backtrack(system: &LogSpaceSystem, point: &Point, step: &DVector<f64>, l: usize) -> Option<Point> {
    let mut t = 1.0;
    for _ in 0..NEWTON_BACKTRACKS {
        let z = &point.z + step.rows(0, l) * t;
        let v = &point.v + step.rows(l, step.len() - l) * t;
        if let Ok(trial) = system.evaluate(z, v) {
            // sufficient decrease of ‖F‖² along the Newton direction
            if trial.cost <= (1.0 - 1e-4 * t) * point.cost {
                return Some(trial);
            }
        }
        t *= 0.5;
    }
    None
}

/// Occupancy of the uniform policy, used as the default starting point.
pub fn uniform_start(stacked: &StackedGame) -> Result<DVector<f64>> {
    let mats = stacked
        .players()
        .iter()
        .map(|mdp| {
            let policy = uniform_policy(mdp.states(), mdp.actions());
            occupancy_from_policy(mdp, &policy, stacked.gamma)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(stacked.layout().stack_matrices(&mats))
}

pub fn uniform_policy(states: usize, actions: usize) -> DMatrix<f64> {
    DMatrix::from_element(states, actions, 1.0 / actions as f64)
}

/// Computes the soft-Bellman equilibrium by least-squares on the KKT
/// residual. `init` is an optional `(y0, v0)` with `y0 > 0`.
pub fn solve_forward(
    stacked: &StackedGame,
    params: &AffineRewardParams,
    init: Option<(&DVector<f64>, &DVector<f64>)>,
    config: &ForwardConfig,
) -> Result<EquilibriumSolution> {
    check_dims(stacked, params)?;
    let layout = stacked.layout();
    let (y0, v0) = match init {
        Some((y0, v0)) => {
            layout.check_pairs("initial frequencies", y0.len())?;
            layout.check_states("initial values", v0.len())?;
            check_positive(y0)?;
            (y0.clone(), v0.clone())
        }
        None => (uniform_start(stacked)?, DVector::zeros(layout.state_count())),
    };

    let system = LogSpaceSystem::new(stacked, params);
    let mut point = system.evaluate(y0.map(f64::ln), v0)?;
    let target = config.tol * config.tol;
    let l = layout.pair_count();
    let mut damping = config.initial_damping;
    let mut iterations = 0;

    while point.cost > target {
        if iterations >= config.max_iterations {
            return Err(Error::NotConverged {
                iterations,
                best_residual: point.cost.sqrt(),
            });
        }
        let jac = system.jacobian(&point);
        // Newton step with backtracking, then LM
        if config.newton_first {
            iterations += 1;
            if let Some(step) = lu_solve(&jac, &(-&point.residual)) {
                if let Some(trial) = newton_backtrack(&system, &point, &step, l) {
                    point = trial;
                    continue;
                }
            }
            if iterations >= config.max_iterations {
                continue;
            }
        }
        let jac_t = jac.transpose();
        let normal = &jac_t * &jac;
        let gradient = &jac_t * &point.residual;
        // damp the z block only
        let diag: DVector<f64> =
            DVector::from_fn(normal.nrows(), |i, _| if i < l { normal[(i, i)].max(1e-12) } else { 0.0 });

        // inner loop: raise damping until a step reduces the residual
        loop {
            iterations += 1;
            let mut damped = normal.clone();
            for i in 0..damped.nrows() {
                damped[(i, i)] += damping * diag[i];
            }
            let step = match cholesky_solve(&damped, &(-&gradient)) {
                Some(step) => step,
                None => {
                    damping *= config.damping_increase;
                    if iterations >= config.max_iterations {
                        break;
                    }
                    continue;
                }
            };
            let z = &point.z + step.rows(0, l);
            let v = &point.v + step.rows(l, step.len() - l);
            match system.evaluate(z, v) {
                Ok(trial) if trial.cost < point.cost => {
                    point = trial;
                    damping = (damping / config.damping_decrease).max(1e-15);
                    break;
                }
                _ => {
                    damping *= config.damping_increase;
                }
            }
            if iterations >= config.max_iterations || damping > 1e20 {
                break;
            }
        }
        if damping > 1e20 {
            return Err(Error::NotConverged {
                iterations,
                best_residual: point.cost.sqrt(),
            });
        }
    }

    let policies = policy_from_frequencies(&point.y, layout)?;
    let reward = &params.b + &params.c * &point.y;
    let q_values = stacked
        .players()
        .iter()
        .zip(layout.blocks())
        .enumerate()
        .map(|(i, (mdp, block))| {
            let v = point.v.rows(block.state_offset, block.states).into_owned();
            soft_q(mdp, &layout.player_matrix(&reward, i), &v, stacked.gamma)
        })
        .collect();
    Ok(EquilibriumSolution {
        residual_norm: point.cost.sqrt(),
        y: point.y,
        v: point.v,
        policies,
        q_values,
        iterations,
    })
}

/// `Q_{sa} = R_{sa} + γ Σ_j T_{saj} v_j`.
pub fn soft_q(mdp: &PlayerMdp, reward: &DMatrix<f64>, v: &DVector<f64>, gamma: f64) -> DMatrix<f64> {
    let mut q = reward.clone();
    for s in 0..mdp.states() {
        let next = mdp.transitions_from(s) * v;
        for a in 0..mdp.actions() {
            q[(s, a)] += gamma * next[a];
        }
    }
    q
}

/// Row-normalizes each player's frequency block into a policy.
pub fn policy_from_frequencies(y: &DVector<f64>, layout: &Layout) -> Result<Vec<DMatrix<f64>>> {
    layout.check_pairs("frequency vector", y.len())?;
    check_positive(y)?;
    (0..layout.players())
        .map(|p| {
            let mut mat = layout.player_matrix(y, p);
            normalize_rows(&mut mat, "frequency block")?;
            Ok(mat)
        })
        .collect()
}

pub(crate) fn normalize_rows(mat: &mut DMatrix<f64>, what: &'static str) -> Result<()> {
    for (row, mut r) in mat.row_iter_mut().enumerate() {
        let total = r.sum();
        if !(total > 0.0) {
            return Err(Error::NotDistribution {
                what,
                row,
                sum: total,
            });
        }
        r /= total;
    }
    Ok(())
}

/// Single-player soft values.
#[derive(Clone, Debug)]
pub struct SoftValues {
    pub q: DMatrix<f64>,
    pub v: DVector<f64>,
    pub policy: DMatrix<f64>,
}

/// Soft value iteration for a fixed reward: iterates
/// `Q = R + γ·T·v`, `v_s = log Σ_a exp(Q_{sa})` until
/// `‖v_new − v_old‖_∞ ≤ tol`.
pub fn soft_value_iteration(
    mdp: &PlayerMdp,
    reward: &DMatrix<f64>,
    gamma: f64,
    tol: f64,
) -> SoftValues {
    let (n, m) = (mdp.states(), mdp.actions());
    let mut v = DVector::zeros(n);
    loop {
        let q = soft_q(mdp, reward, &v, gamma);
        let v_new = DVector::from_fn(n, |s, _| log_sum_exp(q.row(s).iter().copied()));
        let delta = (&v_new - &v).amax();
        v = v_new;
        if delta <= tol {
            break;
        }
    }
    let q = soft_q(mdp, reward, &v, gamma);
    let policy = DMatrix::from_fn(n, m, |s, a| (q[(s, a)] - v[s]).exp());
    SoftValues { q, v, policy }
}

/// Discounted state-action occupancy of a stationary policy:
/// `μ = q + γ·P_Πᵀ·μ`, `Y_{sa} = μ_s·Π_{sa}`.
pub fn occupancy_from_policy(
    mdp: &PlayerMdp,
    policy: &DMatrix<f64>,
    gamma: f64,
) -> Result<DMatrix<f64>> {
    let n = mdp.states();
    if policy.shape() != (n, mdp.actions()) {
        return Err(Error::Dimension {
            what: "policy rows",
            expected: n,
            actual: policy.nrows(),
        });
    }
    let kernel = mdp.policy_kernel(policy);
    let system = DMatrix::identity(n, n) - kernel.transpose() * gamma;
    let mu = system
        .lu()
        .solve(mdp.initial())
        .ok_or(Error::Singular("occupancy flow system"))?;
    Ok(DMatrix::from_fn(n, mdp.actions(), |s, a| mu[s] * policy[(s, a)]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game_model::{AffineGame, StackedGame};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn absorbing_game() -> StackedGame {
        let mdp =
            PlayerMdp::new(DVector::from_element(1, 1.0), vec![DMatrix::from_element(1, 1, 1.0)])
                .unwrap();
        StackedGame::new(vec![mdp], 0.99)
    }

    fn random_mdp(rng: &mut ChaCha8Rng, n: usize, m: usize) -> PlayerMdp {
        let mut q = DVector::from_fn(n, |_, _| rng.gen_range(0.1..1.0));
        q /= q.sum();
        let t = (0..n)
            .map(|_| {
                let mut t = DMatrix::from_fn(m, n, |_, _| rng.gen_range(0.05..1.0));
                normalize_rows(&mut t, "t").unwrap();
                t
            })
            .collect();
        PlayerMdp::new(q, t).unwrap()
    }

    #[test]
    fn residual_at_closed_form() {
        let st = absorbing_game();
        let params = AffineRewardParams::zeros(1);
        let y = DVector::from_element(1, 100.0);
        let r = kkt_residual(&st, &params, &y, &DVector::zeros(1)).unwrap();
        assert!(r.amax() < 1e-12);
        let r = kkt_residual(&st, &params, &y, &DVector::from_element(1, 1.0)).unwrap();
        assert!((r[0] + 0.01).abs() < 1e-12, "{r}");
        assert!(r[1].abs() < 1e-12);
    }

    #[test]
    fn residual_rejects_nonpositive() {
        let st = absorbing_game();
        let err = kkt_residual(
            &st,
            &AffineRewardParams::zeros(1),
            &DVector::zeros(1),
            &DVector::zeros(1),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonPositive { index: 0, .. }));
    }

    #[test]
    fn forward_closed_form() {
        let st = absorbing_game();
        let sol = solve_forward(&st, &AffineRewardParams::zeros(1), None, &ForwardConfig::default())
            .unwrap();
        assert!((sol.y[0] - 100.0).abs() < 1e-8);
        assert!(sol.v[0].abs() < 1e-8);
        assert!(sol.residual_norm <= 1e-8);
    }

    #[test]
    fn forward_rejects_bad_init() {
        let st = absorbing_game();
        let y0 = DVector::from_element(1, -1.0);
        let v0 = DVector::zeros(1);
        assert!(solve_forward(
            &st,
            &AffineRewardParams::zeros(1),
            Some((&y0, &v0)),
            &ForwardConfig::default()
        )
        .is_err());
    }

    #[test]
    fn iteration_budget_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let st = StackedGame::new(vec![random_mdp(&mut rng, 4, 3)], 0.99);
        let params = AffineRewardParams::decoupled(DVector::from_fn(12, |_, _| rng.gen_range(-3.0..3.0)));
        let config = ForwardConfig {
            max_iterations: 1,
            ..ForwardConfig::default()
        };
        match solve_forward(&st, &params, None, &config) {
            Err(Error::NotConverged { best_residual, .. }) => assert!(best_residual > 0.0),
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn svi_uniform_when_actions_identical() {
        let gamma = 0.9;
        let t = DMatrix::from_row_slice(3, 2, &[0.3, 0.7, 0.3, 0.7, 0.3, 0.7]);
        let mdp = PlayerMdp::new(DVector::from_vec(vec![0.5, 0.5]), vec![t.clone(), t]).unwrap();
        let out = soft_value_iteration(&mdp, &DMatrix::zeros(2, 3), gamma, 1e-13);
        for s in 0..2 {
            assert!((out.v[s] - 3f64.ln() / (1.0 - gamma)).abs() < 1e-10);
            for a in 0..3 {
                assert!((out.policy[(s, a)] - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn svi_single_state_two_actions() {
        let mdp = PlayerMdp::new(
            DVector::from_element(1, 1.0),
            vec![DMatrix::from_element(2, 1, 1.0)],
        )
        .unwrap();
        let out = soft_value_iteration(&mdp, &DMatrix::zeros(1, 2), 0.5, 1e-14);
        assert!((out.v[0] - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((out.policy[(0, 0)] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn svi_fixed_point_self_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mdp = random_mdp(&mut rng, 2, 2);
        let reward = DMatrix::from_fn(2, 2, |_, _| rng.gen_range(-1.0..1.0));
        let gamma = 0.9;
        let out = soft_value_iteration(&mdp, &reward, gamma, 1e-14);
        // re-substitute into Q = R + γTv and v = lse(Q)
        let q = soft_q(&mdp, &reward, &out.v, gamma);
        for s in 0..2 {
            let lse = log_sum_exp(q.row(s).iter().copied());
            assert!((lse - out.v[s]).abs() < 1e-12);
            for a in 0..2 {
                assert!((q[(s, a)] - out.q[(s, a)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn occupancy_mass_and_trivial_case() {
        let mdp =
            PlayerMdp::new(DVector::from_element(1, 1.0), vec![DMatrix::from_element(1, 1, 1.0)])
                .unwrap();
        let y = occupancy_from_policy(&mdp, &DMatrix::from_element(1, 1, 1.0), 0.99).unwrap();
        assert!((y[(0, 0)] - 100.0).abs() < 1e-10);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mdp = random_mdp(&mut rng, 5, 3);
        let mut policy = DMatrix::from_fn(5, 3, |_, _| rng.gen_range(0.0..1.0));
        normalize_rows(&mut policy, "p").unwrap();
        let y = occupancy_from_policy(&mdp, &policy, 0.95).unwrap();
        assert!((y.sum() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn policy_rows() {
        let layout = Layout::new(&[(2, 2)]);
        let y = DVector::from_vec(vec![0.5, 0.5, 3.0, 1.0]);
        let p = policy_from_frequencies(&y, &layout).unwrap();
        assert_eq!(p[0].row(0).iter().copied().collect::<Vec<_>>(), vec![0.5, 0.5]);
        assert_eq!(p[0].row(1).iter().copied().collect::<Vec<_>>(), vec![0.75, 0.25]);
        let bad = DVector::from_vec(vec![0.5, 0.0, 3.0, 1.0]);
        assert!(policy_from_frequencies(&bad, &layout).is_err());
    }

    #[test]
    fn forward_matches_oracle_single_player() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mdp = random_mdp(&mut rng, 3, 2);
        let gamma = 0.9;
        let b = DVector::from_fn(6, |_, _| rng.gen_range(-1.0..1.0));
        let game = AffineGame::new(vec![mdp.clone()], gamma, AffineRewardParams::decoupled(b.clone()));
        let st = crate::game_model::build_stacked(&game).unwrap();
        let sol = solve_forward(&st, &game.params, None, &ForwardConfig::default()).unwrap();
        let reward = st.layout().player_matrix(&b, 0);
        let oracle = soft_value_iteration(&mdp, &reward, gamma, 1e-14);
        assert!((&sol.policies[0] - &oracle.policy).amax() < 1e-6);
        assert!((&sol.v - &oracle.v).amax() < 1e-6);
        assert!((&sol.q_values[0] - &oracle.q).amax() < 1e-6);

        // oracle (y*, v*) zeroes the residual
        let y_mat = occupancy_from_policy(&mdp, &oracle.policy, gamma).unwrap();
        let y = st.layout().stack_matrices(&[y_mat]);
        let r = kkt_residual(&st, &game.params, &y, &oracle.v).unwrap();
        assert!(r.amax() <= 1e-8, "{}", r.amax());
    }
}
