//! Affine Markov game data model and the stacked block matrices shared by
//! the forward and inverse solvers.
//!
//! State-action pairs are laid out action-major within state blocks: for a
//! player with `m` actions, pair `(s, a)` (0-based) lives at local column
//! `s * m + a`. Per-player blocks are concatenated in player order, so the
//! stacked frequency vector `y` has length `l = Σ n·m` and the stacked state
//! vectors (`q`, `v`) have length `r = Σ n`.

use std::fmt;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::max_symmetric_eigenvalue;

/// Tolerance on probability sums.
pub const STOCHASTIC_TOL: f64 = 1e-12;
/// Tolerance on eigenvalues for the negative-semidefinite checks.
pub const NSD_TOL: f64 = 1e-10;

/// One player's MDP: initial distribution and transition kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct PlayerMdp {
    initial: DVector<f64>,
    /// `transitions[s]` is an `m × n` matrix whose row `a` is `P(· | s, a)`.
    transitions: Vec<DMatrix<f64>>,
}

impl PlayerMdp {
    /// Checks shapes only; probabilistic invariants are reported by
    /// [`validate_game`].
    pub fn new(initial: DVector<f64>, transitions: Vec<DMatrix<f64>>) -> Result<Self> {
        let n = initial.len();
        if n == 0 {
            return Err(Error::Dimension {
                what: "player state count",
                expected: 1,
                actual: 0,
            });
        }
        if transitions.len() != n {
            return Err(Error::Dimension {
                what: "transition kernel states",
                expected: n,
                actual: transitions.len(),
            });
        }
        let m = transitions[0].nrows();
        if m == 0 {
            return Err(Error::Dimension {
                what: "player action count",
                expected: 1,
                actual: 0,
            });
        }
        for t in &transitions {
            if t.nrows() != m {
                return Err(Error::Dimension {
                    what: "transition kernel actions",
                    expected: m,
                    actual: t.nrows(),
                });
            }
            if t.ncols() != n {
                return Err(Error::Dimension {
                    what: "transition kernel next states",
                    expected: n,
                    actual: t.ncols(),
                });
            }
        }
        Ok(Self {
            initial,
            transitions,
        })
    }

    pub fn states(&self) -> usize {
        self.initial.len()
    }

    pub fn actions(&self) -> usize {
        self.transitions[0].nrows()
    }

    pub fn pairs(&self) -> usize {
        self.states() * self.actions()
    }

    pub fn initial(&self) -> &DVector<f64> {
        &self.initial
    }

    /// `m × n` matrix of next-state distributions for state `s`.
    pub fn transitions_from(&self, s: usize) -> &DMatrix<f64> {
        &self.transitions[s]
    }

    pub fn transitions(&self) -> &[DMatrix<f64>] {
        &self.transitions
    }

    #[inline]
    pub fn prob(&self, s: usize, a: usize, next: usize) -> f64 {
        self.transitions[s][(a, next)]
    }

    /// State-to-state kernel induced by a stationary policy (`n × m`).
    pub fn policy_kernel(&self, policy: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.states();
        let mut p = DMatrix::zeros(n, n);
        for s in 0..n {
            let row = policy.row(s) * &self.transitions[s];
            p.row_mut(s).copy_from(&row);
        }
        p
    }
}

/// Index bookkeeping for one player inside the stacked vectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PlayerBlock {
    pub states: usize,
    pub actions: usize,
    pub state_offset: usize,
    pub pair_offset: usize,
}

impl PlayerBlock {
    pub fn pairs(&self) -> usize {
        self.states * self.actions
    }

    pub fn pair_range(&self) -> Range<usize> {
        self.pair_offset..self.pair_offset + self.pairs()
    }

    pub fn state_range(&self) -> Range<usize> {
        self.state_offset..self.state_offset + self.states
    }

    /// Global index of `(s, a)` in the stacked frequency vector.
    #[inline]
    pub fn pair_index(&self, s: usize, a: usize) -> usize {
        self.pair_offset + s * self.actions + a
    }
}

/// Per-player offsets into stacked vectors.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    blocks: Vec<PlayerBlock>,
    pairs: usize,
    states: usize,
}

impl Layout {
    /// Builds offsets from `(states, actions)` per player.
    pub fn new(dims: &[(usize, usize)]) -> Self {
        let mut blocks = Vec::with_capacity(dims.len());
        let (mut pairs, mut states) = (0, 0);
        for &(n, m) in dims {
            blocks.push(PlayerBlock {
                states: n,
                actions: m,
                state_offset: states,
                pair_offset: pairs,
            });
            states += n;
            pairs += n * m;
        }
        Self {
            blocks,
            pairs,
            states,
        }
    }

    pub fn from_players(players: &[PlayerMdp]) -> Self {
        let dims: Vec<_> = players.iter().map(|p| (p.states(), p.actions())).collect();
        Self::new(&dims)
    }

    pub fn players(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[PlayerBlock] {
        &self.blocks
    }

    pub fn block(&self, player: usize) -> &PlayerBlock {
        &self.blocks[player]
    }

    /// `l`, the stacked frequency length.
    pub fn pair_count(&self) -> usize {
        self.pairs
    }

    /// `r`, the stacked state length.
    pub fn state_count(&self) -> usize {
        self.states
    }

    pub fn dims(&self) -> Vec<(usize, usize)> {
        self.blocks.iter().map(|b| (b.states, b.actions)).collect()
    }

    /// Reshapes player `i`'s slice of a stacked vector into an `n × m`
    /// matrix (rows are states).
    pub fn player_matrix(&self, y: &DVector<f64>, player: usize) -> DMatrix<f64> {
        let b = &self.blocks[player];
        DMatrix::from_fn(b.states, b.actions, |s, a| y[b.pair_index(s, a)])
    }

    /// Inverse of [`Layout::player_matrix`] over all players.
    pub fn stack_matrices(&self, mats: &[DMatrix<f64>]) -> DVector<f64> {
        let mut y = DVector::zeros(self.pairs);
        for (b, mat) in self.blocks.iter().zip(mats) {
            for s in 0..b.states {
                for a in 0..b.actions {
                    y[b.pair_index(s, a)] = mat[(s, a)];
                }
            }
        }
        y
    }

    pub fn check_pairs(&self, what: &'static str, len: usize) -> Result<()> {
        if len != self.pairs {
            return Err(Error::Dimension {
                what,
                expected: self.pairs,
                actual: len,
            });
        }
        Ok(())
    }

    pub fn check_states(&self, what: &'static str, len: usize) -> Result<()> {
        if len != self.states {
            return Err(Error::Dimension {
                what,
                expected: self.states,
                actual: len,
            });
        }
        Ok(())
    }
}

/// Affine reward parameters: `vec(R^i) = b^i + Σ_j C^{ij} vec(Y^j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineRewardParams {
    pub b: DVector<f64>,
    pub c: DMatrix<f64>,
}

impl AffineRewardParams {
    pub fn new(b: DVector<f64>, c: DMatrix<f64>) -> Result<Self> {
        if c.nrows() != b.len() || c.ncols() != b.len() {
            return Err(Error::Dimension {
                what: "coupling matrix",
                expected: b.len(),
                actual: if c.nrows() != b.len() {
                    c.nrows()
                } else {
                    c.ncols()
                },
            });
        }
        Ok(Self { b, c })
    }

    /// Individual rewards `b` with no coupling.
    pub fn decoupled(b: DVector<f64>) -> Self {
        let l = b.len();
        Self {
            b,
            c: DMatrix::zeros(l, l),
        }
    }

    pub fn zeros(l: usize) -> Self {
        Self::decoupled(DVector::zeros(l))
    }

    pub fn len(&self) -> usize {
        self.b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.b.is_empty()
    }

    /// Coupling block `C^{ij}`.
    pub fn block(&self, layout: &Layout, i: usize, j: usize) -> DMatrix<f64> {
        let (bi, bj) = (layout.block(i), layout.block(j));
        self.c
            .view((bi.pair_offset, bj.pair_offset), (bi.pairs(), bj.pairs()))
            .into_owned()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AffineGame {
    pub players: Vec<PlayerMdp>,
    pub gamma: f64,
    pub params: AffineRewardParams,
}

impl AffineGame {
    pub fn new(players: Vec<PlayerMdp>, gamma: f64, params: AffineRewardParams) -> Self {
        Self {
            players,
            gamma,
            params,
        }
    }

    pub fn layout(&self) -> Layout {
        Layout::from_players(&self.players)
    }
}

/// A single invariant violation found by [`validate_game`].
#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    Discount { gamma: f64 },
    InitialNegative { player: usize, state: usize, value: f64 },
    InitialSum { player: usize, sum: f64 },
    TransitionNegative {
        player: usize,
        state: usize,
        action: usize,
        next: usize,
        value: f64,
    },
    TransitionSum {
        player: usize,
        state: usize,
        action: usize,
        sum: f64,
    },
    ParamDimension { expected: usize, b: usize, c: (usize, usize) },
    /// `C^{ii}` is not negative semidefinite: equilibrium existence is not
    /// guaranteed.
    DiagonalBlockNotNsd { player: usize, max_eigenvalue: f64 },
    /// `C + Cᵀ` is not negative semidefinite: uniqueness is not guaranteed.
    SymmetricPartNotNsd { max_eigenvalue: f64 },
}

impl Violation {
    /// Whether this violation only affects the uniqueness guarantee.
    pub fn is_uniqueness_only(&self) -> bool {
        matches!(self, Violation::SymmetricPartNotNsd { .. })
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Discount { gamma } => write!(f, "discount {gamma} outside [0, 1)"),
            Violation::InitialNegative {
                player,
                state,
                value,
            } => write!(
                f,
                "player {player}: initial probability of state {state} is negative ({value})"
            ),
            Violation::InitialSum { player, sum } => {
                write!(f, "player {player}: initial distribution sums to {sum}")
            }
            Violation::TransitionNegative {
                player,
                state,
                action,
                next,
                value,
            } => write!(
                f,
                "player {player}: T[{state}][{action}][{next}] is negative ({value})"
            ),
            Violation::TransitionSum {
                player,
                state,
                action,
                sum,
            } => write!(
                f,
                "player {player}: T[{state}][{action}][·] sums to {sum}"
            ),
            Violation::ParamDimension { expected, b, c } => write!(
                f,
                "reward parameters have b of length {b} and C of shape {}x{}, expected {expected}",
                c.0, c.1
            ),
            Violation::DiagonalBlockNotNsd {
                player,
                max_eigenvalue,
            } => write!(
                f,
                "C^{{{player}{player}}} is not negative semidefinite (max eigenvalue {max_eigenvalue:e})"
            ),
            Violation::SymmetricPartNotNsd { max_eigenvalue } => write!(
                f,
                "C + Cᵀ is not negative semidefinite (max eigenvalue {max_eigenvalue:e})"
            ),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    /// True when the existence hypotheses hold (uniqueness may still fail).
    pub fn existence_ok(&self) -> bool {
        self.violations.iter().all(Violation::is_uniqueness_only)
    }

    /// True when probabilities and dimensions are sound, ignoring the
    /// curvature conditions on `C`.
    pub fn structure_ok(&self) -> bool {
        self.violations.iter().all(|v| {
            matches!(
                v,
                Violation::SymmetricPartNotNsd { .. } | Violation::DiagonalBlockNotNsd { .. }
            )
        })
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(self.to_string()))
        }
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

fn validate_player(player: usize, mdp: &PlayerMdp, out: &mut Vec<Violation>) {
    let q = mdp.initial();
    for (state, &value) in q.iter().enumerate() {
        if value < 0.0 {
            out.push(Violation::InitialNegative {
                player,
                state,
                value,
            });
        }
    }
    let sum = q.sum();
    if (sum - 1.0).abs() > STOCHASTIC_TOL {
        out.push(Violation::InitialSum { player, sum });
    }
    for (state, t) in mdp.transitions().iter().enumerate() {
        for action in 0..t.nrows() {
            let row = t.row(action);
            for (next, &value) in row.iter().enumerate() {
                if value < 0.0 {
                    out.push(Violation::TransitionNegative {
                        player,
                        state,
                        action,
                        next,
                        value,
                    });
                }
            }
            let sum = row.sum();
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                out.push(Violation::TransitionSum {
                    player,
                    state,
                    action,
                    sum,
                });
            }
        }
    }
}

/// Checks every model invariant and reports violations without failing.
pub fn validate_game(game: &AffineGame) -> ValidationReport {
    let mut violations = Vec::new();
    if !(0.0..1.0).contains(&game.gamma) {
        violations.push(Violation::Discount { gamma: game.gamma });
    }
    for (i, mdp) in game.players.iter().enumerate() {
        validate_player(i, mdp, &mut violations);
    }

    let layout = game.layout();
    let l = layout.pair_count();
    let (b, c) = (&game.params.b, &game.params.c);
    if b.len() != l || c.nrows() != l || c.ncols() != l {
        violations.push(Violation::ParamDimension {
            expected: l,
            b: b.len(),
            c: c.shape(),
        });
        return ValidationReport { violations };
    }

    for i in 0..layout.players() {
        let block = game.params.block(&layout, i, i);
        let sym = (&block + block.transpose()) * 0.5;
        let max_eigenvalue = max_symmetric_eigenvalue(&sym);
        if max_eigenvalue > NSD_TOL {
            violations.push(Violation::DiagonalBlockNotNsd {
                player: i,
                max_eigenvalue,
            });
        }
    }
    let max_eigenvalue = max_symmetric_eigenvalue(&(c + c.transpose()));
    if max_eigenvalue > NSD_TOL {
        violations.push(Violation::SymmetricPartNotNsd { max_eigenvalue });
    }
    ValidationReport { violations }
}

/// Precomputed block matrices `H = blkdiag(Dⁱ − γEⁱ)` and
/// `K = blkdiag((Dⁱ)ᵀDⁱ)` plus the stacked initial distribution.
#[derive(Clone, Debug)]
pub struct StackedGame {
    pub h: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub q: DVector<f64>,
    pub gamma: f64,
    layout: Layout,
    players: Vec<PlayerMdp>,
}

impl StackedGame {
    /// Builds the stacked matrices from the player dynamics alone; the
    /// reward parameters enter the solvers separately.
    pub fn new(players: Vec<PlayerMdp>, gamma: f64) -> Self {
        let layout = Layout::from_players(&players);
        let (l, r) = (layout.pair_count(), layout.state_count());
        let mut h = DMatrix::zeros(r, l);
        let mut k = DMatrix::zeros(l, l);
        let mut q = DVector::zeros(r);
        for (mdp, block) in players.iter().zip(layout.blocks()) {
            let (n, m) = (block.states, block.actions);
            q.rows_mut(block.state_offset, n).copy_from(mdp.initial());
            for s in 0..n {
                for a in 0..m {
                    let col = block.pair_index(s, a);
                    // D: one 1 in row s for each of state s's action columns.
                    h[(block.state_offset + s, col)] += 1.0;
                    // E: column (s, a) holds P(· | s, a).
                    for next in 0..n {
                        h[(block.state_offset + next, col)] -= gamma * mdp.prob(s, a, next);
                    }
                    for a2 in 0..m {
                        k[(col, block.pair_index(s, a2))] = 1.0;
                    }
                }
            }
        }
        Self {
            h,
            k,
            q,
            gamma,
            layout,
            players,
        }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn players(&self) -> &[PlayerMdp] {
        &self.players
    }

    pub fn pair_count(&self) -> usize {
        self.layout.pair_count()
    }

    pub fn state_count(&self) -> usize {
        self.layout.state_count()
    }

    /// `K·y`: each entry is the state marginal `Σ_a y_{sa}` of its state.
    pub fn state_marginals(&self, y: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(y.len());
        for b in self.layout.blocks() {
            for s in 0..b.states {
                let start = b.pair_index(s, 0);
                let total = y.rows(start, b.actions).sum();
                out.rows_mut(start, b.actions).fill(total);
            }
        }
        out
    }
}

/// Builds the stacked matrices for a game, rejecting parameter dimension
/// mismatches and non-stochastic dynamics.
pub fn build_stacked(game: &AffineGame) -> Result<StackedGame> {
    let report = validate_game(game);
    if !report.structure_ok() {
        return Err(Error::Validation(report.to_string()));
    }
    Ok(StackedGame::new(game.players.clone(), game.gamma))
}

/// Stacked reward `b + C·y`.
pub fn reward_from_frequencies(
    params: &AffineRewardParams,
    y: &DVector<f64>,
) -> Result<DVector<f64>> {
    if y.len() != params.len() {
        return Err(Error::Dimension {
            what: "frequency vector",
            expected: params.len(),
            actual: y.len(),
        });
    }
    Ok(&params.b + &params.c * y)
}

/// Player `i`'s reward matrix (`n × m`) from the stacked reward.
pub fn player_reward(
    layout: &Layout,
    params: &AffineRewardParams,
    y: &DVector<f64>,
    player: usize,
) -> Result<DMatrix<f64>> {
    let reward = reward_from_frequencies(params, y)?;
    Ok(layout.player_matrix(&reward, player))
}
