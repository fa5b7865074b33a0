//! Inverse game: infer `(b, C)` from observed frequencies `ŷ` by a
//! projected-gradient method whose gradients come from implicit
//! differentiation of the equilibrium conditions.
//!
//! Each outer iteration holds an equilibrium `y(b, C)`. The gradient of
//! `‖y − ŷ‖²` with respect to `b` is `−2·[I 0]·(J†)ᵀ·[y − ŷ; 0]`, where `J`
//! is the Jacobian of the KKT residual in `(y, v)`; the gradient with
//! respect to `C` is that vector times `yᵀ`. Steps are chosen by
//! backtracking from `alpha0`, halving until the Armijo condition holds for
//! the projected joint step on `(b, C)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{solve_forward, EquilibriumSolution, ForwardConfig};
use crate::game_model::{AffineRewardParams, Layout, StackedGame};
use crate::linalg::{max_symmetric_eigenvalue, project_symmetric_nsd, PseudoInverse};

/// Constraint set for the individual reward vector `b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BSet {
    Unconstrained,
    /// Per-entry bounds `lo ≤ b ≤ hi`.
    Box { lo: Vec<f64>, hi: Vec<f64> },
    /// Euclidean ball `‖b‖ ≤ radius`.
    Ball { radius: f64 },
}

impl BSet {
    /// Same bounds on every entry.
    pub fn uniform_box(len: usize, lo: f64, hi: f64) -> Self {
        BSet::Box {
            lo: vec![lo; len],
            hi: vec![hi; len],
        }
    }

    fn check(&self, len: usize) -> Result<()> {
        match self {
            BSet::Unconstrained => Ok(()),
            BSet::Box { lo, hi } => {
                if lo.len() != len || hi.len() != len {
                    return Err(Error::InvalidSet(format!(
                        "box bounds have lengths {} and {}, expected {len}",
                        lo.len(),
                        hi.len()
                    )));
                }
                if let Some(i) = (0..len).find(|&i| !(lo[i] <= hi[i])) {
                    return Err(Error::InvalidSet(format!(
                        "box bound {i} is empty: [{}, {}]",
                        lo[i], hi[i]
                    )));
                }
                Ok(())
            }
            BSet::Ball { radius } => {
                if !(*radius >= 0.0) || !radius.is_finite() {
                    return Err(Error::InvalidSet(format!("ball radius {radius}")));
                }
                Ok(())
            }
        }
    }
}

/// Constraint set for the coupling matrix `C`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CSet {
    /// `C = 0`: the decoupled model.
    Zero,
    /// `C + Cᵀ ⪯ 0`.
    NsdSymmetric,
    /// `C + Cᵀ ⪯ 0` and `C` vanishes outside `mask` (row-major `l × l`
    /// 0/1 entries).
    MaskedNsd { mask: Vec<bool>, size: usize },
}

impl CSet {
    /// Mask allowing the player blocks `(i, j)` for which `allowed[i][j]`.
    pub fn block_mask(layout: &Layout, allowed: &[Vec<bool>]) -> Result<Self> {
        let p = layout.players();
        if allowed.len() != p || allowed.iter().any(|row| row.len() != p) {
            return Err(Error::InvalidSet(format!(
                "block mask must be {p}x{p}"
            )));
        }
        let l = layout.pair_count();
        let mut mask = vec![false; l * l];
        for (i, bi) in layout.blocks().iter().enumerate() {
            for (j, bj) in layout.blocks().iter().enumerate() {
                if !allowed[i][j] {
                    continue;
                }
                for r in bi.pair_range() {
                    for c in bj.pair_range() {
                        mask[r * l + c] = true;
                    }
                }
            }
        }
        Ok(CSet::MaskedNsd { mask, size: l })
    }
}

/// Euclidean projection onto `set`.
pub fn project_b(b: &DVector<f64>, set: &BSet) -> Result<DVector<f64>> {
    set.check(b.len())?;
    Ok(match set {
        BSet::Unconstrained => b.clone(),
        BSet::Box { lo, hi } => DVector::from_fn(b.len(), |i, _| b[i].clamp(lo[i], hi[i])),
        BSet::Ball { radius } => {
            let norm = b.norm();
            if norm > *radius {
                b * (*radius / norm)
            } else {
                b.clone()
            }
        }
    })
}

/// Projection onto `{C : C + Cᵀ ⪯ 0}`: the symmetric part is projected onto
/// the NSD cone and the skew part is kept.
fn project_nsd_symmetric_part(c: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (c + c.transpose()) * 0.5;
    let skew = (c - c.transpose()) * 0.5;
    project_symmetric_nsd(&sym) + skew
}

fn apply_mask(c: &mut DMatrix<f64>, mask: &[bool]) {
    let l = c.nrows();
    for r in 0..l {
        for col in 0..l {
            if !mask[r * l + col] {
                c[(r, col)] = 0.0;
            }
        }
    }
}

const DYKSTRA_MAX_ITERATIONS: usize = 5000;
const C_SET_TOL: f64 = 1e-10;

/// Frobenius projection onto the coupling set.
pub fn project_c(c: &DMatrix<f64>, set: &CSet) -> Result<DMatrix<f64>> {
    if !c.is_square() {
        return Err(Error::Dimension {
            what: "coupling matrix columns",
            expected: c.nrows(),
            actual: c.ncols(),
        });
    }
    match set {
        CSet::Zero => Ok(DMatrix::zeros(c.nrows(), c.ncols())),
        CSet::NsdSymmetric => Ok(project_nsd_symmetric_part(c)),
        CSet::MaskedNsd { mask, size } => {
            if *size != c.nrows() || mask.len() != size * size {
                return Err(Error::InvalidSet(format!(
                    "mask of size {size} for a {}x{} matrix",
                    c.nrows(),
                    c.ncols()
                )));
            }
            // Dykstra's alternating projections; the mask is a subspace, so
            // only the cone step carries a correction term.
            let mut x = c.clone();
            apply_mask(&mut x, mask);
            let mut correction = DMatrix::zeros(c.nrows(), c.ncols());
            for _ in 0..DYKSTRA_MAX_ITERATIONS {
                if max_symmetric_eigenvalue(&(&x + x.transpose())) <= C_SET_TOL {
                    break;
                }
                let shifted = &x + &correction;
                let cone = project_nsd_symmetric_part(&shifted);
                correction = shifted - &cone;
                x = cone;
                apply_mask(&mut x, mask);
            }
            let lambda = max_symmetric_eigenvalue(&(&x + x.transpose()));
            if lambda > C_SET_TOL {
                let l = c.nrows();
                if (0..l).all(|i| mask[i * l + i]) {
                    for i in 0..l {
                        x[(i, i)] -= 0.5 * lambda;
                    }
                } else {
                    return Err(Error::InvalidSet(format!(
                        "masked projection stalled with max eigenvalue {lambda:e}"
                    )));
                }
            }
            Ok(x)
        }
    }
}

/// Jacobian of the KKT residual in `(y, v)`:
///
/// ```text
/// J = [ K·diag(K·y)⁻¹ − diag(y)⁻¹ + C   −Hᵀ ]
///     [ H                                0  ]
/// ```
pub fn assemble_jacobian(
    stacked: &StackedGame,
    params: &AffineRewardParams,
    y: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let layout = stacked.layout();
    layout.check_pairs("frequency vector", y.len())?;
    layout.check_pairs("reward parameters", params.len())?;
    if let Some((index, &value)) = y.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
        return Err(Error::NonPositive {
            what: "frequency",
            index,
            value,
        });
    }
    let (l, r) = (layout.pair_count(), layout.state_count());
    let ky = &stacked.k * y;
    let mut top_left = stacked.k.clone();
    for (j, mut col) in top_left.column_iter_mut().enumerate() {
        col /= ky[j];
    }
    top_left += &params.c;
    for i in 0..l {
        top_left[(i, i)] -= 1.0 / y[i];
    }
    let mut jac = DMatrix::zeros(l + r, l + r);
    jac.view_mut((0, 0), (l, l)).copy_from(&top_left);
    jac.view_mut((0, l), (l, r)).copy_from(&(-stacked.h.transpose()));
    jac.view_mut((l, 0), (r, l)).copy_from(&stacked.h);
    Ok(jac)
}

fn gradient_rhs(y: &DVector<f64>, y_hat: &DVector<f64>, r: usize) -> DVector<f64> {
    let l = y.len();
    let mut rhs = DVector::zeros(l + r);
    rhs.rows_mut(0, l).copy_from(&(y - y_hat));
    rhs
}

/// Implicit gradient of `‖y − ŷ‖²` with respect to `b`, via the
/// pseudoinverse of the KKT Jacobian.
///
/// The pseudoinverse is taken of `J·D` with `D = blkdiag(diag(y), I)`, the
/// Jacobian in `(log y, v)`. Since `Jᵀw = e` iff `(J·D)ᵀw = D·e`, the result is
/// unchanged for nonsingular `J`, while the singular-value cutoff no longer
/// discards directions when `y` spans many orders of magnitude.
pub fn implicit_gradient_b(
    stacked: &StackedGame,
    params: &AffineRewardParams,
    y: &DVector<f64>,
    y_hat: &DVector<f64>,
) -> Result<DVector<f64>> {
    stacked.layout().check_pairs("observed frequencies", y_hat.len())?;
    let mut jac = assemble_jacobian(stacked, params, y)?;
    for (j, mut col) in jac.column_iter_mut().take(y.len()).enumerate() {
        col *= y[j];
    }
    let pinv = PseudoInverse::new(jac)?;
    let mut rhs = gradient_rhs(y, y_hat, stacked.state_count());
    rhs.rows_mut(0, y.len()).component_mul_assign(y);
    let w = pinv.apply_transpose(&rhs);
    Ok(w.rows(0, y.len()) * -2.0)
}

/// Gradients `(∇_b, ∇_C)` of `‖y − ŷ‖²`; `∇_C = ∇_b·yᵀ`.
pub fn implicit_gradient(
    stacked: &StackedGame,
    params: &AffineRewardParams,
    y: &DVector<f64>,
    y_hat: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let grad_b = implicit_gradient_b(stacked, params, y, y_hat)?;
    let grad_c = &grad_b * y.transpose();
    Ok((grad_b, grad_c))
}

/// `∇_b` by a direct LU solve with `Jᵀ`; only valid for nonsingular `J`.
pub fn implicit_gradient_b_direct(
    stacked: &StackedGame,
    params: &AffineRewardParams,
    y: &DVector<f64>,
    y_hat: &DVector<f64>,
) -> Result<DVector<f64>> {
    let jac = assemble_jacobian(stacked, params, y)?;
    let rhs = gradient_rhs(y, y_hat, stacked.state_count());
    let w = jac
        .transpose()
        .lu()
        .solve(&rhs)
        .ok_or(Error::Singular("KKT Jacobian"))?;
    Ok(w.rows(0, y.len()) * -2.0)
}

#[derive(Clone, Debug)]
pub struct InverseProblem {
    pub stacked: StackedGame,
    pub y_hat: DVector<f64>,
    pub b_set: BSet,
    pub c_set: CSet,
}

impl InverseProblem {
    pub fn new(stacked: StackedGame, y_hat: DVector<f64>, b_set: BSet, c_set: CSet) -> Result<Self> {
        stacked.layout().check_pairs("observed frequencies", y_hat.len())?;
        if let Some((index, &value)) = y_hat.iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
            return Err(Error::NonPositive {
                what: "observed frequency (non-negative)",
                index,
                value,
            });
        }
        b_set.check(y_hat.len())?;
        Ok(Self {
            stacked,
            y_hat,
            b_set,
            c_set,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InverseConfig {
    /// Initial trial step of each backtracking search.
    pub alpha0: f64,
    pub k_max: usize,
    /// Termination threshold on the change of `‖y − ŷ‖²`.
    pub epsilon: f64,
    /// Armijo sufficient-decrease constant.
    pub armijo_c1: f64,
    /// Backtracking gives up below this step.
    pub min_step: f64,
    pub forward: ForwardConfig,
    /// Step-attempt budget of each line-search forward solve. A trial that
    /// does not converge within it is rejected like one failing Armijo.
    pub trial_max_iterations: usize,
}

impl Default for InverseConfig {
    fn default() -> Self {
        Self {
            alpha0: 1.0,
            k_max: 100,
            epsilon: 0.005,
            armijo_c1: 1e-4,
            min_step: 1e-12,
            forward: ForwardConfig::default(),
            trial_max_iterations: 50,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Tolerance,
    MaxIterations,
    LineSearchFailure,
}

/// One evaluated point: the initial solve or a line-search trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub iteration: usize,
    /// `None` when the forward solve at the trial point failed.
    pub loss: Option<f64>,
    pub step: f64,
    pub accepted: bool,
}

#[derive(Clone, Debug)]
pub struct InverseResult {
    pub params: AffineRewardParams,
    /// Every evaluated point, including rejected trials.
    pub history: Vec<HistoryEntry>,
    /// Loss at each outer iteration, starting with iteration 1.
    pub losses: Vec<f64>,
    pub iterations_used: usize,
    pub terminated_by: Termination,
    /// Equilibrium at the final parameters.
    pub solution: EquilibriumSolution,
    /// How many times `∇_C` was formed.
    pub c_gradient_evaluations: usize,
}

impl InverseResult {
    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("at least one iteration")
    }
}

fn loss(y: &DVector<f64>, y_hat: &DVector<f64>) -> f64 {
    (y - y_hat).norm_squared()
}

/// Projected-gradient inverse solve over `(b, C)`.
pub fn solve_inverse(
    problem: &InverseProblem,
    b_init: &DVector<f64>,
    c_init: &DMatrix<f64>,
    config: &InverseConfig,
) -> Result<InverseResult> {
    run(problem, &problem.c_set, b_init, c_init, config)
}

/// Decoupled baseline: `C` pinned to zero, only `b` is updated.
pub fn solve_inverse_baseline(
    problem: &InverseProblem,
    b_init: &DVector<f64>,
    config: &InverseConfig,
) -> Result<InverseResult> {
    let l = b_init.len();
    run(problem, &CSet::Zero, b_init, &DMatrix::zeros(l, l), config)
}

fn run(
    problem: &InverseProblem,
    c_set: &CSet,
    b_init: &DVector<f64>,
    c_init: &DMatrix<f64>,
    config: &InverseConfig,
) -> Result<InverseResult> {
    let stacked = &problem.stacked;
    let y_hat = &problem.y_hat;
    let layout = stacked.layout();
    layout.check_pairs("initial b", b_init.len())?;
    layout.check_pairs("initial C", c_init.nrows())?;
    let couple = !matches!(c_set, CSet::Zero);

    let mut params = AffineRewardParams::new(
        project_b(b_init, &problem.b_set)?,
        project_c(c_init, c_set)?,
    )?;
    let mut history = Vec::new();
    let mut solution = solve_forward(stacked, &params, None, &config.forward).map_err(|e| {
        Error::InverseAborted {
            iteration: 1,
            history: Vec::new(),
            source: Box::new(e),
        }
    })?;
    let mut current = loss(&solution.y, y_hat);
    history.push(HistoryEntry {
        iteration: 1,
        loss: Some(current),
        step: 0.0,
        accepted: true,
    });
    let mut losses = vec![current];
    let mut previous: Option<f64> = None;
    let mut c_gradient_evaluations = 0;
    let mut k = 1;
    let trial_forward = ForwardConfig {
        max_iterations: config.trial_max_iterations.min(config.forward.max_iterations),
        ..config.forward.clone()
    };

    let terminated_by = loop {
        let change = previous.map_or(current, |p| (p - current).abs());
        if change < config.epsilon {
            break Termination::Tolerance;
        }
        if k >= config.k_max {
            break Termination::MaxIterations;
        }

        let grad_b = implicit_gradient_b(stacked, &params, &solution.y, y_hat)?;
        let grad_c = if couple {
            c_gradient_evaluations += 1;
            Some(&grad_b * solution.y.transpose())
        } else {
            None
        };

        let mut alpha = config.alpha0;
        let accepted = loop {
            if alpha < config.min_step {
                break None;
            }
            let b_trial = project_b(&(&params.b - &grad_b * alpha), &problem.b_set)?;
            let c_trial = match &grad_c {
                Some(g) => project_c(&(&params.c - g * alpha), c_set)?,
                None => params.c.clone(),
            };
            let mut directional = grad_b.dot(&(&b_trial - &params.b));
            if let Some(g) = &grad_c {
                directional += g.dot(&(&c_trial - &params.c));
            }
            let trial_params = AffineRewardParams::new(b_trial, c_trial)?;
            let trial = solve_forward(
                stacked,
                &trial_params,
                Some((&solution.y, &solution.v)),
                &trial_forward,
            );
            match trial {
                Ok(sol) => {
                    let trial_loss = loss(&sol.y, y_hat);
                    let ok = trial_loss <= current + config.armijo_c1 * directional;
                    history.push(HistoryEntry {
                        iteration: k + 1,
                        loss: Some(trial_loss),
                        step: alpha,
                        accepted: ok,
                    });
                    if ok {
                        break Some((trial_params, sol, trial_loss));
                    }
                }
                Err(err) => {
                    tracing::debug!(iteration = k + 1, alpha, %err, "trial forward solve failed");
                    history.push(HistoryEntry {
                        iteration: k + 1,
                        loss: None,
                        step: alpha,
                        accepted: false,
                    });
                }
            }
            alpha *= 0.5;
        };

        match accepted {
            Some((p, sol, l)) => {
                params = p;
                solution = sol;
                previous = Some(current);
                current = l;
                losses.push(l);
                k += 1;
                tracing::debug!(iteration = k, loss = l, alpha = alpha, "accepted step");
            }
            None => break Termination::LineSearchFailure,
        }
    };

    Ok(InverseResult {
        params,
        history,
        losses,
        iterations_used: k,
        terminated_by,
        solution,
        c_gradient_evaluations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game_model::PlayerMdp;

    fn absorbing() -> StackedGame {
        let mdp =
            PlayerMdp::new(DVector::from_element(1, 1.0), vec![DMatrix::from_element(1, 1, 1.0)])
                .unwrap();
        StackedGame::new(vec![mdp], 0.99)
    }

    #[test]
    fn jacobian_hand_case() {
        let st = absorbing();
        let j = assemble_jacobian(&st, &AffineRewardParams::zeros(1), &DVector::from_element(1, 100.0))
            .unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[0.0, -0.01, 0.01, 0.0]);
        assert!((j - expected).amax() < 1e-15);
        assert!(assemble_jacobian(&st, &AffineRewardParams::zeros(1), &DVector::zeros(1)).is_err());
    }

    #[test]
    fn project_b_cases() {
        let b = DVector::from_vec(vec![2.0, -0.5]);
        assert_eq!(project_b(&b, &BSet::Unconstrained).unwrap(), b);
        let boxed = project_b(&b, &BSet::uniform_box(2, -1.0, 1.0)).unwrap();
        assert_eq!(boxed.as_slice(), &[1.0, -0.5]);
        let ball = project_b(&DVector::from_vec(vec![3.0, 4.0]), &BSet::Ball { radius: 1.0 }).unwrap();
        assert!((ball - DVector::from_vec(vec![0.6, 0.8])).amax() < 1e-15);
        assert!(project_b(&b, &BSet::uniform_box(3, -1.0, 1.0)).is_err());
        assert!(project_b(&b, &BSet::Ball { radius: -1.0 }).is_err());
        assert!(project_b(&b, &BSet::uniform_box(2, 1.0, -1.0)).is_err());
    }

    #[test]
    fn project_c_cases() {
        let identity = DMatrix::<f64>::identity(2, 2);
        assert!(project_c(&identity, &CSet::NsdSymmetric).unwrap().amax() < 1e-15);
        let skew = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        assert_eq!(project_c(&skew, &CSet::NsdSymmetric).unwrap(), skew);
        let nsd = DMatrix::from_row_slice(2, 2, &[-2.0, 3.0, -1.0, -1.0]);
        assert!((project_c(&nsd, &CSet::NsdSymmetric).unwrap() - &nsd).amax() < 1e-12);
        assert_eq!(project_c(&nsd, &CSet::Zero).unwrap(), DMatrix::zeros(2, 2));
        assert!(project_c(&DMatrix::zeros(2, 3), &CSet::NsdSymmetric).is_err());
    }

    #[test]
    fn masked_projection_keeps_structure_and_cone() {
        // entries all −1 are NSD, but zeroing the (0,2) pair breaks it
        let layout = Layout::new(&[(1, 1), (1, 1), (1, 1)]);
        let allowed = vec![
            vec![true, true, false],
            vec![true, true, true],
            vec![false, true, true],
        ];
        let set = CSet::block_mask(&layout, &allowed).unwrap();
        let c = DMatrix::from_element(3, 3, -1.0);
        let p = project_c(&c, &set).unwrap();
        assert_eq!(p[(0, 2)], 0.0);
        assert_eq!(p[(2, 0)], 0.0);
        assert!(max_symmetric_eigenvalue(&(&p + p.transpose())) <= 1e-10);
        // already feasible points are fixed
        let q = project_c(&p, &set).unwrap();
        assert!((q - &p).amax() < 1e-9);
    }

    #[test]
    fn baseline_never_forms_c_gradient() {
        let mdp = PlayerMdp::new(
            DVector::from_vec(vec![0.5, 0.5]),
            vec![
                DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.2, 0.8]),
                DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.1, 0.9]),
            ],
        )
        .unwrap();
        let st = StackedGame::new(vec![mdp], 0.9);
        let truth = AffineRewardParams::decoupled(DVector::from_vec(vec![0.5, -0.5, 0.2, 0.0]));
        let y_hat = solve_forward(&st, &truth, None, &ForwardConfig::default()).unwrap().y;
        let problem = InverseProblem::new(st, y_hat, BSet::Unconstrained, CSet::NsdSymmetric).unwrap();
        let res = solve_inverse_baseline(&problem, &DVector::zeros(4), &InverseConfig::default()).unwrap();
        assert_eq!(res.c_gradient_evaluations, 0);
        assert_eq!(res.params.c, DMatrix::zeros(4, 4));
        assert!(res.final_loss() < res.losses[0]);
    }
}
