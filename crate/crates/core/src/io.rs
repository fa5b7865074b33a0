//! JSON and CSV file formats.
//!
//! Games are stored as `{gamma, players: [{n, m, q, T}], b, C}` where `T` has
//! one row per state-action pair (`s·m + a`) holding next-state
//! probabilities and `C` is a list of rows. Numbers are written with the
//! shortest representation that parses back to the same `f64`.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::EquilibriumSolution;
use crate::game_model::{validate_game, AffineGame, AffineRewardParams, Layout, PlayerMdp};
use crate::inverse::{HistoryEntry, InverseResult, Termination};
use crate::trajectories::{ObservationSet, Trajectory};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlayerFile {
    pub n: usize,
    pub m: usize,
    pub q: Vec<f64>,
    #[serde(rename = "T")]
    pub t: Vec<Vec<f64>>,
}

impl PlayerFile {
    pub fn from_mdp(mdp: &PlayerMdp) -> Self {
        let (n, m) = (mdp.states(), mdp.actions());
        let mut t = Vec::with_capacity(n * m);
        for s in 0..n {
            for a in 0..m {
                t.push(mdp.transitions_from(s).row(a).iter().copied().collect());
            }
        }
        Self {
            n,
            m,
            q: mdp.initial().iter().copied().collect(),
            t,
        }
    }

    pub fn to_mdp(&self) -> Result<PlayerMdp> {
        let (n, m) = (self.n, self.m);
        if self.t.len() != n * m {
            return Err(Error::Dimension {
                what: "transition rows",
                expected: n * m,
                actual: self.t.len(),
            });
        }
        let mut transitions = Vec::with_capacity(n);
        for s in 0..n {
            let mut block = DMatrix::zeros(m, n);
            for a in 0..m {
                let row = &self.t[s * m + a];
                if row.len() != n {
                    return Err(Error::Dimension {
                        what: "transition row",
                        expected: n,
                        actual: row.len(),
                    });
                }
                for (j, &p) in row.iter().enumerate() {
                    block[(a, j)] = p;
                }
            }
            transitions.push(block);
        }
        PlayerMdp::new(DVector::from_vec(self.q.clone()), transitions)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GameFile {
    pub gamma: f64,
    pub players: Vec<PlayerFile>,
    pub b: Vec<f64>,
    #[serde(rename = "C")]
    pub c: Vec<Vec<f64>>,
}

pub fn matrix_rows(mat: &DMatrix<f64>) -> Vec<Vec<f64>> {
    mat.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn matrix_from_rows(what: &'static str, rows: &[Vec<f64>], cols: usize) -> Result<DMatrix<f64>> {
    let mut mat = DMatrix::zeros(rows.len(), cols);
    for (i, row) in rows.iter().enumerate() {
        if row.len() != cols {
            return Err(Error::Dimension {
                what,
                expected: cols,
                actual: row.len(),
            });
        }
        for (j, &x) in row.iter().enumerate() {
            mat[(i, j)] = x;
        }
    }
    Ok(mat)
}

impl GameFile {
    pub fn from_game(game: &AffineGame) -> Self {
        Self {
            gamma: game.gamma,
            players: game.players.iter().map(PlayerFile::from_mdp).collect(),
            b: game.params.b.iter().copied().collect(),
            c: matrix_rows(&game.params.c),
        }
    }

    /// Builds the game without checking the existence conditions.
    pub fn to_game_unchecked(&self) -> Result<AffineGame> {
        let players = self
            .players
            .iter()
            .map(PlayerFile::to_mdp)
            .collect::<Result<Vec<_>>>()?;
        let l = self.b.len();
        if self.c.len() != l {
            return Err(Error::Dimension {
                what: "rows of C",
                expected: l,
                actual: self.c.len(),
            });
        }
        let c = matrix_from_rows("row of C", &self.c, l)?;
        let params = AffineRewardParams::new(DVector::from_vec(self.b.clone()), c)?;
        Ok(AffineGame::new(players, self.gamma, params))
    }

    /// Builds the game and rejects it unless an equilibrium is guaranteed.
    pub fn to_game(&self) -> Result<AffineGame> {
        let game = self.to_game_unchecked()?;
        let report = validate_game(&game);
        if !report.existence_ok() {
            return Err(Error::Validation(report.to_string()));
        }
        for v in &report.violations {
            tracing::warn!("{v}");
        }
        Ok(game)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let r = BufReader::new(fs::File::open(path)?);
    Ok(serde_json::from_reader(r)?)
}

pub fn save_game(path: &Path, game: &AffineGame) -> Result<()> {
    write_json(path, &GameFile::from_game(game))
}

pub fn load_game(path: &Path) -> Result<AffineGame> {
    read_json::<GameFile>(path)?.to_game()
}

/// Reads only the per-player dynamics and discount of a game file.
pub fn load_dynamics(path: &Path) -> Result<(Vec<PlayerMdp>, f64)> {
    let file: GameFile = read_json(path)?;
    let players = file
        .players
        .iter()
        .map(PlayerFile::to_mdp)
        .collect::<Result<Vec<_>>>()?;
    Ok((players, file.gamma))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolutionFile {
    pub y: Vec<f64>,
    pub v: Vec<f64>,
    pub policies: Vec<Vec<Vec<f64>>>,
    pub residual_norm: f64,
    pub iterations: usize,
}

impl SolutionFile {
    pub fn from_solution(sol: &EquilibriumSolution) -> Self {
        Self {
            y: sol.y.iter().copied().collect(),
            v: sol.v.iter().copied().collect(),
            policies: sol.policies.iter().map(matrix_rows).collect(),
            residual_norm: sol.residual_norm,
            iterations: sol.iterations,
        }
    }
}

pub fn save_solution(path: &Path, sol: &EquilibriumSolution) -> Result<()> {
    write_json(path, &SolutionFile::from_solution(sol))
}

pub fn load_solution(path: &Path) -> Result<SolutionFile> {
    read_json(path)
}

/// Writes a matrix as headerless CSV.
pub fn write_matrix_csv(path: &Path, mat: &DMatrix<f64>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for row in mat.row_iter() {
        let cells: Vec<String> = row.iter().map(|x| x.to_string()).collect();
        writeln!(w, "{}", cells.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row = line
            .split(',')
            .map(|c| c.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Validation(format!("{}: line {}: {e}", path.display(), i + 1)))?;
        rows.push(row);
    }
    let cols = rows.first().map_or(0, Vec::len);
    matrix_from_rows("CSV row", &rows, cols)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InverseResultFile {
    pub b: Vec<f64>,
    #[serde(rename = "C")]
    pub c: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub losses: Vec<f64>,
    pub final_loss: f64,
    pub iterations_used: usize,
    pub terminated_by: Termination,
    pub c_gradient_evaluations: usize,
    pub history: Vec<HistoryEntry>,
}

impl InverseResultFile {
    pub fn from_result(res: &InverseResult) -> Self {
        Self {
            b: res.params.b.iter().copied().collect(),
            c: matrix_rows(&res.params.c),
            y: res.solution.y.iter().copied().collect(),
            losses: res.losses.clone(),
            final_loss: res.final_loss(),
            iterations_used: res.iterations_used,
            terminated_by: res.terminated_by,
            c_gradient_evaluations: res.c_gradient_evaluations,
            history: res.history.clone(),
        }
    }

    pub fn params(&self) -> Result<AffineRewardParams> {
        let c = matrix_from_rows("row of C", &self.c, self.b.len())?;
        AffineRewardParams::new(DVector::from_vec(self.b.clone()), c)
    }
}

pub fn save_inverse_result(path: &Path, res: &InverseResult) -> Result<()> {
    write_json(path, &InverseResultFile::from_result(res))
}

pub fn load_inverse_result(path: &Path) -> Result<InverseResultFile> {
    read_json(path)
}

/// Per-iteration loss series with header `iter,loss`.
pub fn write_loss_csv(path: &Path, losses: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "iter,loss")?;
    for (k, l) in losses.iter().enumerate() {
        writeln!(w, "{},{}", k + 1, l)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<(usize, f64)>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some("iter,loss") {
        return Err(Error::Validation(format!("{}: missing iter,loss header", path.display())));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let (k, v) = l
                .split_once(',')
                .ok_or_else(|| Error::Validation(format!("bad loss row {l:?}")))?;
            let k = k.parse().map_err(|_| Error::Validation(format!("bad iteration {k:?}")))?;
            let v = v.parse().map_err(|_| Error::Validation(format!("bad loss {v:?}")))?;
            Ok((k, v))
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct TrajectoryHeader {
    dims: Vec<(usize, usize)>,
}

#[derive(Serialize, Deserialize)]
struct TrajectoryLine {
    players: Vec<Vec<(usize, usize)>>,
}

/// Writes the JSON-lines trajectory format with 1-based indices.
pub fn save_trajectories(path: &Path, dims: &[(usize, usize)], trajectories: &[Trajectory]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer(&mut w, &TrajectoryHeader { dims: dims.to_vec() })?;
    w.write_all(b"\n")?;
    for traj in trajectories {
        let line = TrajectoryLine {
            players: traj
                .players
                .iter()
                .map(|steps| steps.iter().map(|&(s, a)| (s + 1, a + 1)).collect())
                .collect(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_trajectories(path: &Path) -> Result<(Vec<(usize, usize)>, Vec<Trajectory>)> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut lines = reader.lines();
    let header: TrajectoryHeader = match lines.next() {
        Some(line) => serde_json::from_str(&line?)?,
        None => return Err(Error::Trajectory("empty trajectory file".into())),
    };
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: TrajectoryLine = serde_json::from_str(&line)?;
        let mut players = Vec::with_capacity(parsed.players.len());
        for steps in parsed.players {
            let mut zero = Vec::with_capacity(steps.len());
            for (s, a) in steps {
                if s == 0 || a == 0 {
                    return Err(Error::Trajectory(format!(
                        "trajectory {}: indices are 1-based",
                        i + 1
                    )));
                }
                zero.push((s - 1, a - 1));
            }
            players.push(zero);
        }
        let traj = Trajectory::new(players)?;
        traj.check_dims(&header.dims)?;
        out.push(traj);
    }
    Ok((header.dims, out))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationFile {
    pub gamma: f64,
    pub y_hat: Vec<f64>,
    pub dynamics: Vec<PlayerFile>,
    pub trajectory_count: usize,
    pub capped_length: usize,
    pub rescaled: bool,
}

impl ObservationFile {
    pub fn from_observations(obs: &ObservationSet) -> Self {
        Self {
            gamma: obs.gamma,
            y_hat: obs.y_hat.iter().copied().collect(),
            dynamics: obs.dynamics.iter().map(PlayerFile::from_mdp).collect(),
            trajectory_count: obs.trajectory_count,
            capped_length: obs.capped_length,
            rescaled: obs.rescaled,
        }
    }

    pub fn to_observations(&self) -> Result<ObservationSet> {
        let dynamics = self
            .dynamics
            .iter()
            .map(PlayerFile::to_mdp)
            .collect::<Result<Vec<_>>>()?;
        Layout::from_players(&dynamics).check_pairs("y_hat", self.y_hat.len())?;
        Ok(ObservationSet {
            gamma: self.gamma,
            y_hat: DVector::from_vec(self.y_hat.clone()),
            dynamics,
            trajectory_count: self.trajectory_count,
            capped_length: self.capped_length,
            rescaled: self.rescaled,
        })
    }
}

pub fn save_observations(path: &Path, obs: &ObservationSet) -> Result<()> {
    write_json(path, &ObservationFile::from_observations(obs))
}

pub fn load_observations(path: &Path) -> Result<ObservationSet> {
    read_json::<ObservationFile>(path)?.to_observations()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::{build_game, CouplingConfig, GridSpec};

    #[test]
    fn game_round_trip_is_exact() {
        let spec = GridSpec::predator_prey(3, 2, 1, 0.1);
        let mut game = build_game(&spec, 0.95, &CouplingConfig::default()).unwrap();
        game.params.b[0] = 0.1 + 0.2;
        game.params.b[1] = 1.0 / 3.0;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.json");
        save_game(&path, &game).unwrap();
        let back = load_game(&path).unwrap();
        assert_eq!(back, game);
        let path2 = dir.path().join("g2.json");
        save_game(&path2, &back).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn invalid_game_rejected() {
        let spec = GridSpec::predator_prey(2, 2, 1, 0.0);
        let game = build_game(&spec, 0.9, &CouplingConfig::default()).unwrap();
        let mut file = GameFile::from_game(&game);
        file.players[0].t[0][0] += 0.5;
        assert!(matches!(file.to_game(), Err(Error::Validation(_))));
        file = GameFile::from_game(&game);
        file.gamma = 1.0;
        assert!(file.to_game().is_err());
    }

    #[test]
    fn trajectories_are_one_based_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let traj = Trajectory::new(vec![vec![(0, 1), (2, 0)]]).unwrap();
        save_trajectories(&path, &[(3, 2)], &[traj.clone()]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().nth(1).unwrap(), r#"{"players":[[[1,2],[3,1]]]}"#);
        let (dims, back) = load_trajectories(&path).unwrap();
        assert_eq!(dims, vec![(3, 2)]);
        assert_eq!(back, vec![traj]);
    }

    #[test]
    fn out_of_range_trajectory_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        fs::write(&path, "{\"dims\":[[2,2]]}\n{\"players\":[[[3,1]]]}\n").unwrap();
        assert!(load_trajectories(&path).is_err());
        fs::write(&path, "{\"dims\":[[2,2]]}\n{\"players\":[[[0,1]]]}\n").unwrap();
        assert!(load_trajectories(&path).is_err());
    }

    #[test]
    fn loss_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.csv");
        write_loss_csv(&path, &[3.5, 1.25, 0.1 + 0.2]).unwrap();
        let back = read_loss_csv(&path).unwrap();
        assert_eq!(back, vec![(1, 3.5), (2, 1.25), (3, 0.1 + 0.2)]);
    }
}
