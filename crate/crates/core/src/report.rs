//! Evaluation metrics and the multi-seed experiment driver.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::ForwardConfig;
use crate::gridworld::GridSpec;
use crate::inverse::{
    solve_inverse, solve_inverse_baseline, BSet, CSet, InverseConfig, InverseProblem, InverseResult, Termination,
};
use crate::io;
use crate::trajectories::observed_policies;
use crate::StackedGame;

pub const KL_FLOOR: f64 = 1e-9;
const ROW_TOL: f64 = 1e-6;

fn check_distribution(what: &'static str, pi: &DMatrix<f64>) -> Result<()> {
    for (row, r) in pi.row_iter().enumerate() {
        let sum: f64 = r.iter().sum();
        if r.iter().any(|&p| !(p >= -ROW_TOL)) || !((sum - 1.0).abs() <= ROW_TOL) {
            return Err(Error::NotDistribution { what, row, sum });
        }
    }
    Ok(())
}

/// Per-state `KL(π ‖ π̂)` with `π̂` floored at `floor`.
pub fn kl_divergence_per_state(pi: &DMatrix<f64>, pi_hat: &DMatrix<f64>, floor: f64) -> Result<DVector<f64>> {
    if pi.shape() != pi_hat.shape() {
        return Err(Error::Dimension {
            what: "policy entries",
            expected: pi.len(),
            actual: pi_hat.len(),
        });
    }
    if !(floor > 0.0) {
        return Err(Error::Validation(format!("KL floor must be positive, got {floor}")));
    }
    check_distribution("policy", pi)?;
    check_distribution("reference policy", pi_hat)?;
    Ok(DVector::from_fn(pi.nrows(), |s, _| {
        (0..pi.ncols())
            .filter(|&a| pi[(s, a)] > 0.0)
            .map(|a| pi[(s, a)] * (pi[(s, a)] / pi_hat[(s, a)].max(floor)).ln())
            .sum()
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Proposed,
    Baseline,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Proposed => "proposed",
            Mode::Baseline => "baseline",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub alpha0: f64,
    pub epsilon: f64,
    pub k_max: usize,
    pub gamma: f64,
    /// Initial `b` and `C` entries are drawn uniformly from `[-init_scale, init_scale]`.
    pub init_scale: f64,
    pub b_set: BSet,
    pub c_set: CSet,
    pub forward: ForwardConfig,
    pub game: Option<PathBuf>,
    pub observations: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: (1..=10).collect(),
            alpha0: 1.0,
            epsilon: 0.005,
            k_max: 100,
            gamma: 0.99,
            init_scale: 1.0,
            b_set: BSet::Unconstrained,
            c_set: CSet::NsdSymmetric,
            forward: ForwardConfig::default(),
            game: None,
            observations: None,
            output: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Validation("no seeds given".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Validation(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Validation(format!("gamma must lie in [0, 1), got {}", self.gamma)));
        }
        if !(self.alpha0 > 0.0) {
            return Err(Error::Validation(format!("alpha0 must be positive, got {}", self.alpha0)));
        }
        if !(self.init_scale >= 0.0) {
            return Err(Error::Validation(format!("init_scale must be non-negative, got {}", self.init_scale)));
        }
        Ok(())
    }

    pub fn inverse_config(&self) -> InverseConfig {
        InverseConfig {
            alpha0: self.alpha0,
            k_max: self.k_max,
            epsilon: self.epsilon,
            forward: self.forward.clone(),
            ..InverseConfig::default()
        }
    }
}

/// Initial `(b, C)` for a seed. The same draw is used by both modes.
pub fn initial_parameters(seed: u64, l: usize, scale: f64) -> (DVector<f64>, DMatrix<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |_, _| if scale > 0.0 { rng.gen_range(-scale..=scale) } else { 0.0 };
    let b = DVector::from_fn(l, &mut draw);
    let c = DMatrix::from_fn(l, l, &mut draw);
    (b, c)
}

#[derive(Clone, Debug)]
pub struct SeedRun {
    pub result: InverseResult,
    /// Per-player, per-state KL of the fitted equilibrium against the observed policies.
    pub kl: Vec<DVector<f64>>,
}

impl SeedRun {
    pub fn mean_kl(&self) -> f64 {
        let total: f64 = self.kl.iter().map(|k| k.sum()).sum();
        let count: usize = self.kl.iter().map(|k| k.len()).sum();
        total / count as f64
    }
}

#[derive(Clone, Debug)]
pub struct SeedOutcome {
    pub seed: u64,
    pub run: std::result::Result<SeedRun, String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; zero for a single value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std })
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.6}±{:.6}", self.mean, self.std)
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentSummary {
    pub mode: Mode,
    pub seeds: Vec<SeedOutcome>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mode: Mode,
    pub succeeded: usize,
    pub failed: usize,
    pub iterations: Option<MeanStd>,
    pub final_loss: Option<MeanStd>,
    pub mean_kl: Option<MeanStd>,
    pub all_terminated_by_tolerance: bool,
}

impl ExperimentSummary {
    pub fn successful(&self) -> impl Iterator<Item = (u64, &SeedRun)> {
        self.seeds.iter().filter_map(|o| o.run.as_ref().ok().map(|r| (o.seed, r)))
    }

    pub fn aggregate(&self) -> Aggregate {
        let ok: Vec<&SeedRun> = self.successful().map(|(_, r)| r).collect();
        let iters: Vec<f64> = ok.iter().map(|r| r.result.iterations_used as f64).collect();
        let losses: Vec<f64> = ok.iter().map(|r| r.result.final_loss()).collect();
        let kls: Vec<f64> = ok.iter().map(|r| r.mean_kl()).collect();
        Aggregate {
            mode: self.mode,
            succeeded: ok.len(),
            failed: self.seeds.len() - ok.len(),
            iterations: MeanStd::of(&iters),
            final_loss: MeanStd::of(&losses),
            mean_kl: MeanStd::of(&kls),
            all_terminated_by_tolerance: ok.len() == self.seeds.len()
                && ok.iter().all(|r| r.result.terminated_by == Termination::Tolerance),
        }
    }
}

/// Fits `(b, C)` (or `b` alone for the baseline) once per seed.
///
/// Seeds run in parallel; a failing seed is recorded and does not stop the others.
pub fn run_experiment(
    config: &ExperimentConfig,
    stacked: &StackedGame,
    y_hat: &DVector<f64>,
    mode: Mode,
) -> Result<ExperimentSummary> {
    config.validate()?;
    let problem = InverseProblem::new(stacked.clone(), y_hat.clone(), config.b_set.clone(), config.c_set.clone())?;
    let observed = observed_policies(y_hat, stacked.layout());
    let inverse = config.inverse_config();
    let l = stacked.pair_count();

    let seeds = config
        .seeds
        .par_iter()
        .map(|&seed| {
            let (b0, c0) = initial_parameters(seed, l, config.init_scale);
            let run = match mode {
                Mode::Proposed => solve_inverse(&problem, &b0, &c0, &inverse),
                Mode::Baseline => solve_inverse_baseline(&problem, &b0, &inverse),
            }
            .and_then(|result| {
                let kl = result
                    .solution
                    .policies
                    .iter()
                    .zip(&observed)
                    .map(|(pi, pi_hat)| kl_divergence_per_state(pi, pi_hat, KL_FLOOR))
                    .collect::<Result<Vec<_>>>()?;
                Ok(SeedRun { result, kl })
            })
            .map_err(|e| {
                tracing::warn!(seed, mode = mode.name(), "seed failed: {e}");
                e.to_string()
            });
            if let Ok(r) = &run {
                tracing::info!(
                    seed,
                    mode = mode.name(),
                    iterations = r.result.iterations_used,
                    loss = r.result.final_loss(),
                    "seed finished"
                );
            }
            SeedOutcome { seed, run }
        })
        .collect();
    Ok(ExperimentSummary { mode, seeds })
}

fn csv_field(text: &str) -> String {
    if text.contains([',', '"', '\n']) {
        format!("\"{}\"", text.replace('"', "\"\""))
    } else {
        text.to_string()
    }
}

/// Writes per-seed loss curves, results and KL tables, plus `summary.csv`
/// and `summary.json`, under `dir`. Heatmaps are added when `grid` is given.
pub fn write_experiment(dir: &Path, summary: &ExperimentSummary, grid: Option<&GridSpec>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut rows = Vec::new();
    for outcome in &summary.seeds {
        let seed = outcome.seed;
        match &outcome.run {
            Ok(run) => {
                io::write_loss_csv(&dir.join(format!("loss_seed{seed}.csv")), &run.result.losses)?;
                io::save_inverse_result(&dir.join(format!("inverse_seed{seed}.json")), &run.result)?;
                write_kl_table(&dir.join(format!("kl_seed{seed}.csv")), &run.kl)?;
                if let Some(grid) = grid {
                    emit_heatmap_data(dir, &format!("kl_seed{seed}"), &run.kl, grid)?;
                }
                let terminated = serde_json::to_value(run.result.terminated_by)?;
                rows.push(format!(
                    "{seed},ok,{},{},{},{}",
                    terminated.as_str().unwrap_or_default(),
                    run.result.iterations_used,
                    run.result.final_loss(),
                    run.mean_kl()
                ));
            }
            Err(msg) => rows.push(format!("{seed},{},,,,", csv_field(&format!("failed: {msg}")))),
        }
    }
    let agg = summary.aggregate();
    let fmt = |m: Option<MeanStd>| m.map(|m| m.to_string()).unwrap_or_default();
    rows.push(format!(
        "aggregate,{}/{},,{},{},{}",
        agg.succeeded,
        agg.succeeded + agg.failed,
        fmt(agg.iterations),
        fmt(agg.final_loss),
        fmt(agg.mean_kl)
    ));

    let mut w = BufWriter::new(fs::File::create(dir.join("summary.csv"))?);
    writeln!(w, "seed,status,terminated_by,iterations,final_loss,mean_kl")?;
    for row in rows {
        writeln!(w, "{row}")?;
    }
    w.flush()?;

    let mut w = BufWriter::new(fs::File::create(dir.join("summary.json"))?);
    serde_json::to_writer_pretty(&mut w, &agg)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn write_kl_table(path: &Path, kl: &[DVector<f64>]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "player,state,kl")?;
    for (p, k) in kl.iter().enumerate() {
        for (s, v) in k.iter().enumerate() {
            writeln!(w, "{},{},{}", p + 1, s + 1, v)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes `{prefix}_player{i}.csv` (two decimals) and
/// `{prefix}_player{i}_full.csv` for each player, laid out as the grid.
pub fn emit_heatmap_data(dir: &Path, prefix: &str, kl: &[DVector<f64>], grid: &GridSpec) -> Result<Vec<PathBuf>> {
    let cells = grid.cells();
    for k in kl {
        if k.len() != cells {
            return Err(Error::Dimension {
                what: "KL values per player",
                expected: cells,
                actual: k.len(),
            });
        }
    }
    let mut written = Vec::new();
    for (p, k) in kl.iter().enumerate() {
        let mut rounded = String::new();
        let mut full = String::new();
        for row in 0..grid.height {
            let vals: Vec<f64> = (0..grid.width).map(|col| k[grid.index(row, col)]).collect();
            let r: Vec<String> = vals.iter().map(|v| format!("{v:.2}")).collect();
            let f: Vec<String> = vals.iter().map(|v| v.to_string()).collect();
            rounded.push_str(&r.join(","));
            rounded.push('\n');
            full.push_str(&f.join(","));
            full.push('\n');
        }
        let path = dir.join(format!("{prefix}_player{}.csv", p + 1));
        fs::write(&path, rounded)?;
        written.push(path);
        let path = dir.join(format!("{prefix}_player{}_full.csv", p + 1));
        fs::write(&path, full)?;
        written.push(path);
    }
    Ok(written)
}

/// Reads a full-precision heatmap file back into per-state order.
pub fn read_heatmap(path: &Path, grid: &GridSpec) -> Result<DVector<f64>> {
    let mat = io::read_matrix_csv(path)?;
    if mat.shape() != (grid.height, grid.width) {
        return Err(Error::Dimension {
            what: "heatmap cells",
            expected: grid.cells(),
            actual: mat.len(),
        });
    }
    let mut out = DVector::zeros(grid.cells());
    for row in 0..grid.height {
        for col in 0..grid.width {
            out[grid.index(row, col)] = mat[(row, col)];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, v)
    }

    #[test]
    fn kl_cases() {
        let p = m(2, 2, &[0.3, 0.7, 1.0, 0.0]);
        assert_eq!(kl_divergence_per_state(&p, &p, KL_FLOOR).unwrap().amax(), 0.0);
        let d = kl_divergence_per_state(&m(1, 2, &[1.0, 0.0]), &m(1, 2, &[0.5, 0.5]), KL_FLOOR).unwrap();
        assert!((d[0] - 2f64.ln()).abs() < 1e-15);
        let d = kl_divergence_per_state(&m(1, 2, &[0.5, 0.5]), &m(1, 2, &[1.0, 0.0]), KL_FLOOR).unwrap();
        let expected = 0.5 * (0.5f64).ln() + 0.5 * (0.5 / 1e-9f64).ln();
        assert!((d[0] - expected).abs() < 1e-12);
        assert!((d[0] - 9.66).abs() < 1e-2);
    }

    #[test]
    fn kl_rejects_non_distributions() {
        let good = m(1, 2, &[0.5, 0.5]);
        let bad = m(1, 2, &[0.5, 0.6]);
        assert!(matches!(
            kl_divergence_per_state(&bad, &good, KL_FLOOR),
            Err(Error::NotDistribution { .. })
        ));
        assert!(kl_divergence_per_state(&good, &bad, KL_FLOOR).is_err());
        assert!(kl_divergence_per_state(&good, &good, 0.0).is_err());
    }

    #[test]
    fn mean_std_uses_sample_deviation() {
        let s = MeanStd::of(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.mean, 2.5);
        assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(MeanStd::of(&[7.0]).unwrap().std, 0.0);
        assert!(MeanStd::of(&[]).is_none());
    }

    #[test]
    fn heatmap_layout_and_round_trip() {
        let grid = GridSpec::predator_prey(5, 5, 2, 0.1);
        let dir = tempfile::tempdir().unwrap();
        let kl: Vec<DVector<f64>> = (0..3)
            .map(|p| DVector::from_fn(25, |s, _| (s as f64 + 0.123456789) / (p as f64 + 3.0)))
            .collect();
        let files = emit_heatmap_data(dir.path(), "kl", &kl, &grid).unwrap();
        assert_eq!(files.len(), 6);
        let text = fs::read_to_string(dir.path().join("kl_player1.csv")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 5);
        assert!(lines.iter().all(|l| l.split(',').count() == 5));
        assert!(lines[0].starts_with("0.04,"));
        for (p, k) in kl.iter().enumerate() {
            let back = read_heatmap(&dir.path().join(format!("kl_player{}_full.csv", p + 1)), &grid).unwrap();
            assert_eq!(&back, k);
        }
        let zeros = vec![DVector::zeros(25)];
        emit_heatmap_data(dir.path(), "z", &zeros, &grid).unwrap();
        let text = fs::read_to_string(dir.path().join("z_player1.csv")).unwrap();
        assert!(text.lines().all(|l| l == "0.00,0.00,0.00,0.00,0.00"));
        assert!(emit_heatmap_data(dir.path(), "bad", &[DVector::zeros(24)], &grid).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ExperimentConfig::default().validate().is_ok());
        let bad = ExperimentConfig { seeds: vec![], ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = ExperimentConfig { gamma: 1.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = ExperimentConfig { epsilon: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let parsed: ExperimentConfig = serde_json::from_str(r#"{"seeds":[3,4]}"#).unwrap();
        assert_eq!(parsed.seeds, vec![3, 4]);
        assert_eq!(parsed.k_max, 100);
    }

    #[test]
    fn initial_parameters_deterministic() {
        let (b1, c1) = initial_parameters(5, 4, 1.0);
        let (b2, c2) = initial_parameters(5, 4, 1.0);
        assert_eq!(b1, b2);
        assert_eq!(c1, c2);
        assert!(b1.amax() <= 1.0 && c1.amax() <= 1.0);
        assert_ne!(initial_parameters(6, 4, 1.0).0, b1);
    }
}
