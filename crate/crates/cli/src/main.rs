use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use softbellman_core::forward::solve_forward;
use softbellman_core::gridworld::{
    build_game, build_player_mdp, sample_trajectories, sample_until_full_length, Behavior, CouplingConfig, GridSpec,
};
use softbellman_core::inverse::{
    solve_inverse, solve_inverse_baseline, BSet, CSet, InverseConfig, InverseProblem,
};
use softbellman_core::report::{
    emit_heatmap_data, initial_parameters, kl_divergence_per_state, run_experiment, write_experiment,
    ExperimentConfig, Mode, KL_FLOOR,
};
use softbellman_core::trajectories::{build_observations, observed_policies, EstimateConfig};
use softbellman_core::{build_stacked, io, Error, ForwardConfig, PlayerMdp, StackedGame};

#[derive(Parser, Debug)]
#[command(name = "softbellman", version, about = "Soft-Bellman equilibria of affine Markov games")]
struct Cli {
    /// JSON file with experiment/solver settings; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample predator-prey trajectories and write the ground-truth game.
    Simulate(SimulateArgs),
    /// Estimate frequencies and dynamics from a trajectory file.
    Estimate(EstimateArgs),
    /// Solve for the equilibrium of a game file.
    Forward(ForwardArgs),
    /// Fit reward parameters to observed frequencies.
    Inverse(InverseArgs),
    /// Compare the equilibrium of fitted parameters with observed policies.
    Evaluate(EvaluateArgs),
    /// Multi-seed comparison of the coupled and decoupled methods.
    Experiment(ExperimentArgs),
}

#[derive(Args, Debug, Clone)]
struct GridArgs {
    /// Grid size as WIDTHxHEIGHT.
    #[arg(long, default_value = "5x5", value_parser = parse_grid)]
    grid: (usize, usize),
    #[arg(long, default_value_t = 2)]
    predators: usize,
    #[arg(long, default_value_t = 0.1)]
    slip: f64,
    /// Coupling strength of the generated game.
    #[arg(long, default_value_t = CouplingConfig::default().kappa)]
    kappa: f64,
}

impl GridArgs {
    fn spec(&self) -> anyhow::Result<GridSpec> {
        let (w, h) = self.grid;
        if w == 0 || h == 0 {
            bail!(Error::Validation("grid dimensions must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.slip) {
            bail!(Error::Validation(format!("slip must lie in [0, 1], got {}", self.slip)));
        }
        Ok(GridSpec::predator_prey(w, h, self.predators, self.slip))
    }

    fn coupling(&self) -> CouplingConfig {
        CouplingConfig {
            kappa: self.kappa,
            ..CouplingConfig::default()
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum PolicyKind {
    Equilibrium,
    Scripted,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    grid: GridArgs,
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    #[arg(long, default_value_t = 6)]
    maxlen: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = PolicyKind::Equilibrium)]
    policy: PolicyKind,
    /// Keep sampling until this many episodes reach `maxlen` (overrides --episodes).
    #[arg(long)]
    full_episodes: Option<usize>,
    /// Action noise of the scripted policy.
    #[arg(long, default_value_t = 0.2)]
    noise: f64,
    #[arg(long, default_value_t = 0.99)]
    gamma: f64,
}

#[derive(Args, Debug)]
struct EstimateArgs {
    #[arg(long)]
    trajectories: PathBuf,
    #[arg(long, default_value_t = 0.99)]
    gamma: f64,
    /// Additive smoothing of transition counts.
    #[arg(long, default_value_t = 1e-3)]
    smoothing: f64,
    /// Keep the finite-horizon mass instead of rescaling it.
    #[arg(long)]
    no_rescale: bool,
    /// Skip pruning; all trajectories must then share one length.
    #[arg(long)]
    no_prune: bool,
}

#[derive(Args, Debug)]
struct ForwardArgs {
    #[arg(long)]
    game: PathBuf,
    /// Also write one policy CSV per player.
    #[arg(long)]
    policy_csv: bool,
}

#[derive(Args, Debug)]
struct InverseArgs {
    #[arg(long)]
    observations: PathBuf,
    /// Game file whose dynamics replace the estimated ones.
    #[arg(long)]
    dynamics: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    alpha0: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    kmax: Option<usize>,
    /// `unconstrained`, `box:LO,HI` or `ball:RADIUS`.
    #[arg(long, value_parser = parse_bset)]
    bset: Option<BSetArg>,
    /// `nsd`, `zero` or `mask:FILE` (JSON matrix of allowed player blocks).
    #[arg(long)]
    cset: Option<String>,
    /// Decoupled baseline: C is fixed at zero.
    #[arg(long)]
    baseline: bool,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    observations: PathBuf,
    /// Inverse result JSON holding fitted `b` and `C`.
    #[arg(long)]
    result: PathBuf,
    #[arg(long)]
    dynamics: Option<PathBuf>,
    /// Write KL heatmaps for a WIDTHxHEIGHT grid.
    #[arg(long, value_parser = parse_grid)]
    heatmap_grid: Option<(usize, usize)>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Proposed,
    Baseline,
    Both,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    /// Ground-truth game; observations are its equilibrium frequencies.
    #[arg(long, conflicts_with = "observations")]
    game: Option<PathBuf>,
    #[arg(long)]
    observations: Option<PathBuf>,
    #[arg(long)]
    dynamics: Option<PathBuf>,
    /// Without --game or --observations, a gridworld game is generated.
    #[command(flatten)]
    grid: GridArgs,
    #[arg(long, value_enum, default_value_t = ModeArg::Both)]
    mode: ModeArg,
    /// Comma-separated seed list, or a range `A..=B`.
    #[arg(long, value_parser = parse_seeds)]
    seeds: Option<SeedList>,
    #[arg(long)]
    alpha0: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    kmax: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, value_parser = parse_bset)]
    bset: Option<BSetArg>,
}

#[derive(Clone, Debug)]
enum BSetArg {
    Unconstrained,
    Box(f64, f64),
    Ball(f64),
}

impl BSetArg {
    fn resolve(&self, l: usize) -> BSet {
        match *self {
            BSetArg::Unconstrained => BSet::Unconstrained,
            BSetArg::Box(lo, hi) => BSet::uniform_box(l, lo, hi),
            BSetArg::Ball(radius) => BSet::Ball { radius },
        }
    }
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WIDTHxHEIGHT, got {s:?}"))?;
    let w = w.trim().parse().map_err(|e| format!("width: {e}"))?;
    let h = h.trim().parse().map_err(|e| format!("height: {e}"))?;
    Ok((w, h))
}

fn parse_bset(s: &str) -> Result<BSetArg, String> {
    let (kind, rest) = s.split_once(':').unwrap_or((s, ""));
    match kind {
        "unconstrained" | "none" => Ok(BSetArg::Unconstrained),
        "box" => {
            let (lo, hi) = rest.split_once(',').ok_or("box needs LO,HI")?;
            let lo = lo.parse().map_err(|e| format!("box lower bound: {e}"))?;
            let hi = hi.parse().map_err(|e| format!("box upper bound: {e}"))?;
            Ok(BSetArg::Box(lo, hi))
        }
        "ball" => Ok(BSetArg::Ball(rest.parse().map_err(|e| format!("ball radius: {e}"))?)),
        _ => Err(format!("unknown b set {s:?}")),
    }
}

#[derive(Clone, Debug)]
struct SeedList(Vec<u64>);

fn parse_seeds(s: &str) -> Result<SeedList, String> {
    if let Some((a, b)) = s.split_once("..=") {
        let a: u64 = a.parse().map_err(|e| format!("{e}"))?;
        let b: u64 = b.parse().map_err(|e| format!("{e}"))?;
        return Ok(SeedList((a..=b).collect()));
    }
    s.split(',')
        .map(|x| x.trim().parse::<u64>().map_err(|e| format!("seed {x:?}: {e}")))
        .collect::<Result<_, _>>()
        .map(SeedList)
}

fn parse_cset(s: &str, stacked: &StackedGame) -> anyhow::Result<CSet> {
    match s.split_once(':') {
        None if s == "nsd" => Ok(CSet::NsdSymmetric),
        None if s == "zero" => Ok(CSet::Zero),
        Some(("mask", path)) => {
            let allowed: Vec<Vec<bool>> = serde_json::from_str(&fs::read_to_string(path)?)
                .with_context(|| format!("reading block mask {path}"))?;
            Ok(CSet::block_mask(stacked.layout(), &allowed)?)
        }
        _ => bail!(Error::InvalidSet(format!("unknown C set {s:?}"))),
    }
}

fn load_config(path: Option<&Path>) -> anyhow::Result<ExperimentConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let config: ExperimentConfig =
                serde_json::from_str(&text).map_err(|e| anyhow!(Error::Json(e))).with_context(|| format!("parsing {}", p.display()))?;
            Ok(config)
        }
        None => Ok(ExperimentConfig::default()),
    }
}

fn load_stacked_for(
    observations: &Path,
    dynamics: Option<&Path>,
) -> anyhow::Result<(StackedGame, softbellman_core::trajectories::ObservationSet)> {
    let obs = io::load_observations(observations).with_context(|| format!("loading {}", observations.display()))?;
    let players: Vec<PlayerMdp> = match dynamics {
        Some(p) => io::load_dynamics(p).with_context(|| format!("loading {}", p.display()))?.0,
        None => obs.dynamics.clone(),
    };
    let stacked = StackedGame::new(players, obs.gamma);
    stacked.layout().check_pairs("observed frequencies", obs.y_hat.len())?;
    Ok((stacked, obs))
}

fn simulate(cli: &Cli, args: &SimulateArgs) -> anyhow::Result<()> {
    let spec = args.grid.spec()?;
    let game = build_game(&spec, args.gamma, &args.grid.coupling())?;
    let players: Vec<PlayerMdp> = (0..spec.players()).map(|_| build_player_mdp(&spec)).collect();
    let behavior = match args.policy {
        PolicyKind::Equilibrium => {
            let stacked = build_stacked(&game)?;
            let sol = solve_forward(&stacked, &game.params, None, &ForwardConfig::default())?;
            Behavior::Policies(sol.policies)
        }
        PolicyKind::Scripted => Behavior::Scripted { noise: args.noise },
    };
    let trajectories = match args.full_episodes {
        Some(full) => sample_until_full_length(&spec, &players, &behavior, full, args.maxlen, args.seed)?,
        None => sample_trajectories(&spec, &players, &behavior, args.episodes, args.maxlen, args.seed)?,
    };
    fs::create_dir_all(&cli.out)?;
    io::save_trajectories(&cli.out.join("trajectories.jsonl"), &spec.layout().dims(), &trajectories)?;
    io::save_game(&cli.out.join("game.json"), &game)?;
    tracing::info!(episodes = trajectories.len(), "wrote trajectories.jsonl and game.json");
    Ok(())
}

fn estimate(cli: &Cli, args: &EstimateArgs) -> anyhow::Result<()> {
    let (dims, trajectories) = io::load_trajectories(&args.trajectories)
        .with_context(|| format!("loading {}", args.trajectories.display()))?;
    let config = EstimateConfig {
        gamma: args.gamma,
        smoothing: args.smoothing,
        rescale: !args.no_rescale,
        prune: !args.no_prune,
    };
    let layout = softbellman_core::Layout::new(&dims);
    let obs = build_observations(trajectories, &layout, &config)?;
    fs::create_dir_all(&cli.out)?;
    io::save_observations(&cli.out.join("observations.json"), &obs)?;
    tracing::info!(
        trajectories = obs.trajectory_count,
        length = obs.capped_length,
        "wrote observations.json"
    );
    Ok(())
}

fn forward(cli: &Cli, args: &ForwardArgs) -> anyhow::Result<()> {
    let game = io::load_game(&args.game).with_context(|| format!("loading {}", args.game.display()))?;
    let stacked = build_stacked(&game)?;
    let config = load_config(cli.config.as_deref())?.forward;
    let sol = solve_forward(&stacked, &game.params, None, &config)?;
    fs::create_dir_all(&cli.out)?;
    io::save_solution(&cli.out.join("solution.json"), &sol)?;
    if args.policy_csv {
        for (i, policy) in sol.policies.iter().enumerate() {
            io::write_matrix_csv(&cli.out.join(format!("policy_player{}.csv", i + 1)), policy)?;
        }
    }
    tracing::info!(iterations = sol.iterations, residual = sol.residual_norm, "wrote solution.json");
    Ok(())
}

fn inverse(cli: &Cli, args: &InverseArgs) -> anyhow::Result<()> {
    let mut config = load_config(cli.config.as_deref())?;
    let (stacked, obs) = load_stacked_for(&args.observations, args.dynamics.as_deref())?;
    let l = stacked.pair_count();
    if let Some(b) = &args.bset {
        config.b_set = b.resolve(l);
    }
    if let Some(c) = &args.cset {
        config.c_set = parse_cset(c, &stacked)?;
    }
    let inv = InverseConfig {
        alpha0: args.alpha0.unwrap_or(config.alpha0),
        epsilon: args.epsilon.unwrap_or(config.epsilon),
        k_max: args.kmax.unwrap_or(config.k_max),
        forward: config.forward.clone(),
        ..InverseConfig::default()
    };
    let problem = InverseProblem::new(stacked, obs.y_hat.clone(), config.b_set.clone(), config.c_set.clone())?;
    let (b0, c0) = initial_parameters(args.seed, l, config.init_scale);
    let res = if args.baseline {
        solve_inverse_baseline(&problem, &b0, &inv)?
    } else {
        solve_inverse(&problem, &b0, &c0, &inv)?
    };
    fs::create_dir_all(&cli.out)?;
    let seed = args.seed;
    io::save_inverse_result(&cli.out.join(format!("inverse_seed{seed}.json")), &res)?;
    io::write_loss_csv(&cli.out.join(format!("loss_seed{seed}.csv")), &res.losses)?;
    tracing::info!(
        iterations = res.iterations_used,
        loss = res.final_loss(),
        terminated_by = ?res.terminated_by,
        "inverse finished"
    );
    Ok(())
}

fn evaluate(cli: &Cli, args: &EvaluateArgs) -> anyhow::Result<()> {
    let (stacked, obs) = load_stacked_for(&args.observations, args.dynamics.as_deref())?;
    let fitted = io::load_inverse_result(&args.result)?.params()?;
    stacked.layout().check_pairs("fitted b", fitted.len())?;
    let config = load_config(cli.config.as_deref())?.forward;
    let sol = solve_forward(&stacked, &fitted, None, &config)?;
    let observed = observed_policies(&obs.y_hat, stacked.layout());
    let kl = sol
        .policies
        .iter()
        .zip(&observed)
        .map(|(pi, pi_hat)| kl_divergence_per_state(pi, pi_hat, KL_FLOOR))
        .collect::<softbellman_core::Result<Vec<_>>>()?;
    let loss = (&sol.y - &obs.y_hat).norm_squared();
    fs::create_dir_all(&cli.out)?;
    let mut table = String::from("player,state,kl\n");
    for (p, k) in kl.iter().enumerate() {
        for (s, v) in k.iter().enumerate() {
            table.push_str(&format!("{},{},{}\n", p + 1, s + 1, v));
        }
    }
    fs::write(cli.out.join("kl.csv"), table)?;
    if let Some((w, h)) = args.heatmap_grid {
        let spec = GridSpec::predator_prey(w, h, kl.len().saturating_sub(1), 0.0);
        emit_heatmap_data(&cli.out, "kl", &kl, &spec)?;
    }
    let total: f64 = kl.iter().map(|k| k.sum()).sum();
    let count: usize = kl.iter().map(|k| k.len()).sum();
    println!("loss {loss}");
    println!("mean_kl {}", total / count as f64);
    Ok(())
}

fn experiment(cli: &Cli, args: &ExperimentArgs) -> anyhow::Result<()> {
    let mut config = load_config(cli.config.as_deref())?;
    if let Some(s) = &args.seeds {
        config.seeds = s.0.clone();
    }
    config.alpha0 = args.alpha0.unwrap_or(config.alpha0);
    config.epsilon = args.epsilon.unwrap_or(config.epsilon);
    config.k_max = args.kmax.unwrap_or(config.k_max);
    config.gamma = args.gamma.unwrap_or(config.gamma);
    let game_path = args.game.clone().or_else(|| config.game.clone());
    let obs_path = args.observations.clone().or_else(|| config.observations.clone());
    let out = config.output.clone().filter(|_| cli.out == Path::new(".")).unwrap_or_else(|| cli.out.clone());
    config.validate()?;

    let mut grid = None;
    let (stacked, y_hat) = if let Some(path) = obs_path {
        let (stacked, obs) = load_stacked_for(&path, args.dynamics.as_deref())?;
        (stacked, obs.y_hat)
    } else {
        let game = match game_path {
            Some(path) => io::load_game(&path).with_context(|| format!("loading {}", path.display()))?,
            None => {
                let spec = args.grid.spec()?;
                let game = build_game(&spec, config.gamma, &args.grid.coupling())?;
                grid = Some(spec);
                game
            }
        };
        let stacked = build_stacked(&game)?;
        let sol = solve_forward(&stacked, &game.params, None, &config.forward)?;
        (stacked, sol.y)
    };
    if let Some(b) = &args.bset {
        config.b_set = b.resolve(stacked.pair_count());
    }

    let modes: &[Mode] = match args.mode {
        ModeArg::Proposed => &[Mode::Proposed],
        ModeArg::Baseline => &[Mode::Baseline],
        ModeArg::Both => &[Mode::Proposed, Mode::Baseline],
    };
    for &mode in modes {
        let summary = run_experiment(&config, &stacked, &y_hat, mode)?;
        write_experiment(&out.join(mode.name()), &summary, grid.as_ref())?;
        let agg = summary.aggregate();
        let show = |m: Option<softbellman_core::report::MeanStd>| m.map_or("n/a".to_string(), |m| m.to_string());
        println!(
            "{}: {}/{} seeds ok, iterations {}, final loss {}, mean KL {}",
            mode.name(),
            agg.succeeded,
            agg.succeeded + agg.failed,
            show(agg.iterations),
            show(agg.final_loss),
            show(agg.mean_kl)
        );
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::NotConverged { .. } | Error::InverseAborted { .. } => 3,
                Error::Io(_) => 1,
                _ => 2,
            };
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let filter = tracing_subscriber::EnvFilter::try_new(&cli.log_level)
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();

    let result = match &cli.command {
        Command::Simulate(a) => simulate(&cli, a),
        Command::Estimate(a) => estimate(&cli, a),
        Command::Forward(a) => forward(&cli, a),
        Command::Inverse(a) => inverse(&cli, a),
        Command::Evaluate(a) => evaluate(&cli, a),
        Command::Experiment(a) => experiment(&cli, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
