mod plot;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use hihtp::ensembles::{
    estimate_hirip, BlindConvInstance, CodebookKind, DemixInstance, EnsembleSpec, MixingKind,
};
use hihtp::experiments::{
    fit_phase_boundary, run_demix_phase, run_phase, DemixGrid, PhaseGrid, PhaseTable, RunOptions,
    TrialRecord, SUCCESS_THRESHOLD,
};
use hihtp::operators::AnyOperator;
use hihtp::{
    hihtp_solve, rank_one_factor, relative_error, BlockShape, HiSparseVector, MeasurementOperator,
    RankOneFactors, SolveReport, SolverConfig, SparsityLevels,
};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const PRESET_N50: &str = include_str!("../configs/n50.toml");
const PRESET_N350: &str = include_str!("../configs/n350.toml");

const EXIT_USAGE: u8 = 1;
const EXIT_RECOVERY: u8 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "hihtp",
    version,
    about = "Blind deconvolution and demixing by hierarchical hard thresholding"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw (or load) one instance and recover it.
    Solve(SolveArgs),
    /// Single-user phase-transition sweep.
    Phase(SweepArgs),
    /// Multi-user demixing sweep.
    DemixPhase(SweepArgs),
    /// Monte-Carlo lower bound on the hierarchical restricted isometry constant.
    Hirip(HiripArgs),
    /// Render heatmaps from an aggregate CSV.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
struct OutArgs {
    /// Output directory.
    #[arg(long, env = "PHASE_OUT_DIR", default_value = ".")]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CodebookArg {
    Identity,
    Gaussian,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MixingArg {
    Gaussian,
    Identity,
}

#[derive(Args, Debug)]
struct SolveArgs {
    /// TOML file with instance and solver settings; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Operator JSON to solve against instead of a random draw.
    #[arg(long, requires = "measurements")]
    operator: Option<PathBuf>,
    /// JSON array of measurements for `--operator`.
    #[arg(long, requires = "operator")]
    measurements: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    mu: Option<usize>,
    /// Codeword length; defaults to `n`.
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    s: Option<usize>,
    #[arg(long)]
    sigma: Option<usize>,
    /// Active users.
    #[arg(long = "S")]
    active_users: Option<usize>,
    /// Antennas.
    #[arg(long = "M")]
    antennas: Option<usize>,
    /// Users.
    #[arg(long = "N")]
    users: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    codebook: Option<CodebookArg>,
    #[arg(long, value_enum)]
    mixing: Option<MixingArg>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    step_size: Option<f64>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    N50,
    N350,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Grid TOML file.
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    config: Option<PathBuf>,
    /// Bundled single-user grid.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Overrides the grid's base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the trials per cell.
    #[arg(long)]
    trials: Option<usize>,
    /// Worker threads; defaults to the machine's core count.
    #[arg(long)]
    jobs: Option<usize>,
    /// Keep trials already recorded in the raw CSV.
    #[arg(long)]
    resume: bool,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
struct HiripArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    mu: usize,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    s: usize,
    #[arg(long)]
    sigma: usize,
    #[arg(long, value_enum, default_value = "identity")]
    codebook: CodebookArg,
    #[arg(long, default_value_t = 10_000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
struct PlotArgs {
    /// Aggregate CSV written by `phase` or `demix-phase`.
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    out: OutArgs,
}

impl From<CodebookArg> for CodebookKind {
    fn from(c: CodebookArg) -> Self {
        match c {
            CodebookArg::Identity => CodebookKind::Identity,
            CodebookArg::Gaussian => CodebookKind::Gaussian,
        }
    }
}

impl From<MixingArg> for MixingKind {
    fn from(m: MixingArg) -> Self {
        match m {
            MixingArg::Gaussian => MixingKind::Gaussian,
            MixingArg::Identity => MixingKind::Identity,
        }
    }
}

/// Instance and solver settings of `solve`, every field optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SolveFile {
    n: Option<usize>,
    mu: Option<usize>,
    m: Option<usize>,
    s: Option<usize>,
    sigma: Option<usize>,
    #[serde(rename = "S")]
    active_users: Option<usize>,
    #[serde(rename = "M")]
    antennas: Option<usize>,
    #[serde(rename = "N")]
    users: Option<usize>,
    seed: Option<u64>,
    codebook: Option<CodebookKind>,
    mixing: Option<MixingKind>,
    solver: Option<SolverConfig>,
}

#[derive(Debug, Serialize)]
struct UserFactors {
    user: usize,
    factors: RankOneFactors,
}

#[derive(Debug, Serialize)]
struct SolveOutput {
    instance: Option<EnsembleSpec>,
    preempted: bool,
    success: bool,
    /// Against the drawn ground truth; absent for loaded instances.
    rel_error: Option<f64>,
    relative_residual: Option<f64>,
    report: Option<SolveReport>,
    factors: Vec<UserFactors>,
}

#[derive(Debug, Serialize)]
struct HiripOutput {
    spec: EnsembleSpec,
    trials: usize,
    delta_lower: f64,
    witness_trial: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Solve(args) => cmd_solve(args),
        Command::Phase(args) => cmd_phase(args, false),
        Command::DemixPhase(args) => cmd_phase(args, true),
        Command::Hirip(args) => cmd_hirip(args),
        Command::Plot(args) => cmd_plot(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn recovery_code(success: bool) -> ExitCode {
    if success {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_RECOVERY)
    }
}

fn factor_users(estimate: &HiSparseVector) -> Result<Vec<UserFactors>> {
    let shape = estimate.shape();
    let mut out = Vec::new();
    for user in 0..shape.users {
        let data = estimate.user(user).to_vec();
        if data.iter().all(|v| *v == 0.0) {
            continue;
        }
        let w = HiSparseVector::new(BlockShape::two_level(shape.blocks, shape.block_len), data)?;
        out.push(UserFactors {
            user,
            factors: rank_one_factor(&w)?,
        });
    }
    Ok(out)
}

fn cmd_solve(args: SolveArgs) -> Result<ExitCode> {
    let file: SolveFile = match &args.config {
        Some(path) => {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => SolveFile::default(),
    };
    let mut solver = file.solver.clone().unwrap_or_default();
    if let Some(k) = args.max_iters {
        solver.max_iters = k;
    }
    if let Some(tau) = args.step_size {
        solver.step_size = tau;
    }
    solver.validate()?;
    prepare_out(&args.out.out)?;
    let report_path = args.out.out.join("solve_report.json");

    let s = args.s.or(file.s).context("missing --s")?;
    let sigma = args.sigma.or(file.sigma).context("missing --sigma")?;
    let active_users = args.active_users.or(file.active_users);

    if let Some(op_path) = &args.operator {
        let meas_path = args
            .measurements
            .as_ref()
            .context("missing --measurements")?;
        let op = AnyOperator::load_json(op_path)?;
        let text = fs::read_to_string(meas_path)
            .with_context(|| format!("reading {}", meas_path.display()))?;
        let y: Vec<f64> = serde_json::from_str(&text)
            .with_context(|| format!("parsing {}", meas_path.display()))?;
        let op = op.as_measurement();
        let levels = match op.signal_shape().users {
            1 => SparsityLevels::new(s, sigma),
            _ => SparsityLevels::three_level(active_users.context("missing --S")?, s, sigma),
        };
        return solve_loaded(op, &y, &levels, &solver, &report_path);
    }

    let n = args.n.or(file.n).context("missing --n")?;
    let mu = args.mu.or(file.mu).context("missing --mu")?;
    let users = args.users.or(file.users).unwrap_or(1);
    let spec = EnsembleSpec {
        m: args.m.or(file.m).unwrap_or(n),
        users,
        antennas: args.antennas.or(file.antennas).unwrap_or(users),
        active_users: active_users.unwrap_or(1),
        codebook: args
            .codebook
            .map(Into::into)
            .or(file.codebook)
            .unwrap_or_default(),
        mixing: args
            .mixing
            .map(Into::into)
            .or(file.mixing)
            .unwrap_or(if users == 1 {
                MixingKind::Identity
            } else {
                MixingKind::Gaussian
            }),
        ..EnsembleSpec::single(n, mu, s, sigma, args.seed.or(file.seed).unwrap_or(0))
    };
    spec.validate()?;

    if spec.antennas * spec.mu < spec.active_users * spec.s * spec.sigma {
        let out = SolveOutput {
            instance: Some(spec),
            preempted: true,
            success: false,
            rel_error: None,
            relative_residual: None,
            report: None,
            factors: Vec::new(),
        };
        write_json(&report_path, &out)?;
        eprintln!(
            "preempted: {} measurements for {} unknowns on the support, declared a failure",
            spec.antennas * spec.mu,
            spec.active_users * spec.s * spec.sigma
        );
        return Ok(ExitCode::from(EXIT_RECOVERY));
    }

    let single = spec.users == 1 && spec.antennas == 1;
    let (report, truth, y) = if single {
        let inst = BlindConvInstance::draw(&spec)?;
        let levels = SparsityLevels::new(s, sigma);
        let report = hihtp_solve(&inst.measurements, &inst.op, &levels, &solver)?;
        (report, inst.truth, inst.measurements)
    } else {
        let inst = DemixInstance::draw(&spec)?;
        let report = hihtp_solve(&inst.measurements, &inst.op, &spec.levels(), &solver)?;
        (report, inst.truth, inst.measurements)
    };
    let err = relative_error(&report.estimate, &truth)?;
    let success = err <= SUCCESS_THRESHOLD;
    let out = SolveOutput {
        instance: Some(spec),
        preempted: false,
        success,
        rel_error: Some(err),
        relative_residual: relative_residual(&y, &report),
        factors: factor_users(&report.estimate)?,
        report: Some(report),
    };
    write_json(&report_path, &out)?;
    println!(
        "{} rel_error={err:.3e} iterations={} report={}",
        if success { "recovered" } else { "failed" },
        out.report.as_ref().map_or(0, |r| r.iterations),
        report_path.display()
    );
    Ok(recovery_code(success))
}

fn relative_residual(y: &[f64], report: &SolveReport) -> Option<f64> {
    let last = report.residual_norms.last()?;
    let norm_y = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    (norm_y > 0.0).then(|| last / norm_y)
}

/// Without ground truth, success means a relative residual within the threshold.
fn solve_loaded(
    op: &dyn MeasurementOperator,
    y: &[f64],
    levels: &SparsityLevels,
    solver: &SolverConfig,
    report_path: &Path,
) -> Result<ExitCode> {
    let report = hihtp_solve(y, op, levels, solver)?;
    let residual = relative_residual(y, &report);
    let success = residual.is_none_or(|r| r <= SUCCESS_THRESHOLD);
    let out = SolveOutput {
        instance: None,
        preempted: false,
        success,
        rel_error: None,
        relative_residual: residual,
        factors: factor_users(&report.estimate)?,
        report: Some(report),
    };
    write_json(report_path, &out)?;
    println!(
        "{} relative_residual={:.3e} report={}",
        if success { "recovered" } else { "failed" },
        residual.unwrap_or(0.0),
        report_path.display()
    );
    Ok(recovery_code(success))
}

fn load_text(args: &SweepArgs) -> Result<String> {
    match (&args.config, args.preset) {
        (Some(path), _) => {
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
        }
        (None, Some(Preset::N50)) => Ok(PRESET_N50.to_string()),
        (None, Some(Preset::N350)) => Ok(PRESET_N350.to_string()),
        (None, None) => bail!("one of --config or --preset is required"),
    }
}

fn cmd_phase(args: SweepArgs, demix: bool) -> Result<ExitCode> {
    let text = load_text(&args)?;
    prepare_out(&args.out.out)?;
    let prefix = if demix { "demix" } else { "phase" };
    let raw_path = args.out.out.join(format!("{prefix}_raw.csv"));
    let aggregate_path = args.out.out.join(format!("{prefix}_aggregate.csv"));
    let opts = RunOptions {
        jobs: args.jobs,
        raw_path: Some(raw_path.clone()),
        resume: args.resume,
    };
    let (table, raw): (PhaseTable, Vec<TrialRecord>) = if demix {
        let mut grid = DemixGrid::from_toml_str(&text).context("parsing demixing grid")?;
        if let Some(seed) = args.seed {
            grid.base_seed = seed;
        }
        if let Some(t) = args.trials {
            grid.trials_per_cell = t;
        }
        run_demix_phase(&grid, &opts)?
    } else {
        let mut grid = PhaseGrid::from_toml_str(&text).context("parsing phase grid")?;
        if let Some(seed) = args.seed {
            grid.base_seed = seed;
        }
        if let Some(t) = args.trials {
            grid.trials_per_cell = t;
        }
        run_phase(&grid, &opts)?
    };
    table.write_aggregate_file(&aggregate_path)?;
    let boundaries = fit_phase_boundary(&table, 0.5);
    write_json(
        &args.out.out.join(format!("{prefix}_boundary.json")),
        &boundaries,
    )?;
    let successes = raw.iter().filter(|r| r.success).count();
    println!(
        "{} cells, {} trials, {successes} recovered; aggregate {}, raw {}",
        table.cells.len(),
        raw.len(),
        aggregate_path.display(),
        raw_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_hirip(args: HiripArgs) -> Result<ExitCode> {
    let spec = EnsembleSpec {
        m: args.m.unwrap_or(args.n),
        codebook: args.codebook.into(),
        ..EnsembleSpec::single(args.n, args.mu, args.s, args.sigma, args.seed)
    };
    if args.trials == 0 {
        bail!("--trials must be positive");
    }
    let op = BlindConvInstance::draw(&spec)?.op;
    let est = estimate_hirip(
        &op,
        &SparsityLevels::new(args.s, args.sigma),
        args.trials,
        args.seed,
    )?;
    prepare_out(&args.out.out)?;
    let path = args.out.out.join("hirip.json");
    let out = HiripOutput {
        spec,
        trials: est.trials,
        delta_lower: est.delta_lower,
        witness_trial: est.witness_trial,
    };
    write_json(&path, &out)?;
    println!(
        "delta_lower={:.6} trials={} witness_trial={} report={}",
        est.delta_lower,
        est.trials,
        est.witness_trial,
        path.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_plot(args: PlotArgs) -> Result<ExitCode> {
    let text = fs::read_to_string(&args.input)
        .with_context(|| format!("reading {}", args.input.display()))?;
    let maps = plot::parse_aggregate(&text)?;
    prepare_out(&args.out.out)?;
    for map in &maps {
        let path = args.out.out.join(map.file_name());
        fs::write(&path, map.to_svg()).with_context(|| format!("writing {}", path.display()))?;
        println!("{}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}
