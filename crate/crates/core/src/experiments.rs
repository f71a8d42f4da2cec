//! Phase-transition harness.
//!
//! A sweep enumerates cells `(n, σ, s, μ)` (plus `(M, N, S)` for demixing),
//! runs seeded recovery trials in each, and aggregates success fractions.
//! Raw trial records are appended to a CSV file as they finish, so an
//! interrupted sweep can be resumed; aggregates are always recomputed from
//! the complete set of raw records in grid order.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensembles::{derive_seed, BlindConvInstance, DemixInstance, EnsembleSpec, MixingKind};
use crate::error::{Error, Result};
use crate::hier_sparse::SparsityLevels;
use crate::solver::{hihtp_solve, relative_error, SolverConfig};

/// A trial succeeds when its relative error is at most this.
pub const SUCCESS_THRESHOLD: f64 = 1e-4;

pub const RAW_HEADER: &str =
    "n,mu,s,sigma,trial,seed,preempted,success,rel_error,iterations,wall_time_s";
pub const AGGREGATE_HEADER: &str =
    "n,sigma,s,mu,trials,success_fraction,mean_rel_error,mean_iterations";
pub const DEMIX_RAW_HEADER: &str =
    "M,N,S,n,mu,s,sigma,trial,seed,preempted,success,rel_error,iterations,wall_time_s";
pub const DEMIX_AGGREGATE_HEADER: &str =
    "M,N,S,n,sigma,s,mu,trials,success_fraction,mean_rel_error,mean_iterations";

/// Overrides the `μ` range for one `(n, σ)` pair.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MuOverride {
    pub n: usize,
    pub sigma: usize,
    pub mu_values: Vec<usize>,
}

fn default_trials() -> usize {
    100
}

/// Single-user sweep over `(n, σ, s, μ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseGrid {
    pub n_values: Vec<usize>,
    pub sigma_values: Vec<usize>,
    pub s_values: Vec<usize>,
    pub mu_values: Vec<usize>,
    #[serde(default)]
    pub mu_overrides: Vec<MuOverride>,
    #[serde(default = "default_trials")]
    pub trials_per_cell: usize,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub base_seed: u64,
}

fn step_range(start: usize, step: usize, end: usize) -> Vec<usize> {
    (start..=end).step_by(step).collect()
}

impl PhaseGrid {
    fn preset(n: usize) -> Self {
        let wide = step_range(20, 30, 350);
        let mu_overrides = if n == 350 {
            vec![
                MuOverride {
                    n,
                    sigma: 10,
                    mu_values: wide.clone(),
                },
                MuOverride {
                    n,
                    sigma: 15,
                    mu_values: wide,
                },
            ]
        } else {
            Vec::new()
        };
        Self {
            n_values: vec![n],
            sigma_values: vec![5, 10, 15],
            s_values: (1..=7).collect(),
            mu_values: step_range(10, 10, 120),
            mu_overrides,
            trials_per_cell: 100,
            solver: SolverConfig::default(),
            base_seed: 0,
        }
    }

    /// `n = 50`, `σ ∈ {5, 10, 15}`, `s ∈ 1..=7`, `μ ∈ {10, 20, …, 120}`.
    pub fn preset_n50() -> Self {
        Self::preset(50)
    }

    /// `n = 350`; `σ ∈ {10, 15}` use `μ ∈ {20, 50, …, 350}`.
    pub fn preset_n350() -> Self {
        Self::preset(350)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn mu_values_for(&self, n: usize, sigma: usize) -> &[usize] {
        self.mu_overrides
            .iter()
            .find(|o| o.n == n && o.sigma == sigma)
            .map(|o| o.mu_values.as_slice())
            .unwrap_or(&self.mu_values)
    }

    pub fn validate(&self) -> Result<()> {
        let lists = [
            ("n_values", &self.n_values),
            ("sigma_values", &self.sigma_values),
            ("s_values", &self.s_values),
            ("mu_values", &self.mu_values),
        ];
        for (name, list) in lists {
            if list.is_empty() {
                return Err(Error::Config(format!("{name} is empty")));
            }
            if list.contains(&0) {
                return Err(Error::Config(format!("{name} contains zero")));
            }
        }
        if self
            .mu_overrides
            .iter()
            .any(|o| o.mu_values.is_empty() || o.mu_values.contains(&0))
        {
            return Err(Error::Config(
                "mu override with an empty or zero entry".to_string(),
            ));
        }
        if self.trials_per_cell == 0 {
            return Err(Error::Config(
                "trials_per_cell must be at least 1".to_string(),
            ));
        }
        for &n in &self.n_values {
            for &sigma in &self.sigma_values {
                if sigma > n {
                    return Err(Error::Config(format!("sigma = {sigma} exceeds n = {n}")));
                }
                for &mu in self.mu_values_for(n, sigma) {
                    if let Some(&s) = self.s_values.iter().find(|&&s| s > mu) {
                        return Err(Error::Config(format!("s = {s} exceeds mu = {mu}")));
                    }
                }
            }
        }
        self.solver.validate()
    }

    pub fn cells(&self) -> Vec<CellKey> {
        let mut cells = Vec::new();
        for &n in &self.n_values {
            for &sigma in &self.sigma_values {
                for &s in &self.s_values {
                    for &mu in self.mu_values_for(n, sigma) {
                        cells.push(CellKey::single(n, sigma, s, mu));
                    }
                }
            }
        }
        cells
    }
}

/// Demixing sweep over `(N, S, M, n, σ, s, μ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemixGrid {
    #[serde(rename = "N_values")]
    pub users_values: Vec<usize>,
    #[serde(rename = "S_values")]
    pub active_values: Vec<usize>,
    #[serde(rename = "M_values")]
    pub antennas_values: Vec<usize>,
    pub n_values: Vec<usize>,
    pub sigma_values: Vec<usize>,
    pub s_values: Vec<usize>,
    pub mu_values: Vec<usize>,
    #[serde(default)]
    pub mixing: MixingKind,
    #[serde(default = "default_trials")]
    pub trials_per_cell: usize,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub base_seed: u64,
}

impl DemixGrid {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let lists = [
            ("N_values", &self.users_values),
            ("S_values", &self.active_values),
            ("M_values", &self.antennas_values),
            ("n_values", &self.n_values),
            ("sigma_values", &self.sigma_values),
            ("s_values", &self.s_values),
            ("mu_values", &self.mu_values),
        ];
        for (name, list) in lists {
            if list.is_empty() {
                return Err(Error::Config(format!("{name} is empty")));
            }
            if list.contains(&0) {
                return Err(Error::Config(format!("{name} contains zero")));
            }
        }
        if self.trials_per_cell == 0 {
            return Err(Error::Config(
                "trials_per_cell must be at least 1".to_string(),
            ));
        }
        for cell in self.cells() {
            EnsembleSpec {
                mixing: self.mixing,
                ..cell.spec(0)
            }
            .validate()?;
        }
        self.solver.validate()
    }

    pub fn cells(&self) -> Vec<CellKey> {
        let mut cells = Vec::new();
        for &users in &self.users_values {
            for &active in &self.active_values {
                for &antennas in &self.antennas_values {
                    for &n in &self.n_values {
                        for &sigma in &self.sigma_values {
                            for &s in &self.s_values {
                                for &mu in &self.mu_values {
                                    cells.push(CellKey {
                                        antennas,
                                        users,
                                        active_users: active,
                                        n,
                                        sigma,
                                        s,
                                        mu,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        cells
    }
}

/// Parameters shared by all trials of one cell. Single-user cells have `M = N = S = 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub antennas: usize,
    pub users: usize,
    pub active_users: usize,
    pub n: usize,
    pub sigma: usize,
    pub s: usize,
    pub mu: usize,
}

impl CellKey {
    pub fn single(n: usize, sigma: usize, s: usize, mu: usize) -> Self {
        Self {
            antennas: 1,
            users: 1,
            active_users: 1,
            n,
            sigma,
            s,
            mu,
        }
    }

    fn is_single(&self) -> bool {
        self.antennas == 1 && self.users == 1 && self.active_users == 1
    }

    /// Fewer measurements than unknowns on the true support.
    pub fn is_preempted(&self) -> bool {
        self.antennas * self.mu < self.active_users * self.s * self.sigma
    }

    /// Seed of trial `trial`, a hash of the base seed and the cell parameters.
    ///
    /// A one-user, one-antenna cell hashes exactly like a plain single-user cell.
    pub fn trial_seed(&self, base_seed: u64, trial: usize) -> u64 {
        let mut key = vec![
            self.n as u64,
            self.mu as u64,
            self.s as u64,
            self.sigma as u64,
            trial as u64,
        ];
        if !self.is_single() {
            key.extend([
                self.antennas as u64,
                self.users as u64,
                self.active_users as u64,
            ]);
        }
        derive_seed(base_seed, &key)
    }

    fn spec(&self, seed: u64) -> EnsembleSpec {
        EnsembleSpec {
            users: self.users,
            antennas: self.antennas,
            active_users: self.active_users,
            ..EnsembleSpec::single(self.n, self.mu, self.s, self.sigma, seed)
        }
    }
}

/// How a trial's instance is generated and solved.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrialMode {
    /// Two-level blind deconvolution.
    Single,
    /// Three-level demixing with the given mixing ensemble.
    Demix(MixingKind),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub cell: CellKey,
    pub trial: usize,
    pub seed: u64,
    pub preempted: bool,
    pub success: bool,
    pub rel_error: f64,
    pub iterations: usize,
    pub wall_time_s: f64,
}

/// Runs one trial; solver failures are recorded as unsuccessful with a NaN error.
pub fn run_trial(
    cell: &CellKey,
    trial: usize,
    base_seed: u64,
    mode: TrialMode,
    solver: &SolverConfig,
) -> TrialRecord {
    let started = Instant::now();
    let seed = cell.trial_seed(base_seed, trial);
    let mut record = TrialRecord {
        cell: *cell,
        trial,
        seed,
        preempted: false,
        success: false,
        rel_error: 1.0,
        iterations: 0,
        wall_time_s: 0.0,
    };
    if cell.is_preempted() {
        record.preempted = true;
        record.wall_time_s = started.elapsed().as_secs_f64();
        return record;
    }
    match solve_instance(cell, seed, mode, solver) {
        Ok((err, iterations)) => {
            record.rel_error = err;
            record.iterations = iterations;
            record.success = err <= SUCCESS_THRESHOLD;
        }
        Err(_) => record.rel_error = f64::NAN,
    }
    record.wall_time_s = started.elapsed().as_secs_f64();
    record
}

fn solve_instance(
    cell: &CellKey,
    seed: u64,
    mode: TrialMode,
    cfg: &SolverConfig,
) -> Result<(f64, usize)> {
    match mode {
        TrialMode::Single => {
            if !cell.is_single() {
                return Err(Error::Config(
                    "single-user trial on a demixing cell".to_string(),
                ));
            }
            let inst = BlindConvInstance::draw(&cell.spec(seed))?;
            let levels = SparsityLevels::new(cell.s, cell.sigma);
            let report = hihtp_solve(&inst.measurements, &inst.op, &levels, cfg)?;
            Ok((
                relative_error(&report.estimate, &inst.truth)?,
                report.iterations,
            ))
        }
        TrialMode::Demix(mixing) => {
            let spec = EnsembleSpec {
                mixing,
                ..cell.spec(seed)
            };
            let inst = DemixInstance::draw(&spec)?;
            let levels = SparsityLevels::three_level(cell.active_users, cell.s, cell.sigma);
            let report = hihtp_solve(&inst.measurements, &inst.op, &levels, cfg)?;
            Ok((
                relative_error(&report.estimate, &inst.truth)?,
                report.iterations,
            ))
        }
    }
}

/// Which column layout a table or raw file uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TableKind {
    Single,
    Demix,
}

impl TableKind {
    pub fn raw_header(&self) -> &'static str {
        match self {
            TableKind::Single => RAW_HEADER,
            TableKind::Demix => DEMIX_RAW_HEADER,
        }
    }

    pub fn aggregate_header(&self) -> &'static str {
        match self {
            TableKind::Single => AGGREGATE_HEADER,
            TableKind::Demix => DEMIX_AGGREGATE_HEADER,
        }
    }
}

fn raw_fields(kind: TableKind, r: &TrialRecord) -> Vec<String> {
    let c = &r.cell;
    let mut out = Vec::with_capacity(14);
    if kind == TableKind::Demix {
        out.extend([c.antennas, c.users, c.active_users].map(|v| v.to_string()));
    }
    out.extend([c.n, c.mu, c.s, c.sigma, r.trial].map(|v| v.to_string()));
    out.push(r.seed.to_string());
    out.push(r.preempted.to_string());
    out.push(r.success.to_string());
    out.push(r.rel_error.to_string());
    out.push(r.iterations.to_string());
    out.push(r.wall_time_s.to_string());
    out
}

fn parse_field<T: std::str::FromStr>(rec: &csv::StringRecord, idx: usize, name: &str) -> Result<T> {
    rec.get(idx)
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| Error::Config(format!("bad or missing raw field `{name}`")))
}

/// Reads raw trial records written by [`run_phase`] or [`run_demix_phase`].
pub fn read_raw_records(path: &Path, kind: TableKind) -> Result<Vec<TrialRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)?;
    let header = reader.headers()?.iter().collect::<Vec<_>>().join(",");
    if header != kind.raw_header() {
        return Err(Error::Config(format!(
            "raw file header `{header}` does not match `{}`",
            kind.raw_header()
        )));
    }
    let offset = if kind == TableKind::Demix { 3 } else { 0 };
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row?;
        let (antennas, users, active_users) = if kind == TableKind::Demix {
            (
                parse_field(&row, 0, "M")?,
                parse_field(&row, 1, "N")?,
                parse_field(&row, 2, "S")?,
            )
        } else {
            (1, 1, 1)
        };
        let cell = CellKey {
            antennas,
            users,
            active_users,
            n: parse_field(&row, offset, "n")?,
            mu: parse_field(&row, offset + 1, "mu")?,
            s: parse_field(&row, offset + 2, "s")?,
            sigma: parse_field(&row, offset + 3, "sigma")?,
        };
        out.push(TrialRecord {
            cell,
            trial: parse_field(&row, offset + 4, "trial")?,
            seed: parse_field(&row, offset + 5, "seed")?,
            preempted: parse_field(&row, offset + 6, "preempted")?,
            success: parse_field(&row, offset + 7, "success")?,
            rel_error: parse_field(&row, offset + 8, "rel_error")?,
            iterations: parse_field(&row, offset + 9, "iterations")?,
            wall_time_s: parse_field(&row, offset + 10, "wall_time_s")?,
        });
    }
    Ok(out)
}

/// Aggregates of one cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: CellKey,
    pub trials: usize,
    pub successes: usize,
    pub success_fraction: f64,
    pub mean_rel_error: f64,
    pub max_rel_error: f64,
    pub mean_iterations: f64,
    pub mean_wall_time_s: f64,
}

impl CellSummary {
    fn from_records(cell: CellKey, records: &[&TrialRecord]) -> Self {
        let trials = records.len();
        let t = trials as f64;
        let successes = records.iter().filter(|r| r.success).count();
        let sum = |f: &dyn Fn(&TrialRecord) -> f64| records.iter().map(|r| f(r)).sum::<f64>();
        Self {
            cell,
            trials,
            successes,
            success_fraction: successes as f64 / t,
            mean_rel_error: sum(&|r| r.rel_error) / t,
            max_rel_error: records
                .iter()
                .map(|r| r.rel_error)
                .fold(f64::NEG_INFINITY, f64::max),
            mean_iterations: sum(&|r| r.iterations as f64) / t,
            mean_wall_time_s: sum(&|r| r.wall_time_s) / t,
        }
    }
}

/// Aggregated sweep results in grid order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseTable {
    pub kind: TableKind,
    pub cells: Vec<CellSummary>,
}

impl PhaseTable {
    /// Aggregates `records` over `cells`; every cell needs exactly `trials` records.
    pub fn from_records(
        kind: TableKind,
        cells: &[CellKey],
        trials: usize,
        records: &[TrialRecord],
    ) -> Result<Self> {
        let mut by_cell: HashMap<CellKey, Vec<&TrialRecord>> = HashMap::new();
        for r in records {
            by_cell.entry(r.cell).or_default().push(r);
        }
        let mut summaries = Vec::with_capacity(cells.len());
        for cell in cells {
            let mut recs = by_cell.remove(cell).unwrap_or_default();
            recs.sort_by_key(|r| r.trial);
            recs.dedup_by_key(|r| r.trial);
            if recs.len() != trials || recs.iter().enumerate().any(|(i, r)| r.trial != i) {
                return Err(Error::Config(format!(
                    "cell {cell:?} has {} of {trials} trial records",
                    recs.len()
                )));
            }
            summaries.push(CellSummary::from_records(*cell, &recs));
        }
        Ok(Self {
            kind,
            cells: summaries,
        })
    }

    pub fn get(&self, cell: &CellKey) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.cell == *cell)
    }

    pub fn write_aggregate<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(out);
        w.write_record(self.kind.aggregate_header().split(','))?;
        for c in &self.cells {
            let k = &c.cell;
            let mut row = Vec::with_capacity(11);
            if self.kind == TableKind::Demix {
                row.extend([k.antennas, k.users, k.active_users].map(|v| v.to_string()));
            }
            row.extend([k.n, k.sigma, k.s, k.mu, c.trials].map(|v| v.to_string()));
            row.push(c.success_fraction.to_string());
            row.push(c.mean_rel_error.to_string());
            row.push(c.mean_iterations.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn aggregate_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_aggregate(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn write_aggregate_file(&self, path: &Path) -> Result<()> {
        let mut file = File::create(path)?;
        self.write_aggregate(&mut file)?;
        file.sync_all()?;
        Ok(())
    }
}

/// Execution options for a sweep.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Worker threads; `None` uses every core.
    pub jobs: Option<usize>,
    /// Append-only raw record file.
    pub raw_path: Option<PathBuf>,
    /// Reuse records already present in `raw_path`.
    pub resume: bool,
}

struct RawSink {
    writer: csv::Writer<File>,
    kind: TableKind,
}

impl RawSink {
    fn open(path: &Path, kind: TableKind, resume: bool) -> Result<Self> {
        let existing = resume && path.metadata().map(|m| m.len() > 0).unwrap_or(false);
        let file = if resume {
            OpenOptions::new().create(true).append(true).open(path)?
        } else {
            File::create(path)?
        };
        let mut writer = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(file);
        if !existing {
            writer.write_record(kind.raw_header().split(','))?;
            writer.flush()?;
        }
        Ok(Self { writer, kind })
    }

    fn append(&mut self, record: &TrialRecord) -> io::Result<()> {
        self.writer
            .write_record(raw_fields(self.kind, record))
            .map_err(io::Error::other)?;
        self.writer.flush()
    }
}

fn run_sweep(
    kind: TableKind,
    cells: &[CellKey],
    trials: usize,
    base_seed: u64,
    mode: TrialMode,
    solver: &SolverConfig,
    opts: &RunOptions,
) -> Result<(PhaseTable, Vec<TrialRecord>)> {
    let mut done: HashMap<(CellKey, usize), TrialRecord> = HashMap::new();
    if opts.resume {
        if let Some(path) = opts.raw_path.as_deref().filter(|p| p.exists()) {
            for r in read_raw_records(path, kind)? {
                if r.seed != r.cell.trial_seed(base_seed, r.trial) {
                    return Err(Error::Config(format!(
                        "raw record for {:?} trial {} was produced with a different base seed",
                        r.cell, r.trial
                    )));
                }
                done.insert((r.cell, r.trial), r);
            }
        }
    }
    let pending: Vec<(CellKey, usize)> = cells
        .iter()
        .flat_map(|c| (0..trials).map(move |t| (*c, t)))
        .filter(|job| !done.contains_key(job))
        .collect();

    let sink = match &opts.raw_path {
        Some(path) => Some(Mutex::new(RawSink::open(path, kind, opts.resume)?)),
        None => None,
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(jobs) = opts.jobs {
        builder = builder.num_threads(jobs.max(1));
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let fresh: Vec<Result<TrialRecord>> = pool.install(|| {
        pending
            .par_iter()
            .map(|(cell, trial)| {
                let record = run_trial(cell, *trial, base_seed, mode, solver);
                if let Some(sink) = &sink {
                    sink.lock().expect("raw sink poisoned").append(&record)?;
                }
                Ok(record)
            })
            .collect()
    });
    for r in fresh {
        let r = r?;
        done.insert((r.cell, r.trial), r);
    }

    let mut records: Vec<TrialRecord> = cells
        .iter()
        .flat_map(|c| (0..trials).map(move |t| (*c, t)))
        .filter_map(|job| done.remove(&job))
        .collect();
    records.sort_by_key(|r| (cells.iter().position(|c| *c == r.cell), r.trial));
    let table = PhaseTable::from_records(kind, cells, trials, &records)?;
    Ok((table, records))
}

/// Runs every cell of `grid`; returns the table and the raw records in grid order.
pub fn run_phase(grid: &PhaseGrid, opts: &RunOptions) -> Result<(PhaseTable, Vec<TrialRecord>)> {
    grid.validate()?;
    run_sweep(
        TableKind::Single,
        &grid.cells(),
        grid.trials_per_cell,
        grid.base_seed,
        TrialMode::Single,
        &grid.solver,
        opts,
    )
}

/// Demixing counterpart of [`run_phase`], with three-level recovery.
pub fn run_demix_phase(
    grid: &DemixGrid,
    opts: &RunOptions,
) -> Result<(PhaseTable, Vec<TrialRecord>)> {
    grid.validate()?;
    run_sweep(
        TableKind::Demix,
        &grid.cells(),
        grid.trials_per_cell,
        grid.base_seed,
        TrialMode::Demix(grid.mixing),
        &grid.solver,
        opts,
    )
}

/// Rebuilds the aggregate table of a sweep from its raw record file.
pub fn table_from_raw(
    path: &Path,
    kind: TableKind,
    cells: &[CellKey],
    trials: usize,
) -> Result<PhaseTable> {
    let records = read_raw_records(path, kind)?;
    PhaseTable::from_records(kind, cells, trials, &records)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryPoint {
    pub s: usize,
    /// Smallest grid `μ` reaching the success level; `None` if never reached.
    pub mu_at_level: Option<usize>,
}

/// Empirical phase boundary of one `(M, N, S, n, σ)` slice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseBoundary {
    pub antennas: usize,
    pub users: usize,
    pub active_users: usize,
    pub n: usize,
    pub sigma: usize,
    pub points: Vec<BoundaryPoint>,
    /// Least-squares slope of `μ` at level versus `s`, over defined points.
    pub slope: Option<f64>,
}

impl PhaseBoundary {
    pub fn mu_at(&self, s: usize) -> Option<usize> {
        self.points
            .iter()
            .find(|p| p.s == s)
            .and_then(|p| p.mu_at_level)
    }
}

fn ls_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let k = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / k;
    let my = points.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Some(sxy / sxx)
}

/// First grid crossing of `level` per `s`, and a linear fit of the crossings.
pub fn fit_phase_boundary(table: &PhaseTable, level: f64) -> Vec<PhaseBoundary> {
    type Slice = (usize, usize, usize, usize, usize);
    let mut order: Vec<Slice> = Vec::new();
    let mut slices: HashMap<Slice, Vec<&CellSummary>> = HashMap::new();
    for c in &table.cells {
        let k = c.cell;
        let key = (k.antennas, k.users, k.active_users, k.n, k.sigma);
        if !slices.contains_key(&key) {
            order.push(key);
        }
        slices.entry(key).or_default().push(c);
    }
    order
        .into_iter()
        .map(|key| {
            let cells = &slices[&key];
            let mut s_values: Vec<usize> = cells.iter().map(|c| c.cell.s).collect();
            s_values.sort_unstable();
            s_values.dedup();
            let points: Vec<BoundaryPoint> = s_values
                .into_iter()
                .map(|s| {
                    let mu_at_level = cells
                        .iter()
                        .filter(|c| c.cell.s == s && c.success_fraction >= level)
                        .map(|c| c.cell.mu)
                        .min();
                    BoundaryPoint { s, mu_at_level }
                })
                .collect();
            let defined: Vec<(f64, f64)> = points
                .iter()
                .filter_map(|p| p.mu_at_level.map(|mu| (p.s as f64, mu as f64)))
                .collect();
            PhaseBoundary {
                antennas: key.0,
                users: key.1,
                active_users: key.2,
                n: key.3,
                sigma: key.4,
                slope: ls_slope(&defined),
                points,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_grids_have_expected_cells() {
        let g = PhaseGrid::preset_n50();
        assert_eq!(
            g.mu_values,
            vec![10, 20, 30, 40, 50, 60, 70, 80, 90, 100, 110, 120]
        );
        assert_eq!(g.cells().len(), 3 * 7 * 12);
        let g = PhaseGrid::preset_n350();
        assert_eq!(g.mu_values_for(350, 5), g.mu_values.as_slice());
        let wide = g.mu_values_for(350, 10);
        assert_eq!(wide.first(), Some(&20));
        assert_eq!(wide.last(), Some(&350));
        assert_eq!(wide.len(), 12);
        assert!(g.validate().is_ok());
    }

    #[test]
    fn preemption_is_strict() {
        assert!(CellKey::single(50, 5, 3, 10).is_preempted());
        assert!(!CellKey::single(50, 5, 3, 15).is_preempted());
        assert!(CellKey::single(50, 5, 3, 14).is_preempted());
    }

    #[test]
    fn preempted_trial_skips_solver() {
        let r = run_trial(
            &CellKey::single(50, 5, 3, 10),
            0,
            1,
            TrialMode::Single,
            &SolverConfig::default(),
        );
        assert!(r.preempted && !r.success);
        assert_eq!(r.iterations, 0);
    }

    #[test]
    fn grid_validation() {
        let mut g = PhaseGrid::preset_n50();
        g.s_values.clear();
        assert!(g.validate().is_err());
        let mut g = PhaseGrid::preset_n50();
        g.trials_per_cell = 0;
        assert!(g.validate().is_err());
        let mut g = PhaseGrid::preset_n50();
        g.sigma_values = vec![60];
        assert!(g.validate().is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let g = PhaseGrid::preset_n350();
        let text = g.to_toml_string().unwrap();
        assert_eq!(PhaseGrid::from_toml_str(&text).unwrap(), g);
        let minimal = "n_values = [50]\nsigma_values = [5]\ns_values = [1]\nmu_values = [40]\n";
        let g = PhaseGrid::from_toml_str(minimal).unwrap();
        assert_eq!(g.trials_per_cell, 100);
        assert_eq!(g.solver, SolverConfig::default());
    }

    #[test]
    fn slope_of_line() {
        let pts = [(1.0, 10.0), (2.0, 20.0), (3.0, 30.0)];
        assert!((ls_slope(&pts).unwrap() - 10.0).abs() < 1e-12);
        assert!(ls_slope(&pts[..1]).is_none());
    }
}
