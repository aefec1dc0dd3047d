use std::collections::BTreeSet;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::aggregators::{check_structure, Aggregator, AggregatorKind, Felicity};
use crate::closed_form::{
    gap_h_minus_f_at_zero, u_chen_epstein, u_f_linear, u_g_linear, u_h_linear, u_quadratic, GridPath,
    HfGap, LinearParams, States,
};
use crate::config::{parse_plan, sha256_file, AggregatorSpec, ExperimentConfig};
use crate::engine::{intensity_norm_profile, write_solution_csv, BSDESolution};
use crate::error::Error;
use crate::neutrality::{
    equivalence_row, estimate_rotation, run_neutrality_experiment, solve_pair, theorem1_terminal_battery,
    BatteryReport, EquivalenceRow, FiltrationPair, NeutralityReport, PairKind, RotationOptions, Verdict,
};
use crate::paths::{cache, generate_ensemble, BrownianEnsemble, FiltrationTag, TimeGrid};
use crate::pde::{
    intensity_bound_check, reconstruct_markov_bsde, refinement_study, solve_quasilinear, tanh_h3_on,
    BoundCheckOptions, BoundReport, ReconstructOptions, RefinementStudy, ScalarDriver, SpaceTimeGrid,
};

/// Relative tolerance for `reproduce` on numeric outputs.
pub const REPRODUCE_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Parser)]
#[command(name = "gsdu", version, about = "BSDE and GSDU experiments under coarse and fine Brownian information")]
pub struct Cli {
    /// Worker threads (GSDU_THREADS takes precedence).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Exit nonzero when any verdict is inconclusive.
    #[arg(long, global = true)]
    pub strict: bool,
    /// Output directory, overriding `output.dir` of the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the configured problem under both members of the pair.
    Solve { config: PathBuf },
    /// Tabulate the analytic values.
    ClosedForm { config: PathBuf },
    /// Run the PDE oracle, its refinement study and the intensity bound check.
    Pde { config: PathBuf },
    /// Estimate the rotation between the coarse and fine drivers.
    Rotation { config: PathBuf },
    /// Compare coarse and fine solutions and render a verdict.
    Neutrality(NeutralityArgs),
    /// Neutrality, the equivalence table and the terminal-claim battery.
    Battery { config: PathBuf },
    /// Merge neutrality profiles found under a directory into one CSV.
    Report { dir: PathBuf },
    /// Re-run a manifest and compare outputs.
    Reproduce { manifest: PathBuf },
}

#[derive(Debug, Args)]
pub struct NeutralityArgs {
    /// Base config; flags override its fields.
    pub config: Option<PathBuf>,
    /// `expected-utility`, `linear-z[:γ]`, `chen-epstein[:k]`, `quadratic[:α]`, `tanh[:β,γ]`.
    #[arg(long)]
    pub aggregator: Option<String>,
    /// `b`, `b-prime` or `exp:<slope>`.
    #[arg(long)]
    pub plan: Option<String>,
    /// `sign-loss`, `anticipation` or `identity`.
    #[arg(long)]
    pub pair: Option<String>,
    #[arg(long)]
    pub paths: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Absolute floor of the value tolerance.
    #[arg(long)]
    pub tol: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Solve,
    ClosedForm,
    Pde,
    Rotation,
    Neutrality,
    Battery,
}

impl Task {
    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Solve => "solve",
            Task::ClosedForm => "closed-form",
            Task::Pde => "pde",
            Task::Rotation => "rotation",
            Task::Neutrality => "neutrality",
            Task::Battery => "battery",
        }
    }
}

#[derive(Debug)]
pub enum CliError {
    Schema(String),
    Numeric { stage: String, source: Error },
    Strict(String),
    Mismatch(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io(_) => 1,
            CliError::Schema(_) => 2,
            CliError::Numeric { .. } => 3,
            CliError::Strict(_) => 4,
            CliError::Mismatch(_) => 5,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Schema(m) => write!(f, "config error: {m}"),
            CliError::Numeric { stage, source } => write!(f, "numeric failure in stage `{stage}`: {source}"),
            CliError::Strict(m) => write!(f, "strict mode: {m}"),
            CliError::Mismatch(m) => write!(f, "reproduction failed: {m}"),
            CliError::Io(m) => write!(f, "io error: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Format(m) => CliError::Schema(m),
            Error::Io(e) => CliError::Io(e.to_string()),
            other => CliError::Numeric {
                stage: "setup".into(),
                source: other,
            },
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub name: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputRecord {
    /// Relative to the output directory.
    pub path: PathBuf,
    pub sha256: String,
}

/// Written once per run as `manifest.json` in the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifact: String,
    pub version: String,
    pub task: Task,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub threads: usize,
    pub started_unix: u64,
    pub wall_clock_seconds: f64,
    pub stages: Vec<StageTiming>,
    pub outputs: Vec<OutputRecord>,
    pub path_cache: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    /// `(label, verdict)` for every neutrality report produced.
    pub verdicts: Vec<(String, Verdict)>,
}

struct Recorder {
    dir: PathBuf,
    stages: Vec<StageTiming>,
    outputs: Vec<PathBuf>,
    verdicts: Vec<(String, Verdict)>,
    path_cache: Option<PathBuf>,
}

impl Recorder {
    fn stage<T>(&mut self, name: &str, f: impl FnOnce() -> crate::Result<T>) -> CliResult<T> {
        let t0 = Instant::now();
        let out = f();
        self.stages.push(StageTiming {
            name: name.to_string(),
            seconds: t0.elapsed().as_secs_f64(),
        });
        out.map_err(|e| match e {
            Error::Io(e) => CliError::Io(e.to_string()),
            source => CliError::Numeric {
                stage: name.to_string(),
                source,
            },
        })
    }

    fn write_with(&mut self, name: &str, f: impl FnOnce(&mut BufWriter<File>) -> crate::Result<()>) -> CliResult<()> {
        let mut w = BufWriter::new(File::create(self.dir.join(name))?);
        f(&mut w).map_err(CliError::from)?;
        w.flush()?;
        self.outputs.push(PathBuf::from(name));
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<()> {
        self.write_with(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value).map_err(|e| Error::Format(e.to_string()))?;
            w.write_all(b"\n")?;
            Ok(())
        })
    }

    fn verdict(&mut self, rep: &NeutralityReport) {
        self.verdicts
            .push((format!("{} / {} / {}", rep.aggregator, rep.pair, rep.problem), rep.verdict));
    }
}

/// Applies `GSDU_THREADS`, else `flag`, to the global pool. Returns the
/// thread count in effect.
pub fn configure_threads(flag: Option<usize>) -> usize {
    let env = std::env::var("GSDU_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok());
    if let Some(n) = env.or(flag).filter(|n| *n > 0) {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    rayon::current_num_threads()
}

fn base_ensemble(cfg: &ExperimentConfig, kind: PairKind, rec: &mut Recorder) -> CliResult<BrownianEnsemble> {
    let span = if kind == PairKind::Anticipation { 2 } else { 1 };
    let grid = TimeGrid::new(cfg.horizon, cfg.solver.steps, span)?;
    let (np, dims, seed) = (cfg.solver.paths, cfg.dims, cfg.seed);
    let cache_path = rec.dir.join(format!("paths_span{span}.bin"));
    if cfg.output.cache_paths {
        if let Ok(e) = cache::load(&cache_path, FiltrationTag::F) {
            if *e.grid() == grid && e.n_paths() == np && e.dims() == dims && e.seed() == seed {
                rec.path_cache = Some(cache_path);
                return Ok(e);
            }
        }
    }
    let e = rec.stage("paths", || generate_ensemble(grid, dims, np, seed))?;
    if cfg.output.cache_paths {
        cache::save(&cache_path, &e)?;
        rec.path_cache = Some(cache_path);
    }
    Ok(e)
}

fn build_pair(cfg: &ExperimentConfig, kind: PairKind, rec: &mut Recorder) -> CliResult<FiltrationPair> {
    let base = base_ensemble(cfg, kind, rec)?;
    rec.stage("pair", || FiltrationPair::from_base(kind, base))
}

#[derive(Debug, Clone, Serialize)]
struct FiltrationSummary {
    filtration: String,
    y0: f64,
    y0_stderr: f64,
    mean_norm_z0: f64,
}

fn summarize(sol: &BSDESolution) -> FiltrationSummary {
    let prof = intensity_norm_profile(sol);
    FiltrationSummary {
        filtration: sol.tag.to_string(),
        y0: sol.y0(),
        y0_stderr: sol.y0_stderr(),
        mean_norm_z0: prof.first().map_or(f64::NAN, |p| p.mean),
    }
}

#[derive(Debug, Clone, Serialize)]
struct OracleCheck {
    closed_form_coarse: Option<f64>,
    closed_form_fine: Option<f64>,
    pde_coarse: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
struct SolveSummary {
    name: String,
    aggregator: String,
    problem: String,
    pair: PairKind,
    n_paths: usize,
    n_steps: usize,
    seed: u64,
    coarse: FiltrationSummary,
    fine: FiltrationSummary,
    oracle: OracleCheck,
}

/// Closed-form value at time 0 (where every filtration is trivial).
fn closed_form_at_zero(agg: &Aggregator, cfg: &ExperimentConfig, fine: Option<PairKind>) -> crate::Result<f64> {
    let rows = closed_form_rows(agg, cfg, 1)?;
    let want = match fine {
        None | Some(PairKind::Identity) => "F",
        Some(PairKind::SignLoss) => "G",
        Some(PairKind::Anticipation) => "H",
    };
    rows.iter()
        .find(|r| r.filtration == want)
        .map(|r| r.u)
        .ok_or_else(|| Error::Unsupported("no closed form for this filtration".into()))
}

fn pde_driver(agg: &Aggregator, cfg: &ExperimentConfig) -> crate::Result<(ScalarDriver, SpaceTimeGrid)> {
    let driver = ScalarDriver::from_aggregator(agg, cfg.slope()?)?;
    let w = cfg.pde.half_width * cfg.horizon.sqrt();
    let grid = SpaceTimeGrid::new(cfg.pde.x0 - w, cfg.pde.x0 + w, cfg.pde.nx, cfg.pde.nt, cfg.horizon)?;
    Ok((driver, grid))
}

fn task_solve(cfg: &ExperimentConfig, rec: &mut Recorder) -> CliResult<()> {
    let agg = cfg.aggregator.build()?;
    let problem = cfg.problem();
    let pair = build_pair(cfg, cfg.pair.kind, rec)?;
    let solver = cfg.solver.solver();
    let sol = rec.stage("solve", || solve_pair(&agg, &problem, &pair, &solver))?;
    rec.write_with("solution_coarse.csv", |w| write_solution_csv(w, &sol.coarse))?;
    rec.write_with("solution_fine.csv", |w| write_solution_csv(w, &sol.fine))?;
    let mut oracle = OracleCheck {
        closed_form_coarse: None,
        closed_form_fine: None,
        pde_coarse: None,
    };
    if cfg.oracles.closed_form {
        oracle.closed_form_coarse = Some(rec.stage("closed-form", || closed_form_at_zero(&agg, cfg, None))?);
        oracle.closed_form_fine = Some(rec.stage("closed-form", || closed_form_at_zero(&agg, cfg, Some(cfg.pair.kind)))?);
    }
    if cfg.oracles.pde {
        let th = rec.stage("pde.solve", || {
            let (d, g) = pde_driver(&agg, cfg)?;
            Ok(solve_quasilinear(&d, g)?.interpolate(0.0, cfg.pde.x0).0)
        })?;
        oracle.pde_coarse = Some(th);
    }
    let summary = SolveSummary {
        name: cfg.name.clone(),
        aggregator: agg.name(),
        problem: problem.label(),
        pair: pair.kind(),
        n_paths: cfg.solver.paths,
        n_steps: cfg.solver.steps,
        seed: cfg.seed,
        coarse: summarize(&sol.coarse),
        fine: summarize(&sol.fine),
        oracle,
    };
    rec.write_json("solve.json", &summary)
}

/// One row of the closed-form table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClosedFormRow {
    pub t: f64,
    pub filtration: String,
    pub u: f64,
    pub v: f64,
    pub formula_id: String,
}

/// Values at the zero state `W ≡ 0` (so `sgn(W^G) = +1`) on `points` evenly
/// spaced times in `[0, T]`.
pub fn closed_form_rows(agg: &Aggregator, cfg: &ExperimentConfig, points: usize) -> crate::Result<Vec<ClosedFormRow>> {
    if agg.felicity != Felicity::Log {
        return Err(Error::Unsupported("closed forms need the log felicity".into()));
    }
    if cfg.dims != 1 {
        return Err(Error::Unsupported("closed forms are tabulated for one dimension".into()));
    }
    let big_t = cfg.horizon;
    let a = cfg.slope()?;
    let intervals = points.saturating_sub(1).max(1);
    let fine = 40;
    let path_dt = big_t / (intervals * fine) as f64;
    let zeros = vec![0.0; 2 * intervals * fine + 1];
    let path = GridPath {
        dt: path_dt,
        values: &zeros,
    };
    let times: Vec<f64> = if points == 1 {
        vec![0.0]
    } else {
        (0..points).map(|k| big_t * k as f64 / intervals as f64).collect()
    };
    let row = |t: f64, f: &str, u: f64, v: f64, id: &str| ClosedFormRow {
        t,
        filtration: f.into(),
        u,
        v,
        formula_id: id.into(),
    };
    let mut rows = Vec::new();
    let linear = |beta: &crate::aggregators::PiecewiseConstant, gamma: f64, id: &str, rows: &mut Vec<ClosedFormRow>| {
        let p = LinearParams::new(beta.clone(), gamma, big_t)?.with_slope(a);
        for &t in &times {
            let f = u_f_linear(t, 0.0, &p)?;
            let g = u_g_linear(t, 0.0, 0.0, &p)?;
            let h = u_h_linear(t, &path, &p)?;
            rows.push(row(t, "F", f.u, f.v, &format!("{id}/F")));
            rows.push(row(t, "G", g.u, g.v, &format!("{id}/G")));
            rows.push(row(t, "H", h.u, h.v, &format!("{id}/H")));
        }
        Ok::<(), Error>(())
    };
    match &agg.kind {
        AggregatorKind::ExpectedUtility { beta } => linear(beta, 0.0, "expected_utility", &mut rows)?,
        AggregatorKind::LinearZ { beta, gamma } => linear(beta, *gamma, "linear_z", &mut rows)?,
        AggregatorKind::ChenEpstein { beta, k } if k.len() == 1 => {
            for &t in &times {
                for (name, st) in [
                    ("F", States::F { w_f: 0.0 }),
                    ("G", States::G { w_g: 0.0, w_f: 0.0 }),
                    ("H", States::H { path }),
                ] {
                    let v = u_chen_epstein(st, t, k[0], beta, big_t, a)?;
                    rows.push(row(t, name, v.u, v.v, &format!("chen_epstein/{name}")));
                }
            }
        }
        AggregatorKind::Quadratic { beta, alpha } if *beta == 0.0 => {
            for &t in &times {
                for (name, st) in [
                    ("F", States::F { w_f: 0.0 }),
                    ("G", States::G { w_g: 0.0, w_f: 0.0 }),
                    ("H", States::H { path }),
                ] {
                    let q = u_quadratic(st, t, *alpha, big_t, a)?;
                    rows.push(row(t, name, q.u, q.v, &format!("quadratic/{name}")));
                    if let Some(vp) = q.v_published {
                        rows.push(row(t, name, q.u, vp, &format!("quadratic/{name}-published")));
                    }
                }
            }
        }
        _ => {
            return Err(Error::Unsupported(format!("no closed form for {}", agg.name())));
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
struct ClosedFormSummary {
    aggregator: String,
    slope: f64,
    horizon: f64,
    /// `U₀^H - U₀^F` for linear drivers.
    gap_h_minus_f: Option<HfGap>,
    /// Whether a published intensity differs from the one implied by the value.
    intensity_discrepancy: bool,
}

fn task_closed_form(cfg: &ExperimentConfig, rec: &mut Recorder) -> CliResult<()> {
    let agg = cfg.aggregator.build()?;
    let rows = rec.stage("closed-form", || closed_form_rows(&agg, cfg, cfg.closed_form.points))?;
    rec.write_with("closed_form.csv", |w| {
        let mut c = csv::Writer::from_writer(w);
        c.write_record(["t", "filtration", "U", "V", "formula_id"])
            .map_err(|e| Error::Format(e.to_string()))?;
        for r in &rows {
            c.write_record([r.t.to_string(), r.filtration.clone(), r.u.to_string(), r.v.to_string(), r.formula_id.clone()])
                .map_err(|e| Error::Format(e.to_string()))?;
        }
        c.flush()?;
        Ok(())
    })?;
    let slope = cfg.slope()?;
    let gap = match &agg.kind {
        AggregatorKind::LinearZ { beta, gamma } => {
            Some(gap_h_minus_f_at_zero(&LinearParams::new(beta.clone(), *gamma, cfg.horizon)?.with_slope(slope)))
        }
        _ => None,
    };
    let summary = ClosedFormSummary {
        aggregator: agg.name(),
        slope,
        horizon: cfg.horizon,
        gap_h_minus_f: gap,
        intensity_discrepancy: rows
            .iter()
            .any(|r| r.formula_id.ends_with("-published")
                && rows.iter().any(|s| s.t == r.t && s.formula_id == r.formula_id.trim_end_matches("-published") && (s.v - r.v).abs() > 1e-12)),
    };
    rec.write_json("closed_form.json", &summary)
}

#[derive(Debug, Clone, Serialize)]
struct PdeSummary {
    driver: String,
    x0: f64,
    theta0: f64,
    dtheta0: f64,
    a_priori_bound: f64,
    closed_form: Option<f64>,
    refinement: RefinementStudy,
    bound: Option<BoundReport>,
}

fn task_pde(cfg: &ExperimentConfig, rec: &mut Recorder) -> CliResult<()> {
    let agg = cfg.aggregator.build()?;
    let (driver, grid) = rec.stage("pde.setup", || pde_driver(&agg, cfg))?;
    let sol = rec.stage("pde.solve", || solve_quasilinear(&driver, grid))?;
    rec.write_with("pde_snapshots.csv", |w| sol.write_snapshots_csv(w, cfg.pde.snapshot_every.max(1)))?;
    let refinement = rec.stage("pde.refinement", || refinement_study(&driver, grid, cfg.pde.x0, cfg.pde.levels))?;
    let (theta0, dtheta0) = sol.interpolate(0.0, cfg.pde.x0);
    let closed_form = if cfg.oracles.closed_form {
        Some(rec.stage("closed-form", || closed_form_at_zero(&agg, cfg, None))?)
            .filter(|_| cfg.pde.x0 == 0.0)
    } else {
        None
    };
    let bound = match cfg.aggregator {
        AggregatorSpec::Tanh { beta, gamma } => {
            let base = rec.stage("paths", || {
                generate_ensemble(TimeGrid::unit(cfg.horizon, cfg.pde.nt)?, 1, cfg.pde.paths, cfg.seed)
            })?;
            let report = rec.stage("pde.bound", || {
                let rec = reconstruct_markov_bsde(&sol, &base, cfg.pde.x0, ReconstructOptions::for_grid(&grid))?;
                let h3 = tanh_h3_on(beta, gamma, grid.x_min, grid.x_max);
                let opts = BoundCheckOptions {
                    slack: cfg.pde.slack,
                    t_max: cfg.horizon - cfg.pde.t_cut,
                };
                intensity_bound_check(&rec, &h3, cfg.horizon, opts)
            })?;
            rec.write_json("pde_bound.json", &report)?;
            Some(report)
        }
        _ => None,
    };
    let summary = PdeSummary {
        driver: driver.name.clone(),
        x0: cfg.pde.x0,
        theta0,
        dtheta0,
        a_priori_bound: sol.a_priori_bound,
        closed_form,
        refinement,
        bound,
    };
    rec.write_json("pde.json", &summary)
}

fn task_rotation(cfg: &ExperimentConfig, rec: &mut Recorder) -> CliResult<()> {
    let pair = build_pair(cfg, cfg.pair.kind, rec)?;
    let est = rec.stage("rotation", || estimate_rotation(&pair, RotationOptions::default()))?;
    let n = est.dims;
    rec.write_with("rotation_cells.csv", |w| {
        let mut header = vec!["step".to_string(), "t".into(), "cell".into(), "count".into(), "defect".into(), "flagged".into()];
        for a in 0..n {
            for b in 0..n {
                header.push(format!("m_{a}_{b}"));
            }
        }
        for a in 0..n {
            for b in 0..n {
                header.push(format!("se_{a}_{b}"));
            }
        }
        let mut c = csv::Writer::from_writer(w);
        c.write_record(&header).map_err(|e| Error::Format(e.to_string()))?;
        for cell in &est.cells {
            let mut r = vec![
                cell.step.to_string(),
                cell.t.to_string(),
                cell.cell.to_string(),
                cell.count.to_string(),
                cell.defect.to_string(),
                cell.flagged.to_string(),
            ];
            r.extend(cell.m.iter().map(|v| v.to_string()));
            r.extend(cell.stderr.iter().map(|v| v.to_string()));
            c.write_record(&r).map_err(|e| Error::Format(e.to_string()))?;
        }
        c.flush()?;
        Ok(())
    })?;
    #[derive(Serialize)]
    struct Out<'a> {
        pair: PairKind,
        dims: usize,
        summary: &'a crate::neutrality::RotationSummary,
    }
    rec.write_json(
        "rotation.json",
        &Out {
            pair: pair.kind(),
            dims: n,
            summary: &est.summary,
        },
    )
}

fn neutrality_report(cfg: &ExperimentConfig, kind: PairKind, rec: &mut Recorder) -> CliResult<NeutralityReport> {
    let agg = cfg.aggregator.build()?;
    let pair = build_pair(cfg, kind, rec)?;
    let solver = cfg.solver.solver();
    let rep = rec.stage("neutrality", || {
        run_neutrality_experiment(&agg, &cfg.problem(), &pair, &solver, &cfg.tolerances)
    })?;
    rec.verdict(&rep);
    Ok(rep)
}

fn task_neutrality(cfg: &ExperimentConfig, rec: &mut Recorder) -> CliResult<()> {
    let rep = neutrality_report(cfg, cfg.pair.kind, rec)?;
    rec.write_json("neutrality.json", &rep)?;
    rec.write_with("neutrality_profile.csv", |w| rep.write_profile_csv(w))
}

#[derive(Debug, Clone, Serialize)]
struct BatteryOutput {
    name: String,
    aggregator: String,
    reports: Vec<NeutralityReport>,
    equivalence: Option<Vec<EquivalenceRow>>,
    all_consistent: Option<bool>,
    terminal: Option<BatteryReport>,
}

fn task_battery(cfg: &ExperimentConfig, rec: &mut Recorder) -> CliResult<()> {
    let agg = cfg.aggregator.build()?;
    let mut kinds = vec![cfg.pair.kind];
    for k in &cfg.pair.compare {
        if !kinds.contains(k) {
            kinds.push(*k);
        }
    }
    let mut reports = Vec::new();
    for k in &kinds {
        reports.push(neutrality_report(cfg, *k, rec)?);
    }
    let norm_dependent = check_structure(&agg).h1_h2_norm_dependence;
    let equivalence = norm_dependent.then(|| reports.iter().map(equivalence_row).collect::<Vec<_>>());
    let terminal = if norm_dependent && agg.felicity == Felicity::Zero {
        let pair = build_pair(cfg, cfg.pair.kind, rec)?;
        let solver = cfg.solver.solver();
        let b = rec.stage("battery", || theorem1_terminal_battery(&agg, &pair, &solver, &cfg.tolerances))?;
        for (_, r) in &b.claims {
            rec.verdict(r);
        }
        Some(b)
    } else {
        None
    };
    for (i, r) in reports.iter().enumerate() {
        rec.write_with(&format!("profile_{}_{}.csv", i, r.pair), |w| r.write_profile_csv(w))?;
    }
    let out = BatteryOutput {
        name: cfg.name.clone(),
        aggregator: agg.name(),
        all_consistent: equivalence.as_ref().map(|rows| rows.iter().all(|r| r.consistent)),
        reports,
        equivalence,
        terminal,
    };
    rec.write_json("battery.json", &out)
}

/// Runs `task` for `cfg` into `dir` and writes `manifest.json` there.
pub fn execute(task: Task, cfg: &ExperimentConfig, dir: &Path, threads: usize) -> CliResult<RunOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(dir)?;
    let started = Instant::now();
    let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let mut rec = Recorder {
        dir: dir.to_path_buf(),
        stages: Vec::new(),
        outputs: Vec::new(),
        verdicts: Vec::new(),
        path_cache: None,
    };
    match task {
        Task::Solve => task_solve(cfg, &mut rec)?,
        Task::ClosedForm => task_closed_form(cfg, &mut rec)?,
        Task::Pde => task_pde(cfg, &mut rec)?,
        Task::Rotation => task_rotation(cfg, &mut rec)?,
        Task::Neutrality => task_neutrality(cfg, &mut rec)?,
        Task::Battery => task_battery(cfg, &mut rec)?,
    }
    let outputs = rec
        .outputs
        .iter()
        .map(|p| {
            Ok(OutputRecord {
                path: p.clone(),
                sha256: sha256_file(&dir.join(p))?,
            })
        })
        .collect::<crate::Result<Vec<_>>>()?;
    let manifest = RunManifest {
        artifact: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        task,
        config_hash: cfg.hash(),
        config: cfg.clone(),
        threads,
        started_unix,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        stages: rec.stages,
        outputs,
        path_cache: rec.path_cache.map(|p| p.strip_prefix(dir).map(Path::to_path_buf).unwrap_or(p)),
    };
    let f = File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(BufWriter::new(f), &manifest).map_err(|e| CliError::Io(e.to_string()))?;
    Ok(RunOutcome {
        dir: dir.to_path_buf(),
        manifest,
        verdicts: rec.verdicts,
    })
}

/// Largest relative difference between numeric tokens of two text files;
/// `None` when their non-numeric structure differs.
pub fn numeric_diff(a: &str, b: &str) -> Option<f64> {
    let split = |s: &str| -> Vec<String> {
        s.split(|c: char| c == ',' || c == ':' || c == '\n' || c == '[' || c == ']' || c == '{' || c == '}' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(str::to_string)
            .collect()
    };
    let (ta, tb) = (split(a), split(b));
    if ta.len() != tb.len() {
        return None;
    }
    let mut worst = 0.0_f64;
    for (x, y) in ta.iter().zip(&tb) {
        match (x.parse::<f64>(), y.parse::<f64>()) {
            (Ok(u), Ok(v)) => {
                if u.to_bits() == v.to_bits() || (u.is_nan() && v.is_nan()) {
                    continue;
                }
                let d = (u - v).abs() / u.abs().max(v.abs()).max(f64::MIN_POSITIVE);
                worst = worst.max(d);
            }
            _ if x == y => {}
            _ => return None,
        }
    }
    Some(worst)
}

#[derive(Debug, Clone, Serialize)]
pub struct FileComparison {
    pub path: PathBuf,
    pub identical: bool,
    pub max_rel_diff: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReproduceReport {
    pub config_hash: String,
    pub tolerance: f64,
    pub pass: bool,
    pub files: Vec<FileComparison>,
}

fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Re-runs a manifest into `<manifest dir>/reproduce` and compares outputs.
pub fn reproduce(manifest_path: &Path, threads: usize) -> CliResult<ReproduceReport> {
    let text = read_text(manifest_path)?;
    let m: RunManifest = serde_json::from_str(&text).map_err(|e| CliError::Schema(format!("{}: {e}", manifest_path.display())))?;
    if m.version != env!("CARGO_PKG_VERSION") || m.artifact != env!("CARGO_PKG_NAME") {
        return Err(CliError::Mismatch(format!(
            "manifest was written by {} {}, this is {} {}; outputs are only comparable within one version",
            m.artifact,
            m.version,
            env!("CARGO_PKG_NAME"),
            env!("CARGO_PKG_VERSION")
        )));
    }
    if m.config.hash() != m.config_hash {
        return Err(CliError::Mismatch("embedded config does not match its recorded hash".into()));
    }
    let src = manifest_path.parent().unwrap_or(Path::new("."));
    let dir = src.join("reproduce");
    let mut cfg = m.config.clone();
    if let Some(p) = &m.path_cache {
        // reuse the original cache when it is still there; otherwise it is regenerated from the seed
        let from = src.join(p);
        if from.exists() {
            std::fs::create_dir_all(&dir)?;
            std::fs::copy(&from, dir.join(p))?;
        }
    } else {
        cfg.output.cache_paths = false;
    }
    let out = execute(m.task, &cfg, &dir, threads)?;
    let mut files = Vec::new();
    for rec in &m.outputs {
        let again = out.manifest.outputs.iter().find(|o| o.path == rec.path);
        let identical = again.is_some_and(|o| o.sha256 == rec.sha256);
        let max_rel_diff = if identical {
            Some(0.0)
        } else {
            match (std::fs::read_to_string(src.join(&rec.path)), std::fs::read_to_string(dir.join(&rec.path))) {
                (Ok(a), Ok(b)) => numeric_diff(&a, &b),
                _ => None,
            }
        };
        files.push(FileComparison {
            path: rec.path.clone(),
            identical,
            max_rel_diff,
        });
    }
    let pass = files.iter().all(|f| f.max_rel_diff.is_some_and(|d| d <= REPRODUCE_TOLERANCE));
    let report = ReproduceReport {
        config_hash: m.config_hash,
        tolerance: REPRODUCE_TOLERANCE,
        pass,
        files,
    };
    let f = File::create(dir.join("reproduce.json"))?;
    serde_json::to_writer_pretty(BufWriter::new(f), &report).map_err(|e| CliError::Io(e.to_string()))?;
    Ok(report)
}

/// One row of the merged report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MergedRow {
    pub aggregator: String,
    pub pair: String,
    pub t: f64,
    pub problem: String,
    pub mean_gap: f64,
    pub gap_stderr: f64,
    pub within_fraction: f64,
    pub norm_coarse: Option<f64>,
    pub norm_fine: Option<f64>,
    pub verdict: String,
    pub source: String,
}

fn collect_reports(v: &serde_json::Value, source: &str, out: &mut Vec<MergedRow>) {
    match v {
        serde_json::Value::Object(map) => {
            let fields = (map.get("aggregator"), map.get("pair"), map.get("profile"));
            if let (Some(agg), Some(pair), Some(serde_json::Value::Array(rows))) = fields {
                let s = |x: &serde_json::Value| x.as_str().unwrap_or_default().to_string();
                let problem = map.get("problem").map(s).unwrap_or_default();
                let verdict = map.get("verdict").map(s).unwrap_or_default();
                for r in rows {
                    let f = |k: &str| r.get(k).and_then(serde_json::Value::as_f64);
                    out.push(MergedRow {
                        aggregator: s(agg),
                        pair: s(pair),
                        t: f("t").unwrap_or(f64::NAN),
                        problem: problem.clone(),
                        mean_gap: f("mean_gap").unwrap_or(f64::NAN),
                        gap_stderr: f("gap_stderr").unwrap_or(f64::NAN),
                        within_fraction: f("within_fraction").unwrap_or(f64::NAN),
                        norm_coarse: f("norm_coarse"),
                        norm_fine: f("norm_fine"),
                        verdict: verdict.clone(),
                        source: source.to_string(),
                    });
                }
                return;
            }
            map.values().for_each(|x| collect_reports(x, source, out));
        }
        serde_json::Value::Array(xs) => xs.iter().for_each(|x| collect_reports(x, source, out)),
        _ => {}
    }
}

fn json_files(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.path());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            json_files(&p, out)?;
        } else if p.extension().is_some_and(|x| x == "json") {
            out.push(p);
        }
    }
    Ok(())
}

/// Merges every neutrality profile under `dir`, sorted by `(aggregator, pair, t)`.
pub fn merge_reports(dir: &Path) -> CliResult<Vec<MergedRow>> {
    let mut files = Vec::new();
    json_files(dir, &mut files).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    let mut rows = Vec::new();
    let mut seen = BTreeSet::new();
    for f in files {
        if f.file_name().is_some_and(|n| n == "manifest.json") {
            continue;
        }
        let text = read_text(&f)?;
        let Ok(v) = serde_json::from_str::<serde_json::Value>(&text) else {
            continue;
        };
        let rel = f.strip_prefix(dir).unwrap_or(&f).display().to_string();
        if seen.insert(rel.clone()) {
            collect_reports(&v, &rel, &mut rows);
        }
    }
    rows.sort_by(|a, b| {
        (a.aggregator.as_str(), a.pair.as_str(), a.problem.as_str(), a.source.as_str())
            .cmp(&(b.aggregator.as_str(), b.pair.as_str(), b.problem.as_str(), b.source.as_str()))
            .then(a.t.total_cmp(&b.t))
    });
    Ok(rows)
}

fn write_merged(rows: &[MergedRow], path: &Path) -> CliResult<()> {
    let mut c = csv::Writer::from_path(path).map_err(|e| CliError::Io(e.to_string()))?;
    for r in rows {
        c.serialize(r).map_err(|e| CliError::Io(e.to_string()))?;
    }
    c.flush()?;
    Ok(())
}

fn neutrality_config(args: &NeutralityArgs) -> CliResult<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => {
            let seed = args
                .seed
                .ok_or_else(|| CliError::Schema("missing field `seed` (pass --seed or a config file)".into()))?;
            let agg = args
                .aggregator
                .as_deref()
                .ok_or_else(|| CliError::Schema("missing field `aggregator` (pass --aggregator or a config file)".into()))?;
            let text = format!(
                "name = \"neutrality\"\nseed = {seed}\n[aggregator]\nkind = \"expected_utility\"\nfelicity = {{ type = \"log\" }}\n[pair]\nkind = \"sign-loss\"\n[solver]\npaths = 100000\nsteps = 200\n"
            );
            let mut cfg = ExperimentConfig::from_toml(&text)?;
            cfg.aggregator = AggregatorSpec::parse_short(agg).map_err(|e| CliError::Schema(e.to_string()))?;
            cfg
        }
    };
    if let Some(a) = &args.aggregator {
        cfg.aggregator = AggregatorSpec::parse_short(a).map_err(|e| CliError::Schema(e.to_string()))?;
    }
    if let Some(p) = &args.plan {
        cfg.plan = Some(parse_plan(p).map_err(|e| CliError::Schema(e.to_string()))?);
        cfg.terminal = None;
    }
    if let Some(p) = &args.pair {
        cfg.pair.kind = p.parse().map_err(|e: Error| CliError::Schema(e.to_string()))?;
    }
    if let Some(n) = args.paths {
        cfg.solver.paths = n;
    }
    if let Some(n) = args.steps {
        cfg.solver.steps = n;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(t) = args.tol {
        cfg.tolerances.abs_floor = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_cli(cli: Cli) -> CliResult<()> {
    let threads = configure_threads(cli.threads);
    let (task, cfg) = match &cli.command {
        Command::Report { dir } => {
            let rows = merge_reports(dir)?;
            let path = cli.out.clone().unwrap_or_else(|| dir.join("merged.csv"));
            write_merged(&rows, &path)?;
            println!("{}", serde_json::json!({ "rows": rows.len(), "output": path }));
            return Ok(());
        }
        Command::Reproduce { manifest } => {
            let r = reproduce(manifest, threads)?;
            println!("{}", serde_json::to_string(&r).unwrap_or_default());
            return if r.pass {
                Ok(())
            } else {
                Err(CliError::Mismatch(format!("outputs differ by more than {REPRODUCE_TOLERANCE:e}")))
            };
        }
        Command::Solve { config } => (Task::Solve, ExperimentConfig::load(config)?),
        Command::ClosedForm { config } => (Task::ClosedForm, ExperimentConfig::load(config)?),
        Command::Pde { config } => (Task::Pde, ExperimentConfig::load(config)?),
        Command::Rotation { config } => (Task::Rotation, ExperimentConfig::load(config)?),
        Command::Battery { config } => (Task::Battery, ExperimentConfig::load(config)?),
        Command::Neutrality(args) => (Task::Neutrality, neutrality_config(args)?),
    };
    let dir = cli.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
    let out = execute(task, &cfg, &dir, threads)?;
    let verdicts: Vec<_> = out
        .verdicts
        .iter()
        .map(|(l, v)| serde_json::json!({ "experiment": l, "verdict": v }))
        .collect();
    println!(
        "{}",
        serde_json::json!({
            "task": task.as_str(),
            "config_hash": out.manifest.config_hash,
            "dir": out.dir,
            "verdicts": verdicts,
        })
    );
    if cli.strict {
        let bad: Vec<&str> = out
            .verdicts
            .iter()
            .filter(|(_, v)| *v == Verdict::Inconclusive)
            .map(|(l, _)| l.as_str())
            .collect();
        if !bad.is_empty() {
            return Err(CliError::Strict(format!("inconclusive: {}", bad.join("; "))));
        }
    }
    Ok(())
}

/// Parses the process arguments, runs, and returns the exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match run_cli(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("gsdu: {e}");
            e.exit_code()
        }
    }
}
