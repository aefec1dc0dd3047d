//! Coarse-versus-fine experiments: paired solves on common random numbers,
//! intensity-norm profiles, rotation estimates and verdicts.

mod rotation;

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use rotation::{estimate_rotation, CellEstimate, RotationEstimate, RotationOptions, RotationSummary};

use crate::aggregators::{check_structure, Aggregator, Felicity};
use crate::engine::{
    intensity_norm_profile, solve_lsmc, solve_quadratic_transform, AnticipationState, BSDESolution,
    CoarseState, SignLossState, SolverConfig, StateBasis, TerminalClaim,
};
use crate::error::{invalid, Error, Result};
use crate::paths::{
    apply_anticipation, apply_sign_loss, evaluate_plan, generate_ensemble, BrownianEnsemble,
    ConsumptionPlan, FiltrationTag, PlanValues, TimeGrid,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairKind {
    SignLoss,
    Anticipation,
    Identity,
}

impl PairKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PairKind::SignLoss => "sign-loss",
            PairKind::Anticipation => "anticipation",
            PairKind::Identity => "identity",
        }
    }
}

impl fmt::Display for PairKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PairKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sign-loss" => Ok(PairKind::SignLoss),
            "anticipation" => Ok(PairKind::Anticipation),
            "identity" => Ok(PairKind::Identity),
            other => Err(invalid(format!(
                "unknown pair {other:?}; expected sign-loss, anticipation or identity"
            ))),
        }
    }
}

/// A coarse driver `W^F` and a finer one, both derived from one base ensemble.
///
/// For the anticipation pair the base is `W^F` on `[0, 2T]` and the fine
/// driver is `W^H_t = W^F_{2t}/√2`.
#[derive(Debug, Clone)]
pub struct FiltrationPair {
    kind: PairKind,
    coarse: BrownianEnsemble,
    fine: BrownianEnsemble,
}

impl FiltrationPair {
    pub fn build(kind: PairKind, horizon: f64, n_steps: usize, dims: usize, n_paths: usize, seed: u64) -> Result<Self> {
        let span = if kind == PairKind::Anticipation { 2 } else { 1 };
        let base = generate_ensemble(TimeGrid::new(horizon, n_steps, span)?, dims, n_paths, seed)?;
        Self::from_base(kind, base)
    }

    /// `base` must be a freshly generated ensemble on the grid the pair needs.
    pub fn from_base(kind: PairKind, base: BrownianEnsemble) -> Result<Self> {
        let span = base.grid().span_factor();
        match kind {
            PairKind::SignLoss | PairKind::Identity if span != 1 => {
                return Err(invalid(format!("{kind} pair needs a base grid on [0, T]")))
            }
            PairKind::Anticipation if span != 2 => {
                return Err(invalid("anticipation pair needs a base grid on [0, 2T]"))
            }
            _ => {}
        }
        let (coarse, fine) = match kind {
            PairKind::SignLoss => {
                let fine = base.with_tag(FiltrationTag::G);
                (apply_sign_loss(&fine)?, fine)
            }
            PairKind::Anticipation => {
                let coarse = base.with_tag(FiltrationTag::F);
                let fine = apply_anticipation(&coarse)?;
                (coarse, fine)
            }
            PairKind::Identity => {
                let fine = base.with_tag(FiltrationTag::G);
                (fine.clone().with_tag(FiltrationTag::F), fine)
            }
        };
        Ok(Self { kind, coarse, fine })
    }

    pub fn kind(&self) -> PairKind {
        self.kind
    }

    pub fn coarse(&self) -> &BrownianEnsemble {
        &self.coarse
    }

    pub fn fine(&self) -> &BrownianEnsemble {
        &self.fine
    }

    pub fn grid(&self) -> TimeGrid {
        self.fine.grid().restricted()
    }

    pub fn seed(&self) -> u64 {
        self.coarse.seed()
    }

    pub fn coarse_state(&self) -> CoarseState<'_> {
        CoarseState {
            coarse: &self.coarse,
        }
    }

    /// Regression state of the fine filtration; `felicity` is `v(c)` along
    /// the plan, needed by the anticipation state.
    pub fn fine_state<'a>(&'a self, felicity: Option<&PlanValues>) -> Box<dyn StateBasis + 'a> {
        match self.kind {
            PairKind::SignLoss => Box::new(SignLossState {
                fine: &self.fine,
                coarse: &self.coarse,
            }),
            PairKind::Anticipation => Box::new(AnticipationState::new(&self.coarse, felicity)),
            PairKind::Identity => Box::new(CoarseState { coarse: &self.fine }),
        }
    }
}

/// Coarse-measurable terminal claims used by the battery, all on the first
/// coordinate of `W^F`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TerminalSpec {
    Linear,
    Square,
    Exponential,
    /// `X_T` for `dX = -h̃(t, X, 1) dt + dW^F`, `X_0 = x0`.
    ForwardSde { x0: f64 },
}

impl TerminalSpec {
    pub fn label(&self) -> String {
        match self {
            TerminalSpec::Linear => "W_T".into(),
            TerminalSpec::Square => "W_T^2".into(),
            TerminalSpec::Exponential => "exp(W_T)".into(),
            TerminalSpec::ForwardSde { x0 } => format!("X_T(x0={x0})"),
        }
    }

    pub fn suite() -> Vec<Self> {
        vec![
            TerminalSpec::Linear,
            TerminalSpec::Square,
            TerminalSpec::Exponential,
            TerminalSpec::ForwardSde { x0: 0.0 },
        ]
    }

    /// Evaluates the claim on the coarse driver.
    pub fn claim(&self, agg: &Aggregator, coarse: &BrownianEnsemble) -> Result<TerminalClaim> {
        let grid = coarse.grid().restricted();
        let n = grid.n_steps();
        let w = coarse.level_column(n, 0);
        let values = match self {
            TerminalSpec::Linear => w,
            TerminalSpec::Square => w.iter().map(|x| x * x).collect(),
            TerminalSpec::Exponential => w.iter().map(|x| x.exp()).collect(),
            TerminalSpec::ForwardSde { x0 } => {
                let dt = grid.dt();
                let mut unit = vec![0.0; coarse.dims()];
                unit[0] = 1.0;
                let mut x = vec![*x0; coarse.n_paths()];
                for i in 0..n {
                    let t = grid.time(i);
                    let dw = coarse.increment_column(i, 0);
                    for (xp, d) in x.iter_mut().zip(dw) {
                        *xp += -agg.core(t, *xp, &unit) * dt + d;
                    }
                }
                x
            }
        };
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericOverflow(format!("terminal claim {} not finite", self.label())));
        }
        TerminalClaim::new(values, FiltrationTag::F)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Problem {
    Plan { plan: ConsumptionPlan },
    Terminal { claim: TerminalSpec },
}

impl Problem {
    pub fn label(&self) -> String {
        match self {
            Problem::Plan {
                plan: ConsumptionPlan::Exponential { slope },
            } => format!("plan exp({slope} W)"),
            Problem::Plan { .. } => "plan tabulated".into(),
            Problem::Terminal { claim } => format!("terminal {}", claim.label()),
        }
    }
}

/// Finite-sample surrogates for the almost-sure statements.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    /// `tol_abs = max(abs_floor, stderr_mult · stderr)`.
    pub abs_floor: f64,
    pub stderr_mult: f64,
    /// Share of path-time points that must lie within `tol_abs`.
    pub pass_fraction: f64,
    /// Relative tolerance on mean intensity norms.
    pub norm_rel: f64,
    /// Norm profiles are compared for `t ≤ norm_t_max · T`.
    pub norm_t_max: f64,
    pub rotation_defect: f64,
    /// Number of standard errors for a gap to count as resolved.
    pub significance: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            abs_floor: 0.01,
            stderr_mult: 3.0,
            pass_fraction: 0.99,
            norm_rel: 0.05,
            norm_t_max: 0.9,
            rotation_defect: 0.05,
            significance: 5.0,
        }
    }
}

impl Tolerances {
    pub fn validate(&self) -> Result<()> {
        let ok = self.abs_floor >= 0.0
            && self.stderr_mult >= 0.0
            && (0.0..=1.0).contains(&self.pass_fraction)
            && self.norm_rel >= 0.0
            && (0.0..=1.0).contains(&self.norm_t_max)
            && self.rotation_defect >= 0.0
            && self.significance > 0.0;
        if ok {
            Ok(())
        } else {
            Err(invalid(format!("inconsistent tolerances {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    NeutralConsistent,
    NonNeutral,
    Inconclusive,
}

impl Verdict {
    fn severity(self) -> u8 {
        match self {
            Verdict::NeutralConsistent => 0,
            Verdict::Inconclusive => 1,
            Verdict::NonNeutral => 2,
        }
    }
}

/// Both solutions of one experiment.
#[derive(Debug, Clone)]
pub struct PairSolution {
    pub coarse: BSDESolution,
    pub fine: BSDESolution,
}

fn solve_side(
    agg: &Aggregator,
    plan: Option<&PlanValues>,
    claim: Option<&TerminalClaim>,
    driver: &BrownianEnsemble,
    state: &dyn StateBasis,
    cfg: &SolverConfig,
) -> Result<BSDESolution> {
    if agg.is_quadratic() {
        return match plan {
            Some(c) => solve_quadratic_transform(agg, c, driver, state, cfg),
            None => Err(Error::Unsupported(
                "the exponential transform is implemented for consumption plans only".into(),
            )),
        };
    }
    solve_lsmc(agg, claim, plan, driver, state, cfg)
}

/// Solves the coarse and fine problems on the pair's common paths. The
/// coarse solve is the same call a standalone run makes.
pub fn solve_pair(agg: &Aggregator, problem: &Problem, pair: &FiltrationPair, cfg: &SolverConfig) -> Result<PairSolution> {
    match problem {
        Problem::Plan { plan } => {
            let values = evaluate_plan(plan, pair.coarse())?;
            let felicity = values.try_map(|c| agg.felicity.eval(c))?;
            let coarse = solve_side(agg, Some(&values), None, pair.coarse(), &pair.coarse_state(), cfg)?;
            let fine_state = pair.fine_state(Some(&felicity));
            let fine = solve_side(agg, Some(&values), None, pair.fine(), fine_state.as_ref(), cfg)?;
            Ok(PairSolution { coarse, fine })
        }
        Problem::Terminal { claim } => {
            if agg.felicity != Felicity::Zero {
                return Err(invalid("terminal-claim experiments need a zero felicity"));
            }
            let xi = claim.claim(agg, pair.coarse())?;
            let coarse = solve_side(agg, None, Some(&xi), pair.coarse(), &pair.coarse_state(), cfg)?;
            let fine_state = pair.fine_state(None);
            let fine = solve_side(agg, None, Some(&xi), pair.fine(), fine_state.as_ref(), cfg)?;
            Ok(PairSolution { coarse, fine })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SupGap {
    /// Mean over paths of `sup_t |Y^fine - Y^coarse|`.
    pub mean: f64,
    pub q95: f64,
    pub max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProfileRow {
    pub step: usize,
    pub t: f64,
    pub mean_gap: f64,
    pub gap_stderr: f64,
    pub within_fraction: f64,
    pub norm_coarse: Option<f64>,
    pub norm_coarse_stderr: Option<f64>,
    pub norm_fine: Option<f64>,
    pub norm_fine_stderr: Option<f64>,
    pub norm_rel_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NeutralityReport {
    pub aggregator: String,
    pub norm_dependent: bool,
    pub pair: PairKind,
    pub problem: String,
    pub n_paths: usize,
    pub n_steps: usize,
    pub seed: u64,
    pub y0_coarse: f64,
    pub y0_coarse_stderr: f64,
    pub y0_fine: f64,
    pub y0_fine_stderr: f64,
    /// `Y₀^fine - Y₀^coarse`.
    pub gap0: f64,
    /// From the paired pathwise differences.
    pub gap0_stderr: f64,
    pub tol_abs: f64,
    pub t0_consistent: bool,
    pub within_fraction: f64,
    pub sup_gap: SupGap,
    pub max_norm_rel_gap: f64,
    pub value_pass: bool,
    pub norm_pass: bool,
    pub rotation_pass: bool,
    pub rotation: RotationSummary,
    pub verdict: Verdict,
    pub tolerances: Tolerances,
    pub profile: Vec<ProfileRow>,
}

impl NeutralityReport {
    pub fn row_at(&self, t: f64) -> Option<&ProfileRow> {
        self.profile
            .iter()
            .min_by(|a, b| (a.t - t).abs().total_cmp(&(b.t - t).abs()))
    }

    /// `t, mean_gap, gap_stderr, within_fraction, norm_coarse, norm_fine, norm_rel_gap`.
    pub fn write_profile_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let fmt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        out.write_record([
            "t",
            "mean_gap",
            "gap_stderr",
            "within_fraction",
            "norm_coarse",
            "norm_fine",
            "norm_rel_gap",
        ])
        .map_err(|e| Error::Format(e.to_string()))?;
        for r in &self.profile {
            out.write_record([
                r.t.to_string(),
                r.mean_gap.to_string(),
                r.gap_stderr.to_string(),
                r.within_fraction.to_string(),
                fmt(r.norm_coarse),
                fmt(r.norm_fine),
                fmt(r.norm_rel_gap),
            ])
            .map_err(|e| Error::Format(e.to_string()))?;
        }
        out.flush()?;
        Ok(())
    }
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, var.sqrt())
}

/// Compiles the report for an already solved pair.
pub fn assess(
    agg: &Aggregator,
    problem: &Problem,
    pair: &FiltrationPair,
    sol: &PairSolution,
    rotation: &RotationEstimate,
    tol: &Tolerances,
) -> Result<NeutralityReport> {
    tol.validate()?;
    let (c, f) = (&sol.coarse, &sol.fine);
    if c.n_paths != f.n_paths || c.n_steps() != f.n_steps() || c.grid != f.grid {
        return Err(invalid("coarse and fine solutions are on different grids"));
    }
    let np = c.n_paths;
    let n = c.n_steps();
    let root_n = (np as f64).sqrt();
    let diff0: Vec<f64> = f.pathwise.iter().zip(&c.pathwise).map(|(a, b)| a - b).collect();
    let gap0_stderr = mean_sd(&diff0).1 / root_n;
    let gap0 = f.y0() - c.y0();
    let tol_abs = tol.abs_floor.max(tol.stderr_mult * gap0_stderr);

    let nc = intensity_norm_profile(c);
    let nf = intensity_norm_profile(f);
    let horizon = c.grid.horizon();
    let mut sup = vec![0.0_f64; np];
    let mut within = 0usize;
    let mut profile = Vec::with_capacity(n + 1);
    let mut norm_pass = true;
    let mut max_norm_rel_gap = 0.0_f64;
    for step in 0..=n {
        let d: Vec<f64> = f.y_at(step).iter().zip(c.y_at(step)).map(|(a, b)| a - b).collect();
        let mut inside = 0usize;
        for (s, v) in sup.iter_mut().zip(&d) {
            *s = s.max(v.abs());
            if v.abs() <= tol_abs {
                inside += 1;
            }
        }
        within += inside;
        let (m, s) = mean_sd(&d);
        let mut row = ProfileRow {
            step,
            t: c.grid.time(step),
            mean_gap: m,
            gap_stderr: s / root_n,
            within_fraction: inside as f64 / np as f64,
            norm_coarse: None,
            norm_coarse_stderr: None,
            norm_fine: None,
            norm_fine_stderr: None,
            norm_rel_gap: None,
        };
        if step < n {
            let (a, b) = (nc[step], nf[step]);
            let scale = a.mean.max(b.mean);
            let rel = if scale > 0.0 { (a.mean - b.mean).abs() / scale } else { 0.0 };
            row.norm_coarse = Some(a.mean);
            row.norm_coarse_stderr = Some(a.stderr);
            row.norm_fine = Some(b.mean);
            row.norm_fine_stderr = Some(b.stderr);
            row.norm_rel_gap = Some(rel);
            if row.t <= tol.norm_t_max * horizon + 1e-12 {
                max_norm_rel_gap = max_norm_rel_gap.max(rel);
                let noise = tol.stderr_mult * (a.stderr.powi(2) + b.stderr.powi(2)).sqrt();
                if (a.mean - b.mean).abs() > tol.norm_rel * scale + noise {
                    norm_pass = false;
                }
            }
        }
        profile.push(row);
    }
    let within_fraction = within as f64 / ((n + 1) * np) as f64;
    let mut sorted = sup.clone();
    sorted.sort_by(f64::total_cmp);
    let sup_gap = SupGap {
        mean: sup.iter().sum::<f64>() / np as f64,
        q95: sorted[((np - 1) as f64 * 0.95).round() as usize],
        max: sorted[np - 1],
    };
    let value_pass = within_fraction >= tol.pass_fraction;
    let rotation_pass = rotation.summary.max_defect < tol.rotation_defect;
    let verdict = if value_pass && norm_pass && rotation_pass {
        Verdict::NeutralConsistent
    } else if !value_pass {
        Verdict::NonNeutral
    } else {
        Verdict::Inconclusive
    };
    Ok(NeutralityReport {
        aggregator: agg.name(),
        norm_dependent: check_structure(agg).h1_h2_norm_dependence,
        pair: pair.kind(),
        problem: problem.label(),
        n_paths: np,
        n_steps: n,
        seed: pair.seed(),
        y0_coarse: c.y0(),
        y0_coarse_stderr: c.y0_stderr(),
        y0_fine: f.y0(),
        y0_fine_stderr: f.y0_stderr(),
        gap0,
        gap0_stderr,
        tol_abs,
        t0_consistent: gap0.abs() <= tol_abs,
        within_fraction,
        sup_gap,
        max_norm_rel_gap,
        value_pass,
        norm_pass,
        rotation_pass,
        rotation: rotation.summary.clone(),
        verdict,
        tolerances: *tol,
        profile,
    })
}

/// Solves both sides on common paths and renders a verdict.
///
/// `neutral-consistent` requires paired values within `tol_abs` at the
/// required share of path-time points, mean intensity norms within
/// tolerance, and a rotation defect below tolerance. Values failing the
/// share give `non-neutral`; agreement in values with a failing norm or
/// rotation check gives `inconclusive`.
pub fn run_neutrality_experiment(
    agg: &Aggregator,
    problem: &Problem,
    pair: &FiltrationPair,
    cfg: &SolverConfig,
    tol: &Tolerances,
) -> Result<NeutralityReport> {
    let sol = solve_pair(agg, problem, pair, cfg)?;
    let rot = estimate_rotation(pair, RotationOptions::default())?;
    assess(agg, problem, pair, &sol, &rot, tol)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivalenceRow {
    pub aggregator: String,
    pub pair: PairKind,
    pub rotation_defect: f64,
    pub defect_small: bool,
    pub verdict: Verdict,
    /// `defect_small ⟺ verdict == neutral-consistent`.
    pub consistent: bool,
}

/// The rotation condition against the neutrality verdict, pair by pair.
pub fn verify_theorem_equivalence(
    agg: &Aggregator,
    problem: &Problem,
    pairs: &[FiltrationPair],
    cfg: &SolverConfig,
    tol: &Tolerances,
) -> Result<Vec<EquivalenceRow>> {
    if !check_structure(agg).h1_h2_norm_dependence {
        return Err(Error::Unsupported(format!(
            "{} does not depend on z through its norm; the equivalence does not apply",
            agg.name()
        )));
    }
    pairs
        .iter()
        .map(|pair| Ok(equivalence_row(&run_neutrality_experiment(agg, problem, pair, cfg, tol)?)))
        .collect()
}

/// Reads the rotation condition and the verdict off one report.
pub fn equivalence_row(rep: &NeutralityReport) -> EquivalenceRow {
    let defect_small = rep.rotation_pass;
    EquivalenceRow {
        aggregator: rep.aggregator.clone(),
        pair: rep.pair,
        rotation_defect: rep.rotation.max_defect,
        defect_small,
        verdict: rep.verdict,
        consistent: defect_small == (rep.verdict == Verdict::NeutralConsistent),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatteryReport {
    pub aggregator: String,
    pub pair: PairKind,
    pub claims: Vec<(String, NeutralityReport)>,
    pub worst: Verdict,
}

/// Runs [`run_neutrality_experiment`] over [`TerminalSpec::suite`].
pub fn theorem1_terminal_battery(
    agg: &Aggregator,
    pair: &FiltrationPair,
    cfg: &SolverConfig,
    tol: &Tolerances,
) -> Result<BatteryReport> {
    if agg.felicity != Felicity::Zero {
        return Err(invalid("the terminal battery needs a zero felicity"));
    }
    if !check_structure(agg).h1_h2_norm_dependence {
        return Err(Error::Unsupported(format!(
            "{} does not depend on z through its norm",
            agg.name()
        )));
    }
    let rot = estimate_rotation(pair, RotationOptions::default())?;
    let mut claims = Vec::new();
    let mut worst = Verdict::NeutralConsistent;
    for spec in TerminalSpec::suite() {
        let problem = Problem::Terminal { claim: spec };
        let sol = solve_pair(agg, &problem, pair, cfg)?;
        let rep = assess(agg, &problem, pair, &sol, &rot, tol)?;
        if rep.verdict.severity() > worst.severity() {
            worst = rep.verdict;
        }
        claims.push((spec.label(), rep));
    }
    Ok(BatteryReport {
        aggregator: agg.name(),
        pair: pair.kind(),
        claims,
        worst,
    })
}
