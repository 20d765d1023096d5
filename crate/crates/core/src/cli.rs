//! Configuration-driven scenario runner.
//!
//! A config is one JSON object:
//!
//! ```json
//! { "scenario": "master-poisson-common", "seed": 7, "out_dir": "out", "params": { ... } }
//! ```
//!
//! `params` is merged key by key over the scenario defaults (a key given in
//! the config replaces the whole default value for that key) and then
//! checked against the scenario's schema; unknown keys are rejected. The
//! resolved parameters are echoed into `summary.json`.
//!
//! Exit codes: 0 success, 2 invalid configuration, 3 solver failure.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::characteristics::{
    compare_characteristics_to_grid, estimate_value_mc_with, simulate_abm, DiscountForm, JumpCharOptions,
    JumpOrientation,
};
use crate::error::Error;
use crate::fields::{wasserstein1_periodic, Grid, ScalarField1D, ValueField};
use crate::linalg::{mat_from_rows, op_norm, Mat};
use crate::master_eq::{
    solve_asymptotic_with, solve_master_with, AffineJump, AsymptoticOrder, Coupling, NoiseSpec, SecondOrderForm,
    SolveOptions, Trajectory,
};
use crate::mfg_pde::{
    conserved_momentum, effective_diffusion, lambda_sweep, semiconcavity_check, solve_fp_higher_order,
    solve_fp_limit, solve_mfg_discounted, solve_relative_cost_limit, solve_strong_coupling, uniqueness_threshold,
    HamiltonianSpec, InitialGuess, MfgProblem, MfgSolution1D, PicardOptions, ScanRange, StrongCouplingParams,
    Terminal,
};
use crate::monotonicity::{
    default_tolerance, field_lipschitz, lipschitz_beta, lipschitz_bound, measured_lipschitz, verify_propagation,
    BudgetInputs, PairStrategy,
};
use crate::rng::XorShift64Star;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;

/// Name and one-line description of every scenario.
pub const SCENARIOS: &[(&str, &str)] = &[
    ("master-noiseless", "master equation without noise"),
    ("master-jump-deterministic", "master equation with one common jump at a fixed time"),
    ("master-poisson-common", "master equation with common Poisson jumps"),
    ("master-poisson-iid", "master equation with independent Poisson jumps per player"),
    ("master-mixture", "master equation with common jumps drawn from a finite family"),
    ("asymptotic-limit", "frequent small common jumps against the limiting first- or second-order equation"),
    ("characteristics-compare", "forward-backward characteristics against the grid solution"),
    ("mc-value", "Monte Carlo value along jump characteristics against the grid value"),
    ("abm-path", "agent-based forward path with Poisson jumps"),
    ("monotonicity-report", "minimum monotonicity pairing of U(t) at every output time"),
    ("lipschitz-report", "measured Lipschitz constant of U(t) against the monotone budget"),
    ("conserved-momentum", "drift of int u_x m for a one-dimensional MFG"),
    ("strong-coupling-roots", "fixed points of the mean-control map"),
    ("uniqueness-threshold", "mean-control strength below which the fixed point is unique"),
    ("mfg-lambda-sweep", "discounted MFG against the no-anticipation limit over a list of discounts"),
    ("relative-cost", "limit of the relative-running-cost system"),
    ("higher-order-fp", "first-order corrected Fokker-Planck equation for a large discount"),
];

pub fn scenario_names() -> Vec<&'static str> {
    SCENARIOS.iter().map(|(n, _)| *n).collect()
}

pub fn list_scenarios() -> String {
    let width = SCENARIOS.iter().map(|(n, _)| n.len()).max().unwrap_or(0);
    SCENARIOS.iter().map(|(n, d)| format!("{n:width$}  {d}\n")).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub params: Map<String, Value>,
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self, String> {
        serde_json::from_str(text).map_err(|e| format!("config: {e}"))
    }

    pub fn from_file(path: &Path) -> Result<Self, String> {
        let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_json(&text)
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub code: i32,
    pub out_dir: Option<PathBuf>,
    pub message: Option<String>,
}

#[derive(Debug)]
enum Failure {
    Invalid(String),
    Solver(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidParameter(_)
            | Error::DimensionMismatch { .. }
            | Error::GridMismatch
            | Error::DegenerateAxis { .. }
            | Error::Certificate(_) => Failure::Invalid(e.to_string()),
            _ => Failure::Solver(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Solver(format!("io: {e}"))
    }
}

type Run<T> = std::result::Result<T, Failure>;

fn invalid<T>(msg: impl Into<String>) -> Run<T> {
    Err(Failure::Invalid(msg.into()))
}

fn require(cond: bool, msg: impl FnOnce() -> String) -> Run<()> {
    if cond {
        Ok(())
    } else {
        Err(Failure::Invalid(msg()))
    }
}

fn positive(name: &str, v: f64) -> Run<()> {
    require(v > 0.0 && v.is_finite(), || format!("{name} must be > 0, got {v}"))
}

fn nonneg(name: &str, v: f64) -> Run<()> {
    require(v >= 0.0 && v.is_finite(), || format!("{name} must be >= 0, got {v}"))
}

// ---------------------------------------------------------------------------
// parameter schemas

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BoxSpec {
    lower: Vec<f64>,
    upper: Vec<f64>,
    nodes: Vec<usize>,
}

impl BoxSpec {
    fn build(&self) -> Run<Grid> {
        Ok(Grid::new(&self.lower, &self.upper, &self.nodes)?)
    }
}

/// `G = A x + B u + g0`, `F = C x + D u + f0`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LinearSpec {
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
    d: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    g0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    f0: Option<Vec<f64>>,
}

impl LinearSpec {
    fn build(&self) -> Run<Coupling> {
        let dim = self.a.len();
        let g0 = self.g0.clone().unwrap_or_else(|| vec![0.0; dim]);
        let f0 = self.f0.clone().unwrap_or_else(|| vec![0.0; dim]);
        Ok(Coupling::linear_block_with_offsets(
            mat_from_rows(&self.a)?,
            mat_from_rows(&self.b)?,
            mat_from_rows(&self.c)?,
            mat_from_rows(&self.d)?,
            g0,
            f0,
        )?)
    }
}

/// `U0(x) = M (x - center) + offset + cubic (x - center)^3` componentwise.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct U0Spec {
    m: Vec<Vec<f64>>,
    center: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    offset: Option<Vec<f64>>,
    #[serde(default)]
    cubic: f64,
}

impl U0Spec {
    fn eval(&self, x: &[f64]) -> Vec<f64> {
        let d = x.len();
        let z: Vec<f64> = (0..d).map(|j| x[j] - self.center[j]).collect();
        (0..d)
            .map(|i| {
                let lin: f64 = (0..d).map(|j| self.m[i][j] * z[j]).sum();
                lin + self.offset.as_ref().map_or(0.0, |o| o[i]) + self.cubic * z[i].powi(3)
            })
            .collect()
    }

    fn build(&self, grid: &Grid) -> Run<ValueField> {
        let d = grid.dim();
        require(
            self.m.len() == d && self.m.iter().all(|r| r.len() == d) && self.center.len() == d,
            || format!("u0 must be {d}-dimensional"),
        )?;
        if let Some(o) = &self.offset {
            require(o.len() == d, || format!("u0.offset must have length {d}"))?;
        }
        require(self.cubic.is_finite(), || "u0.cubic must be finite".into())?;
        Ok(ValueField::from_fn(grid, |x| self.eval(x))?)
    }
}

/// `T(x) = S x + e`, or `T(x) = center + S (x - center)` when `center` is
/// given.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JumpSpec {
    s: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    e: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    center: Option<Vec<f64>>,
}

impl JumpSpec {
    fn build(&self) -> Run<AffineJump> {
        let s = mat_from_rows(&self.s)?;
        match (&self.e, &self.center) {
            (Some(_), Some(_)) => invalid("jump: give either e or center, not both"),
            (_, Some(c)) => Ok(AffineJump::about(s, c)?),
            (e, None) => {
                let e = e.clone().unwrap_or_else(|| vec![0.0; s.nrows()]);
                Ok(AffineJump::new(s, e)?)
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AtomSpec {
    jump: JumpSpec,
    weight: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum NoiseConfig {
    None,
    DeterministicJump { t1: f64, jump: JumpSpec },
    CommonPoisson { rate: f64, jump: JumpSpec },
    IidPoisson { rate: f64, jump: JumpSpec },
    Mixture { rate: f64, atoms: Vec<AtomSpec> },
}

impl NoiseConfig {
    fn kind(&self) -> &'static str {
        match self {
            NoiseConfig::None => "none",
            NoiseConfig::DeterministicJump { .. } => "deterministic_jump",
            NoiseConfig::CommonPoisson { .. } => "common_poisson",
            NoiseConfig::IidPoisson { .. } => "iid_poisson",
            NoiseConfig::Mixture { .. } => "mixture",
        }
    }

    fn build(&self) -> Run<NoiseSpec> {
        let spec = match self {
            NoiseConfig::None => NoiseSpec::None,
            NoiseConfig::DeterministicJump { t1, jump } => NoiseSpec::DeterministicJump { t1: *t1, jump: jump.build()? },
            NoiseConfig::CommonPoisson { rate, jump } => NoiseSpec::CommonPoisson { rate: *rate, jump: jump.build()? },
            NoiseConfig::IidPoisson { rate, jump } => NoiseSpec::IidPoisson { rate: *rate, jump: jump.build()? },
            NoiseConfig::Mixture { rate, atoms } => {
                let atoms = atoms.iter().map(|a| Ok((a.jump.build()?, a.weight))).collect::<Run<Vec<_>>>()?;
                NoiseSpec::Mixture { rate: *rate, atoms }
            }
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Rate and largest jump norm, for the Lipschitz budget.
    fn rate_and_norm(&self) -> Run<(f64, f64)> {
        Ok(match self {
            NoiseConfig::None | NoiseConfig::DeterministicJump { .. } => (0.0, 0.0),
            NoiseConfig::CommonPoisson { rate, jump } | NoiseConfig::IidPoisson { rate, jump } => {
                (*rate, op_norm(&mat_from_rows(&jump.s)?))
            }
            NoiseConfig::Mixture { rate, atoms } => {
                let mut worst: f64 = 0.0;
                for a in atoms {
                    worst = worst.max(op_norm(&mat_from_rows(&a.jump.s)?));
                }
                (*rate, worst)
            }
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MasterModel {
    grid: BoxSpec,
    coupling: LinearSpec,
    u0: U0Spec,
    noise: NoiseConfig,
    t_f: f64,
    dt: f64,
    discount: f64,
    max_outputs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    blowup_cap: Option<f64>,
}

struct BuiltMaster {
    grid: Grid,
    coupling: Coupling,
    u0: ValueField,
    noise: NoiseSpec,
    opts: SolveOptions,
}

impl MasterModel {
    fn build(&self) -> Run<BuiltMaster> {
        positive("t_f", self.t_f)?;
        positive("dt", self.dt)?;
        nonneg("discount", self.discount)?;
        require(self.max_outputs > 0, || "max_outputs must be > 0".into())?;
        if let Some(cap) = self.blowup_cap {
            positive("blowup_cap", cap)?;
        }
        let grid = self.grid.build()?;
        let coupling = self.coupling.build()?;
        require(coupling.dim() == grid.dim(), || {
            format!("coupling has dimension {}, grid has {}", coupling.dim(), grid.dim())
        })?;
        let u0 = self.u0.build(&grid)?;
        let noise = self.noise.build()?;
        let opts = SolveOptions { blowup_cap: self.blowup_cap, max_outputs: self.max_outputs, ..SolveOptions::default() };
        Ok(BuiltMaster { grid, coupling, u0, noise, opts })
    }
}

impl BuiltMaster {
    fn solve(&self, m: &MasterModel) -> Run<Trajectory> {
        Ok(solve_master_with(&self.u0, &self.coupling, &self.noise, m.t_f, m.dt, m.discount, &self.opts)?)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FourierTerm {
    k: u32,
    cos: f64,
    sin: f64,
}

/// `constant + sum_k (cos_k cos(2 pi k x) + sin_k sin(2 pi k x))`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FourierSpec {
    constant: f64,
    terms: Vec<FourierTerm>,
}

impl FourierSpec {
    fn eval(&self, x: f64) -> f64 {
        let tau = 2.0 * std::f64::consts::PI;
        self.constant
            + self
                .terms
                .iter()
                .map(|t| t.cos * (tau * t.k as f64 * x).cos() + t.sin * (tau * t.k as f64 * x).sin())
                .sum::<f64>()
    }

    fn build(&self, n: usize) -> Run<ScalarField1D> {
        Ok(ScalarField1D::from_fn(n, |x| self.eval(x))?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum DensityConfig {
    Uniform,
    /// Periodic Gaussian bump plus a constant floor, normalised.
    Bump { center: f64, width: f64, floor: f64 },
}

impl DensityConfig {
    fn build(&self, n: usize) -> Run<ScalarField1D> {
        match self {
            DensityConfig::Uniform => Ok(ScalarField1D::uniform(n)?),
            DensityConfig::Bump { center, width, floor } => {
                positive("m0.width", *width)?;
                nonneg("m0.floor", *floor)?;
                let (c, w, fl) = (*center, *width, *floor);
                Ok(ScalarField1D::density_from_fn(n, |x| {
                    let d = (x - c + 0.5).rem_euclid(1.0) - 0.5;
                    (-(d * d) / (2.0 * w * w)).exp() + fl
                })?)
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum HamConfig {
    /// `H = p^2 / 2 - coupling m`.
    Kinetic { coupling: f64 },
    /// `H = b_amp sin(2 pi (x + b_phase)) p + delta p^2`.
    Quadratic { b_amp: f64, b_phase: f64, delta: f64 },
}

impl HamConfig {
    fn build(&self) -> Run<HamiltonianSpec> {
        match *self {
            HamConfig::Kinetic { coupling } => {
                require(coupling.is_finite(), || "hamiltonian.coupling must be finite".into())?;
                Ok(HamiltonianSpec::kinetic(
                    std::sync::Arc::new(move |m| coupling * m),
                    std::sync::Arc::new(move |_| coupling),
                ))
            }
            HamConfig::Quadratic { b_amp, b_phase, delta } => {
                require(b_amp.is_finite() && b_phase.is_finite(), || "hamiltonian.b_amp and b_phase must be finite".into())?;
                let tau = 2.0 * std::f64::consts::PI;
                Ok(HamiltonianSpec::quadratic(
                    std::sync::Arc::new(move |_, x, _| b_amp * (tau * (x + b_phase)).sin()),
                    delta,
                )?)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum InitialConfig {
    HeatSmoothed,
    Uniform,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PicardConfig {
    max_iter: usize,
    damping: f64,
    tol: f64,
    initial: InitialConfig,
}

impl PicardConfig {
    fn build(&self) -> Run<PicardOptions> {
        require(self.max_iter > 0, || "picard.max_iter must be > 0".into())?;
        require(self.damping > 0.0 && self.damping <= 1.0, || format!("picard.damping must lie in (0, 1], got {}", self.damping))?;
        positive("picard.tol", self.tol)?;
        Ok(PicardOptions {
            max_iter: self.max_iter,
            damping: self.damping,
            tol: self.tol,
            initial: match self.initial {
                InitialConfig::HeatSmoothed => InitialGuess::HeatSmoothed,
                InitialConfig::Uniform => InitialGuess::Uniform,
            },
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Mfg1dModel {
    n: usize,
    nu: f64,
    horizon: f64,
    dt: f64,
    hamiltonian: HamConfig,
    phi: FourierSpec,
    m0: DensityConfig,
    lambda_disc: f64,
    picard: PicardConfig,
}

impl Mfg1dModel {
    fn build(&self) -> Run<(MfgProblem, PicardOptions)> {
        require(self.n >= 3, || format!("n must be >= 3, got {}", self.n))?;
        nonneg("nu", self.nu)?;
        positive("horizon", self.horizon)?;
        positive("dt", self.dt)?;
        nonneg("lambda_disc", self.lambda_disc)?;
        let problem = MfgProblem {
            ham: self.hamiltonian.build()?,
            lambda_disc: self.lambda_disc,
            psi: None,
            nu: self.nu,
            horizon: self.horizon,
            m0: self.m0.build(self.n)?,
            terminal: Terminal::Fixed(self.phi.build(self.n)?),
            dt: self.dt,
        };
        Ok((problem, self.picard.build()?))
    }
}

// scenario-level schemas

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AsymptoticParams {
    grid: BoxSpec,
    coupling: LinearSpec,
    u0: U0Spec,
    s: Vec<Vec<f64>>,
    eps: Vec<f64>,
    order: String,
    second_order_form: String,
    t_f: f64,
    dt: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CharCompareParams {
    model: MasterModel,
    /// Seed points; drawn from the middle half of the box when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    points: Option<Vec<Vec<f64>>>,
    n_points: usize,
    char_dt: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct McParams {
    model: MasterModel,
    x0: Vec<f64>,
    t: f64,
    n_paths: usize,
    char_dt: f64,
    orientation: String,
    discount_form: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AbmParams {
    coupling: LinearSpec,
    jump: JumpSpec,
    rate: f64,
    x0: Vec<f64>,
    t_f: f64,
    dt: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MonoParams {
    model: MasterModel,
    /// Defaults to `10 (h + dt) diam^2`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tol: Option<f64>,
    /// Random pair count; all pairs up to 41^2 nodes when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    random_pairs: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LipParams {
    model: MasterModel,
    /// Monotonicity modulus; defaults to the certified modulus of the coupling.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
    /// Defaults to the measured Lipschitz constant of `U0`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lip_u0: Option<f64>,
    slack: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MomentumParams {
    model: Mfg1dModel,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScanConfig {
    a_min: f64,
    a_max: f64,
    n_scan: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StrongParams {
    n: usize,
    nu: f64,
    horizon: f64,
    dt: f64,
    phi: FourierSpec,
    m0: DensityConfig,
    lambda_ctrl: f64,
    scan: ScanConfig,
    refine: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    c: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ThresholdParams {
    c: f64,
    horizon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lambda_ctrl: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepParams {
    model: Mfg1dModel,
    lambdas: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RelativeParams {
    model: Mfg1dModel,
    /// `psi(m) = psi_coef m`.
    psi_coef: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HigherParams {
    model: Mfg1dModel,
}

// ---------------------------------------------------------------------------
// defaults

fn eye(d: usize, s: f64) -> Value {
    let rows: Vec<Vec<f64>> = (0..d).map(|i| (0..d).map(|j| if i == j { s } else { 0.0 }).collect()).collect();
    json!(rows)
}

fn default_master(noise: Value) -> Value {
    json!({
        "grid": { "lower": [0.0, 0.0], "upper": [4.0, 4.0], "nodes": [41, 41] },
        "coupling": { "a": eye(2, 0.0), "b": eye(2, 0.0), "c": eye(2, 0.0), "d": eye(2, 1.0) },
        "u0": { "m": eye(2, 0.5), "center": [2.0, 2.0], "cubic": 0.0 },
        "noise": noise,
        "t_f": 1.0,
        "dt": 0.0125,
        "discount": 0.0,
        "max_outputs": 200,
    })
}

fn contraction() -> Value {
    json!({ "s": eye(2, 0.8), "center": [2.0, 2.0] })
}

fn default_noise(kind: &str) -> Value {
    match kind {
        "deterministic_jump" => json!({ "kind": kind, "t1": 0.5, "jump": contraction() }),
        "common_poisson" | "iid_poisson" => json!({ "kind": kind, "rate": 2.0, "jump": contraction() }),
        "mixture" => json!({
            "kind": kind,
            "rate": 2.0,
            "atoms": [
                { "jump": contraction(), "weight": 0.5 },
                { "jump": { "s": [[0.0, 1.0], [1.0, 0.0]], "center": [2.0, 2.0] }, "weight": 0.5 },
            ],
        }),
        _ => json!({ "kind": "none" }),
    }
}

fn default_mfg1d(ham: Value, phi: Value, lambda_disc: f64) -> Value {
    json!({
        "n": 64,
        "nu": 0.05,
        "horizon": 1.0,
        "dt": 0.001,
        "hamiltonian": ham,
        "phi": phi,
        "m0": { "kind": "bump", "center": 0.3, "width": 0.08, "floor": 0.05 },
        "lambda_disc": lambda_disc,
        "picard": { "max_iter": 200, "damping": 0.5, "tol": 1e-7, "initial": "heat_smoothed" },
    })
}

fn zero_phi() -> Value {
    json!({ "constant": 0.0, "terms": [] })
}

fn wave_phi() -> Value {
    json!({ "constant": 0.0, "terms": [{ "k": 1, "cos": 0.2, "sin": 0.1 }] })
}

fn kinetic(coupling: f64) -> Value {
    json!({ "kind": "kinetic", "coupling": coupling })
}

fn defaults(scenario: &str) -> Value {
    match scenario {
        "master-noiseless" => default_master(default_noise("none")),
        "master-jump-deterministic" => default_master(default_noise("deterministic_jump")),
        "master-poisson-common" => default_master(default_noise("common_poisson")),
        "master-poisson-iid" => default_master(default_noise("iid_poisson")),
        "master-mixture" => default_master(default_noise("mixture")),
        "asymptotic-limit" => json!({
            "grid": { "lower": [-1.0, -1.0], "upper": [1.0, 1.0], "nodes": [41, 41] },
            "coupling": { "a": eye(2, 0.5), "b": eye(2, 0.0), "c": eye(2, 0.0), "d": eye(2, 0.0) },
            "u0": { "m": eye(2, 1.0), "center": [0.0, 0.0], "cubic": 0.1 },
            "s": [[-0.15, 0.05], [-0.05, -0.15]],
            "eps": [0.2, 0.1, 0.05],
            "order": "first",
            "second_order_form": "displayed",
            "t_f": 1.0,
            "dt": 0.01,
        }),
        "characteristics-compare" => {
            let mut model = default_master(default_noise("none"));
            model["coupling"] = json!({
                "a": eye(2, 0.2), "b": eye(2, 0.0), "c": eye(2, 0.0), "d": eye(2, 0.5),
                "g0": [-0.4, -0.4],
            });
            model["u0"] = json!({ "m": eye(2, 0.5), "center": [2.0, 2.0], "cubic": 0.05 });
            json!({ "model": model, "n_points": 10, "char_dt": 0.00125 })
        }
        "mc-value" => {
            let mut model = default_master(json!({
                "kind": "common_poisson",
                "rate": 2.0,
                "jump": { "s": [[0.6928203230275509, -0.4], [0.4, 0.6928203230275509]], "center": [2.0, 2.0] },
            }));
            model["coupling"] = json!({
                "a": eye(2, 0.2), "b": eye(2, 0.0), "c": eye(2, 0.0), "d": eye(2, 0.5),
                "g0": [-0.4, -0.4],
            });
            model["discount"] = json!(0.3);
            json!({
                "model": model,
                "x0": [2.5, 2.3],
                "t": 1.0,
                "n_paths": 10000,
                "char_dt": 0.0125,
                "orientation": "forward",
                "discount_form": "decay",
            })
        }
        "abm-path" => json!({
            "coupling": { "a": eye(2, 1.0), "b": eye(2, 0.0), "c": [[-0.5, 0.0], [0.0, -0.5]], "d": eye(2, 1.0) },
            "jump": contraction(),
            "rate": 2.0,
            "x0": [3.0, 1.0],
            "t_f": 2.0,
            "dt": 0.01,
        }),
        "monotonicity-report" => json!({ "model": default_master(default_noise("common_poisson")) }),
        "lipschitz-report" => {
            let mut model = default_master(default_noise("common_poisson"));
            model["coupling"] = json!({
                "a": eye(2, 0.5), "b": eye(2, 0.0), "c": eye(2, 0.0), "d": eye(2, 1.0),
                "g0": [-1.0, -1.0],
            });
            json!({ "model": model, "slack": 0.1 })
        }
        "conserved-momentum" => json!({ "model": default_mfg1d(kinetic(0.5), wave_phi(), 0.0) }),
        "strong-coupling-roots" => json!({
            "n": 128,
            "nu": 0.05,
            "horizon": 1.0,
            "dt": 0.001,
            "phi": { "constant": 0.0, "terms": [{ "k": 1, "cos": 0.022797266319920407, "sin": 0.0 }] },
            "m0": { "kind": "bump", "center": 0.25, "width": 0.05, "floor": 0.0 },
            "lambda_ctrl": 1.5,
            "scan": { "a_min": -5.0, "a_max": 5.0, "n_scan": 2001 },
            "refine": 10,
            "c": 1.0,
        }),
        "uniqueness-threshold" => json!({ "c": 1.0, "horizon": 1.0 }),
        "mfg-lambda-sweep" => json!({
            "model": default_mfg1d(kinetic(1.0), zero_phi(), 0.0),
            "lambdas": [4.0, 8.0, 16.0, 32.0, 64.0],
        }),
        "relative-cost" => {
            let mut model = default_mfg1d(kinetic(0.0), zero_phi(), 64.0);
            model["dt"] = json!(0.0002);
            json!({ "model": model, "psi_coef": 0.1 })
        }
        "higher-order-fp" => json!({ "model": default_mfg1d(kinetic(1.0), zero_phi(), 64.0) }),
        _ => json!({}),
    }
}

fn merged<T: DeserializeOwned>(scenario: &str, given: &Map<String, Value>) -> Run<T> {
    let mut base = match defaults(scenario) {
        Value::Object(m) => m,
        _ => Map::new(),
    };
    for (k, v) in given {
        base.insert(k.clone(), v.clone());
    }
    serde_json::from_value(Value::Object(base)).map_err(|e| Failure::Invalid(format!("params: {e}")))
}

// ---------------------------------------------------------------------------
// output

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

struct Csv {
    w: BufWriter<fs::File>,
}

impl Csv {
    fn create(dir: &Path, name: &str, header: &[&str]) -> Run<Self> {
        let mut w = BufWriter::new(fs::File::create(dir.join(name))?);
        writeln!(w, "{}", header.join(","))?;
        Ok(Self { w })
    }

    fn row(&mut self, cells: &[String]) -> Run<()> {
        writeln!(self.w, "{}", cells.join(","))?;
        Ok(())
    }

    fn finish(mut self) -> Run<()> {
        self.w.flush()?;
        Ok(())
    }
}

fn write_master_trajectory(dir: &Path, traj: &Trajectory) -> Run<()> {
    let grid = traj.grid();
    let d = grid.dim();
    let mut header = vec!["time".to_string(), "node".to_string()];
    header.extend((0..d).map(|a| format!("x_{a}")));
    header.extend(["component".to_string(), "value".to_string()]);
    let header: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let mut csv = Csv::create(dir, "trajectory.csv", &header)?;
    let coords = grid.coords();
    for (t, field) in traj.times.iter().zip(&traj.fields) {
        for (node, x) in coords.iter().enumerate() {
            let u = field.at(node);
            for (i, ui) in u.iter().enumerate() {
                let mut cells = vec![num(*t), node.to_string()];
                cells.extend(x.iter().map(|v| num(*v)));
                cells.push(format!("U_{i}"));
                cells.push(num(*ui));
                csv.row(&cells)?;
            }
        }
    }
    csv.finish()
}

fn write_1d_trajectory(dir: &Path, times: &[f64], series: &[(&str, &[ScalarField1D])]) -> Run<()> {
    let mut csv = Csv::create(dir, "trajectory.csv", &["time", "node", "x", "component", "value"])?;
    for (k, t) in times.iter().enumerate() {
        for (name, fields) in series {
            let f = &fields[k];
            for i in 0..f.len() {
                csv.row(&[num(*t), i.to_string(), num(f.x(i)), name.to_string(), num(f.values()[i])])?;
            }
        }
    }
    csv.finish()
}

fn scheme_json(traj: &Trajectory) -> Value {
    let m = &traj.meta;
    json!({
        "dt": m.dt,
        "dt_used": m.dt_used,
        "h": m.h,
        "cfl_max": m.cfl_max,
        "steps": m.steps,
        "blowup_cap": m.blowup_cap,
        "outputs": traj.times.len(),
    })
}

/// Summary fields collected while a scenario runs.
#[derive(Default)]
struct Report {
    fields: BTreeMap<String, Value>,
}

impl Report {
    fn set(&mut self, key: &str, v: Value) {
        self.fields.insert(key.to_string(), v);
    }
}

/// JSON number, or the strings `"inf"`, `"-inf"`, `"nan"`.
fn jnum(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else if v.is_nan() {
        json!("nan")
    } else if v > 0.0 {
        json!("inf")
    } else {
        json!("-inf")
    }
}

// ---------------------------------------------------------------------------
// scenarios

struct Ctx<'a> {
    dir: &'a Path,
    seed: u64,
    report: Report,
    params: Value,
}

fn echo<T: Serialize>(ctx: &mut Ctx, p: &T) {
    ctx.params = serde_json::to_value(p).unwrap_or(Value::Null);
}

fn run_master_family(ctx: &mut Ctx, scenario: &str, given: &Map<String, Value>) -> Run<()> {
    let model: MasterModel = merged(scenario, given)?;
    echo(ctx, &model);
    let expected = match scenario {
        "master-noiseless" => "none",
        "master-jump-deterministic" => "deterministic_jump",
        "master-poisson-common" => "common_poisson",
        "master-poisson-iid" => "iid_poisson",
        _ => "mixture",
    };
    require(model.noise.kind() == expected, || {
        format!("scenario {scenario} needs noise kind {expected}, got {}", model.noise.kind())
    })?;
    let built = model.build()?;
    let traj = built.solve(&model)?;
    write_master_trajectory(ctx.dir, &traj)?;
    let r = &mut ctx.report;
    r.set("scheme", scheme_json(&traj));
    r.set("noise", json!(built.noise.name()));
    r.set("certified_monotone", json!(built.coupling.is_certified_monotone()));
    r.set("sup_norm_initial", json!(built.u0.sup_norm()));
    r.set("sup_norm_final", json!(traj.last().sup_norm()));
    r.set("max_change_from_initial", json!(traj.fields.iter().map(|f| f.max_abs_diff(&built.u0).unwrap_or(f64::NAN)).fold(0.0, f64::max)));
    r.set("grid_nodes", json!(built.grid.len()));
    Ok(())
}

fn run_asymptotic(ctx: &mut Ctx, given: &Map<String, Value>) -> Run<()> {
    let p: AsymptoticParams = merged("asymptotic-limit", given)?;
    echo(ctx, &p);
    positive("t_f", p.t_f)?;
    positive("dt", p.dt)?;
    require(!p.eps.is_empty(), || "eps must be non-empty".into())?;
    for e in &p.eps {
        positive("eps", *e)?;
    }
    let order = match p.order.as_str() {
        "first" => AsymptoticOrder::First,
        "second" => AsymptoticOrder::Second,
        o => return invalid(format!("order must be first or second, got {o}")),
    };
    let form = match p.second_order_form.as_str() {
        "displayed" => SecondOrderForm::Displayed,
        "derived" => SecondOrderForm::Derived,
        o => return invalid(format!("second_order_form must be displayed or derived, got {o}")),
    };
    let grid = p.grid.build()?;
    let coupling = p.coupling.build()?;
    require(coupling.dim() == grid.dim(), || "coupling and grid dimensions differ".into())?;
    let u0 = p.u0.build(&grid)?;
    let s = mat_from_rows(&p.s)?;
    require(s.nrows() == grid.dim(), || "s must match the grid dimension".into())?;
    let opts = SolveOptions { second_order_form: form, ..SolveOptions::default() };
    let limit = solve_asymptotic_with(&u0, &coupling, &s, order, p.t_f, p.dt, &opts)?;
    let mut gaps = Vec::new();
    for &eps in &p.eps {
        let jump = match order {
            AsymptoticOrder::First => {
                let t = Mat::identity(grid.dim(), grid.dim()) + &s * eps;
                NoiseSpec::CommonPoisson { rate: 1.0 / eps, jump: AffineJump::new(t, vec![0.0; grid.dim()])? }
            }
            AsymptoticOrder::Second => {
                let id = Mat::identity(grid.dim(), grid.dim());
                NoiseSpec::mixture(
                    1.0 / (eps * eps),
                    vec![
                        (AffineJump::new(&id + &s * eps, vec![0.0; grid.dim()])?, 0.5),
                        (AffineJump::new(&id - &s * eps, vec![0.0; grid.dim()])?, 0.5),
                    ],
                )?
            }
        };
        let traj = solve_master_with(&u0, &coupling, &jump, p.t_f, p.dt, 0.0, &SolveOptions::default())?;
        gaps.push(traj.last().max_abs_diff(limit.last())?);
    }
    write_master_trajectory(ctx.dir, &limit)?;
    let mut csv = Csv::create(ctx.dir, "asymptotic.csv", &["eps", "terminal_sup_gap"])?;
    for (e, g) in p.eps.iter().zip(&gaps) {
        csv.row(&[num(*e), num(*g)])?;
    }
    csv.finish()?;
    let ratios: Vec<f64> = gaps.windows(2).map(|w| w[0] / w[1]).collect();
    let r = &mut ctx.report;
    r.set("scheme", scheme_json(&limit));
    r.set("gaps", json!(gaps));
    r.set("ratios", json!(ratios));
    r.set("decreasing", json!(gaps.windows(2).all(|w| w[1] < w[0])));
    Ok(())
}

fn default_points(grid: &Grid, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = XorShift64Star::new(seed);
    (0..n)
        .map(|_| {
            (0..grid.dim())
                .map(|a| {
                    let (lo, hi) = (grid.lower()[a], grid.upper()[a]);
                    lo + (hi - lo) * (0.25 + 0.5 * rng.next_f64())
                })
                .collect()
        })
        .collect()
}

fn run_char_compare(ctx: &mut Ctx, given: &Map<String, Value>) -> Run<()> {
    let mut p: CharCompareParams = merged("characteristics-compare", given)?;
    positive("char_dt", p.char_dt)?;
    require(matches!(p.model.noise, NoiseConfig::None), || "characteristics-compare needs noise kind none".into())?;
    let built = p.model.build()?;
    if p.points.is_none() {
        p.points = Some(default_points(&built.grid, p.n_points, ctx.seed));
    }
    echo(ctx, &p);
    let points = p.points.clone().unwrap_or_default();
    let traj = built.solve(&p.model)?;
    let rep = compare_characteristics_to_grid(&traj, &built.coupling, &points, p.char_dt)?;
    write_master_trajectory(ctx.dir, &traj)?;
    let d = built.grid.dim();
    let mut header = vec!["point".to_string()];
    header.extend((0..d).map(|a| format!("x0_{a}")));
    header.extend(["max_gap".to_string(), "left_box".to_string()]);
    let header: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let mut csv = Csv::create(ctx.dir, "characteristics.csv", &header)?;
    for (i, g) in rep.points.iter().enumerate() {
        let mut cells = vec![i.to_string()];
        cells.extend(g.x0.iter().map(|v| num(*v)));
        cells.push(num(g.max_gap));
        cells.push(g.left_box.to_string());
        csv.row(&cells)?;
    }
    csv.finish()?;
    let r = &mut ctx.report;
    r.set("scheme", scheme_json(&traj));
    r.set("max_gap", json!(rep.max_gap));
    r.set("points_left_box", json!(rep.points.iter().filter(|g| g.left_box).count()));
    Ok(())
}

fn run_mc(ctx: &mut Ctx, given: &Map<String, Value>) -> Run<()> {
    let p: McParams = merged("mc-value", given)?;
    echo(ctx, &p);
    positive("char_dt", p.char_dt)?;
    positive("t", p.t)?;
    require(p.n_paths >= 2, || "n_paths must be >= 2".into())?;
    let (rate, jump) = match &p.model.noise {
        NoiseConfig::CommonPoisson { rate, jump } => (*rate, jump.build()?),
        _ => return invalid("mc-value needs noise kind common_poisson"),
    };
    let orientation = match p.orientation.as_str() {
        "forward" => JumpOrientation::Forward,
        "inverse" => JumpOrientation::Inverse,
        o => return invalid(format!("orientation must be forward or inverse, got {o}")),
    };
    let discount_form = match p.discount_form.as_str() {
        "decay" => DiscountForm::Decay,
        "integrating" => DiscountForm::Integrating,
        o => return invalid(format!("discount_form must be decay or integrating, got {o}")),
    };
    let built = p.model.build()?;
    require(p.x0.len() == built.grid.dim(), || "x0 must match the grid dimension".into())?;
    require(p.t <= p.model.t_f, || "t must not exceed t_f".into())?;
    let traj = built.solve(&p.model)?;
    let est = estimate_value_mc_with(
        &p.x0,
        p.t,
        &traj,
        &built.coupling,
        &jump,
        rate,
        p.model.discount,
        p.char_dt,
        p.n_paths,
        ctx.seed,
        JumpCharOptions { orientation, discount_form },
    )?;
    let grid_value = traj.value_at(p.t, &p.x0);
    write_master_trajectory(ctx.dir, &traj)?;
    let mut csv = Csv::create(ctx.dir, "mc_value.csv", &["component", "mc_mean", "mc_stderr", "grid_value", "abs_diff"])?;
    for i in 0..grid_value.len() {
        csv.row(&[
            i.to_string(),
            num(est.mean[i]),
            num(est.stderr[i]),
            num(grid_value[i]),
            num((est.mean[i] - grid_value[i]).abs()),
        ])?;
    }
    csv.finish()?;
    let jump_se = (rate * p.t / p.n_paths as f64).sqrt();
    let r = &mut ctx.report;
    r.set("scheme", scheme_json(&traj));
    r.set("mc_mean", json!(est.mean));
    r.set("mc_stderr", json!(est.stderr));
    r.set("grid_value", json!(grid_value));
    r.set("mean_jumps", json!(est.mean_jumps));
    r.set("expected_jumps", json!(rate * p.t));
    r.set("jump_count_z", json!((est.mean_jumps - rate * p.t) / jump_se));
    Ok(())
}

fn run_abm(ctx: &mut Ctx, given: &Map<String, Value>) -> Run<()> {
    let p: AbmParams = merged("abm-path", given)?;
    echo(ctx, &p);
    positive("t_f", p.t_f)?;
    positive("dt", p.dt)?;
    nonneg("rate", p.rate)?;
    let coupling = p.coupling.build()?;
    let jump = p.jump.build()?;
    let path = simulate_abm(&p.x0, &coupling, &jump, p.rate, p.t_f, p.dt, ctx.seed)?;
    let mut csv = Csv::create(ctx.dir, "trajectory.csv", &["time", "component", "value"])?;
    for (t, y) in path.times.iter().zip(&path.y) {
        for (i, yi) in y.iter().enumerate() {
            csv.row(&[num(*t), format!("Y_{i}"), num(*yi)])?;
        }
    }
    csv.finish()?;
    let r = &mut ctx.report;
    r.set("jumps", json!(path.jump_times.len()));
    r.set("jump_times", json!(path.jump_times));
    r.set("final_state", json!(path.final_y()));
    Ok(())
}

fn run_monotonicity(ctx: &mut Ctx, given: &Map<String, Value>) -> Run<()> {
    let p: MonoParams = merged("monotonicity-report", given)?;
    let built = p.model.build()?;
    let tol = p.tol.unwrap_or_else(|| default_tolerance(built.grid.h(), p.model.dt, built.grid.diam()));
    nonneg("tol", tol)?;
    let resolved = MonoParams { tol: Some(tol), ..p.clone() };
    echo(ctx, &resolved);
    let strategy = match p.random_pairs {
        Some(n) => PairStrategy::Random { n, seed: ctx.seed },
        None => PairStrategy::Auto { seed: ctx.seed },
    };
    let traj = built.solve(&p.model)?;
    let rep = verify_propagation(&traj, strategy, tol)?;
    write_master_trajectory(ctx.dir, &traj)?;
    let mut csv = Csv::create(ctx.dir, "monotonicity_report.csv", &["time", "min_pairing", "node_a", "node_b", "holds"])?;
    for k in 0..rep.times.len() {
        let (a, b) = rep.argmin_pair[k];
        csv.row(&[num(rep.times[k]), num(rep.min_pairing[k]), a.to_string(), b.to_string(), (rep.min_pairing[k] >= -tol).to_string()])?;
    }
    csv.finish()?;
    let r = &mut ctx.report;
    r.set("scheme", scheme_json(&traj));
    r.set("certified_monotone", json!(built.coupling.is_certified_monotone()));
    r.set("pair_count", json!(rep.pair_count));
    r.set("worst_pairing", json!(rep.worst()));
    r.set("tol", json!(tol));
    r.set("holds", json!(rep.holds));
    r.set("first_violation_time", rep.first_violation().map_or(Value::Null, |k| json!(rep.times[k])));
    Ok(())
}

fn run_lipschitz(ctx: &mut Ctx, given: &Map<String, Value>) -> Run<()> {
    let p: LipParams = merged("lipschitz-report", given)?;
    nonneg("slack", p.slack)?;
    let built = p.model.build()?;
    let alpha = match p.alpha {
        Some(a) => a,
        None => built
            .coupling
            .linear_modulus()
            .ok_or_else(|| Failure::Invalid("alpha is required for couplings without a linear certificate".into()))?,
    };
    let lip_u0 = p.lip_u0.unwrap_or_else(|| field_lipschitz(&built.u0));
    let resolved = LipParams { alpha: Some(alpha), lip_u0: Some(lip_u0), ..p.clone() };
    echo(ctx, &resolved);
    let (rate, s_norm) = p.model.noise.rate_and_norm()?;
    let c = &built.coupling;
    let inp = BudgetInputs {
        alpha,
        rate,
        s_norm,
        lip_g_x: c.lip_g_x,
        lip_f_x: c.lip_f_x,
        lip_f_u: c.lip_f_u,
        lip_g_u: c.lip_g_u,
        lip_u0,
    };
    let beta = lipschitz_beta(&inp);
    let bound = lipschitz_bound(beta);
    let traj = built.solve(&p.model)?;
    let measured = measured_lipschitz(&traj);
    write_master_trajectory(ctx.dir, &traj)?;
    let limit = bound.map(|b| (1.0 + p.slack) * b);
    let mut csv = Csv::create(ctx.dir, "lipschitz_report.csv", &["time", "measured", "bound", "holds"])?;
    for (t, m) in traj.times.iter().zip(&measured) {
        let holds = limit.map_or(true, |l| *m <= l);
        csv.row(&[num(*t), num(*m), num(bound.unwrap_or(f64::INFINITY)), holds.to_string()])?;
    }
    csv.finish()?;
    let worst = measured.iter().cloned().fold(0.0, f64::max);
    let r = &mut ctx.report;
    r.set("scheme", scheme_json(&traj));
    r.set("beta", json!(beta));
    r.set("bound", bound.map_or(Value::Null, |b| json!(b)));
    r.set("rate", json!(rate));
    r.set("s_norm", json!(s_norm));
    r.set("max_measured", json!(worst));
    r.set("holds", json!(limit.map_or(true, |l| worst <= l)));
    Ok(())
}

fn mfg_series(sol: &MfgSolution1D) -> Vec<(&'static str, &[ScalarField1D])> {
    vec![("u", &sol.u[..]), ("m", &sol.m[..])]
}

fn picard_json(sol: &MfgSolution1D) -> Value {
    json!({
        "iterations": sol.picard_iterations,
        "converged": sol.converged,
        "final_gap": sol.residuals.last().copied().map_or(Value::Null, jnum),
    })
}

fn run_momentum(ctx: &mut Ctx, given: &Map<String, Value>) -> Run<()> {
    let p: MomentumParams = merged("conserved-momentum", given)?;
    echo(ctx, &p);
    let (problem, opts) = p.model.build()?;
    let sol = solve_mfg_discounted(&problem, &opts)?;
    let mom = conserved_momentum(&sol);
    write_1d_trajectory(ctx.dir, &sol.times, &mfg_series(&sol))?;
    let mut csv = Csv::create(ctx.dir, "momentum.csv", &["time", "a"])?;
    for (t, a) in mom.times.iter().zip(&mom.a) {
        csv.row(&[num(*t), num(*a)])?;
    }
    csv.finish()?;
    let h = 1.0 / p.model.n as f64;
    let tol = 10.0 * (h * h + p.model.dt);
    let r = &mut ctx.report;
    r.set("picard", picard_json(&sol));
    r.set("max_drift", json!(mom.max_drift));
    r.set("tol", json!(tol));
    r.set("conserved", json!(mom.max_drift <= tol));
    r.set("x_independent", json!(p.model.hamiltonian_is_x_independent()));
    Ok(())
}

impl Mfg1dModel {
    fn hamiltonian_is_x_independent(&self) -> bool {
        match self.hamiltonian {
            HamConfig::Kinetic { .. } => true,
            HamConfig::Quadratic { b_amp, .. } => b_amp == 0.0,
        }
    }
}

fn run_strong(ctx: &mut Ctx, given: &Map<String, Value>) -> Run<()> {
    let p: StrongParams = merged("strong-coupling-roots", given)?;
    echo(ctx, &p);
    require(p.n >= 3, || "n must be >= 3".into())?;
    positive("nu", p.nu)?;
    positive("horizon", p.horizon)?;
    positive("dt", p.dt)?;
    require(p.lambda_ctrl.is_finite(), || "lambda_ctrl must be finite".into())?;
    require(p.refine >= 1, || "refine must be >= 1".into())?;
    if let Some(c) = p.c {
        positive("c", c)?;
    }
    let phi = p.phi.build(p.n)?;
    let m0 = p.m0.build(p.n)?;
    let scan = ScanRange { a_min: p.scan.a_min, a_max: p.scan.a_max, n_scan: p.scan.n_scan };
    let params = StrongCouplingParams { lambda_ctrl: p.lambda_ctrl, nu: p.nu, horizon: p.horizon, dt: p.dt, scan, c: p.c };
    let res = solve_strong_coupling(&phi, &m0, &params)?;
    let fine_scan = ScanRange { n_scan: (scan.n_scan - 1) * p.refine + 1, ..scan };
    let fine = solve_strong_coupling(&phi, &m0, &StrongCouplingParams { scan: fine_scan, ..params.clone() })?;
    let agree = fine.roots.len() == res.roots.len()
        && fine.roots.iter().zip(&res.roots).all(|(a, b)| (a - b).abs() <= 1e-8);

    let mut series: Vec<(String, &[ScalarField1D])> = Vec::new();
    for (k, sol) in res.solutions.iter().enumerate() {
        series.push((format!("u_{k}"), &sol.u[..]));
        series.push((format!("m_{k}"), &sol.m[..]));
    }
    let named: Vec<(&str, &[ScalarField1D])> = series.iter().map(|(n, f)| (n.as_str(), *f)).collect();
    if !named.is_empty() {
        write_1d_trajectory(ctx.dir, &res.u0.times, &named)?;
    }
    let mut csv = Csv::create(ctx.dir, "roots.csv", &["root", "a"])?;
    for (k, a) in res.roots.iter().enumerate() {
        csv.row(&[k.to_string(), num(*a)])?;
    }
    csv.finish()?;
    let mut csv = Csv::create(ctx.dir, "phi_map.csv", &["a", "phi", "a_minus_phi"])?;
    for (a, ph) in res.a_grid.iter().zip(&res.phi_of_a) {
        csv.row(&[num(*a), num(*ph), num(a - ph)])?;
    }
    csv.finish()?;
    let r = &mut ctx.report;
    r.set("roots", json!(res.roots));
    r.set("n_roots", json!(res.roots.len()));
    r.set("strictly_increasing", json!(res.strictly_increasing()));
    r.set("refined_roots", json!(fine.roots));
    r.set("roots_agree_with_refined_scan", json!(agree));
    r.set("threshold", res.threshold.map_or(Value::Null, |t| json!(t)));
    if let Some(c) = p.c {
        let sc = semiconcavity_check(&res.u0, c);
        r.set("semiconcavity", json!({ "holds": sc.holds, "max_violation": sc.max_violation, "tol": sc.tol }));
        r.set("uniqueness_guaranteed", json!(p.lambda_ctrl < uniqueness_threshold(c, p.horizon)));
    }
    Ok(())
}

fn run_threshold(ctx: &mut Ctx, given: &Map<String, Value>) -> Run<()> {
    let p: ThresholdParams = merged("uniqueness-threshold", given)?;
    echo(ctx, &p);
    positive("c", p.c)?;
    positive("horizon", p.horizon)?;
    let th = uniqueness_threshold(p.c, p.horizon);
    ctx.report.set("threshold", json!(th));
    if let Some(l) = p.lambda_ctrl {
        ctx.report.set("uniqueness_guaranteed", json!(l < th));
    }
    Ok(())
}

fn run_sweep(ctx: &mut Ctx, given: &Map<String, Value>) -> Run<()> {
    let p: SweepParams = merged("mfg-lambda-sweep", given)?;
    echo(ctx, &p);
    require(!p.lambdas.is_empty(), || "lambdas must be non-empty".into())?;
    for l in &p.lambdas {
        positive("lambdas", *l)?;
    }
    let (problem, opts) = p.model.build()?;
    let rows = lambda_sweep(&p.lambdas, &problem, &opts)?;
    let mut csv = Csv::create(ctx.dir, "lambda_sweep.csv", &["lambda", "u_l2_sup", "w1_max", "converged", "iterations", "error"])?;
    for row in &rows {
        csv.row(&[
            num(row.lambda),
            num(row.u_l2_sup),
            num(row.w1_max),
            row.converged.to_string(),
            row.iterations.to_string(),
            row.error.clone().unwrap_or_default().replace(',', ";"),
        ])?;
    }
    csv.finish()?;
    let finite: Vec<_> = rows.iter().filter(|r| r.lambda.is_finite()).collect();
    let u: Vec<f64> = finite.iter().map(|r| r.u_l2_sup).collect();
    let w: Vec<f64> = finite.iter().map(|r| r.w1_max).collect();
    let ratios: Vec<f64> = u.windows(2).map(|x| x[0] / x[1]).collect();
    let failed: Vec<f64> = finite.iter().filter(|r| r.error.is_some()).map(|r| r.lambda).collect();
    let r = &mut ctx.report;
    r.set("u_l2_sup", json!(u.iter().map(|v| jnum(*v)).collect::<Vec<_>>()));
    r.set("w1_max", json!(w.iter().map(|v| jnum(*v)).collect::<Vec<_>>()));
    r.set("u_ratios", json!(ratios.iter().map(|v| jnum(*v)).collect::<Vec<_>>()));
    r.set("u_strictly_decreasing", json!(u.windows(2).all(|x| x[1] < x[0])));
    r.set("w1_strictly_decreasing", json!(w.windows(2).all(|x| x[1] < x[0])));
    r.set("all_converged", json!(finite.iter().all(|r| r.converged)));
    r.set("failed_lambdas", json!(failed));
    if !failed.is_empty() {
        return Err(Failure::Solver(format!("{} sweep rows failed", failed.len())));
    }
    Ok(())
}

fn run_relative(ctx: &mut Ctx, given: &Map<String, Value>) -> Run<()> {
    let p: RelativeParams = merged("relative-cost", given)?;
    echo(ctx, &p);
    require(p.psi_coef.is_finite(), || "psi_coef must be finite".into())?;
    let (mut problem, opts) = p.model.build()?;
    let k = p.psi_coef;
    let psi: crate::mfg_pde::ScalarFn = std::sync::Arc::new(move |m| k * m);
    let dpsi: crate::mfg_pde::ScalarFn = std::sync::Arc::new(move |_| k);
    let limit = solve_relative_cost_limit(&problem.ham, &psi, &dpsi, problem.nu, &problem.m0, problem.horizon, problem.dt)?;
    problem.psi = Some(psi);
    let sol = solve_mfg_discounted(&problem, &opts)?;
    let w1 = sol
        .m
        .iter()
        .zip(&limit.fields)
        .map(|(a, b)| wasserstein1_periodic(a, b))
        .collect::<crate::Result<Vec<_>>>()?;
    write_1d_trajectory(ctx.dir, &sol.times, &[("u", &sol.u[..]), ("m", &sol.m[..]), ("m_limit", &limit.fields[..])])?;
    let r = &mut ctx.report;
    r.set("picard", picard_json(&sol));
    r.set("w1_max", json!(w1.iter().cloned().fold(0.0, f64::max)));
    r.set("w1_final", json!(w1.last().copied().unwrap_or(0.0)));
    Ok(())
}

fn run_higher(ctx: &mut Ctx, given: &Map<String, Value>) -> Run<()> {
    let p: HigherParams = merged("higher-order-fp", given)?;
    echo(ctx, &p);
    let (problem, opts) = p.model.build()?;
    positive("lambda_disc", problem.lambda_disc)?;
    require(problem.ham.is_separable(), || "higher-order-fp needs a kinetic Hamiltonian".into())?;
    let sol = solve_mfg_discounted(&problem, &opts)?;
    let zeroth = solve_fp_limit(&problem.ham, problem.nu, &problem.m0, problem.horizon, problem.dt)?;
    let higher = solve_fp_higher_order(&problem.ham, problem.lambda_disc, problem.nu, &problem.m0, problem.horizon, problem.dt)?;
    let m_mfg = sol.m.last().expect("non-empty");
    let gap_higher = higher.last().max_abs_diff(m_mfg);
    let gap_zeroth = zeroth.last().max_abs_diff(m_mfg);
    write_1d_trajectory(
        ctx.dir,
        &sol.times,
        &[("m_mfg", &sol.m[..]), ("m_zeroth", &zeroth.fields[..]), ("m_higher", &higher.fields[..])],
    )?;
    let mut worst_diff: f64 = 0.0;
    let mut csv = Csv::create(ctx.dir, "effective_diffusion.csv", &["node", "m", "effective_diffusion"])?;
    for (i, m) in higher.last().values().iter().enumerate() {
        let d = effective_diffusion(&problem.ham, problem.lambda_disc, problem.nu, *m, 0.0);
        if let HamConfig::Kinetic { coupling } = p.model.hamiltonian {
            worst_diff = worst_diff.max((d - (problem.nu + coupling * m / problem.lambda_disc)).abs());
        }
        csv.row(&[i.to_string(), num(*m), num(d)])?;
    }
    csv.finish()?;
    let r = &mut ctx.report;
    r.set("picard", picard_json(&sol));
    r.set("sup_gap_higher", json!(gap_higher));
    r.set("sup_gap_zeroth", json!(gap_zeroth));
    r.set("higher_improves", json!(gap_higher <= gap_zeroth));
    r.set("effective_diffusion_closed_form_error", json!(worst_diff));
    Ok(())
}

fn dispatch(ctx: &mut Ctx, scenario: &str, given: &Map<String, Value>) -> Run<()> {
    match scenario {
        "master-noiseless" | "master-jump-deterministic" | "master-poisson-common" | "master-poisson-iid"
        | "master-mixture" => run_master_family(ctx, scenario, given),
        "asymptotic-limit" => run_asymptotic(ctx, given),
        "characteristics-compare" => run_char_compare(ctx, given),
        "mc-value" => run_mc(ctx, given),
        "abm-path" => run_abm(ctx, given),
        "monotonicity-report" => run_monotonicity(ctx, given),
        "lipschitz-report" => run_lipschitz(ctx, given),
        "conserved-momentum" => run_momentum(ctx, given),
        "strong-coupling-roots" => run_strong(ctx, given),
        "uniqueness-threshold" => run_threshold(ctx, given),
        "mfg-lambda-sweep" => run_sweep(ctx, given),
        "relative-cost" => run_relative(ctx, given),
        "higher-order-fp" => run_higher(ctx, given),
        other => invalid(unknown_scenario(other)),
    }
}

fn unknown_scenario(name: &str) -> String {
    format!("unknown scenario {name:?}; valid scenarios:\n{}", list_scenarios())
}

/// Parses the scenario parameters without running anything.
pub fn validate_config(config: &ScenarioConfig) -> Result<(), String> {
    macro_rules! check {
        ($t:ty) => {
            merged::<$t>(&config.scenario, &config.params).map(|_| ()).map_err(|e| match e {
                Failure::Invalid(m) | Failure::Solver(m) => m,
            })
        };
    }
    match config.scenario.as_str() {
        "master-noiseless" | "master-jump-deterministic" | "master-poisson-common" | "master-poisson-iid"
        | "master-mixture" => check!(MasterModel),
        "asymptotic-limit" => check!(AsymptoticParams),
        "characteristics-compare" => check!(CharCompareParams),
        "mc-value" => check!(McParams),
        "abm-path" => check!(AbmParams),
        "monotonicity-report" => check!(MonoParams),
        "lipschitz-report" => check!(LipParams),
        "conserved-momentum" => check!(MomentumParams),
        "strong-coupling-roots" => check!(StrongParams),
        "uniqueness-threshold" => check!(ThresholdParams),
        "mfg-lambda-sweep" => check!(SweepParams),
        "relative-cost" => check!(RelativeParams),
        "higher-order-fp" => check!(HigherParams),
        other => Err(unknown_scenario(other)),
    }
}

/// Runs one scenario and writes its artifacts. Never panics on bad input;
/// the outcome carries the process exit code.
pub fn run_scenario(config: &ScenarioConfig, overrides: &Overrides) -> RunOutcome {
    let fail = |code, dir: Option<PathBuf>, msg: String| RunOutcome { code, out_dir: dir, message: Some(msg) };
    if !SCENARIOS.iter().any(|(n, _)| *n == config.scenario) {
        return fail(EXIT_INVALID, None, unknown_scenario(&config.scenario));
    }
    let Some(dir) = overrides.out_dir.clone().or_else(|| config.out_dir.clone()) else {
        return fail(EXIT_INVALID, None, "no output directory: set out_dir in the config or pass --out".into());
    };
    if let Err(e) = fs::create_dir_all(&dir) {
        return fail(EXIT_SOLVER, Some(dir.clone()), format!("{}: {e}", dir.display()));
    }
    let seed = overrides.seed.unwrap_or(config.seed);
    let mut ctx = Ctx { dir: &dir, seed, report: Report::default(), params: Value::Object(config.params.clone()) };
    let result = dispatch(&mut ctx, &config.scenario, &config.params);
    let (code, message) = match &result {
        Ok(()) => (EXIT_OK, None),
        Err(Failure::Invalid(m)) => (EXIT_INVALID, Some(m.clone())),
        Err(Failure::Solver(m)) => (EXIT_SOLVER, Some(m.clone())),
    };
    let mut summary = Map::new();
    summary.insert("scenario".into(), json!(config.scenario));
    summary.insert("seed".into(), json!(seed));
    summary.insert("params".into(), ctx.params);
    summary.insert("failed".into(), json!(code != EXIT_OK));
    if let Some(m) = &message {
        summary.insert("error".into(), json!(m));
    }
    let results: Map<String, Value> = ctx.report.fields.into_iter().collect();
    summary.insert("results".into(), Value::Object(results));
    let text = serde_json::to_string_pretty(&Value::Object(summary)).unwrap_or_else(|_| "{}".into());
    if let Err(e) = fs::write(dir.join("summary.json"), text + "\n") {
        return fail(EXIT_SOLVER, Some(dir), format!("summary.json: {e}"));
    }
    RunOutcome { code, out_dir: Some(dir), message }
}
