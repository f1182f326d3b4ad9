//! Command-line front end: versioned JSON configuration, dispatch to the
//! experiment operations, and deterministic report and snapshot output.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::asymptotics::normalization_iteration;
use crate::error::{Error, Result};
use crate::exterior::{full_pipeline, liouville_test, truncation_boundary_data, PipelineOptions, ScheduleOptions};
use crate::field::ScalarField;
use crate::grid::HalfGrid;
use crate::linear::{
    barrier_radial_sweep, barrier_supersolution_check, limit_at_infinity_experiment,
    strict_interior_bound_experiment, CoefficientField, LimitProblem,
};
use crate::ma::{bottom_gradient_check, solve_ma_dirichlet_detailed, SolverConfig, SourceTerm};
use crate::oracles::{BarrierSpec, QuadraticData};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Parser, Debug)]
#[command(name = "hsma", version, about = "Monge-Ampere half-space experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory for reports and snapshots.
    #[arg(long, global = true, default_value = "hsma-out")]
    pub out: PathBuf,
    /// Seed for randomized coefficient fields; overrides the config value.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Suppress the per-command summary on stdout.
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Dirichlet solve on one half-box; writes the field CSV.
    Solve,
    /// Full expanding-domain pipeline with the staged report.
    Verify,
    /// Radial sweep and random-point check of the barrier supersolution.
    Barrier,
    /// Strict interior bound and limit-at-infinity experiments.
    Linear,
    /// Section normalization table on a solved field.
    Sections,
    /// Quadratic data with unit source must be reproduced exactly.
    Liouville,
    /// Every command above, each into its own subdirectory.
    Suite,
}

impl Command {
    pub const ALL: [Command; 6] = [
        Command::Solve,
        Command::Verify,
        Command::Barrier,
        Command::Linear,
        Command::Sections,
        Command::Liouville,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::Verify => "verify",
            Command::Barrier => "barrier",
            Command::Linear => "linear",
            Command::Sections => "sections",
            Command::Liouville => "liouville",
            Command::Suite => "suite",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    Pass = 0,
    ConfigError = 1,
    Failure = 2,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        self as i32
    }

    fn worst(self, other: ExitStatus) -> ExitStatus {
        if self.code() >= other.code() {
            self
        } else {
            other
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub half_width: f64,
    pub height: f64,
    pub h: f64,
}

impl GridSection {
    fn new(half_width: f64, height: f64, h: f64) -> Self {
        Self { half_width, height, h }
    }

    fn validate(&self, prefix: &str) -> std::result::Result<(), String> {
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(format!("{prefix}.h: must be positive, got {}", self.h));
        }
        for (name, len) in [("half_width", self.half_width), ("height", self.height)] {
            if !(len > 0.0 && len.is_finite()) {
                return Err(format!("{prefix}.{name}: must be positive, got {len}"));
            }
            let ratio = len / self.h;
            if (ratio - ratio.round()).abs() > 1e-9 * ratio.max(1.0) || ratio.round() < 2.0 {
                return Err(format!("{prefix}.h: {} does not divide {name} {len} into at least 2 cells", self.h));
            }
        }
        Ok(())
    }

    fn build(&self, dim: usize) -> Result<Arc<HalfGrid>> {
        Ok(Arc::new(HalfGrid::new(dim, self.half_width, self.height, self.h)?))
    }
}

impl Default for GridSection {
    fn default() -> Self {
        Self::new(8.0, 8.0, 0.125)
    }
}

/// `f = 1 + amplitude * 1_{|x| < radius}`; amplitude 0 is the unit source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceSection {
    pub amplitude: f64,
    pub radius: f64,
}

impl Default for SourceSection {
    fn default() -> Self {
        Self {
            amplitude: 5.0,
            radius: 1.0,
        }
    }
}

impl SourceSection {
    fn validate(&self) -> std::result::Result<(), String> {
        if !(self.amplitude >= -1.0 && self.amplitude.is_finite()) {
            return Err(format!("source.amplitude: f must stay nonnegative, got {}", self.amplitude));
        }
        if self.amplitude != 0.0 && !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(format!("source.radius: must be positive, got {}", self.radius));
        }
        Ok(())
    }

    fn build(&self) -> Result<SourceTerm> {
        if self.amplitude == 0.0 {
            Ok(SourceTerm::unit())
        } else {
            SourceTerm::bump(self.amplitude, self.radius)
        }
    }
}

/// `q(x) = x^T A x / 2 + b.x + c`; omitted `a` and `b` give `|x|^2 / 2`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadraticSection {
    pub a: Option<Vec<Vec<f64>>>,
    pub b: Option<Vec<f64>>,
    pub c: f64,
}

impl QuadraticSection {
    fn build(&self, dim: usize) -> std::result::Result<QuadraticData, String> {
        let a = match &self.a {
            None => DMatrix::identity(dim, dim),
            Some(rows) => {
                if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
                    return Err(format!("quadratic.a: expected a {dim}x{dim} matrix"));
                }
                DMatrix::from_fn(dim, dim, |i, j| rows[i][j])
            }
        };
        let b = match &self.b {
            None => DVector::zeros(dim),
            Some(v) if v.len() == dim => DVector::from_column_slice(v),
            Some(v) => return Err(format!("quadratic.b: expected {dim} entries, got {}", v.len())),
        };
        QuadraticData::new(a, b, self.c).map_err(|e| format!("quadratic.a: {e}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoefficientKind {
    Identity,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoefficientSection {
    pub kind: CoefficientKind,
    /// Decay exponent of the perturbation.
    pub s: f64,
    pub lambda: f64,
    pub big_lambda: f64,
}

impl Default for CoefficientSection {
    fn default() -> Self {
        Self {
            kind: CoefficientKind::Identity,
            s: 1.0,
            lambda: 0.5,
            big_lambda: 2.0,
        }
    }
}

impl CoefficientSection {
    fn validate(&self) -> std::result::Result<(), String> {
        if !(self.s > 0.0 && self.s.is_finite()) {
            return Err(format!("coefficients.s: must be positive, got {}", self.s));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(format!("coefficients.lambda: must lie in (0, 1], got {}", self.lambda));
        }
        if !(self.big_lambda >= 1.0 && self.big_lambda.is_finite()) {
            return Err(format!("coefficients.big_lambda: must be at least 1, got {}", self.big_lambda));
        }
        Ok(())
    }

    fn build(&self, dim: usize, seed: u64) -> Result<CoefficientField> {
        match self.kind {
            CoefficientKind::Identity => Ok(CoefficientField::identity(dim)),
            CoefficientKind::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                CoefficientField::random_perturbation(dim, self.s, self.lambda, self.big_lambda, &mut rng)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveSection {
    pub grid: GridSection,
    /// Normal slope added to the boundary quadratic.
    pub b_n: f64,
    pub snapshot: bool,
}

impl Default for SolveSection {
    fn default() -> Self {
        Self {
            grid: GridSection::default(),
            b_n: 0.0,
            snapshot: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySection {
    pub radii: Vec<f64>,
    pub cells: usize,
    pub noise_floor: f64,
    pub normalization_levels: Vec<f64>,
    /// Write the largest-domain field as CSV.
    pub snapshot: bool,
}

impl Default for VerifySection {
    fn default() -> Self {
        let p = PipelineOptions::default();
        Self {
            radii: p.radii,
            cells: p.schedule.cells,
            noise_floor: p.noise_floor,
            normalization_levels: p.normalization_levels,
            snapshot: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BarrierSection {
    /// Defaults to the midpoint of the admissible interval.
    pub delta: Option<f64>,
    pub r1: f64,
    pub r_end: f64,
    pub ratio: f64,
    pub directions: usize,
    pub random_points: usize,
}

impl Default for BarrierSection {
    fn default() -> Self {
        Self {
            delta: None,
            r1: 1.0,
            r_end: 1e8,
            ratio: 1.05,
            directions: 90,
            random_points: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinearSection {
    pub r0: f64,
    /// Bottom value for the strict interior bound.
    pub bottom_value: f64,
    pub cells_per_r0: usize,
    /// Limit at infinity; bottom data is `beta + bottom_amplitude / (1 + |x'|)`.
    pub beta: f64,
    pub bottom_amplitude: f64,
    pub inner_radius: f64,
    pub inner_value: f64,
    pub cells: usize,
    pub schedule: Vec<f64>,
}

impl Default for LinearSection {
    fn default() -> Self {
        Self {
            r0: 1.0,
            bottom_value: 0.5,
            cells_per_r0: 8,
            beta: 0.0,
            bottom_amplitude: 1.0,
            inner_radius: 1.0,
            inner_value: 1.0,
            cells: 64,
            schedule: vec![2.0, 4.0, 8.0, 16.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SectionsSection {
    pub grid: GridSection,
    pub levels: Vec<f64>,
}

impl Default for SectionsSection {
    fn default() -> Self {
        Self {
            grid: GridSection::new(32.0, 32.0, 0.25),
            levels: PipelineOptions::default().normalization_levels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LiouvilleSection {
    pub radius: f64,
    pub h: f64,
}

impl Default for LiouvilleSection {
    fn default() -> Self {
        Self { radius: 8.0, h: 0.125 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default)]
    pub source: SourceSection,
    #[serde(default)]
    pub quadratic: QuadraticSection,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub coefficients: CoefficientSection,
    #[serde(default)]
    pub solve: SolveSection,
    #[serde(default)]
    pub verify: VerifySection,
    #[serde(default)]
    pub barrier: BarrierSection,
    #[serde(default)]
    pub linear: LinearSection,
    #[serde(default)]
    pub sections: SectionsSection,
    #[serde(default)]
    pub liouville: LiouvilleSection,
}

fn default_dim() -> usize {
    2
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: SCHEMA_VERSION,
            seed: 0,
            dim: 2,
            source: SourceSection::default(),
            quadratic: QuadraticSection::default(),
            solver: SolverConfig::default(),
            coefficients: CoefficientSection::default(),
            solve: SolveSection::default(),
            verify: VerifySection::default(),
            barrier: BarrierSection::default(),
            linear: LinearSection::default(),
            sections: SectionsSection::default(),
            liouville: LiouvilleSection::default(),
        }
    }
}

fn increasing(name: &str, v: &[f64]) -> std::result::Result<(), String> {
    if v.is_empty() || v.iter().any(|x| !(*x > 0.0 && x.is_finite())) || v.windows(2).any(|w| w[1] <= w[0]) {
        return Err(format!("{name}: must be a nonempty, positive, strictly increasing list"));
    }
    Ok(())
}

impl RunConfig {
    /// Parses and validates; every message starts with the offending field path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            if path == "." {
                Error::Config(e.inner().to_string())
            } else {
                Error::Config(format!("{path}: {}", e.inner()))
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.check().map_err(Error::Config)
    }

    fn check(&self) -> std::result::Result<(), String> {
        if self.version != SCHEMA_VERSION {
            return Err(format!("version: unsupported schema version {}, expected {SCHEMA_VERSION}", self.version));
        }
        if !(self.dim == 2 || self.dim == 3) {
            return Err(format!("dim: must be 2 or 3, got {}", self.dim));
        }
        self.source.validate()?;
        let q = self.quadratic.build(self.dim)?;
        if !q.is_positive_definite() {
            return Err("quadratic.a: must be symmetric positive definite".into());
        }
        self.solver.validate().map_err(|e| match e {
            Error::Validation(m) | Error::Config(m) => m,
            other => other.to_string(),
        })?;
        self.coefficients.validate()?;

        self.solve.grid.validate("solve.grid")?;
        if !self.solve.b_n.is_finite() {
            return Err("solve.b_n: must be finite".into());
        }

        increasing("verify.radii", &self.verify.radii)?;
        if self.verify.radii[0] < 4.0 * self.source.radius && self.source.amplitude != 0.0 {
            return Err(format!(
                "verify.radii: smallest radius {} is below 4 times source.radius",
                self.verify.radii[0]
            ));
        }
        if self.verify.radii[0] < 2.0 {
            return Err("verify.radii: smallest radius must contain the compact set of radius 2".into());
        }
        if self.verify.cells < 8 {
            return Err(format!("verify.cells: need at least 8, got {}", self.verify.cells));
        }
        if !(self.verify.noise_floor > 0.0) {
            return Err("verify.noise_floor: must be positive".into());
        }
        increasing("verify.normalization_levels", &self.verify.normalization_levels)?;

        let b = &self.barrier;
        if let Some(d) = b.delta {
            let bound = (self.coefficients.s / (self.dim as f64 - 1.0)).min(1.0);
            if !(d > 0.0 && d < bound) {
                return Err(format!("barrier.delta: {d} outside (0, {bound})"));
            }
        }
        if !(b.r1 > 0.0) {
            return Err(format!("barrier.r1: must be positive, got {}", b.r1));
        }
        if !(b.r_end > b.r1 && b.r_end.is_finite()) {
            return Err(format!("barrier.r_end: must exceed r1, got {}", b.r_end));
        }
        if !(b.ratio > 1.0) {
            return Err(format!("barrier.ratio: must exceed 1, got {}", b.ratio));
        }
        if b.directions < 2 {
            return Err("barrier.directions: need at least 2".into());
        }

        let l = &self.linear;
        if !(l.r0 > 0.0) {
            return Err(format!("linear.r0: must be positive, got {}", l.r0));
        }
        if l.cells_per_r0 < 2 {
            return Err("linear.cells_per_r0: need at least 2".into());
        }
        if !(l.inner_radius > 0.0) {
            return Err("linear.inner_radius: must be positive".into());
        }
        if l.cells < 8 {
            return Err("linear.cells: need at least 8".into());
        }
        increasing("linear.schedule", &l.schedule)?;
        if l.schedule[0] <= l.inner_radius {
            return Err("linear.schedule: must start beyond linear.inner_radius".into());
        }

        self.sections.grid.validate("sections.grid")?;
        increasing("sections.levels", &self.sections.levels)?;

        let lv = &self.liouville;
        GridSection::new(lv.radius, lv.radius, lv.h)
            .validate("liouville")
            .map_err(|m| m.replace("half_width", "radius"))?;
        Ok(())
    }

    fn quadratic(&self) -> QuadraticData {
        self.quadratic.build(self.dim).expect("validated")
    }
}

/// Result of one command: status, JSON report, optional field snapshot.
pub struct CommandOutput {
    pub status: ExitStatus,
    pub summary: String,
    pub report: Value,
    pub snapshot: Option<ScalarField>,
}

fn outcome(passed: bool) -> ExitStatus {
    if passed {
        ExitStatus::Pass
    } else {
        ExitStatus::Failure
    }
}

fn header(cmd: Command, cfg: &RunConfig, passed: bool) -> serde_json::Map<String, Value> {
    let mut m = serde_json::Map::new();
    m.insert("command".into(), json!(cmd.name()));
    m.insert("schema_version".into(), json!(SCHEMA_VERSION));
    m.insert("seed".into(), json!(cfg.seed));
    m.insert("passed".into(), json!(passed));
    m
}

fn with_result(mut m: serde_json::Map<String, Value>, result: Value) -> Value {
    m.insert("result".into(), result);
    Value::Object(m)
}

pub fn run_solve(cfg: &RunConfig) -> Result<CommandOutput> {
    let grid = cfg.solve.grid.build(cfg.dim)?;
    let f = cfg.source.build()?;
    let q = cfg.quadratic();
    let data = truncation_boundary_data(&q, cfg.solve.b_n, cfg.solve.grid.half_width)?;
    let sol = solve_ma_dirichlet_detailed(grid.clone(), &f, &data, &cfg.solver, None)?;
    let p = q.with_normal_slope(cfg.solve.b_n);
    let deviation = (0..grid.len())
        .map(|i| (sol.field.get(i) - p.eval(&grid.coords(i))).abs())
        .fold(0.0, f64::max);
    let gradient = bottom_gradient_check(&sol.field, f.upper_bound().max(1.0));
    let result = json!({
        "grid": grid.descriptor(),
        "nodes": grid.len(),
        "newton_iterations": sol.history.len() - 1,
        "final_residual": sol.final_residual(),
        "history": sol.history,
        "sup_deviation_from_boundary_quadratic": deviation,
        "bottom_gradient": gradient,
    });
    Ok(CommandOutput {
        status: ExitStatus::Pass,
        summary: format!(
            "converged in {} Newton steps, residual {:.3e}, {} nodes",
            sol.history.len() - 1,
            sol.final_residual(),
            grid.len()
        ),
        report: with_result(header(Command::Solve, cfg, true), result),
        snapshot: cfg.solve.snapshot.then_some(sol.field),
    })
}

pub fn run_verify(cfg: &RunConfig) -> Result<CommandOutput> {
    let f = cfg.source.build()?;
    let q = cfg.quadratic();
    let opts = PipelineOptions {
        radii: cfg.verify.radii.clone(),
        schedule: ScheduleOptions {
            cells: cfg.verify.cells,
            solver: cfg.solver.clone(),
            ..ScheduleOptions::default()
        },
        noise_floor: cfg.verify.noise_floor,
        normalization_levels: cfg.verify.normalization_levels.clone(),
        ..PipelineOptions::default()
    };
    let report = full_pipeline(&f, &q, &opts)?;
    let passed = report.passed();
    let summary = match report.first_failure() {
        None => format!("all {} stages pass; slopes {:?}", report.stages.len(), report.slopes),
        Some(s) => format!("stage {} {:?}", s.name, s.status),
    };
    // the largest field is not kept by the pipeline; re-solve only on request
    let snapshot = if cfg.verify.snapshot && passed {
        let r = *cfg.verify.radii.last().expect("validated");
        let grid = Arc::new(HalfGrid::new(cfg.dim, r, r, r / cfg.verify.cells as f64)?);
        let data = truncation_boundary_data(&q, report.b_n.unwrap_or(0.0), r)?;
        Some(solve_ma_dirichlet_detailed(grid, &f, &data, &cfg.solver, None)?.field)
    } else {
        None
    };
    let mut m = header(Command::Verify, cfg, passed);
    let Value::Object(body) = serde_json::to_value(&report)? else {
        unreachable!("report serializes to an object")
    };
    m.extend(body);
    Ok(CommandOutput {
        status: outcome(passed),
        summary,
        report: Value::Object(m),
        snapshot,
    })
}

pub fn run_barrier(cfg: &RunConfig) -> Result<CommandOutput> {
    let dim = cfg.dim;
    let b = &cfg.barrier;
    let coeffs = cfg.coefficients.build(dim, cfg.seed)?;
    let mut spec = BarrierSpec::with_default_delta(cfg.coefficients.s, b.r1, dim);
    if let Some(d) = b.delta {
        spec.delta = d;
    }
    let sweep = barrier_radial_sweep(&coeffs, &spec, b.r1, b.r_end, b.ratio, b.directions)?;
    let sweep_ok = sweep.max_values.iter().all(|&v| v <= 1e-12);
    // independent check: log-uniform radii and uniform directions, separate stream
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let (lo, hi) = (b.r1.ln(), b.r_end.ln());
    let sample: Vec<Vec<f64>> = (0..b.random_points)
        .map(|_| {
            let r = rng.gen_range(lo..=hi).exp();
            loop {
                let mut d: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                d[dim - 1] = d[dim - 1].abs();
                let n = d.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > 1e-3 && n <= 1.0 && d[dim - 1] / n > 1e-6 {
                    break d.iter().map(|v| v / n * r).collect();
                }
            }
        })
        .collect();
    let random = if sample.is_empty() {
        None
    } else {
        Some(barrier_supersolution_check(&coeffs, &spec, &sample)?)
    };
    let passed = sweep_ok && random.as_ref().map_or(true, |r| r.passed);
    let worst = sweep.max_values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let result = json!({
        "spec": spec,
        "coefficients": cfg.coefficients,
        "sweep": sweep,
        "sweep_max": worst,
        "random_check": random,
    });
    Ok(CommandOutput {
        status: outcome(passed),
        summary: format!("{} radii, largest operator value {worst:.3e}", sweep.radii.len()),
        report: with_result(header(Command::Barrier, cfg, passed), result),
        snapshot: None,
    })
}

pub fn run_linear(cfg: &RunConfig) -> Result<CommandOutput> {
    let l = &cfg.linear;
    let coeffs = cfg.coefficients.build(cfg.dim, cfg.seed)?;
    let eps = strict_interior_bound_experiment(&coeffs, l.r0, l.bottom_value, l.cells_per_r0)?;
    let dim = cfg.dim;
    let (beta, amp, inner_value) = (l.beta, l.bottom_amplitude, l.inner_value);
    let bottom = move |x: &[f64]| {
        let r = x[..dim - 1].iter().map(|v| v * v).sum::<f64>().sqrt();
        beta + amp / (1.0 + r)
    };
    let inner = move |_: &[f64]| inner_value;
    let problem = LimitProblem {
        beta,
        inner_radius: l.inner_radius,
        bottom: &bottom,
        inner: &inner,
        cells: l.cells,
    };
    let limit = limit_at_infinity_experiment(&coeffs, &problem, &l.schedule)?;
    let passed = eps.positive && limit.monotone;
    let result = json!({
        "coefficients": cfg.coefficients,
        "strict_interior_bound": eps,
        "limit_at_infinity": limit,
    });
    Ok(CommandOutput {
        status: outcome(passed),
        summary: format!(
            "epsilon0 = {:.4e}, limit deviations {:?}",
            eps.epsilon0,
            limit.rows.iter().map(|r| r.sup_deviation).collect::<Vec<_>>()
        ),
        report: with_result(header(Command::Linear, cfg, passed), result),
        snapshot: None,
    })
}

pub fn run_sections(cfg: &RunConfig) -> Result<CommandOutput> {
    let grid = cfg.sections.grid.build(cfg.dim)?;
    let f = cfg.source.build()?;
    let q = cfg.quadratic();
    let data = |x: &[f64]| q.eval(x);
    let sol = solve_ma_dirichlet_detailed(grid, &f, &data, &cfg.solver, None)?;
    let table = normalization_iteration(&sol.field, &cfg.sections.levels)?;
    let passed = table.decreasing;
    Ok(CommandOutput {
        status: outcome(passed),
        summary: format!("{} levels, {} decrease violations", table.rows.len(), table.violations),
        report: with_result(header(Command::Sections, cfg, passed), serde_json::to_value(&table)?),
        snapshot: None,
    })
}

pub fn run_liouville(cfg: &RunConfig) -> Result<CommandOutput> {
    let rep = liouville_test(&cfg.quadratic(), cfg.liouville.radius, cfg.liouville.h, &cfg.solver)?;
    Ok(CommandOutput {
        status: outcome(rep.passed),
        summary: format!("sup |u - p| = {:.3e} (tolerance {:.1e})", rep.sup_deviation, rep.tolerance),
        report: with_result(header(Command::Liouville, cfg, rep.passed), serde_json::to_value(&rep)?),
        snapshot: None,
    })
}

pub fn run_command(cmd: Command, cfg: &RunConfig) -> Result<CommandOutput> {
    match cmd {
        Command::Solve => run_solve(cfg),
        Command::Verify => run_verify(cfg),
        Command::Barrier => run_barrier(cfg),
        Command::Linear => run_linear(cfg),
        Command::Sections => run_sections(cfg),
        Command::Liouville => run_liouville(cfg),
        Command::Suite => unreachable!("suite dispatches the individual commands"),
    }
}

/// Writes via a temporary file and rename so readers never see partial output.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn write_outputs(dir: &Path, out: &CommandOutput) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut text = serde_json::to_string_pretty(&out.report)?;
    text.push('\n');
    write_atomic(&dir.join("report.json"), text.as_bytes())?;
    if let Some(field) = &out.snapshot {
        let mut buf = Vec::new();
        field.write_csv(&mut buf)?;
        write_atomic(&dir.join("field.csv"), &buf)?;
    }
    Ok(())
}

fn error_status(e: &Error) -> ExitStatus {
    if e.is_config() {
        ExitStatus::ConfigError
    } else {
        ExitStatus::Failure
    }
}

fn execute(cmd: Command, cfg: &RunConfig, dir: &Path, quiet: bool) -> ExitStatus {
    let result = run_command(cmd, cfg).and_then(|out| {
        write_outputs(dir, &out)?;
        Ok(out)
    });
    match result {
        Ok(out) => {
            if !quiet {
                let tag = if out.status == ExitStatus::Pass { "pass" } else { "FAIL" };
                println!("{}: {tag}: {}", cmd.name(), out.summary);
            }
            out.status
        }
        Err(e) => {
            eprintln!("{}: {e}", cmd.name());
            error_status(&e)
        }
    }
}

pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        None => RunConfig::default(),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("config: cannot read {}: {e}", p.display())))?;
            RunConfig::from_json(&text)?
        }
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

pub fn run(cli: &Cli) -> ExitStatus {
    let cfg = match load_config(cli.config.as_deref(), cli.seed) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return ExitStatus::ConfigError;
        }
    };
    match cli.command {
        Command::Suite => Command::ALL.iter().fold(ExitStatus::Pass, |acc, &cmd| {
            acc.worst(execute(cmd, &cfg, &cli.out.join(cmd.name()), cli.quiet))
        }),
        cmd => execute(cmd, &cfg, &cli.out, cli.quiet),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = RunConfig::from_json(r#"{"version": 1}"#).unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn errors_name_the_field() {
        let cases = [
            (r#"{}"#, "version"),
            (r#"{"version": 2}"#, "version"),
            (r#"{"version": 1, "solve": {"grid": {"h": 0.3}}}"#, "solve.grid.h"),
            (r#"{"version": 1, "solve": {"gird": {}}}"#, "gird"),
            (r#"{"version": 1, "solve": {"grid": {"h": "small"}}}"#, "solve.grid.h"),
            (r#"{"version": 1, "source": {"amplitude": -3}}"#, "source.amplitude"),
            (r#"{"version": 1, "quadratic": {"a": [[1, 0], [0, -1]]}}"#, "quadratic.a"),
            (r#"{"version": 1, "verify": {"radii": [8, 4]}}"#, "verify.radii"),
            (r#"{"version": 1, "solver": {"tolerance": -1}}"#, "solver.tolerance"),
            (r#"{"version": 1, "barrier": {"ratio": 1}}"#, "barrier.ratio"),
            (r#"{"version": 1, "coefficients": {"kind": "wild"}}"#, "coefficients.kind"),
        ];
        for (text, field) in cases {
            let err = RunConfig::from_json(text).unwrap_err();
            assert!(err.is_config(), "{text}");
            assert!(err.to_string().contains(field), "{text}: {err}");
        }
    }

    #[test]
    fn grid_divisibility_accepts_binary_fractions() {
        assert!(GridSection::new(8.0, 4.0, 0.125).validate("g").is_ok());
        assert!(GridSection::new(1.0, 1.0, 0.1).validate("g").is_ok());
        assert!(GridSection::new(1.0, 1.0, 0.3).validate("g").is_err());
    }

    #[test]
    fn liouville_and_unit_solve_pass() {
        let cfg = RunConfig {
            source: SourceSection {
                amplitude: 0.0,
                radius: 1.0,
            },
            solve: SolveSection {
                grid: GridSection::new(4.0, 4.0, 0.25),
                ..SolveSection::default()
            },
            ..RunConfig::default()
        };
        let out = run_solve(&cfg).unwrap();
        assert_eq!(out.status, ExitStatus::Pass);
        let dev = out.report["result"]["sup_deviation_from_boundary_quadratic"].as_f64().unwrap();
        assert!(dev < 1e-9);
        assert_eq!(run_liouville(&cfg).unwrap().status, ExitStatus::Pass);
    }
}
