//! Experiment orchestration: JSON experiment configs, deterministic runners
//! dispatching into the library modules, and report persistence (one
//! `report.json`, one CSV per tabular section, and a hash manifest).
//!
//! Everything downstream of a validated config is a pure function of that
//! config: seeds are explicit, the orchestrator is single-threaded, and the
//! modules it delegates to reduce in index order regardless of the worker
//! count, so identical configs produce byte-identical payloads. Wall-clock
//! timing is recorded in the manifest only, never in the hashed payload.
//!
//! Experiments and their candidates:
//!
//! * `"hypotheses"` — derivative and growth probe of the configured model,
//!   one probe per seed.
//! * `"rates"` — spike-perturbation moment rates along the epsilon ladder.
//!   The estimator derives its replicate streams internally, so the seeds
//!   list maps to (`repeats = seeds.len()`, `master_seed = seeds[0]`).
//! * `"duality"` — first-order, second-order, and terminal-quadratic
//!   adjoint duality residuals per (seed, epsilon).
//! * `"cost_gap"` — pathwise spiked-minus-baseline cost comparison under
//!   common random numbers, pooled across seeds, per epsilon.
//! * `"bsde_crosscheck"` — regression adjoints against the deterministic
//!   backward solver (models with deterministic adjoint data only).
//! * `"verify_smp"` — runs the projected-gradient oracle to a discrete
//!   optimum, then checks the averaged Hamiltonian inequality there. The
//!   config schema has no candidate-control field, so the optimizer's
//!   output is the canonical candidate.
//!
//! The baseline control for rates, duality, and cost-gap runs is the zero
//! control clamped into the admissible interval.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::adjoint::{solve_first_adjoint, solve_second_adjoint, AdjointMethod};
use crate::forward::simulate_particles;
use crate::model::{build_model, probe_hypotheses, ControlProcess, ModelError, ModelSpec, ProbeBox};
use crate::smp::{cost_gap, find_optimum_oracle, verify_maximum_principle, SmpVerdict};
use crate::stochastics::{RngStreams, TimeGrid};
use crate::variation::{
    check_duality_suite, estimate_rates, simulate_variation_bundle, RateRow, SpikeFamily,
    SpikeSpec, VariationError,
};
use crate::VERSION;

/// Configuration failures, each with a stable machine-readable code so
/// callers can tell a malformed file from an unknown experiment from a model
/// that fails validation.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read `{path}`: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// Includes unknown keys; the underlying message carries line and column.
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unknown experiment `{0}`")]
    UnknownExperiment(String),
    #[error("model validation failed: {0}")]
    Model(#[from] ModelError),
    /// Spike-window problems: out-of-bounds value or window outside horizon.
    #[error(transparent)]
    Spike(#[from] VariationError),
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl ConfigError {
    pub fn code(&self) -> &'static str {
        match self {
            ConfigError::Io { .. } => "io",
            ConfigError::Parse(_) => "parse",
            ConfigError::UnknownExperiment(_) => "unknown_experiment",
            ConfigError::Model(_) => "model",
            ConfigError::Spike(_) => "spike",
            ConfigError::Invalid(_) => "invalid",
        }
    }
}

/// The experiment selector, parsed from the config's `experiment` string.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExperimentKind {
    VerifySmp,
    Rates,
    Duality,
    CostGap,
    BsdeCrosscheck,
    Hypotheses,
}

impl ExperimentKind {
    pub fn parse(name: &str) -> Result<Self, ConfigError> {
        match name {
            "verify_smp" => Ok(Self::VerifySmp),
            "rates" => Ok(Self::Rates),
            "duality" => Ok(Self::Duality),
            "cost_gap" => Ok(Self::CostGap),
            "bsde_crosscheck" => Ok(Self::BsdeCrosscheck),
            "hypotheses" => Ok(Self::Hypotheses),
            other => Err(ConfigError::UnknownExperiment(other.to_string())),
        }
    }

    fn needs_spike(self) -> bool {
        matches!(self, Self::Rates | Self::Duality | Self::CostGap)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default = "default_grid_s")]
    pub s: f64,
    #[serde(rename = "T", default = "default_grid_t")]
    pub t: f64,
    #[serde(default = "default_grid_steps")]
    pub steps: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { s: default_grid_s(), t: default_grid_t(), steps: default_grid_steps() }
    }
}

fn default_grid_s() -> f64 {
    0.0
}

fn default_grid_t() -> f64 {
    1.0
}

fn default_grid_steps() -> usize {
    100
}

fn default_particles() -> usize {
    1000
}

fn default_seeds() -> Vec<u64> {
    vec![42]
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpikeConfig {
    pub t0: f64,
    /// Window measures; validation snaps each onto whole grid intervals and
    /// echoes the snapped values.
    pub eps_ladder: Vec<f64>,
    pub u_spike: f64,
}

/// One experiment request. Unknown keys anywhere are rejected at parse time;
/// `validate_config` fills nothing silently — the returned value is the
/// config as echoed into reports, with ladder entries snapped to the grid.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: String,
    pub model: ModelConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default = "default_particles")]
    pub particles: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spike: Option<SpikeConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u_mesh: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn kind(&self) -> Result<ExperimentKind, ConfigError> {
        ExperimentKind::parse(&self.experiment)
    }

    /// Model params with the grid section's horizon injected. Explicit `s` /
    /// `T` params must agree with the grid; the grid section is authoritative
    /// for the discretization, so a silent mismatch would desynchronize the
    /// model horizon from the time step.
    pub fn effective_params(&self) -> Result<BTreeMap<String, f64>, ConfigError> {
        let mut params = self.model.params.clone();
        for (key, value) in [("s", self.grid.s), ("T", self.grid.t)] {
            match params.get(key) {
                Some(&existing) if existing != value => {
                    return Err(ConfigError::Invalid(format!(
                        "model param `{key}` = {existing} conflicts with grid value {value}"
                    )))
                }
                _ => {
                    params.insert(key.to_string(), value);
                }
            }
        }
        Ok(params)
    }

    pub fn build_model(&self) -> Result<ModelSpec, ConfigError> {
        let params = self.effective_params()?;
        let model = build_model(&self.model.name, &params)?;
        model.validate()?;
        Ok(model)
    }
}

/// Parses the JSON text into a raw config without validating it. Defaults
/// are filled by the schema; cross-field checks happen in `validate_config`.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    Ok(serde_json::from_str(text)?)
}

/// Full cross-field validation. Returns the config to echo: ladder entries
/// replaced by their grid-snapped measures, everything else as written.
pub fn validate_config(mut config: ExperimentConfig) -> Result<ExperimentConfig, ConfigError> {
    let kind = config.kind()?;
    let model = config.build_model()?;
    let grid = TimeGrid::new(config.grid.s, config.grid.t, config.grid.steps)
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    if config.particles == 0 {
        return Err(ConfigError::Invalid("particles must be positive".into()));
    }
    if config.seeds.is_empty() {
        return Err(ConfigError::Invalid("seeds must be non-empty".into()));
    }
    if let Some(tol) = config.tolerance {
        if !(tol > 0.0) {
            return Err(ConfigError::Invalid(format!("tolerance must be positive, got {tol}")));
        }
    }
    if let Some(mesh) = config.u_mesh {
        if mesh < 2 {
            return Err(ConfigError::Invalid(format!(
                "u_mesh needs at least 2 points, got {mesh}"
            )));
        }
    }
    if kind.needs_spike() && config.spike.is_none() {
        return Err(ConfigError::Invalid(format!(
            "experiment `{}` needs a spike section",
            config.experiment
        )));
    }
    if let Some(spike) = config.spike.as_mut() {
        if !model.control_set.contains(spike.u_spike) {
            return Err(ConfigError::Spike(VariationError::ControlOutOfBounds {
                value: spike.u_spike,
                lo: model.control_set.lo,
                hi: model.control_set.hi,
            }));
        }
        if spike.eps_ladder.is_empty() {
            return Err(ConfigError::Invalid("eps_ladder must be non-empty".into()));
        }
        let mut snapped = Vec::with_capacity(spike.eps_ladder.len());
        for &eps in &spike.eps_ladder {
            let window = SpikeSpec { t0: spike.t0, eps, u_spike: spike.u_spike }.snap(&grid)?;
            snapped.push(window.eps(&grid));
        }
        for (i, a) in snapped.iter().enumerate() {
            if snapped[..i].contains(a) {
                return Err(ConfigError::Invalid(format!(
                    "eps_ladder entries collide after grid snapping: {a} appears twice"
                )));
            }
        }
        spike.eps_ladder = snapped;
    }
    if kind == ExperimentKind::BsdeCrosscheck && !model.deterministic_first_adjoint {
        return Err(ConfigError::Invalid(format!(
            "bsde_crosscheck needs a model with deterministic first-adjoint data; \
             family `{}` with these params does not qualify",
            model.family
        )));
    }
    Ok(config)
}

/// Reads, parses, and validates a config file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = fs::read_to_string(path)
        .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    validate_config(parse_config(&text)?)
}

/// Section outcome: `Pass`/`Fail` for assertion-bearing sections that ran to
/// completion, `Error` when the computation itself failed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SectionStatus {
    Pass,
    Fail,
    Error,
}

/// A tabular companion to one section, written as `<file_name>` next to
/// `report.json`. Kept out of the JSON payload — the numbers are already
/// there in structured form.
#[derive(Clone, Debug)]
pub struct CsvTable {
    pub file_name: String,
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    fn render(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// One named unit of work inside an experiment, with its own status and
/// JSON payload; failures stay local to their section.
#[derive(Clone, Debug, Serialize)]
pub struct Section {
    pub name: &'static str,
    pub status: SectionStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub payload: serde_json::Value,
    #[serde(skip)]
    pub table: Option<CsvTable>,
}

impl Section {
    fn from_result(
        name: &'static str,
        result: Result<(bool, serde_json::Value, Option<CsvTable>), String>,
    ) -> Self {
        match result {
            Ok((pass, payload, table)) => Section {
                name,
                status: if pass { SectionStatus::Pass } else { SectionStatus::Fail },
                error: None,
                payload,
                table,
            },
            Err(message) => Section {
                name,
                status: SectionStatus::Error,
                error: Some(message),
                payload: serde_json::Value::Null,
                table: None,
            },
        }
    }
}

/// The full experiment outcome. Serializes deterministically: the config
/// echo, the per-section payloads, the schema version, and the library
/// version — wall-clock time is excluded and lands in the manifest instead.
#[derive(Clone, Debug, Serialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub library_version: &'static str,
    pub config: ExperimentConfig,
    pub sections: Vec<Section>,
    #[serde(skip)]
    pub wall_clock_ms: u128,
}

pub const SCHEMA_VERSION: u32 = 1;

impl ExperimentReport {
    pub fn passed(&self) -> bool {
        self.sections.iter().all(|s| s.status == SectionStatus::Pass)
    }
}

fn fmt_num(v: f64) -> String {
    format!("{v}")
}

/// Zero control clamped into the admissible interval — the baseline
/// candidate for experiments whose config carries no control of its own.
fn baseline_control(model: &ModelSpec) -> ControlProcess {
    ControlProcess::Constant(model.control_set.clamp(0.0))
}

const ORACLE_ITERATIONS: usize = 60;
const DEFAULT_U_MESH: usize = 41;
/// Slope floors per rate family at first moment order; `R2` is a strict
/// inequality (it must beat the first-order rate, not merely reach it).
const RATE_THRESHOLDS: [(&str, f64, bool); 6] = [
    ("R1", 0.8, false),
    ("R2", 1.0, true),
    ("R3", 1.7, false),
    ("R4", 0.8, false),
    ("R5", 1.6, false),
    ("R6", 1.6, false),
];
const MOMENT_ORDER_K: usize = 1;
const DEFAULT_RESIDUAL_BAND: f64 = 0.05;
const DEFAULT_STDERR_MULTIPLE: f64 = 3.0;
const DEFAULT_CROSSCHECK_GAP: f64 = 0.05;

/// Runs the configured experiment. Never fails as a whole: setup or section
/// errors are captured in section statuses so a report can always be
/// written. Deterministic given the config, including across worker counts.
pub fn run_experiment(config: &ExperimentConfig) -> ExperimentReport {
    let started = Instant::now();
    let mut sections = Vec::new();

    match (config.kind(), config.build_model()) {
        (Ok(kind), Ok(model)) => {
            let section = match kind {
                ExperimentKind::Hypotheses => run_hypotheses(config, &model),
                ExperimentKind::Rates => run_rates(config, &model),
                ExperimentKind::Duality => run_duality(config, &model),
                ExperimentKind::CostGap => run_cost_gap(config, &model),
                ExperimentKind::BsdeCrosscheck => run_crosscheck(config, &model),
                ExperimentKind::VerifySmp => run_verify_smp(config, &model),
            };
            sections.push(section);
        }
        (Err(e), _) | (_, Err(e)) => {
            sections.push(Section::from_result("setup", Err(e.to_string())));
        }
    }

    ExperimentReport {
        schema_version: SCHEMA_VERSION,
        library_version: VERSION,
        config: config.clone(),
        sections,
        wall_clock_ms: started.elapsed().as_millis(),
    }
}

fn run_hypotheses(config: &ExperimentConfig, model: &ModelSpec) -> Section {
    let probe_box = ProbeBox::default();
    let mut per_seed = Vec::with_capacity(config.seeds.len());
    let mut table = CsvTable {
        file_name: "hypotheses.csv".into(),
        header: vec!["seed", "coefficient", "derivative", "max_mismatch", "unverifiable"],
        rows: Vec::new(),
    };
    for &seed in &config.seeds {
        let report = probe_hypotheses(model, &probe_box, config.particles, seed);
        for row in &report.rows {
            table.rows.push(vec![
                seed.to_string(),
                row.coefficient.to_string(),
                row.derivative.to_string(),
                fmt_num(row.max_mismatch),
                row.unverifiable.to_string(),
            ]);
        }
        table.rows.push(vec![
            seed.to_string(),
            "jump".into(),
            "lipschitz".into(),
            fmt_num(report.jump_lipschitz),
            "false".into(),
        ]);
        table.rows.push(vec![
            seed.to_string(),
            "jump".into(),
            "growth".into(),
            fmt_num(report.jump_growth),
            "false".into(),
        ]);
        per_seed.push(report);
    }
    let pass = per_seed.iter().all(|r| r.pass);
    let payload = serde_json::json!({ "per_seed": per_seed, "pass": pass });
    Section::from_result("hypotheses", Ok((pass, payload, Some(table))))
}

fn rate_row_passes(row: &RateRow) -> Option<bool> {
    if row.degenerate {
        return None;
    }
    let (_, floor, strict) = RATE_THRESHOLDS
        .iter()
        .find(|(tag, _, _)| *tag == row.eq_tag)
        .expect("every rate row carries a known tag");
    let slope = match row.slope {
        Some(s) => s,
        None => return Some(false),
    };
    Some(if *strict { slope > *floor } else { slope >= *floor })
}

fn run_rates(config: &ExperimentConfig, model: &ModelSpec) -> Section {
    let spike = config.spike.as_ref().expect("validated: rates needs a spike");
    let family = SpikeFamily { t0: spike.t0, u_spike: spike.u_spike };
    let result = estimate_rates(
        model,
        &baseline_control(model),
        &family,
        &spike.eps_ladder,
        MOMENT_ORDER_K,
        config.particles,
        config.grid.steps,
        config.seeds.len(),
        config.seeds[0],
    )
    .map_err(|e| e.to_string())
    .map(|report| {
        let pass = report.rows.iter().all(|row| rate_row_passes(row).unwrap_or(true));
        let table = CsvTable {
            file_name: "rates.csv".into(),
            header: vec!["quantity", "eq_ref", "k", "slope", "slope_stderr", "n_seeds"],
            rows: report
                .rows
                .iter()
                .map(|row| {
                    vec![
                        row.quantity.to_string(),
                        row.eq_tag.to_string(),
                        row.k.to_string(),
                        row.slope.map(fmt_num).unwrap_or_default(),
                        row.slope_stderr.map(fmt_num).unwrap_or_default(),
                        row.n_seeds.to_string(),
                    ]
                })
                .collect(),
        };
        let thresholds: BTreeMap<&str, f64> =
            RATE_THRESHOLDS.iter().map(|(tag, floor, _)| (*tag, *floor)).collect();
        let payload = serde_json::json!({
            "report": report,
            "thresholds": thresholds,
            "k": MOMENT_ORDER_K,
            "master_seed": config.seeds[0],
            "pass": pass,
        });
        (pass, payload, Some(table))
    });
    Section::from_result("rates", result)
}

fn run_duality(config: &ExperimentConfig, model: &ModelSpec) -> Section {
    let spike = config.spike.as_ref().expect("validated: duality needs a spike");
    let band1 = config.tolerance.unwrap_or(DEFAULT_RESIDUAL_BAND);
    let band2 = 2.0 * band1;
    let result = (|| -> Result<_, String> {
        let grid = TimeGrid::new(config.grid.s, config.grid.t, config.grid.steps)
            .map_err(|e| e.to_string())?;
        let control = baseline_control(model);
        let mut rows = Vec::new();
        let mut table = CsvTable {
            file_name: "duality.csv".into(),
            header: vec!["seed", "eps", "identity", "lhs", "rhs", "residual", "relative"],
            rows: Vec::new(),
        };
        let mut pass = true;
        for &seed in &config.seeds {
            let streams = RngStreams::new(seed);
            let star = simulate_particles(model, &control, &grid, config.particles, &streams)
                .map_err(|e| e.to_string())?;
            for &eps in &spike.eps_ladder {
                let spec = SpikeSpec { t0: spike.t0, eps, u_spike: spike.u_spike };
                let bundle = simulate_variation_bundle(model, star.clone(), &spec)
                    .map_err(|e| e.to_string())?;
                let suite = check_duality_suite(model, &bundle).map_err(|e| e.to_string())?;
                for (identity, report, band) in [
                    ("order1", &suite.order1, band1),
                    ("order2", &suite.order2, band2),
                    ("terminal_quadratic", &suite.terminal_quadratic, band2),
                ] {
                    pass &= report.relative < band;
                    table.rows.push(vec![
                        seed.to_string(),
                        fmt_num(eps),
                        identity.to_string(),
                        fmt_num(report.lhs),
                        fmt_num(report.rhs),
                        fmt_num(report.residual),
                        fmt_num(report.relative),
                    ]);
                }
                rows.push(serde_json::json!({ "seed": seed, "eps": eps, "suite": suite }));
            }
        }
        let payload = serde_json::json!({
            "rows": rows,
            "bands": { "order1": band1, "order2": band2, "terminal_quadratic": band2 },
            "pass": pass,
        });
        Ok((pass, payload, Some(table)))
    })();
    Section::from_result("duality", result)
}

fn run_cost_gap(config: &ExperimentConfig, model: &ModelSpec) -> Section {
    let spike = config.spike.as_ref().expect("validated: cost_gap needs a spike");
    let multiple = config.tolerance.unwrap_or(DEFAULT_STDERR_MULTIPLE);
    let result = (|| -> Result<_, String> {
        let control = baseline_control(model);
        let mut rows = Vec::new();
        let mut table = CsvTable {
            file_name: "cost_gap.csv".into(),
            header: vec!["eps", "seed", "gap", "std_error", "n"],
            rows: Vec::new(),
        };
        let mut pass = true;
        for &eps in &spike.eps_ladder {
            let spec = SpikeSpec { t0: spike.t0, eps, u_spike: spike.u_spike };
            let report =
                cost_gap(model, &spec, &control, config.particles, config.grid.steps, &config.seeds)
                    .map_err(|e| e.to_string())?;
            pass &= report.gap >= -multiple * report.std_error;
            for seed_gap in &report.per_seed {
                table.rows.push(vec![
                    fmt_num(eps),
                    seed_gap.seed.to_string(),
                    fmt_num(seed_gap.gap),
                    String::new(),
                    (report.n_total / report.per_seed.len()).to_string(),
                ]);
            }
            table.rows.push(vec![
                fmt_num(eps),
                "pooled".into(),
                fmt_num(report.gap),
                fmt_num(report.std_error),
                report.n_total.to_string(),
            ]);
            rows.push(serde_json::json!({ "eps": eps, "gap": report }));
        }
        let payload = serde_json::json!({
            "rows": rows,
            "stderr_multiple": multiple,
            "pass": pass,
        });
        Ok((pass, payload, Some(table)))
    })();
    Section::from_result("cost_gap", result)
}

fn run_crosscheck(config: &ExperimentConfig, model: &ModelSpec) -> Section {
    let band = config.tolerance.unwrap_or(DEFAULT_CROSSCHECK_GAP);
    let result = (|| -> Result<_, String> {
        let grid = TimeGrid::new(config.grid.s, config.grid.t, config.grid.steps)
            .map_err(|e| e.to_string())?;
        let control = baseline_control(model);
        let mut rows = Vec::new();
        let mut table = CsvTable {
            file_name: "crosscheck.csv".into(),
            header: vec!["seed", "first_adjoint_sup_gap", "second_adjoint_sup_gap"],
            rows: Vec::new(),
        };
        let mut pass = true;
        for &seed in &config.seeds {
            let streams = RngStreams::new(seed);
            let star = simulate_particles(model, &control, &grid, config.particles, &streams)
                .map_err(|e| e.to_string())?;
            let (reg1, _) = solve_first_adjoint(model, &star, AdjointMethod::Regression)
                .map_err(|e| e.to_string())?;
            let (det1, _) = solve_first_adjoint(model, &star, AdjointMethod::Deterministic)
                .map_err(|e| e.to_string())?;
            let first_gap = sup_mean_gap(&reg1.psi, &det1.psi);
            pass &= first_gap < band;

            let second_gap = if model.deterministic_second_adjoint {
                let (reg2, _) = solve_second_adjoint(model, &star, &reg1, AdjointMethod::Regression)
                    .map_err(|e| e.to_string())?;
                let (det2, _) =
                    solve_second_adjoint(model, &star, &det1, AdjointMethod::Deterministic)
                        .map_err(|e| e.to_string())?;
                let gap = sup_mean_gap(&reg2.q, &det2.q);
                pass &= gap < band;
                Some(gap)
            } else {
                None
            };

            table.rows.push(vec![
                seed.to_string(),
                fmt_num(first_gap),
                second_gap.map(fmt_num).unwrap_or_default(),
            ]);
            rows.push(serde_json::json!({
                "seed": seed,
                "first_adjoint_sup_gap": first_gap,
                "second_adjoint_sup_gap": second_gap,
            }));
        }
        let payload = serde_json::json!({ "rows": rows, "band": band, "pass": pass });
        Ok((pass, payload, Some(table)))
    })();
    Section::from_result("bsde_crosscheck", result)
}

/// Sup over nodes of the absolute difference between the particle means of
/// two node-major value arrays.
fn sup_mean_gap(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(ra, rb)| {
            let ma = ra.iter().sum::<f64>() / ra.len() as f64;
            let mb = rb.iter().sum::<f64>() / rb.len() as f64;
            (ma - mb).abs()
        })
        .fold(0.0, f64::max)
}

fn run_verify_smp(config: &ExperimentConfig, model: &ModelSpec) -> Section {
    let seed = config.seeds[0];
    let u_mesh = config.u_mesh.unwrap_or(DEFAULT_U_MESH);
    let result = (|| -> Result<_, String> {
        let optimum = find_optimum_oracle(
            model,
            config.particles,
            config.grid.steps,
            seed,
            ORACLE_ITERATIONS,
        )
        .map_err(|e| e.to_string())?;
        let tolerance = config
            .tolerance
            .unwrap_or_else(|| crate::smp::default_smp_tolerance(optimum.best_cost));
        let verdict = verify_maximum_principle(
            model,
            &optimum.control,
            config.particles,
            config.grid.steps,
            u_mesh,
            tolerance,
            seed,
        )
        .map_err(|e| e.to_string())?;
        let pass = verdict.pass;
        let control_values: Vec<f64> = match &optimum.control {
            ControlProcess::Piecewise(values) => values.clone(),
            ControlProcess::Constant(u) => vec![*u; config.grid.steps],
            ControlProcess::Feedback(_) => Vec::new(),
        };
        let payload = serde_json::json!({
            "oracle": {
                "best_cost": optimum.best_cost,
                "trace": optimum.trace,
                "control": control_values,
                "iterations": ORACLE_ITERATIONS,
            },
            "verdict": verdict,
            "pass": pass,
        });
        Ok((pass, payload, Some(smp_table(&verdict))))
    })();
    Section::from_result("verify_smp", result)
}

/// Verdict rows as the documented CSV: the single worst row (the argmax the
/// verdict reports) carries `worst_flag = 1`.
fn smp_table(verdict: &SmpVerdict) -> CsvTable {
    let mut flagged = false;
    let rows = verdict
        .rows
        .iter()
        .map(|row| {
            let is_worst = !flagged
                && row.mean_lhs == verdict.worst
                && row.t == verdict.worst_t
                && row.u_value == verdict.worst_u;
            if is_worst {
                flagged = true;
            }
            vec![
                row.t_index.to_string(),
                fmt_num(row.u_value),
                fmt_num(row.mean_lhs),
                if is_worst { "1" } else { "0" }.to_string(),
            ]
        })
        .collect();
    CsvTable {
        file_name: "smp.csv".into(),
        header: vec!["t_index", "u_value", "mean_lhs", "worst_flag"],
        rows,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ManifestEntry {
    pub name: String,
    pub sha256: String,
    pub bytes: u64,
}

/// What `write_report` leaves on disk: the payload files with their content
/// hashes (stable across reruns of the same config) plus the wall-clock
/// time, which lives here precisely so it cannot perturb the hashes.
#[derive(Clone, Debug, Serialize)]
pub struct FileManifest {
    pub files: Vec<ManifestEntry>,
    pub wall_clock_ms: u128,
    pub library_version: &'static str,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for byte in digest {
        hex.push_str(&format!("{byte:02x}"));
    }
    hex
}

/// Writes `report.json`, one CSV per tabular section, and `manifest.json`
/// into `output_dir` (created if missing), overwriting previous contents.
pub fn write_report(report: &ExperimentReport, output_dir: &Path) -> Result<FileManifest, ConfigError> {
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source: std::io::Error| ConfigError::Io { path, source }
    };
    fs::create_dir_all(output_dir).map_err(io_err(output_dir))?;

    let mut files = Vec::new();
    let mut write_file = |name: &str, contents: &str| -> Result<(), ConfigError> {
        let path = output_dir.join(name);
        fs::write(&path, contents).map_err(io_err(&path))?;
        files.push(ManifestEntry {
            name: name.to_string(),
            sha256: sha256_hex(contents.as_bytes()),
            bytes: contents.len() as u64,
        });
        Ok(())
    };

    let mut json = serde_json::to_string_pretty(report).expect("report serializes infallibly");
    json.push('\n');
    write_file("report.json", &json)?;

    for section in &report.sections {
        if let Some(table) = &section.table {
            write_file(&table.file_name, &table.render())?;
        }
    }

    files.sort_by(|a, b| a.name.cmp(&b.name));
    let manifest =
        FileManifest { files, wall_clock_ms: report.wall_clock_ms, library_version: VERSION };
    let mut manifest_json =
        serde_json::to_string_pretty(&manifest).expect("manifest serializes infallibly");
    manifest_json.push('\n');
    let manifest_path = output_dir.join("manifest.json");
    fs::write(&manifest_path, manifest_json).map_err(io_err(&manifest_path))?;
    Ok(manifest)
}
