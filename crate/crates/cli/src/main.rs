#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use transport_ate::estimators::{estimate_with_ci, AteEstimate, EstimatorConfig, EstimatorKind};
use transport_ate::sensitivity::{
    data_driven_delta, default_threshold, estimate_sigma, linspace, procedure_missing_in_obs, procedure_missing_in_rct,
    procedure_proxy, procedure_totally_missing, proxy_bias, render_grid, GridFormat, SensitivityGrid,
};
use transport_ate::simulation::{standard_patterns, run_named, run_scenario, RunOptions, ScenarioResult, ScenarioSpec};
use transport_ate::stats::boxm::sample_covariance;
use transport_ate::stats::{box_m_between_strata, Stage1};
use transport_ate::{detect_pattern, load_csv_files, CombinedSample, CsvSchema, Error, ErrorClass, Stratum};

const EXIT_INPUT: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_PATTERN: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "transport-ate", version, about = "Transported treatment effects and missing-covariate sensitivity analysis")]
struct Cli {
    /// Seed for every stochastic step; required by stochastic commands.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output file (default: stdout).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Format {
    Json,
    Csv,
    Svg,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "lowercase")]
enum Command {
    /// Estimate the target-population ATE.
    Estimate(EstimateArgs),
    /// Sensitivity map or curve for a missing covariate.
    Sensitivity(SensitivityArgs),
    /// Run a Monte Carlo scenario.
    Simulate(SimulateArgs),
    /// Covariance homogeneity between the strata.
    Diagnose(DiagnoseArgs),
}

#[derive(Args, Debug, Serialize)]
struct DataArgs {
    /// Trial CSV (S = 1 rows).
    #[arg(long)]
    rct: Option<PathBuf>,
    /// Observational CSV (S = 0 rows).
    #[arg(long)]
    obs: Option<PathBuf>,
    /// Combined CSV with both strata.
    #[arg(long, conflicts_with_all = ["rct", "obs"])]
    data: Option<PathBuf>,
    #[arg(long, default_value = "Y")]
    outcome: String,
    #[arg(long, default_value = "A")]
    treatment: String,
    #[arg(long, default_value = "S")]
    study: String,
}

impl DataArgs {
    fn given(&self) -> bool {
        self.data.is_some() || self.rct.is_some() || self.obs.is_some()
    }

    fn paths(&self) -> Result<Vec<PathBuf>, Error> {
        match (&self.data, &self.rct, &self.obs) {
            (Some(d), _, _) => Ok(vec![d.clone()]),
            (None, Some(r), Some(o)) => Ok(vec![r.clone(), o.clone()]),
            _ => Err(Error::InvalidInput("give --data, or both --rct and --obs".into())),
        }
    }

    fn load(&self) -> Result<CombinedSample, Error> {
        let schema = CsvSchema {
            study: self.study.clone(),
            treatment: Some(self.treatment.clone()),
            outcome: Some(self.outcome.clone()),
            covariates: None,
        };
        load_csv_files(&self.paths()?, &schema)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum EstimatorChoice {
    Dm,
    Gformula,
    Ipsw,
    Aipsw,
    All,
}

impl EstimatorChoice {
    fn kinds(self) -> Vec<EstimatorKind> {
        match self {
            EstimatorChoice::Dm => vec![EstimatorKind::Dm],
            EstimatorChoice::Gformula => vec![EstimatorKind::GFormula],
            EstimatorChoice::Ipsw => vec![EstimatorKind::Ipsw],
            EstimatorChoice::Aipsw => vec![EstimatorKind::Aipsw],
            EstimatorChoice::All => vec![
                EstimatorKind::Dm,
                EstimatorKind::GFormula,
                EstimatorKind::Ipsw,
                EstimatorKind::Aipsw,
            ],
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct EstimateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value = "gformula")]
    estimator: EstimatorChoice,
    /// Cross-fitting folds for AIPSW.
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Bootstrap replicates for a percentile CI (0 = none).
    #[arg(long, default_value_t = 0)]
    bootstrap: usize,
    /// Trial treatment probability.
    #[arg(long, default_value_t = 0.5)]
    e1: f64,
    /// Normalise IPSW weights within each arm.
    #[arg(long)]
    normalize: bool,
    /// Comma-separated adjustment covariates (default: all observed in both strata).
    #[arg(long, value_delimiter = ',')]
    covariates: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum PatternChoice {
    TotallyMissing,
    MissingInRct,
    MissingInObs,
    Proxy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
struct Range {
    lo: f64,
    hi: f64,
    steps: usize,
}

impl FromStr for Range {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(format!("expected lo:hi:steps, got '{s}'"));
        }
        let num = |t: &str| t.trim().parse::<f64>().map_err(|_| format!("'{t}' is not a number"));
        let lo = num(parts[0])?;
        let hi = num(parts[1])?;
        let steps: usize = parts[2].trim().parse().map_err(|_| format!("'{}' is not a step count", parts[2]))?;
        if !lo.is_finite() || !hi.is_finite() {
            return Err("range bounds must be finite".into());
        }
        if steps < 1 {
            return Err("steps must be at least 1".into());
        }
        if lo > hi {
            return Err(format!("lo {lo} exceeds hi {hi}"));
        }
        Ok(Range { lo, hi, steps })
    }
}

impl Range {
    fn values(&self) -> Vec<f64> {
        linspace(self.lo, self.hi, self.steps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Stage1Choice {
    Kernel,
    Linear,
}

impl From<Stage1Choice> for Stage1 {
    fn from(c: Stage1Choice) -> Self {
        match c {
            Stage1Choice::Kernel => Stage1::Kernel,
            Stage1Choice::Linear => Stage1::Linear,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct SensitivityArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum)]
    pattern: PatternChoice,
    /// Missing covariate (or proxy column for --pattern proxy).
    #[arg(long)]
    covariate: Option<String>,
    /// CATE-coefficient axis, lo:hi:steps.
    #[arg(long, default_value = "-40:40:81", allow_hyphen_values = true)]
    delta_range: Range,
    /// Mean-shift axis, lo:hi:steps.
    #[arg(long, default_value = "-1:1:81", allow_hyphen_values = true)]
    shift_range: Range,
    /// Hypothesised target means of a covariate missing in the observational sample.
    #[arg(long, allow_hyphen_values = true)]
    expectations: Option<Range>,
    /// Proxy noise standard deviations.
    #[arg(long)]
    sigma_prox: Option<Range>,
    /// Standard deviation of the missing covariate (proxy pattern).
    #[arg(long)]
    sigma_mis: Option<f64>,
    /// Hypothesised CATE coefficient of the missing covariate (proxy pattern without data).
    #[arg(long, allow_hyphen_values = true)]
    delta: Option<f64>,
    /// Hypothesised mean shift of the missing covariate (proxy pattern without data).
    #[arg(long, allow_hyphen_values = true)]
    shift: Option<f64>,
    /// |bias| contour level (default: |tau_obs - tau_dm| when data are given).
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long, default_value_t = 0.5)]
    e1: f64,
    #[arg(long, value_enum, default_value = "linear")]
    stage1: Stage1Choice,
    /// Also write the map as SVG here.
    #[arg(long)]
    #[serde(skip)]
    svg: Option<PathBuf>,
    /// Also write the JSON metadata here.
    #[arg(long)]
    #[serde(skip)]
    meta: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct SimulateArgs {
    /// Named scenario.
    #[arg(long, conflicts_with = "spec", required_unless_present = "spec")]
    scenario: Option<String>,
    /// Scenario specification (JSON).
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    reps: usize,
    /// Also write the replicate rows as CSV here.
    #[arg(long)]
    #[serde(skip)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct DiagnoseArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Comma-separated covariates (default: all observed in both strata).
    #[arg(long, value_delimiter = ',')]
    covariates: Option<Vec<String>>,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e.class() {
            ErrorClass::Input => EXIT_INPUT,
            ErrorClass::Numerical => EXIT_NUMERICAL,
            ErrorClass::Pattern => EXIT_PATTERN,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn input_error(msg: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_INPUT,
        message: msg.into(),
    }
}

type CmdResult<T> = Result<T, Failure>;

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

struct Ctx {
    seed: Option<u64>,
    out: Option<PathBuf>,
    format: Option<Format>,
    config_hash: String,
}

impl Ctx {
    fn require_seed(&self, what: &str) -> CmdResult<u64> {
        self.seed.ok_or_else(|| input_error(format!("--seed is required for {what}")))
    }

    fn provenance(&self) -> Value {
        json!({
            "tool": "transport-ate",
            "version": env!("CARGO_PKG_VERSION"),
            "seed": self.seed,
            "config_hash": self.config_hash,
        })
    }

    fn emit(&self, bytes: &[u8]) -> CmdResult<()> {
        match &self.out {
            Some(p) => write_file(p, bytes),
            None => std::io::stdout()
                .write_all(bytes)
                .map_err(|e| input_error(format!("writing stdout: {e}"))),
        }
    }

    /// Sidecar metadata for outputs that cannot carry it inline.
    fn emit_sidecar(&self, explicit: Option<&Path>, meta: &Value) -> CmdResult<()> {
        let path = match (explicit, &self.out) {
            (Some(p), _) => p.to_path_buf(),
            (None, Some(o)) => {
                let mut s = o.clone().into_os_string();
                s.push(".meta.json");
                PathBuf::from(s)
            }
            (None, None) => return Ok(()),
        };
        write_file(&path, &to_json(meta)?)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> CmdResult<()> {
    fs::write(path, bytes).map_err(|e| input_error(format!("cannot write {}: {e}", path.display())))
}

fn to_json<T: Serialize>(v: &T) -> CmdResult<Vec<u8>> {
    let mut s = serde_json::to_vec_pretty(v).map_err(Error::from)?;
    s.push(b'\n');
    Ok(s)
}

fn config_hash(cli: &Cli) -> CmdResult<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&json!({"command": &cli.command, "seed": cli.seed, "format": cli.format})).map_err(Error::from)?);
    let data = match &cli.command {
        Command::Estimate(a) => Some(&a.data),
        Command::Sensitivity(a) => Some(&a.data),
        Command::Diagnose(a) => Some(&a.data),
        Command::Simulate(_) => None,
    };
    let mut inputs: Vec<PathBuf> = data.map(|d| d.paths().unwrap_or_default()).unwrap_or_default();
    if let Command::Simulate(SimulateArgs { spec: Some(p), .. }) = &cli.command {
        inputs.push(p.clone());
    }
    for p in inputs {
        if let Ok(bytes) = fs::read(&p) {
            h.update(Sha256::digest(&bytes));
        }
    }
    Ok(hex(&h.finalize()))
}

fn column_indices(sample: &CombinedSample, names: &[String]) -> CmdResult<Vec<usize>> {
    names
        .iter()
        .map(|n| sample.index_of(n).ok_or_else(|| Failure::from(Error::MissingColumn(n.clone()))))
        .collect()
}

fn cmd_estimate(ctx: &Ctx, args: &EstimateArgs) -> CmdResult<()> {
    let kinds = args.estimator.kinds();
    let stochastic = args.bootstrap > 0 || kinds.contains(&EstimatorKind::Aipsw);
    let seed = if stochastic {
        ctx.require_seed("bootstrap or cross-fitting")?
    } else {
        ctx.seed.unwrap_or(0)
    };
    let sample = args.data.load()?;
    let cfg = EstimatorConfig {
        e1: args.e1,
        normalize: args.normalize,
        folds: args.folds,
        seed,
        covariates: args.covariates.as_ref().map(|c| column_indices(&sample, c)).transpose()?,
        ..EstimatorConfig::default()
    };
    let mut estimates: Vec<AteEstimate> = Vec::new();
    for kind in kinds {
        let mut est = estimate_with_ci(&sample, kind, &cfg, args.bootstrap, seed)?;
        if !stochastic {
            est.seed = ctx.seed;
        }
        log::info!("{}: {:.6}", kind.name(), est.value);
        estimates.push(est);
    }
    match ctx.format.unwrap_or(Format::Json) {
        Format::Json => ctx.emit(&to_json(&json!({
            "metadata": ctx.provenance(),
            "notes": sample.notes(),
            "estimates": estimates,
        }))?),
        Format::Csv => {
            let mut out = String::from("estimator,value,ci_low,ci_high,n,m\n");
            for e in &estimates {
                let (lo, hi) = e.ci.map(|(l, h)| (l.to_string(), h.to_string())).unwrap_or_default();
                out.push_str(&format!("{},{},{lo},{hi},{},{}\n", e.estimator.name(), e.value, e.n, e.m));
            }
            ctx.emit(out.as_bytes())?;
            ctx.emit_sidecar(None, &ctx.provenance())
        }
        Format::Svg => Err(input_error("svg output is only available for sensitivity maps")),
    }
}

fn grid_output(ctx: &Ctx, args: &SensitivityArgs, grid: &mut SensitivityGrid) -> CmdResult<()> {
    grid.metadata.insert("provenance".into(), ctx.provenance());
    let meta = json!({
        "metadata": grid.metadata,
        "threshold": grid.threshold,
        "correction": grid.correction,
        "covariate": grid.covariate,
        "marker": grid.marker,
        "rows": grid.rows(),
    });
    if let Some(p) = &args.svg {
        write_file(p, &render_grid(grid, GridFormat::Svg)?)?;
    }
    match ctx.format.unwrap_or(Format::Csv) {
        Format::Csv => {
            ctx.emit(&render_grid(grid, GridFormat::Csv)?)?;
            ctx.emit_sidecar(args.meta.as_deref(), &meta)
        }
        Format::Svg => {
            ctx.emit(&render_grid(grid, GridFormat::Svg)?)?;
            ctx.emit_sidecar(args.meta.as_deref(), &meta)
        }
        Format::Json => {
            if let Some(p) = &args.meta {
                write_file(p, &to_json(&meta)?)?;
            }
            ctx.emit(&to_json(grid)?)
        }
    }
}

fn rows_output(ctx: &Ctx, args: &SensitivityArgs, header: &str, rows: &[(f64, f64)], meta: Value) -> CmdResult<()> {
    if args.svg.is_some() {
        return Err(input_error("svg output is only available for sensitivity maps"));
    }
    match ctx.format.unwrap_or(Format::Csv) {
        Format::Csv => {
            let mut out = format!("{header}\n");
            for (a, b) in rows {
                out.push_str(&format!("{a},{b}\n"));
            }
            ctx.emit(out.as_bytes())?;
            ctx.emit_sidecar(args.meta.as_deref(), &meta)
        }
        Format::Json => {
            let cols: Vec<&str> = header.split(',').collect();
            let rows: Vec<Value> = rows.iter().map(|(a, b)| json!({cols[0]: a, cols[1]: b})).collect();
            let mut doc = meta;
            doc["rows"] = Value::from(rows);
            ctx.emit(&to_json(&doc)?)
        }
        Format::Svg => Err(input_error("svg output is only available for sensitivity maps")),
    }
}

fn cmd_sensitivity(ctx: &Ctx, args: &SensitivityArgs) -> CmdResult<()> {
    let sample = if args.data.given() { Some(args.data.load()?) } else { None };
    let cfg = EstimatorConfig {
        e1: args.e1,
        seed: ctx.seed.unwrap_or(0),
        ..EstimatorConfig::default()
    };
    let named = |s: &CombinedSample| -> CmdResult<usize> {
        let name = args
            .covariate
            .as_ref()
            .ok_or_else(|| input_error(format!("--covariate is required for --pattern {:?}", args.pattern)))?;
        Ok(column_indices(s, std::slice::from_ref(name))?[0])
    };
    let need_data = |what: &str| input_error(format!("{what} requires --data or --rct/--obs"));
    match args.pattern {
        PatternChoice::TotallyMissing => {
            let (threshold, source) = match (args.threshold, &sample) {
                (Some(t), _) => (t, "supplied"),
                (None, Some(s)) => (default_threshold(s, &cfg)?, "abs(tau_obs - tau_dm)"),
                (None, None) => (0.0, "none"),
            };
            let name = args.covariate.clone().unwrap_or_else(|| "X_mis".into());
            if let (Some(s), Some(_)) = (&sample, &args.covariate) {
                if s.index_of(&name).is_some() {
                    let pattern = detect_pattern(s);
                    let j = named(s)?;
                    if !pattern.missing_at(transport_ate::MissingLocation::TotallyMissing).contains(&j) {
                        return Err(Error::PatternMismatch(format!("covariate '{name}' is observed in at least one stratum")).into());
                    }
                }
            }
            let mut grid = procedure_totally_missing(&name, args.delta_range.values(), args.shift_range.values(), threshold);
            grid.metadata.insert("threshold_source".into(), source.into());
            grid_output(ctx, args, &mut grid)
        }
        PatternChoice::MissingInRct => {
            let s = sample.as_ref().ok_or_else(|| need_data("--pattern missing-in-rct"))?;
            let j = named(s)?;
            let mut grid = procedure_missing_in_rct(
                s,
                j,
                args.delta_range.values(),
                args.shift_range.values(),
                args.threshold,
                &cfg,
            )?;
            match data_driven_delta(s, j, args.e1, args.stage1.into()) {
                Ok(d) => {
                    grid.metadata.insert("delta_hat".into(), d.delta.into());
                    grid.metadata.insert("delta_hat_se".into(), d.standard_error.into());
                }
                Err(e) => {
                    grid.metadata.insert("delta_hat_error".into(), e.to_string().into());
                }
            }
            grid_output(ctx, args, &mut grid)
        }
        PatternChoice::MissingInObs => {
            let s = sample.as_ref().ok_or_else(|| need_data("--pattern missing-in-obs"))?;
            let j = named(s)?;
            let range = args
                .expectations
                .ok_or_else(|| input_error("--expectations lo:hi:steps is required for --pattern missing-in-obs"))?;
            let ests = procedure_missing_in_obs(s, j, &range.values(), args.e1, args.stage1.into())?;
            let rows: Vec<(f64, f64)> = ests.iter().map(|e| (e.diagnostics["hypothesized_mean"], e.value)).collect();
            let first = &ests[0];
            let meta = json!({
                "metadata": ctx.provenance(),
                "pattern": "missing_in_observational",
                "covariate": s.names()[j],
                "delta_mis": first.diagnostics["delta_mis"],
                "delta_mis_se": first.diagnostics["delta_mis_se"],
                "covariates_used": first.covariates_used,
                "assumption": "CATE linear in the covariates",
            });
            rows_output(ctx, args, "hypothesized_mean,ate", &rows, meta)
        }
        PatternChoice::Proxy => {
            let range = args
                .sigma_prox
                .ok_or_else(|| input_error("--sigma-prox lo:hi:steps is required for --pattern proxy"))?;
            let sigmas = range.values();
            let mut meta = json!({
                "metadata": ctx.provenance(),
                "pattern": "proxy",
                "assumption": "proxy = missing covariate + independent noise",
            });
            let rows: Vec<(f64, f64)> = match &sample {
                None => {
                    let (delta, shift) = match (args.delta, args.shift) {
                        (Some(d), Some(s)) => (d, s),
                        _ => return Err(input_error("--pattern proxy without data needs --delta and --shift")),
                    };
                    let sigma_mis = args.sigma_mis.unwrap_or(1.0);
                    meta["delta_mis"] = delta.into();
                    meta["shift"] = shift.into();
                    meta["sigma_mis"] = sigma_mis.into();
                    meta["source"] = "hypothesised".into();
                    sigmas
                        .iter()
                        .map(|&sp| proxy_bias(delta, shift, sigma_mis, sp).map(|b| (sp, b)))
                        .collect::<Result<_, _>>()?
                }
                Some(s) => {
                    let j = named(s)?;
                    let var_prox = estimate_sigma(s, j)?.powi(2);
                    let mut out = Vec::with_capacity(sigmas.len());
                    let mut fitted = None;
                    for &sp in &sigmas {
                        let sigma_mis = match args.sigma_mis {
                            Some(v) => v,
                            None => {
                                let v = var_prox - sp * sp;
                                if !(v > 0.0) {
                                    return Err(Error::NonPositiveVariance(v).into());
                                }
                                v.sqrt()
                            }
                        };
                        let report = procedure_proxy(s, j, sigma_mis, sp, args.e1, args.stage1.into(), None)?;
                        out.push((sp, report.bias));
                        fitted.get_or_insert(report);
                    }
                    if let Some(r) = fitted {
                        meta["proxy"] = r.proxy.into();
                        meta["delta_prox_hat"] = r.delta_prox_hat.into();
                        meta["delta_prox_se"] = r.delta_prox_se.into();
                        meta["shift_prox"] = r.shift_prox.into();
                    }
                    meta["source"] = "estimated".into();
                    out
                }
            };
            rows_output(ctx, args, "sigma_prox,bias", &rows, meta)
        }
    }
}

fn cmd_simulate(ctx: &Ctx, args: &SimulateArgs) -> CmdResult<()> {
    let seed = ctx.require_seed("simulate")?;
    if args.reps == 0 {
        return Err(input_error("--reps must be at least 1"));
    }
    let mut result: ScenarioResult = match (&args.scenario, &args.spec) {
        (Some(name), _) => run_named(name, args.reps, seed)?,
        (None, Some(path)) => {
            let text = fs::read_to_string(path).map_err(|e| input_error(format!("cannot read {}: {e}", path.display())))?;
            let mut spec: ScenarioSpec = serde_json::from_str(&text).map_err(Error::from)?;
            spec.reps = args.reps;
            spec.seed = seed;
            let options = RunOptions {
                estimator: EstimatorConfig {
                    e1: spec.e1,
                    seed,
                    ..EstimatorConfig::default()
                },
                ..RunOptions::default()
            };
            let kinds = [
                EstimatorKind::Dm,
                EstimatorKind::GFormula,
                EstimatorKind::Ipsw,
                EstimatorKind::Aipsw,
            ];
            run_scenario(&spec, &standard_patterns_for(spec.p), &kinds, &options)?
        }
        (None, None) => return Err(input_error("give --scenario or --spec")),
    };
    result.metadata.insert("provenance".into(), ctx.provenance());
    for f in &result.failures {
        log::warn!("{f}");
    }
    let mut csv = Vec::new();
    result.write_csv(&mut csv)?;
    let table = result.summary_table();
    match ctx.format.unwrap_or(Format::Json) {
        Format::Json => ctx.emit(&to_json(&result)?)?,
        Format::Csv => {
            ctx.emit(&csv)?;
            ctx.emit_sidecar(None, &ctx.provenance())?;
        }
        Format::Svg => return Err(input_error("svg output is only available for sensitivity maps")),
    }
    let csv_path = args.csv.clone().or_else(|| match (&ctx.out, ctx.format.unwrap_or(Format::Json)) {
        (Some(o), Format::Json) => Some(o.with_extension("csv")),
        _ => None,
    });
    if let Some(p) = csv_path {
        write_file(&p, &csv)?;
    }
    if ctx.out.is_some() {
        print!("{table}");
    } else {
        eprint!("{table}");
    }
    Ok(())
}

/// Complete pattern plus dropping each covariate on its own.
fn standard_patterns_for(p: usize) -> Vec<transport_ate::simulation::PatternSpec> {
    if p == 5 {
        return standard_patterns();
    }
    let mut v = vec![transport_ate::simulation::PatternSpec::none()];
    v.extend((0..p).map(|j| transport_ate::simulation::PatternSpec::drop(&[j])));
    v
}

fn cmd_diagnose(ctx: &Ctx, args: &DiagnoseArgs) -> CmdResult<()> {
    let sample = args.data.load()?;
    let pattern = detect_pattern(&sample);
    let cols = match &args.covariates {
        Some(names) => {
            let cols = column_indices(&sample, names)?;
            for &j in &cols {
                if !pattern.obs_idx.contains(&j) {
                    return Err(Error::PatternMismatch(format!(
                        "covariate '{}' is not observed in both strata",
                        sample.names()[j]
                    ))
                    .into());
                }
            }
            cols
        }
        None => pattern.obs_idx.clone(),
    };
    if cols.is_empty() {
        return Err(Error::PatternMismatch("no covariate is observed in both strata".into()).into());
    }
    let boxm = box_m_between_strata(&sample, &cols)?;
    let cov_t = sample_covariance(&sample, sample.stratum_rows(Stratum::Trial), &cols);
    let cov_o = sample_covariance(&sample, sample.stratum_rows(Stratum::Observational), &cols);
    let names: Vec<&str> = cols.iter().map(|&j| sample.names()[j].as_str()).collect();
    let mut variance_ratios = BTreeMap::new();
    let mut pairs = Vec::new();
    for a in 0..cols.len() {
        variance_ratios.insert(names[a], cov_t[(a, a)] / cov_o[(a, a)]);
        for b in a + 1..cols.len() {
            pairs.push(json!({
                "pair": [names[a], names[b]],
                "covariance_trial": cov_t[(a, b)],
                "covariance_obs": cov_o[(a, b)],
                "correlation_trial": cov_t[(a, b)] / (cov_t[(a, a)] * cov_t[(b, b)]).sqrt(),
                "correlation_obs": cov_o[(a, b)] / (cov_o[(a, a)] * cov_o[(b, b)]).sqrt(),
            }));
        }
    }
    let doc = json!({
        "metadata": ctx.provenance(),
        "covariates": names,
        "n": sample.n(),
        "m": sample.m(),
        "box_m": boxm,
        "variance_ratio_trial_over_obs": variance_ratios,
        "pairs": pairs,
    });
    match ctx.format.unwrap_or(Format::Json) {
        Format::Json => ctx.emit(&to_json(&doc)?),
        _ => Err(input_error("diagnose writes json only")),
    }
}

fn run(cli: Cli) -> CmdResult<()> {
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| input_error(format!("thread pool: {e}")))?;
    }
    let ctx = Ctx {
        seed: cli.seed,
        out: cli.out.clone(),
        format: cli.format,
        config_hash: config_hash(&cli)?,
    };
    match &cli.command {
        Command::Estimate(a) => cmd_estimate(&ctx, a),
        Command::Sensitivity(a) => cmd_sensitivity(&ctx, a),
        Command::Simulate(a) => cmd_simulate(&ctx, a),
        Command::Diagnose(a) => cmd_diagnose(&ctx, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TRANSPORT_ATE_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
