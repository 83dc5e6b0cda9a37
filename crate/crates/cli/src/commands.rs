//! The four pipelines: spectrum, variance, simulate and verify.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use anyhow::Context;
use serde::Serialize;

use bcl_core::moments::{classify, mean_tt, MomentKernel};
use bcl_core::particle::{
    functional, martingale_w, simulate_ensemble, write_trajectory_header, write_trajectory_rows, Configuration, SimConfig,
};
use bcl_core::spectral::LevelClass;
use bcl_core::stats::{Estimate, SampleMoments};
use bcl_core::verify::{
    limit_law_tests, l2_convergence_check, write_histogram_csv, write_samples_csv, Check, EnsembleReport, L2Report, Scenario,
    StatisticKind, Verdict,
};
use bcl_core::{FunctionExpansion, ModelSpec};

use crate::config::ExperimentConfig;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Process exit codes.
pub mod exit {
    pub const PASS: u8 = 0;
    pub const FAIL: u8 = 1;
    pub const UNDERPOWERED: u8 = 2;
    pub const CONFIG: u8 = 64;
}

/// Failure of a command, split by whether the configuration is to blame.
#[derive(Debug)]
pub enum CliError {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::Runtime(_) => exit::FAIL,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "configuration error: {e:#}"),
            CliError::Runtime(e) => write!(f, "error: {e:#}"),
        }
    }
}

type CmdResult = Result<u8, CliError>;

fn config_err<E: Into<anyhow::Error>>(e: E) -> CliError {
    CliError::Config(e.into())
}

fn runtime_err<E: Into<anyhow::Error>>(e: E) -> CliError {
    CliError::Runtime(e.into())
}

/// Resolved inputs of a command: the effective configuration, where to
/// write, and its provenance stamp.
pub struct Run {
    pub config: ExperimentConfig,
    pub out_dir: PathBuf,
}

impl Run {
    fn hash(&self) -> String {
        self.config.hash()
    }

    fn prepare_dir(&self) -> Result<(), CliError> {
        fs::create_dir_all(&self.out_dir)
            .with_context(|| format!("creating {}", self.out_dir.display()))
            .map_err(runtime_err)
    }

    fn csv_header(&self) -> String {
        format!("# bcl {VERSION} config-sha256 {}\n", self.hash())
    }

    fn write_file(&self, name: &str, body: &[u8]) -> Result<(), CliError> {
        let path = self.out_dir.join(name);
        fs::write(&path, body).with_context(|| format!("writing {}", path.display())).map_err(runtime_err)
    }

    fn write_csv(&self, name: &str, body: &[u8]) -> Result<(), CliError> {
        let mut bytes = self.csv_header().into_bytes();
        bytes.extend_from_slice(body);
        self.write_file(name, &bytes)
    }

    fn write_json<T: Serialize>(&self, command: &str, payload: &T) -> Result<(), CliError> {
        #[derive(Serialize)]
        struct Envelope<'a, T> {
            tool: &'static str,
            version: &'static str,
            command: &'a str,
            config_sha256: String,
            #[serde(flatten)]
            payload: &'a T,
        }
        let env = Envelope { tool: "bcl", version: VERSION, command, config_sha256: self.hash(), payload };
        let mut text = serde_json::to_string_pretty(&env).map_err(runtime_err)?;
        text.push('\n');
        self.write_file("report.json", text.as_bytes())
    }

    fn model_and_function(&self) -> Result<(ModelSpec, FunctionExpansion), CliError> {
        let model = self.config.build_model().map_err(config_err)?;
        let f = self.config.build_function(&model).map_err(config_err)?;
        if let (Some(expected), true) = (&self.config.scenario.expect_regime, model.is_supercritical()) {
            let actual = classify(model.basis(), &f).map_err(config_err)?;
            if actual.as_str() != expected {
                return Err(config_err(anyhow::anyhow!(
                    "refusing to run: scenario.expect_regime is `{expected}` but f is in the {actual} regime"
                )));
            }
        }
        Ok((model, f))
    }
}

fn class_name(c: LevelClass) -> &'static str {
    match c {
        LevelClass::Small => "small",
        LevelClass::Critical => "critical",
        LevelClass::Large => "large",
    }
}

#[derive(Serialize)]
struct LevelRow {
    level: usize,
    eigenvalue: f64,
    multiplicity: usize,
    two_lambda_minus_lambda1: f64,
    class: &'static str,
    residual: f64,
}

#[derive(Serialize)]
struct SpectrumReport {
    source: String,
    lambda1: f64,
    levels: Vec<LevelRow>,
}

pub fn spectrum(run: &Run) -> CmdResult {
    let model = run.config.build_model().map_err(config_err)?;
    let basis = model.basis();
    let residuals = basis.eigen_residuals();
    let lambda1 = basis.lambda1();
    let levels: Vec<LevelRow> = (0..basis.num_levels())
        .map(|k| LevelRow {
            level: k + 1,
            eigenvalue: basis.eigenvalue(k),
            multiplicity: basis.multiplicity(k),
            two_lambda_minus_lambda1: 2.0 * basis.eigenvalue(k) - lambda1,
            class: class_name(basis.level_class(k)),
            residual: residuals[k],
        })
        .collect();
    println!("spectrum ({}), λ_1 = {lambda1}", basis.source());
    println!("{:>5} {:>22} {:>5} {:>22} {:>9} {:>10}", "level", "lambda_k", "n_k", "2lambda_k-lambda_1", "class", "residual");
    for r in &levels {
        println!(
            "{:>5} {:>22} {:>5} {:>22} {:>9} {:>10.2e}",
            r.level, r.eigenvalue, r.multiplicity, r.two_lambda_minus_lambda1, r.class, r.residual
        );
    }
    run.prepare_dir()?;
    run.write_json("spectrum", &SpectrumReport { source: basis.source().to_string(), lambda1, levels })?;
    Ok(exit::PASS)
}

#[derive(Serialize)]
struct VarianceReport {
    regime: String,
    statistic: String,
    t: f64,
    extension: f64,
    x0: Vec<f64>,
    predicted_variance: f64,
    quadrature_error: Option<f64>,
    proxy_corrected_variance: Option<f64>,
    eta2_at_x0: Option<f64>,
    truncation_warning: Option<String>,
    mean: f64,
    second_moment: f64,
    variance: f64,
    moment_error_estimate: f64,
}

fn require_supercritical(model: &ModelSpec) -> Result<(), CliError> {
    if model.is_supercritical() {
        Ok(())
    } else {
        Err(config_err(bcl_core::Error::NotSupercritical { lambda1: model.lambda1() }))
    }
}

pub fn variance(run: &Run) -> CmdResult {
    let (model, f) = run.model_and_function()?;
    require_supercritical(&model)?;
    let cfg = &run.config;
    let scenario = Scenario::new(model.clone(), f.clone(), cfg.scenario.t, cfg.extension(), 1).map_err(config_err)?;
    let kernel = MomentKernel::for_model(&model).map_err(runtime_err)?;
    let x0 = cfg.x0();
    let predicted = scenario.predicted_variance().map_err(runtime_err)?;
    let quadrature_error = match scenario.kind() {
        StatisticKind::Small => Some(kernel.sigma2_small_quadrature(&f).map_err(runtime_err)?.error),
        _ => None,
    };
    let (corrected, eta2) = if scenario.kind() == StatisticKind::Large {
        (Some(scenario.proxy_corrected_variance().map_err(runtime_err)?), Some(kernel.eta2_large(&f, &x0).map_err(runtime_err)?))
    } else {
        (None, None)
    };
    let moments = kernel.second_moment(&f, cfg.scenario.t, &x0, 400).map_err(runtime_err)?;
    let report = VarianceReport {
        regime: scenario.regime().to_string(),
        statistic: scenario.kind().to_string(),
        t: scenario.t(),
        extension: scenario.extension(),
        x0,
        predicted_variance: predicted,
        quadrature_error,
        proxy_corrected_variance: corrected,
        eta2_at_x0: eta2,
        truncation_warning: f.truncation_warning().map(str::to_string),
        mean: moments.mean,
        second_moment: moments.second_moment,
        variance: moments.variance,
        moment_error_estimate: moments.quadrature_error_estimate,
    };
    println!("regime: {} (statistic: {})", report.regime, report.statistic);
    println!("predicted variance: {}", report.predicted_variance);
    if let Some(e) = report.quadrature_error {
        println!("  quadrature cross-check error: {e:.3e}");
    }
    if let Some(c) = report.proxy_corrected_variance {
        println!("  with the H_(t+Δ) proxy at Δ = {}: {c}", report.extension);
    }
    if let Some(e) = report.eta2_at_x0 {
        println!("  η_f²(x0) = {e}");
    }
    if let Some(w) = &report.truncation_warning {
        eprintln!("warning: {w}");
    }
    println!(
        "at t = {}: E⟨f,X_t⟩ = {}, E⟨f,X_t⟩² = {}, Var = {} (error ≤ {:.3e})",
        report.t, report.mean, report.second_moment, report.variance, report.moment_error_estimate
    );
    run.prepare_dir()?;
    run.write_json("variance", &report)?;
    Ok(exit::PASS)
}

#[derive(Serialize)]
struct SnapshotSummary {
    t: f64,
    population: Option<Estimate>,
    functional: Option<Estimate>,
    predicted_functional_mean: f64,
    w: Option<Estimate>,
}

#[derive(Serialize)]
struct SimulateReport {
    replicates: usize,
    extinct: usize,
    capped: usize,
    horizon: f64,
    snapshots: Vec<SnapshotSummary>,
}

struct SimRow {
    extinct: bool,
    capped: bool,
    per_time: Vec<(usize, f64, f64)>,
    dump: Option<Vec<u8>>,
}

pub fn simulate(run: &Run) -> CmdResult {
    let (model, f) = run.model_and_function()?;
    let cfg = &run.config;
    let mut times: Vec<f64> = cfg.scenario.snapshot_times.clone();
    times.push(cfg.scenario.t);
    times.sort_by(f64::total_cmp);
    times.dedup();
    let horizon = *times.last().expect("at least the scenario time");
    let sim = SimConfig::new(&model, horizon, &times, cfg.scenario.pop_cap, cfg.scenario.seed).map_err(config_err)?;
    let x0 = cfg.x0();
    let init = Configuration::single(&x0);
    let coeffs = model.basis().hermite_coefficients(f.coeffs(), |_| 1.0);
    let hermite = model.basis().hermite();
    let want_dump = cfg.output.trajectory;
    let rows: Vec<SimRow> = simulate_ensemble(&model, &init, &sim, cfg.scenario.replicates, |i, traj| {
        let mut per_time = Vec::with_capacity(traj.snapshots.len());
        for snap in &traj.snapshots {
            let value = functional(snap, &|x: &[f64]| hermite.eval_sparse(&coeffs, x))?;
            per_time.push((snap.len(), value, martingale_w(snap, &model)));
        }
        let dump = if want_dump {
            let mut buf = Vec::new();
            write_trajectory_rows(&mut buf, i, &traj).expect("writing to memory");
            Some(buf)
        } else {
            None
        };
        Ok(SimRow { extinct: traj.extinct, capped: traj.capped, per_time, dump })
    })
    .map_err(runtime_err)?;

    let capped = rows.iter().filter(|r| r.capped).count();
    let extinct = rows.iter().filter(|r| r.extinct).count();
    let estimate = |v: Vec<f64>| (v.len() >= 2).then(|| SampleMoments::of(&v).mean);
    let snapshots: Vec<SnapshotSummary> = sim
        .snapshot_times
        .iter()
        .enumerate()
        .map(|(s, &t)| {
            let done: Vec<&SimRow> = rows.iter().filter(|r| !r.capped).collect();
            SnapshotSummary {
                t,
                population: estimate(done.iter().map(|r| r.per_time[s].0 as f64).collect()),
                functional: estimate(done.iter().map(|r| r.per_time[s].1).collect()),
                predicted_functional_mean: mean_tt(&model, &f, t, &x0),
                w: estimate(done.iter().map(|r| r.per_time[s].2).collect()),
            }
        })
        .collect();
    let report = SimulateReport { replicates: rows.len(), extinct, capped, horizon, snapshots };

    println!("{} replicates to t = {horizon}: {extinct} extinct, {capped} capped", report.replicates);
    for s in &report.snapshots {
        if let (Some(p), Some(v)) = (s.population, s.functional) {
            println!(
                "  t = {}: population {} ± {}, ⟨f,X_t⟩ {} ± {} (predicted {})",
                s.t, p.value, p.se, v.value, v.se, s.predicted_functional_mean
            );
        }
    }
    if capped > 0 {
        eprintln!(
            "WARNING: {capped} of {} replicates reached pop_cap = {} and are excluded from the summary",
            report.replicates, cfg.scenario.pop_cap
        );
    }

    run.prepare_dir()?;
    let mut csv = Vec::new();
    writeln!(csv, "replicate,snapshot_time,extinct,capped,population,functional,W").map_err(runtime_err)?;
    for (i, r) in rows.iter().enumerate() {
        for (s, &t) in sim.snapshot_times.iter().enumerate() {
            let (n, v, w) = r.per_time[s];
            writeln!(csv, "{i},{t},{},{},{n},{v},{w}", r.extinct, r.capped).map_err(runtime_err)?;
        }
    }
    run.write_csv("samples.csv", &csv)?;
    if want_dump {
        let mut dump = Vec::new();
        write_trajectory_header(&mut dump, model.ou().d()).map_err(runtime_err)?;
        for r in &rows {
            dump.extend_from_slice(r.dump.as_deref().unwrap_or_default());
        }
        run.write_csv("trajectory.csv", &dump)?;
    }
    run.write_json("simulate", &report)?;
    Ok(exit::PASS)
}

#[derive(Serialize)]
struct VerifyReport<'a> {
    regime: String,
    statistic: String,
    t: f64,
    extension: f64,
    seed: u64,
    replicates: usize,
    x0: Vec<f64>,
    asymptotic_variance: f64,
    proxy_bias_factor: f64,
    variance_override_factor: f64,
    tested_variance: f64,
    #[serde(flatten)]
    ensemble: &'a EnsembleReport,
    l2: Option<L2Report>,
}

pub fn verify(run: &Run) -> CmdResult {
    let (model, f) = run.model_and_function()?;
    require_supercritical(&model)?;
    let cfg = &run.config;
    let sc = &cfg.scenario;
    let scenario = Scenario::new(model.clone(), f.clone(), sc.t, cfg.extension(), sc.replicates)
        .and_then(|s| s.with_start(cfg.x0()))
        .map_err(config_err)?
        .with_pop_cap(sc.pop_cap)
        .with_seed(sc.seed)
        .with_survival_threshold(sc.survival_threshold);
    let asymptotic = scenario.predicted_variance().map_err(runtime_err)?;
    let baseline = if sc.proxy_correction { scenario.proxy_corrected_variance().map_err(runtime_err)? } else { asymptotic };
    let factor = cfg.thresholds.override_factor();
    let tested = baseline * factor;

    let dumps: Mutex<BTreeMap<usize, Vec<u8>>> = Mutex::new(BTreeMap::new());
    let samples = if cfg.output.trajectory {
        scenario.run_with(|i, traj| {
            let mut buf = Vec::new();
            write_trajectory_rows(&mut buf, i, traj).expect("writing to memory");
            dumps.lock().expect("no panics while holding the lock").insert(i, buf);
            Ok(())
        })
    } else {
        scenario.run()
    }
    .map_err(runtime_err)?;
    let mut ensemble = limit_law_tests(samples, tested, &cfg.thresholds.thresholds()).map_err(runtime_err)?;

    let l2 = if sc.l2_times.is_empty() {
        None
    } else {
        let r = l2_convergence_check(&model, &f, &sc.l2_times, cfg.extension(), &cfg.x0(), sc.replicates, sc.pop_cap, sc.seed)
            .map_err(config_err)?;
        let worst = r.decrements.iter().map(|d| d.value / d.se.max(f64::MIN_POSITIVE)).fold(f64::INFINITY, f64::min);
        let enough = r.n_replicates - r.capped >= cfg.thresholds.thresholds().min_samples;
        ensemble.checks.push(Check { name: "l2_decrement_in_se".into(), value: worst, limit: -2.0, passed: r.monotone });
        if !enough {
            ensemble.verdict = Verdict::Underpowered;
        } else if ensemble.verdict == Verdict::Pass && !r.monotone {
            ensemble.verdict = Verdict::Fail;
        }
        Some(r)
    };

    let report = VerifyReport {
        regime: scenario.regime().to_string(),
        statistic: scenario.kind().to_string(),
        t: scenario.t(),
        extension: scenario.extension(),
        seed: sc.seed,
        replicates: sc.replicates,
        x0: cfg.x0(),
        asymptotic_variance: asymptotic,
        proxy_bias_factor: scenario.proxy_bias_factor(),
        variance_override_factor: factor,
        tested_variance: tested,
        ensemble: &ensemble,
        l2,
    };

    print_verify_summary(&report);
    run.prepare_dir()?;
    let mut csv = Vec::new();
    write_samples_csv(&mut csv, &ensemble.samples).map_err(runtime_err)?;
    run.write_csv("samples.csv", &csv)?;
    let mut hist = Vec::new();
    write_histogram_csv(&mut hist, &ensemble, cfg.output.histogram_bins).map_err(runtime_err)?;
    run.write_csv("histogram.csv", &hist)?;
    if cfg.output.trajectory {
        let mut dump = Vec::new();
        write_trajectory_header(&mut dump, model.ou().d()).map_err(runtime_err)?;
        for buf in dumps.into_inner().expect("no panics while holding the lock").values() {
            dump.extend_from_slice(buf);
        }
        run.write_csv("trajectory.csv", &dump)?;
    }
    run.write_json("verify", &report)?;
    Ok(match ensemble.verdict {
        Verdict::Pass => exit::PASS,
        Verdict::Fail => exit::FAIL,
        Verdict::Underpowered => exit::UNDERPOWERED,
    })
}

fn print_verify_summary(r: &VerifyReport<'_>) {
    let e = r.ensemble;
    println!("regime {} / statistic {} at t = {}, Δ = {}", r.regime, r.statistic, r.t, r.extension);
    println!(
        "replicates {}: used {}, extinct {}, capped {}",
        e.excluded.n_replicates, e.excluded.used, e.excluded.extinct, e.excluded.capped
    );
    if e.excluded.capped > 0 {
        eprintln!("WARNING: {} replicates reached the population cap and were excluded", e.excluded.capped);
    }
    println!("tested variance {} (asymptotic {}, factor {})", r.tested_variance, r.asymptotic_variance, r.variance_override_factor);
    if let Some(v) = e.empirical_variance {
        println!("empirical variance {} ± {}", v.value, v.se);
    }
    for c in &e.checks {
        println!("  [{}] {} = {} (limit {})", if c.passed { "ok" } else { "FAIL" }, c.name, c.value, c.limit);
    }
    if let Some(l2) = &r.l2 {
        for row in &l2.rows {
            println!("  L² at t = {}: {} ± {}", row.t, row.mean_square.value, row.mean_square.se);
        }
    }
    println!("verdict: {:?}", e.verdict);
}

/// Output directory: `--out`, else `output.dir` from the configuration.
pub fn resolve_out(config: &ExperimentConfig, out: Option<&Path>) -> PathBuf {
    out.map(Path::to_path_buf).unwrap_or_else(|| config.output.dir.clone())
}
