//! Acceptance suite: one PASS/FAIL line per criterion at its pinned tolerance.
//!
//! Criteria whose pinned horizons need more particles than a desk machine can
//! hold are still run exactly as configured (with a small pilot ensemble so
//! they terminate); they fail on the population cap, and the printed analysis
//! says why. Clearly labelled supplementary checks run the same statistics at
//! horizons that fit in memory. Supplementary lines do not affect the exit
//! status.

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use bcl_core::moments::{mean_tt, second_moment};
use bcl_core::spectral::{closed_form_spectrum, galerkin_spectrum, max_principal_angle, split};
use bcl_core::stats::{ks_test, normal_cdf};
use bcl_core::verify::functional_moments;
use bcl_core::{FunctionExpansion, ModelSpec, OUParams, OffspringLaw, RateFn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde_json::Value;
use tempfile::TempDir;

/// Particle-state throughput measured on the reference machine, used only
/// for the cost estimates printed with infeasible criteria.
const STATES_PER_SECOND: f64 = 2.0e6;
const POP_CAP: usize = 2_000_000;

struct Suite {
    failures: Vec<u32>,
    scratch: TempDir,
}

impl Suite {
    fn record(&mut self, id: u32, title: &str, pass: bool, detail: String, elapsed: Duration) {
        let status = if pass { "PASS" } else { "FAIL" };
        println!("{status} criterion {id:>2}: {title} [{:.1} s]", elapsed.as_secs_f64());
        for line in detail.lines() {
            println!("      {line}");
        }
        if !pass {
            self.failures.push(id);
        }
    }

    fn supplementary(&self, title: &str, pass: bool, detail: String) {
        let status = if pass { "PASS" } else { "FAIL" };
        println!("  supplementary {status}: {title}");
        for line in detail.lines() {
            println!("      {line}");
        }
    }

    fn info(&self, title: &str, detail: String) {
        println!("  supplementary (informational): {title}");
        for line in detail.lines() {
            println!("      {line}");
        }
    }

    fn dir(&self, name: &str) -> String {
        let p = self.scratch.path().join(name);
        fs::create_dir_all(&p).unwrap();
        p.to_str().unwrap().to_owned()
    }
}

struct Run {
    code: i32,
    report: Option<Value>,
    stderr: String,
}

fn bcl(args: &[&str], out_dir: &str) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_bcl"))
        .args(args)
        .args(["--out", out_dir])
        .env_remove("BCL_THREADS")
        .output()
        .expect("bcl runs");
    let report = fs::read_to_string(Path::new(out_dir).join("report.json"))
        .ok()
        .and_then(|s| serde_json::from_str(&s).ok());
    Run { code: out.status.code().unwrap_or(-1), report, stderr: String::from_utf8_lossy(&out.stderr).into_owned() }
}

fn write_config(dir: &str, body: &str) -> String {
    let path = Path::new(dir).join("experiment.toml");
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_owned()
}

fn num(v: &Value, path: &[&str]) -> Option<f64> {
    path.iter().try_fold(v, |v, k| v.get(k)).and_then(Value::as_f64)
}

/// `(value, se)` of the empirical variance in a verify report.
fn variance(report: &Value) -> Option<(f64, f64)> {
    Some((num(report, &["empirical_variance", "value"])?, num(report, &["empirical_variance", "se"])?))
}

fn tallies(report: &Value) -> String {
    let e = &report["excluded"];
    format!("replicates {}, used {}, extinct {}, capped {}", e["n_replicates"], e["used"], e["extinct"], e["capped"])
}

fn model(beta: f64, pmf: &[f64]) -> ModelSpec {
    ModelSpec::new(OUParams::new(1.0, 1.0, 1).unwrap(), RateFn::Constant(beta), OffspringLaw::Fixed(pmf.to_vec())).unwrap()
}

fn level(m: &ModelSpec, k: usize) -> FunctionExpansion {
    let f = FunctionExpansion::from_eigen_combination(m.basis(), &[(k, 0, 1.0)]).unwrap();
    split(f, m.lambda1(), m.basis()).unwrap()
}

fn infeasibility(mean_population: f64, replicates: usize) -> String {
    let states = mean_population * replicates as f64;
    format!(
        "expected population per replicate {mean_population:.3e} exceeds pop_cap {POP_CAP} (~{:.1} GB of positions each);\n\
         a full ensemble of {replicates} needs ~{states:.2e} particle states ≈ {:.0} CPU-hours at {STATES_PER_SECOND:.0e}/s",
        mean_population * 8.0 / 1e9,
        states / STATES_PER_SECOND / 3600.0
    )
}

fn criterion_1(s: &mut Suite) {
    let start = Instant::now();
    let p = OUParams::new(1.0, 1.0, 1).unwrap();
    let exact = closed_form_spectrum(p, 0.8, 5).unwrap();
    let gal = galerkin_spectrum(p, &|_: &[f64]| 0.8, 40, 5).unwrap();
    let mut ev_err: f64 = 0.0;
    let mut angle: f64 = 0.0;
    for k in 0..5 {
        ev_err = ev_err.max((exact.eigenvalue(k) - gal.eigenvalue(k)).abs());
        angle = angle.max(max_principal_angle(&exact, &gal, k).unwrap());
    }
    let elapsed = start.elapsed();
    let pass = ev_err < 1e-8 && angle < 1e-6 && elapsed < Duration::from_secs(1);
    s.record(
        1,
        "Galerkin spectrum matches the closed form (constant α, N = 40, d = 1)",
        pass,
        format!("max |Δλ| = {ev_err:.2e} (< 1e-8), max principal angle = {angle:.2e} (< 1e-6), runtime < 1 s"),
        elapsed,
    );
}

fn criterion_2(s: &mut Suite) {
    let start = Instant::now();
    let m = model(2.0, &[0.0, 0.0, 1.0]);
    let one = level(&m, 0);
    let x0 = [0.5];
    let e = 1f64.exp();
    let exact = 2.0 * e.powi(4) - e * e;
    let q = second_moment(&m, &one, 1.0, &x0, 200).unwrap();
    let rel = (q.second_moment - exact).abs() / exact;
    let mc = functional_moments(&m, &one, 1.0, &x0, 10_000, POP_CAP, 2).unwrap();
    let z = (mc.second_moment.value - q.second_moment).abs() / mc.second_moment.se;
    let elapsed = start.elapsed();
    let pass = rel < 1e-6 && z <= 4.0 && mc.capped == 0 && elapsed < Duration::from_secs(60);
    s.record(
        2,
        "Yule second moment E⟨1,X_1⟩² = 2e⁴ − e²",
        pass,
        format!(
            "quadrature {} vs closed form {exact} (relative error {rel:.1e} < 1e-6)\n\
             Monte Carlo over 10^4 replicates {} ± {} ({z:.2} SE ≤ 4)",
            q.second_moment, mc.second_moment.value, mc.second_moment.se
        ),
        elapsed,
    );
}

fn criterion_3(s: &mut Suite) {
    let start = Instant::now();
    let x0 = [0.5];
    let cases = [
        ("small", model(1.0, &[0.2, 0.0, 0.8]), 4000),
        ("critical", model(2.0, &[0.0, 0.0, 1.0]), 2000),
        ("large", model(4.0, &[0.0, 0.0, 1.0]), 300),
    ];
    let mut pass = true;
    let mut detail = String::new();
    for (i, (name, m, n)) in cases.iter().enumerate() {
        let f = level(m, 1);
        for (j, t) in [1.0, 3.0].into_iter().enumerate() {
            let mc = functional_moments(m, &f, t, &x0, *n, POP_CAP, 30 + (2 * i + j) as u64).unwrap();
            let predicted = mean_tt(m, &f, t, &x0);
            let z = (mc.mean.value - predicted).abs() / mc.mean.se;
            let ok = z <= 4.0 && mc.capped == 0;
            pass &= ok;
            detail += &format!(
                "{name:>8} t = {t}: {} ± {} vs T_t f(x0) = {predicted:.6} ({z:.2} SE){}\n",
                mc.mean.value,
                mc.mean.se,
                if ok { "" } else { "  <-- outside 4 SE" }
            );
        }
    }
    let elapsed = start.elapsed();
    pass &= elapsed < Duration::from_secs(120);
    s.record(3, "mean-semigroup identity for the three regime presets at t ∈ {1, 3}", pass, detail, elapsed);
}

fn verdict_line(r: &Value, predicted: f64) -> String {
    let (v, se) = variance(r).unwrap_or((f64::NAN, f64::NAN));
    format!(
        "empirical variance {v:.4} ± {se:.4} vs {predicted} (ratio {:.3}); KS p = {:.3}; verdict {}\n{}",
        v / predicted,
        num(r, &["ks", "p_value"]).unwrap_or(f64::NAN),
        r["verdict"],
        tallies(r)
    )
}

fn criterion_4(s: &mut Suite) {
    let start = Instant::now();
    let dir = s.dir("c4");
    let run = bcl(&["verify", "--preset", "small"], &dir);
    let elapsed = start.elapsed();
    let (pass, detail) = match &run.report {
        Some(r) => {
            let used = r["excluded"]["used"].as_u64().unwrap_or(0);
            let ok = run.code == 0 && used >= 4000 && elapsed < Duration::from_secs(600);
            let checks: Vec<String> = r["checks"]
                .as_array()
                .into_iter()
                .flatten()
                .map(|c| format!("{} {} (limit {}) {}", c["name"], c["value"], c["limit"], if c["passed"] == true { "ok" } else { "FAIL" }))
                .collect();
            (ok, format!("{}\n{}", verdict_line(r, 15.0 / 7.0), checks.join("\n")))
        }
        None => (false, format!("no report (exit {}): {}", run.code, run.stderr)),
    };
    s.record(4, "small regime preset: variance within 10% of 15/7, KS p ≥ 0.01, W_t independence", pass, detail, elapsed);
}

/// Runs a preset exactly as configured except for the ensemble size, which
/// is cut to a pilot so the capped replicates are reached in seconds.
fn pilot(s: &Suite, preset: &str, dir: &str, replicates: usize) -> (Run, String) {
    let run = bcl(&["verify", "--preset", preset, "--replicates", &replicates.to_string()], &s.dir(dir));
    let summary = match &run.report {
        Some(r) => format!("pilot of {replicates}: exit {}, verdict {}; {}", run.code, r["verdict"], tallies(r)),
        None => format!("pilot of {replicates}: exit {}, {}", run.code, run.stderr.trim()),
    };
    (run, summary)
}

fn criterion_5(s: &mut Suite) {
    let start = Instant::now();
    let (run, summary) = pilot(s, "critical", "c5", 4);
    let pass = run.code == 0;
    let detail = format!("{summary}\n{}", infeasibility((20f64).exp(), 1000));
    s.record(5, "critical regime preset (t = 10): variance within 10% of ρ² = 4, KS p ≥ 0.01", pass, detail, start.elapsed());

    // the same statistic at horizons that fit in memory: the approach to ρ²
    // is slow, so the trend is printed rather than judged
    let dir = s.dir("c5-supp");
    let mut rows = Vec::new();
    for t in [3.0, 4.0, 5.0] {
        let body = format!(
            "[model]\nb = 1.0\nsigma2 = 1.0\nd = 1\nbeta = 2.0\noffspring = [0.0, 0.0, 1.0]\n\
             [function]\neigen = [{{ level = 2 }}]\n\
             [scenario]\nt = {t}\nreplicates = 1500\nseed = 505\nx0 = [0.5]\n"
        );
        let run = bcl(&["verify", "--config", &write_config(&dir, &body)], &dir);
        rows.push(match run.report.as_ref().and_then(variance) {
            Some((v, se)) => format!("t = {t}: empirical variance {v:.4} ± {se:.4} (ratio {:.3}, t·(ρ² − v) = {:.2})", v / 4.0, t * (4.0 - v)),
            None => format!("t = {t}: no report ({})", run.stderr.trim()),
        });
    }
    s.info("critical statistic at t ∈ {3, 4, 5} (1500 replicates each)", rows.join("\n"));
}

fn criterion_6(s: &mut Suite) {
    let start = Instant::now();
    let (phi2, phi2_summary) = pilot(s, "large", "c6", 4);
    let (phi1, phi1_summary) = pilot(s, "large-phi1", "c6-phi1", 4);
    let m = model(4.0, &[0.0, 0.0, 1.0]);
    let remark = bcl_core::moments::remark_phi1_variance(&m).unwrap();
    let beta2_phi1 = bcl_core::moments::beta2_large(&m, &level(&m, 0)).unwrap();
    let pass = phi2.code == 0 && phi1.code == 0;
    let detail = format!(
        "f = φ_2: {phi2_summary}\nf = φ_1: {phi1_summary}\n{}\n\
         φ_1 clause compares against A⟨φ_1³⟩/(−λ_1) = {remark}; the computed β² for φ_1 is {beta2_phi1}",
        infeasibility((28f64).exp(), 1000)
    );
    s.record(6, "large regime preset (t = 3, Δ = 4): variance within 15% of β² = 3; φ_1 case within 15% of 2", pass, detail, start.elapsed());

    let dir = s.dir("c6-supp");
    let body = "[model]\nb = 1.0\nsigma2 = 1.0\nd = 1\nbeta = 4.0\noffspring = [0.0, 0.0, 1.0]\n\
                [function]\neigen = [{ level = 2 }]\n\
                [scenario]\nt = 1.5\nextension = 1.0\nreplicates = 1000\nseed = 606\nx0 = [0.5]\nproxy_correction = true\n\
                [thresholds]\nvariance_rel_tol = 0.15\n";
    let run = bcl(&["verify", "--config", &write_config(&dir, body)], &dir);
    let (ok, detail) = match &run.report {
        Some(r) => {
            let tested = num(r, &["tested_variance"]).unwrap_or(f64::NAN);
            (run.code == 0, format!("finite-Δ target 3(1 − e^{{−2Δ}}) = {tested:.4}\n{}", verdict_line(r, tested)))
        }
        None => (false, run.stderr),
    };
    s.supplementary("large statistic for φ_2 at t = 1.5, Δ = 1 (1000 replicates), all checks", ok, detail);

    let body = "[model]\nb = 1.0\nsigma2 = 1.0\nd = 1\nbeta = 4.0\noffspring = [0.0, 0.0, 1.0]\n\
                [function]\neigen = [{ level = 1 }]\n\
                [scenario]\nt = 1.0\nextension = 1.0\nreplicates = 1000\nseed = 607\nx0 = [0.5]\nproxy_correction = true\n\
                [thresholds]\nvariance_rel_tol = 0.15\n";
    let run = bcl(&["verify", "--config", &write_config(&dir, body)], &dir);
    let (ok, detail) = match &run.report.as_ref().and_then(|r| variance(r).map(|v| (r, v))) {
        Some((r, (v, se))) => {
            let tested = num(r, &["tested_variance"]).unwrap_or(f64::NAN);
            let remark_corrected = remark * tested / beta2_phi1;
            (
                (v / tested - 1.0).abs() <= 0.15,
                format!(
                    "empirical variance {v:.4} ± {se:.4}; finite-Δ target for β² = {beta2_phi1}: {tested:.4} (ratio {:.3});\n\
                     same correction applied to {remark}: {remark_corrected:.4} (ratio {:.3}); {}",
                    v / tested,
                    v / remark_corrected,
                    tallies(r)
                ),
            )
        }
        None => (false, run.stderr),
    };
    s.supplementary("large statistic for φ_1 at t = 1, Δ = 1: variance within 15% of the finite-Δ target", ok, detail);
}

fn criterion_7(s: &mut Suite) {
    let start = Instant::now();
    let (run, summary) = pilot(s, "l2-convergence", "c7", 4);
    let pass = run.code == 0;
    s.record(
        7,
        "L² error of e^{λ_2 t}⟨f,X_t⟩ against the proxied limit decreases over t ∈ {1, 2, 3}",
        pass,
        format!("{summary}\n{}", infeasibility((28f64).exp(), 1000)),
        start.elapsed(),
    );

    let dir = s.dir("c7-supp");
    let body = "[model]\nb = 1.0\nsigma2 = 1.0\nd = 1\nbeta = 4.0\noffspring = [0.0, 0.0, 1.0]\n\
                [function]\neigen = [{ level = 2 }]\n\
                [scenario]\nt = 1.5\nextension = 1.0\nreplicates = 1000\nseed = 707\nx0 = [0.5]\n\
                proxy_correction = true\nl2_times = [0.5, 1.0, 1.5]\n\
                [thresholds]\nvariance_rel_tol = 0.15\n";
    let run = bcl(&["verify", "--config", &write_config(&dir, body)], &dir);
    let (ok, detail) = match run.report.as_ref().map(|r| &r["l2"]) {
        Some(l2) if l2.is_object() => {
            let rows: Vec<String> = l2["rows"]
                .as_array()
                .into_iter()
                .flatten()
                .map(|row| format!("t = {}: {} ± {}", row["t"], row["mean_square"]["value"], row["mean_square"]["se"]))
                .collect();
            (l2["monotone"] == true, format!("{}; capped {}", rows.join(", "), l2["capped"]))
        }
        _ => (false, run.stderr),
    };
    s.supplementary("L² decrease over t ∈ {0.5, 1, 1.5} with H_∞ proxied at 2.5", ok, detail);
}

fn criterion_8(s: &mut Suite) {
    let start = Instant::now();
    let base = bcl(&["verify", "--preset", "large-critical"], &s.dir("c8a"));
    let extra = bcl(&["verify", "--preset", "large-critical-extra"], &s.dir("c8b"));
    let elapsed = start.elapsed();
    let (pass, detail) = match (&base.report, &extra.report) {
        (Some(a), Some(b)) => {
            let rho2 = num(a, &["asymptotic_variance"]).unwrap_or(f64::NAN);
            let (va, sa) = variance(a).unwrap_or((f64::NAN, f64::NAN));
            let (vb, sb) = variance(b).unwrap_or((f64::NAN, f64::NAN));
            let within_a = (va / rho2 - 1.0).abs() <= 0.15;
            let within_b = (vb / rho2 - 1.0).abs() <= 0.15;
            let joint = (va - vb).abs() / rho2;
            let pass = within_a && within_b && joint <= 0.15;
            (
                pass,
                format!(
                    "ρ²_(c) = {rho2}\nf = φ_2 + φ_1:       {va:.4} ± {sa:.4} (ratio {:.3}); {}\n\
                     f = φ_2 + φ_1 + φ_4: {vb:.4} ± {sb:.4} (ratio {:.3}); {}\n\
                     |difference|/ρ² = {joint:.3} (≤ 0.15); difference in combined SE = {:.2}\n\
                     both runs share the slow finite-t approach of the t^{{-1/2}} statistic seen under criterion 5",
                    va / rho2,
                    tallies(a),
                    vb / rho2,
                    tallies(b),
                    (va - vb).abs() / (sa * sa + sb * sb).sqrt()
                ),
            )
        }
        _ => (false, format!("{}\n{}", base.stderr, extra.stderr)),
    };
    s.record(8, "λ_1 = 2λ_2 with mixed f: t^{-1/2} variance within 15% of ρ² and invariant under an added f_(l)", pass, detail, elapsed);
}

fn criterion_9(s: &mut Suite) {
    let start = Instant::now();
    let mut ks_p = Vec::new();
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // standardized Exp(1): mean 0, variance 1, but skewed
        let data: Vec<f64> = (0..1000).map(|_| { let e: f64 = Exp1.sample(&mut rng); e - 1.0 }).collect();
        ks_p.push(ks_test(&data, normal_cdf).p_value);
    }
    let ks_ok = ks_p.iter().all(|&p| p < 0.01);

    let dir = s.dir("c9");
    let preset = include_str!("../presets/small.toml");
    let cfg = write_config(&dir, &format!("{preset}\n[thresholds]\nvariance_override_factor = 4.0\n"));
    let codes: Vec<i32> = (1..=10u64)
        .map(|seed| bcl(&["verify", "--config", &cfg, "--replicates", "1000", "--seed", &seed.to_string()], &dir).code)
        .collect();
    let override_ok = codes.iter().all(|&c| c == 1);
    s.record(
        9,
        "negative controls: KS rejects exponential samples; ×4 variance override exits 1 on 10 seeds",
        ks_ok && override_ok,
        format!(
            "KS p-values (n = 1000): max {:.2e}\nverify exit codes with ×4 override (small preset, 1000 replicates): {codes:?}",
            ks_p.iter().cloned().fold(0.0, f64::max)
        ),
        start.elapsed(),
    );
}

fn criterion_10(s: &mut Suite) {
    let start = Instant::now();
    let mut pass = true;
    let mut detail = String::new();
    // the small preset runs in full; the critical and large presets hit the
    // population cap, so a short ensemble exercises the same code path
    for (preset, replicates) in [("small", None), ("critical", Some("3")), ("large", Some("3"))] {
        let mut csv = Vec::new();
        for threads in ["1", "8"] {
            let dir = s.dir(&format!("c10-{preset}-{threads}"));
            let mut args = vec!["verify", "--preset", preset, "--threads", threads];
            if let Some(n) = replicates {
                args.extend(["--replicates", n]);
            }
            let run = bcl(&args, &dir);
            csv.push((run.code, fs::read(Path::new(&dir).join("samples.csv")).unwrap_or_default()));
        }
        let same = !csv[0].1.is_empty() && csv[0] == csv[1];
        pass &= same;
        detail += &format!(
            "{preset:>8}{}: {} bytes, exit {} / {}, identical = {same}\n",
            replicates.map(|n| format!(" ({n} replicates)")).unwrap_or_default(),
            csv[0].1.len(),
            csv[0].0,
            csv[1].0
        );
    }
    s.record(10, "samples.csv byte-identical with --threads 1 and --threads 8", pass, detail, start.elapsed());
}

fn main() -> ExitCode {
    let mut suite = Suite { failures: Vec::new(), scratch: TempDir::new().expect("scratch directory") };
    criterion_1(&mut suite);
    criterion_2(&mut suite);
    criterion_3(&mut suite);
    criterion_4(&mut suite);
    criterion_5(&mut suite);
    criterion_6(&mut suite);
    criterion_7(&mut suite);
    criterion_8(&mut suite);
    criterion_9(&mut suite);
    criterion_10(&mut suite);
    if suite.failures.is_empty() {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria {:?}", suite.failures);
        ExitCode::FAILURE
    }
}
