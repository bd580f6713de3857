//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on failure.
//!
//! Run with `cargo test -p riccati-lqr-cli --test acceptance`.

use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::{ensure, Result};

use riccati_lqr::config::ProblemConfig;
use riccati_lqr::riccati::{solve_dre_backward, solve_ire_picard};
use riccati_lqr::verify::{VerificationReport, VerifyContext};
use riccati_lqr::EvolutionTable;
use riccati_lqr_cli::{cmd_solve, cmd_verify, sweep_table, RunOptions, SweepParameter, SWEEP_COLUMNS};

const SEED: u64 = 20_241_015;

fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(format!("{name}.json"))
}

fn config(name: &str) -> Result<ProblemConfig> {
    Ok(ProblemConfig::load(&config_path(name))?)
}

fn context(name: &str) -> Result<VerifyContext> {
    Ok(VerifyContext::from_config(&config(name)?, SEED, 0.0)?)
}

/// Largest residual over checks whose name satisfies `pick`; NaN counts as infinite.
fn worst(r: &VerificationReport, pick: impl Fn(&str) -> bool) -> f64 {
    r.checks
        .iter()
        .filter(|c| pick(&c.name))
        .map(|c| if c.residual.is_nan() { f64::INFINITY } else { c.residual })
        .fold(0.0, f64::max)
}

fn count(r: &VerificationReport, pick: impl Fn(&str) -> bool) -> usize {
    r.checks.iter().filter(|c| pick(&c.name)).count()
}

type Verdict = Result<(bool, String)>;
type Criterion = (&'static str, fn() -> Verdict);

/// `P(0)` of `P' = P² + 2P`, `P(1) = 1`: with `w = 1/P`, `w' = −1 − 2w`.
fn logistic_p0() -> f64 {
    let e2 = std::f64::consts::E.powi(2);
    2.0 / (3.0 * e2 - 1.0)
}

fn scalar_closed_form() -> Verdict {
    let cfg = config("logistic")?;
    ensure!(cfg.grid.node_count == 513);
    let start = Instant::now();
    let spec = cfg.build()?;
    let table = EvolutionTable::build(&spec.a)?;
    let p = solve_dre_backward(&spec, &table)?;
    let q = solve_ire_picard(&spec, &table)?;
    let elapsed = start.elapsed().as_secs_f64();
    let oracle = logistic_p0();
    let (dp, dq) = ((p.at(0)[(0, 0)] - oracle).abs(), (q.at(0)[(0, 0)] - oracle).abs());
    Ok((
        dp <= 1e-6 && dq <= 1e-6 && elapsed < 1.0,
        format!(
            "P(0) oracle {oracle:.9}, |dre-oracle| {dp:.2e}, |ire-oracle| {dq:.2e} (<= 1e-6), {elapsed:.3} s (< 1 s)"
        ),
    ))
}

fn lyapunov() -> Verdict {
    let spec = config("lyapunov")?.build()?;
    let table = EvolutionTable::build(&spec.a)?;
    let p = solve_dre_backward(&spec, &table)?;
    let q = solve_ire_picard(&spec, &table)?;
    // P' = 2P − 1, P(1) = 0
    let oracle = (1.0 - (-2.0_f64).exp()) / 2.0;
    let (dp, dq) = ((p.at(0)[(0, 0)] - oracle).abs(), (q.at(0)[(0, 0)] - oracle).abs());
    Ok((
        dp <= 1e-8 && dq <= 1e-8 && q.iterations == 1,
        format!(
            "|dre-oracle| {dp:.2e}, |ire-oracle| {dq:.2e} (<= 1e-8), picard iterations {} (== 1)",
            q.iterations
        ),
    ))
}

fn sandwich() -> Verdict {
    let start = Instant::now();
    let mut ok = true;
    let mut detail = Vec::new();
    let col = SWEEP_COLUMNS
        .iter()
        .position(|c| *c == "sandwich_gap")
        .expect("column exists");
    for (name, tol) in [("logistic", 1e-6), ("heat8", 1e-4)] {
        let ctx = context(name)?;
        ensure!(ctx.spec.grid().len() == 513);
        let r = ctx.run("sandwich")?;
        let gap = worst(&r, |n| n.ends_with(".gap"));
        let table = sweep_table(&config(name)?, SweepParameter::NodeCount, &[129.0, 257.0, 513.0], SEED)?;
        let orders: Vec<f64> = (1..3).map(|i| table.order(i, col).unwrap_or(f64::NAN)).collect();
        let min_order = orders.iter().copied().fold(f64::INFINITY, f64::min);
        ok &= gap <= tol && min_order >= 1.5;
        detail.push(format!(
            "{name} sup gap {gap:.2e} (<= {tol:.0e}), orders {:.2}/{:.2} (>= 1.5)",
            orders[0], orders[1]
        ));
    }
    let elapsed = start.elapsed().as_secs_f64();
    ok &= elapsed < 300.0;
    detail.push(format!("{elapsed:.1} s (< 300 s)"));
    Ok((ok, detail.join("; ")))
}

fn fundamental_identity() -> Verdict {
    let mut ok = true;
    let mut detail = Vec::new();
    for name in ["logistic", "lyapunov", "diagonal", "heat8"] {
        let ctx = context(name)?;
        let r = ctx.run("fundamental-identity")?;
        let draws = count(&r, |n| n.starts_with("fundamental.draw"));
        let gap = worst(&r, |n| n.starts_with("fundamental.draw"));
        let detected = r.metrics["fundamental.detection_gap"];
        ok &= draws == 100 && gap <= 1e-5 && detected > 1e-2;
        detail.push(format!(
            "{name} {draws} draws max gap {gap:.2e} (<= 1e-5), perturbed {detected:.2e} (> 1e-2)"
        ));
    }
    Ok((ok, detail.join("; ")))
}

fn equivalent_forms() -> Verdict {
    let mut ok = true;
    let mut detail = Vec::new();
    for name in ["logistic", "lyapunov"] {
        let r = context(name)?.run("equivalent-forms")?;
        let draws = count(&r, |n| n.starts_with("equivalent.draw"));
        let gap = worst(&r, |n| n.starts_with("equivalent.draw"));
        ok &= draws == 100 && gap <= 1e-6;
        detail.push(format!(
            "{name} {draws} draws max of three residuals {gap:.2e} (<= 1e-6)"
        ));
    }
    Ok((ok, detail.join("; ")))
}

fn limit_ladder() -> Verdict {
    let mut ok = true;
    let mut detail = Vec::new();
    for name in ["logistic", "heat8"] {
        let r = context(name)?.run("limits")?;
        let cauchy = worst(&r, |n| n.starts_with("limits.cauchy"));
        let fact = worst(&r, |n| n == "limits.b_equals_ctc");
        let range = worst(&r, |n| n == "limits.range");
        let mono = worst(&r, |n| n == "limits.monotone");
        let present = [
            "limits.cauchy_b",
            "limits.cauchy_c",
            "limits.b_equals_ctc",
            "limits.range",
            "limits.monotone",
        ]
        .iter()
        .all(|k| count(&r, |n| n == *k) == 1);
        ok &= present && cauchy <= 1e-8 && fact <= 1e-6 && range <= 1e-8 && mono <= 1e-10;
        detail.push(format!(
            "{name} cauchy {cauchy:.1e} (<= 1e-8), |B-C*C| {fact:.1e} (<= 1e-6), |(I-Pi)C| {range:.1e} (<= 1e-8), rise {mono:.1e} (<= 1e-10)"
        ));
    }
    Ok((ok, detail.join("; ")))
}

fn admissibility() -> Verdict {
    let mut ok = true;
    let mut detail = Vec::new();
    for name in ["logistic", "heat8"] {
        let r = context(name)?.run("admissibility")?;
        let vector = worst(&r, |n| n.ends_with("admissibility.endpoint"));
        let path = worst(&r, |n| n.ends_with("admissibility.representation"));
        let probes = count(&r, |n| n.ends_with("admissibility.endpoint"));
        ok &= probes > 0 && vector <= 1e-5 && path <= 1e-4;
        detail.push(format!(
            "{name} {probes} probes, vector {vector:.1e} (<= 1e-5), path {path:.1e} (<= 1e-4)"
        ));
    }
    Ok((ok, detail.join("; ")))
}

fn py_continuity() -> Verdict {
    let base = config("heat16_rough")?;
    let mut moduli = Vec::new();
    let mut endpoint = 0.0;
    for nodes in [129, 257, 513] {
        let ctx = VerifyContext::from_config(&base.with_node_count(nodes)?, SEED, 0.0)?;
        let r = ctx.run("py-continuity")?;
        moduli.push(r.metrics["probe0.py_continuity.modulus_final_decile"]);
        if nodes == 513 {
            endpoint = worst(&r, |n| n.ends_with("py_continuity.endpoint"));
        }
    }
    let decreasing = moduli.windows(2).all(|w| w[1] < w[0]);
    Ok((
        endpoint <= 1e-5 && decreasing,
        format!(
            "endpoint |P^(1/2)y(T) - C(s)x| {endpoint:.1e} (<= 1e-5); final-decile modulus {:.3e} -> {:.3e} -> {:.3e} (decreasing)",
            moduli[0], moduli[1], moduli[2]
        ),
    ))
}

fn tails() -> Verdict {
    let mut ok = true;
    let mut detail = Vec::new();
    for name in ["logistic", "heat8_zero_terminal"] {
        let ctx = context(name)?;
        ensure!(ctx.settings.tail_ladder == [0.2, 0.1, 0.05, 0.025]);
        let r = ctx.run("tails")?;
        let rise = worst(&r, |n| n.ends_with(".monotone"));
        let monotone = count(&r, |n| n.ends_with(".monotone"));
        let slope_fail = worst(&r, |n| n.ends_with(".slope"));
        let m_slopes: Vec<String> = r
            .slopes
            .iter()
            .filter(|s| s.name.starts_with("tails.m_"))
            .map(|s| format!("{} {:.2}", s.name.trim_start_matches("tails."), s.slope))
            .collect();
        let vanishing = r
            .metrics
            .iter()
            .filter(|(k, _)| k.starts_with("tails.m_"))
            .all(|(_, v)| *v == 0.0);
        ok &= monotone == 4 && rise <= 1e-10 && slope_fail <= 0.0 && (vanishing || m_slopes.len() == 2);
        let slopes = if vanishing {
            "M-tails vanish identically (M = 0)".to_string()
        } else {
            format!("slopes {}", m_slopes.join(", "))
        };
        detail.push(format!(
            "{name} 4 tails max rise {rise:.1e} (<= 1e-10), {slopes} (>= {:.2})",
            2.0 * ctx.spec.alpha - 0.1
        ));
    }
    // Reported for context: with a nonzero final cost the N-tails are not yet monotone on this ladder.
    let r = context("heat8")?.run("tails")?;
    let m_slope = r
        .slopes
        .iter()
        .find(|s| s.name == "tails.m_free")
        .map_or(f64::NAN, |s| s.slope);
    detail.push(format!(
        "info heat8 (P_T = hI): M-tails monotone {}, m_free slope {m_slope:.2}, N-tail max rise {:.1e}",
        worst(&r, |n| n.starts_with("tails.m_") && n.ends_with(".monotone")) <= 1e-10,
        worst(&r, |n| n.starts_with("tails.n_") && n.ends_with(".monotone"))
    ));
    Ok((ok, detail.join("; ")))
}

fn symmetrization() -> Verdict {
    let mut ok = true;
    let mut detail = Vec::new();
    for (name, nodes) in [("logistic", 513), ("heat8", 1025)] {
        let cfg = config(name)?.with_node_count(nodes)?;
        let r = VerifyContext::from_config(&cfg, SEED, 0.0)?.run("symmetrization")?;
        let draws = count(&r, |n| n.starts_with("symmetrization.draw"));
        let gap = worst(&r, |_| true);
        ok &= draws == 20 && gap <= 1e-6;
        detail.push(format!(
            "{name} at {nodes} nodes, {draws} draws max gap {gap:.2e} (<= 1e-6)"
        ));
    }
    Ok((ok, detail.join("; ")))
}

fn determinism() -> Verdict {
    let tmp = tempfile::tempdir()?;
    let mut identical = true;
    let mut files = 0;
    for (name, suites) in [
        ("logistic", vec![]),
        ("heat8", vec!["fundamental-identity".to_string(), "limits".to_string()]),
    ] {
        let run = |dir: &str| {
            cmd_verify(&RunOptions {
                config: config_path(name),
                out: tmp.path().join(name).join(dir),
                seed: SEED,
                suites: suites.clone(),
                ..RunOptions::default()
            })
        };
        let (a, b) = (run("a")?, run("b")?);
        for (fa, fb) in a.files.iter().zip(&b.files) {
            if fa.file_name().is_some_and(|n| n == "manifest.json") {
                continue;
            }
            identical &= fs::read(fa)? == fs::read(fb)?;
            files += 1;
        }
        identical &= a.files.len() == b.files.len();
    }
    let solve = |dir: &str| {
        cmd_solve(&RunOptions {
            config: config_path("logistic"),
            out: tmp.path().join("solve").join(dir),
            seed: SEED,
            ..RunOptions::default()
        })
    };
    let (a, b) = (solve("a")?, solve("b")?);
    for (fa, fb) in a
        .files
        .iter()
        .zip(&b.files)
        .filter(|(f, _)| !f.ends_with("manifest.json"))
    {
        identical &= fs::read(fa)? == fs::read(fb)?;
        files += 1;
    }
    Ok((
        identical && files > 0,
        format!("{files} report and data files byte-identical across two runs: {identical}"),
    ))
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("scalar closed-form Riccati", scalar_closed_form),
        ("Lyapunov degenerate case", lyapunov),
        ("uniqueness sandwich", sandwich),
        ("fundamental identity", fundamental_identity),
        ("equivalent forms", equivalent_forms),
        ("limit-operator ladder", limit_ladder),
        ("admissibility identities", admissibility),
        ("continuity of P^(1/2) y", py_continuity),
        ("vanishing tails", tails),
        ("symmetrization identity", symmetrization),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (k, (name, run)) in criteria.iter().enumerate() {
        let (pass, detail) = run().unwrap_or_else(|e| (false, format!("error: {e:#}")));
        failed += usize::from(!pass);
        println!(
            "{} criterion {:>2} {name}: {detail}",
            if pass { "PASS" } else { "FAIL" },
            k + 1
        );
    }
    println!(
        "acceptance: {}/{} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
