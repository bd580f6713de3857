//! Named verification suites over one solved problem.

use std::sync::OnceLock;

use rand::Rng;
use rayon::prelude::*;

use crate::closed_loop::{solve_phi, ClosedLoopFlow};
use crate::config::{ProblemConfig, VerifySettings};
use crate::error::{Error, Result};
use crate::evolution::EvolutionTable;
use crate::linalg::Vector;
use crate::problem::{validate_hypotheses, ProblemSpec};
use crate::riccati::{class_q_certificate, solve_dre_backward, solve_ire_picard, RiccatiSolution};

use super::probes::{probe_vectors, random_control, random_symmetric_path, stream, unit_vector};
use super::*;

/// Suite names in the order an empty selection runs them.
pub const SUITES: [&str; 12] = [
    "hypotheses",
    "value",
    "fundamental-identity",
    "equivalent-forms",
    "optimality",
    "symmetrization",
    "sandwich",
    "limits",
    "tails",
    "bc-link",
    "admissibility",
    "py-continuity",
];

/// Expands an empty selection to every suite and rejects unknown names.
pub fn resolve_suites(requested: &[String]) -> Result<Vec<&'static str>> {
    if requested.is_empty() {
        return Ok(SUITES.to_vec());
    }
    let mut out = Vec::new();
    for name in requested {
        let found = SUITES
            .iter()
            .find(|s| **s == name.as_str())
            .ok_or_else(|| Error::Config {
                key: "suites".into(),
                detail: format!("unknown suite {name:?}; available: {}", SUITES.join(", ")),
            })?;
        if !out.contains(found) {
            out.push(*found);
        }
    }
    Ok(out)
}

/// A solved problem plus everything the suites share.
///
/// The candidate solution checked by the identity suites is the DRE solution
/// shifted by `perturb · I`; the sandwich suite shifts the Picard solution
/// instead. Flows and limit operators at the anchor are built on first use.
pub struct VerifyContext {
    pub spec: ProblemSpec,
    pub table: EvolutionTable,
    pub p: RiccatiSolution,
    pub seed: u64,
    pub tol: Tolerances,
    pub settings: VerifySettings,
    pub perturb: f64,
    candidate: RiccatiSolution,
    q_ire: OnceLock<RiccatiSolution>,
    flow: OnceLock<ClosedLoopFlow>,
    lims: OnceLock<LimitOperators>,
}

impl VerifyContext {
    pub fn new(spec: ProblemSpec, seed: u64, tol: Tolerances, settings: VerifySettings, perturb: f64) -> Result<Self> {
        let table = EvolutionTable::build(&spec.a)?;
        let p = solve_dre_backward(&spec, &table)?;
        let candidate = if perturb == 0.0 {
            p.clone()
        } else {
            p.perturbed(perturb)
        };
        Ok(Self {
            spec,
            table,
            p,
            seed,
            tol,
            settings,
            perturb,
            candidate,
            q_ire: OnceLock::new(),
            flow: OnceLock::new(),
            lims: OnceLock::new(),
        })
    }

    pub fn from_config(cfg: &ProblemConfig, seed: u64, perturb: f64) -> Result<Self> {
        Self::new(cfg.build()?, seed, cfg.tolerances.clone(), cfg.verify.clone(), perturb)
    }

    /// The solution the identity suites are run against.
    pub fn candidate(&self) -> &RiccatiSolution {
        &self.candidate
    }

    pub fn q_ire(&self) -> Result<&RiccatiSolution> {
        if let Some(q) = self.q_ire.get() {
            return Ok(q);
        }
        let q = solve_ire_picard(&self.spec, &self.table)?;
        Ok(self.q_ire.get_or_init(|| q))
    }

    pub fn anchor_node(&self) -> usize {
        self.spec
            .grid()
            .nearest(self.settings.anchor)
            .min(self.spec.grid().last_index() - 1)
    }

    pub fn flow(&self) -> Result<&ClosedLoopFlow> {
        if let Some(f) = self.flow.get() {
            return Ok(f);
        }
        let f = solve_phi(&self.spec, &self.table, &self.candidate, self.anchor_node())?;
        Ok(self.flow.get_or_init(|| f))
    }

    pub fn limits(&self) -> Result<&LimitOperators> {
        if let Some(l) = self.lims.get() {
            return Ok(l);
        }
        let ladder = EpsLadder::geometric(self.spec.grid(), self.settings.eps0)?;
        let l = limit_operators(
            &self.spec,
            &self.table,
            &self.candidate,
            self.flow()?,
            &ladder,
            &self.probes("limits"),
            self.tol.limit_cauchy,
            &LimitOptions::default(),
        )?;
        Ok(self.lims.get_or_init(|| l))
    }

    pub fn probes(&self, label: &str) -> Vec<Vector> {
        probe_vectors(self.spec.state_dim, self.seed, label)
    }

    /// Up to four anchors spread over `[anchor, T)`, first one the anchor.
    pub fn anchors(&self) -> Vec<usize> {
        let grid = self.spec.grid();
        let s = self.anchor_node();
        let span = grid.end() - grid.node(s);
        let mut out: Vec<usize> = (0..4)
            .map(|k| {
                grid.nearest(grid.node(s) + span * k as f64 / 4.0)
                    .min(grid.last_index() - 1)
            })
            .collect();
        out.dedup();
        out
    }

    pub fn run(&self, suite: &str) -> Result<VerificationReport> {
        match suite {
            "hypotheses" => self.hypotheses(),
            "value" => self.value(),
            "fundamental-identity" => self.fundamental(),
            "equivalent-forms" => self.equivalent(),
            "optimality" => self.optimality(),
            "symmetrization" => self.symmetrization(),
            "sandwich" => self.sandwich(),
            "limits" => {
                let mut r = VerificationReport::new("limits");
                limit_checks(self.limits()?, &self.tol, &mut r);
                Ok(r)
            }
            "tails" => self.tails(),
            "bc-link" => self.bc_link(),
            "admissibility" => self.admissibility(),
            "py-continuity" => self.py_continuity(),
            other => resolve_suites(&[other.to_string()]).map(|_| unreachable!("every listed suite is handled")),
        }
    }

    /// Runs the selection in order; an empty selection runs all suites.
    pub fn run_all(&self, requested: &[String]) -> Result<Vec<VerificationReport>> {
        resolve_suites(requested)?.into_iter().map(|s| self.run(s)).collect()
    }

    fn hypotheses(&self) -> Result<VerificationReport> {
        let mut r = VerificationReport::new("hypotheses");
        let h = validate_hypotheses(&self.spec, Some(&self.table))?;
        for c in &h.checks {
            let name = format!("hypothesis.{}", c.hypothesis);
            r.check(
                &name,
                digest(&name, &[c.witness]),
                if c.passed { 0.0 } else { 1.0 },
                0.0,
            );
            r.metric(format!("{name}.witness"), c.witness);
        }
        let cert = class_q_certificate(&self.p, &self.spec)?;
        r.check(
            "class_q.certificate",
            digest("class_q", &[cert.certificate]),
            if cert.certificate.is_finite() { 0.0 } else { 1.0 },
            0.0,
        );
        r.metric("class_q.certificate", cert.certificate);
        Ok(r)
    }

    fn value(&self) -> Result<VerificationReport> {
        let mut r = VerificationReport::new("value");
        let flow = self.flow()?;
        let probes = self.probes("value");
        let gaps: Vec<f64> = probes
            .par_iter()
            .map(|x| value_identity(&self.spec, &self.table, &self.candidate, flow, x))
            .collect::<Result<_>>()?;
        for (k, (x, g)) in probes.iter().zip(gaps).enumerate() {
            r.check(
                format!("value.probe{k:02}"),
                digest("value", x.as_slice()),
                g,
                self.tol.value,
            );
        }
        Ok(r)
    }

    /// Random anchor node `s`, truncation node `T−ε` after it.
    fn draw_window(&self, rng: &mut impl Rng) -> (usize, usize) {
        let grid = self.spec.grid();
        let last = grid.last_index();
        let s0 = self.anchor_node();
        let s = rng.random_range(s0..last);
        let end = rng.random_range(s + 1..=last);
        (s, end)
    }

    fn fundamental(&self) -> Result<VerificationReport> {
        let mut r = VerificationReport::new("fundamental_identity");
        let d = self.spec.state_dim;
        let grid = self.spec.grid().clone();
        let shifted = self.candidate.perturbed(self.settings.detection_perturbation);
        let draws: Vec<(String, f64, f64)> = (0..self.settings.draws)
            .into_par_iter()
            .map(|i| -> Result<(String, f64, f64)> {
                let mut rng = stream(self.seed, &format!("fundamental/{i}"));
                let (s, end) = self.draw_window(&mut rng);
                let x = unit_vector(&mut rng, d);
                let u = random_control(&mut rng, &grid, s, self.spec.control_dim);
                let gap = fundamental_identity(&self.spec, &self.table, &self.candidate, &x, &u, end)?.gap();
                let detected = fundamental_identity(&self.spec, &self.table, &shifted, &x, &u, end)?.gap();
                let mut inputs = vec![s as f64, end as f64];
                inputs.extend(x.iter());
                Ok((digest("fundamental", &inputs), gap, detected))
            })
            .collect::<Result<_>>()?;
        let mut detected = 0.0_f64;
        for (i, (dg, gap, det)) in draws.into_iter().enumerate() {
            r.check(format!("fundamental.draw{i:03}"), dg, gap, self.tol.fundamental);
            detected = detected.max(det);
        }
        let delta = self.settings.detection_perturbation;
        r.check(
            "fundamental.detection",
            digest("detection", &[delta]),
            if detected > 0.0 {
                self.tol.detection / detected
            } else {
                f64::INFINITY
            },
            1.0,
        );
        r.metric("fundamental.detection_gap", detected);
        r.note(format!(
            "detection shifts the candidate by {delta}·I; residual is tolerance / largest shifted gap"
        ));
        Ok(r)
    }

    fn anchor_flows(&self) -> Result<Vec<ClosedLoopFlow>> {
        self.anchors()
            .par_iter()
            .map(|&s| {
                if s == self.anchor_node() {
                    self.flow().cloned()
                } else {
                    solve_phi(&self.spec, &self.table, &self.candidate, s)
                }
            })
            .collect()
    }

    fn equivalent(&self) -> Result<VerificationReport> {
        let mut r = VerificationReport::new("equivalent_forms");
        let flows = self.anchor_flows()?;
        let d = self.spec.state_dim;
        let last = self.spec.grid().last_index();
        let draws: Vec<(String, EquivalentForms)> = (0..self.settings.draws)
            .into_par_iter()
            .map(|i| -> Result<(String, EquivalentForms)> {
                let mut rng = stream(self.seed, &format!("equivalent/{i}"));
                let flow = &flows[rng.random_range(0..flows.len())];
                let end = rng.random_range(flow.anchor() + 1..=last);
                let (x, y) = (unit_vector(&mut rng, d), unit_vector(&mut rng, d));
                let forms = equivalent_forms(&self.spec, &self.table, &self.candidate, flow, end, &x, &y)?;
                let mut inputs = vec![flow.anchor() as f64, end as f64];
                inputs.extend(x.iter().chain(y.iter()));
                Ok((digest("equivalent", &inputs), forms))
            })
            .collect::<Result<_>>()?;
        let tol = self.tol.equivalent_forms;
        let mut worst = [0.0_f64; 3];
        for (i, (dg, f)) in draws.into_iter().enumerate() {
            r.check(format!("equivalent.draw{i:03}"), dg, f.max(), tol);
            for (w, v) in worst.iter_mut().zip([f.weak, f.mixed, f.closed]) {
                *w = w.max(v);
            }
        }
        for (name, w) in ["weak", "mixed", "closed"].iter().zip(worst) {
            r.metric(format!("equivalent.worst_{name}"), w);
        }
        Ok(r)
    }

    fn optimality(&self) -> Result<VerificationReport> {
        let mut r = VerificationReport::new("optimality");
        let flow = self.flow()?;
        let s = flow.anchor();
        let d = self.spec.state_dim;
        let grid = self.spec.grid().clone();
        let draws: Vec<(String, OptimalityGap)> = (0..self.settings.optimality_draws)
            .into_par_iter()
            .map(|i| -> Result<(String, OptimalityGap)> {
                let mut rng = stream(self.seed, &format!("optimality/{i}"));
                let x = unit_vector(&mut rng, d);
                let u = random_control(&mut rng, &grid, s, self.spec.control_dim);
                let g = optimality_gap(&self.spec, &self.table, &self.candidate, flow, &u, &x)?;
                Ok((digest("optimality", x.as_slice()), g))
            })
            .collect::<Result<_>>()?;
        for (i, (dg, g)) in draws.into_iter().enumerate() {
            r.check(
                format!("optimality.draw{i:03}.square"),
                dg.clone(),
                g.mismatch(),
                self.tol.optimality,
            );
            r.check(
                format!("optimality.draw{i:03}.minimal"),
                dg,
                (g.cost_optimal - g.cost_other).max(0.0),
                self.tol.optimality,
            );
        }
        Ok(r)
    }

    fn symmetrization(&self) -> Result<VerificationReport> {
        let mut r = VerificationReport::new("symmetrization");
        let grid = self.spec.grid().clone();
        let draws: Vec<(String, f64)> = (0..self.settings.symmetrization_draws)
            .into_par_iter()
            .map(|i| -> Result<(String, f64)> {
                let mut rng = stream(self.seed, &format!("symmetrization/{i}"));
                let (s, end) = self.draw_window(&mut rng);
                let psi = random_symmetric_path(&mut rng, &grid, self.spec.state_dim);
                let v = random_control(&mut rng, &grid, s, self.spec.control_dim);
                let g = symmetrization_check(&self.spec, &self.table, &psi, &v, end)?;
                Ok((digest("symmetrization", &[s as f64, end as f64, g.lhs]), g.gap()))
            })
            .collect::<Result<_>>()?;
        for (i, (dg, g)) in draws.into_iter().enumerate() {
            r.check(format!("symmetrization.draw{i:02}"), dg, g, self.tol.symmetrization);
        }
        Ok(r)
    }

    fn sandwich(&self) -> Result<VerificationReport> {
        let mut r = VerificationReport::new("sandwich");
        let q = self.q_ire()?;
        let q = if self.perturb == 0.0 {
            q.clone()
        } else {
            q.perturbed(self.perturb)
        };
        let probes = self.probes("sandwich");
        let anchors = self.anchors();
        let tol = self.tol.sandwich;
        for s in anchors {
            let o = sandwich_outcome(&self.spec, &self.table, &self.p, &q, s, &probes)?;
            let dg = digest("sandwich", &[self.spec.grid().node(s)]);
            r.check(format!("sandwich.node{s:04}.gap"), dg.clone(), o.gap_norm, tol);
            r.check(format!("sandwich.node{s:04}.lower"), dg.clone(), o.lower_violation, tol);
            r.check(format!("sandwich.node{s:04}.upper"), dg.clone(), o.upper_violation, tol);
            r.check(format!("sandwich.node{s:04}.replay"), dg, o.replay_violation, tol);
        }
        if self.perturb != 0.0 {
            r.note(format!("integral-equation solution shifted by {}·I", self.perturb));
        }
        Ok(r)
    }

    fn tails(&self) -> Result<VerificationReport> {
        let ladder = EpsLadder::new(self.spec.grid(), &self.settings.tail_ladder)?;
        vanishing_tails(
            &self.spec,
            &self.table,
            &self.candidate,
            &ladder,
            &self.probes("tails"),
            &self.tol,
        )
    }

    fn bc_link(&self) -> Result<VerificationReport> {
        let grid = self.spec.grid();
        let ladder = EpsLadder::geometric(grid, self.settings.eps0)?;
        let t = grid.nearest(self.settings.link_time).max(self.anchor_node());
        let probes = self.probes("bc-link");
        let pairs: Vec<(Vector, Vector)> = probes
            .iter()
            .zip(probes.iter().cycle().skip(1))
            .map(|(x, y)| (x.clone(), y.clone()))
            .collect();
        bc_link(
            &self.spec,
            &self.table,
            &self.candidate,
            self.flow()?,
            self.limits()?,
            t,
            &ladder,
            &pairs,
            &self.tol,
        )
    }

    /// Probes for the per-vector suites: the first canonical vector and four random ones.
    fn state_probes(&self, label: &str) -> Vec<Vector> {
        let d = self.spec.state_dim;
        let all = self.probes(label);
        std::iter::once(all[0].clone())
            .chain(all[d..].iter().take(4).cloned())
            .collect()
    }

    fn admissibility(&self) -> Result<VerificationReport> {
        let (flow, lims) = (self.flow()?, self.limits()?);
        let subs: Vec<VerificationReport> = self
            .state_probes("admissibility")
            .par_iter()
            .map(|x| admissibility(&self.spec, &self.table, &self.candidate, flow, lims, x, &self.tol))
            .collect::<Result<_>>()?;
        Ok(absorb("admissibility", subs))
    }

    fn py_continuity(&self) -> Result<VerificationReport> {
        let (flow, lims) = (self.flow()?, self.limits()?);
        let subs: Vec<VerificationReport> = self
            .state_probes("py-continuity")
            .par_iter()
            .map(|x| py_continuity(&self.candidate, flow, lims, x, &self.tol))
            .collect::<Result<_>>()?;
        Ok(absorb("py_continuity", subs))
    }
}

/// Combines per-probe reports, tagging every entry with the probe index.
fn absorb(suite: &str, subs: Vec<VerificationReport>) -> VerificationReport {
    let mut r = VerificationReport::new(suite);
    for (k, sub) in subs.into_iter().enumerate() {
        for c in sub.checks {
            r.check(format!("probe{k}.{}", c.name), c.inputs_digest, c.residual, c.tolerance);
        }
        for (name, v) in sub.metrics {
            r.metric(format!("probe{k}.{name}"), v);
        }
        for mut s in sub.slopes {
            s.name = format!("probe{k}.{}", s.name);
            r.slopes.push(s);
        }
        for n in sub.notes {
            if !r.notes.contains(&n) {
                r.note(n);
            }
        }
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::TimeGrid;
    use crate::problem::logistic_problem;
    use std::sync::Arc;

    fn context(perturb: f64) -> VerifyContext {
        let grid = Arc::new(TimeGrid::new(0.0, 1.0, 129, 2.0).unwrap());
        let spec = logistic_problem(grid, 0.25).unwrap();
        let settings = VerifySettings {
            draws: 10,
            optimality_draws: 5,
            symmetrization_draws: 4,
            ..VerifySettings::default()
        };
        VerifyContext::new(spec, 7, Tolerances::default(), settings, perturb).unwrap()
    }

    #[test]
    fn suite_names_resolve() {
        assert_eq!(resolve_suites(&[]).unwrap().len(), SUITES.len());
        let e = resolve_suites(&["limits".into(), "nope".into()])
            .unwrap_err()
            .to_string();
        assert!(e.contains("nope") && e.contains("bc-link"), "{e}");
        assert_eq!(
            resolve_suites(&["tails".into(), "tails".into()]).unwrap(),
            vec!["tails"]
        );
    }

    #[test]
    fn logistic_identity_suites_pass() {
        let ctx = context(0.0);
        let names: Vec<String> = [
            "value",
            "fundamental-identity",
            "equivalent-forms",
            "optimality",
            "symmetrization",
            "sandwich",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        for r in ctx.run_all(&names).unwrap() {
            assert!(r.passed(), "{}", r.to_text());
        }
    }

    #[test]
    fn perturbation_is_detected() {
        let ctx = context(0.1);
        let r = ctx.run("sandwich").unwrap();
        assert!(r.worst("sandwich.").unwrap() >= 1e-2, "{}", r.to_text());
        assert!(!r.passed());
        let f = ctx.run("fundamental-identity").unwrap();
        assert!(!f.passed());
    }

    #[test]
    fn reports_are_deterministic() {
        let a = context(0.0).run("fundamental-identity").unwrap().to_json();
        let b = context(0.0).run("fundamental-identity").unwrap().to_json();
        assert_eq!(a, b);
    }
}
