//! Invariant suite behind `feddec verify`.

use std::time::Instant;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::config_hash;
use super::spec::GraphSpec;
use crate::algorithms::{run, Algorithm, Mixing, RunConfig, RunTrace};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::mixing::{lambda2_hat, validate, MixingMatrix, MixingModel, SpectralReport, WeightRule};
use crate::problem::{ProblemConstants, RegressionProblem};
use crate::rng::{Stream, Streams};
use crate::theory::{
    lemma2_monitor, lemma3_monitor, lemma4_sequence_check, MonitorReport, SequenceCheck, TheoryConstants, TheoryInputs,
    Verdict,
};

/// Small FedDec instance used by the lemma monitors.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LemmaSetup {
    pub n: usize,
    pub d: usize,
    pub samples_per_node: usize,
    pub scale_base: f64,
    pub graph: GraphSpec,
    pub activation_prob: f64,
    pub weight_rule: WeightRule,
    pub participants: usize,
    pub local_steps: usize,
    pub iterations: usize,
    pub seeds: Vec<u64>,
    pub instance_seed: u64,
    /// Server redraws per frozen round in the sampling-variance monitor.
    pub resamples: usize,
}

impl Default for LemmaSetup {
    fn default() -> Self {
        Self {
            n: 10,
            d: 5,
            samples_per_node: 20,
            scale_base: 1.5,
            graph: GraphSpec::Geographic {
                radius: 0.35,
                augment_path: true,
            },
            activation_prob: 1.0,
            weight_rule: WeightRule::default(),
            participants: 2,
            local_steps: 10,
            iterations: 500,
            seeds: (0..20).collect(),
            instance_seed: 0,
            resamples: 200,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LemmaInstance {
    pub problem: RegressionProblem,
    pub constants: ProblemConstants,
    pub model: MixingModel,
    pub spectral: SpectralReport,
}

#[derive(Debug, Clone)]
pub struct LemmaRuns {
    pub traces: Vec<RunTrace>,
    /// Constants with `G²` taken as the largest squared gradient norm over all traces.
    pub theory: TheoryConstants,
}

impl LemmaSetup {
    pub fn instance(&self) -> Result<LemmaInstance> {
        let streams = Streams::new(self.instance_seed);
        let problem = RegressionProblem::generate_synthetic(
            self.n,
            self.d,
            self.samples_per_node,
            self.scale_base,
            &mut streams.rng(Stream::Data, 0),
        )?;
        let constants = problem.constants()?;
        let (graph, _) = self.graph.draw_connected(self.n, &streams, 0, 0)?;
        let model = MixingModel::new(graph, self.activation_prob, self.weight_rule)?;
        let spectral = lambda2_hat(&model, crate::mixing::DEFAULT_MC_SAMPLES, &streams)?;
        Ok(LemmaInstance {
            problem,
            constants,
            model,
            spectral,
        })
    }

    pub fn config(&self, participants: usize, seed: u64) -> RunConfig {
        let mut c = RunConfig::new(Algorithm::FedDec, self.iterations, self.local_steps, participants, seed);
        c.record_consensus = true;
        c.record_snapshots = true;
        c
    }

    /// All seeds with `participants` server draws per round.
    pub fn runs(&self, inst: &LemmaInstance, participants: usize) -> Result<LemmaRuns> {
        let mixing = if inst.model.is_fixed() {
            Mixing::Fixed(inst.model.base_weights().clone())
        } else {
            Mixing::Random(inst.model.clone())
        };
        let traces = self
            .seeds
            .iter()
            .map(|&s| run(&inst.problem, &inst.constants, &mixing, &self.config(participants, s)))
            .collect::<Result<Vec<_>>>()?;
        let g_sq = traces.iter().map(|t| t.grad_norm_max).fold(0.0, f64::max);
        let consts = inst.constants.clone().with_g_sq(g_sq);
        let z0 = DVector::zeros(self.d);
        let inputs = TheoryInputs::from_problem(
            &consts,
            inst.spectral.lambda2_hat,
            participants,
            self.local_steps,
            1,
            &z0,
        )?;
        Ok(LemmaRuns {
            traces,
            theory: TheoryConstants::new(inputs)?,
        })
    }
}

/// Seed-mean gap against the theorem envelope for every logged `t > γ`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopeCheck {
    pub points: usize,
    pub violations: usize,
    pub max_ratio: f64,
}

pub fn envelope_check(traces: &[RunTrace], tc: &TheoryConstants) -> Result<EnvelopeCheck> {
    let first = traces
        .first()
        .ok_or_else(|| Error::MissingLog("no traces given".into()))?;
    let mut out = EnvelopeCheck {
        points: 0,
        violations: 0,
        max_ratio: 0.0,
    };
    for (j, row) in first.rows.iter().enumerate() {
        if (row.t as f64) <= tc.gamma {
            continue;
        }
        let mean = traces.iter().map(|t| t.rows[j].gap).sum::<f64>() / traces.len() as f64;
        let bound = tc.theorem_bound(row.t);
        out.points += 1;
        out.max_ratio = out.max_ratio.max(mean / bound);
        if mean > bound {
            out.violations += 1;
        }
    }
    Ok(out)
}

/// One random point of the recursion grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecursionPoint {
    pub mu: f64,
    pub gamma: f64,
    pub b: f64,
    pub delta1: f64,
}

fn log_uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    (rng.random_range(lo.ln()..hi.ln())).exp()
}

/// `points` log-uniform draws of `(μ, γ ≥ 1, B, Δ¹)`, each checked to `horizon`.
pub fn lemma4_grid(seed: u64, points: usize, horizon: usize) -> Result<Vec<(RecursionPoint, SequenceCheck)>> {
    let mut rng = Streams::new(seed).rng(Stream::Monitor, 1 << 40);
    (0..points)
        .map(|_| {
            let p = RecursionPoint {
                mu: log_uniform(&mut rng, 1e-3, 10.0),
                gamma: log_uniform(&mut rng, 1.0, 1e4),
                b: log_uniform(&mut rng, 1e-3, 1e6),
                delta1: log_uniform(&mut rng, 1e-6, 1e3),
            };
            Ok((p, lemma4_sequence_check(p.mu, p.gamma, p.b, p.delta1, horizon)?))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    /// Soft checks are reported but do not affect the exit status.
    pub hard: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub hash: String,
    pub checks: Vec<CheckResult>,
    pub elapsed: f64,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed || !c.hard)
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("config_hash = {}\n", self.hash);
        for c in &self.checks {
            let tag = match (c.passed, c.hard) {
                (true, _) => "PASS",
                (false, true) => "FAIL",
                (false, false) => "WARN",
            };
            out.push_str(&format!("[{tag}] {}: {}\n", c.name, c.detail));
        }
        out.push_str(&format!("overall = {}\n", if self.passed() { "pass" } else { "fail" }));
        out
    }
}

#[derive(Debug, Clone, Default)]
pub struct VerifyOptions {
    pub setup: LemmaSetup,
    /// CSV of a mixing matrix to validate against the setup graph, or `fixture_graph`.
    pub mixing_fixture: Option<String>,
    pub fixture_graph: Option<Graph>,
    /// Draws from the link-failure model used to validate sampled matrices.
    pub sampled_matrices: usize,
}

impl VerifyOptions {
    pub fn new(setup: LemmaSetup) -> Self {
        Self {
            setup,
            mixing_fixture: None,
            fixture_graph: None,
            sampled_matrices: 1000,
        }
    }
}

struct Suite {
    checks: Vec<CheckResult>,
}

impl Suite {
    fn push(&mut self, name: &'static str, hard: bool, outcome: Result<(bool, String)>) {
        let (passed, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
        self.checks.push(CheckResult {
            name,
            passed,
            hard,
            detail,
        });
    }
}

fn monitor_outcome(r: Result<MonitorReport>) -> (bool, Result<(bool, String)>) {
    match r {
        Ok(m) => {
            let hard = m.verdict != Verdict::Degenerate;
            let detail = format!(
                "verdict={:?} max_ratio={:.4} points={} single_run_exceedances={}",
                m.verdict,
                m.max_ratio,
                m.points.len(),
                m.single_run_exceedances
            );
            (hard, Ok((m.verdict == Verdict::Pass, detail)))
        }
        Err(e) => (true, Err(e)),
    }
}

fn fixture_check(opts: &VerifyOptions, graph: &Graph) -> Result<(bool, String)> {
    let text = opts.mixing_fixture.as_deref().unwrap_or_default();
    let w = MixingMatrix::from_csv(text)?;
    let g = opts.fixture_graph.as_ref().unwrap_or(graph);
    let v = validate(&w, g);
    Ok(match v.first() {
        None => (true, "fixture validates".into()),
        Some(first) => (false, format!("{} violation(s), first: {first}", v.len())),
    })
}

/// Runs every check; errors inside a check become a failed entry.
pub fn cmd_verify(opts: &VerifyOptions) -> Result<VerifyReport> {
    let started = Instant::now();
    let setup = &opts.setup;
    let hash = config_hash(setup)?;
    let inst = setup.instance()?;
    let (problem, consts) = (&inst.problem, &inst.constants);
    let graph = inst.model.graph().clone();
    let streams = Streams::new(setup.instance_seed);
    let mut suite = Suite { checks: Vec::new() };

    suite.push("mixing.base", true, {
        let v = validate(inst.model.base_weights(), &graph);
        Ok((v.is_empty(), format!("{} violation(s)", v.len())))
    });

    suite.push("mixing.sampled", true, {
        let p = if setup.activation_prob < 1.0 {
            setup.activation_prob
        } else {
            0.7
        };
        MixingModel::new(graph.clone(), p, setup.weight_rule).map(|model| {
            let mut bad = 0;
            for k in 0..opts.sampled_matrices {
                let keep: Vec<bool> = {
                    let mut rng = streams.rng(Stream::Links, k as u64);
                    graph.edges().iter().map(|_| rng.random_bool(p)).collect()
                };
                let (w, _) = model.weights_for(&keep);
                if !validate(&w, &graph.subgraph(&keep)).is_empty() {
                    bad += 1;
                }
            }
            (
                bad == 0,
                format!("{bad} of {} draws at activation {p} failed", opts.sampled_matrices),
            )
        })
    });

    if opts.mixing_fixture.is_some() {
        suite.push("mixing.fixture", true, fixture_check(opts, &graph));
    }

    suite.push("gradient.finite_difference", true, {
        let mut rng = streams.rng(Stream::Monitor, 1 << 41);
        let z = DVector::from_fn(setup.d, |_, _| StandardNormal.sample(&mut rng));
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        let mut res = Ok(());
        for i in 0..setup.n {
            let run = || -> Result<f64> {
                let g = problem.full_gradient(i, &z)?;
                let mut err: f64 = 0.0;
                for k in 0..setup.d {
                    let mut zp = z.clone();
                    let mut zm = z.clone();
                    zp[k] += h;
                    zm[k] -= h;
                    let fd = (problem.local_cost(i, &zp)? - problem.local_cost(i, &zm)?) / (2.0 * h);
                    err = err.max((fd - g[k]).abs() / (1.0 + g[k].abs()));
                }
                Ok(err)
            };
            match run() {
                Ok(e) => worst = worst.max(e),
                Err(e) => res = Err(e),
            }
        }
        res.map(|_| (worst < 1e-5, format!("max relative error {worst:.3e}")))
    });

    suite.push("gradient.exhaustive_mean", true, {
        let z = DVector::from_element(setup.d, 0.3);
        let mut ok = true;
        let mut res = Ok(());
        for i in 0..setup.n {
            let rows: Vec<usize> = (0..problem.samples_per_node()).collect();
            match (problem.gradient_on_rows(i, &z, &rows), problem.full_gradient(i, &z)) {
                (Ok(a), Ok(b)) => ok &= a == b,
                (Err(e), _) | (_, Err(e)) => res = Err(e),
            }
        }
        res.map(|_| (ok, "mean over every row equals the full gradient bit for bit".into()))
    });

    suite.push("optimum.first_order", true, {
        let z0 = DVector::zeros(setup.d);
        problem.global_gradient(&consts.z_star).and_then(|g| {
            let scale = problem.global_gradient(&z0)?.norm();
            let rel = g.norm() / (1.0 + scale);
            Ok((rel <= 1e-8, format!("relative gradient norm {rel:.3e}")))
        })
    });

    suite.push("optimum.global", true, {
        let mut rng = streams.rng(Stream::Monitor, 1 << 42);
        let mut below = 0;
        let mut res = Ok(());
        for _ in 0..1000 {
            let z = &consts.z_star + DVector::from_fn(setup.d, |_, _| StandardNormal.sample(&mut rng));
            match problem.global_cost(&z) {
                Ok(f) if f < consts.f_star - 1e-9 * (1.0 + consts.f_star.abs()) => below += 1,
                Ok(_) => {}
                Err(e) => res = Err(e),
            }
        }
        res.map(|_| (below == 0, format!("{below} of 1000 perturbed points below f*")))
    });

    suite.push("equivalence.fedavg_identity", true, {
        let mut a = RunConfig::new(
            Algorithm::FedDec,
            setup.iterations,
            setup.local_steps,
            setup.participants,
            7,
        );
        let ident = Mixing::Fixed(MixingMatrix::identity(setup.n));
        run(problem, consts, &ident, &a).and_then(|dec| {
            a.algo = Algorithm::FedAvg;
            let avg = run(problem, consts, &Mixing::Identity, &a)?;
            let same = dec.rows.len() == avg.rows.len()
                && dec
                    .rows
                    .iter()
                    .zip(&avg.rows)
                    .all(|(x, y)| x.gap.to_bits() == y.gap.to_bits() && x.dist_sq.to_bits() == y.dist_sq.to_bits())
                && dec.final_z == avg.final_z;
            Ok((same, "FedDec with W = I against FedAvg".into()))
        })
    });

    match setup.runs(&inst, setup.participants) {
        Ok(runs) => {
            let (hard, out) = monitor_outcome(lemma2_monitor(&runs.traces, &runs.theory));
            suite.push("lemma.consensus", hard, out);
            let (hard, out) = monitor_outcome(lemma3_monitor(
                &runs.traces,
                &runs.theory,
                setup.resamples,
                setup.instance_seed,
            ));
            suite.push("lemma.sampling", hard, out);
            suite.push(
                "theorem.envelope",
                true,
                envelope_check(&runs.traces, &runs.theory).map(|e| {
                    (
                        e.violations == 0 && e.points > 0,
                        format!(
                            "{} of {} points above the bound, max ratio {:.4}",
                            e.violations, e.points, e.max_ratio
                        ),
                    )
                }),
            );
            let delta1 = runs.theory.inputs.initial_distance_sq;
            suite.push(
                "recursion.measured",
                true,
                lemma4_sequence_check(consts.mu, runs.theory.gamma, runs.theory.b, delta1, 100_000)
                    .map(|s| (s.passed, format!("max ratio {:.6}", s.max_ratio))),
            );
        }
        Err(e) => suite.push("lemma.runs", true, Err(e)),
    }

    suite.push(
        "recursion.grid",
        true,
        lemma4_grid(setup.instance_seed, 100, 10_000).map(|g| {
            let bad = g.iter().filter(|(_, s)| !s.passed).count();
            (bad == 0, format!("{bad} of {} grid points violated", g.len()))
        }),
    );

    Ok(VerifyReport {
        hash,
        checks: suite.checks,
        elapsed: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> LemmaSetup {
        LemmaSetup {
            n: 6,
            d: 3,
            samples_per_node: 8,
            graph: GraphSpec::Geographic {
                radius: 0.5,
                augment_path: true,
            },
            iterations: 100,
            seeds: vec![0, 1, 2],
            resamples: 20,
            ..LemmaSetup::default()
        }
    }

    #[test]
    fn quick_suite_passes() {
        let mut opts = VerifyOptions::new(quick());
        opts.sampled_matrices = 50;
        let r = cmd_verify(&opts).unwrap();
        assert!(r.passed(), "{}", r.to_text());
        assert!(r.check("mixing.fixture").is_none());
    }

    #[test]
    fn corrupted_fixture_fails() {
        let mut opts = VerifyOptions::new(quick());
        opts.sampled_matrices = 5;
        let inst = opts.setup.instance().unwrap();
        let mut w = inst.model.base_weights().matrix().clone();
        w[(0, 1)] += 0.05;
        opts.mixing_fixture = Some(MixingMatrix::from_matrix(w).unwrap().to_csv());
        let r = cmd_verify(&opts).unwrap();
        let c = r.check("mixing.fixture").unwrap();
        assert!(!c.passed);
        assert!(!r.passed());
        assert!(r.to_text().contains("[FAIL] mixing.fixture"));
    }

    #[test]
    fn garbage_fixture_is_a_failed_check() {
        let mut opts = VerifyOptions::new(quick());
        opts.sampled_matrices = 5;
        opts.mixing_fixture = Some("not,a\nmatrix".into());
        let r = cmd_verify(&opts).unwrap();
        assert!(!r.check("mixing.fixture").unwrap().passed);
    }
}
