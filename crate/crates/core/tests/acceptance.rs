//! End-to-end acceptance checks. Prints one `[PASS]`/`[FAIL]` line per
//! criterion and exits non-zero if any fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use feddec::algorithms::{default_gamma, BatchStreams};
use feddec::harness::converge::ConvergenceBundle;
use feddec::harness::spectra::alpha_curve;
use feddec::harness::table1::reference_value;
use feddec::harness::verify::{envelope_check, lemma4_grid};
use feddec::harness::{cmd_convergence, cmd_table1, ExperimentSpec, LemmaSetup, Table1Grid};
use feddec::mixing::{alpha_of, validate};
use feddec::theory::{lemma2_monitor, lemma3_monitor, Verdict};
use feddec::{run, Algorithm, Mixing, MixingMatrix, MixingModel, RegressionProblem, RunConfig, Stream, Streams};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn table1_grid() -> Table1Grid {
    Table1Grid::default()
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let t = match cmd_table1(&table1_grid()) {
        Ok(t) => t,
        Err(e) => return outcome(false, format!("error: {e}")),
    };
    let secs = started.elapsed().as_secs_f64();
    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    let mut bad = 0;
    for c in &t.cells {
        let Some(r) = reference_value(&c.graph, c.n) else {
            continue;
        };
        checked += 1;
        let diff = (c.mean - r).abs();
        if diff > 0.12 {
            bad += 1;
        }
        if diff > worst.0 {
            worst = (diff, format!("{} n={}", c.graph.label(), c.n));
        }
    }
    outcome(
        checked == 18 && bad == 0 && secs < 120.0,
        format!(
            "table1: {bad} of {checked} cells outside ±0.12; worst |mean - ref| = {:.4} at {}; {secs:.1}s",
            worst.0, worst.1
        ),
    )
}

fn criterion_2() -> Outcome {
    let tol = 1e-12;
    let pts = [(0.0, 0.0), (0.5, 1.0), (0.9, 9.0)];
    let mut ok = pts
        .iter()
        .all(|&(x, a)| alpha_of(x).map(|v| (v - a).abs() <= tol).unwrap_or(false));
    let curve = alpha_curve();
    ok &= (curve[90].1 - 9.0).abs() <= tol;
    let t = match cmd_table1(&table1_grid()) {
        Ok(t) => t,
        Err(e) => return outcome(false, format!("error: {e}")),
    };
    let mut implication_checked = 0;
    for c in &t.cells {
        for &v in c.values.iter().chain(std::iter::once(&c.mean)) {
            if v < 0.9 {
                implication_checked += 1;
                ok &= alpha_of(v).map(|a| a < 9.0).unwrap_or(false);
            }
        }
    }
    outcome(
        ok,
        format!(
            "alpha: α(0)=0, α(0.5)=1, α(0.9)=9 at 1e-12; |λ₂|² < 0.9 ⇒ α < 9 on {implication_checked} table values"
        ),
    )
}

fn find(b: &ConvergenceBundle, graph: &str, run: &str) -> f64 {
    b.summary(graph, run).map(|s| s.final_gap_mean).unwrap_or(f64::NAN)
}

fn criterion_3() -> Outcome {
    let started = Instant::now();
    let spec = ExperimentSpec::default();
    let b = match cmd_convergence(&spec) {
        Ok(b) => b,
        Err(e) => return outcome(false, format!("error: {e}")),
    };
    let secs = started.elapsed().as_secs_f64();
    let failed: usize = b.summaries.iter().map(|s| s.seeds_failed).sum();
    let (sparse, dense) = ("geographic_r0.35", "geographic_r0.5");
    let mut notes = Vec::new();
    let mut ok = failed == 0 && secs < 600.0;
    let mut advantage = BTreeMap::new();
    let mut degradation = BTreeMap::new();
    for g in [sparse, dense] {
        for h in [10, 100] {
            let dec = find(&b, g, &format!("feddec_H{h}_K2"));
            let avg = find(&b, g, &format!("fedavg_H{h}_K2"));
            ok &= dec <= avg;
            advantage.insert((g, h), avg / dec);
        }
        for algo in ["feddec", "fedavg"] {
            let r = find(&b, g, &format!("{algo}_H100_K2")) / find(&b, g, &format!("{algo}_H10_K2"));
            degradation.insert((g, algo), r);
        }
        let (rd, ra) = (degradation[&(g, "feddec")], degradation[&(g, "fedavg")]);
        ok &= ra > rd;
        notes.push(format!("{g}: H100/H10 fedavg {ra:.3} vs feddec {rd:.3}"));
    }
    for h in [10, 100] {
        let (s, d) = (advantage[&(sparse, h)], advantage[&(dense, h)]);
        ok &= d > s;
        notes.push(format!("H={h}: advantage dense {d:.2} vs sparse {s:.2}"));
    }
    let dec_wins = advantage.values().all(|&a| a >= 1.0);
    outcome(
        ok,
        format!(
            "convergence ordering: feddec <= fedavg in all cells: {dec_wins}; {}; {failed} failed runs; {secs:.1}s",
            notes.join("; ")
        ),
    )
}

struct LemmaData {
    setup: LemmaSetup,
    inst: feddec::harness::verify::LemmaInstance,
}

fn lemma_data() -> feddec::Result<LemmaData> {
    let setup = LemmaSetup::default();
    let inst = setup.instance()?;
    Ok(LemmaData { setup, inst })
}

fn criterion_4(l: &LemmaData) -> feddec::Result<Outcome> {
    let runs = l.setup.runs(&l.inst, 2)?;
    let m = lemma2_monitor(&runs.traces, &runs.theory)?;
    let every_t = m.points.iter().all(|p| p.empirical <= p.bound);
    Ok(outcome(
        runs.theory.alpha > 0.0 && m.verdict == Verdict::Pass && every_t,
        format!(
            "consensus monitor: α = {:.4}, {} points, max mean/bound = {:.3e}, single-run exceedances {}",
            runs.theory.alpha,
            m.points.len(),
            m.max_ratio,
            m.single_run_exceedances
        ),
    ))
}

fn criterion_5(l: &LemmaData) -> feddec::Result<Outcome> {
    let mut ok = true;
    let mut means = Vec::new();
    for k in [1, 2, 5] {
        let runs = l.setup.runs(&l.inst, k)?;
        let m = lemma3_monitor(&runs.traces, &runs.theory, l.setup.resamples, l.setup.instance_seed)?;
        ok &= m.verdict == Verdict::Pass && m.points.iter().all(|p| p.empirical <= p.bound);
        means.push((k, m.mean_empirical, m.max_ratio));
    }
    let decreasing = means.windows(2).all(|w| w[1].1 < w[0].1);
    let text: Vec<String> = means
        .iter()
        .map(|(k, v, r)| format!("K={k}: mean {v:.4e} max ratio {r:.3e}"))
        .collect();
    Ok(outcome(
        ok && decreasing,
        format!("sampling monitor: {}; decreasing in K: {decreasing}", text.join(", ")),
    ))
}

fn criterion_6() -> feddec::Result<Outcome> {
    let grid = lemma4_grid(0, 100, 100_000)?;
    let bad = grid.iter().filter(|(_, s)| !s.passed).count();
    let worst = grid.iter().map(|(_, s)| s.max_ratio).fold(0.0, f64::max);
    Ok(outcome(
        bad == 0 && grid.len() == 100,
        format!(
            "recursion: {bad} of {} points violated at T = 1e5; max Δ/bound = {worst:.6}",
            grid.len()
        ),
    ))
}

fn criterion_7(l: &LemmaData) -> feddec::Result<Outcome> {
    let runs = l.setup.runs(&l.inst, 2)?;
    let e = envelope_check(&runs.traces, &runs.theory)?;
    Ok(outcome(
        e.violations == 0 && e.points > 0,
        format!(
            "theorem envelope: {} of {} points with t > γ = {:.1} above bound; max ratio {:.3e}",
            e.violations, e.points, runs.theory.gamma, e.max_ratio
        ),
    ))
}

fn same_trace(a: &feddec::RunTrace, b: &feddec::RunTrace) -> bool {
    a.rows.len() == b.rows.len()
        && a.rows.iter().zip(&b.rows).all(|(x, y)| {
            x.t == y.t && x.gap.to_bits() == y.gap.to_bits() && x.dist_sq.to_bits() == y.dist_sq.to_bits()
        })
        && a.final_z
            .iter()
            .zip(b.final_z.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

fn check_8a(l: &LemmaData) -> feddec::Result<bool> {
    let (p, c) = (&l.inst.problem, &l.inst.constants);
    let ident = Mixing::Fixed(MixingMatrix::identity(p.n()));
    let mut ok = true;
    for seed in 0..5 {
        let cfg = RunConfig::new(Algorithm::FedDec, 500, 10, 2, seed);
        let dec = run(p, c, &ident, &cfg)?;
        let avg = run(
            p,
            c,
            &Mixing::Identity,
            &RunConfig {
                algo: Algorithm::FedAvg,
                ..cfg
            },
        )?;
        ok &= same_trace(&dec, &avg);
    }
    Ok(ok)
}

/// Plain single-machine mini-batch SGD on node 0's data.
fn reference_sgd(p: &RegressionProblem, mu: f64, gamma: f64, steps: usize, m: usize, seed: u64) -> DVector<f64> {
    let mut rng = Streams::new(seed).rng(Stream::Batch, 0);
    let mut z = DVector::zeros(p.dim());
    for t in 1..=steps {
        let eta = 2.0 / (mu * (gamma + t as f64));
        let g = p.stochastic_gradient(0, &z, m, &mut rng).expect("gradient");
        z = &z - g * eta;
    }
    z
}

fn check_8b() -> feddec::Result<bool> {
    let base = RegressionProblem::generate_synthetic(1, 4, 12, 1.5, &mut ChaCha8Rng::seed_from_u64(11))?;
    let (x, y) = (base.features(0).clone(), base.targets(0).clone());
    let p = RegressionProblem::from_parts(vec![x.clone(), x], vec![y.clone(), y], 1.5)?;
    let c = p.constants()?;
    let mut ok = true;
    for (seed, m) in [(0, 1), (1, 3), (2, 12)] {
        let mut cfg = RunConfig::new(Algorithm::FedAvg, 300, 1, 2, seed);
        cfg.batch_size = m;
        cfg.batch_streams = BatchStreams::Shared;
        let tr = run(&p, &c, &Mixing::Identity, &cfg)?;
        let gamma = default_gamma(c.smoothness, c.mu, 1);
        let z = reference_sgd(&p, c.mu, gamma, 300, m, seed);
        ok &= tr.final_z.iter().zip(z.iter()).all(|(a, b)| a.to_bits() == b.to_bits());
    }
    Ok(ok)
}

fn check_8c(l: &LemmaData) -> feddec::Result<(bool, f64)> {
    let p = &l.inst.problem;
    let z = DVector::from_fn(p.dim(), |k, _| 0.1 * k as f64 - 0.2);
    let mut exact = true;
    let mut worst: f64 = 0.0;
    for i in 0..p.n() {
        let full = p.full_gradient(i, &z)?;
        let rows = p.samples_per_node();
        let mut acc = DVector::zeros(p.dim());
        for j in 0..rows {
            acc += p.gradient_on_rows(i, &z, &[j])?;
        }
        let mean = acc / rows as f64;
        exact &= mean == full;
        let x: &DMatrix<f64> = p.features(i);
        let oracle = x.transpose() * (x * &z - p.targets(i)) * (2.0 / rows as f64);
        worst = worst.max((&oracle - &full).norm() / oracle.norm().max(1e-300));
    }
    Ok((exact && worst <= 1e-12, worst))
}

fn check_8d(l: &LemmaData) -> feddec::Result<(bool, f64)> {
    let mut worst: f64 = 0.0;
    let paper = ExperimentSpec::default().instance()?;
    for (p, c) in [(&l.inst.problem, &l.inst.constants), (&paper.problem, &paper.constants)] {
        let g = p.global_gradient(&c.z_star)?.norm();
        let scale = p.global_gradient(&DVector::zeros(p.dim()))?.norm();
        worst = worst.max(g / scale);
    }
    Ok((worst <= 1e-8, worst))
}

fn check_8e(l: &LemmaData) -> feddec::Result<(bool, usize)> {
    let paper = ExperimentSpec::default().instance()?;
    let mut graphs = vec![l.inst.model.graph().clone()];
    graphs.extend(paper.graphs.iter().map(|g| g.graph.clone()));
    let streams = Streams::new(0);
    let mut count = 0;
    let mut ok = true;
    for (gi, g) in graphs.iter().enumerate() {
        for (pi, &q) in [0.3, 0.7, 1.0].iter().enumerate() {
            let model = MixingModel::new(g.clone(), q, feddec::WeightRule::default())?;
            let mut rng = streams.rng(Stream::Links, ((gi as u64) << 8) | pi as u64);
            for _ in 0..1000 {
                let (w, _) = model.sample(&mut rng);
                ok &= validate(&w, g).is_empty();
                count += 1;
            }
        }
    }
    Ok((ok, count))
}

fn criterion_8(l: &LemmaData) -> feddec::Result<Outcome> {
    let a = check_8a(l)?;
    let b = check_8b()?;
    let (c, c_err) = check_8c(l)?;
    let (d, d_rel) = check_8d(l)?;
    let (e, draws) = check_8e(l)?;
    Ok(outcome(
        a && b && c && d && e,
        format!(
            "oracles: (a) W=I bit-identical {a}; (b) SGD reduction bit-exact {b}; (c) exhaustive mean exact {c} \
             (matrix oracle rel err {c_err:.1e}); (d) ‖∇f(z*)‖ rel {d_rel:.1e}; (e) {draws} sampled W valid {e}"
        ),
    ))
}

fn read_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).expect("read dir") {
            let path = entry.expect("entry").path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).expect("prefix").to_string_lossy().into_owned();
                out.insert(rel, fs::read(&path).expect("read"));
            }
        }
    }
    out
}

fn cli(args: &[&str], out: &Path, workers: &str) -> bool {
    Command::new(env!("CARGO_BIN_EXE_feddec"))
        .args(args)
        .args(["--out", out.to_str().expect("utf8"), "--workers", workers])
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn criterion_9() -> Outcome {
    let tmp = tempfile::tempdir().expect("tempdir");
    let cfg = tmp.path().join("small.toml");
    let mut spec = ExperimentSpec {
        seeds: vec![0, 1, 2],
        ..ExperimentSpec::default()
    };
    for r in &mut spec.runs {
        r.iterations = 1000;
    }
    spec.mixing.activation_prob = 0.8;
    spec.mixing.spectral_samples = 2000;
    fs::write(&cfg, spec.to_toml().expect("toml")).expect("write");
    let cfg = cfg.to_str().expect("utf8").to_string();
    let commands: Vec<(&str, Vec<&str>)> = vec![
        ("table1", vec!["table1"]),
        ("converge", vec!["converge", "--config", &cfg]),
        (
            "spectra",
            vec![
                "spectra",
                "--activation-prob",
                "0.5",
                "--samples",
                "4000",
                "--seed",
                "3",
            ],
        ),
        ("verify", vec!["verify"]),
    ];
    let mut files = 0;
    let mut diffs = Vec::new();
    for (name, args) in &commands {
        let a = tmp.path().join(format!("{name}_w1"));
        let b = tmp.path().join(format!("{name}_w4"));
        let c = tmp.path().join(format!("{name}_w4_again"));
        if !(cli(args, &a, "1") && cli(args, &b, "4") && cli(args, &c, "4")) {
            diffs.push(format!("{name}: command failed"));
            continue;
        }
        let (ta, tb, tc) = (read_tree(&a), read_tree(&b), read_tree(&c));
        files += ta.len();
        if ta != tb || tb != tc {
            diffs.push(format!("{name}: outputs differ"));
        }
        let missing_preamble = ta
            .iter()
            .filter(|(k, _)| k.ends_with(".csv"))
            .any(|(_, v)| !v.starts_with(b"# feddec config_hash="));
        if missing_preamble {
            diffs.push(format!("{name}: CSV without hash/seed comment"));
        }
    }
    outcome(
        diffs.is_empty() && files > 0,
        if diffs.is_empty() {
            format!("determinism: {files} files byte-identical across 1 and 4 workers and reruns")
        } else {
            format!("determinism: {}", diffs.join("; "))
        },
    )
}

fn report(n: usize, o: feddec::Result<Outcome>) -> bool {
    let o = o.unwrap_or_else(|e| outcome(false, format!("error: {e}")));
    println!(
        "[{}] criterion {n}: {}",
        if o.passed { "PASS" } else { "FAIL" },
        o.detail
    );
    o.passed
}

fn main() -> ExitCode {
    let mut ok = true;
    ok &= report(1, Ok(criterion_1()));
    ok &= report(2, Ok(criterion_2()));
    ok &= report(3, Ok(criterion_3()));
    match lemma_data() {
        Ok(l) => {
            ok &= report(4, criterion_4(&l));
            ok &= report(5, criterion_5(&l));
            ok &= report(6, criterion_6());
            ok &= report(7, criterion_7(&l));
            ok &= report(8, criterion_8(&l));
        }
        Err(e) => {
            for n in 4..=8 {
                ok &= report(n, Err(feddec::Error::Config(format!("lemma setup: {e}"))));
            }
        }
    }
    ok &= report(9, Ok(criterion_9()));
    if ok {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: FAILED");
        ExitCode::FAILURE
    }
}
