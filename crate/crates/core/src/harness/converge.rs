//! Multi-seed comparison runs over every (graph, run config, seed) cell.

use nalgebra::DVector;
use rayon::prelude::*;

use super::spec::{ExperimentSpec, Instance};
use super::{config_hash, mean_sd, opt, preamble, seed_list, OutputDir};
use crate::algorithms::{run, Algorithm, Mixing, RunTrace};
use crate::error::Result;
use crate::mixing::{lambda2_hat, SpectralMethod, SpectralReport};
use crate::rng::Streams;
use crate::theory::{TheoryConstants, TheoryInputs};

#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub graph: usize,
    pub run: usize,
    pub seed: u64,
    pub result: std::result::Result<RunTrace, String>,
}

/// Seed-mean curve of one (graph, run) pair.
#[derive(Debug, Clone)]
pub struct MeanCurve {
    pub t: Vec<usize>,
    pub eta: Vec<f64>,
    pub gap: Vec<f64>,
    pub dist_sq: Vec<f64>,
    /// Theorem envelope at each `t`; empty without a FedDec bound.
    pub bound: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ConfigSummary {
    pub graph: usize,
    pub run: usize,
    pub seeds_ok: usize,
    pub seeds_failed: usize,
    pub final_gap_mean: f64,
    pub final_gap_sd: f64,
    /// Mean gap over the last tenth of the logged rows, averaged over seeds.
    pub tail_gap_mean: f64,
    pub final_dist_sq_mean: f64,
    pub peer_messages_mean: f64,
    pub server_messages_mean: f64,
    pub theory: Option<TheoryConstants>,
    pub curve: Option<MeanCurve>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedRow {
    pub graph: usize,
    pub feddec_run: usize,
    pub fedavg_run: usize,
    pub seed: u64,
    pub feddec_final_gap: f64,
    pub fedavg_final_gap: f64,
}

#[derive(Debug, Clone)]
pub struct ConvergenceBundle {
    pub spec: ExperimentSpec,
    pub hash: String,
    pub instance: Instance,
    pub spectra: Vec<SpectralReport>,
    pub cells: Vec<CellOutcome>,
    pub summaries: Vec<ConfigSummary>,
    pub paired: Vec<PairedRow>,
}

/// Runs every cell on the current rayon pool, then reduces in cell order.
/// A diverging cell is recorded as a failure and the rest still run.
pub fn cmd_convergence(spec: &ExperimentSpec) -> Result<ConvergenceBundle> {
    let instance = spec.instance()?;
    let hash = config_hash(spec)?;
    let streams = Streams::new(spec.instance_seed);
    let spectra = instance
        .graphs
        .iter()
        .map(|g| lambda2_hat(&g.model, spec.mixing.spectral_samples, &streams))
        .collect::<Result<Vec<_>>>()?;

    let mut jobs = Vec::new();
    for gi in 0..instance.graphs.len() {
        for ri in 0..spec.runs.len() {
            for &seed in &spec.seeds {
                jobs.push((gi, ri, seed));
            }
        }
    }
    let mixings: Vec<Mixing> = instance.graphs.iter().map(|g| g.mixing()).collect();
    let cells: Vec<CellOutcome> = jobs
        .par_iter()
        .map(|&(gi, ri, seed)| {
            let cfg = spec.runs[ri].config(seed);
            let result = run(&instance.problem, &instance.constants, &mixings[gi], &cfg).map_err(|e| e.to_string());
            CellOutcome {
                graph: gi,
                run: ri,
                seed,
                result,
            }
        })
        .collect();

    let mut summaries = Vec::new();
    for (gi, spectral) in spectra.iter().enumerate() {
        for ri in 0..spec.runs.len() {
            let group: Vec<&CellOutcome> = cells.iter().filter(|c| c.graph == gi && c.run == ri).collect();
            summaries.push(summarize(spec, &instance, spectral, gi, ri, &group)?);
        }
    }

    let mut paired = Vec::new();
    for gi in 0..instance.graphs.len() {
        for (di, dr) in spec.runs.iter().enumerate() {
            if dr.algo != Algorithm::FedDec {
                continue;
            }
            for (ai, ar) in spec.runs.iter().enumerate() {
                if ar.algo != Algorithm::FedAvg || !dr.paired_with(ar) {
                    continue;
                }
                for &seed in &spec.seeds {
                    let find = |ri| {
                        cells
                            .iter()
                            .find(|c| c.graph == gi && c.run == ri && c.seed == seed)
                            .and_then(|c| c.result.as_ref().ok())
                    };
                    if let (Some(d), Some(a)) = (find(di), find(ai)) {
                        paired.push(PairedRow {
                            graph: gi,
                            feddec_run: di,
                            fedavg_run: ai,
                            seed,
                            feddec_final_gap: d.final_gap(),
                            fedavg_final_gap: a.final_gap(),
                        });
                    }
                }
            }
        }
    }

    Ok(ConvergenceBundle {
        spec: spec.clone(),
        hash,
        instance,
        spectra,
        cells,
        summaries,
        paired,
    })
}

fn summarize(
    spec: &ExperimentSpec,
    instance: &Instance,
    spectral: &SpectralReport,
    gi: usize,
    ri: usize,
    group: &[&CellOutcome],
) -> Result<ConfigSummary> {
    let ok: Vec<&RunTrace> = group.iter().filter_map(|c| c.result.as_ref().ok()).collect();
    let rs = &spec.runs[ri];
    let finals: Vec<f64> = ok.iter().map(|t| t.final_gap()).collect();
    let (final_gap_mean, final_gap_sd) = mean_sd(&finals);
    let tails: Vec<f64> = ok
        .iter()
        .map(|t| {
            let k = (t.rows.len() / 10).max(1);
            t.rows[t.rows.len() - k..].iter().map(|r| r.gap).sum::<f64>() / k as f64
        })
        .collect();
    let dists: Vec<f64> = ok.iter().filter_map(|t| t.rows.last().map(|r| r.dist_sq)).collect();
    let peers: Vec<f64> = ok.iter().map(|t| t.peer_messages as f64).collect();
    let servers: Vec<f64> = ok.iter().map(|t| t.server_messages as f64).collect();

    let theory = if rs.algo == Algorithm::FedDec && !ok.is_empty() {
        let g_sq = ok.iter().map(|t| t.grad_norm_max).fold(0.0, f64::max);
        let z0 = DVector::zeros(instance.problem.dim());
        let consts = instance.constants.clone().with_g_sq(g_sq);
        TheoryInputs::from_problem(
            &consts,
            spectral.lambda2_hat,
            rs.participants,
            rs.local_steps,
            rs.batch_size,
            &z0,
        )
        .and_then(TheoryConstants::new)
        .ok()
    } else {
        None
    };

    let curve = ok.first().map(|first| {
        let k = ok.len() as f64;
        let rows = first.rows.len();
        let avg = |f: &dyn Fn(&RunTrace, usize) -> f64| -> Vec<f64> {
            (0..rows).map(|j| ok.iter().map(|t| f(t, j)).sum::<f64>() / k).collect()
        };
        let t: Vec<usize> = first.rows.iter().map(|r| r.t).collect();
        MeanCurve {
            eta: first.rows.iter().map(|r| r.eta).collect(),
            gap: avg(&|tr, j| tr.rows[j].gap),
            dist_sq: avg(&|tr, j| tr.rows[j].dist_sq),
            bound: theory
                .as_ref()
                .map(|tc| t.iter().map(|&s| tc.theorem_bound(s)).collect())
                .unwrap_or_default(),
            t,
        }
    });

    Ok(ConfigSummary {
        graph: gi,
        run: ri,
        seeds_ok: ok.len(),
        seeds_failed: group.len() - ok.len(),
        final_gap_mean,
        final_gap_sd,
        tail_gap_mean: mean_sd(&tails).0,
        final_dist_sq_mean: mean_sd(&dists).0,
        peer_messages_mean: mean_sd(&peers).0,
        server_messages_mean: mean_sd(&servers).0,
        theory,
        curve,
    })
}

impl ConvergenceBundle {
    pub fn graph_label(&self, gi: usize) -> String {
        self.instance.graphs[gi].label()
    }

    pub fn run_label(&self, ri: usize) -> String {
        self.spec.runs[ri].label()
    }

    pub fn summary(&self, graph_label: &str, run_label: &str) -> Option<&ConfigSummary> {
        self.summaries
            .iter()
            .find(|s| self.graph_label(s.graph) == graph_label && self.run_label(s.run) == run_label)
    }

    fn seeds(&self) -> String {
        seed_list(&self.spec.seeds)
    }

    pub fn trace_csv(&self, cell: &CellOutcome) -> Option<(String, String)> {
        let tr = cell.result.as_ref().ok()?;
        let head = preamble(&self.hash, &cell.seed.to_string());
        Some((format!("{head}{}", tr.to_csv()), format!("{head}{}", tr.rounds_csv())))
    }

    pub fn mean_csv(&self, s: &ConfigSummary) -> Option<String> {
        let c = s.curve.as_ref()?;
        let mut out = preamble(&self.hash, &self.seeds());
        out.push_str("t,eta,mean_gap,mean_dist_sq,theorem_bound\n");
        for j in 0..c.t.len() {
            let b = c.bound.get(j).copied();
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                c.t[j],
                c.eta[j],
                c.gap[j],
                c.dist_sq[j],
                opt(b)
            ));
        }
        Some(out)
    }

    pub fn summary_csv(&self) -> String {
        let mut out = preamble(&self.hash, &self.seeds());
        out.push_str(
            "graph,run,algo,local_steps,participants,seeds_ok,seeds_failed,final_gap_mean,final_gap_sd,\
             tail_gap_mean,final_dist_sq_mean,peer_messages_mean,server_messages_mean,lambda2_hat,alpha,b,\
             theorem_bound_final\n",
        );
        for s in &self.summaries {
            let rs = &self.spec.runs[s.run];
            let last_t = s.curve.as_ref().and_then(|c| c.t.last().copied());
            let (l2, alpha, b, bound) = match &s.theory {
                Some(tc) => (
                    Some(tc.inputs.lambda2_hat),
                    Some(tc.alpha),
                    Some(tc.b),
                    last_t.map(|t| tc.theorem_bound(t)),
                ),
                None => (None, None, None, None),
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                self.graph_label(s.graph),
                rs.label(),
                rs.algo.name(),
                rs.local_steps,
                rs.participants,
                s.seeds_ok,
                s.seeds_failed,
                s.final_gap_mean,
                s.final_gap_sd,
                s.tail_gap_mean,
                s.final_dist_sq_mean,
                s.peer_messages_mean,
                s.server_messages_mean,
                opt(l2),
                opt(alpha),
                opt(b),
                opt(bound)
            ));
        }
        out
    }

    pub fn paired_csv(&self) -> String {
        let mut out = preamble(&self.hash, &self.seeds());
        out.push_str("graph,feddec_run,fedavg_run,seed,feddec_final_gap,fedavg_final_gap,difference,ratio\n");
        for p in &self.paired {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                self.graph_label(p.graph),
                self.run_label(p.feddec_run),
                self.run_label(p.fedavg_run),
                p.seed,
                p.feddec_final_gap,
                p.fedavg_final_gap,
                p.fedavg_final_gap - p.feddec_final_gap,
                p.fedavg_final_gap / p.feddec_final_gap
            ));
        }
        out
    }

    pub fn failures_csv(&self) -> String {
        let mut out = preamble(&self.hash, &self.seeds());
        out.push_str("graph,run,seed,error\n");
        for c in &self.cells {
            if let Err(e) = &c.result {
                out.push_str(&format!(
                    "{},{},{},\"{}\"\n",
                    self.graph_label(c.graph),
                    self.run_label(c.run),
                    c.seed,
                    e.replace('"', "'")
                ));
            }
        }
        out
    }

    pub fn graphs_csv(&self) -> String {
        let mut out = preamble(&self.hash, &self.spec.instance_seed.to_string());
        out.push_str("graph,n,edges,rejections,lambda2_hat,alpha,method,stderr\n");
        for (g, s) in self.instance.graphs.iter().zip(&self.spectra) {
            let method = match s.method {
                SpectralMethod::ExactFixedW => "exact".to_string(),
                SpectralMethod::MonteCarlo { samples } => format!("monte_carlo_{samples}"),
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                g.label(),
                g.graph.n(),
                g.graph.edge_count(),
                g.rejections,
                s.lambda2_hat,
                s.alpha,
                method,
                opt(s.stderr)
            ));
        }
        out
    }

    /// Writes the full bundle below `out`.
    pub fn write(&self, out: &OutputDir) -> Result<()> {
        out.write("config.toml", &self.spec.to_toml()?)?;
        out.write("summary.csv", &self.summary_csv())?;
        out.write("paired.csv", &self.paired_csv())?;
        out.write("failures.csv", &self.failures_csv())?;
        out.write("graphs.csv", &self.graphs_csv())?;
        for (gi, g) in self.instance.graphs.iter().enumerate() {
            out.write(
                format!("graphs/{}.edges", self.graph_label(gi)),
                &g.graph.to_edge_list(),
            )?;
        }
        for s in &self.summaries {
            if let Some(csv) = self.mean_csv(s) {
                out.write(
                    format!("mean/{}__{}.csv", self.graph_label(s.graph), self.run_label(s.run)),
                    &csv,
                )?;
            }
            if let Some(tc) = &s.theory {
                out.write(
                    format!("theory/{}__{}.txt", self.graph_label(s.graph), self.run_label(s.run)),
                    &tc.to_kv(),
                )?;
            }
        }
        for c in &self.cells {
            if let Some((trace, rounds)) = self.trace_csv(c) {
                let stem = format!(
                    "traces/{}/{}/seed{}",
                    self.graph_label(c.graph),
                    self.run_label(c.run),
                    c.seed
                );
                out.write(format!("{stem}.csv"), &trace)?;
                out.write(format!("{stem}_rounds.csv"), &rounds)?;
            }
        }
        Ok(())
    }
}
