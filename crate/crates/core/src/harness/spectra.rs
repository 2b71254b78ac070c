//! `λ̂₂` and `α` for a single graph model, plus the α curve.

use serde::Serialize;

use super::spec::GraphSpec;
use super::{config_hash, opt, preamble, OutputDir};
use crate::error::Result;
use crate::graph::Graph;
use crate::mixing::{alpha_of, lambda2_hat, MixingModel, SpectralMethod, SpectralReport, WeightRule};
use crate::rng::Streams;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectraParams {
    pub graph: GraphSpec,
    pub n: usize,
    pub activation_prob: f64,
    pub weight_rule: WeightRule,
    pub samples: usize,
    pub seed: u64,
}

impl Default for SpectraParams {
    fn default() -> Self {
        Self {
            graph: GraphSpec::Geographic {
                radius: 0.35,
                augment_path: false,
            },
            n: 20,
            activation_prob: 1.0,
            weight_rule: WeightRule::default(),
            samples: crate::mixing::DEFAULT_MC_SAMPLES,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SpectraOutput {
    pub params: SpectraParams,
    pub graph: Graph,
    pub rejections: usize,
    pub report: SpectralReport,
    pub hash: String,
}

/// `(x, α(x))` for `x = i/100`, `i = 0..=99`.
pub fn alpha_curve() -> Vec<(f64, f64)> {
    (0..100)
        .map(|i| {
            let x = i as f64 / 100.0;
            (x, alpha_of(x).unwrap_or(f64::NAN))
        })
        .collect()
}

pub fn cmd_spectra(params: &SpectraParams) -> Result<SpectraOutput> {
    let streams = Streams::new(params.seed);
    let (graph, rejections) = params.graph.draw_connected(params.n, &streams, 0, 0)?;
    let model = MixingModel::new(graph.clone(), params.activation_prob, params.weight_rule)?;
    let report = lambda2_hat(&model, params.samples, &streams)?;
    Ok(SpectraOutput {
        params: params.clone(),
        graph,
        rejections,
        report,
        hash: config_hash(params)?,
    })
}

impl SpectraOutput {
    pub fn to_kv(&self) -> String {
        let (method, samples) = match self.report.method {
            SpectralMethod::ExactFixedW => ("exact", String::new()),
            SpectralMethod::MonteCarlo { samples } => ("monte_carlo", samples.to_string()),
        };
        format!(
            "config_hash = {}\nseed = {}\ngraph = {}\nn = {}\nedges = {}\nrejections = {}\nactivation_prob = {}\n\
             weight_rule = {}\nmethod = {}\nsamples = {}\nlambda2_hat = {}\nalpha = {}\nstderr = {}\n",
            self.hash,
            self.params.seed,
            self.params.graph.label(),
            self.params.n,
            self.graph.edge_count(),
            self.rejections,
            self.params.activation_prob,
            self.params.weight_rule,
            method,
            samples,
            self.report.lambda2_hat,
            self.report.alpha,
            opt(self.report.stderr)
        )
    }

    pub fn curve_csv(&self) -> String {
        let mut out = preamble(&self.hash, &self.params.seed.to_string());
        out.push_str("lambda2_hat,alpha\n");
        for (x, a) in alpha_curve() {
            out.push_str(&format!("{x},{a}\n"));
        }
        out
    }

    pub fn write(&self, out: &OutputDir) -> Result<()> {
        out.write("spectra.txt", &self.to_kv())?;
        out.write("alpha_curve.csv", &self.curve_csv())?;
        out.write("graph.edges", &self.graph.to_edge_list())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn complete_graph_is_zero() {
        let out = cmd_spectra(&SpectraParams {
            graph: GraphSpec::Complete,
            n: 7,
            ..SpectraParams::default()
        })
        .unwrap();
        assert!(out.report.lambda2_hat < 1e-24);
        assert!(out.report.alpha < 1e-24);
    }

    #[test]
    fn curve_hits_nine_at_point_nine() {
        let c = alpha_curve();
        assert_eq!(c.len(), 100);
        assert_eq!(c[0], (0.0, 0.0));
        assert!((c[90].1 - 9.0).abs() < 1e-12);
        assert!((c[99].0 - 0.99).abs() < 1e-15);
    }

    #[test]
    fn partial_activation_reports_stderr() {
        let out = cmd_spectra(&SpectraParams {
            graph: GraphSpec::Path,
            n: 6,
            activation_prob: 0.5,
            samples: 500,
            ..SpectraParams::default()
        })
        .unwrap();
        assert!(matches!(out.report.method, SpectralMethod::MonteCarlo { samples: 500 }));
        assert!(out.report.stderr.unwrap() > 0.0);
    }
}
