//! Experiment description, read from TOML. Every field has a default, and the
//! defaults describe the reference setup: 20 agents, d = 25, M = 10, c_i = 2^i,
//! geographic graphs with r = 0.35 and r = 0.5, K = 2, m = 1, T = 5000,
//! H ∈ {10, 100}, ten seeds.

use std::path::PathBuf;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::algorithms::{Algorithm, Mixing, RunConfig};
use crate::error::{Error, Result};
use crate::graph::{generate_geographic, generate_random, sample_connected, Graph};
use crate::mixing::{MixingModel, WeightRule};
use crate::problem::{ProblemConstants, RegressionProblem};
use crate::rng::{Stream, Streams};

/// Redraws allowed per graph before giving up on connectivity.
pub const MAX_GRAPH_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProblemSpec {
    pub n: usize,
    pub d: usize,
    pub samples_per_node: usize,
    pub scale_base: f64,
}

impl Default for ProblemSpec {
    fn default() -> Self {
        Self {
            n: 20,
            d: 25,
            samples_per_node: 10,
            scale_base: 2.0,
        }
    }
}

/// One communication graph family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GraphSpec {
    Geographic {
        radius: f64,
        #[serde(default)]
        augment_path: bool,
    },
    Random {
        p: f64,
        #[serde(default)]
        augment_path: bool,
    },
    Complete,
    Path,
}

impl GraphSpec {
    pub fn label(&self) -> String {
        let (base, aug) = match *self {
            GraphSpec::Geographic { radius, augment_path } => (format!("geographic_r{radius}"), augment_path),
            GraphSpec::Random { p, augment_path } => (format!("random_p{p}"), augment_path),
            GraphSpec::Complete => ("complete".to_string(), false),
            GraphSpec::Path => ("path".to_string(), false),
        };
        if aug {
            format!("{base}+path")
        } else {
            base
        }
    }

    /// One raw draw (possibly disconnected).
    pub fn draw(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Graph> {
        let (g, aug) = match *self {
            GraphSpec::Geographic { radius, augment_path } => (generate_geographic(n, radius, rng)?, augment_path),
            GraphSpec::Random { p, augment_path } => (generate_random(n, p, rng)?, augment_path),
            GraphSpec::Complete => (Graph::complete(n)?, false),
            GraphSpec::Path => (Graph::path(n)?, false),
        };
        Ok(if aug { g.with_path() } else { g })
    }

    /// Connected draw number `realization`; attempt `a` uses graph substream
    /// `(slot << 40) | (realization << 20) | a`. Returns the rejection count too.
    pub fn draw_connected(&self, n: usize, streams: &Streams, slot: u64, realization: u64) -> Result<(Graph, usize)> {
        sample_connected(
            |attempt| {
                let mut rng = streams.rng(Stream::Graph, (slot << 40) | (realization << 20) | attempt as u64);
                self.draw(n, &mut rng)
            },
            MAX_GRAPH_ATTEMPTS,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixingSpec {
    pub weight_rule: WeightRule,
    pub activation_prob: f64,
    /// Monte Carlo draws for `λ̂₂` when links can fail.
    pub spectral_samples: usize,
}

impl Default for MixingSpec {
    fn default() -> Self {
        Self {
            weight_rule: WeightRule::default(),
            activation_prob: 1.0,
            spectral_samples: crate::mixing::DEFAULT_MC_SAMPLES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSpec {
    pub label: Option<String>,
    pub algo: Algorithm,
    pub iterations: usize,
    pub local_steps: usize,
    pub participants: usize,
    pub batch_size: usize,
    pub gamma_override: Option<f64>,
    pub record_consensus: bool,
}

impl Default for RunSpec {
    fn default() -> Self {
        Self {
            label: None,
            algo: Algorithm::FedDec,
            iterations: 5000,
            local_steps: 10,
            participants: 2,
            batch_size: 1,
            gamma_override: None,
            record_consensus: false,
        }
    }
}

impl RunSpec {
    pub fn label(&self) -> String {
        self.label
            .clone()
            .unwrap_or_else(|| format!("{}_H{}_K{}", self.algo.name(), self.local_steps, self.participants))
    }

    pub fn config(&self, seed: u64) -> RunConfig {
        let mut c = RunConfig::new(self.algo, self.iterations, self.local_steps, self.participants, seed);
        c.batch_size = self.batch_size;
        c.gamma_override = self.gamma_override;
        c.record_consensus = self.record_consensus;
        c
    }

    /// Same schedule and sampling, possibly different algorithm.
    pub fn paired_with(&self, other: &RunSpec) -> bool {
        self.iterations == other.iterations
            && self.local_steps == other.local_steps
            && self.participants == other.participants
            && self.batch_size == other.batch_size
            && self.gamma_override == other.gamma_override
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    /// Seed for the problem instance and the graphs.
    pub instance_seed: u64,
    /// Seeds of the algorithm runs (batches, link failures, server draws).
    pub seeds: Vec<u64>,
    pub output_dir: Option<PathBuf>,
    pub problem: ProblemSpec,
    pub mixing: MixingSpec,
    pub graphs: Vec<GraphSpec>,
    pub runs: Vec<RunSpec>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        let mut runs = Vec::new();
        for h in [10, 100] {
            for algo in [Algorithm::FedDec, Algorithm::FedAvg] {
                runs.push(RunSpec {
                    algo,
                    local_steps: h,
                    ..RunSpec::default()
                });
            }
        }
        Self {
            instance_seed: 0,
            seeds: (0..10).collect(),
            output_dir: None,
            problem: ProblemSpec::default(),
            mixing: MixingSpec::default(),
            graphs: vec![
                GraphSpec::Geographic {
                    radius: 0.35,
                    augment_path: false,
                },
                GraphSpec::Geographic {
                    radius: 0.5,
                    augment_path: false,
                },
            ],
            runs,
        }
    }
}

/// A realized communication graph of an experiment.
#[derive(Debug, Clone)]
pub struct GraphInstance {
    pub spec: GraphSpec,
    pub graph: Graph,
    pub rejections: usize,
    pub model: MixingModel,
}

impl GraphInstance {
    pub fn label(&self) -> String {
        self.spec.label()
    }

    pub fn mixing(&self) -> Mixing {
        if self.model.is_fixed() {
            Mixing::Fixed(self.model.base_weights().clone())
        } else {
            Mixing::Random(self.model.clone())
        }
    }
}

/// The problem and graphs shared by every run of an experiment.
#[derive(Debug, Clone)]
pub struct Instance {
    pub problem: RegressionProblem,
    pub constants: ProblemConstants,
    pub graphs: Vec<GraphInstance>,
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.problem;
        if p.n < 2 || p.d == 0 || p.samples_per_node == 0 {
            return Err(Error::Config(format!(
                "problem needs n >= 2, d >= 1, M >= 1 (got {}, {}, {})",
                p.n, p.d, p.samples_per_node
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.runs.iter().any(|r| r.algo == Algorithm::FedDec) && self.graphs.is_empty() {
            return Err(Error::Config("FedDec runs need at least one graph".into()));
        }
        if !(self.mixing.activation_prob > 0.0 && self.mixing.activation_prob <= 1.0) {
            return Err(Error::Config("activation_prob must lie in (0, 1]".into()));
        }
        for r in &self.runs {
            r.config(0)
                .validate(p.n, p.d)
                .map_err(|e| Error::Config(format!("run {}: {e}", r.label())))?;
        }
        let mut labels: Vec<String> = self.runs.iter().map(RunSpec::label).collect();
        labels.sort();
        labels.dedup();
        if labels.len() != self.runs.len() {
            return Err(Error::Config("run labels must be unique".into()));
        }
        Ok(())
    }

    /// Draws the problem (data substream 0) and one connected graph per graph
    /// spec (graph slot = spec index) from `instance_seed`.
    pub fn instance(&self) -> Result<Instance> {
        self.validate()?;
        let streams = Streams::new(self.instance_seed);
        let p = &self.problem;
        let problem = RegressionProblem::generate_synthetic(
            p.n,
            p.d,
            p.samples_per_node,
            p.scale_base,
            &mut streams.rng(Stream::Data, 0),
        )?;
        let constants = problem.constants()?;
        let graphs = self
            .graphs
            .iter()
            .enumerate()
            .map(|(slot, gs)| {
                let (graph, rejections) = gs.draw_connected(p.n, &streams, slot as u64, 0)?;
                let model = MixingModel::new(graph.clone(), self.mixing.activation_prob, self.mixing.weight_rule)?;
                Ok(GraphInstance {
                    spec: *gs,
                    graph,
                    rejections,
                    model,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Instance {
            problem,
            constants,
            graphs,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_reference_setup() {
        let spec = ExperimentSpec::from_toml("").unwrap();
        assert_eq!(spec, ExperimentSpec::default());
        assert_eq!(spec.runs.len(), 4);
        assert_eq!(spec.seeds.len(), 10);
        assert_eq!(spec.problem.d, 25);
    }

    #[test]
    fn toml_round_trip_and_overrides() {
        let text = r#"
            instance_seed = 3
            seeds = [1, 2]
            [problem]
            n = 6
            d = 2
            [mixing]
            weight_rule = "metropolis"
            activation_prob = 0.5
            [[graphs]]
            kind = "random"
            p = 0.5
            augment_path = true
            [[runs]]
            algo = "fedavg"
            iterations = 20
            local_steps = 5
        "#;
        let spec = ExperimentSpec::from_toml(text).unwrap();
        assert_eq!(spec.problem.samples_per_node, 10);
        assert_eq!(spec.mixing.weight_rule, WeightRule::Metropolis);
        assert_eq!(spec.graphs[0].label(), "random_p0.5+path");
        assert_eq!(spec.runs[0].label(), "fedavg_H5_K2");
        let back = ExperimentSpec::from_toml(&spec.to_toml().unwrap()).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(ExperimentSpec::from_toml("seeds = []").is_err());
        assert!(ExperimentSpec::from_toml("[[runs]]\niterations = 7\nlocal_steps = 2").is_err());
        assert!(ExperimentSpec::from_toml("bogus = 1").is_err());
        assert!(ExperimentSpec::from_toml("[mixing]\nactivation_prob = 0.0").is_err());
    }

    #[test]
    fn instance_is_deterministic() {
        let spec = ExperimentSpec {
            problem: ProblemSpec {
                n: 8,
                d: 3,
                samples_per_node: 5,
                scale_base: 1.5,
            },
            ..ExperimentSpec::default()
        };
        let a = spec.instance().unwrap();
        let b = spec.instance().unwrap();
        assert_eq!(a.problem, b.problem);
        for (x, y) in a.graphs.iter().zip(&b.graphs) {
            assert_eq!(x.graph, y.graph);
            assert!(x.graph.is_connected());
        }
    }
}
