//! FedDec and the FedAvg baseline.
//!
//! One iteration `t`: every node takes a mini-batch SGD step, FedDec then
//! averages with its neighbors through `Wᵗ`, and whenever `t + 1` is a
//! multiple of `H` the server averages `K` nodes drawn uniformly with
//! replacement and broadcasts the result to everyone. FedAvg is the same loop
//! without the neighbor averaging.

use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::mixing::{MixingMatrix, MixingModel};
use crate::problem::{ProblemConstants, RegressionProblem};
use crate::rng::{Stream, Streams};

/// Above this many iterations the trace keeps only about this many rows.
pub const MAX_LOGGED_ROWS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    FedDec,
    FedAvg,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::FedDec => "feddec",
            Algorithm::FedAvg => "fedavg",
        }
    }
}

/// Where node mini-batch indices come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BatchStreams {
    /// Node `i` draws from batch substream `i`.
    #[default]
    PerNode,
    /// Every node replays batch substream 0.
    Shared,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub algo: Algorithm,
    /// Total iterations `T`.
    pub iterations: usize,
    /// Local updates per server round `H`.
    pub local_steps: usize,
    /// Participants per server round `K`.
    pub participants: usize,
    /// Mini-batch size `m`.
    pub batch_size: usize,
    pub seed: u64,
    pub gamma_override: Option<f64>,
    pub record_consensus: bool,
    /// Keep the pre-broadcast states of every server round.
    pub record_snapshots: bool,
    /// Starting point `z¹`; zero when unset.
    pub initial: Option<DVector<f64>>,
    pub batch_streams: BatchStreams,
}

impl RunConfig {
    pub fn new(algo: Algorithm, iterations: usize, local_steps: usize, participants: usize, seed: u64) -> Self {
        Self {
            algo,
            iterations,
            local_steps,
            participants,
            batch_size: 1,
            seed,
            gamma_override: None,
            record_consensus: false,
            record_snapshots: false,
            initial: None,
            batch_streams: BatchStreams::PerNode,
        }
    }

    pub fn validate(&self, n: usize, d: usize) -> Result<()> {
        if self.local_steps == 0 {
            return param("H must be at least 1");
        }
        if self.iterations == 0 || !self.iterations.is_multiple_of(self.local_steps) {
            return param(format!(
                "T = {} must be a positive multiple of H = {}",
                self.iterations, self.local_steps
            ));
        }
        if self.participants == 0 || self.participants > n {
            return param(format!("K = {} must lie in [1, n = {n}]", self.participants));
        }
        if self.batch_size == 0 {
            return param("mini-batch size must be at least 1");
        }
        if let Some(g) = self.gamma_override {
            if !(g > 0.0) {
                return param(format!("gamma must be positive, got {g}"));
            }
        }
        if let Some(z) = &self.initial {
            if z.len() != d {
                return Err(Error::Dimension {
                    expected: d,
                    got: z.len(),
                });
            }
        }
        Ok(())
    }

    /// Row stride of the trace: 1 up to `MAX_LOGGED_ROWS` iterations, else `⌈T / MAX⌉`.
    pub fn log_stride(&self) -> usize {
        self.iterations.div_ceil(MAX_LOGGED_ROWS).max(1)
    }
}

/// Source of the averaging matrices.
#[derive(Debug, Clone)]
pub enum Mixing {
    /// No neighbor averaging.
    Identity,
    /// The same matrix at every iteration.
    Fixed(MixingMatrix),
    /// A fresh draw from the model at every iteration.
    Random(MixingModel),
}

impl Mixing {
    pub fn n(&self) -> Option<usize> {
        match self {
            Mixing::Identity => None,
            Mixing::Fixed(w) => Some(w.n()),
            Mixing::Random(m) => Some(m.graph().n()),
        }
    }
}

/// `η_t = 2 / (μ (γ + t))`.
pub fn step_size(t: usize, mu: f64, gamma: f64) -> Result<f64> {
    if t == 0 {
        return param("iterations are counted from 1");
    }
    if !(mu > 0.0) || !(gamma > 0.0) {
        return param(format!("step size needs mu > 0 and gamma > 0 (got {mu}, {gamma})"));
    }
    Ok(2.0 / (mu * (gamma + t as f64)))
}

/// `γ = max(8 L / μ - 1, H)`.
pub fn default_gamma(smoothness: f64, mu: f64, local_steps: usize) -> f64 {
    (8.0 * smoothness / mu - 1.0).max(local_steps as f64)
}

/// `K` iid uniform indices from `0..n`; duplicates allowed.
pub fn sample_participants<R: Rng + ?Sized>(k: usize, n: usize, rng: &mut R) -> Vec<usize> {
    (0..k).map(|_| rng.random_range(0..n)).collect()
}

/// Mean of a set of equally sized vectors, summed in index order.
pub fn mean_state(states: &[DVector<f64>]) -> DVector<f64> {
    let mut acc = states[0].clone();
    for s in &states[1..] {
        acc += s;
    }
    acc / states.len() as f64
}

/// `Σ_i ||z_i - z̄||²`. Exactly zero when all states are identical.
pub fn consensus_residual(states: &[DVector<f64>]) -> f64 {
    if states.is_empty() || states.iter().all(|s| s == &states[0]) {
        return 0.0;
    }
    let mean = mean_state(states);
    states.iter().map(|s| (s - &mean).norm_squared()).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub t: usize,
    pub eta: f64,
    /// `f(z̄ᵗ) - f*`.
    pub gap: f64,
    /// `||z̄ᵗ - z*||²`.
    pub dist_sq: f64,
    pub consensus: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerRound {
    /// Round time, a multiple of `H`.
    pub t: usize,
    pub eta: f64,
    pub participants: Vec<usize>,
    /// `x_iᵗ` for every node, just before the broadcast.
    pub snapshot: Option<Vec<DVector<f64>>>,
}

#[derive(Debug, Clone)]
pub struct RunTrace {
    pub algo: Algorithm,
    pub seed: u64,
    pub mu: f64,
    pub gamma: f64,
    pub local_steps: usize,
    pub participants: usize,
    /// Rows for `t = 1 ..= T + 1` (subsampled for long runs).
    pub rows: Vec<TraceRow>,
    /// Largest `||∇F_i(z, ξ)||²` seen on any node at any step.
    pub grad_norm_max: f64,
    pub rounds: Vec<ServerRound>,
    pub peer_messages: u64,
    pub server_messages: u64,
    pub final_z: DVector<f64>,
    pub wall_time: f64,
}

impl RunTrace {
    pub fn final_gap(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.gap)
    }

    /// `t,eta,gap,dist_sq,consensus` rows; `consensus` is empty when not recorded.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,eta,gap,dist_sq,consensus\n");
        for r in &self.rows {
            let c = r.consensus.map(|c| format!("{c:e}")).unwrap_or_default();
            let _ = writeln!(out, "{},{:e},{:e},{:e},{}", r.t, r.eta, r.gap, r.dist_sq, c);
        }
        out
    }

    /// `round_t,participant_indices`, indices separated by `;`.
    pub fn rounds_csv(&self) -> String {
        let mut out = String::from("round_t,participant_indices\n");
        for r in &self.rounds {
            let ids: Vec<String> = r.participants.iter().map(usize::to_string).collect();
            let _ = writeln!(out, "{},{}", r.t, ids.join(";"));
        }
        out
    }
}

/// Runs FedDec (or FedAvg) for `T` iterations and logs the trace.
///
/// `constants` supplies `μ`, `L`, `z*` and `f*`. For FedAvg the `mixing`
/// argument is ignored.
pub fn run(
    problem: &RegressionProblem,
    constants: &ProblemConstants,
    mixing: &Mixing,
    config: &RunConfig,
) -> Result<RunTrace> {
    let n = problem.n();
    let d = problem.dim();
    config.validate(n, d)?;
    if let Some(mn) = mixing.n() {
        if config.algo == Algorithm::FedDec && mn != n {
            return Err(Error::Dimension { expected: n, got: mn });
        }
    }
    let mu = constants.mu;
    let h = config.local_steps;
    let gamma = config
        .gamma_override
        .unwrap_or_else(|| default_gamma(constants.smoothness, mu, h));
    step_size(1, mu, gamma)?;

    let started = Instant::now();
    let streams = Streams::new(config.seed);
    let mut batch_rngs: Vec<ChaCha8Rng> = (0..n)
        .map(|i| match config.batch_streams {
            BatchStreams::PerNode => streams.rng(Stream::Batch, i as u64),
            BatchStreams::Shared => streams.rng(Stream::Batch, 0),
        })
        .collect();
    let mut link_rng = streams.rng(Stream::Links, 0);
    let mut server_rng = streams.rng(Stream::Server, 0);

    let mix = match config.algo {
        Algorithm::FedAvg => &Mixing::Identity,
        Algorithm::FedDec => mixing,
    };
    let fixed_links = match mix {
        Mixing::Fixed(w) => {
            let m = w.matrix();
            (0..n)
                .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
                .filter(|&(i, j)| m[(i, j)] != 0.0 || m[(j, i)] != 0.0)
                .count()
        }
        _ => 0,
    };

    let z1 = config.initial.clone().unwrap_or_else(|| DVector::zeros(d));
    let mut z: Vec<DVector<f64>> = vec![z1; n];
    let stride = config.log_stride();
    let t_end = config.iterations;

    let mut trace = RunTrace {
        algo: config.algo,
        seed: config.seed,
        mu,
        gamma,
        local_steps: h,
        participants: config.participants,
        rows: Vec::with_capacity(t_end.min(MAX_LOGGED_ROWS) + 2),
        grad_norm_max: 0.0,
        rounds: Vec::new(),
        peer_messages: 0,
        server_messages: 0,
        final_z: DVector::zeros(d),
        wall_time: 0.0,
    };

    let log_row = |t: usize, z: &[DVector<f64>], trace: &mut RunTrace| -> Result<()> {
        let zbar = mean_state(z);
        let gap = problem.global_cost(&zbar)? - constants.f_star;
        trace.rows.push(TraceRow {
            t,
            eta: 2.0 / (mu * (gamma + t as f64)),
            gap,
            dist_sq: (&zbar - &constants.z_star).norm_squared(),
            consensus: config.record_consensus.then(|| consensus_residual(z)),
        });
        Ok(())
    };

    for t in 1..=t_end {
        if (t - 1) % stride == 0 {
            log_row(t, &z, &mut trace)?;
        }
        let eta = 2.0 / (mu * (gamma + t as f64));

        let w_t = match mix {
            Mixing::Identity => None,
            Mixing::Fixed(w) => {
                trace.peer_messages += 2 * fixed_links as u64;
                Some(std::borrow::Cow::Borrowed(w))
            }
            Mixing::Random(model) => {
                let (w, active) = model.sample(&mut link_rng);
                trace.peer_messages += 2 * active as u64;
                Some(std::borrow::Cow::Owned(w))
            }
        };

        let mut half = Vec::with_capacity(n);
        for (i, zi) in z.iter().enumerate() {
            let g = problem.stochastic_gradient(i, zi, config.batch_size, &mut batch_rngs[i])?;
            trace.grad_norm_max = trace.grad_norm_max.max(g.norm_squared());
            half.push(zi - g * eta);
        }
        let x = match &w_t {
            None => half,
            Some(w) => w.apply(&half),
        };
        if let Some((node, xi)) = x.iter().enumerate().find(|(_, xi)| xi.iter().any(|v| !v.is_finite())) {
            return Err(Error::Divergence {
                t,
                node,
                magnitude: xi.amax(),
            });
        }

        if (t + 1) % h == 0 {
            let pool = sample_participants(config.participants, n, &mut server_rng);
            let mut acc = x[pool[0]].clone();
            for &j in &pool[1..] {
                acc += &x[j];
            }
            let avg = acc / config.participants as f64;
            trace.server_messages += (config.participants + n) as u64;
            trace.rounds.push(ServerRound {
                t: t + 1,
                eta: 2.0 / (mu * (gamma + (t + 1) as f64)),
                participants: pool,
                snapshot: config.record_snapshots.then(|| x.clone()),
            });
            z = vec![avg; n];
        } else {
            z = x;
        }
    }
    log_row(t_end + 1, &z, &mut trace)?;
    trace.final_z = mean_state(&z);
    trace.wall_time = started.elapsed().as_secs_f64();
    Ok(trace)
}
