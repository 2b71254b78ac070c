//! Convergence-bound evaluation and empirical monitors for the intermediate
//! inequalities.
//!
//! The monitors compare seed-averaged quantities against their bounds, since
//! every inequality here is a statement about expectations. `G²` is always the
//! largest squared stochastic gradient norm observed on the runs themselves.

use std::fmt::Write as _;

use nalgebra::DVector;

use crate::algorithms::{default_gamma, mean_state, sample_participants, RunTrace};
use crate::error::{param, Error, Result};
use crate::mixing::alpha_of;
use crate::problem::ProblemConstants;
use crate::rng::{Stream, Streams};

/// Measured ingredients of the bound.
#[derive(Debug, Clone, PartialEq)]
pub struct TheoryInputs {
    pub lambda2_hat: f64,
    pub mu: f64,
    pub smoothness: f64,
    pub g_sq: f64,
    /// Variance of the mini-batch gradient (already divided by the batch size).
    pub sigma_bar_sq: f64,
    pub gamma_het: f64,
    pub participants: usize,
    pub local_steps: usize,
    pub n: usize,
    pub initial_distance_sq: f64,
}

impl TheoryInputs {
    /// Collects the inputs from measured problem constants. `constants.g_sq`
    /// must have been filled from a run.
    pub fn from_problem(
        constants: &ProblemConstants,
        lambda2_hat: f64,
        participants: usize,
        local_steps: usize,
        batch_size: usize,
        initial: &DVector<f64>,
    ) -> Result<Self> {
        let g_sq = constants
            .g_sq
            .ok_or_else(|| Error::MissingLog("G² has not been measured on a run".into()))?;
        if batch_size == 0 {
            return param("batch size must be positive");
        }
        Ok(Self {
            lambda2_hat,
            mu: constants.mu,
            smoothness: constants.smoothness,
            g_sq,
            sigma_bar_sq: constants.sigma_bar_sq / batch_size as f64,
            gamma_het: constants.gamma_het,
            participants,
            local_steps,
            n: constants.sigma_sq.len(),
            initial_distance_sq: (initial - &constants.z_star).norm_squared(),
        })
    }
}

/// `(4/K + 8) α H G² + 6 L Γ + σ̄² / n`.
#[allow(clippy::too_many_arguments)]
pub fn b_constant(
    alpha: f64,
    local_steps: usize,
    participants: usize,
    g_sq: f64,
    smoothness: f64,
    gamma_het: f64,
    sigma_bar_sq: f64,
    n: usize,
) -> f64 {
    (4.0 / participants as f64 + 8.0) * alpha * local_steps as f64 * g_sq
        + 6.0 * smoothness * gamma_het
        + sigma_bar_sq / n as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct TheoryConstants {
    pub alpha: f64,
    pub gamma: f64,
    pub b: f64,
    pub inputs: TheoryInputs,
}

impl TheoryConstants {
    pub fn new(inputs: TheoryInputs) -> Result<Self> {
        if !(inputs.mu > 0.0) || inputs.smoothness < inputs.mu {
            return param(format!(
                "need L >= mu > 0 (got L = {}, mu = {})",
                inputs.smoothness, inputs.mu
            ));
        }
        if inputs.participants == 0 || inputs.local_steps == 0 || inputs.n == 0 {
            return param("K, H and n must be positive");
        }
        let alpha = alpha_of(inputs.lambda2_hat)?;
        let gamma = default_gamma(inputs.smoothness, inputs.mu, inputs.local_steps);
        let b = b_constant(
            alpha,
            inputs.local_steps,
            inputs.participants,
            inputs.g_sq,
            inputs.smoothness,
            inputs.gamma_het,
            inputs.sigma_bar_sq,
            inputs.n,
        );
        Ok(Self {
            alpha,
            gamma,
            b,
            inputs,
        })
    }

    /// Upper bound on `E f(z̄ᵗ) - f*`:
    /// `L/(γ+t) · (2B/μ² + (γ+1)/2 · ||z¹ - z*||²)`.
    pub fn theorem_bound(&self, t: usize) -> f64 {
        let i = &self.inputs;
        i.smoothness / (self.gamma + t as f64)
            * (2.0 * self.b / (i.mu * i.mu) + (self.gamma + 1.0) / 2.0 * i.initial_distance_sq)
    }

    /// Bound on `E Σ_i ||z_iᵗ - z̄ᵗ||²` at step size `eta`.
    pub fn consensus_bound(&self, eta: f64) -> f64 {
        let i = &self.inputs;
        eta * eta * 4.0 * self.alpha * i.local_steps as f64 * i.n as f64 * i.g_sq
    }

    /// Bound on `E ||x̄ᵗ - z̄ᵗ||²` at a server round with step size `eta`.
    pub fn sampling_bound(&self, eta: f64) -> f64 {
        let i = &self.inputs;
        eta * eta * 4.0 * self.alpha * i.local_steps as f64 * i.g_sq / i.participants as f64
    }

    /// Flat `key = value` listing.
    pub fn to_kv(&self) -> String {
        let i = &self.inputs;
        let mut out = String::new();
        for (k, v) in [
            ("alpha", self.alpha),
            ("gamma", self.gamma),
            ("B", self.b),
            ("lambda2_hat", i.lambda2_hat),
            ("mu", i.mu),
            ("L", i.smoothness),
            ("G_sq", i.g_sq),
            ("sigma_bar_sq", i.sigma_bar_sq),
            ("Gamma", i.gamma_het),
            ("K", i.participants as f64),
            ("H", i.local_steps as f64),
            ("n", i.n as f64),
            ("initial_distance_sq", i.initial_distance_sq),
        ] {
            let _ = writeln!(out, "{k} = {v:e}");
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Fail,
    /// `α = 0`: the bound is identically zero and is not enforced.
    Degenerate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonitorPoint {
    pub t: usize,
    pub empirical: f64,
    pub bound: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonitorReport {
    pub name: &'static str,
    pub points: Vec<MonitorPoint>,
    pub max_ratio: f64,
    /// Fraction of points where the seed-averaged value exceeds the bound.
    pub exceed_fraction: f64,
    /// Individual (run, t) pairs above the bound; informational only.
    pub single_run_exceedances: usize,
    /// Mean of the empirical column over all points.
    pub mean_empirical: f64,
    pub verdict: Verdict,
}

impl MonitorReport {
    fn assemble(name: &'static str, alpha: f64, points: Vec<MonitorPoint>, single_run_exceedances: usize) -> Self {
        let max_ratio = points.iter().map(|p| p.ratio).fold(0.0, f64::max);
        let over = points.iter().filter(|p| p.ratio > 1.0).count();
        let len = points.len().max(1) as f64;
        let verdict = if alpha == 0.0 {
            Verdict::Degenerate
        } else if over == 0 {
            Verdict::Pass
        } else {
            Verdict::Fail
        };
        Self {
            name,
            mean_empirical: points.iter().map(|p| p.empirical).sum::<f64>() / len,
            exceed_fraction: over as f64 / len,
            max_ratio,
            points,
            single_run_exceedances,
            verdict,
        }
    }

    pub fn to_kv(&self) -> String {
        format!(
            "monitor = {}\nverdict = {:?}\npoints = {}\nmax_ratio = {:e}\nexceed_fraction = {:e}\nsingle_run_exceedances = {}\nmean_empirical = {:e}\n",
            self.name,
            self.verdict,
            self.points.len(),
            self.max_ratio,
            self.exceed_fraction,
            self.single_run_exceedances,
            self.mean_empirical
        )
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,empirical,bound,ratio\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{:e},{:e},{:e}", p.t, p.empirical, p.bound, p.ratio);
        }
        out
    }
}

fn ratio(empirical: f64, bound: f64) -> f64 {
    if bound > 0.0 {
        empirical / bound
    } else if empirical == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Seed-averaged consensus residual against `η_t² 4 α H n G²` at every logged `t`.
pub fn lemma2_monitor(traces: &[RunTrace], tc: &TheoryConstants) -> Result<MonitorReport> {
    let first = traces
        .first()
        .ok_or_else(|| Error::MissingLog("no traces given".into()))?;
    let rows = first.rows.len();
    for tr in traces {
        if tr.rows.len() != rows || tr.rows.iter().zip(&first.rows).any(|(a, b)| a.t != b.t) {
            return param("traces do not share a logging schedule");
        }
        if tr.rows.iter().any(|r| r.consensus.is_none()) {
            return Err(Error::MissingLog("trace was recorded without consensus logging".into()));
        }
    }
    let mut single = 0;
    let points = (0..rows)
        .map(|k| {
            let row = &first.rows[k];
            let bound = tc.consensus_bound(row.eta);
            let vals: Vec<f64> = traces.iter().map(|tr| tr.rows[k].consensus.unwrap_or(0.0)).collect();
            single += vals.iter().filter(|&&v| v > bound).count();
            let empirical = vals.iter().sum::<f64>() / vals.len() as f64;
            MonitorPoint {
                t: row.t,
                empirical,
                bound,
                ratio: ratio(empirical, bound),
            }
        })
        .collect();
    Ok(MonitorReport::assemble("consensus", tc.alpha, points, single))
}

/// `E_S ||x̄ - (1/K) Σ_{j∈S} x_j||²` by redrawing `S` against frozen states.
pub fn resampled_sampling_variance(
    states: &[DVector<f64>],
    participants: usize,
    resamples: usize,
    streams: &Streams,
    index: u64,
) -> f64 {
    let xbar = mean_state(states);
    let mut rng = streams.rng(Stream::Monitor, index);
    let mut total = 0.0;
    for _ in 0..resamples {
        let pool = sample_participants(participants, states.len(), &mut rng);
        let mut acc = states[pool[0]].clone();
        for &j in &pool[1..] {
            acc += &states[j];
        }
        total += (acc / participants as f64 - &xbar).norm_squared();
    }
    total / resamples as f64
}

/// Seed-averaged server-sampling variance against `(1/K) η_t² 4 α H G²` at
/// every server round. Needs traces recorded with snapshots.
pub fn lemma3_monitor(traces: &[RunTrace], tc: &TheoryConstants, resamples: usize, seed: u64) -> Result<MonitorReport> {
    let first = traces
        .first()
        .ok_or_else(|| Error::MissingLog("no traces given".into()))?;
    if resamples == 0 {
        return param("need at least one resample");
    }
    let rounds = first.rounds.len();
    for tr in traces {
        if tr.rounds.len() != rounds {
            return param("traces do not share a round schedule");
        }
        if tr.rounds.iter().any(|r| r.snapshot.is_none()) {
            return Err(Error::MissingLog("trace was recorded without round snapshots".into()));
        }
    }
    let streams = Streams::new(seed);
    let k = tc.inputs.participants;
    let mut single = 0;
    let points = (0..rounds)
        .map(|r| {
            let bound = tc.sampling_bound(first.rounds[r].eta);
            let vals: Vec<f64> = traces
                .iter()
                .enumerate()
                .map(|(s, tr)| {
                    let states = tr.rounds[r].snapshot.as_deref().unwrap_or_default();
                    resampled_sampling_variance(states, k, resamples, &streams, ((s as u64) << 32) | r as u64)
                })
                .collect();
            single += vals.iter().filter(|&&v| v > bound).count();
            let empirical = vals.iter().sum::<f64>() / vals.len() as f64;
            MonitorPoint {
                t: first.rounds[r].t,
                empirical,
                bound,
                ratio: ratio(empirical, bound),
            }
        })
        .collect();
    Ok(MonitorReport::assemble("sampling", tc.alpha, points, single))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceViolation {
    pub t: usize,
    pub delta: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceCheck {
    pub passed: bool,
    pub first_violation: Option<SequenceViolation>,
    /// Largest `Δᵗ / (v/(γ+t))` over the checked horizon.
    pub max_ratio: f64,
}

/// Relative slack allowed for floating-point rounding in the recursion.
const RECURSION_SLACK: f64 = 1e-12;

/// Runs the worst case `Δ^{t+1} = (1 - μη_t) Δᵗ + η_t² B` from `Δ¹ = delta1`
/// with `η_t = 2/(μ(γ+t))` and checks `Δᵗ ≤ v/(γ+t)` for `t = 1..=horizon`,
/// where `v = max(4B/μ², (γ+1) Δ¹)`.
pub fn lemma4_sequence_check(mu: f64, gamma: f64, b: f64, delta1: f64, horizon: usize) -> Result<SequenceCheck> {
    if !(mu > 0.0) || !(gamma > 0.0) || !(b >= 0.0) || !(delta1 >= 0.0) {
        return param(format!(
            "need mu, gamma > 0 and B, delta1 >= 0 (got {mu}, {gamma}, {b}, {delta1})"
        ));
    }
    let v = (4.0 * b / (mu * mu)).max((gamma + 1.0) * delta1);
    let mut delta = delta1;
    let mut max_ratio: f64 = 0.0;
    for t in 1..=horizon {
        let tt = gamma + t as f64;
        let bound = v / tt;
        let r = if bound > 0.0 {
            delta / bound
        } else if delta == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        max_ratio = max_ratio.max(r);
        if delta > bound * (1.0 + RECURSION_SLACK) {
            return Ok(SequenceCheck {
                passed: false,
                first_violation: Some(SequenceViolation { t, delta, bound }),
                max_ratio,
            });
        }
        let eta = 2.0 / (mu * tt);
        delta = (1.0 - mu * eta) * delta + eta * eta * b;
    }
    Ok(SequenceCheck {
        passed: true,
        first_violation: None,
        max_ratio,
    })
}
