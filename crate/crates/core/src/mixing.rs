//! Doubly stochastic mixing matrices over a communication graph, iid link
//! failures, and the spectral constants `|λ̂₂| = |λ₂(E[W Wᵀ])|` and
//! `α = |λ̂₂| / (1 - |λ̂₂|)`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::graph::Graph;
use crate::rng::{Stream, Streams};

/// Default number of Monte Carlo draws for [`lambda2_hat`].
pub const DEFAULT_MC_SAMPLES: usize = 10_000;

const MC_BATCHES: usize = 10;

/// How edge weights are derived from the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightRule {
    /// `W = I - L / λ_max(L)`.
    LaplacianMaxEig,
    /// Best constant edge weight, `W = I - 2L / (λ_max(L) + λ_2(L))`.
    /// Diagonal entries may be negative.
    #[default]
    LaplacianBestConstant,
    /// `W_ij = 1 / (1 + max(d_i, d_j))` on edges, remainder on the diagonal.
    Metropolis,
}

impl WeightRule {
    pub fn name(self) -> &'static str {
        match self {
            WeightRule::LaplacianMaxEig => "laplacian_max_eig",
            WeightRule::LaplacianBestConstant => "laplacian_best_constant",
            WeightRule::Metropolis => "metropolis",
        }
    }
}

impl fmt::Display for WeightRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WeightRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "laplacian_max_eig" => Ok(WeightRule::LaplacianMaxEig),
            "laplacian_best_constant" => Ok(WeightRule::LaplacianBestConstant),
            "metropolis" => Ok(WeightRule::Metropolis),
            other => param(format!("unknown weight rule `{other}`")),
        }
    }
}

/// One realization `Wᵗ` of the averaging weights.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingMatrix {
    w: DMatrix<f64>,
}

impl MixingMatrix {
    /// Wraps a square matrix without checking any invariant; see [`validate`].
    pub fn from_matrix(w: DMatrix<f64>) -> Result<Self> {
        if !w.is_square() {
            return Err(Error::Dimension {
                expected: w.nrows(),
                got: w.ncols(),
            });
        }
        Ok(Self { w })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            w: DMatrix::identity(n, n),
        }
    }

    pub fn n(&self) -> usize {
        self.w.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.w
    }

    pub fn min_diagonal(&self) -> f64 {
        self.w.diagonal().min()
    }

    /// `out_i = Σ_j W_ij x_j`, skipping zero weights.
    ///
    /// Accumulation starts from the first nonzero term, so a row of the
    /// identity reproduces its input bit for bit.
    pub fn apply(&self, xs: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let n = self.n();
        assert_eq!(xs.len(), n, "state count must match matrix size");
        (0..n)
            .map(|i| {
                let mut acc: Option<DVector<f64>> = None;
                for (j, x) in xs.iter().enumerate() {
                    let wij = self.w[(i, j)];
                    if wij == 0.0 {
                        continue;
                    }
                    match acc.as_mut() {
                        None => acc = Some(x * wij),
                        Some(a) => a.axpy(wij, x, 1.0),
                    }
                }
                acc.unwrap_or_else(|| DVector::zeros(xs[i].len()))
            })
            .collect()
    }

    /// Dense row-major CSV with shortest round-trip decimal formatting.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.n() {
            let row: Vec<String> = (0..self.n()).map(|j| format!("{}", self.w[(i, j)])).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    /// Parses [`MixingMatrix::to_csv`] output. `#` comment lines are skipped.
    pub fn from_csv(text: &str) -> Result<Self> {
        let rows: Vec<Vec<f64>> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| {
                l.split(',')
                    .map(|v| {
                        v.trim()
                            .parse::<f64>()
                            .map_err(|_| Error::Parse(format!("bad matrix entry `{v}`")))
                    })
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<_>>()?;
        let n = rows.len();
        if n == 0 {
            return Err(Error::Parse("empty matrix".into()));
        }
        if let Some(bad) = rows.iter().find(|r| r.len() != n) {
            return Err(Error::Dimension {
                expected: n,
                got: bad.len(),
            });
        }
        Self::from_matrix(DMatrix::from_row_iterator(n, n, rows.into_iter().flatten()))
    }
}

/// Weight construction with the normalizer frozen on a base graph, so weights
/// for any subset of its edges stay doubly stochastic: failed links return
/// their mass to the diagonal.
#[derive(Debug, Clone)]
struct WeightBuilder {
    rule: WeightRule,
    /// `W = I - step * L` for the Laplacian rules.
    step: f64,
    base_degrees: Vec<usize>,
}

impl WeightBuilder {
    fn new(g: &Graph, rule: WeightRule) -> Result<Self> {
        if !g.is_connected() {
            return Err(Error::Disconnected);
        }
        let step = match rule {
            WeightRule::Metropolis => 0.0,
            WeightRule::LaplacianMaxEig | WeightRule::LaplacianBestConstant => {
                let ev = sorted_eigenvalues(g.laplacian())?;
                let lmax = ev[ev.len() - 1];
                let fiedler = ev[1];
                if !(lmax > 0.0) || !lmax.is_finite() {
                    return Err(Error::Eigen(format!("degenerate Laplacian spectrum, λ_max = {lmax}")));
                }
                if rule == WeightRule::LaplacianMaxEig {
                    1.0 / lmax
                } else {
                    2.0 / (lmax + fiedler)
                }
            }
        };
        Ok(Self {
            rule,
            step,
            base_degrees: g.degrees(),
        })
    }

    fn weights(&self, n: usize, active: impl Iterator<Item = (usize, usize)>) -> MixingMatrix {
        let mut w = DMatrix::zeros(n, n);
        for (i, j) in active {
            let wij = match self.rule {
                WeightRule::Metropolis => 1.0 / (1.0 + self.base_degrees[i].max(self.base_degrees[j]) as f64),
                _ => self.step,
            };
            w[(i, j)] = wij;
            w[(j, i)] = wij;
        }
        for i in 0..n {
            let off: f64 = (0..n).filter(|&j| j != i).map(|j| w[(i, j)]).sum();
            w[(i, i)] = 1.0 - off;
        }
        MixingMatrix { w }
    }
}

/// Weights on a connected graph with every link active.
pub fn build_weights(g: &Graph, rule: WeightRule) -> Result<MixingMatrix> {
    let builder = WeightBuilder::new(g, rule)?;
    Ok(builder.weights(g.n(), g.edges().iter().copied()))
}

/// The distribution `𝒲`: each base edge active independently with
/// `activation_prob`, weights from `rule` on the surviving edges.
#[derive(Debug, Clone)]
pub struct MixingModel {
    base: Graph,
    activation_prob: f64,
    rule: WeightRule,
    builder: WeightBuilder,
    base_weights: MixingMatrix,
}

impl MixingModel {
    pub fn new(base: Graph, activation_prob: f64, rule: WeightRule) -> Result<Self> {
        if !(activation_prob > 0.0 && activation_prob <= 1.0) {
            return param(format!(
                "activation probability must lie in (0, 1], got {activation_prob}"
            ));
        }
        let builder = WeightBuilder::new(&base, rule)?;
        let base_weights = builder.weights(base.n(), base.edges().iter().copied());
        Ok(Self {
            base,
            activation_prob,
            rule,
            builder,
            base_weights,
        })
    }

    pub fn graph(&self) -> &Graph {
        &self.base
    }

    pub fn activation_prob(&self) -> f64 {
        self.activation_prob
    }

    pub fn rule(&self) -> WeightRule {
        self.rule
    }

    pub fn is_fixed(&self) -> bool {
        self.activation_prob == 1.0
    }

    /// The all-links-active matrix.
    pub fn base_weights(&self) -> &MixingMatrix {
        &self.base_weights
    }

    /// Draws `Wᵗ` and the number of active links. A fixed model consumes no
    /// randomness.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (MixingMatrix, usize) {
        if self.is_fixed() {
            return (self.base_weights.clone(), self.base.edge_count());
        }
        let keep: Vec<bool> = self
            .base
            .edges()
            .iter()
            .map(|_| rng.random_bool(self.activation_prob))
            .collect();
        self.weights_for(&keep)
    }

    /// Weights for an explicit failure pattern (`keep[e]` for each base edge).
    pub fn weights_for(&self, keep: &[bool]) -> (MixingMatrix, usize) {
        assert_eq!(keep.len(), self.base.edge_count());
        let active = self.base.edges().iter().zip(keep).filter_map(|(&e, &k)| k.then_some(e));
        let count = keep.iter().filter(|&&k| k).count();
        (self.builder.weights(self.base.n(), active), count)
    }
}

/// How `|λ̂₂|` was obtained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SpectralMethod {
    ExactFixedW,
    MonteCarlo { samples: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralReport {
    pub lambda2_hat: f64,
    pub alpha: f64,
    pub method: SpectralMethod,
    /// Batch-means standard error of the Monte Carlo estimate.
    pub stderr: Option<f64>,
}

/// Eigenvalues of a symmetric matrix in ascending order.
pub fn sorted_eigenvalues(m: DMatrix<f64>) -> Result<Vec<f64>> {
    let n = m.nrows();
    let eig = SymmetricEigen::try_new(m, 1e-15, 100 * n.max(10))
        .ok_or_else(|| Error::Eigen(format!("symmetric eigensolve of {n}x{n} did not converge")))?;
    let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    if ev.iter().any(|v| !v.is_finite()) {
        return Err(Error::Eigen("non-finite eigenvalue".into()));
    }
    ev.sort_by(f64::total_cmp);
    Ok(ev)
}

/// Second largest eigenvalue magnitude of a symmetric matrix.
pub fn second_abs_eigenvalue(m: &DMatrix<f64>) -> Result<f64> {
    if m.nrows() < 2 {
        return param("need at least a 2x2 matrix");
    }
    let mut abs: Vec<f64> = sorted_eigenvalues(m.clone())?.into_iter().map(f64::abs).collect();
    abs.sort_by(|a, b| b.total_cmp(a));
    Ok(abs[1])
}

/// `|λ̂₂|` of the model.
///
/// A fixed model gives `|λ₂(W)|²` exactly and ignores `samples`. Otherwise
/// `E[W Wᵀ]` is estimated from `samples` iid draws (sample `k` uses substream
/// `k` of [`Stream::Spectral`], so the result does not depend on the thread
/// count).
pub fn lambda2_hat(model: &MixingModel, samples: usize, streams: &Streams) -> Result<SpectralReport> {
    if model.is_fixed() {
        let l2 = second_abs_eigenvalue(model.base_weights().matrix())?;
        let hat = l2 * l2;
        return Ok(SpectralReport {
            lambda2_hat: hat,
            alpha: alpha_of(hat)?,
            method: SpectralMethod::ExactFixedW,
            stderr: None,
        });
    }
    if samples < 2 {
        return param(format!("Monte Carlo estimate needs at least 2 samples, got {samples}"));
    }
    let n = model.graph().n();
    let batches = MC_BATCHES.min(samples);
    let sums: Vec<DMatrix<f64>> = (0..batches)
        .into_par_iter()
        .map(|b| {
            let (lo, hi) = (b * samples / batches, (b + 1) * samples / batches);
            let mut acc = DMatrix::zeros(n, n);
            for k in lo..hi {
                let mut rng = streams.rng(Stream::Spectral, k as u64);
                let (w, _) = model.sample(&mut rng);
                let w = w.into_matrix();
                acc += &w * w.transpose();
            }
            acc
        })
        .collect();

    let mut total = DMatrix::zeros(n, n);
    for s in &sums {
        total += s;
    }
    let hat = second_abs_eigenvalue(&(total / samples as f64))?;

    let batch_vals = sums
        .iter()
        .enumerate()
        .map(|(b, s)| {
            let count = (b + 1) * samples / batches - b * samples / batches;
            second_abs_eigenvalue(&(s / count as f64))
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean = batch_vals.iter().sum::<f64>() / batches as f64;
    let var = batch_vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (batches as f64 - 1.0).max(1.0);

    Ok(SpectralReport {
        lambda2_hat: hat,
        alpha: alpha_of(hat)?,
        method: SpectralMethod::MonteCarlo { samples },
        stderr: Some((var / batches as f64).sqrt()),
    })
}

/// `α = x / (1 - x)` on `[0, 1)`.
pub fn alpha_of(lambda2_hat: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&lambda2_hat) {
        return Err(Error::Domain(format!(
            "|λ̂₂| = {lambda2_hat} is outside [0, 1); mixing does not contract"
        )));
    }
    Ok(lambda2_hat / (1.0 - lambda2_hat))
}

/// Tolerances used by [`validate`].
pub const SYMMETRY_TOL: f64 = 1e-12;
pub const STOCHASTIC_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Check {
    Shape,
    Symmetric,
    RowStochastic,
    ColumnStochastic,
    Nonnegative,
    Sparsity,
}

impl Check {
    pub fn name(self) -> &'static str {
        match self {
            Check::Shape => "shape",
            Check::Symmetric => "symmetric",
            Check::RowStochastic => "row-stochastic",
            Check::ColumnStochastic => "column-stochastic",
            Check::Nonnegative => "nonnegative",
            Check::Sparsity => "sparsity",
        }
    }
}

/// A failed invariant and its worst offending entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub check: Check,
    pub magnitude: f64,
    /// `(row, col)`; for the stochastic checks the other index is the row/col itself.
    pub entry: (usize, usize),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} violated by {:e} at ({}, {})",
            self.check.name(),
            self.magnitude,
            self.entry.0,
            self.entry.1
        )
    }
}

/// Checks the mixing invariants of `w` against graph `g`.
///
/// Sign is only enforced on pair weights; the diagonal is left free because the
/// best-constant rule routinely makes it negative.
pub fn validate(w: &MixingMatrix, g: &Graph) -> Vec<Violation> {
    let m = w.matrix();
    let n = m.nrows();
    if n != g.n() {
        return vec![Violation {
            check: Check::Shape,
            magnitude: (n as f64 - g.n() as f64).abs(),
            entry: (n, g.n()),
        }];
    }
    let mut out = Vec::new();
    let mut worst = |check: Check, tol: f64, items: &mut dyn Iterator<Item = (f64, (usize, usize))>| {
        let top = items.fold(None, |best: Option<(f64, (usize, usize))>, item| match best {
            Some(b) if b.0 >= item.0 => Some(b),
            _ => Some(item),
        });
        if let Some((mag, entry)) = top {
            if mag > tol || mag.is_nan() {
                out.push(Violation {
                    check,
                    magnitude: mag,
                    entry,
                });
            }
        }
    };

    let pairs = || (0..n).flat_map(move |i| (0..n).map(move |j| (i, j)));
    worst(
        Check::Symmetric,
        SYMMETRY_TOL,
        &mut pairs().map(|(i, j)| ((m[(i, j)] - m[(j, i)]).abs(), (i, j))),
    );
    worst(
        Check::RowStochastic,
        STOCHASTIC_TOL,
        &mut (0..n).map(|i| ((m.row(i).sum() - 1.0).abs(), (i, i))),
    );
    worst(
        Check::ColumnStochastic,
        STOCHASTIC_TOL,
        &mut (0..n).map(|j| ((m.column(j).sum() - 1.0).abs(), (j, j))),
    );
    worst(
        Check::Nonnegative,
        0.0,
        &mut pairs().filter(|&(i, j)| i != j).map(|(i, j)| (-m[(i, j)], (i, j))),
    );
    worst(
        Check::Sparsity,
        0.0,
        &mut pairs()
            .filter(|&(i, j)| i != j && !g.has_edge(i, j))
            .map(|(i, j)| (m[(i, j)].abs(), (i, j))),
    );
    out
}
