//! Synthetic non-iid least-squares problem.
//!
//! Node `i` holds `M` rows `X_i` with iid `N(0, 0.25²)` entries and targets
//! `Y_i = c_i (v + cos v)`, `v = X_i 1`, `c_i = base^i`. Its local cost is
//! `F_i(z) = (1/M) ||X_i z - Y_i||²`, and the data distribution `𝒟_i` is the
//! uniform distribution over those `M` rows.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SVD};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::mixing::sorted_eigenvalues;

/// Standard deviation of the generated features.
pub const FEATURE_STD: f64 = 0.25;

/// Relative singular-value cutoff for the per-node minimum-norm solutions.
const PINV_CUTOFF: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionProblem {
    scale_base: f64,
    features: Vec<DMatrix<f64>>,
    targets: Vec<DVector<f64>>,
}

/// Global minimizer and minimum of `f = (1/n) Σ F_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimum {
    pub z_star: DVector<f64>,
    pub f_star: f64,
}

/// Constants of the problem that enter the convergence analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemConstants {
    pub z_star: DVector<f64>,
    pub f_star: f64,
    /// Strong convexity of the global cost (smallest Hessian eigenvalue).
    pub mu: f64,
    /// Largest local smoothness constant, `max_i λ_max((2/M) X_iᵀ X_i)`.
    pub smoothness: f64,
    /// Heterogeneity `Γ = (1/n) Σ (F_i(z*) - F_i(z_i*))`.
    pub gamma_het: f64,
    /// Single-row gradient variance at `z*`, per node.
    pub sigma_sq: Vec<f64>,
    pub sigma_bar_sq: f64,
    /// Max squared stochastic gradient norm, once measured on a run.
    pub g_sq: Option<f64>,
}

impl ProblemConstants {
    pub fn optimum(&self) -> Optimum {
        Optimum {
            z_star: self.z_star.clone(),
            f_star: self.f_star,
        }
    }

    pub fn with_g_sq(mut self, g_sq: f64) -> Self {
        self.g_sq = Some(g_sq);
        self
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct Manifest {
    n: usize,
    d: usize,
    samples_per_node: usize,
    scale_base: f64,
    seed: Option<u64>,
}

impl RegressionProblem {
    /// Draws the synthetic instance. Entries are drawn node by node, row by row.
    pub fn generate_synthetic<R: Rng + ?Sized>(
        n: usize,
        d: usize,
        samples: usize,
        scale_base: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if n == 0 || d == 0 || samples == 0 {
            return param(format!("n, d, M must be positive (got {n}, {d}, {samples})"));
        }
        if !scale_base.is_finite() || scale_base <= 0.0 {
            return param(format!("scale base must be positive and finite, got {scale_base}"));
        }
        let normal = Normal::new(0.0, FEATURE_STD).expect("valid normal");
        let mut features = Vec::with_capacity(n);
        let mut targets = Vec::with_capacity(n);
        for i in 0..n {
            let x = DMatrix::from_row_iterator(samples, d, (0..samples * d).map(|_| normal.sample(rng)));
            let c = scale_base.powi(i as i32 + 1);
            let y = DVector::from_iterator(
                samples,
                x.row_iter().map(|row| {
                    let v = row.sum();
                    c * (v + v.cos())
                }),
            );
            features.push(x);
            targets.push(y);
        }
        Ok(Self {
            scale_base,
            features,
            targets,
        })
    }

    /// Assembles a problem from explicit data; all nodes must share `M` and `d`.
    pub fn from_parts(features: Vec<DMatrix<f64>>, targets: Vec<DVector<f64>>, scale_base: f64) -> Result<Self> {
        if features.is_empty() || features.len() != targets.len() {
            return param("need one target vector per feature matrix, and at least one node");
        }
        let (m, d) = features[0].shape();
        if m == 0 || d == 0 {
            return param("empty feature matrix");
        }
        for (x, y) in features.iter().zip(&targets) {
            if x.shape() != (m, d) {
                return Err(Error::Dimension {
                    expected: m * d,
                    got: x.nrows() * x.ncols(),
                });
            }
            if y.len() != m {
                return Err(Error::Dimension {
                    expected: m,
                    got: y.len(),
                });
            }
            if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
                return param("non-finite data");
            }
        }
        Ok(Self {
            scale_base,
            features,
            targets,
        })
    }

    pub fn n(&self) -> usize {
        self.features.len()
    }

    pub fn dim(&self) -> usize {
        self.features[0].ncols()
    }

    pub fn samples_per_node(&self) -> usize {
        self.features[0].nrows()
    }

    pub fn scale_base(&self) -> f64 {
        self.scale_base
    }

    pub fn features(&self, i: usize) -> &DMatrix<f64> {
        &self.features[i]
    }

    pub fn targets(&self, i: usize) -> &DVector<f64> {
        &self.targets[i]
    }

    fn check(&self, i: usize, z: &DVector<f64>) -> Result<()> {
        if i >= self.n() {
            return param(format!("node {i} out of range (n = {})", self.n()));
        }
        if z.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: z.len(),
            });
        }
        Ok(())
    }

    /// `F_i(z) = (1/M) ||X_i z - Y_i||²`.
    pub fn local_cost(&self, i: usize, z: &DVector<f64>) -> Result<f64> {
        self.check(i, z)?;
        let r = &self.features[i] * z - &self.targets[i];
        Ok(r.norm_squared() / self.samples_per_node() as f64)
    }

    /// `f(z) = (1/n) Σ F_i(z)`.
    pub fn global_cost(&self, z: &DVector<f64>) -> Result<f64> {
        let mut total = 0.0;
        for i in 0..self.n() {
            total += self.local_cost(i, z)?;
        }
        Ok(total / self.n() as f64)
    }

    /// Mean of the single-row gradients `2 (x_jᵀ z - y_j) x_j` over `rows`.
    /// Callers guarantee valid indices.
    fn batch_gradient(&self, i: usize, z: &DVector<f64>, rows: impl ExactSizeIterator<Item = usize>) -> DVector<f64> {
        let x = &self.features[i];
        let y = &self.targets[i];
        let d = self.dim();
        let count = rows.len() as f64;
        let mut acc = DVector::zeros(d);
        for j in rows {
            let mut r = -y[j];
            for k in 0..d {
                r += x[(j, k)] * z[k];
            }
            let scale = 2.0 * r;
            for k in 0..d {
                acc[k] += scale * x[(j, k)];
            }
        }
        acc / count
    }

    /// `∇F_i(z)`, the average of the `M` row gradients (the expectation over `𝒟_i`).
    pub fn full_gradient(&self, i: usize, z: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(i, z)?;
        Ok(self.batch_gradient(i, z, 0..self.samples_per_node()))
    }

    /// `∇f(z) = (1/n) Σ ∇F_i(z)`.
    pub fn global_gradient(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        let mut acc = DVector::zeros(self.dim());
        for i in 0..self.n() {
            acc += self.full_gradient(i, z)?;
        }
        Ok(acc / self.n() as f64)
    }

    /// Gradient on an explicit list of row indices (duplicates allowed).
    pub fn gradient_on_rows(&self, i: usize, z: &DVector<f64>, rows: &[usize]) -> Result<DVector<f64>> {
        self.check(i, z)?;
        if rows.is_empty() {
            return param("empty mini-batch");
        }
        if let Some(&bad) = rows.iter().find(|&&j| j >= self.samples_per_node()) {
            return param(format!("row {bad} out of range"));
        }
        Ok(self.batch_gradient(i, z, rows.iter().copied()))
    }

    /// Draws `m` row indices uniformly with replacement.
    pub fn sample_batch<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> Vec<usize> {
        let rows = self.samples_per_node();
        (0..m).map(|_| rng.random_range(0..rows)).collect()
    }

    /// Mini-batch gradient `(1/m) Σ ∇F_i(z, ψ_j)` on `m` rows drawn with replacement.
    pub fn stochastic_gradient<R: Rng + ?Sized>(
        &self,
        i: usize,
        z: &DVector<f64>,
        m: usize,
        rng: &mut R,
    ) -> Result<DVector<f64>> {
        if m == 0 {
            return param("mini-batch size must be at least 1");
        }
        let rows = self.sample_batch(m, rng);
        self.gradient_on_rows(i, z, &rows)
    }

    fn normal_system(&self) -> (DMatrix<f64>, DVector<f64>) {
        let d = self.dim();
        let mut a = DMatrix::zeros(d, d);
        let mut b = DVector::zeros(d);
        for (x, y) in self.features.iter().zip(&self.targets) {
            a += x.transpose() * x;
            b += x.transpose() * y;
        }
        (a, b)
    }

    /// Solves `(Σ X_iᵀ X_i) z = Σ X_iᵀ Y_i`.
    pub fn global_optimum(&self) -> Result<Optimum> {
        let d = self.dim();
        let (a, b) = self.normal_system();
        let ev = sorted_eigenvalues(a.clone())?;
        let top = ev[d - 1].max(0.0);
        let rank = ev.iter().filter(|&&v| v > PINV_CUTOFF * top).count();
        if rank < d || top == 0.0 {
            return Err(Error::Singular { rank, dim: d });
        }
        let chol = a.clone().cholesky().ok_or(Error::Singular { rank, dim: d })?;
        let mut z = chol.solve(&b);
        // one step of iterative refinement
        let resid = &b - &a * &z;
        z += chol.solve(&resid);
        let f_star = self.global_cost(&z)?;
        Ok(Optimum { z_star: z, f_star })
    }

    /// Minimum-norm least-squares solution of `X_i z = Y_i`.
    pub fn local_minimizer(&self, i: usize) -> Result<DVector<f64>> {
        if i >= self.n() {
            return param(format!("node {i} out of range"));
        }
        let svd = SVD::new(self.features[i].clone(), true, true);
        let top = svd.singular_values.max();
        svd.solve(&self.targets[i], PINV_CUTOFF * top)
            .map_err(|e| Error::Eigen(format!("SVD solve failed: {e}")))
    }

    /// Every constant except `g_sq`, which must be measured on a run.
    pub fn constants(&self) -> Result<ProblemConstants> {
        let Optimum { z_star, f_star } = self.global_optimum()?;
        let n = self.n() as f64;
        let m = self.samples_per_node();

        let mut smoothness = 0.0_f64;
        for x in &self.features {
            let h = (x.transpose() * x) * (2.0 / m as f64);
            let ev = sorted_eigenvalues(h)?;
            smoothness = smoothness.max(ev[ev.len() - 1]);
        }
        let (a, _) = self.normal_system();
        let mu = sorted_eigenvalues(a * (2.0 / (n * m as f64)))?[0];

        let mut gamma_het = 0.0;
        let mut sigma_sq = Vec::with_capacity(self.n());
        for i in 0..self.n() {
            let zi = self.local_minimizer(i)?;
            // z_i* minimizes F_i; clamp roundoff
            gamma_het += (self.local_cost(i, &z_star)? - self.local_cost(i, &zi)?).max(0.0);

            let mean = self.full_gradient(i, &z_star)?;
            let var = (0..m)
                .map(|j| (self.batch_gradient(i, &z_star, std::iter::once(j)) - &mean).norm_squared())
                .sum::<f64>()
                / m as f64;
            sigma_sq.push(var);
        }
        let sigma_bar_sq = sigma_sq.iter().sum::<f64>() / n;

        Ok(ProblemConstants {
            z_star,
            f_star,
            mu,
            smoothness,
            gamma_het: gamma_het / n,
            sigma_sq,
            sigma_bar_sq,
            g_sq: None,
        })
    }

    /// Writes `manifest.toml` plus one `node_<i>.csv` per node (rows of `d`
    /// features followed by the target).
    pub fn write_dir(&self, dir: &Path, seed: Option<u64>) -> Result<()> {
        fs::create_dir_all(dir)?;
        let manifest = Manifest {
            n: self.n(),
            d: self.dim(),
            samples_per_node: self.samples_per_node(),
            scale_base: self.scale_base,
            seed,
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(dir.join("manifest.toml"), text)?;
        for i in 0..self.n() {
            let mut out = String::new();
            for j in 0..self.samples_per_node() {
                let mut fields: Vec<String> = self.features[i].row(j).iter().map(|v| format!("{v}")).collect();
                fields.push(format!("{}", self.targets[i][j]));
                out.push_str(&fields.join(","));
                out.push('\n');
            }
            fs::write(dir.join(format!("node_{i}.csv")), out)?;
        }
        Ok(())
    }

    /// Reads a directory produced by [`RegressionProblem::write_dir`]. Returns
    /// the problem and the recorded seed.
    pub fn read_dir(dir: &Path) -> Result<(Self, Option<u64>)> {
        let text = fs::read_to_string(dir.join("manifest.toml"))?;
        let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::Parse(e.to_string()))?;
        let mut features = Vec::with_capacity(manifest.n);
        let mut targets = Vec::with_capacity(manifest.n);
        for i in 0..manifest.n {
            let body = fs::read_to_string(dir.join(format!("node_{i}.csv")))?;
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for line in body.lines().filter(|l| !l.trim().is_empty()) {
                let vals = line
                    .split(',')
                    .map(|v| {
                        v.trim()
                            .parse::<f64>()
                            .map_err(|_| Error::Parse(format!("bad value `{v}`")))
                    })
                    .collect::<Result<Vec<f64>>>()?;
                if vals.len() != manifest.d + 1 {
                    return Err(Error::Dimension {
                        expected: manifest.d + 1,
                        got: vals.len(),
                    });
                }
                xs.extend_from_slice(&vals[..manifest.d]);
                ys.push(vals[manifest.d]);
            }
            if ys.len() != manifest.samples_per_node {
                return Err(Error::Dimension {
                    expected: manifest.samples_per_node,
                    got: ys.len(),
                });
            }
            features.push(DMatrix::from_row_slice(ys.len(), manifest.d, &xs));
            targets.push(DVector::from_vec(ys));
        }
        Ok((Self::from_parts(features, targets, manifest.scale_base)?, manifest.seed))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(seed: u64, base: f64) -> RegressionProblem {
        RegressionProblem::generate_synthetic(4, 3, 6, base, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn generation_is_deterministic_and_follows_target_rule() {
        let a = small(1, 2.0);
        assert_eq!(a, small(1, 2.0));
        assert_ne!(a, small(2, 2.0));
        for i in 0..a.n() {
            let c = 2f64.powi(i as i32 + 1);
            for j in 0..a.samples_per_node() {
                let v: f64 = a.features(i).row(j).sum();
                assert_eq!(a.targets(i)[j], c * (v + v.cos()));
            }
        }
    }

    #[test]
    fn unit_base_gives_unit_scales() {
        let p = small(3, 1.0);
        for j in 0..p.samples_per_node() {
            let v: f64 = p.features(3).row(j).sum();
            assert_eq!(p.targets(3)[j], v + v.cos());
        }
    }

    #[test]
    fn costs() {
        let p = small(4, 1.5);
        let zero = DVector::zeros(3);
        let want = p.targets(2).norm_squared() / 6.0;
        assert!((p.local_cost(2, &zero).unwrap() - want).abs() <= 1e-14 * want);
        assert!(p.local_cost(9, &zero).is_err());
        assert!(matches!(
            p.local_cost(0, &DVector::zeros(2)),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn hand_expanded_quadratic() {
        // X = [[1, 2], [3, 4]], Y = [1, -1], z = [0.5, -0.25]
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let y = DVector::from_vec(vec![1.0, -1.0]);
        let p = RegressionProblem::from_parts(vec![x], vec![y], 1.0).unwrap();
        let z = DVector::from_vec(vec![0.5, -0.25]);
        // residuals: 0.5 - 0.5 - 1 = -1 ; 1.5 - 1 + 1 = 1.5
        assert!((p.local_cost(0, &z).unwrap() - (1.0 + 2.25) / 2.0).abs() < 1e-15);
        assert_eq!(p.global_cost(&z).unwrap(), p.local_cost(0, &z).unwrap());
        // gradient: (2/2) Xᵀ r = [1*-1 + 3*1.5, 2*-1 + 4*1.5] = [3.5, 4]
        let g = p.full_gradient(0, &z).unwrap();
        assert!((g - DVector::from_vec(vec![3.5, 4.0])).norm() < 1e-14);
        // square invertible system: z* = X⁻¹ Y, f* = 0
        let opt = p.global_optimum().unwrap();
        assert!(opt.f_star < 1e-24);
        assert!((&opt.z_star - DVector::from_vec(vec![-3.0, 2.0])).norm() < 1e-12);
    }

    #[test]
    fn scalar_two_node_optimum() {
        let x0 = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        let x1 = DMatrix::from_row_slice(2, 1, &[-1.0, 0.5]);
        let y0 = DVector::from_vec(vec![3.0, 1.0]);
        let y1 = DVector::from_vec(vec![2.0, -4.0]);
        let p = RegressionProblem::from_parts(vec![x0, x1], vec![y0, y1], 1.0).unwrap();
        // Σ xᵀy = 3 + 2 - 2 - 2 = 1 ; Σ ||x||² = 1 + 4 + 1 + 0.25 = 6.25
        let z = p.global_optimum().unwrap().z_star[0];
        assert!((z - 1.0 / 6.25).abs() < 1e-15);
    }

    #[test]
    fn singular_system_reports_rank() {
        let x = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let p = RegressionProblem::from_parts(vec![x], vec![DVector::from_vec(vec![1.0, 2.0])], 1.0).unwrap();
        assert!(matches!(p.global_optimum(), Err(Error::Singular { rank: 2, dim: 3 })));
    }

    #[test]
    fn gradient_matches_central_differences() {
        let p = small(5, 1.5);
        let z = DVector::from_vec(vec![0.3, -1.2, 2.0]);
        let h = 1e-6;
        for i in 0..p.n() {
            let g = p.full_gradient(i, &z).unwrap();
            for k in 0..3 {
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp[k] += h;
                zm[k] -= h;
                let fd = (p.local_cost(i, &zp).unwrap() - p.local_cost(i, &zm).unwrap()) / (2.0 * h);
                assert!(
                    (fd - g[k]).abs() <= 1e-5 * g[k].abs().max(1.0),
                    "node {i} coord {k}: {fd} vs {}",
                    g[k]
                );
            }
        }
    }

    #[test]
    fn gradient_is_affine() {
        let p = small(6, 1.5);
        let a = DVector::from_vec(vec![1.0, 2.0, -0.5]);
        let b = DVector::from_vec(vec![-0.7, 0.1, 3.0]);
        let zero = DVector::zeros(3);
        let lhs = p.full_gradient(1, &(&a + &b)).unwrap();
        let rhs =
            p.full_gradient(1, &a).unwrap() + p.full_gradient(1, &b).unwrap() - p.full_gradient(1, &zero).unwrap();
        assert!((lhs - rhs).norm() < 1e-12);
    }

    #[test]
    fn full_gradient_matches_matrix_formula() {
        let p = small(7, 2.0);
        let z = DVector::from_vec(vec![0.1, 0.2, 0.3]);
        for i in 0..p.n() {
            let x = p.features(i);
            let formula = x.transpose() * (x * &z - p.targets(i)) * (2.0 / 6.0);
            let g = p.full_gradient(i, &z).unwrap();
            assert!((g - &formula).norm() <= 1e-12 * formula.norm());
        }
    }

    #[test]
    fn single_row_problem_is_deterministic_in_batch() {
        let x = DMatrix::from_row_slice(1, 2, &[0.5, -1.0]);
        let p = RegressionProblem::from_parts(vec![x], vec![DVector::from_vec(vec![2.0])], 1.0).unwrap();
        let z = DVector::from_vec(vec![1.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for m in [1, 3, 8] {
            assert_eq!(
                p.stochastic_gradient(0, &z, m, &mut rng).unwrap(),
                p.full_gradient(0, &z).unwrap()
            );
        }
        assert!(p.stochastic_gradient(0, &z, 0, &mut rng).is_err());
    }

    #[test]
    fn identical_nodes_have_no_heterogeneity() {
        let base = small(8, 1.0);
        let x = base.features(0).clone();
        let y = base.targets(0).clone();
        let p =
            RegressionProblem::from_parts(vec![x.clone(), x.clone(), x], vec![y.clone(), y.clone(), y], 1.0).unwrap();
        let c = p.constants().unwrap();
        assert!(c.gamma_het <= 1e-12 * (1.0 + c.f_star));
        assert!(c.mu <= c.smoothness + 1e-12);
    }

    #[test]
    fn single_consistent_node() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let y = &x * DVector::from_vec(vec![2.0, -1.0]);
        let p = RegressionProblem::from_parts(vec![x.clone()], vec![y], 1.0).unwrap();
        let c = p.constants().unwrap();
        assert!(c.gamma_het < 1e-20);
        // at an interpolating z*, every row gradient is zero
        assert!(c.sigma_bar_sq < 1e-20);
    }

    #[test]
    fn reference_sized_instance_has_positive_mu_and_heterogeneity() {
        let p = RegressionProblem::generate_synthetic(20, 25, 10, 2.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let c = p.constants().unwrap();
        assert!(c.mu > 0.0);
        assert!(c.gamma_het > 0.0);
        assert!(c.mu <= c.smoothness);
        let g = p.global_gradient(&c.z_star).unwrap().norm();
        let g0 = p.global_gradient(&DVector::zeros(25)).unwrap().norm();
        assert!(g <= 1e-8 * (1.0 + g0), "{g} vs {g0}");
        // M < d: every node interpolates its own data
        for i in 0..20 {
            let zi = p.local_minimizer(i).unwrap();
            assert!(p.local_cost(i, &zi).unwrap() <= 1e-12 * (1.0 + p.local_cost(i, &DVector::zeros(25)).unwrap()));
        }
    }

    #[test]
    fn write_and_read_round_trip() {
        let p = small(9, 2.0);
        let dir = tempfile::tempdir().unwrap();
        p.write_dir(dir.path(), Some(9)).unwrap();
        let (back, seed) = RegressionProblem::read_dir(dir.path()).unwrap();
        assert_eq!(back, p);
        assert_eq!(seed, Some(9));
    }
}
