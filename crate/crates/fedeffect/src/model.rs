//! Outcome-model types and covariance constructions.
//!
//! Each unit carries a pair of potential outcomes. Conditioned on the
//! treatment-mixing matrix Phi, the noise matrix Sigma, and per-source
//! offsets g, the stacked outcome pair over a source is jointly Gaussian
//! with covariance `Phi (x) K + Sigma (x) I`. Reordering that joint vector
//! into (observed, missing) halves yields the dense blocks used for
//! likelihood evaluation and counterfactual conditioning; the reordering
//! identity is enforced by tests rather than assumed.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::mathcore::{cholesky, CholeskyFactor, MomentVector, SymMatrix};
use crate::{Error, Result};

/// One source's records. `w` holds binary treatment flags; `y0`/`y1` are
/// optional ground-truth potential outcomes kept only by synthetic or
/// benchmark data.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceData {
    pub source_id: usize,
    /// Optional primary keys, used for duplicate resolution.
    pub ids: Option<Vec<String>>,
    /// Design matrix, one row per unit.
    pub x: DMatrix<f64>,
    pub w: Vec<u8>,
    pub y_obs: DVector<f64>,
    pub y0: Option<DVector<f64>>,
    pub y1: Option<DVector<f64>>,
}

impl SourceData {
    pub fn new(
        source_id: usize,
        ids: Option<Vec<String>>,
        x: DMatrix<f64>,
        w: Vec<u8>,
        y_obs: DVector<f64>,
        y0: Option<DVector<f64>>,
        y1: Option<DVector<f64>>,
    ) -> Result<Self> {
        let n = x.nrows();
        let check = |name: &'static str, got: usize| -> Result<()> {
            if got != n {
                Err(Error::ShapeMismatch {
                    context: "SourceData::new",
                    detail: format!("{name} has {got} entries for {n} rows"),
                })
            } else {
                Ok(())
            }
        };
        check("w", w.len())?;
        check("y_obs", y_obs.len())?;
        if let Some(ids) = &ids {
            check("ids", ids.len())?;
        }
        if let Some(y0) = &y0 {
            check("y0", y0.len())?;
        }
        if let Some(y1) = &y1 {
            check("y1", y1.len())?;
        }
        for (row, &flag) in w.iter().enumerate() {
            if flag > 1 {
                return Err(Error::NonBinaryTreatment {
                    value: flag as f64,
                    row,
                });
            }
        }
        Ok(SourceData {
            source_id,
            ids,
            x,
            w,
            y_obs,
            y0,
            y1,
        })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    pub fn has_truth(&self) -> bool {
        self.y0.is_some() && self.y1.is_some()
    }

    /// New source containing the given rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> Result<SourceData> {
        let n = self.n();
        for &r in rows {
            if r >= n {
                return Err(Error::IndexOutOfRange { index: r, len: n });
            }
        }
        let pick_vec = |v: &DVector<f64>| DVector::from_fn(rows.len(), |i, _| v[rows[i]]);
        Ok(SourceData {
            source_id: self.source_id,
            ids: self
                .ids
                .as_ref()
                .map(|ids| rows.iter().map(|&r| ids[r].clone()).collect()),
            x: DMatrix::from_fn(rows.len(), self.d(), |i, j| self.x[(rows[i], j)]),
            w: rows.iter().map(|&r| self.w[r]).collect(),
            y_obs: pick_vec(&self.y_obs),
            y0: self.y0.as_ref().map(&pick_vec),
            y1: self.y1.as_ref().map(&pick_vec),
        })
    }

    /// Realized unit-level treatment effects, available only with truth.
    pub fn true_ite(&self) -> Result<DVector<f64>> {
        match (&self.y0, &self.y1) {
            (Some(y0), Some(y1)) => Ok(y1 - y0),
            _ => Err(Error::MissingTruth {
                path: format!("source {}", self.source_id),
            }),
        }
    }
}

/// Moment summary of one source: the only cross-source view of its data.
///
/// The stacked summary vector `u` follows a fixed layout: observed control
/// outcome moments, observed treated outcome moments, per-covariate moments,
/// treatment moments. Each block is (mean, variance, skewness, kurtosis).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSummary {
    pub source_id: usize,
    pub y0_moments: MomentVector,
    pub y1_moments: MomentVector,
    pub x_moments: Vec<MomentVector>,
    pub w_moments: MomentVector,
}

impl SourceSummary {
    /// Covariate-moment vector, the input to the source-level kernel and
    /// the source-level mean functions.
    pub fn x_tilde(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(4 * self.x_moments.len());
        for m in &self.x_moments {
            out.extend_from_slice(&m.to_array());
        }
        DVector::from_vec(out)
    }

    /// Full summary vector feeding the offset-posterior mean functions.
    pub fn u(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(4 * (self.x_moments.len() + 3));
        out.extend_from_slice(&self.y0_moments.to_array());
        out.extend_from_slice(&self.y1_moments.to_array());
        for m in &self.x_moments {
            out.extend_from_slice(&m.to_array());
        }
        out.extend_from_slice(&self.w_moments.to_array());
        DVector::from_vec(out)
    }

    /// Length of `u` for d covariates.
    pub fn u_len(d: usize) -> usize {
        4 * (d + 3)
    }
}

/// Squared-exponential kernel parameters on log scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub log_lengthscale: f64,
    pub log_signal_variance: f64,
}

impl KernelParams {
    pub fn new(log_lengthscale: f64, log_signal_variance: f64) -> Self {
        KernelParams {
            log_lengthscale,
            log_signal_variance,
        }
    }

    pub fn lengthscale(&self) -> f64 {
        self.log_lengthscale.exp()
    }

    pub fn signal_variance(&self) -> f64 {
        self.log_signal_variance.exp()
    }
}

/// Isotropic squared-exponential kernel value.
pub fn rbf_kernel(a: &[f64], b: &[f64], params: &KernelParams) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut sq = 0.0;
    for (ai, bi) in a.iter().zip(b) {
        let d = ai - bi;
        sq += d * d;
    }
    let ls = params.lengthscale();
    params.signal_variance() * (-0.5 * sq / (ls * ls)).exp()
}

/// Pairwise squared distances between the rows of a design matrix.
pub fn pairwise_sq_dists(x: &DMatrix<f64>) -> SymMatrix {
    let n = x.nrows();
    SymMatrix::from_fn(n, |i, j| {
        if i == j {
            0.0
        } else {
            let mut sq = 0.0;
            for c in 0..x.ncols() {
                let d = x[(i, c)] - x[(j, c)];
                sq += d * d;
            }
            sq
        }
    })
}

/// Kernel matrix from precomputed squared distances.
pub fn rbf_from_sq_dists(sq: &SymMatrix, params: &KernelParams) -> SymMatrix {
    let ls = params.lengthscale();
    let sv = params.signal_variance();
    let inv = -0.5 / (ls * ls);
    SymMatrix::from_fn(sq.dim(), |i, j| sv * (sq[(i, j)] * inv).exp())
}

/// Kernel matrix over the rows of a design matrix.
pub fn rbf_gram(x: &DMatrix<f64>, params: &KernelParams) -> SymMatrix {
    rbf_from_sq_dists(&pairwise_sq_dists(x), params)
}

/// Kernel matrix over a family of vectors (source summaries and the like).
pub fn rbf_gram_vecs(points: &[DVector<f64>], params: &KernelParams) -> SymMatrix {
    SymMatrix::from_fn(points.len(), |i, j| {
        rbf_kernel(points[i].as_slice(), points[j].as_slice(), params)
    })
}

/// Source-level prior covariance: kernel matrix over covariate summaries.
pub fn source_gram(summaries: &[SourceSummary], params: &KernelParams) -> SymMatrix {
    let tilde: Vec<DVector<f64>> = summaries.iter().map(|s| s.x_tilde()).collect();
    rbf_gram_vecs(&tilde, params)
}

/// Affine mean function: weightsᵀ input + bias.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanFnParams {
    pub weights: DVector<f64>,
    pub bias: f64,
}

impl MeanFnParams {
    pub fn zeros(input_dim: usize) -> Self {
        MeanFnParams {
            weights: DVector::zeros(input_dim),
            bias: 0.0,
        }
    }

    pub fn apply_vec(&self, input: &DVector<f64>) -> f64 {
        self.weights.dot(input) + self.bias
    }

    /// Apply to each row of a design matrix.
    pub fn apply_rows(&self, x: &DMatrix<f64>) -> DVector<f64> {
        let mut out = x * &self.weights;
        out.add_scalar_mut(self.bias);
        out
    }

    pub fn input_dim(&self) -> usize {
        self.weights.len()
    }
}

/// Per-source offsets for both potential-outcome surfaces, one entry per
/// source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentG {
    pub g0: Vec<f64>,
    pub g1: Vec<f64>,
}

impl LatentG {
    pub fn zeros(m: usize) -> Self {
        LatentG {
            g0: vec![0.0; m],
            g1: vec![0.0; m],
        }
    }

    pub fn m(&self) -> usize {
        self.g0.len()
    }
}

/// Priors on the treatment-mixing and noise scale matrices, and on the
/// source offsets through the source-level kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    /// Scale matrix of the mixing-matrix prior (row-major 2x2).
    pub v0: [[f64; 2]; 2],
    /// Degrees of freedom of the mixing-matrix prior.
    pub d0: f64,
    /// Scale matrix of the noise-matrix prior.
    pub s0: [[f64; 2]; 2],
    /// Degrees of freedom of the noise-matrix prior.
    pub n0: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        // Weakly informative: minimum dof, scale set so the prior mean sits
        // above typical standardized-outcome variances. A deliberately wide
        // anchor keeps sparsely observed fits honest about their spread
        // instead of letting the divergence term compress them.
        PriorConfig {
            v0: [[2.5, 0.0], [0.0, 2.5]],
            d0: 2.0,
            s0: [[2.5, 0.0], [0.0, 2.5]],
            n0: 2.0,
        }
    }
}

impl PriorConfig {
    pub fn v0_matrix(&self) -> SymMatrix {
        two_by_two(&self.v0)
    }

    pub fn s0_matrix(&self) -> SymMatrix {
        two_by_two(&self.s0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.d0 > 1.0) || !(self.n0 > 1.0) {
            return Err(Error::InvalidConfig {
                detail: format!(
                    "prior degrees of freedom must exceed 1, got d0={} n0={}",
                    self.d0, self.n0
                ),
            });
        }
        cholesky(&self.v0_matrix(), 0.0)?;
        cholesky(&self.s0_matrix(), 0.0)?;
        Ok(())
    }
}

fn two_by_two(a: &[[f64; 2]; 2]) -> SymMatrix {
    SymMatrix::from_fn(2, |i, j| {
        if i == j {
            a[i][i]
        } else {
            0.5 * (a[0][1] + a[1][0])
        }
    })
}

/// Observed/missing covariance blocks for one source.
#[derive(Debug, Clone)]
pub struct ObsMisBlocks {
    /// Covariance of the observed outcomes.
    pub obs: SymMatrix,
    /// Covariance of the missing (counterfactual) outcomes.
    pub mis: SymMatrix,
    /// Cross covariance, entry (i, j) pairing observed unit i with missing
    /// unit j.
    pub cross: DMatrix<f64>,
}

#[inline]
fn arm(flag: u8) -> usize {
    flag as usize
}

/// Joint covariance of the stacked outcome pair `[y(0); y(1)]` over one
/// source: `Phi (x) K + Sigma (x) I`.
pub fn joint_outcome_cov(k: &SymMatrix, phi: &SymMatrix, sigma: &SymMatrix) -> Result<SymMatrix> {
    if phi.dim() != 2 || sigma.dim() != 2 {
        return Err(Error::DimensionMismatch {
            context: "joint_outcome_cov",
            expected: 2,
            got: phi.dim().max(sigma.dim()),
        });
    }
    let n = k.dim();
    let mut out = DMatrix::zeros(2 * n, 2 * n);
    for a in 0..2 {
        for b in 0..2 {
            let (pa, sa) = (phi[(a, b)], sigma[(a, b)]);
            for i in 0..n {
                for j in 0..n {
                    out[(a * n + i, b * n + j)] = pa * k[(i, j)] + if i == j { sa } else { 0.0 };
                }
            }
        }
    }
    SymMatrix::new(out)
}

/// Joint mean of the stacked outcome pair: `(Phi^{1/2} (x) I) [mu0 + g0; mu1 + g1]`
/// with the lower-triangular square root of Phi.
pub fn joint_outcome_mean(
    x: &DMatrix<f64>,
    phi: &SymMatrix,
    g: [f64; 2],
    mu0: &MeanFnParams,
    mu1: &MeanFnParams,
) -> Result<DVector<f64>> {
    let phi_l = phi_lower(phi)?;
    let base0 = mu0.apply_rows(x).add_scalar(g[0]);
    let base1 = mu1.apply_rows(x).add_scalar(g[1]);
    let n = x.nrows();
    let mut out = DVector::zeros(2 * n);
    for i in 0..n {
        out[i] = phi_l[(0, 0)] * base0[i];
        out[n + i] = phi_l[(1, 0)] * base0[i] + phi_l[(1, 1)] * base1[i];
    }
    Ok(out)
}

fn phi_lower(phi: &SymMatrix) -> Result<DMatrix<f64>> {
    Ok(cholesky(phi, 0.0)?.lower().clone())
}

/// Means of the observed and missing outcome vectors for one source.
///
/// Entry i of the observed mean is the component of the joint mean matching
/// unit i's realized treatment arm; the missing mean takes the opposite arm.
pub fn obs_mis_means(
    src: &SourceData,
    phi: &SymMatrix,
    g: [f64; 2],
    mu0: &MeanFnParams,
    mu1: &MeanFnParams,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let phi_l = phi_lower(phi)?;
    let base0 = mu0.apply_rows(&src.x).add_scalar(g[0]);
    let base1 = mu1.apply_rows(&src.x).add_scalar(g[1]);
    Ok(obs_mis_means_from_factor(&src.w, &phi_l, &base0, &base1))
}

pub(crate) fn obs_mis_means_from_factor(
    w: &[u8],
    phi_l: &DMatrix<f64>,
    base0: &DVector<f64>,
    base1: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let n = w.len();
    let mut obs = DVector::zeros(n);
    let mut mis = DVector::zeros(n);
    for i in 0..n {
        let m0 = phi_l[(0, 0)] * base0[i];
        let m1 = phi_l[(1, 0)] * base0[i] + phi_l[(1, 1)] * base1[i];
        if w[i] == 1 {
            obs[i] = m1;
            mis[i] = m0;
        } else {
            obs[i] = m0;
            mis[i] = m1;
        }
    }
    (obs, mis)
}

/// Observed/missing covariance blocks from a unit-level kernel matrix.
///
/// With arm indices a_i = w_i for observed and 1 - w_i for missing entries,
/// each block entry is `k_ij * Phi[arm_i, arm_j] + [i == j] * Sigma[arm_i, arm_j]`.
pub fn obs_mis_kernels(
    src: &SourceData,
    k: &SymMatrix,
    phi: &SymMatrix,
    sigma: &SymMatrix,
) -> Result<ObsMisBlocks> {
    let n = src.n();
    if k.dim() != n {
        return Err(Error::DimensionMismatch {
            context: "obs_mis_kernels",
            expected: n,
            got: k.dim(),
        });
    }
    if phi.dim() != 2 || sigma.dim() != 2 {
        return Err(Error::DimensionMismatch {
            context: "obs_mis_kernels scale",
            expected: 2,
            got: phi.dim().max(sigma.dim()),
        });
    }
    let w = &src.w;
    let obs = SymMatrix::from_fn(n, |i, j| {
        let (a, b) = (arm(w[i]), arm(w[j]));
        k[(i, j)] * phi[(a, b)] + if i == j { sigma[(a, a)] } else { 0.0 }
    });
    let mis = SymMatrix::from_fn(n, |i, j| {
        let (a, b) = (1 - arm(w[i]), 1 - arm(w[j]));
        k[(i, j)] * phi[(a, b)] + if i == j { sigma[(a, a)] } else { 0.0 }
    });
    let cross = DMatrix::from_fn(n, n, |i, j| {
        let (a, b) = (arm(w[i]), 1 - arm(w[j]));
        k[(i, j)] * phi[(a, b)] + if i == j { sigma[(a, b)] } else { 0.0 }
    });
    Ok(ObsMisBlocks { obs, mis, cross })
}

/// Elementwise product of the unit kernel with the arm-indexed entries of
/// the mixing matrix: entry (i, j) is `k_ij * Phi[w_i, w_j]`.
pub(crate) fn phi_masked(k: &SymMatrix, w: &[u8], phi: &SymMatrix) -> SymMatrix {
    SymMatrix::from_fn(w.len(), |i, j| k[(i, j)] * phi[(arm(w[i]), arm(w[j]))])
}

/// Add the arm-matched noise variance to the diagonal of a masked kernel.
pub(crate) fn add_noise_diag(masked: &SymMatrix, w: &[u8], sigma: &SymMatrix) -> SymMatrix {
    SymMatrix::from_fn(w.len(), |i, j| {
        masked[(i, j)]
            + if i == j {
                let a = arm(w[i]);
                sigma[(a, a)]
            } else {
                0.0
            }
    })
}

/// Observed-outcome covariance only; same entries as the `obs` block of
/// [`obs_mis_kernels`].
pub fn observed_cov(w: &[u8], k: &SymMatrix, phi: &SymMatrix, sigma: &SymMatrix) -> SymMatrix {
    add_noise_diag(&phi_masked(k, w, phi), w, sigma)
}

/// Log-likelihood of one source's observed outcomes given the mixing
/// matrix, noise matrix, offsets, and kernel/mean parameters.
pub fn observed_loglik(
    src: &SourceData,
    phi: &SymMatrix,
    sigma: &SymMatrix,
    g: [f64; 2],
    kernel: &KernelParams,
    mu0: &MeanFnParams,
    mu1: &MeanFnParams,
) -> Result<f64> {
    let k = rbf_gram(&src.x, kernel);
    let (mean_obs, _) = obs_mis_means(src, phi, g, mu0, mu1)?;
    let cov = observed_cov(&src.w, &k, phi, sigma);
    let factor = obs_factor(&cov)?;
    Ok(crate::mathcore::mvn_logpdf_with_factor(
        &src.y_obs, &mean_obs, &factor,
    ))
}

/// Factor an observed-outcome covariance, with escalation starting from a
/// plain factorization since the noise diagonal usually suffices.
pub(crate) fn obs_factor(cov: &SymMatrix) -> Result<CholeskyFactor> {
    cholesky(cov, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mathcore::mvn_logpdf;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn sym2(a: f64, b: f64, c: f64) -> SymMatrix {
        SymMatrix::from_fn(2, |i, j| match (i, j) {
            (0, 0) => a,
            (1, 1) => c,
            _ => b,
        })
    }

    pub(crate) fn random_source(rng: &mut ChaCha20Rng, n: usize, d: usize) -> SourceData {
        let normal = StandardNormal;
        let x = DMatrix::from_fn(n, d, |_, _| {
            <StandardNormal as Distribution<f64>>::sample(&normal, rng)
        });
        let w: Vec<u8> = (0..n)
            .map(|_| rand::Rng::random_bool(rng, 0.5) as u8)
            .collect();
        let y_obs = DVector::from_fn(n, |_, _| {
            <StandardNormal as Distribution<f64>>::sample(&normal, rng)
        });
        SourceData::new(0, None, x, w, y_obs, None, None).unwrap()
    }

    fn random_psd2(rng: &mut ChaCha20Rng, diag_boost: f64) -> SymMatrix {
        let a = DMatrix::from_fn(2, 2, |_, _| {
            <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
        });
        let mut p = &a * a.transpose();
        p[(0, 0)] += diag_boost;
        p[(1, 1)] += diag_boost;
        SymMatrix::symmetrized(p).unwrap()
    }

    #[test]
    fn kernel_at_identical_inputs_returns_signal_variance() {
        let p = KernelParams::new(0.3, 0.7);
        let x = [0.1, -0.4, 2.0];
        assert_abs_diff_eq!(rbf_kernel(&x, &x, &p), 0.7f64.exp(), epsilon = 1e-14);
    }

    #[test]
    fn kernel_decays_by_squared_distance_over_lengthscale() {
        let p = KernelParams::new(0.0, 0.0);
        // Distance 2 at unit lengthscale: value exp(-2).
        let v = rbf_kernel(&[0.0], &[2.0], &p);
        assert_abs_diff_eq!(v, (-2.0f64).exp(), epsilon = 1e-14);
    }

    #[test]
    fn gram_matches_pointwise_kernel() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let x = DMatrix::from_fn(6, 3, |_, _| {
            <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
        });
        let p = KernelParams::new(0.4, -0.2);
        let g = rbf_gram(&x, &p);
        for i in 0..6 {
            for j in 0..6 {
                let a: Vec<f64> = x.row(i).iter().cloned().collect();
                let b: Vec<f64> = x.row(j).iter().cloned().collect();
                assert_abs_diff_eq!(g[(i, j)], rbf_kernel(&a, &b, &p), epsilon = 1e-13);
            }
        }
    }

    /// The observed/missing blocks are the treatment-permuted joint
    /// covariance: build the permutation explicitly and compare entrywise.
    #[test]
    fn obs_mis_blocks_match_permuted_joint() {
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        for case in 0..25 {
            let n = 1 + (case % 5);
            let src = random_source(&mut rng, n, 2);
            let phi = random_psd2(&mut rng, 0.3);
            let sigma = random_psd2(&mut rng, 0.5);
            let kp = KernelParams::new(0.2, 0.1);
            let k = rbf_gram(&src.x, &kp);

            let joint = joint_outcome_cov(&k, &phi, &sigma).unwrap();
            let blocks = obs_mis_kernels(&src, &k, &phi, &sigma).unwrap();

            // Position of unit i's observed entry inside the joint vector.
            let obs_pos: Vec<usize> = src
                .w
                .iter()
                .enumerate()
                .map(|(i, &w)| if w == 1 { n + i } else { i })
                .collect();
            let mis_pos: Vec<usize> = src
                .w
                .iter()
                .enumerate()
                .map(|(i, &w)| if w == 1 { i } else { n + i })
                .collect();

            for i in 0..n {
                for j in 0..n {
                    assert_abs_diff_eq!(
                        blocks.obs[(i, j)],
                        joint[(obs_pos[i], obs_pos[j])],
                        epsilon = 1e-13
                    );
                    assert_abs_diff_eq!(
                        blocks.mis[(i, j)],
                        joint[(mis_pos[i], mis_pos[j])],
                        epsilon = 1e-13
                    );
                    assert_abs_diff_eq!(
                        blocks.cross[(i, j)],
                        joint[(obs_pos[i], mis_pos[j])],
                        epsilon = 1e-13
                    );
                }
            }

            // Means permute the joint mean the same way.
            let g = [0.4, -0.2];
            let mu0 = MeanFnParams {
                weights: DVector::from_vec(vec![0.3, -0.1]),
                bias: 0.2,
            };
            let mu1 = MeanFnParams {
                weights: DVector::from_vec(vec![-0.2, 0.5]),
                bias: 1.0,
            };
            let joint_mean = joint_outcome_mean(&src.x, &phi, g, &mu0, &mu1).unwrap();
            let (mean_obs, mean_mis) = obs_mis_means(&src, &phi, g, &mu0, &mu1).unwrap();
            for i in 0..n {
                assert_abs_diff_eq!(mean_obs[i], joint_mean[obs_pos[i]], epsilon = 1e-13);
                assert_abs_diff_eq!(mean_mis[i], joint_mean[mis_pos[i]], epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn single_control_unit_blocks_reduce_to_scalars() {
        let src = SourceData::new(
            0,
            None,
            DMatrix::from_row_slice(1, 1, &[0.3]),
            vec![0],
            DVector::from_vec(vec![1.0]),
            None,
            None,
        )
        .unwrap();
        let phi = sym2(1.3, 0.4, 0.9);
        let sigma = sym2(0.5, 0.1, 0.8);
        let kp = KernelParams::new(0.0, 0.0);
        let k = rbf_gram(&src.x, &kp);
        let blocks = obs_mis_kernels(&src, &k, &phi, &sigma).unwrap();
        // Control unit observes arm 0, misses arm 1; k(x, x) = 1.
        assert_abs_diff_eq!(
            blocks.obs[(0, 0)],
            phi[(0, 0)] + sigma[(0, 0)],
            epsilon = 1e-14
        );
        assert_abs_diff_eq!(
            blocks.mis[(0, 0)],
            phi[(1, 1)] + sigma[(1, 1)],
            epsilon = 1e-14
        );
        assert_abs_diff_eq!(
            blocks.cross[(0, 0)],
            phi[(0, 1)] + sigma[(0, 1)],
            epsilon = 1e-14
        );
    }

    #[test]
    fn observed_loglik_matches_independent_assembly() {
        let mut rng = ChaCha20Rng::seed_from_u64(23);
        let src = random_source(&mut rng, 7, 3);
        let phi = random_psd2(&mut rng, 0.4);
        let sigma = random_psd2(&mut rng, 0.6);
        let kp = KernelParams::new(0.1, -0.3);
        let mu0 = MeanFnParams {
            weights: DVector::from_vec(vec![0.2, -0.4, 0.1]),
            bias: 0.5,
        };
        let mu1 = MeanFnParams {
            weights: DVector::from_vec(vec![-0.3, 0.2, 0.6]),
            bias: 1.2,
        };
        let g = [0.15, -0.25];

        let ll = observed_loglik(&src, &phi, &sigma, g, &kp, &mu0, &mu1).unwrap();

        let k = rbf_gram(&src.x, &kp);
        let blocks = obs_mis_kernels(&src, &k, &phi, &sigma).unwrap();
        let (mean_obs, _) = obs_mis_means(&src, &phi, g, &mu0, &mu1).unwrap();
        let expected = mvn_logpdf(&src.y_obs, &mean_obs, &blocks.obs).unwrap();
        assert_abs_diff_eq!(ll, expected, epsilon = 1e-12);
    }

    /// The observed likelihood never reads the off-diagonal noise entry.
    #[test]
    fn observed_loglik_is_invariant_to_noise_cross_term() {
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        let src = random_source(&mut rng, 6, 2);
        let phi = random_psd2(&mut rng, 0.4);
        let kp = KernelParams::new(0.0, 0.0);
        let mu0 = MeanFnParams::zeros(2);
        let mu1 = MeanFnParams::zeros(2);
        let a = observed_loglik(
            &src,
            &phi,
            &sym2(1.0, 0.1, 1.0),
            [0.0, 0.0],
            &kp,
            &mu0,
            &mu1,
        )
        .unwrap();
        let b = observed_loglik(
            &src,
            &phi,
            &sym2(1.0, 0.9, 1.0),
            [0.0, 0.0],
            &kp,
            &mu0,
            &mu1,
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn source_rejects_nonbinary_treatment() {
        let r = SourceData::new(
            0,
            None,
            DMatrix::zeros(2, 1),
            vec![0, 2],
            DVector::zeros(2),
            None,
            None,
        );
        match r {
            Err(Error::NonBinaryTreatment { row: 1, .. }) => {}
            other => panic!("expected NonBinaryTreatment, got {other:?}"),
        }
    }

    #[test]
    fn select_projects_rows_in_order() {
        let src = SourceData::new(
            3,
            Some(vec!["a".into(), "b".into(), "c".into()]),
            DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 3.0]),
            vec![0, 1, 0],
            DVector::from_vec(vec![10.0, 20.0, 30.0]),
            None,
            None,
        )
        .unwrap();
        let sel = src.select(&[2, 0]).unwrap();
        assert_eq!(sel.source_id, 3);
        assert_eq!(
            sel.ids.as_ref().unwrap(),
            &vec!["c".to_string(), "a".to_string()]
        );
        assert_eq!(sel.x[(0, 0)], 3.0);
        assert_eq!(sel.w, vec![0, 0]);
        assert_eq!(sel.y_obs[1], 10.0);
        assert!(matches!(
            src.select(&[5]),
            Err(Error::IndexOutOfRange { index: 5, len: 3 })
        ));
    }

    #[test]
    fn summary_vector_layout_is_stable() {
        let s = SourceSummary {
            source_id: 0,
            y0_moments: MomentVector {
                mean: 1.0,
                variance: 2.0,
                skewness: 3.0,
                kurtosis: 4.0,
            },
            y1_moments: MomentVector {
                mean: 5.0,
                variance: 6.0,
                skewness: 7.0,
                kurtosis: 8.0,
            },
            x_moments: vec![MomentVector {
                mean: 9.0,
                variance: 10.0,
                skewness: 11.0,
                kurtosis: 12.0,
            }],
            w_moments: MomentVector {
                mean: 13.0,
                variance: 14.0,
                skewness: 15.0,
                kurtosis: 16.0,
            },
        };
        let u = s.u();
        assert_eq!(u.len(), SourceSummary::u_len(1));
        let expected: Vec<f64> = (1..=16).map(|v| v as f64).collect();
        assert_eq!(u.as_slice(), expected.as_slice());
        assert_eq!(s.x_tilde().as_slice(), &[9.0, 10.0, 11.0, 12.0]);
    }
}
