//! Matrix and distribution primitives: Cholesky with jitter escalation,
//! Gaussian and Wishart densities, samplers, KL divergences, and
//! four-moment summaries.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::{Error, Result};

/// Default diagonal jitter added to kernel matrices before factorization.
pub const DEFAULT_JITTER: f64 = 1e-6;

/// Maximum number of jitter doublings attempted before giving up.
const MAX_JITTER_DOUBLINGS: u32 = 3;

pub(crate) const LN_2PI: f64 = 1.837877066409345483560659472811;

/// Dense symmetric matrix. Construction validates symmetry; entries are
/// stored exactly as given.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    /// Wrap a square matrix, requiring symmetry up to 1e-12 relative to the
    /// largest entry.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::ShapeMismatch {
                context: "SymMatrix::new",
                detail: format!("{}x{} matrix is not square", m.nrows(), m.ncols()),
            });
        }
        let scale = m.iter().fold(1.0f64, |a, v| a.max(v.abs()));
        for i in 0..m.nrows() {
            for j in (i + 1)..m.ncols() {
                if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 * scale {
                    return Err(Error::ShapeMismatch {
                        context: "SymMatrix::new",
                        detail: format!(
                            "asymmetric entry at ({i},{j}): {} vs {}",
                            m[(i, j)],
                            m[(j, i)]
                        ),
                    });
                }
            }
        }
        Ok(SymMatrix(m))
    }

    /// Wrap a computed product, forcing exact symmetry by averaging the
    /// off-diagonal pairs. Intended for matrices that are symmetric in exact
    /// arithmetic but carry floating-point dust.
    pub fn symmetrized(mut m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::ShapeMismatch {
                context: "SymMatrix::symmetrized",
                detail: format!("{}x{} matrix is not square", m.nrows(), m.ncols()),
            });
        }
        for i in 0..m.nrows() {
            for j in (i + 1)..m.ncols() {
                let v = 0.5 * (m[(i, j)] + m[(j, i)]);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        Ok(SymMatrix(m))
    }

    /// Build from a closure over (row, col); the closure is evaluated once
    /// per unordered pair so the result is symmetric by construction.
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = f(i, j);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        SymMatrix(m)
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }
}

impl core::ops::Index<(usize, usize)> for SymMatrix {
    type Output = f64;
    fn index(&self, idx: (usize, usize)) -> &f64 {
        &self.0[idx]
    }
}

/// Lower-triangular Cholesky factor together with the jitter that made the
/// factorization succeed.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    lower: DMatrix<f64>,
    jitter_used: f64,
}

impl CholeskyFactor {
    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    /// Jitter actually added to the diagonal (0 when the matrix factored
    /// as given).
    pub fn jitter_used(&self) -> f64 {
        self.jitter_used
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    /// log |A + jitter I| via the factor diagonal.
    pub fn log_det(&self) -> f64 {
        2.0 * self.lower.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// Solve L z = b by forward substitution.
    pub fn forward_solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut z = b.clone();
        self.forward_solve_vec_mut(&mut z);
        z
    }

    pub fn forward_solve_vec_mut(&self, z: &mut DVector<f64>) {
        let n = self.lower.nrows();
        let l = &self.lower;
        for i in 0..n {
            let mut acc = z[i];
            for k in 0..i {
                acc -= l[(i, k)] * z[k];
            }
            z[i] = acc / l[(i, i)];
        }
    }

    /// Solve L X = B columnwise.
    pub fn forward_solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        let n = self.lower.nrows();
        let l = &self.lower;
        for c in 0..x.ncols() {
            for i in 0..n {
                let mut acc = x[(i, c)];
                for k in 0..i {
                    acc -= l[(i, k)] * x[(k, c)];
                }
                x[(i, c)] = acc / l[(i, i)];
            }
        }
        x
    }

    /// Solve (L Lᵀ) x = b.
    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut z = self.forward_solve_vec(b);
        let n = self.lower.nrows();
        let l = &self.lower;
        for i in (0..n).rev() {
            let mut acc = z[i];
            for k in (i + 1)..n {
                acc -= l[(k, i)] * z[k];
            }
            z[i] = acc / l[(i, i)];
        }
        z
    }

    /// A + jitter I recovered from the factor, for reconstruction checks.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.lower * self.lower.transpose()
    }
}

fn try_factor(a: &DMatrix<f64>, jitter: f64) -> Option<DMatrix<f64>> {
    let mut work = a.clone();
    if jitter != 0.0 {
        for i in 0..work.nrows() {
            work[(i, i)] += jitter;
        }
    }
    nalgebra::linalg::Cholesky::new(work).map(|c| c.unpack())
}

/// Cholesky factorization with jitter escalation.
///
/// The factorization is first attempted with the given jitter. On failure
/// the jitter escalates by doubling, starting from `DEFAULT_JITTER` when the
/// initial value was smaller, for at most three doublings; a matrix still
/// indefinite after that is rejected.
pub fn cholesky(a: &SymMatrix, jitter: f64) -> Result<CholeskyFactor> {
    if jitter < 0.0 || !jitter.is_finite() {
        return Err(Error::InvalidConfig {
            detail: format!("jitter must be finite and non-negative, got {jitter}"),
        });
    }
    if let Some(lower) = try_factor(&a.0, jitter) {
        return Ok(CholeskyFactor {
            lower,
            jitter_used: jitter,
        });
    }
    let base = if jitter > 0.0 {
        jitter
    } else {
        DEFAULT_JITTER / 2.0
    };
    let mut current = base;
    let mut last = jitter;
    for _ in 0..=MAX_JITTER_DOUBLINGS {
        current *= 2.0;
        last = current;
        if let Some(lower) = try_factor(&a.0, current) {
            return Ok(CholeskyFactor {
                lower,
                jitter_used: current,
            });
        }
    }
    Err(Error::NotPositiveDefinite {
        dim: a.dim(),
        jitter: last,
    })
}

/// Exact log-density of a multivariate normal.
///
/// Factors the covariance as given (zero initial jitter); escalation only
/// engages when the plain factorization fails.
pub fn mvn_logpdf(y: &DVector<f64>, mean: &DVector<f64>, cov: &SymMatrix) -> Result<f64> {
    let n = y.len();
    if mean.len() != n {
        return Err(Error::DimensionMismatch {
            context: "mvn_logpdf mean",
            expected: n,
            got: mean.len(),
        });
    }
    if cov.dim() != n {
        return Err(Error::DimensionMismatch {
            context: "mvn_logpdf cov",
            expected: n,
            got: cov.dim(),
        });
    }
    let factor = cholesky(cov, 0.0)?;
    Ok(mvn_logpdf_with_factor(y, mean, &factor))
}

/// Log-density evaluated against a pre-factored covariance.
pub fn mvn_logpdf_with_factor(
    y: &DVector<f64>,
    mean: &DVector<f64>,
    factor: &CholeskyFactor,
) -> f64 {
    let mut resid = y - mean;
    factor.forward_solve_vec_mut(&mut resid);
    let quad = resid.norm_squared();
    -0.5 * (y.len() as f64 * LN_2PI + factor.log_det() + quad)
}

/// Draw mean + L z for standard-normal noise z.
pub fn mvn_sample(
    mean: &DVector<f64>,
    cov: &SymMatrix,
    noise: &DVector<f64>,
) -> Result<DVector<f64>> {
    if mean.len() != cov.dim() {
        return Err(Error::DimensionMismatch {
            context: "mvn_sample cov",
            expected: mean.len(),
            got: cov.dim(),
        });
    }
    if noise.len() != mean.len() {
        return Err(Error::DimensionMismatch {
            context: "mvn_sample noise",
            expected: mean.len(),
            got: noise.len(),
        });
    }
    let factor = cholesky(cov, 0.0)?;
    Ok(mean + factor.lower() * noise)
}

/// Triangular noise block for one 2x2 Wishart draw: realized chi-square
/// values for the diagonal and a standard normal for the subdiagonal entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriangularNoise {
    /// Chi-square draws with d and d-1 degrees of freedom.
    pub chi_sq: [f64; 2],
    /// Standard normal draw for the (2,1) entry.
    pub z21: f64,
}

impl TriangularNoise {
    /// Noise that reproduces the identity inner draw; useful as a fixed point.
    pub fn identity() -> Self {
        TriangularNoise {
            chi_sq: [1.0, 1.0],
            z21: 0.0,
        }
    }

    /// Lower-triangular factor A with A Aᵀ ~ W(I, d) when the fields carry
    /// draws at degrees of freedom d and d-1.
    pub fn factor(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(
            2,
            2,
            &[self.chi_sq[0].sqrt(), 0.0, self.z21, self.chi_sq[1].sqrt()],
        )
    }
}

/// Draw W(scale, dof) given a lower-triangular square root of the scale.
pub(crate) fn wishart_from_lower(lower: &DMatrix<f64>, noise: &TriangularNoise) -> SymMatrix {
    let half = lower * noise.factor();
    SymMatrix::symmetrized(&half * half.transpose())
        .expect("product of a square matrix with its transpose is square")
}

/// Draw from a 2x2 Wishart W(scale, dof) by reparameterization: the draw is
/// V^{1/2} A Aᵀ (V^{1/2})ᵀ with V^{1/2} the Cholesky factor of the scale and
/// A built from externally supplied noise. Requires dof >= 2 so both
/// chi-square blocks are well defined.
pub fn wishart_sample(scale: &SymMatrix, dof: f64, noise: &TriangularNoise) -> Result<SymMatrix> {
    if scale.dim() != 2 {
        return Err(Error::DimensionMismatch {
            context: "wishart_sample scale",
            expected: 2,
            got: scale.dim(),
        });
    }
    if !(dof >= 2.0) {
        return Err(Error::InvalidDegreesOfFreedom { dof, min: 2.0 });
    }
    if noise.chi_sq[0] < 0.0 || noise.chi_sq[1] < 0.0 {
        return Err(Error::InvalidConfig {
            detail: "negative chi-square noise in Wishart draw".into(),
        });
    }
    let factor = cholesky(scale, 0.0)?;
    Ok(wishart_from_lower(factor.lower(), noise))
}

/// KL(N(mean_q, cov_q) || N(mean_p, cov_p)) in closed form.
pub fn kl_gaussian(
    mean_q: &DVector<f64>,
    cov_q: &SymMatrix,
    mean_p: &DVector<f64>,
    cov_p: &SymMatrix,
) -> Result<f64> {
    let k = mean_q.len();
    if mean_p.len() != k || cov_q.dim() != k || cov_p.dim() != k {
        return Err(Error::DimensionMismatch {
            context: "kl_gaussian",
            expected: k,
            got: mean_p.len().max(cov_q.dim()).max(cov_p.dim()),
        });
    }
    let fq = cholesky(cov_q, 0.0)?;
    let fp = cholesky(cov_p, 0.0)?;
    // tr(cov_p^{-1} cov_q) through W = Lp^{-1} Lq: the trace equals ||W||_F^2.
    let w = fp.forward_solve_mat(fq.lower());
    let trace = w.norm_squared();
    let mut diff = mean_p - mean_q;
    fp.forward_solve_vec_mut(&mut diff);
    let quad = diff.norm_squared();
    Ok(0.5 * (trace + quad - k as f64 + fp.log_det() - fq.log_det()))
}

/// Multivariate log-gamma for p = 2.
fn ln_gamma2(a: f64) -> f64 {
    core::f64::consts::PI.ln() * 0.5 + ln_gamma(a) + ln_gamma(a - 0.5)
}

/// Multivariate digamma for p = 2.
fn digamma2(a: f64) -> f64 {
    digamma(a) + digamma(a - 0.5)
}

/// KL(W(scale_q, dof_q) || W(scale_p, dof_p)) for 2x2 Wisharts in closed
/// form. Both degrees of freedom must exceed 1 so the densities exist.
pub fn kl_wishart(scale_q: &SymMatrix, dof_q: f64, scale_p: &SymMatrix, dof_p: f64) -> Result<f64> {
    const P: f64 = 2.0;
    if scale_q.dim() != 2 || scale_p.dim() != 2 {
        return Err(Error::DimensionMismatch {
            context: "kl_wishart scale",
            expected: 2,
            got: scale_q.dim().max(scale_p.dim()),
        });
    }
    if !(dof_q > 1.0) {
        return Err(Error::InvalidDegreesOfFreedom {
            dof: dof_q,
            min: 1.0,
        });
    }
    if !(dof_p > 1.0) {
        return Err(Error::InvalidDegreesOfFreedom {
            dof: dof_p,
            min: 1.0,
        });
    }
    let fq = cholesky(scale_q, 0.0)?;
    let fp = cholesky(scale_p, 0.0)?;
    // tr(scale_p^{-1} scale_q) via the triangular solve, as in kl_gaussian.
    let w = fp.forward_solve_mat(fq.lower());
    let trace = w.norm_squared();
    let log_det_ratio = fp.log_det() - fq.log_det();
    Ok(
        0.5 * dof_p * log_det_ratio + 0.5 * dof_q * (trace - P) + ln_gamma2(0.5 * dof_p)
            - ln_gamma2(0.5 * dof_q)
            + 0.5 * (dof_q - dof_p) * digamma2(0.5 * dof_q),
    )
}

/// First four standardized moments of a sample.
///
/// Mean, population variance, skewness, and non-excess kurtosis (Gaussian
/// kurtosis is 3). A sample with variance below 1e-12 reports zero skewness
/// and kurtosis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentVector {
    pub mean: f64,
    pub variance: f64,
    pub skewness: f64,
    pub kurtosis: f64,
}

impl MomentVector {
    pub fn zeros() -> Self {
        MomentVector {
            mean: 0.0,
            variance: 0.0,
            skewness: 0.0,
            kurtosis: 0.0,
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.mean, self.variance, self.skewness, self.kurtosis]
    }
}

/// Compute a [`MomentVector`] from at least two samples.
pub fn moments4(samples: &[f64]) -> Result<MomentVector> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::InsufficientData {
            context: "moments4",
            need: 2,
            got: n,
        });
    }
    let nf = n as f64;
    let mean = samples.iter().sum::<f64>() / nf;
    let mut m2 = 0.0;
    let mut m3 = 0.0;
    let mut m4 = 0.0;
    for &x in samples {
        let d = x - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= nf;
    m3 /= nf;
    m4 /= nf;
    let (skewness, kurtosis) = if m2 < 1e-12 {
        (0.0, 0.0)
    } else {
        (m3 / m2.powf(1.5), m4 / (m2 * m2))
    };
    Ok(MomentVector {
        mean,
        variance: m2,
        skewness,
        kurtosis,
    })
}

/// Deterministic 64-bit mix used to derive stream seeds from a base seed and
/// an index without correlation between adjacent indices.
pub fn mix_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_mul(0x9e3779b97f4a7c15);
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
