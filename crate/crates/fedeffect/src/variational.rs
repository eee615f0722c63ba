//! Variational family, evidence lower bound, and gradients.
//!
//! The posterior factorizes over the mixing matrix (Wishart), the noise
//! matrix (Wishart), and the per-source offsets (Gaussian with a
//! summary-kernel covariance). All randomness rides on fixed noise bundles
//! so that every evaluation is a deterministic function of the parameter
//! vector; gradients are central finite differences over that function.
//!
//! Two gradient paths exist: [`grad_fd`] differentiates an arbitrary loss
//! closure, and [`source_grad`] differentiates the per-source ELBO while
//! reusing every factorization a perturbed coordinate cannot touch. The two
//! paths perform the same arithmetic and their agreement is pinned by tests.

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha20Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::mathcore::{
    cholesky, kl_gaussian, kl_wishart, mvn_logpdf_with_factor, wishart_from_lower, CholeskyFactor,
    SymMatrix, DEFAULT_JITTER,
};
use crate::model::{
    add_noise_diag, obs_mis_means_from_factor, phi_masked, rbf_from_sq_dists, rbf_gram_vecs,
    KernelParams, LatentG, MeanFnParams, PriorConfig, SourceData, SourceSummary,
};
use crate::{Error, Result};

/// Fixed degrees of freedom of the two Wishart posteriors.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VariationalConfig {
    pub d_q: f64,
    pub n_q: f64,
}

impl Default for VariationalConfig {
    fn default() -> Self {
        VariationalConfig { d_q: 5.0, n_q: 5.0 }
    }
}

impl VariationalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.d_q >= 2.0) {
            return Err(Error::InvalidDegreesOfFreedom {
                dof: self.d_q,
                min: 2.0,
            });
        }
        if !(self.n_q >= 2.0) {
            return Err(Error::InvalidDegreesOfFreedom {
                dof: self.n_q,
                min: 2.0,
            });
        }
        Ok(())
    }
}

/// Stable index map over the flat parameter vector.
///
/// Order: unit kernel, source kernel, outcome means (control, treated),
/// offset prior means (control, treated), offset posterior means (control,
/// treated), variational scalars, summary kernel. Within each affine-mean
/// block the weights precede the bias. The six variational scalars are the
/// unconstrained logs of nu1, nu2, the logit of rho, the logs of delta1,
/// delta2, and the logit of eta, in that order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ThetaLayout {
    pub d_x: usize,
}

/// Coordinate classes used by the structured gradient path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoordClass {
    /// Unit-kernel parameters: the kernel matrix changes.
    UnitKernel,
    /// Source-kernel and offset-prior parameters: only the offset KL moves.
    OffsetPrior,
    /// Outcome-mean and offset-posterior parameters: only means move.
    MeanPath,
    /// Mixing-matrix scalars: likelihood mean and covariance move.
    MixingScale,
    /// Noise-matrix scalars: likelihood covariance moves.
    NoiseScale,
}

impl ThetaLayout {
    pub fn new(d_x: usize) -> Self {
        ThetaLayout { d_x }
    }

    pub fn u_len(&self) -> usize {
        SourceSummary::u_len(self.d_x)
    }

    pub fn len(&self) -> usize {
        18 * self.d_x + 42
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn kernel(&self) -> core::ops::Range<usize> {
        0..2
    }

    pub fn source_kernel(&self) -> core::ops::Range<usize> {
        2..4
    }

    pub fn mu0(&self) -> core::ops::Range<usize> {
        let s = 4;
        s..s + self.d_x + 1
    }

    pub fn mu1(&self) -> core::ops::Range<usize> {
        let s = self.mu0().end;
        s..s + self.d_x + 1
    }

    pub fn r0(&self) -> core::ops::Range<usize> {
        let s = self.mu1().end;
        s..s + 4 * self.d_x + 1
    }

    pub fn r1(&self) -> core::ops::Range<usize> {
        let s = self.r0().end;
        s..s + 4 * self.d_x + 1
    }

    pub fn h0(&self) -> core::ops::Range<usize> {
        let s = self.r1().end;
        s..s + self.u_len() + 1
    }

    pub fn h1(&self) -> core::ops::Range<usize> {
        let s = self.h0().end;
        s..s + self.u_len() + 1
    }

    pub fn scalars(&self) -> core::ops::Range<usize> {
        let s = self.h1().end;
        s..s + 6
    }

    pub fn summary_kernel(&self) -> core::ops::Range<usize> {
        let s = self.scalars().end;
        s..s + 2
    }

    /// Class of one coordinate for the structured gradient path.
    pub fn class_of(&self, idx: usize) -> CoordClass {
        if self.kernel().contains(&idx) {
            CoordClass::UnitKernel
        } else if self.source_kernel().contains(&idx)
            || self.r0().contains(&idx)
            || self.r1().contains(&idx)
        {
            CoordClass::OffsetPrior
        } else if self.scalars().contains(&idx) {
            if idx - self.scalars().start < 3 {
                CoordClass::MixingScale
            } else {
                CoordClass::NoiseScale
            }
        } else {
            // mu, h, and summary-kernel coordinates all flow through means.
            CoordClass::MeanPath
        }
    }
}

/// Flat parameter vector with its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalParams {
    pub values: DVector<f64>,
    pub layout: ThetaLayout,
}

/// Constrained variational scalars.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarScalars {
    pub nu1: f64,
    pub nu2: f64,
    pub rho: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub eta: f64,
}

/// Typed view of the full parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct UnpackedParams {
    pub kernel: KernelParams,
    pub source_kernel: KernelParams,
    pub mu0: MeanFnParams,
    pub mu1: MeanFnParams,
    pub r0: MeanFnParams,
    pub r1: MeanFnParams,
    pub h0: MeanFnParams,
    pub h1: MeanFnParams,
    pub scalars: VarScalars,
    pub summary_kernel: KernelParams,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn mean_fn_from(values: &DVector<f64>, range: core::ops::Range<usize>) -> MeanFnParams {
    let w_end = range.end - 1;
    MeanFnParams {
        weights: DVector::from_iterator(
            w_end - range.start,
            (range.start..w_end).map(|i| values[i]),
        ),
        bias: values[w_end],
    }
}

impl GlobalParams {
    /// Deterministic initialization: affine means start at zero, kernel
    /// scales at moderate defaults, and the Wishart scales where the
    /// posterior mean of each 2x2 matrix is the identity.
    pub fn init(d_x: usize, vcfg: &VariationalConfig) -> Self {
        let layout = ThetaLayout::new(d_x);
        let mut v = DVector::zeros(layout.len());
        // Unit kernel: lengthscale near the typical inter-point distance of
        // bounded covariates, unit signal variance.
        v[0] = 0.5 * ((2.0 * d_x.max(1) as f64) / 3.0).ln();
        v[1] = 0.0;
        // Source kernel over covariate summaries.
        v[2] = 0.0;
        v[3] = 0.0;
        let sc = layout.scalars().start;
        v[sc] = 0.5 * (1.0 / vcfg.d_q).ln();
        v[sc + 1] = 0.5 * (1.0 / vcfg.d_q).ln();
        v[sc + 2] = -2.0;
        v[sc + 3] = 0.5 * (1.0 / vcfg.n_q).ln();
        v[sc + 4] = 0.5 * (1.0 / vcfg.n_q).ln();
        v[sc + 5] = -2.0;
        // Summary kernel: long lengthscale, small signal variance so the
        // offsets start close to their posterior mean.
        let sk = layout.summary_kernel().start;
        v[sk] = 5.0f64.ln();
        v[sk + 1] = 0.25f64.ln();
        GlobalParams { values: v, layout }
    }

    pub fn from_values(values: DVector<f64>, d_x: usize) -> Result<Self> {
        let layout = ThetaLayout::new(d_x);
        if values.len() != layout.len() {
            return Err(Error::DimensionMismatch {
                context: "GlobalParams::from_values",
                expected: layout.len(),
                got: values.len(),
            });
        }
        Ok(GlobalParams { values, layout })
    }

    /// Typed view of the vector.
    pub fn unpack(&self) -> UnpackedParams {
        unpack_values(&self.values, &self.layout)
    }

    /// Rebuild the flat vector from a typed view; inverse of [`Self::unpack`].
    pub fn pack(p: &UnpackedParams, layout: ThetaLayout) -> Self {
        let mut v = DVector::zeros(layout.len());
        v[0] = p.kernel.log_lengthscale;
        v[1] = p.kernel.log_signal_variance;
        v[2] = p.source_kernel.log_lengthscale;
        v[3] = p.source_kernel.log_signal_variance;
        let write_mean =
            |v: &mut DVector<f64>, range: core::ops::Range<usize>, m: &MeanFnParams| {
                let w_end = range.end - 1;
                for (k, i) in (range.start..w_end).enumerate() {
                    v[i] = m.weights[k];
                }
                v[w_end] = m.bias;
            };
        write_mean(&mut v, layout.mu0(), &p.mu0);
        write_mean(&mut v, layout.mu1(), &p.mu1);
        write_mean(&mut v, layout.r0(), &p.r0);
        write_mean(&mut v, layout.r1(), &p.r1);
        write_mean(&mut v, layout.h0(), &p.h0);
        write_mean(&mut v, layout.h1(), &p.h1);
        let sc = layout.scalars().start;
        v[sc] = p.scalars.nu1.ln();
        v[sc + 1] = p.scalars.nu2.ln();
        v[sc + 2] = logit(p.scalars.rho);
        v[sc + 3] = p.scalars.delta1.ln();
        v[sc + 4] = p.scalars.delta2.ln();
        v[sc + 5] = logit(p.scalars.eta);
        let sk = layout.summary_kernel().start;
        v[sk] = p.summary_kernel.log_lengthscale;
        v[sk + 1] = p.summary_kernel.log_signal_variance;
        GlobalParams { values: v, layout }
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn unpack_values(values: &DVector<f64>, layout: &ThetaLayout) -> UnpackedParams {
    let sc = layout.scalars().start;
    UnpackedParams {
        kernel: KernelParams::new(values[0], values[1]),
        source_kernel: KernelParams::new(values[2], values[3]),
        mu0: mean_fn_from(values, layout.mu0()),
        mu1: mean_fn_from(values, layout.mu1()),
        r0: mean_fn_from(values, layout.r0()),
        r1: mean_fn_from(values, layout.r1()),
        h0: mean_fn_from(values, layout.h0()),
        h1: mean_fn_from(values, layout.h1()),
        scalars: VarScalars {
            nu1: values[sc].exp(),
            nu2: values[sc + 1].exp(),
            rho: sigmoid(values[sc + 2]),
            delta1: values[sc + 3].exp(),
            delta2: values[sc + 4].exp(),
            eta: sigmoid(values[sc + 5]),
        },
        summary_kernel: KernelParams::new(
            values[layout.summary_kernel().start],
            values[layout.summary_kernel().start + 1],
        ),
    }
}

impl VarScalars {
    /// Lower-triangular square root of the mixing-scale matrix
    /// [[nu1^2, rho nu1 nu2], [rho nu1 nu2, nu2^2]].
    pub fn mixing_scale_factor(&self) -> DMatrix<f64> {
        corr_factor(self.nu1, self.nu2, self.rho)
    }

    /// Lower-triangular square root of the noise-scale matrix.
    pub fn noise_scale_factor(&self) -> DMatrix<f64> {
        corr_factor(self.delta1, self.delta2, self.eta)
    }

    pub fn mixing_scale(&self) -> SymMatrix {
        scale_matrix(self.nu1, self.nu2, self.rho)
    }

    pub fn noise_scale(&self) -> SymMatrix {
        scale_matrix(self.delta1, self.delta2, self.eta)
    }
}

fn corr_factor(s1: f64, s2: f64, r: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[s1, 0.0, r * s2, s2 * (1.0 - r * r).max(0.0).sqrt()])
}

fn scale_matrix(s1: f64, s2: f64, r: f64) -> SymMatrix {
    SymMatrix::from_fn(2, |i, j| match (i, j) {
        (0, 0) => s1 * s1,
        (1, 1) => s2 * s2,
        _ => r * s1 * s2,
    })
}

/// Variational state needed to draw from the posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalParams {
    pub scalars: VarScalars,
    pub d_q: f64,
    pub n_q: f64,
    pub summary_kernel: KernelParams,
    pub h0: MeanFnParams,
    pub h1: MeanFnParams,
}

impl VariationalParams {
    pub fn from_theta(theta: &GlobalParams, vcfg: &VariationalConfig) -> Self {
        let p = theta.unpack();
        VariationalParams {
            scalars: p.scalars,
            d_q: vcfg.d_q,
            n_q: vcfg.n_q,
            summary_kernel: p.summary_kernel,
            h0: p.h0,
            h1: p.h1,
        }
    }
}

/// One bundle of reparameterization noise: offset normals for both arms and
/// triangular noise for the two Wishart draws.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBundle {
    pub xi0: DVector<f64>,
    pub xi1: DVector<f64>,
    pub tri_phi: crate::mathcore::TriangularNoise,
    pub tri_sigma: crate::mathcore::TriangularNoise,
}

impl NoiseBundle {
    /// Draw one bundle. The draw order is fixed; callers relying on common
    /// random numbers regenerate bundles from the same seed.
    pub fn generate(rng: &mut ChaCha20Rng, m: usize, d_q: f64, n_q: f64) -> Result<Self> {
        let chi = |dof: f64, rng: &mut ChaCha20Rng| -> Result<f64> {
            let dist = ChiSquared::new(dof)
                .map_err(|_| Error::InvalidDegreesOfFreedom { dof, min: 1.0 })?;
            Ok(dist.sample(rng))
        };
        let normal = |rng: &mut ChaCha20Rng| {
            <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
        };
        let xi0 = DVector::from_fn(m, |_, _| normal(rng));
        let xi1 = DVector::from_fn(m, |_, _| normal(rng));
        let tri_phi = crate::mathcore::TriangularNoise {
            chi_sq: [chi(d_q, rng)?, chi(d_q - 1.0, rng)?],
            z21: normal(rng),
        };
        let tri_sigma = crate::mathcore::TriangularNoise {
            chi_sq: [chi(n_q, rng)?, chi(n_q - 1.0, rng)?],
            z21: normal(rng),
        };
        Ok(NoiseBundle {
            xi0,
            xi1,
            tri_phi,
            tri_sigma,
        })
    }

    /// The bundle set for one training round, derived from a broadcast seed.
    pub fn round_bundles(
        noise_seed: u64,
        count: usize,
        m: usize,
        vcfg: &VariationalConfig,
    ) -> Result<Vec<NoiseBundle>> {
        use rand::SeedableRng;
        let mut rng = ChaCha20Rng::seed_from_u64(noise_seed);
        (0..count)
            .map(|_| NoiseBundle::generate(&mut rng, m, vcfg.d_q, vcfg.n_q))
            .collect()
    }
}

/// Precomputed summary vectors shared by every evaluation.
#[derive(Debug, Clone)]
pub struct SummaryInputs {
    pub u: Vec<DVector<f64>>,
    pub x_tilde: Vec<DVector<f64>>,
}

impl SummaryInputs {
    pub fn from_summaries(summaries: &[SourceSummary]) -> Self {
        SummaryInputs {
            u: summaries.iter().map(|s| s.u()).collect(),
            x_tilde: summaries.iter().map(|s| s.x_tilde()).collect(),
        }
    }

    pub fn m(&self) -> usize {
        self.u.len()
    }
}

/// Kernel gram over vectors with the default jitter baked into the
/// diagonal. The jittered matrix is the covariance actually used, both for
/// sampling and inside KL terms.
fn jittered_gram(points: &[DVector<f64>], params: &KernelParams) -> SymMatrix {
    let g = rbf_gram_vecs(points, params);
    SymMatrix::from_fn(g.dim(), |i, j| {
        g[(i, j)] + if i == j { DEFAULT_JITTER } else { 0.0 }
    })
}

/// Posterior covariance factor of the offsets for the current summary
/// kernel.
pub(crate) fn offset_cov_factor(
    si: &SummaryInputs,
    kappa: &KernelParams,
) -> Result<(SymMatrix, CholeskyFactor)> {
    let u_gram = jittered_gram(&si.u, kappa);
    let factor = cholesky(&u_gram, 0.0)?;
    Ok((u_gram, factor))
}

fn offset_mean(si: &SummaryInputs, h: &MeanFnParams) -> DVector<f64> {
    DVector::from_fn(si.m(), |s, _| h.apply_vec(&si.u[s]))
}

/// Draw the offsets given the posterior mean parameters and a factor of the
/// posterior covariance.
pub(crate) fn offset_draw(
    si: &SummaryInputs,
    h0: &MeanFnParams,
    h1: &MeanFnParams,
    factor: &CholeskyFactor,
    bundle: &NoiseBundle,
) -> LatentG {
    let g0 = offset_mean(si, h0) + factor.lower() * &bundle.xi0;
    let g1 = offset_mean(si, h1) + factor.lower() * &bundle.xi1;
    LatentG {
        g0: g0.iter().cloned().collect(),
        g1: g1.iter().cloned().collect(),
    }
}

/// Draw (mixing matrix, noise matrix, offsets) from the variational
/// posterior using one noise bundle.
pub fn q_sample(
    vp: &VariationalParams,
    summaries: &[SourceSummary],
    bundle: &NoiseBundle,
) -> Result<(SymMatrix, SymMatrix, LatentG)> {
    let si = SummaryInputs::from_summaries(summaries);
    if bundle.xi0.len() != si.m() || bundle.xi1.len() != si.m() {
        return Err(Error::DimensionMismatch {
            context: "q_sample noise",
            expected: si.m(),
            got: bundle.xi0.len(),
        });
    }
    let phi = wishart_from_lower(&vp.scalars.mixing_scale_factor(), &bundle.tri_phi);
    let sigma = wishart_from_lower(&vp.scalars.noise_scale_factor(), &bundle.tri_sigma);
    let (_, factor) = offset_cov_factor(&si, &vp.summary_kernel)?;
    let g = offset_draw(&si, &vp.h0, &vp.h1, &factor, bundle);
    Ok((phi, sigma, g))
}

/// Sum of the three KL terms shared by every source. The offset term is
/// dropped under ablation.
fn kl_total(
    p: &UnpackedParams,
    si: &SummaryInputs,
    priors: &PriorConfig,
    vcfg: &VariationalConfig,
    ablate_offsets: bool,
) -> Result<f64> {
    let kl_phi = kl_wishart(
        &p.scalars.mixing_scale(),
        vcfg.d_q,
        &priors.v0_matrix(),
        priors.d0,
    )?;
    let kl_sigma = kl_wishart(
        &p.scalars.noise_scale(),
        vcfg.n_q,
        &priors.s0_matrix(),
        priors.n0,
    )?;
    let kl_g = if ablate_offsets {
        0.0
    } else {
        offset_kl(p, si)?
    };
    Ok(kl_phi + kl_sigma + kl_g)
}

/// KL between the offset posterior and its source-kernel prior, summed over
/// both arms.
fn offset_kl(p: &UnpackedParams, si: &SummaryInputs) -> Result<f64> {
    let u_gram = jittered_gram(&si.u, &p.summary_kernel);
    let m_gram = jittered_gram(&si.x_tilde, &p.source_kernel);
    let h0 = offset_mean(si, &p.h0);
    let h1 = offset_mean(si, &p.h1);
    let r0 = DVector::from_fn(si.m(), |s, _| p.r0.apply_vec(&si.x_tilde[s]));
    let r1 = DVector::from_fn(si.m(), |s, _| p.r1.apply_vec(&si.x_tilde[s]));
    Ok(kl_gaussian(&h0, &u_gram, &r0, &m_gram)? + kl_gaussian(&h1, &u_gram, &r1, &m_gram)?)
}

/// Everything fixed about one source across ELBO evaluations.
pub struct SourceContext {
    pub src: SourceData,
    pub src_index: usize,
    pub si: SummaryInputs,
    pub priors: PriorConfig,
    pub vcfg: VariationalConfig,
    pub m_total: usize,
    pub ablate_offsets: bool,
    sq_dists: SymMatrix,
}

impl SourceContext {
    pub fn new(
        src: SourceData,
        src_index: usize,
        summaries: &[SourceSummary],
        priors: PriorConfig,
        vcfg: VariationalConfig,
        ablate_offsets: bool,
    ) -> Result<Self> {
        let m_total = summaries.len();
        if m_total == 0 {
            return Err(Error::InvalidConfig {
                detail: "at least one source summary is required".into(),
            });
        }
        if src_index >= m_total {
            return Err(Error::IndexOutOfRange {
                index: src_index,
                len: m_total,
            });
        }
        vcfg.validate()?;
        priors.validate()?;
        let sq_dists = crate::model::pairwise_sq_dists(&src.x);
        Ok(SourceContext {
            src,
            src_index,
            si: SummaryInputs::from_summaries(summaries),
            priors,
            vcfg,
            m_total,
            ablate_offsets,
            sq_dists,
        })
    }
}

/// Per-source ELBO term: the bundle-averaged observed log-likelihood minus
/// the KL share 1/m of the three divergence terms.
pub fn elbo_source(
    ctx: &SourceContext,
    theta: &GlobalParams,
    bundles: &[NoiseBundle],
) -> Result<f64> {
    if bundles.is_empty() {
        return Err(Error::InvalidConfig {
            detail: "at least one noise bundle is required".into(),
        });
    }
    let p = theta.unpack();
    let kl = kl_total(&p, &ctx.si, &ctx.priors, &ctx.vcfg, ctx.ablate_offsets)?;
    let kmat = rbf_from_sq_dists(&ctx.sq_dists, &p.kernel);
    let (_, u_factor) = offset_cov_factor(&ctx.si, &p.summary_kernel)?;
    let mut acc = 0.0;
    for bundle in bundles {
        acc += bundle_loglik_full(ctx, &p, &kmat, &u_factor, bundle)?;
    }
    Ok(acc / bundles.len() as f64 - kl / ctx.m_total as f64)
}

/// Observed log-likelihood of the context source for one bundle, computed
/// from scratch given the kernel matrix and offset covariance factor.
fn bundle_loglik_full(
    ctx: &SourceContext,
    p: &UnpackedParams,
    kmat: &SymMatrix,
    u_factor: &CholeskyFactor,
    bundle: &NoiseBundle,
) -> Result<f64> {
    let phi = wishart_from_lower(&p.scalars.mixing_scale_factor(), &bundle.tri_phi);
    let sigma = wishart_from_lower(&p.scalars.noise_scale_factor(), &bundle.tri_sigma);
    let g = if ctx.ablate_offsets {
        LatentG::zeros(ctx.m_total)
    } else {
        offset_draw(&ctx.si, &p.h0, &p.h1, u_factor, bundle)
    };
    let phi_l = cholesky(&phi, 0.0)?;
    let masked = phi_masked(kmat, &ctx.src.w, &phi);
    let cov = add_noise_diag(&masked, &ctx.src.w, &sigma);
    let factor = crate::model::obs_factor(&cov)?;
    let base0 = p.mu0.apply_rows(&ctx.src.x).add_scalar(g.g0[ctx.src_index]);
    let base1 = p.mu1.apply_rows(&ctx.src.x).add_scalar(g.g1[ctx.src_index]);
    let (mean_obs, _) = obs_mis_means_from_factor(&ctx.src.w, phi_l.lower(), &base0, &base1);
    Ok(mvn_logpdf_with_factor(&ctx.src.y_obs, &mean_obs, &factor))
}

/// Central finite-difference gradient of an arbitrary loss.
///
/// The step for coordinate i is `eps * max(1, |theta_i|)`. Non-finite loss
/// values abort with the offending coordinate.
pub fn grad_fd(
    mut loss: impl FnMut(&DVector<f64>) -> Result<f64>,
    theta: &DVector<f64>,
    eps: f64,
) -> Result<DVector<f64>> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::InvalidConfig {
            detail: format!("finite-difference step must be positive, got {eps}"),
        });
    }
    let mut work = theta.clone();
    let mut grad = DVector::zeros(theta.len());
    for i in 0..theta.len() {
        let h = eps * theta[i].abs().max(1.0);
        work[i] = theta[i] + h;
        let f_plus = loss(&work)?;
        work[i] = theta[i] - h;
        let f_minus = loss(&work)?;
        work[i] = theta[i];
        if !f_plus.is_finite() || !f_minus.is_finite() {
            return Err(Error::NonFiniteLoss { coordinate: i });
        }
        grad[i] = (f_plus - f_minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Default finite-difference step.
pub const DEFAULT_FD_EPS: f64 = 1e-5;

/// Cached state for one bundle at the base parameter vector.
struct BundleCache {
    phi: SymMatrix,
    sigma: SymMatrix,
    phi_l: DMatrix<f64>,
    g: LatentG,
    masked: SymMatrix,
    factor: CholeskyFactor,
    mean_obs: DVector<f64>,
}

/// Structured per-source ELBO gradient via central differences.
///
/// Performs the same arithmetic as [`grad_fd`] over [`elbo_source`] but
/// reuses every cached factorization a perturbed coordinate cannot affect.
/// Returns the gradient together with the ELBO at the base point.
pub fn source_grad(
    ctx: &SourceContext,
    theta: &GlobalParams,
    bundles: &[NoiseBundle],
    eps: f64,
) -> Result<(DVector<f64>, f64)> {
    if bundles.is_empty() {
        return Err(Error::InvalidConfig {
            detail: "at least one noise bundle is required".into(),
        });
    }
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::InvalidConfig {
            detail: format!("finite-difference step must be positive, got {eps}"),
        });
    }
    let layout = theta.layout;
    let p0 = theta.unpack();
    let nb = bundles.len() as f64;
    let m_total = ctx.m_total as f64;

    // Base evaluation with caches.
    let kl_phi0 = kl_wishart(
        &p0.scalars.mixing_scale(),
        ctx.vcfg.d_q,
        &ctx.priors.v0_matrix(),
        ctx.priors.d0,
    )?;
    let kl_sigma0 = kl_wishart(
        &p0.scalars.noise_scale(),
        ctx.vcfg.n_q,
        &ctx.priors.s0_matrix(),
        ctx.priors.n0,
    )?;
    let kl_g0 = if ctx.ablate_offsets {
        0.0
    } else {
        offset_kl(&p0, &ctx.si)?
    };
    let kmat0 = rbf_from_sq_dists(&ctx.sq_dists, &p0.kernel);
    let (_, u_factor0) = offset_cov_factor(&ctx.si, &p0.summary_kernel)?;
    let mut caches = Vec::with_capacity(bundles.len());
    let mut acc0 = 0.0;
    for bundle in bundles {
        let phi = wishart_from_lower(&p0.scalars.mixing_scale_factor(), &bundle.tri_phi);
        let sigma = wishart_from_lower(&p0.scalars.noise_scale_factor(), &bundle.tri_sigma);
        let g = if ctx.ablate_offsets {
            LatentG::zeros(ctx.m_total)
        } else {
            offset_draw(&ctx.si, &p0.h0, &p0.h1, &u_factor0, bundle)
        };
        let phi_l = cholesky(&phi, 0.0)?.lower().clone();
        let masked = phi_masked(&kmat0, &ctx.src.w, &phi);
        let cov = add_noise_diag(&masked, &ctx.src.w, &sigma);
        let factor = crate::model::obs_factor(&cov)?;
        let base0 = p0
            .mu0
            .apply_rows(&ctx.src.x)
            .add_scalar(g.g0[ctx.src_index]);
        let base1 = p0
            .mu1
            .apply_rows(&ctx.src.x)
            .add_scalar(g.g1[ctx.src_index]);
        let (mean_obs, _) = obs_mis_means_from_factor(&ctx.src.w, &phi_l, &base0, &base1);
        acc0 += mvn_logpdf_with_factor(&ctx.src.y_obs, &mean_obs, &factor);
        caches.push(BundleCache {
            phi,
            sigma,
            phi_l,
            g,
            masked,
            factor,
            mean_obs,
        });
    }
    let elbo0 = acc0 / nb - (kl_phi0 + kl_sigma0 + kl_g0) / m_total;

    let mut work = theta.values.clone();
    let mut grad = DVector::zeros(work.len());

    // Ablation freezes the offset machinery: those coordinates get exact
    // zero gradients without evaluation.
    let coord_frozen = |idx: usize| {
        ctx.ablate_offsets
            && matches!(
                layout.class_of(idx),
                CoordClass::OffsetPrior | CoordClass::MeanPath
            )
            && !layout.mu0().contains(&idx)
            && !layout.mu1().contains(&idx)
    };

    for i in 0..work.len() {
        if coord_frozen(i) {
            grad[i] = 0.0;
            continue;
        }
        let base_value = theta.values[i];
        let h = eps * base_value.abs().max(1.0);
        let class = layout.class_of(i);
        let eval = |value: f64, work: &mut DVector<f64>| -> Result<f64> {
            work[i] = value;
            let out = match class {
                CoordClass::OffsetPrior => {
                    let p = unpack_values(work, &layout);
                    let kl_g = offset_kl(&p, &ctx.si)?;
                    acc0 / nb - (kl_phi0 + kl_sigma0 + kl_g) / m_total
                }
                CoordClass::MeanPath => {
                    let p = unpack_values(work, &layout);
                    let (_, u_factor) = offset_cov_factor(&ctx.si, &p.summary_kernel)?;
                    let mut acc = 0.0;
                    for (bundle, cache) in bundles.iter().zip(&caches) {
                        let g = if ctx.ablate_offsets {
                            LatentG::zeros(ctx.m_total)
                        } else {
                            offset_draw(&ctx.si, &p.h0, &p.h1, &u_factor, bundle)
                        };
                        let base0 = p.mu0.apply_rows(&ctx.src.x).add_scalar(g.g0[ctx.src_index]);
                        let base1 = p.mu1.apply_rows(&ctx.src.x).add_scalar(g.g1[ctx.src_index]);
                        let (mean_obs, _) =
                            obs_mis_means_from_factor(&ctx.src.w, &cache.phi_l, &base0, &base1);
                        acc += mvn_logpdf_with_factor(&ctx.src.y_obs, &mean_obs, &cache.factor);
                    }
                    let kl_g = if ctx.ablate_offsets {
                        0.0
                    } else {
                        offset_kl(&p, &ctx.si)?
                    };
                    acc / nb - (kl_phi0 + kl_sigma0 + kl_g) / m_total
                }
                CoordClass::MixingScale => {
                    let p = unpack_values(work, &layout);
                    let kl_phi = kl_wishart(
                        &p.scalars.mixing_scale(),
                        ctx.vcfg.d_q,
                        &ctx.priors.v0_matrix(),
                        ctx.priors.d0,
                    )?;
                    let mut acc = 0.0;
                    for (bundle, cache) in bundles.iter().zip(&caches) {
                        let phi =
                            wishart_from_lower(&p.scalars.mixing_scale_factor(), &bundle.tri_phi);
                        let phi_l = cholesky(&phi, 0.0)?.lower().clone();
                        let masked = phi_masked(&kmat0, &ctx.src.w, &phi);
                        let cov = add_noise_diag(&masked, &ctx.src.w, &cache.sigma);
                        let factor = crate::model::obs_factor(&cov)?;
                        let base0 = p
                            .mu0
                            .apply_rows(&ctx.src.x)
                            .add_scalar(cache.g.g0[ctx.src_index]);
                        let base1 = p
                            .mu1
                            .apply_rows(&ctx.src.x)
                            .add_scalar(cache.g.g1[ctx.src_index]);
                        let (mean_obs, _) =
                            obs_mis_means_from_factor(&ctx.src.w, &phi_l, &base0, &base1);
                        acc += mvn_logpdf_with_factor(&ctx.src.y_obs, &mean_obs, &factor);
                    }
                    acc / nb - (kl_phi + kl_sigma0 + kl_g0) / m_total
                }
                CoordClass::NoiseScale => {
                    let p = unpack_values(work, &layout);
                    let kl_sigma = kl_wishart(
                        &p.scalars.noise_scale(),
                        ctx.vcfg.n_q,
                        &ctx.priors.s0_matrix(),
                        ctx.priors.n0,
                    )?;
                    let mut acc = 0.0;
                    for (bundle, cache) in bundles.iter().zip(&caches) {
                        let sigma =
                            wishart_from_lower(&p.scalars.noise_scale_factor(), &bundle.tri_sigma);
                        let cov = add_noise_diag(&cache.masked, &ctx.src.w, &sigma);
                        let factor = crate::model::obs_factor(&cov)?;
                        acc += mvn_logpdf_with_factor(&ctx.src.y_obs, &cache.mean_obs, &factor);
                    }
                    acc / nb - (kl_phi0 + kl_sigma + kl_g0) / m_total
                }
                CoordClass::UnitKernel => {
                    let p = unpack_values(work, &layout);
                    let kmat = rbf_from_sq_dists(&ctx.sq_dists, &p.kernel);
                    let mut acc = 0.0;
                    for cache in &caches {
                        let masked = phi_masked(&kmat, &ctx.src.w, &cache.phi);
                        let cov = add_noise_diag(&masked, &ctx.src.w, &cache.sigma);
                        let factor = crate::model::obs_factor(&cov)?;
                        acc += mvn_logpdf_with_factor(&ctx.src.y_obs, &cache.mean_obs, &factor);
                    }
                    acc / nb - (kl_phi0 + kl_sigma0 + kl_g0) / m_total
                }
            };
            Ok(out)
        };
        let f_plus = eval(base_value + h, &mut work)?;
        let f_minus = eval(base_value - h, &mut work)?;
        work[i] = base_value;
        if !f_plus.is_finite() || !f_minus.is_finite() {
            return Err(Error::NonFiniteLoss { coordinate: i });
        }
        grad[i] = (f_plus - f_minus) / (2.0 * h);
    }
    let _ = &caches;
    Ok((grad, elbo0))
}

/// Convenience wrapper: bundles drawn for a round seed, then the structured
/// gradient.
pub fn source_round_grad(
    ctx: &SourceContext,
    theta: &GlobalParams,
    noise_seed: u64,
    mc_samples: usize,
    eps: f64,
) -> Result<(DVector<f64>, f64)> {
    let bundles = NoiseBundle::round_bundles(noise_seed, mc_samples, ctx.m_total, &ctx.vcfg)?;
    source_grad(ctx, theta, &bundles, eps)
}
