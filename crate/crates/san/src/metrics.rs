//! Generative quality metrics: Fréchet distance between Gaussian feature
//! fits (FID) and a channel-normalized perceptual distance (LPIPS) with a
//! masked variant that blanks the background before comparing.
//!
//! Both metrics run on features from the same frozen random extractor family
//! as the perceptual loss, seeded independently of it. Values are therefore
//! comparable across runs of this codebase but not to numbers produced with
//! pretrained backbones.

use ndarray::{Array1, Array2, Array4, Axis};

use crate::error::{Error, Result};
use crate::losses::FeatureExtractor;
use crate::nn::{Mode, Scalar};

/// Eigenvalues of a nominally-PSD matrix in `[-NEG_EIG_TOL, 0)` are treated
/// as roundoff and clipped to zero; anything below fails the matrix square
/// root with a numeric error.
pub const NEG_EIG_TOL: f64 = 1e-8;

/// Guard added to channel norms before dividing in [`lpips`].
pub const LPIPS_EPS: f64 = 1e-10;

/// Gaussian fit of a feature set: sample mean and unbiased covariance.
#[derive(Debug, Clone)]
pub struct FeatureStats {
    mean: Array1<f64>,
    cov: Array2<f64>,
    count: usize,
}

impl FeatureStats {
    /// Builds stats from precomputed moments. The covariance must be square,
    /// symmetric, and sized to the mean; positive semi-definiteness is not
    /// checked here — a structurally negative eigenvalue surfaces in [`fid`].
    pub fn from_moments(mean: Array1<f64>, cov: Array2<f64>, count: usize) -> Result<Self> {
        let d = mean.len();
        if cov.dim() != (d, d) {
            return Err(Error::ShapeMismatch {
                context: "feature statistics".into(),
                expected: format!("{d}x{d} covariance"),
                found: format!("{}x{}", cov.nrows(), cov.ncols()),
            });
        }
        for i in 0..d {
            for j in (i + 1)..d {
                if (cov[[i, j]] - cov[[j, i]]).abs() > 1e-9 {
                    return Err(Error::Numeric(format!(
                        "covariance not symmetric at ({i},{j}): {} vs {}",
                        cov[[i, j]],
                        cov[[j, i]]
                    )));
                }
            }
        }
        Ok(Self { mean, cov, count })
    }

    pub fn mean(&self) -> &Array1<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &Array2<f64> {
        &self.cov
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Feature dimension.
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Fits mean and unbiased covariance to a `(samples, dim)` feature matrix.
pub fn fit_stats(features: &Array2<f64>) -> Result<FeatureStats> {
    let (n, d) = features.dim();
    if n < 2 {
        return Err(Error::Data(format!(
            "feature statistics need at least 2 samples, got {n}"
        )));
    }
    let mean = features.mean_axis(Axis(0)).expect("n >= 2");
    let centered = features - &mean;
    let cov = centered.t().dot(&centered) / (n - 1) as f64;
    debug_assert_eq!(cov.dim(), (d, d));
    Ok(FeatureStats { mean, cov, count: n })
}

/// Symmetrizes, eigendecomposes, and clips tiny negative eigenvalues.
/// Returns eigenvalues and eigenvectors (columns).
fn clipped_eigs(
    m: &nalgebra::DMatrix<f64>,
    what: &str,
) -> Result<(nalgebra::DVector<f64>, nalgebra::DMatrix<f64>)> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut vals = eig.eigenvalues;
    for v in vals.iter_mut() {
        if *v < 0.0 {
            if *v < -NEG_EIG_TOL {
                return Err(Error::Numeric(format!(
                    "{what}: eigenvalue {v} below -{NEG_EIG_TOL:e}; matrix is not positive semi-definite"
                )));
            }
            *v = 0.0;
        }
    }
    Ok((vals, eig.eigenvectors))
}

fn to_nalgebra(a: &Array2<f64>) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

/// Fréchet distance between two Gaussian fits:
/// `‖μ_a − μ_b‖² + tr(Σ_a + Σ_b − 2(Σ_a Σ_b)^{1/2})`.
///
/// The cross term is computed through the symmetric product
/// `tr((B Σ_a B)^{1/2})` with `B = Σ_b^{1/2}`, which equals
/// `tr((Σ_a Σ_b)^{1/2})` but keeps every eigendecomposition symmetric.
pub fn fid(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            context: "fid".into(),
            expected: format!("{}-dim features", a.dim()),
            found: format!("{}-dim features", b.dim()),
        });
    }
    let sig_a = to_nalgebra(&a.cov);
    let sig_b = to_nalgebra(&b.cov);

    let (vals_b, vecs_b) = clipped_eigs(&sig_b, "fid: sqrt of second covariance")?;
    let sqrt_b = &vecs_b
        * nalgebra::DMatrix::from_diagonal(&vals_b.map(f64::sqrt))
        * vecs_b.transpose();
    let inner = &sqrt_b * sig_a * &sqrt_b;
    let (vals_c, _) = clipped_eigs(&inner, "fid: sqrt of covariance product")?;
    let trace_sqrt: f64 = vals_c.iter().map(|v| v.sqrt()).sum();

    let dmu = &a.mean - &b.mean;
    let trace_a: f64 = (0..a.dim()).map(|i| a.cov[[i, i]]).sum();
    let trace_b: f64 = (0..b.dim()).map(|i| b.cov[[i, i]]).sum();
    Ok(dmu.dot(&dmu) + trace_a + trace_b - 2.0 * trace_sqrt)
}

/// Global-average-pooled final-layer features for FID, one row per image.
pub fn fid_features<S: Scalar>(
    extractor: &mut FeatureExtractor<S>,
    images: &Array4<S>,
) -> Array2<f64> {
    let layers = extractor.forward(images, Mode::Eval);
    let last = layers.last().expect("extractor has layers");
    let (n, c, h, w) = last.dim();
    let mut out = Array2::zeros((n, c));
    let norm = (h * w) as f64;
    for ni in 0..n {
        for ci in 0..c {
            let mut s = 0.0;
            for y in 0..h {
                for x in 0..w {
                    s += last[[ni, ci, y, x]].to_f64();
                }
            }
            out[[ni, ci]] = s / norm;
        }
    }
    out
}

fn check_same_images<S: Scalar>(context: &str, a: &Array4<S>, b: &Array4<S>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            context: context.into(),
            expected: format!("{:?}", a.dim()),
            found: format!("{:?}", b.dim()),
        });
    }
    Ok(())
}

/// Perceptual distance per batch item: features of both images are
/// unit-normalized along channels at every position, squared differences are
/// summed over channels, averaged over positions, and summed over extractor
/// layers (unit layer weights).
pub fn lpips<S: Scalar>(
    extractor: &mut FeatureExtractor<S>,
    a: &Array4<S>,
    b: &Array4<S>,
) -> Result<Vec<f64>> {
    check_same_images("lpips", a, b)?;
    let layers_a = extractor.forward(a, Mode::Eval);
    let layers_b = extractor.forward(b, Mode::Eval);
    let n = a.dim().0;
    let mut out = vec![0.0; n];
    for (fa, fb) in layers_a.iter().zip(&layers_b) {
        let (ln, c, h, w) = fa.dim();
        debug_assert_eq!(ln, n);
        for (ni, total) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for y in 0..h {
                for x in 0..w {
                    let mut sa = 0.0;
                    let mut sb = 0.0;
                    for ci in 0..c {
                        let va = fa[[ni, ci, y, x]].to_f64();
                        let vb = fb[[ni, ci, y, x]].to_f64();
                        sa += va * va;
                        sb += vb * vb;
                    }
                    let ia = 1.0 / (sa.sqrt() + LPIPS_EPS);
                    let ib = 1.0 / (sb.sqrt() + LPIPS_EPS);
                    for ci in 0..c {
                        let d = fa[[ni, ci, y, x]].to_f64() * ia
                            - fb[[ni, ci, y, x]].to_f64() * ib;
                        acc += d * d;
                    }
                }
            }
            *total += acc / (h * w) as f64;
        }
    }
    Ok(out)
}

/// [`lpips`] after filling the background (mask 0) of both images with 0,
/// the midpoint of the `[-1, 1]` intensity range. Mask shape is `(n, 1, h, w)`.
pub fn mask_lpips<S: Scalar>(
    extractor: &mut FeatureExtractor<S>,
    a: &Array4<S>,
    b: &Array4<S>,
    mask: &Array4<S>,
) -> Result<Vec<f64>> {
    check_same_images("mask-lpips", a, b)?;
    let (n, _, h, w) = a.dim();
    if mask.dim() != (n, 1, h, w) {
        return Err(Error::ShapeMismatch {
            context: "mask-lpips mask".into(),
            expected: format!("{:?}", (n, 1, h, w)),
            found: format!("{:?}", mask.dim()),
        });
    }
    // Fill value 0 makes masking a plain elementwise product.
    let fa = a * mask;
    let fb = b * mask;
    lpips(extractor, &fa, &fb)
}
