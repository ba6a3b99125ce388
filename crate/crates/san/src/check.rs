//! Independent reference computations used by the test suites.
//!
//! Everything in here is deliberately written as plain scalar loops or
//! central finite differences, sharing no code with the layer, loss, or
//! metric implementations it validates. Keep it that way: these are the
//! oracles the tests freeze, and reusing production code here would make the
//! checks circular.

use ndarray::{Array2, Array4};

/// Relative error between an analytic and a numeric derivative, guarded for
/// near-zero magnitudes.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Central finite difference of `f` along flat coordinate `i`.
pub fn fd_grad_flat(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize, eps: f64) -> f64 {
    let mut xp = x.to_vec();
    xp[i] += eps;
    let fp = f(&xp);
    let mut xm = x.to_vec();
    xm[i] -= eps;
    let fm = f(&xm);
    (fp - fm) / (2.0 * eps)
}

/// Up to `k` deterministic, roughly evenly spaced indices into `0..len`.
pub fn sample_indices(len: usize, k: usize) -> Vec<usize> {
    if len == 0 {
        return Vec::new();
    }
    let k = k.min(len).max(1);
    let mut out: Vec<usize> = (0..k).map(|j| j * len / k).collect();
    out.dedup();
    out
}

// ---------------------------------------------------------------------------
// Loss oracles
// ---------------------------------------------------------------------------

/// Mean absolute difference.
pub fn l1_mean_oracle(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]).abs();
    }
    s / a.len() as f64
}

/// Mean squared difference over one feature layer; the perceptual loss is the
/// sum of this across layers.
pub fn perceptual_layer_oracle(fa: &[f64], fb: &[f64]) -> f64 {
    assert_eq!(fa.len(), fb.len());
    let mut s = 0.0;
    for i in 0..fa.len() {
        let d = fa[i] - fb[i];
        s += d * d;
    }
    s / fa.len() as f64
}

/// Mean binary cross-entropy of probabilities `p` against a constant target,
/// with the same log clamp the implementation uses.
pub fn bce_mean_oracle(p: &[f64], target: f64, clamp: f64) -> f64 {
    let mut s = 0.0;
    for &pi in p {
        let pc = pi.max(clamp).min(1.0 - clamp);
        s += -(target * pc.ln() + (1.0 - target) * (1.0 - pc).ln());
    }
    s / p.len() as f64
}

/// Discriminator objective: push real-pair probabilities toward
/// `real_label` and generated-pair probabilities toward `fake_label`.
pub fn adv_d_oracle(
    p_real: &[f64],
    p_fake: &[f64],
    real_label: f64,
    fake_label: f64,
    clamp: f64,
) -> f64 {
    bce_mean_oracle(p_real, real_label, clamp) + bce_mean_oracle(p_fake, fake_label, clamp)
}

/// Non-saturating generator objective: `-mean(log D(fake))`.
pub fn adv_g_oracle(p_fake: &[f64], clamp: f64) -> f64 {
    bce_mean_oracle(p_fake, 1.0, clamp)
}

// ---------------------------------------------------------------------------
// Distribution statistics / FID oracles
// ---------------------------------------------------------------------------

/// Column means by plain accumulation.
pub fn mean_oracle(x: &Array2<f64>) -> Vec<f64> {
    let (n, d) = x.dim();
    let mut mu = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            mu[j] += x[[i, j]];
        }
    }
    for v in &mut mu {
        *v /= n as f64;
    }
    mu
}

/// Unbiased sample covariance by plain accumulation.
pub fn cov_oracle(x: &Array2<f64>) -> Array2<f64> {
    let (n, d) = x.dim();
    assert!(n >= 2, "covariance needs at least two samples");
    let mu = mean_oracle(x);
    let mut c = Array2::zeros((d, d));
    for i in 0..n {
        for a in 0..d {
            let da = x[[i, a]] - mu[a];
            for b in 0..d {
                c[[a, b]] += da * (x[[i, b]] - mu[b]);
            }
        }
    }
    c / (n as f64 - 1.0)
}

/// Fréchet distance between Gaussians with *diagonal* covariances, where the
/// matrix square root reduces to elementwise square roots:
/// `sum (mu_a - mu_b)^2 + sum (va + vb - 2 sqrt(va vb))`.
pub fn fid_diag_oracle(mu_a: &[f64], var_a: &[f64], mu_b: &[f64], var_b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..mu_a.len() {
        let dm = mu_a[i] - mu_b[i];
        s += dm * dm + var_a[i] + var_b[i] - 2.0 * (var_a[i] * var_b[i]).sqrt();
    }
    s
}

// ---------------------------------------------------------------------------
// Perceptual-distance (LPIPS-style) oracle
// ---------------------------------------------------------------------------

/// Per-sample feature distance across layers: at every spatial position the
/// channel vectors are unit-normalized, their squared difference is summed
/// over channels, averaged over positions, then summed over layers.
pub fn lpips_oracle(layers_a: &[Array4<f64>], layers_b: &[Array4<f64>], eps: f64) -> Vec<f64> {
    assert_eq!(layers_a.len(), layers_b.len());
    let n = layers_a[0].dim().0;
    let mut out = vec![0.0; n];
    for (fa, fb) in layers_a.iter().zip(layers_b) {
        let (ln, c, h, w) = fa.dim();
        assert_eq!(fa.dim(), fb.dim());
        assert_eq!(ln, n);
        for ni in 0..n {
            let mut acc = 0.0;
            for y in 0..h {
                for x in 0..w {
                    let mut na = vec![0.0; c];
                    let mut nb = vec![0.0; c];
                    let mut sa = 0.0;
                    let mut sb = 0.0;
                    for ci in 0..c {
                        na[ci] = fa[[ni, ci, y, x]];
                        nb[ci] = fb[[ni, ci, y, x]];
                        sa += na[ci] * na[ci];
                        sb += nb[ci] * nb[ci];
                    }
                    let (ia, ib) = (1.0 / (sa.sqrt() + eps), 1.0 / (sb.sqrt() + eps));
                    for ci in 0..c {
                        let d = na[ci] * ia - nb[ci] * ib;
                        acc += d * d;
                    }
                }
            }
            out[ni] += acc / (h * w) as f64;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Retrieval oracles
// ---------------------------------------------------------------------------

/// Brute-force CMC and mAP from a query-by-gallery distance matrix.
///
/// Each gallery row is ranked by `(distance, gallery index)` — the index
/// tie-break keeps results stable. Returns (`cmc[r]` for each requested rank,
/// mean average precision).
pub fn cmc_map_oracle(
    dist: &Array2<f64>,
    query_ids: &[usize],
    gallery_ids: &[usize],
    ranks: &[usize],
) -> (Vec<f64>, f64) {
    let (nq, ng) = dist.dim();
    assert_eq!(nq, query_ids.len());
    assert_eq!(ng, gallery_ids.len());
    let mut cmc_hits = vec![0usize; ranks.len()];
    let mut sum_ap = 0.0;
    for q in 0..nq {
        let mut order: Vec<usize> = (0..ng).collect();
        order.sort_by(|&a, &b| {
            dist[[q, a]]
                .partial_cmp(&dist[[q, b]])
                .unwrap()
                .then(a.cmp(&b))
        });
        let first_hit = order
            .iter()
            .position(|&g| gallery_ids[g] == query_ids[q])
            .expect("every query identity must appear in the gallery");
        for (ri, &r) in ranks.iter().enumerate() {
            if first_hit < r {
                cmc_hits[ri] += 1;
            }
        }
        let mut hits = 0usize;
        let mut ap = 0.0;
        for (pos, &g) in order.iter().enumerate() {
            if gallery_ids[g] == query_ids[q] {
                hits += 1;
                ap += hits as f64 / (pos + 1) as f64;
            }
        }
        sum_ap += ap / hits as f64;
    }
    (
        cmc_hits.iter().map(|&h| h as f64 / nq as f64).collect(),
        sum_ap / nq as f64,
    )
}

/// One-dimensional KISSME statistic from raw difference samples, using
/// uncentered second moments: `1/E[d^2 | same] - 1/E[d^2 | diff]`.
pub fn kissme_1d_oracle(same_diffs: &[f64], diff_diffs: &[f64]) -> f64 {
    let m2 = |v: &[f64]| v.iter().map(|d| d * d).sum::<f64>() / v.len() as f64;
    1.0 / m2(same_diffs) - 1.0 / m2(diff_diffs)
}
