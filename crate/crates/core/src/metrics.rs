//! Distribution-level comparison of generated and reference embeddings:
//! Fréchet distance, quantized MAUVE and KL divergence between
//! pairwise-cosine histograms.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::cluster::cluster_records;
use crate::embed::{embed_strings, Embedder, EmbedderFingerprint};
use crate::math::{cosine, psd_sqrt, symmetric_eigen, Matrix};
use crate::rng;
use crate::{Error, Result};

fn mean_cov(x: &Matrix) -> (Vec<f64>, Matrix) {
    let (n, d) = (x.rows(), x.cols());
    let mut mu = vec![0.0; d];
    for r in x.iter_rows() {
        crate::math::axpy(1.0, r, &mut mu);
    }
    mu.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = Matrix::zeros(d, d);
    let mut centered = vec![0.0; d];
    for r in x.iter_rows() {
        for ((c, v), m) in centered.iter_mut().zip(r).zip(&mu) {
            *c = v - m;
        }
        cov.add_outer(1.0, &centered, &centered);
    }
    let inv = 1.0 / (n - 1) as f64;
    cov.as_mut_slice().iter_mut().for_each(|v| *v *= inv);
    (mu, cov)
}

fn check_pair(x: &Matrix, y: &Matrix, min_rows: usize) -> Result<()> {
    if x.rows() < min_rows || y.rows() < min_rows {
        return Err(Error::validation(format!(
            "need at least {min_rows} rows per set, got {} and {}",
            x.rows(),
            y.rows()
        )));
    }
    if x.cols() != y.cols() {
        return Err(Error::validation(format!("dimension mismatch: {} vs {}", x.cols(), y.cols())));
    }
    Ok(())
}

/// Fréchet distance between Gaussians fitted to the rows of `x` and `y`
/// (unbiased covariances).
pub fn fid(x: &Matrix, y: &Matrix) -> Result<f64> {
    check_pair(x, y, 2)?;
    let (mx, sx) = mean_cov(x);
    let (my, sy) = mean_cov(y);
    let dm: f64 = mx.iter().zip(&my).map(|(a, b)| (a - b) * (a - b)).sum();
    let rx = psd_sqrt(&sx);
    let mut inner = rx.matmul(&sy).matmul(&rx);
    // symmetrize against rounding before the eigen solve
    let d = inner.rows();
    for i in 0..d {
        for j in i + 1..d {
            let v = 0.5 * (inner[(i, j)] + inner[(j, i)]);
            inner[(i, j)] = v;
            inner[(j, i)] = v;
        }
    }
    let (eig, _) = symmetric_eigen(&inner);
    let tr_sqrt: f64 = eig.iter().map(|l| libm::sqrt(l.max(0.0))).sum();
    Ok((dm + sx.trace() + sy.trace() - 2.0 * tr_sqrt).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MauveConfig {
    pub n_clusters: usize,
    pub scaling: f64,
    pub grid_size: usize,
    pub seed: u64,
    pub max_iters: usize,
}

impl Default for MauveConfig {
    fn default() -> Self {
        MauveConfig {
            n_clusters: 500,
            scaling: 1.0,
            grid_size: 100,
            seed: 0,
            max_iters: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MauveDetail {
    pub score: f64,
    pub n_clusters: usize,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    /// Frontier points `(x, y)` sorted by `x`, endpoints included.
    pub frontier: Vec<(f64, f64)>,
}

fn kl(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, q)| p * libm::log(p / q))
        .sum::<f64>()
        .max(0.0)
}

/// Area under the divergence frontier of two histograms.
pub fn frontier_area(p: &[f64], q: &[f64], scaling: f64, grid_size: usize) -> (f64, Vec<(f64, f64)>) {
    let mut pts = vec![(0.0, 1.0), (1.0, 0.0)];
    let mut r = vec![0.0; p.len()];
    for i in 1..=grid_size {
        let lam = i as f64 / (grid_size + 1) as f64;
        for ((ri, pi), qi) in r.iter_mut().zip(p).zip(q) {
            *ri = lam * pi + (1.0 - lam) * qi;
        }
        pts.push((libm::exp(-scaling * kl(q, &r)), libm::exp(-scaling * kl(p, &r))));
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    // upper envelope from the right makes the curve non-increasing
    for i in (0..pts.len() - 1).rev() {
        pts[i].1 = pts[i].1.max(pts[i + 1].1);
    }
    let area: f64 = pts.windows(2).map(|w| (w[1].0 - w[0].0) * 0.5 * (w[0].1 + w[1].1)).sum();
    (area.clamp(0.0, 1.0), pts)
}

pub fn mauve_detail(x: &Matrix, y: &Matrix, cfg: &MauveConfig) -> Result<MauveDetail> {
    check_pair(x, y, 1)?;
    let smallest = x.rows().min(y.rows());
    let mut k = cfg.n_clusters;
    if smallest < k / 10 {
        k = (smallest / 2).max(1);
        log::info!("reducing MAUVE clusters from {} to {k}", cfg.n_clusters);
    }
    if k < 2 {
        return Err(Error::validation("MAUVE clustering degenerates to a single cluster"));
    }
    // Cluster the union in a canonical row order so that swapping the
    // arguments yields the same partition.
    let mut rows: Vec<(&[f64], bool)> = x.iter_rows().map(|r| (r, true)).chain(y.iter_rows().map(|r| (r, false))).collect();
    rows.sort_by(|a, b| {
        a.0.iter()
            .zip(b.0)
            .map(|(u, v)| u.total_cmp(v))
            .find(|o| o.is_ne())
            .unwrap_or(core::cmp::Ordering::Equal)
    });
    let union = Matrix::from_rows(&rows.iter().map(|r| r.0).collect::<Vec<_>>(), x.cols()).expect("equal widths");
    let k = k.min(union.rows());
    let a = cluster_records(&union, k, cfg.seed, cfg.max_iters)?;
    let mut p = vec![0.0; k];
    let mut q = vec![0.0; k];
    for (i, &(_, from_x)) in rows.iter().enumerate() {
        if from_x {
            p[a.assignments[i]] += 1.0 / x.rows() as f64;
        } else {
            q[a.assignments[i]] += 1.0 / y.rows() as f64;
        }
    }
    let (score, frontier) = frontier_area(&p, &q, cfg.scaling, cfg.grid_size);
    Ok(MauveDetail {
        score,
        n_clusters: k,
        p,
        q,
        frontier,
    })
}

pub fn mauve(x: &Matrix, y: &Matrix, cfg: &MauveConfig) -> Result<f64> {
    Ok(mauve_detail(x, y, cfg)?.score)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KlCosineConfig {
    pub bins: usize,
    pub smoothing: f64,
    /// Above this many rows, pairs are subsampled.
    pub max_rows_exhaustive: usize,
    pub sampled_pairs: usize,
    pub seed: u64,
}

impl Default for KlCosineConfig {
    fn default() -> Self {
        KlCosineConfig {
            bins: 100,
            smoothing: 1e-8,
            max_rows_exhaustive: 20_000,
            sampled_pairs: 20_000_000,
            seed: 0,
        }
    }
}

/// Normalized histogram over `[-1, 1]` of cosines between distinct rows.
pub fn cosine_histogram(x: &Matrix, cfg: &KlCosineConfig) -> Vec<f64> {
    let mut h = vec![0.0; cfg.bins];
    let mut add = |i: usize, j: usize| {
        let c = cosine(x.row(i), x.row(j)).clamp(-1.0, 1.0);
        let b = (((c + 1.0) * 0.5 * cfg.bins as f64) as usize).min(cfg.bins - 1);
        h[b] += 1.0;
    };
    let n = x.rows();
    if n > cfg.max_rows_exhaustive {
        log::info!("sampling {} of {} cosine pairs", cfg.sampled_pairs, n * (n - 1) / 2);
        let mut r = rng::rng_from(cfg.seed);
        for _ in 0..cfg.sampled_pairs {
            let i = r.random_range(0..n);
            let mut j = r.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            add(i, j);
        }
    } else {
        for i in 0..n {
            for j in i + 1..n {
                add(i, j);
            }
        }
    }
    let total: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= total);
    h
}

/// `KL(P || Q)` for smoothed histograms `P` of `x` and `Q` of `y`.
pub fn kl_between_histograms(p: &[f64], q: &[f64], eps: f64) -> f64 {
    let smooth = |h: &[f64]| {
        let z = 1.0 + eps * h.len() as f64;
        h.iter().map(|v| (v + eps) / z).collect::<Vec<_>>()
    };
    let (p, q) = (smooth(p), smooth(q));
    p.iter()
        .zip(&q)
        .map(|(a, b)| a * libm::log(a / b))
        .sum::<f64>()
        .max(0.0)
}

pub fn kl_cosine(x: &Matrix, y: &Matrix, cfg: &KlCosineConfig) -> Result<f64> {
    check_pair(x, y, 2)?;
    if cfg.bins == 0 || !(cfg.smoothing > 0.0) {
        return Err(Error::validation("kl-cosine needs positive bins and smoothing"));
    }
    let p = cosine_histogram(x, cfg);
    let q = cosine_histogram(y, cfg);
    Ok(kl_between_histograms(&p, &q, cfg.smoothing))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    pub mauve: MauveConfig,
    pub kl_cosine: KlCosineConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fid: f64,
    pub mauve: f64,
    pub kl_cosine: f64,
    pub n_generated: usize,
    pub n_golden: usize,
    pub embedder: EmbedderFingerprint,
    pub config: MetricConfig,
    pub mauve_clusters_used: usize,
}

pub fn evaluate<E: Embedder + ?Sized>(
    generated: &[String],
    golden: &[String],
    embedder: &E,
    config: &MetricConfig,
) -> Result<(EvalReport, MauveDetail)> {
    let x = embed_strings(embedder, generated)?;
    let y = embed_strings(embedder, golden)?;
    evaluate_embeddings(&x, &y, embedder.fingerprint(), config)
}

pub fn evaluate_embeddings(
    x: &Matrix,
    y: &Matrix,
    embedder: EmbedderFingerprint,
    config: &MetricConfig,
) -> Result<(EvalReport, MauveDetail)> {
    let detail = mauve_detail(x, y, &config.mauve)?;
    let report = EvalReport {
        fid: fid(x, y)?,
        mauve: detail.score,
        kl_cosine: kl_cosine(x, y, &config.kl_cosine)?,
        n_generated: x.rows(),
        n_golden: y.rows(),
        embedder,
        config: *config,
        mauve_clusters_used: detail.n_clusters,
    };
    Ok((report, detail))
}

/// Comma-separated dump of the histograms and the frontier.
pub fn detail_csv(d: &MauveDetail) -> String {
    let mut s = String::from("section,index,a,b\n");
    for (i, (p, q)) in d.p.iter().zip(&d.q).enumerate() {
        s.push_str(&format!("histogram,{i},{p},{q}\n"));
    }
    for (i, (x, y)) in d.frontier.iter().enumerate() {
        s.push_str(&format!("frontier,{i},{x},{y}\n"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disjoint_histograms_at_unit_scaling_give_one_half() {
        // KL(Q||R) = -log(1-lam), KL(P||R) = -log(lam): the frontier is the
        // line x + y = 1 in the limit of a fine grid.
        let (a, _) = frontier_area(&[1.0, 0.0], &[0.0, 1.0], 1.0, 10_000);
        assert!((a - 0.5).abs() < 1e-3, "{a}");
    }

    #[test]
    fn identical_histograms_give_one() {
        let (a, _) = frontier_area(&[0.2, 0.3, 0.5], &[0.2, 0.3, 0.5], 1.0, 100);
        assert!((a - 1.0).abs() < 1e-12);
    }

    #[test]
    fn concentrated_vs_uniform_histogram() {
        let mut p = vec![0.0; 100];
        p[37] = 1.0;
        let q = vec![0.01; 100];
        let eps = 1e-8;
        let v = kl_between_histograms(&p, &q, eps);
        assert!((v - libm::log(100.0 / (1.0 + 100.0 * eps))).abs() < 1e-4, "{v}");
        assert!((v - 4.605).abs() < 1e-3);
    }
}
