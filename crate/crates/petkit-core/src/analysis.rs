//! Weight-similarity (CKA) and domain-distance (MMD) analysis.
//!
//! Convolution filters are reshaped into matrices — `c1 × c2` for 1×1
//! layers (a linear map between channels), `k² × c1·c2` for larger kernels —
//! and compared with linear centered kernel alignment:
//! `CKA(K, L) = HSIC(K,L) / sqrt(HSIC(K,K)·HSIC(L,L))` over Gram matrices
//! `K = XXᵀ`. The biased empirical HSIC `tr(KHLH)/(n−1)²` is used; its
//! normalization cancels in the ratio. Domain distance uses the squared
//! kernel mean discrepancy with a Gaussian kernel, biased (V-statistic)
//! estimator by default and the median pairwise distance over the pooled
//! sample as the default bandwidth.
//!
//! All arithmetic here is 64-bit.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::backbone::Model;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// A reshaped convolution weight, rows x cols in row-major order, with the
/// provenance needed to invert the reshape.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    pub layer: String,
    pub kernel: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl FilterMatrix {
    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// Reshapes a `[c2, c1, k, k]` convolution weight.
///
/// * `k == 1` → `c1 × c2` matrix, `M[i][o] = w[o][i][0][0]`.
/// * `k > 1`  → `k² × (c1·c2)` matrix; row index flattens `(kh, kw)` as
///   `kh*k + kw`, column index flattens `(c1, c2)` as `i*c2 + o`.
pub fn reshape_filter_weights(layer: &str, weight: &Tensor) -> Result<FilterMatrix> {
    let s = weight.shape();
    if s.len() != 4 {
        return Err(Error::Shape {
            op: "reshape_filter_weights",
            detail: alloc::format!("expected rank-4 weight, got {s:?}"),
        });
    }
    if s[2] != s[3] {
        return Err(Error::Shape {
            op: "reshape_filter_weights",
            detail: alloc::format!("non-square kernel {}x{} unsupported", s[2], s[3]),
        });
    }
    let (c2, c1, k) = (s[0], s[1], s[2]);
    let d = weight.data();
    let idx = |o: usize, i: usize, kh: usize, kw: usize| ((o * c1 + i) * k + kh) * k + kw;
    let (rows, cols, data) = if k == 1 {
        let mut m = Vec::with_capacity(c1 * c2);
        for i in 0..c1 {
            for o in 0..c2 {
                m.push(d[idx(o, i, 0, 0)] as f64);
            }
        }
        (c1, c2, m)
    } else {
        let mut m = Vec::with_capacity(k * k * c1 * c2);
        for kh in 0..k {
            for kw in 0..k {
                for i in 0..c1 {
                    for o in 0..c2 {
                        m.push(d[idx(o, i, kh, kw)] as f64);
                    }
                }
            }
        }
        (k * k, c1 * c2, m)
    };
    Ok(FilterMatrix {
        rows,
        cols,
        data,
        layer: layer.into(),
        kernel: k,
        c_in: c1,
        c_out: c2,
    })
}

/// Inverse of [`reshape_filter_weights`]; the reshape is a permutation, so
/// this reproduces the weight tensor exactly.
pub fn filter_matrix_to_weight(m: &FilterMatrix) -> Result<Tensor> {
    let (c1, c2, k) = (m.c_in, m.c_out, m.kernel);
    let mut out = vec![0.0f32; c1 * c2 * k * k];
    let idx = |o: usize, i: usize, kh: usize, kw: usize| ((o * c1 + i) * k + kh) * k + kw;
    if k == 1 {
        for i in 0..c1 {
            for o in 0..c2 {
                out[idx(o, i, 0, 0)] = m.at(i, o) as f32;
            }
        }
    } else {
        for kh in 0..k {
            for kw in 0..k {
                for i in 0..c1 {
                    for o in 0..c2 {
                        out[idx(o, i, kh, kw)] = m.at(kh * k + kw, i * c2 + o) as f32;
                    }
                }
            }
        }
    }
    Tensor::new(vec![c2, c1, k, k], out)
}

/// Gram matrix `X Xᵀ` of the rows of `m`.
pub fn gram(m: &FilterMatrix) -> Vec<f64> {
    let n = m.rows;
    let mut g = vec![0.0f64; n * n];
    for i in 0..n {
        for j in i..n {
            let mut acc = 0.0;
            for c in 0..m.cols {
                acc += m.at(i, c) * m.at(j, c);
            }
            g[i * n + j] = acc;
            g[j * n + i] = acc;
        }
    }
    g
}

/// Biased empirical HSIC: `tr(K H L H) / (n-1)²` with the centering matrix
/// `H = I - (1/n)·11ᵀ`, computed as `sum(centered(K) ∘ L) / (n-1)²`.
pub fn hsic(k: &[f64], l: &[f64], n: usize) -> Result<f64> {
    if n < 2 {
        return Err(Error::Degenerate(alloc::format!(
            "HSIC undefined for n = {n} < 2"
        )));
    }
    if k.len() != n * n || l.len() != n * n {
        return Err(Error::Shape {
            op: "hsic",
            detail: alloc::format!(
                "expected two {n}x{n} Gram matrices, got lengths {} and {}",
                k.len(),
                l.len()
            ),
        });
    }
    // Double centering of K: Kc = K - rowmean - colmean + totalmean.
    let mut row_mean = vec![0.0f64; n];
    for i in 0..n {
        for j in 0..n {
            row_mean[i] += k[i * n + j];
        }
        row_mean[i] /= n as f64;
    }
    let total_mean = row_mean.iter().sum::<f64>() / n as f64;
    let mut acc = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            // K is symmetric: column mean of j equals row mean of j.
            let kc = k[i * n + j] - row_mean[i] - row_mean[j] + total_mean;
            acc += kc * l[i * n + j];
        }
    }
    Ok(acc / ((n - 1) * (n - 1)) as f64)
}

/// Linear CKA between two filter matrices with a shared row count.
///
/// Errors with [`Error::Degenerate`] when either centered Gram matrix
/// vanishes (all-constant rows); such layers are reported as missing.
pub fn cka(x: &FilterMatrix, y: &FilterMatrix) -> Result<f64> {
    if x.rows != y.rows {
        return Err(Error::Shape {
            op: "cka",
            detail: alloc::format!("row counts differ: {} vs {}", x.rows, y.rows),
        });
    }
    let n = x.rows;
    let k = gram(x);
    let l = gram(y);
    let h_kl = hsic(&k, &l, n)?;
    let h_kk = hsic(&k, &k, n)?;
    let h_ll = hsic(&l, &l, n)?;
    if h_kk <= 0.0 || h_ll <= 0.0 {
        return Err(Error::Degenerate(alloc::format!(
            "CKA undefined for layer {} (centered Gram vanishes)",
            x.layer
        )));
    }
    // With identical HSIC values the ratio is exactly h/sqrt(h*h) = 1.
    if h_kl == h_kk && h_kl == h_ll {
        return Ok(1.0);
    }
    Ok(h_kl / libm::sqrt(h_kk * h_ll))
}

/// Per-layer CKA entry of a similarity report; `None` marks a layer where
/// CKA is undefined.
#[derive(Debug, Clone)]
pub struct LayerSimilarity {
    pub layer: String,
    pub cka: Option<f64>,
}

/// CKA over every convolution weight shared by two parameter sets.
#[derive(Debug, Clone)]
pub struct CkaReport {
    pub layers: Vec<LayerSimilarity>,
    /// Unweighted mean over the defined layers.
    pub mean_cka: f64,
}

/// Compares all rank-4 weights of two checkpoints by name.
pub fn average_cka(a: &ParamSet, b: &ParamSet) -> Result<CkaReport> {
    let mut layers = Vec::new();
    let mut sum = 0.0f64;
    let mut defined = 0usize;
    for pa in a.iter() {
        if pa.tensor.rank() != 4 {
            continue;
        }
        let pb = b.get(&pa.name).ok_or_else(|| {
            Error::Incompatible(alloc::format!("checkpoint B lacks layer {}", pa.name))
        })?;
        if pb.tensor.shape() != pa.tensor.shape() {
            return Err(Error::Incompatible(alloc::format!(
                "layer {} has shape {:?} vs {:?}",
                pa.name,
                pa.tensor.shape(),
                pb.tensor.shape()
            )));
        }
        let ma = reshape_filter_weights(&pa.name, &pa.tensor)?;
        let mb = reshape_filter_weights(&pb.name, &pb.tensor)?;
        let value = match cka(&ma, &mb) {
            Ok(v) => {
                sum += v;
                defined += 1;
                Some(v)
            }
            Err(Error::Degenerate(_)) => None,
            Err(e) => return Err(e),
        };
        layers.push(LayerSimilarity {
            layer: pa.name.clone(),
            cka: value,
        });
    }
    if defined == 0 {
        return Err(Error::Degenerate(
            "no layer with defined CKA between these checkpoints".into(),
        ));
    }
    Ok(CkaReport {
        layers,
        mean_cka: sum / defined as f64,
    })
}

// ── MMD ──────────────────────────────────────────────────────────────

/// Row-major feature matrix, one sample per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub n: usize,
    pub d: usize,
    pub data: Vec<f64>,
}

impl Features {
    pub fn new(n: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if n * d != data.len() {
            return Err(Error::Shape {
                op: "features",
                detail: alloc::format!("{n} x {d} features need {} values, got {}", n * d, data.len()),
            });
        }
        Ok(Features { n, d, data })
    }

    #[inline]
    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }
}

/// Gaussian-kernel bandwidth selection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    /// Median pairwise Euclidean distance over the pooled sample.
    Median,
    Fixed(f64),
}

/// Estimator variant. The biased V-statistic is non-negative and zero on
/// identical samples; the unbiased U-statistic can go negative.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MmdEstimator {
    Biased,
    Unbiased,
}

#[derive(Debug, Clone, Copy)]
pub struct MmdOutcome {
    pub value: f64,
    /// Bandwidth σ actually used.
    pub bandwidth: f64,
    pub estimator: MmdEstimator,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

/// Median pairwise Euclidean distance over the pooled rows of `p` and `q`
/// (upper median). Errors when it is zero (all points identical).
pub fn median_bandwidth(p: &Features, q: &Features) -> Result<f64> {
    let rows: Vec<&[f64]> = (0..p.n).map(|i| p.row(i)).chain((0..q.n).map(|i| q.row(i))).collect();
    let m = rows.len();
    let mut dists = Vec::with_capacity(m * (m - 1) / 2);
    for i in 0..m {
        for j in i + 1..m {
            dists.push(libm::sqrt(sq_dist(rows[i], rows[j])));
        }
    }
    if dists.is_empty() {
        return Err(Error::Degenerate("median bandwidth needs >= 2 pooled points".into()));
    }
    dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let median = dists[dists.len() / 2];
    if median == 0.0 {
        return Err(Error::Degenerate(
            "median bandwidth undefined: pooled samples are identical".into(),
        ));
    }
    Ok(median)
}

/// Squared maximum mean discrepancy with kernel `exp(-|x-y|²/2σ²)`.
pub fn gaussian_mmd(
    p: &Features,
    q: &Features,
    bandwidth: Bandwidth,
    estimator: MmdEstimator,
) -> Result<MmdOutcome> {
    if p.d != q.d {
        return Err(Error::Shape {
            op: "gaussian_mmd",
            detail: alloc::format!("feature dims differ: {} vs {}", p.d, q.d),
        });
    }
    if p.n < 2 || q.n < 2 {
        return Err(Error::Data(alloc::format!(
            "MMD needs at least 2 samples per side, got {} and {}",
            p.n,
            q.n
        )));
    }
    let sigma = match bandwidth {
        Bandwidth::Median => median_bandwidth(p, q)?,
        Bandwidth::Fixed(s) => {
            if !(s > 0.0) {
                return Err(Error::Config(alloc::format!("bandwidth must be > 0, got {s}")));
            }
            s
        }
    };
    let gamma = 1.0 / (2.0 * sigma * sigma);
    let kernel = |a: &[f64], b: &[f64]| libm::exp(-sq_dist(a, b) * gamma);

    let (mut s_pp, mut s_qq, mut s_pq) = (0.0f64, 0.0f64, 0.0f64);
    let (mut s_pp_off, mut s_qq_off) = (0.0f64, 0.0f64);
    for i in 0..p.n {
        for j in 0..p.n {
            let k = kernel(p.row(i), p.row(j));
            s_pp += k;
            if i != j {
                s_pp_off += k;
            }
        }
    }
    for i in 0..q.n {
        for j in 0..q.n {
            let k = kernel(q.row(i), q.row(j));
            s_qq += k;
            if i != j {
                s_qq_off += k;
            }
        }
    }
    for i in 0..p.n {
        for j in 0..q.n {
            s_pq += kernel(p.row(i), q.row(j));
        }
    }
    let (np, nq) = (p.n as f64, q.n as f64);
    let value = match estimator {
        MmdEstimator::Biased => s_pp / (np * np) + s_qq / (nq * nq) - 2.0 * s_pq / (np * nq),
        MmdEstimator::Unbiased => {
            s_pp_off / (np * (np - 1.0)) + s_qq_off / (nq * (nq - 1.0)) - 2.0 * s_pq / (np * nq)
        }
    };
    Ok(MmdOutcome {
        value,
        bandwidth: sigma,
        estimator,
    })
}

/// Penultimate (post-pool) features of a model over a dataset; the feature
/// matrix fed to MMD.
pub fn extract_features<M: Model>(model: &M, data: &Dataset, batch_size: usize) -> Result<Features> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let n = data.len();
    let d = model.config().feature_dim();
    let mut out = Vec::with_capacity(n * d);
    let indices: Vec<usize> = (0..n).collect();
    for chunk in indices.chunks(batch_size) {
        let (images, _) = data.batch(chunk)?;
        let mut tape = Tape::<f32>::inference();
        let fwd = model.forward(&mut tape, &images)?;
        out.extend(tape.value(fwd.pooled).data().iter().map(|&v| v as f64));
    }
    Features::new(n, d, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::seeded_rng;
    use rand::Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> FilterMatrix {
        let mut rng = seeded_rng(seed, 70);
        FilterMatrix {
            rows,
            cols,
            data: (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            layer: "test".into(),
            kernel: 3,
            c_in: rows,
            c_out: cols,
        }
    }

    #[test]
    fn reshape_rules_match_spec_shapes() {
        let w = Tensor::zeros(vec![4, 8, 1, 1]);
        let m = reshape_filter_weights("l", &w).unwrap();
        assert_eq!((m.rows, m.cols), (8, 4));
        let w = Tensor::zeros(vec![2, 2, 3, 3]);
        let m = reshape_filter_weights("l", &w).unwrap();
        assert_eq!((m.rows, m.cols), (9, 4));
    }

    #[test]
    fn reshape_round_trips_exactly() {
        let mut rng = seeded_rng(4, 2);
        for shape in [vec![4, 8, 1, 1], vec![3, 2, 3, 3], vec![2, 5, 5, 5]] {
            let numel = shape.iter().product();
            let data: Vec<f32> = (0..numel).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            let w = Tensor::new(shape, data).unwrap();
            let m = reshape_filter_weights("l", &w).unwrap();
            assert_eq!(filter_matrix_to_weight(&m).unwrap(), w);
        }
    }

    #[test]
    fn hsic_constant_features_vanish() {
        // L = 11ᵀ: centering annihilates constants.
        let x = random_matrix(5, 3, 1);
        let k = gram(&x);
        let l = vec![1.0f64; 25];
        assert!(hsic(&k, &l, 5).unwrap().abs() < 1e-12);
    }

    #[test]
    fn hsic_invariant_to_constant_gram_shift() {
        let x = random_matrix(5, 3, 2);
        let y = random_matrix(5, 4, 3);
        let k = gram(&x);
        let l = gram(&y);
        let base = hsic(&k, &l, 5).unwrap();
        let shifted: Vec<f64> = k.iter().map(|v| v + 7.25).collect();
        assert!((hsic(&shifted, &l, 5).unwrap() - base).abs() < 1e-9);
    }

    #[test]
    fn hsic_centered_1d_identity() {
        // For centered one-dimensional x: HSIC(K,K) = (sum x̃²)² / (n-1)².
        let x = FilterMatrix {
            rows: 3,
            cols: 1,
            data: vec![1.0, -0.5, 2.5],
            layer: "t".into(),
            kernel: 1,
            c_in: 3,
            c_out: 1,
        };
        let mean = (1.0 - 0.5 + 2.5) / 3.0;
        let centered_sq: f64 = [1.0, -0.5, 2.5]
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum();
        let expected = centered_sq * centered_sq / 4.0;
        let k = gram(&x);
        assert!((hsic(&k, &k, 3).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn cka_self_is_exactly_one() {
        let x = random_matrix(6, 4, 5);
        assert_eq!(cka(&x, &x).unwrap(), 1.0);
    }

    #[test]
    fn cka_scale_invariant() {
        let x = random_matrix(6, 4, 6);
        let scaled = FilterMatrix {
            data: x.data.iter().map(|v| v * -3.7).collect(),
            ..x.clone()
        };
        assert!((cka(&x, &scaled).unwrap() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn cka_degenerate_matrix_reports_undefined() {
        let x = FilterMatrix {
            rows: 4,
            cols: 2,
            data: vec![1.0; 8],
            layer: "t".into(),
            kernel: 1,
            c_in: 4,
            c_out: 2,
        };
        let y = random_matrix(4, 3, 7);
        assert!(matches!(cka(&x, &y), Err(Error::Degenerate(_))));
    }

    #[test]
    fn mmd_identical_samples_is_zero() {
        let mut rng = seeded_rng(8, 0);
        let data: Vec<f64> = (0..40).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let p = Features::new(10, 4, data.clone()).unwrap();
        let q = Features::new(10, 4, data).unwrap();
        let out = gaussian_mmd(&p, &q, Bandwidth::Median, MmdEstimator::Biased).unwrap();
        assert!(out.value.abs() < 1e-9);
    }

    #[test]
    fn mmd_separated_clusters_approach_two() {
        // Tight clusters far apart relative to a fixed bandwidth: within-
        // kernels ~ 1, cross-kernels ~ 0, so the biased MMD approaches 2.
        let mut rng = seeded_rng(9, 0);
        let p_data: Vec<f64> = (0..60).map(|_| rng.gen_range(-0.05..0.05)).collect();
        let q_data: Vec<f64> = (0..60).map(|_| 50.0 + rng.gen_range(-0.05..0.05)).collect();
        let p = Features::new(20, 3, p_data).unwrap();
        let q = Features::new(20, 3, q_data).unwrap();
        let out = gaussian_mmd(&p, &q, Bandwidth::Fixed(1.0), MmdEstimator::Biased).unwrap();
        assert!((out.value - 2.0).abs() < 1e-2, "got {}", out.value);
    }

    #[test]
    fn mmd_identical_points_median_is_error() {
        let p = Features::new(3, 2, vec![1.0; 6]).unwrap();
        let q = Features::new(3, 2, vec![1.0; 6]).unwrap();
        assert!(matches!(
            gaussian_mmd(&p, &q, Bandwidth::Median, MmdEstimator::Biased),
            Err(Error::Degenerate(_))
        ));
    }
}
