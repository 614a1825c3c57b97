//! Multi-label benchmark metrics and the effective-rank diagnostic.
//!
//! The headline numbers are a class-importance-weighted F2 over the defect
//! classes and a plain F1 over the implicit "normal" class (no defect
//! present). Both are reported as percentages. RankMe summarises the
//! effective rank of an embedding matrix from its singular-value entropy.

pub mod eigen;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::tensor::Element;

/// Per-class confusion counts at a fixed threshold.
///
/// Counts are unsigned by construction; `TP + FP + FN + TN` equals the sample
/// count for every class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
    pub tn: Vec<u64>,
    pub samples: u64,
}

impl ConfusionCounts {
    pub fn classes(&self) -> usize {
        self.tp.len()
    }

    /// Threshold `scores` (row-major `n x c`, values finite) against binary
    /// `labels`; a class is predicted present iff its score is >= threshold.
    pub fn from_scores(
        scores: &[f64],
        labels: &[u8],
        n: usize,
        c: usize,
        threshold: f64,
    ) -> Result<ConfusionCounts> {
        if scores.len() != n * c || labels.len() != n * c {
            return Err(CoreError::shape(
                "confusion counts",
                format!("{n} x {c} grid vs {} scores, {} labels", scores.len(), labels.len()),
            ));
        }
        if c == 0 {
            return Err(CoreError::invalid("confusion counts", "zero classes"));
        }
        if !threshold.is_finite() {
            return Err(CoreError::invalid("confusion counts", "non-finite threshold"));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(CoreError::invalid("confusion counts", "non-finite score"));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(CoreError::invalid("confusion counts", "labels must be 0 or 1"));
        }
        let mut counts = ConfusionCounts {
            tp: vec![0; c],
            fp: vec![0; c],
            fn_: vec![0; c],
            tn: vec![0; c],
            samples: n as u64,
        };
        for i in 0..n {
            for j in 0..c {
                let pred = scores[i * c + j] >= threshold;
                let truth = labels[i * c + j] == 1;
                match (pred, truth) {
                    (true, true) => counts.tp[j] += 1,
                    (true, false) => counts.fp[j] += 1,
                    (false, true) => counts.fn_[j] += 1,
                    (false, false) => counts.tn[j] += 1,
                }
            }
        }
        Ok(counts)
    }
}

/// F-beta from confusion counts, in `[0, 1]`.
///
/// `(1+β²)·P·R / (β²·P + R)`; degenerate cases (no predicted positives, no
/// actual positives, or P = R = 0) return 0 rather than NaN.
pub fn f_beta(tp: u64, fp: u64, fn_: u64, beta: f64) -> f64 {
    if tp + fp == 0 || tp + fn_ == 0 {
        return 0.0;
    }
    let p = tp as f64 / (tp + fp) as f64;
    let r = tp as f64 / (tp + fn_) as f64;
    let b2 = beta * beta;
    let denom = b2 * p + r;
    if denom == 0.0 {
        return 0.0;
    }
    (1.0 + b2) * p * r / denom
}

/// Class-importance-weighted F2 over the defect classes, as a percentage:
/// `100 · Σ_c w_c·F2_c / Σ_c w_c`.
pub fn f2_ciw(counts: &ConfusionCounts, ciw: &[f64]) -> Result<f64> {
    if ciw.len() != counts.classes() {
        return Err(CoreError::shape(
            "f2_ciw",
            format!("{} weights for {} classes", ciw.len(), counts.classes()),
        ));
    }
    if ciw.iter().any(|&w| !(w.is_finite() && w > 0.0)) {
        return Err(CoreError::invalid("f2_ciw", "class weights must be positive and finite"));
    }
    let total: f64 = ciw.iter().sum();
    let weighted: f64 = (0..counts.classes())
        .map(|c| ciw[c] * f_beta(counts.tp[c], counts.fp[c], counts.fn_[c], 2.0))
        .sum();
    Ok(100.0 * weighted / total)
}

/// F1 of the implicit normal class, as a percentage. A sample is predicted
/// normal iff every class score is below the threshold; it is truly normal
/// iff all its labels are 0.
pub fn f1_normal(
    scores: &[f64],
    labels: &[u8],
    n: usize,
    c: usize,
    threshold: f64,
) -> Result<f64> {
    if scores.len() != n * c || labels.len() != n * c {
        return Err(CoreError::shape(
            "f1_normal",
            format!("{n} x {c} grid vs {} scores, {} labels", scores.len(), labels.len()),
        ));
    }
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for i in 0..n {
        let row_scores = &scores[i * c..(i + 1) * c];
        let row_labels = &labels[i * c..(i + 1) * c];
        let pred_normal = row_scores.iter().all(|&s| s < threshold);
        let true_normal = row_labels.iter().all(|&l| l == 0);
        match (pred_normal, true_normal) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(100.0 * f_beta(tp, fp, fn_, 1.0))
}

/// Effective rank of an `n x d` embedding matrix:
/// `exp(−Σ_k p_k·log p_k)` with `p_k = σ_k/‖σ‖₁ + ε` over the
/// `min(n, d)` singular values.
///
/// Singular values come from the eigenvalues of the Gram matrix on the
/// smaller side, solved by the Jacobi method in [`eigen`].
pub fn rankme(embeddings: &[f64], n: usize, d: usize, eps: f64) -> Result<f64> {
    if n < 2 {
        return Err(CoreError::invalid("rankme", format!("need at least 2 rows, got {n}")));
    }
    if embeddings.len() != n * d || d == 0 {
        return Err(CoreError::shape(
            "rankme",
            format!("{} values for ({n}, {d})", embeddings.len()),
        ));
    }
    if embeddings.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::invalid("rankme", "non-finite embedding values"));
    }
    if embeddings.iter().all(|&v| v == 0.0) {
        return Err(CoreError::invalid("rankme", "all-zero embedding matrix"));
    }

    // Gram matrix on the smaller side: X^T·X (d x d) or X·X^T (n x n); both
    // carry the same nonzero spectrum.
    let m = n.min(d);
    let mut gram = vec![0.0f64; m * m];
    if d <= n {
        f64::gemm(d, n, d, embeddings, 1, d as isize, embeddings, d as isize, 1, 0.0, &mut gram);
    } else {
        f64::gemm(n, d, n, embeddings, d as isize, 1, embeddings, 1, d as isize, 0.0, &mut gram);
    }

    let eigenvalues = eigen::symmetric_eigenvalues(&gram, m);
    let sigma: Vec<f64> = eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).collect();
    Ok(rankme_from_singular_values(&sigma, eps))
}

/// The entropy step of RankMe, shared with test oracles that obtain singular
/// values elsewhere.
pub fn rankme_from_singular_values(sigma: &[f64], eps: f64) -> f64 {
    let total: f64 = sigma.iter().sum();
    let entropy: f64 = sigma
        .iter()
        .map(|&s| {
            let p = s / total + eps;
            -p * p.ln()
        })
        .sum();
    entropy.exp()
}

/// Default smoothing constant in the RankMe entropy.
pub const RANKME_EPS: f64 = 1e-7;

/// Everything the run log and the evaluation report carry for one pass over
/// a labelled set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub samples: usize,
    pub threshold: f64,
    pub class_codes: Vec<String>,
    pub per_class_f2: Vec<f64>,
    pub f2_ciw: f64,
    pub f1_normal: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rankme: Option<f64>,
}

/// Assemble a [`MetricReport`] from raw scores and labels.
pub fn evaluate_scores(
    scores: &[f64],
    labels: &[u8],
    n: usize,
    c: usize,
    class_codes: &[String],
    ciw: &[f64],
    threshold: f64,
) -> Result<MetricReport> {
    if class_codes.len() != c {
        return Err(CoreError::shape(
            "evaluate_scores",
            format!("{} class codes for {c} classes", class_codes.len()),
        ));
    }
    let counts = ConfusionCounts::from_scores(scores, labels, n, c, threshold)?;
    let per_class_f2: Vec<f64> =
        (0..c).map(|j| f_beta(counts.tp[j], counts.fp[j], counts.fn_[j], 2.0)).collect();
    Ok(MetricReport {
        samples: n,
        threshold,
        class_codes: class_codes.to_vec(),
        per_class_f2,
        f2_ciw: f2_ciw(&counts, ciw)?,
        f1_normal: f1_normal(scores, labels, n, c, threshold)?,
        rankme: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use rand::Rng;

    #[test]
    fn f_beta_equal_precision_recall_is_identity() {
        // P = R = 0.5 regardless of beta.
        for beta in [0.5, 1.0, 2.0, 3.0] {
            let f = f_beta(2, 2, 2, beta);
            assert!((f - 0.5).abs() < 1e-12, "beta {beta}: {f}");
        }
    }

    #[test]
    fn f_beta_hand_case() {
        // P = 0.5, R = 1, beta = 2: 5·0.5/(4·0.5 + 1) = 0.8333...
        let f = f_beta(1, 1, 0, 2.0);
        assert!((f - 5.0 / 6.0).abs() < 1e-12);
        assert!((f - 0.8333).abs() < 5e-5);
    }

    #[test]
    fn f_beta_degenerate_cases_are_zero() {
        assert_eq!(f_beta(0, 0, 0, 2.0), 0.0);
        assert_eq!(f_beta(0, 5, 0, 2.0), 0.0);
        assert_eq!(f_beta(0, 0, 5, 2.0), 0.0);
        assert_eq!(f_beta(0, 5, 5, 2.0), 0.0);
    }

    fn counts_2class() -> ConfusionCounts {
        // Class 0: perfect (F2 = 1). Class 1: P = R = 0.5 (F2 = 0.5).
        ConfusionCounts {
            tp: vec![2, 1],
            fp: vec![0, 1],
            fn_: vec![0, 1],
            tn: vec![1, 0],
            samples: 3,
        }
    }

    #[test]
    fn f2_ciw_hand_case() {
        let v = f2_ciw(&counts_2class(), &[1.0, 3.0]).unwrap();
        assert!((v - 62.5).abs() < 1e-12);
    }

    #[test]
    fn f2_ciw_perfect_is_100_and_single_class_is_f2() {
        let perfect = ConfusionCounts {
            tp: vec![3, 3],
            fp: vec![0, 0],
            fn_: vec![0, 0],
            tn: vec![0, 0],
            samples: 3,
        };
        assert!((f2_ciw(&perfect, &[2.0, 5.0]).unwrap() - 100.0).abs() < 1e-12);

        let single = ConfusionCounts {
            tp: vec![1],
            fp: vec![1],
            fn_: vec![0],
            tn: vec![0],
            samples: 2,
        };
        let f2 = f_beta(1, 1, 0, 2.0);
        assert!((f2_ciw(&single, &[7.3]).unwrap() - 100.0 * f2).abs() < 1e-12);
    }

    #[test]
    fn f2_ciw_scale_invariant() {
        let counts = counts_2class();
        let a = f2_ciw(&counts, &[1.0, 3.0]).unwrap();
        let b = f2_ciw(&counts, &[10.0, 30.0]).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn f1_normal_hand_cases() {
        // All normal, all predicted normal.
        let v = f1_normal(&[0.1, 0.2, 0.3, 0.0], &[0, 0, 0, 0], 2, 2, 0.5).unwrap();
        assert_eq!(v, 100.0);

        // No normal samples, none predicted normal: degenerate 0.
        let v = f1_normal(&[0.9, 0.9], &[1, 1], 2, 1, 0.5).unwrap();
        assert_eq!(v, 0.0);

        // 2 true normals; predicted normal = one true normal (TP) and one
        // defective sample (FP); the other true normal missed (FN).
        let scores = [0.2, 0.9, 0.1];
        let labels = [0, 0, 1];
        let v = f1_normal(&scores, &labels, 3, 1, 0.5).unwrap();
        assert!((v - 50.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_match_brute_force_oracle_on_random_instances() {
        let mut rng = derive_rng(5, "metrics-oracle", &[0]);
        for case in 0..100u64 {
            let n = rng.random_range(1..40usize);
            let c = rng.random_range(1..6usize);
            let threshold = 0.5;
            let scores: Vec<f64> = (0..n * c).map(|_| rng.random_range(0.0..1.0)).collect();
            let labels: Vec<u8> = (0..n * c).map(|_| rng.random_range(0..2u8)).collect();
            let ciw: Vec<f64> = (0..c).map(|_| rng.random_range(0.1..5.0)).collect();

            // Oracle: direct per-sample loops, no shared code path with the
            // implementation's counting.
            let mut oracle_f2_sum = 0.0;
            for j in 0..c {
                let (mut tp, mut fp, mut fn_) = (0.0f64, 0.0f64, 0.0f64);
                for i in 0..n {
                    let p = scores[i * c + j] >= threshold;
                    let t = labels[i * c + j] == 1;
                    if p && t {
                        tp += 1.0;
                    }
                    if p && !t {
                        fp += 1.0;
                    }
                    if !p && t {
                        fn_ += 1.0;
                    }
                }
                let f2 = if tp == 0.0 {
                    0.0
                } else {
                    let p = tp / (tp + fp);
                    let r = tp / (tp + fn_);
                    5.0 * p * r / (4.0 * p + r)
                };
                oracle_f2_sum += ciw[j] * f2;
            }
            let oracle_f2_ciw = 100.0 * oracle_f2_sum / ciw.iter().sum::<f64>();

            let counts = ConfusionCounts::from_scores(&scores, &labels, n, c, threshold).unwrap();
            let got = f2_ciw(&counts, &ciw).unwrap();
            assert!((got - oracle_f2_ciw).abs() < 1e-9, "case {case}: {got} vs {oracle_f2_ciw}");

            let (mut tp, mut fp, mut fn_) = (0.0f64, 0.0f64, 0.0f64);
            for i in 0..n {
                let pred = (0..c).all(|j| scores[i * c + j] < threshold);
                let truth = (0..c).all(|j| labels[i * c + j] == 0);
                if pred && truth {
                    tp += 1.0;
                }
                if pred && !truth {
                    fp += 1.0;
                }
                if !pred && truth {
                    fn_ += 1.0;
                }
            }
            let oracle_f1 = if tp == 0.0 {
                0.0
            } else {
                let p = tp / (tp + fp);
                let r = tp / (tp + fn_);
                100.0 * 2.0 * p * r / (p + r)
            };
            let got = f1_normal(&scores, &labels, n, c, threshold).unwrap();
            assert!((got - oracle_f1).abs() < 1e-9, "case {case}: {got} vs {oracle_f1}");
        }
    }

    #[test]
    fn rankme_uniform_spectrum() {
        // 6 orthogonal rows of equal norm in 6 dims: effective rank 6.
        let k = 6;
        let mut x = vec![0.0f64; k * k];
        for i in 0..k {
            x[i * k + i] = 3.7;
        }
        let r = rankme(&x, k, k, RANKME_EPS).unwrap();
        assert!((r - k as f64).abs() < 1e-3, "got {r}");
    }

    #[test]
    fn rankme_rank_one() {
        let row = [1.0, -2.0, 0.5, 3.0];
        let mut x = Vec::new();
        for scale in [1.0, 2.0, -1.0, 0.25, 4.0] {
            x.extend(row.iter().map(|v| v * scale));
        }
        let r = rankme(&x, 5, 4, RANKME_EPS).unwrap();
        assert!((r - 1.0).abs() < 1e-3, "got {r}");
    }

    #[test]
    fn rankme_rejects_degenerate_input() {
        assert!(rankme(&[0.0, 0.0, 0.0, 0.0], 2, 2, RANKME_EPS).is_err());
        assert!(rankme(&[1.0, 2.0], 1, 2, RANKME_EPS).is_err());
    }

    #[test]
    fn rankme_invariant_to_rotation_and_scaling() {
        let mut rng = derive_rng(6, "rankme-invariance", &[0]);
        let (n, d) = (12, 5);
        let x: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let base = rankme(&x, n, d, RANKME_EPS).unwrap();

        // Uniform positive scaling.
        let scaled: Vec<f64> = x.iter().map(|v| v * 17.0).collect();
        assert!((rankme(&scaled, n, d, RANKME_EPS).unwrap() - base).abs() < 1e-6);

        // Orthogonal rotation of the embedding dimensions.
        let raw: Vec<f64> = (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let q = nalgebra::DMatrix::from_row_slice(d, d, &raw).qr().q();
        let xm = nalgebra::DMatrix::from_row_slice(n, d, &x);
        let rotated = xm * q;
        let rot_flat: Vec<f64> = rotated.transpose().iter().copied().collect();
        // nalgebra stores column-major; transpose-iterate restores row-major.
        let r = rankme(&rot_flat, n, d, RANKME_EPS).unwrap();
        assert!((r - base).abs() < 1e-6, "{r} vs {base}");
    }

    #[test]
    fn rankme_matches_svd_oracle() {
        let mut rng = derive_rng(7, "rankme-svd", &[0]);
        for case in 0..10 {
            let n = rng.random_range(3..20usize);
            let d = rng.random_range(2..10usize);
            let x: Vec<f64> = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mine = rankme(&x, n, d, RANKME_EPS).unwrap();

            let m = nalgebra::DMatrix::from_row_slice(n, d, &x);
            let mut sv: Vec<f64> = m.svd(false, false).singular_values.iter().copied().collect();
            sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let oracle = rankme_from_singular_values(&sv, RANKME_EPS);
            assert!((mine - oracle).abs() < 1e-8, "case {case}: {mine} vs {oracle}");
        }
    }

    #[test]
    fn rankme_bounded_by_min_dimension() {
        let mut rng = derive_rng(8, "rankme-bound", &[0]);
        let (n, d) = (9, 4);
        let x: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = rankme(&x, n, d, RANKME_EPS).unwrap();
        assert!(r >= 1.0 - 1e-6);
        assert!(r <= d as f64 + 1e-3);
    }
}
