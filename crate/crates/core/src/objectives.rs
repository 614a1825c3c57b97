//! Training losses: class-importance-weighted BCE, the self-distillation
//! loss with centering, and their hybrid combination.

use std::io::Read;
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::tensor::{Element, Tensor};

/// Class codes with their importance weights, one per defect class.
#[derive(Debug, Clone, PartialEq)]
pub struct CiwTable {
    codes: Vec<String>,
    weights: Vec<f64>,
}

impl CiwTable {
    pub fn new(codes: Vec<String>, weights: Vec<f64>) -> Result<Self> {
        if codes.is_empty() || codes.len() != weights.len() {
            return Err(CoreError::invalid(
                "CiwTable",
                format!("{} codes vs {} weights", codes.len(), weights.len()),
            ));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(CoreError::invalid("CiwTable", "weights must be positive and finite"));
        }
        let mut seen = std::collections::HashSet::new();
        for code in &codes {
            if code.is_empty() {
                return Err(CoreError::invalid("CiwTable", "empty class code"));
            }
            if !seen.insert(code.as_str()) {
                return Err(CoreError::invalid("CiwTable", format!("duplicate class code {code}")));
            }
        }
        Ok(CiwTable { codes, weights })
    }

    /// Parse the `code,ciw` CSV schema.
    pub fn from_csv_reader(reader: impl Read, origin: &Path) -> Result<Self> {
        let mut csv = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        {
            let headers = csv
                .headers()
                .map_err(|e| CoreError::malformed(origin, format!("bad header: {e}")))?;
            let cols: Vec<&str> = headers.iter().collect();
            if cols != ["code", "ciw"] {
                return Err(CoreError::malformed(
                    origin,
                    format!("expected header `code,ciw`, got `{}`", cols.join(",")),
                ));
            }
        }
        let mut codes = Vec::new();
        let mut weights = Vec::new();
        for (i, record) in csv.records().enumerate() {
            let record =
                record.map_err(|e| CoreError::malformed(origin, format!("row {}: {e}", i + 2)))?;
            if record.len() != 2 {
                return Err(CoreError::malformed(
                    origin,
                    format!("row {}: expected 2 fields, got {}", i + 2, record.len()),
                ));
            }
            codes.push(record[0].trim().to_string());
            let w: f64 = record[1].trim().parse().map_err(|_| {
                CoreError::malformed(origin, format!("row {}: bad weight `{}`", i + 2, &record[1]))
            })?;
            weights.push(w);
        }
        CiwTable::new(codes, weights)
            .map_err(|e| CoreError::malformed(origin, e.to_string()))
    }

    pub fn from_csv_path(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| CoreError::io(path, e))?;
        Self::from_csv_reader(file, path)
    }

    pub fn codes(&self) -> &[String] {
        &self.codes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }
}

/// Per-class positive weights for the BCE loss:
/// `w_c = 2 · (1 + CIW_c / mean(CIW))`.
pub fn pos_weights(ciw: &CiwTable) -> Vec<f64> {
    let mean = ciw.weights.iter().sum::<f64>() / ciw.weights.len() as f64;
    ciw.weights.iter().map(|w| 2.0 * (1.0 + w / mean)).collect()
}

/// BCE on logits with per-class positive weights, mean-reduced over all
/// `B·C` entries. Thin wrapper over the fused stable tensor op.
pub fn weighted_bce<E: Element>(
    logits: &Tensor<E>,
    targets: &Tensor<E>,
    pos_weight: &[E],
) -> Result<Tensor<E>> {
    let w = Tensor::constant(pos_weight.to_vec(), 1, pos_weight.len())?;
    logits.weighted_bce_mean(targets, &w)
}

/// Running state of the self-distillation loss: the prototype-logit center
/// plus the two sharpening temperatures and the center momentum.
#[derive(Debug, Clone)]
pub struct DinoState<E: Element> {
    pub center: Vec<E>,
    pub student_temp: E,
    pub teacher_temp: E,
    pub center_momentum: E,
}

impl<E: Element> DinoState<E> {
    pub fn new(
        prototypes: usize,
        student_temp: E,
        teacher_temp: E,
        center_momentum: E,
    ) -> Result<Self> {
        if prototypes == 0 {
            return Err(CoreError::invalid("DinoState", "zero prototypes"));
        }
        if student_temp <= E::zero() || teacher_temp <= E::zero() {
            return Err(CoreError::invalid("DinoState", "temperatures must be positive"));
        }
        if center_momentum < E::zero() || center_momentum > E::one() {
            return Err(CoreError::invalid("DinoState", "center momentum outside [0,1]"));
        }
        Ok(DinoState {
            center: vec![E::zero(); prototypes],
            student_temp,
            teacher_temp,
            center_momentum,
        })
    }

    /// `c ← m·c + (1−m)·column-mean(batch)` over a `rows x K` logit block.
    pub fn update_center(&mut self, teacher_logits: &[E], rows: usize) -> Result<()> {
        let k = self.center.len();
        if rows == 0 || teacher_logits.len() != rows * k {
            return Err(CoreError::shape(
                "update_center",
                format!("{} logits for {rows} rows of {k}", teacher_logits.len()),
            ));
        }
        let inv_rows = E::one() / E::from_f64(rows as f64);
        let m = self.center_momentum;
        let one_minus = E::one() - m;
        for j in 0..k {
            let mut col = E::zero();
            for i in 0..rows {
                col += teacher_logits[i * k + j];
            }
            self.center[j] = m * self.center[j] + one_minus * col * inv_rows;
        }
        Ok(())
    }
}

/// Cross-view self-distillation loss over two global views.
///
/// Teacher probabilities are `softmax((logits − center)/τ_t)`, student
/// log-probabilities `log softmax(logits/τ_s)`, and the loss averages the two
/// cross-view cross-entropies:
/// `½ Σ_{a≠b} mean_B[−Σ_k P_t(view a) · log P_s(view b)]`.
///
/// Teacher logits must be produced without gradient tracking; gradients flow
/// only through the student.
pub fn dino_loss<E: Element>(
    student_views: &[Tensor<E>; 2],
    teacher_views: &[Tensor<E>; 2],
    state: &DinoState<E>,
) -> Result<Tensor<E>> {
    let k = state.center.len();
    for t in teacher_views {
        if t.needs_grad() {
            return Err(CoreError::invalid(
                "dino_loss",
                "teacher logits must be produced without gradient tracking",
            ));
        }
    }
    let (b, k0) = student_views[0].shape();
    for v in student_views.iter().chain(teacher_views.iter()) {
        if v.shape() != (b, k0) {
            return Err(CoreError::shape(
                "dino_loss",
                format!("view shapes differ: {:?} vs {:?}", (b, k0), v.shape()),
            ));
        }
    }
    if k0 != k {
        return Err(CoreError::shape(
            "dino_loss",
            format!("{k0} prototypes in logits, center has {k}"),
        ));
    }

    let neg_center: Vec<E> = state.center.iter().map(|&c| -c).collect();
    let neg_center = Tensor::constant(neg_center, 1, k)?;

    let mut halves = Vec::with_capacity(2);
    for (t_idx, s_idx) in [(0usize, 1usize), (1, 0)] {
        let p_t = teacher_views[t_idx]
            .add_rows(&neg_center)?
            .softmax_t(state.teacher_temp)?;
        let log_p_s = student_views[s_idx].log_softmax_t(state.student_temp)?;
        let ce = p_t.mul(&log_p_s)?.row_sum().mean_all().scale(-E::one());
        halves.push(ce);
    }
    Ok(halves[0].add(&halves[1])?.scale(E::from_f64(0.5)))
}

/// `dino + λ·bce` over scalar losses.
pub fn hybrid_loss<E: Element>(
    dino: &Tensor<E>,
    bce: &Tensor<E>,
    lambda: E,
) -> Result<Tensor<E>> {
    if dino.len() != 1 || bce.len() != 1 {
        return Err(CoreError::shape("hybrid_loss", "both terms must be scalars"));
    }
    dino.add(&bce.scale(lambda))
}
