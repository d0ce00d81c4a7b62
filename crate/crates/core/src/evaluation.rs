//! Retrieval evaluation: similarity matrices, Recall@K in both directions and
//! the scalar objective used by the pruning-error metric.
//!
//! "Recall Mean" is the mean of all six standard entries, Recall@{1,5,10} for
//! image→text and for text→image.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{validate_ablation, AblationSet, DualEncoder, Encoder};
use crate::numerics::{matmul_nt, Tensor};
use crate::scalar::Scalar;
use crate::workbench::data::Split;

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// Rows of `S`: each image ranks all texts (TR).
    ImageToText,
    /// Columns of `S`: each text ranks all images (IR).
    TextToImage,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    TrMean,
    IrMean,
    RecallMean,
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tr-mean" => Ok(Objective::TrMean),
            "ir-mean" => Ok(Objective::IrMean),
            "recall-mean" => Ok(Objective::RecallMean),
            other => Err(Error::Usage(format!("unknown objective `{other}`"))),
        }
    }
}

/// Objective plus the K-set it averages over.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalObjective {
    pub objective: Objective,
    pub ks: Vec<usize>,
}

impl Default for EvalObjective {
    fn default() -> Self {
        Self {
            objective: Objective::RecallMean,
            ks: DEFAULT_KS.to_vec(),
        }
    }
}

impl EvalObjective {
    pub fn new(objective: Objective) -> Self {
        Self {
            objective,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub n: usize,
    /// Image→text Recall@K, keyed by the requested K.
    pub tr_at: BTreeMap<usize, f64>,
    /// Text→image Recall@K.
    pub ir_at: BTreeMap<usize, f64>,
    pub tr_mean: f64,
    pub ir_mean: f64,
    pub recall_mean: f64,
}

/// Cosine similarities `Fv · Flᵀ` of unit-norm feature rows.
pub fn similarity_matrix<S: Scalar>(fv: &Tensor<S>, fl: &Tensor<S>) -> Result<Tensor<S>> {
    if fv.cols() != fl.cols() {
        return Err(Error::Dimension(format!(
            "feature widths differ: {} vs {}",
            fv.cols(),
            fl.cols()
        )));
    }
    matmul_nt(fv, fl)
}

/// 0-based rank of the diagonal entry under descending similarity, ties
/// broken by ascending index.
fn diagonal_rank<S: Scalar>(s: &Tensor<S>, i: usize, dir: Direction) -> usize {
    let n = s.rows();
    let get = |j: usize| match dir {
        Direction::ImageToText => s.at(i, j),
        Direction::TextToImage => s.at(j, i),
    };
    let truth = get(i);
    (0..n)
        .filter(|&j| {
            let v = get(j);
            v > truth || (v == truth && j < i)
        })
        .count()
}

fn check_square<S: Scalar>(s: &Tensor<S>) -> Result<usize> {
    let (m, n) = s.dims2();
    if m != n || s.rank() != 2 {
        return Err(Error::Dimension(format!("similarity matrix must be square, got {:?}", s.shape())));
    }
    if n == 0 {
        return Err(Error::Input("empty similarity matrix".into()));
    }
    Ok(n)
}

/// Fraction of queries whose true partner (the diagonal) is among the top
/// `k` candidates.
pub fn recall_at_k<S: Scalar>(s: &Tensor<S>, k: usize, dir: Direction) -> Result<f64> {
    let n = check_square(s)?;
    if k == 0 || k > n {
        return Err(Error::Range(format!("k = {k} outside 1..={n}")));
    }
    let hits = (0..n).filter(|&i| diagonal_rank(s, i, dir) < k).count();
    Ok(hits as f64 / n as f64)
}

/// All Recall@K entries for both directions. K values above the number of
/// pairs are clamped to it (with a warning).
pub fn metrics_from_similarity<S: Scalar>(s: &Tensor<S>, ks: &[usize]) -> Result<RetrievalMetrics> {
    let n = check_square(s)?;
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Range("K-set must be nonempty and positive".into()));
    }
    if ks.iter().any(|&k| k > n) {
        log::warn!("K-set {ks:?} clamped to {n} pairs");
    }
    let tr_ranks: Vec<usize> = (0..n).map(|i| diagonal_rank(s, i, Direction::ImageToText)).collect();
    let ir_ranks: Vec<usize> = (0..n).map(|i| diagonal_rank(s, i, Direction::TextToImage)).collect();
    let recall = |ranks: &[usize], k: usize| ranks.iter().filter(|&&r| r < k.min(n)).count() as f64 / n as f64;
    let tr_at: BTreeMap<usize, f64> = ks.iter().map(|&k| (k, recall(&tr_ranks, k))).collect();
    let ir_at: BTreeMap<usize, f64> = ks.iter().map(|&k| (k, recall(&ir_ranks, k))).collect();
    let mean = |vals: Vec<f64>| vals.iter().sum::<f64>() / vals.len() as f64;
    let tr: Vec<f64> = ks.iter().map(|k| tr_at[k]).collect();
    let ir: Vec<f64> = ks.iter().map(|k| ir_at[k]).collect();
    let (tr_mean, ir_mean) = (mean(tr), mean(ir));
    Ok(RetrievalMetrics {
        n,
        tr_mean,
        ir_mean,
        // Mean of all 2·|K| entries, written so that transposing S leaves
        // it bit-identical.
        recall_mean: (tr_mean + ir_mean) / 2.0,
        tr_at,
        ir_at,
    })
}

/// Z for the chosen objective.
pub fn objective_value(metrics: &RetrievalMetrics, objective: Objective) -> f64 {
    match objective {
        Objective::TrMean => metrics.tr_mean,
        Objective::IrMean => metrics.ir_mean,
        Objective::RecallMean => metrics.recall_mean,
    }
}

/// Encodes every pair of `split` with `ablation` applied and scores retrieval.
pub fn evaluate<S: Scalar>(
    model: &DualEncoder<S>,
    split: &Split,
    ablation: &AblationSet,
    ks: &[usize],
) -> Result<RetrievalMetrics> {
    if split.is_empty() {
        return Err(Error::Input(format!("split `{}` is empty", split.name)));
    }
    validate_ablation(model, ablation)?;
    let fv = model.features(Encoder::Vision, &split.vision_tokens(), ablation)?;
    let fl = model.features(Encoder::Text, &split.text_tokens(), ablation)?;
    metrics_from_similarity(&similarity_matrix(&fv, &fl)?, ks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn identity_is_perfect() {
        let s = Tensor::<f64>::eye(5);
        assert_eq!(recall_at_k(&s, 1, Direction::ImageToText).unwrap(), 1.0);
        assert_eq!(recall_at_k(&s, 1, Direction::TextToImage).unwrap(), 1.0);
    }

    #[test]
    fn k_equal_n_retrieves_everything() {
        let s = mat(&[&[0.1, 0.9, 0.3], &[0.8, -0.2, 0.5], &[0.4, 0.4, 0.0]]);
        for dir in [Direction::ImageToText, Direction::TextToImage] {
            assert_eq!(recall_at_k(&s, 3, dir).unwrap(), 1.0);
        }
        assert!(matches!(recall_at_k(&s, 4, Direction::ImageToText), Err(Error::Range(_))));
    }

    #[test]
    fn ties_resolve_to_lower_index() {
        // Row 1 ties with column 0: column 0 wins, so the truth is rank 1.
        let s = mat(&[&[1.0, 0.0], &[0.5, 0.5]]);
        assert_eq!(recall_at_k(&s, 1, Direction::ImageToText).unwrap(), 0.5);
        // Row 0 ties with column 1: the truth (index 0) wins.
        let s = mat(&[&[0.5, 0.5], &[0.0, 1.0]]);
        assert_eq!(recall_at_k(&s, 1, Direction::ImageToText).unwrap(), 1.0);
    }

    #[test]
    fn teacher_row_tr_mean() {
        let m = RetrievalMetrics {
            n: 100,
            tr_at: [(1, 76.2), (5, 92.9), (10, 96.4)].into_iter().collect(),
            ir_at: BTreeMap::new(),
            tr_mean: (76.2 + 92.9 + 96.4) / 3.0,
            ir_mean: 0.0,
            recall_mean: 0.0,
        };
        assert!((objective_value(&m, Objective::TrMean) - 88.5).abs() < 1e-12);
    }

    #[test]
    fn recall_mean_is_mean_of_six() {
        // Hand-built 3×3 with known ranks: TR ranks (0, 1, 2), IR ranks (0, 1, 0).
        let s = mat(&[&[0.9, 0.1, 0.0], &[0.8, 0.7, 0.2], &[0.6, 0.95, 0.3]]);
        let m = metrics_from_similarity(&s, &[1, 2, 3]).unwrap();
        assert_eq!(m.tr_at[&1], 1.0 / 3.0);
        assert_eq!(m.tr_at[&2], 2.0 / 3.0);
        assert_eq!(m.ir_at[&1], 2.0 / 3.0);
        assert_eq!(m.ir_at[&2], 1.0);
        let six = [1.0 / 3.0, 2.0 / 3.0, 1.0, 2.0 / 3.0, 1.0, 1.0];
        assert!((m.recall_mean - six.iter().sum::<f64>() / 6.0).abs() < 1e-15);
        assert_eq!(objective_value(&m, Objective::RecallMean), m.recall_mean);
    }

    #[test]
    fn single_pair_is_perfect() {
        let s = mat(&[&[0.3]]);
        let m = metrics_from_similarity(&s, &DEFAULT_KS).unwrap();
        assert_eq!(m.recall_mean, 1.0);
        assert_eq!(m.tr_at[&10], 1.0);
    }

    #[test]
    fn mismatched_feature_widths() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 4]);
        assert!(matches!(similarity_matrix(&a, &b), Err(Error::Dimension(_))));
    }
}
