//! Contrastive and distillation objectives as graph operations.
//!
//! * `itc`  symmetric InfoNCE over `exp(logit_scale)·Fv·Flᵀ`, diagonal targets.
//! * `sim`  soft cross-entropy between student and teacher similarity rows
//!   (teacher side is a constant; rows of `S` and of `Sᵀ` averaged by default).
//! * `feat` `½·MSE(Fv, F̂v) + ½·MSE(Fl, F̂l)`.
//! * `hidn` `½·(Σ_m MSE(H_v^m, Ĥ_v^map(m)) + Σ_k MSE(H_l^k, Ĥ_l^map(k)))`.
//!
//! All MSE terms average over elements. Softmaxes inside `sim` run at
//! temperature 1 on raw cosine similarities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DualEncoder, Encoder};
use crate::numerics::{softmax_rows, transpose, Graph, Tensor, Var};
use crate::scalar::Scalar;

pub fn itc_loss<S: Scalar>(g: &mut Graph<S>, fv: Var, fl: Var, logit_scale: Var) -> Result<Var> {
    let n = g.value(fv).rows();
    if n < 2 || g.value(fl).rows() != n {
        return Err(Error::Input(format!(
            "contrastive loss needs a batch of at least 2 pairs, got {n}×{}",
            g.value(fl).rows()
        )));
    }
    let s = g.matmul_nt(fv, fl)?;
    let scale = g.exp(logit_scale);
    let logits = g.scale_by(scale, s)?;
    let rows = g.cross_entropy_diag(logits)?;
    let logits_t = g.transpose(logits);
    let cols = g.cross_entropy_diag(logits_t)?;
    let both = g.add(rows, cols)?;
    Ok(g.scale(both, S::of(0.5)))
}

/// Soft cross-entropy of student similarities `s` against fixed teacher
/// similarities.
pub fn sim_loss<S: Scalar>(g: &mut Graph<S>, s: Var, teacher: &Tensor<S>, bidirectional: bool) -> Result<Var> {
    if g.value(s).shape() != teacher.shape() {
        return Err(Error::Dimension(format!(
            "similarity shapes differ: {:?} vs {:?}",
            g.value(s).shape(),
            teacher.shape()
        )));
    }
    let rows = g.soft_cross_entropy(s, &softmax_rows(teacher))?;
    if !bidirectional {
        return Ok(rows);
    }
    let st = g.transpose(s);
    let cols = g.soft_cross_entropy(st, &softmax_rows(&transpose(teacher)))?;
    let both = g.add(rows, cols)?;
    Ok(g.scale(both, S::of(0.5)))
}

pub fn feat_loss<S: Scalar>(
    g: &mut Graph<S>,
    fv: Var,
    fl: Var,
    fv_teacher: &Tensor<S>,
    fl_teacher: &Tensor<S>,
) -> Result<Var> {
    let v = g.mse(fv, fv_teacher)?;
    let l = g.mse(fl, fl_teacher)?;
    let both = g.add(v, l)?;
    Ok(g.scale(both, S::of(0.5)))
}

/// Student block index → teacher block index, per tower.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMap {
    pub vision: Vec<usize>,
    pub text: Vec<usize>,
}

impl LayerMap {
    /// Derived from the student's architecture record: each retained block
    /// maps to the teacher block it was cut from.
    pub fn from_student<S: Scalar>(student: &DualEncoder<S>) -> Self {
        Self {
            vision: student.vision.arch.origins(),
            text: student.text.arch.origins(),
        }
    }

    pub fn tower(&self, enc: Encoder) -> &[usize] {
        match enc {
            Encoder::Vision => &self.vision,
            Encoder::Text => &self.text,
        }
    }

    /// Teacher indices must be strictly increasing and in range.
    pub fn validate(&self, teacher_layers: [usize; 2]) -> Result<()> {
        for (enc, n) in Encoder::BOTH.into_iter().zip(teacher_layers) {
            let map = self.tower(enc);
            if map.windows(2).any(|w| w[0] >= w[1]) || map.iter().any(|&t| t >= n) {
                return Err(Error::Input(format!("{enc} layer map {map:?} invalid for {n} teacher layers")));
            }
        }
        Ok(())
    }
}

/// `student[enc][m]` is the student's m-th hidden state; `teacher[enc]` holds
/// every teacher block's output.
pub fn hidden_loss<S: Scalar>(
    g: &mut Graph<S>,
    student: [&[Var]; 2],
    teacher: [&[Tensor<S>]; 2],
    map: &LayerMap,
) -> Result<Var> {
    let mut towers = Vec::with_capacity(2);
    for (i, enc) in Encoder::BOTH.into_iter().enumerate() {
        let idx = map.tower(enc);
        if idx.len() != student[i].len() {
            return Err(Error::Input(format!(
                "{enc}: layer map has {} entries for {} student layers",
                idx.len(),
                student[i].len()
            )));
        }
        let mut acc: Option<Var> = None;
        for (&h, &t) in student[i].iter().zip(idx) {
            let target = teacher[i]
                .get(t)
                .ok_or_else(|| Error::Input(format!("{enc}: teacher layer {t} missing")))?;
            let term = g.mse(h, target)?;
            acc = Some(match acc {
                Some(a) => g.add(a, term)?,
                None => term,
            });
        }
        let sum = match acc {
            Some(a) => a,
            None => g.constant(Tensor::scalar(S::zero())),
        };
        towers.push(sum);
    }
    let both = g.add(towers[0], towers[1])?;
    Ok(g.scale(both, S::of(0.5)))
}

/// Loss weights of the combined objective
/// `itc + alpha·sim + beta·feat + gamma·hidn`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1e3,
            gamma: 1.0,
        }
    }
}

impl LossWeights {
    pub const ITC_ONLY: LossWeights = LossWeights {
        alpha: 0.0,
        beta: 0.0,
        gamma: 0.0,
    };

    pub fn is_itc_only(&self) -> bool {
        self.alpha == 0.0 && self.beta == 0.0 && self.gamma == 0.0
    }
}

/// One batch's loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub itc: f64,
    pub sim: f64,
    pub feat: f64,
    pub hidn: f64,
}

pub fn total_loss(c: &LossComponents, w: &LossWeights) -> f64 {
    c.itc + w.alpha * c.sim + w.beta * c.feat + w.gamma * c.hidn
}

/// Graph version of [`total_loss`]; zero-weight terms are left out.
pub fn weighted_total<S: Scalar>(
    g: &mut Graph<S>,
    itc: Var,
    terms: &[(f64, Option<Var>)],
) -> Result<Var> {
    let mut total = itc;
    for &(w, term) in terms {
        if let Some(t) = term.filter(|_| w != 0.0) {
            let scaled = g.scale(t, S::of(w));
            total = g.add(total, scaled)?;
        }
    }
    Ok(total)
}

/// Evaluates a loss built by `f` on constant inputs.
fn value_of<S: Scalar>(
    inputs: &[&Tensor<S>],
    f: impl FnOnce(&mut Graph<S>, &[Var]) -> Result<Var>,
) -> Result<S> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant((*t).clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).item())
}

/// [`itc_loss`] on plain tensors.
pub fn itc_loss_value<S: Scalar>(fv: &Tensor<S>, fl: &Tensor<S>, logit_scale: S) -> Result<S> {
    let scale = Tensor::scalar(logit_scale);
    value_of(&[fv, fl, &scale], |g, v| itc_loss(g, v[0], v[1], v[2]))
}

/// [`sim_loss`] on plain tensors.
pub fn sim_loss_value<S: Scalar>(s: &Tensor<S>, teacher: &Tensor<S>, bidirectional: bool) -> Result<S> {
    value_of(&[s], |g, v| sim_loss(g, v[0], teacher, bidirectional))
}

/// [`feat_loss`] on plain tensors.
pub fn feat_loss_value<S: Scalar>(
    fv: &Tensor<S>,
    fl: &Tensor<S>,
    fv_teacher: &Tensor<S>,
    fl_teacher: &Tensor<S>,
) -> Result<S> {
    value_of(&[fv, fl], |g, v| feat_loss(g, v[0], v[1], fv_teacher, fl_teacher))
}

/// [`hidden_loss`] on plain tensors.
pub fn hidden_loss_value<S: Scalar>(
    student: [&[Tensor<S>]; 2],
    teacher: [&[Tensor<S>]; 2],
    map: &LayerMap,
) -> Result<S> {
    let mut g = Graph::new();
    let sv: Vec<Var> = student[0].iter().map(|t| g.constant(t.clone())).collect();
    let st: Vec<Var> = student[1].iter().map(|t| g.constant(t.clone())).collect();
    let out = hidden_loss(&mut g, [&sv, &st], teacher, map)?;
    Ok(g.value(out).item())
}
