use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{evaluate, RetrievalMetrics, DEFAULT_KS};
use crate::model::{forward_tower, AblationSet, BoundModel, DualEncoder, Encoder};
use crate::numerics::{matmul_nt, Graph, Tensor, Var};
use crate::scalar::Scalar;
use crate::workbench::data::Split;

use super::losses::{
    feat_loss, hidden_loss, itc_loss, sim_loss, total_loss, weighted_total, LayerMap, LossComponents, LossWeights,
};
use super::optim::{AdamW, CosineSchedule};

/// Upper bound on the learnable log temperature (`ln 100`).
pub const MAX_LOGIT_SCALE: f64 = 4.605_170_185_988_092;

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    #[serde(flatten)]
    pub weights: LossWeights,
    pub lr: f64,
    pub warmup_ratio: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub adam_betas: (f64, f64),
    pub seed: u64,
    /// Average the soft cross-entropy over rows of `S` and of `Sᵀ`.
    #[serde(default = "default_true")]
    pub sim_bidirectional: bool,
    /// Multiply both similarity matrices by their model's `exp(logit_scale)`
    /// before the soft cross-entropy.
    #[serde(default)]
    pub sim_use_logit_scale: bool,
    #[serde(default)]
    pub freeze_logit_scale: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            lr: 1e-3,
            warmup_ratio: 0.1,
            epochs: 20,
            batch_size: 32,
            weight_decay: 3e-4,
            adam_betas: (0.9, 0.98),
            seed: 42,
            sim_bidirectional: true,
            sim_use_logit_scale: false,
            freeze_logit_scale: false,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        if [w.alpha, w.beta, w.gamma].iter().any(|&x| !(x >= 0.0)) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config(format!("warmup_ratio {} outside [0, 1)", self.warmup_ratio)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        Ok(())
    }

    /// Contrastive-only training with the same optimizer settings.
    pub fn itc_only(&self) -> Self {
        Self {
            weights: LossWeights::ITC_ONLY,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub components: LossComponents,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    #[serde(flatten)]
    pub components: LossComponents,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub weights: LossWeights,
    pub epochs: Vec<EpochLog>,
    pub steps: Vec<StepLog>,
    /// Validation metrics after training, when a validation split was given.
    pub final_metrics: Option<RetrievalMetrics>,
    /// Left out of stored artifacts so that reruns compare byte for byte.
    #[serde(default)]
    pub wall_time_s: f64,
}

/// Teacher outputs for every training pair, computed once.
struct TeacherCache<S> {
    features: [Tensor<S>; 2],
    /// Per tower, per teacher block: `[n·seq × d]`.
    hiddens: [Vec<Tensor<S>>; 2],
    logit_scale: S,
}

fn teacher_cache<S: Scalar>(teacher: &DualEncoder<S>, train: &Split) -> Result<TeacherCache<S>> {
    let none = AblationSet::new();
    let v = teacher.encode_batch(Encoder::Vision, &train.vision_tokens(), &none)?;
    let t = teacher.encode_batch(Encoder::Text, &train.text_tokens(), &none)?;
    Ok(TeacherCache {
        features: [v.features, t.features],
        hiddens: [v.hiddens, t.hiddens],
        logit_scale: teacher.logit_scale.item(),
    })
}

fn gather_blocks<S: Scalar>(t: &Tensor<S>, idx: &[usize], block: usize) -> Tensor<S> {
    let rows: Vec<usize> = idx.iter().flat_map(|&i| i * block..(i + 1) * block).collect();
    t.select_rows(&rows)
}

fn batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    if n <= batch_size {
        return vec![order];
    }
    order
        .chunks(batch_size)
        .filter(|c| c.len() == batch_size)
        .map(<[usize]>::to_vec)
        .collect()
}

fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    if n <= batch_size {
        1
    } else {
        n / batch_size
    }
}

/// Trains `student` on `train`. With a teacher, the combined objective
/// `itc + α·sim + β·feat + γ·hidn` is minimized against the frozen teacher;
/// without one (or with all distillation weights zero) only the contrastive
/// term is used.
pub fn train_distill<S: Scalar>(
    student: &DualEncoder<S>,
    teacher: Option<&DualEncoder<S>>,
    train: &Split,
    val: Option<&Split>,
    cfg: &DistillConfig,
) -> Result<(DualEncoder<S>, TrainReport)> {
    cfg.validate()?;
    let started = Instant::now();
    if train.len() < 2 {
        return Err(Error::Input("training split needs at least 2 pairs".into()));
    }
    let teacher = teacher.filter(|_| !cfg.weights.is_itc_only());
    let map = LayerMap::from_student(student);
    let cache = match teacher {
        Some(t) => {
            map.validate([t.vision.arch.n_layers(), t.text.arch.n_layers()])?;
            Some(teacher_cache(t, train)?)
        }
        None => None,
    };

    let per_epoch = steps_per_epoch(train.len(), cfg.batch_size);
    let schedule = CosineSchedule::new(cfg.lr, cfg.warmup_ratio, per_epoch * cfg.epochs);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::<S>::new(cfg.adam_betas, cfg.weight_decay);
    let mut model = student.clone();
    let n_params = model.named_tensors().len();
    let mut frozen = vec![false; n_params];
    frozen[n_params - 1] = cfg.freeze_logit_scale;

    let mut report = TrainReport {
        seed: cfg.seed,
        weights: cfg.weights,
        epochs: Vec::new(),
        steps: Vec::new(),
        final_metrics: None,
        wall_time_s: 0.0,
    };
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut sums = LossComponents::default();
        let mut total_sum = 0.0;
        let epoch_batches = batches(train.len(), cfg.batch_size, &mut rng);
        for idx in &epoch_batches {
            let lr = schedule.lr_at(step);
            let (components, total, grads) = batch_step(&model, cache.as_ref(), &map, train, idx, cfg)?;
            if !total.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                return Err(Error::Training {
                    step,
                    reason: format!("non-finite loss {total}"),
                    last_good: Box::new(model.cast()),
                });
            }
            opt.step(model.tensors_mut(), &grads, &frozen, lr);
            let ls = model.logit_scale.data_mut();
            ls[0] = ls[0].max(S::zero()).min(S::of(MAX_LOGIT_SCALE));
            sums.itc += components.itc;
            sums.sim += components.sim;
            sums.feat += components.feat;
            sums.hidn += components.hidn;
            total_sum += total;
            report.steps.push(StepLog {
                step,
                lr,
                components,
                total,
            });
            step += 1;
        }
        let k = epoch_batches.len() as f64;
        let mean = LossComponents {
            itc: sums.itc / k,
            sim: sums.sim / k,
            feat: sums.feat / k,
            hidn: sums.hidn / k,
        };
        log::debug!("epoch {epoch}: total {:.6} itc {:.6}", total_sum / k, mean.itc);
        report.epochs.push(EpochLog {
            epoch,
            components: mean,
            total: total_loss(&mean, &cfg.weights),
        });
    }
    if let Some(val) = val {
        report.final_metrics = Some(evaluate(&model, val, &AblationSet::new(), &DEFAULT_KS)?);
    }
    report.wall_time_s = started.elapsed().as_secs_f64();
    Ok((model, report))
}

/// Loss terms, total and parameter gradients (canonical order) for one batch.
fn batch_step<S: Scalar>(
    model: &DualEncoder<S>,
    cache: Option<&TeacherCache<S>>,
    map: &LayerMap,
    train: &Split,
    idx: &[usize],
    cfg: &DistillConfig,
) -> Result<(LossComponents, f64, Vec<Tensor<S>>)> {
    let batch = train.subset(idx);
    let mut g = Graph::new();
    let bound = BoundModel::bind(&mut g, model, true);
    let none = AblationSet::new();
    let tv = forward_tower(&mut g, model, Encoder::Vision, &bound.vision, &batch.vision_tokens(), &none)?;
    let tt = forward_tower(&mut g, model, Encoder::Text, &bound.text, &batch.text_tokens(), &none)?;
    let itc = itc_loss(&mut g, tv.features, tt.features, bound.logit_scale)?;

    let w = cfg.weights;
    let mut sim = None;
    let mut feat = None;
    let mut hidn = None;
    if let Some(c) = cache {
        let fv_t = c.features[0].select_rows(idx);
        let fl_t = c.features[1].select_rows(idx);
        if w.alpha != 0.0 {
            let mut teacher_s = matmul_nt(&fv_t, &fl_t)?;
            let mut s = g.matmul_nt(tv.features, tt.features)?;
            if cfg.sim_use_logit_scale {
                let ts = c.logit_scale.exp();
                teacher_s = teacher_s.map(|x| x * ts);
                let scale = g.exp(bound.logit_scale);
                s = g.scale_by(scale, s)?;
            }
            sim = Some(sim_loss(&mut g, s, &teacher_s, cfg.sim_bidirectional)?);
        }
        if w.beta != 0.0 {
            feat = Some(feat_loss(&mut g, tv.features, tt.features, &fv_t, &fl_t)?);
        }
        if w.gamma != 0.0 {
            let seqs = [model.config.seq_v, model.config.seq_t];
            let teacher_h: Vec<Vec<Tensor<S>>> = (0..2)
                .map(|i| {
                    c.hiddens[i]
                        .iter()
                        .map(|h| gather_blocks(h, idx, seqs[i]))
                        .collect()
                })
                .collect();
            hidn = Some(hidden_loss(
                &mut g,
                [&tv.hiddens, &tt.hiddens],
                [&teacher_h[0], &teacher_h[1]],
                map,
            )?);
        }
    }
    let total = weighted_total(&mut g, itc, &[(w.alpha, sim), (w.beta, feat), (w.gamma, hidn)])?;
    g.backward(total)?;
    let value = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item().as_f64());
    let components = LossComponents {
        itc: value(Some(itc)),
        sim: value(sim),
        feat: value(feat),
        hidn: value(hidn),
    };
    let grads = bound.params.iter().map(|&p| g.grad_or_zeros(p)).collect();
    Ok((components, g.value(total).item().as_f64(), grads))
}
