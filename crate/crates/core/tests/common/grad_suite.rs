//! Finite-difference checks of every differentiable op, each loss, and the
//! full distillation objective on a two-layer model.

use mope::distill::{
    feat_loss, hidden_loss, itc_loss, sim_loss, weighted_total, LayerMap, LossWeights,
};
use mope::error::Result;
use mope::model::{forward_tower, AblationSet, BoundModel, Encoder};
use mope::numerics::{grad_check, Var};
use mope::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{model, random_split, random_tensor, small_config};

pub const OP_TOL: f64 = 1e-4;
pub const COMPOSITE_TOL: f64 = 1e-3;
const EPS: f64 = 1e-5;

pub struct Case {
    pub name: &'static str,
    pub error: f64,
    pub tol: f64,
}

/// Reduces a tensor-valued op to a scalar through fixed random weights so
/// that every output element contributes a distinct gradient.
fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    let w = random_tensor(&mut ChaCha8Rng::seed_from_u64(seed), &shape, 1.0);
    let w = g.constant(w);
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

fn check(name: &'static str, params: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> Case {
    let error = grad_check(f, &params, EPS).unwrap_or_else(|e| panic!("{name}: {e}"));
    Case { name, error, tol: OP_TOL }
}

pub fn op_cases() -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut t = |shape: &[usize]| random_tensor(&mut rng, shape, 1.0);
    let a = t(&[3, 4]);
    let b = t(&[4, 5]);
    let c = t(&[3, 4]);
    let c5 = t(&[5, 4]);
    let bias = t(&[4]);
    let sq = t(&[5, 5]);
    let table = t(&[6, 4]);
    let seq6 = t(&[6, 4]);
    let (q, k, v) = (t(&[6, 4]), t(&[6, 4]), t(&[6, 4]));
    let gamma = t(&[4]);
    let beta = t(&[4]);
    let scalar = Tensor::new(&[1], vec![0.3]).unwrap();
    let soft_target = mope::numerics::softmax_rows(&t(&[5, 5]));
    let mse_target = t(&[3, 4]);

    vec![
        check("matmul", vec![a.clone(), b.clone()], |g, p| {
            let y = g.matmul(p[0], p[1])?;
            weighted_sum(g, y, 1)
        }),
        check("matmul_nt", vec![a.clone(), c5.clone()], |g, p| {
            let y = g.matmul_nt(p[0], p[1])?;
            weighted_sum(g, y, 2)
        }),
        check("add", vec![a.clone(), c.clone()], |g, p| {
            let y = g.add(p[0], p[1])?;
            weighted_sum(g, y, 3)
        }),
        check("sub", vec![a.clone(), c.clone()], |g, p| {
            let y = g.sub(p[0], p[1])?;
            weighted_sum(g, y, 4)
        }),
        check("mul", vec![a.clone(), c.clone()], |g, p| {
            let y = g.mul(p[0], p[1])?;
            weighted_sum(g, y, 5)
        }),
        check("add_bias", vec![a.clone(), bias.clone()], |g, p| {
            let y = g.add_bias(p[0], p[1])?;
            weighted_sum(g, y, 6)
        }),
        check("mask_cols", vec![a.clone()], |g, p| {
            let y = g.mask_cols(p[0], vec![1.0, 0.0, 1.0, 1.0])?;
            weighted_sum(g, y, 7)
        }),
        check("scale", vec![a.clone()], |g, p| {
            let y = g.scale(p[0], -1.7);
            weighted_sum(g, y, 8)
        }),
        check("scale_by", vec![scalar.clone(), a.clone()], |g, p| {
            let y = g.scale_by(p[0], p[1])?;
            weighted_sum(g, y, 9)
        }),
        check("exp", vec![a.clone()], |g, p| {
            let y = g.exp(p[0]);
            weighted_sum(g, y, 10)
        }),
        check("gelu", vec![a.clone()], |g, p| {
            let y = g.gelu(p[0]);
            weighted_sum(g, y, 11)
        }),
        check("layer_norm", vec![a.clone(), gamma, beta], |g, p| {
            let y = g.layer_norm(p[0], p[1], p[2], 1e-5)?;
            weighted_sum(g, y, 12)
        }),
        check("softmax_rows", vec![a.clone()], |g, p| {
            let y = g.softmax_rows(p[0]);
            weighted_sum(g, y, 13)
        }),
        check("log_softmax_rows", vec![a.clone()], |g, p| {
            let y = g.log_softmax_rows(p[0]);
            weighted_sum(g, y, 14)
        }),
        check("transpose", vec![a.clone()], |g, p| {
            let y = g.transpose(p[0]);
            weighted_sum(g, y, 15)
        }),
        check("gather", vec![table], |g, p| {
            let y = g.gather(p[0], &[2, 0, 2, 5, 1])?;
            weighted_sum(g, y, 16)
        }),
        check("segment_mean", vec![seq6.clone()], |g, p| {
            let y = g.segment_mean(p[0], 3)?;
            weighted_sum(g, y, 17)
        }),
        check("l2_normalize_rows", vec![a.clone()], |g, p| {
            let y = g.l2_normalize_rows(p[0]);
            weighted_sum(g, y, 18)
        }),
        check("attention", vec![q.clone(), k.clone(), v.clone()], |g, p| {
            let y = g.attention(p[0], p[1], p[2], 2, 3, &[true, true])?;
            weighted_sum(g, y, 19)
        }),
        check("attention_one_head_off", vec![q, k, v], |g, p| {
            let y = g.attention(p[0], p[1], p[2], 2, 3, &[false, true])?;
            weighted_sum(g, y, 20)
        }),
        check("sum", vec![a.clone()], |g, p| Ok(g.sum(p[0]))),
        check("mean", vec![a.clone()], |g, p| Ok(g.mean(p[0]))),
        check("cross_entropy_diag", vec![sq.clone()], |g, p| g.cross_entropy_diag(p[0])),
        check("soft_cross_entropy", vec![sq], move |g, p| g.soft_cross_entropy(p[0], &soft_target)),
        check("mse", vec![a], move |g, p| g.mse(p[0], &mse_target)),
    ]
}

pub fn loss_cases() -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut t = |shape: &[usize], s: f64| random_tensor(&mut rng, shape, s);
    let fv = t(&[5, 4], 1.0);
    let fl = t(&[5, 4], 1.0);
    let teacher_s = t(&[5, 5], 2.0);
    let fv_t = t(&[5, 4], 1.0);
    let fl_t = t(&[5, 4], 1.0);
    let scale = Tensor::new(&[1], vec![1.2]).unwrap();
    let hv = [t(&[6, 4], 1.0), t(&[6, 4], 1.0)];
    let ht = [t(&[6, 4], 1.0), t(&[6, 4], 1.0), t(&[6, 4], 1.0)];
    let hl = [t(&[4, 4], 1.0)];
    let hlt = [t(&[4, 4], 1.0), t(&[4, 4], 1.0)];
    let map = LayerMap { vision: vec![0, 2], text: vec![1] };

    let normalized = |g: &mut Graph, x: Var| g.l2_normalize_rows(x);
    vec![
        check("itc_loss", vec![fv.clone(), fl.clone(), scale], move |g, p| {
            let (a, b) = (normalized(g, p[0]), normalized(g, p[1]));
            itc_loss(g, a, b, p[2])
        }),
        check("sim_loss", vec![fv.clone(), fl.clone()], {
            let teacher_s = teacher_s.clone();
            move |g, p| {
                let s = g.matmul_nt(p[0], p[1])?;
                sim_loss(g, s, &teacher_s, true)
            }
        }),
        check("sim_loss_rows_only", vec![fv.clone(), fl.clone()], move |g, p| {
            let s = g.matmul_nt(p[0], p[1])?;
            sim_loss(g, s, &teacher_s, false)
        }),
        check("feat_loss", vec![fv, fl], move |g, p| feat_loss(g, p[0], p[1], &fv_t, &fl_t)),
        check(
            "hidden_loss",
            vec![hv[0].clone(), hv[1].clone(), hl[0].clone()],
            move |g, p| hidden_loss(g, [&p[..2], &p[2..]], [&ht[..], &hlt[..]], &map),
        ),
    ]
}

/// Full objective `itc + α·sim + β·feat + γ·hidn` with respect to every
/// parameter of a two-layer student distilled from a two-layer teacher.
pub fn composite_case() -> Case {
    let cfg = small_config(2, 2, 8, 16);
    let student = model(&cfg, 3);
    let teacher = model(&cfg, 4);
    let batch = random_split(&cfg, 4, 5);
    let none = AblationSet::new();
    let tv = teacher.encode_batch(Encoder::Vision, &batch.vision_tokens(), &none).unwrap();
    let tt = teacher.encode_batch(Encoder::Text, &batch.text_tokens(), &none).unwrap();
    let teacher_s = mope::numerics::matmul_nt(&tv.features, &tt.features).unwrap();
    let map = LayerMap::from_student(&student);
    let w = LossWeights::default();
    let params: Vec<Tensor> = student.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
    let error = grad_check(
        |g, vars| {
            let bound = BoundModel::from_vars(&student, vars.to_vec());
            let v = forward_tower(g, &student, Encoder::Vision, &bound.vision, &batch.vision_tokens(), &none)?;
            let t = forward_tower(g, &student, Encoder::Text, &bound.text, &batch.text_tokens(), &none)?;
            let itc = itc_loss(g, v.features, t.features, bound.logit_scale)?;
            let s = g.matmul_nt(v.features, t.features)?;
            let sim = sim_loss(g, s, &teacher_s, true)?;
            let feat = feat_loss(g, v.features, t.features, &tv.features, &tt.features)?;
            let hidn = hidden_loss(g, [&v.hiddens, &t.hiddens], [&tv.hiddens, &tt.hiddens], &map)?;
            weighted_total(g, itc, &[(w.alpha, Some(sim)), (w.beta, Some(feat)), (w.gamma, Some(hidn))])
        },
        &params,
        EPS,
    )
    .expect("composite gradient check runs");
    Case {
        name: "composite_distillation_loss",
        error,
        tol: COMPOSITE_TOL,
    }
}
