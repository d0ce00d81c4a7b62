mod common;

use common::{model, random_split, small_config};
use mope::model::{encoder_param_count, structural_prune, Encoder, EncoderArch, ModelConfig, ModuleId, ModuleKind};
use mope::pruning::{kept_count, make_depth_plan, make_width_plan, PruneTarget, PruningPlan, TowerTarget};
use mope::scoring::{build_cost_tables, ImportanceMetric, ScoreConfig};
use mope::Error;

#[test]
fn removing_one_head_of_four_at_width_32_saves_1048() {
    let cfg = ModelConfig { d: 32, n_heads: 4, ..small_config(2, 4, 32, 64) };
    let m = model(&cfg, 1);
    let id = ModuleId::Head { encoder: Encoder::Text, layer: 1, head: 3 };
    let p = structural_prune(&m, &[id]).unwrap();
    assert_eq!(m.param_count() - p.param_count(), 3 * (32 * 8 + 8) + 8 * 32);
    assert_eq!(m.param_count() - p.param_count(), 1048);
}

#[test]
fn large_vision_tower_has_about_304m_parameters() {
    // 14×14×3 patch values stand in for the token vocabulary; 257 positions
    // include the class slot.
    let cfg = ModelConfig {
        d: 1024,
        n_heads: 16,
        d_ff: Some(4096),
        n_layers_v: 24,
        n_layers_t: 12,
        vocab_v: 14 * 14 * 3,
        vocab_t: 49408,
        seq_v: 257,
        seq_t: 77,
        e: 768,
        seed: 42,
        ln_eps: 1e-5,
    };
    let arch = EncoderArch::full(24, 16, 4096);
    let n = encoder_param_count(&cfg, Encoder::Vision, &arch);
    assert_eq!(n, 303_963_136);
    assert_eq!((n as f64 / 1e6).round(), 304.0);
    assert_eq!(kept_count(16, 0.375), 6);
    assert_eq!(kept_count(16, 0.375) * cfg.d_head(), 384);
}

#[test]
fn doubling_depth_doubles_the_layer_term() {
    let cfg = small_config(2, 2, 8, 16);
    let base = encoder_param_count(&cfg, Encoder::Vision, &EncoderArch::full(0, 2, 16));
    let one = encoder_param_count(&cfg, Encoder::Vision, &EncoderArch::full(3, 2, 16)) - base;
    let two = encoder_param_count(&cfg, Encoder::Vision, &EncoderArch::full(6, 2, 16)) - base;
    assert_eq!(two, 2 * one);
}

#[test]
fn planning_is_pure_and_deterministic() {
    let cfg = small_config(3, 4, 16, 32);
    let m = model(&cfg, 5);
    let split = random_split(&cfg, 24, 6);
    let scored = build_cost_tables(&m, &split, &ScoreConfig::default()).unwrap();
    let before = scored.model.clone();
    let target = PruneTarget::uniform(0.5, Some(2));
    let w1 = make_width_plan(&scored.model, &scored.tables, &target).unwrap();
    let w2 = make_width_plan(&scored.model, &scored.tables, &target).unwrap();
    let d1 = make_depth_plan(&scored.model, Some(&scored.tables), &target, ImportanceMetric::Mope).unwrap();
    assert_eq!(scored.model, before);
    assert_eq!(w1.hash().unwrap(), w2.hash().unwrap());
    let both = PruningPlan::combine(&scored.model, &w1, &d1).unwrap();
    let pruned = both.apply(&scored.model).unwrap();
    assert_eq!(pruned.param_count(), both.param_count);
    for enc in Encoder::BOTH {
        assert_eq!(pruned.tower(enc).arch.n_layers(), 2);
        for l in &pruned.tower(enc).arch.layers {
            assert_eq!(l.heads.len(), 2);
            assert_eq!(l.neurons, 16);
        }
    }
}

#[test]
fn plans_refuse_foreign_models() {
    let cfg = small_config(2, 4, 16, 32);
    let m = model(&cfg, 5);
    let other = model(&cfg, 6);
    let split = random_split(&cfg, 16, 6);
    let score = ScoreConfig::default().with_kinds(&[ModuleKind::Head]);
    let scored = build_cost_tables(&m, &split, &score).unwrap();
    let target = PruneTarget {
        vision: TowerTarget { width: 0.5, ffn_width: Some(1.0), depth: None },
        text: TowerTarget { width: 0.5, ffn_width: Some(1.0), depth: None },
        param_budget: None,
    };
    let plan = make_width_plan(&scored.model, &scored.tables, &target).unwrap();
    assert!(matches!(plan.apply(&other), Err(Error::HashMismatch { .. })));
}

#[test]
fn budget_mode_meets_the_budget_without_emptying_layers() {
    let cfg = small_config(2, 4, 16, 32);
    let m = model(&cfg, 8);
    let split = random_split(&cfg, 16, 9);
    let scored = build_cost_tables(&m, &split, &ScoreConfig::default()).unwrap();
    let budget = m.param_count() * 3 / 4;
    let target = PruneTarget {
        vision: TowerTarget::default(),
        text: TowerTarget::default(),
        param_budget: Some(budget),
    };
    let plan = make_width_plan(&scored.model, &scored.tables, &target).unwrap();
    let pruned = plan.apply(&scored.model).unwrap();
    assert!(pruned.param_count() <= budget);
    for enc in Encoder::BOTH {
        assert!(pruned.tower(enc).arch.layers.iter().all(|l| !l.heads.is_empty() && l.neurons > 0));
    }
    let impossible = PruneTarget { param_budget: Some(1000), ..target };
    assert!(matches!(
        make_width_plan(&scored.model, &scored.tables, &impossible),
        Err(Error::Planning(_))
    ));
}
