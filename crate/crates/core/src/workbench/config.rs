//! Run configuration: one JSON document, with command-line flags overriding
//! individual leaf keys.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::pruning::{PruneTarget, StageConfig};
use crate::scoring::ImportanceMetric;

use super::data::SyntheticSpec;

/// Architecture of the teacher trained by `train-teacher`. Vocabulary and
/// sequence lengths come from the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherShape {
    pub d: usize,
    pub n_heads: usize,
    pub d_ff: Option<usize>,
    pub n_layers_v: usize,
    pub n_layers_t: usize,
    pub e: usize,
}

impl Default for TeacherShape {
    fn default() -> Self {
        let t = ModelConfig::toy_teacher(1, 1, 1, 1);
        Self {
            d: t.d,
            n_heads: t.n_heads,
            d_ff: t.d_ff,
            n_layers_v: t.n_layers_v,
            n_layers_t: t.n_layers_t,
            e: t.e,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Master seed; copied into the data, model and every training config.
    pub seed: u64,
    pub data: SyntheticSpec,
    pub teacher: TeacherShape,
    /// Contrastive training of the teacher.
    pub teacher_train: DistillConfig,
    pub target: PruneTarget,
    pub stage: StageConfig,
    /// Variants run by `compare`.
    pub strategies: Vec<ImportanceMetric>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let teacher_train = DistillConfig {
            lr: 2e-3,
            epochs: 50,
            ..DistillConfig::default()
        }
        .itc_only();
        let distill = DistillConfig {
            lr: 1e-3,
            epochs: 10,
            ..DistillConfig::default()
        };
        Self {
            seed: 42,
            data: SyntheticSpec::default(),
            teacher: TeacherShape::default(),
            teacher_train,
            target: PruneTarget::uniform(0.5, Some(3)),
            stage: StageConfig {
                distill,
                ..StageConfig::default()
            },
            strategies: vec![ImportanceMetric::Mope, ImportanceMetric::EveryOther],
        }
    }
}

impl RunConfig {
    /// Defaults, then `file` (a possibly partial document), then `overrides`
    /// as `(dotted.path, value)` pairs, then the master seed is propagated.
    pub fn resolve(file: Option<Value>, overrides: &[(String, Value)]) -> Result<Self> {
        let mut v = serde_json::to_value(RunConfig::default())?;
        if let Some(f) = file {
            if !f.is_object() {
                return Err(Error::Config("config file must hold a JSON object".into()));
            }
            merge(&mut v, f, "")?;
        }
        for (path, value) in overrides {
            set_path(&mut v, path, value.clone())?;
        }
        let mut cfg: RunConfig =
            serde_json::from_value(v).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.propagate_seed();
        Ok(cfg)
    }

    pub fn propagate_seed(&mut self) {
        let s = self.seed;
        self.data.seed = s;
        self.teacher_train.seed = s;
        self.stage.distill.seed = s;
        if let Some(d) = &mut self.stage.second_distill {
            d.seed = s;
        }
    }

    pub fn teacher_config(&self, spec: &SyntheticSpec) -> ModelConfig {
        let t = &self.teacher;
        ModelConfig {
            d: t.d,
            n_heads: t.n_heads,
            d_ff: t.d_ff,
            n_layers_v: t.n_layers_v,
            n_layers_t: t.n_layers_t,
            vocab_v: spec.vocab_v,
            vocab_t: spec.vocab_t,
            seq_v: spec.seq_v,
            seq_t: spec.seq_t,
            e: t.e,
            seed: self.seed,
            ln_eps: 1e-5,
        }
    }
}

/// Recursively overlays `src` onto `dst`. Keys absent from the defaults are
/// rejected so that typos do not pass silently.
fn merge(dst: &mut Value, src: Value, at: &str) -> Result<()> {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                let path = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
                match d.get_mut(&k) {
                    Some(slot) => merge(slot, v, &path)?,
                    None if optional_key(&k) => {
                        d.insert(k, v);
                    }
                    None => return Err(Error::Config(format!("unknown config key `{path}`"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

/// Keys that are omitted from serialized defaults when unset.
fn optional_key(k: &str) -> bool {
    matches!(k, "ffn_width" | "depth" | "param_budget" | "second_distill")
}

/// Sets one dotted path, e.g. `stage.distill.epochs`.
pub fn set_path(v: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut parts = path.split('.').peekable();
    let mut cur = v;
    while let Some(p) = parts.next() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("`{path}` does not name a config key")))?;
        if parts.peek().is_none() {
            if !obj.contains_key(p) && !optional_key(p) {
                return Err(Error::Config(format!("unknown config key `{path}`")));
            }
            obj.insert(p.to_string(), value);
            return Ok(());
        }
        cur = obj
            .get_mut(p)
            .ok_or_else(|| Error::Config(format!("unknown config key `{path}`")))?;
        if cur.is_null() {
            *cur = Value::Object(Default::default());
        }
    }
    Err(Error::Config("empty config path".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn partial_file_and_flags_override_leaves() {
        let file = json!({"stage": {"distill": {"epochs": 3}}, "seed": 7});
        let cfg = RunConfig::resolve(Some(file), &[("target.vision.width".into(), json!(0.25))]).unwrap();
        assert_eq!(cfg.stage.distill.epochs, 3);
        assert_eq!(cfg.stage.distill.lr, 1e-3);
        assert_eq!(cfg.target.vision.width, 0.25);
        assert_eq!(cfg.target.text.width, 0.5);
        assert_eq!(cfg.data.seed, 7);
        assert_eq!(cfg.teacher_train.seed, 7);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::resolve(Some(json!({"stage": {"distil": {}}})), &[]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(RunConfig::resolve(None, &[("nope".into(), json!(1))]).is_err());
    }

    #[test]
    fn optional_keys_can_be_set() {
        let cfg = RunConfig::resolve(None, &[("target.param_budget".into(), json!(1000))]).unwrap();
        assert_eq!(cfg.target.param_budget, Some(1000));
    }
}
