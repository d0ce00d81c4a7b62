use std::collections::BTreeSet;
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::config::Encoder;

/// An addressable prunable unit. Indices refer to the model's current
/// architecture, not to the teacher it was pruned from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModuleId {
    Head {
        encoder: Encoder,
        layer: usize,
        head: usize,
    },
    /// Group `group` of the layer's FFN neurons split into `groups`
    /// contiguous blocks (see [`group_range`]).
    NeuronGroup {
        encoder: Encoder,
        layer: usize,
        group: usize,
        groups: usize,
    },
    Layer {
        encoder: Encoder,
        layer: usize,
    },
}

impl ModuleId {
    pub fn encoder(&self) -> Encoder {
        match *self {
            ModuleId::Head { encoder, .. }
            | ModuleId::NeuronGroup { encoder, .. }
            | ModuleId::Layer { encoder, .. } => encoder,
        }
    }

    pub fn layer(&self) -> usize {
        match *self {
            ModuleId::Head { layer, .. }
            | ModuleId::NeuronGroup { layer, .. }
            | ModuleId::Layer { layer, .. } => layer,
        }
    }

    /// Index within the layer (head or group); zero for layers.
    pub fn index(&self) -> usize {
        match *self {
            ModuleId::Head { head, .. } => head,
            ModuleId::NeuronGroup { group, .. } => group,
            ModuleId::Layer { .. } => 0,
        }
    }

    pub fn kind(&self) -> ModuleKind {
        match self {
            ModuleId::Head { .. } => ModuleKind::Head,
            ModuleId::NeuronGroup { .. } => ModuleKind::NeuronGroup,
            ModuleId::Layer { .. } => ModuleKind::Layer,
        }
    }

    /// Ordering used for every tie-break: encoder, layer, kind, index.
    pub fn tie_key(&self) -> (Encoder, usize, ModuleKind, usize) {
        (self.encoder(), self.layer(), self.kind(), self.index())
    }
}

impl fmt::Display for ModuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            ModuleId::Head { encoder, layer, head } => write!(f, "{encoder}.L{layer}.H{head}"),
            ModuleId::NeuronGroup {
                encoder,
                layer,
                group,
                groups,
            } => write!(f, "{encoder}.L{layer}.G{group}of{groups}"),
            ModuleId::Layer { encoder, layer } => write!(f, "{encoder}.L{layer}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleKind {
    Head,
    NeuronGroup,
    Layer,
}

/// Neuron range of group `g` when `n` neurons are split into `groups`
/// contiguous blocks; the last block absorbs the remainder.
pub fn group_range(n: usize, groups: usize, g: usize) -> Range<usize> {
    let base = n / groups;
    let start = g * base;
    let end = if g + 1 == groups { n } else { start + base };
    start..end
}

/// Effective group count for a layer with `n` neurons: at most one group per
/// neuron.
pub fn effective_groups(n: usize, requested: usize) -> usize {
    requested.min(n).max(1)
}

/// Modules zeroed at forward time. The model itself is never touched.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationSet {
    ids: BTreeSet<ModuleId>,
}

impl AblationSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn single(id: ModuleId) -> Self {
        let mut s = Self::new();
        s.insert(id);
        s
    }

    pub fn insert(&mut self, id: ModuleId) {
        self.ids.insert(id);
    }

    pub fn contains(&self, id: &ModuleId) -> bool {
        self.ids.contains(id)
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ModuleId> {
        self.ids.iter()
    }

    pub fn touches(&self, enc: Encoder) -> bool {
        self.ids.iter().any(|id| id.encoder() == enc)
    }
}

impl FromIterator<ModuleId> for AblationSet {
    fn from_iter<T: IntoIterator<Item = ModuleId>>(iter: T) -> Self {
        Self {
            ids: iter.into_iter().collect(),
        }
    }
}
