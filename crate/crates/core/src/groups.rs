//! Addressing of weight matrices by compression group.
//!
//! A compression group is one (component type, layer) pair. Per-head Q/K/V
//! projections belong to the same group and are compressed together; the
//! optional head index distinguishes the individual matrices inside a group.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// The six per-layer component types, in the fixed export order used by
/// heatmaps and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ComponentType {
    Q,
    K,
    V,
    AttnProj,
    MlpFc,
    MlpProj,
}

impl ComponentType {
    pub const ALL: [ComponentType; 6] = [
        ComponentType::Q,
        ComponentType::K,
        ComponentType::V,
        ComponentType::AttnProj,
        ComponentType::MlpFc,
        ComponentType::MlpProj,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ComponentType::Q => "Q",
            ComponentType::K => "K",
            ComponentType::V => "V",
            ComponentType::AttnProj => "attn_proj",
            ComponentType::MlpFc => "mlp_fc",
            ComponentType::MlpProj => "mlp_proj",
        }
    }
}

impl fmt::Display for ComponentType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ComponentType {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "Q" | "q" => Ok(ComponentType::Q),
            "K" | "k" => Ok(ComponentType::K),
            "V" | "v" => Ok(ComponentType::V),
            "attn_proj" => Ok(ComponentType::AttnProj),
            "mlp_fc" => Ok(ComponentType::MlpFc),
            "mlp_proj" => Ok(ComponentType::MlpProj),
            other => Err(format!("unknown component type '{other}'")),
        }
    }
}

/// One (layer, component) compression group. Ordering is (layer, component),
/// which is the deterministic tie-break order used throughout the harness.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct CompressionGroup {
    pub layer: usize,
    pub component: ComponentType,
}

impl CompressionGroup {
    pub fn new(layer: usize, component: ComponentType) -> Self {
        Self { layer, component }
    }

    /// All groups of an `n_layers` model in canonical (layer, component) order.
    pub fn all(n_layers: usize) -> Vec<CompressionGroup> {
        let mut out = Vec::with_capacity(6 * n_layers);
        for layer in 0..n_layers {
            for component in ComponentType::ALL {
                out.push(CompressionGroup { layer, component });
            }
        }
        out
    }
}

impl fmt::Display for CompressionGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}.{}", self.layer, self.component)
    }
}

/// Identifies a single weight matrix: its group plus the head index for
/// per-head Q/K/V projections.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct MatrixId {
    pub group: CompressionGroup,
    pub head: Option<usize>,
}

impl MatrixId {
    pub fn new(group: CompressionGroup, head: Option<usize>) -> Self {
        Self { group, head }
    }
}

impl fmt::Display for MatrixId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.head {
            Some(h) => write!(f, "{}.h{}", self.group, h),
            None => write!(f, "{}", self.group),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_ordering_is_layer_then_component() {
        let groups = CompressionGroup::all(2);
        assert_eq!(groups.len(), 12);
        let mut sorted = groups.clone();
        sorted.sort();
        assert_eq!(groups, sorted);
        assert_eq!(groups[0], CompressionGroup::new(0, ComponentType::Q));
        assert_eq!(groups[5], CompressionGroup::new(0, ComponentType::MlpProj));
        assert_eq!(groups[6], CompressionGroup::new(1, ComponentType::Q));
    }

    #[test]
    fn display_round_trip() {
        let g = CompressionGroup::new(3, ComponentType::MlpFc);
        assert_eq!(g.to_string(), "L3.mlp_fc");
        assert_eq!("mlp_fc".parse::<ComponentType>().unwrap(), ComponentType::MlpFc);
        assert!("qkv".parse::<ComponentType>().is_err());
    }
}
