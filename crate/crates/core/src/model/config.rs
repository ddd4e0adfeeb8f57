use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::GridLayout;

/// Which visual features feed the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMode {
    /// Region and grid streams with cross-level attention.
    #[default]
    Dual,
    GridOnly,
    RegionOnly,
    /// Both levels joined into one sequence under plain self-attention.
    Concat,
}

/// How the two streams exchange information in [`FeatureMode::Dual`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CrossMode {
    /// Cross attention restricted to the geometric alignment graph.
    #[default]
    Lcca,
    /// No cross-level sublayers.
    NoLcca,
    /// Cross attention over the complete bipartite graph.
    Cbg,
}

/// Positional signals inside encoder attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PositionMode {
    /// Absolute encodings plus the relative geometry bias.
    #[default]
    Cra,
    /// Neither absolute nor relative positions.
    NoCra,
    /// Absolute encodings only.
    PeOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Variant {
    pub features: FeatureMode,
    pub cross: CrossMode,
    pub position: PositionMode,
}

impl Variant {
    pub fn validate(&self) -> Result<()> {
        if self.features != FeatureMode::Dual && self.cross != CrossMode::Lcca {
            return Err(Error::Config(format!(
                "cross-level option {:?} needs dual features, not {:?}",
                self.cross, self.features
            )));
        }
        Ok(())
    }

    pub fn uses_absolute(&self) -> bool {
        self.position != PositionMode::NoCra
    }

    pub fn uses_relative(&self) -> bool {
        self.position == PositionMode::Cra
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    /// Longest decoder input, start marker included.
    pub max_len: usize,
    pub grid: GridLayout,
    pub dropout: f64,
    pub region_dim: usize,
    pub grid_dim: usize,
    #[serde(default)]
    pub variant: Variant,
}

impl ModelConfig {
    /// 512-wide, 8 heads, 3 layers, 7×7 grid, 2048-d raw features.
    pub fn reference(vocab_size: usize) -> Self {
        Self {
            d_model: 512,
            heads: 8,
            layers: 3,
            d_ff: 2048,
            vocab_size,
            max_len: 20,
            grid: GridLayout::default(),
            dropout: 0.1,
            region_dim: 2048,
            grid_dim: 2048,
            variant: Variant::default(),
        }
    }

    /// 64-wide, 4 heads, 2 layers, 4×4 grid, no dropout.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            d_model: 64,
            heads: 4,
            layers: 2,
            d_ff: 128,
            vocab_size,
            max_len: 16,
            grid: GridLayout::new(4, 4).expect("positive"),
            dropout: 0.0,
            region_dim: crate::data::REGION_DIM,
            grid_dim: crate::data::GRID_DIM,
            variant: Variant::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} is not divisible by {} heads", self.d_model, self.heads));
        }
        if self.d_model % 4 != 0 {
            return bad(format!("d_model {} is not divisible by 4", self.d_model));
        }
        if self.vocab_size < 4 {
            return bad(format!("vocabulary of {} leaves no words", self.vocab_size));
        }
        if self.max_len < 2 || self.d_ff == 0 || self.region_dim == 0 || self.grid_dim == 0 {
            return bad("max_len must be at least 2; d_ff and feature widths must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        self.variant.validate()
    }
}
