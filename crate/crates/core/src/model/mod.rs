//! The captioning network: a dual-level encoder over region and grid
//! features and a causal decoder over the concatenated encoder output.

mod config;
mod decoder;
mod encoder;
mod params;

pub use config::{CrossMode, FeatureMode, ModelConfig, PositionMode, Variant};
pub use decoder::DecoderCache;
pub use params::{Bound, ParamId, ParamStore};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::Dropout;
use crate::error::{Error, Result};
use crate::geometry::{self, GEOMETRY_EMBED_DIM};
use crate::numerics::Tensor;
use decoder::DecoderIds;
use encoder::EncoderIds;
use params::Init;

/// Attention block whose weights a [`ForwardCtx`] can record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sublayer {
    /// Region self-attention (or the single stream in one-level variants).
    DwsaR,
    DwsaG,
    /// Regions attending to grids.
    LccaRG,
    /// Grids attending to regions.
    LccaGR,
    DecSelf,
    DecCross,
}

impl Sublayer {
    pub fn name(self) -> &'static str {
        match self {
            Sublayer::DwsaR => "dwsa_r",
            Sublayer::DwsaG => "dwsa_g",
            Sublayer::LccaRG => "lcca_r2g",
            Sublayer::LccaGR => "lcca_g2r",
            Sublayer::DecSelf => "dec_self",
            Sublayer::DecCross => "dec_cross",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub layer: usize,
    pub sublayer: Sublayer,
    /// `[heads, n_q, n_k]`, with a leading batch axis for decoder blocks.
    pub weights: Tensor,
}

/// Per-forward options: dropout stream and optional weight recording.
#[derive(Debug, Default)]
pub struct ForwardCtx {
    pub dropout: Option<Dropout>,
    pub records: Option<Vec<AttentionRecord>>,
}

impl ForwardCtx {
    pub fn recording() -> Self {
        Self { dropout: None, records: Some(Vec::new()) }
    }

    pub fn with_dropout(p: f64, rng: ChaCha8Rng) -> Self {
        Self { dropout: (p > 0.0).then(|| Dropout::new(p, rng)), records: None }
    }

    pub(crate) fn dropout(&mut self) -> Option<&mut Dropout> {
        self.dropout.as_mut()
    }

    pub(crate) fn record(&mut self, tape: &crate::numerics::Tape, layer: usize, sublayer: Sublayer, w: crate::numerics::Var) {
        if let Some(r) = self.records.as_mut() {
            r.push(AttentionRecord { layer, sublayer, weights: tape.value(w).clone() });
        }
    }
}

/// Model parameters plus the structure that interprets them.
#[derive(Debug, Clone)]
pub struct Dlct {
    config: ModelConfig,
    params: ParamStore,
    encoder: EncoderIds,
    decoder: DecoderIds,
    /// Grid positional encoding `[n_grids, d_model]`.
    gpe: Tensor,
    /// Embedded grid-to-grid relations `[n_grids, n_grids, 64]`.
    grid_geometry: Tensor,
}

impl Dlct {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::default();
        let mut init = Init { store: &mut params, rng: ChaCha8Rng::seed_from_u64(seed) };
        let encoder = EncoderIds::new(&mut init, &config);
        let decoder = DecoderIds::new(&mut init, &config);
        let gpe = geometry::grid_positional_encoding(config.grid, config.d_model)?;
        let cells = config.grid.cell_boxes();
        let grid_geometry = geometry::geometry_embedding(&geometry::relative_geometry_matrix(&cells, &cells))?;
        debug_assert_eq!(grid_geometry.shape()[2], GEOMETRY_EMBED_DIM);
        Ok(Self { config, params, encoder, decoder, gpe, grid_geometry })
    }

    /// Rebuilds a model around stored parameters, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if params.names() != model.params.names() {
            return Err(Error::Checkpoint("parameter names do not match the configuration".into()));
        }
        for (a, b) in params.tensors().iter().zip(model.params.tensors()) {
            if a.shape() != b.shape() {
                return Err(Error::Checkpoint(format!("parameter shape {:?} where {:?} expected", a.shape(), b.shape())));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}

#[cfg(test)]
mod tests;
