use super::config::{CrossMode, FeatureMode, ModelConfig};
use super::params::{AttnIds, Bound, FfnIds, Init, LinearIds, NormIds, ParamId};
use super::{Dlct, ForwardCtx, Sublayer};
use crate::attention::{mhcra, mhlcca, AttentionInputs, AttentionMask};
use crate::data::FeatureBundle;
use crate::error::{Error, Result};
use crate::geometry::{self, AlignmentGraph, BoundingBox, GeometryBias, GEOMETRY_EMBED_DIM};
use crate::numerics::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub(crate) struct InputIds {
    proj: LinearIds,
    norm: NormIds,
}

/// Attention sublayer followed by a feed-forward sublayer.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Block {
    attn: AttnIds,
    ffn: FfnIds,
}

impl Block {
    fn new(init: &mut Init, name: &str, c: &ModelConfig) -> Self {
        Self { attn: init.attention(&format!("{name}.attn"), c.d_model), ffn: init.ffn(&format!("{name}.ffn"), c.d_model, c.d_ff) }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct DualLayer {
    region: Block,
    grid: Block,
    /// Region-from-grid and grid-from-region blocks.
    cross: Option<(Block, Block)>,
}

#[derive(Debug, Clone)]
pub(crate) enum Layers {
    Dual(Vec<DualLayer>),
    Single(Vec<Block>),
}

#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct GeometryIds {
    w_emb: Option<ParamId>,
    rr: Option<ParamId>,
    gg: Option<ParamId>,
    rg: Option<ParamId>,
    gr: Option<ParamId>,
    joint: Option<ParamId>,
}

#[derive(Debug, Clone)]
pub(crate) struct EncoderIds {
    region_in: Option<InputIds>,
    grid_in: Option<InputIds>,
    geometry: GeometryIds,
    layers: Layers,
}

impl EncoderIds {
    pub fn new(init: &mut Init, c: &ModelConfig) -> Self {
        let d = c.d_model;
        let v = c.variant;
        let uses_regions = v.features != FeatureMode::GridOnly;
        let uses_grids = v.features != FeatureMode::RegionOnly;
        let input = |init: &mut Init, name: &str, raw: usize| InputIds {
            proj: init.linear(&format!("{name}.proj"), raw, d),
            norm: init.norm(&format!("{name}.norm"), d),
        };
        let region_in = uses_regions.then(|| input(init, "enc.region_in", c.region_dim));
        let grid_in = uses_grids.then(|| input(init, "enc.grid_in", c.grid_dim));

        let mut geometry = GeometryIds::default();
        if v.uses_absolute() && uses_regions {
            geometry.w_emb = Some(init.matrix("enc.region_pos", d, 4));
        }
        if v.uses_relative() {
            let mut w_g = |name: &str| Some(init.matrix(&format!("enc.geometry.{name}"), c.heads, GEOMETRY_EMBED_DIM));
            match v.features {
                FeatureMode::Dual => {
                    geometry.rr = w_g("rr");
                    geometry.gg = w_g("gg");
                    if v.cross != CrossMode::NoLcca {
                        geometry.rg = w_g("rg");
                        geometry.gr = w_g("gr");
                    }
                }
                FeatureMode::RegionOnly => geometry.rr = w_g("rr"),
                FeatureMode::GridOnly => geometry.gg = w_g("gg"),
                FeatureMode::Concat => geometry.joint = w_g("joint"),
            }
        }

        let layers = if v.features == FeatureMode::Dual {
            Layers::Dual(
                (0..c.layers)
                    .map(|l| DualLayer {
                        region: Block::new(init, &format!("enc.{l}.dwsa_r"), c),
                        grid: Block::new(init, &format!("enc.{l}.dwsa_g"), c),
                        cross: (v.cross != CrossMode::NoLcca).then(|| {
                            (Block::new(init, &format!("enc.{l}.lcca_r"), c), Block::new(init, &format!("enc.{l}.lcca_g"), c))
                        }),
                    })
                    .collect(),
            )
        } else {
            Layers::Single((0..c.layers).map(|l| Block::new(init, &format!("enc.{l}.self"), c)).collect())
        };
        Self { region_in, grid_in, geometry, layers }
    }
}

/// Per-example positional signals, computed once and shared by every layer.
struct Geometry {
    rpe: Option<Var>,
    gpe: Option<Var>,
    rr: Option<GeometryBias>,
    gg: Option<GeometryBias>,
    rg: Option<GeometryBias>,
    gr: Option<GeometryBias>,
}

fn embed_relations(tape: &mut Tape, queries: &[BoundingBox], keys: &[BoundingBox]) -> Result<Var> {
    let raw = geometry::relative_geometry_matrix(queries, keys);
    Ok(tape.constant(geometry::geometry_embedding(&raw)?))
}

fn bias(tape: &mut Tape, b: &Bound, w: Option<ParamId>, embedded: impl FnOnce(&mut Tape) -> Result<Var>) -> Result<Option<GeometryBias>> {
    match w {
        None => Ok(None),
        Some(id) => {
            let e = embedded(tape)?;
            Ok(Some(geometry::relative_geometry_embed(tape, e, b.var(id))?))
        }
    }
}

impl Dlct {
    fn check_bundle(&self, bundle: &FeatureBundle) -> Result<()> {
        let c = &self.config;
        if bundle.layout != c.grid {
            return Err(Error::Config(format!("features use a {} grid, model expects {}", bundle.layout, c.grid)));
        }
        if bundle.region_dim() != c.region_dim || bundle.grid_dim() != c.grid_dim {
            return Err(Error::Config(format!(
                "feature widths {}/{} differ from configured {}/{}",
                bundle.region_dim(),
                bundle.grid_dim(),
                c.region_dim,
                c.grid_dim
            )));
        }
        Ok(())
    }

    fn project(&self, tape: &mut Tape, b: &Bound, ids: &InputIds, raw: &Tensor) -> Result<Var> {
        let x = tape.constant(raw.clone());
        let h = ids.proj.apply(tape, b, x)?;
        let h = tape.relu(h)?;
        ids.norm.apply(tape, b, h)
    }

    fn self_block(
        &self,
        tape: &mut Tape,
        b: &Bound,
        block: &Block,
        x: Var,
        pos: Option<Var>,
        omega: Option<GeometryBias>,
        ctx: &mut ForwardCtx,
        tag: (usize, Sublayer),
    ) -> Result<Var> {
        let inputs = AttentionInputs::new(x, x, x).with_positions(pos, pos).with_omega(omega);
        let a = mhcra(tape, &inputs, &block.attn.vars(b), self.config.heads, ctx.dropout())?;
        ctx.record(tape, tag.0, tag.1, a.weights);
        let h = block.attn.norm.residual(tape, b, x, a.values)?;
        block.ffn.block(tape, b, h, ctx.dropout())
    }

    #[allow(clippy::too_many_arguments)]
    fn cross_block(
        &self,
        tape: &mut Tape,
        b: &Bound,
        block: &Block,
        q: Var,
        kv: Var,
        pos: (Option<Var>, Option<Var>),
        omega: Option<GeometryBias>,
        mask: &AttentionMask,
        ctx: &mut ForwardCtx,
        tag: (usize, Sublayer),
    ) -> Result<Var> {
        let inputs = AttentionInputs::new(q, kv, kv).with_positions(pos.0, pos.1).with_omega(omega).with_mask(mask);
        let a = mhlcca(tape, &inputs, &block.attn.vars(b), self.config.heads, ctx.dropout())?;
        ctx.record(tape, tag.0, tag.1, a.weights);
        let h = block.attn.norm.residual(tape, b, q, a.values)?;
        block.ffn.block(tape, b, h, ctx.dropout())
    }

    /// Encoder output `[n_nodes, d_model]`; in the dual variants regions come
    /// first, then grid cells in row-major order.
    pub fn encode(&self, tape: &mut Tape, b: &Bound, bundle: &FeatureBundle, ctx: &mut ForwardCtx) -> Result<Var> {
        self.check_bundle(bundle)?;
        let enc = &self.encoder;
        let g = &enc.geometry;
        let cells = self.config.grid.cell_boxes();
        let boxes = &bundle.boxes;
        let hr = enc.region_in.as_ref().map(|ids| self.project(tape, b, ids, &bundle.regions)).transpose()?;
        let hg = enc.grid_in.as_ref().map(|ids| self.project(tape, b, ids, &bundle.grids)).transpose()?;

        let absolute = self.config.variant.uses_absolute();
        let geo = Geometry {
            rpe: g.w_emb.map(|w| geometry::region_positional_encoding(tape, boxes, b.var(w))).transpose()?,
            gpe: (absolute && hg.is_some()).then(|| tape.constant(self.gpe.clone())),
            rr: bias(tape, b, g.rr, |t| embed_relations(t, boxes, boxes))?,
            gg: bias(tape, b, g.gg, |t| Ok(t.constant(self.grid_geometry.clone())))?,
            rg: bias(tape, b, g.rg, |t| embed_relations(t, boxes, &cells))?,
            gr: bias(tape, b, g.gr, |t| embed_relations(t, &cells, boxes))?,
        };

        match &enc.layers {
            Layers::Dual(layers) => {
                let (mut hr, mut hg) = (hr.expect("dual has regions"), hg.expect("dual has grids"));
                let graph = match self.config.variant.cross {
                    CrossMode::Cbg => AlignmentGraph::complete_bipartite(boxes.len(), cells.len()),
                    _ => AlignmentGraph::build(boxes, self.config.grid),
                };
                let r2g = AttentionMask::region_to_grid(&graph)?;
                let g2r = AttentionMask::grid_to_region(&graph)?;
                for (l, layer) in layers.iter().enumerate() {
                    let cr = self.self_block(tape, b, &layer.region, hr, geo.rpe, geo.rr, ctx, (l, Sublayer::DwsaR))?;
                    let cg = self.self_block(tape, b, &layer.grid, hg, geo.gpe, geo.gg, ctx, (l, Sublayer::DwsaG))?;
                    match &layer.cross {
                        Some((xr, xg)) => {
                            hr = self.cross_block(tape, b, xr, cr, cg, (geo.rpe, geo.gpe), geo.rg, &r2g, ctx, (l, Sublayer::LccaRG))?;
                            hg = self.cross_block(tape, b, xg, cg, cr, (geo.gpe, geo.rpe), geo.gr, &g2r, ctx, (l, Sublayer::LccaGR))?;
                        }
                        None => (hr, hg) = (cr, cg),
                    }
                }
                Ok(tape.concat(&[hr, hg], 0)?)
            }
            Layers::Single(layers) => {
                let (mut h, pos, omega) = match (hr, hg) {
                    (Some(hr), None) => (hr, geo.rpe, geo.rr),
                    (None, Some(hg)) => (hg, geo.gpe, geo.gg),
                    (Some(hr), Some(hg)) => {
                        let h = tape.concat(&[hr, hg], 0)?;
                        let pos = match (geo.rpe, geo.gpe) {
                            (Some(r), Some(gp)) => Some(tape.concat(&[r, gp], 0)?),
                            _ => None,
                        };
                        let all: Vec<BoundingBox> = boxes.iter().chain(&cells).copied().collect();
                        let omega = bias(tape, b, g.joint, |t| embed_relations(t, &all, &all))?;
                        (h, pos, omega)
                    }
                    (None, None) => unreachable!("every variant reads some features"),
                };
                for (l, block) in layers.iter().enumerate() {
                    h = self.self_block(tape, b, block, h, pos, omega, ctx, (l, Sublayer::DwsaR))?;
                }
                Ok(h)
            }
        }
    }

    /// Number of encoder output rows for `bundle`.
    pub fn memory_len(&self, bundle: &FeatureBundle) -> usize {
        match self.config.variant.features {
            FeatureMode::GridOnly => bundle.layout.len(),
            FeatureMode::RegionOnly => bundle.n_regions(),
            _ => bundle.n_regions() + bundle.layout.len(),
        }
    }
}
