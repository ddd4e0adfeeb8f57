use super::config::ModelConfig;
use super::params::{AttnIds, Bound, FfnIds, Init, LinearIds, ParamId};
use super::{Dlct, ForwardCtx, Sublayer};
use crate::attention::{attend, merge_heads, split_heads, AttentionMask};
use crate::data::BOS;
use crate::error::{Error, Result};
use crate::geometry::sinusoid;
use crate::numerics::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub(crate) struct DecoderLayer {
    self_attn: AttnIds,
    cross: AttnIds,
    ffn: FfnIds,
}

#[derive(Debug, Clone)]
pub(crate) struct DecoderIds {
    embed: ParamId,
    layers: Vec<DecoderLayer>,
    out: LinearIds,
}

impl DecoderIds {
    pub fn new(init: &mut Init, c: &ModelConfig) -> Self {
        let d = c.d_model;
        let embed = init.matrix("dec.embed", c.vocab_size, d);
        let layers = (0..c.layers)
            .map(|l| DecoderLayer {
                self_attn: init.attention(&format!("dec.{l}.self"), d),
                cross: init.attention(&format!("dec.{l}.cross"), d),
                ffn: init.ffn(&format!("dec.{l}.ffn"), d, c.d_ff),
            })
            .collect();
        let out = init.linear("dec.out", d, c.vocab_size);
        Self { embed, layers, out }
    }
}

/// Incremental decoding state for a batch of beams: projected self-attention
/// keys and values of every consumed position, and the projected encoder
/// memory.
#[derive(Debug, Clone)]
pub struct DecoderCache {
    self_kv: Vec<Option<(Var, Var)>>,
    cross_kv: Vec<(Var, Var)>,
    pos: usize,
}

impl DecoderCache {
    pub fn position(&self) -> usize {
        self.pos
    }
}

/// Sinusoidal word-position rows `[len, d]` starting at `start`.
fn positions(start: usize, len: usize, d: usize) -> Tensor {
    let data = (start..start + len).flat_map(|p| sinusoid(p as f64, d)).collect();
    Tensor::new(vec![len, d], data).expect("sized")
}

/// Copies batch entries `parents` of a cached `[B, ...]` tensor into a new constant.
fn gather_batch(tape: &mut Tape, x: Var, parents: &[usize]) -> Var {
    let t = tape.value(x);
    let per = t.numel() / t.shape()[0];
    let mut shape = t.shape().to_vec();
    shape[0] = parents.len();
    let data = parents.iter().flat_map(|&p| t.data()[p * per..(p + 1) * per].iter().copied()).collect();
    tape.constant(Tensor::new(shape, data).expect("sized"))
}

impl Dlct {
    fn project_heads(&self, tape: &mut Tape, b: &Bound, ids: &AttnIds, x: Var) -> Result<(Var, Var)> {
        let h = self.config.heads;
        let k = ids.k.apply(tape, b, x)?;
        let v = ids.v.apply(tape, b, x)?;
        Ok((split_heads(tape, k, h)?, split_heads(tape, v, h)?))
    }

    #[allow(clippy::too_many_arguments)]
    fn attend_block(
        &self,
        tape: &mut Tape,
        b: &Bound,
        ids: &AttnIds,
        x: Var,
        kv: (Var, Var),
        mask: Option<&AttentionMask>,
        ctx: &mut ForwardCtx,
        tag: (usize, Sublayer),
    ) -> Result<Var> {
        let q = ids.q.apply(tape, b, x)?;
        let q = split_heads(tape, q, self.config.heads)?;
        let a = attend(tape, q, kv.0, kv.1, None, mask, ctx.dropout())?;
        ctx.record(tape, tag.0, tag.1, a.weights);
        let merged = merge_heads(tape, a.values)?;
        let y = ids.o.apply(tape, b, merged)?;
        ids.norm.residual(tape, b, x, y)
    }

    fn embed_tokens(&self, tape: &mut Tape, b: &Bound, ids: &[usize], batch: usize, start: usize) -> Result<Var> {
        let d = self.config.d_model;
        let t = ids.len() / batch;
        let e = tape.embedding(b.var(self.decoder.embed), ids)?;
        let e = tape.reshape(e, &[batch, t, d])?;
        let p = tape.constant(positions(start, t, d));
        Ok(tape.add(e, p)?)
    }

    /// Teacher-forced logits `[B, T, vocab]` for `B` equal-length token
    /// sequences, each starting with the start marker, attending over
    /// `memory` `[N, d_model]`.
    pub fn decode(&self, tape: &mut Tape, b: &Bound, memory: Var, tokens: &[Vec<usize>], ctx: &mut ForwardCtx) -> Result<Var> {
        let batch = tokens.len();
        let t = tokens.first().map_or(0, Vec::len);
        if batch == 0 || t == 0 || tokens.iter().any(|s| s.len() != t) {
            return Err(Error::Config("decoder input must be non-empty sequences of equal length".into()));
        }
        if t > self.config.max_len {
            return Err(Error::Config(format!("sequence of {t} tokens exceeds max_len {}", self.config.max_len)));
        }
        if tokens.iter().any(|s| s[0] != BOS) {
            return Err(Error::Config("decoder input must start with the start marker".into()));
        }
        let flat: Vec<usize> = tokens.concat();
        let mut x = self.embed_tokens(tape, b, &flat, batch, 0)?;
        let causal = AttentionMask::causal(t);
        for (l, layer) in self.decoder.layers.iter().enumerate() {
            let kv = self.project_heads(tape, b, &layer.self_attn, x)?;
            x = self.attend_block(tape, b, &layer.self_attn, x, kv, Some(&causal), ctx, (l, Sublayer::DecSelf))?;
            let kv = self.project_heads(tape, b, &layer.cross, memory)?;
            x = self.attend_block(tape, b, &layer.cross, x, kv, None, ctx, (l, Sublayer::DecCross))?;
            x = layer.ffn.block(tape, b, x, ctx.dropout())?;
        }
        self.decoder.out.apply(tape, b, x)
    }

    /// Prepares incremental decoding against `memory`.
    pub fn start_decoding(&self, tape: &mut Tape, b: &Bound, memory: Var) -> Result<DecoderCache> {
        let cross_kv = self
            .decoder
            .layers
            .iter()
            .map(|layer| self.project_heads(tape, b, &layer.cross, memory))
            .collect::<Result<Vec<_>>>()?;
        Ok(DecoderCache { self_kv: vec![None; self.decoder.layers.len()], cross_kv, pos: 0 })
    }

    /// Consumes one token per beam and returns next-token log-probabilities
    /// `[beams, vocab]`. Beam `i` continues cached beam `parents[i]`.
    pub fn decode_step(
        &self,
        tape: &mut Tape,
        b: &Bound,
        cache: &mut DecoderCache,
        parents: &[usize],
        tokens: &[usize],
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let beams = tokens.len();
        if parents.len() != beams || beams == 0 {
            return Err(Error::Config("one parent per beam token required".into()));
        }
        if cache.pos >= self.config.max_len {
            return Err(Error::Config(format!("decoding past max_len {}", self.config.max_len)));
        }
        let mut x = self.embed_tokens(tape, b, tokens, beams, cache.pos)?;
        for (l, layer) in self.decoder.layers.iter().enumerate() {
            let (k_new, v_new) = self.project_heads(tape, b, &layer.self_attn, x)?;
            let kv = match cache.self_kv[l] {
                None => (k_new, v_new),
                Some((k, v)) => {
                    let (k, v) = (gather_batch(tape, k, parents), gather_batch(tape, v, parents));
                    (tape.concat(&[k, k_new], 2)?, tape.concat(&[v, v_new], 2)?)
                }
            };
            cache.self_kv[l] = Some(kv);
            x = self.attend_block(tape, b, &layer.self_attn, x, kv, None, ctx, (l, Sublayer::DecSelf))?;
            x = self.attend_block(tape, b, &layer.cross, x, cache.cross_kv[l], None, ctx, (l, Sublayer::DecCross))?;
            x = layer.ffn.block(tape, b, x, ctx.dropout())?;
        }
        cache.pos += 1;
        let logits = self.decoder.out.apply(tape, b, x)?;
        let logits = tape.reshape(logits, &[beams, self.config.vocab_size])?;
        Ok(tape.log_softmax(logits)?)
    }
}
