use std::cmp::Ordering;

use crate::data::{FeatureBundle, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::{Bound, DecoderCache, Dlct, ForwardCtx};
use crate::numerics::Tape;

/// Source of next-token log-probabilities for incremental decoding.
pub trait StepDecoder {
    fn vocab_size(&self) -> usize;

    /// Consumes `tokens[i]` on top of the state of beam `parents[i]` from the
    /// previous call and returns one log-probability row per beam.
    fn step(&mut self, parents: &[usize], tokens: &[usize]) -> Result<Vec<Vec<f64>>>;
}

/// Final hypotheses of a beam search, best first. Sequences exclude the start
/// marker and include the end marker when one was produced.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedBeam {
    pub sequences: Vec<Vec<usize>>,
    pub log_probs: Vec<f64>,
}

impl DecodedBeam {
    /// Best sequence with the end marker stripped.
    pub fn best_words(&self) -> &[usize] {
        strip_end(&self.sequences[0])
    }
}

pub fn strip_end(seq: &[usize]) -> &[usize] {
    match seq.last() {
        Some(&EOS) => &seq[..seq.len() - 1],
        _ => seq,
    }
}

#[derive(Debug, Clone)]
struct Hyp {
    tokens: Vec<usize>,
    log_prob: f64,
    finished: bool,
    /// Row of this hypothesis in the decoder state after the latest step.
    row: usize,
}

struct Candidate {
    log_prob: f64,
    token: usize,
    parent: usize,
}

/// Descending log-probability, then ascending token id, then ascending parent index.
fn rank(a: &Candidate, b: &Candidate) -> Ordering {
    b.log_prob.total_cmp(&a.log_prob).then(a.token.cmp(&b.token)).then(a.parent.cmp(&b.parent))
}

/// Length-wise beam search producing at most `max_len` tokens per sequence.
///
/// Finished hypotheses stay in the beam with their score frozen and compete
/// with expansions under the token id of the end marker. Candidates of zero
/// probability are never expanded; when fewer than `k` remain the result is
/// padded with copies of the best hypothesis.
pub fn beam_search<D: StepDecoder>(decoder: &mut D, k: usize, max_len: usize) -> Result<DecodedBeam> {
    if k == 0 {
        return Err(Error::Config("beam size must be at least 1".into()));
    }
    if max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    let vocab = decoder.vocab_size();
    let mut beam = vec![Hyp { tokens: Vec::new(), log_prob: 0.0, finished: false, row: 0 }];
    let mut step_parents = vec![0];
    let mut step_tokens = vec![BOS];

    for len in 0..max_len {
        let rows = decoder.step(&step_parents, &step_tokens)?;
        let mut cands = Vec::new();
        for (i, h) in beam.iter().enumerate() {
            if h.finished {
                cands.push(Candidate { log_prob: h.log_prob, token: EOS, parent: i });
                continue;
            }
            let row = &rows[h.row];
            if row.len() != vocab {
                return Err(Error::Config(format!("decoder returned {} scores for vocabulary {vocab}", row.len())));
            }
            for (tok, &lp) in row.iter().enumerate() {
                if tok == PAD || tok == BOS || lp == f64::NEG_INFINITY {
                    continue;
                }
                cands.push(Candidate { log_prob: h.log_prob + lp, token: tok, parent: i });
            }
        }
        if cands.is_empty() {
            return Err(Error::Config("decoder assigns zero probability to every token".into()));
        }
        cands.sort_by(rank);
        cands.truncate(k);

        let mut next = Vec::with_capacity(cands.len());
        step_parents.clear();
        step_tokens.clear();
        for c in &cands {
            let parent = &beam[c.parent];
            if parent.finished {
                next.push(parent.clone());
                continue;
            }
            let mut tokens = parent.tokens.clone();
            tokens.push(c.token);
            let finished = c.token == EOS;
            let row = step_parents.len();
            if !finished && len + 1 < max_len {
                step_parents.push(parent.row);
                step_tokens.push(c.token);
            }
            next.push(Hyp { tokens, log_prob: c.log_prob, finished, row });
        }
        beam = next;
        if step_tokens.is_empty() {
            break;
        }
    }

    while beam.len() < k {
        beam.push(beam[0].clone());
    }
    Ok(DecodedBeam {
        log_probs: beam.iter().map(|h| h.log_prob).collect(),
        sequences: beam.into_iter().map(|h| h.tokens).collect(),
    })
}

/// Greedy decoding: repeatedly takes the most likely token (lowest id on ties).
pub fn greedy<D: StepDecoder>(decoder: &mut D, max_len: usize) -> Result<DecodedBeam> {
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    let mut last = BOS;
    for _ in 0..max_len {
        let rows = decoder.step(&[0], &[last])?;
        let (tok, lp) = rows[0]
            .iter()
            .enumerate()
            .filter(|&(t, _)| t != PAD && t != BOS)
            .fold((usize::MAX, f64::NEG_INFINITY), |best, (t, &lp)| if lp > best.1 { (t, lp) } else { best });
        if tok == usize::MAX {
            return Err(Error::Config("decoder assigns zero probability to every token".into()));
        }
        tokens.push(tok);
        log_prob += lp;
        last = tok;
        if tok == EOS {
            break;
        }
    }
    Ok(DecodedBeam { sequences: vec![tokens], log_probs: vec![log_prob] })
}

/// Incremental decoder over a trained model and one encoded example, recorded
/// on a tape without gradients.
pub struct ModelStepper<'a> {
    model: &'a Dlct,
    tape: Tape,
    bound: Bound,
    cache: DecoderCache,
    ctx: ForwardCtx,
}

impl<'a> ModelStepper<'a> {
    pub fn new(model: &'a Dlct, bundle: &FeatureBundle) -> Result<Self> {
        Self::with_ctx(model, bundle, ForwardCtx::default())
    }

    /// Like [`ModelStepper::new`], keeping `ctx` (for example to record attention weights).
    pub fn with_ctx(model: &'a Dlct, bundle: &FeatureBundle, mut ctx: ForwardCtx) -> Result<Self> {
        let mut tape = Tape::new();
        let bound = model.params().bind(&mut tape, false);
        let memory = model.encode(&mut tape, &bound, bundle, &mut ctx)?;
        let cache = model.start_decoding(&mut tape, &bound, memory)?;
        Ok(Self { model, tape, bound, cache, ctx })
    }

    pub fn into_ctx(self) -> ForwardCtx {
        self.ctx
    }
}

impl StepDecoder for ModelStepper<'_> {
    fn vocab_size(&self) -> usize {
        self.model.config().vocab_size
    }

    fn step(&mut self, parents: &[usize], tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
        let lp = self.model.decode_step(&mut self.tape, &self.bound, &mut self.cache, parents, tokens, &mut self.ctx)?;
        let v = self.vocab_size();
        Ok(self.tape.value(lp).data().chunks(v).map(<[f64]>::to_vec).collect())
    }
}

/// Beam-search caption for one example.
pub fn decode_example(model: &Dlct, bundle: &FeatureBundle, k: usize) -> Result<DecodedBeam> {
    let mut stepper = ModelStepper::new(model, bundle)?;
    beam_search(&mut stepper, k, model.config().max_len)
}
