use crate::data::{FeatureBundle, PAD};
use crate::error::{Error, Result};
use crate::model::{Dlct, ForwardCtx};
use crate::numerics::Tape;

use super::beam::{decode_example, strip_end};
use super::loss::{shift_right, weighted_log_likelihood};

/// Reward minus the mean reward of the beam, computed as the mean of pairwise
/// differences so that equal rewards give exact zeros and two candidates get
/// exactly opposite advantages.
pub fn advantages(rewards: &[f64]) -> Vec<f64> {
    let k = rewards.len() as f64;
    rewards.iter().map(|ri| rewards.iter().map(|rj| ri - rj).sum::<f64>() / k).collect()
}

/// Gradient of one example's self-critical loss.
#[derive(Debug, Clone)]
pub struct ScstSample {
    pub rewards: Vec<f64>,
    /// `-(1/k) sum_i a_i log p(y_i)` at the current parameters.
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
}

/// Decodes `k` beam candidates for `bundle`, scores each with `reward` (which
/// receives word ids without the end marker) and returns the gradient of
/// `-(1/k) sum_i (r_i - mean r) log p(y_i)`.
pub fn scst_sample<R>(model: &Dlct, bundle: &FeatureBundle, k: usize, reward: R) -> Result<ScstSample>
where
    R: Fn(&[usize]) -> Result<f64>,
{
    if k < 2 {
        return Err(Error::Config(format!("SCST needs at least 2 beam candidates, got {k}")));
    }
    let beam = decode_example(model, bundle, k)?;
    let rewards = beam.sequences.iter().map(|s| reward(strip_end(s))).collect::<Result<Vec<_>>>()?;
    let adv = advantages(&rewards);

    let seqs: Vec<&[usize]> = beam.sequences.iter().map(Vec::as_slice).collect();
    let (inputs, targets) = shift_right(&seqs);
    let weights = targets
        .iter()
        .zip(&adv)
        .flat_map(|(t, &a)| t.iter().map(move |&y| if y == PAD { 0.0 } else { a }))
        .collect();

    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape, true);
    let mut ctx = ForwardCtx::default();
    let memory = model.encode(&mut tape, &bound, bundle, &mut ctx)?;
    let logits = model.decode(&mut tape, &bound, memory, &inputs, &mut ctx)?;
    let loss = weighted_log_likelihood(&mut tape, logits, &targets, weights, -1.0 / k as f64)?;
    tape.backward(loss)?;
    Ok(ScstSample { rewards, loss: tape.value(loss).item(), grads: bound.grads(&tape) })
}
