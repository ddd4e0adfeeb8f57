use crate::data::{BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Teacher-forced cross-entropy: `-sum_t log p(y_t | y_<t)` per sequence,
/// averaged over the batch. `logits` is `[B, T, V]`; `targets` holds `B`
/// rows of length `T` where [`PAD`] positions are ignored.
pub fn xe_loss(tape: &mut Tape, logits: Var, targets: &[Vec<usize>]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 3 || shape[0] != targets.len() || targets.iter().any(|t| t.len() != shape[1]) {
        return Err(Error::Config(format!("targets do not match logits of shape {shape:?}")));
    }
    let vocab = shape[2];
    if let Some(&bad) = targets.iter().flatten().find(|&&y| y >= vocab) {
        return Err(Error::Config(format!("target id {bad} outside vocabulary of {vocab}")));
    }
    let weights: Vec<f64> = targets.iter().flatten().map(|&y| if y == PAD { 0.0 } else { 1.0 }).collect();
    weighted_log_likelihood(tape, logits, targets, weights, -1.0 / targets.len() as f64)
}

/// `scale * sum_{b,t} w[b,t] * log p(targets[b][t])`.
pub(crate) fn weighted_log_likelihood(
    tape: &mut Tape,
    logits: Var,
    targets: &[Vec<usize>],
    weights: Vec<f64>,
    scale: f64,
) -> Result<Var> {
    let (b, t) = (targets.len(), targets[0].len());
    let lp = tape.log_softmax(logits)?;
    let flat: Vec<usize> = targets.concat();
    let picked = tape.pick(lp, &flat)?;
    let w = tape.constant(Tensor::new(vec![b, t], weights)?);
    let masked = tape.mul(picked, w)?;
    let total = tape.sum(masked)?;
    Ok(tape.scale(total, scale)?)
}

/// Decoder inputs and targets for a batch of word sequences, padded to a
/// common length. Inputs start with [`BOS`]; targets end with [`EOS`] unless
/// the sequence already carries it.
pub fn teacher_forcing(sequences: &[&[usize]]) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let with_end: Vec<Vec<usize>> = sequences
        .iter()
        .map(|s| {
            let mut v = s.to_vec();
            if v.last() != Some(&EOS) {
                v.push(EOS);
            }
            v
        })
        .collect();
    let refs: Vec<&[usize]> = with_end.iter().map(Vec::as_slice).collect();
    shift_right(&refs)
}

/// Inputs `[BOS, y_1 .. y_{L-1}]` and targets `y` for generated sequences,
/// padded to a common length.
pub fn shift_right(sequences: &[&[usize]]) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let len = sequences.iter().map(|s| s.len()).max().unwrap_or(0).max(1);
    let mut inputs = Vec::with_capacity(sequences.len());
    let mut targets = Vec::with_capacity(sequences.len());
    for s in sequences {
        let mut i = vec![BOS];
        i.extend_from_slice(&s[..s.len().saturating_sub(1)]);
        i.resize(len, PAD);
        let mut t = s.to_vec();
        t.resize(len, PAD);
        inputs.push(i);
        targets.push(t);
    }
    (inputs, targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::GradCheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn loss_of(logits: Tensor, targets: &[Vec<usize>]) -> f64 {
        let mut tape = Tape::new();
        let l = tape.constant(logits);
        let out = xe_loss(&mut tape, l, targets).unwrap();
        tape.value(out).item()
    }

    #[test]
    fn uniform_logits_cost_length_times_log_vocab() {
        let (t, v) = (4, 7);
        let loss = loss_of(Tensor::zeros(&[2, t, v]), &[vec![3, 4, 5, 2], vec![6, 6, 3, 2]]);
        assert!((loss - t as f64 * (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_approach_zero() {
        let targets = vec![vec![2, 1, 0]];
        let mut last = f64::INFINITY;
        for scale in [1.0, 10.0, 100.0] {
            let logits = Tensor::from_fn(&[1, 3, 3], |i| if i % 3 == targets[0][i / 3] { scale } else { 0.0 });
            // PAD at position 2 is masked, so only the first two steps count
            let l = loss_of(logits, &targets);
            assert!(l < last);
            last = l;
        }
        assert!(last < 1e-40);
    }

    #[test]
    fn hand_computed_two_step_case() {
        let logits = || Tensor::new(vec![1, 2, 3], vec![1.0, 2.0, 3.0, 0.5, 0.0, -0.5]).unwrap();
        let lse = |a: f64, b: f64, c: f64| (a.exp() + b.exp() + c.exp()).ln();
        let step1 = -(2.0 - lse(1.0, 2.0, 3.0));
        let step2 = -(-0.5 - lse(0.5, 0.0, -0.5));
        assert!((loss_of(logits(), &[vec![1, 2]]) - (step1 + step2)).abs() < 1e-12);
        // a PAD target contributes nothing
        assert!((loss_of(logits(), &[vec![1, PAD]]) - step1).abs() < 1e-12);
    }

    #[test]
    fn out_of_vocabulary_target_is_rejected() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::zeros(&[1, 2, 4]));
        assert!(matches!(xe_loss(&mut tape, l, &[vec![1, 4]]), Err(Error::Config(_))));
        assert!(xe_loss(&mut tape, l, &[vec![1]]).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::from_fn(&[2, 3, 5], |_| rng.gen_range(-2.0..2.0));
            let targets: Vec<Vec<usize>> = (0..2).map(|_| (0..3).map(|_| rng.gen_range(0..5)).collect()).collect();
            let f = |tape: &mut Tape, v: Var| xe_loss(tape, v, &targets).map_err(|e| match e {
                Error::Numerics(n) => n,
                other => panic!("{other}"),
            });
            let report = GradCheck::default().run(f, &x).unwrap();
            assert!(report.passed, "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn teacher_forcing_shifts_and_pads() {
        let (i, t) = teacher_forcing(&[&[5, 6, 7], &[8]]);
        assert_eq!(i, vec![vec![BOS, 5, 6, 7], vec![BOS, 8, PAD, PAD]]);
        assert_eq!(t, vec![vec![5, 6, 7, EOS], vec![8, EOS, PAD, PAD]]);
        let (i, t) = teacher_forcing(&[&[5, EOS]]);
        assert_eq!((i, t), (vec![vec![BOS, 5]], vec![vec![5, EOS]]));
    }
}
