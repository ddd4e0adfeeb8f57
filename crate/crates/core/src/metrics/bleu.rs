use std::collections::BTreeMap;

use super::{ngram_counts, ngram_order, MetricsError};

/// Clipped match counts and candidate n-gram totals per order, plus the
/// candidate length and closest reference length.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BleuCounts {
    pub matched: Vec<usize>,
    pub total: Vec<usize>,
    pub cand_len: usize,
    pub ref_len: usize,
}

impl BleuCounts {
    fn add(&mut self, other: &BleuCounts) {
        if self.matched.is_empty() {
            self.matched = vec![0; other.matched.len()];
            self.total = vec![0; other.total.len()];
        }
        for n in 0..other.matched.len() {
            self.matched[n] += other.matched[n];
            self.total[n] += other.total[n];
        }
        self.cand_len += other.cand_len;
        self.ref_len += other.ref_len;
    }

    fn brevity_penalty(&self) -> f64 {
        if self.cand_len == 0 {
            0.0
        } else if self.cand_len > self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.cand_len as f64).exp()
        }
    }
}

/// Reference length closest to `cand_len`, preferring the shorter on ties.
fn closest_ref_len<S: AsRef<str>>(cand_len: usize, refs: &[Vec<S>]) -> usize {
    refs.iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(cand_len), r))
        .unwrap_or(0)
}

fn counts<S: AsRef<str>, T: AsRef<str>>(cand: &[S], refs: &[Vec<T>], max_n: usize) -> Result<BleuCounts, MetricsError> {
    if refs.is_empty() {
        return Err(MetricsError::EmptyReferences);
    }
    let cand_counts = ngram_counts(cand, max_n);
    let mut max_ref: BTreeMap<String, usize> = BTreeMap::new();
    for r in refs {
        for (g, c) in ngram_counts(r, max_n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let mut matched = vec![0; max_n];
    for (g, &c) in &cand_counts {
        let clip = max_ref.get(g).copied().unwrap_or(0);
        matched[ngram_order(g) - 1] += c.min(clip);
    }
    let total = (1..=max_n).map(|n| (cand.len() + 1).saturating_sub(n)).collect();
    Ok(BleuCounts { matched, total, cand_len: cand.len(), ref_len: closest_ref_len(cand.len(), refs) })
}

/// Modified n-gram precision as `(clipped matches, candidate n-grams)`.
pub fn modified_precision<S: AsRef<str>, T: AsRef<str>>(
    cand: &[S],
    refs: &[Vec<T>],
    n: usize,
) -> Result<(usize, usize), MetricsError> {
    let c = counts(cand, refs, n)?;
    Ok((c.matched[n - 1], c.total[n - 1]))
}

/// Sentence-level BLEU-`max_n` with add-one smoothing of zero matches for
/// orders two and up.
pub fn sentence_bleu<S: AsRef<str>, T: AsRef<str>>(cand: &[S], refs: &[Vec<T>], max_n: usize) -> Result<f64, MetricsError> {
    let c = counts(cand, refs, max_n)?;
    if cand.is_empty() || c.matched[0] == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..max_n {
        let p = if c.matched[n] == 0 {
            1.0 / (c.total[n] as f64 + 1.0)
        } else {
            c.matched[n] as f64 / c.total[n] as f64
        };
        log_sum += p.ln();
    }
    Ok(c.brevity_penalty() * (log_sum / max_n as f64).exp())
}

/// Corpus-level BLEU-1 through BLEU-`max_n` from pooled counts.
pub fn corpus_bleu<S: AsRef<str>, T: AsRef<str>>(
    cands: &[Vec<S>],
    refs: &[Vec<Vec<T>>],
    max_n: usize,
) -> Result<Vec<f64>, MetricsError> {
    if cands.len() != refs.len() {
        return Err(MetricsError::Misaligned(cands.len(), refs.len()));
    }
    let mut pooled = BleuCounts::default();
    for (c, r) in cands.iter().zip(refs) {
        pooled.add(&counts(c, r, max_n)?);
    }
    if pooled.matched.is_empty() {
        return Ok(vec![0.0; max_n]);
    }
    let bp = pooled.brevity_penalty();
    let mut out = Vec::with_capacity(max_n);
    let mut log_sum = 0.0;
    let mut zero = false;
    for n in 0..max_n {
        if pooled.matched[n] == 0 {
            zero = true;
        } else {
            log_sum += (pooled.matched[n] as f64 / pooled.total[n] as f64).ln();
        }
        out.push(if zero { 0.0 } else { bp * (log_sum / (n + 1) as f64).exp() });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        super::super::tokenize(s)
    }

    #[test]
    fn identical_candidate_scores_one() {
        let c = toks("a large red circle on a blue background");
        assert!((sentence_bleu(&c, &[c.clone()], 4).unwrap() - 1.0).abs() < 1e-15);
        assert!((corpus_bleu(&[c.clone()], &[vec![c.clone()]], 4).unwrap()[3] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn no_overlap_scores_zero() {
        let s = sentence_bleu(&toks("red blue"), &[toks("circle square")], 4).unwrap();
        assert_eq!(s, 0.0);
        assert_eq!(sentence_bleu(&Vec::<String>::new(), &[toks("a")], 4).unwrap(), 0.0);
    }

    #[test]
    fn clipping_example() {
        let (m, t) = modified_precision(&toks("the the the"), &[toks("the cat")], 1).unwrap();
        assert_eq!((m, t), (1, 3));
    }

    #[test]
    fn empty_references_rejected() {
        let none: Vec<Vec<String>> = Vec::new();
        assert_eq!(sentence_bleu(&toks("a"), &none, 4), Err(MetricsError::EmptyReferences));
    }

    #[test]
    fn brevity_penalty_applies_to_short_candidates() {
        // 2-word candidate against a 4-word reference, all n-grams it has match
        let s = sentence_bleu(&toks("a b"), &[toks("a b c d")], 1).unwrap();
        assert!((s - (1.0f64 - 2.0).exp()).abs() < 1e-15);
    }

    #[test]
    fn corpus_scores_are_bounded() {
        let cands = vec![toks("a red circle"), toks("the blue the square")];
        let refs = vec![vec![toks("a red circle on blue")], vec![toks("a blue square"), toks("blue square")]];
        for s in corpus_bleu(&cands, &refs, 4).unwrap() {
            assert!((0.0..=1.0).contains(&s));
        }
    }
}
