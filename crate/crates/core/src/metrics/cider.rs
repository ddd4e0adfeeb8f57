use std::collections::BTreeMap;

use super::{ngram_counts, ngram_order, MetricsError, MAX_N};

/// Width of the Gaussian length penalty.
pub const CIDER_SIGMA: f64 = 6.0;

/// Document frequencies over a reference corpus, where each document is the
/// reference set of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusStats {
    df: BTreeMap<String, usize>,
    n_docs: usize,
    log_docs: f64,
}

impl CorpusStats {
    pub fn build<S: AsRef<str>>(corpus: &[Vec<Vec<S>>]) -> Result<Self, MetricsError> {
        if corpus.is_empty() {
            return Err(MetricsError::EmptyCorpus);
        }
        let mut df = BTreeMap::new();
        for refs in corpus {
            let mut seen = BTreeMap::new();
            for r in refs {
                seen.extend(ngram_counts(r, MAX_N));
            }
            for g in seen.into_keys() {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        let n_docs = corpus.len();
        Ok(Self { df, n_docs, log_docs: (n_docs as f64).ln() })
    }

    pub fn n_docs(&self) -> usize {
        self.n_docs
    }

    pub fn df(&self, ngram: &str) -> usize {
        self.df.get(ngram).copied().unwrap_or(0)
    }

    /// `log(n_docs / max(df, 1))`
    pub fn idf(&self, ngram: &str) -> f64 {
        self.log_docs - (self.df(ngram).max(1) as f64).ln()
    }
}

/// Gaussian penalty `exp(-δ² / 2σ²)` for a length gap δ.
pub fn gaussian_penalty(delta: f64) -> f64 {
    (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp()
}

struct TfIdf {
    vec: [BTreeMap<String, f64>; MAX_N],
    norm: [f64; MAX_N],
    /// Bigram count, the length measure used by the penalty.
    length: usize,
}

impl TfIdf {
    fn new<S: AsRef<str>>(tokens: &[S], stats: &CorpusStats) -> Self {
        let mut vec: [BTreeMap<String, f64>; MAX_N] = Default::default();
        let mut norm = [0.0; MAX_N];
        let mut length = 0;
        for (g, tf) in ngram_counts(tokens, MAX_N) {
            let n = ngram_order(&g) - 1;
            let w = tf as f64 * stats.idf(&g);
            norm[n] += w * w;
            if n == 1 {
                length += tf;
            }
            vec[n].insert(g, w);
        }
        Self { vec, norm: norm.map(f64::sqrt), length }
    }

    fn similarity(&self, reference: &TfIdf) -> [f64; MAX_N] {
        let delta = self.length as f64 - reference.length as f64;
        let penalty = gaussian_penalty(delta);
        let mut val = [0.0; MAX_N];
        for n in 0..MAX_N {
            for (g, &h) in &self.vec[n] {
                let r = reference.vec[n].get(g).copied().unwrap_or(0.0);
                val[n] += h.min(r) * r;
            }
            if self.norm[n] != 0.0 && reference.norm[n] != 0.0 {
                val[n] /= self.norm[n] * reference.norm[n];
            }
            val[n] *= penalty;
        }
        val
    }
}

/// CIDEr-D of one candidate against its references, in `[0, 10]`.
pub fn cider_d<S: AsRef<str>, T: AsRef<str>>(cand: &[S], refs: &[Vec<T>], stats: &CorpusStats) -> Result<f64, MetricsError> {
    if refs.is_empty() {
        return Err(MetricsError::EmptyReferences);
    }
    let hyp = TfIdf::new(cand, stats);
    let mut acc = [0.0; MAX_N];
    for r in refs {
        let s = hyp.similarity(&TfIdf::new(r, stats));
        for n in 0..MAX_N {
            acc[n] += s[n];
        }
    }
    let mean = acc.iter().sum::<f64>() / MAX_N as f64;
    Ok(10.0 * mean / refs.len() as f64)
}

/// CIDEr-D bound to frozen corpus statistics.
#[derive(Debug, Clone)]
pub struct CiderScorer {
    stats: CorpusStats,
}

impl CiderScorer {
    pub fn new(stats: CorpusStats) -> Self {
        Self { stats }
    }

    pub fn stats(&self) -> &CorpusStats {
        &self.stats
    }

    pub fn score<S: AsRef<str>, T: AsRef<str>>(&self, cand: &[S], refs: &[Vec<T>]) -> Result<f64, MetricsError> {
        cider_d(cand, refs, &self.stats)
    }

    /// Mean score over aligned candidate and reference lists, plus per-item scores.
    pub fn corpus<S: AsRef<str>, T: AsRef<str>>(
        &self,
        cands: &[Vec<S>],
        refs: &[Vec<Vec<T>>],
    ) -> Result<(f64, Vec<f64>), MetricsError> {
        if cands.len() != refs.len() {
            return Err(MetricsError::Misaligned(cands.len(), refs.len()));
        }
        let scores = cands.iter().zip(refs).map(|(c, r)| self.score(c, r)).collect::<Result<Vec<_>, _>>()?;
        let mean = if scores.is_empty() { 0.0 } else { scores.iter().sum::<f64>() / scores.len() as f64 };
        Ok((mean, scores))
    }
}

#[cfg(test)]
mod tests {
    use super::super::tokenize;
    use super::*;

    fn corpus(docs: &[&[&str]]) -> Vec<Vec<Vec<String>>> {
        docs.iter().map(|refs| refs.iter().map(|r| tokenize(r)).collect()).collect()
    }

    #[test]
    fn identical_single_reference_scores_ten() {
        let c = corpus(&[&["a red circle on a blue background"], &["one small green square"]]);
        let stats = CorpusStats::build(&c).unwrap();
        let s = cider_d(&c[0][0], &c[0], &stats).unwrap();
        assert!((s - 10.0).abs() < 1e-12, "{s}");
    }

    #[test]
    fn disjoint_candidate_scores_zero() {
        let c = corpus(&[&["a red circle"], &["one green square"]]);
        let stats = CorpusStats::build(&c).unwrap();
        assert_eq!(cider_d(&tokenize("yellow triangle below"), &c[0], &stats).unwrap(), 0.0);
    }

    #[test]
    fn length_penalty_factor() {
        assert!((gaussian_penalty(6.0) - (-0.5f64).exp()).abs() < 1e-15);
        assert_eq!(gaussian_penalty(0.0), 1.0);
    }

    #[test]
    fn corpus_stats_examples() {
        let single = corpus(&[&["a b c", "a d"]]);
        let s = CorpusStats::build(&single).unwrap();
        assert_eq!(s.df("a"), 1);
        assert_eq!(s.df("a b"), 1);
        let everywhere = corpus(&[&["x a"], &["x b"], &["x c"]]);
        let s = CorpusStats::build(&everywhere).unwrap();
        assert_eq!(s.idf("x"), 0.0);
        let mut rev = everywhere.clone();
        rev.reverse();
        assert_eq!(CorpusStats::build(&rev).unwrap(), s);
        assert!(CorpusStats::build::<String>(&[]).is_err());
    }

    #[test]
    fn empty_references_rejected() {
        let stats = CorpusStats::build(&corpus(&[&["a"]])).unwrap();
        let none: Vec<Vec<String>> = Vec::new();
        assert_eq!(cider_d(&tokenize("a"), &none, &stats), Err(MetricsError::EmptyReferences));
    }
}
