//! Corpus BLEU-4, dictionary coverage, the paired sign test, and
//! disambiguation accuracy.

use std::collections::HashMap;
use std::hash::Hash;

use statrs::function::factorial::ln_binomial;

use crate::corpus::{tokenize, StopWordList, TokenizerConfig};
use crate::dictionary::WordImageDictionary;
use crate::error::{Error, Result};

fn ngram_counts<T: Hash + Eq>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU-4 in `[0, 100]`: clipped n-gram precisions for
/// n = 1..4, geometric mean, corpus brevity penalty, no smoothing.
pub fn bleu4<T: Hash + Eq>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::Precondition(format!(
            "{} hypotheses but {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(r, n);
            total[n - 1] += h.len().saturating_sub(n - 1);
            matched[n - 1] += hc
                .iter()
                .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }
    if hyp_len == 0 || matched.iter().any(|&m| m == 0) {
        return Ok(0.0);
    }
    let log_precision: f64 = (0..4)
        .map(|i| (matched[i] as f64 / total[i] as f64).ln())
        .sum::<f64>()
        / 4.0;
    let brevity = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * brevity * log_precision.exp())
}

/// Single-sentence BLEU-4, used as the per-sentence metric for the sign test.
pub fn sentence_bleu4<T: Hash + Eq + Clone>(hypothesis: &[T], reference: &[T]) -> f64 {
    bleu4(&[hypothesis.to_vec()], &[reference.to_vec()]).expect("equal lengths")
}

/// Fraction of token occurrences whose token has a dictionary entry.
pub fn coverage<S: AsRef<str>>(
    dict: &WordImageDictionary,
    texts: &[S],
    cfg: &TokenizerConfig,
    stoplist: &StopWordList,
) -> f64 {
    let (mut covered, mut seen) = (0usize, 0usize);
    for text in texts {
        for token in tokenize(text.as_ref(), cfg, stoplist).iter() {
            seen += 1;
            if dict.contains(token) {
                covered += 1;
            }
        }
    }
    if seen == 0 {
        0.0
    } else {
        covered as f64 / seen as f64
    }
}

/// Two-sided sign test on paired scores; ties are dropped.
pub fn sign_test(scores_a: &[f64], scores_b: &[f64]) -> Result<f64> {
    if scores_a.len() != scores_b.len() || scores_a.is_empty() {
        return Err(Error::Precondition(format!(
            "sign test needs equal non-empty lengths, got {} and {}",
            scores_a.len(),
            scores_b.len()
        )));
    }
    let wins = scores_a.iter().zip(scores_b).filter(|(a, b)| a > b).count();
    let losses = scores_a.iter().zip(scores_b).filter(|(a, b)| a < b).count();
    Ok(binomial_two_sided(wins, losses))
}

/// `min(1, 2 · P[X ≤ min(wins, losses)])` for `X ~ Bin(wins + losses, ½)`.
pub fn binomial_two_sided(wins: usize, losses: usize) -> f64 {
    let n = (wins + losses) as u64;
    if n == 0 {
        return 1.0;
    }
    let k = wins.min(losses) as u64;
    let ln_half_n = n as f64 * std::f64::consts::LN_2;
    let tail: f64 = (0..=k).map(|i| (ln_binomial(n, i) - ln_half_n).exp()).sum();
    (2.0 * tail).min(1.0)
}

/// Fraction of ambiguous positions translated to the gold token. A
/// translation that is too short counts as wrong.
pub fn ambiguous_token_accuracy<S: AsRef<str>>(
    translations: &[Vec<S>],
    gold: &[Vec<S>],
    ambiguous_positions: &[usize],
) -> Result<f64> {
    if translations.len() != gold.len() || gold.len() != ambiguous_positions.len() {
        return Err(Error::Precondition(format!(
            "{} translations, {} gold sentences, {} positions",
            translations.len(),
            gold.len(),
            ambiguous_positions.len()
        )));
    }
    if gold.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for ((hyp, reference), &pos) in translations.iter().zip(gold).zip(ambiguous_positions) {
        let want = reference.get(pos).ok_or_else(|| {
            Error::Precondition(format!("ambiguous position {pos} beyond gold length {}", reference.len()))
        })?;
        if hyp.get(pos).map(AsRef::as_ref) == Some(want.as_ref()) {
            correct += 1;
        }
    }
    Ok(correct as f64 / gold.len() as f64)
}

/// Pearson chi-square statistic and degrees of freedom for a contingency
/// table (rows × columns of counts). Empty rows and columns are dropped.
pub fn chi_square_independence(table: &[Vec<usize>]) -> (f64, usize) {
    let rows: Vec<&Vec<usize>> = table.iter().filter(|r| r.iter().sum::<usize>() > 0).collect();
    if rows.is_empty() {
        return (0.0, 0);
    }
    let width = rows[0].len();
    let col_tot: Vec<usize> = (0..width).map(|j| rows.iter().map(|r| r[j]).sum()).collect();
    let cols: Vec<usize> = (0..width).filter(|&j| col_tot[j] > 0).collect();
    let total: usize = col_tot.iter().sum();
    let mut stat = 0.0;
    for r in &rows {
        let row_tot: usize = r.iter().sum();
        for &j in &cols {
            let expected = row_tot as f64 * col_tot[j] as f64 / total as f64;
            let diff = r[j] as f64 - expected;
            stat += diff * diff / expected;
        }
    }
    let df = (rows.len().saturating_sub(1)) * (cols.len().saturating_sub(1));
    (stat, df)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SentenceImagePair;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn identical_corpus_scores_100() {
        let c = vec![words("the cat sat on the mat"), words("a b c d e")];
        assert_eq!(bleu4(&c, &c).unwrap(), 100.0);
    }

    #[test]
    fn empty_hypotheses_score_zero() {
        let refs = vec![words("a b c d")];
        assert_eq!(bleu4(&[vec![]], &refs).unwrap(), 0.0);
        assert!(bleu4(&refs, &[]).is_err());
    }

    #[test]
    fn no_matching_fourgram_is_zero_without_smoothing() {
        // hyp 4-grams {the cat sat on, cat sat on the, sat on the mat} share
        // nothing with the reference's, so the unsmoothed score is 0.
        let h = vec![words("the cat sat on the mat")];
        let r = vec![words("the cat is on the mat")];
        assert_eq!(bleu4(&h, &r).unwrap(), 0.0);
    }

    #[test]
    fn brevity_penalty_applies() {
        // precisions all 1, c = 4, r = 8 → 100·exp(1 − 2)
        let h = vec![words("a b c d")];
        let r = vec![words("a b c d e f g h")];
        let want = 100.0 * (-1.0f64).exp();
        assert!((bleu4(&h, &r).unwrap() - want).abs() < 1e-10);
    }

    #[test]
    fn coverage_examples() {
        let pairs = [SentenceImagePair::new("dog runs", "e1").unwrap()];
        let cfg = TokenizerConfig::whitespace();
        let sl = StopWordList::empty();
        let d = WordImageDictionary::build(&pairs, &cfg, &sl);
        assert_eq!(coverage(&d, &["dog runs", "runs dog"], &cfg, &sl), 1.0);
        assert_eq!(coverage(&WordImageDictionary::new(), &["dog runs"], &cfg, &sl), 0.0);
        assert_eq!(coverage(&d, &["dog cat", "bird runs"], &cfg, &sl), 0.5);
        let none: [&str; 0] = [];
        assert_eq!(coverage(&d, &none, &cfg, &sl), 0.0);
    }

    #[test]
    fn sign_test_examples() {
        let a = vec![1.0; 10];
        let b = vec![0.0; 10];
        assert!((sign_test(&a, &b).unwrap() - 2.0 * 0.5f64.powi(10)).abs() < 1e-15);
        assert_eq!(sign_test(&a, &a).unwrap(), 1.0);
        let mixed_a = [1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let mixed_b = [0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        assert_eq!(sign_test(&mixed_a, &mixed_b).unwrap(), 1.0);
        assert!(sign_test(&[1.0], &[]).is_err());
        assert_eq!(sign_test(&a, &b).unwrap(), sign_test(&b, &a).unwrap());
    }

    #[test]
    fn ambiguous_accuracy_examples() {
        let gold = vec![words("x A y"), words("B z"), words("q C"), words("D")];
        let pos = [1, 0, 1, 0];
        assert_eq!(ambiguous_token_accuracy(&gold, &gold, &pos).unwrap(), 1.0);
        let wrong = vec![words("x a y"), words("b z"), words("q c"), words("d")];
        assert_eq!(ambiguous_token_accuracy(&wrong, &gold, &pos).unwrap(), 0.0);
        let three = vec![words("x A y"), words("B z"), words("q C"), vec![]];
        assert_eq!(ambiguous_token_accuracy(&three, &gold, &pos).unwrap(), 0.75);
        assert!(ambiguous_token_accuracy(&three, &gold, &pos[..2]).is_err());
    }

    #[test]
    fn chi_square_of_independent_table_is_zero() {
        let (stat, df) = chi_square_independence(&[vec![10, 10], vec![5, 5], vec![0, 0]]);
        assert_eq!(stat, 0.0);
        assert_eq!(df, 1);
    }
}
