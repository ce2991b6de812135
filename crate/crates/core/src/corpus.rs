//! Corpus ingestion: sentence-image pairs, stop-word filtering, and subword
//! segmentation (whitespace or BPE).

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DEFAULT_STOPWORDS: &str = include_str!("../data/stopwords-en.txt");

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentenceImagePair {
    pub text: String,
    pub image_id: String,
}

impl SentenceImagePair {
    pub fn new(text: impl Into<String>, image_id: impl Into<String>) -> Result<Self> {
        let text = text.into();
        let image_id = image_id.into();
        if text.trim().is_empty() {
            return Err(Error::Precondition("sentence text is empty".into()));
        }
        if image_id.is_empty() {
            return Err(Error::Precondition("image id is empty".into()));
        }
        Ok(Self { text, image_id })
    }
}

/// Reads a paired corpus: one `<sentence>\t<image_id>` record per line, blank
/// lines skipped.
pub fn load_pairs(path: impl AsRef<Path>) -> Result<Vec<SentenceImagePair>> {
    let path = path.as_ref();
    let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pairs(&content, path)
}

pub fn parse_pairs(content: &str, path: &Path) -> Result<Vec<SentenceImagePair>> {
    let mut pairs = Vec::new();
    for (idx, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: &str| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: message.to_string(),
        };
        let mut fields = line.split('\t');
        let (Some(text), Some(image_id), None) = (fields.next(), fields.next(), fields.next())
        else {
            return Err(parse_err("expected exactly one TAB separating sentence and image id"));
        };
        let image_id = image_id.trim_end_matches('\r');
        if text.trim().is_empty() {
            return Err(parse_err("empty sentence"));
        }
        if image_id.is_empty() {
            return Err(parse_err("empty image id"));
        }
        pairs.push(SentenceImagePair {
            text: text.to_string(),
            image_id: image_id.to_string(),
        });
    }
    Ok(pairs)
}

pub fn write_pairs(path: impl AsRef<Path>, pairs: &[SentenceImagePair]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for p in pairs {
        out.push_str(&p.text);
        out.push('\t');
        out.push_str(&p.image_id);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Set of lowercase stop words.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StopWordList {
    words: BTreeSet<String>,
}

impl StopWordList {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Entries are lowercased; duplicates collapse.
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Self {
            words: words
                .into_iter()
                .map(|w| w.as_ref().trim().to_lowercase())
                .filter(|w| !w.is_empty())
                .collect(),
        }
    }

    /// The bundled English list.
    pub fn english() -> Self {
        Self::parse(DEFAULT_STOPWORDS)
    }

    pub fn parse(content: &str) -> Self {
        Self::new(content.lines())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::parse(&content))
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(word)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.words.iter().map(String::as_str)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerMode {
    Whitespace,
    Bpe,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MergeRule {
    pub left: String,
    pub right: String,
}

impl MergeRule {
    pub fn new(left: impl Into<String>, right: impl Into<String>) -> Self {
        Self {
            left: left.into(),
            right: right.into(),
        }
    }

    pub fn merged(&self) -> String {
        let mut s = String::with_capacity(self.left.len() + self.right.len());
        s.push_str(&self.left);
        s.push_str(&self.right);
        s
    }
}

impl fmt::Display for MergeRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.left, self.right)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    pub mode: TokenizerMode,
    pub lowercase: bool,
    pub merges: Vec<MergeRule>,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self::whitespace()
    }
}

impl TokenizerConfig {
    pub fn whitespace() -> Self {
        Self {
            mode: TokenizerMode::Whitespace,
            lowercase: true,
            merges: Vec::new(),
        }
    }

    pub fn bpe(merges: Vec<MergeRule>) -> Self {
        Self {
            mode: TokenizerMode::Bpe,
            lowercase: true,
            merges,
        }
    }

    pub fn with_lowercase(mut self, lowercase: bool) -> Self {
        self.lowercase = lowercase;
        self
    }

    /// In BPE mode every rule must combine symbols that are single characters
    /// or products of earlier rules.
    pub fn validate(&self) -> Result<()> {
        if self.mode == TokenizerMode::Whitespace {
            return Ok(());
        }
        if self.merges.is_empty() {
            return Err(Error::Precondition("bpe mode requires at least one merge rule".into()));
        }
        let mut products: HashSet<String> = HashSet::new();
        for (i, rule) in self.merges.iter().enumerate() {
            for sym in [&rule.left, &rule.right] {
                let is_base = sym.chars().count() == 1;
                if !is_base && !products.contains(sym.as_str()) {
                    return Err(Error::Precondition(format!(
                        "merge rule {i} ({rule}) uses symbol `{sym}` that no earlier rule produces"
                    )));
                }
            }
            products.insert(rule.merged());
        }
        Ok(())
    }
}

/// Filtered, segmented token sequence.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct TokenSequence(Vec<String>);

impl TokenSequence {
    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, String> {
        self.0.iter()
    }

    pub fn into_inner(self) -> Vec<String> {
        self.0
    }
}

impl<'a> IntoIterator for &'a TokenSequence {
    type Item = &'a String;
    type IntoIter = std::slice::Iter<'a, String>;
    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

/// Drops stop words, keeping order. With `lowercase` on, tokens are compared
/// (and returned) lowercased.
pub fn filter_stop_words<S: AsRef<str>>(
    tokens: &[S],
    stoplist: &StopWordList,
    lowercase: bool,
) -> Vec<String> {
    tokens
        .iter()
        .filter_map(|t| {
            let t = t.as_ref();
            let key = if lowercase { t.to_lowercase() } else { t.to_string() };
            (!key.is_empty() && !stoplist.contains(&key)).then_some(key)
        })
        .collect()
}

/// Filter, then segment. Deterministic and total; empty input yields an empty
/// sequence.
pub fn tokenize(text: &str, cfg: &TokenizerConfig, stoplist: &StopWordList) -> TokenSequence {
    let words: Vec<&str> = text.split_whitespace().collect();
    let kept = filter_stop_words(&words, stoplist, cfg.lowercase);
    match cfg.mode {
        TokenizerMode::Whitespace => TokenSequence(kept),
        TokenizerMode::Bpe => {
            let mut out = Vec::new();
            for w in &kept {
                out.extend(apply_merges(w, &cfg.merges));
            }
            TokenSequence(out)
        }
    }
}

/// Applies each rule in order, merging every left-to-right occurrence.
pub fn apply_merges(word: &str, merges: &[MergeRule]) -> Vec<String> {
    let mut symbols: Vec<String> = word.chars().map(String::from).collect();
    for rule in merges {
        if symbols.len() < 2 {
            break;
        }
        merge_in_place(&mut symbols, &rule.left, &rule.right);
    }
    symbols
}

fn merge_in_place(symbols: &mut Vec<String>, left: &str, right: &str) {
    let mut i = 0;
    let mut out: Vec<String> = Vec::with_capacity(symbols.len());
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            let mut merged = String::with_capacity(left.len() + right.len());
            merged.push_str(left);
            merged.push_str(right);
            out.push(merged);
            i += 2;
        } else {
            out.push(std::mem::take(&mut symbols[i]));
            i += 1;
        }
    }
    *symbols = out;
}

/// Greedy BPE training over whitespace words. Ties on frequency go to the
/// lexicographically smallest pair; stops once no pair occurs at least twice.
pub fn learn_bpe<S: AsRef<str>>(texts: &[S], num_merges: usize) -> Vec<MergeRule> {
    let mut word_freq: HashMap<&str, usize> = HashMap::new();
    for t in texts {
        for w in t.as_ref().split_whitespace() {
            *word_freq.entry(w).or_default() += 1;
        }
    }
    // Sorted for a deterministic iteration order.
    let mut words: Vec<(Vec<String>, usize)> = {
        let mut v: Vec<(&str, usize)> = word_freq.into_iter().collect();
        v.sort_unstable();
        v.into_iter()
            .map(|(w, f)| (w.chars().map(String::from).collect(), f))
            .collect()
    };

    let mut merges = Vec::new();
    while merges.len() < num_merges {
        let mut counts: HashMap<(&str, &str), usize> = HashMap::new();
        for (symbols, freq) in &words {
            for pair in symbols.windows(2) {
                *counts.entry((pair[0].as_str(), pair[1].as_str())).or_default() += freq;
            }
        }
        let best = counts
            .into_iter()
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)));
        let Some(((l, r), count)) = best else { break };
        if count < 2 {
            break;
        }
        let rule = MergeRule::new(l, r);
        for (symbols, _) in words.iter_mut() {
            merge_in_place(symbols, &rule.left, &rule.right);
        }
        merges.push(rule);
    }
    merges
}

pub fn parse_merges(content: &str) -> Result<Vec<MergeRule>> {
    let mut rules = Vec::new();
    for (idx, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split(' ');
        match (it.next(), it.next(), it.next()) {
            (Some(l), Some(r), None) if !l.is_empty() && !r.is_empty() => {
                rules.push(MergeRule::new(l, r))
            }
            _ => {
                return Err(Error::Format(format!(
                    "merge rule line {}: expected two space-separated symbols",
                    idx + 1
                )))
            }
        }
    }
    Ok(rules)
}

pub fn load_merges(path: impl AsRef<Path>) -> Result<Vec<MergeRule>> {
    let path = path.as_ref();
    let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_merges(&content)
}

pub fn write_merges(path: impl AsRef<Path>, merges: &[MergeRule]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for m in merges {
        out.push_str(&m.to_string());
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stop(words: &[&str]) -> StopWordList {
        StopWordList::new(words.iter().copied())
    }

    #[test]
    fn parses_single_record() {
        let pairs = parse_pairs("a dog runs\timg_001\n", Path::new("x")).unwrap();
        assert_eq!(pairs, vec![SentenceImagePair::new("a dog runs", "img_001").unwrap()]);
    }

    #[test]
    fn empty_file_gives_no_pairs() {
        assert!(parse_pairs("", Path::new("x")).unwrap().is_empty());
    }

    #[test]
    fn blank_lines_skipped_in_order() {
        let pairs = parse_pairs("one\te1\n\nthree\te3\n", Path::new("x")).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].text, "one");
        assert_eq!(pairs[1].image_id, "e3");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse_pairs("ok\te1\nno tab here\n", Path::new("c.tsv")).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_pairs("a\tb\tc\n", Path::new("x")).is_err());
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_pairs("/nonexistent/pairs.tsv"),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn filter_examples() {
        assert_eq!(filter_stop_words(&["a", "dog", "runs"], &stop(&["a"]), true), ["dog", "runs"]);
        let empty: [&str; 0] = [];
        assert!(filter_stop_words(&empty, &stop(&["a"]), true).is_empty());
        assert_eq!(
            filter_stop_words(&["The", "the", "THE", "cat"], &stop(&["the"]), true),
            ["cat"]
        );
        // case-sensitive when lowercasing is off
        assert_eq!(
            filter_stop_words(&["The", "the", "cat"], &stop(&["the"]), false),
            ["The", "cat"]
        );
    }

    #[test]
    fn tokenize_examples() {
        let cfg = TokenizerConfig::whitespace();
        assert_eq!(tokenize("a dog runs", &cfg, &stop(&["a"])).tokens(), ["dog", "runs"]);
        assert!(tokenize("", &cfg, &stop(&["a"])).is_empty());
        let bpe = TokenizerConfig::bpe(vec![MergeRule::new("l", "o"), MergeRule::new("lo", "w")]);
        bpe.validate().unwrap();
        assert_eq!(
            tokenize("lower", &bpe, &StopWordList::empty()).tokens(),
            ["low", "e", "r"]
        );
    }

    #[test]
    fn filtering_happens_before_segmentation() {
        // "at" is a stop word; its BPE pieces must not leak through.
        let bpe = TokenizerConfig::bpe(vec![MergeRule::new("a", "t")]);
        assert_eq!(tokenize("at cat", &bpe, &stop(&["at"])).tokens(), ["c", "at"]);
    }

    #[test]
    fn validate_rejects_bad_configs() {
        assert!(TokenizerConfig::bpe(vec![]).validate().is_err());
        let bad = TokenizerConfig::bpe(vec![MergeRule::new("lo", "w")]);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn learn_bpe_trivial_cases() {
        assert!(learn_bpe(&["low lower"], 0).is_empty());
        assert_eq!(learn_bpe(&["aaaa"], 1), vec![MergeRule::new("a", "a")]);
        // single occurrence of every pair: nothing to merge
        assert!(learn_bpe(&["abc"], 3).is_empty());
    }

    /// Independent oracle: recount pairs from scratch on string-joined words
    /// at every step.
    fn brute_force_bpe(text: &str, steps: usize) -> Vec<(String, String)> {
        let mut words: Vec<Vec<String>> = text
            .split_whitespace()
            .map(|w| w.chars().map(|c| c.to_string()).collect())
            .collect();
        let mut out = Vec::new();
        for _ in 0..steps {
            let mut best: Option<((String, String), usize)> = None;
            let mut candidates: Vec<(String, String)> = Vec::new();
            for w in &words {
                for i in 0..w.len().saturating_sub(1) {
                    candidates.push((w[i].clone(), w[i + 1].clone()));
                }
            }
            candidates.sort();
            candidates.dedup();
            for cand in candidates {
                let mut n = 0;
                for w in &words {
                    for i in 0..w.len().saturating_sub(1) {
                        if w[i] == cand.0 && w[i + 1] == cand.1 {
                            n += 1;
                        }
                    }
                }
                if best.as_ref().map_or(true, |(_, b)| n > *b) {
                    best = Some((cand, n));
                }
            }
            let Some((pair, n)) = best else { break };
            if n < 2 {
                break;
            }
            for w in words.iter_mut() {
                let mut merged = Vec::new();
                let mut i = 0;
                while i < w.len() {
                    if i + 1 < w.len() && w[i] == pair.0 && w[i + 1] == pair.1 {
                        merged.push(format!("{}{}", pair.0, pair.1));
                        i += 2;
                    } else {
                        merged.push(w[i].clone());
                        i += 1;
                    }
                }
                *w = merged;
            }
            out.push(pair);
        }
        out
    }

    #[test]
    fn learn_bpe_matches_brute_force() {
        let oracle = brute_force_bpe("low lower lowest", 2);
        // frozen from the oracle: (l,o) and (o,w) tie at 3; (l,o) wins, then (lo,w)
        assert_eq!(
            oracle,
            vec![("l".to_string(), "o".to_string()), ("lo".to_string(), "w".to_string())]
        );
        let learned: Vec<(String, String)> = learn_bpe(&["low lower lowest"], 2)
            .into_iter()
            .map(|r| (r.left, r.right))
            .collect();
        assert_eq!(learned, oracle);
    }

    #[test]
    fn merges_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("merges.txt");
        let rules = vec![MergeRule::new("l", "o"), MergeRule::new("lo", "w")];
        write_merges(&path, &rules).unwrap();
        assert_eq!(load_merges(&path).unwrap(), rules);
        assert!(parse_merges("a b c\n").is_err());
    }

    #[test]
    fn bundled_stoplist_is_lowercase() {
        let sl = StopWordList::english();
        assert!(sl.contains("the"));
        assert!(!sl.contains("dog"));
    }

    proptest! {
        #[test]
        fn filter_is_idempotent(words in prop::collection::vec("[a-dA-D]{1,3}", 0..20)) {
            let sl = stop(&["a", "ab", "bc"]);
            let once = filter_stop_words(&words, &sl, true);
            let twice = filter_stop_words(&once, &sl, true);
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn bpe_round_trip_and_closed_alphabet(
            corpus in prop::collection::vec("[a-e]{1,8}", 1..12),
            n in 0usize..12,
        ) {
            let text = corpus.join(" ");
            let merges = learn_bpe(&[text.as_str()], n);
            let mut alphabet: HashSet<String> =
                text.chars().filter(|c| !c.is_whitespace()).map(String::from).collect();
            alphabet.extend(merges.iter().map(MergeRule::merged));
            if !merges.is_empty() {
                TokenizerConfig::bpe(merges.clone()).validate().unwrap();
            }
            for w in &corpus {
                let pieces = apply_merges(w, &merges);
                prop_assert_eq!(pieces.concat(), w.clone());
                for p in &pieces {
                    prop_assert!(alphabet.contains(p));
                }
            }
        }

        #[test]
        fn tokenize_is_deterministic(text in "[a-c ]{0,30}") {
            let cfg = TokenizerConfig::bpe(vec![MergeRule::new("a", "b")]);
            let sl = stop(&["c"]);
            prop_assert_eq!(tokenize(&text, &cfg, &sl), tokenize(&text, &cfg, &sl));
        }
    }
}
