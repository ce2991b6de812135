//! The word-image dictionary: every token maps to the images it co-occurs
//! with, most frequent first.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use indexmap::IndexMap;

use crate::corpus::{tokenize, SentenceImagePair, StopWordList, TokenizerConfig};
use crate::error::{Error, Result};

/// One image association inside a dictionary entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageCount {
    pub image_id: String,
    pub count: u32,
}

/// Token → images ordered by descending co-occurrence count, ties in
/// first-seen order. Keys keep first-seen order too, which makes the JSON
/// form deterministic.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WordImageDictionary {
    entries: IndexMap<String, Vec<ImageCount>>,
}

impl WordImageDictionary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Each pair contributes its image once to every distinct token of its
    /// tokenized sentence.
    pub fn build(pairs: &[SentenceImagePair], cfg: &TokenizerConfig, stoplist: &StopWordList) -> Self {
        let mut entries: IndexMap<String, Vec<ImageCount>> = IndexMap::new();
        let mut slots: HashMap<String, HashMap<String, usize>> = HashMap::new();
        for pair in pairs {
            let tokens = tokenize(&pair.text, cfg, stoplist);
            let mut seen: HashSet<&str> = HashSet::new();
            for token in tokens.iter() {
                if !seen.insert(token.as_str()) {
                    continue;
                }
                let entry = entries.entry(token.clone()).or_default();
                let index = slots.entry(token.clone()).or_default();
                match index.get(&pair.image_id) {
                    Some(&i) => entry[i].count += 1,
                    None => {
                        index.insert(pair.image_id.clone(), entry.len());
                        entry.push(ImageCount {
                            image_id: pair.image_id.clone(),
                            count: 1,
                        });
                    }
                }
            }
        }
        for entry in entries.values_mut() {
            // stable: equal counts stay in first-seen order
            entry.sort_by(|a, b| b.count.cmp(&a.count));
        }
        Self { entries }
    }

    /// First `m` image ids stored for `token`; unknown tokens give nothing.
    pub fn lookup(&self, token: &str, m: usize) -> Vec<&str> {
        self.entry(token)
            .iter()
            .take(m)
            .map(|ic| ic.image_id.as_str())
            .collect()
    }

    pub fn entry(&self, token: &str) -> &[ImageCount] {
        self.entries.get(token).map_or(&[], Vec::as_slice)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.entries.get(token).is_some_and(|e| !e.is_empty())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[ImageCount])> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// Inserts or replaces an entry after checking the ordering invariants.
    pub fn insert(&mut self, token: impl Into<String>, images: Vec<ImageCount>) -> Result<()> {
        let token = token.into();
        validate_entry(&token, &images)?;
        self.entries.insert(token, images);
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let value: IndexMap<&str, Vec<(&str, u32)>> = self
            .entries
            .iter()
            .map(|(k, v)| {
                (
                    k.as_str(),
                    v.iter().map(|ic| (ic.image_id.as_str(), ic.count)).collect(),
                )
            })
            .collect();
        let mut s = serde_json::to_string(&value).expect("dictionary serializes");
        s.push('\n');
        s
    }

    pub fn from_json(content: &str) -> Result<Self> {
        let raw: IndexMap<String, Vec<(String, u32)>> = serde_json::from_str(content)
            .map_err(|e| Error::Format(format!("dictionary json: {e}")))?;
        let mut entries = IndexMap::with_capacity(raw.len());
        for (token, images) in raw {
            let images: Vec<ImageCount> = images
                .into_iter()
                .map(|(image_id, count)| ImageCount { image_id, count })
                .collect();
            validate_entry(&token, &images)?;
            entries.insert(token, images);
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&content)
    }
}

fn validate_entry(token: &str, images: &[ImageCount]) -> Result<()> {
    let mut ids = HashSet::new();
    for (i, ic) in images.iter().enumerate() {
        if ic.count == 0 {
            return Err(Error::Format(format!("entry `{token}`: zero count for `{}`", ic.image_id)));
        }
        if !ids.insert(ic.image_id.as_str()) {
            return Err(Error::Format(format!(
                "entry `{token}`: duplicate image id `{}`",
                ic.image_id
            )));
        }
        if i > 0 && images[i - 1].count < ic.count {
            return Err(Error::Format(format!("entry `{token}`: counts not sorted")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(t: &str, e: &str) -> SentenceImagePair {
        SentenceImagePair::new(t, e).unwrap()
    }

    fn ic(id: &str, count: u32) -> ImageCount {
        ImageCount {
            image_id: id.into(),
            count,
        }
    }

    pub(crate) fn three_pair_dict() -> WordImageDictionary {
        let pairs = [pair("dog runs", "e1"), pair("dog sits", "e2"), pair("dog jumps", "e1")];
        WordImageDictionary::build(&pairs, &TokenizerConfig::whitespace(), &StopWordList::empty())
    }

    #[test]
    fn empty_corpus() {
        let d = WordImageDictionary::build(&[], &TokenizerConfig::whitespace(), &StopWordList::empty());
        assert!(d.is_empty());
    }

    #[test]
    fn single_pair() {
        let d = WordImageDictionary::build(
            &[pair("a dog runs", "e1")],
            &TokenizerConfig::whitespace(),
            &StopWordList::new(["a"]),
        );
        assert_eq!(d.len(), 2);
        assert_eq!(d.entry("dog"), [ic("e1", 1)]);
        assert_eq!(d.entry("runs"), [ic("e1", 1)]);
        assert!(d.entry("a").is_empty());
    }

    #[test]
    fn three_pairs_counted_and_sorted() {
        let d = three_pair_dict();
        assert_eq!(d.entry("dog"), [ic("e1", 2), ic("e2", 1)]);
        assert_eq!(d.entry("runs"), [ic("e1", 1)]);
        assert_eq!(d.entry("sits"), [ic("e2", 1)]);
        assert_eq!(d.entry("jumps"), [ic("e1", 1)]);
    }

    #[test]
    fn repeated_token_counts_once_per_pair() {
        let d = WordImageDictionary::build(
            &[pair("dog dog dog", "e1")],
            &TokenizerConfig::whitespace(),
            &StopWordList::empty(),
        );
        assert_eq!(d.entry("dog"), [ic("e1", 1)]);
    }

    #[test]
    fn lookup_examples() {
        let d = three_pair_dict();
        assert_eq!(d.lookup("dog", 1), ["e1"]);
        assert!(d.lookup("zebra", 5).is_empty());
        assert_eq!(d.lookup("runs", 5), ["e1"]);
        assert_eq!(d.lookup("dog", 5), ["e1", "e2"]);
    }

    #[test]
    fn json_round_trip_is_exact() {
        let d = three_pair_dict();
        let json = d.to_json();
        let back = WordImageDictionary::from_json(&json).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.to_json(), json);
        let empty = WordImageDictionary::new();
        assert_eq!(WordImageDictionary::from_json(&empty.to_json()).unwrap(), empty);
    }

    #[test]
    fn duplicate_image_is_format_error() {
        let err = WordImageDictionary::from_json(r#"{"dog":[["e1",2],["e1",1]]}"#).unwrap_err();
        assert!(err.to_string().contains("dog"), "{err}");
        assert!(WordImageDictionary::from_json(r#"{"dog":[["e1",1],["e2",3]]}"#).is_err());
        assert!(WordImageDictionary::from_json(r#"{"dog":[["e1",0]]}"#).is_err());
        assert!(WordImageDictionary::from_json("[1,2]").is_err());
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.json");
        let d = three_pair_dict();
        d.save(&p).unwrap();
        assert_eq!(WordImageDictionary::load(&p).unwrap(), d);
    }
}
