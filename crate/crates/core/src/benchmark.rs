//! Synthetic lexical-disambiguation benchmark.
//!
//! Every source sentence holds one ambiguous word among random context
//! words. The word has two target translations, chosen by a latent sense
//! that is drawn independently of the text; the sentence's paired image is
//! a noisy sample around a per-(word, sense) feature center. Text alone
//! therefore resolves the sense at chance level; the image resolves it.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{load_pairs, write_pairs, SentenceImagePair};
use crate::error::{Error, Result};
use crate::features::ImageFeatureStore;
use crate::nn::mix_seed;
use crate::training::ParallelText;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisambiguationSpec {
    pub n_ambiguous_types: usize,
    pub senses_per_type: usize,
    /// Size of the context vocabulary.
    pub n_context_tokens: usize,
    /// Context words per sentence.
    pub context_per_sentence: usize,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub d_img: usize,
    /// Distance between the two sense centers of one word.
    pub center_distance: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for DisambiguationSpec {
    fn default() -> Self {
        Self {
            n_ambiguous_types: 10,
            senses_per_type: 2,
            n_context_tokens: 20,
            context_per_sentence: 3,
            n_train: 5000,
            n_dev: 200,
            n_test: 500,
            d_img: 16,
            center_distance: 10.0,
            noise_std: 1.0,
            seed: 7,
        }
    }
}

impl DisambiguationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.senses_per_type != 2 {
            return Err(Error::Precondition("exactly two senses per ambiguous word are supported".into()));
        }
        if self.n_ambiguous_types == 0 || self.n_context_tokens == 0 || self.d_img == 0 {
            return Err(Error::Precondition("vocabulary sizes and d_img must be positive".into()));
        }
        if !(self.center_distance > 0.0 && self.noise_std >= 0.0) {
            return Err(Error::Precondition("center distance must be positive, noise non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchItem {
    pub pair: SentenceImagePair,
    pub target: String,
    pub ambiguous_position: usize,
    pub ambiguous_type: usize,
    pub sense: usize,
}

#[derive(Debug, Clone)]
pub struct Benchmark {
    pub train: Vec<BenchItem>,
    pub dev: Vec<BenchItem>,
    pub test: Vec<BenchItem>,
    pub store: ImageFeatureStore,
    /// `centers[type][sense]`, length `d_img`.
    pub centers: Vec<Vec<Vec<f32>>>,
}

pub fn ambiguous_word(k: usize) -> String {
    format!("amb{k}")
}

pub fn context_word(j: usize) -> String {
    format!("w{j}")
}

pub fn ambiguous_target(k: usize, sense: usize) -> String {
    format!("AMB{k}_{sense}")
}

pub fn context_target(j: usize) -> String {
    format!("W{j}")
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize, std: f64) -> Vec<f64> {
    (0..d)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect()
}

pub fn generate(spec: &DisambiguationSpec) -> Result<Benchmark> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[spec.seed, 0xbe4c]));
    let centers: Vec<Vec<Vec<f32>>> = (0..spec.n_ambiguous_types)
        .map(|_| {
            let base = gaussian(&mut rng, spec.d_img, 1.0);
            let dir = gaussian(&mut rng, spec.d_img, 1.0);
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            let half = spec.center_distance / 2.0;
            [-half, half]
                .iter()
                .map(|&sign| {
                    base.iter()
                        .zip(&dir)
                        .map(|(b, u)| (b + sign * u / norm) as f32)
                        .collect()
                })
                .collect()
        })
        .collect();

    let mut store = ImageFeatureStore::new(spec.d_img);
    let mut split = |name: &str, n: usize, rng: &mut ChaCha8Rng| -> Result<Vec<BenchItem>> {
        // exactly balanced senses, assigned independently of the text
        let mut senses: Vec<usize> = (0..n).map(|i| i % 2).collect();
        senses.shuffle(rng);
        let mut items = Vec::with_capacity(n);
        for (i, &sense) in senses.iter().enumerate() {
            let k = rng.random_range(0..spec.n_ambiguous_types);
            let context: Vec<usize> = (0..spec.context_per_sentence)
                .map(|_| rng.random_range(0..spec.n_context_tokens))
                .collect();
            let pos = rng.random_range(0..=spec.context_per_sentence);
            let mut src = Vec::with_capacity(context.len() + 1);
            let mut tgt = Vec::with_capacity(context.len() + 1);
            for (slot, &j) in context.iter().enumerate() {
                if slot == pos {
                    src.push(ambiguous_word(k));
                    tgt.push(ambiguous_target(k, sense));
                }
                src.push(context_word(j));
                tgt.push(context_target(j));
            }
            if pos == context.len() {
                src.push(ambiguous_word(k));
                tgt.push(ambiguous_target(k, sense));
            }
            let noise = gaussian(rng, spec.d_img, spec.noise_std);
            let feature: Vec<f32> = centers[k][sense]
                .iter()
                .zip(&noise)
                .map(|(&c, &z)| c + z as f32)
                .collect();
            let image_id = format!("{name}_{i:06}");
            store.insert(image_id.clone(), feature)?;
            items.push(BenchItem {
                pair: SentenceImagePair::new(src.join(" "), image_id)?,
                target: tgt.join(" "),
                ambiguous_position: pos,
                ambiguous_type: k,
                sense,
            });
        }
        Ok(items)
    };
    let train = split("train", spec.n_train, &mut rng)?;
    let dev = split("dev", spec.n_dev, &mut rng)?;
    let test = split("test", spec.n_test, &mut rng)?;
    Ok(Benchmark {
        train,
        dev,
        test,
        store,
        centers,
    })
}

pub fn pairs(items: &[BenchItem]) -> Vec<SentenceImagePair> {
    items.iter().map(|it| it.pair.clone()).collect()
}

/// Source text, targets and paired image ids.
pub fn parallel_text(items: &[BenchItem]) -> ParallelText {
    ParallelText {
        sources: items.iter().map(|it| it.pair.text.clone()).collect(),
        targets: items.iter().map(|it| it.target.clone()).collect(),
        images: items.iter().map(|it| Some(it.pair.image_id.clone())).collect(),
    }
}

/// A split as read back from disk: pairs plus gold lines.
#[derive(Debug, Clone, PartialEq)]
pub struct GoldSplit {
    pub pairs: Vec<SentenceImagePair>,
    pub targets: Vec<String>,
    pub positions: Vec<usize>,
}

impl GoldSplit {
    pub fn parallel_text(&self) -> ParallelText {
        ParallelText {
            sources: self.pairs.iter().map(|p| p.text.clone()).collect(),
            targets: self.targets.clone(),
            images: self.pairs.iter().map(|p| Some(p.image_id.clone())).collect(),
        }
    }
}

pub const FEATURES_FILE: &str = "features.lvf";

/// Writes `{train,dev,test}.tsv`, `{train,dev,test}.gold` and the feature file.
pub fn write_benchmark(bench: &Benchmark, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, items) in [("train", &bench.train), ("dev", &bench.dev), ("test", &bench.test)] {
        write_pairs(dir.join(format!("{name}.tsv")), &pairs(items))?;
        let gold: String = items
            .iter()
            .map(|it| format!("{}\t{}\n", it.target, it.ambiguous_position))
            .collect();
        let path = dir.join(format!("{name}.gold"));
        std::fs::write(&path, gold).map_err(|e| Error::io(&path, e))?;
    }
    bench.store.save(dir.join(FEATURES_FILE))
}

pub fn parse_gold(content: &str, path: &Path) -> Result<(Vec<String>, Vec<usize>)> {
    let mut targets = Vec::new();
    let mut positions = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let (t, p) = line
            .rsplit_once('\t')
            .ok_or_else(|| err("expected `<target>\\t<position>`".into()))?;
        positions.push(p.trim().parse().map_err(|e| err(format!("bad position: {e}")))?);
        targets.push(t.to_string());
    }
    Ok((targets, positions))
}

pub fn load_split(dir: impl AsRef<Path>, name: &str) -> Result<GoldSplit> {
    let dir = dir.as_ref();
    let pairs = load_pairs(dir.join(format!("{name}.tsv")))?;
    let gold_path = dir.join(format!("{name}.gold"));
    let content = std::fs::read_to_string(&gold_path).map_err(|e| Error::io(&gold_path, e))?;
    let (targets, positions) = parse_gold(&content, &gold_path)?;
    if targets.len() != pairs.len() {
        return Err(Error::Format(format!(
            "{name}: {} pairs but {} gold lines",
            pairs.len(),
            targets.len()
        )));
    }
    Ok(GoldSplit {
        pairs,
        targets,
        positions,
    })
}
