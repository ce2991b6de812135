//! Train-and-score flows shared by the CLI and the acceptance harness.

use serde::{Deserialize, Serialize};

use crate::benchmark::{Benchmark, GoldSplit};
use crate::checkpoint::Checkpoint;
use crate::corpus::SentenceImagePair;
use crate::dictionary::WordImageDictionary;
use crate::error::{Error, Result};
use crate::eval::{ambiguous_token_accuracy, bleu4};
use crate::features::ImageFeatureStore;
use crate::model::{GuidedModel, ModelConfig};
use crate::parallel::Exec;
use crate::training::{
    build_vocabs, prepare_examples, train, translate_all, ParallelText, Preprocess, TrainConfig, TrainOutcome,
    VisualContext,
};

/// Model size; vocabulary sizes are filled in from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub d_model: usize,
    pub n_layers_enc: usize,
    pub n_layers_dec: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_layers_enc: 2,
            n_layers_dec: 2,
            n_heads: 4,
            d_ff: 64,
            max_len: 64,
        }
    }
}

impl ModelShape {
    pub fn config(&self, vocab_src: usize, vocab_tgt: usize, dropout: f64) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_layers_enc: self.n_layers_enc,
            n_layers_dec: self.n_layers_dec,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            vocab_src,
            vocab_tgt,
            dropout,
            max_len: self.max_len,
        }
    }
}

/// Data for one run. `test_positions` may be empty when there is no gold
/// ambiguity annotation.
pub struct TaskData<'a> {
    pub train: &'a ParallelText,
    pub dev: &'a ParallelText,
    pub test: &'a ParallelText,
    pub test_positions: &'a [usize],
    /// Required in visual mode.
    pub store: Option<&'a ImageFeatureStore>,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub checkpoint: Checkpoint,
    pub outcome: TrainOutcome,
    pub test_bleu: f64,
    /// `None` when no ambiguity positions were given.
    pub ambiguous_accuracy: Option<f64>,
    pub hypotheses: Vec<Vec<String>>,
}

/// Image pairs of the training text, used to build the dictionary.
pub fn training_pairs(data: &ParallelText) -> Result<Vec<SentenceImagePair>> {
    data.sources
        .iter()
        .zip(&data.images)
        .filter_map(|(s, img)| img.as_ref().map(|i| SentenceImagePair::new(s.clone(), i.clone())))
        .collect()
}

/// Trains a baseline (`visual == false`) or visual-guidance model and scores
/// the best-dev checkpoint on the test split.
pub fn run(
    data: &TaskData<'_>,
    shape: &ModelShape,
    cfg: &TrainConfig,
    visual: bool,
    pre: &Preprocess,
    exec: Exec,
) -> Result<RunReport> {
    cfg.validate()?;
    let (src_vocab, tgt_vocab) = build_vocabs(data.train, pre);
    let model_cfg = shape.config(src_vocab.len(), tgt_vocab.len(), cfg.dropout);
    let dict;
    let ctx = if visual {
        let store = data
            .store
            .ok_or_else(|| Error::Precondition("visual mode needs an image feature store".into()))?;
        dict = WordImageDictionary::build(&training_pairs(data.train)?, &pre.tokenizer, &pre.stoplist);
        Some(VisualContext {
            dict: &dict,
            store,
            m: cfg.m,
        })
    } else {
        None
    };
    let train_ex = prepare_examples(data.train, &src_vocab, &tgt_vocab, pre, ctx.as_ref())?;
    let dev_ex = prepare_examples(data.dev, &src_vocab, &tgt_vocab, pre, ctx.as_ref())?;
    let test_ex = prepare_examples(data.test, &src_vocab, &tgt_vocab, pre, ctx.as_ref())?;
    let d_img = ctx.as_ref().map(|c| c.store.dim());
    let model = GuidedModel::init(&model_cfg, d_img, cfg.seed)?;
    let outcome = train(model, &train_ex, &dev_ex, cfg, exec)?;

    let hyp_ids = translate_all(&outcome.best, &test_ex, exec)?;
    let hypotheses: Vec<Vec<String>> = hyp_ids.iter().map(|h| tgt_vocab.decode(h)).collect();
    let references: Vec<Vec<String>> = data.test.targets.iter().map(|t| Preprocess::target_tokens(t)).collect();
    let test_bleu = if hypotheses.is_empty() {
        0.0
    } else {
        bleu4(&hypotheses, &references)?
    };
    let ambiguous_accuracy = if data.test_positions.is_empty() {
        None
    } else {
        Some(ambiguous_token_accuracy(&hypotheses, &references, data.test_positions)?)
    };
    Ok(RunReport {
        checkpoint: Checkpoint {
            model: outcome.best.clone(),
            src_vocab,
            tgt_vocab,
            preprocess: pre.clone(),
            m: cfg.m,
        },
        outcome,
        test_bleu,
        ambiguous_accuracy,
        hypotheses,
    })
}

/// Owned parallel text for the three benchmark splits.
pub struct BenchmarkText {
    pub train: ParallelText,
    pub dev: ParallelText,
    pub test: ParallelText,
    pub test_positions: Vec<usize>,
}

impl BenchmarkText {
    pub fn from_benchmark(b: &Benchmark) -> Self {
        Self {
            train: crate::benchmark::parallel_text(&b.train),
            dev: crate::benchmark::parallel_text(&b.dev),
            test: crate::benchmark::parallel_text(&b.test),
            test_positions: b.test.iter().map(|i| i.ambiguous_position).collect(),
        }
    }

    pub fn from_splits(train: &GoldSplit, dev: &GoldSplit, test: &GoldSplit) -> Self {
        Self {
            train: train.parallel_text(),
            dev: dev.parallel_text(),
            test: test.parallel_text(),
            test_positions: test.positions.clone(),
        }
    }

    pub fn task<'a>(&'a self, store: Option<&'a ImageFeatureStore>) -> TaskData<'a> {
        TaskData {
            train: &self.train,
            dev: &self.dev,
            test: &self.test,
            test_positions: &self.test_positions,
            store,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub m: usize,
    pub bleu: f64,
    pub amb_acc: f64,
}

/// Visual-mode runs for each `m`, with everything else fixed.
pub fn sweep_m(
    data: &TaskData<'_>,
    shape: &ModelShape,
    cfg: &TrainConfig,
    ms: &[usize],
    pre: &Preprocess,
    exec: Exec,
) -> Result<Vec<SweepRow>> {
    ms.iter()
        .map(|&m| {
            let cfg = TrainConfig { m, ..cfg.clone() };
            let r = run(data, shape, &cfg, true, pre, exec)?;
            Ok(SweepRow {
                m,
                bleu: r.test_bleu,
                amb_acc: r.ambiguous_accuracy.unwrap_or(0.0),
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("m,bleu,amb_acc\n");
    for r in rows {
        out.push_str(&format!("{},{:.4},{:.4}\n", r.m, r.bleu, r.amb_acc));
    }
    out
}
