//! Seq2seq training: cross-entropy, the inverse-square-root warm-up
//! schedule, plain SGD, per-epoch dev BLEU and early stopping.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, StopWordList, TokenizerConfig};
use crate::dictionary::WordImageDictionary;
use crate::error::{Error, Result};
use crate::eval::bleu4;
use crate::features::{assemble_with_paired, ImageFeatureStore, ImageTensor};
use crate::fusion::{fusion_backward, fusion_forward};
use crate::model::GuidedModel;
use crate::nn::{mix_seed, Dropout, DropoutKey, Parameterized};
use crate::parallel::Exec;
use crate::real::Real;
use crate::vocab::{Vocab, BOS, EOS, PAD};

/// `d^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
pub fn lr_at(step: usize, d_model: usize, warmup_steps: usize) -> f64 {
    let step = step.max(1) as f64;
    let warm = warmup_steps as f64;
    (d_model as f64).powf(-0.5) * step.powf(-0.5).min(step * warm.powf(-1.5))
}

/// Mean negative log-likelihood over non-pad targets and its gradient with
/// respect to the logits. Pad rows get zero loss and zero gradient.
pub fn cross_entropy<T: Real>(logits: ArrayView2<'_, T>, targets: &[usize], pad_id: usize) -> Result<(T, Array2<T>)> {
    let (sum, mut grad, count) = cross_entropy_sum(logits, targets, pad_id)?;
    let inv = T::one() / T::from_usize(count).unwrap();
    grad.mapv_inplace(|g| g * inv);
    Ok((sum * inv, grad))
}

/// Summed loss, gradient of the sum, and the number of scored positions.
pub(crate) fn cross_entropy_sum<T: Real>(
    logits: ArrayView2<'_, T>,
    targets: &[usize],
    pad_id: usize,
) -> Result<(T, Array2<T>, usize)> {
    if logits.nrows() != targets.len() {
        return Err(Error::Dimension(format!(
            "{} logit rows for {} targets",
            logits.nrows(),
            targets.len()
        )));
    }
    let vocab = logits.ncols();
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut total = T::zero();
    let mut count = 0;
    for (i, &target) in targets.iter().enumerate() {
        if target == pad_id {
            continue;
        }
        if target >= vocab {
            return Err(Error::Index { id: target, vocab });
        }
        let row = logits.row(i);
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let sum_exp: T = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = max + sum_exp.ln();
        total += log_z - row[target];
        for (g, &v) in grad.row_mut(i).iter_mut().zip(row.iter()) {
            *g = (v - log_z).exp();
        }
        grad[[i, target]] -= T::one();
        count += 1;
    }
    if count == 0 {
        return Err(Error::Precondition("no non-pad target positions".into()));
    }
    Ok((total, grad, count))
}

/// One source/target pair ready for the model. `tgt` excludes BOS/EOS.
#[derive(Debug, Clone)]
pub struct Example<T = f32> {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
    pub images: Option<ImageTensor<T>>,
}

impl<T: Real> Example<T> {
    pub fn decoder_input(&self) -> Vec<usize> {
        std::iter::once(BOS).chain(self.tgt.iter().copied()).collect()
    }

    pub fn decoder_target(&self) -> Vec<usize> {
        self.tgt.iter().copied().chain(std::iter::once(EOS)).collect()
    }
}

/// Summed loss over target positions, the number of positions, and the
/// gradient of that sum for every parameter.
pub fn example_gradients<T: Real>(
    model: &GuidedModel<T>,
    ex: &Example<T>,
    dropout: Dropout,
) -> Result<(T, usize, GuidedModel<T>)> {
    let mut grad = model.zeros_like();
    let (h, enc_cache) = model.net.encode(&ex.src, dropout)?;
    let fused = match (&model.fusion, &ex.images) {
        (Some(f), Some(img)) => Some(fusion_forward(f, h.view(), img)?),
        _ => None,
    };
    let memory = fused.as_ref().map_or(h.view(), |(m, _)| m.view());
    let (logits, dec_cache) = model.net.decode(&ex.decoder_input(), memory, dropout)?;
    let (loss, dlogits, count) = cross_entropy_sum(logits.view(), &ex.decoder_target(), PAD)?;
    let dmem = model.net.decode_backward(&dec_cache, dlogits.view(), h.nrows(), &mut grad.net);
    let dh = match (&model.fusion, &fused, grad.fusion.as_mut()) {
        (Some(f), Some((_, cache)), Some(g)) => fusion_backward(f, cache, dmem.view(), g).0,
        _ => dmem,
    };
    model.net.encode_backward(&enc_cache, dh.view(), &mut grad.net);
    Ok((loss, count, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub warmup_steps: usize,
    pub max_steps: usize,
    pub batch_size: usize,
    pub dropout: f64,
    /// Epochs without dev improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Maximum images per token.
    pub m: usize,
    /// Multiplier on the warm-up schedule for the SGD step size.
    pub lr_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            warmup_steps: 100,
            max_steps: 1000,
            batch_size: 32,
            dropout: 0.15,
            patience: 10,
            seed: 1,
            m: 5,
            lr_scale: 50.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps == 0 || self.batch_size == 0 || self.patience == 0 || self.m == 0 {
            return Err(Error::Precondition("warmup, batch size, patience and m must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Precondition(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if !(self.lr_scale > 0.0 && self.lr_scale.is_finite()) {
            return Err(Error::Precondition("lr_scale must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub step: usize,
    pub train_loss: f64,
    pub dev_bleu: f64,
    pub lr: f64,
}

pub fn write_metrics_log(path: impl AsRef<Path>, log: &[EpochMetrics]) -> Result<()> {
    let path = path.as_ref();
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for m in log {
        writeln!(file, "{}", serde_json::to_string(m)?).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best dev BLEU.
    pub best: GuidedModel<f32>,
    pub best_dev_bleu: f64,
    pub log: Vec<EpochMetrics>,
    /// Mean per-token training loss of every optimizer step.
    pub step_losses: Vec<f64>,
}

/// Length-bucketed batches: shuffle, sort windows of `50 × batch` by source
/// length, cut, then shuffle the batch order.
pub(crate) fn make_batches<T>(examples: &[Example<T>], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(rng);
    let window = batch_size * 50;
    let mut batches = Vec::new();
    for chunk in order.chunks(window) {
        let mut chunk = chunk.to_vec();
        chunk.sort_by_key(|&i| (examples[i].src.len(), examples[i].tgt.len()));
        batches.extend(chunk.chunks(batch_size).map(<[usize]>::to_vec));
    }
    batches.shuffle(rng);
    batches
}

/// Loss and averaged gradient over a batch. Per-example work is mapped
/// independently and summed in batch order, so the result does not depend
/// on `exec`.
pub fn batch_gradients<T: Real>(
    model: &GuidedModel<T>,
    examples: &[Example<T>],
    batch: &[usize],
    dropout_rate: f64,
    seed: u64,
    step: usize,
    exec: Exec,
) -> Result<(f64, GuidedModel<T>)> {
    let results = exec.map(batch, |&idx| {
        let dropout = if dropout_rate > 0.0 {
            Dropout::train(
                dropout_rate,
                DropoutKey {
                    seed,
                    step: step as u64,
                    example: idx as u64,
                },
            )
        } else {
            Dropout::eval()
        };
        example_gradients(model, &examples[idx], dropout)
    });
    let mut total_loss = T::zero();
    let mut total_count = 0usize;
    let mut acc = model.zeros_like();
    for r in results {
        let (loss, count, grad) = r?;
        total_loss += loss;
        total_count += count;
        for (a, g) in acc.params_mut().into_iter().zip(grad.params()) {
            for (x, &y) in a.data.iter_mut().zip(g.data) {
                *x += y;
            }
        }
    }
    let inv = T::one() / T::from_usize(total_count.max(1)).unwrap();
    for p in acc.params_mut() {
        for x in p.data.iter_mut() {
            *x *= inv;
        }
    }
    Ok(((total_loss * inv).to_f64_lossy(), acc))
}

pub fn sgd_step<T: Real>(model: &mut GuidedModel<T>, grad: &GuidedModel<T>, lr: f64) {
    let lr = T::from_f64_lossy(lr);
    for (p, g) in model.params_mut().into_iter().zip(grad.params()) {
        for (x, &y) in p.data.iter_mut().zip(g.data) {
            *x -= lr * y;
        }
    }
}

/// Greedy translations of every example, in order.
pub fn translate_all(model: &GuidedModel<f32>, examples: &[Example<f32>], exec: Exec) -> Result<Vec<Vec<usize>>> {
    exec.map(examples, |ex| {
        let limit = (2 * ex.src.len() + 10).min(model.net.cfg.max_len - 1);
        model.greedy_translate(&ex.src, ex.images.as_ref(), limit)
    })
    .into_iter()
    .collect()
}

pub fn dev_bleu(model: &GuidedModel<f32>, dev: &[Example<f32>], exec: Exec) -> Result<f64> {
    if dev.is_empty() {
        return Ok(0.0);
    }
    let hyps = translate_all(model, dev, exec)?;
    let refs: Vec<Vec<usize>> = dev.iter().map(|e| e.tgt.clone()).collect();
    bleu4(&hyps, &refs)
}

pub fn train(
    mut model: GuidedModel<f32>,
    train_set: &[Example<f32>],
    dev_set: &[Example<f32>],
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() && cfg.max_steps > 0 {
        return Err(Error::Precondition("empty training set".into()));
    }
    let d_model = model.net.cfg.d_model;
    model.net.cfg.dropout = cfg.dropout;
    let mut best = model.clone();
    let mut best_bleu = f64::NEG_INFINITY;
    let mut log = Vec::new();
    let mut step_losses = Vec::new();
    if cfg.max_steps == 0 {
        return Ok(TrainOutcome {
            best,
            best_dev_bleu: 0.0,
            log,
            step_losses,
        });
    }
    let mut step = 0usize;
    let mut stale_epochs = 0usize;
    let mut epoch = 0usize;
    while step < cfg.max_steps {
        epoch += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 0xba7c4, epoch as u64]));
        let batches = make_batches(train_set, cfg.batch_size, &mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0usize;
        let mut lr = 0.0;
        for batch in &batches {
            step += 1;
            let (loss, grad) = batch_gradients(&model, train_set, batch, cfg.dropout, cfg.seed, step, exec)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            lr = cfg.lr_scale * lr_at(step, d_model, cfg.warmup_steps);
            sgd_step(&mut model, &grad, lr);
            step_losses.push(loss);
            epoch_loss += loss;
            epoch_steps += 1;
            if step >= cfg.max_steps {
                break;
            }
        }
        let bleu = dev_bleu(&model, dev_set, exec)?;
        log.push(EpochMetrics {
            epoch,
            step,
            train_loss: epoch_loss / epoch_steps.max(1) as f64,
            dev_bleu: bleu,
            lr,
        });
        if bleu > best_bleu {
            best_bleu = bleu;
            best = model.clone();
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
            if stale_epochs >= cfg.patience {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        best,
        best_dev_bleu: best_bleu,
        log,
        step_losses,
    })
}

/// Text preprocessing shared by dictionary building and task data.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocess {
    pub tokenizer: TokenizerConfig,
    pub stoplist: StopWordList,
}

impl Default for Preprocess {
    fn default() -> Self {
        Self {
            tokenizer: TokenizerConfig::whitespace(),
            stoplist: StopWordList::english(),
        }
    }
}

impl Preprocess {
    pub fn source_tokens(&self, text: &str) -> Vec<String> {
        tokenize(text, &self.tokenizer, &self.stoplist).into_inner()
    }

    /// Targets are split on whitespace only: no filtering, case kept.
    pub fn target_tokens(text: &str) -> Vec<String> {
        text.split_whitespace().map(str::to_string).collect()
    }
}

/// Dictionary, features and retrieval width for fusion-mode data.
pub struct VisualContext<'a> {
    pub dict: &'a WordImageDictionary,
    pub store: &'a ImageFeatureStore,
    pub m: usize,
}

/// Raw parallel data; `images[i]` is the image paired with source `i`, if any.
#[derive(Debug, Clone, Default)]
pub struct ParallelText {
    pub sources: Vec<String>,
    pub targets: Vec<String>,
    pub images: Vec<Option<String>>,
}

impl ParallelText {
    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }
}

pub fn build_vocabs(data: &ParallelText, pre: &Preprocess) -> (Vocab, Vocab) {
    let src = Vocab::from_tokens(data.sources.iter().flat_map(|s| pre.source_tokens(s)));
    let tgt = Vocab::from_tokens(data.targets.iter().flat_map(|t| Preprocess::target_tokens(t)));
    (src, tgt)
}

pub fn prepare_examples(
    data: &ParallelText,
    src_vocab: &Vocab,
    tgt_vocab: &Vocab,
    pre: &Preprocess,
    visual: Option<&VisualContext<'_>>,
) -> Result<Vec<Example<f32>>> {
    if data.targets.len() != data.sources.len() {
        return Err(Error::Precondition(format!(
            "{} sources but {} targets",
            data.sources.len(),
            data.targets.len()
        )));
    }
    let mut out = Vec::with_capacity(data.len());
    for (i, (s, t)) in data.sources.iter().zip(&data.targets).enumerate() {
        let tokens = tokenize(s, &pre.tokenizer, &pre.stoplist);
        let images = match visual {
            Some(v) => {
                let paired = data.images.get(i).and_then(|p| p.as_deref());
                Some(assemble_with_paired(v.dict, v.store, &tokens, v.m, paired)?)
            }
            None => None,
        };
        out.push(Example {
            src: src_vocab.encode(tokens.tokens()),
            tgt: tgt_vocab.encode(&Preprocess::target_tokens(t)),
            images,
        });
    }
    Ok(out)
}
