//! Command-line front end.
//!
//! Every subcommand also accepts `--config <file.json>`: a JSON object whose
//! keys are flag names (`batch-size` or `batch_size`). Values given on the
//! command line win over the file.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::benchmark::{generate, load_split, write_benchmark, DisambiguationSpec, FEATURES_FILE};
use crate::checkpoint::Checkpoint;
use crate::corpus::{load_merges, load_pairs, StopWordList, TokenizerConfig};
use crate::dictionary::WordImageDictionary;
use crate::error::{Error, Result};
use crate::eval::{ambiguous_token_accuracy, bleu4, coverage, sentence_bleu4, sign_test};
use crate::experiment::{run, sweep_csv, sweep_m, BenchmarkText, ModelShape};
use crate::features::{assemble_with_paired, ImageFeatureStore};
use crate::parallel::Exec;
use crate::training::{write_metrics_log, Preprocess, TrainConfig};
use crate::corpus::tokenize;

#[derive(Parser, Debug)]
#[command(name = "visguide", version, about = "Word-image dictionaries and visually guided translation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build a word-image dictionary from a sentence-image TSV corpus.
    BuildDict {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        text: TextArgs,
    },
    /// Print one token's dictionary entry.
    Inspect {
        #[arg(long)]
        dict: PathBuf,
        #[arg(long)]
        token: String,
        /// Show at most this many images.
        #[arg(long)]
        m: Option<usize>,
    },
    /// Fraction of token occurrences with a non-empty dictionary entry.
    Coverage {
        #[arg(long)]
        dict: PathBuf,
        /// One sentence per line; anything after a TAB is ignored.
        #[arg(long)]
        texts: PathBuf,
        #[command(flatten)]
        text: TextArgs,
    },
    /// Write the synthetic disambiguation benchmark to a directory.
    GenBench {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        ambiguous_types: usize,
        #[arg(long, default_value_t = 20)]
        context_tokens: usize,
        #[arg(long, default_value_t = 3)]
        context_per_sentence: usize,
        #[arg(long, default_value_t = 5000)]
        n_train: usize,
        #[arg(long, default_value_t = 200)]
        n_dev: usize,
        #[arg(long, default_value_t = 500)]
        n_test: usize,
        #[arg(long, default_value_t = 16)]
        d_img: usize,
        #[arg(long, default_value_t = 10.0)]
        center_distance: f64,
        #[arg(long, default_value_t = 1.0)]
        noise_std: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Train on a benchmark-layout directory and write a checkpoint.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum, default_value_t = Mode::Visual)]
        mode: Mode,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch metrics, one JSON object per line.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Test-split hypotheses, one per line.
        #[arg(long)]
        hyp_out: Option<PathBuf>,
    },
    /// Translate sentences with a checkpoint.
    Translate {
        #[arg(long)]
        model: PathBuf,
        /// One sentence per line, optionally followed by TAB and a paired image id.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Required for models trained with visual guidance.
        #[arg(long)]
        dict: Option<PathBuf>,
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Score hypotheses with BLEU-4.
    Evaluate {
        #[arg(long)]
        hyp: PathBuf,
        /// References, one per line. Lines of the form `<sentence>\t<position>`
        /// also report ambiguous-token accuracy.
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Second system for a paired sign test on sentence BLEU.
        #[arg(long)]
        compare: Option<PathBuf>,
    },
    /// Train visual-guidance models for several m and write a CSV.
    SweepM {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated m values.
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 3, 4, 5, 6, 7])]
        ms: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Baseline,
    Visual,
}

/// Tokenization flags shared by dictionary-related subcommands.
#[derive(Args, Debug, Clone)]
pub struct TextArgs {
    /// Ordered BPE merge rules, one `left right` pair per line.
    #[arg(long)]
    merges: Option<PathBuf>,
    /// Keep case; tokens are lowercased by default.
    #[arg(long)]
    no_lowercase: bool,
    /// Stop-word file; defaults to the bundled English list.
    #[arg(long)]
    stopwords: Option<PathBuf>,
    #[arg(long, conflicts_with = "stopwords")]
    no_stopwords: bool,
}

impl TextArgs {
    fn preprocess(&self) -> Result<Preprocess> {
        let tokenizer = match &self.merges {
            Some(p) => TokenizerConfig::bpe(load_merges(p)?),
            None => TokenizerConfig::whitespace(),
        }
        .with_lowercase(!self.no_lowercase);
        tokenizer.validate()?;
        let stoplist = if self.no_stopwords {
            StopWordList::empty()
        } else if let Some(p) = &self.stopwords {
            StopWordList::load(p)?
        } else {
            StopWordList::english()
        };
        Ok(Preprocess { tokenizer, stoplist })
    }
}

/// Data, model and optimization flags for training flows.
#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    /// Directory holding {train,dev,test}.tsv, {train,dev,test}.gold and features.lvf.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    text: TextArgs,
    #[arg(long, default_value_t = 32)]
    d_model: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 64)]
    d_ff: usize,
    #[arg(long, default_value_t = 64)]
    max_len: usize,
    #[arg(long, default_value_t = 100)]
    warmup: usize,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.15)]
    dropout: f64,
    #[arg(long, default_value_t = 10)]
    patience: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    m: usize,
    /// Multiplier on the warm-up learning-rate schedule.
    #[arg(long, default_value_t = 50.0)]
    lr_scale: f64,
    /// Compute per-example gradients on all cores. Results are identical.
    #[arg(long)]
    parallel: bool,
}

impl RunArgs {
    fn shape(&self) -> ModelShape {
        ModelShape {
            d_model: self.d_model,
            n_layers_enc: self.layers,
            n_layers_dec: self.layers,
            n_heads: self.heads,
            d_ff: self.d_ff,
            max_len: self.max_len,
        }
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            warmup_steps: self.warmup,
            max_steps: self.steps,
            batch_size: self.batch_size,
            dropout: self.dropout,
            patience: self.patience,
            seed: self.seed,
            m: self.m,
            lr_scale: self.lr_scale,
        }
    }

    fn exec(&self) -> Exec {
        if self.parallel {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }

    fn load(&self) -> Result<(BenchmarkText, ImageFeatureStore)> {
        let train = load_split(&self.data, "train")?;
        let dev = load_split(&self.data, "dev")?;
        let test = load_split(&self.data, "test")?;
        let store = ImageFeatureStore::load(self.data.join(FEATURES_FILE))?;
        Ok((BenchmarkText::from_splits(&train, &dev, &test), store))
    }
}

/// Parses arguments (including the program name), runs, and returns the
/// process exit status.
pub fn main_with_args(args: Vec<OsString>) -> i32 {
    let args = match merge_config(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let mut stdout = std::io::stdout().lock();
    match execute(cli.command, &mut stdout) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Appends `--key value` for every config-file key not already given as a flag.
fn merge_config(mut args: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(pos) = args.iter().position(|a| a == "--config") else {
        return Ok(args);
    };
    let path = args
        .get(pos + 1)
        .map(PathBuf::from)
        .ok_or_else(|| Error::Precondition("--config needs a file argument".into()))?;
    args.drain(pos..pos + 2);
    let content = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let value: serde_json::Value = serde_json::from_str(&content)?;
    let obj = value
        .as_object()
        .ok_or_else(|| Error::Format(format!("{}: config must be a JSON object", path.display())))?;
    for (key, value) in obj {
        let flag = format!("--{}", key.replace('_', "-"));
        let given = args.iter().any(|a| {
            a.to_str()
                .is_some_and(|s| s == flag || s.starts_with(&format!("{flag}=")))
        });
        if given {
            continue;
        }
        match value {
            serde_json::Value::Bool(true) => args.push(flag.into()),
            serde_json::Value::Bool(false) | serde_json::Value::Null => {}
            serde_json::Value::String(s) => {
                args.push(flag.into());
                args.push(s.into());
            }
            serde_json::Value::Number(n) => {
                args.push(flag.into());
                args.push(n.to_string().into());
            }
            serde_json::Value::Array(items) => {
                let joined: Vec<String> = items
                    .iter()
                    .map(|v| v.as_str().map_or_else(|| v.to_string(), str::to_string))
                    .collect();
                args.push(flag.into());
                args.push(joined.join(",").into());
            }
            serde_json::Value::Object(_) => {
                return Err(Error::Format(format!("config key `{key}`: nested objects are not flags")));
            }
        }
    }
    Ok(args)
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(content.lines().map(str::to_string).collect())
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    std::fs::write(path, content).map_err(|e| Error::io(path, e))
}

fn out_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

pub fn execute(command: Command, out: &mut impl Write) -> Result<()> {
    match command {
        Command::BuildDict { pairs, out: path, text } => {
            let pre = text.preprocess()?;
            let pairs = load_pairs(&pairs)?;
            let dict = WordImageDictionary::build(&pairs, &pre.tokenizer, &pre.stoplist);
            dict.save(&path)?;
            writeln!(out, "{} tokens from {} pairs", dict.len(), pairs.len()).map_err(out_err)?;
        }
        Command::Inspect { dict, token, m } => {
            let dict = WordImageDictionary::load(&dict)?;
            let entry = dict.entry(&token);
            let shown = &entry[..m.unwrap_or(entry.len()).min(entry.len())];
            let items: Vec<(&str, u32)> = shown.iter().map(|e| (e.image_id.as_str(), e.count)).collect();
            writeln!(out, "{token}\t{}", serde_json::to_string(&items)?).map_err(out_err)?;
        }
        Command::Coverage { dict, texts, text } => {
            let pre = text.preprocess()?;
            let dict = WordImageDictionary::load(&dict)?;
            let lines: Vec<String> = read_lines(&texts)?
                .into_iter()
                .map(|l| l.split('\t').next().unwrap_or("").to_string())
                .collect();
            let ratio = coverage(&dict, &lines, &pre.tokenizer, &pre.stoplist);
            writeln!(out, "{ratio:.4}").map_err(out_err)?;
        }
        Command::GenBench {
            out: dir,
            ambiguous_types,
            context_tokens,
            context_per_sentence,
            n_train,
            n_dev,
            n_test,
            d_img,
            center_distance,
            noise_std,
            seed,
        } => {
            let spec = DisambiguationSpec {
                n_ambiguous_types: ambiguous_types,
                senses_per_type: 2,
                n_context_tokens: context_tokens,
                context_per_sentence,
                n_train,
                n_dev,
                n_test,
                d_img,
                center_distance,
                noise_std,
                seed,
            };
            let bench = generate(&spec)?;
            write_benchmark(&bench, &dir)?;
            writeln!(out, "wrote {} / {} / {} sentences to {}", n_train, n_dev, n_test, dir.display())
                .map_err(out_err)?;
        }
        Command::Train {
            run: args,
            mode,
            out: path,
            metrics,
            hyp_out,
        } => {
            let pre = args.text.preprocess()?;
            let (text, store) = args.load()?;
            let report = run(
                &text.task(Some(&store)),
                &args.shape(),
                &args.train_config(),
                mode == Mode::Visual,
                &pre,
                args.exec(),
            )?;
            report.checkpoint.save(&path)?;
            if let Some(p) = metrics {
                write_metrics_log(p, &report.outcome.log)?;
            }
            if let Some(p) = hyp_out {
                let body: String = report.hypotheses.iter().map(|h| h.join(" ") + "\n").collect();
                write_file(&p, &body)?;
            }
            writeln!(out, "best_dev_bleu {:.4}", report.outcome.best_dev_bleu).map_err(out_err)?;
            writeln!(out, "test_bleu {:.4}", report.test_bleu).map_err(out_err)?;
            if let Some(acc) = report.ambiguous_accuracy {
                writeln!(out, "amb_acc {acc:.4}").map_err(out_err)?;
            }
        }
        Command::Translate {
            model,
            input,
            out: path,
            dict,
            features,
            max_len,
        } => {
            let ck = Checkpoint::load(&model)?;
            let visual = match (&ck.model.fusion, dict, features) {
                (None, _, _) => None,
                (Some(_), Some(d), Some(f)) => Some((WordImageDictionary::load(&d)?, ImageFeatureStore::load(&f)?)),
                (Some(_), _, _) => {
                    return Err(Error::Precondition(
                        "this model uses visual guidance: pass --dict and --features".into(),
                    ))
                }
            };
            let mut body = String::new();
            for line in read_lines(&input)? {
                let (text, paired) = match line.split_once('\t') {
                    Some((t, i)) => (t, Some(i.trim())),
                    None => (line.as_str(), None),
                };
                let tokens = tokenize(text, &ck.preprocess.tokenizer, &ck.preprocess.stoplist);
                let src = ck.src_vocab.encode(tokens.tokens());
                let images = match &visual {
                    Some((d, s)) => Some(assemble_with_paired(d, s, &tokens, ck.m, paired)?),
                    None => None,
                };
                let limit = max_len.unwrap_or(2 * src.len() + 10);
                let ids = ck.model.greedy_translate(&src, images.as_ref(), limit)?;
                body.push_str(&ck.tgt_vocab.decode(&ids).join(" "));
                body.push('\n');
            }
            write_file(&path, &body)?;
        }
        Command::Evaluate { hyp, reference, compare } => {
            let split = |lines: Vec<String>| -> Vec<Vec<String>> {
                lines.iter().map(|l| Preprocess::target_tokens(l)).collect()
            };
            let hyps = split(read_lines(&hyp)?);
            let mut refs = Vec::new();
            let mut positions = Vec::new();
            for line in read_lines(&reference)? {
                match line.rsplit_once('\t') {
                    Some((t, p)) => {
                        refs.push(Preprocess::target_tokens(t));
                        positions.push(p.trim().parse::<usize>().map_err(|e| {
                            Error::Format(format!("{}: bad position `{p}`: {e}", reference.display()))
                        })?);
                    }
                    None => refs.push(Preprocess::target_tokens(&line)),
                }
            }
            let bleu = if hyps.is_empty() && refs.is_empty() {
                0.0
            } else {
                bleu4(&hyps, &refs)?
            };
            writeln!(out, "{bleu:.4}").map_err(out_err)?;
            if positions.len() == refs.len() && !refs.is_empty() {
                let acc = ambiguous_token_accuracy(&hyps, &refs, &positions)?;
                writeln!(out, "amb_acc {acc:.4}").map_err(out_err)?;
            }
            if let Some(other) = compare {
                let others = split(read_lines(&other)?);
                if others.len() != refs.len() {
                    return Err(Error::Precondition(format!(
                        "{} comparison lines but {} references",
                        others.len(),
                        refs.len()
                    )));
                }
                let a: Vec<f64> = hyps.iter().zip(&refs).map(|(h, r)| sentence_bleu4(h, r)).collect();
                let b: Vec<f64> = others.iter().zip(&refs).map(|(h, r)| sentence_bleu4(h, r)).collect();
                writeln!(out, "sign_test_p {:.6}", sign_test(&a, &b)?).map_err(out_err)?;
            }
        }
        Command::SweepM { run: args, ms, out: path } => {
            if ms.is_empty() {
                return Err(Error::Precondition("--ms needs at least one value".into()));
            }
            let pre = args.text.preprocess()?;
            let (text, store) = args.load()?;
            let rows = sweep_m(
                &text.task(Some(&store)),
                &args.shape(),
                &args.train_config(),
                &ms,
                &pre,
                args.exec(),
            )?;
            let csv = sweep_csv(&rows);
            write_file(&path, &csv)?;
            write!(out, "{csv}").map_err(out_err)?;
        }
    }
    Ok(())
}
