use visguide::benchmark::{generate, DisambiguationSpec};
use visguide::checkpoint::Checkpoint;
use visguide::dictionary::WordImageDictionary;
use visguide::experiment::{training_pairs, BenchmarkText, ModelShape};
use visguide::nn::Parameterized;
use visguide::training::{batch_gradients, build_vocabs, prepare_examples, Example, Preprocess, VisualContext};
use visguide::{train, Error, Exec, GuidedModel, TrainConfig};

struct Setup {
    model: GuidedModel<f32>,
    train: Vec<Example<f32>>,
    dev: Vec<Example<f32>>,
    checkpoint_parts: (visguide::vocab::Vocab, visguide::vocab::Vocab, Preprocess),
}

fn setup(visual: bool) -> Setup {
    let bench = generate(&DisambiguationSpec {
        n_train: 120,
        n_dev: 16,
        n_test: 0,
        ..DisambiguationSpec::default()
    })
    .unwrap();
    let text = BenchmarkText::from_benchmark(&bench);
    let pre = Preprocess::default();
    let (sv, tv) = build_vocabs(&text.train, &pre);
    let dict = WordImageDictionary::build(&training_pairs(&text.train).unwrap(), &pre.tokenizer, &pre.stoplist);
    let ctx = VisualContext {
        dict: &dict,
        store: &bench.store,
        m: 3,
    };
    let ctx = visual.then_some(&ctx);
    let train = prepare_examples(&text.train, &sv, &tv, &pre, ctx).unwrap();
    let dev = prepare_examples(&text.dev, &sv, &tv, &pre, ctx).unwrap();
    let shape = ModelShape {
        d_model: 16,
        n_layers_enc: 1,
        n_layers_dec: 1,
        n_heads: 2,
        d_ff: 32,
        max_len: 32,
    };
    let model = GuidedModel::init(&shape.config(sv.len(), tv.len(), 0.1), visual.then_some(bench.store.dim()), 3).unwrap();
    Setup {
        model,
        train,
        dev,
        checkpoint_parts: (sv, tv, pre),
    }
}

fn cfg(steps: usize) -> TrainConfig {
    TrainConfig {
        warmup_steps: 100,
        max_steps: steps,
        batch_size: 8,
        dropout: 0.1,
        patience: 100,
        seed: 5,
        m: 3,
        lr_scale: 50.0,
    }
}

fn flat(model: &GuidedModel<f32>) -> Vec<f32> {
    model.params().into_iter().flat_map(|p| p.data.to_vec()).collect()
}

#[test]
fn same_seed_reproduces_training() {
    let s = setup(true);
    let a = train(s.model.clone(), &s.train, &s.dev, &cfg(40), Exec::Sequential).unwrap();
    let b = train(s.model.clone(), &s.train, &s.dev, &cfg(40), Exec::Sequential).unwrap();
    assert_eq!(a.step_losses, b.step_losses);
    assert_eq!(a.log, b.log);
    assert_eq!(flat(&a.best), flat(&b.best));
    let c = train(s.model, &s.train, &s.dev, &TrainConfig { seed: 6, ..cfg(40) }, Exec::Sequential).unwrap();
    assert_ne!(a.step_losses, c.step_losses);
}

#[test]
fn parallel_matches_sequential() {
    let s = setup(true);
    let seq = train(s.model.clone(), &s.train, &s.dev, &cfg(30), Exec::Sequential).unwrap();
    let par = train(s.model, &s.train, &s.dev, &cfg(30), Exec::Parallel).unwrap();
    assert_eq!(seq.step_losses, par.step_losses);
    assert_eq!(flat(&seq.best), flat(&par.best));
}

#[test]
fn zero_steps_returns_initial_model() {
    let s = setup(false);
    let out = train(s.model.clone(), &s.train, &s.dev, &cfg(0), Exec::Sequential).unwrap();
    assert!(out.step_losses.is_empty());
    assert!(out.log.is_empty());
    assert_eq!(flat(&out.best), flat(&s.model));
}

#[test]
fn one_batch_touches_every_parameter() {
    for visual in [false, true] {
        let s = setup(visual);
        let batch: Vec<usize> = (0..s.train.len()).collect();
        let (_, grad) = batch_gradients(&s.model, &s.train, &batch, 0.0, 1, 1, Exec::Sequential).unwrap();
        for p in grad.params() {
            // key biases cancel in the softmax and have exactly zero gradient
            if p.name.ends_with("key.bias") {
                continue;
            }
            assert!(p.data.iter().any(|&g| g != 0.0), "no gradient reaches {}", p.name);
        }
        let out = train(s.model.clone(), &s.train, &s.dev, &cfg(5), Exec::Sequential).unwrap();
        let moved = out.best.params().into_iter().zip(s.model.params()).filter(|(a, b)| a.data != b.data).count();
        assert!(moved > 0);
    }
}

#[test]
fn nan_parameters_stop_training() {
    let s = setup(false);
    let mut model = s.model;
    for p in model.params_mut().into_iter().take(1) {
        p.data.fill(f32::NAN);
    }
    let err = train(model, &s.train, &s.dev, &cfg(10), Exec::Sequential).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { step: 1 }), "{err}");
}

#[test]
fn trained_checkpoint_round_trips() {
    let s = setup(true);
    let out = train(s.model, &s.train, &s.dev, &cfg(20), Exec::Sequential).unwrap();
    let (src_vocab, tgt_vocab, preprocess) = s.checkpoint_parts;
    let ck = Checkpoint {
        model: out.best,
        src_vocab,
        tgt_vocab,
        preprocess,
        m: 3,
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.lvm");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(flat(&back.model), flat(&ck.model));
    assert_eq!(back.m, 3);
    assert_eq!(back.preprocess, ck.preprocess);
    let ex = &s.dev[0];
    assert_eq!(
        back.model.greedy_translate(&ex.src, ex.images.as_ref(), 20).unwrap(),
        ck.model.greedy_translate(&ex.src, ex.images.as_ref(), 20).unwrap()
    );
}
