//! Independent oracles shared by the integration tests and the acceptance
//! harness.
#![allow(dead_code)]

use std::collections::HashMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use visguide::corpus::{tokenize, SentenceImagePair, StopWordList, TokenizerConfig};
use visguide::fusion::{fusion_forward, fusion_gradients, FusionParams};
use visguide::model::{GuidedModel, ModelConfig};
use visguide::nn::{Dropout, Parameterized};
use visguide::training::{example_gradients, Example};
use visguide::ImageTensor;

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-3;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

pub fn random_images(rng: &mut ChaCha8Rng, n: usize, m: usize, d_img: usize) -> ImageTensor<f64> {
    let mut t = ImageTensor::zeros(n, m, d_img);
    for i in 0..n {
        // token 0 always has every slot, the last token has none
        let valid = if i == 0 {
            m
        } else if i + 1 == n && n > 1 {
            0
        } else {
            rng.random_range(1..=m)
        };
        for j in 0..valid {
            t.mask[[i, j]] = true;
            for k in 0..d_img {
                t.values[[i, j, k]] = rng.random_range(-1.0..1.0);
            }
        }
    }
    t
}

pub fn random2(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((r, c), || rng.random_range(-1.0..1.0))
}

/// Weighted sum of the fused output, so every output element matters.
pub fn fusion_objective(p: &FusionParams<f64>, h: &Array2<f64>, img: &ImageTensor<f64>, w: &Array2<f64>) -> f64 {
    let (fused, _) = fusion_forward(p, h.view(), img).unwrap();
    (&fused * w).sum()
}

pub fn check_fusion(seed: u64, d: usize, d_img: usize, n: usize, m: usize) -> (usize, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = FusionParams::<f64>::init(&mut rng, d_img, d);
    // move the gate away from its initial bias so both branches carry weight
    params.gate_bias[0] = rng.random_range(-1.0..1.0);
    let h = random2(&mut rng, n, d);
    let img = random_images(&mut rng, n, m, d_img);
    let w = random2(&mut rng, n, d);

    let (_, cache) = fusion_forward(&params, h.view(), &img).unwrap();
    let grads = fusion_gradients(&params, &cache, w.view());
    let mut worst = 0.0f64;
    let mut checked = 0;

    for idx in 0..h.len() {
        let mut hp = h.clone();
        let mut hm = h.clone();
        hp.as_slice_mut().unwrap()[idx] += EPS;
        hm.as_slice_mut().unwrap()[idx] -= EPS;
        let num = (fusion_objective(&params, &hp, &img, &w) - fusion_objective(&params, &hm, &img, &w)) / (2.0 * EPS);
        worst = worst.max(rel_err(grads.h.as_slice().unwrap()[idx], num));
        checked += 1;
    }

    let (nn, mm, kk) = img.values.dim();
    for i in 0..nn {
        for j in 0..mm {
            for k in 0..kk {
                let mut ip = img.clone();
                let mut im = img.clone();
                ip.values[[i, j, k]] += EPS;
                im.values[[i, j, k]] -= EPS;
                let num = (fusion_objective(&params, &h, &ip, &w) - fusion_objective(&params, &h, &im, &w)) / (2.0 * EPS);
                let ana = grads.images[[i, j, k]];
                if !img.mask[[i, j]] {
                    assert_eq!(ana, 0.0, "masked slot ({i},{j}) has gradient");
                    assert_eq!(num, 0.0, "masked slot ({i},{j}) changes output");
                }
                worst = worst.max(rel_err(ana, num));
                checked += 1;
            }
        }
    }

    let analytic: Vec<f64> = grads.params.params().iter().flat_map(|p| p.data.to_vec()).collect();
    let mut flat = 0;
    let n_tensors = params.params().len();
    for t in 0..n_tensors {
        let len = params.params()[t].data.len();
        for e in 0..len {
            let mut pp = params.clone();
            let mut pm = params.clone();
            pp.params_mut()[t].data[e] += EPS;
            pm.params_mut()[t].data[e] -= EPS;
            let num = (fusion_objective(&pp, &h, &img, &w) - fusion_objective(&pm, &h, &img, &w)) / (2.0 * EPS);
            worst = worst.max(rel_err(analytic[flat], num));
            flat += 1;
            checked += 1;
        }
    }
    (checked, worst)
}

pub fn small_cfg(d_model: usize, heads: usize) -> ModelConfig {
    ModelConfig {
        d_model,
        n_layers_enc: 2,
        n_layers_dec: 2,
        n_heads: heads,
        d_ff: 2 * d_model,
        vocab_src: 9,
        vocab_tgt: 8,
        dropout: 0.2,
        max_len: 12,
    }
}

pub fn full_loss(model: &GuidedModel<f64>, ex: &Example<f64>, dropout: Dropout) -> f64 {
    example_gradients(model, ex, dropout).unwrap().0
}

pub fn check_full_path(seed: u64, d_model: usize, heads: usize, n: usize, m: usize, fusion: bool, dropout: Dropout) -> (f64, String) {
    let cfg = small_cfg(d_model, heads);
    let d_img = 5;
    let mut model = GuidedModel::<f64>::init(&cfg, fusion.then_some(d_img), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    if let Some(f) = model.fusion.as_mut() {
        f.gate_bias[0] = 0.3;
    }
    let ex = Example {
        src: (0..n).map(|_| rng.random_range(4..cfg.vocab_src)).collect(),
        tgt: (0..n.saturating_sub(1).max(1)).map(|_| rng.random_range(4..cfg.vocab_tgt)).collect(),
        images: fusion.then(|| random_images(&mut rng, n, m, d_img)),
    };
    let (_, _, grad) = example_gradients(&model, &ex, dropout).unwrap();
    let analytic: Vec<Vec<f64>> = grad.params().iter().map(|p| p.data.to_vec()).collect();
    let names: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();
    let mut worst = (0.0f64, String::new());
    for (t, name) in names.iter().enumerate() {
        let len = analytic[t].len();
        for e in 0..len {
            let orig = model.params()[t].data[e];
            model.params_mut()[t].data[e] = orig + EPS;
            let lp = full_loss(&model, &ex, dropout);
            model.params_mut()[t].data[e] = orig - EPS;
            let lm = full_loss(&model, &ex, dropout);
            model.params_mut()[t].data[e] = orig;
            let num = (lp - lm) / (2.0 * EPS);
            let err = rel_err(analytic[t][e], num);
            if err > worst.0 {
                worst = (err, format!("{name}[{e}]: analytic {} numeric {num}", analytic[t][e]));
            }
        }
    }
    worst
}


/// Brute-force word-image counting: for every token, scan all pairs again
/// and count the images of pairs whose token set contains it.
pub fn dictionary_oracle(
    pairs: &[SentenceImagePair],
    cfg: &TokenizerConfig,
    stoplist: &StopWordList,
) -> Vec<(String, Vec<(String, u32)>)> {
    let token_sets: Vec<Vec<String>> = pairs
        .iter()
        .map(|p| tokenize(&p.text, cfg, stoplist).into_inner())
        .collect();
    let mut order: Vec<String> = Vec::new();
    for tokens in &token_sets {
        for t in tokens {
            if !order.contains(t) {
                order.push(t.clone());
            }
        }
    }
    order
        .into_iter()
        .map(|token| {
            let mut images: Vec<(String, u32)> = Vec::new();
            for (p, tokens) in pairs.iter().zip(&token_sets) {
                if !tokens.contains(&token) {
                    continue;
                }
                match images.iter_mut().find(|(id, _)| *id == p.image_id) {
                    Some(e) => e.1 += 1,
                    None => images.push((p.image_id.clone(), 1)),
                }
            }
            // insertion sort keeps ties in first-seen order
            let mut sorted: Vec<(String, u32)> = Vec::new();
            for item in images {
                let at = sorted.iter().position(|(_, c)| *c < item.1).unwrap_or(sorted.len());
                sorted.insert(at, item);
            }
            (token, sorted)
        })
        .collect()
}

pub fn random_corpus(rng: &mut ChaCha8Rng, max_pairs: usize, max_vocab: usize) -> Vec<SentenceImagePair> {
    let n = rng.random_range(1..=max_pairs);
    let vocab = rng.random_range(1..=max_vocab);
    let images = rng.random_range(1..=20);
    (0..n)
        .map(|_| {
            let len = rng.random_range(1..=8);
            let words: Vec<String> = (0..len).map(|_| format!("v{}", rng.random_range(0..vocab))).collect();
            SentenceImagePair::new(words.join(" "), format!("img{}", rng.random_range(0..images))).unwrap()
        })
        .collect()
}

/// Corpus BLEU-4 written directly from the definition: clipped n-gram
/// counts over joined strings, product of precisions, brevity penalty.
pub fn reference_bleu(hyps: &[Vec<String>], refs: &[Vec<String>]) -> f64 {
    let grams = |s: &[String], n: usize| -> HashMap<String, usize> {
        let mut m = HashMap::new();
        if s.len() >= n {
            for i in 0..=s.len() - n {
                *m.entry(s[i..i + n].join("\u{1}")).or_insert(0) += 1;
            }
        }
        m
    };
    let mut product = 1.0f64;
    for n in 1..=4 {
        let (mut num, mut den) = (0usize, 0usize);
        for (h, r) in hyps.iter().zip(refs) {
            let hg = grams(h, n);
            let rg = grams(r, n);
            for (g, c) in &hg {
                num += (*c).min(*rg.get(g).unwrap_or(&0));
                den += c;
            }
        }
        if num == 0 || den == 0 {
            return 0.0;
        }
        product *= num as f64 / den as f64;
    }
    let c: usize = hyps.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    100.0 * bp * product.powf(0.25)
}

/// Exact two-sided binomial tail at p = 1/2 from integer Pascal coefficients.
pub fn exact_sign_p(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    let mut row = vec![1u64];
    for _ in 0..n {
        let mut next = vec![1u64; row.len() + 1];
        for i in 1..row.len() {
            next[i] = row[i - 1] + row[i];
        }
        row = next;
    }
    let k = wins.min(losses);
    let tail: u64 = row[..=k].iter().sum();
    (2.0 * tail as f64 / (1u64 << n) as f64).min(1.0)
}
