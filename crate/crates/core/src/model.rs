//! Toy post-LN transformer encoder-decoder with analytic gradients, plus the
//! combined text + visual-guidance model used for translation.

use ndarray::{Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::ImageTensor;
use crate::fusion::{fusion_forward, FusionParams};
use crate::nn::{
    apply_mask, mix_seed, positional_encoding, push_mut, push_ref, uniform2, AttentionCache, Dropout,
    FeedForward, FeedForwardCache, LayerNorm, LayerNormCache, MultiHeadAttention, ParamMut, ParamRef,
    Parameterized,
};
use crate::real::{c, Real};
use crate::vocab::{BOS, EOS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers_enc: usize,
    pub n_layers_dec: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_src: usize,
    pub vocab_tgt: usize,
    pub dropout: f64,
    pub max_len: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Precondition(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Precondition(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if self.d_ff == 0 || self.max_len == 0 || self.vocab_src == 0 || self.vocab_tgt == 0 {
            return Err(Error::Precondition("widths, vocabularies and max_len must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer<T> {
    pub self_attn: MultiHeadAttention<T>,
    pub norm1: LayerNorm<T>,
    pub ff: FeedForward<T>,
    pub norm2: LayerNorm<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer<T> {
    pub self_attn: MultiHeadAttention<T>,
    pub norm1: LayerNorm<T>,
    pub cross_attn: MultiHeadAttention<T>,
    pub norm2: LayerNorm<T>,
    pub ff: FeedForward<T>,
    pub norm3: LayerNorm<T>,
}

/// Parameters of the encoder-decoder. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct Seq2Seq<T> {
    pub cfg: ModelConfig,
    pub src_embed: Array2<T>,
    pub tgt_embed: Array2<T>,
    pub encoder: Vec<EncoderLayer<T>>,
    pub decoder: Vec<DecoderLayer<T>>,
    pub generator: crate::nn::Linear<T>,
    /// Test hook: when false, no positional encoding is added.
    pub use_positions: bool,
    positions: Array2<T>,
}

struct EncoderLayerCache<T> {
    attn: AttentionCache<T>,
    drop_attn: Option<Array2<T>>,
    norm1: LayerNormCache<T>,
    ff: FeedForwardCache<T>,
    drop_ff: Option<Array2<T>>,
    norm2: LayerNormCache<T>,
}

pub struct EncoderCache<T> {
    ids: Vec<usize>,
    drop_embed: Option<Array2<T>>,
    layers: Vec<EncoderLayerCache<T>>,
}

struct DecoderLayerCache<T> {
    self_attn: AttentionCache<T>,
    drop_self: Option<Array2<T>>,
    norm1: LayerNormCache<T>,
    cross_attn: AttentionCache<T>,
    drop_cross: Option<Array2<T>>,
    norm2: LayerNormCache<T>,
    ff: FeedForwardCache<T>,
    drop_ff: Option<Array2<T>>,
    norm3: LayerNormCache<T>,
}

pub struct DecoderCache<T> {
    ids: Vec<usize>,
    drop_embed: Option<Array2<T>>,
    layers: Vec<DecoderLayerCache<T>>,
    final_hidden: Array2<T>,
}

impl<T> EncoderCache<T> {
    /// Per-layer, per-head self-attention distributions.
    pub fn attention(&self) -> impl Iterator<Item = &Array2<T>> {
        self.layers.iter().flat_map(|l| l.attn.probs.iter())
    }
}

impl<T> DecoderCache<T> {
    pub fn self_attention(&self) -> impl Iterator<Item = &Array2<T>> {
        self.layers.iter().flat_map(|l| l.self_attn.probs.iter())
    }

    pub fn cross_attention(&self) -> impl Iterator<Item = &Array2<T>> {
        self.layers.iter().flat_map(|l| l.cross_attn.probs.iter())
    }
}

const SITE_ENC: u64 = 1_000;
const SITE_DEC: u64 = 2_000;

impl<T: Real> Seq2Seq<T> {
    /// Every tensor uniform in `±1/√d_model`, except layer-norm gains (1)
    /// and biases (0).
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x6d6f64656c]));
        let d = cfg.d_model;
        let bound = 1.0 / (d as f64).sqrt();
        let src_embed = uniform2(&mut rng, cfg.vocab_src, d, bound);
        let tgt_embed = uniform2(&mut rng, cfg.vocab_tgt, d, bound);
        let encoder = (0..cfg.n_layers_enc)
            .map(|_| EncoderLayer {
                self_attn: MultiHeadAttention::init(&mut rng, d, cfg.n_heads, bound),
                norm1: LayerNorm::new(d),
                ff: FeedForward::init(&mut rng, d, cfg.d_ff, bound),
                norm2: LayerNorm::new(d),
            })
            .collect();
        let decoder = (0..cfg.n_layers_dec)
            .map(|_| DecoderLayer {
                self_attn: MultiHeadAttention::init(&mut rng, d, cfg.n_heads, bound),
                norm1: LayerNorm::new(d),
                cross_attn: MultiHeadAttention::init(&mut rng, d, cfg.n_heads, bound),
                norm2: LayerNorm::new(d),
                ff: FeedForward::init(&mut rng, d, cfg.d_ff, bound),
                norm3: LayerNorm::new(d),
            })
            .collect();
        let generator = crate::nn::Linear::init(&mut rng, d, cfg.vocab_tgt, bound);
        Ok(Self {
            cfg: cfg.clone(),
            src_embed,
            tgt_embed,
            encoder,
            decoder,
            generator,
            use_positions: true,
            positions: positional_encoding(cfg.max_len, d),
        })
    }

    /// Same shapes, all zeros; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let cfg = &self.cfg;
        let d = cfg.d_model;
        Self {
            cfg: cfg.clone(),
            src_embed: Array2::zeros(self.src_embed.raw_dim()),
            tgt_embed: Array2::zeros(self.tgt_embed.raw_dim()),
            encoder: (0..cfg.n_layers_enc)
                .map(|_| EncoderLayer {
                    self_attn: MultiHeadAttention::zeros(d, cfg.n_heads),
                    norm1: LayerNorm::zeros(d),
                    ff: FeedForward::zeros(d, cfg.d_ff),
                    norm2: LayerNorm::zeros(d),
                })
                .collect(),
            decoder: (0..cfg.n_layers_dec)
                .map(|_| DecoderLayer {
                    self_attn: MultiHeadAttention::zeros(d, cfg.n_heads),
                    norm1: LayerNorm::zeros(d),
                    cross_attn: MultiHeadAttention::zeros(d, cfg.n_heads),
                    norm2: LayerNorm::zeros(d),
                    ff: FeedForward::zeros(d, cfg.d_ff),
                    norm3: LayerNorm::zeros(d),
                })
                .collect(),
            generator: crate::nn::Linear::zeros(d, cfg.vocab_tgt),
            use_positions: self.use_positions,
            positions: self.positions.clone(),
        }
    }

    pub fn cast<U: Real>(&self) -> Seq2Seq<U> {
        let mut out = Seq2Seq::<U>::init(&self.cfg, 0).expect("config already validated");
        out.use_positions = self.use_positions;
        for (dst, src) in out.params_mut().into_iter().zip(self.params()) {
            for (a, &b) in dst.data.iter_mut().zip(src.data) {
                *a = U::from_f64_lossy(b.to_f64_lossy());
            }
        }
        out
    }

    fn embed(&self, table: &Array2<T>, ids: &[usize]) -> Result<Array2<T>> {
        let vocab = table.nrows();
        if ids.len() > self.cfg.max_len {
            return Err(Error::Precondition(format!(
                "sequence length {} exceeds max_len {}",
                ids.len(),
                self.cfg.max_len
            )));
        }
        let d = self.cfg.d_model;
        let scale: T = c((d as f64).sqrt());
        let mut x = Array2::zeros((ids.len(), d));
        for (i, &id) in ids.iter().enumerate() {
            if id >= vocab {
                return Err(Error::Index { id, vocab });
            }
            let mut row = x.row_mut(i);
            row.assign(&table.row(id));
            row.mapv_inplace(|v| v * scale);
            if self.use_positions {
                row += &self.positions.row(i);
            }
        }
        Ok(x)
    }

    fn scatter_embed_grad(&self, table_grad: &mut Array2<T>, ids: &[usize], dx: &Array2<T>) {
        let scale: T = c((self.cfg.d_model as f64).sqrt());
        for (i, &id) in ids.iter().enumerate() {
            table_grad.row_mut(id).scaled_add(scale, &dx.row(i));
        }
    }

    /// Source ids → `n × d_model` text representation.
    pub fn encode(&self, ids: &[usize], dropout: Dropout) -> Result<(Array2<T>, EncoderCache<T>)> {
        let x = self.embed(&self.src_embed, ids)?;
        let n = ids.len();
        let d = self.cfg.d_model;
        let drop_embed = dropout.mask(SITE_ENC, n, d);
        let mut x = apply_mask(x, drop_embed.as_ref());
        let mut layers = Vec::with_capacity(self.encoder.len());
        for (l, layer) in self.encoder.iter().enumerate() {
            let site = SITE_ENC + 10 * (l as u64 + 1);
            let (a, attn) = layer.self_attn.forward(x.view(), x.view(), false);
            let drop_attn = dropout.mask(site, n, d);
            let r1 = &x + &apply_mask(a, drop_attn.as_ref());
            let (y1, norm1) = layer.norm1.forward(r1.view());
            let (f, ff) = layer.ff.forward(y1.view());
            let drop_ff = dropout.mask(site + 1, n, d);
            let r2 = &y1 + &apply_mask(f, drop_ff.as_ref());
            let (y2, norm2) = layer.norm2.forward(r2.view());
            layers.push(EncoderLayerCache {
                attn,
                drop_attn,
                norm1,
                ff,
                drop_ff,
                norm2,
            });
            x = y2;
        }
        Ok((
            x,
            EncoderCache {
                ids: ids.to_vec(),
                drop_embed,
                layers,
            },
        ))
    }

    pub fn encode_backward(&self, cache: &EncoderCache<T>, dh: ArrayView2<'_, T>, grad: &mut Self) {
        let mut dx = dh.to_owned();
        for (l, layer) in self.encoder.iter().enumerate().rev() {
            let lc = &cache.layers[l];
            let g = &mut grad.encoder[l];
            let dr2 = layer.norm2.backward(&lc.norm2, dx.view(), &mut g.norm2);
            let df = apply_mask(dr2.clone(), lc.drop_ff.as_ref());
            let dy1 = &dr2 + &layer.ff.backward(&lc.ff, df.view(), &mut g.ff);
            let dr1 = layer.norm1.backward(&lc.norm1, dy1.view(), &mut g.norm1);
            let da = apply_mask(dr1.clone(), lc.drop_attn.as_ref());
            let (dq, dkv) = layer.self_attn.backward(&lc.attn, da.view(), &mut g.self_attn);
            dx = dr1 + dq + dkv;
        }
        let dx = apply_mask(dx, cache.drop_embed.as_ref());
        self.scatter_embed_grad(&mut grad.src_embed, &cache.ids, &dx);
    }

    /// Decoder input ids (starting with BOS) attending over `memory` →
    /// `t × vocab_tgt` logits.
    pub fn decode(
        &self,
        ids: &[usize],
        memory: ArrayView2<'_, T>,
        dropout: Dropout,
    ) -> Result<(Array2<T>, DecoderCache<T>)> {
        if memory.ncols() != self.cfg.d_model {
            return Err(Error::Dimension(format!(
                "memory width {} != d_model {}",
                memory.ncols(),
                self.cfg.d_model
            )));
        }
        let x = self.embed(&self.tgt_embed, ids)?;
        let t = ids.len();
        let d = self.cfg.d_model;
        let drop_embed = dropout.mask(SITE_DEC, t, d);
        let mut x = apply_mask(x, drop_embed.as_ref());
        let mut layers = Vec::with_capacity(self.decoder.len());
        for (l, layer) in self.decoder.iter().enumerate() {
            let site = SITE_DEC + 10 * (l as u64 + 1);
            let (a, self_attn) = layer.self_attn.forward(x.view(), x.view(), true);
            let drop_self = dropout.mask(site, t, d);
            let r1 = &x + &apply_mask(a, drop_self.as_ref());
            let (y1, norm1) = layer.norm1.forward(r1.view());
            let (ca, cross_attn) = layer.cross_attn.forward(y1.view(), memory, false);
            let drop_cross = dropout.mask(site + 1, t, d);
            let r2 = &y1 + &apply_mask(ca, drop_cross.as_ref());
            let (y2, norm2) = layer.norm2.forward(r2.view());
            let (f, ff) = layer.ff.forward(y2.view());
            let drop_ff = dropout.mask(site + 2, t, d);
            let r3 = &y2 + &apply_mask(f, drop_ff.as_ref());
            let (y3, norm3) = layer.norm3.forward(r3.view());
            layers.push(DecoderLayerCache {
                self_attn,
                drop_self,
                norm1,
                cross_attn,
                drop_cross,
                norm2,
                ff,
                drop_ff,
                norm3,
            });
            x = y3;
        }
        let logits = self.generator.forward(x.view());
        Ok((
            logits,
            DecoderCache {
                ids: ids.to_vec(),
                drop_embed,
                layers,
                final_hidden: x,
            },
        ))
    }

    /// Accumulates decoder gradients and returns `dL/dmemory`.
    pub fn decode_backward(
        &self,
        cache: &DecoderCache<T>,
        dlogits: ArrayView2<'_, T>,
        memory_rows: usize,
        grad: &mut Self,
    ) -> Array2<T> {
        let d = self.cfg.d_model;
        let mut dmem = Array2::zeros((memory_rows, d));
        let mut dx = self
            .generator
            .backward(cache.final_hidden.view(), dlogits, &mut grad.generator);
        for (l, layer) in self.decoder.iter().enumerate().rev() {
            let lc = &cache.layers[l];
            let g = &mut grad.decoder[l];
            let dr3 = layer.norm3.backward(&lc.norm3, dx.view(), &mut g.norm3);
            let df = apply_mask(dr3.clone(), lc.drop_ff.as_ref());
            let dy2 = &dr3 + &layer.ff.backward(&lc.ff, df.view(), &mut g.ff);
            let dr2 = layer.norm2.backward(&lc.norm2, dy2.view(), &mut g.norm2);
            let dca = apply_mask(dr2.clone(), lc.drop_cross.as_ref());
            let (dq, dm) = layer.cross_attn.backward(&lc.cross_attn, dca.view(), &mut g.cross_attn);
            dmem += &dm;
            let dy1 = dr2 + dq;
            let dr1 = layer.norm1.backward(&lc.norm1, dy1.view(), &mut g.norm1);
            let da = apply_mask(dr1.clone(), lc.drop_self.as_ref());
            let (dq, dkv) = layer.self_attn.backward(&lc.self_attn, da.view(), &mut g.self_attn);
            dx = dr1 + dq + dkv;
        }
        let dx = apply_mask(dx, cache.drop_embed.as_ref());
        self.scatter_embed_grad(&mut grad.tgt_embed, &cache.ids, &dx);
        dmem
    }

    pub(crate) fn rebuild_positions(&mut self) {
        self.positions = positional_encoding(self.cfg.max_len, self.cfg.d_model);
    }
}

impl<T: Real> Parameterized<T> for Seq2Seq<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        push_ref(out, prefix, "src_embed", &self.src_embed);
        push_ref(out, prefix, "tgt_embed", &self.tgt_embed);
        for (l, layer) in self.encoder.iter().enumerate() {
            let p = format!("{prefix}encoder.{l}.");
            layer.self_attn.visit(&format!("{p}self_attn."), out);
            layer.norm1.visit(&format!("{p}norm1."), out);
            layer.ff.visit(&format!("{p}ff."), out);
            layer.norm2.visit(&format!("{p}norm2."), out);
        }
        for (l, layer) in self.decoder.iter().enumerate() {
            let p = format!("{prefix}decoder.{l}.");
            layer.self_attn.visit(&format!("{p}self_attn."), out);
            layer.norm1.visit(&format!("{p}norm1."), out);
            layer.cross_attn.visit(&format!("{p}cross_attn."), out);
            layer.norm2.visit(&format!("{p}norm2."), out);
            layer.ff.visit(&format!("{p}ff."), out);
            layer.norm3.visit(&format!("{p}norm3."), out);
        }
        self.generator.visit(&format!("{prefix}generator."), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        push_mut(out, prefix, "src_embed", &mut self.src_embed);
        push_mut(out, prefix, "tgt_embed", &mut self.tgt_embed);
        for (l, layer) in self.encoder.iter_mut().enumerate() {
            let p = format!("{prefix}encoder.{l}.");
            layer.self_attn.visit_mut(&format!("{p}self_attn."), out);
            layer.norm1.visit_mut(&format!("{p}norm1."), out);
            layer.ff.visit_mut(&format!("{p}ff."), out);
            layer.norm2.visit_mut(&format!("{p}norm2."), out);
        }
        for (l, layer) in self.decoder.iter_mut().enumerate() {
            let p = format!("{prefix}decoder.{l}.");
            layer.self_attn.visit_mut(&format!("{p}self_attn."), out);
            layer.norm1.visit_mut(&format!("{p}norm1."), out);
            layer.cross_attn.visit_mut(&format!("{p}cross_attn."), out);
            layer.norm2.visit_mut(&format!("{p}norm2."), out);
            layer.ff.visit_mut(&format!("{p}ff."), out);
            layer.norm3.visit_mut(&format!("{p}norm3."), out);
        }
        self.generator.visit_mut(&format!("{prefix}generator."), out);
    }
}

/// Encoder-decoder with optional visual-guidance fusion between them.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidedModel<T> {
    pub net: Seq2Seq<T>,
    pub fusion: Option<FusionParams<T>>,
}

impl<T: Real> GuidedModel<T> {
    /// The encoder-decoder is seeded exactly as in text-only mode; fusion
    /// weights draw from a separate stream.
    pub fn init(cfg: &ModelConfig, d_img: Option<usize>, seed: u64) -> Result<Self> {
        let net = Seq2Seq::init(cfg, seed)?;
        let fusion = d_img.map(|d_img| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x667573696f6e]));
            FusionParams::init(&mut rng, d_img, cfg.d_model)
        });
        Ok(Self { net, fusion })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            net: self.net.zeros_like(),
            fusion: self.fusion.as_ref().map(|f| FusionParams::zeros(f.d_img(), f.d_model())),
        }
    }

    /// Encoder output, fused with the image tensor when fusion is enabled.
    pub fn memory(&self, src: &[usize], images: Option<&ImageTensor<T>>) -> Result<Array2<T>> {
        let (h, _) = self.net.encode(src, Dropout::eval())?;
        match (&self.fusion, images) {
            (Some(f), Some(img)) => Ok(fusion_forward(f, h.view(), img)?.0),
            _ => Ok(h),
        }
    }

    /// Greedy decoding: append the argmax token until EOS or `max_out_len`.
    /// The returned ids exclude BOS and EOS.
    pub fn greedy_translate(
        &self,
        src: &[usize],
        images: Option<&ImageTensor<T>>,
        max_out_len: usize,
    ) -> Result<Vec<usize>> {
        if max_out_len == 0 {
            return Ok(Vec::new());
        }
        let memory = self.memory(src, images)?;
        let limit = max_out_len.min(self.net.cfg.max_len - 1);
        let mut ids = vec![BOS];
        let mut out = Vec::new();
        while out.len() < limit {
            let (logits, _) = self.net.decode(&ids, memory.view(), Dropout::eval())?;
            let last = logits.index_axis(Axis(0), logits.nrows() - 1);
            let next = argmax(last.iter().copied());
            if next == EOS {
                break;
            }
            out.push(next);
            ids.push(next);
        }
        Ok(out)
    }
}

fn argmax<T: Real>(values: impl Iterator<Item = T>) -> usize {
    let mut best = (0, T::neg_infinity());
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

impl<T: Real> Parameterized<T> for GuidedModel<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        self.net.visit(prefix, out);
        if let Some(f) = &self.fusion {
            f.visit(&format!("{prefix}fusion."), out);
        }
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        self.net.visit_mut(prefix, out);
        if let Some(f) = &mut self.fusion {
            f.visit_mut(&format!("{prefix}fusion."), out);
        }
    }
}
