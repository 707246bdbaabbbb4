//! The plug-in multimodal causal LM: patch encoder `G`, projector `H` and a
//! causal decoder whose visual prefix is `v = H(G(I))`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ross_autograd::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Result, RossError};
use crate::image::Image;
use crate::nn::{Block, LayerNorm, Linear, Mlp};
use crate::synthdata::{Answerer, ProbeItem, Vocabulary};
use crate::tokenizers::patchify_batch;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub encoder_layers: usize,
    pub mlp_ratio: usize,
    /// Decoder block whose visual-position outputs feed the reconstruction
    /// objective; `None` means the final block.
    pub visual_layer: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            vocab_size: Vocabulary::new().len(),
            max_seq: 160,
            patch_size: 4,
            image_size: 32,
            encoder_layers: 2,
            mlp_ratio: 4,
            visual_layer: None,
        }
    }
}

impl ModelConfig {
    pub fn visual_tokens(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    pub fn visual_layer_index(&self) -> usize {
        self.visual_layer.unwrap_or(self.n_layers.saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(RossError::config(m));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.n_layers == 0 {
            return fail("n_layers must be positive".into());
        }
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.vocab_size == 0 || self.mlp_ratio == 0 {
            return fail("vocab_size and mlp_ratio must be positive".into());
        }
        if self.max_seq <= self.visual_tokens() {
            return fail(format!(
                "max_seq {} leaves no room after {} visual tokens",
                self.max_seq,
                self.visual_tokens()
            ));
        }
        if self.visual_layer_index() >= self.n_layers {
            return fail(format!("visual_layer {} out of range", self.visual_layer_index()));
        }
        Ok(())
    }
}

/// Right-padded token sequences with their supervision mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TextBatch {
    /// `[B * L]`.
    pub ids: Vec<usize>,
    /// True where the token is a prediction target.
    pub loss_mask: Vec<bool>,
    /// False on padding.
    pub valid: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

impl TextBatch {
    /// `seqs` are `(ids, loss_mask)` pairs of equal inner length.
    pub fn from_sequences(seqs: &[(Vec<usize>, Vec<bool>)], pad: usize) -> Result<Self> {
        if seqs.is_empty() {
            return Err(RossError::Empty("text batch"));
        }
        let len = seqs.iter().map(|s| s.0.len()).max().unwrap_or(0);
        let mut out = Self {
            ids: Vec::with_capacity(seqs.len() * len),
            loss_mask: Vec::with_capacity(seqs.len() * len),
            valid: Vec::with_capacity(seqs.len() * len),
            batch: seqs.len(),
            len,
        };
        for (ids, mask) in seqs {
            if ids.len() != mask.len() {
                return Err(RossError::shape("token ids and loss mask differ in length"));
            }
            out.ids.extend(ids.iter().copied().chain(std::iter::repeat(pad)).take(len));
            out.loss_mask.extend(mask.iter().copied().chain(std::iter::repeat(false)).take(len));
            out.valid.extend((0..len).map(|j| j < ids.len()));
        }
        Ok(out)
    }

    /// Number of real tokens of item `b`.
    pub fn item_len(&self, b: usize) -> usize {
        self.valid[b * self.len..(b + 1) * self.len].iter().filter(|&&v| v).count()
    }

    pub fn supervised(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Debug, Clone)]
pub struct MultimodalBatch<'a> {
    pub images: Vec<&'a Image>,
    pub text: TextBatch,
}

/// Nodes recorded by one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// `[B, S, vocab]`.
    pub logits: Var,
    /// `hidden[0]` is the decoder input, `hidden[i + 1]` the output of block `i`.
    pub hidden: Vec<Var>,
    /// Attention node of each decoder block.
    pub attn: Vec<Var>,
    /// `[B, N, d_model]` from the designated block, when there is a visual prefix.
    pub visual: Option<Var>,
    /// Length of the visual prefix (0 without images).
    pub prefix: usize,
    pub text_len: usize,
    /// Length of any appended embeddings.
    pub suffix: usize,
    pub seq_len: usize,
}

#[derive(Debug, Clone)]
pub struct MultimodalLm<T: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    patch_embed: Linear,
    enc_pos: ParamId,
    enc_blocks: Vec<Block>,
    enc_ln: LayerNorm,
    projector: Mlp,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
}

const EMBED_STD: f64 = 0.02;

impl<T: Scalar> MultimodalLm<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let n = config.visual_tokens();
        let pd = 3 * config.patch_size * config.patch_size;
        let patch_embed = Linear::new(&mut store, "encoder.patch", pd, d, &mut rng);
        let enc_pos = store.randn("encoder.pos", &[1, n, d], EMBED_STD, &mut rng);
        let enc_blocks = (0..config.encoder_layers)
            .map(|i| {
                Block::new(
                    &mut store,
                    &format!("encoder.block{i}"),
                    d,
                    config.n_heads,
                    config.mlp_ratio,
                    &mut rng,
                )
            })
            .collect();
        let enc_ln = LayerNorm::new(&mut store, "encoder.ln", d);
        let projector = Mlp::new(&mut store, "projector", d, d, d, &mut rng);
        let tok_emb = store.randn("decoder.tok", &[config.vocab_size, d], EMBED_STD, &mut rng);
        let pos_emb = store.randn("decoder.pos", &[1, config.max_seq, d], EMBED_STD, &mut rng);
        let blocks = (0..config.n_layers)
            .map(|i| {
                Block::new(
                    &mut store,
                    &format!("decoder.block{i}"),
                    d,
                    config.n_heads,
                    config.mlp_ratio,
                    &mut rng,
                )
            })
            .collect();
        let ln_f = LayerNorm::new(&mut store, "decoder.ln_f", d);
        Ok(Self {
            config,
            store,
            patch_embed,
            enc_pos,
            enc_blocks,
            enc_ln,
            projector,
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
        })
    }

    pub fn token_embedding(&self) -> ParamId {
        self.tok_emb
    }

    pub fn projector(&self) -> &Mlp {
        &self.projector
    }

    /// Projected visual tokens `[B, N, d_model]`.
    pub fn encode_image(&self, g: &mut Graph<T>, images: &[&Image]) -> Result<Var> {
        for img in images {
            if img.height != self.config.image_size || img.width != self.config.image_size {
                return Err(RossError::shape(format!(
                    "image {}x{} but model expects {s}x{s}",
                    img.height,
                    img.width,
                    s = self.config.image_size
                )));
            }
        }
        let patches = g.constant(patchify_batch(images, self.config.patch_size)?);
        let mut h = self.patch_embed.forward(g, &self.store, patches)?;
        let pos = g.param(&self.store, self.enc_pos);
        let pos = g.reshape(pos, &[self.config.visual_tokens(), self.config.d_model])?;
        h = g.add_broadcast(h, pos)?;
        for block in &self.enc_blocks {
            h = block.forward(g, &self.store, h, false, None)?.0;
        }
        let h = self.enc_ln.forward(g, &self.store, h)?;
        self.projector.forward(g, &self.store, h)
    }

    pub fn forward(&self, g: &mut Graph<T>, batch: &MultimodalBatch<'_>) -> Result<Forward> {
        if batch.images.len() != batch.text.batch {
            return Err(RossError::shape(format!(
                "{} images for {} sequences",
                batch.images.len(),
                batch.text.batch
            )));
        }
        let v = self.encode_image(g, &batch.images)?;
        self.forward_parts(g, Some(v), &batch.text, None)
    }

    /// Causal pass over `[prefix] text [suffix]`. `prefix` and `suffix` are
    /// `[B, *, d_model]` embeddings.
    pub fn forward_parts(
        &self,
        g: &mut Graph<T>,
        prefix: Option<Var>,
        text: &TextBatch,
        suffix: Option<Var>,
    ) -> Result<Forward> {
        let d = self.config.d_model;
        let b = text.batch;
        let width = |g: &Graph<T>, v: Option<Var>| -> Result<usize> {
            match v {
                None => Ok(0),
                Some(v) => {
                    let s = g.shape(v);
                    if s.len() != 3 || s[0] != b || s[2] != d {
                        return Err(RossError::shape(format!("embedding {s:?} does not fit batch {b} x d {d}")));
                    }
                    Ok(s[1])
                }
            }
        };
        let (np, ns) = (width(g, prefix)?, width(g, suffix)?);
        let seq_len = np + text.len + ns;
        if seq_len > self.config.max_seq {
            return Err(RossError::SequenceOverflow {
                len: seq_len,
                max: self.config.max_seq,
            });
        }
        if let Some(&bad) = text.ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(RossError::shape(format!("token id {bad} outside vocabulary")));
        }
        let table = g.param(&self.store, self.tok_emb);
        let mut parts = Vec::with_capacity(3);
        parts.extend(prefix);
        if text.len > 0 {
            parts.push(g.embedding(table, &text.ids, &[b, text.len])?);
        }
        parts.extend(suffix);
        let x = if parts.len() == 1 { parts[0] } else { g.concat_seq(&parts)? };
        let pos = g.param(&self.store, self.pos_emb);
        let pos = g.slice_seq(pos, 0, seq_len)?;
        let pos = g.reshape(pos, &[seq_len, d])?;
        let mut h = g.add_broadcast(x, pos)?;

        let key_mask = if text.valid.iter().all(|&v| v) {
            None
        } else {
            let mut m = Vec::with_capacity(b * seq_len);
            for i in 0..b {
                m.extend(std::iter::repeat_n(true, np));
                m.extend_from_slice(&text.valid[i * text.len..(i + 1) * text.len]);
                m.extend(std::iter::repeat_n(true, ns));
            }
            Some(m)
        };
        let mut hidden = vec![h];
        let mut attn = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (out, a) = block.forward(g, &self.store, h, true, key_mask.as_deref())?;
            h = out;
            hidden.push(h);
            attn.push(a);
        }
        let visual = if np > 0 {
            Some(g.slice_seq(hidden[self.config.visual_layer_index() + 1], 0, np)?)
        } else {
            None
        };
        let hf = self.ln_f.forward(g, &self.store, h)?;
        let logits = g.linear_t(hf, table)?;
        Ok(Forward {
            logits,
            hidden,
            attn,
            visual,
            prefix: np,
            text_len: text.len,
            suffix: ns,
            seq_len,
        })
    }

    /// Mean next-token NLL over supervised text positions.
    pub fn text_loss(&self, g: &mut Graph<T>, fwd: &Forward, text: &TextBatch) -> Result<Var> {
        let (b, l, s) = (text.batch, text.len, fwd.seq_len);
        let mut targets = vec![0usize; b * s];
        let mut weights = vec![T::zero(); b * s];
        let mut any = false;
        for i in 0..b {
            for j in 0..l {
                let k = i * l + j;
                if !text.loss_mask[k] {
                    continue;
                }
                if fwd.prefix + j == 0 {
                    return Err(RossError::config("the first token cannot be supervised"));
                }
                let row = i * s + fwd.prefix + j - 1;
                targets[row] = text.ids[k];
                weights[row] = T::one();
                any = true;
            }
        }
        if !any {
            return Err(RossError::Empty("supervised positions"));
        }
        Ok(g.cross_entropy(fwd.logits, &targets, &weights)?)
    }

    /// Visual outputs for a batch of images with no text.
    pub fn visual_outputs(&self, images: &[&Image]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let text = TextBatch {
            ids: vec![],
            loss_mask: vec![],
            valid: vec![],
            batch: images.len(),
            len: 0,
        };
        let v = self.encode_image(&mut g, images)?;
        let fwd = self.forward_parts(&mut g, Some(v), &text, None)?;
        Ok(g.value(fwd.visual.unwrap()).clone())
    }

    /// Greedy next token after each sequence, with the image as prefix.
    pub fn greedy_next(&self, images: &[&Image], seqs: &[Vec<usize>]) -> Result<Vec<usize>> {
        let pairs: Vec<_> = seqs.iter().map(|s| (s.clone(), vec![false; s.len()])).collect();
        let text = TextBatch::from_sequences(&pairs, 0)?;
        let mut g = Graph::new();
        let fwd = self.forward(
            &mut g,
            &MultimodalBatch {
                images: images.to_vec(),
                text: text.clone(),
            },
        )?;
        let logits = g.value(fwd.logits);
        let v = self.config.vocab_size;
        Ok((0..text.batch)
            .map(|b| {
                let pos = b * fwd.seq_len + fwd.prefix + text.item_len(b) - 1;
                argmax(&logits.data()[pos * v..(pos + 1) * v])
            })
            .collect())
    }
}

pub fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// `<bos> question <sep>`: the prompt whose next token is the answer.
pub fn probe_prompt(question: &[usize], vocab: &Vocabulary) -> Vec<usize> {
    let mut s = Vec::with_capacity(question.len() + 2);
    s.push(vocab.bos());
    s.extend_from_slice(question);
    s.push(vocab.sep());
    s
}

/// Probe items answered per forward pass.
pub const PROBE_CHUNK: usize = 128;

/// Greedy probe answering with a given vocabulary.
pub struct ModelAnswerer<'a, T: Scalar> {
    pub model: &'a MultimodalLm<T>,
    pub vocab: &'a Vocabulary,
}

impl<T: Scalar> Answerer for ModelAnswerer<'_, T> {
    fn answer(&self, items: &[ProbeItem<'_>]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(items.len());
        for chunk in items.chunks(PROBE_CHUNK) {
            let images: Vec<&Image> = chunk.iter().map(|it| it.image).collect();
            let seqs: Vec<Vec<usize>> = chunk.iter().map(|it| probe_prompt(it.question, self.vocab)).collect();
            out.extend(self.model.greedy_next(&images, &seqs)?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            vocab_size: 11,
            max_seq: 24,
            patch_size: 4,
            image_size: 8,
            encoder_layers: 1,
            mlp_ratio: 2,
            visual_layer: None,
        }
    }

    fn img(v: f32) -> Image {
        Image::filled(8, 8, [v, v * 0.5, 1.0 - v])
    }

    fn text(seqs: &[Vec<usize>]) -> TextBatch {
        let pairs: Vec<_> = seqs
            .iter()
            .map(|s| (s.clone(), (0..s.len()).map(|j| j > 0).collect()))
            .collect();
        TextBatch::from_sequences(&pairs, 0).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(tiny().validate().is_ok());
        let bad = ModelConfig { n_heads: 3, ..tiny() };
        assert!(matches!(bad.validate(), Err(RossError::Config(_))));
        let bad = ModelConfig { max_seq: 4, ..tiny() };
        assert!(bad.validate().is_err());
        assert_eq!(ModelConfig::default().visual_tokens(), 64);
    }

    #[test]
    fn zero_projector_gives_bias_only() {
        let mut m = MultimodalLm::<f64>::new(tiny(), 1).unwrap();
        let fc2 = m.projector().fc2;
        let bias = Tensor::from_vec(&[16], (0..16).map(|i| i as f64 * 0.1).collect()).unwrap();
        *m.store.get_mut(fc2.w) = Tensor::zeros(&[16, 16]);
        *m.store.get_mut(fc2.b.unwrap()) = bias.clone();
        let mut g = Graph::new();
        let black = Image::filled(8, 8, [0.0; 3]);
        let v = m.encode_image(&mut g, &[&black, &black]).unwrap();
        assert_eq!(g.shape(v), &[2, 4, 16]);
        for r in 0..8 {
            assert_eq!(g.value(v).row(r), bias.data());
        }
    }

    #[test]
    fn identical_images_and_batch_permutation() {
        let m = MultimodalLm::<f64>::new(tiny(), 2).unwrap();
        let (a, b) = (img(0.2), img(0.9));
        let mut g = Graph::new();
        let v = m.encode_image(&mut g, &[&a, &b, &a]).unwrap();
        let v = g.value(v).clone();
        let w = m.encode_image(&mut g, &[&b, &a]).unwrap();
        let w = g.value(w).clone();
        assert_eq!(v.index0(0).unwrap(), v.index0(2).unwrap());
        assert_eq!(v.index0(0).unwrap(), w.index0(1).unwrap());
        assert_eq!(v.index0(1).unwrap(), w.index0(0).unwrap());
    }

    #[test]
    fn rejects_overflow_and_wrong_images() {
        let m = MultimodalLm::<f32>::new(tiny(), 3).unwrap();
        let im = img(0.5);
        let mut g = Graph::new();
        let long = MultimodalBatch {
            images: vec![&im],
            text: text(&[vec![1; 21]]),
        };
        assert!(matches!(m.forward(&mut g, &long), Err(RossError::SequenceOverflow { len: 25, max: 24 })));
        let big = Image::filled(16, 16, [0.0; 3]);
        assert!(matches!(m.encode_image(&mut g, &[&big]), Err(RossError::Shape(_))));
    }

    #[test]
    fn zero_tied_embeddings_give_uniform_logits() {
        let mut m = MultimodalLm::<f64>::new(tiny(), 4).unwrap();
        let id = m.token_embedding();
        *m.store.get_mut(id) = Tensor::zeros(&[11, 16]);
        let im = img(0.3);
        let batch = MultimodalBatch {
            images: vec![&im],
            text: text(&[vec![1, 2, 3]]),
        };
        let mut g = Graph::new();
        let fwd = m.forward(&mut g, &batch).unwrap();
        assert!(g.value(fwd.logits).data().iter().all(|&x| x == 0.0));
        let loss = m.text_loss(&mut g, &fwd, &batch.text).unwrap();
        assert!((g.value(loss).item() - 11f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let m = MultimodalLm::<f64>::new(tiny(), 5).unwrap();
        let im = img(0.3);
        let t = TextBatch::from_sequences(&[(vec![1, 2], vec![false, false])], 0).unwrap();
        let mut g = Graph::new();
        let fwd = m
            .forward(
                &mut g,
                &MultimodalBatch {
                    images: vec![&im],
                    text: t.clone(),
                },
            )
            .unwrap();
        assert!(matches!(m.text_loss(&mut g, &fwd, &t), Err(RossError::Empty(_))));
    }

    #[test]
    fn padding_leaves_loss_bitwise_unchanged() {
        let m = MultimodalLm::<f32>::new(tiny(), 6).unwrap();
        let (a, b) = (img(0.1), img(0.7));
        let short = text(&[vec![1, 4, 5], vec![2, 3, 7]]);
        let mut padded = TextBatch::from_sequences(
            &[
                (vec![1, 4, 5, 0, 0], vec![false, true, true, false, false]),
                (vec![2, 3, 7, 0, 0], vec![false, true, true, false, false]),
            ],
            0,
        )
        .unwrap();
        padded.valid = vec![true, true, true, false, false, true, true, true, false, false];
        let loss = |t: &TextBatch| {
            let mut g = Graph::new();
            let batch = MultimodalBatch {
                images: vec![&a, &b],
                text: t.clone(),
            };
            let fwd = m.forward(&mut g, &batch).unwrap();
            let l = m.text_loss(&mut g, &fwd, t).unwrap();
            g.value(l).item()
        };
        assert_eq!(loss(&short).to_bits(), loss(&padded).to_bits());
    }

    #[test]
    fn greedy_answers_come_from_last_real_position() {
        let m = MultimodalLm::<f32>::new(tiny(), 7).unwrap();
        let im = img(0.4);
        let one = m.greedy_next(&[&im], &[vec![1, 2, 3]]).unwrap();
        let both = m.greedy_next(&[&im, &im], &[vec![1, 2, 3], vec![1, 2, 3, 4, 5]]).unwrap();
        assert_eq!(one[0], both[0]);
    }
}
