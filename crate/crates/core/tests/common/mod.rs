//! Micro configurations shared by the integration tests.
#![allow(dead_code)]

pub mod oracles;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ross::autograd::{Graph, Var};
use ross::config::ScheduleConfig;
use ross::denoiser::DenoiserConfig;
use ross::image::Image;
use ross::mmlm::{ModelConfig, MultimodalBatch, MultimodalLm, TextBatch};
use ross::objectives::{creation_prompt, ObjectiveConfig, ObjectiveKind, VisualObjective};
use ross::synthdata::{generate_sample, Vocabulary};
use ross::tokenizers::{make_frozen_feature_tokenizer, AeConfig, PatchAutoencoder, Tokenizer, TokenizerKind};
use ross::trainer::qa_sequence;
use ross::Result;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// 8x8 images, 4x4 patches: four visual tokens.
pub fn micro_model() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        vocab_size: Vocabulary::new().len(),
        max_seq: 96,
        patch_size: 4,
        image_size: 8,
        encoder_layers: 1,
        mlp_ratio: 2,
        visual_layer: None,
    }
}

pub fn micro_denoiser(self_attention: bool) -> DenoiserConfig {
    DenoiserConfig {
        n_blocks: 1,
        d_model: 8,
        n_heads: 2,
        d_lat: 0,
        use_self_attention: self_attention,
        timestep_embed_dim: 6,
        mlp_ratio: 2,
    }
}

pub fn random_image(size: usize, r: &mut impl Rng) -> Image {
    Image {
        height: size,
        width: size,
        pixels: (0..size * size * 3).map(|_| r.random::<f32>()).collect(),
    }
}

pub fn random_images(n: usize, size: usize, seed: u64) -> Vec<Image> {
    let mut r = rng(seed);
    (0..n).map(|_| random_image(size, &mut r)).collect()
}

/// QA sequences from real samples, one per image.
pub fn micro_text(n: usize) -> TextBatch {
    let vocab = Vocabulary::new();
    let seqs: Vec<_> = (0..n)
        .map(|i| qa_sequence(&generate_sample(11, i).qa[0], &vocab, false))
        .collect();
    TextBatch::from_sequences(&seqs, vocab.pad()).unwrap()
}

pub fn creation_text(n: usize) -> TextBatch {
    let vocab = Vocabulary::new();
    let seqs: Vec<_> = (0..n)
        .map(|i| {
            let ids = creation_prompt(&generate_sample(11, i).caption, &vocab);
            let m = vec![false; ids.len()];
            (ids, m)
        })
        .collect();
    TextBatch::from_sequences(&seqs, vocab.pad()).unwrap()
}

pub fn micro_tokenizer<T: ross::autograd::Scalar>(kind: TokenizerKind, patch: usize, images: &[&Image]) -> Tokenizer<T> {
    let mut tok = match kind {
        TokenizerKind::Patchify => Tokenizer::patchify(patch),
        TokenizerKind::FrozenFeature => Tokenizer::frozen(make_frozen_feature_tokenizer(3, 4, patch)),
        TokenizerKind::LatentAe | TokenizerKind::Vq => {
            let ae = PatchAutoencoder::new(
                AeConfig {
                    patch,
                    d_lat: 3,
                    hidden: 6,
                    ..AeConfig::default()
                },
                kind == TokenizerKind::Vq,
            );
            Tokenizer::autoencoder(ae)
        }
    };
    tok.fit_standardizer(images).unwrap();
    tok
}

pub fn micro_objective<T: ross::autograd::Scalar>(
    kind: ObjectiveKind,
    model: &ModelConfig,
    images: &[&Image],
    self_attention: bool,
) -> VisualObjective<T> {
    let config = ObjectiveConfig {
        kind,
        tokenizer: TokenizerKind::LatentAe,
        lambda_visual: 1.0,
        query_count: 1,
        standardize: true,
    };
    let tok = config
        .target_tokenizer()
        .map(|k| micro_tokenizer(k, model.patch_size, images));
    let schedule = ScheduleConfig {
        steps: 10,
        ..ScheduleConfig::default()
    }
    .build()
    .unwrap();
    VisualObjective::new(config, model, micro_denoiser(self_attention), schedule, tok, 5).unwrap()
}

/// `text + λ · visual` exactly as the trainer assembles it, with a fresh
/// fixed-seed noise stream on every call.
pub fn full_loss<T: ross::autograd::Scalar>(
    g: &mut Graph<T>,
    model: &MultimodalLm<T>,
    objective: &VisualObjective<T>,
    images: &[&Image],
    text: &TextBatch,
) -> Result<Var> {
    let batch = MultimodalBatch {
        images: images.to_vec(),
        text: text.clone(),
    };
    let fwd = model.forward(g, &batch)?;
    let text_loss = model.text_loss(g, &fwd, text)?;
    let mut r = rng(99);
    let visual = match objective.kind() {
        ObjectiveKind::None => None,
        ObjectiveKind::Generative => {
            let creation = creation_text(images.len());
            Some(objective.generative_visual_loss(g, model, &creation, images, &mut r)?)
        }
        _ => Some(objective.visual_loss(g, fwd.visual.unwrap(), images, &mut r)?),
    };
    ross::objectives::combined_loss(g, text_loss, visual, objective.config.lambda_visual)
}
