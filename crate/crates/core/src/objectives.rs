//! Reconstructive supervision of the visual outputs and the combined loss.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ross_autograd::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::diffusion::{denoising_loss, NoisePredictor};
use crate::error::{Result, RossError};
use crate::image::Image;
use crate::mmlm::{Forward, ModelConfig, MultimodalLm, TextBatch};
use crate::nn::Mlp;
use crate::schedules::BetaSchedule;
use crate::synthdata::Vocabulary;
use crate::tokenizers::{patchify_batch, Tokenizer, TokenizerKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    #[default]
    None,
    RPixel,
    RLatent,
    RLatent2pixel,
    DLatent,
    DPixel,
    Generative,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 7] = [
        ObjectiveKind::None,
        ObjectiveKind::RPixel,
        ObjectiveKind::RLatent,
        ObjectiveKind::RLatent2pixel,
        ObjectiveKind::DLatent,
        ObjectiveKind::DPixel,
        ObjectiveKind::Generative,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::None => "none",
            ObjectiveKind::RPixel => "r_pixel",
            ObjectiveKind::RLatent => "r_latent",
            ObjectiveKind::RLatent2pixel => "r_latent2pixel",
            ObjectiveKind::DLatent => "d_latent",
            ObjectiveKind::DPixel => "d_pixel",
            ObjectiveKind::Generative => "generative",
        }
    }

    pub fn uses_denoiser(self) -> bool {
        matches!(self, ObjectiveKind::DLatent | ObjectiveKind::DPixel | ObjectiveKind::Generative)
    }

    pub fn uses_head(self) -> bool {
        matches!(
            self,
            ObjectiveKind::RPixel | ObjectiveKind::RLatent | ObjectiveKind::RLatent2pixel
        )
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ObjectiveKind {
    type Err = RossError;

    fn from_str(s: &str) -> Result<Self> {
        ObjectiveKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| RossError::UnknownKind {
                what: "objective kind",
                value: s.to_string(),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    /// Teacher for the latent variants; pixel variants always patchify.
    pub tokenizer: TokenizerKind,
    pub lambda_visual: f64,
    /// Learnable queries of the generative baseline.
    pub query_count: usize,
    /// Standardize diffusion targets per channel.
    pub standardize: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            kind: ObjectiveKind::None,
            tokenizer: TokenizerKind::LatentAe,
            lambda_visual: 1.0,
            query_count: 16,
            standardize: true,
        }
    }
}

impl ObjectiveConfig {
    /// The tokenizer whose outputs are the targets, if any.
    pub fn target_tokenizer(&self) -> Option<TokenizerKind> {
        match self.kind {
            ObjectiveKind::None => None,
            ObjectiveKind::RPixel | ObjectiveKind::DPixel => Some(TokenizerKind::Patchify),
            _ => Some(self.tokenizer),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_visual >= 0.0 && self.lambda_visual.is_finite()) {
            return Err(RossError::config(format!(
                "lambda_visual must be finite and >= 0, got {}",
                self.lambda_visual
            )));
        }
        if self.kind == ObjectiveKind::RLatent2pixel && !self.tokenizer.has_decoder() {
            return Err(RossError::MissingComponent {
                variant: self.kind.name(),
                component: "decoder-capable tokenizer",
            });
        }
        if self.kind == ObjectiveKind::Generative && self.query_count == 0 {
            return Err(RossError::config("generative objective needs query_count > 0"));
        }
        Ok(())
    }
}

/// All trainable and frozen machinery a variant needs beyond the LMM.
#[derive(Debug, Clone)]
pub struct VisualObjective<T: Scalar> {
    pub config: ObjectiveConfig,
    pub tokenizer: Option<Tokenizer<T>>,
    pub denoiser: Option<Denoiser<T>>,
    pub schedule: Option<BetaSchedule>,
    /// Regression head and generative queries.
    pub store: ParamStore<T>,
    head: Option<Mlp>,
    queries: Option<ParamId>,
}

impl<T: Scalar> VisualObjective<T> {
    /// The baseline: no visual supervision.
    pub fn none() -> Self {
        Self {
            config: ObjectiveConfig::default(),
            tokenizer: None,
            denoiser: None,
            schedule: None,
            store: ParamStore::new(),
            head: None,
            queries: None,
        }
    }

    pub fn new(
        config: ObjectiveConfig,
        model: &ModelConfig,
        denoiser: DenoiserConfig,
        schedule: BetaSchedule,
        tokenizer: Option<Tokenizer<T>>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if config.kind == ObjectiveKind::None {
            return Ok(Self {
                config,
                ..Self::none()
            });
        }
        let tok = tokenizer.ok_or(RossError::MissingComponent {
            variant: config.kind.name(),
            component: "tokenizer",
        })?;
        if Some(tok.kind()) != config.target_tokenizer() {
            return Err(RossError::config(format!(
                "{} needs a {} tokenizer, got {}",
                config.kind,
                config.target_tokenizer().unwrap(),
                tok.kind()
            )));
        }
        if tok.tokens_for(model.image_size) != model.visual_tokens() {
            return Err(RossError::shape(format!(
                "tokenizer yields {} tokens but the model has {} visual tokens",
                tok.tokens_for(model.image_size),
                model.visual_tokens()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = model.d_model;
        let head = config.kind.uses_head().then(|| {
            let out = match config.kind {
                ObjectiveKind::RPixel => 3 * tok.patch() * tok.patch(),
                _ => tok.d_lat(),
            };
            Mlp::new(&mut store, "head", d, d, out, &mut rng)
        });
        let queries = (config.kind == ObjectiveKind::Generative).then(|| {
            store.randn("queries", &[1, config.query_count, d], 0.02, &mut rng)
        });
        if let Some(q) = queries.map(|_| config.query_count) {
            let n = model.visual_tokens();
            let side = (n as f64).sqrt() as usize;
            let qs = (q as f64).sqrt() as usize;
            if side * side != n || qs * qs != q || !side.is_multiple_of(qs) {
                return Err(RossError::config(format!(
                    "query_count {q} cannot pool a {side}x{side} token grid"
                )));
            }
        }
        let denoiser = if config.kind.uses_denoiser() {
            let dc = DenoiserConfig {
                d_lat: tok.d_lat(),
                ..denoiser
            };
            Some(Denoiser::new(dc, d, rng.random())?)
        } else {
            None
        };
        Ok(Self {
            config,
            tokenizer: Some(tok),
            denoiser,
            schedule: config.kind.uses_denoiser().then_some(schedule),
            store,
            head,
            queries,
        })
    }

    pub fn kind(&self) -> ObjectiveKind {
        self.config.kind
    }

    pub fn head(&self) -> Option<&Mlp> {
        self.head.as_ref()
    }

    fn tokenizer(&self) -> Result<&Tokenizer<T>> {
        self.tokenizer.as_ref().ok_or(RossError::MissingComponent {
            variant: self.config.kind.name(),
            component: "tokenizer",
        })
    }

    fn denoiser(&self) -> Result<&Denoiser<T>> {
        self.denoiser.as_ref().ok_or(RossError::MissingComponent {
            variant: self.config.kind.name(),
            component: "denoiser",
        })
    }

    fn schedule(&self) -> Result<&BetaSchedule> {
        self.schedule.as_ref().ok_or(RossError::MissingComponent {
            variant: self.config.kind.name(),
            component: "schedule",
        })
    }

    /// Diffusion targets `z_0`: tokenizer latents, standardized when enabled.
    pub fn diffusion_targets(&self, images: &[&Image]) -> Result<Tensor<T>> {
        let tok = self.tokenizer()?;
        if self.config.standardize {
            if tok.standardizer.is_none() {
                return Err(RossError::MissingComponent {
                    variant: self.config.kind.name(),
                    component: "fitted standardizer",
                });
            }
            tok.encode_standardized(images)
        } else {
            tok.encode_batch(images)
        }
    }

    /// Maps diffusion-space latents back to raw tokenizer latents.
    pub fn from_diffusion_space(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        if self.config.standardize {
            self.tokenizer()?.destandardize(z)
        } else {
            Ok(z.clone())
        }
    }

    /// The reconstructive loss on `visual` (`[B, N, d_model]`).
    pub fn visual_loss<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        visual: Var,
        images: &[&Image],
        rng: &mut R,
    ) -> Result<Var> {
        let kind = self.config.kind;
        match kind {
            ObjectiveKind::None => Err(RossError::MissingComponent {
                variant: kind.name(),
                component: "visual objective",
            }),
            ObjectiveKind::Generative => Err(RossError::Unsupported(
                "the generative objective conditions on query outputs; use generative_visual_loss".into(),
            )),
            ObjectiveKind::RPixel | ObjectiveKind::RLatent | ObjectiveKind::RLatent2pixel => {
                let tok = self.tokenizer()?;
                let head = self.head.as_ref().ok_or(RossError::MissingComponent {
                    variant: kind.name(),
                    component: "projection head",
                })?;
                let pred = head.forward(g, &self.store, visual)?;
                let (pred, target) = match kind {
                    ObjectiveKind::RPixel => (pred, patchify_batch(images, tok.patch())?),
                    ObjectiveKind::RLatent => (pred, tok.encode_batch(images)?),
                    _ => (tok.decode_graph(g, pred)?, patchify_batch(images, tok.patch())?),
                };
                check_tokens(g.shape(pred), target.shape())?;
                let target = g.constant(target);
                Ok(if kind == ObjectiveKind::RLatent {
                    g.cosine_loss(pred, target)?
                } else {
                    g.mse(pred, target)?
                })
            }
            ObjectiveKind::DLatent | ObjectiveKind::DPixel => {
                let z0 = self.diffusion_targets(images)?;
                let vs = g.shape(visual);
                if vs.len() != 3 || vs[0] != z0.shape()[0] || vs[1] != z0.shape()[1] {
                    return Err(RossError::shape(format!(
                        "visual outputs {vs:?} vs targets {:?}",
                        z0.shape()
                    )));
                }
                self.denoise_with(g, self.denoiser()?, &z0, visual, rng)
            }
        }
    }

    /// Noise-prediction loss with any predictor (e.g. an oracle stub).
    pub fn denoise_with<P: NoisePredictor<T> + ?Sized, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        predictor: &P,
        z0: &Tensor<T>,
        cond: Var,
        rng: &mut R,
    ) -> Result<Var> {
        Ok(denoising_loss(g, predictor, z0, cond, self.schedule()?, rng)?.0)
    }

    /// Query embeddings broadcast to the batch, `[B, Q, d_model]`.
    pub fn query_embeddings(&self, g: &mut Graph<T>, batch: usize) -> Result<Var> {
        let id = self.queries.ok_or(RossError::MissingComponent {
            variant: self.config.kind.name(),
            component: "learnable queries",
        })?;
        let q = g.param(&self.store, id);
        let n = self.config.query_count;
        let table = g.reshape(q, &[n, g.shape(q)[2]])?;
        let ids: Vec<usize> = (0..batch).flat_map(|_| 0..n).collect();
        Ok(g.embedding(table, &ids, &[batch, n])?)
    }

    /// Targets for the generative baseline: diffusion-space latents average
    /// pooled from the `N` token grid down to `Q` tokens.
    pub fn generative_targets(&self, images: &[&Image]) -> Result<Tensor<T>> {
        pool_tokens(&self.diffusion_targets(images)?, self.config.query_count)
    }

    /// Runs the creation-format pass (text, then queries) and denoises the
    /// pooled targets conditioned on the query outputs.
    pub fn generative_visual_loss<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        model: &MultimodalLm<T>,
        text: &TextBatch,
        images: &[&Image],
        rng: &mut R,
    ) -> Result<Var> {
        self.generative_loss_with(g, model, text, images, self.denoiser()?, rng)
    }

    pub fn generative_loss_with<P: NoisePredictor<T> + ?Sized, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        model: &MultimodalLm<T>,
        text: &TextBatch,
        images: &[&Image],
        predictor: &P,
        rng: &mut R,
    ) -> Result<Var> {
        let (cond, _) = self.query_outputs(g, model, text)?;
        let z0 = self.generative_targets(images)?;
        self.denoise_with(g, predictor, &z0, cond, rng)
    }

    /// Query-position outputs `[B, Q, d_model]` of the final block.
    pub fn query_outputs(&self, g: &mut Graph<T>, model: &MultimodalLm<T>, text: &TextBatch) -> Result<(Var, Forward)> {
        let q = self.query_embeddings(g, text.batch)?;
        let fwd = model.forward_parts(g, None, text, Some(q))?;
        let last = *fwd.hidden.last().unwrap();
        let start = fwd.text_len;
        Ok((g.slice_seq(last, start, start + fwd.suffix)?, fwd))
    }
}

fn check_tokens(pred: &[usize], target: &[usize]) -> Result<()> {
    if pred != target {
        return Err(RossError::shape(format!(
            "prediction {pred:?} vs reconstruction target {target:?}"
        )));
    }
    Ok(())
}

/// Average pools a square token grid `[B, N, d]` to `[B, q, d]`.
pub fn pool_tokens<T: Scalar>(z: &Tensor<T>, q: usize) -> Result<Tensor<T>> {
    let s = z.shape();
    if s.len() != 3 {
        return Err(RossError::shape(format!("expected [B, N, d], got {s:?}")));
    }
    let (b, n, d) = (s[0], s[1], s[2]);
    let side = (n as f64).sqrt().round() as usize;
    let qs = (q as f64).sqrt().round() as usize;
    if side * side != n || qs * qs != q || qs == 0 || !side.is_multiple_of(qs) {
        return Err(RossError::shape(format!("cannot pool {n} tokens to {q}")));
    }
    let f = side / qs;
    let norm = T::lit(1.0 / (f * f) as f64);
    let mut out = vec![T::zero(); b * q * d];
    for bi in 0..b {
        for r in 0..side {
            for c in 0..side {
                let src = &z.data()[((bi * n) + r * side + c) * d..][..d];
                let dst = ((bi * q) + (r / f) * qs + c / f) * d;
                for (o, &x) in out[dst..dst + d].iter_mut().zip(src) {
                    *o += x * norm;
                }
            }
        }
    }
    Ok(Tensor::from_vec(&[b, q, d], out)?)
}

/// Creation-format prompt: `<bos> draw caption <sep>`.
pub fn creation_prompt(caption: &[usize], vocab: &Vocabulary) -> Vec<usize> {
    let mut s = Vec::with_capacity(caption.len() + 3);
    s.push(vocab.bos());
    s.push(vocab.id("draw"));
    s.extend_from_slice(caption);
    s.push(vocab.sep());
    s
}

/// `text + λ · visual`; exactly `text` when there is no visual term. Either
/// component being NaN/Inf is an error.
pub fn combined_loss<T: Scalar>(g: &mut Graph<T>, text: Var, visual: Option<Var>, lambda: f64) -> Result<Var> {
    let tv = g.value(text).item().to_f64().unwrap();
    let vv = visual.map(|v| g.value(v).item().to_f64().unwrap());
    if !tv.is_finite() || vv.is_some_and(|v| !v.is_finite()) {
        return Err(RossError::NonFinite {
            step: 0,
            text_loss: tv,
            visual_loss: vv.unwrap_or(0.0),
        });
    }
    match visual {
        None => Ok(text),
        Some(v) => {
            let scaled = g.scale(v, T::lit(lambda));
            Ok(g.add(text, scaled)?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedules::{make_beta_schedule, ScheduleKind};

    #[test]
    fn kinds_parse() {
        for k in ObjectiveKind::ALL {
            assert_eq!(k.name().parse::<ObjectiveKind>().unwrap(), k);
        }
        assert!("r_voxel".parse::<ObjectiveKind>().is_err());
    }

    #[test]
    fn combined_loss_examples() {
        let mut g = Graph::<f64>::new();
        let t = g.constant(Tensor::scalar(2.0));
        let v = g.constant(Tensor::scalar(0.5));
        let c = combined_loss(&mut g, t, Some(v), 1.0).unwrap();
        assert_eq!(g.value(c).item(), 2.5);
        let c = combined_loss(&mut g, t, Some(v), 0.0).unwrap();
        assert_eq!(g.value(c).item(), 2.0);
        let c = combined_loss(&mut g, t, None, 1.0).unwrap();
        assert_eq!(c, t);
        let bad = g.constant(Tensor::scalar(f64::NAN));
        assert!(matches!(
            combined_loss(&mut g, t, Some(bad), 1.0),
            Err(RossError::NonFinite { .. })
        ));
    }

    #[test]
    fn validation() {
        let c = ObjectiveConfig {
            kind: ObjectiveKind::RLatent2pixel,
            tokenizer: TokenizerKind::FrozenFeature,
            ..ObjectiveConfig::default()
        };
        assert!(matches!(c.validate(), Err(RossError::MissingComponent { .. })));
        let c = ObjectiveConfig {
            kind: ObjectiveKind::Generative,
            query_count: 0,
            ..ObjectiveConfig::default()
        };
        assert!(c.validate().is_err());
        let c = ObjectiveConfig {
            lambda_visual: -1.0,
            ..ObjectiveConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn pooling_oracle() {
        // 4x4 grid of scalar tokens valued by index, pooled 2x2.
        let z = Tensor::<f64>::from_vec(&[1, 16, 1], (0..16).map(|i| i as f64).collect()).unwrap();
        let p = pool_tokens(&z, 4).unwrap();
        assert_eq!(p.data(), &[2.5, 4.5, 10.5, 12.5]);
        assert!(pool_tokens(&z, 3).is_err());
    }

    #[test]
    fn token_count_mismatch_rejected() {
        let model = ModelConfig {
            patch_size: 8,
            ..ModelConfig::default()
        };
        let cfg = ObjectiveConfig {
            kind: ObjectiveKind::RPixel,
            ..ObjectiveConfig::default()
        };
        let s = make_beta_schedule(ScheduleKind::Linear, 10, 1e-4, 0.02).unwrap();
        let r = VisualObjective::<f32>::new(
            cfg,
            &model,
            DenoiserConfig::default(),
            s,
            Some(Tokenizer::patchify(4)),
            0,
        );
        assert!(matches!(r, Err(RossError::Shape(_))));
    }
}
