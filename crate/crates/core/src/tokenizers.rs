//! Teacher tokenizers: image -> target tokens `z_0`, and where available the
//! inverse mapping back to pixels.
//!
//! Patch layout is fixed: patches in row-major order over the image, and
//! inside each patch pixels in row-major order with the channel fastest.
//! A token therefore has `3 * P * P` values.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ross_autograd::{AdamW, AdamWConfig, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Result, RossError};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerKind {
    Patchify,
    LatentAe,
    FrozenFeature,
    Vq,
}

impl TokenizerKind {
    pub const ALL: [TokenizerKind; 4] = [
        TokenizerKind::Patchify,
        TokenizerKind::LatentAe,
        TokenizerKind::FrozenFeature,
        TokenizerKind::Vq,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TokenizerKind::Patchify => "patchify",
            TokenizerKind::LatentAe => "latent_ae",
            TokenizerKind::FrozenFeature => "frozen_feature",
            TokenizerKind::Vq => "vq",
        }
    }

    pub fn has_decoder(self) -> bool {
        !matches!(self, TokenizerKind::FrozenFeature)
    }

    pub fn default_d_lat(self, patch: usize) -> usize {
        match self {
            TokenizerKind::Patchify => 3 * patch * patch,
            TokenizerKind::LatentAe | TokenizerKind::Vq => 8,
            TokenizerKind::FrozenFeature => 16,
        }
    }
}

impl fmt::Display for TokenizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TokenizerKind {
    type Err = RossError;

    fn from_str(s: &str) -> Result<Self> {
        TokenizerKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| RossError::UnknownKind {
                what: "tokenizer kind",
                value: s.to_string(),
            })
    }
}

/// Target tokens for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTokens<T> {
    /// `[N, d_lat]`.
    pub z: Tensor<T>,
    pub source: TokenizerKind,
    pub standardized: bool,
}

fn check_patch(h: usize, w: usize, patch: usize) -> Result<()> {
    if patch == 0 || !h.is_multiple_of(patch) || !w.is_multiple_of(patch) {
        return Err(RossError::shape(format!(
            "image {h}x{w} not divisible by patch size {patch}"
        )));
    }
    Ok(())
}

/// Appends the patch tokens of one image to `out`.
fn patchify_into<T: Scalar>(image: &Image, patch: usize, out: &mut Vec<T>) -> Result<()> {
    check_patch(image.height, image.width, patch)?;
    let (gh, gw) = (image.height / patch, image.width / patch);
    for pr in 0..gh {
        for pc in 0..gw {
            for y in 0..patch {
                for x in 0..patch {
                    for c in 0..3 {
                        out.push(T::lit(image.get(pr * patch + y, pc * patch + x, c) as f64));
                    }
                }
            }
        }
    }
    Ok(())
}

pub fn patchify<T: Scalar>(image: &Image, patch: usize) -> Result<LatentTokens<T>> {
    let mut data = Vec::with_capacity(image.pixels.len());
    patchify_into(image, patch, &mut data)?;
    let n = image.height * image.width / (patch * patch);
    Ok(LatentTokens {
        z: Tensor::from_vec(&[n, 3 * patch * patch], data)?,
        source: TokenizerKind::Patchify,
        standardized: false,
    })
}

/// `[B, N, 3P²]` patch tokens for a batch of equally sized images.
pub fn patchify_batch<T: Scalar>(images: &[&Image], patch: usize) -> Result<Tensor<T>> {
    let first = images.first().ok_or(RossError::Empty("image batch"))?;
    let mut data = Vec::with_capacity(images.len() * first.pixels.len());
    for img in images {
        if img.height != first.height || img.width != first.width {
            return Err(RossError::shape("images in a batch must share a size"));
        }
        patchify_into(img, patch, &mut data)?;
    }
    let n = first.height * first.width / (patch * patch);
    Ok(Tensor::from_vec(&[images.len(), n, 3 * patch * patch], data)?)
}

/// Exact inverse of [`patchify`]; values are clamped to `[0, 1]`.
pub fn unpatchify<T: Scalar>(tokens: &Tensor<T>, patch: usize, height: usize, width: usize) -> Result<Image> {
    check_patch(height, width, patch)?;
    let n = height * width / (patch * patch);
    if tokens.shape() != [n, 3 * patch * patch] {
        return Err(RossError::shape(format!(
            "tokens {:?} do not tile a {height}x{width} image with patch {patch}",
            tokens.shape()
        )));
    }
    let gw = width / patch;
    let mut pixels = vec![0.0f32; height * width * 3];
    let d = tokens.data();
    let mut i = 0;
    for pr in 0..height / patch {
        for pc in 0..gw {
            for y in 0..patch {
                for x in 0..patch {
                    for c in 0..3 {
                        let v = d[i].to_f64().unwrap().clamp(0.0, 1.0) as f32;
                        pixels[((pr * patch + y) * width + pc * patch + x) * 3 + c] = v;
                        i += 1;
                    }
                }
            }
        }
    }
    Image::new(height, width, pixels)
}

/// Per-channel affine standardization fitted on a token set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Channels whose spread is below this are only centered.
const MIN_STD: f64 = 1e-8;

impl Standardizer {
    /// Population mean/std of each trailing-axis channel.
    pub fn fit<T: Scalar>(tokens: &Tensor<T>) -> Result<Self> {
        let d = tokens.last_dim();
        let rows = tokens.rows();
        if rows == 0 {
            return Err(RossError::Empty("standardizer fitting set"));
        }
        let mut mean = vec![0.0; d];
        for r in 0..rows {
            for (m, x) in mean.iter_mut().zip(tokens.row(r)) {
                *m += x.to_f64().unwrap();
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; d];
        for r in 0..rows {
            for c in 0..d {
                var[c] += (tokens.row(r)[c].to_f64().unwrap() - mean[c]).powi(2);
            }
        }
        let std = var
            .iter()
            .map(|v| {
                let s = (v / rows as f64).sqrt();
                if s < MIN_STD {
                    1.0
                } else {
                    s
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply<T: Scalar>(&self, tokens: &Tensor<T>) -> Result<Tensor<T>> {
        self.map(tokens, |x, m, s| (x - m) / s)
    }

    pub fn invert<T: Scalar>(&self, tokens: &Tensor<T>) -> Result<Tensor<T>> {
        self.map(tokens, |x, m, s| x * s + m)
    }

    fn map<T: Scalar>(&self, tokens: &Tensor<T>, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor<T>> {
        let d = self.mean.len();
        if tokens.last_dim() != d {
            return Err(RossError::shape(format!(
                "standardizer has {d} channels, tokens have {}",
                tokens.last_dim()
            )));
        }
        let mut out = tokens.clone();
        for (i, x) in out.data_mut().iter_mut().enumerate() {
            let c = i % d;
            *x = T::lit(f(x.to_f64().unwrap(), self.mean[c], self.std[c]));
        }
        Ok(out)
    }
}

/// Hyperparameters of the patch autoencoder stand-in for a pretrained
/// latent tokenizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AeConfig {
    /// Downsample factor; each `patch x patch` pixel block becomes one token.
    pub patch: usize,
    pub d_lat: usize,
    pub hidden: usize,
    pub epochs: usize,
    /// Patches per optimizer step.
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Held-out per-pixel MSE that training must reach.
    pub threshold: f64,
    pub holdout_fraction: f64,
    /// Codebook entries for the quantized variant.
    pub codebook_size: usize,
    pub commitment: f64,
}

impl Default for AeConfig {
    fn default() -> Self {
        Self {
            patch: 4,
            d_lat: 8,
            hidden: 96,
            epochs: 20,
            batch: 256,
            lr: 3e-3,
            seed: 0,
            threshold: 5e-3,
            holdout_fraction: 0.1,
            codebook_size: 64,
            commitment: 0.25,
        }
    }
}

/// Token-wise MLP autoencoder over flattened patches, optionally with a
/// vector-quantized bottleneck.
#[derive(Debug, Clone)]
pub struct PatchAutoencoder<T: Scalar> {
    pub config: AeConfig,
    pub store: ParamStore<T>,
    enc: [ParamId; 4],
    dec: [ParamId; 4],
    codebook: Option<ParamId>,
}

struct VqTerms {
    codebook_loss: Var,
    commit_loss: Var,
}

impl<T: Scalar> PatchAutoencoder<T> {
    pub fn new(config: AeConfig, quantized: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let pd = 3 * config.patch * config.patch;
        let (h, d) = (config.hidden, config.d_lat);
        let enc = [
            store.randn("enc.w1", &[pd, h], (1.0 / pd as f64).sqrt(), &mut rng),
            store.zeros("enc.b1", &[h]),
            store.randn("enc.w2", &[h, d], (1.0 / h as f64).sqrt(), &mut rng),
            store.zeros("enc.b2", &[d]),
        ];
        let dec = [
            store.randn("dec.w1", &[d, h], (1.0 / d as f64).sqrt(), &mut rng),
            store.zeros("dec.b1", &[h]),
            store.randn("dec.w2", &[h, pd], (1.0 / h as f64).sqrt(), &mut rng),
            store.zeros("dec.b2", &[pd]),
        ];
        let codebook = quantized.then(|| store.randn("codebook", &[config.codebook_size, d], 1.0, &mut rng));
        Self {
            config,
            store,
            enc,
            dec,
            codebook,
        }
    }

    pub fn is_quantized(&self) -> bool {
        self.codebook.is_some()
    }

    fn mlp(&self, g: &mut Graph<T>, x: Var, ids: &[ParamId; 4], frozen: bool) -> Result<Var> {
        let p = |g: &mut Graph<T>, id: ParamId| {
            if frozen {
                g.constant(self.store.get(id).clone())
            } else {
                g.param(&self.store, id)
            }
        };
        let (w1, b1, w2, b2) = (p(g, ids[0]), p(g, ids[1]), p(g, ids[2]), p(g, ids[3]));
        let h = g.linear(x, w1, Some(b1))?;
        let h = g.gelu(h);
        Ok(g.linear(h, w2, Some(b2))?)
    }

    /// Continuous encoder output (before quantization).
    fn encode_graph(&self, g: &mut Graph<T>, patches: Var, frozen: bool) -> Result<Var> {
        self.mlp(g, patches, &self.enc, frozen)
    }

    /// Patch reconstruction in `[0, 1]` from latents of any leading shape.
    pub fn decode_graph(&self, g: &mut Graph<T>, z: Var, frozen: bool) -> Result<Var> {
        let out = self.mlp(g, z, &self.dec, frozen)?;
        Ok(g.sigmoid(out))
    }

    /// Nearest codebook entry per row.
    fn nearest_codes(&self, z: &Tensor<T>) -> Vec<usize> {
        let cb = self.store.get(self.codebook.expect("quantized autoencoder"));
        (0..z.rows())
            .map(|r| {
                let row = z.row(r);
                (0..cb.rows())
                    .map(|k| {
                        let dist: T = row.iter().zip(cb.row(k)).map(|(&a, &b)| (a - b) * (a - b)).sum();
                        (k, dist)
                    })
                    .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                    .map(|(k, _)| k)
                    .unwrap()
            })
            .collect()
    }

    fn quantize_values(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let codes = self.nearest_codes(z);
        let cb = self.store.get(self.codebook.unwrap());
        let mut data = Vec::with_capacity(z.numel());
        for k in codes {
            data.extend_from_slice(cb.row(k));
        }
        Ok(Tensor::from_vec(z.shape(), data)?)
    }

    /// Straight-through quantization plus the codebook/commitment terms.
    fn quantize_graph(&self, g: &mut Graph<T>, z: Var) -> Result<(Var, VqTerms)> {
        let zv = g.value(z).clone();
        let codes = self.nearest_codes(&zv);
        let cb = g.param(&self.store, self.codebook.unwrap());
        let rows = zv.rows();
        let picked = g.embedding(cb, &codes, &[rows])?;
        let picked = g.reshape(picked, zv.shape())?;
        let z_detached = g.detach(z);
        let codebook_loss = g.mse(picked, z_detached)?;
        let picked_detached = g.detach(picked);
        let commit_loss = g.mse(z, picked_detached)?;
        let q_value = g.value(picked).clone();
        let st = g.straight_through(z, q_value)?;
        Ok((
            st,
            VqTerms {
                codebook_loss,
                commit_loss,
            },
        ))
    }

    /// Latents for `[.., 3P²]` patch rows (quantized when a codebook exists).
    pub fn encode_patches(&self, patches: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(patches.clone());
        let z = self.encode_graph(&mut g, x, true)?;
        let z = g.value(z).clone();
        if self.is_quantized() {
            self.quantize_values(&z)
        } else {
            Ok(z)
        }
    }

    pub fn decode_patches(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let out = self.decode_graph(&mut g, zv, true)?;
        Ok(g.value(out).clone())
    }

    fn training_loss(&self, g: &mut Graph<T>, patches: &Tensor<T>) -> Result<Var> {
        let x = g.constant(patches.clone());
        let z = self.encode_graph(g, x, false)?;
        let (z, extra) = if self.is_quantized() {
            let (q, terms) = self.quantize_graph(g, z)?;
            (q, Some(terms))
        } else {
            (z, None)
        };
        let recon = self.decode_graph(g, z, false)?;
        let mut loss = g.mse(recon, x)?;
        if let Some(t) = extra {
            loss = g.add(loss, t.codebook_loss)?;
            let c = g.scale(t.commit_loss, T::lit(self.config.commitment));
            loss = g.add(loss, c)?;
        }
        Ok(loss)
    }

    /// Per-pixel MSE of encode->decode over a set of images.
    pub fn reconstruction_mse(&self, images: &[&Image]) -> Result<f64> {
        let patches = patchify_batch::<T>(images, self.config.patch)?;
        let recon = self.decode_patches(&self.encode_patches(&patches)?)?;
        Ok(recon.zip_map(&patches, |a, b| (a - b) * (a - b))?.mean().to_f64().unwrap())
    }
}

/// Outcome of autoencoder training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AeReport {
    pub train_mse: f64,
    pub heldout_mse: f64,
    pub steps: usize,
}

/// Trains the patch autoencoder; fails with [`RossError::NonConvergence`]
/// when the held-out reconstruction error stays above `config.threshold`.
pub fn train_latent_autoencoder<T: Scalar>(
    images: &[&Image],
    config: AeConfig,
    quantized: bool,
) -> Result<(PatchAutoencoder<T>, AeReport)> {
    if images.is_empty() {
        return Err(RossError::Empty("autoencoder dataset"));
    }
    if config.batch == 0 || config.epochs == 0 {
        return Err(RossError::config("autoencoder batch and epochs must be positive"));
    }
    let n_hold = ((images.len() as f64 * config.holdout_fraction).round() as usize).min(images.len() - 1);
    let (train, held) = images.split_at(images.len() - n_hold);
    let held: &[&Image] = if held.is_empty() { train } else { held };

    let patches = patchify_batch::<T>(train, config.patch)?;
    let pd = patches.last_dim();
    let rows = patches.rows();
    let mut ae = PatchAutoencoder::new(config, quantized);
    if quantized {
        // Seed the codebook with encoder outputs of random patches.
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
        let mut g = Graph::new();
        let x = g.constant(patches.clone());
        let z = ae.encode_graph(&mut g, x, true)?;
        let z = g.value(z);
        let cb_id = ae.codebook.unwrap();
        let mut order: Vec<usize> = (0..rows).collect();
        order.shuffle(&mut rng);
        let cb = ae.store.get_mut(cb_id);
        let d = config.d_lat;
        for k in 0..config.codebook_size {
            let r = order[k % rows];
            cb.data_mut()[k * d..(k + 1) * d].copy_from_slice(z.row(r));
        }
    }
    let mut opt = AdamW::new(&ae.store, AdamWConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..rows).collect();
    let mut steps = 0;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch) {
            let mut data = Vec::with_capacity(chunk.len() * pd);
            for &r in chunk {
                data.extend_from_slice(patches.row(r));
            }
            let batch = Tensor::from_vec(&[chunk.len(), pd], data)?;
            let mut g = Graph::new();
            let loss = ae.training_loss(&mut g, &batch)?;
            let grads = g.backward(loss)?.for_store(&ae.store);
            opt.update(&mut ae.store, &grads, config.lr);
            steps += 1;
        }
    }
    let report = AeReport {
        train_mse: ae.reconstruction_mse(train)?,
        heldout_mse: ae.reconstruction_mse(held)?,
        steps,
    };
    if !(report.heldout_mse <= config.threshold) {
        return Err(RossError::NonConvergence {
            mse: report.heldout_mse,
            threshold: config.threshold,
        });
    }
    Ok((ae, report))
}

/// Fixed random linear patch projection standing in for a frozen feature
/// extractor. It has no decoder.
#[derive(Debug, Clone)]
pub struct FrozenFeature<T: Scalar> {
    pub patch: usize,
    pub seed: u64,
    /// `[3P², d_lat]`, entries `N(0, 1) / sqrt(3P²)`.
    pub weight: Tensor<T>,
}

pub fn make_frozen_feature_tokenizer<T: Scalar>(seed: u64, d_lat: usize, patch: usize) -> FrozenFeature<T> {
    let pd = 3 * patch * patch;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FrozenFeature {
        patch,
        seed,
        weight: Tensor::randn(&[pd, d_lat], 1.0 / (pd as f64).sqrt(), &mut rng),
    }
}

#[derive(Debug, Clone)]
enum Backend<T: Scalar> {
    Patchify,
    Autoencoder(PatchAutoencoder<T>),
    Frozen(FrozenFeature<T>),
}

/// A teacher tokenizer `F` with an optional inverse `F⁻¹`.
#[derive(Debug, Clone)]
pub struct Tokenizer<T: Scalar> {
    kind: TokenizerKind,
    patch: usize,
    d_lat: usize,
    backend: Backend<T>,
    /// Statistics used to standardize targets before diffusion.
    pub standardizer: Option<Standardizer>,
}

impl<T: Scalar> Tokenizer<T> {
    pub fn patchify(patch: usize) -> Self {
        Self {
            kind: TokenizerKind::Patchify,
            patch,
            d_lat: 3 * patch * patch,
            backend: Backend::Patchify,
            standardizer: None,
        }
    }

    pub fn autoencoder(ae: PatchAutoencoder<T>) -> Self {
        Self {
            kind: if ae.is_quantized() { TokenizerKind::Vq } else { TokenizerKind::LatentAe },
            patch: ae.config.patch,
            d_lat: ae.config.d_lat,
            backend: Backend::Autoencoder(ae),
            standardizer: None,
        }
    }

    pub fn frozen(f: FrozenFeature<T>) -> Self {
        Self {
            kind: TokenizerKind::FrozenFeature,
            patch: f.patch,
            d_lat: f.weight.shape()[1],
            backend: Backend::Frozen(f),
            standardizer: None,
        }
    }

    pub fn kind(&self) -> TokenizerKind {
        self.kind
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn d_lat(&self) -> usize {
        self.d_lat
    }

    pub fn has_decoder(&self) -> bool {
        self.kind.has_decoder()
    }

    pub fn autoencoder_ref(&self) -> Option<&PatchAutoencoder<T>> {
        match &self.backend {
            Backend::Autoencoder(ae) => Some(ae),
            _ => None,
        }
    }

    /// Number of tokens produced for a square image of side `image_size`.
    pub fn tokens_for(&self, image_size: usize) -> usize {
        (image_size / self.patch).pow(2)
    }

    fn encode_patches(&self, patches: Tensor<T>) -> Result<Tensor<T>> {
        match &self.backend {
            Backend::Patchify => Ok(patches),
            Backend::Autoencoder(ae) => ae.encode_patches(&patches),
            Backend::Frozen(f) => {
                let shape = patches.shape().to_vec();
                let pd = *shape.last().unwrap();
                let flat = patches.reshape(&[shape.iter().product::<usize>() / pd, pd])?;
                let z = flat.matmul(&f.weight)?;
                let mut out_shape = shape;
                *out_shape.last_mut().unwrap() = self.d_lat;
                Ok(z.reshape(&out_shape)?)
            }
        }
    }

    pub fn encode(&self, image: &Image) -> Result<LatentTokens<T>> {
        let p = patchify::<T>(image, self.patch)?;
        Ok(LatentTokens {
            z: self.encode_patches(p.z)?,
            source: self.kind,
            standardized: false,
        })
    }

    /// Raw targets `[B, N, d_lat]`.
    pub fn encode_batch(&self, images: &[&Image]) -> Result<Tensor<T>> {
        self.encode_patches(patchify_batch(images, self.patch)?)
    }

    /// Targets after standardization (raw when no statistics are fitted).
    pub fn encode_standardized(&self, images: &[&Image]) -> Result<Tensor<T>> {
        let z = self.encode_batch(images)?;
        match &self.standardizer {
            Some(s) => s.apply(&z),
            None => Ok(z),
        }
    }

    /// Fits standardization statistics on the given images.
    pub fn fit_standardizer(&mut self, images: &[&Image]) -> Result<()> {
        let z = self.encode_batch(images)?;
        self.standardizer = Some(Standardizer::fit(&z)?);
        Ok(())
    }

    pub fn destandardize(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        match &self.standardizer {
            Some(s) => s.invert(z),
            None => Ok(z.clone()),
        }
    }

    /// Pixel-space patches `[.., 3P²]` from raw latents.
    pub fn decode_patches(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        match &self.backend {
            Backend::Patchify => Ok(z.map(|x| x.max(T::zero()).min(T::one()))),
            Backend::Autoencoder(ae) => ae.decode_patches(z),
            Backend::Frozen(_) => Err(RossError::Unsupported("frozen_feature tokenizer has no decoder".into())),
        }
    }

    /// Image from one image's raw latents `[N, d_lat]`; output is in `[0, 1]`.
    pub fn decode(&self, latents: &LatentTokens<T>, height: usize, width: usize) -> Result<Image> {
        let z = if latents.standardized {
            self.destandardize(&latents.z)?
        } else {
            latents.z.clone()
        };
        let patches = self.decode_patches(&z)?;
        unpatchify(&patches, self.patch, height, width)
    }

    /// Differentiable decode with frozen tokenizer weights; `z` is raw latents.
    pub fn decode_graph(&self, g: &mut Graph<T>, z: Var) -> Result<Var> {
        match &self.backend {
            Backend::Patchify => Ok(z),
            Backend::Autoencoder(ae) => ae.decode_graph(g, z, true),
            Backend::Frozen(_) => Err(RossError::Unsupported("frozen_feature tokenizer has no decoder".into())),
        }
    }

    pub fn to_container(&self) -> Container {
        let mut meta = serde_json::json!({
            "kind": self.kind,
            "patch": self.patch,
            "d_lat": self.d_lat,
            "standardizer": self.standardizer,
        });
        let mut c = Container::new("tokenizer", serde_json::Value::Null);
        match &self.backend {
            Backend::Patchify => {}
            Backend::Autoencoder(ae) => {
                meta["ae"] = serde_json::to_value(ae.config).unwrap();
                c.push_store("ae.", &ae.store);
            }
            Backend::Frozen(f) => {
                meta["seed"] = f.seed.into();
                c.push("frozen.weight", &f.weight);
            }
        }
        c.meta = meta;
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let bad = |m: &str| RossError::Format {
            path: Default::default(),
            msg: m.to_string(),
        };
        let kind: TokenizerKind = serde_json::from_value(c.meta["kind"].clone())?;
        let patch = c.meta["patch"].as_u64().ok_or_else(|| bad("missing patch"))? as usize;
        let standardizer: Option<Standardizer> = serde_json::from_value(c.meta["standardizer"].clone())?;
        let mut tok = match kind {
            TokenizerKind::Patchify => Self::patchify(patch),
            TokenizerKind::LatentAe | TokenizerKind::Vq => {
                let config: AeConfig = serde_json::from_value(c.meta["ae"].clone())?;
                let mut ae = PatchAutoencoder::new(config, kind == TokenizerKind::Vq);
                c.load_store("ae.", &mut ae.store)?;
                Self::autoencoder(ae)
            }
            TokenizerKind::FrozenFeature => Self::frozen(FrozenFeature {
                patch,
                seed: c.meta["seed"].as_u64().unwrap_or_default(),
                weight: c.get("frozen.weight")?,
            }),
        };
        tok.standardizer = standardizer;
        Ok(tok)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::load(path)?.expect_kind("tokenizer", path)?;
        Self::from_container(&c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(h: usize, w: usize) -> Image {
        let n = h * w * 3;
        Image::new(h, w, (0..n).map(|i| i as f32 / n as f32).collect()).unwrap()
    }

    #[test]
    fn patch_order_for_unit_patches() {
        let img = ramp(2, 2);
        let t = patchify::<f32>(&img, 1).unwrap();
        assert_eq!(t.z.shape(), &[4, 3]);
        // (0,0), (0,1), (1,0), (1,1)
        for (k, (y, x)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
            for c in 0..3 {
                assert_eq!(t.z.row(k)[c], img.get(y, x, c));
            }
        }
    }

    #[test]
    fn located_pixel_lands_at_index_oracle() {
        let mut img = Image::filled(4, 4, [0.0; 3]);
        img.set(2, 3, [0.7; 3]);
        let t = patchify::<f64>(&img, 2).unwrap();
        // Independent index arithmetic: patch (row 1, col 1) -> token 1*2+1,
        // in-patch (0, 1) -> pixel offset 1, channel-fastest -> 3..6.
        let token = (4 / 2) + 3 / 2;
        let offset = 3;
        assert_eq!(token, 3);
        for c in 0..3 {
            assert_eq!(t.z.row(token)[offset + c], 0.7f32 as f64);
        }
        assert_eq!(t.z.sum(), 3.0 * (0.7f32 as f64));
        assert_eq!(unpatchify(&t.z, 2, 4, 4).unwrap(), img);
    }

    #[test]
    fn divisibility_is_checked() {
        assert!(matches!(patchify::<f32>(&ramp(6, 4), 4), Err(RossError::Shape(_))));
        let t = patchify::<f32>(&ramp(4, 4), 2).unwrap();
        assert!(unpatchify(&t.z, 2, 4, 8).is_err());
    }

    proptest! {
        #[test]
        fn patchify_round_trip(gh in 1usize..5, gw in 1usize..5, p in 1usize..5, seed in 0u64..1000) {
            let (h, w) = (gh * p, gw * p);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pixels: Vec<f32> = (0..h * w * 3).map(|_| rand::Rng::random::<f32>(&mut rng)).collect();
            let img = Image::new(h, w, pixels).unwrap();
            let t = patchify::<f32>(&img, p).unwrap();
            prop_assert_eq!(t.z.shape(), &[gh * gw, 3 * p * p]);
            prop_assert_eq!(unpatchify(&t.z, p, h, w).unwrap(), img);
        }
    }

    #[test]
    fn standardizer_moments_and_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let raw = Tensor::<f64>::randn(&[500, 4], 3.0, &mut rng).map(|x| x + 2.0);
        let s = Standardizer::fit(&raw).unwrap();
        let z = s.apply(&raw).unwrap();
        let check = Standardizer::fit(&z).unwrap();
        for c in 0..4 {
            assert!(check.mean[c].abs() < 1e-6);
            assert!((check.std[c] - 1.0).abs() < 1e-6);
        }
        assert!(s.invert(&z).unwrap().max_abs_diff(&raw) < 1e-10);
    }

    #[test]
    fn frozen_feature_properties() {
        let a = make_frozen_feature_tokenizer::<f32>(9, 16, 4);
        let b = make_frozen_feature_tokenizer::<f32>(9, 16, 4);
        assert_eq!(a.weight, b.weight);
        let tok = Tokenizer::frozen(a);
        let zero = tok.encode(&Image::filled(8, 8, [0.0; 3])).unwrap();
        assert!(zero.z.data().iter().all(|&x| x == 0.0));
        assert!(matches!(
            tok.decode(&zero, 8, 8),
            Err(RossError::Unsupported(_))
        ));
        assert!(!tok.has_decoder());
    }

    #[test]
    fn patchify_tokenizer_decode_is_exact() {
        let tok = Tokenizer::<f32>::patchify(2);
        let img = ramp(4, 6);
        let z = tok.encode(&img).unwrap();
        assert_eq!(tok.decode(&z, 4, 6).unwrap(), img);
    }

    #[test]
    fn constant_color_is_learned_quickly() {
        let imgs: Vec<Image> = (0..400).map(|_| Image::filled(8, 8, [0.2, 0.5, 0.8])).collect();
        let refs: Vec<&Image> = imgs.iter().collect();
        let config = AeConfig {
            epochs: 3,
            batch: 32,
            lr: 1e-2,
            threshold: 1e-4,
            ..AeConfig::default()
        };
        let (ae, report) = train_latent_autoencoder::<f32>(&refs, config, false).unwrap();
        assert!(report.heldout_mse < 1e-4, "{report:?}");
        let tok = Tokenizer::autoencoder(ae);
        let out = tok.decode(&tok.encode(&imgs[0]).unwrap(), 8, 8).unwrap();
        assert!(out.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn non_convergence_is_reported() {
        let imgs: Vec<Image> = (0..20).map(|_| ramp(8, 8)).collect();
        let refs: Vec<&Image> = imgs.iter().collect();
        let config = AeConfig {
            epochs: 1,
            threshold: 1e-12,
            ..AeConfig::default()
        };
        assert!(matches!(
            train_latent_autoencoder::<f32>(&refs, config, false),
            Err(RossError::NonConvergence { .. })
        ));
        assert!(matches!(
            train_latent_autoencoder::<f32>(&[], config, false),
            Err(RossError::Empty(_))
        ));
    }
}
