//! Attention-focus statistics, gradient saliency maps and feature-to-pixel
//! reconstruction for trained checkpoints.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ross_autograd::{Graph, Scalar, Tensor};
use serde::{Deserialize, Serialize};
use statrs::function::{beta::beta_reg, erf::erfc};

use crate::config::AttentionLayers;
use crate::diffusion::{p_sample_step_with, standard_normal};
use crate::error::{Result, RossError};
use crate::image::Image;
use crate::mmlm::{probe_prompt, MultimodalBatch, MultimodalLm, TextBatch, PROBE_CHUNK};
use crate::objectives::VisualObjective;
use crate::synthdata::{ProbeItem, Vocabulary};
use crate::tokenizers::LatentTokens;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
    pub p95: f64,
}

/// Two-sample comparison of score distributions `a` and `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatReport {
    pub mean_a: f64,
    pub mean_b: f64,
    pub percentiles_a: Percentiles,
    pub percentiles_b: Percentiles,
    pub t_stat: f64,
    pub t_pvalue: f64,
    pub u_stat: f64,
    pub u_pvalue: f64,
    pub n_a: usize,
    pub n_b: usize,
}

/// Linearly interpolated quantile of sorted data (`q` in `[0, 1]`).
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn percentiles(xs: &[f64]) -> Result<Percentiles> {
    if xs.is_empty() {
        return Err(RossError::Empty("sample"));
    }
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(Percentiles {
        p25: quantile_sorted(&s, 0.25),
        p50: quantile_sorted(&s, 0.50),
        p75: quantile_sorted(&s, 0.75),
        p95: quantile_sorted(&s, 0.95),
    })
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Two-sided tail probability `P(|T| >= |t|)` of Student's t with `df`
/// degrees of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    if t == 0.0 {
        return 1.0;
    }
    beta_reg(df / 2.0, 0.5, df / (df + t * t)).clamp(0.0, 1.0)
}

/// Welch's unequal-variance t test. Returns `(t, p)` with a two-sided p.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(RossError::Degenerate(format!(
            "welch test needs at least 2 values per sample, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let sa = sample_variance(a) / a.len() as f64;
    let sb = sample_variance(b) / b.len() as f64;
    let se2 = sa + sb;
    if !(se2 > 0.0) || !se2.is_finite() {
        return Err(RossError::Degenerate("both samples have zero variance".into()));
    }
    let t = (mean(a) - mean(b)) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (a.len() - 1) as f64 + sb * sb / (b.len() - 1) as f64);
    Ok((t, student_t_two_sided(t, df)))
}

/// Mann-Whitney U of `a` against `b` with a two-sided normal-approximation
/// p value (tie-corrected variance, continuity correction).
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.is_empty() || b.is_empty() {
        return Err(RossError::Empty("sample"));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let mut all: Vec<(f64, bool)> = a.iter().map(|&x| (x, true)).chain(b.iter().map(|&x| (x, false))).collect();
    all.sort_by(|x, y| x.0.total_cmp(&y.0));
    let n = all.len();
    let mut rank_sum_a = 0.0;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        let count = (j - i + 1) as f64;
        tie_term += count * count * count - count;
        rank_sum_a += all[i..=j].iter().filter(|e| e.1).count() as f64 * mid;
        i = j + 1;
    }
    let u = rank_sum_a - na * (na + 1.0) / 2.0;
    let nn = na + nb;
    let var = na * nb / 12.0 * ((nn + 1.0) - tie_term / (nn * (nn - 1.0)));
    if !(var > 0.0) {
        return Ok((u, 1.0));
    }
    let z = ((u - na * nb / 2.0).abs() - 0.5).max(0.0) / var.sqrt();
    Ok((u, erfc(z / std::f64::consts::SQRT_2).min(1.0)))
}

pub fn stat_report(a: &[f64], b: &[f64]) -> Result<StatReport> {
    let (t_stat, t_pvalue) = welch_t_test(a, b)?;
    let (u_stat, u_pvalue) = mann_whitney_u(a, b)?;
    Ok(StatReport {
        mean_a: mean(a),
        mean_b: mean(b),
        percentiles_a: percentiles(a)?,
        percentiles_b: percentiles(b)?,
        t_stat,
        t_pvalue,
        u_stat,
        u_pvalue,
        n_a: a.len(),
        n_b: b.len(),
    })
}

/// Mean attention of query row `pos` of item `b` over keys `0..n_visual`,
/// averaged over heads. `probs` is `[B, H, S, S]`.
pub fn visual_attention_score<T: Scalar>(probs: &[T], dims: [usize; 4], b: usize, pos: usize, n_visual: usize) -> f64 {
    let [_, heads, s, _] = dims;
    let mut total = 0.0;
    for h in 0..heads {
        let row = &probs[((b * heads + h) * s + pos) * s..][..s];
        total += row[..n_visual].iter().map(|x| x.to_f64().unwrap()).sum::<f64>() / n_visual as f64;
    }
    total / heads as f64
}

/// One score per prompt: attention of the last prompt token to the visual
/// prefix, averaged over heads of the final decoder layer (or over all
/// layers) and over visual positions.
pub fn attention_to_visual<T: Scalar>(
    model: &MultimodalLm<T>,
    images: &[&Image],
    prompts: &[Vec<usize>],
    layers: AttentionLayers,
) -> Result<Vec<f64>> {
    if images.is_empty() {
        return Err(RossError::Empty("batch"));
    }
    if images.len() != prompts.len() {
        return Err(RossError::shape(format!("{} images for {} prompts", images.len(), prompts.len())));
    }
    let mut scores = Vec::with_capacity(images.len());
    for (imgs, seqs) in images.chunks(PROBE_CHUNK).zip(prompts.chunks(PROBE_CHUNK)) {
        let pairs: Vec<_> = seqs.iter().map(|s| (s.clone(), vec![false; s.len()])).collect();
        let text = TextBatch::from_sequences(&pairs, 0)?;
        let mut g = Graph::new();
        let fwd = model.forward(
            &mut g,
            &MultimodalBatch {
                images: imgs.to_vec(),
                text: text.clone(),
            },
        )?;
        let picked = match layers {
            AttentionLayers::Final => &fwd.attn[fwd.attn.len() - 1..],
            AttentionLayers::All => &fwd.attn[..],
        };
        for b in 0..text.batch {
            let pos = fwd.prefix + text.item_len(b) - 1;
            let mut total = 0.0;
            for &node in picked {
                let (probs, dims) = g
                    .attention_probs(node)
                    .ok_or_else(|| RossError::shape("decoder attention node has no probabilities"))?;
                total += visual_attention_score(probs, dims, b, pos, fwd.prefix);
            }
            scores.push(total / picked.len() as f64);
        }
    }
    Ok(scores)
}

/// [`attention_to_visual`] over probe items, using the probe prompt.
pub fn probe_attention_scores<T: Scalar>(
    model: &MultimodalLm<T>,
    items: &[ProbeItem<'_>],
    vocab: &Vocabulary,
    layers: AttentionLayers,
) -> Result<Vec<f64>> {
    let images: Vec<&Image> = items.iter().map(|it| it.image).collect();
    let prompts: Vec<Vec<usize>> = items.iter().map(|it| probe_prompt(it.question, vocab)).collect();
    attention_to_visual(model, &images, &prompts, layers)
}

/// A saliency map over the patch grid, max-normalized to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Saliency {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl Saliency {
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }
}

/// `ReLU(<g_i, a_i>)` per token, normalized by the maximum. `activations`
/// and `gradients` are `[N, d]` row-major; a missing gradient gives zeros.
pub fn saliency_from<T: Scalar>(
    activations: &[T],
    gradients: Option<&[T]>,
    n: usize,
    d: usize,
    grid: (usize, usize),
) -> Result<Saliency> {
    if grid.0 * grid.1 != n || activations.len() < n * d {
        return Err(RossError::shape(format!("{n} tokens do not fill a {}x{} grid", grid.0, grid.1)));
    }
    let mut values = vec![0.0; n];
    if let Some(grad) = gradients {
        for (i, v) in values.iter_mut().enumerate() {
            let dot: f64 = activations[i * d..(i + 1) * d]
                .iter()
                .zip(&grad[i * d..(i + 1) * d])
                .map(|(a, g)| a.to_f64().unwrap() * g.to_f64().unwrap())
                .sum();
            *v = dot.max(0.0);
        }
    }
    let max = values.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        values.iter_mut().for_each(|v| *v /= max);
    }
    Ok(Saliency {
        rows: grid.0,
        cols: grid.1,
        values,
    })
}

/// Saliency of the visual tokens for `target` at the token after `prompt`,
/// taken at the input of the last decoder block.
pub fn gradcam<T: Scalar>(model: &MultimodalLm<T>, image: &Image, prompt: &[usize], target: usize) -> Result<Saliency> {
    let vocab = model.config.vocab_size;
    if target >= vocab {
        return Err(RossError::shape(format!("target token {target} outside vocabulary of {vocab}")));
    }
    if prompt.is_empty() {
        return Err(RossError::Empty("prompt"));
    }
    let text = TextBatch::from_sequences(&[(prompt.to_vec(), vec![false; prompt.len()])], 0)?;
    let mut g = Graph::new();
    let fwd = model.forward(
        &mut g,
        &MultimodalBatch {
            images: vec![image],
            text,
        },
    )?;
    let pos = fwd.prefix + prompt.len() - 1;
    let mut pick = Tensor::zeros(g.shape(fwd.logits));
    pick.data_mut()[pos * vocab + target] = T::one();
    let pick = g.constant(pick);
    let selected = g.mul(fwd.logits, pick)?;
    let numel = T::from_usize(g.value(selected).numel()).unwrap();
    let mean = g.mean(selected);
    let logit = g.scale(mean, numel);
    let grads = g.backward(logit)?;
    let layer = fwd.hidden[model.config.n_layers - 1];
    let (n, d) = (fwd.prefix, model.config.d_model);
    let act = &g.value(layer).data()[..n * d];
    let grad = grads.of(layer).map(|t| &t.data()[..n * d]);
    let side = model.config.image_size / model.config.patch_size;
    saliency_from(act, grad, n, d, (side, side))
}

/// Images rebuilt from the model's visual outputs by conditional ancestral
/// sampling. Image `i` draws all of its noise from stream `i` of `seed`.
pub fn reconstruct_batch<T: Scalar>(
    model: &MultimodalLm<T>,
    objective: &VisualObjective<T>,
    images: &[&Image],
    seed: u64,
) -> Result<Vec<Image>> {
    reconstruct_batch_from(model, objective, images, seed, 0)
}

/// [`reconstruct_batch`] with image `i` on stream `first_stream + i`.
pub fn reconstruct_batch_from<T: Scalar>(
    model: &MultimodalLm<T>,
    objective: &VisualObjective<T>,
    images: &[&Image],
    seed: u64,
    first_stream: u64,
) -> Result<Vec<Image>> {
    let kind = objective.kind();
    let denoiser = objective.denoiser.as_ref().ok_or(RossError::MissingComponent {
        variant: kind.name(),
        component: "denoiser",
    })?;
    let tokenizer = objective.tokenizer.as_ref().ok_or(RossError::MissingComponent {
        variant: kind.name(),
        component: "tokenizer",
    })?;
    if !tokenizer.has_decoder() {
        return Err(RossError::Unsupported(format!("{} tokenizer has no decoder", tokenizer.kind())));
    }
    let schedule = objective.schedule.as_ref().ok_or(RossError::MissingComponent {
        variant: kind.name(),
        component: "noise schedule",
    })?;
    if images.is_empty() {
        return Err(RossError::Empty("image batch"));
    }
    let cond = model.visual_outputs(images)?;
    let n = cond.shape()[1];
    let item_shape = [1, n, tokenizer.d_lat()];
    let mut rngs: Vec<ChaCha8Rng> = (0..images.len())
        .map(|i| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(first_stream + i as u64);
            r
        })
        .collect();
    let draw = |rngs: &mut [ChaCha8Rng]| -> Result<Tensor<T>> {
        let parts: Vec<Tensor<T>> = rngs.iter_mut().map(|r| standard_normal(&item_shape, r)).collect();
        let stacked = Tensor::stack(&parts)?;
        Ok(stacked.reshape(&[images.len(), n, item_shape[2]])?)
    };
    let mut z = draw(&mut rngs)?;
    for t in (1..=schedule.steps()).rev() {
        let noise = if t > 1 { Some(draw(&mut rngs)?) } else { None };
        z = p_sample_step_with(denoiser, &z, t, &cond, schedule, noise.as_ref())?;
    }
    let z = objective.from_diffusion_space(&z)?;
    images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let latents = LatentTokens {
                z: z.index0(i)?,
                source: tokenizer.kind(),
                standardized: false,
            };
            tokenizer.decode(&latents, img.height, img.width)
        })
        .collect()
}

pub fn reconstruct_from_features<T: Scalar>(
    model: &MultimodalLm<T>,
    objective: &VisualObjective<T>,
    image: &Image,
    seed: u64,
) -> Result<Image> {
    Ok(reconstruct_batch(model, objective, &[image], seed)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Simpson integration of the Student-t density.
    fn t_two_sided_quadrature(t: f64, df: f64) -> f64 {
        let ln_norm = statrs::function::gamma::ln_gamma((df + 1.0) / 2.0)
            - statrs::function::gamma::ln_gamma(df / 2.0)
            - 0.5 * (df * std::f64::consts::PI).ln();
        let pdf = |x: f64| (ln_norm - (df + 1.0) / 2.0 * (1.0 + x * x / df).ln()).exp();
        let n = 200_000;
        let h = t.abs() / n as f64;
        let mut s = pdf(0.0) + pdf(t.abs());
        for i in 1..n {
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * pdf(i as f64 * h);
        }
        1.0 - 2.0 * s * h / 3.0
    }

    #[test]
    fn welch_against_quadrature() {
        let (t, p) = welch_t_test(&[1.0, 2.0, 3.0, 4.0], &[2.0, 3.0, 4.0, 5.0]).unwrap();
        // equal variances 5/3, n = 4: t = -1 / sqrt(5/6), df = 6
        assert!((t + (6.0f64 / 5.0).sqrt()).abs() < 1e-12);
        assert!((p - t_two_sided_quadrature(t, 6.0)).abs() < 1e-8);
    }

    #[test]
    fn welch_identity_and_scale() {
        let a = [0.3, 1.7, 2.2, 0.9];
        assert_eq!(welch_t_test(&a, &a).unwrap(), (0.0, 1.0));
        let b = [1.1, 0.2, 3.5];
        let (t, p) = welch_t_test(&a, &b).unwrap();
        let sa: Vec<f64> = a.iter().map(|x| x * 7.5).collect();
        let sb: Vec<f64> = b.iter().map(|x| x * 7.5).collect();
        let (t2, p2) = welch_t_test(&sa, &sb).unwrap();
        assert!((t - t2).abs() < 1e-12 && (p - p2).abs() < 1e-12);
        assert!(welch_t_test(&[1.0, 1.0], &[2.0, 2.0]).is_err());
        assert!(welch_t_test(&[1.0], &[2.0, 3.0]).is_err());
    }

    #[test]
    fn mann_whitney_examples() {
        assert_eq!(mann_whitney_u(&[1.0, 2.0], &[3.0, 4.0]).unwrap().0, 0.0);
        assert_eq!(mann_whitney_u(&[1.0, 3.0], &[2.0, 4.0]).unwrap().0, 1.0);
        let a = [0.5, 0.1, 0.9, 0.4];
        let (u, p) = mann_whitney_u(&a, &a).unwrap();
        assert_eq!(u, 8.0);
        assert_eq!(p, 1.0);
        assert_eq!(mann_whitney_u(&[2.0, 2.0], &[2.0]).unwrap(), (1.0, 1.0));
        assert!(mann_whitney_u(&[], &[1.0]).is_err());
    }

    #[test]
    fn percentiles_are_interpolated() {
        let p = percentiles(&[4.0, 1.0, 3.0, 2.0, 5.0]).unwrap();
        assert_eq!((p.p25, p.p50, p.p75), (2.0, 3.0, 4.0));
        assert!((p.p95 - 4.8).abs() < 1e-12);
        assert!(percentiles(&[]).is_err());
    }

    #[test]
    fn score_of_uniform_rows() {
        // one head, N = 3 visual keys, M = 2 text keys
        let s = 5;
        let probs = vec![1.0 / s as f64; s * s];
        let score = visual_attention_score(&probs, [1, 1, s, s], 0, s - 1, 3);
        assert!((score - 0.2).abs() < 1e-15);
        let mut focused = vec![0.0; s * s];
        focused[(s - 1) * s..(s - 1) * s + 3].fill(1.0 / 3.0);
        let score = visual_attention_score(&focused, [1, 1, s, s], 0, s - 1, 3);
        assert!((score - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn saliency_edge_cases() {
        let act = vec![1.0f64; 4 * 2];
        let zero = saliency_from(&act, Some(&[0.0; 8]), 4, 2, (2, 2)).unwrap();
        assert!(zero.values.iter().all(|&v| v == 0.0));
        let none = saliency_from::<f64>(&act, None, 4, 2, (2, 2)).unwrap();
        assert_eq!(none, zero);
        let grad = [1.0, 1.0, -3.0, 0.0, 0.5, 0.5, 0.25, 0.0];
        let s = saliency_from(&act, Some(&grad), 4, 2, (2, 2)).unwrap();
        assert_eq!(s.values, vec![1.0, 0.0, 0.5, 0.125]);
        assert!(saliency_from(&act, None, 4, 2, (3, 1)).is_err());
    }
}
