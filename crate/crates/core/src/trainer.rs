//! Joint optimization of `L_text + λ L_visual`, checkpoints and evaluation.
//!
//! Every source of randomness is keyed by `(seed, step)` or `(seed, epoch)`,
//! so a run resumed from any checkpoint replays the uninterrupted run.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ross_autograd::{clip_grad_norm, AdamW, AdamWConfig, Graph, ParamStore, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::{LrDecay, TrainConfig};
use crate::container::Container;
use crate::error::{Result, RossError};
use crate::image::Image;
use crate::mmlm::{ModelAnswerer, MultimodalBatch, MultimodalLm, TextBatch};
use crate::objectives::{combined_loss, creation_prompt, ObjectiveKind, VisualObjective};
use crate::synthdata::{qa_accuracy, Dataset, Qa, Sample, Split, Vocabulary};
use crate::tokenizers::{make_frozen_feature_tokenizer, train_latent_autoencoder, Tokenizer, TokenizerKind};

const DATA_SALT: u64 = 0xda7a_5eed;
const NOISE_SALT: u64 = 0x0015_e5a1;
const EVAL_SALT: u64 = 0xe7a1_5eed;
const OBJECTIVE_SALT: u64 = 0x0b1e_c71e;

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub text_loss: f64,
    pub visual_loss: Option<f64>,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub step: usize,
    pub samples: usize,
    pub probe_accuracy: f64,
    pub text_loss: f64,
    pub visual_loss: Option<f64>,
}

/// Linear warmup over the first `ceil(ratio * total)` steps, then cosine
/// decay towards 0 (or constant).
pub fn lr_at(step: usize, total: usize, base: f64, warmup_ratio: f64, decay: LrDecay) -> f64 {
    let warmup = (warmup_ratio * total as f64).ceil() as usize;
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    match decay {
        LrDecay::Constant => base,
        LrDecay::Cosine => {
            let span = total.saturating_sub(warmup).max(1);
            let progress = ((step - warmup) as f64 / span as f64).min(1.0);
            0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

/// `<bos> question <sep> answer <eos>` with the answer and `<eos>`
/// supervised (and the question too when requested).
pub fn qa_sequence(qa: &Qa, vocab: &Vocabulary, supervise_instruction: bool) -> (Vec<usize>, Vec<bool>) {
    let mut ids = vec![vocab.bos()];
    ids.extend_from_slice(&qa.question);
    ids.push(vocab.sep());
    let prompt = ids.len();
    ids.push(qa.answer);
    ids.push(vocab.eos());
    let mask = (0..ids.len())
        .map(|j| j >= prompt || (supervise_instruction && j > 0))
        .collect();
    (ids, mask)
}

/// Builds the teacher tokenizer a config asks for, fitting the autoencoder
/// and the standardization statistics on the first training images.
pub fn prepare_tokenizer<T: Scalar>(config: &TrainConfig, train: &[Sample]) -> Result<Option<Tokenizer<T>>> {
    let Some(kind) = config.objective.target_tokenizer() else {
        return Ok(None);
    };
    let fit: Vec<&Image> = train.iter().take(config.tokenizer.fit_images).map(|s| &s.image).collect();
    if fit.is_empty() {
        return Err(RossError::Empty("tokenizer fitting set"));
    }
    let p = config.model.patch_size;
    let tok = match (&config.tokenizer.path, kind) {
        (_, TokenizerKind::Patchify) => Tokenizer::patchify(p),
        (_, TokenizerKind::FrozenFeature) => Tokenizer::frozen(make_frozen_feature_tokenizer(
            config.tokenizer.frozen_seed,
            config.tokenizer.frozen_d_lat,
            p,
        )),
        (Some(path), _) => Tokenizer::load(path)?,
        (None, _) => {
            let (ae, _) = train_latent_autoencoder(&fit, config.tokenizer.ae, kind == TokenizerKind::Vq)?;
            Tokenizer::autoencoder(ae)
        }
    };
    finish_tokenizer(config, tok, train).map(Some)
}

fn finish_tokenizer<T: Scalar>(config: &TrainConfig, mut tok: Tokenizer<T>, train: &[Sample]) -> Result<Tokenizer<T>> {
    if config.objective.kind.uses_denoiser() && config.objective.standardize && tok.standardizer.is_none() {
        let fit: Vec<&Image> = train.iter().take(config.tokenizer.fit_images).map(|s| &s.image).collect();
        tok.fit_standardizer(&fit)?;
    }
    Ok(tok)
}

fn adam_config(config: &TrainConfig) -> AdamWConfig {
    AdamWConfig {
        beta1: config.optimizer.betas[0],
        beta2: config.optimizer.betas[1],
        eps: config.optimizer.eps,
        weight_decay: config.optimizer.weight_decay,
    }
}

pub struct Trainer<T: Scalar> {
    pub config: TrainConfig,
    pub model: MultimodalLm<T>,
    pub objective: VisualObjective<T>,
    opt_model: AdamW<T>,
    opt_objective: AdamW<T>,
    opt_denoiser: Option<AdamW<T>>,
    /// Steps completed so far.
    pub step: usize,
    pub total_steps: usize,
    train_len: usize,
    vocab: Vocabulary,
}

impl<T: Scalar> Trainer<T> {
    /// `tokenizer` overrides the one the config would build (e.g. to share a
    /// trained autoencoder across runs).
    pub fn new(config: TrainConfig, train: &[Sample], tokenizer: Option<Tokenizer<T>>) -> Result<Self> {
        config.validate()?;
        let n = config.train.train_limit.map_or(train.len(), |l| l.min(train.len()));
        if n == 0 {
            return Err(RossError::Empty("training split"));
        }
        let train = &train[..n];
        let tokenizer = match tokenizer {
            Some(t) if config.objective.kind != ObjectiveKind::None => Some(finish_tokenizer(&config, t, train)?),
            Some(_) => None,
            None => prepare_tokenizer(&config, train)?,
        };
        let seed = config.train.seed;
        let model = MultimodalLm::new(config.model, seed)?;
        let objective = VisualObjective::new(
            config.objective,
            &config.model,
            config.denoiser,
            config.schedule.build()?,
            tokenizer,
            seed ^ OBJECTIVE_SALT,
        )?;
        let spe = n.div_ceil(config.train.batch_size);
        let total_steps = match config.train.max_steps {
            Some(m) if config.train.epochs == 0 => m,
            Some(m) => m.min(spe * config.train.epochs),
            None => spe * config.train.epochs,
        };
        let ac = adam_config(&config);
        Ok(Self {
            opt_model: AdamW::new(&model.store, ac),
            opt_objective: AdamW::new(&objective.store, ac),
            opt_denoiser: objective.denoiser.as_ref().map(|d| AdamW::new(&d.store, ac)),
            config,
            model,
            objective,
            step: 0,
            total_steps,
            train_len: n,
            vocab: Vocabulary::new(),
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.train_len.div_ceil(self.config.train.batch_size)
    }

    pub fn lr(&self, step: usize) -> f64 {
        let t = &self.config.train;
        lr_at(step, self.total_steps, self.config.optimizer.lr, t.warmup_ratio, t.lr_decay)
    }

    /// `(sample, qa)` pairs of the batch at `step`.
    pub fn batch_indices(&self, step: usize) -> Vec<(usize, usize)> {
        let spe = self.steps_per_epoch();
        let (epoch, pos) = (step / spe, step % spe);
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.train.seed ^ DATA_SALT);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..self.train_len).collect();
        order.shuffle(&mut rng);
        let picks: Vec<usize> = order.iter().map(|_| rng.random_range(0..usize::MAX)).collect();
        let bs = self.config.train.batch_size;
        let end = ((pos + 1) * bs).min(self.train_len);
        (pos * bs..end).map(|k| (order[k], picks[k])).collect()
    }

    fn noise_rng(&self, step: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.train.seed ^ NOISE_SALT);
        rng.set_stream(step as u64);
        rng
    }

    fn set_stage(&mut self, step: usize) {
        let t = &self.config.train;
        let stage1 = t.two_stage && (step as f64) < t.stage1_fraction * self.total_steps as f64;
        self.model.store.set_trainable_prefix("", !stage1);
        if stage1 {
            self.model.store.set_trainable_prefix("projector.", true);
        }
    }

    /// Text batch (one QA per sample) plus creation prompts for the
    /// generative objective.
    fn build_text(&self, samples: &[(&Sample, &Qa)]) -> Result<TextBatch> {
        let seqs: Vec<_> = samples
            .iter()
            .map(|(_, qa)| qa_sequence(qa, &self.vocab, self.config.train.supervise_instruction))
            .collect();
        TextBatch::from_sequences(&seqs, self.vocab.pad())
    }

    fn creation_text(&self, samples: &[&Sample]) -> Result<TextBatch> {
        let seqs: Vec<_> = samples
            .iter()
            .map(|s| {
                let ids = creation_prompt(&s.caption, &self.vocab);
                let n = ids.len();
                (ids, vec![false; n])
            })
            .collect();
        TextBatch::from_sequences(&seqs, self.vocab.pad())
    }

    /// Loss graph for a batch; returns `(graph, loss, text, visual)`.
    fn losses<R: Rng + ?Sized>(
        &self,
        samples: &[(&Sample, &Qa)],
        rng: &mut R,
    ) -> Result<(Graph<T>, ross_autograd::Var, f64, Option<f64>)> {
        let images: Vec<&Image> = samples.iter().map(|(s, _)| &s.image).collect();
        let text = self.build_text(samples)?;
        let mut g = Graph::new();
        let batch = MultimodalBatch {
            images: images.clone(),
            text: text.clone(),
        };
        let fwd = self.model.forward(&mut g, &batch)?;
        let text_loss = self.model.text_loss(&mut g, &fwd, &text)?;
        let visual = match self.objective.kind() {
            ObjectiveKind::None => None,
            ObjectiveKind::Generative => {
                let only: Vec<&Sample> = samples.iter().map(|(s, _)| *s).collect();
                let creation = self.creation_text(&only)?;
                Some(self.objective.generative_visual_loss(&mut g, &self.model, &creation, &images, rng)?)
            }
            _ => Some(self.objective.visual_loss(&mut g, fwd.visual.unwrap(), &images, rng)?),
        };
        let tv = g.value(text_loss).item().to_f64().unwrap();
        let vv = visual.map(|v| g.value(v).item().to_f64().unwrap());
        let loss = combined_loss(&mut g, text_loss, visual, self.config.objective.lambda_visual)?;
        Ok((g, loss, tv, vv))
    }

    /// One optimizer step on the batch scheduled for `self.step`.
    pub fn train_step(&mut self, train: &[Sample]) -> Result<StepMetrics> {
        if train.len() < self.train_len {
            return Err(RossError::config(format!(
                "training split has {} samples, run expects {}",
                train.len(),
                self.train_len
            )));
        }
        let start = Instant::now();
        let step = self.step;
        self.set_stage(step);
        let picks: Vec<(&Sample, &Qa)> = self
            .batch_indices(step)
            .into_iter()
            .map(|(i, r)| {
                let s = &train[i];
                (s, &s.qa[r % s.qa.len()])
            })
            .collect();
        let mut rng = self.noise_rng(step);
        let (g, loss, tv, vv) = self.losses(&picks, &mut rng).map_err(|e| match e {
            RossError::NonFinite {
                text_loss, visual_loss, ..
            } => RossError::NonFinite {
                step: step as u64,
                text_loss,
                visual_loss,
            },
            other => other,
        })?;
        let grads = g.backward(loss)?;
        let mut gm = grads.for_store(&self.model.store);
        let mut go = grads.for_store(&self.objective.store);
        let mut gd = self.objective.denoiser.as_ref().map(|d| grads.for_store(&d.store)).unwrap_or_default();
        drop(grads);
        let (nm, no) = (gm.len(), go.len());
        let mut all: Vec<Option<Tensor<T>>> = gm.drain(..).chain(go.drain(..)).chain(gd.drain(..)).collect();
        let norm = clip_grad_norm(&mut all, self.config.train.clip_norm);
        let gd: Vec<_> = all.split_off(nm + no);
        let go: Vec<_> = all.split_off(nm);
        let lr = self.lr(step);
        self.opt_model.update(&mut self.model.store, &all, lr);
        self.opt_objective.update(&mut self.objective.store, &go, lr);
        if let (Some(opt), Some(d)) = (self.opt_denoiser.as_mut(), self.objective.denoiser.as_mut()) {
            opt.update(&mut d.store, &gd, lr);
        }
        self.step += 1;
        Ok(StepMetrics {
            step,
            epoch: step / self.steps_per_epoch(),
            text_loss: tv,
            visual_loss: vv,
            loss: g.value(loss).item().to_f64().unwrap(),
            lr,
            grad_norm: norm.to_f64().unwrap(),
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Probe accuracy plus mean text/visual losses over every QA pair of
    /// `samples`, with a fixed noise stream.
    pub fn evaluate(&self, samples: &[Sample], split: &str) -> Result<EvalReport> {
        if samples.is_empty() {
            return Err(RossError::Empty("evaluation split"));
        }
        let accuracy = qa_accuracy(
            &ModelAnswerer {
                model: &self.model,
                vocab: &self.vocab,
            },
            samples,
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.train.seed ^ EVAL_SALT);
        let pairs: Vec<(&Sample, &Qa)> = samples.iter().flat_map(|s| s.qa.iter().map(move |q| (s, q))).collect();
        let (mut text_sum, mut text_n) = (0.0, 0usize);
        let (mut vis_sum, mut vis_n) = (0.0, 0usize);
        for chunk in pairs.chunks(EVAL_CHUNK) {
            let (_, _, tv, vv) = self.losses(chunk, &mut rng)?;
            let supervised = self.build_text(chunk)?.supervised();
            text_sum += tv * supervised as f64;
            text_n += supervised;
            if let Some(v) = vv {
                vis_sum += v * chunk.len() as f64;
                vis_n += chunk.len();
            }
        }
        Ok(EvalReport {
            split: split.to_string(),
            step: self.step,
            samples: samples.len(),
            probe_accuracy: accuracy,
            text_loss: text_sum / text_n as f64,
            visual_loss: (vis_n > 0).then(|| vis_sum / vis_n as f64),
        })
    }

    pub fn to_container(&self) -> Result<Container> {
        let tok = self.objective.tokenizer.as_ref().map(|t| t.to_container());
        let meta = serde_json::json!({
            "format": "ross-checkpoint",
            "config": self.config,
            "step": self.step,
            "total_steps": self.total_steps,
            "train_len": self.train_len,
            "precision": T::DTYPE.name(),
            "rng": {"seed": self.config.train.seed, "next_step": self.step},
            "optimizer": {
                "model_step": self.opt_model.step,
                "objective_step": self.opt_objective.step,
                "denoiser_step": self.opt_denoiser.as_ref().map(|o| o.step),
            },
            "tokenizer": tok.as_ref().map(|c| c.meta.clone()),
        });
        let mut c = Container::new("checkpoint", meta);
        c.push_store("model.", &self.model.store);
        push_adam(&mut c, "adam.model.", &self.model.store, &self.opt_model);
        c.push_store("objective.", &self.objective.store);
        push_adam(&mut c, "adam.objective.", &self.objective.store, &self.opt_objective);
        if let (Some(d), Some(o)) = (&self.objective.denoiser, &self.opt_denoiser) {
            c.push_store("denoiser.", &d.store);
            push_adam(&mut c, "adam.denoiser.", &d.store, o);
        }
        if let Some(tc) = tok {
            for name in tc.names().map(str::to_string).collect::<Vec<_>>() {
                c.push(format!("tokenizer.{name}"), &tc.get::<T>(&name)?);
            }
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let config: TrainConfig = serde_json::from_value(c.meta["config"].clone())?;
        config.validate()?;
        let get = |k: &str| c.meta[k].as_u64().map(|v| v as usize).ok_or_else(|| bad_meta(k));
        let tokenizer = match c.meta.get("tokenizer").filter(|v| !v.is_null()) {
            Some(tmeta) => {
                let mut tc = Container::new("tokenizer", tmeta.clone());
                for name in c.names().filter_map(|n| n.strip_prefix("tokenizer.")).map(str::to_string).collect::<Vec<_>>() {
                    tc.push(name.clone(), &c.get::<T>(&format!("tokenizer.{name}"))?);
                }
                Some(Tokenizer::from_container(&tc)?)
            }
            None => None,
        };
        let seed = config.train.seed;
        let mut model = MultimodalLm::new(config.model, seed)?;
        c.load_store("model.", &mut model.store)?;
        let mut objective = VisualObjective::new(
            config.objective,
            &config.model,
            config.denoiser,
            config.schedule.build()?,
            tokenizer,
            seed ^ OBJECTIVE_SALT,
        )?;
        c.load_store("objective.", &mut objective.store)?;
        if let Some(d) = objective.denoiser.as_mut() {
            c.load_store("denoiser.", &mut d.store)?;
        }
        let ac = adam_config(&config);
        let opt = &c.meta["optimizer"];
        let opt_model = load_adam(c, "adam.model.", &model.store, ac, opt["model_step"].as_u64())?;
        let opt_objective = load_adam(c, "adam.objective.", &objective.store, ac, opt["objective_step"].as_u64())?;
        let opt_denoiser = match objective.denoiser.as_ref() {
            Some(d) => Some(load_adam(c, "adam.denoiser.", &d.store, ac, opt["denoiser_step"].as_u64())?),
            None => None,
        };
        Ok(Self {
            step: get("step")?,
            total_steps: get("total_steps")?,
            train_len: get("train_len")?,
            config,
            model,
            objective,
            opt_model,
            opt_objective,
            opt_denoiser,
            vocab: Vocabulary::new(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::load(path)?.expect_kind("checkpoint", path)?;
        Self::from_container(&c)
    }

    /// Trains to completion, writing `metrics.jsonl`, `eval.jsonl` and
    /// checkpoints under `out_dir/ckpt/`. A resumed trainer (step > 0)
    /// keeps the log lines of the steps it has already done.
    pub fn run(&mut self, data: &Dataset, out_dir: &Path) -> Result<RunSummary> {
        let ckpt = out_dir.join("ckpt");
        fs::create_dir_all(&ckpt).map_err(|e| RossError::io(&ckpt, e))?;
        let metrics_path = out_dir.join("metrics.jsonl");
        let eval_path = out_dir.join("eval.jsonl");
        truncate_log(&metrics_path, self.step)?;
        truncate_log(&eval_path, self.step + 1)?;
        let train = data.split(Split::Train);
        let val = data.split(Split::Val);
        let limit = self.config.train.eval_samples;
        let val = if limit > 0 { &val[..limit.min(val.len())] } else { val };
        let every = self.config.train.eval_every;
        while self.step < self.total_steps {
            let m = self.train_step(train)?;
            append_json(&metrics_path, &m)?;
            if every > 0 && self.step.is_multiple_of(every) && self.step < self.total_steps {
                let report = self.evaluate(val, "val")?;
                append_json(&eval_path, &report)?;
                self.save(&ckpt.join(format!("step_{:06}.rsc", self.step)))?;
            }
        }
        let report = self.evaluate(val, "val")?;
        append_json(&eval_path, &report)?;
        let final_path = ckpt.join("final.rsc");
        self.save(&final_path)?;
        Ok(RunSummary {
            steps: self.step,
            checkpoint: final_path,
            val: report,
        })
    }
}

/// QA pairs per evaluation forward pass.
const EVAL_CHUNK: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: usize,
    pub checkpoint: PathBuf,
    pub val: EvalReport,
}

fn bad_meta(key: &str) -> RossError {
    RossError::Format {
        path: PathBuf::new(),
        msg: format!("checkpoint meta lacks {key}"),
    }
}

fn push_adam<T: Scalar>(c: &mut Container, prefix: &str, store: &ParamStore<T>, opt: &AdamW<T>) {
    for (id, name, _) in store.iter() {
        c.push(format!("{prefix}m.{name}"), &opt.m[id.index()]);
        c.push(format!("{prefix}v.{name}"), &opt.v[id.index()]);
    }
}

fn load_adam<T: Scalar>(
    c: &Container,
    prefix: &str,
    store: &ParamStore<T>,
    config: AdamWConfig,
    step: Option<u64>,
) -> Result<AdamW<T>> {
    let mut opt = AdamW::new(store, config);
    opt.step = step.ok_or_else(|| bad_meta("optimizer step"))?;
    for (id, name, t) in store.iter() {
        let m: Tensor<T> = c.get(&format!("{prefix}m.{name}"))?;
        let v: Tensor<T> = c.get(&format!("{prefix}v.{name}"))?;
        if m.shape() != t.shape() || v.shape() != t.shape() {
            return Err(RossError::shape(format!("optimizer state for {name}")));
        }
        opt.m[id.index()] = m;
        opt.v[id.index()] = v;
    }
    Ok(opt)
}

fn append_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| RossError::io(path, e))?;
    let line = serde_json::to_string(value)?;
    writeln!(f, "{line}").map_err(|e| RossError::io(path, e))
}

/// Keeps only log lines whose `step` is below `keep_below`.
fn truncate_log(path: &Path, keep_below: usize) -> Result<()> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(RossError::io(path, e)),
    };
    let mut kept = String::new();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line)?;
        if v["step"].as_u64().is_some_and(|s| (s as usize) < keep_below) {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(|e| RossError::io(path, e))
}

/// Reads `metrics.jsonl`.
pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let text = fs::read_to_string(path).map_err(|e| RossError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::generate_sample;

    #[test]
    fn lr_schedule_oracle() {
        let (total, base) = (100, 1.0);
        // warmup = ceil(0.05 * 100) = 5
        for s in 0..5 {
            assert_eq!(lr_at(s, total, base, 0.05, LrDecay::Cosine), (s + 1) as f64 / 5.0);
        }
        assert_eq!(lr_at(5, total, base, 0.05, LrDecay::Cosine), 1.0);
        let mid = lr_at(5 + 95 / 2, total, base, 0.05, LrDecay::Cosine);
        let oracle = 0.5 * (1.0 + (std::f64::consts::PI * 47.0 / 95.0).cos());
        assert!((mid - oracle).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for s in 5..100 {
            let lr = lr_at(s, total, base, 0.05, LrDecay::Cosine);
            assert!(lr <= prev && lr > 0.0);
            prev = lr;
        }
        assert!(prev < 1e-3);
        assert_eq!(lr_at(50, total, 2.0, 0.0, LrDecay::Constant), 2.0);
    }

    #[test]
    fn qa_sequence_masks_answer_and_eos() {
        let vocab = Vocabulary::new();
        let s = generate_sample(3, 0);
        let (ids, mask) = qa_sequence(&s.qa[0], &vocab, false);
        assert_eq!(ids.len(), s.qa[0].question.len() + 4);
        assert_eq!(ids[ids.len() - 2], s.qa[0].answer);
        assert_eq!(mask.iter().filter(|&&m| m).count(), 2);
        assert!(mask[ids.len() - 1] && mask[ids.len() - 2]);
        let (_, mask) = qa_sequence(&s.qa[0], &vocab, true);
        assert!(!mask[0] && mask[1..].iter().all(|&m| m));
    }

    #[test]
    fn truncate_keeps_earlier_steps() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        fs::write(&p, "{\"step\":0}\n{\"step\":1}\n{\"step\":2}\n").unwrap();
        truncate_log(&p, 2).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "{\"step\":0}\n{\"step\":1}\n");
    }
}
