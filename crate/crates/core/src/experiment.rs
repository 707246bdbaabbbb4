//! Multi-run experiments: matched-seed A/B comparisons, attention and
//! saliency studies over trained models, and reconstruction runs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use ross_autograd::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::analysis::{gradcam, probe_attention_scores, reconstruct_batch_from, stat_report, Saliency, StatReport};
use crate::config::{AttentionLayers, DataConfig, ExperimentConfig, TrainConfig};
use crate::container::Container;
use crate::error::{Result, RossError};
use crate::image::Image;
use crate::mmlm::{probe_prompt, MultimodalLm, ModelAnswerer};
use crate::objectives::{ObjectiveKind, VisualObjective};
use crate::synthdata::{probe_items, Answerer, Dataset, Sample, Split, Vocabulary, CELL};
use crate::tokenizers::{Tokenizer, TokenizerKind};
use crate::trainer::{prepare_tokenizer, Trainer};

/// Reads the dataset under `config.dir`, or generates it in memory when the
/// directory has no manifest.
pub fn load_or_generate(config: &DataConfig) -> Result<Dataset> {
    if config.dir.join("manifest.jsonl").exists() {
        Dataset::read_dir(&config.dir)
    } else {
        Ok(Dataset::generate(config.seed, config.sizes))
    }
}

/// One trained arm of an A/B experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub variant: ObjectiveKind,
    pub seed: u64,
    pub steps: usize,
    pub test_accuracy: f64,
    pub test_text_loss: f64,
    pub wall_seconds: f64,
    pub checkpoint: Option<PathBuf>,
}

/// Per-seed and mean test probe accuracies of every variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbTable {
    pub seeds: Vec<u64>,
    pub variants: Vec<ObjectiveKind>,
    pub arms: Vec<ArmResult>,
    pub mean_accuracy: BTreeMap<String, f64>,
    /// Mean accuracy minus the first variant's mean accuracy.
    pub delta_vs_first: BTreeMap<String, f64>,
}

impl AbTable {
    pub fn accuracy(&self, variant: ObjectiveKind, seed: u64) -> Option<f64> {
        self.arms
            .iter()
            .find(|a| a.variant == variant && a.seed == seed)
            .map(|a| a.test_accuracy)
    }

    pub fn mean(&self, variant: ObjectiveKind) -> Option<f64> {
        self.mean_accuracy.get(variant.name()).copied()
    }

    fn from_arms(seeds: Vec<u64>, variants: Vec<ObjectiveKind>, arms: Vec<ArmResult>) -> Self {
        let mut mean_accuracy = BTreeMap::new();
        for v in &variants {
            let accs: Vec<f64> = arms.iter().filter(|a| a.variant == *v).map(|a| a.test_accuracy).collect();
            mean_accuracy.insert(v.name().to_string(), accs.iter().sum::<f64>() / accs.len() as f64);
        }
        let first = mean_accuracy[variants[0].name()];
        let delta_vs_first = mean_accuracy.iter().map(|(k, m)| (k.clone(), m - first)).collect();
        Self {
            seeds,
            variants,
            arms,
            mean_accuracy,
            delta_vs_first,
        }
    }
}

/// Trained models of an A/B run, in `(variant, seed)` order.
pub struct AbOutcome<T: Scalar> {
    pub table: AbTable,
    pub trainers: Vec<Trainer<T>>,
}

impl<T: Scalar> AbOutcome<T> {
    pub fn trainer(&self, variant: ObjectiveKind, seed: u64) -> Option<&Trainer<T>> {
        self.table
            .arms
            .iter()
            .position(|a| a.variant == variant && a.seed == seed)
            .map(|i| &self.trainers[i])
    }
}

/// Seeds of an `n`-seed experiment: consecutive from the configured seed.
pub fn matched_seeds(config: &ExperimentConfig, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| config.train.seed + i).collect()
}

/// Trains one arm: the experiment config with `variant` and `seed`
/// substituted. With `out` the full training loop writes logs and
/// checkpoints there; otherwise training stays in memory.
pub fn train_arm<T: Scalar>(
    config: &ExperimentConfig,
    data: &Dataset,
    variant: ObjectiveKind,
    seed: u64,
    tokenizer: Option<Tokenizer<T>>,
    out: Option<&Path>,
) -> Result<(Trainer<T>, ArmResult)> {
    let mut tc: TrainConfig = config.training();
    tc.objective.kind = variant;
    tc.train.seed = seed;
    let start = Instant::now();
    let mut trainer = Trainer::<T>::new(tc, data.split(Split::Train), tokenizer)?;
    let checkpoint = match out {
        Some(dir) => Some(trainer.run(data, dir)?.checkpoint),
        None => {
            while trainer.step < trainer.total_steps {
                trainer.train_step(data.split(Split::Train))?;
            }
            None
        }
    };
    let test = trainer.evaluate(data.split(Split::Test), "test")?;
    let arm = ArmResult {
        variant,
        seed,
        steps: trainer.step,
        test_accuracy: test.probe_accuracy,
        test_text_loss: test.text_loss,
        wall_seconds: start.elapsed().as_secs_f64(),
        checkpoint,
    };
    Ok((trainer, arm))
}

/// Trains every variant for every seed, one arm per available core.
/// Variants that target the same autoencoder share one fitted copy of it.
pub fn ab_run<T: Scalar>(
    config: &ExperimentConfig,
    data: &Dataset,
    variants: &[ObjectiveKind],
    seeds: &[u64],
    out: Option<&Path>,
    progress: impl FnMut(&ArmResult) + Send,
) -> Result<AbOutcome<T>> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(RossError::config("ab-run needs at least one variant and one seed"));
    }
    let mut shared: BTreeMap<&'static str, Tokenizer<T>> = BTreeMap::new();
    let mut jobs = Vec::new();
    for &variant in variants {
        let mut tc = config.training();
        tc.objective.kind = variant;
        let key = tc.objective.target_tokenizer().filter(|k| matches!(k, TokenizerKind::LatentAe | TokenizerKind::Vq));
        if let Some(k) = key {
            if !shared.contains_key(k.name()) {
                let tok = prepare_tokenizer::<T>(&tc, data.split(Split::Train))?
                    .ok_or_else(|| RossError::config("variant expects a tokenizer"))?;
                shared.insert(k.name(), tok);
            }
        }
        for &seed in seeds {
            jobs.push((variant, seed, key.map(|k| k.name())));
        }
    }
    let shared = &shared;
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(jobs.len());
    let next = AtomicUsize::new(0);
    let progress = Mutex::new(progress);
    let slots: Vec<Mutex<Option<Result<(Trainer<T>, ArmResult)>>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(variant, seed, tokenizer)) = jobs.get(i) else {
                    break;
                };
                let dir = out.map(|o| o.join(variant.name()).join(format!("seed_{seed}")));
                let tokenizer = tokenizer.map(|k| shared[k].clone());
                let result = train_arm(config, data, variant, seed, tokenizer, dir.as_deref());
                if let Ok((_, arm)) = &result {
                    (progress.lock().unwrap())(arm);
                }
                *slots[i].lock().unwrap() = Some(result);
            });
        }
    });
    let mut arms = Vec::new();
    let mut trainers = Vec::new();
    for slot in slots {
        let (trainer, arm) = slot.into_inner().unwrap().expect("every job runs")?;
        arms.push(arm);
        trainers.push(trainer);
    }
    Ok(AbOutcome {
        table: AbTable::from_arms(seeds.to_vec(), variants.to_vec(), arms),
        trainers,
    })
}

/// Test samples an analysis looks at (`limit` 0 = all).
pub fn analysis_samples(samples: &[Sample], limit: usize) -> &[Sample] {
    if limit == 0 {
        samples
    } else {
        &samples[..limit.min(samples.len())]
    }
}

/// Attention-to-visual scores of `a` and `b` on the same probe items, and
/// their comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionStudy {
    pub layers: AttentionLayers,
    pub report: StatReport,
    pub scores_a: Vec<f64>,
    pub scores_b: Vec<f64>,
}

pub fn attention_study<T: Scalar>(
    a: &MultimodalLm<T>,
    b: &MultimodalLm<T>,
    samples: &[Sample],
    layers: AttentionLayers,
) -> Result<AttentionStudy> {
    let vocab = Vocabulary::new();
    let items = probe_items(samples);
    let scores_a = probe_attention_scores(a, &items, &vocab, layers)?;
    let scores_b = probe_attention_scores(b, &items, &vocab, layers)?;
    Ok(AttentionStudy {
        layers,
        report: stat_report(&scores_a, &scores_b)?,
        scores_a,
        scores_b,
    })
}

/// Saliency maps for the first question of each sample, with the correct
/// answer as target.
#[derive(Debug, Clone)]
pub struct SaliencyStudy {
    pub maps: Vec<Saliency>,
    /// Whether the model answered the question correctly.
    pub correct: Vec<bool>,
    /// Among correct answers, the fraction whose mean saliency inside the
    /// queried cell exceeds the mean outside it.
    pub concentration: f64,
    pub correct_count: usize,
}

pub fn saliency_study<T: Scalar>(model: &MultimodalLm<T>, samples: &[Sample]) -> Result<SaliencyStudy> {
    let vocab = Vocabulary::new();
    let patch = model.config.patch_size;
    let answerer = ModelAnswerer { model, vocab: &vocab };
    let mut maps = Vec::with_capacity(samples.len());
    let mut correct = Vec::with_capacity(samples.len());
    let mut hits = 0usize;
    for s in samples {
        let qa = s.qa.first().ok_or(RossError::Empty("sample questions"))?;
        let map = gradcam(model, &s.image, &probe_prompt(&qa.question, &vocab), qa.answer)?;
        let items = probe_items(std::slice::from_ref(s));
        let ok = answerer.answer(&items[..1])?[0] == qa.answer;
        if ok {
            let (mut inside, mut n_in, mut outside, mut n_out) = (0.0, 0usize, 0.0, 0usize);
            for r in 0..map.rows {
                for c in 0..map.cols {
                    let in_cell = (r * patch) / CELL == qa.row && (c * patch) / CELL == qa.col;
                    if in_cell {
                        inside += map.at(r, c);
                        n_in += 1;
                    } else {
                        outside += map.at(r, c);
                        n_out += 1;
                    }
                }
            }
            if n_in > 0 && n_out > 0 && inside / n_in as f64 > outside / n_out as f64 {
                hits += 1;
            }
        }
        correct.push(ok);
        maps.push(map);
    }
    let correct_count = correct.iter().filter(|&&c| c).count();
    Ok(SaliencyStudy {
        maps,
        correct,
        concentration: if correct_count == 0 { 0.0 } else { hits as f64 / correct_count as f64 },
        correct_count,
    })
}

/// Reconstructions of `samples` and their per-image pixel MSE.
#[derive(Debug, Clone)]
pub struct ReconstructionStudy {
    pub images: Vec<Image>,
    pub mse: Vec<f64>,
}

impl ReconstructionStudy {
    pub fn fraction_below(&self, threshold: f64) -> f64 {
        self.mse.iter().filter(|&&m| m < threshold).count() as f64 / self.mse.len() as f64
    }
}

/// Reconstruction batch size; each batch runs the full reverse chain.
const RECON_CHUNK: usize = 50;

/// Image `i` of `samples` uses noise stream `i` of `seed` regardless of
/// how the work is chunked.
pub fn reconstruction_study<T: Scalar>(
    model: &MultimodalLm<T>,
    objective: &VisualObjective<T>,
    samples: &[Sample],
    seed: u64,
) -> Result<ReconstructionStudy> {
    let mut images = Vec::with_capacity(samples.len());
    for (k, chunk) in samples.chunks(RECON_CHUNK).enumerate() {
        let imgs: Vec<&Image> = chunk.iter().map(|s| &s.image).collect();
        let base = (k * RECON_CHUNK) as u64;
        images.extend(reconstruct_batch_from(model, objective, &imgs, seed, base)?);
    }
    let mse = images.iter().zip(samples).map(|(r, s)| r.mse(&s.image)).collect();
    Ok(ReconstructionStudy { images, mse })
}

/// Stacks images into a `[B, H, W, 3]` tensor.
pub fn images_tensor(images: &[Image]) -> Result<Tensor<f32>> {
    let first = images.first().ok_or(RossError::Empty("image list"))?;
    let mut data = Vec::with_capacity(images.len() * first.pixels.len());
    for img in images {
        data.extend_from_slice(&img.pixels);
    }
    Ok(Tensor::from_vec(&[images.len(), first.height, first.width, 3], data)?)
}

/// Stacks saliency maps into a `[B, rows, cols]` tensor.
pub fn saliency_tensor(maps: &[Saliency]) -> Result<Tensor<f64>> {
    let first = maps.first().ok_or(RossError::Empty("saliency list"))?;
    let data = maps.iter().flat_map(|m| m.values.iter().copied()).collect();
    Ok(Tensor::from_vec(&[maps.len(), first.rows, first.cols], data)?)
}

/// Writes named arrays as one container of kind `arrays`.
pub fn write_arrays<T: Scalar>(path: &Path, meta: serde_json::Value, arrays: &[(&str, &Tensor<T>)]) -> Result<()> {
    let mut c = Container::new("arrays", meta);
    for (name, t) in arrays {
        c.push(*name, t);
    }
    c.save(path)
}
