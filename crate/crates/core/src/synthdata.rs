//! Deterministic shape-grid scenes with captions and cell-level questions.
//!
//! Every image is a 4x4 grid of 8x8 pixel cells; each cell is empty or holds
//! one filled shape in one of four colors. Questions ask for the color or
//! shape of a named cell, so answering needs pixel-level detail of one cell.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ross_autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Result, RossError};
use crate::image::Image;

pub const GRID: usize = 4;
pub const CELL: usize = 8;
pub const IMAGE_SIZE: usize = GRID * CELL;
pub const QA_PER_SAMPLE: usize = 4;
pub const BACKGROUND: [f32; 3] = [0.0, 0.0, 0.0];

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const SEP: &str = "<sep>";

const WORDS: &[&str] = &[
    PAD, BOS, EOS, SEP, "what", "color", "shape", "is", "at", "row", "col", "?", "a", "and", "empty", "grid",
    "none", "draw", "0", "1", "2", "3", "red", "green", "blue", "yellow", "circle", "square", "triangle",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
        }
    }

    fn letter(self) -> char {
        self.word().chars().next().unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }

    fn letter(self) -> char {
        self.word().chars().next().unwrap()
    }

    /// Whether local pixel `(y, x)` of an 8x8 cell is covered.
    pub fn covers(self, y: usize, x: usize) -> bool {
        let (fy, fx) = (y as f64, x as f64);
        match self {
            ShapeKind::Square => (1..=6).contains(&y) && (1..=6).contains(&x),
            ShapeKind::Circle => (fy - 3.5).powi(2) + (fx - 3.5).powi(2) <= 9.0,
            ShapeKind::Triangle => (1..=6).contains(&y) && (fx - 3.5).abs() <= 0.55 * fy,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Object {
    pub shape: ShapeKind,
    pub color: Color,
}

/// Row-major 4x4 grid of optional objects.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct Scene {
    pub cells: [[Option<Object>; GRID]; GRID],
}

impl Scene {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Two characters per cell (`color shape`, or `..` when empty).
    pub fn canonical(&self) -> String {
        self.cells
            .iter()
            .flatten()
            .flat_map(|c| match c {
                Some(o) => [o.color.letter(), o.shape.letter()],
                None => ['.', '.'],
            })
            .collect()
    }

    pub fn from_canonical(s: &str) -> Result<Self> {
        let chars: Vec<char> = s.chars().collect();
        if chars.len() != GRID * GRID * 2 {
            return Err(RossError::config(format!("bad scene string {s:?}")));
        }
        let mut scene = Scene::empty();
        for (i, pair) in chars.chunks(2).enumerate() {
            let cell = match (pair[0], pair[1]) {
                ('.', '.') => None,
                (c, sh) => Some(Object {
                    color: *Color::ALL
                        .iter()
                        .find(|x| x.letter() == c)
                        .ok_or_else(|| RossError::config(format!("bad color {c}")))?,
                    shape: *ShapeKind::ALL
                        .iter()
                        .find(|x| x.letter() == sh)
                        .ok_or_else(|| RossError::config(format!("bad shape {sh}")))?,
                }),
            };
            scene.cells[i / GRID][i % GRID] = cell;
        }
        Ok(scene)
    }

    pub fn objects(&self) -> impl Iterator<Item = (usize, usize, Object)> + '_ {
        (0..GRID).flat_map(move |r| (0..GRID).filter_map(move |c| self.cells[r][c].map(|o| (r, c, o))))
    }
}

/// Closed-grammar token table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: BTreeMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::from_tokens(WORDS.iter().map(|s| s.to_string()).collect()).expect("static vocabulary is valid")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let ids: BTreeMap<String, usize> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if ids.len() != tokens.len() {
            return Err(RossError::config("duplicate vocabulary entries"));
        }
        Ok(Self { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        *self.ids.get(word).unwrap_or_else(|| panic!("word {word:?} not in vocabulary"))
    }

    pub fn try_id(&self, word: &str) -> Option<usize> {
        self.ids.get(word).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| {
                self.try_id(w).ok_or_else(|| RossError::UnknownKind {
                    what: "token",
                    value: w.to_string(),
                })
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }

    pub fn pad(&self) -> usize {
        self.id(PAD)
    }

    pub fn bos(&self) -> usize {
        self.id(BOS)
    }

    pub fn eos(&self) -> usize {
        self.id(EOS)
    }

    pub fn sep(&self) -> usize {
        self.id(SEP)
    }

    /// Every token that can appear as an answer.
    pub fn answer_ids(&self) -> Vec<usize> {
        Color::ALL
            .iter()
            .map(|c| c.word())
            .chain(ShapeKind::ALL.iter().map(|s| s.word()))
            .chain(["none"])
            .map(|w| self.id(w))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionKind {
    Color,
    Shape,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Qa {
    pub kind: QuestionKind,
    pub row: usize,
    pub col: usize,
    pub question: Vec<usize>,
    pub answer: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub index: usize,
    /// PRNG stream the scene was drawn from (differs from `index` only after
    /// a cross-split collision was resolved).
    pub key: u64,
    pub scene: Scene,
    pub image: Image,
    pub caption: Vec<usize>,
    pub qa: Vec<Qa>,
}

pub fn render(scene: &Scene) -> Image {
    let mut img = Image::filled(IMAGE_SIZE, IMAGE_SIZE, BACKGROUND);
    for (r, c, o) in scene.objects() {
        for y in 0..CELL {
            for x in 0..CELL {
                if o.shape.covers(y, x) {
                    img.set(r * CELL + y, c * CELL + x, o.color.rgb());
                }
            }
        }
    }
    img
}

/// Recovers the scene from pixels alone.
pub fn read_scene(image: &Image) -> Result<Scene> {
    if image.height != IMAGE_SIZE || image.width != IMAGE_SIZE {
        return Err(RossError::shape("read_scene expects a 32x32 image"));
    }
    let mut scene = Scene::empty();
    for r in 0..GRID {
        for c in 0..GRID {
            let mut mask = [[false; CELL]; CELL];
            let mut color = None;
            for (y, row) in mask.iter_mut().enumerate() {
                for (x, m) in row.iter_mut().enumerate() {
                    let p = [0, 1, 2].map(|ch| image.get(r * CELL + y, c * CELL + x, ch));
                    if p != BACKGROUND {
                        *m = true;
                        color = Color::ALL.iter().copied().find(|k| k.rgb() == p);
                    }
                }
            }
            if !mask.iter().flatten().any(|&m| m) {
                continue;
            }
            let shape = ShapeKind::ALL
                .iter()
                .copied()
                .find(|s| (0..CELL).all(|y| (0..CELL).all(|x| s.covers(y, x) == mask[y][x])));
            match (shape, color) {
                (Some(shape), Some(color)) => scene.cells[r][c] = Some(Object { shape, color }),
                _ => return Err(RossError::Degenerate(format!("unrecognized content in cell {r},{c}"))),
            }
        }
    }
    Ok(scene)
}

/// "a {color} {shape} at {row} {col}" per object joined by "and", or "empty grid".
pub fn caption(scene: &Scene, vocab: &Vocabulary) -> Vec<usize> {
    let parts: Vec<String> = scene
        .objects()
        .map(|(r, c, o)| format!("a {} {} at {r} {c}", o.color.word(), o.shape.word()))
        .collect();
    let text = if parts.is_empty() {
        "empty grid".to_string()
    } else {
        parts.join(" and ")
    };
    vocab.encode(&text).expect("caption grammar is closed")
}

pub fn question(kind: QuestionKind, row: usize, col: usize, vocab: &Vocabulary) -> Vec<usize> {
    let what = match kind {
        QuestionKind::Color => "color",
        QuestionKind::Shape => "shape",
    };
    vocab
        .encode(&format!("what {what} is at row {row} col {col} ?"))
        .expect("question grammar is closed")
}

pub fn answer_word(scene: &Scene, kind: QuestionKind, row: usize, col: usize) -> &'static str {
    match (scene.cells[row][col], kind) {
        (None, _) => "none",
        (Some(o), QuestionKind::Color) => o.color.word(),
        (Some(o), QuestionKind::Shape) => o.shape.word(),
    }
}

fn make_qa(scene: &Scene, kind: QuestionKind, row: usize, col: usize, vocab: &Vocabulary) -> Qa {
    Qa {
        kind,
        row,
        col,
        question: question(kind, row, col, vocab),
        answer: vocab.id(answer_word(scene, kind, row, col)),
    }
}

fn rng_for(seed: u64, key: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(key);
    rng
}

fn sample_scene(rng: &mut ChaCha8Rng) -> Scene {
    let mut scene = Scene::empty();
    for row in scene.cells.iter_mut() {
        for cell in row.iter_mut() {
            let shape = rng.random_range(0..4);
            let color = Color::ALL[rng.random_range(0..4)];
            *cell = (shape < 3).then(|| Object {
                shape: ShapeKind::ALL[shape],
                color,
            });
        }
    }
    scene
}

/// Builds the sample for an explicit scene; QA cells are drawn from `rng`.
pub fn sample_from_scene(index: usize, key: u64, scene: Scene, rng: &mut impl Rng, vocab: &Vocabulary) -> Sample {
    let qa = (0..QA_PER_SAMPLE)
        .map(|k| {
            let kind = if k % 2 == 0 { QuestionKind::Color } else { QuestionKind::Shape };
            make_qa(&scene, kind, rng.random_range(0..GRID), rng.random_range(0..GRID), vocab)
        })
        .collect();
    Sample {
        index,
        key,
        image: render(&scene),
        caption: caption(&scene, vocab),
        qa,
        scene,
    }
}

fn generate_keyed(seed: u64, index: usize, key: u64, vocab: &Vocabulary) -> Sample {
    let mut rng = rng_for(seed, key);
    let scene = sample_scene(&mut rng);
    sample_from_scene(index, key, scene, &mut rng, vocab)
}

/// The sample at `index` of the stream selected by `seed`.
pub fn generate_sample(seed: u64, index: usize) -> Sample {
    generate_keyed(seed, index, index as u64, &Vocabulary::new())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for DatasetSizes {
    fn default() -> Self {
        Self {
            train: 8000,
            val: 1000,
            test: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = RossError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(RossError::UnknownKind {
                what: "split",
                value: s.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub seed: u64,
    pub vocab: Vocabulary,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Stream offset used to redraw a scene that collides with an earlier split.
const REDRAW_STRIDE: u64 = 1 << 32;

impl Dataset {
    /// Splits take consecutive index ranges: train, then val, then test.
    /// A val/test scene already present in an earlier split is redrawn from
    /// a shifted stream, so splits never share a scene.
    pub fn generate(seed: u64, sizes: DatasetSizes) -> Self {
        let vocab = Vocabulary::new();
        let mut seen: HashSet<String> = HashSet::new();
        let build = |range: std::ops::Range<usize>, dedup: bool, seen: &mut HashSet<String>| {
            let mut out = Vec::with_capacity(range.len());
            for index in range {
                let mut attempt = 0u64;
                let sample = loop {
                    let s = generate_keyed(seed, index, index as u64 + attempt * REDRAW_STRIDE, &vocab);
                    if !dedup || !seen.contains(&s.scene.canonical()) {
                        break s;
                    }
                    attempt += 1;
                };
                out.push(sample);
            }
            out
        };
        let train = build(0..sizes.train, false, &mut seen);
        seen.extend(train.iter().map(|s| s.scene.canonical()));
        let val = build(sizes.train..sizes.train + sizes.val, true, &mut seen);
        seen.extend(val.iter().map(|s| s.scene.canonical()));
        let test_start = sizes.train + sizes.val;
        let test = build(test_start..test_start + sizes.test, true, &mut seen);
        Self {
            seed,
            vocab,
            train,
            val,
            test,
        }
    }

    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn sizes(&self) -> DatasetSizes {
        DatasetSizes {
            train: self.train.len(),
            val: self.val.len(),
            test: self.test.len(),
        }
    }

    /// Writes `manifest.jsonl`, `images.rsc` and `vocab.json` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| RossError::io(dir, e))?;
        let manifest_path = dir.join("manifest.jsonl");
        let mut manifest = fs::File::create(&manifest_path).map_err(|e| RossError::io(&manifest_path, e))?;
        let mut images = Container::new(
            "images",
            serde_json::json!({"seed": self.seed, "height": IMAGE_SIZE, "width": IMAGE_SIZE}),
        );
        for split in [Split::Train, Split::Val, Split::Test] {
            let samples = self.split(split);
            let mut pixels = Vec::with_capacity(samples.len() * IMAGE_SIZE * IMAGE_SIZE * 3);
            for s in samples {
                let line = ManifestLine {
                    index: s.index,
                    key: s.key,
                    split,
                    scene: s.scene.canonical(),
                    caption: self.vocab.decode(&s.caption),
                    qa: s
                        .qa
                        .iter()
                        .map(|q| ManifestQa {
                            question: self.vocab.decode(&q.question),
                            answer: self.vocab.token(q.answer).to_string(),
                            kind: q.kind,
                            row: q.row,
                            col: q.col,
                        })
                        .collect(),
                };
                writeln!(manifest, "{}", serde_json::to_string(&line)?).map_err(|e| RossError::io(&manifest_path, e))?;
                pixels.extend_from_slice(&s.image.pixels);
            }
            let t = Tensor::from_vec(&[samples.len(), IMAGE_SIZE, IMAGE_SIZE, 3], pixels)?;
            images.push(split.name(), &t);
        }
        images.save(&dir.join("images.rsc"))?;
        let vocab_path = dir.join("vocab.json");
        fs::write(&vocab_path, serde_json::to_string_pretty(self.vocab.tokens())?)
            .map_err(|e| RossError::io(&vocab_path, e))?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let vocab_path = dir.join("vocab.json");
        let tokens: Vec<String> =
            serde_json::from_str(&fs::read_to_string(&vocab_path).map_err(|e| RossError::io(&vocab_path, e))?)?;
        let vocab = Vocabulary::from_tokens(tokens)?;
        let images_path = dir.join("images.rsc");
        let images = Container::load(&images_path)?.expect_kind("images", &images_path)?;
        let seed = images.meta["seed"].as_u64().unwrap_or_default();
        let manifest_path = dir.join("manifest.jsonl");
        let file = fs::File::open(&manifest_path).map_err(|e| RossError::io(&manifest_path, e))?;
        let mut splits: BTreeMap<&'static str, Vec<Sample>> = BTreeMap::new();
        let tensors: BTreeMap<&'static str, Tensor<f32>> = [Split::Train, Split::Val, Split::Test]
            .into_iter()
            .map(|s| Ok((s.name(), images.get::<f32>(s.name())?)))
            .collect::<Result<_>>()?;
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| RossError::io(&manifest_path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let m: ManifestLine = serde_json::from_str(&line)?;
            let bucket = splits.entry(m.split.name()).or_default();
            let pixels = tensors[m.split.name()].index0(bucket.len())?.into_data();
            let qa = m
                .qa
                .iter()
                .map(|q| {
                    Ok(Qa {
                        kind: q.kind,
                        row: q.row,
                        col: q.col,
                        question: vocab.encode(&q.question)?,
                        answer: vocab.try_id(&q.answer).ok_or_else(|| RossError::config("unknown answer"))?,
                    })
                })
                .collect::<Result<_>>()?;
            bucket.push(Sample {
                index: m.index,
                key: m.key,
                scene: Scene::from_canonical(&m.scene)?,
                image: Image::new(IMAGE_SIZE, IMAGE_SIZE, pixels)?,
                caption: vocab.encode(&m.caption)?,
                qa,
            });
        }
        let mut take = |s: Split| splits.remove(s.name()).unwrap_or_default();
        Ok(Self {
            seed,
            train: take(Split::Train),
            val: take(Split::Val),
            test: take(Split::Test),
            vocab,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestQa {
    question: String,
    answer: String,
    kind: QuestionKind,
    row: usize,
    col: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestLine {
    index: usize,
    key: u64,
    split: Split,
    scene: String,
    caption: String,
    qa: Vec<ManifestQa>,
}

/// One probe question about one image.
#[derive(Debug, Clone, Copy)]
pub struct ProbeItem<'a> {
    pub image: &'a Image,
    pub question: &'a [usize],
    pub answer: usize,
}

pub fn probe_items(samples: &[Sample]) -> Vec<ProbeItem<'_>> {
    samples
        .iter()
        .flat_map(|s| {
            s.qa.iter().map(move |q| ProbeItem {
                image: &s.image,
                question: &q.question,
                answer: q.answer,
            })
        })
        .collect()
}

/// Produces one greedy answer token per probe item.
pub trait Answerer {
    fn answer(&self, items: &[ProbeItem<'_>]) -> Result<Vec<usize>>;
}

/// Exact-match accuracy over every QA pair of `samples`.
pub fn qa_accuracy<A: Answerer + ?Sized>(model: &A, samples: &[Sample]) -> Result<f64> {
    let items = probe_items(samples);
    if items.is_empty() {
        return Err(RossError::Empty("probe dataset"));
    }
    let answers = model.answer(&items)?;
    let correct = answers.iter().zip(&items).filter(|(a, it)| **a == it.answer).count();
    Ok(correct as f64 / items.len() as f64)
}

/// Reads the answer off the pixels; accuracy 1 by construction.
pub struct PixelOracle {
    pub vocab: Vocabulary,
}

impl Answerer for PixelOracle {
    fn answer(&self, items: &[ProbeItem<'_>]) -> Result<Vec<usize>> {
        items
            .iter()
            .map(|it| {
                let scene = read_scene(it.image)?;
                let words: Vec<&str> = it.question.iter().map(|&i| self.vocab.token(i)).collect();
                let kind = if words[1] == "color" { QuestionKind::Color } else { QuestionKind::Shape };
                let row: usize = words[5].parse().map_err(|_| RossError::config("bad question"))?;
                let col: usize = words[7].parse().map_err(|_| RossError::config("bad question"))?;
                Ok(self.vocab.id(answer_word(&scene, kind, row, col)))
            })
            .collect()
    }
}

/// Answers uniformly at random among the answer tokens.
pub struct RandomAnswerer {
    pub answers: Vec<usize>,
    pub seed: u64,
}

impl Answerer for RandomAnswerer {
    fn answer(&self, items: &[ProbeItem<'_>]) -> Result<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        Ok(items
            .iter()
            .map(|_| self.answers[rng.random_range(0..self.answers.len())])
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_is_small_and_bijective() {
        let v = Vocabulary::new();
        assert!(v.len() < 64);
        for (i, t) in v.tokens().iter().enumerate() {
            assert_eq!(v.id(t), i);
        }
        assert_eq!(v.answer_ids().len(), 8);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_sample(7, 0);
        let b = generate_sample(7, 0);
        assert_eq!(a, b);
        assert_ne!(generate_sample(7, 1).scene, a.scene);
    }

    #[test]
    fn empty_scene_caption_and_background() {
        let v = Vocabulary::new();
        let s = sample_from_scene(0, 0, Scene::empty(), &mut ChaCha8Rng::seed_from_u64(0), &v);
        assert_eq!(v.decode(&s.caption), "empty grid");
        assert!(s.image.pixels.iter().all(|&p| p == 0.0));
        assert!(s.qa.iter().all(|q| q.answer == v.id("none")));
    }

    #[test]
    fn render_then_read_recovers_scene() {
        for i in 0..50 {
            let s = generate_sample(3, i);
            assert_eq!(read_scene(&s.image).unwrap(), s.scene);
        }
    }

    #[test]
    fn shapes_are_pairwise_distinct_masks() {
        for a in ShapeKind::ALL {
            for b in ShapeKind::ALL {
                let same = (0..CELL).all(|y| (0..CELL).all(|x| a.covers(y, x) == b.covers(y, x)));
                assert_eq!(same, a == b);
            }
        }
    }

    #[test]
    fn canonical_round_trip() {
        let s = generate_sample(11, 4).scene;
        assert_eq!(Scene::from_canonical(&s.canonical()).unwrap(), s);
    }

    #[test]
    fn caption_mentions_each_object() {
        let v = Vocabulary::new();
        let s = generate_sample(5, 2);
        let text = v.decode(&s.caption);
        assert_eq!(text.matches(" at ").count(), s.scene.objects().count());
    }

    #[test]
    fn empty_probe_set_is_an_error() {
        let o = PixelOracle { vocab: Vocabulary::new() };
        assert!(matches!(qa_accuracy(&o, &[]), Err(RossError::Empty(_))));
    }
}
