//! Synthetic grid-world QA tasks and their metrics.
//!
//! Each image is a grid of cells, some holding an object with a shape and a
//! color. Questions come from a fixed grammar and every answer is a single
//! vocabulary word, so exact match over generated tokens and argmax over a
//! closed answer set measure the same thing.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const COLORS: [&str; 8] = ["red", "green", "blue", "yellow", "purple", "orange", "cyan", "gray"];
pub const SHAPES: [&str; 6] = ["circle", "square", "triangle", "star", "heart", "cross"];
pub const LABELS: [&str; 3] = ["entails", "neutral", "contradicts"];
const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];
const WORDS: [&str; 16] = [
    "what", "color", "is", "the", "object", "of", "how", "many", "objects", "are", "there", "?", "left",
    "right", "above", "below",
];
const DIGITS: [&str; 10] = ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9"];

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;

/// Width of a rendered cell: occupancy bit, shape one-hot, color one-hot.
pub const CELL_FEATURES: usize = 1 + SHAPES.len() + COLORS.len();

pub const DATASET_FORMAT: &str = "fusionlab-dataset";
pub const DATASET_VERSION: u32 = 1;

/// Fixed word list shared by every task.
#[derive(Clone, Debug)]
pub struct Vocab {
    words: Vec<&'static str>,
    index: HashMap<&'static str, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        let words: Vec<&'static str> = SPECIALS
            .iter()
            .chain(&WORDS)
            .chain(&COLORS)
            .chain(&SHAPES)
            .chain(&DIGITS)
            .chain(&LABELS)
            .copied()
            .collect();
        let index = words.iter().enumerate().map(|(i, w)| (*w, i)).collect();
        Self { words, index }
    }
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index[word]
    }

    pub fn word(&self, id: usize) -> &'static str {
        self.words.get(id).copied().unwrap_or("<unk>")
    }

    pub fn encode(&self, words: &[&str]) -> Vec<usize> {
        words.iter().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<&'static str> {
        ids.iter().map(|&i| self.word(i)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Attribute,
    SpatialRelation,
    #[serde(rename = "entailment")]
    Entailment3Way,
    Counting,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Attribute => "attribute",
            TaskKind::SpatialRelation => "spatial_relation",
            TaskKind::Entailment3Way => "entailment",
            TaskKind::Counting => "counting",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attribute" => Ok(TaskKind::Attribute),
            "spatial_relation" => Ok(TaskKind::SpatialRelation),
            "entailment" => Ok(TaskKind::Entailment3Way),
            "counting" => Ok(TaskKind::Counting),
            other => Err(Error::Config(format!("unknown task kind '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Object {
    pub shape: u8,
    pub color: u8,
}

/// Generation parameters for one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub grid: (usize, usize),
    pub colors: usize,
    pub shapes: usize,
    pub noise_std: f64,
    /// Probability that a free cell receives a distractor object.
    pub density: f64,
}

impl TaskConfig {
    pub fn new(kind: TaskKind, grid: (usize, usize)) -> Self {
        Self {
            kind,
            grid,
            colors: 4,
            shapes: 4,
            noise_std: 0.05,
            density: 0.3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.grid;
        let too_small = |msg: String| Err(Error::Dataset(format!("alphabet too small: {msg}")));
        if h == 0 || w == 0 {
            return Err(Error::Dataset("grid extents must be positive".into()));
        }
        if self.colors > COLORS.len() || self.shapes > SHAPES.len() {
            return Err(Error::Dataset(format!(
                "at most {} colors and {} shapes are available",
                COLORS.len(),
                SHAPES.len()
            )));
        }
        if self.colors < 2 {
            return too_small(format!("{} colors", self.colors));
        }
        if !(0.0..=1.0).contains(&self.density) || !(self.noise_std >= 0.0) {
            return Err(Error::Dataset("density must be in [0,1] and noise_std >= 0".into()));
        }
        match self.kind {
            TaskKind::Attribute if self.shapes < 2 => too_small(format!("{} shapes", self.shapes)),
            TaskKind::SpatialRelation if self.shapes < 2 || h * w < 2 => {
                too_small(format!("{} shapes on a {h}x{w} grid", self.shapes))
            }
            TaskKind::Entailment3Way if self.shapes < 3 => too_small(format!("{} shapes", self.shapes)),
            TaskKind::Counting if h * w > 9 => Err(Error::Dataset(format!(
                "counting answers are single digits; a {h}x{w} grid may hold {} objects",
                h * w
            ))),
            _ => Ok(()),
        }
    }

    /// Closed answer set; `answer_class` indexes into it.
    pub fn answer_words(&self) -> Vec<&'static str> {
        match self.kind {
            TaskKind::Attribute | TaskKind::SpatialRelation => COLORS[..self.colors].to_vec(),
            TaskKind::Entailment3Way => LABELS.to_vec(),
            TaskKind::Counting => DIGITS[..=self.grid.0 * self.grid.1].to_vec(),
        }
    }

    pub fn answer_ids(&self, vocab: &Vocab) -> Vec<usize> {
        self.answer_words().iter().map(|w| vocab.id(w)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticImage {
    pub grid: (usize, usize),
    /// Row-major cells.
    pub cells: Vec<Option<Object>>,
    /// Seeds the per-cell feature noise.
    pub seed: u64,
    pub noise_std: f64,
}

impl SyntheticImage {
    pub fn empty(grid: (usize, usize), seed: u64, noise_std: f64) -> Self {
        Self {
            grid,
            cells: vec![None; grid.0 * grid.1],
            seed,
            noise_std,
        }
    }

    pub fn get(&self, row: usize, col: usize) -> Option<Object> {
        self.cells[row * self.grid.1 + col]
    }

    /// `[cells × CELL_FEATURES]` one-hot encodings plus seeded Gaussian noise.
    pub fn features(&self) -> Tensor {
        let n = self.cells.len();
        let mut values = vec![0.0; n * CELL_FEATURES];
        for (i, cell) in self.cells.iter().enumerate() {
            if let Some(o) = cell {
                let row = &mut values[i * CELL_FEATURES..(i + 1) * CELL_FEATURES];
                row[0] = 1.0;
                row[1 + o.shape as usize] = 1.0;
                row[1 + SHAPES.len() + o.color as usize] = 1.0;
            }
        }
        if self.noise_std > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            let normal = Normal::new(0.0, self.noise_std).expect("noise std");
            for v in &mut values {
                *v += normal.sample(&mut rng);
            }
        }
        Tensor::new(&[n, CELL_FEATURES], values).expect("feature shape")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QAExample {
    pub image: SyntheticImage,
    pub question: Vec<usize>,
    /// Gold answer tokens, without the end token.
    pub answer: Vec<usize>,
    pub answer_class: usize,
    pub task: TaskKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub size: usize,
    pub config: TaskConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub config: TaskConfig,
    pub examples: Vec<QAExample>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Relation {
    Left,
    Right,
    Above,
    Below,
}

impl Relation {
    const ALL: [Relation; 4] = [Relation::Left, Relation::Right, Relation::Above, Relation::Below];

    fn word(self) -> &'static str {
        match self {
            Relation::Left => "left",
            Relation::Right => "right",
            Relation::Above => "above",
            Relation::Below => "below",
        }
    }

    fn neighbor(self, (r, c): (usize, usize), (h, w): (usize, usize)) -> Option<(usize, usize)> {
        match self {
            Relation::Left if c > 0 => Some((r, c - 1)),
            Relation::Right if c + 1 < w => Some((r, c + 1)),
            Relation::Above if r > 0 => Some((r - 1, c)),
            Relation::Below if r + 1 < h => Some((r + 1, c)),
            _ => None,
        }
    }
}

struct Builder<'a> {
    cfg: &'a TaskConfig,
    rng: ChaCha8Rng,
    image: SyntheticImage,
}

impl<'a> Builder<'a> {
    fn new(cfg: &'a TaskConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise_seed = rng.gen();
        Self {
            cfg,
            rng,
            image: SyntheticImage::empty(cfg.grid, noise_seed, cfg.noise_std),
        }
    }

    fn cell(&self, (r, c): (usize, usize)) -> usize {
        r * self.cfg.grid.1 + c
    }

    fn color(&mut self) -> u8 {
        self.rng.gen_range(0..self.cfg.colors) as u8
    }

    fn shape_except(&mut self, excluded: &[u8]) -> u8 {
        let allowed: Vec<u8> = (0..self.cfg.shapes as u8).filter(|s| !excluded.contains(s)).collect();
        *allowed.choose(&mut self.rng).expect("validated alphabet")
    }

    fn place(&mut self, at: (usize, usize), obj: Object) {
        let i = self.cell(at);
        self.image.cells[i] = Some(obj);
    }

    /// Fills free cells at the configured density with shapes outside `excluded`.
    fn distractors(&mut self, excluded: &[u8]) {
        for i in 0..self.image.cells.len() {
            if self.image.cells[i].is_none() && self.rng.gen_bool(self.cfg.density) {
                let shape = self.shape_except(excluded);
                let color = self.color();
                self.image.cells[i] = Some(Object { shape, color });
            }
        }
    }

    fn random_cell(&mut self) -> (usize, usize) {
        let (h, w) = self.cfg.grid;
        (self.rng.gen_range(0..h), self.rng.gen_range(0..w))
    }
}

fn make_example(cfg: &TaskConfig, vocab: &Vocab, seed: u64) -> QAExample {
    let mut b = Builder::new(cfg, seed);
    let answer_words = cfg.answer_words();
    let (question, answer): (Vec<&str>, &str) = match cfg.kind {
        TaskKind::Attribute => {
            let shape = b.shape_except(&[]);
            let color = b.color();
            let at = b.random_cell();
            b.place(at, Object { shape, color });
            b.distractors(&[shape]);
            (
                vec!["what", "color", "is", "the", SHAPES[shape as usize], "?"],
                COLORS[color as usize],
            )
        }
        TaskKind::SpatialRelation => {
            let (rel, at, nb) = loop {
                let rel = *Relation::ALL.choose(&mut b.rng).unwrap();
                let at = b.random_cell();
                if let Some(nb) = rel.neighbor(at, cfg.grid) {
                    break (rel, at, nb);
                }
            };
            let shape = b.shape_except(&[]);
            let ref_color = b.color();
            b.place(at, Object { shape, color: ref_color });
            let nb_shape = b.shape_except(&[shape]);
            let nb_color = b.color();
            b.place(nb, Object { shape: nb_shape, color: nb_color });
            b.distractors(&[shape]);
            (
                vec!["what", "color", "is", "the", "object", rel.word(), "of", "the", SHAPES[shape as usize], "?"],
                COLORS[nb_color as usize],
            )
        }
        TaskKind::Entailment3Way => {
            let shape = b.shape_except(&[]);
            let absent = b.shape_except(&[shape]);
            let color = b.color();
            let at = b.random_cell();
            b.place(at, Object { shape, color });
            b.distractors(&[shape, absent]);
            let label = b.rng.gen_range(0..3);
            let (stmt_shape, stmt_color) = match LABELS[label] {
                "entails" => (shape, color),
                "contradicts" => {
                    let other = (color + b.rng.gen_range(1..cfg.colors) as u8) % cfg.colors as u8;
                    (shape, other)
                }
                _ => (absent, b.color()),
            };
            (
                vec!["the", SHAPES[stmt_shape as usize], "is", COLORS[stmt_color as usize]],
                LABELS[label],
            )
        }
        TaskKind::Counting => {
            b.distractors(&[]);
            let color = b.color();
            let count = b.image.cells.iter().flatten().filter(|o| o.color == color).count();
            (
                vec!["how", "many", COLORS[color as usize], "objects", "are", "there", "?"],
                DIGITS[count],
            )
        }
    };
    let answer_class = answer_words.iter().position(|w| *w == answer).expect("answer in set");
    QAExample {
        image: b.image,
        question: vocab.encode(&question),
        answer: vec![vocab.id(answer)],
        answer_class,
        task: cfg.kind,
    }
}

/// Deterministic under `seed`.
pub fn generate_dataset(seed: u64, size: usize, cfg: &TaskConfig) -> Result<Dataset> {
    if size == 0 {
        return Err(Error::Dataset("dataset size must be at least 1".into()));
    }
    cfg.validate()?;
    let vocab = Vocab::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples = (0..size).map(|_| make_example(cfg, &vocab, rng.gen())).collect();
    Ok(Dataset {
        seed,
        config: cfg.clone(),
        examples,
    })
}

#[derive(Serialize, Deserialize)]
struct Record {
    seed: u64,
    grid: (usize, usize),
    cells: Vec<Option<(u8, u8)>>,
    question: Vec<usize>,
    answer: Vec<usize>,
    answer_class: usize,
    task: TaskKind,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Line-delimited JSON: a versioned header line, then one record per example.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        let header = DatasetHeader {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            seed: self.seed,
            size: self.examples.len(),
            config: self.config.clone(),
        };
        let io = |e: serde_json::Error| Error::Io(e.to_string());
        writeln!(w, "{}", serde_json::to_string(&header).map_err(io)?)?;
        for ex in &self.examples {
            let rec = Record {
                seed: ex.image.seed,
                grid: ex.image.grid,
                cells: ex.image.cells.iter().map(|c| c.map(|o| (o.shape, o.color))).collect(),
                question: ex.question.clone(),
                answer: ex.answer.clone(),
                answer_class: ex.answer_class,
                task: ex.task,
            };
            writeln!(w, "{}", serde_json::to_string(&rec).map_err(io)?)?;
        }
        Ok(())
    }

    pub fn to_jsonl_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        buf
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::Dataset("empty dataset file".into()))??;
        let header: DatasetHeader =
            serde_json::from_str(&first).map_err(|e| Error::Dataset(format!("bad header: {e}")))?;
        if header.format != DATASET_FORMAT {
            return Err(Error::Dataset(format!("unknown format '{}'", header.format)));
        }
        if header.version != DATASET_VERSION {
            return Err(Error::Dataset(format!(
                "unsupported dataset version {} (expected {DATASET_VERSION})",
                header.version
            )));
        }
        let mut examples = Vec::with_capacity(header.size);
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record =
                serde_json::from_str(&line).map_err(|e| Error::Dataset(format!("record {n}: {e}")))?;
            if rec.cells.len() != rec.grid.0 * rec.grid.1 {
                return Err(Error::Dataset(format!("record {n}: cell count does not match grid")));
            }
            examples.push(QAExample {
                image: SyntheticImage {
                    grid: rec.grid,
                    cells: rec.cells.into_iter().map(|c| c.map(|(shape, color)| Object { shape, color })).collect(),
                    seed: rec.seed,
                    noise_std: header.config.noise_std,
                },
                question: rec.question,
                answer: rec.answer,
                answer_class: rec.answer_class,
                task: rec.task,
            });
        }
        if examples.len() != header.size {
            return Err(Error::Dataset(format!(
                "header declares {} examples, found {}",
                header.size,
                examples.len()
            )));
        }
        Ok(Self {
            seed: header.seed,
            config: header.config,
            examples,
        })
    }

    /// SHA-256 of the serialized form.
    pub fn digest(&self) -> String {
        Sha256::digest(self.to_jsonl_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn truncate_at_eos(ids: &[usize]) -> &[usize] {
    match ids.iter().position(|&t| t == EOS) {
        Some(p) => &ids[..p],
        None => ids,
    }
}

/// 1 iff the sequences agree after truncation at the first end token.
pub fn exact_match(predicted: &[usize], gold: &[usize]) -> u8 {
    u8::from(truncate_at_eos(predicted) == truncate_at_eos(gold))
}

/// `min(#matching annotators / 3, 1)` over exactly ten gold answers.
pub fn vqa_accuracy(predicted: &str, gold_answers: &[&str]) -> Result<f64> {
    if gold_answers.len() != 10 {
        return Err(Error::Dataset(format!(
            "VQA accuracy needs 10 gold answers, got {}",
            gold_answers.len()
        )));
    }
    let matches = gold_answers.iter().filter(|g| **g == predicted).count();
    Ok((matches as f64 / 3.0).min(1.0))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskBreakdown {
    pub count: usize,
    pub exact_match_accuracy: f64,
    pub vqa_soft_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub exact_match_accuracy: f64,
    pub vqa_soft_accuracy: f64,
    pub per_task: BTreeMap<TaskKind, TaskBreakdown>,
}

/// Greedy generation (decoder head) or argmax (classifier head) on every
/// example. Each synthetic example carries ten identical gold annotations.
pub fn evaluate(model: &Model, params: &ParamStore, dataset: &Dataset) -> Result<EvalResult> {
    if dataset.is_empty() {
        return Err(Error::Dataset("cannot evaluate on an empty dataset".into()));
    }
    let vocab = Vocab::new();
    let answer_ids = dataset.config.answer_ids(&vocab);
    let mut totals: BTreeMap<TaskKind, (usize, f64, f64)> = BTreeMap::new();
    for ex in &dataset.examples {
        let predicted = model.predict(params, ex, &answer_ids)?;
        let em = f64::from(exact_match(&predicted, &ex.answer));
        let pred_word = vocab.decode(truncate_at_eos(&predicted)).join(" ");
        let gold_word = vocab.decode(&ex.answer).join(" ");
        let golds = [gold_word.as_str(); 10];
        let soft = vqa_accuracy(&pred_word, &golds)?;
        let e = totals.entry(ex.task).or_default();
        e.0 += 1;
        e.1 += em;
        e.2 += soft;
    }
    let n = dataset.len() as f64;
    let em: f64 = totals.values().map(|t| t.1).sum::<f64>() / n;
    let soft: f64 = totals.values().map(|t| t.2).sum::<f64>() / n;
    let per_task = totals
        .into_iter()
        .map(|(k, (c, e, s))| {
            (
                k,
                TaskBreakdown {
                    count: c,
                    exact_match_accuracy: e / c as f64,
                    vqa_soft_accuracy: s / c as f64,
                },
            )
        })
        .collect();
    Ok(EvalResult {
        exact_match_accuracy: em,
        vqa_soft_accuracy: soft,
        per_task,
    })
}
