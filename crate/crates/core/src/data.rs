//! Instruction records, JSONL ingestion, the bundled synthetic corpus, and
//! the encoding of records into model inputs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::{align_chunks, build_matrices, AlignError, AlignmentMatrix, ChunkSet};
use crate::tok::{Tokenization, Vocabulary};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{path}:{line}: {msg}")]
    Schema { path: PathBuf, line: usize, msg: String },
    #[error("record {index}: {msg}")]
    Invalid { index: usize, msg: String },
    #[error(transparent)]
    Align(#[from] AlignError),
}

impl DataError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.to_owned(),
            source,
        }
    }
}

/// One instruction-following example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub instruction: String,
    pub input: String,
    pub output: String,
}

impl DatasetRecord {
    pub fn new(instruction: impl Into<String>, input: impl Into<String>, output: impl Into<String>) -> Self {
        DatasetRecord {
            instruction: instruction.into(),
            input: input.into(),
            output: output.into(),
        }
    }

    /// Instruction, then the input on its own line when present, then a newline.
    pub fn prompt(&self) -> String {
        if self.input.is_empty() {
            format!("{}\n", self.instruction)
        } else {
            format!("{}\n{}\n", self.instruction, self.input)
        }
    }

    fn check(&self) -> Result<(), String> {
        if self.instruction.is_empty() {
            return Err("field \"instruction\" is empty".into());
        }
        if self.output.is_empty() {
            return Err("field \"output\" is empty".into());
        }
        Ok(())
    }
}

/// One JSON object per line with string fields `instruction`, `input`,
/// `output`. Blank lines are skipped; other keys are ignored.
pub fn load_jsonl(path: &Path) -> Result<Vec<DatasetRecord>, DataError> {
    let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    parse_jsonl(&text, path)
}

pub fn parse_jsonl(text: &str, path: &Path) -> Result<Vec<DatasetRecord>, DataError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(raw).map_err(|e| DataError::Parse {
            path: path.to_owned(),
            line,
            msg: e.to_string(),
        })?;
        let obj = value.as_object().ok_or_else(|| DataError::Parse {
            path: path.to_owned(),
            line,
            msg: "expected a JSON object".into(),
        })?;
        let schema = |msg: String| DataError::Schema {
            path: path.to_owned(),
            line,
            msg,
        };
        let field = |name: &str| -> Result<String, DataError> {
            match obj.get(name) {
                None => Err(schema(format!("missing field \"{name}\""))),
                Some(serde_json::Value::String(s)) => Ok(s.clone()),
                Some(_) => Err(schema(format!("field \"{name}\" is not a string"))),
            }
        };
        let rec = DatasetRecord {
            instruction: field("instruction")?,
            input: field("input")?,
            output: field("output")?,
        };
        rec.check().map_err(schema)?;
        out.push(rec);
    }
    Ok(out)
}

pub fn to_jsonl(records: &[DatasetRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("records serialize"));
        s.push('\n');
    }
    s
}

pub fn write_jsonl(path: &Path, records: &[DatasetRecord]) -> Result<(), DataError> {
    for (index, r) in records.iter().enumerate() {
        r.check().map_err(|msg| DataError::Invalid { index, msg })?;
    }
    let mut f = fs::File::create(path).map_err(|e| DataError::io(path, e))?;
    f.write_all(to_jsonl(records).as_bytes()).map_err(|e| DataError::io(path, e))
}

/// The four splits of a corpus.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Corpus {
    pub train: Vec<DatasetRecord>,
    pub val: Vec<DatasetRecord>,
    pub test_id: Vec<DatasetRecord>,
    pub test_ood: Vec<DatasetRecord>,
}

pub const SPLIT_NAMES: [&str; 4] = ["train", "val", "test_id", "test_ood"];

impl Corpus {
    pub fn split(&self, name: &str) -> Option<&[DatasetRecord]> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test_id" => Some(&self.test_id),
            "test_ood" => Some(&self.test_ood),
            _ => None,
        }
    }

    /// Every prompt and response, for vocabulary building.
    pub fn texts(&self) -> Vec<String> {
        self.train
            .iter()
            .chain(&self.val)
            .chain(&self.test_id)
            .chain(&self.test_ood)
            .flat_map(|r| [r.prompt(), r.output.clone()])
            .collect()
    }

    pub fn write_dir(&self, dir: &Path) -> Result<(), DataError> {
        fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
        for name in SPLIT_NAMES {
            write_jsonl(&dir.join(format!("{name}.jsonl")), self.split(name).expect("known split"))?;
        }
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self, DataError> {
        let load = |name: &str| load_jsonl(&dir.join(format!("{name}.jsonl")));
        Ok(Corpus {
            train: load("train")?,
            val: load("val")?,
            test_id: load("test_id")?,
            test_ood: load("test_ood")?,
        })
    }
}

/// Split sizes of the synthetic corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorpusSizes {
    pub train: usize,
    pub val: usize,
    pub test_id: usize,
    pub test_ood: usize,
}

impl Default for CorpusSizes {
    fn default() -> Self {
        CorpusSizes {
            train: 1000,
            val: 100,
            test_id: 100,
            test_ood: 100,
        }
    }
}

const COLORS: &[(&str, &str)] = &[
    ("sky", "blue"),
    ("grass", "green"),
    ("snow", "white"),
    ("coal", "black"),
    ("sun", "yellow"),
    ("blood", "red"),
    ("lemon", "yellow"),
    ("leaf", "green"),
    ("cherry", "red"),
    ("milk", "white"),
    ("crow", "black"),
    ("sea", "blue"),
    ("rose", "red"),
    ("frog", "green"),
    ("banana", "yellow"),
    ("ink", "black"),
];

const OPPOSITES: &[(&str, &str)] = &[
    ("hot", "cold"),
    ("big", "small"),
    ("up", "down"),
    ("fast", "slow"),
    ("open", "shut"),
    ("light", "dark"),
    ("early", "late"),
    ("happy", "sad"),
    ("left", "right"),
    ("high", "low"),
    ("full", "empty"),
    ("old", "new"),
    ("wet", "dry"),
    ("hard", "soft"),
];

const LEGS: &[(&str, &str)] = &[
    ("dog", "four"),
    ("cat", "four"),
    ("bird", "two"),
    ("spider", "eight"),
    ("ant", "six"),
    ("horse", "four"),
    ("duck", "two"),
    ("bee", "six"),
    ("crab", "ten"),
    ("goat", "four"),
    ("owl", "two"),
    ("fly", "six"),
];

const WORDS: &[&str] = &[
    "red", "cup", "sun", "map", "box", "pen", "hat", "tree", "fish", "book", "moon", "door", "ring", "star", "road", "bell",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Task {
    Color,
    Opposite,
    Legs,
    Repeat,
    Reverse,
}

const TASKS: [Task; 5] = [Task::Color, Task::Opposite, Task::Legs, Task::Repeat, Task::Reverse];

fn pick<'a, R: Rng>(rng: &mut R, items: &'a [(&'a str, &'a str)]) -> (&'a str, &'a str) {
    *items.choose(rng).expect("non-empty table")
}

fn word_list<R: Rng>(rng: &mut R) -> Vec<&'static str> {
    let n = rng.gen_range(2..=3);
    (0..n).map(|_| *WORDS.choose(rng).expect("non-empty")).collect()
}

fn opposite<R: Rng>(rng: &mut R) -> (&'static str, &'static str) {
    let (a, b) = pick(rng, OPPOSITES);
    if rng.gen_bool(0.5) {
        (a, b)
    } else {
        (b, a)
    }
}

/// Templates seen in training and in-distribution evaluation.
fn in_distribution<R: Rng>(rng: &mut R, task: Task) -> DatasetRecord {
    match task {
        Task::Color => {
            let (obj, color) = pick(rng, COLORS);
            DatasetRecord::new(format!("What color is the {obj}?"), "", format!("The {obj} is {color}."))
        }
        Task::Opposite => {
            let (w, o) = opposite(rng);
            DatasetRecord::new("What is the opposite of this word?", w, format!("The opposite of {w} is {o}."))
        }
        Task::Legs => {
            let (animal, n) = pick(rng, LEGS);
            DatasetRecord::new(format!("How many legs does a {animal} have?"), "", format!("A {animal} has {n} legs."))
        }
        Task::Repeat => {
            let w = word_list(rng);
            DatasetRecord::new("Repeat the words.", w.join(" "), w.join(" "))
        }
        Task::Reverse => {
            let w = word_list(rng);
            let rev: Vec<&str> = w.iter().rev().copied().collect();
            DatasetRecord::new("Reverse the words.", w.join(" "), rev.join(" "))
        }
    }
}

/// Unseen phrasings of the same tasks, with the same answer formats.
fn out_of_distribution<R: Rng>(rng: &mut R, task: Task) -> DatasetRecord {
    match task {
        Task::Color => {
            let (obj, color) = pick(rng, COLORS);
            DatasetRecord::new("Name the color of this thing.", obj, format!("The {obj} is {color}."))
        }
        Task::Opposite => {
            let (w, o) = opposite(rng);
            DatasetRecord::new(format!("Give me the opposite of {w}."), "", format!("The opposite of {w} is {o}."))
        }
        Task::Legs => {
            let (animal, n) = pick(rng, LEGS);
            DatasetRecord::new("Count the legs of this animal.", animal, format!("A {animal} has {n} legs."))
        }
        Task::Repeat => {
            let w = word_list(rng);
            DatasetRecord::new("Say these words again.", w.join(" "), w.join(" "))
        }
        Task::Reverse => {
            let w = word_list(rng);
            let rev: Vec<&str> = w.iter().rev().copied().collect();
            DatasetRecord::new("Write the words backwards.", w.join(" "), rev.join(" "))
        }
    }
}

/// Deterministic synthetic corpus: five task families with fixed answer
/// formats, cycled in order; the out-of-distribution split rephrases every
/// instruction.
pub fn generate_corpus(seed: u64, sizes: CorpusSizes) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = |n: usize, ood: bool| -> Vec<DatasetRecord> {
        (0..n)
            .map(|i| {
                let task = TASKS[i % TASKS.len()];
                if ood {
                    out_of_distribution(&mut rng, task)
                } else {
                    in_distribution(&mut rng, task)
                }
            })
            .collect()
    };
    let train = split(sizes.train, false);
    let val = split(sizes.val, false);
    let test_id = split(sizes.test_id, false);
    let test_ood = split(sizes.test_ood, true);
    Corpus {
        train,
        val,
        test_id,
        test_ood,
    }
}

/// A record tokenized for one model.
///
/// With `P`/`R` the prompt and response tokens (tokenized separately):
/// `ids = [bos] P R`, `gold = P R [eos]`, and `mask[p]` is set where `gold[p]`
/// belongs to the response (its end-of-sequence included).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    pub text: Tokenization,
    pub prompt_len: usize,
    pub ids: Vec<usize>,
    pub gold: Vec<usize>,
    pub mask: Vec<bool>,
}

impl Encoded {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// `[bos] P`, the decoding context.
    pub fn prompt_ids(&self) -> &[usize] {
        &self.ids[..=self.prompt_len]
    }
}

pub fn encode(vocab: &Vocabulary, record: &DatasetRecord) -> Encoded {
    let sp = vocab.specials();
    let prompt = vocab.tokenize(&record.prompt());
    let response = vocab.tokenize(&record.output);
    let text = prompt.concat(&response);
    let mut ids = Vec::with_capacity(text.len() + 1);
    ids.push(sp.bos);
    ids.extend_from_slice(&text.ids);
    let mut gold = text.ids.clone();
    gold.push(sp.eos);
    let mask = (0..gold.len()).map(|p| p >= prompt.len()).collect();
    Encoded {
        prompt_len: prompt.len(),
        text,
        ids,
        gold,
        mask,
    }
}

/// Chunks and matrices between the teacher and student encodings of one
/// record, covering the leading bos position.
pub fn align_encoded(teacher: &Encoded, student: &Encoded) -> Result<(ChunkSet, AlignmentMatrix), DataError> {
    let base = align_chunks(&teacher.text, &student.text)?;
    let chunks = base.with_leading_special();
    let m = build_matrices(&chunks, teacher.len(), student.len())?;
    Ok((chunks, m))
}
