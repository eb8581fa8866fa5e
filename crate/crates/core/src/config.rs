//! Run configuration: a flat `key = value` document.
//!
//! Grammar: one assignment per line, `#` starts a comment (whole line or
//! after the value), blank lines are ignored, keys are dotted paths and
//! values run to the end of the line with surrounding whitespace removed.
//! Every key has a default; unknown keys, repeated keys and unparsable values
//! are errors that name the line.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::data::CorpusSizes;
use crate::div::{Divergence, DivergenceKind};
use crate::kq::{KqKind, KqMode, RealClass};
use crate::lm::ModelConfig;
use crate::tok::TokenizerKind;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown key '{key}'")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key '{key}' set twice")]
    Duplicate { line: usize, key: String },
    #[error("line {line}: bad value for '{key}': {msg}")]
    Value { line: usize, key: String, msg: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrainMode {
    Sft,
    SameTok,
    Cma,
    Clp,
    Cla,
    CmaGa,
    CmaCt,
}

impl TrainMode {
    pub const ALL: [TrainMode; 7] = [
        TrainMode::Sft,
        TrainMode::SameTok,
        TrainMode::Cma,
        TrainMode::Clp,
        TrainMode::Cla,
        TrainMode::CmaGa,
        TrainMode::CmaCt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Sft => "sft",
            TrainMode::SameTok => "dskd-same-tok",
            TrainMode::Cma => "dskd-cma",
            TrainMode::Clp => "dskd-clp",
            TrainMode::Cla => "dskd-cla",
            TrainMode::CmaGa => "dskd-cma-ga",
            TrainMode::CmaCt => "dskd-cma-ct",
        }
    }

    /// Divergence used when `train.divergence = auto`.
    pub fn default_divergence(self) -> DivergenceKind {
        match self {
            TrainMode::CmaGa => DivergenceKind::Skl,
            TrainMode::CmaCt => DivergenceKind::Kl,
            _ => DivergenceKind::Srkl,
        }
    }

    /// Key-query matching implied by the mode.
    pub fn implied_kq(self) -> KqKind {
        match self {
            TrainMode::CmaGa => KqKind::Ga,
            TrainMode::CmaCt => KqKind::Ct,
            _ => KqKind::None,
        }
    }

    pub fn uses_cross_model(self) -> bool {
        !matches!(self, TrainMode::Sft | TrainMode::SameTok)
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TrainMode::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let names: Vec<&str> = TrainMode::ALL.iter().map(|m| m.name()).collect();
            format!("unknown mode '{s}' (expected {})", names.join("|"))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSection {
    pub tokenizer: TokenizerKind,
    pub merges: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_seq: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherSection {
    pub model: ModelSection,
    pub seed: u64,
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch: usize,
    pub eval_every: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSection {
    pub mode: TrainMode,
    /// `None` picks the mode's default.
    pub divergence: Option<DivergenceKind>,
    pub skew_lambda: f64,
    pub akl_mu: f64,
    pub swap_kd_args: bool,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KqSection {
    /// `None` follows the training mode.
    pub mode: Option<KqKind>,
    pub weight: f64,
    pub adversary_lr: f64,
    pub real_class: RealClass,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSection {
    pub max_new_tokens: usize,
    pub splits: Vec<String>,
    /// Examples per split; 0 means all.
    pub limit: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSection {
    /// Directory with `train/val/test_id/test_ood.jsonl`; empty generates the
    /// synthetic corpus in memory.
    pub dir: String,
    pub seed: u64,
    pub sizes: CorpusSizes,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub teacher: TeacherSection,
    pub student: ModelSection,
    pub train: TrainSection,
    pub kq: KqSection,
    pub eval: EvalSection,
    pub data: DataSection,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            teacher: TeacherSection {
                model: ModelSection {
                    tokenizer: TokenizerKind::Merge,
                    merges: 200,
                    hidden_dim: 48,
                    layers: 2,
                    heads: 4,
                    max_seq: 96,
                },
                seed: 7,
                pretrain_steps: 1500,
                pretrain_lr: 3e-3,
                pretrain_batch: 8,
                eval_every: 100,
            },
            student: ModelSection {
                tokenizer: TokenizerKind::Merge,
                merges: 60,
                hidden_dim: 32,
                layers: 1,
                heads: 2,
                max_seq: 128,
            },
            train: TrainSection {
                mode: TrainMode::Cma,
                divergence: None,
                skew_lambda: 0.1,
                akl_mu: 0.5,
                swap_kd_args: false,
                lr: 1e-3,
                steps: 500,
                batch_size: 8,
                seed: 1,
            },
            kq: KqSection {
                mode: None,
                weight: 1.0,
                adversary_lr: 1e-3,
                real_class: RealClass::Queries,
            },
            eval: EvalSection {
                max_new_tokens: 24,
                splits: vec!["test_id".into(), "test_ood".into()],
                limit: 0,
            },
            data: DataSection {
                dir: String::new(),
                seed: 1,
                sizes: CorpusSizes::default(),
            },
        }
    }
}

/// Every key with its documentation, in serialization order.
pub const KEYS: &[(&str, &str)] = &[
    ("model.teacher.tokenizer", "char | merge"),
    ("model.teacher.merges", "merge rules learned for the teacher vocabulary"),
    ("model.teacher.hidden_dim", "teacher width d_t"),
    ("model.teacher.layers", "teacher transformer blocks"),
    ("model.teacher.heads", "teacher attention heads (must divide hidden_dim)"),
    ("model.teacher.max_seq", "teacher context length"),
    ("model.teacher.seed", "teacher initialization and pretraining order"),
    ("model.teacher.pretrain_steps", "teacher cross-entropy pretraining steps"),
    ("model.teacher.pretrain_lr", "teacher pretraining learning rate"),
    ("model.teacher.pretrain_batch", "teacher pretraining batch size"),
    ("model.teacher.eval_every", "steps between validation checks; the best teacher is kept"),
    ("model.student.tokenizer", "char | merge"),
    ("model.student.merges", "merge rules learned for the student vocabulary"),
    ("model.student.hidden_dim", "student width d_s"),
    ("model.student.layers", "student transformer blocks"),
    ("model.student.heads", "student attention heads (must divide hidden_dim)"),
    ("model.student.max_seq", "student context length"),
    ("train.mode", "sft | dskd-same-tok | dskd-cma | dskd-clp | dskd-cla | dskd-cma-ga | dskd-cma-ct"),
    ("train.divergence", "auto | kl | rkl | skl | srkl | akl | jsd (auto: srkl, skl for -ga, kl for -ct)"),
    ("train.skew_lambda", "skew of skl/srkl, in (0,1)"),
    ("train.akl_mu", "head mass of akl, in (0,1)"),
    ("train.swap_kd_args", "evaluate the divergences with swapped arguments"),
    ("train.lr", "learning rate of the student and projectors"),
    ("train.steps", "optimization steps"),
    ("train.batch_size", "examples per step"),
    ("train.seed", "student initialization, projectors, adversary and batch order"),
    ("kq.mode", "auto | none | ga | ct (auto follows train.mode)"),
    ("kq.weight", "weight of the key-query term, >= 0"),
    ("kq.adversary_lr", "learning rate of the discriminator or critic"),
    ("kq.real_class", "queries | keys: positive class of the discriminator"),
    ("eval.max_new_tokens", "greedy decoding budget per prompt"),
    ("eval.splits", "comma-separated splits to score"),
    ("eval.limit", "examples per split, 0 for all"),
    ("data.dir", "directory with the four jsonl splits; empty generates the synthetic corpus"),
    ("data.seed", "synthetic corpus seed"),
    ("data.train", "synthetic train size"),
    ("data.val", "synthetic validation size"),
    ("data.test_id", "synthetic in-distribution test size"),
    ("data.test_ood", "synthetic out-of-distribution test size"),
];

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true|false, got '{v}'")),
    }
}

fn parse_num<N: FromStr>(v: &str) -> Result<N, String>
where
    N::Err: fmt::Display,
{
    v.parse::<N>().map_err(|e| format!("'{v}': {e}"))
}

impl Config {
    /// Parses a document over the defaults.
    pub fn parse(src: &str) -> Result<Self, ConfigError> {
        let mut cfg = Config::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in src.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                msg: format!("expected 'key = value', got '{body}'"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.iter().any(|(k, _)| *k == key) {
                return Err(ConfigError::UnknownKey { line, key: key.into() });
            }
            if !seen.insert(key.to_owned()) {
                return Err(ConfigError::Duplicate { line, key: key.into() });
            }
            cfg.set(key, value).map_err(|msg| ConfigError::Value {
                line,
                key: key.into(),
                msg,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let src = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_owned(),
            source,
        })?;
        Config::parse(&src)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        fs::write(path, self.serialize()).map_err(|source| ConfigError::Io {
            path: path.to_owned(),
            source,
        })
    }

    /// Assigns one key from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let t = &mut self.teacher;
        let s = &mut self.student;
        match key {
            "model.teacher.tokenizer" => t.model.tokenizer = v.parse()?,
            "model.teacher.merges" => t.model.merges = parse_num(v)?,
            "model.teacher.hidden_dim" => t.model.hidden_dim = parse_num(v)?,
            "model.teacher.layers" => t.model.layers = parse_num(v)?,
            "model.teacher.heads" => t.model.heads = parse_num(v)?,
            "model.teacher.max_seq" => t.model.max_seq = parse_num(v)?,
            "model.teacher.seed" => t.seed = parse_num(v)?,
            "model.teacher.pretrain_steps" => t.pretrain_steps = parse_num(v)?,
            "model.teacher.pretrain_lr" => t.pretrain_lr = parse_num(v)?,
            "model.teacher.pretrain_batch" => t.pretrain_batch = parse_num(v)?,
            "model.teacher.eval_every" => t.eval_every = parse_num(v)?,
            "model.student.tokenizer" => s.tokenizer = v.parse()?,
            "model.student.merges" => s.merges = parse_num(v)?,
            "model.student.hidden_dim" => s.hidden_dim = parse_num(v)?,
            "model.student.layers" => s.layers = parse_num(v)?,
            "model.student.heads" => s.heads = parse_num(v)?,
            "model.student.max_seq" => s.max_seq = parse_num(v)?,
            "train.mode" => self.train.mode = v.parse()?,
            "train.divergence" => {
                self.train.divergence = if v == "auto" { None } else { Some(v.parse()?) };
            }
            "train.skew_lambda" => self.train.skew_lambda = parse_num(v)?,
            "train.akl_mu" => self.train.akl_mu = parse_num(v)?,
            "train.swap_kd_args" => self.train.swap_kd_args = parse_bool(v)?,
            "train.lr" => self.train.lr = parse_num(v)?,
            "train.steps" => self.train.steps = parse_num(v)?,
            "train.batch_size" => self.train.batch_size = parse_num(v)?,
            "train.seed" => self.train.seed = parse_num(v)?,
            "kq.mode" => self.kq.mode = if v == "auto" { None } else { Some(v.parse()?) },
            "kq.weight" => self.kq.weight = parse_num(v)?,
            "kq.adversary_lr" => self.kq.adversary_lr = parse_num(v)?,
            "kq.real_class" => self.kq.real_class = v.parse()?,
            "eval.max_new_tokens" => self.eval.max_new_tokens = parse_num(v)?,
            "eval.splits" => {
                self.eval.splits = v.split(',').map(|x| x.trim().to_owned()).filter(|x| !x.is_empty()).collect();
            }
            "eval.limit" => self.eval.limit = parse_num(v)?,
            "data.dir" => self.data.dir = v.to_owned(),
            "data.seed" => self.data.seed = parse_num(v)?,
            "data.train" => self.data.sizes.train = parse_num(v)?,
            "data.val" => self.data.sizes.val = parse_num(v)?,
            "data.test_id" => self.data.sizes.test_id = parse_num(v)?,
            "data.test_ood" => self.data.sizes.test_ood = parse_num(v)?,
            other => return Err(format!("unknown key '{other}'")),
        }
        Ok(())
    }

    /// Textual value of one key, in the form `set` accepts.
    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.teacher;
        let s = &self.student;
        let v = match key {
            "model.teacher.tokenizer" => t.model.tokenizer.name().to_owned(),
            "model.teacher.merges" => t.model.merges.to_string(),
            "model.teacher.hidden_dim" => t.model.hidden_dim.to_string(),
            "model.teacher.layers" => t.model.layers.to_string(),
            "model.teacher.heads" => t.model.heads.to_string(),
            "model.teacher.max_seq" => t.model.max_seq.to_string(),
            "model.teacher.seed" => t.seed.to_string(),
            "model.teacher.pretrain_steps" => t.pretrain_steps.to_string(),
            "model.teacher.pretrain_lr" => t.pretrain_lr.to_string(),
            "model.teacher.pretrain_batch" => t.pretrain_batch.to_string(),
            "model.teacher.eval_every" => t.eval_every.to_string(),
            "model.student.tokenizer" => s.tokenizer.name().to_owned(),
            "model.student.merges" => s.merges.to_string(),
            "model.student.hidden_dim" => s.hidden_dim.to_string(),
            "model.student.layers" => s.layers.to_string(),
            "model.student.heads" => s.heads.to_string(),
            "model.student.max_seq" => s.max_seq.to_string(),
            "train.mode" => self.train.mode.name().to_owned(),
            "train.divergence" => self.train.divergence.map_or("auto".into(), |d| d.name().to_owned()),
            "train.skew_lambda" => self.train.skew_lambda.to_string(),
            "train.akl_mu" => self.train.akl_mu.to_string(),
            "train.swap_kd_args" => self.train.swap_kd_args.to_string(),
            "train.lr" => self.train.lr.to_string(),
            "train.steps" => self.train.steps.to_string(),
            "train.batch_size" => self.train.batch_size.to_string(),
            "train.seed" => self.train.seed.to_string(),
            "kq.mode" => self.kq.mode.map_or("auto".into(), |k| k.name().to_owned()),
            "kq.weight" => self.kq.weight.to_string(),
            "kq.adversary_lr" => self.kq.adversary_lr.to_string(),
            "kq.real_class" => self.kq.real_class.name().to_owned(),
            "eval.max_new_tokens" => self.eval.max_new_tokens.to_string(),
            "eval.splits" => self.eval.splits.join(","),
            "eval.limit" => self.eval.limit.to_string(),
            "data.dir" => self.data.dir.clone(),
            "data.seed" => self.data.seed.to_string(),
            "data.train" => self.data.sizes.train.to_string(),
            "data.val" => self.data.sizes.val.to_string(),
            "data.test_id" => self.data.sizes.test_id.to_string(),
            "data.test_ood" => self.data.sizes.test_ood.to_string(),
            _ => return None,
        };
        Some(v)
    }

    /// Every key with its documentation comment.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (key, doc) in KEYS {
            let sec = &key[..key.rfind('.').unwrap_or(0)];
            if sec != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                section = sec;
            }
            out.push_str(&format!("# {doc}\n{key} = {}\n", self.get(key).expect("documented key")));
        }
        out
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.teacher_model_config().validate().map_err(|e| ConfigError::Invalid(format!("teacher: {e}")))?;
        self.student_model_config(0)
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("student: {e}")))?;
        self.divergence().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.train.batch_size == 0 || self.teacher.pretrain_batch == 0 {
            return bad("batch sizes must be positive".into());
        }
        for (name, lr) in [
            ("train.lr", self.train.lr),
            ("model.teacher.pretrain_lr", self.teacher.pretrain_lr),
            ("kq.adversary_lr", self.kq.adversary_lr),
        ] {
            if !(lr.is_finite() && lr > 0.0) {
                return bad(format!("{name} must be positive, got {lr}"));
            }
        }
        KqMode::new(KqKind::None, self.kq.weight).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if let Some(k) = self.kq.mode {
            let implied = self.train.mode.implied_kq();
            if k != implied {
                return bad(format!("kq.mode = {k} conflicts with train.mode = {} (which implies {implied})", self.train.mode));
            }
        }
        if self.train.mode == TrainMode::SameTok
            && (self.teacher.model.tokenizer != self.student.tokenizer || self.teacher.model.merges != self.student.merges)
        {
            return bad("dskd-same-tok needs identical teacher and student tokenizer settings".into());
        }
        for s in &self.eval.splits {
            if !crate::data::SPLIT_NAMES.contains(&s.as_str()) {
                return bad(format!("unknown eval split '{s}'"));
            }
        }
        Ok(())
    }

    pub fn divergence(&self) -> Divergence {
        Divergence {
            kind: self.train.divergence.unwrap_or_else(|| self.train.mode.default_divergence()),
            skew_lambda: self.train.skew_lambda,
            akl_mu: self.train.akl_mu,
        }
    }

    pub fn kq_mode(&self) -> KqMode {
        KqMode {
            kind: self.kq.mode.unwrap_or_else(|| self.train.mode.implied_kq()),
            weight: self.kq.weight,
        }
    }

    /// Teacher architecture; the vocabulary size is filled in by the caller.
    pub fn teacher_model_config(&self) -> ModelConfig {
        let m = &self.teacher.model;
        ModelConfig {
            vocab_size: 1,
            hidden_dim: m.hidden_dim,
            num_layers: m.layers,
            num_heads: m.heads,
            max_seq: m.max_seq,
            seed: self.teacher.seed,
        }
    }

    pub fn student_model_config(&self, vocab_size: usize) -> ModelConfig {
        let m = &self.student;
        ModelConfig {
            vocab_size: vocab_size.max(1),
            hidden_dim: m.hidden_dim,
            num_layers: m.layers,
            num_heads: m.heads,
            max_seq: m.max_seq,
            seed: self.train.seed,
        }
    }
}
