//! Teacher pretraining, the distillation training loop for every mode, and
//! greedy-decoding evaluation.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::align::AlignmentMatrix;
use crate::cma::{dual_space_losses, AlignmentMode, Attention, CmaError, DualSpaceConfig, DualSpaceInputs, Projectors};
use crate::config::{Config, ConfigError, TrainMode};
use crate::data::{align_encoded, encode, generate_corpus, Corpus, DataError, DatasetRecord, Encoded};
use crate::div::DivError;
use crate::kq::{combine, ct_losses, ga_losses, pool_rows, Critic, Discriminator, KqError, KqKind};
use crate::lm::{ce_loss, ForwardOutput, LmError, ModelState};
use crate::optim::Adam;
use crate::rouge::rouge_l;
use crate::tensor::{Tensor, TensorError};
use crate::tok::{TokError, Vocabulary};

/// Seed offsets separating the random streams of one run.
const STREAM_BATCHES: u64 = 0x5eed_0001;
const STREAM_PROJECTORS: u64 = 0x5eed_0002;
const STREAM_ADVERSARY: u64 = 0x5eed_0003;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tok(#[from] TokError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Cma(#[from] CmaError),
    #[error(transparent)]
    Kq(#[from] KqError),
    #[error(transparent)]
    Div(#[from] DivError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{split} record {index} is {len} {side} tokens, longer than max_seq {max}")]
    TooLong {
        split: &'static str,
        index: usize,
        side: &'static str,
        len: usize,
        max: usize,
    },
    #[error("non-finite loss at step {step}; last finite report: {}", last.map_or("none".to_owned(), |r| r.to_string()))]
    NonFinite { step: usize, last: Option<LossReport> },
    #[error("{0}")]
    Empty(String),
}

/// Loss terms of one step, averaged over the batch. `kq` is already
/// weighted.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub ce_s: f64,
    pub kd_s2t: f64,
    pub kd_t2s: f64,
    pub ce_t: f64,
    pub kq: f64,
    pub total: f64,
}

pub const LOG_HEADER: &str = "step\tce_s\tkd_s2t\tkd_t2s\tce_t\tkq\ttotal";

impl LossReport {
    /// The total the mode's objective implies from the parts.
    pub fn implied_total(&self, mode: TrainMode) -> f64 {
        match mode {
            TrainMode::Sft => self.ce_s,
            TrainMode::SameTok => 0.5 * self.ce_s + 0.5 * self.kd_t2s,
            _ => 0.5 * self.ce_s + 0.5 * (self.kd_s2t + self.kd_t2s + self.ce_t) + self.kq,
        }
    }

    pub fn tsv_line(&self, step: usize) -> String {
        format!(
            "{step}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.ce_s, self.kd_s2t, self.kd_t2s, self.ce_t, self.kq, self.total
        )
    }

    fn scaled(self, s: f64) -> Self {
        LossReport {
            ce_s: self.ce_s * s,
            kd_s2t: self.kd_s2t * s,
            kd_t2s: self.kd_t2s * s,
            ce_t: self.ce_t * s,
            kq: self.kq * s,
            total: self.total * s,
        }
    }

    fn accumulate(&mut self, o: &LossReport) {
        self.ce_s += o.ce_s;
        self.kd_s2t += o.kd_s2t;
        self.kd_t2s += o.kd_t2s;
        self.ce_t += o.ce_t;
        self.kq += o.kq;
        self.total += o.total;
    }
}

impl fmt::Display for LossReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "ce_s={:.6} kd_s2t={:.6} kd_t2s={:.6} ce_t={:.6} kq={:.6} total={:.6}",
            self.ce_s, self.kd_s2t, self.kd_t2s, self.ce_t, self.kq, self.total
        )
    }
}

/// One record encoded for both models, with its alignment.
#[derive(Debug, Clone)]
pub struct Example {
    pub student: Encoded,
    pub teacher: Encoded,
    pub alignment: AlignmentMatrix,
}

/// Corpus, vocabularies and encoded training data shared by every run of a
/// configuration.
pub struct Workbench {
    pub cfg: Config,
    pub corpus: Corpus,
    pub teacher_vocab: Vocabulary,
    pub student_vocab: Vocabulary,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    teacher_cache: RefCell<HashMap<usize, ForwardOutput<f64>>>,
}

fn encode_split(
    name: &'static str,
    records: &[DatasetRecord],
    cfg: &Config,
    tv: &Vocabulary,
    sv: &Vocabulary,
) -> Result<Vec<Example>, TrainError> {
    records
        .iter()
        .enumerate()
        .map(|(index, r)| {
            let student = encode(sv, r);
            let teacher = encode(tv, r);
            for (side, len, max) in [
                ("student", student.len(), cfg.student.max_seq),
                ("teacher", teacher.len(), cfg.teacher.model.max_seq),
            ] {
                if len > max {
                    return Err(TrainError::TooLong {
                        split: name,
                        index,
                        side,
                        len,
                        max,
                    });
                }
            }
            let (_, alignment) = align_encoded(&teacher, &student)?;
            Ok(Example {
                student,
                teacher,
                alignment,
            })
        })
        .collect()
}

impl Workbench {
    /// Loads or generates the corpus and builds both vocabularies from the
    /// training split.
    pub fn prepare(cfg: Config) -> Result<Self, TrainError> {
        cfg.validate()?;
        let corpus = if cfg.data.dir.is_empty() {
            generate_corpus(cfg.data.seed, cfg.data.sizes)
        } else {
            Corpus::load_dir(Path::new(&cfg.data.dir))?
        };
        Self::with_corpus(cfg, corpus)
    }

    pub fn with_corpus(cfg: Config, corpus: Corpus) -> Result<Self, TrainError> {
        cfg.validate()?;
        if corpus.train.is_empty() {
            return Err(TrainError::Empty("training split is empty".into()));
        }
        let texts: Vec<String> = corpus.train.iter().flat_map(|r| [r.prompt(), r.output.clone()]).collect();
        let tm = &cfg.teacher.model;
        let teacher_vocab = Vocabulary::build(&texts, tm.tokenizer, tm.merges)?;
        let student_vocab = Vocabulary::build(&texts, cfg.student.tokenizer, cfg.student.merges)?;
        Self::with_vocabs(cfg, corpus, teacher_vocab, student_vocab)
    }

    pub fn with_vocabs(cfg: Config, corpus: Corpus, teacher_vocab: Vocabulary, student_vocab: Vocabulary) -> Result<Self, TrainError> {
        let train = encode_split("train", &corpus.train, &cfg, &teacher_vocab, &student_vocab)?;
        let val = encode_split("val", &corpus.val, &cfg, &teacher_vocab, &student_vocab)?;
        Ok(Workbench {
            cfg,
            corpus,
            teacher_vocab,
            student_vocab,
            train,
            val,
            teacher_cache: RefCell::new(HashMap::new()),
        })
    }

    /// Same corpus and vocabularies under a different configuration (the
    /// tokenizer and data settings must not change).
    pub fn reconfigure(&self, cfg: Config) -> Result<Self, TrainError> {
        cfg.validate()?;
        Ok(Workbench {
            cfg,
            corpus: self.corpus.clone(),
            teacher_vocab: self.teacher_vocab.clone(),
            student_vocab: self.student_vocab.clone(),
            train: self.train.clone(),
            val: self.val.clone(),
            teacher_cache: RefCell::new(HashMap::new()),
        })
    }

    pub fn new_teacher(&self) -> Result<ModelState<f64>, TrainError> {
        let mut mc = self.cfg.teacher_model_config();
        mc.vocab_size = self.teacher_vocab.size();
        Ok(ModelState::new(mc, false)?)
    }

    pub fn new_student(&self) -> Result<ModelState<f64>, TrainError> {
        Ok(ModelState::new(self.cfg.student_model_config(self.student_vocab.size()), false)?)
    }

    /// Cross-entropy pretraining of the teacher on the training split, keeping
    /// the parameters with the best validation loss. Returns the frozen
    /// teacher and its validation curve.
    pub fn pretrain_teacher(&self) -> Result<(ModelState<f64>, Vec<(usize, f64)>), TrainError> {
        let tc = &self.cfg.teacher;
        let model = self.new_teacher()?;
        let mut opt = Adam::new(model.params(), tc.pretrain_lr);
        let mut order = BatchOrder::new(self.train.len(), tc.seed ^ STREAM_BATCHES);
        let val: Vec<&Encoded> = self.val.iter().map(|e| &e.teacher).collect();
        let mut curve = Vec::new();
        let mut best: Option<(f64, Vec<Vec<f64>>)> = None;
        let mut check = |step: usize, model: &ModelState<f64>| -> Result<(), TrainError> {
            if val.is_empty() {
                return Ok(());
            }
            let ce = mean_ce(model, &val)?;
            curve.push((step, ce));
            debug!("teacher step {step}: val ce {ce:.5}");
            if best.as_ref().map_or(true, |(b, _)| ce < *b) {
                best = Some((ce, model.params().iter().map(Tensor::to_vec).collect()));
            }
            Ok(())
        };
        for step in 1..=tc.pretrain_steps {
            opt.zero_grad();
            let batch = order.next_batch(tc.pretrain_batch);
            let mut total: Option<Tensor<f64>> = None;
            for &i in &batch {
                let e = &self.train[i].teacher;
                let loss = ce_loss(&model.logits(&e.ids)?, &e.gold, &e.mask)?;
                total = Some(match total {
                    None => loss,
                    Some(t) => t.add(&loss)?,
                });
            }
            let loss = total.expect("non-empty batch").scale(1.0 / batch.len() as f64);
            if !loss.item().is_finite() {
                return Err(TrainError::NonFinite { step, last: None });
            }
            loss.backward()?;
            opt.step();
            if tc.eval_every > 0 && (step % tc.eval_every == 0 || step == tc.pretrain_steps) {
                check(step, &model)?;
            }
        }
        if let Some((ce, params)) = best {
            info!("teacher pretrained: best val ce {ce:.5}");
            for (p, data) in model.params().iter().zip(params) {
                p.update_data(|d| d.copy_from_slice(&data));
            }
        }
        Ok((model.frozen_copy(), curve))
    }

    fn teacher_output(&self, teacher: &ModelState<f64>, index: usize) -> Result<ForwardOutput<f64>, TrainError> {
        if let Some(out) = self.teacher_cache.borrow().get(&index) {
            return Ok(out.clone());
        }
        let e = &self.train[index].teacher;
        let out = teacher.forward(&e.ids, &e.gold)?;
        self.teacher_cache.borrow_mut().insert(index, out.clone());
        Ok(out)
    }

    /// Drops cached teacher outputs (needed when the teacher changes).
    pub fn clear_teacher_cache(&self) {
        self.teacher_cache.borrow_mut().clear();
    }
}

/// Mean response cross-entropy of a model over encoded examples.
pub fn mean_ce(model: &ModelState<f64>, examples: &[&Encoded]) -> Result<f64, TrainError> {
    if examples.is_empty() {
        return Err(TrainError::Empty("no examples to score".into()));
    }
    let mut sum = 0.0;
    for e in examples {
        sum += ce_loss(&model.logits(&e.ids)?, &e.gold, &e.mask)?.item();
    }
    Ok(sum / examples.len() as f64)
}

/// Epoch-wise shuffled example order.
#[derive(Debug, Clone)]
pub struct BatchOrder {
    rng: ChaCha8Rng,
    perm: Vec<usize>,
    pos: usize,
}

impl BatchOrder {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        BatchOrder { rng, perm, pos: 0 }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.perm.len() {
                self.perm.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.perm[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Discriminator or critic of the key-query term.
#[derive(Debug, Clone)]
pub enum Adversary {
    Ga(Discriminator<f64>),
    Ct(Critic<f64>),
}

impl Adversary {
    pub fn params(&self) -> Vec<Tensor<f64>> {
        match self {
            Adversary::Ga(d) => d.params(),
            Adversary::Ct(c) => c.params(),
        }
    }
}

/// Result of a training run.
pub struct TrainOutput {
    pub student: ModelState<f64>,
    pub projectors: Projectors<f64>,
    pub adversary: Option<Adversary>,
    pub log: Vec<LossReport>,
}

impl TrainOutput {
    pub fn log_tsv(&self) -> String {
        let mut s = String::from(LOG_HEADER);
        s.push('\n');
        for (i, r) in self.log.iter().enumerate() {
            s.push_str(&r.tsv_line(i + 1));
            s.push('\n');
        }
        s
    }
}

fn alignment_mode(mode: TrainMode) -> AlignmentMode {
    match mode {
        TrainMode::Clp => AlignmentMode::Clp,
        TrainMode::Cla => AlignmentMode::Cla,
        _ => AlignmentMode::Cma,
    }
}

fn sum_into(acc: &mut Option<Tensor<f64>>, t: Tensor<f64>) -> Result<(), TensorError> {
    *acc = Some(match acc.take() {
        None => t,
        Some(a) => a.add(&t)?,
    });
    Ok(())
}

/// Trains a fresh student (seeded by `train.seed`) against a frozen teacher.
pub fn train(wb: &Workbench, teacher: &ModelState<f64>) -> Result<TrainOutput, TrainError> {
    let cfg = &wb.cfg;
    let tc = &cfg.train;
    let mode = tc.mode;
    let student = wb.new_student()?;
    let projectors = Projectors::<f64>::new(cfg.student.hidden_dim, cfg.teacher.model.hidden_dim, tc.seed ^ STREAM_PROJECTORS);
    let kq = cfg.kq_mode();
    let adversary = {
        let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ STREAM_ADVERSARY);
        let width = 2 * cfg.teacher.model.hidden_dim;
        match kq.kind {
            KqKind::None => None,
            KqKind::Ga => Some(Adversary::Ga(Discriminator::new(&mut rng, width))),
            KqKind::Ct => Some(Adversary::Ct(Critic::new(&mut rng, width))),
        }
    };
    let mut params = student.params();
    if mode.uses_cross_model() {
        params.extend(projectors.params());
    }
    let mut opt = Adam::new(params, tc.lr);
    let mut adv_opt = adversary.as_ref().map(|a| Adam::new(a.params(), cfg.kq.adversary_lr));
    let mut order = BatchOrder::new(wb.train.len(), tc.seed ^ STREAM_BATCHES);
    let dual_cfg = DualSpaceConfig {
        mode: alignment_mode(mode),
        divergence: cfg.divergence(),
        swap_kd_args: tc.swap_kd_args,
    };
    let mut log: Vec<LossReport> = Vec::with_capacity(tc.steps);

    for step in 1..=tc.steps {
        let batch = order.next_batch(tc.batch_size);
        let inv_b = 1.0 / batch.len() as f64;
        let mut total: Option<Tensor<f64>> = None;
        let mut report = LossReport::default();
        let (mut queries, mut keys) = (Vec::new(), Vec::new());
        for &i in &batch {
            let ex = &wb.train[i];
            let s = student.forward(&ex.student.ids, &ex.student.gold)?;
            let (loss, r) = match mode {
                TrainMode::Sft => {
                    let ce = ce_loss(&s.logits, &ex.student.gold, &ex.student.mask)?;
                    let v = ce.item();
                    (
                        ce,
                        LossReport {
                            ce_s: v,
                            total: v,
                            ..Default::default()
                        },
                    )
                }
                TrainMode::SameTok => {
                    let t = wb.teacher_output(teacher, i)?;
                    let ce = ce_loss(&s.logits, &ex.student.gold, &ex.student.mask)?;
                    let p_s = s.logits.softmax_rows(None)?;
                    let p_t = t.logits.detach().softmax_rows(None)?;
                    let div = cfg.divergence();
                    let kd = if tc.swap_kd_args {
                        div.compute(&p_t, &p_s, &ex.student.mask)?
                    } else {
                        div.compute(&p_s, &p_t, &ex.student.mask)?
                    };
                    let loss = ce.scale(0.5).add(&kd.scale(0.5))?;
                    let r = LossReport {
                        ce_s: ce.item(),
                        kd_t2s: kd.item(),
                        total: loss.item(),
                        ..Default::default()
                    };
                    (loss, r)
                }
                _ => {
                    let t = wb.teacher_output(teacher, i)?;
                    let inputs = DualSpaceInputs {
                        student: &s,
                        teacher: &t,
                        student_head: &student.head,
                        teacher_head: &teacher.head,
                        gold_s: &ex.student.gold,
                        gold_t: &ex.teacher.gold,
                        mask_s: &ex.student.mask,
                        mask_t: &ex.teacher.mask,
                    };
                    let l = dual_space_losses(&inputs, &projectors, &dual_cfg, Some(&ex.alignment))?;
                    let loss = l.total()?;
                    let r = LossReport {
                        ce_s: l.ce_s.item(),
                        kd_s2t: l.kd_s2t.item(),
                        kd_t2s: l.kd_t2s.item(),
                        ce_t: l.ce_t.item(),
                        kq: 0.0,
                        total: loss.item(),
                    };
                    queries.push(l.q);
                    keys.push(l.k);
                    (loss, r)
                }
            };
            report.accumulate(&r);
            sum_into(&mut total, loss)?;
        }
        let mut report = report.scaled(inv_b);
        let mut total = total.expect("non-empty batch").scale(inv_b);

        if let (Some(adv), Some(adv_opt)) = (&adversary, adv_opt.as_mut()) {
            let pool_q = pool_rows(&queries)?;
            let pool_k = pool_rows(&keys)?;
            let losses = |a: &Adversary| match a {
                Adversary::Ga(d) => ga_losses(&pool_k, &pool_q, d, cfg.kq.real_class),
                Adversary::Ct(c) => ct_losses(&pool_k, &pool_q, c),
            };
            adv_opt.zero_grad();
            let adv_loss = losses(adv)?.adversary;
            if adv_loss.item().is_finite() {
                adv_loss.backward()?;
                adv_opt.step();
            }
            let gen = losses(adv)?.generator;
            let combined = combine(&total, &gen, &kq)?;
            report.kq = kq.weight * gen.item();
            report.total = combined.item();
            total = combined;
        }

        if !report.total.is_finite() {
            return Err(TrainError::NonFinite {
                step,
                last: log.last().copied(),
            });
        }
        opt.zero_grad();
        total.backward()?;
        opt.step();
        if step % 50 == 0 || step == 1 {
            debug!("{mode} step {step}: {report}");
        }
        log.push(report);
    }
    Ok(TrainOutput {
        student,
        projectors,
        adversary,
        log,
    })
}

/// Attention weights of the configured cross-model mode on one training
/// example, together with its alignment matrices.
pub fn example_attention(
    wb: &Workbench,
    teacher: &ModelState<f64>,
    student: &ModelState<f64>,
    projectors: &Projectors<f64>,
    index: usize,
) -> Result<(Attention<f64>, AlignmentMatrix), TrainError> {
    let mode = wb.cfg.train.mode;
    if !mode.uses_cross_model() {
        return Err(TrainError::Empty(format!("mode {mode} has no cross-model attention")));
    }
    let ex = wb
        .train
        .get(index)
        .ok_or_else(|| TrainError::Empty(format!("example {index} out of range (train has {})", wb.train.len())))?;
    let s = student.forward(&ex.student.ids, &ex.student.gold)?;
    let t = wb.teacher_output(teacher, index)?;
    let inputs = DualSpaceInputs {
        student: &s,
        teacher: &t,
        student_head: &student.head,
        teacher_head: &teacher.head,
        gold_s: &ex.student.gold,
        gold_t: &ex.teacher.gold,
        mask_s: &ex.student.mask,
        mask_t: &ex.teacher.mask,
    };
    let dual_cfg = DualSpaceConfig {
        mode: alignment_mode(mode),
        divergence: wb.cfg.divergence(),
        swap_kd_args: wb.cfg.train.swap_kd_args,
    };
    let l = dual_space_losses(&inputs, projectors, &dual_cfg, Some(&ex.alignment))?;
    Ok((l.weights, ex.alignment.clone()))
}

/// ROUGE-L of every scored example of one split.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitScores {
    pub split: String,
    pub scores: Vec<f64>,
    pub generations: Vec<String>,
}

impl SplitScores {
    pub fn mean(&self) -> f64 {
        if self.scores.is_empty() {
            0.0
        } else {
            self.scores.iter().sum::<f64>() / self.scores.len() as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub seed: u64,
    pub splits: Vec<SplitScores>,
}

impl EvalResult {
    /// Mean over every scored example of every split.
    pub fn overall(&self) -> f64 {
        let n: usize = self.splits.iter().map(|s| s.scores.len()).sum();
        if n == 0 {
            return 0.0;
        }
        self.splits.iter().flat_map(|s| &s.scores).sum::<f64>() / n as f64
    }

    pub fn split_mean(&self, name: &str) -> Option<f64> {
        self.splits.iter().find(|s| s.split == name).map(SplitScores::mean)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("seed,split,example,rouge_l\n");
        for sp in &self.splits {
            for (i, v) in sp.scores.iter().enumerate() {
                s.push_str(&format!("{},{},{},{}\n", self.seed, sp.split, i, v));
            }
        }
        s
    }

    pub fn report(&self) -> String {
        let mut s = format!("seed {}\n", self.seed);
        for sp in &self.splits {
            s.push_str(&format!("{:<10} n={:<4} rouge_l={:.4}\n", sp.split, sp.scores.len(), sp.mean()));
        }
        s.push_str(&format!("{:<10} rouge_l={:.4}\n", "overall", self.overall()));
        s
    }
}

/// Greedy-decodes every prompt of the configured splits and scores it
/// against the reference. The model is only read.
pub fn evaluate(wb: &Workbench, student: &ModelState<f64>, seed: u64) -> Result<EvalResult, TrainError> {
    let ev = &wb.cfg.eval;
    let eos = wb.student_vocab.specials().eos;
    let mut splits = Vec::new();
    for name in &ev.splits {
        let records = wb
            .corpus
            .split(name)
            .ok_or_else(|| TrainError::Empty(format!("unknown split '{name}'")))?;
        let n = if ev.limit == 0 { records.len() } else { ev.limit.min(records.len()) };
        let mut scores = Vec::with_capacity(n);
        let mut generations = Vec::with_capacity(n);
        for r in &records[..n] {
            let e = encode(&wb.student_vocab, r);
            let out = student.greedy_decode(e.prompt_ids(), ev.max_new_tokens, eos)?;
            let text = wb.student_vocab.decode(&out)?;
            scores.push(rouge_l(&text, &r.output));
            generations.push(text);
        }
        splits.push(SplitScores {
            split: name.clone(),
            scores,
            generations,
        });
    }
    Ok(EvalResult { seed, splits })
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-split mean and standard deviation across seeds.
pub fn aggregate(results: &[EvalResult]) -> Vec<(String, f64, f64)> {
    let Some(first) = results.first() else {
        return Vec::new();
    };
    first
        .splits
        .iter()
        .map(|sp| {
            let means: Vec<f64> = results.iter().filter_map(|r| r.split_mean(&sp.split)).collect();
            let (m, s) = mean_std(&means);
            (sp.split.clone(), m, s)
        })
        .collect()
}
