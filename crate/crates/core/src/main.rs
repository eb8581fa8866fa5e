use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::info;

use dskd_core::align::{align_chunks, BinaryMatrix};
use dskd_core::config::{Config, TrainMode};
use dskd_core::data::{generate_corpus, Corpus};
use dskd_core::harness::{evaluate, example_attention, train, Workbench, LOG_HEADER};
use dskd_core::io::{matrix_csv, matrix_pgm, Checkpoint};
use dskd_core::tensor::Tensor;
use dskd_core::tok::{TokenizerKind, Vocabulary};

const CONFIG_FILE: &str = "config.cfg";
const TEACHER_VOCAB: &str = "teacher.vocab";
const STUDENT_VOCAB: &str = "student.vocab";
const TEACHER_CKPT: &str = "teacher.ckpt";
const STUDENT_CKPT: &str = "student.ckpt";
const PROJECTORS_CKPT: &str = "projectors.ckpt";

#[derive(Parser)]
#[command(name = "dskd", version, about = "Cross-tokenizer distillation workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Configuration file (defaults apply to missing keys).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.steps=100` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed override (train.seed; data.seed for gen-data).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic corpus as four jsonl splits.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Learn a vocabulary from the training split.
    BuildVocab {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Which model's tokenizer settings to use.
        #[arg(long, default_value = "student", value_parser = ["teacher", "student"])]
        role: String,
        #[arg(long)]
        tokenizer: Option<TokenizerKind>,
        #[arg(long)]
        merges: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print token ids and pieces of a text.
    Tokenize {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        text: String,
    },
    /// Print aligned chunks `i j k l teacher_span student_span`.
    Align {
        #[arg(long)]
        teacher_vocab: PathBuf,
        #[arg(long)]
        student_vocab: PathBuf,
        #[arg(long)]
        text: String,
    },
    /// Pretrain (or reuse) the teacher, distill the student and evaluate it.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        mode: Option<TrainMode>,
        #[arg(long)]
        divergence: Option<String>,
        /// Reuse the teacher and vocabularies of an earlier run directory.
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Skip the evaluation after training.
        #[arg(long)]
        no_eval: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate the student of a run directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Seed recorded in the report (defaults to train.seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (defaults to the run directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export attention and alignment matrices of one training example.
    Heatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        example: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Failures reported with exit code 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn apply_overrides(cfg: &mut Config, overrides: &[String]) -> anyhow::Result<()> {
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got '{o}'")))?;
        cfg.set(k.trim(), v.trim()).map_err(|e| usage(format!("--set {k}: {e}")))?;
    }
    Ok(())
}

fn load_config(args: &ConfigArgs) -> anyhow::Result<Config> {
    let mut cfg = match &args.config {
        Some(p) => Config::load(p).map_err(|e| usage(format!("{}: {e}", p.display())))?,
        None => Config::default(),
    };
    apply_overrides(&mut cfg, &args.overrides)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn validated(cfg: Config) -> anyhow::Result<Config> {
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn escape(s: &str) -> String {
    s.escape_debug().to_string()
}

/// Configuration, vocabularies and models saved by `train`.
struct Run {
    wb: Workbench,
    teacher: dskd_core::Model64,
    student: dskd_core::Model64,
}

fn open_run(dir: &Path, overrides: &[String]) -> anyhow::Result<Run> {
    let cfg_path = dir.join(CONFIG_FILE);
    let mut cfg = Config::load(&cfg_path)?;
    apply_overrides(&mut cfg, overrides)?;
    let cfg = validated(cfg)?;
    let tv = Vocabulary::load(&dir.join(TEACHER_VOCAB)).with_context(|| format!("{}", dir.join(TEACHER_VOCAB).display()))?;
    let sv = Vocabulary::load(&dir.join(STUDENT_VOCAB)).with_context(|| format!("{}", dir.join(STUDENT_VOCAB).display()))?;
    let corpus = load_corpus(&cfg)?;
    let teacher = Checkpoint::load(&dir.join(TEACHER_CKPT))?.to_model(true)?;
    let student = Checkpoint::load(&dir.join(STUDENT_CKPT))?.to_model(true)?;
    let wb = Workbench::with_vocabs(cfg, corpus, tv, sv)?;
    Ok(Run { wb, teacher, student })
}

fn load_corpus(cfg: &Config) -> anyhow::Result<Corpus> {
    Ok(if cfg.data.dir.is_empty() {
        generate_corpus(cfg.data.seed, cfg.data.sizes)
    } else {
        Corpus::load_dir(Path::new(&cfg.data.dir))?
    })
}

fn gen_data(args: &ConfigArgs, out: &Path) -> anyhow::Result<()> {
    let mut cfg = load_config(&ConfigArgs {
        seed: None,
        config: args.config.clone(),
        overrides: args.overrides.clone(),
    })?;
    if let Some(seed) = args.seed {
        cfg.data.seed = seed;
    }
    let cfg = validated(cfg)?;
    let corpus = generate_corpus(cfg.data.seed, cfg.data.sizes);
    corpus.write_dir(out)?;
    println!("wrote {} records to {}", corpus.texts().len(), out.display());
    Ok(())
}

fn build_vocab(args: &ConfigArgs, role: &str, tokenizer: Option<TokenizerKind>, merges: Option<usize>, out: &Path) -> anyhow::Result<()> {
    let cfg = validated(load_config(args)?)?;
    let corpus = load_corpus(&cfg)?;
    let (kind, n) = if role == "teacher" {
        (cfg.teacher.model.tokenizer, cfg.teacher.model.merges)
    } else {
        (cfg.student.tokenizer, cfg.student.merges)
    };
    let texts: Vec<String> = corpus.train.iter().flat_map(|r| [r.prompt(), r.output.clone()]).collect();
    let vocab = Vocabulary::build(&texts, tokenizer.unwrap_or(kind), merges.unwrap_or(n))?;
    vocab.save(out)?;
    println!("{} tokens -> {}", vocab.size(), out.display());
    Ok(())
}

fn tokenize(vocab: &Path, text: &str) -> anyhow::Result<()> {
    let v = Vocabulary::load(vocab).with_context(|| format!("{}", vocab.display()))?;
    let t = v.tokenize(text);
    let mut out = std::io::stdout().lock();
    for (i, id) in t.ids.iter().enumerate() {
        writeln!(out, "{i}\t{id}\t{}", escape(&text[t.start_offset(i)..t.end_offsets[i]]))?;
    }
    Ok(())
}

fn align(teacher_vocab: &Path, student_vocab: &Path, text: &str) -> anyhow::Result<()> {
    let tv = Vocabulary::load(teacher_vocab).with_context(|| format!("{}", teacher_vocab.display()))?;
    let sv = Vocabulary::load(student_vocab).with_context(|| format!("{}", student_vocab.display()))?;
    let (tt, st) = (tv.tokenize(text), sv.tokenize(text));
    let chunks = align_chunks(&tt, &st)?;
    let mut out = std::io::stdout().lock();
    for q in chunks.quads() {
        let (i, j, k, l) = *q;
        let t_span = &text[tt.start_offset(i)..tt.end_offsets[j - 1]];
        let s_span = &text[st.start_offset(k)..st.end_offsets[l - 1]];
        writeln!(out, "{i}\t{j}\t{k}\t{l}\t{}\t{}", escape(t_span), escape(s_span))?;
    }
    Ok(())
}

fn run_train(
    args: &ConfigArgs,
    mode: Option<TrainMode>,
    divergence: Option<&str>,
    teacher_dir: Option<&Path>,
    no_eval: bool,
    out: &Path,
) -> anyhow::Result<()> {
    let mut cfg = load_config(args)?;
    if let Some(m) = mode {
        cfg.train.mode = m;
    }
    if let Some(d) = divergence {
        cfg.set("train.divergence", d).map_err(|e| usage(format!("--divergence: {e}")))?;
    }
    let cfg = validated(cfg)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let (wb, teacher) = match teacher_dir {
        Some(dir) => {
            let tv = Vocabulary::load(&dir.join(TEACHER_VOCAB)).with_context(|| format!("{}", dir.join(TEACHER_VOCAB).display()))?;
            let sv = Vocabulary::load(&dir.join(STUDENT_VOCAB)).with_context(|| format!("{}", dir.join(STUDENT_VOCAB).display()))?;
            let teacher = Checkpoint::load(&dir.join(TEACHER_CKPT))?.to_model(true)?;
            let corpus = load_corpus(&cfg)?;
            (Workbench::with_vocabs(cfg, corpus, tv, sv)?, teacher)
        }
        None => {
            let wb = Workbench::prepare(cfg)?;
            info!("pretraining teacher ({} steps)", wb.cfg.teacher.pretrain_steps);
            let (teacher, curve) = wb.pretrain_teacher()?;
            let mut s = String::from("step\tval_ce\n");
            for (step, ce) in curve {
                s.push_str(&format!("{step}\t{ce}\n"));
            }
            write(&out.join("teacher_val.tsv"), s)?;
            (wb, teacher)
        }
    };
    if wb.cfg.train.mode == TrainMode::SameTok && wb.teacher_vocab != wb.student_vocab {
        bail!("dskd-same-tok needs identical teacher and student vocabularies");
    }

    write(&out.join(CONFIG_FILE), wb.cfg.serialize())?;
    wb.teacher_vocab.save(&out.join(TEACHER_VOCAB))?;
    wb.student_vocab.save(&out.join(STUDENT_VOCAB))?;
    Checkpoint::from_model(&teacher).save(&out.join(TEACHER_CKPT))?;

    info!("training {} for {} steps", wb.cfg.train.mode, wb.cfg.train.steps);
    let result = train(&wb, &teacher)?;
    write(&out.join("train_log.tsv"), result.log_tsv())?;
    Checkpoint::from_model(&result.student).save(&out.join(STUDENT_CKPT))?;
    if wb.cfg.train.mode.uses_cross_model() {
        Checkpoint::from_projectors(&result.projectors).save(&out.join(PROJECTORS_CKPT))?;
    }
    if let Some(last) = result.log.last() {
        println!("{LOG_HEADER}");
        println!("{}", last.tsv_line(result.log.len()));
    }
    if !no_eval {
        let res = evaluate(&wb, &result.student, wb.cfg.train.seed)?;
        write(&out.join("eval.csv"), res.to_csv())?;
        write(&out.join("eval.txt"), res.report())?;
        print!("{}", res.report());
    }
    Ok(())
}

fn run_eval(dir: &Path, overrides: &[String], seed: Option<u64>, out: Option<&Path>) -> anyhow::Result<()> {
    let run = open_run(dir, overrides)?;
    let seed = seed.unwrap_or(run.wb.cfg.train.seed);
    let res = evaluate(&run.wb, &run.student, seed)?;
    let out = out.unwrap_or(dir);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write(&out.join("eval.csv"), res.to_csv())?;
    write(&out.join("eval.txt"), res.report())?;
    print!("{}", res.report());
    Ok(())
}

fn export(out: &Path, name: &str, rows: usize, cols: usize, data: &[f64]) -> anyhow::Result<()> {
    write(&out.join(format!("{name}.csv")), matrix_csv(rows, cols, data))?;
    write(&out.join(format!("{name}.pgm")), matrix_pgm(rows, cols, data))
}

fn tensor_export(out: &Path, name: &str, t: &Tensor<f64>) -> anyhow::Result<()> {
    let (r, c) = t.dims2()?;
    export(out, name, r, c, &t.to_vec())
}

fn binary_export(out: &Path, name: &str, m: &BinaryMatrix) -> anyhow::Result<()> {
    let data: Vec<f64> = m.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    export(out, name, m.rows, m.cols, &data)
}

fn heatmap(dir: &Path, example: usize, out: Option<&Path>) -> anyhow::Result<()> {
    let run = open_run(dir, &[])?;
    if !run.wb.cfg.train.mode.uses_cross_model() {
        return Err(usage(format!("mode {} has no cross-model attention", run.wb.cfg.train.mode)));
    }
    let projectors = Checkpoint::load(&dir.join(PROJECTORS_CKPT))?.to_projectors()?;
    if example >= run.wb.train.len() {
        return Err(usage(format!("--example {example} out of range (train has {} examples)", run.wb.train.len())));
    }
    let (att, m) = example_attention(&run.wb, &run.teacher, &run.student, &projectors, example)?;
    let out = out.unwrap_or(dir);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    tensor_export(out, "A_t2s", &att.t2s)?;
    tensor_export(out, "A_s2t", &att.s2t)?;
    binary_export(out, "M", &m.m_t2s)?;
    println!("wrote A_t2s, A_s2t and M (.csv, .pgm) to {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData { cfg, out } => gen_data(&cfg, &out),
        Command::BuildVocab { cfg, role, tokenizer, merges, out } => build_vocab(&cfg, &role, tokenizer, merges, &out),
        Command::Tokenize { vocab, text } => tokenize(&vocab, &text),
        Command::Align { teacher_vocab, student_vocab, text } => align(&teacher_vocab, &student_vocab, &text),
        Command::Train {
            cfg,
            mode,
            divergence,
            teacher,
            no_eval,
            out,
        } => run_train(&cfg, mode, divergence.as_deref(), teacher.as_deref(), no_eval, &out),
        Command::Eval {
            checkpoint,
            overrides,
            seed,
            out,
        } => run_eval(&checkpoint, &overrides, seed, out.as_deref()),
        Command::Heatmap { checkpoint, example, out } => heatmap(&checkpoint, example, out.as_deref()),
    }
}

/// The error chain without causes already quoted by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let c = cause.to_string();
        if !msg.contains(&c) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&c);
        }
    }
    msg
}

fn one_line(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("usage error");
            eprintln!("{}", one_line(first));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<std::io::Error>().is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&describe(&e)));
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
