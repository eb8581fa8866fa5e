#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use dskd_core::align::{build_matrices, AlignmentMatrix, ChunkSet, Quad};
use dskd_core::cma::{dual_space_losses, AlignmentMode, DualSpaceConfig, DualSpaceInputs, Projectors};
use dskd_core::config::Config;
use dskd_core::div::{Divergence, DivergenceKind};
use dskd_core::kq::{combine, ct_losses, discriminator_accuracy, ga_losses, Critic, Discriminator, KqKind, KqMode, RealClass};
use dskd_core::optim::Adam;
use dskd_core::lm::{ce_loss, ModelConfig, ModelState};
use dskd_core::rouge::words;
use dskd_core::tensor::Tensor;
use dskd_core::tok::{Tokenization, Vocabulary};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-3;
/// Below this magnitude the gradient check compares absolute errors.
pub const FD_ABS_FLOOR: f64 = 1e-6;
/// Elements probed per parameter tensor.
pub const FD_SAMPLES: usize = 12;

pub fn rand_param(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::param((0..n).map(|_| rng.gen_range(-1.5..1.5)).collect(), shape).unwrap()
}

pub fn rand_const(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(), shape).unwrap()
}

/// Worst central-difference error over a random sample of the elements of
/// each parameter.
pub fn fd_check(rng: &mut ChaCha8Rng, params: &[Tensor<f64>], f: impl Fn() -> Tensor<f64>) -> f64 {
    fd_check_with(rng, params, &f, || f().item())
}

/// As [`fd_check`], with the analytic gradient taken from `graph` and the
/// numeric one from `value`. Stop-gradient objectives need this: `value`
/// holds the detached quantities at the base point.
pub fn fd_check_with(rng: &mut ChaCha8Rng, params: &[Tensor<f64>], graph: impl Fn() -> Tensor<f64>, value: impl Fn() -> f64) -> f64 {
    for p in params {
        p.zero_grad();
    }
    graph().backward().unwrap();
    let mut worst: f64 = 0.0;
    for p in params {
        let analytic = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
        let picks: Vec<usize> = if p.numel() <= FD_SAMPLES {
            (0..p.numel()).collect()
        } else {
            (0..FD_SAMPLES).map(|_| rng.gen_range(0..p.numel())).collect()
        };
        for i in picks {
            let orig = p.data()[i];
            p.update_data(|d| d[i] = orig + FD_STEP);
            let up = value();
            p.update_data(|d| d[i] = orig - FD_STEP);
            let down = value();
            p.update_data(|d| d[i] = orig);
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic[i];
            let err = if a.abs().max(numeric.abs()) < FD_ABS_FLOOR {
                (a - numeric).abs()
            } else {
                (a - numeric).abs() / a.abs().max(numeric.abs())
            };
            worst = worst.max(err);
        }
    }
    for p in params {
        p.zero_grad();
    }
    worst
}

/// Splits `n_t` teacher and `n_s` student positions into matching runs of
/// non-empty segments.
pub fn random_chunks(rng: &mut ChaCha8Rng, n_t: usize, n_s: usize) -> ChunkSet {
    let c = rng.gen_range(1..=n_t.min(n_s));
    let cuts = |rng: &mut ChaCha8Rng, n: usize| {
        let mut inner: Vec<usize> = (1..n).collect();
        for i in (1..inner.len()).rev() {
            inner.swap(i, rng.gen_range(0..=i));
        }
        let mut chosen: Vec<usize> = inner[..c - 1].to_vec();
        chosen.sort_unstable();
        chosen.push(n);
        chosen
    };
    let (ct, cs) = (cuts(rng, n_t), cuts(rng, n_s));
    let mut quads = Vec::with_capacity(c);
    let (mut i, mut k) = (0, 0);
    for (&j, &l) in ct.iter().zip(&cs) {
        quads.push((i, j, k, l));
        i = j;
        k = l;
    }
    ChunkSet::from_quads(quads)
}

pub fn tiny_model(vocab: usize, dim: usize, seed: u64, frozen: bool) -> ModelState<f64> {
    let cfg = ModelConfig {
        vocab_size: vocab,
        hidden_dim: dim,
        num_layers: 1,
        num_heads: 2,
        max_seq: 12,
        seed,
    };
    ModelState::new(cfg, frozen).unwrap()
}

/// A small student/teacher pair with random sequences, masks and alignment.
pub struct GraphFixture {
    pub student: ModelState<f64>,
    pub teacher: ModelState<f64>,
    pub projectors: Projectors<f64>,
    pub ids_s: Vec<usize>,
    pub gold_s: Vec<usize>,
    pub mask_s: Vec<bool>,
    pub ids_t: Vec<usize>,
    pub gold_t: Vec<usize>,
    pub mask_t: Vec<bool>,
    pub alignment: AlignmentMatrix,
}

impl GraphFixture {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (v_s, v_t, d_s, d_t) = (9, 11, 6, 8);
        let n_s = rng.gen_range(4..8);
        let n_t = rng.gen_range(3..n_s + 1);
        let ids = |rng: &mut ChaCha8Rng, n: usize, v: usize| (0..n).map(|_| rng.gen_range(0..v)).collect::<Vec<_>>();
        let ids_s = ids(&mut rng, n_s, v_s);
        let gold_s = ids(&mut rng, n_s, v_s);
        let ids_t = ids(&mut rng, n_t, v_t);
        let gold_t = ids(&mut rng, n_t, v_t);
        let mask_s: Vec<bool> = (0..n_s).map(|p| p >= 1).collect();
        let mask_t: Vec<bool> = (0..n_t).map(|p| p >= 1).collect();
        let chunks = random_chunks(&mut rng, n_t, n_s);
        let alignment = build_matrices(&chunks, n_t, n_s).unwrap();
        GraphFixture {
            student: tiny_model(v_s, d_s, seed ^ 0xa5, false),
            teacher: tiny_model(v_t, d_t, seed ^ 0x5a, true),
            projectors: Projectors::new(d_s, d_t, seed ^ 0x77),
            ids_s,
            gold_s,
            mask_s,
            ids_t,
            gold_t,
            mask_t,
            alignment,
        }
    }

    pub fn trainable(&self) -> Vec<Tensor<f64>> {
        let mut p = self.student.params();
        p.extend(self.projectors.params());
        p
    }

    /// Queries, keys and the dual-space total of one forward pass.
    pub fn dual(&self, mode: AlignmentMode, kind: DivergenceKind) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        let (q, k, total, _) = self.run(mode, kind, None);
        (q, k, total)
    }

    /// The values the objective treats as constants, at the current
    /// parameters.
    pub fn freeze(&self, mode: AlignmentMode, kind: DivergenceKind) -> Frozen {
        let s = self.student.forward(&self.ids_s, &self.gold_s).unwrap();
        let (_, _, _, q_t2s) = self.run(mode, kind, None);
        Frozen {
            input_embeds: s.input_embeds.detach(),
            target_embeds: s.target_embeds.detach(),
            q_t2s: q_t2s.detach(),
            divergence: Divergence::new(kind),
        }
    }

    /// Queries, keys and the total with every stop-gradient input held at
    /// its frozen value. Matches [`Self::dual`] at the freezing point.
    pub fn dual_frozen(&self, mode: AlignmentMode, frozen: &Frozen) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        let (q, k, total, _) = self.run(mode, frozen.divergence.kind, Some(frozen));
        (q, k, total)
    }

    fn run(&self, mode: AlignmentMode, kind: DivergenceKind, frozen: Option<&Frozen>) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        let mut s = self.student.forward(&self.ids_s, &self.gold_s).unwrap();
        if let Some(f) = frozen {
            s.input_embeds = f.input_embeds.clone();
            s.target_embeds = f.target_embeds.clone();
        }
        let t = self.teacher.forward(&self.ids_t, &self.gold_t).unwrap();
        let inputs = DualSpaceInputs {
            student: &s,
            teacher: &t,
            student_head: &self.student.head,
            teacher_head: &self.teacher.head,
            gold_s: &self.gold_s,
            gold_t: &self.gold_t,
            mask_s: &self.mask_s,
            mask_t: &self.mask_t,
        };
        let div = Divergence::new(kind);
        let cfg = DualSpaceConfig {
            mode,
            divergence: div,
            swap_kd_args: false,
        };
        let l = dual_space_losses(&inputs, &self.projectors, &cfg, Some(&self.alignment)).unwrap();
        let mut total = l.total().unwrap();
        if let Some(f) = frozen {
            let p_s = s.logits.softmax_rows(None).unwrap();
            let fixed = div.compute(&p_s, &f.q_t2s, &self.mask_s).unwrap();
            total = total.sub(&l.kd_t2s.scale(0.5)).unwrap().add(&fixed.scale(0.5)).unwrap();
        }
        (l.q, l.k, total, l.q_t2s)
    }
}

/// Stop-gradient inputs of the dual-space objective captured at one point.
pub struct Frozen {
    pub input_embeds: Tensor<f64>,
    pub target_embeds: Tensor<f64>,
    pub q_t2s: Tensor<f64>,
    pub divergence: Divergence,
}

fn softmax_pair(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> (Tensor<f64>, Tensor<f64>) {
    (rand_param(rng, &[rows, cols]), rand_param(rng, &[rows, cols]))
}

/// Finite-difference errors of every differentiable building block and the
/// full training objectives for one seed.
pub fn gradient_suite(seed: u64) -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let a = rand_param(&mut rng, &[3, 4]);
    let b = rand_param(&mut rng, &[3, 4]);
    let r = rand_param(&mut rng, &[1, 4]);
    let w = rand_const(&mut rng, &[3, 4]);
    let mask: Vec<bool> = (0..12).map(|i| i % 3 != 1).collect();
    let ops: Vec<(&str, Box<dyn Fn() -> Tensor<f64>>)> = vec![
        ("add", Box::new(|| a.add(&b).unwrap().mul(&w).unwrap().sum())),
        ("sub", Box::new(|| a.sub(&b).unwrap().mul(&w).unwrap().sum())),
        ("mul", Box::new(|| a.mul(&b).unwrap().mul(&w).unwrap().sum())),
        ("div", Box::new(|| a.div(&b.abs().add_scalar(0.5)).unwrap().mul(&w).unwrap().sum())),
        ("scale", Box::new(|| a.scale(-1.3).mul(&w).unwrap().sum())),
        ("add_scalar", Box::new(|| a.add_scalar(0.7).mul(&a).unwrap().sum())),
        ("matmul", Box::new(|| a.matmul(&b.transpose().unwrap()).unwrap().exp().sum())),
        ("transpose", Box::new(|| a.transpose().unwrap().matmul(&w).unwrap().sum())),
        ("concat_cols", Box::new(|| a.concat_cols(&b).unwrap().mul(&w.concat_cols(&w).unwrap()).unwrap().sum())),
        ("concat_rows", Box::new(|| a.concat_rows(&b).unwrap().mul(&w.concat_rows(&w).unwrap()).unwrap().sum())),
        ("slice_cols", Box::new(|| a.slice_cols(1, 2).unwrap().mul(&w.slice_cols(0, 2).unwrap()).unwrap().sum())),
        ("gather_rows", Box::new(|| a.gather_rows(&[2, 0, 2]).unwrap().mul(&w).unwrap().sum())),
        ("pick", Box::new(|| a.pick(&[0, 3, 1]).unwrap().exp().sum())),
        ("log", Box::new(|| a.abs().add_scalar(0.1).log().mul(&w).unwrap().sum())),
        ("exp", Box::new(|| a.exp().mul(&w).unwrap().sum())),
        ("sigmoid", Box::new(|| a.sigmoid().mul(&w).unwrap().sum())),
        ("tanh", Box::new(|| a.tanh().mul(&w).unwrap().sum())),
        ("gelu", Box::new(|| a.gelu().mul(&w).unwrap().sum())),
        ("leaky_relu", Box::new(|| a.leaky_relu(0.2).mul(&w).unwrap().sum())),
        ("clamp", Box::new(|| a.clamp(-1.0, 1.0).mul(&w).unwrap().sum())),
        ("clamp_min", Box::new(|| a.clamp_min(-0.5).mul(&w).unwrap().sum())),
        ("mean", Box::new(|| a.mul(&b).unwrap().mean())),
        ("sum_rows", Box::new(|| a.sum_rows().unwrap().exp().sum())),
        ("add_row", Box::new(|| a.add_row(&r).unwrap().mul(&w).unwrap().sum())),
        ("mul_row", Box::new(|| a.mul_row(&r).unwrap().mul(&w).unwrap().sum())),
        ("mul_scalar_tensor", Box::new(|| a.mul_scalar_tensor(&r.slice_cols(2, 1).unwrap()).unwrap().mul(&w).unwrap().sum())),
        ("affine", Box::new(|| a.affine(&b.transpose().unwrap(), &r.slice_cols(0, 3).unwrap()).unwrap().exp().sum())),
        ("softmax", Box::new(|| a.softmax_rows(None).unwrap().mul(&w).unwrap().sum())),
        ("softmax_masked", Box::new(|| a.softmax_rows(Some(&mask)).unwrap().mul(&w).unwrap().sum())),
        ("log_softmax", Box::new(|| a.log_softmax_rows().unwrap().mul(&w).unwrap().sum())),
        ("std_normalize", Box::new(|| a.std_normalize_rows().unwrap().mul(&w).unwrap().sum())),
        ("layer_norm", Box::new(|| a.layer_norm_rows().unwrap().mul(&w).unwrap().sum())),
        ("l2_normalize", Box::new(|| a.l2_normalize_rows().unwrap().mul(&w).unwrap().sum())),
    ];
    let leaves = [a.clone(), b.clone(), r.clone()];
    for (name, f) in ops {
        out.push((name.to_string(), fd_check(&mut rng, &leaves, f)));
    }

    let (x, y) = softmax_pair(&mut rng, 4, 5);
    let row_mask = [true, false, true, true];
    for kind in DivergenceKind::ALL {
        let div = Divergence::new(kind);
        let f = || {
            let p = x.softmax_rows(None).unwrap();
            let q = y.softmax_rows(None).unwrap();
            div.compute(&p, &q, &row_mask).unwrap()
        };
        out.push((format!("div_{}", kind.name()), fd_check(&mut rng, &[x.clone(), y.clone()], f)));
    }
    let gold = [1usize, 4, 0, 2];
    out.push(("ce_loss".into(), fd_check(&mut rng, &[x.clone()], || ce_loss(&x, &gold, &row_mask).unwrap())));

    let fx = GraphFixture::new(seed);
    let student_params = fx.student.params();
    out.push((
        "lm_forward".into(),
        fd_check(&mut rng, &student_params, || {
            let s = fx.student.forward(&fx.ids_s, &fx.gold_s).unwrap();
            ce_loss(&s.logits, &fx.gold_s, &fx.mask_s).unwrap()
        }),
    ));

    let trainable = fx.trainable();
    for mode in [AlignmentMode::Cma, AlignmentMode::Clp, AlignmentMode::Cla] {
        let kind = DivergenceKind::ALL[rng.gen_range(0..DivergenceKind::ALL.len())];
        let frozen = fx.freeze(mode, kind);
        let err = fd_check_with(&mut rng, &trainable, || fx.dual(mode, kind).2, || fx.dual_frozen(mode, &frozen).2.item());
        out.push((format!("dual_{}_{}", mode.name(), kind.name()), err));
    }

    let width = 2 * fx.teacher.config.hidden_dim;
    let disc = Discriminator::new(&mut rng, width);
    let ga = KqMode::new(KqKind::Ga, 0.5 + rng.gen::<f64>()).unwrap();
    let real = if seed % 2 == 0 { RealClass::Queries } else { RealClass::Keys };
    let frozen = fx.freeze(AlignmentMode::Cma, DivergenceKind::Skl);
    let ga_total = |(q, k, total): (Tensor<f64>, Tensor<f64>, Tensor<f64>)| {
        let gen = ga_losses(&k, &q, &disc, real).unwrap().generator;
        combine(&total, &gen, &ga).unwrap()
    };
    out.push((
        "dual_ga_generator".into(),
        fd_check_with(
            &mut rng,
            &trainable,
            || ga_total(fx.dual(AlignmentMode::Cma, DivergenceKind::Skl)),
            || ga_total(fx.dual_frozen(AlignmentMode::Cma, &frozen)).item(),
        ),
    ));
    out.push((
        "ga_discriminator".into(),
        fd_check(&mut rng, &disc.params(), || {
            let (q, k, _) = fx.dual(AlignmentMode::Cma, DivergenceKind::Skl);
            ga_losses(&k, &q, &disc, real).unwrap().adversary
        }),
    ));

    let critic = Critic::new(&mut rng, width);
    let ct = KqMode::new(KqKind::Ct, 0.5 + rng.gen::<f64>()).unwrap();
    let frozen = fx.freeze(AlignmentMode::Cma, DivergenceKind::Kl);
    let ct_total = |(q, k, total): (Tensor<f64>, Tensor<f64>, Tensor<f64>)| {
        let gen = ct_losses(&k, &q, &critic).unwrap().generator;
        combine(&total, &gen, &ct).unwrap()
    };
    out.push((
        "dual_ct_generator".into(),
        fd_check_with(
            &mut rng,
            &trainable,
            || ct_total(fx.dual(AlignmentMode::Cma, DivergenceKind::Kl)),
            || ct_total(fx.dual_frozen(AlignmentMode::Cma, &frozen)).item(),
        ),
    ));
    out.push((
        "ct_critic".into(),
        fd_check(&mut rng, &critic.params(), || {
            let (q, k, _) = fx.dual(AlignmentMode::Cma, DivergenceKind::Kl);
            ct_losses(&k, &q, &critic).unwrap().adversary
        }),
    ));
    out
}

/// Chunks from every pair of prefixes whose decoded bytes coincide, cut
/// between consecutive matches.
pub fn brute_force_chunks(tv: &Vocabulary, t: &Tokenization, sv: &Vocabulary, s: &Tokenization) -> Vec<Quad> {
    let prefixes = |v: &Vocabulary, tok: &Tokenization| -> Vec<Vec<u8>> {
        (0..=tok.ids.len()).map(|n| v.decode_bytes(&tok.ids[..n]).unwrap()).collect()
    };
    let (pt, ps) = (prefixes(tv, t), prefixes(sv, s));
    let mut matches = Vec::new();
    for (a, x) in pt.iter().enumerate() {
        for (b, y) in ps.iter().enumerate() {
            if x == y {
                matches.push((a, b));
            }
        }
    }
    matches.windows(2).map(|w| (w[0].0, w[1].0, w[0].1, w[1].1)).collect()
}

/// ROUGE-L F1 through a full LCS table.
pub fn rouge_l_oracle(candidate: &str, reference: &str) -> f64 {
    let (c, r) = (words(candidate), words(reference));
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let mut table = vec![vec![0usize; r.len() + 1]; c.len() + 1];
    for i in 1..=c.len() {
        for j in 1..=r.len() {
            table[i][j] = if c[i - 1] == r[j - 1] {
                table[i - 1][j - 1] + 1
            } else {
                table[i - 1][j].max(table[i][j - 1])
            };
        }
    }
    let lcs = table[c.len()][r.len()] as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / c.len() as f64;
    let rc = lcs / r.len() as f64;
    2.0 * p * rc / (p + rc)
}

/// Desk-scale configuration for pipeline tests: small corpus, short teacher
/// pretraining.
pub fn quick_config() -> Config {
    let mut cfg = Config::default();
    for (k, v) in [
        ("data.train", "120"),
        ("data.val", "20"),
        ("data.test_id", "10"),
        ("data.test_ood", "10"),
        ("model.teacher.pretrain_steps", "60"),
        ("model.teacher.eval_every", "30"),
        ("train.steps", "20"),
        ("train.batch_size", "4"),
        ("eval.max_new_tokens", "8"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, shift: f64) -> Tensor<f64> {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal) + shift).collect();
    Tensor::new(data, &[rows, cols]).unwrap()
}

/// Held-out accuracy of a discriminator trained on fresh samples each step.
pub fn trained_accuracy(seed: u64, shift: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = 8;
    let disc = Discriminator::<f64>::new(&mut rng, width);
    let mut opt = Adam::new(disc.params(), 1e-2);
    for _ in 0..300 {
        let keys = gaussian(&mut rng, 32, width, 0.0);
        let queries = gaussian(&mut rng, 32, width, shift);
        opt.zero_grad();
        ga_losses(&keys, &queries, &disc, RealClass::Queries).unwrap().adversary.backward().unwrap();
        opt.step();
    }
    let keys = gaussian(&mut rng, 1000, width, 0.0);
    let queries = gaussian(&mut rng, 1000, width, shift);
    discriminator_accuracy(&keys, &queries, &disc, RealClass::Queries).unwrap()
}
