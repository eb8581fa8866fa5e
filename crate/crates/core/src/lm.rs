//! Tiny pre-LN decoder-only language models.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::nn::{self, constant_init, normal_init, Linear};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error, PartialEq)]
pub enum LmError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence of length {len} exceeds max_seq {max}")]
    TooLong { len: usize, max: usize },
    #[error("ids and gold differ in length ({ids} vs {gold})")]
    LengthMismatch { ids: usize, gold: usize },
    #[error("empty sequence")]
    Empty,
    #[error("token id {id} out of range for vocabulary {vocab}")]
    BadToken { id: usize, vocab: usize },
    #[error("loss mask selects no positions")]
    EmptyMask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), LmError> {
        if self.vocab_size == 0 || self.hidden_dim == 0 || self.num_layers == 0 || self.num_heads == 0 || self.max_seq == 0 {
            return Err(LmError::Config("all dimensions must be positive".into()));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(LmError::Config(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.hidden_dim < 2 {
            return Err(LmError::Config("hidden_dim must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Block<T: Scalar> {
    pub ln1_gain: Tensor<T>,
    pub ln1_bias: Tensor<T>,
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub out: Linear<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_bias: Tensor<T>,
    pub mlp_in: Linear<T>,
    pub mlp_out: Linear<T>,
}

impl<T: Scalar> Block<T> {
    fn params(&self) -> Vec<Tensor<T>> {
        let mut p = vec![self.ln1_gain.clone(), self.ln1_bias.clone()];
        for l in [&self.query, &self.key, &self.value, &self.out] {
            p.extend(l.params());
        }
        p.push(self.ln2_gain.clone());
        p.push(self.ln2_bias.clone());
        p.extend(self.mlp_in.params());
        p.extend(self.mlp_out.params());
        p
    }
}

/// Parameters of one model. A frozen model's tensors never track gradients.
#[derive(Debug, Clone)]
pub struct ModelState<T: Scalar> {
    pub config: ModelConfig,
    pub token_embedding: Tensor<T>,
    pub position_embedding: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub final_gain: Tensor<T>,
    pub final_bias: Tensor<T>,
    /// Prediction head `d × V` (no bias).
    pub head: Tensor<T>,
    pub frozen: bool,
}

/// Everything the distillation losses read from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T: Scalar> {
    /// Final-layer (post-norm) hidden states, `n × d`.
    pub hidden: Tensor<T>,
    /// Token embeddings of the inputs, `n × d`.
    pub input_embeds: Tensor<T>,
    /// Token embeddings of the gold next tokens, `n × d`.
    pub target_embeds: Tensor<T>,
    /// `n × V`.
    pub logits: Tensor<T>,
}

impl<T: Scalar> ModelState<T> {
    pub fn new(config: ModelConfig, frozen: bool) -> Result<Self, LmError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.hidden_dim;
        let residual_std = (1.0 / d as f64).sqrt() / (2.0 * config.num_layers as f64).sqrt();
        let token_embedding = normal_init(&mut rng, &[config.vocab_size, d], 0.1, frozen);
        let position_embedding = normal_init(&mut rng, &[config.max_seq, d], 0.1, frozen);
        let mut blocks = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            let std = (1.0 / d as f64).sqrt();
            blocks.push(Block {
                ln1_gain: constant_init(&[1, d], 1.0, frozen),
                ln1_bias: constant_init(&[1, d], 0.0, frozen),
                query: Linear::new(&mut rng, d, d, std, frozen),
                key: Linear::new(&mut rng, d, d, std, frozen),
                value: Linear::new(&mut rng, d, d, std, frozen),
                out: Linear::new(&mut rng, d, d, residual_std, frozen),
                ln2_gain: constant_init(&[1, d], 1.0, frozen),
                ln2_bias: constant_init(&[1, d], 0.0, frozen),
                mlp_in: Linear::new(&mut rng, d, 4 * d, std, frozen),
                mlp_out: Linear::new(&mut rng, 4 * d, d, residual_std / 2.0, frozen),
            });
        }
        Ok(ModelState {
            config,
            token_embedding,
            position_embedding,
            blocks,
            final_gain: constant_init(&[1, d], 1.0, frozen),
            final_bias: constant_init(&[1, d], 0.0, frozen),
            head: normal_init(&mut rng, &[d, config.vocab_size], (1.0 / d as f64).sqrt(), frozen),
            frozen,
        })
    }

    /// All parameters in declaration order.
    pub fn params(&self) -> Vec<Tensor<T>> {
        let mut p = vec![self.token_embedding.clone(), self.position_embedding.clone()];
        for b in &self.blocks {
            p.extend(b.params());
        }
        p.push(self.final_gain.clone());
        p.push(self.final_bias.clone());
        p.push(self.head.clone());
        p
    }

    pub fn checksum(&self) -> u64 {
        nn::checksum(&self.params())
    }

    /// Copy with every parameter turned into a constant.
    pub fn frozen_copy(&self) -> Self {
        let params: Vec<Tensor<T>> = self.params().iter().map(Tensor::detach).collect();
        let mut out = self.clone();
        out.frozen = true;
        out.assign(&params).expect("same layout");
        out
    }

    /// Rebinds every parameter slot, in declaration order.
    pub fn assign(&mut self, params: &[Tensor<T>]) -> Result<(), LmError> {
        let expected = self.params();
        if expected.len() != params.len() || expected.iter().zip(params).any(|(a, b)| a.shape() != b.shape()) {
            return Err(LmError::Config("parameter layout does not match the model config".into()));
        }
        let mut it = params.iter().cloned();
        let mut next = || it.next().expect("length checked");
        self.token_embedding = next();
        self.position_embedding = next();
        for b in &mut self.blocks {
            b.ln1_gain = next();
            b.ln1_bias = next();
            for l in [&mut b.query, &mut b.key, &mut b.value, &mut b.out] {
                l.weight = next();
                l.bias = next();
            }
            b.ln2_gain = next();
            b.ln2_bias = next();
            b.mlp_in.weight = next();
            b.mlp_in.bias = next();
            b.mlp_out.weight = next();
            b.mlp_out.bias = next();
        }
        self.final_gain = next();
        self.final_bias = next();
        self.head = next();
        Ok(())
    }

    fn check_ids(&self, ids: &[usize]) -> Result<(), LmError> {
        if ids.is_empty() {
            return Err(LmError::Empty);
        }
        if ids.len() > self.config.max_seq {
            return Err(LmError::TooLong {
                len: ids.len(),
                max: self.config.max_seq,
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(LmError::BadToken {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Embeddings through all blocks and the final norm.
    fn trunk(&self, ids: &[usize]) -> Result<(Tensor<T>, Tensor<T>), LmError> {
        self.check_ids(ids)?;
        let n = ids.len();
        let positions: Vec<usize> = (0..n).collect();
        let input_embeds = self.token_embedding.gather_rows(ids)?;
        let mut x = input_embeds.add(&self.position_embedding.gather_rows(&positions)?)?;
        let causal: Vec<bool> = (0..n * n).map(|idx| idx % n <= idx / n).collect();
        let d = self.config.hidden_dim;
        let heads = self.config.num_heads;
        let dh = d / heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        for b in &self.blocks {
            let h = x.layer_norm_rows()?.mul_row(&b.ln1_gain)?.add_row(&b.ln1_bias)?;
            let q = b.query.forward(&h)?;
            let k = b.key.forward(&h)?;
            let v = b.value.forward(&h)?;
            let mut merged: Option<Tensor<T>> = None;
            for head in 0..heads {
                let qh = q.slice_cols(head * dh, dh)?;
                let kh = k.slice_cols(head * dh, dh)?;
                let vh = v.slice_cols(head * dh, dh)?;
                let scores = qh.matmul(&kh.transpose()?)?.scale(scale);
                let att = scores.softmax_rows(Some(&causal))?;
                let oh = att.matmul(&vh)?;
                merged = Some(match merged {
                    None => oh,
                    Some(m) => m.concat_cols(&oh)?,
                });
            }
            let attn = b.out.forward(&merged.expect("at least one head"))?;
            x = x.add(&attn)?;
            let h2 = x.layer_norm_rows()?.mul_row(&b.ln2_gain)?.add_row(&b.ln2_bias)?;
            let mlp = b.mlp_out.forward(&b.mlp_in.forward(&h2)?.gelu())?;
            x = x.add(&mlp)?;
        }
        let hidden = x.layer_norm_rows()?.mul_row(&self.final_gain)?.add_row(&self.final_bias)?;
        Ok((hidden, input_embeds))
    }

    /// Causal forward over `ids`, with `gold[p]` the next-token target of
    /// position `p`.
    pub fn forward(&self, ids: &[usize], gold: &[usize]) -> Result<ForwardOutput<T>, LmError> {
        if ids.len() != gold.len() {
            return Err(LmError::LengthMismatch {
                ids: ids.len(),
                gold: gold.len(),
            });
        }
        self.check_ids(gold)?;
        let (hidden, input_embeds) = self.trunk(ids)?;
        let logits = hidden.matmul(&self.head)?;
        let target_embeds = self.token_embedding.gather_rows(gold)?;
        Ok(ForwardOutput {
            hidden,
            input_embeds,
            target_embeds,
            logits,
        })
    }

    pub fn logits(&self, ids: &[usize]) -> Result<Tensor<T>, LmError> {
        let (hidden, _) = self.trunk(ids)?;
        Ok(hidden.matmul(&self.head)?)
    }

    /// Argmax decoding (ties to the lowest id) until `eos`, `max_new` tokens,
    /// or the context is full. The returned ids exclude `eos`.
    pub fn greedy_decode(&self, prompt: &[usize], max_new: usize, eos: usize) -> Result<Vec<usize>, LmError> {
        self.check_ids(prompt)?;
        let mut ids = prompt.to_vec();
        let mut generated = Vec::new();
        while generated.len() < max_new && ids.len() < self.config.max_seq {
            let logits = self.logits(&ids)?;
            let last = logits.row(ids.len() - 1);
            let mut best = 0;
            for (j, &v) in last.iter().enumerate() {
                if v > last[best] {
                    best = j;
                }
            }
            if best == eos {
                break;
            }
            generated.push(best);
            ids.push(best);
        }
        Ok(generated)
    }
}

/// Mean next-token negative log-likelihood over positions where `mask` is set.
pub fn ce_loss<T: Scalar>(logits: &Tensor<T>, gold: &[usize], mask: &[bool]) -> Result<Tensor<T>, LmError> {
    let (n, _) = logits.dims2()?;
    if gold.len() != n || mask.len() != n {
        return Err(LmError::LengthMismatch { ids: n, gold: gold.len() });
    }
    let rows: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
    if rows.is_empty() {
        return Err(LmError::EmptyMask);
    }
    let targets: Vec<usize> = rows.iter().map(|&i| gold[i]).collect();
    let picked = logits.gather_rows(&rows)?.log_softmax_rows()?.pick(&targets)?;
    Ok(picked.mean().scale(-T::one()))
}
