//! Small decoder-only transformer with exact analytic gradients.
//!
//! Pre-norm blocks, learned positional embeddings, gain-only layer norm,
//! untied output head, everything in `f64`. The forward/backward pair is
//! written out by hand so gradients can be validated against central finite
//! differences, and training is bit-reproducible for a fixed seed, batch
//! order, and platform: batch gradients are accumulated over a fixed chunk
//! grid and summed in chunk order regardless of thread scheduling.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{TokenId, TokenSequence};

const LN_EPS: f64 = 1e-5;
/// Fixed gradient-accumulation grid; keeps reductions order-stable.
const GRAD_CHUNKS: usize = 8;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("token {0} out of range for vocab {1}")]
    TokenOutOfRange(u32, u32),
    #[error("sequence length {0} exceeds context length {1}")]
    ContextOverflow(usize, usize),
    #[error("empty sequence")]
    EmptySequence,
    #[error("sequence has no supervised position")]
    EmptyMask,
    #[error("position 0 cannot be supervised (no preceding context)")]
    UnsupervisedStart,
    #[error("non-finite {0} encountered")]
    NonFinite(&'static str),
    #[error("gradient length {0} does not match parameter count {1}")]
    GradientShape(usize, usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub context_length: usize,
    pub vocab_size: usize,
    pub init_scale: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.num_layers == 0 || self.model_dim == 0 || self.num_heads == 0 {
            return Err(ModelError::BadConfig("zero-sized dimension".into()));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.context_length == 0 || self.vocab_size == 0 {
            return Err(ModelError::BadConfig("empty context or vocab".into()));
        }
        if !self.init_scale.is_finite() || self.init_scale <= 0.0 {
            return Err(ModelError::BadConfig("init_scale must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

/// One named dense tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    /// Whether decoupled weight decay applies (weights yes; norm gains,
    /// biases, and embeddings no).
    pub decay: bool,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-layer offsets into the flat parameter vector.
#[derive(Debug, Clone, Copy)]
struct LayerOffsets {
    ln1_g: usize,
    qkv_w: usize,
    qkv_b: usize,
    proj_w: usize,
    proj_b: usize,
    ln2_g: usize,
    fc_w: usize,
    fc_b: usize,
    fcproj_w: usize,
    fcproj_b: usize,
}

#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub specs: Vec<TensorSpec>,
    pub total_len: usize,
    wte: usize,
    wpe: usize,
    layers: Vec<LayerOffsets>,
    lnf_g: usize,
    head_w: usize,
}

impl ParamLayout {
    pub fn for_config(cfg: &ModelConfig) -> ParamLayout {
        let d = cfg.model_dim;
        let v = cfg.vocab_size;
        let mut specs: Vec<TensorSpec> = Vec::new();
        let mut cursor = 0usize;
        let mut push = |name: String, shape: Vec<usize>, decay: bool, cursor: &mut usize| -> usize {
            let offset = *cursor;
            let len: usize = shape.iter().product();
            specs.push(TensorSpec {
                name,
                shape,
                offset,
                decay,
            });
            *cursor += len;
            offset
        };

        let wte = push("wte".into(), vec![v, d], false, &mut cursor);
        let wpe = push("wpe".into(), vec![cfg.context_length, d], false, &mut cursor);
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let ln1_g = push(format!("l{l}.ln1.g"), vec![d], false, &mut cursor);
            let qkv_w = push(format!("l{l}.attn.qkv.w"), vec![3 * d, d], true, &mut cursor);
            let qkv_b = push(format!("l{l}.attn.qkv.b"), vec![3 * d], false, &mut cursor);
            let proj_w = push(format!("l{l}.attn.proj.w"), vec![d, d], true, &mut cursor);
            let proj_b = push(format!("l{l}.attn.proj.b"), vec![d], false, &mut cursor);
            let ln2_g = push(format!("l{l}.ln2.g"), vec![d], false, &mut cursor);
            let fc_w = push(format!("l{l}.mlp.fc.w"), vec![4 * d, d], true, &mut cursor);
            let fc_b = push(format!("l{l}.mlp.fc.b"), vec![4 * d], false, &mut cursor);
            let fcproj_w = push(format!("l{l}.mlp.proj.w"), vec![d, 4 * d], true, &mut cursor);
            let fcproj_b = push(format!("l{l}.mlp.proj.b"), vec![d], false, &mut cursor);
            layers.push(LayerOffsets {
                ln1_g,
                qkv_w,
                qkv_b,
                proj_w,
                proj_b,
                ln2_g,
                fc_w,
                fc_b,
                fcproj_w,
                fcproj_b,
            });
        }
        let lnf_g = push("lnf.g".into(), vec![d], false, &mut cursor);
        let head_w = push("head.w".into(), vec![v, d], true, &mut cursor);

        ParamLayout {
            specs,
            total_len: cursor,
            wte,
            wpe,
            layers,
            lnf_g,
            head_w,
        }
    }
}

/// AdamW hyperparameters for one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimSettings {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimSettings {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Transformer parameters plus optimizer moments and step counter.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: Vec<f64>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    pub step: u64,
    layout: ParamLayout,
}

fn sample_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; u1 kept away from zero.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

impl ModelState {
    /// Fresh state: weights `N(0, init_scale)`, norm gains 1, biases 0.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = ParamLayout::for_config(&config);
        let mut params = vec![0.0; layout.total_len];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for spec in &layout.specs {
            let slice = &mut params[spec.offset..spec.offset + spec.len()];
            if spec.name.ends_with(".g") {
                slice.fill(1.0);
            } else if spec.name.ends_with(".b") {
                // biases stay zero
            } else {
                for p in slice.iter_mut() {
                    *p = sample_normal(&mut rng) * config.init_scale;
                }
            }
        }
        let n = layout.total_len;
        Ok(Self {
            config,
            params,
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
            step: 0,
            layout,
        })
    }

    /// Rebuild a state from raw parts (checkpoint loading).
    pub fn from_parts(
        config: ModelConfig,
        params: Vec<f64>,
        adam_m: Vec<f64>,
        adam_v: Vec<f64>,
        step: u64,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = ParamLayout::for_config(&config);
        for (label, v) in [("params", &params), ("adam_m", &adam_m), ("adam_v", &adam_v)] {
            if v.len() != layout.total_len {
                return Err(ModelError::Checkpoint(format!(
                    "{label} has {} values, layout wants {}",
                    v.len(),
                    layout.total_len
                )));
            }
        }
        Ok(Self {
            config,
            params,
            adam_m,
            adam_v,
            step,
            layout,
        })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.layout.total_len
    }

    /// View of one named tensor.
    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .specs
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.params[s.offset..s.offset + s.len()])
    }

    /// Mutable view of one named tensor.
    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let spec = self.layout.specs.iter().find(|s| s.name == name)?.clone();
        Some(&mut self.params[spec.offset..spec.offset + spec.len()])
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<(), ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        if tokens.len() > self.config.context_length {
            return Err(ModelError::ContextOverflow(
                tokens.len(),
                self.config.context_length,
            ));
        }
        for &t in tokens {
            if (t as usize) >= self.config.vocab_size {
                return Err(ModelError::TokenOutOfRange(t, self.config.vocab_size as u32));
            }
        }
        Ok(())
    }

    /// Logits for every position, flattened `[t * vocab + v]`. Causal: the
    /// row at position `t` depends only on tokens `0..=t`.
    pub fn forward(&self, tokens: &[TokenId]) -> Result<Vec<f64>, ModelError> {
        self.check_tokens(tokens)?;
        let cache = self.forward_cached(tokens);
        Ok(cache.logits)
    }

    /// Mean masked cross-entropy over the batch plus exact gradients, flat and
    /// aligned with `params`. Loss is averaged over all supervised positions.
    pub fn loss_and_grads(&self, batch: &[TokenSequence]) -> Result<(f64, Vec<f64>), ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        let mut supervised_total = 0usize;
        for seq in batch {
            self.check_tokens(&seq.tokens)?;
            if seq.loss_mask.len() != seq.tokens.len() {
                return Err(ModelError::GradientShape(seq.loss_mask.len(), seq.tokens.len()));
            }
            let count = seq.loss_mask.iter().filter(|&&m| m).count();
            if count == 0 {
                return Err(ModelError::EmptyMask);
            }
            if seq.loss_mask[0] {
                return Err(ModelError::UnsupervisedStart);
            }
            supervised_total += count;
        }

        // Fixed chunk grid; per-chunk sums are combined sequentially so the
        // result does not depend on thread scheduling.
        let chunk_size = batch.len().div_ceil(GRAD_CHUNKS);
        let partials: Vec<(f64, Vec<f64>)> = batch
            .par_chunks(chunk_size)
            .map(|chunk| {
                let mut grads = vec![0.0; self.layout.total_len];
                let mut loss = 0.0;
                for seq in chunk {
                    loss += self.accumulate_sequence(seq, supervised_total, &mut grads);
                }
                (loss, grads)
            })
            .collect();

        let mut grads = vec![0.0; self.layout.total_len];
        let mut loss = 0.0;
        for (partial_loss, partial_grads) in partials {
            loss += partial_loss;
            for (g, p) in grads.iter_mut().zip(&partial_grads) {
                *g += p;
            }
        }
        if !loss.is_finite() {
            return Err(ModelError::NonFinite("loss"));
        }
        Ok((loss, grads))
    }

    /// One decoupled-weight-decay Adam step; increments the step counter.
    pub fn adamw_step(&mut self, grads: &[f64], opt: &OptimSettings) -> Result<(), ModelError> {
        if grads.len() != self.params.len() {
            return Err(ModelError::GradientShape(grads.len(), self.params.len()));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(ModelError::NonFinite("gradient"));
        }
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - opt.beta1.powi(t);
        let bias2 = 1.0 - opt.beta2.powi(t);
        for spec in &self.layout.specs {
            let range = spec.offset..spec.offset + spec.len();
            let decay_factor = if spec.decay {
                1.0 - opt.lr * opt.weight_decay
            } else {
                1.0
            };
            for i in range {
                let g = grads[i];
                let m = opt.beta1 * self.adam_m[i] + (1.0 - opt.beta1) * g;
                let v = opt.beta2 * self.adam_v[i] + (1.0 - opt.beta2) * g * g;
                self.adam_m[i] = m;
                self.adam_v[i] = v;
                let m_hat = m / bias1;
                let v_hat = v / bias2;
                let p = self.params[i] * decay_factor;
                self.params[i] = p - opt.lr * m_hat / (v_hat.sqrt() + opt.eps);
            }
        }
        Ok(())
    }

    /// Greedy argmax decoding of exactly `num_answer_tokens` continuation
    /// tokens; ties break toward the lowest token id.
    pub fn greedy_answer(
        &self,
        prompt: &[TokenId],
        num_answer_tokens: usize,
    ) -> Result<Vec<TokenId>, ModelError> {
        self.check_tokens(prompt)?;
        if prompt.len() + num_answer_tokens > self.config.context_length {
            return Err(ModelError::ContextOverflow(
                prompt.len() + num_answer_tokens,
                self.config.context_length,
            ));
        }
        let mut tokens = prompt.to_vec();
        let mut answer = Vec::with_capacity(num_answer_tokens);
        for _ in 0..num_answer_tokens {
            let logits = self.forward(&tokens)?;
            let v = self.config.vocab_size;
            let last = &logits[(tokens.len() - 1) * v..tokens.len() * v];
            let mut best = 0usize;
            let mut best_score = f64::NEG_INFINITY;
            for (id, &score) in last.iter().enumerate() {
                if score > best_score {
                    best_score = score;
                    best = id;
                }
            }
            answer.push(best as TokenId);
            tokens.push(best as TokenId);
        }
        Ok(answer)
    }

    /// Forward one sequence, keeping every intermediate needed by backward.
    fn forward_cached(&self, tokens: &[TokenId]) -> SeqCache {
        let cfg = &self.config;
        let (d, v, h) = (cfg.model_dim, cfg.vocab_size, cfg.num_heads);
        let hd = cfg.head_dim();
        let t_len = tokens.len();
        let p = &self.params;
        let lay = &self.layout;

        let mut x = vec![0.0; t_len * d];
        for (t, &tok) in tokens.iter().enumerate() {
            let wte = &p[lay.wte + tok as usize * d..lay.wte + (tok as usize + 1) * d];
            let wpe = &p[lay.wpe + t * d..lay.wpe + (t + 1) * d];
            for i in 0..d {
                x[t * d + i] = wte[i] + wpe[i];
            }
        }
        let x0 = x.clone();

        let mut layers = Vec::with_capacity(cfg.num_layers);
        for off in &lay.layers {
            let mut lc = LayerCache::new(t_len, d, h);
            // ln1 -> qkv -> attention -> proj -> residual
            layernorm_forward(
                &x,
                &p[off.ln1_g..off.ln1_g + d],
                t_len,
                d,
                &mut lc.ln1_out,
                &mut lc.ln1_mean,
                &mut lc.ln1_rstd,
            );
            matmul_forward(
                &lc.ln1_out,
                &p[off.qkv_w..off.qkv_w + 3 * d * d],
                Some(&p[off.qkv_b..off.qkv_b + 3 * d]),
                t_len,
                d,
                3 * d,
                &mut lc.qkv,
            );
            attention_forward(&lc.qkv, t_len, d, h, hd, &mut lc.att, &mut lc.atty);
            let mut proj_out = vec![0.0; t_len * d];
            matmul_forward(
                &lc.atty,
                &p[off.proj_w..off.proj_w + d * d],
                Some(&p[off.proj_b..off.proj_b + d]),
                t_len,
                d,
                d,
                &mut proj_out,
            );
            for i in 0..t_len * d {
                lc.res2[i] = x[i] + proj_out[i];
            }
            // ln2 -> fc -> gelu -> proj -> residual
            layernorm_forward(
                &lc.res2,
                &p[off.ln2_g..off.ln2_g + d],
                t_len,
                d,
                &mut lc.ln2_out,
                &mut lc.ln2_mean,
                &mut lc.ln2_rstd,
            );
            matmul_forward(
                &lc.ln2_out,
                &p[off.fc_w..off.fc_w + 4 * d * d],
                Some(&p[off.fc_b..off.fc_b + 4 * d]),
                t_len,
                d,
                4 * d,
                &mut lc.fc_out,
            );
            gelu_forward(&lc.fc_out, &mut lc.gelu_out);
            let mut mlp_out = vec![0.0; t_len * d];
            matmul_forward(
                &lc.gelu_out,
                &p[off.fcproj_w..off.fcproj_w + d * 4 * d],
                Some(&p[off.fcproj_b..off.fcproj_b + d]),
                t_len,
                4 * d,
                d,
                &mut mlp_out,
            );
            for i in 0..t_len * d {
                lc.res3[i] = lc.res2[i] + mlp_out[i];
            }
            x.copy_from_slice(&lc.res3);
            layers.push(lc);
        }

        let mut lnf_out = vec![0.0; t_len * d];
        let mut lnf_mean = vec![0.0; t_len];
        let mut lnf_rstd = vec![0.0; t_len];
        layernorm_forward(
            &x,
            &p[lay.lnf_g..lay.lnf_g + d],
            t_len,
            d,
            &mut lnf_out,
            &mut lnf_mean,
            &mut lnf_rstd,
        );
        let mut logits = vec![0.0; t_len * v];
        matmul_forward(
            &lnf_out,
            &p[lay.head_w..lay.head_w + v * d],
            None,
            t_len,
            d,
            v,
            &mut logits,
        );

        SeqCache {
            x0,
            layers,
            lnf_out,
            lnf_mean,
            lnf_rstd,
            logits,
        }
    }

    /// Forward + backward for one sequence; adds this sequence's loss
    /// contribution to `grads` and returns it.
    fn accumulate_sequence(
        &self,
        seq: &TokenSequence,
        supervised_total: usize,
        grads: &mut [f64],
    ) -> f64 {
        let cfg = &self.config;
        let (d, v, h) = (cfg.model_dim, cfg.vocab_size, cfg.num_heads);
        let hd = cfg.head_dim();
        let t_len = seq.tokens.len();
        let p = &self.params;
        let lay = &self.layout;
        let cache = self.forward_cached(&seq.tokens);

        // Masked softmax cross-entropy; supervised token at position t is
        // predicted from the logits row at t-1.
        let inv_n = 1.0 / supervised_total as f64;
        let mut loss = 0.0;
        let mut dlogits = vec![0.0; t_len * v];
        for t in 1..t_len {
            if !seq.loss_mask[t] {
                continue;
            }
            let row = &cache.logits[(t - 1) * v..t * v];
            let target = seq.tokens[t] as usize;
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for &l in row {
                denom += (l - max).exp();
            }
            let log_prob = row[target] - max - denom.ln();
            loss -= log_prob * inv_n;
            let drow = &mut dlogits[(t - 1) * v..t * v];
            for (i, &l) in row.iter().enumerate() {
                let prob = (l - max).exp() / denom;
                drow[i] = (prob - f64::from(i == target)) * inv_n;
            }
        }

        // Head and final norm.
        let mut d_lnf_out = vec![0.0; t_len * d];
        matmul_backward(
            &dlogits,
            &cache.lnf_out,
            &p[lay.head_w..lay.head_w + v * d],
            t_len,
            d,
            v,
            &mut d_lnf_out,
            grads,
            lay.head_w,
            None,
        );
        let last_res = &cache.layers[cfg.num_layers - 1].res3;
        let mut dx = vec![0.0; t_len * d];
        layernorm_backward(
            &d_lnf_out,
            last_res,
            &p[lay.lnf_g..lay.lnf_g + d],
            &cache.lnf_mean,
            &cache.lnf_rstd,
            t_len,
            d,
            &mut dx,
            lay.lnf_g,
            grads,
        );

        // Blocks in reverse.
        for (l, off) in lay.layers.iter().enumerate().rev() {
            let lc = &cache.layers[l];
            let res_in: &[f64] = if l == 0 { &cache.x0 } else { &cache.layers[l - 1].res3 };

            // MLP branch: dx is d(res3) = d(res2) + d(mlp_out).
            let mut d_gelu = vec![0.0; t_len * 4 * d];
            matmul_backward(
                &dx,
                &lc.gelu_out,
                &p[off.fcproj_w..off.fcproj_w + d * 4 * d],
                t_len,
                4 * d,
                d,
                &mut d_gelu,
                grads,
                off.fcproj_w,
                Some(off.fcproj_b),
            );
            let mut d_fc = vec![0.0; t_len * 4 * d];
            gelu_backward(&d_gelu, &lc.fc_out, &mut d_fc);
            let mut d_ln2 = vec![0.0; t_len * d];
            matmul_backward(
                &d_fc,
                &lc.ln2_out,
                &p[off.fc_w..off.fc_w + 4 * d * d],
                t_len,
                d,
                4 * d,
                &mut d_ln2,
                grads,
                off.fc_w,
                Some(off.fc_b),
            );
            let mut d_res2 = vec![0.0; t_len * d];
            layernorm_backward(
                &d_ln2,
                &lc.res2,
                &p[off.ln2_g..off.ln2_g + d],
                &lc.ln2_mean,
                &lc.ln2_rstd,
                t_len,
                d,
                &mut d_res2,
                off.ln2_g,
                grads,
            );
            for i in 0..t_len * d {
                d_res2[i] += dx[i];
            }

            // Attention branch: d_res2 is d(res2) = d(x_in) + d(proj_out).
            let mut d_atty = vec![0.0; t_len * d];
            matmul_backward(
                &d_res2,
                &lc.atty,
                &p[off.proj_w..off.proj_w + d * d],
                t_len,
                d,
                d,
                &mut d_atty,
                grads,
                off.proj_w,
                Some(off.proj_b),
            );
            let mut d_qkv = vec![0.0; t_len * 3 * d];
            attention_backward(&d_atty, &lc.qkv, &lc.att, t_len, d, h, hd, &mut d_qkv);
            let mut d_ln1 = vec![0.0; t_len * d];
            matmul_backward(
                &d_qkv,
                &lc.ln1_out,
                &p[off.qkv_w..off.qkv_w + 3 * d * d],
                t_len,
                d,
                3 * d,
                &mut d_ln1,
                grads,
                off.qkv_w,
                Some(off.qkv_b),
            );
            let mut d_in = vec![0.0; t_len * d];
            layernorm_backward(
                &d_ln1,
                res_in,
                &p[off.ln1_g..off.ln1_g + d],
                &lc.ln1_mean,
                &lc.ln1_rstd,
                t_len,
                d,
                &mut d_in,
                off.ln1_g,
                grads,
            );
            for i in 0..t_len * d {
                dx[i] = d_res2[i] + d_in[i];
            }
        }

        // Embeddings.
        for (t, &tok) in seq.tokens.iter().enumerate() {
            let wte_g = lay.wte + tok as usize * d;
            let wpe_g = lay.wpe + t * d;
            for i in 0..d {
                grads[wte_g + i] += dx[t * d + i];
                grads[wpe_g + i] += dx[t * d + i];
            }
        }
        loss
    }
}

/// Per-sequence activation cache.
struct SeqCache {
    x0: Vec<f64>,
    layers: Vec<LayerCache>,
    lnf_out: Vec<f64>,
    lnf_mean: Vec<f64>,
    lnf_rstd: Vec<f64>,
    logits: Vec<f64>,
}

struct LayerCache {
    ln1_out: Vec<f64>,
    ln1_mean: Vec<f64>,
    ln1_rstd: Vec<f64>,
    qkv: Vec<f64>,
    att: Vec<f64>,
    atty: Vec<f64>,
    res2: Vec<f64>,
    ln2_out: Vec<f64>,
    ln2_mean: Vec<f64>,
    ln2_rstd: Vec<f64>,
    fc_out: Vec<f64>,
    gelu_out: Vec<f64>,
    res3: Vec<f64>,
}

impl LayerCache {
    fn new(t: usize, d: usize, h: usize) -> Self {
        Self {
            ln1_out: vec![0.0; t * d],
            ln1_mean: vec![0.0; t],
            ln1_rstd: vec![0.0; t],
            qkv: vec![0.0; t * 3 * d],
            att: vec![0.0; h * t * t],
            atty: vec![0.0; t * d],
            res2: vec![0.0; t * d],
            ln2_out: vec![0.0; t * d],
            ln2_mean: vec![0.0; t],
            ln2_rstd: vec![0.0; t],
            fc_out: vec![0.0; t * 4 * d],
            gelu_out: vec![0.0; t * 4 * d],
            res3: vec![0.0; t * d],
        }
    }
}

/// `out[t, o] = sum_i in[t, i] * w[o, i] (+ b[o])`
fn matmul_forward(
    input: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    t_len: usize,
    in_dim: usize,
    out_dim: usize,
    out: &mut [f64],
) {
    for t in 0..t_len {
        let x = &input[t * in_dim..(t + 1) * in_dim];
        let row_out = &mut out[t * out_dim..(t + 1) * out_dim];
        for o in 0..out_dim {
            let w_row = &w[o * in_dim..(o + 1) * in_dim];
            let mut acc = 0.0;
            for i in 0..in_dim {
                acc += x[i] * w_row[i];
            }
            row_out[o] = acc + bias.map_or(0.0, |b| b[o]);
        }
    }
}

/// Backward for [`matmul_forward`]. Weight (and optional bias) gradients
/// accumulate straight into the flat grad vector at the given offsets.
#[allow(clippy::too_many_arguments)]
fn matmul_backward(
    d_out: &[f64],
    input: &[f64],
    w: &[f64],
    t_len: usize,
    in_dim: usize,
    out_dim: usize,
    d_input: &mut [f64],
    grads: &mut [f64],
    w_offset: usize,
    bias_offset: Option<usize>,
) {
    for t in 0..t_len {
        let dy = &d_out[t * out_dim..(t + 1) * out_dim];
        let x = &input[t * in_dim..(t + 1) * in_dim];
        let dx = &mut d_input[t * in_dim..(t + 1) * in_dim];
        for o in 0..out_dim {
            let g = dy[o];
            if g == 0.0 {
                continue;
            }
            let w_row = &w[o * in_dim..(o + 1) * in_dim];
            let dw_row = &mut grads[w_offset + o * in_dim..w_offset + (o + 1) * in_dim];
            for i in 0..in_dim {
                dx[i] += g * w_row[i];
                dw_row[i] += g * x[i];
            }
            if let Some(b_off) = bias_offset {
                grads[b_off + o] += g;
            }
        }
    }
}

/// `y[t, i] = (x[t, i] - mean_t) * rstd_t * g[i]`
fn layernorm_forward(
    x: &[f64],
    gain: &[f64],
    t_len: usize,
    d: usize,
    out: &mut [f64],
    means: &mut [f64],
    rstds: &mut [f64],
) {
    for t in 0..t_len {
        let row = &x[t * d..(t + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        means[t] = mean;
        rstds[t] = rstd;
        let y = &mut out[t * d..(t + 1) * d];
        for i in 0..d {
            y[i] = (row[i] - mean) * rstd * gain[i];
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn layernorm_backward(
    d_out: &[f64],
    x: &[f64],
    gain: &[f64],
    means: &[f64],
    rstds: &[f64],
    t_len: usize,
    d: usize,
    d_x: &mut [f64],
    gain_offset: usize,
    grads: &mut [f64],
) {
    let inv_d = 1.0 / d as f64;
    for t in 0..t_len {
        let dy = &d_out[t * d..(t + 1) * d];
        let row = &x[t * d..(t + 1) * d];
        let (mean, rstd) = (means[t], rstds[t]);
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for i in 0..d {
            let xhat = (row[i] - mean) * rstd;
            let dxhat = dy[i] * gain[i];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
            grads[gain_offset + i] += dy[i] * xhat;
        }
        let dx_row = &mut d_x[t * d..(t + 1) * d];
        for i in 0..d {
            let xhat = (row[i] - mean) * rstd;
            let dxhat = dy[i] * gain[i];
            dx_row[i] += rstd * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
        }
    }
}

/// Causal multi-head attention over a packed `[q | k | v]` buffer.
fn attention_forward(
    qkv: &[f64],
    t_len: usize,
    d: usize,
    heads: usize,
    hd: usize,
    att: &mut [f64],
    atty: &mut [f64],
) {
    let scale = 1.0 / (hd as f64).sqrt();
    for h in 0..heads {
        for t in 0..t_len {
            let q = &qkv[t * 3 * d + h * hd..t * 3 * d + (h + 1) * hd];
            // Scores over s <= t, softmax in place.
            let base = h * t_len * t_len + t * t_len;
            let mut max = f64::NEG_INFINITY;
            for s in 0..=t {
                let k = &qkv[s * 3 * d + d + h * hd..s * 3 * d + d + (h + 1) * hd];
                let mut dot = 0.0;
                for j in 0..hd {
                    dot += q[j] * k[j];
                }
                let score = dot * scale;
                att[base + s] = score;
                max = max.max(score);
            }
            let mut denom = 0.0;
            for s in 0..=t {
                let e = (att[base + s] - max).exp();
                att[base + s] = e;
                denom += e;
            }
            for s in 0..=t {
                att[base + s] /= denom;
            }
            let out = &mut atty[t * d + h * hd..t * d + (h + 1) * hd];
            out.fill(0.0);
            for s in 0..=t {
                let a = att[base + s];
                let v = &qkv[s * 3 * d + 2 * d + h * hd..s * 3 * d + 2 * d + (h + 1) * hd];
                for j in 0..hd {
                    out[j] += a * v[j];
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    d_atty: &[f64],
    qkv: &[f64],
    att: &[f64],
    t_len: usize,
    d: usize,
    heads: usize,
    hd: usize,
    d_qkv: &mut [f64],
) {
    let scale = 1.0 / (hd as f64).sqrt();
    let mut d_att = vec![0.0; t_len];
    for h in 0..heads {
        for t in 0..t_len {
            let base = h * t_len * t_len + t * t_len;
            let dy = &d_atty[t * d + h * hd..t * d + (h + 1) * hd];
            // datt[s] = dy . v_s ; dv_s += att[s] * dy
            for s in 0..=t {
                let v_off = s * 3 * d + 2 * d + h * hd;
                let mut dot = 0.0;
                for j in 0..hd {
                    dot += dy[j] * qkv[v_off + j];
                    d_qkv[v_off + j] += att[base + s] * dy[j];
                }
                d_att[s] = dot;
            }
            // Softmax backward.
            let mut inner = 0.0;
            for s in 0..=t {
                inner += att[base + s] * d_att[s];
            }
            // dq / dk through the scaled dot products.
            let q_off = t * 3 * d + h * hd;
            for s in 0..=t {
                let dscore = att[base + s] * (d_att[s] - inner) * scale;
                if dscore == 0.0 {
                    continue;
                }
                let k_off = s * 3 * d + d + h * hd;
                for j in 0..hd {
                    d_qkv[q_off + j] += dscore * qkv[k_off + j];
                    d_qkv[k_off + j] += dscore * qkv[q_off + j];
                }
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_forward(x: &[f64], out: &mut [f64]) {
    for (o, &v) in out.iter_mut().zip(x) {
        let u = GELU_C * (v + GELU_A * v * v * v);
        *o = 0.5 * v * (1.0 + u.tanh());
    }
}

fn gelu_backward(d_out: &[f64], x: &[f64], d_x: &mut [f64]) {
    for i in 0..x.len() {
        let v = x[i];
        let u = GELU_C * (v + GELU_A * v * v * v);
        let tanh_u = u.tanh();
        let sech2 = 1.0 - tanh_u * tanh_u;
        let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
        d_x[i] = d_out[i] * (0.5 * (1.0 + tanh_u) + 0.5 * v * sech2 * du);
    }
}
