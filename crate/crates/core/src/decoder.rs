//! Masked autoregressive token decoder: predicts categorical distributions
//! over the codebook for unknown grid positions, conditioned on committed
//! tokens and the position-aligned condition features, and commits a
//! scheduled number of positions per step.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoders::ConditionFeatures;
use crate::error::{Error, Result};
use crate::nn::{self, Binder, Init, ParamStore, Tv};
use crate::tensor::{Graph, Scalar, Tensor};
use crate::tokenizer::TokenGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheduler {
    Linear,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Order {
    Random,
    Raster,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    Argmax,
    Temperature(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GenerationConfig {
    pub steps: usize,
    pub scheduler: Scheduler,
    pub order: Order,
    pub sampling: Sampling,
    /// Drives the position permutation and any sampling randomness.
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            steps: 16,
            scheduler: Scheduler::Cosine,
            order: Order::Random,
            sampling: Sampling::Argmax,
            seed: 0,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::InvalidArgument(
                "generation needs at least one step".into(),
            ));
        }
        if let Sampling::Temperature(tau) = self.sampling {
            if !(tau > 0.0) || !tau.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "temperature must be positive and finite, got {tau}"
                )));
            }
        }
        Ok(())
    }
}

/// Tokens to commit at each step. Linear splits as evenly as possible with
/// the remainder on the earliest steps. Cosine follows
/// `m(k) = ceil(N cos(pi k / 2K))` masked-after-step counts with
/// `m(K) = 0`; the raw differences can wobble by one around ties of the
/// ceiling, so the counts are sorted ascending afterwards, which keeps the
/// sum and makes the sequence non-decreasing without changing any already
/// monotone schedule.
pub fn plan_schedule(n: usize, steps: usize, scheduler: Scheduler) -> Result<Vec<usize>> {
    if steps < 1 || steps > n {
        return Err(Error::InvalidArgument(format!(
            "step count {steps} outside [1, {n}]"
        )));
    }
    let counts = match scheduler {
        Scheduler::Linear => {
            let q = n / steps;
            let r = n % steps;
            (0..steps).map(|k| q + usize::from(k < r)).collect()
        }
        Scheduler::Cosine => {
            let masked_after = |k: usize| -> usize {
                if k == steps {
                    0
                } else {
                    let c = (std::f64::consts::PI * k as f64 / (2.0 * steps as f64)).cos();
                    (n as f64 * c).ceil() as usize
                }
            };
            let mut counts: Vec<usize> =
                (1..=steps).map(|k| masked_after(k - 1) - masked_after(k)).collect();
            counts.sort_unstable();
            counts
        }
    };
    debug_assert_eq!(counts.iter().sum::<usize>(), n);
    Ok(counts)
}

/// Visit order over the `n` grid positions.
pub fn plan_order(n: usize, order: Order, seed: u64) -> Vec<usize> {
    let mut positions: Vec<usize> = (0..n).collect();
    if order == Order::Random {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        positions.shuffle(&mut rng);
    }
    positions
}

/// Fully resolved schedule: which positions commit at which step.
#[derive(Debug, Clone)]
pub struct StepPlan {
    counts: Vec<usize>,
    order: Vec<usize>,
}

impl StepPlan {
    pub fn new(n: usize, config: &GenerationConfig) -> Result<Self> {
        config.validate()?;
        Ok(StepPlan {
            counts: plan_schedule(n, config.steps, config.scheduler)?,
            order: plan_order(n, config.order, config.seed),
        })
    }

    pub fn steps(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Positions committed at `step`.
    pub fn positions(&self, step: usize) -> &[usize] {
        let start: usize = self.counts[..step].iter().sum();
        &self.order[start..start + self.counts[step]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DecoderConfig {
    /// Model width D.
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Codebook size (output logit count).
    pub vocab: usize,
    /// Codebook entry dimension (token-embedding input).
    pub code_dim: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            width: 128,
            heads: 4,
            blocks: 6,
            vocab: 512,
            code_dim: 32,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0
            || self.heads == 0
            || self.blocks == 0
            || self.vocab < 2
            || self.code_dim == 0
        {
            return Err(Error::InvalidArgument(
                "decoder width, heads, blocks, code dim must be positive and vocab >= 2".into(),
            ));
        }
        if self.width % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

/// Checkpoint prefix for decoder parameters.
pub const DECODER_PREFIX: &str = "dec";

/// Parameters: token-embedding projection from codebook vectors, learned
/// mask-token embedding, positional table, shared condition projection,
/// transformer blocks, and the logit head (small-variance init so the
/// initial distribution is near uniform).
pub fn init_decoder<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    positions: usize,
    config: &DecoderConfig,
) -> Result<()> {
    config.validate()?;
    let d = config.width;
    nn::init_linear(
        store,
        rng,
        &format!("{DECODER_PREFIX}.tok_proj"),
        config.code_dim,
        d,
        Init::Xavier,
    )?;
    store.insert(
        &format!("{DECODER_PREFIX}.mask"),
        nn::random_tensor(rng, &[1, d], Init::Normal(0.02)),
    )?;
    store.insert(
        &format!("{DECODER_PREFIX}.pos"),
        nn::random_tensor(rng, &[positions, d], Init::Normal(0.02)),
    )?;
    nn::init_linear(store, rng, &format!("{DECODER_PREFIX}.cond"), d, d, Init::Xavier)?;
    for i in 0..config.blocks {
        nn::init_encoder_block(store, rng, &format!("{DECODER_PREFIX}.blk{i}"), d, 4 * d)?;
    }
    nn::init_layer_norm(store, &format!("{DECODER_PREFIX}.head_ln"), d)?;
    store.insert(
        &format!("{DECODER_PREFIX}.head.w"),
        nn::random_tensor(rng, &[d, config.vocab], Init::Normal(0.02)),
    )?;
    store.insert(&format!("{DECODER_PREFIX}.head.b"), Tensor::zeros(&[config.vocab]))
}

/// Build the decoder graph. `code_rows` is `(B, T, code_dim)` holding the
/// codebook vector at known positions and zeros elsewhere; `known`
/// is `(B, T, D)` with all-ones rows at known positions; `unknown_col` is
/// `(B*T, 1)` marking unknown positions. `cond` is `(B, T, D)`. The
/// projected condition feature is added to the hidden state after each
/// block; the head returns `(B, T, vocab)` logits.
pub fn decoder_tower<T: Scalar>(
    b: &mut Binder<T>,
    code_rows: &Tv,
    known: &Tv,
    unknown_col: &Tv,
    cond: &Tv,
    config: &DecoderConfig,
) -> Result<Tv> {
    config.validate()?;
    let d = config.width;
    if cond.rank() != 3 || cond.shape[2] != d {
        return Err(Error::ShapeMismatch(format!(
            "condition features must be (B, T, {d}), got {:?}",
            cond.shape
        )));
    }
    let (batch, t) = (cond.shape[0], cond.shape[1]);
    if code_rows.shape != [batch, t, config.code_dim]
        || known.shape != [batch, t, d]
        || unknown_col.shape != [batch * t, 1]
    {
        return Err(Error::ShapeMismatch(format!(
            "decoder inputs disagree: codes {:?}, known {:?}, unknown {:?} for B={batch} T={t}",
            code_rows.shape, known.shape, unknown_col.shape
        )));
    }
    let (pos, pos_shape) = b.fetch(&format!("{DECODER_PREFIX}.pos"))?;
    if pos_shape != [t, d] {
        return Err(Error::ShapeMismatch(format!(
            "positional table is {pos_shape:?}, expected [{t}, {d}]"
        )));
    }

    let emb = nn::linear(b, code_rows, &format!("{DECODER_PREFIX}.tok_proj"))?;
    let emb = b.g.mul(emb.var, known.var);
    let (mask_tok, _) = b.fetch(&format!("{DECODER_PREFIX}.mask"))?;
    let mt = b.g.matmul(unknown_col.var, mask_tok);
    let mt = b.g.reshape(mt, &[batch, t, d]);
    let x = b.g.add(emb, mt);
    let x = b.g.add_broadcast(x, pos);
    let mut x = Tv::new(x, &[batch, t, d]);

    let cp = nn::linear(b, cond, &format!("{DECODER_PREFIX}.cond"))?;
    for i in 0..config.blocks {
        x = nn::encoder_block(b, &x, &format!("{DECODER_PREFIX}.blk{i}"), config.heads)?;
        x = Tv::new(b.g.add(x.var, cp.var), &x.shape);
    }
    let x = nn::layer_norm(b, &x, &format!("{DECODER_PREFIX}.head_ln"))?;
    nn::linear(b, &x, &format!("{DECODER_PREFIX}.head"))
}

/// Host-side helper: the three decoder input tensors for a batch of
/// partially known grids. `known[b][i] = Some(id)` marks a committed
/// token.
pub fn decoder_inputs<T: Scalar>(
    codebook: &Tensor<T>,
    known: &[&[Option<usize>]],
    width: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let batch = known.len();
    if batch == 0 || known[0].is_empty() {
        return Err(Error::InvalidArgument("empty decoder input".into()));
    }
    let t = known[0].len();
    if codebook.rank() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "codebook must be (K, d), got {:?}",
            codebook.shape()
        )));
    }
    let (vocab, code_dim) = (codebook.shape()[0], codebook.shape()[1]);
    let mut codes = vec![T::ZERO; batch * t * code_dim];
    let mut known3 = vec![T::ZERO; batch * t * width];
    let mut unknown = vec![T::ZERO; batch * t];
    for (bi, grid) in known.iter().enumerate() {
        if grid.len() != t {
            return Err(Error::ShapeMismatch(
                "grids in a batch must share a length".into(),
            ));
        }
        for (i, slot) in grid.iter().enumerate() {
            let row = bi * t + i;
            match slot {
                Some(id) => {
                    if *id >= vocab {
                        return Err(Error::TokenOutOfRange {
                            index: *id,
                            size: vocab,
                        });
                    }
                    codes[row * code_dim..(row + 1) * code_dim]
                        .copy_from_slice(&codebook.data()[id * code_dim..(id + 1) * code_dim]);
                    known3[row * width..(row + 1) * width].fill(T::ONE);
                }
                None => unknown[row] = T::ONE,
            }
        }
    }
    Ok((
        Tensor::from_vec(&[batch, t, code_dim], codes)?,
        Tensor::from_vec(&[batch, t, width], known3)?,
        Tensor::from_vec(&[batch * t, 1], unknown)?,
    ))
}

/// One forward pass: logits `(h, w, vocab)` for a single partially known
/// grid.
pub fn decoder_forward(
    store: &ParamStore<f32>,
    config: &DecoderConfig,
    codebook: &Tensor<f32>,
    known: &[Option<usize>],
    cond: &ConditionFeatures,
) -> Result<Tensor<f32>> {
    let (h, w, d) = (cond.height(), cond.width(), cond.dim());
    if known.len() != h * w {
        return Err(Error::ShapeMismatch(format!(
            "{} known slots for a {h}x{w} grid",
            known.len()
        )));
    }
    let (codes, known3, unknown) = decoder_inputs(codebook, &[known], config.width)?;
    let mut g: Graph<f32> = Graph::new();
    let mut b = Binder::new(&mut g, store);
    let codes_v = b.g.leaf(codes);
    let known_v = b.g.leaf(known3);
    let unknown_v = b.g.leaf(unknown);
    let cond_v = b.g.input("cond");
    let logits = decoder_tower(
        &mut b,
        &Tv::new(codes_v, &[1, h * w, config.code_dim]),
        &Tv::new(known_v, &[1, h * w, config.width]),
        &Tv::new(unknown_v, &[h * w, 1]),
        &Tv::new(cond_v, &[1, h * w, d]),
        config,
    )?;
    g.eval(&[("cond", &cond.tensor().reshaped(&[1, h * w, d])?)])?;
    g.value(logits.var).reshaped(&[h, w, config.vocab])
}

/// Mean negative log-likelihood of `gt` token ids over the positions where
/// `predict` is set. `logits` is `(.., vocab)` with one row per position.
pub fn ar_nll_loss(logits: &Tensor<f32>, gt: &[usize], predict: &[bool]) -> Result<f64> {
    let vocab = *logits.shape().last().ok_or_else(|| {
        Error::ShapeMismatch("logits must have a vocabulary axis".into())
    })?;
    let rows = logits.numel() / vocab;
    if gt.len() != rows || predict.len() != rows {
        return Err(Error::ShapeMismatch(format!(
            "{rows} logit rows vs {} targets / {} mask entries",
            gt.len(),
            predict.len()
        )));
    }
    let mut total = 0.0f64;
    let mut count = 0usize;
    for row in 0..rows {
        if !predict[row] {
            continue;
        }
        if gt[row] >= vocab {
            return Err(Error::TokenOutOfRange {
                index: gt[row],
                size: vocab,
            });
        }
        let slice = &logits.data()[row * vocab..(row + 1) * vocab];
        let max = slice.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let lse = max
            + slice
                .iter()
                .map(|&v| (v as f64 - max).exp())
                .sum::<f64>()
                .ln();
        total += lse - slice[gt[row]] as f64;
        count += 1;
    }
    if count == 0 {
        return Err(Error::InvalidArgument(
            "no positions selected for the loss".into(),
        ));
    }
    Ok(total / count as f64)
}

/// Pick a token from one position's logits.
pub fn sample_token(logits: &[f32], sampling: Sampling, rng: &mut ChaCha8Rng) -> Result<usize> {
    if logits.is_empty() || logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sampling logits".into()));
    }
    match sampling {
        Sampling::Argmax => {
            let mut best = 0usize;
            for (i, &v) in logits.iter().enumerate() {
                if v > logits[best] {
                    best = i;
                }
            }
            Ok(best)
        }
        Sampling::Temperature(tau) => {
            if !(tau > 0.0) || !tau.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "temperature must be positive and finite, got {tau}"
                )));
            }
            let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let weights: Vec<f64> = logits
                .iter()
                .map(|&v| ((v as f64 - max) / tau).exp())
                .collect();
            let total: f64 = weights.iter().sum();
            let mut u = rng.gen_range(0.0..1.0) * total;
            for (i, w) in weights.iter().enumerate() {
                u -= w;
                if u <= 0.0 {
                    return Ok(i);
                }
            }
            Ok(weights.len() - 1)
        }
    }
}

/// Iterative masked decoding: run the forward pass, commit the scheduled
/// positions, repeat until every position holds a token. Committed tokens
/// never change.
pub fn generate(
    store: &ParamStore<f32>,
    config: &DecoderConfig,
    codebook: &Tensor<f32>,
    cond: &ConditionFeatures,
    gen: &GenerationConfig,
) -> Result<TokenGrid> {
    let (h, w) = (cond.height(), cond.width());
    let n = h * w;
    if gen.steps > n {
        return Err(Error::InvalidArgument(format!(
            "{} steps for {n} positions",
            gen.steps
        )));
    }
    let plan = StepPlan::new(n, gen)?;
    let mut rng = ChaCha8Rng::seed_from_u64(gen.seed ^ 0x7031_7175_u64);
    let mut known: Vec<Option<usize>> = vec![None; n];
    for step in 0..plan.steps() {
        let logits = decoder_forward(store, config, codebook, &known, cond)?;
        let flat = logits.reshaped(&[n, config.vocab])?;
        for &pos in plan.positions(step) {
            debug_assert!(known[pos].is_none(), "position committed twice");
            let row = &flat.data()[pos * config.vocab..(pos + 1) * config.vocab];
            known[pos] = Some(sample_token(row, gen.sampling, &mut rng)?);
        }
    }
    let ids: Vec<usize> = known
        .into_iter()
        .map(|slot| slot.expect("schedule covers every position"))
        .collect();
    TokenGrid::new(h, w, config.vocab, ids)
}
