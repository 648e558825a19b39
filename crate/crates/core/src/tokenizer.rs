//! Discrete tokenizer for coordinate maps: a small VQ-VAE.
//!
//! A 4-channel coordinate map (xyz + validity) is encoded by two strided
//! patch-embedding stages into a latent grid, each cell is snapped to its
//! nearest codebook entry, and a mirrored decoder reconstructs the map from
//! the chosen entries. Downstream, the token grid is what the generative
//! model predicts; the decoder here turns predicted tokens back into dense
//! coordinates.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::RocMap;
use crate::nn::{self, Binder, Init, ParamStore, Tv};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Width of the half-resolution feature stage.
const STAGE1_WIDTH: usize = 96;
/// Width of the pre-latent feature stage.
const STAGE2_WIDTH: usize = 192;

/// A codebook entry unused for this many consecutive training steps gets
/// re-seeded from a live encoder output.
pub const DEAD_CODE_STEPS: u64 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TokenizerConfig {
    /// Spatial downsampling factor; must be a perfect square (two equal
    /// strided stages).
    #[serde(rename = "f")]
    pub downsample: usize,
    #[serde(rename = "K")]
    pub codebook_size: usize,
    #[serde(rename = "d")]
    pub latent_dim: usize,
    /// Commitment weight in the training loss.
    pub beta: f64,
    pub input_channels: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            downsample: 16,
            codebook_size: 512,
            latent_dim: 32,
            beta: 0.25,
            input_channels: 4,
        }
    }
}

impl TokenizerConfig {
    /// Per-stage stride: the integer square root of the downsample factor.
    pub fn stride(&self) -> Result<usize> {
        let s = (self.downsample as f64).sqrt().round() as usize;
        if s < 2 || s * s != self.downsample {
            return Err(Error::InvalidArgument(format!(
                "downsample factor {} is not a perfect square >= 4",
                self.downsample
            )));
        }
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.stride()?;
        if self.codebook_size < 2 {
            return Err(Error::InvalidArgument(format!(
                "codebook needs at least 2 entries, got {}",
                self.codebook_size
            )));
        }
        if self.latent_dim == 0 {
            return Err(Error::InvalidArgument("latent dim must be positive".into()));
        }
        if self.input_channels != 4 {
            return Err(Error::InvalidArgument(format!(
                "coordinate maps are 4-channel; got input_channels = {}",
                self.input_channels
            )));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "commitment weight must be finite and >= 0, got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

/// A grid of discrete code indices, each in `[0, vocab)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGrid {
    height: usize,
    width: usize,
    vocab: usize,
    ids: Vec<usize>,
}

impl TokenGrid {
    pub fn new(height: usize, width: usize, vocab: usize, ids: Vec<usize>) -> Result<Self> {
        if ids.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} token ids for a {height}x{width} grid",
                ids.len()
            )));
        }
        for &id in &ids {
            if id >= vocab {
                return Err(Error::TokenOutOfRange {
                    index: id,
                    size: vocab,
                });
            }
        }
        Ok(TokenGrid {
            height,
            width,
            vocab,
            ids,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn get(&self, x: usize, y: usize) -> usize {
        self.ids[y * self.width + x]
    }
}

/// Index of the nearest codebook row to `cell` in squared L2; ties break
/// toward the lowest index. Distances accumulate in f64 so the result does
/// not depend on the working precision.
pub fn nearest_code<T: Scalar>(cell: &[T], codebook: &[T], latent_dim: usize) -> usize {
    debug_assert_eq!(cell.len(), latent_dim);
    debug_assert!(!codebook.is_empty() && codebook.len() % latent_dim == 0);
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for (k, row) in codebook.chunks_exact(latent_dim).enumerate() {
        let mut d = 0.0f64;
        for (a, b) in cell.iter().zip(row) {
            let diff = a.to_f64() - b.to_f64();
            d += diff * diff;
        }
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

/// Nearest-code lookup for a `(rows, d)` latent block against a `(K, d)`
/// codebook.
pub fn quantize_rows<T: Scalar>(
    latents: &[T],
    codebook: &[T],
    codebook_size: usize,
    latent_dim: usize,
) -> Result<Vec<usize>> {
    if codebook_size == 0 || codebook.len() != codebook_size * latent_dim {
        return Err(Error::ShapeMismatch(format!(
            "codebook holds {} values, expected {codebook_size} x {latent_dim}",
            codebook.len()
        )));
    }
    if latent_dim == 0 || latents.len() % latent_dim != 0 {
        return Err(Error::ShapeMismatch(format!(
            "latent block of {} values is not a multiple of dim {latent_dim}",
            latents.len()
        )));
    }
    Ok(latents
        .chunks_exact(latent_dim)
        .map(|cell| nearest_code(cell, codebook, latent_dim))
        .collect())
}

/// Numeric value of the training objective for already-computed pieces:
/// reconstruction error averaged over the valid pixels of `x` (coordinate
/// channels), plus the codebook and commitment terms. The two latent terms
/// share the same value and differ only in which side the gradient reaches,
/// so the total is `coord_mse + (1 + beta) * ||z_e - z_q||^2`.
pub fn vqvae_loss(
    x: &RocMap,
    recon: &RocMap,
    z_e: &Tensor<f32>,
    z_q: &Tensor<f32>,
    beta: f64,
) -> Result<f64> {
    if x.width() != recon.width() || x.height() != recon.height() {
        return Err(Error::ShapeMismatch(format!(
            "map {}x{} vs reconstruction {}x{}",
            x.width(),
            x.height(),
            recon.width(),
            recon.height()
        )));
    }
    if z_e.shape() != z_q.shape() {
        return Err(Error::ShapeMismatch(format!(
            "latent {:?} vs quantized {:?}",
            z_e.shape(),
            z_q.shape()
        )));
    }
    if !(beta >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "commitment weight must be >= 0, got {beta}"
        )));
    }
    let mut num = 0.0f64;
    let mut n_valid = 0usize;
    for i in 0..x.width() * x.height() {
        if x.valid().data()[i] {
            n_valid += 1;
            for c in 0..3 {
                let d = x.data()[i * 3 + c] as f64 - recon.data()[i * 3 + c] as f64;
                num += d * d;
            }
        }
    }
    let coord = if n_valid == 0 {
        0.0
    } else {
        num / (3 * n_valid) as f64
    };
    let mut latent = 0.0f64;
    for (a, b) in z_e.data().iter().zip(z_q.data()) {
        let d = (*a - *b) as f64;
        latent += d * d;
    }
    Ok(coord + (1.0 + beta) * latent)
}

/// Fresh parameter tensors for the given configuration.
fn init_store<T: Scalar>(config: &TokenizerConfig, seed: u64) -> Result<ParamStore<T>> {
    config.validate()?;
    let s = config.stride()?;
    let c = config.input_channels;
    let d = config.latent_dim;
    let mut rng = rand::SeedableRng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    store.insert(
        "codebook",
        nn::random_tensor(&mut rng, &[config.codebook_size, d], Init::Normal(0.05)),
    )?;
    nn::init_linear(&mut store, &mut rng, "enc.patch1", s * s * c, STAGE1_WIDTH, Init::Xavier)?;
    nn::init_linear(
        &mut store,
        &mut rng,
        "enc.patch2",
        s * s * STAGE1_WIDTH,
        STAGE2_WIDTH,
        Init::Xavier,
    )?;
    nn::init_linear(&mut store, &mut rng, "enc.out", STAGE2_WIDTH, d, Init::Xavier)?;
    nn::init_linear(&mut store, &mut rng, "dec.in", 9 * d, STAGE2_WIDTH, Init::Xavier)?;
    nn::init_linear(
        &mut store,
        &mut rng,
        "dec.up1",
        STAGE2_WIDTH,
        s * s * STAGE1_WIDTH,
        Init::Xavier,
    )?;
    nn::init_linear(&mut store, &mut rng, "dec.up2", STAGE1_WIDTH, s * s * c, Init::Xavier)?;
    Ok(store)
}

/// Encoder: `(B, H, W, C)` to `(B, H/f, W/f, d)` via two strided patch
/// embeddings with GELU between.
pub fn build_encoder<T: Scalar>(b: &mut Binder<T>, x: &Tv, config: &TokenizerConfig) -> Result<Tv> {
    let s = config.stride()?;
    let (batch, h, w, c) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    if h % config.downsample != 0 || w % config.downsample != 0 {
        return Err(Error::InvalidArgument(format!(
            "{h}x{w} input is not divisible by the downsample factor {}",
            config.downsample
        )));
    }
    if c != config.input_channels {
        return Err(Error::ShapeMismatch(format!(
            "expected {} input channels, got {c}",
            config.input_channels
        )));
    }
    let p1 = b.g.patchify(x.var, s);
    let p1 = Tv::new(p1, &[batch, h / s, w / s, s * s * c]);
    let f1 = nn::linear(b, &p1, "enc.patch1")?;
    let f1 = Tv::new(b.g.gelu(f1.var), &f1.shape);

    let p2 = b.g.patchify(f1.var, s);
    let p2 = Tv::new(p2, &[batch, h / (s * s), w / (s * s), s * s * STAGE1_WIDTH]);
    let f2 = nn::linear(b, &p2, "enc.patch2")?;
    let f2 = Tv::new(b.g.gelu(f2.var), &f2.shape);
    nn::linear(b, &f2, "enc.out")
}

/// Row indices into a zero-padded flat latent table covering each cell's
/// 3x3 neighborhood; out-of-grid neighbors point at the trailing zero row.
fn neighborhood_ids(batch: usize, h: usize, w: usize) -> Vec<usize> {
    let pad_row = batch * h * w;
    let mut ids = Vec::with_capacity(batch * h * w * 9);
    for bi in 0..batch {
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                for dy in -1..=1i64 {
                    for dx in -1..=1i64 {
                        let (ny, nx) = (y + dy, x + dx);
                        if ny < 0 || ny >= h as i64 || nx < 0 || nx >= w as i64 {
                            ids.push(pad_row);
                        } else {
                            ids.push((bi * h + ny as usize) * w + nx as usize);
                        }
                    }
                }
            }
        }
    }
    ids
}

/// Decoder: `(B, h, w, d)` back to `(B, h*f, w*f, C)`. Each cell first
/// concatenates its 3x3 latent neighborhood so a reconstructed patch can
/// depend on adjacent tokens; without that context every patch would be one
/// of only `codebook_size` fixed outputs and boundaries between patches
/// could never line up.
pub fn build_decoder<T: Scalar>(b: &mut Binder<T>, z: &Tv, config: &TokenizerConfig) -> Result<Tv> {
    let s = config.stride()?;
    let (batch, h, w) = (z.shape[0], z.shape[1], z.shape[2]);
    let c = config.input_channels;
    let d = config.latent_dim;

    let flat = b.g.reshape(z.var, &[batch * h * w, d]);
    let zero = b.g.leaf(Tensor::zeros(&[1, d]));
    let padded = b.g.concat(&[flat, zero], 0);
    let ctx = b.g.gather(padded, &neighborhood_ids(batch, h, w));
    let ctx = b.g.reshape(ctx, &[batch, h, w, 9 * d]);
    let ctx = Tv::new(ctx, &[batch, h, w, 9 * d]);

    let f0 = nn::linear(b, &ctx, "dec.in")?;
    let f0 = Tv::new(b.g.gelu(f0.var), &f0.shape);
    let f1 = nn::linear(b, &f0, "dec.up1")?;
    let u1 = b.g.unpatchify(f1.var, s, STAGE1_WIDTH);
    let u1 = Tv::new(u1, &[batch, h * s, w * s, STAGE1_WIDTH]);
    let u1 = Tv::new(b.g.gelu(u1.var), &u1.shape);
    let f2 = nn::linear(b, &u1, "dec.up2")?;
    let out = b.g.unpatchify(f2.var, s, c);
    Ok(Tv::new(out, &[batch, h * s * s, w * s * s, c]))
}

/// Handles into a fully built and evaluated training graph for one batch.
pub struct VqStepGraph {
    pub loss: Var,
    pub coord_mse: Var,
    pub validity_mse: Var,
    pub code_term: Var,
    pub commit_term: Var,
    /// `(B*cells, d)` encoder outputs.
    pub z_e_flat: Var,
    pub z_q: Var,
    pub recon: Var,
    pub ids: Vec<usize>,
}

/// Build and evaluate the two-phase training step on `batch`
/// `(B, H, W, C)`: run the encoder, pick nearest codes on the host, then
/// extend the same graph with the quantized path, decoder, and losses.
/// The caller owns `backward` and the parameter update.
///
/// `fixed_ids` overrides code selection (gradient tests need the discrete
/// choice pinned while probing).
///
/// The loss is the masked coordinate reconstruction error, a full-image
/// validity-channel error (without it the validity output would be
/// unconstrained off the object and the decoder could never learn to
/// declare pixels invalid), the codebook pull term, and the commitment
/// term. Straight-through: the decoder consumes
/// `z_e + stop_gradient(z_q - z_e)`, so its input equals `z_q` in value
/// while gradients reach the encoder.
pub fn run_vq_step<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    config: &TokenizerConfig,
    batch: &Tensor<T>,
    fixed_ids: Option<&[usize]>,
) -> Result<VqStepGraph> {
    if batch.rank() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "training batch must be (B, H, W, C), got {:?}",
            batch.shape()
        )));
    }
    let (bsz, h, w, c) = (
        batch.shape()[0],
        batch.shape()[1],
        batch.shape()[2],
        batch.shape()[3],
    );
    let d = config.latent_dim;
    let cells = (h / config.downsample) * (w / config.downsample);

    // Phase 1: encoder.
    let mut binder = Binder::new(g, store);
    let x = binder.g.input("batch");
    let x_tv = Tv::new(x, &[bsz, h, w, c]);
    let z_e = build_encoder(&mut binder, &x_tv, config)?;
    let z_e_flat = binder.g.reshape(z_e.var, &[bsz * cells, d]);
    g.eval(&[("batch", batch)])?;

    // Host-side code selection on the freshly computed latents.
    let ids = match fixed_ids {
        Some(ids) => {
            if ids.len() != bsz * cells {
                return Err(Error::ShapeMismatch(format!(
                    "{} fixed ids for {} cells",
                    ids.len(),
                    bsz * cells
                )));
            }
            for &id in ids {
                if id >= config.codebook_size {
                    return Err(Error::TokenOutOfRange {
                        index: id,
                        size: config.codebook_size,
                    });
                }
            }
            ids.to_vec()
        }
        None => quantize_rows(
            g.value(z_e_flat).data(),
            store.get("codebook")?.data(),
            config.codebook_size,
            d,
        )?,
    };

    // Phase 2: quantized path, decoder, losses, appended to the same graph.
    let mut binder = Binder::new(g, store);
    let codebook = binder.param("codebook")?;
    let z_q = binder.g.gather(codebook, &ids);
    let delta = binder.g.sub(z_q, z_e_flat);
    let bypass = binder.g.detach(delta);
    let dec_in = binder.g.add(z_e_flat, bypass);
    let dec_in = binder.g.reshape(
        dec_in,
        &[bsz, h / config.downsample, w / config.downsample, d],
    );
    let dec_in = Tv::new(dec_in, &[bsz, h / config.downsample, w / config.downsample, d]);
    let recon = build_decoder(&mut binder, &dec_in, config)?;

    // Validity mask replicated over the three coordinate channels.
    let mut n_valid = 0usize;
    let mask3 = {
        let src = batch.data();
        let mut m = vec![T::ZERO; bsz * h * w * 3];
        for px in 0..bsz * h * w {
            let v = src[px * c + (c - 1)];
            if v.to_f64() > 0.5 {
                n_valid += 1;
                m[px * 3..px * 3 + 3].fill(T::ONE);
            }
        }
        Tensor::from_vec(&[bsz, h, w, 3], m)?
    };
    let mask3 = binder.g.leaf(mask3);

    let x_coords = binder.g.slice(x, 3, 0, 3);
    let r_coords = binder.g.slice(recon.var, 3, 0, 3);
    let diff = binder.g.sub(r_coords, x_coords);
    let sq = binder.g.square(diff);
    let masked = binder.g.mul(sq, mask3);
    let sum = binder.g.sum_all(masked);
    let coord_mse = binder.g.scale(sum, 1.0 / (3 * n_valid.max(1)) as f64);

    let x_val = binder.g.slice(x, 3, c - 1, 1);
    let r_val = binder.g.slice(recon.var, 3, c - 1, 1);
    let vdiff = binder.g.sub(r_val, x_val);
    let vsq = binder.g.square(vdiff);
    let validity_mse = binder.g.mean_all(vsq);

    let z_e_frozen = binder.g.detach(z_e_flat);
    let code_diff = binder.g.sub(z_q, z_e_frozen);
    let code_sq = binder.g.square(code_diff);
    let code_term = binder.g.sum_all(code_sq);

    let z_q_frozen = binder.g.detach(z_q);
    let commit_diff = binder.g.sub(z_e_flat, z_q_frozen);
    let commit_sq = binder.g.square(commit_diff);
    let commit_sum = binder.g.sum_all(commit_sq);
    let commit_term = binder.g.scale(commit_sum, config.beta);

    let recon_total = binder.g.add(coord_mse, validity_mse);
    let latent_total = binder.g.add(code_term, commit_term);
    let loss = binder.g.add(recon_total, latent_total);

    g.eval(&[])?;
    Ok(VqStepGraph {
        loss,
        coord_mse,
        validity_mse,
        code_term,
        commit_term,
        z_e_flat,
        z_q,
        recon: recon.var,
        ids,
    })
}

/// Per-step numbers and gradients handed to the optimizer.
pub struct TokenizerStep {
    pub loss: f64,
    pub coord_mse: f64,
    pub validity_mse: f64,
    pub code_term: f64,
    pub commit_term: f64,
    pub ids: Vec<usize>,
    /// `(B*cells, d)` encoder outputs; dead-code reseeding donors.
    pub z_e: Tensor<f32>,
    pub grads: Vec<(String, Tensor<f32>)>,
}

/// The trained artifact: configuration, weights, and dead-code counters.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    config: TokenizerConfig,
    store: ParamStore<f32>,
    /// Steps since each codebook entry was last used.
    steps_unused: Vec<u64>,
}

impl Tokenizer {
    pub fn new(config: TokenizerConfig, seed: u64) -> Result<Self> {
        let store = init_store(&config, seed)?;
        Ok(Tokenizer {
            steps_unused: vec![0; config.codebook_size],
            config,
            store,
        })
    }

    pub fn config(&self) -> &TokenizerConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.store
    }

    pub fn checksum(&self) -> Result<String> {
        self.store.checksum()
    }

    fn grid_dims(&self, roc: &RocMap) -> Result<(usize, usize)> {
        let f = self.config.downsample;
        if roc.height() % f != 0 || roc.width() % f != 0 {
            return Err(Error::InvalidArgument(format!(
                "{}x{} map is not divisible by the downsample factor {f}",
                roc.width(),
                roc.height()
            )));
        }
        Ok((roc.height() / f, roc.width() / f))
    }

    /// Continuous latents for one map: `(h, w, d)`.
    pub fn encode(&self, roc: &RocMap) -> Result<Tensor<f32>> {
        let (h, w) = self.grid_dims(roc)?;
        let input = roc
            .to_hw4_tensor()
            .reshaped(&[1, roc.height(), roc.width(), 4])?;
        let mut g: Graph<f32> = Graph::new();
        let mut b = Binder::new(&mut g, &self.store);
        let x = b.g.input("roc");
        let x_tv = Tv::new(x, &[1, roc.height(), roc.width(), 4]);
        let z = build_encoder(&mut b, &x_tv, &self.config)?;
        g.eval(&[("roc", &input)])?;
        g.value(z.var).reshaped(&[h, w, self.config.latent_dim])
    }

    /// Snap latents `(h, w, d)` to the codebook: token grid plus the
    /// quantized latents.
    pub fn quantize(&self, z_e: &Tensor<f32>) -> Result<(TokenGrid, Tensor<f32>)> {
        let d = self.config.latent_dim;
        if z_e.rank() != 3 || z_e.shape()[2] != d {
            return Err(Error::ShapeMismatch(format!(
                "latent grid must be (h, w, {d}), got {:?}",
                z_e.shape()
            )));
        }
        let (h, w) = (z_e.shape()[0], z_e.shape()[1]);
        let codebook = self.store.get("codebook")?;
        let ids = quantize_rows(z_e.data(), codebook.data(), self.config.codebook_size, d)?;
        let mut z_q = vec![0.0f32; h * w * d];
        for (cell, &id) in ids.iter().enumerate() {
            z_q[cell * d..(cell + 1) * d].copy_from_slice(&codebook.data()[id * d..(id + 1) * d]);
        }
        Ok((
            TokenGrid::new(h, w, self.config.codebook_size, ids)?,
            Tensor::from_vec(&[h, w, d], z_q)?,
        ))
    }

    pub fn tokenize(&self, roc: &RocMap) -> Result<TokenGrid> {
        let z_e = self.encode(roc)?;
        Ok(self.quantize(&z_e)?.0)
    }

    /// Decode a token grid to a full coordinate map. Coordinate channels are
    /// clamped to [-1, 1]; the validity channel is thresholded at 0.5 and
    /// invalid pixels zeroed.
    pub fn detokenize(&self, tokens: &TokenGrid) -> Result<RocMap> {
        for &id in tokens.ids() {
            if id >= self.config.codebook_size {
                return Err(Error::TokenOutOfRange {
                    index: id,
                    size: self.config.codebook_size,
                });
            }
        }
        let (h, w) = (tokens.height(), tokens.width());
        let d = self.config.latent_dim;
        let f = self.config.downsample;
        let mut g: Graph<f32> = Graph::new();
        let mut b = Binder::new(&mut g, &self.store);
        let codebook = b.param("codebook")?;
        let z_q = b.g.gather(codebook, tokens.ids());
        let z_q = b.g.reshape(z_q, &[1, h, w, d]);
        let z_tv = Tv::new(z_q, &[1, h, w, d]);
        let out = build_decoder(&mut b, &z_tv, &self.config)?;
        g.eval(&[])?;
        let map = g.value(out.var).reshaped(&[h * f, w * f, 4])?;
        Ok(RocMap::from_hw4_tensor(&map)?.0)
    }

    /// One optimization step's forward/backward on a batch of maps; the
    /// caller applies the returned gradients.
    pub fn training_step(&self, batch: &[&RocMap]) -> Result<TokenizerStep> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty training batch".into()));
        }
        let (height, width) = (batch[0].height(), batch[0].width());
        let mut stacked = Vec::with_capacity(batch.len() * height * width * 4);
        for map in batch {
            if map.height() != height || map.width() != width {
                return Err(Error::ShapeMismatch(
                    "all maps in a batch must share a resolution".into(),
                ));
            }
            stacked.extend_from_slice(map.to_hw4_tensor().data());
        }
        let tensor = Tensor::from_vec(&[batch.len(), height, width, 4], stacked)?;

        let mut g: Graph<f32> = Graph::new();
        let step = run_vq_step(&mut g, &self.store, &self.config, &tensor, None)?;
        g.backward(step.loss)?;

        let grads = self
            .store
            .names()
            .filter_map(|name| g.grad_named(name).map(|t| (name.to_string(), t)))
            .collect();
        Ok(TokenizerStep {
            loss: g.value(step.loss).item() as f64,
            coord_mse: g.value(step.coord_mse).item() as f64,
            validity_mse: g.value(step.validity_mse).item() as f64,
            code_term: g.value(step.code_term).item() as f64,
            commit_term: g.value(step.commit_term).item() as f64,
            z_e: g.value(step.z_e_flat).clone(),
            ids: step.ids,
            grads,
        })
    }

    /// Bump the unused counters, zeroing those for codes used this step.
    pub fn note_usage(&mut self, ids: &[usize]) {
        for count in &mut self.steps_unused {
            *count += 1;
        }
        for &id in ids {
            if let Some(count) = self.steps_unused.get_mut(id) {
                *count = 0;
            }
        }
    }

    /// Replace entries unused for [`DEAD_CODE_STEPS`] with rows drawn from
    /// `donors` `(N, d)`; returns how many were re-seeded.
    pub fn reseed_dead(&mut self, donors: &Tensor<f32>, rng: &mut ChaCha8Rng) -> Result<usize> {
        let d = self.config.latent_dim;
        if donors.rank() != 2 || donors.shape()[1] != d {
            return Err(Error::ShapeMismatch(format!(
                "donor rows must be (N, {d}), got {:?}",
                donors.shape()
            )));
        }
        let n = donors.shape()[0];
        if n == 0 {
            return Ok(0);
        }
        let mut codebook = self.store.get("codebook")?.clone();
        let mut reseeded = 0usize;
        {
            let data = codebook.data_mut();
            for (k, count) in self.steps_unused.iter_mut().enumerate() {
                if *count >= DEAD_CODE_STEPS {
                    let donor = rng.gen_range(0..n);
                    data[k * d..(k + 1) * d]
                        .copy_from_slice(&donors.data()[donor * d..(donor + 1) * d]);
                    *count = 0;
                    reseeded += 1;
                }
            }
        }
        if reseeded > 0 {
            self.store.set("codebook", codebook)?;
        }
        Ok(reseeded)
    }

    const WEIGHTS_FILE: &'static str = "tokenizer.cart";
    const CONFIG_FILE: &'static str = "tokenizer.json";

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.store.save(dir.join(Self::WEIGHTS_FILE))?;
        fs::write(
            dir.join(Self::CONFIG_FILE),
            serde_json::to_vec_pretty(&self.config)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config: TokenizerConfig =
            serde_json::from_slice(&fs::read(dir.join(Self::CONFIG_FILE))?)?;
        config.validate()?;
        let store: ParamStore<f32> = ParamStore::load(dir.join(Self::WEIGHTS_FILE))?;
        // The stored names and shapes must match a fresh initialization.
        let reference: ParamStore<f32> = init_store(&config, 0)?;
        for (name, tensor) in reference.iter() {
            let loaded = store.get(name)?;
            if loaded.shape() != tensor.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "checkpoint tensor `{name}` has shape {:?}, expected {:?}",
                    loaded.shape(),
                    tensor.shape()
                )));
            }
            if !loaded.all_finite() {
                return Err(Error::NonFinite(format!(
                    "checkpoint tensor `{name}` holds non-finite values"
                )));
            }
        }
        if store.len() != reference.len() {
            return Err(Error::InvalidArgument(format!(
                "checkpoint holds {} tensors, expected {}",
                store.len(),
                reference.len()
            )));
        }
        Ok(Tokenizer {
            steps_unused: vec![0; config.codebook_size],
            config,
            store,
        })
    }
}
