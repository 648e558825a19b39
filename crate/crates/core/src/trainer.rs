//! Optimizer, augmentations, and the two training loops: tokenizer
//! pretraining on ground-truth query coordinate maps, then the main
//! network against the frozen tokenizer's codes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decoder::{self, DecoderConfig};
use crate::encoders::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::fusion::{self, FusionConfig};
use crate::geometry::RocMap;
use crate::nn::{Binder, ParamStore, Tv};
use crate::pipeline::PoseModel;
use crate::synth::{fbm, SceneSample};
use crate::tensor::{Graph, Tensor};
use crate::tokenizer::{Tokenizer, TokenizerConfig};

/// Adam with the usual defaults and per-parameter moment buffers.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Tensor<f32>, Tensor<f32>)>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// One update over the listed gradients. Parameters without a gradient
    /// this step keep their moments untouched.
    pub fn step(
        &mut self,
        store: &mut ParamStore<f32>,
        grads: &[(String, Tensor<f32>)],
        lr: f64,
    ) -> Result<()> {
        if !lr.is_finite() || lr < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "learning rate {lr} must be finite and non-negative"
            )));
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, grad) in grads {
            let param = store.get(name)?;
            if param.shape() != grad.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "gradient for `{name}` is {:?}, parameter is {:?}",
                    grad.shape(),
                    param.shape()
                )));
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(grad.shape()), Tensor::zeros(grad.shape())));
            let mut new = param.data().to_vec();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..new.len() {
                let g = grad.data()[i] as f64;
                let mi = self.beta1 * md[i] as f64 + (1.0 - self.beta1) * g;
                let vi = self.beta2 * vd[i] as f64 + (1.0 - self.beta2) * g * g;
                md[i] = mi as f32;
                vd[i] = vi as f32;
                let update = lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
                new[i] = (new[i] as f64 - update) as f32;
            }
            let shape = param.shape().to_vec();
            store.set(name, Tensor::from_vec(&shape, new)?)?;
        }
        Ok(())
    }
}

/// Linear warmup to the peak, then cosine decay. Never reaches zero
/// inside the schedule, so every step still moves.
pub fn one_cycle_lr(step: usize, total: usize, peak: f64, warmup_frac: f64) -> f64 {
    assert!(total > 0 && peak > 0.0 && (0.0..1.0).contains(&warmup_frac));
    let step = step.min(total - 1);
    let warmup = ((total as f64 * warmup_frac).ceil() as usize).min(total - 1);
    if step < warmup {
        peak * (step + 1) as f64 / warmup as f64
    } else {
        let span = (total - warmup) as f64;
        let t = (step - warmup) as f64 / span;
        peak * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Knobs shared by both training loops.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub peak_lr: f64,
    pub warmup_frac: f64,
    /// Chance a sample gets a procedural-noise background.
    pub background_prob: f64,
    /// Chance the reference coordinate map gets rectangles zeroed out.
    pub corruption_prob: f64,
    pub seed: u64,
    /// Held-out metric cadence, in iterations.
    pub eval_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            iterations: 1000,
            peak_lr: 3e-4,
            warmup_frac: 0.1,
            background_prob: 0.5,
            corruption_prob: 0.5,
            seed: 0,
            eval_interval: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.iterations == 0 || self.eval_interval == 0 {
            return Err(Error::InvalidArgument(
                "batch size, iterations, and eval interval must be positive".into(),
            ));
        }
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "peak learning rate {} must be positive",
                self.peak_lr
            )));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::InvalidArgument(format!(
                "warmup fraction {} must lie in [0, 1)",
                self.warmup_frac
            )));
        }
        for (label, p) in [
            ("background", self.background_prob),
            ("corruption", self.corruption_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!(
                    "{label} probability {p} must lie in [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// Largest fraction of valid reference-map pixels corruption may remove.
pub const CORRUPTION_CAP: f64 = 0.30;

/// Randomized training-time view of a sample: noise backgrounds behind
/// the object, and rectangles knocked out of the reference coordinate
/// map. Ground-truth poses and the query coordinate map are never
/// touched.
pub fn augment(
    sample: &SceneSample,
    background_prob: f64,
    corruption_prob: f64,
    rng: &mut ChaCha8Rng,
) -> SceneSample {
    let mut out = sample.clone();
    if background_prob > 0.0 && rng.gen_bool(background_prob.clamp(0.0, 1.0)) {
        let seed: u64 = rng.gen();
        noise_background(&mut out.reference.rgb, out.reference.mask.data(), seed);
        noise_background(&mut out.query.rgb, out.query.mask.data(), seed ^ 0x5EED);
    }
    if corruption_prob > 0.0 && rng.gen_bool(corruption_prob.clamp(0.0, 1.0)) {
        out.roc_reference = corrupt_roc(&out.roc_reference, rng);
    }
    out
}

/// Replace `mask == 0` pixels of an `(H, W, 3)` image with smooth value
/// noise. Object pixels are left exactly as they were.
fn noise_background(rgb: &mut Tensor<f32>, mask: &[bool], seed: u64) {
    let (h, w) = (rgb.shape()[0], rgb.shape()[1]);
    let data = rgb.data_mut();
    for v in 0..h {
        for u in 0..w {
            let i = v * w + u;
            if mask[i] {
                continue;
            }
            let q = nalgebra::Vector3::new(u as f64, v as f64, 0.0) * 0.11;
            for c in 0..3 {
                let val = fbm(q, seed.wrapping_add(0x9A * c as u64)) as f32;
                data[i * 3 + c] = val.clamp(0.0, 1.0);
            }
        }
    }
}

/// Zero 1..=4 random rectangles out of the map (coordinates and validity
/// both), never removing more than [`CORRUPTION_CAP`] of the pixels that
/// were valid going in.
fn corrupt_roc(roc: &RocMap, rng: &mut ChaCha8Rng) -> RocMap {
    let (w, h) = (roc.width(), roc.height());
    let mut valid = roc.valid().clone();
    let budget = (CORRUPTION_CAP * valid.count() as f64).floor() as usize;
    let mut removed = 0usize;
    let rects = rng.gen_range(1..=4usize);
    for _ in 0..rects {
        let rw = rng.gen_range(1..=(w / 2).max(1));
        let rh = rng.gen_range(1..=(h / 2).max(1));
        let x0 = rng.gen_range(0..=w - rw);
        let y0 = rng.gen_range(0..=h - rh);
        let mut in_rect = 0usize;
        for y in y0..y0 + rh {
            for x in x0..x0 + rw {
                if valid.get(x, y) {
                    in_rect += 1;
                }
            }
        }
        if removed + in_rect > budget {
            continue;
        }
        for y in y0..y0 + rh {
            for x in x0..x0 + rw {
                valid.set(x, y, false);
            }
        }
        removed += in_rect;
    }
    RocMap::from_parts(w, h, roc.data().to_vec(), valid)
        .expect("shrinking validity keeps the map well-formed")
}

/// One line of a training curve.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
    pub heldout: Option<f64>,
}

/// The full curve, writable as CSV.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,loss,lr,heldout\n");
        for row in &self.rows {
            let held = row
                .heldout
                .map(|h| format!("{h}"))
                .unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{}", row.iteration, row.loss, row.lr, held);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.loss)
    }

    pub fn last_heldout(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.heldout)
    }
}

/// Mean squared coordinate error over ground-truth-valid pixels after a
/// tokenize/detokenize round trip. Pixels the decoder drops count with
/// zero coordinates, so hiding pixels does not hide error.
pub fn heldout_roc_mse(tokenizer: &Tokenizer, maps: &[RocMap]) -> Result<f64> {
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for gt in maps {
        let tokens = tokenizer.tokenize(gt)?;
        let recon = tokenizer.detokenize(&tokens)?;
        for v in 0..gt.height() {
            for u in 0..gt.width() {
                let Some(want) = gt.get(u, v) else { continue };
                let got = recon.get(u, v).unwrap_or([0.0; 3]);
                for c in 0..3 {
                    let d = want[c] as f64 - got[c] as f64;
                    sum += d * d;
                }
                n += 3;
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask("no valid pixels in held-out set".into()));
    }
    Ok(sum / n as f64)
}

/// Fraction of codebook entries that appear at least once when tokenizing
/// the given samples.
pub fn codebook_usage(tokenizer: &Tokenizer, maps: &[RocMap]) -> Result<f64> {
    let k = tokenizer.config().codebook_size;
    let mut used = vec![false; k];
    for map in maps {
        for &id in tokenizer.tokenize(map)?.ids() {
            used[id] = true;
        }
    }
    Ok(used.iter().filter(|u| **u).count() as f64 / k as f64)
}

/// Train the coordinate-map tokenizer on ground-truth maps (typically the
/// query and reference maps of every training pair).
pub fn train_tokenizer(
    train: &[RocMap],
    heldout: &[RocMap],
    tok_config: TokenizerConfig,
    config: &TrainConfig,
) -> Result<(Tokenizer, TrainLog)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let mut tokenizer = Tokenizer::new(tok_config, config.seed)?;
    let mut adam = Adam::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x70_4B_31_5E);
    let mut log = TrainLog::default();

    for it in 0..config.iterations {
        let lr = one_cycle_lr(it, config.iterations, config.peak_lr, config.warmup_frac);
        let batch: Vec<&RocMap> = (0..config.batch_size)
            .map(|_| &train[rng.gen_range(0..train.len())])
            .collect();
        let step = tokenizer.training_step(&batch)?;
        if !step.loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "tokenizer loss diverged at iteration {it}: {}",
                step.loss
            )));
        }
        adam.step(tokenizer.store_mut(), &step.grads, lr)?;
        tokenizer.note_usage(&step.ids);
        tokenizer.reseed_dead(&step.z_e, &mut rng)?;

        let eval_now = (it + 1) % config.eval_interval == 0 || it + 1 == config.iterations;
        let heldout_metric = if eval_now && !heldout.is_empty() {
            Some(heldout_roc_mse(&tokenizer, heldout)?)
        } else {
            None
        };
        log.rows.push(LogRow {
            iteration: it,
            loss: step.loss,
            lr,
            heldout: heldout_metric,
        });
    }
    Ok((tokenizer, log))
}

/// How many token positions to hide for one training sample: ratio drawn
/// uniformly from [0.1, 1.0], count rounded up.
fn draw_mask(n: usize, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let r = rng.gen_range(0.1..=1.0f64);
    let m = ((r * n as f64).ceil() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let mut hidden = vec![false; n];
    for &p in order.iter().take(m) {
        hidden[p] = true;
    }
    hidden
}

struct MainBatch {
    q_rgb: Tensor<f32>,
    r_rgb: Tensor<f32>,
    r_roc: Tensor<f32>,
    known: Vec<Vec<Option<usize>>>,
    targets: Vec<usize>,
    mask_flags: Vec<f32>,
    masked_count: usize,
}

fn build_main_batch(
    samples: &[&SceneSample],
    gt_ids: &[&[usize]],
    hidden: &[Vec<bool>],
) -> Result<MainBatch> {
    let first = samples[0];
    let (h, w) = (first.query.mask.height(), first.query.mask.width());
    let n = gt_ids[0].len();
    let mut q_rgb = Vec::with_capacity(samples.len() * h * w * 3);
    let mut r_rgb = Vec::with_capacity(samples.len() * h * w * 3);
    let mut r_roc = Vec::with_capacity(samples.len() * h * w * 4);
    let mut known = Vec::with_capacity(samples.len());
    let mut targets = Vec::with_capacity(samples.len() * n);
    let mut mask_flags = Vec::with_capacity(samples.len() * n);
    let mut masked_count = 0usize;
    for ((sample, ids), hide) in samples.iter().zip(gt_ids).zip(hidden) {
        q_rgb.extend_from_slice(
            encoders::rgb_input(&sample.query.rgb, &sample.query.mask)?.data(),
        );
        r_rgb.extend_from_slice(
            encoders::rgb_input(&sample.reference.rgb, &sample.reference.mask)?.data(),
        );
        r_roc.extend_from_slice(
            encoders::roc_input(&sample.roc_reference, &sample.reference.mask)?.data(),
        );
        let mut row = Vec::with_capacity(n);
        for (&id, &hid) in ids.iter().zip(hide.iter()) {
            row.push(if hid { None } else { Some(id) });
            targets.push(id);
            mask_flags.push(if hid { 1.0 } else { 0.0 });
            if hid {
                masked_count += 1;
            }
        }
        known.push(row);
    }
    let b = samples.len();
    Ok(MainBatch {
        q_rgb: Tensor::from_vec(&[b, h, w, 3], q_rgb)?,
        r_rgb: Tensor::from_vec(&[b, h, w, 3], r_rgb)?,
        r_roc: Tensor::from_vec(&[b, h, w, 4], r_roc)?,
        known,
        targets,
        mask_flags,
        masked_count,
    })
}

/// Masked-token NLL of one batch; returns the loss node and the graph so
/// the caller decides whether to backprop.
fn main_loss_graph(
    model: &PoseModel,
    codebook: &Tensor<f32>,
    batch: &MainBatch,
) -> Result<(Graph<f32>, crate::tensor::Var)> {
    let mut g = Graph::<f32>::new();
    let mut b = Binder::new(&mut g, &model.store);
    let bsz = batch.known.len();
    let n = batch.known[0].len();
    let d = model.encoder.width;

    let q = b.g.leaf(batch.q_rgb.clone());
    let q = Tv::new(q, batch.q_rgb.shape());
    let r = b.g.leaf(batch.r_rgb.clone());
    let r = Tv::new(r, batch.r_rgb.shape());
    let roc = b.g.leaf(batch.r_roc.clone());
    let roc = Tv::new(roc, batch.r_roc.shape());

    let qf = encoders::encoder_tower(&mut b, &q, encoders::RGB_PREFIX, &model.encoder)?;
    let rf = encoders::encoder_tower(&mut b, &r, encoders::RGB_PREFIX, &model.encoder)?;
    let cf = encoders::encoder_tower(&mut b, &roc, encoders::ROC_PREFIX, &model.encoder)?;
    let flat = |b: &mut Binder<f32>, t: &Tv| {
        let v = b.g.reshape(t.var, &[bsz, n, d]);
        Tv::new(v, &[bsz, n, d])
    };
    let qf = flat(&mut b, &qf);
    let rf = flat(&mut b, &rf);
    let cf = flat(&mut b, &cf);
    let fused = fusion::fusion_tower(&mut b, &qf, &rf, &cf, &model.fusion)?;

    let rows: Vec<&[Option<usize>]> = batch.known.iter().map(|r| r.as_slice()).collect();
    let (codes, known3, unknown_col) = decoder::decoder_inputs(codebook, &rows, d)?;
    let codes_v = b.g.leaf(codes.clone());
    let codes_v = Tv::new(codes_v, codes.shape());
    let known_v = b.g.leaf(known3.clone());
    let known_v = Tv::new(known_v, known3.shape());
    let unk_v = b.g.leaf(unknown_col.clone());
    let unk_v = Tv::new(unk_v, unknown_col.shape());
    let logits = decoder::decoder_tower(
        &mut b,
        &codes_v,
        &known_v,
        &unk_v,
        &fused.out,
        &model.decoder,
    )?;

    let flat_logits = b.g.reshape(logits.var, &[bsz * n, model.decoder.vocab]);
    let nll = b.g.cross_entropy(flat_logits, &batch.targets);
    let flags = b
        .g
        .leaf(Tensor::from_vec(&[bsz * n], batch.mask_flags.clone())?);
    let picked = b.g.mul(nll, flags);
    let total = b.g.sum_all(picked);
    let loss = b.g.scale(total, 1.0 / batch.masked_count.max(1) as f64);
    Ok((g, loss))
}

/// Masked NLL over a fixed held-out set with a deterministic mask draw,
/// forward only.
pub fn heldout_masked_nll(
    model: &PoseModel,
    tokenizer: &Tokenizer,
    samples: &[SceneSample],
    seed: u64,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty held-out set".into()));
    }
    let codebook = tokenizer.store().get("codebook")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x48_45_4C_44);
    let mut total = 0.0f64;
    let mut count = 0usize;
    for sample in samples {
        let grid = tokenizer.tokenize(&sample.roc_query)?;
        let ids = grid.ids().to_vec();
        let hidden = draw_mask(ids.len(), &mut rng);
        let batch = build_main_batch(&[sample], &[&ids], std::slice::from_ref(&hidden))?;
        let (mut g, loss) = main_loss_graph(model, codebook, &batch)?;
        g.eval(&[])?;
        total += g.value(loss).data()[0] as f64 * batch.masked_count as f64;
        count += batch.masked_count;
    }
    Ok(total / count.max(1) as f64)
}

/// Train encoders, fusion, and decoder jointly against the frozen
/// tokenizer's codes. The tokenizer is checksummed before and after; a
/// drift is an internal error.
pub fn train_main(
    train: &[SceneSample],
    heldout: &[SceneSample],
    tokenizer: &Tokenizer,
    encoder: EncoderConfig,
    fusion: FusionConfig,
    decoder: DecoderConfig,
    config: &TrainConfig,
) -> Result<(PoseModel, TrainLog)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let (h, w) = (train[0].query.mask.height(), train[0].query.mask.width());
    for s in train.iter().chain(heldout) {
        if s.query.mask.height() != h || s.query.mask.width() != w {
            return Err(Error::ShapeMismatch(
                "all samples must share one image size".into(),
            ));
        }
    }
    let patch = encoder.patch;
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{w}x{h} images not divisible by patch {patch}"
        )));
    }
    let positions = (h / patch) * (w / patch);
    let mut model = PoseModel::init(encoder, fusion, decoder, positions, config.seed)?;
    model.check_compatible(tokenizer.config())?;
    let frozen = tokenizer.checksum()?;
    let codebook = tokenizer.store().get("codebook")?;

    // Labels never change: tokenize every ground-truth query map once.
    let gt_ids: Vec<Vec<usize>> = train
        .iter()
        .map(|s| Ok(tokenizer.tokenize(&s.roc_query)?.ids().to_vec()))
        .collect::<Result<_>>()?;

    let mut adam = Adam::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x4D_41_49_4E);
    let mut log = TrainLog::default();

    for it in 0..config.iterations {
        let lr = one_cycle_lr(it, config.iterations, config.peak_lr, config.warmup_frac);
        let picks: Vec<usize> = (0..config.batch_size)
            .map(|_| rng.gen_range(0..train.len()))
            .collect();
        let augmented: Vec<SceneSample> = picks
            .iter()
            .map(|&i| augment(&train[i], config.background_prob, config.corruption_prob, &mut rng))
            .collect();
        let samples: Vec<&SceneSample> = augmented.iter().collect();
        let ids: Vec<&[usize]> = picks.iter().map(|&i| gt_ids[i].as_slice()).collect();
        let hidden: Vec<Vec<bool>> = ids.iter().map(|r| draw_mask(r.len(), &mut rng)).collect();
        let batch = build_main_batch(&samples, &ids, &hidden)?;

        let (mut g, loss) = main_loss_graph(&model, codebook, &batch)?;
        g.eval(&[])?;
        let loss_val = g.value(loss).data()[0] as f64;
        if !loss_val.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss diverged at iteration {it}: {loss_val}"
            )));
        }
        g.backward(loss)?;
        let names: Vec<String> = g.param_names().map(str::to_owned).collect();
        let grads: Vec<(String, Tensor<f32>)> = names
            .into_iter()
            .filter_map(|name| g.grad_named(&name).map(|grad| (name, grad)))
            .collect();
        adam.step(&mut model.store, &grads, lr)?;

        let eval_now = (it + 1) % config.eval_interval == 0 || it + 1 == config.iterations;
        let heldout_metric = if eval_now && !heldout.is_empty() {
            Some(heldout_masked_nll(&model, tokenizer, heldout, config.seed)?)
        } else {
            None
        };
        log.rows.push(LogRow {
            iteration: it,
            loss: loss_val,
            lr,
            heldout: heldout_metric,
        });
    }

    if tokenizer.checksum()? != frozen {
        return Err(Error::InvalidArgument(
            "tokenizer weights changed during main training".into(),
        ));
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::DecoderConfig;
    use crate::fusion::ValueSource;
    use crate::geometry::{CameraIntrinsics, RigidTransform};
    use crate::synth::{make_pair, make_primitive, OcclusionConfig, PrimitiveKind};
    use nalgebra::{Matrix3, Rotation3, Vector3};

    fn tiny_samples(count: usize, seed: u64) -> Vec<SceneSample> {
        let object = make_primitive(
            PrimitiveKind::Box {
                extents: [0.12, 0.16, 0.2],
            },
            5,
        )
        .unwrap();
        let intrinsics = CameraIntrinsics::new(60.0, 60.0, 24.0, 24.0, 48, 48).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|i| {
                let spin = |rng: &mut ChaCha8Rng| {
                    let axis = nalgebra::Unit::new_normalize(Vector3::new(
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    ));
                    Matrix3::from(Rotation3::from_axis_angle(&axis, rng.gen_range(0.0..1.2)))
                };
                let t_ro =
                    RigidTransform::new(spin(&mut rng), Vector3::new(0.0, 0.0, 0.6)).unwrap();
                let t_qo =
                    RigidTransform::new(spin(&mut rng), Vector3::new(0.0, 0.0, 0.62)).unwrap();
                make_pair(
                    &object,
                    "box",
                    &t_ro,
                    &t_qo,
                    &intrinsics,
                    &OcclusionConfig::none(),
                    seed * 100 + i as u64,
                )
                .unwrap()
            })
            .collect()
    }

    fn tiny_tok_config() -> TokenizerConfig {
        TokenizerConfig {
            downsample: 16,
            codebook_size: 32,
            latent_dim: 8,
            beta: 0.25,
            input_channels: 4,
        }
    }

    #[test]
    fn adam_descends_a_quadratic() {
        // Minimize ||x - 3||^2 for a single parameter tensor.
        let mut store = ParamStore::new();
        store
            .insert("x", Tensor::from_vec(&[2], vec![0.0f32, -1.0]).unwrap())
            .unwrap();
        let mut adam = Adam::new();
        for _ in 0..400 {
            let x = store.get("x").unwrap();
            let grad: Vec<f32> = x.data().iter().map(|v| 2.0 * (v - 3.0)).collect();
            let g = Tensor::from_vec(&[2], grad).unwrap();
            adam.step(&mut store, &[("x".into(), g)], 0.05).unwrap();
        }
        for v in store.get("x").unwrap().data() {
            assert!((v - 3.0).abs() < 1e-2, "converged to {v}");
        }
    }

    #[test]
    fn adam_rejects_shape_mismatch_and_bad_lr() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::zeros(&[2])).unwrap();
        let mut adam = Adam::new();
        let bad = Tensor::zeros(&[3]);
        assert!(adam.step(&mut store, &[("x".into(), bad)], 0.1).is_err());
        let good = Tensor::zeros(&[2]);
        assert!(adam
            .step(&mut store, &[("x".into(), good)], f64::NAN)
            .is_err());
    }

    #[test]
    fn one_cycle_peaks_after_warmup_and_decays() {
        let total = 100;
        let peak = 1e-3;
        let lrs: Vec<f64> = (0..total)
            .map(|s| one_cycle_lr(s, total, peak, 0.1))
            .collect();
        let max = lrs.iter().cloned().fold(0.0, f64::max);
        assert!((max - peak).abs() < 1e-12);
        // Rises through warmup.
        assert!(lrs[0] < lrs[5] && lrs[5] < lrs[9]);
        // Decays after.
        assert!(lrs[20] > lrs[60] && lrs[60] > lrs[99]);
        // Strictly positive everywhere.
        assert!(lrs.iter().all(|&l| l > 0.0));
    }

    #[test]
    fn augment_zero_probability_is_identity() {
        let sample = &tiny_samples(1, 3)[0];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = augment(sample, 0.0, 0.0, &mut rng);
        assert_eq!(out.query.rgb.data(), sample.query.rgb.data());
        assert_eq!(out.roc_reference, sample.roc_reference);
    }

    #[test]
    fn background_noise_never_touches_object_pixels() {
        let sample = &tiny_samples(1, 4)[0];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = augment(sample, 1.0, 0.0, &mut rng);
        let mask = sample.query.mask.data();
        let before = sample.query.rgb.data();
        let after = out.query.rgb.data();
        let mut changed_background = 0usize;
        for i in 0..mask.len() {
            for c in 0..3 {
                if mask[i] {
                    assert_eq!(before[i * 3 + c], after[i * 3 + c]);
                } else if before[i * 3 + c] != after[i * 3 + c] {
                    changed_background += 1;
                }
            }
        }
        assert!(changed_background > 0, "background should actually change");
        // Augmented images must stay valid encoder inputs.
        for &v in after {
            assert!((0.0..=1.0).contains(&v));
        }
        // Ground truth untouched.
        assert_eq!(out.roc_query, sample.roc_query);
        assert_eq!(out.t_rq.to_rows_3x4(), sample.t_rq.to_rows_3x4());
    }

    #[test]
    fn corruption_respects_the_removal_cap() {
        let sample = &tiny_samples(1, 5)[0];
        for seed in 0..30u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = augment(sample, 0.0, 1.0, &mut rng);
            let before = sample.roc_reference.valid().count();
            let after = out.roc_reference.valid().count();
            assert!(after <= before);
            let removed = before - after;
            assert!(
                removed as f64 <= CORRUPTION_CAP * before as f64 + 1e-9,
                "removed {removed} of {before}"
            );
            // Surviving pixels keep their exact coordinates.
            for v in 0..out.roc_reference.height() {
                for u in 0..out.roc_reference.width() {
                    if let Some(got) = out.roc_reference.get(u, v) {
                        assert_eq!(Some(got), sample.roc_reference.get(u, v));
                    }
                }
            }
        }
    }

    #[test]
    fn tokenizer_training_reduces_loss_and_is_reproducible() {
        let samples = tiny_samples(6, 7);
        let config = TrainConfig {
            batch_size: 2,
            iterations: 40,
            peak_lr: 2e-3,
            warmup_frac: 0.1,
            background_prob: 0.0,
            corruption_prob: 0.0,
            seed: 9,
            eval_interval: 20,
        };
        let maps: Vec<RocMap> = samples.iter().map(|s| s.roc_query.clone()).collect();
        let (tok_a, log_a) =
            train_tokenizer(&maps[..4], &maps[4..], tiny_tok_config(), &config).unwrap();
        let (tok_b, log_b) =
            train_tokenizer(&maps[..4], &maps[4..], tiny_tok_config(), &config).unwrap();
        assert!(log_a.rows[0].loss > log_a.last_loss().unwrap());
        assert!(log_a.last_heldout().is_some());
        // Bit-identical given identical inputs.
        assert_eq!(tok_a.checksum().unwrap(), tok_b.checksum().unwrap());
        let curve_a: Vec<f64> = log_a.rows.iter().map(|r| r.loss).collect();
        let curve_b: Vec<f64> = log_b.rows.iter().map(|r| r.loss).collect();
        assert_eq!(curve_a, curve_b);
    }

    #[test]
    fn main_training_starts_near_uniform_and_improves() {
        let samples = tiny_samples(5, 11);
        let tok_config = tiny_tok_config();
        let tok = Tokenizer::new(tok_config, 13).unwrap();
        let encoder = EncoderConfig {
            width: 16,
            heads: 2,
            blocks: 1,
            patch: 16,
        };
        let fus = FusionConfig {
            width: 16,
            heads: 2,
            blocks: 1,
            values: ValueSource::RocPlusRgb,
        };
        let dec = DecoderConfig {
            width: 16,
            heads: 2,
            blocks: 1,
            vocab: tok_config.codebook_size,
            code_dim: tok_config.latent_dim,
        };
        let config = TrainConfig {
            batch_size: 2,
            iterations: 30,
            peak_lr: 2e-3,
            warmup_frac: 0.1,
            background_prob: 0.3,
            corruption_prob: 0.3,
            seed: 17,
            eval_interval: 15,
        };
        let (model, log) =
            train_main(&samples[..4], &samples[4..], &tok, encoder, fus, dec, &config).unwrap();
        // Untrained masked NLL sits at the uniform baseline.
        let uniform = (tok_config.codebook_size as f64).ln();
        assert!(
            (log.rows[0].loss - uniform).abs() < 0.05 * uniform,
            "initial loss {} vs ln K = {uniform}",
            log.rows[0].loss
        );
        // A short run on a tiny set should already move the loss down.
        let tail: f64 = log.rows.iter().rev().take(5).map(|r| r.loss).sum::<f64>() / 5.0;
        assert!(tail < log.rows[0].loss, "tail {tail} vs {}", log.rows[0].loss);
        assert!(log.last_heldout().is_some());
        assert!(model.checksum().unwrap().len() > 8);
    }

    #[test]
    fn main_training_is_bit_reproducible() {
        let samples = tiny_samples(3, 19);
        let tok_config = tiny_tok_config();
        let tok = Tokenizer::new(tok_config, 13).unwrap();
        let encoder = EncoderConfig {
            width: 16,
            heads: 2,
            blocks: 1,
            patch: 16,
        };
        let fus = FusionConfig {
            width: 16,
            heads: 2,
            blocks: 1,
            values: ValueSource::RocOnly,
        };
        let dec = DecoderConfig {
            width: 16,
            heads: 2,
            blocks: 1,
            vocab: tok_config.codebook_size,
            code_dim: tok_config.latent_dim,
        };
        let config = TrainConfig {
            batch_size: 2,
            iterations: 8,
            peak_lr: 1e-3,
            warmup_frac: 0.2,
            background_prob: 0.5,
            corruption_prob: 0.5,
            seed: 23,
            eval_interval: 8,
        };
        let (a, log_a) = train_main(&samples, &[], &tok, encoder, fus, dec, &config).unwrap();
        let (b, log_b) = train_main(&samples, &[], &tok, encoder, fus, dec, &config).unwrap();
        assert_eq!(a.checksum().unwrap(), b.checksum().unwrap());
        assert_eq!(
            log_a.rows.iter().map(|r| r.loss).collect::<Vec<_>>(),
            log_b.rows.iter().map(|r| r.loss).collect::<Vec<_>>()
        );
    }

    #[test]
    fn csv_log_has_header_and_rows() {
        let log = TrainLog {
            rows: vec![
                LogRow {
                    iteration: 0,
                    loss: 1.5,
                    lr: 1e-4,
                    heldout: None,
                },
                LogRow {
                    iteration: 1,
                    loss: 1.2,
                    lr: 2e-4,
                    heldout: Some(0.9),
                },
            ],
        };
        let csv = log.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "iteration,loss,lr,heldout");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].ends_with(','));
        assert!(lines[2].contains("0.9"));
        assert_eq!(log.last_heldout(), Some(0.9));
    }
}
