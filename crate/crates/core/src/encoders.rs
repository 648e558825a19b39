//! Patch encoders for the three input streams: one shared transformer for
//! query and reference RGB, a separate one for the reference coordinate
//! map. Both produce feature grids spatially aligned with the token grid
//! (patch size equals the tokenizer downsample factor).

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{BinaryMask, RocMap};
use crate::nn::{self, Binder, Init, ParamStore, Tv};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    /// Model width D.
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Patch size; must equal the tokenizer downsample factor so the
    /// feature grid aligns with the token grid.
    pub patch: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            width: 128,
            heads: 4,
            blocks: 4,
            patch: 16,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.blocks == 0 || self.patch == 0 {
            return Err(Error::InvalidArgument(
                "encoder width, heads, blocks, and patch must be positive".into(),
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

/// `(h, w, D)` features, one vector per patch position.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    data: Tensor<f32>,
}

/// Output of the fusion stack; shares the feature-grid layout.
pub type ConditionFeatures = FeatureGrid;

impl FeatureGrid {
    pub fn new(data: Tensor<f32>) -> Result<Self> {
        if data.rank() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "feature grid must be (h, w, D), got {:?}",
                data.shape()
            )));
        }
        if !data.all_finite() {
            return Err(Error::NonFinite("feature grid".into()));
        }
        Ok(FeatureGrid { data })
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.data
    }
}

/// Parameter names for one encoder: patch embedding, learned positional
/// table for `positions = grid_h * grid_w`, `blocks` transformer blocks,
/// and a final layer norm.
pub fn init_encoder<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    in_channels: usize,
    positions: usize,
    config: &EncoderConfig,
) -> Result<()> {
    config.validate()?;
    let d = config.width;
    nn::init_linear(
        store,
        rng,
        &format!("{prefix}.embed"),
        config.patch * config.patch * in_channels,
        d,
        Init::Xavier,
    )?;
    store.insert(
        &format!("{prefix}.pos"),
        nn::random_tensor(rng, &[positions, d], Init::Normal(0.02)),
    )?;
    for i in 0..config.blocks {
        nn::init_encoder_block(store, rng, &format!("{prefix}.blk{i}"), d, 4 * d)?;
    }
    nn::init_layer_norm(store, &format!("{prefix}.out_ln"), d)
}

/// Transformer tower shared by every encoder: patch embedding, positional
/// table, pre-norm blocks, final norm. Input `(B, H, W, C)`, output
/// `(B, h, w, D)`.
pub fn encoder_tower<T: Scalar>(
    b: &mut Binder<T>,
    x: &Tv,
    prefix: &str,
    config: &EncoderConfig,
) -> Result<Tv> {
    config.validate()?;
    let p = config.patch;
    let d = config.width;
    if x.rank() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "encoder input must be (B, H, W, C), got {:?}",
            x.shape
        )));
    }
    let (batch, h, w, c) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    if h % p != 0 || w % p != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{h}x{w} input not divisible by patch size {p}"
        )));
    }
    let (gh, gw) = (h / p, w / p);
    let (pos, pos_shape) = b.fetch(&format!("{prefix}.pos"))?;
    if pos_shape != [gh * gw, d] {
        return Err(Error::ShapeMismatch(format!(
            "positional table `{prefix}.pos` is {pos_shape:?}, expected [{}, {d}]",
            gh * gw
        )));
    }

    let patches = b.g.patchify(x.var, p);
    let patches = Tv::new(patches, &[batch, gh, gw, p * p * c]);
    let emb = nn::linear(b, &patches, &format!("{prefix}.embed"))?;
    let tokens = b.g.reshape(emb.var, &[batch, gh * gw, d]);
    let tokens = b.g.add_broadcast(tokens, pos);
    let mut t = Tv::new(tokens, &[batch, gh * gw, d]);
    for i in 0..config.blocks {
        t = nn::encoder_block(b, &t, &format!("{prefix}.blk{i}"), config.heads)?;
    }
    let t = nn::layer_norm(b, &t, &format!("{prefix}.out_ln"))?;
    let out = b.g.reshape(t.var, &[batch, gh, gw, d]);
    Ok(Tv::new(out, &[batch, gh, gw, d]))
}

fn run_tower(
    store: &ParamStore<f32>,
    prefix: &str,
    config: &EncoderConfig,
    input: Tensor<f32>,
) -> Result<FeatureGrid> {
    let shape = input.shape().to_vec();
    let mut g = crate::tensor::Graph::<f32>::new();
    let mut b = Binder::new(&mut g, store);
    let x = b.g.input("image");
    let x_tv = Tv::new(x, &shape);
    let out = encoder_tower(&mut b, &x_tv, prefix, config)?;
    let out_shape = out.shape.clone();
    g.eval(&[("image", &input)])?;
    FeatureGrid::new(
        g.value(out.var)
            .reshaped(&[out_shape[1], out_shape[2], out_shape[3]])?,
    )
}

/// Checkpoint prefix of the shared RGB encoder.
pub const RGB_PREFIX: &str = "enc_rgb";
/// Checkpoint prefix of the coordinate-map encoder.
pub const ROC_PREFIX: &str = "enc_roc";

/// Encode an `(H, W, 3)` RGB image in `[0, 1]`. Background pixels are
/// zeroed by the mask before patch embedding; the same weights serve both
/// the reference and query images.
pub fn encode_rgb(
    store: &ParamStore<f32>,
    config: &EncoderConfig,
    image: &Tensor<f32>,
    mask: &BinaryMask,
) -> Result<FeatureGrid> {
    let (h, w) = (mask.height(), mask.width());
    let input = rgb_input(image, mask)?.reshaped(&[1, h, w, 3])?;
    run_tower(store, RGB_PREFIX, config, input)
}

/// Mask-zeroed `(H, W, 3)` host tensor for the RGB tower. Values must
/// already lie in `[0, 1]`.
pub fn rgb_input(image: &Tensor<f32>, mask: &BinaryMask) -> Result<Tensor<f32>> {
    if image.rank() != 3 || image.shape()[2] != 3 {
        return Err(Error::ShapeMismatch(format!(
            "RGB input must be (H, W, 3), got {:?}",
            image.shape()
        )));
    }
    let (h, w) = (image.shape()[0], image.shape()[1]);
    if mask.height() != h || mask.width() != w {
        return Err(Error::ShapeMismatch(format!(
            "image {w}x{h} vs mask {}x{}",
            mask.width(),
            mask.height()
        )));
    }
    for &v in image.data() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidArgument(format!(
                "RGB values must lie in [0, 1], found {v}"
            )));
        }
    }
    let mut cleaned = vec![0.0f32; h * w * 3];
    for i in 0..h * w {
        if mask.data()[i] {
            cleaned[i * 3..(i + 1) * 3].copy_from_slice(&image.data()[i * 3..(i + 1) * 3]);
        }
    }
    Tensor::from_vec(&[h, w, 3], cleaned)
}

/// `(H, W, 4)` host tensor for the coordinate-map tower: three coordinate
/// channels plus the mask as a fourth.
pub fn roc_input(roc: &RocMap, mask: &BinaryMask) -> Result<Tensor<f32>> {
    let (h, w) = (roc.height(), roc.width());
    if mask.height() != h || mask.width() != w {
        return Err(Error::ShapeMismatch(format!(
            "map {w}x{h} vs mask {}x{}",
            mask.width(),
            mask.height()
        )));
    }
    let mut data = vec![0.0f32; h * w * 4];
    for i in 0..h * w {
        data[i * 4..i * 4 + 3].copy_from_slice(&roc.data()[i * 3..(i + 1) * 3]);
        data[i * 4 + 3] = if mask.data()[i] { 1.0 } else { 0.0 };
    }
    Tensor::from_vec(&[h, w, 4], data)
}

/// Encode a coordinate map with its object mask as a fourth channel. The
/// mask channel lets the encoder tell depth-absent foreground (mask 1,
/// coordinates zero) from background (mask 0).
pub fn encode_roc(
    store: &ParamStore<f32>,
    config: &EncoderConfig,
    roc: &RocMap,
    mask: &BinaryMask,
) -> Result<FeatureGrid> {
    let (h, w) = (roc.height(), roc.width());
    let input = roc_input(roc, mask)?.reshaped(&[1, h, w, 4])?;
    run_tower(store, ROC_PREFIX, config, input)
}
