//! Fusion stack: integrates reference features into the query stream to
//! produce the condition features that drive token generation.
//!
//! Each block first lets the query stream self-attend, then cross-attends
//! to the reference. Cross-attention affinities are computed strictly
//! within the RGB modality: queries come from the position-encoded query
//! RGB features and keys from the position-encoded reference RGB features,
//! both taken before the block stack, so coordinate content never touches
//! the affinity matrix. The values carry the reference coordinate features
//! (optionally with the RGB features added) so attention retrieves
//! coordinate payloads addressed by appearance.

use rand_chacha::ChaCha8Rng;

use crate::encoders::{ConditionFeatures, FeatureGrid};
use crate::error::{Error, Result};
use crate::nn::{self, Binder, Init, ParamStore, Tv};
use crate::tensor::{Graph, Scalar, Var};

/// What the cross-attention values carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueSource {
    RocOnly,
    RocPlusRgb,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FusionConfig {
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    pub values: ValueSource,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            width: 128,
            heads: 4,
            blocks: 4,
            values: ValueSource::RocPlusRgb,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.blocks == 0 {
            return Err(Error::InvalidArgument(
                "fusion width, heads, and blocks must be positive".into(),
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

/// Checkpoint prefix for all fusion parameters.
pub const FUSION_PREFIX: &str = "fusion";

/// Parameters: positional tables `fusion.pos_q` / `fusion.pos_r`
/// (the reference table is shared by the RGB and coordinate streams,
/// which live at the same pixel positions), per-block self-attention,
/// cross-attention, and feed-forward weights, and a final layer norm.
pub fn init_fusion<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    positions: usize,
    config: &FusionConfig,
) -> Result<()> {
    config.validate()?;
    let d = config.width;
    store.insert(
        &format!("{FUSION_PREFIX}.pos_q"),
        nn::random_tensor(rng, &[positions, d], Init::Normal(0.02)),
    )?;
    store.insert(
        &format!("{FUSION_PREFIX}.pos_r"),
        nn::random_tensor(rng, &[positions, d], Init::Normal(0.02)),
    )?;
    for i in 0..config.blocks {
        let blk = format!("{FUSION_PREFIX}.blk{i}");
        nn::init_layer_norm(store, &format!("{blk}.ln1"), d)?;
        nn::init_attention(store, rng, &format!("{blk}.self"), d)?;
        nn::init_attention(store, rng, &format!("{blk}.cross"), d)?;
        nn::init_layer_norm(store, &format!("{blk}.ln2"), d)?;
        nn::init_ffn(store, rng, &format!("{blk}.ffn"), d, 4 * d)?;
    }
    nn::init_layer_norm(store, &format!("{FUSION_PREFIX}.out_ln"), d)
}

/// Graph handles produced by [`fusion_tower`]: the fused output plus the
/// per-block attention-weight nodes for inspection.
pub struct FusionBuilt {
    pub out: Tv,
    pub self_probs: Vec<Var>,
    pub cross_probs: Vec<Var>,
}

/// Build the fusion stack. All three inputs are `(B, T, D)` token
/// sequences (query RGB, reference RGB, reference coordinate features).
pub fn fusion_tower<T: Scalar>(
    b: &mut Binder<T>,
    query_rgb: &Tv,
    ref_rgb: &Tv,
    ref_roc: &Tv,
    config: &FusionConfig,
) -> Result<FusionBuilt> {
    config.validate()?;
    let d = config.width;
    for s in [query_rgb, ref_rgb, ref_roc] {
        if s.rank() != 3 || s.shape[2] != d {
            return Err(Error::ShapeMismatch(format!(
                "fusion inputs must be (B, T, {d}), got {:?}",
                s.shape
            )));
        }
        if s.shape != query_rgb.shape {
            return Err(Error::ShapeMismatch(format!(
                "fusion inputs disagree: {:?} vs {:?}",
                query_rgb.shape, s.shape
            )));
        }
    }
    let t = query_rgb.shape[1];
    let (pos_q, pq_shape) = b.fetch(&format!("{FUSION_PREFIX}.pos_q"))?;
    let (pos_r, _) = b.fetch(&format!("{FUSION_PREFIX}.pos_r"))?;
    if pq_shape != [t, d] {
        return Err(Error::ShapeMismatch(format!(
            "positional table is {pq_shape:?}, expected [{t}, {d}]"
        )));
    }

    let q0 = Tv::new(b.g.add_broadcast(query_rgb.var, pos_q), &query_rgb.shape);
    let r0 = Tv::new(b.g.add_broadcast(ref_rgb.var, pos_r), &ref_rgb.shape);
    let roc0 = Tv::new(b.g.add_broadcast(ref_roc.var, pos_r), &ref_roc.shape);
    let v0 = match config.values {
        ValueSource::RocOnly => roc0.clone(),
        ValueSource::RocPlusRgb => Tv::new(b.g.add(roc0.var, r0.var), &roc0.shape),
    };

    let mut x = q0.clone();
    let mut self_probs = Vec::with_capacity(config.blocks);
    let mut cross_probs = Vec::with_capacity(config.blocks);
    for i in 0..config.blocks {
        let blk = format!("{FUSION_PREFIX}.blk{i}");
        let normed = nn::layer_norm(b, &x, &format!("{blk}.ln1"))?;
        let (attended, sp) =
            nn::attention_qkv(b, &normed, &normed, &normed, &format!("{blk}.self"), config.heads)?;
        self_probs.push(sp);
        x = Tv::new(b.g.add(x.var, attended.var), &x.shape);

        let (crossed, cp) =
            nn::attention_qkv(b, &q0, &r0, &v0, &format!("{blk}.cross"), config.heads)?;
        cross_probs.push(cp);
        x = Tv::new(b.g.add(x.var, crossed.var), &x.shape);

        let normed = nn::layer_norm(b, &x, &format!("{blk}.ln2"))?;
        let fed = nn::ffn(b, &normed, &format!("{blk}.ffn"))?;
        x = Tv::new(b.g.add(x.var, fed.var), &x.shape);
    }
    let out = nn::layer_norm(b, &x, &format!("{FUSION_PREFIX}.out_ln"))?;
    Ok(FusionBuilt {
        out,
        self_probs,
        cross_probs,
    })
}

/// Fuse the three feature grids into condition features aligned with the
/// query token grid.
pub fn fuse(
    store: &ParamStore<f32>,
    config: &FusionConfig,
    query_rgb: &FeatureGrid,
    ref_rgb: &FeatureGrid,
    ref_roc: &FeatureGrid,
) -> Result<ConditionFeatures> {
    let (h, w, d) = (query_rgb.height(), query_rgb.width(), query_rgb.dim());
    for grid in [ref_rgb, ref_roc] {
        if (grid.height(), grid.width(), grid.dim()) != (h, w, d) {
            return Err(Error::ShapeMismatch(format!(
                "feature grids disagree: {h}x{w}x{d} vs {}x{}x{}",
                grid.height(),
                grid.width(),
                grid.dim()
            )));
        }
    }
    let t = h * w;
    let mut g: Graph<f32> = Graph::new();
    let mut b = Binder::new(&mut g, store);
    let q = b.g.input("q");
    let r = b.g.input("r");
    let roc = b.g.input("roc");
    let built = fusion_tower(
        &mut b,
        &Tv::new(q, &[1, t, d]),
        &Tv::new(r, &[1, t, d]),
        &Tv::new(roc, &[1, t, d]),
        config,
    )?;
    g.eval(&[
        ("q", &query_rgb.tensor().reshaped(&[1, t, d])?),
        ("r", &ref_rgb.tensor().reshaped(&[1, t, d])?),
        ("roc", &ref_roc.tensor().reshaped(&[1, t, d])?),
    ])?;
    FeatureGrid::new(g.value(built.out.var).reshaped(&[h, w, d])?)
}
