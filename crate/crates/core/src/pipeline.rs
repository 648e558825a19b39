//! End-to-end pose estimation for one query/reference pair, and selection
//! among pose hypotheses from multiple references by mask-reprojection
//! IoU.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::decoder::{self, DecoderConfig, GenerationConfig};
use crate::encoders::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::fusion::{self, FusionConfig};
use crate::geometry::{
    backproject, compose_absolute, compute_normalization, estimate_diameter, recover_relative_pose,
    roc_reference, BinaryMask, CameraIntrinsics, DepthMap, RigidTransform, RocMap,
};
use crate::nn::ParamStore;
use crate::tensor::Tensor;
use crate::tokenizer::{TokenGrid, Tokenizer, TokenizerConfig};

/// One RGB-D observation with its object mask.
#[derive(Clone, Copy)]
pub struct ViewInput<'a> {
    pub rgb: &'a Tensor<f32>,
    pub depth: &'a DepthMap,
    pub mask: &'a BinaryMask,
}

impl<'a> From<&'a crate::synth::RenderedView> for ViewInput<'a> {
    fn from(view: &'a crate::synth::RenderedView) -> Self {
        ViewInput {
            rgb: &view.rgb,
            depth: &view.depth,
            mask: &view.mask,
        }
    }
}

/// The trained main network: both encoders, the fusion stack, and the
/// token decoder, in one parameter store.
#[derive(Debug, Clone)]
pub struct PoseModel {
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub decoder: DecoderConfig,
    pub store: ParamStore<f32>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct ModelSidecar {
    encoder: EncoderConfig,
    fusion: FusionConfig,
    decoder: DecoderConfig,
}

impl PoseModel {
    /// Fresh model for `positions = (image / patch)^2` grid cells.
    pub fn init(
        encoder: EncoderConfig,
        fusion: FusionConfig,
        decoder: DecoderConfig,
        positions: usize,
        seed: u64,
    ) -> Result<Self> {
        if encoder.width != fusion.width || encoder.width != decoder.width {
            return Err(Error::InvalidArgument(format!(
                "encoder/fusion/decoder widths disagree: {} / {} / {}",
                encoder.width, fusion.width, decoder.width
            )));
        }
        let mut rng: ChaCha8Rng = rand::SeedableRng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        encoders::init_encoder(&mut store, &mut rng, encoders::RGB_PREFIX, 3, positions, &encoder)?;
        encoders::init_encoder(&mut store, &mut rng, encoders::ROC_PREFIX, 4, positions, &encoder)?;
        fusion::init_fusion(&mut store, &mut rng, positions, &fusion)?;
        decoder::init_decoder(&mut store, &mut rng, positions, &decoder)?;
        Ok(PoseModel {
            encoder,
            fusion,
            decoder,
            store,
        })
    }

    /// The model must speak the tokenizer's vocabulary and grid layout.
    pub fn check_compatible(&self, tokenizer: &TokenizerConfig) -> Result<()> {
        if self.encoder.patch != tokenizer.downsample {
            return Err(Error::InvalidArgument(format!(
                "encoder patch {} vs tokenizer downsample {}",
                self.encoder.patch, tokenizer.downsample
            )));
        }
        if self.decoder.vocab != tokenizer.codebook_size {
            return Err(Error::InvalidArgument(format!(
                "decoder vocab {} vs codebook size {}",
                self.decoder.vocab, tokenizer.codebook_size
            )));
        }
        if self.decoder.code_dim != tokenizer.latent_dim {
            return Err(Error::InvalidArgument(format!(
                "decoder code dim {} vs codebook dim {}",
                self.decoder.code_dim, tokenizer.latent_dim
            )));
        }
        Ok(())
    }

    const WEIGHTS_FILE: &'static str = "model.cart";
    const CONFIG_FILE: &'static str = "model.json";

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.store.save(dir.join(Self::WEIGHTS_FILE))?;
        let sidecar = ModelSidecar {
            encoder: self.encoder,
            fusion: self.fusion,
            decoder: self.decoder,
        };
        fs::write(
            dir.join(Self::CONFIG_FILE),
            serde_json::to_vec_pretty(&sidecar)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let sidecar: ModelSidecar =
            serde_json::from_slice(&fs::read(dir.join(Self::CONFIG_FILE))?)?;
        sidecar.encoder.validate()?;
        sidecar.fusion.validate()?;
        sidecar.decoder.validate()?;
        let store: ParamStore<f32> = ParamStore::load(dir.join(Self::WEIGHTS_FILE))?;
        for (name, tensor) in store.iter() {
            if !tensor.all_finite() {
                return Err(Error::NonFinite(format!(
                    "checkpoint tensor `{name}` holds non-finite values"
                )));
            }
        }
        Ok(PoseModel {
            encoder: sidecar.encoder,
            fusion: sidecar.fusion,
            decoder: sidecar.decoder,
            store,
        })
    }

    pub fn checksum(&self) -> Result<String> {
        self.store.checksum()
    }
}

/// Where the query tokens come from: generated by the decoder, or
/// substituted ground truth (teacher forcing) to isolate downstream error
/// sources.
#[derive(Debug, Clone)]
pub enum TokenSource {
    Generate(GenerationConfig),
    Oracle(TokenGrid),
}

/// Everything the pair pipeline produces.
#[derive(Debug, Clone)]
pub struct PoseEstimate {
    pub t_rq: RigidTransform,
    pub t_qo: RigidTransform,
    pub roc_pred: RocMap,
    pub tokens: TokenGrid,
}

/// Run the full pipeline on one query/reference pair: reference ROC map,
/// encoders, fusion, token generation, detokenization, and pose recovery
/// against the query depth.
pub fn estimate_pose_pair(
    model: &PoseModel,
    tokenizer: &Tokenizer,
    query: ViewInput,
    reference: ViewInput,
    t_ro: &RigidTransform,
    intrinsics: &CameraIntrinsics,
    source: &TokenSource,
) -> Result<PoseEstimate> {
    model.check_compatible(tokenizer.config())?;
    if query.mask.data().iter().all(|&m| !m) {
        return Err(Error::EmptyMask("query mask".into()));
    }
    if reference.mask.data().iter().all(|&m| !m) {
        return Err(Error::EmptyMask("reference mask".into()));
    }

    let diameter = estimate_diameter(reference.mask, reference.depth, intrinsics)?;
    let ref_points = backproject(reference.depth, intrinsics, reference.mask)?;
    let s = compute_normalization(&ref_points, diameter)?;
    let (roc_ref, _) = roc_reference(reference.depth, reference.mask, intrinsics, &s)?;

    let q_rgb = encoders::encode_rgb(&model.store, &model.encoder, query.rgb, query.mask)?;
    let r_rgb = encoders::encode_rgb(&model.store, &model.encoder, reference.rgb, reference.mask)?;
    let r_roc = encoders::encode_roc(&model.store, &model.encoder, &roc_ref, reference.mask)?;
    let cond = fusion::fuse(&model.store, &model.fusion, &q_rgb, &r_rgb, &r_roc)?;

    let codebook = tokenizer.store().get("codebook")?;
    let tokens = match source {
        TokenSource::Generate(config) => {
            decoder::generate(&model.store, &model.decoder, codebook, &cond, config)?
        }
        TokenSource::Oracle(grid) => {
            if grid.height() != cond.height() || grid.width() != cond.width() {
                return Err(Error::ShapeMismatch(format!(
                    "oracle grid {}x{} vs token grid {}x{}",
                    grid.width(),
                    grid.height(),
                    cond.width(),
                    cond.height()
                )));
            }
            grid.clone()
        }
    };

    let roc_pred = tokenizer.detokenize(&tokens)?;
    let t_rq = recover_relative_pose(&roc_pred, query.depth, query.mask, intrinsics, &s)?;
    let t_qo = compose_absolute(&t_rq, t_ro);
    Ok(PoseEstimate {
        t_rq,
        t_qo,
        roc_pred,
        tokens,
    })
}

/// IoU between the query mask and the reference mask carried into the
/// query view: backproject the reference masked depth, move it by
/// `T_RQ^-1`, project into the query image, and splat one rounded pixel
/// per point.
pub fn reproject_mask_iou(
    t_rq: &RigidTransform,
    ref_depth: &DepthMap,
    ref_mask: &BinaryMask,
    intrinsics: &CameraIntrinsics,
    query_mask: &BinaryMask,
) -> Result<f64> {
    let points = backproject(ref_depth, intrinsics, ref_mask)?;
    let into_query = t_rq.inverse();
    let mut raster = BinaryMask::filled(query_mask.width(), query_mask.height(), false);
    let mut any_in_front = false;
    let mut any_point = false;
    for p in points.valid_points() {
        any_point = true;
        let q = into_query.apply(p);
        if q.z <= 0.0 {
            continue;
        }
        any_in_front = true;
        let u = (intrinsics.fx * q.x / q.z + intrinsics.cx).round();
        let v = (intrinsics.fy * q.y / q.z + intrinsics.cy).round();
        if u >= 0.0 && v >= 0.0 && (u as usize) < raster.width() && (v as usize) < raster.height() {
            raster.set(u as usize, v as usize, true);
        }
    }
    if !any_point {
        return Err(Error::EmptyMask("reference mask".into()));
    }
    if !any_in_front {
        return Err(Error::InvalidArgument(
            "all reprojected points lie behind the query camera".into(),
        ));
    }
    let mut intersection = 0usize;
    let mut union = 0usize;
    for (a, b) in raster.data().iter().zip(query_mask.data()) {
        if *a && *b {
            intersection += 1;
        }
        if *a || *b {
            union += 1;
        }
    }
    if union == 0 {
        return Err(Error::EmptyMask("query mask".into()));
    }
    Ok(intersection as f64 / union as f64)
}

/// A pose candidate from one reference view.
#[derive(Debug, Clone)]
pub struct PoseHypothesis {
    pub reference_id: usize,
    pub t_rq: RigidTransform,
    pub t_qo: RigidTransform,
    pub miou: f64,
}

impl PoseHypothesis {
    pub fn new(
        reference_id: usize,
        t_rq: RigidTransform,
        t_qo: RigidTransform,
        miou: f64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&miou) {
            return Err(Error::InvalidArgument(format!(
                "mIoU {miou} outside [0, 1]"
            )));
        }
        Ok(PoseHypothesis {
            reference_id,
            t_rq,
            t_qo,
            miou,
        })
    }
}

/// The hypothesis with the best mask-reprojection score; ties go to the
/// lowest reference id.
pub fn multiview_select(hypotheses: &[PoseHypothesis]) -> Result<&PoseHypothesis> {
    let mut best: Option<&PoseHypothesis> = None;
    for h in hypotheses {
        best = Some(match best {
            None => h,
            Some(b) => {
                if h.miou > b.miou || (h.miou == b.miou && h.reference_id < b.reference_id) {
                    h
                } else {
                    b
                }
            }
        });
    }
    best.ok_or_else(|| Error::InvalidArgument("no hypotheses to select from".into()))
}

/// Record written per evaluated sample.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub t_rq: [[f64; 4]; 3],
    pub t_qo: [[f64; 4]; 3],
    pub miou: f64,
    pub gen_config: Option<GenerationConfig>,
    pub timing_ms: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::{Order, Sampling, Scheduler};
    use crate::fusion::ValueSource;
    use crate::synth::{make_primitive, render_view, PrimitiveKind, SceneSample};
    use crate::tokenizer::TokenizerConfig;
    use nalgebra::{Matrix3, Rotation3, Vector3};
    use rand::{Rng, SeedableRng};

    fn tiny_tokenizer() -> Tokenizer {
        let mut tok = Tokenizer::new(
            TokenizerConfig {
                downsample: 16,
                codebook_size: 16,
                latent_dim: 4,
                beta: 0.25,
                input_channels: 4,
            },
            7,
        )
        .unwrap();
        // An untrained decoder emits validity scores near zero, so every
        // decoded pixel would be dropped and pose recovery would have no
        // correspondences. Push the validity-channel bias of the output
        // layer well past the 0.5 threshold so the plumbing can be
        // exercised end to end without training.
        let bias = tok.store().get("dec.up2.b").unwrap();
        let mut data = bias.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            if i % 4 == 3 {
                *v = 2.0;
            }
        }
        let shape = bias.shape().to_vec();
        tok.store_mut()
            .set("dec.up2.b", Tensor::from_vec(&shape, data).unwrap())
            .unwrap();
        tok
    }

    fn tiny_model() -> PoseModel {
        PoseModel::init(
            EncoderConfig {
                width: 16,
                heads: 2,
                blocks: 1,
                patch: 16,
            },
            FusionConfig {
                width: 16,
                heads: 2,
                blocks: 1,
                values: ValueSource::RocPlusRgb,
            },
            DecoderConfig {
                width: 16,
                heads: 2,
                blocks: 1,
                vocab: 16,
                code_dim: 4,
            },
            9,
            3,
        )
        .unwrap()
    }

    fn test_scene() -> SceneSample {
        let object = make_primitive(
            PrimitiveKind::Box {
                extents: [0.12, 0.16, 0.2],
            },
            42,
        )
        .unwrap();
        let intrinsics = CameraIntrinsics::new(60.0, 60.0, 24.0, 24.0, 48, 48).unwrap();
        let t_ro = RigidTransform::new(Matrix3::identity(), Vector3::new(0.0, 0.0, 0.6)).unwrap();
        let rot = Matrix3::from(Rotation3::from_axis_angle(&Vector3::y_axis(), 0.35));
        let t_qo = RigidTransform::new(rot, Vector3::new(0.02, -0.01, 0.65)).unwrap();
        crate::synth::make_pair(
            &object,
            "box",
            &t_ro,
            &t_qo,
            &intrinsics,
            &crate::synth::OcclusionConfig::none(),
            11,
        )
        .unwrap()
    }

    fn argmax_gen(seed: u64) -> GenerationConfig {
        GenerationConfig {
            steps: 4,
            scheduler: Scheduler::Cosine,
            order: Order::Random,
            sampling: Sampling::Argmax,
            seed,
        }
    }

    #[test]
    fn pipeline_runs_and_is_deterministic_with_argmax() {
        let scene = test_scene();
        let model = tiny_model();
        let tok = tiny_tokenizer();
        let source = TokenSource::Generate(argmax_gen(5));
        let a = estimate_pose_pair(
            &model,
            &tok,
            (&scene.query).into(),
            (&scene.reference).into(),
            &scene.t_ro,
            &scene.intrinsics,
            &source,
        )
        .unwrap();
        let b = estimate_pose_pair(
            &model,
            &tok,
            (&scene.query).into(),
            (&scene.reference).into(),
            &scene.t_ro,
            &scene.intrinsics,
            &source,
        )
        .unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.t_rq.to_rows_3x4(), b.t_rq.to_rows_3x4());
        // Composition consistency with the reference pose.
        let recomposed = a.t_rq.inverse().compose(&scene.t_ro);
        assert!(recomposed.rotation_angle_deg_to(&a.t_qo) < 1e-9);
    }

    #[test]
    fn oracle_tokens_equal_manual_detokenize_and_recover() {
        let scene = test_scene();
        let model = tiny_model();
        let tok = tiny_tokenizer();
        let gt_tokens = tok.tokenize(&scene.roc_query).unwrap();
        let est = estimate_pose_pair(
            &model,
            &tok,
            (&scene.query).into(),
            (&scene.reference).into(),
            &scene.t_ro,
            &scene.intrinsics,
            &TokenSource::Oracle(gt_tokens.clone()),
        )
        .unwrap();

        // The same computation by hand, bypassing the network entirely.
        let roc = tok.detokenize(&gt_tokens).unwrap();
        let want = recover_relative_pose(
            &roc,
            &scene.query.depth,
            &scene.query.mask,
            &scene.intrinsics,
            &scene.normalization,
        )
        .unwrap();
        assert!(est.t_rq.rotation_angle_deg_to(&want) < 1e-9);
        assert!(est.t_rq.translation_distance_to(&want) < 1e-12);
    }

    #[test]
    fn empty_query_mask_is_rejected() {
        let scene = test_scene();
        let model = tiny_model();
        let tok = tiny_tokenizer();
        let empty = BinaryMask::filled(48, 48, false);
        let query = ViewInput {
            rgb: &scene.query.rgb,
            depth: &scene.query.depth,
            mask: &empty,
        };
        let err = estimate_pose_pair(
            &model,
            &tok,
            query,
            (&scene.reference).into(),
            &scene.t_ro,
            &scene.intrinsics,
            &TokenSource::Generate(argmax_gen(1)),
        )
        .unwrap_err();
        assert!(matches!(err, Error::EmptyMask(_)));
    }

    #[test]
    fn model_save_load_round_trip() {
        let model = tiny_model();
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path()).unwrap();
        let loaded = PoseModel::load(dir.path()).unwrap();
        assert_eq!(model.checksum().unwrap(), loaded.checksum().unwrap());
        assert_eq!(model.encoder, loaded.encoder);
        assert_eq!(model.decoder, loaded.decoder);
    }

    #[test]
    fn identity_reprojection_overlaps_itself() {
        let scene = test_scene();
        let iou = reproject_mask_iou(
            &RigidTransform::identity(),
            &scene.reference.depth,
            &scene.reference.mask,
            &scene.intrinsics,
            &scene.reference.mask,
        )
        .unwrap();
        assert!(iou >= 0.95, "self-IoU {iou}");
        assert!(iou <= 1.0);
    }

    #[test]
    fn out_of_frame_transform_gives_zero_iou() {
        let scene = test_scene();
        // Slide the object far sideways in the query frame.
        let t = RigidTransform::new(Matrix3::identity(), Vector3::new(-10.0, 0.0, 0.0)).unwrap();
        let iou = reproject_mask_iou(
            &t.inverse(),
            &scene.reference.depth,
            &scene.reference.mask,
            &scene.intrinsics,
            &scene.reference.mask,
        )
        .unwrap();
        assert_eq!(iou, 0.0);
        // Behind the camera entirely: an error.
        let behind =
            RigidTransform::new(Matrix3::identity(), Vector3::new(0.0, 0.0, 10.0)).unwrap();
        assert!(reproject_mask_iou(
            &behind,
            &scene.reference.depth,
            &scene.reference.mask,
            &scene.intrinsics,
            &scene.reference.mask,
        )
        .is_err());
    }

    #[test]
    fn iou_stays_in_unit_interval_under_perturbations() {
        let scene = test_scene();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let axis = nalgebra::Unit::new_normalize(Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ));
            let rot = Matrix3::from(Rotation3::from_axis_angle(&axis, rng.gen_range(0.0..0.4)));
            let t = RigidTransform::new(
                rot,
                Vector3::new(
                    rng.gen_range(-0.05..0.05),
                    rng.gen_range(-0.05..0.05),
                    rng.gen_range(-0.05..0.05),
                ),
            )
            .unwrap();
            let iou = reproject_mask_iou(
                &t,
                &scene.reference.depth,
                &scene.reference.mask,
                &scene.intrinsics,
                &scene.query.mask,
            )
            .unwrap();
            assert!((0.0..=1.0).contains(&iou));
        }
    }

    #[test]
    fn selection_prefers_higher_miou_with_lowest_id_ties() {
        let t = RigidTransform::identity();
        let hs = vec![
            PoseHypothesis::new(0, t, t, 0.3).unwrap(),
            PoseHypothesis::new(1, t, t, 0.9).unwrap(),
            PoseHypothesis::new(2, t, t, 0.9).unwrap(),
        ];
        assert_eq!(multiview_select(&hs).unwrap().reference_id, 1);
        assert_eq!(multiview_select(&hs[..1]).unwrap().reference_id, 0);
        assert!(multiview_select(&[]).is_err());
        assert!(PoseHypothesis::new(0, t, t, 1.2).is_err());
    }

    #[test]
    fn selection_beats_median_on_graded_hypotheses() {
        // Four hypotheses per trial: ground truth perturbed by rotations
        // of increasing size. Selection by reprojection IoU should pick a
        // pose no worse than the median error in most trials.
        let object = make_primitive(
            PrimitiveKind::Box {
                extents: [0.12, 0.16, 0.2],
            },
            21,
        )
        .unwrap();
        let intrinsics = CameraIntrinsics::new(60.0, 60.0, 24.0, 24.0, 48, 48).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        let mut wins = 0usize;
        let trials = 25usize;
        for _ in 0..trials {
            let rot = Matrix3::from(Rotation3::from_axis_angle(
                &nalgebra::Unit::new_normalize(Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )),
                rng.gen_range(0.0..1.0),
            ));
            let t_ro = RigidTransform::new(rot, Vector3::new(0.0, 0.0, 0.6)).unwrap();
            let reference = render_view(&object, &t_ro, &intrinsics).unwrap();
            // The query view is the reference view itself; the true
            // relative pose is the identity.
            let mut errs = Vec::new();
            let mut hyps = Vec::new();
            for (i, mag) in [0.03, 0.1, 0.25, 0.5].iter().enumerate() {
                let axis = nalgebra::Unit::new_normalize(Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ));
                let perturb = Matrix3::from(Rotation3::from_axis_angle(&axis, *mag));
                let hyp = RigidTransform::new(perturb, Vector3::zeros()).unwrap();
                let iou = reproject_mask_iou(
                    &hyp,
                    &reference.depth,
                    &reference.mask,
                    &intrinsics,
                    &reference.mask,
                )
                .unwrap();
                errs.push(hyp.rotation_angle_deg_to(&RigidTransform::identity()));
                hyps.push(PoseHypothesis::new(i, hyp, hyp, iou).unwrap());
            }
            let selected = multiview_select(&hyps).unwrap();
            let selected_err = errs[selected.reference_id];
            let mut sorted = errs.clone();
            sorted.sort_by(f64::total_cmp);
            let median = 0.5 * (sorted[1] + sorted[2]);
            if selected_err <= median {
                wins += 1;
            }
        }
        assert!(
            wins * 100 >= trials * 80,
            "selection beat the median in only {wins}/{trials} trials"
        );
    }
}
