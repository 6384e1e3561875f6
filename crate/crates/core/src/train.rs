//! Alternating min-max training, architecture variants, and stability
//! diagnostics.
//!
//! Each iteration first fixes the segmentor and trains the critic for one
//! ascent step on the shared multi-scale loss, then fixes the critic and
//! trains the segmentor for one descent step on the same loss. When enabled,
//! every critic parameter is clamped into [-c, c] after its update.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::dataset::{load_split, DatasetHandle, Split};
use crate::error::{Error, Result};
use crate::graph::{BnMode, Graph, NodeId};
use crate::layers::ParamMode;
use crate::loss::{
    average_multi_critic_loss, mask_image, multiscale_feature_l1, multiscale_l1,
    pixelwise_baseline_loss, LossConfig,
};
use crate::metrics::evaluate_volume;
use crate::models::{
    build_critic, build_segmentor, segmentor_forward, NetParams, NetSpec,
};
use crate::optim::{clip_weights, max_abs, zero_grads, RmsProp, StepSign};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::volume::{
    center_crop2d, normalize_intensity, random_crop_pair, restack, slice_axial, Volume, Voxels,
};

pub const DEFAULT_THRESHOLD: f32 = 0.5;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
#[allow(non_camel_case_types)]
pub enum Variant {
    S1_1C,
    S3_1C,
    S3_3C,
    S3_3C_S0,
    S3_3C_S3,
    UnetBaseline,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::S1_1C => "s1_1c",
            Variant::S3_1C => "s3_1c",
            Variant::S3_3C => "s3_3c",
            Variant::S3_3C_S0 => "s3_3c_s0",
            Variant::S3_3C_S3 => "s3_3c_s3",
            Variant::UnetBaseline => "unet_baseline",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "s1_1c" => Ok(Variant::S1_1C),
            "s3_1c" => Ok(Variant::S3_1C),
            "s3_3c" => Ok(Variant::S3_3C),
            "s3_3c_s0" => Ok(Variant::S3_3C_S0),
            "s3_3c_s3" => Ok(Variant::S3_3C_S3),
            "unet_baseline" => Ok(Variant::UnetBaseline),
            other => Err(Error::config(format!("unknown variant '{other}'"))),
        }
    }

    /// The architecture-comparison set, in report order.
    pub fn ablation_set() -> [Variant; 5] {
        [
            Variant::S1_1C,
            Variant::S3_1C,
            Variant::S3_3C,
            Variant::S3_3C_S0,
            Variant::S3_3C_S3,
        ]
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub variant: Variant,
    pub classes: usize,
    pub image_channels: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub max_iters: usize,
    /// Critic weight-clipping range; `None` disables clipping.
    pub clip_c: Option<f64>,
    pub seed: u64,
    pub base_feature_maps: usize,
    pub eval_every: usize,
    /// Square crop edge for training (random) and evaluation (centered).
    pub crop: usize,
    /// Whether the raw masked input participates in the loss as scale 0.
    pub include_input_scale: bool,
}

impl TrainConfig {
    /// Desk-scale defaults: small feature maps and crops that train on a CPU
    /// in minutes.
    pub fn desk_defaults() -> Self {
        TrainConfig {
            variant: Variant::S3_3C,
            classes: 3,
            image_channels: 3,
            batch_size: 16,
            lr: 2e-4,
            max_iters: 2000,
            clip_c: Some(0.01),
            seed: 7,
            base_feature_maps: 16,
            eval_every: 100,
            crop: 64,
            include_input_scale: true,
        }
    }

    /// Published training constants at full scale.
    pub fn paper_defaults() -> Self {
        TrainConfig {
            variant: Variant::S3_3C,
            classes: 3,
            image_channels: 3,
            batch_size: 64,
            lr: 2e-5,
            max_iters: 50_000,
            clip_c: Some(0.01),
            seed: 7,
            base_feature_maps: 64,
            eval_every: 500,
            crop: 160,
            include_input_scale: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1".to_string()));
        }
        if self.lr <= 0.0 {
            return Err(Error::config("lr must be positive".to_string()));
        }
        if self.classes == 0 || self.image_channels == 0 {
            return Err(Error::config("classes and image_channels must be positive".to_string()));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every must be at least 1".to_string()));
        }
        if let Some(c) = self.clip_c {
            if c <= 0.0 {
                return Err(Error::config("clip_c must be positive when set".to_string()));
            }
        }
        if self.crop % 16 != 0 {
            return Err(Error::config(format!(
                "crop {} must be divisible by 16 (four halvings)",
                self.crop
            )));
        }
        Ok(())
    }
}

/// Assembled networks and loss wiring for one variant.
pub struct VariantNets<S: Scalar> {
    pub variant: Variant,
    pub segmentors: Vec<NetParams<S>>,
    pub critics: Vec<NetParams<S>>,
    /// Scale selection for the adversarial variants; `None` for the baseline.
    pub loss_cfg: Option<LossConfig>,
}

fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_mul(0x9E3779B97F4A7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Build the networks of `cfg.variant`:
/// - S1-1C: one (segmentor, critic) pair per class;
/// - S3-1C: one multi-class segmentor, one critic fed the per-class masked
///   images concatenated along the channel dimension;
/// - S3-3C (and its single-scale ablations): one multi-class segmentor and
///   one critic per class, losses averaged;
/// - the baseline: one segmentor, no critic, pixel-wise loss.
pub fn assemble_variant<S: Scalar>(cfg: &TrainConfig, seed: u64) -> Result<VariantNets<S>> {
    cfg.validate()?;
    let base = cfg.base_feature_maps;
    let img_c = cfg.image_channels;
    let mut segmentors = Vec::new();
    let mut critics = Vec::new();

    match cfg.variant {
        Variant::S1_1C => {
            for k in 0..cfg.classes {
                let s_spec = NetSpec::segmentor(img_c, 1).with_base(base);
                segmentors.push(build_segmentor(&s_spec, mix_seed(seed, 100 + k as u64))?);
                let c_spec = NetSpec::critic(img_c).with_base(base);
                critics.push(build_critic(&c_spec, mix_seed(seed, 200 + k as u64))?);
            }
        }
        Variant::S3_1C => {
            let s_spec = NetSpec::segmentor(img_c, cfg.classes).with_base(base);
            segmentors.push(build_segmentor(&s_spec, mix_seed(seed, 100))?);
            let c_spec = NetSpec::critic(img_c * cfg.classes).with_base(base);
            critics.push(build_critic(&c_spec, mix_seed(seed, 200))?);
        }
        Variant::S3_3C | Variant::S3_3C_S0 | Variant::S3_3C_S3 => {
            let s_spec = NetSpec::segmentor(img_c, cfg.classes).with_base(base);
            segmentors.push(build_segmentor(&s_spec, mix_seed(seed, 100))?);
            for k in 0..cfg.classes {
                let c_spec = NetSpec::critic(img_c).with_base(base);
                critics.push(build_critic(&c_spec, mix_seed(seed, 200 + k as u64))?);
            }
        }
        Variant::UnetBaseline => {
            let s_spec = NetSpec::segmentor(img_c, cfg.classes).with_base(base);
            segmentors.push(build_segmentor(&s_spec, mix_seed(seed, 100))?);
        }
    }

    let loss_cfg = match cfg.variant {
        Variant::UnetBaseline => None,
        Variant::S3_3C_S0 => Some(LossConfig::input_only()),
        Variant::S3_3C_S3 => {
            let layers = critics[0].spec.down_blocks;
            Some(LossConfig::deepest_only(layers))
        }
        _ => {
            let layers = critics[0].spec.down_blocks;
            Some(LossConfig::multiscale(layers, cfg.include_input_scale))
        }
    };

    Ok(VariantNets {
        variant: cfg.variant,
        segmentors,
        critics,
        loss_cfg,
    })
}

impl<S: Scalar> VariantNets<S> {
    pub fn segmentor_parameters(&self) -> Vec<Tensor<S>> {
        self.segmentors.iter().flat_map(|n| n.parameters()).collect()
    }

    pub fn critic_parameters(&self) -> Vec<Tensor<S>> {
        self.critics.iter().flat_map(|n| n.parameters()).collect()
    }

    pub fn set_mode(&self, mode: BnMode) {
        for n in self.segmentors.iter().chain(self.critics.iter()) {
            n.set_mode(mode);
        }
    }

    /// All tensor records for checkpointing, parameters then buffers, nets in
    /// assembly order.
    pub fn named_records(&self) -> Vec<(String, &'static str, Tensor<S>)> {
        let mut out = Vec::new();
        for (i, n) in self.segmentors.iter().enumerate() {
            for (name, role, t) in n.named_parameters() {
                out.push((format!("s{i}.{name}"), role, t));
            }
            for (name, role, t) in n.named_buffers() {
                out.push((format!("s{i}.{name}"), role, t));
            }
        }
        for (i, n) in self.critics.iter().enumerate() {
            for (name, role, t) in n.named_parameters() {
                out.push((format!("c{i}.{name}"), role, t));
            }
            for (name, role, t) in n.named_buffers() {
                out.push((format!("c{i}.{name}"), role, t));
            }
        }
        out
    }
}

/// One training batch: images [B, C, S, S] and per-class binary maps
/// [B, classes, S, S].
pub struct Batch<S: Scalar> {
    pub x: Tensor<S>,
    pub gt: Tensor<S>,
}

/// Which player's parameters stay trainable while evaluating the shared
/// objective.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Player {
    Critic,
    Segmentor,
}

fn forward_predictions<S: Scalar>(
    g: &mut Graph<S>,
    nets: &VariantNets<S>,
    x: NodeId,
    seg_mode: ParamMode,
) -> Result<Vec<NodeId>> {
    nets.segmentors
        .iter()
        .map(|n| segmentor_forward(g, n, x, seg_mode))
        .collect()
}

/// Build the variant's loss node over one batch. `player` controls which
/// side's parameters receive gradients; the value of the loss is the same
/// either way.
fn build_loss<S: Scalar>(
    g: &mut Graph<S>,
    nets: &VariantNets<S>,
    x: NodeId,
    gt: NodeId,
    player: Player,
) -> Result<NodeId> {
    let (seg_mode, critic_mode) = match player {
        Player::Critic => (ParamMode::Frozen, ParamMode::Trainable),
        Player::Segmentor => (ParamMode::Trainable, ParamMode::Frozen),
    };
    let preds = forward_predictions(g, nets, x, seg_mode)?;

    match nets.variant {
        Variant::UnetBaseline => pixelwise_baseline_loss(g, preds[0], gt),
        Variant::S1_1C => {
            let cfg = nets.loss_cfg.as_ref().expect("adversarial variant");
            let mut losses = Vec::with_capacity(nets.critics.len());
            for (k, critic) in nets.critics.iter().enumerate() {
                let gt_k = g.select_channels(gt, k, 1)?;
                losses.push(multiscale_l1(g, critic, x, preds[k], gt_k, cfg, critic_mode)?);
            }
            average_multi_critic_loss(g, &losses)
        }
        Variant::S3_1C => {
            let cfg = nets.loss_cfg.as_ref().expect("adversarial variant");
            let classes = nets.segmentors[0].spec.out_channels;
            let mut masked_pred = Vec::with_capacity(classes);
            let mut masked_gt = Vec::with_capacity(classes);
            for k in 0..classes {
                let pred_k = g.select_channels(preds[0], k, 1)?;
                let gt_k = g.select_channels(gt, k, 1)?;
                masked_pred.push(mask_image(g, x, pred_k)?);
                masked_gt.push(mask_image(g, x, gt_k)?);
            }
            let cat_pred = g.concat_channels(&masked_pred)?;
            let cat_gt = g.concat_channels(&masked_gt)?;
            multiscale_feature_l1(g, &nets.critics[0], cat_pred, cat_gt, cfg, critic_mode)
        }
        Variant::S3_3C | Variant::S3_3C_S0 | Variant::S3_3C_S3 => {
            let cfg = nets.loss_cfg.as_ref().expect("adversarial variant");
            let mut losses = Vec::with_capacity(nets.critics.len());
            for (k, critic) in nets.critics.iter().enumerate() {
                let pred_k = g.select_channels(preds[0], k, 1)?;
                let gt_k = g.select_channels(gt, k, 1)?;
                losses.push(multiscale_l1(g, critic, x, pred_k, gt_k, cfg, critic_mode)?);
            }
            average_multi_critic_loss(g, &losses)
        }
    }
}

/// Evaluate the shared objective on a batch without updating anything.
pub fn compute_shared_loss<S: Scalar>(
    nets: &VariantNets<S>,
    batch: &Batch<S>,
    player: Player,
) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.leaf(&batch.x);
    let gt = g.leaf(&batch.gt);
    let loss = build_loss(&mut g, nets, x, gt, player)?;
    Ok(g.scalar_value(loss).as_f64())
}

/// One critic ascent step with the segmentor fixed: compute the shared loss,
/// backpropagate into the critic only, apply the sign-flipped RMSProp update,
/// then clamp the critic's weights when clipping is on. Returns the loss
/// value before the update.
pub fn critic_step<S: Scalar>(
    nets: &VariantNets<S>,
    opt: &mut RmsProp<S>,
    batch: &Batch<S>,
    clip_c: Option<f64>,
) -> Result<f64> {
    let params = nets.critic_parameters();
    let mut g = Graph::new();
    let x = g.leaf(&batch.x);
    let gt = g.leaf(&batch.gt);
    let loss = build_loss(&mut g, nets, x, gt, Player::Critic)?;
    let value = g.scalar_value(loss).as_f64();
    if params.is_empty() {
        return Ok(value);
    }
    zero_grads(&params);
    g.backward(loss)?;
    opt.step(&params, StepSign::Ascend)?;
    if let Some(c) = clip_c {
        clip_weights(&params, S::from_f64(c));
    }
    Ok(value)
}

/// One segmentor descent step with the critic fixed. Returns the loss value
/// before the update.
pub fn segmentor_step<S: Scalar>(
    nets: &VariantNets<S>,
    opt: &mut RmsProp<S>,
    batch: &Batch<S>,
) -> Result<f64> {
    let params = nets.segmentor_parameters();
    let mut g = Graph::new();
    let x = g.leaf(&batch.x);
    let gt = g.leaf(&batch.gt);
    let loss = build_loss(&mut g, nets, x, gt, Player::Segmentor)?;
    let value = g.scalar_value(loss).as_f64();
    zero_grads(&params);
    g.backward(loss)?;
    opt.step(&params, StepSign::Descend)?;
    Ok(value)
}

// --- Data plumbing ----------------------------------------------------------

/// A training/validation sample with its axial slices pre-extracted and
/// image intensities normalized.
pub struct PreparedSample {
    pub image_slices: Vec<Volume>,
    pub label_slices: Vec<Volume>,
}

pub fn prepare_split(handle: &DatasetHandle, split: Split) -> Result<Vec<PreparedSample>> {
    let samples = load_split(handle, split)?;
    samples
        .into_iter()
        .map(|s| {
            let image = normalize_intensity(&s.image)?;
            Ok(PreparedSample {
                image_slices: slice_axial(&image),
                label_slices: slice_axial(&s.label),
            })
        })
        .collect()
}

fn slice_to_f32(v: &Volume) -> Vec<f32> {
    match &v.voxels {
        Voxels::F32(d) => d.clone(),
        Voxels::U8(d) => d.iter().map(|&x| x as f32).collect(),
    }
}

fn assemble_batch<S: Scalar>(
    samples: &[PreparedSample],
    picks: &[(usize, usize)],
    crop: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Batch<S>> {
    let mut xs: Vec<S> = Vec::new();
    let mut gts: Vec<S> = Vec::new();
    let mut channels = 0;
    let mut classes = 0;
    for &(si, zi) in picks {
        let sample = &samples[si];
        let (img, lbl) = random_crop_pair(&sample.image_slices[zi], &sample.label_slices[zi], crop, rng)?;
        channels = img.channels();
        classes = lbl.channels();
        xs.extend(slice_to_f32(&img).iter().map(|&v| S::from_f64(v as f64)));
        gts.extend(slice_to_f32(&lbl).iter().map(|&v| S::from_f64(v as f64)));
    }
    let b = picks.len();
    Ok(Batch {
        x: Tensor::from_shape_vec(&[b, channels, crop, crop], xs)?,
        gt: Tensor::from_shape_vec(&[b, classes, crop, crop], gts)?,
    })
}

/// Per-class probability maps for a batch of image slices, concatenating the
/// per-class segmentors of S1-1C into one map.
fn predict_batch<S: Scalar>(nets: &VariantNets<S>, x: &Tensor<S>) -> Result<(Vec<S>, usize)> {
    let mut g = Graph::new();
    let xid = g.leaf(x);
    let preds = forward_predictions(&mut g, nets, xid, ParamMode::Frozen)?;
    let out = if preds.len() == 1 {
        preds[0]
    } else {
        g.concat_channels(&preds)?
    };
    Ok((g.value(out).to_vec(), g.shape(out)[1]))
}

/// Mean per-class Dice over the validation volumes at threshold 0.5:
/// center-crop each slice, run the segmentor in eval mode, restack, and score
/// whole volumes.
pub fn validate<S: Scalar>(
    nets: &VariantNets<S>,
    val: &[PreparedSample],
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    nets.set_mode(BnMode::Eval);
    let result = validate_inner(nets, val, cfg);
    nets.set_mode(BnMode::Train);
    result
}

fn validate_inner<S: Scalar>(
    nets: &VariantNets<S>,
    val: &[PreparedSample],
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    let crop = cfg.crop;
    let mut dice_sums = vec![0.0f64; cfg.classes];
    let mut volumes = 0usize;
    for sample in val {
        let report = evaluate_sample(nets, sample, crop, cfg.batch_size, DEFAULT_THRESHOLD)?;
        for (k, cm) in report.classes.iter().enumerate() {
            dice_sums[k] += cm.dice;
        }
        volumes += 1;
    }
    if volumes == 0 {
        return Err(Error::data("validation split is empty".to_string()));
    }
    Ok(dice_sums.iter().map(|s| s / volumes as f64).collect())
}

/// Score one prepared sample: centered crops, batched eval-mode forwards,
/// threshold at `t`, volume-level metrics.
pub fn evaluate_sample<S: Scalar>(
    nets: &VariantNets<S>,
    sample: &PreparedSample,
    crop: usize,
    batch_size: usize,
    t: f32,
) -> Result<crate::metrics::MetricsReport> {
    let img_slices: Vec<Volume> = sample
        .image_slices
        .iter()
        .map(|s| center_crop2d(s, crop))
        .collect::<Result<_>>()?;
    let lbl_slices: Vec<Volume> = sample
        .label_slices
        .iter()
        .map(|s| center_crop2d(s, crop))
        .collect::<Result<_>>()?;
    let gt = restack(&lbl_slices)?;

    let channels = img_slices[0].channels();
    let mut prob_slices: Vec<Volume> = Vec::with_capacity(img_slices.len());
    for chunk in img_slices.chunks(batch_size.max(1)) {
        let mut xs: Vec<S> = Vec::with_capacity(chunk.len() * channels * crop * crop);
        for s in chunk {
            xs.extend(slice_to_f32(s).iter().map(|&v| S::from_f64(v as f64)));
        }
        let x = Tensor::from_shape_vec(&[chunk.len(), channels, crop, crop], xs)?;
        let (probs, classes) = predict_batch(nets, &x)?;
        let per = classes * crop * crop;
        for (i, _) in chunk.iter().enumerate() {
            let data: Vec<f32> = probs[i * per..(i + 1) * per]
                .iter()
                .map(|v| v.as_f64() as f32)
                .collect();
            prob_slices.push(Volume::new((classes, crop, crop, 1), Voxels::F32(data))?);
        }
    }
    evaluate_volume(&prob_slices, &gt, t)
}

/// Slice a volume, infer per-class probability maps, restack, and binarize.
/// The caller chooses the BN mode; spatial dims must divide by 2^4.
pub fn predict_volume<S: Scalar>(
    nets: &VariantNets<S>,
    vol: &Volume,
    t: f32,
) -> Result<Volume> {
    let slices = slice_axial(vol);
    let channels = vol.channels();
    let (h, w) = (vol.height(), vol.width());
    let mut prob_slices = Vec::with_capacity(slices.len());
    for chunk in slices.chunks(8) {
        let mut xs: Vec<S> = Vec::with_capacity(chunk.len() * channels * h * w);
        for s in chunk {
            xs.extend(slice_to_f32(s).iter().map(|&v| S::from_f64(v as f64)));
        }
        let x = Tensor::from_shape_vec(&[chunk.len(), channels, h, w], xs)?;
        let (probs, classes) = predict_batch(nets, &x)?;
        let per = classes * h * w;
        for i in 0..chunk.len() {
            let data: Vec<f32> = probs[i * per..(i + 1) * per]
                .iter()
                .map(|v| v.as_f64() as f32)
                .collect();
            prob_slices.push(Volume::new((classes, h, w, 1), Voxels::F32(data))?);
        }
    }
    let stacked = restack(&prob_slices)?;
    crate::metrics::threshold_volume(&stacked, t)
}

// --- History and the training loop -------------------------------------------

#[derive(Clone, Debug)]
pub struct HistoryRow {
    pub iter: usize,
    pub loss_s: f64,
    pub loss_c: f64,
    /// Per-class validation Dice; NaN on iterations without an evaluation.
    pub dice: [f64; 3],
    pub max_abs_critic_w: f64,
    pub ms_elapsed: u128,
}

#[derive(Clone, Debug, Default)]
pub struct TrainHistory {
    pub rows: Vec<HistoryRow>,
}

pub const HISTORY_HEADER: &str = "iter,loss_s,loss_c,dice_c0,dice_c1,dice_c2,max_abs_critic_w,ms_elapsed";

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(HISTORY_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.iter, r.loss_s, r.loss_c, r.dice[0], r.dice[1], r.dice[2], r.max_abs_critic_w, r.ms_elapsed
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Latest evaluated per-class Dice, if any evaluation has run.
    pub fn last_dice(&self) -> Option<[f64; 3]> {
        self.rows.iter().rev().find(|r| !r.dice[0].is_nan()).map(|r| r.dice)
    }
}

pub struct TrainOutcome {
    pub history: TrainHistory,
    pub best_mean_dice: f64,
    pub best_dice: [f64; 3],
    pub best_iter: usize,
    pub final_checkpoint: std::path::PathBuf,
    pub best_checkpoint: Option<std::path::PathBuf>,
}

/// Serialize the parts of the config a checkpoint needs to rebuild and drive
/// the networks.
fn checkpoint_config_text(cfg: &TrainConfig, iter: usize, mean_dice: f64) -> String {
    format!(
        "variant={}\nclasses={}\nimage_channels={}\nbatch_size={}\nlr={}\nmax_iters={}\nclip_c={}\nseed={}\nbase_feature_maps={}\neval_every={}\ncrop={}\ninclude_input_scale={}\niter={iter}\nmean_dice={mean_dice}\n",
        cfg.variant.name(),
        cfg.classes,
        cfg.image_channels,
        cfg.batch_size,
        cfg.lr,
        cfg.max_iters,
        cfg.clip_c.map(|c| c.to_string()).unwrap_or_else(|| "off".to_string()),
        cfg.seed,
        cfg.base_feature_maps,
        cfg.eval_every,
        cfg.crop,
        cfg.include_input_scale,
    )
}

pub fn save_variant_checkpoint(
    dir: &Path,
    nets: &VariantNets<f32>,
    cfg: &TrainConfig,
    iter: usize,
    mean_dice: f64,
) -> Result<()> {
    checkpoint::save_records(dir, &checkpoint_config_text(cfg, iter, mean_dice), &nets.named_records())
}

/// Rebuild networks from a checkpoint directory.
pub fn load_variant_checkpoint(dir: &Path) -> Result<(TrainConfig, VariantNets<f32>)> {
    let text = checkpoint::load_config_text(dir)?;
    let mut cfg = TrainConfig::desk_defaults();
    for line in text.lines() {
        let Some((k, v)) = line.split_once('=') else { continue };
        crate::config::apply_train_key(&mut cfg, k, v).or_else(|e| {
            // The checkpoint config also carries run metadata (iter, dice).
            if k == "iter" || k == "mean_dice" {
                Ok(())
            } else {
                Err(e)
            }
        })?;
    }
    let nets = assemble_variant::<f32>(&cfg, cfg.seed)?;
    let records = checkpoint::load_records(dir)?;
    checkpoint::restore_named(&records, &nets.named_records())?;
    Ok((cfg, nets))
}

/// Run the alternating loop for `cfg.max_iters` iterations, logging one
/// history row per iteration, evaluating validation Dice every
/// `cfg.eval_every` iterations, and persisting the best-Dice and final
/// checkpoints under `out_dir`. Deterministic for a fixed (config, seed).
pub fn train(cfg: &TrainConfig, data: &DatasetHandle, out_dir: &Path) -> Result<TrainOutcome> {
    let nets = assemble_variant::<f32>(cfg, cfg.seed)?;
    train_with_nets(cfg, data, out_dir, nets)
}

/// As [`train`], starting from pre-assembled networks.
pub fn train_with_nets(
    cfg: &TrainConfig,
    data: &DatasetHandle,
    out_dir: &Path,
    nets: VariantNets<f32>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let train_samples = prepare_split(data, Split::Train)?;
    if train_samples.is_empty() {
        return Err(Error::data("training split is empty".to_string()));
    }
    if let Some(s) = train_samples.first() {
        let img_c = s.image_slices[0].channels();
        let lbl_c = s.label_slices[0].channels();
        if img_c != cfg.image_channels || lbl_c != cfg.classes {
            return Err(Error::data(format!(
                "dataset has {img_c} image channels / {lbl_c} label classes, config expects {}/{}",
                cfg.image_channels, cfg.classes
            )));
        }
    }
    let val_samples = prepare_split(data, Split::Val)?;

    let seg_params = nets.segmentor_parameters();
    let critic_params = nets.critic_parameters();
    let mut opt_s = RmsProp::with_defaults(&seg_params, cfg.lr);
    let mut opt_c = RmsProp::with_defaults(&critic_params, cfg.lr);

    let mut data_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 1));
    let mut crop_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 2));

    // Deck of (sample, slice) pairs, reshuffled per epoch.
    let mut deck: Vec<(usize, usize)> = Vec::new();
    for (si, s) in train_samples.iter().enumerate() {
        for zi in 0..s.image_slices.len() {
            deck.push((si, zi));
        }
    }
    let mut cursor = deck.len(); // force a shuffle on first use

    let mut history = TrainHistory::default();
    let start = Instant::now();
    let mut best_mean = f64::NEG_INFINITY;
    let mut best_dice = [f64::NAN; 3];
    let mut best_iter = 0usize;
    let best_dir = out_dir.join("checkpoint_best");
    let final_dir = out_dir.join("checkpoint_final");
    let history_path = out_dir.join("history.csv");

    for iter in 0..cfg.max_iters {
        let mut picks = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor >= deck.len() {
                deck.shuffle(&mut data_rng);
                cursor = 0;
            }
            picks.push(deck[cursor]);
            cursor += 1;
        }
        let batch = assemble_batch::<f32>(&train_samples, &picks, cfg.crop, &mut crop_rng)?;

        let loss_c = critic_step(&nets, &mut opt_c, &batch, cfg.clip_c)?;
        if !loss_c.is_finite() {
            history.write_csv(&history_path)?;
            return Err(Error::Numeric {
                iter,
                term: "critic loss".to_string(),
            });
        }
        let loss_s = segmentor_step(&nets, &mut opt_s, &batch)?;
        if !loss_s.is_finite() {
            history.write_csv(&history_path)?;
            return Err(Error::Numeric {
                iter,
                term: "segmentor loss".to_string(),
            });
        }

        let max_w = if critic_params.is_empty() {
            0.0
        } else {
            max_abs(&critic_params)
        };

        let mut dice = [f64::NAN; 3];
        let evaluate_now =
            !val_samples.is_empty() && ((iter + 1) % cfg.eval_every == 0 || iter + 1 == cfg.max_iters);
        if evaluate_now {
            let per_class = validate(&nets, &val_samples, cfg)?;
            for (k, v) in per_class.iter().enumerate().take(3) {
                dice[k] = *v;
            }
            let mean = per_class.iter().sum::<f64>() / per_class.len() as f64;
            if mean > best_mean {
                best_mean = mean;
                best_dice = dice;
                best_iter = iter;
                save_variant_checkpoint(&best_dir, &nets, cfg, iter, mean)?;
            }
        }

        history.rows.push(HistoryRow {
            iter,
            loss_s,
            loss_c,
            dice,
            max_abs_critic_w: max_w,
            ms_elapsed: start.elapsed().as_millis(),
        });
    }

    save_variant_checkpoint(&final_dir, &nets, cfg, cfg.max_iters, best_mean)?;
    history.write_csv(&history_path)?;

    Ok(TrainOutcome {
        history,
        best_mean_dice: best_mean,
        best_dice,
        best_iter,
        final_checkpoint: final_dir,
        best_checkpoint: best_mean.is_finite().then_some(best_dir),
    })
}

// --- Diagnostics -------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct BoundednessReport {
    pub early_max: f64,
    pub trailing_max: f64,
    /// Least-squares slope of the trailing-window segmentor loss.
    pub trend_slope: f64,
    pub max_abs_critic_w: f64,
    pub flagged: bool,
}

/// Empirical boundedness check: with clipping on, the trailing-window max of
/// the shared loss must not exceed the first-window max by more than 10%.
pub fn boundedness_diagnostic(
    history: &TrainHistory,
    window: usize,
    clipping_on: bool,
) -> Result<BoundednessReport> {
    let n = history.rows.len();
    if n < window || window == 0 {
        return Err(Error::config(format!(
            "history of {n} rows is shorter than the window {window}"
        )));
    }
    let loss: Vec<f64> = history.rows.iter().map(|r| r.loss_s).collect();
    let early_max = loss[..window].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let tail = &loss[n - window..];
    let trailing_max = tail.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

    // Least-squares slope over the trailing window.
    let m = tail.len() as f64;
    let mean_x = (m - 1.0) / 2.0;
    let mean_y = tail.iter().sum::<f64>() / m;
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, y) in tail.iter().enumerate() {
        let dx = i as f64 - mean_x;
        num += dx * (y - mean_y);
        den += dx * dx;
    }
    let trend_slope = if den > 0.0 { num / den } else { 0.0 };

    let max_abs_critic_w = history
        .rows
        .iter()
        .map(|r| r.max_abs_critic_w)
        .fold(0.0f64, f64::max);

    let flagged = clipping_on && trailing_max > 1.1 * early_max;
    Ok(BoundednessReport {
        early_max,
        trailing_max,
        trend_slope,
        max_abs_critic_w,
        flagged,
    })
}

/// Empirical Lipschitz estimate of a network: max over probe pairs of
/// ||g(x1) - g(x2)||_1 / ||x1 - x2||_1, evaluated on the deepest output in
/// eval mode. Zero-distance pairs are skipped.
pub fn empirical_lipschitz<S: Scalar>(
    net: &NetParams<S>,
    probe_pairs: &[(Tensor<S>, Tensor<S>)],
) -> Result<f64> {
    net.set_mode(BnMode::Eval);
    let result = (|| {
        let mut best = 0.0f64;
        for (a, b) in probe_pairs {
            let dist: f64 = a
                .to_vec()
                .iter()
                .zip(b.to_vec().iter())
                .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
                .sum();
            if dist == 0.0 {
                continue;
            }
            let out_a = deepest_output(net, a)?;
            let out_b = deepest_output(net, b)?;
            let diff: f64 = out_a
                .iter()
                .zip(&out_b)
                .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
                .sum();
            best = best.max(diff / dist);
        }
        Ok(best)
    })();
    net.set_mode(BnMode::Train);
    result
}

fn deepest_output<S: Scalar>(net: &NetParams<S>, x: &Tensor<S>) -> Result<Vec<S>> {
    let mut g = Graph::new();
    let xid = g.leaf(x);
    let out = match net.spec.kind {
        crate::models::NetKind::Critic => {
            let feats = crate::models::critic_features(&mut g, net, xid, ParamMode::Frozen)?;
            *feats.layers.last().expect("at least the input layer")
        }
        crate::models::NetKind::Segmentor => segmentor_forward(&mut g, net, xid, ParamMode::Frozen)?,
    };
    Ok(g.value(out).to_vec())
}

// --- Ablation ----------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: Variant,
    /// Per-class Dice, averaged over seeds (best-checkpoint values).
    pub dice: Vec<f64>,
    pub mean_dice: f64,
}

/// Train every architecture variant across the given seeds and report mean
/// best validation Dice per class. Writes `ablation.csv` (one row per
/// variant) and `ablation_runs.csv` (one row per run) under `out_dir`.
pub fn run_ablation(
    data: &DatasetHandle,
    base_cfg: &TrainConfig,
    seeds: &[u64],
    out_dir: &Path,
) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(Error::config("ablation needs at least one seed".to_string()));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut rows = Vec::new();
    let mut runs_csv = String::from("variant,seed,dice_c0,dice_c1,dice_c2,mean_dice\n");
    for variant in Variant::ablation_set() {
        let mut dice_sum = vec![0.0f64; base_cfg.classes];
        let mut mean_sum = 0.0f64;
        for &seed in seeds {
            let cfg = TrainConfig {
                variant,
                seed,
                ..base_cfg.clone()
            };
            let run_dir = out_dir.join(format!("runs/{}_{seed}", variant.name()));
            let outcome = train(&cfg, data, &run_dir)?;
            for (k, v) in outcome.best_dice.iter().enumerate().take(base_cfg.classes) {
                dice_sum[k] += v;
            }
            mean_sum += outcome.best_mean_dice;
            runs_csv.push_str(&format!(
                "{},{seed},{},{},{},{}\n",
                variant.name(),
                outcome.best_dice[0],
                outcome.best_dice[1],
                outcome.best_dice[2],
                outcome.best_mean_dice
            ));
        }
        let n = seeds.len() as f64;
        let dice: Vec<f64> = dice_sum.iter().map(|s| s / n).collect();
        rows.push(AblationRow {
            variant,
            mean_dice: mean_sum / n,
            dice,
        });
    }

    let mut csv = String::from("variant,dice_c0,dice_c1,dice_c2,mean_dice\n");
    for r in &rows {
        let mut cells = vec![r.variant.name().to_string()];
        for k in 0..3 {
            cells.push(r.dice.get(k).copied().unwrap_or(f64::NAN).to_string());
        }
        cells.push(r.mean_dice.to_string());
        csv.push_str(&cells.join(","));
        csv.push('\n');
    }
    std::fs::write(out_dir.join("ablation.csv"), csv)?;
    std::fs::write(out_dir.join("ablation_runs.csv"), runs_csv)?;
    Ok(rows)
}
