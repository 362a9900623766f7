//! The adaptation engine: pseudo loss, combined teacher loss with dynamic
//! weighting, target fine-tuning, test-time training, and the baseline
//! strategies.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{self, BnUpdates, DownBlock, FwdCtx};
use crate::error::{CoreError, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::rng::derive_rng;
use crate::segnet::{dice_loss_vars, dice_score, train_source, SegNet, UNetConfig};
use crate::synth::{AugmentSpec, Sample};
use crate::tensor::Tensor;
use crate::vae::ShapeVae;
use crate::volume::Volume;

/// The frozen source segmenter plus the frozen shape VAE.
#[derive(Debug, Clone)]
pub struct TeacherBundle {
    pub seg: SegNet,
    pub vae: ShapeVae,
}

impl TeacherBundle {
    /// Combined checksum over both frozen networks.
    pub fn checksum(&self) -> [u8; 64] {
        let mut out = [0u8; 64];
        out[..32].copy_from_slice(&self.seg.params.checksum());
        out[32..].copy_from_slice(&self.vae.params.checksum());
        out
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AdaptConfig {
    /// base reconstruction weight (1.0 default; 0.1 for small target sets)
    pub lambda_vae_hat: f32,
    pub thresholds: Vec<f32>,
    pub gamma_table: Vec<f32>,
    pub lr: f32,
    pub iters: usize,
    pub dynamic_enabled: bool,
    pub ttt_enabled: bool,
    /// keep the pseudo term (disabled only for the recon-only ablation)
    pub pseudo_enabled: bool,
    /// threshold teacher predictions before the pseudo loss (ablation flag;
    /// soft probabilities by default)
    pub hard_teacher: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            lambda_vae_hat: 1.0,
            thresholds: vec![0.15, 0.225, 0.3],
            gamma_table: vec![0.6, 1.2, 2.0, 3.0],
            lr: 1e-2,
            iters: 120,
            dynamic_enabled: false,
            ttt_enabled: false,
            pseudo_enabled: true,
            hard_teacher: false,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.thresholds.windows(2).all(|w| w[0] < w[1]) {
            return Err(CoreError::InvalidArgument("thresholds must be strictly increasing".into()));
        }
        if self.gamma_table.len() != self.thresholds.len() + 1 {
            return Err(CoreError::InvalidArgument(
                "gamma table must have thresholds+1 entries".into(),
            ));
        }
        Ok(())
    }
}

/// Dice loss between the frozen teacher prediction and the student
/// prediction; gradient flows only to the student.
pub fn pseudo_loss(g: &mut Graph, teacher_pred: &Volume, student_pred: Var) -> Result<Var> {
    let t = g.leaf_volume(teacher_pred);
    dice_loss_vars(g, t, student_pred)
}

/// Step schedule for the reconstruction weight. `recon_shortfall` is
/// 1 - reconstruction-Dice of the current student prediction; boundary
/// values fall into the upper bin and the factor is non-decreasing.
pub fn dynamic_lambda(recon_shortfall: f32, cfg: &AdaptConfig) -> f32 {
    let bin = cfg.thresholds.iter().filter(|&&t| recon_shortfall >= t).count();
    cfg.gamma_table[bin] * cfg.lambda_vae_hat
}

/// Diagnostics for one teacher-loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct TeacherLossOut {
    pub loss: Var,
    pub l_recon: f32,
    pub l_pseudo: f32,
    pub lambda_recon: f32,
    pub total: f32,
}

/// Combined objective: lambda_recon * L_recon + L_pseudo, with
/// lambda_recon taken from the dynamic schedule when enabled.
#[allow(clippy::too_many_arguments)]
pub fn teacher_loss(
    g: &mut Graph,
    upd: &mut BnUpdates,
    bundle: &TeacherBundle,
    student: &SegNet,
    image: &Volume,
    teacher_pred: &Volume,
    cfg: &AdaptConfig,
    ctx: &FwdCtx,
) -> Result<TeacherLossOut> {
    let probs = student.forward(g, image, ctx, upd)?;
    let fg = g.slice_channel(probs, 1)?;

    let recon_active = cfg.lambda_vae_hat != 0.0;
    let (recon_var, l_recon) = if recon_active {
        let r = bundle.vae.recon_loss_var(g, fg)?;
        let v = g.scalar_value(r);
        (Some(r), v)
    } else {
        // value-only diagnostic, kept off the tape
        let fg_vol = Volume::from_tensor(g.value(fg), image.spacing())?;
        (None, bundle.vae.recon_loss(&fg_vol)?)
    };
    let lambda_recon = if cfg.dynamic_enabled {
        // shortfall = 1 - reconstruction Dice; L_recon is the negative Dice
        dynamic_lambda(1.0 + l_recon, cfg)
    } else {
        cfg.lambda_vae_hat
    };

    let pseudo_var = if cfg.pseudo_enabled {
        Some(pseudo_loss(g, teacher_pred, fg)?)
    } else {
        None
    };
    let l_pseudo = match pseudo_var {
        Some(p) => g.scalar_value(p),
        None => {
            let t = g.leaf_volume(teacher_pred);
            let p = dice_loss_vars(g, t, fg)?;
            g.scalar_value(p)
        }
    };

    let loss = match (recon_var, pseudo_var) {
        (Some(r), Some(p)) => {
            let rw = g.scale(r, lambda_recon);
            g.add(rw, p)?
        }
        (Some(r), None) => g.scale(r, lambda_recon),
        (None, Some(p)) => p,
        (None, None) => {
            return Err(CoreError::InvalidArgument(
                "teacher loss with both terms disabled".into(),
            ))
        }
    };
    Ok(TeacherLossOut { loss, l_recon, l_pseudo, lambda_recon, total: g.scalar_value(loss) })
}

/// One row of the adaptation log.
#[derive(Debug, Clone, serde::Serialize)]
pub struct AdaptRecord {
    pub iter: usize,
    pub l_recon: f32,
    pub l_pseudo: f32,
    pub lambda_recon: f32,
    pub total: f32,
}

/// Soft (or, behind the ablation flag, thresholded) teacher predictions
/// for every target image.
pub fn teacher_predictions(
    bundle: &TeacherBundle,
    images: &[(String, Volume)],
    cfg: &AdaptConfig,
) -> Result<Vec<Volume>> {
    images
        .iter()
        .map(|(_, img)| {
            let soft = bundle.seg.predict_soft(img)?;
            if cfg.hard_teacher {
                soft.map(|v| if v > 0.5 { 1.0 } else { 0.0 })
            } else {
                Ok(soft)
            }
        })
        .collect()
}

/// Fine-tune a student (an exact copy of the source segmenter) on
/// unlabeled target images by minimizing the teacher loss.
pub fn adapt(
    bundle: &TeacherBundle,
    student: &mut SegNet,
    target_images: &[(String, Volume)],
    cfg: &AdaptConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<AdaptRecord>> {
    cfg.validate()?;
    if target_images.is_empty() {
        return Err(CoreError::Data("adapt called with no target images".into()));
    }
    if student.params.checksum() != bundle.seg.params.checksum() {
        return Err(CoreError::InvalidArgument(
            "student must be initialized as an exact copy of the source segmenter".into(),
        ));
    }
    let frozen = bundle.checksum();
    let teacher_preds = teacher_predictions(bundle, target_images, cfg)?;
    let mut log = Vec::with_capacity(cfg.iters);
    for it in 0..cfg.iters {
        let idx = rng.gen_range(0..target_images.len());
        let mut g = Graph::new();
        let mut upd = BnUpdates::new();
        let out = teacher_loss(
            &mut g,
            &mut upd,
            bundle,
            student,
            &target_images[idx].1,
            &teacher_preds[idx],
            cfg,
            &FwdCtx::train(),
        )?;
        g.backward(out.loss)?;
        g.accumulate_param_grads(&mut student.params)?;
        upd.apply(&mut student.params)?;
        student.params.sgd_step(cfg.lr)?;
        log.push(AdaptRecord {
            iter: it,
            l_recon: out.l_recon,
            l_pseudo: out.l_pseudo,
            lambda_recon: out.lambda_recon,
            total: out.total,
        });
    }
    if bundle.checksum() != frozen {
        return Err(CoreError::InvalidArgument("teacher parameters changed during adaptation".into()));
    }
    Ok(log)
}

/// Test-time training: clone the student, take one teacher-loss step on
/// this image, predict with the clone, discard it. The persistent
/// student's parameters are untouched. The one-step forward normalizes
/// with batch statistics exactly like adaptation does (the collected
/// stats updates are discarded), so a zero learning rate reduces to a
/// plain prediction.
pub fn test_time_predict(
    bundle: &TeacherBundle,
    student: &SegNet,
    image: &Volume,
    cfg: &AdaptConfig,
) -> Result<Volume> {
    let mut clone = student.clone();
    let teacher_pred = teacher_predictions(bundle, &[(String::new(), image.clone())], cfg)?;
    let mut g = Graph::new();
    let mut upd = BnUpdates::new();
    let out = teacher_loss(
        &mut g,
        &mut upd,
        bundle,
        &clone,
        image,
        &teacher_pred[0],
        cfg,
        &FwdCtx::train(),
    )?;
    g.backward(out.loss)?;
    g.accumulate_param_grads(&mut clone.params)?;
    clone.params.sgd_step(cfg.lr)?;
    clone.predict_mask(image, 0.5)
}

/// The pseudo-label-only baseline: adaptation with the reconstruction
/// term weighted to zero.
pub fn baseline_pseudo_only(
    bundle: &TeacherBundle,
    student: &mut SegNet,
    target_images: &[(String, Volume)],
    cfg: &AdaptConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<AdaptRecord>> {
    let cfg = AdaptConfig {
        lambda_vae_hat: 0.0,
        dynamic_enabled: false,
        ttt_enabled: false,
        ..cfg.clone()
    };
    adapt(bundle, student, target_images, &cfg, rng)
}

// ---- discriminator baseline ----

/// Encoder stack with a sigmoid regression head predicting the Dice score
/// of a mask.
#[derive(Debug, Clone)]
pub struct DiscriminatorNet {
    pub channels: Vec<usize>,
    pub grid: usize,
    pub params: ParamStore,
    down: Vec<DownBlock>,
}

pub fn build_discriminator(channels: &[usize], grid: usize, seed: u64) -> Result<DiscriminatorNet> {
    if channels.len() < 2 {
        return Err(CoreError::InvalidArgument("discriminator needs at least 2 levels".into()));
    }
    let depth = channels.len() - 1;
    if grid % (1 << depth) != 0 {
        return Err(CoreError::InvalidArgument(format!(
            "grid {} must be divisible by 2^{}",
            grid, depth
        )));
    }
    let mut rng = derive_rng(seed, "disc-init");
    let mut params = ParamStore::new();
    blocks::init_conv(&mut params, "stem.w", channels[0], 1, 3, &mut rng)?;
    blocks::init_bn(&mut params, "stem.bn", channels[0])?;
    let mut down = Vec::new();
    for i in 0..depth {
        let b = DownBlock { prefix: format!("block{i}"), c_in: channels[i], c_out: channels[i + 1] };
        b.init(&mut params, &mut rng)?;
        down.push(b);
    }
    let flat = channels[depth] * (grid >> depth).pow(3);
    blocks::init_linear(&mut params, "head", 1, flat, &mut rng)?;
    Ok(DiscriminatorNet { channels: channels.to_vec(), grid, params, down })
}

impl DiscriminatorNet {
    /// Predicted quality score in [0, 1] as a graph node.
    pub fn score_var(
        &self,
        g: &mut Graph,
        mask: Var,
        ctx: &FwdCtx,
        upd: &mut BnUpdates,
    ) -> Result<Var> {
        let mut y = blocks::conv_bn_relu(g, &self.params, mask, "stem", 1, 1, ctx, upd)?;
        for b in &self.down {
            y = b.forward(g, &self.params, y, ctx, upd)?;
        }
        let depth = self.channels.len() - 1;
        let flat = self.channels[depth] * (self.grid >> depth).pow(3);
        let y = g.reshape(y, vec![flat])?;
        let y = blocks::linear(g, &self.params, y, "head", ctx)?;
        Ok(g.sigmoid(y))
    }

    pub fn score(&self, mask: &Volume) -> Result<f32> {
        let mut g = Graph::new();
        let mut upd = BnUpdates::new();
        let m = g.leaf_volume(mask);
        let s = self.score_var(&mut g, m, &FwdCtx::eval(), &mut upd)?;
        Ok(g.scalar_value(s))
    }
}

/// Corpus of (mask, true Dice) pairs from segmenters checkpointed at
/// {5%, 20%, 50%, 100%} of source training, plus the ground-truth masks.
pub fn gen_discriminator_corpus(
    source: &[Sample],
    unet_config: &UNetConfig,
    source_iters: usize,
    lr: f32,
    augment_spec: &AugmentSpec,
    seed: u64,
) -> Result<Vec<(Volume, f32)>> {
    let mut corpus = Vec::new();
    for frac in [0.05f32, 0.2, 0.5, 1.0] {
        let iters = ((source_iters as f32 * frac) as usize).max(1);
        let mut net = crate::segnet::build_unet(unet_config, seed)?;
        let mut rng = derive_rng(seed, "source-train");
        train_source(&mut net, source, iters, lr, augment_spec, &mut rng)?;
        for s in source {
            let pred = net.predict_mask(&s.image, 0.5)?;
            let d = dice_score(&pred, &s.mask);
            corpus.push((pred, d));
        }
    }
    for s in source {
        corpus.push((s.mask.clone(), 1.0));
    }
    Ok(corpus)
}

/// Train the discriminator with a squared-error loss on predicted vs true
/// Dice.
pub fn train_discriminator(
    disc: &mut DiscriminatorNet,
    corpus: &[(Volume, f32)],
    iters: usize,
    lr: f32,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    if corpus.is_empty() {
        return Err(CoreError::Data("empty discriminator corpus".into()));
    }
    for _ in 0..iters {
        let (mask, target) = &corpus[rng.gen_range(0..corpus.len())];
        let mut g = Graph::new();
        let mut upd = BnUpdates::new();
        let m = g.leaf_volume(mask);
        let s = disc.score_var(&mut g, m, &FwdCtx::train(), &mut upd)?;
        let t = g.leaf(Tensor::scalar(*target));
        let diff = g.sub(s, t)?;
        let loss = g.mul(diff, diff)?;
        let loss = g.sum_all(loss);
        g.backward(loss)?;
        g.accumulate_param_grads(&mut disc.params)?;
        upd.apply(&mut disc.params)?;
        disc.params.sgd_step(lr)?;
    }
    Ok(())
}

/// Discriminator-guided adaptation: minimize pseudo loss minus the
/// weighted predicted score of the student's soft mask.
pub fn baseline_discriminator_adapt(
    bundle: &TeacherBundle,
    disc: &DiscriminatorNet,
    student: &mut SegNet,
    target_images: &[(String, Volume)],
    cfg: &AdaptConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<AdaptRecord>> {
    cfg.validate()?;
    if student.params.checksum() != bundle.seg.params.checksum() {
        return Err(CoreError::InvalidArgument(
            "student must be initialized as an exact copy of the source segmenter".into(),
        ));
    }
    let frozen = (bundle.checksum(), disc.params.checksum());
    let teacher_preds = teacher_predictions(bundle, target_images, cfg)?;
    let mut log = Vec::with_capacity(cfg.iters);
    for it in 0..cfg.iters {
        let idx = rng.gen_range(0..target_images.len());
        let mut g = Graph::new();
        let mut upd = BnUpdates::new();
        let probs = student.forward(&mut g, &target_images[idx].1, &FwdCtx::train(), &mut upd)?;
        let fg = g.slice_channel(probs, 1)?;
        let pseudo = pseudo_loss(&mut g, &teacher_preds[idx], fg)?;
        let mut disc_upd = BnUpdates::new();
        let score = disc.score_var(&mut g, fg, &FwdCtx::eval(), &mut disc_upd)?;
        let neg_score = g.scale(score, -cfg.lambda_vae_hat);
        let loss = g.add(pseudo, neg_score)?;
        g.backward(loss)?;
        g.accumulate_param_grads(&mut student.params)?;
        upd.apply(&mut student.params)?;
        student.params.sgd_step(cfg.lr)?;
        log.push(AdaptRecord {
            iter: it,
            l_recon: -g.scalar_value(score),
            l_pseudo: g.scalar_value(pseudo),
            lambda_recon: cfg.lambda_vae_hat,
            total: g.scalar_value(loss),
        });
    }
    if (bundle.checksum(), disc.params.checksum()) != frozen {
        return Err(CoreError::InvalidArgument("frozen networks changed during adaptation".into()));
    }
    Ok(log)
}
