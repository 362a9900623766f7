//! 3D U-Net segmenter and the Dice segmentation loss.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{
    self, BnUpdates, DownBlock, FwdCtx, UpBlock,
};
use crate::error::{CoreError, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::rng::derive_rng;
use crate::synth::{augment, AugmentSpec, Sample};
use crate::volume::Volume;

pub const DICE_EPS: f32 = 1e-5;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct UNetConfig {
    /// number of down/up block pairs
    pub depth: usize,
    /// feature channels per level, length depth + 1
    pub channels: Vec<usize>,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Default for UNetConfig {
    /// Desk-scale default; the full-scale depth-5 (8..256) configuration
    /// is available by overriding `depth`/`channels`.
    fn default() -> Self {
        UNetConfig { depth: 3, channels: vec![4, 8, 16, 32], in_channels: 1, out_channels: 2 }
    }
}

impl UNetConfig {
    pub fn full_scale() -> Self {
        UNetConfig {
            depth: 5,
            channels: vec![8, 16, 32, 64, 128, 256],
            in_channels: 1,
            out_channels: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != self.depth + 1 {
            return Err(CoreError::InvalidArgument(format!(
                "channels list must have depth+1 = {} entries, got {}",
                self.depth + 1,
                self.channels.len()
            )));
        }
        if self.channels.iter().any(|&c| c == 0) || self.depth == 0 {
            return Err(CoreError::InvalidArgument("channels and depth must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SegNet {
    pub config: UNetConfig,
    pub params: ParamStore,
    down: Vec<DownBlock>,
    up: Vec<UpBlock>,
}

/// Build a U-Net with deterministic uniform ±sqrt(1/fan_in) initialization.
pub fn build_unet(config: &UNetConfig, seed: u64) -> Result<SegNet> {
    config.validate()?;
    let mut rng = derive_rng(seed, "unet-init");
    let mut params = ParamStore::new();
    let ch = &config.channels;

    blocks::init_conv(&mut params, "stem.w", ch[0], config.in_channels, 3, &mut rng)?;
    blocks::init_bn(&mut params, "stem.bn", ch[0])?;

    let mut down = Vec::new();
    for i in 0..config.depth {
        let b = DownBlock { prefix: format!("enc{i}"), c_in: ch[i], c_out: ch[i + 1] };
        b.init(&mut params, &mut rng)?;
        down.push(b);
    }
    let mut up = Vec::new();
    for i in (0..config.depth).rev() {
        let b = UpBlock {
            prefix: format!("dec{i}"),
            c_in: ch[i + 1],
            c_out: ch[i],
            c_skip: ch[i],
        };
        b.init(&mut params, &mut rng)?;
        up.push(b);
    }
    blocks::init_conv(&mut params, "head.w", config.out_channels, ch[0], 3, &mut rng)?;
    params.insert("head.b", crate::tensor::Tensor::zeros(vec![config.out_channels]), true)?;

    Ok(SegNet { config: config.clone(), params, down, up })
}

impl SegNet {
    /// Forward pass to per-voxel class probabilities (softmax over the
    /// channel axis). Train-mode batch statistics are returned in `upd`
    /// for the caller to apply.
    pub fn forward(
        &self,
        g: &mut Graph,
        image: &Volume,
        ctx: &FwdCtx,
        upd: &mut BnUpdates,
    ) -> Result<Var> {
        let (d, h, w) = image.dims();
        let div = 1 << self.config.depth;
        if d % div != 0 || h % div != 0 || w % div != 0 {
            return Err(CoreError::ShapeMismatch {
                op: "seg_forward",
                detail: format!("input dims {:?} must be divisible by {}", (d, h, w), div),
            });
        }
        let x = g.leaf_volume(image);
        let logits = self.forward_from(g, x, ctx, upd)?;
        g.softmax_channel(logits)
    }

    /// Forward from an existing graph node (used when gradients must flow
    /// through the input, e.g. finite-difference tests).
    pub fn forward_from(
        &self,
        g: &mut Graph,
        x: Var,
        ctx: &FwdCtx,
        upd: &mut BnUpdates,
    ) -> Result<Var> {
        let mut y = blocks::conv_bn_relu(g, &self.params, x, "stem", 1, 1, ctx, upd)?;
        let mut skips = Vec::with_capacity(self.config.depth);
        for b in &self.down {
            skips.push(y);
            y = b.forward(g, &self.params, y, ctx, upd)?;
        }
        for b in &self.up {
            let skip = skips.pop().expect("one skip per decoder level");
            y = b.forward(g, &self.params, y, Some(skip), ctx, upd)?;
        }
        let wh = blocks::reg_param(g, &self.params, "head.w", ctx)?;
        let bh = blocks::reg_param(g, &self.params, "head.b", ctx)?;
        let y = g.conv3d(y, wh, 1, 1)?;
        g.add_channel_bias(y, bh)
    }

    /// Eval-mode forward returning the soft foreground probability volume.
    pub fn predict_soft(&self, image: &Volume) -> Result<Volume> {
        let mut g = Graph::new();
        let mut upd = BnUpdates::new();
        let probs = self.forward(&mut g, image, &FwdCtx::eval(), &mut upd)?;
        let fg = g.slice_channel(probs, 1)?;
        Volume::from_tensor(g.value(fg), image.spacing())
    }

    /// Eval-mode forward thresholded to a binary mask.
    pub fn predict_mask(&self, image: &Volume, threshold: f32) -> Result<Volume> {
        let soft = self.predict_soft(image)?;
        soft.map(|v| if v > threshold { 1.0 } else { 0.0 })
    }
}

/// Soft Dice loss between two probability fields:
/// `-(2·sum(a·b) + eps) / (sum(a) + sum(b) + eps)`, in [-1, 0].
pub fn dice_loss_vars(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let prod = g.mul(a, b)?;
    let num = g.sum_all(prod);
    let num = g.scale(num, 2.0);
    let num = g.add_const(num, DICE_EPS);
    let sa = g.sum_all(a);
    let sb = g.sum_all(b);
    let den = g.add(sa, sb)?;
    let den = g.add_const(den, DICE_EPS);
    let frac = g.div(num, den)?;
    Ok(g.scale(frac, -1.0))
}

/// Dice loss of a predicted foreground probability against a fixed binary
/// target mask.
pub fn dice_loss(g: &mut Graph, pred_fg: Var, target: &Volume) -> Result<Var> {
    if g.shape(pred_fg) != [1, target.dims().0, target.dims().1, target.dims().2] {
        return Err(CoreError::ShapeMismatch {
            op: "dice_loss",
            detail: format!(
                "prediction {:?} vs target {:?}",
                g.shape(pred_fg),
                target.dims()
            ),
        });
    }
    let t = g.leaf_volume(target);
    dice_loss_vars(g, pred_fg, t)
}

/// Plain Dice overlap score between two binary masks, 2|A∩B|/(|A|+|B|).
pub fn dice_score(a: &Volume, b: &Volume) -> f32 {
    let inter: f32 = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x * y).sum();
    let sa: f32 = a.data().iter().sum();
    let sb: f32 = b.data().iter().sum();
    (2.0 * inter + DICE_EPS) / (sa + sb + DICE_EPS)
}

/// One record of the source-training loss curve.
#[derive(Debug, Clone, serde::Serialize)]
pub struct TrainRecord {
    pub iter: usize,
    pub loss: f32,
}

/// Supervised source training: sample, augment, forward, Dice loss,
/// backward, SGD step.
pub fn train_source(
    net: &mut SegNet,
    dataset: &[Sample],
    iters: usize,
    lr: f32,
    augment_spec: &AugmentSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TrainRecord>> {
    if dataset.is_empty() {
        return Err(CoreError::Data("train_source called with an empty dataset".into()));
    }
    let mut curve = Vec::with_capacity(iters);
    for it in 0..iters {
        let s = &dataset[rng.gen_range(0..dataset.len())];
        let s = augment(s, augment_spec, rng)?;
        let mut g = Graph::new();
        let mut upd = BnUpdates::new();
        let probs = net.forward(&mut g, &s.image, &FwdCtx::train(), &mut upd)?;
        let fg = g.slice_channel(probs, 1)?;
        let loss = dice_loss(&mut g, fg, &s.mask)?;
        g.backward(loss)?;
        g.accumulate_param_grads(&mut net.params)?;
        upd.apply(&mut net.params)?;
        net.params.sgd_step(lr)?;
        curve.push(TrainRecord { iter: it, loss: g.scalar_value(loss) });
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::tensor::Tensor;

    fn small_config() -> UNetConfig {
        UNetConfig { depth: 2, channels: vec![2, 4, 8], in_channels: 1, out_channels: 2 }
    }

    fn vol(dims: (usize, usize, usize), data: Vec<f32>) -> Volume {
        Volume::new(1, dims, (1.0, 1.0, 1.0), data).unwrap()
    }

    #[test]
    fn dice_loss_is_minus_one_on_identical_masks() {
        let y = vol((2, 2, 2), vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
        let mut g = Graph::new();
        let p = g.leaf_volume(&y);
        let l = dice_loss(&mut g, p, &y).unwrap();
        assert!((g.scalar_value(l) + 1.0).abs() < 1e-4);
    }

    #[test]
    fn dice_loss_is_zero_on_disjoint_masks() {
        let a = vol((2, 2, 2), vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let b = vol((2, 2, 2), vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let mut g = Graph::new();
        let p = g.leaf_volume(&a);
        let l = dice_loss(&mut g, p, &b).unwrap();
        assert!(g.scalar_value(l).abs() < 1e-4);
    }

    #[test]
    fn dice_loss_hand_value_on_uniform_half_prediction() {
        // pred 0.5 everywhere on 8 voxels, 4 fg targets:
        // -(2*0.5*4)/(0.5*8+4) = -0.5
        let p = vol((2, 2, 2), vec![0.5; 8]);
        let y = vol((2, 2, 2), vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let mut g = Graph::new();
        let pv = g.leaf_volume(&p);
        let l = dice_loss(&mut g, pv, &y).unwrap();
        assert!((g.scalar_value(l) + 0.5).abs() < 1e-4);
    }

    #[test]
    fn dice_loss_is_symmetric_on_binary_inputs() {
        let a = vol((2, 2, 2), vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        let b = vol((2, 2, 2), vec![1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        let mut g = Graph::new();
        let (av, bv) = (g.leaf_volume(&a), g.leaf_volume(&b));
        let l1 = dice_loss_vars(&mut g, av, bv).unwrap();
        let l2 = dice_loss_vars(&mut g, bv, av).unwrap();
        assert_eq!(g.scalar_value(l1).to_bits(), g.scalar_value(l2).to_bits());
    }

    #[test]
    fn dice_loss_minimized_exactly_at_the_target() {
        // all 256 binary predictions on a 2^3 volume against a fixed target
        let y = vol((2, 2, 2), vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
        let mut best = (f32::INFINITY, 0usize);
        for bits in 0..256usize {
            let p: Vec<f32> = (0..8).map(|i| ((bits >> i) & 1) as f32).collect();
            let mut g = Graph::new();
            let pv = g.leaf_volume(&vol((2, 2, 2), p));
            let l = dice_loss(&mut g, pv, &y).unwrap();
            let v = g.scalar_value(l);
            if v < best.0 {
                best = (v, bits);
            }
        }
        // target pattern encodes to bits 0b00101001 = 41
        assert_eq!(best.1, 0b00101001);
    }

    #[test]
    fn fd_dice_loss() {
        use crate::fdcheck::finite_diff_check;
        use crate::params::ParamStore;
        use rand::Rng;
        for seed in [0u64, 1, 2] {
            let mut rng = crate::rng::derive_rng(seed, "dice-fd");
            let mut params = ParamStore::new();
            let p: Vec<f32> = (0..27).map(|_| rng.gen_range(0.05f32..0.95)).collect();
            params.insert("p", Tensor::new(vec![1, 3, 3, 3], p).unwrap(), true).unwrap();
            let y: Vec<f32> = (0..27).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect();
            let y = vol((3, 3, 3), y);
            let err = finite_diff_check(
                &|g, store| {
                    let pv = g.param(store, "p")?;
                    dice_loss(g, pv, &y)
                },
                &mut params,
                1e-3,
                16,
            )
            .unwrap();
            assert!(err <= 1e-3, "dice fd error {} (seed {})", err, seed);
        }
    }

    #[test]
    fn unet_outputs_softmax_probabilities_at_input_resolution() {
        let net = build_unet(&small_config(), 0).unwrap();
        let img = {
            let mut rng = crate::rng::derive_rng(1, "unet-img");
            use rand::Rng;
            vol((16, 16, 16), (0..4096).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
        };
        let mut g = Graph::new();
        let mut upd = crate::blocks::BnUpdates::new();
        let probs = net.forward(&mut g, &img, &crate::blocks::FwdCtx::eval(), &mut upd).unwrap();
        assert_eq!(g.shape(probs), [2, 16, 16, 16]);
        let data = &g.value(probs).data;
        for i in 0..4096 {
            let s = data[i] + data[4096 + i];
            assert!((s - 1.0).abs() <= 1e-6);
            assert!((0.0..=1.0).contains(&data[i]));
        }
    }

    #[test]
    fn unet_rejects_input_not_divisible_by_stride_product() {
        let net = build_unet(&small_config(), 0).unwrap();
        let img = vol((18, 16, 16), vec![0.0; 18 * 256]);
        let mut g = Graph::new();
        let mut upd = crate::blocks::BnUpdates::new();
        assert!(net.forward(&mut g, &img, &crate::blocks::FwdCtx::eval(), &mut upd).is_err());
    }

    #[test]
    fn param_count_matches_hand_formula_for_depth_one() {
        let cfg = UNetConfig { depth: 1, channels: vec![2, 4], in_channels: 1, out_channels: 2 };
        let net = build_unet(&cfg, 0).unwrap();
        let k3 = 27;
        let bn = |c: usize| 4 * c; // scale, shift, running mean, running var
        let stem = 2 * 1 * k3 + bn(2);
        let enc = 2 * 2 * k3 + (4 * 2 * k3 + bn(4)) + 2 * (4 * 4 * k3 + bn(4));
        let dec = 4 * 2 * 8 // transpose kernel 2^3
            + (2 * (2 + 2) * k3 + bn(2))
            + 2 * (2 * 2 * k3 + bn(2));
        let head = 2 * 2 * k3 + 2;
        assert_eq!(net.params.num_values(), stem + enc + dec + head);
    }

    #[test]
    fn same_seed_builds_identical_networks() {
        let a = build_unet(&small_config(), 7).unwrap();
        let b = build_unet(&small_config(), 7).unwrap();
        assert_eq!(a.params.checksum(), b.params.checksum());
        let c = build_unet(&small_config(), 8).unwrap();
        assert_ne!(a.params.checksum(), c.params.checksum());
    }

    #[test]
    fn training_step_changes_params_deterministically() {
        let d = crate::synth::DomainSpec {
            name: "t".into(),
            intensity: crate::synth::IntensityMap { foreground: 1.0, background: -1.0 },
            noise_sigma: 0.1,
            texture_frequency: 0.3,
            spacing: (1.0, 1.0, 1.0),
            seed: 5,
        };
        let samples: Vec<Sample> = (0..3)
            .map(|i| crate::synth::generate_sample(i, &d, (16, 16, 16)).unwrap())
            .collect();
        let run = || {
            let mut net = build_unet(&small_config(), 0).unwrap();
            let mut rng = crate::rng::derive_rng(0, "train");
            let curve =
                train_source(&mut net, &samples, 3, 1e-2, &AugmentSpec::disabled(), &mut rng).unwrap();
            (net.params.checksum(), curve.last().unwrap().loss)
        };
        let (c1, l1) = run();
        let (c2, l2) = run();
        assert_eq!(c1, c2);
        assert_eq!(l1.to_bits(), l2.to_bits());
    }
}
