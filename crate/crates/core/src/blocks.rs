//! Conv block builders shared by the segmenter, the mask VAE and the
//! discriminator baseline.
//!
//! A down-sampling block of channels `c_in -> c_out` is four conv layers:
//! a stride-2 conv `c_in -> c_in`, then `c_in -> c_out`, then two
//! `c_out -> c_out`, with batch norm and ReLU after the last three. An
//! up-sampling block replaces the first conv with a stride-2 transpose
//! conv (moving to `c_out` so a skip connection can be concatenated before
//! the remaining convs).
//!
//! Forward passes read the store immutably; train-mode batch norm records
//! its batch statistics into a [`BnUpdates`] buffer which the owner folds
//! into the running statistics afterwards. A frozen network therefore
//! never needs `&mut` access.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{BatchStats, BnMode, Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

/// How a forward pass treats parameters and normalization statistics.
#[derive(Debug, Clone, Copy)]
pub struct FwdCtx {
    pub mode: BnMode,
    /// frozen nets register weights as constants: no weight gradients, no
    /// running-stat updates
    pub frozen: bool,
}

impl FwdCtx {
    pub fn train() -> Self {
        FwdCtx { mode: BnMode::Train, frozen: false }
    }

    pub fn eval() -> Self {
        FwdCtx { mode: BnMode::Eval, frozen: true }
    }

    /// Trainable weights but eval-mode normalization (used by the one-step
    /// test-time update so a zero learning rate is a strict no-op).
    pub fn train_frozen_stats() -> Self {
        FwdCtx { mode: BnMode::Eval, frozen: false }
    }

    /// Frozen weights but per-input normalization statistics. The shape
    /// prior is trained one mask at a time, so its running averages never
    /// describe any single input; inference must normalize the same way
    /// training did.
    pub fn frozen_batch_stats() -> Self {
        FwdCtx { mode: BnMode::Train, frozen: true }
    }
}

/// Batch statistics collected during a train-mode forward, to be folded
/// into the running statistics by the network owner.
#[derive(Debug, Default)]
pub struct BnUpdates(Vec<(String, BatchStats)>);

impl BnUpdates {
    pub fn new() -> Self {
        BnUpdates::default()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// running <- (1 - momentum) * running + momentum * batch
    pub fn apply(self, store: &mut ParamStore) -> Result<()> {
        for (prefix, stats) in self.0 {
            let rm = &mut store.get_mut(&format!("{prefix}.rmean"))?.value.data;
            for (r, b) in rm.iter_mut().zip(stats.mean.iter()) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
            let rv = &mut store.get_mut(&format!("{prefix}.rvar"))?.value.data;
            for (r, b) in rv.iter_mut().zip(stats.var.iter()) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
        Ok(())
    }
}

pub fn reg_param(g: &mut Graph, store: &ParamStore, name: &str, ctx: &FwdCtx) -> Result<Var> {
    if ctx.frozen {
        g.frozen_param(store, name)
    } else {
        g.param(store, name)
    }
}

pub fn init_conv(
    store: &mut ParamStore,
    name: &str,
    c_out: usize,
    c_in: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    store.insert_uniform(name, vec![c_out, c_in, k, k, k], c_in * k * k * k, rng)
}

pub fn init_tconv(
    store: &mut ParamStore,
    name: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    store.insert_uniform(name, vec![c_in, c_out, k, k, k], c_in * k * k * k, rng)
}

pub fn init_linear(
    store: &mut ParamStore,
    prefix: &str,
    out_n: usize,
    in_n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    store.insert_uniform(&format!("{prefix}.w"), vec![out_n, in_n], in_n, rng)?;
    store.insert(&format!("{prefix}.b"), Tensor::zeros(vec![out_n]), true)
}

pub fn init_bn(store: &mut ParamStore, prefix: &str, c: usize) -> Result<()> {
    store.insert(&format!("{prefix}.scale"), Tensor::new(vec![c], vec![1.0; c])?, true)?;
    store.insert(&format!("{prefix}.shift"), Tensor::zeros(vec![c]), true)?;
    store.insert(&format!("{prefix}.rmean"), Tensor::zeros(vec![c]), false)?;
    store.insert(&format!("{prefix}.rvar"), Tensor::new(vec![c], vec![1.0; c])?, false)?;
    Ok(())
}

pub fn batch_norm(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    prefix: &str,
    ctx: &FwdCtx,
    upd: &mut BnUpdates,
) -> Result<Var> {
    let scale = reg_param(g, store, &format!("{prefix}.scale"), ctx)?;
    let shift = reg_param(g, store, &format!("{prefix}.shift"), ctx)?;
    let rmean = &store.get(&format!("{prefix}.rmean"))?.value.data;
    let rvar = &store.get(&format!("{prefix}.rvar"))?.value.data;
    let (y, stats) = g.batch_norm(x, scale, shift, rmean, rvar, ctx.mode, BN_EPS)?;
    if let (Some(stats), false) = (stats, ctx.frozen) {
        upd.0.push((prefix.to_string(), stats));
    }
    Ok(y)
}

pub fn linear(g: &mut Graph, store: &ParamStore, x: Var, prefix: &str, ctx: &FwdCtx) -> Result<Var> {
    let w = reg_param(g, store, &format!("{prefix}.w"), ctx)?;
    let b = reg_param(g, store, &format!("{prefix}.b"), ctx)?;
    g.linear(x, w, b)
}

#[allow(clippy::too_many_arguments)]
pub fn conv_bn_relu(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    prefix: &str,
    stride: usize,
    pad: usize,
    ctx: &FwdCtx,
    upd: &mut BnUpdates,
) -> Result<Var> {
    let w = reg_param(g, store, &format!("{prefix}.w"), ctx)?;
    let y = g.conv3d(x, w, stride, pad)?;
    let y = batch_norm(g, store, y, &format!("{prefix}.bn"), ctx, upd)?;
    Ok(g.relu(y))
}

#[derive(Debug, Clone)]
pub struct DownBlock {
    pub prefix: String,
    pub c_in: usize,
    pub c_out: usize,
}

impl DownBlock {
    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        init_conv(store, &format!("{}.conv0.w", self.prefix), self.c_in, self.c_in, 3, rng)?;
        init_conv(store, &format!("{}.conv1.w", self.prefix), self.c_out, self.c_in, 3, rng)?;
        init_bn(store, &format!("{}.conv1.bn", self.prefix), self.c_out)?;
        init_conv(store, &format!("{}.conv2.w", self.prefix), self.c_out, self.c_out, 3, rng)?;
        init_bn(store, &format!("{}.conv2.bn", self.prefix), self.c_out)?;
        init_conv(store, &format!("{}.conv3.w", self.prefix), self.c_out, self.c_out, 3, rng)?;
        init_bn(store, &format!("{}.conv3.bn", self.prefix), self.c_out)?;
        Ok(())
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        ctx: &FwdCtx,
        upd: &mut BnUpdates,
    ) -> Result<Var> {
        let w0 = reg_param(g, store, &format!("{}.conv0.w", self.prefix), ctx)?;
        let y = g.conv3d(x, w0, 2, 1)?;
        let y = conv_bn_relu(g, store, y, &format!("{}.conv1", self.prefix), 1, 1, ctx, upd)?;
        let y = conv_bn_relu(g, store, y, &format!("{}.conv2", self.prefix), 1, 1, ctx, upd)?;
        conv_bn_relu(g, store, y, &format!("{}.conv3", self.prefix), 1, 1, ctx, upd)
    }
}

#[derive(Debug, Clone)]
pub struct UpBlock {
    pub prefix: String,
    pub c_in: usize,
    pub c_out: usize,
    /// channels of the encoder feature concatenated after upsampling
    /// (0 when there is no skip connection)
    pub c_skip: usize,
}

impl UpBlock {
    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        init_tconv(store, &format!("{}.tconv0.w", self.prefix), self.c_in, self.c_out, 2, rng)?;
        let c1_in = self.c_out + self.c_skip;
        init_conv(store, &format!("{}.conv1.w", self.prefix), self.c_out, c1_in, 3, rng)?;
        init_bn(store, &format!("{}.conv1.bn", self.prefix), self.c_out)?;
        init_conv(store, &format!("{}.conv2.w", self.prefix), self.c_out, self.c_out, 3, rng)?;
        init_bn(store, &format!("{}.conv2.bn", self.prefix), self.c_out)?;
        init_conv(store, &format!("{}.conv3.w", self.prefix), self.c_out, self.c_out, 3, rng)?;
        init_bn(store, &format!("{}.conv3.bn", self.prefix), self.c_out)?;
        Ok(())
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        skip: Option<Var>,
        ctx: &FwdCtx,
        upd: &mut BnUpdates,
    ) -> Result<Var> {
        let w0 = reg_param(g, store, &format!("{}.tconv0.w", self.prefix), ctx)?;
        let mut y = g.conv_transpose3d(x, w0, 2, 0)?;
        if let Some(s) = skip {
            y = g.concat_channel(y, s)?;
        }
        let y = conv_bn_relu(g, store, y, &format!("{}.conv1", self.prefix), 1, 1, ctx, upd)?;
        let y = conv_bn_relu(g, store, y, &format!("{}.conv2", self.prefix), 1, 1, ctx, upd)?;
        conv_bn_relu(g, store, y, &format!("{}.conv3", self.prefix), 1, 1, ctx, upd)
    }
}
