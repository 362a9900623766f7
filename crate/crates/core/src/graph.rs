//! Eager tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every op computes its value immediately and records enough on the tape
//! to run `backward` from any scalar node. Nodes created from a
//! [`ParamStore`] entry remember the entry name so gradients can be
//! accumulated back into the store after the pass.

use crate::error::{CoreError, Result};
use crate::kernels;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::volume::Volume;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Per-channel statistics a train-mode batch_norm was normalized with.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv3d { x: Var, w: Var, stride: usize, pad: usize },
    ConvTranspose3d { x: Var, w: Var, stride: usize, pad: usize },
    BatchNorm { x: Var, scale: Var, shift: Var, mean: Vec<f32>, inv_std: Vec<f32>, mode: BnMode },
    Relu { x: Var },
    Sigmoid { x: Var },
    SoftmaxChannel { x: Var },
    Linear { x: Var, w: Var, b: Var },
    AddChannelBias { x: Var, b: Var },
    ConcatChannel { a: Var, b: Var },
    SliceChannel { x: Var, ch: usize },
    Reshape { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    Exp { x: Var },
    Scale { x: Var, c: f32 },
    AddConst { x: Var },
    Clamp { x: Var, lo: f32, hi: f32 },
    SumAll { x: Var },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::Conv3d { x, w, .. } | Op::ConvTranspose3d { x, w, .. } => vec![x, w],
            Op::BatchNorm { x, scale, shift, .. } => vec![x, scale, shift],
            Op::Relu { x }
            | Op::Sigmoid { x }
            | Op::SoftmaxChannel { x }
            | Op::SliceChannel { x, .. }
            | Op::Reshape { x }
            | Op::Exp { x }
            | Op::Scale { x, .. }
            | Op::AddConst { x }
            | Op::Clamp { x, .. }
            | Op::SumAll { x } => vec![x],
            Op::Linear { x, w, b } => vec![x, w, b],
            Op::AddChannelBias { x, b } => vec![x, b],
            Op::ConcatChannel { a, b }
            | Op::Add { a, b }
            | Op::Sub { a, b }
            | Op::Mul { a, b }
            | Op::Div { a, b } => vec![a, b],
        }
    }
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    param: Option<String>,
    // whether any trainable parameter is reachable below this node
    needs: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs = op.inputs().iter().any(|v| self.nodes[v.0].needs);
        self.nodes.push(Node { value, grad: None, op, param: None, needs });
        Var(self.nodes.len() - 1)
    }

    /// Whether gradients will be propagated into this node.
    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs
    }

    /// A constant leaf: no gradient flows to it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A differentiable leaf input (not tied to a ParamStore entry).
    pub fn input(&mut self, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].needs = true;
        v
    }

    pub fn leaf_scalar(&mut self, v: f32) -> Var {
        self.leaf(Tensor::scalar(v))
    }

    pub fn leaf_volume(&mut self, v: &Volume) -> Var {
        self.leaf(v.to_tensor())
    }

    /// Register a ParamStore entry as a leaf; gradients flow back to the
    /// store via [`Graph::accumulate_param_grads`].
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let entry = store.get(name)?;
        let var = self.push(entry.value.clone(), Op::Leaf);
        self.nodes[var.0].param = Some(name.to_string());
        self.nodes[var.0].needs = true;
        Ok(var)
    }

    /// Register a parameter as a frozen constant: no gradient is computed
    /// for it or (unless another input needs one) through it.
    pub fn frozen_param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let entry = store.get(name)?;
        Ok(self.push(entry.value.clone(), Op::Leaf))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f32 {
        self.nodes[v.0].value.item()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn vol_shape(&self, v: Var, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        let s = self.shape(v);
        if s.len() != 4 {
            return Err(CoreError::ShapeMismatch {
                op,
                detail: format!("expected rank-4 (c,d,h,w) tensor, got {:?}", s),
            });
        }
        Ok((s[0], s[1], s[2], s[3]))
    }

    // ---- network ops ----

    pub fn conv3d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (ci, d, h, wd) = self.vol_shape(x, "conv3d")?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 5 || ws[2] != ws[3] || ws[3] != ws[4] {
            return Err(CoreError::ShapeMismatch {
                op: "conv3d",
                detail: format!("weights must be (c_out,c_in,k,k,k) cubic, got {:?}", ws),
            });
        }
        let (co, wci, k) = (ws[0], ws[1], ws[2]);
        if k % 2 == 0 {
            return Err(CoreError::InvalidArgument(format!("conv3d kernel must be odd, got {}", k)));
        }
        if wci != ci {
            return Err(CoreError::ShapeMismatch {
                op: "conv3d",
                detail: format!("input has {} channels but weights expect {}", ci, wci),
            });
        }
        if stride == 0 {
            return Err(CoreError::InvalidArgument("conv3d stride must be positive".into()));
        }
        if d + 2 * pad < k || h + 2 * pad < k || wd + 2 * pad < k {
            return Err(CoreError::ShapeMismatch {
                op: "conv3d",
                detail: format!("kernel {} larger than padded input ({},{},{})+2*{}", k, d, h, wd, pad),
            });
        }
        let od = kernels::conv_out_dim(d, k, stride, pad);
        let oh = kernels::conv_out_dim(h, k, stride, pad);
        let ow = kernels::conv_out_dim(wd, k, stride, pad);
        let mut y = vec![0.0f32; co * od * oh * ow];
        kernels::conv_fwd(
            &self.nodes[x.0].value.data,
            (d, h, wd),
            ci,
            &self.nodes[w.0].value.data,
            co,
            k,
            stride,
            pad,
            &mut y,
        );
        let t = Tensor { shape: vec![co, od, oh, ow], data: y };
        Ok(self.push(t, Op::Conv3d { x, w, stride, pad }))
    }

    pub fn conv_transpose3d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (ci, d, h, wd) = self.vol_shape(x, "conv_transpose3d")?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 5 || ws[2] != ws[3] || ws[3] != ws[4] {
            return Err(CoreError::ShapeMismatch {
                op: "conv_transpose3d",
                detail: format!("weights must be (c_in,c_out,k,k,k) cubic, got {:?}", ws),
            });
        }
        let (wci, co, k) = (ws[0], ws[1], ws[2]);
        if wci != ci {
            return Err(CoreError::ShapeMismatch {
                op: "conv_transpose3d",
                detail: format!("input has {} channels but weights expect {}", ci, wci),
            });
        }
        let od = kernels::conv_transpose_out_dim(d, k, stride, pad);
        let oh = kernels::conv_transpose_out_dim(h, k, stride, pad);
        let ow = kernels::conv_transpose_out_dim(wd, k, stride, pad);
        let mut y = vec![0.0f32; co * od * oh * ow];
        // transpose forward == conv input-gradient with swapped roles
        kernels::conv_bwd_input(
            &self.nodes[x.0].value.data,
            (d, h, wd),
            ci,
            &self.nodes[w.0].value.data,
            co,
            k,
            stride,
            pad,
            (od, oh, ow),
            &mut y,
        );
        let t = Tensor { shape: vec![co, od, oh, ow], data: y };
        Ok(self.push(t, Op::ConvTranspose3d { x, w, stride, pad }))
    }

    /// Per-channel batch norm over the spatial axes (batch size 1, so train
    /// mode uses instance statistics). Returns the batch stats in train mode
    /// so the caller can fold them into running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        running_mean: &[f32],
        running_var: &[f32],
        mode: BnMode,
        eps: f32,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (c, d, h, w) = self.vol_shape(x, "batch_norm")?;
        if self.shape(scale) != [c] || self.shape(shift) != [c] {
            return Err(CoreError::ShapeMismatch {
                op: "batch_norm",
                detail: format!("scale/shift must have shape [{}]", c),
            });
        }
        if running_mean.len() != c || running_var.len() != c {
            return Err(CoreError::ShapeMismatch {
                op: "batch_norm",
                detail: format!("running stats must have {} channels", c),
            });
        }
        let n = d * h * w;
        let xd = &self.nodes[x.0].value.data;
        let (mean, var) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0f32; c];
                let mut var = vec![0.0f32; c];
                for ch in 0..c {
                    let s: f32 = xd[ch * n..(ch + 1) * n].iter().sum();
                    mean[ch] = s / n as f32;
                    let v: f32 = xd[ch * n..(ch + 1) * n].iter().map(|&v| (v - mean[ch]).powi(2)).sum();
                    var[ch] = v / n as f32;
                }
                (mean, var)
            }
            BnMode::Eval => (running_mean.to_vec(), running_var.to_vec()),
        };
        let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let sc = &self.nodes[scale.0].value.data;
        let sh = &self.nodes[shift.0].value.data;
        let mut out = vec![0.0f32; c * n];
        for ch in 0..c {
            let (m, is, g, b) = (mean[ch], inv_std[ch], sc[ch], sh[ch]);
            for i in 0..n {
                out[ch * n + i] = (xd[ch * n + i] - m) * is * g + b;
            }
        }
        let stats = match mode {
            BnMode::Train => Some(BatchStats { mean: mean.clone(), var: var.clone() }),
            BnMode::Eval => None,
        };
        let t = Tensor { shape: vec![c, d, h, w], data: out };
        let v = self.push(t, Op::BatchNorm { x, scale, shift, mean, inv_std, mode });
        Ok((v, stats))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.nodes[x.0].value.data.iter().map(|&v| v.max(0.0)).collect();
        let t = Tensor { shape: self.shape(x).to_vec(), data };
        self.push(t, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let data = self.nodes[x.0]
            .value
            .data
            .iter()
            .map(|&v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        let t = Tensor { shape: self.shape(x).to_vec(), data };
        self.push(t, Op::Sigmoid { x })
    }

    /// Softmax across the channel axis per voxel, with max subtraction.
    pub fn softmax_channel(&mut self, x: Var) -> Result<Var> {
        let (c, d, h, w) = self.vol_shape(x, "softmax_channel")?;
        let n = d * h * w;
        let xd = &self.nodes[x.0].value.data;
        let mut out = vec![0.0f32; c * n];
        for i in 0..n {
            let mut m = f32::NEG_INFINITY;
            for ch in 0..c {
                m = m.max(xd[ch * n + i]);
            }
            let mut z = 0.0f32;
            for ch in 0..c {
                let e = (xd[ch * n + i] - m).exp();
                out[ch * n + i] = e;
                z += e;
            }
            for ch in 0..c {
                out[ch * n + i] /= z;
            }
        }
        let t = Tensor { shape: vec![c, d, h, w], data: out };
        Ok(self.push(t, Op::SoftmaxChannel { x }))
    }

    /// y = W x + b, with x rank-1 `[in]`, W `[out, in]`, b `[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 1 || ws.len() != 2 || bs.len() != 1 {
            return Err(CoreError::ShapeMismatch {
                op: "linear",
                detail: format!("x {:?}, w {:?}, b {:?}", xs, ws, bs),
            });
        }
        let (out_n, in_n) = (ws[0], ws[1]);
        if xs[0] != in_n || bs[0] != out_n {
            return Err(CoreError::ShapeMismatch {
                op: "linear",
                detail: format!("x len {} vs in {}, b len {} vs out {}", xs[0], in_n, bs[0], out_n),
            });
        }
        let xd = &self.nodes[x.0].value.data;
        let wd = &self.nodes[w.0].value.data;
        let bd = &self.nodes[b.0].value.data;
        let mut y = vec![0.0f32; out_n];
        for o in 0..out_n {
            let mut acc = bd[o];
            let row = &wd[o * in_n..(o + 1) * in_n];
            for (wv, xv) in row.iter().zip(xd.iter()) {
                acc += wv * xv;
            }
            y[o] = acc;
        }
        Ok(self.push(Tensor { shape: vec![out_n], data: y }, Op::Linear { x, w, b }))
    }

    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (c, d, h, w) = self.vol_shape(x, "add_channel_bias")?;
        if self.shape(b) != [c] {
            return Err(CoreError::ShapeMismatch {
                op: "add_channel_bias",
                detail: format!("bias must have shape [{}], got {:?}", c, self.shape(b)),
            });
        }
        let n = d * h * w;
        let xd = &self.nodes[x.0].value.data;
        let bd = &self.nodes[b.0].value.data;
        let mut out = vec![0.0f32; c * n];
        for ch in 0..c {
            for i in 0..n {
                out[ch * n + i] = xd[ch * n + i] + bd[ch];
            }
        }
        let t = Tensor { shape: vec![c, d, h, w], data: out };
        Ok(self.push(t, Op::AddChannelBias { x, b }))
    }

    pub fn concat_channel(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ca, d, h, w) = self.vol_shape(a, "concat_channel")?;
        let (cb, db, hb, wb) = self.vol_shape(b, "concat_channel")?;
        if (d, h, w) != (db, hb, wb) {
            return Err(CoreError::ShapeMismatch {
                op: "concat_channel",
                detail: format!("spatial dims differ: ({},{},{}) vs ({},{},{})", d, h, w, db, hb, wb),
            });
        }
        let mut data = self.nodes[a.0].value.data.clone();
        data.extend_from_slice(&self.nodes[b.0].value.data);
        let t = Tensor { shape: vec![ca + cb, d, h, w], data };
        Ok(self.push(t, Op::ConcatChannel { a, b }))
    }

    pub fn slice_channel(&mut self, x: Var, ch: usize) -> Result<Var> {
        let (c, d, h, w) = self.vol_shape(x, "slice_channel")?;
        if ch >= c {
            return Err(CoreError::InvalidArgument(format!("channel {} out of {}", ch, c)));
        }
        let n = d * h * w;
        let data = self.nodes[x.0].value.data[ch * n..(ch + 1) * n].to_vec();
        let t = Tensor { shape: vec![1, d, h, w], data };
        Ok(self.push(t, Op::SliceChannel { x, ch }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.nodes[x.0].value.reshape(shape)?;
        Ok(self.push(t, Op::Reshape { x }))
    }

    // ---- elementwise / reduction ops ----

    fn binary_shapes(&self, a: Var, b: Var, op: &'static str) -> Result<Vec<usize>> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let na: usize = sa.iter().product();
        let nb: usize = sb.iter().product();
        if na == nb {
            Ok(sa.to_vec())
        } else if na == 1 {
            Ok(sb.to_vec())
        } else if nb == 1 {
            Ok(sa.to_vec())
        } else {
            Err(CoreError::ShapeMismatch { op, detail: format!("{:?} vs {:?}", sa, sb) })
        }
    }

    fn ew(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f32, f32) -> f32, name: &'static str) -> Result<Var> {
        let shape = self.binary_shapes(a, b, name)?;
        let ad = &self.nodes[a.0].value.data;
        let bd = &self.nodes[b.0].value.data;
        let n = shape.iter().product();
        let mut out = vec![0.0f32; n];
        for (i, o) in out.iter_mut().enumerate() {
            let x = ad[if ad.len() == 1 { 0 } else { i }];
            let y = bd[if bd.len() == 1 { 0 } else { i }];
            *o = f(x, y);
        }
        Ok(self.push(Tensor { shape, data: out }, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ew(a, b, Op::Add { a, b }, |x, y| x + y, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ew(a, b, Op::Sub { a, b }, |x, y| x - y, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ew(a, b, Op::Mul { a, b }, |x, y| x * y, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ew(a, b, Op::Div { a, b }, |x, y| x / y, "div")
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let data = self.nodes[x.0].value.data.iter().map(|&v| v.exp()).collect();
        let t = Tensor { shape: self.shape(x).to_vec(), data };
        self.push(t, Op::Exp { x })
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let data = self.nodes[x.0].value.data.iter().map(|&v| v * c).collect();
        let t = Tensor { shape: self.shape(x).to_vec(), data };
        self.push(t, Op::Scale { x, c })
    }

    pub fn add_const(&mut self, x: Var, c: f32) -> Var {
        let data = self.nodes[x.0].value.data.iter().map(|&v| v + c).collect();
        let t = Tensor { shape: self.shape(x).to_vec(), data };
        self.push(t, Op::AddConst { x })
    }

    pub fn clamp(&mut self, x: Var, lo: f32, hi: f32) -> Var {
        let data = self.nodes[x.0].value.data.iter().map(|&v| v.clamp(lo, hi)).collect();
        let t = Tensor { shape: self.shape(x).to_vec(), data };
        self.push(t, Op::Clamp { x, lo, hi })
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        // f64 accumulator: large reductions feed loss values whose
        // precision bounds every finite-difference check
        let s: f64 = self.nodes[x.0].value.data.iter().map(|&v| v as f64).sum();
        self.push(Tensor::scalar(s as f32), Op::SumAll { x })
    }

    // ---- backward ----

    fn add_grad(&mut self, v: Var, g: &[f32], broadcast_from: usize) {
        if !self.nodes[v.0].needs {
            return;
        }
        let node = &mut self.nodes[v.0];
        let n = node.value.numel();
        let grad = node
            .grad
            .get_or_insert_with(|| Tensor::zeros(node.value.shape.clone()));
        if n == 1 && broadcast_from > 1 {
            grad.data[0] += g.iter().sum::<f32>();
        } else {
            debug_assert_eq!(g.len(), n);
            for (gi, gv) in grad.data.iter_mut().zip(g.iter()) {
                *gi += gv;
            }
        }
    }

    /// Reverse pass from a scalar node. Gradients accumulate on the tape;
    /// nodes unreachable from `loss` keep a `None` (treated as zero) grad.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(CoreError::InvalidArgument(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].value.item().is_finite() {
            return Err(CoreError::NonFinite("loss".into()));
        }
        self.nodes[loss.0].grad = Some(Tensor::scalar(1.0));
        // Tape order is construction order, already topological.
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs {
                continue;
            }
            let g = match &self.nodes[i].grad {
                Some(g) => g.data.clone(),
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            self.backprop_node(i, &g, op)?;
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[f32], op: Op) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Conv3d { x, w, stride, pad } => {
                let xs = self.shape(x).to_vec();
                let ws = self.shape(w).to_vec();
                let ys = self.nodes[i].value.shape.clone();
                let (ci, id) = (xs[0], (xs[1], xs[2], xs[3]));
                let (co, k) = (ws[0], ws[2]);
                let od = (ys[1], ys[2], ys[3]);
                if self.nodes[x.0].needs {
                    let mut gx = vec![0.0f32; self.nodes[x.0].value.numel()];
                    kernels::conv_bwd_input(
                        g,
                        od,
                        co,
                        &self.nodes[w.0].value.data,
                        ci,
                        k,
                        stride,
                        pad,
                        id,
                        &mut gx,
                    );
                    self.add_grad(x, &gx, gx.len());
                }
                if self.nodes[w.0].needs {
                    let mut gw = vec![0.0f32; self.nodes[w.0].value.numel()];
                    kernels::conv_bwd_weight(
                        &self.nodes[x.0].value.data,
                        id,
                        ci,
                        g,
                        od,
                        co,
                        k,
                        stride,
                        pad,
                        &mut gw,
                    );
                    self.add_grad(w, &gw, gw.len());
                }
            }
            Op::ConvTranspose3d { x, w, stride, pad } => {
                let xs = self.shape(x).to_vec();
                let ws = self.shape(w).to_vec();
                let ys = self.nodes[i].value.shape.clone();
                let (ci, id) = (xs[0], (xs[1], xs[2], xs[3]));
                let (co, k) = (ws[1], ws[2]);
                let od = (ys[1], ys[2], ys[3]);
                if self.nodes[x.0].needs {
                    // input grad of transpose == conv forward on the output grad
                    let mut gx = vec![0.0f32; self.nodes[x.0].value.numel()];
                    kernels::conv_fwd(
                        g,
                        od,
                        co,
                        &self.nodes[w.0].value.data,
                        ci,
                        k,
                        stride,
                        pad,
                        &mut gx,
                    );
                    self.add_grad(x, &gx, gx.len());
                }
                if self.nodes[w.0].needs {
                    // weight grad with the conv roles swapped
                    let mut gw = vec![0.0f32; self.nodes[w.0].value.numel()];
                    kernels::conv_bwd_weight(
                        g,
                        od,
                        co,
                        &self.nodes[x.0].value.data,
                        id,
                        ci,
                        k,
                        stride,
                        pad,
                        &mut gw,
                    );
                    self.add_grad(w, &gw, gw.len());
                }
            }
            Op::BatchNorm { x, scale, shift, mean, inv_std, mode } => {
                let xs = self.shape(x).to_vec();
                let (c, n) = (xs[0], xs[1] * xs[2] * xs[3]);
                let xd = self.nodes[x.0].value.data.clone();
                let sc = self.nodes[scale.0].value.data.clone();
                let mut gx = vec![0.0f32; c * n];
                let mut gsc = vec![0.0f32; c];
                let mut gsh = vec![0.0f32; c];
                for ch in 0..c {
                    let (m, is) = (mean[ch], inv_std[ch]);
                    let gamma = sc[ch];
                    let seg = ch * n..(ch + 1) * n;
                    let mut sum_g = 0.0f32;
                    let mut sum_gx = 0.0f32;
                    for idx in seg.clone() {
                        let xhat = (xd[idx] - m) * is;
                        sum_g += g[idx];
                        sum_gx += g[idx] * xhat;
                    }
                    gsc[ch] = sum_gx;
                    gsh[ch] = sum_g;
                    match mode {
                        BnMode::Train => {
                            let inv_n = 1.0 / n as f32;
                            for idx in seg {
                                let xhat = (xd[idx] - m) * is;
                                gx[idx] =
                                    gamma * is * (g[idx] - sum_g * inv_n - xhat * sum_gx * inv_n);
                            }
                        }
                        BnMode::Eval => {
                            for idx in seg {
                                gx[idx] = gamma * is * g[idx];
                            }
                        }
                    }
                }
                self.add_grad(x, &gx, gx.len());
                self.add_grad(scale, &gsc, gsc.len());
                self.add_grad(shift, &gsh, gsh.len());
            }
            Op::Relu { x } => {
                let gx: Vec<f32> = self.nodes[x.0]
                    .value
                    .data
                    .iter()
                    .zip(g.iter())
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                self.add_grad(x, &gx, gx.len());
            }
            Op::Sigmoid { x } => {
                let gx: Vec<f32> = self.nodes[i]
                    .value
                    .data
                    .iter()
                    .zip(g.iter())
                    .map(|(&s, &gv)| gv * s * (1.0 - s))
                    .collect();
                self.add_grad(x, &gx, gx.len());
            }
            Op::SoftmaxChannel { x } => {
                let ys = self.nodes[i].value.shape.clone();
                let (c, n) = (ys[0], ys[1] * ys[2] * ys[3]);
                let s = self.nodes[i].value.data.clone();
                let mut gx = vec![0.0f32; c * n];
                for v in 0..n {
                    let mut dot = 0.0f32;
                    for ch in 0..c {
                        dot += g[ch * n + v] * s[ch * n + v];
                    }
                    for ch in 0..c {
                        gx[ch * n + v] = s[ch * n + v] * (g[ch * n + v] - dot);
                    }
                }
                self.add_grad(x, &gx, gx.len());
            }
            Op::Linear { x, w, b } => {
                let ws = self.shape(w).to_vec();
                let (out_n, in_n) = (ws[0], ws[1]);
                let xd = self.nodes[x.0].value.data.clone();
                let wd = self.nodes[w.0].value.data.clone();
                let mut gx = vec![0.0f32; in_n];
                let mut gw = vec![0.0f32; out_n * in_n];
                for o in 0..out_n {
                    let go = g[o];
                    for iidx in 0..in_n {
                        gx[iidx] += wd[o * in_n + iidx] * go;
                        gw[o * in_n + iidx] = go * xd[iidx];
                    }
                }
                self.add_grad(x, &gx, gx.len());
                self.add_grad(w, &gw, gw.len());
                self.add_grad(b, g, g.len());
            }
            Op::AddChannelBias { x, b } => {
                self.add_grad(x, g, g.len());
                let xs = self.shape(x).to_vec();
                let (c, n) = (xs[0], xs[1] * xs[2] * xs[3]);
                let mut gb = vec![0.0f32; c];
                for ch in 0..c {
                    gb[ch] = g[ch * n..(ch + 1) * n].iter().sum();
                }
                self.add_grad(b, &gb, gb.len());
            }
            Op::ConcatChannel { a, b } => {
                let na = self.nodes[a.0].value.numel();
                self.add_grad(a, &g[..na], na);
                let gb = g[na..].to_vec();
                self.add_grad(b, &gb, gb.len());
            }
            Op::SliceChannel { x, ch } => {
                let xs = self.shape(x).to_vec();
                let n = xs[1] * xs[2] * xs[3];
                let mut gx = vec![0.0f32; xs[0] * n];
                gx[ch * n..(ch + 1) * n].copy_from_slice(g);
                self.add_grad(x, &gx, gx.len());
            }
            Op::Reshape { x } => {
                self.add_grad(x, g, g.len());
            }
            Op::Add { a, b } => {
                self.add_grad(a, g, g.len());
                self.add_grad(b, g, g.len());
            }
            Op::Sub { a, b } => {
                self.add_grad(a, g, g.len());
                let neg: Vec<f32> = g.iter().map(|&v| -v).collect();
                self.add_grad(b, &neg, neg.len());
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (self.nodes[a.0].value.data.clone(), self.nodes[b.0].value.data.clone());
                let ga: Vec<f32> = g
                    .iter()
                    .enumerate()
                    .map(|(idx, &gv)| gv * bd[if bd.len() == 1 { 0 } else { idx }])
                    .collect();
                let gb: Vec<f32> = g
                    .iter()
                    .enumerate()
                    .map(|(idx, &gv)| gv * ad[if ad.len() == 1 { 0 } else { idx }])
                    .collect();
                self.add_grad(a, &ga, ga.len());
                self.add_grad(b, &gb, gb.len());
            }
            Op::Div { a, b } => {
                let (ad, bd) = (self.nodes[a.0].value.data.clone(), self.nodes[b.0].value.data.clone());
                let ga: Vec<f32> = g
                    .iter()
                    .enumerate()
                    .map(|(idx, &gv)| gv / bd[if bd.len() == 1 { 0 } else { idx }])
                    .collect();
                let gb: Vec<f32> = g
                    .iter()
                    .enumerate()
                    .map(|(idx, &gv)| {
                        let av = ad[if ad.len() == 1 { 0 } else { idx }];
                        let bv = bd[if bd.len() == 1 { 0 } else { idx }];
                        -gv * av / (bv * bv)
                    })
                    .collect();
                self.add_grad(a, &ga, ga.len());
                self.add_grad(b, &gb, gb.len());
            }
            Op::Exp { x } => {
                let gx: Vec<f32> = self.nodes[i]
                    .value
                    .data
                    .iter()
                    .zip(g.iter())
                    .map(|(&e, &gv)| gv * e)
                    .collect();
                self.add_grad(x, &gx, gx.len());
            }
            Op::Scale { x, c } => {
                let gx: Vec<f32> = g.iter().map(|&gv| gv * c).collect();
                self.add_grad(x, &gx, gx.len());
            }
            Op::AddConst { x } => {
                self.add_grad(x, g, g.len());
            }
            Op::Clamp { x, lo, hi } => {
                let gx: Vec<f32> = self.nodes[x.0]
                    .value
                    .data
                    .iter()
                    .zip(g.iter())
                    .map(|(&v, &gv)| if v > lo && v < hi { gv } else { 0.0 })
                    .collect();
                self.add_grad(x, &gx, gx.len());
            }
            Op::SumAll { x } => {
                let n = self.nodes[x.0].value.numel();
                let gx = vec![g[0]; n];
                self.add_grad(x, &gx, gx.len());
            }
        }
        Ok(())
    }

    /// Add each parameter leaf's gradient into the store's accumulators.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) -> Result<()> {
        for node in &self.nodes {
            if let (Some(name), Some(grad)) = (&node.param, &node.grad) {
                store.accumulate_grad(name, &grad.data)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fdcheck::finite_diff_check;
    use crate::params::ParamStore;
    use rand::Rng;

    fn rand_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut rng = crate::rng::derive_rng(seed, "graph-test");
        let n: usize = shape.iter().product();
        Tensor { shape, data: (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect() }
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2, 1, 1, 1], vec![0.0, 0.0]).unwrap());
        let s = g.softmax_channel(x).unwrap();
        assert_eq!(g.value(s).data, vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_is_stable_at_large_magnitude() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2, 1, 1, 1], vec![1000.0, 0.0]).unwrap());
        let s = g.softmax_channel(x).unwrap();
        let v = &g.value(s).data;
        assert!(v.iter().all(|x| x.is_finite()));
        assert!((v[0] - 1.0).abs() < 1e-6 && v[1].abs() < 1e-6);
    }

    #[test]
    fn softmax_matches_exp_normalize_oracle() {
        let t = rand_tensor(vec![3, 2, 2, 2], 11);
        let mut g = Graph::new();
        let x = g.leaf(t.clone());
        let s = g.softmax_channel(x).unwrap();
        let got = &g.value(s).data;
        let n = 8;
        for i in 0..n {
            let logits: Vec<f32> = (0..3).map(|c| t.data[c * n + i]).collect();
            let z: f32 = logits.iter().map(|&l| l.exp()).sum();
            let mut sum = 0.0f32;
            for c in 0..3 {
                let expect = logits[c].exp() / z;
                assert!((got[c * n + i] - expect).abs() <= 1e-6);
                sum += got[c * n + i];
            }
            assert!((sum - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn batch_norm_constant_channel_yields_shift() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 2, 2, 2], vec![3.5; 8]).unwrap());
        let sc = g.leaf(Tensor::new(vec![1], vec![2.0]).unwrap());
        let sh = g.leaf(Tensor::new(vec![1], vec![0.75]).unwrap());
        let (y, stats) = g.batch_norm(x, sc, sh, &[0.0], &[1.0], BnMode::Train, 1e-5).unwrap();
        for &v in &g.value(y).data {
            assert!((v - 0.75).abs() < 1e-5);
        }
        let stats = stats.unwrap();
        assert!((stats.mean[0] - 3.5).abs() < 1e-6 && stats.var[0].abs() < 1e-6);
    }

    #[test]
    fn batch_norm_eval_identity_under_unit_stats() {
        let t = rand_tensor(vec![2, 2, 2, 2], 3);
        let mut g = Graph::new();
        let x = g.leaf(t.clone());
        let sc = g.leaf(Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
        let sh = g.leaf(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let (y, stats) = g
            .batch_norm(x, sc, sh, &[0.0, 0.0], &[1.0, 1.0], BnMode::Eval, 0.0)
            .unwrap();
        assert!(stats.is_none());
        for (a, b) in g.value(y).data.iter().zip(t.data.iter()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn linear_identity_and_bias() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2], vec![3.0, -4.0]).unwrap());
        let id = g.leaf(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let zero_w = g.leaf(Tensor::new(vec![2, 2], vec![0.0; 4]).unwrap());
        let b0 = g.leaf(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let b = g.leaf(Tensor::new(vec![2], vec![5.0, 6.0]).unwrap());
        let y = g.linear(x, id, b0).unwrap();
        assert_eq!(g.value(y).data, vec![3.0, -4.0]);
        let y = g.linear(x, zero_w, b).unwrap();
        assert_eq!(g.value(y).data, vec![5.0, 6.0]);
    }

    #[test]
    fn backward_is_deterministic() {
        let mut params = ParamStore::new();
        params.insert("w", rand_tensor(vec![2, 1, 3, 3, 3], 5), true).unwrap();
        let run = || {
            let mut p = params.clone();
            let mut g = Graph::new();
            let x = g.leaf(rand_tensor(vec![1, 4, 4, 4], 6));
            let w = g.param(&p, "w").unwrap();
            let y = g.conv3d(x, w, 1, 1).unwrap();
            let y = g.relu(y);
            let loss = g.sum_all(y);
            g.backward(loss).unwrap();
            g.accumulate_param_grads(&mut p).unwrap();
            (g.scalar_value(loss), p.get("w").unwrap().grad.data.clone())
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(
            g1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            g2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn unreachable_params_get_zero_grads() {
        let mut params = ParamStore::new();
        params.insert("used", Tensor::new(vec![1], vec![2.0]).unwrap(), true).unwrap();
        params.insert("unused", Tensor::new(vec![1], vec![3.0]).unwrap(), true).unwrap();
        let mut g = Graph::new();
        let w = g.param(&params, "used").unwrap();
        let loss = g.mul(w, w).unwrap();
        let loss = g.sum_all(loss);
        g.backward(loss).unwrap();
        g.accumulate_param_grads(&mut params).unwrap();
        assert_eq!(params.get("used").unwrap().grad.data, vec![4.0]);
        assert_eq!(params.get("unused").unwrap().grad.data, vec![0.0]);
    }

    // ---- finite-difference gradient checks, three random configs each ----

    fn fd(build: &dyn Fn(&mut Graph, &ParamStore) -> crate::error::Result<Var>, params: &mut ParamStore) -> f64 {
        finite_diff_check(build, params, 1e-3, 12).unwrap()
    }

    #[test]
    fn fd_conv3d() {
        for (seed, stride, pad) in [(0u64, 1usize, 0usize), (1, 1, 1), (2, 2, 1)] {
            let mut params = ParamStore::new();
            params.insert("x", rand_tensor(vec![1, 4, 4, 4], seed), true).unwrap();
            params.insert("w", rand_tensor(vec![1, 1, 3, 3, 3], seed + 10), true).unwrap();
            let err = fd(
                &|g, p| {
                    let x = g.param(p, "x")?;
                    let w = g.param(p, "w")?;
                    let y = g.conv3d(x, w, stride, pad)?;
                    let y2 = g.mul(y, y)?;
                    Ok(g.sum_all(y2))
                },
                &mut params,
            );
            assert!(err <= 1e-3, "conv3d fd error {} (seed {})", err, seed);
        }
    }

    #[test]
    fn fd_conv_transpose3d() {
        for (seed, stride, k) in [(0u64, 2usize, 2usize), (1, 1, 3), (2, 2, 3)] {
            let mut params = ParamStore::new();
            params.insert("x", rand_tensor(vec![1, 3, 3, 3], seed), true).unwrap();
            params.insert("w", rand_tensor(vec![1, 1, k, k, k], seed + 10), true).unwrap();
            let err = fd(
                &|g, p| {
                    let x = g.param(p, "x")?;
                    let w = g.param(p, "w")?;
                    let y = g.conv_transpose3d(x, w, stride, 0)?;
                    let y2 = g.mul(y, y)?;
                    Ok(g.sum_all(y2))
                },
                &mut params,
            );
            assert!(err <= 1e-3, "conv_transpose3d fd error {} (seed {})", err, seed);
        }
    }

    #[test]
    fn fd_batch_norm() {
        for (seed, mode) in [(0u64, BnMode::Train), (1, BnMode::Eval), (2, BnMode::Train)] {
            let mut params = ParamStore::new();
            params.insert("x", rand_tensor(vec![2, 3, 3, 3], seed), true).unwrap();
            params.insert("scale", rand_tensor(vec![2], seed + 10), true).unwrap();
            params.insert("shift", rand_tensor(vec![2], seed + 20), true).unwrap();
            let err = fd(
                &|g, p| {
                    let x = g.param(p, "x")?;
                    let sc = g.param(p, "scale")?;
                    let sh = g.param(p, "shift")?;
                    let (y, _) = g.batch_norm(x, sc, sh, &[0.1, -0.2], &[0.9, 1.1], mode, 1e-5)?;
                    let y2 = g.mul(y, y)?;
                    Ok(g.sum_all(y2))
                },
                &mut params,
            );
            assert!(err <= 1e-3, "batch_norm fd error {} (seed {})", err, seed);
        }
    }

    #[test]
    fn fd_linear_softmax_sigmoid() {
        for seed in [0u64, 1, 2] {
            let mut params = ParamStore::new();
            params.insert("x", rand_tensor(vec![6], seed), true).unwrap();
            params.insert("w", rand_tensor(vec![4, 6], seed + 10), true).unwrap();
            params.insert("b", rand_tensor(vec![4], seed + 20), true).unwrap();
            let err = fd(
                &|g, p| {
                    let x = g.param(p, "x")?;
                    let w = g.param(p, "w")?;
                    let b = g.param(p, "b")?;
                    let y = g.linear(x, w, b)?;
                    let y = g.sigmoid(y);
                    let y = g.reshape(y, vec![2, 2, 1, 1])?;
                    let s = g.softmax_channel(y)?;
                    let sq = g.mul(s, s)?;
                    Ok(g.sum_all(sq))
                },
                &mut params,
            );
            assert!(err <= 1e-3, "linear/softmax fd error {} (seed {})", err, seed);
        }
    }
}
