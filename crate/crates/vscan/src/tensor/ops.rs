//! Forward and backward implementations for every recorded operation.
//!
//! Convolution kernels are written in axpy form: for each fixed kernel tap
//! the innermost loop runs over the contiguous fastest axis, which both
//! vectorizes well and fixes the floating-point accumulation order per
//! output element. Parallel splits (rayon) are always over disjoint output
//! regions, so results are bitwise identical for any thread count.

use rayon::prelude::*;

use super::{fmt_shape, Graph, Node, Scalar, TensorError, TensorId};

/// Broadcast mode for elementwise `add`/`mul` on 5-D tensors: either shapes
/// match exactly, or exactly one operand has a single channel that is
/// replicated across the other's channels. Spatial extents never broadcast.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bcast {
    None,
    /// Left operand has C = 1.
    Left,
    /// Right operand has C = 1.
    Right,
}

pub(crate) enum Op<S> {
    Leaf,
    Conv3d {
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        /// Per-channel mean/invstd actually used for normalization
        /// (batch statistics in train mode, running statistics in eval).
        mean: Vec<S>,
        invstd: Vec<S>,
        train: bool,
    },
    Relu {
        x: TensorId,
    },
    Sigmoid {
        x: TensorId,
    },
    Add {
        a: TensorId,
        b: TensorId,
        bcast: Bcast,
    },
    Mul {
        a: TensorId,
        b: TensorId,
        bcast: Bcast,
    },
    Scale {
        x: TensorId,
        alpha: S,
    },
    ConcatChannels {
        a: TensorId,
        b: TensorId,
    },
    GlobalAvgPool {
        x: TensorId,
    },
    Linear {
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
    },
    Softmax {
        x: TensorId,
    },
    WeightedCrossEntropy {
        logits: TensorId,
        labels: Vec<usize>,
        weights: Vec<S>,
        probs: Vec<S>,
    },
    L1Loss {
        pred: TensorId,
        target: TensorId,
    },
    MseToConst {
        pred: TensorId,
        target: S,
    },
    Upsample2x {
        x: TensorId,
    },
}

pub(crate) fn grad_buf<'a, S: Scalar>(
    grads: &'a mut [Option<Vec<S>>],
    id: usize,
    len: usize,
) -> &'a mut [S] {
    grads[id].get_or_insert_with(|| vec![S::ZERO; len])
}

fn dims5(shape: &[usize]) -> (usize, usize, usize, usize, usize) {
    (shape[0], shape[1], shape[2], shape[3], shape[4])
}

/// Dot product with four independent accumulators so the FMA chains can
/// overlap (fixed grouping keeps the result deterministic).
fn dot4<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = [S::ZERO; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let base = i * 4;
        acc[0] += a[base] * b[base];
        acc[1] += a[base + 1] * b[base + 1];
        acc[2] += a[base + 2] * b[base + 2];
        acc[3] += a[base + 3] * b[base + 3];
    }
    for i in chunks * 4..a.len() {
        acc[0] += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3])
}

/// Valid output range along one axis for a fixed kernel tap `kk`:
/// all `o` with `0 <= o*stride + kk - padding < dim`.
fn tap_range(out_dim: usize, dim: usize, stride: usize, padding: usize, kk: usize) -> (usize, usize) {
    let lo = if padding > kk {
        (padding - kk).div_ceil(stride)
    } else {
        0
    };
    let hi_num = dim as isize - 1 + padding as isize - kk as isize;
    if hi_num < 0 {
        return (1, 0); // empty
    }
    let hi = (hi_num as usize / stride).min(out_dim.saturating_sub(1));
    (lo, hi)
}

// ─── Forward ops ────────────────────────────────────────────────────────

impl<S: Scalar> Graph<S> {
    /// 3-D convolution over `[N,C,D,H,W]` with a cubic kernel `[K,C,k,k,k]`
    /// and optional bias `[K]`. Output extents follow
    /// `floor((dim + 2*padding - k)/stride) + 1`.
    pub fn conv3d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId, TensorError> {
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        if xs.len() != 5 || ws.len() != 5 {
            return Err(TensorError::ShapeMismatch {
                op: "conv3d",
                expected: "rank-5 input and weight".into(),
                got: format!("{} and {}", fmt_shape(&xs), fmt_shape(&ws)),
            });
        }
        if ws[2] != ws[3] || ws[3] != ws[4] {
            return Err(TensorError::InvalidArgument {
                op: "conv3d",
                msg: format!("kernel must be cubic, got {}", fmt_shape(&ws)),
            });
        }
        if xs[1] != ws[1] {
            return Err(TensorError::ChannelMismatch {
                op: "conv3d",
                input: xs[1],
                weight: ws[1],
            });
        }
        if stride != 1 && stride != 2 {
            return Err(TensorError::BadStride {
                op: "conv3d",
                stride,
            });
        }
        let k = ws[2];
        if let Some(bid) = b {
            let bs = &self.nodes[bid.0].shape;
            if bs.len() != 1 || bs[0] != ws[0] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv3d",
                    expected: format!("bias [{}]", ws[0]),
                    got: fmt_shape(bs),
                });
            }
        }
        let mut out_sp = [0usize; 3];
        for (i, &dim) in xs[2..].iter().enumerate() {
            let padded = dim + 2 * padding;
            if padded < k || (padded - k) / stride + 1 == 0 {
                return Err(TensorError::NonPositiveExtent {
                    op: "conv3d",
                    dims: xs[2..].to_vec(),
                    kernel: k,
                    stride,
                    padding,
                });
            }
            out_sp[i] = (padded - k) / stride + 1;
        }
        let out_shape = vec![xs[0], ws[0], out_sp[0], out_sp[1], out_sp[2]];
        let data = conv3d_fwd(
            &self.nodes[x.0].data,
            &xs,
            &self.nodes[w.0].data,
            &ws,
            b.map(|bid| self.nodes[bid.0].data.as_slice()),
            stride,
            padding,
            &out_sp,
        );
        let rg = self.nodes[x.0].requires_grad
            || self.nodes[w.0].requires_grad
            || b.is_some_and(|bid| self.nodes[bid.0].requires_grad);
        Ok(self.push(out_shape, data, rg, Op::Conv3d {
            x,
            w,
            b,
            stride,
            padding,
        }))
    }

    /// Batch normalization over `[N,C,D,H,W]` using batch statistics.
    /// Returns the output plus the per-channel batch mean and unbiased
    /// variance for the caller's running-statistics update.
    pub fn batchnorm3d_train(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<(TensorId, Vec<S>, Vec<S>), TensorError> {
        let xs = self.nodes[x.0].shape.clone();
        self.check_bn_shapes(&xs, gamma, beta)?;
        let (n, c, d, h, w) = dims5(&xs);
        let m = n * d * h * w;
        if m < 2 {
            return Err(TensorError::BatchTooSmall { per_channel: m });
        }
        // Batch statistics are accumulated in f64 regardless of S.
        let xd = &self.nodes[x.0].data;
        let mut mean = vec![S::ZERO; c];
        let mut invstd = vec![S::ZERO; c];
        let mut var_unbiased = vec![S::ZERO; c];
        let plane = d * h * w;
        for ci in 0..c {
            let mut sum = 0.0f64;
            for ni in 0..n {
                let base = (ni * c + ci) * plane;
                for v in &xd[base..base + plane] {
                    sum += v.to_f64();
                }
            }
            let mu = sum / m as f64;
            let mut sq = 0.0f64;
            for ni in 0..n {
                let base = (ni * c + ci) * plane;
                for v in &xd[base..base + plane] {
                    let dlt = v.to_f64() - mu;
                    sq += dlt * dlt;
                }
            }
            let var = sq / m as f64;
            mean[ci] = S::from_f64(mu);
            invstd[ci] = S::from_f64(1.0 / (var + eps).sqrt());
            var_unbiased[ci] = S::from_f64(sq / (m as f64 - 1.0));
        }
        let out = bn_apply(
            xd,
            &xs,
            &mean,
            &invstd,
            &self.nodes[gamma.0].data,
            &self.nodes[beta.0].data,
        );
        let rg = self.nodes[x.0].requires_grad
            || self.nodes[gamma.0].requires_grad
            || self.nodes[beta.0].requires_grad;
        let id = self.push(xs, out, rg, Op::BatchNorm {
            x,
            gamma,
            beta,
            mean: mean.clone(),
            invstd,
            train: true,
        });
        Ok((id, mean, var_unbiased))
    }

    /// Batch normalization using externally supplied running statistics
    /// (inference mode). Fresh statistics default to mean 0 / var 1, so
    /// evaluating before any training step is well defined.
    pub fn batchnorm3d_eval(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
        running_mean: &[S],
        running_var: &[S],
    ) -> Result<TensorId, TensorError> {
        let xs = self.nodes[x.0].shape.clone();
        self.check_bn_shapes(&xs, gamma, beta)?;
        let c = xs[1];
        if running_mean.len() != c || running_var.len() != c {
            return Err(TensorError::ShapeMismatch {
                op: "batchnorm3d",
                expected: format!("running stats of length {c}"),
                got: format!("{} and {}", running_mean.len(), running_var.len()),
            });
        }
        let invstd: Vec<S> = running_var
            .iter()
            .map(|v| S::from_f64(1.0 / (v.to_f64() + eps).sqrt()))
            .collect();
        let out = bn_apply(
            &self.nodes[x.0].data,
            &xs,
            running_mean,
            &invstd,
            &self.nodes[gamma.0].data,
            &self.nodes[beta.0].data,
        );
        let rg = self.nodes[x.0].requires_grad
            || self.nodes[gamma.0].requires_grad
            || self.nodes[beta.0].requires_grad;
        Ok(self.push(xs, out, rg, Op::BatchNorm {
            x,
            gamma,
            beta,
            mean: running_mean.to_vec(),
            invstd,
            train: false,
        }))
    }

    fn check_bn_shapes(
        &self,
        xs: &[usize],
        gamma: TensorId,
        beta: TensorId,
    ) -> Result<(), TensorError> {
        if xs.len() != 5 {
            return Err(TensorError::ShapeMismatch {
                op: "batchnorm3d",
                expected: "rank-5 input".into(),
                got: fmt_shape(xs),
            });
        }
        let c = xs[1];
        for id in [gamma, beta] {
            let s = &self.nodes[id.0].shape;
            if s.len() != 1 || s[0] != c {
                return Err(TensorError::ShapeMismatch {
                    op: "batchnorm3d",
                    expected: format!("affine parameters [{c}]"),
                    got: fmt_shape(s),
                });
            }
        }
        Ok(())
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let shape = self.nodes[x.0].shape.clone();
        let data: Vec<S> = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| v.max_s(S::ZERO))
            .collect();
        let rg = self.nodes[x.0].requires_grad;
        self.push(shape, data, rg, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let shape = self.nodes[x.0].shape.clone();
        let data: Vec<S> = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| S::ONE / (S::ONE + (-v).exp()))
            .collect();
        let rg = self.nodes[x.0].requires_grad;
        self.push(shape, data, rg, Op::Sigmoid { x })
    }

    /// Elementwise sum. Identical shapes, or a single-channel 5-D operand
    /// broadcast across the other's channels.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary_elementwise(a, b, true)
    }

    /// Elementwise product, same broadcast rule as [`Graph::add`].
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary_elementwise(a, b, false)
    }

    fn binary_elementwise(
        &mut self,
        a: TensorId,
        b: TensorId,
        is_add: bool,
    ) -> Result<TensorId, TensorError> {
        let op_name: &'static str = if is_add { "add" } else { "mul" };
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        let bcast = classify_bcast(&sa, &sb).ok_or_else(|| TensorError::ShapeMismatch {
            op: op_name,
            expected: format!("{} (or single-channel broadcast)", fmt_shape(&sa)),
            got: fmt_shape(&sb),
        })?;
        let out_shape = match bcast {
            Bcast::Left => sb.clone(),
            _ => sa.clone(),
        };
        let da = &self.nodes[a.0].data;
        let db = &self.nodes[b.0].data;
        let data = match bcast {
            Bcast::None => da
                .iter()
                .zip(db)
                .map(|(&x, &y)| if is_add { x + y } else { x * y })
                .collect(),
            Bcast::Left => bcast_apply(db, &sb, da, is_add, true),
            Bcast::Right => bcast_apply(da, &sa, db, is_add, false),
        };
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        let op = if is_add {
            Op::Add { a, b, bcast }
        } else {
            Op::Mul { a, b, bcast }
        };
        Ok(self.push(out_shape, data, rg, op))
    }

    pub fn scale(&mut self, x: TensorId, alpha: f64) -> TensorId {
        let alpha = S::from_f64(alpha);
        let shape = self.nodes[x.0].shape.clone();
        let data: Vec<S> = self.nodes[x.0].data.iter().map(|&v| v * alpha).collect();
        let rg = self.nodes[x.0].requires_grad;
        self.push(shape, data, rg, Op::Scale { x, alpha })
    }

    /// Concatenate two `[N,C,D,H,W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        if sa.len() != 5
            || sb.len() != 5
            || sa[0] != sb[0]
            || sa[2..] != sb[2..]
        {
            return Err(TensorError::ShapeMismatch {
                op: "concat_channels",
                expected: format!("[N,*,D,H,W] matching {}", fmt_shape(&sa)),
                got: fmt_shape(&sb),
            });
        }
        let (n, ca, d, h, w) = dims5(&sa);
        let cb = sb[1];
        let plane = d * h * w;
        let mut data = Vec::with_capacity(n * (ca + cb) * plane);
        let da = &self.nodes[a.0].data;
        let db = &self.nodes[b.0].data;
        for ni in 0..n {
            data.extend_from_slice(&da[ni * ca * plane..(ni + 1) * ca * plane]);
            data.extend_from_slice(&db[ni * cb * plane..(ni + 1) * cb * plane]);
        }
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(
            vec![n, ca + cb, d, h, w],
            data,
            rg,
            Op::ConcatChannels { a, b },
        ))
    }

    /// Spatial mean per channel: `[N,C,D,H,W] -> [N,C]`.
    pub fn global_avg_pool3d(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 5 {
            return Err(TensorError::ShapeMismatch {
                op: "global_avg_pool3d",
                expected: "rank-5 input".into(),
                got: fmt_shape(&xs),
            });
        }
        let (n, c, d, h, w) = dims5(&xs);
        let plane = d * h * w;
        let xd = &self.nodes[x.0].data;
        let mut data = vec![S::ZERO; n * c];
        for (nc, out) in data.iter_mut().enumerate() {
            let base = nc * plane;
            let mut sum = 0.0f64;
            for v in &xd[base..base + plane] {
                sum += v.to_f64();
            }
            *out = S::from_f64(sum / plane as f64);
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(vec![n, c], data, rg, Op::GlobalAvgPool { x }))
    }

    /// Affine map `[N,F] x [O,F] (+ [O]) -> [N,O]`.
    pub fn linear(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
    ) -> Result<TensorId, TensorError> {
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                expected: "[N,F] input and [O,F] weight".into(),
                got: format!("{} and {}", fmt_shape(&xs), fmt_shape(&ws)),
            });
        }
        let (n, f) = (xs[0], xs[1]);
        let o = ws[0];
        if let Some(bid) = b {
            let bs = &self.nodes[bid.0].shape;
            if bs.len() != 1 || bs[0] != o {
                return Err(TensorError::ShapeMismatch {
                    op: "linear",
                    expected: format!("bias [{o}]"),
                    got: fmt_shape(bs),
                });
            }
        }
        let xd = &self.nodes[x.0].data;
        let wd = &self.nodes[w.0].data;
        let mut data = vec![S::ZERO; n * o];
        for ni in 0..n {
            for oi in 0..o {
                let mut acc = match b {
                    Some(bid) => self.nodes[bid.0].data[oi],
                    None => S::ZERO,
                };
                for fi in 0..f {
                    acc += xd[ni * f + fi] * wd[oi * f + fi];
                }
                data[ni * o + oi] = acc;
            }
        }
        let rg = self.nodes[x.0].requires_grad
            || self.nodes[w.0].requires_grad
            || b.is_some_and(|bid| self.nodes[bid.0].requires_grad);
        Ok(self.push(vec![n, o], data, rg, Op::Linear { x, w, b }))
    }

    /// Row-wise softmax on `[N,O]`.
    pub fn softmax(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "softmax",
                expected: "rank-2 input".into(),
                got: fmt_shape(&xs),
            });
        }
        let (n, o) = (xs[0], xs[1]);
        let xd = &self.nodes[x.0].data;
        let mut data = vec![S::ZERO; n * o];
        for ni in 0..n {
            let row = &xd[ni * o..(ni + 1) * o];
            let mut m = row[0];
            for &v in row {
                m = m.max_s(v);
            }
            let mut sum = S::ZERO;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                data[ni * o + j] = e;
                sum += e;
            }
            for j in 0..o {
                data[ni * o + j] = data[ni * o + j] / sum;
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(xs, data, rg, Op::Softmax { x }))
    }

    /// Class-weighted cross entropy on logits `[N,K]` with labels in
    /// `0..K`. The loss is normalized by the total weight of the batch:
    /// `-(1/Σ w_{y_i}) Σ w_{y_i} log softmax(logits)_{i,y_i}`.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: TensorId,
        labels: &[usize],
        class_weights: &[f64],
    ) -> Result<TensorId, TensorError> {
        let xs = self.nodes[logits.0].shape.clone();
        if xs.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "weighted_cross_entropy",
                expected: "rank-2 logits".into(),
                got: fmt_shape(&xs),
            });
        }
        let (n, k) = (xs[0], xs[1]);
        if labels.len() != n {
            return Err(TensorError::InvalidArgument {
                op: "weighted_cross_entropy",
                msg: format!("{} labels for {} rows", labels.len(), n),
            });
        }
        if class_weights.len() != k {
            return Err(TensorError::InvalidArgument {
                op: "weighted_cross_entropy",
                msg: format!("{} class weights for {} classes", class_weights.len(), k),
            });
        }
        if labels.iter().any(|&y| y >= k) {
            return Err(TensorError::InvalidArgument {
                op: "weighted_cross_entropy",
                msg: "label out of range".into(),
            });
        }
        if class_weights.iter().any(|&w| w <= 0.0) {
            return Err(TensorError::InvalidArgument {
                op: "weighted_cross_entropy",
                msg: "class weights must be positive".into(),
            });
        }
        let xd = &self.nodes[logits.0].data;
        let mut probs = vec![S::ZERO; n * k];
        let mut loss = 0.0f64;
        let mut wsum = 0.0f64;
        for ni in 0..n {
            let row = &xd[ni * k..(ni + 1) * k];
            let mut m = row[0].to_f64();
            for &v in row {
                m = m.max(v.to_f64());
            }
            let mut sum = 0.0f64;
            for &v in row {
                sum += (v.to_f64() - m).exp();
            }
            let lse = m + sum.ln();
            for j in 0..k {
                probs[ni * k + j] = S::from_f64((row[j].to_f64() - lse).exp());
            }
            let wy = class_weights[labels[ni]];
            loss -= wy * (row[labels[ni]].to_f64() - lse);
            wsum += wy;
        }
        loss /= wsum;
        let weights: Vec<S> = class_weights.iter().map(|&w| S::from_f64(w)).collect();
        let rg = self.nodes[logits.0].requires_grad;
        Ok(self.push(
            vec![1],
            vec![S::from_f64(loss)],
            rg,
            Op::WeightedCrossEntropy {
                logits,
                labels: labels.to_vec(),
                weights,
                probs,
            },
        ))
    }

    /// Mean absolute difference between two same-shape tensors.
    pub fn l1_loss(&mut self, pred: TensorId, target: TensorId) -> Result<TensorId, TensorError> {
        let sp = &self.nodes[pred.0].shape;
        let st = &self.nodes[target.0].shape;
        if sp != st {
            return Err(TensorError::ShapeMismatch {
                op: "l1_loss",
                expected: fmt_shape(sp),
                got: fmt_shape(st),
            });
        }
        let dp = &self.nodes[pred.0].data;
        let dt = &self.nodes[target.0].data;
        let mut acc = 0.0f64;
        for (&a, &b) in dp.iter().zip(dt) {
            acc += (a - b).abs().to_f64();
        }
        let loss = acc / dp.len() as f64;
        let rg = self.nodes[pred.0].requires_grad || self.nodes[target.0].requires_grad;
        Ok(self.push(
            vec![1],
            vec![S::from_f64(loss)],
            rg,
            Op::L1Loss { pred, target },
        ))
    }

    /// Mean squared deviation from a constant target value.
    pub fn mse_to_const(&mut self, pred: TensorId, target: f64) -> TensorId {
        let t = S::from_f64(target);
        let dp = &self.nodes[pred.0].data;
        let mut acc = 0.0f64;
        for &a in dp {
            let d = (a - t).to_f64();
            acc += d * d;
        }
        let loss = acc / dp.len() as f64;
        let rg = self.nodes[pred.0].requires_grad;
        self.push(
            vec![1],
            vec![S::from_f64(loss)],
            rg,
            Op::MseToConst { pred, target: t },
        )
    }

    /// Nearest-neighbour 2x upsampling of all three spatial axes.
    pub fn upsample2x(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 5 {
            return Err(TensorError::ShapeMismatch {
                op: "upsample2x",
                expected: "rank-5 input".into(),
                got: fmt_shape(&xs),
            });
        }
        let (n, c, d, h, w) = dims5(&xs);
        let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
        let xd = &self.nodes[x.0].data;
        let mut data = vec![S::ZERO; n * c * od * oh * ow];
        for nc in 0..n * c {
            let ibase = nc * d * h * w;
            let obase = nc * od * oh * ow;
            for zd in 0..od {
                for yh in 0..oh {
                    let irow = ibase + ((zd / 2) * h + yh / 2) * w;
                    let orow = obase + (zd * oh + yh) * ow;
                    for xw in 0..ow {
                        data[orow + xw] = xd[irow + xw / 2];
                    }
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(vec![n, c, od, oh, ow], data, rg, Op::Upsample2x { x }))
    }
}

fn classify_bcast(sa: &[usize], sb: &[usize]) -> Option<Bcast> {
    if sa == sb {
        return Some(Bcast::None);
    }
    if sa.len() == 5 && sb.len() == 5 && sa[0] == sb[0] && sa[2..] == sb[2..] {
        if sa[1] == 1 && sb[1] > 1 {
            return Some(Bcast::Left);
        }
        if sb[1] == 1 && sa[1] > 1 {
            return Some(Bcast::Right);
        }
    }
    None
}

/// Apply `full op single_channel` where `single` has C = 1. `single_left`
/// selects the operand order for the (non-commutative-in-principle) op.
fn bcast_apply<S: Scalar>(
    full: &[S],
    full_shape: &[usize],
    single: &[S],
    is_add: bool,
    _single_left: bool,
) -> Vec<S> {
    let (n, c, d, h, w) = dims5(full_shape);
    let plane = d * h * w;
    let mut out = vec![S::ZERO; full.len()];
    for ni in 0..n {
        let sbase = ni * plane;
        for ci in 0..c {
            let fbase = (ni * c + ci) * plane;
            for i in 0..plane {
                let (a, b) = (full[fbase + i], single[sbase + i]);
                out[fbase + i] = if is_add { a + b } else { a * b };
            }
        }
    }
    out
}

fn bn_apply<S: Scalar>(
    x: &[S],
    shape: &[usize],
    mean: &[S],
    invstd: &[S],
    gamma: &[S],
    beta: &[S],
) -> Vec<S> {
    let (n, c, d, h, w) = dims5(shape);
    let plane = d * h * w;
    let mut out = vec![S::ZERO; x.len()];
    out.par_chunks_mut(plane)
        .enumerate()
        .for_each(|(nc, chunk)| {
            let ci = nc % c;
            let (mu, inv, g, b) = (mean[ci], invstd[ci], gamma[ci], beta[ci]);
            let base = nc * plane;
            for (i, o) in chunk.iter_mut().enumerate() {
                *o = g * ((x[base + i] - mu) * inv) + b;
            }
        });
    let _ = n;
    out
}

#[allow(clippy::too_many_arguments)]
fn conv3d_fwd<S: Scalar>(
    x: &[S],
    xs: &[usize],
    w: &[S],
    ws: &[usize],
    bias: Option<&[S]>,
    stride: usize,
    padding: usize,
    out_sp: &[usize; 3],
) -> Vec<S> {
    let (n, c, d, h, wd) = dims5(xs);
    let (k_out, k) = (ws[0], ws[2]);
    let (od, oh, ow) = (out_sp[0], out_sp[1], out_sp[2]);
    let oplane_len = od * oh * ow;
    let mut out = vec![S::ZERO; n * k_out * oplane_len];
    out.par_chunks_mut(oplane_len)
        .enumerate()
        .for_each(|(nk, oplane)| {
            let ni = nk / k_out;
            let ki = nk % k_out;
            if let Some(bs) = bias {
                let b = bs[ki];
                for o in oplane.iter_mut() {
                    *o = b;
                }
            }
            if stride == 1 && k == 3 && padding == 1 && wd >= 2 {
                // fused 3-tap row kernel for the dominant residual-block
                // shape; same per-element accumulation order as the
                // generic path (kw inner)
                for ci in 0..c {
                    let xbase = (ni * c + ci) * d * h * wd;
                    let wbase = ((ki * c + ci) * 3) * 9;
                    for kd in 0..3 {
                        for kh in 0..3 {
                            let wrow = wbase + (kd * 3 + kh) * 3;
                            let (w0, w1, w2) = (w[wrow], w[wrow + 1], w[wrow + 2]);
                            for odi in 0..od {
                                let id = odi + kd;
                                if id < 1 || id > d {
                                    continue;
                                }
                                for ohi in 0..oh {
                                    let ih = ohi + kh;
                                    if ih < 1 || ih > h {
                                        continue;
                                    }
                                    let xrow = xbase + ((id - 1) * h + (ih - 1)) * wd;
                                    let orow = (odi * oh + ohi) * ow;
                                    let xr = &x[xrow..xrow + wd];
                                    let or = &mut oplane[orow..orow + ow];
                                    or[0] += w1 * xr[0];
                                    or[0] += w2 * xr[1];
                                    for i in 1..ow - 1 {
                                        let mut acc = or[i];
                                        acc += w0 * xr[i - 1];
                                        acc += w1 * xr[i];
                                        acc += w2 * xr[i + 1];
                                        or[i] = acc;
                                    }
                                    or[ow - 1] += w0 * xr[ow - 2];
                                    or[ow - 1] += w1 * xr[ow - 1];
                                }
                            }
                        }
                    }
                }
                return;
            }
            for ci in 0..c {
                let xbase = (ni * c + ci) * d * h * wd;
                for kd in 0..k {
                    let (dlo, dhi) = tap_range(od, d, stride, padding, kd);
                    if dlo > dhi {
                        continue;
                    }
                    for kh in 0..k {
                        let (hlo, hhi) = tap_range(oh, h, stride, padding, kh);
                        if hlo > hhi {
                            continue;
                        }
                        for kw in 0..k {
                            let (wlo, whi) = tap_range(ow, wd, stride, padding, kw);
                            if wlo > whi {
                                continue;
                            }
                            let wv = w[(((ki * c + ci) * k + kd) * k + kh) * k + kw];
                            for odi in dlo..=dhi {
                                let id = odi * stride + kd - padding;
                                for ohi in hlo..=hhi {
                                    let ih = ohi * stride + kh - padding;
                                    let xrow = xbase + (id * h + ih) * wd;
                                    let orow = (odi * oh + ohi) * ow;
                                    if stride == 1 {
                                        let off = wlo + kw - padding; // iw at wlo
                                        let xseg = &x[xrow + off..xrow + off + (whi - wlo + 1)];
                                        let oseg = &mut oplane[orow + wlo..orow + whi + 1];
                                        for (o, &xv) in oseg.iter_mut().zip(xseg) {
                                            *o += wv * xv;
                                        }
                                    } else {
                                        for owi in wlo..=whi {
                                            let iw = owi * stride + kw - padding;
                                            oplane[orow + owi] += wv * x[xrow + iw];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    out
}

// ─── Backward dispatch ──────────────────────────────────────────────────

pub(crate) fn backprop<S: Scalar>(
    nodes: &[Node<S>],
    grads: &mut [Option<Vec<S>>],
    idx: usize,
    go: &[S],
) {
    match &nodes[idx].op {
        Op::Leaf => {}
        Op::Conv3d {
            x,
            w,
            b,
            stride,
            padding,
        } => conv3d_bwd(nodes, grads, idx, go, *x, *w, *b, *stride, *padding),
        Op::BatchNorm {
            x,
            gamma,
            beta,
            mean,
            invstd,
            train,
        } => bn_bwd(nodes, grads, go, *x, *gamma, *beta, mean, invstd, *train),
        Op::Relu { x } => {
            if nodes[x.0].requires_grad {
                let xd = &nodes[x.0].data;
                let g = grad_buf(grads, x.0, xd.len());
                for i in 0..xd.len() {
                    if xd[i] > S::ZERO {
                        g[i] += go[i];
                    }
                }
            }
        }
        Op::Sigmoid { x } => {
            if nodes[x.0].requires_grad {
                let y = &nodes[idx].data;
                let g = grad_buf(grads, x.0, y.len());
                for i in 0..y.len() {
                    g[i] += go[i] * y[i] * (S::ONE - y[i]);
                }
            }
        }
        Op::Add { a, b, bcast } => {
            for (id, other_is_full) in [(*a, *bcast == Bcast::Left), (*b, *bcast == Bcast::Right)] {
                if !nodes[id.0].requires_grad {
                    continue;
                }
                if other_is_full {
                    // This operand is the single-channel one: sum over channels.
                    let full_shape = &nodes[idx].shape;
                    reduce_channels_into(grads, id.0, go, full_shape, nodes[id.0].data.len());
                } else {
                    let g = grad_buf(grads, id.0, nodes[id.0].data.len());
                    for i in 0..go.len() {
                        g[i] += go[i];
                    }
                }
            }
        }
        Op::Mul { a, b, bcast } => {
            let full_shape = nodes[idx].shape.clone();
            for (this, other, this_is_single) in [
                (*a, *b, *bcast == Bcast::Left),
                (*b, *a, *bcast == Bcast::Right),
            ] {
                if !nodes[this.0].requires_grad {
                    continue;
                }
                let other_single = match bcast {
                    Bcast::None => false,
                    Bcast::Left => other == *a,
                    Bcast::Right => other == *b,
                };
                let od = &nodes[other.0].data;
                if this_is_single {
                    // grad wrt single-channel operand: sum_c go * other
                    let scaled: Vec<S> = go.iter().zip(od).map(|(&g, &o)| g * o).collect();
                    reduce_channels_into(
                        grads,
                        this.0,
                        &scaled,
                        &full_shape,
                        nodes[this.0].data.len(),
                    );
                } else {
                    let g = grad_buf(grads, this.0, nodes[this.0].data.len());
                    if other_single {
                        let (n, c, d, h, w) = dims5(&full_shape);
                        let plane = d * h * w;
                        for ni in 0..n {
                            for ci in 0..c {
                                let fbase = (ni * c + ci) * plane;
                                let sbase = ni * plane;
                                for i in 0..plane {
                                    g[fbase + i] += go[fbase + i] * od[sbase + i];
                                }
                            }
                        }
                    } else {
                        for i in 0..go.len() {
                            g[i] += go[i] * od[i];
                        }
                    }
                }
            }
        }
        Op::Scale { x, alpha } => {
            if nodes[x.0].requires_grad {
                let g = grad_buf(grads, x.0, nodes[x.0].data.len());
                for i in 0..go.len() {
                    g[i] += go[i] * *alpha;
                }
            }
        }
        Op::ConcatChannels { a, b } => {
            let (n, c_out, d, h, w) = dims5(&nodes[idx].shape);
            let plane = d * h * w;
            let ca = nodes[a.0].shape[1];
            let cb = c_out - ca;
            for (id, c_this, offset) in [(*a, ca, 0usize), (*b, cb, ca)] {
                if !nodes[id.0].requires_grad {
                    continue;
                }
                let g = grad_buf(grads, id.0, nodes[id.0].data.len());
                for ni in 0..n {
                    let src = (ni * c_out + offset) * plane;
                    let dst = ni * c_this * plane;
                    for i in 0..c_this * plane {
                        g[dst + i] += go[src + i];
                    }
                }
            }
        }
        Op::GlobalAvgPool { x } => {
            if nodes[x.0].requires_grad {
                let (n, c, d, h, w) = dims5(&nodes[x.0].shape);
                let plane = d * h * w;
                let scale = S::from_f64(1.0 / plane as f64);
                let g = grad_buf(grads, x.0, nodes[x.0].data.len());
                for nc in 0..n * c {
                    let gv = go[nc] * scale;
                    let base = nc * plane;
                    for v in &mut g[base..base + plane] {
                        *v += gv;
                    }
                }
            }
        }
        Op::Linear { x, w, b } => {
            let (n, f) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
            let o = nodes[w.0].shape[0];
            if nodes[x.0].requires_grad {
                let wd = &nodes[w.0].data;
                let g = grad_buf(grads, x.0, n * f);
                for ni in 0..n {
                    for oi in 0..o {
                        let gv = go[ni * o + oi];
                        for fi in 0..f {
                            g[ni * f + fi] += gv * wd[oi * f + fi];
                        }
                    }
                }
            }
            if nodes[w.0].requires_grad {
                let xd = &nodes[x.0].data;
                let g = grad_buf(grads, w.0, o * f);
                for ni in 0..n {
                    for oi in 0..o {
                        let gv = go[ni * o + oi];
                        for fi in 0..f {
                            g[oi * f + fi] += gv * xd[ni * f + fi];
                        }
                    }
                }
            }
            if let Some(bid) = b {
                if nodes[bid.0].requires_grad {
                    let g = grad_buf(grads, bid.0, o);
                    for ni in 0..n {
                        for oi in 0..o {
                            g[oi] += go[ni * o + oi];
                        }
                    }
                }
            }
        }
        Op::Softmax { x } => {
            if nodes[x.0].requires_grad {
                let (n, o) = (nodes[idx].shape[0], nodes[idx].shape[1]);
                let y = &nodes[idx].data;
                let g = grad_buf(grads, x.0, n * o);
                for ni in 0..n {
                    let mut dot = S::ZERO;
                    for j in 0..o {
                        dot += go[ni * o + j] * y[ni * o + j];
                    }
                    for j in 0..o {
                        g[ni * o + j] += y[ni * o + j] * (go[ni * o + j] - dot);
                    }
                }
            }
        }
        Op::WeightedCrossEntropy {
            logits,
            labels,
            weights,
            probs,
        } => {
            if nodes[logits.0].requires_grad {
                let (n, k) = (nodes[logits.0].shape[0], nodes[logits.0].shape[1]);
                let mut wsum = S::ZERO;
                for &y in labels {
                    wsum += weights[y];
                }
                let g = grad_buf(grads, logits.0, n * k);
                let gl = go[0];
                for ni in 0..n {
                    let wy = weights[labels[ni]] / wsum;
                    for j in 0..k {
                        let ind = if j == labels[ni] { S::ONE } else { S::ZERO };
                        g[ni * k + j] += gl * wy * (probs[ni * k + j] - ind);
                    }
                }
            }
        }
        Op::L1Loss { pred, target } => {
            let dp = &nodes[pred.0].data;
            let dt = &nodes[target.0].data;
            let inv = S::from_f64(1.0 / dp.len() as f64);
            let gl = go[0];
            for (id, sign) in [(*pred, S::ONE), (*target, -S::ONE)] {
                if !nodes[id.0].requires_grad {
                    continue;
                }
                let g = grad_buf(grads, id.0, dp.len());
                for i in 0..dp.len() {
                    let diff = dp[i] - dt[i];
                    let s = if diff > S::ZERO {
                        S::ONE
                    } else if diff < S::ZERO {
                        -S::ONE
                    } else {
                        S::ZERO
                    };
                    g[i] += gl * sign * s * inv;
                }
            }
        }
        Op::MseToConst { pred, target } => {
            if nodes[pred.0].requires_grad {
                let dp = &nodes[pred.0].data;
                let inv = S::from_f64(2.0 / dp.len() as f64);
                let gl = go[0];
                let g = grad_buf(grads, pred.0, dp.len());
                for i in 0..dp.len() {
                    g[i] += gl * inv * (dp[i] - *target);
                }
            }
        }
        Op::Upsample2x { x } => {
            if nodes[x.0].requires_grad {
                let (n, c, d, h, w) = dims5(&nodes[x.0].shape);
                let (oh, ow) = (2 * h, 2 * w);
                let g = grad_buf(grads, x.0, nodes[x.0].data.len());
                for nc in 0..n * c {
                    let ibase = nc * d * h * w;
                    let obase = nc * 8 * d * h * w;
                    for zd in 0..2 * d {
                        for yh in 0..oh {
                            let irow = ibase + ((zd / 2) * h + yh / 2) * w;
                            let orow = obase + (zd * oh + yh) * ow;
                            for xw in 0..ow {
                                g[irow + xw / 2] += go[orow + xw];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Sum a full `[N,C,D,H,W]` gradient over channels into a `[N,1,D,H,W]`
/// buffer (broadcast adjoint).
fn reduce_channels_into<S: Scalar>(
    grads: &mut [Option<Vec<S>>],
    id: usize,
    go: &[S],
    full_shape: &[usize],
    target_len: usize,
) {
    let (n, c, d, h, w) = dims5(full_shape);
    let plane = d * h * w;
    let g = grad_buf(grads, id, target_len);
    for ni in 0..n {
        let sbase = ni * plane;
        for ci in 0..c {
            let fbase = (ni * c + ci) * plane;
            for i in 0..plane {
                g[sbase + i] += go[fbase + i];
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv3d_bwd<S: Scalar>(
    nodes: &[Node<S>],
    grads: &mut [Option<Vec<S>>],
    idx: usize,
    go: &[S],
    x: TensorId,
    w: TensorId,
    b: Option<TensorId>,
    stride: usize,
    padding: usize,
) {
    let xs = &nodes[x.0].shape;
    let ws = &nodes[w.0].shape;
    let os = &nodes[idx].shape;
    let (n, c, d, h, wd) = dims5(xs);
    let (k_out, k) = (ws[0], ws[2]);
    let (od, oh, ow) = (os[2], os[3], os[4]);
    let oplane = od * oh * ow;
    let iplane = d * h * wd;

    if nodes[x.0].requires_grad {
        let wdat = &nodes[w.0].data;
        let mut dx = vec![S::ZERO; n * c * iplane];
        dx.par_chunks_mut(iplane).enumerate().for_each(|(ncix, dxp)| {
            let ni = ncix / c;
            let ci = ncix % c;
            if stride == 1 && k == 3 && padding == 1 && wd >= 2 {
                for ki in 0..k_out {
                    let gbase = (ni * k_out + ki) * oplane;
                    let wbase = ((ki * c + ci) * 3) * 9;
                    for kd in 0..3 {
                        for kh in 0..3 {
                            let wrow = wbase + (kd * 3 + kh) * 3;
                            let (w0, w1, w2) = (wdat[wrow], wdat[wrow + 1], wdat[wrow + 2]);
                            for id in 0..d {
                                let odi = id + 1;
                                if odi < kd || odi - kd >= od {
                                    continue;
                                }
                                for ih in 0..h {
                                    let ohi = ih + 1;
                                    if ohi < kh || ohi - kh >= oh {
                                        continue;
                                    }
                                    let grow = gbase + ((odi - kd) * oh + (ohi - kh)) * ow;
                                    let xrow = (id * h + ih) * wd;
                                    let gr = &go[grow..grow + ow];
                                    let dr = &mut dxp[xrow..xrow + wd];
                                    dr[0] += w0 * gr[1];
                                    dr[0] += w1 * gr[0];
                                    for j in 1..wd - 1 {
                                        let mut acc = dr[j];
                                        acc += w0 * gr[j + 1];
                                        acc += w1 * gr[j];
                                        acc += w2 * gr[j - 1];
                                        dr[j] = acc;
                                    }
                                    dr[wd - 1] += w1 * gr[wd - 1];
                                    dr[wd - 1] += w2 * gr[wd - 2];
                                }
                            }
                        }
                    }
                }
                return;
            }
            for ki in 0..k_out {
                let gbase = (ni * k_out + ki) * oplane;
                for kd in 0..k {
                    let (dlo, dhi) = tap_range(od, d, stride, padding, kd);
                    if dlo > dhi {
                        continue;
                    }
                    for kh in 0..k {
                        let (hlo, hhi) = tap_range(oh, h, stride, padding, kh);
                        if hlo > hhi {
                            continue;
                        }
                        for kw in 0..k {
                            let (wlo, whi) = tap_range(ow, wd, stride, padding, kw);
                            if wlo > whi {
                                continue;
                            }
                            let wv = wdat[(((ki * c + ci) * k + kd) * k + kh) * k + kw];
                            for odi in dlo..=dhi {
                                let id = odi * stride + kd - padding;
                                for ohi in hlo..=hhi {
                                    let ih = ohi * stride + kh - padding;
                                    let grow = gbase + (odi * oh + ohi) * ow;
                                    let xrow = (id * h + ih) * wd;
                                    if stride == 1 {
                                        let off = wlo + kw - padding;
                                        let dseg = &mut dxp[xrow + off..xrow + off + (whi - wlo + 1)];
                                        let gseg = &go[grow + wlo..grow + whi + 1];
                                        for (dv, &gv) in dseg.iter_mut().zip(gseg) {
                                            *dv += wv * gv;
                                        }
                                    } else {
                                        for owi in wlo..=whi {
                                            let iw = owi * stride + kw - padding;
                                            dxp[xrow + iw] += wv * go[grow + owi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
        let g = grad_buf(grads, x.0, dx.len());
        for i in 0..dx.len() {
            g[i] += dx[i];
        }
    }

    if nodes[w.0].requires_grad {
        let xdat = &nodes[x.0].data;
        let klen = c * k * k * k;
        let mut dw = vec![S::ZERO; k_out * klen];
        dw.par_chunks_mut(klen).enumerate().for_each(|(ki, dwk)| {
            if stride == 1 && k == 3 && padding == 1 && wd >= 2 {
                for ci in 0..c {
                    for kd in 0..3 {
                        for kh in 0..3 {
                            let mut acc = [S::ZERO; 3];
                            for ni in 0..n {
                                let gbase = (ni * k_out + ki) * oplane;
                                let xbase = (ni * c + ci) * iplane;
                                for odi in 0..od {
                                    let id = odi + kd;
                                    if id < 1 || id > d {
                                        continue;
                                    }
                                    for ohi in 0..oh {
                                        let ih = ohi + kh;
                                        if ih < 1 || ih > h {
                                            continue;
                                        }
                                        let gr = &go[gbase + (odi * oh + ohi) * ow..][..ow];
                                        let xr = &xdat
                                            [xbase + ((id - 1) * h + (ih - 1)) * wd..][..wd];
                                        let mut a0 = S::ZERO;
                                        let mut a1 = S::ZERO;
                                        let mut a2 = S::ZERO;
                                        for i in 1..ow - 1 {
                                            a0 += gr[i] * xr[i - 1];
                                            a1 += gr[i] * xr[i];
                                            a2 += gr[i] * xr[i + 1];
                                        }
                                        a0 += gr[ow - 1] * xr[ow - 2];
                                        a1 += gr[0] * xr[0];
                                        a1 += gr[ow - 1] * xr[ow - 1];
                                        a2 += gr[0] * xr[1];
                                        acc[0] += a0;
                                        acc[1] += a1;
                                        acc[2] += a2;
                                    }
                                }
                            }
                            let wrow = (ci * 3 + kd) * 9 + kh * 3;
                            dwk[wrow] = acc[0];
                            dwk[wrow + 1] = acc[1];
                            dwk[wrow + 2] = acc[2];
                        }
                    }
                }
                return;
            }
            for ci in 0..c {
                for kd in 0..k {
                    let (dlo, dhi) = tap_range(od, d, stride, padding, kd);
                    for kh in 0..k {
                        let (hlo, hhi) = tap_range(oh, h, stride, padding, kh);
                        for kw in 0..k {
                            let (wlo, whi) = tap_range(ow, wd, stride, padding, kw);
                            let mut acc = S::ZERO;
                            if dlo <= dhi && hlo <= hhi && wlo <= whi {
                                for ni in 0..n {
                                    let gbase = (ni * k_out + ki) * oplane;
                                    let xbase = (ni * c + ci) * iplane;
                                    for odi in dlo..=dhi {
                                        let id = odi * stride + kd - padding;
                                        for ohi in hlo..=hhi {
                                            let ih = ohi * stride + kh - padding;
                                            let grow = gbase + (odi * oh + ohi) * ow;
                                            let xrow = xbase + (id * h + ih) * wd;
                                            if stride == 1 {
                                                let off = wlo + kw - padding;
                                                let gseg = &go[grow + wlo..grow + whi + 1];
                                                let xseg =
                                                    &xdat[xrow + off..xrow + off + (whi - wlo + 1)];
                                                acc += dot4(gseg, xseg);
                                            } else {
                                                for owi in wlo..=whi {
                                                    let iw = owi * stride + kw - padding;
                                                    acc += go[grow + owi] * xdat[xrow + iw];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                            dwk[((ci * k + kd) * k + kh) * k + kw] = acc;
                        }
                    }
                }
            }
        });
        let g = grad_buf(grads, w.0, dw.len());
        for i in 0..dw.len() {
            g[i] += dw[i];
        }
    }

    if let Some(bid) = b {
        if nodes[bid.0].requires_grad {
            let g = grad_buf(grads, bid.0, k_out);
            for ni in 0..n {
                for ki in 0..k_out {
                    let base = (ni * k_out + ki) * oplane;
                    let mut acc = S::ZERO;
                    for &gv in &go[base..base + oplane] {
                        acc += gv;
                    }
                    g[ki] += acc;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn bn_bwd<S: Scalar>(
    nodes: &[Node<S>],
    grads: &mut [Option<Vec<S>>],
    go: &[S],
    x: TensorId,
    gamma: TensorId,
    beta: TensorId,
    mean: &[S],
    invstd: &[S],
    train: bool,
) {
    let (n, c, d, h, w) = dims5(&nodes[x.0].shape);
    let plane = d * h * w;
    let m = (n * plane) as f64;
    let xd = &nodes[x.0].data;
    let gd = &nodes[gamma.0].data;

    // Per-channel reductions, f64 accumulation, fixed order over (n, plane).
    let mut s1 = vec![0.0f64; c];
    let mut s2 = vec![0.0f64; c];
    for ci in 0..c {
        let (mu, inv) = (mean[ci].to_f64(), invstd[ci].to_f64());
        let mut a1 = 0.0f64;
        let mut a2 = 0.0f64;
        for ni in 0..n {
            let base = (ni * c + ci) * plane;
            for i in 0..plane {
                let g = go[base + i].to_f64();
                a1 += g;
                a2 += g * (xd[base + i].to_f64() - mu) * inv;
            }
        }
        s1[ci] = a1;
        s2[ci] = a2;
    }

    if nodes[x.0].requires_grad {
        let g = grad_buf(grads, x.0, xd.len());
        for ci in 0..c {
            let (mu, inv) = (mean[ci], invstd[ci]);
            let ginv = gd[ci] * inv;
            let mean_go = S::from_f64(s1[ci] / m);
            let mean_goxh = S::from_f64(s2[ci] / m);
            for ni in 0..n {
                let base = (ni * c + ci) * plane;
                for i in 0..plane {
                    let contrib = if train {
                        let xh = (xd[base + i] - mu) * inv;
                        ginv * (go[base + i] - mean_go - xh * mean_goxh)
                    } else {
                        ginv * go[base + i]
                    };
                    g[base + i] += contrib;
                }
            }
        }
    }
    if nodes[gamma.0].requires_grad {
        let g = grad_buf(grads, gamma.0, c);
        for ci in 0..c {
            g[ci] += S::from_f64(s2[ci]);
        }
    }
    if nodes[beta.0].requires_grad {
        let g = grad_buf(grads, beta.0, c);
        for ci in 0..c {
            g[ci] += S::from_f64(s1[ci]);
        }
    }
}
