//! 3-D residual classification backbones and multi-stage intermediate
//! fusion.
//!
//! The two-stream fusion network processes CT and PET through identical
//! stacks of residual basic blocks organized in three stages (16/32/64
//! channels, each stage opening with a stride-2 block that halves the
//! spatial extents). After the last block of every stage a fusion block
//! bottlenecks each stream to one channel with a 1x1x1 convolution plus
//! batch norm, joins the two maps multiplicatively into a single-channel
//! cross-modal descriptor, and adds that descriptor back onto every
//! channel of both streams:
//!
//! ```text
//! z    = BN(omega_ct(x_ct)) * BN(omega_pet(x_pet))
//! x_ct = x_ct + z      (broadcast across channels)
//! x_pet= x_pet + z
//! ```
//!
//! After stage 3 the streams are concatenated (128 channels), globally
//! average-pooled, and classified by a linear layer + softmax.
//! Single-stream (unimodal / early-fusion) variants reuse the same block
//! layout; late fusion averages two unimodal probability outputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{
    load_checkpoint, save_checkpoint, CheckpointError, Graph, Init, ParamId, ParamSet, Scalar,
    StatId, TensorError, TensorId,
};

pub const STAGES: usize = 3;

#[derive(Debug, Error)]
pub enum MintError {
    #[error("input dims {dims:?} must be divisible by 8 (three stride-2 stages); pad the volume")]
    NotDivisible { dims: Vec<usize> },
    #[error("expected two aligned single-channel inputs, got {a} and {b}")]
    BadInputPair { a: String, b: String },
    #[error("stage {stage} produced {got:?}, expected {expected:?}")]
    ShapeLadder {
        stage: usize,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint arch {0:?} does not describe this model kind")]
    ArchMismatch(String),
}

/// Parse `key=value` fields out of an arch descriptor like
/// `mint:v1:blocks=3:base=16:classes=2`.
fn arch_field(arch: &str, key: &str) -> Option<usize> {
    arch.split(':')
        .find_map(|part| part.strip_prefix(&format!("{key}=")))
        .and_then(|v| v.parse().ok())
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MintConfig {
    pub blocks_per_stage: usize,
    pub base_channels: usize,
    pub num_classes: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for MintConfig {
    fn default() -> Self {
        MintConfig {
            blocks_per_stage: 3,
            base_channels: 16,
            num_classes: 2,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl MintConfig {
    pub fn stage_channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    /// Feature length after concatenating both pooled streams.
    pub fn fused_features(&self) -> usize {
        2 * self.stage_channels(STAGES - 1)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
struct BnIds {
    gamma: ParamId,
    beta: ParamId,
    stat: StatId,
}

#[derive(Debug, Clone)]
struct ConvBnIds {
    w: ParamId,
    bn: BnIds,
}

#[derive(Debug, Clone)]
struct BlockIds {
    conv1: ConvBnIds,
    conv2: ConvBnIds,
    proj: Option<ConvBnIds>,
    stride: usize,
}

#[derive(Debug, Clone)]
struct FusionIds {
    omega_ct: ParamId,
    bn_ct: BnIds,
    omega_pet: ParamId,
    bn_pet: BnIds,
}

/// Pending running-statistics updates collected during a train-mode
/// forward; apply them with the owning model's `apply_stat_updates`.
pub struct StatUpdates<S> {
    list: Vec<(StatId, Vec<S>, Vec<S>)>,
}

impl<S> Default for StatUpdates<S> {
    fn default() -> Self {
        StatUpdates { list: Vec::new() }
    }
}

/// Everything a forward pass leaves behind.
pub struct ForwardArtifacts<S> {
    pub logits: TensorId,
    pub probs: TensorId,
    /// Pooled pre-classifier feature vector (`[N, F]`).
    pub features: TensorId,
    pub binds: Vec<(ParamId, TensorId)>,
    pub stat_updates: StatUpdates<S>,
}

struct Ctx<'a, S: Scalar> {
    g: &'a mut Graph<S>,
    ps: &'a ParamSet<S>,
    mode: Mode,
    eps: f64,
    binds: Vec<(ParamId, TensorId)>,
    updates: Vec<(StatId, Vec<S>, Vec<S>)>,
}

impl<'a, S: Scalar> Ctx<'a, S> {
    fn bind(&mut self, pid: ParamId) -> TensorId {
        let t = self.ps.bind(self.g, pid);
        self.binds.push((pid, t));
        t
    }

    fn bn(&mut self, x: TensorId, ids: &BnIds) -> Result<TensorId, MintError> {
        let gamma = self.bind(ids.gamma);
        let beta = self.bind(ids.beta);
        match self.mode {
            Mode::Train => {
                let (y, mean, var) = self.g.batchnorm3d_train(x, gamma, beta, self.eps)?;
                self.updates.push((ids.stat, mean, var));
                Ok(y)
            }
            Mode::Eval => {
                let (m, v) = self.ps.running(ids.stat);
                let (m, v) = (m.to_vec(), v.to_vec());
                Ok(self.g.batchnorm3d_eval(x, gamma, beta, self.eps, &m, &v)?)
            }
        }
    }

    fn block(&mut self, ids: &BlockIds, x: TensorId) -> Result<TensorId, MintError> {
        let w1 = self.bind(ids.conv1.w);
        let c1 = self.g.conv3d(x, w1, None, ids.stride, 1)?;
        let b1 = self.bn(c1, &ids.conv1.bn)?;
        let r1 = self.g.relu(b1);
        let w2 = self.bind(ids.conv2.w);
        let c2 = self.g.conv3d(r1, w2, None, 1, 1)?;
        let b2 = self.bn(c2, &ids.conv2.bn)?;
        let shortcut = match &ids.proj {
            Some(p) => {
                let wp = self.bind(p.w);
                let cp = self.g.conv3d(x, wp, None, ids.stride, 0)?;
                self.bn(cp, &p.bn)?
            }
            None => x,
        };
        let sum = self.g.add(b2, shortcut)?;
        Ok(self.g.relu(sum))
    }

    fn fusion(
        &mut self,
        ids: &FusionIds,
        x_ct: TensorId,
        x_pet: TensorId,
    ) -> Result<(TensorId, TensorId, TensorId), MintError> {
        let w_ct = self.bind(ids.omega_ct);
        let o_ct = self.g.conv3d(x_ct, w_ct, None, 1, 0)?;
        let n_ct = self.bn(o_ct, &ids.bn_ct)?;
        let w_pet = self.bind(ids.omega_pet);
        let o_pet = self.g.conv3d(x_pet, w_pet, None, 1, 0)?;
        let n_pet = self.bn(o_pet, &ids.bn_pet)?;
        let z = self.g.mul(n_ct, n_pet)?;
        let xh_ct = self.g.add(x_ct, z)?;
        let xh_pet = self.g.add(x_pet, z)?;
        Ok((xh_ct, xh_pet, z))
    }
}

fn make_bn<S: Scalar>(ps: &mut ParamSet<S>, name: &str, channels: usize) -> BnIds {
    let mut rng = ChaCha8Rng::seed_from_u64(0); // inits below are deterministic anyway
    BnIds {
        gamma: ps.param(&format!("{name}.gamma"), &[channels], Init::Ones, &mut rng),
        beta: ps.param(&format!("{name}.beta"), &[channels], Init::Zeros, &mut rng),
        stat: ps.stat(name, channels),
    }
}

fn make_conv_bn<S: Scalar>(
    ps: &mut ParamSet<S>,
    rng: &mut ChaCha8Rng,
    name: &str,
    in_ch: usize,
    out_ch: usize,
    k: usize,
) -> ConvBnIds {
    let w = ps.param(
        &format!("{name}.w"),
        &[out_ch, in_ch, k, k, k],
        Init::KaimingUniform {
            fan_in: in_ch * k * k * k,
        },
        rng,
    );
    ConvBnIds {
        w,
        bn: make_bn(ps, &format!("{name}.bn"), out_ch),
    }
}

/// One stream of residual stages: `[stage][block]`.
fn make_stream<S: Scalar>(
    ps: &mut ParamSet<S>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    in_channels: usize,
    cfg: &MintConfig,
) -> Vec<Vec<BlockIds>> {
    let mut stages = Vec::with_capacity(STAGES);
    for s in 0..STAGES {
        let out_ch = cfg.stage_channels(s);
        let mut blocks = Vec::with_capacity(cfg.blocks_per_stage);
        for b in 0..cfg.blocks_per_stage {
            let block_in = if b == 0 {
                if s == 0 {
                    in_channels
                } else {
                    cfg.stage_channels(s - 1)
                }
            } else {
                out_ch
            };
            let stride = if b == 0 { 2 } else { 1 };
            let name = format!("{prefix}.s{s}.b{b}");
            let conv1 = make_conv_bn(ps, rng, &format!("{name}.conv1"), block_in, out_ch, 3);
            let conv2 = make_conv_bn(ps, rng, &format!("{name}.conv2"), out_ch, out_ch, 3);
            let proj = (stride != 1 || block_in != out_ch)
                .then(|| make_conv_bn(ps, rng, &format!("{name}.proj"), block_in, out_ch, 1));
            blocks.push(BlockIds {
                conv1,
                conv2,
                proj,
                stride,
            });
        }
        stages.push(blocks);
    }
    stages
}

fn check_divisible(shape: &[usize]) -> Result<(), MintError> {
    if shape.len() != 5 || shape[2..].iter().any(|&d| d % 8 != 0 || d == 0) {
        return Err(MintError::NotDivisible {
            dims: shape.to_vec(),
        });
    }
    Ok(())
}

fn expect_stage_shape(
    stage: usize,
    got: &[usize],
    n: usize,
    channels: usize,
    spatial: [usize; 3],
) -> Result<(), MintError> {
    let expected = vec![n, channels, spatial[0], spatial[1], spatial[2]];
    if got != expected.as_slice() {
        return Err(MintError::ShapeLadder {
            stage,
            got: got.to_vec(),
            expected,
        });
    }
    Ok(())
}

// ─── Two-stream intermediate-fusion model ───────────────────────────────

pub struct MintModel<S: Scalar> {
    pub cfg: MintConfig,
    ps: ParamSet<S>,
    ct_stream: Vec<Vec<BlockIds>>,
    pet_stream: Vec<Vec<BlockIds>>,
    fusions: Vec<FusionIds>,
    head_w: ParamId,
    head_b: ParamId,
}

impl<S: Scalar> MintModel<S> {
    pub fn new(cfg: MintConfig, seed: u64) -> Self {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ct_stream = make_stream(&mut ps, &mut rng, "ct", 1, &cfg);
        let pet_stream = make_stream(&mut ps, &mut rng, "pet", 1, &cfg);
        let mut fusions = Vec::with_capacity(STAGES);
        for s in 0..STAGES {
            let ch = cfg.stage_channels(s);
            let omega_ct = ps.param(
                &format!("fusion.s{s}.ct.omega"),
                &[1, ch, 1, 1, 1],
                Init::KaimingUniform { fan_in: ch },
                &mut rng,
            );
            let bn_ct = make_bn(&mut ps, &format!("fusion.s{s}.ct.bn"), 1);
            let omega_pet = ps.param(
                &format!("fusion.s{s}.pet.omega"),
                &[1, ch, 1, 1, 1],
                Init::KaimingUniform { fan_in: ch },
                &mut rng,
            );
            let bn_pet = make_bn(&mut ps, &format!("fusion.s{s}.pet.bn"), 1);
            fusions.push(FusionIds {
                omega_ct,
                bn_ct,
                omega_pet,
                bn_pet,
            });
        }
        let feat = cfg.fused_features();
        let head_w = ps.param(
            "head.w",
            &[cfg.num_classes, feat],
            Init::KaimingUniform { fan_in: feat },
            &mut rng,
        );
        let head_b = ps.param("head.b", &[cfg.num_classes], Init::Zeros, &mut rng);
        MintModel {
            cfg,
            ps,
            ct_stream,
            pet_stream,
            fusions,
            head_w,
            head_b,
        }
    }

    /// Rebuild a model around an existing parameter set (the layout must
    /// come from a model with the same config, e.g. a checkpoint or a
    /// training snapshot).
    pub fn from_parts(cfg: MintConfig, params: ParamSet<S>) -> Self {
        let mut m = MintModel::new(cfg, 0);
        m.ps = params;
        m
    }

    pub fn params(&self) -> &ParamSet<S> {
        &self.ps
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<S> {
        &mut self.ps
    }

    pub fn arch_string(&self) -> String {
        format!(
            "mint:v1:blocks={}:base={}:classes={}",
            self.cfg.blocks_per_stage, self.cfg.base_channels, self.cfg.num_classes
        )
    }

    /// Test fixture: zero every fusion bottleneck and its BN affine, which
    /// collapses each cross-modal descriptor to exactly zero.
    pub fn zero_fusion(&mut self) {
        for s in 0..STAGES {
            let f = self.fusions[s].clone();
            for pid in [f.omega_ct, f.omega_pet] {
                for v in self.ps.data_mut(pid) {
                    *v = S::ZERO;
                }
            }
            for bn in [&f.bn_ct, &f.bn_pet] {
                for v in self.ps.data_mut(bn.gamma) {
                    *v = S::ZERO;
                }
                for v in self.ps.data_mut(bn.beta) {
                    *v = S::ZERO;
                }
            }
        }
    }

    pub fn apply_stat_updates(&mut self, updates: StatUpdates<S>) {
        for (sid, mean, var) in updates.list {
            self.ps.update_stat(sid, &mean, &var, self.cfg.bn_momentum);
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), MintError> {
        save_checkpoint(&self.ps, &self.arch_string(), path)?;
        Ok(())
    }

    /// Rebuild a model from a checkpoint written by [`MintModel::save`].
    pub fn load(path: &std::path::Path) -> Result<Self, MintError> {
        let ck = load_checkpoint(path)?;
        if !ck.arch.starts_with("mint:v1") {
            return Err(MintError::ArchMismatch(ck.arch));
        }
        let cfg = MintConfig {
            blocks_per_stage: arch_field(&ck.arch, "blocks")
                .ok_or_else(|| MintError::ArchMismatch(ck.arch.clone()))?,
            base_channels: arch_field(&ck.arch, "base")
                .ok_or_else(|| MintError::ArchMismatch(ck.arch.clone()))?,
            num_classes: arch_field(&ck.arch, "classes")
                .ok_or_else(|| MintError::ArchMismatch(ck.arch.clone()))?,
            ..MintConfig::default()
        };
        let mut m = MintModel::new(cfg, 0);
        ck.load_into(&mut m.ps)?;
        Ok(m)
    }

    /// Full two-stream forward with per-stage fusion.
    pub fn forward(
        &self,
        g: &mut Graph<S>,
        ct: TensorId,
        pet: TensorId,
        mode: Mode,
    ) -> Result<ForwardArtifacts<S>, MintError> {
        self.forward_inner(g, ct, pet, mode, true)
    }

    /// Fusion-ablated reference path: identical streams and head, but the
    /// fusion blocks are skipped entirely, so the streams only meet at the
    /// final channel concatenation. Used to verify that zeroed fusion is
    /// an exact identity.
    pub fn forward_without_fusion(
        &self,
        g: &mut Graph<S>,
        ct: TensorId,
        pet: TensorId,
        mode: Mode,
    ) -> Result<ForwardArtifacts<S>, MintError> {
        self.forward_inner(g, ct, pet, mode, false)
    }

    fn forward_inner(
        &self,
        g: &mut Graph<S>,
        ct: TensorId,
        pet: TensorId,
        mode: Mode,
        with_fusion: bool,
    ) -> Result<ForwardArtifacts<S>, MintError> {
        let cs = g.shape(ct).to_vec();
        let ps_shape = g.shape(pet).to_vec();
        check_divisible(&cs)?;
        if cs != ps_shape || cs[1] != 1 {
            return Err(MintError::BadInputPair {
                a: format!("{cs:?}"),
                b: format!("{ps_shape:?}"),
            });
        }
        let n = cs[0];
        let spatial0 = [cs[2], cs[3], cs[4]];
        let mut ctx = Ctx {
            g,
            ps: &self.ps,
            mode,
            eps: self.cfg.bn_eps,
            binds: Vec::new(),
            updates: Vec::new(),
        };
        let mut x_ct = ct;
        let mut x_pet = pet;
        for s in 0..STAGES {
            for b in 0..self.cfg.blocks_per_stage {
                x_ct = ctx.block(&self.ct_stream[s][b], x_ct)?;
                x_pet = ctx.block(&self.pet_stream[s][b], x_pet)?;
            }
            if with_fusion {
                let (ct_f, pet_f, _z) = ctx.fusion(&self.fusions[s], x_ct, x_pet)?;
                x_ct = ct_f;
                x_pet = pet_f;
            }
            let spatial = [
                spatial0[0] >> (s + 1),
                spatial0[1] >> (s + 1),
                spatial0[2] >> (s + 1),
            ];
            expect_stage_shape(s, ctx.g.shape(x_ct), n, self.cfg.stage_channels(s), spatial)?;
            expect_stage_shape(s, ctx.g.shape(x_pet), n, self.cfg.stage_channels(s), spatial)?;
        }
        let cat = ctx.g.concat_channels(x_ct, x_pet)?;
        let features = ctx.g.global_avg_pool3d(cat)?;
        let w = ctx.bind(self.head_w);
        let b = ctx.bind(self.head_b);
        let logits = ctx.g.linear(features, w, Some(b))?;
        let probs = ctx.g.softmax(logits)?;
        Ok(ForwardArtifacts {
            logits,
            probs,
            features,
            binds: ctx.binds,
            stat_updates: StatUpdates { list: ctx.updates },
        })
    }
}

// ─── Single-stream models (unimodal and early fusion) ───────────────────

pub struct StreamModel<S: Scalar> {
    pub cfg: MintConfig,
    pub in_channels: usize,
    ps: ParamSet<S>,
    stream: Vec<Vec<BlockIds>>,
    head_w: ParamId,
    head_b: ParamId,
}

impl<S: Scalar> StreamModel<S> {
    /// `in_channels` = 1 for a unimodal model, 2 for input-level (early)
    /// fusion of the concatenated CT/PET pair.
    pub fn new(cfg: MintConfig, in_channels: usize, seed: u64) -> Self {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stream = make_stream(&mut ps, &mut rng, "stream", in_channels, &cfg);
        let feat = cfg.stage_channels(STAGES - 1);
        let head_w = ps.param(
            "head.w",
            &[cfg.num_classes, feat],
            Init::KaimingUniform { fan_in: feat },
            &mut rng,
        );
        let head_b = ps.param("head.b", &[cfg.num_classes], Init::Zeros, &mut rng);
        StreamModel {
            cfg,
            in_channels,
            ps,
            stream,
            head_w,
            head_b,
        }
    }

    /// Rebuild a model around an existing parameter set (same layout
    /// contract as [`MintModel::from_parts`]).
    pub fn from_parts(cfg: MintConfig, in_channels: usize, params: ParamSet<S>) -> Self {
        let mut m = StreamModel::new(cfg, in_channels, 0);
        m.ps = params;
        m
    }

    pub fn params(&self) -> &ParamSet<S> {
        &self.ps
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<S> {
        &mut self.ps
    }

    pub fn arch_string(&self) -> String {
        format!(
            "stream:v1:in={}:blocks={}:base={}:classes={}",
            self.in_channels, self.cfg.blocks_per_stage, self.cfg.base_channels, self.cfg.num_classes
        )
    }

    pub fn apply_stat_updates(&mut self, updates: StatUpdates<S>) {
        for (sid, mean, var) in updates.list {
            self.ps.update_stat(sid, &mean, &var, self.cfg.bn_momentum);
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), MintError> {
        save_checkpoint(&self.ps, &self.arch_string(), path)?;
        Ok(())
    }

    /// Rebuild a model from a checkpoint written by [`StreamModel::save`].
    pub fn load(path: &std::path::Path) -> Result<Self, MintError> {
        let ck = load_checkpoint(path)?;
        if !ck.arch.starts_with("stream:v1") {
            return Err(MintError::ArchMismatch(ck.arch));
        }
        let cfg = MintConfig {
            blocks_per_stage: arch_field(&ck.arch, "blocks")
                .ok_or_else(|| MintError::ArchMismatch(ck.arch.clone()))?,
            base_channels: arch_field(&ck.arch, "base")
                .ok_or_else(|| MintError::ArchMismatch(ck.arch.clone()))?,
            num_classes: arch_field(&ck.arch, "classes")
                .ok_or_else(|| MintError::ArchMismatch(ck.arch.clone()))?,
            ..MintConfig::default()
        };
        let in_channels = arch_field(&ck.arch, "in")
            .ok_or_else(|| MintError::ArchMismatch(ck.arch.clone()))?;
        let mut m = StreamModel::new(cfg, in_channels, 0);
        ck.load_into(&mut m.ps)?;
        Ok(m)
    }

    /// Single-stream forward on an `[N, in_channels, D, H, W]` input.
    pub fn forward(
        &self,
        g: &mut Graph<S>,
        x: TensorId,
        mode: Mode,
    ) -> Result<ForwardArtifacts<S>, MintError> {
        let xs = g.shape(x).to_vec();
        check_divisible(&xs)?;
        if xs[1] != self.in_channels {
            return Err(MintError::BadInputPair {
                a: format!("{xs:?}"),
                b: format!("in_channels {}", self.in_channels),
            });
        }
        let n = xs[0];
        let spatial0 = [xs[2], xs[3], xs[4]];
        let mut ctx = Ctx {
            g,
            ps: &self.ps,
            mode,
            eps: self.cfg.bn_eps,
            binds: Vec::new(),
            updates: Vec::new(),
        };
        let mut h = x;
        for s in 0..STAGES {
            for b in 0..self.cfg.blocks_per_stage {
                h = ctx.block(&self.stream[s][b], h)?;
            }
            let spatial = [
                spatial0[0] >> (s + 1),
                spatial0[1] >> (s + 1),
                spatial0[2] >> (s + 1),
            ];
            expect_stage_shape(s, ctx.g.shape(h), n, self.cfg.stage_channels(s), spatial)?;
        }
        let features = ctx.g.global_avg_pool3d(h)?;
        let w = ctx.bind(self.head_w);
        let b = ctx.bind(self.head_b);
        let logits = ctx.g.linear(features, w, Some(b))?;
        let probs = ctx.g.softmax(logits)?;
        Ok(ForwardArtifacts {
            logits,
            probs,
            features,
            binds: ctx.binds,
            stat_updates: StatUpdates { list: ctx.updates },
        })
    }

    /// Early fusion: concatenate the two modalities along channels and run
    /// the single stream (requires `in_channels == 2`).
    pub fn forward_pair(
        &self,
        g: &mut Graph<S>,
        ct: TensorId,
        pet: TensorId,
        mode: Mode,
    ) -> Result<ForwardArtifacts<S>, MintError> {
        let x = g.concat_channels(ct, pet)?;
        self.forward(g, x, mode)
    }
}

/// Late fusion: unweighted mean of two independent probability outputs.
pub fn late_fusion_probs<S: Scalar>(p_ct: &[S], p_pet: &[S]) -> Vec<S> {
    debug_assert_eq!(p_ct.len(), p_pet.len());
    let half = S::from_f64(0.5);
    p_ct.iter()
        .zip(p_pet)
        .map(|(&a, &b)| (a + b) * half)
        .collect()
}
