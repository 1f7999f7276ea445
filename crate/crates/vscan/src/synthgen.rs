//! Patch-level CT-to-PET translation: a small 3-D encoder-decoder
//! generator with skip connections, a strided-conv patch critic, and a
//! least-squares adversarial + L1 training loop. Whole volumes are
//! synthesized by running the frozen generator through the sliding-window
//! stitcher (window 32, overlap 16).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::stitcher::{run_tiled, StitchError};
use crate::tensor::{
    load_checkpoint, save_checkpoint, Adam, CheckpointError, Graph, Init, ParamId, ParamSet,
    Scalar, StatId, TensorError, TensorId,
};
use crate::volume::{IntensityDomain, Modality, Volume, VolumeError};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("training needs at least one (ct, pet) patch pair")]
    EmptyPairs,
    #[error("patch buffer of {len} voxels is not a cube with edge divisible by 8")]
    BadPatch { len: usize },
    #[error("ct and pet patches differ in length: {ct} vs {pet}")]
    PairMismatch { ct: usize, pet: usize },
    #[error("{which} loss became NaN at epoch {epoch}, step {step}")]
    NanLoss {
        which: &'static str,
        epoch: usize,
        step: usize,
    },
    #[error("gan config must be positive: {msg}")]
    BadConfig { msg: String },
    #[error("synthesis input must be normalized01, got {got:?}")]
    NotNormalized { got: IntensityDomain },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Stitch(#[from] StitchError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct GanTrainConfig {
    /// Weight of the L1 reconstruction term in the generator objective.
    pub l1_weight: f64,
    pub lr_g: f64,
    pub lr_d: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        GanTrainConfig {
            l1_weight: 100.0,
            lr_g: 2e-4,
            lr_d: 2e-4,
            epochs: 30,
            batch: 4,
            seed: 0,
        }
    }
}

impl GanTrainConfig {
    fn validate(&self) -> Result<(), SynthError> {
        if self.l1_weight <= 0.0 || self.lr_g <= 0.0 || self.lr_d <= 0.0 || self.batch == 0 {
            return Err(SynthError::BadConfig {
                msg: format!(
                    "l1_weight {}, lr_g {}, lr_d {}, batch {}",
                    self.l1_weight, self.lr_g, self.lr_d, self.batch
                ),
            });
        }
        Ok(())
    }
}

/// Per-epoch mean loss components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLosses {
    pub g_adversarial: f64,
    pub g_l1: f64,
    pub d_loss: f64,
}

#[derive(Debug, Clone)]
struct ConvBn {
    w: ParamId,
    gamma: ParamId,
    beta: ParamId,
    stat: StatId,
}

struct Bound<'a, S: Scalar> {
    g: &'a mut Graph<S>,
    ps: &'a ParamSet<S>,
    train: bool,
    trainable: bool,
    binds: Vec<(ParamId, TensorId)>,
    updates: Vec<(StatId, Vec<S>, Vec<S>)>,
}

impl<'a, S: Scalar> Bound<'a, S> {
    fn bind(&mut self, pid: ParamId) -> TensorId {
        let t = if self.trainable {
            self.ps.bind(self.g, pid)
        } else {
            self.ps.bind_frozen(self.g, pid)
        };
        self.binds.push((pid, t));
        t
    }

    fn conv_bn_relu(
        &mut self,
        ids: &ConvBn,
        x: TensorId,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId, SynthError> {
        let w = self.bind(ids.w);
        let c = self.g.conv3d(x, w, None, stride, padding)?;
        let gamma = self.bind(ids.gamma);
        let beta = self.bind(ids.beta);
        let b = if self.train {
            let (y, mean, var) = self.g.batchnorm3d_train(c, gamma, beta, BN_EPS)?;
            self.updates.push((ids.stat, mean, var));
            y
        } else {
            let (m, v) = self.ps.running(ids.stat);
            let (m, v) = (m.to_vec(), v.to_vec());
            self.g.batchnorm3d_eval(c, gamma, beta, BN_EPS, &m, &v)?
        };
        Ok(self.g.relu(b))
    }
}

fn conv_bn<S: Scalar>(
    ps: &mut ParamSet<S>,
    rng: &mut ChaCha8Rng,
    name: &str,
    in_ch: usize,
    out_ch: usize,
    k: usize,
) -> ConvBn {
    ConvBn {
        w: ps.param(
            &format!("{name}.w"),
            &[out_ch, in_ch, k, k, k],
            Init::KaimingUniform {
                fan_in: in_ch * k * k * k,
            },
            rng,
        ),
        gamma: ps.param(&format!("{name}.bn.gamma"), &[out_ch], Init::Ones, rng),
        beta: ps.param(&format!("{name}.bn.beta"), &[out_ch], Init::Zeros, rng),
        stat: ps.stat(&format!("{name}.bn"), out_ch),
    }
}

/// Encoder-decoder generator over cubic patches (extent divisible by 8):
/// three stride-2 encoder blocks (16/32/64 channels), a bottleneck, three
/// nearest-upsample decoder blocks with skip concatenations (the last skip
/// is the raw input), and a sigmoid-bounded single-channel output.
pub struct GeneratorNet<S: Scalar> {
    ps: ParamSet<S>,
    enc1: ConvBn,
    enc2: ConvBn,
    enc3: ConvBn,
    bottleneck: ConvBn,
    dec3: ConvBn,
    dec2: ConvBn,
    dec1: ConvBn,
    out_w: ParamId,
    out_b: ParamId,
}

pub struct NetForward<S> {
    pub output: TensorId,
    pub binds: Vec<(ParamId, TensorId)>,
    pub stat_updates: Vec<(StatId, Vec<S>, Vec<S>)>,
}

impl<S: Scalar> GeneratorNet<S> {
    pub fn new(seed: u64) -> Self {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc1 = conv_bn(&mut ps, &mut rng, "g.enc1", 1, 16, 3);
        let enc2 = conv_bn(&mut ps, &mut rng, "g.enc2", 16, 32, 3);
        let enc3 = conv_bn(&mut ps, &mut rng, "g.enc3", 32, 64, 3);
        let bottleneck = conv_bn(&mut ps, &mut rng, "g.bottleneck", 64, 64, 3);
        let dec3 = conv_bn(&mut ps, &mut rng, "g.dec3", 64 + 32, 32, 3);
        let dec2 = conv_bn(&mut ps, &mut rng, "g.dec2", 32 + 16, 16, 3);
        let dec1 = conv_bn(&mut ps, &mut rng, "g.dec1", 16 + 1, 8, 3);
        let out_w = ps.param(
            "g.out.w",
            &[1, 8, 1, 1, 1],
            Init::KaimingUniform { fan_in: 8 },
            &mut rng,
        );
        let out_b = ps.param("g.out.b", &[1], Init::Zeros, &mut rng);
        GeneratorNet {
            ps,
            enc1,
            enc2,
            enc3,
            bottleneck,
            dec3,
            dec2,
            dec1,
            out_w,
            out_b,
        }
    }

    pub fn params(&self) -> &ParamSet<S> {
        &self.ps
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<S> {
        &mut self.ps
    }

    pub fn arch_string(&self) -> String {
        "pix2pix-g:v1:enc=16/32/64".to_string()
    }

    pub fn apply_stat_updates(&mut self, updates: Vec<(StatId, Vec<S>, Vec<S>)>) {
        for (sid, mean, var) in updates {
            self.ps.update_stat(sid, &mean, &var, BN_MOMENTUM);
        }
    }

    /// Forward on `[N,1,e,e,e]` with `e` divisible by 8; output matches the
    /// input shape with voxels in `[0,1]`.
    pub fn forward(
        &self,
        g: &mut Graph<S>,
        ct: TensorId,
        train: bool,
        trainable: bool,
    ) -> Result<NetForward<S>, SynthError> {
        let mut b = Bound {
            g,
            ps: &self.ps,
            train,
            trainable,
            binds: Vec::new(),
            updates: Vec::new(),
        };
        let e1 = b.conv_bn_relu(&self.enc1, ct, 2, 1)?;
        let e2 = b.conv_bn_relu(&self.enc2, e1, 2, 1)?;
        let e3 = b.conv_bn_relu(&self.enc3, e2, 2, 1)?;
        let bo = b.conv_bn_relu(&self.bottleneck, e3, 1, 1)?;
        let u3 = b.g.upsample2x(bo)?;
        let c3 = b.g.concat_channels(u3, e2)?;
        let d3 = b.conv_bn_relu(&self.dec3, c3, 1, 1)?;
        let u2 = b.g.upsample2x(d3)?;
        let c2 = b.g.concat_channels(u2, e1)?;
        let d2 = b.conv_bn_relu(&self.dec2, c2, 1, 1)?;
        let u1 = b.g.upsample2x(d2)?;
        let c1 = b.g.concat_channels(u1, ct)?;
        let d1 = b.conv_bn_relu(&self.dec1, c1, 1, 1)?;
        let w = b.bind(self.out_w);
        let bias = b.bind(self.out_b);
        let lin = b.g.conv3d(d1, w, Some(bias), 1, 0)?;
        let output = b.g.sigmoid(lin);
        Ok(NetForward {
            output,
            binds: b.binds,
            stat_updates: b.updates,
        })
    }
}

impl GeneratorNet<f32> {
    /// Inference on one raw patch buffer (eval-mode batch norm, no
    /// gradients, parameters untouched).
    pub fn synthesize_patch(&self, patch: &[f32]) -> Result<Vec<f32>, SynthError> {
        let edge = cube_edge(patch.len()).ok_or(SynthError::BadPatch { len: patch.len() })?;
        let mut g: Graph<f32> = Graph::new();
        let ct = g.leaf(&[1, 1, edge, edge, edge], patch.to_vec(), false)?;
        let out = self.forward(&mut g, ct, false, false)?;
        Ok(g.data(out.output).to_vec())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), SynthError> {
        save_checkpoint(&self.ps, &self.arch_string(), path)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, SynthError> {
        let ck = load_checkpoint(path)?;
        let mut net = GeneratorNet::new(0);
        ck.load_into(&mut net.ps)?;
        Ok(net)
    }
}

/// Conditional patch critic: the channel-concatenated (CT, PET) pair
/// through three stride-2 conv blocks into a small score map. Raw scores
/// (no sigmoid); the training loop drives them to 1 (real) or 0 (fake)
/// with squared error.
pub struct DiscriminatorNet<S: Scalar> {
    ps: ParamSet<S>,
    c1_w: ParamId,
    c1_b: ParamId,
    c2: ConvBn,
    c3: ConvBn,
    out_w: ParamId,
    out_b: ParamId,
}

impl<S: Scalar> DiscriminatorNet<S> {
    pub fn new(seed: u64) -> Self {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c1_w = ps.param(
            "d.c1.w",
            &[16, 2, 3, 3, 3],
            Init::KaimingUniform { fan_in: 2 * 27 },
            &mut rng,
        );
        let c1_b = ps.param("d.c1.b", &[16], Init::Zeros, &mut rng);
        let c2 = conv_bn(&mut ps, &mut rng, "d.c2", 16, 32, 3);
        let c3 = conv_bn(&mut ps, &mut rng, "d.c3", 32, 64, 3);
        let out_w = ps.param(
            "d.out.w",
            &[1, 64, 3, 3, 3],
            Init::KaimingUniform { fan_in: 64 * 27 },
            &mut rng,
        );
        let out_b = ps.param("d.out.b", &[1], Init::Zeros, &mut rng);
        DiscriminatorNet {
            ps,
            c1_w,
            c1_b,
            c2,
            c3,
            out_w,
            out_b,
        }
    }

    pub fn params(&self) -> &ParamSet<S> {
        &self.ps
    }

    pub fn apply_stat_updates(&mut self, updates: Vec<(StatId, Vec<S>, Vec<S>)>) {
        for (sid, mean, var) in updates {
            self.ps.update_stat(sid, &mean, &var, BN_MOMENTUM);
        }
    }

    /// Score map for a conditional pair; both inputs `[N,1,e,e,e]`.
    pub fn forward(
        &self,
        g: &mut Graph<S>,
        ct: TensorId,
        pet: TensorId,
        train: bool,
        trainable: bool,
    ) -> Result<NetForward<S>, SynthError> {
        let pair = g.concat_channels(ct, pet)?;
        let mut b = Bound {
            g,
            ps: &self.ps,
            train,
            trainable,
            binds: Vec::new(),
            updates: Vec::new(),
        };
        let w1 = b.bind(self.c1_w);
        let b1 = b.bind(self.c1_b);
        let h1 = b.g.conv3d(pair, w1, Some(b1), 2, 1)?;
        let h1 = b.g.relu(h1);
        let h2 = b.conv_bn_relu(&self.c2, h1, 2, 1)?;
        let h3 = b.conv_bn_relu(&self.c3, h2, 2, 1)?;
        let wo = b.bind(self.out_w);
        let bo = b.bind(self.out_b);
        let score = b.g.conv3d(h3, wo, Some(bo), 1, 1)?;
        Ok(NetForward {
            output: score,
            binds: b.binds,
            stat_updates: b.updates,
        })
    }
}

fn cube_edge(len: usize) -> Option<usize> {
    let edge = (len as f64).cbrt().round() as usize;
    (edge * edge * edge == len && edge % 8 == 0 && edge >= 8).then_some(edge)
}

fn stack_batch(patches: &[&[f32]]) -> Vec<f32> {
    let mut out = Vec::with_capacity(patches.len() * patches[0].len());
    for p in patches {
        out.extend_from_slice(p);
    }
    out
}

/// Alternating least-squares adversarial training with an L1
/// reconstruction term on the generator:
/// `L_G = mse(D(ct, G(ct)), 1) + l1_weight * L1(G(ct), pet)`,
/// `L_D = (mse(D(ct, pet), 1) + mse(D(ct, G(ct)), 0)) / 2`.
/// Deterministic under a fixed seed. Returns the nets plus per-epoch loss
/// history (adversarial and L1 components separately).
pub fn train_pix2pix(
    pairs: &[(Vec<f32>, Vec<f32>)],
    cfg: &GanTrainConfig,
) -> Result<(GeneratorNet<f32>, DiscriminatorNet<f32>, Vec<EpochLosses>), SynthError> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(SynthError::EmptyPairs);
    }
    let edge = cube_edge(pairs[0].0.len()).ok_or(SynthError::BadPatch {
        len: pairs[0].0.len(),
    })?;
    for (ct, pet) in pairs {
        if ct.len() != pet.len() || ct.len() != edge * edge * edge {
            return Err(SynthError::PairMismatch {
                ct: ct.len(),
                pet: pet.len(),
            });
        }
    }

    let mut gen = GeneratorNet::<f32>::new(cfg.seed ^ 0x9e37);
    let mut disc = DiscriminatorNet::<f32>::new(cfg.seed ^ 0x79b9);
    let mut adam_g = Adam::new(cfg.lr_g);
    let mut adam_d = Adam::new(cfg.lr_d);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        for i in (1..order.len()).rev() {
            let j = order_rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut sums = EpochLosses {
            g_adversarial: 0.0,
            g_l1: 0.0,
            d_loss: 0.0,
        };
        let mut steps = 0usize;
        for (step, chunk) in order.chunks(cfg.batch).enumerate() {
            let cts: Vec<&[f32]> = chunk.iter().map(|&i| pairs[i].0.as_slice()).collect();
            let pets: Vec<&[f32]> = chunk.iter().map(|&i| pairs[i].1.as_slice()).collect();
            let n = chunk.len();
            let shape = [n, 1, edge, edge, edge];

            // Generator phase: critic frozen, gradients flow through it.
            // The fake values are reused below to train the critic, which
            // matches the usual order (the critic sees the pre-update
            // generator's output).
            let (g_adv, g_l1, fake_values) = {
                let mut g: Graph<f32> = Graph::new();
                let ct = g.leaf(&shape, stack_batch(&cts), false)?;
                let pet = g.leaf(&shape, stack_batch(&pets), false)?;
                let fake = gen.forward(&mut g, ct, true, true)?;
                let score = disc.forward(&mut g, ct, fake.output, true, false)?;
                let adv = g.mse_to_const(score.output, 1.0);
                let l1 = g.l1_loss(fake.output, pet)?;
                let l1w = g.scale(l1, cfg.l1_weight);
                let loss = g.add(adv, l1w)?;
                let (adv_v, l1_v) = (g.value(adv) as f64, g.value(l1) as f64);
                if (adv_v + l1_v).is_nan() {
                    return Err(SynthError::NanLoss {
                        which: "generator",
                        epoch,
                        step,
                    });
                }
                let fake_values = g.data(fake.output).to_vec();
                g.backward(loss)?;
                adam_g.step(&mut gen.ps, &g, &fake.binds);
                gen.apply_stat_updates(fake.stat_updates);
                (adv_v, l1_v, fake_values)
            };

            // Discriminator phase on the same fake (as constants).
            let d_loss = {
                let mut g: Graph<f32> = Graph::new();
                let ct = g.leaf(&shape, stack_batch(&cts), false)?;
                let pet = g.leaf(&shape, stack_batch(&pets), false)?;
                let fake = g.leaf(&shape, fake_values, false)?;
                let real_score = disc.forward(&mut g, ct, pet, true, true)?;
                let fake_score = disc.forward(&mut g, ct, fake, true, true)?;
                let l_real = g.mse_to_const(real_score.output, 1.0);
                let l_fake = g.mse_to_const(fake_score.output, 0.0);
                let sum = g.add(l_real, l_fake)?;
                let loss = g.scale(sum, 0.5);
                let v = g.value(loss) as f64;
                if v.is_nan() {
                    return Err(SynthError::NanLoss {
                        which: "discriminator",
                        epoch,
                        step,
                    });
                }
                g.backward(loss)?;
                // both score passes bind the same parameters as separate
                // leaves; fold each pair into one summed gradient
                let mut merged: Vec<(ParamId, TensorId)> = Vec::new();
                for (pid, tid) in real_score.binds.into_iter().chain(fake_score.binds) {
                    match merged.iter().find(|(p, _)| *p == pid) {
                        Some(&(_, first)) => g.fold_grad(first, tid),
                        None => merged.push((pid, tid)),
                    }
                }
                adam_d.step(&mut disc.ps, &g, &merged);
                disc.apply_stat_updates(real_score.stat_updates);
                disc.apply_stat_updates(fake_score.stat_updates);
                v
            };

            sums.g_adversarial += g_adv;
            sums.g_l1 += g_l1;
            sums.d_loss += d_loss;
            steps += 1;
        }
        history.push(EpochLosses {
            g_adversarial: sums.g_adversarial / steps as f64,
            g_l1: sums.g_l1 / steps as f64,
            d_loss: sums.d_loss / steps as f64,
        });
    }
    Ok((gen, disc, history))
}

/// Extract aligned (CT, PET) patch pairs from a cohort for generator
/// training, tiling every case with the given window geometry.
pub fn extract_patch_pairs(
    cases: &[crate::volume::CaseRecord],
    window: usize,
    overlap: usize,
) -> Result<Vec<(Vec<f32>, Vec<f32>)>, SynthError> {
    use crate::stitcher::{extract, plan_windows};
    let mut pairs = Vec::new();
    for case in cases {
        let pet = case
            .pet
            .as_ref()
            .ok_or_else(|| SynthError::BadConfig {
                msg: format!("case {} has no PET volume to pair with", case.case_id),
            })?;
        let plan = plan_windows(case.ct.dims(), window, overlap)?;
        for i in 0..plan.len() {
            pairs.push((extract(&case.ct, &plan, i)?, extract(pet, &plan, i)?));
        }
    }
    Ok(pairs)
}

/// Whole-volume synthesis: tile the CT with 32-cubed windows overlapping
/// by 16, run the generator on each patch, and average the overlaps. The
/// output inherits the CT geometry; the generator is read-only.
pub fn synthesize_pet(ct: &Volume, gen: &GeneratorNet<f32>) -> Result<Volume, SynthError> {
    synthesize_pet_windowed(ct, gen, 32, 16)
}

/// Synthesis with explicit window geometry (window must divide by 8).
pub fn synthesize_pet_windowed(
    ct: &Volume,
    gen: &GeneratorNet<f32>,
    window: usize,
    overlap: usize,
) -> Result<Volume, SynthError> {
    if ct.domain() != IntensityDomain::Normalized01 {
        return Err(SynthError::NotNormalized { got: ct.domain() });
    }
    let out = run_tiled(
        ct,
        window,
        overlap,
        Modality::SyntheticPet,
        IntensityDomain::Normalized01,
        |patch| {
            gen.synthesize_patch(patch)
                .map_err(|e| e.to_string())
        },
    )?;
    Ok(out)
}
