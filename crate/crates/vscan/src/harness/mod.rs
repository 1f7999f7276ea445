//! Experiment orchestration: stratified cross-validation, classifier
//! training with learning-rate decay and validation-based checkpoint
//! selection, evaluation, model comparison with exact significance tests,
//! and the training-composition ratio sweep.

mod config;
mod report;
mod sweep;

pub use config::{resolve_threads, RunConfig};
pub use report::{
    comparison_report, read_csv, write_metrics_csv, write_pvalues_csv, write_sweep_csv,
};
pub use sweep::{run_ratio_sweep, sweep_svg, SweepResult, SweepRow};

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::metrics::{
    auc, balanced_accuracy, gmean, tpr, wilcoxon_signed_rank_exact, ConfusionCounts, Sided,
};
use crate::mint::{
    late_fusion_probs, ForwardArtifacts, MintConfig, MintError, MintModel, Mode, StreamModel,
};
use crate::tensor::{Adam, Graph, TensorError};
use crate::volume::{clahe_slicewise, CaseRecord, ClassLabel, Volume, VolumeError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("class {class} has {count} cases, need at least {k} for {k}-fold stratification")]
    ClassTooSmall {
        class: &'static str,
        count: usize,
        k: usize,
    },
    #[error("empty {split} split")]
    EmptySplit { split: &'static str },
    #[error("training split lost class {class}")]
    EmptyTrainingClass { class: &'static str },
    #[error("case {case_id} is missing the {what} volume required by the data policy")]
    MissingModality { case_id: String, what: &'static str },
    #[error("unknown case id {0} in fold split")]
    UnknownCase(String),
    #[error("variant {variant:?} is inconsistent with data policy {policy:?}")]
    VariantPolicyMismatch { variant: Variant, policy: DataPolicy },
    #[error("classifier loss became NaN at epoch {epoch}, step {step}")]
    NanLoss { epoch: usize, step: usize },
    #[error(transparent)]
    Mint(#[from] MintError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Mint,
    Early,
    Late,
    CtOnly,
    PetOnly,
}

impl Variant {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mint" => Some(Variant::Mint),
            "early" => Some(Variant::Early),
            "late" => Some(Variant::Late),
            "ct_only" => Some(Variant::CtOnly),
            "pet_only" => Some(Variant::PetOnly),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Mint => "mint",
            Variant::Early => "early",
            Variant::Late => "late",
            Variant::CtOnly => "ct_only",
            Variant::PetOnly => "pet_only",
        }
    }

    fn uses_pet(&self) -> bool {
        !matches!(self, Variant::CtOnly)
    }

    /// Seed-derivation tag. Deliberately independent of the data policy so
    /// that, e.g., a ratio-0 mixed run is bit-identical to a real-PET run
    /// of the same variant on the same fold.
    fn seed_tag(&self) -> u64 {
        match self {
            Variant::Mint => 1,
            Variant::Early => 2,
            Variant::Late => 3,
            Variant::CtOnly => 4,
            Variant::PetOnly => 5,
        }
    }
}

/// Where the PET channel comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataPolicy {
    RealPet,
    SynthPet,
    /// Replace real PET with synthetic PET for this percentage of cases
    /// (seeded; applied to the train and validation splits alike so the
    /// 0 and 100 endpoints coincide exactly with the pure policies).
    Mixed(u8),
    /// CT only.
    NoPet,
}

impl DataPolicy {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "real_pet" => Some(DataPolicy::RealPet),
            "synth_pet" => Some(DataPolicy::SynthPet),
            "none" => Some(DataPolicy::NoPet),
            _ => s
                .strip_prefix("mixed:")
                .and_then(|r| r.parse::<u8>().ok())
                .filter(|r| *r <= 100)
                .map(DataPolicy::Mixed),
        }
    }

    pub fn to_string_tag(self) -> String {
        match self {
            DataPolicy::RealPet => "real_pet".into(),
            DataPolicy::SynthPet => "synth_pet".into(),
            DataPolicy::NoPet => "none".into(),
            DataPolicy::Mixed(r) => format!("mixed:{r}"),
        }
    }
}

/// One cross-validation rotation: disjoint stratified id sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub fold_index: usize,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

/// Training hyper-parameters; the learning rate at epoch `e` is
/// `lr0 * decay_factor^floor(e / decay_every)`.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub lr0: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            epochs: 100,
            lr0: 0.001,
            decay_factor: 0.1,
            decay_every: 25,
            batch: 4,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * self.decay_factor.powi((epoch / self.decay_every) as i32)
    }
}

#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_gmean: f64,
}

pub enum TrainedModels {
    Mint(MintModel<f32>),
    Stream(StreamModel<f32>),
    LatePair {
        ct: StreamModel<f32>,
        pet: StreamModel<f32>,
    },
}

pub struct TrainedClassifier {
    pub variant: Variant,
    pub models: TrainedModels,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
}

/// Per-fold classification scores; `None` marks an undefined metric.
#[derive(Debug, Clone)]
pub struct MetricRow {
    pub entry: String,
    pub fold: usize,
    pub auc: Option<f64>,
    pub balanced_accuracy: Option<f64>,
    pub gmean: Option<f64>,
    pub tpr_adc: Option<f64>,
    pub tpr_scc: Option<f64>,
}

pub const METRIC_NAMES: [&str; 5] = ["auc", "balanced_accuracy", "gmean", "tpr_adc", "tpr_scc"];

impl MetricRow {
    pub fn get(&self, metric: &str) -> Option<f64> {
        match metric {
            "auc" => self.auc,
            "balanced_accuracy" => self.balanced_accuracy,
            "gmean" => self.gmean,
            "tpr_adc" => self.tpr_adc,
            "tpr_scc" => self.tpr_scc,
            _ => None,
        }
    }
}

/// Deterministic seed derivation: mix the base seed with tagged parts.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut x = base ^ 0x6a09e667f3bcc908;
    for &p in parts {
        x = splitmix(x ^ splitmix(p));
    }
    x
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

/// Stratified k-fold rotation: each class is shuffled (seeded) and cut
/// into k nearly-equal blocks; fold `f` tests on block `f`, validates on
/// block `f+1 (mod k)`, and trains on the rest — a 60/20/20 split at
/// k = 5. The same splits are reused by every model variant.
pub fn make_folds(
    cohort: &[CaseRecord],
    k: usize,
    seed: u64,
) -> Result<Vec<FoldSplit>, HarnessError> {
    let mut by_class: [Vec<&str>; 2] = [Vec::new(), Vec::new()];
    for c in cohort {
        by_class[c.label.index()].push(&c.case_id);
    }
    for (idx, name) in [(0usize, "ADC"), (1, "SCC")] {
        if by_class[idx].len() < k {
            return Err(HarnessError::ClassTooSmall {
                class: name,
                count: by_class[idx].len(),
                k,
            });
        }
    }
    let mut blocks: Vec<Vec<String>> = vec![Vec::new(); k];
    for (class_idx, ids) in by_class.iter().enumerate() {
        let mut ids: Vec<&str> = ids.clone();
        ids.sort_unstable();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xf01d, class_idx as u64]));
        shuffle(&mut ids, &mut rng);
        let n = ids.len();
        let base = n / k;
        let extra = n % k;
        let mut pos = 0;
        for (b, block) in blocks.iter_mut().enumerate() {
            let take = base + usize::from(b < extra);
            for id in &ids[pos..pos + take] {
                block.push(id.to_string());
            }
            pos += take;
        }
    }
    let mut folds = Vec::with_capacity(k);
    for f in 0..k {
        let val_block = (f + 1) % k;
        let mut train_ids = Vec::new();
        for (b, block) in blocks.iter().enumerate() {
            if b != f && b != val_block {
                train_ids.extend(block.iter().cloned());
            }
        }
        folds.push(FoldSplit {
            fold_index: f,
            train_ids,
            val_ids: blocks[val_block].clone(),
            test_ids: blocks[f].clone(),
        });
    }
    Ok(folds)
}

/// Inverse-frequency class weights normalized to mean 1:
/// `w_c = N_total / (2 * N_c)`.
pub fn class_weights(labels: &[ClassLabel]) -> Result<[f64; 2], HarnessError> {
    let n_scc = labels.iter().filter(|l| **l == ClassLabel::Scc).count();
    let n_adc = labels.len() - n_scc;
    if n_adc == 0 {
        return Err(HarnessError::EmptyTrainingClass { class: "ADC" });
    }
    if n_scc == 0 {
        return Err(HarnessError::EmptyTrainingClass { class: "SCC" });
    }
    let total = labels.len() as f64;
    Ok([total / (2.0 * n_adc as f64), total / (2.0 * n_scc as f64)])
}

/// Preprocessing knobs and training hyper-parameters for one experiment.
#[derive(Clone)]
pub struct TrainSettings {
    pub schedule: TrainSchedule,
    pub mint: MintConfig,
    /// Apply slice-wise CLAHE to synthetic PET volumes (training and
    /// testing alike).
    pub clahe: bool,
    pub clahe_tiles: (usize, usize),
    pub clahe_clip: f32,
    pub clahe_bins: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            schedule: TrainSchedule::default(),
            mint: MintConfig::default(),
            clahe: false,
            clahe_tiles: (8, 8),
            clahe_clip: 2.0,
            clahe_bins: 256,
        }
    }
}

pub struct CohortIndex<'a> {
    map: HashMap<&'a str, &'a CaseRecord>,
}

impl<'a> CohortIndex<'a> {
    pub fn new(cohort: &'a [CaseRecord]) -> Self {
        CohortIndex {
            map: cohort.iter().map(|c| (c.case_id.as_str(), c)).collect(),
        }
    }

    pub fn get(&self, id: &str) -> Result<&'a CaseRecord, HarnessError> {
        self.map
            .get(id)
            .copied()
            .ok_or_else(|| HarnessError::UnknownCase(id.to_string()))
    }
}

/// Which ids of a split get synthetic PET under `Mixed(ratio)`. The
/// selection uses its own derived stream so that ratios 0 and 100 are
/// bit-identical to the pure policies.
fn mixed_selection(ids: &[String], ratio: u8, seed: u64, split_tag: u64) -> Vec<bool> {
    let n = ids.len();
    let n_synth = ((ratio as f64 / 100.0) * n as f64).round() as usize;
    let mut take = vec![false; n];
    if n_synth == 0 {
        return take;
    }
    if n_synth >= n {
        take.iter_mut().for_each(|t| *t = true);
        return take;
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x313a, split_tag]));
    shuffle(&mut order, &mut rng);
    for &i in order.iter().take(n_synth) {
        take[i] = true;
    }
    take
}

/// Masked, optionally CLAHE-processed input tensors for one case.
struct Prepared {
    ct: Vec<f32>,
    pet: Option<Vec<f32>>,
    label: ClassLabel,
}

fn prepare_case(
    case: &CaseRecord,
    use_pet: bool,
    synth: bool,
    settings: &TrainSettings,
) -> Result<Prepared, HarnessError> {
    let ct = case.ct.apply_mask(&case.mask)?;
    let pet = if use_pet {
        let raw: &Volume = if synth {
            case.synthetic_pet
                .as_ref()
                .ok_or_else(|| HarnessError::MissingModality {
                    case_id: case.case_id.clone(),
                    what: "synthetic PET",
                })?
        } else {
            case.pet
                .as_ref()
                .ok_or_else(|| HarnessError::MissingModality {
                    case_id: case.case_id.clone(),
                    what: "PET",
                })?
        };
        let processed = if synth && settings.clahe {
            clahe_slicewise(
                raw,
                settings.clahe_tiles,
                settings.clahe_clip,
                settings.clahe_bins,
            )?
        } else {
            raw.clone()
        };
        Some(processed.apply_mask(&case.mask)?.voxels().to_vec())
    } else {
        None
    };
    Ok(Prepared {
        ct: ct.voxels().to_vec(),
        pet,
        label: case.label,
    })
}

fn prepare_split(
    index: &CohortIndex,
    ids: &[String],
    policy: DataPolicy,
    variant: Variant,
    settings: &TrainSettings,
    seed: u64,
    split_tag: u64,
) -> Result<Vec<Prepared>, HarnessError> {
    if variant.uses_pet() && policy == DataPolicy::NoPet {
        return Err(HarnessError::VariantPolicyMismatch { variant, policy });
    }
    let use_pet = variant.uses_pet();
    let synth_flags: Vec<bool> = match policy {
        DataPolicy::RealPet | DataPolicy::NoPet => vec![false; ids.len()],
        DataPolicy::SynthPet => vec![true; ids.len()],
        DataPolicy::Mixed(r) => mixed_selection(ids, r, seed, split_tag),
    };
    ids.iter()
        .zip(synth_flags)
        .map(|(id, synth)| prepare_case(index.get(id)?, use_pet, synth, settings))
        .collect()
}

fn batch_tensor(
    g: &mut Graph<f32>,
    items: &[&Prepared],
    dims: (usize, usize, usize),
    pick_pet: bool,
) -> Result<crate::tensor::TensorId, HarnessError> {
    let (d, h, w) = dims;
    let mut data = Vec::with_capacity(items.len() * d * h * w);
    for it in items {
        let src = if pick_pet {
            it.pet.as_deref().expect("pet prepared for pet variant")
        } else {
            &it.ct
        };
        data.extend_from_slice(src);
    }
    Ok(g.leaf(&[items.len(), 1, d, h, w], data, false)?)
}

enum VariantModels {
    Mint(MintModel<f32>),
    Stream(StreamModel<f32>),
    LatePair {
        ct: StreamModel<f32>,
        pet: StreamModel<f32>,
    },
}

impl VariantModels {
    fn new(variant: Variant, cfg: MintConfig, seed: u64) -> Self {
        match variant {
            Variant::Mint => VariantModels::Mint(MintModel::new(cfg, seed)),
            Variant::Early => VariantModels::Stream(StreamModel::new(cfg, 2, seed)),
            Variant::CtOnly | Variant::PetOnly => {
                VariantModels::Stream(StreamModel::new(cfg, 1, seed))
            }
            Variant::Late => VariantModels::LatePair {
                ct: StreamModel::new(cfg, 1, derive_seed(seed, &[10])),
                pet: StreamModel::new(cfg, 1, derive_seed(seed, &[11])),
            },
        }
    }

    fn snapshot(&self) -> TrainedModels {
        match self {
            VariantModels::Mint(m) => {
                TrainedModels::Mint(MintModel::from_parts(m.cfg, m.params().clone()))
            }
            VariantModels::Stream(m) => TrainedModels::Stream(StreamModel::from_parts(
                m.cfg,
                m.in_channels,
                m.params().clone(),
            )),
            VariantModels::LatePair { ct, pet } => TrainedModels::LatePair {
                ct: StreamModel::from_parts(ct.cfg, 1, ct.params().clone()),
                pet: StreamModel::from_parts(pet.cfg, 1, pet.params().clone()),
            },
        }
    }
}

/// Eval-mode class probabilities for a set of prepared cases.
fn predict(
    models: &TrainedModels,
    items: &[Prepared],
    dims: (usize, usize, usize),
    batch: usize,
) -> Result<Vec<[f32; 2]>, HarnessError> {
    let mut probs = Vec::with_capacity(items.len());
    for chunk in items.chunks(batch.max(1)) {
        let refs: Vec<&Prepared> = chunk.iter().collect();
        let mut g: Graph<f32> = Graph::new();
        let rows: Vec<[f32; 2]> = match models {
            TrainedModels::Mint(m) => {
                let ct = batch_tensor(&mut g, &refs, dims, false)?;
                let pet = batch_tensor(&mut g, &refs, dims, true)?;
                let out = m.forward(&mut g, ct, pet, Mode::Eval)?;
                chunk_probs(&g, &out)
            }
            TrainedModels::Stream(m) => {
                let out = if m.in_channels == 2 {
                    let ct = batch_tensor(&mut g, &refs, dims, false)?;
                    let pet = batch_tensor(&mut g, &refs, dims, true)?;
                    m.forward_pair(&mut g, ct, pet, Mode::Eval)?
                } else {
                    let uses_pet = refs[0].pet.is_some();
                    let x = batch_tensor(&mut g, &refs, dims, uses_pet)?;
                    m.forward(&mut g, x, Mode::Eval)?
                };
                chunk_probs(&g, &out)
            }
            TrainedModels::LatePair { ct: mc, pet: mp } => {
                let ct = batch_tensor(&mut g, &refs, dims, false)?;
                let pet = batch_tensor(&mut g, &refs, dims, true)?;
                let oc = mc.forward(&mut g, ct, Mode::Eval)?;
                let op = mp.forward(&mut g, pet, Mode::Eval)?;
                let fused = late_fusion_probs(g.data(oc.probs), g.data(op.probs));
                fused.chunks(2).map(|r| [r[0], r[1]]).collect()
            }
        };
        probs.extend(rows);
    }
    Ok(probs)
}

fn chunk_probs(g: &Graph<f32>, out: &ForwardArtifacts<f32>) -> Vec<[f32; 2]> {
    g.data(out.probs).chunks(2).map(|r| [r[0], r[1]]).collect()
}

fn gmean_of(preds: &[[f32; 2]], labels: &[ClassLabel]) -> f64 {
    let truth: Vec<usize> = labels.iter().map(|l| l.index()).collect();
    let hard: Vec<usize> = preds.iter().map(|p| usize::from(p[1] >= p[0])).collect();
    ConfusionCounts::from_predictions(&truth, &hard)
        .ok()
        .and_then(|c| gmean(&c))
        .unwrap_or(0.0)
}

/// Train one classifier variant on a fold. The returned checkpoint is the
/// epoch with the best validation GMean (ties keep the earlier epoch).
pub fn train_classifier(
    cohort: &[CaseRecord],
    variant: Variant,
    fold: &FoldSplit,
    policy: DataPolicy,
    settings: &TrainSettings,
    seed: u64,
) -> Result<TrainedClassifier, HarnessError> {
    let index = CohortIndex::new(cohort);
    if fold.train_ids.is_empty() {
        return Err(HarnessError::EmptySplit { split: "train" });
    }
    if fold.val_ids.is_empty() {
        return Err(HarnessError::EmptySplit {
            split: "validation",
        });
    }
    let dims = index.get(&fold.train_ids[0])?.dims();
    let train = prepare_split(&index, &fold.train_ids, policy, variant, settings, seed, 1)?;
    let val = prepare_split(&index, &fold.val_ids, policy, variant, settings, seed, 2)?;
    let labels: Vec<ClassLabel> = train.iter().map(|p| p.label).collect();
    let weights = class_weights(&labels)?;
    let val_labels: Vec<ClassLabel> = val.iter().map(|p| p.label).collect();

    let mut models = VariantModels::new(variant, settings.mint, derive_seed(seed, &[0x17]));
    let mut adam = Adam::new(settings.schedule.lr0);
    let mut adam_second = Adam::new(settings.schedule.lr0); // late-fusion second stream
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x0d]));
    let mut log = Vec::with_capacity(settings.schedule.epochs);
    let mut best: Option<(usize, f64, TrainedModels)> = None;

    for epoch in 0..settings.schedule.epochs {
        let lr = settings.schedule.lr_at(epoch);
        adam.lr = lr;
        adam_second.lr = lr;
        let mut order: Vec<usize> = (0..train.len()).collect();
        shuffle(&mut order, &mut order_rng);
        let mut loss_sum = 0.0f64;
        let mut steps = 0usize;
        for (step, chunk) in order.chunks(settings.schedule.batch.max(1)).enumerate() {
            let items: Vec<&Prepared> = chunk.iter().map(|&i| &train[i]).collect();
            let batch_labels: Vec<usize> = items.iter().map(|p| p.label.index()).collect();
            let mut g: Graph<f32> = Graph::new();
            let loss_val = match &mut models {
                VariantModels::Mint(m) => {
                    let ct = batch_tensor(&mut g, &items, dims, false)?;
                    let pet = batch_tensor(&mut g, &items, dims, true)?;
                    let out = m.forward(&mut g, ct, pet, Mode::Train)?;
                    let loss = g.weighted_cross_entropy(out.logits, &batch_labels, &weights)?;
                    let v = g.value(loss);
                    g.backward(loss)?;
                    adam.step(m.params_mut(), &g, &out.binds);
                    m.apply_stat_updates(out.stat_updates);
                    v
                }
                VariantModels::Stream(m) => {
                    let out = if m.in_channels == 2 {
                        let ct = batch_tensor(&mut g, &items, dims, false)?;
                        let pet = batch_tensor(&mut g, &items, dims, true)?;
                        m.forward_pair(&mut g, ct, pet, Mode::Train)?
                    } else {
                        let uses_pet = items[0].pet.is_some();
                        let x = batch_tensor(&mut g, &items, dims, uses_pet)?;
                        m.forward(&mut g, x, Mode::Train)?
                    };
                    let loss = g.weighted_cross_entropy(out.logits, &batch_labels, &weights)?;
                    let v = g.value(loss);
                    g.backward(loss)?;
                    adam.step(m.params_mut(), &g, &out.binds);
                    m.apply_stat_updates(out.stat_updates);
                    v
                }
                VariantModels::LatePair { ct: mc, pet: mp } => {
                    // independent unimodal streams trained side by side
                    let ct = batch_tensor(&mut g, &items, dims, false)?;
                    let oc = mc.forward(&mut g, ct, Mode::Train)?;
                    let loss_c = g.weighted_cross_entropy(oc.logits, &batch_labels, &weights)?;
                    let vc = g.value(loss_c);
                    g.backward(loss_c)?;
                    adam.step(mc.params_mut(), &g, &oc.binds);
                    mc.apply_stat_updates(oc.stat_updates);

                    let mut g2: Graph<f32> = Graph::new();
                    let pet = batch_tensor(&mut g2, &items, dims, true)?;
                    let op = mp.forward(&mut g2, pet, Mode::Train)?;
                    let loss_p = g2.weighted_cross_entropy(op.logits, &batch_labels, &weights)?;
                    let vp = g2.value(loss_p);
                    g2.backward(loss_p)?;
                    adam_second.step(mp.params_mut(), &g2, &op.binds);
                    mp.apply_stat_updates(op.stat_updates);
                    0.5 * (vc + vp)
                }
            };
            if (loss_val as f64).is_nan() {
                return Err(HarnessError::NanLoss { epoch, step });
            }
            loss_sum += loss_val as f64;
            steps += 1;
        }

        let snapshot = models.snapshot();
        let val_probs = predict(&snapshot, &val, dims, settings.schedule.batch.max(2))?;
        let vg = gmean_of(&val_probs, &val_labels);
        log.push(EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / steps.max(1) as f64,
            val_gmean: vg,
        });
        let better = match &best {
            Some((_, best_g, _)) => vg > *best_g,
            None => true,
        };
        if better {
            best = Some((epoch, vg, snapshot));
        }
    }
    let (best_epoch, _, models) = best.expect("at least one epoch");
    Ok(TrainedClassifier {
        variant,
        models,
        log,
        best_epoch,
    })
}

/// Raw predictions plus the per-fold metric row.
pub struct EvalOutcome {
    pub scores: Vec<(f64, bool)>,
    pub row: MetricRow,
}

pub fn evaluate(
    trained: &TrainedClassifier,
    cohort: &[CaseRecord],
    fold: &FoldSplit,
    test_policy: DataPolicy,
    settings: &TrainSettings,
    entry: &str,
    seed: u64,
) -> Result<EvalOutcome, HarnessError> {
    let index = CohortIndex::new(cohort);
    if fold.test_ids.is_empty() {
        return Err(HarnessError::EmptySplit { split: "test" });
    }
    let dims = index.get(&fold.test_ids[0])?.dims();
    let test = prepare_split(
        &index,
        &fold.test_ids,
        test_policy,
        trained.variant,
        settings,
        seed,
        3,
    )?;
    let labels: Vec<ClassLabel> = test.iter().map(|p| p.label).collect();
    let probs = predict(&trained.models, &test, dims, settings.schedule.batch.max(2))?;
    Ok(outcome_from_probs(entry, fold.fold_index, &probs, &labels))
}

/// Score a set of class-probability rows against labels.
pub fn outcome_from_probs(
    entry: &str,
    fold: usize,
    probs: &[[f32; 2]],
    labels: &[ClassLabel],
) -> EvalOutcome {
    let scores: Vec<(f64, bool)> = probs
        .iter()
        .zip(labels)
        .map(|(p, l)| (p[1] as f64, *l == ClassLabel::Scc))
        .collect();
    let truth: Vec<usize> = labels.iter().map(|l| l.index()).collect();
    let hard: Vec<usize> = probs.iter().map(|p| usize::from(p[1] >= p[0])).collect();
    let counts =
        ConfusionCounts::from_predictions(&truth, &hard).expect("binary labels from ClassLabel");
    let row = MetricRow {
        entry: entry.to_string(),
        fold,
        auc: auc(&scores),
        balanced_accuracy: balanced_accuracy(&counts),
        gmean: gmean(&counts),
        tpr_adc: tpr(&counts, false),
        tpr_scc: tpr(&counts, true),
    };
    EvalOutcome { scores, row }
}

/// One arm of a comparison grid.
#[derive(Debug, Clone)]
pub struct ComparisonEntry {
    pub name: String,
    pub variant: Variant,
    pub train_policy: DataPolicy,
    pub test_policy: DataPolicy,
}

pub struct ExperimentResult {
    pub folds: Vec<FoldSplit>,
    pub entries: Vec<ComparisonEntry>,
    pub rows: Vec<MetricRow>,
    pub pvalues: Vec<PairwiseP>,
    pub config_snapshot: String,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone)]
pub struct PairwiseP {
    pub metric: &'static str,
    pub a: String,
    pub b: String,
    /// One-sided exact Wilcoxon p for "a exceeds b"; `None` when every
    /// paired difference is zero (e.g., an entry against itself).
    pub p_one_sided: Option<f64>,
}

/// Train every entry on identical folds and compare all entry pairs with
/// a one-sided exact Wilcoxon over the paired per-fold scores. Training
/// seeds derive from `(seed, variant, fold)` only — never the policy — so
/// policy endpoints stay bit-comparable across experiments.
pub fn run_comparison(
    cohort: &[CaseRecord],
    entries: &[ComparisonEntry],
    k: usize,
    seed: u64,
    settings: &TrainSettings,
    config_snapshot: String,
) -> Result<ExperimentResult, HarnessError> {
    let started = std::time::Instant::now();
    let folds = make_folds(cohort, k, seed)?;
    let mut rows = Vec::with_capacity(entries.len() * k);
    for entry in entries {
        for fold in &folds {
            let train_seed =
                derive_seed(seed, &[entry.variant.seed_tag(), fold.fold_index as u64]);
            let trained = train_classifier(
                cohort,
                entry.variant,
                fold,
                entry.train_policy,
                settings,
                train_seed,
            )?;
            let outcome = evaluate(
                &trained,
                cohort,
                fold,
                entry.test_policy,
                settings,
                &entry.name,
                train_seed,
            )?;
            rows.push(outcome.row);
        }
    }
    let names: Vec<String> = entries.iter().map(|e| e.name.clone()).collect();
    let pvalues = pairwise_pvalues(&names, &rows);
    Ok(ExperimentResult {
        folds,
        entries: entries.to_vec(),
        rows,
        pvalues,
        config_snapshot,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

/// One-sided exact Wilcoxon over paired fold scores for every ordered
/// entry pair (the earlier-listed entry plays "a" in "a exceeds b").
pub fn pairwise_pvalues(entry_names: &[String], rows: &[MetricRow]) -> Vec<PairwiseP> {
    let series = |name: &str, metric: &str| -> Vec<f64> {
        let mut v: Vec<(usize, f64)> = rows
            .iter()
            .filter(|r| r.entry == name)
            .filter_map(|r| r.get(metric).map(|x| (r.fold, x)))
            .collect();
        v.sort_by_key(|(f, _)| *f);
        v.into_iter().map(|(_, x)| x).collect()
    };
    let mut pvalues = Vec::new();
    for metric in METRIC_NAMES {
        for i in 0..entry_names.len() {
            for j in (i + 1)..entry_names.len() {
                let a = series(&entry_names[i], metric);
                let b = series(&entry_names[j], metric);
                let p = if a.len() == b.len() && !a.is_empty() {
                    wilcoxon_signed_rank_exact(&a, &b, Sided::OneGreater)
                        .ok()
                        .flatten()
                } else {
                    None
                };
                pvalues.push(PairwiseP {
                    metric,
                    a: entry_names[i].clone(),
                    b: entry_names[j].clone(),
                    p_one_sided: p,
                });
            }
        }
    }
    pvalues
}

/// Mean and sample standard deviation of an entry's per-fold scores.
pub fn mean_sd(rows: &[MetricRow], entry: &str, metric: &str) -> Option<(f64, f64)> {
    let vals: Vec<f64> = rows
        .iter()
        .filter(|r| r.entry == entry)
        .filter_map(|r| r.get(metric))
        .collect();
    if vals.is_empty() {
        return None;
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let sd = if vals.len() > 1 {
        (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some((mean, sd))
}
