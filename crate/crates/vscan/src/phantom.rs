//! Deterministic paired CT/PET phantom generator.
//!
//! Each case is a chest-like scene: a soft-tissue body ellipsoid, two
//! low-intensity lung fields, and one nodule whose *metabolic texture*
//! carries the class signal. A per-case heterogeneity parameter `h` in
//! `[0,1]` mixes two uptake patterns inside the nodule — a smooth radial
//! dome (low `h`, ADC-like) versus multi-focal speckle (high `h`,
//! SCC-like) — and the label is `SCC` iff `h >= 0.5`.
//!
//! The same pattern field drives both modalities, which is what makes
//! CT-to-PET translation well-posed here: CT carries it at a small, fixed
//! amplitude buried near the noise floor (and moment-standardized inside
//! the nodule, so first/second-order summary statistics are class-blind),
//! while PET expresses it at full contrast. A voxelwise classifier trained
//! on CT alone therefore hovers near chance, while a dense regression from
//! CT to PET can amplify the texture into an overtly separable signal.
//! `ct_signal_strength` additionally leaks the class into the nodule
//! *shape* (elongation); at zero the shape distributions are identical.
//!
//! Generation is deterministic: every case derives its own stream from
//! `(seed, case index)`, so cohorts are bitwise reproducible regardless of
//! generation order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::volume::{
    CaseRecord, ClassLabel, IntensityDomain, Modality, Source, Volume, VolumeError,
};

/// CT texture amplitude per standardized pattern unit. Deliberately close
/// to the default noise floor so the class is hard to read from CT alone.
const CT_TEXTURE_AMP: f64 = 0.04;
/// PET uptake amplitude per standardized pattern unit.
const PET_PATTERN_AMP: f64 = 0.14;

const AIR_CT: f64 = 0.05;
const BODY_CT: f64 = 0.55;
const LUNG_CT: f64 = 0.15;
const NODULE_CT: f64 = 0.62;

const AIR_PET: f64 = 0.02;
const BODY_PET: f64 = 0.28;
const LUNG_PET: f64 = 0.10;
const NODULE_PET: f64 = 0.55;

/// Heterogeneity threshold separating ADC from SCC.
pub const H_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("need at least 2 cases with both classes present, got n_cases {n} at balance {balance}")]
    ImpossibleBalance { n: usize, balance: f64 },
    #[error("dims {dims:?} must be multiples of 8 (three stride-2 stages)")]
    DimsNotDivisible { dims: (usize, usize, usize) },
    #[error("truth for case {case_id} has dims {truth:?}, volume has {vol:?}")]
    TruthMismatch {
        case_id: String,
        truth: (usize, usize, usize),
        vol: (usize, usize, usize),
    },
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub n_cases: usize,
    pub dims: (usize, usize, usize),
    /// Fraction of SCC cases (the cohort minority class).
    pub class_balance: f64,
    /// How much the class leaks into the nodule *shape*; 0 removes all
    /// macroscopic class dependence from CT geometry.
    pub ct_signal_strength: f64,
    /// Scales the class-driven PET texture contrast.
    pub pet_signal_strength: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            n_cases: 100,
            dims: (64, 64, 64),
            class_balance: 0.25,
            ct_signal_strength: 0.0,
            pet_signal_strength: 1.0,
            noise_sigma: 0.02,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct Focus {
    pub pos: (f64, f64, f64),
    pub sigma: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Nodule {
    pub center: (f64, f64, f64),
    pub radii: (f64, f64, f64),
    /// Narrow high-contrast foci; the `h`-weighted speckle component.
    pub foci: Vec<Focus>,
    /// Broad low-frequency bumps added to the smooth base for every case.
    /// They break the radial symmetry of the dome so its level sets are
    /// generic (no tied shells), which keeps histogram matching smooth.
    pub base_foci: Vec<Focus>,
}

/// Per-case ground truth kept outside the image volumes.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PhantomTruth {
    pub case_id: String,
    pub dims: (usize, usize, usize),
    pub h: f64,
    pub label: ClassLabel,
    pub pet_signal_strength: f64,
    pub nodule: Option<Nodule>,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; both uniforms drawn even though one output is used,
    // keeping the stream layout simple.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

struct Scene {
    body_c: (f64, f64, f64),
    body_r: (f64, f64, f64),
    lung_c: [(f64, f64, f64); 2],
    lung_r: (f64, f64, f64),
}

impl Scene {
    /// Background geometry is a fixed function of the volume dims; all
    /// per-case randomness lives in the nodule and the noise.
    fn for_dims(dims: (usize, usize, usize)) -> Self {
        let (d, h, w) = (dims.0 as f64, dims.1 as f64, dims.2 as f64);
        Scene {
            body_c: (d / 2.0, h / 2.0, w / 2.0),
            body_r: (0.47 * d, 0.45 * h, 0.47 * w),
            lung_c: [
                (d / 2.0, h / 2.0, 0.27 * w),
                (d / 2.0, h / 2.0, 0.73 * w),
            ],
            lung_r: (0.36 * d, 0.38 * h, 0.21 * w),
        }
    }

    fn inside(c: (f64, f64, f64), r: (f64, f64, f64), p: (f64, f64, f64)) -> bool {
        let dz = (p.0 - c.0) / r.0;
        let dy = (p.1 - c.1) / r.1;
        let dx = (p.2 - c.2) / r.2;
        dz * dz + dy * dy + dx * dx <= 1.0
    }

    fn in_body(&self, p: (f64, f64, f64)) -> bool {
        Self::inside(self.body_c, self.body_r, p)
    }

    fn in_lung(&self, p: (f64, f64, f64)) -> bool {
        Self::inside(self.lung_c[0], self.lung_r, p)
            || Self::inside(self.lung_c[1], self.lung_r, p)
    }
}

/// Normalized squared ellipsoid distance of `p` from the nodule (<= 1 is
/// inside).
fn nodule_rho2(n: &Nodule, p: (f64, f64, f64)) -> f64 {
    let dz = (p.0 - n.center.0) / n.radii.0;
    let dy = (p.1 - n.center.1) / n.radii.1;
    let dx = (p.2 - n.center.2) / n.radii.2;
    dz * dz + dy * dy + dx * dx
}

/// Standardized texture field inside the nodule. An `h`-weighted mixture
/// of a smooth radial dome and multi-focal speckle fixes the *spatial
/// arrangement*; its values are then histogram-matched onto the dome's
/// own marginal distribution, so for any `h` the per-voxel intensity
/// histogram inside the nodule is exactly the dome's. The class signal
/// therefore lives purely in spatial structure — no per-voxel summary
/// statistic (moments, quantiles) can see it. Finally the field is
/// standardized to mean 0 / variance 1 over the nodule voxels.
/// Both texture encodings of a nodule's pattern, one entry per in-nodule
/// voxel index.
struct NoduleFields {
    voxels: Vec<NoduleVoxel>,
}

struct NoduleVoxel {
    index: usize,
    /// CT texture: the mixture histogram-matched onto the base field's
    /// own marginal, then standardized. For any `h` the CT intensity
    /// histogram inside the nodule is exactly the (class-independent)
    /// base histogram — only the spatial arrangement carries the class.
    ct: f64,
    /// PET texture: the mixture standardized and hard-clamped, keeping
    /// the focal contrast spatially faithful.
    pet: f64,
}

/// Symmetric ceiling of the standardized PET texture field.
const PATTERN_CLAMP: f64 = 1.5;

fn nodule_fields(n: &Nodule, h: f64, dims: (usize, usize, usize)) -> NoduleFields {
    let (dd, hh, ww) = dims;
    let mut indices = Vec::new();
    let mut bases = Vec::new();
    let mut speckles = Vec::new();
    let mut max_speckle = 0.0f64;
    let bump = |p: (f64, f64, f64), f: &Focus| -> f64 {
        let dz = p.0 - f.pos.0;
        let dy = p.1 - f.pos.1;
        let dx = p.2 - f.pos.2;
        f.weight * (-(dz * dz + dy * dy + dx * dx) / (2.0 * f.sigma * f.sigma)).exp()
    };
    for z in 0..dd {
        for y in 0..hh {
            for x in 0..ww {
                let p = (z as f64 + 0.5, y as f64 + 0.5, x as f64 + 0.5);
                let rho2 = nodule_rho2(n, p);
                if rho2 > 1.0 {
                    continue;
                }
                let mut base = 1.0 - rho2;
                for f in &n.base_foci {
                    base += 0.35 * bump(p, f);
                }
                let mut speck = 0.0;
                for f in &n.foci {
                    speck += bump(p, f);
                }
                max_speckle = max_speckle.max(speck);
                indices.push((z * hh + y) * ww + x);
                bases.push(base);
                speckles.push(speck);
            }
        }
    }
    if indices.is_empty() {
        return NoduleFields { voxels: Vec::new() };
    }
    let speckle_norm = if max_speckle > 1e-12 { max_speckle } else { 1.0 };
    let mix: Vec<f64> = bases
        .iter()
        .zip(&speckles)
        .map(|(b, s)| (1.0 - h) * b + h * (s / speckle_norm))
        .collect();

    // PET: standardized mixture with a hard tail clamp
    let mut pet = mix.clone();
    standardize(&mut pet);
    for v in pet.iter_mut() {
        *v = v.clamp(-PATTERN_CLAMP, PATTERN_CLAMP);
    }

    // CT: histogram-match the mixture onto the base marginal. The base
    // field contains broad per-case bumps, so its level sets are generic
    // and the rank map stays spatially smooth.
    let mut order: Vec<usize> = (0..mix.len()).collect();
    order.sort_by(|&i, &j| mix[i].partial_cmp(&mix[j]).expect("finite pattern"));
    let mut base_sorted = bases.clone();
    base_sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite pattern"));
    let mut ct = vec![0.0f64; mix.len()];
    for (k, &i) in order.iter().enumerate() {
        ct[i] = base_sorted[k];
    }
    standardize(&mut ct);

    NoduleFields {
        voxels: indices
            .into_iter()
            .zip(ct.into_iter().zip(pet))
            .map(|(index, (ct, pet))| NoduleVoxel { index, ct, pet })
            .collect(),
    }
}

fn standardize(field: &mut [f64]) {
    let n = field.len() as f64;
    let mean: f64 = field.iter().sum::<f64>() / n;
    let var: f64 = field.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_sd = if var > 1e-12 { 1.0 / var.sqrt() } else { 0.0 };
    for v in field.iter_mut() {
        *v = (*v - mean) * inv_sd;
    }
}

fn base_ct(scene: &Scene, nodule: Option<&Nodule>, p: (f64, f64, f64)) -> f64 {
    if let Some(n) = nodule {
        if nodule_rho2(n, p) <= 1.0 {
            return NODULE_CT;
        }
    }
    if scene.in_lung(p) {
        LUNG_CT
    } else if scene.in_body(p) {
        BODY_CT
    } else {
        AIR_CT
    }
}

fn base_pet(scene: &Scene, nodule: Option<&Nodule>, p: (f64, f64, f64)) -> f64 {
    if let Some(n) = nodule {
        if nodule_rho2(n, p) <= 1.0 {
            return NODULE_PET;
        }
    }
    if scene.in_lung(p) {
        LUNG_PET
    } else if scene.in_body(p) {
        BODY_PET
    } else {
        AIR_PET
    }
}

/// The exact pre-noise PET volume implied by a case's ground truth. This
/// is both the regression target construction and the oracle that
/// synthesis quality is judged against.
pub fn analytic_pet_from_ct(ct: &Volume, truth: &PhantomTruth) -> Result<Volume, PhantomError> {
    if ct.dims() != truth.dims {
        return Err(PhantomError::TruthMismatch {
            case_id: truth.case_id.clone(),
            truth: truth.dims,
            vol: ct.dims(),
        });
    }
    let scene = Scene::for_dims(truth.dims);
    let (d, h, w) = truth.dims;
    let mut pet = vec![0.0f32; d * h * w];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = (z as f64 + 0.5, y as f64 + 0.5, x as f64 + 0.5);
                pet[(z * h + y) * w + x] =
                    base_pet(&scene, truth.nodule.as_ref(), p).clamp(0.0, 1.0) as f32;
            }
        }
    }
    if let Some(n) = &truth.nodule {
        for v in nodule_fields(n, truth.h, truth.dims).voxels {
            let uptake = NODULE_PET + truth.pet_signal_strength * PET_PATTERN_AMP * v.pet;
            pet[v.index] = uptake.clamp(0.0, 1.0) as f32;
        }
    }
    Ok(Volume::new(
        truth.dims,
        ct.spacing(),
        pet,
        Modality::Pet,
        IntensityDomain::Normalized01,
    )?)
}

fn generate_case(
    cfg: &PhantomConfig,
    index: usize,
    label: ClassLabel,
) -> Result<(CaseRecord, PhantomTruth), PhantomError> {
    let case_seed = splitmix64(cfg.seed ^ splitmix64(index as u64 + 1));
    let mut rng = ChaCha8Rng::seed_from_u64(case_seed);
    let case_id = format!("case{index:04}");
    let scene = Scene::for_dims(cfg.dims);
    let min_dim = cfg.dims.0.min(cfg.dims.1).min(cfg.dims.2) as f64;

    let h = match label {
        ClassLabel::Scc => rng.gen_range(0.72..1.0),
        ClassLabel::Adc => rng.gen_range(0.0..0.28),
    };

    // nodule placed inside one lung with margin
    let side = rng.gen_range(0..2usize);
    let lung_c = scene.lung_c[side];
    let off = (
        rng.gen_range(-0.15..0.15) * scene.lung_r.0,
        rng.gen_range(-0.15..0.15) * scene.lung_r.1,
        rng.gen_range(-0.12..0.12) * scene.lung_r.2,
    );
    // a large flattened nodule: wide in (z, y), thin along x so it fits
    // the lung field while leaving room for distinct uptake foci
    let r = rng.gen_range(0.20..0.26) * min_dim;
    // class-dependent elongation, scaled by ct_signal_strength
    let stretch = 1.0 + 0.3 * cfg.ct_signal_strength;
    let rz = match label {
        ClassLabel::Scc => r * stretch,
        ClassLabel::Adc => r / stretch,
    };
    let nodule_center = (lung_c.0 + off.0, lung_c.1 + off.1, lung_c.2 + off.2);
    let nodule_radii = (rz, r, 0.5 * r);

    let place_focus = |rng: &mut ChaCha8Rng, sigma: std::ops::Range<f64>| -> Focus {
        // uniform-ish position inside the nodule ellipsoid
        let dir = (gaussian(rng), gaussian(rng), gaussian(rng));
        let norm = (dir.0 * dir.0 + dir.1 * dir.1 + dir.2 * dir.2)
            .sqrt()
            .max(1e-9);
        let rad: f64 = rng.gen_range(0.0..1.0f64).cbrt() * 0.85;
        Focus {
            pos: (
                nodule_center.0 + dir.0 / norm * rad * nodule_radii.0,
                nodule_center.1 + dir.1 / norm * rad * nodule_radii.1,
                nodule_center.2 + dir.2 / norm * rad * nodule_radii.2,
            ),
            sigma: rng.gen_range(sigma),
            weight: rng.gen_range(0.7..1.0),
        }
    };
    // speckle foci stay voxel-scale regardless of nodule size; base bumps
    // scale with the nodule
    let n_foci = rng.gen_range(6..=10);
    let mut foci = Vec::with_capacity(n_foci);
    for _ in 0..n_foci {
        foci.push(place_focus(&mut rng, 1.0..1.5));
    }
    let mut base_foci = Vec::with_capacity(2);
    for _ in 0..2 {
        base_foci.push(place_focus(&mut rng, 0.55 * r..0.85 * r));
    }
    let nodule = Nodule {
        center: nodule_center,
        radii: nodule_radii,
        foci,
        base_foci,
    };
    let truth = PhantomTruth {
        case_id: case_id.clone(),
        dims: cfg.dims,
        h,
        label,
        pet_signal_strength: cfg.pet_signal_strength,
        nodule: Some(nodule),
    };

    let (d, hh, w) = cfg.dims;
    let n_vox = d * hh * w;
    let mut ct = vec![0.0f32; n_vox];
    let mut mask = vec![0.0f32; n_vox];
    for z in 0..d {
        for y in 0..hh {
            for x in 0..w {
                let p = (z as f64 + 0.5, y as f64 + 0.5, x as f64 + 0.5);
                let idx = (z * hh + y) * w + x;
                ct[idx] = base_ct(&scene, truth.nodule.as_ref(), p) as f32;
                if scene.in_lung(p) {
                    mask[idx] = 1.0;
                }
            }
        }
    }
    // class texture, shared with PET through the same pattern field
    for v in nodule_fields(truth.nodule.as_ref().unwrap(), h, cfg.dims).voxels {
        ct[v.index] = (ct[v.index] as f64 + CT_TEXTURE_AMP * v.ct) as f32;
    }
    let pet_clean = analytic_pet_from_ct(
        &Volume::new(
            cfg.dims,
            (1.0, 1.0, 1.0),
            ct.clone().into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            Modality::Ct,
            IntensityDomain::Normalized01,
        )?,
        &truth,
    )?;

    // additive Gaussian noise, clamped back into [0,1]
    let mut ct_noisy = ct;
    for v in ct_noisy.iter_mut() {
        *v = (*v as f64 + cfg.noise_sigma * gaussian(&mut rng)).clamp(0.0, 1.0) as f32;
    }
    let mut pet_noisy = pet_clean.voxels().to_vec();
    for v in pet_noisy.iter_mut() {
        *v = (*v as f64 + cfg.noise_sigma * gaussian(&mut rng)).clamp(0.0, 1.0) as f32;
    }

    let ct_vol = Volume::new(
        cfg.dims,
        (1.0, 1.0, 1.0),
        ct_noisy,
        Modality::Ct,
        IntensityDomain::Normalized01,
    )?;
    let pet_vol = Volume::new(
        cfg.dims,
        (1.0, 1.0, 1.0),
        pet_noisy,
        Modality::Pet,
        IntensityDomain::Normalized01,
    )?;
    let mask_vol = Volume::new(
        cfg.dims,
        (1.0, 1.0, 1.0),
        mask,
        Modality::Mask,
        IntensityDomain::Raw,
    )?;
    let record = CaseRecord::new(
        case_id,
        ct_vol,
        Some(pet_vol),
        None,
        mask_vol,
        label,
        Source::Phantom,
    )?;
    Ok((record, truth))
}

/// Generate a stratified cohort with its ground-truth sidecar.
pub fn generate_cohort(
    cfg: &PhantomConfig,
) -> Result<(Vec<CaseRecord>, Vec<PhantomTruth>), PhantomError> {
    let dims_ok =
        cfg.dims.0 % 8 == 0 && cfg.dims.1 % 8 == 0 && cfg.dims.2 % 8 == 0 && cfg.dims.0 >= 8;
    if !dims_ok {
        return Err(PhantomError::DimsNotDivisible { dims: cfg.dims });
    }
    let n_scc = (cfg.n_cases as f64 * cfg.class_balance).round() as usize;
    if cfg.n_cases < 2 || n_scc == 0 || n_scc >= cfg.n_cases {
        return Err(PhantomError::ImpossibleBalance {
            n: cfg.n_cases,
            balance: cfg.class_balance,
        });
    }
    // deterministic label placement: seeded shuffle of case indices
    let mut label_rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ 0x5ca1ab1e));
    let mut idxs: Vec<usize> = (0..cfg.n_cases).collect();
    for i in (1..idxs.len()).rev() {
        let j = label_rng.gen_range(0..=i);
        idxs.swap(i, j);
    }
    let mut labels = vec![ClassLabel::Adc; cfg.n_cases];
    for &i in idxs.iter().take(n_scc) {
        labels[i] = ClassLabel::Scc;
    }

    let results: Vec<Result<(CaseRecord, PhantomTruth), PhantomError>> = (0..cfg.n_cases)
        .into_par_iter()
        .map(|i| generate_case(cfg, i, labels[i]))
        .collect();
    let mut cases = Vec::with_capacity(cfg.n_cases);
    let mut truths = Vec::with_capacity(cfg.n_cases);
    for r in results {
        let (c, t) = r?;
        cases.push(c);
        truths.push(t);
    }
    Ok((cases, truths))
}

/// Hand-designed PET heterogeneity statistic: spatial dispersion of the
/// hottest uptake. Over the hot region (uptake above the nodule floor,
/// inside the mask), take the top decile of voxels by uptake and return
/// the RMS distance from their centroid, normalized by the region's
/// effective radius. Multi-focal uptake scatters the hot set (high
/// dispersion); a single smooth dome concentrates it (low dispersion).
/// Scale-free and robust to voxel noise.
pub fn pet_heterogeneity(pet: &Volume, mask: &Volume) -> f64 {
    const REGION_T: f32 = 0.25;
    let (d, h, w) = pet.dims();
    let pv = pet.voxels();
    let mv = mask.voxels();
    let mut region: Vec<(usize, usize, usize, f32)> = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = (z * h + y) * w + x;
                if mv[i] > 0.0 && pv[i] >= REGION_T {
                    region.push((z, y, x, pv[i]));
                }
            }
        }
    }
    if region.len() < 16 {
        return 0.0;
    }
    let r_eff = (3.0 * region.len() as f64 / (4.0 * std::f64::consts::PI)).cbrt();
    let mut by_val = region;
    by_val.sort_by(|a, b| b.3.partial_cmp(&a.3).expect("finite uptake"));
    let top = &by_val[..(by_val.len() / 10).max(8)];
    let n = top.len() as f64;
    let (mut cz, mut cy, mut cx) = (0.0, 0.0, 0.0);
    for &(z, y, x, _) in top {
        cz += z as f64;
        cy += y as f64;
        cx += x as f64;
    }
    cz /= n;
    cy /= n;
    cx /= n;
    let mut rms = 0.0;
    for &(z, y, x, _) in top {
        rms += (z as f64 - cz).powi(2) + (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
    }
    (rms / n).sqrt() / r_eff
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::auc;

    fn quick_cfg(n: usize, seed: u64) -> PhantomConfig {
        PhantomConfig {
            n_cases: n,
            dims: (32, 32, 32),
            seed,
            ..PhantomConfig::default()
        }
    }

    #[test]
    fn generation_is_bitwise_deterministic() {
        let cfg = quick_cfg(6, 7);
        let (a, _) = generate_cohort(&cfg).unwrap();
        let (b, _) = generate_cohort(&cfg).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.case_id, y.case_id);
            assert_eq!(x.label, y.label);
            assert_eq!(x.ct.voxels(), y.ct.voxels());
            assert_eq!(
                x.pet.as_ref().unwrap().voxels(),
                y.pet.as_ref().unwrap().voxels()
            );
            assert_eq!(x.mask.voxels(), y.mask.voxels());
        }
    }

    #[test]
    fn stratification_matches_balance_within_rounding() {
        for n in [8, 20, 101] {
            let cfg = quick_cfg(n, 3);
            let (cases, truths) = generate_cohort(&cfg).unwrap();
            let scc = cases.iter().filter(|c| c.label == ClassLabel::Scc).count();
            assert_eq!(scc, (n as f64 * 0.25).round() as usize);
            for t in &truths {
                assert_eq!(t.label == ClassLabel::Scc, t.h >= H_THRESHOLD);
            }
        }
    }

    #[test]
    fn impossible_balance_is_an_error() {
        let mut cfg = quick_cfg(1, 1);
        cfg.class_balance = 0.5;
        assert!(matches!(
            generate_cohort(&cfg),
            Err(PhantomError::ImpossibleBalance { .. })
        ));
        let mut cfg = quick_cfg(10, 1);
        cfg.class_balance = 0.01; // rounds to zero SCC
        assert!(generate_cohort(&cfg).is_err());
        let mut cfg = quick_cfg(10, 1);
        cfg.dims = (30, 32, 32);
        assert!(matches!(
            generate_cohort(&cfg),
            Err(PhantomError::DimsNotDivisible { .. })
        ));
    }

    #[test]
    fn noiseless_pet_equals_analytic_reconstruction() {
        let mut cfg = quick_cfg(4, 11);
        cfg.noise_sigma = 0.0;
        let (cases, truths) = generate_cohort(&cfg).unwrap();
        for (c, t) in cases.iter().zip(&truths) {
            let analytic = analytic_pet_from_ct(&c.ct, t).unwrap();
            assert_eq!(c.pet.as_ref().unwrap().voxels(), analytic.voxels());
        }
    }

    #[test]
    fn nodule_free_truth_gives_background_only_pet() {
        let cfg = quick_cfg(2, 13);
        let (cases, truths) = generate_cohort(&cfg).unwrap();
        let mut bare = truths[0].clone();
        bare.nodule = None;
        let pet = analytic_pet_from_ct(&cases[0].ct, &bare).unwrap();
        let levels = [AIR_PET as f32, BODY_PET as f32, LUNG_PET as f32];
        assert!(pet
            .voxels()
            .iter()
            .all(|v| levels.iter().any(|l| (v - l).abs() < 1e-6)));
    }

    #[test]
    fn perturbing_h_changes_only_the_nodule_region() {
        let cfg = quick_cfg(2, 17);
        let (cases, truths) = generate_cohort(&cfg).unwrap();
        let t = &truths[0];
        let mut t2 = t.clone();
        t2.h = (t.h + 0.21).min(1.0);
        let a = analytic_pet_from_ct(&cases[0].ct, t).unwrap();
        let b = analytic_pet_from_ct(&cases[0].ct, &t2).unwrap();
        let nod = t.nodule.as_ref().unwrap();
        let (_, hh, ww) = cfg.dims;
        let mut changed_outside = 0;
        for z in 0..cfg.dims.0 {
            for y in 0..hh {
                for x in 0..ww {
                    let idx = (z * hh + y) * ww + x;
                    if a.voxels()[idx] != b.voxels()[idx] {
                        let p = (z as f64 + 0.5, y as f64 + 0.5, x as f64 + 0.5);
                        if nodule_rho2(nod, p) > 1.0 {
                            changed_outside += 1;
                        }
                    }
                }
            }
        }
        assert_eq!(changed_outside, 0);
        assert_ne!(a.voxels(), b.voxels());
    }

    #[test]
    fn truth_dims_mismatch_is_an_error() {
        let cfg = quick_cfg(2, 19);
        let (cases, truths) = generate_cohort(&cfg).unwrap();
        let mut t = truths[0].clone();
        t.dims = (64, 64, 64);
        assert!(matches!(
            analytic_pet_from_ct(&cases[0].ct, &t),
            Err(PhantomError::TruthMismatch { .. })
        ));
    }

    /// Summary statistics of the masked CT: global mean/std plus mask-region
    /// mean/std/quantiles. The features a macro-level probe would use.
    fn ct_summary_features(c: &CaseRecord) -> Vec<f64> {
        let ct = c.ct.voxels();
        let mask = c.mask.voxels();
        let n = ct.len() as f64;
        let gmean = ct.iter().map(|&v| v as f64).sum::<f64>() / n;
        let gvar = ct.iter().map(|&v| (v as f64 - gmean).powi(2)).sum::<f64>() / n;
        let mut inside: Vec<f64> = ct
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m > 0.0)
            .map(|(&v, _)| v as f64)
            .collect();
        inside.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let ni = inside.len() as f64;
        let imean = inside.iter().sum::<f64>() / ni;
        let ivar = inside.iter().map(|v| (v - imean).powi(2)).sum::<f64>() / ni;
        let q = |f: f64| inside[((ni * f) as usize).min(inside.len() - 1)];
        vec![
            gmean,
            gvar.sqrt(),
            imean,
            ivar.sqrt(),
            q(0.10),
            q(0.50),
            q(0.90),
            q(0.99),
        ]
    }

    /// Cross-validated logistic probe: fit on one half, score the other,
    /// both directions. Out-of-sample scoring keeps optimism out of the
    /// decodability estimate.
    fn logistic_probe_auc(feats: &[Vec<f64>], labels: &[bool]) -> f64 {
        let n = feats.len();
        let half = n / 2;
        let idx: Vec<usize> = (0..n).collect();
        let (a, b) = idx.split_at(half);
        let mut scores: Vec<(f64, bool)> = Vec::new();
        for (train, test) in [(a, b), (b, a)] {
            let tf: Vec<Vec<f64>> = train.iter().map(|&i| feats[i].clone()).collect();
            let tl: Vec<bool> = train.iter().map(|&i| labels[i]).collect();
            let model = fit_logistic(&tf, &tl);
            for &i in test {
                scores.push((model.score(&feats[i]), labels[i]));
            }
        }
        auc(&scores).unwrap()
    }

    struct Logistic {
        mu: Vec<f64>,
        sd: Vec<f64>,
        w: Vec<f64>,
        b: f64,
    }

    impl Logistic {
        fn score(&self, f: &[f64]) -> f64 {
            self.b
                + f.iter()
                    .enumerate()
                    .map(|(j, v)| (v - self.mu[j]) / self.sd[j] * self.w[j])
                    .sum::<f64>()
        }
    }

    fn fit_logistic(feats: &[Vec<f64>], labels: &[bool]) -> Logistic {
        let k = feats[0].len();
        let n = feats.len();
        // standardize features
        let mut mu = vec![0.0; k];
        let mut sd = vec![0.0; k];
        for f in feats {
            for (j, v) in f.iter().enumerate() {
                mu[j] += v;
            }
        }
        for m in mu.iter_mut() {
            *m /= n as f64;
        }
        for f in feats {
            for (j, v) in f.iter().enumerate() {
                sd[j] += (v - mu[j]).powi(2);
            }
        }
        for s in sd.iter_mut() {
            *s = (*s / n as f64).sqrt().max(1e-9);
        }
        let xs: Vec<Vec<f64>> = feats
            .iter()
            .map(|f| f.iter().enumerate().map(|(j, v)| (v - mu[j]) / sd[j]).collect())
            .collect();
        let mut w = vec![0.0f64; k];
        let mut b = 0.0f64;
        for _ in 0..400 {
            let mut gw = vec![0.0f64; k];
            let mut gb = 0.0f64;
            for (x, &y) in xs.iter().zip(labels) {
                let z: f64 = b + x.iter().zip(&w).map(|(xi, wi)| xi * wi).sum::<f64>();
                let p = 1.0 / (1.0 + (-z).exp());
                let e = p - if y { 1.0 } else { 0.0 };
                for (g, xi) in gw.iter_mut().zip(x) {
                    *g += e * xi;
                }
                gb += e;
            }
            for (wi, g) in w.iter_mut().zip(&gw) {
                *wi -= 0.1 * g / n as f64;
            }
            b -= 0.1 * gb / n as f64;
        }
        Logistic { mu, sd, w, b }
    }

    #[test]
    fn ct_summary_probe_is_near_chance_at_zero_shape_strength() {
        let cfg = PhantomConfig {
            n_cases: 200,
            dims: (32, 32, 32),
            ct_signal_strength: 0.0,
            seed: 23,
            ..PhantomConfig::default()
        };
        let (cases, _) = generate_cohort(&cfg).unwrap();
        let feats: Vec<Vec<f64>> = cases.iter().map(ct_summary_features).collect();
        let labels: Vec<bool> = cases.iter().map(|c| c.label == ClassLabel::Scc).collect();
        let a = logistic_probe_auc(&feats, &labels);
        assert!((0.4..=0.6).contains(&a), "probe AUC {a}");
    }

    #[test]
    fn pet_heterogeneity_statistic_separates_classes_cleanly() {
        let cfg = PhantomConfig {
            n_cases: 200,
            dims: (32, 32, 32),
            pet_signal_strength: 1.0,
            noise_sigma: 0.0,
            seed: 29,
            ..PhantomConfig::default()
        };
        let (cases, _) = generate_cohort(&cfg).unwrap();
        let scores: Vec<(f64, bool)> = cases
            .iter()
            .map(|c| {
                (
                    pet_heterogeneity(c.pet.as_ref().unwrap(), &c.mask),
                    c.label == ClassLabel::Scc,
                )
            })
            .collect();
        let a = auc(&scores).unwrap();
        assert!(a > 0.95, "heterogeneity AUC {a}");
    }

    #[test]
    fn class_conditional_pet_distributions_differ_at_defaults() {
        // Mann-Whitney normal approximation on the designed statistic.
        let cfg = PhantomConfig {
            n_cases: 200,
            dims: (32, 32, 32),
            seed: 31,
            ..PhantomConfig::default()
        };
        let (cases, _) = generate_cohort(&cfg).unwrap();
        let scores: Vec<(f64, bool)> = cases
            .iter()
            .map(|c| {
                (
                    pet_heterogeneity(c.pet.as_ref().unwrap(), &c.mask),
                    c.label == ClassLabel::Scc,
                )
            })
            .collect();
        let a = auc(&scores).unwrap();
        let n1 = scores.iter().filter(|(_, l)| *l).count() as f64;
        let n2 = scores.len() as f64 - n1;
        let u = a * n1 * n2;
        let mu = n1 * n2 / 2.0;
        let sigma = (n1 * n2 * (n1 + n2 + 1.0) / 12.0).sqrt();
        let z = (u - mu).abs() / sigma;
        // z > 2.33 corresponds to p < 0.01 (one-sided normal)
        assert!(z > 2.33, "z = {z}, AUC = {a}");
    }

    #[test]
    fn volumes_are_normalized_and_masks_binary() {
        let cfg = quick_cfg(4, 37);
        let (cases, _) = generate_cohort(&cfg).unwrap();
        for c in &cases {
            assert!(c.ct.voxels().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(c
                .pet
                .as_ref()
                .unwrap()
                .voxels()
                .iter()
                .all(|v| (0.0..=1.0).contains(v)));
            assert!(c.mask.voxels().iter().all(|&v| v == 0.0 || v == 1.0));
            assert_eq!(c.dims(), cfg.dims);
            // the nodule must sit inside the lung mask
            let masked = c.ct.apply_mask(&c.mask).unwrap();
            let bright = masked.voxels().iter().filter(|&&v| v > 0.5).count();
            assert!(bright > 0, "nodule missing from mask region");
        }
    }
}
