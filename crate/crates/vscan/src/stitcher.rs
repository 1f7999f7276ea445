//! Sliding-window tiling and overlap-averaged reassembly.
//!
//! A [`WindowPlan`] enumerates the origins of cubic windows covering a
//! volume with a prescribed overlap; the final origin on each axis is
//! clamped to `dim - window` so every voxel is covered without padding.
//! Per-window outputs are deposited into an [`Accumulator`] that keeps a
//! wide-precision running sum and an integer visit count per voxel; the
//! reassembled volume is `sum / count`, so regions covered once pass
//! through unchanged and overlaps become uniform averages.

use rayon::prelude::*;
use thiserror::Error;

use crate::volume::{IntensityDomain, Modality, Volume};

#[derive(Debug, Error)]
pub enum StitchError {
    #[error("window {window} exceeds volume dims {dims:?}; pad the volume to at least the window size")]
    WindowTooLarge {
        window: usize,
        dims: (usize, usize, usize),
    },
    #[error("overlap {overlap} must be smaller than window {window}")]
    BadOverlap { window: usize, overlap: usize },
    #[error("window index {index} out of range ({count} windows)")]
    BadIndex { index: usize, count: usize },
    #[error("accumulator dims {acc:?} do not match plan dims {plan:?}")]
    DimsMismatch {
        acc: (usize, usize, usize),
        plan: (usize, usize, usize),
    },
    #[error("patch function broke the shape contract at window {index}: expected {expected} voxels, got {got}")]
    PatchContract {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("patch function failed at window {index}: {msg}")]
    PatchFn { index: usize, msg: String },
    #[error(transparent)]
    Volume(#[from] crate::volume::VolumeError),
}

/// Ordered set of window origins covering a volume.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowPlan {
    pub volume_dims: (usize, usize, usize),
    pub window: usize,
    pub overlap: usize,
    pub origins: Vec<(usize, usize, usize)>,
}

impl WindowPlan {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }
}

fn axis_origins(dim: usize, window: usize, stride: usize) -> Vec<usize> {
    let mut origins = Vec::new();
    let mut o = 0;
    while o + window <= dim {
        origins.push(o);
        o += stride;
    }
    let clamped = dim - window;
    if *origins.last().expect("window fits at least once") != clamped {
        origins.push(clamped);
    }
    origins
}

/// Enumerate window origins: regular stride `window - overlap` per axis,
/// with a final clamped origin at `dim - window` when the regular grid
/// stops short. Origins are unique and lexicographically sorted.
pub fn plan_windows(
    dims: (usize, usize, usize),
    window: usize,
    overlap: usize,
) -> Result<WindowPlan, StitchError> {
    if overlap >= window || window == 0 {
        return Err(StitchError::BadOverlap { window, overlap });
    }
    if window > dims.0 || window > dims.1 || window > dims.2 {
        return Err(StitchError::WindowTooLarge { window, dims });
    }
    let stride = window - overlap;
    let zs = axis_origins(dims.0, window, stride);
    let ys = axis_origins(dims.1, window, stride);
    let xs = axis_origins(dims.2, window, stride);
    let mut origins = Vec::with_capacity(zs.len() * ys.len() * xs.len());
    for &z in &zs {
        for &y in &ys {
            for &x in &xs {
                origins.push((z, y, x));
            }
        }
    }
    Ok(WindowPlan {
        volume_dims: dims,
        window,
        overlap,
        origins,
    })
}

/// Copy window `i` of the volume into a dense `window^3` patch buffer
/// (the `[1,1,w,w,w]` layout the patch networks consume).
pub fn extract(v: &Volume, plan: &WindowPlan, i: usize) -> Result<Vec<f32>, StitchError> {
    if v.dims() != plan.volume_dims {
        return Err(StitchError::DimsMismatch {
            acc: v.dims(),
            plan: plan.volume_dims,
        });
    }
    let (z0, y0, x0) = *plan
        .origins
        .get(i)
        .ok_or(StitchError::BadIndex {
            index: i,
            count: plan.origins.len(),
        })?;
    let w = plan.window;
    let (_, h, wd) = v.dims();
    let src = v.voxels();
    let mut patch = Vec::with_capacity(w * w * w);
    for dz in 0..w {
        for dy in 0..w {
            let row = ((z0 + dz) * h + (y0 + dy)) * wd + x0;
            patch.extend_from_slice(&src[row..row + w]);
        }
    }
    Ok(patch)
}

/// Wide-precision overlap accumulator.
pub struct Accumulator {
    dims: (usize, usize, usize),
    spacing: (f32, f32, f32),
    sum: Vec<f64>,
    count: Vec<u32>,
}

impl Accumulator {
    /// Accumulator with the geometry of `template`.
    pub fn for_volume(template: &Volume) -> Self {
        let n = template.len();
        Accumulator {
            dims: template.dims(),
            spacing: template.spacing(),
            sum: vec![0.0; n],
            count: vec![0; n],
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }
}

/// Coverage summary produced by [`finalize`]. Voxels never touched by a
/// deposit are listed (up to a small cap) and zero-filled in the output.
#[derive(Debug, Clone)]
pub struct CoverageReport {
    pub total_voxels: usize,
    pub uncovered: usize,
    pub first_uncovered: Vec<(usize, usize, usize)>,
    pub max_count: u32,
}

impl CoverageReport {
    pub fn is_complete(&self) -> bool {
        self.uncovered == 0
    }
}

impl std::fmt::Display for CoverageReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.is_complete() {
            write!(
                f,
                "coverage complete: {} voxels, max overlap {}",
                self.total_voxels, self.max_count
            )
        } else {
            write!(
                f,
                "coverage INCOMPLETE: {}/{} voxels uncovered, first at {:?}",
                self.uncovered, self.total_voxels, self.first_uncovered
            )
        }
    }
}

/// Add one processed patch into the accumulator.
pub fn deposit(
    acc: &mut Accumulator,
    plan: &WindowPlan,
    i: usize,
    patch: &[f32],
) -> Result<(), StitchError> {
    if acc.dims != plan.volume_dims {
        return Err(StitchError::DimsMismatch {
            acc: acc.dims,
            plan: plan.volume_dims,
        });
    }
    let w = plan.window;
    if patch.len() != w * w * w {
        return Err(StitchError::PatchContract {
            index: i,
            expected: w * w * w,
            got: patch.len(),
        });
    }
    let (z0, y0, x0) = *plan
        .origins
        .get(i)
        .ok_or(StitchError::BadIndex {
            index: i,
            count: plan.origins.len(),
        })?;
    let (_, h, wd) = acc.dims;
    for dz in 0..w {
        for dy in 0..w {
            let dst = ((z0 + dz) * h + (y0 + dy)) * wd + x0;
            let src = (dz * w + dy) * w;
            for dx in 0..w {
                acc.sum[dst + dx] += patch[src + dx] as f64;
                acc.count[dst + dx] += 1;
            }
        }
    }
    Ok(())
}

/// Divide sums by visit counts. Finalizing before every window has been
/// deposited is permitted; untouched voxels come out as zero and are
/// flagged in the report.
pub fn finalize(
    acc: Accumulator,
    modality: Modality,
    domain: IntensityDomain,
) -> Result<(Volume, CoverageReport), StitchError> {
    let mut out = vec![0.0f32; acc.sum.len()];
    let mut uncovered = 0usize;
    let mut first_uncovered = Vec::new();
    let mut max_count = 0u32;
    let (_, h, wd) = acc.dims;
    for i in 0..out.len() {
        let c = acc.count[i];
        max_count = max_count.max(c);
        if c == 0 {
            uncovered += 1;
            if first_uncovered.len() < 8 {
                let z = i / (h * wd);
                let y = (i / wd) % h;
                let x = i % wd;
                first_uncovered.push((z, y, x));
            }
        } else {
            out[i] = (acc.sum[i] / c as f64) as f32;
        }
    }
    let report = CoverageReport {
        total_voxels: out.len(),
        uncovered,
        first_uncovered,
        max_count,
    };
    let vol = Volume::new(acc.dims, acc.spacing, out, modality, domain)?;
    Ok((vol, report))
}

/// Full tiled application of a shape-preserving patch function:
/// plan, extract, apply `f` (in parallel), deposit in plan order, finalize.
pub fn run_tiled(
    v: &Volume,
    window: usize,
    overlap: usize,
    modality: Modality,
    domain: IntensityDomain,
    f: impl Fn(&[f32]) -> Result<Vec<f32>, String> + Sync,
) -> Result<Volume, StitchError> {
    let plan = plan_windows(v.dims(), window, overlap)?;
    let patches: Vec<Result<Vec<f32>, StitchError>> = (0..plan.len())
        .into_par_iter()
        .map(|i| {
            let patch = extract(v, &plan, i)?;
            let out = f(&patch).map_err(|msg| StitchError::PatchFn { index: i, msg })?;
            if out.len() != patch.len() {
                return Err(StitchError::PatchContract {
                    index: i,
                    expected: patch.len(),
                    got: out.len(),
                });
            }
            Ok(out)
        })
        .collect();
    let mut acc = Accumulator::for_volume(v);
    for (i, p) in patches.into_iter().enumerate() {
        deposit(&mut acc, &plan, i, &p?)?;
    }
    let (vol, report) = finalize(acc, modality, domain)?;
    debug_assert!(report.is_complete(), "{report}");
    Ok(vol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{IntensityDomain, Modality};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn raw_volume(dims: (usize, usize, usize), voxels: Vec<f32>) -> Volume {
        Volume::new(dims, (1.0, 1.0, 1.0), voxels, Modality::Ct, IntensityDomain::Raw).unwrap()
    }

    fn random_volume(dims: (usize, usize, usize), seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.0 * dims.1 * dims.2;
        raw_volume(dims, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn plan_64_cubed_is_27_windows() {
        let plan = plan_windows((64, 64, 64), 32, 16).unwrap();
        assert_eq!(plan.len(), 27);
        let z_origins: Vec<usize> = plan.origins.iter().map(|o| o.0).collect();
        assert!(z_origins.iter().all(|&z| [0, 16, 32].contains(&z)));
    }

    #[test]
    fn plan_clamps_final_origin() {
        let plan = plan_windows((70, 64, 64), 32, 16).unwrap();
        let mut z: Vec<usize> = plan.origins.iter().map(|o| o.0).collect();
        z.dedup();
        assert_eq!(z, vec![0, 16, 32, 38]);
        assert_eq!(plan.len(), 4 * 3 * 3);
        // full coverage and in-bounds, by enumeration
        let mut covered = vec![false; 70];
        for &(z0, _, _) in &plan.origins {
            assert!(z0 + 32 <= 70);
            for z in z0..z0 + 32 {
                covered[z] = true;
            }
        }
        assert!(covered.iter().all(|&c| c));
    }

    #[test]
    fn plan_single_window_when_dims_equal_window() {
        let plan = plan_windows((32, 32, 32), 32, 16).unwrap();
        assert_eq!(plan.origins, vec![(0, 0, 0)]);
    }

    #[test]
    fn plan_rejects_oversized_window_and_bad_overlap() {
        assert!(matches!(
            plan_windows((20, 64, 64), 32, 16),
            Err(StitchError::WindowTooLarge { .. })
        ));
        assert!(matches!(
            plan_windows((64, 64, 64), 32, 32),
            Err(StitchError::BadOverlap { .. })
        ));
    }

    #[test]
    fn identity_reconstruction_is_exact() {
        for dims in [(32, 32, 32), (64, 64, 64), (70, 64, 48)] {
            let v = random_volume(dims, 7);
            let out = run_tiled(&v, 32, 16, v.modality(), v.domain(), |p| Ok(p.to_vec()))
                .unwrap();
            assert_eq!(out.voxels(), v.voxels(), "dims {dims:?}");
        }
    }

    #[test]
    fn two_window_overlap_averages_to_half() {
        // dims (1..) too small for 32; use window 4, overlap 2 on a 6-long axis
        let v = raw_volume((4, 4, 6), vec![0.0; 96]);
        let plan = plan_windows(v.dims(), 4, 2).unwrap();
        assert_eq!(plan.len(), 2);
        let mut acc = Accumulator::for_volume(&v);
        deposit(&mut acc, &plan, 0, &vec![0.0; 64]).unwrap();
        deposit(&mut acc, &plan, 1, &vec![1.0; 64]).unwrap();
        let (out, report) = finalize(acc, Modality::Ct, IntensityDomain::Raw).unwrap();
        assert!(report.is_complete());
        // x in [0,1]: window 0 only -> 0.0; x in [2,3]: both -> 0.5; x in [4,5]: window 1 -> 1.0
        for z in 0..4 {
            for y in 0..4 {
                assert_eq!(out.at(z, y, 0), 0.0);
                assert_eq!(out.at(z, y, 2), 0.5);
                assert_eq!(out.at(z, y, 5), 1.0);
            }
        }
    }

    #[test]
    fn finalize_before_full_deposit_reports_uncovered() {
        let v = raw_volume((4, 4, 6), vec![0.0; 96]);
        let plan = plan_windows(v.dims(), 4, 2).unwrap();
        let mut acc = Accumulator::for_volume(&v);
        deposit(&mut acc, &plan, 0, &vec![1.0; 64]).unwrap();
        let (_, report) = finalize(acc, Modality::Ct, IntensityDomain::Raw).unwrap();
        assert!(!report.is_complete());
        assert_eq!(report.uncovered, 4 * 4 * 2);
        assert!(!report.first_uncovered.is_empty());
        assert!(format!("{report}").contains("INCOMPLETE"));
    }

    #[test]
    fn run_tiled_shift_by_constant_everywhere() {
        let v = random_volume((64, 64, 64), 9);
        let out = run_tiled(&v, 32, 16, v.modality(), v.domain(), |p| {
            Ok(p.iter().map(|x| x + 0.25).collect())
        })
        .unwrap();
        for (o, i) in out.voxels().iter().zip(v.voxels()) {
            assert!((o - (i + 0.25)).abs() < 1e-6);
        }
    }

    #[test]
    fn run_tiled_matches_stepwise_composition() {
        let v = random_volume((40, 36, 48), 11);
        let affine = |p: &[f32]| -> Result<Vec<f32>, String> {
            Ok(p.iter().map(|x| 0.7 * x - 0.1).collect())
        };
        let fast = run_tiled(&v, 32, 16, v.modality(), v.domain(), affine).unwrap();

        // stepwise composition oracle
        let plan = plan_windows(v.dims(), 32, 16).unwrap();
        let mut acc = Accumulator::for_volume(&v);
        for i in 0..plan.len() {
            let p = extract(&v, &plan, i).unwrap();
            let q = affine(&p).unwrap();
            deposit(&mut acc, &plan, i, &q).unwrap();
        }
        let (slow, report) = finalize(acc, v.modality(), v.domain()).unwrap();
        assert!(report.is_complete());
        assert_eq!(fast.voxels(), slow.voxels());
    }

    #[test]
    fn run_tiled_rejects_shape_breaking_f() {
        let v = random_volume((32, 32, 32), 13);
        let res = run_tiled(&v, 32, 16, v.modality(), v.domain(), |p| {
            Ok(p[..10].to_vec())
        });
        assert!(matches!(res, Err(StitchError::PatchContract { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn coverage_holds_for_random_dims(
            d in 8usize..24, h in 8usize..24, w in 8usize..24, seed in 0u64..1000
        ) {
            let dims = (d, h, w);
            let v = random_volume(dims, seed);
            let plan = plan_windows(dims, 8, 3).unwrap();
            let mut acc = Accumulator::for_volume(&v);
            for i in 0..plan.len() {
                let p = extract(&v, &plan, i).unwrap();
                deposit(&mut acc, &plan, i, &p).unwrap();
            }
            let (out, report) = finalize(acc, v.modality(), v.domain()).unwrap();
            prop_assert!(report.is_complete());
            // identity reconstruction, exact
            prop_assert_eq!(out.voxels(), v.voxels());
        }

        #[test]
        fn deposit_order_does_not_matter(seed in 0u64..1000) {
            let dims = (12, 10, 14);
            let v = random_volume(dims, seed);
            let plan = plan_windows(dims, 8, 3).unwrap();
            let f = |p: &[f32]| -> Vec<f32> { p.iter().map(|x| x * 1.3 + 0.2).collect() };

            let mut fwd = Accumulator::for_volume(&v);
            for i in 0..plan.len() {
                let p = f(&extract(&v, &plan, i).unwrap());
                deposit(&mut fwd, &plan, i, &p).unwrap();
            }
            let (a, _) = finalize(fwd, v.modality(), v.domain()).unwrap();

            let mut rev = Accumulator::for_volume(&v);
            for i in (0..plan.len()).rev() {
                let p = f(&extract(&v, &plan, i).unwrap());
                deposit(&mut rev, &plan, i, &p).unwrap();
            }
            let (b, _) = finalize(rev, v.modality(), v.domain()).unwrap();

            for (x, y) in a.voxels().iter().zip(b.voxels()) {
                prop_assert!((x - y).abs() <= 1e-6);
            }
        }

        #[test]
        fn tiling_is_linear_in_the_patch_function(seed in 0u64..1000, alpha in -2.0f32..2.0) {
            let dims = (10, 12, 9);
            let v = random_volume(dims, seed);
            let out = run_tiled(&v, 8, 3, v.modality(), v.domain(), |p| {
                Ok(p.iter().map(|x| alpha * x).collect())
            }).unwrap();
            for (o, i) in out.voxels().iter().zip(v.voxels()) {
                prop_assert!((o - alpha * i).abs() < 1e-5);
            }
        }
    }
}
