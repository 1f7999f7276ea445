//! The standardization pipeline on a single volume: HU window min-max
//! normalization, lung masking, and slice-wise CLAHE.

use vscan::volume::{clahe_slicewise, IntensityDomain, Modality, Volume};

fn main() -> anyhow::Result<()> {
    // a synthetic HU volume: air cavity inside soft tissue
    let dims = (16, 32, 32);
    let mut hu = vec![40.0f32; dims.0 * dims.1 * dims.2];
    for z in 0..dims.0 {
        for y in 8..24 {
            for x in 8..24 {
                hu[(z * dims.1 + y) * dims.2 + x] = -850.0;
            }
        }
    }
    let ct = Volume::new(dims, (1.0, 1.0, 1.0), hu, Modality::Ct, IntensityDomain::Hu)?;

    // lung-window normalization into [0,1]
    let normalized = ct.normalize_minmax(-1000.0, 400.0)?;
    let stats = |v: &Volume, tag: &str| {
        let (mut lo, mut hi, mut sum) = (f32::INFINITY, f32::NEG_INFINITY, 0.0f64);
        for &x in v.voxels() {
            lo = lo.min(x);
            hi = hi.max(x);
            sum += x as f64;
        }
        println!(
            "{tag:<12} min {lo:.3}  max {hi:.3}  mean {:.3}",
            sum / v.len() as f64
        );
    };
    stats(&normalized, "normalized");

    // mask off everything but the cavity
    let mask_vox: Vec<f32> = normalized
        .voxels()
        .iter()
        .map(|&v| if v < 0.3 { 1.0 } else { 0.0 })
        .collect();
    let mask = Volume::new(dims, (1.0, 1.0, 1.0), mask_vox, Modality::Mask, IntensityDomain::Raw)?;
    let masked = normalized.apply_mask(&mask)?;
    stats(&masked, "masked");

    // slicewise CLAHE redistributes the contrast per axial slice
    let equalized = clahe_slicewise(&normalized, (8, 8), 2.0, 256)?;
    stats(&equalized, "clahe");
    Ok(())
}
