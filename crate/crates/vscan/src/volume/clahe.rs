//! Contrast-limited adaptive histogram equalization, applied independently
//! to each axial slice of a normalized volume.
//!
//! The per-slice algorithm follows the classic tiled scheme: the slice is
//! reflect-101 extended to a multiple of the tile grid, each tile gets a
//! clipped histogram whose excess is redistributed uniformly, tile CDFs
//! become lookup tables `lut[b] = cdf[b] / tile_area`, and each pixel is
//! mapped by bilinear interpolation between the four surrounding tile
//! tables. A `(1,1)` grid (or a slice smaller than the grid, which falls
//! back to a single tile) reduces to plain histogram equalization.

use super::{IntensityDomain, Volume, VolumeError};

/// Slice-wise CLAHE on a `[0,1]`-normalized volume.
///
/// `tiles` is the `(x, y)` grid, i.e. tile counts along W and H.
/// `clip_limit` is the usual multiple of the mean histogram count
/// (values `>= 1`; large values disable clipping). `bins` is the
/// histogram resolution.
pub fn clahe_slicewise(
    v: &Volume,
    tiles: (usize, usize),
    clip_limit: f32,
    bins: usize,
) -> Result<Volume, VolumeError> {
    if v.domain() != IntensityDomain::Normalized01 {
        return Err(VolumeError::WrongDomain {
            op: "clahe_slicewise",
            got: v.domain(),
        });
    }
    let (tx, ty) = tiles;
    if tx == 0 || ty == 0 || clip_limit < 1.0 || bins < 2 {
        return Err(VolumeError::BadClaheParams {
            tiles,
            clip_limit,
            bins,
            msg: "need tiles >= 1, clip_limit >= 1, bins >= 2",
        });
    }
    let (d, h, w) = v.dims();
    let mut out = vec![0.0f32; v.len()];
    for z in 0..d {
        let slice = &v.voxels()[z * h * w..(z + 1) * h * w];
        let dst = &mut out[z * h * w..(z + 1) * h * w];
        // A slice smaller than the tile grid falls back to one tile.
        if h < ty || w < tx {
            equalize_slice(slice, dst, h, w, clip_limit, bins);
        } else if tx == 1 && ty == 1 {
            equalize_slice(slice, dst, h, w, clip_limit, bins);
        } else {
            clahe_slice(slice, dst, h, w, tx, ty, clip_limit, bins);
        }
    }
    v.with_voxels(out, v.modality(), IntensityDomain::Normalized01)
}

fn bin_of(v: f32, bins: usize) -> usize {
    ((v * bins as f32) as usize).min(bins - 1)
}

/// Clipped-histogram lookup table for one pixel region.
fn region_lut(
    pixels: impl Iterator<Item = f32>,
    area: usize,
    clip_limit: f32,
    bins: usize,
) -> Vec<f32> {
    let mut hist = vec![0usize; bins];
    for p in pixels {
        hist[bin_of(p, bins)] += 1;
    }
    // Clip and redistribute.
    let clip = (((clip_limit * area as f32) / bins as f32).max(1.0)) as usize;
    let mut excess = 0usize;
    for b in hist.iter_mut() {
        if *b > clip {
            excess += *b - clip;
            *b = clip;
        }
    }
    let batch = excess / bins;
    let mut residual = excess % bins;
    for b in hist.iter_mut() {
        *b += batch;
    }
    if residual > 0 {
        let step = (bins / residual).max(1);
        let mut i = 0;
        while i < bins && residual > 0 {
            hist[i] += 1;
            residual -= 1;
            i += step;
        }
    }
    // CDF -> mapping into (0, 1].
    let mut lut = vec![0.0f32; bins];
    let mut cum = 0usize;
    for (b, l) in hist.iter().zip(lut.iter_mut()) {
        cum += b;
        *l = cum as f32 / area as f32;
    }
    lut
}

/// Plain (single-tile) histogram equalization of one slice.
fn equalize_slice(src: &[f32], dst: &mut [f32], h: usize, w: usize, clip_limit: f32, bins: usize) {
    let lut = region_lut(src.iter().copied(), h * w, clip_limit, bins);
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = lut[bin_of(s, bins)];
    }
}

fn reflect101(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut r = i.rem_euclid(period);
    if r >= n as isize {
        r = period - r;
    }
    r as usize
}

#[allow(clippy::too_many_arguments)]
fn clahe_slice(
    src: &[f32],
    dst: &mut [f32],
    h: usize,
    w: usize,
    tx: usize,
    ty: usize,
    clip_limit: f32,
    bins: usize,
) {
    // Extend to a multiple of the grid so all tiles share one size.
    let eh = h.div_ceil(ty) * ty;
    let ew = w.div_ceil(tx) * tx;
    let th = eh / ty;
    let tw = ew / tx;
    let sample = |y: usize, x: usize| -> f32 {
        let sy = reflect101(y as isize, h);
        let sx = reflect101(x as isize, w);
        src[sy * w + sx]
    };

    let mut luts: Vec<Vec<f32>> = Vec::with_capacity(tx * ty);
    for tj in 0..ty {
        for ti in 0..tx {
            let y0 = tj * th;
            let x0 = ti * tw;
            let pixels = (0..th).flat_map(move |dy| (0..tw).map(move |dx| (y0 + dy, x0 + dx)));
            luts.push(region_lut(
                pixels.map(|(y, x)| sample(y, x)),
                th * tw,
                clip_limit,
                bins,
            ));
        }
    }

    // Bilinear interpolation between the four neighbouring tile tables,
    // evaluated on the original (unextended) coordinates.
    for y in 0..h {
        let fy = y as f32 / th as f32 - 0.5;
        let j1 = fy.floor().max(0.0) as usize;
        let wy = (fy - fy.floor()).clamp(0.0, 1.0);
        let (j1, j2, wy) = if fy < 0.0 {
            (0, 0, 0.0)
        } else {
            (j1, (j1 + 1).min(ty - 1), wy)
        };
        for x in 0..w {
            let fx = x as f32 / tw as f32 - 0.5;
            let i1 = fx.floor().max(0.0) as usize;
            let wx = (fx - fx.floor()).clamp(0.0, 1.0);
            let (i1, i2, wx) = if fx < 0.0 {
                (0, 0, 0.0)
            } else {
                (i1, (i1 + 1).min(tx - 1), wx)
            };
            let b = bin_of(src[y * w + x], bins);
            let tl = luts[j1 * tx + i1][b];
            let tr = luts[j1 * tx + i2][b];
            let bl = luts[j2 * tx + i1][b];
            let br = luts[j2 * tx + i2][b];
            let top = tl * (1.0 - wx) + tr * wx;
            let bot = bl * (1.0 - wx) + br * wx;
            dst[y * w + x] = (top * (1.0 - wy) + bot * wy).clamp(0.0, 1.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Modality;

    fn volume_from_slices(d: usize, h: usize, w: usize, voxels: Vec<f32>) -> Volume {
        Volume::new(
            (d, h, w),
            (1.0, 1.0, 1.0),
            voxels,
            Modality::SyntheticPet,
            IntensityDomain::Normalized01,
        )
        .unwrap()
    }

    #[test]
    fn constant_slice_stays_constant() {
        let v = volume_from_slices(2, 8, 8, vec![0.4; 128]);
        let out = clahe_slicewise(&v, (2, 2), 2.0, 256).unwrap();
        let first = out.voxels()[0];
        assert!(out.voxels().iter().all(|&x| x == first));
    }

    #[test]
    fn single_tile_no_clip_equals_plain_equalization() {
        // Independent plain-HE oracle: map each value to cdf(bin)/area.
        let h = 6;
        let w = 6;
        let vals: Vec<f32> = (0..36).map(|i| (i as f32) / 40.0).collect();
        let v = volume_from_slices(1, h, w, vals.clone());
        let out = clahe_slicewise(&v, (1, 1), 1e9, 64).unwrap();

        let mut hist = vec![0usize; 64];
        for &x in &vals {
            hist[((x * 64.0) as usize).min(63)] += 1;
        }
        let mut cdf = vec![0usize; 64];
        let mut c = 0;
        for (i, &hh) in hist.iter().enumerate() {
            c += hh;
            cdf[i] = c;
        }
        for (i, &x) in vals.iter().enumerate() {
            let expect = cdf[((x * 64.0) as usize).min(63)] as f32 / 36.0;
            assert!(
                (out.voxels()[i] - expect).abs() < 1e-6,
                "voxel {i}: {} vs {}",
                out.voxels()[i],
                expect
            );
        }
    }

    #[test]
    fn two_level_checkerboard_maps_to_cdf_positions() {
        // 0.2 / 0.8 checkerboard, equal counts: CDF positions 0.5 and 1.0.
        let h = 8;
        let w = 8;
        let vals: Vec<f32> = (0..64)
            .map(|i| if (i / 8 + i % 8) % 2 == 0 { 0.2 } else { 0.8 })
            .collect();
        let v = volume_from_slices(1, h, w, vals.clone());
        let out = clahe_slicewise(&v, (1, 1), 1e9, 256).unwrap();
        for (i, &x) in vals.iter().enumerate() {
            let expect = if x < 0.5 { 0.5 } else { 1.0 };
            assert!((out.voxels()[i] - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn output_stays_in_unit_range_and_slices_are_independent() {
        let h = 16;
        let w = 16;
        let mut vals = Vec::new();
        for z in 0..3 {
            for i in 0..h * w {
                vals.push((((i * 7919 + z * 104729) % 1000) as f32) / 999.0);
            }
        }
        let v = volume_from_slices(3, h, w, vals.clone());
        let out = clahe_slicewise(&v, (4, 4), 2.0, 128).unwrap();
        assert!(out.voxels().iter().all(|&x| (0.0..=1.0).contains(&x)));

        // Slice independence: padding the volume with copies of the first
        // slice must not change the first slice's output.
        let mut padded = vals[..h * w].to_vec();
        padded.extend_from_slice(&vals);
        let vp = volume_from_slices(4, h, w, padded);
        let outp = clahe_slicewise(&vp, (4, 4), 2.0, 128).unwrap();
        assert_eq!(&outp.voxels()[h * w..2 * h * w], &out.voxels()[..h * w]);
        assert_eq!(&outp.voxels()[..h * w], &out.voxels()[..h * w]);
    }

    #[test]
    fn small_slice_falls_back_to_single_tile() {
        let h = 3;
        let w = 3;
        let vals: Vec<f32> = (0..9).map(|i| i as f32 / 10.0).collect();
        let v = volume_from_slices(1, h, w, vals);
        let tiled = clahe_slicewise(&v, (8, 8), 2.0, 64).unwrap();
        let single = clahe_slicewise(&v, (1, 1), 2.0, 64).unwrap();
        assert_eq!(tiled.voxels(), single.voxels());
    }

    #[test]
    fn rejects_bad_parameters_and_domain() {
        let v = volume_from_slices(1, 4, 4, vec![0.5; 16]);
        assert!(clahe_slicewise(&v, (0, 2), 2.0, 64).is_err());
        assert!(clahe_slicewise(&v, (2, 2), 0.5, 64).is_err());
        let raw = Volume::new(
            (1, 4, 4),
            (1.0, 1.0, 1.0),
            vec![2.0; 16],
            Modality::Ct,
            IntensityDomain::Raw,
        )
        .unwrap();
        assert!(matches!(
            clahe_slicewise(&raw, (2, 2), 2.0, 64),
            Err(VolumeError::WrongDomain { .. })
        ));
    }
}
