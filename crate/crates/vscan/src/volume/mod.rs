//! Volumetric data model and preprocessing.
//!
//! A [`Volume`] is a dense 3-D scalar field in `(D,H,W)` order with physical
//! spacing metadata, a modality tag, and an intensity-domain tag. The
//! preprocessing operations here are the standardization steps applied
//! before synthesis and classification: window-based min-max intensity
//! normalization, binary masking, and slice-wise CLAHE.

mod clahe;
mod io;

pub use clahe::clahe_slicewise;
pub use io::{
    load_cohort, read_manifest, read_volume, write_cohort, write_manifest, write_volume,
    ManifestRow,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("dims {dims:?} imply {expected} voxels, got {got}")]
    VoxelCount {
        dims: (usize, usize, usize),
        expected: usize,
        got: usize,
    },
    #[error("dims mismatch: {a:?} vs {b:?}")]
    DimsMismatch {
        a: (usize, usize, usize),
        b: (usize, usize, usize),
    },
    #[error("spacing mismatch: {a:?} vs {b:?}")]
    SpacingMismatch { a: (f32, f32, f32), b: (f32, f32, f32) },
    #[error("degenerate normalization range: lo {lo} >= hi {hi}")]
    DegenerateRange { lo: f32, hi: f32 },
    #[error("volume tagged {domain:?} contains voxel {value} outside [0,1]")]
    NotNormalized { domain: IntensityDomain, value: f32 },
    #[error("mask contains non-binary voxel {value}")]
    NotBinary { value: f32 },
    #[error("expected a Mask volume, got {got:?}")]
    NotAMask { got: Modality },
    #[error("{op}: expected normalized01 input, got {got:?}")]
    WrongDomain {
        op: &'static str,
        got: IntensityDomain,
    },
    #[error("clahe: tiles {tiles:?} / clip limit {clip_limit} / bins {bins} invalid: {msg}")]
    BadClaheParams {
        tiles: (usize, usize),
        clip_limit: f32,
        bins: usize,
        msg: &'static str,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: bad magic at byte 0: expected \"VVOL\", got {got:?}")]
    BadMagic { path: String, got: Vec<u8> },
    #[error("{path}: truncated at byte {offset}: expected {expected} bytes, got {got}")]
    Truncated {
        path: String,
        offset: usize,
        expected: usize,
        got: usize,
    },
    #[error("{path}: malformed header: {msg}")]
    BadHeader { path: String, msg: String },
    #[error("{path}: header dims {dims:?} imply {expected} voxels, header declares {declared}")]
    HeaderVoxelMismatch {
        path: String,
        dims: (usize, usize, usize),
        expected: usize,
        declared: usize,
    },
    #[error("manifest {path} line {line}: {msg}")]
    Manifest {
        path: String,
        line: usize,
        msg: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Ct,
    Pet,
    SyntheticPet,
    Mask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntensityDomain {
    Hu,
    Normalized01,
    Raw,
}

/// Tumor subtype label. SCC is the minority/positive class by convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ClassLabel {
    Adc,
    Scc,
}

impl ClassLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            ClassLabel::Adc => "ADC",
            ClassLabel::Scc => "SCC",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "ADC" => Some(ClassLabel::Adc),
            "SCC" => Some(ClassLabel::Scc),
            _ => None,
        }
    }

    /// Class index used by the networks: ADC = 0, SCC = 1.
    pub fn index(self) -> usize {
        match self {
            ClassLabel::Adc => 0,
            ClassLabel::Scc => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Phantom,
    External,
}

/// Dense 3-D scalar field, row-major in `(D,H,W)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: (usize, usize, usize),
    spacing: (f32, f32, f32),
    voxels: Vec<f32>,
    modality: Modality,
    domain: IntensityDomain,
}

impl Volume {
    pub fn new(
        dims: (usize, usize, usize),
        spacing: (f32, f32, f32),
        voxels: Vec<f32>,
        modality: Modality,
        domain: IntensityDomain,
    ) -> Result<Self, VolumeError> {
        let expected = dims.0 * dims.1 * dims.2;
        if expected != voxels.len() || expected == 0 {
            return Err(VolumeError::VoxelCount {
                dims,
                expected,
                got: voxels.len(),
            });
        }
        if domain == IntensityDomain::Normalized01 {
            if let Some(&v) = voxels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(VolumeError::NotNormalized { domain, value: v });
            }
        }
        if modality == Modality::Mask {
            if let Some(&v) = voxels.iter().find(|&&v| v != 0.0 && v != 1.0) {
                return Err(VolumeError::NotBinary { value: v });
            }
        }
        Ok(Volume {
            dims,
            spacing,
            voxels,
            modality,
            domain,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn spacing(&self) -> (f32, f32, f32) {
        self.spacing
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn domain(&self) -> IntensityDomain {
        self.domain
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn at(&self, z: usize, y: usize, x: usize) -> f32 {
        let (_, h, w) = self.dims;
        self.voxels[(z * h + y) * w + x]
    }

    /// Same geometry, new contents and tags.
    pub fn with_voxels(
        &self,
        voxels: Vec<f32>,
        modality: Modality,
        domain: IntensityDomain,
    ) -> Result<Self, VolumeError> {
        Volume::new(self.dims, self.spacing, voxels, modality, domain)
    }

    /// Min-max window normalization into `[0,1]`:
    /// `out = clamp((x - lo)/(hi - lo), 0, 1)`. Values outside the window
    /// clamp to the endpoints; an input already in `[0,1]` is a fixed point
    /// of `(lo, hi) = (0, 1)`.
    pub fn normalize_minmax(&self, lo: f32, hi: f32) -> Result<Volume, VolumeError> {
        if hi <= lo {
            return Err(VolumeError::DegenerateRange { lo, hi });
        }
        let scale = 1.0 / (hi - lo);
        let voxels: Vec<f32> = self
            .voxels
            .iter()
            .map(|&v| ((v - lo) * scale).clamp(0.0, 1.0))
            .collect();
        Volume::new(
            self.dims,
            self.spacing,
            voxels,
            self.modality,
            IntensityDomain::Normalized01,
        )
    }

    /// Voxelwise product with a binary mask; everything outside the mask
    /// becomes exactly zero.
    pub fn apply_mask(&self, mask: &Volume) -> Result<Volume, VolumeError> {
        if mask.modality != Modality::Mask {
            return Err(VolumeError::NotAMask { got: mask.modality });
        }
        if mask.dims != self.dims {
            return Err(VolumeError::DimsMismatch {
                a: self.dims,
                b: mask.dims,
            });
        }
        let voxels: Vec<f32> = self
            .voxels
            .iter()
            .zip(&mask.voxels)
            .map(|(&v, &m)| v * m)
            .collect();
        Volume::new(self.dims, self.spacing, voxels, self.modality, self.domain)
    }
}

/// One subject: CT, optional PET volumes, lung mask, and the class label.
#[derive(Debug, Clone)]
pub struct CaseRecord {
    pub case_id: String,
    pub ct: Volume,
    pub pet: Option<Volume>,
    pub synthetic_pet: Option<Volume>,
    pub mask: Volume,
    pub label: ClassLabel,
    pub source: Source,
}

impl CaseRecord {
    /// Build a record, checking that every present volume shares dims and
    /// spacing with the CT.
    pub fn new(
        case_id: impl Into<String>,
        ct: Volume,
        pet: Option<Volume>,
        synthetic_pet: Option<Volume>,
        mask: Volume,
        label: ClassLabel,
        source: Source,
    ) -> Result<Self, VolumeError> {
        for v in [Some(&mask), pet.as_ref(), synthetic_pet.as_ref()]
            .into_iter()
            .flatten()
        {
            if v.dims != ct.dims {
                return Err(VolumeError::DimsMismatch {
                    a: ct.dims,
                    b: v.dims,
                });
            }
            if v.spacing != ct.spacing {
                return Err(VolumeError::SpacingMismatch {
                    a: ct.spacing,
                    b: v.spacing,
                });
            }
        }
        Ok(CaseRecord {
            case_id: case_id.into(),
            ct,
            pet,
            synthetic_pet,
            mask,
            label,
            source,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.ct.dims
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(dims: (usize, usize, usize), value: f32) -> Volume {
        Volume::new(
            dims,
            (1.0, 1.0, 1.0),
            vec![value; dims.0 * dims.1 * dims.2],
            Modality::Ct,
            IntensityDomain::Raw,
        )
        .unwrap()
    }

    fn mask_of(dims: (usize, usize, usize), bits: Vec<f32>) -> Volume {
        Volume::new(dims, (1.0, 1.0, 1.0), bits, Modality::Mask, IntensityDomain::Raw).unwrap()
    }

    #[test]
    fn minmax_endpoints_and_clamp() {
        let v = Volume::new(
            (1, 1, 4),
            (1.0, 1.0, 1.0),
            vec![-1000.0, 400.0, 2000.0, -300.0],
            Modality::Ct,
            IntensityDomain::Hu,
        )
        .unwrap();
        let n = v.normalize_minmax(-1000.0, 400.0).unwrap();
        assert_eq!(n.voxels()[0], 0.0);
        assert_eq!(n.voxels()[1], 1.0);
        assert_eq!(n.voxels()[2], 1.0); // clamped
        assert_eq!(n.domain(), IntensityDomain::Normalized01);
    }

    #[test]
    fn minmax_midpoint_is_half() {
        let v = vol((2, 2, 2), -300.0);
        let n = v.normalize_minmax(-1000.0, 400.0).unwrap();
        assert!(n.voxels().iter().all(|&x| (x - 0.5).abs() < 1e-6));
    }

    #[test]
    fn minmax_degenerate_range_errors() {
        let v = vol((1, 1, 1), 0.0);
        assert!(matches!(
            v.normalize_minmax(3.0, 3.0),
            Err(VolumeError::DegenerateRange { .. })
        ));
        assert!(v.normalize_minmax(4.0, 3.0).is_err());
    }

    #[test]
    fn minmax_idempotent_on_unit_range() {
        let v = Volume::new(
            (1, 1, 4),
            (1.0, 1.0, 1.0),
            vec![0.0, 0.25, 0.5, 1.0],
            Modality::Ct,
            IntensityDomain::Normalized01,
        )
        .unwrap();
        let n = v.normalize_minmax(0.0, 1.0).unwrap();
        assert_eq!(n.voxels(), v.voxels());
    }

    #[test]
    fn minmax_is_monotone() {
        let v = Volume::new(
            (1, 1, 5),
            (1.0, 1.0, 1.0),
            vec![-1200.0, -800.0, -100.0, 350.0, 900.0],
            Modality::Ct,
            IntensityDomain::Hu,
        )
        .unwrap();
        let n = v.normalize_minmax(-1000.0, 400.0).unwrap();
        for pair in n.voxels().windows(2) {
            assert!(pair[0] <= pair[1]);
        }
        assert!(n.voxels().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn mask_identity_zero_and_product() {
        let dims = (1, 2, 2);
        let v = Volume::new(
            dims,
            (1.0, 1.0, 1.0),
            vec![0.1, 0.2, 0.3, 0.4],
            Modality::Ct,
            IntensityDomain::Raw,
        )
        .unwrap();
        let ones = mask_of(dims, vec![1.0; 4]);
        let zeros = mask_of(dims, vec![0.0; 4]);
        assert_eq!(v.apply_mask(&ones).unwrap().voxels(), v.voxels());
        assert!(v
            .apply_mask(&zeros)
            .unwrap()
            .voxels()
            .iter()
            .all(|&x| x == 0.0));

        let m = mask_of(dims, vec![1.0, 0.0, 1.0, 0.0]);
        let out = v.apply_mask(&m).unwrap();
        for i in 0..4 {
            assert_eq!(out.voxels()[i], v.voxels()[i] * m.voxels()[i]);
        }
        // idempotent
        assert_eq!(out.apply_mask(&m).unwrap().voxels(), out.voxels());
    }

    #[test]
    fn mask_dims_mismatch_errors() {
        let v = vol((2, 2, 2), 1.0);
        let m = mask_of((1, 2, 2), vec![1.0; 4]);
        assert!(matches!(
            v.apply_mask(&m),
            Err(VolumeError::DimsMismatch { .. })
        ));
    }

    #[test]
    fn mask_must_be_binary() {
        let bad = Volume::new(
            (1, 1, 2),
            (1.0, 1.0, 1.0),
            vec![0.5, 1.0],
            Modality::Mask,
            IntensityDomain::Raw,
        );
        assert!(matches!(bad, Err(VolumeError::NotBinary { .. })));
    }

    #[test]
    fn normalized_domain_is_validated() {
        let bad = Volume::new(
            (1, 1, 2),
            (1.0, 1.0, 1.0),
            vec![0.5, 1.5],
            Modality::Pet,
            IntensityDomain::Normalized01,
        );
        assert!(matches!(bad, Err(VolumeError::NotNormalized { .. })));
    }

    #[test]
    fn case_record_checks_alignment() {
        let ct = vol((2, 2, 2), 0.3);
        let mask = mask_of((2, 2, 2), vec![1.0; 8]);
        let pet_bad = Volume::new(
            (2, 2, 2),
            (2.0, 1.0, 1.0),
            vec![0.1; 8],
            Modality::Pet,
            IntensityDomain::Raw,
        )
        .unwrap();
        let r = CaseRecord::new(
            "c1",
            ct.clone(),
            Some(pet_bad),
            None,
            mask.clone(),
            ClassLabel::Adc,
            Source::Phantom,
        );
        assert!(matches!(r, Err(VolumeError::SpacingMismatch { .. })));
        assert!(
            CaseRecord::new("c1", ct, None, None, mask, ClassLabel::Scc, Source::Phantom).is_ok()
        );
    }
}
