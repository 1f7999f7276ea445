//! `VVOL` container I/O and the cohort manifest.
//!
//! A `VVOL` file is the 4-byte magic `VVOL`, a newline, one line of JSON
//! header (dims, spacing, modality, intensity domain, declared voxel
//! count), a newline, then the voxel buffer as packed little-endian `f32`.
//! Round-trips are bit-exact for both voxels and metadata.
//!
//! The manifest is a plain CSV with header
//! `case_id,ct_path,pet_path,mask_path,label` plus the optional columns
//! `synth_pet_path` and `source`. Paths are relative to the manifest's
//! directory; an empty path means the volume is absent.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{CaseRecord, ClassLabel, IntensityDomain, Modality, Source, Volume, VolumeError};

pub const MAGIC: &[u8; 4] = b"VVOL";

#[derive(Serialize, Deserialize)]
struct VvolHeader {
    dims: [usize; 3],
    spacing: [f32; 3],
    modality: Modality,
    domain: IntensityDomain,
    voxels: usize,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> VolumeError + '_ {
    move |source| VolumeError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_volume(v: &Volume, path: &Path) -> Result<(), VolumeError> {
    let (d, h, w) = v.dims();
    let (sx, sy, sz) = v.spacing();
    let header = VvolHeader {
        dims: [d, h, w],
        spacing: [sx, sy, sz],
        modality: v.modality(),
        domain: v.domain(),
        voxels: v.len(),
    };
    let header_json = serde_json::to_string(&header).map_err(|e| VolumeError::BadHeader {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    let mut f = std::fs::File::create(path).map_err(io_err(path))?;
    f.write_all(MAGIC).map_err(io_err(path))?;
    f.write_all(b"\n").map_err(io_err(path))?;
    f.write_all(header_json.as_bytes()).map_err(io_err(path))?;
    f.write_all(b"\n").map_err(io_err(path))?;
    let mut bytes = Vec::with_capacity(v.len() * 4);
    for &x in v.voxels() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    f.write_all(&bytes).map_err(io_err(path))?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<Volume, VolumeError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .map_err(io_err(path))?
        .read_to_end(&mut buf)
        .map_err(io_err(path))?;
    let pstr = path.display().to_string();
    if buf.len() < 5 || &buf[..4] != MAGIC {
        return Err(VolumeError::BadMagic {
            path: pstr,
            got: buf.get(..4).unwrap_or(&buf).to_vec(),
        });
    }
    let header_end = buf[5..]
        .iter()
        .position(|&b| b == b'\n')
        .map(|p| p + 5)
        .ok_or_else(|| VolumeError::BadHeader {
            path: pstr.clone(),
            msg: "missing newline after header".into(),
        })?;
    let header: VvolHeader =
        serde_json::from_slice(&buf[5..header_end]).map_err(|e| VolumeError::BadHeader {
            path: pstr.clone(),
            msg: e.to_string(),
        })?;
    let dims = (header.dims[0], header.dims[1], header.dims[2]);
    let expected = dims.0 * dims.1 * dims.2;
    if expected != header.voxels {
        return Err(VolumeError::HeaderVoxelMismatch {
            path: pstr,
            dims,
            expected,
            declared: header.voxels,
        });
    }
    let body = &buf[header_end + 1..];
    if body.len() != expected * 4 {
        return Err(VolumeError::Truncated {
            path: pstr,
            offset: header_end + 1,
            expected: expected * 4,
            got: body.len(),
        });
    }
    let voxels: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Volume::new(
        dims,
        (header.spacing[0], header.spacing[1], header.spacing[2]),
        voxels,
        header.modality,
        header.domain,
    )
}

/// One manifest line; paths are relative to the manifest file.
#[derive(Debug, Clone)]
pub struct ManifestRow {
    pub case_id: String,
    pub ct_path: String,
    pub pet_path: Option<String>,
    pub mask_path: String,
    pub label: ClassLabel,
    pub synth_pet_path: Option<String>,
    pub source: Source,
}

pub fn write_manifest(rows: &[ManifestRow], path: &Path) -> Result<(), VolumeError> {
    let mut out = String::from("case_id,ct_path,pet_path,mask_path,label,synth_pet_path,source\n");
    for r in rows {
        let source = match r.source {
            Source::Phantom => "phantom",
            Source::External => "external",
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.case_id,
            r.ct_path,
            r.pet_path.as_deref().unwrap_or(""),
            r.mask_path,
            r.label.as_str(),
            r.synth_pet_path.as_deref().unwrap_or(""),
            source,
        ));
    }
    std::fs::write(path, out).map_err(io_err(path))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>, VolumeError> {
    let pstr = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| VolumeError::Manifest {
        path: pstr.clone(),
        line: 1,
        msg: "empty manifest".into(),
    })?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let find = |name: &str| cols.iter().position(|c| *c == name);
    let (Some(i_case), Some(i_ct), Some(i_pet), Some(i_mask), Some(i_label)) = (
        find("case_id"),
        find("ct_path"),
        find("pet_path"),
        find("mask_path"),
        find("label"),
    ) else {
        return Err(VolumeError::Manifest {
            path: pstr,
            line: 1,
            msg: format!(
                "header must contain case_id,ct_path,pet_path,mask_path,label; got {header}"
            ),
        });
    };
    let i_synth = find("synth_pet_path");
    let i_source = find("source");

    let mut rows = Vec::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < cols.len() {
            return Err(VolumeError::Manifest {
                path: pstr.clone(),
                line: lineno + 1,
                msg: format!("expected {} fields, got {}", cols.len(), fields.len()),
            });
        }
        let opt = |s: &str| {
            if s.is_empty() {
                None
            } else {
                Some(s.to_string())
            }
        };
        let label = ClassLabel::parse(fields[i_label]).ok_or_else(|| VolumeError::Manifest {
            path: pstr.clone(),
            line: lineno + 1,
            msg: format!("unknown label {:?}", fields[i_label]),
        })?;
        let source = match i_source.map(|i| fields[i]) {
            Some("phantom") => Source::Phantom,
            _ => Source::External,
        };
        rows.push(ManifestRow {
            case_id: fields[i_case].to_string(),
            ct_path: fields[i_ct].to_string(),
            pet_path: opt(fields[i_pet]),
            mask_path: fields[i_mask].to_string(),
            label,
            synth_pet_path: i_synth.and_then(|i| opt(fields[i])),
            source,
        });
    }
    Ok(rows)
}

/// Read every case referenced by a manifest.
pub fn load_cohort(manifest_path: &Path) -> Result<Vec<CaseRecord>, VolumeError> {
    let rows = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut cases = Vec::with_capacity(rows.len());
    for r in rows {
        let rel = |p: &str| -> PathBuf { base.join(p) };
        let ct = read_volume(&rel(&r.ct_path))?;
        let pet = r.pet_path.as_deref().map(|p| read_volume(&rel(p))).transpose()?;
        let synth = r
            .synth_pet_path
            .as_deref()
            .map(|p| read_volume(&rel(p)))
            .transpose()?;
        let mask = read_volume(&rel(&r.mask_path))?;
        cases.push(CaseRecord::new(
            r.case_id, ct, pet, synth, mask, r.label, r.source,
        )?);
    }
    Ok(cases)
}

/// Write a cohort as one `VVOL` file per volume plus `manifest.csv` in
/// `dir`. Returns the manifest path.
pub fn write_cohort(cases: &[CaseRecord], dir: &Path) -> Result<PathBuf, VolumeError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut rows = Vec::with_capacity(cases.len());
    for c in cases {
        let ct_path = format!("{}_ct.vvol", c.case_id);
        let mask_path = format!("{}_mask.vvol", c.case_id);
        write_volume(&c.ct, &dir.join(&ct_path))?;
        write_volume(&c.mask, &dir.join(&mask_path))?;
        let pet_path = match &c.pet {
            Some(p) => {
                let name = format!("{}_pet.vvol", c.case_id);
                write_volume(p, &dir.join(&name))?;
                Some(name)
            }
            None => None,
        };
        let synth_pet_path = match &c.synthetic_pet {
            Some(p) => {
                let name = format!("{}_synthpet.vvol", c.case_id);
                write_volume(p, &dir.join(&name))?;
                Some(name)
            }
            None => None,
        };
        rows.push(ManifestRow {
            case_id: c.case_id.clone(),
            ct_path,
            pet_path,
            mask_path,
            label: c.label,
            synth_pet_path,
            source: c.source,
        });
    }
    let manifest = dir.join("manifest.csv");
    write_manifest(&rows, &manifest)?;
    Ok(manifest)
}
