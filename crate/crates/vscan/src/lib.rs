//! Virtual scanning at desk scale: translate structural CT volumes into
//! synthetic PET, then classify tumor subtype (ADC vs. SCC) with a
//! multi-stage intermediate-fusion network — all on CPU, with a hand-rolled
//! tensor engine and a procedural phantom cohort standing in for clinical
//! data.
//!
//! The crate is organized so that each subsystem is usable on its own:
//!
//! * [`tensor`] — dense N-D tensors with reverse-mode automatic
//!   differentiation, Adam, and a binary checkpoint format (`VXF1`).
//! * [`volume`] — the 3D scalar-field data model, `VVOL` file I/O,
//!   intensity normalization, masking, and slice-wise CLAHE.
//! * [`stitcher`] — sliding-window tiling of volumes into cubic patches and
//!   overlap-averaged reassembly.
//! * [`synthgen`] — a small 3D conditional GAN (Pix2Pix style) mapping CT
//!   patches to PET patches, plus whole-volume synthesis through the
//!   stitcher.
//! * [`mint`] — residual 3D classification backbones: the multi-stage
//!   intermediate-fusion network and its early-fusion, late-fusion and
//!   unimodal baselines.
//! * [`metrics`] — image-quality metrics (MAE/PSNR/SSIM), classification
//!   metrics (balanced accuracy, GMean, TPR, AUC), and the exact Wilcoxon
//!   signed-rank test.
//! * [`phantom`] — a deterministic paired CT/PET phantom generator with
//!   class-dependent metabolic texture and analytic ground truth.
//! * [`harness`] — stratified cross-validation, training loops, model
//!   comparison with significance testing, ratio sweeps, and CSV/SVG
//!   report emission.
//!
//! ## Examples
//!
//! The `examples/` directory is the guided tour; each file is runnable on a
//! laptop in seconds to a few minutes:
//!
//! ```bash
//! cargo run --release --example phantom_cohort
//! cargo run --release --example preprocess_volume
//! cargo run --release --example tile_and_stitch
//! cargo run --release --example autodiff_basics
//! cargo run --release --example image_quality
//! cargo run --release --example train_translator
//! cargo run --release --example synthesize_pet
//! cargo run --release --example classify_subtypes
//! cargo run --release --example cross_validation
//! cargo run --release --example ratio_sweep
//! ```
//!
//! A thin `vscan` binary exposes the same pipeline as subcommands
//! (`phantom gen`, `train-gan`, `synthesize`, `train-clf`, `evaluate`,
//! `compare`, `sweep`, `report`); see the README for the config schema.

pub mod harness;
pub mod metrics;
pub mod mint;
pub mod phantom;
pub mod stitcher;
pub mod synthgen;
pub mod tensor;
pub mod volume;

pub use volume::{CaseRecord, ClassLabel, Volume};
