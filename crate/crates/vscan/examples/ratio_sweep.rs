//! Sweep the synthetic share of the training PET stream and chart GMean
//! on both test domains against the CT-only baseline.

use vscan::harness::{run_ratio_sweep, TrainSchedule, TrainSettings};
use vscan::mint::MintConfig;
use vscan::phantom::{generate_cohort, PhantomConfig};

fn main() -> anyhow::Result<()> {
    let (mut cases, truths) = generate_cohort(&PhantomConfig {
        n_cases: 30,
        dims: (16, 16, 16),
        seed: 81,
        ..PhantomConfig::default()
    })?;
    for (case, truth) in cases.iter_mut().zip(&truths) {
        let analytic = vscan::phantom::analytic_pet_from_ct(&case.ct, truth)?;
        case.synthetic_pet = Some(analytic.with_voxels(
            analytic.voxels().to_vec(),
            vscan::volume::Modality::SyntheticPet,
            vscan::volume::IntensityDomain::Normalized01,
        )?);
    }

    let settings = TrainSettings {
        schedule: TrainSchedule {
            epochs: 2,
            batch: 4,
            ..TrainSchedule::default()
        },
        mint: MintConfig {
            blocks_per_stage: 1,
            base_channels: 4,
            ..MintConfig::default()
        },
        ..TrainSettings::default()
    };
    let ratios = [0, 50, 100];
    let result = run_ratio_sweep(&cases, &ratios, 5, 91, &settings)?;
    println!("series            ratio   GMean");
    for row in &result.rows {
        println!(
            "{:<18}{:>5}  {:.3}",
            row.series,
            row.ratio.map(|r| r.to_string()).unwrap_or_else(|| "-".into()),
            row.gmean
        );
    }
    let svg_path = std::env::temp_dir().join("vscan_sweep.svg");
    std::fs::write(&svg_path, &result.svg)?;
    println!("\nchart written to {}", svg_path.display());
    Ok(())
}
