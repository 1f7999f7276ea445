//! Stratified five-fold comparison of two model variants on identical
//! splits, with exact Wilcoxon significance over the paired fold scores.

use vscan::harness::{
    comparison_report, run_comparison, ComparisonEntry, DataPolicy, TrainSchedule, TrainSettings,
    Variant,
};
use vscan::mint::MintConfig;
use vscan::phantom::{generate_cohort, PhantomConfig};

fn main() -> anyhow::Result<()> {
    let (mut cases, truths) = generate_cohort(&PhantomConfig {
        n_cases: 40,
        dims: (16, 16, 16),
        seed: 61,
        ..PhantomConfig::default()
    })?;
    // stand-in synthetic PET: the analytic uptake field (what a perfect
    // translator would produce)
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
            epochs: 3,
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
    let entries = vec![
        ComparisonEntry {
            name: "multimodal".into(),
            variant: Variant::Mint,
            train_policy: DataPolicy::SynthPet,
            test_policy: DataPolicy::SynthPet,
        },
        ComparisonEntry {
            name: "ct_only".into(),
            variant: Variant::CtOnly,
            train_policy: DataPolicy::NoPet,
            test_policy: DataPolicy::NoPet,
        },
    ];
    let result = run_comparison(&cases, &entries, 5, 71, &settings, String::new())?;
    println!("{}", comparison_report(&result));
    Ok(())
}
