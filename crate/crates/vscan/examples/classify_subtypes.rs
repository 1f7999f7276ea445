//! Train the two-stream intermediate-fusion classifier on one fold of a
//! small phantom cohort and inspect the per-epoch log.

use vscan::harness::{
    evaluate, make_folds, train_classifier, DataPolicy, TrainSchedule, TrainSettings, Variant,
};
use vscan::mint::MintConfig;
use vscan::phantom::{generate_cohort, PhantomConfig};

fn main() -> anyhow::Result<()> {
    let (cases, _) = generate_cohort(&PhantomConfig {
        n_cases: 40,
        dims: (32, 32, 32),
        seed: 51,
        ..PhantomConfig::default()
    })?;
    let folds = make_folds(&cases, 5, 3)?;
    let fold = &folds[0];
    println!(
        "fold 0: {} train / {} val / {} test",
        fold.train_ids.len(),
        fold.val_ids.len(),
        fold.test_ids.len()
    );

    let settings = TrainSettings {
        schedule: TrainSchedule {
            epochs: 4,
            batch: 4,
            ..TrainSchedule::default()
        },
        mint: MintConfig {
            blocks_per_stage: 2,
            base_channels: 8,
            ..MintConfig::default()
        },
        ..TrainSettings::default()
    };
    let trained = train_classifier(&cases, Variant::Mint, fold, DataPolicy::RealPet, &settings, 17)?;
    println!("\nepoch  lr        train_loss  val_gmean");
    for l in &trained.log {
        let mark = if l.epoch == trained.best_epoch { "  <- selected" } else { "" };
        println!(
            "{:>5}  {:<8}  {:>10.4}  {:>9.3}{mark}",
            l.epoch, l.lr, l.train_loss, l.val_gmean
        );
    }

    let outcome = evaluate(&trained, &cases, fold, DataPolicy::RealPet, &settings, "mint", 17)?;
    println!("\ntest fold metrics: {:?}", outcome.row);
    Ok(())
}
