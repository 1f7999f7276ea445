use std::time::Instant;
use vscan::harness::*;
use vscan::mint::MintConfig;
use vscan::phantom::{generate_cohort, PhantomConfig};

fn main() {
    let cfg = PhantomConfig {
        n_cases: 50,
        dims: (32, 32, 32),
        seed: 5,
        ..PhantomConfig::default()
    };
    let (mut cases, _) = generate_cohort(&cfg).unwrap();
    for c in cases.iter_mut() {
        c.synthetic_pet = c.pet.clone();
    }
    let folds = make_folds(&cases, 5, 1).unwrap();
    for (batch, variant) in [(4usize, Variant::Mint), (8, Variant::Mint), (8, Variant::CtOnly)] {
        let settings = TrainSettings {
            schedule: TrainSchedule {
                epochs: 1,
                batch,
                ..TrainSchedule::default()
            },
            mint: MintConfig::default(),
            ..TrainSettings::default()
        };
        let policy = if variant == Variant::CtOnly { DataPolicy::NoPet } else { DataPolicy::RealPet };
        let t0 = Instant::now();
        let _ = train_classifier(&cases, variant, &folds[0], policy, &settings, 1).unwrap();
        // fold 0: train = 30 cases, val = 10
        println!("{:?} batch {batch}: 1 epoch (30 train + 10 val) in {:?}", variant, t0.elapsed());
    }
}
