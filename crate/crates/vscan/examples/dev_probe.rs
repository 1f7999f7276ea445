use std::time::Instant;
use vscan::metrics::{auc, mae, ssim};
use vscan::phantom::{analytic_pet_from_ct, generate_cohort, pet_heterogeneity, PhantomConfig};
use vscan::synthgen::{extract_patch_pairs, synthesize_pet, train_pix2pix, GanTrainConfig};
use vscan::volume::ClassLabel;

fn main() {
    let cfg = PhantomConfig {
        n_cases: 100,
        dims: (32, 32, 32),
        ct_signal_strength: 0.0,
        pet_signal_strength: 1.0,
        noise_sigma: 0.02,
        seed: 41,
        ..PhantomConfig::default()
    };
    let (cases, truths) = generate_cohort(&cfg).unwrap();
    let (train, test) = cases.split_at(80);
    let t_truths = &truths[80..];

    let pairs = extract_patch_pairs(train, 16, 0).unwrap();
    let t0 = Instant::now();
    let gan_cfg = GanTrainConfig {
        epochs: 18,
        batch: 8,
        lr_g: 1e-3,
        lr_d: 1e-3,
        seed: 3,
        ..GanTrainConfig::default()
    };
    let (gen, _disc, hist) = train_pix2pix(&pairs, &gan_cfg).unwrap();
    println!("train {:?} last {:?}", t0.elapsed(), hist.last().unwrap());

    let mut ssims = Vec::new();
    let mut maes = Vec::new();
    let mut het_synth = Vec::new();
    let mut het_real = Vec::new();
    for (c, t) in test.iter().zip(t_truths) {
        let synth = synthesize_pet(&c.ct, &gen).unwrap();
        let analytic = analytic_pet_from_ct(&c.ct, t).unwrap();
        ssims.push(ssim(&analytic, &synth, 7, 1.0).unwrap());
        maes.push(mae(&analytic, &synth).unwrap());
        let is_scc = c.label == ClassLabel::Scc;
        het_synth.push((pet_heterogeneity(&synth, &c.mask), is_scc));
        het_real.push((pet_heterogeneity(c.pet.as_ref().unwrap(), &c.mask), is_scc));
    }
    let m = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!("held-out SSIM mean {:.4} min {:.4}", m(&ssims), ssims.iter().cloned().fold(f64::INFINITY, f64::min));
    println!("held-out MAE  mean {:.5} max {:.5}", m(&maes), maes.iter().cloned().fold(0.0f64, f64::max));
    println!("real PET dispersion AUC  {:.3}", auc(&het_real).unwrap());
    println!("synth PET dispersion AUC {:.3}", auc(&het_synth).unwrap());
}
