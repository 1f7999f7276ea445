//! Train the patch-level CT-to-PET translator on a handful of phantom
//! cases and watch the loss components.

use vscan::phantom::{generate_cohort, PhantomConfig};
use vscan::synthgen::{extract_patch_pairs, train_pix2pix, GanTrainConfig};

fn main() -> anyhow::Result<()> {
    let (cases, _) = generate_cohort(&PhantomConfig {
        n_cases: 24,
        dims: (32, 32, 32),
        seed: 21,
        ..PhantomConfig::default()
    })?;
    let pairs = extract_patch_pairs(&cases, 16, 0)?;
    println!("{} cases -> {} patch pairs of 16^3", cases.len(), pairs.len());

    let cfg = GanTrainConfig {
        epochs: 6,
        batch: 8,
        lr_g: 1e-3,
        lr_d: 1e-3,
        seed: 5,
        ..GanTrainConfig::default()
    };
    let (_generator, _critic, history) = train_pix2pix(&pairs, &cfg)?;
    println!("epoch  g_adversarial  g_l1     d_loss");
    for (e, h) in history.iter().enumerate() {
        println!(
            "{e:>5}  {:>13.4}  {:>7.4}  {:>7.4}",
            h.g_adversarial, h.g_l1, h.d_loss
        );
    }
    println!("\nthe L1 term should fall steadily; rerunning with the same");
    println!("seed reproduces this table exactly.");
    Ok(())
}
