//! The tensor engine in miniature: record a graph, check its gradient
//! against central differences, then fit a tiny convolution by gradient
//! descent with Adam.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vscan::tensor::gradcheck::{central_diff, max_rel_err};
use vscan::tensor::{Adam, Graph, Init, ParamSet};

fn main() -> anyhow::Result<()> {
    // gradient check at f64: conv -> relu -> mean squared loss
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x0: Vec<f64> = (0..2 * 4 * 4 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w0: Vec<f64> = (0..3 * 2 * 27).map(|_| rng.gen_range(-0.3..0.3)).collect();

    let forward = |xv: &[f64]| -> (Graph<f64>, vscan::tensor::TensorId, vscan::tensor::TensorId) {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(&[1, 2, 4, 4, 4], xv.to_vec(), true).unwrap();
        let w = g.leaf(&[3, 2, 3, 3, 3], w0.clone(), false).unwrap();
        let y = g.conv3d(x, w, None, 1, 1).unwrap();
        let r = g.relu(y);
        let loss = g.mse_to_const(r, 0.2);
        (g, x, loss)
    };
    let (mut g, x, loss) = forward(&x0);
    g.backward(loss)?;
    let analytic = g.grad(x).unwrap().to_vec();
    let numeric = central_diff(
        |xv| {
            let (g, _, loss) = forward(xv);
            g.value(loss)
        },
        &x0,
        1e-5,
    );
    println!(
        "conv+relu gradient: max relative error vs central differences = {:.2e}",
        max_rel_err(&analytic, &numeric, 1e-6)
    );

    // fit w so that conv(x, w) matches a target made from a known kernel
    let mut ps: ParamSet<f32> = ParamSet::new();
    let w = ps.param("w", &[1, 1, 3, 3, 3], Init::KaimingUniform { fan_in: 27 }, &mut rng);
    let true_w: Vec<f32> = (0..27).map(|i| (i as f32 - 13.0) / 27.0).collect();
    let xs: Vec<f32> = (0..6 * 6 * 6).map(|_| rng.gen_range(0.0..1.0)).collect();
    let target = {
        let mut g: Graph<f32> = Graph::new();
        let x = g.leaf(&[1, 1, 6, 6, 6], xs.clone(), false)?;
        let tw = g.leaf(&[1, 1, 3, 3, 3], true_w, false)?;
        let y = g.conv3d(x, tw, None, 1, 1)?;
        g.data(y).to_vec()
    };
    let mut adam = Adam::new(0.02);
    let mut last = 0.0;
    for step in 0..300 {
        let mut g: Graph<f32> = Graph::new();
        let x = g.leaf(&[1, 1, 6, 6, 6], xs.clone(), false)?;
        let wt = ps.bind(&mut g, w);
        let y = g.conv3d(x, wt, None, 1, 1)?;
        let t = g.leaf(&[1, 1, 6, 6, 6], target.clone(), false)?;
        let loss = g.l1_loss(y, t)?;
        last = g.value(loss);
        g.backward(loss)?;
        adam.step(&mut ps, &g, &[(w, wt)]);
        if step % 100 == 0 {
            println!("step {step:>3}: L1 = {last:.5}");
        }
    }
    println!("final L1 after 300 Adam steps: {last:.5}");
    Ok(())
}
