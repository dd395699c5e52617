//! Verify the hand-written backward passes against central finite
//! differences, at two levels: the objective's gradient with respect to the
//! assignment tensor, and the full backpropagated gradient for a sample of
//! network parameters.
//!
//! Usage:
//!   cargo run --release --example gradient_check

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use superpix::io::build_network_input;
use superpix::loss::{total_objective, total_objective_with_grad, LossWeights};
use superpix::nn::{Model, NetworkConfig};
use superpix::tensor::{AssignmentTensor, Tensor};

fn random_image(rng: &mut StdRng, h: usize, w: usize) -> Tensor<f64> {
    Tensor::from_fn(h, w, 3, |_, _, _| rng.gen_range(0.0..1.0))
}

fn random_assignment(rng: &mut StdRng, h: usize, w: usize, n: usize) -> AssignmentTensor<f64> {
    let mut t = Tensor::from_fn(h, w, n, |_, _, _| rng.gen_range(0.05..1.0));
    for y in 0..h {
        for x in 0..w {
            let sum: f64 = (0..n).map(|s| t.at(y, x, s)).sum();
            for s in 0..n {
                *t.at_mut(y, x, s) /= sum;
            }
        }
    }
    AssignmentTensor::new(t).unwrap()
}

fn main() {
    let mut rng = StdRng::seed_from_u64(7);
    let weights = LossWeights::default();

    // Level 1: d(total)/dP on a random 4×4, 3-superpixel instance. The
    // perturbed tensor is renormalized per pixel, so probe along directions
    // that stay on the simplex: bump one entry, renormalize.
    let (h, w, n) = (4, 4, 3);
    let image = random_image(&mut rng, h, w);
    let i_rec = random_image(&mut rng, h, w);
    let p = random_assignment(&mut rng, h, w, n);
    let (_, d_p, _) = total_objective_with_grad(&p, &image, &i_rec, &weights).unwrap();

    let step = 1e-6;
    let mut worst = 0.0f64;
    for idx in 0..h * w * n {
        let probe = |delta: f64| {
            let mut t = p.as_tensor().clone();
            t.data_mut()[idx] += delta;
            // from_softmax wraps without renormalizing — the losses are
            // well-defined slightly off the simplex, which is exactly what a
            // finite-difference probe needs.
            let q = AssignmentTensor::from_softmax(t);
            total_objective(&q, &image, &i_rec, &weights).unwrap().total
        };
        let numeric = (probe(step) - probe(-step)) / (2.0 * step);
        let analytic = d_p.data()[idx];
        let denom = analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((numeric - analytic).abs() / denom);
    }
    println!(
        "objective gradient vs finite differences over all {} P entries:",
        h * w * n
    );
    println!("  worst relative error {worst:.2e}");

    // Level 2: full backprop through the network for sampled parameters.
    let net = NetworkConfig {
        n_superpixels: 3,
        base_channels: 4,
        n_feature_blocks: 2,
        dilation_rates: vec![1, 2],
        aspp_branch_channels: 4,
        seed: 1,
    };
    let image = random_image(&mut rng, 8, 8);
    let input = build_network_input(&image);
    let mut model = Model::<f64>::new(&net).unwrap();

    let output = model.forward(&input);
    let (_, d_p, d_i_rec) =
        total_objective_with_grad(&output.p, &image, &output.i_rec, &weights).unwrap();
    model.zero_grad();
    model.backward(&output, &d_p, &d_i_rec);

    let picks: Vec<(usize, usize)> = {
        let params = model.params();
        (0..params.len())
            .map(|t| (t, rng.gen_range(0..params[t].data.len())))
            .collect()
    };

    let fd_step = 1e-5;
    println!("parameter gradients (one random entry per tensor):");
    println!("  (conv biases feed an instance norm, so their true gradient is ~0;");
    println!("   occasional larger deviations come from ReLU kinks crossed by the probe)");
    for (tensor_idx, entry) in picks {
        let analytic = {
            let params = model.params_mut();
            params[tensor_idx].grad[entry]
        };
        let mut eval_at = |delta: f64| {
            {
                let mut params = model.params_mut();
                params[tensor_idx].data[entry] += delta;
            }
            let out = model.forward(&input);
            let loss = total_objective(&out.p, &image, &out.i_rec, &weights)
                .unwrap()
                .total;
            let mut params = model.params_mut();
            params[tensor_idx].data[entry] -= delta;
            loss
        };
        let numeric = (eval_at(fd_step) - eval_at(-fd_step)) / (2.0 * fd_step);
        let denom = analytic.abs().max(numeric.abs()).max(1e-6);
        let name = model.params()[tensor_idx].name.clone();
        println!(
            "  {name:<24} entry {entry:<5} analytic {analytic:>12.6e}  numeric {numeric:>12.6e}  rel {:.2e}",
            (numeric - analytic).abs() / denom
        );
    }
}
