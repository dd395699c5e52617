//! Drive the model, objective, and optimizer by hand instead of calling
//! `train::fit` — the escape hatch for custom schedules, callbacks, or
//! loss-weight experiments — then round-trip the weights through a file and
//! show the reloaded model reproduces the same output.
//!
//! Usage:
//!   cargo run --release --example custom_training_loop -- [iterations] [n]

use superpix::io::build_network_input;
use superpix::loss::{total_objective_with_grad, LossWeights};
use superpix::nn::{Model, NetworkConfig};
use superpix::ops::hard_assignment;
use superpix::tensor::Tensor;
use superpix::train::Adam;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let iterations: usize = args.first().map_or(Ok(120), |s| s.parse())?;
    let n: usize = args.get(1).map_or(Ok(8), |s| s.parse())?;

    // A 32×32 image: two color fields separated by a diagonal edge.
    let image = Tensor::from_fn(32, 32, 3, |y, x, c| {
        let upper = x + y < 32;
        let base = if upper {
            [0.9, 0.35, 0.2]
        } else {
            [0.2, 0.5, 0.9]
        };
        base[c] + 0.1 * ((x as f32 / 31.0) - 0.5)
    });
    let input = build_network_input::<f32>(&image);

    let mut model = Model::<f32>::new(&NetworkConfig::new(n))?;
    println!("{} parameters", model.n_parameters());

    // Halving the smoothness weight is the kind of knob this loop exposes.
    let weights = LossWeights {
        alpha: 1.0,
        ..LossWeights::default()
    };
    let mut adam = Adam::new(0.01, 0.0);

    for iter in 1..=iterations {
        let output = model.forward(&input);
        let (report, d_p, d_i_rec) =
            total_objective_with_grad(&output.p, &image, &output.i_rec, &weights)?;
        model.zero_grad();
        model.backward(&output, &d_p, &d_i_rec);
        adam.step(&mut model.params_mut());

        if iter == 1 || iter % 30 == 0 {
            println!(
                "iter {iter:>4}: total {:.4} (clustering {:.4}, smoothness {:.4}, reconstruction {:.4}, edge {:.4})",
                report.total, report.clustering, report.smoothness, report.reconstruction, report.edge
            );
        }
    }

    let labels = hard_assignment(&model.forward(&input).p);
    println!(
        "{} superpixels in the final hard assignment",
        labels.distinct_labels()
    );

    // Persist and reload: the fitted state is portable across processes.
    let dir = std::path::PathBuf::from("target/custom_training_loop_demo");
    std::fs::create_dir_all(&dir)?;
    let weights_path = dir.join("fitted.weights");
    model.save_weights(&weights_path)?;

    let mut reloaded = Model::<f32>::new(&NetworkConfig::new(n))?;
    reloaded.load_weights(&weights_path)?;
    let original = model.forward(&input);
    let restored = reloaded.forward(&input);
    let max_diff = original
        .i_rec
        .data()
        .iter()
        .zip(restored.i_rec.data())
        .map(|(&a, &b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    println!(
        "weights saved to {} — reloaded model output differs by at most {max_diff:e}",
        weights_path.display()
    );
    Ok(())
}
