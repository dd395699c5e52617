//! End-to-end behavior of the fit/segment pipeline on synthetic images:
//! segmentation quality on images with known structure, objective descent,
//! gradient health, shape contracts, and connectivity post-processing.

mod common;

use superpix::io::build_network_input;
use superpix::loss::{total_objective_with_grad, LossWeights};
use superpix::metrics;
use superpix::nn::{Model, NetworkConfig};
use superpix::tensor::Tensor;
use superpix::train::{fit, segment, Adam, TrainConfig};

fn tiny_net(n: usize) -> NetworkConfig {
    NetworkConfig {
        n_superpixels: n,
        base_channels: 4,
        n_feature_blocks: 2,
        dilation_rates: vec![1, 2],
        aspp_branch_channels: 4,
        seed: 0,
    }
}

/// The flagship synthetic check: a 64×64 image whose left half is red and
/// right half blue must be segmented so that almost every pixel lands in a
/// superpixel dominated by its own color region (ASA ≥ 0.95 against the
/// two-segment reference).
#[test]
fn two_color_image_recovers_two_segments() {
    let image = common::two_color_image(64, 64);
    let gt = common::two_color_labels(64, 64);

    let net = NetworkConfig::new(8);
    let cfg = TrainConfig::default();
    let labels = segment::<f32>(&image, &net, &cfg).unwrap();

    let asa = metrics::asa(&labels, &gt).unwrap();
    let br = metrics::boundary_recall(&labels, &gt, 2).unwrap();
    println!(
        "two-color fit: ASA {asa:.4}, BR {br:.4}, {} superpixels used",
        labels.distinct_labels()
    );
    assert!(asa >= 0.95, "ASA {asa} below 0.95");
    assert!(labels.distinct_labels() <= 8);
}

/// Optimizing must reduce the objective on every image of a small smoke set
/// of procedurally textured photos.
#[test]
fn loss_decreases_on_every_smoke_image() {
    let net = NetworkConfig::new(8);
    let cfg = TrainConfig {
        iterations: 60,
        ..TrainConfig::default()
    };
    for variant in 0..5 {
        let image = common::synthetic_photo(16, 16, variant);
        let (_, trace) = fit::<f32>(&image, &net, &cfg).unwrap();
        assert_eq!(trace.len(), 60);
        assert!(
            trace.final_total() < trace.initial_total(),
            "variant {variant}: {} !< {}",
            trace.final_total(),
            trace.initial_total()
        );
    }
}

/// One optimization step on a random image must leave every parameter
/// gradient (and every updated parameter) finite.
#[test]
fn gradients_stay_finite_after_one_step() {
    let image = common::synthetic_photo(16, 16, 7);
    let input = build_network_input::<f32>(&image);

    let mut model = Model::<f32>::new(&NetworkConfig::new(4)).unwrap();
    let output = model.forward(&input);
    let (report, d_p, d_i_rec) =
        total_objective_with_grad(&output.p, &image, &output.i_rec, &LossWeights::default())
            .unwrap();
    assert!(report.total.is_finite());

    model.zero_grad();
    model.backward(&output, &d_p, &d_i_rec);
    let mut adam = Adam::new(0.01, 0.0);
    let mut params = model.params_mut();
    for p in &params {
        assert!(
            p.grad.iter().all(|g| g.is_finite()),
            "non-finite gradient in {}",
            p.name
        );
    }
    adam.step(&mut params);
    for p in &params {
        assert!(
            p.data.iter().all(|v| v.is_finite()),
            "non-finite value in {} after step",
            p.name
        );
    }
}

/// Output shapes and per-pixel normalization hold across awkward input sizes
/// and the extremes of the supported superpixel range.
#[test]
fn shape_contract_holds_for_extreme_configs() {
    for (h, w, n) in [(16usize, 17usize, 2usize), (23, 16, 400)] {
        let image = common::synthetic_photo(h, w, n as u64);
        let input = build_network_input::<f32>(&image);
        let mut model = Model::<f32>::new(&tiny_net(n)).unwrap();
        let output = model.forward(&input);

        let (ph, pw, pn) = output.p.as_tensor().shape();
        assert_eq!((ph, pw, pn), (h, w, n));
        assert_eq!(output.i_rec.shape(), (h, w, 3));
        for y in 0..h {
            for x in 0..w {
                let sum: f64 = (0..n).map(|s| f64::from(output.p.at(y, x, s))).sum();
                assert!((sum - 1.0).abs() < 1e-5, "({y},{x}) sums to {sum}");
            }
        }
    }
}

/// With connectivity enforcement on, a real (short) fit must come out with
/// every label forming a single 4-connected region.
#[test]
fn short_fit_with_connectivity_yields_connected_labels() {
    let image = common::synthetic_photo(16, 16, 2);
    let cfg = TrainConfig {
        iterations: 40,
        enforce_connectivity: true,
        seed: 9,
        ..TrainConfig::default()
    };
    let labels = segment::<f32>(&image, &tiny_net(6), &cfg).unwrap();
    assert!(common::all_labels_connected(&labels));
    // IDs stay compact after the merge/relabel pass.
    assert_eq!(labels.max_label() as usize + 1, labels.distinct_labels());
}

/// The per-pixel coordinate features matter: two identical rows of a
/// constant-color image can still be told apart by the network input.
#[test]
fn network_input_distinguishes_positions_on_flat_images() {
    let flat = Tensor::from_fn(12, 12, 3, |_, _, _| 0.5f32);
    let input = build_network_input(&flat);
    // RGB channels collapse to zeros (zero variance), coordinates do not.
    assert!(input.at(3, 4, 0) == 0.0 && input.at(3, 4, 1) == 0.0 && input.at(3, 4, 2) == 0.0);
    assert!(input.at(2, 5, 3) != input.at(2, 6, 3));
    assert!(input.at(2, 5, 4) != input.at(3, 5, 4));
}
