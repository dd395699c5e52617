//! Sweep the requested superpixel count and watch ASA/BR respond — the
//! library-level equivalent of the CLI `sweep` subcommand, on a generated
//! two-image dataset so it runs out of the box.
//!
//! Usage:
//!   cargo run --release --example sweep_superpixels -- [iterations] [counts,...]
//!
//! Each (image, count) pair is an independent fit; the default 60 iterations
//! on 24×24 images keeps the whole sweep around a minute on one core.

use superpix::metrics;
use superpix::nn::NetworkConfig;
use superpix::tensor::{LabelMap, Tensor};
use superpix::train::{segment, TrainConfig};

/// A soft vertical color gradient split by a hard horizontal edge.
fn banded_image(h: usize, w: usize, flip: bool) -> Tensor<f32> {
    Tensor::from_fn(h, w, 3, |y, x, c| {
        let top = (y < h / 2) ^ flip;
        let base = if top {
            [0.85, 0.25, 0.2]
        } else {
            [0.15, 0.45, 0.85]
        };
        (base[c] + 0.2 * (x as f64 / w as f64) as f32).min(1.0)
    })
}

fn banded_labels(h: usize, w: usize, flip: bool) -> LabelMap {
    let mut gt = LabelMap::new(h, w);
    for y in 0..h {
        for x in 0..w {
            *gt.at_mut(y, x) = u32::from((y >= h / 2) ^ flip);
        }
    }
    gt
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let iterations: usize = args.first().map_or(Ok(60), |s| s.parse())?;
    let counts: Vec<usize> = match args.get(1) {
        Some(list) => list.split(',').map(str::parse).collect::<Result<_, _>>()?,
        None => vec![4, 8],
    };

    let images = [
        (
            "bands_a",
            banded_image(24, 24, false),
            banded_labels(24, 24, false),
        ),
        (
            "bands_b",
            banded_image(24, 24, true),
            banded_labels(24, 24, true),
        ),
    ];

    println!("{:<8} {:<10} {:>8} {:>8}", "count", "image", "asa", "br");
    for &count in &counts {
        let net = NetworkConfig::new(count);
        let cfg = TrainConfig {
            iterations,
            ..TrainConfig::default()
        };
        let mut asa_sum = 0.0;
        let mut br_sum = 0.0;
        for (id, image, gt) in &images {
            let labels = segment::<f32>(image, &net, &cfg)?;
            let asa = metrics::asa(&labels, gt)?;
            let br = metrics::boundary_recall(&labels, gt, 2)?;
            println!("{count:<8} {id:<10} {asa:>8.4} {br:>8.4}");
            asa_sum += asa;
            br_sum += br;
        }
        println!(
            "{:<8} {:<10} {:>8.4} {:>8.4}",
            count,
            "mean",
            asa_sum / images.len() as f64,
            br_sum / images.len() as f64
        );
    }
    Ok(())
}
