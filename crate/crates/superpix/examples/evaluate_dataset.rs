//! Evaluate segmentations over a dataset directory laid out as
//! `<id>.png` images with `<id>_gt0.png`, `<id>_gt1.csv`, ... annotations,
//! averaging ASA and boundary recall over all annotations per image.
//!
//! Usage:
//!   cargo run --release --example evaluate_dataset -- <dataset_dir> [--oracle] [tolerance]
//!
//! `--oracle` scores the first annotation against all of them instead of
//! fitting the model — a fast sanity path for checking a dataset's wiring.
//! Without arguments a tiny demo dataset is created and oracle-evaluated.

use std::path::{Path, PathBuf};

use superpix::cli::discover_dataset;
use superpix::nn::NetworkConfig;
use superpix::tensor::{LabelMap, Tensor};
use superpix::train::{segment, TrainConfig};
use superpix::{io, metrics};

fn write_demo_dataset(dir: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let image = Tensor::from_fn(24, 24, 3, |_, x, c| {
        let left = x < 12;
        [[0.9, 0.2, 0.2], [0.2, 0.2, 0.9]][usize::from(!left)][c] as f32
    });
    let mut gt = LabelMap::new(24, 24);
    for y in 0..24 {
        for x in 12..24 {
            *gt.at_mut(y, x) = 1;
        }
    }
    io::save_image(&image, &dir.join("halves.png")).unwrap();
    io::save_label_map(&gt, &dir.join("halves_gt0.png")).unwrap();
    Ok(())
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args: Vec<String> = std::env::args().skip(1).collect();
    let oracle = if let Some(i) = args.iter().position(|a| a == "--oracle") {
        args.remove(i);
        true
    } else {
        false
    };

    let (dir, oracle) = match args.first() {
        Some(d) => (PathBuf::from(d), oracle),
        None => {
            let dir = PathBuf::from("target/evaluate_dataset_demo");
            write_demo_dataset(&dir)?;
            println!(
                "no dataset given; demo dataset in {} (oracle mode)",
                dir.display()
            );
            (dir, true)
        }
    };
    let tolerance: usize = args.get(1).map_or(Ok(2), |s| s.parse())?;

    let net = NetworkConfig::new(100);
    let cfg = TrainConfig::default();

    println!("{:<12} {:>6} {:>8} {:>8}", "image", "n", "asa", "br");
    let mut asa_sum = 0.0;
    let mut br_sum = 0.0;
    let mut count = 0usize;
    for entry in discover_dataset(&dir)? {
        if entry.annotations.is_empty() {
            eprintln!("skipping {}: no annotations", entry.id);
            continue;
        }
        let gts: Vec<LabelMap> = entry
            .annotations
            .iter()
            .map(|p| io::load_label_map(p))
            .collect::<Result<_, _>>()?;
        let pred = if oracle {
            gts[0].clone()
        } else {
            let image = io::load_image(&entry.image)?;
            segment::<f32>(&image, &net, &cfg)?
        };
        let report = metrics::evaluate(&pred, &gts, tolerance)?;
        println!(
            "{:<12} {:>6} {:>8.4} {:>8.4}",
            entry.id, report.n_superpixels_used, report.asa, report.br
        );
        asa_sum += report.asa;
        br_sum += report.br;
        count += 1;
    }
    if count > 0 {
        println!(
            "{:<12} {:>6} {:>8.4} {:>8.4}",
            "mean",
            "",
            asa_sum / count as f64,
            br_sum / count as f64
        );
    }
    Ok(())
}
