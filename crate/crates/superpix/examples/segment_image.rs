//! Segment a single image and write the standard artifacts (label map,
//! boundary overlay, loss trace, run manifest — the same files the CLI's
//! `segment` subcommand produces, driven through the library API).
//!
//! Usage:
//!   cargo run --release --example segment_image -- <image> [out_dir] [n] [iterations]
//!
//! With no arguments a synthetic four-quadrant demo image is generated and
//! segmented into `target/segment_image_demo/`.

use std::path::PathBuf;

use superpix::io;
use superpix::nn::NetworkConfig;
use superpix::tensor::Tensor;
use superpix::train::{extract_label_map, fit, TrainConfig};

fn demo_image(h: usize, w: usize) -> Tensor<f32> {
    let colors = [
        [0.86, 0.16, 0.16],
        [0.16, 0.78, 0.24],
        [0.20, 0.31, 0.86],
        [0.90, 0.86, 0.24],
    ];
    Tensor::from_fn(h, w, 3, |y, x, c| {
        let quadrant = usize::from(y >= h / 2) * 2 + usize::from(x >= w / 2);
        colors[quadrant][c] as f32
    })
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();

    let out_dir = args
        .get(1)
        .map_or_else(|| PathBuf::from("target/segment_image_demo"), PathBuf::from);
    std::fs::create_dir_all(&out_dir)?;

    let (image, stem) = match args.first() {
        Some(path) => (
            io::load_image(path.as_ref())?,
            PathBuf::from(path)
                .file_stem()
                .unwrap()
                .to_string_lossy()
                .into_owned(),
        ),
        None => {
            let image = demo_image(64, 64);
            let path = out_dir.join("demo_input.png");
            io::save_image(&image, &path)?;
            println!(
                "no image given; wrote a synthetic one to {}",
                path.display()
            );
            (image, "demo".to_string())
        }
    };

    let n: usize = args.get(2).map_or(Ok(16), |s| s.parse())?;
    let iterations: usize = args.get(3).map_or(Ok(200), |s| s.parse())?;

    let net = NetworkConfig::new(n);
    let cfg = TrainConfig {
        iterations,
        ..TrainConfig::default()
    };

    let (h, w, _) = image.shape();
    println!("fitting {w}×{h} image, {n} superpixels, {iterations} iterations...");
    let (output, trace) = fit::<f32>(&image, &net, &cfg)?;
    println!(
        "objective {:.4} → {:.4} in {:.1}s",
        trace.initial_total(),
        trace.final_total(),
        trace.duration().as_secs_f64()
    );

    let labels = extract_label_map(&output.p, &cfg);
    println!(
        "{} superpixels in the final segmentation",
        labels.distinct_labels()
    );

    io::save_label_map(&labels, &out_dir.join(format!("{stem}_labels.png")))?;
    io::save_image(
        &io::render_boundary_overlay(&image, &labels)?,
        &out_dir.join(format!("{stem}_overlay.png")),
    )?;
    let mut csv = Vec::new();
    trace.write_csv(&mut csv)?;
    std::fs::write(out_dir.join(format!("{stem}_trace.csv")), csv)?;

    println!("artifacts in {}", out_dir.display());
    Ok(())
}
