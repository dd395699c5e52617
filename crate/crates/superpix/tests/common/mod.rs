//! Shared fixtures and reference implementations for the integration
//! suites.
//!
//! Every `reference_*` function is a deliberately naive, loop-by-loop
//! translation of the corresponding definition. None of them call into the
//! library; they exist so the optimized implementations have something
//! independent to be checked against.

#![allow(dead_code)] // each test target uses a different subset

use rand::rngs::StdRng;
use rand::Rng;

use superpix::tensor::{LabelMap, Tensor};

pub const LOG_EPS: f64 = 1e-12;
pub const MASS_EPS: f64 = 1e-8;

/// Row-major H×W×C buffer with explicit indexing, the working format of all
/// reference implementations.
#[derive(Clone)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn new(h: usize, w: usize, c: usize) -> Self {
        Self {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }

    pub fn at(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[(y * self.w + x) * self.c + ch]
    }

    pub fn set(&mut self, y: usize, x: usize, ch: usize, v: f64) {
        self.data[(y * self.w + x) * self.c + ch] = v;
    }

    pub fn from_tensor<T: superpix::Scalar>(t: &Tensor<T>) -> Self {
        let (h, w, c) = t.shape();
        Self {
            h,
            w,
            c,
            data: t.data().iter().map(|v| v.into_f64()).collect(),
        }
    }

    pub fn to_tensor<T: superpix::Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(
            self.h,
            self.w,
            self.c,
            self.data.iter().map(|&v| T::from_f64(v)).collect(),
        )
    }
}

fn ln_clamped(v: f64) -> f64 {
    v.max(LOG_EPS).ln()
}

/// Per-pixel assignment entropy plus `lambda` times the negative entropy of
/// the mean assignment.
pub fn reference_clustering_loss(p: &Grid, lambda: f64) -> f64 {
    let hw = (p.h * p.w) as f64;
    let mut pixel_entropy = 0.0;
    for y in 0..p.h {
        for x in 0..p.w {
            for s in 0..p.c {
                let v = p.at(y, x, s);
                pixel_entropy -= v * ln_clamped(v);
            }
        }
    }
    let mut marginal_term = 0.0;
    for s in 0..p.c {
        let mut mean = 0.0;
        for y in 0..p.h {
            for x in 0..p.w {
                mean += p.at(y, x, s);
            }
        }
        mean /= hw;
        marginal_term += mean * ln_clamped(mean);
    }
    pixel_entropy / hw + lambda * marginal_term
}

/// L1 assignment differences between horizontal/vertical neighbors, each
/// weighted by a Gaussian of the squared color difference.
pub fn reference_smoothness_loss(p: &Grid, image: &Grid, sigma: f64) -> f64 {
    let mut total = 0.0;
    for y in 0..p.h {
        for x in 0..p.w {
            if x + 1 < p.w {
                let mut dp = 0.0;
                for s in 0..p.c {
                    dp += (p.at(y, x + 1, s) - p.at(y, x, s)).abs();
                }
                let mut di = 0.0;
                for ch in 0..image.c {
                    let d = image.at(y, x + 1, ch) - image.at(y, x, ch);
                    di += d * d;
                }
                total += dp * (-di / sigma).exp();
            }
            if y + 1 < p.h {
                let mut dp = 0.0;
                for s in 0..p.c {
                    dp += (p.at(y + 1, x, s) - p.at(y, x, s)).abs();
                }
                let mut di = 0.0;
                for ch in 0..image.c {
                    let d = image.at(y + 1, x, ch) - image.at(y, x, ch);
                    di += d * d;
                }
                total += dp * (-di / sigma).exp();
            }
        }
    }
    total / (p.h * p.w) as f64
}

/// Soft superpixelated image: every pixel becomes the P-weighted mixture of
/// the soft mean colors.
pub fn reference_soft_image(p: &Grid, image: &Grid) -> Grid {
    let n = p.c;
    let mut colors = vec![0.0; n * image.c];
    for s in 0..n {
        let mut mass = 0.0;
        for y in 0..p.h {
            for x in 0..p.w {
                mass += p.at(y, x, s);
            }
        }
        for ch in 0..image.c {
            let mut weighted = 0.0;
            for y in 0..p.h {
                for x in 0..p.w {
                    weighted += p.at(y, x, s) * image.at(y, x, ch);
                }
            }
            colors[s * image.c + ch] = weighted / mass.max(MASS_EPS);
        }
    }
    let mut out = Grid::new(p.h, p.w, image.c);
    for y in 0..p.h {
        for x in 0..p.w {
            for ch in 0..image.c {
                let mut v = 0.0;
                for s in 0..n {
                    v += p.at(y, x, s) * colors[s * image.c + ch];
                }
                out.set(y, x, ch, v);
            }
        }
    }
    out
}

/// Mean squared error of both reconstructions against the image.
pub fn reference_reconstruction_loss(image: &Grid, i_rec: &Grid, i_soft: &Grid) -> f64 {
    let mut total = 0.0;
    for i in 0..image.data.len() {
        let a = image.data[i] - i_rec.data[i];
        let b = image.data[i] - i_soft.data[i];
        total += a * a + b * b;
    }
    total / (3 * image.h * image.w) as f64
}

/// 3×3 Laplacian response with replicate padding, averaged over channels.
fn reference_mean_laplacian(t: &Grid) -> Vec<f64> {
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    let mut out = vec![0.0; t.h * t.w];
    for y in 0..t.h {
        for x in 0..t.w {
            let mut sum = 0.0;
            for ch in 0..t.c {
                let up = t.at(clamp(y as isize - 1, t.h), x, ch);
                let down = t.at(clamp(y as isize + 1, t.h), x, ch);
                let left = t.at(y, clamp(x as isize - 1, t.w), ch);
                let right = t.at(y, clamp(x as isize + 1, t.w), ch);
                sum += up + down + left + right - 4.0 * t.at(y, x, ch);
            }
            out[y * t.w + x] = sum / t.c as f64;
        }
    }
    out
}

/// Spatial softmax of the mean Laplacian response.
fn reference_edge_distribution(t: &Grid) -> Vec<f64> {
    let lap = reference_mean_laplacian(t);
    let max = lap.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = lap.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

fn reference_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| a * (ln_clamped(a) - ln_clamped(b)))
        .sum()
}

/// KL from the image edge distribution to each reconstruction's.
pub fn reference_edge_loss(image: &Grid, i_rec: &Grid, i_soft: &Grid) -> f64 {
    let e_i = reference_edge_distribution(image);
    let e_rec = reference_edge_distribution(i_rec);
    let e_soft = reference_edge_distribution(i_soft);
    reference_kl(&e_i, &e_rec) + reference_kl(&e_i, &e_soft)
}

/// O(HW·S·G) achievable segmentation accuracy.
pub fn reference_asa(pred: &LabelMap, gt: &LabelMap) -> f64 {
    let mut kept = 0u64;
    for s in 0..=pred.max_label() {
        let mut best = 0u64;
        for g in 0..=gt.max_label() {
            let mut count = 0u64;
            for (p, q) in pred.labels().iter().zip(gt.labels()) {
                if *p == s && *q == g {
                    count += 1;
                }
            }
            best = best.max(count);
        }
        kept += best;
    }
    kept as f64 / pred.labels().len() as f64
}

fn reference_boundary_pixels(labels: &LabelMap) -> Vec<(usize, usize)> {
    let (h, w) = labels.shape();
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let l = labels.at(y, x);
            if (x + 1 < w && labels.at(y, x + 1) != l) || (y + 1 < h && labels.at(y + 1, x) != l) {
                out.push((y, x));
            }
        }
    }
    out
}

/// O(B_gt · B_pred) boundary recall via pairwise Chebyshev distances.
pub fn reference_boundary_recall(pred: &LabelMap, gt: &LabelMap, r: usize) -> f64 {
    let gt_pixels = reference_boundary_pixels(gt);
    if gt_pixels.is_empty() {
        return 1.0;
    }
    let pred_pixels = reference_boundary_pixels(pred);
    let mut hit = 0u64;
    for &(gy, gx) in &gt_pixels {
        let matched = pred_pixels.iter().any(|&(py, px)| {
            let dy = gy.abs_diff(py);
            let dx = gx.abs_diff(px);
            dy.max(dx) <= r
        });
        if matched {
            hit += 1;
        }
    }
    hit as f64 / gt_pixels.len() as f64
}

/// Random per-pixel distribution over `n` labels (strictly positive).
pub fn random_assignment_grid(rng: &mut StdRng, h: usize, w: usize, n: usize) -> Grid {
    let mut g = Grid::new(h, w, n);
    for y in 0..h {
        for x in 0..w {
            let mut sum = 0.0;
            let mut row = vec![0.0; n];
            for v in &mut row {
                *v = rng.gen_range(0.05..1.0);
                sum += *v;
            }
            for (s, v) in row.iter().enumerate() {
                g.set(y, x, s, v / sum);
            }
        }
    }
    g
}

pub fn random_image_grid(rng: &mut StdRng, h: usize, w: usize) -> Grid {
    let mut g = Grid::new(h, w, 3);
    for v in &mut g.data {
        *v = rng.gen_range(0.0..1.0);
    }
    g
}

pub fn random_label_map(rng: &mut StdRng, h: usize, w: usize, max_labels: u32) -> LabelMap {
    LabelMap::from_vec(
        h,
        w,
        (0..h * w).map(|_| rng.gen_range(0..max_labels)).collect(),
    )
}

/// Four constant-color quadrants.
pub fn quadrant_image(h: usize, w: usize) -> Tensor<f32> {
    let colors: [[f32; 3]; 4] = [
        [0.86, 0.16, 0.16],
        [0.16, 0.78, 0.24],
        [0.20, 0.31, 0.86],
        [0.90, 0.86, 0.24],
    ];
    Tensor::from_fn(h, w, 3, |y, x, c| {
        let q = usize::from(x >= w / 2) + 2 * usize::from(y >= h / 2);
        colors[q][c]
    })
}

pub fn quadrant_labels(h: usize, w: usize) -> LabelMap {
    let mut gt = LabelMap::new(h, w);
    for y in 0..h {
        for x in 0..w {
            *gt.at_mut(y, x) = (u32::from(x >= w / 2)) + 2 * u32::from(y >= h / 2);
        }
    }
    gt
}

/// Left half red, right half blue.
pub fn two_color_image(h: usize, w: usize) -> Tensor<f32> {
    Tensor::from_fn(h, w, 3, |_, x, c| {
        if x < w / 2 {
            [0.85, 0.12, 0.12][c]
        } else {
            [0.12, 0.15, 0.85][c]
        }
    })
}

pub fn two_color_labels(h: usize, w: usize) -> LabelMap {
    let mut gt = LabelMap::new(h, w);
    for y in 0..h {
        for x in w / 2..w {
            *gt.at_mut(y, x) = 1;
        }
    }
    gt
}

/// Procedural "natural-ish" RGB test image: smooth gradients with a few
/// hard region boundaries, deterministic in (h, w, variant).
pub fn synthetic_photo(h: usize, w: usize, variant: u64) -> Tensor<f32> {
    Tensor::from_fn(h, w, 3, |y, x, c| {
        let fy = y as f32 / h as f32;
        let fx = x as f32 / w as f32;
        let v = variant as f32;
        let wave = (6.0 * fx + v).sin() * 0.25 + (4.5 * fy - 0.7 * v).cos() * 0.25 + 0.5;
        let region = if (fx - 0.4).hypot(fy - 0.5) < 0.25 {
            0.85
        } else if fx + fy > 1.3 {
            0.25
        } else {
            0.55
        };
        let mix = 0.6 * region + 0.4 * wave;
        (mix + 0.08 * (c as f32 - 1.0)).clamp(0.0, 1.0)
    })
}

/// True when every label's pixel set is 4-connected.
pub fn all_labels_connected(labels: &LabelMap) -> bool {
    let (h, w) = labels.shape();
    let mut component = vec![u32::MAX; h * w];
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if component[start] != u32::MAX {
            continue;
        }
        let label = labels.labels()[start];
        component[start] = next;
        stack.push(start);
        while let Some(px) = stack.pop() {
            let (y, x) = (px / w, px % w);
            let mut visit = |n: usize| {
                if component[n] == u32::MAX && labels.labels()[n] == label {
                    component[n] = next;
                    stack.push(n);
                }
            };
            if y > 0 {
                visit(px - w);
            }
            if y + 1 < h {
                visit(px + w);
            }
            if x > 0 {
                visit(px - 1);
            }
            if x + 1 < w {
                visit(px + 1);
            }
        }
        next += 1;
    }
    // Connected iff every label maps to exactly one component.
    let mut seen = std::collections::HashMap::new();
    for (comp, label) in component.iter().zip(labels.labels()) {
        match seen.entry(*label) {
            std::collections::hash_map::Entry::Vacant(e) => {
                e.insert(*comp);
            }
            std::collections::hash_map::Entry::Occupied(e) => {
                if e.get() != comp {
                    return false;
                }
            }
        }
    }
    true
}
