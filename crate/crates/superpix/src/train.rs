//! Per-image training: Adam over the combined objective, plus extraction of
//! the final hard segmentation.
//!
//! There is no dataset or pretraining — the model is fit from scratch on the
//! single image being segmented, for a fixed number of iterations. The loop
//! is fully deterministic for a given seed and configuration: weight
//! initialization is the only source of randomness, every reduction is
//! ordered, and the GEMM backend runs single-threaded per model.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::io;
use crate::loss::{self, LossReport, LossWeights};
use crate::nn::{Model, ModelOutput, NetworkConfig, ParamMut};
use crate::ops;
use crate::tensor::{AssignmentTensor, LabelMap, Scalar, Tensor};
use crate::{Error, Result};

/// Optimization hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub loss_weights: LossWeights,
    /// Seeds weight initialization (authoritative over `NetworkConfig::seed`
    /// during [`fit`]).
    pub seed: u64,
    /// Merge undersized 4-connected components after hard assignment.
    pub enforce_connectivity: bool,
    /// Component size threshold, as a fraction of the mean superpixel area
    /// `H·W/N`.
    pub min_component_frac: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            learning_rate: 0.01,
            weight_decay: 0.0,
            loss_weights: LossWeights::default(),
            seed: 0,
            enforce_connectivity: false,
            min_component_frac: 0.25,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        if !(self.min_component_frac.is_finite() && self.min_component_frac >= 0.0) {
            return Err(Error::Config(
                "min_component_frac must be non-negative".into(),
            ));
        }
        self.loss_weights.validate()
    }
}

/// Loss history of one fit, in iteration order.
#[derive(Clone, Debug)]
pub struct TrainTrace {
    reports: Vec<LossReport>,
    duration: Duration,
}

impl TrainTrace {
    pub fn reports(&self) -> &[LossReport] {
        &self.reports
    }

    pub fn len(&self) -> usize {
        self.reports.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reports.is_empty()
    }

    pub fn duration(&self) -> Duration {
        self.duration
    }

    pub fn initial_total(&self) -> f64 {
        self.reports.first().map_or(f64::NAN, |r| r.total)
    }

    pub fn final_total(&self) -> f64 {
        self.reports.last().map_or(f64::NAN, |r| r.total)
    }

    /// Writes the trace as CSV with one row per iteration (1-based).
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "iteration",
            "clustering",
            "smoothness",
            "reconstruction",
            "edge",
            "total",
        ])?;
        for (i, r) in self.reports.iter().enumerate() {
            w.write_record(&[
                (i + 1).to_string(),
                r.clustering.to_string(),
                r.smoothness.to_string(),
                r.reconstruction.to_string(),
                r.edge.to_string(),
                r.total.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Adam with bias correction. Moments are kept in f64 regardless of the
/// parameter type; weight decay (when non-zero) enters as an L2 gradient
/// term.
pub struct Adam {
    learning_rate: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update to every parameter from its accumulated gradient.
    pub fn step<T: Scalar>(&mut self, params: &mut [ParamMut<'_, T>]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.data.len()]).collect();
            self.v = self.m.clone();
        }
        assert_eq!(
            self.m.len(),
            params.len(),
            "optimizer bound to a different model"
        );
        self.step_count += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        for (param, (m, v)) in params.iter_mut().zip(self.m.iter_mut().zip(&mut self.v)) {
            for i in 0..param.data.len() {
                let mut g = param.grad[i].into_f64();
                if self.weight_decay != 0.0 {
                    g += self.weight_decay * param.data[i].into_f64();
                }
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let update =
                    self.learning_rate * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.epsilon);
                param.data[i] = T::from_f64(param.data[i].into_f64() - update);
            }
        }
    }
}

/// Fits the model to one image and returns the final forward output with
/// the full loss trace. A non-finite loss at any iteration aborts with the
/// iteration index.
pub fn fit<T: Scalar>(
    image: &Tensor<T>,
    net_cfg: &NetworkConfig,
    train_cfg: &TrainConfig,
) -> Result<(ModelOutput<T>, TrainTrace)> {
    train_cfg.validate()?;
    let (h, w, c) = image.shape();
    if c != 3 {
        return Err(Error::Config(format!(
            "expected an RGB image, got {c} channels"
        )));
    }
    if h < 16 || w < 16 {
        return Err(Error::Config(format!(
            "image must be at least 16×16 pixels, got {h}×{w}"
        )));
    }

    let mut cfg = net_cfg.clone();
    cfg.seed = train_cfg.seed;
    let mut model = Model::new(&cfg)?;
    let input = io::build_network_input(image);
    let mut adam = Adam::new(train_cfg.learning_rate, train_cfg.weight_decay);

    let start = Instant::now();
    let mut reports = Vec::with_capacity(train_cfg.iterations);
    for iteration in 1..=train_cfg.iterations {
        let out = model.forward(&input);
        let (report, d_p, d_i_rec) =
            loss::total_objective_with_grad(&out.p, image, &out.i_rec, &train_cfg.loss_weights)?;
        if !report.total.is_finite() {
            return Err(Error::NonFiniteLoss { iteration });
        }
        reports.push(report);
        model.zero_grad();
        model.backward(&out, &d_p, &d_i_rec);
        adam.step(&mut model.params_mut());
    }
    let output = model.forward(&input);
    let trace = TrainTrace {
        reports,
        duration: start.elapsed(),
    };
    Ok((output, trace))
}

/// Fits the model and extracts the hard segmentation: per-pixel argmax,
/// optional connectivity enforcement, and compaction to IDs `0..K-1`.
pub fn segment<T: Scalar>(
    image: &Tensor<T>,
    net_cfg: &NetworkConfig,
    train_cfg: &TrainConfig,
) -> Result<LabelMap> {
    let (output, _) = fit(image, net_cfg, train_cfg)?;
    Ok(extract_label_map(&output.p, train_cfg))
}

/// Hard assignment plus the post-processing [`segment`] applies; split out
/// so callers of [`fit`] can reuse the trace and output.
pub fn extract_label_map<T: Scalar>(p: &AssignmentTensor<T>, train_cfg: &TrainConfig) -> LabelMap {
    let labels = ops::hard_assignment(p);
    let labels = if train_cfg.enforce_connectivity {
        enforce_connectivity(&labels, p.n_superpixels(), train_cfg.min_component_frac)
    } else {
        labels
    };
    labels.compact()
}

/// Merges every 4-connected component smaller than
/// `min_component_frac × (H·W / n_superpixels)` into the adjacent component
/// it shares the longest boundary with (ties: the lower component ID), then
/// gives each surviving component its own label — so every output label is
/// spatially 4-connected. Components are absorbed smallest-first; the pixel
/// sets of components at or above the threshold are never broken up.
pub fn enforce_connectivity(
    labels: &LabelMap,
    n_superpixels: usize,
    min_component_frac: f64,
) -> LabelMap {
    let (h, w) = labels.shape();
    let threshold = min_component_frac * (h * w) as f64 / n_superpixels as f64;
    let mut current = labels.clone();
    loop {
        let comps = connected_components(&current);
        // Smallest undersized component first; scan-order IDs break ties.
        let target = comps
            .sizes
            .iter()
            .enumerate()
            .filter(|&(_, &size)| (size as f64) < threshold)
            .min_by_key(|&(id, &size)| (size, id));
        let Some((comp_id, _)) = target else { break };

        // Count shared boundary edges between the target and each neighbor.
        let mut contact: std::collections::HashMap<u32, u64> = std::collections::HashMap::new();
        for y in 0..h {
            for x in 0..w {
                if comps.ids[y * w + x] != comp_id as u32 {
                    continue;
                }
                let mut tally = |ny: usize, nx: usize| {
                    let other = comps.ids[ny * w + nx];
                    if other != comp_id as u32 {
                        *contact.entry(other).or_insert(0) += 1;
                    }
                };
                if y > 0 {
                    tally(y - 1, x);
                }
                if y + 1 < h {
                    tally(y + 1, x);
                }
                if x > 0 {
                    tally(y, x - 1);
                }
                if x + 1 < w {
                    tally(y, x + 1);
                }
            }
        }
        // An isolated component (the whole image) has nothing to merge into.
        let Some((&absorber, _)) = contact
            .iter()
            .max_by_key(|&(&id, &count)| (count, std::cmp::Reverse(id)))
        else {
            break;
        };
        let new_label = comps.labels[absorber as usize];
        for y in 0..h {
            for x in 0..w {
                if comps.ids[y * w + x] == comp_id as u32 {
                    *current.at_mut(y, x) = new_label;
                }
            }
        }
    }
    // One label per surviving component, in scan order. This is what makes
    // every output label a single 4-connected region, and it already yields
    // compact IDs because component IDs are assigned by first appearance.
    let comps = connected_components(&current);
    let mut out = current;
    for y in 0..h {
        for x in 0..w {
            *out.at_mut(y, x) = comps.ids[y * w + x];
        }
    }
    out
}

struct Components {
    /// Per-pixel component ID, assigned in row-major discovery order.
    ids: Vec<u32>,
    sizes: Vec<usize>,
    /// Original label of each component.
    labels: Vec<u32>,
}

fn connected_components(labels: &LabelMap) -> Components {
    let (h, w) = labels.shape();
    let mut ids = vec![u32::MAX; h * w];
    let mut sizes = Vec::new();
    let mut comp_labels = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if ids[start] != u32::MAX {
            continue;
        }
        let id = sizes.len() as u32;
        let label = labels.labels()[start];
        let mut size = 0usize;
        stack.push(start);
        ids[start] = id;
        while let Some(px) = stack.pop() {
            size += 1;
            let (y, x) = (px / w, px % w);
            let mut visit = |ny: usize, nx: usize| {
                let n = ny * w + nx;
                if ids[n] == u32::MAX && labels.labels()[n] == label {
                    ids[n] = id;
                    stack.push(n);
                }
            };
            if y > 0 {
                visit(y - 1, x);
            }
            if y + 1 < h {
                visit(y + 1, x);
            }
            if x > 0 {
                visit(y, x - 1);
            }
            if x + 1 < w {
                visit(y, x + 1);
            }
        }
        sizes.push(size);
        comp_labels.push(label);
    }
    Components {
        ids,
        sizes,
        labels: comp_labels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::NetworkConfig;

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

    fn quick_train(iterations: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            iterations,
            seed,
            ..TrainConfig::default()
        }
    }

    fn test_image(h: usize, w: usize) -> Tensor<f32> {
        Tensor::from_fn(h, w, 3, |y, x, c| {
            (((y * 13 + x * 7 + c * 29) % 17) as f32 / 16.0).clamp(0.0, 1.0)
        })
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig {
            iterations: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            learning_rate: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            weight_decay: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    /// Adam oracle: three steps on a 1-parameter problem with a constant
    /// gradient of 1. With g=1 every moment estimate equals its bias-corrected
    /// target exactly, so each step moves by lr/(1+ε/√(v̂)) ≈ lr.
    #[test]
    fn adam_matches_hand_computed_steps() {
        let mut data = [0.0f64];
        let mut grad = [1.0f64];
        let mut adam = Adam::new(0.1, 0.0);

        let mut m = 0.0;
        let mut v = 0.0;
        let mut expected = 0.0;
        for t in 1..=3 {
            let mut params = vec![ParamMut {
                name: "x".into(),
                shape: vec![1],
                data: &mut data,
                grad: &mut grad,
            }];
            adam.step(&mut params);

            m = 0.9 * m + 0.1;
            v = 0.999 * v + 0.001;
            let m_hat = m / (1.0 - 0.9f64.powi(t));
            let v_hat = v / (1.0 - 0.999f64.powi(t));
            expected -= 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
            assert!((data[0] - expected).abs() < 1e-15, "step {t}");
        }
    }

    #[test]
    fn adam_minimizes_quadratic() {
        // f(x) = (x - 3)^2 from x = 0.
        let mut data = [0.0f64];
        let mut adam = Adam::new(0.1, 0.0);
        for _ in 0..200 {
            let mut grad = [2.0 * (data[0] - 3.0)];
            let mut params = vec![ParamMut {
                name: "x".into(),
                shape: vec![1],
                data: &mut data,
                grad: &mut grad,
            }];
            adam.step(&mut params);
        }
        assert!((data[0] - 3.0).abs() < 0.05, "got {}", data[0]);
    }

    #[test]
    fn trace_csv_format() {
        let trace = TrainTrace {
            reports: vec![LossReport {
                clustering: 1.0,
                smoothness: 2.0,
                reconstruction: 3.0,
                edge: 4.0,
                total: 10.0,
            }],
            duration: Duration::from_secs(1),
        };
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "iteration,clustering,smoothness,reconstruction,edge,total\n1,1,2,3,4,10\n"
        );
    }

    #[test]
    fn fit_rejects_small_or_non_rgb_images() {
        let small = test_image(8, 8);
        assert!(fit(&small, &tiny_net(4), &quick_train(1, 0)).is_err());
        let gray = Tensor::<f32>::zeros(16, 16, 1);
        assert!(fit(&gray, &tiny_net(4), &quick_train(1, 0)).is_err());
    }

    #[test]
    fn fit_traces_every_iteration_and_is_deterministic() {
        let image = test_image(16, 16);
        let (out_a, trace_a) = fit(&image, &tiny_net(4), &quick_train(3, 7)).unwrap();
        assert_eq!(trace_a.len(), 3);
        assert!(trace_a.reports().iter().all(|r| r.total.is_finite()));

        let (out_b, _) = fit(&image, &tiny_net(4), &quick_train(3, 7)).unwrap();
        assert_eq!(out_a.p.as_tensor().data(), out_b.p.as_tensor().data());

        let (out_c, _) = fit(&image, &tiny_net(4), &quick_train(3, 8)).unwrap();
        assert_ne!(out_a.p.as_tensor().data(), out_c.p.as_tensor().data());
    }

    #[test]
    fn fit_aborts_on_divergence() {
        let image = test_image(16, 16);
        let cfg = TrainConfig {
            iterations: 60,
            learning_rate: 1e18,
            seed: 1,
            ..TrainConfig::default()
        };
        match fit(&image, &tiny_net(4), &cfg) {
            Err(Error::NonFiniteLoss { iteration }) => assert!(iteration >= 1),
            Err(other) => panic!("expected a non-finite loss abort, got {other}"),
            Ok(_) => panic!("expected a non-finite loss abort, training converged"),
        }
    }

    #[test]
    fn segment_label_range() {
        let image = test_image(16, 16);
        let labels = segment(&image, &tiny_net(4), &quick_train(2, 3)).unwrap();
        assert_eq!(labels.shape(), (16, 16));
        assert!(labels.distinct_labels() <= 4);
        // Compacted IDs are contiguous from zero.
        assert_eq!(labels.max_label() as usize + 1, labels.distinct_labels());
    }

    fn is_four_connected(labels: &LabelMap) -> bool {
        let comps = connected_components(labels);
        let mut seen = std::collections::HashSet::new();
        comps.labels.iter().all(|l| seen.insert(*l))
    }

    #[test]
    fn connectivity_merges_small_components() {
        // A 6×6 map: label 0 everywhere, a single stray pixel of label 1 in
        // the middle and a legitimate 1-region on the right.
        let mut labels = LabelMap::new(6, 6);
        *labels.at_mut(2, 2) = 1;
        for y in 0..6 {
            for x in 4..6 {
                *labels.at_mut(y, x) = 1;
            }
        }
        // Threshold: 0.25 × 36/2 = 4.5 → the stray (size 1) merges, the
        // 12-pixel block stays.
        let merged = enforce_connectivity(&labels, 2, 0.25);
        assert_eq!(merged.at(2, 2), merged.at(0, 0));
        assert_eq!(merged.distinct_labels(), 2);
        assert!(is_four_connected(&merged));
        // Pixels of components above the threshold are untouched.
        for y in 0..6 {
            for x in 4..6 {
                assert_eq!(merged.at(y, x), merged.at(0, 5));
            }
        }
    }

    #[test]
    fn connectivity_prefers_largest_boundary() {
        // Stray pixel at (1,1) touches label 0 on three sides and label 1 on
        // one; threshold 2.0 absorbs only the stray (label-1 region has
        // exactly 2 pixels, not below threshold).
        let labels = LabelMap::from_vec(
            3,
            3,
            vec![
                0, 0, 0, //
                0, 2, 1, //
                0, 0, 1,
            ],
        );
        let merged = enforce_connectivity(&labels, 9, 2.0);
        assert_eq!(merged.at(1, 1), merged.at(0, 0));
        assert_eq!(merged.at(1, 2), merged.at(2, 2));
        assert_ne!(merged.at(1, 2), merged.at(0, 0));
        assert!(is_four_connected(&merged));
    }

    #[test]
    fn connectivity_breaks_contact_ties_by_component_id() {
        // The stray at (1,1) has two edges to label 0 (up, left) and two to
        // label 1 (right, down): the tie goes to the component discovered
        // first in scan order, label 0.
        let labels = LabelMap::from_vec(
            3,
            3,
            vec![
                0, 0, 0, //
                0, 2, 1, //
                0, 1, 1,
            ],
        );
        let merged = enforce_connectivity(&labels, 4, 0.9); // threshold 2.025
        assert_eq!(merged.at(1, 1), merged.at(0, 0));
        assert!(is_four_connected(&merged));
    }

    #[test]
    fn connectivity_relabels_disjoint_components() {
        // Label 0 appears as two disjoint columns, both above threshold:
        // each keeps its pixels but gets its own ID so that every output
        // label is one connected region.
        let labels = LabelMap::from_vec(
            4,
            4,
            vec![
                0, 1, 1, 0, //
                0, 1, 1, 0, //
                0, 1, 1, 0, //
                0, 1, 1, 0,
            ],
        );
        let merged = enforce_connectivity(&labels, 16, 1.0); // threshold 1.0
        assert_eq!(merged.distinct_labels(), 3);
        assert!(is_four_connected(&merged));
        assert_eq!(merged.at(0, 0), 0);
        assert_eq!(merged.at(0, 1), 1);
        assert_eq!(merged.at(0, 3), 2);
    }

    #[test]
    fn connectivity_keeps_isolated_small_component() {
        // Whole image below threshold but single component: nothing to do.
        let labels = LabelMap::new(4, 4);
        let merged = enforce_connectivity(&labels, 100, 10.0);
        assert_eq!(merged.distinct_labels(), 1);
    }
}
