//! The composite training objective and its gradients.
//!
//! Four terms steer the per-image optimization: a clustering term pushing
//! every pixel toward a confident assignment while keeping superpixel sizes
//! balanced, an edge-aware smoothness prior on the assignment field, a dual
//! reconstruction term (direct network output and soft superpixelated image),
//! and a KL term matching the edge distribution of the reconstructions to
//! that of the input.
//!
//! All scalar reductions accumulate in `f64` regardless of the tensor element
//! type, so `f32` training reports losses accurate enough to compare against
//! double-precision references. Gradients come back in the tensor's own
//! element type.

use serde::{Deserialize, Serialize};

use crate::ops;
use crate::tensor::{AssignmentTensor, EdgeMap, Scalar, Tensor};
use crate::{Error, Result};

/// Everything is clamped to this floor before a logarithm; keeps hard
/// (one-hot) assignments and degenerate distributions finite.
pub const LOG_EPSILON: f64 = 1e-12;

/// Coefficients of the composite objective
/// `total = clustering + alpha * smoothness + beta * reconstruction + eta * edge`,
/// plus the clustering balance weight `lambda` and the smoothness bandwidth
/// `sigma`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub eta: f64,
    pub sigma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 2.0,
            alpha: 2.0,
            beta: 10.0,
            eta: 1.0,
            sigma: 8.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("lambda", self.lambda),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("eta", self.eta),
            ("sigma", self.sigma),
        ];
        for (name, v) in named {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "loss weight {name} must be finite and non-negative, got {v}"
                )));
            }
        }
        if self.sigma <= 0.0 {
            return Err(Error::Config(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        Ok(())
    }
}

/// Value of each objective term for one evaluation, plus their weighted sum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub clustering: f64,
    pub smoothness: f64,
    pub reconstruction: f64,
    pub edge: f64,
    pub total: f64,
}

impl LossReport {
    fn new(
        clustering: f64,
        smoothness: f64,
        reconstruction: f64,
        edge: f64,
        w: &LossWeights,
    ) -> Self {
        Self {
            clustering,
            smoothness,
            reconstruction,
            edge,
            total: clustering + w.alpha * smoothness + w.beta * reconstruction + w.eta * edge,
        }
    }
}

#[inline]
fn ln_clamped(v: f64) -> f64 {
    v.max(LOG_EPSILON).ln()
}

/// Clustering objective: mean per-pixel assignment entropy plus `lambda`
/// times the negative entropy of the mean assignment vector.
///
/// The first term vanishes exactly when every pixel is deterministic; the
/// second is smallest when superpixels occupy equal area.
pub fn clustering_loss<T: Scalar>(p: &AssignmentTensor<T>, lambda: f64) -> f64 {
    let (h, w, n) = p.as_tensor().shape();
    let hw = (h * w) as f64;
    let pd = p.as_tensor().data();

    let mut entropy = 0.0;
    let mut marginal = vec![0.0_f64; n];
    for px in 0..h * w {
        for s in 0..n {
            let v = pd[px * n + s].into_f64();
            entropy -= v * ln_clamped(v);
            marginal[s] += v;
        }
    }
    let mut neg_marginal_entropy = 0.0;
    for m in &mut marginal {
        *m /= hw;
        neg_marginal_entropy += *m * ln_clamped(*m);
    }
    entropy / hw + lambda * neg_marginal_entropy
}

/// Gradient of [`clustering_loss`] with respect to every `P` entry.
pub fn clustering_loss_backward<T: Scalar>(p: &AssignmentTensor<T>, lambda: f64) -> Tensor<T> {
    let (h, w, n) = p.as_tensor().shape();
    let hw = (h * w) as f64;
    let pd = p.as_tensor().data();

    let mut marginal = vec![0.0_f64; n];
    for px in 0..h * w {
        for s in 0..n {
            marginal[s] += pd[px * n + s].into_f64();
        }
    }
    // d(marginal term)/dP_{p,s} is constant per superpixel.
    let mut marginal_grad = vec![0.0_f64; n];
    for s in 0..n {
        let m = marginal[s] / hw;
        let active = if m > LOG_EPSILON { 1.0 } else { 0.0 };
        marginal_grad[s] = lambda * (ln_clamped(m) + active) / hw;
    }

    let mut grad = Tensor::zeros(h, w, n);
    let gd = grad.data_mut();
    for px in 0..h * w {
        for s in 0..n {
            let v = pd[px * n + s].into_f64();
            let active = if v > LOG_EPSILON { 1.0 } else { 0.0 };
            gd[px * n + s] = T::from_f64((-ln_clamped(v) - active) / hw + marginal_grad[s]);
        }
    }
    grad
}

#[inline]
fn pair_weight<T: Scalar>(
    image: &Tensor<T>,
    ay: usize,
    ax: usize,
    by: usize,
    bx: usize,
    sigma: f64,
) -> f64 {
    let a = image.pixel(ay, ax);
    let b = image.pixel(by, bx);
    let mut d2 = 0.0;
    for ch in 0..image.channels() {
        let d = b[ch].into_f64() - a[ch].into_f64();
        d2 += d * d;
    }
    (-d2 / sigma).exp()
}

/// Edge-aware smoothness: the L1 norm of the assignment field's forward
/// differences, attenuated where the image itself changes
/// (`exp(−‖ΔI‖² / sigma)`), averaged over pixels. Differences to the right
/// and bottom neighbors; the last column/row has none.
pub fn smoothness_loss<T: Scalar>(p: &AssignmentTensor<T>, image: &Tensor<T>, sigma: f64) -> f64 {
    assert_eq!(
        (p.height(), p.width()),
        (image.height(), image.width()),
        "assignment/image shape mismatch"
    );
    assert!(sigma > 0.0, "sigma must be positive");
    let (h, w, n) = p.as_tensor().shape();
    let pd = p.as_tensor().data();
    let mut acc = 0.0_f64;
    for y in 0..h {
        for x in 0..w {
            let base = (y * w + x) * n;
            if x + 1 < w {
                let mut l1 = 0.0;
                for s in 0..n {
                    l1 += (pd[base + n + s].into_f64() - pd[base + s].into_f64()).abs();
                }
                acc += l1 * pair_weight(image, y, x, y, x + 1, sigma);
            }
            if y + 1 < h {
                let mut l1 = 0.0;
                for s in 0..n {
                    l1 += (pd[base + w * n + s].into_f64() - pd[base + s].into_f64()).abs();
                }
                acc += l1 * pair_weight(image, y, x, y + 1, x, sigma);
            }
        }
    }
    acc / (h * w) as f64
}

/// Subgradient of [`smoothness_loss`] with respect to `P` (`sign(0) = 0` at
/// the L1 kinks).
pub fn smoothness_loss_backward<T: Scalar>(
    p: &AssignmentTensor<T>,
    image: &Tensor<T>,
    sigma: f64,
) -> Tensor<T> {
    let (h, w, n) = p.as_tensor().shape();
    let hw = (h * w) as f64;
    let pd = p.as_tensor().data();
    let mut grad = vec![0.0_f64; h * w * n];
    for y in 0..h {
        for x in 0..w {
            let base = (y * w + x) * n;
            if x + 1 < w {
                let wgt = pair_weight(image, y, x, y, x + 1, sigma) / hw;
                for s in 0..n {
                    let d = pd[base + n + s].into_f64() - pd[base + s].into_f64();
                    let sg = if d > 0.0 {
                        wgt
                    } else if d < 0.0 {
                        -wgt
                    } else {
                        0.0
                    };
                    grad[base + n + s] += sg;
                    grad[base + s] -= sg;
                }
            }
            if y + 1 < h {
                let wgt = pair_weight(image, y, x, y + 1, x, sigma) / hw;
                for s in 0..n {
                    let d = pd[base + w * n + s].into_f64() - pd[base + s].into_f64();
                    let sg = if d > 0.0 {
                        wgt
                    } else if d < 0.0 {
                        -wgt
                    } else {
                        0.0
                    };
                    grad[base + w * n + s] += sg;
                    grad[base + s] -= sg;
                }
            }
        }
    }
    Tensor::from_vec(h, w, n, grad.into_iter().map(T::from_f64).collect())
}

/// Dual reconstruction error: mean squared error of the direct reconstruction
/// and of the soft superpixelated image against the input, each normalized by
/// `3·H·W`.
pub fn reconstruction_loss<T: Scalar>(
    image: &Tensor<T>,
    i_rec: &Tensor<T>,
    i_soft: &Tensor<T>,
) -> Result<f64> {
    if image.shape() != i_rec.shape() || image.shape() != i_soft.shape() {
        return Err(Error::ShapeMismatch {
            what: format!(
                "reconstruction_loss expects equal shapes, got {:?}, {:?}, {:?}",
                image.shape(),
                i_rec.shape(),
                i_soft.shape()
            ),
        });
    }
    let mut acc = 0.0_f64;
    for ((&a, &b), &c) in image.data().iter().zip(i_rec.data()).zip(i_soft.data()) {
        let a = a.into_f64();
        let db = b.into_f64() - a;
        let dc = c.into_f64() - a;
        acc += db * db + dc * dc;
    }
    Ok(acc / (3 * image.pixels()) as f64)
}

/// Gradients of [`reconstruction_loss`] with respect to `i_rec` and `i_soft`.
pub fn reconstruction_loss_backward<T: Scalar>(
    image: &Tensor<T>,
    i_rec: &Tensor<T>,
    i_soft: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let scale = 2.0 / (3 * image.pixels()) as f64;
    let (h, w, c) = image.shape();
    let make = |rec: &Tensor<T>| {
        let data = rec
            .data()
            .iter()
            .zip(image.data())
            .map(|(&r, &i)| T::from_f64(scale * (r.into_f64() - i.into_f64())))
            .collect();
        Tensor::from_vec(h, w, c, data)
    };
    (make(i_rec), make(i_soft))
}

/// Sum of the KL divergences from the input's edge distribution to those of
/// the two reconstructions: `KL(E_I‖E_rec) + KL(E_I‖E_soft)` in nats.
pub fn edge_loss<T: Scalar>(e_i: &EdgeMap<T>, e_rec: &EdgeMap<T>, e_soft: &EdgeMap<T>) -> f64 {
    assert_eq!((e_i.height(), e_i.width()), (e_rec.height(), e_rec.width()));
    assert_eq!(
        (e_i.height(), e_i.width()),
        (e_soft.height(), e_soft.width())
    );
    let kl = |q: &EdgeMap<T>| -> f64 {
        e_i.probabilities()
            .iter()
            .zip(q.probabilities())
            .map(|(&p, &q)| {
                let p = p.into_f64();
                p * (ln_clamped(p) - ln_clamped(q.into_f64()))
            })
            .sum()
    };
    kl(e_rec) + kl(e_soft)
}

/// Gradient of `KL(e_i ‖ edge_distribution(t))` with respect to the image
/// `t` itself (the softmax and the Laplacian are folded in analytically:
/// the pre-softmax gradient is simply `E − E_I`).
pub fn edge_kl_image_gradient<T: Scalar>(
    e_i: &EdgeMap<T>,
    e: &EdgeMap<T>,
    channels: usize,
) -> Tensor<T> {
    let (h, w) = (e_i.height(), e_i.width());
    let dz = Tensor::from_vec(
        h,
        w,
        1,
        e.probabilities()
            .iter()
            .zip(e_i.probabilities())
            .map(|(&ev, &pv)| ev - pv)
            .collect(),
    );
    let g = ops::laplacian_response_backward(&dz);
    let inv_c = T::from_f64(1.0 / channels as f64);
    Tensor::from_fn(h, w, channels, |y, x, _| g.at(y, x, 0) * inv_c)
}

/// Evaluates all four terms and the weighted total. The soft superpixelated
/// image and the three edge distributions are derived internally from `p`,
/// `image`, and `i_rec`.
pub fn total_objective<T: Scalar>(
    p: &AssignmentTensor<T>,
    image: &Tensor<T>,
    i_rec: &Tensor<T>,
    weights: &LossWeights,
) -> Result<LossReport> {
    let i_soft = ops::soft_superpixelated_image(p, image);
    let e_i = ops::edge_distribution(image);
    let e_rec = ops::edge_distribution(i_rec);
    let e_soft = ops::edge_distribution(&i_soft);
    Ok(LossReport::new(
        clustering_loss(p, weights.lambda),
        smoothness_loss(p, image, weights.sigma),
        reconstruction_loss(image, i_rec, &i_soft)?,
        edge_loss(&e_i, &e_rec, &e_soft),
        weights,
    ))
}

/// [`total_objective`] plus gradients of the total with respect to `p` and
/// `i_rec`. One call per optimizer step.
pub fn total_objective_with_grad<T: Scalar>(
    p: &AssignmentTensor<T>,
    image: &Tensor<T>,
    i_rec: &Tensor<T>,
    weights: &LossWeights,
) -> Result<(LossReport, Tensor<T>, Tensor<T>)> {
    let colors = ops::soft_superpixel_colors(p, image);
    let i_soft = ops::soft_superpixelated_image_with_colors(p, &colors);
    let e_i = ops::edge_distribution(image);
    let e_rec = ops::edge_distribution(i_rec);
    let e_soft = ops::edge_distribution(&i_soft);

    let report = LossReport::new(
        clustering_loss(p, weights.lambda),
        smoothness_loss(p, image, weights.sigma),
        reconstruction_loss(image, i_rec, &i_soft)?,
        edge_loss(&e_i, &e_rec, &e_soft),
        weights,
    );

    // dTotal/dP: clustering + alpha * smoothness directly, plus both paths
    // that flow through the soft superpixelated image.
    let mut d_p = clustering_loss_backward(p, weights.lambda);
    if weights.alpha != 0.0 {
        d_p.add_scaled(
            &smoothness_loss_backward(p, image, weights.sigma),
            T::from_f64(weights.alpha),
        );
    }

    let (d_rec_mse, d_soft_mse) = reconstruction_loss_backward(image, i_rec, &i_soft);
    let mut d_soft = d_soft_mse.map(|v| v * T::from_f64(weights.beta));
    if weights.eta != 0.0 {
        d_soft.add_scaled(
            &edge_kl_image_gradient(&e_i, &e_soft, 3),
            T::from_f64(weights.eta),
        );
    }
    d_p.add_scaled(
        &ops::soft_superpixelated_image_backward(p, image, &colors, &d_soft),
        T::one(),
    );

    let mut d_i_rec = d_rec_mse.map(|v| v * T::from_f64(weights.beta));
    if weights.eta != 0.0 {
        d_i_rec.add_scaled(
            &edge_kl_image_gradient(&e_i, &e_rec, 3),
            T::from_f64(weights.eta),
        );
    }

    Ok((report, d_p, d_i_rec))
}
