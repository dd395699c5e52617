//! Superpixel operators: Laplacian responses, soft/hard superpixelated
//! images, hard assignment, and spatial edge distributions.
//!
//! Everything here is a pure function. The differentiable operators come in
//! pairs, `foo` and `foo_backward`, where the backward function maps the
//! gradient of some scalar objective with respect to `foo`'s output to the
//! gradient with respect to its input. The derivations are short but easy to
//! get wrong, so each has a finite-difference test below.

use crate::tensor::{AssignmentTensor, EdgeMap, LabelMap, Scalar, SuperpixelColors, Tensor};

/// Guard for the soft-color denominator: a superpixel whose total soft mass
/// falls below this is treated as empty (its mean color tends to zero).
pub const MASS_EPSILON: f64 = 1e-8;

/// Per-channel response to the 4-neighbor discrete Laplacian
/// `[[0,1,0],[1,-4,1],[0,1,0]]` with replicate (edge-clamp) padding.
///
/// Output shape equals input shape. Constant images map to zero; so do
/// linear ramps away from the border.
pub fn laplacian_response<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let (h, w, c) = t.shape();
    let mut out = Tensor::zeros(h, w, c);
    let four = T::from_f64(4.0);
    for y in 0..h {
        let up = y.saturating_sub(1);
        let down = (y + 1).min(h - 1);
        for x in 0..w {
            let left = x.saturating_sub(1);
            let right = (x + 1).min(w - 1);
            for ch in 0..c {
                let v =
                    t.at(up, x, ch) + t.at(down, x, ch) + t.at(y, left, ch) + t.at(y, right, ch)
                        - four * t.at(y, x, ch);
                *out.at_mut(y, x, ch) = v;
            }
        }
    }
    out
}

/// Adjoint of [`laplacian_response`].
///
/// The stencil is symmetric, so away from borders this is the same 5-point
/// correlation of `d_out` (with zero padding — positions outside the output
/// grid contribute nothing). Replicate padding additionally makes each border
/// pixel serve as its own out-of-range neighbor, which folds `d_out`'s border
/// rows/columns back in once per clamped side (corners twice).
pub fn laplacian_response_backward<T: Scalar>(d_out: &Tensor<T>) -> Tensor<T> {
    let (h, w, c) = d_out.shape();
    let mut d_in = Tensor::zeros(h, w, c);
    let four = T::from_f64(4.0);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut v = -four * d_out.at(y, x, ch);
                if y > 0 {
                    v += d_out.at(y - 1, x, ch);
                }
                if y + 1 < h {
                    v += d_out.at(y + 1, x, ch);
                }
                if x > 0 {
                    v += d_out.at(y, x - 1, ch);
                }
                if x + 1 < w {
                    v += d_out.at(y, x + 1, ch);
                }
                // Replicate-padding folds: each clamped tap of a border
                // output reads the border pixel itself (a 1-pixel-wide axis
                // clamps both ways, folding twice).
                if y == 0 {
                    v += d_out.at(y, x, ch);
                }
                if y == h - 1 {
                    v += d_out.at(y, x, ch);
                }
                if x == 0 {
                    v += d_out.at(y, x, ch);
                }
                if x == w - 1 {
                    v += d_out.at(y, x, ch);
                }
                *d_in.at_mut(y, x, ch) = v;
            }
        }
    }
    d_in
}

/// Mass-weighted mean color of every superpixel under soft assignments.
///
/// `colors[s] = (Σ_{h,w} P_{h,w,s} · I_{h,w}) / max(Σ_{h,w} P_{h,w,s}, ε)`.
/// Empty superpixels (mass below ε) get colors that tend to zero, since
/// their numerators vanish along with the mass.
pub fn soft_superpixel_colors<T: Scalar>(
    p: &AssignmentTensor<T>,
    image: &Tensor<T>,
) -> SuperpixelColors<T> {
    assert_eq!(
        (p.height(), p.width()),
        (image.height(), image.width()),
        "assignment/image shape mismatch"
    );
    assert_eq!(image.channels(), 3, "expected an RGB image");
    let n = p.n_superpixels();
    let hw = p.height() * p.width();

    // colors_raw = P^T (N x HW) * I (HW x 3)
    let mut colors = vec![T::zero(); n * 3];
    unsafe {
        T::gemm(
            n,
            hw,
            3,
            T::one(),
            p.as_tensor().data().as_ptr(),
            1,
            n as isize,
            image.data().as_ptr(),
            3,
            1,
            T::zero(),
            colors.as_mut_ptr(),
            3,
            1,
        );
    }

    // Masses accumulate in f64: they feed loss normalizers and the
    // sum-to-H*W invariant, and HW terms of f32 rounding would show.
    let mut masses_acc = vec![0.0_f64; n];
    let pd = p.as_tensor().data();
    for px in 0..hw {
        for s in 0..n {
            masses_acc[s] += pd[px * n + s].into_f64();
        }
    }
    let masses: Vec<T> = masses_acc.iter().map(|&m| T::from_f64(m)).collect();
    for s in 0..n {
        let denom = T::from_f64(masses_acc[s].max(MASS_EPSILON));
        for ch in 0..3 {
            colors[s * 3 + ch] /= denom;
        }
    }
    SuperpixelColors { colors, masses }
}

/// Soft superpixelated image: every pixel becomes the assignment-weighted
/// blend of the superpixel mean colors, `Î_{i,j} = Σ_s P_{i,j,s} · colors_s`.
///
/// Under one-hot assignments this reduces exactly to
/// [`hard_superpixelated_image`].
pub fn soft_superpixelated_image<T: Scalar>(
    p: &AssignmentTensor<T>,
    image: &Tensor<T>,
) -> Tensor<T> {
    let colors = soft_superpixel_colors(p, image);
    soft_superpixelated_image_with_colors(p, &colors)
}

/// The blend step of [`soft_superpixelated_image`] with precomputed colors.
pub fn soft_superpixelated_image_with_colors<T: Scalar>(
    p: &AssignmentTensor<T>,
    colors: &SuperpixelColors<T>,
) -> Tensor<T> {
    let (h, w, n) = p.as_tensor().shape();
    let hw = h * w;
    let mut out = Tensor::zeros(h, w, 3);
    // Î (HW x 3) = P (HW x N) * colors (N x 3)
    unsafe {
        T::gemm(
            hw,
            n,
            3,
            T::one(),
            p.as_tensor().data().as_ptr(),
            n as isize,
            1,
            colors.colors.as_ptr(),
            3,
            1,
            T::zero(),
            out.data_mut().as_mut_ptr(),
            3,
            1,
        );
    }
    out
}

/// Gradient of a scalar objective with respect to `P`, given its gradient
/// `d_soft` with respect to [`soft_superpixelated_image`]'s output.
///
/// Two paths contribute: the blend uses `P` directly, and each mean color is
/// itself a `P`-weighted average. With `m̃_s = max(mass_s, ε)`,
///
/// ```text
/// dP_{p,s} = d_soft_p · c_s  +  (dC_s · (I_p − c_s)) / m̃_s
/// ```
///
/// where `dC_s = Σ_p P_{p,s} d_soft_p` and the `− c_s` term drops for empty
/// superpixels (the max() guard zeroes the mass derivative there).
pub fn soft_superpixelated_image_backward<T: Scalar>(
    p: &AssignmentTensor<T>,
    image: &Tensor<T>,
    colors: &SuperpixelColors<T>,
    d_soft: &Tensor<T>,
) -> Tensor<T> {
    let (h, w, n) = p.as_tensor().shape();
    let hw = h * w;
    assert_eq!(d_soft.shape(), (h, w, 3));

    // dC (N x 3) = P^T * d_soft
    let mut d_colors = vec![T::zero(); n * 3];
    unsafe {
        T::gemm(
            n,
            hw,
            3,
            T::one(),
            p.as_tensor().data().as_ptr(),
            1,
            n as isize,
            d_soft.data().as_ptr(),
            3,
            1,
            T::zero(),
            d_colors.as_mut_ptr(),
            3,
            1,
        );
    }

    // Per-superpixel pieces: scaled = dC_s/m̃_s (feeds the I_p term) and
    // bias_s = dC_s·c_s/m̃_s (the −c_s term, zeroed for empty superpixels).
    let mut scaled = vec![T::zero(); n * 3];
    let mut bias = vec![T::zero(); n];
    for s in 0..n {
        let m = colors.masses[s].into_f64();
        let denom = T::from_f64(m.max(MASS_EPSILON));
        let mut dot = T::zero();
        for ch in 0..3 {
            let sc = d_colors[s * 3 + ch] / denom;
            scaled[s * 3 + ch] = sc;
            if m > MASS_EPSILON {
                dot += sc * colors.colors[s * 3 + ch];
            }
        }
        bias[s] = dot;
    }

    // dP = d_soft * C^T + I * scaled^T − bias (broadcast over pixels)
    let mut d_p = Tensor::zeros(h, w, n);
    unsafe {
        T::gemm(
            hw,
            3,
            n,
            T::one(),
            d_soft.data().as_ptr(),
            3,
            1,
            colors.colors.as_ptr(),
            1,
            3,
            T::zero(),
            d_p.data_mut().as_mut_ptr(),
            n as isize,
            1,
        );
        T::gemm(
            hw,
            3,
            n,
            T::one(),
            image.data().as_ptr(),
            3,
            1,
            scaled.as_ptr(),
            1,
            3,
            T::one(),
            d_p.data_mut().as_mut_ptr(),
            n as isize,
            1,
        );
    }
    let dp = d_p.data_mut();
    for px in 0..hw {
        for s in 0..n {
            dp[px * n + s] -= bias[s];
        }
    }
    d_p
}

/// Per-pixel argmax over the superpixel axis; ties break to the lowest index.
pub fn hard_assignment<T: Scalar>(p: &AssignmentTensor<T>) -> LabelMap {
    let (h, w, n) = p.as_tensor().shape();
    let mut labels = LabelMap::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let row = p.as_tensor().pixel(y, x);
            let mut best = 0usize;
            for s in 1..n {
                if row[s] > row[best] {
                    best = s;
                }
            }
            *labels.at_mut(y, x) = best as u32;
        }
    }
    labels
}

/// Hard superpixelated image: every pixel replaced by the mean color of the
/// pixels sharing its label.
pub fn hard_superpixelated_image<T: Scalar>(labels: &LabelMap, image: &Tensor<T>) -> Tensor<T> {
    assert_eq!(
        labels.shape(),
        (image.height(), image.width()),
        "label/image shape mismatch"
    );
    assert_eq!(image.channels(), 3, "expected an RGB image");
    let n = labels.max_label() as usize + 1;
    let mut sums = vec![0.0_f64; n * 3];
    let mut counts = vec![0u64; n];
    let (h, w, _) = image.shape();
    for y in 0..h {
        for x in 0..w {
            let l = labels.at(y, x) as usize;
            counts[l] += 1;
            for ch in 0..3 {
                sums[l * 3 + ch] += image.at(y, x, ch).into_f64();
            }
        }
    }
    let mut means = vec![T::zero(); n * 3];
    for l in 0..n {
        if counts[l] > 0 {
            for ch in 0..3 {
                means[l * 3 + ch] = T::from_f64(sums[l * 3 + ch] / counts[l] as f64);
            }
        }
    }
    Tensor::from_fn(h, w, 3, |y, x, ch| means[labels.at(y, x) as usize * 3 + ch])
}

/// Mean over channels of the Laplacian response, as an `H x W x 1` tensor.
/// This is the pre-softmax edge strength used by [`edge_distribution`].
pub fn mean_channel_laplacian<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let lap = laplacian_response(t);
    let (h, w, c) = lap.shape();
    let inv_c = T::from_f64(1.0 / c as f64);
    Tensor::from_fn(h, w, 1, |y, x, _| {
        let mut acc = T::zero();
        for ch in 0..c {
            acc += lap.at(y, x, ch);
        }
        acc * inv_c
    })
}

/// Spatial edge distribution: softmax over all pixel positions of the
/// mean-channel Laplacian response. Entries are strictly positive and sum
/// to one; a constant image yields the uniform distribution.
pub fn edge_distribution<T: Scalar>(t: &Tensor<T>) -> EdgeMap<T> {
    let z = mean_channel_laplacian(t);
    let (h, w, _) = z.shape();
    let zd = z.data();
    let mut max = f64::NEG_INFINITY;
    for &v in zd {
        max = max.max(v.into_f64());
    }
    let mut exps = vec![T::zero(); h * w];
    let mut sum = 0.0_f64;
    for (e, &v) in exps.iter_mut().zip(zd) {
        let x = (v.into_f64() - max).exp();
        *e = T::from_f64(x);
        sum += x;
    }
    let inv = T::from_f64(1.0 / sum);
    for e in &mut exps {
        *e *= inv;
    }
    EdgeMap::from_softmax(h, w, exps)
}
