//! Instance normalization: per-channel spatial standardization with a
//! learned affine transform, as used after every convolution in this model.

use crate::tensor::{Scalar, Tensor};

const NORM_EPSILON: f64 = 1e-5;

/// Per-channel `y = γ · (x − μ) / √(σ² + ε) + β` over the spatial extent of
/// a single image. γ starts at 1, β at 0.
pub struct InstanceNorm<T> {
    channels: usize,
    pub(crate) gamma: Vec<T>,
    pub(crate) beta: Vec<T>,
    pub(crate) gamma_grad: Vec<T>,
    pub(crate) beta_grad: Vec<T>,
}

/// Values the backward pass needs from the forward pass: the standardized
/// activations and each channel's inverse standard deviation.
pub struct NormCache<T> {
    pub x_hat: Tensor<T>,
    pub inv_std: Vec<f64>,
}

impl<T: Scalar> InstanceNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            gamma_grad: vec![T::zero(); channels],
            beta_grad: vec![T::zero(); channels],
        }
    }

    pub fn forward(&self, input: &Tensor<T>) -> (Tensor<T>, NormCache<T>) {
        let (h, w, c) = input.shape();
        assert_eq!(c, self.channels, "channel mismatch");
        let hw = (h * w) as f64;

        // Statistics in f64: mean cancellation in long f32 sums is exactly
        // the kind of noise that breaks the mean-0/var-1 contract.
        let mut mean = vec![0.0_f64; c];
        for px in 0..h * w {
            for (ch, m) in mean.iter_mut().enumerate() {
                *m += input.data()[px * c + ch].into_f64();
            }
        }
        for m in &mut mean {
            *m /= hw;
        }
        let mut var = vec![0.0_f64; c];
        for px in 0..h * w {
            for ch in 0..c {
                let d = input.data()[px * c + ch].into_f64() - mean[ch];
                var[ch] += d * d;
            }
        }
        let inv_std: Vec<f64> = var
            .iter()
            .map(|v| 1.0 / (v / hw + NORM_EPSILON).sqrt())
            .collect();

        let mut x_hat = Tensor::zeros(h, w, c);
        let mut out = Tensor::zeros(h, w, c);
        for px in 0..h * w {
            for ch in 0..c {
                let xh = (input.data()[px * c + ch].into_f64() - mean[ch]) * inv_std[ch];
                let xh_t = T::from_f64(xh);
                x_hat.data_mut()[px * c + ch] = xh_t;
                out.data_mut()[px * c + ch] = self.gamma[ch] * xh_t + self.beta[ch];
            }
        }
        (out, NormCache { x_hat, inv_std })
    }

    /// Input gradient; also accumulates γ/β gradients. Since μ and σ depend
    /// on every pixel, the input gradient couples the whole channel:
    ///
    /// ```text
    /// dx = γ · inv_std · (dy − mean(dy) − x̂ · mean(dy ⊙ x̂))
    /// ```
    pub fn backward(&mut self, cache: &NormCache<T>, d_out: &Tensor<T>) -> Tensor<T> {
        let (h, w, c) = d_out.shape();
        assert_eq!(c, self.channels);
        let hw = (h * w) as f64;

        let mut sum_dy = vec![0.0_f64; c];
        let mut sum_dy_xhat = vec![0.0_f64; c];
        for px in 0..h * w {
            for ch in 0..c {
                let dy = d_out.data()[px * c + ch].into_f64();
                sum_dy[ch] += dy;
                sum_dy_xhat[ch] += dy * cache.x_hat.data()[px * c + ch].into_f64();
            }
        }
        for ch in 0..c {
            self.beta_grad[ch] += T::from_f64(sum_dy[ch]);
            self.gamma_grad[ch] += T::from_f64(sum_dy_xhat[ch]);
        }

        let mean_dy: Vec<f64> = sum_dy.iter().map(|v| v / hw).collect();
        let mean_dy_xhat: Vec<f64> = sum_dy_xhat.iter().map(|v| v / hw).collect();
        let mut d_in = Tensor::zeros(h, w, c);
        for px in 0..h * w {
            for ch in 0..c {
                let dy = d_out.data()[px * c + ch].into_f64();
                let xh = cache.x_hat.data()[px * c + ch].into_f64();
                let g = self.gamma[ch].into_f64() * cache.inv_std[ch];
                d_in.data_mut()[px * c + ch] =
                    T::from_f64(g * (dy - mean_dy[ch] - xh * mean_dy_xhat[ch]));
            }
        }
        d_in
    }

    pub fn zero_grad(&mut self) {
        self.gamma_grad.iter_mut().for_each(|g| *g = T::zero());
        self.beta_grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn standardizes_each_channel() {
        let mut rng = StdRng::seed_from_u64(1);
        let input = Tensor::<f64>::from_fn(6, 5, 3, |_, _, ch| {
            rng.gen_range(-1.0..1.0) * (ch + 1) as f64 + ch as f64
        });
        let norm = InstanceNorm::new(3);
        let (out, cache) = norm.forward(&input);
        for ch in 0..3 {
            let mean = cache.x_hat.channel_mean(ch);
            let var = cache.x_hat.channel_variance(ch);
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4, "variance {var}");
        }
        // γ=1, β=0 at init: output equals x̂.
        for (a, b) in out.data().iter().zip(cache.x_hat.data()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(2);
        let input = Tensor::<f64>::from_fn(4, 4, 2, |_, _, _| rng.gen_range(-1.0..1.0));
        let mut norm = InstanceNorm::new(2);
        for g in norm.gamma.iter_mut() {
            *g = rng.gen_range(0.5..1.5);
        }
        for b in norm.beta.iter_mut() {
            *b = rng.gen_range(-0.5..0.5);
        }
        let obj_w = Tensor::<f64>::from_fn(4, 4, 2, |_, _, _| rng.gen_range(-1.0..1.0));
        let objective = |norm: &InstanceNorm<f64>, input: &Tensor<f64>| -> f64 {
            norm.forward(input)
                .0
                .data()
                .iter()
                .zip(obj_w.data())
                .map(|(a, b)| a * b)
                .sum()
        };

        let (_, cache) = norm.forward(&input);
        norm.zero_grad();
        let d_in = norm.backward(&cache, &obj_w);

        let h = 1e-6;
        for idx in 0..input.data().len() {
            let mut plus = input.clone();
            plus.data_mut()[idx] += h;
            let mut minus = input.clone();
            minus.data_mut()[idx] -= h;
            let fd = (objective(&norm, &plus) - objective(&norm, &minus)) / (2.0 * h);
            assert!((d_in.data()[idx] - fd).abs() < 1e-7, "d_in[{idx}]");
        }
        for ch in 0..2 {
            let orig = norm.gamma[ch];
            norm.gamma[ch] = orig + h;
            let up = objective(&norm, &input);
            norm.gamma[ch] = orig - h;
            let down = objective(&norm, &input);
            norm.gamma[ch] = orig;
            assert!((norm.gamma_grad[ch] - (up - down) / (2.0 * h)).abs() < 1e-7);

            let orig = norm.beta[ch];
            norm.beta[ch] = orig + h;
            let up = objective(&norm, &input);
            norm.beta[ch] = orig - h;
            let down = objective(&norm, &input);
            norm.beta[ch] = orig;
            assert!((norm.beta_grad[ch] - (up - down) / (2.0 * h)).abs() < 1e-7);
        }
    }
}
