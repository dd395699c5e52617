//! 2-D convolution over channels-last tensors, built on strided GEMM.
//!
//! A `k x k` convolution with dilation `d` and padding `d·(k−1)/2` (shape
//! preserving, zero padded) decomposes into one matrix product per kernel
//! tap: for tap offset `(oy, ox)`, every valid output row segment is
//! `out[y, x0..x1] += in[y+oy, x0+ox..x1+ox] · W_tap`, a `(seg x Cin) ·
//! (Cin x Cout)` product on slices that are already contiguous in the
//! channels-last layout. No im2col buffer is ever materialized, and the same
//! trick runs the two backward passes (input gradient via `W_tapᵀ`, weight
//! gradient via the activationᵀ · output-gradient product).

use rand::Rng;
use rayon::prelude::*;

use crate::tensor::{Scalar, Tensor};

/// Convolution layer with bias. Weights are stored `[tap][in][out]` so each
/// tap is a ready-to-use `Cin x Cout` GEMM operand.
pub struct Conv2d<T> {
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    dilation: usize,
    pub(crate) weight: Vec<T>,
    pub(crate) bias: Vec<T>,
    pub(crate) weight_grad: Vec<T>,
    pub(crate) bias_grad: Vec<T>,
}

impl<T: Scalar> Conv2d<T> {
    /// He-uniform initialization: `U(−b, b)` with `b = √(6 / fan_in)`,
    /// biases zero.
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        dilation: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(
            kernel == 1 || kernel == 3,
            "only 1x1 and 3x3 kernels are used"
        );
        assert!(dilation >= 1);
        let taps = kernel * kernel;
        let fan_in = (taps * in_channels) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let weight = (0..taps * in_channels * out_channels)
            .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
            .collect();
        Self {
            in_channels,
            out_channels,
            kernel,
            dilation,
            weight,
            bias: vec![T::zero(); out_channels],
            weight_grad: vec![T::zero(); taps * in_channels * out_channels],
            bias_grad: vec![T::zero(); out_channels],
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// Kernel tap offsets relative to the output position.
    fn taps(&self) -> Vec<(isize, isize)> {
        let r = (self.kernel / 2) as isize;
        let d = self.dilation as isize;
        let mut taps = Vec::with_capacity(self.kernel * self.kernel);
        for ty in -r..=r {
            for tx in -r..=r {
                taps.push((ty * d, tx * d));
            }
        }
        taps
    }

    pub fn forward(&self, input: &Tensor<T>) -> Tensor<T> {
        let (h, w, cin) = input.shape();
        assert_eq!(cin, self.in_channels, "input channel mismatch");
        let cout = self.out_channels;
        let taps = self.taps();
        let mut out = Tensor::zeros(h, w, cout);

        out.data_mut()
            .par_chunks_mut(w * cout)
            .enumerate()
            .for_each(|(y, out_row)| {
                for px in 0..w {
                    out_row[px * cout..(px + 1) * cout].copy_from_slice(&self.bias);
                }
                for (t, &(oy, ox)) in taps.iter().enumerate() {
                    let iy = y as isize + oy;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    // Output columns whose tap source stays inside the row.
                    let x0 = 0.max(-ox) as usize;
                    let x1 = (w as isize).min(w as isize - ox) as usize;
                    if x0 >= x1 {
                        continue;
                    }
                    let src = &input.row(iy as usize)[((x0 as isize + ox) as usize) * cin..];
                    let w_tap = &self.weight[t * cin * cout..];
                    unsafe {
                        T::gemm(
                            x1 - x0,
                            cin,
                            cout,
                            T::one(),
                            src.as_ptr(),
                            cin as isize,
                            1,
                            w_tap.as_ptr(),
                            cout as isize,
                            1,
                            T::one(),
                            out_row[x0 * cout..].as_mut_ptr(),
                            cout as isize,
                            1,
                        );
                    }
                }
            });
        out
    }

    /// Input gradient: `d_in[a, b] = Σ_tap d_out[a−oy, b−ox] · W_tapᵀ`.
    pub fn backward_input(&self, d_out: &Tensor<T>) -> Tensor<T> {
        let (h, w, cout) = d_out.shape();
        assert_eq!(cout, self.out_channels);
        let cin = self.in_channels;
        let taps = self.taps();
        let mut d_in = Tensor::zeros(h, w, cin);

        d_in.data_mut()
            .par_chunks_mut(w * cin)
            .enumerate()
            .for_each(|(a, din_row)| {
                for (t, &(oy, ox)) in taps.iter().enumerate() {
                    let y = a as isize - oy;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    // Input columns b = x + ox for the tap's valid x range.
                    let b0 = 0.max(ox) as usize;
                    let b1 = (w as isize).min(w as isize + ox) as usize;
                    if b0 >= b1 {
                        continue;
                    }
                    let src = &d_out.row(y as usize)[((b0 as isize - ox) as usize) * cout..];
                    let w_tap = &self.weight[t * cin * cout..];
                    unsafe {
                        T::gemm(
                            b1 - b0,
                            cout,
                            cin,
                            T::one(),
                            src.as_ptr(),
                            cout as isize,
                            1,
                            // W_tap is Cin x Cout row-major; strides (1, cout)
                            // read its transpose.
                            w_tap.as_ptr(),
                            1,
                            cout as isize,
                            T::one(),
                            din_row[b0 * cin..].as_mut_ptr(),
                            cin as isize,
                            1,
                        );
                    }
                }
            });
        d_in
    }

    /// Accumulates weight and bias gradients (into `weight_grad`/`bias_grad`)
    /// for this layer given the input it saw and the output gradient.
    pub fn backward_params(&mut self, input: &Tensor<T>, d_out: &Tensor<T>) {
        let (h, w, cin) = input.shape();
        let cout = self.out_channels;
        assert_eq!(d_out.shape(), (h, w, cout));
        let taps = self.taps();

        // Taps own disjoint slices of the weight gradient, so they are the
        // parallel axis; rows accumulate serially within a tap, keeping the
        // result independent of thread scheduling.
        self.weight_grad
            .par_chunks_mut(cin * cout)
            .enumerate()
            .for_each(|(t, dw_tap)| {
                let (oy, ox) = taps[t];
                for y in 0..h {
                    let iy = y as isize + oy;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let x0 = 0.max(-ox) as usize;
                    let x1 = (w as isize).min(w as isize - ox) as usize;
                    if x0 >= x1 {
                        continue;
                    }
                    let src = &input.row(iy as usize)[((x0 as isize + ox) as usize) * cin..];
                    let dy = &d_out.row(y)[x0 * cout..];
                    unsafe {
                        // dW_tap (Cin x Cout) += srcᵀ (Cin x seg) · dy (seg x Cout)
                        T::gemm(
                            cin,
                            x1 - x0,
                            cout,
                            T::one(),
                            src.as_ptr(),
                            1,
                            cin as isize,
                            dy.as_ptr(),
                            cout as isize,
                            1,
                            T::one(),
                            dw_tap.as_mut_ptr(),
                            cout as isize,
                            1,
                        );
                    }
                }
            });

        // Bias gradient: plain per-channel sum, accumulated in f64 so the
        // result does not depend on summation order tricks.
        let mut acc = vec![0.0_f64; cout];
        for px in 0..h * w {
            let row = &d_out.data()[px * cout..(px + 1) * cout];
            for (a, &g) in acc.iter_mut().zip(row) {
                *a += g.into_f64();
            }
        }
        for (bg, a) in self.bias_grad.iter_mut().zip(acc) {
            *bg += T::from_f64(a);
        }
    }

    pub fn zero_grad(&mut self) {
        self.weight_grad.iter_mut().for_each(|g| *g = T::zero());
        self.bias_grad.iter_mut().for_each(|g| *g = T::zero());
    }

    /// Weight tensor shape as `[k, k, in, out]` (for serialization headers).
    pub fn weight_shape(&self) -> Vec<usize> {
        vec![
            self.kernel,
            self.kernel,
            self.in_channels,
            self.out_channels,
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    /// Direct (quintuple-loop) convolution for comparison.
    fn naive_conv(
        input: &Tensor<f64>,
        weight: &[f64],
        bias: &[f64],
        cout: usize,
        kernel: usize,
        dilation: usize,
    ) -> Tensor<f64> {
        let (h, w, cin) = input.shape();
        let r = (kernel / 2) as isize;
        let mut out = Tensor::zeros(h, w, cout);
        for y in 0..h as isize {
            for x in 0..w as isize {
                for co in 0..cout {
                    let mut acc = bias[co];
                    let mut t = 0;
                    for ty in -r..=r {
                        for tx in -r..=r {
                            let iy = y + ty * dilation as isize;
                            let ix = x + tx * dilation as isize;
                            if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                for ci in 0..cin {
                                    acc += input.at(iy as usize, ix as usize, ci)
                                        * weight[(t * cin + ci) * cout + co];
                                }
                            }
                            t += 1;
                        }
                    }
                    *out.at_mut(y as usize, x as usize, co) = acc;
                }
            }
        }
        out
    }

    #[test]
    fn forward_matches_naive_for_all_dilations() {
        let mut rng = StdRng::seed_from_u64(1);
        for dilation in [1usize, 2, 4, 8] {
            let mut conv = Conv2d::<f64>::new(3, 4, 3, dilation, &mut rng);
            for b in conv.bias.iter_mut() {
                *b = rng.gen_range(-0.5..0.5);
            }
            let input = Tensor::from_fn(9, 11, 3, |_, _, _| rng.gen_range(-1.0..1.0));
            let got = conv.forward(&input);
            let want = naive_conv(&input, &conv.weight, &conv.bias, 4, 3, dilation);
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12, "dilation {dilation}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn one_by_one_matches_naive() {
        let mut rng = StdRng::seed_from_u64(2);
        let conv = Conv2d::<f64>::new(5, 3, 1, 1, &mut rng);
        let input = Tensor::from_fn(4, 6, 5, |_, _, _| rng.gen_range(-1.0..1.0));
        let got = conv.forward(&input);
        let want = naive_conv(&input, &conv.weight, &conv.bias, 3, 1, 1);
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(3);
        for (kernel, dilation) in [(3usize, 1usize), (3, 2), (1, 1)] {
            let mut conv = Conv2d::<f64>::new(2, 3, kernel, dilation, &mut rng);
            let input = Tensor::from_fn(5, 6, 2, |_, _, _| rng.gen_range(-1.0..1.0));
            // Objective: weighted sum of outputs.
            let obj_w = Tensor::from_fn(5, 6, 3, |_, _, _| rng.gen_range(-1.0..1.0));
            let objective = |conv: &Conv2d<f64>, input: &Tensor<f64>| -> f64 {
                conv.forward(input)
                    .data()
                    .iter()
                    .zip(obj_w.data())
                    .map(|(a, b)| a * b)
                    .sum()
            };

            conv.zero_grad();
            let d_in = conv.backward_input(&obj_w);
            conv.backward_params(&input, &obj_w);

            let h = 1e-6;
            // Sample of input entries.
            for idx in [0usize, 7, 23, 59] {
                let mut plus = input.clone();
                plus.data_mut()[idx] += h;
                let mut minus = input.clone();
                minus.data_mut()[idx] -= h;
                let fd = (objective(&conv, &plus) - objective(&conv, &minus)) / (2.0 * h);
                assert!(
                    (d_in.data()[idx] - fd).abs() < 1e-8,
                    "k{kernel} d{dilation} d_in[{idx}]"
                );
            }
            // Sample of weights and biases.
            for idx in [0usize, 5, conv.weight.len() - 1] {
                let orig = conv.weight[idx];
                conv.weight[idx] = orig + h;
                let up = objective(&conv, &input);
                conv.weight[idx] = orig - h;
                let down = objective(&conv, &input);
                conv.weight[idx] = orig;
                let fd = (up - down) / (2.0 * h);
                assert!(
                    (conv.weight_grad[idx] - fd).abs() < 1e-8,
                    "k{kernel} d{dilation} d_w[{idx}]"
                );
            }
            for idx in 0..conv.bias.len() {
                let orig = conv.bias[idx];
                conv.bias[idx] = orig + h;
                let up = objective(&conv, &input);
                conv.bias[idx] = orig - h;
                let down = objective(&conv, &input);
                conv.bias[idx] = orig;
                let fd = (up - down) / (2.0 * h);
                assert!((conv.bias_grad[idx] - fd).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn grad_accumulates_across_calls() {
        let mut rng = StdRng::seed_from_u64(4);
        let mut conv = Conv2d::<f64>::new(2, 2, 3, 1, &mut rng);
        let input = Tensor::from_fn(4, 4, 2, |_, _, _| rng.gen_range(-1.0..1.0));
        let d_out = Tensor::from_fn(4, 4, 2, |_, _, _| rng.gen_range(-1.0..1.0));
        conv.zero_grad();
        conv.backward_params(&input, &d_out);
        let once = conv.weight_grad.clone();
        conv.backward_params(&input, &d_out);
        for (twice, once) in conv.weight_grad.iter().zip(&once) {
            assert!((twice - 2.0 * once).abs() < 1e-12);
        }
    }
}
