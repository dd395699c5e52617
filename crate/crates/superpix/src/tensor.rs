//! Dense tensors and label maps used throughout the crate.
//!
//! A [`Tensor`] is an `H x W x C` raster stored channels-last, so a pixel's
//! channels are contiguous and a row of pixels forms a row-major `W x C`
//! matrix. That layout lets convolution and the soft-pooling operators run as
//! strided matrix products without repacking.

use crate::gemm;

/// Scalar element type for tensors. Training runs in `f32`; gradient-check
/// tests instantiate the same code in `f64`.
pub trait Scalar:
    num_traits::Float + num_traits::NumAssign + Send + Sync + std::fmt::Debug + 'static
{
    fn from_f64(v: f64) -> Self;
    fn into_f64(self) -> f64;

    /// `C = alpha * A * B + beta * C` with arbitrary row/column strides.
    ///
    /// # Safety
    /// Pointers must be valid for the strided `m x k`, `k x n` and `m x n`
    /// accesses implied by the arguments.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn into_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        gemm::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn into_f64(self) -> f64 {
        self
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        gemm::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// `H x W x C` raster of scalar values, channels-last.
///
/// Loaded RGB images keep values in `[0, 1]`; feature maps and network
/// activations are unbounded.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<T>,
}

/// `Tensor<f32>`, the element type used for images and training.
pub type ImageTensor = Tensor<f32>;

impl<T: Scalar> Tensor<T> {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self {
            h,
            w,
            c,
            data: vec![T::zero(); h * w * c],
        }
    }

    /// Wraps an existing buffer; `data.len()` must equal `h * w * c`.
    pub fn from_vec(h: usize, w: usize, c: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), h * w * c, "tensor buffer length mismatch");
        Self { h, w, c, data }
    }

    pub fn from_fn(
        h: usize,
        w: usize,
        c: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data.push(f(y, x, ch));
                }
            }
        }
        Self { h, w, c, data }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.h
    }
    #[inline]
    pub fn width(&self) -> usize {
        self.w
    }
    #[inline]
    pub fn channels(&self) -> usize {
        self.c
    }
    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }
    #[inline]
    pub fn pixels(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, ch: usize) -> T {
        debug_assert!(y < self.h && x < self.w && ch < self.c);
        self.data[(y * self.w + x) * self.c + ch]
    }

    #[inline]
    pub fn at_mut(&mut self, y: usize, x: usize, ch: usize) -> &mut T {
        debug_assert!(y < self.h && x < self.w && ch < self.c);
        &mut self.data[(y * self.w + x) * self.c + ch]
    }

    /// Channel vector of one pixel.
    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[T] {
        let base = (y * self.w + x) * self.c;
        &self.data[base..base + self.c]
    }

    #[inline]
    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [T] {
        let base = (y * self.w + x) * self.c;
        &mut self.data[base..base + self.c]
    }

    /// One image row as a `W x C` row-major slice.
    #[inline]
    pub fn row(&self, y: usize) -> &[T] {
        let base = y * self.w * self.c;
        &self.data[base..base + self.w * self.c]
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map(&self, f: impl Fn(T) -> T + Sync) -> Self {
        Self {
            h: self.h,
            w: self.w,
            c: self.c,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// Elementwise `self += alpha * other`.
    pub fn add_scaled(&mut self, other: &Self, alpha: T) {
        assert_eq!(self.shape(), other.shape(), "tensor shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    /// Concatenates tensors along the channel axis. All inputs must share H and W.
    pub fn concat_channels(parts: &[&Self]) -> Self {
        assert!(!parts.is_empty());
        let (h, w) = (parts[0].h, parts[0].w);
        let c_total: usize = parts.iter().map(|p| p.c).sum();
        for p in parts {
            assert_eq!(
                (p.h, p.w),
                (h, w),
                "concat_channels: spatial shape mismatch"
            );
        }
        let mut data = Vec::with_capacity(h * w * c_total);
        for px in 0..h * w {
            for p in parts {
                let base = px * p.c;
                data.extend_from_slice(&p.data[base..base + p.c]);
            }
        }
        Self {
            h,
            w,
            c: c_total,
            data,
        }
    }

    /// Copies a contiguous channel range into a new tensor.
    pub fn channel_slice(&self, start: usize, len: usize) -> Self {
        assert!(start + len <= self.c, "channel_slice out of range");
        let mut data = Vec::with_capacity(self.h * self.w * len);
        for px in 0..self.h * self.w {
            let base = px * self.c + start;
            data.extend_from_slice(&self.data[base..base + len]);
        }
        Self {
            h: self.h,
            w: self.w,
            c: len,
            data,
        }
    }

    /// Adds a channel slice of `other` (same spatial shape, `len` channels)
    /// into channels `[start, start+len)` of `self`.
    pub fn add_into_channels(&mut self, start: usize, other: &Self) {
        assert_eq!((self.h, self.w), (other.h, other.w));
        assert!(start + other.c <= self.c);
        for px in 0..self.h * self.w {
            let base = px * self.c + start;
            let obase = px * other.c;
            for ch in 0..other.c {
                self.data[base + ch] += other.data[obase + ch];
            }
        }
    }

    /// Per-channel mean over all pixels, accumulated in f64.
    pub fn channel_mean(&self, ch: usize) -> f64 {
        let mut acc = 0.0;
        for px in 0..self.h * self.w {
            acc += self.data[px * self.c + ch].into_f64();
        }
        acc / (self.h * self.w) as f64
    }

    /// Per-channel population variance over all pixels, accumulated in f64.
    pub fn channel_variance(&self, ch: usize) -> f64 {
        let mean = self.channel_mean(ch);
        let mut acc = 0.0;
        for px in 0..self.h * self.w {
            let d = self.data[px * self.c + ch].into_f64() - mean;
            acc += d * d;
        }
        acc / (self.h * self.w) as f64
    }

    /// Casts every element through f64.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            h: self.h,
            w: self.w,
            c: self.c,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.into_f64()))
                .collect(),
        }
    }
}

/// `H x W` grid of non-negative integer segment IDs.
///
/// Used both for predicted superpixels and ground-truth segments. IDs need not
/// be contiguous.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    h: usize,
    w: usize,
    labels: Vec<u32>,
}

impl LabelMap {
    pub fn new(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            labels: vec![0; h * w],
        }
    }

    pub fn from_vec(h: usize, w: usize, labels: Vec<u32>) -> Self {
        assert_eq!(labels.len(), h * w, "label buffer length mismatch");
        Self { h, w, labels }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.h
    }
    #[inline]
    pub fn width(&self) -> usize {
        self.w
    }
    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.w + x]
    }

    #[inline]
    pub fn at_mut(&mut self, y: usize, x: usize) -> &mut u32 {
        &mut self.labels[y * self.w + x]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn max_label(&self) -> u32 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Number of distinct IDs present.
    pub fn distinct_labels(&self) -> usize {
        let mut ids: Vec<u32> = self.labels.clone();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }

    /// Remaps IDs to `0..K-1` in row-major order of first appearance.
    pub fn compact(&self) -> LabelMap {
        let mut next = 0u32;
        let mut map = std::collections::HashMap::new();
        let labels = self
            .labels
            .iter()
            .map(|&l| {
                *map.entry(l).or_insert_with(|| {
                    let id = next;
                    next += 1;
                    id
                })
            })
            .collect();
        LabelMap {
            h: self.h,
            w: self.w,
            labels,
        }
    }
}

/// Per-pixel probability distribution over `N` superpixels (`H x W x N`).
///
/// Every pixel's probabilities are non-negative and sum to one.
#[derive(Clone, Debug)]
pub struct AssignmentTensor<T> {
    t: Tensor<T>,
}

impl<T: Scalar> AssignmentTensor<T> {
    /// Validates the distribution invariant (entries in `[0, 1]`, rows summing
    /// to one within `1e-5`).
    pub fn new(t: Tensor<T>) -> Result<Self, crate::Error> {
        for px in 0..t.pixels() {
            let row = &t.data()[px * t.channels()..(px + 1) * t.channels()];
            let mut sum = 0.0;
            for &v in row {
                let v = v.into_f64();
                if !(-1e-9..=1.0 + 1e-6).contains(&v) {
                    return Err(crate::Error::InvalidDistribution {
                        what: format!("assignment probability {v} outside [0, 1]"),
                    });
                }
                sum += v;
            }
            if (sum - 1.0).abs() > 1e-5 {
                return Err(crate::Error::InvalidDistribution {
                    what: format!("pixel assignment sums to {sum}, expected 1"),
                });
            }
        }
        Ok(Self { t })
    }

    /// Skips validation; for tensors produced by a softmax.
    pub fn from_softmax(t: Tensor<T>) -> Self {
        Self { t }
    }

    /// One-hot assignments from a label map. Labels must be `< n`.
    pub fn one_hot(labels: &LabelMap, n: usize) -> Self {
        let (h, w) = labels.shape();
        let mut t = Tensor::zeros(h, w, n);
        for y in 0..h {
            for x in 0..w {
                let l = labels.at(y, x) as usize;
                assert!(l < n, "label {l} out of range for {n} superpixels");
                *t.at_mut(y, x, l) = T::one();
            }
        }
        Self { t }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.t.height()
    }
    #[inline]
    pub fn width(&self) -> usize {
        self.t.width()
    }
    /// Number of superpixel slots `N`.
    #[inline]
    pub fn n_superpixels(&self) -> usize {
        self.t.channels()
    }

    #[inline]
    pub fn as_tensor(&self) -> &Tensor<T> {
        &self.t
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.t
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, s: usize) -> T {
        self.t.at(y, x, s)
    }

    pub fn cast<U: Scalar>(&self) -> AssignmentTensor<U> {
        AssignmentTensor { t: self.t.cast() }
    }
}

/// Spatial probability distribution of edge strength (`H x W`, strictly
/// positive, summing to one).
#[derive(Clone, Debug)]
pub struct EdgeMap<T> {
    h: usize,
    w: usize,
    p: Vec<T>,
}

impl<T: Scalar> EdgeMap<T> {
    /// Validates positivity and unit mass (within `1e-6`).
    pub fn new(h: usize, w: usize, p: Vec<T>) -> Result<Self, crate::Error> {
        assert_eq!(p.len(), h * w, "edge map buffer length mismatch");
        let mut sum = 0.0;
        for &v in &p {
            if v.into_f64() <= 0.0 {
                return Err(crate::Error::InvalidDistribution {
                    what: format!("edge map entry {} is not positive", v.into_f64()),
                });
            }
            sum += v.into_f64();
        }
        if (sum - 1.0).abs() > 1e-6 {
            return Err(crate::Error::InvalidDistribution {
                what: format!("edge map sums to {sum}, expected 1"),
            });
        }
        Ok(Self { h, w, p })
    }

    /// Skips validation; for maps produced by a softmax.
    pub(crate) fn from_softmax(h: usize, w: usize, p: Vec<T>) -> Self {
        Self { h, w, p }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.h
    }
    #[inline]
    pub fn width(&self) -> usize {
        self.w
    }
    #[inline]
    pub fn at(&self, y: usize, x: usize) -> T {
        self.p[y * self.w + x]
    }
    pub fn probabilities(&self) -> &[T] {
        &self.p
    }
}

/// Mass-weighted mean colors of the soft superpixels.
///
/// `colors` is `N x 3` row-major; `masses[s]` is the total soft assignment of
/// superpixel `s` and the masses sum to `H * W`.
#[derive(Clone, Debug)]
pub struct SuperpixelColors<T> {
    pub colors: Vec<T>,
    pub masses: Vec<T>,
}

impl<T: Scalar> SuperpixelColors<T> {
    #[inline]
    pub fn n_superpixels(&self) -> usize {
        self.masses.len()
    }

    #[inline]
    pub fn color(&self, s: usize) -> &[T] {
        &self.colors[s * 3..s * 3 + 3]
    }
}
