//! The per-image convolutional model.
//!
//! The network maps the 5-channel standardized input (RGB + pixel
//! coordinates) to `N + 3` channels: a per-pixel distribution over `N`
//! superpixels (via a channel softmax) and an unconstrained 3-channel
//! reconstruction of the image. Architecture:
//!
//! 1. Feature extractor: `n_feature_blocks` ConvInReLU blocks whose widths
//!    double from `base_channels`; the outputs of *all* blocks are
//!    concatenated (dense skip aggregation).
//! 2. The concatenation is extended with its own Laplacian response, letting
//!    later stages see explicit edge structure.
//! 3. ASPP: one 3×3 atrous ConvInReLU branch per dilation rate (padding =
//!    rate preserves shape), concatenated.
//! 4. Projection: a ConvInReLU to 256 channels, then a 1×1 convolution to
//!    `N + 3`.
//!
//! Every layer carries its own gradient buffers; [`Model::backward`]
//! populates them from the loss gradients so an external optimizer can step
//! the parameters in place. Forward/backward never allocate hidden global
//! state, so separate model instances can train concurrently.

mod conv;
mod norm;

pub use conv::Conv2d;
pub use norm::{InstanceNorm, NormCache};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::ops;
use crate::tensor::{AssignmentTensor, Scalar, Tensor};
use crate::{Error, Result};

/// Network input: RGB plus the two standardized coordinate channels.
pub const INPUT_CHANNELS: usize = 5;
/// Width of the projection ConvInReLU before the final 1×1 convolution.
pub const PROJECTION_CHANNELS: usize = 256;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Maximum number of superpixels `N`.
    pub n_superpixels: usize,
    /// Width of the first feature block; later blocks double it.
    pub base_channels: usize,
    pub n_feature_blocks: usize,
    pub dilation_rates: Vec<usize>,
    pub aspp_branch_channels: usize,
    /// Seed for weight initialization.
    pub seed: u64,
}

impl NetworkConfig {
    pub fn new(n_superpixels: usize) -> Self {
        Self {
            n_superpixels,
            base_channels: 32,
            n_feature_blocks: 4,
            dilation_rates: vec![1, 2, 4, 8],
            aspp_branch_channels: 64,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_superpixels < 2 {
            return Err(Error::Config(format!(
                "n_superpixels must be at least 2, got {}",
                self.n_superpixels
            )));
        }
        if self.n_feature_blocks < 1 {
            return Err(Error::Config("n_feature_blocks must be at least 1".into()));
        }
        if self.dilation_rates.is_empty() || self.dilation_rates.iter().any(|&d| d < 1) {
            return Err(Error::Config(
                "dilation_rates must be non-empty with every rate >= 1".into(),
            ));
        }
        if self.base_channels < 1 || self.aspp_branch_channels < 1 {
            return Err(Error::Config("channel widths must be at least 1".into()));
        }
        Ok(())
    }

    /// Channel count of the concatenated feature-extractor output.
    pub fn feature_channels(&self) -> usize {
        (0..self.n_feature_blocks)
            .map(|i| self.base_channels << i)
            .sum()
    }

    /// Channel count entering ASPP (features plus their Laplacian response).
    pub fn aspp_input_channels(&self) -> usize {
        2 * self.feature_channels()
    }

    /// Channel count of the concatenated ASPP output.
    pub fn aspp_output_channels(&self) -> usize {
        self.dilation_rates.len() * self.aspp_branch_channels
    }
}

/// Result of a forward pass: the assignment distribution and the direct
/// image reconstruction.
pub struct ModelOutput<T> {
    pub p: AssignmentTensor<T>,
    pub i_rec: Tensor<T>,
}

/// Channel softmax: per-pixel probabilities over the channel axis, computed
/// max-shifted in f64.
pub fn channel_softmax<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let (h, w, c) = logits.shape();
    let mut out = Tensor::zeros(h, w, c);
    for px in 0..h * w {
        let row = &logits.data()[px * c..(px + 1) * c];
        let mut max = f64::NEG_INFINITY;
        for &v in row {
            max = max.max(v.into_f64());
        }
        let mut sum = 0.0_f64;
        let out_row = &mut out.data_mut()[px * c..(px + 1) * c];
        for (o, &v) in out_row.iter_mut().zip(row) {
            let e = (v.into_f64() - max).exp();
            *o = T::from_f64(e);
            sum += e;
        }
        let inv = T::from_f64(1.0 / sum);
        for o in out_row {
            *o *= inv;
        }
    }
    out
}

/// Gradient of the channel softmax: `dz = P ⊙ (dP − Σ_s dP_s P_s)`.
pub fn channel_softmax_backward<T: Scalar>(p: &Tensor<T>, d_p: &Tensor<T>) -> Tensor<T> {
    let (h, w, c) = p.shape();
    assert_eq!(d_p.shape(), (h, w, c));
    let mut out = Tensor::zeros(h, w, c);
    for px in 0..h * w {
        let ps = &p.data()[px * c..(px + 1) * c];
        let ds = &d_p.data()[px * c..(px + 1) * c];
        let mut dot = 0.0_f64;
        for (pv, dv) in ps.iter().zip(ds) {
            dot += pv.into_f64() * dv.into_f64();
        }
        let out_row = &mut out.data_mut()[px * c..(px + 1) * c];
        for ((o, pv), dv) in out_row.iter_mut().zip(ps).zip(ds) {
            *o = T::from_f64(pv.into_f64() * (dv.into_f64() - dot));
        }
    }
    out
}

/// Convolution, instance norm, ReLU — the repeated unit of the network.
pub struct ConvInRelu<T> {
    pub(crate) conv: Conv2d<T>,
    pub(crate) norm: InstanceNorm<T>,
}

impl<T: Scalar> ConvInRelu<T> {
    fn new(
        in_channels: usize,
        out_channels: usize,
        dilation: usize,
        rng: &mut ChaCha20Rng,
    ) -> Self {
        Self {
            conv: Conv2d::new(in_channels, out_channels, 3, dilation, rng),
            norm: InstanceNorm::new(out_channels),
        }
    }

    pub fn forward(&self, input: &Tensor<T>) -> (Tensor<T>, NormCache<T>) {
        let conv_out = self.conv.forward(input);
        let (mut out, cache) = self.norm.forward(&conv_out);
        for v in out.data_mut() {
            if *v < T::zero() {
                *v = T::zero();
            }
        }
        (out, cache)
    }

    /// Backward through ReLU, norm, and convolution; accumulates parameter
    /// gradients and returns the input gradient. `output` is the block's own
    /// forward output (the ReLU mask is its zero pattern).
    fn backward(
        &mut self,
        input: &Tensor<T>,
        output: &Tensor<T>,
        cache: &NormCache<T>,
        d_out: &Tensor<T>,
    ) -> Tensor<T> {
        let mut d_relu = d_out.clone();
        for (g, &o) in d_relu.data_mut().iter_mut().zip(output.data()) {
            if o <= T::zero() {
                *g = T::zero();
            }
        }
        let d_conv = self.norm.backward(cache, &d_relu);
        self.conv.backward_params(input, &d_conv);
        self.conv.backward_input(&d_conv)
    }

    fn zero_grad(&mut self) {
        self.conv.zero_grad();
        self.norm.zero_grad();
    }
}

/// One named parameter tensor with its gradient, for optimizers.
pub struct ParamMut<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [T],
    pub grad: &'a mut [T],
}

/// Read-only view of a parameter tensor, for serialization.
pub struct ParamView<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [T],
}

struct ModelCache<T> {
    input: Tensor<T>,
    block_outputs: Vec<Tensor<T>>,
    block_norms: Vec<NormCache<T>>,
    aspp_input: Tensor<T>,
    aspp_outputs: Vec<Tensor<T>>,
    aspp_norms: Vec<NormCache<T>>,
    aspp_cat: Tensor<T>,
    proj_output: Tensor<T>,
    proj_norm: NormCache<T>,
}

/// The full network. Mutable during training (gradients, cached
/// activations); keep one instance per image/thread.
pub struct Model<T> {
    cfg: NetworkConfig,
    features: Vec<ConvInRelu<T>>,
    aspp: Vec<ConvInRelu<T>>,
    projection: ConvInRelu<T>,
    head: Conv2d<T>,
    cache: Option<ModelCache<T>>,
}

impl<T: Scalar> Model<T> {
    /// Builds and initializes a model from the configuration (weights seeded
    /// by `cfg.seed`).
    pub fn new(cfg: &NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        let mut features = Vec::with_capacity(cfg.n_feature_blocks);
        let mut in_ch = INPUT_CHANNELS;
        for i in 0..cfg.n_feature_blocks {
            let out_ch = cfg.base_channels << i;
            features.push(ConvInRelu::new(in_ch, out_ch, 1, &mut rng));
            in_ch = out_ch;
        }
        let aspp_in = cfg.aspp_input_channels();
        let aspp = cfg
            .dilation_rates
            .iter()
            .map(|&rate| ConvInRelu::new(aspp_in, cfg.aspp_branch_channels, rate, &mut rng))
            .collect();
        let projection =
            ConvInRelu::new(cfg.aspp_output_channels(), PROJECTION_CHANNELS, 1, &mut rng);
        let head = Conv2d::new(PROJECTION_CHANNELS, cfg.n_superpixels + 3, 1, 1, &mut rng);
        Ok(Self {
            cfg: cfg.clone(),
            features,
            aspp,
            projection,
            head,
            cache: None,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    /// Forward pass. Caches every intermediate needed by [`Model::backward`].
    pub fn forward(&mut self, input: &Tensor<T>) -> ModelOutput<T> {
        assert_eq!(
            input.channels(),
            INPUT_CHANNELS,
            "expected a 5-channel network input"
        );
        let n = self.cfg.n_superpixels;

        let mut block_outputs = Vec::with_capacity(self.features.len());
        let mut block_norms = Vec::with_capacity(self.features.len());
        for (i, block) in self.features.iter().enumerate() {
            let x = if i == 0 { input } else { &block_outputs[i - 1] };
            let (out, cache) = block.forward(x);
            block_outputs.push(out);
            block_norms.push(cache);
        }

        let feature_cat = Tensor::concat_channels(&block_outputs.iter().collect::<Vec<_>>());
        let lap = ops::laplacian_response(&feature_cat);
        let aspp_input = Tensor::concat_channels(&[&feature_cat, &lap]);
        drop((feature_cat, lap));

        let mut aspp_outputs = Vec::with_capacity(self.aspp.len());
        let mut aspp_norms = Vec::with_capacity(self.aspp.len());
        for branch in &self.aspp {
            let (out, cache) = branch.forward(&aspp_input);
            aspp_outputs.push(out);
            aspp_norms.push(cache);
        }
        let aspp_cat = Tensor::concat_channels(&aspp_outputs.iter().collect::<Vec<_>>());

        let (proj_output, proj_norm) = self.projection.forward(&aspp_cat);
        let logits = self.head.forward(&proj_output);

        let p = AssignmentTensor::from_softmax(channel_softmax(&logits.channel_slice(0, n)));
        let i_rec = logits.channel_slice(n, 3);

        self.cache = Some(ModelCache {
            input: input.clone(),
            block_outputs,
            block_norms,
            aspp_input,
            aspp_outputs,
            aspp_norms,
            aspp_cat,
            proj_output,
            proj_norm,
        });
        ModelOutput { p, i_rec }
    }

    /// Backward pass from the loss gradients with respect to the softmaxed
    /// assignment `P` and the reconstruction `Ĩ`. Accumulates parameter
    /// gradients throughout the network. Consumes the cache of the matching
    /// [`Model::forward`] call.
    pub fn backward(&mut self, output: &ModelOutput<T>, d_p: &Tensor<T>, d_i_rec: &Tensor<T>) {
        let cache = self
            .cache
            .take()
            .expect("backward without a preceding forward");
        let n = self.cfg.n_superpixels;

        // Head: softmax-backward on the first N channels, pass-through on Ĩ.
        let d_p_logits = channel_softmax_backward(output.p.as_tensor(), d_p);
        let mut d_logits = Tensor::zeros(d_p.height(), d_p.width(), n + 3);
        d_logits.add_into_channels(0, &d_p_logits);
        d_logits.add_into_channels(n, d_i_rec);
        drop(d_p_logits);

        self.head.backward_params(&cache.proj_output, &d_logits);
        let d_proj = self.head.backward_input(&d_logits);
        drop(d_logits);

        let d_aspp_cat = self.projection.backward(
            &cache.aspp_cat,
            &cache.proj_output,
            &cache.proj_norm,
            &d_proj,
        );
        drop(d_proj);

        let bc = self.cfg.aspp_branch_channels;
        let mut d_aspp_input: Option<Tensor<T>> = None;
        for (i, branch) in self.aspp.iter_mut().enumerate() {
            let d_branch = d_aspp_cat.channel_slice(i * bc, bc);
            let d_in = branch.backward(
                &cache.aspp_input,
                &cache.aspp_outputs[i],
                &cache.aspp_norms[i],
                &d_branch,
            );
            match &mut d_aspp_input {
                Some(acc) => acc.add_scaled(&d_in, T::one()),
                None => d_aspp_input = Some(d_in),
            }
        }
        let d_aspp_input = d_aspp_input.expect("at least one ASPP branch");
        drop(d_aspp_cat);

        // ASPP input was concat(features, laplacian(features)).
        let fc = self.cfg.feature_channels();
        let mut d_features = d_aspp_input.channel_slice(0, fc);
        let d_lap = d_aspp_input.channel_slice(fc, fc);
        d_features.add_scaled(&ops::laplacian_response_backward(&d_lap), T::one());
        drop((d_aspp_input, d_lap));

        // Feature chain: each block's output feeds both the concatenation
        // and the next block.
        let mut d_chain: Option<Tensor<T>> = None;
        let mut offset = fc;
        for i in (0..self.features.len()).rev() {
            let width = self.cfg.base_channels << i;
            offset -= width;
            let mut d_out = d_features.channel_slice(offset, width);
            if let Some(d) = d_chain.take() {
                d_out.add_scaled(&d, T::one());
            }
            let input = if i == 0 {
                &cache.input
            } else {
                &cache.block_outputs[i - 1]
            };
            d_chain = Some(self.features[i].backward(
                input,
                &cache.block_outputs[i],
                &cache.block_norms[i],
                &d_out,
            ));
        }
        // The gradient with respect to the network input is not used.
    }

    pub fn zero_grad(&mut self) {
        for block in &mut self.features {
            block.zero_grad();
        }
        for branch in &mut self.aspp {
            branch.zero_grad();
        }
        self.projection.zero_grad();
        self.head.zero_grad();
    }

    /// All parameters with gradients, in a fixed serialization order.
    pub fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        fn push_block<'a, T: Scalar>(
            out: &mut Vec<ParamMut<'a, T>>,
            name: &str,
            block: &'a mut ConvInRelu<T>,
        ) {
            let wshape = block.conv.weight_shape();
            let cout = block.conv.out_channels();
            out.push(ParamMut {
                name: format!("{name}.conv.weight"),
                shape: wshape,
                data: &mut block.conv.weight,
                grad: &mut block.conv.weight_grad,
            });
            out.push(ParamMut {
                name: format!("{name}.conv.bias"),
                shape: vec![cout],
                data: &mut block.conv.bias,
                grad: &mut block.conv.bias_grad,
            });
            out.push(ParamMut {
                name: format!("{name}.norm.gamma"),
                shape: vec![cout],
                data: &mut block.norm.gamma,
                grad: &mut block.norm.gamma_grad,
            });
            out.push(ParamMut {
                name: format!("{name}.norm.beta"),
                shape: vec![cout],
                data: &mut block.norm.beta,
                grad: &mut block.norm.beta_grad,
            });
        }
        let mut out = Vec::new();
        for (i, block) in self.features.iter_mut().enumerate() {
            push_block(&mut out, &format!("features.{i}"), block);
        }
        for (i, branch) in self.aspp.iter_mut().enumerate() {
            push_block(&mut out, &format!("aspp.{i}"), branch);
        }
        push_block(&mut out, "projection", &mut self.projection);
        let head_shape = self.head.weight_shape();
        let head_out = self.head.out_channels();
        out.push(ParamMut {
            name: "head.weight".into(),
            shape: head_shape,
            data: &mut self.head.weight,
            grad: &mut self.head.weight_grad,
        });
        out.push(ParamMut {
            name: "head.bias".into(),
            shape: vec![head_out],
            data: &mut self.head.bias,
            grad: &mut self.head.bias_grad,
        });
        out
    }

    /// Read-only parameter views in the same order as [`Model::params_mut`].
    pub fn params(&self) -> Vec<ParamView<'_, T>> {
        fn push_block<'a, T: Scalar>(
            out: &mut Vec<ParamView<'a, T>>,
            name: &str,
            block: &'a ConvInRelu<T>,
        ) {
            let cout = block.conv.out_channels();
            out.push(ParamView {
                name: format!("{name}.conv.weight"),
                shape: block.conv.weight_shape(),
                data: &block.conv.weight,
            });
            out.push(ParamView {
                name: format!("{name}.conv.bias"),
                shape: vec![cout],
                data: &block.conv.bias,
            });
            out.push(ParamView {
                name: format!("{name}.norm.gamma"),
                shape: vec![cout],
                data: &block.norm.gamma,
            });
            out.push(ParamView {
                name: format!("{name}.norm.beta"),
                shape: vec![cout],
                data: &block.norm.beta,
            });
        }
        let mut out = Vec::new();
        for (i, block) in self.features.iter().enumerate() {
            push_block(&mut out, &format!("features.{i}"), block);
        }
        for (i, branch) in self.aspp.iter().enumerate() {
            push_block(&mut out, &format!("aspp.{i}"), branch);
        }
        push_block(&mut out, "projection", &self.projection);
        out.push(ParamView {
            name: "head.weight".into(),
            shape: self.head.weight_shape(),
            data: &self.head.weight,
        });
        out.push(ParamView {
            name: "head.bias".into(),
            shape: vec![self.head.out_channels()],
            data: &self.head.bias,
        });
        out
    }

    pub fn n_parameters(&self) -> usize {
        self.params().iter().map(|p| p.data.len()).sum()
    }
}

#[derive(Serialize, Deserialize)]
struct WeightsHeaderEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct WeightsHeader {
    format: String,
    params: Vec<WeightsHeaderEntry>,
}

const WEIGHTS_FORMAT: &str = "superpix-weights-v1";

impl<T: Scalar> Model<T> {
    /// Writes all parameters as little-endian `f32` preceded by a JSON
    /// header (`u32` length prefix) listing names and shapes in order.
    pub fn save_weights(&self, path: &std::path::Path) -> Result<()> {
        use std::io::Write;
        let params = self.params();
        let header = WeightsHeader {
            format: WEIGHTS_FORMAT.into(),
            params: params
                .iter()
                .map(|p| WeightsHeaderEntry {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                })
                .collect(),
        };
        let header_bytes = serde_json::to_vec(&header)
            .map_err(|e| Error::Weights(format!("header serialization failed: {e}")))?;
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        file.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
        file.write_all(&header_bytes)?;
        for p in &params {
            for &v in p.data {
                file.write_all(&(v.into_f64() as f32).to_le_bytes())?;
            }
        }
        file.flush()?;
        Ok(())
    }

    /// Loads weights written by [`Model::save_weights`] into this model.
    /// Names and shapes must match the current architecture exactly.
    pub fn load_weights(&mut self, path: &std::path::Path) -> Result<()> {
        use std::io::Read;
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut len_bytes = [0u8; 4];
        file.read_exact(&mut len_bytes)?;
        let header_len = u32::from_le_bytes(len_bytes) as usize;
        let mut header_bytes = vec![0u8; header_len];
        file.read_exact(&mut header_bytes)?;
        let header: WeightsHeader = serde_json::from_slice(&header_bytes)
            .map_err(|e| Error::Weights(format!("bad header: {e}")))?;
        if header.format != WEIGHTS_FORMAT {
            return Err(Error::Weights(format!(
                "unknown format {:?}",
                header.format
            )));
        }
        let mut params = self.params_mut();
        if header.params.len() != params.len() {
            return Err(Error::Weights(format!(
                "expected {} parameter tensors, file has {}",
                params.len(),
                header.params.len()
            )));
        }
        for (entry, param) in header.params.iter().zip(params.iter()) {
            if entry.name != param.name || entry.shape != param.shape {
                return Err(Error::Weights(format!(
                    "parameter mismatch: file has {:?} {:?}, model expects {:?} {:?}",
                    entry.name, entry.shape, param.name, param.shape
                )));
            }
        }
        for param in params.iter_mut() {
            let mut buf = vec![0u8; param.data.len() * 4];
            file.read_exact(&mut buf)?;
            for (v, chunk) in param.data.iter_mut().zip(buf.chunks_exact(4)) {
                *v = T::from_f64(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
            }
        }
        Ok(())
    }
}
