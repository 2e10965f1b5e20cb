//! Convolutional encoders and decoders for the speech, noise and
//! noisy-speech VAEs.
//!
//! Encoders read one LPS frame at a time: the frame is a single-channel
//! signal over the frequency axis, passed through a stack of same-padded
//! 1-D convolutions with ReLU, flattened, and mapped by linear heads to
//! `(mean, log_var)` pairs. Decoders mirror this: the latent vector(s) are
//! the input channels (one channel for the speech/noise decoders, two for
//! the noisy-speech decoder), followed by a convolution stack and linear
//! `(mean, log_var)` heads over the LPS bins.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::DiagonalGaussian;
use crate::nn::{
    flatten, prefixed, relu_backward_inplace, relu_inplace, unflatten, Conv1d, Linear, Parameters,
};

pub const NUM_BINS: usize = 257;
pub const LATENT_DIM: usize = 128;
pub const ENCODER_CHANNELS: [usize; 4] = [32, 64, 128, 256];
pub const DECODER_CHANNELS: [usize; 4] = [256, 128, 64, 32];
pub const KERNEL: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    /// Frame length (LPS bins).
    pub input_len: usize,
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub latent_dim: usize,
    /// 2 for a single latent (mean, log_var); 4 for the speech and noise
    /// latents of the noisy-speech encoder.
    pub num_heads: usize,
}

impl EncoderSpec {
    /// Full-size encoder with one latent.
    pub fn single_latent() -> Self {
        Self {
            input_len: NUM_BINS,
            conv_channels: ENCODER_CHANNELS.to_vec(),
            kernel: KERNEL,
            latent_dim: LATENT_DIM,
            num_heads: 2,
        }
    }

    /// Full-size encoder with speech and noise latents.
    pub fn dual_latent() -> Self {
        Self {
            num_heads: 4,
            ..Self::single_latent()
        }
    }

    pub fn num_latents(&self) -> usize {
        self.num_heads / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel % 2 == 0 {
            return Err(Error::invalid("kernel size must be odd"));
        }
        if self.num_heads % 2 != 0 {
            return Err(Error::invalid("encoder heads come in (mean, log_var) pairs"));
        }
        if self.input_len == 0 || (self.num_heads > 0 && self.latent_dim == 0) {
            return Err(Error::invalid("encoder dimensions must be positive"));
        }
        if self.conv_channels.iter().any(|&c| c == 0) {
            return Err(Error::invalid("convolution channels must be positive"));
        }
        Ok(())
    }

    fn flat_dim(&self) -> usize {
        self.conv_channels.last().copied().unwrap_or(1) * self.input_len
    }

    pub fn param_count(&self) -> usize {
        conv_stack_params(1, &self.conv_channels, self.kernel)
            + self.num_heads * (self.flat_dim() * self.latent_dim + self.latent_dim)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderSpec {
    pub latent_dim: usize,
    /// Number of latent vectors fed side by side as input channels.
    pub latent_channels: usize,
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub out_dim: usize,
    /// With `false` only the mean head exists and the log-variance is fixed
    /// at zero.
    pub learned_variance: bool,
}

impl DecoderSpec {
    /// Full-size decoder for `latent_channels` latents.
    pub fn full(latent_channels: usize) -> Self {
        Self {
            latent_dim: LATENT_DIM,
            latent_channels,
            conv_channels: DECODER_CHANNELS.to_vec(),
            kernel: KERNEL,
            out_dim: NUM_BINS,
            learned_variance: true,
        }
    }

    pub fn num_heads(&self) -> usize {
        if self.learned_variance {
            2
        } else {
            1
        }
    }

    pub fn input_dim(&self) -> usize {
        self.latent_dim * self.latent_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel % 2 == 0 {
            return Err(Error::invalid("kernel size must be odd"));
        }
        if self.latent_dim == 0 || self.latent_channels == 0 || self.out_dim == 0 {
            return Err(Error::invalid("decoder dimensions must be positive"));
        }
        if self.conv_channels.iter().any(|&c| c == 0) {
            return Err(Error::invalid("convolution channels must be positive"));
        }
        Ok(())
    }

    fn flat_dim(&self) -> usize {
        self.conv_channels
            .last()
            .copied()
            .unwrap_or(self.latent_channels)
            * self.latent_dim
    }

    pub fn param_count(&self) -> usize {
        conv_stack_params(self.latent_channels, &self.conv_channels, self.kernel)
            + self.num_heads() * (self.flat_dim() * self.out_dim + self.out_dim)
    }
}

fn conv_stack_params(in_channels: usize, channels: &[usize], kernel: usize) -> usize {
    let mut total = 0;
    let mut prev = in_channels;
    for &c in channels {
        total += c * prev * kernel + c;
        prev = c;
    }
    total
}

/// Which of the six trainable parameter groups a network belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    SpeechEncoder,
    SpeechDecoder,
    NoiseEncoder,
    NoiseDecoder,
    NoisyEncoder,
    NoisyDecoder,
}

/// Means and log-variances of a batch of diagonal Gaussians, `[batch x dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBatch {
    pub mean: Array2<f64>,
    pub log_var: Array2<f64>,
}

impl GaussianBatch {
    pub fn len(&self) -> usize {
        self.mean.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.mean.ncols()
    }

    pub fn get(&self, i: usize) -> DiagonalGaussian {
        DiagonalGaussian {
            mean: self.mean.row(i).to_vec(),
            log_var: self.log_var.row(i).to_vec(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = DiagonalGaussian> + '_ {
        (0..self.len()).map(|i| self.get(i))
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            mean: self.mean.select(ndarray::Axis(0), rows),
            log_var: self.log_var.select(ndarray::Axis(0), rows),
        }
    }

    /// Reparameterized samples, one row of `eps` per item.
    pub fn sample(&self, eps: &Array2<f64>) -> Array2<f64> {
        let mut z = self.log_var.mapv(|lv| (0.5 * lv).exp());
        z *= eps;
        z += &self.mean;
        z
    }
}

#[derive(Debug)]
struct StackCache {
    cols: Vec<Array2<f64>>,
    acts: Vec<Array2<f64>>,
    flat: Array2<f64>,
}

fn conv_stack_forward(convs: &[Conv1d], input: Array2<f64>, len: usize) -> StackCache {
    let mut cols = Vec::with_capacity(convs.len());
    let mut acts = Vec::with_capacity(convs.len());
    let mut x = input;
    for conv in convs {
        let (mut out, c) = conv.forward(x.view(), len);
        relu_inplace(&mut out);
        cols.push(c);
        acts.push(out.clone());
        x = out;
    }
    StackCache {
        cols,
        acts,
        flat: flatten(&x, len),
    }
}

/// Backpropagates `d_flat` through the stack; returns the gradient with
/// respect to the stack input when requested.
fn conv_stack_backward(
    convs: &[Conv1d],
    grads: &mut [Conv1d],
    cache: &StackCache,
    d_flat: &Array2<f64>,
    len: usize,
    need_input_grad: bool,
) -> Option<Array2<f64>> {
    let channels = convs.last().map(|c| c.out_channels());
    let Some(channels) = channels else {
        return need_input_grad.then(|| d_flat.clone());
    };
    let mut d = unflatten(d_flat.view(), channels, len);
    for i in (0..convs.len()).rev() {
        relu_backward_inplace(&mut d, &cache.acts[i]);
        let want = i > 0 || need_input_grad;
        match convs[i].backward(&cache.cols[i], &d, len, &mut grads[i], want) {
            Some(dx) => d = dx,
            None => return None,
        }
    }
    Some(d)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub spec: EncoderSpec,
    pub convs: Vec<Conv1d>,
    pub heads: Vec<Linear>,
}

#[derive(Debug)]
pub struct EncoderCache {
    stack: StackCache,
}

impl Encoder {
    pub fn new<R: Rng>(spec: EncoderSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut convs = Vec::new();
        let mut prev = 1;
        for &c in &spec.conv_channels {
            convs.push(Conv1d::new(prev, c, spec.kernel, rng));
            prev = c;
        }
        let heads = (0..spec.num_heads)
            .map(|_| Linear::new(spec.flat_dim(), spec.latent_dim, rng))
            .collect();
        Ok(Self { spec, convs, heads })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            spec: self.spec.clone(),
            convs: self.convs.iter().map(Conv1d::zeros_like).collect(),
            heads: self.heads.iter().map(Linear::zeros_like).collect(),
        }
    }

    fn check_input(&self, x: &ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.spec.input_len {
            return Err(Error::Shape(format!(
                "encoder expects frames of {} bins, got {}",
                self.spec.input_len,
                x.ncols()
            )));
        }
        Ok(())
    }

    /// Raw head outputs `[batch x latent]`, in head order.
    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<(Vec<Array2<f64>>, EncoderCache)> {
        self.check_input(&x)?;
        let len = self.spec.input_len;
        let input = x
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((1, x.nrows() * len))
            .expect("contiguous input");
        let stack = conv_stack_forward(&self.convs, input, len);
        let outs = self.heads.iter().map(|h| h.forward(stack.flat.view())).collect();
        Ok((outs, EncoderCache { stack }))
    }

    /// One [`GaussianBatch`] per latent: the speech latent first, then the
    /// noise latent for dual-latent encoders.
    pub fn encode(&self, x: ArrayView2<'_, f64>) -> Result<Vec<GaussianBatch>> {
        let (outs, _) = self.forward(x)?;
        Ok(pair_heads(outs))
    }

    pub fn backward(&self, cache: &EncoderCache, d_heads: &[Array2<f64>]) -> Encoder {
        let mut grads = self.zeros_like();
        let flat = &cache.stack.flat;
        let mut d_flat = Array2::<f64>::zeros(flat.dim());
        for ((head, g), d) in self.heads.iter().zip(grads.heads.iter_mut()).zip(d_heads) {
            head.backward(flat.view(), d, g, Some(&mut d_flat));
        }
        conv_stack_backward(
            &self.convs,
            &mut grads.convs,
            &cache.stack,
            &d_flat,
            self.spec.input_len,
            false,
        );
        grads
    }
}

pub(crate) fn pair_heads(outs: Vec<Array2<f64>>) -> Vec<GaussianBatch> {
    let mut it = outs.into_iter();
    let mut pairs = Vec::new();
    while let (Some(mean), Some(log_var)) = (it.next(), it.next()) {
        pairs.push(GaussianBatch { mean, log_var });
    }
    pairs
}

impl Parameters for Encoder {
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.extend(prefixed(&format!("conv{i}"), c.tensors()));
        }
        for (i, h) in self.heads.iter().enumerate() {
            out.extend(prefixed(&format!("head{i}"), h.tensors()));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for c in &mut self.convs {
            out.extend(c.tensors_mut());
        }
        for h in &mut self.heads {
            out.extend(h.tensors_mut());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub spec: DecoderSpec,
    pub convs: Vec<Conv1d>,
    pub heads: Vec<Linear>,
}

#[derive(Debug)]
pub struct DecoderCache {
    stack: StackCache,
}

impl Decoder {
    pub fn new<R: Rng>(spec: DecoderSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut convs = Vec::new();
        let mut prev = spec.latent_channels;
        for &c in &spec.conv_channels {
            convs.push(Conv1d::new(prev, c, spec.kernel, rng));
            prev = c;
        }
        let heads = (0..spec.num_heads())
            .map(|_| Linear::new(spec.flat_dim(), spec.out_dim, rng))
            .collect();
        Ok(Self { spec, convs, heads })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            spec: self.spec.clone(),
            convs: self.convs.iter().map(Conv1d::zeros_like).collect(),
            heads: self.heads.iter().map(Linear::zeros_like).collect(),
        }
    }

    /// `z` is `[batch x latent_channels * latent_dim]` with the latents
    /// concatenated per row.
    pub fn forward(&self, z: ArrayView2<'_, f64>) -> Result<(GaussianBatch, DecoderCache)> {
        if z.ncols() != self.spec.input_dim() {
            return Err(Error::Shape(format!(
                "decoder expects {} latent values per frame, got {}",
                self.spec.input_dim(),
                z.ncols()
            )));
        }
        let len = self.spec.latent_dim;
        let input = unflatten(z, self.spec.latent_channels, len);
        let stack = conv_stack_forward(&self.convs, input, len);
        let mean = self.heads[0].forward(stack.flat.view());
        let log_var = match self.heads.get(1) {
            Some(h) => h.forward(stack.flat.view()),
            None => Array2::zeros(mean.dim()),
        };
        Ok((GaussianBatch { mean, log_var }, DecoderCache { stack }))
    }

    pub fn decode(&self, z: ArrayView2<'_, f64>) -> Result<GaussianBatch> {
        Ok(self.forward(z)?.0)
    }

    /// Returns parameter gradients and `d loss / d z`.
    pub fn backward(
        &self,
        cache: &DecoderCache,
        d_mean: &Array2<f64>,
        d_log_var: &Array2<f64>,
    ) -> (Decoder, Array2<f64>) {
        let mut grads = self.zeros_like();
        let flat = &cache.stack.flat;
        let mut d_flat = Array2::<f64>::zeros(flat.dim());
        self.heads[0].backward(flat.view(), d_mean, &mut grads.heads[0], Some(&mut d_flat));
        if let Some(h) = self.heads.get(1) {
            h.backward(flat.view(), d_log_var, &mut grads.heads[1], Some(&mut d_flat));
        }
        let d_in = conv_stack_backward(
            &self.convs,
            &mut grads.convs,
            &cache.stack,
            &d_flat,
            self.spec.latent_dim,
            true,
        )
        .expect("input gradient requested");
        // d_in is [latent_channels, batch * latent_dim] unless the stack is empty
        let dz = if self.convs.is_empty() {
            d_in
        } else {
            flatten(&d_in, self.spec.latent_dim)
        };
        (grads, dz)
    }
}

impl Parameters for Decoder {
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.extend(prefixed(&format!("conv{i}"), c.tensors()));
        }
        for (i, h) in self.heads.iter().enumerate() {
            out.extend(prefixed(&format!("head{i}"), h.tensors()));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for c in &mut self.convs {
            out.extend(c.tensors_mut());
        }
        for h in &mut self.heads {
            out.extend(h.tensors_mut());
        }
        out
    }
}

/// Exact trainable-parameter count of an encoder or decoder spec.
pub trait ParamCount {
    fn param_count(&self) -> usize;
}

impl ParamCount for EncoderSpec {
    fn param_count(&self) -> usize {
        EncoderSpec::param_count(self)
    }
}

impl ParamCount for DecoderSpec {
    fn param_count(&self) -> usize {
        DecoderSpec::param_count(self)
    }
}

pub fn param_count(spec: &impl ParamCount) -> usize {
    spec.param_count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{s, Array2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_encoder(heads: usize) -> EncoderSpec {
        EncoderSpec {
            input_len: 9,
            conv_channels: vec![2, 3],
            kernel: 3,
            latent_dim: 4,
            num_heads: heads,
        }
    }

    #[test]
    fn single_latent_encoder_yields_one_gaussian_per_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = Encoder::new(tiny_encoder(2), &mut rng).unwrap();
        let x = Array2::from_shape_fn((5, 9), |(i, j)| (i * 9 + j) as f64 * 0.01);
        let out = enc.encode(x.view()).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].mean.dim(), (5, 4));
        assert_eq!(out[0].log_var.dim(), (5, 4));
    }

    #[test]
    fn dual_latent_encoder_yields_two_gaussians_per_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = Encoder::new(tiny_encoder(4), &mut rng).unwrap();
        let x = Array2::zeros((3, 9));
        let out = enc.encode(x.view()).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|g| g.mean.dim() == (3, 4)));
    }

    #[test]
    fn encoder_rejects_wrong_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = Encoder::new(tiny_encoder(2), &mut rng).unwrap();
        assert!(matches!(enc.encode(Array2::zeros((2, 8)).view()), Err(Error::Shape(_))));
    }

    #[test]
    fn outputs_are_deterministic_and_batch_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc = Encoder::new(tiny_encoder(2), &mut rng).unwrap();
        let x = Array2::from_shape_simple_fn((6, 9), || rng.gen_range(-1.0..1.0));
        let a = enc.encode(x.view()).unwrap();
        let b = enc.encode(x.view()).unwrap();
        assert_eq!(a, b);
        let single = enc.encode(x.slice(s![2..3, ..])).unwrap();
        for j in 0..4 {
            assert!((single[0].mean[[0, j]] - a[0].mean[[2, j]]).abs() < 1e-12);
        }
    }

    #[test]
    fn decoder_output_dimension() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = DecoderSpec {
            latent_dim: 4,
            latent_channels: 2,
            conv_channels: vec![3, 2],
            kernel: 3,
            out_dim: 9,
            learned_variance: true,
        };
        let dec = Decoder::new(spec, &mut rng).unwrap();
        let z = Array2::from_shape_simple_fn((3, 8), || rng.gen_range(-1.0..1.0));
        let out = dec.decode(z.view()).unwrap();
        assert_eq!(out.mean.dim(), (3, 9));
        assert_eq!(out.log_var.dim(), (3, 9));
        assert_eq!(dec.decode(z.view()).unwrap(), out);
        assert!(dec.decode(Array2::zeros((1, 4)).view()).is_err());
    }

    #[test]
    fn fixed_variance_decoder_has_one_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = DecoderSpec {
            learned_variance: false,
            ..DecoderSpec::full(1)
        };
        let dec = Decoder::new(spec.clone(), &mut rng).unwrap();
        assert_eq!(dec.heads.len(), 1);
        assert_eq!(dec.num_parameters(), spec.param_count());
    }

    #[test]
    fn standard_specs_count_parameters_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for spec in [EncoderSpec::single_latent(), EncoderSpec::dual_latent()] {
            let enc = Encoder::new(spec.clone(), &mut rng).unwrap();
            assert_eq!(enc.num_parameters(), param_count(&spec));
        }
        for spec in [DecoderSpec::full(1), DecoderSpec::full(2)] {
            let dec = Decoder::new(spec.clone(), &mut rng).unwrap();
            assert_eq!(dec.num_parameters(), param_count(&spec));
        }
    }

    #[test]
    fn degenerate_spec_has_no_parameters() {
        let spec = EncoderSpec {
            input_len: 5,
            conv_channels: vec![],
            kernel: 3,
            latent_dim: 0,
            num_heads: 0,
        };
        assert_eq!(param_count(&spec), 0);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = tiny_encoder(3);
        assert!(spec.validate().is_err());
        spec.num_heads = 2;
        spec.kernel = 2;
        assert!(spec.validate().is_err());
    }
}
