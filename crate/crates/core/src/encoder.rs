//! Short-term clip encoder.
//!
//! A backbone maps each clip `[L_c, H, W, 3]` to pre-reducer features
//! `[L_raw, C_f]` with `L_raw = L_c / 2`; the temporal reducer then applies
//! two stride-2 convolutions to reach `[L_f, C_f]`, `L_f = L_c / 8`. The
//! feature memory caches the backbone output so reducer updates reach both
//! fresh and cached clips.

use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};
use crate::nn::{cpu, Conv1d, Padding, ParamStore};

/// Where a clip's features came from in a training step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeatureSource {
    Online,
    Memory,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderSpec {
    pub identifier: String,
    pub clip_len: usize,
    /// Total temporal downsampling from frames to `L_f` tokens.
    pub temporal_downsample: usize,
    pub channels: usize,
    pub hidden: usize,
    pub trainable: bool,
}

impl EncoderSpec {
    pub const BACKBONE_DOWNSAMPLE: usize = 2;
    pub const REDUCER_DOWNSAMPLE: usize = 4;

    pub fn toy(clip_len: usize, channels: usize) -> Self {
        EncoderSpec {
            identifier: "toy-conv3d".into(),
            clip_len,
            temporal_downsample: Self::BACKBONE_DOWNSAMPLE * Self::REDUCER_DOWNSAMPLE,
            channels,
            hidden: 16,
            trainable: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.temporal_downsample != Self::BACKBONE_DOWNSAMPLE * Self::REDUCER_DOWNSAMPLE {
            return Err(Error::InvalidConfig(format!(
                "toy encoder downsamples by {}, spec asks {}",
                Self::BACKBONE_DOWNSAMPLE * Self::REDUCER_DOWNSAMPLE,
                self.temporal_downsample
            )));
        }
        if self.clip_len == 0 || !self.clip_len.is_multiple_of(self.temporal_downsample) {
            return Err(Error::InvalidConfig(format!(
                "temporal downsample {} must divide clip length {}",
                self.temporal_downsample, self.clip_len
            )));
        }
        if self.channels == 0 || self.hidden == 0 {
            return Err(Error::InvalidConfig("encoder channels must be positive".into()));
        }
        Ok(())
    }

    pub fn raw_len(&self) -> usize {
        self.clip_len / Self::BACKBONE_DOWNSAMPLE
    }

    pub fn feature_len(&self) -> usize {
        self.clip_len / self.temporal_downsample
    }
}

/// Clip backbone: `[N, L_c, H, W, 3] -> [N, L_raw, C_f]`.
pub trait ClipBackbone: Send + Sync {
    fn forward(&self, clips: &Tensor, track: &ActivationMeter) -> Result<Tensor>;
    fn param_prefix(&self) -> &str;
}

/// Counts scalar activations a forward pass keeps alive for backprop.
#[derive(Debug, Default)]
pub struct ActivationMeter {
    enabled: bool,
    count: AtomicUsize,
}

impl ActivationMeter {
    pub fn new(enabled: bool) -> Self {
        ActivationMeter {
            enabled,
            count: AtomicUsize::new(0),
        }
    }

    pub fn record(&self, t: &Tensor) {
        if self.enabled {
            self.count.fetch_add(t.elem_count(), Ordering::Relaxed);
        }
    }

    pub fn total(&self) -> usize {
        self.count.load(Ordering::Relaxed)
    }
}

/// Factorized 3-D convolution: one 2-D convolution per temporal tap,
/// summed over taps. Input and output are `[N, T, C, H, W]`.
#[derive(Debug, Clone)]
struct Conv3d {
    weight: Tensor,
    bias: Tensor,
    temporal_stride: usize,
    spatial_stride: usize,
}

impl Conv3d {
    fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        temporal_stride: usize,
        spatial_stride: usize,
    ) -> Result<Self> {
        // He-uniform: the GELU stack and global pooling otherwise shrink the
        // per-clip signal well below the bias terms.
        let bound = (6.0 / (input * 27) as f32).sqrt();
        Ok(Conv3d {
            weight: store.uniform(&format!("{name}.weight"), (output, input, 3, 3, 3), bound)?,
            bias: store.constant(&format!("{name}.bias"), output, 0.0)?,
            temporal_stride,
            spatial_stride,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, t, c, h, w) = x.dims5()?;
        let padded = x.pad_with_zeros(1, 1, 1)?;
        let t_out = (t - 1) / self.temporal_stride + 1;
        let mut acc: Option<Tensor> = None;
        for k in 0..3 {
            let idx: Vec<u32> = (0..t_out).map(|i| (i * self.temporal_stride + k) as u32).collect();
            let idx = Tensor::from_vec(idx, t_out, &cpu())?;
            let frames = padded.index_select(&idx, 1)?.reshape((n * t_out, c, h, w))?;
            let tap = self.weight.narrow(2, k, 1)?.squeeze(2)?.contiguous()?;
            let y = frames.conv2d(&tap, 1, self.spatial_stride, 1, 1)?;
            acc = Some(match acc {
                Some(a) => (a + y)?,
                None => y,
            });
        }
        let y = acc.expect("three taps");
        let (_, co, ho, wo) = y.dims4()?;
        let y = y.broadcast_add(&self.bias.reshape((1, co, 1, 1))?)?;
        Ok(y.reshape((n, t_out, co, ho, wo))?)
    }
}

/// Fixed input standardization applied to `[0, 1]` pixels.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;

/// Two spatiotemporal convolution blocks, each followed by per-frame
/// normalization and GELU, then spatial max pooling; temporal stride 2 in
/// the second block.
#[derive(Debug, Clone)]
pub struct ToyBackbone {
    block1: Conv3d,
    norm1: FrameNorm,
    block2: Conv3d,
    norm2: FrameNorm,
}

/// Per-frame normalization over `(C, H, W)` with a per-channel affine.
#[derive(Debug, Clone)]
struct FrameNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl FrameNorm {
    fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(FrameNorm {
            gamma: store.constant(&format!("{name}.gamma"), channels, 1.0)?,
            beta: store.constant(&format!("{name}.beta"), channels, 0.0)?,
        })
    }

    /// `x: [N, T, C, H, W]`.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, t, c, h, w) = x.dims5()?;
        let flat = x.reshape((n * t, c * h * w))?;
        let centered = flat.broadcast_sub(&flat.mean_keepdim(1)?)?;
        let var = centered.sqr()?.mean_keepdim(1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?.reshape((n, t, c, h, w))?;
        let shape = (1, 1, c, 1, 1);
        Ok(normed
            .broadcast_mul(&self.gamma.reshape(shape)?)?
            .broadcast_add(&self.beta.reshape(shape)?)?)
    }
}

impl ToyBackbone {
    pub const PREFIX: &'static str = "encoder.";

    pub fn new(spec: &EncoderSpec, store: &mut ParamStore) -> Result<Self> {
        Ok(ToyBackbone {
            block1: Conv3d::new(store, "encoder.block1", 3, spec.hidden, 1, 2)?,
            norm1: FrameNorm::new(store, "encoder.norm1", spec.hidden)?,
            block2: Conv3d::new(store, "encoder.block2", spec.hidden, spec.channels, 2, 2)?,
            norm2: FrameNorm::new(store, "encoder.norm2", spec.channels)?,
        })
    }
}

impl ClipBackbone for ToyBackbone {
    fn forward(&self, clips: &Tensor, meter: &ActivationMeter) -> Result<Tensor> {
        // [N, T, H, W, 3] -> [N, T, 3, H, W]
        let x = clips.permute((0, 1, 4, 2, 3))?.contiguous()?;
        let x = ((x - PIXEL_MEAN)? / PIXEL_STD)?;
        meter.record(&x);
        let y = self.block1.forward(&x)?;
        meter.record(&y);
        let y = self.norm1.forward(&y)?;
        meter.record(&y);
        let y = y.gelu()?;
        meter.record(&y);
        let y = self.block2.forward(&y)?;
        meter.record(&y);
        let y = self.norm2.forward(&y)?;
        meter.record(&y);
        let y = y.gelu()?;
        meter.record(&y);
        let pooled = y.max(4)?.max(3)?;
        meter.record(&pooled);
        Ok(pooled)
    }

    fn param_prefix(&self) -> &str {
        Self::PREFIX
    }
}

/// Two kernel-3, stride-2 temporal convolutions with edge-replicated
/// padding: `[B, L_raw, C] -> [B, L_raw / 4, C]`.
#[derive(Debug, Clone)]
pub struct TemporalReducer {
    pub conv1: Conv1d,
    pub conv2: Conv1d,
}

impl TemporalReducer {
    pub const PREFIX: &'static str = "reducer.";

    pub fn new(store: &mut ParamStore, channels: usize) -> Result<Self> {
        Ok(TemporalReducer {
            conv1: Conv1d::new(store, "reducer.conv1", channels, channels, 3, 2, Padding::Replicate(1))?,
            conv2: Conv1d::new(store, "reducer.conv2", channels, channels, 3, 2, Padding::Replicate(1))?,
        })
    }

    pub fn forward(&self, features: &Tensor) -> Result<Tensor> {
        let (_, len, _) = features.dims3()?;
        if len % 4 != 0 {
            return Err(Error::Contract(format!(
                "temporal reducer needs a length divisible by 4, got {len}"
            )));
        }
        let x = features.transpose(1, 2)?;
        let x = self.conv1.forward(&x)?;
        let x = self.conv2.forward(&x)?;
        Ok(x.transpose(1, 2)?.contiguous()?)
    }
}

/// `[L_raw, C_f] -> [L_f, C_f]` for a single clip.
pub fn temporal_reduce(reducer: &TemporalReducer, features: &Tensor) -> Result<Tensor> {
    Ok(reducer.forward(&features.unsqueeze(0)?)?.squeeze(0)?)
}

/// The clip encoder handle: backbone plus temporal reducer.
pub struct Encoder {
    pub spec: EncoderSpec,
    pub backbone: Box<dyn ClipBackbone>,
    pub reducer: TemporalReducer,
    num_parameters: usize,
}

impl std::fmt::Debug for Encoder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Encoder")
            .field("spec", &self.spec)
            .field("num_parameters", &self.num_parameters)
            .finish()
    }
}

/// Builds the default toy encoder. Initial weights depend only on the
/// store's seed.
pub fn build_toy_encoder(spec: &EncoderSpec, store: &mut ParamStore) -> Result<Encoder> {
    spec.validate()?;
    let before = store.num_scalars();
    let backbone = ToyBackbone::new(spec, store)?;
    let reducer = TemporalReducer::new(store, spec.channels)?;
    Ok(Encoder {
        spec: spec.clone(),
        backbone: Box::new(backbone),
        reducer,
        num_parameters: store.num_scalars() - before,
    })
}

impl Encoder {
    pub fn num_parameters(&self) -> usize {
        self.num_parameters
    }

    pub fn backbone_prefix(&self) -> &str {
        self.backbone.param_prefix()
    }

    fn check_clips(&self, clips: &Tensor) -> Result<usize> {
        let dims = clips.dims();
        if dims.len() != 5 || dims[1] != self.spec.clip_len || dims[4] != 3 {
            return Err(Error::Contract(format!(
                "expected clips [N, {}, H, W, 3], got {dims:?}",
                self.spec.clip_len
            )));
        }
        Ok(dims[0])
    }

    /// Backbone features `[N, L_raw, C_f]`. Gradients flow only when
    /// `train_mode` is set and the encoder is trainable.
    pub fn encode_raw(&self, clips: &Tensor, train_mode: bool, meter: &ActivationMeter) -> Result<Tensor> {
        let n = self.check_clips(clips)?;
        if n == 0 {
            return Ok(Tensor::zeros((0, self.spec.raw_len(), self.spec.channels), DType::F32, &cpu())?);
        }
        let track = train_mode && self.spec.trainable;
        let quiet = ActivationMeter::new(false);
        let y = self.backbone.forward(clips, if track { meter } else { &quiet })?;
        Ok(if track { y } else { y.detach() })
    }

    pub fn reduce(&self, raw: &Tensor) -> Result<Tensor> {
        if raw.dim(0)? == 0 {
            return Ok(Tensor::zeros((0, self.spec.feature_len(), self.spec.channels), DType::F32, &cpu())?);
        }
        self.reducer.forward(raw)
    }

    /// `[N, L_c, H, W, 3] -> [N, L_f, C_f]`.
    pub fn encode_clips(&self, clips: &Tensor, train_mode: bool) -> Result<Tensor> {
        let raw = self.encode_raw(clips, train_mode, &ActivationMeter::new(false))?;
        self.reduce(&raw)
    }
}

/// Builds the `[N, L_c, H, W, 3]` tensor for the listed clips.
pub fn clips_tensor(clips: &crate::video::ClipArray, idx: &[usize]) -> Result<Tensor> {
    Ok(Tensor::from_vec(
        clips.gather(idx),
        (idx.len(), clips.clip_len, clips.height, clips.width, 3),
        &cpu(),
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_clips(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..n * 16 * 8 * 8 * 3).map(|_| rng.random()).collect();
        Tensor::from_vec(data, (n, 16, 8, 8, 3), &cpu()).unwrap()
    }

    fn toy(seed: u64, channels: usize) -> (ParamStore, Encoder) {
        let mut store = ParamStore::new(seed);
        let enc = build_toy_encoder(&EncoderSpec::toy(16, channels), &mut store).unwrap();
        (store, enc)
    }

    #[test]
    fn output_shapes() {
        let (_, enc) = toy(0, 64);
        let out = enc.encode_clips(&random_clips(2, 1), false).unwrap();
        assert_eq!(out.dims(), &[2, 2, 64]);
        let empty = enc.encode_clips(&random_clips(0, 1), false).unwrap();
        assert_eq!(empty.dims(), &[0, 2, 64]);
        assert!(enc.num_parameters() > 0);
    }

    #[test]
    fn clip_len_32_gives_four_tokens() {
        let spec = EncoderSpec::toy(32, 8);
        assert_eq!(spec.feature_len(), 4);
        assert_eq!(spec.raw_len(), 16);
    }

    #[test]
    fn shape_mismatch_is_a_contract_error() {
        let (_, enc) = toy(0, 8);
        let bad = Tensor::zeros((1, 8, 8, 8, 3), DType::F32, &cpu()).unwrap();
        assert!(matches!(enc.encode_clips(&bad, false), Err(Error::Contract(_))));
    }

    #[test]
    fn identical_clips_give_identical_rows() {
        let (_, enc) = toy(0, 8);
        let one = random_clips(1, 4);
        let two = Tensor::cat(&[&one, &one], 0).unwrap();
        let out: Vec<Vec<Vec<f32>>> = enc.encode_clips(&two, false).unwrap().to_vec3().unwrap();
        assert_eq!(out[0], out[1]);
    }

    #[test]
    fn same_seed_same_parameters() {
        let (a, _) = toy(9, 8);
        let (b, _) = toy(9, 8);
        let (c, _) = toy(10, 8);
        assert_eq!(a.snapshot().unwrap(), b.snapshot().unwrap());
        assert_ne!(a.snapshot().unwrap(), c.snapshot().unwrap());
    }

    #[test]
    fn reducer_length_contract() {
        let mut store = ParamStore::new(0);
        let r = TemporalReducer::new(&mut store, 4).unwrap();
        let x = Tensor::zeros((16, 4), DType::F32, &cpu()).unwrap();
        assert_eq!(temporal_reduce(&r, &x).unwrap().dims(), &[4, 4]);
        let x = Tensor::zeros((6, 4), DType::F32, &cpu()).unwrap();
        assert!(matches!(temporal_reduce(&r, &x), Err(Error::Contract(_))));
    }

    #[test]
    fn averaging_reducer_keeps_constant_sequences_constant() {
        let mut store = ParamStore::new(0);
        let c = 3;
        let r = TemporalReducer::new(&mut store, c).unwrap();
        // w[o][i][k] = 1/3 if o == i
        let mut w = vec![0.0f32; c * c * 3];
        for o in 0..c {
            for k in 0..3 {
                w[(o * c + o) * 3 + k] = 1.0 / 3.0;
            }
        }
        for name in ["reducer.conv1", "reducer.conv2"] {
            store.set(&format!("{name}.weight"), &w).unwrap();
            store.set(&format!("{name}.bias"), &[0.0; 3]).unwrap();
        }
        let x = Tensor::from_vec(
            (0..16).flat_map(|_| [0.5f32, -1.0, 2.0]).collect::<Vec<_>>(),
            (16, 3),
            &cpu(),
        )
        .unwrap();
        let y: Vec<Vec<f32>> = temporal_reduce(&r, &x).unwrap().to_vec2().unwrap();
        assert_eq!(y.len(), 4);
        for row in y {
            for (v, e) in row.iter().zip([0.5, -1.0, 2.0]) {
                assert!((v - e).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn every_parameter_block_receives_gradient() {
        let (store, enc) = toy(3, 8);
        let out = enc.encode_clips(&random_clips(2, 5), true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cot: Vec<f32> = (0..out.elem_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cot = Tensor::from_vec(cot, out.dims(), &cpu()).unwrap();
        let grads = (out * cot).unwrap().sum_all().unwrap().backward().unwrap();
        for (name, var) in store.vars() {
            let g = grads.get(var.as_tensor()).unwrap_or_else(|| panic!("no grad for {name}"));
            let gsum: f32 = g.abs().unwrap().sum_all().unwrap().to_scalar().unwrap();
            assert!(gsum > 0.0, "{name} has all-zero gradient");
        }
    }

    #[test]
    fn frozen_encoder_detaches_its_output() {
        let mut store = ParamStore::new(3);
        let mut spec = EncoderSpec::toy(16, 8);
        spec.trainable = false;
        let enc = build_toy_encoder(&spec, &mut store).unwrap();
        let meter = ActivationMeter::new(true);
        let raw = enc.encode_raw(&random_clips(1, 5), true, &meter).unwrap();
        assert_eq!(meter.total(), 0);
        let grads = enc.reduce(&raw).unwrap().sum_all().unwrap().backward().unwrap();
        let w = store.get("encoder.block1.weight").unwrap();
        assert!(grads.get(w.as_tensor()).is_none());
    }

    #[test]
    fn one_step_reduces_a_reconstruction_probe() {
        // probe: predict each clip's mean pixel intensity from its mean feature
        let (store, enc) = toy(21, 8);
        let mut probe_store = ParamStore::new(22);
        let probe = crate::nn::Linear::new(&mut probe_store, "probe", 8, 1).unwrap();
        let clips = random_clips(4, 8);
        let target = clips.flatten_from(1).unwrap().mean_keepdim(1).unwrap();
        let loss_of = || -> Tensor {
            let feats = enc.encode_clips(&clips, true).unwrap().mean(1).unwrap();
            let pred = probe.forward(&feats).unwrap();
            (pred - &target).unwrap().sqr().unwrap().mean_all().unwrap()
        };
        let before = loss_of();
        let grads = before.backward().unwrap();
        for (_, var) in store.vars().chain(probe_store.vars()) {
            if let Some(g) = grads.get(var.as_tensor()) {
                var.set(&(var.as_tensor() - (g * 0.05).unwrap()).unwrap()).unwrap();
            }
        }
        let before: f32 = before.to_scalar().unwrap();
        let after: f32 = loss_of().to_scalar().unwrap();
        assert!(after < before, "probe loss {before} -> {after}");
    }
}
