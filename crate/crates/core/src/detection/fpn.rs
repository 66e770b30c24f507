use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{cpu, Conv1d, GroupNorm, Linear, Padding, ParamStore};

/// Per-level features `[T_l, C_c]` with `T_{l+1} = ceil(T_l / 2)`.
#[derive(Debug, Clone)]
pub struct PyramidFeatures {
    pub levels: Vec<Tensor>,
    /// Level strides in level-0 tokens.
    pub strides: Vec<usize>,
}

impl PyramidFeatures {
    pub fn lengths(&self) -> Result<Vec<usize>> {
        self.levels.iter().map(|l| Ok(l.dim(0)?)).collect()
    }
}

/// Row `i` holds the weights that linearly resample a length-`src` signal
/// at output position `i` (half-pixel centers, edge clamped).
pub fn interpolation_matrix(src: usize, dst: usize) -> Vec<f32> {
    let mut m = vec![0.0f32; dst * src];
    let scale = src as f64 / dst as f64;
    for i in 0..dst {
        let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(src - 1);
        let w = pos - lo as f64;
        m[i * src + lo] += (1.0 - w) as f32;
        m[i * src + hi] += w as f32;
    }
    m
}

#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub input_proj: Linear,
    /// One group per channel: standardizes each channel over time, removing
    /// the offset every token shares.
    pub input_norm: GroupNorm,
    pub down: Vec<Conv1d>,
    pub down_norm: Vec<GroupNorm>,
    pub lateral: Vec<Linear>,
    pub top_down: Vec<Linear>,
}

impl FeaturePyramid {
    pub const PREFIX: &'static str = "fpn.";

    pub fn new(store: &mut ParamStore, input: usize, channels: usize, num_levels: usize) -> Result<Self> {
        if num_levels == 0 {
            return Err(Error::InvalidConfig("pyramid needs at least one level".into()));
        }
        let down = (1..num_levels)
            .map(|l| Conv1d::he(store, &format!("fpn.down{l}"), channels, channels, 3, 2, Padding::Zeros(1)))
            .collect::<Result<_>>()?;
        let down_norm = (1..num_levels)
            .map(|l| GroupNorm::new(store, &format!("fpn.down{l}.norm"), channels, crate::detection::head_groups(channels)))
            .collect::<Result<_>>()?;
        let lateral = (0..num_levels)
            .map(|l| Linear::new(store, &format!("fpn.lateral{l}"), channels, channels))
            .collect::<Result<_>>()?;
        let top_down = (0..num_levels - 1)
            .map(|l| Linear::new(store, &format!("fpn.top_down{l}"), channels, channels))
            .collect::<Result<_>>()?;
        Ok(FeaturePyramid {
            input_proj: Linear::new(store, "fpn.input_proj", input, channels)?,
            input_norm: GroupNorm::new(store, "fpn.input_norm", channels, channels)?,
            down,
            down_norm,
            lateral,
            top_down,
        })
    }

    pub fn num_levels(&self) -> usize {
        self.lateral.len()
    }

    /// `tokens: [n, C_f]`.
    pub fn forward(&self, tokens: &Tensor) -> Result<PyramidFeatures> {
        let n = tokens.dim(0)?;
        let levels = self.num_levels();
        if n < 1 << (levels - 1) {
            return Err(Error::InvalidConfig(format!(
                "{n} tokens cannot feed a {levels}-level pyramid (need {})",
                1 << (levels - 1)
            )));
        }
        let proj = self.input_proj.forward(tokens)?.t()?.unsqueeze(0)?;
        let proj = self.input_norm.forward(&proj)?.squeeze(0)?.t()?.contiguous()?;
        let mut bottom_up = vec![proj];
        for (conv, norm) in self.down.iter().zip(&self.down_norm) {
            let prev = bottom_up.last().unwrap().t()?.unsqueeze(0)?;
            let next = norm.forward(&conv.forward(&prev)?)?.relu()?.squeeze(0)?.t()?.contiguous()?;
            bottom_up.push(next);
        }
        let mut outputs: Vec<Tensor> = Vec::with_capacity(levels);
        let mut above = self.lateral[levels - 1].forward(&bottom_up[levels - 1])?;
        outputs.push(above.clone());
        for l in (0..levels - 1).rev() {
            let (src, dst) = (above.dim(0)?, bottom_up[l].dim(0)?);
            let interp = Tensor::from_vec(interpolation_matrix(src, dst), (dst, src), &cpu())?;
            let up = self.top_down[l].forward(&interp.matmul(&above)?)?;
            above = (self.lateral[l].forward(&bottom_up[l])? + up)?;
            outputs.push(above.clone());
        }
        outputs.reverse();
        Ok(PyramidFeatures {
            levels: outputs,
            strides: (0..levels).map(|l| 1 << l).collect(),
        })
    }
}
