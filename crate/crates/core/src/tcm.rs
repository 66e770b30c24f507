//! Temporal consistency module: a stack of pre-norm transformer layers
//! over the flattened `[N_c * L_f, C_f]` token sequence, with a learned
//! 1-D relative position bias and stochastic depth on residual branches.

use candle_core::{Tensor, D};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::FeatureSource;
use crate::error::{Error, Result};
use crate::nn::{cpu, LayerNorm, Linear, ParamStore};

#[derive(Debug, Clone, PartialEq)]
pub struct TcmConfig {
    pub num_layers: usize,
    pub heads: usize,
    pub droppath_rate: f64,
    /// Relative distances are clipped to `[-d, d]`.
    pub max_relative_distance: usize,
    pub droppath_uniform: bool,
    pub ffn_expansion: usize,
}

impl TcmConfig {
    pub fn new(num_tokens: usize) -> Self {
        TcmConfig {
            num_layers: 3,
            heads: 4,
            droppath_rate: 0.1,
            max_relative_distance: num_tokens.saturating_sub(1).max(1),
            droppath_uniform: false,
            ffn_expansion: 4,
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::InvalidConfig("TCM needs at least one layer".into()));
        }
        if self.heads == 0 || !channels.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(format!(
                "{} heads do not divide {channels} channels",
                self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.droppath_rate) {
            return Err(Error::InvalidConfig(format!(
                "droppath rate {} must be in [0, 1)",
                self.droppath_rate
            )));
        }
        if self.max_relative_distance == 0 || self.ffn_expansion == 0 {
            return Err(Error::InvalidConfig("TCM distances and widths must be positive".into()));
        }
        Ok(())
    }

    /// Droppath rate of layer `i` (0-based).
    pub fn layer_rate(&self, i: usize) -> f64 {
        if self.droppath_uniform {
            self.droppath_rate
        } else {
            self.droppath_rate * (i + 1) as f64 / self.num_layers as f64
        }
    }
}

/// Keeps or drops a residual branch; kept branches are rescaled by
/// `1 / (1 - p)`.
fn drop_path(branch: Tensor, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Option<Tensor>> {
    match rng {
        Some(rng) if rate > 0.0 => {
            if rng.random::<f64>() < rate {
                Ok(None)
            } else {
                Ok(Some((branch / (1.0 - rate))?))
            }
        }
        _ => Ok(Some(branch)),
    }
}

#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    /// `[heads, 2 * max_relative_distance + 1]`.
    pub rel_bias: Tensor,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    heads: usize,
    max_distance: usize,
    droppath_rate: f64,
}

impl TransformerLayer {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, cfg: &TcmConfig, rate: f64) -> Result<Self> {
        let hidden = channels * cfg.ffn_expansion;
        Ok(TransformerLayer {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), channels)?,
            qkv: Linear::new(store, &format!("{name}.qkv"), channels, 3 * channels)?,
            proj: Linear::new(store, &format!("{name}.proj"), channels, channels)?,
            rel_bias: store.uniform(
                &format!("{name}.rel_bias"),
                (cfg.heads, 2 * cfg.max_relative_distance + 1),
                0.02,
            )?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), channels)?,
            fc1: Linear::new(store, &format!("{name}.fc1"), channels, hidden)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, channels)?,
            heads: cfg.heads,
            max_distance: cfg.max_relative_distance,
            droppath_rate: rate,
        })
    }

    /// `[heads, n, n]` bias with entry `(i, j)` read at clipped `j - i`.
    fn position_bias(&self, n: usize) -> Result<Tensor> {
        let d = self.max_distance as i64;
        let idx: Vec<u32> = (0..n as i64)
            .flat_map(|i| (0..n as i64).map(move |j| ((j - i).clamp(-d, d) + d) as u32))
            .collect();
        let idx = Tensor::from_vec(idx, n * n, &cpu())?;
        Ok(self.rel_bias.index_select(&idx, 1)?.reshape((self.heads, n, n))?)
    }

    fn attention(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c) = x.dims2()?;
        let hd = c / self.heads;
        let qkv = self.qkv.forward(x)?.reshape((n, 3, self.heads, hd))?;
        let heads_first = |k: usize| -> Result<Tensor> {
            Ok(qkv.narrow(1, k, 1)?.squeeze(1)?.transpose(0, 1)?.contiguous()?)
        };
        let (q, k, v) = (heads_first(0)?, heads_first(1)?, heads_first(2)?);
        let scores = (q.matmul(&k.t()?)? / (hd as f64).sqrt())?;
        let scores = scores.broadcast_add(&self.position_bias(n)?)?;
        let max = scores.max_keepdim(D::Minus1)?;
        let e = scores.broadcast_sub(&max)?.exp()?;
        let attn = e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?;
        let out = attn.matmul(&v)?.transpose(0, 1)?.reshape((n, c))?;
        self.proj.forward(&out)
    }

    fn feed_forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu()?)
    }

    pub fn forward(&self, x: &Tensor, mut rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        let branch = self.attention(&self.norm1.forward(x)?)?;
        let x = match drop_path(branch, self.droppath_rate, rng.as_deref_mut())? {
            Some(b) => (x + b)?,
            None => x.clone(),
        };
        let branch = self.feed_forward(&self.norm2.forward(&x)?)?;
        Ok(match drop_path(branch, self.droppath_rate, rng)? {
            Some(b) => (x + b)?,
            None => x,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TemporalConsistency {
    pub config: TcmConfig,
    pub layers: Vec<TransformerLayer>,
}

impl TemporalConsistency {
    pub const PREFIX: &'static str = "tcm.";

    pub fn new(store: &mut ParamStore, channels: usize, config: &TcmConfig) -> Result<Self> {
        config.validate(channels)?;
        let layers = (0..config.num_layers)
            .map(|i| TransformerLayer::new(store, &format!("tcm.layer{i}"), channels, config, config.layer_rate(i)))
            .collect::<Result<_>>()?;
        Ok(TemporalConsistency {
            config: config.clone(),
            layers,
        })
    }

    /// `[n, C] -> [n, C]`. Pass a generator to enable droppath (training).
    pub fn forward(&self, tokens: &Tensor, mut train_rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        let total: f32 = tokens.sum_all()?.to_scalar()?;
        if !total.is_finite() {
            return Err(Error::Numeric("non-finite TCM input".into()));
        }
        let mut h = tokens.clone();
        for layer in &self.layers {
            h = layer.forward(&h, train_rng.as_deref_mut())?;
        }
        Ok(h)
    }
}

/// Centroid separation of online and memory tokens in the top-2 principal
/// component plane, before and after the TCM.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsistencyReport {
    pub pre_distance: f64,
    pub post_distance: f64,
    /// `post / pre`; NaN when `pre` is zero.
    pub ratio: f64,
}

fn pca_centroid_distance(tokens: &[Vec<f32>], sources: &[FeatureSource]) -> f64 {
    let n = tokens.len();
    let c = tokens[0].len();
    let x = DMatrix::from_fn(n, c, |i, j| tokens[i][j] as f64);
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, c, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n.max(2) - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let centroid = |which: FeatureSource| -> DVector<f64> {
        let rows: Vec<usize> = (0..n).filter(|&i| sources[i] == which).collect();
        let mut acc = DVector::zeros(c);
        for &i in &rows {
            acc += centered.row(i).transpose();
        }
        acc / rows.len() as f64
    };
    let diff = centroid(FeatureSource::Online) - centroid(FeatureSource::Memory);
    order
        .iter()
        .take(2.min(c))
        .map(|&k| eig.eigenvectors.column(k).dot(&diff).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Returns `None` (with a log notice) unless both sources have at least two
/// tokens.
pub fn consistency_diagnostic(
    pre_tcm: &Tensor,
    post_tcm: &Tensor,
    sources: &[FeatureSource],
) -> Result<Option<ConsistencyReport>> {
    let online = sources.iter().filter(|&&s| s == FeatureSource::Online).count();
    let memory = sources.len() - online;
    if online < 2 || memory < 2 {
        log::info!("consistency diagnostic skipped: {online} online / {memory} memory tokens");
        return Ok(None);
    }
    let pre: Vec<Vec<f32>> = pre_tcm.to_vec2()?;
    let post: Vec<Vec<f32>> = post_tcm.to_vec2()?;
    if pre.len() != sources.len() || post.len() != sources.len() {
        return Err(Error::Contract("token sources do not match token count".into()));
    }
    let pre_distance = pca_centroid_distance(&pre, sources);
    let post_distance = pca_centroid_distance(&post, sources);
    Ok(Some(ConsistencyReport {
        pre_distance,
        post_distance,
        ratio: if pre_distance > 0.0 {
            post_distance / pre_distance
        } else {
            f64::NAN
        },
    }))
}
