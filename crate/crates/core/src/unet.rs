//! Small time-conditioned UNet predicting the noise on the target track.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::LATENT_CHANNELS;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv2d, Init, Linear, ResidualBlock};
use crate::param::ParamStore;
use crate::tensor::Tensor;

/// Noisy target (4) + condition latents (4) + mask (1).
pub const INPUT_CHANNELS: usize = 2 * LATENT_CHANNELS + 1;
pub const OUTPUT_CHANNELS: usize = LATENT_CHANNELS;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    /// Channels per resolution level, finest first.
    pub channels: Vec<usize>,
    /// Width of the sinusoidal timestep embedding (even).
    pub time_dim: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 32],
            time_dim: 16,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config(format!("UNet channels must be non-empty and positive, got {:?}", self.channels)));
        }
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("UNet time_dim must be positive and even, got {}", self.time_dim)));
        }
        Ok(())
    }

    /// Spatial dims must be divisible by this factor.
    pub fn reduction(&self) -> usize {
        1 << (self.channels.len() - 1)
    }
}

/// `[sin(t·f_0), …, sin(t·f_{k−1}), cos(t·f_0), …]` with `f_i = 10000^(−i/k)`.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

/// Single-head self-attention over the spatial positions of a feature map,
/// with a residual connection. The output projection starts at zero.
#[derive(Clone, Debug, PartialEq)]
pub struct SelfAttention {
    pub channels: usize,
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
}

impl SelfAttention {
    pub fn new(prefix: &str, channels: usize) -> Self {
        Self {
            channels,
            query: Linear::new(&format!("{prefix}.q"), channels, channels),
            key: Linear::new(&format!("{prefix}.k"), channels, channels),
            value: Linear::new(&format!("{prefix}.v"), channels, channels),
            out: Linear::new(&format!("{prefix}.out"), channels, channels),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.query.init(store, Init::FanIn, rng)?;
        self.key.init(store, Init::FanIn, rng)?;
        self.value.init(store, Init::FanIn, rng)?;
        self.out.init(store, Init::Zeros, rng)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.channels {
            return Err(Error::Config(format!(
                "attention expects N×{}×h×w, got {s:?}",
                self.channels
            )));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let scale = 1.0 / (c as f64).sqrt();
        let mut outs = Vec::with_capacity(n);
        for i in 0..n {
            let xi = if n == 1 { x } else { g.narrow(x, 0, i, 1)? };
            let flat = g.reshape(xi, &[c, h * w])?;
            let tokens = g.transpose(flat)?;
            let q = self.query.forward(g, store, tokens)?;
            let k = self.key.forward(g, store, tokens)?;
            let v = self.value.forward(g, store, tokens)?;
            let kt = g.transpose(k)?;
            let scores = g.matmul(q, kt)?;
            let scores = g.scale(scores, scale);
            let weights = g.softmax_rows(scores)?;
            let mixed = g.matmul(weights, v)?;
            let projected = self.out.forward(g, store, mixed)?;
            let back = g.transpose(projected)?;
            outs.push(g.reshape(back, &[1, c, h, w])?);
        }
        let y = if n == 1 { outs[0] } else { g.concat(&outs, 0)? };
        g.add(x, y)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UNet {
    pub config: UNetConfig,
    time1: Linear,
    time2: Linear,
    conv_in: Conv2d,
    down_res: Vec<ResidualBlock>,
    down_conv: Vec<Conv2d>,
    attention: SelfAttention,
    up_conv: Vec<Conv2d>,
    up_res: Vec<ResidualBlock>,
    conv_out: Conv2d,
}

impl UNet {
    pub fn new(config: UNetConfig) -> Result<Self> {
        config.validate()?;
        let ch = &config.channels;
        let td = config.time_dim;
        let levels = ch.len();
        let down_res = (0..levels)
            .map(|i| ResidualBlock::with_time(&format!("gmf.unet.down{i}.res"), ch[i], td))
            .collect();
        let down_conv = (0..levels - 1)
            .map(|i| Conv2d::new(&format!("gmf.unet.down{i}.conv"), ch[i], ch[i + 1], 3, 2))
            .collect();
        let up_conv = (0..levels - 1)
            .map(|i| Conv2d::new(&format!("gmf.unet.up{i}.conv"), ch[i + 1] + ch[i], ch[i], 3, 1))
            .collect();
        let up_res = (0..levels - 1)
            .map(|i| ResidualBlock::with_time(&format!("gmf.unet.up{i}.res"), ch[i], td))
            .collect();
        Ok(Self {
            time1: Linear::new("gmf.unet.time1", td, td),
            time2: Linear::new("gmf.unet.time2", td, td),
            conv_in: Conv2d::new("gmf.unet.conv_in", INPUT_CHANNELS, ch[0], 3, 1),
            down_res,
            down_conv,
            attention: SelfAttention::new("gmf.unet.attn", ch[levels - 1]),
            up_conv,
            up_res,
            conv_out: Conv2d::new("gmf.unet.conv_out", ch[0], OUTPUT_CHANNELS, 3, 1),
            config,
        })
    }

    /// Register fresh parameters (ids prefixed `gmf.unet.`). The output
    /// convolution starts at zero.
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.time1.init(store, Init::FanIn, rng)?;
        self.time2.init(store, Init::FanIn, rng)?;
        self.conv_in.init(store, Init::FanIn, rng)?;
        for r in &self.down_res {
            r.init(store, rng)?;
        }
        for c in &self.down_conv {
            c.init(store, Init::FanIn, rng)?;
        }
        self.attention.init(store, rng)?;
        for c in &self.up_conv {
            c.init(store, Init::FanIn, rng)?;
        }
        for r in &self.up_res {
            r.init(store, rng)?;
        }
        self.conv_out.init(store, Init::Zeros, rng)
    }

    /// Noise prediction `N×4×h×w` for input `N×9×h×w` at timesteps `t` (one per sample).
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, t: &[usize]) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let r = self.config.reduction();
        if s.len() != 4 || s[1] != INPUT_CHANNELS || !s[2].is_multiple_of(r) || !s[3].is_multiple_of(r) || s[0] != t.len() {
            return Err(Error::Input(format!(
                "denoiser expects N×{INPUT_CHANNELS}×h×w with h, w multiples of {r} and N = {} timesteps, got {s:?}",
                t.len()
            )));
        }
        let td = self.config.time_dim;
        let emb: Vec<f64> = t.iter().flat_map(|&ti| timestep_embedding(ti, td)).collect();
        let emb = g.constant(&Tensor::new(vec![t.len(), td], emb)?);
        let temb = self.time1.forward(g, store, emb)?;
        let temb = g.silu(temb);
        let temb = self.time2.forward(g, store, temb)?;

        let levels = self.config.channels.len();
        let mut h = self.conv_in.forward(g, store, x)?;
        let mut skips = Vec::with_capacity(levels - 1);
        for i in 0..levels {
            h = self.down_res[i].forward(g, store, h, Some(temb))?;
            if i + 1 < levels {
                skips.push(h);
                h = self.down_conv[i].forward(g, store, h)?;
                h = g.silu(h);
            }
        }
        h = self.attention.forward(g, store, h)?;
        for i in (0..levels - 1).rev() {
            h = g.upsample_nearest(h, 2)?;
            h = g.concat(&[h, skips[i]], 1)?;
            h = self.up_conv[i].forward(g, store, h)?;
            h = g.silu(h);
            h = self.up_res[i].forward(g, store, h, Some(temb))?;
        }
        let h = g.silu(h);
        self.conv_out.forward(g, store, h)
    }
}
