//! Layer definitions on top of [`Graph`] and [`ParamStore`].
//!
//! Layers hold only parameter ids and hyper-parameters; the values live in a
//! [`ParamStore`] so the same layout can be re-bound to a loaded checkpoint.

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::param::ParamStore;
use crate::tensor::Tensor;

/// Weight initialisation for a freshly registered layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / fan_in)` (variance `2 / fan_in`).
    FanIn,
    Zeros,
}

fn init_tensor<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, init: Init, rng: &mut R) -> Tensor {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::FanIn => {
            let bound = (6.0 / fan_in as f64).sqrt();
            Tensor::rand_uniform(shape, -bound, bound, rng)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Conv2d {
    pub weight: String,
    pub bias: Option<String>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Same-padded square convolution with bias.
    pub fn new(prefix: &str, in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            weight: format!("{prefix}.w"),
            bias: Some(format!("{prefix}.b")),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = None;
        self
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, init: Init, rng: &mut R) -> Result<()> {
        let shape = [self.out_channels, self.in_channels, self.kernel, self.kernel];
        let fan_in = self.in_channels * self.kernel * self.kernel;
        store.insert(&self.weight, init_tensor(&shape, fan_in, init, rng))?;
        if let Some(b) = &self.bias {
            store.insert(b, Tensor::zeros(&[self.out_channels]))?;
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, &self.weight)?;
        let y = g.conv2d(x, w, self.stride, self.padding)?;
        match &self.bias {
            Some(b) => {
                let b = g.param(store, b)?;
                g.add_channel(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(prefix: &str, in_features: usize, out_features: usize) -> Self {
        Self {
            weight: format!("{prefix}.w"),
            bias: Some(format!("{prefix}.b")),
            in_features,
            out_features,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, init: Init, rng: &mut R) -> Result<()> {
        let shape = [self.out_features, self.in_features];
        store.insert(&self.weight, init_tensor(&shape, self.in_features, init, rng))?;
        if let Some(b) = &self.bias {
            store.insert(b, Tensor::zeros(&[self.out_features]))?;
        }
        Ok(())
    }

    /// `x: [M, in] → [M, out]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, &self.weight)?;
        let b = match &self.bias {
            Some(b) => Some(g.param(store, b)?),
            None => None,
        };
        g.linear(x, w, b)
    }
}

/// `x + conv2(silu(conv1(x) [+ time]))`.
///
/// The second convolution is zero-initialised, so a fresh block is the identity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub time_proj: Option<Linear>,
}

impl ResidualBlock {
    pub fn new(prefix: &str, channels: usize) -> Self {
        Self {
            conv1: Conv2d::new(&format!("{prefix}.conv1"), channels, channels, 3, 1),
            conv2: Conv2d::new(&format!("{prefix}.conv2"), channels, channels, 3, 1),
            time_proj: None,
        }
    }

    /// Block that adds a projected time embedding after the first convolution.
    pub fn with_time(prefix: &str, channels: usize, time_features: usize) -> Self {
        Self {
            time_proj: Some(Linear::new(&format!("{prefix}.time"), time_features, channels)),
            ..Self::new(prefix, channels)
        }
    }

    pub fn channels(&self) -> usize {
        self.conv1.in_channels
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.conv1.init(store, Init::FanIn, rng)?;
        self.conv2.init(store, Init::Zeros, rng)?;
        if let Some(t) = &self.time_proj {
            t.init(store, Init::FanIn, rng)?;
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, time: Option<Var>) -> Result<Var> {
        let c = g.shape(x).get(1).copied().unwrap_or(0);
        if c != self.channels() {
            return Err(crate::Error::Config(format!(
                "residual block expects {} channels, input has shape {:?}",
                self.channels(),
                g.shape(x)
            )));
        }
        let mut h = self.conv1.forward(g, store, x)?;
        if let (Some(proj), Some(t)) = (&self.time_proj, time) {
            let t = proj.forward(g, store, t)?;
            h = g.add_channel(h, t)?;
        }
        let h = g.silu(h);
        let h = self.conv2.forward(g, store, h)?;
        g.add(x, h)
    }
}
