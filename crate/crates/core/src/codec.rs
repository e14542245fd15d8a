//! Latent codec: images `3×H×W` to latents `4×(H/8)×(W/8)` and back.
//!
//! The default codec is a fixed linear map: every 8×8 RGB block (192 values,
//! ordered `c·64 + dy·8 + dx`) is projected onto four orthonormal columns.
//! Columns 0–2 are the per-channel block means (scaled by 8), column 3 is a
//! top-minus-bottom luminance contrast. Decoding applies the transpose and
//! clamps to `[0, 1]`, so `decode ∘ encode` is the rank-4 projector `P·Pᵀ`
//! per block.
//!
//! A learned mode (small per-block autoencoder trained on reconstruction
//! MSE) sits behind the same interface.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv2d, Init};
use crate::optim::{AdamWConfig, OptimizerState};
use crate::param::ParamStore;
use crate::tensor::Tensor;

pub const BLOCK: usize = 8;
pub const LATENT_CHANNELS: usize = 4;
pub const PATCH: usize = 3 * BLOCK * BLOCK;
/// Parameter id of the fixed projection inside checkpoints.
pub const PROJECTION_ID: &str = "codec.projection";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CodecMode {
    #[default]
    FixedOrthogonal,
    Learned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    pub mode: CodecMode,
    /// Reconstruction steps for the learned codec; unused in fixed mode.
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            mode: CodecMode::FixedOrthogonal,
            steps: 500,
            batch_size: 8,
            optimizer: AdamWConfig {
                learning_rate: 1e-3,
                ..AdamWConfig::default()
            },
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mode == CodecMode::Learned && self.batch_size == 0 {
            return Err(Error::Config("codec batch_size must be positive".into()));
        }
        self.optimizer.validate()
    }
}

/// Latent tensor `4×h×w` together with the pixel dims it was encoded from.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentImage {
    pub data: Tensor,
    pub source_dims: (usize, usize),
}

impl LatentImage {
    pub fn new(data: Tensor, source_dims: (usize, usize)) -> Result<Self> {
        let s = data.shape();
        if s.len() != 3 || s[0] != LATENT_CHANNELS || s[1] * BLOCK != source_dims.0 || s[2] * BLOCK != source_dims.1 {
            return Err(Error::Input(format!(
                "latent shape {s:?} does not match source dims {source_dims:?}"
            )));
        }
        Ok(Self { data, source_dims })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            data: Tensor::zeros(self.data.shape()),
            source_dims: self.source_dims,
        }
    }

    /// Spatial dims `(h, w)`.
    pub fn dims(&self) -> (usize, usize) {
        (self.data.shape()[1], self.data.shape()[2])
    }
}

/// The four orthonormal columns of the fixed codec, row-major `192×4`.
pub fn fixed_projection() -> Tensor {
    let mut p = Tensor::zeros(&[PATCH, LATENT_CHANNELS]);
    let area = BLOCK * BLOCK;
    let contrast = 1.0 / (PATCH as f64).sqrt();
    let d = p.data_mut();
    for c in 0..3 {
        for dy in 0..BLOCK {
            for dx in 0..BLOCK {
                let row = c * area + dy * BLOCK + dx;
                d[row * LATENT_CHANNELS + c] = 1.0 / BLOCK as f64;
                let sign = if dy < BLOCK / 2 { 1.0 } else { -1.0 };
                d[row * LATENT_CHANNELS + 3] = sign * contrast;
            }
        }
    }
    p
}

#[derive(Clone, Debug, PartialEq)]
pub struct LearnedCodec {
    enc1: Conv2d,
    enc2: Conv2d,
    dec1: Conv2d,
    dec2: Conv2d,
    pub params: ParamStore,
}

impl LearnedCodec {
    pub const HIDDEN: usize = 32;

    fn layout() -> (Conv2d, Conv2d, Conv2d, Conv2d) {
        let h = Self::HIDDEN;
        (
            Conv2d::new("codec.enc1", PATCH, h, 1, 1),
            Conv2d::new("codec.enc2", h, LATENT_CHANNELS, 1, 1),
            Conv2d::new("codec.dec1", LATENT_CHANNELS, h, 1, 1),
            Conv2d::new("codec.dec2", h, PATCH, 1, 1),
        )
    }

    pub fn init<R: Rng + ?Sized>(rng: &mut R) -> Result<Self> {
        let (enc1, enc2, dec1, dec2) = Self::layout();
        let mut params = ParamStore::new();
        for c in [&enc1, &enc2, &dec1, &dec2] {
            c.init(&mut params, Init::FanIn, rng)?;
        }
        Ok(Self {
            enc1,
            enc2,
            dec1,
            dec2,
            params,
        })
    }

    pub fn from_params(params: ParamStore) -> Result<Self> {
        let (enc1, enc2, dec1, dec2) = Self::layout();
        for c in [&enc1, &enc2, &dec1, &dec2] {
            params.get(&c.weight)?;
        }
        Ok(Self {
            enc1,
            enc2,
            dec1,
            dec2,
            params,
        })
    }

    /// `[N, 3, H, W] → [N, 4, H/8, W/8]`
    pub fn encode_var(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let p = g.space_to_depth(x, BLOCK)?;
        let h = self.enc1.forward(g, store, p)?;
        let h = g.silu(h);
        self.enc2.forward(g, store, h)
    }

    /// `[N, 4, h, w] → [N, 3, 8h, 8w]`, unclamped.
    pub fn decode_var(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Result<Var> {
        let h = self.dec1.forward(g, store, z)?;
        let h = g.silu(h);
        let p = self.dec2.forward(g, store, h)?;
        g.depth_to_space(p, BLOCK)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentCodec {
    pub mode: CodecMode,
    projection: Tensor,
    learned: Option<LearnedCodec>,
}

impl Default for LatentCodec {
    fn default() -> Self {
        Self::fixed()
    }
}

fn check_image(image: &Tensor) -> Result<(usize, usize)> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Input(format!("expected a 3×H×W image, got shape {s:?}")));
    }
    if !s[1].is_multiple_of(BLOCK) || !s[2].is_multiple_of(BLOCK) {
        return Err(Error::Input(format!(
            "image dims {}×{} must both be multiples of {BLOCK}",
            s[1], s[2]
        )));
    }
    Ok((s[1], s[2]))
}

impl LatentCodec {
    pub fn fixed() -> Self {
        Self {
            mode: CodecMode::FixedOrthogonal,
            projection: fixed_projection(),
            learned: None,
        }
    }

    pub fn learned(codec: LearnedCodec) -> Self {
        Self {
            mode: CodecMode::Learned,
            projection: fixed_projection(),
            learned: Some(codec),
        }
    }

    /// The codec described by `config`; learned mode trains on `images`
    /// and also returns the reconstruction losses.
    pub fn build<R: Rng + ?Sized>(config: &CodecConfig, images: &[Tensor], rng: &mut R) -> Result<(Self, Vec<f64>)> {
        config.validate()?;
        match config.mode {
            CodecMode::FixedOrthogonal => Ok((Self::fixed(), Vec::new())),
            CodecMode::Learned => {
                let mut codec = Self::learned(LearnedCodec::init(rng)?);
                let losses = codec.train_learned(images, config.steps, config.batch_size, config.optimizer, rng)?;
                Ok((codec, losses))
            }
        }
    }

    pub fn projection(&self) -> &Tensor {
        &self.projection
    }

    /// Parameters to persist in a checkpoint.
    pub fn to_params(&self) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        store.insert(PROJECTION_ID, self.projection.clone())?;
        if let Some(l) = &self.learned {
            store.extend(l.params.clone())?;
        }
        Ok(store)
    }

    /// Rebuild from checkpoint parameters (`codec.*`).
    pub fn from_params(mode: CodecMode, store: &ParamStore) -> Result<Self> {
        let projection = store.get(PROJECTION_ID)?.tensor.clone();
        if projection.shape() != [PATCH, LATENT_CHANNELS] {
            return Err(Error::Checkpoint(format!(
                "{PROJECTION_ID} has shape {:?}, expected [{PATCH}, {LATENT_CHANNELS}]",
                projection.shape()
            )));
        }
        let learned = match mode {
            CodecMode::FixedOrthogonal => None,
            CodecMode::Learned => {
                let mut params = ParamStore::new();
                for q in store.iter().filter(|q| q.id.starts_with("codec.") && q.id != PROJECTION_ID) {
                    params.insert(q.id.clone(), q.tensor.clone())?;
                }
                Some(LearnedCodec::from_params(params)?)
            }
        };
        let mut projection = projection;
        projection.set_requires_grad(false);
        Ok(Self {
            mode,
            projection,
            learned,
        })
    }

    pub fn encode(&self, image: &Tensor) -> Result<LatentImage> {
        let (h, w) = check_image(image)?;
        let (lh, lw) = (h / BLOCK, w / BLOCK);
        match (&self.mode, &self.learned) {
            (CodecMode::Learned, Some(l)) => {
                let mut g = Graph::new();
                let x = g.constant(&image.clone().unsqueeze0());
                let z = l.encode_var(&mut g, &l.params, x)?;
                LatentImage::new(g.tensor(z).squeeze0()?, (h, w))
            }
            (CodecMode::Learned, None) => Err(Error::Config("learned codec has no parameters".into())),
            (CodecMode::FixedOrthogonal, _) => {
                let p = self.projection.data();
                let x = image.data();
                let mut z = vec![0.0; LATENT_CHANNELS * lh * lw];
                for by in 0..lh {
                    for bx in 0..lw {
                        let mut acc = [0.0; LATENT_CHANNELS];
                        for c in 0..3 {
                            for dy in 0..BLOCK {
                                for dx in 0..BLOCK {
                                    let v = x[(c * h + by * BLOCK + dy) * w + bx * BLOCK + dx];
                                    let row = c * BLOCK * BLOCK + dy * BLOCK + dx;
                                    for (k, a) in acc.iter_mut().enumerate() {
                                        *a += p[row * LATENT_CHANNELS + k] * v;
                                    }
                                }
                            }
                        }
                        for (k, a) in acc.iter().enumerate() {
                            z[(k * lh + by) * lw + bx] = *a;
                        }
                    }
                }
                LatentImage::new(Tensor::from_parts(vec![LATENT_CHANNELS, lh, lw], z), (h, w))
            }
        }
    }

    pub fn decode(&self, latent: &LatentImage) -> Result<Tensor> {
        let (h, w) = latent.source_dims;
        let (lh, lw) = latent.dims();
        LatentImage::new(latent.data.clone(), latent.source_dims)?;
        let raw = match (&self.mode, &self.learned) {
            (CodecMode::Learned, Some(l)) => {
                let mut g = Graph::new();
                let z = g.constant(&latent.data.clone().unsqueeze0());
                let x = l.decode_var(&mut g, &l.params, z)?;
                g.tensor(x).squeeze0()?
            }
            (CodecMode::Learned, None) => return Err(Error::Config("learned codec has no parameters".into())),
            (CodecMode::FixedOrthogonal, _) => {
                let p = self.projection.data();
                let z = latent.data.data();
                let mut x = vec![0.0; 3 * h * w];
                for by in 0..lh {
                    for bx in 0..lw {
                        let zk: Vec<f64> = (0..LATENT_CHANNELS).map(|k| z[(k * lh + by) * lw + bx]).collect();
                        for c in 0..3 {
                            for dy in 0..BLOCK {
                                for dx in 0..BLOCK {
                                    let row = c * BLOCK * BLOCK + dy * BLOCK + dx;
                                    let v: f64 = (0..LATENT_CHANNELS).map(|k| p[row * LATENT_CHANNELS + k] * zk[k]).sum();
                                    x[(c * h + by * BLOCK + dy) * w + bx * BLOCK + dx] = v;
                                }
                            }
                        }
                    }
                }
                Tensor::from_parts(vec![3, h, w], x)
            }
        };
        Ok(raw.map(|v| v.clamp(0.0, 1.0)))
    }

    /// Train the learned codec on reconstruction MSE. No-op in fixed mode.
    /// Returns the per-step losses.
    pub fn train_learned<R: Rng + ?Sized>(
        &mut self,
        images: &[Tensor],
        steps: usize,
        batch: usize,
        optim: AdamWConfig,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let Some(l) = self.learned.as_mut() else {
            return Ok(Vec::new());
        };
        if images.is_empty() {
            return Err(Error::Input("no images to train the codec on".into()));
        }
        let mut opt = OptimizerState::new(optim);
        let mut losses = Vec::with_capacity(steps);
        for _ in 0..steps {
            let picks = sample(rng, images.len(), batch.min(images.len())).into_vec();
            let mut total = 0.0;
            for &i in &picks {
                check_image(&images[i])?;
                let mut g = Graph::new();
                let x = g.constant(&images[i].clone().unsqueeze0());
                let z = l.encode_var(&mut g, &l.params, x)?;
                let y = l.decode_var(&mut g, &l.params, z)?;
                let loss = g.mse(y, x)?;
                total += g.scalar(loss);
                for (id, grad) in g.backward(loss)?.param_grads() {
                    l.params.accumulate(&id, &grad, 1.0 / picks.len() as f64)?;
                }
            }
            opt.step(&mut l.params)?;
            losses.push(total / picks.len() as f64);
        }
        Ok(losses)
    }
}
