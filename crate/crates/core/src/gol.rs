//! Garment occlusion learning: an attention map over latent cells saying how
//! much of the inner garment stays visible once the outer garment is worn.
//!
//! Two garment encoders (same layout, separate weights) reduce each garment
//! image by 32, their features are concatenated over channels, a mapping
//! network upsamples them to latent resolution and a per-position linear
//! head with a sigmoid produces `A ∈ (0, 1)`. The inner latent is refined as
//! `A ⊙ z_inner` and supervised against the encoding of the visible inner
//! pixels of the dressed person.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{LatentCodec, LatentImage, LATENT_CHANNELS};
use crate::dataset::Quadruplet;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv2d, Init, ResidualBlock};
use crate::optim::{AdamWConfig, OptimizerState};
use crate::param::ParamStore;
use crate::parallel::{self, Execution};
use crate::tensor::Tensor;
use crate::training::batch_gradients;

/// Number of stride-2 encoder stages; the encoders reduce by `2^5 = 32`.
pub const ENCODER_STAGES: usize = 5;
pub const REDUCTION: usize = 1 << ENCODER_STAGES;
pub const PREFIX: &str = "gol.";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OcclusionNorm {
    /// `‖ε(x_pi) − z_iv‖₂`
    #[default]
    L2,
    /// `‖ε(x_pi) − z_iv‖₂²`
    SquaredL2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GolConfig {
    /// Output channels of the five encoder stages.
    pub channels: Vec<usize>,
    /// Width of the two upsampling stages of the mapping network.
    pub mapping_channels: usize,
    pub occlusion_norm: OcclusionNorm,
}

impl Default for GolConfig {
    fn default() -> Self {
        Self {
            channels: vec![8, 16, 32, 32, 32],
            mapping_channels: 32,
            occlusion_norm: OcclusionNorm::L2,
        }
    }
}

impl GolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != ENCODER_STAGES || self.channels.contains(&0) || self.mapping_channels == 0 {
            return Err(Error::Config(format!(
                "GOL needs {ENCODER_STAGES} positive encoder channels and a positive mapping width, got {:?} / {}",
                self.channels, self.mapping_channels
            )));
        }
        Ok(())
    }
}

/// Single-channel visibility map `1×h×w` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub data: Tensor,
}

impl AttentionMap {
    pub fn new(data: Tensor) -> Result<Self> {
        let s = data.shape();
        if s.len() != 3 || s[0] != 1 {
            return Err(Error::Input(format!("attention map must be 1×h×w, got {s:?}")));
        }
        if data.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Input("attention map values must lie in [0, 1]".into()));
        }
        Ok(Self { data })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.data.shape()[1], self.data.shape()[2])
    }
}

#[derive(Clone, Debug, PartialEq)]
struct EncoderStage {
    down: Conv2d,
    res1: ResidualBlock,
    res2: ResidualBlock,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GarmentEncoder {
    stages: Vec<EncoderStage>,
}

impl GarmentEncoder {
    pub fn new(prefix: &str, channels: &[usize]) -> Self {
        let mut in_ch = 3;
        let stages = channels
            .iter()
            .enumerate()
            .map(|(i, &out)| {
                let p = format!("{prefix}.s{i}");
                let stage = EncoderStage {
                    down: Conv2d::new(&format!("{p}.down"), in_ch, out, 3, 2),
                    res1: ResidualBlock::new(&format!("{p}.res1"), out),
                    res2: ResidualBlock::new(&format!("{p}.res2"), out),
                };
                in_ch = out;
                stage
            })
            .collect();
        Self { stages }
    }

    pub fn out_channels(&self) -> usize {
        self.stages.last().map_or(3, |s| s.down.out_channels)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        for s in &self.stages {
            s.down.init(store, Init::FanIn, rng)?;
            s.res1.init(store, rng)?;
            s.res2.init(store, rng)?;
        }
        Ok(())
    }

    /// `N×3×H×W → N×C×(H/32)×(W/32)`; each stage is `silu(down) → res → res`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 4 || !s[2].is_multiple_of(REDUCTION) || !s[3].is_multiple_of(REDUCTION) {
            return Err(Error::Input(format!(
                "garment encoder needs N×3×H×W with H and W multiples of {REDUCTION}, got {s:?}"
            )));
        }
        let mut h = x;
        for stage in &self.stages {
            h = stage.down.forward(g, store, h)?;
            h = g.silu(h);
            h = stage.res1.forward(g, store, h, None)?;
            h = stage.res2.forward(g, store, h, None)?;
        }
        Ok(h)
    }
}

/// The occlusion network: both encoders, the mapping network and the head.
#[derive(Clone, Debug, PartialEq)]
pub struct Gol {
    pub config: GolConfig,
    pub outer_encoder: GarmentEncoder,
    pub inner_encoder: GarmentEncoder,
    up1: Conv2d,
    up2: Conv2d,
    head: Conv2d,
}

impl Gol {
    pub fn new(config: GolConfig) -> Result<Self> {
        config.validate()?;
        let outer_encoder = GarmentEncoder::new("gol.enc_outer", &config.channels);
        let inner_encoder = GarmentEncoder::new("gol.enc_inner", &config.channels);
        let feat = outer_encoder.out_channels() + inner_encoder.out_channels();
        let m = config.mapping_channels;
        Ok(Self {
            up1: Conv2d::new("gol.map.up1", feat, m, 3, 1),
            up2: Conv2d::new("gol.map.up2", m, m, 3, 1),
            head: Conv2d::new("gol.head", m, 1, 1, 1),
            outer_encoder,
            inner_encoder,
            config,
        })
    }

    /// Register freshly initialised parameters (ids prefixed `gol.`).
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.outer_encoder.init(store, rng)?;
        self.inner_encoder.init(store, rng)?;
        self.up1.init(store, Init::FanIn, rng)?;
        self.up2.init(store, Init::FanIn, rng)?;
        self.head.init(store, Init::FanIn, rng)
    }

    /// Attention map for batched garments `N×3×H×W`, shaped
    /// `N×1×(H/8)×(W/8)` in `(0, 1)`. Pixel values are shifted to `[−1, 1]`
    /// before encoding.
    pub fn attention_var(&self, g: &mut Graph, store: &ParamStore, inner: &Tensor, outer: &Tensor) -> Result<Var> {
        if inner.shape() != outer.shape() {
            return Err(Error::Input(format!(
                "garment images differ in shape: inner {:?}, outer {:?}",
                inner.shape(),
                outer.shape()
            )));
        }
        let gi = g.constant(&inner.map(|v| 2.0 * v - 1.0));
        let go = g.constant(&outer.map(|v| 2.0 * v - 1.0));
        let fo = self.outer_encoder.forward(g, store, go)?;
        let fi = self.inner_encoder.forward(g, store, gi)?;
        let mut h = g.concat(&[fo, fi], 1)?;
        for conv in [&self.up1, &self.up2] {
            h = g.upsample_nearest(h, 2)?;
            h = conv.forward(g, store, h)?;
            h = g.silu(h);
        }
        let logits = self.head.forward(g, store, h)?;
        Ok(g.sigmoid(logits))
    }

    /// Attention map for one garment pair `3×H×W`.
    pub fn attention_map(&self, store: &ParamStore, inner: &Tensor, outer: &Tensor) -> Result<AttentionMap> {
        let mut g = Graph::new();
        let a = self.attention_var(&mut g, store, &inner.clone().unsqueeze0(), &outer.clone().unsqueeze0())?;
        AttentionMap::new(g.tensor(a).squeeze0()?)
    }

    /// `L_OCC` for one sample given the encoded inner garment and the encoded
    /// visible-inner crop, both `4×h×w`.
    pub fn occlusion_loss_var(
        &self,
        g: &mut Graph,
        attention: Var,
        inner_latent: &Tensor,
        crop_latent: &Tensor,
    ) -> Result<Var> {
        let zi = g.constant(&inner_latent.clone().unsqueeze0());
        let refined = g.mul_channel(attention, zi)?;
        let target = g.constant(&crop_latent.clone().unsqueeze0());
        let diff = g.sub(target, refined)?;
        Ok(match self.config.occlusion_norm {
            OcclusionNorm::L2 => g.l2_norm(diff),
            OcclusionNorm::SquaredL2 => g.sum_squares(diff),
        })
    }
}

/// `z_iv = A ⊙ z_i`, broadcasting `A` over the four latent channels.
pub fn refine_inner(attention: &AttentionMap, inner: &LatentImage) -> Result<LatentImage> {
    if attention.dims() != inner.dims() {
        return Err(Error::Input(format!(
            "attention map {:?} does not match latent {:?}",
            attention.dims(),
            inner.dims()
        )));
    }
    let (h, w) = inner.dims();
    let a = attention.data.data();
    let mut out = inner.data.clone();
    for (k, v) in out.data_mut().iter_mut().enumerate() {
        *v *= a[k % (h * w)];
    }
    debug_assert_eq!(out.numel(), LATENT_CHANNELS * h * w);
    LatentImage::new(out, inner.source_dims)
}

/// `‖ε(x_pi) − z_iv‖₂` with `ε` the codec encoder.
pub fn occlusion_loss(codec: &LatentCodec, refined: &LatentImage, inner_crop: &Tensor) -> Result<f64> {
    let target = codec.encode(inner_crop)?;
    if target.data.shape() != refined.data.shape() {
        return Err(Error::Input(format!(
            "occlusion loss: crop latent {:?} vs refined latent {:?}",
            target.data.shape(),
            refined.data.shape()
        )));
    }
    Ok(target
        .data
        .data()
        .iter()
        .zip(refined.data.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

/// Latents needed to supervise the occlusion network on one sample.
#[derive(Clone, Debug)]
pub struct OcclusionExample {
    pub inner: Tensor,
    pub outer: Tensor,
    pub inner_latent: Tensor,
    pub crop_latent: Tensor,
}

impl OcclusionExample {
    pub fn from_sample(codec: &LatentCodec, q: &Quadruplet) -> Result<Self> {
        Ok(Self {
            inner: q.inner_garment.clone(),
            outer: q.outer_garment.clone(),
            inner_latent: codec.encode(&q.inner_garment)?.data,
            crop_latent: codec.encode(&q.inner_crop)?.data,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GolTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for GolTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 8,
            optimizer: AdamWConfig::default(),
            seed: 0,
        }
    }
}

/// Train the occlusion network alone on `L_OCC`; returns the per-step mean loss.
pub fn train_occlusion<R: Rng + ?Sized>(
    gol: &Gol,
    store: &mut ParamStore,
    examples: &[OcclusionExample],
    config: &GolTrainConfig,
    exec: Execution,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if examples.is_empty() || config.batch_size == 0 {
        return Err(Error::Usage("occlusion training needs examples and a positive batch size".into()));
    }
    let mut optim = OptimizerState::new(config.optimizer);
    let mut losses = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let batch: Vec<&OcclusionExample> = (0..config.batch_size)
            .map(|_| &examples[rng.random_range(0..examples.len())])
            .collect();
        let grads = batch_gradients(exec, store, &batch, |g, s, ex| {
            let a = gol.attention_var(g, s, &ex.inner.clone().unsqueeze0(), &ex.outer.clone().unsqueeze0())?;
            gol.occlusion_loss_var(g, a, &ex.inner_latent, &ex.crop_latent)
        })?;
        grads.accumulate_mean(store)?;
        optim.step(store)?;
        losses.push(grads.mean_loss());
    }
    Ok(losses)
}

/// Mean absolute error between attention maps and the 8×8-averaged inner
/// visibility, plus the mean attention over visible and occluded cells.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct OcclusionAccuracy {
    pub mae: f64,
    pub mean_visible: f64,
    pub mean_occluded: f64,
}

/// Cells count as visible when at least half their pixels show the inner
/// garment, occluded when at least half are inner pixels under the outer garment.
pub fn occlusion_accuracy(gol: &Gol, store: &ParamStore, samples: &[Quadruplet], exec: Execution) -> Result<OcclusionAccuracy> {
    let per = parallel::map(exec, samples, |q| -> Result<(f64, usize, f64, usize, f64, usize)> {
        let a = gol.attention_map(store, &q.inner_garment, &q.outer_garment)?;
        let visible = q.inner_visibility.downsample_mean(crate::codec::BLOCK)?;
        let hidden = q.layer_masks[0].and(&q.layer_masks[1])?.downsample_mean(crate::codec::BLOCK)?;
        let (mut err, mut vis_sum, mut vis_n, mut occ_sum, mut occ_n) = (0.0, 0.0, 0, 0.0, 0);
        for ((&av, &v), &o) in a.data.data().iter().zip(visible.data()).zip(hidden.data()) {
            err += (av - v).abs();
            if v >= 0.5 {
                vis_sum += av;
                vis_n += 1;
            }
            if o >= 0.5 {
                occ_sum += av;
                occ_n += 1;
            }
        }
        Ok((err, a.data.numel(), vis_sum, vis_n, occ_sum, occ_n))
    });
    let (mut err, mut n, mut vs, mut vn, mut os, mut on) = (0.0, 0, 0.0, 0, 0.0, 0);
    for r in per {
        let (e, c, a, b, x, y) = r?;
        err += e;
        n += c;
        vs += a;
        vn += b;
        os += x;
        on += y;
    }
    let mean = |s: f64, c: usize| if c == 0 { 0.0 } else { s / c as f64 };
    Ok(OcclusionAccuracy {
        mae: mean(err, n),
        mean_visible: mean(vs, vn),
        mean_occluded: mean(os, on),
    })
}
