//! Garment morphing and fitting: latent diffusion over a width-wise
//! concatenation of the person, outer-garment and refined inner-garment
//! latents, trained with conditional dropout and sampled with
//! classifier-free guidance.
//!
//! The denoiser sees `y_t © z_in © m_in` (channel concatenation): `y_t` is the
//! noised target track `[z_person, z_outer, z_inner_refined]`, `z_in` the clean
//! condition track `[z_agnostic, z_outer, z_inner_refined]` and `m_in` the
//! latent-resolution inpainting mask in the person slot, zero elsewhere.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::codec::{LatentCodec, LatentImage, BLOCK, LATENT_CHANNELS};
use crate::dataset::Quadruplet;
use crate::error::{Error, Result};
use crate::gol::{Gol, GolConfig};
use crate::graph::{Graph, Var};
use crate::mask::Mask;
use crate::optim::{AdamWConfig, OptimizerState};
use crate::param::ParamStore;
use crate::parallel::{self, Execution};
use crate::tensor::Tensor;
use crate::training::{batch_gradients, WeightAverage};
use crate::unet::{UNet, UNetConfig};

/// Number of spatial slots in the assembled tracks: person, outer, inner.
pub const SLOTS: usize = 3;
pub const PERSON_SLOT: usize = 0;
pub const OUTER_SLOT: usize = 1;
pub const INNER_SLOT: usize = 2;
/// Weight of the occlusion loss in the total training loss.
pub const OCCLUSION_WEIGHT: f64 = 0.1;
/// Probability of dropping both garment conditions during training.
pub const CONDITION_DROPOUT: f64 = 0.1;
/// Guidance scale used at inference.
pub const GUIDANCE_SCALE: f64 = 2.5;
/// Default decay of the training weight average.
pub const EMA_DECAY: f64 = 0.995;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    /// The common 1000-step range `1e-4 … 0.02`, rescaled by `1000 / steps`
    /// so the final step still reaches near-pure noise.
    fn default() -> Self {
        Self::rescaled(200)
    }
}

impl ScheduleConfig {
    pub fn rescaled(steps: usize) -> Self {
        let k = 1000.0 / steps.max(1) as f64;
        Self {
            steps,
            beta_start: 1e-4 * k,
            beta_end: 0.02 * k,
        }
    }
}

/// Linear variance schedule, indexed by `t ∈ 1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas linear from `beta_start` to `beta_end`. Requires
    /// `0 < β_1 < … < β_T < 1` and `ᾱ_T < 0.05`.
    pub fn new(config: &ScheduleConfig) -> Result<Self> {
        let t = config.steps;
        if t < 2 {
            return Err(Error::Config(format!("schedule needs at least 2 steps, got {t}")));
        }
        let (a, b) = (config.beta_start, config.beta_end);
        if !(a > 0.0 && a < b && b < 1.0) {
            return Err(Error::Config(format!(
                "schedule betas must satisfy 0 < beta_start < beta_end < 1, got {a} and {b}"
            )));
        }
        let betas: Vec<f64> = (0..t).map(|i| a + (b - a) * i as f64 / (t - 1) as f64).collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for &b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        let last = alpha_bars.last().copied().unwrap_or(1.0);
        if last >= 0.05 {
            return Err(Error::Config(format!(
                "schedule ends at cumulative alpha {last:.4}; it must fall below 0.05"
            )));
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Usage(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Posterior variance `β̃_t = β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t)`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
    }
}

/// `y_t = √ᾱ_t · y0 + √(1 − ᾱ_t) · ε` with fresh standard-normal `ε`.
pub fn forward_noise<R: Rng + ?Sized>(y0: &Tensor, t: usize, schedule: &NoiseSchedule, rng: &mut R) -> Result<(Tensor, Tensor)> {
    schedule.check(t)?;
    let eps = Tensor::randn(y0.shape(), rng);
    Ok((noise_with(y0, &eps, schedule.alpha_bar(t))?, eps))
}

fn noise_with(y0: &Tensor, eps: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    y0.zip_with(eps, |y, e| a * y + b * e)
}

fn check_latent(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() != 3 || s[0] != LATENT_CHANNELS {
        return Err(Error::Input(format!("{what} must be {LATENT_CHANNELS}×h×w, got {s:?}")));
    }
    Ok((s[1], s[2]))
}

/// Width-wise concatenation `z_in = [z_a, z_o, z_iv]` and `m_in = [m_a, 0, 0]`.
pub fn assemble(z_a: &Tensor, z_o: &Tensor, z_iv: &Tensor, m_a: &Tensor) -> Result<(Tensor, Tensor)> {
    let dims = check_latent(z_a, "person latent")?;
    for (t, what) in [(z_o, "outer latent"), (z_iv, "inner latent")] {
        if check_latent(t, what)? != dims {
            return Err(Error::Input(format!(
                "{what} {:?} does not match person latent {:?}",
                t.shape(),
                z_a.shape()
            )));
        }
    }
    if m_a.shape() != [1, dims.0, dims.1] {
        return Err(Error::Input(format!("mask {:?} does not match latent dims {dims:?}", m_a.shape())));
    }
    let z_in = Tensor::concat(&[z_a, z_o, z_iv], 2)?;
    let zero = Tensor::zeros(m_a.shape());
    let m_in = Tensor::concat(&[m_a, &zero, &zero], 2)?;
    Ok((z_in, m_in))
}

/// Slot `k` (0 = person, 1 = outer, 2 = inner) of an assembled `C×h×3w` track.
pub fn extract_slot(track: &Tensor, slot: usize) -> Result<Tensor> {
    let s = track.shape();
    if s.len() != 3 || !s[2].is_multiple_of(SLOTS) || slot >= SLOTS {
        return Err(Error::Input(format!("cannot take slot {slot} of track {s:?}")));
    }
    let w = s[2] / SLOTS;
    track.narrow(2, slot * w, w)
}

/// Inpainting mask at latent resolution: a cell is masked when any of its pixels is.
pub fn latent_mask(mask: &Mask) -> Result<Tensor> {
    mask.downsample_max(BLOCK)
}

/// With probability `p` (one draw) both garment conditions become zero.
pub fn conditional_dropout<R: Rng + ?Sized>(z_o: &Tensor, z_iv: &Tensor, p: f64, rng: &mut R) -> Result<(Tensor, Tensor)> {
    if draw_dropout(p, rng)? {
        Ok((Tensor::zeros(z_o.shape()), Tensor::zeros(z_iv.shape())))
    } else {
        Ok((z_o.clone(), z_iv.clone()))
    }
}

fn draw_dropout<R: Rng + ?Sized>(p: f64, rng: &mut R) -> Result<bool> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("dropout probability {p} outside [0, 1]")));
    }
    Ok(rng.random::<f64>() < p)
}

/// `u + s · (c − u)`. Returns `c` itself when `s = 1` and `u` when `s = 0`.
pub fn cfg_combine(uncond: &Tensor, cond: &Tensor, s: f64) -> Result<Tensor> {
    if uncond.shape() != cond.shape() {
        return Err(Error::Input(format!(
            "guidance branches differ in shape: {:?} vs {:?}",
            uncond.shape(),
            cond.shape()
        )));
    }
    if s == 1.0 {
        return Ok(cond.clone());
    }
    uncond.zip_with(cond, |u, c| u + s * (c - u))
}

/// Which parts of the occlusion branch are active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// No occlusion network: the raw inner latent fills the inner slot.
    Base,
    /// Occlusion network trained only through the denoising loss.
    Gol,
    /// Occlusion network with its own supervision.
    #[default]
    #[serde(rename = "gol+locc")]
    GolLocc,
}

impl Ablation {
    pub fn uses_gol(self) -> bool {
        self != Ablation::Base
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Base => "base",
            Ablation::Gol => "gol",
            Ablation::GolLocc => "gol+locc",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Ablation::Base),
            "gol" => Ok(Ablation::Gol),
            "gol+locc" => Ok(Ablation::GolLocc),
            _ => Err(Error::Config(format!("unknown ablation {s:?}; expected base, gol or gol+locc"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GmfConfig {
    pub unet: UNetConfig,
    pub gol: GolConfig,
    pub schedule: ScheduleConfig,
    /// Multiplier applied to codec latents before diffusion.
    pub latent_scale: f64,
    /// Per-channel offset subtracted from codec latents before scaling.
    /// Training fits it to the mean person latent when unset.
    pub latent_shift: Option<[f64; LATENT_CHANNELS]>,
    pub condition_dropout: f64,
    pub occlusion_weight: f64,
    pub ablation: Ablation,
}

impl Default for GmfConfig {
    fn default() -> Self {
        Self {
            unet: UNetConfig::default(),
            gol: GolConfig::default(),
            schedule: ScheduleConfig::default(),
            latent_scale: 1.0,
            latent_shift: None,
            condition_dropout: CONDITION_DROPOUT,
            occlusion_weight: OCCLUSION_WEIGHT,
            ablation: Ablation::GolLocc,
        }
    }
}

impl GmfConfig {
    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        self.gol.validate()?;
        NoiseSchedule::new(&self.schedule)?;
        if !(self.latent_scale > 0.0 && self.latent_scale.is_finite()) {
            return Err(Error::Config(format!("latent_scale must be positive, got {}", self.latent_scale)));
        }
        if self.latent_shift.is_some_and(|s| s.iter().any(|v| !v.is_finite())) {
            return Err(Error::Config("latent_shift must be finite".into()));
        }
        if !(0.0..=1.0).contains(&self.condition_dropout) {
            return Err(Error::Config(format!(
                "condition_dropout {} outside [0, 1]",
                self.condition_dropout
            )));
        }
        if !(self.occlusion_weight >= 0.0 && self.occlusion_weight.is_finite()) {
            return Err(Error::Config(format!("occlusion_weight must be ≥ 0, got {}", self.occlusion_weight)));
        }
        Ok(())
    }

    /// Map a codec latent `4×h×w` into diffusion space.
    pub fn to_track(&self, z: &Tensor) -> Tensor {
        let shift = self.latent_shift.unwrap_or_default();
        let k = self.latent_scale;
        let plane = z.numel() / LATENT_CHANNELS;
        Tensor::from_fn(z.shape(), |i| (z.data()[i] - shift[i / plane]) * k)
    }

    /// Inverse of [`GmfConfig::to_track`].
    pub fn from_track(&self, y: &Tensor) -> Tensor {
        let shift = self.latent_shift.unwrap_or_default();
        let k = self.latent_scale;
        let plane = y.numel() / LATENT_CHANNELS;
        Tensor::from_fn(y.shape(), |i| y.data()[i] / k + shift[i / plane])
    }

    /// Weight of the occlusion loss after applying the ablation switch.
    pub fn effective_occlusion_weight(&self) -> f64 {
        if self.ablation == Ablation::GolLocc {
            self.occlusion_weight
        } else {
            0.0
        }
    }
}

/// Precomputed latents of one training sample.
#[derive(Clone, Debug)]
pub struct DiffusionExample {
    pub inner_garment: Tensor,
    pub outer_garment: Tensor,
    pub z_person: Tensor,
    pub z_agnostic: Tensor,
    pub z_outer: Tensor,
    pub z_inner: Tensor,
    pub z_crop: Tensor,
    pub mask: Tensor,
}

impl DiffusionExample {
    pub fn from_sample(codec: &LatentCodec, q: &Quadruplet) -> Result<Self> {
        Ok(Self {
            inner_garment: q.inner_garment.clone(),
            outer_garment: q.outer_garment.clone(),
            z_person: codec.encode(&q.person)?.data,
            z_agnostic: codec.encode(&q.agnostic)?.data,
            z_outer: codec.encode(&q.outer_garment)?.data,
            z_inner: codec.encode(&q.inner_garment)?.data,
            z_crop: codec.encode(&q.inner_crop)?.data,
            mask: latent_mask(&q.upper_mask)?,
        })
    }
}

/// Per-channel mean of the person latents.
pub fn fit_latent_shift(examples: &[DiffusionExample]) -> Result<[f64; LATENT_CHANNELS]> {
    if examples.is_empty() {
        return Err(Error::Usage("fitting the latent shift needs examples".into()));
    }
    let mut sum = [0.0; LATENT_CHANNELS];
    let mut count = 0usize;
    for ex in examples {
        let plane = ex.z_person.numel() / LATENT_CHANNELS;
        for (i, v) in ex.z_person.data().iter().enumerate() {
            sum[i / plane] += v;
        }
        count += plane;
    }
    Ok(sum.map(|v| v / count as f64))
}

/// Random quantities of one training-loss evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct LossDraw {
    pub t: usize,
    pub noise: Tensor,
    pub dropped: bool,
}

/// Loss value split into its parts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossParts {
    pub total: f64,
    pub denoise: f64,
    pub occlusion: f64,
}

/// The full model: optional occlusion network, denoiser, codec and schedule.
#[derive(Clone, Debug)]
pub struct GmfModel {
    pub config: GmfConfig,
    pub gol: Option<Gol>,
    pub unet: UNet,
    pub schedule: NoiseSchedule,
    pub codec: LatentCodec,
}

/// Conditioning inputs for sampling one try-on image.
#[derive(Clone, Debug)]
pub struct TryOnInputs {
    pub agnostic: Tensor,
    pub outer_garment: Tensor,
    pub inner_garment: Tensor,
    pub upper_mask: Mask,
}

impl TryOnInputs {
    pub fn from_sample(q: &Quadruplet) -> Self {
        Self {
            agnostic: q.agnostic.clone(),
            outer_garment: q.outer_garment.clone(),
            inner_garment: q.inner_garment.clone(),
            upper_mask: q.upper_mask.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    /// Ancestral sampling over every step with posterior variance.
    #[default]
    Ddpm,
    /// Deterministic strided sampling (η = 0).
    Ddim,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub guidance_scale: f64,
    pub sampler: SamplerKind,
    /// Number of reverse steps for the strided sampler.
    pub ddim_steps: usize,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            guidance_scale: GUIDANCE_SCALE,
            sampler: SamplerKind::Ddpm,
            ddim_steps: 50,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Decay of the weight average that replaces the parameters after
    /// training; 0 keeps the final iterate.
    pub ema_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            optimizer: AdamWConfig::default(),
            ema_decay: EMA_DECAY,
            seed: 0,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(Error::Config(format!("guidance scale must be ≥ 0, got {}", self.guidance_scale)));
        }
        if self.ddim_steps == 0 {
            return Err(Error::Config("ddim_steps must be positive".into()));
        }
        Ok(())
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema_decay must lie in [0, 1), got {}", self.ema_decay)));
        }
        self.optimizer.validate()
    }
}

impl GmfModel {
    pub fn new(config: GmfConfig, codec: LatentCodec) -> Result<Self> {
        config.validate()?;
        let gol = if config.ablation.uses_gol() {
            Some(Gol::new(config.gol.clone())?)
        } else {
            None
        };
        Ok(Self {
            gol,
            unet: UNet::new(config.unet.clone())?,
            schedule: NoiseSchedule::new(&config.schedule)?,
            codec,
            config,
        })
    }

    /// Fresh parameters for every trainable part.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        if let Some(gol) = &self.gol {
            gol.init(&mut store, rng)?;
        }
        self.unet.init(&mut store, rng)?;
        Ok(store)
    }

    /// Verify that `store` holds exactly the parameters this model uses, with matching shapes.
    pub fn check_params(&self, store: &ParamStore) -> Result<()> {
        let expected = self.init(&mut ChaCha8Rng::seed_from_u64(0))?;
        for p in expected.iter() {
            let got = store
                .get(&p.id)
                .map_err(|_| Error::Checkpoint(format!("checkpoint lacks parameter {}", p.id)))?;
            if got.tensor.shape() != p.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    p.id,
                    got.tensor.shape(),
                    p.tensor.shape()
                )));
            }
        }
        if let Some(extra) = store.ids().find(|id| !expected.contains(id)) {
            return Err(Error::Checkpoint(format!("checkpoint has unexpected parameter {extra}")));
        }
        Ok(())
    }

    /// Draw `t`, the noise and the dropout decision for one example.
    pub fn draw<R: Rng + ?Sized>(&self, ex: &DiffusionExample, rng: &mut R) -> Result<LossDraw> {
        let (_, h, w) = (ex.z_person.shape()[0], ex.z_person.shape()[1], ex.z_person.shape()[2]);
        Ok(LossDraw {
            t: rng.random_range(1..=self.schedule.steps()),
            noise: Tensor::randn(&[1, LATENT_CHANNELS, h, SLOTS * w], rng),
            dropped: draw_dropout(self.config.condition_dropout, rng)?,
        })
    }

    /// Refined inner latent `[1, 4, h, w]` and, when supervised, the occlusion loss.
    fn inner_branch(&self, g: &mut Graph, store: &ParamStore, ex: &DiffusionExample) -> Result<(Var, Option<Var>)> {
        match &self.gol {
            None => Ok((g.constant(&ex.z_inner.clone().unsqueeze0()), None)),
            Some(gol) => {
                let a = gol.attention_var(
                    g,
                    store,
                    &ex.inner_garment.clone().unsqueeze0(),
                    &ex.outer_garment.clone().unsqueeze0(),
                )?;
                let zi = g.constant(&ex.z_inner.clone().unsqueeze0());
                let refined = g.mul_channel(a, zi)?;
                let occ = gol.occlusion_loss_var(g, a, &ex.z_inner, &ex.z_crop)?;
                Ok((refined, Some(occ)))
            }
        }
    }

    /// Build the training loss for one example with an arbitrary noise
    /// predictor `predict(g, store, input, t)`; returns the total loss node
    /// plus the denoising and occlusion parts.
    pub fn loss_with<P>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        ex: &DiffusionExample,
        draw: &LossDraw,
        predict: P,
    ) -> Result<(Var, Var, Option<Var>)>
    where
        P: Fn(&mut Graph, &ParamStore, Var, usize) -> Result<Var>,
    {
        self.schedule.check(draw.t)?;
        let cfg = &self.config;
        let (refined, occ) = self.inner_branch(g, store, ex)?;
        let zp = g.constant(&cfg.to_track(&ex.z_person).unsqueeze0());
        let za = g.constant(&cfg.to_track(&ex.z_agnostic).unsqueeze0());
        let zo = g.constant(&cfg.to_track(&ex.z_outer).unsqueeze0());
        let scaled = g.scale(refined, cfg.latent_scale);
        let offset = g.constant(&cfg.to_track(&Tensor::zeros(ex.z_inner.shape())).unsqueeze0());
        let ziv = g.add(scaled, offset)?;
        // dropout removes the garments from the condition only; the target keeps them
        let (zo_c, ziv_c) = if draw.dropped {
            let zero = g.constant(&Tensor::zeros(&[1, LATENT_CHANNELS, ex.z_outer.shape()[1], ex.z_outer.shape()[2]]));
            (zero, zero)
        } else {
            (zo, ziv)
        };
        let stage = |e: Error| match e {
            Error::Shape { op, lhs, rhs } => Error::Input(format!("assembling diffusion input ({op}): {lhs:?} vs {rhs:?}")),
            other => other,
        };
        let y0 = g.concat(&[zp, zo, ziv], 3).map_err(stage)?;
        if g.shape(y0) != draw.noise.shape() {
            return Err(Error::Input(format!(
                "noise {:?} does not match target track {:?}",
                draw.noise.shape(),
                g.shape(y0)
            )));
        }
        let ab = self.schedule.alpha_bar(draw.t);
        let signal = g.scale(y0, ab.sqrt());
        let noise = g.constant(&draw.noise.map(|e| e * (1.0 - ab).sqrt()));
        let yt = g.add(signal, noise)?;
        let z_in = g.concat(&[za, zo_c, ziv_c], 3).map_err(stage)?;
        let m = ex.mask.clone().unsqueeze0();
        let zero_m = Tensor::zeros(m.shape());
        let m_in = g.constant(&Tensor::concat(&[&m, &zero_m, &zero_m], 3)?);
        let input = g.concat(&[yt, z_in, m_in], 1).map_err(stage)?;
        let pred = predict(g, store, input, draw.t)?;
        let target = g.constant(&draw.noise);
        let denoise = g.mse(pred, target).map_err(stage)?;
        let w = self.config.effective_occlusion_weight();
        let total = match occ {
            Some(o) if w != 0.0 => {
                let weighted = g.scale(o, w);
                g.add(denoise, weighted)?
            }
            _ => denoise,
        };
        Ok((total, denoise, occ))
    }

    /// Training loss with the model's own denoiser.
    pub fn loss(&self, g: &mut Graph, store: &ParamStore, ex: &DiffusionExample, draw: &LossDraw) -> Result<(Var, Var, Option<Var>)> {
        self.loss_with(g, store, ex, draw, |g, s, x, t| self.unet.forward(g, s, x, &[t]))
    }

    /// One training run; `on_step(step, parts)` sees the batch-mean loss parts.
    /// Fits the latent shift to `examples` first when the config leaves it unset.
    pub fn train<F>(
        &mut self,
        store: &mut ParamStore,
        examples: &[DiffusionExample],
        config: &TrainConfig,
        exec: Execution,
        mut on_step: F,
    ) -> Result<Vec<LossParts>>
    where
        F: FnMut(usize, &LossParts),
    {
        config.validate()?;
        if examples.is_empty() {
            return Err(Error::Usage("training needs at least one example".into()));
        }
        if self.config.latent_shift.is_none() {
            self.config.latent_shift = Some(fit_latent_shift(examples)?);
        }
        let this = &*self;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut optim = OptimizerState::new(config.optimizer);
        let mut average = WeightAverage::new(store, config.ema_decay)?;
        let mut history = Vec::with_capacity(config.steps);
        for step in 0..config.steps {
            let batch: Vec<(usize, u64)> = (0..config.batch_size)
                .map(|_| (rng.random_range(0..examples.len()), rng.random::<u64>()))
                .collect();
            let parts = std::sync::Mutex::new(vec![LossParts::default(); batch.len()]);
            let indexed: Vec<(usize, (usize, u64))> = batch.into_iter().enumerate().collect();
            let grads = batch_gradients(exec, store, &indexed, |g, s, &(slot, (i, seed))| {
                let ex = &examples[i];
                let draw = this.draw(ex, &mut ChaCha8Rng::seed_from_u64(seed))?;
                let (total, denoise, occ) = this.loss(g, s, ex, &draw)?;
                let p = LossParts {
                    total: g.scalar(total),
                    denoise: g.scalar(denoise),
                    occlusion: occ.map_or(0.0, |o| g.scalar(o)),
                };
                parts.lock().expect("loss bookkeeping")[slot] = p;
                Ok(total)
            })?;
            grads.accumulate_mean(store)?;
            optim.step(store)?;
            average.update(store)?;
            let parts = parts.into_inner().expect("loss bookkeeping");
            let n = parts.len() as f64;
            let mean = LossParts {
                total: parts.iter().map(|p| p.total).sum::<f64>() / n,
                denoise: parts.iter().map(|p| p.denoise).sum::<f64>() / n,
                occlusion: parts.iter().map(|p| p.occlusion).sum::<f64>() / n,
            };
            on_step(step, &mean);
            history.push(mean);
        }
        if config.ema_decay > 0.0 {
            average.apply(store)?;
        }
        Ok(history)
    }

    /// Scaled condition latents `(z_a, z_o, z_iv)` for sampling.
    fn conditions(&self, store: &ParamStore, inputs: &TryOnInputs) -> Result<(Tensor, Tensor, Tensor)> {
        let cfg = &self.config;
        let za = self.codec.encode(&inputs.agnostic)?.data;
        let zo = self.codec.encode(&inputs.outer_garment)?.data;
        let zi = self.codec.encode(&inputs.inner_garment)?;
        let ziv = match &self.gol {
            Some(gol) => {
                let a = gol.attention_map(store, &inputs.inner_garment, &inputs.outer_garment)?;
                crate::gol::refine_inner(&a, &zi)?.data
            }
            None => zi.data,
        };
        Ok((cfg.to_track(&za), cfg.to_track(&zo), cfg.to_track(&ziv)))
    }

    fn predict(&self, store: &ParamStore, yt: &Tensor, cond: &Tensor, t: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::concat(&[yt, cond], 0)?.unsqueeze0());
        let out = self.unet.forward(&mut g, store, x, &[t])?;
        g.tensor(out).squeeze0()
    }

    /// Guided noise prediction; skips the branch whose weight is zero.
    fn guided(&self, store: &ParamStore, yt: &Tensor, cond: &Tensor, uncond: &Tensor, t: usize, s: f64) -> Result<Tensor> {
        if s == 1.0 {
            return self.predict(store, yt, cond, t);
        }
        let u = self.predict(store, yt, uncond, t)?;
        if s == 0.0 {
            return Ok(u);
        }
        let c = self.predict(store, yt, cond, t)?;
        cfg_combine(&u, &c, s)
    }

    /// Final latent track `4×h×3w` of the reverse chain.
    pub fn sample_latent(&self, store: &ParamStore, inputs: &TryOnInputs, config: &SampleConfig) -> Result<Tensor> {
        config.validate()?;
        let s = config.guidance_scale;
        let (za, zo, ziv) = self.conditions(store, inputs)?;
        let m_a = latent_mask(&inputs.upper_mask)?;
        let (z_in, m_in) = assemble(&za, &zo, &ziv, &m_a)?;
        let zero = Tensor::zeros(za.shape());
        let (z_in_u, _) = assemble(&za, &zero, &zero, &m_a)?;
        let cond = Tensor::concat(&[&z_in, &m_in], 0)?;
        let uncond = Tensor::concat(&[&z_in_u, &m_in], 0)?;

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let init = Tensor::randn(z_in.shape(), &mut rng);
        reverse_chain(&self.schedule, config, init, &mut rng, |y, t| {
            self.guided(store, y, &cond, &uncond, t, s)
        })
    }

    /// Generated try-on image `3×H×W`: the decoded person slot of the final latent.
    pub fn sample(&self, store: &ParamStore, inputs: &TryOnInputs, config: &SampleConfig) -> Result<Tensor> {
        let y = self.sample_latent(store, inputs, config)?;
        let person = self.config.from_track(&extract_slot(&y, PERSON_SLOT)?);
        let (h, w) = (inputs.agnostic.shape()[1], inputs.agnostic.shape()[2]);
        self.codec.decode(&LatentImage::new(person, (h, w))?)
    }

    /// Sample many inputs, chain `i` seeded with `seed + i`.
    pub fn sample_batch(&self, store: &ParamStore, inputs: &[TryOnInputs], config: &SampleConfig, exec: Execution) -> Result<Vec<Tensor>> {
        parallel::map_range(exec, inputs.len(), |i| {
            let cfg = SampleConfig {
                seed: config.seed.wrapping_add(i as u64),
                ..config.clone()
            };
            self.sample(store, &inputs[i], &cfg)
        })
        .into_iter()
        .collect()
    }
}

/// Run the reverse process from `init` (a draw at `t = T`) with the noise
/// predictor `eps(y_t, t)`; `rng` supplies the ancestral noise.
pub fn reverse_chain<R, F>(schedule: &NoiseSchedule, config: &SampleConfig, init: Tensor, rng: &mut R, mut eps: F) -> Result<Tensor>
where
    R: Rng + ?Sized,
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    let mut y = init;
    match config.sampler {
        SamplerKind::Ddpm => {
            for t in (1..=schedule.steps()).rev() {
                let e = eps(&y, t)?;
                let coef = schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt();
                let inv = 1.0 / schedule.alpha(t).sqrt();
                let mut next = y.zip_with(&e, |yv, ev| inv * (yv - coef * ev))?;
                if t > 1 {
                    let sigma = schedule.posterior_variance(t).sqrt();
                    for v in next.data_mut() {
                        let z: f64 = rng.sample(StandardNormal);
                        *v += sigma * z;
                    }
                }
                y = next;
            }
        }
        SamplerKind::Ddim => {
            let times = strided_times(schedule.steps(), config.ddim_steps.clamp(1, schedule.steps()));
            for (i, &t) in times.iter().enumerate() {
                let prev = times.get(i + 1).copied().unwrap_or(0);
                let e = eps(&y, t)?;
                let (ab, ab_prev) = (schedule.alpha_bar(t), schedule.alpha_bar(prev));
                y = y.zip_with(&e, |yv, ev| {
                    let x0 = (yv - (1.0 - ab).sqrt() * ev) / ab.sqrt();
                    ab_prev.sqrt() * x0 + (1.0 - ab_prev).sqrt() * ev
                })?;
            }
        }
    }
    Ok(y)
}

/// `count` descending timesteps spread evenly over `T..=1`.
fn strided_times(total: usize, count: usize) -> Vec<usize> {
    let mut times: Vec<usize> = (0..count)
        .map(|i| total - (i * total) / count)
        .collect();
    times.dedup();
    times
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule_reaches_noise() {
        let s = NoiseSchedule::new(&ScheduleConfig::default()).unwrap();
        assert_eq!(s.steps(), 200);
        assert!(s.alpha_bar(200) < 0.05);
        for t in 2..=200 {
            assert!(s.beta(t) > s.beta(t - 1));
        }
        assert!(NoiseSchedule::new(&ScheduleConfig {
            steps: 200,
            beta_start: 1e-4,
            beta_end: 0.02
        })
        .is_err());
    }

    #[test]
    fn forward_noise_rejects_bad_t() {
        let s = NoiseSchedule::new(&ScheduleConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y0 = Tensor::zeros(&[2]);
        assert!(matches!(forward_noise(&y0, 0, &s, &mut rng), Err(Error::Usage(_))));
        assert!(matches!(forward_noise(&y0, 201, &s, &mut rng), Err(Error::Usage(_))));
    }

    #[test]
    fn assemble_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let za = Tensor::randn(&[4, 8, 8], &mut rng);
        let zo = Tensor::randn(&[4, 8, 8], &mut rng);
        let zi = Tensor::randn(&[4, 8, 8], &mut rng);
        let m = Tensor::from_fn(&[1, 8, 8], |i| (i % 3 == 0) as u8 as f64);
        let (z_in, m_in) = assemble(&za, &zo, &zi, &m).unwrap();
        assert_eq!(z_in.shape(), &[4, 8, 24]);
        assert_eq!(m_in.shape(), &[1, 8, 24]);
        assert_eq!(extract_slot(&z_in, 0).unwrap(), za);
        assert_eq!(extract_slot(&z_in, 1).unwrap(), zo);
        assert_eq!(extract_slot(&z_in, 2).unwrap(), zi);
        assert_eq!(m_in.sum(), m.sum());
        let bad = Tensor::zeros(&[4, 8, 7]);
        assert!(matches!(assemble(&za, &bad, &zi, &m), Err(Error::Input(_))));
    }

    #[test]
    fn guidance_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u = Tensor::randn(&[3, 4], &mut rng);
        let c = Tensor::randn(&[3, 4], &mut rng);
        assert_eq!(cfg_combine(&u, &c, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&u, &c, 0.0).unwrap(), u);
        assert_eq!(cfg_combine(&c, &c, 7.3).unwrap(), c);
        let z = Tensor::zeros(&[3, 4]);
        assert_eq!(cfg_combine(&z, &c, 2.5).unwrap(), c.map(|v| 2.5 * v));
        assert!(matches!(cfg_combine(&u, &Tensor::zeros(&[4, 3]), 1.0), Err(Error::Input(_))));
    }

    #[test]
    fn exact_predictor_recovers_the_target() {
        let sched = NoiseSchedule::new(&ScheduleConfig::default()).unwrap();
        let x0 = Tensor::from_fn(&[4, 2, 6], |i| (i as f64 * 0.37).sin() * 2.0);
        for sampler in [SamplerKind::Ddim, SamplerKind::Ddpm] {
            let cfg = SampleConfig { sampler, ..Default::default() };
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let init = Tensor::randn(x0.shape(), &mut rng);
            let out = reverse_chain(&sched, &cfg, init, &mut rng, |y, t| {
                let ab = sched.alpha_bar(t);
                y.zip_with(&x0, |yv, xv| (yv - ab.sqrt() * xv) / (1.0 - ab).sqrt())
            })
            .unwrap();
            assert!(out.max_abs_diff(&x0) < 1e-9, "{sampler:?}: {}", out.max_abs_diff(&x0));
        }
    }

    #[test]
    fn strided_times_descend_to_one() {
        assert_eq!(strided_times(10, 5), vec![10, 8, 6, 4, 2]);
        assert_eq!(strided_times(4, 4), vec![4, 3, 2, 1]);
    }

    #[test]
    fn ablation_names_round_trip() {
        for a in [Ablation::Base, Ablation::Gol, Ablation::GolLocc] {
            assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
            let json = serde_json::to_string(&a).unwrap();
            assert_eq!(json, format!("\"{}\"", a.name()));
        }
    }
}
