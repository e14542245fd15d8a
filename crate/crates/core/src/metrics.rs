//! Layered appearance coherence difference (LACD) and SSIM.
//!
//! For layers ordered inner → outer with regions `A_i`, the band
//! `B_i = A_i ∧ dilate(A_{i+1}, r)` holds the pixels of layer `i` next to
//! the layer above it (`B_N = ∅`) and `C_i = A_i \ B_i` is the interior.
//! Each layer scores `λ1 · Σ_{B_i} ‖x_gt − x_gen‖₂ + Σ_{C_i} ‖x_gt − x_gen‖₂`
//! with the per-pixel norm taken over colour channels; LACD is the mean
//! over layers. In per-pixel mode each sum is divided by its region size.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::parallel::{self, Execution};
use crate::tensor::Tensor;

pub const DEFAULT_LAMBDA1: f64 = 3.0;
pub const DEFAULT_BAND_RADIUS: usize = 3;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// Plain sums over each region.
    #[serde(rename = "raw")]
    RawSum,
    /// Sums divided by the region's pixel count.
    #[default]
    PerPixel,
}

impl std::str::FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Normalization::RawSum),
            "per-pixel" => Ok(Normalization::PerPixel),
            _ => Err(Error::Config(format!("unknown normalization {s:?}; expected raw or per-pixel"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerRegions {
    pub layers: Vec<Mask>,
    pub bands: Vec<Mask>,
    pub interiors: Vec<Mask>,
}

impl LayerRegions {
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.layers[0].dims()
    }
}

/// Split every layer into its band next to the following layer and its interior.
pub fn derive_regions(layer_masks: &[Mask], band_radius: usize) -> Result<LayerRegions> {
    let Some(first) = layer_masks.first() else {
        return Err(Error::Input("at least one layer mask is required".into()));
    };
    if band_radius == 0 {
        return Err(Error::Config("band radius must be at least 1".into()));
    }
    if let Some(m) = layer_masks.iter().find(|m| m.dims() != first.dims()) {
        return Err(Error::Input(format!(
            "layer masks differ in size: {:?} vs {:?}",
            first.dims(),
            m.dims()
        )));
    }
    let n = layer_masks.len();
    let mut bands = Vec::with_capacity(n);
    let mut interiors = Vec::with_capacity(n);
    for (i, a) in layer_masks.iter().enumerate() {
        if a.is_empty() {
            log::warn!("layer {} region is empty; its score is 0", i + 1);
        }
        let band = match layer_masks.get(i + 1) {
            Some(next) => a.and(&next.dilate(band_radius))?,
            None => Mask::empty(a.height(), a.width()),
        };
        interiors.push(a.and_not(&band)?);
        bands.push(band);
    }
    Ok(LayerRegions {
        layers: layer_masks.to_vec(),
        bands,
        interiors,
    })
}

fn check_pair(gt: &Tensor, gen: &Tensor, dims: (usize, usize)) -> Result<()> {
    let want = [3, dims.0, dims.1];
    if gt.shape() != want || gen.shape() != want {
        return Err(Error::Input(format!(
            "images must be {want:?} to match the masks, got {:?} and {:?}",
            gt.shape(),
            gen.shape()
        )));
    }
    Ok(())
}

/// Euclidean colour distance at every pixel, row-major `H·W`.
pub fn pixel_errors(gt: &Tensor, gen: &Tensor) -> Result<Vec<f64>> {
    if gt.shape() != gen.shape() || gt.rank() != 3 || gt.shape()[0] != 3 {
        return Err(Error::Input(format!(
            "expected two 3×H×W images of equal size, got {:?} and {:?}",
            gt.shape(),
            gen.shape()
        )));
    }
    let n = gt.shape()[1] * gt.shape()[2];
    let (a, b) = (gt.data(), gen.data());
    Ok((0..n)
        .map(|i| {
            (0..3)
                .map(|c| {
                    let d = a[c * n + i] - b[c * n + i];
                    d * d
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect())
}

fn region_term(errors: &[f64], region: &Mask, norm: Normalization) -> f64 {
    let (mut sum, mut count) = (0.0, 0usize);
    for (e, &m) in errors.iter().zip(region.data()) {
        if m {
            sum += e;
            count += 1;
        }
    }
    match norm {
        Normalization::RawSum => sum,
        Normalization::PerPixel if count == 0 => 0.0,
        Normalization::PerPixel => sum / count as f64,
    }
}

fn layer_score(errors: &[f64], regions: &LayerRegions, i: usize, lambda1: f64, norm: Normalization) -> f64 {
    lambda1 * region_term(errors, &regions.bands[i], norm) + region_term(errors, &regions.interiors[i], norm)
}

/// Score of layer `i` (0-based).
pub fn lacd_layer(gt: &Tensor, gen: &Tensor, regions: &LayerRegions, i: usize, lambda1: f64, norm: Normalization) -> Result<f64> {
    if i >= regions.len() {
        return Err(Error::Usage(format!("layer index {i} out of range for {} layers", regions.len())));
    }
    check_pair(gt, gen, regions.dims())?;
    Ok(layer_score(&pixel_errors(gt, gen)?, regions, i, lambda1, norm))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LacdReport {
    pub per_layer: Vec<f64>,
    pub lacd: f64,
    pub lambda1: f64,
    pub normalization: Normalization,
}

pub fn lacd(gt: &Tensor, gen: &Tensor, regions: &LayerRegions, lambda1: f64, norm: Normalization) -> Result<LacdReport> {
    if regions.is_empty() {
        return Err(Error::Input("LACD needs at least one layer".into()));
    }
    check_pair(gt, gen, regions.dims())?;
    let errors = pixel_errors(gt, gen)?;
    let per_layer: Vec<f64> = (0..regions.len())
        .map(|i| layer_score(&errors, regions, i, lambda1, norm))
        .collect();
    let lacd = per_layer.iter().sum::<f64>() / per_layer.len() as f64;
    Ok(LacdReport {
        per_layer,
        lacd,
        lambda1,
        normalization: norm,
    })
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable Gaussian filter over the valid region of an `h×w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|k| win[k] * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|k| win[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over colour channels with an 11×11 Gaussian window (σ = 1.5)
/// evaluated at every fully-contained window position.
pub fn ssim(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.shape() != y.shape() || x.rank() != 3 {
        return Err(Error::Input(format!(
            "SSIM needs two C×H×W images of equal size, got {:?} and {:?}",
            x.shape(),
            y.shape()
        )));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Input(format!(
            "SSIM needs images of at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {h}×{w}"
        )));
    }
    let win = gaussian_window();
    let n = h * w;
    let mut total = 0.0;
    for ch in 0..c {
        let a = &x.data()[ch * n..(ch + 1) * n];
        let b = &y.data()[ch * n..(ch + 1) * n];
        let prod = |f: fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(b).map(|(&p, &q)| f(p, q)).collect() };
        let mu_a = filter_valid(a, h, w, &win);
        let mu_b = filter_valid(b, h, w, &win);
        let aa = filter_valid(&prod(|p, _| p * p), h, w, &win);
        let bb = filter_valid(&prod(|_, q| q * q), h, w, &win);
        let ab = filter_valid(&prod(|p, q| p * q), h, w, &win);
        let mut sum = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            sum += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        }
        total += sum / mu_a.len() as f64;
    }
    Ok(total / c as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub lambda1: f64,
    pub band_radius: usize,
    pub normalization: Normalization,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            lambda1: DEFAULT_LAMBDA1,
            band_radius: DEFAULT_BAND_RADIUS,
            normalization: Normalization::PerPixel,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) {
            return Err(Error::Config(format!("lambda1 must be ≥ 0, got {}", self.lambda1)));
        }
        if self.band_radius == 0 {
            return Err(Error::Config("band radius must be at least 1".into()));
        }
        Ok(())
    }
}

/// One generated image with its reference and layer masks (inner → outer).
#[derive(Clone, Debug)]
pub struct EvalItem {
    pub id: String,
    pub ground_truth: Tensor,
    pub generated: Tensor,
    pub layers: Vec<Mask>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    /// Per-layer scores and LACD under the configured normalization.
    pub per_layer: Vec<f64>,
    pub lacd: f64,
    pub lacd_raw: f64,
    pub lacd_per_pixel: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub config: EvalConfig,
    pub samples: Vec<SampleScore>,
    pub mean_lacd: f64,
    pub mean_lacd_raw: f64,
    pub mean_lacd_per_pixel: f64,
    pub mean_ssim: f64,
}

pub fn score_item(item: &EvalItem, config: &EvalConfig) -> Result<SampleScore> {
    let with_id = |e: Error| match e {
        Error::Input(m) => Error::Input(format!("sample {}: {m}", item.id)),
        other => other,
    };
    let regions = derive_regions(&item.layers, config.band_radius).map_err(with_id)?;
    let raw = lacd(&item.ground_truth, &item.generated, &regions, config.lambda1, Normalization::RawSum).map_err(with_id)?;
    let per_pixel = lacd(&item.ground_truth, &item.generated, &regions, config.lambda1, Normalization::PerPixel).map_err(with_id)?;
    let ssim = ssim(&item.ground_truth, &item.generated).map_err(with_id)?;
    let chosen = match config.normalization {
        Normalization::RawSum => &raw,
        Normalization::PerPixel => &per_pixel,
    };
    Ok(SampleScore {
        id: item.id.clone(),
        per_layer: chosen.per_layer.clone(),
        lacd: chosen.lacd,
        lacd_raw: raw.lacd,
        lacd_per_pixel: per_pixel.lacd,
        ssim,
    })
}

/// Score every item (concurrently under `exec`) and average.
pub fn evaluate(items: &[EvalItem], config: &EvalConfig, exec: Execution) -> Result<CorpusReport> {
    if items.is_empty() {
        return Err(Error::Input("nothing to evaluate".into()));
    }
    let samples: Vec<SampleScore> = parallel::map(exec, items, |it| score_item(it, config))
        .into_iter()
        .collect::<Result<_>>()?;
    let n = samples.len() as f64;
    let mean = |f: fn(&SampleScore) -> f64| samples.iter().map(f).sum::<f64>() / n;
    Ok(CorpusReport {
        config: config.clone(),
        mean_lacd: mean(|s| s.lacd),
        mean_lacd_raw: mean(|s| s.lacd_raw),
        mean_lacd_per_pixel: mean(|s| s.lacd_per_pixel),
        mean_ssim: mean(|s| s.ssim),
        samples,
    })
}

impl CorpusReport {
    /// CSV with one row per sample and a final `mean` row.
    pub fn to_csv(&self) -> String {
        let layers = self.samples.iter().map(|s| s.per_layer.len()).max().unwrap_or(0);
        let mut out = String::from("id");
        for i in 1..=layers {
            out.push_str(&format!(",lacd_{i}"));
        }
        out.push_str(",lacd,lacd_raw,lacd_per_pixel,ssim\n");
        for s in &self.samples {
            out.push_str(&s.id);
            for i in 0..layers {
                match s.per_layer.get(i) {
                    Some(v) => out.push_str(&format!(",{v}")),
                    None => out.push(','),
                }
            }
            out.push_str(&format!(",{},{},{},{}\n", s.lacd, s.lacd_raw, s.lacd_per_pixel, s.ssim));
        }
        out.push_str("mean");
        out.push_str(&",".repeat(layers));
        out.push_str(&format!(
            ",{},{},{},{}\n",
            self.mean_lacd, self.mean_lacd_raw, self.mean_lacd_per_pixel, self.mean_ssim
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn abutting_layers_give_one_pixel_band() {
        let a1 = Mask::from_fn(6, 8, |_, x| x < 4);
        let a2 = Mask::from_fn(6, 8, |_, x| x >= 4);
        let r = derive_regions(&[a1.clone(), a2], 1).unwrap();
        assert_eq!(r.bands[0], Mask::from_fn(6, 8, |_, x| x == 3));
        assert_eq!(r.interiors[0], Mask::from_fn(6, 8, |_, x| x < 3));
        assert!(r.bands[1].is_empty());
        assert_eq!(r.bands[0].count() + r.interiors[0].count(), a1.count());
    }

    #[test]
    fn single_band_pixel_scores_lambda() {
        let a1 = Mask::from_fn(4, 4, |_, x| x < 2);
        let a2 = Mask::from_fn(4, 4, |_, x| x >= 2);
        let r = derive_regions(&[a1, a2], 1).unwrap();
        let gt = Tensor::zeros(&[3, 4, 4]);
        let mut gen = gt.clone();
        // pixel (0, 1) lies in the band of layer 1
        gen.data_mut()[1] = 0.6;
        gen.data_mut()[2 * 16 + 1] = 0.8;
        let band = lacd_layer(&gt, &gen, &r, 0, 3.0, Normalization::RawSum).unwrap();
        assert!((band - 3.0).abs() < 1e-12);
        let mut gen2 = gt.clone();
        gen2.data_mut()[0] = 0.6;
        gen2.data_mut()[2 * 16] = 0.8;
        let interior = lacd_layer(&gt, &gen2, &r, 0, 3.0, Normalization::RawSum).unwrap();
        assert!((band / interior - 3.0).abs() < 1e-12);
        assert!(matches!(lacd_layer(&gt, &gen, &r, 2, 3.0, Normalization::RawSum), Err(Error::Usage(_))));
    }

    #[test]
    fn ssim_basics() {
        let x = Tensor::from_fn(&[3, 16, 16], |i| ((i * 7919) % 13) as f64 / 12.0);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let bin = Tensor::from_fn(&[3, 16, 16], |i| ((i / 3 + i / 16) % 2) as f64);
        let inv = bin.map(|v| 1.0 - v);
        assert!(ssim(&bin, &inv).unwrap() < 0.0);
        assert!(matches!(ssim(&Tensor::zeros(&[3, 10, 16]), &Tensor::zeros(&[3, 10, 16])), Err(Error::Input(_))));
    }

    #[test]
    fn constant_images_match_closed_form() {
        let (m1, m2) = (0.3, 0.7);
        let a = Tensor::full(&[3, 12, 12], m1);
        let b = Tensor::full(&[3, 12, 12], m2);
        let want = (2.0 * m1 * m2 + SSIM_C1) * SSIM_C2 / ((m1 * m1 + m2 * m2 + SSIM_C1) * SSIM_C2);
        assert!((ssim(&a, &b).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn csv_has_header_rows_and_mean() {
        let m = Mask::from_fn(12, 12, |y, _| y < 6);
        let img = Tensor::full(&[3, 12, 12], 0.5);
        let items = vec![EvalItem {
            id: "a".into(),
            ground_truth: img.clone(),
            generated: img,
            layers: vec![m.clone(), m.not()],
        }];
        let report = evaluate(&items, &EvalConfig::default(), Execution::Sequential).unwrap();
        assert_eq!(report.mean_lacd, 0.0);
        assert!((report.mean_ssim - 1.0).abs() < 1e-12);
        let csv = report.to_csv();
        assert!(csv.starts_with("id,lacd_1,lacd_2,lacd,"));
        assert_eq!(csv.lines().count(), 3);
    }
}
