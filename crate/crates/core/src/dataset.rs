//! Layered-garment quadruplets and a synthetic generator with exact
//! occlusion ground truth.
//!
//! Every sample is rendered back-to-front (background, body, inner garment,
//! outer garment), so the pixels where the inner garment stays visible are
//! known exactly: `inner_visibility = A_inner ∧ ¬A_outer`. Garment images
//! show each garment at its on-body position over a dark gray background. All
//! pixel values are multiples of 1/255, which makes PNG storage lossless.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_io::{read_mask, read_rgb, write_mask, write_rgb};
use crate::mask::Mask;
use crate::parallel::{self, Execution};
use crate::tensor::Tensor;

/// Train share of the reference dataset split (2,783 of 3,538 samples).
pub const REFERENCE_TRAIN_FRACTION: f64 = 2783.0 / 3538.0;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeFamily {
    Rectangle,
    Ellipse,
    TSilhouette,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TextureFamily {
    Flat,
    Stripes,
    Checker,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Square image side in pixels; must be a multiple of 32.
    pub size: usize,
    pub shapes: Vec<ShapeFamily>,
    pub textures: Vec<TextureFamily>,
    /// Accepted range of `|inner ∧ outer| / |inner|`.
    pub occlusion_range: [f64; 2],
    pub seed: u64,
    pub train_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 64,
            shapes: vec![ShapeFamily::Rectangle, ShapeFamily::Ellipse, ShapeFamily::TSilhouette],
            textures: vec![TextureFamily::Flat, TextureFamily::Stripes, TextureFamily::Checker],
            occlusion_range: [0.2, 0.7],
            seed: 0,
            train_fraction: REFERENCE_TRAIN_FRACTION,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || !self.size.is_multiple_of(32) {
            return Err(Error::Config(format!(
                "image size {} must be a positive multiple of 32",
                self.size
            )));
        }
        if self.shapes.is_empty() || self.textures.is_empty() {
            return Err(Error::Config("shape and texture families must be non-empty".into()));
        }
        let [lo, hi] = self.occlusion_range;
        if !(0.0..1.0).contains(&lo) || !(lo..1.0).contains(&hi) || hi - lo < 0.05 {
            return Err(Error::Config(format!(
                "occlusion range [{lo}, {hi}] must satisfy 0 ≤ lo, lo + 0.05 ≤ hi < 1"
            )));
        }
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return Err(Error::Config("train_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One sample: two garments, the dressed person, the agnostic person and
/// the masks that tie them together.
#[derive(Clone, Debug, PartialEq)]
pub struct Quadruplet {
    pub id: String,
    pub split: Split,
    pub inner_garment: Tensor,
    pub outer_garment: Tensor,
    pub person: Tensor,
    pub agnostic: Tensor,
    /// 1 on the region to regenerate; blanked in `agnostic`.
    pub upper_mask: Mask,
    /// Visible inner-garment pixels of `person`, zero elsewhere.
    pub inner_crop: Tensor,
    /// `[inner, outer]` full garment regions, ordered inner → outer.
    pub layer_masks: Vec<Mask>,
    pub inner_visibility: Mask,
}

/// File name and role of every per-sample file.
pub const SAMPLE_FILES: [(&str, &str); 9] = [
    ("inner.png", "inner garment"),
    ("outer.png", "outer garment"),
    ("person.png", "person"),
    ("agnostic.png", "agnostic"),
    ("mask_upper.png", "upper mask"),
    ("inner_crop.png", "inner crop"),
    ("layer_inner.png", "inner layer mask"),
    ("layer_outer.png", "outer layer mask"),
    ("inner_visible.png", "inner visibility"),
];

fn image_dims(t: &Tensor) -> Option<(usize, usize)> {
    let s = t.shape();
    (s.len() == 3 && s[0] == 3).then(|| (s[1], s[2]))
}

impl Quadruplet {
    pub fn dims(&self) -> (usize, usize) {
        self.upper_mask.dims()
    }

    /// `|inner ∧ outer| / |inner|`.
    pub fn occluded_fraction(&self) -> f64 {
        let inner = &self.layer_masks[0];
        let occluded = inner.and(&self.layer_masks[1]).map(|m| m.count()).unwrap_or(0);
        occluded as f64 / inner.count().max(1) as f64
    }

    /// Layer regions as seen in the dressed image: visible inner part, outer garment.
    pub fn visible_layers(&self) -> Vec<Mask> {
        vec![self.inner_visibility.clone(), self.layer_masks[1].clone()]
    }

    /// Check every structural invariant; the error names the first violation.
    pub fn check_invariants(&self) -> Result<()> {
        let fail = |what: &str| Err(Error::Data(format!("sample {}: {what}", self.id)));
        let dims = self.dims();
        for (name, img) in [
            ("inner garment", &self.inner_garment),
            ("outer garment", &self.outer_garment),
            ("person", &self.person),
            ("agnostic", &self.agnostic),
            ("inner crop", &self.inner_crop),
        ] {
            if image_dims(img) != Some(dims) {
                return fail(&format!("{name} shape {:?} does not match masks {dims:?}", img.shape()));
            }
            if img.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return fail(&format!("{name} has values outside [0, 1]"));
            }
        }
        if self.layer_masks.len() != 2 || self.layer_masks.iter().any(|m| m.dims() != dims) {
            return fail("expected two layer masks matching the image dims");
        }
        if self.inner_visibility.dims() != dims {
            return fail("inner visibility dims mismatch");
        }
        let (h, w) = dims;
        let n = h * w;
        let (p, a, crop) = (self.person.data(), self.agnostic.data(), self.inner_crop.data());
        for i in 0..n {
            let masked = self.upper_mask.data()[i];
            let visible = self.inner_visibility.data()[i];
            for c in 0..3 {
                let k = c * n + i;
                let want = if masked { 0.0 } else { p[k] };
                if a[k] != want {
                    return fail(&format!("agnostic != person ⊙ (1 − M) at pixel {i}"));
                }
                let want = if visible { p[k] } else { 0.0 };
                if crop[k] != want {
                    return fail(&format!("inner crop != person ⊙ visibility at pixel {i}"));
                }
            }
        }
        if !self.inner_visibility.is_subset_of(&self.layer_masks[0]) {
            return fail("inner visibility is not a subset of the inner layer");
        }
        let painter = self.layer_masks[0].and_not(&self.layer_masks[1])?;
        if painter != self.inner_visibility {
            return fail("inner visibility != inner ∧ ¬outer");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Rect { y0: f64, y1: f64, x0: f64, x1: f64 },
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
    Tee { body: [f64; 4], sleeves: [f64; 4] },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        let in_rect = |r: [f64; 4]| y >= r[0] && y < r[1] && x >= r[2] && x < r[3];
        match *self {
            Shape::Rect { y0, y1, x0, x1 } => in_rect([y0, y1, x0, x1]),
            Shape::Ellipse { cy, cx, ry, rx } => {
                let (dy, dx) = ((y - cy) / ry, (x - cx) / rx);
                dy * dy + dx * dx <= 1.0
            }
            Shape::Tee { body, sleeves } => in_rect(body) || in_rect(sleeves),
        }
    }

    /// Shape of `family` filling the box `[y0, y1) × [x0, x1)`.
    fn in_box(family: ShapeFamily, y0: f64, y1: f64, x0: f64, x1: f64) -> Shape {
        match family {
            ShapeFamily::Rectangle => Shape::Rect { y0, y1, x0, x1 },
            ShapeFamily::Ellipse => Shape::Ellipse {
                cy: 0.5 * (y0 + y1),
                cx: 0.5 * (x0 + x1),
                ry: 0.5 * (y1 - y0),
                rx: 0.5 * (x1 - x0),
            },
            ShapeFamily::TSilhouette => {
                let w = x1 - x0;
                let sleeve_h = 0.3 * (y1 - y0);
                Shape::Tee {
                    body: [y0, y1, x0 + 0.2 * w, x1 - 0.2 * w],
                    sleeves: [y0, y0 + sleeve_h, x0, x1],
                }
            }
        }
    }

    fn rasterize(&self, size: usize) -> Mask {
        Mask::from_fn(size, size, |y, x| self.contains(y as f64 + 0.5, x as f64 + 0.5))
    }
}

#[derive(Clone, Copy, Debug)]
struct Texture {
    family: TextureFamily,
    primary: [u8; 3],
    secondary: [u8; 3],
    period: usize,
    vertical: bool,
}

impl Texture {
    fn random<R: Rng + ?Sized>(family: TextureFamily, rng: &mut R) -> Self {
        let primary = random_color(rng);
        let mut secondary = random_color(rng);
        while color_distance(primary, secondary) < 90 {
            secondary = random_color(rng);
        }
        Self {
            family,
            primary,
            secondary,
            period: rng.random_range(3..=6),
            vertical: rng.random_bool(0.5),
        }
    }

    fn color(&self, y: usize, x: usize) -> [u8; 3] {
        let alt = match self.family {
            TextureFamily::Flat => false,
            TextureFamily::Stripes => (if self.vertical { x } else { y } / self.period) % 2 == 1,
            TextureFamily::Checker => (y / self.period + x / self.period) % 2 == 1,
        };
        if alt {
            self.secondary
        } else {
            self.primary
        }
    }
}

/// Background of the garment images, darker than any garment colour.
pub const GARMENT_BACKGROUND: u8 = 40;

/// Garment colour channels stay inside [70, 230], clear of the blanked
/// value 0 and of [`GARMENT_BACKGROUND`].
fn random_color<R: Rng + ?Sized>(rng: &mut R) -> [u8; 3] {
    [rng.random_range(70..=230), rng.random_range(70..=230), rng.random_range(70..=230)]
}

fn color_distance(a: [u8; 3], b: [u8; 3]) -> u32 {
    a.iter().zip(&b).map(|(&x, &y)| u32::from(x.abs_diff(y))).sum()
}

struct Canvas {
    size: usize,
    rgb: Vec<[u8; 3]>,
}

impl Canvas {
    fn filled(size: usize, color: [u8; 3]) -> Self {
        Self {
            size,
            rgb: vec![color; size * size],
        }
    }

    fn paint(&mut self, mask: &Mask, texture: &Texture) {
        for y in 0..self.size {
            for x in 0..self.size {
                if mask.get(y, x) {
                    self.rgb[y * self.size + x] = texture.color(y, x);
                }
            }
        }
    }

    fn paint_flat(&mut self, mask: &Mask, color: [u8; 3]) {
        for (px, &m) in self.rgb.iter_mut().zip(mask.data()) {
            if m {
                *px = color;
            }
        }
    }

    fn to_tensor(&self) -> Tensor {
        let n = self.size * self.size;
        let mut data = vec![0.0; 3 * n];
        for (i, px) in self.rgb.iter().enumerate() {
            for c in 0..3 {
                data[c * n + i] = f64::from(px[c]) / 255.0;
            }
        }
        Tensor::from_parts(vec![3, self.size, self.size], data)
    }
}

fn mask_image(image: &Tensor, keep: &Mask, keep_value: bool) -> Tensor {
    let n = keep.height() * keep.width();
    let mut out = image.clone();
    let d = out.data_mut();
    for (i, &m) in keep.data().iter().enumerate() {
        if m != keep_value {
            for c in 0..3 {
                d[c * n + i] = 0.0;
            }
        }
    }
    out
}

fn occlusion(inner: &Mask, outer: &Mask) -> f64 {
    let both = inner.data().iter().zip(outer.data()).filter(|(&a, &b)| a && b).count();
    both as f64 / inner.count().max(1) as f64
}

/// Outer garment placement whose overlap with `inner` lies in the configured range.
fn place_outer<R: Rng + ?Sized>(config: &SynthConfig, inner: &Mask, inner_box: [f64; 4], rng: &mut R) -> Mask {
    let s = config.size as f64;
    let [lo, hi] = config.occlusion_range;
    for _ in 0..400 {
        let family = *config.shapes.choose(rng).expect("validated non-empty");
        let w = s * rng.random_range(0.2..0.6);
        let h = s * rng.random_range(0.3..0.75);
        let cx = s * (0.5 + rng.random_range(-0.3..0.3));
        let y0 = s * rng.random_range(0.2..0.45);
        let shape = Shape::in_box(family, y0, (y0 + h).min(s), cx - 0.5 * w, cx + 0.5 * w);
        let outer = shape.rasterize(config.size);
        let f = occlusion(inner, &outer);
        if f >= lo && f <= hi {
            return outer;
        }
    }
    // Open jacket: two side panels; overlap grows monotonically with panel width.
    let [y0, y1, x0, x1] = inner_box;
    let target = 0.5 * (lo + hi);
    let panels = |pw: f64| {
        let left = Shape::Rect { y0: y0 - 1.0, y1: y1 + 1.0, x0: x0 - 2.0, x1: x0 + pw };
        let right = Shape::Rect { y0: y0 - 1.0, y1: y1 + 1.0, x0: x1 - pw, x1: x1 + 2.0 };
        Mask::from_fn(config.size, config.size, |y, x| {
            let (yy, xx) = (y as f64 + 0.5, x as f64 + 0.5);
            left.contains(yy, xx) || right.contains(yy, xx)
        })
    };
    let (mut a, mut b) = (0.0, 0.5 * (x1 - x0));
    for _ in 0..40 {
        let mid = 0.5 * (a + b);
        if occlusion(inner, &panels(mid)) < target {
            a = mid;
        } else {
            b = mid;
        }
    }
    panels(b)
}

/// Render sample `index`; depends only on `(config.seed, index)`.
pub fn generate_one(config: &SynthConfig, index: usize, split: Split) -> Result<Quadruplet> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64);
    let size = config.size;
    let s = size as f64;

    let bg = {
        let v: u8 = rng.random_range(170..=235);
        [v, v.saturating_sub(rng.random_range(0..=10)), v.saturating_sub(rng.random_range(0..=10))]
    };
    let skin: [u8; 3] = *[[224, 172, 140], [198, 134, 102], [141, 85, 60], [240, 200, 170]]
        .choose(&mut rng)
        .expect("non-empty");

    let torso_w = s * rng.random_range(0.4..0.55);
    let torso_cx = s * (0.5 + rng.random_range(-0.05..0.05));
    let torso_y0 = s * rng.random_range(0.25..0.32);
    let torso_y1 = s * rng.random_range(0.85..0.97);
    let head_r = s * rng.random_range(0.09..0.12);
    let head = Shape::Ellipse { cy: torso_y0 - head_r * 0.9, cx: torso_cx, ry: head_r, rx: head_r * 0.85 };
    let torso = Shape::Rect { y0: torso_y0, y1: torso_y1, x0: torso_cx - 0.5 * torso_w, x1: torso_cx + 0.5 * torso_w };
    let body = Mask::from_fn(size, size, |y, x| {
        let (yy, xx) = (y as f64 + 0.5, x as f64 + 0.5);
        head.contains(yy, xx) || torso.contains(yy, xx)
    });

    let inner_box = {
        let margin_x = torso_w * rng.random_range(0.0..0.1);
        let y0 = torso_y0 + s * rng.random_range(0.0..0.04);
        let y1 = torso_y1 - s * rng.random_range(0.0..0.1);
        [y0, y1, torso_cx - 0.5 * torso_w + margin_x, torso_cx + 0.5 * torso_w - margin_x]
    };
    let inner_family = *config.shapes.choose(&mut rng).expect("validated non-empty");
    let inner_shape = Shape::in_box(inner_family, inner_box[0], inner_box[1], inner_box[2], inner_box[3]);
    let inner = inner_shape.rasterize(size);
    let inner_texture = Texture::random(*config.textures.choose(&mut rng).expect("validated"), &mut rng);
    let outer = place_outer(config, &inner, inner_box, &mut rng);
    let mut outer_texture = Texture::random(*config.textures.choose(&mut rng).expect("validated"), &mut rng);
    while color_distance(outer_texture.primary, inner_texture.primary) < 90 {
        outer_texture = Texture::random(outer_texture.family, &mut rng);
    }

    let backdrop = [GARMENT_BACKGROUND; 3];
    let mut g_i = Canvas::filled(size, backdrop);
    g_i.paint(&inner, &inner_texture);
    let mut g_o = Canvas::filled(size, backdrop);
    g_o.paint(&outer, &outer_texture);

    let mut person = Canvas::filled(size, bg);
    person.paint_flat(&body, skin);
    person.paint(&inner, &inner_texture);
    person.paint(&outer, &outer_texture);
    let person = person.to_tensor();

    let upper_mask = inner.or(&outer)?.dilate(2);
    let inner_visibility = inner.and_not(&outer)?;
    let agnostic = mask_image(&person, &upper_mask, false);
    let inner_crop = mask_image(&person, &inner_visibility, true);

    Ok(Quadruplet {
        id: format!("{index:06}"),
        split,
        inner_garment: g_i.to_tensor(),
        outer_garment: g_o.to_tensor(),
        person,
        agnostic,
        upper_mask,
        inner_crop,
        layer_masks: vec![inner, outer],
        inner_visibility,
    })
}

/// Deterministic train/test assignment for `n` samples.
pub fn assign_splits(n: usize, train_fraction: f64, seed: u64) -> Vec<Split> {
    let n_train = (n as f64 * train_fraction).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    order.shuffle(&mut rng);
    let mut splits = vec![Split::Test; n];
    for &i in &order[..n_train.min(n)] {
        splits[i] = Split::Train;
    }
    splits
}

/// Generate `n` samples with ids `000000..`; runs samples concurrently under
/// `exec` with identical output.
pub fn generate(config: &SynthConfig, n: usize, exec: Execution) -> Result<Vec<Quadruplet>> {
    config.validate()?;
    let splits = assign_splits(n, config.train_fraction, config.seed);
    parallel::map_range(exec, n, |i| generate_one(config, i, splits[i]))
        .into_iter()
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub generator: SynthConfig,
    pub samples: Vec<ManifestEntry>,
}

pub fn sample_dir(root: &Path, split: Split, id: &str) -> PathBuf {
    root.join(split.dir_name()).join(id)
}

/// Write `samples` under `root/<split>/<id>/` plus `root/manifest.json`.
pub fn save(root: &Path, config: &SynthConfig, samples: &[Quadruplet]) -> Result<()> {
    for q in samples {
        let dir = sample_dir(root, q.split, &q.id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_rgb(&dir.join("inner.png"), &q.inner_garment)?;
        write_rgb(&dir.join("outer.png"), &q.outer_garment)?;
        write_rgb(&dir.join("person.png"), &q.person)?;
        write_rgb(&dir.join("agnostic.png"), &q.agnostic)?;
        write_mask(&dir.join("mask_upper.png"), &q.upper_mask)?;
        write_rgb(&dir.join("inner_crop.png"), &q.inner_crop)?;
        write_mask(&dir.join("layer_inner.png"), &q.layer_masks[0])?;
        write_mask(&dir.join("layer_outer.png"), &q.layer_masks[1])?;
        write_mask(&dir.join("inner_visible.png"), &q.inner_visibility)?;
    }
    let manifest = Manifest {
        seed: config.seed,
        generator: config.clone(),
        samples: samples
            .iter()
            .map(|q| ManifestEntry {
                id: q.id.clone(),
                split: q.split,
            })
            .collect(),
    };
    let path = root.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Json {
        path: path.clone(),
        source: e,
    })?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json { path, source: e })
}

/// A sample that could not be loaded; the rest of the dataset is unaffected.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleError {
    pub id: String,
    pub message: String,
}

#[derive(Debug)]
pub struct LoadReport {
    pub manifest: Manifest,
    pub samples: Vec<Quadruplet>,
    pub errors: Vec<SampleError>,
}

/// Load one sample directory. Files not listed in [`SAMPLE_FILES`] are ignored.
pub fn load_sample(root: &Path, id: &str, split: Split) -> Result<Quadruplet> {
    let dir = sample_dir(root, split, id);
    for (file, role) in SAMPLE_FILES {
        if !dir.join(file).is_file() {
            return Err(Error::Data(format!("sample {id}: missing {role} file {file}")));
        }
    }
    let q = Quadruplet {
        id: id.to_string(),
        split,
        inner_garment: read_rgb(&dir.join("inner.png"))?,
        outer_garment: read_rgb(&dir.join("outer.png"))?,
        person: read_rgb(&dir.join("person.png"))?,
        agnostic: read_rgb(&dir.join("agnostic.png"))?,
        upper_mask: read_mask(&dir.join("mask_upper.png"))?,
        inner_crop: read_rgb(&dir.join("inner_crop.png"))?,
        layer_masks: vec![read_mask(&dir.join("layer_inner.png"))?, read_mask(&dir.join("layer_outer.png"))?],
        inner_visibility: read_mask(&dir.join("inner_visible.png"))?,
    };
    q.check_invariants()?;
    Ok(q)
}

/// Load every sample of `split` (or all splits) listed in the manifest.
/// Unreadable samples are reported in `errors` and skipped.
pub fn load(root: &Path, split: Option<Split>) -> Result<LoadReport> {
    let manifest = read_manifest(root)?;
    let mut samples = Vec::new();
    let mut errors = Vec::new();
    for entry in &manifest.samples {
        if split.is_some_and(|s| s != entry.split) {
            continue;
        }
        match load_sample(root, &entry.id, entry.split) {
            Ok(q) => samples.push(q),
            Err(e) => {
                log::warn!("skipping sample {}: {e}", entry.id);
                errors.push(SampleError {
                    id: entry.id.clone(),
                    message: e.to_string(),
                });
            }
        }
    }
    Ok(LoadReport {
        manifest,
        samples,
        errors,
    })
}
