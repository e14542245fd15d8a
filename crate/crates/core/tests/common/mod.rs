#![allow(dead_code)]

use layerfit::mask::Mask;
use layerfit::metrics::Normalization;
use layerfit::Tensor;

/// Layer scores computed pixel by pixel: band membership from an explicit
/// Chebyshev-distance search, colour distance from the raw channel values.
pub fn naive_lacd(gt: &Tensor, gen: &Tensor, layers: &[Mask], lambda1: f64, radius: usize, norm: Normalization) -> (Vec<f64>, f64) {
    let (h, w) = layers[0].dims();
    let n = h * w;
    let mut scores = Vec::new();
    for (i, a) in layers.iter().enumerate() {
        let (mut band_sum, mut band_n, mut core_sum, mut core_n) = (0.0, 0usize, 0.0, 0usize);
        for y in 0..h {
            for x in 0..w {
                if !a.get(y, x) {
                    continue;
                }
                let mut near_next = false;
                if let Some(next) = layers.get(i + 1) {
                    for yy in 0..h {
                        for xx in 0..w {
                            let d = y.abs_diff(yy).max(x.abs_diff(xx));
                            if d <= radius && next.get(yy, xx) {
                                near_next = true;
                            }
                        }
                    }
                }
                let mut sq = 0.0;
                for c in 0..3 {
                    let k = c * n + y * w + x;
                    sq += (gt.data()[k] - gen.data()[k]).powi(2);
                }
                let e = sq.sqrt();
                if near_next {
                    band_sum += e;
                    band_n += 1;
                } else {
                    core_sum += e;
                    core_n += 1;
                }
            }
        }
        let term = |s: f64, c: usize| match norm {
            Normalization::RawSum => s,
            Normalization::PerPixel if c == 0 => 0.0,
            Normalization::PerPixel => s / c as f64,
        };
        scores.push(lambda1 * term(band_sum, band_n) + term(core_sum, core_n));
    }
    let mut total = 0.0;
    for s in &scores {
        total += s;
    }
    let mean = total / scores.len() as f64;
    (scores, mean)
}

/// Random blob-like layer masks so bands and interiors are both non-trivial.
pub fn random_layers(h: usize, w: usize, count: usize, rng: &mut impl rand::Rng) -> Vec<Mask> {
    (0..count)
        .map(|_| {
            let (cy, cx) = (rng.random_range(0..h) as f64, rng.random_range(0..w) as f64);
            let (ry, rx) = (rng.random_range(1.0..h as f64 / 2.0 + 1.0), rng.random_range(1.0..w as f64 / 2.0 + 1.0));
            let noise: f64 = rng.random_range(0.0..0.15);
            let flips: Vec<bool> = (0..h * w).map(|_| rng.random::<f64>() < noise).collect();
            Mask::from_fn(h, w, |y, x| {
                let d = ((y as f64 - cy) / ry).powi(2) + ((x as f64 - cx) / rx).powi(2);
                (d <= 1.0) ^ flips[y * w + x]
            })
        })
        .collect()
}

pub fn random_image(h: usize, w: usize, rng: &mut impl rand::Rng) -> Tensor {
    Tensor::rand_uniform(&[3, h, w], 0.0, 1.0, rng)
}
