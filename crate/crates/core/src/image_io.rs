//! 8-bit PNG reading and writing for `3×H×W` images and binary masks.

use std::fs::{self, File};
use std::io::{BufWriter, Cursor};
use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::tensor::Tensor;

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let encode_err = |e: png::EncodingError| Error::Data(format!("cannot encode {}: {e}", path.display()));
    let mut writer = enc.write_header().map_err(encode_err)?;
    writer.write_image_data(data).map_err(encode_err)?;
    writer.finish().map_err(encode_err)
}

/// Write a `3×H×W` image with values in `[0, 1]` as RGB8 (values are clamped
/// and rounded to the nearest multiple of 1/255).
pub fn write_rgb(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Input(format!("write_rgb expects 3×H×W, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = image.data();
    let mut bytes = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for c in 0..3 {
            bytes.push(to_u8(d[c * h * w + i]));
        }
    }
    write_png(path, w, h, png::ColorType::Rgb, &bytes)
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let bytes: Vec<u8> = mask.data().iter().map(|&b| if b { 255 } else { 0 }).collect();
    write_png(path, mask.width(), mask.height(), png::ColorType::Grayscale, &bytes)
}

struct Decoded {
    width: usize,
    height: usize,
    channels: usize,
    bytes: Vec<u8>,
}

fn read_png(path: &Path) -> Result<Decoded> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |e: png::DecodingError| Error::Data(format!("corrupt PNG {}: {e}", path.display()));
    let mut dec = png::Decoder::new(Cursor::new(raw));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(bad)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Data(format!("PNG {} is too large", path.display())))?;
    let mut bytes = vec![0; size];
    let info = reader.next_frame(&mut bytes).map_err(bad)?;
    bytes.truncate(info.buffer_size());
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => {
            return Err(Error::Data(format!("unexpanded palette PNG {}", path.display())));
        }
    };
    Ok(Decoded {
        width: info.width as usize,
        height: info.height as usize,
        channels,
        bytes,
    })
}

/// Read any 8/16-bit PNG as a `3×H×W` image in `[0, 1]`; alpha is ignored,
/// grayscale is replicated.
pub fn read_rgb(path: &Path) -> Result<Tensor> {
    let d = read_png(path)?;
    let n = d.width * d.height;
    let mut data = vec![0.0; 3 * n];
    for i in 0..n {
        let px = &d.bytes[i * d.channels..(i + 1) * d.channels];
        for c in 0..3 {
            let v = if d.channels >= 3 { px[c] } else { px[0] };
            data[c * n + i] = f64::from(v) / 255.0;
        }
    }
    Tensor::new(vec![3, d.height, d.width], data)
}

/// Read a PNG as a mask: a pixel is set when its first channel is nonzero.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let d = read_png(path)?;
    let data = d.bytes.chunks(d.channels).map(|px| px[0] != 0).collect();
    Mask::new(d.height, d.width, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn multiples_of_255_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let img = Tensor::from_fn(&[3, 4, 5], |i| ((i * 37) % 256) as f64 / 255.0);
        write_rgb(&path, &img).unwrap();
        assert_eq!(read_rgb(&path).unwrap(), img);

        let m = Mask::from_fn(4, 5, |y, x| (x + y) % 3 == 0);
        let mpath = dir.path().join("m.png");
        write_mask(&mpath, &m).unwrap();
        assert_eq!(read_mask(&mpath).unwrap(), m);
    }

    #[test]
    fn garbage_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.png");
        std::fs::write(&path, b"definitely not a png").unwrap();
        assert!(matches!(read_rgb(&path), Err(Error::Data(_))));
    }
}
