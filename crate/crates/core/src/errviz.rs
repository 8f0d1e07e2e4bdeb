//! Absolute-error heat maps rendered to 8-bit RGB PNG.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_MAX_DISPLAY: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColorStop {
    pub position: f64,
    pub rgb: [u8; 3],
}

/// Blue → cyan → green → yellow → red.
pub const RAMP: [ColorStop; 5] = [
    ColorStop { position: 0.0, rgb: [0, 0, 255] },
    ColorStop { position: 0.25, rgb: [0, 255, 255] },
    ColorStop { position: 0.5, rgb: [0, 255, 0] },
    ColorStop { position: 0.75, rgb: [255, 255, 0] },
    ColorStop { position: 1.0, rgb: [255, 0, 0] },
];

/// Row-major `height × width × 3` image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = 3 * (row * self.width + col);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

/// Piecewise-linear ramp lookup for `t` in [0, 1], rounded half-up.
pub fn colorize(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let k = RAMP.windows(2).position(|w| t <= w[1].position).unwrap_or(RAMP.len() - 2);
    let (a, b) = (RAMP[k], RAMP[k + 1]);
    let f = (t - a.position) / (b.position - a.position);
    let mut out = [0u8; 3];
    for c in 0..3 {
        let v = a.rgb[c] as f64 + f * (b.rgb[c] as f64 - a.rgb[c] as f64);
        out[c] = (v + 0.5).floor().clamp(0.0, 255.0) as u8;
    }
    out
}

/// Colors clamp(|y − ŷ|, 0, max_display) / max_display through [`RAMP`].
pub fn error_map(y: &Tensor<f32>, y_hat: &Tensor<f32>, max_display: f64) -> Result<RgbImage> {
    if !(max_display > 0.0) || !max_display.is_finite() {
        return Err(Error::config(format!("max_display must be positive, got {max_display}")));
    }
    if y.shape() != y_hat.shape() {
        return Err(Error::contract(format!(
            "error map inputs differ in shape: {:?} vs {:?}",
            y.shape(),
            y_hat.shape()
        )));
    }
    let s = y.shape();
    if s.len() < 2 || s[..s.len() - 2].iter().any(|&d| d != 1) {
        return Err(Error::contract(format!("expected a single image, got shape {s:?}")));
    }
    let (height, width) = (s[s.len() - 2], s[s.len() - 1]);
    let mut pixels = Vec::with_capacity(3 * height * width);
    for (&a, &b) in y.data().iter().zip(y_hat.data()) {
        let d = (a as f64 - b as f64).abs().min(max_display);
        pixels.extend_from_slice(&colorize(d / max_display));
    }
    Ok(RgbImage { width, height, pixels })
}

/// Gray rendering of a single [0, 1] image (values are clamped).
pub fn grayscale(t: &Tensor<f32>) -> Result<RgbImage> {
    let s = t.shape();
    if s.len() < 2 || s[..s.len() - 2].iter().any(|&d| d != 1) {
        return Err(Error::contract(format!("expected a single image, got shape {s:?}")));
    }
    let (height, width) = (s[s.len() - 2], s[s.len() - 1]);
    let mut pixels = Vec::with_capacity(3 * height * width);
    for &v in t.data() {
        let b = (v.clamp(0.0, 1.0) as f64 * 255.0 + 0.5).floor() as u8;
        pixels.extend_from_slice(&[b, b, b]);
    }
    Ok(RgbImage { width, height, pixels })
}

pub fn write_png(path: &Path, img: &RgbImage) -> Result<()> {
    if img.width == 0 || img.height == 0 {
        return Err(Error::contract("cannot write a zero-sized image"));
    }
    if img.pixels.len() != 3 * img.width * img.height {
        return Err(Error::contract("pixel buffer does not match image size"));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let to_io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut writer = enc.write_header().map_err(to_io)?;
    writer.write_image_data(&img.pixels).map_err(to_io)?;
    writer.finish().map_err(to_io)
}

/// Reads an 8-bit RGB PNG.
pub fn read_png(path: &Path) -> Result<RgbImage> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| Error::format("png", e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::format("png", e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format("png", "expected 8-bit RGB"));
    }
    buf.truncate(info.buffer_size());
    Ok(RgbImage {
        width: info.width as usize,
        height: info.height as usize,
        pixels: buf,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn field(v: f32) -> Tensor<f32> {
        Tensor::full(&[1, 4, 5], v)
    }

    #[test]
    fn ramp_stops_and_examples() {
        for s in RAMP {
            assert_eq!(colorize(s.position), s.rgb);
        }
        // 0.125 sits halfway from blue to cyan: 127.5 rounds up
        assert_eq!(colorize(0.125), [0, 128, 255]);
        let y = field(0.5);
        let img = error_map(&y, &y, 0.3).unwrap();
        assert!(img.pixels.chunks(3).all(|p| p == [0, 0, 255]));
        let img = error_map(&y, &field(0.0), 0.3).unwrap();
        assert!(img.pixels.chunks(3).all(|p| p == [255, 0, 0]));
        let img = error_map(&field(0.25), &field(0.0), 0.5).unwrap();
        assert!(img.pixels.chunks(3).all(|p| p == [0, 255, 0]));
        assert!(matches!(error_map(&y, &y, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.png");
        let img = RgbImage {
            width: 2,
            height: 2,
            pixels: vec![0, 0, 255, 1, 2, 3, 255, 0, 0, 9, 8, 7],
        };
        write_png(&path, &img).unwrap();
        assert_eq!(read_png(&path).unwrap(), img);
        let empty = RgbImage { width: 0, height: 0, pixels: vec![] };
        assert!(matches!(write_png(&path, &empty), Err(Error::Contract(_))));
    }

    proptest! {
        #[test]
        fn symmetric_and_monotone(a in prop::collection::vec(0.0f32..1.0, 20), b in prop::collection::vec(0.0f32..1.0, 20), m in 0.05f64..1.0) {
            let y = Tensor::new(vec![1, 4, 5], a).unwrap();
            let g = Tensor::new(vec![1, 4, 5], b).unwrap();
            let e1 = error_map(&y, &g, m).unwrap();
            prop_assert_eq!(&e1, &error_map(&g, &y, m).unwrap());
            let e2 = error_map(&y, &g, 2.0 * m).unwrap();
            for (p1, p2) in e1.pixels.chunks(3).zip(e2.pixels.chunks(3)) {
                prop_assert!(p2[0] <= p1[0]);
            }
        }
    }
}
