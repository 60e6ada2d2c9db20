use std::path::Path;

use ndarray::Array3;

use super::{DatasetError, Frame, FRAME_SIZE};

/// 8-bit interleaved image as decoded from disk, `height × width × channels`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl RawImage {
    pub fn from_fn(width: usize, height: usize, channels: usize, f: impl Fn(usize, usize, usize) -> u8) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self { width, height, channels, data }
    }

    /// Decodes an 8-bit RGB or grayscale PNG (gray is replicated to RGB).
    pub fn read_png(path: &Path) -> Result<Self, DatasetError> {
        let ingest = |reason: String| DatasetError::Ingest { path: path.to_path_buf(), reason };
        let file = std::fs::File::open(path).map_err(|e| ingest(e.to_string()))?;
        let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder.read_info().map_err(|e| ingest(e.to_string()))?;
        let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| ingest("image too large".into()))?];
        let info = reader.next_frame(&mut buf).map_err(|e| ingest(e.to_string()))?;
        let (w, h) = (info.width as usize, info.height as usize);
        let src_c = info.color_type.samples();
        buf.truncate(info.buffer_size());
        let data = match src_c {
            3 => buf,
            4 => buf.chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
            1 => buf.iter().flat_map(|&g| [g, g, g]).collect(),
            2 => buf.chunks(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
            n => return Err(ingest(format!("unsupported channel count {n}"))),
        };
        Ok(Self { width: w, height: h, channels: 3, data })
    }

    pub fn write_png(&self, path: &Path) -> Result<(), DatasetError> {
        let file = std::fs::File::create(path).map_err(|e| DatasetError::io(path, e))?;
        let mut enc = png::Encoder::new(std::io::BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(match self.channels {
            1 => png::ColorType::Grayscale,
            _ => png::ColorType::Rgb,
        });
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc
            .write_header()
            .map_err(|e| DatasetError::io(path, std::io::Error::other(e)))?;
        w.write_image_data(&self.data)
            .map_err(|e| DatasetError::io(path, std::io::Error::other(e)))
    }
}

/// Linear map of 8-bit intensities onto [−1, 1], channels first.
pub fn from_u8(raw: &RawImage) -> Array3<f32> {
    Array3::from_shape_fn((raw.channels, raw.height, raw.width), |(c, y, x)| {
        raw.data[(y * raw.width + x) * raw.channels + c] as f32 / 127.5 - 1.0
    })
}

/// Inverse of [`from_u8`] with rounding; `channels` selects a sub-range start.
pub fn to_u8(pixels: &Array3<f32>, first_channel: usize) -> RawImage {
    let (h, w) = (pixels.shape()[1], pixels.shape()[2]);
    RawImage::from_fn(w, h, 3, |x, y, c| {
        ((pixels[[first_channel + c, y, x]].clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
    })
}

/// Bilinear resampling with pixel-center alignment and edge clamping.
fn resize_bilinear(src: &Array3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (c, h, w) = src.dim();
    if h == out_h && w == out_w {
        return src.clone();
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let coord = |o: usize, s: f64, n: usize| {
        let f = ((o as f64 + 0.5) * s - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = f.floor() as usize;
        (i0, (i0 + 1).min(n - 1), (f - i0 as f64) as f32)
    };
    let mut out = Array3::zeros((c, out_h, out_w));
    for oy in 0..out_h {
        let (y0, y1, fy) = coord(oy, sy, h);
        for ox in 0..out_w {
            let (x0, x1, fx) = coord(ox, sx, w);
            for ch in 0..c {
                let top = src[[ch, y0, x0]] * (1.0 - fx) + src[[ch, y0, x1]] * fx;
                let bot = src[[ch, y1, x0]] * (1.0 - fx) + src[[ch, y1, x1]] * fx;
                out[[ch, oy, ox]] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Raw 8-bit image → normalized 128×128 frame.
pub fn preprocess(raw: &RawImage) -> Result<Frame, DatasetError> {
    if raw.width < 8 || raw.height < 8 {
        return Err(DatasetError::TooSmall { width: raw.width, height: raw.height });
    }
    let px = resize_bilinear(&from_u8(raw), FRAME_SIZE, FRAME_SIZE);
    Ok(Frame::new(px, ""))
}

/// Brings a normalized frame to 128×128; identity on conforming frames.
pub fn conform(frame: &Frame) -> Frame {
    let mut out = frame.clone();
    out.pixels = resize_bilinear(&frame.pixels, FRAME_SIZE, FRAME_SIZE);
    out
}

/// Box-filter reduction to `size × size` (`size` must divide the input).
pub fn downsample(pixels: &Array3<f32>, size: usize) -> Array3<f32> {
    let (c, h, w) = pixels.dim();
    if h == size && w == size {
        return pixels.clone();
    }
    assert!(h % size == 0 && w % size == 0, "{h}x{w} not divisible by {size}");
    let (fy, fx) = (h / size, w / size);
    let norm = 1.0 / (fy * fx) as f32;
    Array3::from_shape_fn((c, size, size), |(ch, y, x)| {
        let mut acc = 0.0;
        for dy in 0..fy {
            for dx in 0..fx {
                acc += pixels[[ch, y * fy + dy, x * fx + dx]];
            }
        }
        acc * norm
    })
}
