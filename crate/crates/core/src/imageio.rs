//! 8-bit PNG encode/decode for single images and sample grids.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: corrupt or unsupported PNG ({reason})")]
    Decode { path: String, reason: String },
    #[error("{path}: cannot encode PNG ({reason})")]
    Encode { path: String, reason: String },
}

/// Decoded image in channel-major (CHW) order with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct PlanarImage {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

pub fn read_png(path: &Path) -> Result<PlanarImage, ImageError> {
    let shown = path.display().to_string();
    let decode_err = |e: png::DecodingError| ImageError::Decode {
        path: shown.clone(),
        reason: e.to_string(),
    };
    let file = File::open(path).map_err(|source| ImageError::Io {
        path: shown.clone(),
        source,
    })?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(decode_err)?;
    let size = reader.output_buffer_size().ok_or_else(|| ImageError::Decode {
        path: shown.clone(),
        reason: "image too large".into(),
    })?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(decode_err)?;
    let (stride, channels) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => {
            return Err(ImageError::Decode {
                path: shown,
                reason: "indexed color after expansion".into(),
            })
        }
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let mut data = vec![0f32; channels * h * w];
    for y in 0..h {
        let row = &buf[y * info.line_size..y * info.line_size + w * stride];
        for x in 0..w {
            for c in 0..channels {
                data[(c * h + y) * w + x] = f32::from(row[x * stride + c]) / 255.0;
            }
        }
    }
    Ok(PlanarImage {
        channels,
        height: h,
        width: w,
        data,
    })
}

/// Writes a CHW image with 1 or 3 channels; values are clamped to [0, 1].
pub fn write_png(path: &Path, img: &PlanarImage) -> Result<(), ImageError> {
    let shown = path.display().to_string();
    let encode_err = |e: png::EncodingError| ImageError::Encode {
        path: shown.clone(),
        reason: e.to_string(),
    };
    let (c, h, w) = (img.channels, img.height, img.width);
    let color = match c {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        _ => {
            return Err(ImageError::Encode {
                path: shown,
                reason: format!("{c} channels"),
            })
        }
    };
    let mut bytes = vec![0u8; c * h * w];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = img.data[(ch * h + y) * w + x].clamp(0.0, 1.0);
                bytes[(y * w + x) * c + ch] = (v * 255.0).round() as u8;
            }
        }
    }
    let file = File::create(path).map_err(|source| ImageError::Io {
        path: shown.clone(),
        source,
    })?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(encode_err)?;
    writer.write_image_data(&bytes).map_err(encode_err)?;
    writer.finish().map_err(encode_err)
}

/// Tiles `n` CHW images of equal size into a grid `cols` wide with a
/// one-pixel gap.
pub fn tile_grid(images: &[f32], n: usize, channels: usize, h: usize, w: usize, cols: usize) -> PlanarImage {
    let cols = cols.max(1).min(n.max(1));
    let rows = n.div_ceil(cols).max(1);
    let gh = rows * (h + 1) + 1;
    let gw = cols * (w + 1) + 1;
    let mut data = vec![1f32; channels * gh * gw];
    for i in 0..n {
        let (r, col) = (i / cols, i % cols);
        for c in 0..channels {
            for y in 0..h {
                for x in 0..w {
                    let src = images[((i * channels + c) * h + y) * w + x];
                    let gy = r * (h + 1) + 1 + y;
                    let gx = col * (w + 1) + 1 + x;
                    data[(c * gh + gy) * gw + gx] = src;
                }
            }
        }
    }
    PlanarImage {
        channels,
        height: gh,
        width: gw,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_on_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let data: Vec<f32> = (0..3 * 4 * 5).map(|i| ((i * 17) % 256) as f32 / 255.0).collect();
        let img = PlanarImage {
            channels: 3,
            height: 4,
            width: 5,
            data,
        };
        write_png(&path, &img).unwrap();
        assert_eq!(read_png(&path).unwrap(), img);
    }

    #[test]
    fn corrupt_png_names_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.png");
        std::fs::write(&path, b"not a png").unwrap();
        let err = read_png(&path).unwrap_err().to_string();
        assert!(err.contains("bad.png"), "{err}");
    }

    #[test]
    fn grid_dimensions() {
        let g = tile_grid(&vec![0.5; 5 * 3 * 2 * 2], 5, 3, 2, 2, 3);
        assert_eq!((g.height, g.width), (2 * 3 + 1, 3 * 3 + 1));
    }
}
