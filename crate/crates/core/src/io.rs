//! PNG (8-bit) and PFM (32-bit float) image files. The output format is
//! chosen from the file extension.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{ImageBuffer, ScalarMap};

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default()
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn format_error(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Writes a color image as `.png` (clamped, 8-bit) or `.pfm` (float).
pub fn save_image(path: impl AsRef<Path>, image: &ImageBuffer) -> Result<()> {
    let path = path.as_ref();
    match extension(path).as_str() {
        "png" => {
            let bytes: Vec<u8> = image.pixels().iter().flat_map(|p| p.map(to_u8)).collect();
            write_png(path, image.width(), image.height(), png::ColorType::Rgb, &bytes)
        }
        "pfm" => {
            let values: Vec<f32> = image.pixels().iter().flat_map(|p| p.map(|v| v as f32)).collect();
            write_pfm(path, image.width(), image.height(), 3, &values)
        }
        other => Err(format_error(path, format!("unsupported image extension `{other}`"))),
    }
}

/// Writes a scalar map as `.pfm` (float) or `.png` (clamped 8-bit grayscale).
pub fn save_scalar(path: impl AsRef<Path>, map: &ScalarMap) -> Result<()> {
    let path = path.as_ref();
    match extension(path).as_str() {
        "png" => {
            let bytes: Vec<u8> = map.values().iter().map(|v| to_u8(*v)).collect();
            write_png(path, map.width(), map.height(), png::ColorType::Grayscale, &bytes)
        }
        "pfm" => {
            let values: Vec<f32> = map.values().iter().map(|v| *v as f32).collect();
            write_pfm(path, map.width(), map.height(), 1, &values)
        }
        other => Err(format_error(path, format!("unsupported map extension `{other}`"))),
    }
}

pub fn load_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    match extension(path).as_str() {
        "png" => read_png(path),
        "pfm" => {
            let (w, h, channels, values) = read_pfm(path)?;
            let pixels = match channels {
                3 => values
                    .chunks_exact(3)
                    .map(|c| [c[0] as f64, c[1] as f64, c[2] as f64])
                    .collect(),
                _ => values.iter().map(|v| [*v as f64; 3]).collect(),
            };
            ImageBuffer::from_pixels(w, h, pixels)
        }
        other => Err(format_error(path, format!("unsupported image extension `{other}`"))),
    }
}

pub fn load_scalar(path: impl AsRef<Path>) -> Result<ScalarMap> {
    let path = path.as_ref();
    let (w, h, channels, values) = read_pfm(path)?;
    if channels != 1 {
        return Err(format_error(path, "expected a single-channel PFM"));
    }
    ScalarMap::from_values(w, h, values.into_iter().map(f64::from).collect())
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    let w = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(w, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_source_srgb(png::SrgbRenderingIntent::Perceptual);
    let mut writer = enc.write_header()?;
    writer.write_image_data(bytes)?;
    writer.finish()?;
    Ok(())
}

fn read_png(path: &Path) -> Result<ImageBuffer> {
    let mut decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info()?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| format_error(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf)?;
    let channels = info.color_type.samples();
    let (w, h) = (info.width as usize, info.height as usize);
    let bytes = &buf[..info.buffer_size()];
    let mut pixels = Vec::with_capacity(w * h);
    for row in 0..h {
        let line = &bytes[row * info.line_size..];
        for col in 0..w {
            let px = &line[col * channels..col * channels + channels];
            let rgb = match channels {
                1 | 2 => [px[0]; 3],
                _ => [px[0], px[1], px[2]],
            };
            pixels.push(rgb.map(|v| v as f64 / 255.0));
        }
    }
    ImageBuffer::from_pixels(w, h, pixels)
}

/// PFM rows are stored bottom to top; `values` is top to bottom.
fn write_pfm(path: &Path, width: usize, height: usize, channels: usize, values: &[f32]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let tag = if channels == 3 { "PF" } else { "Pf" };
    write!(w, "{tag}\n{width} {height}\n-1.0\n")?;
    let stride = width * channels;
    for row in (0..height).rev() {
        for v in &values[row * stride..(row + 1) * stride] {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_token<R: BufRead>(r: &mut R, path: &Path) -> Result<String> {
    let mut tok = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            break;
        }
        if byte[0].is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(byte[0]);
    }
    String::from_utf8(tok).map_err(|_| format_error(path, "non-ascii header"))
}

fn read_pfm(path: &Path) -> Result<(usize, usize, usize, Vec<f32>)> {
    let mut r = BufReader::new(File::open(path)?);
    let channels = match read_token(&mut r, path)?.as_str() {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(format_error(path, format!("bad PFM magic `{other}`"))),
    };
    let parse_dim = |s: String| s.parse::<usize>().map_err(|_| format_error(path, "bad PFM size"));
    let width = parse_dim(read_token(&mut r, path)?)?;
    let height = parse_dim(read_token(&mut r, path)?)?;
    let scale: f32 = read_token(&mut r, path)?
        .parse()
        .map_err(|_| format_error(path, "bad PFM scale"))?;
    let little = scale < 0.0;
    let stride = width * channels;
    let mut raw = vec![0u8; stride * height * 4];
    r.read_exact(&mut raw)
        .map_err(|_| format_error(path, "truncated PFM data"))?;
    let mut values = vec![0f32; stride * height];
    for (file_row, chunk) in raw.chunks_exact(stride * 4).enumerate() {
        let row = height - 1 - file_row;
        for (i, b) in chunk.chunks_exact(4).enumerate() {
            let b = [b[0], b[1], b[2], b[3]];
            values[row * stride + i] = if little {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            };
        }
    }
    Ok((width, height, channels, values))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_preserves_orientation_and_values() {
        let dir = tempfile::tempdir().unwrap();
        let map = ScalarMap::from_values(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.5, -6.25]).unwrap();
        let p = dir.path().join("d.pfm");
        save_scalar(&p, &map).unwrap();
        assert_eq!(load_scalar(&p).unwrap(), map);
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"Pf\n3 2\n-1.0\n"));
        // first stored row is the bottom image row
        assert_eq!(&bytes[12..16], &4.0f32.to_le_bytes());

        let img = ImageBuffer::from_pixels(2, 1, vec![[0.1, 0.2, 0.3], [1.5, -1.0, 0.0]]).unwrap();
        let p = dir.path().join("c.pfm");
        save_image(&p, &img).unwrap();
        let back = load_image(&p).unwrap();
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            for c in 0..3 {
                assert_eq!(a[c] as f32, b[c] as f32);
            }
        }
    }

    #[test]
    fn png_round_trip_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageBuffer::from_pixels(2, 2, vec![[0.0, 0.5, 1.0], [2.0, -1.0, 0.25], [1.0; 3], [0.0; 3]]).unwrap();
        let p = dir.path().join("x.png");
        save_image(&p, &img).unwrap();
        let back = load_image(&p).unwrap();
        assert_eq!(back.get(0, 0), [0.0, 128.0 / 255.0, 1.0]);
        assert_eq!(back.get(0, 1), [1.0, 0.0, 64.0 / 255.0]);
        assert!(save_image(dir.path().join("x.bmp"), &img).is_err());
    }
}
