//! PNG and binary PGM/PPM codecs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read};
use std::path::Path;

use super::ImageBuffer;
use crate::error::{Error, Result};

/// Decodes a PNG, PGM (`P5`) or PPM (`P6`) file into `[0, 1]` floats.
///
/// Alpha channels are dropped; palette images are expanded to RGB.
pub fn read_image(path: &Path) -> Result<ImageBuffer> {
    match extension(path).as_deref() {
        Some("png") => read_png(path),
        Some("pgm" | "ppm" | "pnm") => {
            let mut bytes = Vec::new();
            File::open(path)
                .and_then(|mut f| f.read_to_end(&mut bytes))
                .map_err(|e| Error::io(path, e))?;
            decode_pnm(&bytes).map_err(|msg| Error::decode(path, msg))
        }
        other => Err(Error::decode(
            path,
            format!("unknown image extension {:?}", other.unwrap_or("")),
        )),
    }
}

/// Writes 8-bit output; values are clamped to `[0, 1]` first.
pub fn write_image(path: &Path, img: &ImageBuffer) -> Result<()> {
    let channels = img.channels();
    if channels != 1 && channels != 3 {
        return Err(Error::InvalidArgument(format!(
            "{}: only 1- or 3-channel images can be written, got {channels}",
            path.display()
        )));
    }
    let bytes: Vec<u8> = img.pixels().iter().map(|&v| quantize(v)).collect();
    match extension(path).as_deref() {
        Some("png") => write_png(path, img, &bytes),
        Some(ext @ ("pgm" | "ppm" | "pnm")) => {
            let magic = if channels == 1 { "P5" } else { "P6" };
            if (ext == "pgm" && channels != 1) || (ext == "ppm" && channels != 3) {
                return Err(Error::InvalidArgument(format!(
                    "{}: .{ext} cannot hold a {channels}-channel image",
                    path.display()
                )));
            }
            let mut out = format!("{magic}\n{} {}\n255\n", img.width(), img.height()).into_bytes();
            out.extend_from_slice(&bytes);
            std::fs::write(path, out).map_err(|e| Error::io(path, e))
        }
        other => Err(Error::decode(
            path,
            format!("unknown image extension {:?}", other.unwrap_or("")),
        )),
    }
}

fn extension(path: &Path) -> Option<String> {
    path.extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn read_png(path: &Path) -> Result<ImageBuffer> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::decode(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::decode(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::decode(path, e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let src_channels = info.color_type.samples();
    let keep = match info.color_type {
        png::ColorType::Grayscale | png::ColorType::GrayscaleAlpha => 1,
        _ => 3,
    };
    let wide = info.bit_depth == png::BitDepth::Sixteen;
    let scale = if wide { 65535.0 } else { 255.0 };
    let mut pixels = Vec::with_capacity(w * h * keep);
    for row in buf.chunks(info.line_size).take(h) {
        for x in 0..w {
            for c in 0..keep {
                let s = x * src_channels + c;
                let raw = if wide {
                    u16::from_be_bytes([row[2 * s], row[2 * s + 1]]) as f32
                } else {
                    row[s] as f32
                };
                pixels.push(raw / scale);
            }
        }
    }
    ImageBuffer::new(h, w, keep, pixels)
}

fn write_png(path: &Path, img: &ImageBuffer, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), img.width() as u32, img.height() as u32);
    encoder.set_color(if img.channels() == 1 {
        png::ColorType::Grayscale
    } else {
        png::ColorType::Rgb
    });
    encoder.set_depth(png::BitDepth::Eight);
    let to_err = |e: png::EncodingError| Error::decode(path, e.to_string());
    let mut writer = encoder.write_header().map_err(to_err)?;
    writer.write_image_data(bytes).map_err(to_err)?;
    writer.finish().map_err(to_err)?;
    Ok(())
}

/// Parses a binary netpbm header and raster (`P5` gray, `P6` RGB).
fn decode_pnm(bytes: &[u8]) -> std::result::Result<ImageBuffer, String> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err("truncated netpbm header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let channels = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(format!("unsupported netpbm variant {m} (binary P5/P6 only)")),
    };
    let parse = |s: &str, what: &str| {
        s.parse::<usize>()
            .map_err(|_| format!("bad netpbm {what}: {s}"))
    };
    let (w, h, maxval) = (parse(&fields[1], "width")?, parse(&fields[2], "height")?, parse(&fields[3], "maxval")?);
    if maxval == 0 || maxval > 65535 {
        return Err(format!("netpbm maxval {maxval} out of range"));
    }
    let width_bytes = if maxval > 255 { 2 } else { 1 };
    let need = w * h * channels * width_bytes;
    let raster = bytes.get(pos..pos + need).ok_or("truncated netpbm raster")?;
    let scale = maxval as f32;
    let pixels = if width_bytes == 1 {
        raster.iter().map(|&b| b as f32 / scale).collect()
    } else {
        raster
            .chunks_exact(2)
            .map(|p| u16::from_be_bytes([p[0], p[1]]) as f32 / scale)
            .collect()
    };
    ImageBuffer::new(h, w, channels, pixels).map_err(|e| e.to_string())
}
