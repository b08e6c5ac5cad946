//! 8-bit sRGB PNG reading and writing.

use std::fs::File;
use std::io::{BufReader, BufWriter, Cursor};
use std::path::Path;

use splatgrade::image::RgbImage;

use crate::GatewayError;

/// Encodes interleaved RGB bytes as a PNG.
pub fn encode_png(width: usize, height: usize, rgb8: &[u8]) -> Result<Vec<u8>, GatewayError> {
    let mut out = Vec::new();
    write_rgb8(&mut out, width, height, rgb8)?;
    Ok(out)
}

pub fn write_png(path: &Path, width: usize, height: usize, rgb8: &[u8]) -> Result<(), GatewayError> {
    let file = File::create(path).map_err(|e| GatewayError::io(path, e))?;
    write_rgb8(BufWriter::new(file), width, height, rgb8)
}

fn write_rgb8<W: std::io::Write>(w: W, width: usize, height: usize, rgb8: &[u8]) -> Result<(), GatewayError> {
    if rgb8.len() != width * height * 3 {
        return Err(GatewayError::Image(format!(
            "{} bytes for a {width}x{height} RGB image",
            rgb8.len()
        )));
    }
    let mut enc = png::Encoder::new(w, width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_source_srgb(png::SrgbRenderingIntent::Perceptual);
    let mut writer = enc.write_header().map_err(|e| GatewayError::Image(e.to_string()))?;
    writer.write_image_data(rgb8).map_err(|e| GatewayError::Image(e.to_string()))?;
    writer.finish().map_err(|e| GatewayError::Image(e.to_string()))
}

/// Decodes a PNG into `(width, height, rgb8)`. Grey, alpha and 16-bit inputs are
/// converted; alpha is dropped.
pub fn decode_png(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>), GatewayError> {
    read_rgb8(Cursor::new(bytes))
}

fn read_rgb8<R: std::io::BufRead + std::io::Seek>(r: R) -> Result<(usize, usize, Vec<u8>), GatewayError> {
    let mut dec = png::Decoder::new(r);
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| GatewayError::Image(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| GatewayError::Image(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let data = &buf[..info.buffer_size()];
    let rgb = match info.color_type {
        png::ColorType::Rgb => data.to_vec(),
        png::ColorType::Rgba => data.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => data.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => data.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        png::ColorType::Indexed => return Err(GatewayError::Image("palette PNG was not expanded".into())),
    };
    Ok((w, h, rgb))
}

pub fn read_png(path: &Path) -> Result<RgbImage, GatewayError> {
    let file = File::open(path).map_err(|e| GatewayError::io(path, e))?;
    let (w, h, rgb) = read_rgb8(BufReader::new(file))?;
    Ok(RgbImage::from_rgb8(w, h, &rgb))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip() {
        let rgb: Vec<u8> = (0..2 * 3 * 3).map(|i| (i * 13) as u8).collect();
        let bytes = encode_png(3, 2, &rgb).unwrap();
        assert_eq!(decode_png(&bytes).unwrap(), (3, 2, rgb));
    }

    #[test]
    fn size_mismatch_is_rejected() {
        assert!(matches!(encode_png(2, 2, &[0; 5]), Err(GatewayError::Image(_))));
    }
}
