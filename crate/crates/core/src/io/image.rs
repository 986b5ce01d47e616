//! 8-bit RGB image files: binary PPM (P6) and PNG.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{read_file, write_atomic};
use crate::metrics::ImageU8;

pub fn decode_ppm(bytes: &[u8]) -> Result<ImageU8> {
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
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PPM header".into()));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).unwrap_or("").to_string());
    }
    if fields[0] != "P6" {
        return Err(Error::Format(format!("unsupported PPM type `{}`; expected P6", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PPM header field `{s}`")));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(Error::Format(format!("PPM maxval {maxval}; only 8-bit (255) is supported")));
    }
    // exactly one whitespace byte separates the header from the raster
    let data = bytes.get(pos + 1..).unwrap_or(&[]);
    if data.len() != w * h * 3 {
        return Err(Error::Format(format!("PPM raster has {} bytes, {w}x{h} needs {}", data.len(), w * h * 3)));
    }
    ImageU8::new(w, h, data.to_vec()).map_err(|e| Error::Format(e.to_string()))
}

pub fn encode_ppm(img: &ImageU8) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.data());
    out
}

fn png_error(e: impl std::fmt::Display) -> Error {
    Error::Format(format!("PNG: {e}"))
}

fn decode_png(path: &Path) -> Result<ImageU8> {
    let mut decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(png_error)?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| png_error("image too large"))?];
    let info = reader.next_frame(&mut buf).map_err(png_error)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let px = &buf[..info.buffer_size()];
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(png_error("unexpanded palette image")),
    };
    let rgb = px
        .chunks_exact(channels)
        .flat_map(|p| if channels < 3 { [p[0]; 3] } else { [p[0], p[1], p[2]] })
        .collect();
    ImageU8::new(w, h, rgb)
}

fn encode_png(img: &ImageU8) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(BufWriter::new(&mut out), img.width() as u32, img.height() as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(png_error)?;
        writer.write_image_data(img.data()).map_err(png_error)?;
    }
    Ok(out)
}

fn is_png(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// Reads a `.png` file, or a binary PPM otherwise.
pub fn read_image(path: &Path) -> Result<ImageU8> {
    if is_png(path) {
        decode_png(path)
    } else {
        decode_ppm(&read_file(path)?)
    }
    .map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        e => e,
    })
}

/// Writes PNG for a `.png` extension, binary PPM otherwise.
pub fn write_image(path: &Path, img: &ImageU8) -> Result<()> {
    let bytes = if is_png(path) { encode_png(img)? } else { encode_ppm(img) };
    write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_with_comment() {
        let img = ImageU8::from_fn(3, 2, |y, x, c| (y * 50 + x * 10 + c) as u8);
        let mut bytes = b"P6\n# comment\n3 2\n255\n".to_vec();
        bytes.extend_from_slice(img.data());
        assert_eq!(decode_ppm(&bytes).unwrap(), img);
        assert_eq!(decode_ppm(&encode_ppm(&img)).unwrap(), img);
    }

    #[test]
    fn ppm_rejects_bad_headers() {
        assert!(decode_ppm(b"P3\n1 1\n255\n000").is_err());
        assert!(decode_ppm(b"P6\n1 1\n65535\n000000").is_err());
        assert!(decode_ppm(b"P6\n2 2\n255\n000").is_err());
        assert!(decode_ppm(b"P6\n2").is_err());
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = ImageU8::from_fn(5, 4, |y, x, c| (y * 60 + x * 7 + c * 90) as u8);
        write_image(&path, &img).unwrap();
        assert_eq!(read_image(&path).unwrap(), img);
    }
}
