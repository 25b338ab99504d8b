//! Netpbm (P2/P3/P5/P6) and PNG reading and writing. Images are
//! `C x H x W` tensors with values in `[0, 1]`.

use std::fs;
use std::io::{BufReader, BufWriter, Cursor};
use std::path::{Path, PathBuf};

use rim_core::metrics::quantize_value;
use rim_core::Tensor;

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Pgm,
    Ppm,
    Png,
}

impl Format {
    pub fn from_path(path: &Path) -> Option<Format> {
        let ext = path.extension()?.to_str()?.to_ascii_lowercase();
        match ext.as_str() {
            "pgm" => Some(Format::Pgm),
            "ppm" => Some(Format::Ppm),
            "pnm" => Some(Format::Ppm),
            "png" => Some(Format::Png),
            _ => None,
        }
    }

    /// Netpbm flavour matching the channel count; PNG stays PNG.
    pub fn for_channels(self, channels: usize) -> Format {
        match self {
            Format::Png => Format::Png,
            _ if channels == 1 => Format::Pgm,
            _ => Format::Ppm,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            Format::Pgm => "pgm",
            Format::Ppm => "ppm",
            Format::Png => "png",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    /// File name without extension.
    pub name: String,
    pub format: Format,
    pub data: Tensor<f32>,
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self) -> Result<u32, String> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("expected a number at byte {start}"))
    }
}

/// Decodes any of P2, P3, P5 and P6 with maxval up to 65535.
pub fn decode_pnm(bytes: &[u8]) -> Result<Tensor<f32>, String> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err("not a netpbm file".into());
    }
    let (channels, binary) = match bytes[1] {
        b'2' => (1, false),
        b'3' => (3, false),
        b'5' => (1, true),
        b'6' => (3, true),
        m => return Err(format!("unsupported netpbm type P{}", m as char)),
    };
    let mut h = Header { bytes, pos: 2 };
    let width = h.number()? as usize;
    let height = h.number()? as usize;
    let maxval = h.number()?;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(format!("bad header: {width}x{height}, maxval {maxval}"));
    }
    let n = width * height * channels;
    let scale = maxval as f32;
    let mut samples = Vec::with_capacity(n);
    if binary {
        // exactly one whitespace byte separates the header from the raster
        let start = h.pos + 1;
        let wide = maxval > 255;
        let need = n * if wide { 2 } else { 1 };
        let raster = bytes.get(start..start + need).ok_or("truncated raster")?;
        if wide {
            samples.extend(raster.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as u32));
        } else {
            samples.extend(raster.iter().map(|&b| b as u32));
        }
    } else {
        for _ in 0..n {
            samples.push(h.number()?);
        }
    }
    if samples.iter().any(|&v| v > maxval) {
        return Err("sample exceeds maxval".into());
    }
    // interleaved to planar
    let plane = width * height;
    let mut data = vec![0.0f32; n];
    for (i, &v) in samples.iter().enumerate() {
        data[(i % channels) * plane + i / channels] = v as f32 / scale;
    }
    Tensor::new([channels, height, width], data).map_err(|e| e.to_string())
}

fn interleaved_bytes(image: &Tensor<f32>) -> Result<(usize, usize, usize, Vec<u8>), String> {
    let s = image.shape();
    if s.len() != 3 || !(s[0] == 1 || s[0] == 3) {
        return Err(format!("expected a 1 or 3 channel image, got shape {s:?}"));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let plane = h * w;
    let bytes = (0..plane * c)
        .map(|i| (quantize_value(image.data()[(i % c) * plane + i / c] as f64) * 255.0).round() as u8)
        .collect();
    Ok((c, h, w, bytes))
}

/// Binary P5 (one channel) or P6 (three channels), 8 bits per sample.
pub fn encode_pnm(image: &Tensor<f32>) -> Result<Vec<u8>, String> {
    let (c, h, w, raster) = interleaved_bytes(image)?;
    let mut out = format!("P{}\n{w} {h}\n255\n", if c == 1 { 5 } else { 6 }).into_bytes();
    out.extend(raster);
    Ok(out)
}

pub fn decode_png(bytes: &[u8]) -> Result<Tensor<f32>, String> {
    let mut decoder = png::Decoder::new(BufReader::new(Cursor::new(bytes)));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| e.to_string())?;
    let size = reader.output_buffer_size().ok_or("image too large")?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    let (w, h) = (info.width as usize, info.height as usize);
    let (stored, keep) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => return Err("palette image was not expanded".into()),
    };
    let wide = info.bit_depth == png::BitDepth::Sixteen;
    let sample = |i: usize| -> f32 {
        if wide {
            u16::from_be_bytes([buf[2 * i], buf[2 * i + 1]]) as f32 / 65535.0
        } else {
            buf[i] as f32 / 255.0
        }
    };
    let plane = w * h;
    let mut data = vec![0.0f32; keep * plane];
    for y in 0..h {
        for x in 0..w {
            let px = y * w + x;
            // rows may be padded; index through the line size
            let base = y * info.line_size / if wide { 2 } else { 1 } + x * stored;
            for c in 0..keep {
                data[c * plane + px] = sample(base + c);
            }
        }
    }
    Tensor::new([keep, h, w], data).map_err(|e| e.to_string())
}

pub fn encode_png(image: &Tensor<f32>) -> Result<Vec<u8>, String> {
    let (c, h, w, raster) = interleaved_bytes(image)?;
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(BufWriter::new(&mut out), w as u32, h as u32);
        enc.set_color(if c == 1 { png::ColorType::Grayscale } else { png::ColorType::Rgb });
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| e.to_string())?;
        writer.write_image_data(&raster).map_err(|e| e.to_string())?;
        writer.finish().map_err(|e| e.to_string())?;
    }
    Ok(out)
}

pub fn load_image(path: &Path) -> CliResult<Image> {
    let format = Format::from_path(path).ok_or_else(|| CliError::data(path, "unsupported image extension"))?;
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::MissingData(path.to_path_buf()),
        _ => CliError::io(path, e),
    })?;
    let data = match format {
        Format::Png => decode_png(&bytes),
        _ => decode_pnm(&bytes),
    }
    .map_err(|m| CliError::data(path, m))?;
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
    let format = format.for_channels(data.shape()[0]);
    Ok(Image { name, format, data })
}

/// Every netpbm and PNG file in `dir`, ordered by file name. Other files are
/// ignored; an undecodable image or an empty directory is an error.
pub fn load_images(dir: &Path) -> CliResult<Vec<Image>> {
    if !dir.is_dir() {
        return Err(CliError::MissingData(dir.to_path_buf()));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && Format::from_path(p).is_some())
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::data(dir, "no PGM, PPM or PNG images found"));
    }
    paths.iter().map(|p| load_image(p)).collect()
}

/// Writes `image` quantized to 8 bits in the format implied by the
/// extension of `path`.
pub fn save_image(path: &Path, image: &Tensor<f32>) -> CliResult<()> {
    let format =
        Format::from_path(path).ok_or_else(|| CliError::Usage(format!("unsupported output {}", path.display())))?;
    let bytes = match format {
        Format::Png => encode_png(image),
        _ => encode_pnm(image),
    }
    .map_err(CliError::Usage)?;
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}
