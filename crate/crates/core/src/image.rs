//! Image buffers, scalar fields and normalized pixel coordinates.
//!
//! Intensities are stored as `f64` in `[0, 1]`. Files are read and written as
//! 8-bit PNG, binary PPM (P6) and binary PGM (P5).

use std::fs;
use std::io::{BufReader, BufWriter, Cursor, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major image with 1 or 3 interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::arg(format!(
                "channels must be 1 or 3, got {channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::arg(format!(
                "data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::arg(format!("intensity {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, color: &[f64]) -> Result<Self> {
        let data = color
            .iter()
            .copied()
            .cycle()
            .take(height * width * color.len())
            .collect();
        Self::new(height, width, color.len(), data)
    }

    /// Builds an RGB image from a per-pixel function of `(row, col)`.
    /// Values are clamped into `[0, 1]`.
    pub fn from_fn_rgb(height: usize, width: usize, f: impl Fn(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for r in 0..height {
            for c in 0..width {
                data.extend(f(r, c).iter().map(|v| v.clamp(0.0, 1.0)));
            }
        }
        Self {
            height,
            width,
            channels: 3,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.data[index * self.channels..(index + 1) * self.channels]
    }

    /// Pixel as RGB; grayscale values are replicated.
    pub fn rgb(&self, index: usize) -> [f64; 3] {
        let p = self.pixel(index);
        if self.channels == 3 {
            [p[0], p[1], p[2]]
        } else {
            [p[0]; 3]
        }
    }

    /// Returns a 3-channel copy (grayscale replicated).
    pub fn to_rgb(&self) -> ImageBuffer {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        ImageBuffer {
            height: self.height,
            width: self.width,
            channels: 3,
            data,
        }
    }

    pub fn same_shape(&self, other: &ImageBuffer) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    fn from_bytes(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Self {
        Self {
            height,
            width,
            channels,
            data: bytes.iter().map(|&b| f64::from(b) / 255.0).collect(),
        }
    }
}

/// Row-major real-valued field without range restrictions.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ScalarField {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::arg(format!(
                "field length {} does not match {height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    /// Edge-clamped access with signed coordinates.
    #[inline]
    pub fn get_clamped(&self, row: isize, col: isize) -> f64 {
        let r = row.clamp(0, self.height as isize - 1) as usize;
        let c = col.clamp(0, self.width as isize - 1) as usize;
        self.data[r * self.width + c]
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ScalarField {
        ScalarField {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Normalized `(x, y)` coordinate per pixel, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordGrid {
    pub height: usize,
    pub width: usize,
    pub coords: Vec<[f64; 2]>,
}

/// Maps pixel `(row, col)` to `(x, y)` with `x = -1 + 2 col / (w - 1)` and
/// `y = -1 + 2 row / (h - 1)`.
pub fn pixel_grid(height: usize, width: usize) -> Result<CoordGrid> {
    if height < 2 || width < 2 {
        return Err(Error::arg(format!(
            "pixel grid needs at least 2x2, got {height}x{width}"
        )));
    }
    let axis = |i: usize, n: usize| -1.0 + 2.0 * i as f64 / (n - 1) as f64;
    let mut coords = Vec::with_capacity(height * width);
    for r in 0..height {
        for c in 0..width {
            coords.push([axis(c, width), axis(r, height)]);
        }
    }
    Ok(CoordGrid {
        height,
        width,
        coords,
    })
}

pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

pub fn to_luma(img: &ImageBuffer) -> ScalarField {
    let data = if img.channels == 1 {
        img.data.clone()
    } else {
        img.data
            .chunks_exact(3)
            .map(|p| LUMA_WEIGHTS[0] * p[0] + LUMA_WEIGHTS[1] * p[1] + LUMA_WEIGHTS[2] * p[2])
            .collect()
    };
    ScalarField {
        height: img.height,
        width: img.width,
        data,
    }
}

#[inline]
fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads an 8-bit PNG (gray, gray+alpha, RGB, RGBA; alpha dropped) or a
/// binary PPM/PGM.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes)
}

pub fn decode_image(bytes: &[u8]) -> Result<ImageBuffer> {
    if bytes.starts_with(b"\x89PNG") {
        decode_png(bytes)
    } else if bytes.starts_with(b"P6") || bytes.starts_with(b"P5") {
        decode_pnm(bytes)
    } else {
        Err(Error::Format("unrecognized image signature".into()))
    }
}

fn decode_png(bytes: &[u8]) -> Result<ImageBuffer> {
    let decoder = png::Decoder::new(BufReader::new(Cursor::new(bytes)));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Format(format!("png: {e}")))?;
    let info = reader.info();
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Format(format!(
            "png bit depth {:?} not supported, only 8-bit",
            info.bit_depth
        )));
    }
    let color = info.color_type;
    let (height, width) = (info.height as usize, info.width as usize);
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(format!("png: {e}")))?;
    let raw = &buf[..frame.buffer_size()];
    let (channels, keep): (usize, Vec<u8>) = match color {
        png::ColorType::Grayscale => (1, raw.to_vec()),
        png::ColorType::GrayscaleAlpha => (1, raw.chunks_exact(2).map(|p| p[0]).collect()),
        png::ColorType::Rgb => (3, raw.to_vec()),
        png::ColorType::Rgba => (
            3,
            raw.chunks_exact(4)
                .flat_map(|p| [p[0], p[1], p[2]])
                .collect(),
        ),
        png::ColorType::Indexed => {
            return Err(Error::Format("indexed png not supported".into()));
        }
    };
    if keep.len() != height * width * channels {
        return Err(Error::Format("png: truncated pixel data".into()));
    }
    Ok(ImageBuffer::from_bytes(height, width, channels, &keep))
}

fn decode_pnm(bytes: &[u8]) -> Result<ImageBuffer> {
    let channels = if bytes[1] == b'6' { 3 } else { 1 };
    // Header: magic, width, height, maxval, each separated by whitespace,
    // with '#' comments allowed; exactly one whitespace byte before pixels.
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::Format("pnm: truncated header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("pnm: bad header field".into()))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Format(format!(
            "pnm maxval {maxval} not supported, only 255"
        )));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Format("pnm: missing header terminator".into()));
    }
    pos += 1;
    let n = width * height * channels;
    let pixels = bytes
        .get(pos..pos + n)
        .ok_or_else(|| Error::Format("pnm: truncated pixel data".into()))?;
    Ok(ImageBuffer::from_bytes(height, width, channels, pixels))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_pnm(img: &ImageBuffer) -> Vec<u8> {
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.to_bytes());
    out
}

/// Writes P6 for RGB images and P5 for grayscale ones.
pub fn save_pnm(img: &ImageBuffer, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_pnm(img))
}

pub fn encode_png(img: &ImageBuffer) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(
            BufWriter::new(&mut out),
            img.width as u32,
            img.height as u32,
        );
        encoder.set_color(if img.channels == 3 {
            png::ColorType::Rgb
        } else {
            png::ColorType::Grayscale
        });
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder
            .write_header()
            .map_err(|e| Error::Format(format!("png: {e}")))?;
        writer
            .write_image_data(&img.to_bytes())
            .map_err(|e| Error::Format(format!("png: {e}")))?;
        writer
            .finish()
            .map_err(|e| Error::Format(format!("png: {e}")))?;
    }
    Ok(out)
}

pub fn save_png(img: &ImageBuffer, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_png(img)?)
}

/// Dumps a scalar field as PGM, linearly mapping `[lo, hi]` onto `[0, 255]`.
pub fn save_field_pgm(field: &ScalarField, lo: f64, hi: f64, path: impl AsRef<Path>) -> Result<()> {
    let span = if hi > lo { hi - lo } else { 1.0 };
    let data = field
        .data
        .iter()
        .map(|&v| ((v - lo) / span).clamp(0.0, 1.0))
        .collect();
    let img = ImageBuffer::new(field.height, field.width, 1, data)?;
    save_pnm(&img, path)
}

/// Writes an arbitrary byte buffer, creating parent directories.
pub fn write_bytes(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    write_file(path.as_ref(), bytes)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(text.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}
