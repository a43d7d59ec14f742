//! Float images in `[0, 1]`, interleaved row-major (`H × W × C`), and their
//! PGM / PPM / PNG encodings.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || !(channels == 1 || channels == 3) {
            return Err(Error::invalid(format!("bad image geometry {width}×{height}×{channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::shape(
                "image",
                format!("{} values for {width}×{height}×{channels}", data.len()),
            ));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: f32) {
        self.data[(row * self.width + col) * self.channels + ch] = v;
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// Rows `[top, top + height)`, columns `[left, left + width)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if height == 0 || width == 0 || top + height > self.height || left + width > self.width {
            return Err(Error::invalid(format!(
                "crop {height}×{width} at ({top}, {left}) outside {}×{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(width * height * self.channels);
        for r in top..top + height {
            let start = (r * self.width + left) * self.channels;
            data.extend_from_slice(&self.data[start..start + width * self.channels]);
        }
        Image::new(width, height, self.channels, data)
    }

    /// Bilinear resampling with pixel-centre alignment.
    pub fn resize(&self, width: usize, height: usize) -> Image {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let mut out = Image::filled(width, height, self.channels, 0.0);
        let sy = self.height as f32 / height as f32;
        let sx = self.width as f32 / width as f32;
        for r in 0..height {
            let fy = ((r as f32 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f32);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f32;
            for c in 0..width {
                let fx = ((c as f32 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f32);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f32;
                for ch in 0..self.channels {
                    let top = self.get(y0, x0, ch) * (1.0 - wx) + self.get(y0, x1, ch) * wx;
                    let bottom = self.get(y1, x0, ch) * (1.0 - wx) + self.get(y1, x1, ch) * wx;
                    out.set(r, c, ch, top * (1.0 - wy) + bottom * wy);
                }
            }
        }
        out
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for r in 0..self.height {
            for c in 0..self.width {
                for ch in 0..self.channels {
                    out.set(r, c, ch, self.get(r, self.width - 1 - c, ch));
                }
            }
        }
        out
    }

    /// Planar `C × H × W` copy.
    pub fn to_planar(&self) -> Vec<f32> {
        let mut out = vec![0.0; self.data.len()];
        let plane = self.width * self.height;
        for (i, px) in self.data.chunks(self.channels).enumerate() {
            for (ch, &v) in px.iter().enumerate() {
                out[ch * plane + i] = v;
            }
        }
        out
    }

    pub fn from_planar(width: usize, height: usize, channels: usize, planar: &[f32]) -> Result<Image> {
        let plane = width * height;
        if planar.len() != plane * channels {
            return Err(Error::shape("image", "planar buffer size mismatch"));
        }
        let mut data = vec![0.0; planar.len()];
        for ch in 0..channels {
            for i in 0..plane {
                data[i * channels + ch] = planar[ch * plane + i];
            }
        }
        Image::new(width, height, channels, data)
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    fn from_bytes(width: usize, height: usize, channels: usize, bytes: &[u8]) -> Result<Image> {
        Image::new(width, height, channels, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_netpbm<W: Write>(img: &Image, magic: &str, mut w: W) -> Result<()> {
    write!(w, "{magic}\n{} {}\n255\n", img.width, img.height)?;
    w.write_all(&img.to_bytes())?;
    w.flush()?;
    Ok(())
}

/// Binary PGM (P5) for one channel, PPM (P6) for three.
pub fn write_pnm_to<W: Write>(img: &Image, w: W) -> Result<()> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    write_netpbm(img, magic, w)
}

fn header_token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut token = String::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            return Err(Error::format("pnm", "truncated header"));
        }
        match byte[0] {
            b'#' if token.is_empty() => {
                let mut skip = Vec::new();
                r.read_until(b'\n', &mut skip)?;
            }
            b if b.is_ascii_whitespace() => {
                if !token.is_empty() {
                    return Ok(token);
                }
            }
            b => token.push(b as char),
        }
    }
}

pub fn read_pnm_from<R: Read>(r: R) -> Result<Image> {
    let mut r = BufReader::new(r);
    let magic = header_token(&mut r)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(Error::format("pnm", format!("unsupported magic {other:?}"))),
    };
    let mut num = |what: &str| -> Result<usize> {
        header_token(&mut r)?
            .parse()
            .map_err(|_| Error::format("pnm", format!("bad {what}")))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if maxval != 255 {
        return Err(Error::format("pnm", format!("only 8-bit files are supported, maxval {maxval}")));
    }
    let mut bytes = vec![0u8; width * height * channels];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::format("pnm", format!("truncated pixel data: {e}")))?;
    Image::from_bytes(width, height, channels, &bytes)
}

pub fn write_png(img: &Image, path: &Path) -> Result<()> {
    let color = if img.channels == 1 {
        image::ExtendedColorType::L8
    } else {
        image::ExtendedColorType::Rgb8
    };
    image::save_buffer(path, &img.to_bytes(), img.width as u32, img.height as u32, color)
        .map_err(|e| Error::format("png", e.to_string()))
}

pub fn read_png(path: &Path) -> Result<Image> {
    let decoded = image::open(path).map_err(|e| Error::format("png", e.to_string()))?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    match decoded.color().channel_count() {
        1 | 2 => Image::from_bytes(w, h, 1, decoded.to_luma8().as_raw()),
        _ => Image::from_bytes(w, h, 3, decoded.to_rgb8().as_raw()),
    }
}

/// Picks the codec from the extension: `.png`, otherwise PGM/PPM.
pub fn read_image(path: &Path) -> Result<Image> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("png") => read_png(path),
        _ => read_pnm_from(std::fs::File::open(path)?),
    }
}

pub fn write_image(img: &Image, path: &Path) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("png") => write_png(img, path),
        _ => write_pnm_to(img, std::io::BufWriter::new(std::fs::File::create(path)?)),
    }
}

/// Grayscale heatmap of a row-major matrix, min/max normalised. Returns the
/// image and the `(min, max)` used; a constant matrix maps to mid-grey.
pub fn heatmap(values: &[f32], rows: usize, cols: usize) -> Result<(Image, f32, f32)> {
    if values.len() != rows * cols || rows == 0 || cols == 0 {
        return Err(Error::shape("heatmap", format!("{} values for {rows}×{cols}", values.len())));
    }
    let lo = values.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = values.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::NonFinite { op: "heatmap" });
    }
    let data = values
        .iter()
        .map(|&v| if hi > lo { (v - lo) / (hi - lo) } else { 0.5 })
        .collect();
    Ok((Image::new(cols, rows, 1, data)?, lo, hi))
}
