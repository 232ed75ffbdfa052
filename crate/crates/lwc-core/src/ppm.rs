//! Binary PPM (P6) raster I/O, the codec's required interchange format.

use std::io::Write;
use std::path::Path;

use crate::{Error, Result};

/// 8-bit RGB raster, rows top to bottom, `rgb.len() == 3 * w * h`.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Image {
    pub w: usize,
    pub h: usize,
    pub rgb: Vec<u8>,
}

impl Image {
    pub fn new(w: usize, h: usize, rgb: Vec<u8>) -> Self {
        assert_eq!(rgb.len(), 3 * w * h);
        Image { w, h, rgb }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.w + x);
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }
}

pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let header = format!("P6\n{} {}\n255\n", img.w, img.h);
    f.write_all(header.as_bytes())
        .and_then(|_| f.write_all(&img.rgb))
        .map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ppm(&bytes).map_err(|msg| Error::Ppm(format!("{}: {msg}", path.display())))
}

/// Reads a raster by file extension: binary PPM always, PNG when built with
/// the `png` feature. Returns `Ok(None)` for extensions this build does not
/// read, so directory scans can skip stray files.
pub fn read_raster(path: &Path) -> Result<Option<Image>> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase());
    match ext.as_deref() {
        Some("ppm") => Ok(Some(read_ppm(path)?)),
        #[cfg(feature = "png")]
        Some("png") => Ok(Some(read_png(path)?)),
        _ => Ok(None),
    }
}

#[cfg(feature = "png")]
fn read_png(path: &Path) -> Result<Image> {
    let decoded = image::open(path)
        .map_err(|e| Error::Ppm(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::Ppm(format!("{}: zero image dimension", path.display())));
    }
    Ok(Image::new(w, h, decoded.into_raw()))
}

fn parse_ppm(bytes: &[u8]) -> std::result::Result<Image, String> {
    if bytes.get(..2) != Some(b"P6") {
        return Err("not a binary PPM (magic is not P6)".into());
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        skip_separators(bytes, &mut pos)?;
        *field = read_decimal(bytes, &mut pos)?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(format!("maxval {maxval} unsupported; only 8-bit rasters"));
    }
    if w == 0 || h == 0 {
        return Err("zero image dimension".into());
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err("missing whitespace before raster data".into()),
    }
    let need = 3 * w * h;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| format!("raster truncated: need {need} bytes, have {}", bytes.len() - pos))?;
    Ok(Image::new(w, h, raster.to_vec()))
}

/// Skips whitespace and `#` comment lines between header fields.
fn skip_separators(bytes: &[u8], pos: &mut usize) -> std::result::Result<(), String> {
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while !matches!(bytes.get(*pos), None | Some(b'\n')) {
                    *pos += 1;
                }
            }
            Some(_) => return Ok(()),
            None => return Err("header ended early".into()),
        }
    }
}

fn read_decimal(bytes: &[u8], pos: &mut usize) -> std::result::Result<usize, String> {
    let start = *pos;
    while matches!(bytes.get(*pos), Some(b) if b.is_ascii_digit()) {
        *pos += 1;
    }
    if *pos == start {
        return Err("expected a decimal header field".into());
    }
    std::str::from_utf8(&bytes[start..*pos])
        .unwrap()
        .parse()
        .map_err(|_| "header field out of range".into())
}
