//! Integer images on the `{0..255}` pixel lattice and binary PPM (P6) I/O.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `C x H x W` image with planar (channel-major) storage.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ImageU8 {
    channels: usize,
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl ImageU8 {
    pub fn new(channels: usize, height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidShape(format!(
                "image dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        if pixels.len() != channels * height * width {
            return Err(Error::InvalidShape(format!(
                "{channels}x{height}x{width} image needs {} pixels, got {}",
                channels * height * width,
                pixels.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            pixels,
        })
    }

    pub fn filled(shape: [usize; 3], value: u8) -> Self {
        let [c, h, w] = shape;
        Self::new(c, h, w, vec![value; c * h * w]).expect("positive shape")
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> u8 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    /// Real-valued copy in the raw pixel domain.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            self.shape().to_vec(),
            self.pixels.iter().map(|&p| f64::from(p)).collect(),
        )
        .expect("image shape is valid")
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&p| u64::from(p)).sum::<u64>() as f64 / self.pixels.len() as f64
    }

    /// Interleaved RGB bytes as stored in a PPM payload.
    fn to_interleaved(&self) -> Vec<u8> {
        let plane = self.height * self.width;
        let mut out = Vec::with_capacity(self.pixels.len());
        for i in 0..plane {
            for c in 0..self.channels {
                out.push(self.pixels[c * plane + i]);
            }
        }
        out
    }

    fn from_interleaved(channels: usize, height: usize, width: usize, data: &[u8]) -> Self {
        let plane = height * width;
        let mut pixels = vec![0u8; channels * plane];
        for (i, px) in data.chunks_exact(channels).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                pixels[c * plane + i] = v;
            }
        }
        Self {
            channels,
            height,
            width,
            pixels,
        }
    }
}

/// Encode a 3-channel image as binary PPM.
pub fn encode_ppm(image: &ImageU8) -> Result<Vec<u8>> {
    if image.channels != 3 {
        return Err(Error::InvalidShape(format!(
            "PPM holds 3-channel images, got {} channels",
            image.channels
        )));
    }
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(image.to_interleaved());
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<ImageU8> {
    let mut cursor = HeaderCursor { bytes, pos: 0 };
    let magic = cursor.token()?;
    if magic != b"P6" {
        return Err(Error::PpmBadMagic(String::from_utf8_lossy(magic).into_owned()));
    }
    let width = cursor.number("width")?;
    let height = cursor.number("height")?;
    let maxval = cursor.number("maxval")?;
    if maxval != 255 {
        return Err(Error::PpmUnsupportedMaxval(maxval));
    }
    if width == 0 || height == 0 {
        return Err(Error::PpmHeader(format!("zero dimension {width}x{height}")));
    }
    // exactly one whitespace byte separates maxval from the raster
    match bytes.get(cursor.pos) {
        Some(b) if b.is_ascii_whitespace() => cursor.pos += 1,
        _ => return Err(Error::PpmHeader("missing whitespace after maxval".into())),
    }
    let (w, h) = (width as usize, height as usize);
    let expected = w * h * 3;
    let payload = &bytes[cursor.pos..];
    if payload.len() < expected {
        return Err(Error::PpmTruncated {
            expected,
            found: payload.len(),
        });
    }
    Ok(ImageU8::from_interleaved(3, h, w, &payload[..expected]))
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderCursor<'a> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Result<&'a [u8]> {
        self.skip_space_and_comments();
        let start = self.pos;
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() || b == b'#' {
                break;
            }
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::PpmHeader("unexpected end of header".into()));
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self, field: &str) -> Result<u32> {
        let tok = self.token()?;
        std::str::from_utf8(tok)
            .ok()
            .filter(|s| s.bytes().all(|b| b.is_ascii_digit()))
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| {
                Error::PpmHeader(format!(
                    "invalid {field} {:?}",
                    String::from_utf8_lossy(tok)
                ))
            })
    }
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<ImageU8> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes)
}

pub fn write_ppm(image: &ImageU8, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_ppm(image)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}
