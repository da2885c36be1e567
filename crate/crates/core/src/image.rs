use crate::error::{Error, Result};
use crate::ndiff::Tensor;

/// Interleaved RGB image (`height × width × 3`), values nominally in `[0, 255]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

pub const CHANNELS: usize = 3;

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * CHANNELS {
            return Err(Error::shape(format!(
                "image {height}x{width}x3 needs {} values, got {}",
                height * width * CHANNELS,
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Image {
            height,
            width,
            data: vec![value; height * width * CHANNELS],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * CHANNELS;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn pixels_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.data.chunks_mut(CHANNELS)
    }

    /// Rotation/scale pivot in pixel coordinates (pixel centers at integers).
    pub fn center(&self) -> [f64; 2] {
        [
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
        ]
    }

    pub fn clamp_to_byte_range(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 255.0));
    }

    /// Rounds to the nearest representable 8-bit value, as stored on disk.
    pub fn quantize(&mut self) {
        self.data
            .iter_mut()
            .for_each(|v| *v = v.round().clamp(0.0, 255.0));
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| v.round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Image::new(height, width, bytes.iter().map(|&b| b as f64).collect())
    }
}

/// Packs images into a `(batch, 3, h, w)` network input scaled to `[-0.5, 0.5]`.
pub fn to_network_input(images: &[&Image]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::invalid("empty image batch"))?;
    let (h, w) = (first.height, first.width);
    let mut data = vec![0.0; images.len() * CHANNELS * h * w];
    for (b, img) in images.iter().enumerate() {
        if img.height != h || img.width != w {
            return Err(Error::shape("images in a batch must share a size"));
        }
        for y in 0..h {
            for x in 0..w {
                let src = (y * w + x) * CHANNELS;
                for c in 0..CHANNELS {
                    data[((b * CHANNELS + c) * h + y) * w + x] = img.data[src + c] / 255.0 - 0.5;
                }
            }
        }
    }
    Tensor::new(vec![images.len(), CHANNELS, h, w], data)
}
