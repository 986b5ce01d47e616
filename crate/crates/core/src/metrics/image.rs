use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 8-bit RGB image, row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageU8 {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl ImageU8 {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!("empty image {width}x{height}")));
        }
        if data.len() != width * height * 3 {
            return Err(Error::InvalidArgument(format!(
                "{} bytes for a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize, usize) -> u8) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data.push(f(y, x, c));
                }
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * 3 + c]
    }

    /// `[3, H, W]` tensor with values in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let (h, w) = (self.height, self.width);
        Tensor::from_fn(&[3, h, w], |i| {
            let (c, p) = (i / (h * w), i % (h * w));
            self.data[p * 3 + c] as f32 / 255.0
        })
    }

    /// Clamps to `[0, 1]` and rounds to the nearest 8-bit level.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::InvalidArgument(format!("expected a [3, H, W] tensor, got {s:?}")));
        }
        t.ensure_finite("image tensor")?;
        let (h, w) = (s[1], s[2]);
        Ok(Self::from_fn(w, h, |y, x, c| {
            (t.data()[(c * h + y) * w + x].clamp(0.0, 1.0) * 255.0).round() as u8
        }))
    }
}
