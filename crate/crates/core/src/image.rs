//! Planar 8-bit rasters and their exact rational intermediates.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ImageError {
    #[error("image buffer holds {actual} samples, expected {expected} ({width}x{height}x{channels})")]
    BufferLength {
        width: usize,
        height: usize,
        channels: usize,
        expected: usize,
        actual: usize,
    },
    #[error("unsupported channel count {0} (expected 1 or 3)")]
    Channels(usize),
    #[error("images differ in geometry: {0:?} vs {1:?}")]
    Geometry((usize, usize, usize), (usize, usize, usize)),
}

/// An 8-bit planar raster, row-major within each channel plane.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImagePlane {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl ImagePlane {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self, ImageError> {
        if channels != 1 && channels != 3 {
            return Err(ImageError::Channels(channels));
        }
        let expected = width * height * channels;
        if data.len() != expected {
            return Err(ImageError::BufferLength {
                width,
                height,
                channels,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Result<Self, ImageError> {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    /// Builds a plane from per-pixel closure `f(channel, y, x)`.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> u8,
    ) -> Result<Self, ImageError> {
        let mut data = Vec::with_capacity(width * height * channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(width, height, channels, data)
    }

    /// Stacks single-channel planes of equal size into one image.
    pub fn stack(planes: &[ImagePlane]) -> Result<Self, ImageError> {
        let first = &planes[0];
        let mut data = Vec::with_capacity(first.data.len() * planes.len());
        for p in planes {
            if p.width != first.width || p.height != first.height || p.channels != 1 {
                return Err(ImageError::Geometry(first.dims(), p.dims()));
            }
            data.extend_from_slice(&p.data);
        }
        Self::new(first.width, first.height, planes.len(), data)
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(width, height, channels)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.width, self.height, self.channels)
    }

    #[inline]
    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[u8] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    /// Channel `c` as its own single-channel image.
    pub fn channel(&self, c: usize) -> ImagePlane {
        ImagePlane {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.plane(c).to_vec(),
        }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> u8 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: u8) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Sample with replicate padding outside the raster.
    #[inline]
    pub fn get_clamped(&self, c: usize, y: isize, x: isize) -> u8 {
        let y = y.clamp(0, self.height as isize - 1) as usize;
        let x = x.clamp(0, self.width as isize - 1) as usize;
        self.get(c, y, x)
    }

    /// Rotates by `k` quarter turns counter-clockwise.
    pub fn rot90(&self, k: u8) -> ImagePlane {
        let k = k & 3;
        if k == 0 {
            return self.clone();
        }
        let (w, h) = (self.width, self.height);
        let (nw, nh) = if k % 2 == 1 { (h, w) } else { (w, h) };
        let mut data = vec![0u8; self.data.len()];
        for c in 0..self.channels {
            for y in 0..nh {
                for x in 0..nw {
                    let (sy, sx) = match k {
                        1 => (x, w - 1 - y),
                        2 => (h - 1 - y, w - 1 - x),
                        _ => (h - 1 - x, y),
                    };
                    data[(c * nh + y) * nw + x] = self.get(c, sy, sx);
                }
            }
        }
        ImagePlane {
            width: nw,
            height: nh,
            channels: self.channels,
            data,
        }
    }

    /// Crops to the top-left `width x height` window.
    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> ImagePlane {
        assert!(x0 + width <= self.width && y0 + height <= self.height);
        let mut data = Vec::with_capacity(width * height * self.channels);
        for c in 0..self.channels {
            for y in y0..y0 + height {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + x0..row + x0 + width]);
            }
        }
        ImagePlane {
            width,
            height,
            channels: self.channels,
            data,
        }
    }
}

/// Round half up, then clamp to `0..=255`. This is the single rounding rule of
/// the engine; `den` must be positive.
#[inline]
pub fn round_half_up_clamp(num: i64, den: i64) -> u8 {
    debug_assert!(den > 0);
    let q = (2 * num + den).div_euclid(2 * den);
    q.clamp(0, 255) as u8
}

/// Same rule for a float value.
#[inline]
pub fn round_half_up_clamp_f64(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// A raster of exact non-negative rationals sharing one denominator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RationalPlane {
    width: usize,
    height: usize,
    channels: usize,
    den: u32,
    num: Vec<u32>,
}

impl RationalPlane {
    pub fn zeros(width: usize, height: usize, channels: usize, den: u32) -> Self {
        assert!(den > 0);
        Self {
            width,
            height,
            channels,
            den,
            num: vec![0; width * height * channels],
        }
    }

    pub fn from_parts(width: usize, height: usize, channels: usize, den: u32, num: Vec<u32>) -> Self {
        assert_eq!(num.len(), width * height * channels);
        assert!(den > 0);
        Self {
            width,
            height,
            channels,
            den,
            num,
        }
    }

    /// An integer image as a rational plane with denominator 1.
    pub fn from_image(img: &ImagePlane) -> Self {
        Self::from_parts(
            img.width,
            img.height,
            img.channels,
            1,
            img.data.iter().map(|&v| v as u32).collect(),
        )
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.width, self.height, self.channels)
    }

    #[inline]
    pub fn den(&self) -> u32 {
        self.den
    }

    #[inline]
    pub fn numerators(&self) -> &[u32] {
        &self.num
    }

    #[inline]
    pub fn numerators_mut(&mut self) -> &mut [u32] {
        &mut self.num
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> u32 {
        self.num[(c * self.height + y) * self.width + x]
    }

    pub fn value(&self, c: usize, y: usize, x: usize) -> f64 {
        self.get(c, y, x) as f64 / self.den as f64
    }

    /// Rescales numerators so the denominator becomes `den`, a multiple of the
    /// current one.
    pub fn rebase(&mut self, den: u32) {
        assert!(den % self.den == 0, "{den} is not a multiple of {}", self.den);
        let k = den / self.den;
        if k != 1 {
            self.num.iter_mut().for_each(|v| *v *= k);
            self.den = den;
        }
    }

    /// Rounds every sample half up and clamps into an 8-bit image.
    pub fn requantize(&self) -> ImagePlane {
        let den = self.den as i64;
        ImagePlane {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self
                .num
                .iter()
                .map(|&n| round_half_up_clamp(n as i64, den))
                .collect(),
        }
    }

    /// Stacks single-channel planes sharing a denominator.
    pub fn stack(planes: Vec<RationalPlane>) -> RationalPlane {
        let den = planes.iter().map(|p| p.den).max().unwrap_or(1);
        let (w, h) = (planes[0].width, planes[0].height);
        let channels = planes.iter().map(|p| p.channels).sum();
        let mut num = Vec::with_capacity(w * h * channels);
        for mut p in planes {
            assert_eq!((p.width, p.height), (w, h));
            p.rebase(den);
            num.extend(p.num);
        }
        RationalPlane::from_parts(w, h, channels, den, num)
    }
}
