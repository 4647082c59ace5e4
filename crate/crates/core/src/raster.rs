//! Binary masks and RGB helpers.

use image::GrayImage;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: u32, height: u32, fill: bool) -> Self {
        Self {
            width,
            height,
            bits: vec![fill; width as usize * height as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            bits,
        }
    }

    pub(crate) fn from_bits(width: u32, height: u32, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), width as usize * height as usize);
        Self {
            width,
            height,
            bits,
        }
    }

    /// Any nonzero gray level is "in".
    pub fn from_gray(img: &GrayImage) -> Self {
        Self {
            width: img.width(),
            height: img.height(),
            bits: img.as_raw().iter().map(|&v| v != 0).collect(),
        }
    }

    pub fn to_gray(&self) -> GrayImage {
        let raw = self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
        GrayImage::from_raw(self.width, self.height, raw).expect("mask dims")
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        let w = self.width as usize;
        self.bits[y as usize * w + x as usize] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn and(&self, other: &Mask) -> Mask {
        assert_eq!(self.dims(), other.dims(), "mask dims differ");
        Mask {
            width: self.width,
            height: self.height,
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(&a, &b)| a && b)
                .collect(),
        }
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.dims() == other.dims() && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    pub fn integral(&self) -> IntegralMask {
        IntegralMask::new(self)
    }
}

/// Summed-area table over a mask for O(1) rectangle counts.
#[derive(Clone, Debug)]
pub struct IntegralMask {
    stride: usize,
    width: u32,
    height: u32,
    sums: Vec<u64>,
}

impl IntegralMask {
    fn new(mask: &Mask) -> Self {
        let stride = mask.width as usize + 1;
        let mut sums = vec![0u64; stride * (mask.height as usize + 1)];
        for y in 0..mask.height as usize {
            let mut row = 0u64;
            for x in 0..mask.width as usize {
                row += u64::from(mask.bits[y * mask.width as usize + x]);
                sums[(y + 1) * stride + x + 1] = sums[y * stride + x + 1] + row;
            }
        }
        Self {
            stride,
            width: mask.width,
            height: mask.height,
            sums,
        }
    }

    /// Set pixels in `[x, x+w) x [y, y+h)`; the rectangle must be in bounds.
    pub fn count_in(&self, x: u32, y: u32, w: u32, h: u32) -> u64 {
        debug_assert!(x + w <= self.width && y + h <= self.height);
        let (x0, y0) = (x as usize, y as usize);
        let (x1, y1) = (x0 + w as usize, y0 + h as usize);
        let s = self.stride;
        self.sums[y1 * s + x1] + self.sums[y0 * s + x0] - self.sums[y0 * s + x1] - self.sums[y1 * s + x0]
    }
}
