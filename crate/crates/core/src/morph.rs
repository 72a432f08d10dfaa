//! Flat grayscale dilation and max-intensity thresholding of disparity images.

use thiserror::Error;

use crate::image::{GrayImage, Image, Pixel};
use crate::par;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MorphError {
    #[error("structuring element must have odd, positive sides, got {width}x{height}")]
    InvalidKernel { width: usize, height: usize },
    #[error("iteration count must be at least 1")]
    ZeroIterations,
    #[error("disparity image has no nonzero pixel")]
    EmptyDisparity,
}

/// Solid rectangle centered on its anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StructuringElement {
    width: usize,
    height: usize,
}

impl StructuringElement {
    pub fn new(width: usize, height: usize) -> Result<Self, MorphError> {
        if width == 0 || height == 0 || width.is_multiple_of(2) || height.is_multiple_of(2) {
            return Err(MorphError::InvalidKernel { width, height });
        }
        Ok(Self { width, height })
    }

    pub fn square(side: usize) -> Result<Self, MorphError> {
        Self::new(side, side)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }
}

impl Default for StructuringElement {
    fn default() -> Self {
        Self { width: 5, height: 5 }
    }
}

pub const DEFAULT_DELTA: u8 = 8;

fn pmax<T: Pixel>(a: T, b: T) -> T {
    if b > a {
        b
    } else {
        a
    }
}

// The rectangle is separable: a horizontal max pass followed by a vertical one
// gives the same result as the full 2D window.
fn dilate_once<T: Pixel>(img: &Image<T>, kernel: StructuringElement) -> Image<T> {
    let (rows, cols) = (img.rows(), img.cols());
    let (hx, hy) = ((kernel.width / 2) as isize, (kernel.height / 2) as isize);

    let mut horiz = vec![T::default(); rows * cols];
    par::for_each_row(&mut horiz, cols, |r, out| {
        for (c, o) in out.iter_mut().enumerate() {
            let mut m = img.get(r, c);
            for dc in -hx..=hx {
                m = pmax(m, img.get_clamped(r as isize, c as isize + dc));
            }
            *o = m;
        }
    });

    let mut out = vec![T::default(); rows * cols];
    par::for_each_row(&mut out, cols, |r, dst| {
        for (c, o) in dst.iter_mut().enumerate() {
            let mut m = horiz[r * cols + c];
            for dr in -hy..=hy {
                let rr = (r as isize + dr).clamp(0, rows as isize - 1) as usize;
                m = pmax(m, horiz[rr * cols + c]);
            }
            *o = m;
        }
    });
    Image::from_vec(rows, cols, out).expect("same shape as input")
}

/// Grayscale dilation (max filter) with replicated borders, applied `iterations` times.
pub fn dilate<T: Pixel>(
    img: &Image<T>,
    kernel: StructuringElement,
    iterations: usize,
) -> Result<Image<T>, MorphError> {
    if iterations == 0 {
        return Err(MorphError::ZeroIterations);
    }
    let mut cur = dilate_once(img, kernel);
    for _ in 1..iterations {
        cur = dilate_once(&cur, kernel);
    }
    Ok(cur)
}

/// Marks pixels within `delta` of the global maximum. Zero (invalid) pixels are never marked.
pub fn max_intensity_threshold(img: &GrayImage, delta: u8) -> Result<(u8, GrayImage), MorphError> {
    let max = img.max_value();
    if max == 0 {
        return Err(MorphError::EmptyDisparity);
    }
    let threshold = max.saturating_sub(delta).max(1);
    Ok((threshold, img.map(|v| if v >= threshold { 255 } else { 0 })))
}
