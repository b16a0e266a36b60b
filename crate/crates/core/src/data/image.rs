use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Side length of generated digits.
pub const DIGIT_SIZE: usize = 28;

/// Pixels above this count as foreground.
pub const FOREGROUND_THRESHOLD: f64 = 0.5;

/// A grayscale image in `[0, 1]`, row-major, with the stroke skeleton it was
/// drawn from (empty for loaded images).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DigitImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
    /// `(row, col)` points along the strokes, in drawing order.
    pub skeleton: Vec<(usize, usize)>,
}

impl DigitImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::data(format!(
                "{height}x{width} image needs {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
            skeleton: Vec::new(),
        })
    }

    pub fn blank(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![0.0; height * width],
            skeleton: Vec::new(),
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.pixels[r * self.width + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.pixels[r * self.width + c] = v;
    }

    pub fn is_foreground(&self, r: usize, c: usize) -> bool {
        self.get(r, c) > FOREGROUND_THRESHOLD
    }

    pub fn foreground_count(&self) -> usize {
        self.pixels
            .iter()
            .filter(|&&v| v > FOREGROUND_THRESHOLD)
            .count()
    }

    pub fn transposed(&self) -> Self {
        let mut out = Self::blank(self.width, self.height);
        for r in 0..self.height {
            for c in 0..self.width {
                out.set(c, r, self.get(r, c));
            }
        }
        out.skeleton = self.skeleton.iter().map(|&(r, c)| (c, r)).collect();
        out
    }

    /// Quarter turn clockwise.
    pub fn rotated90(&self) -> Self {
        let mut out = Self::blank(self.width, self.height);
        for r in 0..self.height {
            for c in 0..self.width {
                out.set(c, self.height - 1 - r, self.get(r, c));
            }
        }
        out.skeleton = self
            .skeleton
            .iter()
            .map(|&(r, c)| (c, self.height - 1 - r))
            .collect();
        out
    }

    /// Binary dilation with a 3x3 square, applied only at pixels where
    /// `mask(r, c)` holds. Values are max-combined so grayscale input works.
    pub fn dilate_where(&self, mask: impl Fn(usize, usize) -> bool) -> Self {
        let mut out = self.clone();
        for r in 0..self.height {
            for c in 0..self.width {
                if !mask(r, c) {
                    continue;
                }
                let mut m = self.get(r, c);
                for rr in r.saturating_sub(1)..=(r + 1).min(self.height - 1) {
                    for cc in c.saturating_sub(1)..=(c + 1).min(self.width - 1) {
                        m = m.max(self.get(rr, cc));
                    }
                }
                out.set(r, c, m);
            }
        }
        out
    }

    pub fn dilate(&self) -> Self {
        self.dilate_where(|_, _| true)
    }
}

/// Number of foreground components under 4- or 8-connectivity.
pub fn count_components(img: &DigitImage, connectivity: u8) -> Result<usize> {
    let diagonal = match connectivity {
        4 => false,
        8 => true,
        other => {
            return Err(Error::config(format!(
                "connectivity must be 4 or 8, got {other}"
            )))
        }
    };
    let (h, w) = (img.height, img.width);
    let mut seen = vec![false; h * w];
    let mut stack = Vec::new();
    let mut count = 0;
    for start in 0..h * w {
        if seen[start] || img.pixels[start] <= FOREGROUND_THRESHOLD {
            continue;
        }
        count += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (r, c) = ((p / w) as isize, (p % w) as isize);
            for dr in -1..=1isize {
                for dc in -1..=1isize {
                    if (dr == 0 && dc == 0) || (!diagonal && dr != 0 && dc != 0) {
                        continue;
                    }
                    let (rr, cc) = (r + dr, c + dc);
                    if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                        continue;
                    }
                    let q = rr as usize * w + cc as usize;
                    if !seen[q] && img.pixels[q] > FOREGROUND_THRESHOLD {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
    }
    Ok(count)
}
