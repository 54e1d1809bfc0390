//! Summed-area tables: plain, squared, and 45°-rotated.
//!
//! Tables are `(w+1) x (h+1)` with a zero border so every rectangle query
//! is four lookups with no branching. Sums are 64-bit integers; exact for
//! images up to 2^23 pixels.

use crate::image::{GrayImage, ImageError, Rect};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntegralKind {
    Plain,
    Squared,
    Rotated,
}

/// Summed-area table over a [`GrayImage`].
///
/// For `Plain`/`Squared`, `sums[y][x]` is the sum over the half-open pixel
/// block `[0,x) x [0,y)`.
///
/// For `Rotated`, `sums[y][x]` is the 45° triangle `T(x,y)`: all pixels
/// `(u,v)` with `v <= y-1` and `|u-(x-1)| <= y-1-v`. A rotated rectangle
/// `(x,y,w,h)` denotes the diamond of pixels `(u,v)` satisfying
/// `x+y-1 <= u+v <= x+y-2+2w` and `y-x+1 <= v-u <= y-x+2h`
/// (its topmost pixel is `(x-1, y)`; it holds `2*w*h` pixels), and its sum
/// is recovered with four triangle lookups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntegralImage {
    /// Table width = image width + 1.
    width: usize,
    /// Table height = image height + 1.
    height: usize,
    kind: IntegralKind,
    sums: Vec<i64>,
}

impl IntegralImage {
    pub fn plain(img: &GrayImage) -> Self {
        Self::prefix_table(img, IntegralKind::Plain, |p| p as i64)
    }

    pub fn squared(img: &GrayImage) -> Self {
        Self::prefix_table(img, IntegralKind::Squared, |p| (p as i64) * (p as i64))
    }

    fn prefix_table(img: &GrayImage, kind: IntegralKind, f: impl Fn(u8) -> i64) -> Self {
        let (w, h) = (img.width(), img.height());
        let tw = w + 1;
        let mut sums = vec![0i64; tw * (h + 1)];
        for y in 0..h {
            let mut row = 0i64;
            let above = y * tw;
            let here = (y + 1) * tw;
            for x in 0..w {
                row += f(img.get(x, y));
                sums[here + x + 1] = sums[above + x + 1] + row;
            }
        }
        IntegralImage {
            width: tw,
            height: h + 1,
            kind,
            sums,
        }
    }

    /// 45°-rotated summed-area table.
    pub fn rotated(img: &GrayImage) -> Self {
        let (w, h) = (img.width(), img.height());
        let tw = w + 1;
        let mut sums = vec![0i64; tw * (h + 1)];

        // diagonal strip sums used to fill the two edge columns directly:
        // anti[s] over pixels with u+v = s, diag[k] over pixels with u-v = k
        // (diag indexed as k + h - 1 to keep it non-negative)
        let mut anti = vec![0i64; w + h];
        let mut diag = vec![0i64; w + h];
        for v in 0..h {
            for u in 0..w {
                let p = img.get(u, v) as i64;
                anti[u + v] += p;
                diag[u + h - 1 - v] += p;
            }
        }

        let px = |u: usize, v: usize| img.get(u, v) as i64;
        for y in 1..=h {
            // left edge: T(0,y) = T(0,y-1) + antidiagonal u+v = y-2
            sums[y * tw] = sums[(y - 1) * tw]
                + if y >= 2 && y - 2 < anti.len() {
                    anti[y - 2]
                } else {
                    0
                };
            // right edge: T(w,y) = T(w,y-1) + diagonal u-v = w-y
            let k = w as i64 - y as i64 + h as i64 - 1;
            sums[y * tw + w] = sums[(y - 1) * tw + w]
                + if (0..diag.len() as i64).contains(&k) {
                    diag[k as usize]
                } else {
                    0
                };
            // interior: T(x,y) = T(x-1,y-1) + T(x+1,y-1) - T(x,y-2)
            //                    + I(x-1,y-1) + I(x-1,y-2)
            for x in 1..w {
                let mut t = sums[(y - 1) * tw + x - 1] + sums[(y - 1) * tw + x + 1];
                if y >= 2 {
                    t -= sums[(y - 2) * tw + x];
                    t += px(x - 1, y - 2);
                }
                t += px(x - 1, y - 1);
                sums[y * tw + x] = t;
            }
        }
        IntegralImage {
            width: tw,
            height: h + 1,
            kind: IntegralKind::Rotated,
            sums,
        }
    }

    pub fn kind(&self) -> IntegralKind {
        self.kind
    }

    /// Table width (image width + 1).
    pub fn width(&self) -> usize {
        self.width
    }

    /// Table height (image height + 1).
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> i64 {
        debug_assert!(x < self.width && y < self.height);
        self.sums[y * self.width + x]
    }

    pub(crate) fn sums(&self) -> &[i64] {
        &self.sums
    }

    /// Exact pixel sum of `r` via four lookups. For `Plain`/`Squared`
    /// tables this is the axis-aligned rectangle; for `Rotated` tables it
    /// is the 45°-rotated rectangle described on [`IntegralImage`].
    pub fn rect_sum(&self, r: Rect) -> Result<i64, ImageError> {
        match self.kind {
            IntegralKind::Plain | IntegralKind::Squared => {
                if r.w < 1 || r.h < 1 || r.right() >= self.width || r.bottom() >= self.height {
                    return Err(ImageError::OutOfBounds(r));
                }
                let s = self.at(r.right(), r.bottom()) + self.at(r.x, r.y)
                    - self.at(r.right(), r.y)
                    - self.at(r.x, r.bottom());
                Ok(s)
            }
            IntegralKind::Rotated => {
                if r.w < 1
                    || r.h < 1
                    || r.x < r.h
                    || r.right() >= self.width
                    || r.y + r.w + r.h >= self.height
                {
                    return Err(ImageError::OutOfBounds(r));
                }
                let s = self.at(r.x, r.y) + self.at(r.x + r.w - r.h, r.y + r.w + r.h)
                    - self.at(r.x + r.w, r.y + r.w)
                    - self.at(r.x - r.h, r.y + r.h);
                Ok(s)
            }
        }
    }
}
