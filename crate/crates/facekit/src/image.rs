//! Grayscale/RGB rasters, PGM I/O and the basic transforms.
//!
//! Everything downstream (detection, training, recognition) consumes
//! [`GrayImage`]. Images are immutable values: every transform returns a
//! new image, so they are safe to share across threads.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("file not found: {0}")]
    FileNotFound(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed pgm at byte {offset}: {reason}")]
    MalformedPgm { reason: String, offset: usize },
    #[error("image dimensions must be at least 1x1")]
    ZeroDimension,
    #[error("pixel buffer has {got} bytes, expected {expected} for {width}x{height}")]
    BadBufferLength {
        width: usize,
        height: usize,
        expected: usize,
        got: usize,
    },
    #[error("rectangle {0:?} exceeds image bounds")]
    OutOfBounds(Rect),
}

/// Axis-aligned rectangle in pixel coordinates, `x`/`y` top-left.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Rect { x, y, w, h }
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn right(&self) -> usize {
        self.x + self.w
    }

    pub fn bottom(&self) -> usize {
        self.y + self.h
    }

    /// True when the rectangle lies fully inside a `w`×`h` image.
    pub fn fits_within(&self, w: usize, h: usize) -> bool {
        self.w >= 1 && self.h >= 1 && self.right() <= w && self.bottom() <= h
    }

    /// Intersection-over-union with another rectangle.
    pub fn iou(&self, other: &Rect) -> f64 {
        let ix = self.x.max(other.x);
        let iy = self.y.max(other.y);
        let ix2 = self.right().min(other.right());
        let iy2 = self.bottom().min(other.bottom());
        if ix2 <= ix || iy2 <= iy {
            return 0.0;
        }
        let inter = ((ix2 - ix) * (iy2 - iy)) as f64;
        let union = (self.area() + other.area()) as f64 - inter;
        inter / union
    }
}

/// 8-bit single-channel raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl GrayImage {
    /// All-zero image.
    pub fn new(width: usize, height: usize) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::ZeroDimension);
        }
        Ok(GrayImage {
            width,
            height,
            data: vec![0; width * height],
        })
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::ZeroDimension);
        }
        if data.len() != width * height {
            return Err(ImageError::BadBufferLength {
                width,
                height,
                expected: width * height,
                got: data.len(),
            });
        }
        Ok(GrayImage {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> u8,
    ) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::ZeroDimension);
        }
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Ok(GrayImage {
            width,
            height,
            data,
        })
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

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        debug_assert!(x < self.width && y < self.height);
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        debug_assert!(x < self.width && y < self.height);
        self.data[y * self.width + x] = v;
    }

    pub fn mean(&self) -> f64 {
        let sum: u64 = self.data.iter().map(|&p| p as u64).sum();
        sum as f64 / self.data.len() as f64
    }

    /// Crop a sub-image. The rectangle must lie within bounds.
    pub fn crop(&self, r: Rect) -> Result<GrayImage, ImageError> {
        if !r.fits_within(self.width, self.height) {
            return Err(ImageError::OutOfBounds(r));
        }
        let mut data = Vec::with_capacity(r.w * r.h);
        for y in r.y..r.bottom() {
            data.extend_from_slice(&self.data[y * self.width + r.x..y * self.width + r.right()]);
        }
        GrayImage::from_raw(r.w, r.h, data)
    }

    /// Bilinear resize with half-pixel-center source mapping.
    ///
    /// Resizing to the original dimensions is an exact copy; constant
    /// images stay constant at any size.
    pub fn resize_bilinear(&self, new_w: usize, new_h: usize) -> Result<GrayImage, ImageError> {
        if new_w == 0 || new_h == 0 {
            return Err(ImageError::ZeroDimension);
        }
        let sx_ratio = self.width as f64 / new_w as f64;
        let sy_ratio = self.height as f64 / new_h as f64;
        let mut data = Vec::with_capacity(new_w * new_h);
        for dy in 0..new_h {
            let sy = ((dy as f64 + 0.5) * sy_ratio - 0.5).clamp(0.0, (self.height - 1) as f64);
            for dx in 0..new_w {
                let sx = ((dx as f64 + 0.5) * sx_ratio - 0.5).clamp(0.0, (self.width - 1) as f64);
                data.push(round_u8(self.sample_bilinear(sx, sy)));
            }
        }
        GrayImage::from_raw(new_w, new_h, data)
    }

    /// Bilinear sample at a real-valued position inside the image.
    /// Coordinates must already be clamped to `[0, dim-1]`.
    fn sample_bilinear(&self, sx: f64, sy: f64) -> f64 {
        let x0 = sx.floor() as usize;
        let y0 = sy.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = sx - x0 as f64;
        let fy = sy - y0 as f64;
        let p00 = self.get(x0, y0) as f64;
        let p10 = self.get(x1, y0) as f64;
        let p01 = self.get(x0, y1) as f64;
        let p11 = self.get(x1, y1) as f64;
        let top = p00 + (p10 - p00) * fx;
        let bot = p01 + (p11 - p01) * fx;
        top + (bot - top) * fy
    }

    /// Shift all intensities so the mean lands on `target_mean`, clamping
    /// to `[0, 255]`.
    pub fn normalize_brightness(&self, target_mean: u8) -> GrayImage {
        let offset = (target_mean as f64 - self.mean()).round() as i32;
        let data = self
            .data
            .iter()
            .map(|&p| (p as i32 + offset).clamp(0, 255) as u8)
            .collect();
        GrayImage {
            width: self.width,
            height: self.height,
            data,
        }
    }

    /// Rotate the image content by `angle_deg` about `(cx, cy)`.
    ///
    /// Inverse-mapped bilinear sampling; sample points that fall outside
    /// the source fill with 0. Output has the same dimensions.
    pub fn rotate_about(&self, cx: f64, cy: f64, angle_deg: f64) -> GrayImage {
        let theta = angle_deg.to_radians();
        let (sin_t, cos_t) = theta.sin_cos();
        let mut data = Vec::with_capacity(self.width * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                // inverse rotation: where did this destination pixel come from
                let sx = cx + cos_t * dx + sin_t * dy;
                let sy = cy - sin_t * dx + cos_t * dy;
                let v = if sx < 0.0
                    || sy < 0.0
                    || sx > (self.width - 1) as f64
                    || sy > (self.height - 1) as f64
                {
                    0
                } else {
                    round_u8(self.sample_bilinear(sx, sy))
                };
                data.push(v);
            }
        }
        GrayImage {
            width: self.width,
            height: self.height,
            data,
        }
    }

    /// Draw a 1-pixel border of `r` at intensity `value`; the interior is
    /// untouched.
    pub fn draw_rectangle(&self, r: Rect, value: u8) -> Result<GrayImage, ImageError> {
        if !r.fits_within(self.width, self.height) {
            return Err(ImageError::OutOfBounds(r));
        }
        let mut out = self.clone();
        for x in r.x..r.right() {
            out.set(x, r.y, value);
            out.set(x, r.bottom() - 1, value);
        }
        for y in r.y..r.bottom() {
            out.set(r.x, y, value);
            out.set(r.right() - 1, y, value);
        }
        Ok(out)
    }
}

/// Interleaved 8-bit RGB raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::ZeroDimension);
        }
        if data.len() != 3 * width * height {
            return Err(ImageError::BadBufferLength {
                width,
                height,
                expected: 3 * width * height,
                got: data.len(),
            });
        }
        Ok(RgbImage {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Convert to grayscale with the conventional luma weights
    /// `0.299 R + 0.587 G + 0.114 B`, rounded half up.
    pub fn to_gray(&self) -> GrayImage {
        let data = self
            .data
            .chunks_exact(3)
            .map(|px| {
                let luma =
                    0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64;
                round_u8(luma)
            })
            .collect();
        GrayImage {
            width: self.width,
            height: self.height,
            data,
        }
    }
}

#[inline]
fn round_u8(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Load a binary (`P5`) or ASCII (`P2`) PGM file with `maxval <= 255`.
pub fn load_pgm(path: impl AsRef<Path>) -> Result<GrayImage, ImageError> {
    let path = path.as_ref();
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(ImageError::FileNotFound(path.display().to_string()))
        }
        Err(e) => return Err(e.into()),
    };
    parse_pgm(&bytes)
}

/// Parse PGM from memory. See [`load_pgm`].
pub fn parse_pgm(bytes: &[u8]) -> Result<GrayImage, ImageError> {
    let mut pos = 0usize;
    let malformed = |reason: &str, offset: usize| ImageError::MalformedPgm {
        reason: reason.to_string(),
        offset,
    };

    let magic = read_token(bytes, &mut pos).ok_or_else(|| malformed("missing magic", 0))?;
    let binary = match magic.as_str() {
        "P5" => true,
        "P2" => false,
        _ => return Err(malformed(&format!("bad magic {magic:?}"), 0)),
    };

    let mut read_header_int = |name: &str, pos: &mut usize| -> Result<usize, ImageError> {
        let at = *pos;
        let tok = read_token(bytes, pos).ok_or_else(|| malformed(&format!("missing {name}"), at))?;
        tok.parse::<usize>()
            .map_err(|_| malformed(&format!("bad {name} {tok:?}"), at))
    };
    let width = read_header_int("width", &mut pos)?;
    let height = read_header_int("height", &mut pos)?;
    let maxval = read_header_int("maxval", &mut pos)?;
    if width == 0 || height == 0 {
        return Err(malformed("zero dimension", pos));
    }
    if maxval == 0 || maxval > 255 {
        return Err(malformed(&format!("unsupported maxval {maxval}"), pos));
    }

    let n = width * height;
    let data = if binary {
        // exactly one whitespace byte separates the header from raw data
        if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
            return Err(malformed("missing whitespace after maxval", pos));
        }
        pos += 1;
        if bytes.len() < pos + n {
            return Err(malformed(
                &format!("truncated raster: have {} of {n} bytes", bytes.len() - pos),
                bytes.len(),
            ));
        }
        bytes[pos..pos + n].to_vec()
    } else {
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let at = pos;
            let tok =
                read_token(bytes, &mut pos).ok_or_else(|| malformed("truncated raster", at))?;
            let v: usize = tok
                .parse()
                .map_err(|_| malformed(&format!("bad pixel {tok:?}"), at))?;
            if v > maxval {
                return Err(malformed(&format!("pixel {v} exceeds maxval {maxval}"), at));
            }
            data.push(v as u8);
        }
        data
    };
    GrayImage::from_raw(width, height, data)
}

/// Read one whitespace-delimited header token, skipping `#` comments.
fn read_token(bytes: &[u8], pos: &mut usize) -> Option<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    if *pos >= bytes.len() {
        return None;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    Some(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

/// Write a binary `P5` PGM with maxval 255.
pub fn save_pgm(img: &GrayImage, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{} {}\n255\n", img.width, img.height)?;
    f.write_all(&img.data)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_p5_roundtrip_of_header_example() {
        let bytes = b"P5 3 2 255 \x00\x01\x02\x03\x04\x05";
        let img = parse_pgm(bytes).unwrap();
        assert_eq!((img.width(), img.height()), (3, 2));
        assert_eq!(img.data(), &[0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn pgm_p2_single_pixel() {
        let img = parse_pgm(b"P2 1 1 255 128").unwrap();
        assert_eq!((img.width(), img.height()), (1, 1));
        assert_eq!(img.get(0, 0), 128);
    }

    #[test]
    fn pgm_p2_and_p5_load_identically() {
        let p2 = parse_pgm(b"P2\n# a comment\n2 2\n255\n10 20\n30 40\n").unwrap();
        let p5 = parse_pgm(b"P5\n2 2\n255\n\x0a\x14\x1e\x28").unwrap();
        assert_eq!(p2, p5);
    }

    #[test]
    fn pgm_rejects_wrong_magic() {
        match parse_pgm(b"P6 1 1 255 xyz") {
            Err(ImageError::MalformedPgm { reason, .. }) => assert!(reason.contains("magic")),
            other => panic!("expected MalformedPgm, got {other:?}"),
        }
    }

    #[test]
    fn pgm_rejects_truncated_raster() {
        match parse_pgm(b"P5 4 4 255 \x01\x02") {
            Err(ImageError::MalformedPgm { reason, .. }) => assert!(reason.contains("truncated")),
            other => panic!("expected MalformedPgm, got {other:?}"),
        }
    }

    #[test]
    fn pgm_missing_file() {
        match load_pgm("/definitely/not/here.pgm") {
            Err(ImageError::FileNotFound(_)) => {}
            other => panic!("expected FileNotFound, got {other:?}"),
        }
    }

    #[test]
    fn pgm_save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        let img = GrayImage::from_fn(5, 3, |x, y| (x * 50 + y * 7) as u8).unwrap();
        save_pgm(&img, &path).unwrap();
        assert_eq!(load_pgm(&path).unwrap(), img);
    }

    #[test]
    fn luma_extremes_and_hand_value() {
        let rgb = RgbImage::from_raw(3, 1, vec![255, 255, 255, 0, 0, 0, 100, 150, 50]).unwrap();
        let g = rgb.to_gray();
        assert_eq!(g.get(0, 0), 255);
        assert_eq!(g.get(1, 0), 0);
        // 0.299*100 + 0.587*150 + 0.114*50 = 123.65 -> 124
        assert_eq!(g.get(2, 0), 124);
    }

    #[test]
    fn luma_is_monotone_in_each_channel() {
        for base in [(10u8, 200u8, 77u8), (0, 0, 0), (250, 1, 3)] {
            for ch in 0..3 {
                let mut lo = [base.0, base.1, base.2];
                let mut hi = lo;
                hi[ch] = hi[ch].saturating_add(5);
                lo[ch] = lo[ch].saturating_sub(5);
                let img = RgbImage::from_raw(2, 1, vec![lo[0], lo[1], lo[2], hi[0], hi[1], hi[2]])
                    .unwrap()
                    .to_gray();
                assert!(img.get(0, 0) <= img.get(1, 0));
            }
        }
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = GrayImage::from_fn(7, 5, |x, y| (x * 13 + y * 31) as u8).unwrap();
        assert_eq!(img.resize_bilinear(7, 5).unwrap(), img);

        let flat = GrayImage::from_raw(3, 3, vec![77; 9]).unwrap();
        for (w, h) in [(1, 1), (2, 5), (9, 4)] {
            let r = flat.resize_bilinear(w, h).unwrap();
            assert!(r.data().iter().all(|&p| p == 77));
        }
    }

    #[test]
    fn resize_matches_scalar_oracle() {
        // independent per-pixel evaluation of half-pixel-center bilinear
        let img = GrayImage::from_raw(2, 1, vec![0, 255]).unwrap();
        let out = img.resize_bilinear(4, 1).unwrap();
        let mut expect = Vec::new();
        for dx in 0..4 {
            let sx = ((dx as f64 + 0.5) * (2.0 / 4.0) - 0.5).clamp(0.0, 1.0);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(1);
            let f = sx - x0 as f64;
            let v = img.get(x0, 0) as f64 * (1.0 - f) + img.get(x1, 0) as f64 * f;
            expect.push((v + 0.5).floor() as u8);
        }
        assert_eq!(out.data(), &expect[..]);
        assert_eq!(out.data(), &[0, 64, 191, 255]);
    }

    #[test]
    fn resize_rejects_zero_dims() {
        let img = GrayImage::new(4, 4).unwrap();
        assert!(matches!(
            img.resize_bilinear(0, 3),
            Err(ImageError::ZeroDimension)
        ));
    }

    #[test]
    fn normalize_brightness_contract() {
        let flat = GrayImage::from_raw(4, 4, vec![50; 16]).unwrap();
        let shifted = flat.normalize_brightness(100);
        assert!(shifted.data().iter().all(|&p| p == 100));

        // already on target: unchanged
        let img = GrayImage::from_raw(2, 2, vec![90, 110, 100, 100]).unwrap();
        assert_eq!(img.normalize_brightness(100), img);

        // random-ish image lands within +-1 of the target when nothing clips
        let img = GrayImage::from_fn(16, 16, |x, y| (40 + (x * 7 + y * 11) % 150) as u8).unwrap();
        let out = img.normalize_brightness(128);
        assert!((out.mean() - 128.0).abs() <= 1.0, "mean {}", out.mean());
    }

    #[test]
    fn rotate_identity_and_full_turn() {
        let img = GrayImage::from_fn(9, 9, |x, y| (x * 20 + y * 5) as u8).unwrap();
        assert_eq!(img.rotate_about(4.0, 4.0, 0.0), img);

        let back = img.rotate_about(4.0, 4.0, 360.0);
        for y in 2..7 {
            for x in 2..7 {
                let d = (back.get(x, y) as i32 - img.get(x, y) as i32).abs();
                assert!(d <= 1, "pixel ({x},{y}) moved by {d}");
            }
        }
    }

    #[test]
    fn rotate_constant_matches_inverse_map_oracle() {
        let img = GrayImage::from_raw(11, 11, vec![200; 121]).unwrap();
        let out = img.rotate_about(5.0, 5.0, 30.0);
        let theta = 30.0f64.to_radians();
        let (s, c) = theta.sin_cos();
        for y in 0..11 {
            for x in 0..11 {
                let dx = x as f64 - 5.0;
                let dy = y as f64 - 5.0;
                let sx = 5.0 + c * dx + s * dy;
                let sy = 5.0 - s * dx + c * dy;
                let inside = (0.0..=10.0).contains(&sx) && (0.0..=10.0).contains(&sy);
                let expect = if inside { 200 } else { 0 };
                assert_eq!(out.get(x, y), expect, "at ({x},{y})");
            }
        }
    }

    #[test]
    fn rotation_moves_points_as_the_forward_map_predicts() {
        // single bright dot; rotating by 90 about the center sends (x,y)
        // to (cx - (y-cy), cy + (x-cx)) under the y-down forward map
        let mut img = GrayImage::new(21, 21).unwrap();
        img.set(15, 10, 255);
        let out = img.rotate_about(10.0, 10.0, 90.0);
        assert_eq!(out.get(10, 15), 255);
        assert_eq!(out.get(15, 10), 0);
    }

    #[test]
    fn draw_rectangle_border_only() {
        let img = GrayImage::new(8, 6).unwrap();
        let r = Rect::new(2, 1, 4, 3);
        let out = img.draw_rectangle(r, 9).unwrap();
        let changed = out
            .data()
            .iter()
            .zip(img.data())
            .filter(|(a, b)| a != b)
            .count();
        assert_eq!(changed, 2 * r.w + 2 * r.h - 4);
        // interior untouched
        assert_eq!(out.get(3, 2), 0);
        assert_eq!(out.get(2, 1), 9);
        assert_eq!(out.get(5, 3), 9);

        // full-image border and 1x1 rect
        let full = img.draw_rectangle(Rect::new(0, 0, 8, 6), 1).unwrap();
        assert_eq!(full.get(0, 0), 1);
        assert_eq!(full.get(7, 5), 1);
        assert_eq!(full.get(3, 3), 0);
        let dot = img.draw_rectangle(Rect::new(4, 4, 1, 1), 7).unwrap();
        assert_eq!(dot.get(4, 4), 7);

        assert!(img.draw_rectangle(Rect::new(6, 0, 4, 2), 1).is_err());
    }

    #[test]
    fn iou_basics() {
        let a = Rect::new(0, 0, 10, 10);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&Rect::new(20, 20, 5, 5)), 0.0);
        let b = Rect::new(5, 0, 10, 10);
        assert!((a.iou(&b) - 50.0 / 150.0).abs() < 1e-12);
    }
}
