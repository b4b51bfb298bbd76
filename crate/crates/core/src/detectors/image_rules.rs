//! Pixel-level rules: skin ratio and perceptual hashing for meme matching.

use image::imageops::FilterType;
use image::{DynamicImage, RgbImage};
use serde::{Deserialize, Serialize};

use super::DetectorError;

pub fn decode(bytes: &[u8]) -> Result<DynamicImage, DetectorError> {
    image::load_from_memory(bytes).map_err(|e| DetectorError::Image(e.to_string()))
}

/// RGB skin heuristic, applied per pixel.
pub fn is_skin(r: u8, g: u8, b: u8) -> bool {
    let (r, g, b) = (i32::from(r), i32::from(g), i32::from(b));
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    r > 95 && g > 40 && b > 20 && max - min > 15 && (r - g).abs() > 15 && r > g && r > b
}

/// Fraction of skin pixels in `[0, 1]`. Empty images score 0.
pub fn skin_ratio(image: &RgbImage) -> f64 {
    let total = u64::from(image.width()) * u64::from(image.height());
    if total == 0 {
        return 0.0;
    }
    let skin = image
        .pixels()
        .filter(|p| is_skin(p[0], p[1], p[2]))
        .count() as f64;
    skin / total as f64
}

pub fn detect_skin(bytes: &[u8]) -> Result<f64, DetectorError> {
    Ok(skin_ratio(&decode(bytes)?.to_rgb8()))
}

/// 64-bit difference hash: grayscale, resize to 9x8, one bit per
/// horizontally adjacent pair (left brighter than right).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PerceptualHash(pub u64);

impl PerceptualHash {
    pub fn of(image: &DynamicImage) -> Self {
        let small = image.to_luma8();
        let small = image::imageops::resize(&small, 9, 8, FilterType::Triangle);
        let mut bits = 0u64;
        for y in 0..8 {
            for x in 0..8 {
                let left = small.get_pixel(x, y)[0];
                let right = small.get_pixel(x + 1, y)[0];
                bits = (bits << 1) | u64::from(left > right);
            }
        }
        Self(bits)
    }

    pub fn distance(self, other: Self) -> u32 {
        (self.0 ^ other.0).count_ones()
    }

    pub fn to_hex(self) -> String {
        format!("{:016x}", self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        u64::from_str_radix(s.trim(), 16).ok().map(Self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    #[test]
    fn analytic_pixels() {
        assert!(is_skin(200, 120, 100));
        assert!(!is_skin(128, 128, 128));
        assert!(!is_skin(0, 0, 0));
    }

    #[test]
    fn uniform_images() {
        let skin = RgbImage::from_pixel(8, 8, Rgb([200, 120, 100]));
        assert_eq!(skin_ratio(&skin), 1.0);
        let gray = RgbImage::from_pixel(8, 8, Rgb([128, 128, 128]));
        assert_eq!(skin_ratio(&gray), 0.0);
        let black = RgbImage::new(8, 8);
        assert_eq!(skin_ratio(&black), 0.0);
    }

    #[test]
    fn undecodable_is_error() {
        assert!(detect_skin(b"not an image").is_err());
    }

    #[test]
    fn blank_hash_is_zero() {
        let white = DynamicImage::ImageRgb8(RgbImage::from_pixel(32, 32, Rgb([255, 255, 255])));
        assert_eq!(PerceptualHash::of(&white), PerceptualHash(0));
    }
}
