//! Minimal marker renderer: a filled disc with the label drawn in a 3×5
//! bitmap font.

use std::io::Cursor;

use image::{ImageFormat, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::{InstructError, MarkedImageSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarkerStyle {
    pub radius: u32,
    pub fill: [u8; 3],
    pub ink: [u8; 3],
    /// Pixels per font cell.
    pub scale: u32,
}

impl Default for MarkerStyle {
    fn default() -> Self {
        Self { radius: 12, fill: [255, 230, 0], ink: [0, 0, 0], scale: 3 }
    }
}

// Rows top to bottom, 3 bits each, most significant bit leftmost.
const DIGITS: [[u8; 5]; 10] = [
    [0b111, 0b101, 0b101, 0b101, 0b111],
    [0b010, 0b110, 0b010, 0b010, 0b111],
    [0b111, 0b001, 0b111, 0b100, 0b111],
    [0b111, 0b001, 0b111, 0b001, 0b111],
    [0b101, 0b101, 0b111, 0b001, 0b001],
    [0b111, 0b100, 0b111, 0b001, 0b111],
    [0b111, 0b100, 0b111, 0b101, 0b111],
    [0b111, 0b001, 0b010, 0b010, 0b010],
    [0b111, 0b101, 0b111, 0b101, 0b111],
    [0b111, 0b101, 0b111, 0b001, 0b111],
];

fn put(img: &mut RgbImage, x: i64, y: i64, color: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(color));
    }
}

/// Draw every marker onto `base`, or onto a mid-grey canvas of the given
/// size. Markers are drawn in label order so later labels sit on top.
pub fn rasterize_markers(spec: &MarkedImageSpec, base: Option<RgbImage>, width: u32, height: u32, style: &MarkerStyle) -> RgbImage {
    let mut img = base.unwrap_or_else(|| RgbImage::from_pixel(width, height, Rgb([128, 128, 128])));
    let r = style.radius as i64;
    let s = style.scale.max(1) as i64;
    for m in &spec.markers {
        let (cx, cy) = (m.center.0.round() as i64, m.center.1.round() as i64);
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy <= r * r {
                    put(&mut img, cx + dx, cy + dy, style.fill);
                }
            }
        }
        let text = m.label.to_string();
        let glyph_w = 3 * s;
        let total_w = text.len() as i64 * glyph_w + (text.len() as i64 - 1) * s;
        let x0 = cx - total_w / 2;
        let y0 = cy - 5 * s / 2;
        for (k, ch) in text.bytes().enumerate() {
            let rows = DIGITS[(ch - b'0') as usize];
            let gx = x0 + k as i64 * (glyph_w + s);
            for (row, bits) in rows.iter().enumerate() {
                for col in 0..3 {
                    if bits & (0b100 >> col) != 0 {
                        for py in 0..s {
                            for px in 0..s {
                                put(&mut img, gx + col * s + px, y0 + row as i64 * s + py, style.ink);
                            }
                        }
                    }
                }
            }
        }
    }
    img
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>, InstructError> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).map_err(|e| InstructError::Image(e.to_string()))?;
    Ok(buf.into_inner())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoundingBox;
    use crate::instruct::{place_markers, RegionAnnotation};

    #[test]
    fn draws_disc_and_digits() {
        let regions = [
            RegionAnnotation::new(BoundingBox::new(0., 0., 40., 40.).unwrap(), "a"),
            RegionAnnotation::new(BoundingBox::new(50., 50., 90., 90.).unwrap(), "b"),
        ];
        let spec = place_markers(1, &regions).unwrap();
        let style = MarkerStyle::default();
        let img = rasterize_markers(&spec, None, 100, 100, &style);
        assert_eq!(img.get_pixel(0, 99).0, [128, 128, 128]);
        // disc edge and digit ink
        assert_eq!(img.get_pixel(20 + 10, 20).0, style.fill);
        let ink = (0..100u32).flat_map(|y| (0..100u32).map(move |x| (x, y))).filter(|&(x, y)| img.get_pixel(x, y).0 == style.ink).count();
        assert!(ink > 0);
        let png = encode_png(&img).unwrap();
        assert_eq!(&png[1..4], b"PNG");
        assert_eq!(png, encode_png(&rasterize_markers(&spec, None, 100, 100, &style)).unwrap());
    }

    #[test]
    fn two_digit_label_and_clipping() {
        let regions: Vec<_> = (0..10)
            .map(|i| RegionAnnotation::new(BoundingBox::new(i as f64, 0., i as f64 + 1., 1.).unwrap(), "x"))
            .collect();
        let spec = place_markers(1, &regions).unwrap();
        let img = rasterize_markers(&spec, None, 8, 8, &MarkerStyle::default());
        assert_eq!(img.dimensions(), (8, 8));
    }
}
