//! Binary PPM renders of point maps, confidence maps and top-down views.

use std::path::Path;

use crate::boxcodec::Box3D;
use crate::error::{Error, Result};
use crate::pointmap::{Point3, PointMap};

pub type Rgb = [u8; 3];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Row-major, top row first.
    pub pixels: Vec<Rgb>,
}

impl Image {
    pub fn new(width: usize, height: usize, fill: Rgb) -> Self {
        Self {
            width,
            height,
            pixels: vec![fill; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        self.pixels[y * self.width + x]
    }

    fn put(&mut self, x: i64, y: i64, c: Rgb) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.pixels[y as usize * self.width + x as usize] = c;
        }
    }

    /// Bresenham line, clipped to the image.
    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.put(x, y, c);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.reserve(self.pixels.len() * 3);
        for p in &self.pixels {
            out.extend_from_slice(p);
        }
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }
}

fn gray(v: u8) -> Rgb {
    [v, v, v]
}

/// The `d` channel as a W x H grayscale image with the highest elevation row
/// on top. Near returns are bright; empty cells are black and every occupied
/// cell is at least 1.
pub fn render_depth(map: &PointMap) -> Image {
    let (h, w) = (map.rows(), map.cols());
    let dmax = map.cells().iter().filter(|c| c.occupied()).map(|c| c.d).fold(0.0, f64::max);
    let mut img = Image::new(w, h, gray(0));
    for r in 0..h {
        for c in 0..w {
            let cell = map.cell(r, c);
            if cell.occupied() {
                let t = if dmax > 0.0 { (cell.d / dmax).clamp(0.0, 1.0) } else { 0.0 };
                img.pixels[(h - 1 - r) * w + c] = gray(255 - (254.0 * t).round() as u8);
            }
        }
    }
    img
}

/// Vehicle probability per cell (row-major, bottom row first) as a W x H
/// grayscale image, top row the highest elevation.
pub fn render_confidence(probability: &[f64], rows: usize, cols: usize) -> Result<Image> {
    if probability.len() != rows * cols {
        return Err(Error::shape(
            "render",
            format!("{} probabilities for a {rows}x{cols} map", probability.len()),
        ));
    }
    let mut img = Image::new(cols, rows, gray(0));
    for r in 0..rows {
        for c in 0..cols {
            let p = probability[r * cols + c].clamp(0.0, 1.0);
            img.pixels[(rows - 1 - r) * cols + c] = gray((255.0 * p).round() as u8);
        }
    }
    Ok(img)
}

pub const POINT_COLOR: Rgb = [160, 160, 160];
pub const TRUTH_COLOR: Rgb = [0, 220, 0];
pub const DETECTION_COLOR: Rgb = [240, 40, 40];

/// Top-down view window: `x` forward runs up the image, `y` left runs left.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BirdsEye {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub pixels_per_meter: f64,
}

impl Default for BirdsEye {
    fn default() -> Self {
        Self {
            x_range: (0.0, 60.0),
            y_range: (-30.0, 30.0),
            pixels_per_meter: 8.0,
        }
    }
}

impl BirdsEye {
    fn size(&self) -> (usize, usize) {
        let w = ((self.y_range.1 - self.y_range.0) * self.pixels_per_meter).ceil() as usize;
        let h = ((self.x_range.1 - self.x_range.0) * self.pixels_per_meter).ceil() as usize;
        (w, h)
    }

    /// Pixel of a ground-plane location.
    pub fn pixel(&self, x: f64, y: f64) -> (i64, i64) {
        let px = ((self.y_range.1 - y) * self.pixels_per_meter).floor() as i64;
        let py = ((self.x_range.1 - x) * self.pixels_per_meter).floor() as i64;
        (px, py)
    }

    pub fn render(&self, points: &[Point3], truth: &[Box3D], detections: &[Box3D]) -> Image {
        let (w, h) = self.size();
        let mut img = Image::new(w, h, gray(0));
        for p in points {
            let (x, y) = self.pixel(p.x, p.y);
            img.put(x, y, POINT_COLOR);
        }
        for (boxes, color) in [(truth, TRUTH_COLOR), (detections, DETECTION_COLOR)] {
            for b in boxes {
                let f = b.footprint();
                for i in 0..4 {
                    let a = f[i];
                    let c = f[(i + 1) % 4];
                    img.line(self.pixel(a.x, a.y), self.pixel(c.x, c.y), color);
                }
            }
        }
        img
    }
}
