//! A small deterministic PNG chart renderer (axes, ticks with numeric
//! labels, polylines, square markers, scatter points). No system fonts or
//! external renderers, so identical inputs give identical bytes.

use std::path::Path;

use image::{Rgb, RgbImage};

pub const WIDTH: u32 = 640;
pub const HEIGHT: u32 = 480;
const MARGIN_L: u32 = 56;
const MARGIN_R: u32 = 16;
const MARGIN_T: u32 = 16;
const MARGIN_B: u32 = 40;

const BG: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const GRID: Rgb<u8> = Rgb([228, 228, 228]);

/// 3x5 digit glyphs for tick labels: 0-9, '.', '-'.
const GLYPHS: [(char, [u8; 5]); 12] = [
    ('0', [0b111, 0b101, 0b101, 0b101, 0b111]),
    ('1', [0b010, 0b110, 0b010, 0b010, 0b111]),
    ('2', [0b111, 0b001, 0b111, 0b100, 0b111]),
    ('3', [0b111, 0b001, 0b111, 0b001, 0b111]),
    ('4', [0b101, 0b101, 0b111, 0b001, 0b001]),
    ('5', [0b111, 0b100, 0b111, 0b001, 0b111]),
    ('6', [0b111, 0b100, 0b111, 0b101, 0b111]),
    ('7', [0b111, 0b001, 0b010, 0b010, 0b010]),
    ('8', [0b111, 0b101, 0b111, 0b101, 0b111]),
    ('9', [0b111, 0b101, 0b111, 0b001, 0b111]),
    ('.', [0b000, 0b000, 0b000, 0b000, 0b010]),
    ('-', [0b000, 0b000, 0b111, 0b000, 0b000]),
];

/// One plotted line.
pub struct Series {
    pub points: Vec<(f64, f64)>,
    pub color: [u8; 3],
    pub markers: bool,
}

pub struct Chart {
    img: RgbImage,
    x_range: (f64, f64),
    y_range: (f64, f64),
}

impl Chart {
    pub fn new(x_range: (f64, f64), y_range: (f64, f64)) -> Self {
        let mut img = RgbImage::new(WIDTH, HEIGHT);
        for p in img.pixels_mut() {
            *p = BG;
        }
        let mut chart = Chart { img, x_range: pad(x_range), y_range: pad(y_range) };
        chart.draw_frame();
        chart
    }

    /// Fit ranges to a set of series.
    pub fn fit(series: &[Series]) -> Self {
        let mut xs = (f64::INFINITY, f64::NEG_INFINITY);
        let mut ys = (f64::INFINITY, f64::NEG_INFINITY);
        for s in series {
            for &(x, y) in &s.points {
                xs = (xs.0.min(x), xs.1.max(x));
                ys = (ys.0.min(y), ys.1.max(y));
            }
        }
        if !xs.0.is_finite() {
            xs = (0.0, 1.0);
        }
        if !ys.0.is_finite() {
            ys = (0.0, 1.0);
        }
        Chart::new(xs, ys)
    }

    fn to_px(&self, x: f64, y: f64) -> (i64, i64) {
        let (x0, x1) = self.x_range;
        let (y0, y1) = self.y_range;
        let w = (WIDTH - MARGIN_L - MARGIN_R) as f64;
        let h = (HEIGHT - MARGIN_T - MARGIN_B) as f64;
        let px = MARGIN_L as f64 + (x - x0) / (x1 - x0).max(1e-12) * w;
        let py = (HEIGHT - MARGIN_B) as f64 - (y - y0) / (y1 - y0).max(1e-12) * h;
        (px.round() as i64, py.round() as i64)
    }

    fn put(&mut self, x: i64, y: i64, color: Rgb<u8>) {
        if x >= 0 && y >= 0 && (x as u32) < WIDTH && (y as u32) < HEIGHT {
            self.img.put_pixel(x as u32, y as u32, color);
        }
    }

    fn draw_frame(&mut self) {
        // gridlines and ticks: 5 divisions per axis
        for i in 0..=5 {
            let fx = self.x_range.0 + (self.x_range.1 - self.x_range.0) * i as f64 / 5.0;
            let fy = self.y_range.0 + (self.y_range.1 - self.y_range.0) * i as f64 / 5.0;
            let (px, _) = self.to_px(fx, self.y_range.0);
            let (_, py) = self.to_px(self.x_range.0, fy);
            for y in MARGIN_T..(HEIGHT - MARGIN_B) {
                self.put(px, y as i64, GRID);
            }
            for x in MARGIN_L..(WIDTH - MARGIN_R) {
                self.put(x as i64, py, GRID);
            }
            self.draw_label(&format_tick(fx), px - 8, (HEIGHT - MARGIN_B + 8) as i64);
            self.draw_label(&format_tick(fy), MARGIN_L as i64 - 40, py - 2);
        }
        // axes
        for x in MARGIN_L..(WIDTH - MARGIN_R) {
            self.put(x as i64, (HEIGHT - MARGIN_B) as i64, AXIS);
        }
        for y in MARGIN_T..(HEIGHT - MARGIN_B) {
            self.put(MARGIN_L as i64, y as i64, AXIS);
        }
    }

    fn draw_label(&mut self, text: &str, x: i64, y: i64) {
        let mut cx = x;
        for ch in text.chars() {
            if let Some((_, glyph)) = GLYPHS.iter().find(|(g, _)| *g == ch) {
                for (row, bits) in glyph.iter().enumerate() {
                    for col in 0..3 {
                        if bits >> (2 - col) & 1 == 1 {
                            self.put(cx + col as i64, y + row as i64, AXIS);
                        }
                    }
                }
            }
            cx += 4;
        }
    }

    pub fn line(&mut self, series: &Series) {
        let color = Rgb(series.color);
        let px: Vec<(i64, i64)> = series.points.iter().map(|&(x, y)| self.to_px(x, y)).collect();
        for pair in px.windows(2) {
            self.segment(pair[0], pair[1], color);
        }
        if series.markers {
            for &(x, y) in &px {
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        self.put(x + dx, y + dy, color);
                    }
                }
            }
        }
    }

    pub fn dot(&mut self, x: f64, y: f64, color: [u8; 3]) {
        let (px, py) = self.to_px(x, y);
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                if dx.abs() + dy.abs() <= 1 {
                    self.put(px + dx, py + dy, Rgb(color));
                }
            }
        }
    }

    fn segment(&mut self, a: (i64, i64), b: (i64, i64), color: Rgb<u8>) {
        // Bresenham
        let (mut x0, mut y0) = a;
        let (x1, y1) = b;
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            self.put(x0, y0, color);
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }

    pub fn save(&self, path: &Path) -> image::ImageResult<()> {
        self.img.save(path)
    }
}

fn pad(range: (f64, f64)) -> (f64, f64) {
    let (lo, hi) = range;
    if (hi - lo).abs() < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = (hi - lo) * 0.05;
        (lo - pad, hi + pad)
    }
}

fn format_tick(v: f64) -> String {
    if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

/// A fixed distinguishable palette for series/category coloring.
pub const PALETTE: [[u8; 3]; 10] = [
    [214, 39, 40],
    [31, 119, 180],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
    [188, 189, 34],
    [23, 190, 207],
];
