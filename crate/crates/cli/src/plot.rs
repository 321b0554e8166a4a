//! Minimal PNG chart rendering: line charts for loss curves and bar charts
//! with error whiskers for probe accuracies. Labels are numeric only, drawn
//! with a tiny built-in 3x5 font; series naming lives in the markdown report.

use std::path::Path;

pub const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
];

const BG: [u8; 3] = [255, 255, 255];
const AXIS: [u8; 3] = [40, 40, 40];
const GRID: [u8; 3] = [225, 225, 225];

// glyphs are 3 wide, 5 tall, row-major bits
fn glyph(ch: char) -> Option<[u8; 5]> {
    Some(match ch {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        '-' => [0b000, 0b000, 0b111, 0b000, 0b000],
        '+' => [0b000, 0b010, 0b111, 0b010, 0b000],
        'e' => [0b000, 0b111, 0b110, 0b100, 0b111],
        ' ' => [0; 5],
        _ => return None,
    })
}

pub struct Canvas {
    pub w: usize,
    pub h: usize,
    px: Vec<[u8; 3]>,
}

impl Canvas {
    pub fn new(w: usize, h: usize) -> Self {
        Self {
            w,
            h,
            px: vec![BG; w * h],
        }
    }

    fn set(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.w && (y as usize) < self.h {
            self.px[y as usize * self.w + x as usize] = c;
        }
    }

    pub fn fill_rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: [u8; 3]) {
        for y in y0.min(y1)..=y0.max(y1) {
            for x in x0.min(x1)..=x0.max(x1) {
                self.set(x, y, c);
            }
        }
    }

    pub fn line(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: [u8; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.set(x, y, c);
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

    pub fn text(&mut self, x: i64, y: i64, s: &str, c: [u8; 3], scale: i64) {
        let mut cx = x;
        for ch in s.chars() {
            if let Some(rows) = glyph(ch) {
                for (ry, row) in rows.iter().enumerate() {
                    for rx in 0..3 {
                        if row & (0b100 >> rx) != 0 {
                            self.fill_rect(
                                cx + rx as i64 * scale,
                                y + ry as i64 * scale,
                                cx + rx as i64 * scale + scale - 1,
                                y + ry as i64 * scale + scale - 1,
                                c,
                            );
                        }
                    }
                }
            }
            cx += 4 * scale;
        }
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        let mut img = image::RgbImage::new(self.w as u32, self.h as u32);
        for y in 0..self.h {
            for x in 0..self.w {
                img.put_pixel(x as u32, y as u32, image::Rgb(self.px[y * self.w + x]));
            }
        }
        img.save(path)?;
        Ok(())
    }
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if !(0.001..10000.0).contains(&a) {
        return format!("{v:.1e}");
    }
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.').to_string();
    if s.is_empty() {
        "0".into()
    } else {
        s
    }
}

struct Frame {
    x0: i64,
    y0: i64,
    x1: i64,
    y1: i64,
    xmin: f64,
    xmax: f64,
    ymin: f64,
    ymax: f64,
}

impl Frame {
    fn px(&self, x: f64) -> i64 {
        let t = (x - self.xmin) / (self.xmax - self.xmin).max(1e-30);
        self.x0 + (t * (self.x1 - self.x0) as f64).round() as i64
    }

    fn py(&self, y: f64) -> i64 {
        let t = (y - self.ymin) / (self.ymax - self.ymin).max(1e-30);
        self.y1 - (t * (self.y1 - self.y0) as f64).round() as i64
    }
}

fn draw_frame(c: &mut Canvas, f: &Frame) {
    for i in 0..=4 {
        let gx = f.x0 + (f.x1 - f.x0) * i / 4;
        let gy = f.y0 + (f.y1 - f.y0) * i / 4;
        c.line(gx, f.y0, gx, f.y1, GRID);
        c.line(f.x0, gy, f.x1, gy, GRID);
        let xv = f.xmin + (f.xmax - f.xmin) * i as f64 / 4.0;
        let yv = f.ymax - (f.ymax - f.ymin) * i as f64 / 4.0;
        c.text(gx - 10, f.y1 + 6, &fmt_tick(xv), AXIS, 1);
        c.text(4, gy - 2, &fmt_tick(yv), AXIS, 1);
    }
    c.line(f.x0, f.y0, f.x0, f.y1, AXIS);
    c.line(f.x0, f.y1, f.x1, f.y1, AXIS);
}

/// One series per entry: (points, palette color index).
pub fn line_chart(series: &[(Vec<(f64, f64)>, usize)], path: &Path) -> anyhow::Result<()> {
    let mut c = Canvas::new(640, 400);
    let pts: Vec<(f64, f64)> = series.iter().flat_map(|(p, _)| p.iter().copied()).collect();
    anyhow::ensure!(!pts.is_empty(), "line chart needs at least one point");
    let xmin = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let xmax = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let ymin = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let ymax = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let pad = ((ymax - ymin) * 0.05).max(1e-12);
    let f = Frame {
        x0: 56,
        y0: 16,
        x1: 620,
        y1: 370,
        xmin,
        xmax: if xmax > xmin { xmax } else { xmin + 1.0 },
        ymin: ymin - pad,
        ymax: ymax + pad,
    };
    draw_frame(&mut c, &f);
    for (points, color_idx) in series {
        let col = PALETTE[color_idx % PALETTE.len()];
        for pair in points.windows(2) {
            c.line(
                f.px(pair[0].0),
                f.py(pair[0].1),
                f.px(pair[1].0),
                f.py(pair[1].1),
                col,
            );
        }
        if points.len() == 1 {
            let (x, y) = points[0];
            c.fill_rect(f.px(x) - 2, f.py(y) - 2, f.px(x) + 2, f.py(y) + 2, col);
        }
    }
    c.save(path)
}

/// Bars: (value, whisker half-length, palette color index). Bars are drawn in
/// order and labeled 1..n; the caption maps labels to runs.
pub fn bar_chart(bars: &[(f64, f64, usize)], ymin: f64, ymax: f64, path: &Path) -> anyhow::Result<()> {
    anyhow::ensure!(!bars.is_empty(), "bar chart needs at least one bar");
    let mut c = Canvas::new(640, 400);
    let f = Frame {
        x0: 56,
        y0: 16,
        x1: 620,
        y1: 370,
        xmin: 0.0,
        xmax: bars.len() as f64,
        ymin,
        ymax,
    };
    draw_frame(&mut c, &f);
    let slot = (f.x1 - f.x0) / bars.len() as i64;
    for (i, &(v, whisker, color_idx)) in bars.iter().enumerate() {
        let col = PALETTE[color_idx % PALETTE.len()];
        let cx = f.x0 + slot * i as i64 + slot / 2;
        let half = (slot * 3 / 8).max(2);
        let base = f.py(ymin.max(0.0));
        c.fill_rect(cx - half, f.py(v), cx + half, base, col);
        if whisker > 0.0 {
            let (top, bot) = (f.py(v + whisker), f.py(v - whisker));
            c.line(cx, top, cx, bot, AXIS);
            c.line(cx - 4, top, cx + 4, top, AXIS);
            c.line(cx - 4, bot, cx + 4, bot, AXIS);
        }
        c.text(cx - 2, f.y1 + 14, &format!("{}", i + 1), AXIS, 1);
    }
    c.save(path)
}
