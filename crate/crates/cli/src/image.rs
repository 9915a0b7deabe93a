//! Binary PPM (P6) heatmaps and line charts.
//!
//! Colormap ("hot"): for `t ∈ [0, 1]`,
//! `r = 255·clamp(3t)`, `g = 255·clamp(3t − 1)`, `b = 255·clamp(3t − 2)`,
//! rounded to nearest. Every channel is non-decreasing in `t`; `t = 0` is
//! black and `t = 1` is white.

use std::path::Path;

use crate::error::{CliError, Result};

pub fn hot(t: f64) -> [u8; 3] {
    let t = if t.is_nan() { 0.0 } else { t.clamp(0.0, 1.0) };
    let ch = |x: f64| (255.0 * x.clamp(0.0, 1.0)).round() as u8;
    [ch(3.0 * t), ch(3.0 * t - 1.0), ch(3.0 * t - 2.0)]
}

/// Value range mapped onto the colormap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scale {
    /// Minimum and maximum of the data.
    Auto,
    Fixed { lo: f64, hi: f64 },
}

/// RGB raster with P6 encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct Pixmap {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Pixmap {
    pub fn filled(width: usize, height: usize, colour: [u8; 3]) -> Self {
        Self { width, height, rgb: colour.repeat(width * height) }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    fn put(&mut self, x: usize, y: usize, c: [u8; 3]) {
        if x < self.width && y < self.height {
            let i = 3 * (y * self.width + x);
            self.rgb[i..i + 3].copy_from_slice(&c);
        }
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.rgb);
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ppm()).map_err(|e| CliError::io(path, e))
    }
}

/// Renders a row-major `rows × cols` matrix, `cell` pixels per entry.
pub fn heatmap(values: &[f64], rows: usize, cols: usize, scale: Scale, cell: usize) -> Result<Pixmap> {
    if rows == 0 || cols == 0 || values.len() != rows * cols || cell == 0 {
        return Err(CliError::Image(format!("{} values for a {rows}×{cols} heatmap", values.len())));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(CliError::Image("heatmap values must be finite".into()));
    }
    let (lo, hi) = match scale {
        Scale::Auto => values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v))),
        Scale::Fixed { lo, hi } => (lo, hi),
    };
    let span = hi - lo;
    let mut img = Pixmap::filled(cols * cell, rows * cell, [0; 3]);
    for r in 0..rows {
        for c in 0..cols {
            let t = if span > 0.0 { (values[r * cols + c] - lo) / span } else { 0.0 };
            let colour = hot(t);
            for y in r * cell..(r + 1) * cell {
                for x in c * cell..(c + 1) * cell {
                    img.put(x, y, colour);
                }
            }
        }
    }
    Ok(img)
}

pub fn write_heatmap(path: &Path, values: &[f64], rows: usize, cols: usize, scale: Scale, cell: usize) -> Result<()> {
    heatmap(values, rows, cols, scale, cell)?.write(path)
}

const SERIES: [[u8; 3]; 4] = [[200, 40, 40], [40, 90, 200], [30, 150, 60], [150, 60, 170]];

/// Line chart of one or more equally long series on a white background,
/// `dx` pixels between samples. A grey baseline marks zero when in range.
pub fn line_chart(series: &[Vec<f64>], dx: usize, height: usize) -> Result<Pixmap> {
    let len = series.first().map_or(0, Vec::len);
    if len == 0 || series.iter().any(|s| s.len() != len) || height < 4 || dx == 0 {
        return Err(CliError::Image("line chart needs non-empty series of equal length".into()));
    }
    let all = series.iter().flatten().copied();
    if all.clone().any(|v| !v.is_finite()) {
        return Err(CliError::Image("chart values must be finite".into()));
    }
    let (lo, hi) = all.fold((0.0f64, 0.0f64), |(a, b), v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let pad = 4;
    let width = 2 * pad + dx * (len - 1) + 1;
    let plot_h = height - 2 * pad;
    let y_of = |v: f64| pad + ((hi - v) / span * (plot_h - 1) as f64).round() as usize;
    let mut img = Pixmap::filled(width, height, [255; 3]);
    let zero = y_of(0.0);
    for x in 0..width {
        img.put(x, zero, [200; 3]);
    }
    for (k, s) in series.iter().enumerate() {
        let colour = SERIES[k % SERIES.len()];
        for i in 0..len {
            let (x, y) = (pad + i * dx, y_of(s[i]));
            for oy in y.saturating_sub(1)..=y + 1 {
                for ox in x.saturating_sub(1)..=x + 1 {
                    img.put(ox, oy, colour);
                }
            }
            if i + 1 < len {
                let (x1, y1) = (pad + (i + 1) * dx, y_of(s[i + 1]));
                let steps = dx.max(y.abs_diff(y1)).max(1);
                for j in 0..=steps {
                    let f = j as f64 / steps as f64;
                    let px = x as f64 + f * (x1 as f64 - x as f64);
                    let py = y as f64 + f * (y1 as f64 - y as f64);
                    img.put(px.round() as usize, py.round() as usize, colour);
                }
            }
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colormap_is_monotone_with_fixed_endpoints() {
        assert_eq!(hot(0.0), [0, 0, 0]);
        assert_eq!(hot(1.0), [255, 255, 255]);
        let mut prev = hot(0.0);
        for i in 1..=1000 {
            let c = hot(i as f64 / 1000.0);
            assert!((0..3).all(|k| c[k] >= prev[k]));
            prev = c;
        }
    }

    #[test]
    fn ppm_header() {
        let img = heatmap(&[0.0, 1.0], 1, 2, Scale::Auto, 2).unwrap();
        let bytes = img.to_ppm();
        assert!(bytes.starts_with(b"P6\n4 2\n255\n"));
        assert_eq!(bytes.len(), 11 + 4 * 2 * 3);
    }

    #[test]
    fn chart_rejects_ragged_series() {
        assert!(line_chart(&[vec![1.0, 2.0], vec![1.0]], 10, 50).is_err());
        let img = line_chart(&[vec![0.0, 1.0, 0.5]], 10, 50).unwrap();
        assert_eq!(img.width, 29);
    }
}
