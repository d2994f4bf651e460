//! Heatmap overlays and line plots, rendered into RGB byte buffers.
//!
//! Overlays: the instance is converted to grayscale, the map is normalised
//! by its largest absolute value and blended on top with per-pixel alpha
//! `0.6 · |v| / max|v|`. Signed maps use a red/blue diverging map with zero
//! at the midpoint (red positive, blue negative); non-negative maps use
//! inferno. An all-zero map leaves the grayscale base untouched.

use milx_core::Tensor;
use plotters::prelude::*;

use crate::error::{Error, Result};

pub const OVERLAY_ALPHA: f64 = 0.6;

/// ITU-R BT.601 luma of a channel-first RGB image, `[H * W]`.
pub fn grayscale(pixels: &Tensor) -> Vec<f64> {
    let hw = pixels.spatial_len();
    let d = pixels.data();
    if pixels.shape()[0] == 1 {
        return d.to_vec();
    }
    (0..hw).map(|p| 0.299 * d[p] + 0.587 * d[hw + p] + 0.114 * d[2 * hw + p]).collect()
}

fn heat(v: f64, max: f64, signed: bool) -> ([f64; 3], f64) {
    if max <= 0.0 {
        return ([0.0; 3], 0.0);
    }
    let u = (v / max).clamp(-1.0, 1.0);
    let c = if signed {
        colorous::RED_BLUE.eval_continuous(0.5 - 0.5 * u)
    } else {
        colorous::INFERNO.eval_continuous(u.max(0.0))
    };
    ([c.r as f64 / 255.0, c.g as f64 / 255.0, c.b as f64 / 255.0], OVERLAY_ALPHA * u.abs())
}

/// Interleaved RGB bytes of the overlay, each pixel repeated `scale` times
/// in both directions.
pub fn overlay(pixels: &Tensor, map: &Tensor, signed: bool, scale: usize) -> Result<Vec<u8>> {
    let (h, w) = (pixels.shape()[1], pixels.shape()[2]);
    if map.shape() != [h, w] {
        return Err(Error::Data(format!("map shape {:?} does not match a {h}x{w} instance", map.shape())));
    }
    let scale = scale.max(1);
    let gray = grayscale(pixels);
    let max = map.max_abs();
    let mut out = vec![0u8; h * w * scale * scale * 3];
    let row = w * scale * 3;
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let (color, a) = heat(map.data()[p], max, signed);
            let rgb: Vec<u8> = color.iter().map(|c| ((1.0 - a) * gray[p] + a * c).clamp(0.0, 1.0)).map(|v| (v * 255.0).round() as u8).collect();
            for dy in 0..scale {
                for dx in 0..scale {
                    let o = (y * scale + dy) * row + (x * scale + dx) * 3;
                    out[o..o + 3].copy_from_slice(&rgb);
                }
            }
        }
    }
    Ok(out)
}

pub const PLOT_SIZE: (u32, u32) = (480, 360);

/// One polyline of a plot.
pub struct Line {
    pub points: Vec<(f64, f64)>,
    pub color_index: usize,
}

/// Lines on a framed `x_range × y_range` canvas with a light grid at tenths.
/// There is no text; tables carry the numbers.
pub fn line_plot(lines: &[Line], x_range: (f64, f64), y_range: (f64, f64)) -> Result<Vec<u8>> {
    let (w, h) = PLOT_SIZE;
    let mut buf = vec![0u8; (w * h * 3) as usize];
    let draw = |e: String| Error::Runtime(format!("plot: {e}"));
    {
        let root = BitMapBackend::with_buffer(&mut buf, (w, h)).into_drawing_area();
        root.fill(&WHITE).map_err(|e| draw(e.to_string()))?;
        let mut chart = ChartBuilder::on(&root)
            .margin(16)
            .build_cartesian_2d(x_range.0..x_range.1, y_range.0..y_range.1)
            .map_err(|e| draw(e.to_string()))?;
        let grid = RGBColor(225, 225, 225);
        for i in 0..=10 {
            let fx = x_range.0 + (x_range.1 - x_range.0) * i as f64 / 10.0;
            let fy = y_range.0 + (y_range.1 - y_range.0) * i as f64 / 10.0;
            let style = if i == 0 || i == 10 { BLACK.stroke_width(1) } else { grid.stroke_width(1) };
            chart.draw_series(LineSeries::new([(fx, y_range.0), (fx, y_range.1)], style)).map_err(|e| draw(e.to_string()))?;
            chart.draw_series(LineSeries::new([(x_range.0, fy), (x_range.1, fy)], style)).map_err(|e| draw(e.to_string()))?;
        }
        for line in lines {
            let c = colorous::CATEGORY10[line.color_index % 10];
            chart
                .draw_series(LineSeries::new(line.points.iter().copied(), RGBColor(c.r, c.g, c.b).stroke_width(2)))
                .map_err(|e| draw(e.to_string()))?;
        }
        root.present().map_err(|e| draw(e.to_string()))?;
    }
    Ok(buf)
}

/// Confusion matrix as a grid of `cell`-pixel squares, shaded by the
/// row-normalised rate (white 0, dark blue 1). Returns RGB bytes and the side.
pub fn confusion_image(matrix: &[Vec<usize>], cell: usize) -> (Vec<u8>, usize) {
    let k = matrix.len();
    let side = k * cell;
    let mut out = vec![0u8; side * side * 3];
    for (i, row) in matrix.iter().enumerate() {
        let total: usize = row.iter().sum();
        for (j, &n) in row.iter().enumerate() {
            let rate = if total == 0 { 0.0 } else { n as f64 / total as f64 };
            let c = colorous::BLUES.eval_continuous(rate);
            for y in i * cell..(i + 1) * cell {
                for x in j * cell..(j + 1) * cell {
                    let edge = y % cell == 0 || x % cell == 0;
                    let o = (y * side + x) * 3;
                    out[o..o + 3].copy_from_slice(&if edge { [128, 128, 128] } else { [c.r, c.g, c.b] });
                }
            }
        }
    }
    (out, side)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_map_gives_grayscale_base() {
        let px = Tensor::from_vec(&[3, 1, 2], vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let out = overlay(&px, &Tensor::zeros(&[1, 2]), false, 1).unwrap();
        let g0 = (0.299f64 * 255.0).round() as u8;
        let g1 = (0.587f64 * 255.0).round() as u8;
        assert_eq!(out, vec![g0, g0, g0, g1, g1, g1]);
    }

    #[test]
    fn signed_extremes_are_red_and_blue() {
        let px = Tensor::zeros(&[3, 1, 2]);
        let out = overlay(&px, &Tensor::from_vec(&[1, 2], vec![2.0, -2.0]), true, 1).unwrap();
        assert!(out[0] > out[2], "positive should lean red: {:?}", &out[..3]);
        assert!(out[5] > out[3], "negative should lean blue: {:?}", &out[3..]);
    }

    #[test]
    fn scale_repeats_pixels() {
        let px = Tensor::filled(&[3, 1, 1], 0.5);
        let out = overlay(&px, &Tensor::zeros(&[1, 1]), false, 3).unwrap();
        assert_eq!(out.len(), 27);
        assert!(out.iter().all(|&b| b == out[0]));
    }

    #[test]
    fn plot_is_deterministic() {
        let l = [Line { points: vec![(0.0, 0.0), (0.5, 0.8), (1.0, 1.0)], color_index: 0 }];
        let a = line_plot(&l, (0.0, 1.0), (0.0, 1.0)).unwrap();
        assert_eq!(a, line_plot(&l, (0.0, 1.0), (0.0, 1.0)).unwrap());
        assert!(a.iter().any(|&b| b != 255));
    }
}
