//! `start:stop:step` value grids and the noisy-input image.

use image::{GrayImage, Luma, Rgb, RgbImage};

/// Inclusive grid; values are rounded to 12 decimals so `0:1:0.1` gives
/// exactly `0.3` rather than `0.30000000000000004`.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>, String> {
    let parts: Vec<&str> = spec.split(':').collect();
    let nums = parts
        .iter()
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("grid `{spec}`: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    let (start, stop, step) = match nums[..] {
        [v] => return Ok(vec![v]),
        [a, b, s] => (a, b, s),
        _ => return Err(format!("grid `{spec}` must be `start:stop:step` or a single value")),
    };
    if !(step > 0.0) || !start.is_finite() || !stop.is_finite() || stop < start {
        return Err(format!("grid `{spec}` needs start <= stop and a positive step"));
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize + 1;
    Ok((0..n).map(|i| ((start + i as f64 * step) * 1e12).round() / 1e12).collect())
}

/// Tiles `[rows][cols]` images of `channels×h×w` values in `[0, 1]` with a
/// one-pixel gap, each pixel magnified `scale` times.
pub enum Tiled {
    Gray(GrayImage),
    Rgb(RgbImage),
}

pub fn tile(cells: &[Vec<Vec<f32>>], channels: usize, h: usize, w: usize, scale: u32) -> Tiled {
    let rows = cells.len() as u32;
    let cols = cells.first().map_or(0, |r| r.len()) as u32;
    let (cw, ch) = (w as u32 * scale + 1, h as u32 * scale + 1);
    let (width, height) = (cols * cw + 1, rows * ch + 1);
    let byte = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let at = |r: u32, c: u32, x: u32, y: u32| -> Option<(usize, usize, usize)> {
        let (ox, oy) = (c * cw + 1, r * ch + 1);
        if x < ox || y < oy || x >= ox + w as u32 * scale || y >= oy + h as u32 * scale {
            return None;
        }
        Some((r as usize, c as usize, ((y - oy) / scale) as usize * w + ((x - ox) / scale) as usize))
    };
    let locate = |x: u32, y: u32| {
        let (c, r) = (x.saturating_sub(1) / cw, y.saturating_sub(1) / ch);
        if r < rows && c < cols {
            at(r, c, x, y)
        } else {
            None
        }
    };
    if channels == 1 {
        Tiled::Gray(GrayImage::from_fn(width, height, |x, y| match locate(x, y) {
            Some((r, c, i)) => Luma([byte(cells[r][c][i])]),
            None => Luma([255]),
        }))
    } else {
        let plane = h * w;
        Tiled::Rgb(RgbImage::from_fn(width, height, |x, y| match locate(x, y) {
            Some((r, c, i)) => {
                let v = &cells[r][c];
                Rgb([byte(v[i]), byte(v[plane + i]), byte(v[2 * plane + i])])
            }
            None => Rgb([255, 255, 255]),
        }))
    }
}
