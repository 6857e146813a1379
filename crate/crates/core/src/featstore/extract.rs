//! Deterministic toy feature extractor.
//!
//! Crops a region with a fixed pixel context border, reflect-pads outside the
//! image, area-averages onto a square grid, subtracts the mean and
//! L2-normalizes.

use crate::error::{Error, Result};
use crate::featstore::raster::GrayImage;
use crate::geometry::BBox;

/// Context border added around every region, in pixels.
pub const CONTEXT_PIXELS: f64 = 16.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Extracted {
    pub values: Vec<f32>,
    /// Set when the crop was constant and the vector is the all-zero sentinel.
    pub degenerate: bool,
}

/// Symmetric reflection of an integer index into `[0, n)`.
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Overlap weights of the pixels covering `[start, start + len)` where
/// `start` is relative to pixel `base`. Returns `(first_pixel, weights)`.
fn cell_weights(base: i64, start: f64, len: f64) -> (i64, Vec<f64>) {
    let end = start + len;
    let first = start.floor() as i64;
    let last = (end.ceil() as i64).max(first + 1);
    let weights = (first..last)
        .map(|p| {
            let lo = (p as f64).max(start);
            let hi = ((p + 1) as f64).min(end);
            (hi - lo).max(0.0)
        })
        .collect();
    (base + first, weights)
}

/// Extracts a `grid * grid` feature vector for `region`.
pub fn toy_extract(image: &GrayImage, region: &BBox, grid: usize, context: f64) -> Result<Extracted> {
    let (w, h) = (image.width(), image.height());
    if w == 0 || h == 0 || grid == 0 {
        return Err(Error::RegionOutsideImage);
    }
    let frame = BBox::new(0.0, 0.0, w as f64, h as f64)?;
    if region.intersection_area(&frame) <= 0.0 {
        return Err(Error::RegionOutsideImage);
    }

    let x0 = region.x_min() - context;
    let y0 = region.y_min() - context;
    let cw = (region.width() + 2.0 * context) / grid as f64;
    let ch = (region.height() + 2.0 * context) / grid as f64;
    // integer base plus fractional offset keeps weights shift-invariant
    let (bx, by) = (x0.floor(), y0.floor());
    let (ox, oy) = (x0 - bx, y0 - by);
    let cols: Vec<(i64, Vec<f64>)> = (0..grid)
        .map(|k| cell_weights(bx as i64, ox + k as f64 * cw, cw))
        .collect();
    let rows: Vec<(i64, Vec<f64>)> = (0..grid)
        .map(|k| cell_weights(by as i64, oy + k as f64 * ch, ch))
        .collect();

    let col_lo = cols[0].0;
    let col_hi = cols.last().map(|(s, v)| s + v.len() as i64).unwrap_or(col_lo);
    let span = (col_hi - col_lo) as usize;
    let col_idx: Vec<usize> = (col_lo..col_hi).map(|i| reflect(i, w)).collect();

    let mut out = vec![0f64; grid * grid];
    let mut tmp = vec![0f64; span];
    let norm = 1.0 / (cw * ch);
    for (gy, (row_start, row_w)) in rows.iter().enumerate() {
        tmp.iter_mut().for_each(|t| *t = 0.0);
        for (dj, wy) in row_w.iter().enumerate() {
            if *wy == 0.0 {
                continue;
            }
            let yy = reflect(row_start + dj as i64, h);
            let row = &image.data()[yy * w..(yy + 1) * w];
            for (t, &xi) in tmp.iter_mut().zip(&col_idx) {
                *t += wy * row[xi] as f64;
            }
        }
        for (gx, (col_start, col_w)) in cols.iter().enumerate() {
            let off = (col_start - col_lo) as usize;
            let s: f64 = col_w
                .iter()
                .zip(&tmp[off..off + col_w.len()])
                .map(|(a, b)| a * b)
                .sum();
            out[gy * grid + gx] = s * norm;
        }
    }

    let mean = out.iter().sum::<f64>() / out.len() as f64;
    out.iter_mut().for_each(|v| *v -= mean);
    let l2 = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(l2 > 1e-9) {
        return Ok(Extracted {
            values: vec![0.0; grid * grid],
            degenerate: true,
        });
    }
    Ok(Extracted {
        values: out.iter().map(|v| (v / l2) as f32).collect(),
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(w: usize, h: usize, shift: (usize, usize)) -> GrayImage {
        let mut img = GrayImage::filled(w, h, 0.0);
        for y in 0..h {
            for x in 0..w {
                let (u, v) = (x as f64 - shift.0 as f64, y as f64 - shift.1 as f64);
                let val = 0.5 + 0.25 * (0.37 * u).sin() * (0.21 * v + 0.3 * u).cos();
                img.set(x, y, val as f32);
            }
        }
        img
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 0);
        assert_eq!(reflect(-2, 5), 1);
        assert_eq!(reflect(5, 5), 4);
        assert_eq!(reflect(6, 5), 3);
        assert_eq!(reflect(2, 5), 2);
        assert_eq!(reflect(-11, 5), 0);
    }

    #[test]
    fn constant_image_is_degenerate() {
        let img = GrayImage::filled(64, 64, 0.4);
        let r = BBox::new(10., 10., 40., 40.).unwrap();
        let e = toy_extract(&img, &r, 16, CONTEXT_PIXELS).unwrap();
        assert!(e.degenerate);
        assert_eq!(e.values.len(), 256);
        assert!(e.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic_and_unit_norm() {
        let img = textured(80, 70, (0, 0));
        let r = BBox::new(12.3, 7.9, 50.2, 44.4).unwrap();
        let a = toy_extract(&img, &r, 16, CONTEXT_PIXELS).unwrap();
        let b = toy_extract(&img, &r, 16, CONTEXT_PIXELS).unwrap();
        assert_eq!(a, b);
        let n: f64 = a.values.iter().map(|&v| v as f64 * v as f64).sum();
        assert!((n - 1.0).abs() < 1e-5);
        let mean: f64 = a.values.iter().map(|&v| v as f64).sum::<f64>() / 256.0;
        assert!(mean.abs() < 1e-6);
    }

    #[test]
    fn translation_equivariance() {
        // content shifted by (7, 5) and region shifted by the same amount
        let a_img = textured(120, 120, (0, 0));
        let b_img = textured(120, 120, (7, 5));
        let ra = BBox::new(30., 25., 61., 58.).unwrap();
        let rb = ra.translate(7., 5.).unwrap();
        let a = toy_extract(&a_img, &ra, 16, CONTEXT_PIXELS).unwrap();
        let b = toy_extract(&b_img, &rb, 16, CONTEXT_PIXELS).unwrap();
        assert_eq!(a.values, b.values);
        let a8 = toy_extract(&a_img, &ra, 8, CONTEXT_PIXELS).unwrap();
        let b8 = toy_extract(&b_img, &rb, 8, CONTEXT_PIXELS).unwrap();
        assert_eq!(a8.values, b8.values);
    }

    #[test]
    fn region_outside_image_rejected() {
        let img = textured(32, 32, (0, 0));
        let r = BBox::new(40., 40., 60., 60.).unwrap();
        assert!(matches!(
            toy_extract(&img, &r, 8, CONTEXT_PIXELS),
            Err(Error::RegionOutsideImage)
        ));
    }

    #[test]
    fn edge_regions_use_reflection() {
        let img = textured(40, 40, (0, 0));
        let r = BBox::new(0., 0., 40., 40.).unwrap();
        let e = toy_extract(&img, &r, 8, CONTEXT_PIXELS).unwrap();
        assert!(!e.degenerate);
        assert!(e.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn area_average_matches_brute_force() {
        // independent check: supersample each cell and average
        let img = textured(50, 50, (0, 0));
        let r = BBox::new(10., 12., 30., 28.).unwrap();
        let grid = 4;
        let got = toy_extract(&img, &r, grid, 0.0).unwrap();
        let (cw, ch) = (r.width() / grid as f64, r.height() / grid as f64);
        let ss = 200;
        let mut raw = vec![0f64; grid * grid];
        for gy in 0..grid {
            for gx in 0..grid {
                let mut s = 0.0;
                for j in 0..ss {
                    for i in 0..ss {
                        let x = r.x_min() + (gx as f64 + (i as f64 + 0.5) / ss as f64) * cw;
                        let y = r.y_min() + (gy as f64 + (j as f64 + 0.5) / ss as f64) * ch;
                        s += img.get(x.floor() as usize, y.floor() as usize) as f64;
                    }
                }
                raw[gy * grid + gx] = s / (ss * ss) as f64;
            }
        }
        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
        raw.iter_mut().for_each(|v| *v -= mean);
        let l2 = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (g, e) in got.values.iter().zip(&raw) {
            assert!((*g as f64 - e / l2).abs() < 1e-2, "{g} vs {}", e / l2);
        }
    }
}
