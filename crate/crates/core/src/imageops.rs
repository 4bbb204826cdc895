//! Small pixel-tensor helpers: crops and resampling of `[C, H, W]` or `[H, W]`
//! arrays.

use alloc::vec;
use alloc::vec::Vec;

use crate::array::RealArray;
use crate::error::{Error, Result};
use crate::mask::BBox;

fn planes(a: &RealArray) -> Result<(usize, usize, usize)> {
    match *a.shape() {
        [c, h, w] => Ok((c, h, w)),
        [h, w] => Ok((1, h, w)),
        _ => Err(Error::shape("image tensor", a.shape(), &[0, 0, 0])),
    }
}

fn with_planes(like: &RealArray, c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<RealArray> {
    if like.ndim() == 2 {
        RealArray::new(&[h, w], data)
    } else {
        RealArray::new(&[c, h, w], data)
    }
}

/// Pixel rectangle covered by a normalized box; never empty.
pub fn box_to_pixels(b: &BBox, h: usize, w: usize) -> (usize, usize, usize, usize) {
    let px = |v: f64, n: usize| (libm::floor(v * n as f64) as usize).min(n - 1);
    let pe = |v: f64, n: usize| (libm::ceil(v * n as f64) as usize).min(n);
    let (x0, y0) = (px(b.x0, w), px(b.y0, h));
    let x1 = pe(b.x1, w).max(x0 + 1);
    let y1 = pe(b.y1, h).max(y0 + 1);
    (x0, y0, x1, y1)
}

pub fn crop(image: &RealArray, b: &BBox) -> Result<RealArray> {
    b.validate()?;
    let (c, h, w) = planes(image)?;
    let (x0, y0, x1, y1) = box_to_pixels(b, h, w);
    let (ch, cw) = (y1 - y0, x1 - x0);
    let mut out = Vec::with_capacity(c * ch * cw);
    let d = image.data();
    for p in 0..c {
        for r in y0..y1 {
            let base = p * h * w + r * w;
            out.extend_from_slice(&d[base + x0..base + x1]);
        }
    }
    with_planes(image, c, ch, cw, out)
}

/// Area-weighted resampling to `(out_h, out_w)`; exact block averaging when
/// the output divides the input.
pub fn resize_area(image: &RealArray, out_h: usize, out_w: usize) -> Result<RealArray> {
    let (c, h, w) = planes(image)?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::validation("resize target must be non-empty"));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(image.clone());
    }
    let d = image.data();
    let mut out = vec![0.0; c * out_h * out_w];
    for p in 0..c {
        for r in 0..out_h {
            let (ry0, ry1) = (r as f64 * h as f64 / out_h as f64, (r + 1) as f64 * h as f64 / out_h as f64);
            for col in 0..out_w {
                let (rx0, rx1) = (col as f64 * w as f64 / out_w as f64, (col + 1) as f64 * w as f64 / out_w as f64);
                let mut acc = 0.0;
                let mut area = 0.0;
                let sy = libm::floor(ry0) as usize;
                let sx = libm::floor(rx0) as usize;
                for y in sy..(libm::ceil(ry1) as usize).min(h) {
                    let wy = (ry1.min((y + 1) as f64) - ry0.max(y as f64)).max(0.0);
                    for x in sx..(libm::ceil(rx1) as usize).min(w) {
                        let wx = (rx1.min((x + 1) as f64) - rx0.max(x as f64)).max(0.0);
                        acc += wy * wx * d[p * h * w + y * w + x];
                        area += wy * wx;
                    }
                }
                out[p * out_h * out_w + r * out_w + col] = acc / area;
            }
        }
    }
    with_planes(image, c, out_h, out_w, out)
}

pub fn resize_nearest(image: &RealArray, out_h: usize, out_w: usize) -> Result<RealArray> {
    let (c, h, w) = planes(image)?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::validation("resize target must be non-empty"));
    }
    let d = image.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for p in 0..c {
        for r in 0..out_h {
            let y = r * h / out_h;
            for col in 0..out_w {
                out.push(d[p * h * w + y * w + col * w / out_w]);
            }
        }
    }
    with_planes(image, c, out_h, out_w, out)
}
