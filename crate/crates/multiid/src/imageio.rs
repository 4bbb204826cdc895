//! 8-bit RGB PNG ⇄ `[3, H, W]` pixel tensors in `[0, 1]`.

use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, RgbImage};
use multiid_core::RealArray;

use crate::error::{read, write, AppError, AppResult};

pub fn decode_png(bytes: &[u8]) -> AppResult<RealArray> {
    let img = image::load_from_memory(bytes)
        .map_err(|e| AppError::Validation(format!("cannot decode image: {e}")))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = f64::from(px[c]) / 255.0;
        }
    }
    Ok(RealArray::new(&[3, h, w], data)?)
}

pub fn load_rgb(path: &Path) -> AppResult<RealArray> {
    decode_png(&read(path)?).map_err(|e| match e {
        AppError::Validation(m) => AppError::Validation(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Quantizes to 8 bits (clamped, rounded) and encodes as PNG.
pub fn encode_png(image: &RealArray) -> AppResult<Vec<u8>> {
    let &[3, h, w] = image.shape() else {
        return Err(AppError::Validation(format!("expected a [3, H, W] image, got {:?}", image.shape())));
    };
    let d = image.data();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |c: usize| (d[c * h * w + y as usize * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([at(0), at(1), at(2)])
    });
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| AppError::Validation(format!("cannot encode PNG: {e}")))?;
    Ok(out.into_inner())
}

pub fn save_png(path: &Path, image: &RealArray) -> AppResult<Vec<u8>> {
    let bytes = encode_png(image)?;
    write(path, &bytes)?;
    Ok(bytes)
}

/// Pixel size of a PNG without decoding the data.
pub fn dimensions(path: &Path) -> AppResult<(u32, u32)> {
    image::image_dimensions(path).map_err(|e| AppError::Validation(format!("{}: {e}", path.display())))
}
