//! Bilinear crop-and-resize.

use ndarray::Array3;

use crate::scene_store::Image;

use super::SampleError;

/// Resize the given source rectangle to `out_size` x `out_size` with
/// bilinear interpolation (half-pixel centers, edges clamped to the rect).
///
/// Each output pixel is a convex combination of four source pixels inside
/// the rect, so outputs never leave the rect's [min, max] intensity range;
/// a full-image rect at the native size is an exact copy.
pub fn crop_and_resize(
    image: &Image,
    rect: (usize, usize, usize, usize),
    out_size: usize,
) -> Result<Image, SampleError> {
    let (x, y, w, h) = rect;
    let (img_h, img_w, ch) = image.pixels().dim();
    if out_size == 0 {
        return Err(SampleError::ZeroOutput);
    }
    if w == 0 || h == 0 || x + w > img_w || y + h > img_h {
        return Err(SampleError::RectOutOfBounds {
            x,
            y,
            w,
            h,
            img_h,
            img_w,
        });
    }

    let src = image.pixels();
    let mut out = Array3::<f32>::zeros((out_size, out_size, ch));
    let scale_y = h as f64 / out_size as f64;
    let scale_x = w as f64 / out_size as f64;

    for oy in 0..out_size {
        let sy = ((oy as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = (sy - y0 as f64) as f32;
        for ox in 0..out_size {
            let sx = ((ox as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = (sx - x0 as f64) as f32;
            for c in 0..ch {
                let p00 = src[(y + y0, x + x0, c)];
                let p01 = src[(y + y0, x + x1, c)];
                let p10 = src[(y + y1, x + x0, c)];
                let p11 = src[(y + y1, x + x1, c)];
                let top = p00 + (p01 - p00) * fx;
                let bot = p10 + (p11 - p10) * fx;
                out[(oy, ox, c)] = top + (bot - top) * fy;
            }
        }
    }
    Image::new(out).map_err(|_| SampleError::InvalidSpec("non-finite interpolation".into()))
}
