use crate::pipeline::BoundingBox;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Bilinear resample of region `b` of a `[C, H, W]` image onto an
/// `out_h x out_w` grid. Output pixel centres map to evenly spaced points
/// inside the box; samples outside the image clamp to the border. A box
/// with integer corners and the output's size reproduces the crop exactly.
pub fn crop_warp(image: &Tensor, b: &BoundingBox, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [c, h, w] = *image.shape() else {
        return Err(Error::invalid(format!("crop_warp expects [C,H,W], got {:?}", image.shape())));
    };
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::invalid("crop_warp needs non-empty input and output"));
    }
    let b = b
        .clamp(w as f64, h as f64)
        .map_err(|_| Error::invalid(format!("box {b:?} is empty inside the {w}x{h} image")))?;
    if b.width() < 1.0 || b.height() < 1.0 {
        return Err(Error::invalid(format!("box {b:?} is degenerate after clamping")));
    }
    let (sy, sx) = (b.height() / out_h as f64, b.width() / out_w as f64);
    let taps = |start: f64, scale: f64, n: usize, limit: usize| -> Vec<(usize, usize, f64)> {
        (0..n)
            .map(|o| {
                let p = (start + (o as f64 + 0.5) * scale - 0.5).clamp(0.0, (limit - 1) as f64);
                let lo = p.floor() as usize;
                let hi = (lo + 1).min(limit - 1);
                (lo, hi, p - lo as f64)
            })
            .collect()
    };
    let ys = taps(b.y1, sy, out_h, h);
    let xs = taps(b.x1, sx, out_w, w);
    let src = image.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

/// Whole-image resample.
pub fn resize(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [_, h, w] = *image.shape() else {
        return Err(Error::invalid("resize expects [C,H,W]"));
    };
    crop_warp(image, &BoundingBox::new(0.0, 0.0, w as f64, h as f64)?, out_h, out_w)
}
