use ndarray::{Array3, ArrayView3};

/// Bilinear resize of a C×H×W image (half-pixel centers, edge clamped).
pub fn resize_bilinear(img: ArrayView3<'_, f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (c, h, w) = img.dim();
    if (h, w) == (out_h, out_w) {
        return img.to_owned();
    }
    let axis = |src_len: usize, dst_len: usize| -> Vec<(usize, usize, f32)> {
        let scale = src_len as f32 / dst_len as f32;
        (0..dst_len)
            .map(|d| {
                let pos = ((d as f32 + 0.5) * scale - 0.5).max(0.0);
                let lo = (pos.floor() as usize).min(src_len - 1);
                let hi = (lo + 1).min(src_len - 1);
                (lo, hi, pos - lo as f32)
            })
            .collect()
    };
    let ys = axis(h, out_h);
    let xs = axis(w, out_w);
    let mut out = Array3::zeros((c, out_h, out_w));
    for ch in 0..c {
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = img[[ch, y0, x0]] * (1.0 - fx) + img[[ch, y0, x1]] * fx;
                let bot = img[[ch, y1, x0]] * (1.0 - fx) + img[[ch, y1, x1]] * fx;
                out[[ch, oy, ox]] = (top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0);
            }
        }
    }
    out
}
