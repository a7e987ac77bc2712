//! Small image-processing helpers shared by the metrics, restoration, and
//! dataset paths: antialiased bicubic resampling and separable Gaussian blur.

use ndarray::Array2;

use crate::spectral::RgbImage;

/// Catmull-Rom cubic kernel (a = -0.5).
fn cubic(x: f64) -> f64 {
    let a = -0.5;
    let x = x.abs();
    if x < 1.0 {
        (a + 2.0) * x * x * x - (a + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        a * x * x * x - 5.0 * a * x * x + 8.0 * a * x - 4.0 * a
    } else {
        0.0
    }
}

/// Antialiased bicubic resample of one channel plane to `(out_h, out_w)`.
///
/// When minifying, the kernel is stretched by the scale factor so it acts as a
/// low-pass filter (the usual antialiasing treatment). Edges are clamped.
fn resample_plane(
    src: &[f64],
    src_w: usize,
    src_h: usize,
    stride: usize,
    offset: usize,
    out_w: usize,
    out_h: usize,
) -> Vec<f64> {
    let scale_x = src_w as f64 / out_w as f64;
    let scale_y = src_h as f64 / out_h as f64;
    let kx = scale_x.max(1.0);
    let ky = scale_y.max(1.0);
    let rx = (2.0 * kx).ceil() as isize;
    let ry = (2.0 * ky).ceil() as isize;

    // Horizontal pass.
    let mut tmp = vec![0.0; out_w * src_h];
    for ox in 0..out_w {
        let cx = (ox as f64 + 0.5) * scale_x - 0.5;
        let ix = cx.floor() as isize;
        let mut weights = Vec::with_capacity((2 * rx + 1) as usize);
        let mut wsum = 0.0;
        for dx in -rx..=rx {
            let sx = ix + dx;
            let w = cubic((sx as f64 - cx) / kx);
            if w != 0.0 {
                weights.push((sx.clamp(0, src_w as isize - 1) as usize, w));
                wsum += w;
            }
        }
        for y in 0..src_h {
            let mut acc = 0.0;
            for &(sx, w) in &weights {
                acc += w * src[offset + (y * src_w + sx) * stride];
            }
            tmp[y * out_w + ox] = acc / wsum;
        }
    }

    // Vertical pass.
    let mut out = vec![0.0; out_w * out_h];
    for oy in 0..out_h {
        let cy = (oy as f64 + 0.5) * scale_y - 0.5;
        let iy = cy.floor() as isize;
        let mut weights = Vec::with_capacity((2 * ry + 1) as usize);
        let mut wsum = 0.0;
        for dy in -ry..=ry {
            let sy = iy + dy;
            let w = cubic((sy as f64 - cy) / ky);
            if w != 0.0 {
                weights.push((sy.clamp(0, src_h as isize - 1) as usize, w));
                wsum += w;
            }
        }
        for ox in 0..out_w {
            let mut acc = 0.0;
            for &(sy, w) in &weights {
                acc += w * tmp[sy * out_w + ox];
            }
            out[oy * out_w + ox] = acc / wsum;
        }
    }
    out
}

/// Antialiased bicubic resample of an RGB image.
pub fn resize_rgb(img: &RgbImage, out_w: usize, out_h: usize) -> RgbImage {
    let mut out = RgbImage::zeros(out_w, out_h);
    for c in 0..3 {
        let plane = resample_plane(&img.data, img.width, img.height, 3, c, out_w, out_h);
        for (i, v) in plane.iter().enumerate() {
            out.data[i * 3 + c] = *v;
        }
    }
    out
}

/// Separable Gaussian blur with zero-fill boundary. The kernel is truncated at
/// 3 sigma and normalized to unit sum, which makes the operator symmetric, so
/// it serves as its own adjoint in gradient computations.
pub fn gaussian_blur(a: &Array2<f64>, sigma: f64) -> Array2<f64> {
    if sigma <= 0.0 {
        return a.clone();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r)
        .map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp())
        .collect();
    let ksum: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / ksum).collect();

    let (h, w) = (a.nrows(), a.ncols());
    let mut tmp = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let sx = x as isize + ki as isize - r;
                if sx >= 0 && (sx as usize) < w {
                    acc += kv * a[(y, sx as usize)];
                }
            }
            tmp[(y, x)] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let sy = y as isize + ki as isize - r;
                if sy >= 0 && (sy as usize) < h {
                    acc += kv * tmp[(sy as usize, x)];
                }
            }
            out[(y, x)] = acc;
        }
    }
    out
}
