//! Dense numeric kernels behind the graph ops: im2col convolution plumbing,
//! pixel shuffling, pooling, and separable filtering.
//!
//! All kernels are plain `f64` array-in / array-out functions with no graph
//! knowledge, so they can be unit-tested directly against naive loops.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

/// Unfold `[C, H, W]` into `[C*k*k, H*W]` patch columns for a stride-1
/// convolution with symmetric zero padding `pad`.
///
/// Row `(c*k + ky)*k + kx` holds the input channel `c` shifted by
/// `(ky - pad, kx - pad)`; column index is the output pixel `y*W + x`.
pub fn im2col(x: &ArrayView3<f64>, k: usize, pad: usize) -> Array2<f64> {
    let (c_in, h, w) = x.dim();
    let mut cols = Array2::zeros((c_in * k * k, h * w));
    for ci in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let mut dst = cols.row_mut(row);
                let dy = ky as isize - pad as isize;
                let dx = kx as isize - pad as isize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    // Valid output x range so that x + dx stays inside [0, w).
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = ((w as isize - dx).min(w as isize)).max(0) as usize;
                    if x_lo >= x_hi {
                        continue;
                    }
                    let src_row = x.index_axis(ndarray::Axis(0), ci);
                    for xx in x_lo..x_hi {
                        dst[y * w + xx] = src_row[[sy as usize, (xx as isize + dx) as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add patch columns back into `[C, H, W]`.
pub fn col2im(cols: &ArrayView2<f64>, c_in: usize, h: usize, w: usize, k: usize, pad: usize) -> Array3<f64> {
    assert_eq!(cols.dim(), (c_in * k * k, h * w), "col2im shape mismatch");
    let mut x = Array3::zeros((c_in, h, w));
    for ci in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = cols.row(row);
                let dy = ky as isize - pad as isize;
                let dx = kx as isize - pad as isize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = ((w as isize - dx).min(w as isize)).max(0) as usize;
                    for xx in x_lo..x_hi {
                        x[[ci, sy as usize, (xx as isize + dx) as usize]] += src[y * w + xx];
                    }
                }
            }
        }
    }
    x
}

/// `[C, H, W] -> [C*r*r, H/r, W/r]` rearrangement (space to depth).
///
/// Output channel `c*r*r + dy*r + dx` at `(y, x)` reads input channel `c`
/// at `(y*r + dy, x*r + dx)`.
pub fn space_to_depth(x: &ArrayView3<f64>, r: usize) -> Array3<f64> {
    let (c, h, w) = x.dim();
    assert!(h % r == 0 && w % r == 0, "space_to_depth: {h}x{w} not divisible by {r}");
    let (ho, wo) = (h / r, w / r);
    let mut out = Array3::zeros((c * r * r, ho, wo));
    for ci in 0..c {
        for dy in 0..r {
            for dx in 0..r {
                let co = ci * r * r + dy * r + dx;
                for y in 0..ho {
                    for x_ in 0..wo {
                        out[[co, y, x_]] = x[[ci, y * r + dy, x_ * r + dx]];
                    }
                }
            }
        }
    }
    out
}

/// Inverse of [`space_to_depth`]: `[C*r*r, H, W] -> [C, H*r, W*r]`.
pub fn depth_to_space(x: &ArrayView3<f64>, r: usize) -> Array3<f64> {
    let (c_in, h, w) = x.dim();
    assert!(c_in % (r * r) == 0, "depth_to_space: {c_in} channels not divisible by {}", r * r);
    let c = c_in / (r * r);
    let mut out = Array3::zeros((c, h * r, w * r));
    for ci in 0..c {
        for dy in 0..r {
            for dx in 0..r {
                let csrc = ci * r * r + dy * r + dx;
                for y in 0..h {
                    for x_ in 0..w {
                        out[[ci, y * r + dy, x_ * r + dx]] = x[[csrc, y, x_]];
                    }
                }
            }
        }
    }
    out
}

/// Non-overlapping `k x k` average pooling of `[C, H, W]`.
pub fn avg_pool(x: &ArrayView3<f64>, k: usize) -> Array3<f64> {
    let (c, h, w) = x.dim();
    assert!(h % k == 0 && w % k == 0, "avg_pool: {h}x{w} not divisible by {k}");
    let (ho, wo) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    let mut out = Array3::zeros((c, ho, wo));
    for ci in 0..c {
        for y in 0..ho {
            for x_ in 0..wo {
                let mut s = 0.0;
                for dy in 0..k {
                    for dx in 0..k {
                        s += x[[ci, y * k + dy, x_ * k + dx]];
                    }
                }
                out[[ci, y, x_]] = s * inv;
            }
        }
    }
    out
}

/// Spread pooled gradients back uniformly over each `k x k` window.
pub fn avg_pool_backward(grad: &ArrayView3<f64>, k: usize) -> Array3<f64> {
    let (c, ho, wo) = grad.dim();
    let inv = 1.0 / (k * k) as f64;
    let mut out = Array3::zeros((c, ho * k, wo * k));
    for ci in 0..c {
        for y in 0..ho {
            for x_ in 0..wo {
                let g = grad[[ci, y, x_]] * inv;
                for dy in 0..k {
                    for dx in 0..k {
                        out[[ci, y * k + dy, x_ * k + dx]] = g;
                    }
                }
            }
        }
    }
    out
}

/// Separable symmetric filtering with *valid* boundaries, per channel:
/// `[C, H, W] -> [C, H - t + 1, W - t + 1]` where `t = taps.len()`.
pub fn separable_filter_valid(x: &ArrayView3<f64>, taps: &[f64]) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let t = taps.len();
    assert!(h >= t && w >= t, "separable_filter_valid: input {h}x{w} smaller than kernel {t}");
    let (ho, wo) = (h - t + 1, w - t + 1);
    let mut rows = Array3::zeros((c, h, wo));
    for ci in 0..c {
        for y in 0..h {
            for xo in 0..wo {
                let mut s = 0.0;
                for (i, tap) in taps.iter().enumerate() {
                    s += tap * x[[ci, y, xo + i]];
                }
                rows[[ci, y, xo]] = s;
            }
        }
    }
    let mut out = Array3::zeros((c, ho, wo));
    for ci in 0..c {
        for yo in 0..ho {
            for xo in 0..wo {
                let mut s = 0.0;
                for (i, tap) in taps.iter().enumerate() {
                    s += tap * rows[[ci, yo + i, xo]];
                }
                out[[ci, yo, xo]] = s;
            }
        }
    }
    out
}

/// Adjoint of [`separable_filter_valid`] for a symmetric kernel: scatter the
/// output gradient back onto the padded input extent.
pub fn separable_filter_valid_backward(grad: &ArrayView3<f64>, taps: &[f64], h: usize, w: usize) -> Array3<f64> {
    let (c, ho, wo) = grad.dim();
    let t = taps.len();
    assert_eq!((ho, wo), (h - t + 1, w - t + 1), "filter backward shape mismatch");
    let mut out = Array3::zeros((c, h, w));
    for ci in 0..c {
        for yo in 0..ho {
            for xo in 0..wo {
                let g = grad[[ci, yo, xo]];
                if g == 0.0 {
                    continue;
                }
                for (i, ti) in taps.iter().enumerate() {
                    for (j, tj) in taps.iter().enumerate() {
                        out[[ci, yo + i, xo + j]] += g * ti * tj;
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn naive_conv(x: &Array3<f64>, w: &ndarray::Array4<f64>, pad: usize) -> Array3<f64> {
        let (c_in, h, ww) = x.dim();
        let (c_out, c_in2, k, _) = w.dim();
        assert_eq!(c_in, c_in2);
        let mut y = Array3::zeros((c_out, h, ww));
        for co in 0..c_out {
            for yy in 0..h {
                for xx in 0..ww {
                    let mut s = 0.0;
                    for ci in 0..c_in {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = yy as isize + ky as isize - pad as isize;
                                let sx = xx as isize + kx as isize - pad as isize;
                                if sy >= 0 && sy < h as isize && sx >= 0 && sx < ww as isize {
                                    s += w[[co, ci, ky, kx]] * x[[ci, sy as usize, sx as usize]];
                                }
                            }
                        }
                    }
                    y[[co, yy, xx]] = s;
                }
            }
        }
        y
    }

    fn ramp(c: usize, h: usize, w: usize) -> Array3<f64> {
        Array3::from_shape_fn((c, h, w), |(ci, y, x)| {
            ((ci * 31 + y * 7 + x * 3) % 17) as f64 * 0.21 - 1.3
        })
    }

    #[test]
    fn im2col_matches_naive_convolution() {
        let x = ramp(3, 6, 5);
        let w = ndarray::Array4::from_shape_fn((4, 3, 3, 3), |(a, b, c, d)| {
            ((a * 13 + b * 5 + c * 3 + d) % 11) as f64 * 0.1 - 0.4
        });
        let cols = im2col(&x.view(), 3, 1);
        let w2 = w.view().into_shape_with_order((4, 27)).unwrap().to_owned();
        let y2 = w2.dot(&cols);
        let y = y2.into_shape_with_order((4, 6, 5)).unwrap();
        let want = naive_conv(&x, &w, 1);
        for (a, b) in y.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)> for random x, c.
        let x = ramp(2, 5, 4);
        let cols = im2col(&x.view(), 3, 1);
        let c = Array2::from_shape_fn(cols.dim(), |(r, cc)| ((r * 7 + cc * 3) % 13) as f64 * 0.17 - 1.0);
        let lhs: f64 = (&cols * &c).sum();
        let back = col2im(&c.view(), 2, 5, 4, 3, 1);
        let rhs: f64 = (&x * &back).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn space_depth_round_trip() {
        let x = ramp(3, 6, 4);
        let d = space_to_depth(&x.view(), 2);
        assert_eq!(d.dim(), (12, 3, 2));
        let back = depth_to_space(&d.view(), 2);
        assert_eq!(back, x);
    }

    #[test]
    fn avg_pool_averages_windows() {
        let x = Array3::from_shape_fn((1, 2, 2), |(_, y, xx)| (y * 2 + xx) as f64);
        let y = avg_pool(&x.view(), 2);
        assert_eq!(y[[0, 0, 0]], 1.5);
    }

    #[test]
    fn separable_valid_matches_direct_sum() {
        let x = ramp(1, 5, 5);
        let taps = [0.25, 0.5, 0.25];
        let y = separable_filter_valid(&x.view(), &taps);
        assert_eq!(y.dim(), (1, 3, 3));
        let mut want = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                want += taps[i] * taps[j] * x[[0, 1 + i, 2 + j]];
            }
        }
        assert!((y[[0, 1, 2]] - want).abs() < 1e-12);
    }
}
