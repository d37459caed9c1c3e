//! im2col / col2im kernels shared by the convolution and transposed
//! convolution ops.

use super::Scalar;

/// Unpacks `input` (C×H×W, one batch item) into a (C·k·k)×(out_h·out_w)
/// column matrix for a k×k convolution with the given stride and padding.
#[allow(clippy::too_many_arguments)]
pub fn im2col<S: Scalar>(
    input: &[S],
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
    col: &mut [S],
) {
    debug_assert_eq!(input.len(), channels * h * w);
    debug_assert_eq!(col.len(), channels * k * k * out_h * out_w);
    let out_area = out_h * out_w;
    for c in 0..channels {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * out_area;
                for oy in 0..out_h {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut col[row + oy * out_w..row + (oy + 1) * out_w];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(S::ZERO);
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            S::ZERO
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds the column matrix back into a C×H×W
/// image buffer (which the caller must have zeroed).
#[allow(clippy::too_many_arguments)]
pub fn col2im<S: Scalar>(
    col: &[S],
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
    image: &mut [S],
) {
    debug_assert_eq!(image.len(), channels * h * w);
    debug_assert_eq!(col.len(), channels * k * k * out_h * out_w);
    let out_area = out_h * out_w;
    for c in 0..channels {
        let plane = &mut image[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * out_area;
                for oy in 0..out_h {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &col[row + oy * out_w..row + (oy + 1) * out_w];
                    let dst_row = iy as usize * w;
                    for (ox, s) in src.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[dst_row + ix as usize] += *s;
                        }
                    }
                }
            }
        }
    }
}

pub fn conv_out_size(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn im2col_col2im_adjoint() {
        // <im2col(x), c> == <x, col2im(c)> for random x, c — the pair must be
        // exact adjoints for conv gradients to be correct.
        let mut rng = crate::rng::Rng::seed_from_u64(21);
        for &(h, w, k, stride, pad) in &[
            (5usize, 7usize, 3usize, 1usize, 1usize),
            (6, 6, 3, 2, 1),
            (8, 5, 1, 1, 0),
            (9, 9, 7, 1, 0),
        ] {
            let channels = 3;
            let out_h = conv_out_size(h, k, stride, pad);
            let out_w = conv_out_size(w, k, stride, pad);
            let x: Vec<f64> = (0..channels * h * w).map(|_| rng.normal()).collect();
            let c: Vec<f64> = (0..channels * k * k * out_h * out_w)
                .map(|_| rng.normal())
                .collect();
            let mut col = vec![0.0; c.len()];
            im2col(&x, channels, h, w, k, stride, pad, out_h, out_w, &mut col);
            let mut img = vec![0.0; x.len()];
            col2im(&c, channels, h, w, k, stride, pad, out_h, out_w, &mut img);
            let lhs: f64 = col.iter().zip(&c).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&img).map(|(a, b)| a * b).sum();
            assert!(
                (lhs - rhs).abs() < 1e-9,
                "adjoint mismatch: {lhs} vs {rhs} (h={h},w={w},k={k},s={stride},p={pad})"
            );
        }
    }
}
