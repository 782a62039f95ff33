use super::Scalar;

/// Strides of a matrix operand in elements: (row stride, column stride).
pub type Strides = (isize, isize);

fn fits(rows: usize, cols: usize, (rs, cs): Strides, len: usize) -> bool {
    if rows == 0 || cols == 0 {
        return true;
    }
    rs >= 0 && cs >= 0 && (rows - 1) * rs as usize + (cols - 1) * (cs as usize) < len
}

/// `c = alpha * a * b + beta * c` where `a` is `m x k`, `b` is `k x n` and
/// `c` is `m x n`, each with explicit strides.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    sa: Strides,
    b: &[T],
    sb: Strides,
    beta: T,
    c: &mut [T],
    sc: Strides,
) {
    assert!(fits(m, k, sa, a.len()), "gemm: lhs out of bounds");
    assert!(fits(k, n, sb, b.len()), "gemm: rhs out of bounds");
    assert!(fits(m, n, sc, c.len()), "gemm: output out of bounds");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: all strided accesses were bounds-checked above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            sa.0,
            sa.1,
            b.as_ptr(),
            sb.0,
            sb.1,
            beta,
            c.as_mut_ptr(),
            sc.0,
            sc.1,
        )
    }
}

/// Geometry of a square-kernel 2-D convolution over one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// Rows of the column matrix: `channels * kernel * kernel`.
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn out_pixels(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Unfolds one `[C, H, W]` image into a `[C*K*K, Ho*Wo]` column matrix.
pub fn im2col<T: Scalar>(image: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let pixels = oh * ow;
    debug_assert_eq!(cols.len(), g.patch_len() * pixels);
    let pad = g.padding as isize;
    for c in 0..g.channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let out = &mut cols[row * pixels..(row + 1) * pixels];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    let dst = &mut out[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.height as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        *v = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates a column matrix back into an image.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry, image: &mut [T]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let pixels = oh * ow;
    let pad = g.padding as isize;
    for c in 0..g.channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * pixels..(row + 1) * pixels];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}
