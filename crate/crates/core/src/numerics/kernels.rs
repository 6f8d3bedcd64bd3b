//! Dense kernels: strided GEMM and the im2col/col2im pair behind convolution.

use super::tensor::Scalar;

/// Strided matrix view: `(rows, cols, row_stride, col_stride)` over a slice.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatView<'a> {
    pub data: &'a [Scalar],
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a> MatView<'a> {
    pub fn row_major(data: &'a [Scalar], rows: usize, cols: usize) -> Self {
        MatView {
            data,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        MatView {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `c = a·b + beta·c` with `c` row-major `(a.rows × b.cols)`.
pub(crate) fn gemm(a: MatView<'_>, b: MatView<'_>, c: &mut [Scalar], beta: Scalar) {
    assert_eq!(a.cols, b.rows, "gemm inner extents");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v *= beta;
        }
        return;
    }
    check_extent(&a);
    check_extent(&b);
    // SAFETY: extents of both operands were checked against their slices and
    // `c` holds at least m*n row-major elements.
    unsafe {
        gemm_raw(
            m,
            k,
            n,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn check_extent(v: &MatView<'_>) {
    let last = (v.rows.saturating_sub(1)) as isize * v.rs + (v.cols.saturating_sub(1)) as isize * v.cs;
    assert!(v.rs >= 0 && v.cs >= 0 && (last as usize) < v.data.len(), "matrix view out of bounds");
}

#[cfg(not(feature = "f32"))]
#[allow(clippy::too_many_arguments)]
unsafe fn gemm_raw(
    m: usize,
    k: usize,
    n: usize,
    a: *const Scalar,
    rsa: isize,
    csa: isize,
    b: *const Scalar,
    rsb: isize,
    csb: isize,
    beta: Scalar,
    c: *mut Scalar,
    rsc: isize,
    csc: isize,
) {
    matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
}

#[cfg(feature = "f32")]
#[allow(clippy::too_many_arguments)]
unsafe fn gemm_raw(
    m: usize,
    k: usize,
    n: usize,
    a: *const Scalar,
    rsa: isize,
    csa: isize,
    b: *const Scalar,
    rsb: isize,
    csb: isize,
    beta: Scalar,
    c: *mut Scalar,
    rsc: isize,
    csc: isize,
) {
    matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
}

/// Geometry of one 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfolds one image `[cin, h, w]` into `[cin·kh·kw, ho·wo]`.
pub(crate) fn im2col(x: &[Scalar], g: &ConvGeom, cols: &mut [Scalar]) {
    let ncols = g.col_cols();
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `x`.
pub(crate) fn col2im(cols: &[Scalar], g: &ConvGeom, x: &mut [Scalar]) {
    let ncols = g.col_cols();
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            x[base + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_hand_product() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0];
        let mut c = [0.0; 2];
        gemm(MatView::row_major(&a, 2, 2), MatView::row_major(&b, 2, 1), &mut c, 0.0);
        assert_eq!(c, [17.0, 39.0]);
    }

    #[test]
    fn gemm_transposed_view() {
        // aᵀ·a for a = [[1,2],[3,4]] is [[10,14],[14,20]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let mut c = [0.0; 4];
        let v = MatView::row_major(&a, 2, 2);
        gemm(v.t(), v, &mut c, 0.0);
        assert_eq!(c, [10.0, 14.0, 14.0, 20.0]);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom {
            cin: 2,
            h: 4,
            w: 5,
            kh: 3,
            kw: 3,
            stride: 1,
            pad: 1,
            ho: 4,
            wo: 5,
        };
        let x: Vec<Scalar> = (0..40).map(|i| (i as Scalar * 0.37).sin()).collect();
        let y: Vec<Scalar> = (0..g.col_rows() * g.col_cols())
            .map(|i| (i as Scalar * 0.11).cos())
            .collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, &g, &mut cols);
        let lhs: Scalar = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, &g, &mut back);
        let rhs: Scalar = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
