use super::Scalar;

/// Strided read-only matrix view.
#[derive(Clone, Copy)]
pub(crate) struct MatView<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T: Scalar> MatView<'a, T> {
    pub(crate) fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        debug_assert!(data.len() >= rows * cols);
        Self {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub(crate) fn strided(data: &'a [T], rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            rs,
            cs,
        }
    }

    pub(crate) fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn in_bounds(&self) -> bool {
        if self.rows == 0 || self.cols == 0 {
            return true;
        }
        (self.rows - 1) * self.rs + (self.cols - 1) * self.cs < self.data.len()
    }
}

/// `c = a·b + beta·c` with `c` row-major `a.rows × b.cols`.
pub(crate) fn gemm<T: Scalar>(a: MatView<'_, T>, b: MatView<'_, T>, c: &mut [T], beta: T) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(k, b.rows, "gemm inner dimension");
    assert!(a.in_bounds() && b.in_bounds(), "gemm view out of bounds");
    assert_eq!(c.len(), m * n, "gemm output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: bounds of both operands and the output were checked above and
    // `c` is uniquely borrowed.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Output extent of a convolution along one axis, `None` if non-positive.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || input + 2 * pad < kernel {
        return None;
    }
    Some((input + 2 * pad - kernel) / stride + 1)
}

#[derive(Clone, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    /// For every kernel tap, the (output row, input row) pairs it connects in
    /// channel-last layout. Taps that only ever see padding are skipped.
    pub(crate) fn taps(&self) -> Vec<(usize, Vec<(usize, usize)>)> {
        let mut out = Vec::new();
        for ky in 0..self.kh {
            for kx in 0..self.kw {
                let mut pairs = Vec::new();
                for b in 0..self.batch {
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let o = (b * self.ho + oy) * self.wo + ox;
                            let i = (b * self.h + iy as usize) * self.w + ix as usize;
                            pairs.push((o, i));
                        }
                    }
                }
                if !pairs.is_empty() {
                    out.push((ky * self.kw + kx, pairs));
                }
            }
        }
        out
    }
}

/// `B×C×S` (S = spatial size) to `(B·S)×C`.
pub(crate) fn to_channel_last<T: Scalar>(x: &[T], batch: usize, c: usize, s: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..batch {
        for ch in 0..c {
            let src = &x[(b * c + ch) * s..(b * c + ch + 1) * s];
            for (p, &v) in src.iter().enumerate() {
                out[(b * s + p) * c + ch] = v;
            }
        }
    }
    out
}

/// Inverse of [`to_channel_last`].
pub(crate) fn to_channel_first<T: Scalar>(x: &[T], batch: usize, c: usize, s: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..batch {
        for p in 0..s {
            let src = &x[(b * s + p) * c..(b * s + p + 1) * c];
            for (ch, &v) in src.iter().enumerate() {
                out[(b * c + ch) * s + p] = v;
            }
        }
    }
    out
}

pub(crate) fn gather_rows<T: Scalar>(src: &[T], cols: usize, rows: impl Iterator<Item = usize>) -> Vec<T> {
    let mut out = Vec::new();
    for r in rows {
        out.extend_from_slice(&src[r * cols..(r + 1) * cols]);
    }
    out
}

pub(crate) fn scatter_add_rows<T: Scalar>(
    dst: &mut [T],
    cols: usize,
    src: &[T],
    rows: impl Iterator<Item = usize>,
) {
    for (k, r) in rows.enumerate() {
        let d = &mut dst[r * cols..(r + 1) * cols];
        for (a, &b) in d.iter_mut().zip(&src[k * cols..(k + 1) * cols]) {
            *a += b;
        }
    }
}

/// Direct quadruple-loop cross-correlation with zero padding.
///
/// Kept as an independent reference for the tap-wise GEMM convolution.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_reference(
    x: &[f64],
    x_shape: [usize; 4],
    k: &[f64],
    k_shape: [usize; 4],
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> Option<(Vec<f64>, [usize; 4])> {
    let [b, ci, h, w] = x_shape;
    let [co, kci, kh, kw] = k_shape;
    if kci != ci {
        return None;
    }
    let ho = conv_output_size(h, kh, stride, pad)?;
    let wo = conv_output_size(w, kw, stride, pad)?;
    let mut out = vec![0.0; b * co * ho * wo];
    for n in 0..b {
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias[o];
                    for c in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((n * ci + c) * h + iy as usize) * w + ix as usize];
                                let kv = k[((o * ci + c) * kh + ky) * kw + kx];
                                acc += xv * kv;
                            }
                        }
                    }
                    out[((n * co + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Some((out, [b, co, ho, wo]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 4x3
        let mut c = vec![0.0; 8];
        gemm(
            MatView::row_major(&a, 2, 3),
            MatView::row_major(&b, 4, 3).t(),
            &mut c,
            0.0,
        );
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|k| a[i * 3 + k] * b[j * 3 + k]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
    }

    #[test]
    fn output_size_rule() {
        assert_eq!(conv_output_size(8, 3, 3, 1), Some(3));
        assert_eq!(conv_output_size(3, 3, 3, 1), Some(1));
        assert_eq!(conv_output_size(4, 3, 3, 1), Some(2));
        assert_eq!(conv_output_size(1, 3, 3, 1), Some(1));
        assert_eq!(conv_output_size(1, 3, 1, 0), None);
    }

    #[test]
    fn layout_round_trip() {
        let x: Vec<f32> = (0..24).map(|v| v as f32).collect();
        let cl = to_channel_last(&x, 2, 3, 4);
        assert_eq!(to_channel_first(&cl, 2, 3, 4), x);
    }
}
