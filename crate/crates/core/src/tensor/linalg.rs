//! Row-major matmul kernels and the im2col/col2im pair behind conv2d.
//!
//! All loops run in a fixed order so repeated calls are bit-identical.

/// out[m,n] = a[m,k] * b[k,n]
pub(crate) fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (c, &bv) in c_row.iter_mut().zip(b_row) {
                *c += a_ip * bv;
            }
        }
    }
}

/// out[m,n] = a[m,k] * b[n,k]^T  (rows of b are dotted against rows of a)
pub(crate) fn mm_abt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut out[i * n..(i + 1) * n];
        for (j, c) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *c = acc;
        }
    }
}

/// out[k,n] = a[m,k]^T * b[m,n]
pub(crate) fn mm_atb(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    out.fill(0.0);
    for p in 0..m {
        let a_row = &a[p * k..(p + 1) * k];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &a_pi) in a_row.iter().enumerate() {
            let c_row = &mut out[i * n..(i + 1) * n];
            for (c, &bv) in c_row.iter_mut().zip(b_row) {
                *c += a_pi * bv;
            }
        }
    }
}

/// Geometry of one conv2d application.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvShape {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvShape {
    pub fn new(cin: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> ConvShape {
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        ConvShape { cin, h, w, kh, kw, stride, pad, oh, ow }
    }

    pub fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }
}

/// col[cin*kh*kw, oh*ow] from one image; out-of-bounds taps are zero.
pub(crate) fn im2col(x: &[f64], s: &ConvShape, col: &mut [f64]) {
    debug_assert_eq!(x.len(), s.cin * s.h * s.w);
    debug_assert_eq!(col.len(), s.patch_len() * s.oh * s.ow);
    let ospatial = s.oh * s.ow;
    col.fill(0.0);
    for c in 0..s.cin {
        let plane = &x[c * s.h * s.w..(c + 1) * s.h * s.w];
        for ki in 0..s.kh {
            for kj in 0..s.kw {
                let row = &mut col[((c * s.kh + ki) * s.kw + kj) * ospatial
                    ..((c * s.kh + ki) * s.kw + kj + 1) * ospatial];
                for oy in 0..s.oh {
                    let iy = (oy * s.stride + ki) as isize - s.pad as isize;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * s.w..(iy as usize + 1) * s.w];
                    let dst = &mut row[oy * s.ow..(oy + 1) * s.ow];
                    for ox in 0..s.ow {
                        let ix = (ox * s.stride + kj) as isize - s.pad as isize;
                        if ix >= 0 && ix < s.w as isize {
                            dst[ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add the column gradient back onto the image gradient.
pub(crate) fn col2im_add(col: &[f64], s: &ConvShape, gx: &mut [f64]) {
    debug_assert_eq!(gx.len(), s.cin * s.h * s.w);
    let ospatial = s.oh * s.ow;
    for c in 0..s.cin {
        let plane = &mut gx[c * s.h * s.w..(c + 1) * s.h * s.w];
        for ki in 0..s.kh {
            for kj in 0..s.kw {
                let row = &col[((c * s.kh + ki) * s.kw + kj) * ospatial
                    ..((c * s.kh + ki) * s.kw + kj + 1) * ospatial];
                for oy in 0..s.oh {
                    let iy = (oy * s.stride + ki) as isize - s.pad as isize;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * s.w..(iy as usize + 1) * s.w];
                    let src = &row[oy * s.ow..(oy + 1) * s.ow];
                    for ox in 0..s.ow {
                        let ix = (ox * s.stride + kj) as isize - s.pad as isize;
                        if ix >= 0 && ix < s.w as isize {
                            dst[ix as usize] += src[ox];
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
    fn mm_small_known() {
        // [1 2; 3 4] * [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        mm(&a, &b, 2, 2, 2, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn transposed_variants_agree_with_mm() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 * 0.5 - 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect(); // 3x4
        let mut c = vec![0.0; 8];
        mm(&a, &b, 2, 3, 4, &mut c);

        // b^T is 4x3; mm_abt(a, b^T) must equal a*b
        let mut bt = vec![0.0; 12];
        for i in 0..3 {
            for j in 0..4 {
                bt[j * 3 + i] = b[i * 4 + j];
            }
        }
        let mut c2 = vec![0.0; 8];
        mm_abt(&a, &bt, 2, 3, 4, &mut c2);
        assert_eq!(c, c2);

        // a^T is 3x2; mm_atb(a^T, ...) with a^T stored row-major equals a*b
        let mut at = vec![0.0; 6];
        for i in 0..2 {
            for j in 0..3 {
                at[j * 2 + i] = a[i * 3 + j];
            }
        }
        let mut c3 = vec![0.0; 8];
        mm_atb(&at, &b, 3, 2, 4, &mut c3);
        // mm_atb computes at^T * b = a * b
        assert_eq!(c, c3);
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), c> == <x, col2im(c)> for random x, c
        let s = ConvShape::new(2, 5, 4, 3, 3, 2, 1);
        let n_x = s.cin * s.h * s.w;
        let n_col = s.patch_len() * s.oh * s.ow;
        let x: Vec<f64> = (0..n_x).map(|i| ((i * 37 + 11) % 17) as f64 - 8.0).collect();
        let c: Vec<f64> = (0..n_col).map(|i| ((i * 53 + 29) % 13) as f64 - 6.0).collect();

        let mut col = vec![0.0; n_col];
        im2col(&x, &s, &mut col);
        let lhs: f64 = col.iter().zip(&c).map(|(a, b)| a * b).sum();

        let mut gx = vec![0.0; n_x];
        col2im_add(&c, &s, &mut gx);
        let rhs: f64 = x.iter().zip(&gx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }
}
