//! Cross-correlation (no kernel flip) via im2col + GEMM, and the all-ones
//! depthwise box aggregation.

use crate::gemm::{gemm, MatRef};
use crate::kernels::Window;
use crate::scalar::Scalar;

/// Geometry of one conv2d call, already validated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub win: Window,
}

impl ConvShape {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.win.stride == 1 && self.win.padding == 0
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col<T: Scalar>(x: &[T], s: &ConvShape, cols: &mut [T]) {
    let (st, pad) = (s.win.stride as isize, s.win.padding as isize);
    let plane = s.out_plane();
    for ci in 0..s.c_in {
        let xc = &x[ci * s.h * s.w..(ci + 1) * s.h * s.w];
        for i in 0..s.kh {
            for j in 0..s.kw {
                let row = ((ci * s.kh + i) * s.kw + j) * plane;
                let dst = &mut cols[row..row + plane];
                for oy in 0..s.oh {
                    let y = oy as isize * st + i as isize - pad;
                    let line = &mut dst[oy * s.ow..(oy + 1) * s.ow];
                    if y < 0 || y >= s.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &xc[y as usize * s.w..(y as usize + 1) * s.w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let xx = ox as isize * st + j as isize - pad;
                        *d = if xx < 0 || xx >= s.w as isize { T::zero() } else { src[xx as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(cols: &[T], s: &ConvShape, gx: &mut [T]) {
    let (st, pad) = (s.win.stride as isize, s.win.padding as isize);
    let plane = s.out_plane();
    for ci in 0..s.c_in {
        let gc = &mut gx[ci * s.h * s.w..(ci + 1) * s.h * s.w];
        for i in 0..s.kh {
            for j in 0..s.kw {
                let row = ((ci * s.kh + i) * s.kw + j) * plane;
                let src = &cols[row..row + plane];
                for oy in 0..s.oh {
                    let y = oy as isize * st + i as isize - pad;
                    if y < 0 || y >= s.h as isize {
                        continue;
                    }
                    let dst = &mut gc[y as usize * s.w..(y as usize + 1) * s.w];
                    for ox in 0..s.ow {
                        let xx = ox as isize * st + j as isize - pad;
                        if xx >= 0 && xx < s.w as isize {
                            dst[xx as usize] += src[oy * s.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `out[n, co] = sum_{ci,i,j} kernel[co,ci,i,j] * xpad[n, ci, oy*s+i, ox*s+j]`.
pub fn conv2d_forward<T: Scalar>(x: &[T], kernel: &[T], s: &ConvShape) -> Vec<T> {
    let plane = s.out_plane();
    let mut out = vec![T::zero(); s.n * s.c_out * plane];
    let mut cols = if s.is_pointwise() { Vec::new() } else { vec![T::zero(); s.col_rows() * plane] };
    let kmat = MatRef::row_major(kernel, s.c_out, s.col_rows());
    for n in 0..s.n {
        let xn = &x[n * s.c_in * s.h * s.w..(n + 1) * s.c_in * s.h * s.w];
        let on = &mut out[n * s.c_out * plane..(n + 1) * s.c_out * plane];
        let cmat = if s.is_pointwise() {
            MatRef::row_major(xn, s.c_in, plane)
        } else {
            im2col(xn, s, &mut cols);
            MatRef::row_major(&cols[..], s.col_rows(), plane)
        };
        gemm(T::one(), kmat, cmat, T::zero(), on);
    }
    out
}

/// Gradients of [`conv2d_forward`] w.r.t. input and kernel.
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    kernel: &[T],
    gout: &[T],
    s: &ConvShape,
    need_x: bool,
    need_k: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let plane = s.out_plane();
    let rows = s.col_rows();
    let mut gx = need_x.then(|| vec![T::zero(); x.len()]);
    let mut gk = need_k.then(|| vec![T::zero(); kernel.len()]);
    let mut cols = if s.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * plane] };
    let mut gcols = if need_x && !s.is_pointwise() { vec![T::zero(); rows * plane] } else { Vec::new() };
    for n in 0..s.n {
        let xn = &x[n * s.c_in * s.h * s.w..(n + 1) * s.c_in * s.h * s.w];
        let gon = MatRef::row_major(&gout[n * s.c_out * plane..(n + 1) * s.c_out * plane], s.c_out, plane);
        if let Some(gk) = gk.as_mut() {
            let cmat_t = if s.is_pointwise() {
                MatRef::transposed(xn, s.c_in, plane)
            } else {
                im2col(xn, s, &mut cols);
                MatRef::transposed(&cols[..], rows, plane)
            };
            gemm(T::one(), gon, cmat_t, T::one(), gk);
        }
        if let Some(gx) = gx.as_mut() {
            let kt = MatRef::transposed(kernel, s.c_out, rows);
            let gxn = &mut gx[n * s.c_in * s.h * s.w..(n + 1) * s.c_in * s.h * s.w];
            if s.is_pointwise() {
                gemm(T::one(), kt, gon, T::zero(), gxn);
            } else {
                gemm(T::one(), kt, gon, T::zero(), &mut gcols);
                col2im_add(&gcols, s, gxn);
            }
        }
    }
    (gx, gk)
}

/// Geometry of a depthwise all-ones (box) aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoxShape {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub oh: usize,
    pub ow: usize,
    pub win: Window,
}

/// `out[p, oy, ox] = sum_{i,j<k} xpad[p, oy*s+i, ox*s+j]`, evaluated
/// separably (rows first, then columns).
pub fn box_sum_forward<T: Scalar>(x: &[T], s: &BoxShape) -> Vec<T> {
    let mut out = vec![T::zero(); s.planes * s.oh * s.ow];
    let mut rows = vec![T::zero(); s.h * s.ow];
    for p in 0..s.planes {
        box_sum_plane(&x[p * s.h * s.w..(p + 1) * s.h * s.w], s, &mut rows, &mut out[p * s.oh * s.ow..(p + 1) * s.oh * s.ow]);
    }
    out
}

/// Box-sums one `h x w` plane into `out` (`oh x ow`), overwriting it.
/// `rows` is scratch of length `h * ow`.
pub fn box_sum_plane<T: Scalar>(x: &[T], s: &BoxShape, rows: &mut [T], out: &mut [T]) {
    let (st, pad) = (s.win.stride as isize, s.win.padding as isize);
    if s.k == 1 && s.win.stride == 1 && s.win.padding == 0 {
        out.copy_from_slice(x);
        return;
    }
    for y in 0..s.h {
        let src = &x[y * s.w..(y + 1) * s.w];
        for ox in 0..s.ow {
            let x0 = ox as isize * st - pad;
            let lo = x0.max(0) as usize;
            let hi = (x0 + s.k as isize).min(s.w as isize);
            let mut acc = T::zero();
            if (lo as isize) < hi {
                for &v in &src[lo..hi as usize] {
                    acc += v;
                }
            }
            rows[y * s.ow + ox] = acc;
        }
    }
    for oy in 0..s.oh {
        let y0 = oy as isize * st - pad;
        let dst = &mut out[oy * s.ow..(oy + 1) * s.ow];
        dst.fill(T::zero());
        for i in 0..s.k as isize {
            let y = y0 + i;
            if y < 0 || y >= s.h as isize {
                continue;
            }
            let r = &rows[y as usize * s.ow..(y as usize + 1) * s.ow];
            for (d, &v) in dst.iter_mut().zip(r) {
                *d += v;
            }
        }
    }
}

/// Transpose of the box aggregation for one plane: scatters `gout`
/// (`oh x ow`) back to every covered input position, overwriting `gx`.
/// `rows` is scratch of length `h * ow`.
pub fn box_sum_plane_transpose<T: Scalar>(gout: &[T], s: &BoxShape, rows: &mut [T], gx: &mut [T]) {
    let (st, pad) = (s.win.stride as isize, s.win.padding as isize);
    if s.k == 1 && s.win.stride == 1 && s.win.padding == 0 {
        gx.copy_from_slice(gout);
        return;
    }
    rows.fill(T::zero());
    for oy in 0..s.oh {
        let y0 = oy as isize * st - pad;
        let g = &gout[oy * s.ow..(oy + 1) * s.ow];
        for i in 0..s.k as isize {
            let y = y0 + i;
            if y < 0 || y >= s.h as isize {
                continue;
            }
            let r = &mut rows[y as usize * s.ow..(y as usize + 1) * s.ow];
            for (d, &v) in r.iter_mut().zip(g) {
                *d += v;
            }
        }
    }
    gx.fill(T::zero());
    for y in 0..s.h {
        let r = &rows[y * s.ow..(y + 1) * s.ow];
        let dst = &mut gx[y * s.w..(y + 1) * s.w];
        for (ox, &v) in r.iter().enumerate() {
            let x0 = ox as isize * st - pad;
            let lo = x0.max(0) as usize;
            let hi = (x0 + s.k as isize).min(s.w as isize);
            if (lo as isize) < hi {
                for d in &mut dst[lo..hi as usize] {
                    *d += v;
                }
            }
        }
    }
}

pub fn box_sum_backward<T: Scalar>(gout: &[T], s: &BoxShape) -> Vec<T> {
    let mut gx = vec![T::zero(); s.planes * s.h * s.w];
    let mut rows = vec![T::zero(); s.h * s.ow];
    for p in 0..s.planes {
        box_sum_plane_transpose(
            &gout[p * s.oh * s.ow..(p + 1) * s.oh * s.ow],
            s,
            &mut rows,
            &mut gx[p * s.h * s.w..(p + 1) * s.h * s.w],
        );
    }
    gx
}
