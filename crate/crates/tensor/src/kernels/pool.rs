use crate::kernels::Window;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolShape {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub oh: usize,
    pub ow: usize,
    pub win: Window,
}

/// Max over each window, ignoring padded cells. Returns the output and, per
/// output cell, the flat input index of the first maximum in row-major
/// window order.
pub fn max_pool_forward<T: Scalar>(x: &[T], s: &PoolShape) -> (Vec<T>, Vec<usize>) {
    let (st, pad) = (s.win.stride as isize, s.win.padding as isize);
    let mut out = Vec::with_capacity(s.planes * s.oh * s.ow);
    let mut arg = Vec::with_capacity(out.capacity());
    for p in 0..s.planes {
        let base = p * s.h * s.w;
        for oy in 0..s.oh {
            for ox in 0..s.ow {
                let mut best = T::neg_infinity();
                let mut best_idx = usize::MAX;
                for i in 0..s.k as isize {
                    let y = oy as isize * st + i - pad;
                    if y < 0 || y >= s.h as isize {
                        continue;
                    }
                    for j in 0..s.k as isize {
                        let xx = ox as isize * st + j - pad;
                        if xx < 0 || xx >= s.w as isize {
                            continue;
                        }
                        let idx = base + y as usize * s.w + xx as usize;
                        if best_idx == usize::MAX || x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg)
}

pub fn max_pool_backward<T: Scalar>(gout: &[T], argmax: &[usize], input_len: usize) -> Vec<T> {
    let mut gx = vec![T::zero(); input_len];
    for (&g, &idx) in gout.iter().zip(argmax) {
        gx[idx] += g;
    }
    gx
}

/// Window mean with divisor `k*k` (padded cells count as zeros).
pub fn avg_pool_forward<T: Scalar>(x: &[T], s: &PoolShape) -> Vec<T> {
    let (st, pad) = (s.win.stride as isize, s.win.padding as isize);
    let inv = T::one() / T::from_f64((s.k * s.k) as f64);
    let mut out = Vec::with_capacity(s.planes * s.oh * s.ow);
    for p in 0..s.planes {
        let base = p * s.h * s.w;
        for oy in 0..s.oh {
            for ox in 0..s.ow {
                let mut acc = T::zero();
                for i in 0..s.k as isize {
                    let y = oy as isize * st + i - pad;
                    if y < 0 || y >= s.h as isize {
                        continue;
                    }
                    for j in 0..s.k as isize {
                        let xx = ox as isize * st + j - pad;
                        if xx >= 0 && xx < s.w as isize {
                            acc += x[base + y as usize * s.w + xx as usize];
                        }
                    }
                }
                out.push(acc * inv);
            }
        }
    }
    out
}

pub fn avg_pool_backward<T: Scalar>(gout: &[T], s: &PoolShape) -> Vec<T> {
    let (st, pad) = (s.win.stride as isize, s.win.padding as isize);
    let inv = T::one() / T::from_f64((s.k * s.k) as f64);
    let mut gx = vec![T::zero(); s.planes * s.h * s.w];
    for p in 0..s.planes {
        let base = p * s.h * s.w;
        for oy in 0..s.oh {
            for ox in 0..s.ow {
                let g = gout[(p * s.oh + oy) * s.ow + ox] * inv;
                for i in 0..s.k as isize {
                    let y = oy as isize * st + i - pad;
                    if y < 0 || y >= s.h as isize {
                        continue;
                    }
                    for j in 0..s.k as isize {
                        let xx = ox as isize * st + j - pad;
                        if xx >= 0 && xx < s.w as isize {
                            gx[base + y as usize * s.w + xx as usize] += g;
                        }
                    }
                }
            }
        }
    }
    gx
}
