//! Interchangeable execution strategies for a KAN convolution.
//!
//! * `direct`: per-output-pixel loops over the window, accumulating in
//!   f64; the reference.
//! * `decoupled`: basis expansion to `[N, C_in * (D+1), H, W]`, a learnable
//!   1x1 projection, then a fixed all-ones spatial sum (shared mode). In
//!   elementwise mode the projection is a full k x k convolution over the
//!   expanded channels.
//! * `fused`: shared mode only; expansion, weighting and aggregation in one
//!   kernel that never materializes the expanded tensor. Elementwise layers
//!   fall back to `decoupled`.

use std::sync::Arc;

use reskan_tensor::gemm::{gemm, MatRef};
use reskan_tensor::kernels::conv::{box_sum_plane, box_sum_plane_transpose, BoxShape};
use reskan_tensor::{CustomOp, Graph, Scalar, Tensor, Var};

use super::{expand_basis, silu, silu_grad, Basis, KanGeometry, KanMode};
use crate::error::{config_err, Result};

/// Graph handles of one layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct KanVars {
    pub w: Var,
    pub wm: Var,
    pub beta: Option<Var>,
}

/// Tracks transient buffer bytes allocated by a forward pass.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct BufferMeter {
    live: usize,
    peak: usize,
}

impl BufferMeter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&mut self, bytes: usize) {
        self.live += bytes;
        self.peak = self.peak.max(self.live);
    }

    pub fn free(&mut self, bytes: usize) {
        self.live = self.live.saturating_sub(bytes);
    }

    pub fn peak(&self) -> usize {
        self.peak
    }

    fn alloc_elems<T>(&mut self, n: usize) {
        self.alloc(n * std::mem::size_of::<T>());
    }

    fn free_elems<T>(&mut self, n: usize) {
        self.free(n * std::mem::size_of::<T>());
    }
}

pub trait ConvPath<T: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Records the layer on `g`. `x` is the layer input before tanh.
    fn forward(
        &self,
        g: &mut Graph<T>,
        x: Var,
        p: &KanVars,
        geom: &KanGeometry,
        basis: &Arc<dyn Basis<T>>,
        meter: &mut BufferMeter,
    ) -> Result<Var>;
}

pub const PATH_NAMES: &[&str] = &["direct", "decoupled", "fused"];

pub fn conv_path<T: Scalar>(name: &str) -> Result<Arc<dyn ConvPath<T>>> {
    match name {
        "direct" => Ok(Arc::new(Direct)),
        "decoupled" => Ok(Arc::new(Decoupled)),
        "fused" => Ok(Arc::new(Fused)),
        other => Err(config_err!("unknown conv path `{other}`; expected one of {}", PATH_NAMES.join(", "))),
    }
}

/// Validated per-call dimensions.
#[derive(Debug, Clone, Copy)]
struct Dims {
    n: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

impl Dims {
    fn hw(&self) -> usize {
        self.h * self.w
    }

    fn ohw(&self) -> usize {
        self.oh * self.ow
    }
}

fn check_call<T: Scalar>(g: &Graph<T>, x: Var, p: &KanVars, geom: &KanGeometry, basis: &dyn Basis<T>) -> Result<Dims> {
    geom.validate()?;
    let [n, c, h, w] = g.value(x).dims4()?;
    if c != geom.c_in {
        return Err(config_err!("KAN conv expects {} input channels, got {c}", geom.c_in));
    }
    if g.value(p.w).shape() != geom.w_shape().as_slice() {
        return Err(config_err!("basis weights have shape {:?}, expected {:?}", g.value(p.w).shape(), geom.w_shape()));
    }
    if g.value(p.wm).shape() != geom.wm_shape().as_slice() {
        return Err(config_err!(
            "residual weights have shape {:?}, expected {:?}",
            g.value(p.wm).shape(),
            geom.wm_shape()
        ));
    }
    let want = basis.num_coeffs(geom.degree);
    let got = p.beta.map_or(0, |b| g.value(b).numel());
    if want != got {
        return Err(config_err!("basis `{}` needs {want} recurrence coefficients, got {got}", basis.name()));
    }
    let (oh, ow) = geom.out_hw(h, w)?;
    Ok(Dims { n, h, w, oh, ow })
}

fn inputs_of(x: Var, p: &KanVars) -> Vec<Var> {
    let mut v = vec![x, p.w, p.wm];
    v.extend(p.beta);
    v
}

fn coeffs<'a, T: Scalar>(inputs: &[&'a Tensor<T>]) -> &'a [T] {
    inputs.get(3).map_or(&[], |t| t.data())
}

/// tanh, silu and basis values of every input plane, basis-major per plane.
struct Activated<T> {
    t: Vec<T>,
    s: Vec<T>,
    b: Vec<T>,
}

fn activate<T: Scalar>(x: &[T], planes: usize, hw: usize, degree: usize, basis: &dyn Basis<T>, c: &[T]) -> Activated<T> {
    let t: Vec<T> = x.iter().map(|v| v.tanh()).collect();
    let s: Vec<T> = x.iter().map(|&v| silu(v)).collect();
    let d1 = degree + 1;
    let mut b = vec![T::zero(); planes * d1 * hw];
    for p in 0..planes {
        basis.expand(&t[p * hw..(p + 1) * hw], c, degree, &mut b[p * d1 * hw..(p + 1) * d1 * hw]);
    }
    Activated { t, s, b }
}

/// Visits every in-bounds `(ci, i, j, input pixel)` contribution of one
/// output pixel.
#[inline]
fn window_taps(geom: &KanGeometry, d: &Dims, oy: usize, ox: usize, mut f: impl FnMut(usize, usize, usize)) {
    let (st, pad) = (geom.stride as isize, geom.padding as isize);
    for i in 0..geom.k {
        let y = oy as isize * st + i as isize - pad;
        if y < 0 || y >= d.h as isize {
            continue;
        }
        for j in 0..geom.k {
            let xx = ox as isize * st + j as isize - pad;
            if xx < 0 || xx >= d.w as isize {
                continue;
            }
            f(i, j, y as usize * d.w + xx as usize);
        }
    }
}

#[inline]
fn unit_index(geom: &KanGeometry, co: usize, ci: usize, i: usize, j: usize) -> usize {
    match geom.mode {
        KanMode::Shared => co * geom.c_in + ci,
        KanMode::Elementwise => ((co * geom.c_in + ci) * geom.k + i) * geom.k + j,
    }
}

pub struct Direct;

/// The reference path evaluates entirely in f64 whatever `T` is, so it stays
/// an oracle for the faster paths in single precision.
struct DirectOp {
    geom: KanGeometry,
    dims: Dims,
    basis: Arc<dyn Basis<f64>>,
}

fn to_f64<T: Scalar>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

fn direct_forward(
    x: &[f64],
    w: &[f64],
    wm: &[f64],
    c: &[f64],
    geom: &KanGeometry,
    d: &Dims,
    basis: &dyn Basis<f64>,
    meter: &mut BufferMeter,
) -> Vec<f64> {
    let (hw, d1) = (d.hw(), geom.degree + 1);
    let planes = d.n * geom.c_in;
    let act = activate(x, planes, hw, geom.degree, basis, c);
    meter.alloc_elems::<f64>(planes * hw * (d1 + 2));
    let mut out = vec![0.0; d.n * geom.c_out * d.ohw()];
    for n in 0..d.n {
        for co in 0..geom.c_out {
            for oy in 0..d.oh {
                for ox in 0..d.ow {
                    let mut acc = 0.0f64;
                    for ci in 0..geom.c_in {
                        let plane = n * geom.c_in + ci;
                        window_taps(geom, d, oy, ox, |i, j, q| {
                            let u = unit_index(geom, co, ci, i, j);
                            for k in 0..d1 {
                                acc += w[u * d1 + k] * act.b[(plane * d1 + k) * hw + q];
                            }
                            acc += wm[u] * act.s[plane * hw + q];
                        });
                    }
                    out[((n * geom.c_out + co) * d.oh + oy) * d.ow + ox] = acc;
                }
            }
        }
    }
    meter.free_elems::<f64>(planes * hw * (d1 + 2));
    out
}

impl<T: Scalar> CustomOp<T> for DirectOp {
    fn name(&self) -> &str {
        "kan_conv_direct"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_output: &Tensor<T>,
        needs_grad: &[bool],
    ) -> reskan_tensor::Result<Vec<Option<Tensor<T>>>> {
        let (geom, d) = (&self.geom, &self.dims);
        let (x, w, wm) = (to_f64(inputs[0].data()), to_f64(inputs[1].data()), to_f64(inputs[2].data()));
        let c = to_f64(coeffs(inputs));
        let (hw, d1) = (d.hw(), geom.degree + 1);
        let planes = d.n * geom.c_in;
        let act = activate(&x, planes, hw, geom.degree, self.basis.as_ref(), &c);
        let go = to_f64(grad_output.data());
        let mut gw = vec![0.0f64; w.len()];
        let mut gwm = vec![0.0f64; wm.len()];
        let mut gb = vec![0.0f64; act.b.len()];
        let mut gs = vec![0.0f64; x.len()];
        for n in 0..d.n {
            for co in 0..geom.c_out {
                for oy in 0..d.oh {
                    for ox in 0..d.ow {
                        let gy = go[((n * geom.c_out + co) * d.oh + oy) * d.ow + ox];
                        for ci in 0..geom.c_in {
                            let plane = n * geom.c_in + ci;
                            window_taps(geom, d, oy, ox, |i, j, q| {
                                let u = unit_index(geom, co, ci, i, j);
                                for k in 0..d1 {
                                    let bi = (plane * d1 + k) * hw + q;
                                    gw[u * d1 + k] += gy * act.b[bi];
                                    gb[bi] += gy * w[u * d1 + k];
                                }
                                gwm[u] += gy * act.s[plane * hw + q];
                                gs[plane * hw + q] += gy * wm[u];
                            });
                        }
                    }
                }
            }
        }
        let mut gx = vec![0.0f64; x.len()];
        let mut gc = vec![0.0f64; c.len()];
        for p in 0..planes {
            let r = p * hw..(p + 1) * hw;
            let br = p * d1 * hw..(p + 1) * d1 * hw;
            let mut gt = vec![0.0f64; hw];
            self.basis.expand_backward(&act.t[r.clone()], &c, geom.degree, &act.b[br.clone()], &mut gb[br], &mut gt, Some(&mut gc));
            for (q, i) in r.enumerate() {
                gx[i] = gt[q] * (1.0 - act.t[i] * act.t[i]) + gs[i] * silu_grad(x[i]);
            }
        }
        let mut out = vec![
            needs_grad[0].then(|| Tensor::from_f64(inputs[0].shape().to_vec(), &gx)).transpose()?,
            needs_grad[1].then(|| Tensor::from_f64(inputs[1].shape().to_vec(), &gw)).transpose()?,
            needs_grad[2].then(|| Tensor::from_f64(inputs[2].shape().to_vec(), &gwm)).transpose()?,
        ];
        if inputs.len() > 3 {
            out.push(needs_grad[3].then(|| Tensor::from_f64(vec![c.len()], &gc)).transpose()?);
        }
        Ok(out)
    }
}

impl<T: Scalar> ConvPath<T> for Direct {
    fn name(&self) -> &'static str {
        "direct"
    }

    fn forward(
        &self,
        g: &mut Graph<T>,
        x: Var,
        p: &KanVars,
        geom: &KanGeometry,
        basis: &Arc<dyn Basis<T>>,
        meter: &mut BufferMeter,
    ) -> Result<Var> {
        let d = check_call(g, x, p, geom, basis.as_ref())?;
        let basis64 = super::basis::<f64>(basis.name())?;
        let c = p.beta.map_or(Vec::new(), |b| to_f64(g.value(b).data()));
        let out = direct_forward(
            &to_f64(g.value(x).data()),
            &to_f64(g.value(p.w).data()),
            &to_f64(g.value(p.wm).data()),
            &c,
            geom,
            &d,
            basis64.as_ref(),
            meter,
        );
        let value = Tensor::from_f64(vec![d.n, geom.c_out, d.oh, d.ow], &out)?;
        let op = DirectOp { geom: *geom, dims: d, basis: basis64 };
        Ok(g.custom(&inputs_of(x, p), value, Box::new(op)))
    }
}

pub struct Decoupled;

impl<T: Scalar> ConvPath<T> for Decoupled {
    fn name(&self) -> &'static str {
        "decoupled"
    }

    fn forward(
        &self,
        g: &mut Graph<T>,
        x: Var,
        p: &KanVars,
        geom: &KanGeometry,
        basis: &Arc<dyn Basis<T>>,
        meter: &mut BufferMeter,
    ) -> Result<Var> {
        let d = check_call(g, x, p, geom, basis.as_ref())?;
        let (ci, co, d1, k) = (geom.c_in, geom.c_out, geom.degree + 1, geom.k);
        let mut track = |g: &Graph<T>, v: Var| meter.alloc_elems::<T>(g.value(v).numel());

        let e = expand_basis(g, x, p.beta, geom.degree, basis)?;
        track(g, e);
        let s = g.silu(x);
        track(g, s);
        match geom.mode {
            KanMode::Shared => {
                let w2 = g.reshape(p.w, &[co, ci * d1, 1, 1])?;
                track(g, w2);
                let wm2 = g.reshape(p.wm, &[co, ci, 1, 1])?;
                track(g, wm2);
                let poly = g.conv2d(e, w2, Default::default())?;
                track(g, poly);
                let res = g.conv2d(s, wm2, Default::default())?;
                track(g, res);
                let field = g.add(poly, res)?;
                track(g, field);
                Ok(g.box_sum(field, k, geom.window())?)
            }
            KanMode::Elementwise => {
                let wp = g.permute(p.w, &[0, 1, 4, 2, 3])?;
                track(g, wp);
                let w2 = g.reshape(wp, &[co, ci * d1, k, k])?;
                let poly = g.conv2d(e, w2, geom.window())?;
                track(g, poly);
                let res = g.conv2d(s, p.wm, geom.window())?;
                track(g, res);
                debug_assert_eq!(g.value(poly).shape()[2..], [d.oh, d.ow]);
                Ok(g.add(poly, res)?)
            }
        }
    }
}

pub struct Fused;

struct FusedOp<T: Scalar> {
    geom: KanGeometry,
    dims: Dims,
    basis: Arc<dyn Basis<T>>,
}

fn box_shape(geom: &KanGeometry, d: &Dims) -> BoxShape {
    BoxShape { planes: 1, h: d.h, w: d.w, k: geom.k, oh: d.oh, ow: d.ow, win: geom.window() }
}

/// Packs `w [Co, Ci, D+1]` and `w_m [Co, Ci]` into one `Co x Ci*(D+2)`
/// matrix whose column `ci * (D+2) + k` weights basis row `k` of channel
/// `ci` (`k = D+1` is the silu row).
fn pack_weights<T: Scalar>(w: &[T], wm: &[T], ci_n: usize, co_n: usize, d1: usize) -> Vec<T> {
    let d2 = d1 + 1;
    let mut wp = vec![T::zero(); co_n * ci_n * d2];
    for co in 0..co_n {
        for ci in 0..ci_n {
            let dst = &mut wp[(co * ci_n + ci) * d2..(co * ci_n + ci + 1) * d2];
            dst[..d1].copy_from_slice(&w[(co * ci_n + ci) * d1..(co * ci_n + ci + 1) * d1]);
            dst[d1] = wm[co * ci_n + ci];
        }
    }
    wp
}

/// Upper bound on tile elements; channels are processed in groups that fit.
const TILE_BUDGET: usize = 1 << 16;

fn channel_group(ci_n: usize, d2: usize, hw: usize) -> usize {
    (TILE_BUDGET / (d2 * hw).max(1)).clamp(1, ci_n)
}

/// Fills `tile` (`(D+2) x hw`) with the basis rows and the silu row of one
/// input plane; `t` receives tanh of the plane.
fn fill_tile<T: Scalar>(x: &[T], c: &[T], degree: usize, basis: &dyn Basis<T>, t: &mut [T], tile: &mut [T]) {
    let hw = x.len();
    for (ti, &xi) in t.iter_mut().zip(x) {
        *ti = xi.tanh();
    }
    let (b, s) = tile.split_at_mut((degree + 1) * hw);
    basis.expand(t, c, degree, b);
    for (si, &xi) in s.iter_mut().zip(x) {
        *si = silu(xi);
    }
}

/// Columns `[c0 * d2, c1 * d2)` of the packed weights as a strided view.
fn weight_block<T>(wp: &[T], co_n: usize, ci_n: usize, d2: usize, c0: usize, c1: usize) -> MatRef<'_, T> {
    MatRef { data: &wp[c0 * d2..], rows: co_n, cols: (c1 - c0) * d2, row_stride: ci_n * d2, col_stride: 1 }
}

fn fused_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    wm: &[T],
    c: &[T],
    geom: &KanGeometry,
    d: &Dims,
    basis: &dyn Basis<T>,
    meter: &mut BufferMeter,
) -> Vec<T> {
    let (ci_n, co_n, d1) = (geom.c_in, geom.c_out, geom.degree + 1);
    let (hw, ohw, d2) = (d.hw(), d.ohw(), d1 + 1);
    let group = channel_group(ci_n, d2, hw);
    let wp = pack_weights(w, wm, ci_n, co_n, d1);
    let mut acc = vec![T::zero(); co_n * hw];
    let mut tile = vec![T::zero(); group * d2 * hw];
    let mut t = vec![T::zero(); hw];
    let mut rows = vec![T::zero(); d.h * d.ow];
    let transient = wp.len() + acc.len() + tile.len() + t.len() + rows.len();
    meter.alloc_elems::<T>(transient);

    let bs = box_shape(geom, d);
    let mut out = vec![T::zero(); d.n * co_n * ohw];
    for n in 0..d.n {
        acc.fill(T::zero());
        for c0 in (0..ci_n).step_by(group) {
            let c1 = (c0 + group).min(ci_n);
            for ci in c0..c1 {
                let plane = (n * ci_n + ci) * hw;
                let dst = &mut tile[(ci - c0) * d2 * hw..(ci - c0 + 1) * d2 * hw];
                fill_tile(&x[plane..plane + hw], c, geom.degree, basis, &mut t, dst);
            }
            let rows_k = (c1 - c0) * d2;
            let a = weight_block(&wp, co_n, ci_n, d2, c0, c1);
            gemm(T::one(), a, MatRef::row_major(&tile[..rows_k * hw], rows_k, hw), T::one(), &mut acc);
        }
        for co in 0..co_n {
            let o = (n * co_n + co) * ohw;
            box_sum_plane(&acc[co * hw..(co + 1) * hw], &bs, &mut rows, &mut out[o..o + ohw]);
        }
    }
    meter.free_elems::<T>(transient);
    out
}

impl<T: Scalar> CustomOp<T> for FusedOp<T> {
    fn name(&self) -> &str {
        "kan_conv_fused"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_output: &Tensor<T>,
        needs_grad: &[bool],
    ) -> reskan_tensor::Result<Vec<Option<Tensor<T>>>> {
        let (geom, d) = (&self.geom, &self.dims);
        let (x, w, wm, c) = (inputs[0].data(), inputs[1].data(), inputs[2].data(), coeffs(inputs));
        let (ci_n, co_n, d1) = (geom.c_in, geom.c_out, geom.degree + 1);
        let (hw, ohw, d2) = (d.hw(), d.ohw(), d1 + 1);
        let group = channel_group(ci_n, d2, hw);
        let wp = pack_weights(w, wm, ci_n, co_n, d1);
        let bs = box_shape(geom, d);
        let go = grad_output.data();

        let mut gwp = vec![T::zero(); wp.len()];
        let mut gblock = vec![T::zero(); co_n * group * d2];
        let mut gx = vec![T::zero(); x.len()];
        let mut gc = vec![0.0f64; c.len()];
        let mut a = vec![T::zero(); co_n * hw];
        let mut rows = vec![T::zero(); d.h * d.ow];
        let mut tile = vec![T::zero(); group * d2 * hw];
        let mut u = vec![T::zero(); group * d2 * hw];
        let mut t = vec![T::zero(); group * hw];
        let mut gt = vec![T::zero(); hw];
        for n in 0..d.n {
            for co in 0..co_n {
                let o = (n * co_n + co) * ohw;
                box_sum_plane_transpose(&go[o..o + ohw], &bs, &mut rows, &mut a[co * hw..(co + 1) * hw]);
            }
            for c0 in (0..ci_n).step_by(group) {
                let c1 = (c0 + group).min(ci_n);
                let (g_n, rows_k) = (c1 - c0, (c1 - c0) * d2);
                for j in 0..g_n {
                    let plane = (n * ci_n + c0 + j) * hw;
                    let tj = &mut t[j * hw..(j + 1) * hw];
                    fill_tile(&x[plane..plane + hw], c, geom.degree, self.basis.as_ref(), tj, &mut tile[j * d2 * hw..(j + 1) * d2 * hw]);
                }
                let tile_m = &tile[..rows_k * hw];
                // dL/dW_block = A * tile^T
                gemm(
                    T::one(),
                    MatRef::row_major(&a, co_n, hw),
                    MatRef::transposed(tile_m, rows_k, hw),
                    T::zero(),
                    &mut gblock,
                );
                for co in 0..co_n {
                    let dst = &mut gwp[(co * ci_n + c0) * d2..(co * ci_n + c1) * d2];
                    for (g, &v) in dst.iter_mut().zip(&gblock[co * rows_k..(co + 1) * rows_k]) {
                        *g += v;
                    }
                }
                // dL/dtile = W_block^T * A
                let wb = weight_block(&wp, co_n, ci_n, d2, c0, c1);
                let wbt = MatRef { data: wb.data, rows: wb.cols, cols: wb.rows, row_stride: 1, col_stride: wb.row_stride };
                gemm(T::one(), wbt, MatRef::row_major(&a, co_n, hw), T::zero(), &mut u[..rows_k * hw]);
                for j in 0..g_n {
                    let plane = (n * ci_n + c0 + j) * hw;
                    let xp = &x[plane..plane + hw];
                    let tj = &t[j * hw..(j + 1) * hw];
                    let (ub, us) = u[j * d2 * hw..(j + 1) * d2 * hw].split_at_mut(d1 * hw);
                    gt.fill(T::zero());
                    let tb = &tile[j * d2 * hw..j * d2 * hw + d1 * hw];
                    self.basis.expand_backward(tj, c, geom.degree, tb, ub, &mut gt, Some(&mut gc));
                    let gxp = &mut gx[plane..plane + hw];
                    for q in 0..hw {
                        gxp[q] = gt[q] * (T::one() - tj[q] * tj[q]) + us[q] * silu_grad(xp[q]);
                    }
                }
            }
        }

        let mut gw = vec![T::zero(); w.len()];
        let mut gwm = vec![T::zero(); wm.len()];
        for co in 0..co_n {
            for ci in 0..ci_n {
                let src = &gwp[(co * ci_n + ci) * d2..(co * ci_n + ci + 1) * d2];
                gw[(co * ci_n + ci) * d1..(co * ci_n + ci + 1) * d1].copy_from_slice(&src[..d1]);
                gwm[co * ci_n + ci] = src[d1];
            }
        }
        let mut out = vec![
            needs_grad[0].then(|| Tensor::new(inputs[0].shape().to_vec(), gx)).transpose()?,
            needs_grad[1].then(|| Tensor::new(inputs[1].shape().to_vec(), gw)).transpose()?,
            needs_grad[2].then(|| Tensor::new(inputs[2].shape().to_vec(), gwm)).transpose()?,
        ];
        if inputs.len() > 3 {
            out.push(needs_grad[3].then(|| Tensor::from_f64(vec![c.len()], &gc)).transpose()?);
        }
        Ok(out)
    }
}

impl<T: Scalar> ConvPath<T> for Fused {
    fn name(&self) -> &'static str {
        "fused"
    }

    fn forward(
        &self,
        g: &mut Graph<T>,
        x: Var,
        p: &KanVars,
        geom: &KanGeometry,
        basis: &Arc<dyn Basis<T>>,
        meter: &mut BufferMeter,
    ) -> Result<Var> {
        if geom.mode == KanMode::Elementwise {
            return Decoupled.forward(g, x, p, geom, basis, meter);
        }
        let d = check_call(g, x, p, geom, basis.as_ref())?;
        let c = p.beta.map_or(&[][..], |b| g.value(b).data());
        let out = fused_forward(
            g.value(x).data(),
            g.value(p.w).data(),
            g.value(p.wm).data(),
            c,
            geom,
            &d,
            basis.as_ref(),
            meter,
        );
        let value = Tensor::new(vec![d.n, geom.c_out, d.oh, d.ow], out)?;
        let op = FusedOp { geom: *geom, dims: d, basis: basis.clone() };
        Ok(g.custom(&inputs_of(x, p), value, Box::new(op)))
    }
}
