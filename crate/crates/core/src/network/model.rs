use std::sync::Arc;

use rand::RngCore;
use reskan_tensor::{BufferId, Graph, ParamId, ParamStore, Scalar, Tensor, Var, Window};

use super::config::{NetworkConfig, MIN_INPUT_SIZE};
use super::plan::{LayerKind, PlanEntry};
use crate::error::{config_err, Result};
use crate::kan::init::uniform_tensor;
use crate::kan::{conv_path, kaiming_uniform_bound, BufferMeter, ConvPath, KanConvLayer, KanGeometry};
use crate::seed::derive_rng;

pub const BN_EPS: f64 = 1e-5;
/// Weight of the current batch in running-statistic updates.
pub const BN_MOMENTUM: f64 = 0.1;

const POOL_K: usize = 3;
const POOL_WIN: Window = Window { stride: 2, padding: 1 };

/// Per-sample, per-channel standardization over the spatial axes: a batch
/// norm over a `[1, N * C, H, W]` view with unit scale and zero shift.
fn standardize<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let [n, c, h, w] = g.value(x).dims4()?;
    let flat = g.reshape(x, &[1, n * c, h, w])?;
    let gamma = g.input(Tensor::ones(vec![n * c]));
    let beta = g.input(Tensor::zeros(vec![n * c]));
    let (y, _) = g.batch_norm_train(flat, gamma, beta, BN_EPS)?;
    Ok(g.reshape(y, &[n, c, h, w])?)
}

#[derive(Debug, Clone)]
struct BatchNorm {
    name: String,
    c: usize,
    gamma: ParamId,
    beta: ParamId,
    mean: BufferId,
    var: BufferId,
}

impl BatchNorm {
    fn new<T: Scalar>(name: String, c: usize, store: &mut ParamStore<T>) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones(vec![c]))?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(vec![c]))?;
        let mean = store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(vec![c]))?;
        let var = store.add_buffer(format!("{name}.running_var"), Tensor::ones(vec![c]))?;
        Ok(BatchNorm { name, c, gamma, beta, mean, var })
    }

    fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (gamma, beta) = (cx.g.param(store, self.gamma), cx.g.param(store, self.beta));
        if cx.train {
            let (y, stats) = cx.g.batch_norm_train(x, gamma, beta, BN_EPS)?;
            cx.updates.push(BnUpdate { mean: self.mean, var: self.var, batch_mean: stats.mean, batch_var: stats.var_unbiased });
            Ok(y)
        } else {
            let (m, v) = (store.buffer(self.mean).data(), store.buffer(self.var).data());
            Ok(cx.g.batch_norm_eval(x, gamma, beta, m, v, BN_EPS)?)
        }
    }

    fn entry(&self, hw: (usize, usize)) -> PlanEntry {
        PlanEntry {
            name: self.name.clone(),
            kind: LayerKind::BatchNorm { c: self.c },
            in_hw: hw,
            out_hw: hw,
            params: vec![format!("{}.gamma", self.name), format!("{}.beta", self.name)],
        }
    }
}

/// Ordinary bias-free convolution.
#[derive(Debug, Clone)]
struct PlainConv {
    name: String,
    w: ParamId,
    c_in: usize,
    c_out: usize,
    k: usize,
    win: Window,
}

impl PlainConv {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Scalar>(
        name: String,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        store: &mut ParamStore<T>,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        // Kaiming-uniform with the ReLU-family gain sqrt(2).
        let bound = kaiming_uniform_bound(c_in * k * k) * std::f64::consts::SQRT_2;
        let w = store.add(format!("{name}.weight"), uniform_tensor(rng, vec![c_out, c_in, k, k], bound))?;
        Ok(PlainConv { name, w, c_in, c_out, k, win: Window::new(stride, padding) })
    }

    fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = cx.g.param(store, self.w);
        Ok(cx.g.conv2d(x, w, self.win)?)
    }

    fn entry(&self, hw: (usize, usize)) -> Result<PlanEntry> {
        let out = (self.win.out_len(hw.0, self.k, "height")?, self.win.out_len(hw.1, self.k, "width")?);
        Ok(PlanEntry {
            name: self.name.clone(),
            kind: LayerKind::Conv {
                c_in: self.c_in,
                c_out: self.c_out,
                k: self.k,
                stride: self.win.stride,
                padding: self.win.padding,
            },
            in_hw: hw,
            out_hw: out,
            params: vec![format!("{}.weight", self.name)],
        })
    }
}

fn kan_entry<T: Scalar>(layer: &KanConvLayer<T>, store: &ParamStore<T>, hw: (usize, usize)) -> Result<PlanEntry> {
    let mut params = vec![store.get(layer.w).name.clone(), store.get(layer.wm).name.clone()];
    params.extend(layer.beta.map(|b| store.get(b).name.clone()));
    Ok(PlanEntry {
        name: layer.name.clone(),
        kind: LayerKind::Kan { geom: layer.geom, coeffs: layer.beta.map_or(0, |b| store.value(b).numel()) },
        in_hw: hw,
        out_hw: layer.geom.out_hw(hw.0, hw.1)?,
        params,
    })
}

/// One convolution with its input conditioning: `[norm] -> KAN conv`, or
/// `norm -> SiLU -> conv` for ordinary convolutions.
#[derive(Clone)]
enum Unit<T: Scalar> {
    Kan { norm: Option<BatchNorm>, conv: KanConvLayer<T> },
    Plain { norm: BatchNorm, conv: PlainConv },
}

#[derive(Debug, Clone, Copy)]
struct ConvSpec {
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
}

impl<T: Scalar> Unit<T> {
    fn new(name: &str, spec: ConvSpec, cfg: &NetworkConfig, store: &mut ParamStore<T>, rng: &mut dyn RngCore) -> Result<Self> {
        let ConvSpec { c_in, c_out, k, stride, padding } = spec;
        if cfg.kan_conv {
            let norm = cfg.kan_pre_norm.then(|| BatchNorm::new(format!("{name}.norm"), c_in, store)).transpose()?;
            let geom = KanGeometry { mode: cfg.mode, c_in, c_out, k, stride, padding, degree: cfg.degree };
            let conv = KanConvLayer::new(name, geom, &cfg.basis, store, rng)?;
            Ok(Unit::Kan { norm, conv })
        } else {
            let norm = BatchNorm::new(format!("{name}.norm"), c_in, store)?;
            let conv = PlainConv::new(name.to_string(), c_in, c_out, k, stride, padding, store, rng)?;
            Ok(Unit::Plain { norm, conv })
        }
    }

    fn forward(&self, cx: &mut Ctx<'_, T>, store: &ParamStore<T>, path: &dyn ConvPath<T>, x: Var) -> Result<Var> {
        match self {
            Unit::Kan { norm, conv } => {
                let x = match norm {
                    Some(n) => n.forward(cx, store, x)?,
                    None => x,
                };
                conv.forward(cx.g, store, x, path, &mut cx.meter)
            }
            Unit::Plain { norm, conv } => {
                let y = norm.forward(cx, store, x)?;
                let y = cx.g.silu(y);
                conv.forward(cx, store, y)
            }
        }
    }

    fn c_out(&self) -> usize {
        match self {
            Unit::Kan { conv, .. } => conv.geom.c_out,
            Unit::Plain { conv, .. } => conv.c_out,
        }
    }

    fn plan(&self, store: &ParamStore<T>, hw: (usize, usize), out: &mut Vec<PlanEntry>) -> Result<(usize, usize)> {
        match self {
            Unit::Kan { norm, conv } => {
                if let Some(n) = norm {
                    out.push(n.entry(hw));
                }
                let e = kan_entry(conv, store, hw)?;
                let o = e.out_hw;
                out.push(e);
                Ok(o)
            }
            Unit::Plain { norm, conv } => {
                out.push(norm.entry(hw));
                out.push(silu_entry(&format!("{}.act", conv.name), conv.c_in, hw));
                let e = conv.entry(hw)?;
                let o = e.out_hw;
                out.push(e);
                Ok(o)
            }
        }
    }
}

fn silu_entry(name: &str, c: usize, hw: (usize, usize)) -> PlanEntry {
    PlanEntry { name: name.into(), kind: LayerKind::Silu { c }, in_hw: hw, out_hw: hw, params: vec![] }
}

/// Residual block. `skip` is `None` for an identity shortcut; a projection
/// shortcut on a KAN network applies SiLU to the block input first.
#[derive(Clone)]
struct Block<T: Scalar> {
    name: String,
    branch: Vec<Unit<T>>,
    skip: Option<Unit<T>>,
    skip_silu: bool,
    c_in: usize,
}

impl<T: Scalar> Block<T> {
    fn new(
        name: &str,
        c_in: usize,
        stage: usize,
        stride: usize,
        cfg: &NetworkConfig,
        store: &mut ParamStore<T>,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        let (cb, c_out) = (cfg.widths[stage], cfg.stage_out(stage));
        let specs = if cfg.bottleneck {
            vec![
                ConvSpec { c_in, c_out: cb, k: 1, stride: 1, padding: 0 },
                ConvSpec { c_in: cb, c_out: cb, k: 3, stride, padding: 1 },
                ConvSpec { c_in: cb, c_out, k: 1, stride: 1, padding: 0 },
            ]
        } else {
            vec![
                ConvSpec { c_in, c_out, k: 3, stride, padding: 1 },
                ConvSpec { c_in: c_out, c_out, k: 3, stride: 1, padding: 1 },
            ]
        };
        let mut branch = Vec::with_capacity(specs.len());
        for (i, spec) in specs.into_iter().enumerate() {
            branch.push(Unit::new(&format!("{name}.conv{}", i + 1), spec, cfg, store, rng)?);
        }
        let identity = c_in == c_out && stride == 1;
        let skip = if identity {
            None
        } else {
            let spec = ConvSpec { c_in, c_out, k: 1, stride, padding: 0 };
            Some(Unit::new(&format!("{name}.skip"), spec, cfg, store, rng)?)
        };
        Ok(Block { name: name.to_string(), branch, skip, skip_silu: cfg.kan_conv, c_in })
    }

    fn forward(&self, cx: &mut Ctx<'_, T>, store: &ParamStore<T>, path: &dyn ConvPath<T>, x: Var) -> Result<Var> {
        let mut y = x;
        for u in &self.branch {
            y = u.forward(cx, store, path, y)?;
        }
        let s = match &self.skip {
            None => x,
            Some(u) => {
                let xin = if self.skip_silu { cx.g.silu(x) } else { x };
                u.forward(cx, store, path, xin)?
            }
        };
        Ok(cx.g.add(y, s)?)
    }

    fn plan(&self, store: &ParamStore<T>, hw: (usize, usize), out: &mut Vec<PlanEntry>) -> Result<(usize, usize)> {
        let mut o = hw;
        for u in &self.branch {
            o = u.plan(store, o, out)?;
        }
        if let Some(u) = &self.skip {
            if self.skip_silu {
                out.push(silu_entry(&format!("{}.skip.act", self.name), self.c_in, hw));
            }
            u.plan(store, hw, out)?;
        }
        let c = self.branch.last().map_or(self.c_in, |u| u.c_out());
        out.push(PlanEntry { name: format!("{}.add", self.name), kind: LayerKind::Add { c }, in_hw: o, out_hw: o, params: vec![] });
        Ok(o)
    }
}

/// Running-statistic update collected during a train-mode forward pass.
#[derive(Debug, Clone)]
pub struct BnUpdate<T> {
    pub mean: BufferId,
    pub var: BufferId,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

pub struct ForwardOutput<T> {
    pub logits: Var,
    /// Pooled features before dropout, `[N, feature_dim]`.
    pub features: Var,
    pub bn_updates: Vec<BnUpdate<T>>,
    /// Peak transient bytes of KAN convolution buffers.
    pub peak_buffer_bytes: usize,
}

struct Ctx<'a, T: Scalar> {
    g: &'a mut Graph<T>,
    train: bool,
    updates: Vec<BnUpdate<T>>,
    meter: BufferMeter,
}

pub struct LightResKan<T: Scalar> {
    pub config: NetworkConfig,
    pub store: ParamStore<T>,
    path: Arc<dyn ConvPath<T>>,
    stem_conv: PlainConv,
    stem_kan: Option<Unit<T>>,
    stem_norm: BatchNorm,
    stages: Vec<Vec<Block<T>>>,
    fc_w: ParamId,
    fc_b: ParamId,
}

/// Builds a freshly initialized model. All initial values derive from
/// `seed`.
pub fn build<T: Scalar>(config: &NetworkConfig, seed: u64) -> Result<LightResKan<T>> {
    config.validate()?;
    let cfg = config;
    let mut rng = derive_rng(seed, "network.init", 0);
    let rng: &mut dyn RngCore = &mut rng;
    let mut store = ParamStore::new();
    let (k, s) = (cfg.stem_kernel, cfg.stem_stride);
    let spec = ConvSpec { c_in: cfg.in_channels, c_out: cfg.stem_channels, k, stride: s, padding: k / 2 };
    let stem_conv =
        PlainConv::new("stem.conv".into(), spec.c_in, spec.c_out, spec.k, spec.stride, spec.padding, &mut store, rng)?;
    let stem_kan = if cfg.kan_conv {
        Some(Unit::new("stem.kan", spec, cfg, &mut store, rng)?)
    } else {
        None
    };
    let stem_norm = BatchNorm::new("stem.norm".into(), cfg.stem_channels, &mut store)?;
    let mut stages = Vec::with_capacity(4);
    let mut c_in = cfg.stem_channels;
    for (si, &nb) in cfg.stage_blocks.iter().enumerate() {
        let mut blocks = Vec::with_capacity(nb);
        for bi in 0..nb {
            let stride = if bi == 0 && si > 0 { 2 } else { 1 };
            let block = Block::new(&format!("stage{}.block{bi}", si + 1), c_in, si, stride, cfg, &mut store, rng)?;
            c_in = cfg.stage_out(si);
            blocks.push(block);
        }
        stages.push(blocks);
    }
    let f = cfg.feature_dim();
    let bound = 1.0 / (f as f64).sqrt();
    let fc_w = store.add("head.fc.weight", uniform_tensor(rng, vec![cfg.num_classes, f], bound))?;
    let fc_b = store.add("head.fc.bias", uniform_tensor(rng, vec![cfg.num_classes], bound))?;
    Ok(LightResKan {
        config: cfg.clone(),
        store,
        path: conv_path(&cfg.conv_path)?,
        stem_conv,
        stem_kan,
        stem_norm,
        stages,
        fc_w,
        fc_b,
    })
}

impl<T: Scalar> LightResKan<T> {
    pub fn path_name(&self) -> &'static str {
        self.path.name()
    }

    /// Swaps the KAN execution strategy. Parameters are untouched.
    pub fn set_conv_path(&mut self, name: &str) -> Result<()> {
        self.path = conv_path(name)?;
        self.config.conv_path = name.to_string();
        Ok(())
    }

    pub fn num_blocks(&self) -> usize {
        self.stages.iter().map(Vec::len).sum()
    }

    /// Records the network on `g`. Passing a random source selects train
    /// mode (batch statistics, active dropout); `None` selects eval mode.
    pub fn forward(&self, g: &mut Graph<T>, x: Var, train: Option<&mut dyn RngCore>) -> Result<ForwardOutput<T>> {
        let [_, c, h, w] = g.value(x).dims4()?;
        if c != self.config.in_channels {
            return Err(config_err!("model expects {} input channels, got {c}", self.config.in_channels));
        }
        if h < MIN_INPUT_SIZE || w < MIN_INPUT_SIZE {
            return Err(config_err!(
                "input {h}x{w} is too small: height and width must be at least {MIN_INPUT_SIZE} to survive the \
                 network's stride-2 reductions"
            ));
        }
        let store = &self.store;
        let path = self.path.as_ref();
        let is_train = train.is_some();
        let mut cx = Ctx { g, train: is_train, updates: Vec::new(), meter: BufferMeter::new() };
        let x = if self.config.input_norm { standardize(cx.g, x)? } else { x };
        let mut y = self.stem_conv.forward(&mut cx, store, x)?;
        if let Some(kan) = &self.stem_kan {
            let z = kan.forward(&mut cx, store, path, x)?;
            y = cx.g.add(y, z)?;
        }
        let y = self.stem_norm.forward(&mut cx, store, y)?;
        let y = cx.g.silu(y);
        let mut y = cx.g.max_pool2d(y, POOL_K, POOL_WIN)?;
        for block in self.stages.iter().flatten() {
            y = block.forward(&mut cx, store, path, y)?;
        }
        let features = cx.g.global_avg_pool(y)?;
        let dropped = match train {
            Some(rng) => cx.g.dropout(features, self.config.dropout, true, rng)?,
            None => features,
        };
        let (fw, fb) = (cx.g.param(store, self.fc_w), cx.g.param(store, self.fc_b));
        let logits = cx.g.linear(dropped, fw, Some(fb))?;
        Ok(ForwardOutput { logits, features, bn_updates: cx.updates, peak_buffer_bytes: cx.meter.peak() })
    }

    /// Runs one residual block (`stage` counted from 1) in eval mode.
    pub fn forward_block(&self, g: &mut Graph<T>, stage: usize, block: usize, x: Var) -> Result<Var> {
        let b = stage
            .checked_sub(1)
            .and_then(|s| self.stages.get(s))
            .and_then(|s| s.get(block))
            .ok_or_else(|| config_err!("no block {block} in stage {stage}"))?;
        let mut cx = Ctx { g, train: false, updates: Vec::new(), meter: BufferMeter::new() };
        b.forward(&mut cx, &self.store, self.path.as_ref(), x)
    }

    /// Folds batch statistics into the running estimates.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>]) {
        let m = T::from_f64(BN_MOMENTUM);
        let keep = T::one() - m;
        for u in updates {
            for (r, &b) in self.store.buffer_mut(u.mean).data_mut().iter_mut().zip(&u.batch_mean) {
                *r = keep * *r + m * b;
            }
            for (r, &b) in self.store.buffer_mut(u.var).data_mut().iter_mut().zip(&u.batch_var) {
                *r = keep * *r + m * b;
            }
        }
    }

    /// Eval-mode logits `[N, num_classes]`.
    pub fn logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.input(images.clone());
        let out = self.forward(&mut g, x, None)?;
        Ok(g.value(out.logits).clone())
    }

    /// Eval-mode pooled features `[N, feature_dim]`.
    pub fn extract_features(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.input(images.clone());
        let out = self.forward(&mut g, x, None)?;
        Ok(g.value(out.features).clone())
    }

    /// Every layer at input size `h x w`, in execution order.
    pub fn plan(&self, h: usize, w: usize) -> Result<Vec<PlanEntry>> {
        let store = &self.store;
        let mut out = Vec::new();
        if self.config.input_norm {
            out.push(PlanEntry {
                name: "stem.input_norm".into(),
                kind: LayerKind::InstanceNorm { c: self.config.in_channels },
                in_hw: (h, w),
                out_hw: (h, w),
                params: vec![],
            });
        }
        let e = self.stem_conv.entry((h, w))?;
        let mut hw = e.out_hw;
        out.push(e);
        if let Some(kan) = &self.stem_kan {
            hw = kan.plan(store, (h, w), &mut out)?;
            out.push(PlanEntry {
                name: "stem.add".into(),
                kind: LayerKind::Add { c: self.config.stem_channels },
                in_hw: hw,
                out_hw: hw,
                params: vec![],
            });
        }
        out.push(self.stem_norm.entry(hw));
        out.push(silu_entry("stem.act", self.config.stem_channels, hw));
        let pooled = (POOL_WIN.out_len(hw.0, POOL_K, "height")?, POOL_WIN.out_len(hw.1, POOL_K, "width")?);
        out.push(PlanEntry {
            name: "stem.pool".into(),
            kind: LayerKind::MaxPool { c: self.config.stem_channels, k: POOL_K, stride: 2, padding: 1 },
            in_hw: hw,
            out_hw: pooled,
            params: vec![],
        });
        hw = pooled;
        for block in self.stages.iter().flatten() {
            hw = block.plan(store, hw, &mut out)?;
        }
        let f = self.config.feature_dim();
        out.push(PlanEntry {
            name: "head.pool".into(),
            kind: LayerKind::GlobalAvgPool { c: f },
            in_hw: hw,
            out_hw: (1, 1),
            params: vec![],
        });
        out.push(PlanEntry {
            name: "head.dropout".into(),
            kind: LayerKind::Dropout { c: f },
            in_hw: (1, 1),
            out_hw: (1, 1),
            params: vec![],
        });
        out.push(PlanEntry {
            name: "head.fc".into(),
            kind: LayerKind::Linear { in_features: f, out_features: self.config.num_classes },
            in_hw: (1, 1),
            out_hw: (1, 1),
            params: vec!["head.fc.weight".into(), "head.fc.bias".into()],
        });
        Ok(out)
    }
}
