use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayD, Ix2, Ix4, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::conv::{conv2d_backward_cols, conv2d_forward_keep, ConvGeometry};
use super::{cast, BufferId, Ctx, Grads, ParamId, ParamStore, Real};

#[derive(Debug, Clone)]
pub enum Layer {
    Conv {
        weight: ParamId,
        bias: Option<ParamId>,
        geom: ConvGeometry,
    },
    BatchNorm {
        gamma: ParamId,
        beta: ParamId,
        running_mean: BufferId,
        running_var: BufferId,
        eps: f64,
        momentum: f64,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    GlobalAvgPool,
    Flatten,
    Linear {
        weight: ParamId,
        bias: ParamId,
    },
    Dropout {
        p: f64,
    },
    /// Cross-channel local response normalization.
    Lrn {
        size: usize,
        alpha: f64,
        beta: f64,
        k: f64,
    },
    Block(Box<BasicBlock>),
}

/// Residual unit: `relu(main(x) + shortcut(x))`.
#[derive(Debug, Clone)]
pub struct BasicBlock {
    pub main: Sequential,
    pub shortcut: Option<Sequential>,
}

#[derive(Debug, Clone)]
pub struct Node {
    pub name: String,
    pub layer: Layer,
}

#[derive(Debug, Clone, Default)]
pub struct Sequential {
    pub nodes: Vec<Node>,
}

enum Cache<T> {
    Input(ArrayD<T>),
    Conv {
        x: ArrayD<T>,
        cols: Vec<ndarray::Array2<T>>,
    },
    Norm {
        xhat: ArrayD<T>,
        inv_std: Vec<T>,
        batch: bool,
    },
    Output(ArrayD<T>),
    Pool {
        argmax: Vec<usize>,
        in_shape: Vec<usize>,
    },
    Shape(Vec<usize>),
    Mask(Option<ArrayD<T>>),
    Lrn {
        x: ArrayD<T>,
        scale: ArrayD<T>,
    },
    Block {
        main: SeqCache<T>,
        short: Option<SeqCache<T>>,
        out: ArrayD<T>,
    },
}

/// Saved forward state needed to run the matching backward pass.
pub struct SeqCache<T> {
    caches: Vec<Cache<T>>,
    prefix: String,
}

fn qualify(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Views a tensor of shape (N, C, ...) as (N, C, S).
fn ncs(shape: &[usize]) -> (usize, usize, usize) {
    let s = shape[2..].iter().product::<usize>();
    (shape[0], shape[1], s)
}

fn std_vec<T: Real>(x: &ArrayD<T>) -> Vec<T> {
    x.as_standard_layout().iter().copied().collect()
}

impl Sequential {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, layer: Layer) -> &mut Self {
        self.nodes.push(Node {
            name: name.into(),
            layer,
        });
        self
    }

    /// Every probe-able node name under `prefix`, in forward order.
    pub fn node_names(&self, prefix: &str) -> Vec<String> {
        let mut out = Vec::new();
        for node in &self.nodes {
            let q = qualify(prefix, &node.name);
            if let Layer::Block(b) = &node.layer {
                out.extend(b.main.node_names(&q));
                if let Some(s) = &b.shortcut {
                    out.extend(s.node_names(&format!("{q}.shortcut")));
                }
            }
            out.push(q);
        }
        out
    }

    /// Names of convolution nodes and residual-block outputs.
    pub fn conv_names(&self, prefix: &str) -> Vec<String> {
        let mut out = Vec::new();
        for node in &self.nodes {
            let q = qualify(prefix, &node.name);
            match &node.layer {
                Layer::Conv { .. } => out.push(q),
                Layer::Block(b) => {
                    out.extend(b.main.conv_names(&q));
                    out.push(q);
                }
                _ => {}
            }
        }
        out
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.layer {
                Layer::Conv { weight, bias, .. } => {
                    out.push(*weight);
                    out.extend(bias.iter().copied());
                }
                Layer::BatchNorm { gamma, beta, .. } => out.extend([*gamma, *beta]),
                Layer::Linear { weight, bias } => out.extend([*weight, *bias]),
                Layer::Block(b) => {
                    out.extend(b.main.param_ids());
                    if let Some(s) = &b.shortcut {
                        out.extend(s.param_ids());
                    }
                }
                _ => {}
            }
        }
        out
    }

    pub fn forward<T: Real>(
        &self,
        ctx: &mut Ctx<'_, T>,
        mut x: ArrayD<T>,
        prefix: &str,
    ) -> (ArrayD<T>, SeqCache<T>) {
        let mut caches = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let q = qualify(prefix, &node.name);
            let (y, cache) = node.layer.forward(ctx, x, &q);
            ctx.probe_forward(&q, &y);
            caches.push(cache);
            x = y;
        }
        (
            x,
            SeqCache {
                caches,
                prefix: prefix.to_string(),
            },
        )
    }

    /// Backpropagates `dy`; returns the input gradient when `need_dx`.
    pub fn backward<T: Real>(
        &self,
        ctx: &mut Ctx<'_, T>,
        cache: SeqCache<T>,
        mut dy: ArrayD<T>,
        grads: &mut Grads<T>,
        need_dx: bool,
    ) -> Option<ArrayD<T>> {
        let prefix = cache.prefix;
        for (i, (node, c)) in self.nodes.iter().zip(cache.caches).enumerate().rev() {
            let q = qualify(&prefix, &node.name);
            ctx.probe_backward(&q, &dy);
            let want = need_dx || i > 0;
            match node.layer.backward(ctx, c, dy, grads, want) {
                Some(d) => dy = d,
                None => return None,
            }
        }
        Some(dy)
    }
}

impl Layer {
    fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: ArrayD<T>, name: &str) -> (ArrayD<T>, Cache<T>) {
        match self {
            Layer::Conv { weight, bias, geom } => {
                let w = ctx.params.get(*weight).view().into_dimensionality::<Ix4>().expect("conv weight 4d");
                let b = bias.map(|b| std_vec(ctx.params.get(b)));
                let x4 = x.view().into_dimensionality::<Ix4>().expect("conv input 4d");
                let keep = ctx.train || ctx.probe.is_some();
                let (y, cols) = conv2d_forward_keep(x4, w, b.as_deref(), *geom, keep);
                (y.into_dyn(), Cache::Conv { x, cols })
            }
            Layer::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
                eps,
                momentum,
            } => {
                let shape = x.shape().to_vec();
                let (n, c, s) = ncs(&shape);
                let xs = std_vec(&x);
                let g = std_vec(ctx.params.get(*gamma));
                let bt = std_vec(ctx.params.get(*beta));
                let batch = ctx.train && ctx.batch_stats;
                let m = n * s;
                let (mean, var): (Vec<T>, Vec<T>) = if batch {
                    let mut mean = vec![T::zero(); c];
                    let mut var = vec![T::zero(); c];
                    for ch in 0..c {
                        let mut acc = T::zero();
                        for b in 0..n {
                            acc += xs[(b * c + ch) * s..(b * c + ch + 1) * s].iter().copied().sum();
                        }
                        let mu = acc / cast(m as f64);
                        let mut v = T::zero();
                        for b in 0..n {
                            for &xv in &xs[(b * c + ch) * s..(b * c + ch + 1) * s] {
                                v += (xv - mu) * (xv - mu);
                            }
                        }
                        mean[ch] = mu;
                        var[ch] = v / cast(m as f64);
                    }
                    (mean, var)
                } else {
                    (
                        std_vec(ctx.params.buffer(*running_mean)),
                        std_vec(ctx.params.buffer(*running_var)),
                    )
                };
                let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + cast(*eps)).sqrt()).collect();
                let mut xhat = vec![T::zero(); xs.len()];
                let mut y = vec![T::zero(); xs.len()];
                for b in 0..n {
                    for ch in 0..c {
                        for i in (b * c + ch) * s..(b * c + ch + 1) * s {
                            let h = (xs[i] - mean[ch]) * inv_std[ch];
                            xhat[i] = h;
                            y[i] = g[ch] * h + bt[ch];
                        }
                    }
                }
                if batch {
                    let unbias: T = cast(m as f64 / (m.max(2) - 1) as f64);
                    let mean = ArrayD::from_shape_vec(IxDyn(&[c]), mean).expect("bn stat");
                    let var = ArrayD::from_shape_vec(IxDyn(&[c]), var).expect("bn stat") * unbias;
                    ctx.buffer_updates.push((*running_mean, mean, *momentum));
                    ctx.buffer_updates.push((*running_var, var, *momentum));
                }
                let y = ArrayD::from_shape_vec(IxDyn(&shape), y).expect("bn shape");
                let xhat = ArrayD::from_shape_vec(IxDyn(&shape), xhat).expect("bn shape");
                (y, Cache::Norm { xhat, inv_std, batch })
            }
            Layer::Relu => {
                let y = x.mapv(|v| if v > T::zero() { v } else { T::zero() });
                (y.clone(), Cache::Output(y))
            }
            Layer::MaxPool { kernel, stride, pad } => {
                let shape = x.shape().to_vec();
                let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let oh = (h + 2 * pad - kernel) / stride + 1;
                let ow = (w + 2 * pad - kernel) / stride + 1;
                let xs = std_vec(&x);
                let mut y = vec![T::zero(); n * c * oh * ow];
                let mut argmax = vec![0usize; y.len()];
                for plane in 0..n * c {
                    let base = plane * h * w;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = T::neg_infinity();
                            let mut arg = base;
                            for ki in 0..*kernel {
                                let iy = (oy * stride + ki) as isize - *pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kj in 0..*kernel {
                                    let ix = (ox * stride + kj) as isize - *pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let idx = base + iy as usize * w + ix as usize;
                                    if xs[idx] > best {
                                        best = xs[idx];
                                        arg = idx;
                                    }
                                }
                            }
                            let o = (plane * oh + oy) * ow + ox;
                            y[o] = best;
                            argmax[o] = arg;
                        }
                    }
                }
                let y = ArrayD::from_shape_vec(IxDyn(&[n, c, oh, ow]), y).expect("pool shape");
                (y, Cache::Pool { argmax, in_shape: shape })
            }
            Layer::GlobalAvgPool => {
                let shape = x.shape().to_vec();
                let (n, c, s) = ncs(&shape);
                let xs = std_vec(&x);
                let inv: T = cast(1.0 / s as f64);
                let y = ArrayD::from_shape_fn(IxDyn(&[n, c]), |i| {
                    let p = i[0] * c + i[1];
                    xs[p * s..(p + 1) * s].iter().copied().sum::<T>() * inv
                });
                (y, Cache::Shape(shape))
            }
            Layer::Flatten => {
                let shape = x.shape().to_vec();
                let n = shape[0];
                let rest = shape[1..].iter().product::<usize>();
                let y = x
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(IxDyn(&[n, rest]))
                    .expect("flatten");
                (y, Cache::Shape(shape))
            }
            Layer::Linear { weight, bias } => {
                let w = ctx.params.get(*weight).view().into_dimensionality::<Ix2>().expect("linear 2d");
                let b = ctx.params.get(*bias);
                let x2 = x.view().into_dimensionality::<Ix2>().expect("linear input 2d");
                let mut y = ndarray::Array2::<T>::zeros((x2.dim().0, w.dim().0));
                for mut row in y.rows_mut() {
                    row.assign(&b.view().into_dimensionality::<ndarray::Ix1>().expect("bias 1d"));
                }
                general_mat_mul(T::one(), &x2, &w.t(), T::one(), &mut y);
                (y.into_dyn(), Cache::Input(x))
            }
            Layer::Dropout { p } => {
                if !(ctx.train && ctx.dropout) || *p <= 0.0 {
                    return (x, Cache::Mask(None));
                }
                let rng: &mut ChaCha8Rng = ctx.rng.as_deref_mut().expect("train-mode dropout needs an rng");
                let keep = 1.0 - p;
                let scale: T = cast(1.0 / keep);
                let mask = ArrayD::from_shape_simple_fn(x.raw_dim(), || {
                    if rng.random::<f64>() < keep {
                        scale
                    } else {
                        T::zero()
                    }
                });
                let y = &x * &mask;
                (y, Cache::Mask(Some(mask)))
            }
            Layer::Lrn { size, alpha, beta, k } => {
                let shape = x.shape().to_vec();
                let (n, c, s) = ncs(&shape);
                let xs = std_vec(&x);
                let (lo, hi) = (size / 2, (size - 1) / 2);
                let coef: T = cast(alpha / *size as f64);
                let kk: T = cast(*k);
                let bt: T = cast(*beta);
                let mut scale = vec![T::zero(); xs.len()];
                let mut y = vec![T::zero(); xs.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let from = ch.saturating_sub(lo);
                        let to = (ch + hi).min(c - 1);
                        for i in 0..s {
                            let mut acc = T::zero();
                            for j in from..=to {
                                let v = xs[(b * c + j) * s + i];
                                acc += v * v;
                            }
                            let idx = (b * c + ch) * s + i;
                            let sc = kk + coef * acc;
                            scale[idx] = sc;
                            y[idx] = xs[idx] * sc.powf(-bt);
                        }
                    }
                }
                let scale = ArrayD::from_shape_vec(IxDyn(&shape), scale).expect("lrn");
                let y = ArrayD::from_shape_vec(IxDyn(&shape), y).expect("lrn");
                (y, Cache::Lrn { x, scale })
            }
            Layer::Block(block) => {
                let (m, main) = block.main.forward(ctx, x.clone(), name);
                let (sc, short) = match &block.shortcut {
                    Some(s) => {
                        let (y, c) = s.forward(ctx, x, &format!("{name}.shortcut"));
                        (y, Some(c))
                    }
                    None => (x, None),
                };
                let out = (m + sc).mapv(|v| if v > T::zero() { v } else { T::zero() });
                (out.clone(), Cache::Block { main, short, out })
            }
        }
    }

    fn backward<T: Real>(
        &self,
        ctx: &mut Ctx<'_, T>,
        cache: Cache<T>,
        dy: ArrayD<T>,
        grads: &mut Grads<T>,
        need_dx: bool,
    ) -> Option<ArrayD<T>> {
        match (self, cache) {
            (Layer::Conv { weight, bias, geom }, Cache::Conv { x, cols }) => {
                let w = ctx.params.get(*weight).view().into_dimensionality::<Ix4>().expect("4d");
                let mut dw = ndarray::Array4::<T>::zeros(w.raw_dim());
                let mut db = bias.map(|b| vec![T::zero(); ctx.params.get(b).len()]);
                let dx = conv2d_backward_cols(
                    x.view().into_dimensionality::<Ix4>().expect("4d"),
                    w,
                    dy.view().into_dimensionality::<Ix4>().expect("4d"),
                    *geom,
                    &mut dw,
                    db.as_deref_mut(),
                    need_dx,
                    cols,
                );
                *grads.slot(*weight) += &dw.into_dyn();
                if let (Some(b), Some(db)) = (bias, db) {
                    for (g, d) in grads.slot(*b).iter_mut().zip(db) {
                        *g += d;
                    }
                }
                dx.map(|d| d.into_dyn())
            }
            (Layer::BatchNorm { gamma, beta, .. }, Cache::Norm { xhat, inv_std, batch }) => {
                let shape = dy.shape().to_vec();
                let (n, c, s) = ncs(&shape);
                let dys = std_vec(&dy);
                let xh = std_vec(&xhat);
                let g = std_vec(ctx.params.get(*gamma));
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        for i in (b * c + ch) * s..(b * c + ch + 1) * s {
                            dgamma[ch] += dys[i] * xh[i];
                            dbeta[ch] += dys[i];
                        }
                    }
                }
                for (slot, v) in grads.slot(*gamma).iter_mut().zip(&dgamma) {
                    *slot += *v;
                }
                for (slot, v) in grads.slot(*beta).iter_mut().zip(&dbeta) {
                    *slot += *v;
                }
                if !need_dx {
                    return None;
                }
                let m: T = cast((n * s) as f64);
                let mut dx = vec![T::zero(); dys.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let k = g[ch] * inv_std[ch];
                        for i in (b * c + ch) * s..(b * c + ch + 1) * s {
                            dx[i] = if batch {
                                k / m * (m * dys[i] - dbeta[ch] - xh[i] * dgamma[ch])
                            } else {
                                k * dys[i]
                            };
                        }
                    }
                }
                Some(ArrayD::from_shape_vec(IxDyn(&shape), dx).expect("bn dx"))
            }
            (Layer::Relu, Cache::Output(y)) => {
                Some(ndarray::Zip::from(&dy).and(&y).map_collect(|&d, &o| if o > T::zero() { d } else { T::zero() }))
            }
            (Layer::MaxPool { .. }, Cache::Pool { argmax, in_shape }) => {
                let dys = std_vec(&dy);
                let mut dx = vec![T::zero(); in_shape.iter().product()];
                for (o, &a) in argmax.iter().enumerate() {
                    dx[a] += dys[o];
                }
                Some(ArrayD::from_shape_vec(IxDyn(&in_shape), dx).expect("pool dx"))
            }
            (Layer::GlobalAvgPool, Cache::Shape(shape)) => {
                let (_, c, s) = ncs(&shape);
                let inv: T = cast(1.0 / s as f64);
                let d2 = dy.view().into_dimensionality::<Ix2>().expect("gap dy");
                Some(ArrayD::from_shape_fn(IxDyn(&shape), |i| d2[[i[0], i[1] % c]] * inv))
            }
            (Layer::Flatten, Cache::Shape(shape)) => Some(
                dy.as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(IxDyn(&shape))
                    .expect("unflatten"),
            ),
            (Layer::Linear { weight, bias }, Cache::Input(x)) => {
                let w = ctx.params.get(*weight).view().into_dimensionality::<Ix2>().expect("2d");
                let x2 = x.view().into_dimensionality::<Ix2>().expect("2d");
                let d2 = dy.view().into_dimensionality::<Ix2>().expect("2d");
                {
                    let mut gw = grads.slot(*weight).view_mut().into_dimensionality::<Ix2>().expect("2d");
                    general_mat_mul(T::one(), &d2.t(), &x2, T::one(), &mut gw);
                }
                {
                    let gb = grads.slot(*bias);
                    for row in d2.rows() {
                        for (g, v) in gb.iter_mut().zip(row.iter()) {
                            *g += *v;
                        }
                    }
                }
                need_dx.then(|| {
                    let mut dx = ndarray::Array2::<T>::zeros(x2.raw_dim());
                    general_mat_mul(T::one(), &d2, &w, T::zero(), &mut dx);
                    dx.into_dyn()
                })
            }
            (Layer::Dropout { .. }, Cache::Mask(mask)) => Some(match mask {
                Some(m) => dy * &m,
                None => dy,
            }),
            (Layer::Lrn { size, alpha, beta, .. }, Cache::Lrn { x, scale }) => {
                let shape = x.shape().to_vec();
                let (n, c, s) = ncs(&shape);
                let xs = std_vec(&x);
                let sc = std_vec(&scale);
                let dys = std_vec(&dy);
                let bt: T = cast(*beta);
                let coef: T = cast(2.0 * alpha * beta / *size as f64);
                // t_i = dy_i * x_i * s_i^(-beta-1)
                let t: Vec<T> = (0..xs.len())
                    .map(|i| dys[i] * xs[i] * sc[i].powf(-bt - T::one()))
                    .collect();
                let (lo, hi) = (size / 2, (size - 1) / 2);
                let mut dx = vec![T::zero(); xs.len()];
                for b in 0..n {
                    for j in 0..c {
                        // channels i whose window contains j
                        let from = j.saturating_sub(hi);
                        let to = (j + lo).min(c - 1);
                        for p in 0..s {
                            let idx = (b * c + j) * s + p;
                            let mut acc = T::zero();
                            for i in from..=to {
                                acc += t[(b * c + i) * s + p];
                            }
                            dx[idx] = dys[idx] * sc[idx].powf(-bt) - coef * xs[idx] * acc;
                        }
                    }
                }
                Some(ArrayD::from_shape_vec(IxDyn(&shape), dx).expect("lrn dx"))
            }
            (Layer::Block(block), Cache::Block { main, short, out }) => {
                let d = ndarray::Zip::from(&dy)
                    .and(&out)
                    .map_collect(|&g, &o| if o > T::zero() { g } else { T::zero() });
                let dmain = block.main.backward(ctx, main, d.clone(), grads, need_dx);
                let dshort = match (&block.shortcut, short) {
                    (Some(s), Some(c)) => s.backward(ctx, c, d, grads, need_dx),
                    _ => Some(d),
                };
                match (dmain, dshort) {
                    (Some(a), Some(b)) if need_dx => Some(a + b),
                    _ => None,
                }
            }
            _ => unreachable!("cache does not match layer"),
        }
    }
}

/// Creates parameters with He-normal weights and registers them in a store.
pub struct LayerFactory<'a, T> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha8Rng,
}

impl<T: Real> LayerFactory<'_, T> {
    fn he(&mut self, shape: &[usize], fan_in: usize) -> ArrayD<T> {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let rng = &mut *self.rng;
        ArrayD::from_shape_simple_fn(IxDyn(shape), || cast(normal.sample(rng)))
    }

    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, geom: ConvGeometry, bias: bool) -> Layer {
        let w = self.he(&[cout, cin, geom.kernel, geom.kernel], cin * geom.kernel * geom.kernel);
        let weight = self.store.add(format!("{name}.weight"), w);
        let bias = bias.then(|| self.store.add(format!("{name}.bias"), super::zeros(&[cout])));
        Layer::Conv { weight, bias, geom }
    }

    pub fn batch_norm(&mut self, name: &str, channels: usize) -> Layer {
        Layer::BatchNorm {
            gamma: self
                .store
                .add(format!("{name}.weight"), ArrayD::from_elem(IxDyn(&[channels]), T::one())),
            beta: self.store.add(format!("{name}.bias"), super::zeros(&[channels])),
            running_mean: self
                .store
                .add_buffer(format!("{name}.running_mean"), super::zeros(&[channels])),
            running_var: self.store.add_buffer(
                format!("{name}.running_var"),
                ArrayD::from_elem(IxDyn(&[channels]), T::one()),
            ),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn linear(&mut self, name: &str, din: usize, dout: usize) -> Layer {
        let w = self.he(&[dout, din], din);
        Layer::Linear {
            weight: self.store.add(format!("{name}.weight"), w),
            bias: self.store.add(format!("{name}.bias"), super::zeros(&[dout])),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn random(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut r = rng::stream(seed, &[]);
        ArrayD::from_shape_simple_fn(IxDyn(shape), || r.random_range(-1.0..1.0))
    }

    /// Checks d(sum(f(x) * r))/dx and parameter grads against central differences.
    fn check(seq: &Sequential, store: &mut ParamStore<f64>, input: &[usize], train: bool) {
        let x = random(input, 11);
        let mut init_rng = rng::stream(0, &[]);
        let mut ctx = if train {
            Ctx::train(store, &mut init_rng)
        } else {
            Ctx::eval(store)
        };
        ctx.dropout = false;
        let (y, cache) = seq.forward(&mut ctx, x.clone(), "");
        let r = random(y.shape(), 12);
        let mut grads = store.zero_grads();
        let dx = seq.backward(&mut ctx, cache, r.clone(), &mut grads, true).unwrap();
        drop(ctx);

        let eval = |store: &ParamStore<f64>, x: &ArrayD<f64>| {
            let mut rr = rng::stream(0, &[]);
            let mut ctx = if train { Ctx::train(store, &mut rr) } else { Ctx::eval(store) };
            ctx.dropout = false;
            (seq.forward(&mut ctx, x.clone(), "").0 * &r).sum()
        };
        let eps = 1e-6;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-7);
        for i in (0..x.len()).step_by(7) {
            let mut xp = x.clone();
            xp.as_slice_mut().unwrap()[i] += eps;
            let mut xm = x.clone();
            xm.as_slice_mut().unwrap()[i] -= eps;
            let num = (eval(store, &xp) - eval(store, &xm)) / (2.0 * eps);
            let ana = dx.as_standard_layout().as_slice().unwrap()[i];
            assert!(rel(num, ana) < 1e-5, "input {i}: {num} vs {ana}");
        }
        for p in 0..store.len() {
            for i in (0..store.values[p].len()).step_by(5) {
                let orig = store.values[p].as_slice().unwrap()[i];
                store.values[p].as_slice_mut().unwrap()[i] = orig + eps;
                let fp = eval(store, &x);
                store.values[p].as_slice_mut().unwrap()[i] = orig - eps;
                let fm = eval(store, &x);
                store.values[p].as_slice_mut().unwrap()[i] = orig;
                let num = (fp - fm) / (2.0 * eps);
                let ana = grads.values[p].as_slice().unwrap()[i];
                assert!(rel(num, ana) < 1e-5, "{} [{i}]: {num} vs {ana}", store.names[p]);
            }
        }
    }

    #[test]
    fn conv_bn_relu_pool_gradients() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(1, &[]);
        let mut f = LayerFactory { store: &mut store, rng: &mut r };
        let mut seq = Sequential::new();
        seq.push("conv", f.conv("conv", 2, 3, ConvGeometry { kernel: 3, stride: 1, pad: 1 }, true))
            .push("bn", f.batch_norm("bn", 3))
            .push("relu", Layer::Relu)
            .push("pool", Layer::MaxPool { kernel: 3, stride: 2, pad: 1 })
            .push("gap", Layer::GlobalAvgPool)
            .push("fc", f.linear("fc", 3, 2));
        check(&seq, &mut store, &[3, 2, 6, 6], true);
        check(&seq, &mut store, &[3, 2, 6, 6], false);
    }

    #[test]
    fn lrn_and_flatten_gradients() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(2, &[]);
        let mut f = LayerFactory { store: &mut store, rng: &mut r };
        let mut seq = Sequential::new();
        seq.push("conv", f.conv("conv", 1, 6, ConvGeometry { kernel: 3, stride: 2, pad: 0 }, true))
            .push("lrn", Layer::Lrn { size: 5, alpha: 0.5, beta: 0.75, k: 1.0 })
            .push("flat", Layer::Flatten)
            .push("fc", f.linear("fc", 6 * 3 * 3, 2));
        check(&seq, &mut store, &[2, 1, 7, 7], false);
    }

    #[test]
    fn residual_block_gradients() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(3, &[]);
        let mut f = LayerFactory { store: &mut store, rng: &mut r };
        let mut main = Sequential::new();
        main.push("conv1", f.conv("b.conv1", 2, 4, ConvGeometry { kernel: 3, stride: 2, pad: 1 }, false))
            .push("bn1", f.batch_norm("b.bn1", 4))
            .push("relu", Layer::Relu)
            .push("conv2", f.conv("b.conv2", 4, 4, ConvGeometry { kernel: 3, stride: 1, pad: 1 }, false))
            .push("bn2", f.batch_norm("b.bn2", 4));
        let mut short = Sequential::new();
        short
            .push("0", f.conv("b.down", 2, 4, ConvGeometry { kernel: 1, stride: 2, pad: 0 }, false))
            .push("1", f.batch_norm("b.down_bn", 4));
        let mut seq = Sequential::new();
        seq.push("block", Layer::Block(Box::new(BasicBlock { main, shortcut: Some(short) })))
            .push("gap", Layer::GlobalAvgPool);
        check(&seq, &mut store, &[4, 2, 6, 6], true);
        assert!(seq.conv_names("t").contains(&"t.block".to_string()));
        assert!(seq.conv_names("t").contains(&"t.block.conv2".to_string()));
    }

    #[test]
    fn dropout_is_identity_in_eval_and_scaled_in_train() {
        let store = ParamStore::<f64>::new();
        let mut seq = Sequential::new();
        seq.push("drop", Layer::Dropout { p: 0.5 });
        let x = ArrayD::from_elem(IxDyn(&[4, 100]), 1.0);
        let mut ctx = Ctx::eval(&store);
        assert_eq!(seq.forward(&mut ctx, x.clone(), "").0, x);
        let mut r = rng::stream(5, &[]);
        let mut ctx = Ctx::train(&store, &mut r);
        let y = seq.forward(&mut ctx, x.clone(), "").0;
        assert!(y.iter().all(|&v| v == 0.0 || v == 2.0));
        assert!(y.iter().any(|&v| v == 0.0));
    }
}
