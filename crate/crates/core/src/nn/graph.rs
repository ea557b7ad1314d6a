//! Define-by-run computation tape over NHWC tensors.
//!
//! A [`Graph`] borrows a [`ParamStore`] immutably, records every operation
//! applied to it and can then back-propagate a gradient from any node into a
//! [`Gradients`] accumulator. Building a fresh graph per forward pass keeps
//! inference re-entrant: many threads may run graphs over one store.

use super::params::{BnUpdate, BufferId, Gradients, ParamId, ParamStore};
use super::tensor::{gemm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

enum Op {
    Input,
    Conv {
        x: Var,
        w: ParamId,
        b: Option<ParamId>,
        spec: ConvSpec,
    },
    Depthwise {
        x: Var,
        w: ParamId,
        b: Option<ParamId>,
        spec: ConvSpec,
    },
    UpConv {
        x: Var,
        w: ParamId,
        b: Option<ParamId>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    BatchNorm {
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        batch_stats: bool,
    },
    Relu(Var),
    Silu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    ScaleChannels {
        x: Var,
        s: Var,
    },
    GlobalAvgPool(Var),
    Concat(Var, Var),
    Linear {
        x: Var,
        w: ParamId,
        b: Option<ParamId>,
    },
    Flatten(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'a> {
    store: &'a ParamStore,
    train: bool,
    nodes: Vec<Node>,
    bn_updates: Vec<BnUpdate>,
}

const BN_EPS: f32 = 1e-5;
const BN_MOMENTUM: f32 = 0.1;

fn conv_out(len: usize, spec: ConvSpec) -> usize {
    (len + 2 * spec.pad - spec.k) / spec.stride + 1
}

/// Patch matrix `(ho * wo, k * k * c)` of one image `(h, w, c)`.
fn im2col(x: &[f32], h: usize, w: usize, c: usize, spec: ConvSpec, cols: &mut [f32]) {
    let (ho, wo) = (conv_out(h, spec), conv_out(w, spec));
    let kk = spec.k * spec.k * c;
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &mut cols[(oy * wo + ox) * kk..(oy * wo + ox + 1) * kk];
            for ky in 0..spec.k {
                let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                for kx in 0..spec.k {
                    let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                    let dst = &mut row[(ky * spec.k + kx) * c..(ky * spec.k + kx + 1) * c];
                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                        dst.fill(0.0);
                    } else {
                        let src = (iy as usize * w + ix as usize) * c;
                        dst.copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
}

/// Scatter-add of a patch-matrix gradient back onto one image.
fn col2im(cols: &[f32], h: usize, w: usize, c: usize, spec: ConvSpec, dx: &mut [f32]) {
    let (ho, wo) = (conv_out(h, spec), conv_out(w, spec));
    let kk = spec.k * spec.k * c;
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &cols[(oy * wo + ox) * kk..(oy * wo + ox + 1) * kk];
            for ky in 0..spec.k {
                let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..spec.k {
                    let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let dst = (iy as usize * w + ix as usize) * c;
                    let src = &row[(ky * spec.k + kx) * c..(ky * spec.k + kx + 1) * c];
                    for (d, s) in dx[dst..dst + c].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}

fn is_pointwise(spec: ConvSpec) -> bool {
    spec.k == 1 && spec.stride == 1 && spec.pad == 0
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn channel_sums(g: &[f32], c: usize, out: &mut [f32]) {
    for px in g.chunks_exact(c) {
        add_into(out, px);
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore, train: bool) -> Self {
        Graph {
            store,
            train,
            nodes: Vec::new(),
            bn_updates: Vec::new(),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Leaf without gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Leaf whose gradient is tracked (used by gradient checks).
    pub fn input_with_grad(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    pub fn into_bn_updates(self) -> Vec<BnUpdate> {
        self.bn_updates
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }

    /// Dense convolution, weights laid out `(k, k, cin, cout)`.
    pub fn conv2d(&mut self, x: Var, w: ParamId, b: Option<ParamId>, spec: ConvSpec) -> Var {
        let (n, h, wd, c) = self.value(x).dims4();
        let wv = self.store.value(w);
        let kk = spec.k * spec.k * c;
        assert_eq!(wv.len() % kk, 0, "conv weight does not match {c} input channels");
        let cout = wv.len() / kk;
        let (ho, wo) = (conv_out(h, spec), conv_out(wd, spec));
        let mut out = vec![0f32; n * ho * wo * cout];
        let xv = self.value(x).data();
        let mut cols = if is_pointwise(spec) {
            Vec::new()
        } else {
            vec![0f32; ho * wo * kk]
        };
        for i in 0..n {
            let img = &xv[i * h * wd * c..(i + 1) * h * wd * c];
            let a: &[f32] = if is_pointwise(spec) {
                img
            } else {
                im2col(img, h, wd, c, spec, &mut cols);
                &cols
            };
            let o = &mut out[i * ho * wo * cout..(i + 1) * ho * wo * cout];
            gemm(ho * wo, kk, cout, a, kk, 1, wv, cout, 1, 0.0, o);
        }
        if let Some(b) = b {
            let bv = self.store.value(b);
            for px in out.chunks_exact_mut(cout) {
                add_into(px, bv);
            }
        }
        let t = Tensor::from_vec(&[n, ho, wo, cout], out).expect("conv output");
        self.push(t, Op::Conv { x, w, b, spec }, true)
    }

    /// Per-channel convolution, weights laid out `(k, k, c)`.
    pub fn depthwise(&mut self, x: Var, w: ParamId, b: Option<ParamId>, spec: ConvSpec) -> Var {
        let (n, h, wd, c) = self.value(x).dims4();
        let wv = self.store.value(w);
        assert_eq!(wv.len(), spec.k * spec.k * c, "depthwise weight shape");
        let (ho, wo) = (conv_out(h, spec), conv_out(wd, spec));
        let xv = self.value(x).data();
        let mut out = vec![0f32; n * ho * wo * c];
        for i in 0..n {
            for oy in 0..ho {
                for ky in 0..spec.k {
                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let orow = ((i * ho + oy) * wo + ox) * c;
                        for kx in 0..spec.k {
                            let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            let irow = ((i * h + iy as usize) * wd + ix as usize) * c;
                            let wk = &wv[(ky * spec.k + kx) * c..(ky * spec.k + kx + 1) * c];
                            let xs = &xv[irow..irow + c];
                            for ((o, &xx), &ww) in out[orow..orow + c].iter_mut().zip(xs).zip(wk) {
                                *o += xx * ww;
                            }
                        }
                    }
                }
            }
        }
        if let Some(b) = b {
            let bv = self.store.value(b);
            for px in out.chunks_exact_mut(c) {
                add_into(px, bv);
            }
        }
        let t = Tensor::from_vec(&[n, ho, wo, c], out).expect("depthwise output");
        self.push(t, Op::Depthwise { x, w, b, spec }, true)
    }

    /// Transposed convolution with kernel 2 and stride 2; weights `(cin, 2, 2, cout)`.
    pub fn up_conv(&mut self, x: Var, w: ParamId, b: Option<ParamId>) -> Var {
        let (n, h, wd, cin) = self.value(x).dims4();
        let wv = self.store.value(w);
        assert_eq!(wv.len() % (4 * cin), 0, "up-conv weight shape");
        let cout = wv.len() / (4 * cin);
        let rows = n * h * wd;
        let mut y0 = vec![0f32; rows * 4 * cout];
        gemm(
            rows,
            cin,
            4 * cout,
            self.value(x).data(),
            cin,
            1,
            wv,
            4 * cout,
            1,
            0.0,
            &mut y0,
        );
        let (ho, wo) = (2 * h, 2 * wd);
        let mut out = vec![0f32; n * ho * wo * cout];
        for r in 0..rows {
            let (i, rem) = (r / (h * wd), r % (h * wd));
            let (y, x_) = (rem / wd, rem % wd);
            for a in 0..2 {
                for bb in 0..2 {
                    let dst = ((i * ho + 2 * y + a) * wo + 2 * x_ + bb) * cout;
                    let src = r * 4 * cout + (a * 2 + bb) * cout;
                    out[dst..dst + cout].copy_from_slice(&y0[src..src + cout]);
                }
            }
        }
        if let Some(b) = b {
            let bv = self.store.value(b);
            for px in out.chunks_exact_mut(cout) {
                add_into(px, bv);
            }
        }
        let t = Tensor::from_vec(&[n, ho, wo, cout], out).expect("up-conv output");
        self.push(t, Op::UpConv { x, w, b }, true)
    }

    /// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let (n, h, wd, c) = self.value(x).dims4();
        let (ho, wo) = (h / 2, wd / 2);
        let xv = self.value(x).data();
        let mut out = vec![f32::NEG_INFINITY; n * ho * wo * c];
        let mut argmax = vec![0u32; out.len()];
        for i in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let o = ((i * ho + oy) * wo + ox) * c;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let src = ((i * h + 2 * oy + dy) * wd + 2 * ox + dx) * c;
                            for ch in 0..c {
                                let v = xv[src + ch];
                                if v > out[o + ch] {
                                    out[o + ch] = v;
                                    argmax[o + ch] = (src + ch) as u32;
                                }
                            }
                        }
                    }
                }
            }
        }
        let t = Tensor::from_vec(&[n, ho, wo, c], out).expect("pool output");
        let ng = self.ng(x);
        self.push(t, Op::MaxPool { x, argmax }, ng)
    }

    /// Batch normalisation over all but the channel axis. In training mode the
    /// batch statistics normalise and a running-statistics update is queued.
    pub fn batch_norm(&mut self, x: Var, gamma: ParamId, beta: ParamId, mean: BufferId, var: BufferId) -> Var {
        let shape = self.value(x).shape().to_vec();
        let c = *shape.last().unwrap();
        let xv = self.value(x).data();
        let m = xv.len() / c;
        let mut pending = None;
        let (mu, v) = if self.train {
            let mut mu = vec![0f64; c];
            for px in xv.chunks_exact(c) {
                for (a, &b) in mu.iter_mut().zip(px) {
                    *a += b as f64;
                }
            }
            mu.iter_mut().for_each(|a| *a /= m as f64);
            let mut sq = vec![0f64; c];
            for px in xv.chunks_exact(c) {
                for ((a, &b), &mm) in sq.iter_mut().zip(px).zip(&mu) {
                    let d = b as f64 - mm;
                    *a += d * d;
                }
            }
            let biased: Vec<f32> = sq.iter().map(|s| (s / m as f64) as f32).collect();
            let unbiased: Vec<f32> = sq.iter().map(|s| (s / (m.max(2) - 1) as f64) as f32).collect();
            let mu: Vec<f32> = mu.iter().map(|&a| a as f32).collect();
            pending = Some(BnUpdate {
                mean,
                var,
                batch_mean: mu.clone(),
                batch_var: unbiased,
                momentum: BN_MOMENTUM,
            });
            (mu, biased)
        } else {
            (self.store.buffer(mean).to_vec(), self.store.buffer(var).to_vec())
        };
        let inv_std: Vec<f32> = v.iter().map(|&s| 1.0 / (s + BN_EPS).sqrt()).collect();
        let g = self.store.value(gamma);
        let bt = self.store.value(beta);
        let mut xhat = vec![0f32; xv.len()];
        let mut out = vec![0f32; xv.len()];
        for ((px, xh), o) in xv
            .chunks_exact(c)
            .zip(xhat.chunks_exact_mut(c))
            .zip(out.chunks_exact_mut(c))
        {
            for ch in 0..c {
                let h = (px[ch] - mu[ch]) * inv_std[ch];
                xh[ch] = h;
                o[ch] = h * g[ch] + bt[ch];
            }
        }
        let t = Tensor::from_vec(&shape, out).expect("bn output");
        self.bn_updates.extend(pending);
        let batch_stats = self.train;
        self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            true,
        )
    }

    fn map(&mut self, x: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let src = self.value(x);
        let data: Vec<f32> = src.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::from_vec(src.shape(), data).expect("same shape");
        let ng = self.ng(x);
        self.push(t, op, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.map(x, |v| v * sigmoid(v), Op::Silu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let data: Vec<f32> = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::from_vec(va.shape(), data).expect("same shape");
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Add(a, b), ng)
    }

    /// `x (n,h,w,c) * s (n,1,1,c)`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Var {
        let (n, h, w, c) = self.value(x).dims4();
        assert_eq!(self.value(s).shape(), &[n, 1, 1, c], "scale shape");
        let sv = self.value(s).data();
        let mut out = self.value(x).data().to_vec();
        for (idx, px) in out.chunks_exact_mut(c).enumerate() {
            let i = idx / (h * w);
            for (o, &k) in px.iter_mut().zip(&sv[i * c..(i + 1) * c]) {
                *o *= k;
            }
        }
        let t = Tensor::from_vec(&[n, h, w, c], out).expect("same shape");
        let ng = self.ng(x) || self.ng(s);
        self.push(t, Op::ScaleChannels { x, s }, ng)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (n, h, w, c) = self.value(x).dims4();
        let xv = self.value(x).data();
        let mut out = vec![0f32; n * c];
        for i in 0..n {
            channel_sums(&xv[i * h * w * c..(i + 1) * h * w * c], c, &mut out[i * c..(i + 1) * c]);
        }
        let inv = 1.0 / (h * w) as f32;
        out.iter_mut().for_each(|v| *v *= inv);
        let t = Tensor::from_vec(&[n, 1, 1, c], out).expect("pool output");
        let ng = self.ng(x);
        self.push(t, Op::GlobalAvgPool(x), ng)
    }

    /// Concatenation along the channel (last) axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (n, h, w, ca) = self.value(a).dims4();
        let (nb, hb, wb, cb) = self.value(b).dims4();
        assert_eq!((n, h, w), (nb, hb, wb), "concat spatial mismatch");
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * h * w * (ca + cb));
        for (pa, pb) in va.chunks_exact(ca).zip(vb.chunks_exact(cb)) {
            out.extend_from_slice(pa);
            out.extend_from_slice(pb);
        }
        let t = Tensor::from_vec(&[n, h, w, ca + cb], out).expect("concat output");
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Concat(a, b), ng)
    }

    /// Fully connected layer on `(n, d)` inputs, weights `(d, out)`.
    pub fn linear(&mut self, x: Var, w: ParamId, b: Option<ParamId>) -> Var {
        let shape = self.value(x).shape();
        let n = shape[0];
        let d = self.value(x).len() / n;
        let wv = self.store.value(w);
        assert_eq!(wv.len() % d, 0, "linear weight does not match input width {d}");
        let out_dim = wv.len() / d;
        let mut out = vec![0f32; n * out_dim];
        gemm(n, d, out_dim, self.value(x).data(), d, 1, wv, out_dim, 1, 0.0, &mut out);
        if let Some(b) = b {
            let bv = self.store.value(b);
            for row in out.chunks_exact_mut(out_dim) {
                add_into(row, bv);
            }
        }
        let t = Tensor::from_vec(&[n, out_dim], out).expect("linear output");
        self.push(t, Op::Linear { x, w, b }, true)
    }

    pub fn flatten(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = v.shape()[0];
        let t = v.clone().reshape(&[n, v.len() / n]);
        let ng = self.ng(x);
        self.push(t, Op::Flatten(x), ng)
    }

    /// Back-propagates `seed` (same shape as `root`) and returns parameter gradients.
    pub fn backward(&self, root: Var, seed: Tensor) -> Gradients {
        self.backward_with_inputs(root, seed).0
    }

    /// As [`Graph::backward`], additionally returning gradients of every node
    /// (populated for nodes on a gradient path).
    pub fn backward_with_inputs(&self, root: Var, seed: Tensor) -> (Gradients, Vec<Option<Tensor>>) {
        assert_eq!(seed.shape(), self.value(root).shape(), "seed gradient shape");
        let store = self.store;
        let mut pg = Gradients::new(store.num_params());
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);

        for idx in (0..=root.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {
                    grads[idx] = Some(gy);
                    continue;
                }
                &Op::Conv { x, w, b, spec } => {
                    let xt = self.value(x);
                    let (n, h, wd, c) = xt.dims4();
                    let (_, ho, wo, cout) = node.value.dims4();
                    let kk = spec.k * spec.k * c;
                    let wv = store.value(w);
                    let pw = is_pointwise(spec);
                    let mut cols = if pw { Vec::new() } else { vec![0f32; ho * wo * kk] };
                    let want_dx = self.ng(x);
                    let mut dx = if want_dx { vec![0f32; xt.len()] } else { Vec::new() };
                    let mut dcols = if want_dx && !pw {
                        vec![0f32; ho * wo * kk]
                    } else {
                        Vec::new()
                    };
                    let mut dw = vec![0f32; wv.len()];
                    for i in 0..n {
                        let img = &xt.data()[i * h * wd * c..(i + 1) * h * wd * c];
                        let gyi = &gy.data()[i * ho * wo * cout..(i + 1) * ho * wo * cout];
                        let a: &[f32] = if pw {
                            img
                        } else {
                            im2col(img, h, wd, c, spec, &mut cols);
                            &cols
                        };
                        // dW += cols^T . dY
                        gemm(kk, ho * wo, cout, a, 1, kk, gyi, cout, 1, 1.0, &mut dw);
                        if want_dx {
                            let dxi = &mut dx[i * h * wd * c..(i + 1) * h * wd * c];
                            if pw {
                                gemm(ho * wo, cout, kk, gyi, cout, 1, wv, 1, cout, 1.0, dxi);
                            } else {
                                gemm(ho * wo, cout, kk, gyi, cout, 1, wv, 1, cout, 0.0, &mut dcols);
                                col2im(&dcols, h, wd, c, spec, dxi);
                            }
                        }
                    }
                    add_into(pg.slot(w, wv.len()), &dw);
                    if let Some(b) = b {
                        channel_sums(gy.data(), cout, pg.slot(b, cout));
                    }
                    if want_dx {
                        accumulate(&mut grads, x, Tensor::from_vec(xt.shape(), dx).unwrap());
                    }
                }
                &Op::Depthwise { x, w, b, spec } => {
                    let xt = self.value(x);
                    let (n, h, wd, c) = xt.dims4();
                    let (_, ho, wo, _) = node.value.dims4();
                    let wv = store.value(w);
                    let xv = xt.data();
                    let g = gy.data();
                    let want_dx = self.ng(x);
                    let mut dx = if want_dx { vec![0f32; xv.len()] } else { Vec::new() };
                    let mut dw = vec![0f32; wv.len()];
                    for i in 0..n {
                        for oy in 0..ho {
                            for ky in 0..spec.k {
                                let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for ox in 0..wo {
                                    let orow = ((i * ho + oy) * wo + ox) * c;
                                    let go = &g[orow..orow + c];
                                    for kx in 0..spec.k {
                                        let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                                        if ix < 0 || ix >= wd as isize {
                                            continue;
                                        }
                                        let irow = ((i * h + iy as usize) * wd + ix as usize) * c;
                                        let koff = (ky * spec.k + kx) * c;
                                        for ch in 0..c {
                                            dw[koff + ch] += go[ch] * xv[irow + ch];
                                        }
                                        if want_dx {
                                            for ch in 0..c {
                                                dx[irow + ch] += go[ch] * wv[koff + ch];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    add_into(pg.slot(w, wv.len()), &dw);
                    if let Some(b) = b {
                        channel_sums(g, c, pg.slot(b, c));
                    }
                    if want_dx {
                        accumulate(&mut grads, x, Tensor::from_vec(xt.shape(), dx).unwrap());
                    }
                }
                &Op::UpConv { x, w, b } => {
                    let xt = self.value(x);
                    let (n, h, wd, cin) = xt.dims4();
                    let (_, ho, wo, cout) = node.value.dims4();
                    let rows = n * h * wd;
                    let g = gy.data();
                    let mut gy0 = vec![0f32; rows * 4 * cout];
                    for r in 0..rows {
                        let (i, rem) = (r / (h * wd), r % (h * wd));
                        let (y, x_) = (rem / wd, rem % wd);
                        for a in 0..2 {
                            for bb in 0..2 {
                                let src = ((i * ho + 2 * y + a) * wo + 2 * x_ + bb) * cout;
                                let dst = r * 4 * cout + (a * 2 + bb) * cout;
                                gy0[dst..dst + cout].copy_from_slice(&g[src..src + cout]);
                            }
                        }
                    }
                    let wv = store.value(w);
                    let dw = pg.slot(w, wv.len());
                    gemm(cin, rows, 4 * cout, xt.data(), 1, cin, &gy0, 4 * cout, 1, 1.0, dw);
                    if let Some(b) = b {
                        channel_sums(g, cout, pg.slot(b, cout));
                    }
                    if self.ng(x) {
                        let mut dx = vec![0f32; xt.len()];
                        gemm(rows, 4 * cout, cin, &gy0, 4 * cout, 1, wv, 1, 4 * cout, 0.0, &mut dx);
                        accumulate(&mut grads, x, Tensor::from_vec(xt.shape(), dx).unwrap());
                    }
                }
                Op::MaxPool { x, argmax } => {
                    let xt = self.value(*x);
                    let mut dx = vec![0f32; xt.len()];
                    for (&src, &gv) in argmax.iter().zip(gy.data()) {
                        dx[src as usize] += gv;
                    }
                    accumulate(&mut grads, *x, Tensor::from_vec(xt.shape(), dx).unwrap());
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let c = inv_std.len();
                    let g = gy.data();
                    let gm = store.value(*gamma);
                    let mut dgamma = vec![0f32; c];
                    let mut dbeta = vec![0f32; c];
                    for (gp, xh) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for ch in 0..c {
                            dgamma[ch] += gp[ch] * xh[ch];
                            dbeta[ch] += gp[ch];
                        }
                    }
                    if self.ng(*x) {
                        let m = (g.len() / c) as f32;
                        let mut dx = vec![0f32; g.len()];
                        for ((d, gp), xh) in dx.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(xhat.chunks_exact(c)) {
                            for ch in 0..c {
                                let k = gm[ch] * inv_std[ch];
                                d[ch] = if *batch_stats {
                                    k * (gp[ch] - dbeta[ch] / m - xh[ch] * dgamma[ch] / m)
                                } else {
                                    k * gp[ch]
                                };
                            }
                        }
                        accumulate(&mut grads, *x, Tensor::from_vec(node.value.shape(), dx).unwrap());
                    }
                    add_into(pg.slot(*gamma, c), &dgamma);
                    add_into(pg.slot(*beta, c), &dbeta);
                }
                &Op::Relu(x) => {
                    let y = node.value.data();
                    let d: Vec<f32> = gy
                        .data()
                        .iter()
                        .zip(y)
                        .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, x, Tensor::from_vec(node.value.shape(), d).unwrap());
                }
                &Op::Silu(x) => {
                    let xv = self.value(x).data();
                    let d: Vec<f32> = gy
                        .data()
                        .iter()
                        .zip(xv)
                        .map(|(&g, &v)| {
                            let s = sigmoid(v);
                            g * s * (1.0 + v * (1.0 - s))
                        })
                        .collect();
                    accumulate(&mut grads, x, Tensor::from_vec(node.value.shape(), d).unwrap());
                }
                &Op::Sigmoid(x) => {
                    let y = node.value.data();
                    let d: Vec<f32> = gy.data().iter().zip(y).map(|(&g, &s)| g * s * (1.0 - s)).collect();
                    accumulate(&mut grads, x, Tensor::from_vec(node.value.shape(), d).unwrap());
                }
                &Op::Add(a, b) => {
                    if self.ng(a) {
                        accumulate(&mut grads, a, gy.clone());
                    }
                    if self.ng(b) {
                        accumulate(&mut grads, b, gy);
                    }
                }
                &Op::ScaleChannels { x, s } => {
                    let (n, h, w, c) = node.value.dims4();
                    let xv = self.value(x).data();
                    let sv = self.value(s).data();
                    let g = gy.data();
                    if self.ng(s) {
                        let mut ds = vec![0f32; n * c];
                        for (idx, (gp, xp)) in g.chunks_exact(c).zip(xv.chunks_exact(c)).enumerate() {
                            let i = idx / (h * w);
                            for ch in 0..c {
                                ds[i * c + ch] += gp[ch] * xp[ch];
                            }
                        }
                        accumulate(&mut grads, s, Tensor::from_vec(&[n, 1, 1, c], ds).unwrap());
                    }
                    if self.ng(x) {
                        let mut dx = g.to_vec();
                        for (idx, px) in dx.chunks_exact_mut(c).enumerate() {
                            let i = idx / (h * w);
                            for (d, &k) in px.iter_mut().zip(&sv[i * c..(i + 1) * c]) {
                                *d *= k;
                            }
                        }
                        accumulate(&mut grads, x, Tensor::from_vec(&[n, h, w, c], dx).unwrap());
                    }
                }
                &Op::GlobalAvgPool(x) => {
                    let xt = self.value(x);
                    let (_, h, w, c) = xt.dims4();
                    let inv = 1.0 / (h * w) as f32;
                    let g = gy.data();
                    let mut dx = vec![0f32; xt.len()];
                    for (idx, px) in dx.chunks_exact_mut(c).enumerate() {
                        let i = idx / (h * w);
                        for (d, &gv) in px.iter_mut().zip(&g[i * c..(i + 1) * c]) {
                            *d = gv * inv;
                        }
                    }
                    accumulate(&mut grads, x, Tensor::from_vec(xt.shape(), dx).unwrap());
                }
                &Op::Concat(a, b) => {
                    let ca = self.value(a).dims4().3;
                    let cb = self.value(b).dims4().3;
                    let g = gy.data();
                    if self.ng(a) {
                        let d: Vec<f32> = g
                            .chunks_exact(ca + cb)
                            .flat_map(|px| px[..ca].iter().copied())
                            .collect();
                        accumulate(&mut grads, a, Tensor::from_vec(self.value(a).shape(), d).unwrap());
                    }
                    if self.ng(b) {
                        let d: Vec<f32> = g
                            .chunks_exact(ca + cb)
                            .flat_map(|px| px[ca..].iter().copied())
                            .collect();
                        accumulate(&mut grads, b, Tensor::from_vec(self.value(b).shape(), d).unwrap());
                    }
                }
                &Op::Linear { x, w, b } => {
                    let xt = self.value(x);
                    let n = xt.shape()[0];
                    let d = xt.len() / n;
                    let out_dim = node.value.shape()[1];
                    let wv = store.value(w);
                    gemm(
                        d,
                        n,
                        out_dim,
                        xt.data(),
                        1,
                        d,
                        gy.data(),
                        out_dim,
                        1,
                        1.0,
                        pg.slot(w, wv.len()),
                    );
                    if let Some(b) = b {
                        channel_sums(gy.data(), out_dim, pg.slot(b, out_dim));
                    }
                    if self.ng(x) {
                        let mut dx = vec![0f32; xt.len()];
                        gemm(n, out_dim, d, gy.data(), out_dim, 1, wv, 1, out_dim, 0.0, &mut dx);
                        accumulate(&mut grads, x, Tensor::from_vec(xt.shape(), dx).unwrap());
                    }
                }
                &Op::Flatten(x) => {
                    let shape = self.value(x).shape().to_vec();
                    accumulate(&mut grads, x, gy.reshape(&shape));
                }
            }
        }
        (pg, grads)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => add_into(existing.data_mut(), g.data()),
        slot @ None => *slot = Some(g),
    }
}
