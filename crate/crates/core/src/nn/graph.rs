//! Define-by-run reverse-mode differentiation over NCHW tensors.
//!
//! A [`Graph`] records every op applied during a forward pass. Calling
//! [`Graph::backward`] with one or more seed gradients sweeps the tape in
//! reverse and returns gradients for every node that requires them. Nodes
//! created with `requires_grad = false` (inputs, frozen parameters) stop
//! propagation, so no work is spent on gradients nobody asked for.

use super::tensor::{gemm, Tensor};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Param(usize),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample2 {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Relu {
        x: Var,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    Sigmoid {
        x: Var,
    },
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    /// Per-(sample, channel) or per-channel normalization followed by an
    /// affine transform. `per_sample` selects instance vs batch statistics.
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
        per_sample: bool,
    },
    /// Normalization with fixed statistics (batch norm in eval mode).
    FixedNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax {
        x: Var,
    },
    Pad {
        x: Var,
    },
    Crop {
        x: Var,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Batch statistics produced by a batch-norm op in training mode.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradients of parameter leaves keyed by their parameter index.
    /// A parameter bound more than once has its gradients summed.
    pub fn param_grads(&self) -> Vec<(usize, Tensor)> {
        let mut out: Vec<(usize, Tensor)> = Vec::new();
        for &(node, pidx) in &self.params {
            if let Some(g) = &self.grads[node] {
                match out.iter_mut().find(|(i, _)| *i == pidx) {
                    Some((_, acc)) => acc.add_assign(g),
                    None => out.push((pidx, g.clone())),
                }
            }
        }
        out.sort_by_key(|(i, _)| *i);
        out
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input; gradients are still collected for it when
    /// `requires_grad` is set.
    pub fn input(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, requires_grad, Op::Leaf)
    }

    pub fn param(&mut self, index: usize, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, requires_grad, Op::Param(index))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let [n, ci, h, wd] = xv.shape();
        let [co, wci, k, k2] = wv.shape();
        assert_eq!(ci, wci, "conv2d: input channels {ci} vs kernel {wci}");
        assert_eq!(k, k2, "conv2d: square kernels only");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let ckk = ci * k * k;
        let howo = ho * wo;
        let mut out = Tensor::zeros([n, co, ho, wo]);
        let mut cols = vec![0.0; ckk * howo];
        for s in 0..n {
            im2col(xv, s, k, stride, pad, ho, wo, &mut cols);
            let dst = &mut out.data_mut()[s * co * howo..(s + 1) * co * howo];
            gemm(
                co,
                ckk,
                howo,
                wv.data(),
                ckk as isize,
                1,
                &cols,
                howo as isize,
                1,
                0.0,
                dst,
                howo as isize,
                1,
            );
        }
        if let Some(b) = b {
            let bv = self.nodes[b.0].value.data().to_vec();
            for s in 0..n {
                for (c, bias) in bv.iter().enumerate() {
                    out.plane_mut(s, c).iter_mut().for_each(|v| *v += bias);
                }
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        self.push(
            out,
            rg,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
        )
    }

    pub fn max_pool2(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let [n, c, h, w] = xv.shape();
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Tensor::zeros([n, c, ho, wo]);
        let mut argmax = vec![0usize; n * c * ho * wo];
        let mut o = 0;
        for s in 0..n {
            for ch in 0..c {
                for y in 0..ho {
                    for xx in 0..wo {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = 0;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = xv.idx(s, ch, 2 * y + dy, 2 * xx + dx);
                                let v = xv.data()[i];
                                if v > best {
                                    best = v;
                                    best_i = i;
                                }
                            }
                        }
                        out.data_mut()[o] = best;
                        argmax[o] = best_i;
                        o += 1;
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, rg, Op::MaxPool2 { x, argmax })
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let [n, c, h, w] = xv.shape();
        let mut out = Tensor::zeros([n, c, 2 * h, 2 * w]);
        for s in 0..n {
            for ch in 0..c {
                let src = xv.plane(s, ch);
                let dst = out.plane_mut(s, ch);
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, rg, Op::Upsample2 { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(av.shape(), bv.shape(), "add: shape mismatch");
        let mut out = av.clone();
        out.add_assign(bv);
        let rg = self.rg(&[a, b]);
        self.push(out, rg, Op::Add { a, b })
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let [n, ca, h, w] = av.shape();
        let [nb, cb, hb, wb] = bv.shape();
        assert_eq!((n, h, w), (nb, hb, wb), "concat: spatial mismatch");
        let mut out = Tensor::zeros([n, ca + cb, h, w]);
        for s in 0..n {
            for c in 0..ca {
                out.plane_mut(s, c).copy_from_slice(av.plane(s, c));
            }
            for c in 0..cb {
                out.plane_mut(s, ca + c).copy_from_slice(bv.plane(s, c));
            }
        }
        let rg = self.rg(&[a, b]);
        self.push(out, rg, Op::Concat { a, b })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.map(|v| v.max(0.0));
        let rg = self.rg(&[x]);
        self.push(out, rg, Op::Relu { x })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let out = self.nodes[x.0]
            .value
            .map(|v| if v > 0.0 { v } else { slope * v });
        let rg = self.rg(&[x]);
        self.push(out, rg, Op::LeakyRelu { x, slope })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.map(sigmoid);
        let rg = self.rg(&[x]);
        self.push(out, rg, Op::Sigmoid { x })
    }

    /// Hard clamp into `[lo, hi]`; the gradient passes only strictly inside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.nodes[x.0].value.map(|v| v.clamp(lo, hi));
        let rg = self.rg(&[x]);
        self.push(out, rg, Op::Clamp { x, lo, hi })
    }

    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (out, xhat, inv_std, _) = self.normalize(x, gamma, beta, true);
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            out,
            rg,
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                per_sample: true,
            },
        )
    }

    /// Batch norm with statistics of the current batch.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var) -> (Var, BatchStats) {
        let (out, xhat, inv_std, stats) = self.normalize(x, gamma, beta, false);
        let rg = self.rg(&[x, gamma, beta]);
        let v = self.push(
            out,
            rg,
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                per_sample: false,
            },
        );
        (v, stats)
    }

    /// Batch norm with supplied (running) statistics.
    pub fn batch_norm_fixed(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
    ) -> Var {
        let xv = &self.nodes[x.0].value;
        let [n, c, _, _] = xv.shape();
        let g = self.nodes[gamma.0].value.data();
        let b = self.nodes[beta.0].value.data();
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let mut out = xv.clone();
        for s in 0..n {
            for ch in 0..c {
                let (m, is, gg, bb) = (mean[ch], inv_std[ch], g[ch], b[ch]);
                out.plane_mut(s, ch)
                    .iter_mut()
                    .for_each(|v| *v = gg * (*v - m) * is + bb);
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            out,
            rg,
            Op::FixedNorm {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                inv_std,
            },
        )
    }

    fn normalize(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        per_sample: bool,
    ) -> (Tensor, Tensor, Vec<f64>, BatchStats) {
        let xv = &self.nodes[x.0].value;
        let [n, c, h, w] = xv.shape();
        let hw = h * w;
        let g = self.nodes[gamma.0].value.data();
        let b = self.nodes[beta.0].value.data();
        let mut xhat = Tensor::zeros(xv.shape());
        let mut out = Tensor::zeros(xv.shape());
        let mut inv_std = Vec::new();
        let mut stats = BatchStats {
            mean: Vec::new(),
            var: Vec::new(),
        };
        if per_sample {
            for s in 0..n {
                for ch in 0..c {
                    let p = xv.plane(s, ch);
                    let mean = p.iter().sum::<f64>() / hw as f64;
                    let var = p.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / hw as f64;
                    let is = 1.0 / (var + NORM_EPS).sqrt();
                    inv_std.push(is);
                    let xh = xhat.plane_mut(s, ch);
                    for (d, v) in xh.iter_mut().zip(p) {
                        *d = (v - mean) * is;
                    }
                    let (gg, bb) = (g[ch], b[ch]);
                    let xh = xhat.plane(s, ch).to_vec();
                    for (o, v) in out.plane_mut(s, ch).iter_mut().zip(xh) {
                        *o = gg * v + bb;
                    }
                }
            }
        } else {
            let m = (n * hw) as f64;
            for ch in 0..c {
                let mut sum = 0.0;
                for s in 0..n {
                    sum += xv.plane(s, ch).iter().sum::<f64>();
                }
                let mean = sum / m;
                let mut sq = 0.0;
                for s in 0..n {
                    sq += xv.plane(s, ch).iter().map(|v| (v - mean).powi(2)).sum::<f64>();
                }
                let var = sq / m;
                let is = 1.0 / (var + NORM_EPS).sqrt();
                inv_std.push(is);
                stats.mean.push(mean);
                stats
                    .var
                    .push(if m > 1.0 { sq / (m - 1.0) } else { var });
                let (gg, bb) = (g[ch], b[ch]);
                for s in 0..n {
                    let p = xv.plane(s, ch).to_vec();
                    let xh = xhat.plane_mut(s, ch);
                    for (d, v) in xh.iter_mut().zip(&p) {
                        *d = (v - mean) * is;
                    }
                    let xh = xhat.plane(s, ch).to_vec();
                    for (o, v) in out.plane_mut(s, ch).iter_mut().zip(xh) {
                        *o = gg * v + bb;
                    }
                }
            }
        }
        (out, xhat, inv_std, stats)
    }

    /// Softmax across the channel dimension at every pixel.
    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let [n, c, h, w] = xv.shape();
        let hw = h * w;
        let mut out = Tensor::zeros(xv.shape());
        for s in 0..n {
            for i in 0..hw {
                let mut mx = f64::NEG_INFINITY;
                for ch in 0..c {
                    mx = mx.max(xv.data()[(s * c + ch) * hw + i]);
                }
                let mut z = 0.0;
                for ch in 0..c {
                    let e = (xv.data()[(s * c + ch) * hw + i] - mx).exp();
                    out.data_mut()[(s * c + ch) * hw + i] = e;
                    z += e;
                }
                for ch in 0..c {
                    out.data_mut()[(s * c + ch) * hw + i] /= z;
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, rg, Op::Softmax { x })
    }

    /// Zero-pads on the bottom and right edges.
    pub fn pad_bottom_right(&mut self, x: Var, ph: usize, pw: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let [n, c, h, w] = xv.shape();
        let mut out = Tensor::zeros([n, c, h + ph, w + pw]);
        for s in 0..n {
            for ch in 0..c {
                let src = xv.plane(s, ch);
                let dst = out.plane_mut(s, ch);
                for y in 0..h {
                    dst[y * (w + pw)..y * (w + pw) + w].copy_from_slice(&src[y * w..(y + 1) * w]);
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, rg, Op::Pad { x })
    }

    /// Keeps the top-left `h x w` window.
    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let [n, c, hi, wi] = xv.shape();
        assert!(h <= hi && w <= wi, "crop larger than input");
        let mut out = Tensor::zeros([n, c, h, w]);
        for s in 0..n {
            for ch in 0..c {
                let src = xv.plane(s, ch);
                let dst = out.plane_mut(s, ch);
                for y in 0..h {
                    dst[y * w..(y + 1) * w].copy_from_slice(&src[y * wi..y * wi + w]);
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, rg, Op::Crop { x })
    }

    /// Reverse sweep from the given seed gradients.
    pub fn backward(&self, seeds: Vec<(Var, Tensor)>) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (v, g) in seeds {
            assert_eq!(
                g.shape(),
                self.nodes[v.0].value.shape(),
                "seed gradient shape mismatch"
            );
            last = last.max(v.0);
            accumulate(&mut grads, v, g);
        }
        for i in (0..=last.min(self.nodes.len().saturating_sub(1))).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.backward_node(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(p) => Some((i, p)),
                _ => None,
            })
            .collect();
        Gradients { grads, params }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, i: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            &Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let xv = &self.nodes[x.0].value;
                let wv = &self.nodes[w.0].value;
                let [n, ci, _, _] = xv.shape();
                let [co, _, k, _] = wv.shape();
                let [_, _, ho, wo] = gout.shape();
                let ckk = ci * k * k;
                let howo = ho * wo;
                if let Some(b) = b {
                    if self.wants(b) {
                        let mut gb = vec![0.0; co];
                        for s in 0..n {
                            for (c, acc) in gb.iter_mut().enumerate() {
                                *acc += gout.plane(s, c).iter().sum::<f64>();
                            }
                        }
                        accumulate(grads, b, Tensor::channel_vector(gb));
                    }
                }
                let want_w = self.wants(w);
                let want_x = self.wants(x);
                if !want_w && !want_x {
                    return;
                }
                let mut gw = Tensor::zeros(wv.shape());
                let mut gx = Tensor::zeros(xv.shape());
                let mut cols = vec![0.0; ckk * howo];
                let mut dcols = vec![0.0; ckk * howo];
                for s in 0..n {
                    let go = &gout.data()[s * co * howo..(s + 1) * co * howo];
                    if want_w {
                        im2col(xv, s, k, stride, pad, ho, wo, &mut cols);
                        // gw[co, ckk] += go[co, howo] * cols^T
                        gemm(
                            co,
                            howo,
                            ckk,
                            go,
                            howo as isize,
                            1,
                            &cols,
                            1,
                            howo as isize,
                            1.0,
                            gw.data_mut(),
                            ckk as isize,
                            1,
                        );
                    }
                    if want_x {
                        // dcols[ckk, howo] = w^T * go
                        gemm(
                            ckk,
                            co,
                            howo,
                            wv.data(),
                            1,
                            ckk as isize,
                            go,
                            howo as isize,
                            1,
                            0.0,
                            &mut dcols,
                            howo as isize,
                            1,
                        );
                        col2im(&dcols, &mut gx, s, k, stride, pad, ho, wo);
                    }
                }
                if want_w {
                    accumulate(grads, w, gw);
                }
                if want_x {
                    accumulate(grads, x, gx);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if !self.wants(*x) {
                    return;
                }
                let mut gx = Tensor::zeros(self.nodes[x.0].value.shape());
                for (o, &src) in argmax.iter().enumerate() {
                    gx.data_mut()[src] += gout.data()[o];
                }
                accumulate(grads, *x, gx);
            }
            &Op::Upsample2 { x } => {
                if !self.wants(x) {
                    return;
                }
                let [n, c, h, w] = self.nodes[x.0].value.shape();
                let mut gx = Tensor::zeros([n, c, h, w]);
                for s in 0..n {
                    for ch in 0..c {
                        let src = gout.plane(s, ch);
                        let dst = gx.plane_mut(s, ch);
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
                            }
                        }
                    }
                }
                accumulate(grads, x, gx);
            }
            &Op::Add { a, b } => {
                if self.wants(a) {
                    accumulate(grads, a, gout.clone());
                }
                if self.wants(b) {
                    accumulate(grads, b, gout.clone());
                }
            }
            &Op::Concat { a, b } => {
                let [n, ca, h, w] = self.nodes[a.0].value.shape();
                let cb = self.nodes[b.0].value.c();
                if self.wants(a) {
                    let mut ga = Tensor::zeros([n, ca, h, w]);
                    for s in 0..n {
                        for c in 0..ca {
                            ga.plane_mut(s, c).copy_from_slice(gout.plane(s, c));
                        }
                    }
                    accumulate(grads, a, ga);
                }
                if self.wants(b) {
                    let mut gb = Tensor::zeros([n, cb, h, w]);
                    for s in 0..n {
                        for c in 0..cb {
                            gb.plane_mut(s, c).copy_from_slice(gout.plane(s, ca + c));
                        }
                    }
                    accumulate(grads, b, gb);
                }
            }
            &Op::Relu { x } => {
                if !self.wants(x) {
                    return;
                }
                let xv = &self.nodes[x.0].value;
                let data = gout
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(grads, x, Tensor::from_vec(xv.shape(), data));
            }
            &Op::Clamp { x, lo, hi } => {
                if !self.wants(x) {
                    return;
                }
                let xv = &self.nodes[x.0].value;
                let data = gout
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(g, v)| if *v > lo && *v < hi { *g } else { 0.0 })
                    .collect();
                accumulate(grads, x, Tensor::from_vec(xv.shape(), data));
            }
            &Op::LeakyRelu { x, slope } => {
                if !self.wants(x) {
                    return;
                }
                let xv = &self.nodes[x.0].value;
                let data = gout
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(g, v)| if *v > 0.0 { *g } else { slope * g })
                    .collect();
                accumulate(grads, x, Tensor::from_vec(xv.shape(), data));
            }
            &Op::Sigmoid { x } => {
                if !self.wants(x) {
                    return;
                }
                let y = &node.value;
                let data = gout
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect();
                accumulate(grads, x, Tensor::from_vec(y.shape(), data));
            }
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                per_sample,
            } => {
                let [n, c, h, w] = xhat.shape();
                let hw = h * w;
                let g = self.nodes[gamma.0].value.data();
                let mut gg = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let go = gout.plane(s, ch);
                        let xh = xhat.plane(s, ch);
                        gg[ch] += go.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>();
                        gbeta[ch] += go.iter().sum::<f64>();
                    }
                }
                if self.wants(*x) {
                    let mut gx = Tensor::zeros(xhat.shape());
                    if *per_sample {
                        let m = hw as f64;
                        for s in 0..n {
                            for ch in 0..c {
                                let go = gout.plane(s, ch);
                                let xh = xhat.plane(s, ch);
                                let gam = g[ch];
                                let sum_d: f64 = go.iter().sum::<f64>() * gam;
                                let sum_dx: f64 =
                                    go.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() * gam;
                                let is = inv_std[s * c + ch];
                                let dst = gx.plane_mut(s, ch);
                                for j in 0..hw {
                                    dst[j] = is / m * (m * gam * go[j] - sum_d - xh[j] * sum_dx);
                                }
                            }
                        }
                    } else {
                        let m = (n * hw) as f64;
                        for ch in 0..c {
                            let gam = g[ch];
                            let sum_d = gbeta[ch] * gam;
                            let sum_dx = gg[ch] * gam;
                            let is = inv_std[ch];
                            for s in 0..n {
                                let go = gout.plane(s, ch).to_vec();
                                let xh = xhat.plane(s, ch).to_vec();
                                let dst = gx.plane_mut(s, ch);
                                for j in 0..hw {
                                    dst[j] = is / m * (m * gam * go[j] - sum_d - xh[j] * sum_dx);
                                }
                            }
                        }
                    }
                    accumulate(grads, *x, gx);
                }
                if self.wants(*gamma) {
                    accumulate(grads, *gamma, Tensor::channel_vector(gg));
                }
                if self.wants(*beta) {
                    accumulate(grads, *beta, Tensor::channel_vector(gbeta));
                }
            }
            Op::FixedNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let xv = &self.nodes[x.0].value;
                let [n, c, _, _] = xv.shape();
                let g = self.nodes[gamma.0].value.data();
                let mut gg = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                let mut gx = Tensor::zeros(xv.shape());
                for s in 0..n {
                    for ch in 0..c {
                        let go = gout.plane(s, ch);
                        let xp = xv.plane(s, ch);
                        for (gv, xval) in go.iter().zip(xp) {
                            gg[ch] += gv * (xval - mean[ch]) * inv_std[ch];
                            gbeta[ch] += gv;
                        }
                        let k = g[ch] * inv_std[ch];
                        for (d, gv) in gx.plane_mut(s, ch).iter_mut().zip(go) {
                            *d = gv * k;
                        }
                    }
                }
                if self.wants(*x) {
                    accumulate(grads, *x, gx);
                }
                if self.wants(*gamma) {
                    accumulate(grads, *gamma, Tensor::channel_vector(gg));
                }
                if self.wants(*beta) {
                    accumulate(grads, *beta, Tensor::channel_vector(gbeta));
                }
            }
            &Op::Softmax { x } => {
                if !self.wants(x) {
                    return;
                }
                let p = &node.value;
                let [n, c, h, w] = p.shape();
                let hw = h * w;
                let mut gx = Tensor::zeros(p.shape());
                for s in 0..n {
                    for i in 0..hw {
                        let mut dot = 0.0;
                        for ch in 0..c {
                            let j = (s * c + ch) * hw + i;
                            dot += gout.data()[j] * p.data()[j];
                        }
                        for ch in 0..c {
                            let j = (s * c + ch) * hw + i;
                            gx.data_mut()[j] = p.data()[j] * (gout.data()[j] - dot);
                        }
                    }
                }
                accumulate(grads, x, gx);
            }
            &Op::Pad { x } => {
                if !self.wants(x) {
                    return;
                }
                let [n, c, h, w] = self.nodes[x.0].value.shape();
                let wp = gout.w();
                let mut gx = Tensor::zeros([n, c, h, w]);
                for s in 0..n {
                    for ch in 0..c {
                        let src = gout.plane(s, ch);
                        let dst = gx.plane_mut(s, ch);
                        for y in 0..h {
                            dst[y * w..(y + 1) * w].copy_from_slice(&src[y * wp..y * wp + w]);
                        }
                    }
                }
                accumulate(grads, x, gx);
            }
            &Op::Crop { x } => {
                if !self.wants(x) {
                    return;
                }
                let [n, c, hi, wi] = self.nodes[x.0].value.shape();
                let [_, _, h, w] = gout.shape();
                let mut gx = Tensor::zeros([n, c, hi, wi]);
                for s in 0..n {
                    for ch in 0..c {
                        let src = gout.plane(s, ch);
                        let dst = gx.plane_mut(s, ch);
                        for y in 0..h {
                            dst[y * wi..y * wi + w].copy_from_slice(&src[y * w..(y + 1) * w]);
                        }
                    }
                }
                accumulate(grads, x, gx);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &Tensor,
    s: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [f64],
) {
    let [_, ci, h, w] = x.shape();
    let howo = ho * wo;
    for c in 0..ci {
        let plane = x.plane(s, c);
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * howo..(row + 1) * howo];
                let (lo, hi) = valid_range(kx, stride, pad, w, wo);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize || lo >= hi {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    let ix0 = lo * stride + kx - pad;
                    if stride == 1 {
                        line[lo..hi].copy_from_slice(&src[ix0..ix0 + hi - lo]);
                    } else {
                        for (j, d) in line[lo..hi].iter_mut().enumerate() {
                            *d = src[ix0 + j * stride];
                        }
                    }
                }
            }
        }
    }
}

/// Output columns `[lo, hi)` whose input column `ox * stride + kx - pad`
/// lies inside `[0, w)`.
fn valid_range(kx: usize, stride: usize, pad: usize, w: usize, wo: usize) -> (usize, usize) {
    let lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(stride) };
    // largest ox with ox * stride + kx - pad <= w - 1
    let hi = if w + pad < kx + 1 {
        0
    } else {
        ((w + pad - kx - 1) / stride + 1).min(wo)
    };
    (lo.min(hi), hi)
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    gx: &mut Tensor,
    s: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    let [_, ci, h, w] = gx.shape();
    let howo = ho * wo;
    for c in 0..ci {
        let plane = gx.plane_mut(s, c);
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * howo..(row + 1) * howo];
                let (lo, hi) = valid_range(kx, stride, pad, w, wo);
                if lo >= hi {
                    continue;
                }
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let line = &src[oy * wo + lo..oy * wo + hi];
                    let base = iy as usize * w + lo * stride + kx - pad;
                    if stride == 1 {
                        for (d, v) in plane[base..base + hi - lo].iter_mut().zip(line) {
                            *d += v;
                        }
                    } else {
                        for (j, v) in line.iter().enumerate() {
                            plane[base + j * stride] += v;
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
    fn valid_range_matches_brute_force() {
        for w in 1..9 {
            for k in [1usize, 3, 5] {
                for pad in 0..=k / 2 {
                    for stride in 1..3 {
                        if w + 2 * pad < k {
                            continue;
                        }
                        let wo = (w + 2 * pad - k) / stride + 1;
                        for kx in 0..k {
                            let ok: Vec<usize> = (0..wo)
                                .filter(|ox| {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    ix >= 0 && ix < w as isize
                                })
                                .collect();
                            let (lo, hi) = valid_range(kx, stride, pad, w, wo);
                            assert_eq!((lo..hi).collect::<Vec<_>>(), ok, "w={w} k={k} pad={pad} s={stride} kx={kx}");
                        }
                    }
                }
            }
        }
    }
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of d(sum(out * probe))/d(leaf) for a graph
    /// builder `f` taking the leaf tensors.
    fn check<F>(leaves: Vec<Tensor>, f: F)
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut g = Graph::new();
        let vars: Vec<Var> = leaves.iter().map(|t| g.input(t.clone(), true)).collect();
        let out = f(&mut g, &vars);
        let probe = rand_tensor(&mut rng, g.value(out).shape());
        let grads = g.backward(vec![(out, probe.clone())]);
        let objective = |ls: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ls.iter().map(|t| g.input(t.clone(), false)).collect();
            let out = f(&mut g, &vars);
            g.value(out)
                .data()
                .iter()
                .zip(probe.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let eps = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads.get(vars[li]).expect("missing grad");
            for j in 0..leaf.len() {
                let mut plus = leaves.clone();
                plus[li].data_mut()[j] += eps;
                let mut minus = leaves.clone();
                minus[li].data_mut()[j] -= eps;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * eps);
                let an = analytic.data()[j];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(err < 1e-5, "leaf {li} elem {j}: fd {fd} vs analytic {an}");
            }
        }
    }

    #[test]
    fn conv2d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, [2, 2, 5, 5]);
        let w = rand_tensor(&mut rng, [3, 2, 3, 3]);
        let b = rand_tensor(&mut rng, [1, 3, 1, 1]);
        check(vec![x.clone(), w.clone(), b.clone()], |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), 1, 1)
        });
        check(vec![x, w, b], |g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1));
    }

    #[test]
    fn norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, [2, 3, 4, 4]);
        let gm = rand_tensor(&mut rng, [1, 3, 1, 1]);
        let bt = rand_tensor(&mut rng, [1, 3, 1, 1]);
        check(vec![x.clone(), gm.clone(), bt.clone()], |g, v| {
            g.instance_norm(v[0], v[1], v[2])
        });
        check(vec![x.clone(), gm.clone(), bt.clone()], |g, v| {
            g.batch_norm(v[0], v[1], v[2]).0
        });
        check(vec![x, gm, bt], |g, v| {
            g.batch_norm_fixed(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[1.5, 0.7, 2.0])
        });
    }

    #[test]
    fn shape_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, [2, 2, 4, 4]);
        let y = rand_tensor(&mut rng, [2, 1, 4, 4]);
        check(vec![x.clone()], |g, v| g.max_pool2(v[0]));
        check(vec![x.clone()], |g, v| g.upsample2(v[0]));
        check(vec![x.clone(), y.clone()], |g, v| g.concat(v[0], v[1]));
        check(vec![x.clone()], |g, v| g.softmax_channels(v[0]));
        check(vec![x.clone()], |g, v| g.sigmoid(v[0]));
        check(vec![x.clone()], |g, v| g.clamp(v[0], -0.5, 0.5));
        check(vec![x.clone()], |g, v| g.leaky_relu(v[0], 0.2));
        check(vec![x.clone()], |g, v| {
            let p = g.pad_bottom_right(v[0], 1, 2);
            g.crop(p, 3, 5)
        });
        check(vec![x.clone(), x], |g, v| g.add(v[0], v[1]));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::new();
        let x = g.input(rand_tensor(&mut rng, [1, 2, 3, 3]).map(|v| v * 50.0), false);
        let p = g.softmax_channels(x);
        let pv = g.value(p);
        for i in 0..9 {
            let s = pv.data()[i] + pv.data()[9 + i];
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_leaves_receive_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let x = g.input(rand_tensor(&mut rng, [1, 1, 4, 4]), true);
        let w = g.param(0, rand_tensor(&mut rng, [1, 1, 3, 3]), false);
        let y = g.conv2d(x, w, None, 1, 1);
        let grads = g.backward(vec![(y, Tensor::full([1, 1, 4, 4], 1.0))]);
        assert!(grads.get(x).is_some());
        assert!(grads.get(w).is_none());
        assert!(grads.param_grads().is_empty());
    }
}
