//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every operation appends a node holding its forward value and, when any
//! input requires a gradient, a closure that pushes the incoming gradient
//! back to its inputs. [`Tape::backward`] walks the nodes in reverse
//! insertion order, which is a valid topological order by construction.
//!
//! The op set is exactly what the skeleton encoder, the TEU decoder and the
//! training objectives need; all ops work on `(N, C, T, V)` feature maps or
//! on small row-major matrices.

use crate::tensor::{axpy, dot, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

type BackwardFn = Box<dyn Fn(&Tape, &Tensor, &mut Grads)>;

struct Node {
    value: Tensor,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node on the tape.
pub struct Grads {
    slots: Vec<Option<Tensor>>,
}

impl Grads {
    fn accumulate(&mut self, v: Var, g: Tensor) {
        match &mut self.slots[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.slots[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros shaped like its value when nothing flowed in.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }
}

#[inline]
fn idx4(c: usize, t: usize, v: usize, ni: usize, ci: usize, ti: usize, vi: usize) -> usize {
    ((ni * c + ci) * t + ti) * v + vi
}

/// Rows `[lo, hi)` of a strided temporal convolution output that read
/// an in-range input frame for kernel tap `j`.
#[inline]
fn tap_range(j: usize, pad: usize, stride: usize, t_in: usize, t_out: usize) -> (usize, usize) {
    let lo = if j >= pad { 0 } else { (pad - j).div_ceil(stride) };
    let hi = if t_in + pad > j {
        ((t_in + pad - j).div_ceil(stride)).min(t_out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push<F>(&mut self, value: Tensor, inputs: &[Var], backward: F) -> Var
    where
        F: Fn(&Tape, &Tensor, &mut Grads) + 'static,
    {
        let requires_grad = inputs.iter().any(|&v| self.requires_grad(v));
        self.nodes.push(Node {
            value,
            requires_grad,
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn),
        });
        Var(self.nodes.len() - 1)
    }

    /// Back-propagates from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).len(), 1, "backward() needs a scalar loss");
        let mut grads = Grads {
            slots: vec![None; self.nodes.len()],
        };
        grads.slots[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(bw) = &self.nodes[i].backward else {
                continue;
            };
            let Some(g) = grads.slots[i].take() else {
                continue;
            };
            bw(self, &g, &mut grads);
            grads.slots[i] = Some(g);
        }
        grads
    }

    // ---------------------------------------------------------------------
    // elementwise
    // ---------------------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        self.push(y, &[a, b], move |tape, g, grads| {
            if tape.requires_grad(a) {
                grads.accumulate(a, g.clone());
            }
            if tape.requires_grad(b) {
                grads.accumulate(b, g.clone());
            }
        })
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let y = self.value(a).map(|x| x * s);
        self.push(y, &[a], move |_, g, grads| {
            grads.accumulate(a, g.map(|x| x * s));
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mul shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let y = Tensor::from_vec(av.shape(), data);
        self.push(y, &[a, b], move |tape, g, grads| {
            let (av, bv) = (tape.value(a), tape.value(b));
            if tape.requires_grad(a) {
                let d = g.data().iter().zip(bv.data()).map(|(g, y)| g * y).collect();
                grads.accumulate(a, Tensor::from_vec(g.shape(), d));
            }
            if tape.requires_grad(b) {
                let d = g.data().iter().zip(av.data()).map(|(g, x)| g * x).collect();
                grads.accumulate(b, Tensor::from_vec(g.shape(), d));
            }
        })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let y = self.value(a).map(|x| x.max(0.0));
        self.push(y, &[a], move |tape, g, grads| {
            let x = tape.value(a);
            let d = g
                .data()
                .iter()
                .zip(x.data())
                .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                .collect();
            grads.accumulate(a, Tensor::from_vec(g.shape(), d));
        })
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), &[a], move |tape, g, grads| {
            grads.accumulate(a, Tensor::full(tape.value(a).shape(), g.item()));
        })
    }

    /// `Σ a ⊙ w` for a constant weight tensor `w`.
    pub fn weighted_sum(&mut self, a: Var, w: &Tensor) -> Var {
        assert_eq!(self.value(a).shape(), w.shape(), "weighted_sum shape mismatch");
        let s = dot(self.value(a).data(), w.data());
        let w = w.clone();
        self.push(Tensor::scalar(s), &[a], move |_, g, grads| {
            grads.accumulate(a, w.map(|x| x * g.item()));
        })
    }

    // ---------------------------------------------------------------------
    // feature-map ops, layout (N, C, T, V)
    // ---------------------------------------------------------------------

    /// Concatenation along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        let (n, _, t, v) = self.value(parts[0]).dims4();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (pn, pc, pt, pv) = self.value(p).dims4();
                assert!(pn == n && pt == t && pv == v, "concat shape mismatch");
                pc
            })
            .collect();
        let c: usize = widths.iter().sum();
        let plane = t * v;
        let mut y = Tensor::zeros(&[n, c, t, v]);
        let mut offset = 0;
        for (&p, &pc) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for ni in 0..n {
                let dst = (ni * c + offset) * plane;
                y.data_mut()[dst..dst + pc * plane]
                    .copy_from_slice(&src[ni * pc * plane..(ni + 1) * pc * plane]);
            }
            offset += pc;
        }
        let parts_owned = parts.to_vec();
        self.push(y, parts, move |tape, g, grads| {
            let mut offset = 0;
            for (&p, &pc) in parts_owned.iter().zip(&widths) {
                if tape.requires_grad(p) {
                    let mut d = Vec::with_capacity(n * pc * plane);
                    for ni in 0..n {
                        let src = (ni * c + offset) * plane;
                        d.extend_from_slice(&g.data()[src..src + pc * plane]);
                    }
                    grads.accumulate(p, Tensor::from_vec(&[n, pc, t, v], d));
                }
                offset += pc;
            }
        })
    }

    /// Pointwise channel projection: `y[n,o] = Σ_c w[o,c] x[n,c] + b[o]`.
    pub fn conv1x1(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (n, ci, t, v) = self.value(x).dims4();
        let wv = self.value(w);
        assert_eq!(wv.rank(), 2, "conv1x1 weight must be (C_out, C_in)");
        let co = wv.shape()[0];
        assert_eq!(wv.shape()[1], ci, "conv1x1 expects {} input channels", wv.shape()[1]);
        let plane = t * v;
        let mut y = Tensor::zeros(&[n, co, t, v]);
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            let bd = b.map(|b| self.value(b).data().to_vec());
            let yd = y.data_mut();
            for ni in 0..n {
                for o in 0..co {
                    let yp = &mut yd[(ni * co + o) * plane..(ni * co + o + 1) * plane];
                    if let Some(bd) = &bd {
                        yp.fill(bd[o]);
                    }
                    for c in 0..ci {
                        let xp = &xd[(ni * ci + c) * plane..(ni * ci + c + 1) * plane];
                        axpy(wd[o * ci + c], xp, yp);
                    }
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(y, &inputs, move |tape, g, grads| {
            let xd = tape.value(x).data();
            let wd = tape.value(w).data();
            let gd = g.data();
            if tape.requires_grad(x) {
                let mut dx = Tensor::zeros(&[n, ci, t, v]);
                let dxd = dx.data_mut();
                for ni in 0..n {
                    for c in 0..ci {
                        let dp = &mut dxd[(ni * ci + c) * plane..(ni * ci + c + 1) * plane];
                        for o in 0..co {
                            let gp = &gd[(ni * co + o) * plane..(ni * co + o + 1) * plane];
                            axpy(wd[o * ci + c], gp, dp);
                        }
                    }
                }
                grads.accumulate(x, dx);
            }
            if tape.requires_grad(w) {
                let mut dw = Tensor::zeros(&[co, ci]);
                let dwd = dw.data_mut();
                for ni in 0..n {
                    for o in 0..co {
                        let gp = &gd[(ni * co + o) * plane..(ni * co + o + 1) * plane];
                        for c in 0..ci {
                            let xp = &xd[(ni * ci + c) * plane..(ni * ci + c + 1) * plane];
                            dwd[o * ci + c] += dot(gp, xp);
                        }
                    }
                }
                grads.accumulate(w, dw);
            }
            if let Some(b) = b {
                if tape.requires_grad(b) {
                    let mut db = Tensor::zeros(&[co]);
                    for ni in 0..n {
                        for o in 0..co {
                            let gp = &gd[(ni * co + o) * plane..(ni * co + o + 1) * plane];
                            db.data_mut()[o] += gp.iter().sum::<f64>();
                        }
                    }
                    grads.accumulate(b, db);
                }
            }
        })
    }

    /// 1-D convolution along time with "same" zero padding, applied
    /// independently at every joint. Weight shape `(C_out, C_in, K)` with odd
    /// `K`; output length is `ceil(T / stride)`.
    pub fn temporal_conv(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Var {
        let (n, ci, t, v) = self.value(x).dims4();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 3, "temporal kernel must be (C_out, C_in, K)");
        assert_eq!(ws[1], ci, "temporal conv expects {} input channels", ws[1]);
        assert!(ws[2] % 2 == 1, "temporal kernel size must be odd");
        assert!(stride >= 1);
        let (co, k) = (ws[0], ws[2]);
        let pad = (k - 1) / 2;
        let to = (t + 2 * pad - k) / stride + 1;
        let mut y = Tensor::zeros(&[n, co, to, v]);
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            let bd = b.map(|b| self.value(b).data().to_vec());
            let yd = y.data_mut();
            for ni in 0..n {
                for o in 0..co {
                    let yp = &mut yd[(ni * co + o) * to * v..(ni * co + o + 1) * to * v];
                    if let Some(bd) = &bd {
                        yp.fill(bd[o]);
                    }
                    for c in 0..ci {
                        let xp = &xd[(ni * ci + c) * t * v..(ni * ci + c + 1) * t * v];
                        for j in 0..k {
                            let wj = wd[(o * ci + c) * k + j];
                            let (lo, hi) = tap_range(j, pad, stride, t, to);
                            if stride == 1 {
                                let src = lo + j - pad;
                                axpy(wj, &xp[src * v..(src + hi - lo) * v], &mut yp[lo * v..hi * v]);
                            } else {
                                for r in lo..hi {
                                    let src = r * stride + j - pad;
                                    axpy(wj, &xp[src * v..src * v + v], &mut yp[r * v..r * v + v]);
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(y, &inputs, move |tape, g, grads| {
            let xd = tape.value(x).data();
            let wd = tape.value(w).data();
            let gd = g.data();
            if tape.requires_grad(x) {
                let mut dx = Tensor::zeros(&[n, ci, t, v]);
                let dxd = dx.data_mut();
                for ni in 0..n {
                    for o in 0..co {
                        let gp = &gd[(ni * co + o) * to * v..(ni * co + o + 1) * to * v];
                        for c in 0..ci {
                            let dp = &mut dxd[(ni * ci + c) * t * v..(ni * ci + c + 1) * t * v];
                            for j in 0..k {
                                let wj = wd[(o * ci + c) * k + j];
                                let (lo, hi) = tap_range(j, pad, stride, t, to);
                                if stride == 1 {
                                    let dst = lo + j - pad;
                                    axpy(wj, &gp[lo * v..hi * v], &mut dp[dst * v..(dst + hi - lo) * v]);
                                } else {
                                    for r in lo..hi {
                                        let dst = r * stride + j - pad;
                                        axpy(wj, &gp[r * v..r * v + v], &mut dp[dst * v..dst * v + v]);
                                    }
                                }
                            }
                        }
                    }
                }
                grads.accumulate(x, dx);
            }
            if tape.requires_grad(w) {
                let mut dw = Tensor::zeros(&[co, ci, k]);
                let dwd = dw.data_mut();
                for ni in 0..n {
                    for o in 0..co {
                        let gp = &gd[(ni * co + o) * to * v..(ni * co + o + 1) * to * v];
                        for c in 0..ci {
                            let xp = &xd[(ni * ci + c) * t * v..(ni * ci + c + 1) * t * v];
                            for j in 0..k {
                                let (lo, hi) = tap_range(j, pad, stride, t, to);
                                let acc = if stride == 1 {
                                    let src = lo + j - pad;
                                    dot(&gp[lo * v..hi * v], &xp[src * v..(src + hi - lo) * v])
                                } else {
                                    (lo..hi)
                                        .map(|r| {
                                            let src = r * stride + j - pad;
                                            dot(&gp[r * v..r * v + v], &xp[src * v..src * v + v])
                                        })
                                        .sum()
                                };
                                dwd[(o * ci + c) * k + j] += acc;
                            }
                        }
                    }
                }
                grads.accumulate(w, dw);
            }
            if let Some(b) = b {
                if tape.requires_grad(b) {
                    let mut db = Tensor::zeros(&[co]);
                    for ni in 0..n {
                        for o in 0..co {
                            let gp = &gd[(ni * co + o) * to * v..(ni * co + o + 1) * to * v];
                            db.data_mut()[o] += gp.iter().sum::<f64>();
                        }
                    }
                    grads.accumulate(b, db);
                }
            }
        })
    }

    /// Graph aggregation over joints: `y[..., w] = Σ_v x[..., v] adj[v, w]`.
    /// The adjacency is a constant.
    pub fn joint_mix(&mut self, x: Var, adj: &Tensor) -> Var {
        let (n, c, t, v) = self.value(x).dims4();
        assert_eq!(adj.shape(), &[v, v], "adjacency must be {v}x{v}");
        let rows = n * c * t;
        let ad = adj.data().to_vec();
        let mut y = Tensor::zeros(&[n, c, t, v]);
        {
            let xd = self.value(x).data();
            let yd = y.data_mut();
            for r in 0..rows {
                let xr = &xd[r * v..(r + 1) * v];
                let yr = &mut yd[r * v..(r + 1) * v];
                for (vi, &xv) in xr.iter().enumerate() {
                    axpy(xv, &ad[vi * v..(vi + 1) * v], yr);
                }
            }
        }
        self.push(y, &[x], move |_, g, grads| {
            let gd = g.data();
            let mut dx = Tensor::zeros(&[n, c, t, v]);
            let dxd = dx.data_mut();
            for r in 0..rows {
                let gr = &gd[r * v..(r + 1) * v];
                for vi in 0..v {
                    dxd[r * v + vi] = dot(gr, &ad[vi * v..(vi + 1) * v]);
                }
            }
            grads.accumulate(x, dx);
        })
    }

    /// Per-channel normalisation with batch statistics over `(N, T, V)`.
    /// Returns the output together with the biased batch mean and variance.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> (Var, Vec<f64>, Vec<f64>) {
        let (n, c, t, v) = self.value(x).dims4();
        let plane = t * v;
        let m = (n * plane) as f64;
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut means = vec![0.0; c];
        let mut vars = vec![0.0; c];
        let mut inv = vec![0.0; c];
        let mut xhat = Tensor::zeros(&[n, c, t, v]);
        let mut y = Tensor::zeros(&[n, c, t, v]);
        for ci in 0..c {
            let planes = (0..n).map(|ni| (ni * c + ci) * plane);
            let mean = planes.clone().map(|o| xd[o..o + plane].iter().sum::<f64>()).sum::<f64>() / m;
            let var = planes
                .clone()
                .map(|o| xd[o..o + plane].iter().map(|x| (x - mean) * (x - mean)).sum::<f64>())
                .sum::<f64>()
                / m;
            let is = 1.0 / (var + eps).sqrt();
            for o in planes {
                for i in o..o + plane {
                    let h = (xd[i] - mean) * is;
                    xhat.data_mut()[i] = h;
                    y.data_mut()[i] = gd[ci] * h + bd[ci];
                }
            }
            means[ci] = mean;
            vars[ci] = var;
            inv[ci] = is;
        }
        let out = self.push(y, &[x, gamma, beta], move |tape, g, grads| {
            let gam = tape.value(gamma).data();
            let gd = g.data();
            let hd = xhat.data();
            let mut sdy = vec![0.0; c];
            let mut sdyx = vec![0.0; c];
            for ci in 0..c {
                for ni in 0..n {
                    let o = (ni * c + ci) * plane;
                    sdy[ci] += gd[o..o + plane].iter().sum::<f64>();
                    sdyx[ci] += dot(&gd[o..o + plane], &hd[o..o + plane]);
                }
            }
            if tape.requires_grad(x) {
                let mut dx = Tensor::zeros(&[n, c, t, v]);
                for ci in 0..c {
                    let k = gam[ci] * inv[ci] / m;
                    for ni in 0..n {
                        let o = (ni * c + ci) * plane;
                        for i in o..o + plane {
                            dx.data_mut()[i] = k * (m * gd[i] - sdy[ci] - hd[i] * sdyx[ci]);
                        }
                    }
                }
                grads.accumulate(x, dx);
            }
            if tape.requires_grad(gamma) {
                grads.accumulate(gamma, Tensor::from_vec(&[c], sdyx.clone()));
            }
            if tape.requires_grad(beta) {
                grads.accumulate(beta, Tensor::from_vec(&[c], sdy));
            }
        });
        (out, means, vars)
    }

    /// Per-channel normalisation with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Var {
        let (n, c, t, v) = self.value(x).dims4();
        let plane = t * v;
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mean = mean.to_vec();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut y = self.value(x).clone();
        for ni in 0..n {
            for ci in 0..c {
                let o = (ni * c + ci) * plane;
                for e in &mut y.data_mut()[o..o + plane] {
                    *e = gd[ci] * (*e - mean[ci]) * inv[ci] + bd[ci];
                }
            }
        }
        self.push(y, &[x, gamma, beta], move |tape, g, grads| {
            let xd = tape.value(x).data();
            let gam = tape.value(gamma).data();
            let gd = g.data();
            if tape.requires_grad(x) {
                let mut dx = g.clone();
                for ni in 0..n {
                    for ci in 0..c {
                        let o = (ni * c + ci) * plane;
                        for e in &mut dx.data_mut()[o..o + plane] {
                            *e *= gam[ci] * inv[ci];
                        }
                    }
                }
                grads.accumulate(x, dx);
            }
            let mut dgam = vec![0.0; c];
            let mut dbet = vec![0.0; c];
            for ni in 0..n {
                for ci in 0..c {
                    let o = (ni * c + ci) * plane;
                    for i in o..o + plane {
                        dgam[ci] += gd[i] * (xd[i] - mean[ci]) * inv[ci];
                        dbet[ci] += gd[i];
                    }
                }
            }
            if tape.requires_grad(gamma) {
                grads.accumulate(gamma, Tensor::from_vec(&[c], dgam));
            }
            if tape.requires_grad(beta) {
                grads.accumulate(beta, Tensor::from_vec(&[c], dbet));
            }
        })
    }

    /// Nearest-neighbour resampling along time: output frame `t` reads input
    /// frame `floor(t * T_in / T_out)`.
    pub fn resample_time(&mut self, x: Var, t_out: usize) -> Var {
        let (n, c, t, v) = self.value(x).dims4();
        let src: Vec<usize> = (0..t_out).map(|to| to * t / t_out).collect();
        let mut y = Tensor::zeros(&[n, c, t_out, v]);
        {
            let xd = self.value(x).data();
            let yd = y.data_mut();
            for p in 0..n * c {
                for (to, &ti) in src.iter().enumerate() {
                    let d = (p * t_out + to) * v;
                    let s = (p * t + ti) * v;
                    yd[d..d + v].copy_from_slice(&xd[s..s + v]);
                }
            }
        }
        self.push(y, &[x], move |_, g, grads| {
            let gd = g.data();
            let mut dx = Tensor::zeros(&[n, c, t, v]);
            let dxd = dx.data_mut();
            for p in 0..n * c {
                for (to, &ti) in src.iter().enumerate() {
                    let s = (p * t_out + to) * v;
                    let d = (p * t + ti) * v;
                    axpy(1.0, &gd[s..s + v], &mut dxd[d..d + v]);
                }
            }
            grads.accumulate(x, dx);
        })
    }

    /// Softmax along the time axis, independently per `(n, c, v)`.
    pub fn softmax_time(&mut self, x: Var) -> Var {
        let (n, c, t, v) = self.value(x).dims4();
        let mut y = self.value(x).clone();
        {
            let yd = y.data_mut();
            for p in 0..n * c {
                for vi in 0..v {
                    let at = |ti: usize| (p * t + ti) * v + vi;
                    let mx = (0..t).map(|ti| yd[at(ti)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for ti in 0..t {
                        let e = (yd[at(ti)] - mx).exp();
                        yd[at(ti)] = e;
                        z += e;
                    }
                    for ti in 0..t {
                        yd[at(ti)] /= z;
                    }
                }
            }
        }
        let out = self.push(y, &[x], move |_, _, _| {});
        // The backward closure needs the output value, which only exists
        // once the node is on the tape.
        self.nodes[out.0].backward = self.nodes[out.0].requires_grad.then(|| {
            Box::new(move |tape: &Tape, g: &Tensor, grads: &mut Grads| {
                let yd = tape.value(out).data();
                let gd = g.data();
                let mut dx = Tensor::zeros(&[n, c, t, v]);
                let dxd = dx.data_mut();
                for p in 0..n * c {
                    for vi in 0..v {
                        let at = |ti: usize| (p * t + ti) * v + vi;
                        let s: f64 = (0..t).map(|ti| gd[at(ti)] * yd[at(ti)]).sum();
                        for ti in 0..t {
                            dxd[at(ti)] = yd[at(ti)] * (gd[at(ti)] - s);
                        }
                    }
                }
                grads.accumulate(x, dx);
            }) as BackwardFn
        });
        out
    }

    /// Temporal average pooling to one frame, replicated `t_out` times.
    pub fn time_mean_broadcast(&mut self, x: Var, t_out: usize) -> Var {
        let (n, c, t, v) = self.value(x).dims4();
        let mut y = Tensor::zeros(&[n, c, t_out, v]);
        {
            let xd = self.value(x).data();
            let yd = y.data_mut();
            for p in 0..n * c {
                for vi in 0..v {
                    let m = (0..t).map(|ti| xd[(p * t + ti) * v + vi]).sum::<f64>() / t as f64;
                    for to in 0..t_out {
                        yd[(p * t_out + to) * v + vi] = m;
                    }
                }
            }
        }
        self.push(y, &[x], move |_, g, grads| {
            let gd = g.data();
            let mut dx = Tensor::zeros(&[n, c, t, v]);
            let dxd = dx.data_mut();
            for p in 0..n * c {
                for vi in 0..v {
                    let s = (0..t_out).map(|to| gd[(p * t_out + to) * v + vi]).sum::<f64>() / t as f64;
                    for ti in 0..t {
                        dxd[(p * t + ti) * v + vi] = s;
                    }
                }
            }
            grads.accumulate(x, dx);
        })
    }

    /// Splits time into `level` contiguous bins, averages within each bin and
    /// broadcasts the bin mean back to every frame of that bin.
    pub fn bin_pool(&mut self, x: Var, level: usize) -> Var {
        let (n, c, t, v) = self.value(x).dims4();
        assert!(level >= 1 && level <= t, "bin_pool level {level} invalid for T={t}");
        let bounds: Vec<(usize, usize)> = (0..level).map(|b| (b * t / level, (b + 1) * t / level)).collect();
        let mut y = Tensor::zeros(&[n, c, t, v]);
        {
            let xd = self.value(x).data();
            let yd = y.data_mut();
            for p in 0..n * c {
                for &(lo, hi) in &bounds {
                    for vi in 0..v {
                        let m = (lo..hi).map(|ti| xd[(p * t + ti) * v + vi]).sum::<f64>() / (hi - lo) as f64;
                        for ti in lo..hi {
                            yd[(p * t + ti) * v + vi] = m;
                        }
                    }
                }
            }
        }
        self.push(y, &[x], move |_, g, grads| {
            let gd = g.data();
            let mut dx = Tensor::zeros(&[n, c, t, v]);
            let dxd = dx.data_mut();
            for p in 0..n * c {
                for &(lo, hi) in &bounds {
                    for vi in 0..v {
                        let s = (lo..hi).map(|ti| gd[(p * t + ti) * v + vi]).sum::<f64>() / (hi - lo) as f64;
                        for ti in lo..hi {
                            dxd[(p * t + ti) * v + vi] = s;
                        }
                    }
                }
            }
            grads.accumulate(x, dx);
        })
    }

    /// Mean over the joint axis; output keeps a joint axis of size one.
    pub fn mean_joints(&mut self, x: Var) -> Var {
        let (n, c, t, v) = self.value(x).dims4();
        let rows = n * c * t;
        let xd = self.value(x).data();
        let data = (0..rows)
            .map(|r| xd[r * v..(r + 1) * v].iter().sum::<f64>() / v as f64)
            .collect();
        let y = Tensor::from_vec(&[n, c, t, 1], data);
        self.push(y, &[x], move |_, g, grads| {
            let gd = g.data();
            let mut dx = Tensor::zeros(&[n, c, t, v]);
            for r in 0..rows {
                dx.data_mut()[r * v..(r + 1) * v].fill(gd[r] / v as f64);
            }
            grads.accumulate(x, dx);
        })
    }

    /// Scaled dot-product cross-attention along time, per `(n, v)`: queries
    /// from `q` (length `T_q`), keys and values both from `kv` (length
    /// `T_k`). Output has the shape of `q`.
    pub fn cross_attention(&mut self, q: Var, kv: Var) -> Var {
        let (n, c, tq, v) = self.value(q).dims4();
        let (kn, kc, tk, kvj) = self.value(kv).dims4();
        assert!(kn == n && kc == c && kvj == v, "cross_attention shape mismatch");
        let weights = attention_weights(self.value(q), self.value(kv));
        let mut y = Tensor::zeros(&[n, c, tq, v]);
        {
            let kd = self.value(kv).data();
            let wd = weights.data();
            let yd = y.data_mut();
            for ni in 0..n {
                for vi in 0..v {
                    for ti in 0..tq {
                        let wrow = &wd[((ni * v + vi) * tq + ti) * tk..][..tk];
                        for ci in 0..c {
                            let mut acc = 0.0;
                            for (s, &w) in wrow.iter().enumerate() {
                                acc += w * kd[idx4(c, tk, v, ni, ci, s, vi)];
                            }
                            yd[idx4(c, tq, v, ni, ci, ti, vi)] = acc;
                        }
                    }
                }
            }
        }
        let scale = 1.0 / (c as f64).sqrt();
        self.push(y, &[q, kv], move |tape, g, grads| {
            let qd = tape.value(q).data();
            let kd = tape.value(kv).data();
            let wd = weights.data();
            let gd = g.data();
            let mut dq = Tensor::zeros(&[n, c, tq, v]);
            let mut dkv = Tensor::zeros(&[n, c, tk, v]);
            let mut dw = vec![0.0; tk];
            for ni in 0..n {
                for vi in 0..v {
                    for ti in 0..tq {
                        let wrow = &wd[((ni * v + vi) * tq + ti) * tk..][..tk];
                        for (s, dws) in dw.iter_mut().enumerate() {
                            let mut acc = 0.0;
                            for ci in 0..c {
                                let gy = gd[idx4(c, tq, v, ni, ci, ti, vi)];
                                acc += gy * kd[idx4(c, tk, v, ni, ci, s, vi)];
                                // value path
                                dkv.data_mut()[idx4(c, tk, v, ni, ci, s, vi)] += wrow[s] * gy;
                            }
                            *dws = acc;
                        }
                        let inner: f64 = dw.iter().zip(wrow).map(|(a, b)| a * b).sum();
                        for s in 0..tk {
                            let ds = wrow[s] * (dw[s] - inner) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            for ci in 0..c {
                                let qi = idx4(c, tq, v, ni, ci, ti, vi);
                                let ki = idx4(c, tk, v, ni, ci, s, vi);
                                dq.data_mut()[qi] += ds * kd[ki];
                                dkv.data_mut()[ki] += ds * qd[qi];
                            }
                        }
                    }
                }
            }
            if tape.requires_grad(q) {
                grads.accumulate(q, dq);
            }
            if tape.requires_grad(kv) {
                grads.accumulate(kv, dkv);
            }
        })
    }

    // ---------------------------------------------------------------------
    // losses over per-frame maps of shape (N, C, T, 1)
    // ---------------------------------------------------------------------

    /// Mean soft-label cross-entropy over unmasked frames. `targets` has the
    /// shape of `logits`; `mask[n * T + t]` selects the frames that count.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: &Tensor, mask: &[bool]) -> Var {
        let (n, k, t, one) = self.value(logits).dims4();
        assert_eq!(one, 1, "logits must be per-frame (joint axis of size 1)");
        assert_eq!(targets.shape(), self.value(logits).shape(), "target shape mismatch");
        assert_eq!(mask.len(), n * t, "mask length mismatch");
        let count = mask.iter().filter(|&&m| m).count();
        assert!(count > 0, "soft_cross_entropy with every frame masked");
        let ld = self.value(logits).data();
        let td = targets.data();
        let mut probs = Tensor::zeros(&[n, k, t, 1]);
        let mut total = 0.0;
        for ni in 0..n {
            for ti in 0..t {
                if !mask[ni * t + ti] {
                    continue;
                }
                let at = |ki: usize| (ni * k + ki) * t + ti;
                let mx = (0..k).map(|ki| ld[at(ki)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + (0..k).map(|ki| (ld[at(ki)] - mx).exp()).sum::<f64>().ln();
                for ki in 0..k {
                    let logp = ld[at(ki)] - lse;
                    probs.data_mut()[at(ki)] = logp.exp();
                    total -= td[at(ki)] * logp;
                }
            }
        }
        let m = count as f64;
        let targets = targets.clone();
        let mask = mask.to_vec();
        self.push(Tensor::scalar(total / m), &[logits], move |_, g, grads| {
            let scale = g.item() / m;
            let pd = probs.data();
            let td = targets.data();
            let mut dl = Tensor::zeros(&[n, k, t, 1]);
            for ni in 0..n {
                for ti in 0..t {
                    if !mask[ni * t + ti] {
                        continue;
                    }
                    let at = |ki: usize| (ni * k + ki) * t + ti;
                    let mass: f64 = (0..k).map(|ki| td[at(ki)]).sum();
                    for ki in 0..k {
                        dl.data_mut()[at(ki)] = scale * (pd[at(ki)] * mass - td[at(ki)]);
                    }
                }
            }
            grads.accumulate(logits, dl);
        })
    }

    /// Per-group mean of frame vectors. `groups[p]` lists `(n, t)` frames;
    /// output is `(P, C)`.
    pub fn group_means(&mut self, f: Var, groups: &[Vec<(usize, usize)>]) -> Var {
        let (n, c, t, one) = self.value(f).dims4();
        assert_eq!(one, 1);
        let p = groups.len();
        let fd = self.value(f).data();
        let mut y = Tensor::zeros(&[p, c]);
        for (gi, members) in groups.iter().enumerate() {
            assert!(!members.is_empty(), "empty group");
            let inv = 1.0 / members.len() as f64;
            for &(ni, ti) in members {
                assert!(ni < n && ti < t);
                for ci in 0..c {
                    y.data_mut()[gi * c + ci] += fd[(ni * c + ci) * t + ti] * inv;
                }
            }
        }
        let groups = groups.to_vec();
        self.push(y, &[f], move |_, g, grads| {
            let gd = g.data();
            let mut df = Tensor::zeros(&[n, c, t, 1]);
            for (gi, members) in groups.iter().enumerate() {
                let inv = 1.0 / members.len() as f64;
                for &(ni, ti) in members {
                    for ci in 0..c {
                        df.data_mut()[(ni * c + ci) * t + ti] += gd[gi * c + ci] * inv;
                    }
                }
            }
            grads.accumulate(f, df);
        })
    }

    /// Row-wise momentum blend `y_p = γ_p prev_p + (1 − γ_p) x_p` with a
    /// constant `prev`.
    pub fn momentum_blend(&mut self, x: Var, prev: &Tensor, gammas: &[f64]) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), prev.shape());
        assert_eq!(xv.rank(), 2);
        let (p, c) = (xv.shape()[0], xv.shape()[1]);
        assert_eq!(gammas.len(), p);
        let mut y = Tensor::zeros(&[p, c]);
        for pi in 0..p {
            for ci in 0..c {
                let i = pi * c + ci;
                y.data_mut()[i] = gammas[pi] * prev.data()[i] + (1.0 - gammas[pi]) * xv.data()[i];
            }
        }
        let gammas = gammas.to_vec();
        self.push(y, &[x], move |_, g, grads| {
            let mut dx = g.clone();
            for pi in 0..p {
                for e in &mut dx.data_mut()[pi * c..(pi + 1) * c] {
                    *e *= 1.0 - gammas[pi];
                }
            }
            grads.accumulate(x, dx);
        })
    }

    /// Intra-class compactness: mean over groups of the mean squared
    /// distance between each frame vector and its group prototype.
    pub fn intra_cluster(&mut self, f: Var, protos: Var, groups: &[Vec<(usize, usize)>]) -> Var {
        let (n, c, t, _) = self.value(f).dims4();
        let pv = self.value(protos);
        assert_eq!(pv.shape(), &[groups.len(), c], "prototype shape mismatch");
        let p = groups.len() as f64;
        let fd = self.value(f).data();
        let pd = pv.data();
        let mut total = 0.0;
        for (gi, members) in groups.iter().enumerate() {
            let mut s = 0.0;
            for &(ni, ti) in members {
                for ci in 0..c {
                    let d = fd[(ni * c + ci) * t + ti] - pd[gi * c + ci];
                    s += d * d;
                }
            }
            total += s / members.len() as f64;
        }
        let groups = groups.to_vec();
        self.push(Tensor::scalar(total / p), &[f, protos], move |tape, g, grads| {
            let fd = tape.value(f).data();
            let pd = tape.value(protos).data();
            let mut df = Tensor::zeros(&[n, c, t, 1]);
            let mut dp = Tensor::zeros(&[groups.len(), c]);
            for (gi, members) in groups.iter().enumerate() {
                let k = 2.0 * g.item() / (p * members.len() as f64);
                for &(ni, ti) in members {
                    for ci in 0..c {
                        let fi = (ni * c + ci) * t + ti;
                        let d = k * (fd[fi] - pd[gi * c + ci]);
                        df.data_mut()[fi] += d;
                        dp.data_mut()[gi * c + ci] -= d;
                    }
                }
            }
            if tape.requires_grad(f) {
                grads.accumulate(f, df);
            }
            if tape.requires_grad(protos) {
                grads.accumulate(protos, dp);
            }
        })
    }

    /// Inter-class repulsion `(1/P) Σ_{i≠j} (‖μ_i − μ_j‖² + δ)⁻¹` over
    /// ordered pairs of prototype rows. Zero when fewer than two rows.
    pub fn inter_cluster(&mut self, protos: Var, delta: f64) -> Var {
        let pv = self.value(protos);
        assert_eq!(pv.rank(), 2);
        let (p, c) = (pv.shape()[0], pv.shape()[1]);
        let value = inter_cluster_value(pv.data(), p, c, delta);
        self.push(Tensor::scalar(value), &[protos], move |tape, g, grads| {
            if p < 2 {
                return;
            }
            let pd = tape.value(protos).data();
            let mut dp = Tensor::zeros(&[p, c]);
            let k = 2.0 * g.item() / p as f64;
            for i in 0..p {
                for j in 0..p {
                    if i == j {
                        continue;
                    }
                    let d2: f64 = (0..c).map(|ci| (pd[i * c + ci] - pd[j * c + ci]).powi(2)).sum();
                    let w = -2.0 * k / (d2 + delta).powi(2);
                    for ci in 0..c {
                        dp.data_mut()[i * c + ci] += w * (pd[i * c + ci] - pd[j * c + ci]);
                    }
                }
            }
            grads.accumulate(protos, dp);
        })
    }
}

pub(crate) fn inter_cluster_value(pd: &[f64], p: usize, c: usize, delta: f64) -> f64 {
    if p < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..p {
        for j in 0..p {
            if i != j {
                let d2: f64 = (0..c).map(|ci| (pd[i * c + ci] - pd[j * c + ci]).powi(2)).sum();
                total += 1.0 / (d2 + delta);
            }
        }
    }
    total / p as f64
}

/// Cross-attention weights of shape `(N, V, T_q, T_k)`: softmax over keys of
/// `q·kv / √C` per `(n, v, t_q)`.
pub fn attention_weights(q: &Tensor, kv: &Tensor) -> Tensor {
    let (n, c, tq, v) = q.dims4();
    let (_, _, tk, _) = kv.dims4();
    let scale = 1.0 / (c as f64).sqrt();
    let qd = q.data();
    let kd = kv.data();
    let mut w = Tensor::zeros(&[n, v, tq, tk]);
    let wd = w.data_mut();
    for ni in 0..n {
        for vi in 0..v {
            for ti in 0..tq {
                let row = &mut wd[((ni * v + vi) * tq + ti) * tk..][..tk];
                for (s, r) in row.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        acc += qd[idx4(c, tq, v, ni, ci, ti, vi)] * kd[idx4(c, tk, v, ni, ci, s, vi)];
                    }
                    *r = acc * scale;
                }
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for r in row.iter_mut() {
                    *r = (*r - mx).exp();
                    z += *r;
                }
                for r in row.iter_mut() {
                    *r /= z;
                }
            }
        }
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: &[usize], scale: f64) -> Tensor {
        let len: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|i| ((i * 7 % 13) as f64 - 6.0) * scale).collect())
    }

    /// Central differences of `build` w.r.t. the single parameter leaf it creates.
    fn check_op(input: Tensor, build: impl Fn(&mut Tape, Var) -> Var) {
        let mut tape = Tape::new();
        let x = tape.param(input.clone());
        let y = build(&mut tape, x);
        let w = ramp(tape.value(y).shape(), 0.1);
        let loss = tape.weighted_sum(y, &w);
        let grads = tape.backward(loss);
        let analytic = grads.get_or_zeros(&tape, x);
        let eps = 1e-6;
        for i in 0..input.len() {
            let eval = |delta: f64| {
                let mut p = input.clone();
                p.data_mut()[i] += delta;
                let mut tape = Tape::new();
                let x = tape.param(p);
                let y = build(&mut tape, x);
                let l = tape.weighted_sum(y, &w);
                tape.value(l).item()
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(err < 1e-5 || (a - numeric).abs() < 1e-8, "element {i}: analytic {a} vs numeric {numeric}");
        }
    }

    #[test]
    fn temporal_conv_strided_gradients() {
        let w = ramp(&[3, 2, 3], 0.2);
        check_op(ramp(&[2, 2, 8, 3], 0.3), move |tape, x| {
            let w = tape.constant(w.clone());
            tape.temporal_conv(x, w, None, 2)
        });
    }

    #[test]
    fn temporal_conv_output_length_is_ceil() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 16, 2]));
        let w = tape.constant(Tensor::zeros(&[1, 1, 5]));
        let y1 = tape.temporal_conv(x, w, None, 1);
        let y2 = tape.temporal_conv(x, w, None, 2);
        assert_eq!(tape.value(y1).shape()[2], 16);
        assert_eq!(tape.value(y2).shape()[2], 8);
    }

    #[test]
    fn batch_norm_gradients() {
        check_op(ramp(&[2, 3, 4, 2], 0.5), |tape, x| {
            let g = tape.constant(Tensor::from_vec(&[3], vec![1.5, 0.5, -1.0]));
            let b = tape.constant(Tensor::from_vec(&[3], vec![0.1, 0.0, 0.3]));
            tape.batch_norm(x, g, b, 1e-5).0
        });
    }

    #[test]
    fn cross_attention_gradients_both_inputs() {
        let kv = ramp(&[1, 2, 2, 2], 0.7);
        let q = ramp(&[1, 2, 8, 2], 0.4);
        let kv2 = kv.clone();
        check_op(q.clone(), move |tape, x| {
            let kv = tape.constant(kv2.clone());
            tape.cross_attention(x, kv)
        });
        check_op(kv, move |tape, x| {
            let q = tape.constant(q.clone());
            tape.cross_attention(q, x)
        });
    }

    #[test]
    fn softmax_and_pooling_gradients() {
        check_op(ramp(&[1, 2, 4, 3], 0.3), |tape, x| tape.softmax_time(x));
        check_op(ramp(&[1, 2, 8, 3], 0.3), |tape, x| tape.bin_pool(x, 4));
        check_op(ramp(&[1, 2, 8, 3], 0.3), |tape, x| tape.time_mean_broadcast(x, 16));
        check_op(ramp(&[1, 2, 8, 3], 0.3), |tape, x| tape.resample_time(x, 2));
        check_op(ramp(&[1, 2, 2, 3], 0.3), |tape, x| tape.resample_time(x, 8));
    }

    #[test]
    fn cross_entropy_gradient() {
        let targets = ramp(&[2, 3, 4, 1], 1.0).map(|x| x.abs());
        let mask = vec![true, true, false, true, true, true, true, false];
        check_op(ramp(&[2, 3, 4, 1], 0.4), move |tape, x| tape.soft_cross_entropy(x, &targets, &mask));
    }

    #[test]
    fn cluster_losses_gradients() {
        let groups = vec![vec![(0, 0), (1, 2)], vec![(0, 1), (0, 3), (1, 0)]];
        let g2 = groups.clone();
        check_op(ramp(&[2, 3, 4, 1], 0.4), move |tape, f| {
            let m = tape.group_means(f, &g2);
            let prev = ramp(&[2, 3], 0.2);
            let mu = tape.momentum_blend(m, &prev, &[0.9, 0.0]);
            let a = tape.intra_cluster(f, mu, &g2);
            let b = tape.inter_cluster(mu, 1.0);
            tape.add(a, b)
        });
    }
}
