//! Minimal reverse-mode autodiff over dense `f64` matrices.
//!
//! Every value is a 2-D array. A [`Tape`] records operations during a forward
//! pass; [`Tape::backward`] propagates seed gradients back to parameters.

use ndarray::{s, Array1, Array2, Axis, Zip};

use super::params::Params;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Geometry of a square-kernel convolution lowered to a matrix product.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    /// Source row (pixel index) for output `(oy, ox)` and kernel tap `(ky, kx)`.
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let y = (oy * self.stride + ky) as isize - self.padding as isize;
        let x = (ox * self.stride + kx) as isize - self.padding as isize;
        if y < 0 || x < 0 || y >= self.height as isize || x >= self.width as isize {
            None
        } else {
            Some(y as usize * self.width + x as usize)
        }
    }
}

enum Op {
    Input,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Array2<f64>,
        inv_std: Array1<f64>,
    },
    Im2Col(Var, ConvGeom),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<Array2<f64>>,
    },
}

struct Node {
    value: Option<Array2<f64>>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p Params,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p Params) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(512),
        }
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        match (&self.nodes[v.0].value, &self.nodes[v.0].op) {
            (Some(val), _) => val,
            (None, Op::Param(i)) => self.params.get(*i),
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, index: usize) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(index),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    /// `a + b` where `b` is a single row broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::AddRow(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a) * factor;
        self.push(out, Op::Scale(a, factor))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|v| v.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        self.push(out, Op::SoftmaxRows(a))
    }

    /// `x W + b`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Var {
        let y = self.matmul(x, weight);
        self.add_row(y, bias)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        const EPS: f64 = 1e-5;
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mean = xv.sum_axis(Axis(1)) / n;
        let mut xhat = xv - &mean.view().insert_axis(Axis(1));
        let var = xhat.mapv(|v| v * v).sum_axis(Axis(1)) / n;
        let inv_std = var.mapv(|v| 1.0 / (v + EPS).sqrt());
        xhat *= &inv_std.view().insert_axis(Axis(1));
        let out = &xhat * self.value(gain) + self.value(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Lowers a `(height*width) x channels` feature map to convolution patches.
    pub fn im2col(&mut self, x: Var, geom: ConvGeom) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.dim(), (geom.height * geom.width, geom.channels));
        let (oh, ow) = (geom.out_height(), geom.out_width());
        let mut out = Array2::zeros((oh * ow, geom.patch_len()));
        for oy in 0..oh {
            for ox in 0..ow {
                let mut row = out.row_mut(oy * ow + ox);
                for ky in 0..geom.kernel {
                    for kx in 0..geom.kernel {
                        if let Some(src) = geom.source(oy, ox, ky, kx) {
                            let off = (ky * geom.kernel + kx) * geom.channels;
                            row.slice_mut(s![off..off + geom.channels])
                                .assign(&xv.row(src));
                        }
                    }
                }
            }
        }
        self.push(out, Op::Im2Col(x, geom))
    }

    /// Multi-head scaled dot-product attention. `q` is `n x d`, `k` and `v`
    /// are `m x d`; heads split the `d` columns evenly.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.ncols();
        assert!(d % heads == 0, "hidden size must split across heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Array2::zeros((qv.nrows(), vv.ncols()));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let scores = qv.slice(cols).dot(&kv.slice(cols).t()) * scale;
            let p = softmax_rows(&scores);
            out.slice_mut(cols).assign(&p.dot(&vv.slice(cols)));
            probs.push(p);
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
        )
    }

    /// Runs the reverse pass from the given seed gradients and returns one
    /// gradient per parameter (`None` when the parameter was not reached).
    pub fn backward(&self, seeds: Vec<(Var, Array2<f64>)>) -> Vec<Option<Array2<f64>>> {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            accumulate(&mut grads[v.0], g);
        }
        let mut param_grads: Vec<Option<Array2<f64>>> = (0..self.params.len()).map(|_| None).collect();

        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let out_value = || self.value(Var(idx));
            match &self.nodes[idx].op {
                Op::Input => {}
                Op::Param(p) => accumulate(&mut param_grads[*p], g),
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[b.0], g.clone());
                    accumulate(&mut grads[a.0], g);
                }
                Op::AddRow(a, b) => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads[b.0], gb);
                    accumulate(&mut grads[a.0], g);
                }
                Op::Scale(a, f) => accumulate(&mut grads[a.0], g * *f),
                Op::Relu(a) => {
                    let mut g = g;
                    Zip::from(&mut g)
                        .and(out_value())
                        .for_each(|g, &y| if y <= 0.0 { *g = 0.0 });
                    accumulate(&mut grads[a.0], g);
                }
                Op::Sigmoid(a) => {
                    let mut g = g;
                    Zip::from(&mut g)
                        .and(out_value())
                        .for_each(|g, &y| *g *= y * (1.0 - y));
                    accumulate(&mut grads[a.0], g);
                }
                Op::SoftmaxRows(a) => {
                    let ga = softmax_rows_backward(out_value(), &g);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gbias = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let ggain = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dxhat = &g * self.value(*gain);
                    let n = xhat.ncols() as f64;
                    let sum_d = dxhat.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let sum_dx = (&dxhat * xhat).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let mut gx = dxhat * n - sum_d - xhat * &sum_dx;
                    gx *= &(inv_std / n).insert_axis(Axis(1));
                    accumulate(&mut grads[bias.0], gbias);
                    accumulate(&mut grads[gain.0], ggain);
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Im2Col(x, geom) => {
                    let mut gx = Array2::zeros((geom.height * geom.width, geom.channels));
                    let (oh, ow) = (geom.out_height(), geom.out_width());
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let row = g.row(oy * ow + ox);
                            for ky in 0..geom.kernel {
                                for kx in 0..geom.kernel {
                                    if let Some(src) = geom.source(oy, ox, ky, kx) {
                                        let off = (ky * geom.kernel + kx) * geom.channels;
                                        let mut dst = gx.row_mut(src);
                                        dst += &row.slice(s![off..off + geom.channels]);
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    probs,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let dh = qv.ncols() / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut gq = Array2::zeros(qv.raw_dim());
                    let mut gk = Array2::zeros(kv.raw_dim());
                    let mut gv = Array2::zeros(vv.raw_dim());
                    for (h, p) in probs.iter().enumerate() {
                        let cols = s![.., h * dh..(h + 1) * dh];
                        let go = g.slice(cols);
                        gv.slice_mut(cols).assign(&p.t().dot(&go));
                        let gp = go.dot(&vv.slice(cols).t());
                        let gs = softmax_rows_backward(p, &gp) * scale;
                        gq.slice_mut(cols).assign(&gs.dot(&kv.slice(cols)));
                        gk.slice_mut(cols).assign(&gs.t().dot(&qv.slice(cols)));
                    }
                    accumulate(&mut grads[q.0], gq);
                    accumulate(&mut grads[k.0], gk);
                    accumulate(&mut grads[v.0], gv);
                }
            }
        }
        param_grads
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(existing) => *existing += &g,
        None => *slot = Some(g),
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn inverse_sigmoid(p: f64) -> f64 {
    let p = p.clamp(1e-5, 1.0 - 1e-5);
    (p / (1.0 - p)).ln()
}

pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// Gradient w.r.t. softmax inputs given the softmax output `p` and the
/// gradient `g` w.r.t. that output.
pub fn softmax_rows_backward(p: &Array2<f64>, g: &Array2<f64>) -> Array2<f64> {
    let dot = (p * g).sum_axis(Axis(1)).insert_axis(Axis(1));
    p * &(g - &dot)
}
