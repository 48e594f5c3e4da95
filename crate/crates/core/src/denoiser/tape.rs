//! Reverse-mode differentiation over channel-major feature maps.
//!
//! A [`Tape`] records every intermediate value and the op that produced it.
//! [`Tape::backward`] walks the record in reverse, accumulating gradients for
//! every node and for the parameters the convolutions read.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2};

/// Feature map `[channels, height, width]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor3 { c, h, w, data: vec![0.0; c * h * w] }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), c * h * w, "tensor payload does not match its shape");
        Tensor3 { c, h, w, data }
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.h * self.w;
        &self.data[c * n..(c + 1) * n]
    }

    fn same_shape(&self, o: &Tensor3) -> bool {
        self.c == o.c && self.h == o.h && self.w == o.w
    }
}

/// 3×3 convolution weights `[out, in, 3, 3]` and bias `[out]`, stored as
/// parameter indices into the model's flat parameter list.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvRef {
    pub weight: usize,
    pub bias: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
}

#[derive(Clone, Debug)]
enum Node {
    Leaf,
    Conv { x: usize, conv: ConvRef },
    Relu { x: usize },
    Concat { a: usize, b: usize },
    Add { a: usize, b: usize },
    Upsample { x: usize },
    Channel { x: usize, c: usize },
}

/// Handle to a recorded value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

pub struct Tape<'p> {
    params: &'p [Vec<f64>],
    values: Vec<Tensor3>,
    nodes: Vec<Node>,
}

fn out_size(n: usize, stride: usize) -> usize {
    (n - 1) / stride + 1
}

/// Unfolds the 3×3 neighbourhoods of `x` into a `[c_in·9, ho·wo]` matrix
/// (zero padding of one pixel).
fn im2col(x: &Tensor3, stride: usize) -> Array2<f64> {
    let (ho, wo) = (out_size(x.h, stride), out_size(x.w, stride));
    let mut cols = Array2::zeros((x.c * 9, ho * wo));
    for i in 0..x.c {
        let ip = x.plane(i);
        for k in 0..9 {
            let (ky, kx) = (k / 3, k % 3);
            let mut row = cols.row_mut(i * 9 + k);
            let row = row.as_slice_mut().expect("standard layout");
            for y in 0..ho {
                let iy = (y * stride + ky) as isize - 1;
                if iy < 0 || iy >= x.h as isize {
                    continue;
                }
                let irow = &ip[iy as usize * x.w..(iy as usize + 1) * x.w];
                let orow = &mut row[y * wo..(y + 1) * wo];
                for (xo, d) in orow.iter_mut().enumerate() {
                    let ix = (xo * stride + kx) as isize - 1;
                    if ix >= 0 && (ix as usize) < x.w {
                        *d = irow[ix as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto `grad_x`.
fn col2im(cols: &Array2<f64>, stride: usize, grad_x: &mut Tensor3) {
    let (h, w) = (grad_x.h, grad_x.w);
    let (ho, wo) = (out_size(h, stride), out_size(w, stride));
    let n = h * w;
    for i in 0..grad_x.c {
        let gp = &mut grad_x.data[i * n..(i + 1) * n];
        for k in 0..9 {
            let (ky, kx) = (k / 3, k % 3);
            let row = cols.row(i * 9 + k);
            let row = row.as_slice().expect("standard layout");
            for y in 0..ho {
                let iy = (y * stride + ky) as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let grow = &mut gp[iy as usize * w..(iy as usize + 1) * w];
                for (xo, &v) in row[y * wo..(y + 1) * wo].iter().enumerate() {
                    let ix = (xo * stride + kx) as isize - 1;
                    if ix >= 0 && (ix as usize) < w {
                        grow[ix as usize] += v;
                    }
                }
            }
        }
    }
}

fn weight_matrix<'a>(w: &'a [f64], conv: &ConvRef) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((conv.c_out, conv.c_in * 9), w).expect("weight length matches the convolution")
}

pub fn conv_forward(x: &Tensor3, w: &[f64], b: &[f64], conv: &ConvRef) -> Tensor3 {
    debug_assert_eq!(x.c, conv.c_in);
    let s = conv.stride;
    let (ho, wo) = (out_size(x.h, s), out_size(x.w, s));
    let cols = im2col(x, s);
    let mut out = Array2::from_shape_fn((conv.c_out, ho * wo), |(o, _)| b[o]);
    general_mat_mul(1.0, &weight_matrix(w, conv), &cols, 1.0, &mut out);
    Tensor3::from_vec(conv.c_out, ho, wo, out.into_raw_vec())
}

/// Accumulates input, weight and bias gradients of a convolution.
pub fn conv_backward(
    x: &Tensor3,
    w: &[f64],
    conv: &ConvRef,
    grad_out: &Tensor3,
    grad_x: &mut Tensor3,
    grad_w: &mut [f64],
    grad_b: &mut [f64],
) {
    let s = conv.stride;
    let g = ArrayView2::from_shape((conv.c_out, grad_out.h * grad_out.w), &grad_out.data[..]).expect("gradient shape");
    for (o, gb) in grad_b.iter_mut().enumerate() {
        *gb += g.row(o).sum();
    }
    let cols = im2col(x, s);
    let mut gw = ArrayViewMut2::from_shape((conv.c_out, conv.c_in * 9), grad_w).expect("weight gradient shape");
    general_mat_mul(1.0, &g, &cols.t(), 1.0, &mut gw);
    let gcols = weight_matrix(w, conv).t().dot(&g);
    col2im(&gcols, s, grad_x);
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [Vec<f64>]) -> Self {
        Tape { params, values: Vec::new(), nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor3, node: Node) -> Var {
        self.values.push(value);
        self.nodes.push(node);
        Var(self.values.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor3) -> Var {
        self.push(value, Node::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor3 {
        &self.values[v.0]
    }

    pub fn conv(&mut self, x: Var, conv: ConvRef) -> Var {
        let out = conv_forward(&self.values[x.0], &self.params[conv.weight], &self.params[conv.bias], &conv);
        self.push(out, Node::Conv { x: x.0, conv })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = &self.values[x.0];
        let out = Tensor3 { data: v.data.iter().map(|&a| a.max(0.0)).collect(), ..*v };
        self.push(out, Node::Relu { x: x.0 })
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        assert!(va.h == vb.h && va.w == vb.w, "concat of mismatched spatial sizes");
        let mut data = Vec::with_capacity(va.data.len() + vb.data.len());
        data.extend_from_slice(&va.data);
        data.extend_from_slice(&vb.data);
        let out = Tensor3 { c: va.c + vb.c, h: va.h, w: va.w, data };
        self.push(out, Node::Concat { a: a.0, b: b.0 })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        assert!(va.same_shape(vb), "add of mismatched shapes");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect();
        let out = Tensor3 { data, ..*va };
        self.push(out, Node::Add { a: a.0, b: b.0 })
    }

    /// Nearest-neighbour ×2 upsampling.
    pub fn upsample(&mut self, x: Var) -> Var {
        let v = &self.values[x.0];
        let (h2, w2) = (v.h * 2, v.w * 2);
        let mut out = Tensor3::zeros(v.c, h2, w2);
        for c in 0..v.c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    out.data[(c * h2 + y) * w2 + xx] = v.data[(c * v.h + y / 2) * v.w + xx / 2];
                }
            }
        }
        self.push(out, Node::Upsample { x: x.0 })
    }

    pub fn channel(&mut self, x: Var, c: usize) -> Var {
        let v = &self.values[x.0];
        let out = Tensor3::from_vec(1, v.h, v.w, v.plane(c).to_vec());
        self.push(out, Node::Channel { x: x.0, c })
    }

    /// Gradients of `Σ grad_out · out` with respect to every node; parameter
    /// gradients are added into `param_grads`.
    pub fn backward(&self, out: Var, grad_out: Tensor3, param_grads: &mut [Vec<f64>]) -> Vec<Option<Tensor3>> {
        let mut grads: Vec<Option<Tensor3>> = vec![None; self.values.len()];
        grads[out.0] = Some(grad_out);
        let acc = |grads: &mut Vec<Option<Tensor3>>, idx: usize, g: Tensor3| match &mut grads[idx] {
            Some(t) => t.data.iter_mut().zip(&g.data).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        };
        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx] {
                Node::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Node::Conv { x, conv } => {
                    let xv = &self.values[*x];
                    let mut gx = Tensor3::zeros(xv.c, xv.h, xv.w);
                    let (wi, bi) = (conv.weight, conv.bias);
                    let mut gw = std::mem::take(&mut param_grads[wi]);
                    let mut gb = std::mem::take(&mut param_grads[bi]);
                    conv_backward(xv, &self.params[wi], conv, &g, &mut gx, &mut gw, &mut gb);
                    param_grads[wi] = gw;
                    param_grads[bi] = gb;
                    acc(&mut grads, *x, gx);
                }
                Node::Relu { x } => {
                    let xv = &self.values[*x];
                    let data = g.data.iter().zip(&xv.data).map(|(&d, &v)| if v > 0.0 { d } else { 0.0 }).collect();
                    acc(&mut grads, *x, Tensor3 { data, ..g });
                }
                Node::Concat { a, b } => {
                    let ca = self.values[*a].c;
                    let split = ca * g.h * g.w;
                    acc(&mut grads, *a, Tensor3::from_vec(ca, g.h, g.w, g.data[..split].to_vec()));
                    acc(&mut grads, *b, Tensor3::from_vec(g.c - ca, g.h, g.w, g.data[split..].to_vec()));
                }
                Node::Add { a, b } => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Node::Upsample { x } => {
                    let xv = &self.values[*x];
                    let mut gx = Tensor3::zeros(xv.c, xv.h, xv.w);
                    for c in 0..g.c {
                        for y in 0..g.h {
                            for xx in 0..g.w {
                                gx.data[(c * xv.h + y / 2) * xv.w + xx / 2] += g.data[(c * g.h + y) * g.w + xx];
                            }
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Node::Channel { x, c } => {
                    let xv = &self.values[*x];
                    let mut gx = Tensor3::zeros(xv.c, xv.h, xv.w);
                    let n = xv.h * xv.w;
                    gx.data[c * n..(c + 1) * n].copy_from_slice(&g.data);
                    acc(&mut grads, *x, gx);
                }
            }
        }
        grads
    }
}
