//! Minimal reverse-mode autodiff over `ndarray` arrays.
//!
//! A [`Tape`] is an append-only arena of nodes; each op records its inputs so
//! [`Tape::backward`] can sweep the nodes in reverse and accumulate gradients.
//! The op set is exactly what the encoder/aggregator/adjuster/denoiser graphs
//! need, nothing more. All arithmetic is `f64`: the gradient-check suite
//! compares analytic gradients against central finite differences at 1e-4
//! relative tolerance, which single precision cannot honor.
//!
//! Shape errors inside the tape are programming errors, so ops assert; public
//! APIs validate their inputs before building a graph.

use ndarray::{Array2, Array3, ArrayD, Axis, Ix1, Ix2, Ix3};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// `a @ b` for 2-d operands.
    MatMul(Var, Var),
    /// `a @ b.T` for 2-d operands (attention scores).
    MatMulTransposed(Var, Var),
    /// Row-broadcast add: `(m, n) + (1, n)`.
    AddRow(Var, Var),
    /// Channel-broadcast add: `(c, h, w) + (1, c)`.
    AddChannelBias(Var, Var),
    Silu(Var),
    Log(Var),
    SoftmaxRows(Var),
    /// 3x3 convolution with padding 1 over a `(c_in, h, w)` input.
    /// Caches the im2col matrix from the forward pass.
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        cols: Array2<f64>,
    },
    UpsampleNearest2(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Var, Var),
    /// Repeat a `(1, n)` row `m` times.
    RepeatRows(Var),
    /// `(c, h, w)` -> `(h*w, c)` token layout.
    ChwToTokens(Var),
    /// `(h*w, c)` -> `(c, h, w)`; `(h, w)` recorded for the reshape.
    TokensToChw(Var, (usize, usize)),
    /// Any shape -> `(1, len)` row vector (row-major order).
    FlattenRow(Var),
    /// Sum of all entries, producing a 0-d scalar.
    Sum(Var),
}

struct Node {
    value: ArrayD<f64>,
    grad: Option<ArrayD<f64>>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn leaf2(&mut self, value: Array2<f64>) -> Var {
        self.leaf(value.into_dyn())
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn value2(&self, v: Var) -> Array2<f64> {
        self.nodes[v.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("2-d value")
            .to_owned()
    }

    pub fn value3(&self, v: Var) -> Array3<f64> {
        self.nodes[v.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("3-d value")
            .to_owned()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = &self.nodes[v.0].value;
        assert_eq!(val.len(), 1, "scalar() on non-scalar node");
        val.iter().copied().next().unwrap()
    }

    /// Gradient of the last `backward` root w.r.t. `v` (zeros if unreached).
    /// Always returned in standard layout.
    pub fn grad(&self, v: Var) -> ArrayD<f64> {
        match &self.nodes[v.0].grad {
            Some(g) => {
                ArrayD::from_shape_vec(g.raw_dim(), g.iter().copied().collect()).expect("grad")
            }
            None => ArrayD::zeros(self.nodes[v.0].value.raw_dim()),
        }
    }

    fn view2(&self, v: Var) -> ndarray::ArrayView2<'_, f64> {
        self.nodes[v.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("2-d operand")
    }

    fn view3(&self, v: Var) -> ndarray::ArrayView3<'_, f64> {
        self.nodes[v.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("3-d operand")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x * c);
        self.push(value, Op::Scale(a, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.view2(a), self.view2(b));
        assert_eq!(av.ncols(), bv.nrows(), "matmul inner dims");
        let value = av.dot(&bv).into_dyn();
        self.push(value, Op::MatMul(a, b))
    }

    /// `a @ b.T`; gradients flow to both operands.
    pub fn matmul_transposed(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.view2(a), self.view2(b));
        assert_eq!(av.ncols(), bv.ncols(), "matmul_transposed inner dims");
        let value = av.dot(&bv.t()).into_dyn();
        self.push(value, Op::MatMulTransposed(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let av = self.view2(a);
        let rv = self.view2(row);
        assert_eq!(rv.nrows(), 1, "add_row expects a (1, n) row");
        assert_eq!(av.ncols(), rv.ncols());
        let value = (&av + &rv.row(0)).into_dyn();
        self.push(value, Op::AddRow(a, row))
    }

    /// Add a per-channel bias row to a `(c, h, w)` feature map.
    pub fn add_channel_bias(&mut self, a: Var, bias: Var) -> Var {
        let av = self.view3(a);
        let bv = self.view2(bias);
        assert_eq!(bv.nrows(), 1);
        assert_eq!(bv.ncols(), av.dim().0, "channel bias width");
        let mut out = av.to_owned();
        for (c, mut plane) in out.outer_iter_mut().enumerate() {
            plane.mapv_inplace(|x| x + bv[(0, c)]);
        }
        self.push(out.into_dyn(), Op::AddChannelBias(a, bias))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x * sigmoid(x));
        self.push(value, Op::Silu(a))
    }

    /// Natural log, elementwise (inputs must be positive).
    pub fn log(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::ln);
        self.push(value, Op::Log(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.view2(a);
        let mut out = av.to_owned();
        for mut row in out.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        self.push(out.into_dyn(), Op::SoftmaxRows(a))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize) -> Var {
        let x = self.view3(input);
        let k = self.nodes[kernel.0]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("kernel (c_out, c_in, 3, 3)");
        let b = self.nodes[bias.0]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("bias (c_out,)");
        let (c_out, c_in, kh, kw) = k.dim();
        assert_eq!((kh, kw), (3, 3));
        assert_eq!(c_in, x.dim().0, "conv2d channel mismatch");
        assert_eq!(b.len(), c_out);

        let cols = im2col(&x, stride);
        let kmat = k.to_shape((c_out, c_in * 9)).unwrap().to_owned();
        let mut out_mat = kmat.dot(&cols);
        for (c, mut row) in out_mat.rows_mut().into_iter().enumerate() {
            row.mapv_inplace(|v| v + b[c]);
        }
        let (h, w) = (x.dim().1, x.dim().2);
        let (ho, wo) = conv_out_dims(h, w, stride);
        let value = out_mat
            .into_shape_with_order((c_out, ho, wo))
            .unwrap()
            .into_dyn();
        self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                cols,
            },
        )
    }

    pub fn upsample_nearest2(&mut self, a: Var) -> Var {
        let x = self.view3(a);
        let (c, h, w) = x.dim();
        let mut out = Array3::<f64>::zeros((c, 2 * h, 2 * w));
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = x[(ci, i, j)];
                    out[(ci, 2 * i, 2 * j)] = v;
                    out[(ci, 2 * i + 1, 2 * j)] = v;
                    out[(ci, 2 * i, 2 * j + 1)] = v;
                    out[(ci, 2 * i + 1, 2 * j + 1)] = v;
                }
            }
        }
        self.push(out.into_dyn(), Op::UpsampleNearest2(a))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|v| self.view2(*v)).collect();
        let value = ndarray::concatenate(
            Axis(0),
            &views.iter().map(|v| v.view()).collect::<Vec<_>>(),
        )
        .expect("concat_rows")
        .into_dyn();
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.view2(a), self.view2(b));
        assert_eq!(av.nrows(), bv.nrows());
        let value = ndarray::concatenate(Axis(1), &[av.view(), bv.view()])
            .expect("concat_cols")
            .into_dyn();
        self.push(value, Op::ConcatCols(a, b))
    }

    pub fn repeat_rows(&mut self, a: Var, m: usize) -> Var {
        let av = self.view2(a);
        assert_eq!(av.nrows(), 1, "repeat_rows expects a (1, n) row");
        let mut out = Array2::<f64>::zeros((m, av.ncols()));
        for mut row in out.rows_mut() {
            row.assign(&av.row(0));
        }
        self.push(out.into_dyn(), Op::RepeatRows(a))
    }

    pub fn chw_to_tokens(&mut self, a: Var) -> Var {
        let x = self.view3(a);
        let (c, h, w) = x.dim();
        let mut out = Array2::<f64>::zeros((h * w, c));
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    out[(i * w + j, ci)] = x[(ci, i, j)];
                }
            }
        }
        self.push(out.into_dyn(), Op::ChwToTokens(a))
    }

    pub fn tokens_to_chw(&mut self, a: Var, h: usize, w: usize) -> Var {
        let x = self.view2(a);
        let c = x.ncols();
        assert_eq!(x.nrows(), h * w);
        let mut out = Array3::<f64>::zeros((c, h, w));
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    out[(ci, i, j)] = x[(i * w + j, ci)];
                }
            }
        }
        self.push(out.into_dyn(), Op::TokensToChw(a, (h, w)))
    }

    pub fn flatten_row(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len();
        let value = self.nodes[a.0]
            .value
            .clone()
            .into_shape_with_order(vec![1, n])
            .expect("flatten_row");
        self.push(value, Op::FlattenRow(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = ndarray::arr0(self.nodes[a.0].value.sum()).into_dyn();
        self.push(value, Op::Sum(a))
    }

    /// `x @ w + b` with `b` a `(1, n)` row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let m = self.matmul(x, w);
        self.add_row(m, b)
    }

    /// Mean of squared entries of `a - b`.
    pub fn mean_squared_error(&mut self, a: Var, b: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let diff = self.sub(a, b);
        let sq = self.mul(diff, diff);
        let total = self.sum(sq);
        self.scale(total, 1.0 / n)
    }

    fn accumulate(&mut self, v: Var, delta: &ArrayD<f64>) {
        let node = &mut self.nodes[v.0];
        match &mut node.grad {
            Some(g) => *g += delta,
            None => node.grad = Some(delta.clone()),
        }
    }

    /// Reverse sweep from `root` (seeded with gradient 1). `root` must be the
    /// scalar produced last; gradients accumulate into every reachable node.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward root must be scalar");
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[root.0].grad = Some(ArrayD::ones(self.nodes[root.0].value.raw_dim()));

        for idx in (0..=root.0).rev() {
            let Some(dy) = self.nodes[idx].grad.clone() else {
                continue;
            };
            // Ops are matched by value where they borrow cached state.
            match &self.nodes[idx].op {
                Op::Leaf => {}
                &Op::Add(a, b) => {
                    self.accumulate(a, &dy);
                    self.accumulate(b, &dy);
                }
                &Op::Sub(a, b) => {
                    self.accumulate(a, &dy);
                    let neg = dy.mapv(|x| -x);
                    self.accumulate(b, &neg);
                }
                &Op::Mul(a, b) => {
                    let da = &dy * &self.nodes[b.0].value;
                    let db = &dy * &self.nodes[a.0].value;
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                &Op::Scale(a, c) => {
                    let da = dy.mapv(|x| x * c);
                    self.accumulate(a, &da);
                }
                &Op::MatMul(a, b) => {
                    let dyv = dy.view().into_dimensionality::<Ix2>().unwrap();
                    let av = self.view2(a).to_owned();
                    let bv = self.view2(b).to_owned();
                    let da = dyv.dot(&bv.t()).into_dyn();
                    let db = av.t().dot(&dyv).into_dyn();
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                &Op::MatMulTransposed(a, b) => {
                    // y = a b^T  =>  da = dy b, db = dy^T a
                    let dyv = dy.view().into_dimensionality::<Ix2>().unwrap();
                    let av = self.view2(a).to_owned();
                    let bv = self.view2(b).to_owned();
                    let da = dyv.dot(&bv).into_dyn();
                    let db = dyv.t().dot(&av).into_dyn();
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                &Op::AddRow(a, row) => {
                    let dyv = dy.view().into_dimensionality::<Ix2>().unwrap();
                    let drow = dyv
                        .sum_axis(Axis(0))
                        .insert_axis(Axis(0))
                        .into_dyn();
                    self.accumulate(a, &dy);
                    self.accumulate(row, &drow);
                }
                &Op::AddChannelBias(a, bias) => {
                    let dyv = dy.view().into_dimensionality::<Ix3>().unwrap();
                    let c = dyv.dim().0;
                    let mut dbias = Array2::<f64>::zeros((1, c));
                    for (ci, plane) in dyv.outer_iter().enumerate() {
                        dbias[(0, ci)] = plane.sum();
                    }
                    let dbias = dbias.into_dyn();
                    self.accumulate(a, &dy);
                    self.accumulate(bias, &dbias);
                }
                &Op::Silu(a) => {
                    let x = &self.nodes[a.0].value;
                    let da = ndarray::Zip::from(&dy).and(x).map_collect(|&g, &x| {
                        let s = sigmoid(x);
                        g * (s * (1.0 + x * (1.0 - s)))
                    });
                    self.accumulate(a, &da);
                }
                &Op::Log(a) => {
                    let x = &self.nodes[a.0].value;
                    let da = ndarray::Zip::from(&dy).and(x).map_collect(|&g, &x| g / x);
                    self.accumulate(a, &da);
                }
                &Op::SoftmaxRows(a) => {
                    let y = self.nodes[idx].value.view().into_dimensionality::<Ix2>().unwrap();
                    let dyv = dy.view().into_dimensionality::<Ix2>().unwrap();
                    let mut da = Array2::<f64>::zeros(y.raw_dim());
                    for r in 0..y.nrows() {
                        let yr = y.row(r);
                        let gr = dyv.row(r);
                        let dot = yr.dot(&gr);
                        for c in 0..y.ncols() {
                            da[(r, c)] = yr[c] * (gr[c] - dot);
                        }
                    }
                    let da = da.into_dyn();
                    self.accumulate(a, &da);
                }
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    stride,
                    cols,
                } => {
                    let (input, kernel, bias, stride) = (*input, *kernel, *bias, *stride);
                    let dyv = dy.view().into_dimensionality::<Ix3>().unwrap();
                    let (c_out, ho, wo) = dyv.dim();
                    let dy_mat = dyv.to_shape((c_out, ho * wo)).unwrap().to_owned();

                    let kdim = self.nodes[kernel.0].value.raw_dim();
                    let c_in = kdim[1];
                    let kv = self.nodes[kernel.0]
                        .value
                        .view()
                        .into_dimensionality::<ndarray::Ix4>()
                        .unwrap()
                        .to_shape((c_out, c_in * 9))
                        .unwrap()
                        .to_owned();

                    let dbias = dy_mat.sum_axis(Axis(1)).into_dyn();
                    let dkernel = dy_mat
                        .dot(&cols.t())
                        .into_shape_with_order((c_out, c_in, 3, 3))
                        .unwrap()
                        .into_dyn();
                    let dcols = kv.t().dot(&dy_mat);
                    let xdim = self.nodes[input.0].value.raw_dim();
                    let dinput = col2im(&dcols, c_in, xdim[1], xdim[2], stride).into_dyn();

                    self.accumulate(bias, &dbias);
                    self.accumulate(kernel, &dkernel);
                    self.accumulate(input, &dinput);
                }
                &Op::UpsampleNearest2(a) => {
                    let dyv = dy.view().into_dimensionality::<Ix3>().unwrap();
                    let (c, h2, w2) = dyv.dim();
                    let (h, w) = (h2 / 2, w2 / 2);
                    let mut da = Array3::<f64>::zeros((c, h, w));
                    for ci in 0..c {
                        for i in 0..h {
                            for j in 0..w {
                                da[(ci, i, j)] = dyv[(ci, 2 * i, 2 * j)]
                                    + dyv[(ci, 2 * i + 1, 2 * j)]
                                    + dyv[(ci, 2 * i, 2 * j + 1)]
                                    + dyv[(ci, 2 * i + 1, 2 * j + 1)];
                            }
                        }
                    }
                    let da = da.into_dyn();
                    self.accumulate(a, &da);
                }
                Op::ConcatRows(parts) => {
                    let parts = parts.clone();
                    let dyv = dy.view().into_dimensionality::<Ix2>().unwrap();
                    let mut offset = 0;
                    for p in parts {
                        let rows = self.nodes[p.0].value.raw_dim()[0];
                        let slice = dyv
                            .slice(ndarray::s![offset..offset + rows, ..])
                            .to_owned()
                            .into_dyn();
                        self.accumulate(p, &slice);
                        offset += rows;
                    }
                }
                &Op::ConcatCols(a, b) => {
                    let dyv = dy.view().into_dimensionality::<Ix2>().unwrap();
                    let na = self.nodes[a.0].value.raw_dim()[1];
                    let da = dyv.slice(ndarray::s![.., ..na]).to_owned().into_dyn();
                    let db = dyv.slice(ndarray::s![.., na..]).to_owned().into_dyn();
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                &Op::RepeatRows(a) => {
                    let dyv = dy.view().into_dimensionality::<Ix2>().unwrap();
                    let da = dyv.sum_axis(Axis(0)).insert_axis(Axis(0)).into_dyn();
                    self.accumulate(a, &da);
                }
                &Op::ChwToTokens(a) => {
                    let dyv = dy.view().into_dimensionality::<Ix2>().unwrap();
                    let dim = self.nodes[a.0].value.raw_dim();
                    let (c, h, w) = (dim[0], dim[1], dim[2]);
                    let mut da = Array3::<f64>::zeros((c, h, w));
                    for ci in 0..c {
                        for i in 0..h {
                            for j in 0..w {
                                da[(ci, i, j)] = dyv[(i * w + j, ci)];
                            }
                        }
                    }
                    let da = da.into_dyn();
                    self.accumulate(a, &da);
                }
                &Op::TokensToChw(a, (h, w)) => {
                    let dyv = dy.view().into_dimensionality::<Ix3>().unwrap();
                    let c = dyv.dim().0;
                    let mut da = Array2::<f64>::zeros((h * w, c));
                    for ci in 0..c {
                        for i in 0..h {
                            for j in 0..w {
                                da[(i * w + j, ci)] = dyv[(ci, i, j)];
                            }
                        }
                    }
                    let da = da.into_dyn();
                    self.accumulate(a, &da);
                }
                &Op::FlattenRow(a) => {
                    let da = dy
                        .clone()
                        .into_shape_with_order(self.nodes[a.0].value.raw_dim())
                        .expect("flatten_row backward");
                    self.accumulate(a, &da);
                }
                &Op::Sum(a) => {
                    let g = dy.iter().copied().next().unwrap();
                    let da = ArrayD::from_elem(self.nodes[a.0].value.raw_dim(), g);
                    self.accumulate(a, &da);
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn conv_out_dims(h: usize, w: usize, stride: usize) -> (usize, usize) {
    ((h - 1) / stride + 1, (w - 1) / stride + 1)
}

/// 3x3/pad-1 im2col: `(c_in * 9, h_out * w_out)` patch matrix.
fn im2col(x: &ndarray::ArrayView3<'_, f64>, stride: usize) -> Array2<f64> {
    let (c_in, h, w) = x.dim();
    let (ho, wo) = conv_out_dims(h, w, stride);
    let mut cols = Array2::<f64>::zeros((c_in * 9, ho * wo));
    for ci in 0..c_in {
        for ki in 0..3 {
            for kj in 0..3 {
                let row = ci * 9 + ki * 3 + kj;
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - 1;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - 1;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        cols[(row, oi * wo + oj)] = x[(ci, ii as usize, jj as usize)];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add inverse of [`im2col`].
fn col2im(dcols: &Array2<f64>, c_in: usize, h: usize, w: usize, stride: usize) -> Array3<f64> {
    let (ho, wo) = conv_out_dims(h, w, stride);
    let mut dx = Array3::<f64>::zeros((c_in, h, w));
    for ci in 0..c_in {
        for ki in 0..3 {
            for kj in 0..3 {
                let row = ci * 9 + ki * 3 + kj;
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - 1;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - 1;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        dx[(ci, ii as usize, jj as usize)] += dcols[(row, oi * wo + oj)];
                    }
                }
            }
        }
    }
    dx
}

/// Central-difference gradient of `f` w.r.t. `x`, one coordinate at a time.
/// Test helper; also used by the acceptance suite's gradient-integrity check.
pub fn finite_difference<F>(f: F, x: &ArrayD<f64>, step: f64) -> ArrayD<f64>
where
    F: Fn(&ArrayD<f64>) -> f64,
{
    let mut grad = ArrayD::zeros(x.raw_dim());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let orig = probe.as_slice_mut().unwrap()[idx];
        probe.as_slice_mut().unwrap()[idx] = orig + step;
        let plus = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = orig - step;
        let minus = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = orig;
        grad.as_slice_mut().unwrap()[idx] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// Relative error between an analytic and a numerical gradient entry.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, Array4};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn randn(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = crate::rng::stream(seed, 0xAD, 0);
        ArrayD::from_shape_simple_fn(shape.to_vec(), || rng.sample::<f64, _>(StandardNormal))
    }

    /// Composite graph touching every op; checks d(loss)/d(leaf) against
    /// finite differences for each leaf in turn.
    fn composite_loss(inputs: &[ArrayD<f64>]) -> (f64, Vec<ArrayD<f64>>) {
        let mut t = Tape::new();
        let x = t.leaf(inputs[0].clone()); // (2, 8, 8) feature map
        let k = t.leaf(inputs[1].clone()); // (3, 2, 3, 3) kernel
        let b = t.leaf(inputs[2].clone()); // (3,) bias
        let e = t.leaf(inputs[3].clone()); // (4, 3) condition tokens
        let w = t.leaf(inputs[4].clone()); // (3, 3) mixing matrix
        let r = t.leaf(inputs[5].clone()); // (1, 3) row bias

        let c1 = t.conv2d(x, k, b, 2); // (3, 4, 4)
        let c1 = t.silu(c1);
        let up = t.upsample_nearest2(c1); // (3, 8, 8)
        let tok = t.chw_to_tokens(up); // (64, 3)
        let q = t.linear(tok, w, r); // (64, 3)
        // softmax attention over the 4 condition tokens
        let et = t.leaf(
            inputs[3]
                .view()
                .into_dimensionality::<Ix2>()
                .unwrap()
                .t()
                .to_owned()
                .into_dyn(),
        );
        let scores = t.matmul(q, et); // (64, 4)
        let a = t.softmax_rows(scores);
        let mixed = t.matmul(a, e); // (64, 3)
        let merged = t.add(mixed, q);
        let back = t.tokens_to_chw(merged, 8, 8);
        let tok2 = t.chw_to_tokens(back);
        let row = t.leaf(inputs[5].clone());
        let rep = t.repeat_rows(row, 64);
        let cat = t.concat_cols(tok2, rep); // (64, 6)
        let half = t.scale(cat, 0.5);
        let joined = t.concat_rows(&[half, cat]); // (128, 6)
        let target = t.leaf(ArrayD::zeros(vec![128, 6]));
        let loss = t.mean_squared_error(joined, target);
        t.backward(loss);
        let grads = vec![
            t.grad(x),
            t.grad(k),
            t.grad(b),
            // e enters twice (as e and as its transpose leaf); combine.
            {
                let ge = t.grad(e);
                let get = t.grad(et);
                let get2 = get
                    .view()
                    .into_dimensionality::<Ix2>()
                    .unwrap()
                    .t()
                    .to_owned()
                    .into_dyn();
                ge + get2
            },
            t.grad(w),
            t.grad(r) + t.grad(row),
        ];
        (t.scalar(loss), grads)
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        let inputs = vec![
            randn(&[2, 8, 8], 1),
            randn(&[3, 2, 3, 3], 2),
            randn(&[3], 3),
            randn(&[4, 3], 4),
            randn(&[3, 3], 5),
            randn(&[1, 3], 6),
        ];
        let (_, analytic) = composite_loss(&inputs);
        for (i, g) in analytic.iter().enumerate() {
            let numeric = finite_difference(
                |probe| {
                    let mut inp = inputs.clone();
                    inp[i] = probe.clone();
                    composite_loss(&inp).0
                },
                &inputs[i],
                1e-4,
            );
            for (ga, gn) in g.iter().zip(numeric.iter()) {
                assert!(
                    relative_error(*ga, *gn) < 1e-5,
                    "input {i}: analytic {ga} vs numeric {gn}"
                );
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t = Tape::new();
        let x = t.leaf(randn(&[5, 7], 9));
        let s = t.softmax_rows(x);
        for row in t.value2(s).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn conv2d_matches_direct_convolution() {
        // 1x1 input channel, explicit loop oracle.
        let x = randn(&[1, 5, 5], 11);
        let k = randn(&[2, 1, 3, 3], 12);
        let b = arr1(&[0.3, -0.7]).into_dyn();
        let mut t = Tape::new();
        let (xv, kv, bv) = (t.leaf(x.clone()), t.leaf(k.clone()), t.leaf(b.clone()));
        let y = t.conv2d(xv, kv, bv, 1);
        let yv = t.value3(y);

        let x3 = x.view().into_dimensionality::<Ix3>().unwrap();
        let k4 = k.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        for co in 0..2 {
            for i in 0..5_usize {
                for j in 0..5_usize {
                    let mut acc = b[co];
                    for ki in 0..3_usize {
                        for kj in 0..3_usize {
                            let ii = i as isize + ki as isize - 1;
                            let jj = j as isize + kj as isize - 1;
                            if ii < 0 || jj < 0 || ii >= 5 || jj >= 5 {
                                continue;
                            }
                            acc += x3[(0, ii as usize, jj as usize)] * k4[(co, 0, ki, kj)];
                        }
                    }
                    assert!((yv[(co, i, j)] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn stride_two_halves_spatial_dims() {
        let mut t = Tape::new();
        let x = t.leaf(randn(&[1, 8, 8], 21));
        let k = t.leaf(randn(&[4, 1, 3, 3], 22));
        let b = t.leaf(ArrayD::zeros(vec![4]));
        let y = t.conv2d(x, k, b, 2);
        assert_eq!(t.value(y).shape(), &[4, 4, 4]);
    }

    #[test]
    fn residual_identity_when_branch_is_zero() {
        let mut t = Tape::new();
        let x = t.leaf(randn(&[6, 4], 31));
        let z = t.leaf(ArrayD::zeros(vec![6, 4]));
        let y = t.add(x, z);
        assert_eq!(t.value(y), t.value(x));
    }

    #[test]
    fn arr2_helpers_roundtrip() {
        let x = arr2(&[[1.0, 2.0], [3.0, 4.0]]);
        let mut t = Tape::new();
        let v = t.leaf2(x.clone());
        assert_eq!(t.value2(v), x);
        let _ = Array4::<f64>::zeros((1, 1, 3, 3));
    }
}
