//! Matrix-level reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a tape: each operation appends a node holding its forward
//! value and the indices of its inputs. [`Graph::backward`] walks the tape in
//! reverse and accumulates adjoints. Graphs are built fresh for every
//! forward pass and dropped afterwards.
//!
//! Besides the usual elementwise and linear-algebra primitives the tape has
//! a few fused operations (diagonal-Gaussian KL and log-density tables,
//! convolutions) whose adjoints are written out by hand; every one of them
//! is covered by a finite-difference test below.

use crate::tensor::{matmul_at_into, matmul_bt_into, matmul_into, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a 2-D convolution over channel-major flattened images.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Only used by transposed convolutions.
    pub output_padding: usize,
}

impl ConvGeom {
    pub fn conv_out_hw(&self) -> (usize, usize) {
        let f = |n: usize| (n + 2 * self.padding - self.kernel) / self.stride + 1;
        (f(self.in_h), f(self.in_w))
    }

    pub fn conv_transpose_out_hw(&self) -> (usize, usize) {
        let f = |n: usize| {
            (n - 1) * self.stride + self.kernel + self.output_padding - 2 * self.padding
        };
        (f(self.in_h), f(self.in_w))
    }

    pub fn in_len(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `b` is `1×c`, `r×1` or `1×1`.
    AddBroadcast(Var, Var),
    MulBroadcast(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Exp(Var),
    Ln(Var),
    Sigmoid(Var),
    Relu(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    SumAll(Var),
    RowSums(Var),
    ColSums(Var),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    LogSoftmaxRows(Var),
    LogSumExpRows(Var),
    NormalizeRows(Var),
    Conv2d { input: Var, weight: Var, bias: Var, geom: ConvGeom },
    ConvTranspose2d { input: Var, weight: Var, bias: Var, geom: ConvGeom },
    GaussKl { qm: Var, qlv: Var, pm: Var, plv: Var },
    GaussLogPdf { z: Var, pm: Var, plv: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Adjoints produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Adjoint of `v`, or zeros of `shape` if nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape.0, shape.1))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    /// Trainable input.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, true)
    }

    /// Input that never receives an adjoint.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, false)
    }

    /// Same value as `v`, cut from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(value, op, requires_grad)
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.rows(), "matmul {:?} x {:?}", av.shape(), bv.shape());
        let out = av.matmul(bv);
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.cols(), "matmul_bt {:?} x {:?}ᵀ", av.shape(), bv.shape());
        let mut out = Tensor::zeros(av.rows(), bv.rows());
        matmul_bt_into(av, bv, &mut out);
        self.push(out, Op::MatMulBt(a, b), &[a, b])
    }

    /// `x · w + b` for `w: in×out`, `b: 1×out`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_broadcast(xw, b)
    }

    // ---- elementwise -------------------------------------------------------

    fn zip_values(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(av.rows(), av.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_values(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_values(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_values(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    fn broadcast_values(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        let (r, c) = av.shape();
        let mut out = av.clone();
        match bv.shape() {
            (1, 1) => {
                let s = bv.item();
                out.data_mut().iter_mut().for_each(|v| *v = f(*v, s));
            }
            (1, bc) if bc == c => {
                for i in 0..r {
                    for (v, &s) in out.row_mut(i).iter_mut().zip(bv.data()) {
                        *v = f(*v, s);
                    }
                }
            }
            (br, 1) if br == r => {
                for i in 0..r {
                    let s = bv.data()[i];
                    out.row_mut(i).iter_mut().for_each(|v| *v = f(*v, s));
                }
            }
            s => panic!("cannot broadcast {s:?} onto {:?}", (r, c)),
        }
        out
    }

    /// `a + b` with `b` broadcast from `1×c`, `r×1` or `1×1`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Var {
        let out = self.broadcast_values(a, b, |x, y| x + y);
        self.push(out, Op::AddBroadcast(a, b), &[a, b])
    }

    /// `a ⊙ b` with `b` broadcast from `1×c`, `r×1` or `1×1`.
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Var {
        let out = self.broadcast_values(a, b, |x, y| x * y);
        self.push(out, Op::MulBroadcast(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|v| v * k);
        self.push(out, Op::Scale(a, k), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn offset(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|v| v + k);
        self.push(out, Op::Offset(a), &[a])
    }

    /// `k - a`
    pub fn rsub_scalar(&mut self, k: f64, a: Var) -> Var {
        let n = self.neg(a);
        self.offset(n, k)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a), &[a])
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Ln(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v * v);
        self.push(out, Op::Square(a), &[a])
    }

    /// Values outside `[lo, hi]` are pinned and pass no gradient.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|v| v.clamp(lo, hi));
        self.push(out, Op::Clamp(a, lo, hi), &[a])
    }

    // ---- reductions and reshaping -----------------------------------------

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum across columns: `r×c → r×1`.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = (0..av.rows()).map(|i| av.row(i).iter().sum()).collect();
        let out = Tensor::from_vec(av.rows(), 1, data);
        self.push(out, Op::RowSums(a), &[a])
    }

    /// Sum down rows: `r×c → 1×c`.
    pub fn col_sums(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = Tensor::zeros(1, av.cols());
        for i in 0..av.rows() {
            for (o, &v) in out.data_mut().iter_mut().zip(av.row(i)) {
                *o += v;
            }
        }
        self.push(out, Op::ColSums(a), &[a])
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let out = self.value(a).select_rows(&idx);
        self.push(out, Op::GatherRows(a, idx), &[a])
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in &parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        let out = Tensor::from_vec(rows, cols, data);
        let inputs = parts.clone();
        self.push(out, Op::ConcatRows(parts), &inputs)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let av = self.value(a);
        assert!(start <= end && end <= av.cols());
        let mut data = Vec::with_capacity(av.rows() * (end - start));
        for i in 0..av.rows() {
            data.extend_from_slice(&av.row(i)[start..end]);
        }
        let out = Tensor::from_vec(av.rows(), end - start, data);
        self.push(out, Op::SliceCols(a, start), &[a])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = av.clone();
        for i in 0..av.rows() {
            let lse = log_sum_exp(av.row(i));
            out.row_mut(i).iter_mut().for_each(|v| *v -= lse);
        }
        self.push(out, Op::LogSoftmaxRows(a), &[a])
    }

    /// `r×c → r×1`
    pub fn log_sum_exp_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = (0..av.rows()).map(|i| log_sum_exp(av.row(i))).collect();
        let out = Tensor::from_vec(av.rows(), 1, data);
        self.push(out, Op::LogSumExpRows(a), &[a])
    }

    /// Scale each row to unit Euclidean norm. Callers must reject zero rows.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            let n = out.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            out.row_mut(i).iter_mut().for_each(|v| *v /= n);
        }
        self.push(out, Op::NormalizeRows(a), &[a])
    }

    // ---- convolutions ------------------------------------------------------

    /// `input: N × (Cin·H·W)`, `weight: Cout × (Cin·k·k)`, `bias: 1 × Cout`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, geom: ConvGeom) -> Var {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        assert_eq!(x.cols(), geom.in_len(), "conv2d input width");
        assert_eq!(
            w.shape(),
            (geom.out_channels, geom.in_channels * geom.kernel * geom.kernel),
            "conv2d weight shape"
        );
        let out = conv2d_forward(x, w, b, &geom);
        self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            &[input, weight, bias],
        )
    }

    /// `input: N × (Cin·H·W)`, `weight: Cin × (Cout·k·k)`, `bias: 1 × Cout`.
    pub fn conv_transpose2d(&mut self, input: Var, weight: Var, bias: Var, geom: ConvGeom) -> Var {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        assert_eq!(x.cols(), geom.in_len(), "conv_transpose2d input width");
        assert_eq!(
            w.shape(),
            (geom.in_channels, geom.out_channels * geom.kernel * geom.kernel),
            "conv_transpose2d weight shape"
        );
        let out = conv_transpose2d_forward(x, w, b, &geom);
        self.push(
            out,
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geom,
            },
            &[input, weight, bias],
        )
    }

    // ---- fused Gaussian tables --------------------------------------------

    /// `KL(q_n ‖ p_t)` for every row pair: `N × T`.
    ///
    /// `qm, qlv: N×D`; `pm: T×D`; `plv: T×D` or `T×1` (isotropic).
    pub fn gauss_kl_table(&mut self, qm: Var, qlv: Var, pm: Var, plv: Var) -> Var {
        let out = gauss_kl_table(self.value(qm), self.value(qlv), self.value(pm), self.value(plv));
        self.push(out, Op::GaussKl { qm, qlv, pm, plv }, &[qm, qlv, pm, plv])
    }

    /// `log N(z_n | μ_t, σ_t²)` for every row pair: `N × T`.
    pub fn gauss_log_pdf_table(&mut self, z: Var, pm: Var, plv: Var) -> Var {
        let out = gauss_log_pdf_table(self.value(z), self.value(pm), self.value(plv));
        self.push(out, Op::GaussLogPdf { z, pm, plv }, &[z, pm, plv])
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from `output`, seeded with ones.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let (r, c) = self.shape(output);
        grads[output.0] = Some(Tensor::filled(r, c, 1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let ga = acc(grads, *a, av.shape());
                    matmul_bt_into(g, bv, ga);
                }
                if self.needs(*b) {
                    let gb = acc(grads, *b, bv.shape());
                    matmul_at_into(av, g, gb);
                }
            }
            Op::MatMulBt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let ga = acc(grads, *a, av.shape());
                    matmul_into(g, bv, ga);
                }
                if self.needs(*b) {
                    let gb = acc(grads, *b, bv.shape());
                    matmul_at_into(g, av, gb);
                }
            }
            Op::Add(a, b) => {
                self.acc_map(grads, *a, g, |gi, _| gi);
                self.acc_map(grads, *b, g, |gi, _| gi);
            }
            Op::Sub(a, b) => {
                self.acc_map(grads, *a, g, |gi, _| gi);
                self.acc_map(grads, *b, g, |gi, _| -gi);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).clone(), self.value(*b).clone());
                self.acc_map(grads, *a, g, |gi, i| gi * bv.data()[i]);
                self.acc_map(grads, *b, g, |gi, i| gi * av.data()[i]);
            }
            Op::AddBroadcast(a, b) => {
                self.acc_map(grads, *a, g, |gi, _| gi);
                if self.needs(*b) {
                    let reduced = reduce_to(g, self.value(*b).shape(), |gi, _| gi);
                    add_into(acc(grads, *b, reduced.shape()), &reduced);
                }
            }
            Op::MulBroadcast(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.needs(*a) {
                    let ga = acc(grads, *a, av.shape());
                    let cols = av.cols();
                    for (i, (o, &gi)) in ga.data_mut().iter_mut().zip(g.data()).enumerate() {
                        *o += gi * broadcast_at(bv, i / cols, i % cols);
                    }
                }
                if self.needs(*b) {
                    let reduced = reduce_to(g, bv.shape(), |gi, i| gi * av.data()[i]);
                    add_into(acc(grads, *b, reduced.shape()), &reduced);
                }
            }
            Op::Scale(a, k) => {
                let k = *k;
                self.acc_map(grads, *a, g, |gi, _| gi * k);
            }
            Op::Offset(a) => self.acc_map(grads, *a, g, |gi, _| gi),
            Op::Exp(a) => self.acc_map(grads, *a, g, |gi, i| gi * y.data()[i]),
            Op::Ln(a) => {
                let av = self.value(*a).clone();
                self.acc_map(grads, *a, g, |gi, i| gi / av.data()[i]);
            }
            Op::Sigmoid(a) => {
                self.acc_map(grads, *a, g, |gi, i| {
                    let s = y.data()[i];
                    gi * s * (1.0 - s)
                });
            }
            Op::Relu(a) => {
                let av = self.value(*a).clone();
                self.acc_map(grads, *a, g, |gi, i| if av.data()[i] > 0.0 { gi } else { 0.0 });
            }
            Op::Square(a) => {
                let av = self.value(*a).clone();
                self.acc_map(grads, *a, g, |gi, i| 2.0 * gi * av.data()[i]);
            }
            Op::Clamp(a, lo, hi) => {
                let av = self.value(*a).clone();
                let (lo, hi) = (*lo, *hi);
                self.acc_map(grads, *a, g, |gi, i| {
                    let v = av.data()[i];
                    if v >= lo && v <= hi {
                        gi
                    } else {
                        0.0
                    }
                });
            }
            Op::SumAll(a) => {
                let s = g.item();
                self.acc_map_shape(grads, *a, |_| s);
            }
            Op::RowSums(a) => {
                let cols = self.value(*a).cols();
                self.acc_map_shape(grads, *a, |i| g.data()[i / cols]);
            }
            Op::ColSums(a) => {
                let cols = self.value(*a).cols();
                self.acc_map_shape(grads, *a, |i| g.data()[i % cols]);
            }
            Op::GatherRows(a, idx) => {
                if self.needs(*a) {
                    let av = self.value(*a);
                    let ga = acc(grads, *a, av.shape());
                    for (k, &r) in idx.iter().enumerate() {
                        for (o, &gi) in ga.row_mut(r).iter_mut().zip(g.row(k)) {
                            *o += gi;
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let shape = self.shape(p);
                    if self.needs(p) {
                        let gp = acc(grads, p, shape);
                        let n = shape.0 * shape.1;
                        let cols = g.cols();
                        let src = &g.data()[offset * cols..offset * cols + n];
                        for (o, &gi) in gp.data_mut().iter_mut().zip(src) {
                            *o += gi;
                        }
                    }
                    offset += shape.0;
                }
            }
            Op::SliceCols(a, start) => {
                if self.needs(*a) {
                    let shape = self.shape(*a);
                    let ga = acc(grads, *a, shape);
                    let w = g.cols();
                    for i in 0..shape.0 {
                        for (o, &gi) in ga.row_mut(i)[*start..*start + w].iter_mut().zip(g.row(i)) {
                            *o += gi;
                        }
                    }
                }
            }
            Op::LogSoftmaxRows(a) => {
                if self.needs(*a) {
                    let ga = acc(grads, *a, y.shape());
                    for i in 0..y.rows() {
                        let gsum: f64 = g.row(i).iter().sum();
                        for ((o, &gi), &yi) in ga.row_mut(i).iter_mut().zip(g.row(i)).zip(y.row(i)) {
                            *o += gi - yi.exp() * gsum;
                        }
                    }
                }
            }
            Op::LogSumExpRows(a) => {
                if self.needs(*a) {
                    let av = self.value(*a);
                    let ga = acc(grads, *a, av.shape());
                    for i in 0..av.rows() {
                        let (lse, gi) = (y.data()[i], g.data()[i]);
                        for (o, &x) in ga.row_mut(i).iter_mut().zip(av.row(i)) {
                            *o += gi * (x - lse).exp();
                        }
                    }
                }
            }
            Op::NormalizeRows(a) => {
                if self.needs(*a) {
                    let av = self.value(*a);
                    let ga = acc(grads, *a, av.shape());
                    for i in 0..av.rows() {
                        let n = av.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                        let dot: f64 = g.row(i).iter().zip(y.row(i)).map(|(a, b)| a * b).sum();
                        for ((o, &gi), &yi) in ga.row_mut(i).iter_mut().zip(g.row(i)).zip(y.row(i)) {
                            *o += (gi - yi * dot) / n;
                        }
                    }
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let (x, w) = (self.value(*input), self.value(*weight));
                let mut gx = self.needs(*input).then(|| Tensor::zeros(x.rows(), x.cols()));
                let mut gw = self.needs(*weight).then(|| Tensor::zeros(w.rows(), w.cols()));
                let mut gb = self.needs(*bias).then(|| Tensor::zeros(1, geom.out_channels));
                conv2d_backward(x, w, g, geom, gx.as_mut(), gw.as_mut(), gb.as_mut());
                self.acc_opt(grads, *input, gx);
                self.acc_opt(grads, *weight, gw);
                self.acc_opt(grads, *bias, gb);
            }
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let (x, w) = (self.value(*input), self.value(*weight));
                let mut gx = self.needs(*input).then(|| Tensor::zeros(x.rows(), x.cols()));
                let mut gw = self.needs(*weight).then(|| Tensor::zeros(w.rows(), w.cols()));
                let mut gb = self.needs(*bias).then(|| Tensor::zeros(1, geom.out_channels));
                conv_transpose2d_backward(x, w, g, geom, gx.as_mut(), gw.as_mut(), gb.as_mut());
                self.acc_opt(grads, *input, gx);
                self.acc_opt(grads, *weight, gw);
                self.acc_opt(grads, *bias, gb);
            }
            Op::GaussKl { qm, qlv, pm, plv } => {
                let (gqm, gqlv, gpm, gplv) = gauss_kl_table_backward(
                    self.value(*qm),
                    self.value(*qlv),
                    self.value(*pm),
                    self.value(*plv),
                    g,
                );
                self.acc_opt(grads, *qm, Some(gqm));
                self.acc_opt(grads, *qlv, Some(gqlv));
                self.acc_opt(grads, *pm, Some(gpm));
                self.acc_opt(grads, *plv, Some(gplv));
            }
            Op::GaussLogPdf { z, pm, plv } => {
                let (gz, gpm, gplv) =
                    gauss_log_pdf_table_backward(self.value(*z), self.value(*pm), self.value(*plv), g);
                self.acc_opt(grads, *z, Some(gz));
                self.acc_opt(grads, *pm, Some(gpm));
                self.acc_opt(grads, *plv, Some(gplv));
            }
        }
    }

    fn acc_map(&self, grads: &mut [Option<Tensor>], a: Var, g: &Tensor, f: impl Fn(f64, usize) -> f64) {
        if !self.needs(a) {
            return;
        }
        let ga = acc(grads, a, g.shape());
        for (i, (o, &gi)) in ga.data_mut().iter_mut().zip(g.data()).enumerate() {
            *o += f(gi, i);
        }
    }

    fn acc_map_shape(&self, grads: &mut [Option<Tensor>], a: Var, f: impl Fn(usize) -> f64) {
        if !self.needs(a) {
            return;
        }
        let shape = self.shape(a);
        let ga = acc(grads, a, shape);
        for (i, o) in ga.data_mut().iter_mut().enumerate() {
            *o += f(i);
        }
    }

    fn acc_opt(&self, grads: &mut [Option<Tensor>], a: Var, g: Option<Tensor>) {
        if let Some(g) = g {
            if self.needs(a) {
                add_into(acc(grads, a, g.shape()), &g);
            }
        }
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, shape: (usize, usize)) -> &mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape.0, shape.1))
}

fn add_into(dst: &mut Tensor, src: &Tensor) {
    for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
}

#[inline]
fn broadcast_at(b: &Tensor, r: usize, c: usize) -> f64 {
    match b.shape() {
        (1, 1) => b.data()[0],
        (1, _) => b.data()[c],
        _ => b.data()[r],
    }
}

/// Sum `f(g_i, i)` over the broadcast axes down to `shape`.
fn reduce_to(g: &Tensor, shape: (usize, usize), f: impl Fn(f64, usize) -> f64) -> Tensor {
    let mut out = Tensor::zeros(shape.0, shape.1);
    let cols = g.cols();
    for (i, &gi) in g.data().iter().enumerate() {
        let (r, c) = (i / cols, i % cols);
        let slot = match shape {
            (1, 1) => 0,
            (1, _) => c,
            _ => r,
        };
        out.data_mut()[slot] += f(gi, i);
    }
    out
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Stable `log Σ exp(xᵢ)`; `-∞` for an empty or all-`-∞` slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

#[inline]
fn node_lv(plv: &Tensor, t: usize, d: usize) -> f64 {
    if plv.cols() == 1 {
        plv.get(t, 0)
    } else {
        plv.get(t, d)
    }
}

fn gauss_kl_table(qm: &Tensor, qlv: &Tensor, pm: &Tensor, plv: &Tensor) -> Tensor {
    let (n, d) = qm.shape();
    let t = pm.rows();
    assert_eq!(qlv.shape(), (n, d));
    assert_eq!(pm.cols(), d);
    assert!(plv.rows() == t && (plv.cols() == 1 || plv.cols() == d));
    let mut out = Tensor::zeros(n, t);
    for i in 0..n {
        for c in 0..t {
            let mut s = 0.0;
            for k in 0..d {
                let lvp = node_lv(plv, c, k);
                let lvq = qlv.get(i, k);
                let diff = qm.get(i, k) - pm.get(c, k);
                s += lvp - lvq + (lvq.exp() + diff * diff) * (-lvp).exp() - 1.0;
            }
            out.set(i, c, 0.5 * s);
        }
    }
    out
}

fn gauss_kl_table_backward(
    qm: &Tensor,
    qlv: &Tensor,
    pm: &Tensor,
    plv: &Tensor,
    g: &Tensor,
) -> (Tensor, Tensor, Tensor, Tensor) {
    let (n, d) = qm.shape();
    let t = pm.rows();
    let mut gqm = Tensor::zeros(n, d);
    let mut gqlv = Tensor::zeros(n, d);
    let mut gpm = Tensor::zeros(t, d);
    let mut gplv = Tensor::zeros(t, plv.cols());
    let iso = plv.cols() == 1;
    for i in 0..n {
        for c in 0..t {
            let gv = g.get(i, c);
            if gv == 0.0 {
                continue;
            }
            for k in 0..d {
                let lvp = node_lv(plv, c, k);
                let inv = (-lvp).exp();
                let vq = qlv.get(i, k).exp();
                let diff = qm.get(i, k) - pm.get(c, k);
                let dm = gv * diff * inv;
                gqm.data_mut()[i * d + k] += dm;
                gpm.data_mut()[c * d + k] -= dm;
                gqlv.data_mut()[i * d + k] += gv * 0.5 * (vq * inv - 1.0);
                let slot = if iso { c } else { c * d + k };
                gplv.data_mut()[slot] += gv * 0.5 * (1.0 - (vq + diff * diff) * inv);
            }
        }
    }
    (gqm, gqlv, gpm, gplv)
}

fn gauss_log_pdf_table(z: &Tensor, pm: &Tensor, plv: &Tensor) -> Tensor {
    let (n, d) = z.shape();
    let t = pm.rows();
    assert_eq!(pm.cols(), d);
    assert!(plv.rows() == t && (plv.cols() == 1 || plv.cols() == d));
    let mut out = Tensor::zeros(n, t);
    for i in 0..n {
        for c in 0..t {
            let mut s = 0.0;
            for k in 0..d {
                let lvp = node_lv(plv, c, k);
                let diff = z.get(i, k) - pm.get(c, k);
                s += lvp + diff * diff * (-lvp).exp();
            }
            out.set(i, c, -(d as f64) * HALF_LN_2PI - 0.5 * s);
        }
    }
    out
}

fn gauss_log_pdf_table_backward(
    z: &Tensor,
    pm: &Tensor,
    plv: &Tensor,
    g: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (n, d) = z.shape();
    let t = pm.rows();
    let mut gz = Tensor::zeros(n, d);
    let mut gpm = Tensor::zeros(t, d);
    let mut gplv = Tensor::zeros(t, plv.cols());
    let iso = plv.cols() == 1;
    for i in 0..n {
        for c in 0..t {
            let gv = g.get(i, c);
            if gv == 0.0 {
                continue;
            }
            for k in 0..d {
                let lvp = node_lv(plv, c, k);
                let inv = (-lvp).exp();
                let diff = z.get(i, k) - pm.get(c, k);
                gz.data_mut()[i * d + k] -= gv * diff * inv;
                gpm.data_mut()[c * d + k] += gv * diff * inv;
                let slot = if iso { c } else { c * d + k };
                gplv.data_mut()[slot] += gv * 0.5 * (diff * diff * inv - 1.0);
            }
        }
    }
    (gz, gpm, gplv)
}

fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, geom: &ConvGeom) -> Tensor {
    let (oh, ow) = geom.conv_out_hw();
    let ConvGeom {
        in_channels: ic,
        in_h: h,
        in_w: wd,
        out_channels: oc,
        kernel: k,
        stride: s,
        padding: p,
        ..
    } = *geom;
    let mut out = Tensor::zeros(x.rows(), oc * oh * ow);
    for n in 0..x.rows() {
        let xin = x.row(n);
        let orow = out.row_mut(n);
        for o in 0..oc {
            let wrow = w.row(o);
            let bias = b.data()[o];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias;
                    for c in 0..ic {
                        for ky in 0..k {
                            let iy = (oy * s + ky) as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xbase = c * h * wd + iy as usize * wd;
                            let wbase = (c * k + ky) * k;
                            for kx in 0..k {
                                let ix = (ox * s + kx) as isize - p as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc += wrow[wbase + kx] * xin[xbase + ix as usize];
                            }
                        }
                    }
                    orow[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    geom: &ConvGeom,
    mut gx: Option<&mut Tensor>,
    mut gw: Option<&mut Tensor>,
    mut gb: Option<&mut Tensor>,
) {
    let (oh, ow) = geom.conv_out_hw();
    let ConvGeom {
        in_channels: ic,
        in_h: h,
        in_w: wd,
        out_channels: oc,
        kernel: k,
        stride: s,
        padding: p,
        ..
    } = *geom;
    for n in 0..x.rows() {
        let xin = x.row(n);
        let grow = g.row(n);
        for o in 0..oc {
            for oy in 0..oh {
                for ox in 0..ow {
                    let go = grow[(o * oh + oy) * ow + ox];
                    if go == 0.0 {
                        continue;
                    }
                    if let Some(gb) = gb.as_deref_mut() {
                        gb.data_mut()[o] += go;
                    }
                    for c in 0..ic {
                        for ky in 0..k {
                            let iy = (oy * s + ky) as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xbase = c * h * wd + iy as usize * wd;
                            let wbase = (c * k + ky) * k;
                            for kx in 0..k {
                                let ix = (ox * s + kx) as isize - p as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                let xi = xbase + ix as usize;
                                if let Some(gw) = gw.as_deref_mut() {
                                    gw.row_mut(o)[wbase + kx] += go * xin[xi];
                                }
                                if let Some(gx) = gx.as_deref_mut() {
                                    gx.row_mut(n)[xi] += go * w.row(o)[wbase + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_transpose2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, geom: &ConvGeom) -> Tensor {
    let (oh, ow) = geom.conv_transpose_out_hw();
    let ConvGeom {
        in_channels: ic,
        in_h: h,
        in_w: wd,
        out_channels: oc,
        kernel: k,
        stride: s,
        padding: p,
        ..
    } = *geom;
    let mut out = Tensor::zeros(x.rows(), oc * oh * ow);
    for n in 0..x.rows() {
        let xin = x.row(n);
        let orow = out.row_mut(n);
        for o in 0..oc {
            let bias = b.data()[o];
            orow[o * oh * ow..(o + 1) * oh * ow].iter_mut().for_each(|v| *v = bias);
        }
        for c in 0..ic {
            let wrow = w.row(c);
            for iy in 0..h {
                for ix in 0..wd {
                    let xv = xin[(c * h + iy) * wd + ix];
                    if xv == 0.0 {
                        continue;
                    }
                    for o in 0..oc {
                        for ky in 0..k {
                            let oy = (iy * s + ky) as isize - p as isize;
                            if oy < 0 || oy >= oh as isize {
                                continue;
                            }
                            let obase = (o * oh + oy as usize) * ow;
                            let wbase = (o * k + ky) * k;
                            for kx in 0..k {
                                let ox = (ix * s + kx) as isize - p as isize;
                                if ox < 0 || ox >= ow as isize {
                                    continue;
                                }
                                orow[obase + ox as usize] += xv * wrow[wbase + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_transpose2d_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    geom: &ConvGeom,
    mut gx: Option<&mut Tensor>,
    mut gw: Option<&mut Tensor>,
    mut gb: Option<&mut Tensor>,
) {
    let (oh, ow) = geom.conv_transpose_out_hw();
    let ConvGeom {
        in_channels: ic,
        in_h: h,
        in_w: wd,
        out_channels: oc,
        kernel: k,
        stride: s,
        padding: p,
        ..
    } = *geom;
    for n in 0..x.rows() {
        let xin = x.row(n);
        let grow = g.row(n);
        if let Some(gb) = gb.as_deref_mut() {
            for o in 0..oc {
                gb.data_mut()[o] += grow[o * oh * ow..(o + 1) * oh * ow].iter().sum::<f64>();
            }
        }
        for c in 0..ic {
            for iy in 0..h {
                for ix in 0..wd {
                    let xi = (c * h + iy) * wd + ix;
                    let xv = xin[xi];
                    let mut gxi = 0.0;
                    for o in 0..oc {
                        for ky in 0..k {
                            let oy = (iy * s + ky) as isize - p as isize;
                            if oy < 0 || oy >= oh as isize {
                                continue;
                            }
                            let obase = (o * oh + oy as usize) * ow;
                            let wbase = (o * k + ky) * k;
                            for kx in 0..k {
                                let ox = (ix * s + kx) as isize - p as isize;
                                if ox < 0 || ox >= ow as isize {
                                    continue;
                                }
                                let go = grow[obase + ox as usize];
                                gxi += go * w.row(c)[wbase + kx];
                                if let Some(gw) = gw.as_deref_mut() {
                                    gw.row_mut(c)[wbase + kx] += go * xv;
                                }
                            }
                        }
                    }
                    if let Some(gx) = gx.as_deref_mut() {
                        gx.row_mut(n)[xi] += gxi;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Tensor {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-scale..scale)).collect())
    }

    /// Compare the tape's adjoints of every input against central differences
    /// of the scalar `f` built over fresh graphs.
    pub(crate) fn check_gradients(
        inputs: &[Tensor],
        f: impl Fn(&mut Graph, &[Var]) -> Var,
        tol: f64,
    ) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars);
        let out = g.sum_all(out);
        let grads = g.backward(out);

        let eval = |ins: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|t| g.param(t.clone())).collect();
            let o = f(&mut g, &vars);
            g.value(o).sum()
        };
        let h = 1e-5;
        for (k, t) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(vars[k], t.shape());
            for i in 0..t.len() {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[i] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[i];
                let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                assert!(err < tol, "input {k} entry {i}: analytic {a} vs fd {fd}");
            }
        }
    }

    #[test]
    fn elementwise_and_broadcast_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_tensor(&mut rng, 3, 4, 1.0);
        let b = random_tensor(&mut rng, 3, 4, 1.0);
        let row = random_tensor(&mut rng, 1, 4, 1.0);
        let col = random_tensor(&mut rng, 3, 1, 1.0);
        let s = random_tensor(&mut rng, 1, 1, 1.0);
        check_gradients(
            &[a, b, row, col, s],
            |g, v| {
                let m = g.mul(v[0], v[1]);
                let e = g.exp(m);
                let sq = g.square(v[1]);
                let p = g.offset(sq, 1.0);
                let l = g.ln(p);
                let x = g.sub(e, l);
                let x = g.add_broadcast(x, v[2]);
                let x = g.mul_broadcast(x, v[3]);
                let x = g.mul_broadcast(x, v[4]);
                let sg = g.sigmoid(x);
                let x = g.add(x, sg);
                let y = g.scale(x, 0.7);
                let r = g.row_sums(y);
                let c = g.col_sums(y);
                let r = g.sum_all(r);
                let c = g.sum_all(c);
                let c = g.square(c);
                g.add(r, c)
            },
            1e-6,
        );
    }

    #[test]
    fn matmul_and_reshape_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_tensor(&mut rng, 3, 5, 1.0);
        let b = random_tensor(&mut rng, 5, 2, 1.0);
        let c = random_tensor(&mut rng, 4, 2, 1.0);
        check_gradients(
            &[a, b, c],
            |g, v| {
                let ab = g.matmul(v[0], v[1]);
                let abc = g.matmul_bt(ab, v[2]);
                let gathered = g.gather_rows(abc, vec![2, 0, 2]);
                let cat = g.concat_rows(vec![abc, gathered]);
                let sl = g.slice_cols(cat, 1, 3);
                let ls = g.log_softmax_rows(sl);
                let lse = g.log_sum_exp_rows(cat);
                let nr = g.normalize_rows(cat);
                let nr = g.square(nr);
                let w = g.gather_rows(nr, vec![0, 5]);
                let x = g.sum_all(ls);
                let y = g.sum_all(lse);
                let z = g.sum_all(w);
                let xy = g.add(x, y);
                let xy = g.mul(xy, z);
                g.scale(xy, 0.5)
            },
            1e-6,
        );
    }

    #[test]
    fn relu_and_clamp_gradients_away_from_kinks() {
        let a = Tensor::from_vec(1, 4, vec![-0.7, 0.4, 1.3, -2.2]);
        check_gradients(
            &[a],
            |g, v| {
                let r = g.relu(v[0]);
                let c = g.clamp(v[0], -1.0, 1.0);
                let s = g.add(r, c);
                g.square(s)
            },
            1e-6,
        );
    }

    #[test]
    fn gaussian_table_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let qm = random_tensor(&mut rng, 3, 2, 1.0);
        let qlv = random_tensor(&mut rng, 3, 2, 0.5);
        let pm = random_tensor(&mut rng, 4, 2, 1.0);
        for plv_cols in [1, 2] {
            let plv = random_tensor(&mut rng, 4, plv_cols, 0.5);
            check_gradients(
                &[qm.clone(), qlv.clone(), pm.clone(), plv.clone()],
                |g, v| g.gauss_kl_table(v[0], v[1], v[2], v[3]),
                1e-6,
            );
            check_gradients(
                &[qm.clone(), pm.clone(), plv],
                |g, v| g.gauss_log_pdf_table(v[0], v[1], v[2]),
                1e-6,
            );
        }
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let geom = ConvGeom {
            in_channels: 2,
            in_h: 5,
            in_w: 5,
            out_channels: 3,
            kernel: 3,
            stride: 2,
            padding: 1,
            output_padding: 0,
        };
        let x = random_tensor(&mut rng, 2, geom.in_len(), 1.0);
        let w = random_tensor(&mut rng, 3, 2 * 9, 1.0);
        let b = random_tensor(&mut rng, 1, 3, 1.0);
        check_gradients(
            &[x, w, b],
            |g, v| {
                let y = g.conv2d(v[0], v[1], v[2], geom);
                g.square(y)
            },
            1e-6,
        );

        let tgeom = ConvGeom {
            in_channels: 2,
            in_h: 3,
            in_w: 3,
            out_channels: 2,
            kernel: 3,
            stride: 2,
            padding: 1,
            output_padding: 1,
        };
        assert_eq!(tgeom.conv_transpose_out_hw(), (6, 6));
        let x = random_tensor(&mut rng, 2, tgeom.in_len(), 1.0);
        let w = random_tensor(&mut rng, 2, 2 * 9, 1.0);
        let b = random_tensor(&mut rng, 1, 2, 1.0);
        check_gradients(
            &[x, w, b],
            |g, v| {
                let y = g.conv_transpose2d(v[0], v[1], v[2], tgeom);
                g.square(y)
            },
            1e-6,
        );
    }

    /// Transposed convolution is the adjoint of the forward convolution:
    /// ⟨conv(x), y⟩ = ⟨x, convᵀ(y)⟩ with shared weights and zero bias.
    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let geom = ConvGeom {
            in_channels: 2,
            in_h: 7,
            in_w: 7,
            out_channels: 3,
            kernel: 3,
            stride: 2,
            padding: 1,
            output_padding: 0,
        };
        let (oh, ow) = geom.conv_out_hw();
        let x = random_tensor(&mut rng, 1, geom.in_len(), 1.0);
        let w = random_tensor(&mut rng, 3, 2 * 9, 1.0);
        let y = random_tensor(&mut rng, 1, 3 * oh * ow, 1.0);
        let cx = conv2d_forward(&x, &w, &Tensor::zeros(1, 3), &geom);
        let tgeom = ConvGeom {
            in_channels: 3,
            in_h: oh,
            in_w: ow,
            out_channels: 2,
            kernel: 3,
            stride: 2,
            padding: 1,
            output_padding: 0,
        };
        // conv weight (Cout, Cin·k·k) is exactly the transposed-conv layout (Cin', Cout'·k·k).
        let ty = conv_transpose2d_forward(&y, &w, &Tensor::zeros(1, 2), &tgeom);
        let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(ty.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn detached_values_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.param(Tensor::scalar(2.0));
        let d = g.detach(a);
        let y = g.mul(a, d);
        let grads = g.backward(y);
        assert_eq!(grads.get(a).unwrap().item(), 2.0);
        assert!(grads.get(d).is_none());
    }

    #[test]
    fn log_sum_exp_is_shift_stable() {
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
    }
}
