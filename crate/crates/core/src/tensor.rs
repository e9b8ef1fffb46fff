//! Minimal reverse-mode autodiff over `ndarray`, plus the handful of neural
//! layers the extractor and speaker encoder are built from.
//!
//! A [`Tape`] records one forward computation per training example; values
//! are computed eagerly and [`Tape::backward`] walks the record once in
//! reverse. Parameters live outside the tape in a [`ParamStore`]; importing a
//! parameter copies its current value onto the tape and tags the node so the
//! backward pass can collect per-parameter gradients. Everything is `f64`, so
//! the same code paths serve training and finite-difference verification.

use std::collections::HashMap;

use ndarray::{Array1, Array2, ArrayD, ArrayView2, Axis, Ix1, Ix2, IxDyn, Slice};
use rand::RngExt;
use rand_chacha::ChaCha8Rng;

use crate::dsp::{self, StftConfig};

pub type Arr = ArrayD<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Arr,
    pub trainable: bool,
}

/// Named parameter tensors in declaration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn declare(&mut self, name: &str, value: Arr) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "parameter {name} declared twice"
        );
        let id = self.entries.len();
        self.index.insert(name.to_string(), id);
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            trainable: true,
        });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Arr {
        &self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn set_value(&mut self, id: ParamId, value: Arr) {
        assert_eq!(
            self.entries[id.0].value.shape(),
            value.shape(),
            "shape change for parameter {}",
            self.entries[id.0].name
        );
        self.entries[id.0].value = value;
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    /// Mark every parameter whose name starts with `prefix` as frozen.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.trainable = false;
            }
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

/// Per-parameter gradient accumulator aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Gradients {
    pub by_param: Vec<Option<Arr>>,
}

impl Gradients {
    pub fn zeros(n_params: usize) -> Self {
        Self {
            by_param: vec![None; n_params],
        }
    }

    pub fn accumulate(&mut self, id: usize, g: &Arr) {
        match &mut self.by_param[id] {
            Some(acc) => *acc += g,
            slot => *slot = Some(g.clone()),
        }
    }

    pub fn add(&mut self, other: &Gradients) {
        for (i, g) in other.by_param.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(i, g);
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.by_param.iter_mut().flatten() {
            g.mapv_inplace(|x| x * factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.by_param
            .iter()
            .flatten()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Scale all gradients down so the global norm does not exceed `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.by_param
            .iter()
            .flatten()
            .all(|g| g.iter().all(|x| x.is_finite()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Powf(Var, f64),
    Ln(Var),
    Sigmoid(Var),
    Tanh(Var),
    AddRowVec(Var, Var),
    MulRowVec(Var, Var),
    MulColVec(Var, Var),
    ScaleByScalar(Var, Var),
    SoftmaxRows(Var),
    SumAll(Var),
    SumCols(Var),
    SumRows(Var),
    Transpose(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    TileRows(Var, usize),
    MeanGroupRows(Var, usize),
    Istft(Var, Var, StftConfig),
    /// One LSTM step: parents `(pre, h_prev, c_prev, w_hh, b)`, value
    /// `[h | c]`, aux = activated gates `[i f g o]`.
    LstmCell {
        pre: Var,
        h_prev: Var,
        c_prev: Var,
        w_hh: Var,
        b: Var,
        hidden: usize,
    },
}

struct Node {
    value: Arr,
    grad: Option<Arr>,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
    /// Saved activations for fused ops.
    aux: Option<Arr>,
}

/// One recorded forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn v2(a: &Arr) -> ArrayView2<'_, f64> {
    a.view()
        .into_dimensionality::<Ix2>()
        .expect("expected a 2-d tensor")
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

    pub fn value(&self, v: Var) -> &Arr {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let a = &self.nodes[v.0].value;
        assert_eq!(a.len(), 1, "expected a scalar node");
        *a.iter().next().unwrap()
    }

    pub fn value2(&self, v: Var) -> ArrayView2<'_, f64> {
        v2(&self.nodes[v.0].value)
    }

    fn push(&mut self, value: Arr, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            needs_grad,
            param: None,
            aux: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Arr) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant2(&mut self, value: Array2<f64>) -> Var {
        self.constant(value.into_dyn())
    }

    pub fn constant1(&mut self, value: Vec<f64>) -> Var {
        self.constant(Array1::from_vec(value).into_dyn())
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), value))
    }

    pub fn zeros2(&mut self, rows: usize, cols: usize) -> Var {
        self.constant(ArrayD::zeros(IxDyn(&[rows, cols])))
    }

    /// Import a parameter. Trainable parameters receive gradients; frozen
    /// ones enter as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let e = store.entry(id);
        let v = self.push(e.value.clone(), Op::Leaf, e.trainable);
        self.nodes[v.0].param = e.trainable.then_some(id);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = v2(&self.nodes[a.0].value)
            .dot(&v2(&self.nodes[b.0].value))
            .into_dyn();
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a, b), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Sub(a, b), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul(a, b), needs)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value / &self.nodes[b.0].value;
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Div(a, b), needs)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x * c);
        let needs = self.needs(a);
        self.push(value, Op::Scale(a, c), needs)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x + c);
        let needs = self.needs(a);
        self.push(value, Op::AddScalar(a), needs)
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x.powf(p));
        let needs = self.needs(a);
        self.push(value, Op::Powf(a, p), needs)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::ln);
        let needs = self.needs(a);
        self.push(value, Op::Ln(a), needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let needs = self.needs(a);
        self.push(value, Op::Sigmoid(a), needs)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::tanh);
        let needs = self.needs(a);
        self.push(value, Op::Tanh(a), needs)
    }

    /// `(r, c) + (1, c)` broadcast add.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let av = v2(&self.nodes[a.0].value);
        let bv = v2(&self.nodes[row.0].value);
        assert_eq!(bv.nrows(), 1);
        assert_eq!(av.ncols(), bv.ncols());
        let value = (&av + &bv.broadcast(av.raw_dim()).unwrap()).into_dyn();
        let needs = self.needs(a) || self.needs(row);
        self.push(value, Op::AddRowVec(a, row), needs)
    }

    /// `(r, c) * (1, c)` broadcast multiply.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let av = v2(&self.nodes[a.0].value);
        let bv = v2(&self.nodes[row.0].value);
        assert_eq!(bv.nrows(), 1);
        assert_eq!(av.ncols(), bv.ncols());
        let value = (&av * &bv.broadcast(av.raw_dim()).unwrap()).into_dyn();
        let needs = self.needs(a) || self.needs(row);
        self.push(value, Op::MulRowVec(a, row), needs)
    }

    /// `(r, c) * (r, 1)` broadcast multiply.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let av = v2(&self.nodes[a.0].value);
        let cv = v2(&self.nodes[col.0].value);
        assert_eq!(cv.ncols(), 1);
        assert_eq!(av.nrows(), cv.nrows());
        let value = (&av * &cv.broadcast(av.raw_dim()).unwrap()).into_dyn();
        let needs = self.needs(a) || self.needs(col);
        self.push(value, Op::MulColVec(a, col), needs)
    }

    /// Multiply a tensor by a scalar (0-d) variable.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar_value(s);
        let value = self.nodes[a.0].value.mapv(|x| x * sv);
        let needs = self.needs(a) || self.needs(s);
        self.push(value, Op::ScaleByScalar(a, s), needs)
    }

    /// Row-wise softmax of a 2-d tensor.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = v2(&self.nodes[a.0].value);
        let mut value = av.to_owned();
        for mut row in value.axis_iter_mut(Axis(0)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - max).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        let needs = self.needs(a);
        self.push(value.into_dyn(), Op::SoftmaxRows(a), needs)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = ArrayD::from_elem(IxDyn(&[]), self.nodes[a.0].value.sum());
        let needs = self.needs(a);
        self.push(value, Op::SumAll(a), needs)
    }

    /// `(r, c) -> (r, 1)` row sums.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let value = v2(&self.nodes[a.0].value)
            .sum_axis(Axis(1))
            .insert_axis(Axis(1))
            .into_dyn();
        let needs = self.needs(a);
        self.push(value, Op::SumCols(a), needs)
    }

    /// `(r, c) -> (1, c)` column sums.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let value = v2(&self.nodes[a.0].value)
            .sum_axis(Axis(0))
            .insert_axis(Axis(0))
            .into_dyn();
        let needs = self.needs(a);
        self.push(value, Op::SumRows(a), needs)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = v2(&self.nodes[a.0].value).t().to_owned().into_dyn();
        let needs = self.needs(a);
        self.push(value, Op::Transpose(a), needs)
    }

    /// Rows `[lo, hi)` along axis 0; works for 1-d and 2-d tensors.
    pub fn slice_rows(&mut self, a: Var, lo: usize, hi: usize) -> Var {
        let value = self.nodes[a.0]
            .value
            .slice_axis(Axis(0), Slice::from(lo..hi))
            .to_owned();
        let needs = self.needs(a);
        self.push(value, Op::SliceRows(a, lo), needs)
    }

    pub fn slice_cols(&mut self, a: Var, lo: usize, hi: usize) -> Var {
        let value = self.nodes[a.0]
            .value
            .slice_axis(Axis(1), Slice::from(lo..hi))
            .to_owned();
        let needs = self.needs(a);
        self.push(value, Op::SliceCols(a, lo), needs)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.nodes[v.0].value.view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows: shape mismatch");
        let needs = parts.iter().any(|v| self.needs(*v));
        self.push(value, Op::ConcatRows(parts.to_vec()), needs)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.nodes[v.0].value.view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: shape mismatch");
        let needs = parts.iter().any(|v| self.needs(*v));
        self.push(value, Op::ConcatCols(parts.to_vec()), needs)
    }

    /// Select rows by index (duplicates allowed); 2-d only.
    pub fn gather_rows(&mut self, a: Var, indices: Vec<usize>) -> Var {
        let av = v2(&self.nodes[a.0].value);
        let mut value = Array2::<f64>::zeros((indices.len(), av.ncols()));
        for (j, &i) in indices.iter().enumerate() {
            value.row_mut(j).assign(&av.row(i));
        }
        let needs = self.needs(a);
        self.push(value.into_dyn(), Op::GatherRows(a, indices), needs)
    }

    /// Stack `k` copies of the tensor along axis 0.
    pub fn tile_rows(&mut self, a: Var, k: usize) -> Var {
        let views: Vec<_> = (0..k).map(|_| self.nodes[a.0].value.view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("tile_rows");
        let needs = self.needs(a);
        self.push(value, Op::TileRows(a, k), needs)
    }

    /// `(k*r, c) -> (r, c)`: mean over `k` stacked blocks.
    pub fn mean_group_rows(&mut self, a: Var, k: usize) -> Var {
        let av = v2(&self.nodes[a.0].value);
        assert_eq!(av.nrows() % k, 0);
        let r = av.nrows() / k;
        let mut value = Array2::<f64>::zeros((r, av.ncols()));
        for block in 0..k {
            value += &av.slice(ndarray::s![block * r..(block + 1) * r, ..]);
        }
        value.mapv_inplace(|x| x / k as f64);
        let needs = self.needs(a);
        self.push(value.into_dyn(), Op::MeanGroupRows(a, k), needs)
    }

    /// One fused LSTM step. `pre` is the input projection `x_t w_ih`
    /// (`rows x 4H`); the result holds `[h_t | c_t]` (`rows x 2H`).
    /// Gate order is `[input, forget, cell, output]`.
    pub fn lstm_cell(
        &mut self,
        pre: Var,
        h_prev: Var,
        c_prev: Var,
        w_hh: Var,
        b: Var,
        hidden: usize,
    ) -> Var {
        let h = hidden;
        let gates_lin = {
            let hv = v2(&self.nodes[h_prev.0].value);
            let wv = v2(&self.nodes[w_hh.0].value);
            let pv = v2(&self.nodes[pre.0].value);
            let bv = v2(&self.nodes[b.0].value);
            let mut g = hv.dot(&wv);
            g += &pv;
            g += &bv.broadcast(g.raw_dim()).unwrap();
            g
        };
        let rows = gates_lin.nrows();
        let mut acts = gates_lin;
        {
            let a = acts.as_slice_mut().expect("contiguous gates");
            for r in 0..rows {
                let row = &mut a[r * 4 * h..(r + 1) * 4 * h];
                for (k, x) in row.iter_mut().enumerate() {
                    *x = if k < 2 * h || k >= 3 * h {
                        1.0 / (1.0 + (-*x).exp()) // input, forget, output
                    } else {
                        x.tanh() // cell candidate
                    };
                }
            }
        }
        let c_prev_arr = self.nodes[c_prev.0].value.clone();
        let cv = c_prev_arr.as_slice().expect("contiguous cell state");
        let mut out = Array2::<f64>::zeros((rows, 2 * h));
        {
            let a = acts.as_slice().unwrap();
            let o = out.as_slice_mut().unwrap();
            for r in 0..rows {
                let gates = &a[r * 4 * h..(r + 1) * 4 * h];
                let out_row = &mut o[r * 2 * h..(r + 1) * 2 * h];
                let c_row = &cv[r * h..(r + 1) * h];
                for k in 0..h {
                    let c_t = gates[h + k] * c_row[k] + gates[k] * gates[2 * h + k];
                    out_row[k] = gates[3 * h + k] * c_t.tanh();
                    out_row[h + k] = c_t;
                }
            }
        }
        let needs = self.needs(pre)
            || self.needs(h_prev)
            || self.needs(c_prev)
            || self.needs(w_hh)
            || self.needs(b);
        let var = self.push(
            out.into_dyn(),
            Op::LstmCell {
                pre,
                h_prev,
                c_prev,
                w_hh,
                b,
                hidden,
            },
            needs,
        );
        self.nodes[var.0].aux = Some(acts.into_dyn());
        var
    }

    /// Synthesis of a waveform from `(T, F)` real/imaginary mask-applied
    /// spectrogram halves.
    pub fn istft(&mut self, re: Var, im: Var, cfg: StftConfig) -> Var {
        let value = dsp::istft_tf(
            v2(&self.nodes[re.0].value),
            v2(&self.nodes[im.0].value),
            &cfg,
        );
        let needs = self.needs(re) || self.needs(im);
        self.push(
            Array1::from_vec(value).into_dyn(),
            Op::Istft(re, im, cfg),
            needs,
        )
    }

    /// Run the backward pass from a scalar `loss` and collect parameter
    /// gradients for a store of `n_params` entries.
    pub fn backward(&mut self, loss: Var, n_params: usize) -> Gradients {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "loss must be scalar");
        let mut grads = Gradients::zeros(n_params);
        if !self.nodes[loss.0].needs_grad {
            return grads;
        }
        let seed = ArrayD::from_elem(self.nodes[loss.0].value.raw_dim(), 1.0);
        self.nodes[loss.0].grad = Some(seed);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            if let Some(ParamId(pid)) = self.nodes[i].param {
                grads.accumulate(pid, &g);
            }
            self.propagate(i, &g);
        }
        grads
    }

    fn add_grad(&mut self, v: Var, g: Arr) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.nodes[v.0].grad {
            Some(acc) => *acc += &g,
            slot => *slot = Some(g),
        }
    }

    /// Accumulate into a sub-range of the parent's gradient without
    /// materializing a parent-sized array per contribution.
    fn add_grad_slice(&mut self, v: Var, axis: Axis, lo: usize, g: &Arr) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let node = &mut self.nodes[v.0];
        let acc = node
            .grad
            .get_or_insert_with(|| ArrayD::zeros(node.value.raw_dim()));
        let hi = lo + g.shape()[axis.0];
        let mut view = acc.slice_axis_mut(axis, Slice::from(lo..hi));
        view += g;
    }

    fn propagate(&mut self, i: usize, g: &Arr) {
        // Ops are listed with the same parent order used at construction.
        // Contributions are materialized first, then accumulated, so value
        // reads never alias grad writes.
        enum Contrib {
            One(Var, Arr),
            Two(Var, Arr, Var, Arr),
            Many(Vec<(Var, Arr)>),
            None,
        }
        // Slice backward writes into the parent's gradient range directly.
        match &self.nodes[i].op {
            Op::SliceRows(a, lo) => {
                let (a, lo) = (*a, *lo);
                self.add_grad_slice(a, Axis(0), lo, g);
                return;
            }
            Op::SliceCols(a, lo) => {
                let (a, lo) = (*a, *lo);
                self.add_grad_slice(a, Axis(1), lo, g);
                return;
            }
            _ => {}
        }
        let contrib = match &self.nodes[i].op {
            Op::Leaf => Contrib::None,
            Op::MatMul(a, b) => {
                let gv = v2(g);
                let av = v2(&self.nodes[a.0].value);
                let bv = v2(&self.nodes[b.0].value);
                let ga = gv.dot(&bv.t()).into_dyn();
                let gb = av.t().dot(&gv).into_dyn();
                Contrib::Two(*a, ga, *b, gb)
            }
            Op::Add(a, b) => Contrib::Two(*a, g.clone(), *b, g.clone()),
            Op::Sub(a, b) => Contrib::Two(*a, g.clone(), *b, g.mapv(|x| -x)),
            Op::Mul(a, b) => {
                let ga = g * &self.nodes[b.0].value;
                let gb = g * &self.nodes[a.0].value;
                Contrib::Two(*a, ga, *b, gb)
            }
            Op::Div(a, b) => {
                let bv = &self.nodes[b.0].value;
                let y = &self.nodes[i].value;
                let ga = g / bv;
                let gb = -(g * y / bv);
                Contrib::Two(*a, ga, *b, gb)
            }
            Op::Scale(a, c) => Contrib::One(*a, g.mapv(|x| x * c)),
            Op::AddScalar(a) => Contrib::One(*a, g.clone()),
            Op::Powf(a, p) => {
                let av = &self.nodes[a.0].value;
                let d = av.mapv(|x| p * x.powf(p - 1.0));
                Contrib::One(*a, g * &d)
            }
            Op::Ln(a) => Contrib::One(*a, g / &self.nodes[a.0].value),
            Op::Sigmoid(a) => {
                let y = &self.nodes[i].value;
                Contrib::One(*a, g * &y.mapv(|v| v * (1.0 - v)))
            }
            Op::Tanh(a) => {
                let y = &self.nodes[i].value;
                Contrib::One(*a, g * &y.mapv(|v| 1.0 - v * v))
            }
            Op::AddRowVec(a, b) => {
                let gb = v2(g).sum_axis(Axis(0)).insert_axis(Axis(0)).into_dyn();
                Contrib::Two(*a, g.clone(), *b, gb)
            }
            Op::MulRowVec(a, b) => {
                let gv = v2(g);
                let av = v2(&self.nodes[a.0].value);
                let bv = v2(&self.nodes[b.0].value);
                let ga = (&gv * &bv.broadcast(gv.raw_dim()).unwrap()).into_dyn();
                let gb = (&gv * &av)
                    .sum_axis(Axis(0))
                    .insert_axis(Axis(0))
                    .into_dyn();
                Contrib::Two(*a, ga, *b, gb)
            }
            Op::MulColVec(a, c) => {
                let gv = v2(g);
                let av = v2(&self.nodes[a.0].value);
                let cv = v2(&self.nodes[c.0].value);
                let ga = (&gv * &cv.broadcast(gv.raw_dim()).unwrap()).into_dyn();
                let gc = (&gv * &av)
                    .sum_axis(Axis(1))
                    .insert_axis(Axis(1))
                    .into_dyn();
                Contrib::Two(*a, ga, *c, gc)
            }
            Op::ScaleByScalar(a, s) => {
                let sv = *self.nodes[s.0].value.iter().next().unwrap();
                let ga = g.mapv(|x| x * sv);
                let gs = ArrayD::from_elem(IxDyn(&[]), (g * &self.nodes[a.0].value).sum());
                Contrib::Two(*a, ga, *s, gs)
            }
            Op::SoftmaxRows(a) => {
                let y = v2(&self.nodes[i].value);
                let gv = v2(g);
                let mut ga = Array2::<f64>::zeros(y.raw_dim());
                for r in 0..y.nrows() {
                    let dot: f64 = y.row(r).iter().zip(gv.row(r)).map(|(a, b)| a * b).sum();
                    for c in 0..y.ncols() {
                        ga[[r, c]] = y[[r, c]] * (gv[[r, c]] - dot);
                    }
                }
                Contrib::One(*a, ga.into_dyn())
            }
            Op::SumAll(a) => {
                let gs = *g.iter().next().unwrap();
                let ga = ArrayD::from_elem(self.nodes[a.0].value.raw_dim(), gs);
                Contrib::One(*a, ga)
            }
            Op::SumCols(a) => {
                let av = &self.nodes[a.0].value;
                let gv = v2(g);
                let ga = gv
                    .broadcast(v2(av).raw_dim())
                    .unwrap()
                    .to_owned()
                    .into_dyn();
                Contrib::One(*a, ga)
            }
            Op::SumRows(a) => {
                let av = &self.nodes[a.0].value;
                let gv = v2(g);
                let ga = gv
                    .broadcast(v2(av).raw_dim())
                    .unwrap()
                    .to_owned()
                    .into_dyn();
                Contrib::One(*a, ga)
            }
            Op::Transpose(a) => Contrib::One(*a, v2(g).t().to_owned().into_dyn()),
            Op::SliceRows(..) | Op::SliceCols(..) => unreachable!("handled above"),
            Op::ConcatRows(parts) => {
                let mut out = Vec::with_capacity(parts.len());
                let mut offset = 0;
                for p in parts {
                    let rows = self.nodes[p.0].value.shape()[0];
                    let gp = g
                        .slice_axis(Axis(0), Slice::from(offset..offset + rows))
                        .to_owned();
                    out.push((*p, gp));
                    offset += rows;
                }
                Contrib::Many(out)
            }
            Op::ConcatCols(parts) => {
                let mut out = Vec::with_capacity(parts.len());
                let mut offset = 0;
                for p in parts {
                    let cols = self.nodes[p.0].value.shape()[1];
                    let gp = g
                        .slice_axis(Axis(1), Slice::from(offset..offset + cols))
                        .to_owned();
                    out.push((*p, gp));
                    offset += cols;
                }
                Contrib::Many(out)
            }
            Op::GatherRows(a, indices) => {
                let gv = v2(g);
                let mut ga = Array2::<f64>::zeros(v2(&self.nodes[a.0].value).raw_dim());
                for (j, &idx) in indices.iter().enumerate() {
                    let mut row = ga.row_mut(idx);
                    row += &gv.row(j);
                }
                Contrib::One(*a, ga.into_dyn())
            }
            Op::TileRows(a, k) => {
                let rows = self.nodes[a.0].value.shape()[0];
                let mut ga = ArrayD::zeros(self.nodes[a.0].value.raw_dim());
                for block in 0..*k {
                    ga += &g.slice_axis(Axis(0), Slice::from(block * rows..(block + 1) * rows));
                }
                Contrib::One(*a, ga)
            }
            Op::MeanGroupRows(a, k) => {
                let rows = g.shape()[0];
                let mut ga = ArrayD::zeros(self.nodes[a.0].value.raw_dim());
                let scaled = g.mapv(|x| x / *k as f64);
                for block in 0..*k {
                    ga.slice_axis_mut(Axis(0), Slice::from(block * rows..(block + 1) * rows))
                        .assign(&scaled);
                }
                Contrib::One(*a, ga)
            }
            Op::Istft(re, im, cfg) => {
                let t_frames = self.nodes[re.0].value.shape()[0];
                let g1 = g
                    .view()
                    .into_dimensionality::<Ix1>()
                    .expect("istft grad is 1-d");
                let (gre, gim) =
                    dsp::istft_tf_adjoint(g1.as_slice().expect("contiguous"), t_frames, cfg);
                Contrib::Two(*re, gre.into_dyn(), *im, gim.into_dyn())
            }
            Op::LstmCell {
                pre,
                h_prev,
                c_prev,
                w_hh,
                b,
                hidden,
            } => {
                let h = *hidden;
                let acts_arr = self.nodes[i].aux.as_ref().expect("lstm activations");
                let acts = acts_arr.as_slice().expect("contiguous");
                let out = self.nodes[i].value.as_slice().expect("contiguous");
                let gv = g.as_slice().expect("contiguous");
                let rows = self.nodes[i].value.shape()[0];
                let cv = self.nodes[c_prev.0].value.as_slice().expect("contiguous");
                let mut d_gates = Array2::<f64>::zeros((rows, 4 * h));
                let mut g_c_prev = Array2::<f64>::zeros((rows, h));
                {
                    let dg = d_gates.as_slice_mut().unwrap();
                    let gc = g_c_prev.as_slice_mut().unwrap();
                    for r in 0..rows {
                        let gates = &acts[r * 4 * h..(r + 1) * 4 * h];
                        let out_row = &out[r * 2 * h..(r + 1) * 2 * h];
                        let g_row = &gv[r * 2 * h..(r + 1) * 2 * h];
                        let c_row = &cv[r * h..(r + 1) * h];
                        let dg_row = &mut dg[r * 4 * h..(r + 1) * 4 * h];
                        let gc_row = &mut gc[r * h..(r + 1) * h];
                        for k in 0..h {
                            let i_g = gates[k];
                            let f_g = gates[h + k];
                            let g_g = gates[2 * h + k];
                            let o_g = gates[3 * h + k];
                            let tanh_c = out_row[h + k].tanh();
                            let g_h = g_row[k];
                            let g_c = g_row[h + k] + g_h * o_g * (1.0 - tanh_c * tanh_c);
                            dg_row[k] = g_c * g_g * i_g * (1.0 - i_g);
                            dg_row[h + k] = g_c * c_row[k] * f_g * (1.0 - f_g);
                            dg_row[2 * h + k] = g_c * i_g * (1.0 - g_g * g_g);
                            dg_row[3 * h + k] = g_h * tanh_c * o_g * (1.0 - o_g);
                            gc_row[k] = g_c * f_g;
                        }
                    }
                }
                let hv = v2(&self.nodes[h_prev.0].value);
                let wv = v2(&self.nodes[w_hh.0].value);
                let g_w_hh = hv.t().dot(&d_gates).into_dyn();
                let g_h_prev = d_gates.dot(&wv.t()).into_dyn();
                let g_b = d_gates
                    .sum_axis(Axis(0))
                    .insert_axis(Axis(0))
                    .into_dyn();
                Contrib::Many(vec![
                    (*pre, d_gates.into_dyn()),
                    (*h_prev, g_h_prev),
                    (*c_prev, g_c_prev.into_dyn()),
                    (*w_hh, g_w_hh),
                    (*b, g_b),
                ])
            }
        };
        match contrib {
            Contrib::None => {}
            Contrib::One(a, ga) => self.add_grad(a, ga),
            Contrib::Two(a, ga, b, gb) => {
                self.add_grad(a, ga);
                self.add_grad(b, gb);
            }
            Contrib::Many(list) => {
                for (p, gp) in list {
                    self.add_grad(p, gp);
                }
            }
        }
    }
}

/// Layer declarations and tape application for the few layer kinds in use.
pub mod nn {
    use super::*;

    pub fn xavier_uniform(
        rng: &mut ChaCha8Rng,
        rows: usize,
        cols: usize,
        fan_in: usize,
        fan_out: usize,
    ) -> Arr {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-limit..limit)).into_dyn()
    }

    #[derive(Debug, Clone, Copy)]
    pub enum BiasInit {
        Zero,
        Const(f64),
    }

    /// Affine map `x (r, d_in) -> x w + b`.
    #[derive(Debug, Clone)]
    pub struct Linear {
        pub w: ParamId,
        pub b: Option<ParamId>,
    }

    impl Linear {
        pub fn declare(
            store: &mut ParamStore,
            rng: &mut ChaCha8Rng,
            name: &str,
            d_in: usize,
            d_out: usize,
            bias: Option<BiasInit>,
        ) -> Self {
            let w = store.declare(
                &format!("{name}.w"),
                xavier_uniform(rng, d_in, d_out, d_in, d_out),
            );
            let b = bias.map(|init| {
                let v = match init {
                    BiasInit::Zero => 0.0,
                    BiasInit::Const(c) => c,
                };
                store.declare(
                    &format!("{name}.b"),
                    ArrayD::from_elem(IxDyn(&[1, d_out]), v),
                )
            });
            Self { w, b }
        }

        /// Declare with explicit weight values (used by tests).
        pub fn declare_with(
            store: &mut ParamStore,
            name: &str,
            w: Array2<f64>,
            b: Option<Array1<f64>>,
        ) -> Self {
            let w = store.declare(&format!("{name}.w"), w.into_dyn());
            let b = b.map(|v| {
                store.declare(
                    &format!("{name}.b"),
                    v.insert_axis(Axis(0)).into_dyn(),
                )
            });
            Self { w, b }
        }

        pub fn import(&self, tape: &mut Tape, store: &ParamStore) -> LinearVars {
            LinearVars {
                w: tape.param(store, self.w),
                b: self.b.map(|b| tape.param(store, b)),
            }
        }
    }

    #[derive(Debug, Clone, Copy)]
    pub struct LinearVars {
        pub w: Var,
        pub b: Option<Var>,
    }

    impl LinearVars {
        pub fn apply(&self, tape: &mut Tape, x: Var) -> Var {
            let y = tape.matmul(x, self.w);
            match self.b {
                Some(b) => tape.add_row(y, b),
                None => y,
            }
        }
    }

    /// LSTM cell parameters; gate order `[input, forget, cell, output]`.
    /// The forget gate bias starts at 1.
    #[derive(Debug, Clone)]
    pub struct Lstm {
        pub w_ih: ParamId,
        pub w_hh: ParamId,
        pub b: ParamId,
        pub hidden: usize,
    }

    impl Lstm {
        pub fn declare(
            store: &mut ParamStore,
            rng: &mut ChaCha8Rng,
            name: &str,
            d_in: usize,
            hidden: usize,
        ) -> Self {
            let w_ih = store.declare(
                &format!("{name}.w_ih"),
                xavier_uniform(rng, d_in, 4 * hidden, d_in, hidden),
            );
            let w_hh = store.declare(
                &format!("{name}.w_hh"),
                xavier_uniform(rng, hidden, 4 * hidden, hidden, hidden),
            );
            let mut b = Array2::<f64>::zeros((1, 4 * hidden));
            b.slice_mut(ndarray::s![0, hidden..2 * hidden]).fill(1.0);
            let b = store.declare(&format!("{name}.b"), b.into_dyn());
            Self {
                w_ih,
                w_hh,
                b,
                hidden,
            }
        }

        pub fn import(&self, tape: &mut Tape, store: &ParamStore) -> LstmVars {
            LstmVars {
                w_ih: tape.param(store, self.w_ih),
                w_hh: tape.param(store, self.w_hh),
                b: tape.param(store, self.b),
                hidden: self.hidden,
            }
        }
    }

    #[derive(Debug, Clone, Copy)]
    pub struct LstmVars {
        pub w_ih: Var,
        pub w_hh: Var,
        pub b: Var,
        pub hidden: usize,
    }

    impl LstmVars {
        /// Run the recurrence over pre-activated step inputs
        /// (`pre[t] = x_t w_ih`, shape `(rows, 4H)`). Returns hidden states
        /// in sequence order; `reverse` runs the recurrence back-to-front.
        pub fn run(&self, tape: &mut Tape, pre: &[Var], reverse: bool) -> Vec<Var> {
            let h = self.hidden;
            let rows = tape.value(pre[0]).shape()[0];
            let mut h_t = tape.zeros2(rows, h);
            let mut c_t = tape.zeros2(rows, h);
            let mut out = vec![h_t; pre.len()];
            let order: Vec<usize> = if reverse {
                (0..pre.len()).rev().collect()
            } else {
                (0..pre.len()).collect()
            };
            for t in order {
                let hc = tape.lstm_cell(pre[t], h_t, c_t, self.w_hh, self.b, h);
                h_t = tape.slice_cols(hc, 0, h);
                c_t = tape.slice_cols(hc, h, 2 * h);
                out[t] = h_t;
            }
            out
        }
    }

    /// RMS normalization over the feature (column) axis with a learnable
    /// per-feature gain. `eps` makes the map defined at zero; doubling the
    /// input changes the output by at most O(eps).
    pub const RMS_EPS: f64 = 1e-12;

    #[derive(Debug, Clone)]
    pub struct RmsNorm {
        pub gain: ParamId,
        pub dim: usize,
    }

    impl RmsNorm {
        pub fn declare(store: &mut ParamStore, name: &str, dim: usize) -> Self {
            let gain = store.declare(
                &format!("{name}.gain"),
                ArrayD::from_elem(IxDyn(&[1, dim]), 1.0),
            );
            Self { gain, dim }
        }

        pub fn import(&self, tape: &mut Tape, store: &ParamStore) -> RmsNormVars {
            RmsNormVars {
                gain: tape.param(store, self.gain),
                dim: self.dim,
            }
        }
    }

    #[derive(Debug, Clone, Copy)]
    pub struct RmsNormVars {
        pub gain: Var,
        pub dim: usize,
    }

    impl RmsNormVars {
        pub fn apply(&self, tape: &mut Tape, x: Var) -> Var {
            let sq = tape.mul(x, x);
            let ms = tape.sum_cols(sq);
            let ms = tape.scale(ms, 1.0 / self.dim as f64);
            let ms = tape.add_scalar(ms, RMS_EPS);
            let inv = tape.powf(ms, -0.5);
            let normed = tape.mul_col(x, inv);
            tape.mul_row(normed, self.gain)
        }
    }
}
