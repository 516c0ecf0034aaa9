//! Reverse-mode differentiation over 2-D `f64` matrices.
//!
//! Every op records its inputs; `backward` walks the tape once in reverse.
//! Scalars are `1 x 1` matrices.

use ndarray::{Array2, Axis};

pub type Mat = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    /// Row-wise normalisation without affine terms; keeps `1/σ` per row.
    LayerNorm(Var, Vec<f64>),
    /// Softmax over the allowed entries of each row; other entries are exactly 0.
    MaskedSoftmax(Var),
    /// `out[k] = x[index[k]]` (or 0 for `None`), flat row-major indices.
    Gather(Var, Vec<Option<usize>>),
    ConcatCols(Vec<Var>),
    /// Mean binary cross-entropy on logits against a 0/1 target.
    BceWithLogits(Var, Vec<f64>),
    /// `1 - (2 Σ p t + 1) / (Σ p + Σ t + 1)` with `p = sigmoid(logits)`.
    Dice(Var, Vec<f64>),
    /// `-log softmax(logits)[target]` for a single row.
    CrossEntropy(Var, usize),
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Mat,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) * self.value(row);
        self.push(v, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a) * s;
        self.push(v, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in out.rows_mut() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
            inv_std.push(inv);
        }
        self.push(out, Op::LayerNorm(a, inv_std))
    }

    /// Row softmax restricted to `allowed`; every row needs at least one allowed entry.
    pub fn masked_softmax(&mut self, a: Var, allowed: &Array2<bool>) -> Var {
        let x = self.value(a);
        assert_eq!(x.dim(), allowed.dim(), "softmax mask shape");
        let mut out = Mat::zeros(x.dim());
        for ((xr, ar), mut or) in x.rows().into_iter().zip(allowed.rows()).zip(out.rows_mut()) {
            assert!(ar.iter().any(|&ok| ok), "softmax row without allowed entries");
            let max = xr
                .iter()
                .zip(ar)
                .filter(|(_, &ok)| ok)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            // NaN logits are skipped by `max`; keep them so the loss becomes non-finite.
            let max = if max.is_finite() { max } else { f64::NAN };
            let mut sum = 0.0;
            for ((o, v), &ok) in or.iter_mut().zip(xr).zip(ar) {
                if ok {
                    *o = (v - max).exp();
                    sum += *o;
                }
            }
            or.mapv_inplace(|o| o / sum);
        }
        self.push(out, Op::MaskedSoftmax(a))
    }

    pub fn gather(&mut self, a: Var, shape: (usize, usize), index: Vec<Option<usize>>) -> Var {
        assert_eq!(shape.0 * shape.1, index.len(), "gather index length");
        let src = self.value(a);
        let flat = src.as_slice().expect("standard layout");
        let data: Vec<f64> = index.iter().map(|i| i.map_or(0.0, |i| flat[i])).collect();
        let v = Mat::from_shape_vec(shape, data).expect("gather shape");
        self.push(v, Op::Gather(a, index))
    }

    /// Select rows of `a` in the given order.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let cols = self.value(a).ncols();
        let index = rows
            .iter()
            .flat_map(|&r| (0..cols).map(move |c| Some(r * cols + c)))
            .collect();
        self.gather(a, (rows.len(), cols), index)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat rows must match");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn bce_with_logits(&mut self, logits: Var, target: Vec<f64>) -> Var {
        let x = self.value(logits);
        assert_eq!(x.len(), target.len(), "bce target length");
        let n = target.len() as f64;
        let total: f64 = x
            .iter()
            .zip(&target)
            .map(|(&z, &t)| {
                let pos = if t > 0.0 { t * softplus(-z) } else { 0.0 };
                let neg = if t < 1.0 { (1.0 - t) * softplus(z) } else { 0.0 };
                pos + neg
            })
            .sum();
        self.push(Mat::from_elem((1, 1), total / n), Op::BceWithLogits(logits, target))
    }

    pub fn dice(&mut self, logits: Var, target: Vec<f64>) -> Var {
        let x = self.value(logits);
        assert_eq!(x.len(), target.len(), "dice target length");
        let (num, den) = dice_terms(x.iter().map(|&z| sigmoid(z)), &target);
        self.push(Mat::from_elem((1, 1), 1.0 - num / den), Op::Dice(logits, target))
    }

    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Var {
        let x = self.value(logits);
        assert_eq!(x.nrows(), 1, "cross entropy takes one row");
        let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let v = lse - x[[0, target]];
        self.push(Mat::from_elem((1, 1), v), Op::CrossEntropy(logits, target))
    }

    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let v: f64 = terms.iter().map(|(t, w)| w * self.scalar(*t)).sum();
        self.push(Mat::from_elem((1, 1), v), Op::WeightedSum(terms.to_vec()))
    }

    /// Gradients of the scalar `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Mat::ones(self.value(output).dim()));

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, g);
                }
                Op::MulRow(a, row) => {
                    let gr = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let ga = &g * self.value(*row);
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, ga);
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g * *s),
                Op::Relu(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(self.value(*a), |gv, &x| {
                        if x <= 0.0 {
                            *gv = 0.0
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm(a, inv_std) => {
                    let y = &node.value;
                    let mut ga = Mat::zeros(y.dim());
                    let n = y.ncols() as f64;
                    for (r, inv) in inv_std.iter().enumerate() {
                        let gy = g.row(r);
                        let yr = y.row(r);
                        let mean_g = gy.sum() / n;
                        let mean_gy = gy.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                        for c in 0..y.ncols() {
                            ga[[r, c]] = inv * (gy[c] - mean_g - yr[c] * mean_gy);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::MaskedSoftmax(a) => {
                    let y = &node.value;
                    let mut ga = Mat::zeros(y.dim());
                    for r in 0..y.nrows() {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                        for c in 0..y.ncols() {
                            ga[[r, c]] = y[[r, c]] * (g[[r, c]] - dot);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Gather(a, index) => {
                    let mut ga = Mat::zeros(self.value(*a).dim());
                    {
                        let flat = ga.as_slice_mut().expect("standard layout");
                        for (gv, idx) in g.iter().zip(index) {
                            if let Some(j) = idx {
                                flat[*j] += gv;
                            }
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        let slice = g.slice(ndarray::s![.., start..start + w]).to_owned();
                        acc(&mut grads, *p, slice);
                        start += w;
                    }
                }
                Op::BceWithLogits(a, target) => {
                    let x = self.value(*a);
                    let scale = g[[0, 0]] / target.len() as f64;
                    let mut ga = Mat::zeros(x.dim());
                    for ((gv, &z), &t) in ga.iter_mut().zip(x.iter()).zip(target) {
                        *gv = scale * (sigmoid(z) - t);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Dice(a, target) => {
                    let x = self.value(*a);
                    let probs: Vec<f64> = x.iter().map(|&z| sigmoid(z)).collect();
                    let (num, den) = dice_terms(probs.iter().copied(), target);
                    let mut ga = Mat::zeros(x.dim());
                    for ((gv, &p), &t) in ga.iter_mut().zip(&probs).zip(target) {
                        let dl_dp = -(2.0 * t * den - num) / (den * den);
                        *gv = g[[0, 0]] * dl_dp * p * (1.0 - p);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::CrossEntropy(a, target) => {
                    let x = self.value(*a);
                    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    let mut ga = Mat::zeros(x.dim());
                    for (c, e) in exps.iter().enumerate() {
                        let onehot = if c == *target { 1.0 } else { 0.0 };
                        ga[[0, c]] = g[[0, 0]] * (e / sum - onehot);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::WeightedSum(terms) => {
                    for (t, w) in terms {
                        acc(&mut grads, *t, Mat::from_elem((1, 1), g[[0, 0]] * w));
                    }
                }
            }
        }
        Gradients { grads }
    }
}

pub(crate) fn dice_terms(probs: impl Iterator<Item = f64>, target: &[f64]) -> (f64, f64) {
    let mut inter = 0.0;
    let mut psum = 0.0;
    for (p, &t) in probs.zip(target) {
        inter += p * t;
        psum += p;
    }
    let tsum: f64 = target.iter().sum();
    (2.0 * inter + 1.0, psum + tsum + 1.0)
}

pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }
}
