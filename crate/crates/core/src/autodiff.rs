//! Tape-based reverse-mode differentiation over a small operator vocabulary
//! on dense matrices. Column vectors are `n×1`; batches are stored with one
//! sample per column.
//!
//! Non-smooth operators use straight-through surrogates: quantizers pass
//! gradients inside the clip range, straight-through one-hots route the
//! gradient to their soft distribution. Quantizers and masks can be
//! evaluated in a *frozen* mode that replays recorded rounding decisions and
//! ordering, which turns the straight-through rules into exact derivatives
//! of a smooth surrogate.

use crate::error::{Error, Result};
use crate::linalg::{svd_full, Matrix};
use crate::network::Activation;
use crate::quant::{calibrate_scale, grid_max, CalibrationRequest, ClipMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub usize);

/// Rounding decisions of one fake-quant evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantRecord {
    /// Effective scale `s = s₀·e^θ` at recording time.
    pub scale: f64,
    pub theta: f64,
    pub input: Vec<f64>,
    /// Clamped integer codes, stored as floats.
    pub codes: Vec<f64>,
    pub in_range: Vec<bool>,
}

/// Which scores define a soft-mask threshold, with their weights.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskRecord {
    pub threshold: Vec<(usize, f64)>,
    pub offset: f64,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    TMatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    AddCol(Var, Var),
    ScaleRows(Var, Var),
    ScaleCols(Var, Var),
    MulConst(Var, f64),
    MulScalar(Var, Var),
    AddConst(Var),
    Act(Var, Activation),
    Sigmoid(Var),
    Sum(Var),
    ConcatRows(Var, Var),
    SliceRows(Var, usize),
    Softmax(Var),
    CrossEntropy(Var, Vec<usize>),
    Kl(Var, Var),
    FakeQuant { input: Var, theta: Var, rec: QuantRecord },
    SoftMask { scores: Var, tau: f64, rec: MaskRecord },
    SpectralNorm { input: Var, u: Vec<f64>, v: Vec<f64> },
    StraightThrough(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of `v`; zeros when the root does not depend on it.
    pub fn of(&self, v: Var) -> Matrix {
        self.grads[v.0].clone().unwrap_or_else(|| {
            let (r, c) = self.shapes[v.0];
            Matrix::zeros(r, c)
        })
    }
}

fn softmax_col(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn log_softmax_col(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

fn columns(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.cols()).map(|j| m.col(j)).collect()
}

fn from_cols(rows: usize, cols: Vec<Vec<f64>>) -> Matrix {
    Matrix::from_columns(rows, &cols)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Threshold between the `k`-th and `(k+1)`-th largest scores as a
/// weighted sum of scores plus an offset.
pub fn mask_record(scores: &[f64], k: usize) -> MaskRecord {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let n = scores.len();
    if k == 0 {
        MaskRecord { threshold: vec![(order[0], 1.0)], offset: 1.0 }
    } else if k >= n {
        MaskRecord { threshold: vec![(order[n - 1], 1.0)], offset: -1.0 }
    } else {
        MaskRecord { threshold: vec![(order[k - 1], 0.5), (order[k], 0.5)], offset: 0.0 }
    }
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

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.get(0, 0)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf)
    }

    /// An input whose gradient is never needed.
    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `aᵀ b`.
    pub fn t_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).t_matmul(self.value(b))?;
        Ok(self.push(v, Op::TMatMul(a, b)))
    }

    /// `a bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push(v, Op::MatMulT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(v, Op::Hadamard(a, b)))
    }

    /// Adds the column vector `b` (`n×1`) to every column of `a`.
    pub fn add_col(&mut self, a: Var, b: Var) -> Result<Var> {
        let (am, bm) = (self.value(a), self.value(b));
        if bm.cols() != 1 || bm.rows() != am.rows() {
            return Err(Error::dims("add_col expects an n×1 vector"));
        }
        let v = Matrix::from_fn(am.rows(), am.cols(), |i, j| am.get(i, j) + bm.get(i, 0));
        Ok(self.push(v, Op::AddCol(a, b)))
    }

    /// `diag(d) a` with `d` an `n×1` vector.
    pub fn scale_rows(&mut self, a: Var, d: Var) -> Result<Var> {
        let (am, dm) = (self.value(a), self.value(d));
        if dm.cols() != 1 || dm.rows() != am.rows() {
            return Err(Error::dims("scale_rows expects an n×1 vector"));
        }
        let v = Matrix::from_fn(am.rows(), am.cols(), |i, j| am.get(i, j) * dm.get(i, 0));
        Ok(self.push(v, Op::ScaleRows(a, d)))
    }

    /// `a diag(d)` with `d` a `k×1` vector.
    pub fn scale_cols(&mut self, a: Var, d: Var) -> Result<Var> {
        let (am, dm) = (self.value(a), self.value(d));
        if dm.cols() != 1 || dm.rows() != am.cols() {
            return Err(Error::dims("scale_cols expects a k×1 vector"));
        }
        let v = am.scale_columns(dm.data());
        Ok(self.push(v, Op::ScaleCols(a, d)))
    }

    pub fn mul_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scale(c);
        self.push(v, Op::MulConst(a, c))
    }

    /// `a · s` for a `1×1` variable `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).shape() != (1, 1) {
            return Err(Error::dims("mul_scalar expects a 1×1 scale"));
        }
        let c = self.scalar(s);
        let v = self.value(a).scale(c);
        Ok(self.push(v, Op::MulScalar(a, s)))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddConst(a))
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Var {
        let v = self.value(a).map(|x| act.apply(x));
        self.push(v, Op::Act(a, act))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Relu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Matrix::scalar(s), Op::Sum(a))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (am, bm) = (self.value(a), self.value(b));
        if am.cols() != bm.cols() {
            return Err(Error::dims("concat_rows column mismatch"));
        }
        let mut data = am.data().to_vec();
        data.extend_from_slice(bm.data());
        let v = Matrix::new(am.rows() + bm.rows(), am.cols(), data)?;
        Ok(self.push(v, Op::ConcatRows(a, b)))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let am = self.value(a);
        if start + len > am.rows() {
            return Err(Error::dims("slice_rows out of range"));
        }
        let v = Matrix::from_fn(len, am.cols(), |i, j| am.get(start + i, j));
        Ok(self.push(v, Op::SliceRows(a, start)))
    }

    /// Column-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let am = self.value(a);
        let v = from_cols(am.rows(), columns(am).iter().map(|c| softmax_col(c)).collect());
        self.push(v, Op::Softmax(a))
    }

    /// Mean cross-entropy of column logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        if labels.len() != z.cols() || labels.iter().any(|&y| y >= z.rows()) {
            return Err(Error::dims("labels do not match logits"));
        }
        let loss = columns(z)
            .iter()
            .zip(labels)
            .map(|(c, &y)| -log_softmax_col(c)[y])
            .sum::<f64>()
            / labels.len() as f64;
        Ok(self.push(Matrix::scalar(loss), Op::CrossEntropy(logits, labels.to_vec())))
    }

    /// Mean over columns of `KL(softmax(teacher) ‖ softmax(student))`,
    /// differentiable in both arguments.
    pub fn kl(&mut self, teacher: Var, student: Var) -> Result<Var> {
        let (zt, zs) = (self.value(teacher), self.value(student));
        if zt.shape() != zs.shape() {
            return Err(Error::dims("kl logits shape"));
        }
        let mut total = 0.0;
        for (tc, sc) in columns(zt).iter().zip(columns(zs)) {
            let (lp, lq) = (log_softmax_col(tc), log_softmax_col(&sc));
            total += lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum::<f64>();
        }
        let v = Matrix::scalar(total / zs.cols().max(1) as f64);
        Ok(self.push(v, Op::Kl(teacher, student)))
    }

    /// Fake quantization `s·clip(⌊T/s⌉)` with `s = s₀·e^θ`, `s₀` the
    /// calibrated per-tensor scale of `T` (treated as a constant).
    ///
    /// With `frozen`, replays the recorded codes: in range the value is
    /// `s·c̄ − s·T̄/s̄ + T`, saturated entries stay at `s̄·c̄`.
    pub fn fake_quant(
        &mut self,
        input: Var,
        theta: Var,
        bits: u8,
        clip: ClipMode,
        frozen: Option<&QuantRecord>,
    ) -> Result<(Var, QuantRecord)> {
        let t = self.value(input).clone();
        let th = self.scalar(theta);
        let (value, rec) = match frozen {
            None => {
                let req = CalibrationRequest { clip, ..CalibrationRequest::per_tensor(bits) };
                let s0 = calibrate_scale(&(t.data().to_vec(), vec![t.data().len()]), req)?.scales[0];
                let s = s0 * th.exp();
                let qmax = grid_max(bits) as f64;
                let mut codes = Vec::with_capacity(t.data().len());
                let mut in_range = Vec::with_capacity(t.data().len());
                for &x in t.data() {
                    let u = x / s;
                    codes.push(u.round_ties_even().clamp(-qmax, qmax));
                    in_range.push(u.abs() <= qmax);
                }
                let v = Matrix::new(t.rows(), t.cols(), codes.iter().map(|c| c * s).collect())?;
                (v, QuantRecord { scale: s, theta: th, input: t.data().to_vec(), codes, in_range })
            }
            Some(r) => {
                if r.input.len() != t.data().len() {
                    return Err(Error::dims("frozen quant record length"));
                }
                let s = r.scale * (th - r.theta).exp();
                let vals = t
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| {
                        if r.in_range[i] {
                            s * r.codes[i] - s * r.input[i] / r.scale + x
                        } else {
                            r.scale * r.codes[i]
                        }
                    })
                    .collect();
                (Matrix::new(t.rows(), t.cols(), vals)?, r.clone())
            }
        };
        let var = self.push(value, Op::FakeQuant { input, theta, rec: rec.clone() });
        Ok((var, rec))
    }

    /// Relaxed top-`k` mask `σ((g_i − t)/τ)` over scores `g` (`n×1`). The
    /// threshold `t` follows [`mask_record`], or the frozen record if given.
    pub fn soft_mask(&mut self, scores: Var, k: usize, tau: f64, frozen: Option<&MaskRecord>) -> Result<(Var, MaskRecord)> {
        if !(tau > 0.0) {
            return Err(Error::invalid("mask temperature must be positive"));
        }
        let g = self.value(scores).data().to_vec();
        if g.is_empty() {
            return Err(Error::dims("empty mask scores"));
        }
        let rec = frozen.cloned().unwrap_or_else(|| mask_record(&g, k));
        let t = rec.threshold.iter().map(|&(i, w)| w * g[i]).sum::<f64>() + rec.offset;
        let v = Matrix::column_vector(&g.iter().map(|gi| sigmoid((gi - t) / tau)).collect::<Vec<_>>());
        let var = self.push(v, Op::SoftMask { scores, tau, rec: rec.clone() });
        Ok((var, rec))
    }

    /// Largest singular value, with gradient `u₁v₁ᵀ`.
    pub fn spectral_norm(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a);
        let (value, u, v) = if m.max_abs() == 0.0 {
            (0.0, vec![0.0; m.rows()], vec![0.0; m.cols()])
        } else {
            let f = svd_full(m, 1)?;
            (f.sigma[0], f.u.col(0), f.v.col(0))
        };
        Ok(self.push(Matrix::scalar(value), Op::SpectralNorm { input: a, u, v }))
    }

    /// Forward value `hard`, gradient routed to `soft` unchanged.
    pub fn straight_through(&mut self, soft: Var, hard: Matrix) -> Result<Var> {
        if self.value(soft).shape() != hard.shape() {
            return Err(Error::dims("straight-through shapes differ"));
        }
        Ok(self.push(hard, Op::StraightThrough(soft)))
    }

    /// Smallest distance of any ReLU input on the tape from its kink.
    pub fn kink_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Act(a, Activation::Relu) => Some(self.value(a).data().iter().fold(f64::INFINITY, |m, x| m.min(x.abs()))),
                _ => None,
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Sign pattern of every ReLU input, for detecting kink crossings.
    pub fn kink_signature(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Act(a, Activation::Relu) => Some(self.value(a).data().iter().map(|x| *x > 0.0).collect::<Vec<_>>()),
                _ => None,
            })
            .flatten()
            .collect()
    }

    /// Reverse sweep from a `1×1` root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).shape() != (1, 1) {
            return Err(Error::dims("backward needs a scalar root"));
        }
        self.backward_seeded(root, Matrix::scalar(1.0))
    }

    /// Reverse sweep seeded with an arbitrary upstream gradient on `root`.
    pub fn backward_seeded(&self, root: Var, seed: Matrix) -> Result<Gradients> {
        if seed.shape() != self.value(root).shape() {
            return Err(Error::dims("seed shape"));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Matrix>> = vec![None; n];
        grads[root.0] = Some(seed);
        fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
            grads[v.0] = Some(match grads[v.0].take() {
                Some(prev) => prev.add(&g).expect("gradient shapes agree"),
                None => g,
            });
        }
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].clone() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    acc(&mut grads, *a, g.matmul_t(self.value(*b))?);
                    acc(&mut grads, *b, self.value(*a).t_matmul(&g)?);
                }
                Op::TMatMul(a, b) => {
                    acc(&mut grads, *a, self.value(*b).matmul_t(&g)?);
                    acc(&mut grads, *b, self.value(*a).matmul(&g)?);
                }
                Op::MatMulT(a, b) => {
                    acc(&mut grads, *a, g.matmul(self.value(*b))?);
                    acc(&mut grads, *b, g.t_matmul(self.value(*a))?);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.scale(-1.0));
                }
                Op::Hadamard(a, b) => {
                    acc(&mut grads, *a, g.hadamard(self.value(*b))?);
                    acc(&mut grads, *b, g.hadamard(self.value(*a))?);
                }
                Op::AddCol(a, b) => {
                    let col: Vec<f64> = (0..g.rows()).map(|i| g.row(i).iter().sum()).collect();
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, Matrix::column_vector(&col));
                }
                Op::ScaleRows(a, d) => {
                    let (am, dm) = (self.value(*a), self.value(*d));
                    let ga = Matrix::from_fn(g.rows(), g.cols(), |i, j| g.get(i, j) * dm.get(i, 0));
                    let gd: Vec<f64> = (0..g.rows())
                        .map(|i| g.row(i).iter().zip(am.row(i)).map(|(x, y)| x * y).sum())
                        .collect();
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *d, Matrix::column_vector(&gd));
                }
                Op::ScaleCols(a, d) => {
                    let (am, dm) = (self.value(*a), self.value(*d));
                    let ga = g.scale_columns(dm.data());
                    let gd: Vec<f64> =
                        (0..g.cols()).map(|j| (0..g.rows()).map(|i| g.get(i, j) * am.get(i, j)).sum()).collect();
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *d, Matrix::column_vector(&gd));
                }
                Op::MulConst(a, c) => acc(&mut grads, *a, g.scale(*c)),
                Op::MulScalar(a, s) => {
                    let am = self.value(*a);
                    let gs: f64 = g.data().iter().zip(am.data()).map(|(x, y)| x * y).sum();
                    acc(&mut grads, *a, g.scale(self.scalar(*s)));
                    acc(&mut grads, *s, Matrix::scalar(gs));
                }
                Op::AddConst(a) => acc(&mut grads, *a, g),
                Op::Act(a, act) => {
                    let x = self.value(*a);
                    acc(&mut grads, *a, g.zip_with(x, |gi, xi| gi * act.derivative(xi))?);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    acc(&mut grads, *a, g.zip_with(y, |gi, yi| gi * yi * (1.0 - yi))?);
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    let s = g.get(0, 0);
                    acc(&mut grads, *a, Matrix::from_fn(r, c, |_, _| s));
                }
                Op::ConcatRows(a, b) => {
                    let ra = self.value(*a).rows();
                    let c = g.cols();
                    acc(&mut grads, *a, Matrix::from_fn(ra, c, |i, j| g.get(i, j)));
                    let rb = self.value(*b).rows();
                    acc(&mut grads, *b, Matrix::from_fn(rb, c, |i, j| g.get(ra + i, j)));
                }
                Op::SliceRows(a, start) => {
                    let (r, c) = self.value(*a).shape();
                    let len = g.rows();
                    acc(
                        &mut grads,
                        *a,
                        Matrix::from_fn(r, c, |i, j| if i >= *start && i < start + len { g.get(i - start, j) } else { 0.0 }),
                    );
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let cols = (0..y.cols())
                        .map(|j| {
                            let (yc, gc) = (y.col(j), g.col(j));
                            let d: f64 = yc.iter().zip(&gc).map(|(p, q)| p * q).sum();
                            yc.iter().zip(&gc).map(|(p, q)| p * (q - d)).collect()
                        })
                        .collect();
                    acc(&mut grads, *a, from_cols(y.rows(), cols));
                }
                Op::CrossEntropy(a, labels) => {
                    let z = self.value(*a);
                    let scale = g.get(0, 0) / labels.len() as f64;
                    let cols = columns(z)
                        .iter()
                        .zip(labels)
                        .map(|(c, &y)| {
                            let mut p = softmax_col(c);
                            p[y] -= 1.0;
                            p.into_iter().map(|v| v * scale).collect()
                        })
                        .collect();
                    acc(&mut grads, *a, from_cols(z.rows(), cols));
                }
                Op::Kl(a, b) => {
                    let (za, zb) = (self.value(*a), self.value(*b));
                    let scale = g.get(0, 0) / za.cols().max(1) as f64;
                    let mut ga = Vec::with_capacity(za.cols());
                    let mut gb = Vec::with_capacity(za.cols());
                    for (ca, cb) in columns(za).iter().zip(columns(zb)) {
                        let (lp, lq) = (log_softmax_col(ca), log_softmax_col(&cb));
                        let r: Vec<f64> = lp.iter().zip(&lq).map(|(x, y)| x - y).collect();
                        let kl: f64 = lp.iter().zip(&r).map(|(x, ri)| x.exp() * ri).sum();
                        ga.push(lp.iter().zip(&r).map(|(x, ri)| x.exp() * (ri - kl) * scale).collect());
                        gb.push(lq.iter().zip(&lp).map(|(y, x)| (y.exp() - x.exp()) * scale).collect());
                    }
                    acc(&mut grads, *a, from_cols(za.rows(), ga));
                    acc(&mut grads, *b, from_cols(zb.rows(), gb));
                }
                Op::FakeQuant { input, theta, rec } => {
                    let s = node_scale(rec, self.scalar(*theta));
                    let mut gt = vec![0.0; g.data().len()];
                    let mut gth = 0.0;
                    for (i, &gi) in g.data().iter().enumerate() {
                        if rec.in_range[i] {
                            gt[i] = gi;
                            gth += gi * s * (rec.codes[i] - rec.input[i] / rec.scale);
                        }
                    }
                    let (r, c) = g.shape();
                    acc(&mut grads, *input, Matrix::new(r, c, gt)?);
                    acc(&mut grads, *theta, Matrix::scalar(gth));
                }
                Op::SoftMask { scores, tau, rec } => {
                    let m = node.value.data();
                    let n = m.len();
                    let d: Vec<f64> = m.iter().zip(g.data()).map(|(mi, gi)| gi * mi * (1.0 - mi) / tau).collect();
                    let total: f64 = d.iter().sum();
                    let mut gs = d.clone();
                    for &(i, w) in &rec.threshold {
                        gs[i] -= w * total;
                    }
                    acc(&mut grads, *scores, Matrix::new(n, 1, gs)?);
                }
                Op::SpectralNorm { input, u, v } => {
                    let s = g.get(0, 0);
                    acc(&mut grads, *input, Matrix::from_fn(u.len(), v.len(), |i, j| s * u[i] * v[j]));
                }
                Op::StraightThrough(soft) => acc(&mut grads, *soft, g),
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn node_scale(rec: &QuantRecord, theta: f64) -> f64 {
    rec.scale * (theta - rec.theta).exp()
}


#[cfg(test)]
mod tests {
    use super::*;

    /// Builds a scalar from two leaves through most operators; returns the
    /// tape, root and leaves. Frozen records are replayed when given.
    fn build(a0: &Matrix, b0: &Matrix, th0: f64, frozen: Option<&(QuantRecord, MaskRecord)>) -> (Tape, Var, [Var; 3], (QuantRecord, MaskRecord)) {
        let mut t = Tape::new();
        let a = t.leaf(a0.clone());
        let b = t.leaf(b0.clone());
        let th = t.leaf(Matrix::scalar(th0));
        let ab = t.matmul(a, b).unwrap(); // 3×2
        let g = t.activation(ab, Activation::Gelu);
        let (q, qr) = t.fake_quant(g, th, 4, ClipMode::MaxRange, frozen.map(|f| &f.0)).unwrap();
        let s = t.sigmoid(q);
        let sm = t.softmax(s);
        let top = t.slice_rows(sm, 0, 2).unwrap(); // 2×2
        let bt = t.t_matmul(b, top).unwrap();
        let w = t.constant(Matrix::from_fn(2, 2, |i, j| 1.0 + i as f64 - 0.5 * j as f64));
        let v = t.hadamard(bt, w).unwrap();
        let v = t.sum(v);
        let sn = t.spectral_norm(ab).unwrap();
        let vv = t.mul_scalar(v, sn).unwrap();
        let pick = t.constant(Matrix::column_vector(&[1.0, -0.5]));
        let scores = t.matmul(ab, pick).unwrap(); // 3×1
        let (m, mr) = t.soft_mask(scores, 1, 0.7, frozen.map(|f| &f.1)).unwrap();
        let ce = t.cross_entropy(q, &[0, 2]).unwrap();
        let kl = t.kl(g, ab).unwrap();
        let ms = t.sum(m);
        let bias = t.constant(Matrix::column_vector(&[0.1, -0.2, 0.3]));
        let shifted = t.add_col(ab, bias).unwrap();
        let scaled = t.scale_rows(shifted, bias).unwrap();
        let scaled = t.scale_cols(scaled, pick).unwrap();
        let joined = t.concat_rows(scaled, ab).unwrap();
        let r2 = t.relu(joined);
        let r2 = t.add_const(r2, 0.25);
        let r2 = t.sum(r2);
        let r = t.add(vv, ce).unwrap();
        let r = t.add(r, kl).unwrap();
        let r = t.add(r, ms).unwrap();
        let r = t.add(r, r2).unwrap();
        let outer = t.matmul_t(a, ab).unwrap(); // 3×3
        let outer = t.sum(outer);
        let r = t.add(r, outer).unwrap();
        let r = t.mul_const(r, 0.5);
        (t, r, [a, b, th], (qr, mr))
    }

    #[test]
    fn composite_matches_central_differences() {
        let a0 = Matrix::from_fn(3, 2, |i, j| 0.4 * i as f64 - 0.7 * j as f64 + 0.3);
        let b0 = Matrix::from_fn(2, 2, |i, j| if i == j { 1.1 } else { -0.35 });
        let (tape, root, leaves, rec) = build(&a0, &b0, 0.1, None);
        let grads = tape.backward(root).unwrap();
        let h = 1e-6;
        let eval = |a: &Matrix, b: &Matrix, th: f64| {
            let (t, r, _, _) = build(a, b, th, Some(&rec));
            t.scalar(r)
        };
        for (which, base) in [(0usize, &a0), (1, &b0)] {
            let g = grads.of(leaves[which]);
            for idx in 0..base.data().len() {
                let mut p = base.clone();
                p.data_mut()[idx] += h;
                let mut m = base.clone();
                m.data_mut()[idx] -= h;
                let (fp, fm) = if which == 0 { (eval(&p, &b0, 0.1), eval(&m, &b0, 0.1)) } else { (eval(&a0, &p, 0.1), eval(&a0, &m, 0.1)) };
                let fd = (fp - fm) / (2.0 * h);
                assert!((fd - g.data()[idx]).abs() < 1e-6 * (1.0 + fd.abs()), "leaf {which} idx {idx}: fd {fd} vs {}", g.data()[idx]);
            }
        }
        let fd = (eval(&a0, &b0, 0.1 + h) - eval(&a0, &b0, 0.1 - h)) / (2.0 * h);
        assert!((fd - grads.of(leaves[2]).get(0, 0)).abs() < 1e-6 * (1.0 + fd.abs()));
    }

    #[test]
    fn straight_through_routes_to_soft() {
        let mut t = Tape::new();
        let z = t.leaf(Matrix::column_vector(&[0.1, 0.9]));
        let p = t.softmax(z);
        let y = t.straight_through(p, Matrix::column_vector(&[0.0, 1.0])).unwrap();
        let w = t.constant(Matrix::column_vector(&[3.0, 5.0]));
        let e = t.hadamard(y, w).unwrap();
        let s = t.sum(e);
        assert_eq!(t.scalar(s), 5.0);
        let g = t.backward(s).unwrap().of(z);
        let pv = t.value(p).data().to_vec();
        let expect0 = pv[0] * (3.0 - (3.0 * pv[0] + 5.0 * pv[1]));
        assert!((g.get(0, 0) - expect0).abs() < 1e-12);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(Matrix::scalar(2.0));
        let b = t.leaf(Matrix::zeros(2, 2));
        let s = t.mul_const(a, 3.0);
        let g = t.backward(s).unwrap();
        assert_eq!(g.of(a).get(0, 0), 3.0);
        assert_eq!(g.of(b), Matrix::zeros(2, 2));
    }
}
