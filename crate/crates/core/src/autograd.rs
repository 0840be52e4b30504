//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation as a node holding its output value.
//! [`Tape::backward`] walks the nodes in reverse and accumulates gradients.
//! Every value is a 2-D matrix; scalars are `1 × 1`.

use std::sync::Arc;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Exp(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    L2NormRows {
        x: Var,
        norms: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Mat,
        count: usize,
    },
    Sum(Var),
    Dropout(Var, Mat),
}

struct Node {
    value: Arc<Mat>,
    op: Op,
}

/// Records operations for a single forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Shape(msg()))
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let t = (C * (x + 0.044_715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044_715 * x * x)
}

/// Row-wise softmax of `x` restricted to `mask`; fully masked rows are zero.
pub fn masked_softmax(x: ArrayView2<f64>, mask: Option<&Array2<bool>>) -> Mat {
    let mut out = Mat::zeros(x.raw_dim());
    for (r, row) in x.rows().into_iter().enumerate() {
        let allowed = |c: usize| mask.is_none_or(|m| m[[r, c]]);
        let max = row
            .iter()
            .enumerate()
            .filter(|(c, _)| allowed(*c))
            .map(|(_, v)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let mut total = 0.0;
        for (c, v) in row.iter().enumerate() {
            if allowed(c) {
                let e = (v - max).exp();
                out[[r, c]] = e;
                total += e;
            }
        }
        out.row_mut(r).mapv_inplace(|v| v / total);
    }
    out
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

    /// Drops every node recorded after `mark` (a previous [`Tape::len`]).
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.push_arc(Arc::new(value), op)
    }

    fn push_arc(&mut self, value: Arc<Mat>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Arc<Mat>) -> Var {
        self.push_arc(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        check(sa.1 == sb.0, || format!("matmul {sa:?} x {sb:?}"))?;
        let out = self.value(a).dot(self.value(b));
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        check(sa.1 == sb.1, || format!("matmul_nt {sa:?} x {sb:?}ᵀ"))?;
        let out = self.value(a).dot(&self.value(b).t());
        Ok(self.push(out, Op::MatMulNT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        check(sa == sb, || format!("add {sa:?} + {sb:?}"))?;
        let out = self.value(a) + self.value(b);
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Adds the `1 × n` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        check(sb.0 == 1 && sa.1 == sb.1, || format!("add_row {sa:?} + {sb:?}"))?;
        let out = self.value(a) + self.value(b);
        Ok(self.push(out, Op::AddRow(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        check(sa == sb, || format!("mul {sa:?} * {sb:?}"))?;
        let out = self.value(a) * self.value(b);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        self.push(out, Op::Scale(a, c))
    }

    /// Multiplies `a` by the `1 × 1` value `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        check(self.shape(s) == (1, 1), || "scale_by needs a 1x1 scale".into())?;
        let out = self.value(a) * self.scalar(s);
        Ok(self.push(out, Op::ScaleBy(a, s)))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(gelu);
        self.push(out, Op::Gelu(a))
    }

    /// Row-wise layer normalization with a `1 × n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (sx, sg, sb) = (self.shape(x), self.shape(gain), self.shape(bias));
        check(sg == (1, sx.1) && sb == sg, || {
            format!("layer_norm {sx:?} gain {sg:?} bias {sb:?}")
        })?;
        let xv = self.value(x);
        let n = sx.1 as f64;
        let mut xhat = Mat::zeros(sx);
        let mut inv_std = Vec::with_capacity(sx.0);
        for (r, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(inv);
            xhat.row_mut(r).assign(&row.mapv(|v| (v - mean) * inv));
        }
        let out = &xhat * self.value(gain) + self.value(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Row-wise softmax. Masked-out entries get zero weight and a fully
    /// masked row is all zeros.
    pub fn softmax(&mut self, x: Var, mask: Option<&Array2<bool>>) -> Result<Var> {
        if let Some(m) = mask {
            let sx = self.shape(x);
            check(m.dim() == sx, || format!("mask {:?} vs scores {sx:?}", m.dim()))?;
        }
        let out = masked_softmax(self.value(x).view(), mask);
        Ok(self.push(out, Op::Softmax(x)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let sa = self.shape(a);
        check(start + len <= sa.1, || format!("slice_cols {start}+{len} of {sa:?}"))?;
        let out = self.value(a).slice(s![.., start..start + len]).to_owned();
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = concatenate(Axis(1), &views).map_err(|e| Error::shape(e.to_string()))?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = concatenate(Axis(0), &views).map_err(|e| Error::shape(e.to_string()))?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let sa = self.shape(a);
        check(rows.iter().all(|&r| r < sa.0), || {
            format!("gather_rows index out of range for {sa:?}")
        })?;
        let out = self.value(a).select(Axis(0), rows);
        Ok(self.push(out, Op::GatherRows(a, rows.to_vec())))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let norms: Vec<f64> = xv
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt().max(NORM_EPS))
            .collect();
        let mut out = xv.clone();
        for (mut row, n) in out.rows_mut().into_iter().zip(&norms) {
            row.mapv_inplace(|v| v / n);
        }
        self.push(out, Op::L2NormRows { x, norms })
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`. Rows whose target is `None` are excluded; with no included
    /// rows the loss is zero.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let sl = self.shape(logits);
        check(targets.len() == sl.0, || {
            format!("cross_entropy {} targets for {sl:?}", targets.len())
        })?;
        check(targets.iter().flatten().all(|&t| t < sl.1), || {
            "cross_entropy target out of range".into()
        })?;
        let probs = masked_softmax(self.value(logits).view(), None);
        let count = targets.iter().flatten().count();
        let mut loss = 0.0;
        if count > 0 {
            let lv = self.value(logits);
            for (r, t) in targets.iter().enumerate() {
                if let Some(t) = *t {
                    let row = lv.row(r);
                    let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                    loss += lse - row[t];
                }
            }
            loss /= count as f64;
        }
        Ok(self.push(
            Mat::from_elem((1, 1), loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Multiplies by a fixed mask (already scaled by the keep probability).
    pub fn dropout(&mut self, a: Var, mask: Mat) -> Result<Var> {
        let sa = self.shape(a);
        check(mask.dim() == sa, || "dropout mask shape".into())?;
        let out = self.value(a) * &mask;
        Ok(self.push(out, Op::Dropout(a, mask)))
    }

    /// Back-propagates from the `1 × 1` node `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::ones(self.value(loss).raw_dim()));

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = gout.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&gout);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulNT(a, b) => {
                    let ga = gout.dot(self.value(*b));
                    let gb = gout.t().dot(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, gout.clone());
                    acc(&mut grads, *b, gout.clone());
                }
                Op::AddRow(a, b) => {
                    let gb = gout.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *a, gout.clone());
                    acc(&mut grads, *b, gb);
                }
                Op::Mul(a, b) => {
                    let ga = &gout * self.value(*b);
                    let gb = &gout * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, &gout * *c),
                Op::ScaleBy(a, sv) => {
                    let ga = &gout * self.scalar(*sv);
                    let gs = (&gout * self.value(*a)).sum();
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *sv, Mat::from_elem((1, 1), gs));
                }
                Op::Exp(a) => acc(&mut grads, *a, &gout * &*node.value),
                Op::Gelu(a) => {
                    let ga = &gout * &self.value(*a).mapv(gelu_grad);
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let ggain = (&gout * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let gbias = gout.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dxhat = &gout * self.value(*gain);
                    let n = xhat.ncols() as f64;
                    let mut gx = Mat::zeros(xhat.raw_dim());
                    for r in 0..xhat.nrows() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let sum_dh = dh.sum();
                        let sum_dh_xh = dh.dot(&xh);
                        let inv = inv_std[r];
                        for c in 0..xhat.ncols() {
                            gx[[r, c]] = inv / n * (n * dh[c] - sum_dh - xh[c] * sum_dh_xh);
                        }
                    }
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *gain, ggain);
                    acc(&mut grads, *bias, gbias);
                }
                Op::Softmax(x) => {
                    let y = &*node.value;
                    let mut gx = Mat::zeros(y.raw_dim());
                    for r in 0..y.nrows() {
                        let dot = gout.row(r).dot(&y.row(r));
                        for c in 0..y.ncols() {
                            gx[[r, c]] = y[[r, c]] * (gout[[r, c]] - dot);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Mat::zeros(self.value(*a).raw_dim());
                    ga.slice_mut(s![.., *start..*start + gout.ncols()])
                        .assign(&gout);
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        acc(&mut grads, *p, gout.slice(s![.., off..off + w]).to_owned());
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let h = self.value(*p).nrows();
                        acc(&mut grads, *p, gout.slice(s![off..off + h, ..]).to_owned());
                        off += h;
                    }
                }
                Op::GatherRows(a, rows) => {
                    let mut ga = Mat::zeros(self.value(*a).raw_dim());
                    for (i, &r) in rows.iter().enumerate() {
                        let mut dst = ga.row_mut(r);
                        dst += &gout.row(i);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::L2NormRows { x, norms } => {
                    let y = &*node.value;
                    let mut gx = Mat::zeros(y.raw_dim());
                    for r in 0..y.nrows() {
                        let dot = gout.row(r).dot(&y.row(r));
                        for c in 0..y.ncols() {
                            gx[[r, c]] = (gout[[r, c]] - y[[r, c]] * dot) / norms[r];
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                    count,
                } => {
                    let mut gl = Mat::zeros(probs.raw_dim());
                    if *count > 0 {
                        let scale = gout[[0, 0]] / *count as f64;
                        for (r, t) in targets.iter().enumerate() {
                            if let Some(t) = *t {
                                let mut row = gl.row_mut(r);
                                row.assign(&probs.row(r));
                                row[t] -= 1.0;
                                row.mapv_inplace(|v| v * scale);
                            }
                        }
                    }
                    acc(&mut grads, *logits, gl);
                }
                Op::Sum(a) => {
                    let ga = Mat::from_elem(self.value(*a).raw_dim(), gout[[0, 0]]);
                    acc(&mut grads, *a, ga);
                }
                Op::Dropout(a, mask) => acc(&mut grads, *a, &gout * mask),
            }
            // keep leaf gradients for the caller
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(gout);
            }
        }
        Grads { grads }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central finite-difference check of `f` with respect to the leaf built
    /// from `x0`.
    fn fd_check(x0: Mat, f: impl Fn(&mut Tape, Var) -> Var) -> f64 {
        let mut tape = Tape::new();
        let x = tape.leaf(Arc::new(x0.clone()));
        let loss = f(&mut tape, x);
        let grads = tape.backward(loss);
        let analytic = grads.get(x).cloned().unwrap_or_else(|| Mat::zeros(x0.raw_dim()));
        let h = 1e-6;
        let mut num = Mat::zeros(x0.raw_dim());
        for idx in 0..x0.len() {
            let (r, c) = (idx / x0.ncols(), idx % x0.ncols());
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp[[r, c]] += delta;
                let mut t = Tape::new();
                let v = t.leaf(Arc::new(xp));
                let l = f(&mut t, v);
                t.scalar(l)
            };
            num[[r, c]] = (eval(h) - eval(-h)) / (2.0 * h);
        }
        let diff = (&analytic - &num).mapv(|v| v * v).sum().sqrt();
        let scale = analytic.mapv(|v| v * v).sum().sqrt() + num.mapv(|v| v * v).sum().sqrt();
        diff / scale.max(1e-12)
    }

    fn sample() -> Mat {
        array![[0.3, -1.2, 0.7, 0.1], [1.5, 0.2, -0.4, -0.9], [-0.6, 0.8, 0.05, 1.1]]
    }

    #[test]
    fn softmax_fully_masked_row_is_zero() {
        let x = sample();
        let mut mask = Array2::from_elem((3, 4), true);
        mask.row_mut(1).fill(false);
        let y = masked_softmax(x.view(), Some(&mask));
        assert!(y.row(1).iter().all(|v| *v == 0.0));
        assert!((y.row(0).sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_gradient() {
        let err = fd_check(sample(), |t, x| {
            let g = t.constant(array![[1.0, 0.5, -2.0, 1.5]]);
            let b = t.constant(array![[0.1, 0.0, 0.2, -0.3]]);
            let y = t.layer_norm(x, g, b).unwrap();
            let w = t.constant(sample().t().to_owned());
            let z = t.matmul(y, w).unwrap();
            let z = t.gelu(z);
            t.sum(z)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn softmax_and_cross_entropy_gradient() {
        let err = fd_check(sample(), |t, x| {
            let mut mask = Array2::from_elem((3, 4), true);
            mask[[0, 2]] = false;
            let y = t.softmax(x, Some(&mask)).unwrap();
            let w = t.constant(sample());
            let z = t.mul(y, w).unwrap();
            let ce = t.cross_entropy(x, &[Some(1), None, Some(3)]).unwrap();
            let s = t.sum(z);
            t.add(s, ce).unwrap()
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn structural_ops_gradient() {
        let err = fd_check(sample(), |t, x| {
            let a = t.slice_cols(x, 1, 2).unwrap();
            let b = t.gather_rows(x, &[2, 0, 2]).unwrap();
            let bn = t.l2_normalize_rows(b);
            let c = t.concat_cols(&[a, a]).unwrap();
            let d = t.concat_rows(&[c, bn]).unwrap();
            let e = t.matmul_nt(d, x).unwrap();
            let s = t.slice_cols(x, 0, 1).unwrap();
            let s = t.gather_rows(s, &[0]).unwrap();
            let se = t.exp(s);
            let e = t.scale_by(e, se).unwrap();
            let e = t.mul(e, e).unwrap();
            t.mean(e)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn cross_entropy_without_targets_is_zero() {
        let mut t = Tape::new();
        let x = t.constant(sample());
        let l = t.cross_entropy(x, &[None, None, None]).unwrap();
        assert_eq!(t.scalar(l), 0.0);
    }

    #[test]
    fn shape_errors() {
        let mut t = Tape::new();
        let a = t.constant(Mat::zeros((2, 3)));
        let b = t.constant(Mat::zeros((2, 3)));
        assert!(t.matmul(a, b).is_err());
        assert!(t.add_row(a, b).is_err());
    }
}
