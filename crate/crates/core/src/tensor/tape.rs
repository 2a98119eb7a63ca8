use super::ops::{self, gelu, gelu_grad, matmul_acc, transpose_raw};
use super::Tensor;
use crate::attention::AttentionMask;
use crate::error::{MooseError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Transpose {
        a: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    /// `b` has `rows(b)` rows and is repeated down the rows of `a`.
    AddTiled {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: f64,
    },
    Sum {
        a: Var,
    },
    MeanRows {
        a: Var,
    },
    Softmax {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu {
        a: Var,
    },
    Slice {
        a: Var,
        row0: usize,
        col0: usize,
    },
    ConcatCols {
        parts: Vec<Var>,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    GatherRows {
        a: Var,
        rows: Vec<usize>,
    },
    Reshape {
        a: Var,
    },
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    requires_grad: bool,
}

/// Dynamic reverse-mode tape. Values are appended in execution order, so
/// every node's inputs precede it.
#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<Tensor>,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
    macs: u64,
}

fn rows_cols(t: &Tensor) -> (usize, usize) {
    let cols = *t.shape().last().unwrap_or(&1);
    (t.numel() / cols, cols)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Multiply-accumulate count of every matrix product recorded so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        debug_assert!(value.is_finite() || inputs.iter().any(|v| !self.values[v.0].is_finite()));
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.values.push(value);
        self.nodes.push(Node { op, requires_grad });
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    /// Records a leaf; gradients are tracked when `t.requires_grad()` is set.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        let requires_grad = t.requires_grad();
        t.zero_grad();
        self.values.push(t);
        self.nodes.push(Node {
            op: Op::Leaf,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// The value of `v` with its gradient slot filled from the last backward.
    pub fn tensor_with_grad(&self, v: Var) -> Tensor {
        let mut t = self.values[v.0].clone();
        if let Some(g) = self.grad(v) {
            // lengths always agree: grads are allocated from the value's size
            let _ = t.accumulate_grad(g);
        }
        t
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        let (m, k) = self.value(a).dims2()?;
        let n = out.shape()[1];
        self.macs += (m * k * n) as u64;
        Ok(self.push(out, Op::MatMul { a, b }, &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = ops::transpose(self.value(a))?;
        Ok(self.push(out, Op::Transpose { a }, &[a]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(MooseError::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| f(p, q))
            .collect();
        Tensor::from_parts(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |p, q| p + q);
        Ok(self.push(out, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |p, q| p - q);
        Ok(self.push(out, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |p, q| p * q);
        Ok(self.push(out, Op::Mul { a, b }, &[a, b]))
    }

    /// `a[r, :] + b[r mod rows(b), :]`. Covers bias rows (`b` is `[D]` or
    /// `[1×D]`) and per-sequence positional tables tiled over a batch.
    pub fn add_tiled(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = rows_cols(self.value(a));
        let (br, bc) = rows_cols(self.value(b));
        if ac != bc || ar % br != 0 {
            return Err(MooseError::shape("add_tiled", self.shape(a), self.shape(b)));
        }
        let bd = self.value(b).data();
        let mut out = self.value(a).data().to_vec();
        for (r, row) in out.chunks_exact_mut(ac).enumerate() {
            let brow = &bd[(r % br) * bc..(r % br + 1) * bc];
            row.iter_mut().zip(brow).for_each(|(x, y)| *x += y);
        }
        let out = Tensor::from_parts(self.shape(a).to_vec(), out);
        Ok(self.push(out, Op::AddTiled { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let x = self.value(a);
        let out = Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|v| v * c).collect());
        self.push(out, Op::Scale { a, c }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { a }, &[a])
    }

    /// Mean over rows of a matrix, giving `[1×D]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        let mut out = vec![0.0; c];
        for row in self.value(a).data().chunks_exact(c) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        let inv = 1.0 / r as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        Ok(self.push(
            Tensor::from_parts(vec![1, c], out),
            Op::MeanRows { a },
            &[a],
        ))
    }

    pub fn softmax(&mut self, a: Var, mask: Option<&AttentionMask>) -> Result<Var> {
        let out = ops::softmax_lastdim(self.value(a), mask)?;
        Ok(self.push(out, Op::Softmax { a }, &[a]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let parts = ops::layer_norm_parts(self.value(x), self.value(gamma), self.value(beta))?;
        let out = Tensor::from_parts(self.shape(x).to_vec(), parts.out);
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat: parts.xhat,
            inv_std: parts.inv_std,
        };
        Ok(self.push(out, op, &[x, gamma, beta]))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Tensor::from_parts(
            x.shape().to_vec(),
            x.data().iter().map(|&v| gelu(v)).collect(),
        );
        self.push(out, Op::Gelu { a }, &[a])
    }

    /// Rectangular block `[row0..row0+rows) × [col0..col0+cols)` of a matrix.
    pub fn slice(
        &mut self,
        a: Var,
        row0: usize,
        rows: usize,
        col0: usize,
        cols: usize,
    ) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        if rows == 0 || cols == 0 || row0 + rows > r || col0 + cols > c {
            return Err(MooseError::shape(
                "slice",
                &[r, c],
                &[row0 + rows, col0 + cols],
            ));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(rows * cols);
        for i in row0..row0 + rows {
            out.extend_from_slice(&src[i * c + col0..i * c + col0 + cols]);
        }
        let out = Tensor::from_parts(vec![rows, cols], out);
        Ok(self.push(out, Op::Slice { a, row0, col0 }, &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| MooseError::invalid("concat of nothing"))?;
        let (rows, _) = self.value(*first).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return Err(MooseError::shape(
                    "concat_cols",
                    self.shape(*first),
                    self.shape(p),
                ));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor::from_parts(vec![rows, total], out);
        Ok(self.push(
            out,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            parts,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| MooseError::invalid("concat of nothing"))?;
        let (_, cols) = self.value(*first).dims2()?;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if c != cols {
                return Err(MooseError::shape(
                    "concat_rows",
                    self.shape(*first),
                    self.shape(p),
                ));
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::from_parts(vec![rows, cols], out);
        Ok(self.push(
            out,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            parts,
        ))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        if rows.is_empty() {
            return Err(MooseError::invalid("gather of no rows"));
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(MooseError::invalid(format!(
                "row {bad} out of range for {r} rows"
            )));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let out = Tensor::from_parts(vec![rows.len(), c], out);
        Ok(self.push(
            out,
            Op::GatherRows {
                a,
                rows: rows.to_vec(),
            },
            &[a],
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape { a }, &[a]))
    }

    /// `-log softmax(logits)[label]` via log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let z = self.value(logits).data();
        if label >= z.len() {
            return Err(MooseError::invalid(format!(
                "label {label} out of range for {} classes",
                z.len()
            )));
        }
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        let probs = z.iter().map(|v| (v - lse).exp()).collect();
        let loss = lse - z[label];
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
            &[logits],
        ))
    }

    /// Populates gradients for every node reachable from `loss` that
    /// requires them. Each node is visited once, in reverse order.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(MooseError::BackwardTwice);
        }
        if self.value(loss).numel() != 1 {
            return Err(MooseError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let (before, rest) = self.grads.split_at_mut(i);
            let Some(g) = rest[0].as_deref() else {
                continue;
            };
            let mut acc = Accumulator {
                grads: before,
                nodes: &self.nodes,
                values: &self.values,
            };
            let out = &self.values[i];
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let (m, k) = acc.values[a.0].dims2()?;
                    let n = out.shape()[1];
                    if acc.needs(*a) {
                        let bt = transpose_raw(acc.values[b.0].data(), k, n);
                        acc.with(*a, |ga| matmul_acc(g, &bt, ga, m, n, k));
                    }
                    if acc.needs(*b) {
                        let at = transpose_raw(acc.values[a.0].data(), m, k);
                        acc.with(*b, |gb| matmul_acc(&at, g, gb, k, m, n));
                    }
                }
                Op::Transpose { a } => {
                    let (r, c) = out.dims2()?;
                    let gt = transpose_raw(g, r, c);
                    acc.add(*a, &gt);
                }
                Op::Add { a, b } => {
                    acc.add(*a, g);
                    acc.add(*b, g);
                }
                Op::Sub { a, b } => {
                    acc.add(*a, g);
                    acc.with(*b, |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
                }
                Op::Mul { a, b } => {
                    let (av, bv) = (acc.values[a.0].data(), acc.values[b.0].data());
                    acc.with(*a, |ga| {
                        for ((x, gi), bi) in ga.iter_mut().zip(g).zip(bv) {
                            *x += gi * bi;
                        }
                    });
                    acc.with(*b, |gb| {
                        for ((x, gi), ai) in gb.iter_mut().zip(g).zip(av) {
                            *x += gi * ai;
                        }
                    });
                }
                Op::AddTiled { a, b } => {
                    acc.add(*a, g);
                    let (br, bc) = rows_cols(&acc.values[b.0]);
                    acc.with(*b, |gb| {
                        for (r, row) in g.chunks_exact(bc).enumerate() {
                            let dst = &mut gb[(r % br) * bc..(r % br + 1) * bc];
                            dst.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                        }
                    });
                }
                Op::Scale { a, c } => {
                    acc.with(*a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y));
                }
                Op::Sum { a } => {
                    let g0 = g[0];
                    acc.with(*a, |ga| ga.iter_mut().for_each(|x| *x += g0));
                }
                Op::MeanRows { a } => {
                    let (r, c) = acc.values[a.0].dims2()?;
                    let inv = 1.0 / r as f64;
                    acc.with(*a, |ga| {
                        for row in ga.chunks_exact_mut(c) {
                            row.iter_mut().zip(g).for_each(|(x, y)| *x += y * inv);
                        }
                    });
                }
                Op::Softmax { a } => {
                    let k = *out.shape().last().unwrap_or(&1);
                    let y = out.data();
                    acc.with(*a, |ga| {
                        for ((gy, yy), gx) in g
                            .chunks_exact(k)
                            .zip(y.chunks_exact(k))
                            .zip(ga.chunks_exact_mut(k))
                        {
                            let dot: f64 = gy.iter().zip(yy).map(|(p, q)| p * q).sum();
                            for j in 0..k {
                                gx[j] += yy[j] * (gy[j] - dot);
                            }
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let d = *out.shape().last().unwrap_or(&1);
                    let gam = acc.values[gamma.0].data();
                    acc.with(*x, |gx| {
                        let inv_d = 1.0 / d as f64;
                        for (r, &is) in inv_std.iter().enumerate() {
                            let gy = &g[r * d..(r + 1) * d];
                            let xh = &xhat[r * d..(r + 1) * d];
                            let mut sum_dxh = 0.0;
                            let mut sum_dxh_xh = 0.0;
                            for j in 0..d {
                                let dxh = gy[j] * gam[j];
                                sum_dxh += dxh;
                                sum_dxh_xh += dxh * xh[j];
                            }
                            for j in 0..d {
                                let dxh = gy[j] * gam[j];
                                gx[r * d + j] +=
                                    is * (dxh - inv_d * sum_dxh - xh[j] * inv_d * sum_dxh_xh);
                            }
                        }
                    });
                    acc.with(*gamma, |gg| {
                        for (gy, xh) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                            for j in 0..d {
                                gg[j] += gy[j] * xh[j];
                            }
                        }
                    });
                    acc.with(*beta, |gb| {
                        for gy in g.chunks_exact(d) {
                            gb.iter_mut().zip(gy).for_each(|(x, y)| *x += y);
                        }
                    });
                }
                Op::Gelu { a } => {
                    let xv = acc.values[a.0].data();
                    acc.with(*a, |ga| {
                        for ((x, gi), &xi) in ga.iter_mut().zip(g).zip(xv) {
                            *x += gi * gelu_grad(xi);
                        }
                    });
                }
                Op::Slice { a, row0, col0 } => {
                    let (rows, cols) = out.dims2()?;
                    let (_, c) = acc.values[a.0].dims2()?;
                    acc.with(*a, |ga| {
                        for i in 0..rows {
                            let dst = &mut ga[(row0 + i) * c + col0..(row0 + i) * c + col0 + cols];
                            let src = &g[i * cols..(i + 1) * cols];
                            dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
                        }
                    });
                }
                Op::ConcatCols { parts } => {
                    let (rows, total) = out.dims2()?;
                    let mut offset = 0;
                    for &p in parts {
                        let (_, w) = acc.values[p.0].dims2()?;
                        acc.with(p, |gp| {
                            for i in 0..rows {
                                let src = &g[i * total + offset..i * total + offset + w];
                                gp[i * w..(i + 1) * w]
                                    .iter_mut()
                                    .zip(src)
                                    .for_each(|(x, y)| *x += y);
                            }
                        });
                        offset += w;
                    }
                }
                Op::ConcatRows { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = acc.values[p.0].numel();
                        acc.add(p, &g[offset..offset + n]);
                        offset += n;
                    }
                }
                Op::GatherRows { a, rows } => {
                    let c = out.shape()[1];
                    acc.with(*a, |ga| {
                        for (k, &i) in rows.iter().enumerate() {
                            let src = &g[k * c..(k + 1) * c];
                            ga[i * c..(i + 1) * c]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(x, y)| *x += y);
                        }
                    });
                }
                Op::Reshape { a } => acc.add(*a, g),
                Op::CrossEntropy {
                    logits,
                    label,
                    probs,
                } => {
                    let g0 = g[0];
                    acc.with(*logits, |gl| {
                        for (j, (x, p)) in gl.iter_mut().zip(probs).enumerate() {
                            let onehot = if j == *label { 1.0 } else { 0.0 };
                            *x += g0 * (p - onehot);
                        }
                    });
                }
            }
        }
        Ok(())
    }
}

struct Accumulator<'a> {
    grads: &'a mut [Option<Vec<f64>>],
    nodes: &'a [Node],
    values: &'a [Tensor],
}

impl Accumulator<'_> {
    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn with(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.needs(v) {
            return;
        }
        let n = self.values[v.0].numel();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn add(&mut self, v: Var, g: &[f64]) {
        self.with(v, |dst| dst.iter_mut().zip(g).for_each(|(x, y)| *x += y));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_and_square_gradients() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let loss = tape.sum(w);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let w = tape.param(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(
            tape.backward(w),
            Err(MooseError::NonScalarLoss(_))
        ));
        let loss = tape.sum(w);
        tape.backward(loss).unwrap();
        assert!(matches!(
            tape.backward(loss),
            Err(MooseError::BackwardTwice)
        ));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::full(&[2, 2], 2.0));
        let w = tape.param(Tensor::full(&[2, 2], 1.0));
        let p = tape.matmul(c, w).unwrap();
        let loss = tape.sum(p);
        tape.backward(loss).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(w).unwrap(), &[4.0; 4]);
        assert_eq!(tape.macs(), 8);
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let z: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut tape = Tape::new();
        let logits = tape.param(Tensor::new(&[5], z.clone()).unwrap());
        let loss = tape.cross_entropy(logits, 3).unwrap();
        tape.backward(loss).unwrap();
        let s = ops::softmax_lastdim(&Tensor::new(&[5], z).unwrap(), None).unwrap();
        for (j, (&g, &p)) in tape.grad(logits).unwrap().iter().zip(s.data()).enumerate() {
            let expect = p - if j == 3 { 1.0 } else { 0.0 };
            assert!((g - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn cross_entropy_uniform_and_confident() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[7]));
        let l = tape.cross_entropy(z, 2).unwrap();
        assert!((tape.value(l).data()[0] - 7f64.ln()).abs() < 1e-12);
        let mut logits = vec![0.0; 4];
        logits[1] = 50.0;
        let z = tape.constant(Tensor::new(&[4], logits).unwrap());
        let l = tape.cross_entropy(z, 1).unwrap();
        assert!(tape.value(l).data()[0] < 1e-20);
        assert!(tape.cross_entropy(z, 4).is_err());
    }
}
