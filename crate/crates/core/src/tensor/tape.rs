use std::collections::BTreeMap;

use super::{Grads, ParamId, ParamStore, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Softmax {
        x: Var,
        outer: usize,
        axis_len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Rows {
        x: Var,
        idx: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    MeanGroups {
        x: Var,
        group: usize,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    SmoothL1 {
        x: Var,
        target: Vec<f64>,
        beta: f64,
    },
    L1 {
        x: Var,
        target: Vec<f64>,
    },
    CrossEntropy {
        x: Var,
        label: usize,
        probs: Vec<f64>,
    },
    BceLogits {
        x: Var,
        targets: Vec<f64>,
    },
    External {
        x: Var,
        grad: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-use recording of one forward pass.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    loaded: BTreeMap<ParamId, Var>,
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (y, dy)
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Numerically stable softmax of a slice.
pub fn softmax_slice(xs: &[f64]) -> Vec<f64> {
    if xs.is_empty() {
        return Vec::new();
    }
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (*n, 1),
        [first, rest @ ..] => (*first, rest.iter().product()),
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            loaded: BTreeMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = match op {
            Op::Param => true,
            Op::Leaf => false,
            _ => parents.iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, &[])
    }

    /// A leaf that receives a gradient without being a registered parameter.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Loads a parameter; repeated loads of the same id return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.loaded.get(&id) {
            return *v;
        }
        let value = self.params.get(id).clone();
        let v = self.push(value, Op::Param, &[]);
        self.loaded.insert(id, v);
        v
    }

    /// Parameters touched by this tape, in id order.
    pub fn loaded_params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.loaded.keys().copied()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.value(a).dims2()?;
        let (k2, m) = self.value(b).dims2()?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![n, k],
                rhs: vec![k2, m],
            });
        }
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let av = ad[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[p * m..(p + 1) * m];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let t = Tensor::new(&[n, m], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor {
            shape: av.shape().to_vec(),
            data,
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    /// `a[n, d] + b[d]`, broadcasting `b` over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, d) = rows_cols(self.shape(a));
        if self.value(b).len() != d {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let bv = self.value(b).data().to_vec();
        let av = self.value(a);
        let data = av
            .data()
            .chunks(d.max(1))
            .flat_map(|row| row.iter().zip(&bv).map(|(x, y)| x + y))
            .collect();
        let t = Tensor {
            shape: av.shape().to_vec(),
            data,
        };
        Ok(self.push(t, Op::AddRow(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let av = self.value(a);
        let t = Tensor {
            shape: av.shape().to_vec(),
            data: av.data().iter().map(|x| x * c).collect(),
        };
        self.push(t, Op::Scale(a, c), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let t = Tensor {
            shape: av.shape().to_vec(),
            data: av.data().iter().map(|&x| gelu_parts(x).0).collect(),
        };
        self.push(t, Op::Gelu(a), &[a])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange { axis, shape });
        }
        let outer: usize = shape[..axis].iter().product();
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        let mut buf = vec![0.0; axis_len];
        for o in 0..outer {
            for i in 0..inner {
                for a in 0..axis_len {
                    buf[a] = xd[(o * axis_len + a) * inner + i];
                }
                let s = softmax_slice(&buf);
                for a in 0..axis_len {
                    out[(o * axis_len + a) * inner + i] = s[a];
                }
            }
        }
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(
            t,
            Op::Softmax {
                x,
                outer,
                axis_len,
                inner,
            },
            &[x],
        ))
    }

    /// Row-wise layer normalisation followed by `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: vec![n, d],
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = g[c] * h + b[c];
            }
        }
        let t = Tensor::new(&[n, d], out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Concatenates 2-D tensors along axis 0 (rows) or 1 (columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Invalid("concat of nothing".into()));
        }
        if axis > 1 {
            return Err(TensorError::AxisOutOfRange {
                axis,
                shape: self.shape(parts[0]).to_vec(),
            });
        }
        let dims: Vec<(usize, usize)> = parts
            .iter()
            .map(|p| self.value(*p).dims2())
            .collect::<Result<_>>()?;
        let (out_shape, data) = if axis == 0 {
            let c = dims[0].1;
            if let Some(bad) = dims.iter().find(|d| d.1 != c) {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: vec![dims[0].0, c],
                    rhs: vec![bad.0, bad.1],
                });
            }
            let data: Vec<f64> = parts
                .iter()
                .flat_map(|p| self.value(*p).data().iter().copied())
                .collect();
            (vec![dims.iter().map(|d| d.0).sum(), c], data)
        } else {
            let r = dims[0].0;
            if let Some(bad) = dims.iter().find(|d| d.0 != r) {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: vec![r, dims[0].1],
                    rhs: vec![bad.0, bad.1],
                });
            }
            let total: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(r * total);
            for row in 0..r {
                for (p, d) in parts.iter().zip(&dims) {
                    data.extend_from_slice(&self.value(*p).data()[row * d.1..(row + 1) * d.1]);
                }
            }
            (vec![r, total], data)
        };
        let t = Tensor::new(&out_shape, data)?;
        Ok(self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Gathers rows by index (embedding lookup, slicing and repetition).
    pub fn rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (n, c) = rows_cols(&shape);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(TensorError::Invalid(format!(
                "row index {bad} out of range for {n} rows"
            )));
        }
        let xd = self.value(x).data();
        let data: Vec<f64> = idx
            .iter()
            .flat_map(|&i| xd[i * c..(i + 1) * c].iter().copied())
            .collect();
        let mut out_shape = shape.clone();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        out_shape[0] = idx.len();
        let t = Tensor::new(&out_shape, data)?;
        Ok(self.push(
            t,
            Op::Rows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (n, c) = self.value(x).dims2()?;
        if start > end || end > c {
            return Err(TensorError::Invalid(format!(
                "column range {start}..{end} out of range for {c} columns"
            )));
        }
        let w = end - start;
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(n * w);
        for r in 0..n {
            data.extend_from_slice(&xd[r * c + start..r * c + end]);
        }
        let t = Tensor::new(&[n, w], data)?;
        Ok(self.push(t, Op::SliceCols { x, start }, &[x]))
    }

    /// Mean over consecutive groups of `group` rows: `[n*group, d] -> [n, d]`.
    pub fn mean_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let (rows, d) = self.value(x).dims2()?;
        if group == 0 || rows % group != 0 {
            return Err(TensorError::Invalid(format!(
                "{rows} rows do not split into groups of {group}"
            )));
        }
        let n = rows / group;
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * d];
        for r in 0..rows {
            let o = r / group;
            for c in 0..d {
                out[o * d + c] += xd[r * d + c];
            }
        }
        out.iter_mut().for_each(|v| *v /= group as f64);
        let t = Tensor::new(&[n, d], out)?;
        Ok(self.push(t, Op::MeanGroups { x, group }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.len().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Scaled dot-product attention over already-projected inputs.
    ///
    /// `q: [nq, d]`, `k, v: [nk, d]`, `d` split into `heads` equal slices.
    /// With no keys the output is all zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (nq, d) = self.value(q).dims2()?;
        let (nk, dk) = self.value(k).dims2()?;
        let (nv, dv) = self.value(v).dims2()?;
        if dk != d || dv != d || nv != nk {
            return Err(TensorError::ShapeMismatch {
                op: "attention",
                lhs: vec![nq, d],
                rhs: vec![nk, dk, nv, dv],
            });
        }
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Invalid(format!(
                "feature width {d} not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut probs = vec![0.0; heads * nq * nk];
        let mut out = vec![0.0; nq * d];
        let mut scores = vec![0.0; nk];
        if nk > 0 {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..nq {
                    let qi = &qd[i * d + off..i * d + off + dh];
                    let mut mx = f64::NEG_INFINITY;
                    for (j, s) in scores.iter_mut().enumerate() {
                        let kj = &kd[j * d + off..j * d + off + dh];
                        *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                        mx = mx.max(*s);
                    }
                    let mut tot = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - mx).exp();
                        tot += *s;
                    }
                    let prow = &mut probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                    let orow = &mut out[i * d + off..i * d + off + dh];
                    for (j, s) in scores.iter().enumerate() {
                        let p = s / tot;
                        prow[j] = p;
                        let vj = &vd[j * d + off..j * d + off + dh];
                        for (o, vv) in orow.iter_mut().zip(vj) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }
        let t = Tensor::new(&[nq, d], out)?;
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Sum of smooth-L1 (Huber with transition `beta`) against a constant target.
    pub fn smooth_l1(&mut self, x: Var, target: &[f64], beta: f64) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != target.len() {
            return Err(TensorError::ShapeMismatch {
                op: "smooth_l1",
                lhs: xv.shape().to_vec(),
                rhs: vec![target.len()],
            });
        }
        let s = xv
            .data()
            .iter()
            .zip(target)
            .map(|(a, b)| {
                let d = (a - b).abs();
                if d < beta {
                    0.5 * d * d / beta
                } else {
                    d - 0.5 * beta
                }
            })
            .sum();
        Ok(self.push(
            Tensor::scalar(s),
            Op::SmoothL1 {
                x,
                target: target.to_vec(),
                beta,
            },
            &[x],
        ))
    }

    /// Sum of absolute differences against a constant target.
    pub fn l1(&mut self, x: Var, target: &[f64]) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != target.len() {
            return Err(TensorError::ShapeMismatch {
                op: "l1",
                lhs: xv.shape().to_vec(),
                rhs: vec![target.len()],
            });
        }
        let s = xv.data().iter().zip(target).map(|(a, b)| (a - b).abs()).sum();
        Ok(self.push(
            Tensor::scalar(s),
            Op::L1 {
                x,
                target: target.to_vec(),
            },
            &[x],
        ))
    }

    /// `-log softmax(logits)[label]` for a flat logit vector.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let xd = self.value(logits).data();
        if label >= xd.len() {
            return Err(TensorError::Invalid(format!(
                "label {label} out of range for {} logits",
                xd.len()
            )));
        }
        let loss = log_sum_exp(xd) - xd[label];
        let probs = softmax_slice(xd);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                x: logits,
                label,
                probs,
            },
            &[logits],
        ))
    }

    /// Sum of binary cross-entropy between `sigmoid(x)` and `targets`.
    pub fn bce_with_logits(&mut self, x: Var, targets: &[f64]) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "bce_with_logits",
                lhs: xv.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        // max(x,0) - x*t + log(1 + exp(-|x|))
        let s = xv
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        Ok(self.push(
            Tensor::scalar(s),
            Op::BceLogits {
                x,
                targets: targets.to_vec(),
            },
            &[x],
        ))
    }

    /// A scalar computed outside the tape, with its gradient w.r.t. `x`
    /// supplied by the caller.
    pub fn external(&mut self, x: Var, value: f64, grad: Vec<f64>) -> Result<Var> {
        if grad.len() != self.value(x).len() {
            return Err(TensorError::ShapeMismatch {
                op: "external",
                lhs: self.shape(x).to_vec(),
                rhs: vec![grad.len()],
            });
        }
        Ok(self.push(Tensor::scalar(value), Op::External { x, grad }, &[x]))
    }

    /// Weighted sum of scalar vars.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(v, w) in terms {
            let s = self.scale(v, w);
            acc = Some(match acc {
                None => s,
                Some(a) => self.add(a, s)?,
            });
        }
        acc.ok_or_else(|| TensorError::Invalid("empty weighted sum".into()))
    }

    /// Reverse sweep from a scalar `loss`. Returns gradients for every
    /// parameter loaded on this tape (zeros elsewhere) and the raw gradient
    /// of each recorded node via [`Backward`].
    pub fn backward(&self, loss: Var) -> Result<Backward> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        let mut param_grads = Grads::zeros_like(self.params);
        for (&id, &v) in &self.loaded {
            if let Some(g) = &grads[v.0] {
                param_grads.get_mut(id).copy_from_slice(g);
            }
        }
        Ok(Backward {
            nodes: grads,
            params: param_grads,
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (n, k) = rows_cols(val(*a).shape());
                let m = val(*b).shape()[1];
                let ad = val(*a).data();
                let bd = val(*b).data();
                if wants(*a) {
                    acc(*a, &mut |ga| {
                        for i in 0..n {
                            let grow = &g[i * m..(i + 1) * m];
                            for p in 0..k {
                                let brow = &bd[p * m..(p + 1) * m];
                                ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    });
                }
                if wants(*b) {
                    acc(*b, &mut |gb| {
                        for i in 0..n {
                            let grow = &g[i * m..(i + 1) * m];
                            for p in 0..k {
                                let av = ad[i * k + p];
                                if av == 0.0 {
                                    continue;
                                }
                                for (o, gv) in gb[p * m..(p + 1) * m].iter_mut().zip(grow) {
                                    *o += av * gv;
                                }
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let ad = val(*a).data();
                let bd = val(*b).data();
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bd[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * ad[i];
                    }
                });
            }
            Op::AddRow(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |gb| {
                    let d = gb.len().max(1);
                    for row in g.chunks(d) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Scale(a, c) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y));
            }
            Op::Gelu(a) => {
                let ad = val(*a).data();
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * gelu_parts(ad[i]).1;
                    }
                });
            }
            Op::Softmax {
                x,
                outer,
                axis_len,
                inner,
            } => {
                let y = node.value.data();
                acc(*x, &mut |gx| {
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let at = |a: usize| (o * axis_len + a) * inner + i;
                            let dot: f64 = (0..*axis_len).map(|a| g[at(a)] * y[at(a)]).sum();
                            for a in 0..*axis_len {
                                gx[at(a)] += y[at(a)] * (g[at(a)] - dot);
                            }
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
                let d = val(*gamma).len();
                let n = inv_std.len();
                let gd = val(*gamma).data();
                acc(*gamma, &mut |gg| {
                    for r in 0..n {
                        for c in 0..d {
                            gg[c] += g[r * d + c] * xhat[r * d + c];
                        }
                    }
                });
                acc(*beta, &mut |gb| {
                    for r in 0..n {
                        for c in 0..d {
                            gb[c] += g[r * d + c];
                        }
                    }
                });
                acc(*x, &mut |gx| {
                    for r in 0..n {
                        let dxhat: Vec<f64> = (0..d).map(|c| g[r * d + c] * gd[c]).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dx = (0..d).map(|c| dxhat[c] * xhat[r * d + c]).sum::<f64>() / d as f64;
                        for c in 0..d {
                            gx[r * d + c] +=
                                inv_std[r] * (dxhat[c] - mean_d - xhat[r * d + c] * mean_dx);
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                if *axis == 0 {
                    let mut off = 0;
                    for p in parts {
                        let len = val(*p).len();
                        acc(*p, &mut |gp| {
                            gp.iter_mut().zip(&g[off..off + len]).for_each(|(x, y)| *x += y)
                        });
                        off += len;
                    }
                } else {
                    let rows = node.value.shape()[0];
                    let total = node.value.shape()[1];
                    let mut col = 0;
                    for p in parts {
                        let w = val(*p).shape()[1];
                        acc(*p, &mut |gp| {
                            for r in 0..rows {
                                for c in 0..w {
                                    gp[r * w + c] += g[r * total + col + c];
                                }
                            }
                        });
                        col += w;
                    }
                }
            }
            Op::Rows { x, idx } => {
                let (_, c) = rows_cols(val(*x).shape());
                acc(*x, &mut |gx| {
                    for (o, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            gx[i * c + j] += g[o * c + j];
                        }
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let (n, c) = rows_cols(val(*x).shape());
                let w = node.value.shape()[1];
                acc(*x, &mut |gx| {
                    for r in 0..n {
                        for j in 0..w {
                            gx[r * c + start + j] += g[r * w + j];
                        }
                    }
                });
            }
            Op::MeanGroups { x, group } => {
                let d = node.value.shape()[1];
                acc(*x, &mut |gx| {
                    let rows = gx.len() / d.max(1);
                    for r in 0..rows {
                        let o = r / group;
                        for c in 0..d {
                            gx[r * d + c] += g[o * d + c] / *group as f64;
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += b));
            }
            Op::Sum(x) => {
                acc(*x, &mut |gx| gx.iter_mut().for_each(|a| *a += g[0]));
            }
            Op::Mean(x) => {
                let n = val(*x).len().max(1) as f64;
                acc(*x, &mut |gx| gx.iter_mut().for_each(|a| *a += g[0] / n));
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (nq, d) = rows_cols(val(*q).shape());
                let (nk, _) = rows_cols(val(*k).shape());
                if nk == 0 {
                    return;
                }
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let qd = val(*q).data();
                let kd = val(*k).data();
                let vd = val(*v).data();
                let mut gq = vec![0.0; nq * d];
                let mut gk = vec![0.0; nk * d];
                let mut gv = vec![0.0; nk * d];
                let mut dp = vec![0.0; nk];
                for h in 0..*heads {
                    let off = h * dh;
                    for i in 0..nq {
                        let gi = &g[i * d + off..i * d + off + dh];
                        let prow = &probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                        let mut dot = 0.0;
                        for j in 0..nk {
                            let vj = &vd[j * d + off..j * d + off + dh];
                            dp[j] = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                            dot += dp[j] * prow[j];
                            let gvj = &mut gv[j * d + off..j * d + off + dh];
                            for (o, gg) in gvj.iter_mut().zip(gi) {
                                *o += prow[j] * gg;
                            }
                        }
                        for j in 0..nk {
                            let ds = prow[j] * (dp[j] - dot) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            for c in 0..dh {
                                gq[i * d + off + c] += ds * kd[j * d + off + c];
                                gk[j * d + off + c] += ds * qd[i * d + off + c];
                            }
                        }
                    }
                }
                acc(*q, &mut |x| x.iter_mut().zip(&gq).for_each(|(a, b)| *a += b));
                acc(*k, &mut |x| x.iter_mut().zip(&gk).for_each(|(a, b)| *a += b));
                acc(*v, &mut |x| x.iter_mut().zip(&gv).for_each(|(a, b)| *a += b));
            }
            Op::SmoothL1 { x, target, beta } => {
                let xd = val(*x).data();
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        let d = xd[i] - target[i];
                        let dd = if d.abs() < *beta { d / beta } else { d.signum() };
                        gx[i] += g[0] * dd;
                    }
                });
            }
            Op::L1 { x, target } => {
                let xd = val(*x).data();
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        let d = xd[i] - target[i];
                        let s = if d > 0.0 {
                            1.0
                        } else if d < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        gx[i] += g[0] * s;
                    }
                });
            }
            Op::CrossEntropy { x, label, probs } => {
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        let t = if i == *label { 1.0 } else { 0.0 };
                        gx[i] += g[0] * (probs[i] - t);
                    }
                });
            }
            Op::BceLogits { x, targets } => {
                let xd = val(*x).data();
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        let s = 1.0 / (1.0 + (-xd[i]).exp());
                        gx[i] += g[0] * (s - targets[i]);
                    }
                });
            }
            Op::External { x, grad } => {
                acc(*x, &mut |gx| {
                    gx.iter_mut().zip(grad).for_each(|(a, b)| *a += g[0] * b)
                });
            }
        }
    }
}

/// Result of a reverse sweep.
pub struct Backward {
    nodes: Vec<Option<Vec<f64>>>,
    params: Grads,
}

impl Backward {
    /// Gradient of the loss w.r.t. a recorded node, if any flowed into it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].as_deref()
    }

    pub fn param_grads(&self) -> &Grads {
        &self.params
    }

    pub fn into_param_grads(self) -> Grads {
        self.params
    }
}
