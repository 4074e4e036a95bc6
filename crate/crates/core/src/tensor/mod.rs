//! Dense row-major tensors with define-by-run reverse-mode differentiation.
//!
//! Every forward operation appends a node to a [`Tape`]; [`Tape::backward`]
//! walks the tape in reverse and accumulates gradients into every node that
//! requires them. Tensors are cheap `Copy` handles into the tape, so a graph
//! lives exactly as long as the tape that owns it. A fresh tape is built for
//! every training step.
//!
//! The element type is generic over [`Scalar`]: training uses `f32`, gradient
//! checking uses `f64`.

mod attention;
mod gradcheck;
mod scalar;

use std::cell::{Ref, RefCell};
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

pub use attention::{AttentionLayout, Segment};
pub use gradcheck::{check_gradients, GradCheckReport, ParamSpec, GRAD_FLOOR};
pub use scalar::Scalar;

/// Multiplier applied to gradients flowing back through [`Tensor::grad_reverse`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct GradScale(f64);

impl GradScale {
    pub fn new(lambda: f64) -> Result<Self> {
        ensure!(
            lambda.is_finite() && lambda >= 0.0,
            Config,
            "gradient reversal scale must be finite and >= 0, got {lambda}"
        );
        Ok(Self(lambda))
    }

    pub fn lambda(self) -> f64 {
        self.0
    }
}

impl Default for GradScale {
    fn default() -> Self {
        Self(1.0)
    }
}

impl TryFrom<f64> for GradScale {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<GradScale> for f64 {
    fn from(g: GradScale) -> f64 {
        g.0
    }
}

pub(crate) type NodeId = usize;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        c: T,
    },
    Relu {
        x: NodeId,
    },
    Sum {
        x: NodeId,
    },
    Mean {
        x: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax {
        x: NodeId,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    ProbNll {
        p: NodeId,
        targets: Vec<usize>,
        eps: T,
    },
    ProbNegLogComplement {
        p: NodeId,
        targets: Vec<usize>,
        eps: T,
    },
    KlToUniform {
        p: NodeId,
    },
    GradReverse {
        x: NodeId,
        lambda: T,
    },
    Dropout {
        x: NodeId,
        mask: Vec<T>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        layout: AttentionLayout,
        probs: Vec<T>,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
    op: Op<T>,
}

/// Arena holding one computation graph.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.len()).finish()
    }
}

/// Handle to one node of a [`Tape`].
#[derive(Clone, Copy)]
pub struct Tensor<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: NodeId,
}

impl<T: Scalar> fmt::Debug for Tensor<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(
        &self,
        shape: Vec<usize>,
        data: Vec<T>,
        requires_grad: bool,
        op: Op<T>,
    ) -> Tensor<'_, T> {
        debug_assert_eq!(numel(&shape), data.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            data,
            requires_grad,
            grad: None,
            op,
        });
        Tensor {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Leaf tensor. Panics if `data.len()` disagrees with `shape`.
    pub fn leaf(&self, data: Vec<T>, shape: &[usize], requires_grad: bool) -> Tensor<'_, T> {
        assert_eq!(
            numel(shape),
            data.len(),
            "leaf data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        self.push(shape.to_vec(), data, requires_grad, Op::Leaf)
    }

    pub fn param(&self, data: Vec<T>, shape: &[usize]) -> Tensor<'_, T> {
        self.leaf(data, shape, true)
    }

    pub fn constant(&self, data: Vec<T>, shape: &[usize]) -> Tensor<'_, T> {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&self, v: T) -> Tensor<'_, T> {
        self.leaf(vec![v], &[], false)
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn embedding<'t>(&'t self, table: Tensor<'t, T>, ids: &[usize]) -> Result<Tensor<'t, T>> {
        let (rows, dim) = table.dims2()?;
        let mut out = Vec::with_capacity(ids.len() * dim);
        {
            let data = table.data();
            for &id in ids {
                ensure!(
                    id < rows,
                    Input,
                    "embedding id {id} out of range for table with {rows} rows"
                );
                out.extend_from_slice(&data[id * dim..(id + 1) * dim]);
            }
        }
        let rg = table.requires_grad();
        Ok(self.push(
            vec![ids.len(), dim],
            out,
            rg,
            Op::Embedding {
                table: table.id,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Reverse pass from a scalar `loss`. Gradients accumulate into any
    /// gradients already stored on the tape.
    pub fn backward(&self, loss: Tensor<'_, T>) -> Result<()> {
        ensure!(
            std::ptr::eq(loss.tape, self),
            Contract,
            "loss tensor belongs to a different tape"
        );
        let n = loss.numel();
        ensure!(
            n == 1,
            Contract,
            "backward needs a scalar loss, got shape {:?}",
            loss.shape()
        );
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        {
            let nodes = self.nodes.borrow();
            grads.resize_with(loss.id + 1, || None);
            if !nodes[loss.id].requires_grad {
                return Ok(());
            }
            grads[loss.id] = Some(vec![T::one()]);
            for id in (0..=loss.id).rev() {
                let Some(g) = grads[id].take() else { continue };
                backprop_node(&nodes, id, &g, &mut grads);
                grads[id] = Some(g);
            }
        }
        let mut nodes = self.nodes.borrow_mut();
        for (node, g) in nodes.iter_mut().zip(grads) {
            let Some(g) = g else { continue };
            if !node.requires_grad {
                continue;
            }
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }
}

impl<'t, T: Scalar> Tensor<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn data(&self) -> Ref<'t, [T]> {
        Ref::map(self.tape.nodes.borrow(), |n| n[self.id].data.as_slice())
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data().to_vec()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        let d = self.data();
        assert_eq!(d.len(), 1, "item() on a tensor with {} elements", d.len());
        d[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.tape.nodes.borrow()[self.id].grad.clone()
    }

    fn dims2(&self) -> Result<(usize, usize)> {
        let s = self.shape();
        ensure!(
            s.len() == 2,
            Contract,
            "expected a rank-2 tensor, got shape {s:?}"
        );
        Ok((s[0], s[1]))
    }

    fn same_tape(&self, other: &Tensor<'t, T>) -> Result<()> {
        ensure!(
            std::ptr::eq(self.tape, other.tape),
            Contract,
            "tensors belong to different tapes"
        );
        Ok(())
    }

    fn rg_any(ts: &[&Tensor<'t, T>]) -> bool {
        ts.iter().any(|t| t.requires_grad())
    }

    /// `x · wᵀ + b` with `x: [m, k]`, `w: [n, k]`, `b: [n]`.
    pub fn linear(&self, w: Tensor<'t, T>, b: Option<Tensor<'t, T>>) -> Result<Tensor<'t, T>> {
        self.same_tape(&w)?;
        let (m, k) = self.dims2()?;
        let (n, k2) = w.dims2()?;
        ensure!(
            k == k2,
            Contract,
            "linear: input width {k} vs weight width {k2}"
        );
        let mut out = vec![T::zero(); m * n];
        {
            let x = self.data();
            let wd = w.data();
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &x,
                (k, 1),
                &wd,
                (1, k),
                T::zero(),
                &mut out,
                (n, 1),
            );
        }
        if let Some(b) = &b {
            self.same_tape(b)?;
            ensure!(
                b.shape() == [n],
                Contract,
                "linear: bias shape {:?} vs {n}",
                b.shape()
            );
            let bd = b.data();
            for row in out.chunks_mut(n) {
                row.iter_mut().zip(bd.iter()).for_each(|(o, &bv)| *o += bv);
            }
        }
        let mut rg = Self::rg_any(&[self, &w]);
        if let Some(b) = &b {
            rg |= b.requires_grad();
        }
        Ok(self.tape.push(
            vec![m, n],
            out,
            rg,
            Op::Linear {
                x: self.id,
                w: w.id,
                b: b.map(|b| b.id),
            },
        ))
    }

    /// Plain matrix product `[m, k] · [k, n]`.
    pub fn matmul(&self, other: Tensor<'t, T>) -> Result<Tensor<'t, T>> {
        self.same_tape(&other)?;
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        ensure!(k == k2, Contract, "matmul: inner dimensions {k} vs {k2}");
        let mut out = vec![T::zero(); m * n];
        {
            let a = self.data();
            let b = other.data();
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &a,
                (k, 1),
                &b,
                (n, 1),
                T::zero(),
                &mut out,
                (n, 1),
            );
        }
        let rg = Self::rg_any(&[self, &other]);
        Ok(self.tape.push(
            vec![m, n],
            out,
            rg,
            Op::MatMul {
                a: self.id,
                b: other.id,
            },
        ))
    }

    fn zip_same(&self, other: &Tensor<'t, T>, what: &str, f: impl Fn(T, T) -> T) -> Result<Vec<T>> {
        self.same_tape(other)?;
        let (sa, sb) = (self.shape(), other.shape());
        ensure!(sa == sb, Contract, "{what}: shape {sa:?} vs {sb:?}");
        let a = self.data();
        let b = other.data();
        Ok(a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect())
    }

    pub fn add(&self, other: Tensor<'t, T>) -> Result<Tensor<'t, T>> {
        let out = self.zip_same(&other, "add", |a, b| a + b)?;
        let rg = Self::rg_any(&[self, &other]);
        Ok(self.tape.push(
            self.shape(),
            out,
            rg,
            Op::Add {
                a: self.id,
                b: other.id,
            },
        ))
    }

    pub fn mul(&self, other: Tensor<'t, T>) -> Result<Tensor<'t, T>> {
        let out = self.zip_same(&other, "mul", |a, b| a * b)?;
        let rg = Self::rg_any(&[self, &other]);
        Ok(self.tape.push(
            self.shape(),
            out,
            rg,
            Op::Mul {
                a: self.id,
                b: other.id,
            },
        ))
    }

    pub fn scale(&self, c: T) -> Tensor<'t, T> {
        let out = self.data().iter().map(|&x| x * c).collect();
        self.tape.push(
            self.shape(),
            out,
            self.requires_grad(),
            Op::Scale { x: self.id, c },
        )
    }

    pub fn relu(&self) -> Tensor<'t, T> {
        let out = self
            .data()
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        self.tape.push(
            self.shape(),
            out,
            self.requires_grad(),
            Op::Relu { x: self.id },
        )
    }

    pub fn sum(&self) -> Tensor<'t, T> {
        let s = self.data().iter().fold(T::zero(), |a, &b| a + b);
        self.tape.push(
            vec![],
            vec![s],
            self.requires_grad(),
            Op::Sum { x: self.id },
        )
    }

    pub fn mean(&self) -> Tensor<'t, T> {
        let n = self.numel();
        let s = self.data().iter().fold(T::zero(), |a, &b| a + b);
        let m = if n == 0 {
            T::zero()
        } else {
            s / T::from_usize(n).unwrap()
        };
        self.tape.push(
            vec![],
            vec![m],
            self.requires_grad(),
            Op::Mean { x: self.id },
        )
    }

    /// Normalizes the last dimension to zero mean and unit variance, then
    /// applies `gain * x̂ + bias`.
    pub fn layer_norm(
        &self,
        gain: Tensor<'t, T>,
        bias: Tensor<'t, T>,
        eps: T,
    ) -> Result<Tensor<'t, T>> {
        self.same_tape(&gain)?;
        self.same_tape(&bias)?;
        let shape = self.shape();
        ensure!(!shape.is_empty(), Contract, "layer_norm on a scalar");
        let d = *shape.last().unwrap();
        ensure!(
            gain.shape() == [d] && bias.shape() == [d],
            Contract,
            "layer_norm: gain {:?} / bias {:?} must both be [{d}]",
            gain.shape(),
            bias.shape()
        );
        let rows = self.numel() / d.max(1);
        let dt = T::from_usize(d).unwrap();
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        {
            let x = self.data();
            let g = gain.data();
            let b = bias.data();
            for r in 0..rows {
                let row = &x[r * d..(r + 1) * d];
                let mean = row.iter().fold(T::zero(), |a, &v| a + v) / dt;
                let var = row
                    .iter()
                    .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
                    / dt;
                let rs = T::one() / (var + eps).sqrt();
                rstd[r] = rs;
                for c in 0..d {
                    let xh = (row[c] - mean) * rs;
                    xhat[r * d + c] = xh;
                    out[r * d + c] = g[c] * xh + b[c];
                }
            }
        }
        let rg = Self::rg_any(&[self, &gain, &bias]);
        Ok(self.tape.push(
            shape,
            out,
            rg,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                rstd,
            },
        ))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<'t, T>> {
        let shape = self.shape();
        ensure!(
            axis < shape.len(),
            Contract,
            "softmax axis {axis} invalid for shape {shape:?}"
        );
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = self.to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..len {
                    mx = mx.max(out[idx(j)]);
                }
                let mut z = T::zero();
                for j in 0..len {
                    let e = (out[idx(j)] - mx).exp();
                    out[idx(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[idx(j)] /= z;
                }
            }
        }
        Ok(self.tape.push(
            shape,
            out,
            self.requires_grad(),
            Op::Softmax {
                x: self.id,
                outer,
                len,
                inner,
            },
        ))
    }

    /// Mean token cross-entropy of `logits: [rows, classes]` against class ids.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Tensor<'t, T>> {
        let (rows, classes) = self.dims2()?;
        ensure!(
            rows == targets.len(),
            Contract,
            "cross_entropy: {rows} rows vs {} targets",
            targets.len()
        );
        ensure!(rows > 0, Input, "cross_entropy over zero rows");
        let mut probs = vec![T::zero(); rows * classes];
        let mut total = T::zero();
        {
            let x = self.data();
            for r in 0..rows {
                let t = targets[r];
                ensure!(
                    t < classes,
                    Input,
                    "target {t} out of range for {classes} classes"
                );
                let row = &x[r * classes..(r + 1) * classes];
                let mx = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
                let mut z = T::zero();
                for (c, &v) in row.iter().enumerate() {
                    let e = (v - mx).exp();
                    probs[r * classes + c] = e;
                    z += e;
                }
                for c in 0..classes {
                    probs[r * classes + c] /= z;
                }
                total += z.ln() + mx - row[t];
            }
        }
        let loss = total / T::from_usize(rows).unwrap();
        Ok(self.tape.push(
            vec![],
            vec![loss],
            self.requires_grad(),
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    fn prob_rows(&self, targets: Option<&[usize]>) -> Result<(usize, usize)> {
        let (rows, classes) = self.dims2()?;
        if let Some(t) = targets {
            ensure!(
                t.len() == rows,
                Contract,
                "{rows} rows vs {} labels",
                t.len()
            );
            for &y in t {
                ensure!(
                    y < classes,
                    Input,
                    "label {y} out of range for {classes} classes"
                );
            }
        }
        ensure!(rows > 0, Input, "loss over zero rows");
        Ok((rows, classes))
    }

    /// Mean over rows of `-log(max(p[target], eps))` for a row-stochastic input.
    pub fn prob_nll(&self, targets: &[usize], eps: T) -> Result<Tensor<'t, T>> {
        let (rows, classes) = self.prob_rows(Some(targets))?;
        let total = {
            let p = self.data();
            (0..rows).fold(T::zero(), |acc, r| {
                acc - p[r * classes + targets[r]].max(eps).ln()
            })
        };
        let v = total / T::from_usize(rows).unwrap();
        Ok(self.tape.push(
            vec![],
            vec![v],
            self.requires_grad(),
            Op::ProbNll {
                p: self.id,
                targets: targets.to_vec(),
                eps,
            },
        ))
    }

    /// Mean over rows of `-log(max(1 - p[target], eps))`.
    pub fn prob_neg_log_complement(&self, targets: &[usize], eps: T) -> Result<Tensor<'t, T>> {
        let (rows, classes) = self.prob_rows(Some(targets))?;
        let total = {
            let p = self.data();
            (0..rows).fold(T::zero(), |acc, r| {
                acc - (T::one() - p[r * classes + targets[r]]).max(eps).ln()
            })
        };
        let v = total / T::from_usize(rows).unwrap();
        Ok(self.tape.push(
            vec![],
            vec![v],
            self.requires_grad(),
            Op::ProbNegLogComplement {
                p: self.id,
                targets: targets.to_vec(),
                eps,
            },
        ))
    }

    /// Mean over rows of `KL(p ‖ uniform) = Σ_c p_c ln(p_c · N)`, with `0 ln 0 = 0`.
    pub fn kl_to_uniform(&self) -> Result<Tensor<'t, T>> {
        let (rows, classes) = self.prob_rows(None)?;
        let n = T::from_usize(classes).unwrap();
        // Terms are summed in sorted order within each row, so relabeling
        // classes leaves the value bit-identical.
        let total = {
            let p = self.data();
            let mut terms = Vec::with_capacity(classes);
            p.chunks(classes).fold(T::zero(), |acc, row| {
                terms.clear();
                terms.extend(
                    row.iter()
                        .filter(|&&pc| pc > T::zero())
                        .map(|&pc| pc * (pc * n).ln()),
                );
                terms.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
                acc + terms.iter().fold(T::zero(), |a, &t| a + t)
            })
        };
        let v = total / T::from_usize(rows).unwrap();
        Ok(self.tape.push(
            vec![],
            vec![v],
            self.requires_grad(),
            Op::KlToUniform { p: self.id },
        ))
    }

    /// Identity forward; multiplies the incoming gradient by `-lambda` backward.
    pub fn grad_reverse(&self, scale: GradScale) -> Tensor<'t, T> {
        let lambda = T::from_f64(scale.lambda()).unwrap();
        self.tape.push(
            self.shape(),
            self.to_vec(),
            self.requires_grad(),
            Op::GradReverse { x: self.id, lambda },
        )
    }

    /// Copy of this value with no path back into the graph.
    pub fn detach(&self) -> Tensor<'t, T> {
        self.tape.push(self.shape(), self.to_vec(), false, Op::Leaf)
    }

    /// Inverted dropout. `rate == 0` returns `self` unchanged.
    pub fn dropout<R: Rng + ?Sized>(&self, rate: f64, rng: &mut R) -> Result<Tensor<'t, T>> {
        ensure!(
            (0.0..1.0).contains(&rate),
            Config,
            "dropout rate {rate} not in [0, 1)"
        );
        if rate == 0.0 {
            return Ok(*self);
        }
        let keep = T::from_f64(1.0 / (1.0 - rate)).unwrap();
        let n = self.numel();
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let out = self
            .data()
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m)
            .collect();
        Ok(self.tape.push(
            self.shape(),
            out,
            self.requires_grad(),
            Op::Dropout { x: self.id, mask },
        ))
    }
}

fn accumulate<T: Scalar>(
    grads: &mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    id: NodeId,
    f: impl FnOnce(&mut [T]),
) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![T::zero(); nodes[id].data.len()]);
    f(slot);
}

fn backprop_node<T: Scalar>(nodes: &[Node<T>], id: NodeId, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &nodes[id];
    match &node.op {
        Op::Leaf => {}
        Op::Linear { x, w, b } => {
            let (m, k) = (nodes[*x].shape[0], nodes[*x].shape[1]);
            let n = nodes[*w].shape[0];
            accumulate(grads, nodes, *x, |dx| {
                T::gemm(
                    m,
                    n,
                    k,
                    T::one(),
                    g,
                    (n, 1),
                    &nodes[*w].data,
                    (k, 1),
                    T::one(),
                    dx,
                    (k, 1),
                );
            });
            accumulate(grads, nodes, *w, |dw| {
                T::gemm(
                    n,
                    m,
                    k,
                    T::one(),
                    g,
                    (1, n),
                    &nodes[*x].data,
                    (k, 1),
                    T::one(),
                    dw,
                    (k, 1),
                );
            });
            if let Some(b) = b {
                accumulate(grads, nodes, *b, |db| {
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                });
            }
        }
        Op::MatMul { a, b } => {
            let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            let n = nodes[*b].shape[1];
            accumulate(grads, nodes, *a, |da| {
                T::gemm(
                    m,
                    n,
                    k,
                    T::one(),
                    g,
                    (n, 1),
                    &nodes[*b].data,
                    (1, n),
                    T::one(),
                    da,
                    (k, 1),
                );
            });
            accumulate(grads, nodes, *b, |db| {
                T::gemm(
                    k,
                    m,
                    n,
                    T::one(),
                    &nodes[*a].data,
                    (1, k),
                    g,
                    (n, 1),
                    T::one(),
                    db,
                    (n, 1),
                );
            });
        }
        Op::Add { a, b } => {
            for src in [*a, *b] {
                accumulate(grads, nodes, src, |d| {
                    d.iter_mut().zip(g).for_each(|(d, &v)| *d += v)
                });
            }
        }
        Op::Mul { a, b } => {
            let (da_src, db_src) = (&nodes[*b].data, &nodes[*a].data);
            accumulate(grads, nodes, *a, |d| {
                for ((d, &gv), &o) in d.iter_mut().zip(g).zip(da_src) {
                    *d += gv * o;
                }
            });
            accumulate(grads, nodes, *b, |d| {
                for ((d, &gv), &o) in d.iter_mut().zip(g).zip(db_src) {
                    *d += gv * o;
                }
            });
        }
        Op::Scale { x, c } => {
            accumulate(grads, nodes, *x, |d| {
                d.iter_mut().zip(g).for_each(|(d, &v)| *d += v * *c)
            });
        }
        Op::Relu { x } => {
            let xd = &nodes[*x].data;
            accumulate(grads, nodes, *x, |d| {
                for ((d, &gv), &xv) in d.iter_mut().zip(g).zip(xd) {
                    if xv > T::zero() {
                        *d += gv;
                    }
                }
            });
        }
        Op::Sum { x } => {
            accumulate(grads, nodes, *x, |d| d.iter_mut().for_each(|d| *d += g[0]));
        }
        Op::Mean { x } => {
            let n = T::from_usize(nodes[*x].data.len().max(1)).unwrap();
            accumulate(grads, nodes, *x, |d| {
                d.iter_mut().for_each(|d| *d += g[0] / n)
            });
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let d = nodes[*gain].data.len();
            let rows = rstd.len();
            let gd = &nodes[*gain].data;
            accumulate(grads, nodes, *gain, |dg| {
                for r in 0..rows {
                    for c in 0..d {
                        dg[c] += g[r * d + c] * xhat[r * d + c];
                    }
                }
            });
            accumulate(grads, nodes, *bias, |db| {
                for r in 0..rows {
                    for c in 0..d {
                        db[c] += g[r * d + c];
                    }
                }
            });
            let dt = T::from_usize(d).unwrap();
            accumulate(grads, nodes, *x, |dx| {
                for r in 0..rows {
                    let mut mean_dxh = T::zero();
                    let mut mean_dxh_xh = T::zero();
                    for c in 0..d {
                        let dxh = g[r * d + c] * gd[c];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xhat[r * d + c];
                    }
                    mean_dxh /= dt;
                    mean_dxh_xh /= dt;
                    for c in 0..d {
                        let dxh = g[r * d + c] * gd[c];
                        dx[r * d + c] += rstd[r] * (dxh - mean_dxh - xhat[r * d + c] * mean_dxh_xh);
                    }
                }
            });
        }
        Op::Softmax {
            x,
            outer,
            len,
            inner,
        } => {
            let y = &node.data;
            accumulate(grads, nodes, *x, |dx| {
                for o in 0..*outer {
                    for i in 0..*inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot = (0..*len).fold(T::zero(), |a, j| a + g[idx(j)] * y[idx(j)]);
                        for j in 0..*len {
                            dx[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
            });
        }
        Op::Embedding { table, ids } => {
            let dim = nodes[*table].shape[1];
            accumulate(grads, nodes, *table, |dt| {
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut dt[id * dim..(id + 1) * dim];
                    dst.iter_mut()
                        .zip(&g[r * dim..(r + 1) * dim])
                        .for_each(|(d, &v)| *d += v);
                }
            });
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let rows = targets.len();
            let classes = probs.len() / rows;
            let scale = g[0] / T::from_usize(rows).unwrap();
            accumulate(grads, nodes, *logits, |dx| {
                for r in 0..rows {
                    for c in 0..classes {
                        dx[r * classes + c] += probs[r * classes + c] * scale;
                    }
                    dx[r * classes + targets[r]] -= scale;
                }
            });
        }
        Op::ProbNll { p, targets, eps } => {
            let rows = targets.len();
            let classes = nodes[*p].shape[1];
            let pd = &nodes[*p].data;
            let scale = g[0] / T::from_usize(rows).unwrap();
            accumulate(grads, nodes, *p, |dp| {
                for r in 0..rows {
                    let i = r * classes + targets[r];
                    if pd[i] > *eps {
                        dp[i] -= scale / pd[i];
                    }
                }
            });
        }
        Op::ProbNegLogComplement { p, targets, eps } => {
            let rows = targets.len();
            let classes = nodes[*p].shape[1];
            let pd = &nodes[*p].data;
            let scale = g[0] / T::from_usize(rows).unwrap();
            accumulate(grads, nodes, *p, |dp| {
                for r in 0..rows {
                    let i = r * classes + targets[r];
                    let q = T::one() - pd[i];
                    if q > *eps {
                        dp[i] += scale / q;
                    }
                }
            });
        }
        Op::KlToUniform { p } => {
            let (rows, classes) = (nodes[*p].shape[0], nodes[*p].shape[1]);
            let n = T::from_usize(classes).unwrap();
            let pd = &nodes[*p].data;
            let scale = g[0] / T::from_usize(rows).unwrap();
            let tiny = T::min_positive_value();
            accumulate(grads, nodes, *p, |dp| {
                for (d, &pc) in dp.iter_mut().zip(pd) {
                    *d += scale * ((pc.max(tiny) * n).ln() + T::one());
                }
            });
        }
        Op::GradReverse { x, lambda } => {
            accumulate(grads, nodes, *x, |d| {
                d.iter_mut().zip(g).for_each(|(d, &v)| *d += -(*lambda * v));
            });
        }
        Op::Dropout { x, mask } => {
            accumulate(grads, nodes, *x, |d| {
                for ((d, &gv), &m) in d.iter_mut().zip(g).zip(mask) {
                    *d += gv * m;
                }
            });
        }
        Op::Attention {
            q,
            k,
            v,
            layout,
            probs,
        } => {
            attention::backward(nodes, grads, g, (*q, *k, *v), layout, probs);
        }
    }
}
