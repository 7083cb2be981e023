//! Wengert-list reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! the forward value, the indices of its parent nodes, and a backward closure
//! that maps the node's output gradient to gradients for each parent.
//! [`Tape::backward`] walks the list once in reverse index order — which is a
//! valid topological order because every node is appended after its parents —
//! accumulating gradients additively so fan-out (a value used twice) just
//! works.
//!
//! Values are addressed by lightweight [`Val`] handles carrying the owning
//! tape's id; using a handle on a different tape is a [`Error::DetachedTensor`]
//! instead of a silent wrong answer.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::ops;
use crate::tensor::{Element, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Val {
    tape_id: u64,
    index: usize,
}

type BackFn<E> = Box<dyn Fn(&Tensor<E>) -> Vec<Option<Tensor<E>>>>;

struct Node<E: Element> {
    value: Tensor<E>,
    parents: Vec<usize>,
    backward: Option<BackFn<E>>,
    grad: Option<Vec<E>>,
}

/// Records one forward pass and replays it backwards for gradients.
pub struct Tape<E: Element> {
    id: u64,
    nodes: Vec<Node<E>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input value. Its `requires_grad` flag decides whether
    /// [`Tape::backward`] assigns it a gradient.
    pub fn leaf(&mut self, value: Tensor<E>) -> Val {
        self.push(value, Vec::new(), None)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<E>) -> Val {
        self.leaf(value.with_requires_grad(false))
    }

    fn push(&mut self, value: Tensor<E>, parents: Vec<usize>, backward: Option<BackFn<E>>) -> Val {
        let index = self.nodes.len();
        self.nodes.push(Node { value, parents, backward, grad: None });
        Val { tape_id: self.id, index }
    }

    fn check(&self, v: Val) -> Result<usize> {
        if v.tape_id == self.id && v.index < self.nodes.len() {
            Ok(v.index)
        } else {
            Err(Error::DetachedTensor)
        }
    }

    /// Forward value of a recorded node.
    pub fn value(&self, v: Val) -> Result<&Tensor<E>> {
        Ok(&self.nodes[self.check(v)?].value)
    }

    /// Gradient accumulated on a node by the last [`Tape::backward`] call.
    /// `None` when no gradient reached it (constant, or unreachable from the
    /// loss).
    pub fn grad(&self, v: Val) -> Result<Option<&[E]>> {
        Ok(self.nodes[self.check(v)?].grad.as_deref())
    }

    /// Records an op node: output `requires_grad` is inherited from the
    /// parents, and the backward closure is kept only when some parent wants
    /// a gradient.
    fn record(
        &mut self,
        mut value: Tensor<E>,
        parents: Vec<usize>,
        backward: BackFn<E>,
    ) -> Val {
        let needs_grad = parents.iter().any(|&p| self.nodes[p].value.requires_grad());
        value.set_requires_grad(needs_grad);
        let backward = needs_grad.then_some(backward);
        self.push(value, parents, backward)
    }

    // ---- elementwise -----------------------------------------------------

    pub fn add(&mut self, a: Val, b: Val) -> Result<Val> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let out = ops::add(ta, tb)?;
        let a_scalar = ta.numel() == 1 && out.numel() > 1;
        let b_scalar = tb.numel() == 1 && out.numel() > 1;
        Ok(self.record(
            out,
            vec![ia, ib],
            Box::new(move |go| {
                vec![
                    Some(ops::reduce_for_broadcast(go.clone(), a_scalar)),
                    Some(ops::reduce_for_broadcast(go.clone(), b_scalar)),
                ]
            }),
        ))
    }

    pub fn sub(&mut self, a: Val, b: Val) -> Result<Val> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let out = ops::sub(ta, tb)?;
        let a_scalar = ta.numel() == 1 && out.numel() > 1;
        let b_scalar = tb.numel() == 1 && out.numel() > 1;
        Ok(self.record(
            out,
            vec![ia, ib],
            Box::new(move |go| {
                let neg = go.map(|v| -v);
                vec![
                    Some(ops::reduce_for_broadcast(go.clone(), a_scalar)),
                    Some(ops::reduce_for_broadcast(neg, b_scalar)),
                ]
            }),
        ))
    }

    pub fn mul(&mut self, a: Val, b: Val) -> Result<Val> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (self.nodes[ia].value.clone(), self.nodes[ib].value.clone());
        let out = ops::mul(&ta, &tb)?;
        let a_scalar = ta.numel() == 1 && out.numel() > 1;
        let b_scalar = tb.numel() == 1 && out.numel() > 1;
        Ok(self.record(
            out,
            vec![ia, ib],
            Box::new(move |go| {
                let da = ops::mul(go, &tb).expect("validated at forward time");
                let db = ops::mul(go, &ta).expect("validated at forward time");
                vec![
                    Some(ops::reduce_for_broadcast(da, a_scalar)),
                    Some(ops::reduce_for_broadcast(db, b_scalar)),
                ]
            }),
        ))
    }

    pub fn neg(&mut self, a: Val) -> Result<Val> {
        let ia = self.check(a)?;
        let out = ops::neg(&self.nodes[ia].value)?;
        Ok(self.record(out, vec![ia], Box::new(|go| vec![Some(go.map(|v| -v))])))
    }

    pub fn log(&mut self, a: Val) -> Result<Val> {
        let ia = self.check(a)?;
        let ta = self.nodes[ia].value.clone();
        let out = ops::log(&ta)?;
        Ok(self.record(
            out,
            vec![ia],
            Box::new(move |go| {
                let data = go
                    .data()
                    .iter()
                    .zip(ta.data())
                    .map(|(&g, &x)| g / x)
                    .collect();
                vec![Some(Tensor::from_vec(ta.shape().to_vec(), data).expect("shape preserved"))]
            }),
        ))
    }

    pub fn exp(&mut self, a: Val) -> Result<Val> {
        let ia = self.check(a)?;
        let out = ops::exp(&self.nodes[ia].value)?;
        let y = out.clone();
        Ok(self.record(
            out,
            vec![ia],
            Box::new(move |go| vec![Some(ops::mul(go, &y).expect("shape preserved"))]),
        ))
    }

    // ---- activations -----------------------------------------------------

    pub fn relu(&mut self, a: Val) -> Result<Val> {
        let ia = self.check(a)?;
        let x = self.nodes[ia].value.clone();
        let out = ops::relu(&x)?;
        Ok(self.record(
            out,
            vec![ia],
            Box::new(move |go| vec![Some(ops::relu_backward(&x, go))]),
        ))
    }

    pub fn leaky_relu(&mut self, a: Val, alpha: f64) -> Result<Val> {
        let ia = self.check(a)?;
        let x = self.nodes[ia].value.clone();
        let out = ops::leaky_relu(&x, alpha)?;
        Ok(self.record(
            out,
            vec![ia],
            Box::new(move |go| vec![Some(ops::leaky_relu_backward(&x, alpha, go))]),
        ))
    }

    pub fn tanh(&mut self, a: Val) -> Result<Val> {
        let ia = self.check(a)?;
        let out = ops::tanh(&self.nodes[ia].value)?;
        let y = out.clone();
        Ok(self.record(
            out,
            vec![ia],
            Box::new(move |go| vec![Some(ops::tanh_backward(&y, go))]),
        ))
    }

    pub fn sigmoid(&mut self, a: Val) -> Result<Val> {
        let ia = self.check(a)?;
        let out = ops::sigmoid(&self.nodes[ia].value)?;
        let y = out.clone();
        Ok(self.record(
            out,
            vec![ia],
            Box::new(move |go| vec![Some(ops::sigmoid_backward(&y, go))]),
        ))
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: Val, b: Val) -> Result<Val> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (self.nodes[ia].value.clone(), self.nodes[ib].value.clone());
        let out = ops::matmul(&ta, &tb)?;
        Ok(self.record(
            out,
            vec![ia, ib],
            Box::new(move |go| {
                let bt = ops::transpose2(&tb).expect("validated at forward time");
                let at = ops::transpose2(&ta).expect("validated at forward time");
                let da = ops::matmul(go, &bt).expect("validated at forward time");
                let db = ops::matmul(&at, go).expect("validated at forward time");
                vec![Some(da), Some(db)]
            }),
        ))
    }

    pub fn bias_add_rows(&mut self, x: Val, b: Val) -> Result<Val> {
        let (ix, ib) = (self.check(x)?, self.check(b)?);
        let out = ops::bias_add_rows(&self.nodes[ix].value, &self.nodes[ib].value)?;
        Ok(self.record(
            out,
            vec![ix, ib],
            Box::new(move |go| {
                let db = ops::column_sums(go).expect("validated at forward time");
                vec![Some(go.clone()), Some(db)]
            }),
        ))
    }

    pub fn reshape(&mut self, a: Val, shape: &[usize]) -> Result<Val> {
        let ia = self.check(a)?;
        let in_shape = self.nodes[ia].value.shape().to_vec();
        let out = self.nodes[ia].value.reshape(shape)?;
        Ok(self.record(
            out,
            vec![ia],
            Box::new(move |go| {
                vec![Some(go.reshape(&in_shape).expect("same element count"))]
            }),
        ))
    }

    // ---- convolution family ------------------------------------------------

    pub fn conv2d(
        &mut self,
        x: Val,
        w: Val,
        bias: Option<Val>,
        stride: usize,
        pad: usize,
    ) -> Result<Val> {
        let (ix, iw) = (self.check(x)?, self.check(w)?);
        let ibias = bias.map(|b| self.check(b)).transpose()?;
        let tx = self.nodes[ix].value.clone();
        let tw = self.nodes[iw].value.clone();
        let tb = ibias.map(|i| self.nodes[i].value.clone());
        let out = ops::conv2d(&tx, &tw, tb.as_ref(), stride, pad)?;
        let mut parents = vec![ix, iw];
        parents.extend(ibias);
        let has_bias = ibias.is_some();
        Ok(self.record(
            out,
            parents,
            Box::new(move |go| {
                let (dx, dw, db) = ops::conv2d_backward(&tx, &tw, has_bias, stride, pad, go);
                let mut grads = vec![Some(dx), Some(dw)];
                if has_bias {
                    grads.push(db);
                }
                grads
            }),
        ))
    }

    pub fn conv_transpose2d(
        &mut self,
        x: Val,
        w: Val,
        bias: Option<Val>,
        stride: usize,
        pad: usize,
    ) -> Result<Val> {
        let (ix, iw) = (self.check(x)?, self.check(w)?);
        let ibias = bias.map(|b| self.check(b)).transpose()?;
        let tx = self.nodes[ix].value.clone();
        let tw = self.nodes[iw].value.clone();
        let tb = ibias.map(|i| self.nodes[i].value.clone());
        let out = ops::conv_transpose2d(&tx, &tw, tb.as_ref(), stride, pad)?;
        let mut parents = vec![ix, iw];
        parents.extend(ibias);
        let has_bias = ibias.is_some();
        Ok(self.record(
            out,
            parents,
            Box::new(move |go| {
                let (dx, dw, db) =
                    ops::conv_transpose2d_backward(&tx, &tw, has_bias, stride, pad, go);
                let mut grads = vec![Some(dx), Some(dw)];
                if has_bias {
                    grads.push(db);
                }
                grads
            }),
        ))
    }

    /// Training-mode batch norm. Returns the output value plus the updated
    /// running statistics, which the caller owns (they are state, not part of
    /// the differentiable graph).
    #[allow(clippy::too_many_arguments)] // the op's full signature: x, γ, β, both running stats, ε, momentum
    pub fn batchnorm2d_train(
        &mut self,
        x: Val,
        gamma: Val,
        beta: Val,
        running_mean: &Tensor<E>,
        running_var: &Tensor<E>,
        eps: f64,
        momentum: f64,
    ) -> Result<(Val, Tensor<E>, Tensor<E>)> {
        let (ix, ig, ib) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let tx = self.nodes[ix].value.clone();
        let tg = self.nodes[ig].value.clone();
        let out = ops::batchnorm2d_train(
            &tx,
            &tg,
            &self.nodes[ib].value,
            running_mean,
            running_var,
            eps,
            momentum,
        )?;
        let saved = out.saved;
        let val = self.record(
            out.y,
            vec![ix, ig, ib],
            Box::new(move |go| {
                let (dx, dgamma, dbeta) = ops::batchnorm2d_backward(&tx, &tg, &saved, go);
                vec![Some(dx), Some(dgamma), Some(dbeta)]
            }),
        );
        Ok((val, out.running_mean, out.running_var))
    }

    /// Evaluation-mode batch norm (running statistics are constants).
    pub fn batchnorm2d_eval(
        &mut self,
        x: Val,
        gamma: Val,
        beta: Val,
        running_mean: &Tensor<E>,
        running_var: &Tensor<E>,
        eps: f64,
    ) -> Result<Val> {
        let (ix, ig, ib) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let tx = self.nodes[ix].value.clone();
        let tg = self.nodes[ig].value.clone();
        let rm = running_mean.clone();
        let rv = running_var.clone();
        let out = ops::batchnorm2d_eval(&tx, &tg, &self.nodes[ib].value, &rm, &rv, eps)?;
        Ok(self.record(
            out,
            vec![ix, ig, ib],
            Box::new(move |go| {
                // y = gamma·(x − rm)·inv + beta with rm, inv constant:
                // dx = go·gamma·inv, dgamma = Σ go·xhat, dbeta = Σ go.
                let (n, c, h, w) =
                    (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
                let eps_e = E::from_f64(eps);
                let gd = go.data();
                let xd = tx.data();
                let mut dx = vec![E::zero(); tx.numel()];
                let mut dgamma = vec![E::zero(); c];
                let mut dbeta = vec![E::zero(); c];
                for ci in 0..c {
                    let inv = E::one() / (rv.data()[ci] + eps_e).sqrt();
                    let g = tg.data()[ci];
                    let mu = rm.data()[ci];
                    for ni in 0..n {
                        for hi in 0..h {
                            for wi in 0..w {
                                let i = crate::tensor::idx4(c, h, w, ni, ci, hi, wi);
                                dx[i] = gd[i] * g * inv;
                                dgamma[ci] = dgamma[ci] + gd[i] * (xd[i] - mu) * inv;
                                dbeta[ci] = dbeta[ci] + gd[i];
                            }
                        }
                    }
                }
                vec![
                    Some(Tensor::from_vec(tx.shape().to_vec(), dx).expect("shape preserved")),
                    Some(Tensor::from_vec(vec![c], dgamma).expect("shape preserved")),
                    Some(Tensor::from_vec(vec![c], dbeta).expect("shape preserved")),
                ]
            }),
        ))
    }

    pub fn avg_pool2d(&mut self, x: Val, kernel: usize, stride: usize, pad: usize) -> Result<Val> {
        let ix = self.check(x)?;
        let in_shape = self.nodes[ix].value.shape().to_vec();
        let out = ops::avg_pool2d(&self.nodes[ix].value, kernel, stride, pad)?;
        Ok(self.record(
            out,
            vec![ix],
            Box::new(move |go| {
                vec![Some(ops::avg_pool2d_backward(&in_shape, kernel, stride, pad, go))]
            }),
        ))
    }

    pub fn concat_channels(&mut self, parts: &[Val]) -> Result<Val> {
        let indices: Vec<usize> = parts.iter().map(|&p| self.check(p)).collect::<Result<_>>()?;
        let tensors: Vec<&Tensor<E>> = indices.iter().map(|&i| &self.nodes[i].value).collect();
        let out = ops::concat_channels(&tensors)?;
        let channel_sizes: Vec<usize> = tensors.iter().map(|t| t.shape()[1]).collect();
        Ok(self.record(
            out,
            indices,
            Box::new(move |go| {
                ops::split_channels(go, &channel_sizes).into_iter().map(Some).collect()
            }),
        ))
    }

    // ---- reductions and losses ----------------------------------------------

    pub fn mean_all(&mut self, x: Val) -> Result<Val> {
        let ix = self.check(x)?;
        let in_shape = self.nodes[ix].value.shape().to_vec();
        let n = self.nodes[ix].value.numel();
        let out = ops::mean_all(&self.nodes[ix].value)?;
        Ok(self.record(
            out,
            vec![ix],
            Box::new(move |go| {
                let g = go.data()[0] / E::from_f64(n as f64);
                vec![Some(Tensor::full(&in_shape, g))]
            }),
        ))
    }

    /// Binary cross-entropy against a constant target tensor.
    pub fn bce(&mut self, pred: Val, target: &Tensor<E>) -> Result<Val> {
        let ip = self.check(pred)?;
        let tp = self.nodes[ip].value.clone();
        let out = ops::bce(&tp, target)?;
        let tt = target.clone();
        Ok(self.record(
            out,
            vec![ip],
            Box::new(move |go| vec![Some(ops::bce_backward(&tp, &tt, go.data()[0]))]),
        ))
    }

    /// Mean softmax cross-entropy against constant class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Val, targets: &[usize]) -> Result<Val> {
        let il = self.check(logits)?;
        let tl = self.nodes[il].value.clone();
        let out = ops::softmax_cross_entropy(&tl, targets)?;
        let tt = targets.to_vec();
        Ok(self.record(
            out,
            vec![il],
            Box::new(move |go| {
                vec![Some(ops::softmax_cross_entropy_backward(&tl, &tt, go.data()[0]))]
            }),
        ))
    }

    // ---- reverse pass --------------------------------------------------------

    /// Runs one reverse pass from a scalar loss, assigning gradients to every
    /// reachable node whose value requires them. Previous gradients on this
    /// tape are cleared first.
    pub fn backward(&mut self, loss: Val) -> Result<()> {
        let start = self.check(loss)?;
        if self.nodes[start].value.numel() != 1 {
            return Err(Error::ShapeMismatch {
                op: "backward",
                detail: format!(
                    "loss must be a scalar, got shape {:?}",
                    self.nodes[start].value.shape()
                ),
            });
        }
        for node in self.nodes.iter_mut() {
            node.grad = None;
        }
        self.nodes[start].grad = Some(vec![E::one()]);

        for i in (0..=start).rev() {
            if self.nodes[i].grad.is_none() || self.nodes[i].backward.is_none() {
                continue;
            }
            let go = Tensor::from_vec(
                self.nodes[i].value.shape().to_vec(),
                self.nodes[i].grad.clone().expect("checked above"),
            )
            .expect("grad matches value shape");
            let parents = self.nodes[i].parents.clone();
            let grads = (self.nodes[i].backward.as_ref().expect("checked above"))(&go);
            debug_assert_eq!(grads.len(), parents.len());
            for (p, g) in parents.into_iter().zip(grads) {
                let Some(g) = g else { continue };
                // Constants don't need storage, and nothing upstream of a
                // constant-only node can require a gradient either.
                if !self.nodes[p].value.requires_grad() {
                    continue;
                }
                match &mut self.nodes[p].grad {
                    Some(acc) => {
                        for (a, &gv) in acc.iter_mut().zip(g.data()) {
                            *a = *a + gv;
                        }
                    }
                    slot @ None => *slot = Some(g.data().to_vec()),
                }
            }
        }
        Ok(())
    }
}
