//! Gradient tape over the fixed op set of [`super::ops`].
//!
//! Nodes are appended in execution order; [`Tape::backward`] walks them in
//! reverse. Parameters are registered once per tape, so every parameter used
//! in a forward pass accumulates into exactly one gradient.

use std::collections::HashMap;

use super::{ops, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named parameter tensors in declaration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState<T: Scalar = f32> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Number of training updates applied so far.
    pub updates: u64,
}

impl<T: Scalar> BnState<T> {
    pub fn new(channels: usize) -> Self {
        BnState {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            updates: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// The first update adopts the batch statistics; later updates blend them
    /// in with momentum [`ops::BN_MOMENTUM`].
    pub fn update(&mut self, batch_mean: &[T], batch_var: &[T]) {
        if self.updates == 0 {
            self.mean.copy_from_slice(batch_mean);
            self.var.copy_from_slice(batch_var);
        } else {
            let m = T::from_f64_lossy(ops::BN_MOMENTUM);
            let r = T::one() - m;
            for (s, &b) in self.mean.iter_mut().zip(batch_mean) {
                *s = m * *s + r * b;
            }
            for (s, &b) in self.var.iter_mut().zip(batch_var) {
                *s = m * *s + r * b;
            }
        }
        self.updates += 1;
    }

    pub fn cast<U: Scalar>(&self) -> BnState<U> {
        BnState {
            mean: self.mean.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
            var: self.var.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
            updates: self.updates,
        }
    }
}

pub enum BnMode<'a, T: Scalar> {
    Train(&'a mut BnState<T>),
    Infer(&'a BnState<T>),
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Param,
    Input,
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Relu(Var),
    Add(Var, Var),
    GlobalAvgPool(Var),
    Dense {
        v: Var,
        weight: Var,
        bias: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Tensor<T>,
        labels: Vec<usize>,
    },
    Sum(Var),
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    consumed: bool,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
            consumed: false,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a parameter leaf. Registering the same id again returns the
    /// existing node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    /// Constant leaf that receives no gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, false)
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let out = ops::conv2d(
            self.value(x),
            self.value(kernel),
            bias.map(|b| self.value(b)),
        )?;
        let rg = self.requires(x) || self.requires(kernel) || bias.is_some_and(|b| self.requires(b));
        Ok(self.push(out, Op::Conv2d { x, kernel, bias }, rg))
    }

    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: BnMode<'_, T>) -> Result<Var> {
        let (fwd, train) = match mode {
            BnMode::Train(state) => {
                let fwd = ops::batch_norm_train(self.value(x), self.value(gamma), self.value(beta))?;
                if state.channels() != fwd.batch_mean.len() {
                    return Err(Error::Shape(format!(
                        "batch_norm state has {} channels, input {:?}",
                        state.channels(),
                        self.value(x).shape()
                    )));
                }
                state.update(&fwd.batch_mean, &fwd.batch_var);
                (fwd, true)
            }
            BnMode::Infer(state) => {
                if state.updates == 0 {
                    return Err(Error::UninitializedStatistics);
                }
                let fwd = ops::batch_norm_infer(
                    self.value(x),
                    self.value(gamma),
                    self.value(beta),
                    &state.mean,
                    &state.var,
                )?;
                (fwd, false)
            }
        };
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(
            fwd.output,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                normalized: fwd.normalized,
                inv_std: fwd.inv_std,
                train,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(self.value(x));
        let rg = self.requires(x);
        self.push(out, Op::Relu(x), rg)
    }

    /// Sign (`> 0`) of every ReLU input recorded so far, in tape order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(x),
                _ => None,
            })
            .flat_map(|x| self.value(x).data().iter().map(|&v| v > T::zero()))
            .collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!(
                "add of {:?} and {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(va.shape(), data)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let out = ops::global_avg_pool(self.value(x))?;
        let rg = self.requires(x);
        Ok(self.push(out, Op::GlobalAvgPool(x), rg))
    }

    pub fn dense(&mut self, v: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = ops::dense(self.value(v), self.value(weight), self.value(bias))?;
        let rg = self.requires(v) || self.requires(weight) || self.requires(bias);
        Ok(self.push(out, Op::Dense { v, weight, bias }, rg))
    }

    /// Fused softmax and mean cross-entropy; the result is a scalar node.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let probs = ops::softmax(self.value(logits))?;
        let loss = ops::cross_entropy_loss(&probs, labels)?;
        let rg = self.requires(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.requires(x);
        self.push(out, Op::Sum(x), rg)
    }

    /// Reverse sweep from the scalar `loss`. Parameters of `store` that never
    /// entered the tape come back as zero gradients.
    pub fn backward(&mut self, loss: Var, store: &ParamStore<T>) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.consumed = true;
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let emit = |target: Var, t: Tensor<T>, grads: &mut Vec<Option<Tensor<T>>>| {
                if !self.nodes[target.0].requires_grad {
                    return;
                }
                match &mut grads[target.0] {
                    Some(acc) => {
                        for (a, &v) in acc.data_mut().iter_mut().zip(t.data()) {
                            *a += v;
                        }
                    }
                    slot @ None => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Param | Op::Input => {
                    grads[idx] = Some(g);
                }
                Op::Conv2d { x, kernel, bias } => {
                    let need_input = self.nodes[x.0].requires_grad;
                    let cg = ops::conv2d_backward(
                        self.value(*x),
                        self.value(*kernel),
                        &g,
                        need_input,
                    )?;
                    if let Some(dx) = cg.input {
                        emit(*x, dx, &mut grads);
                    }
                    emit(*kernel, cg.kernel, &mut grads);
                    if let Some(b) = bias {
                        emit(*b, cg.bias, &mut grads);
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    normalized,
                    inv_std,
                    train,
                } => {
                    let bg = ops::batch_norm_backward(
                        &g,
                        normalized,
                        inv_std,
                        self.value(*gamma),
                        *train,
                    )?;
                    emit(*x, bg.input, &mut grads);
                    emit(*gamma, bg.gamma, &mut grads);
                    emit(*beta, bg.beta, &mut grads);
                }
                Op::Relu(x) => {
                    let dx = ops::relu_backward(self.value(*x), &g);
                    emit(*x, dx, &mut grads);
                }
                Op::Add(a, b) => {
                    emit(*a, g.clone(), &mut grads);
                    emit(*b, g, &mut grads);
                }
                Op::GlobalAvgPool(x) => {
                    let dx = ops::global_avg_pool_backward(self.value(*x).shape(), &g)?;
                    emit(*x, dx, &mut grads);
                }
                Op::Dense { v, weight, bias } => {
                    let dg = ops::dense_backward(self.value(*v), self.value(*weight), &g)?;
                    emit(*v, dg.input, &mut grads);
                    emit(*weight, dg.weight, &mut grads);
                    emit(*bias, dg.bias, &mut grads);
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    probs,
                    labels,
                } => {
                    let mut dl = ops::softmax_cross_entropy_backward(probs, labels)?;
                    let upstream = g.data()[0];
                    dl.data_mut().iter_mut().for_each(|v| *v *= upstream);
                    emit(*logits, dl, &mut grads);
                }
                Op::Sum(x) => {
                    let dx = Tensor::full(self.value(*x).shape(), g.data()[0]);
                    emit(*x, dx, &mut grads);
                }
            }
        }

        let mut out = Gradients {
            grads: store.ids().map(|_| None).collect(),
            shapes: store.iter().map(|(_, _, t)| t.shape().to_vec()).collect(),
        };
        for (&pid, &var) in &self.params {
            if pid.0 >= out.grads.len() {
                return Err(Error::Shape(format!(
                    "tape references parameter {} absent from the store",
                    pid.0
                )));
            }
            let g = grads[var.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.value(var).shape()));
            out.grads[pid.0] = Some(g);
        }
        Ok(out)
    }
}

/// Gradients for every parameter of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Gradients<T: Scalar = f32> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Whether the parameter took part in the forward pass.
    pub fn touched(&self, id: ParamId) -> bool {
        self.grads[id.0].is_some()
    }

    /// Gradient of a parameter that took part in the forward pass.
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    /// Gradient of any parameter; zeros for unused ones.
    pub fn dense(&self, id: ParamId) -> Tensor<T> {
        self.grads[id.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[id.0]))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
