use rand::Rng;

use super::ops::{self, ChannelStats};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Var },
    MaxPool2 { input: Var, argmax: Vec<usize> },
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Dense { input: Var, weight: Var, bias: Var },
    BatchNormTrain { input: Var, gamma: Var, beta: Var, stats: ChannelStats },
    BatchNormFrozen { input: Var, gamma: Var, beta: Var, stats: ChannelStats },
    Dropout { input: Var, mask: Vec<f64> },
    Concat { a: Var, b: Var },
    Reshape(Var),
    Sum(Var),
    Bce { probs: Var, labels: Tensor },
    Kl { probs: Var, target: Tensor },
    Add(Var, Var),
    Scale(Var, f64),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2 { .. } => "maxpool2",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softmax(_) => "softmax",
            Op::Dense { .. } => "dense",
            Op::BatchNormTrain { .. } => "batchnorm_train",
            Op::BatchNormFrozen { .. } => "batchnorm_infer",
            Op::Dropout { .. } => "dropout",
            Op::Concat { .. } => "concat",
            Op::Reshape(_) => "reshape",
            Op::Sum(_) => "sum",
            Op::Bce { .. } => "bce",
            Op::Kl { .. } => "kl",
            Op::Add(..) => "add",
            Op::Scale(..) => "scale",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Computation record for one forward pass.
///
/// Nodes are appended in evaluation order, so every node's inputs precede
/// it; backward is a single reverse scan.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every recorded node.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Primitive names in record order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    /// Overwrites a leaf's value; only affects later [`Tape::replay`] calls.
    pub fn set_leaf(&mut self, v: Var, value: Tensor) -> Result<()> {
        let node = self.nodes.get_mut(v.0).ok_or_else(|| Error::InvalidArgument(format!("no node {}", v.0)))?;
        if !matches!(node.op, Op::Leaf) {
            return Err(Error::InvalidArgument(format!("node {} is a {}, not a leaf", v.0, node.op.name())));
        }
        if node.value.shape() != value.shape() {
            return Err(Error::shape("set_leaf", format!("{:?} vs {:?}", node.value.shape(), value.shape())));
        }
        node.value = value;
        Ok(())
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let y = ops::conv2d(self.value(input), self.value(kernel), self.value(bias))?;
        Ok(self.push(Op::Conv2d { input, kernel, bias }, y))
    }

    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let (y, argmax) = ops::maxpool2(self.value(input))?;
        Ok(self.push(Op::MaxPool2 { input, argmax }, y))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let y = ops::relu(self.value(input));
        self.push(Op::Relu(input), y)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let y = ops::sigmoid(self.value(input));
        self.push(Op::Sigmoid(input), y)
    }

    pub fn softmax(&mut self, input: Var) -> Var {
        let y = ops::softmax(self.value(input));
        self.push(Op::Softmax(input), y)
    }

    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = ops::dense(self.value(input), self.value(weight), self.value(bias))?;
        Ok(self.push(Op::Dense { input, weight, bias }, y))
    }

    /// Train-mode batch norm; returns the batch statistics so the caller can
    /// fold them into its running averages.
    pub fn batchnorm_train(&mut self, input: Var, gamma: Var, beta: Var) -> Result<(Var, ChannelStats)> {
        let stats = ops::batch_stats(self.value(input))?;
        let y = ops::batchnorm(self.value(input), self.value(gamma), self.value(beta), &stats)?;
        let out = self.push(Op::BatchNormTrain { input, gamma, beta, stats: stats.clone() }, y);
        Ok((out, stats))
    }

    pub fn batchnorm_frozen(&mut self, input: Var, gamma: Var, beta: Var, stats: &ChannelStats) -> Result<Var> {
        let y = ops::batchnorm(self.value(input), self.value(gamma), self.value(beta), stats)?;
        Ok(self.push(Op::BatchNormFrozen { input, gamma, beta, stats: stats.clone() }, y))
    }

    pub fn dropout(&mut self, input: Var, rate: f64, rng: &mut impl Rng) -> Result<Var> {
        let mask = ops::dropout_mask(self.value(input).len(), rate, rng)?;
        let y = apply_mask(self.value(input), &mask);
        Ok(self.push(Op::Dropout { input, mask }, y))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::concat(self.value(a), self.value(b))?;
        Ok(self.push(Op::Concat { a, b }, y))
    }

    /// Collapses every axis after the first: `[N, ...] -> [N, rest]`.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let n = x.shape()[0];
        let y = x.reshape([n, x.len() / n])?;
        Ok(self.push(Op::Reshape(input), y))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().sum();
        self.push(Op::Sum(input), Tensor::scalar(s))
    }

    pub fn bce_mean(&mut self, probs: Var, labels: &Tensor) -> Result<Var> {
        let l = ops::bce_mean(self.value(probs), labels)?;
        Ok(self.push(Op::Bce { probs, labels: labels.clone() }, Tensor::scalar(l)))
    }

    pub fn kl_mean(&mut self, probs: Var, target: &Tensor) -> Result<Var> {
        let l = ops::kl_mean(self.value(probs), target)?;
        Ok(self.push(Op::Kl { probs, target: target.clone() }, Tensor::scalar(l)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape("add", format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::new(x.shape(), data)?;
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|v| v * factor).collect();
        let out = Tensor { shape: x.shape().to_vec(), data };
        self.push(Op::Scale(input, factor), out)
    }

    /// Reverse-mode gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Conv2d { input, kernel, bias } => {
                    let (gx, gk, gb) = ops::conv2d_backward(self.value(*input), self.value(*kernel), &g)?;
                    accumulate(&mut grads, *input, gx);
                    accumulate(&mut grads, *kernel, gk);
                    accumulate(&mut grads, *bias, gb);
                }
                Op::MaxPool2 { input, argmax } => {
                    let gx = ops::maxpool2_backward(self.value(*input).shape(), argmax, &g)?;
                    accumulate(&mut grads, *input, gx);
                }
                Op::Relu(input) => {
                    let x = self.value(*input);
                    let data = x.data().iter().zip(g.data()).map(|(&v, &d)| if v > 0.0 { d } else { 0.0 }).collect();
                    accumulate(&mut grads, *input, Tensor::new(x.shape(), data)?);
                }
                Op::Sigmoid(input) => {
                    let y = &node.value;
                    let data = y.data().iter().zip(g.data()).map(|(&s, &d)| d * s * (1.0 - s)).collect();
                    accumulate(&mut grads, *input, Tensor::new(y.shape(), data)?);
                }
                Op::Softmax(input) => {
                    let y = &node.value;
                    let w = *y.shape().last().unwrap();
                    let mut data = Vec::with_capacity(y.len());
                    for (yr, gr) in y.data().chunks(w).zip(g.data().chunks(w)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        data.extend(yr.iter().zip(gr).map(|(&s, &d)| s * (d - dot)));
                    }
                    accumulate(&mut grads, *input, Tensor::new(y.shape(), data)?);
                }
                Op::Dense { input, weight, bias } => {
                    let (gx, gw, gb) = ops::dense_backward(self.value(*input), self.value(*weight), &g)?;
                    accumulate(&mut grads, *input, gx);
                    accumulate(&mut grads, *weight, gw);
                    accumulate(&mut grads, *bias, gb);
                }
                Op::BatchNormTrain { input, gamma, beta, stats } => {
                    let (gx, gg, gb) = ops::batchnorm_backward(self.value(*input), self.value(*gamma), stats, &g)?;
                    accumulate(&mut grads, *input, gx);
                    accumulate(&mut grads, *gamma, gg);
                    accumulate(&mut grads, *beta, gb);
                }
                Op::BatchNormFrozen { input, gamma, beta, stats } => {
                    let (gx, gg, gb) =
                        ops::batchnorm_backward_frozen(self.value(*input), self.value(*gamma), stats, &g)?;
                    accumulate(&mut grads, *input, gx);
                    accumulate(&mut grads, *gamma, gg);
                    accumulate(&mut grads, *beta, gb);
                }
                Op::Dropout { input, mask } => {
                    accumulate(&mut grads, *input, apply_mask(&g, mask));
                }
                Op::Concat { a, b } => {
                    let da = self.value(*a).shape()[1];
                    let (ga, gb) = ops::concat_backward(da, &g)?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Reshape(input) => {
                    let gx = g.reshape(self.value(*input).shape())?;
                    accumulate(&mut grads, *input, gx);
                }
                Op::Sum(input) => {
                    let x = self.value(*input);
                    accumulate(&mut grads, *input, Tensor::full(x.shape(), g.item()));
                }
                Op::Bce { probs, labels } => {
                    let mut gp = ops::bce_mean_backward(self.value(*probs), labels);
                    gp.data_mut().iter_mut().for_each(|v| *v *= g.item());
                    accumulate(&mut grads, *probs, gp);
                }
                Op::Kl { probs, target } => {
                    let mut gp = ops::kl_mean_backward(self.value(*probs), target);
                    gp.data_mut().iter_mut().for_each(|v| *v *= g.item());
                    accumulate(&mut grads, *probs, gp);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Scale(input, factor) => {
                    let data = g.data().iter().map(|v| v * factor).collect();
                    accumulate(&mut grads, *input, Tensor::new(g.shape(), data)?);
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Re-evaluates every node from the recorded leaf values and returns the
    /// recomputed value of `output`. Dropout reuses its recorded mask.
    pub fn replay(&self, output: Var) -> Result<Tensor> {
        let mut vals: Vec<Tensor> = Vec::with_capacity(output.0 + 1);
        for node in &self.nodes[..=output.0] {
            let v = |x: &Var| &vals[x.0];
            let out = match &node.op {
                Op::Leaf => node.value.clone(),
                Op::Conv2d { input, kernel, bias } => ops::conv2d(v(input), v(kernel), v(bias))?,
                Op::MaxPool2 { input, .. } => ops::maxpool2(v(input))?.0,
                Op::Relu(x) => ops::relu(v(x)),
                Op::Sigmoid(x) => ops::sigmoid(v(x)),
                Op::Softmax(x) => ops::softmax(v(x)),
                Op::Dense { input, weight, bias } => ops::dense(v(input), v(weight), v(bias))?,
                Op::BatchNormTrain { input, gamma, beta, .. } => {
                    let stats = ops::batch_stats(v(input))?;
                    ops::batchnorm(v(input), v(gamma), v(beta), &stats)?
                }
                Op::BatchNormFrozen { input, gamma, beta, stats } => {
                    ops::batchnorm(v(input), v(gamma), v(beta), stats)?
                }
                Op::Dropout { input, mask } => apply_mask(v(input), mask),
                Op::Concat { a, b } => ops::concat(v(a), v(b))?,
                Op::Reshape(x) => v(x).reshape(node.value.shape())?,
                Op::Sum(x) => Tensor::scalar(v(x).data().iter().sum()),
                Op::Bce { probs, labels } => Tensor::scalar(ops::bce_mean(v(probs), labels)?),
                Op::Kl { probs, target } => Tensor::scalar(ops::kl_mean(v(probs), target)?),
                Op::Add(a, b) => {
                    let data = v(a).data().iter().zip(v(b).data()).map(|(p, q)| p + q).collect();
                    Tensor::new(v(a).shape(), data)?
                }
                Op::Scale(x, f) => {
                    let data = v(x).data().iter().map(|q| q * f).collect();
                    Tensor::new(v(x).shape(), data)?
                }
            };
            vals.push(out);
        }
        Ok(vals.pop().expect("output node replayed"))
    }
}

fn apply_mask(x: &Tensor, mask: &[f64]) -> Tensor {
    let data = x.data().iter().zip(mask).map(|(a, m)| a * m).collect();
    Tensor { shape: x.shape().to_vec(), data }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}
