//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] owns every value produced during one forward pass together with
//! the rule that maps the output gradient back onto the inputs. Handles into
//! the tape are plain [`Var`] indices. [`Tape::backward`] replays the rules in
//! reverse record order, accumulating gradients in `f64`.
//!
//! Nodes whose inputs all lack `requires_grad` store no backward rule, so
//! constant sub-graphs (images, labels, masks) cost nothing during backward.

use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Everything a backward rule may look at.
pub struct BackwardArgs<'a, T> {
    pub inputs: &'a [&'a Tensor<T>],
    pub output: &'a Tensor<T>,
    /// Gradient of the loss w.r.t. `output`, same length as its data.
    pub grad: &'a [f64],
    /// Which inputs actually need a gradient.
    pub needs: &'a [bool],
}

/// Returns one optional gradient per input; `None` where `needs` is false.
pub type BackwardFn<T> = Box<dyn Fn(&BackwardArgs<'_, T>) -> Vec<Option<Vec<f64>>>>;

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), consumed: false }
    }

    /// Drop every recorded node. Tensors held elsewhere are untouched.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; it participates in backward iff `tensor.requires_grad`.
    pub fn leaf(&mut self, mut tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad;
        tensor.grad = None;
        self.push(Node { value: tensor, requires_grad, parents: Vec::new(), backward: None })
    }

    /// Leaf that always receives a gradient.
    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, node: Node<T>) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Append an op result. The rule is kept only when some parent needs a gradient.
    pub fn record<F>(&mut self, value: Tensor<T>, parents: &[Var], backward: F) -> Var
    where
        F: Fn(&BackwardArgs<'_, T>) -> Vec<Option<Vec<f64>>> + 'static,
    {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let backward: Option<BackwardFn<T>> = if requires_grad { Some(Box::new(backward)) } else { None };
        self.push(Node { value, requires_grad, parents: parents.iter().map(|p| p.0).collect(), backward })
    }

    /// Propagate from a scalar `loss` back to every reachable node.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::BackwardTwice);
        }
        if self.nodes.is_empty() {
            return Err(Error::invalid("backward on an empty tape"));
        }
        let shape = self.shape(loss);
        if shape != Shape::SCALAR {
            return Err(Error::NonScalarLoss(shape.0));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(rule) = node.backward.as_ref() else { continue };
            // Interior gradients are dropped once propagated; leaves have no
            // rule and keep theirs.
            let Some(grad) = grads[idx].take() else { continue };
            let inputs: Vec<&Tensor<T>> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let needs: Vec<bool> = node.parents.iter().map(|&p| self.nodes[p].requires_grad).collect();
            let parent_grads = rule(&BackwardArgs { inputs: &inputs, output: &node.value, grad: &grad, needs: &needs });
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.len(), self.nodes[p].value.len());
                match &mut grads[p] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        let lens = self.nodes.iter().map(|n| n.value.len()).collect();
        let leaf = self.nodes.iter().map(|n| n.parents.is_empty() && n.requires_grad).collect();
        Ok(Gradients { grads, lens, leaf })
    }

    /// Runs backward and writes the gradients of the given leaves into copies
    /// of their tensors' `grad` slots.
    pub fn backward_into(&mut self, loss: Var, leaves: &[Var]) -> Result<Vec<Tensor<T>>> {
        let grads = self.backward(loss)?;
        Ok(leaves
            .iter()
            .map(|&v| {
                let mut t = self.value(v).clone();
                t.grad = Some(grads.get_or_zeros(v));
                t
            })
            .collect())
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
    leaf: Vec<bool>,
}

impl Gradients {
    /// Gradient of a requires-grad leaf, if the loss reached it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        if !self.leaf[v.0] {
            return None;
        }
        self.grads[v.0].as_deref()
    }

    /// Leaf gradient, zero-filled when the leaf was unreachable from the loss.
    pub fn get_or_zeros(&self, v: Var) -> Vec<f64> {
        self.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; self.lens[v.0]])
    }
}

/// How `b`'s index maps onto `a`'s for the supported broadcasts:
/// batch of 1 over any batch, and one channel over any channel count.
#[derive(Clone, Copy)]
struct Broadcast {
    a: Shape,
    b: Shape,
}

impl Broadcast {
    fn new(a: Shape, b: Shape) -> Result<Self> {
        let ok = (b.n() == a.n() || b.n() == 1) && (b.c() == a.c() || b.c() == 1) && b.h() == a.h() && b.w() == a.w();
        if !ok {
            return Err(Error::shape(format!("cannot broadcast {:?} onto {:?}", b.0, a.0)));
        }
        Ok(Self { a, b })
    }

    fn trivial(&self) -> bool {
        self.a == self.b
    }

    #[inline]
    fn b_index(&self, i: usize) -> usize {
        let plane = self.a.plane();
        let p = i % plane;
        let c = (i / plane) % self.a.c();
        let n = i / (plane * self.a.c());
        let bn = if self.b.n() == 1 { 0 } else { n };
        let bc = if self.b.c() == 1 { 0 } else { c };
        (bn * self.b.c() + bc) * plane + p
    }

    fn reduce(&self, g: &[f64]) -> Vec<f64> {
        if self.trivial() {
            return g.to_vec();
        }
        let mut out = vec![0.0; self.b.numel()];
        for (i, v) in g.iter().enumerate() {
            out[self.b_index(i)] += v;
        }
        out
    }
}

impl<T: Element> Tape<T> {
    fn binary_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, Broadcast)> {
        let ta = self.value(a);
        let tb = self.value(b);
        let bc = Broadcast::new(ta.shape(), tb.shape())?;
        let data = ta.data().iter().enumerate().map(|(i, &x)| f(x, tb.data()[bc.b_index(i)])).collect();
        Ok((Tensor::from_vec(ta.shape(), data)?, bc))
    }

    /// `a + b`; `b` may broadcast over batch and/or channels.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, bc) = self.binary_map(a, b, |x, y| x + y)?;
        Ok(self.record(out, &[a, b], move |args| {
            vec![args.needs[0].then(|| args.grad.to_vec()), args.needs[1].then(|| bc.reduce(args.grad))]
        }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, bc) = self.binary_map(a, b, |x, y| x - y)?;
        Ok(self.record(out, &[a, b], move |args| {
            vec![
                args.needs[0].then(|| args.grad.to_vec()),
                args.needs[1].then(|| {
                    let neg: Vec<f64> = args.grad.iter().map(|g| -g).collect();
                    bc.reduce(&neg)
                }),
            ]
        }))
    }

    /// Element-wise product; `b` may broadcast over batch and/or channels.
    pub fn mul_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, bc) = self.binary_map(a, b, |x, y| x * y)?;
        Ok(self.record(out, &[a, b], move |args| {
            let (ta, tb) = (args.inputs[0].data(), args.inputs[1].data());
            let ga = args.needs[0]
                .then(|| args.grad.iter().enumerate().map(|(i, g)| g * tb[bc.b_index(i)].as_f64()).collect());
            let gb = args.needs[1].then(|| {
                let full: Vec<f64> = args.grad.iter().zip(ta).map(|(g, x)| g * x.as_f64()).collect();
                bc.reduce(&full)
            });
            vec![ga, gb]
        }))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let kt = T::from_f64(k);
        let out = self.value(a).map(|x| x * kt);
        self.record(out, &[a], move |args| vec![Some(args.grad.iter().map(|g| g * k).collect())])
    }

    /// Sum of all elements as a `(1,1,1,1)` tensor. Accumulates in `f64`.
    pub fn sum(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s: f64 = t.data().iter().map(|v| v.as_f64()).sum();
        let n = t.len();
        self.record(Tensor::scalar(T::from_f64(s)), &[a], move |args| vec![Some(vec![args.grad[0]; n])])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// `Σ weights ⊙ a` with constant weights, as a scalar.
    pub fn weighted_sum(&mut self, a: Var, weights: &Tensor<T>) -> Result<Var> {
        let w = self.constant(weights.clone());
        let p = self.mul_elem(a, w)?;
        Ok(self.sum(p))
    }

    /// Detached copy: same value, no gradient path.
    pub fn detach(&mut self, a: Var) -> Var {
        let t = self.value(a).clone();
        self.constant(t)
    }
}
