use super::{Float, Tensor};
use crate::error::{Result, SeldError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a backward rule sees: the forward inputs and output, the incoming
/// gradient, and which inputs actually need a gradient.
pub struct BackwardArgs<'a, T: Float> {
    pub inputs: &'a [&'a Tensor<T>],
    pub output: &'a Tensor<T>,
    pub grad: &'a [T],
    pub needs: &'a [bool],
}

/// Returns one optional flat gradient per input, in input order.
pub type BackwardFn<T> = Box<dyn Fn(&BackwardArgs<'_, T>) -> Vec<Option<Vec<T>>>>;

struct Node<T: Float> {
    value: Tensor<T>,
    inputs: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Reverse-mode gradient tape. Nodes are appended in execution order, so the
/// node list is already topologically sorted.
pub struct Tape<T: Float = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; it participates in differentiation iff
    /// `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad;
        self.push(tensor, Vec::new(), None, requires_grad)
    }

    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records the result of a custom operation. The backward rule is kept
    /// only when some input requires a gradient.
    pub fn record(&mut self, value: Tensor<T>, inputs: &[Var], backward: BackwardFn<T>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let inputs: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        let backward = requires_grad.then_some(backward);
        self.push(value, inputs, backward, requires_grad)
    }

    fn push(
        &mut self,
        mut value: Tensor<T>,
        inputs: Vec<usize>,
        backward: Option<BackwardFn<T>>,
        requires_grad: bool,
    ) -> Var {
        value.requires_grad = requires_grad;
        value.grad = None;
        self.nodes.push(Node {
            value,
            inputs,
            backward,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Back-propagates from a scalar. Returns the number of backward rules
    /// executed; each recorded operation runs at most once.
    pub fn backward(&mut self, loss: Var) -> Result<usize> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(SeldError::Usage(format!(
                "backward needs a scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(0);
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        let mut visited = 0;
        for i in (0..=loss.0).rev() {
            if self.nodes[i].backward.is_none() {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            let grads = {
                let node = &self.nodes[i];
                let inputs: Vec<&Tensor<T>> =
                    node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
                let needs: Vec<bool> = node
                    .inputs
                    .iter()
                    .map(|&j| self.nodes[j].requires_grad)
                    .collect();
                let rule = node.backward.as_ref().expect("checked above");
                rule(&BackwardArgs {
                    inputs: &inputs,
                    output: &node.value,
                    grad: &grad,
                    needs: &needs,
                })
            };
            visited += 1;
            let inputs = self.nodes[i].inputs.clone();
            debug_assert_eq!(inputs.len(), grads.len());
            for (j, g) in inputs.into_iter().zip(grads) {
                let Some(g) = g else { continue };
                if !self.nodes[j].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.len(), self.nodes[j].value.numel());
                match &mut self.nodes[j].grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(visited)
    }

    /// Gradient of the last backward pass with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        let shape = self.nodes[v.0].value.shape().to_vec();
        self.grad(v).map(|g| Tensor::from_vec(shape, g.to_vec()))
    }
}
