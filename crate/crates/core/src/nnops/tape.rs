//! Reverse-mode gradient tape.
//!
//! Every forward op evaluates eagerly, stores its output on the tape and
//! records a boxed [`Op`] holding whatever it needs for the backward pass.
//! [`GradTape::backward`] consumes the tape and walks the recorded nodes in
//! exact reverse order.

use indexmap::IndexMap;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Inputs handed to [`Op::backward`].
pub struct BackwardCtx<'a> {
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    pub grad: &'a Tensor,
    /// `needs[i]` is false when input `i` does not lead to any parameter or
    /// variable, so its gradient may be skipped.
    pub needs: Vec<bool>,
}

pub trait Op {
    fn name(&self) -> &'static str;

    /// Returns one entry per input. `None` means "no gradient" and is only
    /// allowed where `ctx.needs[i]` is false.
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>>;
}

struct Node {
    op: Box<dyn Op>,
    inputs: Vec<usize>,
    output: usize,
}

/// Batch statistics produced by a train-mode batch norm, to be folded into
/// the running buffers once the step is done.
#[derive(Clone, Debug)]
pub struct RunningUpdate {
    pub prefix: String,
    pub mean: Vec<f64>,
    /// Unbiased batch variance.
    pub var: Vec<f64>,
}

#[derive(Default)]
pub struct GradTape {
    values: Vec<Tensor>,
    requires_grad: Vec<bool>,
    nodes: Vec<Node>,
    params: Vec<(usize, String)>,
    running: Vec<RunningUpdate>,
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push_value(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.values.push(t);
        self.requires_grad.push(requires_grad);
        Var(self.values.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_value(t, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push_value(t, true)
    }

    /// Loads a named parameter from `store` as a gradient-carrying leaf.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let t = store
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?
            .clone();
        let v = self.push_value(t, true);
        self.params.push((v.0, name.to_string()));
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires_grad[v.0]
    }

    pub fn num_ops(&self) -> usize {
        self.nodes.len()
    }

    /// Names of the recorded ops in execution order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    pub fn running_updates(&self) -> &[RunningUpdate] {
        &self.running
    }

    pub(crate) fn record_running(&mut self, update: RunningUpdate) {
        self.running.push(update);
    }

    /// Records an op whose forward value has already been computed.
    pub fn record(&mut self, op: Box<dyn Op>, inputs: &[Var], output: Tensor) -> Result<Var> {
        if !output.is_finite() {
            return Err(Error::NumericFault {
                layer: op.name().to_string(),
                detail: "non-finite forward output".into(),
            });
        }
        let requires_grad = inputs.iter().any(|v| self.requires_grad[v.0]);
        let out = self.push_value(output, requires_grad);
        if requires_grad {
            self.nodes.push(Node {
                op,
                inputs: inputs.iter().map(|v| v.0).collect(),
                output: out.0,
            });
        }
        Ok(out)
    }

    /// Reverse-mode pass from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let loss_t = &self.values[loss.0];
        if loss_t.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_t.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.values.len()];
        grads[loss.0] = Some(Tensor::filled(loss_t.shape(), 1.0));

        for node in self.nodes.iter().rev() {
            let Some(grad) = grads[node.output].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                inputs: node.inputs.iter().map(|&i| &self.values[i]).collect(),
                output: &self.values[node.output],
                grad: &grad,
                needs: node.inputs.iter().map(|&i| self.requires_grad[i]).collect(),
            };
            let input_grads = node.op.backward(&ctx)?;
            for ((&input, g), &needed) in node.inputs.iter().zip(input_grads).zip(&ctx.needs) {
                let Some(g) = g else { continue };
                if !needed {
                    continue;
                }
                if g.numel() != self.values[input].numel() {
                    return Err(Error::Size(format!(
                        "{} produced a gradient of {} values for an input of {}",
                        node.op.name(),
                        g.numel(),
                        self.values[input].numel()
                    )));
                }
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g.reshape(self.values[input].shape().to_vec())?),
                }
            }
        }

        let shapes = self.values.iter().map(|t| t.shape().to_vec()).collect();
        Ok(Gradients {
            grads,
            shapes,
            params: self.params,
        })
    }
}

/// Result of [`GradTape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(usize, String)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` does not
    /// influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    /// Per-parameter gradients, summed over repeated loads of the same name.
    pub fn into_param_grads(mut self) -> IndexMap<String, Tensor> {
        let mut out: IndexMap<String, Tensor> = IndexMap::new();
        for (idx, name) in &self.params {
            let g = self.grads[*idx]
                .take()
                .unwrap_or_else(|| Tensor::zeros(&self.shapes[*idx]));
            match out.get_mut(name) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    out.insert(name.clone(), g);
                }
            }
        }
        out
    }
}
