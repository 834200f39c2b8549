//! Parameterized layers built on the tape primitives. Each layer only holds
//! its parameter names and sizes; tensors live in a [`ParamStore`].

use rand::Rng;

use super::ops::{Activation, BnMode};
use super::params::ParamStore;
use super::tape::{GradTape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Tags a numeric fault with the layer it happened in.
pub(crate) fn in_layer<T>(prefix: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::NumericFault { layer, detail } => Error::NumericFault {
            layer: format!("{prefix} ({layer})"),
            detail,
        },
        other => other,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub prefix: String,
    pub cin: usize,
    pub cout: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(prefix: impl Into<String>, cin: usize, cout: usize, bias: bool) -> Self {
        Self {
            prefix: prefix.into(),
            cin,
            cout,
            bias,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        store.init_linear(&self.prefix, self.cin, self.cout, self.bias, rng);
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.prefix)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.prefix)
    }

    pub fn forward(&self, tape: &mut GradTape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, &self.weight_name())?;
        let b = if self.bias {
            Some(tape.param(store, &self.bias_name())?)
        } else {
            None
        };
        in_layer(&self.prefix, tape.linear(x, w, b))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub prefix: String,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(prefix: impl Into<String>, channels: usize) -> Self {
        Self {
            prefix: prefix.into(),
            channels,
        }
    }

    pub fn init(&self, store: &mut ParamStore) {
        store.init_batchnorm(&self.prefix, self.channels);
    }

    pub fn forward(
        &self,
        tape: &mut GradTape,
        store: &ParamStore,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let gamma = tape.param(store, &format!("{}.gamma", self.prefix))?;
        let beta = tape.param(store, &format!("{}.beta", self.prefix))?;
        let r = match mode {
            Mode::Train => tape.batchnorm(x, gamma, beta, BnMode::Train { prefix: &self.prefix }),
            Mode::Eval => {
                let missing = || Error::Config(format!("missing running stats for `{}`", self.prefix));
                let mean = store
                    .buffer(&format!("{}.running_mean", self.prefix))
                    .ok_or_else(missing)?;
                let var = store
                    .buffer(&format!("{}.running_var", self.prefix))
                    .ok_or_else(missing)?;
                tape.batchnorm(
                    x,
                    gamma,
                    beta,
                    BnMode::Eval {
                        mean: mean.data(),
                        var: var.data(),
                    },
                )
            }
        };
        in_layer(&self.prefix, r)
    }
}

/// Linear → BatchNorm → activation, the "shared MLP" unit.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearBnAct {
    pub linear: Linear,
    pub norm: BatchNorm,
    pub act: Option<Activation>,
}

impl LinearBnAct {
    /// The linear carries no bias since the norm's beta subsumes it.
    pub fn new(prefix: &str, cin: usize, cout: usize, act: Option<Activation>) -> Self {
        Self {
            linear: Linear::new(format!("{prefix}.linear"), cin, cout, false),
            norm: BatchNorm::new(format!("{prefix}.norm"), cout),
            act,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.linear.init(store, rng);
        self.norm.init(store);
    }

    pub fn forward(
        &self,
        tape: &mut GradTape,
        store: &ParamStore,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let h = self.linear.forward(tape, store, x)?;
        let h = self.norm.forward(tape, store, h, mode)?;
        match self.act {
            Some(a) => in_layer(&self.norm.prefix, tape.activation(h, a)),
            None => Ok(h),
        }
    }
}
