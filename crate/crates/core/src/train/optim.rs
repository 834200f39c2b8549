//! AdamW with decoupled weight decay and the cosine learning-rate schedule.

use std::f64::consts::PI;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::nnops::{ParamStore, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// `lr0 * (1 + cos(pi * step / total)) / 2`.
pub fn cosine_lr(step: usize, total: usize, lr0: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let t = step.min(total) as f64 / total as f64;
    lr0 * (1.0 + (PI * t).cos()) / 2.0
}

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// First and second moment estimates per parameter plus the step count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamW {
    pub weight_decay: f64,
    step: u64,
    state: IndexMap<String, Moments>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            weight_decay,
            ..Self::default()
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter in `store`. Parameters missing from
    /// `grads` take a zero gradient and still decay.
    pub fn step(&mut self, store: &mut ParamStore, grads: &IndexMap<String, Tensor>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::NumericFault {
                    layer: name.clone(),
                    detail: format!("non-finite gradient at element {i}"),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for (name, p) in store.params_mut() {
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; p.numel()],
                v: vec![0.0; p.numel()],
            });
            let g = grads.get(name);
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(Error::Size(format!(
                        "gradient of `{name}` has shape {:?}, parameter {:?}",
                        g.shape(),
                        p.shape()
                    )));
                }
            }
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                st.m[i] = ADAM_BETA1 * st.m[i] + (1.0 - ADAM_BETA1) * gi;
                st.v[i] = ADAM_BETA2 * st.v[i] + (1.0 - ADAM_BETA2) * gi * gi;
                let mh = st.m[i] / c1;
                let vh = st.v[i] / c2;
                *w -= lr * self.weight_decay * *w + lr * mh / (vh.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(p: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::filled(&[1], p));
        s
    }

    fn grad(g: f64) -> IndexMap<String, Tensor> {
        IndexMap::from([("p".to_string(), Tensor::filled(&[1], g))])
    }

    #[test]
    fn zero_gradient_is_pure_decay() {
        let mut s = single(1.0);
        AdamW::new(0.1).step(&mut s, &grad(0.0), 0.01).unwrap();
        assert!((s.get("p").unwrap().data()[0] - 0.999).abs() < 1e-15);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        // m_hat = g and v_hat = g^2 at t = 1, so the step is lr * g / (|g| + eps)
        for g in [3.0, -0.5, 1e-3] {
            let mut s = single(0.0);
            AdamW::new(0.0).step(&mut s, &grad(g), 0.01).unwrap();
            let expected = -0.01 * g / (g.abs() + ADAM_EPS);
            assert!((s.get("p").unwrap().data()[0] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn identical_runs_are_bitwise_equal() {
        let run = || {
            let mut s = single(0.3);
            let mut opt = AdamW::new(1e-4);
            for i in 0..50 {
                opt.step(&mut s, &grad((i as f64 * 0.7).sin()), 0.002).unwrap();
            }
            s.get("p").unwrap().data()[0].to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_gradient_is_a_numeric_fault() {
        let mut s = single(1.0);
        let err = AdamW::new(0.0).step(&mut s, &grad(f64::NAN), 0.1).unwrap_err();
        assert!(matches!(err, Error::NumericFault { .. }));
        assert_eq!(s.get("p").unwrap().data()[0], 1.0);
    }

    #[test]
    fn cosine_schedule_examples() {
        assert_eq!(cosine_lr(0, 10, 0.002), 0.002);
        assert!(cosine_lr(10, 10, 0.002).abs() < 1e-18);
        assert!((cosine_lr(5, 10, 0.002) - 0.001).abs() < 1e-18);
    }
}
