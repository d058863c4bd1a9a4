use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{GrffError, Result};
use crate::tensor::Tensor;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Process-unique identity of a parameter; clones share it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(u64);

impl ParamId {
    fn fresh() -> Self {
        ParamId(NEXT_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// First/second moment buffers and step counter of Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

/// A trainable tensor together with its gradient slot and optimizer state.
#[derive(Clone, Debug)]
pub struct Parameter {
    id: ParamId,
    value: Tensor,
    grad: Option<Tensor>,
    adam: AdamState,
}

impl Parameter {
    pub fn new(value: Tensor) -> Self {
        let n = value.len();
        Parameter {
            id: ParamId::fresh(),
            value,
            grad: None,
            adam: AdamState {
                m: vec![0.0; n],
                v: vec![0.0; n],
                step: 0,
            },
        }
    }

    pub fn with_state(value: Tensor, adam: AdamState) -> Result<Self> {
        if adam.m.len() != value.len() || adam.v.len() != value.len() {
            return Err(GrffError::Shape("adam moments do not match parameter".into()));
        }
        let mut p = Parameter::new(value);
        p.adam = adam;
        Ok(p)
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor {
        &mut self.value
    }

    pub fn grad(&self) -> Option<&Tensor> {
        self.grad.as_ref()
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    pub fn accumulate_grad(&mut self, g: &Tensor) {
        match &mut self.grad {
            Some(existing) => existing
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(e, v)| *e += v),
            None => self.grad = Some(g.clone()),
        }
    }

    /// Sets the gradient to zeros (the slot stays populated).
    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.data_mut().iter_mut().for_each(|v| *v = 0.0);
        } else {
            self.grad = Some(Tensor::zeros(self.value.shape()));
        }
    }

    /// Empties the gradient slot.
    pub fn clear_grad(&mut self) {
        self.grad = None;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of every parameter in `params`.
///
/// Each parameter keeps its own step counter, so a parameter that joins
/// training late starts with fresh moments and its own bias correction.
pub fn adam_step(params: &mut [&mut Parameter], cfg: &AdamConfig) -> Result<()> {
    if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
        return Err(GrffError::Contract(format!(
            "adam step on parameter {:?} with no gradient",
            p.id
        )));
    }
    for p in params.iter_mut() {
        let Parameter {
            value, grad, adam, ..
        } = &mut **p;
        let g = grad.as_ref().expect("checked above");
        adam.step += 1;
        let t = adam.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (((w, &g), m), v) in value
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(adam.m.iter_mut())
            .zip(adam.v.iter_mut())
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
