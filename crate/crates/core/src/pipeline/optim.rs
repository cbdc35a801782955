use crate::encoder::Parameters;
use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// `lr0 * (1 - t/T)`.
pub fn linear_lr(t: usize, total: usize, lr0: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::InvalidArgument("schedule length must be positive".into()));
    }
    if t > total {
        return Err(Error::InvalidArgument(format!(
            "step {t} beyond schedule length {total}"
        )));
    }
    Ok(lr0 * (1.0 - t as f64 / total as f64))
}

/// AdamW with bias correction and decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Updates applied so far.
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &Parameters, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self::for_tensors(&params.values(), beta1, beta2, eps, weight_decay)
    }

    /// State for an arbitrary list of tensors, updated by [`step_tensors`](Self::step_tensors).
    pub fn for_tensors(tensors: &[&Tensor], beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = tensors.iter().map(|t| vec![0.0; t.numel()]).collect();
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update from the gradients stored on `params`.
    pub fn step(&mut self, params: &mut Parameters, lr: f64) -> Result<()> {
        let names = Parameters::names(params.layers.len());
        self.update(params.values_mut(), lr, |i| names[i].clone())
    }

    /// One update over tensors in the order given at construction.
    pub fn step_tensors(&mut self, slots: Vec<&mut Tensor>, lr: f64) -> Result<()> {
        self.update(slots, lr, |i| format!("tensor {i}"))
    }

    fn update(&mut self, slots: Vec<&mut Tensor>, lr: f64, name: impl Fn(usize) -> String) -> Result<()> {
        if slots.len() != self.m.len() || slots.iter().zip(&self.m).any(|(t, m)| t.numel() != m.len()) {
            return Err(Error::Shape(format!(
                "optimizer state for {} tensors does not match the {} given",
                self.m.len(),
                slots.len()
            )));
        }
        if let Some(i) = slots.iter().position(|t| t.grad.is_none()) {
            return Err(Error::InvalidArgument(format!("no gradient for {}", name(i))));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((tensor, m), v) in slots.into_iter().zip(&mut self.m).zip(&mut self.v) {
            let grad = tensor.grad.take().expect("checked above");
            for (((theta, g), mi), vi) in tensor
                .data_mut()
                .iter_mut()
                .zip(&grad)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *theta -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * *theta);
            }
            tensor.grad = Some(grad);
        }
        Ok(())
    }
}
