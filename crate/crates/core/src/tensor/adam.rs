use super::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam optimizer state over a fixed parameter list.
///
/// Moment buffers shape-match their parameters; the step counter
/// increases by exactly one per [`Adam::step`]. When `round_f32` is set
/// (the training path), updated values and moments are rounded through
/// f32 so persistent state survives an f32 checkpoint bit-exactly.
pub struct Adam {
    pub hp: AdamParams,
    pub round_f32: bool,
    step: u64,
    moments: Vec<(Tensor, Tensor)>,
}

impl Adam {
    pub fn new(hp: AdamParams, params: &[Var], tape: &Tape) -> Self {
        let moments = params
            .iter()
            .map(|&p| {
                let shape = tape.shape(p).to_vec();
                (Tensor::zeros(&shape), Tensor::zeros(&shape))
            })
            .collect();
        Adam { hp, round_f32: false, step: 0, moments }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update over all parameters. Requires every grad populated;
    /// grads are left untouched.
    pub fn step(&mut self, tape: &mut Tape, params: &[Var]) -> Result<()> {
        if params.len() != self.moments.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} params, got {}",
                self.moments.len(),
                params.len()
            )));
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.hp.beta1.powf(t);
        let bc2 = 1.0 - self.hp.beta2.powf(t);
        for (idx, &p) in params.iter().enumerate() {
            let grad = tape
                .grad(p)
                .ok_or_else(|| Error::Contract(format!("param {idx} has no gradient")))?
                .clone();
            let (m, v) = &mut self.moments[idx];
            let value = tape.value_mut(p);
            for j in 0..grad.numel() {
                let g = grad.data()[j];
                let mj = self.hp.beta1 * m.data()[j] + (1.0 - self.hp.beta1) * g;
                let vj = self.hp.beta2 * v.data()[j] + (1.0 - self.hp.beta2) * g * g;
                m.data_mut()[j] = mj;
                v.data_mut()[j] = vj;
                let m_hat = mj / bc1;
                let v_hat = vj / bc2;
                value.data_mut()[j] -= self.hp.lr * m_hat / (v_hat.sqrt() + self.hp.eps);
            }
            if self.round_f32 {
                value.round_to_f32();
                m.round_to_f32();
                v.round_to_f32();
            }
        }
        Ok(())
    }

    pub fn moments(&self, idx: usize) -> (&Tensor, &Tensor) {
        (&self.moments[idx].0, &self.moments[idx].1)
    }

    /// Restore step count and moment buffers (checkpoint resume).
    pub fn restore(&mut self, step: u64, moments: Vec<(Tensor, Tensor)>) -> Result<()> {
        if moments.len() != self.moments.len() {
            return Err(Error::Contract("moment count mismatch on restore".into()));
        }
        for ((m, v), (em, ev)) in moments.iter().zip(&self.moments) {
            if m.shape() != em.shape() || v.shape() != ev.shape() {
                return Err(Error::Contract("moment shape mismatch on restore".into()));
            }
        }
        self.step = step;
        self.moments = moments;
        Ok(())
    }
}
