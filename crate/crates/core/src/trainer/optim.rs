use super::{TrainConfig, TrainError};
use crate::autodiff::Tensor;
use crate::model::ModelParams;

/// First and second moment estimates, one pair per parameter tensor in
/// [`ModelParams::named_tensors`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Tensor> = params
            .named_tensors()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. `grads` follows
/// [`ModelParams::named_tensors`] order; a missing entry is an error.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &[Option<Tensor>],
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<(), TrainError> {
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    if grads.len() != names.len() || state.m.len() != names.len() {
        return Err(TrainError::Config(format!(
            "{} gradients and {} moment slots for {} parameters",
            grads.len(),
            state.m.len(),
            names.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        match g {
            None => return Err(TrainError::MissingGradient(names[i].clone())),
            Some(g) if g.shape() != state.m[i].shape() => {
                return Err(TrainError::Config(format!("gradient shape mismatch for {}", names[i])))
            }
            Some(_) => {}
        }
    }
    state.t += 1;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    let lr = config.learning_rate;
    for (i, p) in params.tensors_mut().into_iter().enumerate() {
        let g = grads[i].as_ref().expect("checked above").data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m).zip(v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    }
    Ok(())
}
