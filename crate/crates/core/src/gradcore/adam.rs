use super::{GradError, Tensor};

/// Per-parameter Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of `param` in place.
pub fn adam_step(
    name: &str,
    param: &mut Tensor,
    grad: &Tensor,
    state: &mut AdamState,
    learning_rate: f64,
) -> Result<(), GradError> {
    if param.shape() != grad.shape() || state.first_moment.len() != param.len() {
        return Err(GradError::ShapeMismatch {
            op: "adam_step",
            left: param.shape().to_vec(),
            right: grad.shape().to_vec(),
        });
    }
    if !(learning_rate > 0.0) {
        return Err(GradError::InvalidArgument(format!(
            "learning rate must be > 0, got {learning_rate}"
        )));
    }
    if grad.data().iter().any(|g| g.is_nan()) {
        return Err(GradError::NonFinite(name.to_string()));
    }
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (((p, &g), m), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(&mut state.first_moment)
        .zip(&mut state.second_moment)
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= learning_rate * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// Adam over an ordered list of named parameter tensors.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            states: params.into_iter().map(|p| AdamState::new(p.len())).collect(),
        }
    }

    pub fn states(&self) -> &[AdamState] {
        &self.states
    }

    /// Applies one update. `params` and `grads` must be in construction order.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = (String, &'a mut Tensor)>,
        grads: &[&Tensor],
    ) -> Result<(), GradError> {
        let params: Vec<_> = params.into_iter().collect();
        if params.len() != self.states.len() || grads.len() != self.states.len() {
            return Err(GradError::InvalidArgument(format!(
                "optimizer tracks {} parameters, got {} params and {} grads",
                self.states.len(),
                params.len(),
                grads.len()
            )));
        }
        // validate everything first so a NaN leaves all parameters untouched
        for ((name, _), g) in params.iter().zip(grads) {
            if g.data().iter().any(|v| v.is_nan()) {
                return Err(GradError::NonFinite(name.clone()));
            }
        }
        for (((name, p), g), s) in params.into_iter().zip(grads).zip(&mut self.states) {
            adam_step(&name, p, g, s, self.learning_rate)?;
        }
        Ok(())
    }
}
