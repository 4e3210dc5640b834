use super::{NnError, Parameter, Tensor};

/// First and second moment estimates, one pair per parameter.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub step_count: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(params: &[Parameter]) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Tensor::zeros(p.tensor.shape().to_vec()))
                .collect()
        };
        Self {
            step_count: 0,
            first_moment: zeros(),
            second_moment: zeros(),
        }
    }
}

/// AdamW with decoupled weight decay, skipped on bias parameters.
#[derive(Clone, Copy, Debug)]
pub struct AdamW {
    pub lr: f32,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamW {
    pub fn new(lr: f32, weight_decay: f32) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(
        &self,
        params: &mut [Parameter],
        grads: &[Vec<f32>],
        state: &mut OptimizerState,
    ) -> Result<(), NnError> {
        if grads.len() != params.len() || state.first_moment.len() != params.len() {
            return Err(NnError::ShapeMismatch {
                op: "adamw_step",
                detail: format!(
                    "{} parameters, {} gradients, {} moment slots",
                    params.len(),
                    grads.len(),
                    state.first_moment.len()
                ),
            });
        }
        for (p, g) in params.iter().zip(grads) {
            if p.tensor.numel() != g.len() {
                return Err(NnError::ShapeMismatch {
                    op: "adamw_step",
                    detail: format!(
                        "{}: {} values, gradient {}",
                        p.name,
                        p.tensor.numel(),
                        g.len()
                    ),
                });
            }
        }
        state.step_count += 1;
        let t = state.step_count as i32;
        let bc1 = 1.0 - (self.beta1 as f64).powi(t);
        let bc2 = 1.0 - (self.beta2 as f64).powi(t);
        let step_size = (self.lr as f64 / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        for (i, p) in params.iter_mut().enumerate() {
            let decay = if p.is_bias {
                0.0
            } else {
                self.lr * self.weight_decay
            };
            let m = state.first_moment[i].data_mut();
            let v = state.second_moment[i].data_mut();
            for (((theta, &g), m), v) in p.tensor.data_mut().iter_mut().zip(&grads[i]).zip(m).zip(v)
            {
                if decay != 0.0 {
                    *theta -= decay * *theta;
                }
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let denom = v.sqrt() / bc2_sqrt + self.eps;
                *theta -= step_size * *m / denom;
            }
        }
        Ok(())
    }
}
