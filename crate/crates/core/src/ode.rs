//! Euler integration of the learned velocity field.
//!
//! Forward generation runs `t_start -> 1` in `steps` equal steps; inversion
//! runs `1 -> 0`. Gradients through generation come from unrolling the
//! discrete steps on the tape (differentiate the scheme actually executed,
//! not a continuous adjoint), so they are exact for the discrete objective.

use crate::autodiff::{kernels, Tensor, Var};
use crate::flow::{FlowModel, TimeVar, VelocityVars};

#[derive(Debug, thiserror::Error)]
pub enum OdeError {
    #[error("integration needs at least one step")]
    ZeroSteps,
    #[error("start time {0} outside [0, 1)")]
    BadStartTime(f64),
    #[error("state dimension {got} does not match model dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite state after Euler step {step}")]
    NonFinite { step: usize },
    #[error("generate requires a forward spec; use invert for the backward pass")]
    WrongDirection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// How to discretize the flow: step count, start time, direction.
/// Forward covers `[t_start, 1]`; backward covers `[1, 0]` (whole interval).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegrationSpec {
    pub steps: usize,
    pub t_start: f64,
    pub direction: Direction,
}

impl IntegrationSpec {
    pub fn forward(steps: usize) -> Result<Self, OdeError> {
        Self::forward_from(steps, 0.0)
    }

    pub fn forward_from(steps: usize, t_start: f64) -> Result<Self, OdeError> {
        if steps == 0 {
            return Err(OdeError::ZeroSteps);
        }
        if !(0.0..1.0).contains(&t_start) {
            return Err(OdeError::BadStartTime(t_start));
        }
        Ok(IntegrationSpec { steps, t_start, direction: Direction::Forward })
    }

    pub fn backward(steps: usize) -> Result<Self, OdeError> {
        if steps == 0 {
            return Err(OdeError::ZeroSteps);
        }
        Ok(IntegrationSpec { steps, t_start: 0.0, direction: Direction::Backward })
    }
}

/// One plain Euler update `state += h * v(state, t)`, shared by generation,
/// inversion and the interleaving solver so that all of them produce
/// bit-identical trajectories for the same inputs.
pub(crate) fn euler_step(model: &FlowModel, state: &mut [f64], t: f64, h: f64) {
    let v = model.velocity.eval(state, t);
    kernels::axpy(h, &v, state);
}

fn check_finite(state: &[f64], step: usize) -> Result<(), OdeError> {
    if state.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(OdeError::NonFinite { step })
    }
}

/// Integrate the flow forward from `spec.t_start` to 1, starting at seed `z`.
pub fn generate(model: &FlowModel, z: &Tensor, spec: &IntegrationSpec) -> Result<Tensor, OdeError> {
    if spec.direction != Direction::Forward {
        return Err(OdeError::WrongDirection);
    }
    if z.numel() != model.data_dim {
        return Err(OdeError::DimensionMismatch { expected: model.data_dim, got: z.numel() });
    }
    let steps = spec.steps;
    let h = (1.0 - spec.t_start) / steps as f64;
    let mut state = z.data().to_vec();
    check_finite(&state, 0)?;
    for i in 0..steps {
        let t_i = spec.t_start + i as f64 * h;
        euler_step(model, &mut state, t_i, h);
        check_finite(&state, i)?;
    }
    Ok(Tensor::from_vec(state))
}

/// Backward pass of the governing ODE from the object `x` at t = 1 down to
/// t = 0: `state -= (1/steps) * v(state, t_i)` along `t_i = 1 - i/steps`.
pub fn invert(model: &FlowModel, x: &Tensor, steps: usize) -> Result<Tensor, OdeError> {
    if steps == 0 {
        return Err(OdeError::ZeroSteps);
    }
    if x.numel() != model.data_dim {
        return Err(OdeError::DimensionMismatch { expected: model.data_dim, got: x.numel() });
    }
    let h = 1.0 / steps as f64;
    let mut state = x.data().to_vec();
    check_finite(&state, 0)?;
    for i in 0..steps {
        let t_i = 1.0 - i as f64 * h;
        euler_step(model, &mut state, t_i, -h);
        check_finite(&state, i)?;
    }
    Ok(Tensor::from_vec(state))
}

/// Traced forward generation: the returned node depends on `z` (and on
/// `t_start` when it is [`TimeVar::Traced`]), so the whole integration path
/// can be differentiated. `params` must come from the same model's velocity
/// field, entered on `z`'s tape.
pub fn generate_traced(
    model: &FlowModel,
    params: &VelocityVars,
    z: &Var,
    t_start: &TimeVar,
    steps: usize,
) -> Result<Var, OdeError> {
    if steps == 0 {
        return Err(OdeError::ZeroSteps);
    }
    let got = z.value().numel();
    if got != model.data_dim {
        return Err(OdeError::DimensionMismatch { expected: model.data_dim, got });
    }
    let mut state = z.clone();
    match t_start {
        TimeVar::Fixed(t0) => {
            if !(0.0..1.0).contains(t0) {
                return Err(OdeError::BadStartTime(*t0));
            }
            // Same arithmetic as plain `generate`, so values agree bitwise.
            let h = (1.0 - t0) / steps as f64;
            for i in 0..steps {
                let t_i = t0 + i as f64 * h;
                let v = model.velocity.forward_traced(params, &state, &TimeVar::Fixed(t_i));
                state = state + v.scale(h);
                if !state.value().all_finite() {
                    return Err(OdeError::NonFinite { step: i });
                }
            }
        }
        TimeVar::Traced(t0) => {
            // h = (1 - t0) / steps as a graph scalar; step times chain off t0.
            let h = t0.neg().add_scalar(1.0).scale(1.0 / steps as f64);
            for i in 0..steps {
                let t_i =
                    if i == 0 { t0.clone() } else { t0.clone() + h.scale(i as f64) };
                let v = model.velocity.forward_traced(params, &state, &TimeVar::Traced(t_i));
                state = state + v.scale_by(&h);
                if !state.value().all_finite() {
                    return Err(OdeError::NonFinite { step: i });
                }
            }
        }
    }
    Ok(state)
}
