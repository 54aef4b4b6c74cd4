//! Flow-matching prior: probability path, velocity network, training
//! objective and loop.

mod train;
mod velocity;

pub use train::{fm_loss, fm_loss_traced, train_fm, NetSpec, TrainSettings};
pub use velocity::{time_features, Mlp, TimeVar, VelocityField, VelocityKind, VelocityVars};

use crate::autodiff::{Tensor, Var};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum FlowError {
    #[error("time {0} outside [0, 1]")]
    TimeOutOfRange(f64),
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("batch is empty")]
    EmptyBatch,
    #[error("batch/seed/time lengths differ: {xs} objects, {zs} seeds, {ts} times")]
    BatchLengthMismatch { xs: usize, zs: usize, ts: usize },
    #[error("dataset object {index} has {got} elements, expected {expected}")]
    DatasetDimMismatch { index: usize, expected: usize, got: usize },
    #[error("non-finite loss at step {step}; learning rate is likely too high")]
    NonFiniteLoss { step: usize },
}

/// Interpolation schedule (alpha_t, beta_t) of the probability path.
/// `alpha(0) = 0, alpha(1) = 1, beta(0) = 1, beta(1) = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathSchedule {
    /// alpha(t) = t, beta(t) = 1 - t.
    Linear,
}

impl PathSchedule {
    pub fn alpha(&self, t: f64) -> f64 {
        match self {
            PathSchedule::Linear => t,
        }
    }

    pub fn beta(&self, t: f64) -> f64 {
        match self {
            PathSchedule::Linear => 1.0 - t,
        }
    }

    pub fn alpha_traced(&self, t: &Var) -> Var {
        match self {
            PathSchedule::Linear => t.clone(),
        }
    }

    pub fn beta_traced(&self, t: &Var) -> Var {
        match self {
            PathSchedule::Linear => t.neg().add_scalar(1.0),
        }
    }
}

/// Point on the path between seed `z` and object `x`:
/// `alpha(t) * x + beta(t) * z`.
pub fn interpolate(path: PathSchedule, x: &Tensor, z: &Tensor, t: f64) -> Result<Tensor, FlowError> {
    if !(0.0..=1.0).contains(&t) {
        return Err(FlowError::TimeOutOfRange(t));
    }
    if x.shape() != z.shape() {
        return Err(FlowError::ShapeMismatch(x.shape().to_vec(), z.shape().to_vec()));
    }
    let (a, b) = (path.alpha(t), path.beta(t));
    Ok(Tensor::new(
        x.data().iter().zip(z.data().iter()).map(|(x, z)| a * x + b * z).collect(),
        x.shape().to_vec(),
    ))
}

/// Conditional target field of the linear path: d/dt [t x + (1-t) z] = x - z,
/// independent of t.
pub fn target_velocity(x: &Tensor, z: &Tensor) -> Result<Tensor, FlowError> {
    if x.shape() != z.shape() {
        return Err(FlowError::ShapeMismatch(x.shape().to_vec(), z.shape().to_vec()));
    }
    Ok(Tensor::new(
        x.data().iter().zip(z.data().iter()).map(|(x, z)| x - z).collect(),
        x.shape().to_vec(),
    ))
}

/// Training provenance carried by a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub loss_trace: Vec<f64>,
    pub seed: u64,
    pub steps: usize,
    /// Set when the 100-step moving average of the loss increased somewhere
    /// over the final half of training.
    pub plateau_warning: bool,
}

impl TrainMeta {
    pub fn untrained() -> Self {
        TrainMeta { loss_trace: Vec::new(), seed: 0, steps: 0, plateau_warning: false }
    }
}

/// A trained (or hand-constructed) flow prior.
#[derive(Debug, Clone)]
pub struct FlowModel {
    pub velocity: VelocityField,
    pub path: PathSchedule,
    pub data_dim: usize,
    pub meta: TrainMeta,
}

impl FlowModel {
    pub fn new(velocity: VelocityField, path: PathSchedule, meta: TrainMeta) -> Self {
        let data_dim = velocity.data_dim();
        FlowModel { velocity, path, data_dim, meta }
    }

    /// Convenience for closed-form fields in tests and diagnostics.
    pub fn analytic(kind: VelocityKind) -> Self {
        Self::new(VelocityField::new(kind), PathSchedule::Linear, TrainMeta::untrained())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let p = PathSchedule::Linear;
        assert_eq!(p.alpha(0.0), 0.0);
        assert_eq!(p.alpha(1.0), 1.0);
        assert_eq!(p.beta(0.0), 1.0);
        assert_eq!(p.beta(1.0), 0.0);
    }

    #[test]
    fn interpolate_endpoints_and_midpoint() {
        let x = Tensor::from_vec(vec![1.0, 1.0]);
        let z = Tensor::from_vec(vec![0.0, 0.0]);
        let p = PathSchedule::Linear;
        assert_eq!(interpolate(p, &x, &z, 0.0).unwrap().data(), z.data());
        assert_eq!(interpolate(p, &x, &z, 1.0).unwrap().data(), x.data());
        assert_eq!(interpolate(p, &x, &z, 0.25).unwrap().data(), &[0.25, 0.25]);
    }

    #[test]
    fn interpolate_rejects_time_outside_unit_interval() {
        let x = Tensor::from_vec(vec![1.0]);
        let z = Tensor::from_vec(vec![0.0]);
        assert!(matches!(
            interpolate(PathSchedule::Linear, &x, &z, 1.5),
            Err(FlowError::TimeOutOfRange(_))
        ));
    }

    #[test]
    fn interpolate_is_linear_in_each_argument() {
        let p = PathSchedule::Linear;
        let x1 = Tensor::from_vec(vec![1.0, -2.0]);
        let x2 = Tensor::from_vec(vec![0.5, 3.0]);
        let z = Tensor::from_vec(vec![0.2, 0.4]);
        let t = 0.37;
        // interpolate(a*x1 + b*x2, z) == a*interp(x1,z,..) + b*interp(x2,z,..) - (a+b-1)*beta*z
        // checked through the simpler route: difference in x maps linearly.
        let lhs = interpolate(p, &x1, &z, t).unwrap();
        let rhs = interpolate(p, &x2, &z, t).unwrap();
        let d_in: Vec<f64> =
            x1.data().iter().zip(x2.data().iter()).map(|(a, b)| a - b).collect();
        let d_out: Vec<f64> =
            lhs.data().iter().zip(rhs.data().iter()).map(|(a, b)| a - b).collect();
        for (di, do_) in d_in.iter().zip(d_out.iter()) {
            assert!((do_ - p.alpha(t) * di).abs() < 1e-12);
        }
    }

    #[test]
    fn target_velocity_examples() {
        let x = Tensor::from_vec(vec![2.0, 0.0]);
        let z = Tensor::from_vec(vec![0.0, 2.0]);
        assert_eq!(target_velocity(&x, &z).unwrap().data(), &[2.0, -2.0]);
        assert_eq!(target_velocity(&x, &x).unwrap().data(), &[0.0, 0.0]);
        let x3 = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
        let zero = Tensor::zeros(&[3]);
        assert_eq!(target_velocity(&x3, &zero).unwrap().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn target_velocity_rejects_shape_mismatch() {
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        let z = Tensor::from_vec(vec![1.0]);
        assert!(matches!(target_velocity(&x, &z), Err(FlowError::ShapeMismatch(_, _))));
    }
}
