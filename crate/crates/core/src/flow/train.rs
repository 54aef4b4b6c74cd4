//! Conditional flow-matching objective and the training loop around it.

use crate::autodiff::{Tape, Tensor, Var};
use crate::opt::{Adam, AdamSettings};
use crate::rng::{rng_from_seed, standard_normal};
use rand::Rng;

use super::velocity::{Mlp, TimeVar, VelocityField, VelocityVars};
use super::{FlowError, FlowModel, PathSchedule, TrainMeta};

/// Velocity-network architecture. Defaults give widths
/// `[d + 8, 128, 128, d]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetSpec {
    pub hidden: Vec<usize>,
    pub time_features: usize,
}

impl Default for NetSpec {
    fn default() -> Self {
        NetSpec { hidden: vec![128, 128], time_features: 8 }
    }
}

#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamSettings,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings { steps: 2000, batch_size: 32, adam: AdamSettings::default() }
    }
}

fn validate_batch(
    data_dim: usize,
    xs: &[Tensor],
    zs: &[Tensor],
    ts: &[f64],
) -> Result<(), FlowError> {
    if xs.is_empty() {
        return Err(FlowError::EmptyBatch);
    }
    if xs.len() != zs.len() || xs.len() != ts.len() {
        return Err(FlowError::BatchLengthMismatch { xs: xs.len(), zs: zs.len(), ts: ts.len() });
    }
    for (i, x) in xs.iter().enumerate() {
        if x.numel() != data_dim || zs[i].numel() != data_dim {
            return Err(FlowError::DatasetDimMismatch {
                index: i,
                expected: data_dim,
                got: x.numel().max(zs[i].numel()),
            });
        }
        if !(0.0..=1.0).contains(&ts[i]) {
            return Err(FlowError::TimeOutOfRange(ts[i]));
        }
    }
    Ok(())
}

/// Mean over the batch of `||v_theta(z_t, t) - (x - z)||^2`, evaluated
/// without a tape. The caller supplies seeds and times so that runs are
/// reproducible.
pub fn fm_loss(
    model: &FlowModel,
    xs: &[Tensor],
    zs: &[Tensor],
    ts: &[f64],
) -> Result<f64, FlowError> {
    validate_batch(model.data_dim, xs, zs, ts)?;
    let mut total = 0.0;
    for i in 0..xs.len() {
        let z_t = super::interpolate(model.path, &xs[i], &zs[i], ts[i])?;
        let v = model.velocity.eval(z_t.data(), ts[i]);
        let err: f64 = v
            .iter()
            .zip(xs[i].data().iter().zip(zs[i].data().iter()))
            .map(|(v, (x, z))| {
                let diff = v - (x - z);
                diff * diff
            })
            .sum();
        total += err;
    }
    Ok(total / xs.len() as f64)
}

/// Traced version of [`fm_loss`], differentiable with respect to the
/// parameters entered in `params`.
pub fn fm_loss_traced(
    tape: &Tape,
    velocity: &VelocityField,
    params: &VelocityVars,
    path: PathSchedule,
    xs: &[Tensor],
    zs: &[Tensor],
    ts: &[f64],
) -> Result<Var, FlowError> {
    validate_batch(velocity.data_dim(), xs, zs, ts)?;
    let mut total: Option<Var> = None;
    for i in 0..xs.len() {
        let z_t = tape.constant(super::interpolate(path, &xs[i], &zs[i], ts[i])?);
        let target = tape.constant(super::target_velocity(&xs[i], &zs[i])?);
        let v = velocity.forward_traced(params, &z_t, &TimeVar::Fixed(ts[i]));
        let err = (v - target).square().sum();
        total = Some(match total {
            Some(acc) => acc + err,
            None => err,
        });
    }
    Ok(total.expect("non-empty batch").scale(1.0 / xs.len() as f64))
}

/// 100-step moving average of `trace`; `true` when it increases anywhere in
/// the final half.
fn moving_average_increases(trace: &[f64]) -> bool {
    let window = 100.min(trace.len().max(1));
    if trace.len() < 2 * window {
        return false;
    }
    let ma: Vec<f64> = trace
        .windows(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect();
    let half = ma.len() / 2;
    ma[half..].windows(2).any(|pair| pair[1] > pair[0] + 1e-12)
}

/// Train an MLP velocity field on `dataset` with the conditional
/// flow-matching objective. Objects are flattened; all must share one
/// dimension. Identical inputs and seed reproduce identical parameters.
pub fn train_fm(
    dataset: &[Tensor],
    spec: &NetSpec,
    settings: &TrainSettings,
    seed: u64,
) -> Result<FlowModel, FlowError> {
    if dataset.is_empty() {
        return Err(FlowError::EmptyDataset);
    }
    let data_dim = dataset[0].numel();
    for (i, x) in dataset.iter().enumerate() {
        if x.numel() != data_dim {
            return Err(FlowError::DatasetDimMismatch { index: i, expected: data_dim, got: x.numel() });
        }
    }
    let flat: Vec<Tensor> =
        dataset.iter().map(|x| x.reshaped(vec![x.numel()])).collect();

    let mlp = Mlp::init(data_dim, &spec.hidden, spec.time_features, seed);
    // Mutable parameter store in declaration order: all layer weights, then
    // all layer biases. Must match the order of `VelocityVars::all`.
    let mut params: Vec<Vec<f64>> = Vec::new();
    let mut shapes: Vec<Vec<usize>> = Vec::new();
    for w in &mlp.weights {
        params.push(w.data().to_vec());
        shapes.push(w.shape().to_vec());
    }
    for b in &mlp.biases {
        params.push(b.data().to_vec());
        shapes.push(b.shape().to_vec());
    }
    let sizes: Vec<usize> = params.iter().map(Vec::len).collect();
    let mut adam = Adam::new(settings.adam, &sizes);

    let mut sample_rng = rng_from_seed(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut trace = Vec::with_capacity(settings.steps);
    let arch = (mlp.hidden.clone(), mlp.time_features);

    for step in 0..settings.steps {
        // Assemble the batch from the seeded stream: indices, seeds, times.
        let mut xs = Vec::with_capacity(settings.batch_size);
        let mut zs = Vec::with_capacity(settings.batch_size);
        let mut ts = Vec::with_capacity(settings.batch_size);
        for _ in 0..settings.batch_size {
            let idx = sample_rng.gen_range(0..flat.len());
            xs.push(flat[idx].clone());
            zs.push(Tensor::from_vec(standard_normal(&mut sample_rng, data_dim)));
            ts.push(sample_rng.gen::<f64>());
        }

        let field = VelocityField::mlp(rebuild_mlp(data_dim, &arch, &params, &shapes));
        let tape = Tape::new();
        let vars = field.leaf_params(&tape);
        let loss = fm_loss_traced(&tape, &field, &vars, PathSchedule::Linear, &xs, &zs, &ts)?;
        let loss_value = loss.value().item();
        if !loss_value.is_finite() {
            return Err(FlowError::NonFiniteLoss { step });
        }
        trace.push(loss_value);

        let wrt = vars.all();
        let grads = tape.backward(&loss, &wrt).expect("scalar loss");
        let grad_slices: Vec<&[f64]> = grads.iter().map(|g| g.data()).collect();
        let mut param_refs: Vec<&mut [f64]> =
            params.iter_mut().map(|p| p.as_mut_slice()).collect();
        adam.step(&mut param_refs, &grad_slices);
    }

    let final_mlp = rebuild_mlp(data_dim, &arch, &params, &shapes);
    let plateau_warning = moving_average_increases(&trace);
    Ok(FlowModel::new(
        VelocityField::mlp(final_mlp),
        PathSchedule::Linear,
        TrainMeta { loss_trace: trace, seed, steps: settings.steps, plateau_warning },
    ))
}

fn rebuild_mlp(
    data_dim: usize,
    arch: &(Vec<usize>, usize),
    params: &[Vec<f64>],
    shapes: &[Vec<usize>],
) -> Mlp {
    let layers = params.len() / 2;
    let tensor_at =
        |i: usize| Tensor::new(params[i].clone(), shapes[i].clone());
    Mlp {
        data_dim,
        hidden: arch.0.clone(),
        time_features: arch.1,
        weights: (0..layers).map(tensor_at).collect(),
        biases: (layers..2 * layers).map(tensor_at).collect(),
    }
}
