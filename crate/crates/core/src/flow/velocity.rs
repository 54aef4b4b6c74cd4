//! Velocity fields: the trainable MLP and a few closed-form fields used for
//! integrator and calibration checks.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::autodiff::{kernels, Tape, Tensor, Var};
use crate::rng::{rng_from_seed, standard_normal};

/// A time value entering a traced forward pass: either a plain number or a
/// live graph node (when the start time itself is being optimized).
#[derive(Clone)]
pub enum TimeVar {
    Fixed(f64),
    Traced(Var),
}

/// Sinusoidal embedding of a scalar time: `[sin(w_k t), cos(w_k t)]` for
/// `w_k = 2^k * pi`. `count` must be even.
pub fn time_features(t: f64, count: usize) -> Vec<f64> {
    assert!(count % 2 == 0, "time feature count must be even, got {count}");
    let mut out = Vec::with_capacity(count);
    for k in 0..count / 2 {
        let w = std::f64::consts::PI * (1u64 << k) as f64;
        out.push((w * t).sin());
        out.push((w * t).cos());
    }
    out
}

fn time_features_traced(tape: &Tape, t: &TimeVar, count: usize) -> Var {
    match t {
        TimeVar::Fixed(t) => tape.constant(Tensor::from_vec(time_features(*t, count))),
        TimeVar::Traced(tv) => {
            assert!(count % 2 == 0, "time feature count must be even, got {count}");
            let mut parts = Vec::with_capacity(count);
            for k in 0..count / 2 {
                let w = std::f64::consts::PI * (1u64 << k) as f64;
                let scaled = tv.scale(w);
                parts.push(scaled.sin());
                parts.push(scaled.cos());
            }
            Var::concat(&parts)
        }
    }
}

/// Fully connected tanh network. Input is the flattened state with the time
/// embedding appended; output has the state dimension.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub data_dim: usize,
    pub hidden: Vec<usize>,
    pub time_features: usize,
    /// One `[out, in]` matrix per layer, in forward order.
    pub weights: Vec<Tensor>,
    /// One `[out]` vector per layer.
    pub biases: Vec<Tensor>,
}

impl Mlp {
    /// Layer widths from input to output.
    pub fn layer_dims(data_dim: usize, hidden: &[usize], time_features: usize) -> Vec<usize> {
        let mut dims = vec![data_dim + time_features];
        dims.extend_from_slice(hidden);
        dims.push(data_dim);
        dims
    }

    /// Seeded init: weights ~ N(0, 1/fan_in), biases zero.
    pub fn init(data_dim: usize, hidden: &[usize], time_features: usize, seed: u64) -> Mlp {
        let dims = Self::layer_dims(data_dim, hidden, time_features);
        let mut rng = rng_from_seed(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let scale = 1.0 / (fan_in as f64).sqrt();
            let w: Vec<f64> =
                standard_normal(&mut rng, fan_out * fan_in).into_iter().map(|g| g * scale).collect();
            weights.push(Tensor::new(w, vec![fan_out, fan_in]));
            biases.push(Tensor::zeros(&[fan_out]));
        }
        Mlp { data_dim, hidden: hidden.to_vec(), time_features, weights, biases }
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(Tensor::numel).sum::<usize>()
            + self.biases.iter().map(Tensor::numel).sum::<usize>()
    }

    fn eval(&self, z: &[f64], t: f64) -> Vec<f64> {
        assert_eq!(z.len(), self.data_dim, "state length {} != model dim {}", z.len(), self.data_dim);
        let mut x: Vec<f64> = Vec::with_capacity(self.data_dim + self.time_features);
        x.extend_from_slice(z);
        x.extend_from_slice(&time_features(t, self.time_features));
        let last = self.weights.len() - 1;
        for (i, (w, b)) in self.weights.iter().zip(self.biases.iter()).enumerate() {
            let (out_dim, in_dim) = (w.shape()[0], w.shape()[1]);
            let mut u = vec![0.0; out_dim];
            kernels::matmul(w.data(), &x, out_dim, in_dim, 1, &mut u);
            for (ui, bi) in u.iter_mut().zip(b.data().iter()) {
                *ui += bi;
            }
            if i != last {
                for ui in u.iter_mut() {
                    *ui = ui.tanh();
                }
            }
            x = u;
        }
        x
    }

    fn forward_traced(&self, params: &VelocityVars, z: &Var, t: &TimeVar) -> Var {
        let tape = z.tape().clone();
        let feats = time_features_traced(&tape, t, self.time_features);
        let mut x = Var::concat(&[z.clone(), feats]);
        let last = params.weights.len() - 1;
        for (i, (w, b)) in params.weights.iter().zip(params.biases.iter()).enumerate() {
            x = w.matmul(&x) + b;
            if i != last {
                x = x.tanh();
            }
        }
        x
    }
}

/// The concrete field behind a [`VelocityField`].
#[derive(Clone, Debug)]
pub enum VelocityKind {
    Mlp(Mlp),
    /// v(z, t) = 0
    Zero { data_dim: usize },
    /// v(z, t) = c
    Constant { velocity: Tensor },
    /// v(z, t) = z (closed-form solution e^t * z_0)
    State { data_dim: usize },
    /// v(z, t) = (target - z) / (1 - t): transports any seed to `target`.
    Transport { target: Tensor },
}

/// A velocity field plus a shared function-evaluation counter (NFE
/// accounting). Clones share the counter; checkpoints reset it.
#[derive(Clone, Debug)]
pub struct VelocityField {
    pub kind: VelocityKind,
    nfe: Arc<AtomicU64>,
}

/// Tape handles for the field parameters; empty for closed-form kinds.
pub struct VelocityVars {
    weights: Vec<Var>,
    biases: Vec<Var>,
}

impl VelocityVars {
    pub fn all(&self) -> Vec<&Var> {
        self.weights.iter().chain(self.biases.iter()).collect()
    }
}

impl VelocityField {
    pub fn new(kind: VelocityKind) -> Self {
        VelocityField { kind, nfe: Arc::new(AtomicU64::new(0)) }
    }

    pub fn mlp(mlp: Mlp) -> Self {
        Self::new(VelocityKind::Mlp(mlp))
    }

    pub fn data_dim(&self) -> usize {
        match &self.kind {
            VelocityKind::Mlp(m) => m.data_dim,
            VelocityKind::Zero { data_dim } | VelocityKind::State { data_dim } => *data_dim,
            VelocityKind::Constant { velocity } => velocity.numel(),
            VelocityKind::Transport { target } => target.numel(),
        }
    }

    /// Total velocity-network evaluations since construction (traced and
    /// plain both count).
    pub fn nfe(&self) -> u64 {
        self.nfe.load(Ordering::Relaxed)
    }

    /// Plain (untraced) evaluation.
    pub fn eval(&self, z: &[f64], t: f64) -> Vec<f64> {
        self.nfe.fetch_add(1, Ordering::Relaxed);
        match &self.kind {
            VelocityKind::Mlp(m) => m.eval(z, t),
            VelocityKind::Zero { data_dim } => vec![0.0; *data_dim],
            VelocityKind::Constant { velocity } => velocity.data().to_vec(),
            VelocityKind::State { .. } => z.to_vec(),
            VelocityKind::Transport { target } => {
                assert!(t < 1.0, "transport field is singular at t = 1");
                let s = 1.0 / (1.0 - t);
                target.data().iter().zip(z.iter()).map(|(x, z)| (x - z) * s).collect()
            }
        }
    }

    /// Introduce the parameters on `tape` as differentiable leaves.
    pub fn leaf_params(&self, tape: &Tape) -> VelocityVars {
        self.params_on(tape, true)
    }

    /// Introduce the parameters on `tape` as frozen constants.
    pub fn const_params(&self, tape: &Tape) -> VelocityVars {
        self.params_on(tape, false)
    }

    fn params_on(&self, tape: &Tape, differentiable: bool) -> VelocityVars {
        match &self.kind {
            VelocityKind::Mlp(m) => {
                let enter = |t: &Tensor| {
                    if differentiable {
                        tape.leaf(t.clone())
                    } else {
                        tape.constant(t.clone())
                    }
                };
                VelocityVars {
                    weights: m.weights.iter().map(enter).collect(),
                    biases: m.biases.iter().map(enter).collect(),
                }
            }
            _ => VelocityVars { weights: Vec::new(), biases: Vec::new() },
        }
    }

    /// Traced evaluation on the tape `z` lives on.
    pub fn forward_traced(&self, params: &VelocityVars, z: &Var, t: &TimeVar) -> Var {
        self.nfe.fetch_add(1, Ordering::Relaxed);
        let tape = z.tape().clone();
        match &self.kind {
            VelocityKind::Mlp(m) => m.forward_traced(params, z, t),
            VelocityKind::Zero { data_dim } => tape.constant(Tensor::zeros(&[*data_dim])),
            VelocityKind::Constant { velocity } => tape.constant(velocity.clone()),
            VelocityKind::State { .. } => z.clone(),
            VelocityKind::Transport { target } => {
                let t = match t {
                    TimeVar::Fixed(t) => *t,
                    TimeVar::Traced(_) => {
                        panic!("transport field supports fixed times only")
                    }
                };
                assert!(t < 1.0, "transport field is singular at t = 1");
                let s = 1.0 / (1.0 - t);
                (tape.constant(target.clone()) - z).scale(s)
            }
        }
    }
}
