#![allow(dead_code)]

use gcpmpc::ensemble::{two_step_loss, two_step_loss_and_grad, LossParams, Transition, TwoStepBatch};
use gcpmpc::envs::Quat;
use gcpmpc::nn::{DropoutMask, MlpWeights};
use gcpmpc::planner::Dynamics;
use gcpmpc::rng::Rng;
use ndarray::{Array2, ArrayView2};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

pub fn normal_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
}

pub fn random_batch(rng: &mut Rng, n: usize, sd: usize, ad: usize) -> TwoStepBatch {
    TwoStepBatch {
        s0: normal_matrix(rng, n, sd),
        a0: normal_matrix(rng, n, ad),
        s1: normal_matrix(rng, n, sd),
        a1: normal_matrix(rng, n, ad),
        s2: normal_matrix(rng, n, sd),
    }
}

/// Worst element-wise relative error between the analytic gradient and
/// central differences of the total loss with step `h`.
pub fn gradient_check(
    net: &MlpWeights,
    batch: &TwoStepBatch,
    masks: &[DropoutMask],
    params: &LossParams,
    h: f64,
) -> f64 {
    let (_, grads) = two_step_loss_and_grad(net, batch, masks, params).unwrap();
    let analytic: Vec<f64> = grads.params().copied().collect();
    let mut probe = net.clone();
    let mut worst = 0.0f64;
    for (k, a) in analytic.iter().enumerate() {
        let orig = *probe.params().nth(k).unwrap();
        *probe.params_mut().nth(k).unwrap() = orig + h;
        let up = two_step_loss(&probe, batch, masks, params).unwrap().total;
        *probe.params_mut().nth(k).unwrap() = orig - h;
        let down = two_step_loss(&probe, batch, masks, params).unwrap().total;
        *probe.params_mut().nth(k).unwrap() = orig;
        let fd = (up - down) / (2.0 * h);
        // absolute floor keeps round-off on near-zero entries from dominating
        let rel = (a - fd).abs() / (a.abs() + fd.abs()).max(1e-5);
        worst = worst.max(rel);
    }
    worst
}

pub fn random_unit_quat(rng: &mut Rng) -> Quat {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-6 {
            return q.map(|v| v / n);
        }
    }
}

fn rotation_matrix(q: &Quat) -> [[f64; 3]; 3] {
    let [w, x, y, z] = *q;
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// Rotation angle between two orientations from the trace of `R1ᵀ R2`.
pub fn geodesic_oracle(a: &Quat, b: &Quat) -> f64 {
    let (ra, rb) = (rotation_matrix(a), rotation_matrix(b));
    let mut trace = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            trace += ra[j][i] * rb[j][i];
        }
    }
    ((trace - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

/// `s' = a·s + b·u` in one dimension.
pub struct Linear1d {
    pub a: f64,
    pub b: f64,
}

impl Linear1d {
    pub fn step(&self, s: f64, u: f64) -> f64 {
        self.a * s + self.b * u
    }

    /// `n` two-step transitions from random-action episodes started in
    /// `[-1, 1]`.
    pub fn transitions(&self, rng: &mut Rng, n: usize) -> Vec<Transition> {
        let mut out = Vec::with_capacity(n);
        let mut episode = 0;
        while out.len() < n {
            let mut s = rng.random_range(-1.0..1.0);
            let mut u = rng.random_range(-1.0..1.0);
            for _ in 0..48 {
                if out.len() == n {
                    break;
                }
                let s1 = self.step(s, u);
                let u1 = rng.random_range(-1.0..1.0);
                let s2 = self.step(s1, u1);
                out.push(Transition::new(
                    vec![s],
                    vec![u],
                    vec![s1],
                    vec![u1],
                    vec![s2],
                    episode,
                    0,
                ));
                s = s1;
                u = u1;
            }
            episode += 1;
        }
        out
    }
}

impl Dynamics for Linear1d {
    fn state_dim(&self) -> usize {
        1
    }
    fn action_dim(&self) -> usize {
        1
    }
    fn predict_batch(&self, s: ArrayView2<f64>, u: ArrayView2<f64>) -> gcpmpc::Result<Array2<f64>> {
        Ok(&s * self.a + &u * self.b)
    }
}

/// Next state equals the current one.
pub struct Still {
    pub state_dim: usize,
    pub action_dim: usize,
}

impl Dynamics for Still {
    fn state_dim(&self) -> usize {
        self.state_dim
    }
    fn action_dim(&self) -> usize {
        self.action_dim
    }
    fn predict_batch(&self, s: ArrayView2<f64>, _: ArrayView2<f64>) -> gcpmpc::Result<Array2<f64>> {
        Ok(s.to_owned())
    }
}

/// The true plant wrapped as a model.
pub struct EnvDynamics(pub gcpmpc::envs::EnvSpec);

impl Dynamics for EnvDynamics {
    fn state_dim(&self) -> usize {
        self.0.state_dim()
    }
    fn action_dim(&self) -> usize {
        self.0.action_dim()
    }
    fn predict_batch(&self, s: ArrayView2<f64>, a: ArrayView2<f64>) -> gcpmpc::Result<Array2<f64>> {
        let mut out = Array2::zeros(s.raw_dim());
        for i in 0..s.nrows() {
            let mut state = self.0.reset();
            state.obs = s.row(i).to_vec();
            let next = self.0.step(&state, &a.row(i).to_vec())?;
            out.row_mut(i).assign(&ndarray::ArrayView1::from(&next.obs));
        }
        Ok(out)
    }
}

/// A preset shrunk until a whole run takes a few seconds.
pub fn tiny_config(env: &str, seed: u64) -> gcpmpc::trainer::RunConfig {
    use gcpmpc::trainer::RunConfig;
    let mut c = RunConfig::preset(env, seed).unwrap();
    c.warmup_steps = 100;
    c.ensemble.hidden = vec![8, 8];
    c.ensemble.schedule.max_batches = Some(5);
    c.planner.horizon = 5;
    c.planner.population = 16;
    c.planner.elites = 4;
    c.planner.iterations = 2;
    c.eval_trials = 2;
    c.checkpoint_every = 2;
    c
}
