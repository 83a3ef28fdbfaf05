//! Training and posterior inference: first-order optimizers, Hamiltonian
//! Monte Carlo, REINFORCE, Monte-Carlo EM and maximum likelihood.

use std::collections::BTreeMap;

use rand_distr::{Distribution as _, StandardNormal};
use rand::Rng;

use crate::dist::RngStream;
use crate::error::{Error, Result};
use crate::logprob::{log_probability_from_value_trajectory, log_probability_per_row, ObservedTrajectory};
use crate::network::{Network, ParamSet};
use crate::runtime::Runtime;
use crate::tensor::{Gradients, Tape, Tensor};

/// Gradients keyed by parameter name.
pub type ParamGrads = BTreeMap<String, Tensor>;

/// Reads the gradient of every watched parameter.
pub fn param_grads(watched: &ParamSet, grads: &Gradients) -> Result<ParamGrads> {
    watched
        .iter()
        .map(|(k, v)| Ok((k.to_string(), grads.wrt(v)?)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

/// A first-order minimizer over a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Default for Optimizer {
    fn default() -> Self {
        Self::adam(1e-2)
    }
}

impl Optimizer {
    pub fn sgd(learning_rate: f64) -> Self {
        Self::with_kind(OptimizerKind::Sgd, learning_rate)
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self::with_kind(
            OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            learning_rate,
        )
    }

    pub fn with_kind(kind: OptimizerKind, learning_rate: f64) -> Self {
        Optimizer {
            kind,
            learning_rate,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// One descent step on `params` along `grads`. Parameters without a
    /// gradient are left alone.
    pub fn apply(&mut self, params: &mut ParamSet, grads: &ParamGrads) -> Result<()> {
        self.step += 1;
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for name in names {
            let Some(g) = grads.get(&name) else { continue };
            let p = params.get(&name)?;
            if g.shape() != p.shape() {
                return Err(Error::shape("optimizer", p.shape(), g.shape()));
            }
            let mut x = p.to_vec();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (xi, gi) in x.iter_mut().zip(g.data()) {
                        *xi -= self.learning_rate * gi;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; x.len()]);
                    let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; x.len()]);
                    let c1 = 1.0 - beta1.powi(self.step as i32);
                    let c2 = 1.0 - beta2.powi(self.step as i32);
                    for i in 0..x.len() {
                        let gi = g.data()[i];
                        m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                        v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                        let mh = m[i] / c1;
                        let vh = v[i] / c2;
                        x[i] -= self.learning_rate * mh / (vh.sqrt() + eps);
                    }
                }
            }
            params.set(&name, Tensor::from_vec(p.shape().to_vec(), x)?)?;
        }
        Ok(())
    }
}

/// Fixed-step HMC with an identity mass matrix.
///
/// The defaults (`ε = 0.9`, 2 leapfrog steps) accept roughly 80-95% of
/// proposals on unit-scale Gaussian targets of low dimension.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HmcConfig {
    pub step_size: f64,
    pub leapfrog_steps: usize,
    pub num_samples: usize,
    pub burn_in: usize,
}

impl Default for HmcConfig {
    fn default() -> Self {
        HmcConfig {
            step_size: 0.9,
            leapfrog_steps: 2,
            num_samples: 1000,
            burn_in: 100,
        }
    }
}

impl HmcConfig {
    fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) || self.leapfrog_steps == 0 || self.num_samples == 0 {
            return Err(Error::config("HMC needs step_size > 0, leapfrog_steps >= 1, num_samples >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct HmcResult {
    pub samples: Vec<Tensor>,
    /// Fraction of accepted proposals after burn-in (per row, averaged, in
    /// row-wise mode).
    pub acceptance_rate: f64,
    pub last: Tensor,
}

/// Log-density (and its gradient) evaluated on a fresh tape.
fn value_and_grad(target: &dyn Fn(&Tensor) -> Result<Tensor>, x: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    let tape = Tape::new();
    let leaf = tape.leaf(x);
    let lp = target(&leaf)?;
    let total = lp.reduce_sum();
    let g = if total.is_taped() {
        tape.backward(&total)?.wrt(&leaf)?
    } else {
        Tensor::zeros(x.shape().to_vec())
    };
    Ok((lp.to_vec(), g))
}

/// Hamiltonian Monte Carlo targeting `target`.
///
/// If `target` returns a scalar the chain is joint. If it returns one value
/// per leading row of `init` (a density that factorizes over rows), each row
/// is accepted or rejected on its own, which amounts to running independent
/// chains that share an integrator.
pub fn hmc_sample(
    target: &dyn Fn(&Tensor) -> Result<Tensor>,
    init: &Tensor,
    cfg: &HmcConfig,
    seed: u64,
) -> Result<HmcResult> {
    cfg.validate()?;
    let (mut lp, mut grad) = value_and_grad(target, init)?;
    if lp.iter().any(|v| !v.is_finite()) {
        return Err(Error::Inference("target log-density is not finite at the initial point".into()));
    }
    let rows = lp.len();
    if rows != 1 && (init.rank() == 0 || init.shape()[0] != rows) {
        return Err(Error::Inference(format!(
            "target returned {rows} values for a state of shape {:?}",
            init.shape()
        )));
    }
    let per_row = init.numel() / rows;
    let root = RngStream::from_label(seed, "hmc");
    let mut x = init.to_vec();
    let mut samples = Vec::with_capacity(cfg.num_samples);
    let mut accepted = 0usize;
    let eps = cfg.step_size;
    for iter in 0..cfg.burn_in + cfg.num_samples {
        let mut rng = root.child(iter as u64).row(0);
        let p0: Vec<f64> = (0..x.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut q = x.clone();
        let mut p = p0.clone();
        let mut g = grad.to_vec();
        // Leapfrog: half momentum step, alternating full steps, half step.
        for (pi, gi) in p.iter_mut().zip(&g) {
            *pi += 0.5 * eps * gi;
        }
        let mut new_lp = lp.clone();
        let mut new_grad = grad.clone();
        for l in 0..cfg.leapfrog_steps {
            for (qi, pi) in q.iter_mut().zip(&p) {
                *qi += eps * pi;
            }
            let (v, gr) = value_and_grad(target, &Tensor::from_vec(init.shape().to_vec(), q.clone())?)?;
            new_lp = v;
            g = gr.to_vec();
            new_grad = gr;
            let scale = if l + 1 == cfg.leapfrog_steps { 0.5 } else { 1.0 };
            for (pi, gi) in p.iter_mut().zip(&g) {
                *pi += scale * eps * gi;
            }
        }
        let mut gx = grad.to_vec();
        let new_g = new_grad.to_vec();
        for r in 0..rows {
            let span = r * per_row..(r + 1) * per_row;
            let k0: f64 = p0[span.clone()].iter().map(|v| 0.5 * v * v).sum();
            let k1: f64 = p[span.clone()].iter().map(|v| 0.5 * v * v).sum();
            let log_ratio = (new_lp[r] - k1) - (lp[r] - k0);
            let u: f64 = rng.random();
            let ok = log_ratio.is_finite() && new_lp[r].is_finite() && u.ln() < log_ratio;
            if ok {
                x[span.clone()].copy_from_slice(&q[span.clone()]);
                gx[span.clone()].copy_from_slice(&new_g[span]);
                lp[r] = new_lp[r];
                if iter >= cfg.burn_in {
                    accepted += 1;
                }
            }
        }
        grad = Tensor::from_vec(init.shape().to_vec(), gx)?;
        if iter >= cfg.burn_in {
            samples.push(Tensor::from_vec(init.shape().to_vec(), x.clone())?);
        }
    }
    Ok(HmcResult {
        acceptance_rate: accepted as f64 / (cfg.num_samples * rows) as f64,
        last: Tensor::from_vec(init.shape().to_vec(), x)?,
        samples,
    })
}

/// Where REINFORCE reads its reward and policy log-probability.
#[derive(Debug, Clone, PartialEq)]
pub struct ReinforceConfig {
    /// Slices per trajectory, including the initial one (`T >= 2`).
    pub horizon: usize,
    /// `(variable, path)` of the per-row cumulative reward in the final slice.
    pub reward: (String, String),
    /// `(variable, path)` of the per-row cumulative policy log-probability.
    pub policy_log_prob: (String, String),
    /// Subtract the batch-mean reward before weighting log-probabilities.
    pub baseline: bool,
}

#[derive(Debug, Clone)]
pub struct ReinforceEstimate {
    pub grads: ParamGrads,
    pub mean_reward: f64,
    pub objective: f64,
}

/// The score-function gradient of `-E[R]` from one batch of trajectories:
/// the gradient of `-mean_b(stop_gradient(R_b - baseline) * log π_b)`.
pub fn reinforce_gradient(net: &Network, params: &ParamSet, cfg: &ReinforceConfig, seed: u64) -> Result<ReinforceEstimate> {
    if cfg.horizon < 2 {
        return Err(Error::config("REINFORCE needs a horizon of at least 2"));
    }
    let tape = Tape::new();
    let watched = params.watch(&tape);
    let last = Runtime::new(net).with_params(&watched).retain_fields(false).execute(cfg.horizon - 1, seed)?;
    let reward = last.get(&cfg.reward.0)?.tensor(&cfg.reward.1)?.detach();
    let logp = last.get(&cfg.policy_log_prob.0)?.tensor(&cfg.policy_log_prob.1)?;
    if reward.shape() != logp.shape() || reward.rank() != 1 {
        return Err(Error::shape("reinforce", reward.shape(), logp.shape()));
    }
    let mean_reward = reward.reduce_mean().item()?;
    let weight = if cfg.baseline { reward.add_scalar(-mean_reward) } else { reward };
    let objective = weight.mul(logp)?.reduce_mean().neg();
    let grads = if objective.is_taped() {
        param_grads(&watched, &tape.backward(&objective)?)?
    } else {
        params.iter().map(|(k, v)| (k.to_string(), Tensor::zeros(v.shape().to_vec()))).collect()
    };
    Ok(ReinforceEstimate {
        grads,
        mean_reward,
        objective: objective.item()?,
    })
}

/// Samples a batch, then applies one optimizer update. Returns the batch's
/// mean cumulative reward (measured before the update).
pub fn reinforce_step(
    net: &Network,
    params: &mut ParamSet,
    cfg: &ReinforceConfig,
    opt: &mut Optimizer,
    seed: u64,
) -> Result<f64> {
    let est = reinforce_gradient(net, params, cfg, seed)?;
    opt.apply(params, &est.grads)?;
    Ok(est.mean_reward)
}

/// One gradient step on `-Σ log p(traj)` over fully observed trajectories.
/// Returns the loss before the step.
pub fn mle_step(net: &Network, params: &mut ParamSet, data: &[ObservedTrajectory], opt: &mut Optimizer) -> Result<f64> {
    let tape = Tape::new();
    let watched = params.watch(&tape);
    let mut loss = Tensor::scalar(0.0);
    for obs in data {
        let lp = log_probability_from_value_trajectory(net, &watched, obs, obs.horizon() - 1)?;
        loss = loss.sub(&lp)?;
    }
    if loss.is_taped() {
        let grads = param_grads(&watched, &tape.backward(&loss)?)?;
        opt.apply(params, &grads)?;
    }
    loss.item()
}

/// A held-out field sampled by the E-step.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub variable: String,
    pub path: String,
    /// One value shared by every step (a static latent) rather than one per
    /// step.
    pub static_across_steps: bool,
}

#[derive(Debug, Clone)]
pub struct EmConfig {
    pub hmc: HmcConfig,
    pub iterations: usize,
    /// Gradient steps per M-step.
    pub m_steps: usize,
    /// Initial latent value: `[batch, ..]` for a static latent, otherwise
    /// `[batch, horizon, ..]`.
    pub init: Tensor,
}

#[derive(Debug, Clone)]
pub struct EmResult {
    pub params: ParamSet,
    /// Monte-Carlo mean of the complete-data log-probability; entry 0 is
    /// measured before any M-step.
    pub trace: Vec<f64>,
    pub acceptance: Vec<f64>,
    /// Posterior mean of the latent from the final E-step.
    pub latent_mean: Tensor,
    /// Wall-clock milliseconds per trace entry.
    pub wall_ms: Vec<f64>,
}

/// Builds the injected trajectory for a latent state tensor.
fn inject_latent(obs: &ObservedTrajectory, latent: &Latent, z: &Tensor) -> Result<ObservedTrajectory> {
    if latent.static_across_steps {
        return obs.inject_static(&latent.variable, &latent.path, z);
    }
    let h = obs.horizon();
    let b = z.shape()[0];
    let event = z.shape()[2..].to_vec();
    let mut shape = vec![b];
    shape.extend(&event);
    let values = (0..h)
        .map(|t| z.narrow(1, t, 1)?.reshape(shape.clone()))
        .collect::<Result<Vec<_>>>()?;
    obs.inject_field(&latent.variable, &latent.path, &values)
}

/// Monte-Carlo EM: HMC over the held-out latent (E-step), then gradient
/// ascent on the Monte-Carlo mean complete-data log-probability (M-step).
///
/// Each E-step warm-starts from the previous chain. Fails if HMC acceptance
/// stays below 1% for three consecutive iterations.
pub fn mc_em_fit(
    net: &Network,
    params: &ParamSet,
    observed: &ObservedTrajectory,
    latent: &Latent,
    cfg: &EmConfig,
    opt: &mut Optimizer,
    seed: u64,
) -> Result<EmResult> {
    let num_steps = observed.horizon() - 1;
    let mut params = params.clone();
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    let mut acceptance = Vec::with_capacity(cfg.iterations + 1);
    let mut state = cfg.init.clone();
    let mut low_streak = 0;
    let root = RngStream::from_label(seed, "mc_em");
    let mut samples = Vec::new();
    let mut wall_ms = Vec::with_capacity(cfg.iterations + 1);
    for iter in 0..=cfg.iterations {
        let start = std::time::Instant::now();
        if iter > 0 {
            for _ in 0..cfg.m_steps {
                let tape = Tape::new();
                let watched = params.watch(&tape);
                let mut total = Tensor::scalar(0.0);
                for z in &samples {
                    let obs = inject_latent(observed, latent, z)?;
                    total = total.add(&log_probability_from_value_trajectory(net, &watched, &obs, num_steps)?)?;
                }
                let loss = total.mul_scalar(-1.0 / samples.len() as f64);
                if loss.is_taped() {
                    let grads = param_grads(&watched, &tape.backward(&loss)?)?;
                    opt.apply(&mut params, &grads)?;
                }
            }
        }
        let frozen = params.clone();
        let target = |z: &Tensor| -> Result<Tensor> {
            let obs = inject_latent(observed, latent, z)?;
            log_probability_per_row(net, &frozen, &obs, num_steps)
        };
        let hmc_seed = root.child(iter as u64).row(0).random::<u64>();
        let res = hmc_sample(&target, &state, &cfg.hmc, hmc_seed)?;
        acceptance.push(res.acceptance_rate);
        if res.acceptance_rate < 0.01 {
            low_streak += 1;
            if low_streak >= 3 {
                return Err(Error::Inference(format!(
                    "HMC acceptance below 1% for 3 consecutive EM iterations (last {:.4}); reduce the step size",
                    res.acceptance_rate
                )));
            }
        } else {
            low_streak = 0;
        }
        state = res.last.clone();
        samples = res.samples;
        let mut objective = 0.0;
        for z in &samples {
            let obs = inject_latent(observed, latent, z)?;
            objective += log_probability_from_value_trajectory(net, &params, &obs, num_steps)?.item()?;
        }
        trace.push(objective / samples.len() as f64);
        wall_ms.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let mut mean = vec![0.0; state.numel()];
    for z in &samples {
        for (m, v) in mean.iter_mut().zip(z.data()) {
            *m += v / samples.len() as f64;
        }
    }
    Ok(EmResult {
        params,
        trace,
        acceptance,
        latent_mean: Tensor::from_vec(state.shape().to_vec(), mean)?,
        wall_ms,
    })
}
