//! Users with a static latent interest and an observable satisfaction level
//! that follows the trend in slate quality, scaled by a per-user sensitivity.
//!
//! Fitting treats the interest as the latent sampled by HMC and the
//! sensitivity `alpha = sigmoid(alpha_raw)` as a per-user parameter.

use rand::Rng;

use crate::behaviors::{AffinityModel, ChoiceKind, ChoiceModel, Similarity};
use crate::dist::{Distribution, RngStream};
use crate::error::Result;
use crate::inference::{mc_em_fit, EmConfig, HmcConfig, Latent, Optimizer};
use crate::logprob::ObservedTrajectory;
use crate::network::{Dep, FieldSpec, Network, ParamSet, Value, ValueSpec, Variable};
use crate::runtime::Runtime;
use crate::scenarios::{config_struct, require, Configurable};
use crate::tensor::Tensor;

config_struct! {
    pub struct LatentSatConfig {
        users: usize = 50,
        /// Interest dimension.
        dim: usize = 2,
        slate: usize = 3,
        horizon: usize = 30,
        /// Recommended items are drawn `N(0, item_scale²)` per coordinate.
        item_scale: f64 = 1.0,
        satisfaction_init: f64 = 1.0,
        satisfaction_noise: f64 = 0.3,
        no_choice_logit: f64 = 0.0,
        /// Seeds the ground-truth sensitivities (`U(0, 1)`).
        truth_seed: u64 = 0,
    }
}

impl LatentSatConfig {
    fn check(&self) -> Result<()> {
        require(self.users >= 1, "users must be ≥ 1")?;
        require(self.horizon >= 1, "horizon must be ≥ 1")?;
        require(self.dim >= 1 && self.slate >= 1, "dim and slate must be ≥ 1")?;
        require(self.satisfaction_noise > 0.0, "satisfaction_noise must be positive")?;
        require(self.item_scale > 0.0, "item_scale must be positive")
    }
}

/// A built latent-satisfaction story.
#[derive(Debug, Clone)]
pub struct LatentSatStory {
    pub network: Network,
    /// Parameters holding the ground-truth sensitivities.
    pub truth: ParamSet,
    /// Starting point for fitting (`alpha = 0.5` everywhere).
    pub init: ParamSet,
    /// The held-out latent sampled in the E-step.
    pub latent: Latent,
    /// Parameters fitted in the M-step.
    pub fitted: Vec<String>,
    pub true_alpha: Tensor,
}

/// `alpha_u · clip(Δ best affinity, −1, 1)`: the satisfaction drift between
/// two consecutive slates.
pub fn satisfaction_drift(alpha: &Tensor, best_now: &Tensor, best_before: &Tensor) -> Result<Tensor> {
    alpha.mul(&best_now.sub(best_before)?.clamp(-1.0, 1.0))
}

fn best_affinity(interest: &Tensor, slate: &Tensor) -> Result<Tensor> {
    AffinityModel::new(Similarity::NegativeEuclidean)
        .affinities(interest, slate)?
        .max_axis(1, false)
}

/// Builds the story. Variables: `user`, `recommender`, `satisfaction`,
/// `choice`.
pub fn build_latent_sat_story(cfg: &LatentSatConfig) -> Result<LatentSatStory> {
    cfg.validate()?;
    let (d, k, b) = (cfg.dim, cfg.slate, cfg.users);
    let user = Variable::new("user", ValueSpec::new().with("interest", FieldSpec::continuous([d])))
        .initial(vec![], move |ctx, _| {
            Ok(Value::new().with("interest", Distribution::normal(Tensor::zeros([ctx.batch, d]), Tensor::scalar(1.0))?))
        })
        .kernel(vec![Dep::previous("user")], |_, deps| Ok(deps[0].clone()));

    let scale = cfg.item_scale;
    let recommender = Variable::new("recommender", ValueSpec::new().with("items", FieldSpec::continuous([k, d])))
        .both(vec![], move |ctx, _| {
            Ok(Value::new().with("items", Distribution::normal(Tensor::zeros([ctx.batch, k, d]), Tensor::scalar(scale))?))
        });

    let (s0, noise) = (cfg.satisfaction_init, cfg.satisfaction_noise);
    let satisfaction = Variable::new("satisfaction", ValueSpec::new().with("level", FieldSpec::scalar()))
        .initial(vec![], move |ctx, _| Ok(Value::new().with("level", Tensor::full([ctx.batch], s0))))
        .kernel(
            vec![
                Dep::current("user"),
                Dep::current("recommender"),
                Dep::previous("recommender"),
                Dep::previous("satisfaction"),
            ],
            move |ctx, deps| {
                let interest = deps[0].tensor("interest")?;
                let now = best_affinity(interest, deps[1].tensor("items")?)?;
                let before = best_affinity(interest, deps[2].tensor("items")?)?;
                let alpha = ctx.params.get("alpha_raw")?.sigmoid();
                let loc = deps[3].tensor("level")?.add(&satisfaction_drift(&alpha, &now, &before)?)?;
                Ok(Value::new().with("level", Distribution::normal(loc, Tensor::scalar(noise))?))
            },
        );

    let model = ChoiceModel::new(ChoiceKind::MultinomialLogit).with_no_choice(cfg.no_choice_logit);
    let choice = Variable::new("choice", ValueSpec::new().with("item", FieldSpec::integer(Vec::<usize>::new(), k + 1)))
        .both(
            vec![Dep::current("user"), Dep::current("recommender"), Dep::current("satisfaction")],
            move |_, deps| {
                let aff = AffinityModel::new(Similarity::NegativeEuclidean)
                    .affinities(deps[0].tensor("interest")?, deps[1].tensor("items")?)?;
                Ok(Value::new().with("item", model.choice(&aff, Some(deps[2].tensor("level")?))?))
            },
        );

    let mut rng = RngStream::from_label(cfg.truth_seed, "latent_sat/alpha").row(0);
    let true_alpha = Tensor::from_fn([b], |_| rng.random_range(0.02..0.98));
    let mut truth = ParamSet::new();
    truth.insert("alpha_raw", true_alpha.map(|a| (a / (1.0 - a)).ln()))?;
    let mut init = ParamSet::new();
    init.insert("alpha_raw", Tensor::zeros([b]))?;
    Ok(LatentSatStory {
        network: Network::new(vec![user, recommender, satisfaction, choice], b)?,
        truth,
        init,
        latent: Latent {
            variable: "user".into(),
            path: "interest".into(),
            static_across_steps: true,
        },
        fitted: vec!["alpha_raw".into()],
        true_alpha,
    })
}

config_struct! {
    /// Monte-Carlo EM settings for the latent-satisfaction fit.
    pub struct EmSettings {
        iterations: usize = 30,
        m_steps: usize = 5,
        learning_rate: f64 = 0.1,
        step_size: f64 = 0.05,
        leapfrog_steps: usize = 10,
        samples: usize = 10,
        burn_in: usize = 10,
    }
}

impl EmSettings {
    fn check(&self) -> Result<()> {
        require(self.samples >= 1, "samples must be ≥ 1")?;
        require(self.step_size > 0.0 && self.leapfrog_steps >= 1, "HMC needs step_size > 0 and leapfrog_steps ≥ 1")?;
        require(self.learning_rate >= 0.0, "learning_rate must be non-negative")
    }
}

/// Outcome of fitting simulated data.
#[derive(Debug, Clone)]
pub struct LatentSatFit {
    pub trace: Vec<f64>,
    pub acceptance: Vec<f64>,
    pub true_alpha: Vec<f64>,
    pub estimated_alpha: Vec<f64>,
    pub wall_ms: Vec<f64>,
}

/// Simulates one trajectory under the ground truth, hides the interest, and
/// fits it with MC-EM starting from `alpha = 0.5`.
pub fn fit_latent_sat(cfg: &LatentSatConfig, em: &EmSettings, seed: u64) -> Result<LatentSatFit> {
    em.validate()?;
    let story = build_latent_sat_story(cfg)?;
    let traj = Runtime::new(&story.network).with_params(&story.truth).retain_fields(false).trajectory(cfg.horizon, seed)?;
    let observed = ObservedTrajectory::from_trajectory(&story.network, &traj)?.hold_out("user", "interest")?;
    let emc = EmConfig {
        hmc: HmcConfig {
            step_size: em.step_size,
            leapfrog_steps: em.leapfrog_steps,
            num_samples: em.samples,
            burn_in: em.burn_in,
        },
        iterations: em.iterations,
        m_steps: em.m_steps,
        init: Tensor::zeros([cfg.users, cfg.dim]),
    };
    let mut opt = Optimizer::adam(em.learning_rate);
    let fit = mc_em_fit(&story.network, &story.init, &observed, &story.latent, &emc, &mut opt, seed)?;
    Ok(LatentSatFit {
        trace: fit.trace,
        acceptance: fit.acceptance,
        true_alpha: story.true_alpha.to_vec(),
        estimated_alpha: fit.params.get("alpha_raw")?.sigmoid().to_vec(),
        wall_ms: fit.wall_ms,
    })
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

/// Least-squares slope of `y` against its index.
pub fn trend_slope(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let mx = (n - 1.0) / 2.0;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, v) in y.iter().enumerate() {
        sxy += (i as f64 - mx) * (v - my);
        sxx += (i as f64 - mx).powi(2);
    }
    sxy / sxx
}
