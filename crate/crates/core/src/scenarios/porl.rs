//! Partially observable slate recommendation.
//!
//! Users carry a latent interest vector that drifts toward (or away from)
//! consumed items depending on their quality. The recommender sees only the
//! items a user consumed and the engagement they produced, summarizes that
//! history into a belief state, and samples a Plackett-Luce slate.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution as _, StandardNormal};

use crate::behaviors::{interest_pull, AffinityModel, ChoiceKind, ChoiceModel, FiniteHistory, LinearGaussianStateModel, Similarity};
use crate::dist::{Distribution, RngStream};
use crate::error::{Error, Result};
use crate::inference::{reinforce_step, Optimizer, ReinforceConfig};
use crate::network::{Ctx, Dep, FieldSpec, Network, ParamSet, Value, ValueSpec, Variable};
use crate::scenarios::{config_struct, derive_seed, require, List};
use crate::tensor::Tensor;

/// How the recommender scores the corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyKind {
    /// The trainable belief-state network.
    Learned,
    /// Uniformly random slates.
    Random,
    /// Sees the latent interest and item quality; not trainable.
    Oracle,
}

impl FromStr for PolicyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(PolicyKind::Learned),
            "random" => Ok(PolicyKind::Random),
            "oracle" => Ok(PolicyKind::Oracle),
            _ => Err(Error::Config(format!("unknown policy `{s}` (learned, random, oracle)"))),
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PolicyKind::Learned => "learned",
            PolicyKind::Random => "random",
            PolicyKind::Oracle => "oracle",
        })
    }
}

config_struct! {
    pub struct PorlConfig {
        /// Users simulated in parallel.
        batch: usize = 100,
        /// Interest and item feature dimension.
        dim: usize = 20,
        /// Candidate items per step (resampled every step).
        corpus: usize = 50,
        slate: usize = 2,
        horizon: usize = 20,
        /// Consumed items the policy remembers.
        history: usize = 15,
        /// Interest pull toward consumed items.
        sensitivity: f64 = 0.1,
        interest_noise: f64 = 0.01,
        num_topics: usize = 10,
        /// Topic centers are drawn with this scale.
        topic_spread: f64 = 1.0,
        /// Items scatter around their topic center with this scale.
        item_spread: f64 = 0.5,
        /// The first half of the topics have mean quality `+q`, the rest `-q`.
        quality_mean: f64 = 0.5,
        /// Half-width of the uniform quality band around a topic's mean.
        quality_width: f64 = 0.5,
        /// Users may abstain; the abstain option has this logit.
        abstain: bool = true,
        no_choice_logit: f64 = -6.0,
        engagement_base: f64 = 4.0,
        engagement_quality: f64 = 2.0,
        engagement_noise: f64 = 1.0,
        embed_dim: usize = 16,
        hidden: usize = 32,
        policy: PolicyKind = PolicyKind::Learned,
        /// Seeds the topic centers.
        world_seed: u64 = 0,
        /// Seeds the initial policy weights.
        init_seed: u64 = 0,
    }
}

impl PorlConfig {
    fn check(&self) -> Result<()> {
        require(self.batch >= 1, "batch must be ≥ 1")?;
        require(self.horizon >= 1, "horizon must be ≥ 1")?;
        require(self.dim >= 1, "dim must be ≥ 1")?;
        require(self.slate >= 1 && self.slate <= self.corpus, "slate must be in 1..=corpus")?;
        require(self.history >= 1, "history must be ≥ 1")?;
        require(self.num_topics >= 1, "num_topics must be ≥ 1")?;
        require(self.interest_noise >= 0.0 && self.engagement_noise > 0.0, "noise scales must be non-negative (engagement noise positive)")?;
        require(self.item_spread > 0.0 && self.quality_width > 0.0, "item_spread and quality_width must be positive")?;
        require(self.embed_dim >= 1 && self.hidden >= 1, "policy widths must be ≥ 1")
    }
}

/// A built PORL story.
#[derive(Debug, Clone)]
pub struct PorlStory {
    pub network: Network,
    pub params: ParamSet,
    /// `(variable, path)` of the cumulative engagement.
    pub reward: (String, String),
    /// `(variable, path)` of the cumulative slate log-probability.
    pub log_prob: (String, String),
}

impl PorlStory {
    pub fn reinforce_config(&self, horizon: usize, baseline: bool) -> ReinforceConfig {
        ReinforceConfig {
            horizon,
            reward: self.reward.clone(),
            policy_log_prob: self.log_prob.clone(),
            baseline,
        }
    }
}

fn gaussian(rng: &mut impl rand::Rng, shape: &[usize], scale: f64) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| { let z: f64 = StandardNormal.sample(rng); scale * z }).collect();
    Tensor::from_vec(shape.to_vec(), data)
}

#[derive(Clone)]
struct Env {
    cfg: PorlConfig,
    /// `[corpus, d]` topic center for each corpus slot.
    slot_centers: Tensor,
    /// `[corpus]` quality band for each slot.
    slot_low: Tensor,
    slot_high: Tensor,
}

impl Env {
    fn new(cfg: &PorlConfig) -> Result<Self> {
        let mut rng = RngStream::from_label(cfg.world_seed, "porl/topics").row(0);
        let centers = gaussian(&mut rng, &[cfg.num_topics, cfg.dim], cfg.topic_spread)?;
        let topic = Tensor::from_fn([cfg.corpus], |i| (i % cfg.num_topics) as f64);
        let slot_centers = centers.gather(0, &topic)?;
        let high = cfg.num_topics.div_ceil(2);
        let mean = |i: usize| if i % cfg.num_topics < high { cfg.quality_mean } else { -cfg.quality_mean };
        Ok(Env {
            slot_low: Tensor::from_fn([cfg.corpus], |i| mean(i) - cfg.quality_width),
            slot_high: Tensor::from_fn([cfg.corpus], |i| mean(i) + cfg.quality_width),
            slot_centers,
            cfg: cfg.clone(),
        })
    }

    fn corpus(&self, batch: usize) -> Result<Value> {
        let (n, d) = (self.cfg.corpus, self.cfg.dim);
        let loc = self.slot_centers.broadcast_to([batch, n, d])?;
        Ok(Value::new()
            .with("features", Distribution::normal(loc, Tensor::scalar(self.cfg.item_spread))?)
            .with(
                "quality",
                Distribution::uniform(self.slot_low.broadcast_to([batch, n])?, self.slot_high.broadcast_to([batch, n])?)?,
            ))
    }

    fn choice_model(&self) -> ChoiceModel {
        let m = ChoiceModel::new(ChoiceKind::MultinomialLogit);
        if self.cfg.abstain {
            m.with_no_choice(self.cfg.no_choice_logit)
        } else {
            m
        }
    }

    /// Item scores `[B, corpus]` for the configured policy.
    fn scores(&self, ctx: &Ctx<'_>, corpus: &Value, user: &Value, history: &Value) -> Result<Tensor> {
        let features = corpus.tensor("features")?;
        let b = ctx.batch;
        match self.cfg.policy {
            PolicyKind::Random => Ok(Tensor::zeros([b, self.cfg.corpus])),
            PolicyKind::Oracle => {
                let aff = AffinityModel::new(Similarity::NegativeEuclidean).affinities(user.tensor("interest")?, features)?;
                Ok(aff.add(&corpus.tensor("quality")?.mul_scalar(2.0))?.mul_scalar(50.0))
            }
            PolicyKind::Learned => {
                let p = ctx.params;
                let (h, e) = (self.cfg.history, self.cfg.embed_dim);
                let embed = p.get("policy/embed")?;
                let items = features.matmul(embed)?;
                let mask = history.tensor("mask")?;
                let seen = history.tensor("features")?.matmul(embed)?.mul(&mask.reshape([b, h, 1])?)?;
                let count = mask.sum_axis(1, true)?;
                let denom = count.clamp(1.0, f64::INFINITY);
                let pooled = seen.sum_axis(1, false)?.div(&denom)?;
                let engagement = history.tensor("values")?.mul(mask)?.sum_axis(1, true)?.div(&denom)?;
                let fill = count.mul_scalar(1.0 / h as f64);
                let x = Tensor::concat(&[&pooled, &engagement.mul_scalar(0.1), &fill], 1)?;
                let hidden = x.matmul(p.get("policy/w1")?)?.add(p.get("policy/b1")?)?.tanh();
                let query = hidden.matmul(p.get("policy/w2")?)?.add(p.get("policy/b2")?)?;
                items.dot_last(&query.reshape([b, 1, e])?)
            }
        }
    }
}

fn initial_params(cfg: &PorlConfig) -> Result<ParamSet> {
    let mut rng = RngStream::from_label(cfg.init_seed, "porl/policy").row(0);
    let (d, e, w) = (cfg.dim, cfg.embed_dim, cfg.hidden);
    let mut p = ParamSet::new();
    p.insert("policy/embed", gaussian(&mut rng, &[d, e], (1.0 / d as f64).sqrt())?)?;
    p.insert("policy/w1", gaussian(&mut rng, &[e + 2, w], (1.0 / (e + 2) as f64).sqrt())?)?;
    p.insert("policy/b1", Tensor::zeros([w]))?;
    p.insert("policy/w2", gaussian(&mut rng, &[w, e], (1.0 / w as f64).sqrt())?)?;
    p.insert("policy/b2", Tensor::zeros([e]))?;
    Ok(p)
}

/// Builds the story. Variables: `corpus`, `user`, `recommender`, `response`,
/// `engagement`, `history`, `metrics`.
pub fn build_porl_story(cfg: &PorlConfig) -> Result<PorlStory> {
    use crate::scenarios::Configurable;
    cfg.validate()?;
    let env = Env::new(cfg)?;
    let (n, d, k, h) = (cfg.corpus, cfg.dim, cfg.slate, cfg.history);
    let options = if cfg.abstain { k + 1 } else { k };
    let hist = FiniteHistory::new(h, d);

    let e = env.clone();
    let corpus = Variable::new(
        "corpus",
        ValueSpec::new()
            .with("features", FieldSpec::continuous([n, d]))
            .with("quality", FieldSpec::continuous([n])),
    )
    .both(vec![], move |ctx, _| e.corpus(ctx.batch));

    let state_model = LinearGaussianStateModel::new(cfg.sensitivity, cfg.interest_noise);
    let user = Variable::new("user", ValueSpec::new().with("interest", FieldSpec::continuous([d])))
        .initial(vec![], move |ctx, _| {
            Ok(Value::new().with("interest", Distribution::normal(Tensor::zeros([ctx.batch, d]), Tensor::scalar(1.0))?))
        })
        .kernel(vec![Dep::previous("user"), Dep::previous("engagement")], move |_, deps| {
            let s = deps[0].tensor("interest")?;
            let eng = deps[1];
            let pull = interest_pull(s, eng.tensor("item")?, eng.tensor("quality")?, eng.tensor("consumed")?)?;
            Ok(Value::new().with("interest", state_model.next(s, &pull)?))
        });

    let rec_spec = ValueSpec::new()
        .with("slate", FieldSpec::integer([k], n))
        .with("scores", FieldSpec::continuous([n]));
    let recommend = {
        let env = env.clone();
        move |ctx: &Ctx<'_>, corpus: &Value, user: &Value, history: &Value| -> Result<Value> {
            let scores = env.scores(ctx, corpus, user, history)?;
            Ok(Value::new()
                .with("slate", Distribution::plackett_luce(scores.clone(), k)?)
                .with("scores", scores))
        }
    };
    let rec0 = recommend.clone();
    let recommender = Variable::new("recommender", rec_spec)
        .initial(vec![Dep::current("corpus"), Dep::current("user")], move |ctx, deps| {
            rec0(ctx, deps[0], deps[1], &hist.empty(ctx.batch))
        })
        .kernel(
            vec![Dep::current("corpus"), Dep::current("user"), Dep::previous("history")],
            move |ctx, deps| recommend(ctx, deps[0], deps[1], deps[2]),
        );

    let choice_model = env.choice_model();
    let response = Variable::new("response", ValueSpec::new().with("choice", FieldSpec::integer(Vec::<usize>::new(), options)))
        .both(
            vec![Dep::current("user"), Dep::current("recommender"), Dep::current("corpus")],
            move |_, deps| {
                let items = deps[2].tensor("features")?.gather(1, deps[1].tensor("slate")?)?;
                let aff = AffinityModel::new(Similarity::NegativeEuclidean).affinities(deps[0].tensor("interest")?, &items)?;
                Ok(Value::new().with("choice", choice_model.choice(&aff, None)?))
            },
        );

    let (mu0, muq, sr) = (cfg.engagement_base, cfg.engagement_quality, cfg.engagement_noise);
    let engagement = Variable::new(
        "engagement",
        ValueSpec::new()
            .with("raw", FieldSpec::scalar())
            .with("item", FieldSpec::continuous([d]))
            .with("quality", FieldSpec::scalar())
            .with("consumed", FieldSpec::integer(Vec::<usize>::new(), 2)),
    )
    .both(
        vec![Dep::current("response"), Dep::current("recommender"), Dep::current("corpus")],
        move |ctx, deps| {
            let b = ctx.batch;
            let choice = deps[0].tensor("choice")?;
            let slate = deps[1].tensor("slate")?;
            let items = deps[2].tensor("features")?.gather(1, slate)?;
            let quality = deps[2].tensor("quality")?.gather(1, slate)?;
            // Abstaining picks index k, which maps to a zero row.
            let items = Tensor::concat(&[&items, &Tensor::zeros([b, 1, d])], 1)?;
            let quality = Tensor::concat(&[&quality, &Tensor::zeros([b, 1])], 1)?;
            let item = items.gather(1, choice)?;
            let q = quality.gather(1, choice)?;
            let consumed = choice.map(|c| if (c as usize) < k { 1.0 } else { 0.0 });
            Ok(Value::new()
                .with("raw", Distribution::normal(q.mul_scalar(muq).add_scalar(mu0), Tensor::scalar(sr))?)
                .with("item", item)
                .with("quality", q)
                .with("consumed", consumed))
        },
    );

    let reward = |eng: &Value| -> Result<Tensor> { eng.tensor("raw")?.relu().mul(eng.tensor("consumed")?) };
    let history = Variable::new("history", hist.spec())
        .initial(vec![Dep::current("engagement")], move |ctx, deps| {
            let eng = deps[0];
            hist.push(&hist.empty(ctx.batch), eng.tensor("item")?, &reward(eng)?, eng.tensor("consumed")?)
        })
        .kernel(vec![Dep::previous("history"), Dep::current("engagement")], move |_, deps| {
            let eng = deps[1];
            hist.push(deps[0], eng.tensor("item")?, &reward(eng)?, eng.tensor("consumed")?)
        });

    let metrics_spec = ValueSpec::new()
        .with("reward", FieldSpec::scalar())
        .with("cum_reward", FieldSpec::scalar())
        .with("slate_log_prob", FieldSpec::scalar())
        .with("cum_log_prob", FieldSpec::scalar());
    let measure = move |deps: &[&Value]| -> Result<(Tensor, Tensor)> {
        let rec = deps[1];
        let lp = Distribution::plackett_luce(rec.tensor("scores")?.clone(), k)?.log_prob(rec.tensor("slate")?)?;
        Ok((reward(deps[0])?, lp))
    };
    let metrics = Variable::new("metrics", metrics_spec)
        .initial(vec![Dep::current("engagement"), Dep::current("recommender")], move |_, deps| {
            let (r, lp) = measure(deps)?;
            Ok(Value::new()
                .with("reward", r.clone())
                .with("cum_reward", r)
                .with("slate_log_prob", lp.clone())
                .with("cum_log_prob", lp))
        })
        .kernel(
            vec![Dep::current("engagement"), Dep::current("recommender"), Dep::previous("metrics")],
            move |_, deps| {
                let (r, lp) = measure(deps)?;
                let prev = deps[2];
                Ok(Value::new()
                    .with("cum_reward", prev.tensor("cum_reward")?.add(&r)?)
                    .with("reward", r)
                    .with("cum_log_prob", prev.tensor("cum_log_prob")?.add(&lp)?)
                    .with("slate_log_prob", lp))
            },
        );

    let network = Network::new(vec![corpus, user, recommender, response, engagement, history, metrics], cfg.batch)?;
    let params = match cfg.policy {
        PolicyKind::Learned => initial_params(cfg)?,
        _ => ParamSet::new(),
    };
    Ok(PorlStory {
        network,
        params,
        reward: ("metrics".into(), "cum_reward".into()),
        log_prob: ("metrics".into(), "cum_log_prob".into()),
    })
}

config_struct! {
    /// REINFORCE training settings.
    pub struct TrainConfig {
        iterations: usize = 50,
        learning_rate: f64 = 1e-2,
        /// Subtract the batch-mean reward.
        baseline: bool = false,
        /// History lengths to compare; empty means just the story's own.
        histories: List<usize> = List(Vec::new()),
    }
}

impl TrainConfig {
    fn check(&self) -> Result<()> {
        require(self.learning_rate >= 0.0, "learning_rate must be non-negative")
    }
}

/// A REINFORCE learning curve.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainCurve {
    /// Batch-mean cumulative engagement before each of `iterations + 1`
    /// updates: entry 0 is the untrained policy, the last entry follows the
    /// final update.
    pub reward: Vec<f64>,
    /// Wall-clock milliseconds spent on each entry.
    pub wall_ms: Vec<f64>,
}

/// Trains the learned policy with REINFORCE.
pub fn train_porl(cfg: &PorlConfig, train: &TrainConfig, seed: u64) -> Result<TrainCurve> {
    use crate::scenarios::Configurable;
    train.validate()?;
    let story = build_porl_story(cfg)?;
    let rcfg = story.reinforce_config(cfg.horizon, train.baseline);
    let mut params = story.params.clone();
    let mut opt = Optimizer::adam(train.learning_rate);
    let mut curve = TrainCurve {
        reward: Vec::with_capacity(train.iterations + 1),
        wall_ms: Vec::with_capacity(train.iterations + 1),
    };
    for it in 0..=train.iterations {
        let start = std::time::Instant::now();
        let s = derive_seed(seed, "porl/train", it as u64);
        let reward = if it == train.iterations {
            let last = crate::runtime::Runtime::new(&story.network)
                .with_params(&params)
                .retain_fields(false)
                .execute(cfg.horizon - 1, s)?;
            last.get("metrics")?.tensor("cum_reward")?.reduce_mean().item()?
        } else {
            reinforce_step(&story.network, &mut params, &rcfg, &mut opt, s)?
        };
        curve.reward.push(reward);
        curve.wall_ms.push(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logprob::{log_probability_from_value_trajectory, ObservedTrajectory};
    use crate::runtime::Runtime;

    fn small() -> PorlConfig {
        PorlConfig {
            batch: 6,
            dim: 4,
            corpus: 8,
            horizon: 5,
            history: 3,
            ..PorlConfig::default()
        }
    }

    #[test]
    fn slate_log_prob_matches_plackett_luce() {
        let story = build_porl_story(&small()).unwrap();
        let traj = Runtime::new(&story.network).with_params(&story.params).trajectory(5, 1).unwrap();
        for t in 0..5 {
            let rec = traj.value("recommender", t).unwrap();
            let lp = Distribution::plackett_luce(rec.tensor("scores").unwrap().clone(), 2)
                .unwrap()
                .log_prob(rec.tensor("slate").unwrap())
                .unwrap();
            let recorded = traj.value("metrics", t).unwrap().tensor("slate_log_prob").unwrap();
            assert!(lp.allclose(recorded, 1e-12));
        }
    }

    #[test]
    fn frozen_dynamics_keep_interest() {
        let cfg = PorlConfig {
            sensitivity: 0.0,
            interest_noise: 0.0,
            ..small()
        };
        let story = build_porl_story(&cfg).unwrap();
        let traj = Runtime::new(&story.network).with_params(&story.params).trajectory(5, 2).unwrap();
        let s0 = traj.value("user", 0).unwrap().tensor("interest").unwrap();
        for t in 1..5 {
            assert_eq!(traj.value("user", t).unwrap().tensor("interest").unwrap().data(), s0.data());
        }
    }

    #[test]
    fn sampled_trajectory_scores_finite() {
        let story = build_porl_story(&small()).unwrap();
        let traj = Runtime::new(&story.network).with_params(&story.params).trajectory(5, 3).unwrap();
        let obs = ObservedTrajectory::from_trajectory(&story.network, &traj).unwrap();
        let lp = log_probability_from_value_trajectory(&story.network, &story.params, &obs, 4).unwrap();
        assert!(lp.item().unwrap().is_finite() && lp.item().unwrap() > -1e29);
    }

    #[test]
    fn rejects_oversized_slate() {
        let cfg = PorlConfig { slate: 9, ..small() };
        assert!(build_porl_story(&cfg).is_err());
    }
}
