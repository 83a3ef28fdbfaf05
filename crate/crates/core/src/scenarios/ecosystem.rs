//! Users, content providers and a recommender over many periods.
//!
//! Providers publish more items the more discounted engagement they have
//! received, which lets early winners crowd out niche providers. A boosted
//! policy pushes items of under-engaged providers up the ranking.
//!
//! The population axis of this network is the run: every field carries a
//! leading `[runs]` axis, so independent ecosystems are simulated together.

use std::fmt;
use std::str::FromStr;

use crate::behaviors::{AffinityModel, ChoiceKind, ChoiceModel, HierarchicalSampler, Similarity};
use crate::dist::Distribution;
use crate::error::{Error, Result};
use crate::network::{Dep, FieldSpec, Network, Value, ValueSpec, Variable};
use crate::runtime::Runtime;
use crate::scenarios::{config_struct, require, Configurable, List};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Policy {
    /// Top-k by affinity.
    Myopic,
    /// Top-k by affinity plus a provider boost capped at `L`.
    Boosted(f64),
}

/// Relative community sizes such as `4:3:2:1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights(pub Vec<f64>);

impl FromStr for Weights {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let w = s
            .split(':')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::Config(format!("cannot parse community sizes `{s}`")))?;
        Ok(Weights(w))
    }
}

impl fmt::Display for Weights {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|w| w.to_string()).collect();
        f.write_str(&parts.join(":"))
    }
}

config_struct! {
    pub struct EcosystemConfig {
        users: usize = 200,
        providers: usize = 20,
        /// Items published per period across all providers.
        items: usize = 100,
        horizon: usize = 100,
        /// Independent ecosystems simulated side by side.
        runs: usize = 10,
        dim: usize = 10,
        slate: usize = 5,
        /// Boost cap `L`; 0 reproduces the myopic policy.
        boost_cap: f64 = 1.2,
        /// Multiplies the default boost slope `1 / E_0`.
        boost_scale: f64 = 4.0,
        /// Jitter drawn from `U(0, jitter · |boost|)` per user and item.
        jitter: f64 = 0.1,
        /// Engagement discount `γ`.
        discount: f64 = 0.5,
        /// Engagement, as a fraction of `E_0`, below which a provider only
        /// publishes its one guaranteed item.
        supply_threshold: f64 = 0.8,
        communities: Weights = Weights(vec![4.0, 3.0, 2.0, 1.0]),
        community_scale: f64 = 2.0,
        provider_scale: f64 = 1.0,
        user_scale: f64 = 0.5,
        item_scale: f64 = 0.3,
        utility_noise: f64 = 0.1,
    }
}

impl EcosystemConfig {
    fn check(&self) -> Result<()> {
        require(self.users >= 1 && self.providers >= 1 && self.runs >= 1, "users, providers and runs must be ≥ 1")?;
        require(self.horizon >= 1, "horizon must be ≥ 1")?;
        require(self.items >= self.providers, "items must be ≥ providers")?;
        require(self.slate >= 1 && self.slate <= self.items, "slate must be in 1..=items")?;
        require(self.boost_cap >= 0.0, "boost_cap must be ≥ 0")?;
        require((0.0..1.0).contains(&self.discount), "discount must be in [0, 1)")?;
        require(self.jitter >= 0.0, "jitter must be ≥ 0")?;
        require(self.supply_threshold >= 0.0, "supply_threshold must be ≥ 0")?;
        require(
            !self.communities.0.is_empty() && self.communities.0.iter().all(|w| *w > 0.0),
            "community sizes must be positive",
        )?;
        require(
            self.community_scale > 0.0 && self.provider_scale > 0.0 && self.user_scale > 0.0 && self.item_scale > 0.0,
            "scales must be positive",
        )?;
        require(self.utility_noise >= 0.0, "utility_noise must be ≥ 0")
    }

    /// Engagement every provider starts with: the steady state if users
    /// spread their consumption evenly.
    pub fn initial_engagement(&self) -> f64 {
        self.users as f64 / self.providers as f64 / (1.0 - self.discount)
    }

    pub fn policy(&self) -> Policy {
        if self.boost_cap == 0.0 {
            Policy::Myopic
        } else {
            Policy::Boosted(self.boost_cap)
        }
    }
}

/// Splits `total` items across providers: one each, and the rest in
/// proportion to `max(0, E_c − threshold)` (evenly if every weight is 0).
/// Largest remainders round, ties to the lower index.
pub fn item_counts(engagement: &[f64], threshold: f64, total: usize) -> Vec<usize> {
    let c = engagement.len();
    let mut w: Vec<f64> = engagement.iter().map(|e| (e - threshold).max(0.0)).collect();
    let mut sum: f64 = w.iter().sum();
    if sum <= 0.0 {
        w = vec![1.0; c];
        sum = c as f64;
    }
    let spare = (total - c) as f64;
    let share: Vec<f64> = w.iter().map(|x| spare * x / sum).collect();
    let mut counts: Vec<usize> = share.iter().map(|s| 1 + s.floor() as usize).collect();
    let mut left = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (share[a] - share[a].floor(), share[b] - share[b].floor());
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// `clip(β · (mean E − E_c), −L, L)`.
pub fn provider_boost(engagement: &[f64], beta: f64, cap: f64) -> Vec<f64> {
    let mean = engagement.iter().sum::<f64>() / engagement.len() as f64;
    engagement.iter().map(|e| (beta * (mean - e)).clamp(-cap, cap)).collect()
}

/// Negative Euclidean affinity of every user to every item of the same run:
/// `[R, U, d]` × `[R, M, d]` → `[R, U, M]`. Not differentiable.
fn pairwise_affinity(users: &Tensor, items: &Tensor) -> Result<Tensor> {
    let (r, u, d) = (users.shape()[0], users.shape()[1], users.shape()[2]);
    let m = items.shape()[1];
    let (ud, id) = (users.data(), items.data());
    let mut out = Vec::with_capacity(r * u * m);
    for run in 0..r {
        let its = &id[run * m * d..(run + 1) * m * d];
        for x in ud[run * u * d..(run + 1) * u * d].chunks(d) {
            out.extend(its.chunks(d).map(|y| {
                let s: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                -s.sqrt()
            }));
        }
    }
    Tensor::from_vec([r, u, m], out)
}

/// Per-run supply: provider of every item slot and per-provider counts.
fn supply(cfg: &EcosystemConfig, engagement: &Tensor) -> Result<(Tensor, Tensor)> {
    let (r, c, m) = (engagement.shape()[0], cfg.providers, cfg.items);
    let mut owner = Vec::with_capacity(r * m);
    let mut counts = Vec::with_capacity(r * c);
    for e in engagement.data().chunks(c) {
        let n = item_counts(e, cfg.supply_threshold * cfg.initial_engagement(), m);
        for (p, &k) in n.iter().enumerate() {
            owner.extend(std::iter::repeat_n(p as f64, k));
        }
        counts.extend(n.iter().map(|&k| k as f64));
    }
    Ok((Tensor::from_vec([r, m], owner)?, Tensor::from_vec([r, c], counts)?))
}

/// Builds the story for `cfg.policy()`. Variables: `communities`,
/// `providers`, `users`, `items`, `jitter` (boosted only), `recommender`,
/// `choice`, `utility`, `provider_state`, `metrics`.
pub fn build_ecosystem_story(cfg: &EcosystemConfig) -> Result<Network> {
    cfg.validate()?;
    let (u, c, m, d, k) = (cfg.users, cfg.providers, cfg.items, cfg.dim, cfg.slate);
    let kc = cfg.communities.0.len();
    let total: f64 = cfg.communities.0.iter().sum();
    let cw: Vec<f64> = cfg.communities.0.iter().map(|w| w / total).collect();
    let e0 = cfg.initial_engagement();
    let keep = |_: &crate::network::Ctx<'_>, deps: &[&Value]| -> Result<Value> { Ok(deps[0].clone()) };

    let cs = cfg.community_scale;
    let communities = Variable::new("communities", ValueSpec::new().with("centers", FieldSpec::continuous([kc, d])))
        .initial(vec![], move |ctx, _| {
            Ok(Value::new().with("centers", Distribution::normal(Tensor::zeros([ctx.batch, kc, d]), Tensor::scalar(cs))?))
        })
        .kernel(vec![Dep::previous("communities")], keep);

    let ps = cfg.provider_scale;
    let providers = Variable::new("providers", ValueSpec::new().with("interest", FieldSpec::continuous([c, d])))
        .initial(vec![Dep::current("communities")], move |ctx, deps| {
            let r = ctx.batch;
            let centers = deps[0].tensor("centers")?;
            let weights = Tensor::from_vec([kc], cw.clone())?.broadcast_to([r, c, kc])?;
            let means = centers.unsqueeze(1)?.broadcast_to([r, c, kc, d])?;
            Ok(Value::new().with("interest", Distribution::gaussian_mixture(weights, means, Tensor::scalar(ps))?))
        })
        .kernel(vec![Dep::previous("providers")], keep);

    let sampler = HierarchicalSampler { point_scale: cfg.user_scale };
    let users = Variable::new("users", ValueSpec::new().with("interest", FieldSpec::continuous([u, d])))
        .initial(vec![Dep::current("providers")], move |_, deps| {
            Ok(Value::new().with("interest", sampler.points(deps[0].tensor("interest")?, None, u)?))
        })
        .kernel(vec![Dep::previous("users")], keep);

    let item_spec = ValueSpec::new()
        .with("owner", FieldSpec::integer([m], c))
        .with("counts", FieldSpec::continuous([c]))
        .with("features", FieldSpec::continuous([m, d]));
    let cfg_items = cfg.clone();
    let publish = move |providers: &Value, engagement: &Tensor| -> Result<Value> {
        let (owner, counts) = supply(&cfg_items, engagement)?;
        let loc = providers.tensor("interest")?.gather(1, &owner)?;
        Ok(Value::new()
            .with("owner", owner)
            .with("counts", counts)
            .with("features", Distribution::normal(loc, Tensor::scalar(cfg_items.item_scale))?))
    };
    let publish0 = publish.clone();
    let items = Variable::new("items", item_spec)
        .initial(vec![Dep::current("providers")], move |ctx, deps| {
            publish0(deps[0], &Tensor::full([ctx.batch, c], e0))
        })
        .kernel(vec![Dep::current("providers"), Dep::previous("provider_state")], move |_, deps| {
            publish(deps[0], deps[1].tensor("engagement")?)
        });

    let boosted = matches!(cfg.policy(), Policy::Boosted(_)) && cfg.jitter > 0.0;
    let mut vars = vec![communities, providers, users, items];
    if boosted {
        vars.push(
            Variable::new("jitter", ValueSpec::new().with("unit", FieldSpec::continuous([u, m]))).both(vec![], move |ctx, _| {
                Ok(Value::new().with(
                    "unit",
                    Distribution::uniform(Tensor::zeros([ctx.batch, u, m]), Tensor::ones([ctx.batch, u, m]))?,
                ))
            }),
        );
    }

    let (cap, beta, jitter) = (cfg.boost_cap, cfg.boost_scale / e0, cfg.jitter);
    let affinity = AffinityModel::new(Similarity::NegativeEuclidean);
    let rank = move |users: &Value, items: &Value, engagement: &Tensor, unit: Option<&Value>| -> Result<Value> {
        let r = engagement.shape()[0];
        let features = items.tensor("features")?;
        let boost: Vec<f64> = engagement.data().chunks(c).flat_map(|e| provider_boost(e, beta, cap)).collect();
        let boost = Tensor::from_vec([r, c], boost)?;
        let mut scores = pairwise_affinity(users.tensor("interest")?, features)?;
        if cap > 0.0 {
            let item_boost = boost.gather(1, items.tensor("owner")?)?.unsqueeze(1)?;
            scores = scores.add(&item_boost)?;
            if let Some(unit) = unit {
                scores = scores.add(&unit.tensor("unit")?.mul(&item_boost.abs().mul_scalar(jitter))?)?;
            }
        }
        Ok(Value::new().with("slate", scores.top_k_last(k)?).with("boost", boost))
    };
    let rec_spec = ValueSpec::new()
        .with("slate", FieldSpec::integer([u, k], m))
        .with("boost", FieldSpec::continuous([c]));
    let mut deps0 = vec![Dep::current("users"), Dep::current("items")];
    if boosted {
        deps0.push(Dep::current("jitter"));
    }
    let mut deps_t = deps0.clone();
    deps_t.push(Dep::previous("provider_state"));
    let rank0 = rank;
    let recommender = Variable::new("recommender", rec_spec)
        .initial(deps0, move |ctx, deps| {
            rank0(deps[0], deps[1], &Tensor::full([ctx.batch, c], e0), deps.get(2).copied())
        })
        .kernel(deps_t, move |_, deps| {
            let prev = deps[deps.len() - 1].tensor("engagement")?;
            let unit = if deps.len() == 4 { Some(deps[2]) } else { None };
            rank(deps[0], deps[1], prev, unit)
        });

    // Affinities of every user to the items on their slate: [R, U, k].
    let slate_affinity = move |users: &Value, items: &Value, rec: &Value| -> Result<Tensor> {
        let features = items.tensor("features")?;
        let r = features.shape()[0];
        let slate = rec.tensor("slate")?.reshape([r, u * k])?;
        let chosen = features.gather(1, &slate)?.reshape([r * u, k, d])?;
        let aff = affinity.affinities(&users.tensor("interest")?.reshape([r * u, d])?, &chosen)?;
        aff.reshape([r, u, k])
    };
    let mnl = ChoiceModel::new(ChoiceKind::MultinomialLogit);
    let choice = Variable::new("choice", ValueSpec::new().with("slot", FieldSpec::integer([u], k))).both(
        vec![Dep::current("users"), Dep::current("items"), Dep::current("recommender")],
        move |_, deps| {
            let aff = slate_affinity(deps[0], deps[1], deps[2])?;
            let r = aff.shape()[0];
            let logits = mnl.logits(&aff.reshape([r * u, k])?, None)?.reshape([r, u, k])?;
            Ok(Value::new().with("slot", Distribution::categorical(logits)?))
        },
    );

    let noise = cfg.utility_noise;
    let utility = Variable::new("utility", ValueSpec::new().with("value", FieldSpec::continuous([u]))).both(
        vec![Dep::current("users"), Dep::current("items"), Dep::current("recommender"), Dep::current("choice")],
        move |_, deps| {
            let aff = slate_affinity(deps[0], deps[1], deps[2])?;
            let r = aff.shape()[0];
            let slot = deps[3].tensor("slot")?.reshape([r * u])?;
            let loc = aff.reshape([r * u, k])?.gather(1, &slot)?.reshape([r, u])?;
            let field = if noise > 0.0 {
                Distribution::normal(loc, Tensor::scalar(noise))?
            } else {
                Distribution::deterministic(loc)
            };
            Ok(Value::new().with("value", field))
        },
    );

    let gamma = cfg.discount;
    let consumption = move |items: &Value, rec: &Value, choice: &Value| -> Result<Tensor> {
        let owner = items.tensor("owner")?;
        let r = owner.shape()[0];
        let slate = rec.tensor("slate")?.data();
        let slot = choice.tensor("slot")?.data();
        let mut out = vec![0.0; r * c];
        for run in 0..r {
            for user in 0..u {
                let s = slot[run * u + user] as usize;
                let item = slate[(run * u + user) * k + s] as usize;
                let p = owner.data()[run * m + item] as usize;
                out[run * c + p] += 1.0;
            }
        }
        Tensor::from_vec([r, c], out)
    };
    let state_spec = ValueSpec::new()
        .with("consumed", FieldSpec::continuous([c]))
        .with("engagement", FieldSpec::continuous([c]));
    let consumption0 = consumption;
    let provider_state = Variable::new("provider_state", state_spec)
        .initial(
            vec![Dep::current("items"), Dep::current("recommender"), Dep::current("choice")],
            move |ctx, deps| {
                let consumed = consumption0(deps[0], deps[1], deps[2])?;
                let e = Tensor::full([ctx.batch, c], e0).mul_scalar(gamma).add(&consumed)?;
                Ok(Value::new().with("consumed", consumed).with("engagement", e))
            },
        )
        .kernel(
            vec![
                Dep::current("items"),
                Dep::current("recommender"),
                Dep::current("choice"),
                Dep::previous("provider_state"),
            ],
            move |_, deps| {
                let consumed = consumption(deps[0], deps[1], deps[2])?;
                let e = deps[3].tensor("engagement")?.mul_scalar(gamma).add(&consumed)?;
                Ok(Value::new().with("consumed", consumed).with("engagement", e))
            },
        );

    let metric_spec = ValueSpec::new()
        .with("cum_utility", FieldSpec::continuous([u]))
        .with("welfare", FieldSpec::scalar());
    let metrics = Variable::new("metrics", metric_spec)
        .initial(vec![Dep::current("utility")], |_, deps| {
            let cum = deps[0].tensor("value")?.clone();
            Ok(Value::new().with("welfare", cum.mean_axis(1, false)?).with("cum_utility", cum))
        })
        .kernel(vec![Dep::current("utility"), Dep::previous("metrics")], |_, deps| {
            let cum = deps[1].tensor("cum_utility")?.add(deps[0].tensor("value")?)?;
            Ok(Value::new().with("welfare", cum.mean_axis(1, false)?).with("cum_utility", cum))
        });

    vars.extend([recommender, choice, utility, provider_state, metrics]);
    Network::new(vars, cfg.runs)
}

config_struct! {
    /// The boost caps an ecosystem sweep compares.
    pub struct SweepConfig {
        boost_caps: List<f64> = List(vec![0.0, 0.6, 1.2, 2.4, 4.8]),
    }
}

impl SweepConfig {
    fn check(&self) -> Result<()> {
        require(!self.boost_caps.0.is_empty(), "boost_caps must not be empty")?;
        require(self.boost_caps.0.iter().all(|l| *l >= 0.0), "boost caps must be ≥ 0")
    }
}

/// Social welfare (population-mean cumulative utility) of every run after
/// `cfg.horizon` periods.
pub fn run_welfare(cfg: &EcosystemConfig, seed: u64) -> Result<Vec<f64>> {
    let net = build_ecosystem_story(cfg)?;
    let last = Runtime::new(&net).retain_fields(false).execute(cfg.horizon - 1, seed)?;
    Ok(last.get("metrics")?.tensor("welfare")?.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> EcosystemConfig {
        EcosystemConfig {
            users: 12,
            providers: 4,
            items: 10,
            horizon: 6,
            runs: 3,
            dim: 3,
            slate: 2,
            ..EcosystemConfig::default()
        }
    }

    #[test]
    fn pairwise_matches_affinity_model() {
        let users = Tensor::from_fn([2, 3, 4], |i| (i as f64 * 0.37).sin());
        let items = Tensor::from_fn([2, 5, 4], |i| (i as f64 * 0.11).cos());
        let fast = pairwise_affinity(&users, &items).unwrap();
        let model = AffinityModel::new(Similarity::NegativeEuclidean);
        for r in 0..2 {
            let u = users.narrow(0, r, 1).unwrap().reshape([3, 4]).unwrap();
            let it = items.narrow(0, r, 1).unwrap().reshape([5, 4]).unwrap();
            let slow = model.affinities(&u, &it).unwrap();
            let got = fast.narrow(0, r, 1).unwrap().reshape([3, 5]).unwrap();
            assert!(got.allclose(&slow, 1e-12));
        }
    }

    #[test]
    fn counts_sum_to_total_with_floor_of_one() {
        let n = item_counts(&[100.0, 0.0, 3.4, 0.2], 0.0, 10);
        assert_eq!(n.iter().sum::<usize>(), 10);
        assert!(n.iter().all(|&k| k >= 1));
        assert!(n[0] > n[2] && n[2] >= n[1]);
        assert_eq!(item_counts(&[5.0; 4], 0.0, 10), vec![3, 3, 2, 2]);
        // Below the threshold a provider keeps only its guaranteed item.
        assert_eq!(item_counts(&[10.0, 4.0, 6.0], 5.0, 9), vec![6, 1, 2]);
        assert_eq!(item_counts(&[1.0, 2.0], 5.0, 6), vec![3, 3]);
    }

    #[test]
    fn boost_is_capped_and_centered() {
        let b = provider_boost(&[0.0, 10.0, 20.0], 1.0, 4.0);
        assert_eq!(b, vec![4.0, 0.0, -4.0]);
    }

    #[test]
    fn supply_and_engagement_invariants() {
        let cfg = small();
        let net = build_ecosystem_story(&cfg).unwrap();
        let traj = Runtime::new(&net).trajectory(cfg.horizon, 1).unwrap();
        for t in 0..cfg.horizon {
            let counts = traj.value("items", t).unwrap().tensor("counts").unwrap();
            for row in counts.data().chunks(cfg.providers) {
                assert_eq!(row.iter().sum::<f64>(), cfg.items as f64);
            }
            let e = traj.value("provider_state", t).unwrap().tensor("engagement").unwrap();
            assert!(e.data().iter().all(|x| *x >= 0.0));
        }
    }

    #[test]
    fn memoryless_engagement() {
        let cfg = EcosystemConfig { discount: 0.0, ..small() };
        let net = build_ecosystem_story(&cfg).unwrap();
        let traj = Runtime::new(&net).trajectory(cfg.horizon, 2).unwrap();
        for t in 1..cfg.horizon {
            let s = traj.value("provider_state", t).unwrap();
            assert_eq!(s.tensor("engagement").unwrap().data(), s.tensor("consumed").unwrap().data());
        }
    }

    #[test]
    fn zero_cap_matches_myopic() {
        let myopic = EcosystemConfig { boost_cap: 0.0, ..small() };
        let no_jitter = EcosystemConfig {
            boost_cap: 0.0,
            jitter: 0.0,
            ..small()
        };
        assert_eq!(run_welfare(&myopic, 5).unwrap(), run_welfare(&no_jitter, 5).unwrap());
    }

    #[test]
    fn single_provider_policies_agree() {
        let base = EcosystemConfig { providers: 1, ..small() };
        let boosted = EcosystemConfig { boost_cap: 2.4, ..base.clone() };
        let myopic = EcosystemConfig { boost_cap: 0.0, ..base };
        assert_eq!(run_welfare(&boosted, 3).unwrap(), run_welfare(&myopic, 3).unwrap());
    }
}
