//! Small networks with closed-form answers.

use crate::dist::Distribution;
use crate::error::Result;
use crate::network::{Dep, FieldSpec, Network, ParamSet, Value, ValueSpec, Variable};
use crate::scenarios::{config_struct, require};
use crate::tensor::Tensor;

config_struct! {
    /// Settings shared by the toy stories.
    pub struct ToyConfig {
        horizon: usize = 5,
        /// Population size (the count story always has one row).
        batch: usize = 1,
        /// Step scale of the Gaussian walk.
        walk_scale: f64 = 1.0,
        /// Drift of the Gaussian walk.
        drift: f64 = 0.0,
        /// Success probabilities of the two bandit arms.
        arm_a: f64 = 0.9,
        arm_b: f64 = 0.1,
    }
}

impl ToyConfig {
    fn check(&self) -> Result<()> {
        require(self.horizon >= 1, "horizon must be ≥ 1")?;
        require(self.batch >= 1, "batch must be ≥ 1")?;
        require(self.walk_scale > 0.0, "walk_scale must be positive")?;
        require(
            [self.arm_a, self.arm_b].iter().all(|p| *p > 0.0 && *p < 1.0),
            "arm probabilities must be in (0, 1)",
        )
    }
}

/// `n` starts at 0 and increments by one per step.
pub fn count() -> Result<Network> {
    let count = Variable::new("count", ValueSpec::new().with("n", FieldSpec::scalar()))
        .initial(vec![], |ctx, _| Ok(Value::new().with("n", Tensor::zeros([ctx.batch]))))
        .kernel(vec![Dep::previous("count")], |_, deps| {
            Ok(Value::new().with("n", deps[0].tensor("n")?.add_scalar(1.0)))
        });
    Network::new(vec![count], 1)
}

/// `x_0 ~ N(0, 1)`, `x_t ~ N(x_{t-1} + drift, scale)` with trainable `drift`.
pub fn gaussian_walk(batch: usize, scale: f64) -> Result<(Network, ParamSet)> {
    let walk = Variable::new("walk", ValueSpec::new().with("x", FieldSpec::scalar()))
        .initial(vec![], |ctx, _| {
            Ok(Value::new().with("x", Distribution::normal(Tensor::zeros([ctx.batch]), Tensor::scalar(1.0))?))
        })
        .kernel(vec![Dep::previous("walk")], move |ctx, deps| {
            let drift = ctx.params.get("drift")?;
            let loc = deps[0].tensor("x")?.add(drift)?;
            Ok(Value::new().with("x", Distribution::normal(loc, Tensor::scalar(scale))?))
        });
    let mut params = ParamSet::new();
    params.insert("drift", Tensor::scalar(0.0))?;
    Ok((Network::new(vec![walk], batch)?, params))
}

/// Conditional probability tables of a two-variable binary DBN.
///
/// `a_0 ~ init_a`, `b_0 ~ b_given_a[a_0]`, then
/// `a_t ~ a_given_ab[a_{t-1}][b_{t-1}]` and `b_t ~ b_given_ab[a_t][b_{t-1}]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryDbn {
    pub init_a: [f64; 2],
    pub b_given_a: [[f64; 2]; 2],
    pub a_given_ab: [[[f64; 2]; 2]; 2],
    pub b_given_ab: [[[f64; 2]; 2]; 2],
}

fn logits(p: &[f64; 2]) -> Vec<f64> {
    p.iter().map(|x| x.ln()).collect()
}

/// Per-row logits picked from a table by an integer key.
fn lookup(table: &[Vec<f64>], keys: &[usize]) -> Result<Tensor> {
    let data = keys.iter().flat_map(|&k| table[k].iter().copied()).collect();
    Tensor::from_vec([keys.len(), 2], data)
}

impl BinaryDbn {
    pub fn network(&self, batch: usize) -> Result<Network> {
        let spec = || ValueSpec::new().with("state", FieldSpec::integer(Vec::<usize>::new(), 2));
        let init_a = logits(&self.init_a);
        let b0: Vec<Vec<f64>> = self.b_given_a.iter().map(logits).collect();
        let at: Vec<Vec<f64>> = self.a_given_ab.iter().flat_map(|r| r.iter().map(logits)).collect();
        let bt: Vec<Vec<f64>> = self.b_given_ab.iter().flat_map(|r| r.iter().map(logits)).collect();
        let state = |v: &Value| -> Result<Vec<usize>> { v.tensor("state")?.to_indices("dbn", 2) };
        let a = Variable::new("a", spec())
            .initial(vec![], move |ctx, _| {
                let l = lookup(std::slice::from_ref(&init_a), &vec![0; ctx.batch])?;
                Ok(Value::new().with("state", Distribution::categorical(l)?))
            })
            .kernel(vec![Dep::previous("a"), Dep::previous("b")], move |_, deps| {
                let (pa, pb) = (state(deps[0])?, state(deps[1])?);
                let keys: Vec<usize> = pa.iter().zip(&pb).map(|(a, b)| 2 * a + b).collect();
                Ok(Value::new().with("state", Distribution::categorical(lookup(&at, &keys)?)?))
            });
        let b = Variable::new("b", spec())
            .initial(vec![Dep::current("a")], move |_, deps| {
                let keys = state(deps[0])?;
                Ok(Value::new().with("state", Distribution::categorical(lookup(&b0, &keys)?)?))
            })
            .kernel(vec![Dep::current("a"), Dep::previous("b")], move |_, deps| {
                let (ca, pb) = (state(deps[0])?, state(deps[1])?);
                let keys: Vec<usize> = ca.iter().zip(&pb).map(|(a, b)| 2 * a + b).collect();
                Ok(Value::new().with("state", Distribution::categorical(lookup(&bt, &keys)?)?))
            });
        Network::new(vec![a, b], batch)
    }
}

/// A two-armed Bernoulli bandit played by a softmax policy over the
/// trainable logits `theta` (shape `[2]`), one pull per step.
///
/// Metrics: `metrics.cum_reward` and `metrics.cum_log_prob` (the summed log
/// policy probability of the pulled arms).
pub fn bandit(batch: usize, success: [f64; 2]) -> Result<(Network, ParamSet)> {
    let arm_spec = ValueSpec::new()
        .with("arm", FieldSpec::integer(Vec::<usize>::new(), 2))
        .with("logits", FieldSpec::continuous([2]));
    let pull = |ctx: &crate::network::Ctx<'_>| -> Result<Value> {
        let logits = ctx.params.get("theta")?.broadcast_to([ctx.batch, 2])?;
        Ok(Value::new()
            .with("arm", Distribution::categorical(logits.clone())?)
            .with("logits", logits))
    };
    let policy = Variable::new("policy", arm_spec).both(vec![], move |ctx, _| pull(ctx));
    let reward_logits: Vec<f64> = success.iter().map(|p| (p / (1.0 - p)).ln()).collect();
    let env = Variable::new("env", ValueSpec::new().with("reward", FieldSpec::integer(Vec::<usize>::new(), 2))).both(
        vec![Dep::current("policy")],
        move |_, deps| {
            let arms = deps[0].tensor("arm")?;
            let l = arms.map(|a| reward_logits[a as usize]);
            Ok(Value::new().with("reward", Distribution::bernoulli(l)?))
        },
    );
    let metrics_spec = ValueSpec::new()
        .with("cum_reward", FieldSpec::scalar())
        .with("cum_log_prob", FieldSpec::scalar());
    let step = |deps: &[&Value]| -> Result<(Tensor, Tensor)> {
        let policy = deps[0];
        let lp = policy.tensor("logits")?.log_softmax()?.gather(1, policy.tensor("arm")?)?;
        Ok((deps[1].tensor("reward")?.clone(), lp))
    };
    let metrics = Variable::new("metrics", metrics_spec)
        .initial(vec![Dep::current("policy"), Dep::current("env")], move |_, deps| {
            let (r, lp) = step(deps)?;
            Ok(Value::new().with("cum_reward", r).with("cum_log_prob", lp))
        })
        .kernel(
            vec![Dep::current("policy"), Dep::current("env"), Dep::previous("metrics")],
            move |_, deps| {
                let (r, lp) = step(deps)?;
                let prev = deps[2];
                Ok(Value::new()
                    .with("cum_reward", prev.tensor("cum_reward")?.add(&r)?)
                    .with("cum_log_prob", prev.tensor("cum_log_prob")?.add(&lp)?))
            },
        );
    let mut params = ParamSet::new();
    params.insert("theta", Tensor::zeros([2]))?;
    Ok((Network::new(vec![policy, env, metrics], batch)?, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::Runtime;

    #[test]
    fn count_goes_up_by_one() {
        let net = count().unwrap();
        let t = Runtime::new(&net).trajectory(5, 3).unwrap();
        let n: Vec<f64> = (0..5).map(|s| t.value("count", s).unwrap().tensor("n").unwrap().item().unwrap()).collect();
        assert_eq!(n, vec![0.0, 1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn bandit_log_prob_tracks_arms() {
        let (net, params) = bandit(8, [0.9, 0.1]).unwrap();
        let last = Runtime::new(&net).with_params(&params).execute(1, 4).unwrap();
        let lp = last.get("metrics").unwrap().tensor("cum_log_prob").unwrap();
        for v in lp.data() {
            assert!((v - 2.0 * 0.5f64.ln()).abs() < 1e-12);
        }
    }
}
