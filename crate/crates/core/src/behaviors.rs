//! Reusable behavioral building blocks: affinity and choice models, state
//! models, history estimators, and trainable-parameter capture for stories.

use crate::dist::Distribution;
use crate::error::{Error, Result};
use crate::network::{FieldSpec, ParamSet, Value, ValueSpec, Variable};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Similarity {
    NegativeEuclidean,
    DotProduct,
}

/// Scores every item against a per-row target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffinityModel {
    pub similarity: Similarity,
    /// Multiplies the raw similarity.
    pub scale: f64,
}

impl AffinityModel {
    pub fn new(similarity: Similarity) -> Self {
        AffinityModel { similarity, scale: 1.0 }
    }

    /// `targets: [P, d]`, `items: [P, S, d]` or `[S, d]` → `[P, S]`.
    pub fn affinities(&self, targets: &Tensor, items: &Tensor) -> Result<Tensor> {
        if targets.rank() != 2 || !(items.rank() == 2 || items.rank() == 3) {
            return Err(Error::shape("affinities", targets.shape(), items.shape()));
        }
        let d = targets.shape()[1];
        if items.shape().last() != Some(&d) {
            return Err(Error::shape("affinities", targets.shape(), items.shape()));
        }
        let t = targets.unsqueeze(1)?;
        let raw = match self.similarity {
            Similarity::NegativeEuclidean => items.sub(&t)?.squared_l2_norm()?.sqrt().neg(),
            Similarity::DotProduct => items.dot_last(&t)?,
        };
        Ok(if self.scale == 1.0 { raw } else { raw.mul_scalar(self.scale) })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChoiceKind {
    /// Argmax of the logits, lowest index on ties.
    Greedy,
    MultinomialLogit,
    /// Ordered selection of `k` items.
    PlackettLuce { k: usize },
}

/// Turns item scores into a choice distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChoiceModel {
    pub kind: ChoiceKind,
    /// When set, an extra option with this logit is appended; choosing index
    /// `slate_size` means abstaining.
    pub no_choice_logit: Option<f64>,
    /// Whether a boost is also added to the no-choice logit (off by default:
    /// a boost raises items relative to abstention).
    pub boost_no_choice: bool,
}

impl ChoiceModel {
    pub fn new(kind: ChoiceKind) -> Self {
        ChoiceModel {
            kind,
            no_choice_logit: None,
            boost_no_choice: false,
        }
    }

    pub fn with_no_choice(mut self, logit: f64) -> Self {
        self.no_choice_logit = Some(logit);
        self
    }

    /// Logits over `[P, S]` affinities plus an optional per-row boost `[P]`.
    pub fn logits(&self, affinities: &Tensor, boost: Option<&Tensor>) -> Result<Tensor> {
        if affinities.rank() != 2 {
            return Err(Error::invalid("choice", format!("affinities must be [P, S], got {:?}", affinities.shape())));
        }
        let p = affinities.shape()[0];
        let boost = boost.map(|b| b.reshape([p, 1])).transpose()?;
        let mut items = affinities.clone();
        if let Some(b) = &boost {
            items = items.add(b)?;
        }
        let Some(nc) = self.no_choice_logit else {
            return Ok(items);
        };
        let mut abstain = Tensor::full([p, 1], nc);
        if let (true, Some(b)) = (self.boost_no_choice, &boost) {
            abstain = abstain.add(b)?;
        }
        Tensor::concat(&[&items, &abstain], 1)
    }

    pub fn choice(&self, affinities: &Tensor, boost: Option<&Tensor>) -> Result<Distribution> {
        let logits = self.logits(affinities, boost)?;
        match self.kind {
            ChoiceKind::Greedy => Ok(Distribution::deterministic(logits.argmax_last()?)),
            ChoiceKind::MultinomialLogit => Distribution::categorical(logits),
            ChoiceKind::PlackettLuce { k } => Distribution::plackett_luce(logits, k),
        }
    }
}

/// `next ~ Normal(state·Aᵀ + control·Cᵀ, σ)`, with `A = I` and `C = λI`
/// unless matrices are given.
#[derive(Debug, Clone)]
pub struct LinearGaussianStateModel {
    pub transition: Option<Tensor>,
    pub control: Option<Tensor>,
    pub sensitivity: f64,
    /// Scalar or per-dimension noise scale.
    pub noise: Tensor,
}

impl LinearGaussianStateModel {
    pub fn new(sensitivity: f64, noise: f64) -> Self {
        LinearGaussianStateModel {
            transition: None,
            control: None,
            sensitivity,
            noise: Tensor::scalar(noise),
        }
    }

    pub fn loc(&self, state: &Tensor, control_input: &Tensor) -> Result<Tensor> {
        if state.shape() != control_input.shape() {
            return Err(Error::shape("linear_gaussian_next", state.shape(), control_input.shape()));
        }
        let a = match &self.transition {
            Some(m) => state.matmul(&transpose(m)?)?,
            None => state.clone(),
        };
        let c = match &self.control {
            Some(m) => control_input.matmul(&transpose(m)?)?,
            None => control_input.mul_scalar(self.sensitivity),
        };
        a.add(&c)
    }

    /// The next-state distribution; deterministic when every noise scale is 0.
    pub fn next(&self, state: &Tensor, control_input: &Tensor) -> Result<Distribution> {
        let loc = self.loc(state, control_input)?;
        if self.noise.data().iter().all(|s| *s == 0.0) {
            return Ok(Distribution::deterministic(loc));
        }
        Distribution::normal(loc, self.noise.clone())
    }
}

fn transpose(m: &Tensor) -> Result<Tensor> {
    if m.rank() != 2 {
        return Err(Error::invalid("transpose", format!("need a matrix, got {:?}", m.shape())));
    }
    let (r, c) = (m.shape()[0], m.shape()[1]);
    let idx = Tensor::from_fn([c * r], |i| ((i % r) * c + i / r) as f64);
    m.reshape([r * c])?.gather(0, &idx)?.reshape([c, r])
}

/// The control input `q · (F − S)` pulling `state` toward consumed item
/// features `F` with per-row strength `q`; rows with `mask = 0` get zero.
pub fn interest_pull(state: &Tensor, features: &Tensor, quality: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let p = state.shape()[0];
    let q = quality.mul(mask)?.reshape([p, 1])?;
    features.sub(state)?.mul(&q)
}

/// Static per-row state drawn from one shared Gaussian mixture.
#[derive(Debug, Clone)]
pub struct GaussianMixtureStateModel {
    /// `[K]`, summing to one.
    pub weights: Tensor,
    /// `[K, d]`.
    pub means: Tensor,
    /// `[K, 1]` (isotropic) or `[K, d]`.
    pub scales: Tensor,
}

impl GaussianMixtureStateModel {
    pub fn new(weights: Tensor, means: Tensor, scales: Tensor) -> Result<Self> {
        Distribution::gaussian_mixture(weights.clone(), means.clone(), scales.clone())?;
        Ok(GaussianMixtureStateModel { weights, means, scales })
    }

    /// A mixture field over `[rows, d]`.
    pub fn initial_state(&self, rows: usize) -> Result<Distribution> {
        let k = self.weights.numel();
        let d = *self.means.shape().last().unwrap();
        Distribution::gaussian_mixture(
            self.weights.broadcast_to([rows, k])?,
            self.means.broadcast_to([rows, k, d])?,
            self.scales.clone(),
        )
    }
}

/// Two-level sampling of points around cluster cores.
///
/// Cores come from a [`GaussianMixtureStateModel`]; points then pick a core
/// with probability proportional to `core_weights` (uniform by default) and
/// scatter around it with `point_scale`.
#[derive(Debug, Clone)]
pub struct HierarchicalSampler {
    pub point_scale: f64,
}

impl HierarchicalSampler {
    /// Field over `[lead.., n, d]` points around `cores: [lead.., C, d]`.
    pub fn points(&self, cores: &Tensor, core_weights: Option<&Tensor>, n: usize) -> Result<Distribution> {
        let r = cores.rank();
        if r < 2 {
            return Err(Error::invalid("hierarchical sampler", "cores must be [.., C, d]"));
        }
        let (c, d) = (cores.shape()[r - 2], cores.shape()[r - 1]);
        let lead = &cores.shape()[..r - 2];
        let mut wshape = lead.to_vec();
        wshape.extend([n, c]);
        let weights = match core_weights {
            Some(w) => {
                let mut per = lead.to_vec();
                per.extend([1, c]);
                w.reshape(per)?.broadcast_to(wshape)?
            }
            None => Tensor::full(wshape, 1.0 / c as f64),
        };
        let mut mshape = lead.to_vec();
        mshape.extend([n, c, d]);
        let means = cores.unsqueeze(r - 2)?.broadcast_to(mshape)?;
        Distribution::gaussian_mixture(weights, means, Tensor::scalar(self.point_scale))
    }
}

/// Fixed-capacity FIFO of per-row records with a validity mask.
///
/// State paths: `features: [P, H, d]`, `values: [P, H]`, `mask: [P, H]`;
/// the newest record is at slot `H - 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FiniteHistory {
    pub capacity: usize,
    pub dim: usize,
}

impl FiniteHistory {
    pub fn new(capacity: usize, dim: usize) -> Self {
        FiniteHistory { capacity, dim }
    }

    pub fn spec(&self) -> ValueSpec {
        ValueSpec::new()
            .with("features", FieldSpec::continuous([self.capacity, self.dim]))
            .with("values", FieldSpec::continuous([self.capacity]))
            .with("mask", FieldSpec::integer([self.capacity], 2))
    }

    pub fn empty(&self, rows: usize) -> Value {
        Value::new()
            .with("features", Tensor::zeros([rows, self.capacity, self.dim]))
            .with("values", Tensor::zeros([rows, self.capacity]))
            .with("mask", Tensor::zeros([rows, self.capacity]))
    }

    /// Appends one record to every row with `valid = 1`, evicting the oldest.
    pub fn push(&self, state: &Value, features: &Tensor, value: &Tensor, valid: &Tensor) -> Result<Value> {
        let (h, d) = (self.capacity, self.dim);
        let old_f = state.tensor("features")?;
        let old_v = state.tensor("values")?;
        let old_m = state.tensor("mask")?;
        let p = old_f.shape()[0];
        if features.shape() != [p, d] || value.shape() != [p] || valid.shape() != [p] {
            return Err(Error::invalid(
                "history push",
                format!(
                    "record shapes {:?}, {:?}, {:?} for {p} rows of dim {d}",
                    features.shape(),
                    value.shape(),
                    valid.shape()
                ),
            ));
        }
        let mut f = old_f.to_vec();
        let mut v = old_v.to_vec();
        let mut m = old_m.to_vec();
        for r in 0..p {
            if valid.data()[r] == 0.0 || h == 0 {
                continue;
            }
            f.copy_within(r * h * d + d..(r + 1) * h * d, r * h * d);
            f[(r + 1) * h * d - d..(r + 1) * h * d].copy_from_slice(&features.data()[r * d..(r + 1) * d]);
            v.copy_within(r * h + 1..(r + 1) * h, r * h);
            v[(r + 1) * h - 1] = value.data()[r];
            m.copy_within(r * h + 1..(r + 1) * h, r * h);
            m[(r + 1) * h - 1] = 1.0;
        }
        Ok(Value::new()
            .with("features", Tensor::from_vec([p, h, d], f)?)
            .with("values", Tensor::from_vec([p, h], v)?)
            .with("mask", Tensor::from_vec([p, h], m)?))
    }
}

/// Collects the trainable tensors a story creates.
#[derive(Debug, Default)]
pub struct ParamRegistry {
    params: ParamSet,
}

impl ParamRegistry {
    /// Registers `init` under `name`; returns the name for use with
    /// [`crate::network::Ctx::params`].
    pub fn register(&mut self, name: &str, init: Tensor) -> Result<String> {
        self.params.insert(name, init.detach())?;
        Ok(name.to_string())
    }
}

/// Runs a story, returning its variables and every parameter it registered.
/// Each call gets a fresh registry, so parameter sets never alias.
pub fn story_with_trainable_variables<F>(story: F) -> Result<(Vec<Variable>, ParamSet)>
where
    F: FnOnce(&mut ParamRegistry) -> Result<Vec<Variable>>,
{
    let mut reg = ParamRegistry::default();
    let vars = story(&mut reg)?;
    Ok((vars, reg.params))
}
