//! Scoring observed trajectories under a network.
//!
//! Builders are replayed slice by slice with observed values standing in for
//! their dependencies; each stochastic field they emit is scored against the
//! observed value at its path. Deterministic outputs contribute nothing, but
//! must agree with what was observed.

use std::collections::BTreeSet;
use std::path::Path;

use crate::dist::{Distribution, DETERMINISTIC_TOL};
use crate::error::{Error, Result};
use crate::network::{Ctx, DepMode, Network, ParamSet, Payload, Value, ValueSpec};
use crate::runtime::{component_names, Trajectory};
use crate::tensor::Tensor;

/// Per-step observed values, possibly with whole fields held out.
#[derive(Debug, Clone)]
pub struct ObservedTrajectory {
    names: Vec<String>,
    specs: Vec<ValueSpec>,
    batch: usize,
    steps: Vec<Vec<Value>>,
}

impl ObservedTrajectory {
    /// Everything `traj` realized, detached from any tape.
    pub fn from_trajectory(net: &Network, traj: &Trajectory) -> Result<Self> {
        let steps = traj
            .slices()
            .iter()
            .map(|s| {
                s.values()
                    .iter()
                    .map(|v| {
                        v.try_map(|_, p| match p {
                            Payload::Tensor(t) => Ok(Payload::Tensor(t.detach())),
                            Payload::Field(_) => Err(Error::invalid("from_trajectory", "unrealized field")),
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::with_steps(net, steps))
    }

    fn with_steps(net: &Network, steps: Vec<Vec<Value>>) -> Self {
        ObservedTrajectory {
            names: net.variables().iter().map(|v| v.name.clone()).collect(),
            specs: net.variables().iter().map(|v| v.spec.clone()).collect(),
            batch: net.batch(),
            steps,
        }
    }

    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    fn var_index(&self, variable: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == variable)
            .ok_or_else(|| Error::invalid("observed trajectory", format!("no variable named `{variable}`")))
    }

    fn check_declared(&self, vi: usize, path: &str) -> Result<()> {
        if self.specs[vi].get(path).is_none() {
            return Err(Error::invalid(
                "observed trajectory",
                format!("`{}` declares no path `{path}`", self.names[vi]),
            ));
        }
        Ok(())
    }

    pub fn is_observed(&self, variable: &str, path: &str) -> Result<bool> {
        let vi = self.var_index(variable)?;
        Ok(self.steps.first().is_some_and(|s| s[vi].contains(path)))
    }

    /// Removes a field at every step.
    pub fn hold_out(&self, variable: &str, path: &str) -> Result<Self> {
        let vi = self.var_index(variable)?;
        self.check_declared(vi, path)?;
        let mut out = self.clone();
        for step in &mut out.steps {
            let kept = step[vi].try_map(|_, p| Ok(p.clone()))?;
            let mut v = Value::new();
            for (k, p) in kept.iter() {
                if k != path {
                    v.insert(k, p.clone())?;
                }
            }
            step[vi] = v;
        }
        Ok(out)
    }

    /// Fills a held-out field with one value per step.
    pub fn inject_field(&self, variable: &str, path: &str, values: &[Tensor]) -> Result<Self> {
        let vi = self.var_index(variable)?;
        self.check_declared(vi, path)?;
        if self.is_observed(variable, path)? {
            return Err(Error::AlreadyObserved {
                variable: variable.to_string(),
                path: path.to_string(),
            });
        }
        if values.len() != self.horizon() {
            return Err(Error::invalid(
                "inject_field",
                format!("{} values for a horizon of {}", values.len(), self.horizon()),
            ));
        }
        let spec = self.specs[vi].get(path).expect("declared");
        let mut want = vec![self.batch];
        want.extend_from_slice(&spec.shape);
        let mut out = self.clone();
        for (step, v) in out.steps.iter_mut().zip(values) {
            if v.shape() != want.as_slice() {
                return Err(Error::shape("inject_field", &want, v.shape()));
            }
            step[vi].insert(path, v.clone())?;
        }
        Ok(out)
    }

    /// Fills a held-out field with the same value at every step.
    pub fn inject_static(&self, variable: &str, path: &str, value: &Tensor) -> Result<Self> {
        let values = vec![value.clone(); self.horizon()];
        self.inject_field(variable, path, &values)
    }

    /// The observed value of a field at every step.
    pub fn field(&self, variable: &str, path: &str) -> Result<Vec<&Tensor>> {
        let vi = self.var_index(variable)?;
        self.steps
            .iter()
            .map(|s| {
                s[vi].tensor(path).map_err(|_| Error::MissingField {
                    variable: variable.to_string(),
                    path: path.to_string(),
                })
            })
            .collect()
    }

    pub fn value(&self, variable: &str, step: usize) -> Result<&Value> {
        let vi = self.var_index(variable)?;
        Ok(&self.steps[step][vi])
    }

    /// Reads the per-variable CSVs written by [`Trajectory::write_csv`].
    /// Fields whose columns are absent are treated as held out; a variable
    /// with no file is held out entirely.
    pub fn read_csv_dir(net: &Network, dir: &Path) -> Result<Self> {
        let batch = net.batch();
        let mut per_var: Vec<Vec<Value>> = Vec::new();
        let mut horizon: Option<usize> = None;
        for var in net.variables() {
            let file = dir.join(format!("{}.csv", var.name));
            if !file.exists() {
                per_var.push(Vec::new());
                continue;
            }
            let mut rdr = csv::ReaderBuilder::new()
                .comment(Some(b'#'))
                .from_path(&file)?;
            let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
            let col = |name: &str| header.iter().position(|h| h == name);
            let (Some(step_col), Some(batch_col)) = (col("step"), col("batch")) else {
                return Err(Error::Io(format!("{}: missing step/batch columns", file.display())));
            };
            let mut layout = Vec::new();
            for (path, spec) in var.spec.iter() {
                let names = component_names(path, &spec.shape);
                let cols: Vec<Option<usize>> = names.iter().map(|n| col(n)).collect();
                if cols.iter().all(Option::is_none) {
                    continue;
                }
                if cols.iter().any(Option::is_none) {
                    return Err(Error::Io(format!("{}: field `{path}` is partially present", file.display())));
                }
                layout.push((path.to_string(), spec.shape.clone(), cols.into_iter().map(Option::unwrap).collect::<Vec<_>>()));
            }
            let mut data: Vec<Vec<Vec<f64>>> = Vec::new();
            let mut seen: Vec<BTreeSet<usize>> = Vec::new();
            for rec in rdr.records() {
                let rec = rec?;
                let parse = |i: usize| -> Result<f64> {
                    rec.get(i)
                        .and_then(|s| s.parse::<f64>().ok())
                        .ok_or_else(|| Error::Io(format!("{}: bad number in column {i}", file.display())))
                };
                let step = parse(step_col)? as usize;
                let b = parse(batch_col)? as usize;
                if b >= batch {
                    return Err(Error::Io(format!("{}: batch index {b} >= {batch}", file.display())));
                }
                while data.len() <= step {
                    data.push(
                        layout
                            .iter()
                            .map(|(_, shape, _)| vec![0.0; batch * shape.iter().product::<usize>()])
                            .collect(),
                    );
                    seen.push(BTreeSet::new());
                }
                if !seen[step].insert(b) {
                    return Err(Error::Io(format!("{}: duplicate row step {step}, batch {b}", file.display())));
                }
                for (f, (_, _, cols)) in layout.iter().enumerate() {
                    let per = cols.len();
                    for (j, &c) in cols.iter().enumerate() {
                        data[step][f][b * per + j] = parse(c)?;
                    }
                }
            }
            if seen.iter().any(|s| s.len() != batch) {
                return Err(Error::Io(format!("{}: incomplete population rows", file.display())));
            }
            match horizon {
                None => horizon = Some(data.len()),
                Some(h) if h != data.len() => {
                    return Err(Error::Io(format!("{}: {} steps, expected {h}", file.display(), data.len())))
                }
                _ => {}
            }
            let mut values = Vec::with_capacity(data.len());
            for step in data {
                let mut v = Value::new();
                for ((path, shape, _), buf) in layout.iter().zip(step) {
                    let mut s = vec![batch];
                    s.extend_from_slice(shape);
                    v.insert(path, Tensor::from_vec(s, buf)?)?;
                }
                values.push(v);
            }
            per_var.push(values);
        }
        let horizon = horizon.ok_or_else(|| Error::Io(format!("no trajectory files in {}", dir.display())))?;
        let steps = (0..horizon)
            .map(|t| {
                per_var
                    .iter()
                    .map(|vals| vals.get(t).cloned().unwrap_or_default())
                    .collect()
            })
            .collect();
        Ok(Self::with_steps(net, steps))
    }
}

/// Total log-probability of slices `0..=num_steps` of `obs`.
///
/// `num_steps` counts kernel applications after the initial slice, so a
/// trajectory of horizon `T` is scored in full with `num_steps = T - 1`.
/// The result is taped whenever `params` are.
pub fn log_probability_from_value_trajectory(
    net: &Network,
    params: &ParamSet,
    obs: &ObservedTrajectory,
    num_steps: usize,
) -> Result<Tensor> {
    score(net, params, obs, num_steps, false)
}

/// As [`log_probability_from_value_trajectory`], but keeps one total per
/// population row (shape `[batch]`).
pub fn log_probability_per_row(
    net: &Network,
    params: &ParamSet,
    obs: &ObservedTrajectory,
    num_steps: usize,
) -> Result<Tensor> {
    score(net, params, obs, num_steps, true)
}

fn score(net: &Network, params: &ParamSet, obs: &ObservedTrajectory, num_steps: usize, per_row: bool) -> Result<Tensor> {
    if num_steps >= obs.horizon() {
        return Err(Error::invalid(
            "log_probability",
            format!("num_steps {num_steps} needs a horizon of at least {}", num_steps + 1),
        ));
    }
    let vars = net.variables();
    let mut total: Option<Tensor> = None;
    let mut prev: Vec<Value> = Vec::new();
    for t in 0..=num_steps {
        let ctx = Ctx {
            params,
            step: t,
            batch: net.batch(),
        };
        let order = if t == 0 { net.initial_order() } else { net.kernel_order() };
        let mut current: Vec<Option<Value>> = vec![None; vars.len()];
        for &i in order {
            let var = &vars[i];
            let observed = &obs.steps[t][i];
            for path in var.spec.paths() {
                if !observed.contains(path) {
                    return Err(Error::MissingField {
                        variable: var.name.clone(),
                        path: path.to_string(),
                    });
                }
            }
            let binding = if t == 0 { var.initial.as_ref() } else { var.kernel.as_ref() }.expect("validated");
            let deps: Vec<&Value> = binding
                .deps
                .iter()
                .map(|d| {
                    let j = net.index_of(&d.variable).expect("validated");
                    match d.mode {
                        DepMode::Current => current[j].as_ref().expect("topological order"),
                        DepMode::Previous => &prev[j],
                    }
                })
                .collect();
            let out = (binding.f)(&ctx, &deps)?;
            let mut replayed = Value::new();
            for (path, payload) in out.iter() {
                let seen = observed.tensor(path).map_err(|_| Error::MissingField {
                    variable: var.name.clone(),
                    path: path.to_string(),
                })?;
                let mismatch = || Error::DeterministicMismatch {
                    variable: var.name.clone(),
                    path: path.to_string(),
                    step: t,
                };
                match payload {
                    Payload::Tensor(x) | Payload::Field(Distribution::Deterministic { loc: x }) => {
                        if !same_values(x, seen) {
                            return Err(mismatch());
                        }
                        // The recomputed tensor keeps any dependence on parameters.
                        replayed.insert(path, x.clone())?;
                    }
                    Payload::Field(d) => {
                        let lp = d.log_prob(seen)?;
                        let lp = if per_row {
                            let b = net.batch();
                            lp.reshape([b, lp.numel() / b.max(1)])?.sum_axis(1, false)?
                        } else {
                            lp.reduce_sum()
                        };
                        total = Some(match total {
                            None => lp,
                            Some(acc) => acc.add(&lp)?,
                        });
                        replayed.insert(path, seen.clone())?;
                    }
                }
            }
            current[i] = Some(replayed);
        }
        prev = current.into_iter().map(|v| v.expect("every variable evaluated")).collect();
    }
    Ok(total.unwrap_or_else(|| {
        if per_row {
            Tensor::zeros([net.batch()])
        } else {
            Tensor::scalar(0.0)
        }
    }))
}

fn same_values(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape()
        && a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| (x - y).abs() <= DETERMINISTIC_TOL * x.abs().max(1.0))
}
