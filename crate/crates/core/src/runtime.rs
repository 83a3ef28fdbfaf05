//! Ancestral sampling of a [`Network`] over a horizon.
//!
//! Slice 0 runs the initial builders; every later slice runs the kernel
//! builders with `previous` dependencies read from the slice before. Each
//! stochastic field is sampled from the stream keyed by
//! `(seed, variable, path, step)` and the global population row, so results
//! do not depend on evaluation order or on how a population is partitioned.

use std::fs::File;
use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use crate::dist::RngStream;
use crate::error::{Error, Result};
use crate::network::{Ctx, DepMode, Network, ParamSet, Payload, Value};

/// The realized values of every variable at one step.
#[derive(Debug, Clone)]
pub struct Slice {
    names: Arc<Vec<String>>,
    values: Vec<Value>,
}

impl Slice {
    pub fn get(&self, variable: &str) -> Result<&Value> {
        self.names
            .iter()
            .position(|n| n == variable)
            .map(|i| &self.values[i])
            .ok_or_else(|| Error::invalid("Slice::get", format!("no variable named `{variable}`")))
    }

    pub fn values(&self) -> &[Value] {
        &self.values
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Value)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }
}

/// Every slice of one simulated run.
#[derive(Debug, Clone)]
pub struct Trajectory {
    seed: u64,
    slices: Vec<Slice>,
    fields: Option<Vec<Slice>>,
}

impl Trajectory {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn horizon(&self) -> usize {
        self.slices.len()
    }

    pub fn slice(&self, step: usize) -> &Slice {
        &self.slices[step]
    }

    pub fn slices(&self) -> &[Slice] {
        &self.slices
    }

    pub fn last_slice(&self) -> &Slice {
        self.slices.last().expect("horizon >= 1")
    }

    /// The value of `variable` at `step`.
    pub fn value(&self, variable: &str, step: usize) -> Result<&Value> {
        self.slices[step].get(variable)
    }

    /// The builder outputs (distributions included) each realization came
    /// from, when retained.
    pub fn fields(&self, step: usize) -> Option<&Slice> {
        self.fields.as_ref().map(|f| &f[step])
    }

    /// Writes one `<variable>.csv` per variable into `dir`.
    ///
    /// Columns are `step`, `batch`, then one column per scalar component of
    /// each path: `path` for per-row scalars, `path[i]` or `path[i,j]` for
    /// higher-rank fields. Rows run over steps, then population rows.
    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let names = self.slices[0].names.clone();
        for (vi, name) in names.iter().enumerate() {
            let mut file = File::create(dir.join(format!("{name}.csv")))?;
            writeln!(file, "# schema=trajectory/1")?;
            let mut w = csv::Writer::from_writer(file);
            let first = &self.slices[0].values[vi];
            let mut header = vec!["step".to_string(), "batch".to_string()];
            for (path, payload) in first.iter() {
                let Payload::Tensor(t) = payload else { continue };
                header.extend(component_names(path, &t.shape()[1.min(t.rank())..]));
            }
            w.write_record(&header)?;
            for (step, slice) in self.slices.iter().enumerate() {
                let value = &slice.values[vi];
                let tensors: Vec<_> = value
                    .iter()
                    .filter_map(|(_, p)| match p {
                        Payload::Tensor(t) => Some(t),
                        Payload::Field(_) => None,
                    })
                    .collect();
                let rows = tensors.first().map(|t| t.rows()).unwrap_or(0);
                for b in 0..rows {
                    let mut rec = vec![step.to_string(), b.to_string()];
                    for t in &tensors {
                        let per = t.numel() / t.rows().max(1);
                        rec.extend(t.data()[b * per..(b + 1) * per].iter().map(|x| format!("{x}")));
                    }
                    w.write_record(&rec)?;
                }
            }
            w.flush()?;
        }
        Ok(())
    }
}

/// Column names for the per-row components of a field with event shape
/// `event`.
pub fn component_names(path: &str, event: &[usize]) -> Vec<String> {
    if event.is_empty() {
        return vec![path.to_string()];
    }
    let n: usize = event.iter().product();
    (0..n)
        .map(|mut flat| {
            let mut idx = vec![0; event.len()];
            for a in (0..event.len()).rev() {
                idx[a] = flat % event[a];
                flat /= event[a];
            }
            let parts: Vec<String> = idx.iter().map(|i| i.to_string()).collect();
            format!("{path}[{}]", parts.join(","))
        })
        .collect()
}

/// Runs a network; cheap to construct and reusable across seeds.
#[derive(Debug, Clone)]
pub struct Runtime<'a> {
    net: &'a Network,
    params: ParamSet,
    row_offset: u64,
    retain_fields: bool,
}

impl<'a> Runtime<'a> {
    pub fn new(net: &'a Network) -> Self {
        Runtime {
            net,
            params: ParamSet::new(),
            row_offset: 0,
            retain_fields: true,
        }
    }

    /// Parameters visible to builders (possibly taped).
    pub fn with_params(mut self, params: &ParamSet) -> Self {
        self.params = params.clone();
        self
    }

    /// Global index of this network's first population row; used when a
    /// population is simulated in pieces.
    pub fn with_row_offset(mut self, offset: u64) -> Self {
        self.row_offset = offset;
        self
    }

    /// Whether trajectories keep the distributions each field was drawn from.
    pub fn retain_fields(mut self, keep: bool) -> Self {
        self.retain_fields = keep;
        self
    }

    pub fn network(&self) -> &Network {
        self.net
    }

    /// Samples `horizon` slices.
    pub fn trajectory(&self, horizon: usize, seed: u64) -> Result<Trajectory> {
        if horizon == 0 {
            return Err(Error::config("horizon must be ≥ 1"));
        }
        let mut slices = Vec::with_capacity(horizon);
        let mut fields = self.retain_fields.then(|| Vec::with_capacity(horizon));
        for t in 0..horizon {
            let (realized, raw) = self.step(t, slices.last(), seed)?;
            if let Some(f) = fields.as_mut() {
                f.push(raw);
            }
            slices.push(realized);
        }
        Ok(Trajectory { seed, slices, fields })
    }

    /// Applies the kernel `num_steps` times after the initial slice and
    /// returns only the final slice. `num_steps = 0` yields the initial slice.
    pub fn execute(&self, num_steps: usize, seed: u64) -> Result<Slice> {
        let (mut current, _) = self.step(0, None, seed)?;
        for t in 1..=num_steps {
            current = self.step(t, Some(&current), seed)?.0;
        }
        Ok(current)
    }

    /// Continues from `slice`, taken to be step `start`, for `num_steps`
    /// further kernel applications. The returned trajectory starts with
    /// `slice` itself.
    pub fn continue_from(&self, slice: &Slice, start: usize, num_steps: usize, seed: u64) -> Result<Trajectory> {
        let mut slices = vec![slice.clone()];
        for t in start + 1..=start + num_steps {
            let next = self.step(t, slices.last(), seed)?.0;
            slices.push(next);
        }
        Ok(Trajectory {
            seed,
            slices,
            fields: None,
        })
    }

    fn step(&self, t: usize, prev: Option<&Slice>, seed: u64) -> Result<(Slice, Slice)> {
        let vars = self.net.variables();
        let order = if t == 0 {
            self.net.initial_order()
        } else {
            self.net.kernel_order()
        };
        let mut realized: Vec<Option<Value>> = vec![None; vars.len()];
        let mut raw: Vec<Option<Value>> = vec![None; vars.len()];
        let ctx = Ctx {
            params: &self.params,
            step: t,
            batch: self.net.batch(),
        };
        for &i in order {
            let var = &vars[i];
            let binding = if t == 0 { var.initial.as_ref() } else { var.kernel.as_ref() }.expect("validated");
            let deps = binding
                .deps
                .iter()
                .map(|d| {
                    let j = self.net.index_of(&d.variable).expect("validated");
                    match d.mode {
                        DepMode::Current => realized[j].as_ref().expect("topological order"),
                        DepMode::Previous => &prev.expect("kernel has a previous slice").values[j],
                    }
                })
                .collect::<Vec<_>>();
            let out = (binding.f)(&ctx, &deps)?;
            let value = out.try_map(|path, payload| match payload {
                Payload::Tensor(t) => Ok(Payload::Tensor(t.clone())),
                Payload::Field(d) => {
                    let stream = RngStream::new(seed, &var.name, path, t);
                    Ok(Payload::Tensor(d.sample(&stream, self.row_offset)?))
                }
            })?;
            var.spec.check(&var.name, t, self.net.batch(), &value)?;
            realized[i] = Some(value);
            if self.retain_fields {
                raw[i] = Some(out);
            }
        }
        let names = Arc::new(vars.iter().map(|v| v.name.clone()).collect::<Vec<_>>());
        let realized = Slice {
            names: names.clone(),
            values: realized.into_iter().map(|v| v.expect("every variable evaluated")).collect(),
        };
        let raw = Slice {
            names,
            values: raw.into_iter().map(Option::unwrap_or_default).collect(),
        };
        Ok((realized, raw))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::Distribution;
    use crate::network::{Dep, FieldSpec, ValueSpec, Variable};
    use crate::tensor::Tensor;

    pub(crate) fn count_network() -> Network {
        let count = Variable::new("count", ValueSpec::new().with("n", FieldSpec::scalar()))
            .initial(vec![], |_, _| Ok(Value::new().with("n", Tensor::zeros([1]))))
            .kernel(vec![Dep::previous("count")], |_, deps| {
                Ok(Value::new().with("n", deps[0].tensor("n")?.add_scalar(1.0)))
            });
        Network::new(vec![count], 1).unwrap()
    }

    #[test]
    fn count_counts() {
        let net = count_network();
        let rt = Runtime::new(&net);
        let traj = rt.trajectory(5, 0).unwrap();
        let ns: Vec<f64> = (0..5).map(|t| traj.value("count", t).unwrap().tensor("n").unwrap().data()[0]).collect();
        assert_eq!(ns, vec![0.0, 1.0, 2.0, 3.0, 4.0]);
        let last = rt.execute(10, 0).unwrap();
        assert_eq!(last.get("count").unwrap().tensor("n").unwrap().data(), &[10.0]);
        let first = rt.execute(0, 0).unwrap();
        assert_eq!(first.get("count").unwrap().tensor("n").unwrap().data(), &[0.0]);
        assert!(rt.trajectory(0, 0).is_err());
    }

    fn walk(batch: usize) -> Network {
        let x = Variable::new("x", ValueSpec::new().with("pos", FieldSpec::continuous([2])))
            .initial(vec![], move |ctx, _| {
                Ok(Value::new().with(
                    "pos",
                    Distribution::normal(Tensor::zeros([ctx.batch, 2]), Tensor::scalar(1.0))?,
                ))
            })
            .kernel(vec![Dep::previous("x")], |_, deps| {
                Ok(Value::new().with("pos", Distribution::normal(deps[0].tensor("pos")?.clone(), Tensor::scalar(0.5))?))
            });
        Network::new(vec![x], batch).unwrap()
    }

    #[test]
    fn same_seed_same_trajectory() {
        let net = walk(3);
        let rt = Runtime::new(&net);
        let a = rt.trajectory(6, 42).unwrap();
        let b = rt.trajectory(6, 42).unwrap();
        let c = rt.trajectory(6, 43).unwrap();
        for t in 0..6 {
            assert_eq!(a.value("x", t).unwrap().tensor("pos").unwrap(), b.value("x", t).unwrap().tensor("pos").unwrap());
        }
        assert_ne!(a.value("x", 5).unwrap().tensor("pos").unwrap(), c.value("x", 5).unwrap().tensor("pos").unwrap());
        let last = rt.execute(5, 42).unwrap();
        assert_eq!(last.get("x").unwrap().tensor("pos").unwrap(), a.last_slice().get("x").unwrap().tensor("pos").unwrap());
    }

    #[test]
    fn population_rows_match_split_runs() {
        let whole = walk(4);
        let part = walk(1);
        let big = Runtime::new(&whole).trajectory(4, 9).unwrap();
        for r in 0..4 {
            let small = Runtime::new(&part).with_row_offset(r as u64).trajectory(4, 9).unwrap();
            for t in 0..4 {
                let b = big.value("x", t).unwrap().tensor("pos").unwrap();
                let s = small.value("x", t).unwrap().tensor("pos").unwrap();
                assert_eq!(&b.data()[r * 2..r * 2 + 2], s.data());
            }
        }
    }

    #[test]
    fn spec_violation_names_variable_and_step() {
        let v = Variable::new("v", ValueSpec::new().with("a", FieldSpec::continuous([2])))
            .initial(vec![], |_, _| Ok(Value::new().with("a", Tensor::zeros([1, 2]))))
            .kernel(vec![], |_, _| Ok(Value::new().with("a", Tensor::zeros([1, 3]))));
        let net = Network::new(vec![v], 1).unwrap();
        let err = Runtime::new(&net).trajectory(3, 0).unwrap_err();
        assert_eq!(
            err.to_string(),
            "variable `v`, path `a`, step 1: shape [1, 3], expected [1, 2]"
        );
    }

    #[test]
    fn csv_layout() {
        let net = walk(2);
        let traj = Runtime::new(&net).trajectory(2, 1).unwrap();
        let dir = std::env::temp_dir().join(format!("ecosim-runtime-csv-{}", std::process::id()));
        traj.write_csv(&dir).unwrap();
        let text = std::fs::read_to_string(dir.join("x.csv")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# schema=trajectory/1");
        assert_eq!(lines[1], "step,batch,pos[0],pos[1]");
        assert_eq!(lines.len(), 2 + 4);
        assert!(lines[5].starts_with("1,1,"));
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn component_naming() {
        assert_eq!(component_names("a", &[]), vec!["a"]);
        assert_eq!(component_names("m", &[2, 2]), vec!["m[0,0]", "m[0,1]", "m[1,0]", "m[1,1]"]);
    }
}
