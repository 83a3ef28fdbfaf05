use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use anyhow::{Context, Result};
use rayon::prelude::*;

use ecosim::runtime::Slice;
use ecosim::scenarios::ecosystem::{build_ecosystem_story, run_welfare, EcosystemConfig, SweepConfig};
use ecosim::scenarios::latent_sat::{
    build_latent_sat_story, fit_latent_sat, pearson, trend_slope, EmSettings, LatentSatConfig,
};
use ecosim::scenarios::porl::{build_porl_story, train_porl, PorlConfig, TrainConfig};
use ecosim::scenarios::toy::{self, ToyConfig};
use ecosim::scenarios::derive_seed;
use ecosim::{Error, Network, ParamSet, Runtime};

use crate::settings::Settings;
use crate::Common;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Scenario {
    Count,
    Walk,
    Bandit,
    Porl,
    LatentSat,
    Ecosystem,
}

impl FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        Ok(match s {
            "count" => Scenario::Count,
            "walk" => Scenario::Walk,
            "bandit" => Scenario::Bandit,
            "porl" => Scenario::Porl,
            "latent_sat" => Scenario::LatentSat,
            "ecosystem" => Scenario::Ecosystem,
            other => {
                return Err(Error::Config(format!(
                    "unknown scenario `{other}` (expected count, walk, bandit, porl, latent_sat or ecosystem)"
                )))
            }
        })
    }
}

impl Scenario {
    fn name(self) -> &'static str {
        match self {
            Scenario::Count => "count",
            Scenario::Walk => "walk",
            Scenario::Bandit => "bandit",
            Scenario::Porl => "porl",
            Scenario::LatentSat => "latent_sat",
            Scenario::Ecosystem => "ecosystem",
        }
    }
}

/// Picks the scenario, checking it against the ones a command supports.
fn scenario(common: &Common, default: Scenario, allowed: &[Scenario]) -> Result<Scenario> {
    let s = match &common.scenario {
        Some(name) => name.parse()?,
        None => default,
    };
    if !allowed.contains(&s) {
        return Err(Error::Config(format!("scenario `{}` is not supported by this command", s.name())).into());
    }
    Ok(s)
}

/// Applies the config file, `--set` overrides and `--horizon`, then validates.
fn resolve(settings: &mut Settings, common: &Common) -> Result<()> {
    if let Some(path) = &common.config {
        settings.apply_file(path)?;
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("`--set {kv}` is not of the form key=value")))?;
        settings.set(k, v)?;
    }
    if let Some(h) = common.horizon {
        settings.set_where_present("horizon", &h.to_string())?;
    }
    settings.validate()?;
    Ok(())
}

fn header(command: &str, scenario: Scenario, common: &Common, runs: usize, settings: &mut Settings) -> String {
    format!(
        "# schema=config/1\ncommand = {command}\nscenario = {}\nseed = {}\nruns = {runs}\n{}",
        scenario.name(),
        common.seed,
        settings.render()
    )
}

/// Prints the config and returns true under `--dump-config`; otherwise
/// records it in the output directory.
fn provenance(common: &Common, text: &str) -> Result<bool> {
    if common.dump_config {
        print!("{text}");
        return Ok(true);
    }
    std::fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    std::fs::write(common.out.join("config.txt"), text)?;
    Ok(false)
}

/// Runs `f` on a pool sized by `ECOSIM_THREADS` (default: all cores).
fn with_pool<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("ECOSIM_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|n| *n >= 1)
            .ok_or_else(|| Error::Config(format!("ECOSIM_THREADS must be a positive integer, got `{v}`")))?;
        builder = builder.num_threads(n);
    }
    let pool = builder.build()?;
    Ok(pool.install(f))
}

fn csv_writer(dir: &Path, name: &str, schema: &str) -> Result<csv::Writer<File>> {
    let path = dir.join(name);
    let mut file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    writeln!(file, "# schema={schema}")?;
    Ok(csv::Writer::from_writer(file))
}

fn fmt(x: f64) -> String {
    format!("{x}")
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Standard error of the mean; `None` for a single run.
fn std_error(xs: &[f64]) -> Option<f64> {
    let n = xs.len();
    if n < 2 {
        return None;
    }
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    Some((var / n as f64).sqrt())
}

struct Story {
    network: Network,
    params: ParamSet,
    horizon: usize,
    /// `(variable, path)` pairs reported in the summary.
    metrics: Vec<(&'static str, &'static str)>,
}

fn build_story(scenario: Scenario, settings: &Settings) -> Result<Story> {
    Ok(match scenario {
        Scenario::Count | Scenario::Walk | Scenario::Bandit => {
            let cfg = settings.toy.as_ref().expect("toy settings");
            let (network, params, metrics) = match scenario {
                Scenario::Count => (toy::count()?, ParamSet::new(), vec![("count", "n")]),
                Scenario::Walk => {
                    let (net, mut params) = toy::gaussian_walk(cfg.batch, cfg.walk_scale)?;
                    params.set("drift", ecosim::Tensor::scalar(cfg.drift))?;
                    (net, params, vec![("walk", "x")])
                }
                _ => {
                    let (net, params) = toy::bandit(cfg.batch, [cfg.arm_a, cfg.arm_b])?;
                    (net, params, vec![("metrics", "cum_reward")])
                }
            };
            Story { network, params, horizon: cfg.horizon, metrics }
        }
        Scenario::Porl => {
            let cfg = settings.porl.as_ref().expect("porl settings");
            let story = build_porl_story(cfg)?;
            Story {
                network: story.network,
                params: story.params,
                horizon: cfg.horizon,
                metrics: vec![("metrics", "cum_reward"), ("metrics", "cum_log_prob")],
            }
        }
        Scenario::LatentSat => {
            let cfg = settings.latent_sat.as_ref().expect("latent_sat settings");
            let story = build_latent_sat_story(cfg)?;
            Story {
                network: story.network,
                params: story.truth,
                horizon: cfg.horizon,
                metrics: vec![("satisfaction", "level")],
            }
        }
        Scenario::Ecosystem => {
            let cfg = settings.ecosystem.as_ref().expect("ecosystem settings");
            Story {
                network: build_ecosystem_story(cfg)?,
                params: ParamSet::new(),
                horizon: cfg.horizon,
                metrics: vec![("metrics", "welfare")],
            }
        }
    })
}

fn metric_values(last: &Slice, variable: &str, path: &str) -> Result<Vec<f64>> {
    let t = last.get(variable)?.tensor(path)?;
    let rows = t.rows().max(1);
    let per = t.numel() / rows;
    Ok((0..rows).map(|r| mean(&t.data()[r * per..(r + 1) * per])).collect())
}

pub fn simulate(common: &Common) -> Result<()> {
    use Scenario::*;
    let scenario = scenario(common, Count, &[Count, Walk, Bandit, Porl, LatentSat, Ecosystem])?;
    let mut settings = Settings::default();
    match scenario {
        Count | Walk | Bandit => settings.toy = Some(ToyConfig::default()),
        Porl => settings.porl = Some(PorlConfig::default()),
        LatentSat => settings.latent_sat = Some(LatentSatConfig::default()),
        Ecosystem => settings.ecosystem = Some(EcosystemConfig::default()),
    }
    // The ecosystem carries its runs in the batch axis of one trajectory.
    let mut runs = common.runs.unwrap_or(1);
    if scenario == Ecosystem {
        if let Some(r) = common.runs {
            settings.set("ecosystem.runs", &r.to_string())?;
        }
    }
    resolve(&mut settings, common)?;
    if scenario == Ecosystem {
        runs = settings.ecosystem.as_ref().map_or(1, |c| c.runs);
    }
    if runs == 0 {
        return Err(Error::Config("runs must be ≥ 1".into()).into());
    }
    let text = header("simulate", scenario, common, runs, &mut settings);
    if provenance(common, &text)? {
        return Ok(());
    }
    let story = build_story(scenario, &settings)?;
    let jobs = if scenario == Ecosystem { 1 } else { runs };
    let write_traj = !common.no_trajectory;
    let results = with_pool(|| {
        (0..jobs)
            .into_par_iter()
            .map(|r| -> Result<_, Error> {
                let seed = derive_seed(common.seed, "simulate", r as u64);
                let rt = Runtime::new(&story.network).with_params(&story.params).retain_fields(false);
                if write_traj {
                    let traj = rt.trajectory(story.horizon, seed)?;
                    let last = traj.last_slice().clone();
                    Ok((Some(traj), last))
                } else {
                    Ok((None, rt.execute(story.horizon - 1, seed)?))
                }
            })
            .collect::<Vec<_>>()
    })?;

    let mut summary = csv_writer(&common.out, "summary.csv", "summary/1")?;
    summary.write_record(["run", "metric", "value"])?;
    for (r, res) in results.into_iter().enumerate() {
        let (traj, last) = res?;
        if let Some(traj) = traj {
            traj.write_csv(&common.out.join("trajectories").join(format!("run-{r}")))?;
        }
        for (var, path) in &story.metrics {
            let values = metric_values(&last, var, path)?;
            let name = format!("{var}.{path}");
            if scenario == Ecosystem {
                for (row, v) in values.iter().enumerate() {
                    summary.write_record([row.to_string(), name.clone(), fmt(*v)])?;
                }
            } else {
                summary.write_record([r.to_string(), name, fmt(mean(&values))])?;
            }
        }
    }
    summary.flush()?;
    Ok(())
}

pub fn train_reinforce(common: &Common) -> Result<()> {
    let scenario = scenario(common, Scenario::Porl, &[Scenario::Porl])?;
    let mut settings = Settings {
        porl: Some(PorlConfig::default()),
        train: Some(TrainConfig::default()),
        ..Settings::default()
    };
    resolve(&mut settings, common)?;
    let runs = common.runs.unwrap_or(5);
    if runs == 0 {
        return Err(Error::Config("runs must be ≥ 1".into()).into());
    }
    let text = header("train-reinforce", scenario, common, runs, &mut settings);
    if provenance(common, &text)? {
        return Ok(());
    }
    let porl = settings.porl.clone().expect("porl settings");
    let train = settings.train.clone().expect("train settings");
    let histories = if train.histories.0.is_empty() { vec![porl.history] } else { train.histories.0.clone() };
    let jobs: Vec<(usize, usize)> =
        histories.iter().flat_map(|&h| (0..runs).map(move |r| (h, r))).collect();
    let curves = with_pool(|| {
        jobs.par_iter()
            .map(|&(h, r)| {
                let cfg = PorlConfig { history: h, ..porl.clone() };
                train_porl(&cfg, &train, derive_seed(common.seed, "train-reinforce", r as u64))
            })
            .collect::<Vec<_>>()
    })?;
    let curves = curves.into_iter().collect::<Result<Vec<_>, _>>()?;

    let mut w = csv_writer(&common.out, "curve.csv", "curve/1")?;
    let mut head = vec!["iteration", "history", "run", "mean_cum_reward"];
    if common.timing {
        head.push("wall_ms");
    }
    w.write_record(&head)?;
    for (&(h, r), curve) in jobs.iter().zip(&curves) {
        for (i, reward) in curve.reward.iter().enumerate() {
            let mut rec = vec![i.to_string(), h.to_string(), r.to_string(), fmt(*reward)];
            if common.timing {
                rec.push(fmt(curve.wall_ms[i]));
            }
            w.write_record(&rec)?;
        }
    }
    w.flush()?;

    let mut w = csv_writer(&common.out, "curve_mean.csv", "curve_mean/1")?;
    let mut head = vec!["iteration".to_string()];
    head.extend(histories.iter().map(|h| format!("history_{h}")));
    w.write_record(&head)?;
    let averaged: Vec<Vec<f64>> = histories
        .iter()
        .enumerate()
        .map(|(hi, _)| {
            let group = &curves[hi * runs..(hi + 1) * runs];
            (0..=train.iterations).map(|i| mean(&group.iter().map(|c| c.reward[i]).collect::<Vec<_>>())).collect()
        })
        .collect();
    for i in 0..=train.iterations {
        let mut rec = vec![i.to_string()];
        rec.extend(averaged.iter().map(|a| fmt(a[i])));
        w.write_record(&rec)?;
    }
    w.flush()?;
    for (h, a) in histories.iter().zip(&averaged) {
        eprintln!("history {h}: mean cumulative reward {:.3} -> {:.3}", a[0], a[train.iterations]);
    }
    Ok(())
}

pub fn fit_em(common: &Common) -> Result<()> {
    let scenario = scenario(common, Scenario::LatentSat, &[Scenario::LatentSat])?;
    let mut settings = Settings {
        latent_sat: Some(LatentSatConfig::default()),
        em: Some(EmSettings::default()),
        ..Settings::default()
    };
    resolve(&mut settings, common)?;
    let runs = common.runs.unwrap_or(1);
    if runs == 0 {
        return Err(Error::Config("runs must be ≥ 1".into()).into());
    }
    let text = header("fit-em", scenario, common, runs, &mut settings);
    if provenance(common, &text)? {
        return Ok(());
    }
    let cfg = settings.latent_sat.clone().expect("latent_sat settings");
    let em = settings.em.clone().expect("em settings");
    let fits = with_pool(|| {
        (0..runs)
            .into_par_iter()
            .map(|r| fit_latent_sat(&cfg, &em, derive_seed(common.seed, "fit-em", r as u64)))
            .collect::<Vec<_>>()
    })?;
    let fits = fits.into_iter().collect::<Result<Vec<_>, _>>()?;

    let mut w = csv_writer(&common.out, "trace.csv", "em_trace/1")?;
    let mut head = vec!["iteration", "run", "objective", "acceptance"];
    if common.timing {
        head.push("wall_ms");
    }
    w.write_record(&head)?;
    for (r, fit) in fits.iter().enumerate() {
        for (i, obj) in fit.trace.iter().enumerate() {
            let mut rec = vec![i.to_string(), r.to_string(), fmt(*obj), fmt(fit.acceptance[i])];
            if common.timing {
                rec.push(fmt(fit.wall_ms[i]));
            }
            w.write_record(&rec)?;
        }
    }
    w.flush()?;

    let mut w = csv_writer(&common.out, "alpha.csv", "em_alpha/1")?;
    w.write_record(["user", "run", "true_alpha", "estimated_alpha"])?;
    for (r, fit) in fits.iter().enumerate() {
        for (u, (t, e)) in fit.true_alpha.iter().zip(&fit.estimated_alpha).enumerate() {
            w.write_record([u.to_string(), r.to_string(), fmt(*t), fmt(*e)])?;
        }
    }
    w.flush()?;

    let mut w = csv_writer(&common.out, "summary.csv", "summary/1")?;
    w.write_record(["run", "metric", "value"])?;
    for (r, fit) in fits.iter().enumerate() {
        let rows = [
            ("initial_objective", fit.trace[0]),
            ("final_objective", *fit.trace.last().expect("trace is never empty")),
            ("objective_slope", trend_slope(&fit.trace)),
            ("alpha_pearson_r", pearson(&fit.true_alpha, &fit.estimated_alpha)),
        ];
        for (name, v) in rows {
            w.write_record([r.to_string(), name.to_string(), fmt(v)])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn ecosystem_sweep(common: &Common) -> Result<()> {
    let scenario = scenario(common, Scenario::Ecosystem, &[Scenario::Ecosystem])?;
    let mut settings = Settings {
        ecosystem: Some(EcosystemConfig::default()),
        sweep: Some(SweepConfig::default()),
        ..Settings::default()
    };
    if let Some(r) = common.runs {
        settings.set("ecosystem.runs", &r.to_string())?;
    }
    resolve(&mut settings, common)?;
    let base = settings.ecosystem.clone().expect("ecosystem settings");
    let caps = settings.sweep.clone().expect("sweep settings").boost_caps.0;
    let text = header("ecosystem-sweep", scenario, common, base.runs, &mut settings);
    if provenance(common, &text)? {
        return Ok(());
    }
    // Every cap sees the same seed, so the worlds differ only by policy.
    let seed = derive_seed(common.seed, "ecosystem-sweep", 0);
    let results = with_pool(|| {
        caps.par_iter()
            .map(|&cap| {
                let start = Instant::now();
                let cfg = EcosystemConfig { boost_cap: cap, ..base.clone() };
                run_welfare(&cfg, seed).map(|w| (w, start.elapsed().as_secs_f64() * 1e3))
            })
            .collect::<Vec<_>>()
    })?;
    let results = results.into_iter().collect::<Result<Vec<_>, _>>()?;

    let mut w = csv_writer(&common.out, "welfare.csv", "welfare/1")?;
    w.write_record(["boost_cap", "run", "welfare"])?;
    for (cap, (welfare, _)) in caps.iter().zip(&results) {
        for (r, v) in welfare.iter().enumerate() {
            w.write_record([fmt(*cap), r.to_string(), fmt(*v)])?;
        }
    }
    w.flush()?;

    let mut w = csv_writer(&common.out, "welfare_summary.csv", "welfare_summary/1")?;
    let mut head = vec!["boost_cap", "mean", "std_error"];
    if common.timing {
        head.push("wall_ms");
    }
    w.write_record(&head)?;
    for (cap, (welfare, ms)) in caps.iter().zip(&results) {
        let mut rec = vec![fmt(*cap), fmt(mean(welfare)), std_error(welfare).map(fmt).unwrap_or_default()];
        if common.timing {
            rec.push(fmt(*ms));
        }
        w.write_record(&rec)?;
        eprintln!("boost cap {cap}: welfare {:.3}", mean(welfare));
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_error_needs_two_runs() {
        assert_eq!(std_error(&[3.0]), None);
        // Sample sd of [1, 3] is sqrt(2); divided by sqrt(2) gives 1.
        assert!((std_error(&[1.0, 3.0]).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scenario_names_round_trip() {
        for s in ["count", "walk", "bandit", "porl", "latent_sat", "ecosystem"] {
            assert_eq!(s.parse::<Scenario>().unwrap().name(), s);
        }
        assert!("nope".parse::<Scenario>().is_err());
    }
}
