//! Subcommand drivers.

use std::collections::BTreeMap;
use std::time::Instant;

use fedgnn::data::{build_local_graphs, load_ratings, split_dataset, synth_low_rank, RatingDataset};
use fedgnn::model::GnnVariant;
use fedgnn::privacy::{anonymity_degree, privacy_budget, LdpConfig};
use fedgnn::server::{evaluate_rmse, Simulator, TrainHistory};

use crate::checkpoint::{config_hash, hex, Checkpoint};
use crate::config::{DatasetSource, RunConfig};
use crate::error::CliError;
use crate::report::{sibling_path, Report};

pub fn load_dataset(cfg: &RunConfig) -> Result<RatingDataset, CliError> {
    match &cfg.dataset {
        None => Err(CliError::dataset("no dataset given (use --dataset)")),
        Some(DatasetSource::Synthetic(s)) => {
            synth_low_rank(s.users, s.items, s.rank, s.density, s.noise, cfg.train.seed)
                .map_err(CliError::dataset)
        }
        Some(DatasetSource::File { path, format }) => {
            load_ratings(path, *format).map_err(CliError::dataset)
        }
    }
}

pub struct Splits {
    pub train: RatingDataset,
    pub val: RatingDataset,
    pub test: RatingDataset,
}

pub fn split(cfg: &RunConfig, ds: &RatingDataset) -> Result<Splits, CliError> {
    let (train, val, test) =
        split_dataset(ds, cfg.train_frac, cfg.val_frac, cfg.train.seed).map_err(CliError::dataset)?;
    Ok(Splits { train, val, test })
}

pub struct TrainOutcome {
    pub history: TrainHistory,
    pub test_rmse: f64,
    pub checkpoint: Checkpoint,
    pub seconds: f64,
}

pub fn train_once(cfg: &RunConfig, splits: &Splits) -> Result<TrainOutcome, CliError> {
    let t = Instant::now();
    let mut sim = Simulator::new(cfg.train.clone(), &splits.train).map_err(CliError::training)?;
    let history = sim.train(Some(&splits.val)).map_err(CliError::training)?;
    let test_rmse = sim.evaluate(&splits.test).map_err(CliError::training)?;
    let neighbors = sim
        .clients()
        .iter()
        .filter(|c| !c.graph.neighbor_users.is_empty())
        .map(|c| (c.user_id(), c.graph.neighbor_users.clone()))
        .collect();
    let checkpoint = Checkpoint {
        config_hash: config_hash(&cfg.echo()),
        params: sim.params().clone(),
        neighbors,
    };
    Ok(TrainOutcome {
        history,
        test_rmse,
        checkpoint,
        seconds: t.elapsed().as_secs_f64(),
    })
}

fn push_config(report: &mut Report, cfg: &RunConfig) {
    for (k, v) in cfg.echo() {
        report.push(format!("config.{k}"), v);
    }
    report.push("config_hash", hex(&config_hash(&cfg.echo())));
}

fn push_privacy(report: &mut Report, ldp: &LdpConfig, m: usize, users: usize, ratings: usize) {
    match privacy_budget(ldp.clip_delta, ldp.noise_lambda) {
        Ok(eps) => report.push("epsilon", eps),
        Err(_) => report.push("epsilon", "unbounded"),
    }
    if let Ok(a) = anonymity_degree(m, users, ratings) {
        report.push("anonymity_degree", a);
    }
}

fn push_sizes(report: &mut Report, s: &Splits) {
    report.push("users", s.train.user_count);
    report.push("items", s.train.item_count);
    report.push("train_ratings", s.train.len());
    report.push("val_ratings", s.val.len());
    report.push("test_ratings", s.test.len());
}

fn write_report(cfg: &RunConfig, report: &Report) -> Result<(), CliError> {
    match &cfg.report {
        Some(path) => report.write(path),
        None => Ok(()),
    }
}

pub fn train(cfg: &RunConfig) -> Result<Report, CliError> {
    let ds = load_dataset(cfg)?;
    let splits = split(cfg, &ds)?;
    let out = train_once(cfg, &splits)?;

    let mut report = Report::default();
    report.push("command", "train");
    push_config(&mut report, cfg);
    push_sizes(&mut report, &splits);
    report.push("rounds", out.history.rounds.len());
    for r in &out.history.rounds {
        report.push(format!("round.{}.train_loss", r.round), r.train_loss);
    }
    for e in &out.history.epochs {
        if let Some(v) = e.val_rmse {
            report.push(format!("epoch.{}.val_rmse", e.epoch), v);
        }
    }
    report.push(
        "expansion_round",
        out.history
            .expansion_round
            .map_or("none".to_string(), |r| r.to_string()),
    );
    report.push("stopped_early", out.history.stopped_early);
    report.push("test_rmse", out.test_rmse);
    let t = &cfg.train;
    push_privacy(&mut report, &t.ldp, t.pseudo_items, splits.train.user_count, splits.train.len());
    report.push("wall_seconds", format!("{:.3}", out.seconds));

    if let Some(path) = &cfg.checkpoint {
        out.checkpoint.save(path)?;
    }
    write_report(cfg, &report)?;
    println!(
        "train: {} rounds, test RMSE {:.4}, epsilon {}, {:.1}s",
        out.history.rounds.len(),
        out.test_rmse,
        report.get("epsilon").unwrap_or("-"),
        out.seconds
    );
    Ok(report)
}

pub fn eval(cfg: &RunConfig) -> Result<Report, CliError> {
    let path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::checkpoint("eval needs --checkpoint"))?;
    let ckpt = Checkpoint::load(path)?;
    let expected = config_hash(&cfg.echo());
    if ckpt.config_hash != expected {
        return Err(CliError::checkpoint(format!(
            "checkpoint was trained with config {}, current config is {}",
            hex(&ckpt.config_hash),
            hex(&expected)
        )));
    }
    let ds = load_dataset(cfg)?;
    let splits = split(cfg, &ds)?;
    let mut graphs = build_local_graphs(&splits.train).map_err(CliError::dataset)?;
    for (user, list) in &ckpt.neighbors {
        if let Some(g) = graphs.get_mut(user) {
            g.neighbor_users = list.clone();
        }
    }
    let t = Instant::now();
    let rmse = |d: &RatingDataset| {
        evaluate_rmse(&ckpt.params, |u| graphs.get(&u), d).map_err(CliError::training)
    };
    let val_rmse = rmse(&splits.val)?;
    let test_rmse = rmse(&splits.test)?;

    let mut report = Report::default();
    report.push("command", "eval");
    push_config(&mut report, cfg);
    push_sizes(&mut report, &splits);
    report.push("val_rmse", val_rmse);
    report.push("test_rmse", test_rmse);
    let tc = &cfg.train;
    push_privacy(&mut report, &tc.ldp, tc.pseudo_items, splits.train.user_count, splits.train.len());
    report.push("wall_seconds", format!("{:.3}", t.elapsed().as_secs_f64()));
    write_report(cfg, &report)?;
    println!("eval: validation RMSE {val_rmse:.4}, test RMSE {test_rmse:.4}");
    Ok(report)
}

/// One grid axis, e.g. `lambda=0.1,0.2,0.3`.
#[derive(Debug, Clone, PartialEq)]
pub struct Axis {
    pub key: String,
    pub values: Vec<f64>,
}

pub fn parse_axis(spec: &str) -> Result<Axis, CliError> {
    let (key, list) = spec
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("grid {spec:?} is not key=v1,v2,...")))?;
    let key = key.trim().to_ascii_lowercase();
    if !matches!(key.as_str(), "delta" | "lambda" | "m") {
        return Err(CliError::config(format!(
            "grid key {key:?} is not one of delta, lambda, m"
        )));
    }
    let values = list
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| CliError::config(format!("grid value {v:?} is not a number")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if values.is_empty() {
        return Err(CliError::config(format!("grid {spec:?} has no values")));
    }
    Ok(Axis { key, values })
}

fn apply_axis(cfg: &mut RunConfig, key: &str, v: f64) -> Result<(), CliError> {
    let ldp = cfg.train.ldp;
    match key {
        "delta" => cfg.train.ldp = LdpConfig::new(v, ldp.noise_lambda).map_err(CliError::config)?,
        "lambda" => cfg.train.ldp = LdpConfig::new(ldp.clip_delta, v).map_err(CliError::config)?,
        "m" => {
            if v < 0.0 || v.fract() != 0.0 {
                return Err(CliError::config(format!("grid m={v} is not a count")));
            }
            cfg.train.pseudo_items = v as usize;
        }
        _ => unreachable!("axis keys are checked when parsed"),
    }
    Ok(())
}

/// Cartesian product of the axes, as (label, config) cells.
pub fn grid_cells(base: &RunConfig, axes: &[Axis]) -> Result<Vec<(String, RunConfig)>, CliError> {
    let mut cells = vec![(String::new(), base.clone())];
    for axis in axes {
        let mut next = Vec::new();
        for (label, cfg) in &cells {
            for &v in &axis.values {
                let mut c = cfg.clone();
                apply_axis(&mut c, &axis.key, v)?;
                let part = format!("{}={v}", axis.key);
                let l = if label.is_empty() { part } else { format!("{label},{part}") };
                next.push((l, c));
            }
        }
        cells = next;
    }
    Ok(cells)
}

pub fn ablation_cells(base: &RunConfig) -> Vec<(String, RunConfig)> {
    let mut cells = Vec::new();
    for v in GnnVariant::ALL {
        for expansion in [true, false] {
            let mut c = base.clone();
            c.train.variant = v;
            c.train.expansion = expansion;
            let label = format!("{v}-{}", if expansion { "expansion" } else { "first-order" });
            cells.push((label, c));
        }
    }
    cells
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub label: String,
    pub seeds: Vec<u64>,
    pub test_rmse: Vec<f64>,
}

impl CellResult {
    pub fn mean(&self) -> f64 {
        self.test_rmse.iter().sum::<f64>() / self.test_rmse.len() as f64
    }
}

/// Trains every cell under `seeds` consecutive seeds starting at the
/// configured one, writes one report per cell and returns the summary.
pub fn run_cells(
    command: &str,
    base: &RunConfig,
    cells: &[(String, RunConfig)],
    seeds: usize,
) -> Result<(Report, Vec<CellResult>), CliError> {
    if seeds == 0 {
        return Err(CliError::config("--seeds must be positive"));
    }
    let ds = load_dataset(base)?;
    let synthetic = matches!(base.dataset, Some(DatasetSource::Synthetic(_)));
    let seed_list: Vec<u64> = (0..seeds as u64).map(|k| base.train.seed + k).collect();
    let mut results = Vec::new();
    let mut summary = Report::default();
    summary.push("command", command);
    summary.push("cells", cells.len());
    summary.push(
        "seeds",
        seed_list.iter().map(u64::to_string).collect::<Vec<_>>().join(","),
    );

    for (label, cell) in cells {
        let t = Instant::now();
        let mut report = Report::default();
        report.push("command", command);
        report.push("cell", label);
        push_config(&mut report, cell);
        let mut rmse = Vec::new();
        let mut by_seed = BTreeMap::new();
        for &seed in &seed_list {
            let mut c = cell.clone();
            c.train.seed = seed;
            let ds_seeded;
            let data = if synthetic {
                ds_seeded = load_dataset(&c)?;
                &ds_seeded
            } else {
                &ds
            };
            let splits = split(&c, data)?;
            let out = train_once(&c, &splits)?;
            report.push(format!("seed.{seed}.test_rmse"), out.test_rmse);
            if let Some(v) = out.history.epochs.last().and_then(|e| e.val_rmse) {
                report.push(format!("seed.{seed}.val_rmse"), v);
            }
            by_seed.insert(seed, (splits.train.user_count, splits.train.len()));
            rmse.push(out.test_rmse);
        }
        let result = CellResult {
            label: label.clone(),
            seeds: seed_list.clone(),
            test_rmse: rmse,
        };
        report.push("mean_test_rmse", result.mean());
        let (users, ratings) = by_seed[&seed_list[0]];
        let t_cfg = &cell.train;
        push_privacy(&mut report, &t_cfg.ldp, t_cfg.pseudo_items, users, ratings);
        report.push("wall_seconds", format!("{:.3}", t.elapsed().as_secs_f64()));
        if let Some(path) = &base.report {
            report.write(&sibling_path(path, label))?;
        }
        summary.push(format!("cell.{label}.mean_test_rmse"), result.mean());
        println!(
            "{label:<28} mean test RMSE {:.4}  [{}]",
            result.mean(),
            result
                .test_rmse
                .iter()
                .map(|x| format!("{x:.4}"))
                .collect::<Vec<_>>()
                .join(", ")
        );
        results.push(result);
    }
    write_report(base, &summary)?;
    Ok((summary, results))
}

pub fn sweep(base: &RunConfig, grid: &[String], seeds: usize) -> Result<Report, CliError> {
    if grid.is_empty() {
        return Err(CliError::config("sweep needs at least one --grid key=v1,v2,..."));
    }
    let axes = grid.iter().map(|g| parse_axis(g)).collect::<Result<Vec<_>, _>>()?;
    let cells = grid_cells(base, &axes)?;
    run_cells("sweep", base, &cells, seeds).map(|(r, _)| r)
}

pub fn ablate(base: &RunConfig, seeds: usize) -> Result<Report, CliError> {
    run_cells("ablate", base, &ablation_cells(base), seeds).map(|(r, _)| r)
}
