//! Run configuration: defaults, overridden by a TOML file, overridden by flags.

use std::fmt::Display;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::Deserialize;

use fedgnn::data::{DatasetFormat, RatingScale};
use fedgnn::model::GnnVariant;
use fedgnn::privacy::LdpConfig;
use fedgnn::server::TrainConfig;

use crate::error::CliError;

/// Flags shared by every subcommand. Every value is optional so that unset
/// flags fall through to the config file and then to the defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct Options {
    /// TOML file with any of the keys below (underscored).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Ratings file, or `synthetic` for a generated low-rank dataset.
    #[arg(long)]
    pub dataset: Option<String>,
    /// ml100k | generic-tsv
    #[arg(long)]
    pub format: Option<String>,
    /// gat | gcn | ggnn
    #[arg(long)]
    pub variant: Option<String>,
    /// Gradient clipping threshold.
    #[arg(long)]
    pub delta: Option<f64>,
    /// Laplace noise strength; 0 disables noise.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Pseudo interacted items per client.
    #[arg(long)]
    pub m: Option<i64>,
    /// Clients per round.
    #[arg(long)]
    pub round_size: Option<i64>,
    #[arg(long)]
    pub epochs: Option<i64>,
    /// Epochs before graph expansion.
    #[arg(long)]
    pub t_threshold: Option<i64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub dim: Option<i64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub neighbor_cap: Option<i64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub no_expansion: bool,
    /// Local mini-batch size, 0 for the full local graph.
    #[arg(long)]
    pub minibatch: Option<i64>,
    /// Stop after this many epochs without validation improvement.
    #[arg(long)]
    pub early_stopping: Option<i64>,
    #[arg(long)]
    pub train_frac: Option<f64>,
    #[arg(long)]
    pub val_frac: Option<f64>,
    /// Lowest and highest rating for generic-tsv files.
    #[arg(long)]
    pub rating_min: Option<f64>,
    #[arg(long)]
    pub rating_max: Option<f64>,
    #[arg(long)]
    pub synth_users: Option<i64>,
    #[arg(long)]
    pub synth_items: Option<i64>,
    #[arg(long)]
    pub synth_rank: Option<i64>,
    #[arg(long)]
    pub synth_density: Option<f64>,
    #[arg(long)]
    pub synth_noise: Option<f64>,
    /// Key/value report file.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Model checkpoint written by `train`, read by `eval`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    dataset: Option<String>,
    format: Option<String>,
    variant: Option<String>,
    delta: Option<f64>,
    lambda: Option<f64>,
    m: Option<i64>,
    round_size: Option<i64>,
    epochs: Option<i64>,
    t_threshold: Option<i64>,
    lr: Option<f64>,
    dim: Option<i64>,
    dropout: Option<f64>,
    neighbor_cap: Option<i64>,
    seed: Option<u64>,
    expansion: Option<bool>,
    minibatch: Option<i64>,
    early_stopping: Option<i64>,
    train_frac: Option<f64>,
    val_frac: Option<f64>,
    rating_min: Option<f64>,
    rating_max: Option<f64>,
    synth_users: Option<i64>,
    synth_items: Option<i64>,
    synth_rank: Option<i64>,
    synth_density: Option<f64>,
    synth_noise: Option<f64>,
    report: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub users: usize,
    pub items: usize,
    pub rank: usize,
    pub density: f64,
    pub noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            users: 200,
            items: 200,
            rank: 4,
            density: 0.3,
            noise: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Synthetic(SynthSpec),
    File { path: PathBuf, format: DatasetFormat },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub dataset: Option<DatasetSource>,
    pub train_frac: f64,
    pub val_frac: f64,
    pub report: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

fn invalid(msg: impl Display) -> CliError {
    CliError::config(msg)
}

fn count(name: &str, v: i64, min: i64) -> Result<usize, CliError> {
    if v < min {
        return Err(invalid(format!("--{name} must be at least {min}, got {v}")));
    }
    Ok(v as usize)
}

fn read_file(path: &Path) -> Result<FileConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn parse_format(s: &str, min: f64, max: f64) -> Result<DatasetFormat, CliError> {
    match s {
        "ml100k" => Ok(DatasetFormat::Ml100k),
        "generic-tsv" | "tsv" => {
            let scale = RatingScale::new(min, max).map_err(invalid)?;
            Ok(DatasetFormat::GenericTsv(scale))
        }
        other => Err(invalid(format!("unknown dataset format {other:?}"))),
    }
}

/// Merges flags over the optional config file over the built-in defaults and
/// validates the result.
pub fn parse_config(opts: &Options) -> Result<RunConfig, CliError> {
    let file = match &opts.config {
        Some(p) => read_file(p)?,
        None => FileConfig::default(),
    };
    macro_rules! pick {
        ($f:ident) => {
            opts.$f.clone().or(file.$f.clone())
        };
    }
    let d = TrainConfig::default();
    let ldp = LdpConfig::default();

    let delta = pick!(delta).unwrap_or(ldp.clip_delta);
    let lambda = pick!(lambda).unwrap_or(ldp.noise_lambda);
    let ldp = LdpConfig::new(delta, lambda).map_err(invalid)?;
    let variant: GnnVariant = match pick!(variant) {
        Some(v) => v.parse().map_err(invalid)?,
        None => d.variant,
    };
    let expansion = if opts.no_expansion {
        false
    } else {
        file.expansion.unwrap_or(d.expansion)
    };
    let lr = pick!(lr).unwrap_or(d.learning_rate);
    let dropout = pick!(dropout).unwrap_or(d.dropout);
    let early_stopping = match pick!(early_stopping) {
        Some(v) => Some(count("early-stopping", v, 1)?),
        None => None,
    };
    let threads = match std::env::var("FEDGNN_THREADS") {
        Ok(v) => Some(
            v.parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| invalid(format!("FEDGNN_THREADS must be a positive integer, got {v:?}")))?,
        ),
        Err(_) => None,
    };

    let train = TrainConfig {
        round_size: count("round-size", pick!(round_size).unwrap_or(d.round_size as i64), 1)?,
        epochs: count("epochs", pick!(epochs).unwrap_or(d.epochs as i64), 1)?,
        epoch_threshold: count("t-threshold", pick!(t_threshold).unwrap_or(d.epoch_threshold as i64), 0)?,
        learning_rate: lr,
        dim: count("dim", pick!(dim).unwrap_or(d.dim as i64), 1)?,
        pseudo_items: count("m", pick!(m).unwrap_or(d.pseudo_items as i64), 0)?,
        ldp,
        variant,
        dropout,
        neighbor_cap: count("neighbor-cap", pick!(neighbor_cap).unwrap_or(d.neighbor_cap as i64), 0)?,
        expansion,
        minibatch_size: count("minibatch", pick!(minibatch).unwrap_or(0), 0)?,
        early_stopping,
        full_replicas: false,
        threads,
        seed: pick!(seed).unwrap_or(d.seed),
    };
    train.validate().map_err(invalid)?;

    let train_frac = pick!(train_frac).unwrap_or(0.8);
    let val_frac = pick!(val_frac).unwrap_or(0.1);
    if !(train_frac > 0.0 && val_frac > 0.0 && train_frac + val_frac < 1.0) {
        return Err(invalid(format!(
            "split fractions {train_frac}/{val_frac} must be positive and sum below 1"
        )));
    }

    let dataset = match pick!(dataset) {
        None => None,
        Some(s) if s == "synthetic" => {
            let def = SynthSpec::default();
            let spec = SynthSpec {
                users: count("synth-users", pick!(synth_users).unwrap_or(def.users as i64), 1)?,
                items: count("synth-items", pick!(synth_items).unwrap_or(def.items as i64), 1)?,
                rank: count("synth-rank", pick!(synth_rank).unwrap_or(def.rank as i64), 1)?,
                density: pick!(synth_density).unwrap_or(def.density),
                noise: pick!(synth_noise).unwrap_or(def.noise),
            };
            if !(spec.density > 0.0 && spec.density <= 1.0) {
                return Err(invalid(format!("--synth-density {} not in (0, 1]", spec.density)));
            }
            if !(spec.noise >= 0.0) {
                return Err(invalid(format!("--synth-noise {} is negative", spec.noise)));
            }
            Some(DatasetSource::Synthetic(spec))
        }
        Some(path) => {
            let min = pick!(rating_min).unwrap_or(RatingScale::FIVE_STAR.min);
            let max = pick!(rating_max).unwrap_or(RatingScale::FIVE_STAR.max);
            let format = parse_format(pick!(format).as_deref().unwrap_or("ml100k"), min, max)?;
            Some(DatasetSource::File {
                path: PathBuf::from(path),
                format,
            })
        }
    };

    Ok(RunConfig {
        train,
        dataset,
        train_frac,
        val_frac,
        report: pick!(report),
        checkpoint: pick!(checkpoint),
    })
}

impl RunConfig {
    /// Every setting that influences the trained model, as ordered key/value
    /// pairs. Output paths and the thread count are left out.
    pub fn echo(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let mut out = Vec::new();
        match &self.dataset {
            None => out.push(("dataset", "none".to_string())),
            Some(DatasetSource::Synthetic(s)) => {
                out.push(("dataset", "synthetic".to_string()));
                out.push(("synth_users", s.users.to_string()));
                out.push(("synth_items", s.items.to_string()));
                out.push(("synth_rank", s.rank.to_string()));
                out.push(("synth_density", s.density.to_string()));
                out.push(("synth_noise", s.noise.to_string()));
            }
            Some(DatasetSource::File { path, format }) => {
                out.push(("dataset", path.display().to_string()));
                match format {
                    DatasetFormat::Ml100k => out.push(("format", "ml100k".to_string())),
                    DatasetFormat::GenericTsv(s) => {
                        out.push(("format", "generic-tsv".to_string()));
                        out.push(("rating_min", s.min.to_string()));
                        out.push(("rating_max", s.max.to_string()));
                    }
                }
            }
        }
        out.extend([
            ("train_frac", self.train_frac.to_string()),
            ("val_frac", self.val_frac.to_string()),
            ("variant", t.variant.to_string()),
            ("delta", t.ldp.clip_delta.to_string()),
            ("lambda", t.ldp.noise_lambda.to_string()),
            ("m", t.pseudo_items.to_string()),
            ("round_size", t.round_size.to_string()),
            ("epochs", t.epochs.to_string()),
            ("t_threshold", t.epoch_threshold.to_string()),
            ("lr", t.learning_rate.to_string()),
            ("dim", t.dim.to_string()),
            ("dropout", t.dropout.to_string()),
            ("neighbor_cap", t.neighbor_cap.to_string()),
            ("expansion", t.expansion.to_string()),
            ("minibatch", t.minibatch_size.to_string()),
            (
                "early_stopping",
                t.early_stopping.map_or("off".to_string(), |v| v.to_string()),
            ),
            ("seed", t.seed.to_string()),
        ]);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::Parser;
    use std::io::Write;

    #[derive(Parser)]
    #[command(allow_negative_numbers = true)]
    struct Probe {
        #[command(flatten)]
        opts: Options,
    }

    fn parse(args: &[&str]) -> Result<RunConfig, CliError> {
        let probe = Probe::try_parse_from(std::iter::once("fedgnn").chain(args.iter().copied()))
            .expect("flags parse");
        parse_config(&probe.opts)
    }

    #[test]
    fn defaults_match_the_reference_settings() {
        let c = parse(&[]).unwrap();
        let t = &c.train;
        assert_eq!(t.ldp.clip_delta, 0.1);
        assert_eq!(t.ldp.noise_lambda, 0.2);
        assert_eq!(t.pseudo_items, 1000);
        assert_eq!(t.round_size, 128);
        assert_eq!(t.dim, 256);
        assert_eq!(t.learning_rate, 0.01);
        assert_eq!(t.epoch_threshold, 2);
        assert_eq!(t.epochs, 3);
        assert_eq!(t.dropout, 0.2);
        assert_eq!(t.variant, GnnVariant::Gat);
        assert!(t.expansion);
        assert_eq!(c.dataset, None);
    }

    #[test]
    fn flags_override() {
        let c = parse(&["--lambda", "0", "--variant", "ggnn", "--no-expansion"]).unwrap();
        assert_eq!(c.train.ldp.noise_lambda, 0.0);
        assert_eq!(c.train.variant, GnnVariant::Ggnn);
        assert!(!c.train.expansion);
    }

    #[test]
    fn negative_counts_are_rejected() {
        let err = parse(&["--m", "-5"]).unwrap_err();
        assert_eq!(err.category, crate::error::Category::Config);
        assert!(err.message.contains("--m"), "{}", err.message);
        assert!(parse(&["--dropout", "1.5"]).is_err());
        assert!(parse(&["--delta", "0"]).is_err());
        assert!(parse(&["--variant", "mlp"]).is_err());
    }

    fn file(body: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(body.as_bytes()).unwrap();
        f
    }

    #[test]
    fn file_values_sit_between_defaults_and_flags() {
        let f = file("lambda = 0.4\nm = 50\ndataset = \"synthetic\"\nsynth_users = 30\n");
        let path = f.path().to_str().unwrap();
        let c = parse(&["--config", path, "--m", "7"]).unwrap();
        assert_eq!(c.train.ldp.noise_lambda, 0.4);
        assert_eq!(c.train.pseudo_items, 7);
        match c.dataset {
            Some(DatasetSource::Synthetic(s)) => assert_eq!(s.users, 30),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_keys_and_type_mismatches_are_rejected() {
        let f = file("lamda = 0.4\n");
        let err = parse(&["--config", f.path().to_str().unwrap()]).unwrap_err();
        assert!(err.message.contains("lamda"), "{}", err.message);
        let f = file("m = \"many\"\n");
        assert!(parse(&["--config", f.path().to_str().unwrap()]).is_err());
    }

    #[test]
    fn echo_ignores_output_paths() {
        let a = parse(&["--report", "a.tsv"]).unwrap();
        let b = parse(&["--report", "b.tsv", "--checkpoint", "x.bin"]).unwrap();
        assert_eq!(a.echo(), b.echo());
        assert_ne!(a.echo(), parse(&["--seed", "4"]).unwrap().echo());
    }
}
