//! Experiment configuration: a flat `key = value` text format.
//!
//! Every key has a default; unknown or repeated keys are rejected. A resolved
//! configuration can be written back as key/value pairs and re-parsed into an
//! identical value, which is how `summary.json` records it.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use crate::algorithms::{LocalBudget, LocalConfig, LocalRule, ServerHyper, ServerRule};
use crate::data::{PartitionMethod, PartitionSpec, SyntheticSpec};
use crate::error::{Error, Result};
use crate::nn::{Activation, LossKind, LossSpec, ModelKind, ModelSpec};
use crate::personalize::{PersonalizationConfig, Regularizer};

/// Learning-rate grid used by `--sweep` unless overridden.
pub const DEFAULT_SWEEP_LR: [f64; 4] = [0.01, 0.025, 0.05, 0.1];
/// Momentum grid used by `--sweep` unless overridden.
pub const DEFAULT_SWEEP_BETA: [f64; 4] = [0.6, 0.7, 0.8, 0.9];

/// Named pairing of a local rule with a server rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    FedAvg,
    SlowMo,
    FedAdcHeavyBall,
    FedAdcNesterov,
    FedAdcDm,
    FedProx,
}

impl Algorithm {
    pub fn rules(self) -> (LocalRule, ServerRule) {
        match self {
            Algorithm::FedAvg => (LocalRule::FedAvg, ServerRule::FedAvg),
            Algorithm::SlowMo => (LocalRule::FedAvg, ServerRule::SlowMo),
            Algorithm::FedAdcHeavyBall => (LocalRule::FedAdcHeavyBall, ServerRule::FedAdc),
            Algorithm::FedAdcNesterov => (LocalRule::FedAdcNesterov, ServerRule::FedAdc),
            Algorithm::FedAdcDm => (LocalRule::FedAdcDm, ServerRule::DoubleMomentum),
            Algorithm::FedProx => (LocalRule::FedProx, ServerRule::FedAvg),
        }
    }

    /// Whether the server momentum coefficient has any effect.
    pub fn uses_beta(self) -> bool {
        !matches!(self, Algorithm::FedAvg | Algorithm::FedProx)
    }

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::FedAvg => "fedavg",
            Algorithm::SlowMo => "slowmo",
            Algorithm::FedAdcHeavyBall => "fedadc-heavyball",
            Algorithm::FedAdcNesterov => "fedadc-nesterov",
            Algorithm::FedAdcDm => "fedadc-dm",
            Algorithm::FedProx => "fedprox",
        }
    }
}

impl FromStr for Algorithm {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "fedavg" => Algorithm::FedAvg,
            "slowmo" => Algorithm::SlowMo,
            "fedadc-heavyball" | "fedadc" => Algorithm::FedAdcHeavyBall,
            "fedadc-nesterov" => Algorithm::FedAdcNesterov,
            "fedadc-dm" => Algorithm::FedAdcDm,
            "fedprox" => Algorithm::FedProx,
            _ => return Err(format!("unknown algorithm `{s}`")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    Random,
    ClassCover,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Timing {
    /// `elapsed_ms` is always 0, keeping output byte-reproducible.
    Off,
    Wall,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Synthetic {
        spec: SyntheticSpec,
        train_per_class: usize,
        test_per_class: usize,
    },
    Files {
        train: PathBuf,
        test: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetSource,
    pub partition: PartitionSpec,
    pub model: ModelSpec,
    pub algorithm: Algorithm,
    pub local: LocalConfig,
    pub server: ServerHyper,
    pub rounds: usize,
    pub participation: f64,
    pub selection: Selection,
    pub out_dir: PathBuf,
    pub threads: usize,
    pub timing: Timing,
    pub personalization: Option<PersonalizationConfig>,
    pub sweep_lr: Vec<f64>,
    pub sweep_beta: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::from_pairs(std::iter::empty::<(String, String)>())
            .expect("defaults are valid")
    }
}

/// Splits config text into `(key, value)` pairs, rejecting malformed lines
/// and duplicate keys.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", lineno + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(Error::config(format!("line {}: empty key", lineno + 1)));
        }
        if let Some(prev) = seen.insert(key.to_string(), lineno + 1) {
            return Err(Error::config(format!(
                "line {}: key `{key}` already set on line {prev}",
                lineno + 1
            )));
        }
        out.push((key.to_string(), value.to_string()));
    }
    Ok(out)
}

struct Pairs(BTreeMap<String, String>);

impl Pairs {
    fn take(&mut self, key: &str) -> Option<String> {
        self.0.remove(key)
    }

    fn get<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        match self.take(key) {
            None => Ok(default),
            Some(v) => parse_value(key, &v),
        }
    }

    fn opt<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        self.take(key).map(|v| parse_value(key, &v)).transpose()
    }

    fn list<T: FromStr>(&mut self, key: &str, default: Vec<T>) -> Result<Vec<T>>
    where
        T::Err: Display,
    {
        match self.take(key) {
            None => Ok(default),
            Some(v) if v.trim().is_empty() => Ok(Vec::new()),
            Some(v) => v.split(',').map(|s| parse_value(key, s.trim())).collect(),
        }
    }

    fn choice<'a>(&mut self, key: &str, default: &'a str, allowed: &[&'a str]) -> Result<String> {
        let v = self.take(key).unwrap_or_else(|| default.to_string());
        if allowed.contains(&v.as_str()) {
            Ok(v)
        } else {
            Err(Error::config(format!(
                "`{key}` must be one of {allowed:?}, got `{v}`"
            )))
        }
    }
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse()
        .map_err(|e| Error::config(format!("bad value `{v}` for `{key}`: {e}")))
}

fn join<T: Display>(xs: &[T]) -> String {
    xs.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_pairs(parse_pairs(text)?)
    }

    pub fn from_pairs<I, K, V>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<String>,
    {
        let mut p = Pairs(
            pairs
                .into_iter()
                .map(|(k, v)| (k.into(), v.into()))
                .collect(),
        );

        let seed: u64 = p.get("seed", 0)?;
        let data_seed: u64 = p.get("data_seed", seed)?;
        let num_classes: usize = p.get("num_classes", 10)?;
        let input_dim: usize = p.get("input_dim", 32)?;

        let separation: f64 = p.get("class_separation", 3.0)?;
        let train_per_class: usize = p.get("train_per_class", 100)?;
        let test_per_class: usize = p.get("test_per_class", 50)?;
        let dataset = match p
            .choice("dataset", "synthetic", &["synthetic", "file"])?
            .as_str()
        {
            "synthetic" => DatasetSource::Synthetic {
                spec: SyntheticSpec {
                    num_classes,
                    dim: input_dim,
                    separation,
                    seed: data_seed,
                },
                train_per_class,
                test_per_class,
            },
            _ => DatasetSource::Files {
                train: p
                    .take("train_file")
                    .ok_or_else(|| Error::config("dataset = file requires `train_file`"))?
                    .into(),
                test: p
                    .take("test_file")
                    .ok_or_else(|| Error::config("dataset = file requires `test_file`"))?
                    .into(),
            },
        };

        let num_clients: usize = p.get("num_clients", 50)?;
        let skew: usize = p.get("skew", 2)?;
        let alpha: f64 = p.get("dirichlet_alpha", 0.5)?;
        let method = match p
            .choice("partition", "sort", &["sort", "dirichlet"])?
            .as_str()
        {
            "sort" => PartitionMethod::SortPartition { skew },
            _ => PartitionMethod::Dirichlet { alpha },
        };
        let partition = PartitionSpec {
            method,
            num_clients,
            seed,
        };

        let activation = match p.choice("activation", "relu", &["relu", "tanh"])?.as_str() {
            "relu" => Activation::Relu,
            _ => Activation::Tanh,
        };
        let hidden: Vec<usize> = p.list("hidden", vec![64])?;
        let model = match p.choice("model", "mlp", &["mlp", "logistic"])?.as_str() {
            "mlp" => ModelSpec::mlp(input_dim, hidden, num_classes, activation),
            _ => ModelSpec {
                kind: ModelKind::Logistic,
                input_dim,
                hidden: Vec::new(),
                num_classes,
                activation,
            },
        };

        let algorithm: Algorithm = p.get("algorithm", Algorithm::FedAdcHeavyBall)?;
        let lr: f64 = p.get("lr", 0.05)?;
        let beta: Option<f64> = p.opt("beta")?;
        let server = ServerHyper {
            alpha: p.get("alpha", 1.0)?,
            beta_global: p.get("beta_global", beta.unwrap_or(0.9))?,
            beta_local: p.get("beta_local", beta.unwrap_or(0.9))?,
            lr,
        };

        let loss_kind = match p.choice("loss", "ce", &["ce", "combined"])?.as_str() {
            "ce" => LossKind::Ce,
            _ => LossKind::Combined,
        };
        let loss = LossSpec {
            kind: loss_kind,
            lambda: p.get("kd_lambda", 0.35)?,
            tau: p.get("kd_tau", 1.0)?,
            weight_decay: p.get("weight_decay", 0.0)?,
        };
        let budget = match (
            p.opt::<usize>("local_iters")?,
            p.opt::<usize>("local_epochs")?,
        ) {
            (Some(_), Some(_)) => {
                return Err(Error::config(
                    "set only one of `local_iters` and `local_epochs`",
                ))
            }
            (_, Some(e)) => LocalBudget::Epochs(e),
            (h, None) => LocalBudget::Iterations(h.unwrap_or(8)),
        };
        let batch_size: usize = p.get("batch_size", 64)?;
        let local = LocalConfig {
            rule: algorithm.rules().0,
            phi: p.opt("phi")?,
            mu: p.opt("prox_mu")?,
            loss,
            batch_size,
            budget,
        };

        let personalize: bool = p.get("personalize", false)?;
        let pers_epochs = p.get("pers_epochs", 2)?;
        let pers_lr = p.get("pers_lr", lr)?;
        let pers_batch_size = p.get("pers_batch_size", batch_size)?;
        let pers_weight_decay = p.get("pers_weight_decay", 0.0)?;
        let pers_mu: f64 = p.get("pers_mu", 0.01)?;
        let pers_lambda: f64 = p.get("pers_lambda", 0.35)?;
        let pers_tau: f64 = p.get("pers_tau", 1.0)?;
        let regularizer = match p
            .choice("pers_reg", "none", &["none", "prox", "kd"])?
            .as_str()
        {
            "none" => Regularizer::None,
            "prox" => Regularizer::Prox { mu: pers_mu },
            _ => Regularizer::Kd {
                lambda: pers_lambda,
                tau: pers_tau,
            },
        };
        let personalization = personalize.then_some(PersonalizationConfig {
            epochs: pers_epochs,
            lr: pers_lr,
            regularizer,
            batch_size: pers_batch_size,
            weight_decay: pers_weight_decay,
        });

        let selection = match p
            .choice("selection", "random", &["random", "class-cover"])?
            .as_str()
        {
            "random" => Selection::Random,
            _ => Selection::ClassCover,
        };
        let timing = match p.choice("timing", "off", &["off", "wall"])?.as_str() {
            "off" => Timing::Off,
            _ => Timing::Wall,
        };

        let cfg = ExperimentConfig {
            seed,
            dataset,
            partition,
            model,
            algorithm,
            local,
            server,
            rounds: p.get("rounds", 300)?,
            participation: p.get("participation", 0.2)?,
            selection,
            out_dir: p.take("out").unwrap_or_else(|| "out".into()).into(),
            threads: p.get("threads", 1)?,
            timing,
            personalization,
            sweep_lr: p.list("sweep_lr", DEFAULT_SWEEP_LR.to_vec())?,
            sweep_beta: p.list("sweep_beta", DEFAULT_SWEEP_BETA.to_vec())?,
        };

        if let Some(key) = p.0.keys().next() {
            return Err(Error::config(format!("unknown key `{key}`")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.local.validate()?;
        self.server.validate()?;
        if self.local.rule != self.algorithm.rules().0 {
            return Err(Error::config("local rule does not match the algorithm"));
        }
        if let DatasetSource::Synthetic {
            spec,
            train_per_class,
            test_per_class,
        } = &self.dataset
        {
            if spec.num_classes != self.model.num_classes || spec.dim != self.model.input_dim {
                return Err(Error::config("dataset and model dimensions disagree"));
            }
            if *train_per_class == 0 || *test_per_class == 0 {
                return Err(Error::config("per-class sample counts must be positive"));
            }
            if !(spec.separation >= 0.0) || !spec.separation.is_finite() {
                return Err(Error::config(
                    "class_separation must be a non-negative number",
                ));
            }
        }
        if self.partition.num_clients == 0 {
            return Err(Error::config("num_clients must be positive"));
        }
        match self.partition.method {
            PartitionMethod::SortPartition { skew }
                if skew == 0 || skew > self.model.num_classes =>
            {
                return Err(Error::config(format!(
                    "skew {skew} must lie in [1, {}]",
                    self.model.num_classes
                )))
            }
            PartitionMethod::Dirichlet { alpha } if !(alpha > 0.0) || !alpha.is_finite() => {
                return Err(Error::config("dirichlet_alpha must be positive"))
            }
            _ => {}
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(Error::config(format!(
                "participation {} outside (0, 1]",
                self.participation
            )));
        }
        if self.rounds == 0 {
            return Err(Error::config("rounds must be at least 1"));
        }
        if self.threads == 0 {
            return Err(Error::config("threads must be at least 1"));
        }
        if let Some(p) = &self.personalization {
            p.validate()?;
        }
        if self.sweep_lr.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::config("sweep_lr values must be positive"));
        }
        if self.sweep_beta.iter().any(|v| !(0.0..1.0).contains(v)) {
            return Err(Error::config("sweep_beta values must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Number of clients selected per round, `⌈cN⌉`.
    pub fn clients_per_round(&self) -> usize {
        clients_per_round(self.partition.num_clients, self.participation)
    }

    /// Fully resolved key/value form; feeding it back through
    /// [`ExperimentConfig::from_pairs`] reproduces `self`.
    pub fn to_pairs(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("seed", self.seed.to_string());
        put("num_classes", self.model.num_classes.to_string());
        put("input_dim", self.model.input_dim.to_string());
        match &self.dataset {
            DatasetSource::Synthetic {
                spec,
                train_per_class,
                test_per_class,
            } => {
                put("dataset", "synthetic".into());
                put("data_seed", spec.seed.to_string());
                put("class_separation", spec.separation.to_string());
                put("train_per_class", train_per_class.to_string());
                put("test_per_class", test_per_class.to_string());
            }
            DatasetSource::Files { train, test } => {
                put("dataset", "file".into());
                put("train_file", train.display().to_string());
                put("test_file", test.display().to_string());
            }
        }
        put("num_clients", self.partition.num_clients.to_string());
        match self.partition.method {
            PartitionMethod::SortPartition { skew } => {
                put("partition", "sort".into());
                put("skew", skew.to_string());
            }
            PartitionMethod::Dirichlet { alpha } => {
                put("partition", "dirichlet".into());
                put("dirichlet_alpha", alpha.to_string());
            }
        }
        put(
            "model",
            match self.model.kind {
                ModelKind::Mlp => "mlp",
                ModelKind::Logistic => "logistic",
            }
            .into(),
        );
        if self.model.kind == ModelKind::Mlp {
            put("hidden", join(&self.model.hidden));
        }
        put(
            "activation",
            match self.model.activation {
                Activation::Relu => "relu",
                Activation::Tanh => "tanh",
            }
            .into(),
        );
        put("algorithm", self.algorithm.name().into());
        put("lr", self.server.lr.to_string());
        put("alpha", self.server.alpha.to_string());
        put("beta_global", self.server.beta_global.to_string());
        put("beta_local", self.server.beta_local.to_string());
        put(
            "loss",
            match self.local.loss.kind {
                LossKind::Ce => "ce",
                LossKind::Combined => "combined",
            }
            .into(),
        );
        put("kd_lambda", self.local.loss.lambda.to_string());
        put("kd_tau", self.local.loss.tau.to_string());
        put("weight_decay", self.local.loss.weight_decay.to_string());
        match self.local.budget {
            LocalBudget::Iterations(h) => put("local_iters", h.to_string()),
            LocalBudget::Epochs(e) => put("local_epochs", e.to_string()),
        }
        put("batch_size", self.local.batch_size.to_string());
        if let Some(phi) = self.local.phi {
            put("phi", phi.to_string());
        }
        if let Some(mu) = self.local.mu {
            put("prox_mu", mu.to_string());
        }
        put("rounds", self.rounds.to_string());
        put("participation", self.participation.to_string());
        put(
            "selection",
            match self.selection {
                Selection::Random => "random",
                Selection::ClassCover => "class-cover",
            }
            .into(),
        );
        put("out", self.out_dir.display().to_string());
        put("threads", self.threads.to_string());
        put(
            "timing",
            match self.timing {
                Timing::Off => "off",
                Timing::Wall => "wall",
            }
            .into(),
        );
        put("personalize", self.personalization.is_some().to_string());
        if let Some(pc) = &self.personalization {
            put("pers_epochs", pc.epochs.to_string());
            put("pers_lr", pc.lr.to_string());
            put("pers_batch_size", pc.batch_size.to_string());
            put("pers_weight_decay", pc.weight_decay.to_string());
            match pc.regularizer {
                Regularizer::None => put("pers_reg", "none".into()),
                Regularizer::Prox { mu } => {
                    put("pers_reg", "prox".into());
                    put("pers_mu", mu.to_string());
                }
                Regularizer::Kd { lambda, tau } => {
                    put("pers_reg", "kd".into());
                    put("pers_lambda", lambda.to_string());
                    put("pers_tau", tau.to_string());
                }
            }
        }
        put("sweep_lr", join(&self.sweep_lr));
        put("sweep_beta", join(&self.sweep_beta));
        m
    }

    /// The config file text for [`ExperimentConfig::to_pairs`].
    pub fn to_text(&self) -> String {
        self.to_pairs()
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

pub fn clients_per_round(num_clients: usize, participation: f64) -> usize {
    // guard against 0.2 * 100 landing a hair above 20
    let k = (participation * num_clients as f64 - 1e-9).ceil().max(1.0) as usize;
    k.min(num_clients)
}
