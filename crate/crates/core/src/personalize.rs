//! Classifier calibration: after federated training, every client fine-tunes
//! only the final linear layer of the global model on its own data.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::algorithms::BatchStream;
use crate::data::{ClientShard, LabeledDataset};
use crate::distill::{self, TeacherSnapshot};
use crate::engine::eval::accuracy;
use crate::error::{Error, Result};
use crate::nn::{self, LossSpec, ModelSpec, ParamVector};

/// Marks the coordinates of the final layer (weights and bias).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadMask(Vec<bool>);

impl HeadMask {
    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }

    pub fn head_len(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }
}

pub fn head_mask(spec: &ModelSpec) -> HeadMask {
    let total = spec.param_count();
    let (fan_in, fan_out) = *spec.layer_dims().last().expect("at least one layer");
    let head = fan_out * fan_in + fan_out;
    HeadMask((0..total).map(|i| i >= total - head).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regularizer {
    None,
    Prox { mu: f64 },
    Kd { lambda: f64, tau: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonalizationConfig {
    pub epochs: usize,
    pub lr: f64,
    pub regularizer: Regularizer,
    pub batch_size: usize,
    pub weight_decay: f64,
}

impl PersonalizationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config(
                "personalization learning rate must be positive",
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("personalization batch size must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config(
                "personalization weight decay must be non-negative",
            ));
        }
        match self.regularizer {
            Regularizer::Prox { mu } if !(mu >= 0.0) => {
                Err(Error::config("prox mu must be non-negative"))
            }
            Regularizer::Kd { lambda, tau } => LossSpec::combined(lambda, tau).validate(),
            _ => Ok(()),
        }
    }
}

/// Fine-tunes the head of `global` on the shard's training split with plain
/// SGD. Body coordinates are never written.
pub fn calibrate<R: Rng>(
    global: &ParamVector,
    spec: &ModelSpec,
    shard: &ClientShard,
    data: &LabeledDataset,
    cfg: &PersonalizationConfig,
    rng: R,
) -> Result<ParamVector> {
    cfg.validate()?;
    let mut theta = global.clone();
    if cfg.epochs == 0 {
        return Ok(theta);
    }
    let train = shard.train();
    if train.is_empty() {
        return Err(Error::config(format!(
            "client {} has no training samples",
            shard.client_id
        )));
    }
    let mask = head_mask(spec);
    let (loss, teacher) = match cfg.regularizer {
        Regularizer::Kd { lambda, tau } => (
            LossSpec::combined(lambda, tau),
            Some(TeacherSnapshot::new(global.clone(), spec.clone(), tau)?),
        ),
        _ => (LossSpec::ce(), None),
    };
    let loss = loss.with_weight_decay(cfg.weight_decay);
    let steps = train.len().div_ceil(cfg.batch_size) * cfg.epochs;
    let mut stream = BatchStream::new(train, cfg.batch_size, rng);
    let diverged = || Error::Diverged {
        round: 0,
        client: shard.client_id,
    };

    for _ in 0..steps {
        let batch = data.batch(&stream.next_batch())?;
        let targets = match &teacher {
            Some(t) => Some(distill::batch_targets(t, &batch, &shard.rho)?),
            None => None,
        };
        let g = nn::grad(spec, &theta, &batch, &loss, targets.as_deref())?;
        if !g.is_finite() {
            return Err(diverged());
        }
        let mu = match cfg.regularizer {
            Regularizer::Prox { mu } => mu,
            _ => 0.0,
        };
        let head = mask.as_slice();
        let t0 = global.values();
        for (i, (t, gi)) in theta.values_mut().iter_mut().zip(g.values()).enumerate() {
            if head[i] {
                *t -= cfg.lr * (gi + mu * (*t - t0[i]));
            }
        }
    }
    if !theta.is_finite() {
        return Err(diverged());
    }
    Ok(theta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonalizationReport {
    pub per_client_acc: Vec<f64>,
    pub mean_acc: f64,
}

/// Top-1 accuracy of each client's model on its own local test split, with
/// the unweighted mean over clients.
pub fn evaluate_personalized(
    shards: &[ClientShard],
    params: &[ParamVector],
    spec: &ModelSpec,
    data: &LabeledDataset,
) -> Result<PersonalizationReport> {
    if shards.len() != params.len() {
        return Err(Error::input("one parameter vector per client is required"));
    }
    if shards.is_empty() {
        return Err(Error::input("no clients to evaluate"));
    }
    let mut per_client_acc = Vec::with_capacity(shards.len());
    for (shard, p) in shards.iter().zip(params) {
        if shard.test().is_empty() {
            return Err(Error::config(format!(
                "client {} has an empty local test split",
                shard.client_id
            )));
        }
        per_client_acc.push(accuracy(spec, p, &data.batch(shard.test())?)?);
    }
    let mean_acc = per_client_acc.iter().sum::<f64>() / per_client_acc.len() as f64;
    Ok(PersonalizationReport {
        per_client_acc,
        mean_acc,
    })
}
