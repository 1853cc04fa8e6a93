#![allow(dead_code)]

use fedadc::engine::ExperimentConfig;
use fedadc::nn::{Activation, LossKind, LossSpec, ModelSpec};

/// Config for the desk-scale benchmark with `extra` overriding defaults.
pub fn desk_config(extra: &[(&str, &str)]) -> ExperimentConfig {
    let mut pairs: Vec<(String, String)> = [
        ("dataset", "synthetic"),
        ("num_classes", "10"),
        ("input_dim", "32"),
        ("train_per_class", "100"),
        ("test_per_class", "50"),
        ("class_separation", "3"),
        ("partition", "sort"),
        ("num_clients", "50"),
        ("skew", "2"),
        ("model", "mlp"),
        ("hidden", "64"),
        ("local_iters", "8"),
        ("batch_size", "64"),
        ("rounds", "300"),
        ("participation", "0.2"),
    ]
    .iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect();
    for (k, v) in extra {
        pairs.retain(|(pk, _)| pk != k);
        pairs.push((k.to_string(), v.to_string()));
    }
    ExperimentConfig::from_pairs(pairs).expect("valid test config")
}

/// Straightforward re-derivation of the training objective: per-sample
/// forward pass, softmax, cross-entropy and KL, batch mean, weight decay.
pub fn oracle_loss(
    spec: &ModelSpec,
    theta: &[f64],
    features: &[Vec<f64>],
    labels: &[usize],
    loss: &LossSpec,
    targets: Option<&[Vec<f64>]>,
) -> f64 {
    let mut layers = vec![spec.input_dim];
    layers.extend(&spec.hidden);
    layers.push(spec.num_classes);

    let mut total = 0.0;
    for (s, x) in features.iter().enumerate() {
        let mut a = x.clone();
        let mut off = 0;
        for l in 0..layers.len() - 1 {
            let (n_in, n_out) = (layers[l], layers[l + 1]);
            let bias_at = off + n_in * n_out;
            let mut z = Vec::with_capacity(n_out);
            for o in 0..n_out {
                let mut v = theta[bias_at + o];
                for i in 0..n_in {
                    v += theta[off + o * n_in + i] * a[i];
                }
                z.push(v);
            }
            off = bias_at + n_out;
            a = if l + 2 < layers.len() {
                z.into_iter()
                    .map(|v| match spec.activation {
                        Activation::Relu => {
                            if v > 0.0 {
                                v
                            } else {
                                0.0
                            }
                        }
                        Activation::Tanh => v.tanh(),
                    })
                    .collect()
            } else {
                z
            };
        }
        let ce = -log_softmax(&a, 1.0)[labels[s]];
        let value = match loss.kind {
            LossKind::Ce => ce,
            LossKind::Combined => {
                let t = &targets.expect("targets")[s];
                let lq = log_softmax(&a, loss.tau);
                let kl: f64 = t
                    .iter()
                    .zip(&lq)
                    .filter(|(&ti, _)| ti > 0.0)
                    .map(|(&ti, &l)| ti * (ti.ln() - l))
                    .sum();
                (1.0 - loss.lambda) * ce + loss.lambda * kl
            }
        };
        total += value;
    }
    let sq: f64 = theta.iter().map(|v| v * v).sum();
    total / features.len() as f64 + 0.5 * loss.weight_decay * sq
}

fn log_softmax(z: &[f64], tau: f64) -> Vec<f64> {
    let scaled: Vec<f64> = z.iter().map(|v| v / tau).collect();
    let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + scaled.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    scaled.iter().map(|v| v - lse).collect()
}

/// Central difference of `f` at coordinate `i` with step `h`.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, theta: &[f64], i: usize, h: f64) -> f64 {
    let mut plus = theta.to_vec();
    let mut minus = theta.to_vec();
    plus[i] += h;
    minus[i] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}
