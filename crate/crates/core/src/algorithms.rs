//! Client-side update rules and server-side aggregation.
//!
//! A client starts from the broadcast model `θ_t`, runs `H` local steps and
//! reports `Δ = θ_t − θ^H`. The server averages the reports into a pseudo
//! gradient and folds it into its momentum.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ClientShard, LabeledDataset};
use crate::distill::{self, TeacherSnapshot};
use crate::error::{Error, Result};
use crate::nn::{self, LossKind, LossSpec, ModelSpec, ParamVector};

/// Local update rule run by a selected client.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LocalRule {
    FedAvg,
    /// Shift by the normalized momentum, then take the gradient step from the
    /// shifted point.
    FedAdcNesterov,
    /// Gradient and normalized momentum applied in the same step.
    FedAdcHeavyBall,
    /// Heavy-ball embedding plus a client-side exponential momentum.
    FedAdcDm,
    FedProx,
}

impl LocalRule {
    pub fn uses_global_momentum(self) -> bool {
        matches!(
            self,
            LocalRule::FedAdcNesterov | LocalRule::FedAdcHeavyBall | LocalRule::FedAdcDm
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LocalBudget {
    Iterations(usize),
    Epochs(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalConfig {
    pub rule: LocalRule,
    /// Local momentum decay, only for [`LocalRule::FedAdcDm`].
    pub phi: Option<f64>,
    /// Proximal coefficient, only for [`LocalRule::FedProx`].
    pub mu: Option<f64>,
    pub loss: LossSpec,
    pub batch_size: usize,
    pub budget: LocalBudget,
}

impl LocalConfig {
    pub fn new(rule: LocalRule, loss: LossSpec, batch_size: usize, budget: LocalBudget) -> Self {
        LocalConfig {
            rule,
            phi: None,
            mu: None,
            loss,
            batch_size,
            budget,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        match self.budget {
            LocalBudget::Iterations(0) | LocalBudget::Epochs(0) => {
                return Err(Error::config("local budget must be at least one step"))
            }
            _ => {}
        }
        match (self.rule, self.phi) {
            (LocalRule::FedAdcDm, None) => return Err(Error::config("fedadc-dm requires phi")),
            (LocalRule::FedAdcDm, Some(phi)) if !(0.0..1.0).contains(&phi) => {
                return Err(Error::config(format!("phi {phi} outside [0, 1)")))
            }
            (LocalRule::FedAdcDm, _) => {}
            (_, Some(_)) => return Err(Error::config("phi is only valid for fedadc-dm")),
            _ => {}
        }
        match (self.rule, self.mu) {
            (LocalRule::FedProx, None) => return Err(Error::config("fedprox requires mu")),
            (LocalRule::FedProx, Some(mu)) if !(mu >= 0.0) || !mu.is_finite() => {
                return Err(Error::config(format!("mu {mu} must be non-negative")))
            }
            (LocalRule::FedProx, _) => {}
            (_, Some(_)) => return Err(Error::config("mu is only valid for fedprox")),
            _ => {}
        }
        Ok(())
    }

    /// Number of local steps `H` for a client with `train_len` samples.
    pub fn iterations(&self, train_len: usize) -> usize {
        match self.budget {
            LocalBudget::Iterations(h) => h,
            LocalBudget::Epochs(e) => train_len.div_ceil(self.batch_size) * e,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    /// `θ_t − θ^H`
    pub delta: ParamVector,
    pub samples_used: usize,
}

/// Server-side hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ServerHyper {
    pub alpha: f64,
    pub beta_global: f64,
    pub beta_local: f64,
    pub lr: f64,
}

impl ServerHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::config("alpha must be positive"));
        }
        for (name, b) in [
            ("beta_global", self.beta_global),
            ("beta_local", self.beta_local),
        ] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name}={b} outside [0, 1)")));
            }
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("learning rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub round: usize,
    pub params: ParamVector,
    pub momentum: ParamVector,
    pub hyper: ServerHyper,
}

impl ServerState {
    pub fn new(params: ParamVector, hyper: ServerHyper) -> Result<Self> {
        hyper.validate()?;
        Ok(ServerState {
            round: 0,
            momentum: params.zeros_like(),
            params,
            hyper,
        })
    }

    fn advance(&self, momentum: ParamVector) -> ServerState {
        let mut params = self.params.clone();
        params.add_scaled(-(self.hyper.alpha * self.hyper.lr), &momentum);
        ServerState {
            round: self.round + 1,
            params,
            momentum,
            hyper: self.hyper,
        }
    }
}

/// `m̄ = β_local · m / H`
pub fn normalize_momentum(
    momentum: &ParamVector,
    beta_local: f64,
    local_iters: usize,
) -> ParamVector {
    let h = local_iters.max(1) as f64;
    let mut out = momentum.clone();
    for v in out.values_mut() {
        *v = beta_local * *v / h;
    }
    out
}

/// Everything a client receives at the start of a round.
#[derive(Debug, Clone, Copy)]
pub struct Broadcast<'a> {
    pub round: usize,
    pub params: &'a ParamVector,
    /// Normalized global momentum `m̄_t`; zero for rules that ignore it.
    pub momentum: &'a ParamVector,
    pub lr: f64,
}

/// Result of one client's local training.
#[derive(Debug, Clone)]
pub struct LocalOutcome {
    pub update: ClientUpdate,
    pub iterations: usize,
    pub mean_loss: f64,
}

/// Runs `iterations` steps of `rule` from `start` and returns `θ^H`.
///
/// `grad_at(τ, θ)` supplies the loss and stochastic gradient of step `τ`
/// (1-based) evaluated at `θ`. This is the whole update recursion, kept apart
/// from batching so it can be checked on closed-form objectives.
pub fn run_local_steps<F>(
    rule: LocalRule,
    start: &ParamVector,
    momentum: &ParamVector,
    lr: f64,
    phi: f64,
    mu: f64,
    iterations: usize,
    mut grad_at: F,
) -> Result<(ParamVector, f64)>
where
    F: FnMut(usize, &ParamVector) -> Result<(f64, ParamVector)>,
{
    let mut theta = start.clone();
    let mut local_m: Option<ParamVector> = None;
    let mut loss_sum = 0.0;
    for step in 1..=iterations {
        match rule {
            LocalRule::FedAvg => {
                let (l, g) = grad_at(step, &theta)?;
                loss_sum += l;
                theta.add_scaled(-lr, &g);
            }
            LocalRule::FedAdcHeavyBall => {
                let (l, mut g) = grad_at(step, &theta)?;
                loss_sum += l;
                g.add_scaled(1.0, momentum);
                theta.add_scaled(-lr, &g);
            }
            LocalRule::FedAdcNesterov => {
                theta.add_scaled(-lr, momentum);
                let (l, g) = grad_at(step, &theta)?;
                loss_sum += l;
                theta.add_scaled(-lr, &g);
            }
            LocalRule::FedAdcDm => {
                let (l, g) = grad_at(step, &theta)?;
                loss_sum += l;
                let m = match local_m.take() {
                    None => g,
                    Some(mut prev) => {
                        for (p, gi) in prev.values_mut().iter_mut().zip(g.values()) {
                            *p = *p * phi + (1.0 - phi) * gi;
                        }
                        prev
                    }
                };
                let mut dir = momentum.clone();
                dir.add_scaled(1.0, &m);
                theta.add_scaled(-lr, &dir);
                local_m = Some(m);
            }
            LocalRule::FedProx => {
                let (l, mut g) = grad_at(step, &theta)?;
                loss_sum += l;
                for ((gi, t), t0) in g
                    .values_mut()
                    .iter_mut()
                    .zip(theta.values())
                    .zip(start.values())
                {
                    *gi += mu * (t - t0);
                }
                theta.add_scaled(-lr, &g);
            }
        }
    }
    Ok((theta, loss_sum / iterations.max(1) as f64))
}

/// Endless stream of mini-batches over a client's training split: each pass
/// is a fresh shuffle, cut into chunks of at most `batch_size`.
pub struct BatchStream<'a, R> {
    indices: &'a [usize],
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    rng: R,
}

impl<'a, R: Rng> BatchStream<'a, R> {
    pub fn new(indices: &'a [usize], batch_size: usize, rng: R) -> Self {
        BatchStream {
            indices,
            order: Vec::new(),
            pos: 0,
            batch_size,
            rng,
        }
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos >= self.order.len() {
            self.order = self.indices.to_vec();
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        out
    }
}

/// One client's local round.
///
/// When `grad_log` is given, every raw mini-batch gradient is appended to it.
#[allow(clippy::too_many_arguments)]
pub fn local_round<R: Rng>(
    spec: &ModelSpec,
    broadcast: Broadcast<'_>,
    shard: &ClientShard,
    data: &LabeledDataset,
    cfg: &LocalConfig,
    teacher: Option<&TeacherSnapshot>,
    rng: R,
    mut grad_log: Option<&mut Vec<ParamVector>>,
) -> Result<LocalOutcome> {
    cfg.validate()?;
    let client = shard.client_id;
    let round = broadcast.round;
    if !cfg.rule.uses_global_momentum() && broadcast.momentum.values().iter().any(|&v| v != 0.0) {
        return Err(Error::config(format!(
            "{:?} runs without global momentum but received a non-zero one",
            cfg.rule
        )));
    }
    match (cfg.loss.kind, teacher) {
        (LossKind::Combined, None) => {
            return Err(Error::config("combined loss requires a teacher snapshot"))
        }
        (LossKind::Ce, Some(_)) => {
            return Err(Error::config("teacher snapshot given for a plain CE loss"))
        }
        _ => {}
    }
    let train = shard.train();
    if train.is_empty() {
        return Err(Error::config(format!(
            "client {client} has no training samples"
        )));
    }
    let iterations = cfg.iterations(train.len());
    let mut stream = BatchStream::new(train, cfg.batch_size, rng);
    let mut samples_used = 0;
    let loss = cfg.loss;

    let (theta, mean_loss) = run_local_steps(
        cfg.rule,
        broadcast.params,
        broadcast.momentum,
        broadcast.lr,
        cfg.phi.unwrap_or(0.0),
        cfg.mu.unwrap_or(0.0),
        iterations,
        |_, theta| {
            let idx = stream.next_batch();
            samples_used += idx.len();
            let batch = data.batch(&idx)?;
            let targets = match teacher {
                Some(t) => Some(distill::batch_targets(t, &batch, &shard.rho)?),
                None => None,
            };
            let (l, g) = nn::loss_and_grad(spec, theta, &batch, &loss, targets.as_deref())
                .map_err(|e| {
                    if theta.is_finite() {
                        e
                    } else {
                        Error::Diverged { round, client }
                    }
                })?;
            if !g.is_finite() || !l.is_finite() {
                return Err(Error::Diverged { round, client });
            }
            if let Some(log) = grad_log.as_deref_mut() {
                log.push(g.clone());
            }
            Ok((l, g))
        },
    )?;
    if !theta.is_finite() {
        return Err(Error::Diverged { round, client });
    }
    Ok(LocalOutcome {
        update: ClientUpdate {
            client_id: client,
            delta: broadcast.params.sub(&theta),
            samples_used,
        },
        iterations,
        mean_loss,
    })
}

/// `Δ̄ = (1/|S|)(1/η) Σ_i Δ_i`, summed in ascending client order.
pub fn pseudo_delta(updates: &[ClientUpdate], lr: f64) -> Result<ParamVector> {
    let first = updates
        .first()
        .ok_or_else(|| Error::input("no client updates to aggregate"))?;
    let mut ordered: Vec<&ClientUpdate> = updates.iter().collect();
    ordered.sort_by_key(|u| u.client_id);
    let mut sum = first.delta.zeros_like();
    for u in ordered {
        if !u.delta.same_shape(&sum) {
            return Err(Error::input(format!(
                "client {} sent a mis-shaped update",
                u.client_id
            )));
        }
        sum.add_scaled(1.0, &u.delta);
    }
    sum.scale(1.0 / (updates.len() as f64 * lr));
    Ok(sum)
}

/// `m ← β m + ḡ`, `θ ← θ − αη m`
pub fn server_update_slowmo(state: &ServerState, pseudo_grad: &ParamVector) -> ServerState {
    let mut m = state.momentum.clone();
    m.scale(state.hyper.beta_global);
    m.add_scaled(1.0, pseudo_grad);
    state.advance(m)
}

/// `m ← Δ̄ + (β_global − β_local) m`, `θ ← θ − αη m`
pub fn server_update_fedadc(state: &ServerState, avg_delta: &ParamVector) -> ServerState {
    let mut m = avg_delta.clone();
    m.add_scaled(
        state.hyper.beta_global - state.hyper.beta_local,
        &state.momentum,
    );
    state.advance(m)
}

/// `m ← Δ̄`, `θ ← θ − αη m`
pub fn server_update_dm(state: &ServerState, avg_delta: &ParamVector) -> ServerState {
    state.advance(avg_delta.clone())
}

/// Plain model averaging. Routed through the pseudo-delta with unit server
/// step so that it shares arithmetic with the momentum rules.
pub fn server_update_fedavg(state: &ServerState, updates: &[ClientUpdate]) -> Result<ServerState> {
    let avg = pseudo_delta(updates, state.hyper.lr)?;
    let mut params = state.params.clone();
    params.add_scaled(-state.hyper.lr, &avg);
    Ok(ServerState {
        round: state.round + 1,
        params,
        momentum: state.momentum.zeros_like(),
        hyper: state.hyper,
    })
}

/// Which server rule pairs with which local rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ServerRule {
    FedAvg,
    SlowMo,
    FedAdc,
    DoubleMomentum,
}

impl ServerRule {
    pub fn apply(self, state: &ServerState, updates: &[ClientUpdate]) -> Result<ServerState> {
        match self {
            ServerRule::FedAvg => server_update_fedavg(state, updates),
            ServerRule::SlowMo => Ok(server_update_slowmo(
                state,
                &pseudo_delta(updates, state.hyper.lr)?,
            )),
            ServerRule::FedAdc => Ok(server_update_fedadc(
                state,
                &pseudo_delta(updates, state.hyper.lr)?,
            )),
            ServerRule::DoubleMomentum => Ok(server_update_dm(
                state,
                &pseudo_delta(updates, state.hyper.lr)?,
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LayerShape;

    fn scalar(v: f64) -> ParamVector {
        ParamVector::from_values(
            vec![LayerShape {
                name: "w".into(),
                dims: vec![1],
            }],
            vec![v],
        )
        .unwrap()
    }

    fn hyper(alpha: f64, bg: f64, bl: f64, lr: f64) -> ServerHyper {
        ServerHyper {
            alpha,
            beta_global: bg,
            beta_local: bl,
            lr,
        }
    }

    fn update(id: usize, d: f64) -> ClientUpdate {
        ClientUpdate {
            client_id: id,
            delta: scalar(d),
            samples_used: 1,
        }
    }

    #[test]
    fn normalize_momentum_examples() {
        assert_eq!(normalize_momentum(&scalar(4.0), 0.8, 8).values(), &[0.4]);
        assert_eq!(normalize_momentum(&scalar(4.0), 0.0, 8).values(), &[0.0]);
        assert_eq!(normalize_momentum(&scalar(0.0), 0.9, 8).values(), &[0.0]);
    }

    #[test]
    fn heavy_ball_single_step() {
        let (theta, _) = run_local_steps(
            LocalRule::FedAdcHeavyBall,
            &scalar(1.0),
            &scalar(0.1),
            0.5,
            0.0,
            0.0,
            1,
            |_, _| Ok((0.0, scalar(0.2))),
        )
        .unwrap();
        assert!((theta.values()[0] - 0.85).abs() < 1e-15);
        assert!((scalar(1.0).sub(&theta).values()[0] - 0.15).abs() < 1e-15);
    }

    #[test]
    fn nesterov_single_step_on_quadratic() {
        let mut seen = Vec::new();
        let (theta, _) = run_local_steps(
            LocalRule::FedAdcNesterov,
            &scalar(1.0),
            &scalar(0.1),
            0.5,
            0.0,
            0.0,
            1,
            |_, t| {
                seen.push(t.values()[0]);
                Ok((0.5 * t.values()[0].powi(2), t.clone()))
            },
        )
        .unwrap();
        assert!((seen[0] - 0.95).abs() < 1e-15);
        assert!((theta.values()[0] - 0.475).abs() < 1e-15);
        assert!((1.0 - theta.values()[0] - 0.525).abs() < 1e-15);
    }

    #[test]
    fn double_momentum_recursion() {
        let grads = [0.2, 0.4];
        let mut thetas = Vec::new();
        let (theta, _) = run_local_steps(
            LocalRule::FedAdcDm,
            &scalar(0.0),
            &scalar(0.0),
            1.0,
            0.5,
            0.0,
            2,
            |step, t| {
                thetas.push(t.values()[0]);
                Ok((0.0, scalar(grads[step - 1])))
            },
        )
        .unwrap();
        // θ¹ = −m¹ = −0.2, θ² = θ¹ − m² = −0.5
        assert!((thetas[1] + 0.2).abs() < 1e-15);
        assert!((theta.values()[0] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn fedprox_effective_gradient() {
        // θ − θ_t = 2 on the second step after a first step that moves by −2
        let mut observed = 0.0;
        let (theta, _) = run_local_steps(
            LocalRule::FedProx,
            &scalar(0.0),
            &scalar(0.0),
            1.0,
            0.0,
            0.01,
            2,
            |step, t| {
                if step == 2 {
                    observed = t.values()[0];
                }
                Ok((0.0, scalar(if step == 1 { -2.0 } else { 0.1 })))
            },
        )
        .unwrap();
        assert_eq!(observed, 2.0);
        assert!((theta.values()[0] - (2.0 - 0.12)).abs() < 1e-15);
    }

    #[test]
    fn pseudo_delta_examples() {
        let d = pseudo_delta(&[update(1, 0.2), update(0, 0.4)], 0.1).unwrap();
        assert!((d.values()[0] - 3.0).abs() < 1e-12);
        assert_eq!(
            pseudo_delta(&[update(0, 0.0), update(1, 0.0)], 0.1)
                .unwrap()
                .values(),
            &[0.0]
        );
        let d = pseudo_delta(&[update(3, 0.7)], 0.25).unwrap();
        assert!((d.values()[0] - 2.8).abs() < 1e-12);
        assert!(matches!(pseudo_delta(&[], 0.1), Err(Error::Input(_))));
    }

    #[test]
    fn slowmo_examples() {
        let mut s = ServerState::new(scalar(0.0), hyper(1.0, 0.9, 0.0, 0.1)).unwrap();
        s.momentum = scalar(1.0);
        let n = server_update_slowmo(&s, &scalar(0.5));
        assert!((n.momentum.values()[0] - 1.4).abs() < 1e-15);
        assert!((n.params.values()[0] + 0.14).abs() < 1e-15);
        assert_eq!(n.round, 1);

        let fresh = ServerState::new(scalar(0.0), hyper(1.0, 0.9, 0.0, 0.1)).unwrap();
        assert_eq!(
            server_update_slowmo(&fresh, &scalar(0.5)).momentum,
            scalar(0.5)
        );

        let coast = server_update_slowmo(&s, &scalar(0.0));
        assert!((coast.params.values()[0] + 0.1 * 0.9).abs() < 1e-15);
    }

    #[test]
    fn fedadc_examples() {
        let mut s = ServerState::new(scalar(0.0), hyper(1.0, 0.9, 0.6, 0.1)).unwrap();
        s.momentum = scalar(2.0);
        let n = server_update_fedadc(&s, &scalar(1.0));
        assert!((n.momentum.values()[0] - 1.6).abs() < 1e-12);

        s.hyper = hyper(1.0, 0.7, 0.7, 0.1);
        assert_eq!(server_update_fedadc(&s, &scalar(1.3)).momentum, scalar(1.3));

        s.hyper = hyper(1.0, 0.7, 0.0, 0.1);
        assert_eq!(
            server_update_fedadc(&s, &scalar(1.3)),
            server_update_slowmo(&s, &scalar(1.3))
        );
    }

    #[test]
    fn dm_examples() {
        let mut s = ServerState::new(scalar(1.0), hyper(1.0, 0.9, 0.9, 0.1)).unwrap();
        s.momentum = scalar(5.0);
        let n = server_update_dm(&s, &scalar(2.0));
        assert_eq!(n.momentum, scalar(2.0));
        assert!((n.params.values()[0] - 0.8).abs() < 1e-15);
        assert_eq!(server_update_dm(&s, &scalar(0.0)).params, s.params);
    }

    #[test]
    fn fedavg_examples() {
        let s = ServerState::new(scalar(1.0), hyper(1.0, 0.0, 0.0, 0.1)).unwrap();
        let n = server_update_fedavg(&s, &[update(0, 0.3), update(1, -0.3)]).unwrap();
        assert_eq!(n.params, s.params);
        let n = server_update_fedavg(&s, &[update(0, 0.3)]).unwrap();
        assert!((n.params.values()[0] - 0.7).abs() < 1e-15);
        let ups = [update(0, 0.3), update(1, 0.05)];
        assert_eq!(
            server_update_fedavg(&s, &ups).unwrap().params,
            server_update_fedadc(&s, &pseudo_delta(&ups, 0.1).unwrap()).params
        );
    }

    #[test]
    fn config_validation() {
        let mut cfg = LocalConfig::new(
            LocalRule::FedAdcDm,
            LossSpec::ce(),
            4,
            LocalBudget::Iterations(2),
        );
        assert!(cfg.validate().is_err());
        cfg.phi = Some(0.5);
        cfg.validate().unwrap();
        cfg.rule = LocalRule::FedAvg;
        assert!(cfg.validate().is_err());
        cfg.phi = None;
        cfg.mu = Some(0.01);
        assert!(cfg.validate().is_err());
        cfg.rule = LocalRule::FedProx;
        cfg.validate().unwrap();
    }

    #[test]
    fn epoch_budget_counts_batches() {
        let cfg = LocalConfig::new(
            LocalRule::FedAvg,
            LossSpec::ce(),
            64,
            LocalBudget::Epochs(2),
        );
        assert_eq!(cfg.iterations(16), 2);
        assert_eq!(cfg.iterations(130), 6);
    }
}
