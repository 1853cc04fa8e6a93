//! Self-confidence distillation targets.
//!
//! The teacher is the global model a client received at the start of the
//! round. Its tempered predictions are blended with the one-hot label using the
//! client's confidence vector `ρ`: mass on a non-true class `i` is kept in
//! proportion `1 - ρ_i`, and everything removed moves to the true class.

use crate::error::{Error, Result};
use crate::nn::{self, check_distribution, Batch, LossKind, LossSpec, ModelSpec, ParamVector};

/// Frozen copy of the global model used to produce distillation targets.
#[derive(Debug, Clone)]
pub struct TeacherSnapshot {
    pub params: ParamVector,
    pub spec: ModelSpec,
    pub tau: f64,
}

impl TeacherSnapshot {
    pub fn new(params: ParamVector, spec: ModelSpec, tau: f64) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(Error::config(format!(
                "teacher temperature {tau} must be positive"
            )));
        }
        Ok(TeacherSnapshot { params, spec, tau })
    }
}

/// Tempered teacher probabilities for every sample of the batch.
pub fn teacher_probs(teacher: &TeacherSnapshot, batch: &Batch) -> Result<Vec<Vec<f64>>> {
    let logits = nn::forward(&teacher.spec, &teacher.params, batch)?;
    (0..logits.rows)
        .map(|s| nn::softmax_temp(logits.row(s), teacher.tau))
        .collect()
}

/// `p̂_i = (1-ρ_i)·p̃_i` for `i ≠ y`, and the true class takes the remainder.
pub fn target_probs(teacher: &[f64], rho: &[f64], label: usize) -> Result<Vec<f64>> {
    check_distribution(teacher)?;
    if rho.len() != teacher.len() {
        return Err(Error::input(
            "confidence vector length differs from the class count",
        ));
    }
    if rho.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(Error::input("confidence entries must lie in [0, 1]"));
    }
    if label >= teacher.len() {
        return Err(Error::input(format!("label {label} out of range")));
    }
    let mut out: Vec<f64> = teacher
        .iter()
        .zip(rho)
        .map(|(&p, &r)| (1.0 - r) * p)
        .collect();
    let off: f64 = out
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != label)
        .map(|(_, v)| v)
        .sum();
    out[label] = 1.0 - off;
    Ok(out)
}

/// Targets for a whole batch: teacher forward pass followed by
/// [`target_probs`] per sample.
pub fn batch_targets(
    teacher: &TeacherSnapshot,
    batch: &Batch,
    rho: &[f64],
) -> Result<Vec<Vec<f64>>> {
    teacher_probs(teacher, batch)?
        .iter()
        .zip(&batch.labels)
        .map(|(p, &y)| target_probs(p, rho, y))
        .collect()
}

/// `(1-λ)·CE(f(x|θ), y) + λ·KL(p(x|θ; τ), p̂)` averaged over the batch.
pub fn combined_loss_grad(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Batch,
    targets: &[Vec<f64>],
    lambda: f64,
    tau: f64,
    weight_decay: f64,
) -> Result<(f64, ParamVector)> {
    let loss = LossSpec {
        kind: LossKind::Combined,
        lambda,
        tau,
        weight_decay,
    };
    nn::loss_and_grad(spec, params, batch, &loss, Some(targets))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn worked_example() {
        let p = target_probs(&[0.7, 0.2, 0.1], &[1.0, 0.6, 0.4], 0).unwrap();
        assert!(close(&p, &[0.86, 0.08, 0.06], 1e-12), "{p:?}");
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn full_confidence_gives_one_hot() {
        let p = target_probs(&[0.3, 0.5, 0.2], &[1.0; 3], 2).unwrap();
        assert_eq!(p, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn zero_confidence_passes_teacher_through() {
        let t = [0.3, 0.5, 0.2];
        let p = target_probs(&t, &[1.0, 0.0, 0.0], 0).unwrap();
        assert!(close(&p, &t, 1e-15));
    }

    #[test]
    fn rejects_invalid_teacher() {
        assert!(matches!(
            target_probs(&[0.5, 0.6], &[1.0, 1.0], 0),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn zero_teacher_is_uniform_and_hot_teacher_flattens() {
        let spec = ModelSpec::mlp(2, vec![3], 4, nn::Activation::Relu);
        let batch = Batch::new(
            Matrix::from_vec(2, 2, vec![1.0, 2.0, -1.0, 0.5]).unwrap(),
            vec![0, 3],
        )
        .unwrap();
        let t = TeacherSnapshot::new(spec.zeros(), spec.clone(), 1.0).unwrap();
        for row in teacher_probs(&t, &batch).unwrap() {
            assert!(close(&row, &[0.25; 4], 1e-15));
        }
        let params = spec.init(&mut ChaCha8Rng::seed_from_u64(0));
        let hot = TeacherSnapshot::new(params, spec, 1e6).unwrap();
        for row in teacher_probs(&hot, &batch).unwrap() {
            assert!(close(&row, &[0.25; 4], 1e-6));
        }
    }

    #[test]
    fn teacher_matches_independent_recomputation() {
        let spec = ModelSpec::logistic(2, 3);
        let params = spec.init(&mut ChaCha8Rng::seed_from_u64(0));
        let batch = Batch::new(Matrix::from_vec(1, 2, vec![0.4, -1.3]).unwrap(), vec![1]).unwrap();
        let t = TeacherSnapshot::new(params.clone(), spec, 2.0).unwrap();
        let got = &teacher_probs(&t, &batch).unwrap()[0];
        let w = params.values();
        let z: Vec<f64> = (0..3)
            .map(|o| w[2 * o] * 0.4 + w[2 * o + 1] * -1.3 + w[6 + o])
            .collect();
        let e: Vec<f64> = z.iter().map(|v| (v / 2.0).exp()).collect();
        let s: f64 = e.iter().sum();
        let expect: Vec<f64> = e.iter().map(|v| v / s).collect();
        assert!(close(got, &expect, 1e-14));
    }

    #[test]
    fn lambda_zero_is_plain_ce() {
        let spec = ModelSpec::logistic(2, 3);
        let params = spec.init(&mut ChaCha8Rng::seed_from_u64(4));
        let batch = Batch::new(
            Matrix::from_vec(2, 2, vec![0.4, -1.3, 1.0, 1.0]).unwrap(),
            vec![1, 2],
        )
        .unwrap();
        let targets = vec![vec![0.2, 0.5, 0.3], vec![0.1, 0.1, 0.8]];
        let (l, g) = combined_loss_grad(&spec, &params, &batch, &targets, 0.0, 2.0, 0.0).unwrap();
        let (lc, gc) = nn::loss_and_grad(&spec, &params, &batch, &LossSpec::ce(), None).unwrap();
        assert_eq!(l, lc);
        assert_eq!(g, gc);
    }
}
