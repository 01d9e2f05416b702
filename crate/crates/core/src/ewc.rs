//! Quadratic weight-anchoring penalties for continual training: the classic
//! diagonal form and the rank-1 form built from the mean gradient direction.
//!
//! Each finished task contributes one record anchored at that task's final
//! parameters; records are kept separately and summed (multi-anchor form)
//! rather than merged into one running quadratic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fisher::{c_star, empirical_diag, estimate_mu};
use crate::params::ParamVector;

/// Which curvature summary a record stores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyMode {
    Diag,
    Rank1,
}

/// The quadratic form of one task record.
#[derive(Debug, Clone, PartialEq)]
pub enum PenaltyKind {
    /// sum_i f[i] * delta_i^2 with f the per-coordinate mean squared gradient.
    Diag(Vec<f64>),
    /// c_star * (mu^T delta)^2.
    Rank1 { mu: ParamVector, c_star: f64 },
    /// Degenerate consolidation (zero mean gradient); contributes nothing.
    Null,
}

/// One consolidated task: anchor point plus its quadratic form.
#[derive(Debug, Clone, PartialEq)]
pub struct EwcRecord {
    pub task_id: usize,
    pub theta_star: ParamVector,
    pub kind: PenaltyKind,
}

/// Append-only list of task records sharing one penalty weight lambda.
#[derive(Debug, Clone, PartialEq)]
pub struct EwcState {
    pub lambda: f64,
    pub records: Vec<EwcRecord>,
}

impl EwcState {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Config(format!(
                "penalty weight must be finite and nonnegative, got {}",
                lambda
            )));
        }
        Ok(Self { lambda, records: Vec::new() })
    }

    pub fn push(&mut self, record: EwcRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if record.task_id <= last.task_id {
                return Err(Error::Structural(format!(
                    "task records must be appended in order; got task {} after {}",
                    record.task_id, last.task_id
                )));
            }
            if record.theta_star.layout().as_ref() != last.theta_star.layout().as_ref() {
                return Err(Error::Structural(
                    "all task records must share one parameter layout".into(),
                ));
            }
        }
        self.records.push(record);
        Ok(())
    }
}

/// Builds the record for a finished task from per-sample gradients collected
/// at the anchor. A zero mean gradient in rank-1 mode yields a null record
/// (with the warning left to the caller's log) instead of failing.
pub fn consolidate_task(
    task_id: usize,
    theta_star: ParamVector,
    grads: &[ParamVector],
    mode: PenaltyMode,
) -> Result<EwcRecord> {
    let kind = match mode {
        PenaltyMode::Diag => PenaltyKind::Diag(empirical_diag(grads)?),
        PenaltyMode::Rank1 => {
            let mu = estimate_mu(grads)?;
            if mu.norm() == 0.0 {
                PenaltyKind::Null
            } else {
                let cs = c_star(grads, &mu)?;
                PenaltyKind::Rank1 { mu, c_star: cs }
            }
        }
    };
    Ok(EwcRecord { task_id, theta_star, kind })
}

/// Penalty value (lambda/2) * sum_k pen_k and its gradient at `theta`.
pub fn penalty(state: &EwcState, theta: &ParamVector) -> Result<(f64, ParamVector)> {
    let mut value = 0.0;
    let mut grad = ParamVector::zeros(theta.layout().clone());
    for record in &state.records {
        if record.theta_star.len() != theta.len() {
            return Err(Error::Structural(format!(
                "task {} anchor has {} parameters, current model has {}",
                record.task_id,
                record.theta_star.len(),
                theta.len()
            )));
        }
        match &record.kind {
            PenaltyKind::Diag(f) => {
                for i in 0..theta.len() {
                    let delta = theta.values[i] - record.theta_star.values[i];
                    value += 0.5 * state.lambda * f[i] * delta * delta;
                    grad.values[i] += state.lambda * f[i] * delta;
                }
            }
            PenaltyKind::Rank1 { mu, c_star } => {
                let mut proj = 0.0;
                for i in 0..theta.len() {
                    proj += mu.values[i] * (theta.values[i] - record.theta_star.values[i]);
                }
                value += 0.5 * state.lambda * c_star * proj * proj;
                let coeff = state.lambda * c_star * proj;
                grad.axpy(coeff, mu);
            }
            PenaltyKind::Null => {}
        }
    }
    Ok((value, grad))
}

/// Compares the analytic penalty gradient against central finite differences;
/// returns the worst relative error. The penalty is quadratic, so this should
/// be near machine precision.
pub fn penalty_grad_check(state: &EwcState, theta: &ParamVector, h: f64) -> Result<f64> {
    let (_, analytic) = penalty(state, theta)?;
    let fd = crate::net::finite_difference_gradient(theta, |p| Ok(penalty(state, p)?.0), h)?;
    Ok(crate::net::max_relative_error(&analytic, &fd))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamLayout;
    use std::sync::Arc;

    fn vec2(values: [f64; 2]) -> ParamVector {
        let layout = Arc::new(ParamLayout::new(&[("w", (2, 1))]));
        ParamVector::from_values(layout, values.to_vec()).unwrap()
    }

    #[test]
    fn consolidation_hand_cases() {
        let rows = vec![vec2([1.0, 2.0]), vec2([2.0, 4.0])];
        let anchor = vec2([0.0, 0.0]);

        let r1 = consolidate_task(1, anchor.clone(), &rows, PenaltyMode::Rank1).unwrap();
        match &r1.kind {
            PenaltyKind::Rank1 { mu, c_star } => {
                assert_eq!(mu.values, vec![1.5, 3.0]);
                assert!((c_star - 2.5 / 2.25).abs() < 1e-12);
            }
            other => panic!("expected rank-1 record, got {:?}", other),
        }

        let rd = consolidate_task(1, anchor, &rows, PenaltyMode::Diag).unwrap();
        match &rd.kind {
            PenaltyKind::Diag(f) => assert_eq!(f, &vec![2.5, 10.0]),
            other => panic!("expected diagonal record, got {:?}", other),
        }
    }

    #[test]
    fn zero_gradients_consolidate_to_null_or_zero() {
        let rows = vec![vec2([0.0, 0.0]), vec2([0.0, 0.0])];
        let anchor = vec2([1.0, 1.0]);
        let r1 = consolidate_task(1, anchor.clone(), &rows, PenaltyMode::Rank1).unwrap();
        assert_eq!(r1.kind, PenaltyKind::Null);
        let rd = consolidate_task(1, anchor.clone(), &rows, PenaltyMode::Diag).unwrap();
        assert_eq!(rd.kind, PenaltyKind::Diag(vec![0.0, 0.0]));

        // Both give a zero penalty everywhere.
        let mut state = EwcState::new(100.0).unwrap();
        state.push(r1).unwrap();
        let (value, grad) = penalty(&state, &vec2([9.0, -9.0])).unwrap();
        assert_eq!(value, 0.0);
        assert!(grad.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn penalty_is_zero_at_every_anchor() {
        let rows = vec![vec2([1.0, 2.0]), vec2([2.0, 4.0])];
        let anchor = vec2([0.5, -0.25]);
        let mut state = EwcState::new(15_000.0).unwrap();
        state
            .push(consolidate_task(1, anchor.clone(), &rows, PenaltyMode::Rank1).unwrap())
            .unwrap();
        let (value, grad) = penalty(&state, &anchor).unwrap();
        assert_eq!(value, 0.0);
        assert!(grad.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rank1_hand_case() {
        // lambda=1, c*=2, mu=[1,0], delta=[3,4]: value = 0.5*2*9 = 9, grad [6,0].
        let mut state = EwcState::new(1.0).unwrap();
        state
            .push(EwcRecord {
                task_id: 1,
                theta_star: vec2([0.0, 0.0]),
                kind: PenaltyKind::Rank1 { mu: vec2([1.0, 0.0]), c_star: 2.0 },
            })
            .unwrap();
        let (value, grad) = penalty(&state, &vec2([3.0, 4.0])).unwrap();
        assert!((value - 9.0).abs() < 1e-14);
        assert!((grad.values[0] - 6.0).abs() < 1e-14);
        assert_eq!(grad.values[1], 0.0);
    }

    #[test]
    fn diag_hand_case() {
        // lambda=2, f=[2.5,10], delta=[1,1]: value = 1*(2.5+10) = 12.5, grad [5,20].
        let mut state = EwcState::new(2.0).unwrap();
        state
            .push(EwcRecord {
                task_id: 1,
                theta_star: vec2([0.0, 0.0]),
                kind: PenaltyKind::Diag(vec![2.5, 10.0]),
            })
            .unwrap();
        let (value, grad) = penalty(&state, &vec2([1.0, 1.0])).unwrap();
        assert!((value - 12.5).abs() < 1e-14);
        assert!((grad.values[0] - 5.0).abs() < 1e-14);
        assert!((grad.values[1] - 20.0).abs() < 1e-14);
    }

    #[test]
    fn rank1_ignores_orthogonal_motion_and_mu_sign() {
        let mu = vec2([1.0, 2.0]);
        let mut state = EwcState::new(7.0).unwrap();
        state
            .push(EwcRecord {
                task_id: 1,
                theta_star: vec2([0.0, 0.0]),
                kind: PenaltyKind::Rank1 { mu: mu.clone(), c_star: 3.0 },
            })
            .unwrap();
        // delta = [2, -1] is orthogonal to mu = [1, 2].
        let (value, grad) = penalty(&state, &vec2([2.0, -1.0])).unwrap();
        assert_eq!(value, 0.0);
        assert!(grad.values.iter().all(|&v| v.abs() < 1e-15));

        // Flipping mu changes nothing.
        let mut flipped = EwcState::new(7.0).unwrap();
        flipped
            .push(EwcRecord {
                task_id: 1,
                theta_star: vec2([0.0, 0.0]),
                kind: PenaltyKind::Rank1 { mu: vec2([-1.0, -2.0]), c_star: 3.0 },
            })
            .unwrap();
        let theta = vec2([0.7, 0.3]);
        let (v1, g1) = penalty(&state, &theta).unwrap();
        let (v2, g2) = penalty(&flipped, &theta).unwrap();
        assert_eq!(v1, v2);
        assert_eq!(g1.values, g2.values);
    }

    #[test]
    fn more_records_never_lower_the_penalty() {
        let theta = vec2([1.0, 1.0]);
        let mut state = EwcState::new(3.0).unwrap();
        state
            .push(EwcRecord {
                task_id: 1,
                theta_star: vec2([0.0, 0.0]),
                kind: PenaltyKind::Diag(vec![1.0, 1.0]),
            })
            .unwrap();
        let (v1, _) = penalty(&state, &theta).unwrap();
        state
            .push(EwcRecord {
                task_id: 2,
                theta_star: vec2([0.5, 0.0]),
                kind: PenaltyKind::Rank1 { mu: vec2([1.0, 1.0]), c_star: 0.5 },
            })
            .unwrap();
        let (v2, _) = penalty(&state, &theta).unwrap();
        assert!(v2 >= v1);
        assert!(v1 > 0.0);
    }

    #[test]
    fn out_of_order_records_are_rejected() {
        let mut state = EwcState::new(1.0).unwrap();
        state
            .push(EwcRecord { task_id: 2, theta_star: vec2([0.0; 2]), kind: PenaltyKind::Null })
            .unwrap();
        let err = state
            .push(EwcRecord { task_id: 1, theta_star: vec2([0.0; 2]), kind: PenaltyKind::Null })
            .unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut state = EwcState::new(1.5).unwrap();
        state
            .push(EwcRecord {
                task_id: 1,
                theta_star: vec2([0.1, -0.2]),
                kind: PenaltyKind::Diag(vec![2.5, 10.0]),
            })
            .unwrap();
        state
            .push(EwcRecord {
                task_id: 2,
                theta_star: vec2([-0.4, 0.6]),
                kind: PenaltyKind::Rank1 { mu: vec2([1.0, 2.0]), c_star: 1.2 },
            })
            .unwrap();
        let theta = vec2([3.0, 4.0]);
        let err = penalty_grad_check(&state, &theta, 1e-6).unwrap();
        assert!(err < 1e-8, "quadratic penalty FD error should be tiny, got {}", err);

        // At the anchor both gradients vanish identically.
        let zero_err = penalty_grad_check(&state, &vec2([0.1, -0.2]), 1e-6).unwrap();
        assert!(zero_err < 1e-8);
    }

    #[test]
    fn negative_lambda_is_rejected() {
        assert!(EwcState::new(-1.0).is_err());
        assert!(EwcState::new(f64::NAN).is_err());
    }
}
