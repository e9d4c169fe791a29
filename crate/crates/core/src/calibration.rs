//! Teacher temperature annealing for reused labels, student temperature
//! calibration by grid search, and the KD loss.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::logits::{kl_div_logits, log_softmax_slice, LogitVector, SparseProbs};

/// Step schedule for the teacher temperature: start at `initial_tau`, multiply
/// by `decay_factor` every `step_epochs` epochs, never go below `floor_tau`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemperatureSchedule {
    pub initial_tau: f64,
    pub decay_factor: f64,
    pub step_epochs: usize,
    pub floor_tau: f64,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        Self {
            initial_tau: 20.0,
            decay_factor: 0.7,
            step_epochs: 30,
            floor_tau: 2.0,
        }
    }
}

impl TemperatureSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.floor_tau > 0.0 && self.initial_tau >= self.floor_tau) {
            return Err(invalid(format!(
                "need initial_tau >= floor_tau > 0, got {} / {}",
                self.initial_tau, self.floor_tau
            )));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return Err(invalid(format!(
                "decay_factor must be in (0, 1), got {}",
                self.decay_factor
            )));
        }
        if self.step_epochs == 0 {
            return Err(invalid("step_epochs must be >= 1"));
        }
        Ok(())
    }
}

/// Teacher temperature in effect at `epoch`.
pub fn teacher_temperature(sched: &TemperatureSchedule, epoch: usize) -> f64 {
    let steps = (epoch / sched.step_epochs) as i32;
    (sched.initial_tau * sched.decay_factor.powi(steps)).max(sched.floor_tau)
}

/// Candidate student temperatures, strictly increasing within (0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TemperatureGrid(Vec<f64>);

impl TemperatureGrid {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(invalid("temperature grid is empty"));
        }
        if values.iter().any(|&v| !(v > 0.0 && v <= 1.0)) {
            return Err(invalid("grid values must lie in (0, 1]"));
        }
        if values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("grid values must be strictly increasing"));
        }
        Ok(Self(values))
    }

    /// `{step, 2 step, ..., 1}` with `steps` points.
    pub fn uniform(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(invalid("grid needs at least one point"));
        }
        Self::new((1..=steps).map(|i| i as f64 / steps as f64).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

impl Default for TemperatureGrid {
    /// `{0.01, 0.02, ..., 1.00}`.
    fn default() -> Self {
        Self::uniform(100).expect("static grid")
    }
}

impl TryFrom<Vec<f64>> for TemperatureGrid {
    type Error = crate::Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<TemperatureGrid> for Vec<f64> {
    fn from(g: TemperatureGrid) -> Self {
        g.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    /// Smallest grid temperature attaining `min_kl`.
    pub tau_star: f64,
    pub min_kl: f64,
    /// Mean batch KL at each grid point, in grid order.
    pub per_tau_kl: Vec<f64>,
}

/// Grid search for the student temperature that minimizes the mean KL between
/// the teacher distributions and the student's tempered softmax over a batch.
///
/// Ties go to the smallest temperature.
pub fn calibrate_student_temperature(
    teacher: &[SparseProbs],
    student_logits: &[LogitVector],
    grid: &TemperatureGrid,
) -> Result<CalibrationResult> {
    if teacher.is_empty() {
        return Err(invalid("calibration batch is empty"));
    }
    if teacher.len() != student_logits.len() {
        return Err(invalid(format!(
            "{} teacher labels but {} student rows",
            teacher.len(),
            student_logits.len()
        )));
    }
    let c = teacher[0].num_classes();
    if teacher.iter().any(|t| t.num_classes() != c)
        || student_logits.iter().any(|z| z.num_classes() != c)
    {
        return Err(invalid("calibration batch mixes class counts"));
    }

    let n = teacher.len() as f64;
    let per_tau_kl = grid
        .values()
        .iter()
        .map(|&tau| {
            let mut total = 0.0;
            for (p, z) in teacher.iter().zip(student_logits) {
                total += kl_div_logits(p, z, tau)?;
            }
            Ok(total / n)
        })
        .collect::<Result<Vec<f64>>>()?;

    let (mut best, mut min_kl) = (0, f64::INFINITY);
    for (i, &kl) in per_tau_kl.iter().enumerate() {
        if kl < min_kl {
            best = i;
            min_kl = kl;
        }
    }
    Ok(CalibrationResult {
        tau_star: grid.values()[best],
        min_kl,
        per_tau_kl,
    })
}

/// KD loss `KL(teacher || softmax(z / tau_hat))` and its gradient with respect
/// to the student logits `z`: `(softmax(z / tau_hat) - p) / tau_hat`.
///
/// No `tau_hat^2` rescaling is applied here.
pub fn kd_loss(
    teacher: &SparseProbs,
    student_logits: &LogitVector,
    tau_hat: f64,
) -> Result<(f64, Vec<f64>)> {
    let loss = kl_div_logits(teacher, student_logits, tau_hat)?;
    let log_q = log_softmax_slice(student_logits.values(), tau_hat);
    let mut grad: Vec<f64> = log_q.iter().map(|lq| lq.exp()).collect();
    let mass: f64 = teacher.probs().iter().sum();
    for g in grad.iter_mut() {
        *g *= mass;
    }
    for (i, p) in teacher.iter() {
        grad[i] -= p;
    }
    for g in grad.iter_mut() {
        *g /= tau_hat;
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logits::{matched_student_logits, quantized_probs, softmax_t, topk_quantize};

    #[test]
    fn schedule_values() {
        let s = TemperatureSchedule::default();
        assert_eq!(teacher_temperature(&s, 0), 20.0);
        assert_eq!(teacher_temperature(&s, 29), 20.0);
        assert!((teacher_temperature(&s, 30) - 14.0).abs() < 1e-12);
        assert!((teacher_temperature(&s, 60) - 9.8).abs() < 1e-12);
        // 20 * 0.7^7 ~ 1.647 is below the floor.
        assert_eq!(teacher_temperature(&s, 210), 2.0);
        assert_eq!(teacher_temperature(&s, 299), 2.0);
    }

    #[test]
    fn schedule_validation() {
        assert!(TemperatureSchedule::default().validate().is_ok());
        let bad = [
            TemperatureSchedule {
                decay_factor: 1.0,
                ..Default::default()
            },
            TemperatureSchedule {
                step_epochs: 0,
                ..Default::default()
            },
            TemperatureSchedule {
                floor_tau: 30.0,
                ..Default::default()
            },
            TemperatureSchedule {
                floor_tau: 0.0,
                initial_tau: 0.0,
                ..Default::default()
            },
        ];
        for s in bad {
            assert!(s.validate().is_err(), "{s:?}");
        }
    }

    #[test]
    fn default_grid() {
        let g = TemperatureGrid::default();
        assert_eq!(g.values().len(), 100);
        assert_eq!(g.values()[0], 0.01);
        assert_eq!(g.values()[49], 0.5);
        assert_eq!(g.values()[99], 1.0);
        assert!(TemperatureGrid::new(vec![0.2, 0.1]).is_err());
        assert!(TemperatureGrid::new(vec![0.0, 0.1]).is_err());
        assert!(TemperatureGrid::new(vec![0.5, 1.5]).is_err());
    }

    #[test]
    fn recovers_construction_temperature() {
        let p = SparseProbs::new(8, vec![2, 5, 0], vec![0.7, 0.2, 0.1]).unwrap();
        let q = SparseProbs::new(8, vec![1, 3], vec![0.55, 0.45]).unwrap();
        let teacher = vec![p.clone(), q.clone()];
        let student = vec![
            matched_student_logits(&p, 0.5).unwrap(),
            matched_student_logits(&q, 0.5).unwrap(),
        ];
        let r =
            calibrate_student_temperature(&teacher, &student, &TemperatureGrid::default()).unwrap();
        assert_eq!(r.tau_star, 0.5);
        assert_eq!(r.per_tau_kl.len(), 100);
        assert_eq!(
            r.min_kl,
            r.per_tau_kl.iter().copied().fold(f64::INFINITY, f64::min)
        );
    }

    #[test]
    fn degenerate_tie_goes_to_smallest() {
        let c = 5;
        let p = SparseProbs::new(c, (0..c as u32).collect(), vec![0.2; 5]).unwrap();
        let z = LogitVector::new(vec![1.3; c]).unwrap();
        let r = calibrate_student_temperature(&[p], &[z], &TemperatureGrid::default()).unwrap();
        assert_eq!(r.tau_star, 0.01);
        assert!(r.per_tau_kl.iter().all(|&k| k == r.per_tau_kl[0]));
    }

    #[test]
    fn quantized_sharp_teacher_prefers_cold_student() {
        // Exhaustive grid evaluation: the minimizer of the direct KL curve must be
        // what the search returns, and it lies below 1.
        let c = 20;
        let z_t = LogitVector::new((0..c).map(|i| 6.0 - 0.5 * i as f64).collect()).unwrap();
        let teacher = quantized_probs(&topk_quantize(&z_t, 5).unwrap(), 1.0).unwrap();
        let z_s = LogitVector::new((0..c).map(|i| 1.0 - 0.1 * i as f64).collect()).unwrap();
        let grid = TemperatureGrid::default();
        let r = calibrate_student_temperature(
            std::slice::from_ref(&teacher),
            std::slice::from_ref(&z_s),
            &grid,
        )
        .unwrap();

        let mut oracle = (f64::INFINITY, 0.0);
        for &tau in grid.values() {
            let q = softmax_t(&z_s, tau).unwrap();
            let kl: f64 = teacher
                .iter()
                .map(|(i, p)| p * (p / q.probs()[i]).ln())
                .sum();
            if kl < oracle.0 {
                oracle = (kl, tau);
            }
        }
        assert_eq!(r.tau_star, oracle.1);
        assert!(r.tau_star < 1.0);
    }

    #[test]
    fn empty_and_mismatched_batches_rejected() {
        let g = TemperatureGrid::default();
        assert!(calibrate_student_temperature(&[], &[], &g).is_err());
        let p = SparseProbs::new(3, vec![0], vec![1.0]).unwrap();
        let z = LogitVector::new(vec![0.0, 0.0]).unwrap();
        assert!(calibrate_student_temperature(&[p], &[z], &g).is_err());
    }

    #[test]
    fn kd_loss_examples() {
        let z = LogitVector::new(vec![0.4, -1.0, 2.2, 0.0]).unwrap();
        let p = SparseProbs::from_dense(&softmax_t(&z, 0.8).unwrap());
        let (loss, grad) = kd_loss(&p, &z, 0.8).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(grad.iter().all(|g| g.abs() < 1e-9));

        let p = SparseProbs::new(2, vec![0], vec![1.0]).unwrap();
        let z = LogitVector::new(vec![0.0, 0.0]).unwrap();
        let (loss, grad) = kd_loss(&p, &z, 1.0).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((grad[0] + 0.5).abs() < 1e-15 && (grad[1] - 0.5).abs() < 1e-15);

        assert!(kd_loss(&p, &z, 0.0).is_err());
    }
}
