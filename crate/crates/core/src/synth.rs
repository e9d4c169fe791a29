//! Class-wise statistic-matching synthesis on feature vectors.
//!
//! A synthetic batch for one class is optimized jointly against
//!
//! ```text
//! L(X) = sum_i CE(teacher((x_i - mu_global) / sqrt(var_global + eps)), c)
//!      + alpha * ( |mu(X) - mu_c|_2 + |var(X) - var_c|_2 )
//! ```
//!
//! where `mu(X)` and `var(X)` are the batch mean and population variance and
//! `mu_c`, `var_c` are the class's statistics from real data. The norms are
//! unsquared. The cross-entropy term sees globally normalized inputs; only the
//! statistic term uses class-wise targets.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::features::FeatureMatrix;
use crate::logits::log_softmax_slice;
pub use crate::model::LinearModel as LinearTeacher;

/// Per-class and global feature statistics (population variance).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub class_means: Vec<Vec<f64>>,
    pub class_vars: Vec<Vec<f64>>,
    pub global_mean: Vec<f64>,
    pub global_var: Vec<f64>,
    pub epsilon: f64,
}

impl ClassStats {
    pub fn num_classes(&self) -> usize {
        self.class_means.len()
    }

    pub fn dim(&self) -> usize {
        self.global_mean.len()
    }
}

fn mean_var<'a>(rows: impl Iterator<Item = &'a [f64]> + Clone, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; d];
    let mut n = 0usize;
    for r in rows.clone() {
        n += 1;
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for r in rows {
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= n as f64);
    (mean, var)
}

/// Two-pass mean and population variance per class and over all rows.
pub fn compute_class_stats(data: &FeatureMatrix) -> Result<ClassStats> {
    let d = data.dim();
    let groups = data.class_indices();
    if let Some(c) = groups.iter().position(Vec::is_empty) {
        return Err(invalid(format!("class {c} has no samples")));
    }
    let (class_means, class_vars) = groups
        .iter()
        .map(|idx| mean_var(idx.iter().map(|&i| data.row(i)), d))
        .unzip();
    let (global_mean, global_var) = mean_var(data.rows().iter().map(Vec::as_slice), d);
    Ok(ClassStats {
        class_means,
        class_vars,
        global_mean,
        global_var,
        epsilon: 1e-5,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// Fixed-step gradient descent.
    Gd,
    /// Adam with the given moment decay rates.
    Adam { beta1: f64, beta2: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Weight of the statistic-matching term.
    pub alpha: f64,
    pub iterations: usize,
    pub step_size: f64,
    /// Samples per class (IPC); also the optimization batch size.
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            iterations: 300,
            step_size: 0.05,
            batch_size: 10,
            seed: 0,
            optimizer: Optimizer::Gd,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(invalid("alpha must be finite and >= 0"));
        }
        if self.iterations == 0 {
            return Err(invalid("iterations must be >= 1"));
        }
        if self.batch_size < 2 {
            return Err(invalid("batch size must be >= 2 for a batch variance"));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(invalid("step size must be > 0"));
        }
        Ok(())
    }
}

/// Result of one synthesis run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthBatch {
    pub class_id: u32,
    pub rows: Vec<Vec<f64>>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

fn check_inputs(teacher: &LinearTeacher, stats: &ClassStats, class_id: usize) -> Result<()> {
    teacher.validate()?;
    if class_id >= stats.num_classes() || class_id >= teacher.num_classes {
        return Err(invalid(format!("class {class_id} out of range")));
    }
    if teacher.dim != stats.dim() {
        return Err(invalid(
            "teacher and statistics disagree on feature dimension",
        ));
    }
    Ok(())
}

/// Summed cross-entropy of `rows` for `class_id` under global normalization,
/// and its gradient with respect to each row (added into `grad`).
fn cross_entropy(
    teacher: &LinearTeacher,
    stats: &ClassStats,
    class_id: usize,
    rows: &[Vec<f64>],
    grad: &mut [Vec<f64>],
) -> f64 {
    let scale: Vec<f64> = stats
        .global_var
        .iter()
        .map(|v| 1.0 / (v + stats.epsilon).sqrt())
        .collect();
    let mut loss = 0.0;
    for (x, g) in rows.iter().zip(grad.iter_mut()) {
        let normalized: Vec<f64> = x
            .iter()
            .zip(&stats.global_mean)
            .zip(&scale)
            .map(|((v, m), s)| (v - m) * s)
            .collect();
        let log_p = log_softmax_slice(&teacher.logits_raw(&normalized), 1.0);
        loss -= log_p[class_id];
        for (c, lp) in log_p.iter().enumerate() {
            let coeff = lp.exp() - if c == class_id { 1.0 } else { 0.0 };
            for ((gj, w), s) in g.iter_mut().zip(teacher.row(c)).zip(&scale) {
                *gj += coeff * w * s;
            }
        }
    }
    loss
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Unit vector along `v`, or zeros where the norm vanishes (subgradient 0).
fn unit(v: &[f64]) -> Vec<f64> {
    let n = norm(v);
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        vec![0.0; v.len()]
    }
}

/// Objective and gradient of the class-wise synthesis loss for a whole batch.
pub fn class_batch_loss(
    teacher: &LinearTeacher,
    stats: &ClassStats,
    class_id: usize,
    alpha: f64,
    rows: &[Vec<f64>],
) -> Result<(f64, Vec<Vec<f64>>)> {
    check_inputs(teacher, stats, class_id)?;
    let d = stats.dim();
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(invalid("batch rows must be non-empty with dimension d"));
    }
    let mut grad = vec![vec![0.0; d]; n];
    let ce = cross_entropy(teacher, stats, class_id, rows, &mut grad);

    let (mu, var) = mean_var(rows.iter().map(Vec::as_slice), d);
    let dmu: Vec<f64> = mu
        .iter()
        .zip(&stats.class_means[class_id])
        .map(|(a, b)| a - b)
        .collect();
    let dvar: Vec<f64> = var
        .iter()
        .zip(&stats.class_vars[class_id])
        .map(|(a, b)| a - b)
        .collect();
    let stat_loss = norm(&dmu) + norm(&dvar);

    let (u_mu, u_var) = (unit(&dmu), unit(&dvar));
    let nf = n as f64;
    for (x, g) in rows.iter().zip(grad.iter_mut()) {
        for j in 0..d {
            g[j] += alpha * (u_mu[j] / nf + u_var[j] * 2.0 * (x[j] - mu[j]) / nf);
        }
    }
    Ok((ce + alpha * stat_loss, grad))
}

/// Objective of one sample optimized on its own: cross-entropy plus the
/// statistic term against the global statistics (a single sample has zero
/// variance, so only the mean distance varies).
pub fn independent_sample_loss(
    teacher: &LinearTeacher,
    stats: &ClassStats,
    class_id: usize,
    alpha: f64,
    x: &[f64],
) -> Result<(f64, Vec<f64>)> {
    check_inputs(teacher, stats, class_id)?;
    let rows = [x.to_vec()];
    let mut grad = vec![vec![0.0; x.len()]];
    let ce = cross_entropy(teacher, stats, class_id, &rows, &mut grad);
    let dmu: Vec<f64> = x
        .iter()
        .zip(&stats.global_mean)
        .map(|(a, b)| a - b)
        .collect();
    let u = unit(&dmu);
    let mut g = grad.pop().unwrap();
    for (gj, uj) in g.iter_mut().zip(&u) {
        *gj += alpha * uj;
    }
    Ok((ce + alpha * (norm(&dmu) + norm(&stats.global_var)), g))
}

struct Stepper {
    optimizer: Optimizer,
    step: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Stepper {
    fn new(cfg: &SynthConfig, n: usize, d: usize) -> Self {
        Self {
            optimizer: cfg.optimizer,
            step: cfg.step_size,
            t: 0,
            m: vec![vec![0.0; d]; n],
            v: vec![vec![0.0; d]; n],
        }
    }

    fn apply(&mut self, rows: &mut [Vec<f64>], grad: &[Vec<f64>]) {
        self.t += 1;
        match self.optimizer {
            Optimizer::Gd => {
                for (x, g) in rows.iter_mut().zip(grad) {
                    for (xj, gj) in x.iter_mut().zip(g) {
                        *xj -= self.step * gj;
                    }
                }
            }
            Optimizer::Adam { beta1, beta2 } => {
                let (c1, c2) = (1.0 - beta1.powi(self.t), 1.0 - beta2.powi(self.t));
                for i in 0..rows.len() {
                    for j in 0..rows[i].len() {
                        let g = grad[i][j];
                        self.m[i][j] = beta1 * self.m[i][j] + (1.0 - beta1) * g;
                        self.v[i][j] = beta2 * self.v[i][j] + (1.0 - beta2) * g * g;
                        let mh = self.m[i][j] / c1;
                        let vh = self.v[i][j] / c2;
                        rows[i][j] -= self.step * mh / (vh.sqrt() + 1e-8);
                    }
                }
            }
        }
    }
}

fn rng_for(seed: u64, class_id: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (class_id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn init_rows(stats: &ClassStats, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            stats
                .global_mean
                .iter()
                .zip(&stats.global_var)
                .map(|(m, v)| {
                    let e: f64 = StandardNormal.sample(rng);
                    m + v.sqrt() * e
                })
                .collect()
        })
        .collect()
}

fn check_finite(loss: f64, iteration: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Optimization {
            iteration,
            reason: format!("loss became {loss}"),
        })
    }
}

/// Optimizes `cfg.batch_size` samples of `class_id` together from a seeded
/// random start drawn from the global statistics.
pub fn synthesize_class_batch(
    teacher: &LinearTeacher,
    stats: &ClassStats,
    class_id: usize,
    cfg: &SynthConfig,
) -> Result<SynthBatch> {
    cfg.validate()?;
    check_inputs(teacher, stats, class_id)?;
    let mut rng = rng_for(cfg.seed, class_id);
    let mut rows = init_rows(stats, cfg.batch_size, &mut rng);
    let mut stepper = Stepper::new(cfg, rows.len(), stats.dim());
    let mut initial_loss = f64::NAN;
    for it in 0..cfg.iterations {
        let (loss, grad) = class_batch_loss(teacher, stats, class_id, cfg.alpha, &rows)?;
        check_finite(loss, it)?;
        if it == 0 {
            initial_loss = loss;
        }
        stepper.apply(&mut rows, &grad);
    }
    let (final_loss, _) = class_batch_loss(teacher, stats, class_id, cfg.alpha, &rows)?;
    check_finite(final_loss, cfg.iterations)?;
    Ok(SynthBatch {
        class_id: class_id as u32,
        rows,
        initial_loss,
        final_loss,
    })
}

/// Baseline: each of the `cfg.batch_size` samples is optimized alone against
/// the global statistics, with no interaction between samples.
pub fn synthesize_independent(
    teacher: &LinearTeacher,
    stats: &ClassStats,
    class_id: usize,
    cfg: &SynthConfig,
) -> Result<SynthBatch> {
    cfg.validate()?;
    check_inputs(teacher, stats, class_id)?;
    let mut rng = rng_for(cfg.seed, class_id);
    let mut rows = init_rows(stats, cfg.batch_size, &mut rng);
    let total = |rows: &[Vec<f64>]| -> Result<f64> {
        rows.iter()
            .map(|x| {
                independent_sample_loss(teacher, stats, class_id, cfg.alpha, x).map(|(l, _)| l)
            })
            .sum()
    };
    let initial_loss = total(&rows)?;
    for (i, x) in rows.iter_mut().enumerate() {
        let mut stepper = Stepper::new(cfg, 1, stats.dim());
        let mut single = [std::mem::take(x)];
        for it in 0..cfg.iterations {
            let (loss, g) =
                independent_sample_loss(teacher, stats, class_id, cfg.alpha, &single[0])?;
            check_finite(loss, it).map_err(|e| match e {
                Error::Optimization { iteration, reason } => Error::Optimization {
                    iteration,
                    reason: format!("sample {i}: {reason}"),
                },
                other => other,
            })?;
            stepper.apply(&mut single, &[g]);
        }
        let [done] = single;
        *x = done;
    }
    let final_loss = total(&rows)?;
    check_finite(final_loss, cfg.iterations)?;
    Ok(SynthBatch {
        class_id: class_id as u32,
        rows,
        initial_loss,
        final_loss,
    })
}

/// Which synthesis objective to run for every class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthMode {
    ClassWise,
    Independent,
}

/// Synthesizes `cfg.batch_size` samples for every class. Classes run in
/// parallel; each class is deterministic for a given seed.
pub fn synthesize_dataset(
    teacher: &LinearTeacher,
    stats: &ClassStats,
    cfg: &SynthConfig,
    mode: SynthMode,
) -> Result<FeatureMatrix> {
    use rayon::prelude::*;
    let batches = (0..stats.num_classes())
        .into_par_iter()
        .map(|c| match mode {
            SynthMode::ClassWise => synthesize_class_batch(teacher, stats, c, cfg),
            SynthMode::Independent => synthesize_independent(teacher, stats, c, cfg),
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for b in batches {
        labels.extend(std::iter::repeat_n(b.class_id, b.rows.len()));
        rows.extend(b.rows);
    }
    FeatureMatrix::new(stats.dim(), stats.num_classes(), rows, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats_single_sample_per_class() {
        let data =
            FeatureMatrix::new(2, 2, vec![vec![1.0, 2.0], vec![-1.0, 0.5]], vec![0, 1]).unwrap();
        let s = compute_class_stats(&data).unwrap();
        assert_eq!(s.class_means[0], vec![1.0, 2.0]);
        assert_eq!(s.class_vars[1], vec![0.0, 0.0]);
    }

    #[test]
    fn stats_population_variance() {
        let data = FeatureMatrix::new(1, 1, vec![vec![0.0], vec![2.0]], vec![0, 0]).unwrap();
        let s = compute_class_stats(&data).unwrap();
        assert_eq!(s.class_means[0], vec![1.0]);
        assert_eq!(s.class_vars[0], vec![1.0]);
    }

    #[test]
    fn stats_missing_class() {
        let data = FeatureMatrix::new(1, 3, vec![vec![0.0], vec![2.0]], vec![0, 2]).unwrap();
        assert!(compute_class_stats(&data).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(SynthConfig {
            batch_size: 1,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(SynthConfig {
            iterations: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(SynthConfig {
            alpha: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(SynthConfig::default().validate().is_ok());
    }

    fn toy() -> (LinearTeacher, ClassStats) {
        let rows = vec![
            vec![1.0, 0.5, -0.3, 2.0],
            vec![1.4, 0.1, 0.2, 1.5],
            vec![0.6, 0.9, -0.8, 2.2],
            vec![-1.0, -0.4, 0.5, 0.0],
            vec![-1.5, 0.3, 0.9, -0.4],
            vec![-0.7, -0.9, 1.1, 0.3],
            vec![0.1, 2.0, 0.0, -1.0],
            vec![0.4, 1.6, -0.2, -1.3],
        ];
        let data = FeatureMatrix::new(4, 3, rows, vec![0, 0, 0, 1, 1, 1, 2, 2]).unwrap();
        let teacher = LinearTeacher {
            num_classes: 3,
            dim: 4,
            weights: vec![
                0.8, -0.2, 0.1, 0.6, -0.5, 0.3, 0.7, -0.1, 0.2, 0.9, -0.4, -0.3,
            ],
            bias: vec![0.1, -0.2, 0.05],
        };
        (teacher, compute_class_stats(&data).unwrap())
    }

    fn sample_rows(n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..4).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect()
    }

    #[test]
    fn class_loss_gradient_matches_finite_differences() {
        let (teacher, stats) = toy();
        for seed in 0..5 {
            let rows = sample_rows(4, seed);
            let (_, grad) = class_batch_loss(&teacher, &stats, 1, 0.7, &rows).unwrap();
            let h = 1e-6;
            for i in 0..rows.len() {
                for j in 0..4 {
                    let mut plus = rows.clone();
                    let mut minus = rows.clone();
                    plus[i][j] += h;
                    minus[i][j] -= h;
                    let lp = class_batch_loss(&teacher, &stats, 1, 0.7, &plus).unwrap().0;
                    let lm = class_batch_loss(&teacher, &stats, 1, 0.7, &minus)
                        .unwrap()
                        .0;
                    let fd = (lp - lm) / (2.0 * h);
                    assert!(
                        (fd - grad[i][j]).abs() < 1e-4,
                        "row {i} dim {j}: {fd} vs {}",
                        grad[i][j]
                    );
                }
            }
        }
    }

    #[test]
    fn independent_loss_gradient_matches_finite_differences() {
        let (teacher, stats) = toy();
        let x = sample_rows(1, 9).pop().unwrap();
        let (_, g) = independent_sample_loss(&teacher, &stats, 2, 0.3, &x).unwrap();
        let h = 1e-6;
        for j in 0..4 {
            let mut plus = x.clone();
            let mut minus = x.clone();
            plus[j] += h;
            minus[j] -= h;
            let fd = (independent_sample_loss(&teacher, &stats, 2, 0.3, &plus)
                .unwrap()
                .0
                - independent_sample_loss(&teacher, &stats, 2, 0.3, &minus)
                    .unwrap()
                    .0)
                / (2.0 * h);
            assert!((fd - g[j]).abs() < 1e-4);
        }
    }

    #[test]
    fn large_alpha_matches_class_mean() {
        let (teacher, stats) = toy();
        let alpha = 1e6;
        let mut rows = sample_rows(4, 3);
        for t in 0..20000 {
            let (_, g) = class_batch_loss(&teacher, &stats, 0, alpha, &rows).unwrap();
            let step = 0.05 / (alpha * (1.0 + t as f64 / 50.0));
            for (x, gx) in rows.iter_mut().zip(&g) {
                for (v, gv) in x.iter_mut().zip(gx) {
                    *v -= step * gv;
                }
            }
        }
        let (mu, _) = mean_var(rows.iter().map(Vec::as_slice), 4);
        let gap: f64 = mu
            .iter()
            .zip(&stats.class_means[0])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(gap <= 1e-3 * 2.0, "mean gap {gap}");
    }

    #[test]
    fn synthesis_is_deterministic_and_reduces_loss() {
        let (teacher, stats) = toy();
        let cfg = SynthConfig {
            batch_size: 4,
            iterations: 100,
            seed: 11,
            ..Default::default()
        };
        for optimizer in [
            Optimizer::Gd,
            Optimizer::Adam {
                beta1: 0.9,
                beta2: 0.999,
            },
        ] {
            let cfg = SynthConfig { optimizer, ..cfg };
            let a = synthesize_class_batch(&teacher, &stats, 2, &cfg).unwrap();
            let b = synthesize_class_batch(&teacher, &stats, 2, &cfg).unwrap();
            assert_eq!(a, b);
            assert!(a.final_loss < a.initial_loss);
            let ind = synthesize_independent(&teacher, &stats, 2, &cfg).unwrap();
            assert!(ind.final_loss < ind.initial_loss);
        }
        let all = synthesize_dataset(&teacher, &stats, &cfg, SynthMode::ClassWise).unwrap();
        assert_eq!(all.len(), 12);
        assert_eq!(
            all,
            synthesize_dataset(&teacher, &stats, &cfg, SynthMode::ClassWise).unwrap()
        );
    }

    #[test]
    fn rejects_bad_class_and_divergence() {
        let (teacher, stats) = toy();
        let cfg = SynthConfig {
            batch_size: 2,
            ..Default::default()
        };
        assert!(synthesize_class_batch(&teacher, &stats, 3, &cfg).is_err());
        let wild = SynthConfig {
            step_size: 1e300,
            alpha: 1e300,
            iterations: 5,
            ..cfg
        };
        assert!(matches!(
            synthesize_class_batch(&teacher, &stats, 0, &wild),
            Err(Error::Optimization { .. })
        ));
    }
}
