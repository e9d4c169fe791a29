//! End-to-end harness on a synthetic classification task.
//!
//! 1. [`generate_task`] draws Gaussian class blobs, fits a linear teacher on
//!    the training split, and builds a small distilled set (IPC per class).
//! 2. [`relabel`] replays augmentation for the retained epochs, runs the
//!    teacher on each augmented input and writes a [`LabelStore`].
//! 3. [`train_student`] trains a linear student for `T` epochs from the store,
//!    reusing stored epochs cyclically, with optional teacher temperature
//!    annealing and per-epoch student temperature calibration.
//! 4. [`pareto_sweep`] runs a grid of (pruning rate, top-k) settings and marks
//!    the accuracy/storage frontier.
//!
//! Augmentation on feature vectors mirrors the stored image augmentation
//! fields: `crops` holds two (scale, shift) pairs applied to even and odd
//! dimensions, `flip` negates the vector, and the cutmix fields mix the input
//! with a partner image as `lambda * x + (1 - lambda) * x_partner` before the
//! affine jitter. Bounding boxes are stored as zeros.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::calibration::{
    calibrate_student_temperature, kd_loss, teacher_temperature, TemperatureGrid,
    TemperatureSchedule,
};
use crate::error::{invalid, Error, Result};
use crate::features::FeatureMatrix;
use crate::logits::{quantized_probs, topk_quantize, SparseProbs};
use crate::model::{fit_logistic_regression, FitConfig, LinearModel};
use crate::store::{
    compression_report, prune_plan, shape_breakdown, usable_batches, Baseline, BatchLabels,
    BatchRecord, CompressionReport, LabelStore, PrunePlan, StoreShape,
};
use crate::synth::{compute_class_stats, synthesize_dataset, SynthConfig, SynthMode};

/// How the distilled set is built.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistilledSource {
    /// Class means of the training split plus Gaussian noise of this scale.
    Noise { scale: f64 },
    /// Output of the synthesis module.
    Synth {
        mode: SynthMode,
        config: SynthConfig,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Typical distance between class means, in units of the blob noise.
    pub separation: f64,
    pub ipc: usize,
    pub seed: u64,
    pub distilled: DistilledSource,
    pub teacher_fit: FitConfig,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            dim: 16,
            train_per_class: 100,
            test_per_class: 200,
            separation: 3.0,
            ipc: 10,
            seed: 0,
            distilled: DistilledSource::Noise { scale: 1.0 },
            teacher_fit: FitConfig::default(),
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(invalid("task needs at least 2 classes"));
        }
        if self.dim == 0 || self.train_per_class == 0 || self.test_per_class == 0 || self.ipc == 0 {
            return Err(invalid("dim, split sizes and ipc must all be >= 1"));
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return Err(invalid("separation must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub spec: TaskSpec,
    pub train: FeatureMatrix,
    pub test: FeatureMatrix,
    pub distilled: FeatureMatrix,
    pub teacher: LinearModel,
    /// Set when the blobs coincide (zero separation).
    pub degenerate: bool,
}

fn normal_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

fn blobs(means: &[Vec<f64>], per_class: usize, rng: &mut ChaCha8Rng) -> Result<FeatureMatrix> {
    let d = means[0].len();
    let mut rows = Vec::with_capacity(means.len() * per_class);
    let mut labels = Vec::with_capacity(rows.capacity());
    for (c, mu) in means.iter().enumerate() {
        for _ in 0..per_class {
            rows.push(
                mu.iter()
                    .zip(normal_vec(rng, d))
                    .map(|(m, e)| m + e)
                    .collect(),
            );
            labels.push(c as u32);
        }
    }
    Ok(FeatureMatrix::new(d, means.len(), rows, labels)?.round_to_f32())
}

/// Builds the blobs, the teacher and the distilled set. Deterministic per seed.
pub fn generate_task(spec: &TaskSpec) -> Result<Task> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let radius = spec.separation / std::f64::consts::SQRT_2;
    let means: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| {
            let v = normal_vec(&mut rng, spec.dim);
            let n = v
                .iter()
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt()
                .max(f64::MIN_POSITIVE);
            v.into_iter().map(|x| x * radius / n).collect()
        })
        .collect();
    let train = blobs(&means, spec.train_per_class, &mut rng)?;
    let test = blobs(&means, spec.test_per_class, &mut rng)?;
    let mut teacher = fit_logistic_regression(&train, spec.num_classes, &spec.teacher_fit)?;
    for v in teacher.weights.iter_mut().chain(teacher.bias.iter_mut()) {
        *v = f64::from(*v as f32);
    }

    let distilled = match spec.distilled {
        DistilledSource::Noise { scale } => {
            let stats = compute_class_stats(&train)?;
            let mut rows = Vec::new();
            let mut labels = Vec::new();
            for (c, mu) in stats.class_means.iter().enumerate() {
                for _ in 0..spec.ipc {
                    rows.push(
                        mu.iter()
                            .zip(normal_vec(&mut rng, spec.dim))
                            .map(|(m, e)| m + scale * e)
                            .collect(),
                    );
                    labels.push(c as u32);
                }
            }
            FeatureMatrix::new(spec.dim, spec.num_classes, rows, labels)?
        }
        DistilledSource::Synth { mode, config } => {
            let stats = compute_class_stats(&train)?;
            let cfg = SynthConfig {
                batch_size: spec.ipc,
                seed: config.seed ^ spec.seed,
                ..config
            };
            synthesize_dataset(&teacher, &stats, &cfg, mode)?
        }
    }
    .round_to_f32();

    Ok(Task {
        spec: *spec,
        train,
        test,
        distilled,
        teacher,
        degenerate: spec.separation == 0.0,
    })
}

impl Task {
    /// Writes `train.sfmx`, `test.sfmx`, `distilled.sfmx`, `teacher.json` and
    /// `task.json` into `dir`, creating it if needed.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.train.write(dir.join("train.sfmx"))?;
        self.test.write(dir.join("test.sfmx"))?;
        self.distilled.write(dir.join("distilled.sfmx"))?;
        std::fs::write(
            dir.join("teacher.json"),
            serde_json::to_string_pretty(&self.teacher)? + "\n",
        )?;
        std::fs::write(
            dir.join("task.json"),
            serde_json::to_string_pretty(&self.spec)? + "\n",
        )?;
        Ok(())
    }

    /// Reads a directory written by [`Task::write_dir`].
    pub fn read_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let spec: TaskSpec = serde_json::from_slice(&std::fs::read(dir.join("task.json"))?)?;
        let teacher: LinearModel =
            serde_json::from_slice(&std::fs::read(dir.join("teacher.json"))?)?;
        teacher.validate()?;
        let task = Task {
            spec,
            train: FeatureMatrix::read(dir.join("train.sfmx"))?,
            test: FeatureMatrix::read(dir.join("test.sfmx"))?,
            distilled: FeatureMatrix::read(dir.join("distilled.sfmx"))?,
            teacher,
            degenerate: spec.separation == 0.0,
        };
        for (name, m) in [
            ("train", &task.train),
            ("test", &task.test),
            ("distilled", &task.distilled),
        ] {
            if m.dim() != task.teacher.dim || m.num_classes() != task.teacher.num_classes {
                return Err(Error::Format(format!(
                    "{name}.sfmx does not match the teacher's shape"
                )));
            }
        }
        Ok(task)
    }
}

/// Feature-space augmentation applied to distilled sample `x`.
pub fn augment(x: &[f64], partner: &[f64], crop: &[f32; 4], flip: bool, lambda: f32) -> Vec<f64> {
    let lambda = f64::from(lambda);
    let sign = if flip { -1.0 } else { 1.0 };
    x.iter()
        .zip(partner)
        .enumerate()
        .map(|(j, (a, b))| {
            let mixed = lambda * a + (1.0 - lambda) * b;
            let (s, t) = if j % 2 == 0 {
                (crop[0], crop[1])
            } else {
                (crop[2], crop[3])
            };
            sign * (f64::from(s) * mixed + f64::from(t))
        })
        .collect()
}

/// Augmented input of sample `row` of `record`, rebuilt from stored parameters.
pub fn reconstruct_input(record: &BatchRecord, row: usize, distilled: &FeatureMatrix) -> Vec<f64> {
    augment(
        distilled.row(record.image_indices[row] as usize),
        distilled.row(record.cutmix_partners[row] as usize),
        &record.crops[row],
        record.flips[row],
        record.cutmix_strength,
    )
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Options for [`relabel`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelabelConfig {
    pub total_epochs: usize,
    pub pruning_rate: f64,
    pub batch_size: usize,
    /// 0 keeps full logits.
    pub top_k: usize,
    pub seed: u64,
}

impl Default for RelabelConfig {
    fn default() -> Self {
        Self {
            total_epochs: 300,
            pruning_rate: 0.9,
            batch_size: 10,
            top_k: 0,
            seed: 0,
        }
    }
}

impl RelabelConfig {
    pub fn plan(&self, dataset_size: usize) -> Result<PrunePlan> {
        prune_plan(
            self.total_epochs,
            self.pruning_rate,
            usable_batches(dataset_size, self.batch_size)?,
        )
    }
}

/// Generates the retained epochs of augmentation parameters and teacher
/// logits. Each epoch draws from its own random stream, so a more heavily
/// pruned store is a prefix of a less pruned one.
pub fn relabel(
    distilled: &FeatureMatrix,
    teacher: &LinearModel,
    cfg: &RelabelConfig,
) -> Result<LabelStore> {
    let c = teacher.num_classes;
    if cfg.top_k > c {
        return Err(invalid(format!("top-k {} exceeds C = {c}", cfg.top_k)));
    }
    if distilled.dim() != teacher.dim {
        return Err(invalid("teacher and distilled set disagree on dimension"));
    }
    let plan = cfg.plan(distilled.len())?;
    let n = distilled.len();
    let b = cfg.batch_size;
    let beta = Beta::new(1.0, 1.0).expect("valid beta parameters");
    let mut batches = Vec::with_capacity(plan.retained_batches());
    for epoch in 0..plan.retained_epochs {
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut order: Vec<u32> = (0..n as u32).collect();
        for i in (1..n).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        for batch in 0..plan.batches_per_epoch {
            let image_indices = order[batch * b..(batch + 1) * b].to_vec();
            let lambda = beta.sample(&mut rng) as f32;
            let mut crops = Vec::with_capacity(b);
            let mut flips = Vec::with_capacity(b);
            let mut partners = Vec::with_capacity(b);
            for _ in 0..b {
                crops.push([
                    rng.random_range(0.75f32..1.25),
                    rng.random_range(-0.5f32..0.5),
                    rng.random_range(0.75f32..1.25),
                    rng.random_range(-0.5f32..0.5),
                ]);
                flips.push(rng.random_bool(0.5));
                partners.push(rng.random_range(0..n as u32));
            }
            let mut record = BatchRecord {
                epoch: epoch as u32,
                batch: batch as u32,
                image_indices,
                crops,
                flips,
                cutmix_partners: partners,
                cutmix_strength: lambda,
                cutmix_bbox: [0; 4],
                labels: BatchLabels::Full(Vec::new()),
            };
            let logits: Vec<Vec<f64>> = (0..b)
                .map(|row| teacher.logits_raw(&reconstruct_input(&record, row, distilled)))
                .collect();
            record.labels = if cfg.top_k == 0 {
                BatchLabels::Full(logits.iter().flatten().map(|&v| v as f32).collect())
            } else {
                let mut indices = Vec::with_capacity(b * cfg.top_k);
                let mut values = Vec::with_capacity(b * cfg.top_k);
                for z in logits {
                    // Quantize the f32 values that will be stored so the stored
                    // order is exactly the canonical order.
                    let z32: Vec<f64> = z.iter().map(|&v| f64::from(v as f32)).collect();
                    let q = topk_quantize(&crate::logits::LogitVector::new(z32)?, cfg.top_k)?;
                    indices.extend_from_slice(q.indices());
                    values.extend(q.values().iter().map(|&v| v as f32));
                }
                BatchLabels::Quantized { indices, values }
            };
            batches.push(record);
        }
    }
    let shape = StoreShape {
        num_classes: c,
        batch_size: b,
        total_epochs: plan.total_epochs,
        retained_epochs: plan.retained_epochs,
        batches_per_epoch: plan.batches_per_epoch,
        k: cfg.top_k,
    };
    LabelStore::new(shape, batches)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Anneal the teacher temperature with `schedule`; otherwise use `fixed_tau`.
    pub dkr: bool,
    /// Calibrate the student temperature on the last batch of every epoch.
    pub ca: bool,
    pub fixed_tau: f64,
    pub schedule: TemperatureSchedule,
    pub grid: TemperatureGrid,
    /// Multiply KD gradients by the student temperature squared.
    pub tau_squared: bool,
    /// Mix this much uniform mass into the teacher distribution.
    pub label_smoothing: f64,
    /// Reshuffle the order of stored epochs on every pass instead of cycling.
    pub shuffle_reuse: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            dkr: true,
            ca: true,
            fixed_tau: 2.0,
            schedule: TemperatureSchedule::default(),
            grid: TemperatureGrid::default(),
            tau_squared: false,
            label_smoothing: 0.0,
            shuffle_reuse: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning rate must be > 0"));
        }
        if self.fixed_tau.is_nan() || self.fixed_tau <= 0.0 {
            return Err(invalid("fixed_tau must be > 0"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(invalid("label smoothing must be in [0, 1)"));
        }
        self.schedule.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainResult {
    pub epoch_loss: Vec<f64>,
    /// Teacher temperature used at each epoch.
    pub teacher_tau: Vec<f64>,
    /// Student temperature applied at each epoch.
    pub student_tau: Vec<f64>,
    /// Temperature found at the end of each epoch (applied at the next one).
    pub calibrated_tau: Vec<Option<f64>>,
    /// Stored epoch replayed at each training epoch.
    pub stored_epoch: Vec<usize>,
    pub final_accuracy: f64,
    pub storage_bytes: usize,
    pub compression: CompressionReport,
    pub student: LinearModel,
}

impl TrainResult {
    /// Mean of the calibrated temperatures (epochs where calibration ran).
    pub fn mean_calibrated_tau(&self) -> Option<f64> {
        let v: Vec<f64> = self.calibrated_tau.iter().flatten().copied().collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

fn teacher_probs(
    store: &LabelStore,
    rec: &BatchRecord,
    row: usize,
    tau: f64,
    smoothing: f64,
) -> Result<SparseProbs> {
    let p = quantized_probs(&store.quantized_logits(rec, row)?, tau)?;
    if smoothing == 0.0 {
        return Ok(p);
    }
    let c = store.shape.num_classes;
    let mut dense = vec![smoothing / c as f64; c];
    for (i, pi) in p.iter() {
        dense[i] += (1.0 - smoothing) * pi;
    }
    SparseProbs::new(c, (0..c as u32).collect(), dense)
}

/// Trains a linear student from `store` for the store's `T` epochs.
pub fn train_student(store: &LabelStore, task: &Task, cfg: &TrainConfig) -> Result<TrainResult> {
    cfg.validate()?;
    let distilled = &task.distilled;
    let shape = store.shape;
    if shape.num_classes != distilled.num_classes() {
        return Err(invalid(format!(
            "store has {} classes, task has {}",
            shape.num_classes,
            distilled.num_classes()
        )));
    }
    let n = distilled.len() as u32;
    if store.batches.iter().any(|r| {
        r.image_indices
            .iter()
            .chain(&r.cutmix_partners)
            .any(|&i| i >= n)
    }) {
        return Err(invalid("store references images outside the distilled set"));
    }

    let plan = store.plan();
    let t_total = shape.total_epochs;
    let mut model = LinearModel::zeros(shape.num_classes, distilled.dim());
    let mut grad = LinearModel::zeros(shape.num_classes, distilled.dim());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pass_order: Vec<usize> = (0..plan.retained_epochs).collect();

    let mut result = TrainResult {
        epoch_loss: Vec::with_capacity(t_total),
        teacher_tau: Vec::with_capacity(t_total),
        student_tau: Vec::with_capacity(t_total),
        calibrated_tau: Vec::with_capacity(t_total),
        stored_epoch: Vec::with_capacity(t_total),
        final_accuracy: 0.0,
        storage_bytes: shape.file_bytes(),
        compression: compression_report(&shape_breakdown(&shape), &Baseline::of(&shape))?,
        student: model.clone(),
    };
    let mut student_tau = 1.0;
    let inv_b = 1.0 / shape.batch_size as f64;

    for epoch in 0..t_total {
        let tau_t = if cfg.dkr {
            teacher_temperature(&cfg.schedule, epoch)
        } else {
            cfg.fixed_tau
        };
        let slot = plan.reuse(epoch);
        if cfg.shuffle_reuse && slot == 0 && epoch > 0 {
            for i in (1..pass_order.len()).rev() {
                pass_order.swap(i, shuffle_rng.random_range(0..=i));
            }
        }
        let stored = if cfg.shuffle_reuse {
            pass_order[slot]
        } else {
            slot
        };
        let lr = cfg.learning_rate * 0.5 * (1.0 + (PI * epoch as f64 / t_total as f64).cos());
        let grad_scale = if cfg.tau_squared {
            student_tau * student_tau
        } else {
            1.0
        };

        let mut epoch_loss = 0.0;
        for b in 0..shape.batches_per_epoch {
            let rec = store.batch(stored, b);
            grad.weights.iter_mut().for_each(|g| *g = 0.0);
            grad.bias.iter_mut().for_each(|g| *g = 0.0);
            let mut batch_loss = 0.0;
            for row in 0..shape.batch_size {
                let x = reconstruct_input(rec, row, distilled);
                let p = teacher_probs(store, rec, row, tau_t, cfg.label_smoothing)?;
                let (loss, g) = kd_loss(&p, &model.logits(&x)?, student_tau)?;
                batch_loss += loss;
                grad.add_outer(&g, &x, inv_b * grad_scale);
            }
            for (w, g) in model.weights.iter_mut().zip(&grad.weights) {
                *w -= lr * g;
            }
            for (w, g) in model.bias.iter_mut().zip(&grad.bias) {
                *w -= lr * g;
            }
            epoch_loss += batch_loss * inv_b;
        }

        let calibrated = if cfg.ca {
            let rec = store.batch(stored, shape.batches_per_epoch - 1);
            let mut teacher = Vec::with_capacity(shape.batch_size);
            let mut student = Vec::with_capacity(shape.batch_size);
            for row in 0..shape.batch_size {
                teacher.push(teacher_probs(store, rec, row, tau_t, cfg.label_smoothing)?);
                student.push(model.logits(&reconstruct_input(rec, row, distilled))?);
            }
            Some(calibrate_student_temperature(&teacher, &student, &cfg.grid)?.tau_star)
        } else {
            None
        };

        log::debug!(
            "epoch {epoch}: stored {stored}, teacher tau {tau_t}, student tau {student_tau}, loss {:.5}, tau* {calibrated:?}",
            epoch_loss / shape.batches_per_epoch as f64
        );
        result
            .epoch_loss
            .push(epoch_loss / shape.batches_per_epoch as f64);
        result.teacher_tau.push(tau_t);
        result.student_tau.push(student_tau);
        result.calibrated_tau.push(calibrated);
        result.stored_epoch.push(stored);
        if let Some(t) = calibrated {
            student_tau = t;
        }
    }
    result.final_accuracy = model.accuracy(&task.test);
    result.student = model;
    Ok(result)
}

/// One point of a pruning x quantization sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoRow {
    pub pruning_rate: f64,
    pub top_k: usize,
    pub storage_bytes: usize,
    pub theoretical_ratio: f64,
    pub actual_ratio: f64,
    pub accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    pub non_dominated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoTable {
    /// Sorted by storage ascending.
    pub rows: Vec<ParetoRow>,
}

/// `a` dominates `b`: no more storage, no less accuracy, and strictly better
/// in at least one of the two.
pub fn dominates(a: &ParetoRow, b: &ParetoRow) -> bool {
    a.storage_bytes <= b.storage_bytes
        && a.mean_accuracy >= b.mean_accuracy
        && (a.storage_bytes < b.storage_bytes || a.mean_accuracy > b.mean_accuracy)
}

/// Marks every row not dominated by another row.
pub fn mark_frontier(rows: &mut [ParetoRow]) {
    let flags: Vec<bool> = rows
        .iter()
        .map(|r| !rows.iter().any(|o| dominates(o, r)))
        .collect();
    for (r, f) in rows.iter_mut().zip(flags) {
        r.non_dominated = f;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub total_epochs: usize,
    pub batch_size: usize,
    /// (pruning rate, top-k) pairs; top-k 0 means full labels.
    pub configs: Vec<(f64, usize)>,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    /// Worker threads; 0 uses the rayon default.
    pub jobs: usize,
}

/// Relabels and trains every configuration for every seed on `task`.
pub fn pareto_sweep(task: &Task, sweep: &SweepConfig) -> Result<ParetoTable> {
    use rayon::prelude::*;
    if sweep.configs.is_empty() {
        return Err(invalid("sweep grid is empty"));
    }
    if sweep.seeds.is_empty() {
        return Err(invalid("sweep needs at least one seed"));
    }
    let jobs: Vec<(usize, u64)> = (0..sweep.configs.len())
        .flat_map(|c| sweep.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let run = |&(ci, seed): &(usize, u64)| -> Result<(usize, usize, CompressionReport, f64)> {
        let (p, k) = sweep.configs[ci];
        let store = relabel(
            &task.distilled,
            &task.teacher,
            &RelabelConfig {
                total_epochs: sweep.total_epochs,
                pruning_rate: p,
                batch_size: sweep.batch_size,
                top_k: k,
                seed,
            },
        )?;
        let cfg = TrainConfig {
            seed,
            ..sweep.train.clone()
        };
        let r = train_student(&store, task, &cfg)?;
        Ok((ci, r.storage_bytes, r.compression, r.final_accuracy))
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(sweep.jobs)
        .build()
        .map_err(|e| invalid(format!("cannot build thread pool: {e}")))?;
    let results = pool.install(|| jobs.par_iter().map(run).collect::<Result<Vec<_>>>())?;

    let mut rows: Vec<ParetoRow> = sweep
        .configs
        .iter()
        .enumerate()
        .map(|(ci, &(p, k))| {
            let mine: Vec<_> = results.iter().filter(|r| r.0 == ci).collect();
            let accuracies: Vec<f64> = mine.iter().map(|r| r.3).collect();
            ParetoRow {
                pruning_rate: p,
                top_k: k,
                storage_bytes: mine[0].1,
                theoretical_ratio: mine[0].2.theoretical_z_ratio,
                actual_ratio: mine[0].2.actual_ratio,
                mean_accuracy: accuracies.iter().sum::<f64>() / accuracies.len() as f64,
                accuracies,
                non_dominated: false,
            }
        })
        .collect();
    mark_frontier(&mut rows);
    rows.sort_by(|a, b| {
        a.storage_bytes
            .cmp(&b.storage_bytes)
            .then(a.pruning_rate.total_cmp(&b.pruning_rate))
            .then(a.top_k.cmp(&b.top_k))
    });
    Ok(ParetoTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::encode_store;

    fn small_task(seed: u64) -> Task {
        generate_task(&TaskSpec {
            num_classes: 4,
            dim: 6,
            train_per_class: 40,
            test_per_class: 50,
            ipc: 5,
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    fn relabel_cfg(p: f64, k: usize) -> RelabelConfig {
        RelabelConfig {
            total_epochs: 40,
            pruning_rate: p,
            batch_size: 4,
            top_k: k,
            seed: 7,
        }
    }

    #[test]
    fn task_is_deterministic() {
        assert_eq!(small_task(3), small_task(3));
        assert_ne!(small_task(3).train, small_task(4).train);
        let t = small_task(1);
        assert_eq!(t.distilled.len(), 20);
        assert_eq!(t.train.len(), 160);
    }

    #[test]
    fn task_directory_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let task = small_task(5);
        task.write_dir(dir.path()).unwrap();
        assert_eq!(Task::read_dir(dir.path()).unwrap(), task);
        std::fs::write(dir.path().join("teacher.json"), "{}").unwrap();
        assert!(Task::read_dir(dir.path()).is_err());
    }

    #[test]
    fn zero_separation_is_flagged() {
        let t = generate_task(&TaskSpec {
            separation: 0.0,
            num_classes: 3,
            dim: 2,
            ..Default::default()
        })
        .unwrap();
        assert!(t.degenerate);
    }

    #[test]
    fn stored_labels_match_teacher_on_reconstructed_inputs() {
        let task = small_task(0);
        for k in [0, 2] {
            let store = relabel(&task.distilled, &task.teacher, &relabel_cfg(0.5, k)).unwrap();
            for rec in store.batches.iter().step_by(3) {
                for row in 0..store.shape.batch_size {
                    let x = reconstruct_input(rec, row, &task.distilled);
                    let z: Vec<f64> = task
                        .teacher
                        .logits_raw(&x)
                        .iter()
                        .map(|&v| f64::from(v as f32))
                        .collect();
                    let stored = store.quantized_logits(rec, row).unwrap();
                    for (&i, &v) in stored.indices().iter().zip(stored.values()) {
                        assert!((z[i as usize] - v).abs() < 1e-6);
                    }
                    if k > 0 {
                        let mut sorted = z.clone();
                        sorted.sort_by(|a, b| b.total_cmp(a));
                        assert_eq!(stored.values()[0], sorted[0]);
                    }
                }
            }
        }
    }

    #[test]
    fn heavier_pruning_is_a_prefix() {
        let task = small_task(0);
        let light = relabel(&task.distilled, &task.teacher, &relabel_cfg(0.5, 0)).unwrap();
        let heavy = relabel(&task.distilled, &task.teacher, &relabel_cfg(0.9, 0)).unwrap();
        assert_eq!(light.shape.retained_epochs, 20);
        assert_eq!(heavy.shape.retained_epochs, 4);
        assert_eq!(&light.batches[..heavy.batches.len()], &heavy.batches[..]);
    }

    #[test]
    fn single_retained_epoch_when_pruning_all_but_one() {
        let task = small_task(0);
        let store = relabel(
            &task.distilled,
            &task.teacher,
            &relabel_cfg(1.0 - 1.0 / 40.0, 0),
        )
        .unwrap();
        assert_eq!(store.shape.retained_epochs, 1);
        assert_eq!(store.shape.batches_per_epoch, 4);
        let r = train_student(&store, &task, &TrainConfig::default()).unwrap();
        assert!(r.stored_epoch.iter().all(|&e| e == 0));
    }

    #[test]
    fn training_is_reproducible_and_traced() {
        let task = small_task(2);
        let store = relabel(&task.distilled, &task.teacher, &relabel_cfg(0.9, 0)).unwrap();
        let cfg = TrainConfig::default();
        let a = train_student(&store, &task, &cfg).unwrap();
        let b = train_student(&store, &task, &cfg).unwrap();
        assert_eq!(a, b);

        assert_eq!(a.teacher_tau.len(), 40);
        for (e, &t) in a.teacher_tau.iter().enumerate() {
            assert_eq!(t, teacher_temperature(&cfg.schedule, e));
        }
        assert_eq!(a.student_tau[0], 1.0);
        for (e, c) in a.calibrated_tau.iter().enumerate() {
            let c = c.unwrap();
            assert!(cfg.grid.values().contains(&c));
            if e + 1 < a.student_tau.len() {
                assert_eq!(a.student_tau[e + 1], c);
            }
        }
        assert_eq!(a.stored_epoch, (0..40).map(|e| e % 4).collect::<Vec<_>>());
        assert_eq!(a.storage_bytes, encode_store(&store).unwrap().len());
    }

    #[test]
    fn fixed_temperature_without_dkr_or_ca() {
        let task = small_task(2);
        let store = relabel(&task.distilled, &task.teacher, &relabel_cfg(0.0, 0)).unwrap();
        let cfg = TrainConfig {
            dkr: false,
            ca: false,
            ..Default::default()
        };
        let r = train_student(&store, &task, &cfg).unwrap();
        assert!(r.teacher_tau.iter().all(|&t| t == 2.0));
        assert!(r.student_tau.iter().all(|&t| t == 1.0));
        assert!(r.calibrated_tau.iter().all(Option::is_none));
        assert!(r.epoch_loss.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn full_labels_on_separable_task_reach_high_accuracy() {
        for seed in 0..5 {
            let task = generate_task(&TaskSpec {
                num_classes: 4,
                dim: 8,
                separation: 8.0,
                seed,
                ..Default::default()
            })
            .unwrap();
            let store = relabel(
                &task.distilled,
                &task.teacher,
                &RelabelConfig {
                    total_epochs: 60,
                    pruning_rate: 0.0,
                    batch_size: 10,
                    top_k: 0,
                    seed,
                },
            )
            .unwrap();
            let cfg = TrainConfig {
                dkr: false,
                ca: false,
                seed,
                ..Default::default()
            };
            let r = train_student(&store, &task, &cfg).unwrap();
            assert!(r.final_accuracy >= 0.9, "seed {seed}: {}", r.final_accuracy);
        }
    }

    #[test]
    fn shuffled_reuse_visits_every_stored_epoch_per_pass() {
        let task = small_task(1);
        let store = relabel(&task.distilled, &task.teacher, &relabel_cfg(0.9, 0)).unwrap();
        let cfg = TrainConfig {
            shuffle_reuse: true,
            ..Default::default()
        };
        let r = train_student(&store, &task, &cfg).unwrap();
        for pass in r.stored_epoch.chunks(4) {
            let mut p = pass.to_vec();
            p.sort();
            assert_eq!(p, vec![0, 1, 2, 3]);
        }
    }

    #[test]
    fn rejects_mismatched_store() {
        let task = small_task(0);
        let other = generate_task(&TaskSpec {
            num_classes: 5,
            dim: 6,
            ipc: 4,
            ..Default::default()
        })
        .unwrap();
        let store = relabel(&other.distilled, &other.teacher, &relabel_cfg(0.5, 0)).unwrap();
        assert!(train_student(&store, &task, &TrainConfig::default()).is_err());
        assert!(relabel(&task.distilled, &task.teacher, &relabel_cfg(0.5, 5)).is_err());
    }

    #[test]
    fn frontier_flags() {
        let row = |s: usize, a: f64| ParetoRow {
            pruning_rate: 0.0,
            top_k: 0,
            storage_bytes: s,
            theoretical_ratio: 1.0,
            actual_ratio: 1.0,
            accuracies: vec![a],
            mean_accuracy: a,
            non_dominated: false,
        };
        let mut rows = vec![row(100, 0.9), row(50, 0.8), row(60, 0.7), row(50, 0.8)];
        mark_frontier(&mut rows);
        let flags: Vec<bool> = rows.iter().map(|r| r.non_dominated).collect();
        assert_eq!(flags, vec![true, true, false, true]);
        let mut one = vec![row(10, 0.1)];
        mark_frontier(&mut one);
        assert!(one[0].non_dominated);
    }

    #[test]
    fn sweep_rejects_empty_grid() {
        let task = small_task(0);
        let sweep = SweepConfig {
            total_epochs: 10,
            batch_size: 4,
            configs: vec![],
            seeds: vec![0],
            train: TrainConfig::default(),
            jobs: 1,
        };
        assert!(pareto_sweep(&task, &sweep).is_err());
    }
}
