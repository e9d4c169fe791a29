//! Diversity diagnostics for synthetic sets: within-class cosine similarity
//! and the biased Gaussian-kernel MMD estimator.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::features::FeatureMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCosine {
    pub class_id: u32,
    pub pairs: usize,
    pub mean: f64,
    /// Population standard deviation over the class's pair values.
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineReport {
    pub per_class: Vec<ClassCosine>,
    /// Mean of the per-class means.
    pub overall_mean: f64,
    /// Population standard deviation of the per-class means.
    pub overall_std: f64,
    /// Classes with fewer than two samples.
    pub skipped_classes: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub cosine: CosineReport,
    /// Present when a reference set was supplied.
    pub mmd_squared: Option<f64>,
    pub bandwidth: Option<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean and spread of cosine similarity over all unordered within-class pairs.
pub fn within_class_cosine(features: &FeatureMatrix) -> Result<CosineReport> {
    let norms: Vec<f64> = features.rows().iter().map(|r| dot(r, r).sqrt()).collect();
    if let Some(i) = norms.iter().position(|&n| n == 0.0) {
        return Err(invalid(format!("row {i} has zero norm")));
    }
    let mut per_class = Vec::new();
    let mut skipped = Vec::new();
    for (class, members) in features.class_indices().into_iter().enumerate() {
        if members.len() < 2 {
            if !members.is_empty() {
                warn!("class {class} has a single sample; skipped for cosine similarity");
            }
            skipped.push(class as u32);
            continue;
        }
        let mut sims = Vec::with_capacity(members.len() * (members.len() - 1) / 2);
        for (a, &i) in members.iter().enumerate() {
            for &j in &members[a + 1..] {
                let c = dot(features.row(i), features.row(j)) / (norms[i] * norms[j]);
                sims.push(c.clamp(-1.0, 1.0));
            }
        }
        let (mean, std) = mean_std(&sims);
        per_class.push(ClassCosine {
            class_id: class as u32,
            pairs: sims.len(),
            mean,
            std,
        });
    }
    if per_class.is_empty() {
        return Err(invalid("no class has at least two samples"));
    }
    let means: Vec<f64> = per_class.iter().map(|c| c.mean).collect();
    let (overall_mean, overall_std) = mean_std(&means);
    Ok(CosineReport {
        per_class,
        overall_mean,
        overall_std,
        skipped_classes: skipped,
    })
}

/// Kernel bandwidth for [`mmd_squared`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Bandwidth {
    Fixed(f64),
    /// Median pairwise distance over the pooled sample; 1.0 if that is zero.
    Median,
}

/// Median of all pairwise Euclidean distances over `X ∪ Y`.
pub fn median_heuristic(x: &FeatureMatrix, y: &FeatureMatrix) -> f64 {
    let pooled: Vec<&[f64]> = x.rows().iter().chain(y.rows()).map(Vec::as_slice).collect();
    let mut d = Vec::with_capacity(pooled.len() * pooled.len().saturating_sub(1) / 2);
    for (a, u) in pooled.iter().enumerate() {
        for v in &pooled[a + 1..] {
            d.push(sq_dist(u, v).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d.len();
    let median = if m % 2 == 1 {
        d[m / 2]
    } else {
        0.5 * (d[m / 2 - 1] + d[m / 2])
    };
    if median > 0.0 {
        median
    } else {
        1.0
    }
}

fn mean_kernel(a: &FeatureMatrix, b: &FeatureMatrix, two_sigma_sq: f64) -> f64 {
    let mut total = 0.0;
    for u in a.rows() {
        let row: f64 = b
            .rows()
            .iter()
            .map(|v| (-sq_dist(u, v) / two_sigma_sq).exp())
            .sum();
        total += row;
    }
    total / (a.len() as f64 * b.len() as f64)
}

/// Biased MMD² estimate with kernel `exp(-|u - v|² / (2σ²))`, self-pairs
/// included. Returns the estimate and the bandwidth used.
pub fn mmd_squared(
    x: &FeatureMatrix,
    y: &FeatureMatrix,
    bandwidth: Bandwidth,
) -> Result<(f64, f64)> {
    if x.is_empty() || y.is_empty() {
        return Err(invalid("MMD needs at least one sample on each side"));
    }
    if x.dim() != y.dim() {
        return Err(invalid(format!(
            "dimension mismatch: {} vs {}",
            x.dim(),
            y.dim()
        )));
    }
    let sigma = match bandwidth {
        Bandwidth::Fixed(s) if s > 0.0 && s.is_finite() => s,
        Bandwidth::Fixed(s) => return Err(invalid(format!("bandwidth must be > 0, got {s}"))),
        Bandwidth::Median => median_heuristic(x, y),
    };
    let t = 2.0 * sigma * sigma;
    let mmd = mean_kernel(x, x, t) + mean_kernel(y, y, t) - 2.0 * mean_kernel(x, y, t);
    Ok((mmd.max(0.0), sigma))
}

/// Cosine report for `features`, plus MMD² against `reference` when given.
pub fn diversity_report(
    features: &FeatureMatrix,
    reference: Option<&FeatureMatrix>,
    bandwidth: Bandwidth,
) -> Result<DiversityReport> {
    let cosine = within_class_cosine(features)?;
    let (mmd_squared, bandwidth) = match reference {
        Some(r) => {
            let (m, s) = mmd_squared(features, r, bandwidth)?;
            (Some(m), Some(s))
        }
        None => (None, None),
    };
    Ok(DiversityReport {
        cosine,
        mmd_squared,
        bandwidth,
    })
}
