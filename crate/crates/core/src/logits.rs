//! Logit kernels: temperature softmax, top-k quantization, masked softmax over
//! the stored classes and KL divergence.
//!
//! A quantized teacher label keeps only its `k` largest pre-softmax logits.
//! Its distribution is the softmax over those `k` values with probability
//! exactly zero elsewhere ([`quantized_probs`]). [`dequantize`] zero-fills the
//! dropped classes for layout compatibility only; running [`softmax_t`] on that
//! vector would hand `e^0` mass to every dropped class.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Pre-softmax outputs over `C >= 2` classes. All entries are finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(invalid(format!(
                "logit vector needs at least 2 classes, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("non-finite logit at class {i}")));
        }
        Ok(Self(values))
    }

    pub fn from_f32(values: &[f32]) -> Result<Self> {
        Self::new(values.iter().map(|&v| f64::from(v)).collect())
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Top-k logits of one label.
///
/// Entries are ordered by value descending, then class index ascending, so
/// `values` is non-increasing and the representation is canonical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedLogits {
    num_classes: usize,
    indices: Vec<u32>,
    values: Vec<f64>,
}

impl QuantizedLogits {
    /// Validates the canonical ordering and index range.
    pub fn new(num_classes: usize, indices: Vec<u32>, values: Vec<f64>) -> Result<Self> {
        let k = indices.len();
        if num_classes < 2 {
            return Err(invalid(format!(
                "num_classes must be >= 2, got {num_classes}"
            )));
        }
        if k == 0 || k > num_classes {
            return Err(invalid(format!("k must be in [1, {num_classes}], got {k}")));
        }
        if values.len() != k {
            return Err(invalid(format!(
                "{} indices but {} values",
                k,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(invalid(format!("non-finite quantized logit {v}")));
        }
        let mut seen = vec![false; num_classes];
        for &i in &indices {
            let slot = seen.get_mut(i as usize).ok_or_else(|| {
                invalid(format!("class index {i} out of range [0, {num_classes})"))
            })?;
            if *slot {
                return Err(invalid(format!("duplicate class index {i}")));
            }
            *slot = true;
        }
        for w in 0..k.saturating_sub(1) {
            let (a, b) = (values[w], values[w + 1]);
            if a < b || (a == b && indices[w] > indices[w + 1]) {
                return Err(invalid(format!(
                    "entries {w} and {} violate (value desc, index asc) ordering",
                    w + 1
                )));
            }
        }
        Ok(Self {
            num_classes,
            indices,
            values,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn k(&self) -> usize {
        self.indices.len()
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// A distribution over `C` classes that is exactly zero off `support`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseProbs {
    num_classes: usize,
    support: Vec<u32>,
    probs: Vec<f64>,
}

impl SparseProbs {
    /// Probabilities must be strictly positive and sum to 1 within 1e-9.
    pub fn new(num_classes: usize, support: Vec<u32>, probs: Vec<f64>) -> Result<Self> {
        if support.is_empty() || support.len() != probs.len() {
            return Err(invalid(
                "support and probs must be non-empty and equally long",
            ));
        }
        let mut seen = vec![false; num_classes];
        for &i in &support {
            match seen.get_mut(i as usize) {
                Some(s) if !*s => *s = true,
                Some(_) => return Err(invalid(format!("duplicate support class {i}"))),
                None => return Err(invalid(format!("support class {i} out of range"))),
            }
        }
        if probs.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
            return Err(invalid("support probabilities must be finite and > 0"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("probabilities sum to {total}, expected 1")));
        }
        Ok(Self {
            num_classes,
            support,
            probs,
        })
    }

    /// Wraps a dense distribution, keeping every class with nonzero mass.
    pub fn from_dense(dense: &DenseProbs) -> Self {
        let (support, probs) = dense
            .probs()
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(i, &p)| (i as u32, p))
            .unzip();
        Self {
            num_classes: dense.num_classes(),
            support,
            probs,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn support(&self) -> &[u32] {
        &self.support
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.support
            .iter()
            .zip(&self.probs)
            .map(|(&i, &p)| (i as usize, p))
    }

    /// Full-length vector with zeros off support.
    pub fn to_dense_vec(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.num_classes];
        for (i, p) in self.iter() {
            out[i] = p;
        }
        out
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }
}

/// A full distribution over `C` classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseProbs(Vec<f64>);

impl DenseProbs {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
            return Err(invalid("probabilities must be finite and non-negative"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("probabilities sum to {total}, expected 1")));
        }
        Ok(Self(probs))
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn entropy(&self) -> f64 {
        -self
            .0
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!(
            "temperature must be finite and > 0, got {tau}"
        )))
    }
}

/// `log softmax(values / tau)` with max-subtraction.
pub(crate) fn log_softmax_slice(values: &[f64], tau: f64) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = values.iter().map(|&v| (v - max) / tau).collect();
    let log_norm = shifted.iter().map(|s| s.exp()).sum::<f64>().ln();
    shifted.into_iter().map(|s| s - log_norm).collect()
}

fn softmax_slice(values: &[f64], tau: f64) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|&v| ((v - max) / tau).exp()).collect();
    let norm: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / norm).collect()
}

/// `softmax(z / tau)`.
pub fn softmax_t(z: &LogitVector, tau: f64) -> Result<DenseProbs> {
    check_tau(tau)?;
    Ok(DenseProbs(softmax_slice(z.values(), tau)))
}

/// Keeps the `k` largest logits; ties go to the lower class index.
pub fn topk_quantize(z: &LogitVector, k: usize) -> Result<QuantizedLogits> {
    let c = z.num_classes();
    if k == 0 || k > c {
        return Err(invalid(format!("k must be in [1, {c}], got {k}")));
    }
    let values = z.values();
    let mut order: Vec<usize> = (0..c).collect();
    // total_cmp is a total order on finite values, and the index tiebreak makes
    // the comparator strict, so the unstable sort is deterministic.
    order.sort_unstable_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(QuantizedLogits {
        num_classes: c,
        indices: order.iter().map(|&i| i as u32).collect(),
        values: order.iter().map(|&i| values[i]).collect(),
    })
}

/// Full-length layout with zeros at dropped classes.
///
/// This is not the teacher distribution; use [`quantized_probs`] for that.
pub fn dequantize(q: &QuantizedLogits) -> LogitVector {
    let mut out = vec![0.0; q.num_classes];
    for (&i, &v) in q.indices.iter().zip(&q.values) {
        out[i as usize] = v;
    }
    LogitVector(out)
}

/// Softmax over the stored top-k values only; dropped classes get exactly 0.
pub fn quantized_probs(q: &QuantizedLogits, tau: f64) -> Result<SparseProbs> {
    check_tau(tau)?;
    Ok(SparseProbs {
        num_classes: q.num_classes,
        support: q.indices.clone(),
        probs: softmax_slice(&q.values, tau),
    })
}

fn check_same_classes(p: &SparseProbs, c: usize) -> Result<()> {
    if p.num_classes != c {
        return Err(invalid(format!(
            "class count mismatch: {} vs {}",
            p.num_classes, c
        )));
    }
    Ok(())
}

/// `KL(p || q) = sum over support(p) of p_i ln(p_i / q_i)`.
pub fn kl_div(p: &SparseProbs, q: &DenseProbs) -> Result<f64> {
    check_same_classes(p, q.num_classes())?;
    let q = q.probs();
    // Support entries that underflowed to 0 contribute 0 ln 0 = 0.
    Ok(p.iter()
        .filter(|&(_, pi)| pi > 0.0)
        .map(|(i, pi)| pi * (pi / q[i]).ln())
        .sum())
}

/// `KL(p || softmax(z / tau))` evaluated through log-softmax, which stays
/// finite when the student distribution underflows on some support class.
pub fn kl_div_logits(p: &SparseProbs, z: &LogitVector, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    check_same_classes(p, z.num_classes())?;
    let log_q = log_softmax_slice(z.values(), tau);
    Ok(p.iter()
        .filter(|&(_, pi)| pi > 0.0)
        .map(|(i, pi)| pi * (pi.ln() - log_q[i]))
        .sum())
}

/// Logit gap `tau_hat * ln(p_i / p_j)` that makes a student at temperature
/// `tau_hat` reproduce the ratio `p_i / p_j`.
pub fn optimal_logit_gap(p_i: f64, p_j: f64, tau_hat: f64) -> Result<f64> {
    if !(p_i > 0.0 && p_j > 0.0 && tau_hat > 0.0) {
        return Err(invalid(format!(
            "inputs must be positive: p_i={p_i}, p_j={p_j}, tau_hat={tau_hat}"
        )));
    }
    Ok(tau_hat * (p_i / p_j).ln())
}

/// Largest student temperature that can match a probability ratio `r` when
/// logit gaps are capped at `delta_z_max`: `delta_z_max / ln r`.
pub fn temperature_upper_bound(delta_z_max: f64, r: f64) -> Result<f64> {
    if delta_z_max.is_nan() || delta_z_max <= 0.0 {
        return Err(invalid(format!(
            "delta_z_max must be > 0, got {delta_z_max}"
        )));
    }
    if r.is_nan() || r <= 1.0 {
        return Err(invalid(format!(
            "ratio must be > 1 for a finite bound, got {r}"
        )));
    }
    Ok(delta_z_max / r.ln())
}

/// Offset (in units of `tau_hat`) placed between the smallest support logit
/// and every off-support logit by [`matched_student_logits`].
pub const OFF_SUPPORT_MARGIN: f64 = 50.0;

/// Student logits whose in-support gaps equal [`optimal_logit_gap`] at
/// `tau_hat`, with off-support classes pushed `50 * tau_hat` below the
/// smallest support logit.
///
/// `KL(p || softmax(z / tau_hat))` for the result is of order `C * e^-50`.
pub fn matched_student_logits(p: &SparseProbs, tau_hat: f64) -> Result<LogitVector> {
    check_tau(tau_hat)?;
    let support_logits: Vec<f64> = p.probs().iter().map(|&pi| tau_hat * pi.ln()).collect();
    let floor =
        support_logits.iter().copied().fold(f64::INFINITY, f64::min) - OFF_SUPPORT_MARGIN * tau_hat;
    let mut z = vec![floor; p.num_classes()];
    for (&i, &zi) in p.support().iter().zip(&support_logits) {
        z[i as usize] = zi;
    }
    LogitVector::new(z)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lv(v: &[f64]) -> LogitVector {
        LogitVector::new(v.to_vec()).unwrap()
    }

    #[test]
    #[allow(clippy::excessive_precision)]
    fn softmax_examples() {
        let p = softmax_t(&lv(&[0.0, 0.0]), 1.0).unwrap();
        assert_eq!(p.probs(), &[0.5, 0.5]);

        let p = softmax_t(&lv(&[2f64.ln(), 0.0]), 1.0).unwrap();
        assert!((p.probs()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.probs()[1] - 1.0 / 3.0).abs() < 1e-15);

        // 50-digit reference values.
        let p = softmax_t(&lv(&[4.0, 2.0, 0.0]), 2.0).unwrap();
        let expected = [
            0.665_240_955_774_821_89,
            0.244_728_471_054_797_65,
            0.090_030_573_170_380_458,
        ];
        for (a, b) in p.probs().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(softmax_t(&lv(&[1.0, 2.0]), 0.0).is_err());
        assert!(softmax_t(&lv(&[1.0, 2.0]), -1.0).is_err());
        assert!(LogitVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(LogitVector::new(vec![f64::INFINITY, 0.0]).is_err());
        assert!(LogitVector::new(vec![1.0]).is_err());
    }

    #[test]
    fn softmax_handles_large_logits() {
        let p = softmax_t(&lv(&[1000.0, 999.0, -1000.0]), 1.0).unwrap();
        assert!(p.probs().iter().all(|x| x.is_finite()));
        assert!((p.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn topk_examples() {
        let q = topk_quantize(&lv(&[3.0, 1.0, 2.0]), 2).unwrap();
        assert_eq!(q.indices(), &[0, 2]);
        assert_eq!(q.values(), &[3.0, 2.0]);

        let q = topk_quantize(&lv(&[5.0, 5.0, 1.0]), 1).unwrap();
        assert_eq!(q.indices(), &[0]);
        assert_eq!(q.values(), &[5.0]);

        let q = topk_quantize(&lv(&[1.0, 5.0, 5.0, 5.0]), 3).unwrap();
        assert_eq!(q.indices(), &[1, 2, 3]);

        let z = lv(&[0.3, -1.2, 7.0, 0.3]);
        assert_eq!(dequantize(&topk_quantize(&z, 4).unwrap()), z);
    }

    #[test]
    fn topk_rejects_out_of_range_k() {
        let z = lv(&[1.0, 2.0, 3.0]);
        assert!(topk_quantize(&z, 0).is_err());
        assert!(topk_quantize(&z, 4).is_err());
    }

    #[test]
    fn dequantize_examples() {
        let q = QuantizedLogits::new(3, vec![0, 2], vec![3.0, 2.0]).unwrap();
        assert_eq!(dequantize(&q).values(), &[3.0, 0.0, 2.0]);
        let q = QuantizedLogits::new(4, vec![1], vec![-1.0]).unwrap();
        assert_eq!(dequantize(&q).values(), &[0.0, -1.0, 0.0, 0.0]);
    }

    #[test]
    fn quantized_logits_validation() {
        assert!(QuantizedLogits::new(3, vec![0, 0], vec![1.0, 1.0]).is_err());
        assert!(QuantizedLogits::new(3, vec![3], vec![1.0]).is_err());
        assert!(QuantizedLogits::new(3, vec![0, 1], vec![1.0, 2.0]).is_err());
        assert!(QuantizedLogits::new(3, vec![1, 0], vec![1.0, 1.0]).is_err());
        assert!(QuantizedLogits::new(3, vec![0, 1], vec![1.0, 1.0]).is_ok());
        assert!(QuantizedLogits::new(3, vec![], vec![]).is_err());
    }

    #[test]
    fn quantized_probs_examples() {
        let q = QuantizedLogits::new(4, vec![0, 2], vec![3f64.ln(), 0.0]).unwrap();
        let p = quantized_probs(&q, 1.0).unwrap();
        assert_eq!(p.support(), &[0, 2]);
        assert!((p.probs()[0] - 0.75).abs() < 1e-15);
        assert!((p.probs()[1] - 0.25).abs() < 1e-15);
        assert_eq!(p.to_dense_vec()[1], 0.0);
        assert_eq!(p.to_dense_vec()[3], 0.0);

        let q = QuantizedLogits::new(5, vec![3], vec![-2.0]).unwrap();
        let p = quantized_probs(&q, 0.3).unwrap();
        assert_eq!(p.probs(), &[1.0]);

        assert!(quantized_probs(&q, 0.0).is_err());
    }

    #[test]
    fn masked_softmax_differs_from_zero_filled_softmax() {
        let z = lv(&[4.0, 3.0, -2.0, -5.0]);
        let q = topk_quantize(&z, 2).unwrap();
        let masked = quantized_probs(&q, 1.0).unwrap().to_dense_vec();
        let zero_filled = softmax_t(&dequantize(&q), 1.0).unwrap();
        assert_eq!(masked[2], 0.0);
        assert!(zero_filled.probs()[2] > 0.0);
    }

    #[test]
    fn kl_examples() {
        let q = softmax_t(&lv(&[0.1, -0.4, 2.0]), 1.0).unwrap();
        let p = SparseProbs::from_dense(&q);
        assert!(kl_div(&p, &q).unwrap().abs() < 1e-15);

        let p = SparseProbs::new(2, vec![0], vec![1.0]).unwrap();
        let q = DenseProbs::new(vec![0.5, 0.5]).unwrap();
        assert!((kl_div(&p, &q).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);

        // 50-digit reference value.
        let p = SparseProbs::new(4, vec![0, 1], vec![0.75, 0.25]).unwrap();
        let z = lv(&[2.0, 1.0, 0.0, 0.0]);
        let q = softmax_t(&z, 1.0).unwrap();
        let expected = 0.181_476_564_453_430_17;
        assert!((kl_div(&p, &q).unwrap() - expected).abs() < 1e-14);
        assert!((kl_div_logits(&p, &z, 1.0).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn kl_rejects_class_mismatch() {
        let p = SparseProbs::new(3, vec![0], vec![1.0]).unwrap();
        let q = DenseProbs::new(vec![0.5, 0.5]).unwrap();
        assert!(kl_div(&p, &q).is_err());
    }

    #[test]
    fn closed_form_relations() {
        assert_eq!(optimal_logit_gap(0.3, 0.3, 0.7).unwrap(), 0.0);
        assert!((optimal_logit_gap(std::f64::consts::E, 1.0, 1.0).unwrap() - 1.0).abs() < 1e-15);
        assert!((optimal_logit_gap(0.8, 0.2, 0.5).unwrap() - 0.5 * 4f64.ln()).abs() < 1e-15);
        assert!(optimal_logit_gap(0.0, 0.2, 0.5).is_err());
        assert!(optimal_logit_gap(0.1, 0.2, 0.0).is_err());

        assert!((temperature_upper_bound(3f64.ln(), 3.0).unwrap() - 1.0).abs() < 1e-15);
        let e2 = std::f64::consts::E.powi(2);
        assert!((temperature_upper_bound(10.0, e2).unwrap() - 5.0).abs() < 1e-14);
        assert!(temperature_upper_bound(10.0, 1.0).is_err());
        assert!(temperature_upper_bound(0.0, 2.0).is_err());
    }

    #[test]
    fn matched_logits_reach_near_zero_kl() {
        let p = SparseProbs::new(6, vec![4, 1, 2], vec![0.6, 0.3, 0.1]).unwrap();
        for tau in [0.1, 0.5, 1.0] {
            let z = matched_student_logits(&p, tau).unwrap();
            let kl = kl_div(&p, &softmax_t(&z, tau).unwrap()).unwrap();
            assert!(kl <= 1e-6, "tau {tau}: kl {kl}");
        }
    }
}
