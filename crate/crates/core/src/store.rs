//! The soft-label store: pruning plan, `SLBL` binary codec and byte accounting.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! header   "SLBL" | version u16 | flags u16 (bit0 = quantized)
//!          | C u32 | B u32 | T u32 | retained_epochs u32 | batches_per_epoch u32 | k u32
//! batch*   epoch u32 | batch u32
//!          | image_indices B x u32
//!          | crops B x 4 x f32 | flips B x u8 | partners B x u32
//!          | strength f32 | bbox 4 x u32
//!          | labels: full B x C x f32, or quantized B x k x u32 then B x k x f32
//! ```
//!
//! A store holds exactly `retained_epochs * batches_per_epoch` batches in
//! (epoch, batch) order; the count is implied by the header.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::logits::{LogitVector, QuantizedLogits};

pub const MAGIC: &[u8; 4] = b"SLBL";
pub const VERSION: u16 = 1;
const FLAG_QUANTIZED: u16 = 1;

pub const HEADER_BYTES: usize = 4 + 2 + 2 + 4 * 6;
/// Epoch and batch ids at the start of every batch record.
pub const BATCH_ID_BYTES: usize = 8;

/// Which stored epoch supplies labels at each training epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrunePlan {
    pub total_epochs: usize,
    pub pruning_rate: f64,
    /// Batches per epoch after the trailing incomplete batch is dropped.
    pub batches_per_epoch: usize,
    pub retained_epochs: usize,
}

impl PrunePlan {
    /// Stored epoch replayed at training epoch `epoch` (cyclic reuse).
    pub fn reuse(&self, epoch: usize) -> usize {
        epoch % self.retained_epochs
    }

    pub fn retained_batches(&self) -> usize {
        self.retained_epochs * self.batches_per_epoch
    }
}

/// Keeps the first `round((1 - p) * T)` epochs (at least one) of labels.
pub fn prune_plan(
    total_epochs: usize,
    pruning_rate: f64,
    batches_per_epoch: usize,
) -> Result<PrunePlan> {
    if total_epochs == 0 {
        return Err(invalid("total epochs must be >= 1"));
    }
    if !(0.0..1.0).contains(&pruning_rate) {
        return Err(invalid(format!(
            "pruning rate must be in [0, 1), got {pruning_rate}"
        )));
    }
    if batches_per_epoch == 0 {
        return Err(invalid("batches_per_epoch must be >= 1"));
    }
    let retained =
        (((1.0 - pruning_rate) * total_epochs as f64).round() as usize).clamp(1, total_epochs);
    Ok(PrunePlan {
        total_epochs,
        pruning_rate,
        batches_per_epoch,
        retained_epochs: retained,
    })
}

/// Batches per epoch for `dataset_size` images at batch size `batch_size`,
/// with the last batch of the epoch excluded from the label pool.
pub fn usable_batches(dataset_size: usize, batch_size: usize) -> Result<usize> {
    if batch_size == 0 {
        return Err(invalid("batch size must be >= 1"));
    }
    let n = dataset_size.div_ceil(batch_size).saturating_sub(1);
    if n == 0 {
        return Err(invalid(format!(
            "{dataset_size} images at batch size {batch_size} leave no batch after dropping the last one"
        )));
    }
    Ok(n)
}

/// Stored supervision of one batch, row-major per sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BatchLabels {
    /// `B x C` logits.
    Full(Vec<f32>),
    /// `B x k` class indices and the matching `B x k` logits.
    Quantized { indices: Vec<u32>, values: Vec<f32> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub epoch: u32,
    pub batch: u32,
    pub image_indices: Vec<u32>,
    /// Per-sample affine jitter parameters.
    pub crops: Vec<[f32; 4]>,
    pub flips: Vec<bool>,
    pub cutmix_partners: Vec<u32>,
    /// Mixing strength, one per batch.
    pub cutmix_strength: f32,
    pub cutmix_bbox: [u32; 4],
    pub labels: BatchLabels,
}

/// Header fields shared by every batch of a store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreShape {
    pub num_classes: usize,
    pub batch_size: usize,
    pub total_epochs: usize,
    pub retained_epochs: usize,
    pub batches_per_epoch: usize,
    /// 0 for full labels.
    pub k: usize,
}

impl StoreShape {
    pub fn is_quantized(&self) -> bool {
        self.k > 0
    }

    pub fn num_batches(&self) -> usize {
        self.retained_epochs * self.batches_per_epoch
    }

    /// Label payload of one sample in bytes.
    pub fn label_bytes_per_sample(&self) -> usize {
        if self.is_quantized() {
            self.k * 8
        } else {
            self.num_classes * 4
        }
    }

    pub fn batch_bytes(&self) -> usize {
        let b = self.batch_size;
        BATCH_ID_BYTES + b * 4 + b * 16 + b + b * 4 + 4 + 16 + b * self.label_bytes_per_sample()
    }

    pub fn file_bytes(&self) -> usize {
        HEADER_BYTES + self.num_batches() * self.batch_bytes()
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.num_classes < 2 {
            return Err(format!("C must be >= 2, got {}", self.num_classes));
        }
        if self.batch_size == 0 {
            return Err("B must be >= 1".into());
        }
        if self.k > self.num_classes {
            return Err(format!("k = {} exceeds C = {}", self.k, self.num_classes));
        }
        if self.retained_epochs == 0 || self.retained_epochs > self.total_epochs {
            return Err(format!(
                "retained epochs {} outside [1, T = {}]",
                self.retained_epochs, self.total_epochs
            ));
        }
        if self.batches_per_epoch == 0 {
            return Err("batches_per_epoch must be >= 1".into());
        }
        for v in [
            self.num_classes,
            self.batch_size,
            self.total_epochs,
            self.batches_per_epoch,
            self.k,
        ] {
            if v > u32::MAX as usize {
                return Err(format!("header value {v} does not fit in u32"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelStore {
    pub shape: StoreShape,
    pub batches: Vec<BatchRecord>,
}

impl LabelStore {
    /// Builds a store and checks every invariant.
    pub fn new(shape: StoreShape, batches: Vec<BatchRecord>) -> Result<Self> {
        let store = Self { shape, batches };
        store.check().map_err(Error::InvalidArgument)?;
        Ok(store)
    }

    pub fn plan(&self) -> PrunePlan {
        PrunePlan {
            total_epochs: self.shape.total_epochs,
            pruning_rate: 1.0 - self.shape.retained_epochs as f64 / self.shape.total_epochs as f64,
            batches_per_epoch: self.shape.batches_per_epoch,
            retained_epochs: self.shape.retained_epochs,
        }
    }

    /// Batch `batch` of stored epoch `epoch`.
    pub fn batch(&self, epoch: usize, batch: usize) -> &BatchRecord {
        &self.batches[epoch * self.shape.batches_per_epoch + batch]
    }

    /// Logits of sample `row` as stored; full labels only.
    pub fn full_logits(&self, record: &BatchRecord, row: usize) -> Result<LogitVector> {
        match &record.labels {
            BatchLabels::Full(values) => {
                let c = self.shape.num_classes;
                LogitVector::from_f32(&values[row * c..(row + 1) * c])
            }
            BatchLabels::Quantized { .. } => Err(invalid("store holds quantized labels")),
        }
    }

    /// Top-k logits of sample `row`. Full labels are returned with `k = C`.
    pub fn quantized_logits(&self, record: &BatchRecord, row: usize) -> Result<QuantizedLogits> {
        match &record.labels {
            BatchLabels::Full(_) => {
                let z = self.full_logits(record, row)?;
                crate::logits::topk_quantize(&z, self.shape.num_classes)
            }
            BatchLabels::Quantized { indices, values } => {
                let k = self.shape.k;
                let span = row * k..(row + 1) * k;
                QuantizedLogits::new(
                    self.shape.num_classes,
                    indices[span.clone()].to_vec(),
                    values[span].iter().map(|&v| f64::from(v)).collect(),
                )
            }
        }
    }

    fn check(&self) -> std::result::Result<(), String> {
        let s = &self.shape;
        s.validate()?;
        if self.batches.is_empty() {
            return Err("store has no batches".into());
        }
        if self.batches.len() != s.num_batches() {
            return Err(format!(
                "expected {} batches ({} epochs x {}), found {}",
                s.num_batches(),
                s.retained_epochs,
                s.batches_per_epoch,
                self.batches.len()
            ));
        }
        for (n, rec) in self.batches.iter().enumerate() {
            check_batch(s, n, rec).map_err(|e| format!("batch {n}: {e}"))?;
        }
        Ok(())
    }
}

fn check_batch(s: &StoreShape, n: usize, rec: &BatchRecord) -> std::result::Result<(), String> {
    let (epoch, batch) = (n / s.batches_per_epoch, n % s.batches_per_epoch);
    if rec.epoch as usize != epoch || rec.batch as usize != batch {
        return Err(format!(
            "ids ({}, {}) out of order, expected ({epoch}, {batch})",
            rec.epoch, rec.batch
        ));
    }
    let b = s.batch_size;
    if rec.image_indices.len() != b
        || rec.crops.len() != b
        || rec.flips.len() != b
        || rec.cutmix_partners.len() != b
    {
        return Err(format!("per-sample fields must all have length B = {b}"));
    }
    if rec.crops.iter().flatten().any(|v| !v.is_finite()) {
        return Err("non-finite crop parameter".into());
    }
    if !(0.0..=1.0).contains(&rec.cutmix_strength) {
        return Err(format!(
            "cutmix strength {} outside [0, 1]",
            rec.cutmix_strength
        ));
    }
    match &rec.labels {
        BatchLabels::Full(values) => {
            if s.is_quantized() {
                return Err("full labels in a quantized store".into());
            }
            if values.len() != b * s.num_classes {
                return Err(format!(
                    "expected {} logits, found {}",
                    b * s.num_classes,
                    values.len()
                ));
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err("non-finite logit".into());
            }
        }
        BatchLabels::Quantized { indices, values } => {
            if !s.is_quantized() {
                return Err("quantized labels in a full store".into());
            }
            if indices.len() != b * s.k || values.len() != b * s.k {
                return Err(format!("expected {} top-k entries", b * s.k));
            }
            for row in 0..b {
                let span = row * s.k..(row + 1) * s.k;
                QuantizedLogits::new(
                    s.num_classes,
                    indices[span.clone()].to_vec(),
                    values[span].iter().map(|&v| f64::from(v)).collect(),
                )
                .map_err(|e| format!("row {row}: {e}"))?;
            }
        }
    }
    Ok(())
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

/// Serializes a store. Identical stores produce identical bytes.
pub fn encode_store(store: &LabelStore) -> Result<Vec<u8>> {
    store.check().map_err(Error::Encoding)?;
    let s = &store.shape;
    let mut out = Vec::with_capacity(s.file_bytes());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let flags = if s.is_quantized() { FLAG_QUANTIZED } else { 0 };
    out.extend_from_slice(&flags.to_le_bytes());
    for v in [
        s.num_classes,
        s.batch_size,
        s.total_epochs,
        s.retained_epochs,
        s.batches_per_epoch,
        s.k,
    ] {
        put_u32(&mut out, v);
    }
    for rec in &store.batches {
        out.extend_from_slice(&rec.epoch.to_le_bytes());
        out.extend_from_slice(&rec.batch.to_le_bytes());
        rec.image_indices
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        rec.crops
            .iter()
            .flatten()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        out.extend(rec.flips.iter().map(|&f| f as u8));
        rec.cutmix_partners
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        out.extend_from_slice(&rec.cutmix_strength.to_le_bytes());
        rec.cutmix_bbox
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        match &rec.labels {
            BatchLabels::Full(values) => values
                .iter()
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            BatchLabels::Quantized { indices, values } => {
                indices
                    .iter()
                    .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
                values
                    .iter()
                    .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
            }
        }
    }
    debug_assert_eq!(out.len(), s.file_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::Format(format!(
                    "truncated stream: need {n} bytes at offset {}, have {}",
                    self.pos,
                    self.buf.len() - self.pos
                ))
            })?;
        let slice = &self.buf[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Parses and validates a store.
pub fn decode_store(bytes: &[u8]) -> Result<LabelStore> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)
        .map_err(|_| Error::Format("stream shorter than magic".into()))?
        != MAGIC
    {
        return Err(Error::Format("bad magic, not a label store".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let flags = r.u16()?;
    if flags & !FLAG_QUANTIZED != 0 {
        return Err(Error::CorruptStore(format!(
            "unknown flag bits {flags:#06x}"
        )));
    }
    let mut h = [0usize; 6];
    for v in h.iter_mut() {
        *v = r.u32()? as usize;
    }
    let shape = StoreShape {
        num_classes: h[0],
        batch_size: h[1],
        total_epochs: h[2],
        retained_epochs: h[3],
        batches_per_epoch: h[4],
        k: h[5],
    };
    if (flags & FLAG_QUANTIZED != 0) != shape.is_quantized() {
        return Err(Error::CorruptStore(format!(
            "quantized flag disagrees with k = {}",
            shape.k
        )));
    }
    shape.validate().map_err(Error::CorruptStore)?;
    // Reject absurd headers before allocating per-batch buffers.
    let expected = shape
        .num_batches()
        .checked_mul(shape.batch_bytes())
        .and_then(|n| n.checked_add(HEADER_BYTES));
    match expected {
        Some(n) if n == bytes.len() => {}
        Some(n) if n > bytes.len() => {
            return Err(Error::Format(format!(
                "truncated stream: header implies {n} bytes, have {}",
                bytes.len()
            )))
        }
        Some(n) => {
            return Err(Error::Format(format!(
                "{} trailing bytes after last batch",
                bytes.len() - n
            )))
        }
        None => {
            return Err(Error::CorruptStore(
                "header implies an impossible size".into(),
            ))
        }
    }

    let b = shape.batch_size;
    let mut batches = Vec::with_capacity(shape.num_batches());
    for _ in 0..shape.num_batches() {
        let epoch = r.u32()?;
        let batch = r.u32()?;
        let image_indices = r.u32s(b)?;
        let crops = r
            .f32s(b * 4)?
            .chunks_exact(4)
            .map(|c| [c[0], c[1], c[2], c[3]])
            .collect();
        let flips = r
            .take(b)?
            .iter()
            .map(|&f| match f {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::CorruptStore(format!("flip byte {other} is not 0/1"))),
            })
            .collect::<Result<Vec<bool>>>()?;
        let cutmix_partners = r.u32s(b)?;
        let cutmix_strength = r.f32()?;
        let bb = r.u32s(4)?;
        let labels = if shape.is_quantized() {
            let indices = r.u32s(b * shape.k)?;
            let values = r.f32s(b * shape.k)?;
            BatchLabels::Quantized { indices, values }
        } else {
            BatchLabels::Full(r.f32s(b * shape.num_classes)?)
        };
        batches.push(BatchRecord {
            epoch,
            batch,
            image_indices,
            crops,
            flips,
            cutmix_partners,
            cutmix_strength,
            cutmix_bbox: [bb[0], bb[1], bb[2], bb[3]],
            labels,
        });
    }
    let store = LabelStore { shape, batches };
    store.check().map_err(Error::CorruptStore)?;
    Ok(store)
}

/// Named byte category in a store file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Crops,
    Flips,
    CutmixPartners,
    CutmixStrength,
    CutmixBbox,
    Logits,
    ImageIndices,
    /// File header plus the per-batch epoch/batch ids.
    Header,
}

impl Component {
    pub const ALL: [Component; 8] = [
        Component::Crops,
        Component::Flips,
        Component::CutmixPartners,
        Component::CutmixStrength,
        Component::CutmixBbox,
        Component::Logits,
        Component::ImageIndices,
        Component::Header,
    ];

    /// The six per-batch label components (augmentations and logits).
    pub fn is_label_component(self) -> bool {
        !matches!(self, Component::ImageIndices | Component::Header)
    }

    pub fn name(self) -> &'static str {
        match self {
            Component::Crops => "crops",
            Component::Flips => "flips",
            Component::CutmixPartners => "cutmix_partners",
            Component::CutmixStrength => "cutmix_strength",
            Component::CutmixBbox => "cutmix_bbox",
            Component::Logits => "logits",
            Component::ImageIndices => "image_indices",
            Component::Header => "header",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentBytes {
    pub component: Component,
    pub bytes: usize,
    /// Share of the whole file.
    pub fraction: f64,
    /// Share of the six label components only; `None` for indices and header.
    pub label_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StorageBreakdown {
    pub shape: StoreShape,
    pub components: Vec<ComponentBytes>,
    pub total_bytes: usize,
}

impl StorageBreakdown {
    pub fn bytes(&self, c: Component) -> usize {
        self.components
            .iter()
            .find(|e| e.component == c)
            .map_or(0, |e| e.bytes)
    }

    pub fn get(&self, c: Component) -> &ComponentBytes {
        self.components
            .iter()
            .find(|e| e.component == c)
            .expect("every component is listed")
    }

    /// Everything that is not logit payload.
    pub fn auxiliary_bytes(&self) -> usize {
        self.total_bytes - self.bytes(Component::Logits)
    }
}

/// Byte accounting of a store shape, from the format arithmetic alone.
pub fn shape_breakdown(shape: &StoreShape) -> StorageBreakdown {
    let n = shape.num_batches();
    let b = shape.batch_size;
    let count = |c: Component| -> usize {
        match c {
            Component::Crops => n * b * 16,
            Component::Flips => n * b,
            Component::CutmixPartners => n * b * 4,
            Component::CutmixStrength => n * 4,
            Component::CutmixBbox => n * 16,
            Component::Logits => n * b * shape.label_bytes_per_sample(),
            Component::ImageIndices => n * b * 4,
            Component::Header => HEADER_BYTES + n * BATCH_ID_BYTES,
        }
    };
    let total: usize = Component::ALL.iter().map(|&c| count(c)).sum();
    let label_total: usize = Component::ALL
        .iter()
        .filter(|c| c.is_label_component())
        .map(|&c| count(c))
        .sum();
    let components = Component::ALL
        .iter()
        .map(|&c| ComponentBytes {
            component: c,
            bytes: count(c),
            fraction: count(c) as f64 / total as f64,
            label_fraction: c
                .is_label_component()
                .then(|| count(c) as f64 / label_total as f64),
        })
        .collect();
    StorageBreakdown {
        shape: *shape,
        components,
        total_bytes: total,
    }
}

/// Per-component byte counts of `store`; the total equals the encoded length.
pub fn storage_breakdown(store: &LabelStore) -> Result<StorageBreakdown> {
    if store.batches.is_empty() {
        return Err(invalid("store has no batches"));
    }
    Ok(shape_breakdown(&store.shape))
}

/// The unpruned, full-label store a compressed store is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Baseline {
    pub total_epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub num_classes: usize,
}

impl Baseline {
    pub fn of(shape: &StoreShape) -> Self {
        Self {
            total_epochs: shape.total_epochs,
            batches_per_epoch: shape.batches_per_epoch,
            batch_size: shape.batch_size,
            num_classes: shape.num_classes,
        }
    }

    pub fn shape(&self) -> StoreShape {
        StoreShape {
            num_classes: self.num_classes,
            batch_size: self.batch_size,
            total_epochs: self.total_epochs,
            retained_epochs: self.total_epochs,
            batches_per_epoch: self.batches_per_epoch,
            k: 0,
        }
    }

    pub fn logit_bytes(&self) -> usize {
        self.total_epochs * self.batches_per_epoch * self.batch_size * self.num_classes * 4
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    /// Baseline logit payload over stored logit payload.
    pub theoretical_z_ratio: f64,
    /// Baseline file size over stored file size.
    pub actual_ratio: f64,
    pub baseline_bytes: usize,
    pub store_bytes: usize,
}

pub fn compression_report(
    breakdown: &StorageBreakdown,
    baseline: &Baseline,
) -> Result<CompressionReport> {
    let logits = breakdown.bytes(Component::Logits);
    if breakdown.total_bytes == 0 || logits == 0 {
        return Err(invalid("store size is zero"));
    }
    let baseline_bytes = baseline.shape().file_bytes();
    Ok(CompressionReport {
        theoretical_z_ratio: baseline.logit_bytes() as f64 / logits as f64,
        actual_ratio: baseline_bytes as f64 / breakdown.total_bytes as f64,
        baseline_bytes,
        store_bytes: breakdown.total_bytes,
    })
}
