// Relabel a distilled set with pruning and top-k quantization, write the
// store, read it back and account for every byte.

use softlabel::store::{
    compression_report, decode_store, encode_store, storage_breakdown, Baseline,
};
use softlabel::trainer::{generate_task, relabel, RelabelConfig, TaskSpec};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let task = generate_task(&TaskSpec {
        num_classes: 10,
        dim: 8,
        ipc: 5,
        seed: 1,
        ..Default::default()
    })?;
    let cfg = RelabelConfig {
        total_epochs: 100,
        pruning_rate: 0.9,
        batch_size: 10,
        top_k: 2,
        seed: 1,
    };
    let store = relabel(&task.distilled, &task.teacher, &cfg)?;
    let bytes = encode_store(&store)?;
    let back = decode_store(&bytes)?;
    assert_eq!(back, store);
    println!(
        "{} of {} epochs kept, {} batches each, {} bytes on disk",
        store.shape.retained_epochs,
        store.shape.total_epochs,
        store.shape.batches_per_epoch,
        bytes.len()
    );

    let breakdown = storage_breakdown(&store)?;
    for c in &breakdown.components {
        println!(
            "  {:<16} {:>8} bytes  {:>6.2}%",
            c.component.name(),
            c.bytes,
            100.0 * c.fraction
        );
    }
    let report = compression_report(&breakdown, &Baseline::of(&store.shape))?;
    println!(
        "logit payload {:.1}x smaller, whole file {:.1}x smaller",
        report.theoretical_z_ratio, report.actual_ratio
    );
    assert_eq!(report.store_bytes, bytes.len());
    Ok(())
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
