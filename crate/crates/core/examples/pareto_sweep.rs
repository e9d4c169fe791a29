// Sweep pruning rate and top-k together and print the accuracy/storage front.

use softlabel::trainer::{generate_task, pareto_sweep, SweepConfig, TaskSpec, TrainConfig};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let task = generate_task(&TaskSpec {
        num_classes: 5,
        dim: 6,
        ipc: 6,
        seed: 6,
        ..Default::default()
    })?;
    let mut configs = Vec::new();
    for p in [0.0, 0.5, 0.9] {
        for k in [1, 2, 0] {
            configs.push((p, k));
        }
    }
    let table = pareto_sweep(
        &task,
        &SweepConfig {
            total_epochs: 40,
            batch_size: 5,
            configs,
            seeds: vec![0, 1],
            train: TrainConfig::default(),
            jobs: 2,
        },
    )?;
    println!(
        "{:>5} {:>3} {:>8} {:>8} {:>8}",
        "p", "k", "bytes", "ratio", "acc"
    );
    for r in &table.rows {
        println!(
            "{:>5.2} {:>3} {:>8} {:>8.2} {:>8.4} {}",
            r.pruning_rate,
            r.top_k,
            r.storage_bytes,
            r.actual_ratio,
            r.mean_accuracy,
            if r.non_dominated { "front" } else { "" }
        );
    }
    assert!(table
        .rows
        .windows(2)
        .all(|w| w[0].storage_bytes <= w[1].storage_bytes));
    Ok(())
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
