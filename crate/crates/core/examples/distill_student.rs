// Train a student from a heavily pruned store, with and without the
// annealed teacher temperature and student temperature calibration.

use softlabel::trainer::{
    generate_task, relabel, train_student, RelabelConfig, TaskSpec, TrainConfig,
};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let task = generate_task(&TaskSpec {
        num_classes: 6,
        dim: 8,
        ipc: 10,
        seed: 5,
        ..Default::default()
    })?;
    println!(
        "teacher test accuracy {:.4}",
        task.teacher.accuracy(&task.test)
    );
    let store = relabel(
        &task.distilled,
        &task.teacher,
        &RelabelConfig {
            total_epochs: 120,
            pruning_rate: 0.9,
            batch_size: 10,
            top_k: 2,
            seed: 5,
        },
    )?;
    for (name, dkr, ca) in [
        ("fixed temperature", false, false),
        ("annealed", true, false),
        ("annealed + calibrated", true, true),
    ] {
        let r = train_student(
            &store,
            &task,
            &TrainConfig {
                dkr,
                ca,
                seed: 5,
                ..Default::default()
            },
        )?;
        println!(
            "{name:<22} accuracy {:.4}  final loss {:.4}  mean student temperature {}",
            r.final_accuracy,
            r.epoch_loss.last().copied().unwrap_or(f64::NAN),
            r.mean_calibrated_tau()
                .map_or("1 (fixed)".to_string(), |t| format!("{t:.3}"))
        );
    }
    Ok(())
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
