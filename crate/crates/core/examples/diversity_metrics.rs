// Within-class cosine similarity and MMD of a feature set against a
// reference set.

use softlabel::diversity::{diversity_report, mmd_squared, Bandwidth};
use softlabel::features::FeatureMatrix;
use softlabel::trainer::{generate_task, TaskSpec};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let task = generate_task(&TaskSpec {
        num_classes: 4,
        dim: 6,
        seed: 2,
        ..Default::default()
    })?;

    // A collapsed set: every class repeats a single vector with tiny noise.
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (c, members) in task.train.class_indices().iter().enumerate() {
        let base = task.train.row(members[0]);
        for i in 0..5 {
            rows.push(base.iter().map(|v| v + 0.01 * i as f64).collect());
            labels.push(c as u32);
        }
    }
    let collapsed = FeatureMatrix::new(6, 4, rows, labels)?;

    for (name, set) in [("distilled", &task.distilled), ("collapsed", &collapsed)] {
        let r = diversity_report(set, Some(&task.train), Bandwidth::Median)?;
        println!(
            "{name:<10} cosine {:.4} +- {:.4}   MMD^2 {:.5} (sigma {:.3})",
            r.cosine.overall_mean,
            r.cosine.overall_std,
            r.mmd_squared.unwrap_or(f64::NAN),
            r.bandwidth.unwrap_or(f64::NAN)
        );
    }

    let (same, _) = mmd_squared(&task.train, &task.train, Bandwidth::Fixed(1.0))?;
    println!("MMD^2 of a set with itself: {same:.2e}");
    Ok(())
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
