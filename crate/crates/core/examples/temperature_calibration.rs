// The annealed teacher temperature for reused labels, and the grid search
// that picks the student temperature.

use softlabel::calibration::{
    calibrate_student_temperature, kd_loss, teacher_temperature, TemperatureGrid,
    TemperatureSchedule,
};
use softlabel::logits::{
    matched_student_logits, quantized_probs, temperature_upper_bound, topk_quantize, LogitVector,
};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let schedule = TemperatureSchedule::default();
    let taus: Vec<String> = [0, 29, 30, 60, 90, 150, 210, 299]
        .iter()
        .map(|&e| format!("{e}:{:.3}", teacher_temperature(&schedule, e)))
        .collect();
    println!("teacher temperature by epoch: {}", taus.join("  "));

    // A batch of top-3 teacher labels and student logits that match them
    // exactly at temperature 0.4. The search finds that temperature.
    let grid = TemperatureGrid::default();
    let raw = [
        vec![4.0, 1.0, 0.5, -1.0, 2.2],
        vec![0.3, 2.9, -0.7, 1.1, 0.0],
        vec![-1.5, 0.4, 3.3, 2.0, 1.2],
    ];
    let mut teacher = Vec::new();
    let mut student = Vec::new();
    for z in raw {
        let p = quantized_probs(&topk_quantize(&LogitVector::new(z)?, 3)?, 2.0)?;
        student.push(matched_student_logits(&p, 0.4)?);
        teacher.push(p);
    }
    let found = calibrate_student_temperature(&teacher, &student, &grid)?;
    println!(
        "calibrated student temperature {:.2} (KL {:.2e})",
        found.tau_star, found.min_kl
    );
    assert!((found.tau_star - 0.4).abs() <= 0.01 + 1e-12);

    // Largest temperature that can realize a probability ratio of 20 with a
    // logit gap of at most 3.
    println!(
        "temperature bound for gap 3, ratio 20: {:.4}",
        temperature_upper_bound(3.0, 20.0)?
    );

    let (loss, grad) = kd_loss(&teacher[0], &LogitVector::new(vec![0.0; 5])?, 1.0)?;
    println!("KD loss of a flat student {loss:.4}, gradient {grad:.4?}");
    Ok(())
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
